//! Flat binary dataset files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "MFDS"
//! version  u32
//! N        u64      clients
//! n        u64      samples per client
//! d        u64      feature dimension
//! kind     u8       objective kind (0 quadratic, 1 logistic, 2 mlp)
//! samples  N*n*(d+1) f64, row-major: client, sample, [features.., target]
//! generators N*(2d+4) f64: mean_shift[d], label_bias, teacher[d],
//!          feature_scale, noise, class_separation
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ClientDataset, ClientGenerator, ObjectiveKind, Sample, TargetKind};
use crate::error::{config_err, Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MFDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_datasets(kind: ObjectiveKind, clients: &[ClientDataset]) -> Result<Vec<u8>> {
    let first = clients.first().ok_or_else(|| config_err("no datasets to write"))?;
    let n = first.len();
    let d = first.feature_dim();
    if clients.iter().any(|c| c.len() != n || c.feature_dim() != d) {
        return Err(config_err("dataset file requires equal sample counts and dimensions"));
    }
    let mut out = Vec::with_capacity(33 + 32 + 8 * clients.len() * (n * (d + 1) + 2 * d + 4));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [clients.len(), n, d] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.push(kind.code());
    let mut put = |x: f64| out.extend_from_slice(&x.to_le_bytes());
    for c in clients {
        for s in &c.samples {
            s.features.iter().for_each(|&x| put(x));
            put(s.target);
        }
    }
    for c in clients {
        let g = &c.generator;
        g.mean_shift.iter().for_each(|&x| put(x));
        put(g.label_bias);
        g.teacher.iter().for_each(|&x| put(x));
        put(g.feature_scale);
        put(g.noise);
        put(g.class_separation);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_datasets(bytes: &[u8]) -> Result<(ObjectiveKind, Vec<ClientDataset>)> {
    if bytes.len() < 33 + 32 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let (bytes, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(bytes).as_slice() != digest {
        return Err(Error::Format("dataset file failed its integrity check".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_clients = r.u64()? as usize;
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let code = r.take(1)?[0];
    let kind = ObjectiveKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown kind code {code}")))?;
    let expected = n_clients
        .checked_mul(n * (d + 1) + 2 * d + 4)
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| Error::Format("dataset header sizes overflow".into()))?;
    if bytes.len() - r.pos != expected {
        return Err(Error::Format(format!(
            "dataset body is {} bytes, header implies {expected}",
            bytes.len() - r.pos
        )));
    }
    let target = match kind {
        ObjectiveKind::Logistic => TargetKind::Classification,
        _ => TargetKind::Regression,
    };
    let mut samples_per_client = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let features = r.f64s(d)?;
            let target = r.f64()?;
            samples.push(Sample { features, target });
        }
        samples_per_client.push(samples);
    }
    let mut clients = Vec::with_capacity(n_clients);
    for (i, samples) in samples_per_client.into_iter().enumerate() {
        let mean_shift = r.f64s(d)?;
        let label_bias = r.f64()?;
        let teacher = r.f64s(d)?;
        let feature_scale = r.f64()?;
        let noise = r.f64()?;
        let class_separation = r.f64()?;
        clients.push(ClientDataset {
            client_id: i,
            samples,
            generator: ClientGenerator {
                target,
                mean_shift,
                label_bias,
                teacher,
                feature_scale,
                noise,
                class_separation,
            },
        });
    }
    Ok((kind, clients))
}

pub fn write_datasets(path: &Path, kind: ObjectiveKind, clients: &[ClientDataset]) -> Result<()> {
    fs::write(path, encode_datasets(kind, clients)?)?;
    Ok(())
}

pub fn read_datasets(path: &Path) -> Result<(ObjectiveKind, Vec<ClientDataset>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode_datasets(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.bytes.len() {
            return Err(Error::Format("unexpected end of dataset file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        (0..k).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_clients;

    #[test]
    fn roundtrip_is_exact() {
        let clients = gen_clients(3, 7, 4, 0.8, ObjectiveKind::Logistic, 17).unwrap();
        let bytes = encode_datasets(ObjectiveKind::Logistic, &clients).unwrap();
        assert_eq!(&bytes[..4], b"MFDS");
        let (kind, back) = decode_datasets(&bytes).unwrap();
        assert_eq!(kind, ObjectiveKind::Logistic);
        assert_eq!(back, clients);
    }

    #[test]
    fn header_fields_little_endian() {
        let clients = gen_clients(2, 3, 5, 0.0, ObjectiveKind::Quadratic, 1).unwrap();
        let bytes = encode_datasets(ObjectiveKind::Quadratic, &clients).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 5);
        assert_eq!(bytes[32], 0);
        let first = f64::from_le_bytes(bytes[33..41].try_into().unwrap());
        assert_eq!(first, clients[0].samples[0].features[0]);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let clients = gen_clients(1, 2, 2, 0.0, ObjectiveKind::Quadratic, 1).unwrap();
        let mut bytes = encode_datasets(ObjectiveKind::Quadratic, &clients).unwrap();
        assert!(decode_datasets(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(decode_datasets(&bytes).is_err());
    }
}
