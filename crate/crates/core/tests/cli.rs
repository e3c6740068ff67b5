use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maskfl::cli::artifacts::{parse_kv, parse_metrics_csv, METRICS_HEADER};

const BASE: &str = r#"
[objective]
kind = "quadratic"
ridge = 0.1

[data]
clients = 3
samples = 40
dim = 4
heterogeneity = 0.5
seed = 3

[plan]
mode = "random"
p = 0.7

[trainer]
K = 3
R = 30
eta = "thm1"
W = 10.0
seed = 5
record_every = 5

[constants]
trials = 10
"#;

fn maskfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(dir: &Path, cfg: &str, out: &str) -> Output {
    let cfg = write_config(dir, "cfg.toml", cfg);
    let out = dir.join(out);
    maskfl(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), BASE, "a");
    assert!(a.status.success(), "{}", stderr(&a));
    for f in ["metrics.csv", "model.bin", "constants.txt", "config.toml", "datasets.bin"] {
        assert!(tmp.path().join("a").join(f).exists(), "{f}");
    }
    let b = train(tmp.path(), BASE, "b");
    assert!(b.status.success());
    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "metrics.csv"), read("b", "metrics.csv"));
    assert_eq!(read("a", "model.bin"), read("b", "model.bin"));

    let csv = String::from_utf8(read("a", "metrics.csv")).unwrap();
    assert!(csv.starts_with(METRICS_HEADER));
    let rows = parse_metrics_csv(&csv).unwrap();
    let rounds: Vec<usize> = rows.iter().map(|r| r.2.round).collect();
    assert_eq!(rounds, vec![0, 5, 10, 15, 20, 25, 30]);
    assert!(rows.iter().all(|r| r.0 == "train" && r.1 == 5));
    // 17 significant digits round-trip exactly
    for line in csv.lines().skip(1) {
        for field in line.split(',').skip(3) {
            let x: f64 = field.parse().unwrap();
            assert_eq!(maskfl::cli::artifacts::fmt_f64(x), field);
        }
    }
    let consts = parse_kv(&String::from_utf8(read("a", "constants.txt")).unwrap()).unwrap();
    for k in ["L", "mu", "G", "W", "delta_sq", "mu_p", "L_p", "mu_tilde", "L_tilde"] {
        assert!(consts[k].parse::<f64>().unwrap().is_finite(), "{k}");
    }
}

#[test]
fn seed_override_changes_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.toml", BASE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(maskfl(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(maskfl(&["--workers", "2", "train", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "6"])
        .status
        .success());
    assert_ne!(fs::read(a.join("model.bin")).unwrap(), fs::read(b.join("model.bin")).unwrap());
}

#[test]
fn zero_probability_names_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &BASE.replace("p = 0.7", "p = [0.5, 0.0, 0.5]"), "x");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("plan.p"), "{}", stderr(&o));
}

#[test]
fn schema_violations_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &BASE.replace("[constants]", "[constants]\nbogus = 1"), "x");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
    let o = train(tmp.path(), &BASE.replace("K = 3", "K = \"three\""), "x");
    assert_eq!(o.status.code(), Some(2));
    let o = maskfl(&["train", "--config", "/nonexistent/cfg.toml", "--out", "/tmp/x"]);
    assert_ne!(o.status.code(), Some(0));
    assert_eq!(maskfl(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn numeric_blowup_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("eta = \"thm1\"", "eta = 1e6").replace("W = 10.0", "W = 1e300");
    let o = train(tmp.path(), &cfg, "x");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sweep_writes_cells_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("{BASE}\n[sweep]\nparam = \"p\"\nvalues = [1.0, 0.8, 0.6, 0.4]\nseeds = 5\n");
    let path = write_config(tmp.path(), "s.toml", &cfg);
    let out = tmp.path().join("sw");
    let o = maskfl(&["sweep", "--config", &path, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cells: Vec<_> = fs::read_dir(out.join("cells")).unwrap().collect();
    assert_eq!(cells.len(), 20);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 21);
    assert!(summary.starts_with("cell,param,value,seed_index,seed,F_gap"));

    let empty = format!("{BASE}\n[sweep]\nparam = \"p\"\nvalues = []\n");
    let path = write_config(tmp.path(), "e.toml", &empty);
    let o = maskfl(&["sweep", "--config", &path, "--out", tmp.path().join("e").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    let path = write_config(tmp.path(), "n.toml", BASE);
    let o = maskfl(&["sweep", "--config", &path, "--out", tmp.path().join("n").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stability_rows_slope_and_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("eta = \"thm1\"", "eta = \"stability\"").replace("R = 30", "R = 20")
        + "\n[stability]\nn = [10, 20, 40, 80]\nseeds = 20\ntest_samples = 50\n";
    let path = write_config(tmp.path(), "st.toml", &cfg);
    let out = tmp.path().join("st");
    let o = maskfl(&["stability", "--config", &path, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("stability.csv")).unwrap();
    assert!(csv.starts_with("seed,n,N,p,divergence,gap\n"));
    assert_eq!(csv.lines().count(), 81);
    let summary = parse_kv(&fs::read_to_string(out.join("stability_summary.txt")).unwrap()).unwrap();
    assert!(summary["slope"].parse::<f64>().unwrap().is_finite());

    let one = cfg.replace("seeds = 20", "seeds = 1");
    let path = write_config(tmp.path(), "one.toml", &one);
    let out = tmp.path().join("id");
    let o = maskfl(&[
        "stability",
        "--config",
        &path,
        "--out",
        out.to_str().unwrap(),
        "--debug-identity-perturbation",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("stability.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(4).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn analyze_full_run_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("p = 0.7", "p = 1.0").replace("R = 30", "R = 200");
    assert!(train(tmp.path(), &cfg, "run").status.success());
    let dir = tmp.path().join("run");
    let o = maskfl(&["analyze", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let kv = parse_kv(&fs::read_to_string(dir.join("analysis.txt")).unwrap()).unwrap();
    // with p = 1 the deficit term vanishes: bound = 2ε² and ε² = ||∇F||²
    let gf: f64 = kv["grad_norm_sq_F"].parse().unwrap();
    let gm: f64 = kv["grad_norm_sq_Fmask"].parse().unwrap();
    let bound: f64 = kv["bound"].parse().unwrap();
    assert!((gf - gm).abs() <= 1e-12 * gf.max(1e-300));
    assert!((bound - 2.0 * gm).abs() <= 1e-12 * bound.max(1e-300));
    assert_eq!(kv["bound_satisfied"], "yes");
    assert!(kv["margin"].parse::<f64>().unwrap() >= 0.0);

    let model = dir.join("model.bin");
    let mut bytes = fs::read(&model).unwrap();
    bytes[20] ^= 0x40;
    fs::write(&model, bytes).unwrap();
    let o = maskfl(&["analyze", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("integrity"), "{}", stderr(&o));

    fs::remove_file(&model).unwrap();
    assert_eq!(maskfl(&["analyze", dir.to_str().unwrap()]).status.code(), Some(4));
    assert_eq!(maskfl(&["analyze", tmp.path().join("nope").to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn rolling_train_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE
        .replace("mode = \"random\"\np = 0.7", "mode = \"rolling\"\ns = 2\nR = 4")
        .replace("R = 30", "R = 4\nT = 6")
        .replace("eta = \"thm1\"", "eta = \"thm4\"");
    let o = train(tmp.path(), &cfg, "r");
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_metrics_csv(&fs::read_to_string(tmp.path().join("r/metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.last().unwrap().2.round, 24);
}
