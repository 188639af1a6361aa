use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

fn wideprior(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wideprior")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = wideprior(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const REGRESSION: &str = r#"
task = "regression_1d"
seed = 3
activation = { kind = "mini_mlp" }

[gp]
noise_variance = 0.1
kernel = { family = "matern52", length_scale = 1.0, amplitude = 1.0 }

[bnn]
input_dim = 1
hidden_width = 40

[train]
steps = 200
learning_rate = 0.05
s_fn = 256
n_points = 8
x_batch = 1
eval_sets = 3

[hmc]
warmup = 100
draws = 200
chains = 2

[grid]
points = 21
"#;

const MOONS: &str = r#"
task = "two_moons"
seed = 5
activation = { kind = "fixed_relu" }

[gp]
kernel = { family = "matern52", length_scale = 1.0, amplitude = 1.0 }

[bnn]
input_dim = 2
hidden_width = 16

[train]
steps = 5
s_fn = 64
n_points = 8
input_box = [[-2.5, 2.5], [-2.5, 2.5]]
eval_sets = 2

[data]
n_points = 40

[hmc]
warmup = 50
draws = 50
chains = 2

[grid]
points = 5
"#;

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_csv(path);
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

#[test]
fn gen_data_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "r.toml", REGRESSION);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&c), "--seed", "4"]);
    let bytes = |d: &Path| fs::read(d.join("dataset.csv")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    assert!(!bytes(&a).contains(&b'\r'));
    let meta = fs::read_to_string(c.join("dataset_meta.json")).unwrap();
    assert!(meta.contains("\"seed\": 4"), "{meta}");
    let (header, rows) = read_csv(&a.join("dataset.csv"));
    assert_eq!(header, ["x", "y"]);
    assert_eq!(rows.len(), 20);
}

#[test]
fn two_moons_labels_are_balanced() {
    let tmp = TempDir::new().unwrap();
    let body = MOONS.replace("n_points = 40", "n_points = 200");
    let cfg = write_config(tmp.path(), "m.toml", &body);
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(tmp.path())]);
    let y = column(&tmp.path().join("dataset.csv"), "y");
    assert_eq!(y.len(), 200);
    assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 100);
    assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), 100);
}

#[test]
fn train_prior_smoke_run_decreases_loss_and_reproduces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "r.toml", REGRESSION);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let start = Instant::now();
    run_ok(&["train-prior", "--config", s(&cfg), "--out", s(&a), "--mode", "a+w"]);
    assert!(start.elapsed().as_secs_f64() < 60.0, "smoke run took {:?}", start.elapsed());
    run_ok(&["train-prior", "--config", s(&cfg), "--out", s(&b), "--mode", "a+w"]);

    let trace = a.join("loss_trace.csv");
    let (header, rows) = read_csv(&trace);
    assert_eq!(header, ["step", "loss", "seconds"]);
    assert_eq!(rows.len(), 200);
    let loss = column(&trace, "loss");
    let tail = loss[loss.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < loss[0], "loss {} at step 0, {tail} over the last 20 steps", loss[0]);

    // Identical apart from wall-clock seconds.
    let strip = |d: &Path| {
        let (_, rows) = read_csv(&d.join("loss_trace.csv"));
        rows.into_iter().map(|mut r| {
            r.pop();
            r
        }).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    for f in ["checkpoint.json", "metrics.csv", "per_set_loss.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (mh, mrows) = read_csv(&a.join("metrics.csv"));
    assert_eq!(mh.len(), 11);
    assert_eq!(mrows.len(), 1);
    assert_eq!(read_csv(&a.join("per_set_loss.csv")).1.len(), 3);
}

#[test]
fn every_mode_spelling_is_accepted_and_bad_modes_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let body = REGRESSION.replace("steps = 200", "steps = 2").replace("hidden_width = 40", "hidden_width = 8");
    let cfg = write_config(tmp.path(), "r.toml", &body);
    for mode in ["w", "a", "a+w"] {
        run_ok(&["train-prior", "--config", s(&cfg), "--out", s(&tmp.path().join(mode)), "--mode", mode]);
    }
    let out = wideprior(&["train-prior", "--config", s(&cfg), "--mode", "both"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        ("unknown.toml", REGRESSION.replace("seed = 3", "seed = 3\ncolour = \"red\"")),
        ("length.toml", REGRESSION.replace("length_scale = 1.0", "length_scale = -1.0")),
        ("box.toml", REGRESSION.replace("eval_sets = 3", "eval_sets = 3\ninput_box = [[1.0, 1.0]]")),
        ("dim.toml", REGRESSION.replace("input_dim = 1", "input_dim = 2")),
        ("noise.toml", REGRESSION.replace("noise_variance = 0.1", "noise_variance = -0.1")),
    ];
    for (name, body) in cases {
        let cfg = write_config(tmp.path(), name, &body);
        let out = wideprior(&["train-prior", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
        assert_eq!(out.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("wideprior: config error"), "{name}");
    }
    let out = wideprior(&["gen-data", "--config", s(&tmp.path().join("absent.toml"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_prior_checks_the_checkpoint_and_writes_the_prior_band() {
    let tmp = TempDir::new().unwrap();
    let body = REGRESSION.replace("steps = 200", "steps = 10");
    let cfg = write_config(tmp.path(), "r.toml", &body);
    let train = tmp.path().join("train");
    run_ok(&["train-prior", "--config", s(&cfg), "--out", s(&train)]);
    let ckpt = train.join("checkpoint.json");

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["eval-prior", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&a)]);
    run_ok(&["eval-prior", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&b)]);
    for f in ["metrics.csv", "per_set_loss.csv", "prior_predictive.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (header, rows) = read_csv(&a.join("prior_predictive.csv"));
    assert_eq!(header, ["x", "mean", "std"]);
    assert_eq!(rows.len(), 21);

    let wider = write_config(tmp.path(), "w.toml", &body.replace("hidden_width = 40", "hidden_width = 41"));
    let out = wideprior(&["eval-prior", "--config", s(&wider), "--checkpoint", s(&ckpt), "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint mismatch"));

    let other = write_config(tmp.path(), "t.toml", &body.replace("mini_mlp", "rational"));
    let out = wideprior(&["eval-prior", "--config", s(&other), "--checkpoint", s(&ckpt), "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn regression_posterior_is_deterministic_and_recovers_the_prior_without_data() {
    let tmp = TempDir::new().unwrap();
    let body = REGRESSION.replace("steps = 200", "steps = 20");
    let cfg = write_config(tmp.path(), "r.toml", &body);
    let root = tmp.path();
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&root.join("data"))]);
    run_ok(&["train-prior", "--config", s(&cfg), "--out", s(&root.join("train"))]);
    let ckpt = root.join("train/checkpoint.json");
    let data = root.join("data/dataset.csv");
    for run in ["p1", "p2"] {
        run_ok(&[
            "posterior", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out",
            s(&root.join(run)),
        ]);
    }
    for f in ["predictive.csv", "metrics.csv"] {
        assert_eq!(fs::read(root.join("p1").join(f)).unwrap(), fs::read(root.join("p2").join(f)).unwrap(), "{f}");
    }
    let (header, rows) = read_csv(&root.join("p1/predictive.csv"));
    assert_eq!(header, ["x", "mean", "std"]);
    assert_eq!(rows.len(), 21);

    run_ok(&[
        "posterior", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out",
        s(&root.join("draws")), "--format", "draws",
    ]);
    let (header, _) = read_csv(&root.join("draws/predictive.csv"));
    assert_eq!(header.len(), 1 + 2 * 200);

    // Header-only dataset: the posterior is the prior.
    let empty = root.join("empty.csv");
    fs::write(&empty, "x,y\n").unwrap();
    run_ok(&[
        "posterior", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--dataset", s(&empty), "--out",
        s(&root.join("nodata")),
    ]);
    run_ok(&["eval-prior", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&root.join("prior"))]);
    let post_std = column(&root.join("nodata/predictive.csv"), "std");
    let prior_std = column(&root.join("prior/prior_predictive.csv"), "std");
    let ratio = post_std.iter().sum::<f64>() / prior_std.iter().sum::<f64>();
    assert!((0.8..1.25).contains(&ratio), "posterior/prior spread ratio {ratio}");
}

#[test]
fn classification_posterior_writes_uncertainty_maps() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "m.toml", MOONS);
    let root = tmp.path();
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&root.join("data"))]);
    let data = root.join("data/dataset.csv");
    run_ok(&["posterior", "--config", s(&cfg), "--default-prior", "--dataset", s(&data), "--out", s(&root.join("p"))]);
    let pred = root.join("p/predictive.csv");
    let (header, rows) = read_csv(&pred);
    assert_eq!(header, ["x1", "x2", "mean", "std", "total", "epistemic"]);
    assert_eq!(rows.len(), 25);
    let mean = column(&pred, "mean");
    let total = column(&pred, "total");
    let epistemic = column(&pred, "epistemic");
    for j in 0..25 {
        assert!((0.0..=1.0).contains(&mean[j]));
        assert!(epistemic[j] >= 0.0 && epistemic[j] <= total[j] + 1e-12);
        assert!(total[j] <= 0.25 + 1e-12);
    }
    assert_eq!(read_csv(&root.join("p/metrics.csv")).1.len(), 1);

    let out = wideprior(&["posterior", "--config", s(&cfg), "--dataset", s(&data)]);
    assert_eq!(out.status.code(), Some(2), "a prior choice is required");
}

#[test]
fn report_orders_runs_by_name_and_requires_metrics() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let header = "w1,w2,mmd_linear,mmd_poly,mmd_rbf,mean_mse,mean_l2,mean_l1,median_mse,median_l2,median_l1\n";
    for (name, v) in [("beta", "2"), ("alpha", "1"), ("gamma", "3")] {
        fs::create_dir_all(root.join(name)).unwrap();
        let row = vec![v; 11].join(",");
        fs::write(root.join(name).join("metrics.csv"), format!("{header}{row}\n")).unwrap();
    }
    let dirs = |names: &[&str]| names.iter().map(|n| root.join(n)).collect::<Vec<_>>();
    let report = |runs: &[PathBuf], out: &str| {
        let mut args = vec!["report".to_string()];
        args.extend(runs.iter().map(|p| s(p).to_string()));
        args.extend(["--out".to_string(), s(&root.join(out)).to_string()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        wideprior(&refs)
    };
    assert!(report(&dirs(&["gamma", "alpha", "beta"]), "r1").status.success());
    assert!(report(&dirs(&["beta", "gamma", "alpha"]), "r2").status.success());
    let r1 = fs::read_to_string(root.join("r1/report.csv")).unwrap();
    assert_eq!(r1, fs::read_to_string(root.join("r2/report.csv")).unwrap());
    let lines: Vec<&str> = r1.lines().collect();
    assert_eq!(lines[0], format!("run,{}", header.trim_end()));
    assert!(lines[1].starts_with("alpha,1,") && lines[2].starts_with("beta,2,") && lines[3].starts_with("gamma,3,"));

    assert!(report(&dirs(&["alpha"]), "single").status.success());
    assert_eq!(fs::read_to_string(root.join("single/report.csv")).unwrap().lines().count(), 2);

    let out = report(&dirs(&["alpha", "missing"]), "r3");
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifacts"));
}
