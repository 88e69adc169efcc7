use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_induction-lab"))
        .args(args)
        .env("LAB_OUTPUT_ROOT", root)
        .env_remove("LAB_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .map(str::trim)
        .unwrap_or_else(|| panic!("no '{key}' in {stdout}"))
}

#[test]
fn train_twice_gives_the_same_manifest_hash() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["train", "--dist", "point:3", "--m-v", "1024", "--m-kq", "1024"];
    let a = ok(&lab(&args, dir.path()));
    let b = ok(&lab(&args, dir.path()));
    assert_eq!(field(&a, "manifest hash:"), field(&b, "manifest hash:"));
    assert!(a.contains("dominant mechanism: positional"), "{a}");
    let ckpt = field(&a, "checkpoint:");
    assert!(Path::new(ckpt).starts_with(dir.path().join("checkpoints")));
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        "seed = 4\n[sampler]\nn = 16\nn_trg = 2\nl = 40\n[train]\nm_v = 512\nm_kq = 512\n[dist]\nfamily = \"uniform\"\nlo = 3\nhi = 8\n",
    )
    .unwrap();
    let out = ok(&lab(&["train", "--config", cfg.to_str().unwrap()], dir.path()));
    assert!(out.contains("dominant mechanism: induction"), "{out}");
    let manifest = field(&out, "manifest:");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["train"]["m_v"], 512);

    let out = ok(&lab(
        &["train", "--config", cfg.to_str().unwrap(), "--seed", "5"],
        dir.path(),
    ));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(field(&out, "manifest:")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
}

#[test]
fn invalid_configuration_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["train", "--dist", "point:30"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invalid experiment configuration"), "{err}");
    assert!(err.contains("L"), "{err}");

    let out = lab(&["train", "--dist", "cauchy:3"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot parse distribution"));
}

#[test]
fn eval_and_heatmap_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&lab(
        &["train", "--dist", "uniform:3:8", "--m-v", "1024", "--m-kq", "1024"],
        dir.path(),
    ));
    let ckpt = field(&out, "checkpoint:").to_string();
    let csv = ok(&lab(
        &[
            "eval",
            "--checkpoint",
            &ckpt,
            "--ell-min",
            "3",
            "--ell-max",
            "8",
            "--n-test",
            "200",
        ],
        dir.path(),
    ));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "ell_min,ell_max,N_trg,seed,ood_accuracy,pseudo_rate,leftmost_rate,dominant_mechanism,n_samples"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..4], &["3", "8", "2", "0"]);
    assert_eq!(row[7], "induction");
    assert_eq!(row[8], "200");

    let hm = ok(&lab(
        &["heatmap", "--checkpoint", &ckpt, "--block", "prev:token", "--pgm"],
        dir.path(),
    ));
    let grid = field(&hm, "grid:");
    assert_eq!(fs::read_to_string(grid).unwrap().lines().count(), 16);
    assert!(Path::new(field(&hm, "image:")).exists());

    let bad = lab(&["heatmap", "--checkpoint", &ckpt, "--block", "keys"], dir.path());
    assert!(!bad.status.success());
}

#[test]
fn sweep_is_resumable_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep",
        "--m-v",
        "256",
        "--m-kq",
        "256",
        "--n-test",
        "64",
        "--sweep-ell-min",
        "3,4",
        "--sweep-ell-max",
        "4,5",
        "--sweep-n-trg",
        "2",
        "--workers",
        "2",
    ];
    let first = ok(&lab(&args, dir.path()));
    assert!(first.contains("computed 3 cells, skipped 0"), "{first}");
    let table = fs::read(field(&first, "metrics:")).unwrap();
    let second = ok(&lab(&args, dir.path()));
    assert!(second.contains("computed 0 cells, skipped 3"), "{second}");
    assert_eq!(fs::read(field(&second, "metrics:")).unwrap(), table);
    assert_eq!(String::from_utf8(table).unwrap().lines().count(), 4);
}

#[test]
fn lp_oracle_and_concentration_emit_json() {
    let dir = tempfile::tempdir().unwrap();
    let lp: serde_json::Value =
        serde_json::from_str(&ok(&lab(&["lp", "--n-trg", "3", "--u", "5"], dir.path()))).unwrap();
    assert_eq!(lp["agree"], true);
    assert_eq!(lp["kkt"]["satisfied"], true);

    let oracle: serde_json::Value = serde_json::from_str(&ok(&lab(
        &["oracle", "--n", "64", "--n-trg", "2", "--dist", "point:4"],
        dir.path(),
    )))
    .unwrap();
    assert_eq!(oracle["certificate"]["generalizes"], false);
    assert!(oracle["certificate"]["witness_pair"].is_array());
    assert_eq!(oracle["max_sum_ratio"], 1.0);

    let conc: serde_json::Value = serde_json::from_str(&ok(&lab(
        &[
            "concentration",
            "--n",
            "8",
            "--n-trg",
            "2",
            "--l",
            "16",
            "--dist",
            "uniform:4:5",
            "--ell-max",
            "5",
            "--m-list",
            "200,800",
            "--seeds",
            "2",
        ],
        dir.path(),
    )))
    .unwrap();
    assert_eq!(conc["rows"].as_array().unwrap().len(), 2);
    assert!(conc["wv_slope"].as_f64().unwrap() < 0.0);
}

#[test]
fn generate_writes_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&lab(&["generate", "--kind", "ood", "--count", "5"], dir.path()));
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for s in &lines {
        assert_ne!(s["ell1"], s["ell2"]);
    }
}

#[test]
fn workers_env_must_be_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_induction-lab"))
        .args([
            "sweep",
            "--sweep-ell-min",
            "3",
            "--sweep-ell-max",
            "4",
            "--sweep-n-trg",
            "2",
        ])
        .env("LAB_OUTPUT_ROOT", dir.path())
        .env("LAB_WORKERS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("LAB_WORKERS"));
}
