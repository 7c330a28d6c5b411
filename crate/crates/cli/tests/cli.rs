use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn small_config(dir: &Path, n_per_domain: usize) -> PathBuf {
    let cfg = json!({
        "preset": "A",
        "n_domains": [2],
        "n_per_domain": n_per_domain,
        "seeds": [0],
        "variants": ["cgvae", "cgvae-s"],
        "train": { "epochs": 2, "batch": 32 },
        "model": { "hidden": 8, "layers": 2, "flow_units": 2 },
        "theory": { "block_points": 20 }
    });
    let path = dir.join(format!("config_{n_per_domain}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn dislab(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dislab"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("DISLAB_SEED")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Relative path to bytes for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 40);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&dislab(&cfg, &a, &["all"]));
    ok(&dislab(&cfg, &b, &["--jobs", "2", "all"]));
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert_eq!(v, &sb[k], "{}", k.display());
    }
    for f in ["metrics.csv", "metrics_summary.csv", "theory_report.json", "report/mcc_vs_domains.csv", "report/table_d2.csv"] {
        assert!(sa.contains_key(Path::new(f)), "missing {f}");
    }
    assert!(sa.contains_key(Path::new("runs/A_d2_cgvae_s0/params.f64le")));
    assert!(!sa.contains_key(Path::new("failures.json")));
}

#[test]
fn train_resumes_and_force_retrains() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 40);
    let out = tmp.path().join("out");
    ok(&dislab(&cfg, &out, &["gen-data"]));
    assert!(ok(&dislab(&cfg, &out, &["train"])).contains("trained 2, up to date 0"));
    let before = snapshot(&out.join("runs"));
    assert!(ok(&dislab(&cfg, &out, &["train"])).contains("trained 0, up to date 2"));

    // a half-written cell is redone, the finished one is left alone
    fs::remove_file(out.join("runs/A_d2_cgvae-s_s0/losses.csv")).unwrap();
    assert!(ok(&dislab(&cfg, &out, &["train"])).contains("trained 1, up to date 1"));
    assert_eq!(snapshot(&out.join("runs")), before);

    assert!(ok(&dislab(&cfg, &out, &["--force", "train"])).contains("trained 2, up to date 0"));
    assert_eq!(snapshot(&out.join("runs")), before);
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let small = small_config(tmp.path(), 40);
    let larger = small_config(tmp.path(), 50);
    assert!(ok(&dislab(&small, &out, &["gen-data"])).contains("written"));
    assert!(ok(&dislab(&small, &out, &["gen-data"])).contains("unchanged"));
    let o = dislab(&larger, &out, &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    assert!(ok(&dislab(&larger, &out, &["--force", "gen-data"])).contains("written"));
}

#[test]
fn corrupt_checkpoint_is_reported_as_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 40);
    let out = tmp.path().join("out");
    ok(&dislab(&cfg, &out, &["gen-data"]));
    ok(&dislab(&cfg, &out, &["train"]));
    fs::write(out.join("runs/A_d2_cgvae_s0/model.json"), "{\"version\": 1,").unwrap();
    let o = dislab(&cfg, &out, &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    let failures: serde_json::Value = serde_json::from_slice(&fs::read(out.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures["command"], "eval");
    assert_eq!(failures["failures"][0]["cell"], "A_d2_cgvae_s0");

    // the healthy cell is still scored
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.contains("A_d2_cgvae-s_s0") && !metrics.contains("A_d2_cgvae_s0"));

    // retraining repairs the cell and clears the failure record
    ok(&dislab(&cfg, &out, &["train"]));
    ok(&dislab(&cfg, &out, &["eval"]));
    assert!(!out.join("failures.json").exists());
}

#[test]
fn report_regenerates_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 40);
    let out = tmp.path().join("out");
    ok(&dislab(&cfg, &out, &["all"]));
    let before = snapshot(&out.join("report"));
    fs::remove_dir_all(out.join("report")).unwrap();
    ok(&dislab(&cfg, &out, &["report"]));
    assert_eq!(snapshot(&out.join("report")), before);
}

#[test]
fn seed_sources_follow_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 40);
    let out = tmp.path().join("out");
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dislab"));
        c.arg("--config").arg(&cfg).arg("--out").arg(&out).args(args).args(["--variant", "cgvae", "train"]);
        match env {
            Some(v) => c.env("DISLAB_SEED", v),
            None => c.env_remove("DISLAB_SEED"),
        };
        c.output().unwrap()
    };
    ok(&dislab(&cfg, &out, &["gen-data"]));
    ok(&run(Some("5"), &[]));
    assert!(out.join("runs/A_d2_cgvae_s5").is_dir());
    ok(&run(Some("5"), &["--seeds", "7"]));
    assert!(out.join("runs/A_d2_cgvae_s7").is_dir());
    assert!(!out.join("runs/A_d2_cgvae_s0").exists());
    assert_eq!(run(Some("x"), &[]).status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"n_domain": [2]}"#).unwrap();
    let o = dislab(&path, &tmp.path().join("out"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_domain"));
    fs::write(&path, r#"{"train": {"epoch": 3}}"#).unwrap();
    let o = dislab(&path, &tmp.path().join("out"), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}
