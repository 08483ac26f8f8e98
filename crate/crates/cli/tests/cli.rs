use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn esoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esoseg"))
        .args(args)
        .output()
        .expect("spawn esoseg")
}

fn ok(args: &[&str]) -> String {
    let out = esoseg(args);
    assert!(
        out.status.success(),
        "esoseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_json(path: &Path, value: serde_json::Value) -> String {
    fs::write(path, value.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();

    let corpus = write_json(
        &tmp.path().join("corpus.json"),
        serde_json::json!({"n": 6, "split_fractions": [0.5, 0.25, 0.25], "dims": [64, 64, 32]}),
    );
    let msg = ok(&["generate", "--config", &corpus, "--seed", "3", "--out", &p("data")]);
    assert!(msg.contains("wrote 6 phantoms"), "{msg}");
    assert!(tmp.path().join("data/manifest.json").is_file());
    assert!(tmp.path().join("data/run-generate.json").is_file());

    let train = write_json(
        &tmp.path().join("train.json"),
        serde_json::json!({
            "network": {"variant": "DUnet", "levels": 3, "stem_channels": 16, "sub_ddbs": 3, "growth": 16,
                        "bottleneck": 8, "theta": 0.5, "dilation_ddb": 1, "use_spa": false,
                        "use_cha1": false, "use_cha2": false},
            "sampler": {"patch_size": [16, 16, 8]},
            "epochs": 1, "steps_per_epoch": 2, "batch_size": 2, "patches_per_case": 2
        }),
    );
    ok(&[
        "train",
        "--config",
        &train,
        "--data",
        &p("data"),
        "--split",
        "all",
        "--out",
        &p("run"),
    ]);
    for k in 1..=3 {
        let dir = tmp.path().join(format!("run/split{k}"));
        assert!(dir.join("best.ckpt").is_file() && dir.join("train_log.csv").is_file());
    }

    let msg = ok(&[
        "evaluate",
        "--run",
        &p("run"),
        "--data",
        &p("data"),
        "--overlay",
        "--out",
        &p("eval"),
    ]);
    assert_eq!(msg.lines().filter(|l| l.starts_with("split ")).count(), 3, "{msg}");
    let header = fs::read_to_string(tmp.path().join("eval/metrics_split1.csv")).unwrap();
    assert!(
        header.starts_with("scan_id,split,tags,dsc,crd,cad,msd,hd95,flags"),
        "{header}"
    );
    assert!(fs::read_dir(tmp.path().join("eval/overlay_split2")).unwrap().count() >= 2);

    let text = ok(&["report", "--run", &p("eval"), "--out", &p("report")]);
    assert!(text.contains("Mean"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("report/report.json")).unwrap()).unwrap();
    assert_eq!(json["splits"].as_array().unwrap().len(), 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("data/manifest.json")).unwrap()).unwrap();
    let scan = tmp
        .path()
        .join("data")
        .join(manifest["cases"][0]["path"].as_str().unwrap());
    ok(&[
        "infer",
        "--checkpoint",
        &p("run/split1/best.ckpt"),
        "--input",
        scan.to_str().unwrap(),
        "--out",
        &p("infer"),
    ]);
    assert!(tmp.path().join("infer/probability.vol").is_file() && tmp.path().join("infer/mask.vol").is_file());

    let pr = write_json(&tmp.path().join("pr.json"), serde_json::json!({"steps": 10}));
    ok(&[
        "pr-curve",
        "--config",
        &pr,
        "--checkpoint",
        &p("run/split1/best.ckpt"),
        "--data",
        &p("data"),
        "--out",
        &p("pr"),
    ]);
    let table = fs::read_to_string(tmp.path().join("pr/pr_split1.csv")).unwrap();
    assert_eq!(table.lines().count(), 12);
    let auc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("pr/pr_auc.json")).unwrap()).unwrap();
    let a = auc["1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));

    // A file that is not a checkpoint is refused.
    let bad = esoseg(&[
        "infer",
        "--checkpoint",
        &p("data/manifest.json"),
        "--input",
        scan.to_str().unwrap(),
        "--out",
        &p("x"),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();

    let missing = esoseg(&["train", "--data", "/nonexistent/dir", "--out", out]);
    assert_eq!(missing.status.code(), Some(3));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.starts_with("esoseg: io error:"), "{err}");

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"n": 10, "no_such_field": 1}"#).unwrap();
    let bad_config = esoseg(&["generate", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(bad_config.status.code(), Some(5));

    fs::write(&cfg, r#"{"n": 2}"#).unwrap();
    let too_small = esoseg(&["generate", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(too_small.status.code(), Some(5));

    let report = esoseg(&["report", "--metrics", "nolabel", "--out", out]);
    assert_eq!(report.status.code(), Some(5));

    let csv = tmp.path().join("m.csv");
    fs::write(&csv, "scan_id,dsc\na,0.5\n").unwrap();
    let arg = format!("1={}", csv.display());
    let schema = esoseg(&["report", "--metrics", &arg, "--out", out]);
    assert_eq!(schema.status.code(), Some(8));

    let vol = tmp.path().join("t.vol");
    fs::write(&vol, b"not a volume").unwrap();
    let format = esoseg(&[
        "infer",
        "--checkpoint",
        vol.to_str().unwrap(),
        "--input",
        vol.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert!(matches!(format.status.code(), Some(4) | Some(7)), "{:?}", format.status);
}
