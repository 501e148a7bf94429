use std::path::Path;
use std::process::Command;

use feast::data::{read_checkpoint, toy_slide, write_slide, Manifest};
use feast::model::ModelConfig;
use serde_json::{json, Value};

fn feast(args: &[&str]) -> i32 {
    let mut argv = vec!["feast"];
    argv.extend_from_slice(args);
    feast::cli::run(argv)
}

fn bin(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_feast"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth → train → eval in `dir` with a small profile.
fn pipeline(dir: &Path) {
    write_json(
        &dir.join("synth.json"),
        &json!({"n_slides": 2, "n_test": 1, "grid_rows": 6, "grid_cols": 6, "d": 8, "G": 3, "neighbors": 4, "seed": 5}),
    );
    write_json(
        &dir.join("model.json"),
        &json!({"d_model": 8, "n_heads": 2, "n_layers": 1, "knn_k": 4, "n_genes": 3, "mlp_hidden": 16, "seed": 9}),
    );
    write_json(
        &dir.join("train.json"),
        &json!({"learning_rate": 1e-3, "epochs": 4}),
    );
    let data = dir.join("data");
    assert_eq!(
        feast(&[
            "synth",
            "--config",
            s(&dir.join("synth.json")),
            "--out",
            s(&data)
        ]),
        0
    );
    let manifest = data.join("manifest.json");
    assert_eq!(
        feast(&[
            "train",
            "--manifest",
            s(&manifest),
            "--model-config",
            s(&dir.join("model.json")),
            "--train-config",
            s(&dir.join("train.json")),
            "--out",
            s(&dir.join("model.ckpt")),
            "--history",
            s(&dir.join("history.csv")),
        ]),
        0
    );
    assert_eq!(
        feast(&[
            "eval",
            "--ckpt",
            s(&dir.join("model.ckpt")),
            "--manifest",
            s(&manifest),
            "--metrics",
            s(&dir.join("metrics.json")),
            "--pred-out",
            s(&dir.join("pred")),
        ]),
        0
    );
}

#[test]
fn pipeline_outputs_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "model.ckpt",
        "metrics.json",
        "history.csv",
        "pred/slide002.csv",
        "data/train/slide000.fst",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }

    let history = std::fs::read_to_string(a.path().join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,lr,mean_loss");
    assert_eq!(lines.len(), 5);

    let metrics: Value =
        serde_json::from_slice(&std::fs::read(a.path().join("metrics.json")).unwrap()).unwrap();
    for key in ["mse", "mae", "pcc", "per_gene_pcc"] {
        assert!(metrics.get(key).is_some(), "{key}");
    }

    let pred = std::fs::read_to_string(a.path().join("pred/slide002.csv")).unwrap();
    let mut rows = pred.lines();
    assert_eq!(rows.next().unwrap(), "spot_id,x,y,gene0,gene1,gene2");
    let first: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 6);
    // 17 significant digits survive a text round trip
    let v: f64 = first[3].parse().unwrap();
    assert_eq!(format!("{v:.16e}"), first[3]);

    let manifest: Value =
        serde_json::from_slice(&std::fs::read(a.path().join("data/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["G"], 3);
    assert_eq!(manifest["train"][0], "train/slide000.fst");
    assert!(a.path().join("data/generator.json").exists());
}

#[test]
fn attention_export_rows_sum_to_one_minus_beta() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let out = dir.path().join("attn");
    let slide = dir.path().join("data/test/slide002.fst");
    let ckpt = dir.path().join("model.ckpt");
    assert_eq!(
        feast(&[
            "attn",
            "--ckpt",
            s(&ckpt),
            "--slide",
            s(&slide),
            "--target-spot",
            "3",
            "--out",
            s(&out)
        ]),
        0
    );
    let beta = read_checkpoint(&ckpt).unwrap().config.beta;
    let mut files: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 4);
    for f in files {
        let text = std::fs::read_to_string(&f).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "query,key,a_pos,a_neg,a_final");
        let mut sum = 0.0;
        let mut n = 0;
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0], "3");
            sum += cols[4].parse::<f64>().unwrap();
            n += 1;
        }
        assert!((sum - (1.0 - beta)).abs() < 1e-8, "{}: {sum}", f.display());
        let local = f.file_name().unwrap().to_str().unwrap().contains("local");
        assert_eq!(n, if local { 4 } else { 29 });
    }
    assert_eq!(
        feast(&[
            "attn",
            "--ckpt",
            s(&ckpt),
            "--slide",
            s(&slide),
            "--target-spot",
            "999",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn eval_of_a_perfect_fixture_reports_unit_pcc() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let model = read_checkpoint(dir.path().join("model.ckpt")).unwrap();
    let mut slide = toy_slide(4, 8, 3);
    let (pred, _) = model.forward(&slide, false).unwrap();
    slide.targets = pred;
    write_slide(&slide, dir.path().join("fixture.fst")).unwrap();
    Manifest {
        train: vec![],
        test: vec!["fixture.fst".into()],
        d: 8,
        n_genes: 3,
    }
    .write(dir.path().join("fixture.json"))
    .unwrap();
    let metrics = dir.path().join("fixture_metrics.json");
    assert_eq!(
        feast(&[
            "eval",
            "--ckpt",
            s(&dir.path().join("model.ckpt")),
            "--manifest",
            s(&dir.path().join("fixture.json")),
            "--metrics",
            s(&metrics),
            "--pred-out",
            s(&dir.path().join("fixture_pred")),
        ]),
        0
    );
    let m: Value = serde_json::from_slice(&std::fs::read(metrics).unwrap()).unwrap();
    assert!((m["pcc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(m["mse"].as_f64().unwrap(), 0.0);
}

#[test]
fn pseudo_subcommand_appends_spots() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy_slide(2, 4, 2).originals_only();
    write_slide(&base, dir.path().join("in.fst")).unwrap();
    let out = dir.path().join("out.fst");
    assert_eq!(
        feast(&[
            "pseudo",
            "--in",
            s(&dir.path().join("in.fst")),
            "--out",
            s(&out)
        ]),
        0
    );
    let with = feast::data::read_slide(&out).unwrap();
    assert_eq!(with.n_orig(), 8);
    assert!(with.n_pseudo() > 0);
    let zero = dir.path().join("zero.fst");
    assert_eq!(
        feast(&[
            "pseudo",
            "--in",
            s(&dir.path().join("in.fst")),
            "--out",
            s(&zero),
            "--fill",
            "zero"
        ]),
        0
    );
    let z = feast::data::read_slide(&zero).unwrap();
    assert!(z.features.data()[8 * 4..].iter().all(|&v| v == 0.0));
}

#[test]
fn gradcheck_default_toy_passes() {
    let (code, stdout, _) = bin(&["gradcheck", "--seed", "3927"]);
    assert_eq!(code, 0);
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() <= 1e-4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    std::fs::write(&cfg, serde_json::to_vec(&ModelConfig::toy()).unwrap()).unwrap();
    assert_eq!(
        bin(&["gradcheck", "--model-config", s(&cfg), "--seed", "1"]).0,
        0
    );
}

#[test]
fn exit_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = bin(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"));
    assert_eq!(bin(&["train", "--bogus-flag"]).0, 1);
    assert_eq!(bin(&["--help"]).0, 0);
    // missing input and corrupt input are data errors
    assert_eq!(
        bin(&[
            "pseudo",
            "--in",
            "/nonexistent/x.fst",
            "--out",
            s(&dir.path().join("o.fst"))
        ])
        .0,
        2
    );
    let junk = dir.path().join("junk.fst");
    std::fs::write(&junk, b"FST1 not really").unwrap();
    let (code, _, err) = bin(&[
        "pseudo",
        "--in",
        s(&junk),
        "--out",
        s(&dir.path().join("o.fst")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("byte 4"), "{err}");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, br#"{"d_model": 16, "n_heads": 3}"#).unwrap();
    assert_eq!(bin(&["gradcheck", "--model-config", s(&bad)]).0, 2);
    assert_eq!(
        feast::cli::exit_code(&feast::Error::Numeric("nan".into())),
        3
    );
    assert_eq!(
        feast::cli::exit_code(&feast::Error::Optimizer("nan".into())),
        3
    );
}
