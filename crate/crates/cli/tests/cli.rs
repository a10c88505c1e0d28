use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dwdr::model::Model;
use dwdr::retrieval::{read_embeddings, write_embeddings};
use dwdr::{CrossViewDataset, DenseMatrix, Rng};
use dwdr_cli::RunConfig;
use serde_json::Value;
use tempfile::TempDir;

fn dwdr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwdr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A temp dir holding `run.cfg` with a short schedule.
fn workspace(extra: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("seed = 4\nout_dir = out\ntrain.epochs = 2\ntrain.decay_epoch = 1\n{extra}");
    fs::write(dir.path().join("run.cfg"), text).unwrap();
    dir
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

#[test]
fn print_defaults_reparses_to_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dwdr(&["--print-defaults"], dir.path());
    ok(&out);
    let text = stdout(&out);
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    for key in ["dwdr.lambda", "train.sampling", "eval.ks", "model.embed_dim"] {
        assert!(text.contains(&format!("{key} = ")), "{key} missing");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let usage = dwdr(&["no-such-command"], p);
    assert_eq!(usage.status.code(), Some(1));

    fs::write(p.join("bad.cfg"), "seed = 1\ntrain.bogus_key = 3\n").unwrap();
    let bad = dwdr(&["--config", "bad.cfg", "gen-data"], p);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("train.bogus_key"), "{}", stderr(&bad));
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));

    let missing = dwdr(&["--config", "absent.cfg", "gen-data"], p);
    assert_eq!(missing.status.code(), Some(3));

    let no_manifest = dwdr(&["--out", "empty", "train"], p);
    assert_eq!(no_manifest.status.code(), Some(3));

    // A learning rate far past the stable range diverges to NaN.
    fs::write(p.join("hot.cfg"), "out_dir = hot\ntrain.epochs = 5\ntrain.decay_epoch = 5\ntrain.lr_backbone = 50\ntrain.lr_classifier = 500\n").unwrap();
    ok(&dwdr(&["--config", "hot.cfg", "gen-data"], p));
    let nan = dwdr(&["--config", "hot.cfg", "train"], p);
    assert_eq!(nan.status.code(), Some(2), "{}", stderr(&nan));
    assert!(stderr(&nan).contains("non-finite"), "{}", stderr(&nan));
}

#[test]
fn gen_data_is_byte_identical_and_counts_match() {
    let dir = workspace("");
    let p = dir.path();
    let first = dwdr(&["--config", "run.cfg", "--out", "a", "gen-data"], p);
    ok(&first);
    ok(&dwdr(&["--config", "run.cfg", "--out", "b", "gen-data"], p));
    for f in ["train.manifest", "test.manifest"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap());
    }
    let text = stdout(&first);
    assert!(text.contains("train: 30 classes, 30 satellite items, 360 drone items"), "{text}");
    assert!(text.contains("test: 30 classes, 30 satellite items, 360 drone items"), "{text}");

    let other_seed = dwdr(&["--config", "run.cfg", "--seed", "5", "--out", "c", "gen-data"], p);
    ok(&other_seed);
    assert_ne!(fs::read(p.join("a/train.manifest")).unwrap(), fs::read(p.join("c/train.manifest")).unwrap());
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = workspace("train.epochs = 0\ntrain.decay_epoch = 0\n");
    let p = dir.path();
    ok(&dwdr(&["--config", "run.cfg", "gen-data"], p));
    ok(&dwdr(&["--config", "run.cfg", "train"], p));
    let ds = CrossViewDataset::read_manifest(fs::read(p.join("out/train.manifest")).unwrap().as_slice()).unwrap();
    let cfg = RunConfig::parse(&fs::read_to_string(p.join("run.cfg")).unwrap()).unwrap();
    let init = Model::init(ds.dim(), ds.num_classes(), &cfg.train.model, &mut Rng::new(4, 0));
    assert_eq!(fs::read_to_string(p.join("out/checkpoint.txt")).unwrap(), init.checkpoint_string());
    assert_eq!(fs::read_to_string(p.join("out/train_log.jsonl")).unwrap(), "");
}

#[test]
fn training_log_has_one_row_per_epoch() {
    let dir = workspace("train.epochs = 3\ntrain.decay_epoch = 2\n");
    let p = dir.path();
    ok(&dwdr(&["--config", "run.cfg", "gen-data"], p));
    ok(&dwdr(&["--config", "run.cfg", "train"], p));
    let log = fs::read_to_string(p.join("out/train_log.jsonl")).unwrap();
    let rows: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row["epoch"], i);
        for key in ["l_id", "l_dwdr", "l_total", "mean_abs_offdiag_rho", "lr_backbone", "lr_classifier"] {
            assert!(row[key].is_number(), "{key} missing in {row}");
        }
    }
    let lr = |i: usize| rows[i]["lr_backbone"].as_f64().unwrap();
    assert!((lr(2) - 0.1 * lr(0)).abs() < 1e-15);
}

#[test]
fn eval_is_repeatable_and_reports_every_k() {
    let dir = workspace("eval.ks = 1,3,5,10\n");
    let p = dir.path();
    ok(&dwdr(&["--config", "run.cfg", "gen-data"], p));
    ok(&dwdr(&["--config", "run.cfg", "train"], p));
    let first = dwdr(&["--config", "run.cfg", "eval"], p);
    ok(&first);
    let saved = fs::read(p.join("out/metrics.json")).unwrap();
    let second = dwdr(&["--config", "run.cfg", "eval"], p);
    ok(&second);
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(saved, fs::read(p.join("out/metrics.json")).unwrap());

    let doc: Value = serde_json::from_slice(&saved).unwrap();
    let dirs = doc["directions"].as_array().unwrap();
    assert_eq!(dirs.len(), 2);
    assert_eq!(dirs[0]["direction"], "drone_to_satellite");
    assert_eq!(dirs[1]["direction"], "satellite_to_drone");
    for d in dirs {
        for key in ["R@1", "R@3", "R@5", "R@10", "R@top1percent", "AP", "num_queries", "skipped"] {
            assert!(!d[key].is_null(), "{key} missing");
        }
    }
    assert_eq!(dirs[0]["num_queries"], 360);
    assert_eq!(dirs[1]["num_queries"], 30);
    assert!(doc["offdiag"]["mean_abs_offdiag"].is_number());
}

#[test]
fn orthogonally_transformed_embeddings_give_the_same_metrics() {
    let dir = workspace("");
    let p = dir.path();
    ok(&dwdr(&["--config", "run.cfg", "gen-data"], p));
    ok(&dwdr(&["--config", "run.cfg", "train"], p));
    ok(&dwdr(&["--config", "run.cfg", "eval"], p));
    let base: Value = serde_json::from_slice(&fs::read(p.join("out/metrics.json")).unwrap()).unwrap();

    let (sat, drone) = read_embeddings(fs::read(p.join("out/embeddings.txt")).unwrap().as_slice()).unwrap();
    let d = sat.dim();
    // A rotation in every consecutive coordinate plane, then a reflection.
    let mut q = DenseMatrix::identity(d);
    for i in 0..d - 1 {
        let t = 0.3 + i as f64 * 0.17;
        let rot = DenseMatrix::from_fn(d, d, |r, c| match (r, c) {
            _ if r == i && c == i => t.cos(),
            _ if r == i && c == i + 1 => -t.sin(),
            _ if r == i + 1 && c == i => t.sin(),
            _ if r == i + 1 && c == i + 1 => t.cos(),
            _ if r == c => 1.0,
            _ => 0.0,
        });
        q = q.matmul(&rot).unwrap();
    }
    q = q.matmul(&DenseMatrix::from_fn(d, d, |r, c| if r != c { 0.0 } else if r == 0 { -1.0 } else { 1.0 })).unwrap();
    let mut buf = Vec::new();
    write_embeddings(&mut buf, &[&sat.transformed(&q).unwrap(), &drone.transformed(&q).unwrap()]).unwrap();
    fs::write(p.join("rotated.txt"), buf).unwrap();
    ok(&dwdr(&["--config", "run.cfg", "--out", "rot", "eval", "--embeddings", "rotated.txt"], p));
    let rotated: Value = serde_json::from_slice(&fs::read(p.join("rot/metrics.json")).unwrap()).unwrap();

    for (a, b) in base["directions"].as_array().unwrap().iter().zip(rotated["directions"].as_array().unwrap()) {
        for key in ["R@1", "R@5", "R@10", "R@top1percent", "AP"] {
            let (x, y) = (a[key].as_f64().unwrap(), b[key].as_f64().unwrap());
            assert!((x - y).abs() < 1e-9, "{key}: {x} vs {y}");
        }
    }
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let dir = workspace("");
    let p = dir.path();
    ok(&dwdr(&["--config", "run.cfg", "gen-data"], p));
    ok(&dwdr(&["--config", "run.cfg", "train"], p));
    fs::write(p.join("wide.cfg"), "out_dir = wide\ndata.input_dim = 40\n").unwrap();
    ok(&dwdr(&["--config", "wide.cfg", "gen-data"], p));
    let o = dwdr(&["--config", "run.cfg", "eval", "--manifest", "wide/test.manifest"], p);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("input features"), "{}", stderr(&o));
}

#[test]
fn gradcheck_lists_every_loss() {
    let dir = workspace("gradcheck.instances = 3\n");
    let o = dwdr(&["--config", "run.cfg", "gradcheck"], dir.path());
    let text = stdout(&o);
    for name in dwdr::gradcheck::CHECK_NAMES {
        assert!(text.contains(name), "{name} missing:\n{text}");
    }
    let failed = text.lines().any(|l| l.starts_with("FAIL"));
    assert_eq!(o.status.code(), Some(if failed { 2 } else { 0 }));
}

#[test]
fn sweep_writes_one_row_per_arm_and_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("grid.sweep"),
        "seeds = 0,1\ntrain.epochs = 1\ntrain.decay_epoch = 1\n\n[plain]\n\n[barlow]\ndwdr.gamma1 = 0\ndwdr.gamma2 = 0\n\n[diverges]\ntrain.lr_backbone = 50\ntrain.lr_classifier = 500\n",
    )
    .unwrap();
    let o = dwdr(&["--config", "grid.sweep", "--out", "sw", "sweep"], p);
    ok(&o);
    let mut reader = csv::Reader::from_path(p.join("sw/sweep.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, dwdr_cli::sweep::CSV_COLUMNS);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["plain", "barlow", "diverges"]);
    assert_eq!(&rows[0][2], "0");
    assert_eq!(&rows[2][2], "2");
    assert!(rows[2][15].contains("non-finite"), "{:?}", rows[2]);
    assert!(stderr(&o).contains("diverges"));

    let json: Value = serde_json::from_slice(&fs::read(p.join("sw/sweep.json")).unwrap()).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 6);
}
