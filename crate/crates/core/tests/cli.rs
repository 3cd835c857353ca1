//! End-to-end runs of the `space-head` binary.

use std::path::Path;
use std::process::{Command, Output};

use space_head::data::{read_bundle, write_bundle};
use space_head::head::save_baseline;
use space_head::{BaselineHeadParams, EmbeddingBundle, EvalReport, Example, LabelMap, Matrix};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_space-head")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: &str) -> String {
    let out = dir.join(name);
    let o = run(&["synth", "--classes", "2", "--n", "512", "--seq-len", "8", "--dim", "16", "--seed", seed, "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    p(&out).to_string()
}

#[test]
fn synth_train_inspect_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.ceb", "7");
    let model = dir.path().join("m.smh");
    let o = run(&[
        "train", "--embeddings", &data, "--latent-dim", "3", "--spaces", "2", "--intra-weight", "0.001",
        "--epochs", "5", "--seed", "7", "--out", p(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model.exists());
    let header = stderr(&o);
    assert!(header.lines().next().unwrap().contains(r#""seed":7"#), "{header}");

    let o = run(&["inspect", "--model", p(&model)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("parameter_count  110"), "{text}");

    let o = run(&["eval", "--model", p(&model), "--embeddings", &synth(dir.path(), "t.ceb", "8"), "--json"]);
    assert_eq!(code(&o), 0);
    let r: EvalReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r.accuracy >= 0.98, "{}", r.accuracy);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.ceb", "3");
    let mut files = Vec::new();
    for (name, workers) in [("a.smh", "1"), ("b.smh", "3")] {
        let out = dir.path().join(name);
        let o = run(&[
            "train", "--embeddings", &data, "--latent-dim", "2", "--epochs", "2", "--out", p(&out), "--workers", workers,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        files.push(std::fs::read(out).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.ceb", "5");
    let base = ["--embeddings", data.as_str(), "--latent-dim", "2", "--intra-weight", "0.01", "--seed", "4"];
    let train = |epochs: &str, out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--epochs", epochs, "--out", p(out)];
        args.extend(base);
        args.extend(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let full = dir.path().join("full.smh");
    train("3", &full, &[]);

    // stop after two epochs, then continue the same run to three
    let ck = dir.path().join("ck.json");
    train("2", &dir.path().join("short.smh"), &["--checkpoint", p(&ck)]);
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&ck).unwrap()).unwrap();
    assert_eq!(v["state"]["epoch"], 2);
    v["config"]["epochs"] = 3.into();
    std::fs::write(&ck, serde_json::to_vec(&v).unwrap()).unwrap();

    let resumed = dir.path().join("resumed.smh");
    let o = run(&["train", "--embeddings", &data, "--resume", p(&ck), "--out", p(&resumed), "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&resumed).unwrap(), std::fs::read(&full).unwrap());
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--dim", "5", "--latent-dim", "3", "--spaces", "2", "--classes", "2", "--seq-len", "4", "--seed", "1", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["max_relative_error"].as_f64().unwrap() <= 1e-4);
    assert_eq!(v["checked"], 2 * 5 * 3 + 2 * 6 + 2);
}

/// One-feature linear head predicting class 1 iff the first token is positive.
fn sign_model(dir: &Path) -> String {
    let head = BaselineHeadParams {
        pre: None,
        classifier_w: Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap(),
        classifier_b: vec![0.0, 0.0],
    };
    let path = dir.join("sign.sbh");
    save_baseline(&head, &path).unwrap();
    p(&path).to_string()
}

fn scalar_bundle(dir: &Path, name: &str, xs: &[f64], labels: &[u32]) -> String {
    let examples = xs
        .iter()
        .zip(labels)
        .map(|(&x, &l)| Example {
            embeddings: Matrix::from_vec(1, 1, vec![x]).unwrap(),
            mask: vec![true],
            label: Some(l),
        })
        .collect();
    let path = dir.join(name);
    write_bundle(&EmbeddingBundle::new(1, 1, examples).unwrap(), &path).unwrap();
    p(&path).to_string()
}

#[test]
fn eval_prints_hand_computed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let model = sign_model(dir.path());
    // predictions [0, 1, 1, 1] against labels [0, 0, 1, 1]
    let data = scalar_bundle(dir.path(), "e.ceb", &[-1.0, 1.0, 1.0, 1.0], &[0, 0, 1, 1]);
    let o = run(&["eval", "--model", &model, "--embeddings", &data]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("accuracy     0.7500"), "{text}");
    assert!(text.contains("f1_macro     0.7333"), "{text}");

    let o = run(&["eval", "--model", &model, "--embeddings", &data, "--json"]);
    let first: EvalReport = serde_json::from_str(&stdout(&o)).unwrap();
    let again: EvalReport = serde_json::from_str(&serde_json::to_string(&first).unwrap()).unwrap();
    assert_eq!(first, again);
    assert_eq!(first.accuracy, 0.75);
    assert_eq!(first.confusion, vec![vec![1, 1], vec![0, 2]]);
}

#[test]
fn zero_shot_uses_label_map() {
    let dir = tempfile::tempdir().unwrap();
    let model = sign_model(dir.path());
    // foreign labels 7 (negative) and 9 (positive)
    let data = scalar_bundle(dir.path(), "f.ceb", &[-2.0, 3.0, -1.0], &[7, 9, 7]);
    let map = dir.path().join("map.json");
    LabelMap::from_pairs([(7, 0), (9, 1)]).save(&map).unwrap();
    let o = run(&["zero-shot", "--model", &model, "--embeddings", &data, "--label-map", p(&map), "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: EvalReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.accuracy, 1.0);

    let partial = dir.path().join("partial.json");
    std::fs::write(&partial, r#"{"map":{"7":0}}"#).unwrap();
    let o = run(&["zero-shot", "--model", &model, "--embeddings", &data, "--label-map", p(&partial)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("label 9"), "{}", stderr(&o));
}

#[test]
fn project_writes_centroid_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.ceb", "2");
    let model = dir.path().join("m.smh");
    let o = run(&["train", "--embeddings", &data, "--latent-dim", "3", "--epochs", "1", "--out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = dir.path().join("p.csv");
    let o = run(&["project", "--model", p(&model), "--embeddings", &data, "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "example_id,label,s0_m0,s0_m1,s0_m2,s1_m0,s1_m1,s1_m2");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), read_bundle(&data).unwrap().len());
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 8);
        assert!(cells[2..].iter().all(|c| c.parse::<f64>().unwrap().abs() < 1.0));
    }

    let o = run(&["project", "--model", &sign_model(dir.path()), "--embeddings", &data]);
    assert_eq!(code(&o), 1);
}

#[test]
fn inspect_bundle_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.ceb");
    let manifest = dir.path().join("s.json");
    let o = run(&["synth", "--classes", "3", "--n", "30", "--dim", "4", "--out", p(&data), "--manifest", p(&manifest)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = space_head::Manifest::load(&manifest).unwrap();
    assert_eq!(m.classes.len(), 3);
    let o = run(&["inspect", "--embeddings", p(&data), "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["examples"], 30);
    assert_eq!(v["label_count"], 3);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["eval", "--model", "m", "--embeddings", "e", "--unknown"])), 1);
    assert_eq!(code(&run(&["eval", "--model", "m"])), 1);
    assert_eq!(code(&run(&["train", "--embeddings", "e", "--out", "o", "--head", "tree"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.ceb", "1");
    let out = dir.path().join("m.smh");
    assert_eq!(code(&run(&["train", "--embeddings", &data, "--out", p(&out), "--batch-size", "0"])), 1);
    assert_eq!(code(&run(&["eval", "--model", &data, "--embeddings", &data])), 2);
    assert_eq!(code(&run(&["eval", "--model", p(&dir.path().join("missing")), "--embeddings", &data])), 2);

    let garbage = dir.path().join("g.ceb");
    std::fs::write(&garbage, b"CEB1\x01\x00").unwrap();
    assert_eq!(code(&run(&["inspect", "--embeddings", p(&garbage)])), 2);

    // two same-sign updates of this size overflow f64
    let o = run(&["train", "--embeddings", &data, "--out", p(&out), "--lr", "1e308", "--epochs", "1", "--latent-dim", "2"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
