use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m3bind::checkpoint::{get_bundles, Checkpoint};
use m3bind::training::ModalityBundle;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_m3bind");

/// Small five-modality run; a few seconds end to end.
fn config(dir: &Path) -> PathBuf {
    let modalities: Vec<Value> = [("xray", 12, 160), ("ct", 16, 80), ("retina", 10, 60), ("ecg", 8, 40), ("path", 14, 100)]
        .iter()
        .map(|(id, d, n)| json!({"id": id, "obs_dim": d, "corpus_size": n}))
        .collect();
    let doc = json!({
        "master_seed": 3,
        "dataset": {"seed": 3, "heldout_per_modality": 24, "probe_tuples": 16, "modalities": modalities},
        "pretrain": {"steps": 20, "batch": 16, "probe_batch": 32},
        "bind": {"iters": 24, "batch_pair": 16, "batch_text": 12},
        "distill": {"iters_stage1": 6, "iters_stage2": 6, "batch_text": 12},
        "eval": {"shots": [1, 2], "probe_seeds": [0, 1]},
        "checkpoint_every": 10,
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn m3bind(dir: &Path, args: &[&str]) -> Output {
    let cfg = config(dir);
    let out_dir = dir.join("out");
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out_dir)
        .env("M3BIND_THREADS", "1");
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn only_dir(parent: &Path, prefix: &str) -> PathBuf {
    let mut found: Vec<PathBuf> = std::fs::read_dir(parent)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(found.len(), 1, "{found:?}");
    found.pop().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// JSON documents with the output directory removed; it is the one setting
/// allowed to differ between otherwise identical runs.
fn without_output_dir(bytes: &[u8]) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                map.remove("output_dir");
                map.values_mut().for_each(strip);
            }
            Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: Value = serde_json::from_slice(bytes).unwrap();
    strip(&mut v);
    v
}

/// JSONL logs without their header line, which carries a timestamp.
fn body(log: &[u8]) -> String {
    let text = String::from_utf8(log.to_vec()).unwrap();
    text.lines().skip(1).collect::<Vec<_>>().join("\n")
}

fn full_run(dir: &Path) -> PathBuf {
    ok(m3bind(dir, &["generate"]));
    let root = PathBuf::from(ok(m3bind(dir, &["train"])).trim());
    ok(m3bind(dir, &["distill"]));
    ok(m3bind(dir, &["eval"]));
    root
}

#[test]
fn generate_is_reproducible_and_creates_missing_dirs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let nested = b.path().join("not/yet/there");
    std::fs::create_dir_all(&nested).unwrap();
    let da = PathBuf::from(ok(m3bind(a.path(), &["generate"])).trim());
    let db = PathBuf::from(ok(m3bind(&nested, &["generate"])).trim());
    assert_eq!(files(&da), files(&db));
    assert_eq!(files(&da).len(), 6);
    ok(m3bind(a.path(), &["generate"]));
    assert_eq!(files(&da), files(&db));
}

#[test]
fn identical_runs_produce_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_run(a.path());
    let rb = full_run(b.path());
    assert_eq!(ra.file_name(), rb.file_name());
    let (fa, fb) = (files(&ra), files(&rb));
    assert_eq!(fa.len(), 9);
    for ((na, ca), (nb, cb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na.ends_with(".jsonl") {
            assert_eq!(body(ca), body(cb), "{na}");
        } else if na.ends_with(".json") {
            assert_eq!(without_output_dir(ca), without_output_dir(cb), "{na}");
        } else {
            assert!(ca == cb, "{na} differs");
        }
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_run(a.path());

    ok(m3bind(b.path(), &["generate"]));
    ok(m3bind(b.path(), &["train", "--stop-at", "13"]));
    let rb = only_dir(&b.path().join("out"), "run-");
    let mid = Checkpoint::load(&rb.join("bind.m3ck"), None, false).unwrap();
    assert_eq!(mid.u64("meta.step").unwrap(), 13);
    let early = m3bind(b.path(), &["distill"]);
    assert_eq!(early.status.code(), Some(1), "distill must refuse an unfinished bind");
    ok(m3bind(b.path(), &["train", "--resume"]));
    ok(m3bind(b.path(), &["distill", "--stop-at", "5"]));
    ok(m3bind(b.path(), &["distill", "--resume"]));
    ok(m3bind(b.path(), &["eval"]));

    let read = |dir: &Path, name: &str| std::fs::read(dir.join(name)).unwrap();
    for name in ["pretrain.m3ck", "bind.m3ck", "distill.m3ck", "eval.csv"] {
        assert!(read(&ra, name) == read(&rb, name), "{name}");
    }
    assert_eq!(without_output_dir(&read(&ra, "eval.json")), without_output_dir(&read(&rb, "eval.json")));
    for name in ["bind.jsonl", "distill.jsonl"] {
        assert_eq!(body(&std::fs::read(ra.join(name)).unwrap()), body(&std::fs::read(rb.join(name)).unwrap()));
    }
}

#[test]
fn zero_bind_iterations_yield_pretrained_weights_with_zero_adapters() {
    let d = tempfile::tempdir().unwrap();
    ok(m3bind(d.path(), &["generate"]));
    let root = PathBuf::from(ok(m3bind(d.path(), &["train", "--iters-bind", "0"])).trim());
    let pre = get_bundles(&Checkpoint::load(&root.join("pretrain.m3ck"), None, false).unwrap()).unwrap();
    let bound = get_bundles(&Checkpoint::load(&root.join("bind.m3ck"), None, false).unwrap()).unwrap();
    assert_eq!(pre.keys().collect::<Vec<_>>(), bound.keys().collect::<Vec<_>>());
    for (m, b) in &bound {
        assert!(b.image.has_adapters() && b.text.has_adapters());
        let base: Vec<_> = b.image.base_params().into_iter().chain(b.text.base_params()).collect();
        let p: &ModalityBundle = &pre[m];
        let pre_base: Vec<_> = p.image.base_params().into_iter().chain(p.text.base_params()).collect();
        assert_eq!(base, pre_base);
        for (name, t) in b.params() {
            if name.ends_with("lora_b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}

#[test]
fn modality_subset_trains_only_those_bundles() {
    let d = tempfile::tempdir().unwrap();
    ok(m3bind(d.path(), &["generate"]));
    let root = PathBuf::from(ok(m3bind(d.path(), &["train", "--modalities", "xray,ecg", "--iters-bind", "4"])).trim());
    let bound = get_bundles(&Checkpoint::load(&root.join("bind.m3ck"), None, false).unwrap()).unwrap();
    assert_eq!(bound.keys().collect::<Vec<_>>(), ["ecg", "xray"]);
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(root.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["bind"]["modalities"], json!(["xray", "ecg"]));
}

#[test]
fn cross_image_eval_for_one_pair_emits_one_record() {
    let d = tempfile::tempdir().unwrap();
    ok(m3bind(d.path(), &["generate"]));
    ok(m3bind(d.path(), &["train"]));
    let out = ok(m3bind(d.path(), &["eval", "--task", "cross-image", "--pair", "xray:ecg"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1, "{out}");
    let rec: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(rec["task"], "cross-image");
    assert_eq!(rec["pair"], "xray:ecg");
    for k in [1, 5, 10] {
        let v = rec["metrics"][format!("recall@{k}")].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn inspect_lists_tensors_and_rejects_corpus_files() {
    let d = tempfile::tempdir().unwrap();
    let data = PathBuf::from(ok(m3bind(d.path(), &["generate"])).trim());
    let root = PathBuf::from(ok(m3bind(d.path(), &["train", "--iters-bind", "2"])).trim());
    let out = ok(Command::new(BIN).arg("inspect").arg(root.join("bind.m3ck")).output().unwrap());
    assert!(out.starts_with("magic: M3CK\nversion: 1\nfingerprint: "));
    assert!(out.contains("xray.image.0.lora_a  f64 [12, 4]"), "{out}");
    assert!(out.contains("meta.step  u64 [1] = 2"), "{out}");

    let bad = Command::new(BIN).arg("inspect").arg(data.join("xray.m3bd")).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("M3BD"));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let d = tempfile::tempdir().unwrap();
    let bad_override = m3bind(d.path(), &["generate", "--set", "bind.lambda=oops"]);
    assert_eq!(bad_override.status.code(), Some(2));
    let no_corpora = m3bind(d.path(), &["train"]);
    assert_eq!(no_corpora.status.code(), Some(2));
    let unknown = m3bind(d.path(), &["generate", "--set", "bind.modalities=[\"mri\"]"]);
    assert_eq!(unknown.status.code(), Some(2));

    ok(m3bind(d.path(), &["generate"]));
    let data = only_dir(&d.path().join("out"), "data-");
    let meta = data.join("dataset.json");
    let mut text = std::fs::read_to_string(&meta).unwrap();
    text.truncate(text.len() / 2);
    std::fs::write(&meta, text).unwrap();
    assert_eq!(m3bind(d.path(), &["train"]).status.code(), Some(3));

    let diverge = tempfile::tempdir().unwrap();
    ok(m3bind(diverge.path(), &["generate"]));
    let out = m3bind(diverge.path(), &["train", "--set", "pretrain.lr=1e300", "--set", "pretrain.grad_clip=1e300"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn checkpoint_from_another_config_needs_force() {
    let d = tempfile::tempdir().unwrap();
    ok(m3bind(d.path(), &["generate"]));
    let root = PathBuf::from(ok(m3bind(d.path(), &["train", "--iters-bind", "3"])).trim());
    let other = PathBuf::from(ok(m3bind(d.path(), &["train", "--iters-bind", "5", "--stop-at", "1"])).trim());
    assert_ne!(root, other);
    std::fs::copy(root.join("bind.m3ck"), other.join("bind.m3ck")).unwrap();
    let refused = m3bind(d.path(), &["train", "--iters-bind", "5", "--resume"]);
    assert_eq!(refused.status.code(), Some(2), "{}", String::from_utf8_lossy(&refused.stderr));
    ok(m3bind(d.path(), &["train", "--iters-bind", "5", "--resume", "--force"]));
}
