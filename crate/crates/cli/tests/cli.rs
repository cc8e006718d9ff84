use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pixn2n_core::checkpoint::{list_checkpoints, read_checkpoint};
use pixn2n_core::dataset::manifest::load_gray;
use pixn2n_core::dataset::store::{read_index, read_store};
use pixn2n_core::dataset::Split;
use pixn2n_core::gating::{gate_tensor, GateVector};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pixn2n"));
    cmd.env_remove("PIXN2N_DATA_ROOT");
    cmd
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(out.status.success(), "exit {:?}", out.status.code());
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 4-channel phantom, 1 held-out sample, no non-zero filtering.
fn prepared(dir: &Path, size: usize) -> PathBuf {
    let raw = dir.join("raw");
    ok(bin().args(["phantom", "--out", p(&raw), "--channels", "4", "--samples", "4", "--seed", "1"])
        .args(["--size", &size.to_string()]));
    let store = dir.join("store");
    ok(bin().args(["prepare", "--manifest", p(&raw.join("manifest.jsonl")), "--out", p(&store)])
        .args(["--set", "patch_size=32", "--set", "n_test_samples=1", "--set", "filter_threshold=0.0"]));
    store
}

fn desk_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn train(store: &Path, out: &Path, epochs: usize, extra: &[&str]) -> Output {
    run(bin()
        .args(["--deterministic", "train", "--store", p(store), "--out", p(out)])
        .args(["--config", p(&desk_config()), "--epochs", &epochs.to_string()])
        .args(["--set", "generator.base_width=4", "--set", "discriminator.base_width=4"])
        .args(extra))
}

/// Store plus a 2-epoch run, shared by the synth and eval tests.
fn trained() -> &'static (PathBuf, PathBuf) {
    static FIXTURE: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = scratch("trained");
        let store = prepared(&dir, 64);
        let run_dir = dir.join("run");
        assert!(train(&store, &run_dir, 2, &["--set", "checkpoint_every=1"]).status.success());
        (store, run_dir)
    })
}

#[test]
fn empty_manifest_is_a_validation_error() {
    let dir = scratch("empty_manifest");
    fs::write(dir.join("manifest.jsonl"), "").unwrap();
    let out = run(bin().args(["prepare", "--manifest", p(&dir.join("manifest.jsonl")), "--out", p(&dir.join("s"))]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}

#[test]
fn unreadable_inputs_are_listed() {
    let dir = scratch("unreadable");
    let lines = [
        r#"{"sample_id":"a","marker":"m0","path":"nope0.png"}"#,
        r#"{"sample_id":"a","marker":"m1","path":"nope1.png"}"#,
    ];
    fs::write(dir.join("manifest.jsonl"), lines.join("\n")).unwrap();
    let out = run(bin().args(["prepare", "--manifest", p(&dir.join("manifest.jsonl")), "--out", p(&dir.join("s"))]));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope0.png") && err.contains("nope1.png"), "{err}");
}

#[test]
fn prepare_index_matches_tiling_and_is_idempotent() {
    let dir = scratch("prepare");
    // 80 px samples, 32 px tiles: floor(80 / 32)^2 = 4 tiles each, nothing filtered
    let store = prepared(&dir, 80);
    let rows = read_index(&store).unwrap();
    assert_eq!(rows.len(), 4 * 4);
    let count = |s| rows.iter().filter(|r| r.split == s).count();
    assert_eq!(count(Split::Test), 4);
    // 12 remaining tiles at an 0.8 train fraction
    assert_eq!((count(Split::Train), count(Split::Val)), (9, 3));

    let again = dir.join("store2");
    ok(bin().args(["prepare", "--manifest", p(&dir.join("raw/manifest.jsonl")), "--out", p(&again)])
        .args(["--set", "patch_size=32", "--set", "n_test_samples=1", "--set", "filter_threshold=0.0"]));
    assert_eq!(read_index(&again).unwrap(), rows);
    let (a, b) = (read_store(&store, None).unwrap(), read_store(&again, None).unwrap());
    assert_eq!(a.meta, b.meta);
    assert_eq!(a.patches, b.patches);
}

#[test]
fn data_root_resolves_relative_inputs() {
    let dir = scratch("data_root");
    ok(bin().args(["phantom", "--out", p(&dir.join("raw")), "--channels", "2", "--size", "32", "--samples", "2"]));
    ok(bin()
        .env("PIXN2N_DATA_ROOT", &dir)
        .args(["prepare", "--manifest", "raw/manifest.jsonl", "--out", p(&dir.join("s"))])
        .args(["--set", "patch_size=16", "--set", "n_test_samples=0"]));
    assert_eq!(read_index(&dir.join("s")).unwrap().len(), 2 * 4);
}

#[test]
fn one_epoch_gives_one_checkpoint() {
    let dir = scratch("one_epoch");
    let store = prepared(&dir, 64);
    let out = dir.join("run");
    assert!(train(&store, &out, 1, &[]).status.success());
    let ckpts = list_checkpoints(&out).unwrap();
    assert_eq!(ckpts.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1]);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    let bundle = read_checkpoint(&ckpts[0].1, None).unwrap();
    assert_eq!(meta["config_hash"], bundle.config_hash.as_str());
    assert!(out.join("best.json").exists());
}

#[test]
fn twenty_epochs_every_ten_gives_two_checkpoints() {
    let dir = scratch("twenty_epochs");
    let store = prepared(&dir, 64);
    let out = dir.join("run");
    assert!(train(&store, &out, 20, &["--set", "checkpoint_every=10"]).status.success());
    let epochs: Vec<usize> = list_checkpoints(&out).unwrap().into_iter().map(|c| c.0).collect();
    assert_eq!(epochs, vec![10, 20]);
}

#[test]
fn deterministic_reruns_log_identically() {
    let dir = scratch("rerun");
    let store = prepared(&dir, 64);
    let (a, b) = (dir.join("a"), dir.join("b"));
    assert!(train(&store, &a, 1, &[]).status.success());
    assert!(train(&store, &b, 1, &[]).status.success());
    let log = |d: &Path| fs::read_to_string(d.join("train_log.jsonl")).unwrap();
    let (la, lb) = (log(&a), log(&b));
    assert!(la.lines().count() >= 5);
    assert_eq!(la.lines().take(5).collect::<Vec<_>>(), lb.lines().take(5).collect::<Vec<_>>());
    assert_eq!(la, lb);
}

#[test]
fn interrupted_run_resumes_and_guards_its_directory() {
    let dir = scratch("resume");
    let store = prepared(&dir, 64);
    let (full, split) = (dir.join("full"), dir.join("split"));
    let every = ["--set", "checkpoint_every=1"];
    assert!(train(&store, &full, 2, &every).status.success());
    assert!(train(&store, &split, 2, &[&every[..], &["--stop-after", "1"]].concat()).status.success());
    assert_eq!(list_checkpoints(&split).unwrap().len(), 1);

    assert_eq!(train(&store, &split, 2, &every).status.code(), Some(2));
    let changed = train(&store, &split, 2, &[&every[..], &["--resume", "--seed", "9"]].concat());
    assert_eq!(changed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&changed.stderr).contains("hash mismatch"));

    assert!(train(&store, &split, 2, &[&every[..], &["--resume"]].concat()).status.success());
    let log = |d: &Path| fs::read_to_string(d.join("train_log.jsonl")).unwrap();
    assert_eq!(log(&split), log(&full));
    let last = |d: &Path| read_checkpoint(&list_checkpoints(d).unwrap().last().unwrap().1, None).unwrap();
    assert_eq!(last(&split), last(&full));
}

#[test]
fn arity_mismatch_is_rejected() {
    let dir = scratch("arity");
    let store = prepared(&dir, 64);
    let out = train(&store, &dir.join("run"), 1, &["--set", "generator.n_channels=3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_with_runtime_abort() {
    let dir = scratch("diverge");
    let store = prepared(&dir, 64);
    let out = train(&store, &dir.join("run"), 2, &["--set", "optimizer.lr=1e300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_missing_channels_matching_library_forward() {
    let (store, run_dir) = trained();
    let dir = scratch("synth");
    let ckpt = list_checkpoints(run_dir).unwrap().last().unwrap().1.clone();
    ok(bin().args(["synth", "--checkpoint", p(&ckpt), "--store", p(store), "--gate", "1110", "--out", p(&dir)]));

    let model = read_checkpoint(&ckpt, None).unwrap();
    let gate: GateVector = "1110".parse().unwrap();
    let test = read_store(store, None).unwrap().split(Split::Test);
    assert!(!test.is_empty());
    for patch in &test {
        let files: Vec<_> = fs::read_dir(dir.join(&patch.id)).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files, vec![std::ffi::OsString::from("ch3.png")]);
        let x = gate_tensor(&patch.to_tensor(), std::slice::from_ref(&gate)).unwrap();
        let expected = model.generator.forward_tensor(&x).unwrap();
        let written = load_gray(&dir.join(&patch.id).join("ch3.png")).unwrap();
        for (got, want) in written.data().iter().zip(expected.plane(0, 3)) {
            assert!((got / 65535.0 - want).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn synth_rejects_bad_gates() {
    let (store, run_dir) = trained();
    let dir = scratch("synth_bad");
    for gate in ["1111", "0000", "110", "11a0"] {
        let out = run(bin().args(["synth", "--checkpoint", p(run_dir), "--store", p(store), "--gate", gate])
            .args(["--out", p(&dir)]));
        assert_eq!(out.status.code(), Some(2), "gate {gate}");
    }
}

#[test]
fn eval_reports_every_single_missing_scenario_with_provenance() {
    let (store, run_dir) = trained();
    let dir = scratch("eval");
    let ckpt = list_checkpoints(run_dir).unwrap().last().unwrap().1.clone();
    let model = read_checkpoint(&ckpt, None).unwrap();
    ok(bin().args(["eval", "--checkpoint", p(&ckpt), "--store", p(store), "--out", p(&dir), "--missing", "2,3"]));

    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("missing_one_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["gates"].as_array().unwrap().len(), 4);
    assert_eq!(summary["provenance"]["config_hash"], model.config_hash.as_str());
    assert_eq!(summary["provenance"]["seed"], model.train_config.seed);
    assert_eq!(summary["provenance"]["epoch"], 2);

    // marker means recomputed from the CSV rows
    let mut reader = csv::Reader::from_path(dir.join("missing_one.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (marker, ssim, hash) = (col("marker"), col("ssim"), col("config_hash"));
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let n_test = read_store(store, None).unwrap().split(Split::Test).len();
    assert_eq!(records.len(), 4 * n_test);
    assert!(records.iter().all(|r| r[hash] == model.config_hash));
    for m in summary["marker_means"].as_array().unwrap() {
        let name = m["marker"].as_str().unwrap();
        let values: Vec<f64> = records.iter().filter(|r| &r[marker] == name).map(|r| r[ssim].parse().unwrap()).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert_eq!(values.len(), n_test);
        assert!((mean - m["mean"].as_f64().unwrap()).abs() < 1e-12);
    }

    // C(4, 2) + C(4, 3) gates
    let multi: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("missing_multi_summary.json")).unwrap()).unwrap();
    assert_eq!(multi["gates"].as_array().unwrap().len(), 6 + 4);

    let again = scratch("eval_again");
    ok(bin().args(["eval", "--checkpoint", p(&ckpt), "--store", p(store), "--out", p(&again), "--missing", "2,3"]));
    for f in ["missing_one.csv", "missing_multi.csv"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn store_hash_mismatch_is_detected() {
    let (store, _) = trained();
    let meta = read_store(store, None).unwrap().meta;
    assert!(read_store(store, Some(&meta.config_hash)).is_ok());
    assert!(read_store(store, Some("0000000000000000")).is_err());
}
