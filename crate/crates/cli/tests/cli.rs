use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tokentrack_core::{Checkpoint, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_tokentrack");

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn tokentrack")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "tokentrack {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "tokentrack {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path plus contents, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// One tiny training run shared by the checkpoint-consuming tests.
fn trained(tmp: &TempDir) -> PathBuf {
    let run_dir = tmp.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&tiny()),
        "--out",
        s(&run_dir),
        "--set",
        "train.epochs=1",
    ]);
    run_dir
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "gen-data",
            "--config",
            s(&tiny()),
            "--out",
            s(d),
            "--seed",
            "5",
            "--set",
            "world.sequences=4",
        ]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);

    let seqs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .collect();
    assert_eq!(seqs.len(), 4);

    let c = tmp.path().join("c");
    ok(&[
        "gen-data",
        "--config",
        s(&tiny()),
        "--out",
        s(&c),
        "--seed",
        "6",
        "--set",
        "world.sequences=4",
    ]);
    assert_ne!(tree(&c), ta);
}

#[test]
fn gen_data_annotations_have_one_line_per_frame() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("data");
    ok(&[
        "gen-data",
        "--config",
        s(&tiny()),
        "--out",
        s(&d),
        "--set",
        "world.sequences=10",
    ]);
    let seqs = tokentrack_core::world::io::load_suite(&d).unwrap();
    assert_eq!(seqs.len(), 10);
    let cfg = RunConfig::load(&tiny()).unwrap();
    for seq in &seqs {
        assert_eq!(seq.frames.len(), cfg.world.frames);
        assert_eq!(seq.gt.len(), cfg.world.frames);
    }
    let echoed = RunConfig::load(&d.join("config.txt")).unwrap();
    assert_eq!(echoed.world.sequences, 10);
}

#[test]
fn train_writes_checkpoints_and_resumes_exactly() {
    let tmp = TempDir::new().unwrap();
    let straight = tmp.path().join("straight");
    ok(&["train", "--config", s(&tiny()), "--out", s(&straight)]);
    let last = Checkpoint::load(&straight.join("model.ckpt")).unwrap();
    let mid = Checkpoint::load(&straight.join("checkpoints/epoch-001.ckpt")).unwrap();
    assert_eq!((mid.epoch, last.epoch), (1, 2));
    assert_eq!(last.step, 2 * mid.step);
    assert_eq!(
        fs::read(straight.join("checkpoints/epoch-002.ckpt")).unwrap(),
        last.to_bytes()
    );
    assert!(straight.join("config.txt").exists());
    let log = fs::read_to_string(straight.join("train.log")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=last.step).collect::<Vec<_>>());

    // copy the run, resume it from epoch 1: the tail of the log is replaced
    // and the final weights match bit for bit
    let resumed = tmp.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(straight.join("train.log"), resumed.join("train.log")).unwrap();
    let from = straight.join("checkpoints/epoch-001.ckpt");
    ok(&[
        "train",
        "--config",
        s(&tiny()),
        "--out",
        s(&resumed),
        "--resume",
        s(&from),
    ]);
    assert_eq!(fs::read(resumed.join("model.ckpt")).unwrap(), last.to_bytes());
    assert_eq!(fs::read_to_string(resumed.join("train.log")).unwrap(), log);

    let err = fails(&[
        "train",
        "--config",
        s(&tiny()),
        "--out",
        s(&resumed),
        "--resume",
        s(&from),
        "--set",
        "head.channels=4",
    ]);
    assert!(err.contains("different architecture"), "{err}");
}

#[test]
fn eval_is_deterministic_and_checks_ablation_flags() {
    let tmp = TempDir::new().unwrap();
    let ckpt = trained(&tmp).join("model.ckpt");
    let (a, b) = (tmp.path().join("e1"), tmp.path().join("e2"));
    let out_a = ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&a)]);
    let out_b = ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&b)]);
    assert_eq!(out_a, out_b);
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("report.txt").exists());
    assert!(a.join("config.txt").exists());

    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--variant", "self-self"]);
    assert!(err.contains("--variant"), "{err}");
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--no-temporal"]);
    assert!(err.contains("--no-temporal"), "{err}");
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--set", "backbone.depth=3"]);
    assert!(err.contains("backbone.depth"), "{err}");
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--variant", "bogus"]);
    assert!(err.contains("mamba-cross"), "{err}");

    // a longer inference window than trained is fine; the report records it
    let w = tmp.path().join("w");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&w),
        "--window",
        "5",
        "--no-prior",
    ]);
    let echoed = RunConfig::load(&w.join("config.txt")).unwrap();
    assert_eq!(echoed.eval.window, 5);
    assert!(!echoed.eval.use_prior);

    // non-architecture keys layer over the checkpoint's own config
    let few = tmp.path().join("few");
    let text = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&few),
        "--set",
        "world.sequences=2",
    ]);
    assert!(text.starts_with("2 sequences"), "{text}");
    let echoed = RunConfig::load(&few.join("config.txt")).unwrap();
    assert_eq!(echoed.backbone.embed_dim, 16);
}

#[test]
fn trace_and_summary_write_artifacts() {
    let tmp = TempDir::new().unwrap();
    let ckpt = trained(&tmp).join("model.ckpt");
    let t = tmp.path().join("trace");
    ok(&["trace", "--checkpoint", s(&ckpt), "--out", s(&t), "--frames", "3"]);
    let seq = t.join("seq_000");
    for f in [
        "frame_000001.ppm",
        "frame_000002.ppm",
        "score_000001.pgm",
        "guidance_000001.pgm",
        "track.txt",
    ] {
        assert!(seq.join(f).exists(), "missing {f}");
    }
    // frame 0 is the initialization and is not rendered
    assert!(!seq.join("frame_000000.ppm").exists());
    assert_eq!(fs::read_to_string(seq.join("track.txt")).unwrap().lines().count(), 3);
    assert!(t.join("config.txt").exists());

    let sdir = tmp.path().join("summary");
    let text = ok(&["summary", "--checkpoint", s(&ckpt), "--out", s(&sdir)]);
    assert!(text.contains("checkpoint walk"));
    assert!(!text.contains("MISMATCH"));
    assert_eq!(fs::read_to_string(sdir.join("summary.txt")).unwrap(), text);
}

#[test]
fn summary_without_checkpoint_reflects_flags() {
    let base = ok(&["summary", "--config", s(&tiny()), "--no-track-token"]);
    assert!(!base.contains("temporal"));
    assert!(!base.contains("track.seed"));
    let full = ok(&["summary", "--config", s(&tiny())]);
    assert!(full.contains("temporal"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = TempDir::new().unwrap();
    let err = fails(&["train", "--config", s(&tmp.path().join("nope.cfg"))]);
    assert!(err.starts_with("error:"), "{err}");
    let err = fails(&["train", "--config", s(&tiny()), "--set", "train.nonsense=1"]);
    assert!(err.contains("train.nonsense"), "{err}");
    let err = fails(&["train", "--config", s(&tiny()), "--set", "novalue"]);
    assert!(err.contains("KEY=VALUE"), "{err}");
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let err = fails(&["eval", "--checkpoint", s(&junk)]);
    assert!(err.contains("magic"), "{err}");
}
