use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hhir_core::corpus::{bundled_sources, Manifest};
use hhir_core::eval::{caption_similarity, HashedEmbedder};
use hhir_core::fusion_lm::Tokenizer;
use hhir_core::snapshot;
use hhir_core::trainer::{Model, ModelConfig, TrainState};
use hhir_core::video_io::{load_clip, MaskSet};

const TINY: &str = r#"
seed = 3
[model]
height = 16
width = 16
lm_layers = 1
[model.qformer]
num_queries = 2
depth = 1
[train]
steps = 4
batch_size = 2
frames_per_clip = 4
checkpoint_interval = 2
[synth]
per_class = 2
frames = 8
"#;

fn hhir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hhir"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpus plus tiny config under `dir`.
fn tiny_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(&hhir(&["synth", "--config", s(&cfg), "--out", s(&data)]));
    (cfg, data.join("manifest.jsonl"))
}

fn empty_source_roots(root: &Path) {
    for src in bundled_sources() {
        fs::create_dir_all(root.join(&src.root_path)).unwrap();
    }
}

#[test]
fn build_data_summary_totals_103_classes_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("raw");
    empty_source_roots(&root);
    let clip_dir = root.join("ut_interaction").join("hugging");
    fs::create_dir_all(&clip_dir).unwrap();
    fs::write(clip_dir.join("seq1.raw"), [0u8; 0]).unwrap();

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = hhir(&["build-data", "--data-root", s(&root), "--out", s(&a)]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let total = stdout
        .lines()
        .find(|l| l.starts_with("Unified corpus"))
        .unwrap();
    let cols: Vec<&str> = total.split('|').map(str::trim).collect();
    assert_eq!(cols[1], "103");
    assert_eq!(cols[3], "1");

    ok(&hhir(&[
        "build-data",
        "--data-root",
        s(&root),
        "--out",
        s(&b),
    ]));
    for f in [
        "manifest.jsonl",
        "vocab.json",
        "chat.txt",
        "summary.txt",
        "run.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let m = Manifest::read(&a.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records[0].source, "UT-Interaction");
    assert_eq!(
        fs::read_to_string(a.join("chat.txt"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn build_data_rejects_empty_and_unreadable_sources() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.toml");
    fs::write(&empty, "# nothing\n").unwrap();
    let out = hhir(&[
        "build-data",
        "--sources",
        s(&empty),
        "--data-root",
        s(dir.path()),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("o2");
    let out = hhir(&[
        "build-data",
        "--data-root",
        s(&dir.path().join("nowhere")),
        "--out",
        s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!missing.exists());
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_hhir"))
        .args(["synth"])
        .env_remove("HHIR_OUT")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_overrides_mirror_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hhir"))
        .arg("synth")
        .env("HHIR_SEED", "41")
        .env("HHIR_OUT", dir.path().join("d"))
        .output()
        .unwrap();
    ok(&out);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 41);
}

#[test]
fn mask_streams_partition_the_clip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = tiny_corpus(dir.path());
    let rec = &Manifest::read(&manifest).unwrap().records[0];
    let out = dir.path().join("streams");
    let mask = rec.mask_path.clone().unwrap();
    ok(&hhir(&[
        "mask",
        "--clip",
        s(&rec.clip_path),
        "--masks",
        s(&mask),
        "--out",
        s(&out),
    ]));
    let clip = load_clip(&rec.clip_path, None).unwrap();
    let masks = MaskSet::read(&mask).unwrap();
    let read = |n: &str| load_clip(&out.join(n), Some((clip.height(), clip.width()))).unwrap();
    let (p1, p2, bg) = (read("p1.raw"), read("p2.raw"), read("bg.raw"));
    for t in 0..clip.len() {
        for i in 0..clip.height() * clip.width() {
            let owner = if masks.person1()[t][i] {
                &p1
            } else if masks.person2()[t][i] {
                &p2
            } else {
                &bg
            };
            assert_eq!(
                &owner.frame(t)[i * 3..i * 3 + 3],
                &clip.frame(t)[i * 3..i * 3 + 3]
            );
        }
    }
}

#[test]
fn zero_steps_keeps_initialization_and_resume_reproduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = tiny_corpus(dir.path());
    let t0 = dir.path().join("t0");
    ok(&hhir(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--steps",
        "0",
        "--out",
        s(&t0),
    ]));
    let state = TrainState::load_checkpoint(&t0.join("final.snap")).unwrap();
    assert_eq!(state.step, 0);
    let model_cfg: ModelConfig = state.model.cfg.clone();
    let fresh = Model::new(
        model_cfg,
        Tokenizer::from_vocab(state.model.tokenizer.vocab().to_vec()).unwrap(),
    )
    .unwrap();
    assert_eq!(state.model.trainable_checksum(), fresh.trainable_checksum());
    assert_eq!(state.model.frozen_checksum(), fresh.frozen_checksum());

    let t1 = dir.path().join("t1");
    ok(&hhir(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&t1),
    ]));
    assert!(t1.join("checkpoint_000002.snap").exists());
    let t2 = dir.path().join("t2");
    let final1 = t1.join("final.snap");
    ok(&hhir(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--resume",
        s(&final1),
        "--steps",
        "4",
        "--out",
        s(&t2),
    ]));
    let summary = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("train_summary.json")).unwrap()).unwrap()
    };
    let (a, b) = (summary(&t1), summary(&t2));
    assert_eq!(
        a["final_loss"].as_f64().unwrap().to_bits(),
        b["initial_loss"].as_f64().unwrap().to_bits()
    );
    assert_eq!(b["losses"].as_array().unwrap().len(), 0);
    let log = fs::read_to_string(t1.join("train.log")).unwrap();
    assert!(log.starts_with("# seed 3\n"));
    assert_eq!(log.lines().filter(|l| l.starts_with("step ")).count(), 4);
}

#[test]
fn training_is_deterministic_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = tiny_corpus(dir.path());
    let runs: Vec<Vec<u8>> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            ok(&hhir(&[
                "train",
                "--config",
                s(&cfg),
                "--manifest",
                s(&manifest),
                "--out",
                s(&out),
            ]));
            fs::read(out.join("final.snap")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let (meta, _) = snapshot::from_bytes(&runs[0]).unwrap();
    assert_eq!(meta["seed"], 3);
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = tiny_corpus(dir.path());
    let hot = dir.path().join("hot.toml");
    fs::write(
        &hot,
        TINY.replace("steps = 4", "steps = 4\nlr = 1e300\nclip_norm = 1e300"),
    )
    .unwrap();
    let out_dir = dir.path().join("t");
    let out = hhir(&[
        "train",
        "--config",
        s(&hot),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("last_good.snap").exists());
}

#[test]
fn eval_writes_reports_and_validates_open_set_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = tiny_corpus(dir.path());
    let t = dir.path().join("t");
    ok(&hhir(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&t),
    ]));
    let ckpt = t.join("final.snap");

    let empty = dir.path().join("unseen.txt");
    fs::write(&empty, "\n").unwrap();
    let e = dir.path().join("e0");
    let out = hhir(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--open-set",
        "--unseen",
        s(&empty),
        "--out",
        s(&e),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = hhir(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--open-set",
        "--out",
        s(&e),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let overlap = dir.path().join("overlap.txt");
    fs::write(&overlap, "hugging\n").unwrap();
    let out = hhir(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--unseen",
        s(&overlap),
        "--out",
        s(&e),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let e = dir.path().join("e1");
    ok(&hhir(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out",
        s(&e),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["sample_count"], 4);
    assert!(fs::read_to_string(e.join("report.txt"))
        .unwrap()
        .contains("Macro-F1"));

    let captions =
        hhir_cli::read_captions(&fs::read_to_string(e.join("captions.tsv")).unwrap()).unwrap();
    let m = Manifest::read(&manifest).unwrap();
    let emb = HashedEmbedder::default();
    let scores: Vec<f64> = m
        .records
        .iter()
        .map(|r| caption_similarity(&captions[&r.id], &r.soft_caption, &emb).score)
        .collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((report["cosine_mean"].as_f64().unwrap() - mean).abs() < 1e-9);
    assert!((report["cosine_std"].as_f64().unwrap() - std).abs() < 1e-9);

    let g = dir.path().join("g");
    ok(&hhir(&[
        "generate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out",
        s(&g),
    ]));
    assert_eq!(
        fs::read(g.join("captions.tsv")).unwrap(),
        fs::read(e.join("captions.tsv")).unwrap()
    );
}
