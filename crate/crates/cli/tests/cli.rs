use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atsg_core::data::{read_volume, DatasetManifest, Split};
use atsg_core::model::{checkpoint, Hyperparams, Model};

fn atsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atsg"))
        .args(args)
        .env("ATSG_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn atsg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_flags_for_every_command() {
    let expected: &[(&str, &[&str])] = &[
        ("gen-data", &["--count", "--shape", "--seed", "--out"]),
        ("train", &["--manifest", "--out", "--config", "--tiny", "--seed", "--lr", "--epochs", "--padding"]),
        ("pretrain", &["--manifest", "--out", "--task", "--pretrain-epochs", "--snr-db"]),
        ("finetune", &["--ckpt", "--manifest", "--out", "--config"]),
        ("segment", &["--ckpt", "--in", "--out", "--attention", "--padding"]),
        ("attention", &["--ckpt", "--in", "--out", "--padding"]),
        ("eval", &["--ckpt", "--manifest", "--split", "--pred", "--truth", "--out"]),
        ("ablate", &["--manifest", "--out", "--seeds", "--config"]),
        ("lowlabel", &["--manifest", "--out", "--n-train", "--options", "--seeds"]),
        ("gradcheck", &["--tiny", "--config", "--seed", "--step", "--tolerance"]),
    ];
    for (cmd, flags) in expected {
        let out = atsg(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd} --help");
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&atsg(&[])), 1);
    assert_eq!(code(&atsg(&["frobnicate"])), 1);
    assert_eq!(code(&atsg(&["gen-data", "--count", "2", "--shape", "8", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&atsg(&["gen-data", "--count", "2", "--shape", "8,8", "--out", "x"])), 1);
    // Invalid configuration values are usage errors too.
    let dir = tempfile::tempdir().unwrap();
    let out = atsg(&["train", "--manifest", "m.json", "--out", path(dir.path()), "--lr", "-1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = atsg(&["train", "--tiny", "--manifest", path(&missing), "--out", path(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    // Nothing is written when validation fails.
    assert!(!dir.path().join("o").exists());

    let junk = dir.path().join("junk.avol");
    fs::write(&junk, b"not a volume").unwrap();
    let truth = dir.path().join("t.avol");
    fs::write(&truth, b"AVOL1").unwrap();
    let out = atsg(&["eval", "--pred", path(&junk), "--truth", path(&truth), "--out", path(&dir.path().join("e.csv"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_writes_pairs_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = atsg(&["gen-data", "--count", "8", "--shape", "16", "--seed", "7", "--out", path(d)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let manifest = DatasetManifest::load(a.join("manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| manifest.split(s).len());
    assert_eq!(counts.iter().sum::<usize>(), 8);
    for e in &manifest.entries {
        let img = read_volume(&e.image).unwrap();
        let mask = read_volume(e.mask.as_ref().unwrap()).unwrap().to_mask().unwrap();
        assert_eq!(img.spatial_shape(), [16; 3]);
        assert_eq!(mask.shape, [16; 3]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 17);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn gradcheck_tiny_passes_and_strict_tolerance_fails() {
    let out = atsg(&["gradcheck", "--tiny"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find(|l| l.starts_with("max relative error:")).expect("error line");
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-4);

    let out = atsg(&["gradcheck", "--tiny", "--tolerance", "1e-12"]);
    assert_eq!(code(&out), 3);
    assert_eq!(code(&atsg(&["gradcheck"])), 1);
}

#[test]
fn segment_writes_probabilities_labels_and_one_map_per_stage_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&atsg(&["gen-data", "--count", "3", "--shape", "10,11,9", "--seed", "1", "--out", path(&data)])), 0);
    // Seven stages of four heads, as in the default model, at a width a test
    // can afford.
    let hp = Hyperparams {
        block: 6,
        embed_dim: 8,
        head_dim: 4,
        ..Hyperparams::full()
    };
    let ckpt = dir.path().join("m.atsg");
    checkpoint::save(&ckpt, &Model::new(hp, 3).unwrap()).unwrap();
    let seg = dir.path().join("seg");
    let vol = data.join("case_000.avol");
    let out = atsg(&["segment", "--ckpt", path(&ckpt), "--in", path(&vol), "--out", path(&seg), "--attention"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let probs = read_volume(seg.join("probabilities.avol")).unwrap();
    assert_eq!(probs.shape(), [10, 11, 9, 2]);
    let labels = read_volume(seg.join("labels.avol")).unwrap().to_mask().unwrap();
    assert_eq!(labels.shape, [10, 11, 9]);
    let maps = fs::read_dir(&seg)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("attn_"))
        .count();
    assert_eq!(maps, 28);
    assert!(seg.join("attn_k6_h3.avol").exists());

    let pred = seg.join("labels.avol");
    let truth = data.join("case_000_mask.avol");
    let csv = dir.path().join("scores.csv");
    assert_eq!(code(&atsg(&["eval", "--pred", path(&pred), "--truth", path(&truth), "--out", path(&csv)])), 0);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("class,dsc,hd95_mm,assd_mm"));
}

#[test]
fn seeded_training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&atsg(&["gen-data", "--count", "4", "--shape", "8", "--seed", "2", "--out", path(&data)])), 0);
    let manifest = data.join("manifest.json");
    let mut ckpts = Vec::new();
    for run in ["r1", "r2"] {
        let out_dir = dir.path().join(run);
        let out = atsg(&[
            "train", "--tiny", "--manifest", path(&manifest), "--out", path(&out_dir), "--seed", "5", "--epochs", "2",
            "--blocks-per-epoch", "8", "--batch-size", "4", "--val-blocks", "4", "--lr", "1e-3",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("epochs.csv").exists() && out_dir.join("config.toml").exists());
        ckpts.push((fs::read(out_dir.join("best.atsg")).unwrap(), fs::read(out_dir.join("epochs.csv")).unwrap()));
    }
    assert!(ckpts[0] == ckpts[1]);
}

#[test]
fn pretrain_then_finetune_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&atsg(&["gen-data", "--count", "4", "--shape", "8", "--seed", "4", "--out", path(&data)])), 0);
    let manifest = data.join("manifest.json");
    let common = ["--epochs", "1", "--blocks-per-epoch", "4", "--batch-size", "2", "--val-blocks", "2"];
    let pre = dir.path().join("pre");
    let mut args = vec!["pretrain", "--tiny", "--task", "denoising", "--manifest", path(&manifest), "--out", path(&pre)];
    args.extend(common);
    assert_eq!(code(&atsg(&args)), 0);
    let pre_model = checkpoint::load(pre.join("pretrain_best.atsg")).unwrap();
    assert!(pre_model.weights.seg_head.is_none() && pre_model.weights.pretrain_head.is_some());

    let ckpt = pre.join("pretrain_best.atsg");
    let fine = dir.path().join("fine");
    let mut args = vec!["finetune", "--ckpt", path(&ckpt), "--manifest", path(&manifest), "--out", path(&fine)];
    args.extend(common);
    assert_eq!(code(&atsg(&args)), 0);
    let m = checkpoint::load(fine.join("best.atsg")).unwrap();
    assert!(m.weights.seg_head.is_some() && m.weights.pretrain_head.is_none());

    // A model without a segmentation head cannot segment.
    let vol = data.join("case_000.avol");
    let out = atsg(&["segment", "--ckpt", path(&ckpt), "--in", path(&vol), "--out", path(&dir.path().join("s"))]);
    assert_eq!(code(&out), 1);
}
