use std::fs;
use std::path::Path;

use gcmae::config::RunConfig;
use gcmae::data::{load_image_folder, Dataset, DatasetKind, Split};
use gcmae::pipeline::{self, PretrainOptions};
use gcmae::Execution;
use image::{Rgb, RgbImage};
use serde_json::Value;

fn write_png(path: &Path, w: u32, h: u32, seed: u32) {
    let img = RgbImage::from_fn(w, h, |x, y| {
        let v = ((x * 7 + y * 3 + seed * 11) % 256) as u8;
        Rgb([v, v / 2, 255 - v])
    });
    img.save(path).unwrap();
}

#[test]
fn image_folder_is_grid_tiled() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("benign"), dir.path().join("tumor"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    write_png(&a.join("s1.png"), 40, 36, 1);
    write_png(&a.join("tiny.png"), 8, 8, 2);
    fs::write(a.join("broken.png"), b"not an image").unwrap();
    fs::write(a.join("notes.txt"), b"ignored").unwrap();
    write_png(&b.join("s2.png"), 32, 16, 3);

    let (tiles, names, report) = load_image_folder(dir.path(), 16, 3).unwrap();
    assert_eq!(names, ["benign", "tumor"]);
    assert_eq!(tiles.len(), 4 + 2);
    assert_eq!(report.tiles, 6);
    assert_eq!(report.images, 2);
    assert_eq!(report.discarded_margin_pixels, 40 * 36 - 4 * 256);
    assert_eq!(report.rejected_small.len(), 1);
    assert_eq!(report.skipped_undecodable.len(), 1);
    let labels: Vec<_> = tiles.iter().map(|t| t.tile.label).collect();
    assert_eq!(labels, [Some(0), Some(0), Some(0), Some(0), Some(1), Some(1)]);
    assert_eq!((tiles[1].grid_x, tiles[1].grid_y), (1, 0));
    // Second tile of the first image starts at column 16 of row 0.
    let expected = (16 * 7 + 11) as f64 / 255.0;
    assert!((tiles[1].tile.pixels[0] - expected).abs() < 1e-12);
}

#[test]
fn empty_class_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("a")).unwrap();
    fs::create_dir_all(dir.path().join("b")).unwrap();
    write_png(&dir.path().join("a").join("x.png"), 16, 16, 0);
    assert!(load_image_folder(dir.path(), 16, 3).is_err());
}

#[test]
fn folder_without_split_holds_out_whole_images() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["a", "b"] {
        let c = dir.path().join(class);
        fs::create_dir_all(&c).unwrap();
        for i in 0..5 {
            write_png(&c.join(format!("img{i}.png")), 32, 32, i);
        }
    }
    let mut cfg = RunConfig::toy();
    cfg.data.kind = DatasetKind::ImageFolder;
    cfg.data.path = Some(dir.path().to_path_buf());
    cfg.data.test_fraction = 0.2;
    let ds = Dataset::load(&cfg.data).unwrap();
    assert_eq!(ds.train.len() + ds.test.len(), 10 * 4);
    assert_eq!(ds.test.len(), 2 * 4);
    let sources = |split| {
        ds.manifest
            .iter()
            .filter(|m| m.split == split)
            .map(|m| m.source.clone())
            .collect::<std::collections::BTreeSet<_>>()
    };
    assert!(sources(Split::Train).is_disjoint(&sources(Split::Test)));
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.data.n_train = 64;
    cfg.data.n_test = 24;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.negatives = 32;
    cfg
}

#[test]
fn pretrain_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let opts = PretrainOptions {
        execution: Execution::Sequential,
        dump_recon: 3,
    };
    let summary = pipeline::pretrain(&cfg, dir.path(), &opts).unwrap();
    assert_eq!(summary.steps, 8);
    for f in ["run.json", "loss.csv", "manifest.csv", "model.ckpt", "bank.ckpt"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_dir(dir.path().join("recon")).unwrap().count(), 3);
    let loss = fs::read_to_string(dir.path().join(pipeline::LOSS_CSV)).unwrap();
    assert_eq!(loss.lines().count(), 1 + 8);

    let run: Value = serde_json::from_str(&fs::read_to_string(dir.path().join(pipeline::RUN_JSON)).unwrap()).unwrap();
    assert_eq!(run["config_hash"], cfg.hash());
    assert_eq!(run["seed"], 0);
    assert_eq!(run["objective"], "gcmae");
}

#[test]
fn probe_finetune_and_embed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.data.n_train = 200;
    cfg.data.n_test = 60;
    cfg.epochs = 4;
    cfg.negatives = 64;
    cfg.finetune.epochs = 3;
    let pre = dir.path().join("pre");
    pipeline::pretrain(&cfg, &pre, &PretrainOptions::default()).unwrap();
    let ckpt = pre.join("model.ckpt");

    let probe = pipeline::probe(&ckpt, &cfg, &dir.path().join("probe"), Execution::default()).unwrap();
    assert_eq!(probe.report.n_eval, 60);
    assert_eq!(probe.n_labeled, 200);
    let eval: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("probe").join(pipeline::EVAL_JSON)).unwrap()).unwrap();
    assert_eq!(eval["report"]["mode"], "probe");
    assert_eq!(eval["report"]["pretrain_checkpoint_sha256"].as_str().unwrap().len(), 64);

    let ft = pipeline::finetune(&ckpt, &cfg, &dir.path().join("ft"), Execution::default()).unwrap();
    assert_eq!(ft.probe_accuracy, Some(probe.report.accuracy));
    assert!(dir.path().join("ft").join("finetuned.ckpt").is_file());
    assert!(ft.report.accuracy >= probe.report.accuracy - 1.0, "{} vs {}", ft.report.accuracy, probe.report.accuracy);

    cfg.finetune.epochs = 0;
    let none = pipeline::finetune(&ckpt, &cfg, &dir.path().join("ft0"), Execution::default()).unwrap();
    assert_eq!(none.report.accuracy, probe.report.accuracy);
    assert_eq!(none.report.auc, probe.report.auc);

    let rows = pipeline::embed(&ckpt, &cfg, &dir.path().join("emb"), Execution::default()).unwrap();
    assert_eq!(rows, 260);
    let csv = fs::read_to_string(dir.path().join("emb").join(pipeline::EMBEDDINGS_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 261);
    assert!(lines.iter().all(|l| l.split(',').count() == cfg.encoder.dim + 2));
    let last_id: usize = lines[260].split(',').next().unwrap().parse().unwrap();
    assert_eq!(last_id, 259);
}

#[test]
fn probe_rejects_mismatched_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    pipeline::pretrain(&cfg, dir.path(), &PretrainOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.data.tile_size = 32;
    assert!(pipeline::probe(&dir.path().join("model.ckpt"), &other, &dir.path().join("p"), Execution::default()).is_err());
}
