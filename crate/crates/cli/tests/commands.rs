use std::path::{Path, PathBuf};
use std::process::Command;

use radious_cli::commands::{self, Predictor, SplitChoice};
use radious_cli::{Checkpoint, CliError, RunConfig};
use radious_core::datakit::synthetic::synthetic_palette;
use radious_core::datakit::{load_dataset, read_gray_png, write_dataset, ClassPalette, Grid, ImageSample, ManifestFile, SourceKind};
use radious_core::metrics::MetricReport;
use radious_core::ModelError;

const DESK: &str = include_str!("../../../configs/desk.toml");

/// Desk config shrunk to 64×64 inputs and a tiny vocabulary.
fn small_config(dataset: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(DESK).unwrap();
    cfg.dataset = dataset.to_path_buf();
    cfg.model.vocab = 8;
    cfg.model.backbone.image_size = (64, 64);
    cfg.pretrain.vocab = 8;
    cfg.pretrain.resize = (64, 64);
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_size = 2;
    cfg.train.resize = (64, 64);
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg
}

fn synth(dir: &Path, count: usize) -> PathBuf {
    let root = dir.join("data");
    commands::synth(&root, count, 64, 64, 5).unwrap();
    root
}

fn ckpt_tensors(path: &Path) -> Vec<(String, radious_core::numkit::Tensor)> {
    Checkpoint::load(path).unwrap().tensors
}

#[test]
fn pretrain_writes_a_round_tripping_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&synth(dir.path(), 3));
    let out = dir.path().join("pre.ckpt");
    let logs = commands::pretrain(&cfg, 1, None, &out).unwrap();
    assert_eq!(logs.len(), 1);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    let log = std::fs::read_to_string(commands::log_path(&out)).unwrap();
    assert_eq!(log.lines().count(), 2);

    let again = commands::pretrain(&cfg, 1, None, &dir.path().join("pre2.ckpt")).unwrap();
    assert_eq!(logs, again);
    assert_eq!(std::fs::read(dir.path().join("pre2.ckpt")).unwrap(), bytes);
}

#[test]
fn zero_epoch_training_returns_the_init_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&synth(dir.path(), 3));
    let init = dir.path().join("init.ckpt");
    commands::pretrain(&cfg, 2, None, &init).unwrap();
    cfg.train.epochs = 0;
    let out = dir.path().join("out.ckpt");
    commands::train(&cfg, 2, Some(&init), &out).unwrap();
    assert_eq!(ckpt_tensors(&out), ckpt_tensors(&init));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&synth(dir.path(), 4));
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let la = commands::train(&cfg, 3, None, &a).unwrap();
    let lb = commands::train(&cfg, 3, None, &b).unwrap();
    assert_eq!(la, lb);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(commands::log_path(&a)).unwrap(), std::fs::read(commands::log_path(&b)).unwrap());
}

#[test]
fn too_many_segments_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let image = Grid::filled(64, 64, 50u8);
    let mask = Grid::from_fn(64, 64, |x, _| (x / 16) as u8 + 1);
    let s = ImageSample::new("crowded", image, mask, SourceKind::Opg).unwrap();
    write_dataset(&root, &[s.clone(), ImageSample { id: "other".into(), ..s }], &synthetic_palette(), &Default::default(), &Default::default()).unwrap();
    let mut cfg = small_config(&root);
    cfg.train_fraction = 0.99;
    cfg.model.decoder.num_queries = 3;
    let err = commands::train(&cfg, 0, None, &dir.path().join("x.ckpt")).unwrap_err();
    assert!(matches!(err, CliError::Sample { source: ModelError::Capacity { segments: 4, queries: 3 }, .. }), "{err}");
    assert_eq!(err.code(), "capacity");
    assert!(err.line().starts_with("error[capacity]: sample "));
}

#[test]
fn identity_eval_scores_one_and_feeds_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&synth(dir.path(), 10));
    let out = dir.path().join("identity.json");
    let r = commands::eval(&cfg, 0, None, SplitChoice::All, None, &out).unwrap();
    assert_eq!((r.miou, r.macc), (1.0, 1.0));
    assert_eq!(MetricReport::load(&out).unwrap(), r);

    let mut other = r.clone();
    other.model_name = "copy".into();
    let copy = dir.path().join("copy.json");
    other.save(&copy).unwrap();
    let (rows, _) = commands::compare(&[out, copy], None).unwrap();
    assert!(rows.iter().all(|row| row.miou_delta == 0.0 && row.macc_delta == 0.0));
}

#[test]
fn eval_matrix_matches_pixel_recount() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path(), 3);
    let cfg = small_config(&root);
    let ck = dir.path().join("m.ckpt");
    commands::train(&cfg, 1, None, &ck).unwrap();
    let model = Checkpoint::load(&ck).unwrap().to_model().unwrap();
    let palette = synthetic_palette();
    let m = load_dataset(&root, &palette).unwrap();
    let samples: Vec<&ImageSample> = m.samples.iter().collect();
    let report = commands::evaluate(&cfg, &samples, Predictor::Model(&model), "m", &palette).unwrap();

    let classes = palette.len();
    let mut counts = vec![vec![0u64; classes]; classes];
    for s in &samples {
        let pred = commands::predict(&model, &cfg, &s.image).unwrap();
        for (&p, &t) in pred.data().iter().zip(s.mask.data()) {
            counts[t as usize][p as usize] += 1;
        }
    }
    let mut ious = Vec::new();
    for c in 0..classes {
        let tp = counts[c][c];
        let fp: u64 = (0..classes).map(|r| counts[r][c]).sum::<u64>() - tp;
        let fnn: u64 = counts[c].iter().sum::<u64>() - tp;
        if tp + fp + fnn > 0 {
            ious.push(tp as f64 / (tp + fp + fnn) as f64);
        }
    }
    assert_eq!(report.miou, ious.iter().sum::<f64>() / ious.len() as f64);
    assert_eq!(report.pixel_total, 3 * 64 * 64);
}

#[test]
fn empty_split_is_a_degenerate_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let s = radious_core::datakit::synthetic::synthetic_sample("only", 64, 64, 1);
    write_dataset(&root, &[s], &synthetic_palette(), &[("only".to_string(), radious_core::datakit::Split::Train)].into(), &Default::default()).unwrap();
    let cfg = small_config(&root);
    let err = commands::eval(&cfg, 0, None, SplitChoice::Test, None, &dir.path().join("r.json")).unwrap_err();
    assert_eq!(err.code(), "degenerate-evaluation");
}

#[test]
fn infer_writes_palette_mask_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path(), 2);
    let cfg = small_config(&root);
    let ck = dir.path().join("m.ckpt");
    let mut zero = cfg.clone();
    zero.train.epochs = 0;
    commands::train(&zero, 0, None, &ck).unwrap();
    let image_path = root.join("images/syn0000.png");
    let out = dir.path().join("pred.png");
    let mask = commands::infer(&cfg, &ck, &image_path, &out).unwrap();
    let palette = synthetic_palette();
    assert!(mask.data().iter().all(|&v| palette.contains(v)));
    let back = commands::read_mask(&out, &palette).unwrap();
    assert_eq!(back, mask);
    let input = read_gray_png(&image_path).unwrap();
    let overlay = image::open(commands::overlay_path(&out)).unwrap();
    assert_eq!((overlay.width() as usize, overlay.height() as usize), input.extent());
    assert_eq!(overlay.color(), image::ColorType::Rgb8);
}

#[test]
fn overlay_blends_foreground_only() {
    let palette = ClassPalette::from_names(&["a"]);
    let image = Grid::new(2, 1, vec![100u8, 100]).unwrap();
    let mask = Grid::new(2, 1, vec![0u8, 1]).unwrap();
    let rgb = commands::overlay(&image, &mask, &palette);
    assert_eq!(&rgb[..3], &[100, 100, 100]);
    let c = palette.color(1);
    for ch in 0..3 {
        assert_eq!(rgb[3 + ch], ((100 + u16::from(c[ch]) + 1) / 2) as u8);
    }
}

#[test]
fn uniform_dataset_gets_uniform_plan() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let samples: Vec<ImageSample> = (0..10)
        .map(|i| {
            let mask = Grid::from_fn(32, 32, |x, _| (x / 8) as u8 + 1);
            ImageSample::new(format!("u{i}"), Grid::filled(32, 32, 9u8), mask, SourceKind::Opg).unwrap()
        })
        .collect();
    write_dataset(&root, &samples, &synthetic_palette(), &Default::default(), &Default::default()).unwrap();
    let mut cfg = small_config(&root);
    cfg.augment.total_target = 40;
    let (plan, _, _) = commands::augment_plan(&cfg, 0).unwrap();
    assert_eq!(plan.entries.len(), 4);
    assert!(plan.entries.iter().all(|e| e.target_count == 10));
}

#[test]
fn augment_apply_matches_plan_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&synth(dir.path(), 12));
    cfg.augment.total_target = 30;
    let (a, b) = (dir.path().join("aug_a"), dir.path().join("aug_b"));
    let (plan, written) = commands::augment_apply(&cfg, 4, &a).unwrap();
    commands::augment_apply(&cfg, 4, &b).unwrap();
    assert_eq!(written as u64, plan.planned_total());

    let manifest = ManifestFile::load(&a.join("manifest.json")).unwrap();
    for e in &plan.entries {
        let made = manifest.samples.iter().filter(|s| s.augmented_for == Some(e.class_id)).count() as u64;
        assert_eq!(made, e.target_count, "class {}", e.class_id);
    }
    let loaded = load_dataset(&a, &synthetic_palette()).unwrap();
    assert_eq!(loaded.len(), written);
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = std::fs::read_dir(a.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(std::fs::read(a.join(sub).join(&n)).unwrap(), std::fs::read(b.join(sub).join(&n)).unwrap());
        }
    }
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn compare_ranks_hand_built_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (name, miou) in [("b", 0.4), ("a", 0.7), ("c", 0.1)] {
        let r = MetricReport { model_name: name.into(), pixel_total: 1, per_class: vec![], miou, macc: miou / 2.0 };
        let p = dir.path().join(format!("{name}.json"));
        r.save(&p).unwrap();
        paths.push(p);
    }
    let (rows, table) = commands::compare(&paths, Some(&dir.path().join("rank.json"))).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.model_name.as_str()).collect();
    assert_eq!(names, ["a", "b", "c"]);
    assert_eq!(rows[2].miou_delta, 0.1 - 0.7);
    assert_eq!(table.lines().count(), 4);
    assert!(dir.path().join("rank.json").exists());

    let dup = commands::compare(&[paths[0].clone(), paths[0].clone()], None).unwrap_err();
    assert_eq!(dup.code(), "input");
}

#[test]
fn binary_reports_single_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_radious"))
        .args(["eval", "--identity", "--out", "r.json", "--config"])
        .arg(&missing)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error[config]: "));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_radious")).arg("compare").arg(&bad).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[input]: "));
}

#[test]
fn binary_end_to_end_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_radious");
    let data = dir.path().join("shapes");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["synth", "--out", data.to_str().unwrap(), "--count", "4", "--width", "64", "--height", "64", "--seed", "3"]);
    let cfg = small_config(Path::new("shapes"));
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let c = cfg_path.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    run(&["pretrain", "--config", c, "--out", &p("pre.ckpt")]);
    run(&["train", "--config", c, "--init", &p("pre.ckpt"), "--out", &p("ft.ckpt")]);
    run(&["eval", "--config", c, "--checkpoint", &p("ft.ckpt"), "--split", "all", "--out", &p("ft.json")]);
    run(&["eval", "--config", c, "--identity", "--split", "all", "--out", &p("gt.json")]);
    let table = run(&["compare", &p("ft.json"), &p("gt.json")]);
    assert_eq!(table.lines().nth(1).unwrap().split_whitespace().next(), Some("identity"));
    run(&["infer", "--config", c, "--checkpoint", &p("ft.ckpt"), "--image", &format!("{}/images/syn0001.png", data.display()), "--out", &p("pred.png")]);
    assert!(dir.path().join("pred_overlay.png").exists());
    let plan = run(&["augment", "plan", "--config", c]);
    assert!(plan.contains("crown"));
}
