use std::path::Path;
use std::process::Command;

use multiexit::autodiff::{seeded_rng, Ctx, Tensor};
use multiexit::branches::BranchArchitecture::*;
use multiexit::data::checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, TrainingMetadata};
use multiexit::data::export::{emit_plot_script, export_profiles, import_profiles};
use multiexit::data::idx::{load_fashion_mnist, load_idx, write_idx_images, write_idx_labels};
use multiexit::data::synthetic::{gen_count_regression, MAX_BLOBS};
use multiexit::data::{Split, Targets};
use multiexit::profile::profile_exits;
use multiexit::train::{MultiExitModel, TaskKind};
use multiexit::vit::ViTConfig;
use multiexit::Error;

fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let images = dir.join("images");
    let labels = dir.join("labels");
    let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 20) as u8).collect();
    write_idx_images(&images, 2, 3, 2, &pixels).unwrap();
    write_idx_labels(&labels, &[7, 2]).unwrap();
    (images, labels)
}

#[test]
fn idx_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    let set = load_idx(&images, &labels, Split::Test).unwrap();
    assert_eq!(set.images.shape(), &[2, 3, 2, 1]);
    assert_eq!(set.images.values()[5], 100.0 / 255.0);
    assert_eq!(set.images.values()[11], 220.0 / 255.0);
    assert_eq!(set.targets, Targets::Classes { labels: vec![7, 2], classes: 10 });
    assert_eq!(set.split, Split::Test);
}

#[test]
fn truncated_idx_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    let bytes = std::fs::read(&images).unwrap();
    for cut in [2, 10, bytes.len() - 1] {
        std::fs::write(&images, &bytes[..cut]).unwrap();
        let err = load_idx(&images, &labels, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err:?}");
    }
}

#[test]
fn swapped_idx_files_have_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    let err = load_idx(&labels, &images, Split::Train).unwrap_err();
    assert!(matches!(err, Error::BadMagic { found: 0x801, expected: 0x803, .. }), "{err:?}");
}

#[test]
fn idx_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    write_idx_labels(&labels, &[1, 2, 3]).unwrap();
    assert!(matches!(
        load_idx(&images, &labels, Split::Train),
        Err(Error::CountMismatch { images: 2, labels: 3 })
    ));
}

#[test]
fn fashion_mnist_test_split_when_available() {
    let dir = std::env::var("MULTIEXIT_DATA_DIR")
        .unwrap_or_else(|_| concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/fashion-mnist").into());
    if !Path::new(&dir).join("t10k-images-idx3-ubyte").exists() {
        eprintln!("Fashion-MNIST not found in {dir}; skipping");
        return;
    }
    let (train, test) = load_fashion_mnist(&dir).unwrap();
    assert_eq!(train.images.shape(), &[60_000, 28, 28, 1]);
    assert_eq!(test.images.shape(), &[10_000, 28, 28, 1]);
    match &test.targets {
        Targets::Classes { labels, classes } => {
            assert_eq!(*classes, 10);
            assert!(labels.iter().all(|&l| l < 10));
        }
        Targets::Counts(_) => unreachable!(),
    }
    assert!(test.images.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn count_regression_properties() {
    let set = gen_count_regression(500, 12, 1).unwrap();
    let Targets::Counts(counts) = &set.targets else { unreachable!() };
    assert!(counts.iter().all(|&k| k.fract() == 0.0 && (0.0..=MAX_BLOBS as f64).contains(&k)));
    assert!(set.images.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let per = 12 * 12;
    let mut blanks = 0;
    for (i, &k) in counts.iter().enumerate() {
        let image = &set.images.values()[i * per..(i + 1) * per];
        if k == 0.0 {
            blanks += 1;
            assert!(image.iter().all(|&v| v == 0.0));
        } else {
            assert!(image.iter().any(|&v| v > 0.0));
        }
    }
    assert!(blanks > 0);

    assert_eq!(gen_count_regression(50, 12, 2).unwrap(), gen_count_regression(50, 12, 2).unwrap());
    assert_ne!(gen_count_regression(50, 12, 2).unwrap(), gen_count_regression(50, 12, 3).unwrap());
    assert!(matches!(gen_count_regression(0, 12, 1), Err(Error::EmptyDataset)));
}

#[test]
fn count_regression_mean_is_ten() {
    let set = gen_count_regression(10_000, 4, 4).unwrap();
    let Targets::Counts(counts) = &set.targets else { unreachable!() };
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    assert!((mean - 10.0).abs() < 0.5, "mean {mean}");
}

fn small_model() -> MultiExitModel {
    let config = ViTConfig {
        image_size: 8,
        patch_size: 4,
        dim: 8,
        heads: 2,
        depth: 3,
        outputs: 5,
        ..ViTConfig::default()
    };
    let mut m = MultiExitModel::new(config, TaskKind::Classification { classes: 5 }, 6).unwrap();
    m.add_branch(1, CnnAddEe).unwrap();
    m.add_branch(3, MlpMixerEe).unwrap();
    // Move every parameter away from its seeded initial value.
    let mut rng = seeded_rng(7);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let t = m.store.get_mut(id);
        let noise = Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng);
        for (v, n) in t.values_mut().iter_mut().zip(noise.values()) {
            *v += n;
        }
    }
    m
}

fn meta() -> TrainingMetadata {
    TrainingMetadata {
        strategy: Some("end-to-end".into()),
        seed: 9,
        epochs: 4,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let model = small_model();
    save_checkpoint(&a, &model, &meta()).unwrap();
    let loaded = load_checkpoint(&a, Some(model.config())).unwrap();
    assert_eq!(loaded.metadata, meta());
    assert_eq!(loaded.model.branch_keys(), model.branch_keys());
    save_checkpoint(&b, &loaded.model, &loaded.metadata).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let image = Tensor::uniform(&[2, 8, 8, 1], 0.0, 1.0, &mut seeded_rng(10));
    let outputs = |m: &MultiExitModel| {
        let mut cx = Ctx::eval(&m.store);
        let all = m.forward_all(&mut cx, &image).unwrap();
        all.values().map(|&v| cx.tape.value(v).to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(outputs(&model), outputs(&loaded.model));
}

#[test]
fn checkpoint_with_other_config_is_rejected() {
    let model = small_model();
    let bytes = checkpoint_bytes(&model, &meta()).unwrap();
    let other = ViTConfig {
        depth: 4,
        ..model.config().clone()
    };
    assert!(matches!(parse_checkpoint(&bytes, Some(&other)), Err(Error::ConfigMismatch)));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = small_model();
    let bytes = checkpoint_bytes(&model, &meta()).unwrap();

    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(parse_checkpoint(&versioned, None), Err(Error::VersionMismatch { found: 99, .. })));

    assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 8], None), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3], None), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(parse_checkpoint(b"NOPE", None), Err(Error::CorruptCheckpoint(_))));
    let mut garbled = bytes.clone();
    garbled[20] = b'#';
    assert!(parse_checkpoint(&garbled, None).is_err());
}

#[test]
fn profile_csv_and_plot_script() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model();
    let data = multiexit::data::synthetic::gen_two_halves(10, 8, 11).unwrap();
    let data = multiexit::data::LabeledImageSet::new(
        data.images,
        Targets::Classes {
            labels: (0..10).map(|i| i % 5).collect(),
            classes: 5,
        },
        Split::Test,
    )
    .unwrap();
    let ps = profile_exits(&model, &data, 4).unwrap();
    let csv = dir.path().join("profiles.csv");
    export_profiles(&ps, &csv).unwrap();
    assert_eq!(import_profiles(&csv).unwrap(), ps);

    let script = dir.path().join("plot.py");
    emit_plot_script(&ps, &csv, &script).unwrap();
    let text = std::fs::read_to_string(&script).unwrap();
    assert!(text.contains(&csv.display().to_string()));
    assert!(text.contains("profiles.png"));
    assert!(text.contains("cumulative FLOPs"));
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_multiexit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn cli_pipeline_on_counting_task_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let common = ["--seed", "3", "--train-size", "60", "--test-size", "20"];
    for name in ["a.ckpt", "b.ckpt"] {
        let mut args = vec!["train-backbone", "--task", "count", "--depth", "2", "--dim", "8", "--epochs", "1"];
        args.extend(common);
        let out = p(name);
        args.extend(["--out", &out]);
        cli(&args);
    }
    assert_eq!(std::fs::read(p("a.ckpt")).unwrap(), std::fs::read(p("b.ckpt")).unwrap());

    let (a, exits, csv, script) = (p("a.ckpt"), p("exits.ckpt"), p("profiles.csv"), p("plot.py"));
    let mut args = vec![
        "train-exits",
        "--checkpoint",
        &a,
        "--out",
        &exits,
        "--strategy",
        "end-to-end",
        "--lambda-final-double",
        "--arch",
        "mlp-ee,resmlp-ee",
        "--locations",
        "1",
        "--epochs",
        "1",
    ];
    args.extend(common);
    cli(&args);
    let loaded = load_checkpoint(&exits, None).unwrap();
    assert_eq!(loaded.model.num_branches(), 2);
    assert_eq!(loaded.metadata.strategy.as_deref(), Some("end-to-end"));

    let mut args = vec!["profile", "--checkpoint", &exits, "--out", &csv];
    args.extend(common);
    cli(&args);
    let rows = import_profiles(&csv).unwrap();
    assert_eq!(rows.len(), 3);

    let mut args = vec!["infer", "--checkpoint", &exits, "--budget-flops", "18446744073709551615"];
    args.extend(common);
    let out = String::from_utf8(cli(&args).stdout).unwrap();
    assert!(out.contains("from final"), "{out}");

    cli(&["export-plot", "--profiles", &csv, "--out", &script]);
    assert!(Path::new(&script).exists());
}
