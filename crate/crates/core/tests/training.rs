mod common;

use common::{synth_samples, tiny8};
use vmamba3d::arch::{Model, ModelConfig};
use vmamba3d::train::{
    load_model, train_loop, Checkpoint, Sample, TrainConfig, Trainer, FORMAT_VERSION, MAGIC,
};
use vmamba3d::volume::{
    stratified_split, synth_generate, write_nifti, ClassLabel, Entry, Manifest, Split, SynthSpec,
};
use vmamba3d::Error;

fn trainer(config: TrainConfig) -> Trainer {
    Trainer::new(Model::new(tiny8()).unwrap(), config).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 4,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let data = synth_samples(0, 2);
    let mut t = trainer(small_config());
    let batch: Vec<&Sample> = data.iter().collect();
    t.step(&batch).unwrap();
    for (_, p) in t.model().store().iter().filter(|(_, p)| p.trainable()) {
        assert!(
            p.grad().data().iter().any(|&g| g != 0.0),
            "{} has an all-zero gradient",
            p.name()
        );
    }
}

#[test]
fn divergence_is_reported() {
    let data = synth_samples(0, 2);
    let mut t = trainer(TrainConfig {
        lr: 1e300,
        ..small_config()
    });
    let err = (0..5)
        .map(|_| t.run_epoch(&data))
        .find_map(Result::err)
        .expect("training with a huge step must diverge");
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn identical_seeds_give_identical_history() {
    let train = synth_samples(0, 4);
    let eval = synth_samples(100, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_config()
    };
    let a = trainer(cfg.clone()).fit(&train, &eval).unwrap();
    let b = trainer(cfg).fit(&train, &eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.epochs.len(), 2);
}

#[test]
fn initial_accuracy_near_chance() {
    let eval = synth_samples(200, 10);
    let t = trainer(small_config());
    let acc = t.evaluate(&eval).unwrap().accuracy;
    assert!((acc - 1.0 / 3.0).abs() <= 0.15, "untrained accuracy {acc}");
}

#[test]
fn resume_is_bit_identical() {
    let train = synth_samples(0, 4);
    let eval = synth_samples(100, 1);
    let cfg = small_config();

    let mut straight = trainer(cfg.clone());
    let full = straight.fit(&train, &eval).unwrap();

    let mut first = trainer(TrainConfig {
        epochs: 2,
        ..cfg.clone()
    });
    first.fit(&train, &eval).unwrap();
    let mut ckpt = Checkpoint::from_bytes(&first.checkpoint().to_bytes().unwrap()).unwrap();
    ckpt.train_config.epochs = cfg.epochs;
    let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    let rest = resumed.fit(&train, &eval).unwrap();

    assert_eq!(rest.epochs, full.epochs[2..]);
    assert_eq!(
        resumed.checkpoint().to_bytes().unwrap(),
        straight.checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let data = synth_samples(0, 1);
    let mut t = trainer(small_config());
    t.run_epoch(&data).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, t.checkpoint());
    assert_eq!(back.to_bytes().unwrap(), bytes);

    for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(
            err.to_string().contains("corrupt length"),
            "cut {cut}: {err}"
        );
    }
    let mut wrong = bytes.clone();
    wrong[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&wrong).unwrap_err();
    assert!(err.to_string().contains("version mismatch"), "{err}");
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn checkpoint_keeps_running_statistics() {
    let data = synth_samples(0, 2);
    let mut t = trainer(small_config());
    t.run_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.checkpoint().save(&path).unwrap();
    let model = load_model(&path).unwrap();
    let vols: Vec<_> = data.iter().map(|s| &s.volume).collect();
    assert_eq!(
        model.predict(&vols).unwrap(),
        t.model().predict(&vols).unwrap()
    );
}

#[test]
fn overfits_eight_samples() {
    let mut data = synth_samples(0, 3);
    data.truncate(8);
    let mut t = trainer(TrainConfig {
        batch_size: 8,
        epochs: 200,
        seed: 1,
        ..Default::default()
    });
    let batch: Vec<&Sample> = data.iter().collect();
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = t.step(&batch).unwrap();
        if last <= 0.05 {
            break;
        }
    }
    assert!(last <= 0.05, "loss after 200 steps: {last}");
}

#[test]
fn train_loop_from_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let base = SynthSpec::default();
    let mut entries = Vec::new();
    for label in ClassLabel::ALL {
        for i in 0..3 {
            let spec = SynthSpec {
                seed: base.sample_seed(label, i),
                ..base.clone()
            };
            let path = dir.path().join(format!("{label}_{i}.nii"));
            std::fs::write(
                &path,
                write_nifti(&synth_generate(label, &spec).unwrap()).unwrap(),
            )
            .unwrap();
            entries.push(Entry {
                path,
                label,
                split: Split::None,
            });
        }
    }
    let m = Manifest::new(entries).unwrap();
    let (train, test) = stratified_split(&m, 2.0 / 3.0, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..Default::default()
    };
    let out = train_loop(&ModelConfig::tiny(), &train, &test, &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 2);
    assert_eq!(out.checkpoint.epoch, 2);
    let mut csv = Vec::new();
    out.history.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,eval_loss,eval_accuracy");
    assert_eq!(lines.len(), 3);

    let empty = Manifest::default();
    assert!(train_loop(&ModelConfig::tiny(), &empty, &test, &cfg).is_err());
}
