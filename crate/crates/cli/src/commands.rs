use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use vmamba3d::diagnostics::bench::{fitted_slope, write_csv};
use vmamba3d::diagnostics::gradcheck::{check_op, full_suite, op_suite};
use vmamba3d::diagnostics::{run_bench, scan_check, BenchConfig, Mechanism, ScanCheckConfig};
use vmamba3d::metrics::{confusion, report_timestamp, EvalReport};
use vmamba3d::tensor::{OpKind, Precision};
use vmamba3d::train::{evaluate, load_samples, Checkpoint, Trainer};
use vmamba3d::volume::{
    stratified_split, synth_generate, write_nifti, ClassLabel, Entry, Manifest, Split, SynthSpec,
};

use crate::config::FileConfig;
use crate::{
    BenchArgs, Cli, Command, Common, EvalArgs, GradCheckArgs, ScanCheckArgs, SplitArgs, SynthArgs,
    TrainArgs, Validation,
};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.common.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&cli.common, &file, a),
        Command::Split(a) => split(&cli.common, a),
        Command::Train(a) => train(&cli.common, &file, a),
        Command::Eval(a) => eval(&cli.common, a),
        Command::GradCheck(a) => grad_check(&cli.common, a),
        Command::ScanCheck(a) => scan_check_cmd(&cli.common, a),
        Command::Bench(a) => bench(&cli.common, a),
    }
}

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn load_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let m = Manifest::load(path).with_context(|| format!("reading {}", path.display()))?;
    if m.is_empty() {
        return Err(Validation(format!("manifest {} has no entries", path.display())).into());
    }
    Ok(m)
}

fn synth(common: &Common, file: &FileConfig, a: SynthArgs) -> anyhow::Result<()> {
    let mut spec = file.synth();
    if let Some(d) = a.dims {
        let dims = [d[0], d[1], d[2]];
        spec = SynthSpec {
            noise_sigma: spec.noise_sigma,
            intensity_bias: spec.intensity_bias,
            seed: spec.seed,
            ..SynthSpec::for_dims(dims)
        };
    }
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let out = out_dir(common)?;
    let mut entries = Vec::new();
    for label in ClassLabel::ALL {
        for i in 0..a.count {
            let item = SynthSpec {
                seed: spec.sample_seed(label, i),
                ..spec.clone()
            };
            let path = out.join(format!("{label}_{i:04}.nii"));
            let bytes = write_nifti(&synth_generate(label, &item)?)?;
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            entries.push(Entry {
                path,
                label,
                split: Split::None,
            });
        }
    }
    let manifest = Manifest::new(entries)?;
    let path = out.join("manifest.tsv");
    manifest.save(&path)?;
    println!(
        "wrote {} volumes of {:?} and {}",
        manifest.len(),
        spec.dims,
        path.display()
    );
    Ok(())
}

fn split(common: &Common, a: SplitArgs) -> anyhow::Result<()> {
    let m = load_manifest(&a.manifest)?;
    let seed = common.seed.unwrap_or(0);
    let (train, test) = stratified_split(&m, a.fraction, seed)?;
    let out = out_dir(common)?;
    train.save(&out.join("train.tsv"))?;
    test.save(&out.join("test.tsv"))?;
    let fmt = |c: [usize; 3]| format!("AD {} / MCI {} / CN {}", c[0], c[1], c[2]);
    println!("train {:>6}  {}", train.len(), fmt(train.class_counts()));
    println!("test  {:>6}  {}", test.len(), fmt(test.class_counts()));
    Ok(())
}

fn train(common: &Common, file: &FileConfig, a: TrainArgs) -> anyhow::Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let t = &mut ckpt.train_config;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.lr = a.lr.unwrap_or(t.lr);
            t.precision = common.precision.unwrap_or(t.precision);
            Trainer::from_checkpoint(&ckpt)?
        }
        None => {
            let mut model = file.model();
            let mut cfg = file.train();
            if let Some(seed) = common.seed {
                model.seed = seed;
                cfg.seed = seed;
            }
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
            cfg.lr = a.lr.unwrap_or(cfg.lr);
            cfg.precision = common.precision.unwrap_or(cfg.precision);
            Trainer::new(vmamba3d::arch::Model::new(model)?, cfg)?
        }
    };
    let dims = trainer.model().config().input_dims;
    let train = load_samples(&load_manifest(&a.train)?, dims)?;
    let eval = load_samples(&load_manifest(&a.eval)?, dims)?;
    let out = out_dir(common)?;
    let ckpt_path = out.join("model.ckpt");
    eprintln!(
        "training {} parameters on {} volumes, evaluating on {}",
        trainer.model().num_trainable(),
        train.len(),
        eval.len()
    );
    let history = trainer.fit_with(&train, &eval, |t, r| {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  eval_loss {:.4}  eval_accuracy {:.4}",
            r.epoch, r.train_loss, r.eval_loss, r.eval_accuracy
        );
        t.checkpoint().save(&ckpt_path)
    })?;
    if history.epochs.is_empty() {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    let history_path = out.join("history.csv");
    history.write_csv(fs::File::create(&history_path)?)?;
    if let Some((loss, acc)) = history.initial {
        println!("initial   eval_loss {loss:.4}  eval_accuracy {acc:.4}");
    }
    if let Some(last) = history.epochs.last() {
        println!(
            "epoch {:>3} eval_loss {:.4}  eval_accuracy {:.4}",
            last.epoch, last.eval_loss, last.eval_accuracy
        );
    }
    println!(
        "wrote {} and {}",
        ckpt_path.display(),
        history_path.display()
    );
    Ok(())
}

fn eval(common: &Common, a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let precision = common.precision.unwrap_or(ckpt.train_config.precision);
    let batch = ckpt.train_config.batch_size;
    let model = Trainer::from_checkpoint(&ckpt)?.into_model();
    let samples = load_samples(&load_manifest(&a.manifest)?, model.config().input_dims)?;
    let result = evaluate(&model, &samples, batch, precision)?;
    let truths: Vec<ClassLabel> = samples.iter().map(|s| s.label).collect();
    let cm = confusion(&result.predictions, &truths)?;
    let dataset = a
        .dataset
        .unwrap_or_else(|| a.manifest.display().to_string());
    let report = EvalReport::new(
        dataset,
        cm,
        a.checkpoint.display().to_string(),
        report_timestamp(),
    )?;
    let out = out_dir(common)?;
    let json: PathBuf = out.join("report.json");
    let csv: PathBuf = out.join("report.csv");
    fs::write(&json, report.to_json()?)?;
    fs::write(&csv, report.to_csv()?)?;
    println!(
        "{:<8}{:>10}{:>10}{:>10}",
        "label", "precision", "recall", "f1"
    );
    for c in &report.per_class {
        println!(
            "{:<8}{:>10.4}{:>10.4}{:>10.4}",
            c.label.as_str(),
            c.precision,
            c.recall,
            c.f1
        );
    }
    println!(
        "{:<8}{:>10.4}{:>10.4}{:>10.4}",
        "macro", report.r#macro.precision, report.r#macro.recall, report.r#macro.f1
    );
    println!(
        "accuracy {:.4} over {} volumes",
        report.accuracy,
        cm.total()
    );
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn grad_check(common: &Common, a: GradCheckArgs) -> anyhow::Result<()> {
    if common.precision == Some(Precision::Single) {
        eprintln!("note: gradient checks always run in double precision");
    }
    if a.trials == 0 {
        return Err(Validation("--trials must be at least 1".into()).into());
    }
    let seed = common.seed.unwrap_or(0);
    let mut results = if a.ops_only {
        op_suite(a.trials, seed)?
    } else {
        full_suite(a.trials, seed)?
    };
    if let Some(name) = &a.inject_fault {
        let kind = OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Validation(format!("unknown op `{name}`")))?;
        let faulty = check_op(kind, a.trials, seed, true)?;
        match results.iter_mut().find(|r| r.name == faulty.name) {
            Some(slot) => *slot = faulty,
            None => results.push(faulty),
        }
    }
    println!(
        "{:<34}{:>7}{:>14}{:>11}  result",
        "check", "trials", "max_rel_err", "tolerance"
    );
    for r in &results {
        println!(
            "{:<34}{:>7}{:>14.3e}{:>11.0e}  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Validation(format!(
            "{failed} of {} gradient checks failed",
            results.len()
        ))
        .into());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn scan_check_cmd(common: &Common, a: ScanCheckArgs) -> anyhow::Result<()> {
    let cfg = ScanCheckConfig {
        trials: a.trials,
        max_len: a.max_len,
        max_state: a.max_state,
        seed: common.seed.unwrap_or(0),
    };
    let report = scan_check(&cfg)?;
    for t in report.failures() {
        println!(
            "FAIL seed={} L={} N_s={} scan_dev={:.3e} oracle_dev={}",
            t.seed,
            t.len,
            t.state,
            t.scan_deviation,
            t.oracle_deviation
                .map_or("-".to_string(), |d| format!("{d:.3e}"))
        );
    }
    println!(
        "{} trials, max |parallel - sequential| {:.3e}; {} oracle trials, max |scan - oracle| {:.3e}",
        report.trials.len(),
        report.max_scan_deviation,
        report.oracle_trials,
        report.max_oracle_deviation
    );
    if !report.passed() {
        return Err(Validation(format!(
            "{} of {} scan trials out of tolerance",
            report.failures().count(),
            report.trials.len()
        ))
        .into());
    }
    Ok(())
}

fn bench(common: &Common, a: BenchArgs) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        lengths: a.lengths,
        model_dim: a.model_dim,
        state_dim: a.state_dim,
        repetitions: a.repetitions,
        seed: common.seed.unwrap_or(0),
        ..BenchConfig::default()
    };
    let records = run_bench(&cfg)?;
    let out = out_dir(common)?;
    let path = out.join("bench.csv");
    write_csv(fs::File::create(&path)?, &records)?;
    for mech in Mechanism::ALL {
        println!(
            "{:<16} log-log slope {:.3}",
            mech.to_string(),
            fitted_slope(&records, mech)?
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
