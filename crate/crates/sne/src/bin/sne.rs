//! Experiment harness: config-driven pipelines from teacher training to
//! noise sweeps, with JSON checkpoints and a flat CSV summary per run
//! directory.

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::de::DeserializeOwned;
use sne::arch::{
    build_model, extract_feature_matrix, tiny_spec, vgg_spec, resnet_spec, ArchSpec,
    ModelInstance, NetKind,
};
use sne::config::{DisentangleMode, ExperimentConfig};
use sne::data::{
    add_gaussian_noise, load_cifar10_bin, load_mnist_idx, synth_blobs, ImageDataset, NoiseSpec,
};
use sne::energy::count_macs;
use sne::ensemble::{
    build_ensemble, evaluate, train_ensemble, ActivationPolicy, EnsembleModel,
};
use sne::losses::DistillConfig;
use sne::partition::{
    agglomerative_partition, balanced_kmeans_partition, fixed_partition, kmeans_partition,
    validate_partition, FixedMode, PartitionPlan, PartitionScheme,
};
use sne::report::{load_json, render_csv, save_json, collect_reports, CsvRow, RunReport};
use sne::rng::substream;
use sne::teacher::{evaluate_teacher, finetune_teacher, train_teacher};
use sne::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "sne", version, about = "Spiking neural ensemble experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config TOML; omitted, the built-in profile is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, reports, and the CSV summary.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// CI-sized profile: synthetic data, tiny nets (default).
    #[arg(long, global = true, conflicts_with = "full")]
    desk: bool,
    /// Full-scale CIFAR-10 profile; long-running.
    #[arg(long, global = true)]
    full: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ANN teacher with cross-entropy.
    TrainTeacher,
    /// Disentangling fine-tune of a trained teacher.
    FinetuneTeacher,
    /// Partition the teacher's feature space into student subsets.
    Partition,
    /// Distill the teacher into the spiking student ensemble.
    TrainEnsemble,
    /// Evaluate the ensemble for every K from N down to 1.
    SweepDropout,
    /// Evaluate the ensemble under the configured noise grid.
    SweepNoise,
    /// Aggregate every report in the run directory into summary.csv.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) | Error::InvalidArgument { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, snapshot) = resolve_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::TrainTeacher => cmd_train_teacher(&cfg, &snapshot, out),
        Command::FinetuneTeacher => cmd_finetune_teacher(&cfg, &snapshot, out),
        Command::Partition => cmd_partition(&cfg, &snapshot, out),
        Command::TrainEnsemble => cmd_train_ensemble(&cfg, &snapshot, out),
        Command::SweepDropout => cmd_sweep_dropout(&cfg, &snapshot, out),
        Command::SweepNoise => cmd_sweep_noise(&cfg, &snapshot, out),
        Command::Report => cmd_report(out),
    }
}

fn resolve_config(common: &Common) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, snapshot) = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let cfg = if common.full {
                ExperimentConfig::full_default()
            } else {
                ExperimentConfig::desk_default()
            };
            let text = cfg.to_toml()?;
            (cfg, text)
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, snapshot))
}

/// Load train and test splits. Synthetic data draws a fresh test set from
/// the same class centers via a named seed substream.
fn load_data(cfg: &ExperimentConfig) -> Result<(ImageDataset, ImageDataset)> {
    let ds = &cfg.dataset;
    match ds.name.as_str() {
        "synth" => {
            // one draw, shared class centers; alternate samples into splits
            let seed = substream(cfg.seed, "data").gen::<u64>();
            let full =
                synth_blobs(ds.classes, ds.per_class * 2, &ds.input_shape, ds.separation, seed)?;
            let train_idx: Vec<usize> = (0..full.len()).step_by(2).collect();
            let test_idx: Vec<usize> = (1..full.len()).step_by(2).collect();
            Ok((subset(&full, &train_idx, "train"), subset(&full, &test_idx, "test")))
        }
        name => {
            let dir = dataset_dir(ds.path.as_deref())?;
            match name {
                "cifar10" => load_cifar10_bin(&dir),
                "mnist" => load_mnist_idx(&dir),
                other => Err(Error::Config(format!("unknown dataset '{}'", other))),
            }
        }
    }
}

fn subset(full: &ImageDataset, indices: &[usize], split: &str) -> ImageDataset {
    let (images, labels) = full.batch(indices);
    ImageDataset {
        images,
        labels,
        classes: full.classes,
        split: split.to_string(),
    }
}

fn dataset_dir(configured: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = configured {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os("SNE_DATA_DIR") {
        Some(v) => Ok(PathBuf::from(v)),
        None => Err(Error::Config(
            "dataset path missing: set dataset.path or the SNE_DATA_DIR env var".into(),
        )),
    }
}

fn teacher_spec(cfg: &ExperimentConfig) -> Result<ArchSpec> {
    let t = &cfg.teacher;
    let spec = match t.arch.as_str() {
        "tiny" => tiny_spec(
            NetKind::Ann,
            cfg.dataset.input_shape,
            cfg.dataset.classes,
            t.feature_dim,
            true,
        ),
        "vgg5" => vgg_spec(5, t.mini, NetKind::Ann)?,
        "vgg11" => vgg_spec(11, t.mini, NetKind::Ann)?,
        "vgg19" => vgg_spec(19, t.mini, NetKind::Ann)?,
        "resnet10" => resnet_spec(10, if t.mini { 54 } else { 64 }, NetKind::Ann)?,
        "resnet18" => resnet_spec(18, if t.mini { 54 } else { 64 }, NetKind::Ann)?,
        other => return Err(Error::Config(format!("unknown teacher arch '{}'", other))),
    };
    let d = spec.feature_dim()?;
    if d != t.feature_dim {
        return Err(Error::Config(format!(
            "teacher.feature_dim {} does not match arch '{}' feature width {}",
            t.feature_dim, t.arch, d
        )));
    }
    Ok(spec)
}

fn load_checkpoint<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {}: run `sne {}` first",
            path.display(),
            hint
        )));
    }
    load_json(path)
}

/// Prefer the fine-tuned teacher when one exists; report which was used.
fn load_teacher(out: &Path) -> Result<(ModelInstance, bool)> {
    let finetuned = out.join("teacher_finetuned.json");
    if finetuned.exists() {
        return Ok((load_json(&finetuned)?, true));
    }
    Ok((load_checkpoint(&out.join("teacher.json"), "train-teacher")?, false))
}

/// Shared CSV skeleton; commands overwrite the fields they measure.
fn base_row(cfg: &ExperimentConfig, run_id: &str, arch: &str, split: &str) -> CsvRow {
    CsvRow {
        run_id: run_id.to_string(),
        arch: arch.to_string(),
        n_students: cfg.ensemble.n_students,
        k_active: cfg.ensemble.n_students,
        partition_scheme: cfg.disentangle.scheme.to_string(),
        alpha: cfg.ensemble.alpha,
        lambda: cfg.disentangle.lambda,
        t_steps: cfg.ensemble.t_steps,
        seed: cfg.seed,
        split: split.to_string(),
        accuracy: 0.0,
        sem: 0.0,
        ce_loss: 0.0,
        kd_loss: 0.0,
        sim_loss: 0.0,
        param_count: 0,
        mac_ops: 0,
        ac_ops: 0,
        input_layer_macs: 0,
        mean_firing_rate: 0.0,
    }
}

fn cmd_train_teacher(cfg: &ExperimentConfig, snapshot: &str, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (train, test) = load_data(cfg)?;
    let spec = teacher_spec(cfg)?;
    let mut model = build_model(&spec, cfg.seed)?;
    let history = train_teacher(
        &mut model,
        &train,
        cfg.teacher.epochs,
        cfg.teacher.batch_size,
        &cfg.teacher.optimizer,
        cfg.seed,
    )?;
    let train_acc = history.last().map_or(0.0, |e| e.train_accuracy);
    let test_acc = evaluate_teacher(&mut model, &test, cfg.eval.batch_size)?;
    save_json(&out.join("teacher.json"), &model)?;

    let mut report = RunReport::new("train-teacher", cfg.seed, snapshot.to_string());
    let param_count = spec.param_count()?;
    let macs = count_macs(&spec)?;
    let mac_total: u64 = macs.iter().map(|(_, m)| m).sum();
    let input_macs = macs.first().map_or(0, |(_, m)| *m);
    let last_ce = history.last().map_or(0.0, |e| e.ce);
    for (split, acc) in [("train", train_acc), ("test", test_acc)] {
        let mut row = base_row(cfg, &report.run_id, &spec.name, split);
        row.n_students = 1;
        row.k_active = 1;
        row.t_steps = 1;
        row.accuracy = acc;
        row.ce_loss = last_ce;
        row.param_count = param_count;
        row.mac_ops = mac_total;
        row.input_layer_macs = input_macs;
        report.csv_rows.push(row);
    }
    report.teacher_epochs = history;
    report.param_count = Some(param_count);
    report.final_accuracy = Some(test_acc);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    save_json(&out.join("report_train_teacher.json"), &report)?;
    println!(
        "teacher {}: train accuracy {:.4}, test accuracy {:.4}, {} params",
        spec.name, train_acc, test_acc, param_count
    );
    Ok(())
}

fn cmd_finetune_teacher(cfg: &ExperimentConfig, snapshot: &str, out: &Path) -> Result<()> {
    if cfg.disentangle.mode != DisentangleMode::Finetune {
        return Err(Error::Config(
            "disentangle.mode must be 'finetune' for finetune-teacher".into(),
        ));
    }
    let started = Instant::now();
    let (train, test) = load_data(cfg)?;
    let mut model: ModelInstance =
        load_checkpoint(&out.join("teacher.json"), "train-teacher")?;
    let history = finetune_teacher(
        &mut model,
        &train,
        cfg.ensemble.n_students,
        cfg.disentangle.lambda,
        cfg.disentangle.epochs,
        cfg.teacher.batch_size,
        &cfg.disentangle.optimizer,
        cfg.seed,
    )?;
    let test_acc = evaluate_teacher(&mut model, &test, cfg.eval.batch_size)?;
    save_json(&out.join("teacher_finetuned.json"), &model)?;

    let mut report = RunReport::new("finetune-teacher", cfg.seed, snapshot.to_string());
    let last = history.last().cloned();
    let mut row = base_row(cfg, &report.run_id, &model.spec.name, "test");
    row.n_students = 1;
    row.k_active = 1;
    row.t_steps = 1;
    row.accuracy = test_acc;
    row.ce_loss = last.as_ref().map_or(0.0, |e| e.ce);
    row.sim_loss = last.as_ref().map_or(0.0, |e| e.sim);
    row.param_count = model.spec.param_count()?;
    report.csv_rows.push(row);
    report.teacher_epochs = history;
    report.final_accuracy = Some(test_acc);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    save_json(&out.join("report_finetune_teacher.json"), &report)?;
    println!(
        "fine-tune: cluster distance {:.4}, test accuracy {:.4}",
        last.map_or(0.0, |e| e.cluster_distance),
        test_acc
    );
    Ok(())
}

fn cmd_partition(cfg: &ExperimentConfig, snapshot: &str, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (train, _) = load_data(cfg)?;
    let (mut model, finetuned) = load_teacher(out)?;
    let mut scheme = cfg.disentangle.scheme;
    // A disentangled feature space only matches its training-time layout.
    if finetuned && scheme != PartitionScheme::Contiguous {
        eprintln!(
            "warning: teacher was fine-tuned for contiguous clusters; overriding scheme {}",
            scheme
        );
        scheme = PartitionScheme::Contiguous;
    }
    let d = model.feature_dim;
    let n = cfg.ensemble.n_students;
    let plan = match scheme {
        PartitionScheme::Contiguous => fixed_partition(d, n, FixedMode::Contiguous)?,
        PartitionScheme::Fixed => {
            fixed_partition(d, n, FixedMode::Random { seed: cfg.seed })?
        }
        _ => {
            let features =
                extract_feature_matrix(&mut model, &train, cfg.ensemble.t_steps, cfg.eval.batch_size)?;
            match scheme {
                PartitionScheme::Kmeans => kmeans_partition(&features, n, cfg.seed)?,
                PartitionScheme::BalancedKmeans => {
                    balanced_kmeans_partition(&features, n, cfg.seed)?
                }
                PartitionScheme::Agglomerative => agglomerative_partition(&features, n)?,
                _ => unreachable!(),
            }
        }
    };
    validate_partition(&plan, d)?;
    save_json(&out.join("plan.json"), &plan)?;

    let mut report = RunReport::new("partition", cfg.seed, snapshot.to_string());
    report.plan = Some(plan.clone());
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    save_json(&out.join("report_partition.json"), &report)?;
    let sizes: Vec<usize> = plan.subsets.iter().map(|s| s.len()).collect();
    println!("partition {}: {} subsets, sizes {:?}", plan.scheme, n, sizes);
    Ok(())
}

fn policy_of(cfg: &ExperimentConfig) -> Result<ActivationPolicy> {
    match cfg.ensemble.policy.as_str() {
        "all" => Ok(ActivationPolicy::All),
        "trained_dropout" => Ok(ActivationPolicy::TrainedDropout { k: cfg.ensemble.k }),
        other => Err(Error::Config(format!("unknown policy '{}'", other))),
    }
}

fn ensemble_params(model: &EnsembleModel) -> u64 {
    let students: u64 = model
        .students
        .iter()
        .map(|s| s.params.iter().map(|p| p.len() as u64).sum::<u64>())
        .sum();
    students + model.head_w.len() as u64 + model.head_b.len() as u64
}

fn cmd_train_ensemble(cfg: &ExperimentConfig, snapshot: &str, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (train, test) = load_data(cfg)?;
    let (mut teacher, _) = load_teacher(out)?;
    let plan_path = out.join("plan.json");
    let plan: PartitionPlan = if plan_path.exists() {
        load_json(&plan_path)?
    } else {
        eprintln!("note: no plan.json in {}, using a contiguous partition", out.display());
        fixed_partition(teacher.feature_dim, cfg.ensemble.n_students, FixedMode::Contiguous)?
    };
    if plan.dims != teacher.feature_dim {
        return Err(Error::Config(format!(
            "plan covers {} feature dims but the teacher produces {}",
            plan.dims, teacher.feature_dim
        )));
    }
    if plan.subsets.len() != cfg.ensemble.n_students {
        return Err(Error::Config(format!(
            "plan has {} subsets but config asks for {} students",
            plan.subsets.len(),
            cfg.ensemble.n_students
        )));
    }
    let classes = train.classes;
    let trunk = tiny_spec(
        NetKind::Snn,
        cfg.dataset.input_shape,
        classes,
        teacher.feature_dim,
        false,
    );
    let distill = DistillConfig {
        alpha: cfg.ensemble.alpha,
        lambda: cfg.disentangle.lambda,
        n_students: cfg.ensemble.n_students,
        feature_dim: plan.dims,
    };
    let mut model = build_ensemble(
        &trunk,
        &plan,
        &distill,
        classes,
        cfg.ensemble.t_steps,
        cfg.seed,
    )?;
    let policy = policy_of(cfg)?;
    let history = train_ensemble(
        &mut model,
        &mut teacher,
        &train,
        &policy,
        cfg.ensemble.epochs,
        cfg.ensemble.batch_size,
        &cfg.ensemble.optimizer,
        cfg.seed,
    )?;
    let eval = evaluate(
        &mut model,
        &test,
        &policy,
        cfg.eval.repeats,
        cfg.eval.batch_size,
        cfg.seed,
    )?;
    save_json(&out.join("ensemble.json"), &model)?;

    let mut report = RunReport::new("train-ensemble", cfg.seed, snapshot.to_string());
    let last = history.last().cloned();
    let mut row = base_row(cfg, &report.run_id, &trunk.name, "test");
    row.partition_scheme = plan.scheme.to_string();
    row.k_active = policy.k(cfg.ensemble.n_students);
    row.accuracy = eval.accuracy;
    row.sem = eval.sem;
    row.ce_loss = last.as_ref().map_or(0.0, |e| e.ce);
    row.kd_loss = last.as_ref().map_or(0.0, |e| e.kd);
    row.param_count = ensemble_params(&model);
    row.mac_ops = eval.ledger.total_mac_ops();
    row.ac_ops = eval.ledger.total_ac_ops();
    row.input_layer_macs = eval.ledger.input_layer_macs;
    row.mean_firing_rate = eval.mean_firing_rate;
    report.csv_rows.push(row);
    report.ensemble_epochs = history;
    report.param_count = Some(ensemble_params(&model));
    report.final_accuracy = Some(eval.accuracy);
    report.final_sem = Some(eval.sem);
    report.ledger = Some(eval.ledger.clone());
    report.plan = Some(plan);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    save_json(&out.join("report_train_ensemble.json"), &report)?;
    println!(
        "ensemble: test accuracy {:.4} ± {:.4}, {} MACs, {} ACs, mean rate {:.3}",
        eval.accuracy,
        eval.sem,
        eval.ledger.total_mac_ops(),
        eval.ledger.total_ac_ops(),
        eval.mean_firing_rate
    );
    Ok(())
}

fn cmd_sweep_dropout(cfg: &ExperimentConfig, snapshot: &str, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (_, test) = load_data(cfg)?;
    let mut model: EnsembleModel =
        load_checkpoint(&out.join("ensemble.json"), "train-ensemble")?;
    let n = model.students.len();
    let mut report = RunReport::new("sweep-dropout", cfg.seed, snapshot.to_string());
    println!("K, accuracy, sem, ac_ops, mac_ops");
    for k in (1..=n).rev() {
        let policy = if k == n {
            ActivationPolicy::All
        } else {
            ActivationPolicy::StochasticEval { k }
        };
        let eval = evaluate(
            &mut model,
            &test,
            &policy,
            cfg.eval.repeats,
            cfg.eval.batch_size,
            cfg.seed,
        )?;
        println!(
            "{}, {:.4}, {:.4}, {}, {}",
            k,
            eval.accuracy,
            eval.sem,
            eval.ledger.total_ac_ops(),
            eval.ledger.total_mac_ops()
        );
        let mut row = base_row(cfg, &report.run_id, "tiny", "test");
        row.n_students = n;
        row.k_active = k;
        row.partition_scheme = model.plan.scheme.to_string();
        row.accuracy = eval.accuracy;
        row.sem = eval.sem;
        row.param_count = ensemble_params(&model);
        row.mac_ops = eval.ledger.total_mac_ops();
        row.ac_ops = eval.ledger.total_ac_ops();
        row.input_layer_macs = eval.ledger.input_layer_macs;
        row.mean_firing_rate = eval.mean_firing_rate;
        report.csv_rows.push(row);
        if k == n {
            report.final_accuracy = Some(eval.accuracy);
            report.final_sem = Some(eval.sem);
            report.ledger = Some(eval.ledger);
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    save_json(&out.join("report_sweep_dropout.json"), &report)?;
    Ok(())
}

fn cmd_sweep_noise(cfg: &ExperimentConfig, snapshot: &str, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (_, test) = load_data(cfg)?;
    let mut model: EnsembleModel =
        load_checkpoint(&out.join("ensemble.json"), "train-ensemble")?;
    let n = model.students.len();
    let mut report = RunReport::new("sweep-noise", cfg.seed, snapshot.to_string());
    println!("sigma, accuracy, sem, repeats");
    for (si, &sigma) in cfg.eval.sigmas.iter().enumerate() {
        let mut accs = Vec::with_capacity(cfg.eval.repeats);
        for r in 0..cfg.eval.repeats {
            // fresh corruption per repeat; the eval itself is deterministic
            let mut rng = substream(cfg.seed, &format!("noise{}-{}", si, r));
            let spec = NoiseSpec { sigma, seed: cfg.seed };
            let noisy = add_gaussian_noise(&test, &spec, &mut rng, cfg.eval.clamp)?;
            let eval = evaluate(
                &mut model,
                &noisy,
                &ActivationPolicy::All,
                1,
                cfg.eval.batch_size,
                cfg.seed,
            )?;
            accs.push(eval.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let sem = if accs.len() > 1 {
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
                / (accs.len() - 1) as f64;
            (var / accs.len() as f64).sqrt()
        } else {
            0.0
        };
        println!("{}, {:.4}, {:.4}, {}", sigma, mean, sem, accs.len());
        let mut row = base_row(cfg, &report.run_id, "tiny", &format!("test+noise{}", sigma));
        row.n_students = n;
        row.partition_scheme = model.plan.scheme.to_string();
        row.accuracy = mean;
        row.sem = sem;
        row.param_count = ensemble_params(&model);
        report.csv_rows.push(row);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    save_json(&out.join("report_sweep_noise.json"), &report)?;
    Ok(())
}

fn cmd_report(out: &Path) -> Result<()> {
    let (reports, skipped) = if out.is_dir() {
        collect_reports(out)?
    } else {
        (Vec::new(), Vec::new())
    };
    for s in &skipped {
        eprintln!("skipping unreadable report: {}", s);
    }
    let rows: Vec<CsvRow> = reports.into_iter().flat_map(|r| r.csv_rows).collect();
    let csv = render_csv(&rows);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("summary.csv"), &csv)?;
    print!("{}", csv);
    Ok(())
}
