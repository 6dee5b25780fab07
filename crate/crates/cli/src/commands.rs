use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use posecast::context::ContextKind;
use posecast::dataset::{self, MotionFamily, Sample, SyntheticMotionSpec};
use posecast::error::Error;
use posecast::harness::experiments::{metric_table, run_ablation, run_drift_experiment};
use posecast::harness::*;
use posecast::metrics::{self, EvalReport};
use posecast::model::Context;
use posecast::pose::{Pose, PoseSequence, TopologyKind};

use crate::{Cli, Command, CompareArgs, EvalArgs, ExperimentArgs, FamilyArg, ForecastArgs, Global, SplitArg, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(Error::Divergence { .. }) => 4,
            CliError::Lib(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e).into())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(dir, fs::create_dir_all(dir))?;
    }
    io(path, fs::write(path, contents))
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match g.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Train(a) => train_cmd(cfg, cli.global.config.is_some(), a),
        Command::Eval(a) => eval(&cfg, cli.global.config.is_some(), a),
        Command::Forecast(a) => forecast(a),
        Command::Compare(a) => compare(a),
        Command::Ablate(a) => ablate(&cfg, a),
        Command::Drift(a) => drift(&cfg, a),
        Command::Plot(a) => crate::plot::plot(a),
    }
}

fn synth(cfg: &ExperimentConfig, a: SynthArgs) -> Result<()> {
    let topology: TopologyKind = a.topology.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let seed = cfg.data.seed;
    let families: Vec<MotionFamily> = match a.family {
        FamilyArg::All => MotionFamily::ALL.to_vec(),
        FamilyArg::LinearDrift => vec![MotionFamily::LinearDrift],
        FamilyArg::SinusoidalSwing => vec![MotionFamily::SinusoidalSwing],
        FamilyArg::CircularArc => vec![MotionFamily::CircularArc],
        FamilyArg::TwoPhase => vec![MotionFamily::TwoPhase],
    };
    let samples = if a.family == FamilyArg::All && a.noise_std.is_none() {
        dataset::standard_benchmark(a.n, a.horizon, topology, seed)?
    } else {
        let mut all = Vec::new();
        for (f, family) in families.iter().enumerate() {
            let mut spec = SyntheticMotionSpec::standard(*family);
            if let Some(noise) = a.noise_std {
                spec.noise_std = noise;
            }
            let s = if families.len() > 1 {
                seed.wrapping_mul(1_000_003).wrapping_add(f as u64)
            } else {
                seed
            };
            all.extend(dataset::generate_synthetic(&spec, a.n, a.horizon, topology, s)?);
        }
        all
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(dir, fs::create_dir_all(dir))?;
    }
    dataset::write_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Aligns the configuration with the data: topology and horizon come from
/// the file unless a config file fixed a different topology, and unseen
/// labels join the vocabulary.
fn fit_config_to_data(mut cfg: ExperimentConfig, explicit: bool, samples: &[Sample]) -> Result<ExperimentConfig> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    if cfg.model.topology != first.topology {
        if explicit {
            return Err(Error::Incompatible(format!(
                "config topology is {}, data topology is {}",
                cfg.model.topology, first.topology
            ))
            .into());
        }
        cfg = cfg.with_topology(first.topology);
    }
    cfg.model.horizon = cfg.model.horizon.max(first.horizon());
    cfg.data.horizon = first.horizon();
    if cfg.context.kind == ContextKind::LabelEmbedding {
        let mut extra: Vec<String> = samples
            .iter()
            .map(|s| s.label.clone())
            .filter(|l| !cfg.context.vocabulary.contains(l))
            .collect();
        extra.sort();
        extra.dedup();
        if !extra.is_empty() {
            log::info!("adding labels {extra:?} to the vocabulary");
            cfg.context.vocabulary.extend(extra);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(cfg: ExperimentConfig, explicit: bool, a: TrainArgs) -> Result<()> {
    let samples = dataset::load_dataset(&a.data)?;
    let mut cfg = fit_config_to_data(cfg, explicit, &samples)?;
    let resume = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            // The stored run defines the model; keep only this run's budget.
            let stored = ckpt.config().clone();
            cfg = ExperimentConfig {
                train: cfg.train.clone(),
                ..stored
            };
            Some(ckpt)
        }
        None => None,
    };
    cfg.train.checkpoint_dir = Some(a.out.clone());
    io(&a.out, fs::create_dir_all(&a.out))?;
    write_file(&a.out.join("config.toml"), &cfg.to_toml())?;

    let split = split_for_training(&samples, &cfg.data)?;
    let provider = ContextProvider::from_config(&cfg.context)?;
    let train_set = prepare(&split.train, &provider)?;
    let validation = prepare(&split.validation, &provider)?;
    let test = prepare(&split.test, &provider)?;

    let method = a.method.into();
    let mut forecaster = Forecaster::build(method, &cfg, &provider, &train_set)?;
    let log_path = a.out.join("train.jsonl");
    let mut log = BufWriter::new(io(&log_path, fs::File::create(&log_path))?);
    let outcome = train(
        &mut forecaster,
        &train_set,
        &validation,
        &cfg,
        &provider,
        TrainOptions {
            resume,
            log: Some(&mut log),
        },
    )?;
    io(&log_path, log.flush())?;
    print!("trained {method} for {} steps ({} parameters)", outcome.steps, forecaster.num_parameters());
    match (outcome.best_val_ade, outcome.best_step) {
        (Some(ade), Some(step)) => println!("; best validation ADE {ade:.4} at step {step}"),
        _ => println!(),
    }
    if let Some(c) = &outcome.checkpoint {
        println!("checkpoint: {}", c.display());
    }
    if !test.is_empty() {
        let report = evaluate(&forecaster, &test, &provider, None)?;
        write_file(&a.out.join("report.json"), &report.to_json()?)?;
        println!(
            "held-out {} samples: RMSE {:.4} PCK {:.3} ADE {:.4} FDE {:.4}",
            report.num_samples, report.rmse, report.pck, report.ade, report.fde
        );
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, explicit: bool, a: EvalArgs) -> Result<()> {
    let samples = dataset::load_dataset(&a.data)?;
    let samples = match a.split {
        SplitArg::All => samples,
        SplitArg::Train => dataset::split(&samples, cfg.data.train_fraction, cfg.data.seed)?.0,
        SplitArg::Test => dataset::split(&samples, cfg.data.train_fraction, cfg.data.seed)?.1,
    };
    if samples.is_empty() {
        return Err(Error::Contract("no samples to evaluate".into()).into());
    }
    let gts: Vec<PoseSequence> = samples.iter().map(|s| s.future.clone()).collect();
    let delta = a.delta.unwrap_or_else(|| samples[0].topology.default_pck_delta());

    let report = if let Some(path) = &a.predictions {
        let preds = dataset::load_dataset(path)?;
        let by_id: HashMap<&str, &Sample> = preds.iter().map(|s| (s.id.as_str(), s)).collect();
        let matched = samples
            .iter()
            .map(|s| {
                by_id
                    .get(s.id.as_str())
                    .map(|p| p.future.clone())
                    .ok_or_else(|| Error::NotFound(s.id.clone()))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        metrics::evaluate("predictions", &matched, &gts, delta)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires one source");
        let ckpt = Checkpoint::load(path)?;
        let d_m = if explicit { cfg.context.d_m } else { ckpt.context_config().d_m };
        ckpt.check_compatible(samples[0].topology, d_m)?;
        let provider = ContextProvider::from_config(ckpt.context_config())?;
        let forecaster = ckpt.forecaster()?;
        let data = prepare(&samples, &provider)?;
        if let Forecaster::Decoder(_, m) = &forecaster {
            m.reset_forward_count();
        }
        let report = evaluate(&forecaster, &data, &provider, Some(delta))?;
        if let Forecaster::Decoder(_, m) = &forecaster {
            eprintln!(
                "model forwards per sample: {}",
                m.forward_count() as f64 / data.len() as f64
            );
        }
        report
    };

    let json = report.to_json()?;
    match &a.out {
        Some(p) => write_file(p, &json)?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.curves {
        write_file(p, &report.curve_csv())?;
    }
    Ok(())
}

fn parse_pose(text: &str) -> Result<Pose> {
    let coords = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("--p0: {v:?} is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pose::new(coords)?)
}

#[derive(serde::Serialize)]
struct ForecastOutput<'a> {
    topology: TopologyKind,
    horizon: usize,
    frames: Vec<&'a [f64]>,
}

fn forecast(a: ForecastArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let p0 = parse_pose(&a.p0)?;
    let topo = posecast::pose::SkeletonTopology::build(ckpt.topology())?;
    p0.check_topology(&topo)?;
    let provider = ContextProvider::from_config(ckpt.context_config())?;
    let ctx = match (&a.label, &a.context_ref, &provider) {
        (Some(l), _, _) => Context::Label(l.clone()),
        (None, Some(id), ContextProvider::Precomputed(_, store)) => Context::Features(store.get(id)?.clone()),
        (None, Some(_), ContextProvider::Labels(_)) => {
            return Err(CliError::Usage("this checkpoint takes --label, not --context-ref".into()))
        }
        (None, None, _) => unreachable!("clap requires a context"),
    };
    let forecaster = ckpt.forecaster()?;
    let seq = forecaster
        .predict(&[(&p0, &ctx)], a.horizon, &provider)?
        .pop()
        .expect("one input, one forecast");
    let rows: Vec<Vec<f64>> = seq.matrix().rows().into_iter().map(|r| r.to_vec()).collect();
    let out = ForecastOutput {
        topology: ckpt.topology(),
        horizon: seq.horizon(),
        frames: rows.iter().map(|r| r.as_slice()).collect(),
    };
    println!("{}", serde_json::to_string(&out).map_err(Error::from)?);
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = io(path, fs::read_to_string(path))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a.reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<(String, metrics::MetricSet)> = reports.iter().map(|r| (r.method.clone(), r.metrics())).collect();
    let md = metric_table("method", &rows);
    let mut csv = String::from("method,rmse,pck,ade,fde,hardest_ade,reconstruction_rmse\n");
    for r in &reports {
        let rec = r.reconstruction_rmse.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{rec}\n",
            r.method, r.rmse, r.pck, r.ade, r.fde, r.hardest.metrics.ade
        ));
    }
    print!("{md}");
    if let Some(p) = &a.out_md {
        write_file(p, &md)?;
    }
    if let Some(p) = &a.out_csv {
        write_file(p, &csv)?;
    }
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, a: ExperimentArgs) -> Result<()> {
    let report = run_ablation(cfg, &a.seeds)?;
    write_file(&a.out.join("ablation.json"), &report.to_json()?)?;
    write_file(&a.out.join("ablation.csv"), &report.to_csv())?;
    let md = report.to_markdown();
    write_file(&a.out.join("ablation.md"), &md)?;
    print!("{md}");
    println!(
        "placeholder gain over NTP: {:.1}%; last rung {:.1}% above the best",
        100.0 * report.placeholder_gain(),
        100.0 * report.full_config_gap()
    );
    Ok(())
}

fn drift(cfg: &ExperimentConfig, a: ExperimentArgs) -> Result<()> {
    let report = run_drift_experiment(cfg, &a.seeds)?;
    write_file(&a.out.join("drift.json"), &report.to_json()?)?;
    write_file(&a.out.join("drift_curves.csv"), &report.curves_csv())?;
    for s in &report.seeds {
        let (go, gn) = s.growth();
        println!(
            "seed {}: ADE@{} ours {:.4} ntp {:.4}; growth {go:.2}x vs {gn:.2}x",
            s.seed,
            s.ours_curve().len(),
            s.ours_curve().last().unwrap_or(&f64::NAN),
            s.ntp_curve().last().unwrap_or(&f64::NAN)
        );
    }
    println!("ours lower at the horizon on {}/{} seeds", report.wins(), report.seeds.len());
    Ok(())
}
