//! Drift and ablation experiments, and multi-method comparisons.
//!
//! Every experiment runs once per seed. A seed fixes both the benchmark
//! draw and the training stream (see [`ExperimentConfig::with_seed`]).

use serde::{Deserialize, Serialize};

use super::{benchmark_data, evaluate, prepare, train, ContextProvider, ExperimentConfig, Forecaster, Method, Prepared, TrainOptions};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::{EvalReport, MetricSet};
use crate::model::{AttentionMode, InputMode, ModelConfig};

/// Benchmark splits with their contexts resolved.
#[derive(Debug, Clone)]
pub struct PreparedBenchmark {
    pub provider: ContextProvider,
    pub train: Vec<Prepared>,
    pub validation: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

impl PreparedBenchmark {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let provider = ContextProvider::from_config(&cfg.context)?;
        let data = benchmark_data(&cfg.data)?;
        Ok(Self {
            train: prepare(&data.train, &provider)?,
            validation: prepare(&data.validation, &provider)?,
            test: prepare(&data.test, &provider)?,
            provider,
        })
    }
}

/// One trained and evaluated method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub num_parameters: usize,
    pub steps: usize,
    pub best_step: Option<usize>,
    pub report: EvalReport,
}

/// Builds, trains and evaluates `method` on `bench`.
pub fn run_method(cfg: &ExperimentConfig, method: Method, bench: &PreparedBenchmark) -> Result<(Forecaster, MethodRun)> {
    let mut forecaster = Forecaster::build(method, cfg, &bench.provider, &bench.train)?;
    let outcome = train(&mut forecaster, &bench.train, &bench.validation, cfg, &bench.provider, TrainOptions::default())?;
    let report = evaluate(&forecaster, &bench.test, &bench.provider, None)?;
    let run = MethodRun {
        method,
        seed: cfg.train.seed,
        num_parameters: forecaster.num_parameters(),
        steps: outcome.steps,
        best_step: outcome.best_step,
        report,
    };
    Ok((forecaster, run))
}

/// Placeholder model against the next-token transformer on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSeed {
    pub seed: u64,
    pub ours: MethodRun,
    pub ntp: MethodRun,
    /// `ADE_ntp(t) / ADE_ours(t)` for `t = 1..=T`.
    pub ratio: Vec<f64>,
}

impl DriftSeed {
    pub fn ours_curve(&self) -> &[f64] {
        &self.ours.report.per_timestamp.ade
    }

    pub fn ntp_curve(&self) -> &[f64] {
        &self.ntp.report.per_timestamp.ade
    }

    /// Whether the placeholder model has the lower error at the last step.
    pub fn ours_wins_at_horizon(&self) -> bool {
        self.ours_curve().last() < self.ntp_curve().last()
    }

    /// Error growth from the first to the last step, ours then NTP.
    pub fn growth(&self) -> (f64, f64) {
        (growth(self.ours_curve()), growth(self.ntp_curve()))
    }

    /// Ours grows more slowly than NTP over the horizon.
    pub fn ours_grows_slower(&self) -> bool {
        let (ours, ntp) = self.growth();
        ours < ntp
    }

    /// `max / min` of the two first-step errors.
    pub fn first_step_spread(&self) -> f64 {
        let (a, b) = (self.ours_curve()[0], self.ntp_curve()[0]);
        a.max(b) / a.min(b)
    }
}

fn growth(curve: &[f64]) -> f64 {
    curve[curve.len() - 1] / curve[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub seeds: Vec<DriftSeed>,
}

impl DriftReport {
    pub fn wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.ours_wins_at_horizon()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `seed,t,ours,ntp,ratio` rows.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("seed,t,ours,ntp,ratio\n");
        for s in &self.seeds {
            for (t, ((o, n), r)) in s.ours_curve().iter().zip(s.ntp_curve()).zip(&s.ratio).enumerate() {
                out.push_str(&format!("{},{},{o},{n},{r}\n", s.seed, t + 1));
            }
        }
        out
    }
}

/// Relative parameter-count gap tolerated between compared models.
pub const PARAMETER_TOLERANCE: f64 = 0.05;

/// Trains the placeholder model and its next-token twin, built from the same
/// model configuration with the same optimizer budget, on every seed.
/// Early stopping is disabled so both runs take exactly `max_steps` steps.
pub fn run_drift_experiment(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<DriftReport> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = cfg.clone().with_seed(seed);
        cfg.train.patience = 0;
        cfg.model.input_mode = InputMode::Placeholder;
        let bench = PreparedBenchmark::new(&cfg)?;
        let (_, ours) = run_method(&cfg, Method::Ours, &bench)?;
        let (_, ntp) = run_method(&cfg, Method::TfNtp, &bench)?;
        check_budget(&ours, &ntp)?;
        let ratio = ntp
            .report
            .per_timestamp
            .ade
            .iter()
            .zip(&ours.report.per_timestamp.ade)
            .map(|(n, o)| n / o)
            .collect();
        out.push(DriftSeed { seed, ours, ntp, ratio });
    }
    Ok(DriftReport { seeds: out })
}

fn check_budget(a: &MethodRun, b: &MethodRun) -> Result<()> {
    if a.steps != b.steps {
        return Err(Error::Contract(format!(
            "unequal budgets: {} took {} steps, {} took {}",
            a.method, a.steps, b.method, b.steps
        )));
    }
    let (pa, pb) = (a.num_parameters as f64, b.num_parameters as f64);
    if (pa - pb).abs() > PARAMETER_TOLERANCE * pa.max(pb) {
        return Err(Error::Contract(format!(
            "parameter counts differ by more than 5%: {} has {pa}, {} has {pb}",
            a.method, b.method
        )));
    }
    Ok(())
}

/// One configuration of the ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub name: String,
    pub input_mode: InputMode,
    pub attention_mode: AttentionMode,
    pub loss: LossWeights,
}

impl Rung {
    /// Names of the settings in which `self` and `other` differ.
    pub fn diff(&self, other: &Rung) -> Vec<&'static str> {
        let mut d = Vec::new();
        if self.input_mode != other.input_mode {
            d.push("input_mode");
        }
        if self.attention_mode != other.attention_mode {
            d.push("attention_mode");
        }
        if self.loss != other.loss {
            d.push("loss");
        }
        d
    }

    fn method(&self) -> Method {
        match self.input_mode {
            InputMode::Ntp => Method::TfNtp,
            InputMode::Placeholder => Method::Ours,
        }
    }

    fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = cfg.clone();
        cfg.model = ModelConfig {
            input_mode: self.input_mode,
            attention_mode: self.attention_mode,
            ..cfg.model
        };
        cfg.train.loss = self.loss;
        cfg
    }
}

/// NTP baseline, then placeholder rows with full attention, then the causal
/// mask, then the configured relative-loss weights. Each rung changes one
/// setting. The first rung keeps full attention in its flags; next-token
/// decoding is masked causally regardless.
pub fn ablation_ladder(cfg: &ExperimentConfig) -> Vec<Rung> {
    let mse = LossWeights::mse_only();
    vec![
        Rung {
            name: "ntp".into(),
            input_mode: InputMode::Ntp,
            attention_mode: AttentionMode::Full,
            loss: mse,
        },
        Rung {
            name: "placeholder-full".into(),
            input_mode: InputMode::Placeholder,
            attention_mode: AttentionMode::Full,
            loss: mse,
        },
        Rung {
            name: "placeholder-causal".into(),
            input_mode: InputMode::Placeholder,
            attention_mode: AttentionMode::Causal,
            loss: mse,
        },
        Rung {
            name: "relative-loss".into(),
            input_mode: InputMode::Placeholder,
            attention_mode: AttentionMode::Causal,
            loss: cfg.train.loss,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungResult {
    pub rung: Rung,
    pub runs: Vec<MethodRun>,
    /// Mean over seeds.
    pub mean: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rungs: Vec<RungResult>,
}

impl AblationReport {
    /// Relative ADE reduction of placeholder training over the NTP rung.
    pub fn placeholder_gain(&self) -> f64 {
        1.0 - self.rungs[1].mean.ade / self.rungs[0].mean.ade
    }

    /// How far the last rung's ADE sits above the best rung, relatively.
    pub fn full_config_gap(&self) -> f64 {
        let best = self.rungs.iter().map(|r| r.mean.ade).fold(f64::INFINITY, f64::min);
        self.rungs.last().map_or(f64::NAN, |r| r.mean.ade / best - 1.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `rung,seed,rmse,pck,ade,fde` rows, one per run plus a `mean` row per
    /// rung.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rung,seed,rmse,pck,ade,fde\n");
        for r in &self.rungs {
            for run in &r.runs {
                let m = run.report.metrics();
                out.push_str(&format!("{},{},{},{},{},{}\n", r.rung.name, run.seed, m.rmse, m.pck, m.ade, m.fde));
            }
            let m = r.mean;
            out.push_str(&format!("{},mean,{},{},{},{}\n", r.rung.name, m.rmse, m.pck, m.ade, m.fde));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let rows: Vec<(String, MetricSet)> = self.rungs.iter().map(|r| (r.rung.name.clone(), r.mean)).collect();
        metric_table("rung", &rows)
    }
}

pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<AblationReport> {
    let ladder = ablation_ladder(cfg);
    let mut rungs: Vec<RungResult> = ladder
        .into_iter()
        .map(|rung| RungResult {
            rung,
            runs: Vec::new(),
            mean: MetricSet::default(),
        })
        .collect();
    for &seed in seeds {
        let base = cfg.clone().with_seed(seed);
        let bench = PreparedBenchmark::new(&base)?;
        for r in &mut rungs {
            let rc = r.rung.apply(&base);
            let (_, run) = run_method(&rc, r.rung.method(), &bench)?;
            r.runs.push(run);
        }
    }
    for r in &mut rungs {
        let sets: Vec<MetricSet> = r.runs.iter().map(|x| x.report.metrics()).collect();
        r.mean = MetricSet::mean(&sets);
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rungs,
    })
}

/// Several methods on the same seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<MethodRun>,
}

impl Comparison {
    /// Seed-averaged metrics per method, in first-seen order.
    pub fn means(&self) -> Vec<(Method, MetricSet)> {
        let mut order: Vec<Method> = Vec::new();
        for r in &self.runs {
            if !order.contains(&r.method) {
                order.push(r.method);
            }
        }
        order
            .into_iter()
            .map(|m| {
                let sets: Vec<MetricSet> = self.runs.iter().filter(|r| r.method == m).map(|r| r.report.metrics()).collect();
                (m, MetricSet::mean(&sets))
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let rows: Vec<(String, MetricSet)> = self.means().into_iter().map(|(m, s)| (m.to_string(), s)).collect();
        metric_table("method", &rows)
    }

    /// `method,seed,rmse,pck,ade,fde,reconstruction_rmse` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed,rmse,pck,ade,fde,reconstruction_rmse\n");
        for r in &self.runs {
            let m = r.report.metrics();
            let rec = r.report.reconstruction_rmse.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{},{rec}\n", r.method, r.seed, m.rmse, m.pck, m.ade, m.fde));
        }
        out
    }
}

pub fn run_comparison(cfg: &ExperimentConfig, methods: &[Method], seeds: &[u64]) -> Result<Comparison> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let cfg = cfg.clone().with_seed(seed);
        let bench = PreparedBenchmark::new(&cfg)?;
        for &m in methods {
            runs.push(run_method(&cfg, m, &bench)?.1);
        }
    }
    Ok(Comparison { runs })
}

/// One codebook size of the two-stage baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookPoint {
    pub requested: usize,
    /// Codes actually fitted; fewer when the data has fewer distinct poses.
    pub fitted: usize,
    pub reconstruction_rmse: f64,
    pub rmse: f64,
}

/// Trains the two-stage baseline once per codebook size on one benchmark
/// draw.
pub fn run_codebook_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<CodebookPoint>> {
    let bench = PreparedBenchmark::new(cfg)?;
    let mut points = Vec::with_capacity(sizes.len());
    for &k in sizes {
        let mut cfg = cfg.clone();
        cfg.quantized.codebook_size = k;
        let (forecaster, run) = run_method(&cfg, Method::VqTf, &bench)?;
        let fitted = match &forecaster {
            Forecaster::Quantized(q) => q.codebook.k(),
            _ => unreachable!("built as the quantized baseline"),
        };
        points.push(CodebookPoint {
            requested: k,
            fitted,
            reconstruction_rmse: run.report.reconstruction_rmse.unwrap_or(f64::NAN),
            rmse: run.report.rmse,
        });
    }
    Ok(points)
}

/// Markdown table with one row per named metric set.
pub fn metric_table(first: &str, rows: &[(String, MetricSet)]) -> String {
    let mut out = format!("| {first} | RMSE | PCK | ADE | FDE |\n|---|---:|---:|---:|---:|\n");
    for (name, m) in rows {
        out.push_str(&format!("| {name} | {:.4} | {:.3} | {:.4} | {:.4} |\n", m.rmse, m.pck, m.ade, m.fde));
    }
    out
}
