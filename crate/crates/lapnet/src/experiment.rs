//! Experiment pipeline: seeded trials of train -> score -> prune -> retrain,
//! plus scoring benchmarks and deterministic CSV/JSON reports.
//!
//! Determinism contract: running the same [`ExperimentSpec`] twice must
//! produce byte-identical reports. Every random choice is seeded from the
//! spec, trials are merged in (criterion, tau, trial) order, and wall-clock
//! scoring times are kept out of the report rows (they live on the raw
//! [`TrialRecord`]s and in the `bench` verb instead).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{build, Arch};
use crate::criteria::{score_network, Criterion, PruneContext};
use crate::data::{load_mnist, synthetic_blobs, Dataset, MnistSplit};
use crate::error::{LapError, Result};
use crate::network::Network;
use crate::select::{prune, PruneConfig, SparsitySchedule};
use crate::stats::{estimate_activation_probs, hessian_diagonal, ActivationStats, HessianDiag};
use crate::train::{evaluate, train, TrainConfig};

/// Offset added to the trial seed for retraining so the retrain batch
/// stream differs from the initial training stream but stays reproducible.
const RETRAIN_SEED_OFFSET: u64 = 1_000_003;

/// Data source for an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    SyntheticBlobs,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 2] = [DatasetKind::Mnist, DatasetKind::SyntheticBlobs];

    pub fn tag(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::SyntheticBlobs => "synthetic-blobs",
        }
    }

    pub fn parse(s: &str) -> Result<DatasetKind> {
        DatasetKind::ALL
            .iter()
            .copied()
            .find(|d| d.tag() == s)
            .ok_or_else(|| {
                LapError::InvalidArgument(format!(
                    "unknown dataset '{s}'; expected one of {}",
                    DatasetKind::ALL.map(|d| d.tag()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Shape of the synthetic Gaussian-blob classification data. The test split
/// reuses the same class structure with a different sample seed.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            classes: 4,
            dim: 16,
            train_count: 2000,
            test_count: 500,
            seed: 7,
        }
    }
}

/// Full description of one experiment: what to train, how to prune, which
/// sparsity exponents to sweep, and how many seeded trials to run.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub arch: Arch,
    pub dataset: DatasetKind,
    pub blobs: BlobsConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    /// Sparsity exponents to sweep; tau = 0 leaves the network unpruned.
    pub taus: Vec<u32>,
    pub trials: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            arch: Arch::FcnSmall,
            dataset: DatasetKind::SyntheticBlobs,
            blobs: BlobsConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::new(
                Criterion::Lap,
                SparsitySchedule {
                    p: 0.0,
                    q: 0.5,
                    tau: 1,
                },
            ),
            taus: vec![1],
            trials: 1,
            output: None,
        }
    }
}

fn parse_kv<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        LapError::InvalidArgument(format!("bad value '{value}' for config key '{key}'"))
    })
}

impl ExperimentSpec {
    /// Build a spec from flat `key=value` pairs applied in order onto the
    /// defaults, so later pairs (e.g. command-line overrides) win.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::default();
        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "arch" => spec.arch = Arch::parse(v.trim())?,
                "dataset" => spec.dataset = DatasetKind::parse(v.trim())?,
                "criterion" => spec.prune.criterion = Criterion::parse(v.trim())?,
                "scope" => spec.prune.scope = crate::select::Scope::parse(v.trim())?,
                "structure" => spec.prune.structure = crate::select::Structure::parse(v.trim())?,
                "order" => spec.prune.order = crate::select::Order::parse(v.trim())?,
                "sequential_steps" => spec.prune.sequential_steps = parse_kv(key, v)?,
                "p" => spec.prune.schedule.p = parse_kv(key, v)?,
                "q" => spec.prune.schedule.q = parse_kv(key, v)?,
                "tau" => spec.prune.schedule.tau = parse_kv(key, v)?,
                "taus" => {
                    spec.taus = v
                        .split(',')
                        .map(|t| parse_kv("taus", t))
                        .collect::<Result<Vec<u32>>>()?;
                }
                "trials" => spec.trials = parse_kv(key, v)?,
                "output" => spec.output = Some(PathBuf::from(v.trim())),
                "steps" => spec.train.steps = parse_kv(key, v)?,
                "learning_rate" => spec.train.learning_rate = parse_kv(key, v)?,
                "batch_size" => spec.train.batch_size = parse_kv(key, v)?,
                "seed" => spec.train.seed = parse_kv(key, v)?,
                "retrain_steps" => spec.train.retrain_steps = parse_kv(key, v)?,
                "workers" => spec.train.workers = parse_kv(key, v)?,
                "train_bn_params" => spec.train.train_bn_params = parse_kv(key, v)?,
                "prune_seed" => spec.prune.seed = parse_kv(key, v)?,
                "blob_classes" => spec.blobs.classes = parse_kv(key, v)?,
                "blob_dim" => spec.blobs.dim = parse_kv(key, v)?,
                "blob_train_count" => spec.blobs.train_count = parse_kv(key, v)?,
                "blob_test_count" => spec.blobs.test_count = parse_kv(key, v)?,
                "blob_seed" => spec.blobs.seed = parse_kv(key, v)?,
                other => {
                    return Err(LapError::InvalidArgument(format!(
                        "unknown config key '{other}'"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.prune.validate()?;
        if self.trials == 0 {
            return Err(LapError::Config("trials must be at least 1".into()));
        }
        if self.taus.is_empty() {
            return Err(LapError::Config("need at least one tau to sweep".into()));
        }
        if self.arch.is_conv() && self.dataset == DatasetKind::SyntheticBlobs {
            return Err(LapError::Config(format!(
                "{} needs image-shaped inputs; synthetic blobs are flat vectors",
                self.arch
            )));
        }
        if self.dataset == DatasetKind::SyntheticBlobs {
            if self.blobs.classes < 2 {
                return Err(LapError::Config("blobs need at least 2 classes".into()));
            }
            if self.blobs.train_count == 0 || self.blobs.test_count == 0 {
                return Err(LapError::Config("blob splits must be nonempty".into()));
            }
        }
        Ok(())
    }

    /// Load the train and test splits named by the spec.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Mnist => Ok((
                load_mnist(MnistSplit::Train)?,
                load_mnist(MnistSplit::Test)?,
            )),
            DatasetKind::SyntheticBlobs => {
                let b = &self.blobs;
                Ok((
                    synthetic_blobs(b.classes, b.dim, b.train_count, b.seed)?,
                    synthetic_blobs(b.classes, b.dim, b.test_count, b.seed.wrapping_add(1))?,
                ))
            }
        }
    }
}

/// Measured outcome of one (tau, trial) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub criterion: String,
    pub tau: u32,
    pub trial: usize,
    /// Fraction of prunable weights still alive, counted from the masks.
    pub surviving_fraction: f64,
    pub pre_retrain_test_error: f64,
    pub post_retrain_test_error: f64,
    pub train_error: f64,
    /// Test error minus train error after retraining.
    pub generalization_gap: f64,
    /// Wall time of the scoring pass alone; excluded from reports.
    pub scoring_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<TrialRecord>,
}

/// Prefix an error's message with pipeline position, keeping its variant so
/// exit codes are unchanged.
fn with_ctx(e: LapError, ctx: &str) -> LapError {
    use LapError::*;
    match e {
        Shape(s) => Shape(format!("{ctx}: {s}")),
        InvalidArgument(s) => InvalidArgument(format!("{ctx}: {s}")),
        Config(s) => Config(format!("{ctx}: {s}")),
        Unsupported(s) => Unsupported(format!("{ctx}: {s}")),
        MissingStats(s) => MissingStats(format!("{ctx}: {s}")),
        Numeric(s) => Numeric(format!("{ctx}: {s}")),
        Data(s) => Data(format!("{ctx}: {s}")),
        Format(s) => Format(format!("{ctx}: {s}")),
        Verification(s) => Verification(format!("{ctx}: {s}")),
        structured => structured,
    }
}

fn trial_seed(spec: &ExperimentSpec, trial: usize) -> u64 {
    spec.train.seed.wrapping_add(trial as u64)
}

/// Activation/Hessian statistics for the criterion, computed once per network.
fn needed_stats(
    net: &Network,
    criterion: Criterion,
    data: &Dataset,
) -> Result<(Option<ActivationStats>, Option<HessianDiag>)> {
    let activation = if criterion.needs_activation_stats() {
        Some(estimate_activation_probs(net, data)?)
    } else {
        None
    };
    let hessian = if criterion.needs_hessian() {
        Some(hessian_diagonal(net, data)?)
    } else {
        None
    };
    Ok((activation, hessian))
}

struct CellOutcome {
    surviving_fraction: f64,
    pre_retrain_test_error: f64,
    post_retrain_test_error: f64,
    train_error: f64,
    scoring_seconds: f64,
    retrained: Network,
}

/// Score, prune, measure, and retrain one network at one tau. `retrain_seed`
/// is taken as-is so callers control how streams differ across cycles.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    net: &Network,
    spec: &ExperimentSpec,
    tau: u32,
    seed: u64,
    retrain_seed: u64,
    train_data: &Dataset,
    test_data: &Dataset,
    activation: &Option<ActivationStats>,
    hessian: &Option<HessianDiag>,
) -> Result<CellOutcome> {
    let mut pcfg = spec.prune.clone();
    pcfg.schedule.tau = tau;
    pcfg.seed = seed;
    let ctx = PruneContext {
        activation: activation.clone(),
        hessian: hessian.clone(),
        data: Some(train_data),
        rp_seed: seed,
    };
    let started = Instant::now();
    score_network(net, pcfg.criterion, &ctx)?;
    let scoring_seconds = started.elapsed().as_secs_f64();
    let (pruned, _masks) = prune(net, &pcfg, &ctx)?;
    let surviving_fraction = pruned.surviving_fraction();
    let pre_retrain_test_error = evaluate(&pruned, test_data)?;
    let mut rcfg = spec.train.for_retrain();
    rcfg.seed = retrain_seed;
    let retrained = train(&pruned, train_data, &rcfg)?;
    let post_retrain_test_error = evaluate(&retrained, test_data)?;
    let train_error = evaluate(&retrained, train_data)?;
    Ok(CellOutcome {
        surviving_fraction,
        pre_retrain_test_error,
        post_retrain_test_error,
        train_error,
        scoring_seconds,
        retrained,
    })
}

fn record_from(spec: &ExperimentSpec, tau: u32, trial: usize, cell: &CellOutcome) -> TrialRecord {
    TrialRecord {
        criterion: spec.prune.criterion.tag().to_string(),
        tau,
        trial,
        surviving_fraction: cell.surviving_fraction,
        pre_retrain_test_error: cell.pre_retrain_test_error,
        post_retrain_test_error: cell.post_retrain_test_error,
        train_error: cell.train_error,
        generalization_gap: cell.post_retrain_test_error - cell.train_error,
        scoring_seconds: cell.scoring_seconds,
    }
}

fn one_shot_trial(
    spec: &ExperimentSpec,
    trial: usize,
    train_data: &Dataset,
    test_data: &Dataset,
) -> Result<Vec<TrialRecord>> {
    let seed = trial_seed(spec, trial);
    let net0 = build(
        spec.arch,
        train_data.example_shape(),
        train_data.class_count(),
        seed,
    )?;
    let mut tcfg = spec.train.clone();
    tcfg.seed = seed;
    let trained = train(&net0, train_data, &tcfg)
        .map_err(|e| with_ctx(e, &format!("trial {trial}, training")))?;
    let (activation, hessian) = needed_stats(&trained, spec.prune.criterion, train_data)?;
    let mut records = Vec::with_capacity(spec.taus.len());
    for &tau in &spec.taus {
        let cell = run_cell(
            &trained,
            spec,
            tau,
            seed,
            seed.wrapping_add(RETRAIN_SEED_OFFSET),
            train_data,
            test_data,
            &activation,
            &hessian,
        )
        .map_err(|e| with_ctx(e, &format!("trial {trial}, tau {tau}")))?;
        records.push(record_from(spec, tau, trial, &cell));
    }
    Ok(records)
}

/// Run every trial (in parallel when there are several) and merge the
/// records into (criterion, tau, trial) order, so the output is identical
/// however the trials were scheduled.
fn merge_trials<F>(spec: &ExperimentSpec, per_trial: F) -> Result<ExperimentResult>
where
    F: Fn(usize) -> Result<Vec<TrialRecord>> + Sync,
{
    let outcomes: Vec<Result<Vec<TrialRecord>>> = if spec.trials == 1 {
        vec![per_trial(0)]
    } else {
        let per_trial = &per_trial;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..spec.trials)
                .map(|t| s.spawn(move || per_trial(t)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trial thread panicked"))
                .collect()
        })
    };
    let mut records = Vec::new();
    for outcome in outcomes {
        records.extend(outcome?);
    }
    records.sort_by(|a, b| {
        (a.criterion.as_str(), a.tau, a.trial).cmp(&(b.criterion.as_str(), b.tau, b.trial))
    });
    Ok(ExperimentResult { records })
}

/// One-shot pipeline: per trial, train once, then sweep every tau from the
/// same trained network. With tau = 0 the pre-retrain test error equals the
/// unpruned test error exactly.
pub fn run_pipeline(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let (train_data, test_data) = spec.load_data()?;
    merge_trials(spec, |trial| {
        one_shot_trial(spec, trial, &train_data, &test_data)
    })
}

/// Iterative prune/retrain: each cycle deepens the sparsity exponent by the
/// spec's tau and prunes the surviving weights of the previous cycle's
/// retrained network, so masks only ever shrink. The record for cycle c
/// carries the cumulative exponent c * tau. With one cycle this reproduces
/// [`run_pipeline`] on a single-tau sweep.
pub fn iterative_pipeline(spec: &ExperimentSpec, cycles: usize) -> Result<ExperimentResult> {
    spec.validate()?;
    if cycles == 0 {
        return Err(LapError::InvalidArgument(
            "iterative pruning needs at least 1 cycle".into(),
        ));
    }
    let tau_inc = spec.prune.schedule.tau;
    let (train_data, test_data) = spec.load_data()?;
    merge_trials(spec, |trial| {
        let seed = trial_seed(spec, trial);
        let net0 = build(
            spec.arch,
            train_data.example_shape(),
            train_data.class_count(),
            seed,
        )?;
        let mut tcfg = spec.train.clone();
        tcfg.seed = seed;
        let mut current = train(&net0, &train_data, &tcfg)
            .map_err(|e| with_ctx(e, &format!("trial {trial}, training")))?;
        let mut records = Vec::with_capacity(cycles);
        for cycle in 1..=cycles {
            let cum_tau = tau_inc
                .checked_mul(cycle as u32)
                .ok_or_else(|| LapError::Config("cumulative tau overflows".into()))?;
            let (activation, hessian) = needed_stats(&current, spec.prune.criterion, &train_data)?;
            let cell = run_cell(
                &current,
                spec,
                cum_tau,
                seed,
                seed.wrapping_add(RETRAIN_SEED_OFFSET)
                    .wrapping_add((cycle - 1) as u64),
                &train_data,
                &test_data,
                &activation,
                &hessian,
            )
            .map_err(|e| with_ctx(e, &format!("trial {trial}, cycle {cycle}")))?;
            records.push(record_from(spec, cum_tau, trial, &cell));
            current = cell.retrained;
        }
        Ok(records)
    })
}

/// Mean wall time per scoring pass for each criterion, in seconds. One
/// warm-up pass per criterion is run and discarded; selection is excluded.
pub fn benchmark_scoring(
    net: &Network,
    criteria: &[Criterion],
    repeats: usize,
    ctx: &PruneContext<'_>,
) -> Result<Vec<(Criterion, f64)>> {
    if repeats == 0 {
        return Err(LapError::InvalidArgument(
            "benchmark needs at least 1 repeat".into(),
        ));
    }
    let mut out = Vec::with_capacity(criteria.len());
    for &criterion in criteria {
        score_network(net, criterion, ctx)?;
        let mut total = 0.0;
        for _ in 0..repeats {
            let started = Instant::now();
            score_network(net, criterion, ctx)?;
            total += started.elapsed().as_secs_f64();
        }
        out.push((criterion, total / repeats as f64));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn tag(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }

    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(LapError::InvalidArgument(format!(
                "unknown report format '{other}'; expected csv or json"
            ))),
        }
    }
}

/// Metrics aggregated into report rows, in emission order.
pub const REPORT_METRICS: [&str; 4] = [
    "pre_retrain_test_error",
    "post_retrain_test_error",
    "train_error",
    "generalization_gap",
];

/// One aggregated report line: a metric's mean and population standard
/// deviation over the trials of one (criterion, tau) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub criterion: String,
    pub tau: u32,
    pub surviving_fraction: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

/// Round to the 6 significant digits the report prints, so CSV text and
/// JSON numbers carry the same values.
fn sig6(x: f64) -> f64 {
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Aggregate raw trial records into deterministic report rows, sorted by
/// (criterion, tau) with metrics in [`REPORT_METRICS`] order.
pub fn report_rows(result: &ExperimentResult) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, u32), Vec<&TrialRecord>> = BTreeMap::new();
    for rec in &result.records {
        groups
            .entry((rec.criterion.clone(), rec.tau))
            .or_default()
            .push(rec);
    }
    let mut rows = Vec::new();
    for ((criterion, tau), mut recs) in groups {
        recs.sort_by_key(|r| r.trial);
        let surviving = mean_of(&recs.iter().map(|r| r.surviving_fraction).collect::<Vec<_>>());
        for metric in REPORT_METRICS {
            let values: Vec<f64> = recs
                .iter()
                .map(|r| match metric {
                    "pre_retrain_test_error" => r.pre_retrain_test_error,
                    "post_retrain_test_error" => r.post_retrain_test_error,
                    "train_error" => r.train_error,
                    _ => r.generalization_gap,
                })
                .collect();
            let mean = mean_of(&values);
            rows.push(ReportRow {
                criterion: criterion.clone(),
                tau,
                surviving_fraction: sig6(surviving),
                metric: metric.to_string(),
                mean: sig6(mean),
                std: sig6(population_std(&values, mean)),
                trials: recs.len(),
            });
        }
    }
    rows
}

/// Render the aggregated report as CSV or JSON text.
pub fn render_report(result: &ExperimentResult, format: ReportFormat) -> Result<String> {
    if result.records.is_empty() {
        return Err(LapError::InvalidArgument(
            "cannot report an empty result".into(),
        ));
    }
    let rows = report_rows(result);
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("criterion,tau,surviving_fraction,metric,mean,std,trials\n");
            for r in rows {
                out.push_str(&format!(
                    "{},{},{:.5e},{},{:.5e},{:.5e},{}\n",
                    r.criterion, r.tau, r.surviving_fraction, r.metric, r.mean, r.std, r.trials
                ));
            }
            Ok(out)
        }
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(&rows)
                .map_err(|e| LapError::Format(format!("report serialization failed: {e}")))?;
            text.push('\n');
            Ok(text)
        }
    }
}

/// Write the rendered report to `path`.
pub fn emit_report(result: &ExperimentResult, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(result, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::select::prune_plan;

    fn tiny_spec() -> ExperimentSpec {
        let mut spec = ExperimentSpec {
            blobs: BlobsConfig {
                classes: 3,
                dim: 8,
                train_count: 120,
                test_count: 60,
                seed: 11,
            },
            taus: vec![2],
            trials: 1,
            ..ExperimentSpec::default()
        };
        spec.train.steps = 30;
        spec.train.retrain_steps = 12;
        spec.train.batch_size = 20;
        spec
    }

    #[test]
    fn kv_round_trip_and_override_order() {
        let pairs = |list: &[(&str, &str)]| {
            list.iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect::<Vec<_>>()
        };
        let spec = ExperimentSpec::from_kv(&pairs(&[
            ("arch", "fcn-paper"),
            ("dataset", "mnist"),
            ("criterion", "lap-act"),
            ("taus", "0,2,4"),
            ("trials", "3"),
            ("q", "0.5"),
            ("steps", "100"),
            ("criterion", "mp"),
            ("output", "report.csv"),
        ]))
        .unwrap();
        assert_eq!(spec.arch, Arch::FcnPaper);
        assert_eq!(spec.dataset, DatasetKind::Mnist);
        // Later pairs override earlier ones.
        assert_eq!(spec.prune.criterion, Criterion::Mp);
        assert_eq!(spec.taus, vec![0, 2, 4]);
        assert_eq!(spec.trials, 3);
        assert_eq!(spec.train.steps, 100);
        assert_eq!(spec.output, Some(PathBuf::from("report.csv")));

        match ExperimentSpec::from_kv(&pairs(&[("archz", "fcn-paper")])) {
            Err(LapError::InvalidArgument(msg)) => assert!(msg.contains("archz")),
            other => panic!("expected InvalidArgument, got {other:?}"),
        }
        match ExperimentSpec::from_kv(&pairs(&[("trials", "three")])) {
            Err(LapError::InvalidArgument(msg)) => assert!(msg.contains("trials")),
            other => panic!("expected InvalidArgument, got {other:?}"),
        }
        // Validation catches incompatible combinations.
        match ExperimentSpec::from_kv(&pairs(&[("arch", "conv6-small")])) {
            Err(LapError::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn tau_zero_leaves_the_network_untouched() {
        let mut spec = tiny_spec();
        spec.taus = vec![0];
        let result = run_pipeline(&spec).unwrap();
        assert_eq!(result.records.len(), 1);
        let rec = &result.records[0];
        assert_eq!(rec.surviving_fraction, 1.0);

        // Replay the trial by hand: the pre-retrain error must be the plain
        // trained network's error, bit for bit.
        let (train_data, test_data) = spec.load_data().unwrap();
        let seed = spec.train.seed;
        let net0 = build(
            spec.arch,
            train_data.example_shape(),
            train_data.class_count(),
            seed,
        )
        .unwrap();
        let mut tcfg = spec.train.clone();
        tcfg.seed = seed;
        let trained = train(&net0, &train_data, &tcfg).unwrap();
        let err = evaluate(&trained, &test_data).unwrap();
        assert_eq!(rec.pre_retrain_test_error, err);
    }

    #[test]
    fn single_cycle_matches_one_shot() {
        let mut spec = tiny_spec();
        spec.prune.schedule.tau = 2;
        spec.taus = vec![2];
        let one_shot = run_pipeline(&spec).unwrap();
        let iterative = iterative_pipeline(&spec, 1).unwrap();
        assert_eq!(one_shot.records.len(), 1);
        assert_eq!(iterative.records.len(), 1);
        let (a, b) = (&one_shot.records[0], &iterative.records[0]);
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.surviving_fraction, b.surviving_fraction);
        assert_eq!(a.pre_retrain_test_error, b.pre_retrain_test_error);
        assert_eq!(a.post_retrain_test_error, b.post_retrain_test_error);
        assert_eq!(a.train_error, b.train_error);
    }

    #[test]
    fn iterative_fractions_shrink_to_the_cumulative_plan() {
        let mut spec = tiny_spec();
        spec.prune.schedule.tau = 1;
        let cycles = 3;
        let result = iterative_pipeline(&spec, cycles).unwrap();
        assert_eq!(result.records.len(), cycles);
        let fracs: Vec<f64> = result.records.iter().map(|r| r.surviving_fraction).collect();
        for w in fracs.windows(2) {
            assert!(w[1] < w[0], "fractions must shrink: {fracs:?}");
        }
        // The final cycle lands exactly on the one-shot plan for the
        // cumulative exponent.
        let (train_data, _) = spec.load_data().unwrap();
        let net = build(
            spec.arch,
            train_data.example_shape(),
            train_data.class_count(),
            spec.train.seed,
        )
        .unwrap();
        let mut sched = spec.prune.schedule;
        sched.tau = cycles as u32;
        let plan = prune_plan(&sched, &net).unwrap();
        let planned_keep: usize = plan.keep.iter().map(|&(_, k)| k).sum();
        let total = net.total_prunable_weights();
        let expected = planned_keep as f64 / total as f64;
        assert!(
            (fracs[cycles - 1] - expected).abs() < 1e-12,
            "final fraction {} vs planned {}",
            fracs[cycles - 1],
            expected
        );
    }

    #[test]
    fn aggregation_matches_a_direct_recomputation() {
        let rec = |tau: u32, trial: usize, post: f64| TrialRecord {
            criterion: "lap".into(),
            tau,
            trial,
            surviving_fraction: 0.25,
            pre_retrain_test_error: post + 0.1,
            post_retrain_test_error: post,
            train_error: post - 0.05,
            generalization_gap: 0.05,
            scoring_seconds: 9.9,
        };
        let result = ExperimentResult {
            records: vec![
                rec(2, 1, 0.30),
                rec(2, 0, 0.20),
                rec(2, 2, 0.40),
                rec(1, 0, 0.10),
            ],
        };
        let rows = report_rows(&result);
        // Two cells, four metrics each, tau ascending.
        assert_eq!(rows.len(), 8);
        assert!(rows[..4].iter().all(|r| r.tau == 1 && r.trials == 1));
        assert!(rows[4..].iter().all(|r| r.tau == 2 && r.trials == 3));
        assert_eq!(
            rows.iter().map(|r| r.metric.as_str()).collect::<Vec<_>>()[..4],
            REPORT_METRICS
        );

        let post = rows[4..]
            .iter()
            .find(|r| r.metric == "post_retrain_test_error")
            .unwrap();
        let mean = (0.2 + 0.3 + 0.4) / 3.0;
        let var = ((0.2f64 - mean).powi(2) + (0.3 - mean).powi(2) + (0.4 - mean).powi(2)) / 3.0;
        assert_eq!(post.mean, sig6(mean));
        assert_eq!(post.std, sig6(var.sqrt()));

        // A single trial reports zero spread.
        let single = &rows[0];
        assert_eq!(single.std, 0.0);
        // Wall-clock time never reaches the report.
        assert!(!render_report(&result, ReportFormat::Csv)
            .unwrap()
            .contains("scoring"));
    }

    #[test]
    fn report_text_is_deterministic_and_formats_mirror() {
        let result = ExperimentResult {
            records: vec![TrialRecord {
                criterion: "lap".into(),
                tau: 4,
                trial: 0,
                surviving_fraction: 0.063_607_233,
                pre_retrain_test_error: 0.123_456_789,
                post_retrain_test_error: 0.098_765_432_1,
                train_error: 0.055_5,
                generalization_gap: 0.043_265_432_1,
                scoring_seconds: 0.5,
            }],
        };
        let csv_a = render_report(&result, ReportFormat::Csv).unwrap();
        let csv_b = render_report(&result, ReportFormat::Csv).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(csv_a.starts_with("criterion,tau,surviving_fraction,metric,mean,std,trials\n"));
        assert!(csv_a.contains("lap,4,6.36072e-2,pre_retrain_test_error,1.23457e-1,0.00000e0,1\n"));

        // JSON carries the same 6-significant-digit values the CSV prints.
        let json = render_report(&result, ReportFormat::Json).unwrap();
        let rows: Vec<ReportRow> = serde_json::from_str(&json).unwrap();
        for (row, line) in rows.iter().zip(csv_a.lines().skip(1)) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(row.criterion, cols[0]);
            assert_eq!(row.surviving_fraction, cols[2].parse::<f64>().unwrap());
            assert_eq!(row.mean, cols[4].parse::<f64>().unwrap());
            assert_eq!(row.std, cols[5].parse::<f64>().unwrap());
        }
    }

    #[test]
    fn trial_spread_shows_up_in_the_report() {
        let mut spec = tiny_spec();
        spec.trials = 2;
        spec.taus = vec![1];
        let result = run_pipeline(&spec).unwrap();
        assert_eq!(result.records.len(), 2);
        assert_eq!(result.records[0].trial, 0);
        assert_eq!(result.records[1].trial, 1);
        let rows = report_rows(&result);
        assert!(rows.iter().all(|r| r.trials == 2));

        // Independent recomputation of one mean from the raw records.
        let pre = rows
            .iter()
            .find(|r| r.metric == "pre_retrain_test_error")
            .unwrap();
        let mean = (result.records[0].pre_retrain_test_error
            + result.records[1].pre_retrain_test_error)
            / 2.0;
        assert!((pre.mean - sig6(mean)).abs() < 1e-12);
    }

    #[test]
    fn benchmark_reports_each_criterion_once() {
        let spec = tiny_spec();
        let (train_data, _) = spec.load_data().unwrap();
        let net = build(
            spec.arch,
            train_data.example_shape(),
            train_data.class_count(),
            0,
        )
        .unwrap();
        let ctx = PruneContext::none();
        let out = benchmark_scoring(&net, &[Criterion::Mp, Criterion::Lap], 2, &ctx).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, Criterion::Mp);
        assert_eq!(out[1].0, Criterion::Lap);
        assert!(out.iter().all(|&(_, t)| t >= 0.0 && t.is_finite()));
        assert!(matches!(
            benchmark_scoring(&net, &[Criterion::Mp], 0, &ctx),
            Err(LapError::InvalidArgument(_))
        ));
    }

    #[test]
    fn context_prefix_keeps_the_variant() {
        let e = with_ctx(LapError::Data("file missing".into()), "trial 2, tau 4");
        match &e {
            LapError::Data(msg) => assert!(msg.starts_with("trial 2, tau 4: ")),
            other => panic!("variant changed: {other:?}"),
        }
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn emit_writes_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let result = ExperimentResult {
            records: vec![TrialRecord {
                criterion: "mp".into(),
                tau: 1,
                trial: 0,
                surviving_fraction: 0.5,
                pre_retrain_test_error: 0.2,
                post_retrain_test_error: 0.1,
                train_error: 0.05,
                generalization_gap: 0.05,
                scoring_seconds: 0.0,
            }],
        };
        let csv_path = dir.path().join("report.csv");
        let json_path = dir.path().join("report.json");
        emit_report(&result, ReportFormat::Csv, &csv_path).unwrap();
        emit_report(&result, ReportFormat::Json, &json_path).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv, render_report(&result, ReportFormat::Csv).unwrap());
        let rows: Vec<ReportRow> =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        // Round-tripping through JSON reproduces the in-memory rows exactly.
        assert_eq!(rows, report_rows(&result));
        assert!(matches!(
            render_report(&ExperimentResult::default(), ReportFormat::Csv),
            Err(LapError::InvalidArgument(_))
        ));
    }
}
