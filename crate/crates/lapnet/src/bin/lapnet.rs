//! Command-line surface: train, prune, eval, experiment, verify, bench.
//!
//! Configuration is a flat `key=value` file plus flags named after the same
//! keys; later sources win (file first, then flags). Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 verification failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lapnet::{
    benchmark_scoring, block_distortion, bqp_reduce, brute_force_mask, build, circulant_jacobian,
    conv2d, emit_report, estimate_activation_probs, evaluate, fast_lap_squared, hessian_diagonal,
    iterative_pipeline, keep_fractions, load_model, prune, render_report, run_pipeline, save_model,
    score_lap, score_mp, score_network, train, BlockInstance, BqpInstance, Criterion, Dataset,
    ExperimentSpec, LapError, Mask, Padding, PruneContext, ReportFormat, Result, SparsitySchedule,
    Tensor,
};

#[derive(Parser)]
#[command(
    name = "lapnet",
    version,
    about = "Prune feed-forward networks by lookahead weight saliency"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fresh network and save it
    Train(TrainArgs),
    /// Prune a saved model and save the result with its masks
    Prune(PruneArgs),
    /// Report a saved model's error on a dataset split
    Eval(EvalArgs),
    /// Run the full train-prune-retrain sweep and emit a report
    Experiment(ExperimentArgs),
    /// Run the independent verification oracles
    Verify(VerifyArgs),
    /// Time the scoring pass of one or more criteria
    Bench(BenchArgs),
}

/// Experiment configuration, shared by every verb. Flags carry the same
/// names as the config-file keys and override them.
#[derive(Args, Clone, Default)]
struct SpecArgs {
    /// Flat key=value config file; '#' starts a comment
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture: linear-1000, fcn-paper, fcn-small, conv6-small
    #[arg(long = "arch")]
    arch: Option<String>,
    /// Dataset: mnist or synthetic-blobs
    #[arg(long = "dataset")]
    dataset: Option<String>,
    /// Scoring criterion: mp, rp, lap, lfp, lbp, lap-act, lap-all, obd, obd-lap
    #[arg(long = "criterion")]
    criterion: Option<String>,
    /// Selection pool: layerwise or global
    #[arg(long = "scope")]
    scope: Option<String>,
    /// Mask granularity: unstructured, channels-l1, channels-l2
    #[arg(long = "structure")]
    structure: Option<String>,
    /// Pruning order: simultaneous, forward, backward
    #[arg(long = "order")]
    order: Option<String>,
    /// Passes for ordered pruning (default 1)
    #[arg(long = "sequential_steps")]
    sequential_steps: Option<String>,
    /// Per-round keep fraction for conv layers
    #[arg(long = "p")]
    p: Option<String>,
    /// Per-round keep fraction for dense layers
    #[arg(long = "q")]
    q: Option<String>,
    /// Schedule exponent (rounds) for train/prune/eval
    #[arg(long = "tau")]
    tau: Option<String>,
    /// Comma-separated exponent sweep for experiments
    #[arg(long = "taus")]
    taus: Option<String>,
    /// Independent trials per experiment cell
    #[arg(long = "trials")]
    trials: Option<String>,
    /// Report path for the experiment verb
    #[arg(long = "output")]
    output: Option<String>,
    /// Training steps
    #[arg(long = "steps")]
    steps: Option<String>,
    /// Adam learning rate
    #[arg(long = "learning_rate")]
    learning_rate: Option<String>,
    /// Minibatch size
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    /// Base seed for init, shuffling, and trial offsets
    #[arg(long = "seed")]
    seed: Option<String>,
    /// Steps for retraining after pruning
    #[arg(long = "retrain_steps")]
    retrain_steps: Option<String>,
    /// Data-parallel workers per training step
    #[arg(long = "workers")]
    workers: Option<String>,
    /// Whether BN scale/shift keep training (true/false)
    #[arg(long = "train_bn_params")]
    train_bn_params: Option<String>,
    /// Seed for the random-scores criterion
    #[arg(long = "prune_seed")]
    prune_seed: Option<String>,
    /// Synthetic-blobs class count
    #[arg(long = "blob_classes")]
    blob_classes: Option<String>,
    /// Synthetic-blobs input dimension
    #[arg(long = "blob_dim")]
    blob_dim: Option<String>,
    /// Synthetic-blobs training examples
    #[arg(long = "blob_train_count")]
    blob_train_count: Option<String>,
    /// Synthetic-blobs test examples
    #[arg(long = "blob_test_count")]
    blob_test_count: Option<String>,
    /// Synthetic-blobs geometry seed
    #[arg(long = "blob_seed")]
    blob_seed: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Where to save the trained model
    #[arg(long = "model_out")]
    model_out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Saved model to prune
    #[arg(long)]
    model: PathBuf,
    /// Where to save the pruned model
    #[arg(long = "model_out")]
    model_out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Saved model to evaluate
    #[arg(long)]
    model: PathBuf,
    /// Dataset split: train or test
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Iterative prune-retrain cycles instead of the one-shot sweep
    #[arg(long)]
    cycles: Option<usize>,
    /// Report format: csv or json (default: from the output extension)
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed for the generated verification instances
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Comma-separated criteria to time
    #[arg(long, default_value = "mp,lap")]
    criteria: String,
    /// Timed repeats per criterion (one warm-up pass is discarded)
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LapError::Data(format!("cannot read config {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            LapError::InvalidArgument(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            ))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

impl SpecArgs {
    fn to_spec(&self) -> Result<ExperimentSpec> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            pairs.extend(parse_config_file(path)?);
        }
        let flags: [(&str, &Option<String>); 26] = [
            ("arch", &self.arch),
            ("dataset", &self.dataset),
            ("criterion", &self.criterion),
            ("scope", &self.scope),
            ("structure", &self.structure),
            ("order", &self.order),
            ("sequential_steps", &self.sequential_steps),
            ("p", &self.p),
            ("q", &self.q),
            ("tau", &self.tau),
            ("taus", &self.taus),
            ("trials", &self.trials),
            ("output", &self.output),
            ("steps", &self.steps),
            ("learning_rate", &self.learning_rate),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
            ("retrain_steps", &self.retrain_steps),
            ("workers", &self.workers),
            ("train_bn_params", &self.train_bn_params),
            ("prune_seed", &self.prune_seed),
            ("blob_classes", &self.blob_classes),
            ("blob_dim", &self.blob_dim),
            ("blob_train_count", &self.blob_train_count),
            ("blob_test_count", &self.blob_test_count),
            ("blob_seed", &self.blob_seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        }
        ExperimentSpec::from_kv(&pairs)
    }
}

fn scoring_context<'a>(
    net: &lapnet::Network,
    criterion: Criterion,
    data: &'a Dataset,
    seed: u64,
) -> Result<PruneContext<'a>> {
    let mut ctx = PruneContext {
        data: Some(data),
        rp_seed: seed,
        ..PruneContext::none()
    };
    if criterion.needs_activation_stats() {
        ctx.activation = Some(estimate_activation_probs(net, data)?);
    }
    if criterion.needs_hessian() {
        ctx.hessian = Some(hessian_diagonal(net, data)?);
    }
    Ok(ctx)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let spec = args.spec.to_spec()?;
    let (train_data, test_data) = spec.load_data()?;
    let net = build(
        spec.arch,
        train_data.example_shape(),
        train_data.class_count(),
        spec.train.seed,
    )?;
    let trained = train(&net, &train_data, &spec.train)?;
    save_model(&trained, &args.model_out)?;
    println!(
        "trained {} on {} for {} steps",
        spec.arch, spec.dataset, spec.train.steps
    );
    println!("train error {:.4}", evaluate(&trained, &train_data)?);
    println!("test error  {:.4}", evaluate(&trained, &test_data)?);
    println!("saved to {}", args.model_out.display());
    Ok(())
}

fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let spec = args.spec.to_spec()?;
    let net = load_model(&args.model)?;
    let (train_data, _) = spec.load_data()?;
    let ctx = scoring_context(&net, spec.prune.criterion, &train_data, spec.prune.seed)?;
    let (pruned, masks) = prune(&net, &spec.prune, &ctx)?;
    for mask in &masks {
        println!(
            "layer {}: kept {} of {} weights",
            mask.layer,
            mask.surviving,
            mask.len()
        );
    }
    println!(
        "surviving fraction {:.6} ({} criterion, tau {})",
        pruned.surviving_fraction(),
        spec.prune.criterion,
        spec.prune.schedule.tau
    );
    save_model(&pruned, &args.model_out)?;
    println!("saved to {}", args.model_out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let spec = args.spec.to_spec()?;
    let net = load_model(&args.model)?;
    let (train_data, test_data) = spec.load_data()?;
    let (split, data) = match args.split.as_str() {
        "train" => ("train", &train_data),
        "test" => ("test", &test_data),
        other => {
            return Err(LapError::InvalidArgument(format!(
                "unknown split '{other}'; expected train or test"
            )))
        }
    };
    let err = evaluate(&net, data)?;
    println!("{split} error {err:.6} (accuracy {:.6})", 1.0 - err);
    println!("surviving fraction {:.6}", net.surviving_fraction());
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let spec = args.spec.to_spec()?;
    let result = match args.cycles {
        Some(cycles) => iterative_pipeline(&spec, cycles)?,
        None => run_pipeline(&spec)?,
    };
    let format = match (&args.format, &spec.output) {
        (Some(tag), _) => ReportFormat::parse(tag)?,
        (None, Some(path)) if path.extension().is_some_and(|e| e == "json") => ReportFormat::Json,
        _ => ReportFormat::Csv,
    };
    match &spec.output {
        Some(path) => {
            emit_report(&result, format, path)?;
            println!(
                "wrote {} report ({} records) to {}",
                format.tag(),
                result.records.len(),
                path.display()
            );
        }
        None => print!("{}", render_report(&result, format)?),
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let spec = args.spec.to_spec()?;
    let criteria = args
        .criteria
        .split(',')
        .map(|t| Criterion::parse(t.trim()))
        .collect::<Result<Vec<_>>>()?;
    let (train_data, _) = spec.load_data()?;
    let net = build(
        spec.arch,
        train_data.example_shape(),
        train_data.class_count(),
        spec.train.seed,
    )?;
    let needs_stats = criteria
        .iter()
        .any(|c| c.needs_activation_stats() || c.needs_hessian());
    let mut ctx = PruneContext {
        data: Some(&train_data),
        rp_seed: spec.prune.seed,
        ..PruneContext::none()
    };
    if needs_stats {
        if criteria.iter().any(|c| c.needs_activation_stats()) {
            ctx.activation = Some(estimate_activation_probs(&net, &train_data)?);
        }
        if criteria.iter().any(|c| c.needs_hessian()) {
            ctx.hessian = Some(hessian_diagonal(&net, &train_data)?);
        }
    }
    let timings = benchmark_scoring(&net, &criteria, args.repeats, &ctx)?;
    let base = timings[0].1;
    println!(
        "scoring wall time on {} ({} prunable weights, {} repeats):",
        spec.arch,
        net.total_prunable_weights(),
        args.repeats
    );
    for (criterion, seconds) in &timings {
        let ratio = if base > 0.0 { seconds / base } else { 1.0 };
        println!(
            "  {:<8} {seconds:>12.6}s  x{ratio:.2} vs {}",
            criterion.tag(),
            timings[0].0
        );
    }
    Ok(())
}

// --- verify: fast, seeded cross-checks of the scoring math against the
// independent oracles. Any mismatch is a Verification error (exit 3).

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

fn random_block(rng: &mut ChaCha8Rng, max_dim: usize) -> BlockInstance {
    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(1..=max_dim);
    let (a, b, c, d) = (dim(rng), dim(rng), dim(rng), dim(rng));
    BlockInstance::new(
        gaussian_tensor(rng, vec![b, a]),
        gaussian_tensor(rng, vec![c, b]),
        gaussian_tensor(rng, vec![d, c]),
    )
    .expect("composable shapes")
}

fn verify_fail(name: &str, detail: String) -> LapError {
    LapError::Verification(format!("{name}: {detail}"))
}

/// Zeroing a single weight must change the block product by exactly that
/// weight's lookahead score.
fn verify_single_weight_distortion(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..100 {
        let inst = random_block(&mut rng, 5);
        let net = inst.as_network()?;
        let scores = score_lap(&net, 1, true, true)?;
        let n = inst.w_cur.len();
        let flat = rng.gen_range(0..n);
        let mut bits = vec![true; n];
        bits[flat] = false;
        let mask = Mask::new(1, bits)?;
        let observed = block_distortion(&inst, &mask)?;
        let predicted = scores.data()[flat];
        let rel = (observed - predicted).abs() / predicted.abs().max(1e-300);
        if rel > 1e-10 {
            return Err(verify_fail(
                "single-weight distortion",
                format!("case {case}: score {predicted} vs distortion {observed} (rel {rel:.2e})"),
            ));
        }
    }
    Ok(())
}

/// The fused squared-score kernel must match the plain score, squared.
fn verify_fast_squared(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for case in 0..100 {
        let inst = random_block(&mut rng, 6);
        let net = inst.as_network()?;
        let scores = score_lap(&net, 1, true, true)?;
        let fast = fast_lap_squared(&inst.w_prev, &inst.w_cur, &inst.w_next)?;
        for (i, (&sq, &s)) in fast.data().iter().zip(scores.data()).enumerate() {
            let rel = (sq - s * s).abs() / (s * s).max(1e-300);
            if rel > 1e-9 {
                return Err(verify_fail(
                    "fast squared scores",
                    format!("case {case}, weight {i}: {sq} vs {} (rel {rel:.2e})", s * s),
                ));
            }
        }
    }
    Ok(())
}

/// Brute force over every same-size mask can never lose to the heuristics.
fn verify_brute_force_floor(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    for case in 0..50 {
        let inst = loop {
            let inst = random_block(&mut rng, 4);
            if inst.weight_count() <= 16 {
                break inst;
            }
        };
        let net = inst.as_network()?;
        let n = inst.weight_count();
        let keep = n.div_ceil(2);
        let (_, best) = brute_force_mask(&inst, keep)?;
        for (name, values) in [
            ("lookahead", score_lap(&net, 1, true, true)?),
            ("magnitude", score_mp(&inst.w_cur)),
        ] {
            let scores = lapnet::ScoreTensor::new(1, values, inst.w_cur.shape())?;
            let mask = lapnet::select_layerwise(&scores, keep)?;
            let d = block_distortion(&inst, &mask)?;
            if best > d + 1e-9 {
                return Err(verify_fail(
                    "brute-force floor",
                    format!("case {case}: optimum {best} above {name} distortion {d}"),
                ));
            }
        }
    }
    Ok(())
}

/// The quadratic-form table of the reduced problem must match the original.
fn verify_bqp_tables(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    for case in 0..20 {
        let n = rng.gen_range(4..=6);
        let raw = gaussian_tensor(&mut rng, vec![n, n]);
        let sym = Tensor::from_fn(vec![n, n], |flat| {
            let (i, j) = (flat / n, flat % n);
            0.5 * (raw.data()[i * n + j] + raw.data()[j * n + i])
        });
        let inst = BqpInstance::new(sym)?;
        let (_, table) = bqp_reduce(&inst)?;
        for (pattern, &(direct, reduced)) in table.iter().enumerate() {
            let scale = direct.abs().max(1.0);
            if (direct - reduced).abs() / scale > 1e-8 {
                return Err(verify_fail(
                    "quadratic reduction",
                    format!("case {case}, pattern {pattern:b}: {direct} vs {reduced}"),
                ));
            }
        }
    }
    Ok(())
}

/// The circulant Jacobian columns must equal the convolution of basis inputs.
fn verify_circulant(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    for case in 0..10 {
        let (kh, kw) = (2 * rng.gen_range(0..=1usize) + 1, 2 * rng.gen_range(0..=1usize) + 1);
        let kernel = gaussian_tensor(&mut rng, vec![kh, kw]);
        let (h, w) = (4, 5);
        let jac = circulant_jacobian(&kernel, (h, w))?;
        let kernel4 = kernel.reshape(vec![1, 1, kh, kw])?;
        for col in 0..h * w {
            let basis =
                Tensor::from_fn(vec![1, h, w], |flat| if flat == col { 1.0 } else { 0.0 });
            let out = conv2d(&basis, &kernel4, Padding::Circular)?;
            for row in 0..h * w {
                let expected = out.data()[row];
                let got = jac.data()[row * h * w + col];
                if got != expected {
                    return Err(verify_fail(
                        "circulant jacobian",
                        format!("case {case}, entry ({row},{col}): {got} vs {expected}"),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// The sparsity schedule must reproduce the hand-computed keep fraction.
fn verify_schedule() -> Result<()> {
    let schedule = SparsitySchedule::new(0.0, 0.5, 4)?;
    let net = build(lapnet::Arch::FcnPaper, &[1, 28, 28], 10, 0)?;
    let total = net.total_prunable_weights() as f64;
    let kept: f64 = keep_fractions(&schedule, &net)?
        .iter()
        .map(|&(i, f)| {
            let units = net.layers()[i].weights().expect("prunable").len() as f64;
            (f * units).round().max(1.0)
        })
        .sum();
    let fraction = kept / total;
    if (fraction - 0.0636).abs() > 1e-4 {
        return Err(verify_fail(
            "sparsity schedule",
            format!("fcn-paper keep fraction {fraction:.6}, expected 0.0636"),
        ));
    }
    Ok(())
}

/// Scoring a network must be invariant to which code path computed it: the
/// batched scorer and the per-layer scorer must agree bit for bit.
fn verify_scorer_paths(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    for _ in 0..10 {
        let dims: Vec<usize> = (0..4).map(|_| rng.gen_range(2..=6)).collect();
        let spec = lapnet::NetSpec {
            input_shape: vec![dims[0]],
            layers: dims[1..]
                .iter()
                .map(|&d| lapnet::LayerSpec::Dense { out: d })
                .collect(),
        };
        let net = lapnet::glorot_init(&spec, rng.gen())?;
        let batched = score_network(&net, Criterion::Lap, &PruneContext::none())?;
        for st in &batched {
            let direct = score_lap(&net, st.layer, true, true)?;
            if direct.data() != st.values.data() {
                return Err(verify_fail(
                    "scorer paths",
                    format!("layer {} differs between code paths", st.layer),
                ));
            }
        }
    }
    Ok(())
}

/// One named verification: a label and the closure that runs it.
type Check = (&'static str, Box<dyn Fn() -> Result<()>>);

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let checks: [Check; 7] = [
        ("single-weight distortion", {
            let s = args.seed;
            Box::new(move || verify_single_weight_distortion(s))
        }),
        ("fast squared scores", {
            let s = args.seed;
            Box::new(move || verify_fast_squared(s))
        }),
        ("brute-force floor", {
            let s = args.seed;
            Box::new(move || verify_brute_force_floor(s))
        }),
        ("quadratic reduction", {
            let s = args.seed;
            Box::new(move || verify_bqp_tables(s))
        }),
        ("circulant jacobian", {
            let s = args.seed;
            Box::new(move || verify_circulant(s))
        }),
        ("sparsity schedule", Box::new(verify_schedule)),
        ("scorer paths", {
            let s = args.seed;
            Box::new(move || verify_scorer_paths(s))
        }),
    ];
    for (name, check) in checks {
        check()?;
        println!("ok: {name}");
    }
    println!("all verification oracles passed");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Prune(args) => cmd_prune(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Experiment(args) => cmd_experiment(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Bench(args) => cmd_bench(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code().into());
    }
}
