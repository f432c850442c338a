//! Command-line front end: `train`, `check` and `eval`.
//!
//! Exit codes: 0 on success, 1 when the optimization aborts numerically,
//! 2 for usage, input and I/O errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backward::value_and_gradient;
use crate::config::{init_params, ModelConfig};
use crate::data::{self, Dataset, RawData};
use crate::error::{Error, Result};
use crate::forward::{kink_margin, objective, predict, BatchPlan, Network};
use crate::gauss_newton::GNContext;
use crate::index::accumulate_by_index;
use crate::linalg::{dot, norm};
use crate::solver::{estimate_resources, newton_train, Checkpoint, CRule, LogWriter, NewtonState, SolverConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping the number of kernel threads.
pub const THREADS_ENV: &str = "NEWTON_CNN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "newton-cnn", version, about = "Subsampled Gauss-Newton training for CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network with Newton-CG.
    Train(TrainArgs),
    /// Run gradient, Jacobian and index-map self-checks on a network.
    Check(CheckArgs),
    /// Report the accuracy of a saved model.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// IDX image file or CSV file (`label,pixels...`).
    #[arg(long = "train-data")]
    pub train_data: PathBuf,
    /// IDX label file; required unless the data file is CSV.
    #[arg(long = "train-labels")]
    pub train_labels: Option<PathBuf>,
    #[arg(long = "test-data")]
    pub test_data: Option<PathBuf>,
    #[arg(long = "test-labels")]
    pub test_labels: Option<PathBuf>,
    /// Keep a stratified fraction of the training data.
    #[arg(long = "train-fraction", default_value_t = 1.0)]
    pub train_fraction: f64,
    /// Keep a stratified fraction of the test data.
    #[arg(long = "test-fraction", default_value_t = 1.0)]
    pub test_fraction: f64,
    /// Without a test file, test on this stratified fraction of the
    /// training instances left out by `--train-fraction`.
    #[arg(long = "holdout-fraction", conflicts_with = "test_data")]
    pub holdout_fraction: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Architecture description file.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long = "sample-rate", default_value_t = 0.05)]
    pub sample_rate: f64,
    #[arg(long = "cg-max", default_value_t = 250)]
    pub cg_max: usize,
    #[arg(long = "cg-tol", default_value_t = 0.1)]
    pub cg_tol: f64,
    /// Fixed C; defaults to 0.01 times the number of training instances.
    #[arg(long)]
    pub c: Option<f64>,
    /// Instances per function/gradient mini-batch (defaults to the subset size).
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the log, checkpoint and final model.
    #[arg(long)]
    pub out: PathBuf,
    /// Write zero wall-clock times so logs of identical runs are identical.
    #[arg(long)]
    pub reproducible: bool,
    /// Include the damping term in the predicted reduction.
    #[arg(long = "rho-with-lambda")]
    pub rho_with_lambda: bool,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// Architecture to check; defaults to a small CNN.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances used by the checks.
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    /// Gradient coordinates compared with finite differences (all if smaller).
    #[arg(long, default_value_t = 300)]
    pub coords: usize,
    /// Perturb the analytic gradient to confirm the check can fail.
    #[arg(long = "corrupt-gradient", hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Saved model (`model.bin` or `checkpoint.bin`).
    #[arg(long)]
    pub model: PathBuf,
    /// Architecture the model is expected to match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Check(a) => {
            let report = cmd_check(a)?;
            print!("{report}");
            Ok(())
        }
        Command::Eval(a) => {
            let acc = cmd_eval(a)?;
            println!("accuracy {acc}");
            Ok(())
        }
    }
}

fn load_raw(data: &Path, labels: Option<&Path>, dims: (usize, usize, usize)) -> Result<RawData> {
    let is_csv = data.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let raw = if is_csv {
        data::load_csv(data, dims)?
    } else {
        let labels = labels.ok_or_else(|| {
            Error::InvalidArgument(format!("{} is not CSV, so a label file is required", data.display()))
        })?;
        data::load_idx(data, labels)?
    };
    if raw.dims != dims {
        return Err(Error::Data(format!(
            "{} holds {}x{}x{} images, the network expects {}x{}x{}",
            data.display(),
            raw.dims.0,
            raw.dims.1,
            raw.dims.2,
            dims.0,
            dims.1,
            dims.2
        )));
    }
    Ok(raw)
}

fn stratify(raw: RawData, fraction: f64, seed: u64) -> Result<RawData> {
    if fraction == 1.0 {
        return Ok(raw);
    }
    let (sel, _) = data::stratified_split(&raw.labels, fraction, seed)?;
    Ok(raw.subset(&sel))
}

/// Training and optional test data after subsetting, in raw form.
pub fn load_split(d: &DataArgs, dims: (usize, usize, usize), seed: u64) -> Result<(RawData, Option<RawData>)> {
    let pool = load_raw(&d.train_data, d.train_labels.as_deref(), dims)?;
    if let Some(f) = d.holdout_fraction {
        let (sel, rest) = data::stratified_split(&pool.labels, d.train_fraction, seed)?;
        if rest.is_empty() {
            return Err(Error::InvalidArgument("--holdout-fraction needs --train-fraction below 1".into()));
        }
        let left = pool.subset(&rest);
        let (held, _) = data::stratified_split(&left.labels, f, seed)?;
        return Ok((pool.subset(&sel), Some(left.subset(&held))));
    }
    let train = stratify(pool, d.train_fraction, seed)?;
    let test = match &d.test_data {
        Some(p) => Some(stratify(load_raw(p, d.test_labels.as_deref(), dims)?, d.test_fraction, seed)?),
        None => None,
    };
    Ok((train, test))
}

/// Summary of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub iterations: usize,
    pub f: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let config = ModelConfig::from_file(&a.config)?;
    let net = Network::new(config.clone())?;
    let k = net.num_classes();
    let d = &a.data;
    let (train_raw, test_raw) = load_split(d, config.input, a.seed)?;
    let mean = data::fit_mean(&train_raw)?;
    let train = data::apply_preprocessing(&train_raw, &mean, k)?;
    let test = test_raw.map(|t| data::apply_preprocessing(&t, &mean, k)).transpose()?;

    let cfg = SolverConfig {
        max_iters: a.iters,
        cg_tol: a.cg_tol,
        cg_max: a.cg_max,
        sampling_rate: a.sample_rate,
        c: a.c.map_or(CRule::PerInstance(0.01), CRule::Fixed),
        seed: a.seed,
        rho_with_lambda: a.rho_with_lambda,
        batch_size: a.batch_size,
        ..SolverConfig::default()
    };
    cfg.validate()?;
    let s = crate::forward::subset_size(train.len(), cfg.sampling_rate)?;
    eprint!("{}", estimate_resources(&config, train.len(), s)?);

    std::fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join("checkpoint.bin");
    let log_path = a.out.join("log.csv");
    let mut state = if a.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if let Some(m) = first_difference(&ck.config, &config) {
            return Err(m);
        }
        if ck.seed != a.seed {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was written with seed {}, not {}",
                ck.seed, a.seed
            )));
        }
        eprintln!("resuming after iteration {}", ck.iteration);
        ck.into_state()
    } else {
        if log_path.exists() {
            std::fs::remove_file(&log_path)?;
        }
        NewtonState::new(init_params(&config, a.seed)?.into_vec(), &cfg)
    };
    let mut log = LogWriter::open(&log_path, a.reproducible)?;
    let mut last = None;
    let result = newton_train(&net, &train, test.as_ref(), &cfg, &mut state, |st, rec| {
        log.write(rec)?;
        Checkpoint::from_state(&config, st, cfg.seed, &mean).save(&ckpt_path)?;
        let test = rec.test_acc.map_or(String::from("-"), |t| format!("{t:.4}"));
        eprintln!(
            "iter {:>3}  f {:.6e}  train {:.4}  test {test}  λ {:.3e}  CG {:>3}  α {}  {:.1}s",
            rec.iter, rec.f, rec.train_acc, rec.lambda, rec.cg_iters, rec.alpha, rec.seconds
        );
        last = Some(rec.clone());
        Ok(())
    });
    if let Err(e) = result {
        Checkpoint::from_state(&config, &state, cfg.seed, &mean).save(&ckpt_path)?;
        eprintln!(
            "stopped at iteration {} (f = {:e}, λ = {:e}); state saved to {}",
            state.iteration,
            state.f,
            state.lambda,
            ckpt_path.display()
        );
        return Err(e);
    }
    Checkpoint::from_state(&config, &state, cfg.seed, &mean).save(a.out.join("model.bin"))?;
    let outcome = match last {
        Some(r) => TrainOutcome {
            iterations: state.iteration,
            f: r.f,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
        },
        None => {
            let plan = BatchPlan::uniform(train.len(), (train.len() / s).max(1))?;
            let e = objective(&net, &state.theta, &train, cfg.c.value(train.len()), &plan, false)?;
            TrainOutcome {
                iterations: state.iteration,
                f: e.f,
                train_acc: e.correct as f64 / train.len() as f64,
                test_acc: test.as_ref().map(|t| accuracy_of(&net, &state.theta, t)).transpose()?,
            }
        }
    };
    println!("train accuracy {}", outcome.train_acc);
    if let Some(t) = outcome.test_acc {
        println!("test accuracy {t}");
    }
    Ok(outcome)
}

const EVAL_CHUNK: usize = 256;

fn accuracy_of(net: &Network, theta: &[f64], data: &Dataset) -> Result<f64> {
    let pred = predict(net, theta, data, EVAL_CHUNK)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// The first layer where two architectures disagree, as a shape error.
fn first_difference(model: &ModelConfig, expected: &ModelConfig) -> Option<Error> {
    if model.input != expected.input {
        return Some(Error::Shape {
            layer: 1,
            message: format!("model input is {:?}, config input is {:?}", model.input, expected.input),
        });
    }
    let n = model.layers.len().max(expected.layers.len());
    (0..n).find_map(|m| {
        let (a, b) = (model.layers.get(m), expected.layers.get(m));
        (a != b).then(|| Error::Shape {
            layer: m + 1,
            message: format!(
                "model has `{}`, config has `{}`",
                a.map_or("nothing".into(), ToString::to_string),
                b.map_or("nothing".into(), ToString::to_string)
            ),
        })
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<f64> {
    let ck = Checkpoint::load(&a.model)?;
    if let Some(path) = &a.config {
        if let Some(e) = first_difference(&ck.config, &ModelConfig::from_file(path)?) {
            return Err(e);
        }
    }
    let net = Network::new(ck.config.clone())?;
    let raw = load_raw(&a.data, a.labels.as_deref(), ck.config.input)?;
    let set = data::apply_preprocessing(&raw, &ck.mean, net.num_classes())?;
    accuracy_of(&net, &ck.theta, &set)
}

/// One line of the self-check report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
    /// Smallest distance from a RELU or pooling tie at the checked point.
    pub kink_margin: f64,
    pub resources: String,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in &self.items {
            writeln!(
                f,
                "{} {:<40} error {:.3e} (tolerance {:.0e})",
                if i.passed { "PASS" } else { "FAIL" },
                i.name,
                i.measured,
                i.tolerance
            )?;
        }
        if self.kink_margin <= KINK_MARGIN {
            writeln!(
                f,
                "note: nearest kink is {:.1e} away; finite differences may cross it",
                self.kink_margin
            )?;
        }
        write!(f, "{}", self.resources)
    }
}

/// The small CNN used when no architecture is given.
pub fn default_check_config() -> ModelConfig {
    ModelConfig::parse("input a=8 b=8 d=2\nconv h=3 out=4 stride=1 pad=0 pool=2\nfc out=3\n")
        .expect("built-in architecture is valid")
}

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-6;
const EXACT_TOL: f64 = 1e-10;
const KINK_MARGIN: f64 = 1e-4;

pub fn cmd_check(a: &CheckArgs) -> Result<CheckReport> {
    let config = match &a.config {
        Some(p) => ModelConfig::from_file(p)?,
        None => default_check_config(),
    };
    let net = Network::new(config.clone())?;
    let l = a.instances.max(1);
    let k = net.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    // Random data and parameters, resampled until no RELU or pooling kink
    // lies within reach of the finite-difference step.
    let mut attempt = 0;
    let (data, theta, margin) = loop {
        let images: Vec<f64> = (0..l * net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..l).map(|_| rng.random_range(0..k)).collect();
        let theta = init_params(&config, a.seed.wrapping_add(attempt))?.into_vec();
        let margin = kink_margin(&net, &theta, &images)?;
        attempt += 1;
        if margin > KINK_MARGIN || attempt >= 50 {
            break (Dataset::new(config.input, k, images, labels)?, theta, margin);
        }
    };
    let c = 0.05;
    let plan = BatchPlan::uniform(l, 1)?;
    let f_at = |t: &[f64]| objective(&net, t, &data, c, &plan, false).map(|e| e.f);
    let ge = value_and_gradient(&net, &theta, &data, c, &plan)?;
    let mut grad = ge.grad.clone();
    if a.corrupt_gradient {
        grad[0] += 1e-3;
    }
    let mut items = Vec::new();
    let mut push = |name: &str, measured: f64, tolerance: f64| {
        items.push(CheckItem {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
        });
    };

    let n = theta.len();
    let mut coords: Vec<usize> = if a.coords >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, n, a.coords).into_vec()
    };
    if !coords.contains(&0) {
        coords.push(0);
    }
    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for &j in &coords {
        probe[j] = theta[j] + FD_STEP;
        let fp = f_at(&probe)?;
        probe[j] = theta[j] - FD_STEP;
        let fm = f_at(&probe)?;
        probe[j] = theta[j];
        let fd = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max((fd - grad[j]).abs() / grad[j].abs().max(1.0));
    }
    push("gradient vs central differences", worst, FD_TOL);

    let dir: Vec<f64> = {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = norm(&v);
        v.into_iter().map(|x| x / s).collect()
    };
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&dir).map(|(t, d)| t + sign * FD_STEP * d).collect() };
    let fd_dir = (f_at(&shifted(1.0))? - f_at(&shifted(-1.0))?) / (2.0 * FD_STEP);
    let an_dir = dot(&grad, &dir);
    push(
        "directional derivative",
        (fd_dir - an_dir).abs() / an_dir.abs().max(1.0),
        FD_TOL,
    );

    let lambda = 0.1;
    let ctx = GNContext::new(&net, &theta, &ge.subset.cache, c, lambda)?;
    let mut adj: f64 = 0.0;
    let mut sym: f64 = 0.0;
    let mut ridge: f64 = 0.0;
    for _ in 0..20 {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q: Vec<f64> = (0..ctx.output_len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let lhs = dot(&ctx.jv(&v)?, &q);
        let rhs = dot(&v, &ctx.jtq(&q)?);
        adj = adj.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
        let gv = ctx.gn_matvec(&v)?;
        let gw = ctx.gn_matvec(&w)?;
        let (a1, a2) = (dot(&gv, &w), dot(&v, &gw));
        sym = sym.max((a1 - a2).abs() / a1.abs().max(a2.abs()).max(1e-300));
        let floor = (1.0 / c + lambda) * dot(&v, &v);
        ridge = ridge.max((floor - dot(&v, &gv)) / floor);
    }
    push("jv/jtq adjointness", adj, EXACT_TOL);
    push("gauss-newton symmetry", sym, EXACT_TOL);
    push("gauss-newton ridge lower bound", ridge.max(0.0), EXACT_TOL);

    // Jᵀ applied to the loss seed reproduces the loss part of the gradient.
    let seed = crate::backward::loss_grad_output(&ge.subset.cache.output, &ge.subset.targets);
    let jt = ctx.jtq(&seed)?;
    let mut jg: f64 = 0.0;
    for ((g, t), j) in ge.grad.iter().zip(&theta).zip(&jt) {
        let loss_part = g - t / c;
        jg = jg.max((j / l as f64 - loss_part).abs() / loss_part.abs().max(1.0));
    }
    push("jacobian transpose vs gradient", jg, EXACT_TOL);

    let mut gather_err: f64 = 0.0;
    let mut adjoint_err: f64 = 0.0;
    let mut pad_err: f64 = 0.0;
    for m in 0..net.num_layers() {
        let (Some(maps), shape) = (net.maps(m), net.shape(m)) else {
            continue;
        };
        let img: Vec<f64> = (0..shape.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let padded = maps.pad.pad(&img)?;
        let fast = maps.phi.gather(&padded)?;
        let (h, s, d) = (shape.filter, shape.stride, shape.d_in);
        for c_out in 0..shape.b_conv {
            for r_out in 0..shape.a_conv {
                for j in 0..d {
                    for q in 0..h {
                        for p in 0..h {
                            let row = (p + q * h) + j * h * h;
                            let col = r_out + c_out * shape.a_conv;
                            let (pr, pc) = (r_out * s + p, c_out * s + q);
                            let want = padded[(pr + pc * shape.a_pad) * d + j];
                            gather_err = gather_err.max((fast[row + col * maps.phi.rows()] - want).abs());
                        }
                    }
                }
            }
        }
        let u: Vec<f64> = (0..fast.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = accumulate_by_index(&u, maps.phi.as_slice(), padded.len())?;
        let (x1, x2) = (dot(&fast, &u), dot(&padded, &back));
        adjoint_err = adjoint_err.max((x1 - x2).abs() / x1.abs().max(x2.abs()).max(1e-300));
        let frame: Vec<f64> = (0..padded.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y1, y2) = (dot(&padded, &frame), dot(&img, &maps.pad.unpad(&frame)?));
        pad_err = pad_err.max((y1 - y2).abs() / y1.abs().max(y2.abs()).max(1e-300));
    }
    push("im2col gather vs sliding window", gather_err, 0.0);
    push("accumulate is adjoint of gather", adjoint_err, 1e-12);
    push("unpad is adjoint of pad", pad_err, 1e-12);

    let resources = estimate_resources(&config, l, l)?.to_string();
    Ok(CheckReport {
        items,
        kink_margin: margin,
        resources,
    })
}
