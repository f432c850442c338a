//! Subsampled Newton-CG with Levenberg-Marquardt damping.
//!
//! Each iteration samples a Gauss-Newton subset `S_k`, evaluates `f` and `∇f`
//! mini-batch by mini-batch (keeping the caches of `S_k`), solves
//! `(G^S + λI)d = −∇f` approximately with CG, backtracks along `d`, and
//! adapts `λ` from the ratio of actual to predicted reduction.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backward::value_and_gradient;
use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forward::{objective, predict, BatchPlan, Network};
use crate::gauss_newton::GNContext;
use crate::linalg::{axpy, dot, norm};

/// How the regularization constant `C` is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CRule {
    Fixed(f64),
    /// `C = factor · l`.
    PerInstance(f64),
}

impl CRule {
    pub fn value(&self, l: usize) -> f64 {
        match *self {
            CRule::Fixed(c) => c,
            CRule::PerInstance(k) => k * l as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative CG stopping tolerance σ.
    pub cg_tol: f64,
    pub cg_max: usize,
    /// Sufficient-decrease constant η.
    pub eta: f64,
    pub lambda_init: f64,
    pub drop: f64,
    pub boost: f64,
    pub rho_upper: f64,
    pub rho_lower: f64,
    pub sampling_rate: f64,
    pub c: CRule,
    pub seed: u64,
    pub alpha_floor: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Include `λI` in the model used for the predicted reduction.
    pub rho_with_lambda: bool,
    /// Instances per function/gradient mini-batch; defaults to `|S_k|`.
    pub batch_size: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 100,
            cg_tol: 0.1,
            cg_max: 250,
            eta: 1e-4,
            lambda_init: 1.0,
            drop: 2.0 / 3.0,
            boost: 1.5,
            rho_upper: 0.75,
            rho_lower: 0.25,
            sampling_rate: 0.05,
            c: CRule::PerInstance(0.01),
            seed: 0,
            alpha_floor: 2f64.powi(-20),
            lambda_min: 1e-10,
            lambda_max: 1e10,
            rho_with_lambda: false,
            batch_size: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.drop > 0.0 && self.drop < 1.0 && self.boost > 1.0) {
            return bad("damping factors need 0 < drop < 1 < boost");
        }
        if !(self.rho_lower > 0.0 && self.rho_lower < self.rho_upper && self.rho_upper < 1.0) {
            return bad("ratio thresholds need 0 < lower < upper < 1");
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return bad("CG tolerance must lie in (0, 1)");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("η must lie in (0, 1)");
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad("sampling rate must lie in (0, 1]");
        }
        if !(self.alpha_floor > 0.0 && self.alpha_floor <= 1.0) {
            return bad("step floor must lie in (0, 1]");
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            return bad("λ bounds must satisfy 0 < min ≤ max");
        }
        if !(self.lambda_init >= self.lambda_min && self.lambda_init <= self.lambda_max) {
            return bad("initial λ is outside its bounds");
        }
        if self.cg_max == 0 || self.batch_size == Some(0) {
            return bad("CG iteration limit and batch size must be positive");
        }
        match self.c {
            CRule::Fixed(c) | CRule::PerInstance(c) if c > 0.0 => Ok(()),
            _ => bad("C must be positive"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub d: Vec<f64>,
    /// `A·d` from the final residual check.
    pub ad: Vec<f64>,
    pub iterations: usize,
    /// `‖A·d + g‖`, recomputed from `A·d`.
    pub residual: f64,
    pub converged: bool,
}

/// Conjugate gradient for `A d = −g` from `d = 0`, stopping once
/// `‖A d + g‖ ≤ σ‖g‖` or after `cg_max` iterations. The residual is checked
/// against an explicit product before returning; if the recursive residual
/// drifted, CG restarts from the current iterate.
pub fn cg_solve(
    mut matvec: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    g: &[f64],
    sigma: f64,
    cg_max: usize,
) -> Result<CgResult> {
    let n = g.len();
    let tol = sigma * norm(g);
    let mut d = vec![0.0; n];
    if tol == 0.0 {
        return Ok(CgResult {
            ad: vec![0.0; n],
            d,
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }
    if !tol.is_finite() {
        return Err(Error::Numerical("gradient is not finite".into()));
    }
    let mut r: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut iterations = 0;
    loop {
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        while rr.sqrt() > tol && iterations < cg_max {
            let ap = matvec(&p)?;
            let pap = dot(&p, &ap);
            if !pap.is_finite() {
                return Err(Error::Numerical(format!("pᵀAp = {pap} at CG iteration {}", iterations + 1)));
            }
            if pap <= 0.0 {
                return Err(Error::NegativeCurvature {
                    iteration: iterations + 1,
                    curvature: pap,
                });
            }
            let a = rr / pap;
            axpy(a, &p, &mut d);
            axpy(-a, &ap, &mut r);
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
            rr = rr_next;
            iterations += 1;
        }
        let ad = matvec(&d)?;
        r = ad.iter().zip(g).map(|(a, gi)| -gi - a).collect();
        let residual = norm(&r);
        if !residual.is_finite() {
            return Err(Error::Numerical("CG residual is not finite".into()));
        }
        if residual <= tol || iterations >= cg_max {
            return Ok(CgResult {
                d,
                ad,
                iterations,
                residual,
                converged: residual <= tol,
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct LineSearch<T> {
    pub alpha: f64,
    pub f: f64,
    pub theta: Vec<f64>,
    /// Function evaluations spent.
    pub steps: usize,
    pub extra: T,
}

/// First `α ∈ {1, 1/2, 1/4, …}` with `f(θ + αd) ≤ f(θ) + ηα∇f(θ)ᵀd`.
/// Evaluations failing with a numerical error count as rejected steps.
pub fn line_search<T>(
    mut eval: impl FnMut(&[f64]) -> Result<(f64, T)>,
    theta: &[f64],
    d: &[f64],
    f0: f64,
    slope: f64,
    eta: f64,
    alpha_floor: f64,
) -> Result<LineSearch<T>> {
    if !(slope < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "line search needs a descent direction, ∇fᵀd = {slope:e}"
        )));
    }
    let mut alpha = 1.0;
    let mut steps = 0;
    let mut cand = vec![0.0; theta.len()];
    loop {
        for ((c, t), di) in cand.iter_mut().zip(theta).zip(d) {
            *c = t + alpha * di;
        }
        steps += 1;
        match eval(&cand) {
            Ok((f, extra)) if f.is_finite() && f <= f0 + eta * alpha * slope => {
                return Ok(LineSearch {
                    alpha,
                    f,
                    theta: cand,
                    steps,
                    extra,
                });
            }
            Ok(_) => {}
            Err(e) if e.is_numerical() => {}
            Err(e) => return Err(e),
        }
        alpha *= 0.5;
        if alpha < alpha_floor {
            return Err(Error::LineSearchFailed {
                alpha,
                floor: alpha_floor,
                f: f0,
                slope,
            });
        }
    }
}

/// Levenberg-Marquardt rule: shrink λ after a very good step, grow it after
/// a poor one. A non-finite ratio counts as poor.
pub fn lm_update(lambda: f64, rho: f64, cfg: &SolverConfig) -> f64 {
    let next = if rho > cfg.rho_upper {
        lambda * cfg.drop
    } else if rho >= cfg.rho_lower {
        lambda
    } else {
        lambda * cfg.boost
    };
    next.clamp(cfg.lambda_min, cfg.lambda_max)
}

/// `∇fᵀd + ½dᵀ(Gd)` given the product `Gd`.
pub fn predicted_reduction(g: &[f64], d: &[f64], gd: &[f64]) -> f64 {
    dot(g, d) + 0.5 * dot(d, gd)
}

/// Solver progress; everything needed to resume a run.
#[derive(Clone, Debug)]
pub struct NewtonState {
    /// Completed iterations.
    pub iteration: usize,
    pub theta: Vec<f64>,
    /// `f(θ)`, `NaN` before the first evaluation.
    pub f: f64,
    pub lambda: f64,
    pub rho: f64,
    pub cg_iters: usize,
    pub ls_steps: usize,
    pub seconds: f64,
    pub rng: ChaCha8Rng,
}

/// Random stream used for subset sampling, distinct from initialization.
const SAMPLING_STREAM: u64 = 1;

impl NewtonState {
    pub fn new(theta: Vec<f64>, cfg: &SolverConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLING_STREAM);
        NewtonState {
            iteration: 0,
            theta,
            f: f64::NAN,
            lambda: cfg.lambda_init,
            rho: f64::NAN,
            cg_iters: 0,
            ls_steps: 0,
            seconds: 0.0,
            rng,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub iter: usize,
    /// `f` after the step.
    pub f: f64,
    /// `f` before the step.
    pub f_prev: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// λ used for this iteration's CG solve.
    pub lambda: f64,
    pub lambda_next: f64,
    pub rho: f64,
    pub cg_iters: usize,
    pub cg_residual: f64,
    pub grad_norm: f64,
    pub alpha: f64,
    pub ls_steps: usize,
    pub subset_size: usize,
    pub seconds: f64,
}

/// Run Newton iterations until `state.iteration == cfg.max_iters`, calling
/// `on_iter` after each one. On error `state` still holds the last accepted
/// iterate.
pub fn newton_train(
    net: &Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &SolverConfig,
    state: &mut NewtonState,
    mut on_iter: impl FnMut(&NewtonState, &IterationRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    net.check_theta(&state.theta)?;
    let l = train.len();
    let c = cfg.c.value(l);
    let s = crate::forward::subset_size(l, cfg.sampling_rate)?;
    let chunk = cfg.batch_size.unwrap_or(s);
    while state.iteration < cfg.max_iters {
        let start = Instant::now();
        let plan = BatchPlan::sampled(l, cfg.sampling_rate, chunk, &mut state.rng)?;
        let ge = value_and_gradient(net, &state.theta, train, c, &plan)?;
        // Reuse the accepted value from the previous line search so the
        // recorded sequence is exactly the one the sufficient-decrease test saw.
        let f0 = if state.f.is_nan() { ge.f } else { state.f };
        let ctx = GNContext::new(net, &state.theta, &ge.subset.cache, c, state.lambda)?;
        let cg = cg_solve(|v| ctx.gn_matvec(v), &ge.grad, cfg.cg_tol, cfg.cg_max)?;
        drop(ctx);
        let slope = dot(&ge.grad, &cg.d);
        let ls = line_search(
            |th| objective(net, th, train, c, &plan, false).map(|e| (e.f, e.correct)),
            &state.theta,
            &cg.d,
            f0,
            slope,
            cfg.eta,
            cfg.alpha_floor,
        )?;
        if ls.f > f0 {
            return Err(Error::Numerical(format!("accepted step increased f from {f0} to {}", ls.f)));
        }
        // G(αd) = α(A d − λd), with A = G + λI from the CG check.
        let damp = if cfg.rho_with_lambda { 0.0 } else { state.lambda };
        let step: Vec<f64> = cg.d.iter().map(|x| ls.alpha * x).collect();
        let gstep: Vec<f64> = cg
            .ad
            .iter()
            .zip(&cg.d)
            .map(|(a, x)| ls.alpha * (a - damp * x))
            .collect();
        let pred = predicted_reduction(&ge.grad, &step, &gstep);
        let rho = (ls.f - f0) / pred;
        let lambda_next = lm_update(state.lambda, rho, cfg);
        let test_acc = match test {
            Some(t) => {
                let pred = predict(net, &ls.theta, t, chunk)?;
                let hits = pred.iter().zip(t.labels()).filter(|(p, y)| p == y).count();
                Some(hits as f64 / t.len() as f64)
            }
            None => None,
        };
        let seconds = start.elapsed().as_secs_f64();
        let record = IterationRecord {
            iter: state.iteration + 1,
            f: ls.f,
            f_prev: f0,
            train_acc: ls.extra as f64 / l as f64,
            test_acc,
            lambda: state.lambda,
            lambda_next,
            rho,
            cg_iters: cg.iterations,
            cg_residual: cg.residual,
            grad_norm: norm(&ge.grad),
            alpha: ls.alpha,
            ls_steps: ls.steps,
            subset_size: plan.hessian_subset().len(),
            seconds,
        };
        state.iteration += 1;
        state.theta = ls.theta;
        state.f = ls.f;
        state.lambda = lambda_next;
        state.rho = rho;
        state.cg_iters = cg.iterations;
        state.ls_steps = ls.steps;
        state.seconds += seconds;
        on_iter(state, &record)?;
    }
    Ok(())
}

/// Memory (in reals) and multiply-add counts of one training setup.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourceReport {
    pub instances: usize,
    pub subset: usize,
    pub weights: usize,
    pub gradient: usize,
    pub phi_index: usize,
    /// Stored `Z^{m,i}` for `l` instances.
    pub activations: usize,
    /// Largest temporary `φ(pad(Z^m))` for `l` instances.
    pub phi_temp: usize,
    /// Two adjacent layers of backward signals for `l` instances.
    pub backward: usize,
    /// Jacobian blocks for the subset.
    pub jacobian: usize,
    pub layers: Vec<LayerCost>,
}

/// Multiply-adds for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub function: u128,
    pub gradient: u128,
    pub jacobian: u128,
    /// One Gauss-Newton product (`Jv` plus `Jᵀq`).
    pub matvec: u128,
    /// One line-search trial.
    pub line_search: u128,
}

pub fn estimate_resources(config: &ModelConfig, l: usize, s: usize) -> Result<ResourceReport> {
    let shapes = config.derive_shapes()?;
    let k = shapes.num_classes();
    let mut weights = 0;
    let mut phi_index = 0;
    let mut per_instance_z = 0;
    let mut phi_temp = 0;
    let mut backward = 0;
    let mut jac_per_instance = 0;
    let mut layers = Vec::new();
    for (m, sh) in shapes.layers.iter().enumerate() {
        let (rows, cols) = sh.weight_dims();
        weights += rows * cols;
        per_instance_z += sh.input_len();
        jac_per_instance += sh.pre_activation_len();
        let macs_per_instance = if sh.conv {
            let phi = sh.filter * sh.filter * sh.d_in * sh.a_conv * sh.b_conv;
            phi_index += phi;
            phi_temp = phi_temp.max(phi);
            let next = shapes
                .layers
                .get(m + 1)
                .filter(|x| x.conv)
                .map_or(0, |x| x.pre_activation_len());
            backward = backward.max(sh.pre_activation_len() + next);
            (sh.d_out * phi) as u128
        } else {
            backward = backward.max(sh.n_in + sh.n_out);
            (sh.n_out * sh.n_in) as u128
        };
        let (l128, s128, k128) = (l as u128, s as u128, k as u128);
        layers.push(LayerCost {
            function: l128 * macs_per_instance,
            gradient: 2 * l128 * macs_per_instance,
            jacobian: s128 * k128 * macs_per_instance,
            matvec: 2 * s128 * macs_per_instance,
            line_search: l128 * macs_per_instance,
        });
    }
    per_instance_z += k;
    Ok(ResourceReport {
        instances: l,
        subset: s,
        weights,
        gradient: weights,
        phi_index,
        activations: l * per_instance_z,
        phi_temp: l * phi_temp,
        backward: l * backward,
        jacobian: s * k * jac_per_instance,
        layers,
    })
}

impl fmt::Display for ResourceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mib = |reals: usize| reals as f64 * 8.0 / (1024.0 * 1024.0);
        writeln!(f, "resources for l = {}, |S| = {}", self.instances, self.subset)?;
        for (name, v) in [
            ("weights", self.weights),
            ("gradient", self.gradient),
            ("phi index", self.phi_index),
            ("activations", self.activations),
            ("phi temporary", self.phi_temp),
            ("backward signals", self.backward),
            ("jacobian", self.jacobian),
        ] {
            writeln!(f, "  memory {name:<17} {v:>14} reals {:>10.1} MiB", mib(v))?;
        }
        writeln!(f, "  layer      function      gradient      jacobian    GN product   line search")?;
        for (m, c) in self.layers.iter().enumerate() {
            writeln!(
                f,
                "  {:<5} {:>13.3e} {:>13.3e} {:>13.3e} {:>13.3e} {:>13.3e}",
                m + 1,
                c.function as f64,
                c.gradient as f64,
                c.jacobian as f64,
                c.matvec as f64,
                c.line_search as f64
            )?;
        }
        Ok(())
    }
}

pub const LOG_HEADER: &str = "iter,f,train_acc,test_acc,lambda,cg_iters,alpha,seconds";
pub const LOG_SCHEMA: &str = "# newton-cnn log v1";

/// Append-only CSV iteration log.
pub struct LogWriter {
    out: BufWriter<File>,
    reproducible: bool,
}

impl LogWriter {
    /// Open `path` for appending, writing the schema and header lines when the
    /// file is new or empty. With `reproducible`, wall time is written as 0.
    pub fn open(path: impl AsRef<Path>, reproducible: bool) -> Result<Self> {
        let path = path.as_ref();
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        if !fresh {
            let mut head = String::new();
            File::open(path)?.take(LOG_SCHEMA.len() as u64).read_to_string(&mut head)?;
            if head != LOG_SCHEMA {
                return Err(Error::Data(format!("{} is not a v1 iteration log", path.display())));
            }
        }
        let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            writeln!(out, "{LOG_SCHEMA}")?;
            writeln!(out, "{LOG_HEADER}")?;
            out.flush()?;
        }
        Ok(LogWriter { out, reproducible })
    }

    pub fn write(&mut self, r: &IterationRecord) -> Result<()> {
        let test = r.test_acc.map_or(String::new(), |a| a.to_string());
        let secs = if self.reproducible { 0.0 } else { r.seconds };
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.f, r.train_acc, test, r.lambda, r.cg_iters, r.alpha, secs
        )?;
        self.out.flush()?;
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NCNNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Saved training state: the architecture text, solver progress, the
/// sampling generator position, θ, and the training pixel mean needed to
/// preprocess new data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: usize,
    pub lambda: f64,
    pub f: f64,
    pub seed: u64,
    pub word_pos: u128,
    pub theta: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(config: &ModelConfig, state: &NewtonState, seed: u64, mean: &[f64]) -> Self {
        Checkpoint {
            config: config.clone(),
            iteration: state.iteration,
            lambda: state.lambda,
            f: state.f,
            seed,
            word_pos: state.rng.get_word_pos(),
            theta: state.theta.clone(),
            mean: mean.to_vec(),
        }
    }

    pub fn into_state(self) -> NewtonState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SAMPLING_STREAM);
        rng.set_word_pos(self.word_pos);
        NewtonState {
            iteration: self.iteration,
            theta: self.theta,
            f: self.f,
            lambda: self.lambda,
            rho: f64::NAN,
            cg_iters: 0,
            ls_steps: 0,
            seconds: 0.0,
            rng,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_text();
        let mut b = Vec::with_capacity(64 + text.len() + 8 * self.theta.len());
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(text.len() as u64).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        b.extend_from_slice(&self.lambda.to_le_bytes());
        b.extend_from_slice(&self.f.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.word_pos.to_le_bytes());
        b.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for t in &self.theta {
            b.extend_from_slice(&t.to_le_bytes());
        }
        b.extend_from_slice(&(self.mean.len() as u64).to_le_bytes());
        for m in &self.mean {
            b.extend_from_slice(&m.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a newton-cnn checkpoint".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Data("checkpoint architecture is not UTF-8".into()))?;
        let config = ModelConfig::parse(text)?;
        let iteration = r.u64()? as usize;
        let lambda = f64::from_le_bytes(r.array()?);
        let f = f64::from_le_bytes(r.array()?);
        let seed = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let n = r.u64()? as usize;
        let theta = r.reals(n)?;
        let n_mean = r.u64()? as usize;
        let mean = r.reals(n_mean)?;
        if r.pos != r.bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        if n != config.param_count()? {
            return Err(Error::Data(format!(
                "checkpoint has {n} parameters, its architecture needs {}",
                config.param_count()?
            )));
        }
        Ok(Checkpoint {
            config,
            iteration,
            lambda,
            f,
            seed,
            word_pos,
            theta,
            mean,
        })
    }

    /// Write atomically via a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("truncated checkpoint".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}
