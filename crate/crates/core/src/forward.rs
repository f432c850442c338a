//! Forward evaluation: network outputs, squared loss, and the regularized
//! objective `f(θ) = θᵀθ/(2C) + (1/l) Σ ξ_i` accumulated over mini-batches.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{LayerShape, ModelConfig, ParamLayout, ShapeTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::index::{build_pad_index, build_phi_index, PadIndex, PhiIndex, PoolArgmax};
use crate::linalg::{dot, gemm, MatRef, Trans};

/// Index maps of one convolutional layer.
#[derive(Clone, Debug)]
pub struct ConvMaps {
    pub pad: PadIndex,
    pub phi: PhiIndex,
    /// Pooling partition over the convolved image (stride = window).
    pub pool: Option<PhiIndex>,
}

/// A validated architecture with its index maps, ready to evaluate any θ.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub shapes: ShapeTable,
    pub layout: ParamLayout,
    maps: Vec<Option<ConvMaps>>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let shapes = config.derive_shapes()?;
        let layout = ParamLayout::new(&shapes);
        let maps = shapes
            .layers
            .iter()
            .map(|s| {
                if !s.conv {
                    return Ok(None);
                }
                let pad = build_pad_index(s.a_in, s.b_in, s.d_in, s.pad);
                let phi = build_phi_index(s.a_pad, s.b_pad, s.d_in, s.filter, s.stride)?;
                let pool = s
                    .pool
                    .map(|p| build_phi_index(s.a_conv, s.b_conv, s.d_out, p, p))
                    .transpose()?;
                Ok(Some(ConvMaps { pad, phi, pool }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            config,
            shapes,
            layout,
            maps,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.num_classes()
    }

    pub fn input_len(&self) -> usize {
        self.shapes.input_len()
    }

    pub fn shape(&self, m: usize) -> &LayerShape {
        &self.shapes.layers[m]
    }

    /// Index maps of layer `m`, or `None` for a fully-connected layer.
    pub fn maps(&self, m: usize) -> Option<&ConvMaps> {
        self.maps[m].as_ref()
    }

    pub(crate) fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::dim(format!(
                "θ has {} entries, network needs {}",
                theta.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    /// `φ(pad(Z^m))` for conv layer `m` and a stacked input batch.
    pub fn phi_stack(&self, m: usize, z: &[f64]) -> Result<Vec<f64>> {
        let maps = self
            .maps(m)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {} is not convolutional", m + 1)))?;
        let padded;
        let src = if maps.pad.is_identity() {
            z
        } else {
            padded = maps.pad.pad(z)?;
            &padded
        };
        maps.phi.gather(src)
    }

    /// Run every layer on a stacked batch and keep `Z^m` and the pooling
    /// selections for later backward or Jacobian passes.
    pub fn forward(&self, theta: &[f64], images: &[f64]) -> Result<ForwardCache> {
        self.run(theta, images, true)
    }

    /// Network outputs `z^{L+1}` (`K × l`) without retaining intermediates.
    pub fn outputs(&self, theta: &[f64], images: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(theta, images, false)?.output)
    }

    fn run(&self, theta: &[f64], images: &[f64], keep: bool) -> Result<ForwardCache> {
        self.check_theta(theta)?;
        let in_len = self.input_len();
        if !images.len().is_multiple_of(in_len) {
            return Err(Error::dim(format!(
                "batch of {} values is not a multiple of the {in_len}-value input",
                images.len()
            )));
        }
        let l = images.len() / in_len;
        let last = self.num_layers() - 1;
        let mut z = Vec::with_capacity(if keep { self.num_layers() } else { 0 });
        let mut argmax = Vec::with_capacity(self.num_layers());
        let mut cur = images.to_vec();
        for (m, shape) in self.shapes.layers.iter().enumerate() {
            let seg = self.layout.segments[m];
            let w = seg.weights(theta);
            let b = seg.bias(theta);
            let next = if let Some(maps) = self.maps(m) {
                let phi = self.phi_stack(m, &cur)?;
                let mut s = conv_forward(w, b, &phi)?;
                relu(&mut s);
                match &maps.pool {
                    Some(part) => {
                        let (pooled, am) = maxpool(&s, part)?;
                        argmax.push(Some(am));
                        pooled
                    }
                    None => {
                        argmax.push(None);
                        s
                    }
                }
            } else {
                let mut s = fc_forward(w, b, &cur)?;
                if m != last {
                    relu(&mut s);
                }
                argmax.push(None);
                s
            };
            debug_assert_eq!(next.len(), shape.output_len() * l);
            let prev = std::mem::replace(&mut cur, next);
            if keep {
                z.push(prev);
            }
        }
        Ok(ForwardCache {
            instances: l,
            z,
            argmax,
            output: cur,
        })
    }
}

/// Intermediate values of one forward pass over a stacked batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub instances: usize,
    /// `z[m]` is the input of layer `m` (`z[0]` is the batch itself).
    pub z: Vec<Vec<f64>>,
    /// Pooling selections of every pooled conv layer.
    pub argmax: Vec<Option<PoolArgmax>>,
    /// `K × l` outputs.
    pub output: Vec<f64>,
}

/// `S = W·φ + b·𝟙ᵀ` for a stacked `φ(pad(Z))` with `W.cols` rows.
pub fn conv_forward(w: MatRef<'_>, b: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
    affine(w, b, phi)
}

/// `s = W·z + b` for every column of a stacked batch.
pub fn fc_forward(w: MatRef<'_>, b: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    affine(w, b, z)
}

fn affine(w: MatRef<'_>, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.rows {
        return Err(Error::dim(format!("bias has {} entries, W has {} rows", b.len(), w.rows)));
    }
    if w.cols == 0 || !x.len().is_multiple_of(w.cols) {
        return Err(Error::dim(format!(
            "input of {} values does not have {} rows",
            x.len(),
            w.cols
        )));
    }
    let cols = x.len() / w.cols;
    let mut out = Vec::with_capacity(w.rows * cols);
    for _ in 0..cols {
        out.extend_from_slice(b);
    }
    gemm(1.0, w, Trans::No, MatRef::new(w.cols, cols, x)?, Trans::No, 1.0, &mut out, w.rows, cols)?;
    Ok(out)
}

pub fn relu(s: &mut [f64]) {
    for x in s {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// `I[x > 0]` elementwise.
pub fn relu_mask(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
}

/// Max over each pooling region, first maximum on ties.
pub fn maxpool(z: &[f64], partition: &PhiIndex) -> Result<(Vec<f64>, PoolArgmax)> {
    let src = partition.input_len();
    if src == 0 || !z.len().is_multiple_of(src) {
        return Err(Error::dim(format!(
            "pooling input of {} values is not a multiple of {src}",
            z.len()
        )));
    }
    let rows = partition.d_in * partition.cols();
    let l = z.len() / src;
    let hh = partition.h * partition.h;
    let mut out = vec![0.0; rows * l];
    let mut idx = vec![0usize; rows * l];
    if l > 0 {
        out.par_chunks_mut(rows)
            .zip(idx.par_chunks_mut(rows))
            .zip(z.par_chunks(src))
            .for_each(|((o, am), img)| {
                for t in 0..rows {
                    let region = &partition.as_slice()[t * hh..(t + 1) * hh];
                    let mut best = region[0];
                    for &k in &region[1..] {
                        if img[k] > img[best] {
                            best = k;
                        }
                    }
                    o[t] = img[best];
                    am[t] = best;
                }
            });
    }
    Ok((out, PoolArgmax::new(rows, src, idx)?))
}

/// Per-instance `ξ_i = ‖z_i − y_i‖²` and their mean.
pub fn loss(z: &[f64], y: &[f64], classes: usize) -> Result<(Vec<f64>, f64)> {
    if z.len() != y.len() || classes == 0 || !z.len().is_multiple_of(classes) {
        return Err(Error::dim(format!(
            "outputs ({}) and labels ({}) disagree for K = {classes}",
            z.len(),
            y.len()
        )));
    }
    let xi: Vec<f64> = z
        .chunks(classes)
        .zip(y.chunks(classes))
        .map(|(zi, yi)| zi.iter().zip(yi).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mean = if xi.is_empty() {
        0.0
    } else {
        xi.iter().sum::<f64>() / xi.len() as f64
    };
    Ok((xi, mean))
}

/// Partition of the instance indices into mini-batches `S_1..S_R`; the last
/// subset doubles as the Gauss-Newton subset whose caches are retained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub subsets: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// `R` contiguous near-equal subsets of `0..l`.
    pub fn uniform(l: usize, r: usize) -> Result<Self> {
        if l == 0 || r == 0 || r > l {
            return Err(Error::InvalidArgument(format!("cannot split {l} instances into {r} batches")));
        }
        let subsets = (0..r)
            .map(|k| (k * l / r..(k + 1) * l / r).collect())
            .collect();
        Ok(BatchPlan { subsets })
    }

    /// Use `hessian` as `S_R` and split the remaining instances into chunks
    /// of at most `chunk`.
    pub fn with_subset(l: usize, mut hessian: Vec<usize>, chunk: usize) -> Result<Self> {
        if chunk == 0 || hessian.is_empty() {
            return Err(Error::InvalidArgument("empty Hessian subset or chunk size".into()));
        }
        hessian.sort_unstable();
        hessian.dedup();
        if hessian.last().is_some_and(|&i| i >= l) {
            return Err(Error::IndexOutOfRange {
                index: hessian[hessian.len() - 1] + 1,
                len: l,
            });
        }
        let mut in_s = vec![false; l];
        for &i in &hessian {
            in_s[i] = true;
        }
        let rest: Vec<usize> = (0..l).filter(|&i| !in_s[i]).collect();
        let mut subsets: Vec<Vec<usize>> = rest.chunks(chunk).map(<[usize]>::to_vec).collect();
        subsets.push(hessian);
        Ok(BatchPlan { subsets })
    }

    /// Draw `⌈rate·l⌉` instances without replacement as the Hessian subset.
    pub fn sampled<R: Rng + ?Sized>(l: usize, rate: f64, chunk: usize, rng: &mut R) -> Result<Self> {
        let size = subset_size(l, rate)?;
        let s = rand::seq::index::sample(rng, l, size).into_vec();
        Self::with_subset(l, s, chunk)
    }

    /// Random partition into `r` subsets, for invariance tests.
    pub fn shuffled<R: Rng + ?Sized>(l: usize, r: usize, rng: &mut R) -> Result<Self> {
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(rng);
        let base = Self::uniform(l, r)?;
        Ok(BatchPlan {
            subsets: base
                .subsets
                .into_iter()
                .map(|s| s.into_iter().map(|i| perm[i]).collect())
                .collect(),
        })
    }

    pub fn hessian_subset(&self) -> &[usize] {
        self.subsets.last().map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.subsets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn check(&self, l: usize) -> Result<()> {
        let mut seen = vec![false; l];
        for &i in self.subsets.iter().flatten() {
            if i >= l || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "batch plan is not a partition of 0..{l} (instance {})",
                    i + 1
                )));
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::InvalidArgument(format!("batch plan does not cover 0..{l}")));
        }
        Ok(())
    }
}

/// `⌈rate·l⌉`, at least one instance.
pub fn subset_size(l: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) || l == 0 {
        return Err(Error::InvalidArgument(format!("sampling rate {rate} for {l} instances")));
    }
    Ok(((rate * l as f64).ceil() as usize).clamp(1, l))
}

/// Retained forward state of the Gauss-Newton subset.
#[derive(Clone, Debug)]
pub struct SubsetCache {
    pub indices: Vec<usize>,
    pub cache: ForwardCache,
    /// `K × |S|` one-hot targets.
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub f: f64,
    /// `Σ_i ξ_i` over all instances.
    pub loss_sum: f64,
    /// Instances whose arg-max output matches the label.
    pub correct: usize,
    pub subset: Option<SubsetCache>,
}

/// `θᵀθ/(2C)`.
pub fn regularizer(theta: &[f64], c: f64) -> f64 {
    dot(theta, theta) / (2.0 * c)
}

/// `f(θ)`, evaluated mini-batch by mini-batch so only one batch's
/// intermediates are alive at a time. With `retain`, the caches of the last
/// subset are returned.
pub fn objective(
    net: &Network,
    theta: &[f64],
    data: &Dataset,
    c: f64,
    plan: &BatchPlan,
    retain: bool,
) -> Result<Evaluation> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    net.check_theta(theta)?;
    data.check_network(net)?;
    plan.check(data.len())?;
    let k = net.num_classes();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut subset = None;
    let last = plan.subsets.len() - 1;
    for (r, idx) in plan.subsets.iter().enumerate() {
        let (images, targets) = data.batch(idx);
        let keep = retain && r == last;
        let cache = net.run(theta, &images, keep)?;
        let (xi, _) = loss(&cache.output, &targets, k)?;
        loss_sum += xi.iter().sum::<f64>();
        correct += crate::data::count_correct(&cache.output, &data.labels_of(idx), k);
        if keep {
            subset = Some(SubsetCache {
                indices: idx.clone(),
                cache,
                targets,
            });
        }
    }
    let f = regularizer(theta, c) + loss_sum / data.len() as f64;
    if !f.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite ({f})")));
    }
    Ok(Evaluation {
        f,
        loss_sum,
        correct,
        subset,
    })
}

/// Arg-max predictions for a whole dataset, `chunk` instances at a time.
pub fn predict(net: &Network, theta: &[f64], data: &Dataset, chunk: usize) -> Result<Vec<usize>> {
    data.check_network(net)?;
    let k = net.num_classes();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for idx in all.chunks(chunk.max(1)) {
        let (images, _) = data.batch(idx);
        let z = net.outputs(theta, &images)?;
        out.extend(z.chunks(k).map(crate::data::argmax));
    }
    Ok(out)
}

/// Distance of a forward pass from the non-smooth points of the network:
/// the smallest `|s|` over hidden pre-activations and the smallest gap
/// between the two largest entries of any pooling region whose maximum is
/// positive. Finite-difference checks need this well above their step.
pub fn kink_margin(net: &Network, theta: &[f64], images: &[f64]) -> Result<f64> {
    let cache = net.forward(theta, images)?;
    let mut margin = f64::INFINITY;
    let last = net.num_layers() - 1;
    for m in 0..last {
        let seg = net.layout.segments[m];
        let s = match net.maps(m) {
            Some(_) => conv_forward(seg.weights(theta), seg.bias(theta), &net.phi_stack(m, &cache.z[m])?)?,
            None => fc_forward(seg.weights(theta), seg.bias(theta), &cache.z[m])?,
        };
        margin = s.iter().fold(margin, |acc, v| acc.min(v.abs()));
        if let Some(part) = net.maps(m).and_then(|x| x.pool.as_ref()) {
            let hh = part.h * part.h;
            let src = part.input_len();
            for img in s.chunks(src) {
                for region in part.as_slice().chunks(hh) {
                    let mut top = [f64::NEG_INFINITY; 2];
                    for &k in region {
                        let v = img[k].max(0.0);
                        if v > top[0] {
                            top = [v, top[0]];
                        } else if v > top[1] {
                            top[1] = v;
                        }
                    }
                    if top[0] > 0.0 && hh > 1 {
                        margin = margin.min(top[0] - top[1]);
                    }
                }
            }
        }
    }
    Ok(margin)
}
