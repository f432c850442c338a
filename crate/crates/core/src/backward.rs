//! Gradient of the objective by backpropagation through stacked batches.
//!
//! The kernels take a `rep` argument: the number of backward signals carried
//! per instance. Gradients use `rep = 1`; Jacobian construction pushes all
//! `K` output coordinates of an instance through at once with `rep = K`,
//! each signal reusing its instance's RELU mask and pooling selections.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forward::{loss, regularizer, BatchPlan, ConvMaps, ForwardCache, Network, SubsetCache};
use crate::index::PoolArgmax;
use crate::linalg::{gemm, MatRef, Trans};

/// `∂ξ/∂z^{L+1} = 2(z − y)`.
pub fn loss_grad_output(z: &[f64], y: &[f64]) -> Vec<f64> {
    z.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect()
}

/// `(ds·φᵀ, ds·𝟙)` summed over every column of the stack.
pub fn conv_grad_params(ds: &[f64], phi: &[f64], d_out: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    grad_params(ds, phi, d_out)
}

/// `(ds·zᵀ, ds·𝟙)` for a fully-connected layer.
pub fn fc_grad_params(ds: &[f64], z: &[f64], n_out: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    grad_params(ds, z, n_out)
}

pub(crate) fn grad_params(ds: &[f64], x: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows == 0 || !ds.len().is_multiple_of(rows) {
        return Err(Error::dim(format!("{} backward values for {rows} rows", ds.len())));
    }
    let cols = ds.len() / rows;
    if cols == 0 || !x.len().is_multiple_of(cols) {
        return Err(Error::dim(format!(
            "{} input values do not match {cols} backward columns",
            x.len()
        )));
    }
    let x_rows = x.len() / cols;
    let mut gw = vec![0.0; rows * x_rows];
    gemm(
        1.0,
        MatRef::new(rows, cols, ds)?,
        Trans::No,
        MatRef::new(x_rows, cols, x)?,
        Trans::Yes,
        0.0,
        &mut gw,
        rows,
        x_rows,
    )?;
    let mut gb = vec![0.0; rows];
    for col in ds.chunks(rows) {
        for (g, v) in gb.iter_mut().zip(col) {
            *g += v;
        }
    }
    Ok((gw, gb))
}

/// `dz ⊙ I[z > 0]` where each `block`-long instance of `z` serves `rep`
/// consecutive signals of `dz`.
pub fn mask_by_activation(dz: &mut [f64], z: &[f64], block: usize, rep: usize) -> Result<()> {
    if block == 0 || rep == 0 || !z.len().is_multiple_of(block) || dz.len() != z.len() * rep {
        return Err(Error::dim(format!(
            "{} backward values for {} activations in blocks of {block} with {rep} signals each",
            dz.len(),
            z.len()
        )));
    }
    dz.par_chunks_mut(block).enumerate().for_each(|(c, g)| {
        let i = c / rep;
        let zi = &z[i * block..(i + 1) * block];
        for (v, &a) in g.iter_mut().zip(zi) {
            if a <= 0.0 {
                *v = 0.0;
            }
        }
    });
    Ok(())
}

/// `∂ξ/∂S^m` from `∂ξ/∂Z^{m+1}`: mask by `I[Z^{m+1}]`, then route each pooled
/// value back to its selected position (zeros elsewhere). Without pooling
/// this is the mask alone.
pub fn conv_backprop_s(
    dz_next: &[f64],
    z_next: &[f64],
    argmax: Option<&PoolArgmax>,
    conv_len: usize,
    rep: usize,
) -> Result<Vec<f64>> {
    let l = match argmax {
        Some(am) => am.instances,
        None => {
            if conv_len == 0 || !z_next.len().is_multiple_of(conv_len) {
                return Err(Error::dim("un-pooled activations do not match the conv size"));
            }
            z_next.len() / conv_len
        }
    };
    let out_len = z_next.len().checked_div(l).unwrap_or(0);
    if dz_next.len() != out_len * l * rep {
        return Err(Error::dim(format!(
            "{} backward values for {l} instances × {rep} signals × {out_len}",
            dz_next.len()
        )));
    }
    let mut ds = vec![0.0; conv_len * l * rep];
    if l == 0 || out_len == 0 {
        return Ok(ds);
    }
    if let Some(am) = argmax {
        if am.rows != out_len || am.source_len != conv_len {
            return Err(Error::dim("pooling selections do not match the layer"));
        }
    }
    ds.par_chunks_mut(conv_len)
        .zip(dz_next.par_chunks(out_len))
        .enumerate()
        .for_each(|(c, (s, g))| {
            let i = c / rep;
            let zi = &z_next[i * out_len..(i + 1) * out_len];
            match argmax {
                Some(am) => {
                    for ((&k, &v), &a) in am.column(i).iter().zip(g).zip(zi) {
                        if a > 0.0 {
                            s[k] = v;
                        }
                    }
                }
                None => {
                    for ((o, &v), &a) in s.iter_mut().zip(g).zip(zi) {
                        if a > 0.0 {
                            *o = v;
                        }
                    }
                }
            }
        });
    Ok(ds)
}

/// `∂ξ/∂Z^m = P_padᵀ P_φᵀ vec(Wᵀ ∂ξ/∂S^m)` for every column group of `ds`.
pub fn conv_backprop_z(w: MatRef<'_>, ds: &[f64], maps: &ConvMaps) -> Result<Vec<f64>> {
    if w.rows == 0 || !ds.len().is_multiple_of(w.rows) {
        return Err(Error::dim(format!("{} backward values for {} filters", ds.len(), w.rows)));
    }
    let cols = ds.len() / w.rows;
    if w.cols != maps.phi.rows() {
        return Err(Error::dim("filter matrix does not match the sub-image size"));
    }
    let mut t = vec![0.0; w.cols * cols];
    gemm(1.0, w, Trans::Yes, MatRef::new(w.rows, cols, ds)?, Trans::No, 0.0, &mut t, w.cols, cols)?;
    let padded = maps.phi.scatter_add(&t)?;
    maps.pad.unpad(&padded)
}

/// `∂ξ/∂z^m = (W^m)ᵀ ∂ξ/∂s^m`, before masking.
pub fn fc_backprop(w: MatRef<'_>, ds: &[f64]) -> Result<Vec<f64>> {
    if w.rows == 0 || !ds.len().is_multiple_of(w.rows) {
        return Err(Error::dim(format!("{} backward values for {} neurons", ds.len(), w.rows)));
    }
    let cols = ds.len() / w.rows;
    let mut dz = vec![0.0; w.cols * cols];
    gemm(1.0, w, Trans::Yes, MatRef::new(w.rows, cols, ds)?, Trans::No, 0.0, &mut dz, w.cols, cols)?;
    Ok(dz)
}

/// One step of the recurrence below layer `m`: turn `∂/∂(pre-activation of m)`
/// into `∂/∂(pre-activation of m−1)`.
pub(crate) fn step_down(
    net: &Network,
    theta: &[f64],
    cache: &ForwardCache,
    m: usize,
    ds: &[f64],
    rep: usize,
) -> Result<Vec<f64>> {
    let w = net.layout.segments[m].weights(theta);
    let mut dz = match net.maps(m) {
        Some(maps) => conv_backprop_z(w, ds, maps)?,
        None => fc_backprop(w, ds)?,
    };
    let below = net.shape(m - 1);
    if below.conv {
        conv_backprop_s(&dz, &cache.z[m], cache.argmax[m - 1].as_ref(), below.pre_activation_len(), rep)
    } else {
        mask_by_activation(&mut dz, &cache.z[m], below.n_out, rep)?;
        Ok(dz)
    }
}

/// `Σ_i ∂ξ_i/∂θ` given `∂ξ/∂z^{L+1}` for every instance of `cache`.
pub fn backward(net: &Network, theta: &[f64], cache: &ForwardCache, seed: &[f64]) -> Result<Vec<f64>> {
    net.check_theta(theta)?;
    if seed.len() != cache.output.len() {
        return Err(Error::dim("backward seed does not match the network output"));
    }
    let mut grad = vec![0.0; net.num_params()];
    let mut ds = seed.to_vec();
    for m in (0..net.num_layers()).rev() {
        let shape = net.shape(m);
        let seg = net.layout.segments[m];
        let (gw, gb) = if shape.conv {
            let phi = net.phi_stack(m, &cache.z[m])?;
            conv_grad_params(&ds, &phi, shape.d_out)?
        } else {
            fc_grad_params(&ds, &cache.z[m], shape.n_out)?
        };
        grad[seg.weight_range()].copy_from_slice(&gw);
        grad[seg.bias_range()].copy_from_slice(&gb);
        if m > 0 {
            ds = step_down(net, theta, cache, m, &ds, 1)?;
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug)]
pub struct GradEval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub correct: usize,
    /// Caches of the plan's last subset.
    pub subset: SubsetCache,
}

/// `f(θ)` and `∇f(θ) = θ/C + (1/l) Σ_i ∂ξ_i/∂θ`, one mini-batch at a time;
/// the last subset's forward caches are kept for the Gauss-Newton operator.
pub fn value_and_gradient(
    net: &Network,
    theta: &[f64],
    data: &Dataset,
    c: f64,
    plan: &BatchPlan,
) -> Result<GradEval> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    net.check_theta(theta)?;
    data.check_network(net)?;
    plan.check(data.len())?;
    let k = net.num_classes();
    let mut sum = vec![0.0; net.num_params()];
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut subset = None;
    let last = plan.subsets.len() - 1;
    for (r, idx) in plan.subsets.iter().enumerate() {
        let (images, targets) = data.batch(idx);
        let cache = net.forward(theta, &images)?;
        let (xi, _) = loss(&cache.output, &targets, k)?;
        loss_sum += xi.iter().sum::<f64>();
        correct += crate::data::count_correct(&cache.output, &data.labels_of(idx), k);
        let part = backward(net, theta, &cache, &loss_grad_output(&cache.output, &targets))?;
        for (s, g) in sum.iter_mut().zip(&part) {
            *s += g;
        }
        if r == last {
            subset = Some(SubsetCache {
                indices: idx.clone(),
                cache,
                targets,
            });
        }
    }
    let l = data.len() as f64;
    let grad: Vec<f64> = theta.iter().zip(&sum).map(|(t, s)| t / c + s / l).collect();
    let f = regularizer(theta, c) + loss_sum / l;
    if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("objective or gradient is not finite".into()));
    }
    Ok(GradEval {
        f,
        grad,
        correct,
        subset: subset.expect("a batch plan has at least one subset"),
    })
}

/// `∇f(θ)` alone.
pub fn gradient(net: &Network, theta: &[f64], data: &Dataset, c: f64, plan: &BatchPlan) -> Result<Vec<f64>> {
    Ok(value_and_gradient(net, theta, data, c, plan)?.grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{build_pad_index, build_phi_index};

    #[test]
    fn output_seed() {
        assert_eq!(loss_grad_output(&[1.0, 0.5], &[1.0, 0.5]), vec![0.0, 0.0]);
        assert_eq!(loss_grad_output(&[1.0, 0.0], &[0.0, 0.0]), vec![2.0, 0.0]);
    }

    #[test]
    fn zero_signal_gives_zero_gradient() {
        let (gw, gb) = conv_grad_params(&[0.0; 6], &[1.0; 12], 2).unwrap();
        assert!(gw.iter().chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_conv_gradient() {
        // one filter, one output position: gW = ds·φᵀ
        let (gw, gb) = conv_grad_params(&[3.0], &[1.0, -2.0, 0.5, 4.0], 1).unwrap();
        assert_eq!(gw, vec![3.0, -6.0, 1.5, 12.0]);
        assert_eq!(gb, vec![3.0]);
    }

    #[test]
    fn pooled_signal_lands_on_argmax() {
        let am = PoolArgmax::new(1, 4, vec![2, 1]).unwrap();
        let ds = conv_backprop_s(&[1.0, 1.0], &[0.7, 0.2], Some(&am), 4, 1).unwrap();
        assert_eq!(ds, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let dead = conv_backprop_s(&[5.0, 5.0], &[0.0, 0.2], Some(&am), 4, 1).unwrap();
        assert_eq!(dead, vec![0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn replicated_signals_share_instance_mask() {
        let mut dz = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        mask_by_activation(&mut dz, &[1.0, 0.0, 0.0, 2.0], 2, 2).unwrap();
        assert_eq!(dz, vec![1.0, 0.0, 3.0, 0.0, 0.0, 6.0, 0.0, 8.0]);
        assert!(mask_by_activation(&mut dz, &[1.0; 3], 2, 2).is_err());
    }

    #[test]
    fn identity_conv_adjoint() {
        let maps = ConvMaps {
            pad: build_pad_index(2, 2, 1, 0),
            phi: build_phi_index(2, 2, 1, 1, 1).unwrap(),
            pool: None,
        };
        let ds = [1.0, -2.0, 3.0, 4.0];
        let dz = conv_backprop_z(MatRef::new(1, 1, &[1.0]).unwrap(), &ds, &maps).unwrap();
        assert_eq!(dz, ds.to_vec());
        let zero = conv_backprop_z(MatRef::new(1, 1, &[0.0]).unwrap(), &ds, &maps).unwrap();
        assert_eq!(zero, vec![0.0; 4]);
    }

    #[test]
    fn fc_identity_backprop() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(fc_backprop(MatRef::new(2, 2, &eye).unwrap(), &[0.5, -1.0]).unwrap(), vec![0.5, -1.0]);
    }
}
