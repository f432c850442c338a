//! Jacobian blocks of the sampled subset and the matrix-free Gauss-Newton
//! product `(G^S + λI)v`.
//!
//! For layer `m` and instance `i` the cache stores `∂z^{L+1,i}_u/∂S^{m,i}` for
//! every output coordinate `u`, each as a matrix shaped like `S^{m,i}`. The
//! blocks sit side by side with `u` varying fastest, so layer `m` holds a
//! `rows × (cols·K·|S|)` matrix. Products with `J` then reduce to the same
//! affine maps and weight-gradient products used by the forward and backward
//! passes.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::backward::{grad_params, step_down};
use crate::error::{Error, Result};
use crate::forward::{conv_forward, fc_forward, ForwardCache, Network};
use crate::index::PoolArgmax;
use crate::linalg::{dot, Matrix};

/// Instances pushed through the Jacobian recurrence together; bounds the
/// transient `Wᵀ·J` products.
const JACOBIAN_CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct JacobianCache {
    pub classes: usize,
    pub instances: usize,
    /// Elements of one `(u, i)` block per layer.
    pub block_len: Vec<usize>,
    blocks: Vec<Vec<f64>>,
}

impl JacobianCache {
    /// Stored reals, `Σ_m block_len[m]·K·|S|`.
    pub fn element_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn layer(&self, m: usize) -> &[f64] {
        &self.blocks[m]
    }

    /// `∂z^{L+1,i}_u/∂vec(S^{m,i})`.
    pub fn block(&self, m: usize, u: usize, i: usize) -> &[f64] {
        let b = self.block_len[m];
        let c = u + i * self.classes;
        &self.blocks[m][c * b..(c + 1) * b]
    }
}

/// Copy of instances `lo..hi` of a forward cache.
fn slice_cache(net: &Network, cache: &ForwardCache, lo: usize, hi: usize) -> Result<ForwardCache> {
    let z = cache
        .z
        .iter()
        .enumerate()
        .map(|(m, zm)| {
            let n = net.shape(m).input_len();
            zm[lo * n..hi * n].to_vec()
        })
        .collect();
    let argmax = cache
        .argmax
        .iter()
        .map(|am| {
            am.as_ref()
                .map(|a| PoolArgmax::new(a.rows, a.source_len, a.as_slice()[lo * a.rows..hi * a.rows].to_vec()))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let k = net.num_classes();
    Ok(ForwardCache {
        instances: hi - lo,
        z,
        argmax,
        output: cache.output[lo * k..hi * k].to_vec(),
    })
}

/// Run the backward recurrence seeded with `∂z^{L+1}/∂s^L = I_K` for every
/// instance of `cache`.
pub fn build_jacobian_cache(net: &Network, theta: &[f64], cache: &ForwardCache) -> Result<JacobianCache> {
    net.check_theta(theta)?;
    if cache.z.len() != net.num_layers() {
        return Err(Error::InvalidArgument(
            "forward cache does not hold the intermediate values of every layer".into(),
        ));
    }
    let k = net.num_classes();
    let l = cache.instances;
    let layers = net.num_layers();
    let block_len: Vec<usize> = (0..layers).map(|m| net.shape(m).pre_activation_len()).collect();
    let mut blocks: Vec<Vec<f64>> = block_len.iter().map(|&b| Vec::with_capacity(b * k * l)).collect();
    let mut lo = 0;
    while lo < l {
        let hi = (lo + JACOBIAN_CHUNK).min(l);
        let part = slice_cache(net, cache, lo, hi)?;
        let mut ds = vec![0.0; k * k * (hi - lo)];
        for (c, col) in ds.chunks_mut(k).enumerate() {
            col[c % k] = 1.0;
        }
        for m in (0..layers).rev() {
            if m > 0 {
                let below = step_down(net, theta, &part, m, &ds, k)?;
                blocks[m].extend_from_slice(&ds);
                ds = below;
            } else {
                blocks[m].extend_from_slice(&ds);
            }
        }
        lo = hi;
    }
    Ok(JacobianCache {
        classes: k,
        instances: l,
        block_len,
        blocks,
    })
}

/// Everything the Gauss-Newton product needs for one Newton iteration.
#[derive(Clone, Debug)]
pub struct GNContext<'a> {
    pub net: &'a Network,
    pub cache: &'a ForwardCache,
    pub jacobian: JacobianCache,
    pub c: f64,
    pub lambda: f64,
}

impl<'a> GNContext<'a> {
    pub fn new(net: &'a Network, theta: &[f64], cache: &'a ForwardCache, c: f64, lambda: f64) -> Result<Self> {
        if !(c > 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("need C > 0 and λ ≥ 0, got C = {c}, λ = {lambda}")));
        }
        if cache.instances == 0 {
            return Err(Error::InvalidArgument("Gauss-Newton subset is empty".into()));
        }
        let jacobian = build_jacobian_cache(net, theta, cache)?;
        Ok(GNContext {
            net,
            cache,
            jacobian,
            c,
            lambda,
        })
    }

    pub fn subset_size(&self) -> usize {
        self.cache.instances
    }

    /// Length of `Jv`: `K·|S|`.
    pub fn output_len(&self) -> usize {
        self.jacobian.classes * self.cache.instances
    }

    /// `[φ(pad(Z^m)); 𝟙ᵀ]` without the ones row: φ for conv layers, `z^m`
    /// for fully-connected ones.
    fn layer_input(&self, m: usize) -> Result<Cow<'_, [f64]>> {
        if self.net.shape(m).conv {
            Ok(Cow::Owned(self.net.phi_stack(m, &self.cache.z[m])?))
        } else {
            Ok(Cow::Borrowed(&self.cache.z[m]))
        }
    }

    fn check_v(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.net.num_params() {
            return Err(Error::dim(format!(
                "vector has {} entries, network has {} parameters",
                v.len(),
                self.net.num_params()
            )));
        }
        Ok(())
    }

    /// Stacked `J^i v`, entry `u + i·K`.
    pub fn jv(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_v(v)?;
        let k = self.jacobian.classes;
        let mut out = vec![0.0; self.output_len()];
        for m in 0..self.net.num_layers() {
            let seg = self.net.layout.segments[m];
            let x = self.layer_input(m)?;
            let p = if self.net.shape(m).conv {
                conv_forward(seg.weights(v), seg.bias(v), &x)?
            } else {
                fc_forward(seg.weights(v), seg.bias(v), &x)?
            };
            let b = self.jacobian.block_len[m];
            let jm = self.jacobian.layer(m);
            out.par_chunks_mut(k).enumerate().for_each(|(i, o)| {
                let pi = &p[i * b..(i + 1) * b];
                for (u, ou) in o.iter_mut().enumerate() {
                    let c = u + i * k;
                    *ou += dot(&jm[c * b..(c + 1) * b], pi);
                }
            });
        }
        Ok(out)
    }

    /// `Σ_i (J^i)ᵀ q^i`.
    pub fn jtq(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.output_len() {
            return Err(Error::dim(format!(
                "vector has {} entries, expected K·|S| = {}",
                q.len(),
                self.output_len()
            )));
        }
        let k = self.jacobian.classes;
        let mut out = vec![0.0; self.net.num_params()];
        for m in 0..self.net.num_layers() {
            let b = self.jacobian.block_len[m];
            let jm = self.jacobian.layer(m);
            let mut u_stack = vec![0.0; b * self.cache.instances];
            u_stack.par_chunks_mut(b).enumerate().for_each(|(i, ui)| {
                for u in 0..k {
                    let c = u + i * k;
                    let w = q[c];
                    if w != 0.0 {
                        for (x, &j) in ui.iter_mut().zip(&jm[c * b..(c + 1) * b]) {
                            *x += w * j;
                        }
                    }
                }
            });
            let x = self.layer_input(m)?;
            let shape = self.net.shape(m);
            let rows = if shape.conv { shape.d_out } else { shape.n_out };
            let (gw, gb) = grad_params(&u_stack, &x, rows)?;
            let seg = self.net.layout.segments[m];
            out[seg.weight_range()].copy_from_slice(&gw);
            out[seg.bias_range()].copy_from_slice(&gb);
        }
        Ok(out)
    }

    /// `(1/C + λ)v + (1/|S|) Σ_i (J^i)ᵀ B^i J^i v`.
    pub fn gn_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matvec_with(v, self.lambda)
    }

    /// The product with damping `lambda` in place of the context's λ.
    pub fn matvec_with(&self, v: &[f64], lambda: f64) -> Result<Vec<f64>> {
        let q = apply_b(&self.jv(v)?);
        let jtq = self.jtq(&q)?;
        let ridge = 1.0 / self.c + lambda;
        let s = 1.0 / self.subset_size() as f64;
        let out: Vec<f64> = v.iter().zip(&jtq).map(|(vi, ji)| ridge * vi + s * ji).collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("Gauss-Newton product is not finite".into()));
        }
        Ok(out)
    }

    /// Dense `K|S| × n` Jacobian, one row per `(u, i)`. Only for small nets.
    pub fn assemble_jacobian(&self) -> Result<Matrix> {
        let rows = self.output_len();
        let n = self.net.num_params();
        let mut j = Matrix::zeros(rows, n);
        let mut e = vec![0.0; rows];
        for r in 0..rows {
            e[r] = 1.0;
            let row = self.jtq(&e)?;
            e[r] = 0.0;
            for (c, &v) in row.iter().enumerate() {
                j.set(r, c, v);
            }
        }
        Ok(j)
    }
}

/// `B^i q^i` with `B^i = 2I` for the squared loss.
pub fn apply_b(q: &[f64]) -> Vec<f64> {
    q.iter().map(|x| 2.0 * x).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{init_params, LayerSpec, ModelConfig};

    #[test]
    fn b_doubles() {
        assert_eq!(apply_b(&[1.0, -2.0]), vec![2.0, -4.0]);
        assert_eq!(apply_b(&[0.0]), vec![0.0]);
    }

    fn linear_net() -> (Network, Vec<f64>) {
        let cfg = ModelConfig {
            input: (3, 1, 1),
            layers: vec![LayerSpec::Fc { out_neurons: 2 }],
        };
        let theta = init_params(&cfg, 4).unwrap().into_vec();
        (Network::new(cfg).unwrap(), theta)
    }

    #[test]
    fn linear_layer_seed_is_identity() {
        let (net, theta) = linear_net();
        let cache = net.forward(&theta, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let jac = build_jacobian_cache(&net, &theta, &cache).unwrap();
        assert_eq!(jac.layer(0), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(jac.element_count(), 2 * 2 * 2);
    }

    #[test]
    fn bias_direction_in_affine_net() {
        let (net, theta) = linear_net();
        let cache = net.forward(&theta, &[1.0, 2.0, 3.0]).unwrap();
        let ctx = GNContext::new(&net, &theta, &cache, 1.0, 0.0).unwrap();
        let mut v = vec![0.0; 8];
        v[6] = 0.5;
        v[7] = -3.0;
        assert_eq!(ctx.jv(&v).unwrap(), vec![0.5, -3.0]);
        assert_eq!(ctx.jv(&[0.0; 8]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ctx.jtq(&[0.0, 0.0]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn rejects_wrong_lengths() {
        let (net, theta) = linear_net();
        let cache = net.forward(&theta, &[1.0, 2.0, 3.0]).unwrap();
        let ctx = GNContext::new(&net, &theta, &cache, 1.0, 0.0).unwrap();
        assert!(ctx.jv(&[0.0; 7]).is_err());
        assert!(ctx.jtq(&[0.0; 3]).is_err());
        assert!(GNContext::new(&net, &theta, &cache, 0.0, 0.0).is_err());
    }
}
