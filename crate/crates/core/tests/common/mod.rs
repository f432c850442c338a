//! Reference implementations written directly from the layer definitions,
//! sharing no code with the library's index maps or GEMM lowering.

#![allow(dead_code)]

use newton_cnn::config::{LayerSpec, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn normal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    max_abs_diff(a, b) / scale
}

/// The 8×8×2 conv 3×3→4 + 2×2 pool, fc→3 network.
pub fn tiny_cnn() -> ModelConfig {
    ModelConfig::parse("input a=8 b=8 d=2\nconv h=3 out=4 stride=1 pad=0 pool=2\nfc out=3\n").unwrap()
}

/// An image of `a × b × d` values, channel innermost, columns outermost.
#[derive(Clone, Debug)]
pub struct Image {
    pub a: usize,
    pub b: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(a: usize, b: usize, d: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), a * b * d);
        Image { a, b, d, data }
    }

    pub fn at(&self, p: usize, q: usize, j: usize) -> f64 {
        self.data[(p + q * self.a) * self.d + j]
    }

    /// Value at a signed position, zero outside the image.
    pub fn padded_at(&self, p: isize, q: isize, j: usize) -> f64 {
        if p < 0 || q < 0 || p as usize >= self.a || q as usize >= self.b {
            0.0
        } else {
            self.at(p as usize, q as usize, j)
        }
    }
}

/// Sub-image matrix of a (padded) image by explicit window enumeration:
/// row `(p + q·h) + j·h²`, column `ao + bo·a_out`.
pub fn naive_phi(x: &Image, h: usize, s: usize) -> (usize, usize, Vec<f64>) {
    let ao_n = (x.a - h) / s + 1;
    let bo_n = (x.b - h) / s + 1;
    let rows = h * h * x.d;
    let mut out = vec![0.0; rows * ao_n * bo_n];
    for bo in 0..bo_n {
        for ao in 0..ao_n {
            let col = ao + bo * ao_n;
            for j in 0..x.d {
                for q in 0..h {
                    for p in 0..h {
                        out[(p + q * h) + j * h * h + col * rows] = x.at(ao * s + p, bo * s + q, j);
                    }
                }
            }
        }
    }
    (rows, ao_n * bo_n, out)
}

pub fn naive_pad(x: &Image, pad: usize) -> Image {
    let (a, b) = (x.a + 2 * pad, x.b + 2 * pad);
    let mut data = vec![0.0; a * b * x.d];
    for q in 0..b {
        for p in 0..a {
            for j in 0..x.d {
                data[(p + q * a) * x.d + j] = x.padded_at(p as isize - pad as isize, q as isize - pad as isize, j);
            }
        }
    }
    Image::new(a, b, x.d, data)
}

/// Column-major weight entry `W[o, r]` of a `rows`-row matrix at `offset`.
fn weight(theta: &[f64], offset: usize, rows: usize, o: usize, r: usize) -> f64 {
    theta[offset + o + r * rows]
}

/// One conv layer by direct inner products, followed by RELU and pooling.
/// Returns (pre-activation S, output image).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv_layer(
    x: &Image,
    theta: &[f64],
    offset: usize,
    filter: usize,
    out_channels: usize,
    stride: usize,
    pad: usize,
    pool: Option<usize>,
) -> (Image, Image, usize) {
    let h = filter;
    let a_conv = (x.a + 2 * pad - h) / stride + 1;
    let b_conv = (x.b + 2 * pad - h) / stride + 1;
    let wlen = out_channels * h * h * x.d;
    let mut s = vec![0.0; a_conv * b_conv * out_channels];
    for bo in 0..b_conv {
        for ao in 0..a_conv {
            for o in 0..out_channels {
                let mut acc = theta[offset + wlen + o];
                for j in 0..x.d {
                    for q in 0..h {
                        for p in 0..h {
                            let r = (p + q * h) + j * h * h;
                            let pr = (ao * stride + p) as isize - pad as isize;
                            let pc = (bo * stride + q) as isize - pad as isize;
                            acc += weight(theta, offset, out_channels, o, r) * x.padded_at(pr, pc, j);
                        }
                    }
                }
                s[(ao + bo * a_conv) * out_channels + o] = acc;
            }
        }
    }
    let pre = Image::new(a_conv, b_conv, out_channels, s.clone());
    let act = Image::new(a_conv, b_conv, out_channels, s.iter().map(|&v| v.max(0.0)).collect());
    let out = match pool {
        None => act,
        Some(w) => naive_maxpool(&act, w),
    };
    (pre, out, wlen + out_channels)
}

/// Non-overlapping `w × w` max pooling, dropping incomplete windows.
pub fn naive_maxpool(x: &Image, w: usize) -> Image {
    let (a, b) = (x.a / w, x.b / w);
    let mut data = vec![0.0; a * b * x.d];
    for q in 0..b {
        for p in 0..a {
            for j in 0..x.d {
                let mut best = f64::NEG_INFINITY;
                for dq in 0..w {
                    for dp in 0..w {
                        best = best.max(x.at(p * w + dp, q * w + dq, j));
                    }
                }
                data[(p + q * a) * x.d + j] = best;
            }
        }
    }
    Image::new(a, b, x.d, data)
}

/// `W z + b` with an optional RELU.
pub fn naive_fc(z: &[f64], theta: &[f64], offset: usize, n_out: usize, relu: bool) -> (Vec<f64>, usize) {
    let n_in = z.len();
    let wlen = n_out * n_in;
    let out = (0..n_out)
        .map(|o| {
            let v = theta[offset + wlen + o] + (0..n_in).map(|i| weight(theta, offset, n_out, o, i) * z[i]).sum::<f64>();
            if relu {
                v.max(0.0)
            } else {
                v
            }
        })
        .collect();
    (out, wlen + n_out)
}

/// Network output for one image, by loops only.
pub fn naive_output(config: &ModelConfig, theta: &[f64], image: &[f64]) -> Vec<f64> {
    let (a, b, d) = config.input;
    let mut img = Image::new(a, b, d, image.to_vec());
    let mut flat: Option<Vec<f64>> = None;
    let mut offset = 0;
    let last = config.layers.len() - 1;
    for (m, layer) in config.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv {
                filter,
                out_channels,
                stride,
                pad,
                pool,
            } => {
                let (_, out, used) = naive_conv_layer(&img, theta, offset, filter, out_channels, stride, pad, pool);
                img = out;
                offset += used;
            }
            LayerSpec::Fc { out_neurons } => {
                let z = flat.take().unwrap_or_else(|| img.data.clone());
                let (out, used) = naive_fc(&z, theta, offset, out_neurons, m != last);
                flat = Some(out);
                offset += used;
            }
        }
    }
    assert_eq!(offset, theta.len(), "parameter vector fully consumed");
    flat.expect("last layer is fully connected")
}

/// `θᵀθ/(2C) + (1/l)Σ‖z − y‖²` with the loop network.
pub fn naive_objective(config: &ModelConfig, theta: &[f64], images: &[f64], labels: &[usize], c: f64) -> f64 {
    let n_in = config.input.0 * config.input.1 * config.input.2;
    let l = labels.len();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = naive_output(config, theta, &images[i * n_in..(i + 1) * n_in]);
        loss += z
            .iter()
            .enumerate()
            .map(|(u, &zu)| {
                let t = if u == y { 1.0 } else { 0.0 };
                (zu - t) * (zu - t)
            })
            .sum::<f64>();
    }
    dot(theta, theta) / (2.0 * c) + loss / l as f64
}

/// A sparse matrix as a list of `(row, col, value)` triplets.
#[derive(Clone, Debug, Default)]
pub struct Sparse {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Sparse {
    pub fn new(rows: usize, cols: usize) -> Self {
        Sparse {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols);
        self.entries.push((r, c, v));
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    pub fn mul_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for &(r, c, v) in &self.entries {
            y[c] += v * x[r];
        }
        y
    }
}

/// 0/1 matrix `P` with `P·vec(padded image) = vec(φ)`, built from window
/// geometry.
pub fn phi_matrix(a: usize, b: usize, d: usize, h: usize, s: usize) -> Sparse {
    let ao_n = (a - h) / s + 1;
    let bo_n = (b - h) / s + 1;
    let rows = h * h * d;
    let mut m = Sparse::new(rows * ao_n * bo_n, a * b * d);
    for bo in 0..bo_n {
        for ao in 0..ao_n {
            for j in 0..d {
                for q in 0..h {
                    for p in 0..h {
                        let r = (p + q * h) + j * h * h + (ao + bo * ao_n) * rows;
                        let c = ((ao * s + p) + (bo * s + q) * a) * d + j;
                        m.push(r, c, 1.0);
                    }
                }
            }
        }
    }
    m
}

/// 0/1 matrix `P` with `P·vec(image) = vec(padded image)`.
pub fn pad_matrix(a: usize, b: usize, d: usize, pad: usize) -> Sparse {
    let ap = a + 2 * pad;
    let mut m = Sparse::new(ap * (b + 2 * pad) * d, a * b * d);
    for q in 0..b {
        for p in 0..a {
            for j in 0..d {
                m.push(((p + pad) + (q + pad) * ap) * d + j, (p + q * a) * d + j, 1.0);
            }
        }
    }
    m
}

/// Central difference of `f` along coordinate `j`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], j: usize, eps: f64) -> f64 {
    let mut p = x.to_vec();
    p[j] = x[j] + eps;
    let fp = f(&p);
    p[j] = x[j] - eps;
    let fm = f(&p);
    (fp - fm) / (2.0 * eps)
}
