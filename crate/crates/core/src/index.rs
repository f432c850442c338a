//! Index vectors for the 0/1 selector matrices of the network: sub-image
//! gathering (im2col), zero padding, and the pooling partition.
//!
//! A selector `P` with one nonzero per row is stored as the column index of
//! that nonzero, so `P·v` is a gather and `Pᵀ·v` is an accumulate. Indices are
//! 0-based in memory; [`one_based`] and [`dump_indices`] produce the 1-based
//! form used in documentation and debug dumps.
//!
//! Images are `d × (a·b)` matrices in column-major order, so pixel
//! `(p, q, j)` of an `a × b × d` image sits at `(p + q·a)·d + j`. A batch
//! stores its instances one after another.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Column indices realizing `φ`: `vec(φ(Z)) = P_φ vec(Z)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhiIndex {
    pub a_in: usize,
    pub b_in: usize,
    pub d_in: usize,
    pub h: usize,
    pub s: usize,
    pub a_out: usize,
    pub b_out: usize,
    idx: Vec<usize>,
}

pub fn build_phi_index(a_in: usize, b_in: usize, d_in: usize, h: usize, s: usize) -> Result<PhiIndex> {
    if h == 0 || s == 0 || d_in == 0 {
        return Err(Error::InvalidArgument(
            "filter size, stride and channels must be positive".into(),
        ));
    }
    if h > a_in || h > b_in {
        return Err(Error::InvalidArgument(format!(
            "{h}x{h} window does not fit a {a_in}x{b_in} image"
        )));
    }
    let a_out = (a_in - h) / s + 1;
    let b_out = (b_in - h) / s + 1;
    let hhd = h * h * d_in;
    let mut idx = Vec::with_capacity(hhd * a_out * b_out);
    for bo in 0..b_out {
        for ao in 0..a_out {
            let corner = (ao + bo * a_in) * s * d_in;
            // row (p + q·h) + j·h·h of column ao + bo·a_out
            for j in 0..d_in {
                for q in 0..h {
                    for p in 0..h {
                        idx.push(corner + (p + q * a_in) * d_in + j);
                    }
                }
            }
        }
    }
    Ok(PhiIndex {
        a_in,
        b_in,
        d_in,
        h,
        s,
        a_out,
        b_out,
        idx,
    })
}

impl PhiIndex {
    /// Rows of `φ(Z)`: `h·h·d`.
    pub fn rows(&self) -> usize {
        self.h * self.h * self.d_in
    }

    /// Columns of `φ(Z)`: `a_out·b_out`.
    pub fn cols(&self) -> usize {
        self.a_out * self.b_out
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Elements of one input image.
    pub fn input_len(&self) -> usize {
        self.d_in * self.a_in * self.b_in
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }

    /// Entries `t·h²..(t+1)·h²` of a pooling partition (built with `d = 1`
    /// per channel or the full `d`) are the pixels of region `t`.
    pub fn region(&self, t: usize) -> &[usize] {
        let hh = self.h * self.h;
        &self.idx[t * hh..(t + 1) * hh]
    }

    /// `φ` for one image.
    pub fn gather_instance(&self, image: &[f64], out: &mut [f64]) {
        debug_assert_eq!(image.len(), self.input_len());
        debug_assert_eq!(out.len(), self.len());
        for (o, &k) in out.iter_mut().zip(&self.idx) {
            *o = image[k];
        }
    }

    /// `P_φᵀ` for one image: adds `cols` into `image` (not cleared).
    pub fn scatter_add_instance(&self, cols: &[f64], image: &mut [f64]) {
        debug_assert_eq!(image.len(), self.input_len());
        debug_assert_eq!(cols.len(), self.len());
        for (&v, &k) in cols.iter().zip(&self.idx) {
            image[k] += v;
        }
    }

    /// `φ` applied to every instance of a `d × a·b·l` batch, giving the
    /// `h·h·d × a_out·b_out·l` stack.
    pub fn gather(&self, batch: &[f64]) -> Result<Vec<f64>> {
        let l = instances(batch.len(), self.input_len(), "gather")?;
        let mut out = vec![0.0; self.len() * l];
        if l == 0 {
            return Ok(out);
        }
        out.par_chunks_mut(self.len())
            .zip(batch.par_chunks(self.input_len()))
            .for_each(|(o, img)| self.gather_instance(img, o));
        Ok(out)
    }

    /// Adjoint of [`PhiIndex::gather`] over a stacked batch.
    pub fn scatter_add(&self, cols: &[f64]) -> Result<Vec<f64>> {
        let l = instances(cols.len(), self.len(), "scatter")?;
        let mut out = vec![0.0; self.input_len() * l];
        if l == 0 {
            return Ok(out);
        }
        out.par_chunks_mut(self.input_len())
            .zip(cols.par_chunks(self.len()))
            .for_each(|(img, c)| self.scatter_add_instance(c, img));
        Ok(out)
    }
}

fn instances(total: usize, block: usize, what: &str) -> Result<usize> {
    if block == 0 || !total.is_multiple_of(block) {
        return Err(Error::dim(format!(
            "{what}: {total} values are not a whole number of {block}-value instances"
        )));
    }
    Ok(total / block)
}

/// Positions of the input pixels inside the zero-padded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadIndex {
    pub a_in: usize,
    pub b_in: usize,
    pub d: usize,
    pub pad: usize,
    pub a_pad: usize,
    pub b_pad: usize,
    idx: Vec<usize>,
}

pub fn build_pad_index(a_in: usize, b_in: usize, d: usize, pad: usize) -> PadIndex {
    let a_pad = a_in + 2 * pad;
    let b_pad = b_in + 2 * pad;
    let mut idx = Vec::with_capacity(d * a_in * b_in);
    for c in 0..b_in {
        for r in 0..a_in {
            for j in 0..d {
                idx.push(((r + pad) + (c + pad) * a_pad) * d + j);
            }
        }
    }
    PadIndex {
        a_in,
        b_in,
        d,
        pad,
        a_pad,
        b_pad,
        idx,
    }
}

impl PadIndex {
    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }

    pub fn input_len(&self) -> usize {
        self.idx.len()
    }

    pub fn padded_len(&self) -> usize {
        self.d * self.a_pad * self.b_pad
    }

    pub fn is_identity(&self) -> bool {
        self.pad == 0
    }

    pub fn pad_instance(&self, image: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (&v, &k) in image.iter().zip(&self.idx) {
            out[k] = v;
        }
    }

    pub fn unpad_instance(&self, padded: &[f64], out: &mut [f64]) {
        for (o, &k) in out.iter_mut().zip(&self.idx) {
            *o = padded[k];
        }
    }

    /// Embed every instance of a batch in a zero frame.
    pub fn pad(&self, batch: &[f64]) -> Result<Vec<f64>> {
        if self.is_identity() {
            instances(batch.len(), self.input_len(), "pad")?;
            return Ok(batch.to_vec());
        }
        let l = instances(batch.len(), self.input_len(), "pad")?;
        let mut out = vec![0.0; self.padded_len() * l];
        if l > 0 {
            out.par_chunks_mut(self.padded_len())
                .zip(batch.par_chunks(self.input_len()))
                .for_each(|(o, img)| self.pad_instance(img, o));
        }
        Ok(out)
    }

    /// `P_padᵀ`: crop the frame off every instance.
    pub fn unpad(&self, padded: &[f64]) -> Result<Vec<f64>> {
        if self.is_identity() {
            instances(padded.len(), self.padded_len(), "unpad")?;
            return Ok(padded.to_vec());
        }
        let l = instances(padded.len(), self.padded_len(), "unpad")?;
        let mut out = vec![0.0; self.input_len() * l];
        if l > 0 {
            out.par_chunks_mut(self.input_len())
                .zip(padded.par_chunks(self.padded_len()))
                .for_each(|(o, img)| self.unpad_instance(img, o));
        }
        Ok(out)
    }
}

/// Pooling selections `P_pool` for a batch: column `i` holds, for every
/// pooled output, the within-instance linear index of the chosen maximum in
/// instance `i`'s convolved image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolArgmax {
    /// Outputs per instance, `d·a_out·b_out`.
    pub rows: usize,
    /// Elements of one convolved image, `d·a_conv·b_conv`.
    pub source_len: usize,
    pub instances: usize,
    idx: Vec<usize>,
}

impl PoolArgmax {
    pub fn new(rows: usize, source_len: usize, idx: Vec<usize>) -> Result<Self> {
        let instances = instances(idx.len(), rows, "pool argmax")?;
        if let Some(&k) = idx.iter().find(|&&k| k >= source_len) {
            return Err(Error::IndexOutOfRange {
                index: k + 1,
                len: source_len,
            });
        }
        Ok(PoolArgmax {
            rows,
            source_len,
            instances,
            idx,
        })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }

    pub fn column(&self, i: usize) -> &[usize] {
        &self.idx[i * self.rows..(i + 1) * self.rows]
    }
}

/// `out[k] = Σ_{j : indices[j] = k} values[j]`, i.e. `Pᵀv` for the selector
/// whose row `j` has its nonzero in column `indices[j]`.
pub fn accumulate_by_index(values: &[f64], indices: &[usize], out_len: usize) -> Result<Vec<f64>> {
    if values.len() != indices.len() {
        return Err(Error::dim(format!(
            "accumulate: {} values but {} indices",
            values.len(),
            indices.len()
        )));
    }
    let mut out = vec![0.0; out_len];
    for (&v, &k) in values.iter().zip(indices) {
        let slot = out.get_mut(k).ok_or(Error::IndexOutOfRange {
            index: k + 1,
            len: out_len,
        })?;
        *slot += v;
    }
    Ok(out)
}

/// Repeat `base` `copies` times, shifting copy `c` by `c·block_size`, so a
/// single accumulate covers a whole stacked batch.
pub fn batch_offset_indices(base: &[usize], block_size: usize, copies: usize) -> Result<Vec<usize>> {
    if copies == 0 {
        return Err(Error::InvalidArgument("copies must be at least 1".into()));
    }
    let overflow = || Error::InvalidArgument("batched index range overflows".into());
    let top = base.iter().copied().max().unwrap_or(0);
    block_size
        .checked_mul(copies - 1)
        .and_then(|o| o.checked_add(top))
        .ok_or_else(overflow)?;
    let total = base.len().checked_mul(copies).ok_or_else(overflow)?;
    let mut out = Vec::with_capacity(total);
    for c in 0..copies {
        let shift = c * block_size;
        out.extend(base.iter().map(|&k| k + shift));
    }
    Ok(out)
}

pub fn one_based(indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&k| k + 1).collect()
}

/// Write one 1-based index per line.
pub fn dump_indices(path: impl AsRef<Path>, indices: &[usize]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &k in indices {
        writeln!(w, "{}", k + 1)?;
    }
    w.flush()?;
    Ok(())
}
