//! Dataset loading (IDX and CSV), preprocessing, labels and subsets.
//!
//! Raw pixels arrive row-major with channels innermost (`HWC`, the order of
//! both IDX and the usual CSV dumps). The network wants each image as a
//! `d × (a·b)` matrix in column-major order, so pixel `(r, c, ch)` moves
//! from `(r·b + c)·d + ch` to `(r + c·a)·d + ch`.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::Network;

/// Images as loaded, before scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct RawData {
    /// Height, width, channels.
    pub dims: (usize, usize, usize),
    /// `HWC` pixels of every image, one image after another.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl RawData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn subset(&self, idx: &[usize]) -> RawData {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        RawData {
            dims: self.dims,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// A preprocessed dataset in network layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: (usize, usize, usize),
    pub classes: usize,
    /// `d × a·b·l` stack.
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: (usize, usize, usize), classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if n == 0 || images.len() != n * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {}x{}x{}",
                images.len(),
                labels.len(),
                dims.0,
                dims.1,
                dims.2
            )));
        }
        check_labels(&labels, classes)?;
        if let Some(i) = images.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("image {} has a non-finite pixel", i / n + 1)));
        }
        Ok(Dataset {
            dims,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// `K × l` one-hot matrix of all labels.
    pub fn targets(&self) -> Vec<f64> {
        one_hot(&self.labels, self.classes).expect("labels are validated on construction")
    }

    /// Stacked images and one-hot targets of the selected instances.
    pub fn batch(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let n = self.image_len();
        let mut images = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        let y = one_hot(&self.labels_of(idx), self.classes).expect("labels are validated on construction");
        (images, y)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, _) = self.batch(idx);
        Dataset {
            dims: self.dims,
            classes: self.classes,
            images,
            labels: self.labels_of(idx),
        }
    }

    pub(crate) fn check_network(&self, net: &Network) -> Result<()> {
        if self.dims != net.config.input || self.classes != net.num_classes() {
            return Err(Error::Data(format!(
                "data is {}x{}x{} with {} classes, network expects {}x{}x{} with {}",
                self.dims.0,
                self.dims.1,
                self.dims.2,
                self.classes,
                net.config.input.0,
                net.config.input.1,
                net.config.input.2,
                net.num_classes()
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= classes) {
        Some(i) => Err(Error::Data(format!(
            "label {} of instance {} is outside [0, {classes})",
            labels[i],
            i + 1
        ))),
        None => Ok(()),
    }
}

/// Reorder one `HWC` image into column-major `d × (a·b)` layout.
pub fn hwc_to_layout(pixels: &[f64], dims: (usize, usize, usize), out: &mut [f64]) {
    let (a, b, d) = dims;
    for r in 0..a {
        for c in 0..b {
            for ch in 0..d {
                out[(r + c * a) * d + ch] = pixels[(r * b + c) * d + ch];
            }
        }
    }
}

/// Inverse of [`hwc_to_layout`].
pub fn layout_to_hwc(image: &[f64], dims: (usize, usize, usize), out: &mut [f64]) {
    let (a, b, d) = dims;
    for r in 0..a {
        for c in 0..b {
            for ch in 0..d {
                out[(r * b + c) * d + ch] = image[(r + c * a) * d + ch];
            }
        }
    }
}

/// An IDX array: big-endian dimension sizes followed by unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Data("truncated IDX header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Data(format!("bad IDX magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Data(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(Error::Data("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Data("IDX dimensions overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(Error::Data(format!(
            "IDX payload has {} bytes, header promises {count}",
            payload.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Images (`0x00000803`, `n × a × b`, or `n × a × b × d`) and their labels
/// (`0x00000801`).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<RawData> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    let dims = match img.dims[..] {
        [_, a, b] => (a, b, 1),
        [_, a, b, d] => (a, b, d),
        _ => {
            return Err(Error::Data(format!(
                "image IDX must have 3 or 4 dimensions, found {}",
                img.dims.len()
            )))
        }
    };
    if lab.dims.len() != 1 {
        return Err(Error::Data("label IDX must be one-dimensional".into()));
    }
    if lab.dims[0] != img.dims[0] {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    Ok(RawData {
        dims,
        pixels: img.data.iter().map(|&p| f64::from(p)).collect(),
        labels: lab.data.iter().map(|&y| usize::from(y)).collect(),
    })
}

/// CSV rows `label,p1,p2,...` with pixels in `HWC` order. A first line whose
/// label field is not an integer is taken as a header and skipped.
pub fn load_csv(path: impl AsRef<Path>, dims: (usize, usize, usize)) -> Result<RawData> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let n = dims.0 * dims.1 * dims.2;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Data(format!("{} line {line_no}: {msg}", path.display()));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let label = match fields[0].parse::<usize>() {
            Ok(y) => y,
            Err(_) if line_no == 1 => {
                if fields.len() != n + 1 {
                    return Err(err(format!("header has {} columns, expected {}", fields.len(), n + 1)));
                }
                continue;
            }
            Err(_) => return Err(err(format!("label `{}` is not a non-negative integer", fields[0]))),
        };
        if fields.len() != n + 1 {
            return Err(err(format!("{} columns, expected label plus {n} pixels", fields.len())));
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| err(format!("pixel `{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("pixel `{f}` is not finite")));
            }
            pixels.push(v);
        }
        labels.push(label);
    }
    Ok(RawData { dims, pixels, labels })
}

/// Per-image min-max scaling (a constant image becomes all zeros), then
/// layout conversion. Returns images in network layout.
fn scale_images(raw: &RawData) -> Vec<f64> {
    let n = raw.image_len();
    let mut out = vec![0.0; raw.pixels.len()];
    let mut scaled = vec![0.0; n];
    for (src, dst) in raw.pixels.chunks(n).zip(out.chunks_mut(n)) {
        let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for (s, &p) in scaled.iter_mut().zip(src) {
            *s = if range > 0.0 { (p - lo) / range } else { 0.0 };
        }
        hwc_to_layout(&scaled, raw.dims, dst);
    }
    out
}

/// Per-pixel mean (network layout) of the min-max scaled training images.
pub fn fit_mean(train: &RawData) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let n = train.image_len();
    let mut mean = vec![0.0; n];
    for img in scale_images(train).chunks(n) {
        for (m, &v) in mean.iter_mut().zip(img) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= train.len() as f64;
    }
    Ok(mean)
}

/// Min-max scale every image and subtract a previously fitted mean.
pub fn apply_preprocessing(raw: &RawData, mean: &[f64], classes: usize) -> Result<Dataset> {
    let n = raw.image_len();
    if mean.len() != n {
        return Err(Error::Data(format!(
            "pixel mean has {} entries, images have {n}",
            mean.len()
        )));
    }
    let mut images = scale_images(raw);
    for img in images.chunks_mut(n) {
        for (v, m) in img.iter_mut().zip(mean) {
            *v -= m;
        }
    }
    Dataset::new(raw.dims, classes, images, raw.labels.clone())
}

/// Min-max scale every image, then subtract the per-pixel mean of the
/// training images from training and test images alike.
pub fn preprocess(train: &RawData, test: Option<&RawData>, classes: usize) -> Result<(Dataset, Option<Dataset>)> {
    if let Some(t) = test {
        if t.dims != train.dims {
            return Err(Error::Data(format!(
                "test images are {:?}, training images are {:?}",
                t.dims, train.dims
            )));
        }
    }
    let mean = fit_mean(train)?;
    let train_set = apply_preprocessing(train, &mean, classes)?;
    let test_set = test.map(|t| apply_preprocessing(t, &mean, classes)).transpose()?;
    Ok((train_set, test_set))
}

/// `K × l` matrix with a single 1 per column.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    check_labels(labels, classes)?;
    let mut y = vec![0.0; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        y[i * classes + c] = 1.0;
    }
    Ok(y)
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

pub(crate) fn count_correct(z: &[f64], labels: &[usize], classes: usize) -> usize {
    z.chunks(classes)
        .zip(labels)
        .filter(|(zi, &y)| argmax(zi) == y)
        .count()
}

/// Fraction of columns of the `K × l` output whose arg-max is the label.
pub fn accuracy(z: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 || z.len() != labels.len() * classes {
        return Err(Error::dim(format!(
            "{} outputs for {} labels and K = {classes}",
            z.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    Ok(count_correct(z, labels, classes) as f64 / labels.len() as f64)
}

/// Per-class sample whose sizes are `fraction·n_c` apportioned by largest
/// remainder, so the total is `round(fraction·l)`; every class present keeps
/// at least one instance. Drawn deterministically from `seed`. Returns
/// `(selected, rest)`, each in increasing order.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let quota: Vec<f64> = by_class.iter().map(|m| fraction * m.len() as f64).collect();
    let mut take: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let total = (fraction * labels.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..classes).collect();
    // stable sort: equal remainders go to the smaller class label
    order.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())));
    let short = total.saturating_sub(take.iter().sum());
    for &c in order.iter().take(short) {
        take[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; labels.len()];
    for (members, t) in by_class.iter_mut().zip(take) {
        if members.is_empty() {
            continue;
        }
        let t = t.clamp(1, members.len());
        members.shuffle(&mut rng);
        for &i in &members[..t] {
            chosen[i] = true;
        }
    }
    let (sel, rest): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| chosen[i]);
    Ok((sel, rest))
}

pub fn stratified_subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let (sel, _) = stratified_split(data.labels(), fraction, seed)?;
    Ok(data.subset(&sel))
}
