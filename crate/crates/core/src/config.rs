//! Network architecture descriptions, derived layer dimensions, and the flat
//! parameter vector θ.
//!
//! Every convolutional layer is `pad → convolve → RELU → (optional) max-pool`;
//! every fully-connected layer is an affine map followed by RELU, except the
//! last one which is linear. All convolutional layers precede all
//! fully-connected layers, and at least one fully-connected layer is required
//! so that the output width is the number of classes.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::MatRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        /// Square filter side `h`.
        filter: usize,
        out_channels: usize,
        stride: usize,
        /// Zero rows/columns added on every side.
        pad: usize,
        /// Pooling window; the pooling stride always equals the window.
        pool: Option<usize>,
    },
    Fc {
        out_neurons: usize,
    },
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                filter,
                out_channels,
                stride,
                pad,
                pool,
            } => {
                write!(f, "conv h={filter} out={out_channels} stride={stride} pad={pad}")?;
                if let Some(p) = pool {
                    write!(f, " pool={p}")?;
                }
                Ok(())
            }
            LayerSpec::Fc { out_neurons } => write!(f, "fc out={out_neurons}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input height, width, channels `(a¹, b¹, d¹)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Dimensions of one layer. Conv layers fill every field; fc layers only use
/// `n_in`/`n_out` (the remaining fields are zero).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerShape {
    pub a_in: usize,
    pub b_in: usize,
    pub d_in: usize,
    pub filter: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: Option<usize>,
    pub a_pad: usize,
    pub b_pad: usize,
    pub a_conv: usize,
    pub b_conv: usize,
    pub d_out: usize,
    pub a_out: usize,
    pub b_out: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub conv: bool,
}

impl LayerShape {
    /// Rows × cols of the weight matrix `W^m`.
    pub fn weight_dims(&self) -> (usize, usize) {
        if self.conv {
            (self.d_out, self.filter * self.filter * self.d_in)
        } else {
            (self.n_out, self.n_in)
        }
    }

    /// Elements of one instance's `S^m` (conv) or `s^m` (fc).
    pub fn pre_activation_len(&self) -> usize {
        if self.conv {
            self.d_out * self.a_conv * self.b_conv
        } else {
            self.n_out
        }
    }

    pub fn input_len(&self) -> usize {
        if self.conv {
            self.d_in * self.a_in * self.b_in
        } else {
            self.n_in
        }
    }

    pub fn output_len(&self) -> usize {
        if self.conv {
            self.d_out * self.a_out * self.b_out
        } else {
            self.n_out
        }
    }

    pub fn padded_len(&self) -> usize {
        self.d_in * self.a_pad * self.b_pad
    }

    /// Fan-in used by the He initialization.
    pub fn fan_in(&self) -> usize {
        if self.conv {
            self.d_in * self.filter * self.filter
        } else {
            self.n_in
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTable {
    pub layers: Vec<LayerShape>,
}

impl ShapeTable {
    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn num_conv(&self) -> usize {
        self.layers.iter().filter(|l| l.conv).count()
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_len())
    }
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Fc { out_neurons }) => *out_neurons,
            _ => 0,
        }
    }

    pub fn derive_shapes(&self) -> Result<ShapeTable> {
        derive_shapes(self)
    }

    pub fn param_count(&self) -> Result<usize> {
        param_count(self)
    }

    /// Parse the line-oriented architecture format:
    ///
    /// ```text
    /// # 3-layer CNN for 28x28 grey images
    /// input a=28 b=28 d=1
    /// conv h=5 out=32 stride=1 pad=0 pool=2
    /// fc out=10
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        let mut layer_lines = Vec::new();
        let mut last_line = 0;
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            last_line = line_no;
            let mut tokens = line.split_whitespace();
            let kind = tokens.next().unwrap_or_default();
            let kv = parse_pairs(tokens, line_no)?;
            let cfg_err = |message: String| Error::Config {
                line: line_no,
                message,
            };
            match kind {
                "input" => {
                    if input.is_some() {
                        return Err(cfg_err("duplicate input line".into()));
                    }
                    if !layers.is_empty() {
                        return Err(cfg_err("input must precede every layer".into()));
                    }
                    kv.only(&["a", "b", "d"])?;
                    input = Some((kv.positive("a")?, kv.positive("b")?, kv.positive("d")?));
                }
                "conv" => {
                    if layers.iter().any(|l: &LayerSpec| !l.is_conv()) {
                        return Err(cfg_err(
                            "convolutional layers must precede fully-connected layers".into(),
                        ));
                    }
                    kv.only(&["h", "out", "stride", "pad", "pool"])?;
                    layers.push(LayerSpec::Conv {
                        filter: kv.positive("h")?,
                        out_channels: kv.positive("out")?,
                        stride: kv.positive_or("stride", 1)?,
                        pad: kv.non_negative_or("pad", 0)?,
                        pool: kv.optional_positive("pool")?,
                    });
                    layer_lines.push(line_no);
                }
                "fc" => {
                    kv.only(&["out"])?;
                    layers.push(LayerSpec::Fc {
                        out_neurons: kv.positive("out")?,
                    });
                    layer_lines.push(line_no);
                }
                other => return Err(cfg_err(format!("unknown directive `{other}`"))),
            }
        }
        let input = input.ok_or(Error::Config {
            line: last_line.max(1),
            message: "missing `input a=.. b=.. d=..` line".into(),
        })?;
        let config = ModelConfig { input, layers };
        match derive_shapes(&config) {
            Ok(_) => Ok(config),
            Err(Error::Shape { layer, message }) => Err(Error::Config {
                line: layer_lines.get(layer - 1).copied().unwrap_or(last_line),
                message,
            }),
            Err(e) => Err(e),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let (a, b, d) = self.input;
        let mut s = format!("input a={a} b={b} d={d}\n");
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    /// The reference 3-layer CNN for an `a × b × d` input and `classes` outputs.
    pub fn three_layer_cnn(input: (usize, usize, usize), classes: usize) -> Self {
        let conv = |filter, out_channels| LayerSpec::Conv {
            filter,
            out_channels,
            stride: 1,
            pad: 0,
            pool: Some(2),
        };
        ModelConfig {
            input,
            layers: vec![
                conv(5, 32),
                conv(3, 64),
                conv(3, 64),
                LayerSpec::Fc {
                    out_neurons: classes,
                },
            ],
        }
    }
}

struct Pairs {
    line: usize,
    pairs: Vec<(String, String)>,
}

fn parse_pairs<'a>(tokens: impl Iterator<Item = &'a str>, line: usize) -> Result<Pairs> {
    let mut pairs = Vec::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected key=value, found `{tok}`"),
        })?;
        if pairs.iter().any(|(pk, _): &(String, String)| pk == k) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key `{k}`"),
            });
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(Pairs { line, pairs })
}

impl Pairs {
    fn err(&self, message: String) -> Error {
        Error::Config {
            line: self.line,
            message,
        }
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.pairs.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, _)) => Err(self.err(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn number(&self, key: &str, v: &str) -> Result<usize> {
        v.parse()
            .map_err(|_| self.err(format!("`{key}` must be a non-negative integer, found `{v}`")))
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v = self
            .raw(key)
            .ok_or_else(|| self.err(format!("missing `{key}`")))?;
        self.check_positive(key, self.number(key, v)?)
    }

    fn check_positive(&self, key: &str, n: usize) -> Result<usize> {
        if n == 0 {
            Err(self.err(format!("`{key}` must be positive")))
        } else {
            Ok(n)
        }
    }

    fn positive_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            Some(v) => self.check_positive(key, self.number(key, v)?),
            None => Ok(default),
        }
    }

    fn non_negative_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            Some(v) => self.number(key, v),
            None => Ok(default),
        }
    }

    fn optional_positive(&self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            Some(v) => Ok(Some(self.check_positive(key, self.number(key, v)?)?)),
            None => Ok(None),
        }
    }
}

/// All per-layer dimensions; rejects the first layer whose derived size is < 1.
pub fn derive_shapes(config: &ModelConfig) -> Result<ShapeTable> {
    let (a1, b1, d1) = config.input;
    if a1 == 0 || b1 == 0 || d1 == 0 {
        return Err(Error::Shape {
            layer: 1,
            message: "input dimensions must be positive".into(),
        });
    }
    if !matches!(config.layers.last(), Some(LayerSpec::Fc { .. })) {
        return Err(Error::Shape {
            layer: config.layers.len().max(1),
            message: "the last layer must be fully connected".into(),
        });
    }
    let (mut a, mut b, mut d) = (a1, b1, d1);
    let mut n_prev = None;
    let mut layers = Vec::with_capacity(config.layers.len());
    for (m, spec) in config.layers.iter().enumerate() {
        let layer = m + 1;
        let shape_err = |message: String| Error::Shape { layer, message };
        let shape = match *spec {
            LayerSpec::Conv {
                filter,
                out_channels,
                stride,
                pad,
                pool,
            } => {
                if n_prev.is_some() {
                    return Err(shape_err("convolution after a fully-connected layer".into()));
                }
                if filter == 0 || out_channels == 0 || stride == 0 || pool == Some(0) {
                    return Err(shape_err("filter, channels, stride and pool must be positive".into()));
                }
                let a_pad = a + 2 * pad;
                let b_pad = b + 2 * pad;
                if filter > a_pad || filter > b_pad {
                    return Err(shape_err(format!(
                        "{filter}x{filter} filter does not fit the {a_pad}x{b_pad} padded input"
                    )));
                }
                let a_conv = (a_pad - filter) / stride + 1;
                let b_conv = (b_pad - filter) / stride + 1;
                let (a_out, b_out) = match pool {
                    Some(p) => (a_conv / p, b_conv / p),
                    None => (a_conv, b_conv),
                };
                if a_out == 0 || b_out == 0 {
                    return Err(shape_err(format!(
                        "{a_conv}x{b_conv} convolution output is smaller than the pooling window"
                    )));
                }
                let s = LayerShape {
                    a_in: a,
                    b_in: b,
                    d_in: d,
                    filter,
                    stride,
                    pad,
                    pool,
                    a_pad,
                    b_pad,
                    a_conv,
                    b_conv,
                    d_out: out_channels,
                    a_out,
                    b_out,
                    n_in: d * a * b,
                    n_out: out_channels * a_out * b_out,
                    conv: true,
                };
                a = a_out;
                b = b_out;
                d = out_channels;
                s
            }
            LayerSpec::Fc { out_neurons } => {
                if out_neurons == 0 {
                    return Err(shape_err("fc width must be positive".into()));
                }
                let n_in = n_prev.unwrap_or(d * a * b);
                n_prev = Some(out_neurons);
                LayerShape {
                    n_in,
                    n_out: out_neurons,
                    conv: false,
                    ..LayerShape::default()
                }
            }
        };
        layers.push(shape);
    }
    Ok(ShapeTable { layers })
}

/// n = Σ_conv d^{m+1}(h^m h^m d^m + 1) + Σ_fc n_{m+1}(n_m + 1).
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(ParamLayout::new(&derive_shapes(config)?).len())
}

/// One layer's slice of θ: `vec(W^m)` (column-major) followed by `b^m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn weight_range(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    pub fn bias_range(&self) -> Range<usize> {
        let start = self.offset + self.rows * self.cols;
        start..start + self.rows
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn len(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights<'a>(&self, theta: &'a [f64]) -> MatRef<'a> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &theta[self.weight_range()],
        }
    }

    pub fn bias<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.bias_range()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn new(shapes: &ShapeTable) -> Self {
        let mut offset = 0;
        let segments = shapes
            .layers
            .iter()
            .map(|s| {
                let (rows, cols) = s.weight_dims();
                let seg = Segment { offset, rows, cols };
                offset += seg.len();
                seg
            })
            .collect();
        ParamLayout { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The flat parameter vector θ. Per-layer views borrow its storage, so a
/// write through [`ParamVector::weights_mut`] is visible in [`ParamVector::as_slice`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParamVector {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_vec(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::dim(format!(
                "parameter vector has {} entries, architecture needs {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { data, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn weights(&self, layer: usize) -> MatRef<'_> {
        self.layout.segments[layer].weights(&self.data)
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.segments[layer].weight_range();
        &mut self.data[r]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        self.layout.segments[layer].bias(&self.data)
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.segments[layer].bias_range();
        &mut self.data[r]
    }
}

/// He initialization: weights `N(0,1)·sqrt(2/n_in)`, biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamVector> {
    let shapes = derive_shapes(config)?;
    let layout = ParamLayout::new(&shapes);
    let mut theta = ParamVector::zeros(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (m, shape) in shapes.layers.iter().enumerate() {
        let scale = (2.0 / shape.fan_in() as f64).sqrt();
        for w in theta.weights_mut(m) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = z * scale;
        }
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(filter: usize, out: usize, stride: usize, pad: usize, pool: Option<usize>) -> LayerSpec {
        LayerSpec::Conv {
            filter,
            out_channels: out,
            stride,
            pad,
            pool,
        }
    }

    #[test]
    fn conv_output_size_follows_floor_rule() {
        let cfg = ModelConfig {
            input: (28, 28, 1),
            layers: vec![conv(5, 4, 1, 0, Some(2)), LayerSpec::Fc { out_neurons: 10 }],
        };
        let s = derive_shapes(&cfg).unwrap();
        assert_eq!((s.layers[0].a_conv, s.layers[0].b_conv), (24, 24));
        assert_eq!((s.layers[0].a_out, s.layers[0].b_out), (12, 12));
        assert_eq!(s.layers[1].n_in, 4 * 12 * 12);
    }

    #[test]
    fn table3_three_layer_on_cifar_dims() {
        let s = derive_shapes(&ModelConfig::three_layer_cnn((32, 32, 3), 10)).unwrap();
        let c1 = s.layers[0];
        assert_eq!((c1.d_out, c1.a_conv, c1.b_conv), (32, 28, 28));
        assert_eq!((c1.a_out, c1.b_out), (14, 14));
        // conv2: 12x12 → pool 6; conv3: 4x4 → pool 2
        assert_eq!((s.layers[1].a_conv, s.layers[1].a_out), (12, 6));
        assert_eq!((s.layers[2].a_conv, s.layers[2].a_out), (4, 2));
        assert_eq!(s.layers[3].n_in, 64 * 2 * 2);
    }

    #[test]
    fn strided_and_padded_sizes() {
        let cfg = ModelConfig {
            input: (7, 9, 2),
            layers: vec![conv(3, 2, 2, 1, None), LayerSpec::Fc { out_neurons: 3 }],
        };
        let s = derive_shapes(&cfg).unwrap().layers[0];
        assert_eq!((s.a_pad, s.b_pad), (9, 11));
        assert_eq!((s.a_conv, s.b_conv), (4, 5));
    }

    #[test]
    fn param_count_closed_forms() {
        let fc = ModelConfig {
            input: (4, 1, 1),
            layers: vec![LayerSpec::Fc { out_neurons: 3 }],
        };
        assert_eq!(param_count(&fc).unwrap(), 15);
        let c = ModelConfig {
            input: (5, 5, 2),
            layers: vec![conv(3, 4, 1, 0, None), LayerSpec::Fc { out_neurons: 1 }],
        };
        // conv: 4·(3·3·2+1) = 76; fc: 1·(4·3·3 + 1) = 37
        assert_eq!(param_count(&c).unwrap(), 76 + 37);
    }

    #[test]
    fn rejects_vanishing_dimension_with_layer_number() {
        let cfg = ModelConfig {
            input: (6, 6, 1),
            layers: vec![
                conv(3, 2, 1, 0, Some(2)),
                conv(3, 2, 1, 0, Some(2)),
                LayerSpec::Fc { out_neurons: 2 },
            ],
        };
        // layer 1: 4x4 → 2x2; layer 2: 3x3 filter on 2x2 fails
        match derive_shapes(&cfg) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_round_trip_and_comments() {
        let text = "# test net\ninput a=28 b=28 d=1\n\nconv h=5 out=32 stride=1 pad=0 pool=2\nconv h=3 out=64\nfc out=10\n";
        let cfg = ModelConfig::parse(text).unwrap();
        assert_eq!(cfg.layers.len(), 3);
        assert_eq!(cfg.num_classes(), 10);
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("input a=8 b=8 d=1\nconv h=3 out=2 bogus=1\nfc out=2\n", 2),
            ("input a=8 b=8 d=1\nfc out=4\nconv h=3 out=2\nfc out=2\n", 3),
            ("input a=8 b=8 d=1\nconv h=9 out=2\nfc out=2\n", 2),
            ("input a=8 b=8 d=1\nconv h=3 out=0\nfc out=2\n", 2),
            ("input a=8 b=8 d=1\nconv h=3 out=2\n", 2),
            ("conv h=3 out=2\nfc out=2\n", 2),
            ("input a=8 b=8 d=1\nwhat\n", 2),
        ];
        for (text, want) in cases {
            match ModelConfig::parse(text) {
                Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let cfg = ModelConfig::three_layer_cnn((28, 28, 1), 10);
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), param_count(&cfg).unwrap());
        for m in 0..cfg.layers.len() {
            assert!(a.bias(m).iter().all(|&x| x == 0.0));
        }
        assert_ne!(init_params(&cfg, 8).unwrap(), a);
    }

    #[test]
    fn init_weight_scale() {
        let cfg = ModelConfig {
            input: (100, 1, 1),
            layers: vec![LayerSpec::Fc { out_neurons: 10 }],
        };
        let theta = init_params(&cfg, 3).unwrap();
        let w = theta.weights(0).data;
        assert_eq!(w.len(), 1000);
        let mean = w.iter().sum::<f64>() / 1000.0;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        let want = (2.0f64 / 100.0).sqrt();
        assert!((sd - want).abs() < 0.1 * want, "sd {sd} vs {want}");
    }

    #[test]
    fn segment_writes_alias_flat_vector() {
        let cfg = ModelConfig {
            input: (3, 1, 1),
            layers: vec![LayerSpec::Fc { out_neurons: 2 }, LayerSpec::Fc { out_neurons: 2 }],
        };
        let layout = ParamLayout::new(&derive_shapes(&cfg).unwrap());
        let mut theta = ParamVector::zeros(layout);
        theta.weights_mut(1)[3] = 5.0;
        theta.bias_mut(0)[1] = -1.0;
        // layer 0: 2x3 weights + 2 bias = 8 → layer 1 weights start at 8
        assert_eq!(theta.as_slice()[8 + 3], 5.0);
        assert_eq!(theta.as_slice()[6 + 1], -1.0);
        assert_eq!(theta.weights(1).data[3], 5.0);
    }
}
