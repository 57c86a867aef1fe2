//! Dense feed-forward networks with layer-wise adaptive activations.
//!
//! Parameters are stored in one flat vector in a fixed, layer-major order:
//!
//! ```text
//! W_1 (row-major, out x in), b_1, alpha_1, W_2, b_2, alpha_2, ..., W_L, b_L
//! ```
//!
//! Every affine map except the last is followed by `tau(c * alpha_i * z)`,
//! where `c` is a fixed scale and `alpha_i` a trainable slope shared by all
//! neurons of the layer. The last map is linear. This ordering is what the
//! optimizers see and what checkpoints store.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Jet2;
use crate::error::{Error, Result};

/// Pointwise nonlinearity used in hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Swish,
}

impl Activation {
    /// `[tau, tau', tau'', tau''']` at `t`.
    #[inline]
    pub fn derivatives(self, t: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let th = t.tanh();
                let d1 = 1.0 - th * th;
                let d2 = -2.0 * th * d1;
                let d3 = -2.0 * d1 * d1 + 4.0 * th * th * d1;
                [th, d1, d2, d3]
            }
            Activation::Swish => {
                let s = sigmoid(t);
                let s1 = s * (1.0 - s);
                let s2 = s1 * (1.0 - 2.0 * s);
                let s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1;
                [t * s, s + t * s1, 2.0 * s1 + t * s2, 3.0 * s2 + t * s3]
            }
        }
    }

    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Tanh => t.tanh(),
            Activation::Swish => t * sigmoid(t),
        }
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Tanh => f.write_str("tanh"),
            Activation::Swish => f.write_str("swish"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::Configuration(format!("unknown activation `{other}`"))),
        }
    }
}

/// `tau(c * alpha * z)`.
pub fn adaptive_activation(z: f64, scale: f64, slope: f64, kind: Activation) -> f64 {
    kind.apply(scale * slope * z)
}

/// Offsets of one affine map inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub bias: usize,
    /// Present for hidden layers only.
    pub slope: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    scale: f64,
    seed: u64,
    slots: Vec<LayerSlots>,
    values: Vec<f64>,
}

fn layout(layer_sizes: &[usize]) -> (Vec<LayerSlots>, usize) {
    let n_maps = layer_sizes.len() - 1;
    let mut slots = Vec::with_capacity(n_maps);
    let mut offset = 0;
    for m in 0..n_maps {
        let (fan_in, fan_out) = (layer_sizes[m], layer_sizes[m + 1]);
        let weights = offset;
        offset += fan_in * fan_out;
        let bias = offset;
        offset += fan_out;
        let slope = if m + 1 < n_maps {
            offset += 1;
            Some(offset - 1)
        } else {
            None
        };
        slots.push(LayerSlots {
            fan_in,
            fan_out,
            weights,
            bias,
            slope,
        });
    }
    (slots, offset)
}

/// Total trainable parameter count for the given layer sizes.
pub fn parameter_count(layer_sizes: &[usize]) -> usize {
    if layer_sizes.len() < 2 {
        return 0;
    }
    layout(layer_sizes).1
}

impl NetworkParams {
    /// Builds a dense network from an explicit flat parameter vector.
    ///
    /// Only structural checks are made here (at least one affine map, input
    /// dimension 1 or 2, matching length); problem-level invariants live in
    /// [`init_xavier`] and the driver.
    pub fn from_values(
        layer_sizes: &[usize],
        activation: Activation,
        scale: f64,
        seed: u64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Configuration(
                "a network needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Configuration("layer sizes must be positive".into()));
        }
        if !(1..=2).contains(&layer_sizes[0]) {
            return Err(Error::Configuration(format!(
                "input dimension must be 1 or 2, got {}",
                layer_sizes[0]
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Configuration(format!("invalid activation scale {scale}")));
        }
        let (slots, count) = layout(layer_sizes);
        if values.len() != count {
            return Err(Error::Configuration(format!(
                "expected {count} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            scale,
            seed,
            slots,
            values,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn slots(&self) -> &[LayerSlots] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) {
        self.values.copy_from_slice(values);
    }

    /// Row-major weight matrix of affine map `m`.
    pub fn weights(&self, m: usize) -> &[f64] {
        let s = &self.slots[m];
        &self.values[s.weights..s.weights + s.fan_in * s.fan_out]
    }

    pub fn bias(&self, m: usize) -> &[f64] {
        let s = &self.slots[m];
        &self.values[s.bias..s.bias + s.fan_out]
    }

    /// Trainable slope of hidden layer `m`, `None` for the output map.
    pub fn slope(&self, m: usize) -> Option<f64> {
        self.slots[m].slope.map(|i| self.values[i])
    }

    /// Flat indices of all slope parameters.
    pub fn slope_indices(&self) -> Vec<usize> {
        self.slots.iter().filter_map(|s| s.slope).collect()
    }

    /// Plain forward pass (values only).
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n_maps = self.slots.len();
        for (m, s) in self.slots.iter().enumerate() {
            let w = self.weights(m);
            let b = self.bias(m);
            let mut z: Vec<f64> = (0..s.fan_out)
                .map(|j| {
                    let row = &w[j * s.fan_in..(j + 1) * s.fan_in];
                    b[j] + row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect();
            if m + 1 < n_maps {
                let k = self.scale * self.slope(m).unwrap();
                for zj in &mut z {
                    *zj = self.activation.apply(k * *zj);
                }
            }
            a = z;
        }
        a
    }

    /// Writes the checkpoint text format:
    ///
    /// ```text
    /// # phasefield-xpinn network checkpoint v1
    /// layer_sizes 1 10 10 10 2
    /// activation tanh
    /// scale 10
    /// seed 42
    /// count 265
    /// <one value per line, 17 significant digits, canonical order>
    /// ```
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let sizes: Vec<String> = self.layer_sizes.iter().map(|n| n.to_string()).collect();
        let mut text = String::new();
        text.push_str("# phasefield-xpinn network checkpoint v1\n");
        text.push_str(&format!("layer_sizes {}\n", sizes.join(" ")));
        text.push_str(&format!("activation {}\n", self.activation));
        text.push_str(&format!("scale {:.16e}\n", self.scale));
        text.push_str(&format!("seed {}\n", self.seed));
        text.push_str(&format!("count {}\n", self.values.len()));
        for v in &self.values {
            text.push_str(&format!("{v:.16e}\n"));
        }
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text)
    }

    pub fn parse_checkpoint(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            message: msg.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim_start().starts_with('#') && !l.trim().is_empty());
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (i, l) = lines.next().ok_or_else(|| bad(0, "truncated checkpoint"))?;
            let rest = l
                .strip_prefix(key)
                .ok_or_else(|| bad(i + 1, &format!("expected `{key}`")))?;
            Ok((i + 1, rest.trim().to_string()))
        };
        let (ln, sizes) = header("layer_sizes")?;
        let layer_sizes = sizes
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad(ln, "bad layer size")))
            .collect::<Result<Vec<_>>>()?;
        let (_, act) = header("activation")?;
        let activation: Activation = act.parse()?;
        let (ln, scale) = header("scale")?;
        let scale: f64 = scale.parse().map_err(|_| bad(ln, "bad scale"))?;
        let (ln, seed) = header("seed")?;
        let seed: u64 = seed.parse().map_err(|_| bad(ln, "bad seed"))?;
        let (ln, count) = header("count")?;
        let count: usize = count.parse().map_err(|_| bad(ln, "bad count"))?;
        let values = lines
            .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| bad(i + 1, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count {
            return Err(bad(0, "parameter count does not match header"));
        }
        Self::from_values(&layer_sizes, activation, scale, seed, values)
    }
}

/// Xavier-normal initialization: weights ~ N(0, 2 / (fan_in + fan_out)),
/// zero biases, slopes `1 / scale` so that `scale * alpha = 1` at start.
pub fn init_xavier(
    layer_sizes: &[usize],
    activation: Activation,
    scale: f64,
    seed: u64,
) -> Result<NetworkParams> {
    if layer_sizes.len() < 3 {
        return Err(Error::Configuration(format!(
            "network depth must be at least 3 layers, got {}",
            layer_sizes.len()
        )));
    }
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::Configuration(format!(
            "activation scale must be >= 1, got {scale}"
        )));
    }
    let (slots, count) = layout(layer_sizes);
    let mut values = vec![0.0; count];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &slots {
        let std = (2.0 / (s.fan_in + s.fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive standard deviation");
        for v in &mut values[s.weights..s.weights + s.fan_in * s.fan_out] {
            *v = normal.sample(&mut rng);
        }
        if let Some(i) = s.slope {
            values[i] = 1.0 / scale;
        }
    }
    NetworkParams::from_values(layer_sizes, activation, scale, seed, values)
}

/// Hard Dirichlet transforms of the benchmark problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnsatzKind {
    /// `u = (x + 1)(x - 1) u_raw` on `[-1, 1]`.
    Bar1d,
    /// `u = x (1 - x) u_raw`, `v = y (y - 1) v_raw + y du`.
    SenTension,
    /// `u = x u_raw`, `v = y (y - 1) v_raw + y du`.
    EccentricHole,
}

impl AnsatzKind {
    pub fn dim(self) -> usize {
        match self {
            AnsatzKind::Bar1d => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcAnsatz {
    pub kind: AnsatzKind,
    /// Total prescribed displacement at the loaded edge.
    pub applied_displacement: f64,
    /// Factor applied to the raw displacement outputs.
    pub displacement_scale: f64,
}

impl BcAnsatz {
    pub fn new(kind: AnsatzKind, applied_displacement: f64) -> Self {
        Self {
            kind,
            applied_displacement,
            displacement_scale: 1.0,
        }
    }

    pub fn with_scale(mut self, displacement_scale: f64) -> Self {
        self.displacement_scale = displacement_scale;
        self
    }

    /// Multiplier and offset jets `(A, B)` of displacement component `c`,
    /// so that `u_c = A * raw_c + B`.
    fn factors(&self, c: usize, x: &[f64]) -> (Jet2, Jet2) {
        let du = self.applied_displacement;
        let mut a = Jet2::default();
        let mut b = Jet2::default();
        match (self.kind, c) {
            (AnsatzKind::Bar1d, 0) => {
                a.value = x[0] * x[0] - 1.0;
                a.grad[0] = 2.0 * x[0];
                a.hess[0][0] = 2.0;
            }
            (AnsatzKind::SenTension, 0) => {
                a.value = x[0] * (1.0 - x[0]);
                a.grad[0] = 1.0 - 2.0 * x[0];
                a.hess[0][0] = -2.0;
            }
            (AnsatzKind::EccentricHole, 0) => {
                a.value = x[0];
                a.grad[0] = 1.0;
            }
            (AnsatzKind::SenTension | AnsatzKind::EccentricHole, 1) => {
                a.value = x[1] * (x[1] - 1.0);
                a.grad[1] = 2.0 * x[1] - 1.0;
                a.hess[1][1] = 2.0;
                b.value = x[1] * du;
                b.grad[1] = du;
            }
            _ => unreachable!("displacement component {c} out of range"),
        }
        let s = self.displacement_scale;
        a.value *= s;
        for k in 0..2 {
            a.grad[k] *= s;
            for l in 0..2 {
                a.hess[k][l] *= s;
            }
        }
        (a, b)
    }

    /// Maps raw network outputs `[u_raw.., phi]` to constrained fields
    /// `[u.., phi]`; `phi` passes through untouched.
    pub fn apply(&self, x: &[f64], raw: &[Jet2], out: &mut [Jet2]) {
        let d = self.kind.dim();
        for c in 0..d {
            let (a, b) = self.factors(c, x);
            out[c] = a.mul(&raw[c]).add(&b);
        }
        out[d] = raw[d];
    }

    /// Pulls adjoints of constrained fields back to the raw outputs.
    /// The transform is affine in the raw outputs, so this is exact.
    pub fn adjoint(&self, x: &[f64], constrained_bar: &[Jet2], raw_bar: &mut [Jet2]) {
        let d = self.kind.dim();
        for c in 0..d {
            let (a, _) = self.factors(c, x);
            raw_bar[c] = Jet2::mul_adjoint(&a, &constrained_bar[c]);
        }
        raw_bar[d] = constrained_bar[d];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{eval_jet2, DerivativeOrder};

    #[test]
    fn table_architecture_parameter_count() {
        // 1*10+10 + 10*10+10 + 10*10+10 + 10*2+2 + 3 slopes
        assert_eq!(parameter_count(&[1, 10, 10, 10, 2]), 265);
        let p = init_xavier(&[1, 10, 10, 10, 2], Activation::Tanh, 10.0, 7).unwrap();
        assert_eq!(p.len(), 265);
        assert_eq!(p.slope_indices().len(), 3);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = init_xavier(&[2, 20, 20, 3], Activation::Swish, 5.0, 99).unwrap();
        let b = init_xavier(&[2, 20, 20, 3], Activation::Swish, 5.0, 99).unwrap();
        let bits = |p: &NetworkParams| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = init_xavier(&[2, 20, 20, 3], Activation::Swish, 5.0, 100).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn xavier_variance_of_square_layer() {
        let p = init_xavier(&[2, 50, 50, 3], Activation::Tanh, 1.0, 3).unwrap();
        let w = p.weights(1);
        assert_eq!(w.len(), 2500);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var - 0.02).abs() < 0.2 * 0.02, "variance {var}");
        assert!(p.bias(1).iter().all(|&b| b == 0.0));
        assert!(p.slope_indices().iter().all(|&i| p.values()[i] == 1.0));
    }

    #[test]
    fn too_shallow_network_is_rejected() {
        let err = init_xavier(&[1, 2], Activation::Tanh, 1.0, 0).unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn activation_values() {
        assert_eq!(adaptive_activation(0.0, 3.0, 0.7, Activation::Tanh), 0.0);
        assert_eq!(adaptive_activation(0.0, 3.0, 0.7, Activation::Swish), 0.0);
        let v = adaptive_activation(0.3, 10.0, 0.1, Activation::Tanh);
        assert!((v - 0.291_312_612_451_591).abs() < 1e-12);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for kind in [Activation::Tanh, Activation::Swish] {
            for &t in &[-2.3, -0.4, 0.0, 0.9, 3.1] {
                let d = kind.derivatives(t);
                let h = 1e-5;
                let p = kind.derivatives(t + h);
                let m = kind.derivatives(t - h);
                for k in 0..3 {
                    let fd = (p[k] - m[k]) / (2.0 * h);
                    assert!((fd - d[k + 1]).abs() < 1e-8, "{kind} order {} at {t}", k + 1);
                }
            }
        }
    }

    #[test]
    fn slope_effect_at_origin_is_exact_for_tanh() {
        // d/dz tau(c a z) at z = 0 is c a tau'(0) = c a
        let (c, a) = (10.0, 0.37);
        let p = NetworkParams::from_values(
            &[1, 1, 1],
            Activation::Tanh,
            c,
            0,
            vec![1.0, 0.0, a, 1.0, 0.0],
        )
        .unwrap();
        let j = eval_jet2(&p, &[0.0], DerivativeOrder::Hessian).unwrap();
        assert_eq!(j[0].grad[0], c * a);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_xavier(&[2, 7, 5, 3], Activation::Swish, 4.0, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.txt");
        p.save(&path).unwrap();
        let q = NetworkParams::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn ansatz_boundary_values() {
        let raw = [
            Jet2::constant(0.8),
            Jet2::constant(-1.7),
            Jet2::constant(0.3),
        ];
        let mut out = [Jet2::default(); 3];
        let bar = BcAnsatz::new(AnsatzKind::Bar1d, 0.0);
        bar.apply(&[-1.0], &raw[1..], &mut out[..2]);
        assert_eq!(out[0].value, 0.0);
        let sen = BcAnsatz::new(AnsatzKind::SenTension, 0.004);
        sen.apply(&[0.37, 1.0], &raw, &mut out);
        assert_eq!(out[1].value, 0.004);
        assert_eq!(out[2].value, 0.3);
        sen.apply(&[0.0, 0.61], &raw, &mut out);
        assert_eq!(out[0].value, 0.0);
        let hole = BcAnsatz::new(AnsatzKind::EccentricHole, 0.002);
        hole.apply(&[0.2, 0.0], &raw, &mut out);
        assert_eq!(out[1].value, 0.0);
    }

    #[test]
    fn output_scale_multiplies_the_free_part_only() {
        let mut raw = [Jet2::constant(0.8), Jet2::constant(-1.7), Jet2::constant(0.3)];
        raw[1].grad = [0.5, -0.25];
        let x = [0.37, 0.42];
        let plain = BcAnsatz::new(AnsatzKind::SenTension, 0.004);
        let scaled = plain.with_scale(1e-2);
        let zero = [Jet2::default(), Jet2::default(), raw[2]];
        let (mut a, mut b, mut c) = ([Jet2::default(); 3], [Jet2::default(); 3], [Jet2::default(); 3]);
        plain.apply(&x, &raw, &mut a);
        scaled.apply(&x, &raw, &mut b);
        plain.apply(&x, &zero, &mut c);
        for k in 0..2 {
            let expect = c[k].value + 1e-2 * (a[k].value - c[k].value);
            assert!((b[k].value - expect).abs() < 1e-15);
            for d in 0..2 {
                let expect = c[k].grad[d] + 1e-2 * (a[k].grad[d] - c[k].grad[d]);
                assert!((b[k].grad[d] - expect).abs() < 1e-15);
            }
        }
        assert_eq!(b[2].value, a[2].value);
    }
}
