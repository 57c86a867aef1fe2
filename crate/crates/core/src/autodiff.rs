//! Spatial jets and parameter gradients for dense networks.
//!
//! Spatial derivatives of the network outputs (value, gradient, Hessian) are
//! carried forward as second-order jets. Parameter gradients of any loss that
//! is a sum of pointwise functions of those jets are then obtained by
//! reverse accumulation over the recorded jet computation, which yields the
//! mixed paths `d/dtheta grad u` and `d/dtheta lap phi` exactly.
//!
//! Jet components are stored component-major per layer:
//! `[value | d/dx_k (k < d) | d2/dx_k dx_l (k <= l)]`.

use crate::error::{Error, Result};
use crate::network::NetworkParams;

/// Value, spatial gradient and spatial Hessian of a scalar field at a point.
///
/// Entries beyond the spatial dimension are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

impl Jet2 {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            ..Self::default()
        }
    }

    pub fn add(&self, o: &Jet2) -> Jet2 {
        let mut r = *self;
        r.value += o.value;
        for k in 0..2 {
            r.grad[k] += o.grad[k];
            for l in 0..2 {
                r.hess[k][l] += o.hess[k][l];
            }
        }
        r
    }

    /// Product rule up to second order.
    pub fn mul(&self, o: &Jet2) -> Jet2 {
        let mut r = Jet2 {
            value: self.value * o.value,
            ..Jet2::default()
        };
        for k in 0..2 {
            r.grad[k] = self.grad[k] * o.value + self.value * o.grad[k];
            for l in 0..2 {
                r.hess[k][l] = self.hess[k][l] * o.value
                    + self.grad[k] * o.grad[l]
                    + o.grad[k] * self.grad[l]
                    + self.value * o.hess[k][l];
            }
        }
        r
    }

    /// Adjoint of `o -> a.mul(o)` applied to the output adjoint `bar`.
    pub fn mul_adjoint(a: &Jet2, bar: &Jet2) -> Jet2 {
        let mut r = Jet2::default();
        r.value = bar.value * a.value;
        for k in 0..2 {
            r.value += bar.grad[k] * a.grad[k];
            r.grad[k] = bar.grad[k] * a.value;
            for l in 0..2 {
                r.value += bar.hess[k][l] * a.hess[k][l];
                r.grad[k] += (bar.hess[l][k] + bar.hess[k][l]) * a.grad[l];
                r.hess[k][l] = bar.hess[k][l] * a.value;
            }
        }
        r
    }

    pub fn laplacian(&self) -> f64 {
        self.hess[0][0] + self.hess[1][1]
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|g| g.is_finite())
            && self.hess.iter().flatten().all(|h| h.is_finite())
    }
}

/// Highest spatial derivative carried through a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivativeOrder {
    Value = 0,
    Gradient = 1,
    Hessian = 2,
}

impl DerivativeOrder {
    pub fn from_u8(order: u8) -> Result<Self> {
        match order {
            0 => Ok(Self::Value),
            1 => Ok(Self::Gradient),
            2 => Ok(Self::Hessian),
            o => Err(Error::Contract(format!("derivative order {o} not supported"))),
        }
    }
}

/// Flat gradient aligned with [`NetworkParams::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient(pub Vec<f64>);

impl std::ops::Deref for ParamGradient {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Components {
    dim: usize,
    order: DerivativeOrder,
    count: usize,
    /// Unique Hessian index pairs, in storage order.
    pairs: [(usize, usize); 3],
    n_pairs: usize,
}

impl Components {
    fn new(dim: usize, order: DerivativeOrder) -> Self {
        let n_pairs = match order {
            DerivativeOrder::Hessian => dim * (dim + 1) / 2,
            _ => 0,
        };
        let n_grad = if order >= DerivativeOrder::Gradient { dim } else { 0 };
        let pairs = if dim == 1 {
            [(0, 0), (0, 0), (0, 0)]
        } else {
            [(0, 0), (0, 1), (1, 1)]
        };
        Self {
            dim,
            order,
            count: 1 + n_grad + n_pairs,
            pairs,
            n_pairs,
        }
    }

    fn n_grad(&self) -> usize {
        if self.order >= DerivativeOrder::Gradient {
            self.dim
        } else {
            0
        }
    }

    #[inline]
    fn grad(&self, k: usize) -> usize {
        1 + k
    }

    #[inline]
    fn pair(&self, p: usize) -> usize {
        1 + self.n_grad() + p
    }
}

/// Recorded jet forward pass, reusable across points.
///
/// `forward` overwrites the record; `backward` consumes the latest record.
#[derive(Clone, Debug)]
pub struct JetTape {
    comps: Components,
    /// `acts[m]`: input jets of affine map `m`; the last entry holds the outputs.
    acts: Vec<Vec<f64>>,
    /// Pre-activation jets of hidden maps.
    pre: Vec<Vec<f64>>,
    adj_a: Vec<f64>,
    adj_z: Vec<f64>,
    outputs: Vec<Jet2>,
}

impl JetTape {
    pub fn new(params: &NetworkParams, order: DerivativeOrder) -> Self {
        let sizes = params.layer_sizes();
        let comps = Components::new(sizes[0], order);
        let widest = *sizes.iter().max().unwrap();
        Self {
            comps,
            acts: sizes.iter().map(|&n| vec![0.0; comps.count * n]).collect(),
            pre: sizes[1..].iter().map(|&n| vec![0.0; comps.count * n]).collect(),
            adj_a: vec![0.0; comps.count * widest],
            adj_z: vec![0.0; comps.count * widest],
            outputs: vec![Jet2::default(); *sizes.last().unwrap()],
        }
    }

    pub fn order(&self) -> DerivativeOrder {
        self.comps.order
    }

    pub fn outputs(&self) -> &[Jet2] {
        &self.outputs
    }

    /// Jet forward pass at `x`; returns the output jets.
    pub fn forward(&mut self, params: &NetworkParams, x: &[f64]) -> Result<&[Jet2]> {
        let c = self.comps;
        let d = params.input_dim();
        if x.len() != d {
            return Err(Error::InputShape {
                expected: d,
                got: x.len(),
            });
        }
        // seed input jets: value x_i, d x_i / d x_k = delta_ik
        let a0 = &mut self.acts[0];
        a0.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            a0[i] = x[i];
            if c.order >= DerivativeOrder::Gradient {
                a0[c.grad(i) * d + i] = 1.0;
            }
        }

        let n_maps = params.slots().len();
        let activation = params.activation();
        for m in 0..n_maps {
            let slot = params.slots()[m];
            let (fan_in, fan_out) = (slot.fan_in, slot.fan_out);
            let w = params.weights(m);
            let b = params.bias(m);
            let (lo, hi) = self.acts.split_at_mut(m + 1);
            let a = &lo[m];
            let z = &mut self.pre[m];
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                for comp in 0..c.count {
                    let src = &a[comp * fan_in..(comp + 1) * fan_in];
                    let mut s = 0.0;
                    for i in 0..fan_in {
                        s += row[i] * src[i];
                    }
                    z[comp * fan_out + j] = s;
                }
                z[j] += b[j];
            }
            let out = &mut hi[0];
            if m + 1 == n_maps {
                out.copy_from_slice(&z[..c.count * fan_out]);
                continue;
            }
            let s = params.scale() * params.slope(m).unwrap();
            for j in 0..fan_out {
                let z0 = z[j];
                let [t0, t1, t2, _] = activation.derivatives(s * z0);
                out[j] = t0;
                for k in 0..c.n_grad() {
                    out[c.grad(k) * fan_out + j] = t1 * s * z[c.grad(k) * fan_out + j];
                }
                for p in 0..c.n_pairs {
                    let (k, l) = c.pairs[p];
                    let zk = z[c.grad(k) * fan_out + j];
                    let zl = z[c.grad(l) * fan_out + j];
                    let zkl = z[c.pair(p) * fan_out + j];
                    out[c.pair(p) * fan_out + j] = t2 * s * s * zk * zl + t1 * s * zkl;
                }
            }
        }

        let y = &self.acts[n_maps];
        let n_out = self.outputs.len();
        for (o, jet) in self.outputs.iter_mut().enumerate() {
            *jet = Jet2::default();
            jet.value = y[o];
            for k in 0..c.n_grad() {
                jet.grad[k] = y[c.grad(k) * n_out + o];
            }
            for p in 0..c.n_pairs {
                let (k, l) = c.pairs[p];
                let v = y[c.pair(p) * n_out + o];
                jet.hess[k][l] = v;
                jet.hess[l][k] = v;
            }
        }
        Ok(&self.outputs)
    }

    /// Accumulates `d loss / d theta` into `grad`, given the loss adjoints of
    /// the output jets of the most recent forward pass.
    ///
    /// Hessian adjoints are taken per matrix entry; the off-diagonal entries
    /// of `out_bar[o].hess` are summed onto the single stored component.
    pub fn backward(&mut self, params: &NetworkParams, out_bar: &[Jet2], grad: &mut [f64]) {
        let c = self.comps;
        let n_maps = params.slots().len();
        let n_out = params.output_dim();
        let activation = params.activation();

        {
        let abar = &mut self.adj_a;
        for (o, bar) in out_bar.iter().enumerate().take(n_out) {
            abar[o] = bar.value;
            for k in 0..c.n_grad() {
                abar[c.grad(k) * n_out + o] = bar.grad[k];
            }
            for p in 0..c.n_pairs {
                let (k, l) = c.pairs[p];
                abar[c.pair(p) * n_out + o] = if k == l {
                    bar.hess[k][k]
                } else {
                    bar.hess[k][l] + bar.hess[l][k]
                };
            }
        }
        }

        for m in (0..n_maps).rev() {
            let slot = params.slots()[m];
            let (fan_in, fan_out) = (slot.fan_in, slot.fan_out);
            let abar = &mut self.adj_a;
            let zbar = &mut self.adj_z;
            if m + 1 == n_maps {
                zbar[..c.count * fan_out].copy_from_slice(&abar[..c.count * fan_out]);
            } else {
                let z = &self.pre[m];
                let s = params.scale() * params.slope(m).unwrap();
                let mut sbar = 0.0;
                for j in 0..fan_out {
                    let z0 = z[j];
                    let [_, t1, t2, t3] = activation.derivatives(s * z0);
                    let h0 = abar[j];
                    let mut z0bar = h0 * t1 * s;
                    sbar += h0 * t1 * z0;
                    for k in 0..c.n_grad() {
                        let idx = c.grad(k) * fan_out + j;
                        let hg = abar[idx];
                        let zk = z[idx];
                        z0bar += hg * t2 * s * s * zk;
                        zbar[idx] = hg * t1 * s;
                        sbar += hg * (t2 * z0 * s * zk + t1 * zk);
                    }
                    for p in 0..c.n_pairs {
                        let (k, l) = c.pairs[p];
                        let idx = c.pair(p) * fan_out + j;
                        let hh = abar[idx];
                        let zk = z[c.grad(k) * fan_out + j];
                        let zl = z[c.grad(l) * fan_out + j];
                        let zkl = z[idx];
                        z0bar += hh * (t3 * s * s * s * zk * zl + t2 * s * s * zkl);
                        zbar[c.grad(k) * fan_out + j] += hh * t2 * s * s * zl;
                        zbar[c.grad(l) * fan_out + j] += hh * t2 * s * s * zk;
                        zbar[idx] = hh * t1 * s;
                        sbar += hh
                            * (t3 * z0 * s * s * zk * zl
                                + 2.0 * t2 * s * zk * zl
                                + t2 * z0 * s * zkl
                                + t1 * zkl);
                    }
                    zbar[j] = z0bar;
                }
                grad[slot.slope.unwrap()] += params.scale() * sbar;
            }

            // affine map adjoints
            let a = &self.acts[m];
            let w = params.weights(m);
            let gw = &mut grad[slot.weights..slot.weights + fan_in * fan_out];
            for j in 0..fan_out {
                let row = &mut gw[j * fan_in..(j + 1) * fan_in];
                for comp in 0..c.count {
                    let zb = zbar[comp * fan_out + j];
                    if zb == 0.0 {
                        continue;
                    }
                    let src = &a[comp * fan_in..(comp + 1) * fan_in];
                    for i in 0..fan_in {
                        row[i] += zb * src[i];
                    }
                }
            }
            for j in 0..fan_out {
                grad[slot.bias + j] += zbar[j];
            }
            if m > 0 {
                abar[..c.count * fan_in].iter_mut().for_each(|v| *v = 0.0);
                for j in 0..fan_out {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    for comp in 0..c.count {
                        let zb = zbar[comp * fan_out + j];
                        if zb == 0.0 {
                            continue;
                        }
                        let dst = &mut abar[comp * fan_in..(comp + 1) * fan_in];
                        for i in 0..fan_in {
                            dst[i] += zb * row[i];
                        }
                    }
                }
            }
        }
    }
}

/// Output jets of the network at `x`. With `Value` the gradient and Hessian
/// entries are zero; with `Gradient` the Hessian is zero.
pub fn eval_jet2(params: &NetworkParams, x: &[f64], order: DerivativeOrder) -> Result<Vec<Jet2>> {
    let mut tape = JetTape::new(params, order);
    Ok(tape.forward(params, x)?.to_vec())
}

/// Gradient of `sum_k local(k, x_k, jets(x_k))` with respect to all network
/// parameters. `local` returns the contribution of one point and the adjoint
/// of that contribution with respect to each output jet.
///
/// Contributions are summed in point order.
pub fn loss_param_gradient<F>(
    params: &NetworkParams,
    points: &[Vec<f64>],
    order: DerivativeOrder,
    mut local: F,
) -> Result<(f64, ParamGradient)>
where
    F: FnMut(usize, &[f64], &[Jet2]) -> (f64, Vec<Jet2>),
{
    let mut tape = JetTape::new(params, order);
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for (k, x) in points.iter().enumerate() {
        let jets = tape.forward(params, x)?;
        let (value, bar) = local(k, x, jets);
        if !value.is_finite() {
            return Err(Error::numerical(x, "non-finite loss contribution"));
        }
        total += value;
        tape.backward(params, &bar, &mut grad);
    }
    Ok((total, ParamGradient(grad)))
}

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient(theta)?.0)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences, `|g - fd| / (|g| + |fd| + eps)`, over all parameters.
/// Non-finite evaluations count as `+inf`; an empty parameter set gives 0.
pub fn fd_check<O: Objective + ?Sized>(objective: &O, theta: &[f64], step: f64) -> f64 {
    let all: Vec<usize> = (0..theta.len()).collect();
    fd_check_indices(objective, theta, step, &all)
}

/// [`fd_check`] restricted to the parameters listed in `indices`.
pub fn fd_check_indices<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    step: f64,
    indices: &[usize],
) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = match objective.value_and_gradient(theta) {
        Ok((_, g)) => g,
        Err(_) => return f64::INFINITY,
    };
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        probe[i] = theta[i] + step;
        let fp = objective.value(&probe);
        probe[i] = theta[i] - step;
        let fm = objective.value(&probe);
        probe[i] = theta[i];
        let rel = match (fp, fm) {
            (Ok(fp), Ok(fm)) => {
                let fd = (fp - fm) / (2.0 * step);
                let a = analytic[i];
                let r = (a - fd).abs() / (a.abs() + fd.abs() + f64::EPSILON);
                if r.is_finite() {
                    r
                } else {
                    f64::INFINITY
                }
            }
            _ => f64::INFINITY,
        };
        worst = worst.max(rel);
    }
    worst
}
