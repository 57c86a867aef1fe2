//! Phase-field fracture energy: spectral strain split, degradation, crack
//! density, strain history and the assembled multi-network loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DerivativeOrder, Jet2, JetTape};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Subdomain, Tensor2};
use crate::network::{BcAnsatz, NetworkParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PhaseFieldOrder {
    Second,
    Fourth,
}

impl TryFrom<u8> for PhaseFieldOrder {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            2 => Ok(Self::Second),
            4 => Ok(Self::Fourth),
            _ => Err(format!("phase-field order must be 2 or 4, got {v}")),
        }
    }
}

impl From<PhaseFieldOrder> for u8 {
    fn from(o: PhaseFieldOrder) -> u8 {
        match o {
            PhaseFieldOrder::Second => 2,
            PhaseFieldOrder::Fourth => 4,
        }
    }
}

impl PhaseFieldOrder {
    /// Derivative order the network jets must carry.
    pub fn derivative_order(self) -> DerivativeOrder {
        match self {
            Self::Second => DerivativeOrder::Gradient,
            Self::Fourth => DerivativeOrder::Hessian,
        }
    }
}

/// Isotropic linear-elastic material with phase-field parameters.
/// Units: kN, mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialModel {
    pub lambda: f64,
    pub mu: f64,
    /// Critical energy release rate, kN/mm.
    pub gc: f64,
    /// Length scale, mm.
    pub l0: f64,
    pub order: PhaseFieldOrder,
}

impl MaterialModel {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lambda", self.lambda >= 0.0, "must be non-negative"),
            ("mu", self.mu > 0.0, "must be positive"),
            ("gc", self.gc > 0.0, "must be positive"),
            ("l0", self.l0 > 0.0, "must be positive"),
        ];
        for (field, ok, msg) in checks {
            if !ok {
                return Err(Error::validation(field, msg));
            }
        }
        Ok(())
    }
}

/// Small-strain tensor from a displacement gradient `grad_u[i][k] = du_i/dx_k`.
pub fn strain(grad_u: &Tensor2, dim: usize) -> Tensor2 {
    let mut e = [[0.0; 2]; 2];
    for i in 0..dim {
        for k in 0..dim {
            e[i][k] = 0.5 * (grad_u[i][k] + grad_u[k][i]);
        }
    }
    e
}

/// Tension/compression parts of the elastic energy and their stresses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    pub psi_plus: f64,
    pub psi_minus: f64,
    pub sigma_plus: Tensor2,
    pub sigma_minus: Tensor2,
}

fn pos(v: f64) -> f64 {
    v.max(0.0)
}

fn neg(v: f64) -> f64 {
    v.min(0.0)
}

/// Eigenvalues (descending) and the unit eigenvector of the larger one for a
/// symmetric 2x2 tensor.
pub fn sym_eigen(e: &Tensor2) -> ([f64; 2], [f64; 2]) {
    let m = 0.5 * (e[0][0] + e[1][1]);
    let d = 0.5 * (e[0][0] - e[1][1]);
    let r = d.hypot(e[0][1]);
    let theta = if r == 0.0 { 0.0 } else { 0.5 * e[0][1].atan2(d) };
    ([m + r, m - r], [theta.cos(), theta.sin()])
}

/// Spectral split of the elastic energy density,
/// `psi± = lambda/2 <tr e>±^2 + mu sum <e_i>±^2`.
pub fn split_energy(eps: &Tensor2, dim: usize, m: &MaterialModel) -> Split {
    if dim == 1 {
        let e = eps[0][0];
        let k = 0.5 * m.lambda + m.mu;
        let s = m.lambda + 2.0 * m.mu;
        let mut sp = [[0.0; 2]; 2];
        let mut sm = [[0.0; 2]; 2];
        sp[0][0] = s * pos(e);
        sm[0][0] = s * neg(e);
        return Split {
            psi_plus: k * pos(e).powi(2),
            psi_minus: k * neg(e).powi(2),
            sigma_plus: sp,
            sigma_minus: sm,
        };
    }
    let tr = eps[0][0] + eps[1][1];
    let (ev, n1) = sym_eigen(eps);
    let n2 = [-n1[1], n1[0]];
    let proj = |n: [f64; 2]| [[n[0] * n[0], n[0] * n[1]], [n[1] * n[0], n[1] * n[1]]];
    let (p1, p2) = (proj(n1), proj(n2));
    let part = |f: fn(f64) -> f64| {
        let psi = 0.5 * m.lambda * f(tr).powi(2) + m.mu * (f(ev[0]).powi(2) + f(ev[1]).powi(2));
        let mut sig = [[0.0; 2]; 2];
        for i in 0..2 {
            for k in 0..2 {
                let iso = if i == k { m.lambda * f(tr) } else { 0.0 };
                sig[i][k] = iso + 2.0 * m.mu * (f(ev[0]) * p1[i][k] + f(ev[1]) * p2[i][k]);
            }
        }
        (psi, sig)
    };
    let (psi_plus, sigma_plus) = part(pos);
    let (psi_minus, sigma_minus) = part(neg);
    Split {
        psi_plus,
        psi_minus,
        sigma_plus,
        sigma_minus,
    }
}

/// Undegraded elastic energy density `lambda/2 (tr e)^2 + mu e:e`.
pub fn elastic_energy(eps: &Tensor2, dim: usize, m: &MaterialModel) -> f64 {
    let tr: f64 = (0..dim).map(|i| eps[i][i]).sum();
    let mut ee = 0.0;
    for i in 0..dim {
        for k in 0..dim {
            ee += eps[i][k] * eps[i][k];
        }
    }
    0.5 * m.lambda * tr * tr + m.mu * ee
}

/// `g(phi) = (1 - phi)^2` and its derivative.
pub fn degradation(phi: f64) -> (f64, f64) {
    let s = 1.0 - phi;
    (s * s, -2.0 * s)
}

/// `g(phi) sigma+ + sigma-`.
pub fn degraded_stress(eps: &Tensor2, phi: f64, dim: usize, m: &MaterialModel) -> Tensor2 {
    let s = split_energy(eps, dim, m);
    let (g, _) = degradation(phi);
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            out[i][k] = g * s.sigma_plus[i][k] + s.sigma_minus[i][k];
        }
    }
    out
}

/// Regularized crack surface density,
/// `1/(2 l0) (phi^2 + l0^2/2 |grad phi|^2 [+ l0^4/16 (lap phi)^2])`.
pub fn crack_density(
    phi: f64,
    grad_phi: &[f64],
    lap_phi: Option<f64>,
    l0: f64,
    order: PhaseFieldOrder,
) -> Result<f64> {
    let g2: f64 = grad_phi.iter().map(|g| g * g).sum();
    let mut v = phi * phi + 0.5 * l0 * l0 * g2;
    if order == PhaseFieldOrder::Fourth {
        let lap = lap_phi.ok_or_else(|| {
            Error::Contract("fourth-order crack density needs the Laplacian of phi".into())
        })?;
        v += l0.powi(4) / 16.0 * lap * lap;
    }
    Ok(v / (2.0 * l0))
}

/// How the initial strain history encodes the pre-existing crack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HistorySeed {
    None,
    /// `magnitude` within distance `l0` of the crack, 0 elsewhere.
    Step { magnitude: f64 },
    /// `B Gc / (2 l0) (1 - 2 d / l0)` within `l0 / 2`, 0 elsewhere.
    Linear { b: f64 },
}

/// Initial history at distance `d` from the crack.
pub fn history_init(d: f64, seed: HistorySeed, m: &MaterialModel) -> f64 {
    match seed {
        HistorySeed::None => 0.0,
        HistorySeed::Step { magnitude } => {
            if d <= m.l0 {
                magnitude
            } else {
                0.0
            }
        }
        HistorySeed::Linear { b } => {
            if d <= 0.5 * m.l0 {
                b * m.gc / (2.0 * m.l0) * (1.0 - 2.0 * d / m.l0)
            } else {
                0.0
            }
        }
    }
}

pub fn history_update(previous: f64, psi_plus: f64) -> f64 {
    previous.max(psi_plus)
}

/// Distributed load doing work against the displacement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BodyForce {
    None,
    /// `f_x = amplitude sin(pi x)`.
    SineX { amplitude: f64 },
}

impl BodyForce {
    pub fn at(&self, x: &[f64]) -> [f64; 2] {
        match *self {
            BodyForce::None => [0.0; 2],
            BodyForce::SineX { amplitude } => [amplitude * (std::f64::consts::PI * x[0]).sin(), 0.0],
        }
    }
}

/// Constrained fields and their derivatives at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointFields {
    pub u: [f64; 2],
    pub grad_u: Tensor2,
    pub phi: f64,
    pub grad_phi: [f64; 2],
    pub lap_phi: f64,
}

impl PointFields {
    pub fn from_jets(jets: &[Jet2], dim: usize) -> Self {
        let mut f = PointFields::default();
        for c in 0..dim {
            f.u[c] = jets[c].value;
            for k in 0..dim {
                f.grad_u[c][k] = jets[c].grad[k];
            }
        }
        let p = &jets[dim];
        f.phi = p.value;
        f.grad_phi = p.grad;
        f.lap_phi = (0..dim).map(|k| p.hess[k][k]).sum();
        f
    }

    pub fn strain(&self, dim: usize) -> Tensor2 {
        strain(&self.grad_u, dim)
    }
}

/// Evaluates the constrained fields of one network at `x`.
pub fn evaluate_fields(
    params: &NetworkParams,
    ansatz: &BcAnsatz,
    x: &[f64],
    order: DerivativeOrder,
) -> Result<PointFields> {
    let mut tape = JetTape::new(params, order);
    evaluate_with(&mut tape, params, ansatz, x)
}

pub fn evaluate_with(
    tape: &mut JetTape,
    params: &NetworkParams,
    ansatz: &BcAnsatz,
    x: &[f64],
) -> Result<PointFields> {
    let dim = ansatz.kind.dim();
    let raw = tape.forward(params, &x[..dim])?;
    let mut c = [Jet2::default(); 3];
    ansatz.apply(x, raw, &mut c[..dim + 1]);
    Ok(PointFields::from_jets(&c[..dim + 1], dim))
}

/// Energy density at one point and its adjoint with respect to the
/// constrained field jets `[u.., phi]`:
/// `g psi+ + psi- + Gc gamma + g H - f.u`.
pub fn energy_density(
    fields: &[Jet2],
    x: &[f64],
    history: f64,
    m: &MaterialModel,
    body: &BodyForce,
    dim: usize,
) -> Result<(f64, [Jet2; 3])> {
    let pf = PointFields::from_jets(fields, dim);
    let eps = pf.strain(dim);
    let split = split_energy(&eps, dim, m);
    let (g, dg) = degradation(pf.phi);
    let lap = (m.order == PhaseFieldOrder::Fourth).then_some(pf.lap_phi);
    let gamma = crack_density(pf.phi, &pf.grad_phi[..dim], lap, m.l0, m.order)?;
    let f = body.at(x);
    let work: f64 = (0..dim).map(|c| f[c] * pf.u[c]).sum();
    let value = g * split.psi_plus + split.psi_minus + m.gc * gamma + g * history - work;

    let mut bar = [Jet2::default(); 3];
    for c in 0..dim {
        bar[c].value = -f[c];
        for k in 0..dim {
            bar[c].grad[k] = g * split.sigma_plus[c][k] + split.sigma_minus[c][k];
        }
    }
    let p = &mut bar[dim];
    p.value = dg * (split.psi_plus + history) + m.gc * pf.phi / m.l0;
    for k in 0..dim {
        p.grad[k] = 0.5 * m.gc * m.l0 * pf.grad_phi[k];
    }
    if m.order == PhaseFieldOrder::Fourth {
        let l = m.gc * m.l0.powi(3) / 16.0 * pf.lap_phi;
        for k in 0..dim {
            p.hess[k][k] = l;
        }
    }
    Ok((value, bar))
}

/// Interface penalty weights for displacement and phase-field continuity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub displacement: f64,
    pub phase_field: f64,
}

/// Problem data shared by all loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub material: MaterialModel,
    pub ansatz: BcAnsatz,
    pub body_force: BodyForce,
    pub penalties: PenaltyWeights,
}

impl LossTerms {
    pub fn dim(&self) -> usize {
        self.ansatz.kind.dim()
    }
}

/// Quadrature of the energy density over one subdomain. When `grad` is
/// given, the parameter gradient is accumulated into it.
pub fn interior_loss(
    sub: &Subdomain,
    params: &NetworkParams,
    terms: &LossTerms,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let dim = terms.dim();
    let mut tape = JetTape::new(params, terms.material.order.derivative_order());
    let mut total = 0.0;
    let mut c = [Jet2::default(); 3];
    let mut raw_bar = [Jet2::default(); 3];
    for p in sub.quadrature_points() {
        let x = &p.x[..dim];
        let raw = tape.forward(params, x)?;
        terms.ansatz.apply(&p.x, raw, &mut c[..dim + 1]);
        let (e, mut bar) = energy_density(
            &c[..dim + 1],
            &p.x,
            p.history,
            &terms.material,
            &terms.body_force,
            dim,
        )?;
        if !e.is_finite() {
            return Err(Error::numerical(x, "non-finite energy density"));
        }
        total += p.w * e;
        if let Some(g) = grad.as_deref_mut() {
            for b in &mut bar[..dim + 1] {
                scale_jet(b, p.w);
            }
            terms.ansatz.adjoint(&p.x, &bar[..dim + 1], &mut raw_bar[..dim + 1]);
            tape.backward(params, &raw_bar[..dim + 1], g);
        }
    }
    Ok(total)
}

fn scale_jet(j: &mut Jet2, s: f64) {
    j.value *= s;
    for k in 0..2 {
        j.grad[k] *= s;
        for l in 0..2 {
            j.hess[k][l] *= s;
        }
    }
}

/// Continuity penalty `W1/N sum |u_a - u_b|^2 + W2/N sum (phi_a - phi_b)^2`
/// over the collocation points of one interface.
pub fn interface_loss(
    points: &[[f64; 2]],
    params_a: &NetworkParams,
    params_b: &NetworkParams,
    terms: &LossTerms,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Configuration(
            "interface has no collocation points".into(),
        ));
    }
    let dim = terms.dim();
    let n = points.len() as f64;
    let w = |c: usize| {
        if c < dim {
            terms.penalties.displacement
        } else {
            terms.penalties.phase_field
        }
    };
    let mut ta = JetTape::new(params_a, DerivativeOrder::Value);
    let mut tb = JetTape::new(params_b, DerivativeOrder::Value);
    let mut grads = grads;
    let mut total = 0.0;
    let mut ca = [Jet2::default(); 3];
    let mut cb = [Jet2::default(); 3];
    for x in points {
        let ra = ta.forward(params_a, &x[..dim])?;
        terms.ansatz.apply(x, ra, &mut ca[..dim + 1]);
        let rb = tb.forward(params_b, &x[..dim])?;
        terms.ansatz.apply(x, rb, &mut cb[..dim + 1]);
        let mut bar_a = [Jet2::default(); 3];
        let mut bar_b = [Jet2::default(); 3];
        for c in 0..=dim {
            let diff = ca[c].value - cb[c].value;
            total += w(c) / n * diff * diff;
            bar_a[c].value = 2.0 * w(c) / n * diff;
            bar_b[c].value = -bar_a[c].value;
        }
        if !total.is_finite() {
            return Err(Error::numerical(&x[..dim], "non-finite interface penalty"));
        }
        if let Some((ga, gb)) = grads.as_mut() {
            let mut raw = [Jet2::default(); 3];
            terms.ansatz.adjoint(x, &bar_a[..dim + 1], &mut raw[..dim + 1]);
            ta.backward(params_a, &raw[..dim + 1], ga);
            terms.ansatz.adjoint(x, &bar_b[..dim + 1], &mut raw[..dim + 1]);
            tb.backward(params_b, &raw[..dim + 1], gb);
        }
    }
    Ok(total)
}

/// Loss contributions of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub interior: Vec<f64>,
    pub interface: Vec<f64>,
    pub regularization: f64,
}

/// Full loss over all subdomains and interfaces plus `gamma |theta|^2`.
///
/// Subdomain and interface terms are evaluated in parallel and reduced in a
/// fixed order, so results do not depend on the thread count. When `grads`
/// is given it must hold one zeroed buffer per network.
pub fn total_loss(
    mesh: &Mesh,
    networks: &[NetworkParams],
    terms: &LossTerms,
    regularization: f64,
    grads: Option<&mut [Vec<f64>]>,
) -> Result<LossBreakdown> {
    let want = grads.is_some();
    let interior: Vec<Result<(f64, Option<Vec<f64>>)>> = mesh
        .subdomains
        .par_iter()
        .map(|sub| {
            let p = &networks[sub.network];
            let mut g = want.then(|| vec![0.0; p.len()]);
            let v = interior_loss(sub, p, terms, g.as_deref_mut())?;
            Ok((v, g))
        })
        .collect();
    let interface: Vec<Result<(f64, Option<(Vec<f64>, Vec<f64>)>)>> = mesh
        .interfaces
        .par_iter()
        .map(|i| {
            let pa = &networks[mesh.subdomains[i.a].network];
            let pb = &networks[mesh.subdomains[i.b].network];
            if want {
                let mut ga = vec![0.0; pa.len()];
                let mut gb = vec![0.0; pb.len()];
                let v = interface_loss(&i.points, pa, pb, terms, Some((&mut ga, &mut gb)))?;
                Ok((v, Some((ga, gb))))
            } else {
                Ok((interface_loss(&i.points, pa, pb, terms, None)?, None))
            }
        })
        .collect();

    let mut out = LossBreakdown::default();
    let mut grads = grads;
    for (sub, r) in mesh.subdomains.iter().zip(interior) {
        let (v, g) = r?;
        out.interior.push(v);
        if let (Some(all), Some(g)) = (grads.as_deref_mut(), g) {
            add_into(&mut all[sub.network], &g);
        }
    }
    for (i, r) in mesh.interfaces.iter().zip(interface) {
        let (v, g) = r?;
        out.interface.push(v);
        if let (Some(all), Some((ga, gb))) = (grads.as_deref_mut(), g) {
            add_into(&mut all[mesh.subdomains[i.a].network], &ga);
            add_into(&mut all[mesh.subdomains[i.b].network], &gb);
        }
    }
    if regularization != 0.0 {
        for (k, p) in networks.iter().enumerate() {
            out.regularization += regularization * p.values().iter().map(|v| v * v).sum::<f64>();
            if let Some(all) = grads.as_deref_mut() {
                for (g, v) in all[k].iter_mut().zip(p.values()) {
                    *g += 2.0 * regularization * v;
                }
            }
        }
    }
    out.total = out.interior.iter().sum::<f64>()
        + out.interface.iter().sum::<f64>()
        + out.regularization;
    Ok(out)
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steel() -> MaterialModel {
        MaterialModel {
            lambda: 121.15,
            mu: 80.77,
            gc: 2.7e-3,
            l0: 0.0125,
            order: PhaseFieldOrder::Fourth,
        }
    }

    fn diag(a: f64, b: f64) -> Tensor2 {
        [[a, 0.0], [0.0, b]]
    }

    #[test]
    fn eigen_of_rotated_tensor() {
        // eigenvalues 3 and -1 along axes rotated by 30 degrees
        let t = std::f64::consts::PI / 6.0;
        let (c, s) = (t.cos(), t.sin());
        let e = [
            [3.0 * c * c - s * s, 4.0 * c * s],
            [4.0 * c * s, 3.0 * s * s - c * c],
        ];
        let (ev, n) = sym_eigen(&e);
        assert!((ev[0] - 3.0).abs() < 1e-14 && (ev[1] + 1.0).abs() < 1e-14);
        assert!((n[0] - c).abs() < 1e-14 && (n[1] - s).abs() < 1e-14);
    }

    #[test]
    fn pure_tension_and_compression() {
        let m = steel();
        let t = split_energy(&diag(1e-3, 2e-3), 2, &m);
        assert_eq!(t.psi_minus, 0.0);
        assert!(t.psi_plus > 0.0);
        let c = split_energy(&diag(-1e-3, -2e-3), 2, &m);
        assert_eq!(c.psi_plus, 0.0);
        assert!(c.psi_minus > 0.0);
    }

    #[test]
    fn split_stress_is_energy_derivative() {
        let m = steel();
        let eps = [[1e-3, 4e-4], [4e-4, -6e-4]];
        let s = split_energy(&eps, 2, &m);
        let h = 1e-8;
        for (i, k) in [(0, 0), (0, 1), (1, 1)] {
            let mut p = eps;
            let mut q = eps;
            p[i][k] += h;
            q[i][k] -= h;
            if i != k {
                p[k][i] += h;
                q[k][i] -= h;
            }
            let sp = split_energy(&p, 2, &m);
            let sq = split_energy(&q, 2, &m);
            let mult = if i == k { 1.0 } else { 2.0 };
            let fd_plus = (sp.psi_plus - sq.psi_plus) / (2.0 * h);
            let fd_minus = (sp.psi_minus - sq.psi_minus) / (2.0 * h);
            assert!((fd_plus - mult * s.sigma_plus[i][k]).abs() < 1e-7);
            assert!((fd_minus - mult * s.sigma_minus[i][k]).abs() < 1e-7);
        }
    }

    #[test]
    fn one_dimensional_split() {
        let m = MaterialModel {
            lambda: 0.0,
            mu: 0.5,
            gc: 1.0,
            l0: 0.1,
            order: PhaseFieldOrder::Second,
        };
        let s = split_energy(&diag(0.2, 0.0), 1, &m);
        assert!((s.psi_plus - 0.02).abs() < 1e-15);
        assert!((s.sigma_plus[0][0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degradation_values() {
        assert_eq!(degradation(0.0), (1.0, -2.0));
        assert_eq!(degradation(1.0), (0.0, 0.0));
        assert_eq!(degradation(0.5), (0.25, -1.0));
    }

    #[test]
    fn crack_density_terms() {
        let l0 = 0.1;
        let g2 = crack_density(0.5, &[2.0], None, l0, PhaseFieldOrder::Second).unwrap();
        assert!((g2 - (0.25 + 0.5 * 0.01 * 4.0) / 0.2).abs() < 1e-14);
        let g4 = crack_density(0.5, &[2.0], Some(3.0), l0, PhaseFieldOrder::Fourth).unwrap();
        assert!((g4 - g2 - 1e-4 / 16.0 * 9.0 / 0.2).abs() < 1e-14);
        assert!(matches!(
            crack_density(0.5, &[2.0], None, l0, PhaseFieldOrder::Fourth),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn history_seeds() {
        let m = steel();
        let lin = HistorySeed::Linear { b: 1e3 };
        let peak = 1e3 * m.gc / (2.0 * m.l0);
        assert!((history_init(0.0, lin, &m) - peak).abs() < 1e-12);
        assert!((history_init(0.25 * m.l0, lin, &m) - 0.5 * peak).abs() < 1e-12);
        assert_eq!(history_init(0.6 * m.l0, lin, &m), 0.0);
        let step = HistorySeed::Step { magnitude: 1000.0 };
        assert_eq!(history_init(m.l0, step, &m), 1000.0);
        assert_eq!(history_init(1.01 * m.l0, step, &m), 0.0);
        assert_eq!(history_update(2.0, 1.0), 2.0);
        assert_eq!(history_update(1.0, 2.0), 2.0);
    }

    #[test]
    fn energy_density_adjoint_matches_finite_differences() {
        let m = steel();
        let body = BodyForce::None;
        let mut jets = [Jet2::default(); 3];
        let vals = [0.01, -0.02, 0.3];
        let grads = [[2e-3, 1e-3], [-5e-4, 1.5e-3], [4.0, -2.0]];
        for c in 0..3 {
            jets[c].value = vals[c];
            jets[c].grad = grads[c];
        }
        jets[2].hess = [[30.0, 5.0], [5.0, -12.0]];
        let (_, bar) = energy_density(&jets, &[0.5, 0.5], 0.2, &m, &body, 2).unwrap();
        let f = |j: &[Jet2; 3]| energy_density(j, &[0.5, 0.5], 0.2, &m, &body, 2).unwrap().0;
        let h = 1e-7;
        for c in 0..3 {
            let mut p = jets;
            let mut q = jets;
            p[c].value += h;
            q[c].value -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - bar[c].value).abs() < 1e-6 * (1.0 + fd.abs()), "value {c}");
            for k in 0..2 {
                let mut p = jets;
                let mut q = jets;
                p[c].grad[k] += h;
                q[c].grad[k] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                assert!((fd - bar[c].grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "grad {c} {k}");
            }
        }
        // phi Hessian enters through the Laplacian only
        let mut p = jets;
        let mut q = jets;
        p[2].hess[0][0] += h;
        q[2].hess[0][0] -= h;
        let fd = (f(&p) - f(&q)) / (2.0 * h);
        assert!((fd - bar[2].hess[0][0]).abs() < 1e-9);
        assert_eq!(bar[2].hess[0][1], 0.0);
    }
}
