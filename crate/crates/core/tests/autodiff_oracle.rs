//! Finite-difference oracles for spatial jets and parameter gradients.

use phasefield_xpinn::autodiff::{
    eval_jet2, fd_check, loss_param_gradient, DerivativeOrder, Jet2, Objective,
};
use phasefield_xpinn::network::{init_xavier, Activation, NetworkParams};
use phasefield_xpinn::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_net(dim: usize, seed: u64, kind: Activation) -> NetworkParams {
    let mut p = init_xavier(&[dim, 6, 5, dim + 1], kind, 2.0, seed).unwrap();
    // perturb slopes and biases so nothing sits at a symmetric point
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for v in p.values_mut() {
        *v += 0.1 * (rng.random::<f64>() - 0.5);
    }
    p
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-300)
}

#[test]
fn spatial_jets_match_central_differences() {
    let h = 1e-4;
    for seed in 0..6u64 {
        for (dim, kind) in [(1, Activation::Tanh), (2, Activation::Tanh), (2, Activation::Swish)] {
            let p = random_net(dim, seed, kind);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let jets = eval_jet2(&p, &x, DerivativeOrder::Hessian).unwrap();
            for k in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let jp = eval_jet2(&p, &xp, DerivativeOrder::Gradient).unwrap();
                let jm = eval_jet2(&p, &xm, DerivativeOrder::Gradient).unwrap();
                for o in 0..p.output_dim() {
                    let fd_g = (jp[o].value - jm[o].value) / (2.0 * h);
                    assert!(rel(fd_g, jets[o].grad[k]) < 1e-5, "grad seed {seed} dim {dim}");
                    for l in 0..dim {
                        let fd_h = (jp[o].grad[l] - jm[o].grad[l]) / (2.0 * h);
                        let scale = jets[o].hess[l][k].abs().max(1e-3);
                        assert!(
                            (fd_h - jets[o].hess[l][k]).abs() / scale < 1e-5,
                            "hess seed {seed} dim {dim}: {fd_h} vs {}",
                            jets[o].hess[l][k]
                        );
                    }
                }
            }
        }
    }
}

/// Loss with value, gradient-squared and Laplacian-squared terms on a fixed
/// point set, the same shape as the fourth-order crack functional.
struct JetLoss {
    template: NetworkParams,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl JetLoss {
    fn local(&self, k: usize, y: &[Jet2]) -> (f64, Vec<Jet2>) {
        let w = self.weights[k];
        let n = y.len();
        let phi = &y[n - 1];
        let lap = phi.laplacian();
        let g2 = phi.grad[0] * phi.grad[0] + phi.grad[1] * phi.grad[1];
        let u = &y[0];
        let v = w * (phi.value * phi.value + 0.3 * g2 + 0.05 * lap * lap + u.value * u.grad[0]);
        let mut bar = vec![Jet2::default(); n];
        bar[n - 1].value = w * 2.0 * phi.value;
        bar[n - 1].grad = [w * 0.6 * phi.grad[0], w * 0.6 * phi.grad[1]];
        bar[n - 1].hess[0][0] = w * 0.1 * lap;
        bar[n - 1].hess[1][1] = w * 0.1 * lap;
        bar[0].value += w * u.grad[0];
        bar[0].grad[0] += w * u.value;
        (v, bar)
    }
}

impl Objective for JetLoss {
    fn dim(&self) -> usize {
        self.template.len()
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut p = self.template.clone();
        p.set_values(theta);
        let (v, g) = loss_param_gradient(&p, &self.points, DerivativeOrder::Hessian, |k, _, y| {
            self.local(k, y)
        })?;
        Ok((v, g.0))
    }
}

fn jet_loss(dim: usize, seed: u64) -> JetLoss {
    let template = random_net(dim, seed, Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
    let points = (0..5)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect();
    let weights = (0..5).map(|_| 0.5 + rng.random::<f64>()).collect();
    JetLoss {
        template,
        points,
        weights,
    }
}

#[test]
fn laplacian_bearing_loss_gradient_matches_finite_differences() {
    for seed in 0..4 {
        for dim in [1, 2] {
            let loss = jet_loss(dim, seed);
            let theta = loss.template.values().to_vec();
            let d = fd_check(&loss, &theta, 1e-4);
            assert!(d < 1e-5, "seed {seed} dim {dim}: discrepancy {d}");
        }
    }
}

struct LinearQuadratic;

impl Objective for LinearQuadratic {
    fn dim(&self) -> usize {
        2
    }
    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = NetworkParams::from_values(&[1, 1], Activation::Tanh, 1.0, 0, theta.to_vec())?;
        let pts = vec![vec![0.2], vec![-0.7], vec![1.3]];
        let (v, g) = loss_param_gradient(&p, &pts, DerivativeOrder::Gradient, |_, x, y| {
            let r = y[0].value - x[0] * x[0];
            (r * r + y[0].grad[0].powi(2), {
                let mut b = Jet2::constant(2.0 * r);
                b.grad[0] = 2.0 * y[0].grad[0];
                vec![b]
            })
        })?;
        Ok((v, g.0))
    }
}

#[test]
fn linear_net_quadratic_loss_fd_is_tight() {
    let d = fd_check(&LinearQuadratic, &[0.8, -0.3], 1e-5);
    assert!(d < 1e-9, "discrepancy {d}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hessian_is_symmetric(seed in 0u64..1000, x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let p = random_net(2, seed, Activation::Swish);
        let jets = eval_jet2(&p, &[x, y], DerivativeOrder::Hessian).unwrap();
        for j in &jets {
            prop_assert!((j.hess[0][1] - j.hess[1][0]).abs() <= 1e-12 * (1.0 + j.hess[0][1].abs()));
        }
    }

    #[test]
    fn gradient_is_linear_in_the_loss(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let l1 = jet_loss(2, seed);
        let theta = l1.template.values().to_vec();
        let (_, g1) = l1.value_and_gradient(&theta).unwrap();
        let pts = l1.points.clone();
        let (_, g2) = loss_param_gradient(&l1.template, &pts, DerivativeOrder::Gradient, |_, _, y| {
            let v = y[1].value * y[0].grad[1];
            let mut bar = vec![Jet2::default(); 3];
            bar[1].value = y[0].grad[1];
            bar[0].grad[1] = y[1].value;
            (v, bar)
        }).unwrap();
        let (_, gc) = loss_param_gradient(&l1.template, &pts, DerivativeOrder::Hessian, |k, _, y| {
            let (v1, b1) = l1.local(k, y);
            let v2 = y[1].value * y[0].grad[1];
            let mut bar: Vec<Jet2> = b1.iter().map(|j| {
                let mut s = *j;
                s.value *= a;
                for q in 0..2 { s.grad[q] *= a; for r in 0..2 { s.hess[q][r] *= a; } }
                s
            }).collect();
            bar[1].value += b * y[0].grad[1];
            bar[0].grad[1] += b * y[1].value;
            (a * v1 + b * v2, bar)
        }).unwrap();
        for i in 0..gc.len() {
            let expect = a * g1[i] + b * g2[i];
            prop_assert!((gc[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}
