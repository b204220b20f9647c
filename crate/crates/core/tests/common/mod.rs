#![allow(dead_code)]

use lqpg_core::{Coefficient, LqcModel, Mat, Policy, TimeGrid, Vector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

pub fn s(x: f64) -> Mat {
    Mat::from_element(1, 1, x)
}

pub struct Draw {
    rng: ChaCha8Rng,
    unit: Uniform<f64>,
}

impl Draw {
    pub fn new(seed: u64) -> Self {
        Draw {
            rng: ChaCha8Rng::seed_from_u64(seed),
            unit: Uniform::new_inclusive(-1.0, 1.0).unwrap(),
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.unit.sample(&mut self.rng)
    }

    pub fn mat(&mut self, r: usize, c: usize, scale: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| scale * self.unit.sample(&mut self.rng))
    }

    /// `LᵀL·scale + shift·I`.
    pub fn spd(&mut self, n: usize, scale: f64, shift: f64) -> Mat {
        let l = self.mat(n, n, 1.0);
        l.transpose() * l * scale + Mat::identity(n, n) * shift
    }
}

/// Random well-posed model with two noise channels and a time-varying `B`.
pub fn random_model(d: usize, k: usize, seed: u64) -> LqcModel {
    let mut r = Draw::new(seed);
    let a = r.mat(d, d, 0.5);
    let b0 = r.mat(d, k, 1.0);
    let b1 = r.mat(d, k, 0.3);
    let mut builder = LqcModel::builder(d, k, 1.0)
        .a(Coefficient::constant(a))
        .b(Coefficient::function(d, k, "b", move |t| &b0 + &b1 * (3.0 * t).sin()))
        .q(Coefficient::constant(r.spd(d, 0.5, 0.0)))
        .s(Coefficient::constant(r.mat(k, d, 0.2)))
        .r(Coefficient::constant(r.spd(k, 0.3, 0.2)))
        .g(r.spd(d, 0.5, 0.1))
        .rho(0.2 + 0.3 * (1.0 + r.uniform()))
        .vbar(Coefficient::constant(r.spd(k, 0.3, 0.5)))
        .sigma0(r.spd(d, 0.3, 0.2));
    for _ in 0..2 {
        builder = builder.noise_channel(Coefficient::constant(r.mat(d, d, 0.3)), Coefficient::constant(r.mat(d, k, 0.4)));
    }
    builder.build().unwrap()
}

pub fn grid(n: usize) -> TimeGrid {
    TimeGrid::uniform(1.0, n).unwrap()
}

/// Exact expectation of the Euler–Maruyama estimator when `ζ` is redrawn at
/// every step: mean/second-moment recursion plus the expected left-Riemann
/// cost.
pub fn em_expectation(model: &LqcModel, theta: &Policy, sim: &TimeGrid, mean0: &Vector, cov0: &Mat) -> (f64, Vec<Mat>) {
    let d = model.state_dim();
    let map = sim.interval_map(theta.grid()).unwrap();
    let mut sigma = cov0 + mean0 * mean0.transpose();
    let mut moments = vec![sigma.clone()];
    let mut cost = 0.0;
    for (i, &j) in map.iter().enumerate() {
        let c = model.coefs(sim.node(i)).unwrap();
        let dt = sim.step(i);
        let (k, v) = (theta.k(j), theta.v(j));
        let vbar_inv = c.vbar.clone().try_inverse().unwrap();
        let entropy = (&vbar_inv * (v - &c.vbar)).trace() + c.vbar.determinant().ln() - v.determinant().ln();
        let running = 0.5 * ((&c.q * &sigma).trace() + 2.0 * (k.transpose() * &c.s * &sigma).trace()
            + (k.transpose() * &c.r * k * &sigma).trace()
            + (&c.r * v).trace())
            + 0.5 * model.rho() * ((k.transpose() * &vbar_inv * k * &sigma).trace() + entropy);
        cost += running * dt;
        let f = Mat::identity(d, d) + (&c.a + &c.b * k) * dt;
        let mut next = &f * &sigma * f.transpose() + &c.b * v * c.b.transpose() * (dt * dt);
        for (cj, dj) in c.c.iter().zip(&c.d) {
            let ck = cj + dj * k;
            next += (&ck * &sigma * ck.transpose() + dj * v * dj.transpose()) * dt;
        }
        sigma = next;
        moments.push(sigma.clone());
    }
    cost += 0.5 * (model.terminal_cost() * &sigma).trace();
    (cost, moments)
}

