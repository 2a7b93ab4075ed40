//! Synthetic data-generating processes.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use super::rng::{substream, Stage};
use crate::numeric::{expit, normal_cdf};

pub const N_COVARIATES: usize = 5;

/// How treatment (or the instrument) is assigned given covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreatmentModel {
    /// `logit P(Z = 1) = f(x) + eps`, eps ~ N(0, 1).
    Logistic,
    /// `Z = 1{f(x) > eps}`, eps ~ N(0, 1).
    Selection,
}

/// Standard Laplace with unit variance (scale sqrt(2)/2) by inversion.
fn laplace<R: Rng>(rng: &mut R) -> f64 {
    let b = std::f64::consts::FRAC_1_SQRT_2;
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn draw_covariates<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut x = Vec::with_capacity(N_COVARIATES);
            for _ in 0..3 {
                x.push(rng.sample::<f64, _>(StandardNormal));
            }
            x.push(laplace(rng));
            x.push(laplace(rng));
            x
        })
        .collect()
}

/// Treatment-assignment index shared by both treatment models.
pub fn selection_index(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
    0.1 * x1.powi(3) + 0.3 * x2 + 0.2 * (x3 * x3).ln() + 0.1 * x4 + 0.2 * x5
        + (x1 * x2).abs()
        + (x3 * x4).powi(2)
        + 0.5 * (x2 * x4).powi(2)
        - 2.5
}

/// Gauss-Hermite nodes and weights for `int exp(-t^2) g(t) dt`, by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gh64() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| gauss_hermite(64))
}

/// `E[expit(f + eps)]` for eps ~ N(0, 1).
pub fn logistic_normal_mean(f: f64) -> f64 {
    let (x, w) = gh64();
    let s: f64 = x
        .iter()
        .zip(w)
        .map(|(xk, wk)| wk * expit(f + std::f64::consts::SQRT_2 * xk))
        .sum();
    s / std::f64::consts::PI.sqrt()
}

impl TreatmentModel {
    /// True propensity `P(Z = 1 | x)`.
    pub fn propensity(self, f: f64) -> f64 {
        match self {
            TreatmentModel::Logistic => logistic_normal_mean(f),
            TreatmentModel::Selection => normal_cdf(f),
        }
    }

    pub fn draw<R: Rng>(self, rng: &mut R, f: f64) -> bool {
        let eps: f64 = rng.sample(StandardNormal);
        match self {
            TreatmentModel::Logistic => rng.random::<f64>() < expit(f + eps),
            TreatmentModel::Selection => f > eps,
        }
    }
}

/// Unmatched data with both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct AteSample {
    pub x: Vec<Vec<f64>>,
    pub z: Vec<bool>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// True propensity of every unit.
    pub e: Vec<f64>,
}

impl AteSample {
    pub fn observed_y(&self) -> Vec<f64> {
        (0..self.z.len())
            .map(|k| if self.z[k] { self.y1[k] } else { self.y0[k] })
            .collect()
    }

    /// Sample average effect over the given units.
    pub fn effect_over(&self, units: &[usize]) -> f64 {
        units.iter().map(|&k| self.y1[k] - self.y0[k]).sum::<f64>() / units.len() as f64
    }
}

pub fn control_outcome_mean(x: &[f64]) -> f64 {
    0.2 * x[0].powi(3) + 0.2 * x[1].abs() + 0.2 * x[2].powi(3) + 0.5 * x[3].abs() + 0.3 * x[4]
}

pub fn unit_effect(x: &[f64]) -> f64 {
    1.0 + 0.3 * x[0] + 0.2 * x[2].powi(3)
}

fn draw_assignment(seed: u64, rep: u32, attempt: u32, n: usize, model: TreatmentModel) -> (Vec<Vec<f64>>, Vec<bool>, Vec<f64>) {
    let x = draw_covariates(&mut substream(seed, rep, attempt, Stage::Covariates), n);
    let mut rz = substream(seed, rep, attempt, Stage::Treatment);
    let mut z = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for row in &x {
        let f = selection_index(row);
        z.push(model.draw(&mut rz, f));
        e.push(model.propensity(f));
    }
    (x, z, e)
}

pub fn gen_ate_sample(seed: u64, rep: u32, attempt: u32, n: usize, model: TreatmentModel) -> AteSample {
    let (x, z, e) = draw_assignment(seed, rep, attempt, n, model);
    let mut ry = substream(seed, rep, attempt, Stage::Outcome);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for row in &x {
        let base = control_outcome_mean(row) + ry.sample::<f64, _>(StandardNormal);
        y0.push(base);
        y1.push(base + unit_effect(row));
    }
    AteSample { x, z, y0, y1, e }
}

/// Unmatched instrumental-variable data with both potential arms.
#[derive(Debug, Clone, PartialEq)]
pub struct IvSample {
    pub x: Vec<Vec<f64>>,
    /// Instrument.
    pub z: Vec<bool>,
    pub d0: Vec<f64>,
    pub d1: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// True instrument propensity.
    pub e: Vec<f64>,
    /// Unobserved confounders (u_d, u_y).
    pub u: Vec<(f64, f64)>,
}

impl IvSample {
    pub fn observed(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.z.len();
        let d = (0..n).map(|k| if self.z[k] { self.d1[k] } else { self.d0[k] }).collect();
        let y = (0..n).map(|k| if self.z[k] { self.y1[k] } else { self.y0[k] }).collect();
        (d, y)
    }

    /// `sum (Y(1) - Y(0)) / sum (D(1) - D(0))` over the given units, or
    /// `None` if the instrument moves no one.
    pub fn effect_ratio_over(&self, units: &[usize]) -> Option<f64> {
        let dy: f64 = units.iter().map(|&k| self.y1[k] - self.y0[k]).sum();
        let dd: f64 = units.iter().map(|&k| self.d1[k] - self.d0[k]).sum();
        (dd != 0.0).then(|| dy / dd)
    }
}

pub fn dose_index(x: &[f64]) -> f64 {
    0.7 * x[0] + 0.4 * x[1].sin() + 0.4 * x[2].abs() + 0.6 * x[3] + 0.1 * x[4] + 0.3 * x[2] * x[3] - 1.0
}

pub fn outcome_base(x: &[f64]) -> f64 {
    0.4 * x[0] * x[0] + 0.1 * x[1].abs() + 0.1 * x[2] * x[2] + 0.2 * x[3].cos() + 0.5 * x[4].sin()
}

/// Correlation between the two unobserved confounders.
pub const CONFOUNDER_CORRELATION: f64 = 0.8;

pub fn draw_confounders<R: Rng>(rng: &mut R) -> (f64, f64) {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    let r = CONFOUNDER_CORRELATION;
    (a, r * a + (1.0 - r * r).sqrt() * b)
}

pub fn gen_iv_sample(seed: u64, rep: u32, attempt: u32, n: usize, model: TreatmentModel) -> IvSample {
    let (x, z, e) = draw_assignment(seed, rep, attempt, n, model);
    let mut rd = substream(seed, rep, attempt, Stage::Dose);
    let mut s = IvSample {
        x: Vec::new(),
        z,
        d0: Vec::with_capacity(n),
        d1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        e,
        u: Vec::with_capacity(n),
    };
    for row in &x {
        let (ud, uy) = draw_confounders(&mut rd);
        let eps: f64 = rd.sample(StandardNormal);
        let g = dose_index(row) + ud;
        let push = 2.0 + 0.8 * row[1] * row[1];
        let d0 = f64::from(g > eps);
        let d1 = f64::from(g + push > eps);
        let base = outcome_base(row) + uy;
        let slope = 1.0 + 0.1 * row[0] + 0.3 * row[2] * row[2];
        s.d0.push(d0);
        s.d1.push(d1);
        s.y0.push(base + slope * d0);
        s.y1.push(base + slope * d1);
        s.u.push((ud, uy));
    }
    s.x = x;
    s
}
