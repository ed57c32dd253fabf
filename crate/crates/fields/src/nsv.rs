//! Pseudo-spectral incompressible Navier–Stokes in vorticity form on the
//! periodic unit square:
//!
//! `∂t w + u·∇w = ν Δw + f`, with `−Δψ = w` and `u = (∂₂ψ, −∂₁ψ)`.
//!
//! Diffusion is treated by Crank–Nicolson and advection plus forcing by a
//! Heun predictor–corrector, giving a second-order scheme overall.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::rc::Rc;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FieldsError, Result};
use crate::fft::{freq, Fft2};
use crate::trajectory::{FieldTrajectory, Pde};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsvParams {
    pub nu: f64,
    pub dt: f64,
    pub t_end: f64,
    pub save_every: usize,
    /// Amplitude of `sin(2π(x₁+x₂)) + cos(2π(x₁+x₂))`; zero disables forcing.
    pub forcing: f64,
    pub cfl_limit: f64,
    pub abort_on_cfl: bool,
}

impl Default for NsvParams {
    fn default() -> Self {
        NsvParams { nu: 1e-3, dt: 1e-3, t_end: 1.0, save_every: 100, forcing: 0.1, cfl_limit: 1.0, abort_on_cfl: true }
    }
}

/// Diagnostics gathered over a solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NsvReport {
    pub steps: usize,
    pub max_cfl: f64,
    pub cfl_violations: usize,
    /// Largest spectral divergence of the recovered velocity, in
    /// `1/(HW)`-normalized coefficients.
    pub max_divergence: f64,
    /// Kinetic energy at each saved frame.
    pub energy: Vec<f64>,
}

pub struct NsvSolver {
    n1: usize,
    n2: usize,
    fft: Rc<Fft2>,
    /// Vorticity coefficients, unnormalized FFT layout.
    w_hat: Vec<Complex64>,
    f_hat: Vec<Complex64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    lap: Vec<f64>,
    dealias: Vec<bool>,
    pub params: NsvParams,
    pub t: f64,
    pub report: NsvReport,
}

impl NsvSolver {
    pub fn new(w0: &Array2<f64>, params: NsvParams) -> Result<Self> {
        let (n1, n2) = w0.dim();
        if n1 < 4 || n2 < 4 {
            return Err(FieldsError::InvalidArgument(format!("NSV grid {n1}x{n2} too small")));
        }
        if !(params.dt > 0.0 && params.nu >= 0.0 && params.t_end >= 0.0 && params.save_every > 0) {
            return Err(FieldsError::InvalidArgument(format!("bad NSV parameters {params:?}")));
        }
        if w0.iter().any(|v| !v.is_finite()) {
            return Err(FieldsError::NonFinite { what: "in initial vorticity".into() });
        }
        let fft = Fft2::cached(n1, n2);
        let w_hat = fft.forward_real(w0.as_slice().expect("standard layout"));
        let mut k1 = vec![0.0; n1 * n2];
        let mut k2 = vec![0.0; n1 * n2];
        let mut lap = vec![0.0; n1 * n2];
        let mut dealias = vec![false; n1 * n2];
        for i in 0..n1 {
            for j in 0..n2 {
                let (a, b) = (freq(i, n1), freq(j, n2));
                let p = i * n2 + j;
                k1[p] = 2.0 * PI * a as f64;
                k2[p] = 2.0 * PI * b as f64;
                lap[p] = k1[p] * k1[p] + k2[p] * k2[p];
                // 2/3 rule: keep |k| below a third of the grid on each axis.
                dealias[p] = 3 * a.unsigned_abs() < n1 && 3 * b.unsigned_abs() < n2;
            }
        }
        let forcing: Vec<f64> = (0..n1 * n2)
            .map(|p| {
                let x1 = (p / n2) as f64 / n1 as f64;
                let x2 = (p % n2) as f64 / n2 as f64;
                let a = 2.0 * PI * (x1 + x2);
                params.forcing * (a.sin() + a.cos())
            })
            .collect();
        let f_hat = fft.forward_real(&forcing);
        let mut s = NsvSolver { n1, n2, fft, w_hat, f_hat, k1, k2, lap, dealias, params, t: 0.0, report: NsvReport::default() };
        s.report.energy.push(s.kinetic_energy());
        Ok(s)
    }

    fn norm(&self) -> f64 {
        (self.n1 * self.n2) as f64
    }

    /// Streamfunction-derived velocity coefficients `(û₁, û₂)`.
    fn velocity_hat(&self, w_hat: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let i = Complex64::i();
        let mut u1 = vec![Complex64::default(); w_hat.len()];
        let mut u2 = vec![Complex64::default(); w_hat.len()];
        for p in 0..w_hat.len() {
            if self.lap[p] == 0.0 {
                continue;
            }
            let psi = w_hat[p] / self.lap[p];
            u1[p] = i * self.k2[p] * psi;
            u2[p] = -(i * self.k1[p] * psi);
        }
        (u1, u2)
    }

    /// `max |∂₁u₁ + ∂₂u₂|` over modes, in normalized coefficients.
    pub fn divergence(&self) -> f64 {
        let (u1, u2) = self.velocity_hat(&self.w_hat);
        let i = Complex64::i();
        let n = self.norm();
        (0..u1.len()).map(|p| ((i * self.k1[p] * u1[p] + i * self.k2[p] * u2[p]) / n).norm()).fold(0.0, f64::max)
    }

    /// `½ mean |u|²`.
    pub fn kinetic_energy(&self) -> f64 {
        let n = self.norm();
        0.5 * (0..self.w_hat.len())
            .filter(|&p| self.lap[p] > 0.0)
            .map(|p| self.w_hat[p].norm_sqr() / self.lap[p])
            .sum::<f64>()
            / (n * n)
    }

    fn real(&self, hat: &[Complex64]) -> Vec<f64> {
        self.fft.inverse_real(hat)
    }

    /// Dealiased `−u·∇w + f` in spectral space, plus the max velocity.
    fn rhs(&self, w_hat: &[Complex64]) -> (Vec<Complex64>, f64) {
        let i = Complex64::i();
        let (u1h, u2h) = self.velocity_hat(w_hat);
        let mut d1 = vec![Complex64::default(); w_hat.len()];
        let mut d2 = vec![Complex64::default(); w_hat.len()];
        for p in 0..w_hat.len() {
            d1[p] = i * self.k1[p] * w_hat[p];
            d2[p] = i * self.k2[p] * w_hat[p];
        }
        let (u1, u2, w1, w2) = (self.real(&u1h), self.real(&u2h), self.real(&d1), self.real(&d2));
        let mut umax = 0.0f64;
        let adv: Vec<f64> = (0..u1.len())
            .map(|p| {
                umax = umax.max(u1[p].abs()).max(u2[p].abs());
                u1[p] * w1[p] + u2[p] * w2[p]
            })
            .collect();
        let mut n_hat = self.fft.forward_real(&adv);
        for p in 0..n_hat.len() {
            n_hat[p] = if self.dealias[p] { -n_hat[p] } else { Complex64::default() } + self.f_hat[p];
        }
        (n_hat, umax)
    }

    /// Advances one step of size `params.dt`.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.params.dt;
        let (n1, umax) = self.rhs(&self.w_hat);
        let h = 1.0 / self.n1.max(self.n2) as f64;
        let cfl = umax * dt / h;
        self.report.max_cfl = self.report.max_cfl.max(cfl);
        if cfl > self.params.cfl_limit {
            self.report.cfl_violations += 1;
            if self.params.abort_on_cfl {
                return Err(FieldsError::Cfl { cfl, limit: self.params.cfl_limit, t: self.t });
            }
        }
        let mut pred = vec![Complex64::default(); n1.len()];
        for p in 0..pred.len() {
            let a = 0.5 * dt * self.params.nu * self.lap[p];
            pred[p] = ((1.0 - a) * self.w_hat[p] + dt * n1[p]) / (1.0 + a);
        }
        let (n2, _) = self.rhs(&pred);
        for p in 0..pred.len() {
            let a = 0.5 * dt * self.params.nu * self.lap[p];
            self.w_hat[p] = ((1.0 - a) * self.w_hat[p] + 0.5 * dt * (n1[p] + n2[p])) / (1.0 + a);
        }
        self.t += dt;
        self.report.steps += 1;
        self.report.max_divergence = self.report.max_divergence.max(self.divergence());
        if self.w_hat.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(FieldsError::NonFinite { what: format!("in vorticity at t={:.4}", self.t) });
        }
        Ok(())
    }

    pub fn vorticity(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.n1, self.n2), self.real(&self.w_hat)).expect("grid shape")
    }

    /// Runs to `params.t_end`, returning the vorticity at every saved step
    /// (including `t = 0`).
    pub fn run(&mut self) -> Result<Vec<Array2<f64>>> {
        let n_steps = (self.params.t_end / self.params.dt).round() as usize;
        let mut frames = vec![self.vorticity()];
        for s in 1..=n_steps {
            self.step()?;
            if s % self.params.save_every == 0 {
                frames.push(self.vorticity());
                self.report.energy.push(self.kinetic_energy());
            }
        }
        Ok(frames)
    }
}

/// Solves from `w0` and packages the saved frames as a trajectory.
pub fn solve_nsv(w0: &Array2<f64>, params: &NsvParams) -> Result<(FieldTrajectory, NsvReport)> {
    let mut solver = NsvSolver::new(w0, params.clone())?;
    let frames = solver.run()?;
    let frames: Vec<Array3<f64>> = frames.into_iter().map(|f| f.insert_axis(ndarray::Axis(0))).collect();
    let mut traj = FieldTrajectory::from_frames(Pde::Nsv, &frames, params.dt * params.save_every as f64, [[0.0, 1.0]; 2])?;
    let mut attrs = BTreeMap::new();
    attrs.insert("solver".into(), serde_json::to_string(params).expect("params serialize"));
    traj.attrs = attrs;
    Ok((traj, solver.report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_stays_zero_without_forcing() {
        let w0 = Array2::zeros((8, 8));
        let p = NsvParams { forcing: 0.0, t_end: 0.1, dt: 0.01, save_every: 5, ..Default::default() };
        let (traj, _) = solve_nsv(&w0, &p).unwrap();
        assert_eq!(traj.n_frames(), 3);
        assert!(traj.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cfl_violation_aborts() {
        let w0 = Array2::from_shape_fn((16, 16), |(i, _)| 200.0 * (2.0 * PI * i as f64 / 16.0).cos());
        let p = NsvParams { dt: 0.5, t_end: 1.0, save_every: 1, ..Default::default() };
        assert!(matches!(solve_nsv(&w0, &p), Err(FieldsError::Cfl { .. })));
    }
}
