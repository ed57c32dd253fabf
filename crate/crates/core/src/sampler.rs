//! ODE integration of the learned velocity field and autoregressive rollout.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tempo_nn::{no_grad, Tensor};

use crate::error::{CoreError, Result};
use crate::models::Regressor;
use crate::paths::PathSchedule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Dopri5,
    Rk4,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Dopri5 => "dopri5",
            SolverKind::Rk4 => "rk4",
        })
    }
}

impl FromStr for SolverKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dopri5" => Ok(SolverKind::Dopri5),
            "rk4" => Ok(SolverKind::Rk4),
            _ => Err(CoreError::Config(format!("unknown solver {s:?} (expected dopri5 or rk4)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub solver: SolverKind,
    pub rtol: f64,
    pub atol: f64,
    /// Fixed step count for `rk4`.
    pub rk4_steps: usize,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { solver: SolverKind::Dopri5, rtol: 1e-5, atol: 1e-5, rk4_steps: 50, max_steps: 100_000 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.rtol.is_finite() && self.atol.is_finite()) {
            return Err(CoreError::Config(format!("tolerances must be positive (rtol={}, atol={})", self.rtol, self.atol)));
        }
        if self.solver == SolverKind::Rk4 && self.rk4_steps == 0 {
            return Err(CoreError::Config("rk4 needs at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationReport {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub solver: SolverKind,
    pub rtol: f64,
    pub atol: f64,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

fn rms_scaled(v: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = v.len().max(1) as f64;
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (s / n).sqrt()
}

fn axpy_combo(y: &[f64], h: f64, coeffs: &[f64], ks: &[Vec<f64>]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in coeffs.iter().zip(ks) {
        if *c == 0.0 {
            continue;
        }
        let hc = h * c;
        for (o, kv) in out.iter_mut().zip(k) {
            *o += hc * kv;
        }
    }
    out
}

/// Integrates `dy/dt = f(y, t)` from `t0` to `t1`.
///
/// `f` may fail (for instance on non-finite output); the error is passed on.
pub fn integrate(
    f: &mut dyn FnMut(&[f64], f64) -> Result<Vec<f64>>,
    y0: &[f64],
    t0: f64,
    t1: f64,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, IntegrationReport)> {
    opts.validate()?;
    let mut report = IntegrationReport { nfe: 0, accepted: 0, rejected: 0, solver: opts.solver, rtol: opts.rtol, atol: opts.atol };
    let mut eval = |y: &[f64], t: f64, report: &mut IntegrationReport| -> Result<Vec<f64>> {
        report.nfe += 1;
        let v = f(y, t)?;
        if v.len() != y.len() {
            return Err(CoreError::Shape(format!("velocity has {} entries, state has {}", v.len(), y.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Solver { t, reason: "non-finite velocity".into() });
        }
        Ok(v)
    };
    if t1 == t0 {
        return Ok((y0.to_vec(), report));
    }
    match opts.solver {
        SolverKind::Rk4 => {
            let n = opts.rk4_steps;
            let h = (t1 - t0) / n as f64;
            let mut y = y0.to_vec();
            for i in 0..n {
                let t = t0 + i as f64 * h;
                let k1 = eval(&y, t, &mut report)?;
                let k2 = eval(&axpy_combo(&y, h, &[0.5], std::slice::from_ref(&k1)), t + 0.5 * h, &mut report)?;
                let k3 = eval(&axpy_combo(&y, h, &[0.5], std::slice::from_ref(&k2)), t + 0.5 * h, &mut report)?;
                let k4 = eval(&axpy_combo(&y, h, &[1.0], std::slice::from_ref(&k3)), t + h, &mut report)?;
                y = axpy_combo(&y, h, &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0], &[k1, k2, k3, k4]);
                report.accepted += 1;
            }
            Ok((y, report))
        }
        SolverKind::Dopri5 => {
            let dir = (t1 - t0).signum();
            let span = (t1 - t0).abs();
            let (rtol, atol) = (opts.rtol, opts.atol);
            let mut y = y0.to_vec();
            let mut t = t0;
            let mut k0 = eval(&y, t, &mut report)?;

            // Initial step selection (Hairer, Nørsett & Wanner, II.4).
            let zeros = vec![0.0; y.len()];
            let d0 = rms_scaled(&y, &y, &zeros, rtol, atol);
            let d1 = rms_scaled(&k0, &y, &zeros, rtol, atol);
            let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            let y1 = axpy_combo(&y, dir * h0, &[1.0], std::slice::from_ref(&k0));
            let k1 = eval(&y1, t + dir * h0, &mut report)?;
            let diff: Vec<f64> = k1.iter().zip(&k0).map(|(a, b)| a - b).collect();
            let d2 = rms_scaled(&diff, &y, &zeros, rtol, atol) / h0;
            let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(1.0 / 5.0) };
            let mut h = (100.0 * h0).min(h1).min(span);

            let mut steps = 0usize;
            while dir * (t1 - t) > 0.0 {
                steps += 1;
                if steps > opts.max_steps {
                    return Err(CoreError::Solver { t, reason: format!("exceeded {} steps", opts.max_steps) });
                }
                if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                    return Err(CoreError::Solver { t, reason: format!("step size underflow (h={h:.3e})") });
                }
                let last = h >= dir * (t1 - t);
                if last {
                    h = dir * (t1 - t);
                }
                let hs = dir * h;
                let mut ks = Vec::with_capacity(7);
                ks.push(k0.clone());
                for stage in 1..7 {
                    let ys = axpy_combo(&y, hs, A[stage], &ks);
                    ks.push(eval(&ys, t + C[stage] * hs, &mut report)?);
                }
                let y_new = axpy_combo(&y, hs, A[6], &ks[..6]);
                let err_vec: Vec<f64> = (0..y.len()).map(|i| hs * (0..7).map(|s| E[s] * ks[s][i]).sum::<f64>()).collect();
                let err = rms_scaled(&err_vec, &y, &y_new, rtol, atol);
                if err <= 1.0 {
                    t = if last { t1 } else { t + hs };
                    y = y_new;
                    k0 = ks.pop().expect("seven stages");
                    report.accepted += 1;
                    let factor = if err == 0.0 { MAX_FACTOR } else { (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
                    h *= factor;
                } else {
                    report.rejected += 1;
                    h *= (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
                }
            }
            Ok((y, report))
        }
    }
}

/// Conditioning for a batch of next-step predictions, latents `[B, C, h, w]`.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub z_ref: Array4<f64>,
    pub z_cond: Array4<f64>,
    pub delta: Vec<f64>,
}

fn to_tensor(a: &Array4<f64>) -> Tensor {
    Tensor::from_vec(a.iter().copied().collect(), a.shape())
}

/// Draws the prior state and integrates `v_θ(· | cond)` across the path's
/// sampling span (see [`PathSchedule::sampling_span`]).
/// The batch is integrated as one system with a shared step size.
pub fn predict_next(
    model: &Regressor,
    path: &PathSchedule,
    cond: &Conditioning,
    opts: &SolverOptions,
    rng: &mut impl Rng,
) -> Result<(Array4<f64>, IntegrationReport)> {
    let shape = cond.z_ref.raw_dim();
    if cond.z_cond.raw_dim() != shape || cond.delta.len() != shape[0] {
        return Err(CoreError::Shape("conditioning latents and offsets disagree in shape".into()));
    }
    let _g = no_grad();
    let n = cond.z_ref.len();
    let (t0, t1, prior_std) = path.sampling_span();
    let z0: Vec<f64> = (0..n).map(|_| prior_std * rng.sample::<f64, _>(StandardNormal)).collect();
    let zr = to_tensor(&cond.z_ref);
    let zc = to_tensor(&cond.z_cond);
    let dims = cond.z_ref.shape().to_vec();
    let b = dims[0];
    let mut f = |y: &[f64], t: f64| -> Result<Vec<f64>> {
        let zt = Tensor::from_vec(y.to_vec(), &dims);
        Ok(model.forward(&zt, &zr, &zc, &vec![t; b], &cond.delta).to_vec())
    };
    let (z1, report) = integrate(&mut f, &z0, t0, t1, opts)?;
    let out = Array4::from_shape_vec(shape, z1).expect("state keeps its shape");
    Ok((out, report))
}

/// How the conditioning frame and offset evolve over a rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    /// `z_cond` stays the first warm-up frame and `Δ` grows by one per step.
    #[default]
    Anchored,
    /// `z_cond` is the previous frame and `Δ = 1` throughout.
    Sliding,
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// Generated latents `[horizon, C, h, w]`.
    pub latents: Array4<f64>,
    pub reports: Vec<IntegrationReport>,
}

/// Autoregressive rollout from two warm-up latents `(x₀, x₁)`.
///
/// Step `j` (1-based) predicts frame `j + 1` with reference = the latest
/// latent (observed for `j = 1`, generated afterwards).
pub fn rollout(
    model: &Regressor,
    path: &PathSchedule,
    warmup: [ArrayView3<'_, f64>; 2],
    horizon: usize,
    mode: RolloutMode,
    opts: &SolverOptions,
    rng: &mut impl Rng,
) -> Result<RolloutResult> {
    if horizon == 0 {
        return Err(CoreError::InvalidArgument("rollout horizon must be ≥ 1".into()));
    }
    if warmup[0].shape() != warmup[1].shape() {
        return Err(CoreError::Shape("warm-up frames differ in shape".into()));
    }
    let sh = warmup[0].raw_dim();
    let mut out = Array4::zeros((horizon, sh[0], sh[1], sh[2]));
    let mut reports = Vec::with_capacity(horizon);
    let anchor: Array3<f64> = warmup[0].to_owned();
    let mut prev: Array3<f64> = warmup[0].to_owned();
    let mut latest: Array3<f64> = warmup[1].to_owned();
    for j in 1..=horizon {
        let (z_cond, delta) = match mode {
            RolloutMode::Anchored => (&anchor, j as f64),
            RolloutMode::Sliding => (&prev, 1.0),
        };
        let cond = Conditioning {
            z_ref: latest.clone().insert_axis(Axis(0)),
            z_cond: z_cond.clone().insert_axis(Axis(0)),
            delta: vec![delta],
        };
        let (z, rep) = predict_next(model, path, &cond, opts, rng)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Solver { t: 1.0, reason: format!("non-finite latent at rollout step {j}") });
        }
        let z = z.index_axis_move(Axis(0), 0);
        out.index_axis_mut(Axis(0), j - 1).assign(&z);
        reports.push(rep);
        prev = std::mem::replace(&mut latest, z);
    }
    Ok(RolloutResult { latents: out, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(f: &mut dyn FnMut(&[f64], f64) -> Result<Vec<f64>>, y0: &[f64], tol: f64) -> (Vec<f64>, IntegrationReport) {
        integrate(f, y0, 0.0, 1.0, &SolverOptions { rtol: tol, atol: tol, ..Default::default() }).unwrap()
    }

    #[test]
    fn exponential_growth() {
        let y0 = [1.0, -0.5, 2.0];
        let (y, rep) = run(&mut |y, _| Ok(y.to_vec()), &y0, 1e-8);
        for (a, b) in y.iter().zip(y0) {
            let exact = b * std::f64::consts::E;
            assert!(((a - exact) / exact).abs() < 1e-6, "{a} vs {exact}");
        }
        assert!(rep.nfe > 1);
    }

    #[test]
    fn zero_field_is_identity() {
        let y0 = [0.3, 0.7];
        let (y, rep) = run(&mut |y, _| Ok(vec![0.0; y.len()]), &y0, 1e-5);
        assert_eq!(y, y0);
        assert!(rep.rejected == 0);
    }

    #[test]
    fn constant_field_is_linear() {
        let (y, _) = run(&mut |_, _| Ok(vec![2.0, -1.0]), &[1.0, 1.0], 1e-5);
        assert!((y[0] - 3.0).abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn tighter_tolerance_is_not_worse() {
        let mut prev = f64::INFINITY;
        for tol in [1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5, 1e-6, 1e-8] {
            let (y, _) = run(&mut |y, t| Ok(vec![(t * 3.0).cos() * y[0]]), &[1.0], tol);
            let exact = ((3.0f64).sin() / 3.0).exp();
            let err = (y[0] - exact).abs();
            assert!(err <= prev * 1.0000001, "tol {tol}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn rk4_counts_four_per_step() {
        let opts = SolverOptions { solver: SolverKind::Rk4, rk4_steps: 10, ..Default::default() };
        let (y, rep) = integrate(&mut |y, _| Ok(y.to_vec()), &[1.0], 0.0, 1.0, &opts).unwrap();
        assert_eq!(rep.nfe, 40);
        assert!((y[0] - std::f64::consts::E).abs() < 1e-5);
    }

    #[test]
    fn failures_are_reported() {
        let r = integrate(&mut |_, _| Ok(vec![f64::NAN]), &[1.0], 0.0, 1.0, &SolverOptions::default());
        assert!(matches!(r, Err(CoreError::Solver { .. })));
        // A finite-time blow-up inside the interval forces step-size underflow.
        let r = integrate(&mut |y, _| Ok(vec![y[0] * y[0]]), &[2.0], 0.0, 1.0, &SolverOptions::default());
        assert!(r.is_err());
        let bad = SolverOptions { rtol: 0.0, ..Default::default() };
        assert!(integrate(&mut |y, _| Ok(y.to_vec()), &[1.0], 0.0, 1.0, &bad).is_err());
    }
}
