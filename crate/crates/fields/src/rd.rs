//! FitzHugh–Nagumo reaction–diffusion on `(−1, 1)²` with no-flux boundaries.
//!
//! `∂t u = D_u Δu + u − u³ − k − v`, `∂t v = D_v Δv + u − v`, discretized
//! on a cell-centred grid with the 5-point Laplacian (mirror ghost cells)
//! and advanced by explicit Heun steps under a diffusive stability bound.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{FieldsError, Result};
use crate::trajectory::{FieldTrajectory, Pde};

pub const RD_DOMAIN: [[f64; 2]; 2] = [[-1.0, 1.0], [-1.0, 1.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdParams {
    pub du: f64,
    pub dv: f64,
    pub k: f64,
    pub t_end: f64,
    pub dt: f64,
    pub save_every: usize,
    /// Values beyond this magnitude abort the solve.
    pub blowup: f64,
}

impl Default for RdParams {
    fn default() -> Self {
        RdParams { du: 1e-3, dv: 5e-3, k: 5e-3, t_end: 5.0, dt: 1e-3, save_every: 50, blowup: 1e3 }
    }
}

impl RdParams {
    /// Largest step allowed on an `n`-cell axis: `0.4 h² / (4 max D)`.
    pub fn max_stable_dt(&self, n: usize) -> f64 {
        let h = (RD_DOMAIN[0][1] - RD_DOMAIN[0][0]) / n as f64;
        0.4 * h * h / (4.0 * self.du.max(self.dv).max(f64::MIN_POSITIVE))
    }
}

/// Reaction terms `(R_u, R_v)` of the FitzHugh–Nagumo model.
pub fn fhn_reaction(k: f64) -> impl Fn(f64, f64) -> (f64, f64) {
    move |u, v| (u - u * u * u - k - v, u - v)
}

/// Five-point Laplacian with zero normal flux, into `out`.
fn laplacian_neumann(x: &[f64], n1: usize, n2: usize, h: f64, out: &mut [f64]) {
    let inv = 1.0 / (h * h);
    for i in 0..n1 {
        for j in 0..n2 {
            let c = x[i * n2 + j];
            let up = if i > 0 { x[(i - 1) * n2 + j] } else { c };
            let dn = if i + 1 < n1 { x[(i + 1) * n2 + j] } else { c };
            let lf = if j > 0 { x[i * n2 + j - 1] } else { c };
            let rt = if j + 1 < n2 { x[i * n2 + j + 1] } else { c };
            out[i * n2 + j] = (up + dn + lf + rt - 4.0 * c) * inv;
        }
    }
}

/// Solves with an arbitrary pointwise reaction; returns frames at `t = 0`
/// and every `save_every` steps.
pub fn solve_rd_with(
    u0: &Array2<f64>,
    v0: &Array2<f64>,
    params: &RdParams,
    reaction: impl Fn(f64, f64) -> (f64, f64),
) -> Result<Vec<Array3<f64>>> {
    let (n1, n2) = u0.dim();
    if v0.dim() != (n1, n2) {
        return Err(FieldsError::Shape(format!("u0 {:?} vs v0 {:?}", u0.dim(), v0.dim())));
    }
    if n1 != n2 || n1 < 2 {
        return Err(FieldsError::InvalidArgument(format!("RD grid must be square, got {n1}x{n2}")));
    }
    if !(params.dt > 0.0 && params.save_every > 0 && params.t_end >= 0.0) {
        return Err(FieldsError::InvalidArgument(format!("bad RD parameters {params:?}")));
    }
    let limit = params.max_stable_dt(n1);
    if params.dt > limit {
        return Err(FieldsError::InvalidArgument(format!("dt {} exceeds the diffusive bound {limit:.3e}", params.dt)));
    }
    let h = (RD_DOMAIN[0][1] - RD_DOMAIN[0][0]) / n1 as f64;
    let n = n1 * n2;
    let mut u = u0.as_standard_layout().as_slice().expect("contiguous").to_vec();
    let mut v = v0.as_standard_layout().as_slice().expect("contiguous").to_vec();
    let (mut lu, mut lv) = (vec![0.0; n], vec![0.0; n]);
    let (mut ku, mut kv) = (vec![0.0; n], vec![0.0; n]);
    let (mut pu, mut pv) = (vec![0.0; n], vec![0.0; n]);

    let mut rates = |u: &[f64], v: &[f64], du: &mut [f64], dv: &mut [f64]| {
        laplacian_neumann(u, n1, n2, h, &mut lu);
        laplacian_neumann(v, n1, n2, h, &mut lv);
        for p in 0..n {
            let (ru, rv) = reaction(u[p], v[p]);
            du[p] = params.du * lu[p] + ru;
            dv[p] = params.dv * lv[p] + rv;
        }
    };

    let pack = |u: &[f64], v: &[f64]| {
        let mut f = Array3::zeros((2, n1, n2));
        for p in 0..n {
            f[[0, p / n2, p % n2]] = u[p];
            f[[1, p / n2, p % n2]] = v[p];
        }
        f
    };

    let dt = params.dt;
    let n_steps = (params.t_end / dt).round() as usize;
    let mut frames = vec![pack(&u, &v)];
    let (mut qu, mut qv) = (vec![0.0; n], vec![0.0; n]);
    for s in 1..=n_steps {
        rates(&u, &v, &mut ku, &mut kv);
        for p in 0..n {
            pu[p] = u[p] + dt * ku[p];
            pv[p] = v[p] + dt * kv[p];
        }
        rates(&pu, &pv, &mut qu, &mut qv);
        let mut peak = 0.0f64;
        for p in 0..n {
            u[p] += 0.5 * dt * (ku[p] + qu[p]);
            v[p] += 0.5 * dt * (kv[p] + qv[p]);
            peak = peak.max(u[p].abs()).max(v[p].abs());
        }
        if !(peak <= params.blowup) {
            return Err(FieldsError::Unstable { t: s as f64 * dt, max: peak });
        }
        if s % params.save_every == 0 {
            frames.push(pack(&u, &v));
        }
    }
    Ok(frames)
}

/// FitzHugh–Nagumo solve packaged as a two-channel trajectory.
pub fn solve_rd(u0: &Array2<f64>, v0: &Array2<f64>, params: &RdParams) -> Result<FieldTrajectory> {
    let frames = solve_rd_with(u0, v0, params, fhn_reaction(params.k))?;
    let mut traj = FieldTrajectory::from_frames(Pde::Rd, &frames, params.dt * params.save_every as f64, RD_DOMAIN)?;
    let mut attrs = BTreeMap::new();
    attrs.insert("solver".into(), serde_json::to_string(params).expect("params serialize"));
    traj.attrs = attrs;
    Ok(traj)
}
