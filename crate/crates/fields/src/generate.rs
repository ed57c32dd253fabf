//! Seeded batch generation of NSV and RD trajectory sets.
//!
//! Trajectory `i` of a set draws its initial condition from its own ChaCha
//! stream `(seed, i)`, so any subset can be regenerated independently and the
//! output does not depend on generation order.

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FieldsError, Result};
use crate::fft::{bin, freq, Fft2};
use crate::grf::{sample_grf, GrfSpec};
use crate::nsv::{NsvParams, NsvSolver};
use crate::rd::{fhn_reaction, solve_rd_with, RdParams, RD_DOMAIN};
use crate::trajectory::{FieldTrajectory, Pde};

/// NSV set parameters. The solver runs on `grid · oversample` points and
/// frames are spectrally truncated back to `grid`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsvGenConfig {
    pub grid: usize,
    pub oversample: usize,
    pub n_frames: usize,
    pub dt_frame: f64,
    pub dt: f64,
    pub nu: f64,
    pub forcing: f64,
    pub grf: GrfSpec,
}

impl Default for NsvGenConfig {
    fn default() -> Self {
        NsvGenConfig {
            grid: 64,
            oversample: 1,
            n_frames: 50,
            dt_frame: 1.0,
            dt: 1e-2,
            nu: 1e-3,
            forcing: 0.1,
            grf: GrfSpec::default(),
        }
    }
}

impl NsvGenConfig {
    fn steps_per_frame(&self) -> Result<usize> {
        let r = self.dt_frame / self.dt;
        let n = r.round();
        if !(n >= 1.0 && (r - n).abs() < 1e-9 * r.max(1.0)) {
            return Err(FieldsError::InvalidArgument(format!(
                "dt_frame {} is not a multiple of dt {}",
                self.dt_frame, self.dt
            )));
        }
        Ok(n as usize)
    }

    fn validate(&self) -> Result<()> {
        if self.grid < 4 || self.grid % 2 != 0 || self.oversample == 0 || self.n_frames < 2 {
            return Err(FieldsError::InvalidArgument(format!("bad NSV generation config {self:?}")));
        }
        self.steps_per_frame().map(|_| ())
    }
}

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Keeps the modes of an `n×n` field representable on an `m×m` grid
/// (`|k| < m/2` per axis) and resamples onto that grid.
pub fn spectral_downsample(field: &Array2<f64>, m: usize) -> Array2<f64> {
    let (n, n2) = field.dim();
    assert_eq!(n, n2, "square grids only");
    if m == n {
        return field.clone();
    }
    assert!(m < n && m % 2 == 0, "target grid {m} must be even and below {n}");
    let src = Fft2::cached(n, n).forward_real(field.as_slice().expect("standard layout"));
    let mut dst = vec![Complex64::default(); m * m];
    let half = (m / 2) as isize;
    for i in 0..m {
        for j in 0..m {
            let (a, b) = (freq(i, m), freq(j, m));
            if a.abs() >= half || b.abs() >= half {
                continue;
            }
            dst[i * m + j] = src[bin(a, n) * n + bin(b, n)];
        }
    }
    let scale = (m * m) as f64 / (n * n) as f64;
    let out = Fft2::cached(m, m).inverse_real(&dst);
    Array2::from_shape_vec((m, m), out.into_iter().map(|v| v * scale).collect()).expect("grid shape")
}

/// Trajectory `index` of the NSV set defined by `(cfg, seed)`.
pub fn nsv_trajectory(cfg: &NsvGenConfig, seed: u64, index: usize) -> Result<FieldTrajectory> {
    cfg.validate()?;
    let every = cfg.steps_per_frame()?;
    let n = cfg.grid * cfg.oversample;
    let w0 = sample_grf(&cfg.grf, n, n, &mut stream(seed, index));
    let params = NsvParams {
        nu: cfg.nu,
        dt: cfg.dt,
        t_end: cfg.dt * (every * (cfg.n_frames - 1)) as f64,
        save_every: every,
        forcing: cfg.forcing,
        ..NsvParams::default()
    };
    let mut solver = NsvSolver::new(&w0, params)?;
    let frames: Vec<Array3<f64>> = solver
        .run()?
        .into_iter()
        .map(|f| spectral_downsample(&f, cfg.grid).insert_axis(ndarray::Axis(0)))
        .collect();
    let mut traj = FieldTrajectory::from_frames(Pde::Nsv, &frames, cfg.dt_frame, [[0.0, 1.0]; 2])?;
    traj.attrs.insert("generator".into(), serde_json::to_string(cfg).expect("config serializes"));
    traj.attrs.insert("seed".into(), seed.to_string());
    traj.attrs.insert("index".into(), index.to_string());
    traj.attrs.insert("max_cfl".into(), format!("{:.6e}", solver.report.max_cfl));
    Ok(traj)
}

/// `n_traj` NSV trajectories; `on_done(i)` fires after each.
pub fn generate_nsv(cfg: &NsvGenConfig, n_traj: usize, seed: u64, mut on_done: impl FnMut(usize)) -> Result<Vec<FieldTrajectory>> {
    (0..n_traj)
        .map(|i| {
            let t = nsv_trajectory(cfg, seed, i)?;
            on_done(i);
            Ok(t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdGenConfig {
    pub grid: usize,
    /// Number of saved frames after the initial state; the set spans
    /// `t ∈ [0, t_end]` in `n_frames` steps.
    pub n_frames: usize,
    pub params: RdParams,
}

impl Default for RdGenConfig {
    fn default() -> Self {
        RdGenConfig { grid: 128, n_frames: 100, params: RdParams::default() }
    }
}

/// Trajectory `index` of the RD set: `u0, v0 ~ N(0, 1)` i.i.d. per cell.
/// The initial state is dropped so frames cover `t ∈ (0, t_end]`.
pub fn rd_trajectory(cfg: &RdGenConfig, seed: u64, index: usize) -> Result<FieldTrajectory> {
    let n = cfg.grid;
    if n < 2 || cfg.n_frames < 2 {
        return Err(FieldsError::InvalidArgument(format!("bad RD generation config {cfg:?}")));
    }
    let dt_frame = cfg.params.t_end / cfg.n_frames as f64;
    let steps = dt_frame / cfg.params.dt;
    let every = steps.round();
    if !(every >= 1.0 && (steps - every).abs() < 1e-9 * steps) {
        return Err(FieldsError::InvalidArgument(format!(
            "frame spacing {dt_frame} is not a multiple of dt {}",
            cfg.params.dt
        )));
    }
    let mut rng = stream(seed, index);
    let u0 = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
    let v0 = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
    let params = RdParams { save_every: every as usize, ..cfg.params.clone() };
    let frames = solve_rd_with(&u0, &v0, &params, fhn_reaction(params.k))?;
    let mut traj = FieldTrajectory::from_frames(Pde::Rd, &frames[1..], dt_frame, RD_DOMAIN)?;
    traj.attrs.insert("generator".into(), serde_json::to_string(cfg).expect("config serializes"));
    traj.attrs.insert("seed".into(), seed.to_string());
    traj.attrs.insert("index".into(), index.to_string());
    Ok(traj)
}

pub fn generate_rd(cfg: &RdGenConfig, n_traj: usize, seed: u64, mut on_done: impl FnMut(usize)) -> Result<Vec<FieldTrajectory>> {
    (0..n_traj)
        .map(|i| {
            let t = rd_trajectory(cfg, seed, i)?;
            on_done(i);
            Ok(t)
        })
        .collect()
}

/// Frames `[start, start + len)` of every trajectory.
pub fn window(trajs: &[FieldTrajectory], start: usize, len: usize) -> Result<Vec<FieldTrajectory>> {
    trajs
        .iter()
        .map(|t| {
            if start + len > t.n_frames() {
                return Err(FieldsError::Shape(format!("window {start}+{len} exceeds {} frames", t.n_frames())));
            }
            let mut out = t.clone();
            out.data = t.data.slice(s![start..start + len, .., .., ..]).to_owned();
            out.attrs.insert("window_start".into(), start.to_string());
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_keeps_low_modes() {
        let n = 16;
        let f = Array2::from_shape_fn((n, n), |(i, j)| {
            let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
            (2.0 * std::f64::consts::PI * (x + 2.0 * y)).cos() + 0.3 * (2.0 * std::f64::consts::PI * 6.0 * x).sin()
        });
        let d = spectral_downsample(&f, 8);
        for i in 0..8 {
            for j in 0..8 {
                let (x, y) = (i as f64 / 8.0, j as f64 / 8.0);
                let want = (2.0 * std::f64::consts::PI * (x + 2.0 * y)).cos();
                assert!((d[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectories_are_seeded_per_index() {
        let cfg = NsvGenConfig { grid: 8, n_frames: 3, dt_frame: 0.1, dt: 0.05, ..Default::default() };
        let all = generate_nsv(&cfg, 3, 7, |_| {}).unwrap();
        let again = nsv_trajectory(&cfg, 7, 2).unwrap();
        assert_eq!(all[2].data, again.data);
        assert_ne!(all[0].data, all[1].data);
        assert_eq!(all[0].n_frames(), 3);
    }

    #[test]
    fn rd_drops_the_initial_noise_frame() {
        let cfg = RdGenConfig {
            grid: 8,
            n_frames: 4,
            params: RdParams { t_end: 0.2, dt: 0.01, ..Default::default() },
        };
        let t = rd_trajectory(&cfg, 1, 0).unwrap();
        assert_eq!(t.n_frames(), 4);
        assert!((t.dt_frame - 0.05).abs() < 1e-15);
        assert_eq!(t.frame_shape(), (2, 8, 8));
    }

    #[test]
    fn mismatched_spacing_is_rejected() {
        let cfg = NsvGenConfig { grid: 8, dt_frame: 0.15, dt: 0.1, ..Default::default() };
        assert!(nsv_trajectory(&cfg, 0, 0).is_err());
    }
}
