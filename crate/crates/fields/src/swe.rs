//! Ingest of shallow-water (radial dam break) trajectories stored in the
//! PDEBench layout: one group per sample (`"0000"`, `"0001"`, …), each with
//! a `data` array shaped `(T, X, Y, 1)` and optional `grid/t`, `grid/x`,
//! `grid/y` coordinate arrays.

use std::path::Path;

use ndarray::{Array4, Axis};

use crate::error::{FieldsError, Result};
use crate::store::create_file;
use crate::trajectory::{FieldTrajectory, Pde};

/// Domain used when a file carries no spatial grid.
pub const SWE_DEFAULT_DOMAIN: [[f64; 2]; 2] = [[-2.5, 2.5], [-2.5, 2.5]];

fn schema(path: &Path, msg: impl std::fmt::Display) -> FieldsError {
    FieldsError::Schema(format!("{}: {msg}", path.display()))
}

fn span(group: &hdf5::Group, name: &str) -> Option<Vec<f64>> {
    if !group.link_exists(name) {
        return None;
    }
    group.dataset(name).ok()?.read_raw::<f64>().ok().or_else(|| {
        group.dataset(name).ok()?.read_raw::<f32>().ok().map(|v| v.into_iter().map(f64::from).collect())
    })
}

pub fn ingest_swe(path: &Path) -> Result<Vec<FieldTrajectory>> {
    if !path.exists() {
        return Err(FieldsError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "SWE file not found"),
        });
    }
    let file = hdf5::File::open(path).map_err(|e| schema(path, e))?;
    let mut names = file.member_names().map_err(|e| schema(path, e))?;
    names.retain(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()));
    names.sort();
    if names.is_empty() {
        return Err(schema(path, "no sample groups (expected \"0000\", \"0001\", ...)"));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let g = file.group(&name).map_err(|e| schema(path, format!("group {name}: {e}")))?;
        if !g.link_exists("data") {
            return Err(schema(path, format!("group {name} has no `data` array")));
        }
        let ds = g.dataset("data").map_err(|_| schema(path, format!("group {name} has no `data` array")))?;
        let shape = ds.shape();
        if shape.len() != 4 || shape[3] != 1 {
            return Err(schema(path, format!("group {name}: `data` shape {shape:?}, expected (T, X, Y, 1)")));
        }
        let flat: Vec<f32> = ds.read_raw().map_err(|e| schema(path, format!("group {name}: {e}")))?;
        let data = Array4::from_shape_vec((shape[0], shape[1], shape[2], 1), flat)
            .map_err(|e| schema(path, format!("group {name}: {e}")))?;
        // (T, X, Y, 1) -> (T, 1, X, Y)
        let data = data.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();
        let grid = if g.link_exists("grid") { g.group("grid").ok() } else { None };
        let dt = grid
            .as_ref()
            .and_then(|gr| span(gr, "t"))
            .filter(|t| t.len() >= 2)
            .map(|t| t[1] - t[0])
            .unwrap_or(1.0);
        let axis_span = |n: &str, fallback: [f64; 2]| {
            grid.as_ref().and_then(|gr| span(gr, n)).filter(|v| v.len() >= 2).map(|v| {
                let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
                // Cell-centred coordinates: widen by half a cell on each side.
                let half = (hi - lo) / (v.len() - 1) as f64 / 2.0;
                [lo - half, hi + half]
            }).unwrap_or(fallback)
        };
        let domain = [axis_span("x", SWE_DEFAULT_DOMAIN[0]), axis_span("y", SWE_DEFAULT_DOMAIN[1])];
        let mut tr = FieldTrajectory::new(Pde::Swe, data, dt, domain)
            .map_err(|e| schema(path, format!("group {name}: {e}")))?;
        tr.attrs.insert("source".into(), path.display().to_string());
        tr.attrs.insert("sample".into(), name);
        out.push(tr);
    }
    Ok(out)
}

/// Writes trajectories in the PDEBench SWE layout; used to build fixtures.
pub fn write_pdebench_swe(trajs: &[FieldTrajectory], path: &Path) -> Result<()> {
    let file = create_file(path).map_err(|e| schema(path, e))?;
    for (i, tr) in trajs.iter().enumerate() {
        let (t, c, h, w) = tr.data.dim();
        if c != 1 {
            return Err(FieldsError::Shape(format!("SWE trajectories have one channel, got {c}")));
        }
        let g = file.create_group(&format!("{i:04}")).map_err(|e| schema(path, e))?;
        let tyx: Vec<f32> = tr.data.index_axis(Axis(1), 0).iter().cloned().collect();
        g.new_dataset::<f32>()
            .shape([t, h, w, 1])
            .create("data")
            .and_then(|d| d.write_raw(&tyx))
            .map_err(|e| schema(path, e))?;
        let grid = g.create_group("grid").map_err(|e| schema(path, e))?;
        let times: Vec<f32> = (0..t).map(|k| (k as f64 * tr.dt_frame) as f32).collect();
        let centres = |n: usize, d: [f64; 2]| -> Vec<f32> {
            (0..n).map(|k| (d[0] + (k as f64 + 0.5) * (d[1] - d[0]) / n as f64) as f32).collect()
        };
        for (name, v) in [("t", times), ("x", centres(h, tr.domain[0])), ("y", centres(w, tr.domain[1]))] {
            grid.new_dataset::<f32>().shape([v.len()]).create(name).and_then(|d| d.write_raw(&v)).map_err(|e| schema(path, e))?;
        }
    }
    file.close().map_err(|e| schema(path, e))
}
