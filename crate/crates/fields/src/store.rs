//! HDF5 dataset container.
//!
//! Layout (all at the file root):
//!
//! | object          | type              | content                                   |
//! |-----------------|-------------------|-------------------------------------------|
//! | `data`          | f32 `(N,T,C,H,W)` | trajectory stack                          |
//! | `format`        | string attribute  | `"tempo-dataset"`                         |
//! | `version`       | u32 attribute     | [`DATASET_VERSION`]                       |
//! | `pde`           | string attribute  | `nsv`, `rd` or `swe`                      |
//! | `dt_frame`      | f64 attribute     | frame spacing                             |
//! | `domain`        | f64 `[4]` attr.   | `lo₁, hi₁, lo₂, hi₂`                      |
//! | `channels`      | string attribute  | JSON list of channel names                |
//! | `traj_attrs`    | string attribute  | JSON list of per-trajectory maps          |
//! | `element_count` | u64 attribute     | `N·T·C·H·W`, written last                 |
//!
//! `element_count` is written after the data block, so a file whose count is
//! missing or disagrees with `data` is treated as a partial write.

use std::collections::BTreeMap;
use std::path::Path;

use hdf5::types::VarLenUnicode;
use ndarray::{Array4, Axis};
use sha2::{Digest, Sha256};

use crate::error::{FieldsError, Result};
use crate::trajectory::{FieldTrajectory, Pde};

pub const DATASET_FORMAT: &str = "tempo-dataset";
pub const DATASET_VERSION: u32 = 1;

fn h5err(path: &Path) -> impl Fn(hdf5::Error) -> FieldsError + '_ {
    move |e| FieldsError::Schema(format!("{}: {e}", path.display()))
}

fn str_attr(loc: &hdf5::Location, name: &str, value: &str) -> hdf5::Result<()> {
    let v: VarLenUnicode = value.parse().map_err(|e| hdf5::Error::from(format!("{e:?}")))?;
    loc.new_attr::<VarLenUnicode>().create(name)?.write_scalar(&v)
}

fn read_str_attr(loc: &hdf5::Location, name: &str) -> hdf5::Result<String> {
    Ok(loc.attr(name)?.read_scalar::<VarLenUnicode>()?.as_str().to_string())
}

/// Creates an HDF5 file without object modification times, so identical
/// content yields identical bytes.
pub(crate) fn create_file(path: &Path) -> hdf5::Result<hdf5::File> {
    hdf5::File::with_options().with_fcpl(|p| p.obj_track_times(false)).create(path)
}

/// Writes trajectories sharing pde, shape and metadata into one file.
/// The file is written under a temporary name and renamed into place.
pub fn write_dataset(trajs: &[FieldTrajectory], path: &Path) -> Result<()> {
    let first = trajs.first().ok_or_else(|| FieldsError::Shape("cannot write an empty dataset".into()))?;
    let (t, c, h, w) = first.data.dim();
    for (i, tr) in trajs.iter().enumerate() {
        tr.validate()?;
        if tr.data.dim() != (t, c, h, w)
            || tr.pde != first.pde
            || tr.dt_frame != first.dt_frame
            || tr.domain != first.domain
            || tr.channels != first.channels
        {
            return Err(FieldsError::Shape(format!("trajectory {i} does not match the first trajectory's shape or metadata")));
        }
    }
    let mut flat = Vec::with_capacity(trajs.len() * t * c * h * w);
    for tr in trajs {
        flat.extend(tr.data.iter().cloned());
    }
    let tmp = path.with_extension("h5.partial");
    let e = h5err(path);
    {
        let file = create_file(&tmp).map_err(&e)?;
        let ds = file.new_dataset::<f32>().shape([trajs.len(), t, c, h, w]).create("data").map_err(&e)?;
        ds.write_raw(&flat).map_err(&e)?;
        str_attr(&file, "format", DATASET_FORMAT).map_err(&e)?;
        file.new_attr::<u32>().create("version").and_then(|a| a.write_scalar(&DATASET_VERSION)).map_err(&e)?;
        str_attr(&file, "pde", first.pde.as_str()).map_err(&e)?;
        file.new_attr::<f64>().create("dt_frame").and_then(|a| a.write_scalar(&first.dt_frame)).map_err(&e)?;
        let dom = [first.domain[0][0], first.domain[0][1], first.domain[1][0], first.domain[1][1]];
        file.new_attr::<f64>().shape([4]).create("domain").and_then(|a| a.write_raw(&dom)).map_err(&e)?;
        str_attr(&file, "channels", &serde_json::to_string(&first.channels).expect("names serialize")).map_err(&e)?;
        let per: Vec<&BTreeMap<String, String>> = trajs.iter().map(|t| &t.attrs).collect();
        str_attr(&file, "traj_attrs", &serde_json::to_string(&per).expect("attrs serialize")).map_err(&e)?;
        let count = flat.len() as u64;
        file.new_attr::<u64>().create("element_count").and_then(|a| a.write_scalar(&count)).map_err(&e)?;
        file.close().map_err(&e)?;
    }
    std::fs::rename(&tmp, path).map_err(|source| FieldsError::Io { path: path.display().to_string(), source })
}

pub fn read_dataset(path: &Path) -> Result<Vec<FieldTrajectory>> {
    if !path.exists() {
        return Err(FieldsError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        });
    }
    let e = h5err(path);
    let file = hdf5::File::open(path).map_err(&e)?;
    let attrs = file.attr_names().map_err(&e)?;
    for required in ["format", "version", "element_count"] {
        if !attrs.iter().any(|a| a == required) {
            let hint = if required == "element_count" { " (partial write?)" } else { "" };
            return Err(FieldsError::Schema(format!("{}: missing {required} attribute{hint}", path.display())));
        }
    }
    if !file.link_exists("data") {
        return Err(FieldsError::Schema(format!("{}: missing `data` array", path.display())));
    }
    let format = read_str_attr(&file, "format").map_err(|_| FieldsError::Schema(format!("{}: missing format attribute", path.display())))?;
    if format != DATASET_FORMAT {
        return Err(FieldsError::Schema(format!("{}: format {format:?} is not {DATASET_FORMAT:?}", path.display())));
    }
    let version: u32 = file.attr("version").and_then(|a| a.read_scalar()).map_err(&e)?;
    if version != DATASET_VERSION {
        return Err(FieldsError::Schema(format!("{}: dataset version {version}, expected {DATASET_VERSION}", path.display())));
    }
    let ds = file.dataset("data").map_err(|_| FieldsError::Schema(format!("{}: missing `data` array", path.display())))?;
    let shape = ds.shape();
    if shape.len() != 5 {
        return Err(FieldsError::Schema(format!("{}: `data` has rank {}, expected 5", path.display(), shape.len())));
    }
    let flat: Vec<f32> = ds.read_raw().map_err(&e)?;
    let count: u64 = file
        .attr("element_count")
        .and_then(|a| a.read_scalar())
        .map_err(|_| FieldsError::Schema(format!("{}: missing element_count (partial write?)", path.display())))?;
    if count as usize != flat.len() || flat.len() != shape.iter().product::<usize>() {
        return Err(FieldsError::Schema(format!(
            "{}: element_count {count} disagrees with data length {} (partial write?)",
            path.display(),
            flat.len()
        )));
    }
    let pde: Pde = read_str_attr(&file, "pde").map_err(&e)?.parse()?;
    let dt_frame: f64 = file.attr("dt_frame").and_then(|a| a.read_scalar()).map_err(&e)?;
    let dom: Vec<f64> = file.attr("domain").and_then(|a| a.read_raw()).map_err(&e)?;
    if dom.len() != 4 {
        return Err(FieldsError::Schema(format!("{}: domain attribute must hold 4 values", path.display())));
    }
    let channels: Vec<String> = serde_json::from_str(&read_str_attr(&file, "channels").map_err(&e)?)
        .map_err(|err| FieldsError::Schema(format!("{}: channels: {err}", path.display())))?;
    let per: Vec<BTreeMap<String, String>> = serde_json::from_str(&read_str_attr(&file, "traj_attrs").map_err(&e)?)
        .map_err(|err| FieldsError::Schema(format!("{}: traj_attrs: {err}", path.display())))?;
    if per.len() != shape[0] {
        return Err(FieldsError::Schema(format!("{}: {} attribute maps for {} trajectories", path.display(), per.len(), shape[0])));
    }
    let all = ndarray::Array5::from_shape_vec((shape[0], shape[1], shape[2], shape[3], shape[4]), flat)
        .expect("length checked above");
    let mut out = Vec::with_capacity(shape[0]);
    for (block, attrs) in all.axis_iter(Axis(0)).zip(per) {
        let data: Array4<f32> = block.to_owned();
        let tr = FieldTrajectory {
            pde,
            data,
            dt_frame,
            domain: [[dom[0], dom[1]], [dom[2], dom[3]]],
            channels: channels.clone(),
            attrs,
        };
        tr.validate()?;
        out.push(tr);
    }
    Ok(out)
}

/// SHA-256 of the little-endian data block of all trajectories, in order.
pub fn dataset_fingerprint(trajs: &[FieldTrajectory]) -> String {
    let mut hasher = Sha256::new();
    for t in trajs {
        for v in t.data.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
