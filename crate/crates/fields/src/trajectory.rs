use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{FieldsError, Result};

/// Which equation produced a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pde {
    Nsv,
    Rd,
    Swe,
}

impl Pde {
    pub fn n_channels(self) -> usize {
        match self {
            Pde::Nsv | Pde::Swe => 1,
            Pde::Rd => 2,
        }
    }

    pub fn default_channels(self) -> Vec<String> {
        let names: &[&str] = match self {
            Pde::Nsv => &["vorticity"],
            Pde::Rd => &["activator", "inhibitor"],
            Pde::Swe => &["height"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pde::Nsv => "nsv",
            Pde::Rd => "rd",
            Pde::Swe => "swe",
        }
    }
}

impl fmt::Display for Pde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pde {
    type Err = FieldsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nsv" => Ok(Pde::Nsv),
            "rd" => Ok(Pde::Rd),
            "swe" => Ok(Pde::Swe),
            other => Err(FieldsError::InvalidArgument(format!("unknown pde tag {other:?}"))),
        }
    }
}

/// A time-ordered stack of 2D fields, `data[t, c, y, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTrajectory {
    pub pde: Pde,
    pub data: Array4<f32>,
    /// Physical time between consecutive frames.
    pub dt_frame: f64,
    /// `[[lo, hi]; 2]` bounds of the first and second spatial axes.
    pub domain: [[f64; 2]; 2],
    pub channels: Vec<String>,
    /// Free-form generator metadata (seed, solver parameters, source file).
    pub attrs: BTreeMap<String, String>,
}

impl FieldTrajectory {
    pub fn new(pde: Pde, data: Array4<f32>, dt_frame: f64, domain: [[f64; 2]; 2]) -> Result<Self> {
        let t = FieldTrajectory {
            pde,
            data,
            dt_frame,
            domain,
            channels: pde.default_channels(),
            attrs: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Builds a trajectory from `f64` frames shaped `[C, H, W]`.
    pub fn from_frames(pde: Pde, frames: &[Array3<f64>], dt_frame: f64, domain: [[f64; 2]; 2]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| FieldsError::Shape("no frames".into()))?;
        let (c, h, w) = first.dim();
        let mut data = Array4::<f32>::zeros((frames.len(), c, h, w));
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != (c, h, w) {
                return Err(FieldsError::Shape(format!("frame {i} has shape {:?}, expected {:?}", f.dim(), (c, h, w))));
            }
            data.slice_mut(s![i, .., .., ..]).assign(&f.mapv(|v| v as f32));
        }
        Self::new(pde, data, dt_frame, domain)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, c, h, w) = self.data.dim();
        if t < 2 {
            return Err(FieldsError::Shape(format!("trajectory needs at least 2 frames, has {t}")));
        }
        if h == 0 || w == 0 {
            return Err(FieldsError::Shape("empty spatial grid".into()));
        }
        if c != self.pde.n_channels() {
            return Err(FieldsError::Shape(format!("{} expects {} channel(s), got {c}", self.pde, self.pde.n_channels())));
        }
        if self.channels.len() != c {
            return Err(FieldsError::Shape(format!("{} channel names for {c} channels", self.channels.len())));
        }
        if !(self.dt_frame.is_finite() && self.dt_frame > 0.0) {
            return Err(FieldsError::InvalidArgument(format!("dt_frame must be positive, got {}", self.dt_frame)));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(FieldsError::NonFinite { what: format!("in trajectory data at flat index {pos}") });
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    /// `(C, H, W)` of a single frame.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.data.dim();
        (c, h, w)
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.slice(s![t, .., .., ..])
    }

    pub fn frame_f64(&self, t: usize) -> Array3<f64> {
        self.frame(t).mapv(|v| v as f64)
    }

    /// Channel `c` of frame `t` as an `H×W` array.
    pub fn field(&self, t: usize, c: usize) -> Array2<f64> {
        self.data.slice(s![t, c, .., ..]).mapv(|v| v as f64)
    }

    /// Minimum and maximum value over all frames and channels.
    pub fn value_range(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Keeps the first `n` frames.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n < 2 || n > self.n_frames() {
            return Err(FieldsError::InvalidArgument(format!("cannot keep {n} of {} frames", self.n_frames())));
        }
        let mut out = self.clone();
        out.data = self.data.slice(s![..n, .., .., ..]).to_owned();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_channel_count_and_nan() {
        let d = Array4::<f32>::zeros((3, 2, 4, 4));
        assert!(FieldTrajectory::new(Pde::Nsv, d.clone(), 1.0, [[0.0, 1.0]; 2]).is_err());
        assert!(FieldTrajectory::new(Pde::Rd, d.clone(), 1.0, [[0.0, 1.0]; 2]).is_ok());
        let mut bad = d;
        bad[[1, 0, 2, 2]] = f32::NAN;
        assert!(matches!(
            FieldTrajectory::new(Pde::Rd, bad, 1.0, [[0.0, 1.0]; 2]),
            Err(FieldsError::NonFinite { .. })
        ));
    }

    #[test]
    fn single_frame_is_rejected() {
        let d = Array4::<f32>::zeros((1, 1, 4, 4));
        assert!(FieldTrajectory::new(Pde::Nsv, d, 1.0, [[0.0, 1.0]; 2]).is_err());
    }

    #[test]
    fn pde_tags_parse() {
        for p in [Pde::Nsv, Pde::Rd, Pde::Swe] {
            assert_eq!(p.as_str().parse::<Pde>().unwrap(), p);
        }
        assert!("heat".parse::<Pde>().is_err());
    }
}
