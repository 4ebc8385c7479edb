use std::f64::consts::{FRAC_PI_4, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6D};

/// Sample count and range of one grid dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl AxisSpec {
    pub fn new(count: usize, min: f64, max: f64) -> Self {
        Self { count, min, max }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.count == 0 {
            return Err(param(format!("grid dimension {name} has no samples")));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(param(format!(
                "grid dimension {name} has invalid range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / self.count as f64
    }

    /// Cell-centered samples: `min + (i + 0.5) * step`.
    pub fn samples(&self) -> Vec<f64> {
        let step = self.step();
        (0..self.count)
            .map(|i| self.min + (i as f64 + 0.5) * step)
            .collect()
    }
}

/// Sample counts of the rotation and location grids, written `r1xr2xr3:l1xl2xl3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCounts {
    pub rotation: [usize; 3],
    pub location: [usize; 3],
}

impl Default for GridCounts {
    fn default() -> Self {
        Self {
            rotation: [12, 3, 3],
            location: [9, 9, 9],
        }
    }
}

impl FromStr for GridCounts {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || param(format!("grid must look like 12x3x3:9x9x9, got {s:?}"));
        let (rot, loc) = s.split_once(':').ok_or_else(bad)?;
        let triple = |part: &str| -> Result<[usize; 3]> {
            let nums: Vec<usize> = part
                .split('x')
                .map(|n| n.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let arr: [usize; 3] = nums.try_into().map_err(|_| bad())?;
            if arr.contains(&0) {
                return Err(param(format!("grid counts must be >= 1, got {s:?}")));
            }
            Ok(arr)
        };
        Ok(Self {
            rotation: triple(rot)?,
            location: triple(loc)?,
        })
    }
}

impl fmt::Display for GridCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, e, t] = self.rotation;
        let [u, v, d] = self.location;
        write!(f, "{a}x{e}x{t}:{u}x{v}x{d}")
    }
}

/// Counts and ranges of all six grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub azimuth: AxisSpec,
    pub elevation: AxisSpec,
    pub theta: AxisSpec,
    pub u: AxisSpec,
    pub v: AxisSpec,
    pub distance: AxisSpec,
}

/// Default distance range of the location grid.
pub const DEFAULT_DISTANCE_RANGE: (f64, f64) = (2.5, 5.5);

impl GridConfig {
    /// Default ranges for `cam` with the given counts. Centroid ranges span
    /// `cx +- 4.5 s` with `s = round(W / 12)`, so the 9- and 3-sample grids land on
    /// whole-pixel offsets from the image center.
    pub fn for_camera(cam: &CameraIntrinsics, counts: GridCounts) -> Self {
        let span = |n: usize| 4.5 * ((n as f64 / 12.0).round()).max(1.0);
        let (su, sv) = (span(cam.width), span(cam.height));
        let [na, ne, nt] = counts.rotation;
        let [nu, nv, nd] = counts.location;
        Self {
            azimuth: AxisSpec::new(na, 0.0, TAU),
            elevation: AxisSpec::new(ne, -FRAC_PI_4, FRAC_PI_4),
            theta: AxisSpec::new(nt, -FRAC_PI_4, FRAC_PI_4),
            u: AxisSpec::new(nu, cam.cx() - su, cam.cx() + su),
            v: AxisSpec::new(nv, cam.cy() - sv, cam.cy() + sv),
            distance: AxisSpec::new(nd, DEFAULT_DISTANCE_RANGE.0, DEFAULT_DISTANCE_RANGE.1),
        }
    }

    pub fn counts(&self) -> GridCounts {
        GridCounts {
            rotation: [self.azimuth.count, self.elevation.count, self.theta.count],
            location: [self.u.count, self.v.count, self.distance.count],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.azimuth.validate("azimuth")?;
        self.elevation.validate("elevation")?;
        self.theta.validate("theta")?;
        self.u.validate("u")?;
        self.v.validate("v")?;
        self.distance.validate("d")?;
        if self.distance.min <= 0.0 {
            return Err(param("grid distances must be positive"));
        }
        Ok(())
    }
}

/// Cartesian rotation and location samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrid {
    config: GridConfig,
    rotations: Vec<[f64; 3]>,
    us: Vec<f64>,
    vs: Vec<f64>,
    distances: Vec<f64>,
}

pub fn build_pose_grid(config: &GridConfig) -> Result<PoseGrid> {
    config.validate()?;
    let mut rotations = Vec::new();
    for a in config.azimuth.samples() {
        for e in config.elevation.samples() {
            for t in config.theta.samples() {
                rotations.push([a, e, t]);
            }
        }
    }
    Ok(PoseGrid {
        config: *config,
        rotations,
        us: config.u.samples(),
        vs: config.v.samples(),
        distances: config.distance.samples(),
    })
}

impl PoseGrid {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    /// `(azimuth, elevation, theta)` samples, azimuth-major.
    pub fn rotations(&self) -> &[[f64; 3]] {
        &self.rotations
    }

    pub fn us(&self) -> &[f64] {
        &self.us
    }

    pub fn vs(&self) -> &[f64] {
        &self.vs
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn num_rotations(&self) -> usize {
        self.rotations.len()
    }

    pub fn num_locations(&self) -> usize {
        self.us.len() * self.vs.len() * self.distances.len()
    }

    /// Location samples `(u, v, d)`, u-major.
    pub fn locations(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.num_locations());
        for &u in &self.us {
            for &v in &self.vs {
                for &d in &self.distances {
                    out.push([u, v, d]);
                }
            }
        }
        out
    }

    pub fn pose(&self, rotation: usize, u: usize, v: usize, distance: usize) -> Pose6D {
        let [a, e, t] = self.rotations[rotation];
        Pose6D::new(a, e, t, self.us[u], self.vs[v], self.distances[distance])
    }

    /// Every grid pose, rotation-major.
    pub fn poses(&self) -> Vec<Pose6D> {
        let mut out = Vec::with_capacity(self.num_rotations() * self.num_locations());
        for r in 0..self.num_rotations() {
            for [u, v, d] in self.locations() {
                let [a, e, t] = self.rotations[r];
                out.push(Pose6D::new(a, e, t, u, v, d));
            }
        }
        out
    }
}
