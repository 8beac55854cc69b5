//! Latitude-longitude grids and multi-channel fields on them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::healpix::SphericalPoint;

/// Surface variables, in manifest order.
pub const SURFACE_VARIABLES: [&str; 9] = ["t2m", "d2m", "u10", "v10", "msl", "sp", "u100", "v100", "tcwv"];
/// Variables carried on pressure levels.
pub const ATMOSPHERIC_VARIABLES: [&str; 5] = ["t", "u", "v", "z", "r"];
/// Pressure levels in hPa.
pub const PRESSURE_LEVELS: [u32; 9] = [1000, 925, 850, 700, 500, 300, 250, 200, 50];
/// Static inputs: land-sea mask and surface geopotential.
pub const STATIC_VARIABLES: [&str; 2] = ["lsm", "z_sfc"];

pub const STATE_CHANNELS: usize = 54;
pub const INPUT_CHANNELS: usize = 2 * STATE_CHANNELS + STATIC_VARIABLES.len();

/// The 54 predicted channels: surface variables, then each atmospheric
/// variable on every pressure level (`t_1000`, `t_925`, ...).
pub fn state_manifest() -> Vec<String> {
    let mut names: Vec<String> = SURFACE_VARIABLES.iter().map(|s| s.to_string()).collect();
    for var in ATMOSPHERIC_VARIABLES {
        for lvl in PRESSURE_LEVELS {
            names.push(format!("{var}_{lvl}"));
        }
    }
    names
}

pub fn static_manifest() -> Vec<String> {
    STATIC_VARIABLES.iter().map(|s| s.to_string()).collect()
}

/// Network input layout: previous state, current state, statics.
pub fn input_manifest() -> Vec<String> {
    let state = state_manifest();
    let mut names = Vec::with_capacity(INPUT_CHANNELS);
    names.extend(state.iter().map(|s| format!("prev:{s}")));
    names.extend(state.iter().map(|s| format!("cur:{s}")));
    names.extend(static_manifest());
    names
}

/// A regular grid: latitudes from +90 down to -90 inclusive, longitudes
/// from 0 in steps of `360 / n_lon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    n_lat: usize,
    n_lon: usize,
}

impl GridSpec {
    pub fn new(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 || n_lon < 4 {
            return Err(Error::InvalidGrid(format!(
                "{n_lat}x{n_lon}: need at least 2 latitudes and 4 longitudes"
            )));
        }
        Ok(GridSpec { n_lat, n_lon })
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn num_nodes(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn lat(&self, i: usize) -> f64 {
        90.0 - 180.0 * i as f64 / (self.n_lat - 1) as f64
    }

    pub fn lon(&self, j: usize) -> f64 {
        360.0 * j as f64 / self.n_lon as f64
    }

    pub fn lat_values(&self) -> Vec<f64> {
        (0..self.n_lat).map(|i| self.lat(i)).collect()
    }

    pub fn lon_values(&self) -> Vec<f64> {
        (0..self.n_lon).map(|j| self.lon(j)).collect()
    }

    /// Grid node `g = i * n_lon + j` as a point on the sphere.
    pub fn node_point(&self, g: usize) -> SphericalPoint {
        let (i, j) = (g / self.n_lon, g % self.n_lon);
        SphericalPoint::new(self.lat(i), self.lon(j)).expect("grid coordinates are valid")
    }

    pub fn node_points(&self) -> Vec<SphericalPoint> {
        (0..self.num_nodes()).map(|g| self.node_point(g)).collect()
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n_lat, self.n_lon)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `LATxLON`, e.g. `721x1440`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::InvalidGrid(format!("expected LATxLON, got `{s}`")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidGrid(format!("bad grid extent `{t}` in `{s}`")))
        };
        GridSpec::new(parse(a)?, parse(b)?)
    }
}

/// A `channels x n_lat x n_lon` field, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    grid: GridSpec,
    manifest: Vec<String>,
    data: Vec<f64>,
}

impl GridField {
    pub fn new(grid: GridSpec, manifest: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let expected = manifest.len() * grid.num_nodes();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "field data has {} values, expected {expected}",
                data.len()
            )));
        }
        let mut sorted: Vec<&String> = manifest.iter().collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Manifest("duplicate channel names".into()));
        }
        Ok(GridField { grid, manifest, data })
    }

    pub fn zeros(grid: GridSpec, manifest: Vec<String>) -> Self {
        let len = manifest.len() * grid.num_nodes();
        GridField {
            grid,
            manifest,
            data: vec![0.0; len],
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn manifest(&self) -> &[String] {
        &self.manifest
    }

    pub fn channels(&self) -> usize {
        self.manifest.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.num_nodes();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.num_nodes();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.manifest.iter().position(|m| m == name)
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.grid.n_lat + i) * self.grid.n_lon + j]
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let c = pos / self.grid.num_nodes();
            return Err(Error::NonFinite(format!("{what}, channel `{}`", self.manifest[c])));
        }
        Ok(())
    }

    /// Checks that grid and manifest agree with `other`.
    pub fn check_compatible(&self, other: &GridField, what: &str) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Shape(format!("{what}: grid {} vs {}", self.grid, other.grid)));
        }
        if self.manifest != other.manifest {
            return Err(Error::Manifest(format!("{what}: channel manifests differ")));
        }
        Ok(())
    }

    pub fn expect_manifest(&self, expected: &[String], what: &str) -> Result<()> {
        if self.manifest != expected {
            return Err(Error::Manifest(format!(
                "{what}: expected {} channels starting `{}`, got {} starting `{}`",
                expected.len(),
                expected.first().map(String::as_str).unwrap_or(""),
                self.manifest.len(),
                self.manifest.first().map(String::as_str).unwrap_or("")
            )));
        }
        Ok(())
    }

    /// Node-major copy: row `g` holds every channel at grid node `g`.
    pub fn to_node_major(&self) -> Vec<f64> {
        let (c, n) = (self.channels(), self.grid.num_nodes());
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for g in 0..n {
                out[g * c + ch] = self.data[ch * n + g];
            }
        }
        out
    }

    pub fn from_node_major(grid: GridSpec, manifest: Vec<String>, rows: &[f64]) -> Result<Self> {
        let (c, n) = (manifest.len(), grid.num_nodes());
        if rows.len() != c * n {
            return Err(Error::Shape(format!(
                "node-major data has {} values, expected {}",
                rows.len(),
                c * n
            )));
        }
        let mut data = vec![0.0; c * n];
        for g in 0..n {
            for ch in 0..c {
                data[ch * n + g] = rows[g * c + ch];
            }
        }
        GridField::new(grid, manifest, data)
    }

    /// Rotates every channel eastward by `shift` longitude columns.
    pub fn roll_lon(&self, shift: usize) -> GridField {
        let mut out = self.clone();
        let (n_lat, n_lon) = (self.grid.n_lat, self.grid.n_lon);
        for c in 0..self.channels() {
            for i in 0..n_lat {
                for j in 0..n_lon {
                    out.data[(c * n_lat + i) * n_lon + (j + shift) % n_lon] = self.data[(c * n_lat + i) * n_lon + j];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_have_the_expected_sizes() {
        assert_eq!(state_manifest().len(), STATE_CHANNELS);
        assert_eq!(input_manifest().len(), 110);
        assert_eq!(state_manifest()[9], "t_1000");
        assert_eq!(state_manifest()[53], "r_50");
    }

    #[test]
    fn grid_parsing_and_coordinates() {
        let g: GridSpec = "721x1440".parse().unwrap();
        assert_eq!(g.num_nodes(), 1_038_240);
        assert_eq!(g.lat(0), 90.0);
        assert_eq!(g.lat(720), -90.0);
        assert_eq!(g.lat(360), 0.0);
        assert_eq!(g.lon(1), 0.25);
        assert!("3x2".parse::<GridSpec>().is_err());
        assert!("1x8".parse::<GridSpec>().is_err());
        assert!("abc".parse::<GridSpec>().is_err());
    }

    #[test]
    fn node_major_round_trip() {
        let grid = GridSpec::new(3, 4).unwrap();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let f = GridField::new(grid, vec!["a".into(), "b".into()], data).unwrap();
        let rows = f.to_node_major();
        assert_eq!(&rows[..4], &[0.0, 12.0, 1.0, 13.0]);
        let back = GridField::from_node_major(grid, f.manifest().to_vec(), &rows).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn duplicate_channels_rejected() {
        let grid = GridSpec::new(2, 4).unwrap();
        assert!(GridField::new(grid, vec!["a".into(), "a".into()], vec![0.0; 16]).is_err());
    }
}
