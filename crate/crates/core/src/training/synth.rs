//! Smooth synthetic weather: a few band-limited field families drifting
//! eastward at constant angular speed, mapped onto every state channel.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{state_manifest, static_manifest, GridField, GridSpec, STATE_CHANNELS};

pub const FAMILIES: usize = 4;
const WAVENUMBERS: usize = 3;
pub const NOISE: f64 = 0.02;

/// States `X^0 .. X^{len-1}` plus the static fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub states: Vec<GridField>,
    pub statics: GridField,
}

impl Dataset {
    pub fn grid(&self) -> GridSpec {
        self.statics.grid()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Family {
    /// Radians per step.
    omega: f64,
    zonal: [f64; 2],
    amp: [f64; WAVENUMBERS],
    phase: [f64; WAVENUMBERS],
    shape: [[f64; 2]; WAVENUMBERS],
}

impl Family {
    fn value(&self, lat: f64, lon: f64, t: f64) -> f64 {
        let (s, c) = (lat.sin(), lat.cos());
        let mut v = self.zonal[0] * s + self.zonal[1] * 0.5 * (3.0 * s * s - 1.0);
        for m in 0..WAVENUMBERS {
            let k = (m + 1) as f64;
            let profile = c.powi(m as i32 + 1) * (1.0 + self.shape[m][0] * s + self.shape[m][1] * s * s);
            v += self.amp[m] * profile * (k * (lon - self.omega * t) + self.phase[m]).cos();
        }
        v
    }
}

#[derive(Clone, Debug)]
struct ChannelMap {
    family: usize,
    offset: f64,
    scale: f64,
    /// Weight of a channel-specific stationary latitude profile.
    own: f64,
}

/// Generator parameters drawn from one seed; fields at any time index are
/// reproducible, so training and validation spans can be cut from one stream.
#[derive(Clone, Debug)]
pub struct SynthGenerator {
    seed: u64,
    families: Vec<Family>,
    channels: Vec<ChannelMap>,
}

impl SynthGenerator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let families = (0..FAMILIES)
            .map(|f| {
                // Speeds spread over 6..14 degrees per step.
                let omega = (6.0 + 8.0 * (f as f64 + rng.random_range(0.0..1.0)) / FAMILIES as f64).to_radians();
                Family {
                    omega,
                    zonal: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                    amp: std::array::from_fn(|m| rng.random_range(0.5..1.0) / (m + 1) as f64),
                    phase: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
                    shape: std::array::from_fn(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]),
                }
            })
            .collect();
        let channels = (0..STATE_CHANNELS)
            .map(|c| ChannelMap {
                family: c % FAMILIES,
                offset: rng.random_range(-100.0..300.0),
                scale: rng.random_range(1.0..50.0),
                own: rng.random_range(-0.3..0.3),
            })
            .collect();
        SynthGenerator {
            seed,
            families,
            channels,
        }
    }

    /// Angular speed of the family driving `channel`, in radians per step.
    pub fn channel_speed(&self, channel: usize) -> f64 {
        self.families[self.channels[channel].family].omega
    }

    /// Noise-free state at time index `t`.
    pub fn clean_state(&self, grid: GridSpec, t: usize) -> GridField {
        self.state_with_noise(grid, t, 0.0)
    }

    pub fn state(&self, grid: GridSpec, t: usize) -> GridField {
        self.state_with_noise(grid, t, NOISE)
    }

    fn state_with_noise(&self, grid: GridSpec, t: usize, noise: f64) -> GridField {
        let n = grid.num_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let coords = node_radians(grid);
        let mut family_values = vec![0.0; FAMILIES * n];
        for (f, fam) in self.families.iter().enumerate() {
            for (g, &(lat, lon)) in coords.iter().enumerate() {
                family_values[f * n + g] = fam.value(lat, lon, t as f64);
            }
        }
        let mut data = Vec::with_capacity(STATE_CHANNELS * n);
        for ch in &self.channels {
            for (g, &(lat, _)) in coords.iter().enumerate() {
                let own = ch.own * (2.0 * lat).cos();
                let eps: f64 = if noise > 0.0 {
                    noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                data.push(ch.offset + ch.scale * (family_values[ch.family * n + g] + own + eps));
            }
        }
        GridField::new(grid, state_manifest(), data).expect("consistent sizes")
    }

    /// Land-sea mask and surface geopotential from one smooth relief field.
    pub fn statics(&self, grid: GridSpec) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x5A17));
        let terms: Vec<(f64, f64, f64)> = (1..=4)
            .map(|k| {
                (
                    k as f64,
                    rng.random_range(0.3..1.0) / k as f64,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let n = grid.num_nodes();
        let relief: Vec<f64> = node_radians(grid)
            .into_iter()
            .map(|(lat, lon)| {
                terms
                    .iter()
                    .map(|&(k, a, ph)| a * lat.cos() * (k * lon + ph).cos() * (1.0 + 0.5 * (k * lat).sin()))
                    .sum::<f64>()
                    + 0.3 * lat.sin()
            })
            .collect();
        let mut data = Vec::with_capacity(2 * n);
        data.extend(relief.iter().map(|&h| if h > 0.0 { 1.0 } else { 0.0 }));
        data.extend(relief.iter().map(|&h| 9.80665 * 2000.0 * h.max(0.0) + 50.0 * h));
        GridField::new(grid, static_manifest(), data).expect("consistent sizes")
    }

    /// States for time indices `start .. start + len`.
    pub fn dataset(&self, grid: GridSpec, start: usize, len: usize) -> Result<Dataset> {
        if len < 3 {
            return Err(Error::DatasetTooShort {
                needed: 3,
                available: len,
            });
        }
        Ok(Dataset {
            states: (start..start + len).map(|t| self.state(grid, t)).collect(),
            statics: self.statics(grid),
        })
    }
}

fn node_radians(grid: GridSpec) -> Vec<(f64, f64)> {
    grid.node_points()
        .into_iter()
        .map(|p| (p.lat().to_radians(), p.lon().to_radians()))
        .collect()
}

pub fn synth_dataset(grid: GridSpec, length: usize, seed: u64) -> Result<Dataset> {
    SynthGenerator::new(seed).dataset(grid, 0, length)
}
