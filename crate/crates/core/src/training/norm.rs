use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};

/// Per-channel mean and standard deviation in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    manifest: Vec<String>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormStats {
    pub fn new(manifest: Vec<String>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != manifest.len() || std.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "{} channels with {} means and {} deviations",
                manifest.len(),
                mean.len(),
                std.len()
            )));
        }
        for (c, (&m, &s)) in mean.iter().zip(&std).enumerate() {
            if !m.is_finite() || !s.is_finite() {
                return Err(Error::NonFinite(format!("statistics of `{}`", manifest[c])));
            }
            if s <= 0.0 {
                return Err(Error::ZeroVariance(manifest[c].clone()));
            }
        }
        Ok(NormStats { manifest, mean, std })
    }

    /// Exact two-pass statistics over every cell and time.
    pub fn compute(fields: &[GridField]) -> Result<Self> {
        let first = check_dataset(fields)?;
        let n = (fields.len() * first.grid().num_nodes()) as f64;
        let channels = first.channels();
        let mut mean = vec![0.0; channels];
        for f in fields {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += f.channel(c).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for f in fields {
            for (c, v) in var.iter_mut().enumerate() {
                *v += f.channel(c).iter().map(|x| (x - mean[c]) * (x - mean[c])).sum::<f64>();
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        NormStats::new(first.manifest().to_vec(), mean, std)
    }

    /// Single-pass Welford statistics; agrees with [`NormStats::compute`].
    pub fn compute_streaming(fields: &[GridField]) -> Result<Self> {
        let first = check_dataset(fields)?;
        let channels = first.channels();
        let mut mean = vec![0.0; channels];
        let mut m2 = vec![0.0; channels];
        let mut count = 0.0;
        for f in fields {
            for g in 0..first.grid().num_nodes() {
                count += 1.0;
                for c in 0..channels {
                    let x = f.channel(c)[g];
                    let d = x - mean[c];
                    mean[c] += d / count;
                    m2[c] += d * (x - mean[c]);
                }
            }
        }
        let std = m2.into_iter().map(|v| (v / count).sqrt()).collect();
        NormStats::new(first.manifest().to_vec(), mean, std)
    }

    pub fn manifest(&self) -> &[String] {
        &self.manifest
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn expect_manifest(&self, expected: &[String]) -> Result<()> {
        if self.manifest != expected {
            return Err(Error::Manifest(
                "normalization statistics do not match the expected channels".into(),
            ));
        }
        Ok(())
    }

    /// Standardized copy, channel-major.
    pub fn normalize(&self, f: &GridField) -> Result<GridField> {
        f.expect_manifest(&self.manifest, "normalization input")?;
        let mut out = f.clone();
        for c in 0..f.channels() {
            let (m, s) = (self.mean[c], self.std[c]);
            out.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    pub fn denormalize(&self, f: &GridField) -> Result<GridField> {
        f.expect_manifest(&self.manifest, "normalized field")?;
        let mut out = f.clone();
        for c in 0..f.channels() {
            let (m, s) = (self.mean[c], self.std[c]);
            out.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
        }
        Ok(out)
    }

    /// Standardized values laid out one grid node per row.
    pub fn normalize_node_major(&self, f: &GridField) -> Result<Vec<f64>> {
        Ok(self.normalize(f)?.to_node_major())
    }

    pub fn denormalize_node_major(&self, grid: GridSpec, rows: &[f64]) -> Result<GridField> {
        let f = GridField::from_node_major(grid, self.manifest.clone(), rows)?;
        self.denormalize(&f)
    }
}

fn check_dataset(fields: &[GridField]) -> Result<&GridField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidValue("statistics need a non-empty dataset".into()))?;
    for (t, f) in fields.iter().enumerate() {
        first.check_compatible(f, &format!("dataset time {t}"))?;
        f.check_finite(&format!("dataset time {t}"))?;
    }
    Ok(first)
}
