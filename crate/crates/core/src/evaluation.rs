//! Latitude weighting and forecast verification scores.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};
use crate::nn::tensor::compensated_sum;

/// Unnormalized `sin(upper) - sin(lower)` per row, with cell bounds at the
/// midpoints between rows clamped to the poles.
pub fn cell_sine_extents(grid: &GridSpec) -> Vec<f64> {
    let lats = grid.lat_values();
    let n = lats.len();
    (0..n)
        .map(|i| {
            let upper = if i == 0 { 90.0 } else { 0.5 * (lats[i - 1] + lats[i]) };
            let lower = if i + 1 == n {
                -90.0
            } else {
                0.5 * (lats[i] + lats[i + 1])
            };
            let (u, l) = (upper.clamp(-90.0, 90.0), lower.clamp(-90.0, 90.0));
            u.to_radians().sin() - l.to_radians().sin()
        })
        .collect()
}

/// Per-row area weights with unit mean.
pub fn latitude_weights(grid: &GridSpec) -> Vec<f64> {
    let raw = cell_sine_extents(grid);
    let mean = compensated_sum(raw.iter().copied()) / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Row weight of every grid node, in node order.
pub fn node_weights(grid: &GridSpec) -> Vec<f64> {
    latitude_weights(grid)
        .into_iter()
        .flat_map(|w| std::iter::repeat_n(w, grid.n_lon()))
        .collect()
}

fn check_series(pred: &[GridField], obs: &[GridField], w: &[f64], channel: usize) -> Result<()> {
    if pred.is_empty() || pred.len() != obs.len() {
        return Err(Error::Shape(format!(
            "{} forecast times against {} observed times",
            pred.len(),
            obs.len()
        )));
    }
    for (t, (p, o)) in pred.iter().zip(obs).enumerate() {
        p.check_compatible(o, &format!("time index {t}"))?;
        if channel >= p.channels() {
            return Err(Error::IndexOutOfRange {
                index: channel,
                bound: p.channels(),
                context: "metric channel",
            });
        }
    }
    if w.len() != pred[0].grid().n_lat() {
        return Err(Error::Shape(format!(
            "{} latitude weights for {} rows",
            w.len(),
            pred[0].grid().n_lat()
        )));
    }
    Ok(())
}

/// Weighted mean of `f(pred, obs)` over times and cells of one channel.
fn weighted_mean<F: Fn(f64, f64) -> f64>(
    pred: &[GridField],
    obs: &[GridField],
    w: &[f64],
    channel: usize,
    f: F,
) -> f64 {
    let grid = pred[0].grid();
    let n_lon = grid.n_lon();
    let mut total = 0.0;
    for (p, o) in pred.iter().zip(obs) {
        let (pc, oc) = (p.channel(channel), o.channel(channel));
        for (i, wi) in w.iter().enumerate() {
            let row: f64 = (0..n_lon).map(|j| f(pc[i * n_lon + j], oc[i * n_lon + j])).sum();
            total += wi * row;
        }
    }
    total / (pred.len() * grid.num_nodes()) as f64
}

pub fn rmse(pred: &[GridField], obs: &[GridField], w: &[f64], channel: usize) -> Result<f64> {
    check_series(pred, obs, w, channel)?;
    Ok(weighted_mean(pred, obs, w, channel, |a, b| (a - b) * (a - b)).sqrt())
}

pub fn bias(pred: &[GridField], obs: &[GridField], w: &[f64], channel: usize) -> Result<f64> {
    check_series(pred, obs, w, channel)?;
    Ok(weighted_mean(pred, obs, w, channel, |a, b| a - b))
}

/// Anomaly correlation against `clim`, computed per time and averaged.
pub fn acc(pred: &[GridField], obs: &[GridField], clim: &GridField, w: &[f64], channel: usize) -> Result<f64> {
    check_series(pred, obs, w, channel)?;
    pred[0].check_compatible(clim, "climatology")?;
    let n_lon = clim.grid().n_lon();
    let c = clim.channel(channel);
    let mut sum = 0.0;
    for (t, (p, o)) in pred.iter().zip(obs).enumerate() {
        let (pc, oc) = (p.channel(channel), o.channel(channel));
        let (mut fo, mut ff, mut oo) = (0.0, 0.0, 0.0);
        for (i, wi) in w.iter().enumerate() {
            for j in 0..n_lon {
                let g = i * n_lon + j;
                let (fa, oa) = (pc[g] - c[g], oc[g] - c[g]);
                fo += wi * fa * oa;
                ff += wi * fa * fa;
                oo += wi * oa * oa;
            }
        }
        if ff == 0.0 || oo == 0.0 {
            return Err(Error::ZeroAnomaly(t));
        }
        sum += fo / (ff * oo).sqrt();
    }
    Ok(sum / pred.len() as f64)
}

/// Per-cell, per-channel mean over the reference times.
pub fn compute_climatology(reference: &[GridField]) -> Result<GridField> {
    let first = reference
        .first()
        .ok_or_else(|| Error::InvalidValue("climatology needs at least one reference field".into()))?;
    let mut sum = vec![0.0; first.data().len()];
    for (t, f) in reference.iter().enumerate() {
        first.check_compatible(f, &format!("reference time {t}"))?;
        for (s, v) in sum.iter_mut().zip(f.data()) {
            *s += v;
        }
    }
    let n = reference.len() as f64;
    GridField::new(
        first.grid(),
        first.manifest().to_vec(),
        sum.into_iter().map(|s| s / n).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Power at zonal wavenumbers `0..=n_lon/2`.
    pub power: Vec<f64>,
    /// Latitude rows that entered the average.
    pub rows: Vec<usize>,
}

/// One-sided power of a periodic row: `|c_k|^2 / n^2`, doubled for
/// `0 < k < n/2` so the sum over `k` equals the mean square.
pub fn row_power(values: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = values.len();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let norm = (n * n) as f64;
    (0..=n / 2)
        .map(|k| {
            let p = buf[k].norm_sqr() / norm;
            if k == 0 || 2 * k == n {
                p
            } else {
                2.0 * p
            }
        })
        .collect()
}

/// Rows with `30 < |lat| < 60`.
pub fn midlatitude_rows(grid: &GridSpec) -> Vec<usize> {
    (0..grid.n_lat())
        .filter(|&i| {
            let a = grid.lat(i).abs();
            a > 30.0 && a < 60.0
        })
        .collect()
}

/// Zonal power spectrum of one channel averaged over the mid-latitude band.
pub fn zonal_spectrum(field: &GridField, channel: usize) -> Result<Spectrum> {
    let grid = field.grid();
    if !grid.n_lon().is_multiple_of(2) {
        return Err(Error::InvalidGrid(format!(
            "zonal spectrum needs an even longitude count, got {}",
            grid.n_lon()
        )));
    }
    if channel >= field.channels() {
        return Err(Error::IndexOutOfRange {
            index: channel,
            bound: field.channels(),
            context: "spectrum channel",
        });
    }
    let rows = midlatitude_rows(&grid);
    if rows.is_empty() {
        return Err(Error::EmptyBand(grid.n_lat()));
    }
    let n_lon = grid.n_lon();
    let data = field.channel(channel);
    let mut planner = FftPlanner::new();
    let mut power = vec![0.0; n_lon / 2 + 1];
    for &i in &rows {
        for (acc, p) in power
            .iter_mut()
            .zip(row_power(&data[i * n_lon..(i + 1) * n_lon], &mut planner))
        {
            *acc += p;
        }
    }
    for p in &mut power {
        *p /= rows.len() as f64;
    }
    Ok(Spectrum { power, rows })
}

/// Log-log line plot of a spectrum (wavenumber 0 is left out).
pub fn spectrum_svg(s: &Spectrum, title: &str) -> String {
    let (w, h, pad) = (640.0, 420.0, 50.0);
    let pts: Vec<(f64, f64)> = s
        .power
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, p)| **p > 0.0)
        .map(|(k, p)| ((k as f64).log10(), p.log10()))
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    if !pts.is_empty() {
        let (x0, x1) = bounds(pts.iter().map(|p| p.0));
        let (y0, y1) = bounds(pts.iter().map(|p| p.1));
        let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let poly: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
            poly.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">log10 wavenumber [{x0:.2}, {x1:.2}]</text>"#,
            w / 2.0,
            h - 15.0
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 14 {})" text-anchor="middle">log10 power [{y0:.2}, {y1:.2}]</text>"#,
            h / 2.0,
            h / 2.0
        );
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_have_unit_mean_and_full_extent() {
        let grid = GridSpec::new(721, 1440).unwrap();
        let w = latitude_weights(&grid);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        let total: f64 = cell_sine_extents(&grid).iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        for i in 0..360 {
            assert!(w[i] < w[i + 1]);
            assert!((w[i] - w[720 - i]).abs() < 1e-12);
        }
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn band_rows_are_strict() {
        // 7 rows: 90, 60, 30, 0, -30, -60, -90; none lies strictly inside.
        assert!(midlatitude_rows(&GridSpec::new(7, 8).unwrap()).is_empty());
        let rows = midlatitude_rows(&GridSpec::new(13, 8).unwrap());
        assert_eq!(rows, vec![3, 9]);
    }

    #[test]
    fn constant_field_has_only_mean_power() {
        let grid = GridSpec::new(19, 32).unwrap();
        let f = GridField::new(grid, vec!["a".into()], vec![2.0; grid.num_nodes()]).unwrap();
        let s = zonal_spectrum(&f, 0).unwrap();
        assert!((s.power[0] - 4.0).abs() < 1e-12);
        assert!(s.power[1..].iter().all(|&p| p < 1e-25));
    }

    #[test]
    fn climatology_of_field_and_negation_is_zero() {
        let grid = GridSpec::new(3, 4).unwrap();
        let a = GridField::new(grid, vec!["a".into()], (0..12).map(|v| v as f64).collect()).unwrap();
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v = -*v);
        let c = compute_climatology(&[a.clone(), b]).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(compute_climatology(std::slice::from_ref(&a)).unwrap(), a);
    }
}
