//! Filtered back-projection onto an image raster.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{mu_to_hu, GridSpec, ImageGrid};
use crate::simulator::{ScanMode, Sinogram};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampFilter {
    #[default]
    RamLak,
    HannApodized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    #[serde(default)]
    pub filter: RampFilter,
    #[serde(default)]
    pub interpolation: Interpolation,
    pub grid: GridSpec,
    /// Water attenuation used for the mu -> HU conversion, 1/mm.
    pub mu_water: f64,
}

impl ReconConfig {
    pub fn new(grid: GridSpec, mu_water: f64) -> Self {
        Self { filter: RampFilter::RamLak, interpolation: Interpolation::Linear, grid, mu_water }
    }
}

/// Zero-padded FFT length: next power of two at or above `2 * n`.
pub fn padded_len(n: usize) -> usize {
    (2 * n).next_power_of_two()
}

/// Frequency response of the band-limited ramp, built from its sampled
/// spatial kernel so the DC term is handled consistently. Includes the
/// sample spacing factor of the discrete convolution.
pub fn ramp_response(n_channels: usize, spacing: f64, filter: RampFilter) -> Vec<f64> {
    let p = padded_len(n_channels);
    let mut kernel = vec![Complex::new(0.0, 0.0); p];
    for (i, k) in kernel.iter_mut().enumerate() {
        let n = if i <= p / 2 { i as i64 } else { i as i64 - p as i64 };
        let v = if n == 0 {
            1.0 / (4.0 * spacing * spacing)
        } else if n % 2 != 0 {
            -1.0 / ((n * n) as f64 * PI * PI * spacing * spacing)
        } else {
            0.0
        };
        *k = Complex::new(v * spacing, 0.0);
    }
    FftPlanner::new().plan_fft_forward(p).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let f = if i <= p / 2 { i } else { p - i } as f64 / (p as f64 / 2.0);
            let w = match filter {
                RampFilter::RamLak => 1.0,
                RampFilter::HannApodized => 0.5 * (1.0 + (PI * f).cos()),
            };
            c.re * w
        })
        .collect()
}

fn filter_views(rows: &Array2<f64>, response: &[f64]) -> Array2<f64> {
    let (nv, nc) = rows.dim();
    let p = response.len();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(p);
    let inv = planner.plan_fft_inverse(p);
    let mut out = Array2::<f64>::zeros((nv, nc));
    let mut buf = vec![Complex::new(0.0, 0.0); p];
    for (src, mut dst) in rows.outer_iter().zip(out.outer_iter_mut()) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(src.iter()) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(response) {
            *b *= h;
        }
        inv.process(&mut buf);
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re / p as f64;
        }
    }
    out
}

fn sample(row: &[f64], idx: f64, interp: Interpolation) -> f64 {
    let n = row.len();
    match interp {
        Interpolation::Nearest => {
            let i = idx.round();
            if i < 0.0 || i >= n as f64 {
                0.0
            } else {
                row[i as usize]
            }
        }
        Interpolation::Linear => {
            if idx <= -1.0 || idx >= n as f64 {
                return 0.0;
            }
            let i0 = idx.floor();
            let f = idx - i0;
            let i0 = i0 as isize;
            let a = if i0 >= 0 { row[i0 as usize] } else { 0.0 };
            let b = if i0 + 1 < n as isize { row[(i0 + 1) as usize] } else { 0.0 };
            a * (1.0 - f) + b * f
        }
    }
}

/// Reconstructs attenuation (1/mm) on the configured grid.
pub fn fbp_mu(sino: &Sinogram, cfg: &ReconConfig) -> Result<Array2<f64>> {
    let geom = &sino.geometry;
    cfg.grid.validate()?;
    geom.check_covers(cfg.grid.radius_mm())?;
    if sino.values.dim() != (geom.n_views, geom.n_channels) {
        return Err(Error::ShapeMismatch(format!("sinogram {:?} vs geometry {}x{}", sino.values.dim(), geom.n_views, geom.n_channels)));
    }
    if sino.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinogram".into()));
    }
    let du = geom.iso_pitch();
    let nc = geom.n_channels;
    let center = (nc as f64 - 1.0) * 0.5;
    let mut weighted = sino.values.mapv(|v| v as f64);
    let source_d = geom.source_to_iso_mm.unwrap_or(0.0);
    if geom.mode == ScanMode::FanFlat {
        for mut row in weighted.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let u = geom.iso_coordinate(j);
                *v *= source_d / (source_d * source_d + u * u).sqrt();
            }
        }
    }
    let filtered = filter_views(&weighted, &ramp_response(nc, du, cfg.filter));

    let (h, w) = (cfg.grid.shape[0], cfg.grid.shape[1]);
    let (oy, ox) = cfg.grid.origin();
    let (dy, dx) = cfg.grid.spacing();
    let mut img = Array2::<f64>::zeros((h, w));
    let scale = PI / geom.n_views as f64;
    for (i, row) in filtered.outer_iter().enumerate() {
        let row = row.as_slice().expect("contiguous row");
        let (sb, cb) = geom.view_angle(i).sin_cos();
        for r in 0..h {
            let y = oy + r as f64 * dy;
            for c in 0..w {
                let x = ox + c as f64 * dx;
                let lateral = x * cb + y * sb;
                let contrib = match geom.mode {
                    ScanMode::Parallel => sample(row, lateral / du + center, cfg.interpolation),
                    ScanMode::FanFlat => {
                        // distance from the source along the central ray, over D
                        let along = -x * sb + y * cb;
                        let u_ratio = (source_d + along) / source_d;
                        let a = lateral / u_ratio;
                        sample(row, a / du + center, cfg.interpolation) / (u_ratio * u_ratio)
                    }
                };
                img[[r, c]] += contrib;
            }
        }
    }
    img.mapv_inplace(|v| v * scale);
    Ok(img)
}

/// FBP reconstruction converted to HU on the configured grid.
pub fn fbp(sino: &Sinogram, cfg: &ReconConfig) -> Result<ImageGrid> {
    if !(cfg.mu_water > 0.0) {
        return Err(Error::invalid("mu_water must be positive"));
    }
    let mu = fbp_mu(sino, cfg)?;
    ImageGrid::new(mu.mapv(|m| mu_to_hu(m, cfg.mu_water) as f32), cfg.grid.spacing(), cfg.grid.origin(), "fbp")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::ScanGeometry;

    #[test]
    fn padding_rule() {
        assert_eq!(padded_len(384), 1024);
        assert_eq!(padded_len(512), 1024);
        assert_eq!(padded_len(100), 256);
    }

    #[test]
    fn ramp_is_near_zero_at_dc_and_grows() {
        let h = ramp_response(128, 1.0, RampFilter::RamLak);
        assert!(h[0].abs() < 1e-3);
        assert!(h[64] > h[16] && h[16] > h[4]);
        let hann = ramp_response(128, 1.0, RampFilter::HannApodized);
        assert!(hann[128].abs() < 1e-12);
    }

    #[test]
    fn zero_sinogram_gives_air() {
        let geom = ScanGeometry { n_views: 32, n_channels: 96, detector_pitch_mm: 1.0, ..ScanGeometry::default() };
        let img = fbp(&Sinogram::zeros(geom), &ReconConfig::new(GridSpec::square(48, 1.0), 0.02)).unwrap();
        assert!(img.values().iter().all(|&v| v == -1000.0));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let geom = ScanGeometry { n_views: 8, n_channels: 32, detector_pitch_mm: 1.0, ..ScanGeometry::default() };
        assert!(fbp(&Sinogram::zeros(geom), &ReconConfig::new(GridSpec::square(64, 1.0), 0.02)).is_err());
    }
}
