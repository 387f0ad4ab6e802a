//! Monoenergetic degradation forward model: ray-driven projection, focal
//! spot blur, detector cross-talk, Poisson counting and log transform.
//!
//! View `i` sits at angle `2*pi*i/n_views`. In parallel mode channel `j`
//! measures the line `x*cos(b) + y*sin(b) = s_j`; in fan-flat mode the
//! source sits at `-D * (-sin b, cos b)` and rays hit a flat detector whose
//! coordinates are scaled to a virtual detector through the isocenter.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_array, save_array, AttenuationMap, Endianness, Sidecar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    Parallel,
    FanFlat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub mode: ScanMode,
    /// Views over a full rotation.
    pub n_views: usize,
    pub n_channels: usize,
    /// Channel pitch at the detector (equals pitch at isocenter in parallel mode).
    pub detector_pitch_mm: f64,
    #[serde(default)]
    pub source_to_iso_mm: Option<f64>,
    #[serde(default)]
    pub source_to_detector_mm: Option<f64>,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self {
            mode: ScanMode::Parallel,
            n_views: 720,
            n_channels: 384,
            detector_pitch_mm: 0.5,
            source_to_iso_mm: None,
            source_to_detector_mm: None,
        }
    }
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 || self.n_channels < 2 {
            return Err(Error::invalid("geometry needs at least 2 views and 2 channels"));
        }
        if !(self.detector_pitch_mm > 0.0) {
            return Err(Error::invalid("detector pitch must be positive"));
        }
        if self.mode == ScanMode::FanFlat {
            match (self.source_to_iso_mm, self.source_to_detector_mm) {
                (Some(d), Some(sdd)) if d > 0.0 && sdd > d => {}
                _ => return Err(Error::invalid("fan-flat geometry needs 0 < source_to_iso_mm < source_to_detector_mm")),
            }
        }
        Ok(())
    }

    /// True when view sampling falls below `2 * n_channels / pi`.
    pub fn undersampled_views(&self) -> bool {
        (self.n_views as f64) < 2.0 * self.n_channels as f64 / PI
    }

    pub fn view_angle(&self, i: usize) -> f64 {
        2.0 * PI * i as f64 / self.n_views as f64
    }

    /// Channel pitch referred to the isocenter.
    pub fn iso_pitch(&self) -> f64 {
        match self.mode {
            ScanMode::Parallel => self.detector_pitch_mm,
            ScanMode::FanFlat => self.detector_pitch_mm * self.source_to_iso_mm.unwrap_or(1.0) / self.source_to_detector_mm.unwrap_or(1.0),
        }
    }

    /// Channel coordinate at the isocenter plane.
    pub fn iso_coordinate(&self, j: usize) -> f64 {
        (j as f64 - (self.n_channels as f64 - 1.0) * 0.5) * self.iso_pitch()
    }

    /// Radius of the circle fully covered by every view.
    pub fn fov_radius(&self) -> f64 {
        let half = (self.n_channels as f64 - 1.0) * 0.5 * self.iso_pitch();
        match self.mode {
            ScanMode::Parallel => half,
            ScanMode::FanFlat => {
                let d = self.source_to_iso_mm.unwrap_or(1.0);
                d * half / (d * d + half * half).sqrt()
            }
        }
    }

    /// Ray `(point, unit direction)` for view `i`, channel `j`, in (x, y).
    pub fn ray(&self, i: usize, j: usize) -> ((f64, f64), (f64, f64)) {
        let (sb, cb) = self.view_angle(i).sin_cos();
        let u = self.iso_coordinate(j);
        let dir = (-sb, cb);
        match self.mode {
            ScanMode::Parallel => ((u * cb, u * sb), dir),
            ScanMode::FanFlat => {
                let d = self.source_to_iso_mm.unwrap_or(1.0);
                let src = (-d * dir.0, -d * dir.1);
                let target = (u * cb, u * sb);
                let (vx, vy) = (target.0 - src.0, target.1 - src.1);
                let len = (vx * vx + vy * vy).sqrt();
                (src, (vx / len, vy / len))
            }
        }
    }

    pub(crate) fn check_covers(&self, grid_radius: f64) -> Result<()> {
        self.validate()?;
        if grid_radius > self.fov_radius() + 1e-9 {
            return Err(Error::Geometry(format!(
                "image extends to radius {grid_radius:.2} mm but the scan only covers {:.2} mm",
                self.fov_radius()
            )));
        }
        if let Some(d) = self.source_to_iso_mm.filter(|_| self.mode == ScanMode::FanFlat) {
            if grid_radius >= d {
                return Err(Error::Geometry("source lies inside the imaged region".into()));
            }
        }
        Ok(())
    }
}

/// Log-attenuation line integrals, views x channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub values: Array2<f32>,
    pub geometry: ScanGeometry,
}

impl Sinogram {
    pub fn zeros(geometry: ScanGeometry) -> Self {
        Self { values: Array2::zeros((geometry.n_views, geometry.n_channels)), geometry }
    }
}

/// Joseph-style line integral of a bilinearly interpolated map.
fn line_integral(map: &AttenuationMap, p: (f64, f64), d: (f64, f64)) -> f64 {
    let (h, w) = map.values.dim();
    let (dy, dx) = map.spacing;
    let (oy, ox) = map.origin;
    let v = &map.values;
    let mut sum = 0.0;
    if d.0.abs() >= d.1.abs() {
        // step over columns
        let weight = dx / d.0.abs();
        for c in 0..w {
            let x = ox + c as f64 * dx;
            let t = (x - p.0) / d.0;
            let fr = (p.1 + t * d.1 - oy) / dy;
            if fr <= -1.0 || fr >= h as f64 {
                continue;
            }
            let r0 = fr.floor();
            let f = fr - r0;
            let r0 = r0 as isize;
            let a = if r0 >= 0 { v[[r0 as usize, c]] } else { 0.0 };
            let b = if r0 + 1 < h as isize { v[[(r0 + 1) as usize, c]] } else { 0.0 };
            sum += a * (1.0 - f) + b * f;
        }
        sum * weight
    } else {
        let weight = dy / d.1.abs();
        for r in 0..h {
            let y = oy + r as f64 * dy;
            let t = (y - p.1) / d.1;
            let fc = (p.0 + t * d.0 - ox) / dx;
            if fc <= -1.0 || fc >= w as f64 {
                continue;
            }
            let c0 = fc.floor();
            let f = fc - c0;
            let c0 = c0 as isize;
            let a = if c0 >= 0 { v[[r, c0 as usize]] } else { 0.0 };
            let b = if c0 + 1 < w as isize { v[[r, (c0 + 1) as usize]] } else { 0.0 };
            sum += a * (1.0 - f) + b * f;
        }
        sum * weight
    }
}

/// Line integrals of `mu` for every ray of `geom`.
pub fn project(mu: &AttenuationMap, geom: &ScanGeometry) -> Result<Sinogram> {
    geom.check_covers(mu.geometry().radius_mm())?;
    if mu.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attenuation map".into()));
    }
    let grid_r = mu.geometry().radius_mm();
    let mut out = Array2::<f32>::zeros((geom.n_views, geom.n_channels));
    for i in 0..geom.n_views {
        for j in 0..geom.n_channels {
            let (p, d) = geom.ray(i, j);
            // perpendicular distance of the ray from the isocenter
            let miss = (p.0 * d.1 - p.1 * d.0).abs();
            if miss > grid_r {
                continue;
            }
            out[[i, j]] = line_integral(mu, p, d) as f32;
        }
    }
    Ok(Sinogram { values: out, geometry: geom.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationModel {
    pub tube_current_ma: f64,
    /// Seconds per rotation.
    pub exposure_time_s: f64,
    /// Unattenuated photons per channel per mAs.
    pub photons_per_mas: f64,
    /// Focal-spot blur FWHM at the detector, mm.
    pub focal_spot_fwhm_mm: f64,
    /// Fraction `a` of counts shared with each neighbor, kernel `[a, 1-2a, a]`.
    pub crosstalk: f64,
    /// When false the expected counts are used directly (N0 -> infinity limit).
    #[serde(default = "default_true")]
    pub noise: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for DegradationModel {
    fn default() -> Self {
        Self {
            tube_current_ma: 220.0,
            exposure_time_s: 1.0,
            photons_per_mas: 2.0e5,
            focal_spot_fwhm_mm: 1.0,
            crosstalk: 0.1,
            noise: true,
            rng_seed: 0,
        }
    }
}

impl DegradationModel {
    /// Expected unattenuated counts per channel per view.
    pub fn n0(&self, n_views: usize) -> f64 {
        self.tube_current_ma * (self.exposure_time_s / n_views as f64) * self.photons_per_mas
    }

    pub fn validate(&self, n_views: usize) -> Result<()> {
        let n0 = self.n0(n_views);
        if !(n0 > 0.0 && n0.is_finite()) {
            return Err(Error::invalid(format!("expected unattenuated counts must be positive, got {n0}")));
        }
        if !(0.0..0.5).contains(&self.crosstalk) {
            return Err(Error::invalid(format!("cross-talk fraction must be in [0, 0.5), got {}", self.crosstalk)));
        }
        if !(self.focal_spot_fwhm_mm >= 0.0) {
            return Err(Error::invalid("focal spot FWHM must be non-negative"));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps for a FWHM given in samples, truncated at 4 sigma.
pub fn gaussian_kernel(fwhm_samples: f64) -> Vec<f64> {
    if fwhm_samples <= 0.0 {
        return vec![1.0];
    }
    let sigma = fwhm_samples / (2.0 * (2.0 * 2f64.ln()).sqrt());
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Same-length convolution with edge replication.
pub fn convolve_replicate(row: &[f64], kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return row.iter().map(|v| v * kernel[0]).collect();
    }
    let n = row.len() as isize;
    let r = (kernel.len() / 2) as isize;
    (0..n).map(|i| kernel.iter().enumerate().map(|(k, &t)| t * row[(i + k as isize - r).clamp(0, n - 1) as usize]).sum()).collect()
}

/// Applies `[a, 1-2a, a]` with reflecting ends, which conserves the total.
pub fn crosstalk(row: &[f64], a: f64) -> Vec<f64> {
    if a == 0.0 {
        return row.to_vec();
    }
    let n = row.len();
    (0..n)
        .map(|i| {
            let left = row[i.saturating_sub(1)];
            let right = row[(i + 1).min(n - 1)];
            a * left + (1.0 - 2.0 * a) * row[i] + a * right
        })
        .collect()
}

/// Counting floor applied before the log transform.
pub const COUNT_FLOOR: f64 = 0.5;

/// Degrades noiseless line integrals into a measured sinogram. Each view
/// draws from its own ChaCha stream keyed by `(rng_seed, view)`.
pub fn degrade_and_count(sino: &Sinogram, model: &DegradationModel) -> Result<Sinogram> {
    let geom = &sino.geometry;
    model.validate(geom.n_views)?;
    let n0 = model.n0(geom.n_views);
    let kernel = gaussian_kernel(model.focal_spot_fwhm_mm / geom.detector_pitch_mm);
    let mut out = Array2::<f32>::zeros(sino.values.dim());
    for (i, (src, mut dst)) in sino.values.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        let p: Vec<f64> = src.iter().map(|&v| v as f64).collect();
        let blurred = convolve_replicate(&p, &kernel);
        let expected: Vec<f64> = blurred.iter().map(|&q| n0 * (-q).exp()).collect();
        let shared = crosstalk(&expected, model.crosstalk);
        let mut rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
        rng.set_stream(i as u64);
        for (d, &lam) in dst.iter_mut().zip(&shared) {
            let counts = if model.noise && lam > 0.0 {
                Poisson::new(lam).map_err(|e| Error::Numerical(format!("poisson rate {lam}: {e}")))?.sample(&mut rng)
            } else {
                lam
            };
            *d = (-(counts.max(COUNT_FLOOR) / n0).ln()) as f32;
        }
    }
    Ok(Sinogram { values: out, geometry: geom.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    #[serde(alias = "lr")]
    LR,
    #[serde(alias = "hr")]
    HR,
}

pub const LR_TUBE_CURRENT_MA: f64 = 220.0;
pub const HR_TUBE_CURRENT_MA: f64 = 350.0;

/// Derives the LR or HR acquisition from the LR reference settings.
pub fn make_protocol(which: Protocol, base: &DegradationModel, geom: &ScanGeometry) -> (DegradationModel, ScanGeometry) {
    let mut model = base.clone();
    let mut geom = geom.clone();
    match which {
        Protocol::LR => model.tube_current_ma = LR_TUBE_CURRENT_MA,
        Protocol::HR => {
            model.tube_current_ma = HR_TUBE_CURRENT_MA;
            model.focal_spot_fwhm_mm *= 0.5;
            model.crosstalk = 0.0;
            geom.n_views *= 2;
        }
    }
    (model, geom)
}

pub const SINOGRAM_CONVENTION: &str = "line-integral";

pub fn save_sinogram(sino: &Sinogram, path: &Path, model: Option<&DegradationModel>) -> Result<()> {
    let provenance = serde_json::json!({
        "geometry": sino.geometry,
        "degradation": model,
    });
    let meta = Sidecar {
        id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        shape: [sino.values.nrows(), sino.values.ncols()],
        spacing_mm: [1.0, sino.geometry.detector_pitch_mm],
        origin_mm: [0.0, 0.0],
        dtype: "float32".into(),
        endianness: Endianness::Little,
        hu_convention: SINOGRAM_CONVENTION.into(),
        sha256: String::new(),
        provenance: Some(provenance),
    };
    save_array(path, &sino.values, &meta)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    let (values, meta) = load_array(path)?;
    let geometry = meta.provenance.as_ref().and_then(|p| p.get("geometry")).cloned().ok_or_else(|| Error::Metadata {
        path: path.with_extension("json"),
        detail: "sinogram sidecar lacks geometry provenance".into(),
    })?;
    let geometry: ScanGeometry = serde_json::from_value(geometry)?;
    if values.dim() != (geometry.n_views, geometry.n_channels) {
        return Err(Error::Metadata { path: path.with_extension("json"), detail: "payload shape disagrees with geometry".into() });
    }
    Ok(Sinogram { values, geometry })
}
