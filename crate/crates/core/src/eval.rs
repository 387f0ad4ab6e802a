//! Image-quality measurements: edge-method MTF, radial noise power
//! spectrum, reference metrics and the multi-scheme comparison report.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::{ImageGrid, Patch};

/// Straight-edge region of interest. The edge runs through `center_mm`,
/// tilted `angle_deg` from the column (y) axis; the ROI extends
/// `half_width_mm` across and `half_length_mm` along the edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub center_mm: [f64; 2],
    pub angle_deg: f64,
    pub half_width_mm: f64,
    pub half_length_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtfCurve {
    /// Cycles per mm.
    pub frequencies: Vec<f64>,
    /// Normalized to 1 at zero frequency; values above 1 are kept.
    pub modulation: Vec<f64>,
    pub mtf50: Option<f64>,
    pub mtf10: Option<f64>,
}

impl MtfCurve {
    /// Linear interpolation of the curve at `f`.
    pub fn at(&self, f: f64) -> f64 {
        let fr = &self.frequencies;
        if f <= fr[0] {
            return self.modulation[0];
        }
        for i in 1..fr.len() {
            if f <= fr[i] {
                let t = (f - fr[i - 1]) / (fr[i] - fr[i - 1]);
                return self.modulation[i - 1] * (1.0 - t) + self.modulation[i] * t;
            }
        }
        *self.modulation.last().unwrap()
    }
}

fn first_crossing(freq: &[f64], m: &[f64], level: f64) -> Option<f64> {
    (1..m.len()).find_map(|i| {
        (m[i - 1] >= level && m[i] < level).then(|| {
            let t = (m[i - 1] - level) / (m[i - 1] - m[i]);
            freq[i - 1] + t * (freq[i] - freq[i - 1])
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtfOptions {
    /// ESF bins per pixel.
    pub oversample: usize,
    /// Divide out the transfer of the binning and the central difference.
    #[serde(default = "yes")]
    pub correct_sampling: bool,
    /// Hann-window the LSF before the transform.
    #[serde(default)]
    pub hann_lsf: bool,
    /// Largest RMS deviation of per-line edge positions from the fitted line, in pixels.
    #[serde(default = "default_fit_residual")]
    pub max_fit_residual_px: f64,
}

fn yes() -> bool {
    true
}
fn default_fit_residual() -> f64 {
    1.0
}

impl Default for MtfOptions {
    fn default() -> Self {
        Self { oversample: 4, correct_sampling: true, hann_lsf: false, max_fit_residual_px: 1.0 }
    }
}

/// Slanted-edge MTF with default options and the given oversampling.
pub fn mtf_edge(img: &ImageGrid, edge: &EdgeSpec, oversample: usize) -> Result<MtfCurve> {
    mtf_edge_with(img, edge, &MtfOptions { oversample, ..MtfOptions::default() })
}

pub fn mtf_edge_with(img: &ImageGrid, edge: &EdgeSpec, opts: &MtfOptions) -> Result<MtfCurve> {
    if opts.oversample == 0 {
        return Err(Error::invalid("oversample must be >= 1"));
    }
    if !(edge.half_width_mm > 0.0 && edge.half_length_mm > 0.0) {
        return Err(Error::invalid("edge ROI extents must be positive"));
    }
    let (dy, dx) = img.spacing();
    let v = img.values();
    let (a_s, a_c) = edge.angle_deg.to_radians().sin_cos();
    let [cy, cx] = edge.center_mm;
    let roi: Vec<(usize, usize, f64, f64)> = v
        .indexed_iter()
        .filter_map(|((r, c), _)| {
            let (y, x) = img.pixel_center(r, c);
            let d = (x - cx) * a_c - (y - cy) * a_s;
            let l = (x - cx) * a_s + (y - cy) * a_c;
            (d.abs() <= edge.half_width_mm && l.abs() <= edge.half_length_mm).then_some((r, c, y, x))
        })
        .collect();
    if roi.len() < 16 {
        return Err(Error::invalid("edge ROI contains too few pixels"));
    }

    // Edge location per scan line from the derivative centroid; lines are
    // rows for near-vertical edges and columns otherwise.
    let by_rows = a_c.abs() >= a_s.abs();
    let mut lines: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for &(r, c, _, _) in &roi {
        let (key, pos) = if by_rows { (r, c) } else { (c, r) };
        lines.entry(key).or_default().push((pos, v[[r, c]] as f64));
    }
    let mut fit_pts = Vec::new();
    let step = if by_rows { dx } else { dy };
    // lines clipped by the ROI ends would bias the centroid
    let longest = lines.values().map(Vec::len).max().unwrap_or(0);
    for (key, mut pts) in lines {
        pts.sort_by_key(|p| p.0);
        if pts.len() < 5 || pts.len() + 1 < longest || pts.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
            continue;
        }
        let deriv: Vec<f64> = (1..pts.len() - 1).map(|i| (pts[i + 1].1 - pts[i - 1].1) * 0.5).collect();
        let total: f64 = deriv.iter().sum();
        if total.abs() < 1e-12 {
            continue;
        }
        let centroid = deriv.iter().enumerate().map(|(i, d)| d * pts[i + 1].0 as f64).sum::<f64>() / total;
        let (pr, pc) = if by_rows { (key as f64, centroid) } else { (centroid, key as f64) };
        let (oy, ox) = img.origin();
        fit_pts.push((oy + pr * dy, ox + pc * dx));
    }
    if fit_pts.len() < 4 {
        return Err(Error::invalid("edge not detected: too few scan lines cross it"));
    }
    // Least squares: across = a + b * along, with (along, across) = (y, x) or (x, y).
    let pairs: Vec<(f64, f64)> = fit_pts.iter().map(|&(y, x)| if by_rows { (y, x) } else { (x, y) }).collect();
    let n = pairs.len() as f64;
    let (sa, sc) = pairs.iter().fold((0.0, 0.0), |(a, c), p| (a + p.0, c + p.1));
    let (ma, mc) = (sa / n, sc / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(a, c) in &pairs {
        sxy += (a - ma) * (c - mc);
        sxx += (a - ma) * (a - ma);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = mc - slope * ma;
    let resid = (pairs.iter().map(|&(a, c)| (c - intercept - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    if resid > opts.max_fit_residual_px * step {
        return Err(Error::invalid(format!(
            "edge not detected: fit residual {:.3} px exceeds {:.3} px",
            resid / step,
            opts.max_fit_residual_px
        )));
    }
    let norm = (1.0 + slope * slope).sqrt();
    let signed_distance = |y: f64, x: f64| -> f64 {
        if by_rows {
            (x - intercept - slope * y) / norm
        } else {
            (y - intercept - slope * x) / norm
        }
    };

    // Oversampled ESF
    let pixel = step;
    let bin = pixel / opts.oversample as f64;
    let half_bins = (edge.half_width_mm / bin).floor() as isize;
    let nbins = (2 * half_bins + 1) as usize;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    for &(r, c, y, x) in &roi {
        let d = signed_distance(y, x);
        let k = (d / bin).round() as isize + half_bins;
        if k >= 0 && (k as usize) < nbins {
            sums[k as usize] += v[[r, c]] as f64;
            counts[k as usize] += 1;
        }
    }
    let filled: Vec<usize> = (0..nbins).filter(|&k| counts[k] > 0).collect();
    if filled.len() < nbins / 2 {
        return Err(Error::invalid("edge ROI too sparse for the requested oversampling"));
    }
    let mut esf: Vec<f64> = (0..nbins).map(|k| if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::NAN }).collect();
    for k in 0..nbins {
        if counts[k] == 0 {
            let lo = filled.iter().rev().find(|&&j| j < k).copied();
            let hi = filled.iter().find(|&&j| j > k).copied();
            esf[k] = match (lo, hi) {
                (Some(a), Some(b)) => {
                    let t = (k - a) as f64 / (b - a) as f64;
                    esf[a] * (1.0 - t) + esf[b] * t
                }
                (Some(a), None) => esf[a],
                (None, Some(b)) => esf[b],
                (None, None) => unreachable!(),
            };
        }
    }
    let mut lsf = vec![0.0; nbins];
    for k in 1..nbins - 1 {
        lsf[k] = (esf[k + 1] - esf[k - 1]) * 0.5;
    }
    if opts.hann_lsf {
        let m = (nbins - 1) as f64;
        for (k, l) in lsf.iter_mut().enumerate() {
            *l *= 0.5 * (1.0 - (2.0 * PI * k as f64 / m).cos());
        }
    }
    let mut buf: Vec<Complex<f64>> = lsf.iter().map(|&l| Complex::new(l, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(nbins).process(&mut buf);
    let dc = buf[0].norm();
    if !(dc > 0.0) || !dc.is_finite() {
        return Err(Error::invalid("edge not detected: no contrast across the edge"));
    }
    let df = 1.0 / (nbins as f64 * bin);
    let fmax = 1.0 / pixel;
    let mut frequencies = Vec::new();
    let mut modulation = Vec::new();
    for (k, c) in buf.iter().enumerate().take(nbins / 2 + 1) {
        let f = k as f64 * df;
        if f > fmax + 1e-12 {
            break;
        }
        let mut m = c.norm() / dc;
        if opts.correct_sampling && k > 0 {
            let x = 2.0 * PI * f * bin;
            let diff = x.sin() / x;
            let boxcar = (PI * f * bin).sin() / (PI * f * bin);
            m /= (diff * boxcar).abs().max(1e-3);
        }
        frequencies.push(f);
        modulation.push(m);
    }
    modulation[0] = 1.0;
    let mtf50 = first_crossing(&frequencies, &modulation, 0.5);
    let mtf10 = first_crossing(&frequencies, &modulation, 0.1);
    Ok(MtfCurve { frequencies, modulation, mtf50, mtf10 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Taper {
    None,
    #[default]
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialPsd {
    /// Bin centers, cycles per mm; bin width is one DFT cell.
    pub frequencies: Vec<f64>,
    /// Mean power per radial bin, as percent of the profile total.
    pub power_fraction: Vec<f64>,
    /// Share of non-DC power below a quarter of the Nyquist frequency.
    pub low_freq_fraction: f64,
    /// Set when the detrended patch carries no power at all.
    pub degenerate: bool,
}

pub const MIN_PSD_PATCH: usize = 32;

/// Least-squares polynomial surface of total degree `order` (0..=2).
fn detrend(values: &Array2<f64>, order: usize) -> Result<Array2<f64>> {
    if order > 2 {
        return Err(Error::invalid(format!("detrend order {order} not supported (0..=2)")));
    }
    let (h, w) = values.dim();
    let basis = |r: usize, c: usize| -> Vec<f64> {
        let y = if h > 1 { 2.0 * r as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
        let x = if w > 1 { 2.0 * c as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
        let mut b = vec![1.0];
        if order >= 1 {
            b.extend([x, y]);
        }
        if order >= 2 {
            b.extend([x * x, x * y, y * y]);
        }
        b
    };
    let m = basis(0, 0).len();
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    for ((r, c), &v) in values.indexed_iter() {
        let b = basis(r, c);
        for i in 0..m {
            atb[i] += b[i] * v;
            for j in 0..m {
                ata[i][j] += b[i] * b[j];
            }
        }
    }
    let coef = solve(ata, atb).ok_or_else(|| Error::Numerical("singular detrend system".into()))?;
    Ok(Array2::from_shape_fn((h, w), |(r, c)| values[[r, c]] - basis(r, c).iter().zip(&coef).map(|(b, k)| b * k).sum::<f64>()))
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

fn fft2_power(values: &Array2<f64>) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    Array2::from_shape_vec((h, w), data.iter().map(|c| c.norm_sqr()).collect()).expect("shape")
}

/// Radially averaged noise power spectrum of a homogeneous patch.
pub fn noise_psd(patch: &Patch, spacing: f64, detrend_order: usize, window: Taper) -> Result<RadialPsd> {
    let (h, w) = patch.values.dim();
    if h < MIN_PSD_PATCH || w < MIN_PSD_PATCH {
        return Err(Error::invalid(format!(
            "patch from `{}` at {:?} is {h}x{w}; noise PSD needs at least {MIN_PSD_PATCH}x{MIN_PSD_PATCH}",
            patch.source_id, patch.offset
        )));
    }
    if !(spacing > 0.0) {
        return Err(Error::invalid("pixel spacing must be positive"));
    }
    let vals = patch.values.mapv(|v| v as f64);
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut noise = detrend(&vals, detrend_order)?;
    if window == Taper::Hann {
        let hann = |i: usize, n: usize| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos());
        for ((r, c), v) in noise.indexed_iter_mut() {
            *v *= hann(r, h) * hann(c, w);
        }
    }
    let power = fft2_power(&noise);
    let n = h.min(w);
    let nbins = n / 2 + 1;
    let df = 1.0 / (n as f64 * spacing);
    let f_nyq = 0.5 / spacing;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    let (mut low, mut nondc) = (0.0, 0.0);
    for ((r, c), &p) in power.indexed_iter() {
        let ky = if r <= h / 2 { r as f64 } else { r as f64 - h as f64 };
        let kx = if c <= w / 2 { c as f64 } else { c as f64 - w as f64 };
        let f = ((ky / (h as f64 * spacing)).powi(2) + (kx / (w as f64 * spacing)).powi(2)).sqrt();
        if r != 0 || c != 0 {
            nondc += p;
            if f < 0.25 * f_nyq {
                low += p;
            }
        }
        let k = (f / df).round() as usize;
        if k < nbins {
            sums[k] += p;
            counts[k] += 1;
        }
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let total: f64 = means.iter().sum();
    let frequencies = (0..nbins).map(|k| k as f64 * df).collect();
    let tiny = 1e-24 * scale * scale * (h * w) as f64;
    if total <= tiny || nondc <= tiny {
        let mut pf = vec![0.0; nbins];
        pf[0] = 100.0;
        return Ok(RadialPsd { frequencies, power_fraction: pf, low_freq_fraction: 0.0, degenerate: true });
    }
    Ok(RadialPsd {
        frequencies,
        power_fraction: means.iter().map(|m| 100.0 * m / total).collect(),
        low_freq_fraction: low / nondc,
        degenerate: false,
    })
}

/// Rectangular region in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    pub fn full(img: &ImageGrid) -> Self {
        let (h, w) = img.shape();
        Self { row: 0, col: 0, height: h, width: w }
    }

    fn check(&self, img: &ImageGrid) -> Result<()> {
        let (h, w) = img.shape();
        if self.height == 0 || self.width == 0 || self.row + self.height > h || self.col + self.width > w {
            return Err(Error::invalid(format!("ROI {self:?} outside image `{}` ({h}x{w})", img.id())));
        }
        Ok(())
    }

    pub fn patch(&self, img: &ImageGrid) -> Result<Patch> {
        Patch::crop(img, (self.row, self.col), (self.height, self.width))
    }
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceMetrics {
    /// `+inf` when the images are identical.
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse_hu: f64,
}

pub const DEFAULT_DYNAMIC_RANGE_HU: f64 = 2500.0;

/// PSNR over `dynamic_range` HU, SSIM (11x11 Gaussian window, sigma 1.5) and RMSE.
pub fn reference_metrics(pred: &ImageGrid, target: &ImageGrid, roi: Option<Roi>, dynamic_range: f64) -> Result<ReferenceMetrics> {
    pred.ensure_same_geometry(target)?;
    if !(dynamic_range > 0.0) {
        return Err(Error::invalid("dynamic range must be positive"));
    }
    let roi = roi.unwrap_or_else(|| Roi::full(pred));
    roi.check(pred)?;
    let sl = s![roi.row..roi.row + roi.height, roi.col..roi.col + roi.width];
    let p = pred.values().slice(sl).mapv(|v| v as f64);
    let t = target.values().slice(sl).mapv(|v| v as f64);
    let mse = p.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    let rmse = mse.sqrt();
    let psnr = if mse == 0.0 { f64::INFINITY } else { 20.0 * (dynamic_range / rmse).log10() };
    Ok(ReferenceMetrics { psnr_db: psnr, ssim: ssim(&p, &t, dynamic_range), rmse_hu: rmse })
}

fn ssim(a: &Array2<f64>, b: &Array2<f64>, range: f64) -> f64 {
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (h, w) = a.dim();
    let radius = 5usize;
    let taps: Vec<f64> = {
        let raw: Vec<f64> = (0..=2 * radius).map(|i| (-((i as f64 - radius as f64).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let stat = |mx: f64, my: f64, vx: f64, vy: f64, cxy: f64| {
        ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    };
    if h < taps.len() || w < taps.len() {
        let n = a.len() as f64;
        let mx = a.sum() / n;
        let my = b.sum() / n;
        let vx = a.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = b.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cxy = a.iter().zip(b.iter()).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        return stat(mx, my, vx, vy, cxy);
    }
    let blur = |img: &Array2<f64>| -> Array2<f64> {
        let (oh, ow) = (h - 2 * radius, w - 2 * radius);
        let tmp: Array2<f64> =
            Array2::from_shape_fn((h, ow), |(r, c)| taps.iter().enumerate().map(|(k, t)| t * img[[r, c + k]]).sum::<f64>());
        Array2::from_shape_fn((oh, ow), |(r, c)| taps.iter().enumerate().map(|(k, t)| t * tmp[[r + k, c]]).sum::<f64>())
    };
    let mx = blur(a);
    let my = blur(b);
    let xx = blur(&(a * a));
    let yy = blur(&(b * b));
    let xy = blur(&(a * b));
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let vx = xx.as_slice().unwrap()[i] - ux * ux;
        let vy = yy.as_slice().unwrap()[i] - uy * uy;
        let cxy = xy.as_slice().unwrap()[i] - ux * uy;
        acc += stat(ux, uy, vx, vy, cxy);
    }
    acc / mx.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default)]
    pub edge: Option<EdgeSpec>,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    pub uniform_roi: Roi,
    #[serde(default = "default_detrend")]
    pub detrend_order: usize,
    #[serde(default)]
    pub taper: Taper,
    #[serde(default = "default_range")]
    pub dynamic_range_hu: f64,
    /// Schemes expected in the comparison; absent ones produce warnings.
    #[serde(default)]
    pub expected_schemes: Vec<String>,
}

fn default_oversample() -> usize {
    4
}
fn default_detrend() -> usize {
    1
}
fn default_range() -> f64 {
    DEFAULT_DYNAMIC_RANGE_HU
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeRow {
    pub name: String,
    pub mtf: Option<MtfCurve>,
    pub psd: RadialPsd,
    pub metrics: ReferenceMetrics,
    pub low_freq_fraction: f64,
    pub uniform_std_hu: f64,
}

/// Whether plain conditioning concentrates more noise power at low
/// frequencies than the noise-aware schemes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirectionCheck {
    pub plain: f64,
    pub others: BTreeMap<String, f64>,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<SchemeRow>,
    pub low_frequency_ordering: Option<DirectionCheck>,
    pub warnings: Vec<String>,
}

fn std_of(p: &Patch) -> f64 {
    let n = p.values.len() as f64;
    let m = p.values.iter().map(|&v| v as f64).sum::<f64>() / n;
    (p.values.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn evaluate_row(name: &str, img: &ImageGrid, target: &ImageGrid, cfg: &CompareConfig, warnings: &mut Vec<String>) -> Result<SchemeRow> {
    let mtf = match &cfg.edge {
        Some(e) => match mtf_edge(img, e, cfg.oversample) {
            Ok(m) => Some(m),
            Err(err) => {
                warnings.push(format!("{name}: MTF unavailable ({err})"));
                None
            }
        },
        None => None,
    };
    let patch = cfg.uniform_roi.patch(img)?;
    let psd = noise_psd(&patch, img.spacing().1, cfg.detrend_order, cfg.taper)?;
    let metrics = reference_metrics(img, target, None, cfg.dynamic_range_hu)?;
    Ok(SchemeRow { name: name.to_string(), mtf, low_freq_fraction: psd.low_freq_fraction, psd, metrics, uniform_std_hu: std_of(&patch) })
}

/// Evaluates every scheme output plus the LR input against the HR target.
pub fn compare_schemes(
    outputs: &BTreeMap<String, ImageGrid>,
    lr_input: &ImageGrid,
    hr_target: &ImageGrid,
    cfg: &CompareConfig,
) -> Result<ComparisonReport> {
    lr_input.ensure_same_geometry(hr_target)?;
    let mut warnings = Vec::new();
    for s in &cfg.expected_schemes {
        if !outputs.contains_key(s) {
            warnings.push(format!("scheme `{s}` has no output; row omitted"));
        }
    }
    let mut rows = vec![evaluate_row("input", lr_input, hr_target, cfg, &mut warnings)?];
    for (name, img) in outputs {
        img.ensure_same_geometry(hr_target)?;
        rows.push(evaluate_row(name, img, hr_target, cfg, &mut warnings)?);
    }
    let lf: BTreeMap<String, f64> = rows.iter().filter(|r| r.name != "input").map(|r| (r.name.clone(), r.low_freq_fraction)).collect();
    let low_frequency_ordering = lf.get("plain").map(|&plain| {
        let others: BTreeMap<String, f64> = lf.iter().filter(|(k, _)| k.as_str() != "plain").map(|(k, v)| (k.clone(), *v)).collect();
        let holds = !others.is_empty() && others.values().all(|&o| plain > o);
        DirectionCheck { plain, others, holds }
    });
    if let Some(check) = &low_frequency_ordering {
        if !check.holds {
            warnings.push(format!(
                "expected plain low-frequency fraction ({:.4}) above the noise-aware schemes {:?}; not observed",
                check.plain, check.others
            ));
        }
    }
    Ok(ComparisonReport { rows, low_frequency_ordering, warnings })
}

pub fn mtf_csv(rows: &[(String, MtfCurve)]) -> String {
    let mut out = String::from("scheme,frequency_per_mm,modulation\n");
    for (name, c) in rows {
        for (f, m) in c.frequencies.iter().zip(&c.modulation) {
            let _ = writeln!(out, "{name},{f},{m}");
        }
    }
    out
}

pub fn psd_csv(rows: &[(String, RadialPsd)]) -> String {
    let mut out = String::from("scheme,frequency_per_mm,power_percent\n");
    for (name, p) in rows {
        for (f, v) in p.frequencies.iter().zip(&p.power_fraction) {
            let _ = writeln!(out, "{name},{f},{v}");
        }
    }
    out
}

/// Writes `report.json`, `mtf.csv`, `psd.csv` and presentation plots.
pub fn write_report(report: &ComparisonReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    let mtfs: Vec<(String, MtfCurve)> = report.rows.iter().filter_map(|r| r.mtf.clone().map(|m| (r.name.clone(), m))).collect();
    let psds: Vec<(String, RadialPsd)> = report.rows.iter().map(|r| (r.name.clone(), r.psd.clone())).collect();
    fs::write(dir.join("mtf.csv"), mtf_csv(&mtfs))?;
    fs::write(dir.join("psd.csv"), psd_csv(&psds))?;
    let to_series = |v: &[(String, Vec<f64>, Vec<f64>)]| v.to_vec();
    if !mtfs.is_empty() {
        let series: Vec<_> = mtfs.iter().map(|(n, c)| (n.clone(), c.frequencies.clone(), c.modulation.clone())).collect();
        crate::plot::line_plot(&dir.join("mtf.svg"), "MTF", "cycles/mm", "modulation", &to_series(&series))?;
    }
    let series: Vec<_> = psds.iter().map(|(n, p)| (n.clone(), p.frequencies.clone(), p.power_fraction.clone())).collect();
    crate::plot::line_plot(&dir.join("psd.svg"), "Noise PSD", "cycles/mm", "% total power", &series)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img_from(f: impl Fn(f64, f64) -> f64, n: usize, px: f64) -> ImageGrid {
        let o = -(n as f64 - 1.0) * 0.5 * px;
        let v = Array2::from_shape_fn((n, n), |(r, c)| f(o + r as f64 * px, o + c as f64 * px) as f32);
        ImageGrid::centered(v, (px, px), "synthetic").unwrap()
    }

    #[test]
    fn mtf_is_one_at_dc_and_scale_invariant() {
        let e = EdgeSpec { center_mm: [0.0, 0.0], angle_deg: 4.0, half_width_mm: 8.0, half_length_mm: 12.0 };
        let (s, c) = 4f64.to_radians().sin_cos();
        let f = |y: f64, x: f64| 0.5 * (1.0 + libm_erf((x * c - y * s) / (0.6 * 2f64.sqrt())));
        let a = mtf_edge(&img_from(|y, x| 100.0 * f(y, x), 64, 0.5), &e, 4).unwrap();
        let b = mtf_edge(&img_from(|y, x| 700.0 * f(y, x), 64, 0.5), &e, 4).unwrap();
        assert_eq!(a.modulation[0], 1.0);
        for (x, y) in a.modulation.iter().zip(&b.modulation) {
            assert!((x - y).abs() < 1e-4);
        }
        assert!(a.mtf50.is_some());
    }

    fn libm_erf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 is too coarse for the oracle tests but fine here.
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let y = 1.0 - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592) * t * (-x * x).exp();
        y.copysign(x)
    }

    #[test]
    fn flat_image_has_no_edge() {
        let e = EdgeSpec { center_mm: [0.0, 0.0], angle_deg: 3.0, half_width_mm: 6.0, half_length_mm: 10.0 };
        assert!(mtf_edge(&img_from(|_, _| 5.0, 48, 0.5), &e, 4).is_err());
    }

    #[test]
    fn psd_rejects_small_patch() {
        let p = Patch { values: Array2::zeros((16, 16)), source_id: "tiny".into(), offset: (3, 4), size: (16, 16) };
        let err = noise_psd(&p, 0.5, 1, Taper::Hann).unwrap_err().to_string();
        assert!(err.contains("tiny") && err.contains("(3, 4)"), "{err}");
    }

    #[test]
    fn constant_patch_is_degenerate() {
        let p = Patch { values: Array2::from_elem((32, 32), 40.0), source_id: "flat".into(), offset: (0, 0), size: (32, 32) };
        let psd = noise_psd(&p, 0.5, 1, Taper::Hann).unwrap();
        assert!(psd.degenerate);
        assert_eq!(psd.power_fraction[0], 100.0);
    }

    #[test]
    fn single_tone_lands_in_its_bin() {
        let n = 64;
        let k0 = 9.0;
        let v = Array2::from_shape_fn((n, n), |(_, c)| (2.0 * PI * k0 * c as f64 / n as f64).sin() as f32 * 20.0);
        let p = Patch { values: v, source_id: "tone".into(), offset: (0, 0), size: (n, n) };
        let psd = noise_psd(&p, 0.5, 1, Taper::None).unwrap();
        let nondc: f64 = psd.power_fraction[1..].iter().sum();
        assert!(psd.power_fraction[9] / nondc >= 0.8, "{:?}", psd.power_fraction);
    }

    #[test]
    fn metrics_identity_and_offset() {
        let a = img_from(|y, x| (x * 0.3).sin() * 200.0 + y, 40, 0.5);
        let m = reference_metrics(&a, &a, None, 2500.0).unwrap();
        assert_eq!(m.rmse_hu, 0.0);
        assert!(m.psnr_db.is_infinite());
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let b = a.with_values(a.values().mapv(|v| v + 25.0), "b").unwrap();
        let m = reference_metrics(&b, &a, None, 2500.0).unwrap();
        assert!((m.rmse_hu - 25.0).abs() < 1e-3);
        assert!(serde_json::to_string(&reference_metrics(&a, &a, None, 2500.0).unwrap()).unwrap().contains("\"inf\""));
    }

    #[test]
    fn misaligned_metrics_rejected() {
        let a = img_from(|_, _| 0.0, 40, 0.5);
        let b = img_from(|_, _| 0.0, 41, 0.5);
        assert!(reference_metrics(&a, &b, None, 2500.0).is_err());
    }
}
