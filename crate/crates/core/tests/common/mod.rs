#![allow(dead_code)]

use ndarray::Array2;
use pcct_sr::dataset::SimulationConfig;
use pcct_sr::imaging::{GridSpec, ImageGrid};
use pcct_sr::phantom::PhantomKind;
use pcct_sr::simulator::{DegradationModel, ScanGeometry, ScanMode};

/// Asymptotic Kolmogorov-Smirnov p-value for statistic `d` from `n` draws
/// (Stephens' small-sample correction).
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `xs` against `cdf`.
pub fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn mean_std(v: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.into_iter().collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a.iter().copied());
    let (mb, sb) = mean_std(b.iter().copied());
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (sa * sb)
}

/// Pixels of a centered `size` x `size` block.
pub fn center_block(img: &Array2<f32>, size: usize) -> Vec<f64> {
    let (h, w) = img.dim();
    let (r0, c0) = ((h - size) / 2, (w - size) / 2);
    img.slice(ndarray::s![r0..r0 + size, c0..c0 + size]).iter().map(|&v| v as f64).collect()
}

pub fn rmse(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    (a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn grid(values: Array2<f32>, spacing: f64, id: &str) -> ImageGrid {
    ImageGrid::centered(values, (spacing, spacing), id).unwrap()
}

pub fn parallel(n_views: usize, n_channels: usize, pitch: f64) -> ScanGeometry {
    ScanGeometry {
        mode: ScanMode::Parallel,
        n_views,
        n_channels,
        detector_pitch_mm: pitch,
        source_to_iso_mm: None,
        source_to_detector_mm: None,
    }
}

/// Small-grid simulation used by the dataset and denoiser tests.
pub fn toy_simulation(n: usize, photons_per_mas: f64) -> SimulationConfig {
    let mut sim =
        SimulationConfig::new(parallel(180, (n * 3) / 2, 0.5), DegradationModel { photons_per_mas, ..DegradationModel::default() });
    sim.shrink_factor = 0.5;
    sim
}

pub fn anatomy(uniform_px: usize) -> PhantomKind {
    PhantomKind::AnatomyLike { body_hu: 40.0, bone_hu: 1200.0, laminae: 8, uniform_region_px: uniform_px, extra_shapes: vec![] }
}

pub fn square(n: usize) -> GridSpec {
    GridSpec::square(n, 0.5)
}
