mod common;

use common::{mean_std, parallel, square};
use ndarray::Array2;
use pcct_sr::imaging::{hu_to_mu, AttenuationMap, GridSpec};
use pcct_sr::phantom::{render_phantom, PhantomKind, PhantomSpec};
use pcct_sr::recon::{fbp, fbp_mu, ReconConfig};
use pcct_sr::simulator::{degrade_and_count, project, DegradationModel, ScanGeometry, ScanMode, Sinogram};

const MU: f64 = 0.02;

fn disk_map(radius_mm: f64, center_mm: [f64; 2]) -> AttenuationMap {
    disk_on(square(256), radius_mm, center_mm)
}

fn disk_on(grid: GridSpec, radius_mm: f64, center_mm: [f64; 2]) -> AttenuationMap {
    let spec = PhantomSpec::new("disk", grid, PhantomKind::UniformDisk { radius_mm, hu: 0.0, center_mm, background_hu: -1000.0 });
    hu_to_mu(&render_phantom(&spec, 0).unwrap(), MU).unwrap()
}

fn clean_model(photons_per_mas: f64) -> DegradationModel {
    DegradationModel {
        tube_current_ma: 100.0,
        exposure_time_s: 1.0,
        photons_per_mas,
        focal_spot_fwhm_mm: 0.0,
        crosstalk: 0.0,
        noise: true,
        rng_seed: 4,
    }
}

fn chord_check(geom: &ScanGeometry) {
    let (r, cy, cx) = (20.0, 10.0, -15.0);
    // quarter-millimeter pixels keep the rim's rasterization error small
    let sino = project(&disk_on(GridSpec::square(512, 0.25), r, [cy, cx]), geom).unwrap();
    for i in 0..geom.n_views {
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        for j in 0..geom.n_channels {
            let ((px, py), (dx, dy)) = geom.ray(i, j);
            let dist = ((cx - px) * dy - (cy - py) * dx).abs();
            let chord = if dist < r { 2.0 * (r * r - dist * dist).sqrt() * MU } else { 0.0 };
            err2 += (sino.values[[i, j]] as f64 - chord).powi(2);
            ref2 += chord * chord;
        }
        let rel = (err2 / ref2).sqrt();
        assert!(rel < 0.01, "{:?} view {i}: relative profile error {rel}", geom.mode);
    }
}

#[test]
fn off_center_disk_matches_chord_lengths() {
    chord_check(&parallel(90, 384, 0.5));
    chord_check(&ScanGeometry {
        mode: ScanMode::FanFlat,
        n_views: 90,
        n_channels: 400,
        detector_pitch_mm: 1.0,
        source_to_iso_mm: Some(500.0),
        source_to_detector_mm: Some(1000.0),
    });
}

#[test]
fn log_noise_follows_delta_method() {
    // N0 = 100 mA * (1 s / 100 views) * 1e4 = 1e4
    let geom = parallel(100, 1000, 0.5);
    let out = degrade_and_count(&Sinogram::zeros(geom), &clean_model(1e4)).unwrap();
    let (m, s) = mean_std(out.values.iter().map(|&v| v as f64));
    assert_eq!(out.values.len(), 100_000);
    assert!(m.abs() < 1e-3);
    assert!((s / 0.01 - 1.0).abs() < 0.05, "std {s}");
}

fn recon_cfg() -> ReconConfig {
    ReconConfig::new(square(256), MU)
}

fn interior(v: &Array2<f32>, radius_px: f64) -> Vec<f64> {
    let c = 127.5;
    v.indexed_iter()
        .filter(|((r, k), _)| ((*r as f64 - c).powi(2) + (*k as f64 - c).powi(2)).sqrt() < radius_px)
        .map(|(_, &x)| x as f64)
        .collect()
}

#[test]
fn water_disk_reconstructs_to_zero_hu() {
    let sino = project(&disk_map(50.0, [0.0, 0.0]), &parallel(720, 384, 0.5)).unwrap();
    let img = fbp(&sino, &recon_cfg()).unwrap();
    // 40 mm interior, clear of the rim
    let px = interior(img.values(), 80.0);
    let (m, _) = mean_std(px.iter().copied());
    assert!(m.abs() < 10.0, "interior mean {m} HU");
    let rmse = (px.iter().map(|v| v * v).sum::<f64>() / px.len() as f64).sqrt();
    assert!(rmse < 30.0, "interior rmse {rmse} HU");
}

#[test]
fn fbp_is_linear() {
    let geom = parallel(180, 384, 0.5);
    let s1 = project(&disk_map(30.0, [5.0, 0.0]), &geom).unwrap();
    let s2 = project(&disk_map(12.0, [-20.0, 25.0]), &geom).unwrap();
    let sum = Sinogram { values: &s1.values + &s2.values, geometry: geom.clone() };
    let cfg = recon_cfg();
    let a = fbp_mu(&sum, &cfg).unwrap();
    let b = fbp_mu(&s1, &cfg).unwrap() + fbp_mu(&s2, &cfg).unwrap();
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(err / scale < 1e-4, "relative deviation {}", err / scale);
}

#[test]
fn recon_noise_scales_inverse_root_flux() {
    let geom = parallel(360, 384, 0.5);
    let sino = project(&disk_map(50.0, [0.0, 0.0]), &geom).unwrap();
    let cfg = recon_cfg();
    let mut noiseless = clean_model(3.6e5);
    noiseless.noise = false;
    let reference = fbp(&degrade_and_count(&sino, &noiseless).unwrap(), &cfg).unwrap();
    let mut scaled = Vec::new();
    // N0 = 100 * (1/360) * ppm: roughly 1e3, 1e4, 1e5
    for ppm in [3.6e3, 3.6e4, 3.6e5] {
        let m = clean_model(ppm);
        let img = fbp(&degrade_and_count(&sino, &m).unwrap(), &cfg).unwrap();
        let diff = img.values() - reference.values();
        let (_, s) = mean_std(interior(&diff, 60.0));
        scaled.push(s * m.n0(360).sqrt());
    }
    for s in &scaled[1..] {
        assert!((s / scaled[0] - 1.0).abs() < 0.1, "std * sqrt(N0): {scaled:?}");
    }
}
