//! Parallel and fan-beam FBP of a water disk.

use pcct_sr::imaging::{hu_to_mu, GridSpec};
use pcct_sr::phantom::{render_phantom, PhantomKind, PhantomSpec};
use pcct_sr::recon::{fbp, RampFilter, ReconConfig};
use pcct_sr::simulator::{project, ScanGeometry, ScanMode};

fn main() -> pcct_sr::Result<()> {
    let grid = GridSpec::square(256, 0.5);
    let spec = PhantomSpec::new(
        "water",
        grid.clone(),
        PhantomKind::UniformDisk { radius_mm: 50.0, hu: 0.0, center_mm: [0.0, 0.0], background_hu: -1000.0 },
    );
    let mu = hu_to_mu(&render_phantom(&spec, 0)?, 0.02)?;
    let fan = ScanGeometry {
        mode: ScanMode::FanFlat,
        n_views: 720,
        n_channels: 512,
        detector_pitch_mm: 0.8,
        source_to_iso_mm: Some(500.0),
        source_to_detector_mm: Some(1000.0),
    };
    for geom in [ScanGeometry::default(), fan] {
        let sino = project(&mu, &geom)?;
        for filter in [RampFilter::RamLak, RampFilter::HannApodized] {
            let mut cfg = ReconConfig::new(grid.clone(), 0.02);
            cfg.filter = filter;
            let img = fbp(&sino, &cfg)?;
            let inner: Vec<f64> = img
                .values()
                .indexed_iter()
                .filter(|((r, c), _)| ((*r as f64 - 127.5).powi(2) + (*c as f64 - 127.5).powi(2)).sqrt() < 80.0)
                .map(|(_, &v)| v as f64)
                .collect();
            let mean = inner.iter().sum::<f64>() / inner.len() as f64;
            let rmse = (inner.iter().map(|v| v * v).sum::<f64>() / inner.len() as f64).sqrt();
            println!("{:?} {filter:?}: interior mean {mean:+.2} HU, rmse {rmse:.2} HU", geom.mode);
        }
    }
    Ok(())
}
