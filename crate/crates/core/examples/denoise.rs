//! Noise2Sim on two independent LR scans, then signal/noise decomposition.
//!
//! cargo run --example denoise -- [iterations]

use pcct_sr::dataset::{group_seeds, simulate_group, SimulationConfig};
use pcct_sr::denoiser::{denoise, smooth, train_lr_denoiser, DenoiserArch, DenoiserTrainConfig, MeanFilter};
use pcct_sr::imaging::{GridSpec, ImageGrid};
use pcct_sr::phantom::{PhantomKind, PhantomSpec};
use pcct_sr::simulator::{DegradationModel, ScanGeometry};

fn center_std(img: &ImageGrid) -> f64 {
    let (h, w) = img.shape();
    let v = img.values().slice(ndarray::s![h / 2 - 8..h / 2 + 8, w / 2 - 8..w / 2 + 8]).to_owned();
    let m = v.mean().unwrap_or(0.0);
    (v.mapv(|x| (x - m) * (x - m)).mean().unwrap_or(0.0) as f64).sqrt()
}

fn main() -> pcct_sr::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let mut sim = SimulationConfig::new(
        ScanGeometry { n_views: 180, n_channels: 96, ..ScanGeometry::default() },
        DegradationModel { photons_per_mas: 2.0e4, ..DegradationModel::default() },
    );
    sim.shrink_factor = 0.5;
    let groups = (0..2)
        .map(|i| {
            let spec = PhantomSpec::new(
                format!("anat-{i}"),
                GridSpec::square(64, 0.5),
                PhantomKind::AnatomyLike { body_hu: 40.0, bone_hu: 1200.0, laminae: 8, uniform_region_px: 40, extra_shapes: vec![] },
            );
            simulate_group(&spec, &sim, &format!("g{i}"), group_seeds(3, i))
        })
        .collect::<pcct_sr::Result<Vec<_>>>()?;
    let arch = DenoiserArch { base_width: 8, tile: 64, overlap: 16, ..DenoiserArch::default() };
    let cfg =
        DenoiserTrainConfig { iterations, batch_size: 2, lr: 2e-3, patch_size: 48, cosine_decay: true, ..DenoiserTrainConfig::default() };
    let trained = train_lr_denoiser(&groups[..1], &arch, &cfg)?;
    let s = smooth(&trained.loss_history, 20);
    println!("loss {:.5} -> {:.5}", s[0], s[s.len() - 1]);
    let held = &groups[1].lr_a;
    let (den, noise) = denoise(&trained.net, held)?;
    let (mean_den, _) = denoise(&MeanFilter { radius: 2 }, held)?;
    println!(
        "uniform-region std: input {:.1} HU, Noise2Sim {:.1} HU, 5x5 mean {:.1} HU; noise map std {:.1} HU",
        center_std(held),
        center_std(&den),
        center_std(&mean_den),
        center_std(&noise)
    );
    let exact = den.values().iter().zip(noise.values()).zip(held.values()).all(|((&d, &n), &a)| d + n == a);
    println!("denoised + noise == input bitwise: {exact}");
    Ok(())
}
