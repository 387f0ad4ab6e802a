//! Trains a tiny conditional DDPM for each scheme and samples with a
//! respaced chain.
//!
//! cargo run --example diffusion -- [iterations]

use pcct_sr::dataset::{attach_denoised, group_seeds, simulate_group, SimulationConfig};
use pcct_sr::denoiser::MeanFilter;
use pcct_sr::diffusion::{sample, train, ConditioningScheme, DdpmArch, DdpmTrainConfig, SampleOptions, ScheduleConfig};
use pcct_sr::eval::{reference_metrics, DEFAULT_DYNAMIC_RANGE_HU};
use pcct_sr::imaging::GridSpec;
use pcct_sr::phantom::{PhantomKind, PhantomSpec};
use pcct_sr::simulator::{DegradationModel, ScanGeometry};

fn main() -> pcct_sr::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let mut sim = SimulationConfig::new(
        ScanGeometry { n_views: 120, n_channels: 48, ..ScanGeometry::default() },
        DegradationModel { photons_per_mas: 2.0e4, ..DegradationModel::default() },
    );
    sim.shrink_factor = 0.5;
    let spec = PhantomSpec::new(
        "anat",
        GridSpec::square(32, 0.5),
        PhantomKind::AnatomyLike { body_hu: 40.0, bone_hu: 1200.0, laminae: 6, uniform_region_px: 16, extra_shapes: vec![] },
    );
    let group = simulate_group(&spec, &sim, "g0", group_seeds(5, 0))?;
    // a cheap stand-in for the trained LR denoiser
    let group = attach_denoised(&group, &MeanFilter { radius: 1 })?;
    let schedule = ScheduleConfig { steps: 100, beta_start: 1e-4, beta_end: 0.2 };
    let arch = DdpmArch { base_width: 8, channel_mults: vec![1, 2], embed_dim: 16, ..DdpmArch::default() };
    let cfg = DdpmTrainConfig { iterations, batch_size: 2, lr: 1e-3, patch_size: 32, cosine_decay: true, ..DdpmTrainConfig::default() };
    let sched = schedule.build()?;
    let opts = SampleOptions { steps_override: Some(25), clip_x0: Some(1.0) };
    let base = reference_metrics(&group.lr_a, &group.clean_hr, None, DEFAULT_DYNAMIC_RANGE_HU)?;
    println!("lr_a: PSNR {:.2} dB", base.psnr_db);
    for scheme in ConditioningScheme::ALL {
        let trained = train(std::slice::from_ref(&group), scheme, &arch, &schedule, &cfg)?;
        let out = sample(&trained.net, scheme, &scheme.inputs(&group)?, &sched, 1, &opts)?;
        let m = reference_metrics(&out, &group.clean_hr, None, DEFAULT_DYNAMIC_RANGE_HU)?;
        println!(
            "{scheme} ({} channels {:?}): final loss {:.4}, PSNR {:.2} dB, SSIM {:.3}",
            scheme.channels(),
            scheme.channel_names(),
            trained.loss_history.last().copied().unwrap_or(f64::NAN),
            m.psnr_db,
            m.ssim
        );
    }
    Ok(())
}
