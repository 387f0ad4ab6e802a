//! One line per acceptance criterion. Pass a substring (e.g. `C5`) to run a
//! subset.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{ks_pvalue, ks_statistic, mean_std, parallel, square};
use ndarray::s;
use pcct_nn::Tensor;
use pcct_sr::dataset::*;
use pcct_sr::denoiser::{denoise, smooth, train_lr_denoiser, DenoiserArch, DenoiserTrainConfig};
use pcct_sr::diffusion::*;
use pcct_sr::eval::{mtf_edge, noise_psd, reference_metrics, Taper, DEFAULT_DYNAMIC_RANGE_HU};
use pcct_sr::imaging::{hu_to_mu, Patch};
use pcct_sr::phantom::{render_phantom, PhantomKind, PhantomSpec};
use pcct_sr::recon::{fbp, ReconConfig};
use pcct_sr::run::RunConfig;
use pcct_sr::simulator::{degrade_and_count, project, DegradationModel, Protocol};
use pcct_sr::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json")
}

fn toy() -> RunConfig {
    RunConfig::load(&toy_path(), &[]).unwrap()
}

fn c1() -> Outcome {
    let s = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let t = s.steps();
    let mut prod = 1.0;
    let mut worst = 0.0f64;
    for i in 1..=t {
        prod *= s.alpha(i);
        worst = worst.max(((s.gamma(i) - prod) / prod).abs());
    }
    let g = s.gammas().to_vec();
    let cdf = |x: f64| (1..=t).map(|i| ((x - g[i]) / (g[i - 1] - g[i])).clamp(0.0, 1.0)).sum::<f64>() / t as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut xs: Vec<f64> = (0..100_000).map(|_| sample_gamma(&s, &mut rng).0).collect();
    let p = ks_pvalue(ks_statistic(&mut xs, cdf), xs.len());
    let gt = s.gamma(t);
    check(
        t == 2000 && worst < 1e-12 && gt < 1e-3 && p > 0.01,
        format!("T={t}, max rel dev {worst:.1e} (< 1e-12), gamma_T {gt:.2e} (< 1e-3), KS p {p:.3} (> 0.01)"),
    )
}

fn batch(seed: u64) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p) = (4, 32);
    let sched = make_schedule(200, 1e-4, 0.1).unwrap();
    let x = Tensor::from_vec(&[n, 1, p, p], (0..n * p * p).map(|_| rng.sample(StandardNormal)).collect());
    let y0 = Tensor::from_vec(&[n, 1, p, p], (0..n * p * p).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect());
    TrainingBatch::draw(x, y0, &sched, &mut rng)
}

fn c2() -> Outcome {
    let b = batch(5);
    let oracle = training_loss(&OraclePredictor { channels: 1, y0: b.y0.clone() }, &b).map_err(|e| e.to_string())?;
    let expected = (2.0 / std::f64::consts::PI).sqrt();
    let zero = (0..20).map(|s| training_loss(&ZeroPredictor { channels: 1 }, &batch(100 + s)).unwrap()).sum::<f64>() / 20.0;
    let rel = zero / expected - 1.0;
    check(
        oracle < 1e-6 && rel.abs() < 0.02,
        format!("oracle loss {oracle:.1e} (< 1e-6), zero-net loss {zero:.4} vs sqrt(2/pi) {expected:.4}, {:+.2}% (within 2%)", 100.0 * rel),
    )
}

fn c3() -> Outcome {
    let sched = make_schedule(100, 1e-4, 0.2).unwrap();
    let p = 32;
    let y0 = Tensor::from_vec(&[1, 1, p, p], (0..p * p).map(|i| if (i % p) < p / 2 { -0.8 } else { 0.6 }).collect());
    let oracle = OraclePredictor { channels: 1, y0: y0.clone() };
    let out = sample_tensor(&oracle, &Tensor::zeros(&[1, 1, p, p]), &sched, 21, &SampleOptions::default()).map_err(|e| e.to_string())?;
    let rmse = (out.data().iter().zip(y0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (p * p) as f64).sqrt();
    // network units span [-1, 1]
    let frac = rmse / 2.0;
    check(frac < 0.05, format!("T=100 oracle reversal rmse {rmse:.2e} = {:.3}% of range (< 5%)", 100.0 * frac))
}

fn c4() -> Outcome {
    let mu = 0.02;
    let spec = PhantomSpec::new(
        "disk",
        square(256),
        PhantomKind::UniformDisk { radius_mm: 50.0, hu: 0.0, center_mm: [0.0, 0.0], background_hu: -1000.0 },
    );
    let map = hu_to_mu(&render_phantom(&spec, 0).map_err(|e| e.to_string())?, mu).unwrap();
    let cfg = ReconConfig::new(square(256), mu);
    let interior = |v: &ndarray::Array2<f32>, r: f64| -> Vec<f64> {
        v.indexed_iter()
            .filter(|((i, j), _)| ((*i as f64 - 127.5).powi(2) + (*j as f64 - 127.5).powi(2)).sqrt() < r)
            .map(|(_, &x)| x as f64)
            .collect()
    };
    let model = |ppm: f64, noise: bool| DegradationModel {
        tube_current_ma: 100.0,
        exposure_time_s: 1.0,
        photons_per_mas: ppm,
        focal_spot_fwhm_mm: 0.0,
        crosstalk: 0.0,
        noise,
        rng_seed: 4,
    };
    let geom = parallel(720, 384, 0.5);
    let sino = project(&map, &geom).unwrap();
    let clean = fbp(&degrade_and_count(&sino, &model(7.2e5, false)).unwrap(), &cfg).unwrap();
    let px = interior(clean.values(), 80.0);
    let rmse = (px.iter().map(|v| v * v).sum::<f64>() / px.len() as f64).sqrt();
    let frac = rmse / DEFAULT_DYNAMIC_RANGE_HU;
    let mut scaled = Vec::new();
    for ppm in [7.2e3, 7.2e4, 7.2e5] {
        let m = model(ppm, true);
        let img = fbp(&degrade_and_count(&sino, &m).unwrap(), &cfg).unwrap();
        let (_, sd) = mean_std(interior(&(img.values() - clean.values()), 60.0));
        scaled.push(sd * m.n0(720).sqrt());
    }
    let spread = scaled.iter().map(|s| (s / scaled[0] - 1.0).abs()).fold(0.0, f64::max);
    check(
        frac < 0.03 && spread < 0.1,
        format!(
            "interior rmse {rmse:.1} HU = {:.2}% of {DEFAULT_DYNAMIC_RANGE_HU} HU (< 3%); std*sqrt(N0) {:?} spread {:.1}% (< 10%)",
            100.0 * frac,
            scaled.iter().map(|s| format!("{s:.0}")).collect::<Vec<_>>(),
            100.0 * spread
        ),
    )
}

fn c5() -> Outcome {
    let cfg = toy();
    let edge_spec = cfg.phantoms.iter().find(|p| matches!(p.object, PhantomKind::Edge { .. })).ok_or("toy config has no edge phantom")?;
    let roi = cfg.eval.edge.clone().ok_or("toy config has no edge ROI")?;
    let base = cfg.simulation();
    let pitch = base.geometry.detector_pitch_mm;
    let mtf50 = |sim: &SimulationConfig, protocol: Protocol| -> Result<f64, String> {
        let img = noiseless_scan(edge_spec, sim, protocol, 0).map_err(|e| e.to_string())?;
        mtf_edge(&img, &roi, cfg.eval.oversample).map_err(|e| e.to_string())?.mtf50.ok_or_else(|| "no 50% crossing".to_string())
    };
    let xt = [0.0, 0.1, 0.2];
    let focal = [0.0, 1.0, 2.0];
    let mut table = [[0.0; 3]; 3];
    for (i, &a) in xt.iter().enumerate() {
        for (j, &f) in focal.iter().enumerate() {
            let mut sim = base.clone();
            sim.degradation.crosstalk = a;
            sim.degradation.focal_spot_fwhm_mm = f * pitch;
            table[i][j] = mtf50(&sim, Protocol::LR)?;
        }
    }
    let mut monotone = true;
    for i in 0..3 {
        for j in 0..3 {
            if i > 0 && table[i][j] >= table[i - 1][j] {
                monotone = false;
            }
            if j > 0 && table[i][j] >= table[i][j - 1] {
                monotone = false;
            }
        }
    }
    let (lr, hr) = (mtf50(&base, Protocol::LR)?, mtf50(&base, Protocol::HR)?);
    let rows: Vec<String> = table.iter().map(|r| format!("[{:.3} {:.3} {:.3}]", r[0], r[1], r[2])).collect();
    check(
        monotone && hr > lr,
        format!(
            "mtf50 (1/mm), crosstalk rows x focal {{0,1,2}} px columns: {}; strictly decreasing: {monotone}; HR {hr:.3} > LR {lr:.3}: {}",
            rows.join(" "),
            hr > lr
        ),
    )
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    }
}

fn c6() -> Outcome {
    use pcct_sr::eval::EdgeSpec;
    use statrs::function::erf::erf;
    let (px, angle) = (0.5, 5.0f64);
    let (sn, cs) = angle.to_radians().sin_cos();
    let roi = EdgeSpec { center_mm: [0.0, 0.0], angle_deg: angle, half_width_mm: 8.0, half_length_mm: 20.0 };
    let probe = common::grid(ndarray::Array2::zeros((128, 128)), px, "edge");
    let image = |f: &dyn Fn(f64, f64) -> f64| {
        let v = ndarray::Array2::from_shape_fn((128, 128), |(r, c)| {
            let (y, x) = probe.pixel_center(r, c);
            f(y, x) as f32
        });
        common::grid(v, px, "edge")
    };
    let sub = 256;
    let box_edge = image(&|y, x| {
        let acc: f64 = (0..sub)
            .map(|k| {
                let yy = y - px / 2.0 + (k as f64 + 0.5) * px / sub as f64;
                ((x + px / 2.0 - yy * sn / cs) / px).clamp(0.0, 1.0)
            })
            .sum();
        1000.0 * acc / sub as f64
    });
    let mut worst = 0.0f64;
    let mut dev = |img: &pcct_sr::imaging::ImageGrid, expected: &dyn Fn(f64) -> f64| -> Result<(), String> {
        let m = mtf_edge(img, &roi, 4).map_err(|e| e.to_string())?;
        for (&f, &v) in m.frequencies.iter().zip(&m.modulation) {
            if f <= 0.25 / px {
                worst = worst.max((v - expected(f)).abs());
            }
        }
        Ok(())
    };
    dev(&box_edge, &|f| (sinc(f * px * cs) * sinc(f * px * sn)).abs())?;
    for sigma in [0.4, 0.6] {
        let img = image(&|y, x| 1000.0 * 0.5 * (1.0 + erf((x * cs - y * sn) / (sigma * 2f64.sqrt()))));
        dev(&img, &|f| (-2.0 * std::f64::consts::PI.powi(2) * sigma * sigma * f * f).exp())?;
    }
    check(
        worst < 0.02,
        format!("box aperture and Gaussian sigma 0.4/0.6 mm: max |MTF - closed form| {worst:.4} (< 0.02) up to half-Nyquist"),
    )
}

fn c7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut acc: Vec<f64> = Vec::new();
    let mut worst_sum = 0.0f64;
    for _ in 0..20 {
        let p = Patch {
            values: ndarray::Array2::from_shape_fn((64, 64), |_| 30.0 * rng.sample::<f32, _>(StandardNormal)),
            source_id: "white".into(),
            offset: (0, 0),
            size: (64, 64),
        };
        for (order, taper) in [(0, Taper::None), (1, Taper::Hann)] {
            let psd = noise_psd(&p, 0.5, order, taper).map_err(|e| e.to_string())?;
            worst_sum = worst_sum.max((psd.power_fraction.iter().sum::<f64>() - 100.0).abs());
            if order == 0 {
                if acc.is_empty() {
                    acc = vec![0.0; psd.power_fraction.len()];
                }
                acc.iter_mut().zip(&psd.power_fraction).for_each(|(a, v)| *a += v / 20.0);
            }
        }
    }
    let bins = &acc[1..];
    let mean = bins.iter().sum::<f64>() / bins.len() as f64;
    let flat = bins.iter().map(|b| (b / mean - 1.0).abs()).fold(0.0, f64::max);
    check(
        worst_sum < 1e-6 && flat < 0.2,
        format!("max |sum - 100| {worst_sum:.1e} (< 1e-6); white-noise radial max deviation {:.1}% (< 20%) over 20 patches", 100.0 * flat),
    )
}

fn c8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bitwise = true;
    for _ in 0..1_000_000 {
        let a = quantize_hu(rng.random_range(-4000.0f32..4000.0));
        let d = rng.random_range(-1.0e4f32..1.0e4);
        let (dn, n) = decompose_pixel(a, d).ok_or("decomposition not exact")?;
        bitwise &= dn + n == a && a - dn == n;
    }
    let cfg = toy();
    let specs: Vec<PhantomSpec> = cfg.phantoms.iter().filter(|p| matches!(p.object, PhantomKind::AnatomyLike { .. })).cloned().collect();
    let sim = cfg.simulation();
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&specs, &sim, dir.path(), 1).map_err(|e| e.to_string())?;
    let (_, groups) = load_dataset(dir.path()).map_err(|e| e.to_string())?;
    let arch = DenoiserArch { base_width: 16, channel_mults: vec![1, 2, 2, 2], tile: 64, overlap: 16, ..Default::default() };
    let tc = DenoiserTrainConfig { iterations: 1200, lr: 2e-3, batch_size: 4, patch_size: 64, cosine_decay: true, ..Default::default() };
    let trained = train_lr_denoiser(&groups[..1], &arch, &tc).map_err(|e| e.to_string())?;
    let mut ok = bitwise;
    let mut parts = Vec::new();
    for g in &groups {
        let spec = specs.iter().find(|s| s.name == g.provenance.phantom).unwrap();
        let reference = noiseless_scan(spec, &sim, Protocol::LR, g.provenance.seeds.render).map_err(|e| e.to_string())?;
        let (den, noise) = denoise(&trained.net, &g.lr_a).map_err(|e| e.to_string())?;
        bitwise &= den.values().iter().zip(noise.values()).zip(g.lr_a.values()).all(|((&d, &n), &a)| d + n == a);
        // 24x24 block inside the uniform region
        let (h, w) = g.lr_a.values().dim();
        let sl = s![h / 2 - 12..h / 2 + 12, w / 2 - 12..w / 2 + 12];
        let err = |img: &ndarray::Array2<f32>| mean_std((&img.slice(sl) - &reference.values().slice(sl)).iter().map(|&v| v as f64));
        let (_, s_in) = err(g.lr_a.values());
        let (bias, s_out) = err(den.values());
        ok &= s_out <= 0.5 * s_in && bias.abs() < 3.0;
        parts.push(format!("{}: std {s_in:.1} -> {s_out:.1} HU, bias {bias:+.2} HU", g.id));
    }
    check(ok && bitwise, format!("decomposition bitwise: {bitwise}; {} (need std halved, |bias| < 3 HU)", parts.join("; ")))
}

fn c9() -> Outcome {
    let n = 64;
    let spec = PhantomSpec::new("one", square(n), common::anatomy(n * 5 / 8));
    let sim =
        SimulationConfig::new(parallel(180, n * 3 / 2, 0.5), DegradationModel { photons_per_mas: 2.0e4, ..DegradationModel::default() });
    let g = simulate_group(&spec, &sim, "one", GroupSeeds { render: 1, lr_a: 2, lr_b: 3, hr: 4 }).map_err(|e| e.to_string())?;
    let arch = DdpmArch { base_width: 16, channel_mults: vec![1, 2, 2], embed_dim: 32, ..DdpmArch::default() };
    let sc = ScheduleConfig { steps: 200, beta_start: 1e-4, beta_end: 0.1 };
    let tc = DdpmTrainConfig { iterations: 2000, batch_size: 4, lr: 1e-3, patch_size: n, cosine_decay: true, ..Default::default() };
    let t = train(std::slice::from_ref(&g), ConditioningScheme::Plain, &arch, &sc, &tc).map_err(|e| e.to_string())?;
    let loss = *smooth(&t.loss_history, 100).last().unwrap();
    let out = sample(&t.net, ConditioningScheme::Plain, &[&g.lr_a], &sc.build().unwrap(), 7, &SampleOptions::default())
        .map_err(|e| e.to_string())?;
    let p_out = reference_metrics(&out, &g.clean_hr, None, DEFAULT_DYNAMIC_RANGE_HU).unwrap().psnr_db;
    let p_in = reference_metrics(&g.lr_a, &g.clean_hr, None, DEFAULT_DYNAMIC_RANGE_HU).unwrap().psnr_db;
    check(
        loss < 0.1 && p_out > p_in,
        format!("2000 iterations: smoothed loss {loss:.4} (< 0.1); PSNR sample {p_out:.2} dB > lr_a {p_in:.2} dB"),
    )
}

struct ToyRuns {
    digests: [BTreeMap<String, String>; 2],
    reports: Vec<serde_json::Value>,
    elapsed: Duration,
    error: Option<String>,
}

fn digest_tree(root: &Path) -> BTreeMap<String, String> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_none_or(|x| x != "svg"))
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().display().to_string();
            (rel, hex::encode(Sha256::digest(std::fs::read(e.path()).unwrap())))
        })
        .collect()
}

fn read_reports(root: &Path) -> Vec<serde_json::Value> {
    let dir = root.join("eval/compare");
    let mut reports = Vec::new();
    let Ok(entries) = std::fs::read_dir(&dir) else { return reports };
    let mut paths: Vec<PathBuf> = entries.map(|e| e.unwrap().path().join("report.json")).filter(|p| p.exists()).collect();
    paths.sort();
    for p in paths {
        if let Ok(r) = serde_json::from_str(&std::fs::read_to_string(p).unwrap()) {
            reports.push(r);
        }
    }
    reports
}

fn toy_runs() -> &'static ToyRuns {
    static R: OnceLock<ToyRuns> = OnceLock::new();
    R.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let mut error = None;
        let mut digests: [BTreeMap<String, String>; 2] = Default::default();
        for (k, d) in digests.iter_mut().enumerate() {
            let out = tmp.path().join(format!("run{k}"));
            let o = Command::new(env!("CARGO_BIN_EXE_pcctsr"))
                .arg("--config")
                .arg(toy_path())
                .arg("--out")
                .arg(&out)
                .arg("pipeline")
                .env_remove("PCCTSR_OUT")
                .output()
                .unwrap();
            if !o.status.success() {
                error = Some(format!("pipeline run {k} failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
                break;
            }
            *d = digest_tree(&out);
        }
        ToyRuns { reports: read_reports(&tmp.path().join("run0")), digests, elapsed: start.elapsed(), error }
    })
}

fn c10() -> Outcome {
    let expect = [(ConditioningScheme::Plain, 1), (ConditioningScheme::NoiseSplit, 2), (ConditioningScheme::DenoiseOnly, 1)];
    let counts_ok = expect.iter().all(|&(s, c)| s.channels() == c && s.channel_names().len() == c);
    let mut g = simulate_group(
        &PhantomSpec::new("tiny", square(32), common::anatomy(12)),
        &common::toy_simulation(32, 2e4),
        "tiny",
        group_seeds(1, 0),
    )
    .map_err(|e| e.to_string())?;
    let plain = ConditioningScheme::Plain.inputs(&g).map(|v| v.len()).map_err(|e| e.to_string())?;
    let arch = DdpmArch { base_width: 4, channel_mults: vec![1, 2], embed_dim: 8, ..DdpmArch::default() };
    let sc = ScheduleConfig { steps: 20, beta_start: 1e-4, beta_end: 0.1 };
    let tc = DdpmTrainConfig { iterations: 2, batch_size: 1, patch_size: 16, ..Default::default() };
    let mut missing_ok = true;
    for s in [ConditioningScheme::NoiseSplit, ConditioningScheme::DenoiseOnly] {
        missing_ok &= matches!(train(std::slice::from_ref(&g), s, &arch, &sc, &tc), Err(Error::MissingStage { ref stage, .. }) if stage == "denoise-apply");
    }
    g = attach_denoised(&g, &pcct_sr::denoiser::MeanFilter { radius: 1 }).map_err(|e| e.to_string())?;
    let encoded_ok = expect.iter().all(|&(s, c)| s.encode(&s.inputs(&g).unwrap()).map(|x| x.shape()[1] == c).unwrap_or(false));
    let runs = toy_runs();
    let recorded: Vec<String> = runs
        .reports
        .iter()
        .map(|r| &r["low_frequency_ordering"])
        .filter(|c| c.is_object())
        .map(|c| format!("plain {} vs {} holds={}", c["plain"], c["others"], c["holds"]))
        .collect();
    let report_ok = !recorded.is_empty() && recorded.len() == runs.reports.len();
    check(
        counts_ok && plain == 1 && encoded_ok && missing_ok && report_ok,
        format!(
            "channels plain/noise_split/denoise_only = 1/2/1: {}; missing channels -> denoise-apply stage error: {missing_ok}; toy low-frequency ordering (recorded, not asserted): {}",
            counts_ok && encoded_ok && plain == 1,
            if recorded.is_empty() { "absent".to_string() } else { recorded.join("; ") }
        ),
    )
}

fn c11() -> Outcome {
    let runs = toy_runs();
    if let Some(e) = &runs.error {
        return Err(e.clone());
    }
    let [a, b] = &runs.digests;
    let differing: Vec<&String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    let budget = Duration::from_secs(30 * 60);
    check(
        !a.is_empty() && differing.is_empty() && runs.elapsed < budget,
        format!(
            "{} artifacts (svg excluded), {} differ {:?}; two runs took {:.0} s (< 1800 s)",
            a.len(),
            differing.len(),
            differing.iter().take(5).collect::<Vec<_>>(),
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome, u64); 11] = [
        ("C1", "schedule identities", c1, 10),
        ("C2", "training-loss oracle", c2, 60),
        ("C3", "oracle reversal", c3, 60),
        ("C4", "FBP round trip", c4, 300),
        ("C5", "degradation monotonicity", c5, 600),
        ("C6", "MTF analytics", c6, 60),
        ("C7", "PSD properties", c7, 60),
        ("C8", "noise disentanglement", c8, 1200),
        ("C9", "DDPM overfit", c9, 1800),
        ("C10", "scheme contract", c10, 1800),
        ("C11", "end-to-end determinism", c11, 1800),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| id == p || name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(d) if secs < budget as f64 => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget} s budget")),
            Err(d) => (false, d),
        };
        println!("[{}] {id} {name}: {detail} ({secs:.1} s, budget {budget} s)", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
