mod common;

use std::sync::OnceLock;

use common::{anatomy, mean_std, rmse, square, toy_simulation};
use ndarray::Array2;
use pcct_sr::dataset::{decompose, group_seeds, noiseless_scan, simulate_group, SampleGroup, SimulationConfig};
use pcct_sr::denoiser::*;
use pcct_sr::imaging::{hu_to_unit, unit_to_hu, ImageGrid};
use pcct_sr::phantom::PhantomSpec;
use pcct_sr::simulator::Protocol;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const N: usize = 128;
const P: usize = 64;

struct Corpus {
    specs: Vec<PhantomSpec>,
    sim: SimulationConfig,
    groups: Vec<SampleGroup>,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let sim = toy_simulation(N, 2e4);
        let specs: Vec<PhantomSpec> = (0..3).map(|i| PhantomSpec::new(format!("anat-{i}"), square(N), anatomy(80))).collect();
        let groups =
            specs.iter().enumerate().map(|(i, s)| simulate_group(s, &sim, &format!("g{i}"), group_seeds(31, i)).unwrap()).collect();
        Corpus { specs, sim, groups }
    })
}

fn arch() -> DenoiserArch {
    DenoiserArch { channels: 1, base_width: 8, channel_mults: vec![1, 2, 2], tile: 128, overlap: 32, seed: 2 }
}

fn train_cfg(iterations: usize, lr: f64) -> DenoiserTrainConfig {
    DenoiserTrainConfig { iterations, batch_size: 4, lr, patch_size: P, seed: 9, grad_clip: None, cosine_decay: true }
}

fn lr_model() -> &'static TrainedDenoiser {
    static M: OnceLock<TrainedDenoiser> = OnceLock::new();
    M.get_or_init(|| train_lr_denoiser(&corpus().groups[..2], &arch(), &train_cfg(600, 5e-3)).unwrap())
}

fn hr_model() -> &'static TrainedDenoiser {
    static M: OnceLock<TrainedDenoiser> = OnceLock::new();
    M.get_or_init(|| train_hr_denoiser(&corpus().groups[..2], &arch(), &train_cfg(600, 5e-3)).unwrap())
}

#[test]
fn lr_loss_stays_above_target_noise_floor() {
    let c = corpus();
    // the loss compares against the other instance, so its own noise is
    // irreducible: E|f(a) - b|^2 >= E|b - E b|^2
    // pixels weighted by how many patch positions cover them
    let cover = |i: usize| (i.saturating_sub(P - 1)..=i.min(N - P)).count() as f64;
    let norm = ((N - P + 1) * (N - P + 1) * P * P) as f64;
    let mut floor = 0.0;
    for (spec, g) in c.specs.iter().zip(&c.groups).take(2) {
        let s = noiseless_scan(spec, &c.sim, Protocol::LR, g.provenance.seeds.render).unwrap();
        for target in [&g.lr_a, &g.lr_b] {
            let e: f64 = target
                .values()
                .indexed_iter()
                .map(|((r, k), &b)| cover(r) * cover(k) * ((hu_to_unit(b) - hu_to_unit(s.values()[[r, k]])) as f64).powi(2))
                .sum();
            floor += e / norm / 4.0;
        }
    }
    let h = &lr_model().loss_history;
    let tail = h[h.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail >= floor, "tail loss {tail} below noise floor {floor}");
    assert!(tail < h[..10].iter().sum::<f64>() / 10.0);
}

#[test]
fn untrained_residual_keeps_input_noise() {
    let net = DenoiserNet::new(arch()).unwrap();
    let g = &corpus().groups[2];
    let (_, noise) = denoise(&net, &g.lr_a).unwrap();
    let (_, s_in) = mean_std(g.lr_a.values().iter().map(|&v| v as f64));
    let (_, s_res) = mean_std(noise.values().iter().map(|&v| v as f64));
    let r = s_res / s_in;
    assert!((0.5..=1.5).contains(&r), "residual/input std {r}");
}

#[test]
fn flat_field_has_no_noise() {
    let img = ImageGrid::centered(Array2::from_elem((N, N), 40.0), (0.5, 0.5), "flat").unwrap();
    let (_, noise) = denoise(&lr_model().net, &img).unwrap();
    let worst = noise.values().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(worst < 2.0, "max |noise| {worst} HU");
}

#[test]
fn tiled_and_whole_inference_agree() {
    // 256x256 by mirroring a noisy LR slice
    let v = corpus().groups[2].lr_a.values();
    let idx = |i: usize| {
        let k = i % (2 * N);
        if k < N {
            k
        } else {
            2 * N - 1 - k
        }
    };
    let big = Array2::from_shape_fn((256, 256), |(r, c)| hu_to_unit(v[[idx(r), idx(c)]]));
    let net = &lr_model().net;
    let whole = net.predict_whole(&big).unwrap().mapv(unit_to_hu);
    let tiled = net.predict_tiled(&big, 128, 32).unwrap().mapv(unit_to_hu);
    let e = rmse(&whole, &tiled);
    assert!(e < 1.0, "tiled vs whole rmse {e} HU");
}

#[test]
fn pure_noise_variance_drops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = Array2::from_shape_fn((N, N), |_| 40.0 + 50.0 * rng.sample::<f32, _>(StandardNormal));
    let img = ImageGrid::centered(v, (0.5, 0.5), "noise").unwrap();
    let out = lr_model().net.apply(&img).unwrap();
    let (_, s_in) = mean_std(img.values().iter().map(|&x| x as f64));
    let (_, s_out) = mean_std(out.values().iter().map(|&x| x as f64));
    assert!(s_out < s_in, "output std {s_out} vs input {s_in}");
}

#[test]
fn hr_denoiser_improves_held_out_slice() {
    let g = &corpus().groups[2];
    let out = hr_model().net.apply(&g.noisy_hr).unwrap();
    let before = rmse(g.noisy_hr.values(), g.clean_hr.values());
    let after = rmse(out.values(), g.clean_hr.values());
    assert!(after < before, "rmse {before} -> {after}");
}

#[test]
fn smoothed_loss_is_non_increasing() {
    let s = smooth(&hr_model().loss_history, 100);
    // one sample per full window
    let blocks: Vec<f64> = s.iter().skip(99).step_by(100).copied().collect();
    assert!(blocks.len() >= 4);
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0], "smoothed loss rose: {blocks:?}");
    }
}

#[test]
fn noise_free_corpus_learns_identity() {
    let c = corpus();
    let clean: Vec<ImageGrid> =
        c.specs.iter().zip(&c.groups).map(|(s, g)| noiseless_scan(s, &c.sim, Protocol::HR, g.provenance.seeds.render).unwrap()).collect();
    let pairs: Vec<(&ImageGrid, &ImageGrid)> = clean[..2].iter().map(|x| (x, x)).collect();
    let t = train_pairs(&pairs, &arch(), &train_cfg(600, 1e-2)).unwrap();
    let held = &clean[2];
    let e = rmse(t.net.apply(held).unwrap().values(), held.values());
    assert!(e < 5.0, "identity rmse {e} HU on held-out slice");
}

#[test]
fn decomposition_of_network_output_is_exact() {
    let g = &corpus().groups[2];
    let (d, n) = denoise(&lr_model().net, &g.lr_a).unwrap();
    for ((&a, &dv), &nv) in g.lr_a.values().iter().zip(d.values()).zip(n.values()) {
        assert_eq!(dv + nv, a);
    }
    let (d2, _) = decompose(&g.lr_a, &d).unwrap();
    assert_eq!(d2.values(), d.values());
}
