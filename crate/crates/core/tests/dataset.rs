mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::{anatomy, correlation, grid, square, toy_simulation};
use ndarray::Array2;
use pcct_sr::dataset::*;
use pcct_sr::denoiser::{Identity, MeanFilter};
use pcct_sr::phantom::{PhantomKind, PhantomSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

fn water_disk(name: &str) -> PhantomSpec {
    PhantomSpec::new(
        name,
        square(128),
        PhantomKind::UniformDisk { radius_mm: 28.0, hu: 0.0, center_mm: [0.0, 0.0], background_hu: -1000.0 },
    )
}

#[test]
fn lr_noise_realizations_are_uncorrelated() {
    let sim = toy_simulation(128, 2e4);
    let (mut na, mut nb) = (Vec::new(), Vec::new());
    for i in 0..4 {
        let g = simulate_group(&water_disk("disk"), &sim, &format!("g{i}"), group_seeds(77, i)).unwrap();
        // shrunk disk radius is 28 px; keep 20 px clear of the rim
        for ((r, c), &clean) in g.clean_hr.values().indexed_iter() {
            if ((r as f64 - 63.5).powi(2) + (c as f64 - 63.5).powi(2)).sqrt() < 20.0 {
                na.push((g.lr_a.values()[[r, c]] - clean) as f64);
                nb.push((g.lr_b.values()[[r, c]] - clean) as f64);
            }
        }
    }
    let rho = correlation(&na, &nb);
    assert!(rho.abs() < 0.05, "correlation {rho} over {} pixels", na.len());
}

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(dir).unwrap().display().to_string();
            (rel, hex::encode(Sha256::digest(fs::read(e.path()).unwrap())))
        })
        .collect()
}

fn small_specs() -> Vec<PhantomSpec> {
    (0..3).map(|i| PhantomSpec::new(format!("anat-{i}"), square(64), anatomy(24))).collect()
}

#[test]
fn same_seed_gives_identical_dataset_tree() {
    let sim = toy_simulation(64, 2e4);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&small_specs(), &sim, a.path(), 5).unwrap();
    let mb = build_dataset(&small_specs(), &sim, b.path(), 5).unwrap();
    build_dataset(&small_specs(), &sim, c.path(), 6).unwrap();
    assert_eq!(ma, mb);
    let (da, db, dc) = (tree_digest(a.path()), tree_digest(b.path()), tree_digest(c.path()));
    assert!(da.len() > 3 * 4);
    assert_eq!(da, db);
    assert_ne!(da, dc);
}

#[test]
fn single_phantom_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let specs = &small_specs()[..1];
    assert!(build_dataset(specs, &toy_simulation(64, 2e4), dir.path(), 1).is_err());
}

#[test]
fn identity_denoiser_leaves_no_noise() {
    let sim = toy_simulation(64, 2e4);
    let g = simulate_group(&small_specs()[0], &sim, "g", group_seeds(1, 0)).unwrap();
    let d = attach_denoised(&g, &Identity).unwrap();
    assert!(d.noise_map.as_ref().unwrap().values().iter().all(|&v| v == 0.0));
    assert_eq!(d.denoised_lr.as_ref().unwrap().values(), g.lr_a.values());
}

#[test]
fn mean_filter_noise_map_tracks_injected_noise() {
    let sigma = 30.0f32;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Array2::from_shape_fn((128, 128), |_| quantize_hu(40.0 + sigma * rng.sample::<f32, _>(StandardNormal)));
    let sim = toy_simulation(64, 2e4);
    let mut g = simulate_group(&small_specs()[0], &sim, "g", group_seeds(1, 0)).unwrap();
    let img = grid(v, 0.5, "lr_a");
    g.lr_a = img.clone();
    g.lr_b = img.clone();
    g.noisy_hr = img.clone();
    g.clean_hr = img;
    let d = attach_denoised(&g, &MeanFilter { radius: 2 }).unwrap();
    let (_, s) = common::mean_std(d.noise_map.unwrap().values().iter().map(|&x| x as f64));
    assert!((s / sigma as f64 - 1.0).abs() < 0.15, "noise map std {s}");
}

proptest! {
    #[test]
    fn decomposition_is_bitwise(a in -4000.0f32..4000.0, d in -1.0e4f32..1.0e4) {
        let a = quantize_hu(a);
        let (dn, n) = decompose_pixel(a, d).unwrap();
        prop_assert_eq!(dn + n, a);
        prop_assert_eq!(a - dn, n);
    }
}
