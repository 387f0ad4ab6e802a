//! Paired LR/HR sample groups: simulation, persistence and the noise
//! channels added after denoising.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{hu_to_mu, load_array, load_grid, save_grid_with, Endianness, ImageGrid, MU_WATER_PER_MM};
use crate::phantom::{render_phantom, shrink_phantom, PhantomSpec};
use crate::recon::{fbp, RampFilter, ReconConfig};
use crate::simulator::{degrade_and_count, make_protocol, project, DegradationModel, Protocol, ScanGeometry};

pub const CHANNELS: [&str; 6] = ["clean_hr", "noisy_hr", "lr_a", "lr_b", "denoised_lr", "noise_map"];
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// LR acquisition geometry; the HR protocol derives from it.
    pub geometry: ScanGeometry,
    /// LR reference physics; tube current is set per protocol.
    pub degradation: DegradationModel,
    #[serde(default = "default_shrink")]
    pub shrink_factor: f64,
    #[serde(default = "default_mu_water")]
    pub mu_water: f64,
    #[serde(default)]
    pub filter: RampFilter,
}

fn default_shrink() -> f64 {
    0.5
}
fn default_mu_water() -> f64 {
    MU_WATER_PER_MM
}

impl SimulationConfig {
    pub fn new(geometry: ScanGeometry, degradation: DegradationModel) -> Self {
        Self { geometry, degradation, shrink_factor: default_shrink(), mu_water: default_mu_water(), filter: RampFilter::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSeeds {
    pub render: u64,
    pub lr_a: u64,
    pub lr_b: u64,
    pub hr: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupProvenance {
    pub phantom: String,
    pub seeds: GroupSeeds,
    pub lr_model: DegradationModel,
    pub lr_geometry: ScanGeometry,
    pub hr_model: DegradationModel,
    pub hr_geometry: ScanGeometry,
    pub shrink_factor: f64,
}

#[derive(Clone, Debug)]
pub struct SampleGroup {
    pub id: String,
    pub clean_hr: ImageGrid,
    pub noisy_hr: ImageGrid,
    pub lr_a: ImageGrid,
    pub lr_b: ImageGrid,
    pub denoised_lr: Option<ImageGrid>,
    pub noise_map: Option<ImageGrid>,
    pub provenance: GroupProvenance,
}

impl SampleGroup {
    pub fn channel(&self, name: &str) -> Option<&ImageGrid> {
        match name {
            "clean_hr" => Some(&self.clean_hr),
            "noisy_hr" => Some(&self.noisy_hr),
            "lr_a" => Some(&self.lr_a),
            "lr_b" => Some(&self.lr_b),
            "denoised_lr" => self.denoised_lr.as_ref(),
            "noise_map" => self.noise_map.as_ref(),
            _ => None,
        }
    }

    pub fn check_alignment(&self) -> Result<()> {
        for name in CHANNELS {
            if let Some(g) = self.channel(name) {
                self.clean_hr.ensure_same_geometry(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.validation.is_empty() {
            return Err(Error::invalid("manifest needs non-empty train and validation splits"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in self.all() {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("group `{id}` appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn group_seeds(master: u64, index: usize) -> GroupSeeds {
    let base = mix_seed(master, index as u64 + 1);
    GroupSeeds { render: mix_seed(base, 1), lr_a: mix_seed(base, 2), lr_b: mix_seed(base, 3), hr: mix_seed(base, 4) }
}

pub fn group_id(index: usize, name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{index:03}-{clean}")
}

fn scan(
    mu: &crate::imaging::AttenuationMap,
    model: &DegradationModel,
    geom: &ScanGeometry,
    seed: u64,
    recon: &ReconConfig,
    id: &str,
) -> Result<ImageGrid> {
    let sino = project(mu, geom)?;
    let mut m = model.clone();
    m.rng_seed = seed;
    let img = fbp(&degrade_and_count(&sino, &m)?, recon)?;
    let mut img = snap_to_quantum(&img)?;
    img.set_id(id);
    Ok(img)
}

/// Simulates one group: the phantom is shrunk once, then scanned twice
/// with the LR protocol and once with the HR protocol.
pub fn simulate_group(spec: &PhantomSpec, cfg: &SimulationConfig, id: &str, seeds: GroupSeeds) -> Result<SampleGroup> {
    let rendered = render_phantom(spec, seeds.render)?;
    let mut clean = snap_to_quantum(&shrink_phantom(&rendered, cfg.shrink_factor)?)?;
    clean.set_id("clean_hr");
    let mu = hu_to_mu(&clean, cfg.mu_water)?;
    let mut recon = ReconConfig::new(spec.grid.clone(), cfg.mu_water);
    recon.filter = cfg.filter;
    let (lr_model, lr_geometry) = make_protocol(Protocol::LR, &cfg.degradation, &cfg.geometry);
    let (hr_model, hr_geometry) = make_protocol(Protocol::HR, &cfg.degradation, &cfg.geometry);
    let lr_a = scan(&mu, &lr_model, &lr_geometry, seeds.lr_a, &recon, "lr_a")?;
    let lr_b = scan(&mu, &lr_model, &lr_geometry, seeds.lr_b, &recon, "lr_b")?;
    let noisy_hr = scan(&mu, &hr_model, &hr_geometry, seeds.hr, &recon, "noisy_hr")?;
    let group = SampleGroup {
        id: id.to_string(),
        clean_hr: clean,
        noisy_hr,
        lr_a,
        lr_b,
        denoised_lr: None,
        noise_map: None,
        provenance: GroupProvenance {
            phantom: spec.name.clone(),
            seeds,
            lr_model,
            lr_geometry,
            hr_model,
            hr_geometry,
            shrink_factor: cfg.shrink_factor,
        },
    };
    group.check_alignment()?;
    Ok(group)
}

/// Noise-free reconstruction of `spec` under one protocol: the reference
/// against which reconstructed noise is measured.
pub fn noiseless_scan(spec: &PhantomSpec, cfg: &SimulationConfig, protocol: Protocol, render_seed: u64) -> Result<ImageGrid> {
    let clean = shrink_phantom(&render_phantom(spec, render_seed)?, cfg.shrink_factor)?;
    let mu = hu_to_mu(&clean, cfg.mu_water)?;
    let mut recon = ReconConfig::new(spec.grid.clone(), cfg.mu_water);
    recon.filter = cfg.filter;
    let (mut model, geom) = make_protocol(protocol, &cfg.degradation, &cfg.geometry);
    model.noise = false;
    scan(&mu, &model, &geom, 0, &recon, "noiseless")
}

/// Held-out policy: the last phantom is the test slice (when there are at
/// least three), the one before it validation, the rest training.
pub fn split_ids(ids: &[String], seed: u64) -> Result<SplitManifest> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::invalid(format!("dataset needs at least 2 phantoms (one held out), got {n}")));
    }
    let (train, val, test) = if n == 2 { (&ids[..1], &ids[1..], &ids[2..]) } else { (&ids[..n - 2], &ids[n - 2..n - 1], &ids[n - 1..]) };
    let m = SplitManifest { seed, train: train.to_vec(), validation: val.to_vec(), test: test.to_vec() };
    m.validate()?;
    Ok(m)
}

pub fn build_dataset(specs: &[PhantomSpec], cfg: &SimulationConfig, out_dir: &Path, seed: u64) -> Result<SplitManifest> {
    let ids: Vec<String> = specs.iter().enumerate().map(|(i, s)| group_id(i, &s.name)).collect();
    let manifest = split_ids(&ids, seed)?;
    for (i, (spec, id)) in specs.iter().zip(&ids).enumerate() {
        let group = simulate_group(spec, cfg, id, group_seeds(seed, i))?;
        save_group(&group, out_dir)?;
    }
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

pub fn write_manifest(m: &SplitManifest, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(MANIFEST), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn load_manifest(out_dir: &Path) -> Result<SplitManifest> {
    let path = out_dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingStage { stage: "dataset".into(), detail: format!("{} not found", path.display()) });
    }
    let m: SplitManifest =
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Metadata { path: path.clone(), detail: e.to_string() })?;
    m.validate()?;
    Ok(m)
}

fn channel_path(root: &Path, id: &str, channel: &str) -> PathBuf {
    root.join(id).join(format!("{channel}.raw"))
}

pub fn save_group(group: &SampleGroup, root: &Path) -> Result<()> {
    group.check_alignment()?;
    let prov = serde_json::to_value(&group.provenance)?;
    for name in CHANNELS {
        if let Some(img) = group.channel(name) {
            save_grid_with(img, &channel_path(root, &group.id, name), Endianness::Little, Some(prov.clone()))?;
        }
    }
    Ok(())
}

pub fn load_group(root: &Path, id: &str) -> Result<SampleGroup> {
    let load = |name: &str| -> Result<Option<ImageGrid>> {
        let p = channel_path(root, id, name);
        if p.exists() {
            load_grid(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let need = |name: &str| -> Result<ImageGrid> {
        load(name)?.ok_or_else(|| Error::MissingStage {
            stage: "dataset".into(),
            detail: format!("group `{id}` lacks `{name}` under {}", root.display()),
        })
    };
    let (_, meta) = load_array(&channel_path(root, id, "lr_a")).map_err(|e| match e {
        Error::Io(_) => Error::MissingStage { stage: "dataset".into(), detail: format!("group `{id}` not found under {}", root.display()) },
        other => other,
    })?;
    let provenance: GroupProvenance = serde_json::from_value(meta.provenance.unwrap_or_default()).map_err(|e| Error::Metadata {
        path: channel_path(root, id, "lr_a").with_extension("json"),
        detail: format!("group provenance: {e}"),
    })?;
    let group = SampleGroup {
        id: id.to_string(),
        clean_hr: need("clean_hr")?,
        noisy_hr: need("noisy_hr")?,
        lr_a: need("lr_a")?,
        lr_b: need("lr_b")?,
        denoised_lr: load("denoised_lr")?,
        noise_map: load("noise_map")?,
        provenance,
    };
    group.check_alignment()?;
    Ok(group)
}

/// Loads every group listed in the manifest, in split order.
pub fn load_dataset(root: &Path) -> Result<(SplitManifest, Vec<SampleGroup>)> {
    let m = load_manifest(root)?;
    let groups = m.all().map(|id| load_group(root, id)).collect::<Result<Vec<_>>>()?;
    Ok((m, groups))
}

/// Image-to-image denoising used to split LR images into signal and noise.
pub trait Denoise {
    fn denoise_grid(&self, img: &ImageGrid) -> Result<ImageGrid>;
}

/// Grid on which group images are stored, in HU. Values on this grid with
/// magnitude below 2^13 add and subtract exactly in f32.
pub const HU_QUANTUM: f32 = 1.0 / 1024.0;
const EXACT_LIMIT: f32 = 8192.0;

pub fn quantize_hu(x: f32) -> f32 {
    ((x / HU_QUANTUM).round() * HU_QUANTUM).clamp(-EXACT_LIMIT, EXACT_LIMIT)
}

/// Snaps every pixel to [`HU_QUANTUM`].
pub fn snap_to_quantum(img: &ImageGrid) -> Result<ImageGrid> {
    img.with_values(img.values().mapv(quantize_hu), img.id().to_string())
}

/// Splits `a` into `(d, n)` with `d + n == a` and `a - d == n` exactly in
/// f32, with `d` close to the estimate. Succeeds for every estimate when
/// `a` lies on the HU quantum grid; off-grid inputs only when the plain
/// float difference happens to be exact.
pub fn decompose_pixel(a: f32, d: f32) -> Option<(f32, f32)> {
    let exact = |d: f32, n: f32| d + n == a && a - d == n;
    if a.is_finite() && d.is_finite() {
        let n = a - d;
        let d1 = a - n;
        if exact(d1, n) {
            return Some((d1, n));
        }
    }
    if quantize_hu(a) == a {
        let dq = quantize_hu(if d.is_finite() { d } else { a }).clamp(-EXACT_LIMIT / 2.0, EXACT_LIMIT / 2.0);
        let n = a - dq;
        if exact(dq, n) {
            return Some((dq, n));
        }
    }
    None
}

/// Pixelwise exact split of `img` given a denoised estimate. The image
/// must lie on the HU quantum grid (see [`snap_to_quantum`]).
pub fn decompose(img: &ImageGrid, estimate: &ImageGrid) -> Result<(ImageGrid, ImageGrid)> {
    img.ensure_same_geometry(estimate)?;
    let mut d = estimate.values().clone();
    let mut n = img.values().clone();
    let mut failed = 0usize;
    for ((dv, nv), &a) in d.iter_mut().zip(n.iter_mut()).zip(img.values().iter()) {
        match decompose_pixel(a, *dv) {
            Some((x, y)) => {
                *dv = x;
                *nv = y;
            }
            None => failed += 1,
        }
    }
    if failed > 0 {
        return Err(Error::invalid(format!(
            "{failed} pixels of `{}` cannot be split exactly; snap the image to the {} HU grid first",
            img.id(),
            HU_QUANTUM
        )));
    }
    Ok((img.with_values(d, "denoised_lr")?, img.with_values(n, "noise_map")?))
}

/// Adds `denoised_lr` and `noise_map` (= lr_a - denoised_lr) to a group.
pub fn attach_denoised(group: &SampleGroup, denoiser: &dyn Denoise) -> Result<SampleGroup> {
    let estimate = denoiser.denoise_grid(&group.lr_a)?;
    if !estimate.same_geometry(&group.lr_a) {
        return Err(Error::ShapeMismatch(format!(
            "denoiser output {:?} does not match lr_a {:?} in group `{}`",
            estimate.shape(),
            group.lr_a.shape(),
            group.id
        )));
    }
    let (d, n) = decompose(&group.lr_a, &estimate)?;
    let mut out = group.clone();
    out.denoised_lr = Some(d);
    out.noise_map = Some(n);
    Ok(out)
}
