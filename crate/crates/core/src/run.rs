//! Run configuration and the pipeline stages behind the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{
    attach_denoised, build_dataset, group_id, group_seeds, load_dataset, mix_seed, save_group, SampleGroup, SimulationConfig, SplitManifest,
};
use crate::denoiser::{load_denoiser, train_hr_denoiser, train_lr_denoiser, DenoiserArch, DenoiserTrainConfig};
use crate::diffusion::{self, load_ddpm, ConditioningScheme, DdpmArch, DdpmTrainConfig, SampleOptions, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::{compare_schemes, mtf_csv, mtf_edge, noise_psd, psd_csv, write_report, CompareConfig, Roi};
use crate::imaging::{hu_to_mu, load_grid, save_grid};
use crate::phantom::{render_phantom, shrink_phantom, PhantomSpec};
use crate::recon::RampFilter;
use crate::simulator::{degrade_and_count, make_protocol, project, save_sinogram, DegradationModel, Protocol, ScanGeometry};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUT_ENV: &str = "PCCTSR_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconSection {
    #[serde(default)]
    pub filter: RampFilter,
    pub shrink_factor: f64,
    pub mu_water: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        let s = SimulationConfig::new(ScanGeometry::default(), DegradationModel::default());
        Self { filter: s.filter, shrink_factor: s.shrink_factor, mu_water: s.mu_water }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    #[serde(default)]
    pub arch: DenoiserArch,
    #[serde(default)]
    pub train: DenoiserTrainConfig,
    /// Also train the supervised HR denoiser in `pipeline`.
    #[serde(default)]
    pub train_hr: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub arch: DdpmArch,
    #[serde(default)]
    pub train: DdpmTrainConfig,
    #[serde(default = "all_schemes")]
    pub schemes: Vec<ConditioningScheme>,
    #[serde(default)]
    pub sampler: SampleOptions,
}

fn all_schemes() -> Vec<ConditioningScheme> {
    ConditioningScheme::ALL.to_vec()
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            arch: DdpmArch::default(),
            train: DdpmTrainConfig::default(),
            schemes: all_schemes(),
            sampler: SampleOptions::default(),
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig { steps: self.steps, beta_start: self.beta_start, beta_end: self.beta_end }
    }
}

/// Everything one run needs. Stage seeds inside the sections are derived
/// from `seed` when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_root")]
    pub output_root: PathBuf,
    pub phantoms: Vec<PhantomSpec>,
    pub geometry: ScanGeometry,
    pub degradation: DegradationModel,
    #[serde(default)]
    pub recon: ReconSection,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    pub eval: CompareConfig,
}

fn default_root() -> PathBuf {
    PathBuf::from("out")
}

/// Sets `a.b.c` in a JSON tree, creating objects on the way. Numeric
/// segments index arrays. The value is parsed as JSON, else kept as a string.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| Error::Config(format!("override `{key}`: `{part}` is not an array index")))?;
                let len = items.len();
                let slot =
                    items.get_mut(idx).ok_or_else(|| Error::Config(format!("override `{key}`: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override `{key}`: `{part}` is below a scalar"))),
        };
    }
    Ok(())
}

fn remove_path(root: &mut Value, path: &[String]) -> bool {
    let Some((last, head)) = path.split_last() else {
        return false;
    };
    let mut cur = root;
    for p in head {
        cur = match cur {
            Value::Object(m) => match m.get_mut(p) {
                Some(v) => v,
                None => return false,
            },
            Value::Array(a) => match p.parse::<usize>().ok().and_then(|i| a.get_mut(i)) {
                Some(v) => v,
                None => return false,
            },
            _ => return false,
        };
    }
    match cur {
        Value::Object(m) => m.remove(last).is_some(),
        _ => false,
    }
}

/// Deserializes a config tree, reporting every unknown key by its dotted
/// path rather than only the first.
pub fn config_from_value(mut value: Value) -> Result<RunConfig> {
    let mut unknown = Vec::new();
    loop {
        let de = value.clone();
        match serde_path_to_error::deserialize::<_, RunConfig>(de) {
            Ok(cfg) if unknown.is_empty() => return Ok(cfg),
            Ok(_) => return Err(Error::Config(format!("unknown keys: {}", unknown.join(", ")))),
            Err(e) => {
                let msg = e.inner().to_string();
                let path = e.path().to_string();
                if let Some(field) = msg.strip_prefix("unknown field `").and_then(|s| s.split('`').next()) {
                    let mut segs: Vec<String> = e
                        .path()
                        .iter()
                        .filter_map(|seg| match seg {
                            serde_path_to_error::Segment::Seq { index } => Some(index.to_string()),
                            serde_path_to_error::Segment::Map { key } => Some(key.clone()),
                            _ => None,
                        })
                        .collect();
                    if segs.last().map(String::as_str) != Some(field) {
                        segs.push(field.to_string());
                    }
                    if remove_path(&mut value, &segs) {
                        unknown.push(segs.join("."));
                        continue;
                    }
                }
                let mut all = unknown;
                all.push(format!("{path}: {msg}"));
                return Err(Error::Config(all.join("; ")));
            }
        }
    }
}

impl RunConfig {
    /// Reads a JSON config, applies `key=value` overrides and derives seeds.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, overrides)
    }

    pub fn from_value(mut value: Value, overrides: &[(String, String)]) -> Result<Self> {
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        let mut cfg = config_from_value(value)?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn derive_seeds(&mut self) {
        self.degradation.rng_seed = mix_seed(self.seed, 0x51);
        self.denoiser.arch.seed = mix_seed(self.seed, 0xD1);
        self.denoiser.train.seed = mix_seed(self.seed, 0xD2);
        self.diffusion.arch.seed = mix_seed(self.seed, 0xE1);
        self.diffusion.train.seed = mix_seed(self.seed, 0xE2);
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantoms.is_empty() {
            return Err(Error::Config("phantoms: at least one phantom is required".into()));
        }
        self.geometry.validate()?;
        self.denoiser.arch.validate()?;
        self.denoiser.train.validate()?;
        self.diffusion.schedule().build()?;
        self.diffusion.train.validate()?;
        if self.diffusion.schemes.is_empty() {
            return Err(Error::Config("diffusion.schemes: empty".into()));
        }
        if let Some(k) = self.diffusion.sampler.steps_override {
            self.diffusion.schedule().build()?.respaced(k)?;
        }
        Ok(())
    }

    pub fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            geometry: self.geometry.clone(),
            degradation: self.degradation.clone(),
            shrink_factor: self.recon.shrink_factor,
            mu_water: self.recon.mu_water,
            filter: self.recon.filter,
        }
    }
}

/// Output root precedence: explicit flag, then the environment, then the
/// config file.
pub fn output_root(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_root.clone(),
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    stage: &'a str,
    config: &'a RunConfig,
}

/// Writes `<dir>/run.json` with the resolved config and tool version.
pub fn write_run_record(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rec = RunRecord { tool: "pcctsr", version: VERSION, stage, config: cfg };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn phantoms(&self) -> PathBuf {
        self.root.join("phantoms")
    }
    pub fn sinograms(&self) -> PathBuf {
        self.root.join("sinograms")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn denoiser(&self, target: DenoiserTarget) -> PathBuf {
        self.root.join("denoiser").join(target.name())
    }
    pub fn ddpm(&self, scheme: ConditioningScheme) -> PathBuf {
        self.root.join("ddpm").join(scheme.name())
    }
    pub fn samples(&self, scheme: ConditioningScheme) -> PathBuf {
        self.root.join("samples").join(scheme.name())
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserTarget {
    Lr,
    Hr,
}

impl DenoiserTarget {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lr => "lr",
            Self::Hr => "hr",
        }
    }
}

pub fn stage_phantom(cfg: &RunConfig, out: &Layout) -> Result<Vec<PathBuf>> {
    let dir = out.phantoms();
    let mut written = Vec::new();
    for (i, spec) in cfg.phantoms.iter().enumerate() {
        let img = render_phantom(spec, group_seeds(cfg.seed, i).render)?;
        let path = dir.join(format!("{}.raw", group_id(i, &spec.name)));
        save_grid(&img, &path)?;
        written.push(path);
    }
    write_run_record(&dir, "phantom", cfg)?;
    Ok(written)
}

/// Writes the LR (two noise instances) and HR sinograms of every phantom.
pub fn stage_simulate(cfg: &RunConfig, out: &Layout) -> Result<Vec<PathBuf>> {
    let sim = cfg.simulation();
    let dir = out.sinograms();
    let mut written = Vec::new();
    for (i, spec) in cfg.phantoms.iter().enumerate() {
        let seeds = group_seeds(cfg.seed, i);
        let clean = shrink_phantom(&render_phantom(spec, seeds.render)?, sim.shrink_factor)?;
        let mu = hu_to_mu(&clean, sim.mu_water)?;
        let gid = group_id(i, &spec.name);
        for (name, protocol, seed) in
            [("lr_a", Protocol::LR, seeds.lr_a), ("lr_b", Protocol::LR, seeds.lr_b), ("hr", Protocol::HR, seeds.hr)]
        {
            let (mut model, geom) = make_protocol(protocol, &sim.degradation, &sim.geometry);
            model.rng_seed = seed;
            let sino = degrade_and_count(&project(&mu, &geom)?, &model)?;
            let path = dir.join(&gid).join(format!("{name}.raw"));
            save_sinogram(&sino, &path, Some(&model))?;
            written.push(path);
        }
    }
    write_run_record(&dir, "simulate", cfg)?;
    Ok(written)
}

pub fn stage_dataset(cfg: &RunConfig, out: &Layout) -> Result<SplitManifest> {
    let dir = out.dataset();
    let m = build_dataset(&cfg.phantoms, &cfg.simulation(), &dir, cfg.seed)?;
    write_run_record(&dir, "dataset", cfg)?;
    Ok(m)
}

fn split_groups(groups: &[SampleGroup], ids: &[String]) -> Vec<SampleGroup> {
    groups.iter().filter(|g| ids.contains(&g.id)).cloned().collect()
}

/// Held-out groups used for sampling and evaluation: the test split, or the
/// validation split when there is no test slice.
fn held_out(m: &SplitManifest) -> &[String] {
    if m.test.is_empty() {
        &m.validation
    } else {
        &m.test
    }
}

pub fn stage_denoise_train(cfg: &RunConfig, out: &Layout, target: DenoiserTarget) -> Result<Vec<f64>> {
    let (m, groups) = load_dataset(&out.dataset())?;
    let train = split_groups(&groups, &m.train);
    let d = &cfg.denoiser;
    let trained = match target {
        DenoiserTarget::Lr => train_lr_denoiser(&train, &d.arch, &d.train)?,
        DenoiserTarget::Hr => train_hr_denoiser(&train, &d.arch, &d.train)?,
    };
    let dir = out.denoiser(target);
    trained.save(&dir)?;
    write_run_record(&dir, "denoise-train", cfg)?;
    Ok(trained.loss_history)
}

/// Adds `denoised_lr` and `noise_map` to every group with the LR denoiser.
pub fn stage_denoise_apply(cfg: &RunConfig, out: &Layout) -> Result<usize> {
    let (_, groups) = load_dataset(&out.dataset())?;
    let net = load_denoiser(&out.denoiser(DenoiserTarget::Lr))?;
    for g in &groups {
        save_group(&attach_denoised(g, &net)?, &out.dataset())?;
    }
    write_run_record(&out.root.join("denoiser"), "denoise-apply", cfg)?;
    Ok(groups.len())
}

pub fn stage_ddpm_train(cfg: &RunConfig, out: &Layout, schemes: &[ConditioningScheme]) -> Result<BTreeMap<String, Vec<f64>>> {
    let (m, groups) = load_dataset(&out.dataset())?;
    let train = split_groups(&groups, &m.train);
    for &scheme in schemes {
        for g in &train {
            scheme.inputs(g)?;
        }
    }
    let d = &cfg.diffusion;
    let mut histories = BTreeMap::new();
    for (k, &scheme) in schemes.iter().enumerate() {
        let mut tc = d.train.clone();
        tc.seed = mix_seed(tc.seed, k as u64);
        let trained = diffusion::train(&train, scheme, &d.arch, &d.schedule(), &tc)?;
        let dir = out.ddpm(scheme);
        trained.save(&dir)?;
        write_run_record(&dir, "ddpm-train", cfg)?;
        histories.insert(scheme.name().to_string(), trained.loss_history);
    }
    Ok(histories)
}

/// Samples every held-out group (or only `group`) for each scheme.
pub fn stage_ddpm_sample(
    cfg: &RunConfig,
    out: &Layout,
    schemes: &[ConditioningScheme],
    steps_override: Option<usize>,
    seed: Option<u64>,
    group: Option<&str>,
) -> Result<Vec<PathBuf>> {
    let (m, groups) = load_dataset(&out.dataset())?;
    let ids: Vec<String> = match group {
        Some(g) => {
            if !m.all().any(|i| i == g) {
                return Err(Error::invalid(format!("group `{g}` not in the dataset")));
            }
            vec![g.to_string()]
        }
        None => held_out(&m).to_vec(),
    };
    let targets = split_groups(&groups, &ids);
    let opts = SampleOptions { steps_override: steps_override.or(cfg.diffusion.sampler.steps_override), ..cfg.diffusion.sampler.clone() };
    let base_seed = seed.unwrap_or_else(|| mix_seed(cfg.seed, 0x5A));
    let mut written = Vec::new();
    for &scheme in schemes {
        let (net, sched_cfg) = load_ddpm(&out.ddpm(scheme))?;
        if net.scheme != scheme {
            return Err(Error::Config(format!("checkpoint in {} is for scheme {}, not {scheme}", out.ddpm(scheme).display(), net.scheme)));
        }
        let sched = sched_cfg.build()?;
        let dir = out.samples(scheme);
        for (i, g) in targets.iter().enumerate() {
            let inputs = scheme.inputs(g)?;
            let img = diffusion::sample(&net, scheme, &inputs, &sched, mix_seed(base_seed, i as u64), &opts)?;
            let path = dir.join(format!("{}.raw", g.id));
            save_grid(&img, &path)?;
            written.push(path);
        }
        write_run_record(&dir, "ddpm-sample", cfg)?;
    }
    Ok(written)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Edge MTF of one image; writes `<eval>/mtf/<stem>.{csv,json}`.
pub fn stage_eval_mtf(cfg: &RunConfig, out: &Layout, image: &Path) -> Result<PathBuf> {
    let edge = cfg.eval.edge.as_ref().ok_or_else(|| Error::Config("eval.edge: required for eval-mtf".into()))?;
    let img = load_grid(image)?;
    let curve = mtf_edge(&img, edge, cfg.eval.oversample)?;
    let dir = out.eval().join("mtf");
    fs::create_dir_all(&dir)?;
    let name = stem(image);
    fs::write(dir.join(format!("{name}.csv")), mtf_csv(&[(name.clone(), curve.clone())]))?;
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&curve)? + "\n")?;
    write_run_record(&dir, "eval-mtf", cfg)?;
    Ok(dir.join(format!("{name}.json")))
}

/// Noise PSD of one region; writes `<eval>/psd/<stem>.{csv,json}`.
pub fn stage_eval_psd(cfg: &RunConfig, out: &Layout, image: &Path, roi: Option<Roi>) -> Result<PathBuf> {
    let img = load_grid(image)?;
    let roi = roi.unwrap_or(cfg.eval.uniform_roi);
    let patch = roi.patch(&img)?;
    let psd = noise_psd(&patch, img.spacing().1, cfg.eval.detrend_order, cfg.eval.taper)?;
    let dir = out.eval().join("psd");
    fs::create_dir_all(&dir)?;
    let name = stem(image);
    fs::write(dir.join(format!("{name}.csv")), psd_csv(&[(name.clone(), psd.clone())]))?;
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&psd)? + "\n")?;
    write_run_record(&dir, "eval-psd", cfg)?;
    Ok(dir.join(format!("{name}.json")))
}

/// Compares the samples of every scheme with the LR input on each held-out
/// group; one report directory per group.
pub fn stage_eval_compare(cfg: &RunConfig, out: &Layout) -> Result<Vec<PathBuf>> {
    let (m, groups) = load_dataset(&out.dataset())?;
    let targets = split_groups(&groups, held_out(&m));
    let mut ecfg = cfg.eval.clone();
    if ecfg.expected_schemes.is_empty() {
        ecfg.expected_schemes = cfg.diffusion.schemes.iter().map(|s| s.name().to_string()).collect();
    }
    let mut written = Vec::new();
    for g in &targets {
        let mut outputs = BTreeMap::new();
        for &scheme in &cfg.diffusion.schemes {
            let p = out.samples(scheme).join(format!("{}.raw", g.id));
            if p.exists() {
                outputs.insert(scheme.name().to_string(), load_grid(&p)?);
            }
        }
        if outputs.is_empty() {
            return Err(Error::MissingStage {
                stage: "ddpm-sample".into(),
                detail: format!("no samples for group `{}` under {}", g.id, out.root.join("samples").display()),
            });
        }
        let report = compare_schemes(&outputs, &g.lr_a, &g.clean_hr, &ecfg)?;
        let dir = out.eval().join("compare").join(&g.id);
        write_report(&report, &dir)?;
        written.push(dir);
    }
    write_run_record(&out.eval().join("compare"), "eval-compare", cfg)?;
    Ok(written)
}

/// Every stage in dependency order.
pub fn run_pipeline(cfg: &RunConfig, out: &Layout) -> Result<()> {
    fs::create_dir_all(&out.root)?;
    write_run_record(&out.root, "pipeline", cfg)?;
    stage_phantom(cfg, out)?;
    stage_simulate(cfg, out)?;
    stage_dataset(cfg, out)?;
    stage_denoise_train(cfg, out, DenoiserTarget::Lr)?;
    if cfg.denoiser.train_hr {
        stage_denoise_train(cfg, out, DenoiserTarget::Hr)?;
    }
    stage_denoise_apply(cfg, out)?;
    stage_ddpm_train(cfg, out, &cfg.diffusion.schemes)?;
    stage_ddpm_sample(cfg, out, &cfg.diffusion.schemes, None, None, None)?;
    stage_eval_compare(cfg, out)?;
    Ok(())
}
