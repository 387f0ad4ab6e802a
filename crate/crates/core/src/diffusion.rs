//! Conditional denoising diffusion: variance schedule, epsilon-prediction
//! training under three conditioning schemes, and ancestral sampling.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use pcct_nn::{clip_grad_norm, Adam, AdamConfig, AdamState, Graph, ParamRecord, ParamStore, Real, Tensor, UNet, UNetConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleGroup;
use crate::denoiser::{loss_csv, scheduled_lr};
use crate::error::{Error, Result};
use crate::imaging::{ImageGrid, UNIT_CENTER_HU, UNIT_HALF_RANGE_HU};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 2000, beta_start: 1e-6, beta_end: 1e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// `alpha[t-1]` and `gamma[t]` for `t = 1..=T`; `gamma[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.steps()).contains(&t), "t={t} outside 1..={}", self.steps());
        self.alpha[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    /// Keeps `k` of the `T` levels, evenly spaced and always including `T`.
    /// Per-step factors are recomputed as ratios of the kept levels.
    pub fn respaced(&self, k: usize) -> Result<DiffusionSchedule> {
        let t = self.steps();
        if k == 0 || k > t {
            return Err(Error::Config(format!("steps_override {k} must lie in 1..={t}")));
        }
        if k == t {
            return Ok(self.clone());
        }
        let mut gamma = vec![1.0];
        let mut alpha = Vec::with_capacity(k);
        for i in 1..=k {
            let src = (i * t).div_ceil(k);
            let g = self.gamma[src];
            alpha.push(g / gamma[i - 1]);
            gamma.push(g);
        }
        Ok(DiffusionSchedule { alpha, gamma })
    }
}

/// Linear `beta` from `beta_start` to `beta_end`, `alpha = 1 - beta`,
/// `gamma` the running product.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion T must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")));
    }
    let mut alpha = Vec::with_capacity(steps);
    let mut gamma = Vec::with_capacity(steps + 1);
    gamma.push(1.0);
    for i in 0..steps {
        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        let a = 1.0 - (beta_start + (beta_end - beta_start) * frac);
        alpha.push(a);
        gamma.push(gamma[i] * a);
    }
    Ok(DiffusionSchedule { alpha, gamma })
}

/// `t` uniform on `1..=T`, then `gamma` uniform between the adjacent levels.
pub fn sample_gamma<R: Rng + ?Sized>(sched: &DiffusionSchedule, rng: &mut R) -> (f64, usize) {
    let t = rng.random_range(1..=sched.steps());
    let (lo, hi) = (sched.gamma[t], sched.gamma[t - 1]);
    loop {
        let u: f64 = rng.random();
        let g = lo + (hi - lo) * u;
        if g > lo && g < hi {
            return (g, t);
        }
    }
}

/// CDF of the law drawn by [`sample_gamma`].
pub fn gamma_cdf(sched: &DiffusionSchedule, g: f64) -> f64 {
    let t = sched.steps();
    let mut acc = 0.0;
    for s in 1..=t {
        let (lo, hi) = (sched.gamma[s], sched.gamma[s - 1]);
        acc += ((g - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
    acc / t as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningScheme {
    Plain,
    NoiseSplit,
    DenoiseOnly,
}

impl ConditioningScheme {
    pub const ALL: [ConditioningScheme; 3] = [Self::Plain, Self::NoiseSplit, Self::DenoiseOnly];

    pub fn channels(self) -> usize {
        self.channel_names().len()
    }

    pub fn channel_names(self) -> &'static [&'static str] {
        match self {
            Self::Plain => &["lr_a"],
            Self::NoiseSplit => &["denoised_lr", "noise_map"],
            Self::DenoiseOnly => &["denoised_lr"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::NoiseSplit => "noise_split",
            Self::DenoiseOnly => "denoise_only",
        }
    }

    /// The group channels this scheme conditions on, in stacking order.
    pub fn inputs(self, group: &SampleGroup) -> Result<Vec<&ImageGrid>> {
        let mut out = Vec::new();
        for name in self.channel_names() {
            let img = match *name {
                "lr_a" => Some(&group.lr_a),
                "denoised_lr" => group.denoised_lr.as_ref(),
                _ => group.noise_map.as_ref(),
            };
            match img {
                Some(i) => out.push(i),
                None => {
                    return Err(Error::MissingStage {
                        stage: "denoise-apply".into(),
                        detail: format!("scheme {} needs `{name}` but group `{}` has none; run denoise-apply first", self.name(), group.id),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Stacks conditioning images into a `[1, c, h, w]` tensor in network
    /// units. Noise maps are differences, so they are scaled but not shifted.
    pub fn encode(self, images: &[&ImageGrid]) -> Result<Tensor<f64>> {
        if images.len() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "scheme {} takes {} conditional channels, got {}",
                self.name(),
                self.channels(),
                images.len()
            )));
        }
        let (h, w) = images[0].shape();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for (img, name) in images.iter().zip(self.channel_names()) {
            images[0].ensure_same_geometry(img)?;
            let shift = if *name == "noise_map" { 0.0 } else { UNIT_CENTER_HU as f64 };
            data.extend(img.values().iter().map(|&v| (v as f64 - shift) / UNIT_HALF_RANGE_HU as f64));
        }
        Ok(Tensor::from_vec(&[1, images.len(), h, w], data))
    }
}

impl fmt::Display for ConditioningScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditioningScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}` (plain, noise_split, denoise_only)")))
    }
}

fn encode_target(img: &ImageGrid) -> Tensor<f64> {
    let (h, w) = img.shape();
    let data = img.values().iter().map(|&v| (v as f64 - UNIT_CENTER_HU as f64) / UNIT_HALF_RANGE_HU as f64).collect();
    Tensor::from_vec(&[1, 1, h, w], data)
}

/// Anything that predicts the forward noise from `(x, y_t, gamma)`.
pub trait EpsilonPredictor {
    fn cond_channels(&self) -> usize;
    /// `cond` is `[n, c, h, w]`, `y_t` is `[n, 1, h, w]`, one gamma per item.
    fn predict_eps(&self, cond: &Tensor<f64>, y_t: &Tensor<f64>, gamma: &[f64]) -> Result<Tensor<f64>>;
}

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPredictor {
    pub channels: usize,
}

impl EpsilonPredictor for ZeroPredictor {
    fn cond_channels(&self) -> usize {
        self.channels
    }
    fn predict_eps(&self, _cond: &Tensor<f64>, y_t: &Tensor<f64>, _gamma: &[f64]) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(y_t.shape()))
    }
}

/// Knows the clean target and inverts the forward marginal exactly.
#[derive(Clone, Debug)]
pub struct OraclePredictor {
    pub channels: usize,
    /// `[1, 1, h, w]` or one target per batch item.
    pub y0: Tensor<f64>,
}

impl EpsilonPredictor for OraclePredictor {
    fn cond_channels(&self) -> usize {
        self.channels
    }
    fn predict_eps(&self, _cond: &Tensor<f64>, y_t: &Tensor<f64>, gamma: &[f64]) -> Result<Tensor<f64>> {
        let (n, _, h, w) = y_t.dims4();
        let plane = h * w;
        if self.y0.len() != plane && self.y0.len() != n * plane {
            return Err(Error::ShapeMismatch("oracle target does not match y_t".into()));
        }
        let y0 = self.y0.data();
        let mut out = y_t.clone();
        for (b, &g) in gamma.iter().enumerate() {
            let base = if y0.len() == plane { 0 } else { b * plane };
            let (sg, sn) = (g.sqrt(), (1.0 - g).sqrt());
            for i in 0..plane {
                let v = &mut out.data_mut()[b * plane + i];
                *v = (*v - sg * y0[base + i]) / sn;
            }
        }
        Ok(out)
    }
}

/// One minibatch of the epsilon-prediction objective.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    /// Conditional stack `[n, c, h, w]`.
    pub x: Tensor<f64>,
    /// Clean targets `[n, 1, h, w]`.
    pub y0: Tensor<f64>,
    /// Standard-normal field, same shape as `y0`.
    pub eps: Tensor<f64>,
    pub gamma: Vec<f64>,
}

impl TrainingBatch {
    /// Draws fresh noise and noise levels for given conditionals and targets.
    pub fn draw<R: Rng + ?Sized>(x: Tensor<f64>, y0: Tensor<f64>, sched: &DiffusionSchedule, rng: &mut R) -> Self {
        let n = y0.shape()[0];
        let gamma = (0..n).map(|_| sample_gamma(sched, rng).0).collect();
        let eps = Tensor::from_vec(y0.shape(), (0..y0.len()).map(|_| rng.sample(StandardNormal)).collect());
        Self { x, y0, eps, gamma }
    }

    /// `sqrt(gamma) * y0 + sqrt(1 - gamma) * eps`.
    pub fn noisy(&self) -> Tensor<f64> {
        forward_noise(&self.y0, &self.eps, &self.gamma)
    }

    fn check(&self) -> Result<()> {
        let (n, _, h, w) = self.x.dims4();
        if self.y0.shape() != [n, 1, h, w] || self.eps.shape() != self.y0.shape() || self.gamma.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "batch x {:?}, y0 {:?}, eps {:?}, {} gammas",
                self.x.shape(),
                self.y0.shape(),
                self.eps.shape(),
                self.gamma.len()
            )));
        }
        Ok(())
    }
}

pub fn forward_noise(y0: &Tensor<f64>, eps: &Tensor<f64>, gamma: &[f64]) -> Tensor<f64> {
    let plane = y0.len() / gamma.len();
    let mut out = y0.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = gamma[i / plane];
        *v = g.sqrt() * *v + (1.0 - g).sqrt() * eps.data()[i];
    }
    out
}

/// Mean absolute error between predicted and true noise.
pub fn training_loss(net: &dyn EpsilonPredictor, batch: &TrainingBatch) -> Result<f64> {
    batch.check()?;
    if batch.x.shape()[1] != net.cond_channels() {
        return Err(Error::ShapeMismatch(format!(
            "predictor takes {} conditional channels, batch has {}",
            net.cond_channels(),
            batch.x.shape()[1]
        )));
    }
    let pred = net.predict_eps(&batch.x, &batch.noisy(), &batch.gamma)?;
    let sum: f64 = pred.data().iter().zip(batch.eps.data()).map(|(p, e)| (p - e).abs()).sum();
    let l = sum / pred.len() as f64;
    if !l.is_finite() {
        return Err(Error::Numerical(format!("diffusion loss is {l}")));
    }
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmArch {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    #[serde(default = "yes")]
    pub attention: bool,
    pub embed_dim: usize,
    /// Gamma is multiplied by this before the sinusoidal embedding.
    pub embed_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for DdpmArch {
    fn default() -> Self {
        Self { base_width: 32, channel_mults: vec![1, 2, 2, 2], attention: true, embed_dim: 64, embed_scale: 1000.0, seed: 0 }
    }
}

impl DdpmArch {
    pub fn unet_config(&self, scheme: ConditioningScheme) -> UNetConfig {
        UNetConfig {
            in_channels: scheme.channels() + 1,
            out_channels: 1,
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            attention: self.attention,
            embed_dim: Some(self.embed_dim),
            embed_scale: self.embed_scale,
            zero_init_output: true,
            seed: self.seed,
        }
    }
}

/// The conditional noise predictor: conditionals and `y_t` are concatenated
/// along channels, gamma enters through the embedding.
#[derive(Clone, Debug)]
pub struct EpsilonNet {
    pub arch: DdpmArch,
    pub scheme: ConditioningScheme,
    unet: UNet,
    params: ParamStore<f32>,
}

impl EpsilonNet {
    pub fn new(arch: DdpmArch, scheme: ConditioningScheme) -> Result<Self> {
        let cfg = arch.unet_config(scheme);
        cfg.validate().map_err(Error::Config)?;
        let mut params = ParamStore::new();
        let unet = UNet::new(cfg, &mut params);
        Ok(Self { arch, scheme, unet, params })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn factor(&self) -> usize {
        self.unet.config.downsample_factor()
    }
}

/// Builds the L1 objective on a graph; generic so gradients can be checked
/// in double precision.
pub fn loss_graph<T: Real>(unet: &UNet, ps: &ParamStore<T>, g: &Graph<T>, batch: &TrainingBatch) -> Result<Var> {
    batch.check()?;
    let input = concat_channels(&batch.x, &batch.noisy())?;
    let xv = g.input(input.cast::<T>());
    let pred = unet.forward(g, ps, xv, Some(&batch.gamma));
    Ok(g.l1_loss(pred, batch.eps.cast::<T>()))
}

fn concat_channels(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::ShapeMismatch(format!("cannot stack {:?} with {:?}", a.shape(), b.shape())));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Ok(Tensor::from_vec(&[n, ca + cb, h, w], data))
}

impl EpsilonPredictor for EpsilonNet {
    fn cond_channels(&self) -> usize {
        self.scheme.channels()
    }

    fn predict_eps(&self, cond: &Tensor<f64>, y_t: &Tensor<f64>, gamma: &[f64]) -> Result<Tensor<f64>> {
        let (_, _, h, w) = y_t.dims4();
        if cond.shape()[1] != self.cond_channels() {
            return Err(Error::ShapeMismatch(format!(
                "scheme {} takes {} conditional channels, got {}",
                self.scheme,
                self.cond_channels(),
                cond.shape()[1]
            )));
        }
        let f = self.factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::ShapeMismatch(format!("{h}x{w} input not divisible by {f}")));
        }
        let input = concat_channels(cond, y_t)?;
        let out = self.unet.predict(&self.params, input.cast::<f32>(), Some(gamma));
        Ok(out.cast::<f64>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub cosine_decay: bool,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        Self { iterations: 500_000, batch_size: 4, lr: 1e-4, patch_size: 128, seed: 0, grad_clip: None, cosine_decay: false }
    }
}

impl DdpmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.patch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("diffusion iterations, batch size, patch size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedDdpm {
    pub net: EpsilonNet,
    pub schedule: ScheduleConfig,
    pub loss_history: Vec<f64>,
    pub adam: AdamState,
    pub config: DdpmTrainConfig,
}

/// Fits an epsilon predictor on random aligned patches of
/// (scheme conditionals, clean HR).
pub fn train(
    groups: &[SampleGroup],
    scheme: ConditioningScheme,
    arch: &DdpmArch,
    schedule: &ScheduleConfig,
    cfg: &DdpmTrainConfig,
) -> Result<TrainedDdpm> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::invalid("no groups to train the diffusion model on"));
    }
    let sched = schedule.build()?;
    let data: Vec<(Tensor<f64>, Tensor<f64>)> = groups
        .iter()
        .map(|g| {
            let inputs = scheme.inputs(g)?;
            inputs[0].ensure_same_geometry(&g.clean_hr)?;
            Ok((scheme.encode(&inputs)?, encode_target(&g.clean_hr)))
        })
        .collect::<Result<_>>()?;
    let mut net = EpsilonNet::new(arch.clone(), scheme)?;
    let (p, f) = (cfg.patch_size, net.factor());
    if p % f != 0 {
        return Err(Error::Config(format!("patch size {p} must be divisible by {f}")));
    }
    for (g, (x, _)) in groups.iter().zip(&data) {
        let (_, _, h, w) = x.dims4();
        if h < p || w < p {
            return Err(Error::invalid(format!("group `{}` {h}x{w} smaller than patch {p}", g.id)));
        }
    }
    let c = scheme.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &net.params);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let n = cfg.batch_size;
        let mut xs = Vec::with_capacity(n * c * p * p);
        let mut ys = Vec::with_capacity(n * p * p);
        for _ in 0..n {
            let (x, y) = &data[rng.random_range(0..data.len())];
            let (_, _, h, w) = x.dims4();
            let r0 = rng.random_range(0..=h - p);
            let c0 = rng.random_range(0..=w - p);
            for ch in 0..c {
                crop_into(&mut xs, &x.data()[ch * h * w..(ch + 1) * h * w], w, r0, c0, p);
            }
            crop_into(&mut ys, y.data(), w, r0, c0, p);
        }
        let batch = TrainingBatch::draw(Tensor::from_vec(&[n, c, p, p], xs), Tensor::from_vec(&[n, 1, p, p], ys), &sched, &mut rng);
        let g = Graph::new();
        let loss = loss_graph(&net.unet, &net.params, &g, &batch)?;
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("diffusion loss became {lv} at iteration {it}")));
        }
        let mut grads = g.backward(loss);
        if let Some(maxn) = cfg.grad_clip {
            clip_grad_norm(&mut grads, maxn);
        }
        adam.config.lr = scheduled_lr(cfg.lr, it, cfg.iterations, cfg.cosine_decay);
        adam.step(&mut net.params, &grads);
        history.push(lv);
    }
    Ok(TrainedDdpm { net, schedule: schedule.clone(), loss_history: history, adam: adam.state(), config: cfg.clone() })
}

fn crop_into(out: &mut Vec<f64>, plane: &[f64], w: usize, r0: usize, c0: usize, p: usize) {
    for r in r0..r0 + p {
        out.extend_from_slice(&plane[r * w + c0..r * w + c0 + p]);
    }
}

/// Sampler settings. `clip_x0` clamps the implied clean estimate
/// `(y_t - sqrt(1-gamma) eps) / sqrt(gamma)` to `[-c, c]` network units before
/// forming the step mean; `None` runs the plain update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    #[serde(default)]
    pub steps_override: Option<usize>,
    #[serde(default)]
    pub clip_x0: Option<f64>,
}

/// Runs the reverse chain from `y_t` at level `T` down to 0. `step_noise`
/// supplies the fresh Gaussian field for each `t > 1`.
pub fn reverse_process(
    net: &dyn EpsilonPredictor,
    cond: &Tensor<f64>,
    mut y: Tensor<f64>,
    sched: &DiffusionSchedule,
    clip_x0: Option<f64>,
    mut step_noise: impl FnMut(usize, &[usize]) -> Tensor<f64>,
) -> Result<Tensor<f64>> {
    let n = y.shape()[0];
    for t in (1..=sched.steps()).rev() {
        let (a, g, g_prev) = (sched.alpha(t), sched.gamma(t), sched.gamma(t - 1));
        let eps = net.predict_eps(cond, &y, &vec![g; n])?;
        if eps.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!("predictor returned {:?} for {:?}", eps.shape(), y.shape())));
        }
        let z = (t > 1).then(|| step_noise(t, y.shape()));
        let sigma = (1.0 - a).sqrt();
        let k = (1.0 - a) / (1.0 - g).sqrt();
        let inv = 1.0 / a.sqrt();
        // posterior-mean weights on the clean estimate and on y_t
        let c0 = g_prev.sqrt() * (1.0 - a) / (1.0 - g);
        let c1 = a.sqrt() * (1.0 - g_prev) / (1.0 - g);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let e = eps.data()[i];
            *v = match clip_x0 {
                None => inv * (*v - k * e),
                Some(c) => {
                    let x0 = ((*v - (1.0 - g).sqrt() * e) / g.sqrt()).clamp(-c, c);
                    c0 * x0 + c1 * *v
                }
            };
            if let Some(z) = &z {
                *v += sigma * z.data()[i];
            }
        }
        if y.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at step {t}")));
        }
    }
    Ok(y)
}

fn normal_field(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Draws one sample in network units from a `[1, c, h, w]` conditional.
pub fn sample_tensor(
    net: &dyn EpsilonPredictor,
    cond: &Tensor<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
    opts: &SampleOptions,
) -> Result<Tensor<f64>> {
    let (n, c, h, w) = cond.dims4();
    if c != net.cond_channels() {
        return Err(Error::ShapeMismatch(format!("net takes {} conditional channels, got {c}", net.cond_channels())));
    }
    let sched = match opts.steps_override {
        Some(k) => sched.respaced(k)?,
        None => sched.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_t = normal_field(&mut rng, &[n, 1, h, w]);
    reverse_process(net, cond, y_t, &sched, opts.clip_x0, |_, shape| normal_field(&mut rng, shape))
}

/// Samples an HR image for the given conditionals and maps it back to HU on
/// the conditionals' grid.
pub fn sample(
    net: &dyn EpsilonPredictor,
    scheme: ConditioningScheme,
    conditional: &[&ImageGrid],
    sched: &DiffusionSchedule,
    seed: u64,
    opts: &SampleOptions,
) -> Result<ImageGrid> {
    let cond = scheme.encode(conditional)?;
    let y = sample_tensor(net, &cond, sched, seed, opts)?;
    let (h, w) = conditional[0].shape();
    let vals = ndarray::Array2::from_shape_vec(
        (h, w),
        y.data().iter().map(|&v| (v * UNIT_HALF_RANGE_HU as f64 + UNIT_CENTER_HU as f64) as f32).collect(),
    )
    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    conditional[0].with_values(vals, format!("{}-sr-{}", conditional[0].id(), scheme.name()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmCheckpoint {
    pub arch: DdpmArch,
    pub scheme: ConditioningScheme,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: Option<DdpmTrainConfig>,
    pub params: Vec<ParamRecord>,
    #[serde(default)]
    pub adam: Option<AdamState>,
}

impl TrainedDdpm {
    pub fn checkpoint(&self) -> DdpmCheckpoint {
        DdpmCheckpoint {
            arch: self.net.arch.clone(),
            scheme: self.net.scheme,
            schedule: self.schedule.clone(),
            train: Some(self.config.clone()),
            params: self.net.params.to_records(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Writes `<dir>/checkpoint.json` and `<dir>/loss.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("checkpoint.json"), serde_json::to_string(&self.checkpoint())? + "\n")?;
        fs::write(dir.join("loss.csv"), loss_csv(&self.loss_history))?;
        Ok(())
    }
}

pub fn load_ddpm(dir: &Path) -> Result<(EpsilonNet, ScheduleConfig)> {
    let path = dir.join("checkpoint.json");
    if !path.exists() {
        return Err(Error::MissingStage { stage: "ddpm-train".into(), detail: format!("{} not found", path.display()) });
    }
    let ck: DdpmCheckpoint =
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Metadata { path: path.clone(), detail: e.to_string() })?;
    let mut net = EpsilonNet::new(ck.arch, ck.scheme)?;
    net.params.load_records(&ck.params).map_err(|detail| Error::Metadata { path, detail })?;
    Ok((net, ck.schedule))
}
