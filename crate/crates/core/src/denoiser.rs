//! UNet denoisers: self-supervised on independent LR noise pairs and
//! supervised on noisy/clean HR pairs, with tiled full-slice inference.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use pcct_nn::{clip_grad_norm, Adam, AdamConfig, AdamState, Graph, ParamRecord, ParamStore, Tensor, UNet, UNetConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{decompose, Denoise, SampleGroup};
use crate::error::{Error, Result};
use crate::imaging::{hu_to_unit, unit_to_hu, ImageGrid};

/// Effective learning-rate multiplier of the input-skip gain.
const SKIP_RATE: f32 = 10.0;

/// Mirrored context added around every inference window.
pub const CONTEXT_PX: usize = 16;

/// Index into `0..n` reflected about both ends (no edge repeat), for any offset.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n as isize - 1);
    let k = i.rem_euclid(p);
    (if k < n as isize { k } else { p - k }) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    /// Image channels processed jointly; 1 is the standard denoiser.
    #[serde(default = "one")]
    pub channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn default_tile() -> usize {
    128
}
fn default_overlap() -> usize {
    32
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { channels: 1, base_width: 32, channel_mults: vec![1, 2, 2], tile: default_tile(), overlap: default_overlap(), seed: 0 }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.channels) {
            return Err(Error::Config(format!("denoiser channels must be 1 or 2, got {}", self.channels)));
        }
        self.unet_config().validate().map_err(Error::Config)?;
        let f = self.unet_config().downsample_factor();
        if self.tile == 0 || self.tile % f != 0 {
            return Err(Error::Config(format!("tile {} must be a positive multiple of {f}", self.tile)));
        }
        if 2 * self.overlap >= self.tile {
            return Err(Error::Config(format!("overlap {} too large for tile {}", self.overlap, self.tile)));
        }
        Ok(())
    }

    fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.channels,
            out_channels: self.channels,
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            attention: false,
            embed_dim: None,
            embed_scale: 1.0,
            zero_init_output: true,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Cosine decay of the step size to zero over the run.
    #[serde(default)]
    pub cosine_decay: bool,
}

/// Step size at iteration `it` of `total` under optional cosine decay.
pub fn scheduled_lr(base: f64, it: usize, total: usize, cosine: bool) -> f64 {
    if cosine {
        base * 0.5 * (1.0 + (PI * it as f64 / total as f64).cos())
    } else {
        base
    }
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { iterations: 10_000, batch_size: 8, lr: 1e-5, patch_size: 128, seed: 0, grad_clip: None, cosine_decay: false }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.patch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("denoiser iterations, batch size, patch size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Output is `g * x + unet(x)` with a learnable gain `g` starting at 0 and
/// a zero-initialized output layer, so an untrained net returns zeros.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub arch: DenoiserArch,
    unet: UNet,
    params: ParamStore<f32>,
    skip: usize,
}

impl DenoiserNet {
    pub fn new(arch: DenoiserArch) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let unet = UNet::new(arch.unet_config(), &mut params);
        let skip = params.add("input_skip", Tensor::zeros(&[1]));
        Ok(Self { arch, unet, params, skip })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn skip_gain(&self) -> f32 {
        self.params.get(self.skip).value.data()[0] * SKIP_RATE
    }

    fn forward(&self, g: &Graph<f32>, x: Var) -> Var {
        let y = self.unet.forward(g, &self.params, x, None);
        let s = g.scale(self.params.var(g, self.skip), SKIP_RATE);
        g.add(g.mul_scalar(x, s), y)
    }

    fn factor(&self) -> usize {
        self.arch.unet_config().downsample_factor()
    }

    /// Runs the net on one `[h, w]` array in network units. The input is
    /// mirrored by [`CONTEXT_PX`] on every side (and up to a valid size) so
    /// the convolutions' zero padding stays away from the image border.
    fn run(&self, x: &Array2<f32>) -> Array2<f32> {
        let (h, w) = x.dim();
        let c = self.arch.channels;
        let f = self.factor();
        let m = CONTEXT_PX;
        let (ph, pw) = ((h + 2 * m).div_ceil(f) * f, (w + 2 * m).div_ceil(f) * f);
        let padded = Array2::from_shape_fn((ph, pw), |(r, k)| x[[mirror(r as isize - m as isize, h), mirror(k as isize - m as isize, w)]]);
        let mut data = Vec::with_capacity(c * ph * pw);
        for _ in 0..c {
            data.extend(padded.iter().copied());
        }
        let g = Graph::inference();
        let xv = g.input(Tensor::from_vec(&[1, c, ph, pw], data));
        let y = self.forward(&g, xv);
        let out = g.value(y);
        let mut avg = Array2::<f32>::zeros((h, w));
        for ch in out.data().chunks(ph * pw) {
            for ((r, k), a) in avg.indexed_iter_mut() {
                *a += ch[(r + m) * pw + k + m] / c as f32;
            }
        }
        avg
    }

    /// Whole-image inference.
    pub fn predict_whole(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        if x.is_empty() {
            return Err(Error::invalid("empty image"));
        }
        Ok(self.run(x))
    }

    /// Overlapping tiles blended with raised-cosine ramps over `overlap`
    /// pixels at each tile border.
    pub fn predict_tiled(&self, x: &Array2<f32>, tile: usize, overlap: usize) -> Result<Array2<f32>> {
        let f = self.factor();
        if tile == 0 || tile % f != 0 || 2 * overlap >= tile {
            return Err(Error::invalid(format!("tile {tile} / overlap {overlap} invalid for factor {f}")));
        }
        let (h, w) = x.dim();
        if h <= tile && w <= tile {
            return self.predict_whole(x);
        }
        let (ph, pw) = (h.max(tile), w.max(tile));
        let padded = reflect_pad(x, ph, pw)?;
        let starts = |n: usize| -> Vec<usize> {
            let stride = tile - overlap;
            let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + tile < n).collect();
            v.push(n - tile);
            v.dedup();
            v
        };
        let ramp: Vec<f32> = (0..tile)
            .map(|i| {
                let e = i.min(tile - 1 - i);
                if e < overlap {
                    (0.5 * (1.0 - (PI * (e as f64 + 0.5) / overlap as f64).cos())) as f32
                } else {
                    1.0
                }
            })
            .collect();
        let mut acc = Array2::<f32>::zeros((ph, pw));
        let mut wsum = Array2::<f32>::zeros((ph, pw));
        for &r0 in &starts(ph) {
            for &c0 in &starts(pw) {
                let t = padded.slice(ndarray::s![r0..r0 + tile, c0..c0 + tile]).to_owned();
                let y = self.run(&t);
                for ((r, c), &v) in y.indexed_iter() {
                    let wt = ramp[r] * ramp[c];
                    acc[[r0 + r, c0 + c]] += wt * v;
                    wsum[[r0 + r, c0 + c]] += wt;
                }
            }
        }
        acc.zip_mut_with(&wsum, |a, &s| *a /= s);
        Ok(acc.slice(ndarray::s![..h, ..w]).to_owned())
    }

    /// Denoised image in HU using the configured tiling.
    pub fn apply(&self, img: &ImageGrid) -> Result<ImageGrid> {
        let x = img.values().mapv(hu_to_unit);
        let y = self.predict_tiled(&x, self.arch.tile, self.arch.overlap)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("denoiser output for `{}`", img.id())));
        }
        img.with_values(y.mapv(unit_to_hu), format!("{}-denoised", img.id()))
    }
}

impl Denoise for DenoiserNet {
    fn denoise_grid(&self, img: &ImageGrid) -> Result<ImageGrid> {
        self.apply(img)
    }
}

/// `(denoised, noise)` with `denoised + noise == img` exactly.
pub fn denoise(net: &dyn Denoise, img: &ImageGrid) -> Result<(ImageGrid, ImageGrid)> {
    let est = net.denoise_grid(img)?;
    decompose(img, &est)
}

/// Reflect-pads (mirror without edge repeat) at the bottom/right up to `(ph, pw)`.
pub fn reflect_pad(x: &Array2<f32>, ph: usize, pw: usize) -> Result<Array2<f32>> {
    let (h, w) = x.dim();
    if ph < h || pw < w || (ph > h && ph - h >= h) || (pw > w && pw - w >= w) {
        return Err(Error::invalid(format!("cannot reflect-pad {h}x{w} to {ph}x{pw}")));
    }
    let idx = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    Ok(Array2::from_shape_fn((ph, pw), |(r, c)| x[[idx(r, h), idx(c, w)]]))
}

#[derive(Clone, Debug)]
pub struct TrainedDenoiser {
    pub net: DenoiserNet,
    pub loss_history: Vec<f64>,
    pub adam: AdamState,
    pub config: DenoiserTrainConfig,
}

/// Trains on `(input, target)` image pairs with MSE in network units.
pub fn train_pairs(pairs: &[(&ImageGrid, &ImageGrid)], arch: &DenoiserArch, cfg: &DenoiserTrainConfig) -> Result<TrainedDenoiser> {
    cfg.validate()?;
    let mut net = DenoiserNet::new(arch.clone())?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let f = net.factor();
    if cfg.patch_size % f != 0 {
        return Err(Error::Config(format!("patch size {} must be divisible by {f}", cfg.patch_size)));
    }
    let p = cfg.patch_size;
    let data: Vec<(Array2<f32>, Array2<f32>)> = pairs
        .iter()
        .map(|(a, b)| {
            a.ensure_same_geometry(b)?;
            let (h, w) = a.shape();
            if h < p || w < p {
                return Err(Error::invalid(format!("image `{}` {h}x{w} smaller than patch {p}", a.id())));
            }
            Ok((a.values().mapv(hu_to_unit), b.values().mapv(hu_to_unit)))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &net.params);
    let c = arch.channels;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let n = cfg.batch_size;
        let mut xs = Vec::with_capacity(n * c * p * p);
        let mut ys = Vec::with_capacity(n * c * p * p);
        for _ in 0..n * c {
            let (a, b) = &data[rng.random_range(0..data.len())];
            let (h, w) = a.dim();
            let r0 = rng.random_range(0..=h - p);
            let c0 = rng.random_range(0..=w - p);
            let sl = ndarray::s![r0..r0 + p, c0..c0 + p];
            xs.extend(a.slice(sl).iter().copied());
            ys.extend(b.slice(sl).iter().copied());
        }
        let g = Graph::new();
        let xv = g.input(Tensor::from_vec(&[n, c, p, p], xs));
        let out = net.forward(&g, xv);
        let loss = g.mse_loss(out, Tensor::from_vec(&[n, c, p, p], ys));
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("denoiser loss became {lv} at iteration {it}")));
        }
        let mut grads = g.backward(loss);
        if let Some(maxn) = cfg.grad_clip {
            clip_grad_norm(&mut grads, maxn);
        }
        adam.config.lr = scheduled_lr(cfg.lr, it, cfg.iterations, cfg.cosine_decay);
        adam.step(&mut net.params, &grads);
        history.push(lv);
    }
    Ok(TrainedDenoiser { net, loss_history: history, adam: adam.state(), config: cfg.clone() })
}

/// Self-supervised LR denoiser: each LR instance predicts the other.
pub fn train_lr_denoiser(groups: &[SampleGroup], arch: &DenoiserArch, cfg: &DenoiserTrainConfig) -> Result<TrainedDenoiser> {
    if groups.is_empty() {
        return Err(Error::invalid("no groups to train the LR denoiser on"));
    }
    let pairs: Vec<(&ImageGrid, &ImageGrid)> = groups.iter().flat_map(|g| [(&g.lr_a, &g.lr_b), (&g.lr_b, &g.lr_a)]).collect();
    train_pairs(&pairs, arch, cfg)
}

/// Supervised HR denoiser: noisy HR regressed onto the clean phantom.
pub fn train_hr_denoiser(groups: &[SampleGroup], arch: &DenoiserArch, cfg: &DenoiserTrainConfig) -> Result<TrainedDenoiser> {
    if groups.is_empty() {
        return Err(Error::invalid("no groups to train the HR denoiser on"));
    }
    let pairs: Vec<(&ImageGrid, &ImageGrid)> = groups.iter().map(|g| (&g.noisy_hr, &g.clean_hr)).collect();
    train_pairs(&pairs, arch, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserCheckpoint {
    pub arch: DenoiserArch,
    #[serde(default)]
    pub train: Option<DenoiserTrainConfig>,
    pub params: Vec<ParamRecord>,
    #[serde(default)]
    pub adam: Option<AdamState>,
}

impl TrainedDenoiser {
    pub fn checkpoint(&self) -> DenoiserCheckpoint {
        DenoiserCheckpoint {
            arch: self.net.arch.clone(),
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

pub fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

pub fn load_denoiser(dir: &Path) -> Result<DenoiserNet> {
    let path = dir.join("checkpoint.json");
    if !path.exists() {
        return Err(Error::MissingStage { stage: "denoise-train".into(), detail: format!("{} not found", path.display()) });
    }
    let ck: DenoiserCheckpoint =
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Metadata { path: path.clone(), detail: e.to_string() })?;
    let mut net = DenoiserNet::new(ck.arch)?;
    net.params.load_records(&ck.params).map_err(|detail| Error::Metadata { path, detail })?;
    Ok(net)
}

/// Moving average with a trailing window (shorter at the start).
pub fn smooth(history: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for (i, &v) in history.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= history[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Box-filter stand-in denoiser with mirrored borders.
#[derive(Clone, Copy, Debug)]
pub struct MeanFilter {
    pub radius: usize,
}

impl Denoise for MeanFilter {
    fn denoise_grid(&self, img: &ImageGrid) -> Result<ImageGrid> {
        let v = img.values();
        let (h, w) = v.dim();
        let r = self.radius as isize;
        let mirror = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
            i.clamp(0, n - 1) as usize
        };
        let out = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut s = 0.0f64;
            for dy in -r..=r {
                for dx in -r..=r {
                    s += v[[mirror(y as isize + dy, h), mirror(x as isize + dx, w)]] as f64;
                }
            }
            (s / ((2 * r + 1) * (2 * r + 1)) as f64) as f32
        });
        img.with_values(out, format!("{}-mean", img.id()))
    }
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Denoise for Identity {
    fn denoise_grid(&self, img: &ImageGrid) -> Result<ImageGrid> {
        Ok(img.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserArch {
        DenoiserArch { channels: 1, base_width: 4, channel_mults: vec![1, 2], tile: 16, overlap: 4, seed: 1 }
    }

    #[test]
    fn untrained_net_outputs_zero() {
        let net = DenoiserNet::new(tiny()).unwrap();
        let x = Array2::from_shape_fn((12, 10), |(r, c)| (r as f32 - c as f32) * 0.01);
        assert!(net.predict_whole(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reflect_padding() {
        let x = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f32);
        let p = reflect_pad(&x, 5, 4).unwrap();
        assert_eq!(p[[3, 0]], x[[1, 0]]);
        assert_eq!(p[[4, 3]], x[[0, 1]]);
        assert!(reflect_pad(&x, 6, 3).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(DenoiserNet::new(DenoiserArch { channels: 3, ..tiny() }).is_err());
        assert!(DenoiserNet::new(DenoiserArch { tile: 15, ..tiny() }).is_err());
        assert!(DenoiserTrainConfig { iterations: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn two_channel_variant_builds() {
        let net = DenoiserNet::new(DenoiserArch { channels: 2, ..tiny() }).unwrap();
        let x = Array2::<f32>::zeros((8, 8));
        assert_eq!(net.predict_whole(&x).unwrap().dim(), (8, 8));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
