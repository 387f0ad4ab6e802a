//! Image container, HU/attenuation conversion, patch cropping and the
//! raw + JSON sidecar persistence format shared by every stage.
//!
//! Pixel `(r, c)` has its center at `origin + (r * dy, c * dx)` in mm; rows
//! run along y and columns along x.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tag written into every image sidecar.
pub const HU_CONVENTION: &str = "water=0,air=-1000";

/// A 2D scalar field in Hounsfield units with physical geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    values: Array2<f32>,
    spacing: (f64, f64),
    origin: (f64, f64),
    id: String,
}

impl ImageGrid {
    pub fn new(values: Array2<f32>, spacing: (f64, f64), origin: (f64, f64), id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::invalid(format!("origin must be finite, got {origin:?}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image `{id}`")));
        }
        Ok(Self { values, spacing, origin, id })
    }

    /// Grid whose center sits at the physical origin.
    pub fn centered(values: Array2<f32>, spacing: (f64, f64), id: impl Into<String>) -> Result<Self> {
        let (r, c) = values.dim();
        let origin = centered_origin((r, c), spacing);
        Self::new(values, spacing, origin, id)
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn geometry(&self) -> GridSpec {
        GridSpec {
            shape: [self.values.nrows(), self.values.ncols()],
            spacing_mm: [self.spacing.0, self.spacing.1],
            origin_mm: Some([self.origin.0, self.origin.1]),
        }
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Array2<f32>, id: impl Into<String>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::ShapeMismatch(format!("expected {:?}, got {:?}", self.values.dim(), values.dim())));
        }
        Self::new(values, self.spacing, self.origin, id)
    }

    pub fn same_geometry(&self, other: &ImageGrid) -> bool {
        self.values.dim() == other.values.dim() && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn ensure_same_geometry(&self, other: &ImageGrid) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "`{}` {:?}/{:?}/{:?} vs `{}` {:?}/{:?}/{:?}",
                self.id,
                self.shape(),
                self.spacing,
                self.origin,
                other.id,
                other.shape(),
                other.spacing,
                other.origin
            )))
        }
    }

    /// Physical (y, x) of a pixel center.
    pub fn pixel_center(&self, r: usize, c: usize) -> (f64, f64) {
        (self.origin.0 + r as f64 * self.spacing.0, self.origin.1 + c as f64 * self.spacing.1)
    }
}

pub(crate) fn centered_origin(shape: (usize, usize), spacing: (f64, f64)) -> (f64, f64) {
    (-(shape.0 as f64 - 1.0) * 0.5 * spacing.0, -(shape.1 as f64 - 1.0) * 0.5 * spacing.1)
}

/// Raster geometry; `origin_mm = None` centers the grid on the isocenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub shape: [usize; 2],
    pub spacing_mm: [f64; 2],
    #[serde(default)]
    pub origin_mm: Option<[f64; 2]>,
}

impl GridSpec {
    pub fn square(n: usize, spacing_mm: f64) -> Self {
        Self { shape: [n, n], spacing_mm: [spacing_mm, spacing_mm], origin_mm: None }
    }

    pub fn origin(&self) -> (f64, f64) {
        match self.origin_mm {
            Some([y, x]) => (y, x),
            None => centered_origin((self.shape[0], self.shape[1]), (self.spacing_mm[0], self.spacing_mm[1])),
        }
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.spacing_mm[0], self.spacing_mm[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape[0] == 0 || self.shape[1] == 0 {
            return Err(Error::invalid("grid shape must be non-empty"));
        }
        if !(self.spacing_mm[0] > 0.0 && self.spacing_mm[1] > 0.0) {
            return Err(Error::invalid("grid spacing must be positive"));
        }
        Ok(())
    }

    /// Half-diagonal of the grid's physical extent about the isocenter.
    pub fn radius_mm(&self) -> f64 {
        let (oy, ox) = self.origin();
        let (dy, dx) = self.spacing();
        let ys = [oy - 0.5 * dy, oy + (self.shape[0] as f64 - 0.5) * dy];
        let xs = [ox - 0.5 * dx, ox + (self.shape[1] as f64 - 0.5) * dx];
        ys.iter().flat_map(|y| xs.iter().map(move |x| (x * x + y * y).sqrt())).fold(0.0, f64::max)
    }

    pub fn filled(&self, value: f32, id: impl Into<String>) -> Result<ImageGrid> {
        self.validate()?;
        ImageGrid::new(Array2::from_elem((self.shape[0], self.shape[1]), value), self.spacing(), self.origin(), id)
    }
}

/// Linear attenuation coefficients in 1/mm on an image raster.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationMap {
    pub values: Array2<f64>,
    pub spacing: (f64, f64),
    pub origin: (f64, f64),
}

impl AttenuationMap {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self { values: Array2::zeros((spec.shape[0], spec.shape[1])), spacing: spec.spacing(), origin: spec.origin() }
    }

    pub fn geometry(&self) -> GridSpec {
        GridSpec {
            shape: [self.values.nrows(), self.values.ncols()],
            spacing_mm: [self.spacing.0, self.spacing.1],
            origin_mm: Some([self.origin.0, self.origin.1]),
        }
    }
}

/// `mu = mu_water * (1 + HU/1000)`, clamped below at zero.
pub fn hu_to_mu(img: &ImageGrid, mu_water: f64) -> Result<AttenuationMap> {
    if !(mu_water > 0.0 && mu_water.is_finite()) {
        return Err(Error::invalid(format!("mu_water must be positive, got {mu_water}")));
    }
    if img.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("image `{}` passed to hu_to_mu", img.id)));
    }
    Ok(AttenuationMap {
        values: img.values.mapv(|hu| (mu_water * (1.0 + hu as f64 / 1000.0)).max(0.0)),
        spacing: img.spacing,
        origin: img.origin,
    })
}

/// Inverse of [`hu_to_mu`] for a single value.
pub fn mu_to_hu(mu: f64, mu_water: f64) -> f64 {
    (mu / mu_water - 1.0) * 1000.0
}

/// Water attenuation near 70 keV, 1/mm.
pub const MU_WATER_PER_MM: f64 = 0.02;

/// Network value range: [-1000, 1500] HU maps onto [-1, 1].
pub const UNIT_CENTER_HU: f32 = 250.0;
pub const UNIT_HALF_RANGE_HU: f32 = 1250.0;

pub fn hu_to_unit(hu: f32) -> f32 {
    (hu - UNIT_CENTER_HU) / UNIT_HALF_RANGE_HU
}

pub fn unit_to_hu(u: f32) -> f32 {
    u * UNIT_HALF_RANGE_HU + UNIT_CENTER_HU
}

/// A rectangular crop of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub values: Array2<f32>,
    pub source_id: String,
    pub offset: (usize, usize),
    pub size: (usize, usize),
}

impl Patch {
    /// Crop at a fixed position.
    pub fn crop(img: &ImageGrid, offset: (usize, usize), size: (usize, usize)) -> Result<Self> {
        let (h, w) = img.shape();
        if size.0 == 0 || size.1 == 0 || offset.0 + size.0 > h || offset.1 + size.1 > w {
            return Err(Error::invalid(format!("patch {size:?} at {offset:?} exceeds image `{}` of {h}x{w}", img.id)));
        }
        Ok(Self {
            values: img.values.slice(s![offset.0..offset.0 + size.0, offset.1..offset.1 + size.1]).to_owned(),
            source_id: img.id.clone(),
            offset,
            size,
        })
    }
}

/// Draws `n` patch offsets uniformly over all valid positions.
pub fn random_offsets(image_shape: (usize, usize), n: usize, size: (usize, usize), rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let (h, w) = image_shape;
    if size.0 == 0 || size.1 == 0 || size.0 > h || size.1 > w {
        return Err(Error::invalid(format!("patch {size:?} larger than image {h}x{w}")));
    }
    Ok((0..n).map(|_| (rng.random_range(0..=h - size.0), rng.random_range(0..=w - size.1))).collect())
}

/// `n` uniformly placed crops, deterministic in `rng_seed`.
pub fn extract_patches(img: &ImageGrid, n: usize, size: (usize, usize), rng_seed: u64) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    random_offsets(img.shape(), n, size, &mut rng)?.into_iter().map(|o| Patch::crop(img, o, size)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

/// JSON sidecar accompanying every `.raw` payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub id: String,
    pub shape: [usize; 2],
    pub spacing_mm: [f64; 2],
    pub origin_mm: [f64; 2],
    pub dtype: String,
    pub endianness: Endianness,
    pub hu_convention: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

fn paths_for(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(values: &Array2<f32>, endianness: Endianness) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        match endianness {
            Endianness::Little => bytes.extend_from_slice(&v.to_le_bytes()),
            Endianness::Big => bytes.extend_from_slice(&v.to_be_bytes()),
        }
    }
    bytes
}

/// Writes `<path>.raw` (float32) and `<path>.json`. Extensions on `path`
/// are replaced.
pub fn save_array(path: &Path, values: &Array2<f32>, meta: &Sidecar) -> Result<()> {
    let (raw, json) = paths_for(path);
    if let Some(dir) = raw.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let bytes = encode(values, meta.endianness);
    let mut meta = meta.clone();
    meta.sha256 = sha256_hex(&bytes);
    meta.shape = [values.nrows(), values.ncols()];
    fs::write(&raw, &bytes)?;
    fs::write(&json, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Reads and verifies a payload + sidecar pair.
pub fn load_array(path: &Path) -> Result<(Array2<f32>, Sidecar)> {
    let (raw, json) = paths_for(path);
    let meta: Sidecar =
        serde_json::from_str(&fs::read_to_string(&json)?).map_err(|e| Error::Metadata { path: json.clone(), detail: e.to_string() })?;
    if meta.dtype != "float32" {
        return Err(Error::Metadata { path: json, detail: format!("unsupported dtype `{}`", meta.dtype) });
    }
    let bytes = fs::read(&raw)?;
    let expected_len = meta.shape[0] * meta.shape[1] * 4;
    if bytes.len() != expected_len {
        return Err(Error::Metadata {
            path: raw,
            detail: format!("sidecar shape {:?} needs {expected_len} bytes, payload has {}", meta.shape, bytes.len()),
        });
    }
    let actual = sha256_hex(&bytes);
    if actual != meta.sha256 {
        return Err(Error::Checksum { path: raw, expected: meta.sha256.clone(), actual });
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            match meta.endianness {
                Endianness::Little => f32::from_le_bytes(b),
                Endianness::Big => f32::from_be_bytes(b),
            }
        })
        .collect();
    let arr = Array2::from_shape_vec((meta.shape[0], meta.shape[1]), vals).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok((arr, meta))
}

pub fn save_grid(img: &ImageGrid, path: &Path) -> Result<()> {
    save_grid_with(img, path, Endianness::Little, None)
}

pub fn save_grid_with(img: &ImageGrid, path: &Path, endianness: Endianness, provenance: Option<serde_json::Value>) -> Result<()> {
    let meta = Sidecar {
        id: img.id.clone(),
        shape: [img.values.nrows(), img.values.ncols()],
        spacing_mm: [img.spacing.0, img.spacing.1],
        origin_mm: [img.origin.0, img.origin.1],
        dtype: "float32".into(),
        endianness,
        hu_convention: HU_CONVENTION.into(),
        sha256: String::new(),
        provenance,
    };
    save_array(path, &img.values, &meta)
}

pub fn load_grid(path: &Path) -> Result<ImageGrid> {
    let (values, meta) = load_array(path)?;
    if meta.hu_convention != HU_CONVENTION {
        return Err(Error::Metadata {
            path: path.with_extension("json"),
            detail: format!("expected HU convention `{HU_CONVENTION}`, found `{}`", meta.hu_convention),
        });
    }
    ImageGrid::new(values, (meta.spacing_mm[0], meta.spacing_mm[1]), (meta.origin_mm[0], meta.origin_mm[1]), meta.id)
}
