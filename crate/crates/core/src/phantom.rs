//! Digital phantoms: procedural anatomy-like slices and analytic QA objects
//! (edge, bar pattern, uniform disk, bead), plus geometric shrinking.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GridSpec, ImageGrid};

pub const AIR_HU: f32 = -1000.0;
const HU_MIN: f64 = -1000.0;
const HU_MAX: f64 = 3000.0;

/// A filled primitive painted in list order (later shapes overwrite).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    #[serde(default)]
    pub form: ShapeForm,
    /// (y, x) in mm.
    pub center_mm: [f64; 2],
    /// Half extents along the shape's own x and y axes.
    pub half_axes_mm: [f64; 2],
    /// Counter-clockwise rotation of the shape's x axis.
    #[serde(default)]
    pub angle_deg: f64,
    pub hu: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeForm {
    #[default]
    Ellipse,
    Rectangle,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let dy = y - self.center_mm[0];
        let dx = x - self.center_mm[1];
        let u = (dx * c + dy * s) / self.half_axes_mm[0];
        let v = (-dx * s + dy * c) / self.half_axes_mm[1];
        match self.form {
            ShapeForm::Ellipse => u * u + v * v <= 1.0,
            ShapeForm::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
        }
    }

    /// Axis-aligned half extents of the rotated shape.
    fn bbox_half(&self) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let [a, b] = self.half_axes_mm;
        match self.form {
            ShapeForm::Ellipse => (((a * s).powi(2) + (b * c).powi(2)).sqrt(), ((a * c).powi(2) + (b * s).powi(2)).sqrt()),
            ShapeForm::Rectangle => ((a * s).abs() + (b * c).abs(), (a * c).abs() + (b * s).abs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhantomKind {
    /// Procedural head-like slice: soft-tissue body, skull shell, organ
    /// blobs and thin bone laminae around a homogeneous central region.
    AnatomyLike {
        #[serde(default = "default_body_hu")]
        body_hu: f64,
        #[serde(default = "default_bone_hu")]
        bone_hu: f64,
        #[serde(default = "default_laminae")]
        laminae: usize,
        /// Side of the structure-free square at the center, in pixels.
        #[serde(default = "default_uniform_px")]
        uniform_region_px: usize,
        #[serde(default)]
        extra_shapes: Vec<Shape>,
    },
    /// Straight edge through `offset_mm` along the normal, tilted by
    /// `angle_deg` from the column (y) axis; `hu_high` on the +x side.
    Edge {
        angle_deg: f64,
        hu_low: f64,
        hu_high: f64,
        #[serde(default)]
        offset_mm: f64,
    },
    /// Vertical square-wave bars of `frequency_lp_per_mm` inside a centered
    /// square of half side `half_extent_mm`.
    BarPattern {
        frequency_lp_per_mm: f64,
        hu_low: f64,
        hu_high: f64,
        half_extent_mm: f64,
        #[serde(default = "default_background")]
        background_hu: f64,
    },
    UniformDisk {
        radius_mm: f64,
        hu: f64,
        #[serde(default)]
        center_mm: [f64; 2],
        #[serde(default = "default_background")]
        background_hu: f64,
    },
    PointBead {
        radius_mm: f64,
        hu: f64,
        #[serde(default)]
        center_mm: [f64; 2],
        #[serde(default = "default_background")]
        background_hu: f64,
    },
}

fn default_body_hu() -> f64 {
    40.0
}
fn default_bone_hu() -> f64 {
    1200.0
}
fn default_laminae() -> usize {
    8
}
fn default_uniform_px() -> usize {
    64
}
fn default_background() -> f64 {
    AIR_HU as f64
}
fn default_supersample() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub name: String,
    pub grid: GridSpec,
    /// Sub-samples per pixel side used for area-averaged rasterization.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    pub object: PhantomKind,
}

impl PhantomSpec {
    pub fn new(name: impl Into<String>, grid: GridSpec, object: PhantomKind) -> Self {
        Self { name: name.into(), grid, supersample: default_supersample(), object }
    }
}

fn check_hu(v: f64, what: &str) -> Result<()> {
    if !(HU_MIN..=HU_MAX).contains(&v) {
        return Err(Error::invalid(format!("{what} = {v} HU outside [{HU_MIN}, {HU_MAX}]")));
    }
    Ok(())
}

/// Physical half extents (y, x) of the grid about its center.
fn half_extent(grid: &GridSpec) -> (f64, f64) {
    (grid.shape[0] as f64 * grid.spacing_mm[0] * 0.5, grid.shape[1] as f64 * grid.spacing_mm[1] * 0.5)
}

fn grid_center(grid: &GridSpec) -> (f64, f64) {
    let (oy, ox) = grid.origin();
    (oy + (grid.shape[0] as f64 - 1.0) * 0.5 * grid.spacing_mm[0], ox + (grid.shape[1] as f64 - 1.0) * 0.5 * grid.spacing_mm[1])
}

fn check_in_fov(shape: &Shape, grid: &GridSpec) -> Result<()> {
    let (hy, hx) = half_extent(grid);
    let (cy, cx) = grid_center(grid);
    let (by, bx) = shape.bbox_half();
    let dy = (shape.center_mm[0] - cy).abs() + by;
    let dx = (shape.center_mm[1] - cx).abs() + bx;
    if dy > hy + 1e-9 || dx > hx + 1e-9 {
        return Err(Error::Geometry(format!(
            "shape at {:?} with half axes {:?} leaves the {:.1}x{:.1} mm field of view",
            shape.center_mm,
            shape.half_axes_mm,
            2.0 * hy,
            2.0 * hx
        )));
    }
    check_hu(shape.hu, "shape")
}

/// The shape list an anatomy-like phantom is painted from.
fn anatomy_shapes(spec: &PhantomSpec, body_hu: f64, bone_hu: f64, laminae: usize, uniform_px: usize, seed: u64) -> Result<Vec<Shape>> {
    let grid = &spec.grid;
    let (hy, hx) = half_extent(grid);
    let (cy, cx) = grid_center(grid);
    let r = hy.min(hx);
    let px = grid.spacing_mm[0].min(grid.spacing_mm[1]);
    let uniform_half = uniform_px as f64 * 0.5 * px;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, v: f64, f: f64| v * (1.0 + rng.random_range(-f..f));

    let body_a = jitter(&mut rng, 0.88 * r, 0.04);
    let body_b = jitter(&mut rng, 0.80 * r, 0.04);
    let shell = 0.06 * r;
    let mut shapes = vec![
        Shape { form: ShapeForm::Ellipse, center_mm: [cy, cx], half_axes_mm: [body_a, body_b], angle_deg: 0.0, hu: bone_hu * 0.6 },
        Shape {
            form: ShapeForm::Ellipse,
            center_mm: [cy, cx],
            half_axes_mm: [body_a - shell, body_b - shell],
            angle_deg: 0.0,
            hu: body_hu,
        },
    ];
    if uniform_half >= (body_a - shell).min(body_b - shell) * 0.95 {
        return Err(Error::Geometry(format!("uniform region of {uniform_px} px does not fit inside the anatomy-like body")));
    }

    let inner_a = body_a - shell;
    let inner_b = body_b - shell;
    // keep-out square around the homogeneous region
    let keep = uniform_half + 2.0 * px;
    let avoids_center = |s: &Shape| {
        let (by, bx) = s.bbox_half();
        (s.center_mm[0] - cy).abs() - by > keep || (s.center_mm[1] - cx).abs() - bx > keep
    };
    let inside_body = |s: &Shape| {
        let (by, bx) = s.bbox_half();
        let y = ((s.center_mm[0] - cy).abs() + by) / inner_b;
        let x = ((s.center_mm[1] - cx).abs() + bx) / inner_a;
        x * x + y * y <= 0.9
    };

    // soft-tissue blobs (fat, organ-like)
    let mut placed = 0;
    let mut attempts = 0;
    while placed < 4 && attempts < 400 {
        attempts += 1;
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let rad = rng.random_range(0.45..0.8);
        let s = Shape {
            form: ShapeForm::Ellipse,
            center_mm: [cy + rad * inner_b * ang.sin(), cx + rad * inner_a * ang.cos()],
            half_axes_mm: [rng.random_range(0.06..0.14) * r, rng.random_range(0.04..0.1) * r],
            angle_deg: rng.random_range(0.0..180.0),
            hu: if placed % 2 == 0 { -90.0 } else { 70.0 },
        };
        if avoids_center(&s) && inside_body(&s) {
            shapes.push(s);
            placed += 1;
        }
    }

    // thin bone laminae, 1-3 px thick, in small parallel clusters
    let mut placed = 0;
    let mut attempts = 0;
    while placed < laminae && attempts < 4000 {
        attempts += 1;
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let rad = rng.random_range(0.35..0.85);
        let base = [cy + rad * inner_b * ang.sin(), cx + rad * inner_a * ang.cos()];
        let theta: f64 = rng.random_range(0.0..180.0);
        let len = rng.random_range(0.08..0.2) * r;
        let count = rng.random_range(2..=3usize).min(laminae - placed);
        let gap = rng.random_range(2.5..5.0) * px;
        let (ns, nc) = (theta + 90.0).to_radians().sin_cos();
        let cluster: Vec<Shape> = (0..count)
            .map(|k| {
                let thick_px = rng.random_range(1.0..=3.0f64);
                let off = (k as f64 - (count as f64 - 1.0) / 2.0) * gap;
                Shape {
                    form: ShapeForm::Rectangle,
                    center_mm: [base[0] + off * ns, base[1] + off * nc],
                    half_axes_mm: [len * 0.5, thick_px * px * 0.5],
                    angle_deg: theta,
                    hu: bone_hu,
                }
            })
            .collect();
        if cluster.iter().all(|s| avoids_center(s) && inside_body(s)) {
            placed += cluster.len();
            shapes.extend(cluster);
        }
    }
    Ok(shapes)
}

/// Rasterizes a phantom by `supersample x supersample` area averaging.
pub fn render_phantom(spec: &PhantomSpec, rng_seed: u64) -> Result<ImageGrid> {
    spec.grid.validate()?;
    if spec.supersample == 0 {
        return Err(Error::invalid("supersample must be >= 1"));
    }
    let grid = &spec.grid;
    let (hy, hx) = half_extent(grid);
    let (cy, cx) = grid_center(grid);

    enum Painter {
        Shapes { background: f64, shapes: Vec<Shape> },
        Field(Box<dyn Fn(f64, f64) -> f64>),
    }

    let painter = match &spec.object {
        PhantomKind::AnatomyLike { body_hu, bone_hu, laminae, uniform_region_px, extra_shapes } => {
            check_hu(*body_hu, "body_hu")?;
            check_hu(*bone_hu, "bone_hu")?;
            let mut shapes = anatomy_shapes(spec, *body_hu, *bone_hu, *laminae, *uniform_region_px, rng_seed)?;
            for s in extra_shapes {
                check_in_fov(s, grid)?;
            }
            shapes.extend(extra_shapes.iter().cloned());
            Painter::Shapes { background: AIR_HU as f64, shapes }
        }
        PhantomKind::Edge { angle_deg, hu_low, hu_high, offset_mm } => {
            check_hu(*hu_low, "hu_low")?;
            check_hu(*hu_high, "hu_high")?;
            if offset_mm.abs() >= hx.min(hy) {
                return Err(Error::Geometry(format!("edge offset {offset_mm} mm lies outside the field of view")));
            }
            let (s, c) = angle_deg.to_radians().sin_cos();
            let (lo, hi, off) = (*hu_low, *hu_high, *offset_mm);
            Painter::Field(Box::new(move |y, x| {
                let d = (x - cx) * c - (y - cy) * s - off;
                if d > 0.0 {
                    hi
                } else {
                    lo
                }
            }))
        }
        PhantomKind::BarPattern { frequency_lp_per_mm, hu_low, hu_high, half_extent_mm, background_hu } => {
            check_hu(*hu_low, "hu_low")?;
            check_hu(*hu_high, "hu_high")?;
            check_hu(*background_hu, "background_hu")?;
            if *frequency_lp_per_mm <= 0.0 {
                return Err(Error::invalid("bar frequency must be positive"));
            }
            if *half_extent_mm > hx.min(hy) || *half_extent_mm <= 0.0 {
                return Err(Error::Geometry(format!("bar pattern half extent {half_extent_mm} mm does not fit the field of view")));
            }
            let (f, lo, hi, he, bg) = (*frequency_lp_per_mm, *hu_low, *hu_high, *half_extent_mm, *background_hu);
            Painter::Field(Box::new(move |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                if dy.abs() > he || dx.abs() > he {
                    return bg;
                }
                if (dx * f).rem_euclid(1.0) < 0.5 {
                    hi
                } else {
                    lo
                }
            }))
        }
        PhantomKind::UniformDisk { radius_mm, hu, center_mm, background_hu }
        | PhantomKind::PointBead { radius_mm, hu, center_mm, background_hu } => {
            check_hu(*background_hu, "background_hu")?;
            if *radius_mm <= 0.0 {
                return Err(Error::invalid("radius must be positive"));
            }
            let s = Shape {
                form: ShapeForm::Ellipse,
                center_mm: [cy + center_mm[0], cx + center_mm[1]],
                half_axes_mm: [*radius_mm, *radius_mm],
                angle_deg: 0.0,
                hu: *hu,
            };
            check_in_fov(&s, grid)?;
            Painter::Shapes { background: *background_hu, shapes: vec![s] }
        }
    };

    let sample = |y: f64, x: f64| -> f64 {
        match &painter {
            Painter::Shapes { background, shapes } => shapes.iter().rev().find(|s| s.contains(y, x)).map_or(*background, |s| s.hu),
            Painter::Field(f) => f(y, x),
        }
    };

    let ss = spec.supersample;
    let (dy, dx) = grid.spacing();
    let (oy, ox) = grid.origin();
    let inv = 1.0 / (ss * ss) as f64;
    let values = Array2::from_shape_fn((grid.shape[0], grid.shape[1]), |(r, c)| {
        let yc = oy + r as f64 * dy;
        let xc = ox + c as f64 * dx;
        let mut acc = 0.0;
        for i in 0..ss {
            let y = yc + ((i as f64 + 0.5) / ss as f64 - 0.5) * dy;
            for j in 0..ss {
                let x = xc + ((j as f64 + 0.5) / ss as f64 - 0.5) * dx;
                acc += sample(y, x);
            }
        }
        (acc * inv) as f32
    });
    ImageGrid::new(values, grid.spacing(), grid.origin(), spec.name.clone())
}

/// Shrinks the imaged object about the grid center by `factor` using
/// bilinear interpolation on the unchanged raster. Regions with no source
/// support are filled with air.
pub fn shrink_phantom(img: &ImageGrid, factor: f64) -> Result<ImageGrid> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::invalid(format!("shrink factor must be in (0, 1], got {factor}")));
    }
    let v = img.values();
    let (h, w) = img.shape();
    let cr = (h as f64 - 1.0) * 0.5;
    let cc = (w as f64 - 1.0) * 0.5;
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            AIR_HU as f64
        } else {
            v[[r as usize, c as usize]] as f64
        }
    };
    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        let sr = cr + (r as f64 - cr) / factor;
        let sc = cc + (c as f64 - cc) / factor;
        let r0 = sr.floor();
        let c0 = sc.floor();
        let fr = sr - r0;
        let fc = sc - c0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        if fr == 0.0 && fc == 0.0 {
            return at(r0, c0) as f32;
        }
        let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1) * fc;
        let bot = at(r0 + 1, c0) * (1.0 - fc) + at(r0 + 1, c0 + 1) * fc;
        (top * (1.0 - fr) + bot * fr) as f32
    });
    img.with_values(out, format!("{}_shrunk", img.id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(radius: f64, hu: f64) -> PhantomSpec {
        PhantomSpec::new(
            "disk",
            GridSpec::square(128, 0.5),
            PhantomKind::UniformDisk { radius_mm: radius, hu, center_mm: [0.0, 0.0], background_hu: -1000.0 },
        )
    }

    #[test]
    fn uniform_disk_levels() {
        let img = render_phantom(&disk(20.0, 0.0), 0).unwrap();
        for (r, c) in [(64, 64), (60, 70), (40, 64)] {
            assert_eq!(img.values()[[r, c]], 0.0);
        }
        for (r, c) in [(0, 0), (5, 64), (127, 127)] {
            assert_eq!(img.values()[[r, c]], -1000.0);
        }
    }

    #[test]
    fn edge_has_two_levels_off_boundary() {
        let spec = PhantomSpec::new(
            "edge",
            GridSpec::square(64, 0.5),
            PhantomKind::Edge { angle_deg: 3.0, hu_low: 0.0, hu_high: 1000.0, offset_mm: 0.0 },
        );
        let img = render_phantom(&spec, 0).unwrap();
        let (s, c) = 3f64.to_radians().sin_cos();
        for ((r, col), &v) in img.values().indexed_iter() {
            let (y, x) = img.pixel_center(r, col);
            let d = x * c - y * s;
            if d.abs() > 0.75 {
                assert!(v == 0.0 || v == 1000.0, "value {v} at distance {d}");
            }
        }
    }

    #[test]
    fn anatomy_is_deterministic_and_has_uniform_center() {
        let spec = PhantomSpec::new(
            "head",
            GridSpec::square(256, 0.5),
            PhantomKind::AnatomyLike { body_hu: 40.0, bone_hu: 1200.0, laminae: 8, uniform_region_px: 64, extra_shapes: vec![] },
        );
        let a = render_phantom(&spec, 1).unwrap();
        let b = render_phantom(&spec, 1).unwrap();
        assert_eq!(a, b);
        let center = a.values().slice(ndarray::s![96..160, 96..160]);
        assert!(center.iter().all(|&v| v == 40.0));
        assert!(a.values().iter().any(|&v| v >= 1199.0), "laminae present");
        let c = render_phantom(&spec, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn out_of_fov_rejected() {
        assert!(matches!(render_phantom(&disk(40.0, 0.0), 0), Err(Error::Geometry(_))));
        let mut spec = disk(10.0, 0.0);
        spec.object = PhantomKind::AnatomyLike {
            body_hu: 40.0,
            bone_hu: 1200.0,
            laminae: 0,
            uniform_region_px: 64,
            extra_shapes: vec![Shape {
                form: ShapeForm::Ellipse,
                center_mm: [30.0, 0.0],
                half_axes_mm: [5.0, 5.0],
                angle_deg: 0.0,
                hu: 100.0,
            }],
        };
        assert!(render_phantom(&spec, 0).is_err());
    }

    #[test]
    fn shrink_identity_and_errors() {
        let img = render_phantom(&disk(20.0, 300.0), 0).unwrap();
        let same = shrink_phantom(&img, 1.0).unwrap();
        assert_eq!(same.values(), img.values());
        assert!(shrink_phantom(&img, 0.0).is_err());
        assert!(shrink_phantom(&img, -0.5).is_err());
        assert!(shrink_phantom(&img, 1.5).is_err());
    }

    #[test]
    fn shrink_stays_within_input_range() {
        let spec = PhantomSpec::new(
            "head",
            GridSpec::square(128, 0.5),
            PhantomKind::AnatomyLike { body_hu: 40.0, bone_hu: 1200.0, laminae: 6, uniform_region_px: 32, extra_shapes: vec![] },
        );
        let img = render_phantom(&spec, 4).unwrap();
        let lo = img.values().iter().cloned().fold(f32::MAX, f32::min);
        let hi = img.values().iter().cloned().fold(f32::MIN, f32::max);
        let s = shrink_phantom(&img, 0.5).unwrap();
        assert!(s.values().iter().all(|&v| v >= lo - 1.0 && v <= hi + 1.0));
    }
}
