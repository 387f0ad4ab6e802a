//! Renders the built-in phantoms, shrinks them, and writes raw images.
//!
//! cargo run --example phantom -- [out_dir]

use std::path::PathBuf;

use pcct_sr::imaging::{save_grid, GridSpec};
use pcct_sr::phantom::{render_phantom, shrink_phantom, PhantomKind, PhantomSpec};

fn main() -> pcct_sr::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("pcctsr-phantoms"));
    let grid = GridSpec::square(256, 0.5);
    let specs = [
        PhantomSpec::new(
            "anatomy",
            grid.clone(),
            PhantomKind::AnatomyLike { body_hu: 40.0, bone_hu: 1200.0, laminae: 8, uniform_region_px: 96, extra_shapes: vec![] },
        ),
        PhantomSpec::new("edge", grid.clone(), PhantomKind::Edge { angle_deg: 5.0, hu_low: 40.0, hu_high: 1000.0, offset_mm: 0.0 }),
        PhantomSpec::new(
            "bars",
            grid,
            PhantomKind::BarPattern {
                frequency_lp_per_mm: 0.4,
                hu_low: 0.0,
                hu_high: 1000.0,
                half_extent_mm: 30.0,
                background_hu: -1000.0,
            },
        ),
    ];
    for spec in &specs {
        let img = render_phantom(spec, 7)?;
        let small = shrink_phantom(&img, 0.5)?;
        let v = img.values();
        let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        println!("{:8} {:?} HU range [{lo:.0}, {hi:.0}]", spec.name, img.shape());
        save_grid(&img, &out.join(format!("{}.raw", spec.name)))?;
        save_grid(&small, &out.join(format!("{}_shrunk.raw", spec.name)))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
