//! Every stage on the toy config with short training, into a temp or
//! given directory.
//!
//! cargo run --release --example pipeline -- [out_dir]

use std::path::{Path, PathBuf};

use pcct_sr::run::{run_pipeline, Layout, RunConfig};

fn main() -> pcct_sr::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("pcctsr-pipeline"));
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let overrides: Vec<(String, String)> =
        [("denoiser.train.iterations", "40"), ("diffusion.train.iterations", "40"), ("diffusion.sampler.steps_override", "20")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
    let cfg = RunConfig::load(&config, &overrides)?;
    let layout = Layout::new(&out);
    run_pipeline(&cfg, &layout)?;
    for entry in std::fs::read_dir(layout.eval().join("compare"))? {
        let report = entry?.path().join("report.json");
        if report.exists() {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report)?)?;
            println!("{}", report.display());
            for row in v["rows"].as_array().into_iter().flatten() {
                println!(
                    "  {:13} PSNR {:>7} dB  low-freq fraction {:.3}",
                    row["name"].as_str().unwrap_or("?"),
                    row["metrics"]["psnr_db"].as_f64().map_or_else(|| row["metrics"]["psnr_db"].to_string(), |p| format!("{p:.2}")),
                    row["low_freq_fraction"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}
