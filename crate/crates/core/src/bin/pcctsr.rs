use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcct_sr::diffusion::ConditioningScheme;
use pcct_sr::eval::Roi;
use pcct_sr::run::{self, DenoiserTarget, Layout, RunConfig};
use pcct_sr::Error;

/// Photon-counting CT super-resolution pipeline.
///
/// Any `--section.key value` flag overrides the matching config entry,
/// e.g. `--diffusion.T 200`.
#[derive(Parser)]
#[command(name = "pcctsr", version)]
struct Cli {
    /// JSON run config.
    #[arg(long, global = true, default_value = "configs/toy.json")]
    config: PathBuf,
    /// Global seed; replaces `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; beats PCCTSR_OUT and `output_root`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Lr,
    Hr,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Scheme {
    Plain,
    NoiseSplit,
    DenoiseOnly,
}

impl From<Scheme> for ConditioningScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Plain => ConditioningScheme::Plain,
            Scheme::NoiseSplit => ConditioningScheme::NoiseSplit,
            Scheme::DenoiseOnly => ConditioningScheme::DenoiseOnly,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the configured phantoms.
    Phantom,
    /// Write LR and HR sinograms for every phantom.
    Simulate,
    /// Build the aligned sample groups and split manifest.
    Dataset,
    /// Train the LR (self-supervised) or HR (supervised) denoiser.
    DenoiseTrain {
        #[arg(long, value_enum, default_value = "lr")]
        target: Target,
    },
    /// Add denoised LR images and noise maps to every group.
    DenoiseApply,
    /// Train the diffusion model; all configured schemes unless given.
    DdpmTrain {
        #[arg(long, value_enum)]
        scheme: Vec<Scheme>,
    },
    /// Sample held-out groups with trained diffusion models.
    DdpmSample {
        #[arg(long, value_enum)]
        scheme: Vec<Scheme>,
        /// Respaced chain length.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long)]
        group: Option<String>,
    },
    /// Edge MTF of an image.
    EvalMtf {
        #[arg(long)]
        image: PathBuf,
    },
    /// Noise PSD of a region of an image.
    EvalPsd {
        #[arg(long)]
        image: PathBuf,
        /// `row,col,height,width` in pixels; defaults to eval.uniform_roi.
        #[arg(long)]
        roi: Option<String>,
    },
    /// MTF/PSD/metric comparison of all schemes on held-out groups.
    EvalCompare,
    /// All stages end to end.
    Pipeline,
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(flag) if flag.contains('.') && !flag.starts_with('.') => {
                if let Some((k, v)) = flag.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = it.next().ok_or_else(|| Error::Config(format!("override --{flag} needs a value")))?;
                    overrides.push((flag.to_string(), v));
                }
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn parse_roi(s: &str) -> Result<Roi, Error> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("--roi expects row,col,height,width, got `{s}`")))?;
    match v[..] {
        [row, col, height, width] => Ok(Roi { row, col, height, width }),
        _ => Err(Error::Config(format!("--roi expects four integers, got `{s}`"))),
    }
}

fn schemes(given: &[Scheme], cfg: &RunConfig) -> Vec<ConditioningScheme> {
    if given.is_empty() {
        cfg.diffusion.schemes.clone()
    } else {
        given.iter().map(|&s| s.into()).collect()
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingStage { .. } => 3,
        Error::Numerical(_) | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn execute(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Error> {
    let mut overrides = overrides;
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    let out = Layout::new(run::output_root(&cfg, cli.out.as_deref()));
    match cli.cmd {
        Cmd::Phantom => {
            let files = run::stage_phantom(&cfg, &out)?;
            println!("wrote {} phantoms under {}", files.len(), out.phantoms().display());
        }
        Cmd::Simulate => {
            let files = run::stage_simulate(&cfg, &out)?;
            println!("wrote {} sinograms under {}", files.len(), out.sinograms().display());
        }
        Cmd::Dataset => {
            let m = run::stage_dataset(&cfg, &out)?;
            println!(
                "dataset: {} train, {} validation, {} test groups in {}",
                m.train.len(),
                m.validation.len(),
                m.test.len(),
                out.dataset().display()
            );
        }
        Cmd::DenoiseTrain { target } => {
            let t = match target {
                Target::Lr => DenoiserTarget::Lr,
                Target::Hr => DenoiserTarget::Hr,
            };
            let h = run::stage_denoise_train(&cfg, &out, t)?;
            println!("{} denoiser: final loss {:.6}", t.name(), h.last().copied().unwrap_or(f64::NAN));
        }
        Cmd::DenoiseApply => {
            let n = run::stage_denoise_apply(&cfg, &out)?;
            println!("denoised {n} groups");
        }
        Cmd::DdpmTrain { scheme } => {
            for (name, h) in run::stage_ddpm_train(&cfg, &out, &schemes(&scheme, &cfg))? {
                println!("{name}: final loss {:.6}", h.last().copied().unwrap_or(f64::NAN));
            }
        }
        Cmd::DdpmSample { scheme, steps, sample_seed, group } => {
            let files = run::stage_ddpm_sample(&cfg, &out, &schemes(&scheme, &cfg), steps, sample_seed, group.as_deref())?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Cmd::EvalMtf { image } => println!("{}", run::stage_eval_mtf(&cfg, &out, &image)?.display()),
        Cmd::EvalPsd { image, roi } => {
            let roi = roi.as_deref().map(parse_roi).transpose()?;
            println!("{}", run::stage_eval_psd(&cfg, &out, &image, roi)?.display());
        }
        Cmd::EvalCompare => {
            for d in run::stage_eval_compare(&cfg, &out)? {
                println!("{}", d.join("report.json").display());
            }
        }
        Cmd::Pipeline => {
            run::run_pipeline(&cfg, &out)?;
            println!("pipeline complete: {}", out.root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match execute(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
