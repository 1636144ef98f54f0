//! `dwisim`: simulate EPI DWI acquisitions, train and apply the residual
//! denoiser, and evaluate it against NEX averaging.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dwisim::denoiser::{denoise, denoise_complex, load_model, save_model};
use dwisim::experiment::{
    generate_dataset, reconstruct_with_table, run_analyses, run_experiment, simulate_acquisitions, train_denoiser,
    write_report, Dataset, ExperimentConfig,
};
use dwisim::fieldio::{read_field, write_field, DType, FieldData};
use dwisim::plot::{auto_window, export_plot, write_grayscale_png, HorizontalLine};
use dwisim::{modulus, Error, ErrorClass, RealSlice, Result};

#[derive(Parser, Debug)]
#[command(name = "dwisim", version, about = "EPI DWI simulation, residual CNN denoising and NEX-averaging evaluation")]
struct Cli {
    /// JSON experiment configuration (defaults are used for missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 runs everything sequentially, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training set (noise-free slices, noise maps, manifest).
    DatasetGen,
    /// Simulate acquisitions of the test slices at every configured SNR.
    Simulate,
    /// Reconstruct a k-space field, optionally with a per-row ghost correction table.
    Reconstruct {
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        correction: Option<PathBuf>,
    },
    /// Train the denoiser on a saved dataset, or on a freshly generated one.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Denoise a real or complex field.
    Denoise {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        input: PathBuf,
    },
    /// Averaging curves, denoising, NEX equivalence and analyses.
    Evaluate {
        #[command(flatten)]
        model: ModelArg,
    },
    /// Residual-bias and multicoil analyses only.
    Analyze {
        #[command(flatten)]
        model: ModelArg,
    },
    /// Plot `nex,value` curve CSVs.
    Plot {
        /// `label=path.csv`, repeatable.
        #[arg(long = "curve", required = true)]
        curves: Vec<String>,
        /// `label=value` horizontal reference line, repeatable.
        #[arg(long = "line")]
        lines: Vec<String>,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long, default_value = "value")]
        y_label: String,
        #[arg(long, default_value = "plot.png")]
        name: String,
    },
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Model stem (`<stem>.json` + `<stem>.bin`); falls back to the config's `model`.
    #[arg(long)]
    model: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_path(arg: &ModelArg, cfg: &ExperimentConfig) -> Result<PathBuf> {
    arg.model
        .clone()
        .or_else(|| cfg.model.clone())
        .ok_or_else(|| Error::Config("no model given (use --model or set `model` in the config)".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn preview(path: &Path, slice: &RealSlice) -> Result<()> {
    let (lo, hi) = auto_window(slice);
    write_grayscale_png(path, slice, lo, hi.max(lo + 1e-12))
}

fn split_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').ok_or_else(|| Error::Config(format!("expected label=value, got `{s}`")))
}

fn run(cli: &Cli) -> Result<()> {
    dwisim::par::configure_threads(cli.threads)?;
    let out = &cli.out;
    match &cli.command {
        Command::Plot { curves, lines, title, y_label, name } => {
            let curves = curves
                .iter()
                .map(|c| split_pair(c).map(|(l, p)| (l.to_string(), PathBuf::from(p))))
                .collect::<Result<Vec<_>>>()?;
            let lines = lines
                .iter()
                .map(|l| {
                    let (label, v) = split_pair(l)?;
                    let value = v.parse().map_err(|_| Error::Config(format!("bad line value `{v}`")))?;
                    Ok(HorizontalLine { label: label.to_string(), value })
                })
                .collect::<Result<Vec<_>>>()?;
            create_dir(out)?;
            let refs: Vec<(&str, &Path)> = curves.iter().map(|(l, p)| (l.as_str(), p.as_path())).collect();
            export_plot(&refs, &lines, title, y_label, &out.join(name))
        }
        Command::Reconstruct { kspace, correction } => {
            let cfg = load_config(cli)?;
            let k = read_field(kspace)?;
            let k = match k {
                FieldData::Complex(v) if v.depth() == 1 => v.into_slices().remove(0),
                _ => return Err(Error::Format(format!("{} is not a single complex slice", kspace.display()))),
            };
            let table = match correction {
                Some(p) => match read_field(p)? {
                    FieldData::Real(v) if v.depth() == 1 => v.into_slices().remove(0),
                    _ => return Err(Error::Format(format!("{} is not a single real slice", p.display()))),
                },
                None => RealSlice::zeros(k.width(), k.height()),
            };
            let image = reconstruct_with_table(&cfg, &k, &table)?;
            create_dir(out)?;
            write_field(&out.join("image"), &FieldData::complex_slice(image.clone()), DType::C128)?;
            preview(&out.join("image.png"), &modulus(&image))
        }
        Command::Denoise { model, input } => {
            let cfg = load_config(cli)?;
            let m = load_model(&model_path(model, &cfg)?)?;
            create_dir(out)?;
            match read_field(input)? {
                FieldData::Real(v) if v.depth() == 1 => {
                    let d = denoise(&m, &v.into_slices()[0])?;
                    write_field(&out.join("denoised"), &FieldData::real_slice(d.denoised.clone()), DType::F64)?;
                    write_field(&out.join("noise_estimate"), &FieldData::real_slice(d.noise_estimate), DType::F64)?;
                    preview(&out.join("denoised.png"), &d.denoised)
                }
                FieldData::Complex(v) if v.depth() == 1 => {
                    let d = denoise_complex(&m, &v.into_slices()[0])?;
                    write_field(&out.join("denoised"), &FieldData::complex_slice(d.denoised.clone()), DType::C128)?;
                    write_field(&out.join("noise_estimate"), &FieldData::complex_slice(d.noise_estimate), DType::C128)?;
                    preview(&out.join("denoised.png"), &modulus(&d.denoised))
                }
                _ => Err(Error::Format(format!("{} must hold a single slice", input.display()))),
            }
        }
        Command::DatasetGen => {
            let cfg = load_config(cli)?;
            let ds = generate_dataset(&cfg)?;
            ds.save(out)?;
            log::info!("{} train / {} validation examples written to {}", ds.manifest.n_train, ds.manifest.n_val, out.display());
            Ok(())
        }
        Command::Simulate => {
            let cfg = load_config(cli)?;
            create_dir(out)?;
            for s in simulate_acquisitions(&cfg)? {
                let stem = format!("slice{}_snr{}", s.slice_index, s.snr);
                write_field(&out.join(format!("{stem}_kspace")), &FieldData::complex_slice(s.kspace), DType::C128)?;
                write_field(&out.join(format!("{stem}_correction")), &FieldData::real_slice(s.correction), DType::F64)?;
                write_field(&out.join(format!("{stem}_reference")), &FieldData::real_slice(s.reference.clone()), DType::F64)?;
                preview(&out.join(format!("{stem}_reference.png")), &s.reference)?;
            }
            Ok(())
        }
        Command::Train { dataset } => {
            let cfg = load_config(cli)?;
            let ds = match dataset.as_ref().or(cfg.dataset.as_ref()) {
                Some(dir) => Dataset::load(dir)?,
                None => generate_dataset(&cfg)?,
            };
            let (model, history) = train_denoiser(&cfg, &ds)?;
            create_dir(out)?;
            save_model(&model, &out.join("model"))?;
            history.write_csv(&out.join("training_history.csv"))?;
            log::info!("best validation loss {:.6e} at epoch {}", history.best_val_loss(), history.best_epoch);
            Ok(())
        }
        Command::Evaluate { model } => {
            let cfg = load_config(cli)?;
            let m = load_model(&model_path(model, &cfg)?)?;
            let report = run_experiment(&cfg, &m)?;
            write_report(&report, out)?;
            write_json(&out.join("config.json"), &cfg)
        }
        Command::Analyze { model } => {
            let cfg = load_config(cli)?;
            let m = load_model(&model_path(model, &cfg)?)?;
            let report = run_analyses(&cfg, &m)?;
            write_report(&report, out)
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Configuration => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
