//! `volsynth`: one command-line entry point for the whole pipeline —
//! phantom cohorts, generator training, volume sampling, metrics, nodule
//! editing, and the detection regimes. Every subcommand reads a JSON
//! experiment manifest plus scalar override flags, writes artifacts under
//! the manifest's output directory, logs line-delimited JSON to standard
//! error, and prints human-readable summaries to standard output.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
//! unreadable manifest, missing manifest section).

mod montage;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use volsynth_core::manifest::ExperimentManifest;
use volsynth_core::voldata::Volume;

#[derive(Parser)]
#[command(name = "volsynth", version, about = "volumetric gan pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment manifest (JSON)
    manifest: PathBuf,
    /// Override the manifest's global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the manifest's output directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom training cohort
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Override the cohort size
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the recurrent volume generator on the phantom cohort
    TrainSgan {
        #[command(flatten)]
        common: Common,
        /// Override the training step count
        #[arg(long)]
        steps: Option<usize>,
        /// Override the logging stride
        #[arg(long)]
        log_every: Option<usize>,
    },
    /// Sample volumes from the trained generator checkpoint
    Generate {
        #[command(flatten)]
        common: Common,
        /// Override how many volumes to sample
        #[arg(long)]
        count: Option<usize>,
    },
    /// Score generated volumes against held-out phantoms
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Override the held-out comparison count
        #[arg(long)]
        eval_count: Option<usize>,
        /// Override the number of scored pairings
        #[arg(long)]
        pairings: Option<usize>,
    },
    /// Synthesize a nodule into a volume (trains the voi pair if needed)
    Inject {
        #[command(flatten)]
        common: Common,
        /// Volume file base (path without the .json/.raw extension)
        #[arg(long)]
        volume: PathBuf,
        /// Output file base
        #[arg(long)]
        out: PathBuf,
        /// Nodule center as z,y,x voxel indices
        #[arg(long, value_parser = parse_center)]
        center: [usize; 3],
        /// Nodule radius in voxels
        #[arg(long)]
        radius: f64,
        /// Nodule peak intensity in [0, 1]
        #[arg(long, default_value_t = 0.7)]
        intensity: f64,
    },
    /// Remove the nodule at a given center (trains the voi pair if needed)
    Erase {
        #[command(flatten)]
        common: Common,
        /// Volume file base (path without the .json/.raw extension)
        #[arg(long)]
        volume: PathBuf,
        /// Output file base
        #[arg(long)]
        out: PathBuf,
        /// Nodule center as z,y,x voxel indices
        #[arg(long, value_parser = parse_center)]
        center: [usize; 3],
    },
    /// Build per-size corpora and run the three training regimes
    Detect {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage declared in the manifest, in pipeline order
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Render evenly spaced axial/sagittal/coronal planes to a PNG grid
    Montage {
        /// Volume file base (path without the .json/.raw extension)
        volume: PathBuf,
        /// Output PNG path (defaults next to the volume)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tiles per row (clamped to the volume's smallest dimension)
        #[arg(long, default_value_t = montage::DEFAULT_TILES)]
        tiles: usize,
    },
}

fn parse_center(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected z,y,x".to_string());
    }
    let mut c = [0usize; 3];
    for (slot, p) in c.iter_mut().zip(&parts) {
        *slot = p.trim().parse().map_err(|e| format!("bad coordinate {p:?}: {e}"))?;
    }
    Ok(c)
}

/// Failures carry their exit code: usage errors (2) cover everything
/// wrong with the invocation or the manifest itself; runtime errors (1)
/// cover everything that goes wrong while executing a valid request.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Runtime(_) => "runtime",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => format!("{e:#}"),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

/// Load the manifest and apply the overrides shared by every subcommand.
fn load(common: &Common) -> Result<ExperimentManifest, Failure> {
    let mut m = ExperimentManifest::load(&common.manifest).map_err(usage)?;
    if let Some(s) = common.seed {
        m.seed = s;
    }
    if let Some(d) = &common.output_dir {
        m.output_dir = d.clone();
    }
    Ok(m)
}

/// Fail as a usage error when a required section is absent; the message
/// names the section.
fn require<T>(section: volsynth_core::Result<&T>) -> Result<(), Failure> {
    section.map(|_| ()).map_err(usage)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Phantom { common, count } => {
            let mut m = load(&common)?;
            require(m.phantom())?;
            if let Some(c) = count {
                m.phantom.as_mut().expect("checked").count = c;
            }
            stages::run_phantom(&m).map_err(runtime)
        }
        Cmd::TrainSgan { common, steps, log_every } => {
            let mut m = load(&common)?;
            require(m.sgan_train())?;
            let st = m.sgan_train.as_mut().expect("checked");
            if let Some(s) = steps {
                st.train.steps = s;
            }
            if let Some(l) = log_every {
                st.log_every = l;
            }
            stages::run_train_sgan(&m).map_err(runtime)
        }
        Cmd::Generate { common, count } => {
            let mut m = load(&common)?;
            require(m.generate())?;
            if let Some(c) = count {
                m.generate.as_mut().expect("checked").count = c;
            }
            stages::run_generate(&m).map_err(runtime)
        }
        Cmd::Metrics { common, eval_count, pairings } => {
            let mut m = load(&common)?;
            require(m.metrics())?;
            require(m.phantom())?;
            let st = m.metrics.as_mut().expect("checked");
            if let Some(n) = eval_count {
                st.eval_count = n;
            }
            if let Some(p) = pairings {
                st.pairings = p;
            }
            stages::run_metrics(&m).map_err(runtime)
        }
        Cmd::Inject { common, volume, out, center, radius, intensity } => {
            let m = load(&common)?;
            require(m.nodulesim())?;
            stages::run_inject(&m, &volume, &out, center, radius, intensity).map_err(runtime)
        }
        Cmd::Erase { common, volume, out, center } => {
            let m = load(&common)?;
            require(m.nodulesim())?;
            stages::run_erase(&m, &volume, &out, center).map_err(runtime)
        }
        Cmd::Detect { common } => {
            let m = load(&common)?;
            require(m.detect())?;
            require(m.nodulesim())?;
            require(m.phantom())?;
            stages::run_detect(&m).map_err(runtime)
        }
        Cmd::Experiment { common } => {
            let m = load(&common)?;
            let declared = [
                m.phantom.is_some(),
                m.sgan_train.is_some(),
                m.generate.is_some(),
                m.metrics.is_some(),
                m.nodulesim.is_some(),
                m.detect.is_some(),
            ];
            if !declared.iter().any(|&p| p) {
                return Err(usage(anyhow!("manifest declares no stages")));
            }
            stages::run_experiment(&m).map_err(runtime)
        }
        Cmd::Montage { volume, out, tiles } => {
            if tiles == 0 {
                return Err(usage(anyhow!("--tiles must be positive")));
            }
            let v = Volume::load(&volume).map_err(|e| {
                runtime(anyhow::Error::new(e).context(format!(
                    "cannot read volume {}",
                    volume.display()
                )))
            })?;
            let out = out.unwrap_or_else(|| {
                let mut name = volume.file_name().unwrap_or_default().to_os_string();
                name.push("-montage.png");
                volume.with_file_name(name)
            });
            montage::write_montage(&v.data, tiles, &out).map_err(runtime)?;
            stages::emit(
                "montage",
                json!({"volume": v.id, "tiles": tiles, "out": out.display().to_string()}),
            );
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            stages::emit("error", json!({"kind": f.kind(), "message": f.message()}));
            ExitCode::from(f.code())
        }
    }
}
