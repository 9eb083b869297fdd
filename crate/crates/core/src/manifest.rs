//! Experiment manifests: one JSON document that declares every pipeline
//! stage, the global seed, and the output directory. A stage re-run from
//! the same manifest reproduces its artifacts byte-for-byte.
//!
//! Fixed layout under `output_dir`: `phantoms/`, `sgan/` (checkpoint),
//! `generated/`, `metrics/`, `nodulesim/` (injector and eraser weights),
//! and `detect/` (per-size corpora plus reports).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::RegimeConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::FeatExConfig;
use crate::losses::TrainConfig;
use crate::nodulesim::{NoduleDists, VoiGanTrainConfig, VOI_EDGE};
use crate::sgan::SganConfig;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomStage {
    /// Cohort size; domains alternate volume by volume.
    pub count: usize,
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SganTrainStage {
    pub model: SganConfig,
    pub train: TrainConfig,
    /// Log every n-th step; 1 logs all.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateStage {
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsStage {
    pub extractor: FeatExConfig,
    pub extractor_steps: usize,
    pub extractor_batch: usize,
    /// Held-out phantoms to compare against, drawn past the training pool.
    pub eval_count: usize,
    pub pairings: usize,
    pub subset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodulesimStage {
    pub edge: usize,
    pub base: usize,
    pub dists: NoduleDists,
    pub train: VoiGanTrainConfig,
    pub examples_per_volume: usize,
    /// Phantoms drawn from the cohort to cut training VOIs from.
    pub example_volumes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectStage {
    pub regime: RegimeConfig,
    pub sizes: Vec<f64>,
    /// Clean pool sizes; the real pool comes from fresh phantoms, the
    /// synthetic pool from the generate stage's volumes.
    pub real_count: usize,
    pub synthetic_count: usize,
    pub ratios: [f64; 3],
    pub count_probs: Vec<f64>,
    pub intensity_range: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub format_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomStage>,
    #[serde(rename = "sgan-train", default, skip_serializing_if = "Option::is_none")]
    pub sgan_train: Option<SganTrainStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodulesim: Option<NodulesimStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detect: Option<DetectStage>,
}

fn missing(section: &str) -> Error {
    Error::Config(format!("manifest is missing the \"{section}\" section"))
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<ExperimentManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: ExperimentManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid manifest {}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest format_version {} (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn phantom(&self) -> Result<&PhantomStage> {
        self.phantom.as_ref().ok_or_else(|| missing("phantom"))
    }

    pub fn sgan_train(&self) -> Result<&SganTrainStage> {
        self.sgan_train.as_ref().ok_or_else(|| missing("sgan-train"))
    }

    pub fn generate(&self) -> Result<&GenerateStage> {
        self.generate.as_ref().ok_or_else(|| missing("generate"))
    }

    pub fn metrics(&self) -> Result<&MetricsStage> {
        self.metrics.as_ref().ok_or_else(|| missing("metrics"))
    }

    pub fn nodulesim(&self) -> Result<&NodulesimStage> {
        self.nodulesim.as_ref().ok_or_else(|| missing("nodulesim"))
    }

    pub fn detect(&self) -> Result<&DetectStage> {
        self.detect.as_ref().ok_or_else(|| missing("detect"))
    }

    // stage artifact locations, all under the output directory
    pub fn phantoms_dir(&self) -> PathBuf {
        self.output_dir.join("phantoms")
    }

    pub fn sgan_dir(&self) -> PathBuf {
        self.output_dir.join("sgan")
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.output_dir.join("generated")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.output_dir.join("metrics")
    }

    pub fn nodulesim_dir(&self) -> PathBuf {
        self.output_dir.join("nodulesim")
    }

    pub fn detect_dir(&self) -> PathBuf {
        self.output_dir.join("detect")
    }

    /// Desk-scale configuration: every stage priced for a workstation CPU.
    pub fn desk(output_dir: PathBuf) -> ExperimentManifest {
        ExperimentManifest {
            format_version: MANIFEST_VERSION,
            seed: 0,
            output_dir,
            phantom: Some(PhantomStage { count: 200, dims: [32, 32, 32] }),
            sgan_train: Some(SganTrainStage {
                model: SganConfig::desk(),
                train: TrainConfig::desk(),
                log_every: 10,
            }),
            generate: Some(GenerateStage { count: 50 }),
            metrics: Some(MetricsStage {
                extractor: FeatExConfig::desk(),
                extractor_steps: 240,
                extractor_batch: 16,
                eval_count: 50,
                pairings: 4,
                subset: 25,
            }),
            nodulesim: Some(NodulesimStage {
                edge: VOI_EDGE,
                base: 8,
                dists: NoduleDists::desk(),
                train: VoiGanTrainConfig::desk(),
                examples_per_volume: 4,
                example_volumes: 12,
            }),
            detect: Some(DetectStage {
                regime: RegimeConfig::desk(),
                sizes: crate::detect::DEFAULT_SWEEP_SIZES.to_vec(),
                real_count: 32,
                synthetic_count: 48,
                ratios: [0.5, 0.25, 0.25],
                count_probs: vec![0.0, 0.7, 0.3],
                intensity_range: [0.5, 0.8],
            }),
        }
    }

    /// Full-scale configuration mirroring the reference geometry
    /// (224-plane volumes, 16-plane slabs); compute-priced for a GPU
    /// cluster, kept here as the scaling recipe.
    pub fn full(output_dir: PathBuf) -> ExperimentManifest {
        let mut m = ExperimentManifest::desk(output_dir);
        m.phantom = Some(PhantomStage { count: 900, dims: [224, 224, 224] });
        m.sgan_train = Some(SganTrainStage {
            model: SganConfig {
                depth: 224,
                out_hw: 224,
                slab_t: 16,
                slices_per_step: 8,
                latent: crate::latent::LatentConfig {
                    d_patient: 512,
                    d_eps: 512,
                    hidden: 512,
                    d_slice: 512,
                },
                gen_base_hw: 7,
                gen_channels: vec![512, 256, 128, 64, 32],
                dslice_channels: vec![32, 64, 128, 256, 512],
                dslab_channels: vec![32, 64, 128, 256],
            },
            train: TrainConfig { steps: 100_000, batch: 4, ..TrainConfig::desk() },
            log_every: 100,
        });
        m.generate = Some(GenerateStage { count: 10_000 });
        m
    }
}
