//! Stage runners behind the subcommands. Every runner reads its inputs
//! from the manifest's fixed artifact layout, writes its outputs back
//! into it, and logs line-delimited JSON records to standard error, so a
//! stage re-run from the same manifest reproduces its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use serde_json::json;

use volsynth_core::detect::{sweep_nodule_sizes, SweepInputs};
use volsynth_core::evalmetrics::{metric_report, train_extractor, MetricReport};
use volsynth_core::losses::train_sgan;
use volsynth_core::manifest::ExperimentManifest;
use volsynth_core::nodulesim::{
    erase_nodule, init_nodule_gans, inject_nodule, load_nodule_gans, make_voi_examples,
    save_nodule_gans, train_nodule_gans, voi_candidates, NoduleGans, NoduleSpec,
};
use volsynth_core::sgan::{generate_volume, init_model, load_checkpoint, save_checkpoint};
use volsynth_core::voldata::{
    estimate_lung_mask, generate_cohort, generate_phantom, NoiseDomain, PhantomConfig, Volume,
};

use crate::montage;

/// Minimum voi placement candidates before a volume joins a nodule
/// corpus; volumes whose lung-mask estimate leaves no room are rejected.
pub const MIN_VOI_CANDIDATES: usize = 8;

/// Seed offset separating the detection stage's fresh phantom pool from
/// the training cohort's seed range.
const DETECT_POOL_SEED_OFFSET: u64 = 100_000;

#[derive(Serialize)]
struct Line<'a, T: Serialize> {
    event: &'a str,
    #[serde(flatten)]
    body: T,
}

/// One line-delimited JSON log record on standard error.
pub fn emit(event: &str, body: impl Serialize) {
    match serde_json::to_string(&Line { event, body }) {
        Ok(s) => eprintln!("{s}"),
        Err(_) => eprintln!("{{\"event\":{event:?}}}"),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Sorted file bases (paths without extension) of the volumes in `dir`.
fn volume_bases(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).with_context(|| format!("no volume directory {}", dir.display()))?;
    let mut bases: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "json") {
            bases.push(p.with_extension(""));
        }
    }
    bases.sort();
    Ok(bases)
}

/// All volumes under `dir`, ordered by file name.
fn load_volumes(dir: &Path) -> Result<Vec<Volume>> {
    let bases = volume_bases(dir)?;
    if bases.is_empty() {
        bail!("no volumes under {}", dir.display());
    }
    bases.iter().map(|b| Ok(Volume::load(b)?)).collect()
}

pub fn run_phantom(m: &ExperimentManifest) -> Result<()> {
    let st = m.phantom()?;
    let t0 = Instant::now();
    let cohort = generate_cohort(st.count, m.seed, (st.dims[0], st.dims[1], st.dims[2]));
    let dir = m.phantoms_dir();
    fs::create_dir_all(&dir)?;
    for p in &cohort {
        p.volume.save(&dir.join(&p.volume.id))?;
    }
    emit(
        "phantoms",
        json!({
            "count": cohort.len(),
            "dims": st.dims,
            "dir": dir.display().to_string(),
            "wall_ms": t0.elapsed().as_millis() as u64,
        }),
    );
    println!("wrote {} phantoms under {}", cohort.len(), dir.display());
    Ok(())
}

pub fn run_train_sgan(m: &ExperimentManifest) -> Result<()> {
    let st = m.sgan_train()?;
    st.model.validate()?;
    let data: Vec<Array3<f32>> = load_volumes(&m.phantoms_dir())
        .context("training volumes missing; run the phantom stage first")?
        .into_iter()
        .map(|v| v.data)
        .collect();
    let mut state = init_model(&st.model, m.seed);
    let (mut opt_d, mut opt_g) = st.train.optimizers();
    let every = st.log_every.max(1);
    let last = st.train.steps.saturating_sub(1);
    train_sgan(&mut state, &data, &st.train, &mut opt_d, &mut opt_g, |r| {
        if r.step % every == 0 || r.step == last {
            emit(
                "train-step",
                json!({
                    "net": "sgan",
                    "step": r.step,
                    "d_loss": r.d_loss,
                    "g_loss": r.g_loss,
                    "gp": r.gp,
                    "wall_ms": r.wall_ms as u64,
                }),
            );
        }
    })?;
    let dir = m.sgan_dir();
    save_checkpoint(&state, st.train.steps as u64, &dir, Some((&opt_d, &opt_g)))?;
    println!(
        "checkpoint after {} steps saved to {}",
        st.train.steps,
        dir.display()
    );
    Ok(())
}

pub fn run_generate(m: &ExperimentManifest) -> Result<()> {
    let st = m.generate()?;
    let ckpt = load_checkpoint(&m.sgan_dir())
        .context("no generator checkpoint; run the sgan-train stage first")?;
    let dir = m.generated_dir();
    fs::create_dir_all(&dir)?;
    for i in 0..st.count {
        let t0 = Instant::now();
        let seed = m.seed.wrapping_add(i as u64);
        let v = generate_volume(&ckpt.state, seed);
        v.save(&dir.join(&v.id))?;
        emit(
            "generated",
            json!({"id": v.id, "seed": seed, "wall_ms": t0.elapsed().as_millis() as u64}),
        );
    }
    println!("wrote {} volumes under {}", st.count, dir.display());
    Ok(())
}

pub fn run_metrics(m: &ExperimentManifest) -> Result<()> {
    let st = m.metrics()?;
    let ph = m.phantom()?;
    let dims = (ph.dims[0], ph.dims[1], ph.dims[2]);
    // the extractor trains on the same cohort the generator saw; the
    // comparison set continues the seed sequence past it, so it is held out
    let t0 = Instant::now();
    let cohort = generate_cohort(ph.count, m.seed, dims);
    let (fx, acc) = train_extractor(
        &cohort,
        &st.extractor,
        st.extractor_steps,
        st.extractor_batch,
        m.seed,
    )?;
    emit(
        "extractor",
        json!({"holdout_accuracy": acc, "wall_ms": t0.elapsed().as_millis() as u64}),
    );
    let held_out: Vec<Array3<f32>> =
        generate_cohort(st.eval_count, m.seed.wrapping_add(ph.count as u64), dims)
            .into_iter()
            .map(|p| p.volume.data)
            .collect();
    let fake: Vec<Array3<f32>> = load_volumes(&m.generated_dir())
        .context("no generated volumes; run the generate stage first")?
        .into_iter()
        .map(|v| v.data)
        .collect();
    let report = metric_report(&fx, &held_out, &fake, st.pairings, st.subset, m.seed)?;
    let dir = m.metrics_dir();
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("metrics.json"), &report)?;
    emit("metrics", &report);
    print!("{}", metrics_table(&report, acc));
    Ok(())
}

fn metrics_table(r: &MetricReport, extractor_acc: f64) -> String {
    let mut s = String::new();
    s += &format!("{:<18} {:>10} {:>10}\n", "metric", "mean", "std");
    s += &format!("{:<18} {:>10.4} {:>10.4}\n", "slice fid", r.fid_mean, r.fid_std);
    s += &format!("{:<18} {:>10.4} {:>10.4}\n", "inception score", r.is_mean, r.is_std);
    s += &format!(
        "extractor holdout accuracy {extractor_acc:.4} (protocol: {})\n",
        r.protocol
    );
    s
}

/// Load the nodule injector/eraser pair, training and saving it first if
/// the manifest's output layout does not hold one yet.
pub fn ensure_nodule_gans(m: &ExperimentManifest) -> Result<NoduleGans> {
    let st = m.nodulesim()?;
    let dir = m.nodulesim_dir().join("gans");
    if dir.join("config.json").is_file() {
        let gans = load_nodule_gans(&dir)?;
        emit("nodulesim", json!({"status": "loaded", "dir": dir.display().to_string()}));
        return Ok(gans);
    }
    st.dists.validate()?;
    let vols = load_volumes(&m.phantoms_dir())
        .context("voi training volumes missing; run the phantom stage first")?;
    let total = vols.len();
    // corpus qc: keep phantoms whose estimated lung leaves placement room
    let mut volumes = Vec::new();
    let mut masks = Vec::new();
    for v in vols {
        let mask = estimate_lung_mask(&v.data);
        if voi_candidates(&mask, st.edge).len() >= MIN_VOI_CANDIDATES {
            volumes.push(v.data);
            masks.push(mask);
            if volumes.len() == st.example_volumes {
                break;
            }
        }
    }
    if volumes.len() < st.example_volumes {
        bail!(
            "only {} of {total} phantoms pass lung-mask qc (need {})",
            volumes.len(),
            st.example_volumes
        );
    }
    let mut rng = ChaCha12Rng::seed_from_u64(m.seed);
    let examples =
        make_voi_examples(&volumes, &masks, &st.dists, st.examples_per_volume, st.edge, &mut rng)?;
    let mut gans = init_nodule_gans(st.edge, st.base, m.seed)?;
    train_nodule_gans(&mut gans, &examples, &st.train, |net, r| {
        emit(
            "train-step",
            json!({
                "net": net,
                "step": r.step,
                "d_loss": r.d_loss,
                "g_loss": r.g_loss,
                "gp": r.gp,
                "wall_ms": r.wall_ms as u64,
            }),
        );
    })?;
    save_nodule_gans(&gans, &dir)?;
    emit(
        "nodulesim",
        json!({
            "status": "trained",
            "examples": examples.len(),
            "dir": dir.display().to_string(),
        }),
    );
    Ok(gans)
}

/// Experiment-stage wrapper: train (or reuse) the voi pair.
pub fn run_nodulesim(m: &ExperimentManifest) -> Result<()> {
    ensure_nodule_gans(m).map(|_| ())
}

pub fn run_inject(
    m: &ExperimentManifest,
    volume: &Path,
    out: &Path,
    center: [usize; 3],
    radius: f64,
    intensity: f64,
) -> Result<()> {
    let gans = ensure_nodule_gans(m)?;
    let v = Volume::load(volume)
        .with_context(|| format!("cannot read volume {}", volume.display()))?;
    let mask = estimate_lung_mask(&v.data);
    let spec = NoduleSpec { center, radius_vox: radius, intensity };
    let edited = inject_nodule(&gans, &v, &spec, &mask, m.seed)?;
    save_edited(&edited, out)?;
    emit(
        "inject",
        json!({
            "center": center,
            "radius": radius,
            "intensity": intensity,
            "provenance": edited.provenance,
            "out": out.display().to_string(),
        }),
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run_erase(
    m: &ExperimentManifest,
    volume: &Path,
    out: &Path,
    center: [usize; 3],
) -> Result<()> {
    let gans = ensure_nodule_gans(m)?;
    let v = Volume::load(volume)
        .with_context(|| format!("cannot read volume {}", volume.display()))?;
    let spec = NoduleSpec { center, radius_vox: 0.0, intensity: 0.0 };
    let edited = erase_nodule(&gans, &v, &spec, m.seed)?;
    save_edited(&edited, out)?;
    emit(
        "erase",
        json!({
            "center": center,
            "provenance": edited.provenance,
            "out": out.display().to_string(),
        }),
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn save_edited(v: &Volume, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(v.save(out)?)
}

pub fn run_detect(m: &ExperimentManifest) -> Result<()> {
    let st = m.detect()?;
    let ns = m.nodulesim()?;
    let ph = m.phantom()?;
    let gans = ensure_nodule_gans(m)?;

    // fresh clean phantoms for the real corpora, seeded past the cohort
    // range; the same qc gate filters both pools
    let mut real: Vec<Volume> = Vec::new();
    let mut attempts = 0usize;
    while real.len() < st.real_count {
        if attempts >= st.real_count * 4 + 16 {
            bail!(
                "phantom qc rejected too many volumes ({} kept of {attempts} tried)",
                real.len()
            );
        }
        let p = generate_phantom(&PhantomConfig {
            depth: ph.dims[0],
            height: ph.dims[1],
            width: ph.dims[2],
            domain: if attempts % 2 == 0 { NoiseDomain::A } else { NoiseDomain::B },
            seed: m.seed.wrapping_add(DETECT_POOL_SEED_OFFSET + attempts as u64),
        });
        attempts += 1;
        let mask = estimate_lung_mask(&p.volume.data);
        if voi_candidates(&mask, ns.edge).len() >= MIN_VOI_CANDIDATES {
            real.push(p.volume);
        }
    }

    // synthetic pool: the generate stage's volumes that pass the same qc
    let gen = load_volumes(&m.generated_dir())
        .context("no generated volumes; run the generate stage first")?;
    let total = gen.len();
    let mut synthetic: Vec<Volume> = Vec::new();
    for v in gen {
        let mask = estimate_lung_mask(&v.data);
        if voi_candidates(&mask, ns.edge).len() >= MIN_VOI_CANDIDATES {
            synthetic.push(v);
            if synthetic.len() == st.synthetic_count {
                break;
            }
        }
    }
    if synthetic.len() < st.synthetic_count {
        bail!(
            "only {} of {total} generated volumes pass lung-mask qc (need {}); \
             train the generator longer",
            synthetic.len(),
            st.synthetic_count
        );
    }

    let dir = m.detect_dir();
    emit(
        "detect",
        json!({
            "sizes": st.sizes,
            "real": real.len(),
            "synthetic": synthetic.len(),
            "dir": dir.display().to_string(),
        }),
    );
    let inputs = SweepInputs {
        real_clean: &real,
        synthetic_clean: &synthetic,
        gans: &gans,
        count_probs: st.count_probs.clone(),
        intensity_range: st.intensity_range,
        ratios: st.ratios,
        dir: dir.clone(),
        seed: m.seed,
    };
    let report = sweep_nodule_sizes(&st.sizes, &inputs, &st.regime)?;
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("sweep.json"), &report)?;
    emit("sweep", &report);
    print!("{}", report.table());
    Ok(())
}

/// Run every stage declared in the manifest, in pipeline order, then
/// render the figure montages.
pub fn run_experiment(m: &ExperimentManifest) -> Result<()> {
    let plan: [(&str, bool, fn(&ExperimentManifest) -> Result<()>); 6] = [
        ("phantom", m.phantom.is_some(), run_phantom),
        ("sgan-train", m.sgan_train.is_some(), run_train_sgan),
        ("generate", m.generate.is_some(), run_generate),
        ("metrics", m.metrics.is_some(), run_metrics),
        ("nodulesim", m.nodulesim.is_some(), run_nodulesim),
        ("detect", m.detect.is_some(), run_detect),
    ];
    for (name, present, stage) in plan {
        if !present {
            emit("stage", json!({"name": name, "status": "skipped"}));
            continue;
        }
        emit("stage", json!({"name": name, "status": "start"}));
        let t0 = Instant::now();
        stage(m).with_context(|| format!("stage {name} failed"))?;
        emit(
            "stage",
            json!({"name": name, "status": "done", "wall_ms": t0.elapsed().as_millis() as u64}),
        );
    }

    // three-view figure panels for the first real and first synthetic volume
    let figures = m.output_dir.join("figures");
    for (name, dir) in [("real", m.phantoms_dir()), ("synthetic", m.generated_dir())] {
        let Some(base) = volume_bases(&dir).ok().and_then(|b| b.into_iter().next()) else {
            continue;
        };
        let v = Volume::load(&base)?;
        let out = figures.join(format!("montage-{name}.png"));
        montage::write_montage(&v.data, montage::DEFAULT_TILES, &out)?;
        emit("figure", json!({"volume": v.id, "out": out.display().to_string()}));
    }
    println!("experiment complete; artifacts under {}", m.output_dir.display());
    Ok(())
}
