//! Downstream nodule detection: a small squeeze-style 3-d classifier,
//! the three training regimes (real-only, synthetic-only, pretrain then
//! fine-tune), and the nodule-size sweep.
//!
//! Training consumes only a [`DatasetMix`] manifest plus the volume files
//! next to it; regimes are compared on one shared, hash-verified test
//! split so accuracy differences come from training data alone.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use volsynth_nn::layers::conv3d;
use volsynth_nn::params::{he_std, head_std, normal_array, zeros};
use volsynth_nn::tensor::grad;
use volsynth_nn::{Adam, ParamSet, Tensor, Vars};

use crate::error::{Error, Result};
use crate::nodulesim::{
    build_single_domain_dataset, load_split, write_mixed_dataset, DatasetMix, Label, NoduleDists,
    NoduleGans, Split,
};
use crate::sgan::{to_net, LEAK};
use crate::voldata::Volume;

/// One fire block: a 1x1x1 squeeze followed by parallel 1x1x1 and 3x3x3
/// expands whose outputs concatenate to `2 * expand` channels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FireSpec {
    pub squeeze: usize,
    pub expand: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub stem: usize,
    pub fires: Vec<FireSpec>,
    /// Halve the spatial grid after the fire block at the same index.
    pub pools: Vec<bool>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn desk() -> ClassifierConfig {
        ClassifierConfig {
            stem: 16,
            fires: vec![
                FireSpec { squeeze: 8, expand: 16 },
                FireSpec { squeeze: 12, expand: 24 },
                FireSpec { squeeze: 16, expand: 32 },
                FireSpec { squeeze: 16, expand: 32 },
            ],
            pools: vec![true, true, false, false],
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch: 4,
            max_steps: 300,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fires.is_empty() || self.fires.len() != self.pools.len() {
            return Err(Error::Config(
                "classifier needs one pool flag per fire block".to_string(),
            ));
        }
        if self.batch == 0 || self.max_steps == 0 {
            return Err(Error::Config("classifier batch and steps must be positive".to_string()));
        }
        Ok(())
    }

    fn out_channels(&self) -> usize {
        2 * self.fires.last().expect("validated").expand
    }
}

pub fn init_classifier(cfg: &ClassifierConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert(
        "det.stem.w",
        normal_array(&mut rng, &[cfg.stem, 1, 4, 4, 4], he_std(64)),
    );
    params.insert("det.stem.b", zeros(&[cfg.stem]));
    let mut cin = cfg.stem;
    for (i, f) in cfg.fires.iter().enumerate() {
        params.insert(
            format!("det.fire{i}.sq.w"),
            normal_array(&mut rng, &[f.squeeze, cin, 1, 1, 1], he_std(cin)),
        );
        params.insert(format!("det.fire{i}.sq.b"), zeros(&[f.squeeze]));
        params.insert(
            format!("det.fire{i}.e1.w"),
            normal_array(&mut rng, &[f.expand, f.squeeze, 1, 1, 1], he_std(f.squeeze)),
        );
        params.insert(format!("det.fire{i}.e1.b"), zeros(&[f.expand]));
        params.insert(
            format!("det.fire{i}.e3.w"),
            normal_array(&mut rng, &[f.expand, f.squeeze, 3, 3, 3], he_std(f.squeeze * 27)),
        );
        params.insert(format!("det.fire{i}.e3.b"), zeros(&[f.expand]));
        cin = 2 * f.expand;
    }
    params.insert(
        "det.head.w",
        normal_array(&mut rng, &[cfg.out_channels(), 1], head_std(cfg.out_channels())),
    );
    params.insert("det.head.b", zeros(&[1]));
    params
}

pub fn classifier_param_count(cfg: &ClassifierConfig) -> usize {
    init_classifier(cfg, 0).iter().map(|(_, a)| a.len()).sum()
}

/// 2x average pooling over the three spatial axes.
fn avg_pool2x(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "pool needs even spatial dims");
    x.reshape(&[b, c, d / 2, 2, h / 2, 2, w / 2, 2])
        .sum_axis(7)
        .sum_axis(5)
        .sum_axis(3)
        .scale(1.0 / 8.0)
}

/// Logits for a net-domain batch `[B,1,D,H,W]`; one score per volume,
/// positive means nodule.
pub fn classifier_forward(cfg: &ClassifierConfig, vars: &Vars, x: &Tensor) -> Tensor {
    let mut h = conv3d(x, vars.get("det.stem.w"), vars.get("det.stem.b"), 2, 1)
        .leaky_relu(LEAK);
    for (i, _) in cfg.fires.iter().enumerate() {
        let sq = conv3d(
            &h,
            vars.get(&format!("det.fire{i}.sq.w")),
            vars.get(&format!("det.fire{i}.sq.b")),
            1,
            0,
        )
        .leaky_relu(LEAK);
        let e1 = conv3d(
            &sq,
            vars.get(&format!("det.fire{i}.e1.w")),
            vars.get(&format!("det.fire{i}.e1.b")),
            1,
            0,
        );
        let e3 = conv3d(
            &sq,
            vars.get(&format!("det.fire{i}.e3.w")),
            vars.get(&format!("det.fire{i}.e3.b")),
            1,
            1,
        );
        h = Tensor::concat(&[e1, e3], 1).leaky_relu(LEAK);
        if cfg.pools[i] {
            h = avg_pool2x(&h);
        }
    }
    let s = h.shape().to_vec();
    let (b, c, vox) = (s[0], s[1], s[2] * s[3] * s[4]);
    let pooled = h.reshape(&[b, c, vox]).sum_axis(2).scale(1.0 / vox as f64);
    pooled
        .matmul(vars.get("det.head.w"))
        .add(&vars.get("det.head.b").broadcast_to(&[b, 1]))
        .reshape(&[b])
}

fn batch_input(samples: &[(Volume, Label)], idx: &[usize]) -> (ArrayD<f64>, Vec<f64>) {
    let dims = samples[idx[0]].0.data.dim();
    let mut x = ArrayD::zeros(IxDyn(&[idx.len(), 1, dims.0, dims.1, dims.2]));
    let mut signs = Vec::with_capacity(idx.len());
    let vox = dims.0 * dims.1 * dims.2;
    let flat = x.as_slice_mut().expect("standard layout");
    for (bi, &i) in idx.iter().enumerate() {
        let (vol, label) = &samples[i];
        for (k, v) in vol.data.iter().enumerate() {
            flat[bi * vox + k] = to_net(*v);
        }
        // loss sign: softplus(-s) for nodules, softplus(s) for clean
        signs.push(match label {
            Label::Nodule => -1.0,
            Label::Clean => 1.0,
        });
    }
    (x, signs)
}

fn batch_loss(cfg: &ClassifierConfig, vars: &Vars, samples: &[(Volume, Label)], idx: &[usize]) -> Tensor {
    let (x, signs) = batch_input(samples, idx);
    let logits = classifier_forward(cfg, vars, &Tensor::constant(x));
    let signs = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[idx.len()]), signs).unwrap());
    logits.mul(&signs).softplus().mean_all()
}

/// Mean cross-entropy of `params` over all samples, without updates.
pub fn classifier_loss(
    cfg: &ClassifierConfig,
    params: &ParamSet,
    samples: &[(Volume, Label)],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty sample set".to_string()));
    }
    let vars = params.bind(|_| false);
    let mut total = 0.0;
    for chunk in (0..samples.len()).collect::<Vec<_>>().chunks(cfg.batch.max(1)) {
        let loss = batch_loss(cfg, &vars, samples, chunk);
        total += loss.item() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectLogEntry {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u128,
}

/// Train on the manifest's train split. `init` warm-starts fine-tuning;
/// the step-0 log entry is the full-train loss of the starting weights,
/// before any update.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    mix: &DatasetMix,
    dir: &Path,
    init: Option<&ParamSet>,
    mut on_log: impl FnMut(&DetectLogEntry),
) -> Result<ParamSet> {
    cfg.validate()?;
    let samples = load_split(mix, dir, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Config("train split is empty".to_string()));
    }
    let mut params = match init {
        Some(p) => p.clone(),
        None => init_classifier(cfg, cfg.seed),
    };
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let t0 = std::time::Instant::now();
    let start_loss = classifier_loss(cfg, &params, &samples)?;
    on_log(&DetectLogEntry { step: 0, loss: start_loss, wall_ms: t0.elapsed().as_millis() });

    for step in 1..=cfg.max_steps {
        let t0 = std::time::Instant::now();
        let idx: Vec<usize> =
            (0..cfg.batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let vars = params.bind(|_| true);
        let loss = batch_loss(cfg, &vars, &samples, &idx);
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::Diverged(format!("classifier loss at step {step} is {v}")));
        }
        let trainable = vars.trainable();
        let refs: Vec<&Tensor> = trainable.iter().map(|(_, t)| t).collect();
        let grads = grad(&loss, &refs);
        let pairs: Vec<(String, ArrayD<f64>)> = trainable
            .iter()
            .zip(grads)
            .map(|((n, _), g)| (n.clone(), g.value().clone()))
            .collect();
        opt.step(&mut params, &pairs);
        on_log(&DetectLogEntry { step, loss: v, wall_ms: t0.elapsed().as_millis() });
    }
    Ok(params)
}

/// Fraction of samples whose sign of the logit matches the label.
pub fn evaluate_classifier(
    cfg: &ClassifierConfig,
    params: &ParamSet,
    samples: &[(Volume, Label)],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation split".to_string()));
    }
    let vars = params.bind(|_| false);
    let mut correct = 0usize;
    for chunk in (0..samples.len()).collect::<Vec<_>>().chunks(cfg.batch.max(1)) {
        let (x, _) = batch_input(samples, chunk);
        let logits = classifier_forward(cfg, &vars, &Tensor::constant(x));
        let vals = logits.value().clone();
        for (bi, &i) in chunk.iter().enumerate() {
            let predicted = if vals[[bi]] > 0.0 { Label::Nodule } else { Label::Clean };
            if predicted == samples[i].1 {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

// ---- three-regime experiment ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    RealOnly,
    SyntheticOnly,
    PretrainFinetune,
}

pub const REGIMES: [Regime; 3] =
    [Regime::RealOnly, Regime::SyntheticOnly, Regime::PretrainFinetune];

impl Regime {
    pub fn tag(&self) -> &'static str {
        match self {
            Regime::RealOnly => "real-only",
            Regime::SyntheticOnly => "synthetic-only",
            Regime::PretrainFinetune => "pretrain+finetune",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: Regime,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeReport {
    pub seeds: Vec<u64>,
    pub test_hash: String,
    pub results: Vec<RegimeResult>,
}

impl RegimeReport {
    pub fn result(&self, regime: Regime) -> &RegimeResult {
        self.results.iter().find(|r| r.regime == regime).expect("all regimes present")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<20} {:>8} {:>8}  per-seed\n", "regime", "mean", "std"));
        for r in &self.results {
            let per: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.3}")).collect();
            out.push_str(&format!(
                "{:<20} {:>8.3} {:>8.3}  [{}]\n",
                r.regime.tag(),
                r.mean,
                r.std,
                per.join(", ")
            ));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub classifier: ClassifierConfig,
    pub seeds: Vec<u64>,
}

impl RegimeConfig {
    pub fn desk() -> RegimeConfig {
        RegimeConfig { classifier: ClassifierConfig::desk(), seeds: vec![0, 1, 2] }
    }
}

fn split_hash(mix: &DatasetMix, split: Split) -> Result<String> {
    let bytes = serde_json::to_vec(mix.entries(split))?;
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    Ok(format!("{:016x}", h.finish()))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train and evaluate all three regimes on one shared test split (the
/// real manifest's), re-hashing the split before every evaluation.
pub fn run_regimes(
    cfg: &RegimeConfig,
    real: (&DatasetMix, &Path),
    synthetic: (&DatasetMix, &Path),
) -> Result<RegimeReport> {
    cfg.classifier.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no classifier seeds configured".to_string()));
    }
    let test = load_split(real.0, real.1, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Config("shared test split is empty".to_string()));
    }
    let nodules = test.iter().filter(|(_, l)| *l == Label::Nodule).count();
    if nodules * 2 != test.len() {
        return Err(Error::Config(format!(
            "test split is unbalanced: {nodules} of {} are nodules",
            test.len()
        )));
    }
    let test_hash = split_hash(real.0, Split::Test)?;

    let mut results = Vec::new();
    for regime in REGIMES {
        let mut accs = Vec::new();
        for &seed in &cfg.seeds {
            let run_cfg = ClassifierConfig { seed, ..cfg.classifier.clone() };
            let weights = match regime {
                Regime::RealOnly => {
                    train_classifier(&run_cfg, real.0, real.1, None, |_| {})?
                }
                Regime::SyntheticOnly => {
                    train_classifier(&run_cfg, synthetic.0, synthetic.1, None, |_| {})?
                }
                Regime::PretrainFinetune => {
                    let pre =
                        train_classifier(&run_cfg, synthetic.0, synthetic.1, None, |_| {})?;
                    train_classifier(&run_cfg, real.0, real.1, Some(&pre), |_| {})?
                }
            };
            let rehash = split_hash(real.0, Split::Test)?;
            if rehash != test_hash {
                return Err(Error::Config("test split changed between regimes".to_string()));
            }
            accs.push(evaluate_classifier(&run_cfg, &weights, &test)?);
        }
        let (mean, std) = mean_std(&accs);
        results.push(RegimeResult { regime, accuracies: accs, mean, std });
    }
    Ok(RegimeReport { seeds: cfg.seeds.clone(), test_hash, results })
}

// ---- nodule size sweep ----

pub const DEFAULT_SWEEP_SIZES: [f64; 6] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];

/// Clean volume pools and the injector that seed the per-size corpora.
pub struct SweepInputs<'a> {
    pub real_clean: &'a [Volume],
    pub synthetic_clean: &'a [Volume],
    pub gans: &'a NoduleGans,
    pub count_probs: Vec<f64>,
    pub intensity_range: [f64; 2],
    pub ratios: [f64; 3],
    pub dir: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub sizes: Vec<f64>,
    pub reports: Vec<RegimeReport>,
}

impl SweepReport {
    /// Real-only mean at each size compared against the smallest size;
    /// reported, not asserted.
    pub fn real_only_vs_smallest(&self) -> Vec<bool> {
        let base = self.reports[0].result(Regime::RealOnly).mean;
        self.reports
            .iter()
            .map(|r| r.result(Regime::RealOnly).mean >= base)
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>12} {:>16} {:>20}\n",
            "radius", "real-only", "synthetic-only", "pretrain+finetune"
        ));
        for (size, rep) in self.sizes.iter().zip(&self.reports) {
            out.push_str(&format!(
                "{:<8} {:>12} {:>16} {:>20}\n",
                size,
                format!(
                    "{:.3}±{:.3}",
                    rep.result(Regime::RealOnly).mean,
                    rep.result(Regime::RealOnly).std
                ),
                format!(
                    "{:.3}±{:.3}",
                    rep.result(Regime::SyntheticOnly).mean,
                    rep.result(Regime::SyntheticOnly).std
                ),
                format!(
                    "{:.3}±{:.3}",
                    rep.result(Regime::PretrainFinetune).mean,
                    rep.result(Regime::PretrainFinetune).std
                ),
            ));
        }
        let marks: Vec<String> = self
            .real_only_vs_smallest()
            .iter()
            .map(|b| if *b { "yes".to_string() } else { "no".to_string() })
            .collect();
        out.push_str(&format!(
            "real-only >= smallest radius, per size: [{}]\n",
            marks.join(", ")
        ));
        out
    }
}

/// Build per-size corpora (native nodules for the real pool, injected
/// ones for the synthetic pool) and run the three regimes on each size.
pub fn sweep_nodule_sizes(
    sizes: &[f64],
    inputs: &SweepInputs,
    cfg: &RegimeConfig,
) -> Result<SweepReport> {
    if sizes.is_empty() {
        return Err(Error::Config("nodule size list is empty".to_string()));
    }
    let mut reports = Vec::new();
    for (k, &radius) in sizes.iter().enumerate() {
        let dists = NoduleDists {
            count_probs: inputs.count_probs.clone(),
            radius_ln_mean: radius.ln(),
            radius_ln_std: 0.0,
            radius_clip: [radius, radius],
            intensity_range: inputs.intensity_range,
        };
        let seed = inputs.seed.wrapping_add(k as u64 * 7919);
        let real = build_single_domain_dataset(
            inputs.real_clean,
            &dists,
            inputs.ratios,
            seed,
            None,
            inputs.gans.edge,
            "real",
        )?;
        let synth = build_single_domain_dataset(
            inputs.synthetic_clean,
            &dists,
            inputs.ratios,
            seed ^ 0x5eed,
            Some(inputs.gans),
            inputs.gans.edge,
            "synthetic",
        )?;
        let real_dir = inputs.dir.join(format!("size-{radius}/real"));
        let synth_dir = inputs.dir.join(format!("size-{radius}/synthetic"));
        let real_mix = write_mixed_dataset(&real, &real_dir)?;
        let synth_mix = write_mixed_dataset(&synth, &synth_dir)?;
        reports.push(run_regimes(cfg, (&real_mix, &real_dir), (&synth_mix, &synth_dir))?);
    }
    Ok(SweepReport { sizes: sizes.to_vec(), reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodulesim::{composite_into, MixedVolume, Pathway};
    use crate::voldata::Provenance;
    use ndarray::Array3;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            stem: 6,
            fires: vec![FireSpec { squeeze: 4, expand: 6 }, FireSpec { squeeze: 4, expand: 8 }],
            pools: vec![true, false],
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 4,
            max_steps: 40,
            seed: 0,
        }
    }

    /// 16-cube toy volumes: dark noise, optionally with a bright sphere.
    fn toy_volume(seed: u64, nodule: bool) -> Volume {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut data = Array3::from_shape_fn((16, 16, 16), |_| rng.gen_range(0.0f32..0.2));
        if nodule {
            composite_into(&mut data, [8.0, 8.0, 8.0], 4.0, 0.9);
        }
        Volume {
            data,
            spacing_mm: [1.0, 1.0, 1.0],
            provenance: Provenance::RealPhantom,
            id: format!("toy-{seed}-{}", if nodule { "nodule" } else { "clean" }),
        }
    }

    fn toy_mix(dir: &Path, n_per_class: usize, seed0: u64) -> DatasetMix {
        let mut mixed = Vec::new();
        for i in 0..n_per_class {
            for nodule in [true, false] {
                let v = toy_volume(seed0 + i as u64 * 2 + nodule as u64, nodule);
                let split = if i + 2 < n_per_class { Split::Train } else if i + 2 == n_per_class { Split::Val } else { Split::Test };
                mixed.push(MixedVolume {
                    volume: v,
                    label: if nodule { Label::Nodule } else { Label::Clean },
                    pathway: Pathway::Untouched,
                    domain: "toy".to_string(),
                    split,
                });
            }
        }
        write_mixed_dataset(&mixed, dir).unwrap()
    }

    #[test]
    fn desk_classifier_is_squeeze_scale() {
        let n = classifier_param_count(&ClassifierConfig::desk());
        assert!(
            (30_000..=70_000).contains(&n),
            "desk classifier has {n} parameters"
        );
    }

    #[test]
    fn toy_manifest_reaches_high_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let mix = toy_mix(dir.path(), 8, 0);
        let cfg = ClassifierConfig { max_steps: 500, ..tiny_cfg() };
        let weights = train_classifier(&cfg, &mix, dir.path(), None, |_| {}).unwrap();
        let samples = load_split(&mix, dir.path(), Split::Train).unwrap();
        let acc = evaluate_classifier(&cfg, &weights, &samples).unwrap();
        assert!(acc > 0.95, "train accuracy {acc}");
    }

    #[test]
    fn warm_start_matches_init_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let mix = toy_mix(dir.path(), 6, 50);
        let cfg = ClassifierConfig { max_steps: 3, ..tiny_cfg() };
        let init = init_classifier(&cfg, 123);
        let samples = load_split(&mix, dir.path(), Split::Train).unwrap();
        let independent = classifier_loss(&cfg, &init, &samples).unwrap();
        let mut first = None;
        train_classifier(&cfg, &mix, dir.path(), Some(&init), |e| {
            if e.step == 0 {
                first = Some(e.loss);
            }
        })
        .unwrap();
        let first = first.expect("step-0 entry");
        assert!((first - independent).abs() < 1e-6, "{first} vs {independent}");
    }

    #[test]
    fn seeds_give_distinct_weights_and_runs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mix = toy_mix(dir.path(), 6, 80);
        let cfg = ClassifierConfig { max_steps: 4, ..tiny_cfg() };
        let runs: Vec<ParamSet> = [0u64, 1, 2]
            .iter()
            .map(|&seed| {
                let c = ClassifierConfig { seed, ..cfg.clone() };
                train_classifier(&c, &mix, dir.path(), None, |_| {}).unwrap()
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let same = runs[i]
                    .iter()
                    .zip(runs[j].iter())
                    .all(|((_, a), (_, b))| a == b);
                assert!(!same, "seeds {i} and {j} gave identical weights");
            }
        }
        let again = train_classifier(
            &ClassifierConfig { seed: 0, ..cfg.clone() },
            &mix,
            dir.path(),
            None,
            |_| {},
        )
        .unwrap();
        for ((na, a), (nb, b)) in runs[0].iter().zip(again.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b, "rerun differs at {na}");
        }
    }

    #[test]
    fn evaluation_contracts() {
        let cfg = tiny_cfg();
        let params = init_classifier(&cfg, 7);
        assert!(matches!(
            evaluate_classifier(&cfg, &params, &[]),
            Err(Error::Config(_))
        ));

        let samples: Vec<(Volume, Label)> = (0..8)
            .map(|i| {
                let nodule = i % 2 == 0;
                (toy_volume(900 + i, nodule), if nodule { Label::Nodule } else { Label::Clean })
            })
            .collect();

        // an always-nodule predictor scores exactly one half
        let mut one = init_classifier(&cfg, 7);
        one.get_mut("det.head.w").fill(0.0);
        one.get_mut("det.head.b").fill(50.0);
        let acc = evaluate_classifier(&cfg, &one, &samples).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);

        // order invariance
        let base = evaluate_classifier(&cfg, &params, &samples).unwrap();
        let mut reversed = samples.clone();
        reversed.reverse();
        let rev = evaluate_classifier(&cfg, &params, &reversed).unwrap();
        assert_eq!(base, rev);
    }

    #[test]
    fn regimes_share_the_test_split() {
        let dir = tempfile::tempdir().unwrap();
        let real_dir = dir.path().join("real");
        let synth_dir = dir.path().join("synth");
        let real = toy_mix(&real_dir, 6, 300);
        let synth = toy_mix(&synth_dir, 6, 400);
        let cfg = RegimeConfig {
            classifier: ClassifierConfig { max_steps: 5, ..tiny_cfg() },
            seeds: vec![0, 1, 2],
        };
        let report = run_regimes(&cfg, (&real, &real_dir), (&synth, &synth_dir)).unwrap();
        assert_eq!(report.results.len(), 3);
        for r in &report.results {
            assert_eq!(r.accuracies.len(), 3);
            for a in &r.accuracies {
                assert!((0.0..=1.0).contains(a));
            }
        }
        assert_eq!(report.test_hash, split_hash(&real, Split::Test).unwrap());
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("pretrain-finetune") || json.contains("pretrain"));
        let table = report.table();
        assert!(table.contains("real-only"));
        assert!(table.contains("pretrain+finetune"));
    }

    #[test]
    fn sweep_builds_corpora_and_reports_per_size() {
        use crate::voldata::{generate_phantom, NoiseDomain, PhantomConfig};
        let usable = |n: usize, seed0: u64, domain: NoiseDomain| -> Vec<Volume> {
            let mut out = Vec::new();
            let mut seed = seed0;
            while out.len() < n {
                let v = generate_phantom(&PhantomConfig {
                    depth: 32,
                    height: 32,
                    width: 32,
                    domain,
                    seed,
                })
                .volume;
                let mask = crate::voldata::estimate_lung_mask(&v.data);
                if crate::nodulesim::voi_candidates(&mask, 16).len() >= 50 {
                    out.push(v);
                }
                seed += 1;
            }
            out
        };
        let real = usable(10, 600, NoiseDomain::A);
        let mut synth = usable(10, 700, NoiseDomain::B);
        for v in &mut synth {
            v.provenance = Provenance::Synthetic;
        }
        let gans = crate::nodulesim::init_nodule_gans(16, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let inputs = SweepInputs {
            real_clean: &real,
            synthetic_clean: &synth,
            gans: &gans,
            count_probs: vec![0.0, 1.0],
            intensity_range: [0.55, 0.75],
            ratios: [0.5, 0.25, 0.25],
            dir: dir.path().to_path_buf(),
            seed: 5,
        };
        let cfg = RegimeConfig {
            classifier: ClassifierConfig { max_steps: 3, ..tiny_cfg() },
            seeds: vec![0],
        };
        let report = sweep_nodule_sizes(&[3.0], &inputs, &cfg).unwrap();
        assert_eq!(report.sizes, vec![3.0]);
        assert_eq!(report.reports.len(), 1);
        assert_eq!(report.real_only_vs_smallest(), vec![true]);
        assert!(dir.path().join("size-3/real/mix.json").is_file());
        assert!(dir.path().join("size-3/synthetic/mix.json").is_file());
        let table = report.table();
        assert!(table.contains("radius"));
        assert!(table.contains('3'));
    }

    #[test]
    fn sweep_rejects_empty_sizes() {
        let gans = crate::nodulesim::init_nodule_gans(16, 4, 0).unwrap();
        let inputs = SweepInputs {
            real_clean: &[],
            synthetic_clean: &[],
            gans: &gans,
            count_probs: vec![0.0, 1.0],
            intensity_range: [0.5, 0.8],
            ratios: [0.5, 0.25, 0.25],
            dir: std::env::temp_dir(),
            seed: 0,
        };
        assert!(matches!(
            sweep_nodule_sizes(&[], &inputs, &RegimeConfig::desk()),
            Err(Error::Config(_))
        ));
    }
}
