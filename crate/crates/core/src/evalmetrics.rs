//! Plane-level generative metrics: a small plane classifier trained on
//! phantom data supplies features for a Fréchet distance computed per
//! depth position, and class probabilities for an inception-style score.
//!
//! The Fréchet square root uses a symmetric eigendecomposition with
//! negative eigenvalues clipped to zero, which is exact for the symmetric
//! positive semi-definite matrices produced here up to round-off.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use volsynth_nn::layers::{conv2d, cross_entropy, dense, log_softmax};
use volsynth_nn::params::{he_std, head_std, normal_array, zeros};
use volsynth_nn::tensor::grad;
use volsynth_nn::{Adam, ParamSet, Tensor, Vars};

use crate::error::{Error, Result};
use crate::sgan::{to_net, LEAK};
use crate::voldata::{Phantom, PlaneLabel};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatExConfig {
    pub hw: usize,
    pub channels: Vec<usize>,
    pub classes: usize,
}

impl FeatExConfig {
    pub fn desk() -> FeatExConfig {
        FeatExConfig { hw: 32, channels: vec![8, 16, 32], classes: PlaneLabel::COUNT }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }
}

pub struct FeatureExtractor {
    pub config: FeatExConfig,
    pub params: ParamSet,
}

pub fn init_extractor(config: &FeatExConfig, seed: u64) -> FeatureExtractor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut cin = 1;
    for (i, &cout) in config.channels.iter().enumerate() {
        params.insert(
            format!("feat.conv{i}.w"),
            normal_array(&mut rng, &[cout, cin, 4, 4], he_std(cin * 16)),
        );
        params.insert(format!("feat.conv{i}.b"), zeros(&[cout]));
        cin = cout;
    }
    let f = config.feature_dim();
    params.insert(
        "feat.head.w".to_string(),
        normal_array(&mut rng, &[f, config.classes], head_std(f)),
    );
    params.insert("feat.head.b".to_string(), zeros(&[config.classes]));
    FeatureExtractor { config: config.clone(), params }
}

/// GAP features and class logits for a batch of planes `[B, 1, hw, hw]`.
fn extractor_forward(config: &FeatExConfig, vars: &Vars, x: &Tensor) -> (Tensor, Tensor) {
    assert_eq!(x.shape()[2], config.hw);
    let mut h = x.clone();
    for i in 0..config.channels.len() {
        h = conv2d(
            &h,
            vars.get(&format!("feat.conv{i}.w")),
            vars.get(&format!("feat.conv{i}.b")),
            2,
            1,
        )
        .leaky_relu(LEAK);
    }
    let shape = h.shape().to_vec();
    let (b, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
    let feats = h
        .reshape(&[b, c, hh * ww])
        .sum_axis(2)
        .scale(1.0 / (hh * ww) as f64);
    let logits = dense(&feats, vars.get("feat.head.w"), vars.get("feat.head.b"));
    (feats, logits)
}

fn plane_batch(planes: &[(Array2<f32>, usize)], idx: &[usize], hw: usize) -> ArrayD<f64> {
    let mut x = ArrayD::zeros(IxDyn(&[idx.len(), 1, hw, hw]));
    for (b, &i) in idx.iter().enumerate() {
        for y in 0..hw {
            for c in 0..hw {
                x[[b, 0, y, c]] = to_net(planes[i].0[[y, c]]);
            }
        }
    }
    x
}

fn one_hot(labels: &[(Array2<f32>, usize)], idx: &[usize], classes: usize) -> ArrayD<f64> {
    let mut y = ArrayD::zeros(IxDyn(&[idx.len(), classes]));
    for (b, &i) in idx.iter().enumerate() {
        y[[b, labels[i].1]] = 1.0;
    }
    y
}

/// Train the plane classifier on phantom planes with their region labels.
/// Every fifth plane is held out; returns the extractor with its held-out
/// accuracy.
pub fn train_extractor(
    cohort: &[Phantom],
    config: &FeatExConfig,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<(FeatureExtractor, f64)> {
    let mut planes: Vec<(Array2<f32>, usize)> = Vec::new();
    for p in cohort {
        for (z, label) in p.labels.iter().enumerate() {
            let plane = p.volume.data.index_axis(Axis(0), z).to_owned();
            planes.push((plane, label.index()));
        }
    }
    if planes.len() < 10 {
        return Err(Error::Config("too few planes to fit the classifier".to_string()));
    }
    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for i in 0..planes.len() {
        if i % 5 == 2 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }

    let mut fx = init_extractor(config, seed);
    let mut opt = Adam::new(1e-3, 0.9, 0.999);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch)
            .map(|_| train_idx[rng.gen_range(0..train_idx.len())])
            .collect();
        let vars = fx.params.bind(|_| true);
        let x = Tensor::constant(plane_batch(&planes, &idx, config.hw));
        let y = Tensor::constant(one_hot(&planes, &idx, config.classes));
        let (_, logits) = extractor_forward(config, &vars, &x);
        let loss = cross_entropy(&logits, &y);
        let trainable = vars.trainable();
        let refs: Vec<&Tensor> = trainable.iter().map(|(_, t)| t).collect();
        let grads = grad(&loss, &refs);
        let pairs: Vec<(String, ArrayD<f64>)> = trainable
            .iter()
            .zip(grads)
            .map(|((n, _), g)| (n.clone(), g.value().clone()))
            .collect();
        opt.step(&mut fx.params, &pairs);
    }

    val_idx.shuffle(&mut rng);
    let mut correct = 0usize;
    for chunk in val_idx.chunks(64) {
        let vars = fx.params.bind(|_| false);
        let x = Tensor::constant(plane_batch(&planes, chunk, config.hw));
        let (_, logits) = extractor_forward(config, &vars, &x);
        let lv = logits.value().clone();
        for (b, &i) in chunk.iter().enumerate() {
            let row: Vec<f64> = (0..config.classes).map(|k| lv[[b, k]]).collect();
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == planes[i].1 {
                correct += 1;
            }
        }
    }
    let acc = correct as f64 / val_idx.len() as f64;
    Ok((fx, acc))
}

/// Features for every plane of a volume, rows indexed by depth.
pub fn volume_features(fx: &FeatureExtractor, volume: &Array3<f32>) -> Array2<f64> {
    let (d, h, w) = volume.dim();
    assert_eq!((h, w), (fx.config.hw, fx.config.hw));
    let mut x = ArrayD::zeros(IxDyn(&[d, 1, h, w]));
    for z in 0..d {
        for y in 0..h {
            for c in 0..w {
                x[[z, 0, y, c]] = to_net(volume[[z, y, c]]);
            }
        }
    }
    let vars = fx.params.bind(|_| false);
    let (feats, _) = extractor_forward(&fx.config, &vars, &Tensor::constant(x));
    feats
        .value()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("feature matrix")
}

/// Class probabilities for every plane of a volume.
pub fn volume_class_probs(fx: &FeatureExtractor, volume: &Array3<f32>) -> Array2<f64> {
    let (d, h, w) = volume.dim();
    let mut x = ArrayD::zeros(IxDyn(&[d, 1, h, w]));
    for z in 0..d {
        for y in 0..h {
            for c in 0..w {
                x[[z, 0, y, c]] = to_net(volume[[z, y, c]]);
            }
        }
    }
    let vars = fx.params.bind(|_| false);
    let (_, logits) = extractor_forward(&fx.config, &vars, &Tensor::constant(x));
    let lp = log_softmax(&logits);
    lp.value()
        .mapv(f64::exp)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("probability matrix")
}

/// Metric summary in the shape the reporting command emits.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub fid_mean: f64,
    pub fid_std: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub protocol: String,
}

pub fn metric_report(
    fx: &FeatureExtractor,
    real: &[Array3<f32>],
    fake: &[Array3<f32>],
    pairings: usize,
    subset: usize,
    seed: u64,
) -> Result<MetricReport> {
    let (fid_mean, fid_std) = slicewise_fid(fx, real, fake, pairings, subset, seed)?;
    let (is_mean, is_std) = inception_score(fx, fake)?;
    Ok(MetricReport {
        fid_mean,
        fid_std,
        is_mean,
        is_std,
        protocol: "slicewise-paired".to_string(),
    })
}

#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// Sample mean and unbiased covariance of feature rows.
pub fn gaussian_stats(feats: ArrayView2<f64>) -> GaussianStats {
    let (n, f) = feats.dim();
    assert!(n > 0);
    let mean = feats.mean_axis(Axis(0)).expect("nonempty");
    let mut cov = Array2::zeros((f, f));
    if n > 1 {
        for row in feats.rows() {
            let d = &row.to_owned() - &mean;
            for i in 0..f {
                for j in 0..f {
                    cov[[i, j]] += d[i] * d[j];
                }
            }
        }
        cov /= (n - 1) as f64;
    }
    GaussianStats { mean, cov }
}

fn sym_sqrt(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&roots)
        * eig.eigenvectors.transpose()
}

fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    let (r, c) = a.dim();
    nalgebra::DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

/// Fréchet distance between two Gaussians:
/// `||m1 - m2||^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> f64 {
    assert_eq!(a.mean.len(), b.mean.len());
    let dm: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let c1 = to_na(&a.cov);
    let c2 = to_na(&b.cov);
    let s1 = sym_sqrt(&c1);
    let inner = &s1 * &c2 * &s1;
    let prod_sqrt_trace: f64 = {
        let sym = (&inner + inner.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
    };
    (dm + c1.trace() + c2.trace() - 2.0 * prod_sqrt_trace).max(0.0)
}

/// Depth-resolved Fréchet distance between two sets of volumes,
/// reported as mean and population std over pairing rounds.
///
/// For each of `pairings` rounds, `subset` volumes are drawn without
/// replacement from each side; per depth position the drawn planes form
/// one Gaussian per side and the distances are averaged over depth.
/// Features are extracted once per volume.
pub fn slicewise_fid(
    fx: &FeatureExtractor,
    real: &[Array3<f32>],
    fake: &[Array3<f32>],
    pairings: usize,
    subset: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Config("empty volume set for the distance".to_string()));
    }
    let subset = subset.min(real.len()).min(fake.len());
    if subset < 2 {
        return Err(Error::Config("need at least two volumes per side".to_string()));
    }
    let depth = real[0].dim().0;
    for v in real.iter().chain(fake.iter()) {
        if v.dim().0 != depth {
            return Err(Error::Config("mixed depths in the distance input".to_string()));
        }
    }
    let real_feats: Vec<Array2<f64>> = real.iter().map(|v| volume_features(fx, v)).collect();
    let fake_feats: Vec<Array2<f64>> = fake.iter().map(|v| volume_features(fx, v)).collect();
    let f = fx.config.feature_dim();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let rounds = pairings.max(1);
    let mut per_round = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let draw = |rng: &mut ChaCha12Rng, n: usize| -> Vec<usize> {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(subset);
            all
        };
        let ri = draw(&mut rng, real.len());
        let fi = draw(&mut rng, fake.len());
        let mut per_depth = 0.0;
        for z in 0..depth {
            let gather = |feats: &[Array2<f64>], idx: &[usize]| -> Array2<f64> {
                let mut m = Array2::zeros((idx.len(), f));
                for (r, &i) in idx.iter().enumerate() {
                    m.row_mut(r).assign(&feats[i].row(z));
                }
                m
            };
            let gr = gaussian_stats(gather(&real_feats, &ri).view());
            let gf = gaussian_stats(gather(&fake_feats, &fi).view());
            per_depth += frechet_distance(&gr, &gf);
        }
        per_round.push(per_depth / depth as f64);
    }
    Ok(mean_std(&per_round))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Inception-style score from per-plane class probabilities: the
/// exponential of the mean KL divergence to the marginal. Rows must sum
/// to one within 1e-6.
pub fn inception_score_from_probs(probs: ArrayView2<f64>) -> Result<f64> {
    let (n, _) = probs.dim();
    if n == 0 {
        return Err(Error::Config("no probability rows".to_string()));
    }
    for row in probs.rows() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("invalid probability row (sum {s})")));
        }
    }
    let marginal = probs.mean_axis(Axis(0)).expect("nonempty");
    let mut kl_sum = 0.0;
    for row in probs.rows() {
        for (p, m) in row.iter().zip(marginal.iter()) {
            if *p > 0.0 {
                kl_sum += p * (p.ln() - m.max(1e-300).ln());
            }
        }
    }
    Ok((kl_sum / n as f64).exp())
}

/// Per-volume scores aggregated as mean and population std.
pub fn inception_score(fx: &FeatureExtractor, volumes: &[Array3<f32>]) -> Result<(f64, f64)> {
    if volumes.is_empty() {
        return Err(Error::Config("empty volume set for the score".to_string()));
    }
    let mut scores = Vec::with_capacity(volumes.len());
    for v in volumes {
        scores.push(inception_score_from_probs(volume_class_probs(fx, v).view())?);
    }
    Ok(mean_std(&scores))
}
