//! Adversarial objectives, the R1 gradient penalty, and alternating
//! training.
//!
//! Each step draws a slab of consecutive planes plus a handful of
//! three-plane windows inside it, at the same depth positions for the real
//! and generated side. The discriminator phase and the generator phase each
//! rebuild the graph with their own parameter binding, so one phase can
//! never write into the other's sub-networks. The penalty differentiates a
//! gradient norm, which is where double backprop is required.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use volsynth_nn::tensor::grad;
use volsynth_nn::{Adam, Tensor, Vars};

use crate::error::{Error, Result};
use crate::latent::{sample_latent_plan, sequence_latents, slice_count, LatentPlan};
use crate::sgan::{
    dslab_forward, dslice_forward, generator_forward, sample_step_positions,
    slab_with_position, slice_with_position, to_net, ModelState, SganConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Js,
    Wasserstein,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Js => "js",
            LossKind::Wasserstein => "wasserstein",
        })
    }
}

/// Discriminator logits for one step: one entry per sampled window
/// position plus the slab pair, each `[batch]`.
pub struct BatchScores {
    pub slice_real: Vec<Tensor>,
    pub slice_fake: Vec<Tensor>,
    pub slab_real: Tensor,
    pub slab_fake: Tensor,
}

fn mean(t: &Tensor) -> Tensor {
    t.mean_all()
}

/// Saturating objective the discriminator minimizes: summed binary
/// cross-entropy over every window position and the slab, in fused
/// softplus form. At logits 0 (scores 1/2 everywhere) with `n` window
/// positions this equals `(2n + 2) ln 2`.
pub fn js_discriminator_loss(scores: &BatchScores) -> Tensor {
    let mut total = mean(&scores.slab_real.neg().softplus())
        .add(&mean(&scores.slab_fake.softplus()));
    for (real, fake) in scores.slice_real.iter().zip(&scores.slice_fake) {
        total = total
            .add(&mean(&real.neg().softplus()))
            .add(&mean(&fake.softplus()));
    }
    total
}

/// Non-saturating generator objective for the same game.
pub fn js_generator_loss(scores: &BatchScores) -> Tensor {
    let mut total = mean(&scores.slab_fake.neg().softplus());
    for fake in &scores.slice_fake {
        total = total.add(&mean(&fake.neg().softplus()));
    }
    total
}

/// Critic loss: sum over positions of E[fake] - E[real], plus the slab
/// pair. With real logits pinned to 1 and fake to 0 over n positions this
/// is `-(n + 1)`.
pub fn wasserstein_critic_loss(scores: &BatchScores) -> Tensor {
    let mut total = mean(&scores.slab_fake).sub(&mean(&scores.slab_real));
    for (real, fake) in scores.slice_real.iter().zip(&scores.slice_fake) {
        total = total.add(&mean(fake)).sub(&mean(real));
    }
    total
}

pub fn wasserstein_generator_loss(scores: &BatchScores) -> Tensor {
    let mut total = mean(&scores.slab_fake);
    for fake in &scores.slice_fake {
        total = total.add(&mean(fake));
    }
    total.neg()
}

pub fn discriminator_loss(kind: LossKind, scores: &BatchScores) -> Tensor {
    match kind {
        LossKind::Js => js_discriminator_loss(scores),
        LossKind::Wasserstein => wasserstein_critic_loss(scores),
    }
}

pub fn generator_loss(kind: LossKind, scores: &BatchScores) -> Tensor {
    match kind {
        LossKind::Js => js_generator_loss(scores),
        LossKind::Wasserstein => wasserstein_generator_loss(scores),
    }
}

/// R1 penalty `(gamma/2) * E_batch[ ||d D(x) / d x||^2 ]` on one input
/// leaf. The result stays in the graph, so minimizing it differentiates
/// through the inner gradient.
pub fn r1_penalty(d_out: &Tensor, x: &Tensor, gamma: f64) -> Tensor {
    assert!(x.requires_grad(), "penalty input must be a leaf");
    let batch = d_out.shape()[0] as f64;
    // per-sample scores are independent, so batch gradients stack
    let gx = grad(&d_out.sum_all(), &[x]).remove(0);
    gx.square().sum_all().scale(gamma * 0.5 / batch)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub loss: LossKind,
    pub gamma: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> TrainConfig {
        TrainConfig {
            steps: 600,
            batch: 2,
            loss: LossKind::Wasserstein,
            gamma: 10.0,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
        }
    }

    pub fn optimizers(&self) -> (Adam, Adam) {
        (
            Adam::new(self.lr, self.beta1, self.beta2),
            Adam::new(self.lr, self.beta1, self.beta2),
        )
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub loss_kind: LossKind,
    pub wall_ms: u128,
}

/// Center planes of the slab's windows, one `[B, 1, hw, hw]` tensor per
/// slab depth, built from the sequencer codes for those positions.
fn forward_slab_planes(
    cfg: &SganConfig,
    vars: &Vars,
    plan: &LatentPlan,
    start: usize,
) -> Vec<Tensor> {
    let batch = plan.batch();
    let latents = sequence_latents(&cfg.latent, vars, plan);
    (0..cfg.slab_t)
        .map(|j| {
            // window center start+j is sequence index start+j-1
            let z = latents
                .slice_axis(1, start + j - 1, 1)
                .reshape(&[batch, cfg.latent.latent_dim()]);
            generator_forward(cfg, vars, &z).slice_axis(1, 1, 1)
        })
        .collect()
}

fn planes_to_slab(planes: &[Tensor]) -> Tensor {
    let shape = planes[0].shape();
    let (batch, h, w) = (shape[0], shape[2], shape[3]);
    let lifted: Vec<Tensor> = planes
        .iter()
        .map(|p| p.reshape(&[batch, 1, 1, h, w]))
        .collect();
    Tensor::concat(&lifted, 2)
}

fn planes_to_window(planes: &[Tensor], j: usize) -> Tensor {
    Tensor::concat(&planes[j - 1..=j + 1].to_vec(), 1)
}

fn real_window_array(
    data: &[Array3<f32>],
    indices: &[usize],
    center: usize,
) -> ArrayD<f64> {
    let (_, h, w) = data[indices[0]].dim();
    let mut out = ArrayD::zeros(IxDyn(&[indices.len(), 3, h, w]));
    for (b, &vi) in indices.iter().enumerate() {
        for (c, z) in (center - 1..=center + 1).enumerate() {
            for y in 0..h {
                for x in 0..w {
                    out[[b, c, y, x]] = to_net(data[vi][[z, y, x]]);
                }
            }
        }
    }
    out
}

fn real_slab_array(
    data: &[Array3<f32>],
    indices: &[usize],
    start: usize,
    t: usize,
) -> ArrayD<f64> {
    let (_, h, w) = data[indices[0]].dim();
    let mut out = ArrayD::zeros(IxDyn(&[indices.len(), 1, t, h, w]));
    for (b, &vi) in indices.iter().enumerate() {
        for j in 0..t {
            for y in 0..h {
                for x in 0..w {
                    out[[b, 0, j, y, x]] = to_net(data[vi][[start + j, y, x]]);
                }
            }
        }
    }
    out
}

fn ensure_finite(step: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged(format!("{step} produced {value}")))
    }
}

fn apply_grads(
    loss: &Tensor,
    vars: &Vars,
    opt: &mut Adam,
    state: &mut ModelState,
    what: &str,
) -> Result<()> {
    let trainable = vars.trainable();
    let refs: Vec<&Tensor> = trainable.iter().map(|(_, t)| t).collect();
    let grads = grad(loss, &refs);
    let mut pairs = Vec::with_capacity(trainable.len());
    for ((name, _), g) in trainable.iter().zip(grads) {
        let arr = g.value().clone();
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("{what} gradient for {name}")));
        }
        pairs.push((name.clone(), arr));
    }
    opt.step(&mut state.params, &pairs);
    Ok(())
}

/// Discriminator phase: sample positions and a real batch, score real
/// against freshly generated fakes, add the penalty, and update only the
/// two discriminators. Returns (loss with penalty, penalty alone).
pub fn d_phase(
    state: &mut ModelState,
    data: &[Array3<f32>],
    opt_d: &mut Adam,
    kind: LossKind,
    gamma: f64,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    let cfg = state.config.clone();
    let indices: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..data.len())).collect();
    let (start, centers) = sample_step_positions(&cfg, rng);
    let plan = sample_latent_plan(&cfg.latent, batch, slice_count(cfg.depth), rng);

    let vars = state
        .params
        .bind(|n| n.starts_with("dslice.") || n.starts_with("dslab."));
    let planes = forward_slab_planes(&cfg, &vars, &plan, start);

    let mut slice_real = Vec::with_capacity(centers.len());
    let mut slice_fake = Vec::with_capacity(centers.len());
    let mut real_leaves = Vec::with_capacity(centers.len());
    for &c in &centers {
        let real = Tensor::leaf(real_window_array(data, &indices, c));
        let pos = vec![c; batch];
        slice_real.push(dslice_forward(
            &cfg,
            &vars,
            &slice_with_position(&real, &pos, cfg.depth),
        ));
        slice_fake.push(dslice_forward(
            &cfg,
            &vars,
            &slice_with_position(&planes_to_window(&planes, c - start), &pos, cfg.depth),
        ));
        real_leaves.push(real);
    }
    let real_slab = Tensor::leaf(real_slab_array(data, &indices, start, cfg.slab_t));
    let starts = vec![start; batch];
    let slab_real = dslab_forward(
        &cfg,
        &vars,
        &slab_with_position(&real_slab, &starts, cfg.depth, cfg.slab_t),
    );
    let slab_fake = dslab_forward(
        &cfg,
        &vars,
        &slab_with_position(&planes_to_slab(&planes), &starts, cfg.depth, cfg.slab_t),
    );
    let scores = BatchScores { slice_real, slice_fake, slab_real, slab_fake };

    let mut penalty = r1_penalty(&scores.slab_real, &real_slab, gamma);
    let n = centers.len() as f64;
    for (sr, leaf) in scores.slice_real.iter().zip(&real_leaves) {
        penalty = penalty.add(&r1_penalty(sr, leaf, gamma).scale(1.0 / n));
    }
    let objective = discriminator_loss(kind, &scores);
    let total = objective.add(&penalty);

    let gp = ensure_finite("penalty", penalty.item())?;
    let d_loss = ensure_finite("discriminator loss", total.item())?;
    apply_grads(&total, &vars, opt_d, state, "discriminator")?;
    Ok((d_loss, gp))
}

/// Generator phase: fresh noise, score fakes only, update the generator
/// and the sequencer.
pub fn g_phase(
    state: &mut ModelState,
    opt_g: &mut Adam,
    kind: LossKind,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let cfg = state.config.clone();
    let (start, centers) = sample_step_positions(&cfg, rng);
    let plan = sample_latent_plan(&cfg.latent, batch, slice_count(cfg.depth), rng);

    let vars = state
        .params
        .bind(|n| n.starts_with("gen.") || n.starts_with("rv."));
    let planes = forward_slab_planes(&cfg, &vars, &plan, start);

    let mut slice_fake = Vec::with_capacity(centers.len());
    for &c in &centers {
        let pos = vec![c; batch];
        slice_fake.push(dslice_forward(
            &cfg,
            &vars,
            &slice_with_position(&planes_to_window(&planes, c - start), &pos, cfg.depth),
        ));
    }
    let starts = vec![start; batch];
    let slab_fake = dslab_forward(
        &cfg,
        &vars,
        &slab_with_position(&planes_to_slab(&planes), &starts, cfg.depth, cfg.slab_t),
    );
    // real-side entries are unused by the generator objectives
    let zero = Tensor::constant(ArrayD::zeros(IxDyn(&[batch])));
    let scores = BatchScores {
        slice_real: vec![zero.clone(); centers.len()],
        slice_fake,
        slab_real: zero,
        slab_fake,
    };

    let loss = generator_loss(kind, &scores);
    let g_loss = ensure_finite("generator loss", loss.item())?;
    apply_grads(&loss, &vars, opt_g, state, "generator")?;
    Ok(g_loss)
}

/// One discriminator phase followed by one generator phase.
pub fn train_step(
    state: &mut ModelState,
    data: &[Array3<f32>],
    opt_d: &mut Adam,
    opt_g: &mut Adam,
    kind: LossKind,
    gamma: f64,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64, f64)> {
    let (d_loss, gp) = d_phase(state, data, opt_d, kind, gamma, batch, rng)?;
    let g_loss = g_phase(state, opt_g, kind, batch, rng)?;
    Ok((d_loss, g_loss, gp))
}

/// Full training loop; `on_log` sees every step.
pub fn train_sgan(
    state: &mut ModelState,
    data: &[Array3<f32>],
    cfg: &TrainConfig,
    opt_d: &mut Adam,
    opt_g: &mut Adam,
    mut on_log: impl FnMut(&StepReport),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("no training volumes".to_string()));
    }
    let dims = (state.config.depth, state.config.out_hw, state.config.out_hw);
    for (i, v) in data.iter().enumerate() {
        if v.dim() != dims {
            return Err(Error::Config(format!(
                "volume {i} has shape {:?}, model expects {dims:?}",
                v.dim()
            )));
        }
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".to_string()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    for step in 0..cfg.steps {
        let t0 = std::time::Instant::now();
        let (d_loss, g_loss, gp) =
            train_step(state, data, opt_d, opt_g, cfg.loss, cfg.gamma, cfg.batch, &mut rng)?;
        on_log(&StepReport {
            step,
            d_loss,
            g_loss,
            gp,
            loss_kind: cfg.loss,
            wall_ms: t0.elapsed().as_millis(),
        });
    }
    Ok(())
}
