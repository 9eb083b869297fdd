//! Per-volume latent codes and the bidirectional recurrent sequencer.
//!
//! Each volume gets one patient code and a sequence of per-position codes.
//! The per-position codes come from a BiLSTM run over i.i.d. noise vectors,
//! with both directions started from one shared normal initial state, so
//! neighbouring positions share context in both directions before the slice
//! generator ever runs. The final code for position `i` is the patient code
//! concatenated with the projected BiLSTM output at `i`.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use volsynth_nn::layers::{dense, lstm_step};
use volsynth_nn::params::{head_std, normal_array, zeros};
use volsynth_nn::{ParamSet, Tensor, Vars};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Patient-level code length, shared by every position.
    pub d_patient: usize,
    /// Noise vector length fed to the sequencer at each position.
    pub d_eps: usize,
    /// LSTM hidden size per direction.
    pub hidden: usize,
    /// Projected per-position code length.
    pub d_slice: usize,
}

impl LatentConfig {
    pub fn desk() -> LatentConfig {
        LatentConfig { d_patient: 32, d_eps: 16, hidden: 32, d_slice: 32 }
    }

    /// Length of the code consumed by the slice generator.
    pub fn latent_dim(&self) -> usize {
        self.d_patient + self.d_slice
    }
}

/// Number of three-plane windows a depth-`depth` volume decomposes into.
pub fn slice_count(depth: usize) -> usize {
    assert!(depth >= 3, "depth {depth} too small");
    depth - 2
}

/// All random inputs for one batch of volumes, drawn up front so a training
/// step or a generation call is a pure function of the plan.
#[derive(Clone, Debug)]
pub struct LatentPlan {
    /// `[batch, d_patient]`
    pub z_patient: Array2<f64>,
    /// `[batch, hidden]`, shared by the forward and backward directions.
    pub h0: Array2<f64>,
    /// `[batch, steps, d_eps]`
    pub eps: Array3<f64>,
}

impl LatentPlan {
    pub fn batch(&self) -> usize {
        self.z_patient.dim().0
    }

    pub fn steps(&self) -> usize {
        self.eps.dim().1
    }
}

/// Draw a plan; order (patient, initial state, noises) is fixed.
pub fn sample_latent_plan(
    cfg: &LatentConfig,
    batch: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> LatentPlan {
    let z_patient = normal_array(rng, &[batch, cfg.d_patient], 1.0)
        .into_dimensionality()
        .expect("2-d");
    let h0 = normal_array(rng, &[batch, cfg.hidden], 1.0)
        .into_dimensionality()
        .expect("2-d");
    let eps = normal_array(rng, &[batch, steps, cfg.d_eps], 1.0)
        .into_dimensionality()
        .expect("3-d");
    LatentPlan { z_patient, h0, eps }
}

/// Initialize sequencer parameters under the `rv.` prefix.
pub fn init_sequencer(cfg: &LatentConfig, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for dir in ["fwd", "bwd"] {
        p.insert(
            format!("rv.{dir}.wx"),
            normal_array(rng, &[cfg.d_eps, 4 * cfg.hidden], head_std(cfg.d_eps)),
        );
        p.insert(
            format!("rv.{dir}.wh"),
            normal_array(rng, &[cfg.hidden, 4 * cfg.hidden], head_std(cfg.hidden)),
        );
        let mut bias = zeros(&[4 * cfg.hidden]);
        // open the forget gates at the start of training
        bias.slice_mut(ndarray::s![cfg.hidden..2 * cfg.hidden]).fill(1.0);
        p.insert(format!("rv.{dir}.b"), bias);
    }
    p.insert(
        "rv.proj.w",
        normal_array(rng, &[2 * cfg.hidden, cfg.d_slice], head_std(2 * cfg.hidden)),
    );
    p.insert("rv.proj.b", zeros(&[cfg.d_slice]));
    p
}

/// Run the sequencer over a plan: `[batch, steps, latent_dim]` codes.
pub fn sequence_latents(cfg: &LatentConfig, vars: &Vars, plan: &LatentPlan) -> Tensor {
    let (batch, steps) = (plan.batch(), plan.steps());
    assert!(steps >= 1, "empty plan");
    let h0 = Tensor::constant(plan.h0.clone().into_dyn());
    let c0 = Tensor::constant(ArrayD::zeros(IxDyn(&[batch, cfg.hidden])));
    let inputs: Vec<Tensor> = (0..steps)
        .map(|t| {
            Tensor::constant(plan.eps.slice(ndarray::s![.., t, ..]).to_owned().into_dyn())
        })
        .collect();

    let run = |prefix: &str, order: Vec<usize>| -> Vec<Tensor> {
        let wx = vars.get(&format!("rv.{prefix}.wx"));
        let wh = vars.get(&format!("rv.{prefix}.wh"));
        let b = vars.get(&format!("rv.{prefix}.b"));
        let mut h = h0.clone();
        let mut c = c0.clone();
        let mut out = vec![h.clone(); steps];
        for t in order {
            let (nh, nc) = lstm_step(&inputs[t], &h, &c, wx, wh, b);
            h = nh;
            c = nc;
            out[t] = h.clone();
        }
        out
    };
    let fwd = run("fwd", (0..steps).collect());
    let bwd = run("bwd", (0..steps).rev().collect());

    let z_patient = Tensor::constant(plan.z_patient.clone().into_dyn());
    let dim = cfg.latent_dim();
    let per_step: Vec<Tensor> = (0..steps)
        .map(|t| {
            let both = Tensor::concat(&[fwd[t].clone(), bwd[t].clone()], 1);
            let z_slice = dense(&both, vars.get("rv.proj.w"), vars.get("rv.proj.b"));
            Tensor::concat(&[z_patient.clone(), z_slice], 1).reshape(&[batch, 1, dim])
        })
        .collect();
    Tensor::concat(&per_step, 1)
}
