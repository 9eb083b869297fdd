//! Slice generator, the two discriminators, and checkpointing.
//!
//! One volume is produced as a sequence of three-plane windows: the
//! sequencer ([`crate::latent`]) maps noise to per-position codes, a shared
//! 2-d generator decodes each code into three consecutive planes, and
//! [`crate::voldata::assemble`] stitches the windows. One discriminator
//! judges single windows (with a depth-position channel), the other judges
//! contiguous plane slabs volumetrically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use volsynth_nn::layers::{conv2d, conv3d, conv_transpose2d, dense};
use volsynth_nn::params::{he_std, head_std, normal_array, save_arrays, zeros};
use volsynth_nn::{Adam, ParamSet, Tensor, Vars};

use crate::error::{Error, Result};
use crate::latent::{
    sample_latent_plan, sequence_latents, init_sequencer, slice_count, LatentConfig,
};
use crate::voldata::{assemble, Provenance, Volume};

pub const LEAK: f64 = 0.2;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SganConfig {
    /// Output volume depth (number of axial planes).
    pub depth: usize,
    /// Plane height and width.
    pub out_hw: usize,
    /// Planes per slab fed to the volumetric discriminator.
    pub slab_t: usize,
    /// Windows judged by the slice discriminator per step.
    pub slices_per_step: usize,
    pub latent: LatentConfig,
    /// Generator spatial seed; doubles once per entry of `gen_channels`.
    pub gen_base_hw: usize,
    pub gen_channels: Vec<usize>,
    pub dslice_channels: Vec<usize>,
    pub dslab_channels: Vec<usize>,
}

impl SganConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> SganConfig {
        SganConfig {
            depth: 32,
            out_hw: 32,
            slab_t: 8,
            slices_per_step: 4,
            latent: LatentConfig::desk(),
            gen_base_hw: 4,
            gen_channels: vec![64, 32, 16],
            dslice_channels: vec![16, 32, 64],
            dslab_channels: vec![8, 16, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth < 3 {
            return fail(format!("depth {} < 3", self.depth));
        }
        if self.gen_channels.is_empty()
            || self.dslice_channels.is_empty()
            || self.dslab_channels.is_empty()
        {
            return fail("empty channel list".to_string());
        }
        let ups = 1usize << self.gen_channels.len();
        if self.gen_base_hw * ups != self.out_hw {
            return fail(format!(
                "generator reaches {} but out_hw is {}",
                self.gen_base_hw * ups,
                self.out_hw
            ));
        }
        let ds = 1usize << self.dslice_channels.len();
        if self.out_hw % ds != 0 || self.out_hw / ds == 0 {
            return fail(format!("out_hw {} not divisible by {}", self.out_hw, ds));
        }
        let dv = 1usize << self.dslab_channels.len();
        if self.slab_t % dv != 0 || self.out_hw % dv != 0 {
            return fail(format!(
                "slab {}x{} not divisible by {}",
                self.slab_t, self.out_hw, dv
            ));
        }
        if self.depth < self.slab_t + 2 {
            return fail(format!(
                "depth {} too small for slab of {}",
                self.depth, self.slab_t
            ));
        }
        if self.slab_t < self.slices_per_step + 2 {
            return fail(format!(
                "slab of {} cannot host {} windows",
                self.slab_t, self.slices_per_step
            ));
        }
        Ok(())
    }

    fn dslice_head_in(&self) -> usize {
        let s = self.out_hw >> self.dslice_channels.len();
        self.dslice_channels.last().unwrap() * s * s
    }

    fn dslab_head_in(&self) -> usize {
        let s = self.out_hw >> self.dslab_channels.len();
        let t = self.slab_t >> self.dslab_channels.len();
        self.dslab_channels.last().unwrap() * t * s * s
    }
}

#[derive(Clone)]
pub struct ModelState {
    pub config: SganConfig,
    /// All four sub-networks, prefixed `rv.`, `gen.`, `dslice.`, `dslab.`.
    pub params: ParamSet,
}

pub fn init_model(config: &SganConfig, seed: u64) -> ModelState {
    config.validate().expect("invalid model config");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = init_sequencer(&config.latent, &mut rng);

    // generator
    let c0 = config.gen_channels[0];
    let base = config.gen_base_hw;
    let latent_dim = config.latent.latent_dim();
    params.insert(
        "gen.dense.w",
        normal_array(&mut rng, &[latent_dim, c0 * base * base], he_std(latent_dim)),
    );
    params.insert("gen.dense.b", zeros(&[c0 * base * base]));
    for i in 0..config.gen_channels.len() - 1 {
        let (cin, cout) = (config.gen_channels[i], config.gen_channels[i + 1]);
        params.insert(
            format!("gen.up{i}.w"),
            normal_array(&mut rng, &[cin, cout, 4, 4], he_std(cin * 16)),
        );
        params.insert(format!("gen.up{i}.b"), zeros(&[cout]));
    }
    let clast = *config.gen_channels.last().unwrap();
    params.insert(
        "gen.out.w",
        normal_array(&mut rng, &[clast, 3, 4, 4], head_std(clast * 16)),
    );
    params.insert("gen.out.b", zeros(&[3]));

    // slice discriminator: three intensity planes plus a position channel
    let mut cin = 4;
    for (i, &cout) in config.dslice_channels.iter().enumerate() {
        params.insert(
            format!("dslice.conv{i}.w"),
            normal_array(&mut rng, &[cout, cin, 4, 4], he_std(cin * 16)),
        );
        params.insert(format!("dslice.conv{i}.b"), zeros(&[cout]));
        cin = cout;
    }
    params.insert(
        "dslice.head.w",
        normal_array(&mut rng, &[config.dslice_head_in(), 1], head_std(config.dslice_head_in())),
    );
    params.insert("dslice.head.b", zeros(&[1]));

    // slab discriminator: intensity plus a start-position channel
    let mut cin = 2;
    for (i, &cout) in config.dslab_channels.iter().enumerate() {
        params.insert(
            format!("dslab.conv{i}.w"),
            normal_array(&mut rng, &[cout, cin, 4, 4, 4], he_std(cin * 64)),
        );
        params.insert(format!("dslab.conv{i}.b"), zeros(&[cout]));
        cin = cout;
    }
    params.insert(
        "dslab.head.w",
        normal_array(&mut rng, &[config.dslab_head_in(), 1], head_std(config.dslab_head_in())),
    );
    params.insert("dslab.head.b", zeros(&[1]));

    ModelState { config: config.clone(), params }
}

/// Decode one code batch `[B, latent_dim]` into windows `[B, 3, hw, hw]`
/// in [-1, 1].
pub fn generator_forward(cfg: &SganConfig, vars: &Vars, z: &Tensor) -> Tensor {
    let batch = z.shape()[0];
    let c0 = cfg.gen_channels[0];
    let base = cfg.gen_base_hw;
    let mut x = dense(z, vars.get("gen.dense.w"), vars.get("gen.dense.b"))
        .leaky_relu(LEAK)
        .reshape(&[batch, c0, base, base]);
    for i in 0..cfg.gen_channels.len() - 1 {
        x = conv_transpose2d(
            &x,
            vars.get(&format!("gen.up{i}.w")),
            vars.get(&format!("gen.up{i}.b")),
            2,
            1,
        )
        .leaky_relu(LEAK);
    }
    conv_transpose2d(&x, vars.get("gen.out.w"), vars.get("gen.out.b"), 2, 1).tanh()
}

/// Score windows-with-position `[B, 4, hw, hw]`: logits `[B]`.
pub fn dslice_forward(cfg: &SganConfig, vars: &Vars, x: &Tensor) -> Tensor {
    assert_eq!(x.shape()[1], 4, "window input needs a position channel");
    let batch = x.shape()[0];
    let mut h = x.clone();
    for i in 0..cfg.dslice_channels.len() {
        h = conv2d(
            &h,
            vars.get(&format!("dslice.conv{i}.w")),
            vars.get(&format!("dslice.conv{i}.b")),
            2,
            1,
        )
        .leaky_relu(LEAK);
    }
    let flat = h.reshape(&[batch, cfg.dslice_head_in()]);
    dense(&flat, vars.get("dslice.head.w"), vars.get("dslice.head.b")).reshape(&[batch])
}

/// Score slabs-with-position `[B, 2, T, hw, hw]`: logits `[B]`.
pub fn dslab_forward(cfg: &SganConfig, vars: &Vars, x: &Tensor) -> Tensor {
    assert_eq!(x.shape()[1], 2, "slab input needs a position channel");
    let batch = x.shape()[0];
    let mut h = x.clone();
    for i in 0..cfg.dslab_channels.len() {
        h = conv3d(
            &h,
            vars.get(&format!("dslab.conv{i}.w")),
            vars.get(&format!("dslab.conv{i}.b")),
            2,
            1,
        )
        .leaky_relu(LEAK);
    }
    let flat = h.reshape(&[batch, cfg.dslab_head_in()]);
    dense(&flat, vars.get("dslab.head.w"), vars.get("dslab.head.b")).reshape(&[batch])
}

/// Append the depth-position channel to windows `[B, 3, h, w]`; the value
/// is `center / (depth - 1)`.
pub fn slice_with_position(x: &Tensor, centers: &[usize], depth: usize) -> Tensor {
    let shape = x.shape();
    let (batch, h, w) = (shape[0], shape[2], shape[3]);
    assert_eq!(centers.len(), batch, "one center per sample");
    let mut pos = ArrayD::zeros(IxDyn(&[batch, 1, h, w]));
    for (b, &c) in centers.iter().enumerate() {
        let v = c as f64 / (depth - 1) as f64;
        pos.slice_mut(ndarray::s![b, .., .., ..]).fill(v);
    }
    Tensor::concat(&[x.clone(), Tensor::constant(pos)], 1)
}

/// Append the start-position channel to slabs `[B, 1, T, h, w]`; the value
/// is `start / (depth - t)`.
pub fn slab_with_position(x: &Tensor, starts: &[usize], depth: usize, t: usize) -> Tensor {
    let shape = x.shape();
    let (batch, h, w) = (shape[0], shape[3], shape[4]);
    assert_eq!(starts.len(), batch, "one start per sample");
    let mut pos = ArrayD::zeros(IxDyn(&[batch, 1, t, h, w]));
    for (b, &s) in starts.iter().enumerate() {
        let v = s as f64 / (depth - t) as f64;
        pos.slice_mut(ndarray::s![b, .., .., .., ..]).fill(v);
    }
    Tensor::concat(&[x.clone(), Tensor::constant(pos)], 1)
}

/// Map stored voxels [0, 1] to network range [-1, 1].
pub fn to_net(v: f32) -> f64 {
    v as f64 * 2.0 - 1.0
}

/// Map network output [-1, 1] back to stored voxel range.
pub fn from_net(v: f64) -> f32 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0)) as f32
}

/// Sample one full volume. Deterministic in (model, seed).
pub fn generate_volume(state: &ModelState, seed: u64) -> Volume {
    let cfg = &state.config;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let steps = slice_count(cfg.depth);
    let plan = sample_latent_plan(&cfg.latent, 1, steps, &mut rng);
    let vars = state.params.bind(|_| false);
    let latents = sequence_latents(&cfg.latent, &vars, &plan);
    let hw = cfg.out_hw;
    let mut windows = Vec::with_capacity(steps);
    for t in 0..steps {
        let z = latents.slice_axis(1, t, 1).reshape(&[1, cfg.latent.latent_dim()]);
        let g = generator_forward(cfg, &vars, &z);
        let v = g.value();
        windows.push(Array3::from_shape_fn((3, hw, hw), |(c, y, x)| {
            from_net(v[[0, c, y, x]])
        }));
    }
    Volume {
        data: assemble(&windows),
        spacing_mm: [1.25, 0.85, 0.85],
        provenance: Provenance::Synthetic,
        id: format!("synth-{seed:06}"),
    }
}

/// Sample `count` volumes with consecutive seeds starting at `base_seed`.
pub fn generate_volumes(state: &ModelState, count: usize, base_seed: u64) -> Vec<Volume> {
    (0..count)
        .map(|i| generate_volume(state, base_seed + i as u64))
        .collect()
}

// ---- checkpoints ----

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    steps: u64,
    config: SganConfig,
}

pub struct Checkpoint {
    pub state: ModelState,
    pub steps: u64,
    pub opt_d: Option<BTreeMap<String, ArrayD<f64>>>,
    pub opt_g: Option<BTreeMap<String, ArrayD<f64>>>,
}

const SUBNETS: [&str; 4] = ["rv", "gen", "dslice", "dslab"];

/// Write a checkpoint directory: `config.json`, one blob per sub-network,
/// and optionally the two optimizer states.
pub fn save_checkpoint(
    state: &ModelState,
    steps: u64,
    dir: &Path,
    optimizers: Option<(&Adam, &Adam)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        steps,
        config: state.config.clone(),
    };
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&meta)?)?;
    for net in SUBNETS {
        let sub = state.params.subset(&format!("{net}."));
        save_arrays(&dir.join(net), &sub)?;
    }
    if let Some((opt_d, opt_g)) = optimizers {
        save_arrays(&dir.join("opt_d"), &opt_d.export_state())?;
        save_arrays(&dir.join("opt_g"), &opt_g.export_state())?;
    }
    Ok(())
}

/// Read a checkpoint directory and validate it against a freshly
/// initialized model of the same configuration.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta =
        serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format_version {} (expected {CHECKPOINT_VERSION})",
            meta.format_version
        )));
    }
    meta.config.validate()?;
    let mut map = BTreeMap::new();
    for net in SUBNETS {
        let sub = volsynth_nn::params::load_arrays(&dir.join(net))?;
        for (name, a) in sub {
            if !name.starts_with(&format!("{net}.")) {
                return Err(Error::Checkpoint(format!("{name} in {net} blob")));
            }
            map.insert(name, a);
        }
    }
    let reference = init_model(&meta.config, 0);
    for (name, a) in reference.params.iter() {
        match map.get(name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(loaded) if loaded.shape() != a.shape() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    a.shape()
                )));
            }
            _ => {}
        }
    }
    if map.len() != reference.params.len() {
        return Err(Error::Checkpoint("extra parameters in checkpoint".to_string()));
    }
    let opt_d = match volsynth_nn::params::load_arrays(&dir.join("opt_d")) {
        Ok(m) => Some(m),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let opt_g = match volsynth_nn::params::load_arrays(&dir.join("opt_g")) {
        Ok(m) => Some(m),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Checkpoint {
        state: ModelState { config: meta.config, params: ParamSet::from_inner(map) },
        steps: meta.steps,
        opt_d,
        opt_g,
    })
}

/// Draw a slab start uniformly from the valid interior range, then `n`
/// distinct window centers inside it; shared by real and fake sides.
pub fn sample_step_positions(
    cfg: &SganConfig,
    rng: &mut impl Rng,
) -> (usize, Vec<usize>) {
    let start = rng.gen_range(1..=cfg.depth - 1 - cfg.slab_t);
    let lo = start + 1;
    let hi = start + cfg.slab_t - 2; // inclusive
    let mut pool: Vec<usize> = (lo..=hi).collect();
    let mut centers = Vec::with_capacity(cfg.slices_per_step);
    for _ in 0..cfg.slices_per_step {
        let k = rng.gen_range(0..pool.len());
        centers.push(pool.swap_remove(k));
    }
    centers.sort_unstable();
    (start, centers)
}
