//! Nodule simulation: VOI extraction and paste-back, sphere compositing,
//! placement sampling, the injector/eraser conditional GANs, and the
//! balanced two-domain dataset mix.
//!
//! Ground-truth nodules are bright spheres with a cosine falloff shell
//! composited into lung tissue. The injector learns to inpaint one into a
//! masked VOI; the eraser learns to remove one. Both only ever touch
//! voxels inside their VOI, which keeps locality assertable bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use volsynth_nn::layers::{conv3d, conv_transpose3d, dense};
use volsynth_nn::params::{he_std, head_std, normal_array, zeros};
use volsynth_nn::tensor::grad;
use volsynth_nn::{Adam, ParamSet, Tensor, Vars};

use crate::error::{Error, Result};
use crate::losses::{
    js_discriminator_loss, js_generator_loss, r1_penalty, BatchScores, LossKind, StepReport,
};
use crate::sgan::{from_net, to_net, LEAK};
use crate::voldata::{NoiseDomain, Provenance, Volume};

pub const VOI_EDGE: usize = 16;

/// Cubic sub-volume with its source coordinates.
#[derive(Clone, Debug)]
pub struct Voi {
    pub cube: Array3<f32>,
    pub origin: [usize; 3],
}

impl Voi {
    pub fn edge(&self) -> usize {
        self.cube.dim().0
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoduleSpec {
    /// (z, y, x) voxel position in the host volume.
    pub center: [usize; 3],
    pub radius_vox: f64,
    pub intensity: f64,
}

/// Cube of `edge` voxels centered on `center`; the center voxel lands at
/// local index `edge/2` on each axis.
pub fn extract_voi(data: &Array3<f32>, center: [usize; 3], edge: usize) -> Result<Voi> {
    if edge % 2 != 0 || edge == 0 {
        return Err(Error::Config(format!("voi edge {edge} must be even")));
    }
    let dims = [data.dim().0, data.dim().1, data.dim().2];
    let half = edge / 2;
    let mut origin = [0usize; 3];
    for a in 0..3 {
        if center[a] < half || center[a] + half > dims[a] {
            return Err(Error::Bounds(format!(
                "voi at {center:?} edge {edge} leaves the volume {dims:?}"
            )));
        }
        origin[a] = center[a] - half;
    }
    let mut cube = Array3::zeros((edge, edge, edge));
    for z in 0..edge {
        for y in 0..edge {
            for x in 0..edge {
                cube[[z, y, x]] = data[[origin[0] + z, origin[1] + y, origin[2] + x]];
            }
        }
    }
    Ok(Voi { cube, origin })
}

/// Write the cube back over exactly its footprint.
pub fn paste_back(data: &mut Array3<f32>, voi: &Voi) -> Result<()> {
    let dims = [data.dim().0, data.dim().1, data.dim().2];
    let e = voi.edge();
    for a in 0..3 {
        if voi.origin[a] + e > dims[a] {
            return Err(Error::Bounds(format!(
                "voi origin {:?} edge {e} leaves the volume {dims:?}",
                voi.origin
            )));
        }
    }
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                data[[voi.origin[0] + z, voi.origin[1] + y, voi.origin[2] + x]] =
                    voi.cube[[z, y, x]];
            }
        }
    }
    Ok(())
}

fn center_distance(edge: usize, z: usize, y: usize, x: usize) -> f64 {
    let c = (edge / 2) as f64;
    let (dz, dy, dx) = (z as f64 - c, y as f64 - c, x as f64 - c);
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Zero out the central sphere (strictly inside `radius`), keeping
/// everything else untouched. Radius zero is the identity.
pub fn mask_center(voi: &Voi, radius: f64) -> Result<Voi> {
    let e = voi.edge();
    if radius >= e as f64 / 2.0 {
        return Err(Error::Config(format!(
            "mask radius {radius} does not fit inside edge {e}"
        )));
    }
    let mut out = voi.clone();
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                if center_distance(e, z, y, x) < radius {
                    out.cube[[z, y, x]] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Binary sphere indicator with the same center convention.
pub fn sphere_mask(edge: usize, radius: f64) -> Array3<f32> {
    Array3::from_shape_fn((edge, edge, edge), |(z, y, x)| {
        if center_distance(edge, z, y, x) < radius {
            1.0
        } else {
            0.0
        }
    })
}

/// Blend a bright sphere into `data`: weight 1 inside `radius - 1`, cosine
/// falloff to 0 at `radius + 1`, `v' = v + (A - v) w`, clamped to [0, 1].
pub fn composite_into(data: &mut Array3<f32>, center: [f64; 3], radius: f64, intensity: f64) {
    let dims = [data.dim().0, data.dim().1, data.dim().2];
    let reach = radius + 1.0;
    let lo = |c: f64| ((c - reach).floor().max(0.0)) as usize;
    let hi = |c: f64, d: usize| ((c + reach).ceil() as usize + 1).min(d);
    for z in lo(center[0])..hi(center[0], dims[0]) {
        for y in lo(center[1])..hi(center[1], dims[1]) {
            for x in lo(center[2])..hi(center[2], dims[2]) {
                let dz = z as f64 - center[0];
                let dy = y as f64 - center[1];
                let dx = x as f64 - center[2];
                let d = (dz * dz + dy * dy + dx * dx).sqrt();
                let w = if d <= radius - 1.0 {
                    1.0
                } else if d >= radius + 1.0 {
                    0.0
                } else {
                    0.5 * (1.0 + (std::f64::consts::PI * (d - radius + 1.0) / 2.0).cos())
                };
                if w > 0.0 {
                    let v = data[[z, y, x]] as f64;
                    data[[z, y, x]] = (v + (intensity - v) * w).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
}

/// Composite native nodules into a phantom during corpus construction;
/// provenance is unchanged because this is part of making the "scan".
pub fn add_native_nodules(volume: &mut Volume, specs: &[NoduleSpec]) {
    for s in specs {
        composite_into(
            &mut volume.data,
            [s.center[0] as f64, s.center[1] as f64, s.center[2] as f64],
            s.radius_vox,
            s.intensity,
        );
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoduleDists {
    /// `count_probs[k]` is the probability of placing `k` nodules.
    pub count_probs: Vec<f64>,
    pub radius_ln_mean: f64,
    pub radius_ln_std: f64,
    pub radius_clip: [f64; 2],
    pub intensity_range: [f64; 2],
}

impl NoduleDists {
    pub fn desk() -> NoduleDists {
        NoduleDists {
            count_probs: vec![0.0, 0.3, 0.4, 0.2, 0.1],
            radius_ln_mean: 3.5f64.ln(),
            radius_ln_std: 0.35,
            radius_clip: [2.0, 8.0],
            intensity_range: [0.5, 0.8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.count_probs.iter().sum();
        if self.count_probs.is_empty() || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config("count probabilities must sum to 1".to_string()));
        }
        if self.count_probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Config("negative count probability".to_string()));
        }
        if self.radius_clip[0] <= 0.0 || self.radius_clip[0] > self.radius_clip[1] {
            return Err(Error::Config("bad radius clip range".to_string()));
        }
        Ok(())
    }

    fn sample_count(&self, rng: &mut ChaCha12Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in self.count_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.count_probs.len() - 1
    }

    fn sample_radius(&self, rng: &mut ChaCha12Rng) -> f64 {
        let n: f64 = rand_distr::Distribution::sample(
            &rand_distr::Normal::new(self.radius_ln_mean, self.radius_ln_std).expect("std"),
            rng,
        );
        n.exp().clamp(self.radius_clip[0], self.radius_clip[1])
    }

    fn sample_intensity(&self, rng: &mut ChaCha12Rng) -> f64 {
        rng.gen_range(self.intensity_range[0]..self.intensity_range[1])
    }
}

/// Lung voxels far enough from the border that a VOI centered there
/// stays inside the volume. Volumes where this comes back empty (the
/// flood-fill estimate can drain a cavity through an airway that reaches
/// the border) should be dropped at corpus selection.
pub fn voi_candidates(lung_mask: &Array3<bool>, edge: usize) -> Vec<[usize; 3]> {
    let dims = [lung_mask.dim().0, lung_mask.dim().1, lung_mask.dim().2];
    let half = edge / 2;
    let mut candidates = Vec::new();
    for z in half..dims[0].saturating_sub(half) {
        for y in half..dims[1].saturating_sub(half) {
            for x in half..dims[2].saturating_sub(half) {
                if lung_mask[[z, y, x]] {
                    candidates.push([z, y, x]);
                }
            }
        }
    }
    candidates
}

/// Draw a nodule plan inside `lung_mask`. Centers keep a VOI-sized margin
/// from the volume border; falloff shells of distinct nodules do not
/// overlap. Fails with a placement error when 100 attempts cannot site a
/// nodule.
pub fn sample_nodule_plan(
    dists: &NoduleDists,
    lung_mask: &Array3<bool>,
    edge: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<NoduleSpec>> {
    dists.validate()?;
    let count = dists.sample_count(rng);
    if count == 0 {
        return Ok(Vec::new());
    }
    let candidates = voi_candidates(lung_mask, edge);
    if candidates.is_empty() {
        return Err(Error::Placement("no lung voxel clears the voi margin".to_string()));
    }
    let mut specs: Vec<NoduleSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..100 {
            let center = candidates[rng.gen_range(0..candidates.len())];
            let radius = dists.sample_radius(rng).min(edge as f64 / 2.0);
            let intensity = dists.sample_intensity(rng);
            let clear = specs.iter().all(|s| {
                let dz = s.center[0] as f64 - center[0] as f64;
                let dy = s.center[1] as f64 - center[1] as f64;
                let dx = s.center[2] as f64 - center[2] as f64;
                let d = (dz * dz + dy * dy + dx * dx).sqrt();
                d >= (s.radius_vox + 1.0) + (radius + 1.0)
            });
            if clear {
                specs.push(NoduleSpec { center, radius_vox: radius, intensity });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place nodule {} of {count} in 100 attempts",
                specs.len() + 1
            )));
        }
    }
    Ok(specs)
}

// ---- injector / eraser networks ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Net {
    Injector,
    Eraser,
}

impl Net {
    fn prefix(self) -> &'static str {
        match self {
            Net::Injector => "inj",
            Net::Eraser => "ers",
        }
    }

    fn g_in_channels(self) -> usize {
        match self {
            // masked voi, mask, noise
            Net::Injector => 3,
            // voi with nodule, noise
            Net::Eraser => 2,
        }
    }
}

/// Both conditional GANs in one parameter set, prefixes `inj.`/`ers.`
/// with `.g.`/`.d.` sub-prefixes.
pub struct NoduleGans {
    pub edge: usize,
    pub base: usize,
    pub params: ParamSet,
}

pub fn init_nodule_gans(edge: usize, base: usize, seed: u64) -> Result<NoduleGans> {
    if edge % 4 != 0 || edge < 8 {
        return Err(Error::Config(format!("voi edge {edge} must be a multiple of 4, >= 8")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for net in [Net::Injector, Net::Eraser] {
        let p = net.prefix();
        let cin = net.g_in_channels();
        params.insert(
            format!("{p}.g.enc0.w"),
            normal_array(&mut rng, &[base, cin, 4, 4, 4], he_std(cin * 64)),
        );
        params.insert(format!("{p}.g.enc0.b"), zeros(&[base]));
        params.insert(
            format!("{p}.g.enc1.w"),
            normal_array(&mut rng, &[2 * base, base, 4, 4, 4], he_std(base * 64)),
        );
        params.insert(format!("{p}.g.enc1.b"), zeros(&[2 * base]));
        params.insert(
            format!("{p}.g.dec0.w"),
            normal_array(&mut rng, &[2 * base, base, 4, 4, 4], he_std(2 * base * 64)),
        );
        params.insert(format!("{p}.g.dec0.b"), zeros(&[base]));
        params.insert(
            format!("{p}.g.dec1.w"),
            normal_array(&mut rng, &[2 * base, base, 4, 4, 4], he_std(2 * base * 64)),
        );
        params.insert(format!("{p}.g.dec1.b"), zeros(&[base]));
        // zero head: the residual generator starts as the identity map
        params.insert(format!("{p}.g.out.w"), zeros(&[1, base, 3, 3, 3]));
        params.insert(format!("{p}.g.out.b"), zeros(&[1]));

        params.insert(
            format!("{p}.d.conv0.w"),
            normal_array(&mut rng, &[base, 2, 4, 4, 4], he_std(2 * 64)),
        );
        params.insert(format!("{p}.d.conv0.b"), zeros(&[base]));
        params.insert(
            format!("{p}.d.conv1.w"),
            normal_array(&mut rng, &[2 * base, base, 4, 4, 4], he_std(base * 64)),
        );
        params.insert(format!("{p}.d.conv1.b"), zeros(&[2 * base]));
        let head_in = 2 * base * (edge / 4) * (edge / 4) * (edge / 4);
        params.insert(
            format!("{p}.d.head.w"),
            normal_array(&mut rng, &[head_in, 1], head_std(head_in)),
        );
        params.insert(format!("{p}.d.head.b"), zeros(&[1]));
    }
    Ok(NoduleGans { edge, base, params })
}

fn voi_g_forward(vars: &Vars, net: Net, x: &Tensor) -> Tensor {
    let p = net.prefix();
    let get = |n: String| vars.get(&n);
    let e0 = conv3d(x, get(format!("{p}.g.enc0.w")), get(format!("{p}.g.enc0.b")), 2, 1)
        .leaky_relu(LEAK);
    let e1 = conv3d(&e0, get(format!("{p}.g.enc1.w")), get(format!("{p}.g.enc1.b")), 2, 1)
        .leaky_relu(LEAK);
    let d0 = conv_transpose3d(
        &e1,
        get(format!("{p}.g.dec0.w")),
        get(format!("{p}.g.dec0.b")),
        2,
        1,
    )
    .leaky_relu(LEAK);
    let skip = Tensor::concat(&[d0, e0], 1);
    let d1 = conv_transpose3d(
        &skip,
        get(format!("{p}.g.dec1.w")),
        get(format!("{p}.g.dec1.b")),
        2,
        1,
    )
    .leaky_relu(LEAK);
    let delta = conv3d(&d1, get(format!("{p}.g.out.w")), get(format!("{p}.g.out.b")), 1, 1)
        .tanh()
        .scale(2.0);
    // residual on the window channel; the tanh span covers filling a
    // masked hole (-1) up to any tissue value
    x.slice_axis(1, 0, 1).add(&delta)
}

fn voi_d_forward(vars: &Vars, net: Net, x: &Tensor) -> Tensor {
    let p = net.prefix();
    let get = |n: String| vars.get(&n);
    let h0 = conv3d(x, get(format!("{p}.d.conv0.w")), get(format!("{p}.d.conv0.b")), 2, 1)
        .leaky_relu(LEAK);
    let h1 = conv3d(&h0, get(format!("{p}.d.conv1.w")), get(format!("{p}.d.conv1.b")), 2, 1)
        .leaky_relu(LEAK);
    let shape = h1.shape().to_vec();
    let flat = shape[1] * shape[2] * shape[3] * shape[4];
    let scores = dense(
        &h1.reshape(&[shape[0], flat]),
        get(format!("{p}.d.head.w")),
        get(format!("{p}.d.head.b")),
    );
    let b = shape[0];
    scores.reshape(&[b])
}

/// One paired training example on a VOI cube.
#[derive(Clone, Debug)]
pub struct VoiExample {
    pub clean: Array3<f32>,
    pub noduled: Array3<f32>,
    pub mask: Array3<f32>,
}

/// Build centered single-nodule examples from volumes and their lung
/// masks. The nodule sits at the VOI center; its radius is capped so the
/// falloff shell stays inside the cube.
pub fn make_voi_examples(
    volumes: &[Array3<f32>],
    masks: &[Array3<bool>],
    dists: &NoduleDists,
    per_volume: usize,
    edge: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<VoiExample>> {
    assert_eq!(volumes.len(), masks.len());
    let mut out = Vec::with_capacity(volumes.len() * per_volume);
    for (vol, mask) in volumes.iter().zip(masks) {
        let candidates = voi_candidates(mask, edge);
        if candidates.is_empty() {
            return Err(Error::Placement(
                "volume has no lung voxel clearing the voi margin".to_string(),
            ));
        }
        for _ in 0..per_volume {
            let center = candidates[rng.gen_range(0..candidates.len())];
            let radius = dists.sample_radius(rng).min(edge as f64 / 2.0 - 1.0);
            let intensity = dists.sample_intensity(rng);
            let clean = extract_voi(vol, center, edge)?;
            let mut noduled = clean.cube.clone();
            let c = (edge / 2) as f64;
            composite_into(&mut noduled, [c, c, c], radius, intensity);
            out.push(VoiExample {
                clean: clean.cube,
                noduled,
                mask: sphere_mask(edge, radius),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoiGanTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub l1_weight: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl VoiGanTrainConfig {
    pub fn desk() -> VoiGanTrainConfig {
        VoiGanTrainConfig {
            steps: 400,
            batch: 4,
            lr: 2e-4,
            l1_weight: 10.0,
            gamma: 10.0,
            seed: 0,
        }
    }
}

fn to_net_arr(cube: &Array3<f32>) -> Vec<f64> {
    cube.iter().map(|&v| to_net(v)).collect()
}

/// Net-domain channel stack for the generator plus the target cube and
/// the raw mask channel.
fn g_batch(
    examples: &[VoiExample],
    idx: &[usize],
    net: Net,
    edge: usize,
    rng: &mut ChaCha12Rng,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let b = idx.len();
    let cin = net.g_in_channels();
    let vox = edge * edge * edge;
    let mut input = ArrayD::zeros(IxDyn(&[b, cin, edge, edge, edge]));
    let mut target = ArrayD::zeros(IxDyn(&[b, 1, edge, edge, edge]));
    let mut mask = ArrayD::zeros(IxDyn(&[b, 1, edge, edge, edge]));
    for (bi, &i) in idx.iter().enumerate() {
        let ex = &examples[i];
        let (cond, tgt): (Vec<f64>, Vec<f64>) = match net {
            Net::Injector => {
                let mut masked = ex.clean.clone();
                for (v, m) in masked.iter_mut().zip(ex.mask.iter()) {
                    if *m > 0.5 {
                        *v = 0.0;
                    }
                }
                (to_net_arr(&masked), to_net_arr(&ex.noduled))
            }
            Net::Eraser => (to_net_arr(&ex.noduled), to_net_arr(&ex.clean)),
        };
        let flat_i = input.as_slice_mut().expect("standard layout");
        let base = bi * cin * vox;
        flat_i[base..base + vox].copy_from_slice(&cond);
        if net == Net::Injector {
            for (k, m) in ex.mask.iter().enumerate() {
                flat_i[base + vox + k] = *m as f64;
            }
        }
        let flat_t = target.as_slice_mut().expect("standard layout");
        flat_t[bi * vox..(bi + 1) * vox].copy_from_slice(&tgt);
        let flat_m = mask.as_slice_mut().expect("standard layout");
        for (k, m) in ex.mask.iter().enumerate() {
            flat_m[bi * vox + k] = *m as f64;
        }
    }
    // last channel is always fresh noise
    let noise = normal_array(rng, &[b, 1, edge, edge, edge], 1.0);
    let noise_flat = noise.as_slice().expect("standard layout");
    {
        let flat_i = input.as_slice_mut().expect("standard layout");
        for bi in 0..b {
            let dst = bi * cin * vox + (cin - 1) * vox;
            flat_i[dst..dst + vox].copy_from_slice(&noise_flat[bi * vox..(bi + 1) * vox]);
        }
    }
    (input, target, mask)
}

fn optimize(
    loss: &Tensor,
    vars: &Vars,
    opt: &mut Adam,
    params: &mut ParamSet,
    what: &str,
) -> Result<()> {
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::Diverged(format!("{what} loss is {v}")));
    }
    let trainable = vars.trainable();
    let refs: Vec<&Tensor> = trainable.iter().map(|(_, t)| t).collect();
    let grads = grad(loss, &refs);
    let pairs: Vec<(String, ArrayD<f64>)> = trainable
        .iter()
        .zip(grads)
        .map(|((n, _), g)| (n.clone(), g.value().clone()))
        .collect();
    opt.step(params, &pairs);
    Ok(())
}

fn train_one_net(
    gans: &mut NoduleGans,
    examples: &[VoiExample],
    net: Net,
    cfg: &VoiGanTrainConfig,
    on_log: &mut dyn FnMut(&'static str, &StepReport),
) -> Result<()> {
    let p = net.prefix();
    let mut opt_d = Adam::new(cfg.lr, 0.5, 0.999);
    let mut opt_g = Adam::new(cfg.lr, 0.5, 0.999);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (net as u64 + 1));
    let edge = gans.edge;
    for step in 0..cfg.steps {
        let t0 = std::time::Instant::now();
        let idx: Vec<usize> =
            (0..cfg.batch).map(|_| rng.gen_range(0..examples.len())).collect();

        // discriminator phase
        let (input, target, mask) = g_batch(examples, &idx, net, edge, &mut rng);
        let d_prefix = format!("{p}.d.");
        let vars = gans.params.bind(|n| n.starts_with(&d_prefix));
        let fake = voi_g_forward(&vars, net, &Tensor::constant(input));
        let real_leaf = Tensor::leaf(target.clone());
        let mask_t = Tensor::constant(mask.clone());
        let d_real = voi_d_forward(&vars, net, &Tensor::concat(&[real_leaf.clone(), mask_t.clone()], 1));
        let d_fake = voi_d_forward(&vars, net, &Tensor::concat(&[fake, mask_t.clone()], 1));
        let scores = BatchScores {
            slice_real: Vec::new(),
            slice_fake: Vec::new(),
            slab_real: d_real.clone(),
            slab_fake: d_fake,
        };
        let penalty = r1_penalty(&d_real, &real_leaf, cfg.gamma);
        let gp = penalty.item();
        let d_loss = js_discriminator_loss(&scores).add(&penalty);
        let d_val = d_loss.item();
        optimize(&d_loss, &vars, &mut opt_d, &mut gans.params, "voi discriminator")?;

        // generator phase, fresh noise
        let (input, target, mask) = g_batch(examples, &idx, net, edge, &mut rng);
        let g_prefix = format!("{p}.g.");
        let vars = gans.params.bind(|n| n.starts_with(&g_prefix));
        let fake = voi_g_forward(&vars, net, &Tensor::constant(input));
        let mask_t = Tensor::constant(mask);
        let d_fake = voi_d_forward(&vars, net, &Tensor::concat(&[fake.clone(), mask_t], 1));
        let scores = BatchScores {
            slice_real: Vec::new(),
            slice_fake: Vec::new(),
            slab_real: Tensor::constant(ArrayD::zeros(IxDyn(&[idx.len()]))),
            slab_fake: d_fake,
        };
        let l1 = fake.sub(&Tensor::constant(target)).abs().mean_all();
        let g_loss = js_generator_loss(&scores).add(&l1.scale(cfg.l1_weight));
        let g_val = g_loss.item();
        optimize(&g_loss, &vars, &mut opt_g, &mut gans.params, "voi generator")?;

        on_log(
            if net == Net::Injector { "injector" } else { "eraser" },
            &StepReport {
                step,
                d_loss: d_val,
                g_loss: g_val,
                gp,
                loss_kind: LossKind::Js,
                wall_ms: t0.elapsed().as_millis(),
            },
        );
    }
    Ok(())
}

/// Train the injector then the eraser on the same example pool.
pub fn train_nodule_gans(
    gans: &mut NoduleGans,
    examples: &[VoiExample],
    cfg: &VoiGanTrainConfig,
    mut on_log: impl FnMut(&'static str, &StepReport),
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Config("no voi examples".to_string()));
    }
    for ex in examples {
        if ex.clean.dim() != (gans.edge, gans.edge, gans.edge) {
            return Err(Error::Config("voi example edge mismatch".to_string()));
        }
    }
    train_one_net(gans, examples, Net::Injector, cfg, &mut on_log)?;
    train_one_net(gans, examples, Net::Eraser, cfg, &mut on_log)?;
    Ok(())
}

fn run_g(gans: &NoduleGans, net: Net, channels: Vec<&Array3<f32>>, seed: u64) -> Array3<f32> {
    let edge = gans.edge;
    let cin = net.g_in_channels();
    assert_eq!(channels.len(), cin - 1);
    let vox = edge * edge * edge;
    let mut input = ArrayD::zeros(IxDyn(&[1, cin, edge, edge, edge]));
    {
        let flat = input.as_slice_mut().expect("standard layout");
        for (c, cube) in channels.iter().enumerate() {
            for (k, v) in cube.iter().enumerate() {
                // mask channel is already 0/1; intensity channels are [0,1]
                flat[c * vox + k] = if net == Net::Injector && c == 1 {
                    *v as f64
                } else {
                    to_net(*v)
                };
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let noise = normal_array(&mut rng, &[vox], 1.0);
        flat[(cin - 1) * vox..cin * vox].copy_from_slice(noise.as_slice().unwrap());
    }
    let vars = gans.params.bind(|_| false);
    let out = voi_g_forward(&vars, net, &Tensor::constant(input));
    let flat = out.value().clone();
    let slice = flat.as_slice().expect("standard layout");
    Array3::from_shape_fn((edge, edge, edge), |(z, y, x)| {
        from_net(slice[(z * edge + y) * edge + x])
    })
}

#[derive(Serialize, Deserialize)]
struct GanMeta {
    format_version: u32,
    edge: usize,
    base: usize,
}

pub fn save_nodule_gans(gans: &NoduleGans, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = GanMeta { format_version: 1, edge: gans.edge, base: gans.base };
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&meta)?)?;
    volsynth_nn::params::save_arrays(&dir.join("gans"), &gans.params.subset(""))?;
    Ok(())
}

pub fn load_nodule_gans(dir: &Path) -> Result<NoduleGans> {
    let meta: GanMeta = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
    if meta.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "nodule gan format_version {}",
            meta.format_version
        )));
    }
    let map = volsynth_nn::params::load_arrays(&dir.join("gans"))?;
    let reference = init_nodule_gans(meta.edge, meta.base, 0)?;
    for (name, a) in reference.params.iter() {
        match map.get(name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(loaded) if loaded.shape() != a.shape() => {
                return Err(Error::Checkpoint(format!("parameter {name} has a bad shape")));
            }
            _ => {}
        }
    }
    if map.len() != reference.params.len() {
        return Err(Error::Checkpoint("extra parameters in nodule gan blob".to_string()));
    }
    Ok(NoduleGans { edge: meta.edge, base: meta.base, params: ParamSet::from_inner(map) })
}

/// Inpaint a nodule into a masked copy of the VOI cube.
pub fn apply_injector(
    gans: &NoduleGans,
    clean: &Array3<f32>,
    mask: &Array3<f32>,
    seed: u64,
) -> Array3<f32> {
    let mut masked = clean.clone();
    for (v, m) in masked.iter_mut().zip(mask.iter()) {
        if *m > 0.5 {
            *v = 0.0;
        }
    }
    run_g(gans, Net::Injector, vec![&masked, mask], seed)
}

/// Replace the nodule in a VOI cube with plausible tissue.
pub fn apply_eraser(gans: &NoduleGans, noduled: &Array3<f32>, seed: u64) -> Array3<f32> {
    run_g(gans, Net::Eraser, vec![noduled], seed)
}

fn inject_provenance(p: Provenance) -> Result<Provenance> {
    match p {
        Provenance::RealPhantom | Provenance::Synthetic | Provenance::Injected => {
            Ok(Provenance::Injected)
        }
        Provenance::Erased => {
            Err(Error::Config("cannot inject into an erased volume".to_string()))
        }
    }
}

fn erase_provenance(p: Provenance) -> Result<Provenance> {
    match p {
        Provenance::RealPhantom | Provenance::Erased => Ok(Provenance::Erased),
        // an injected volume stays on the injected pathway
        Provenance::Injected => Ok(Provenance::Injected),
        Provenance::Synthetic => {
            Err(Error::Config("eraser is not applied to untouched synthetic volumes".to_string()))
        }
    }
}

/// Inject one nodule at `spec.center`, which must lie in `lung_mask`.
/// Only the VOI footprint changes.
pub fn inject_nodule(
    gans: &NoduleGans,
    v: &Volume,
    spec: &NoduleSpec,
    lung_mask: &Array3<bool>,
    seed: u64,
) -> Result<Volume> {
    if !lung_mask[[spec.center[0], spec.center[1], spec.center[2]]] {
        return Err(Error::Placement(format!(
            "nodule center {:?} is outside the lung mask",
            spec.center
        )));
    }
    let voi = extract_voi(&v.data, spec.center, gans.edge)?;
    let mask_r = spec.radius_vox.min(gans.edge as f64 / 2.0 - 0.5);
    let mask = sphere_mask(gans.edge, mask_r);
    let cube = apply_injector(gans, &voi.cube, &mask, seed);
    let mut out = v.clone();
    paste_back(&mut out.data, &Voi { cube, origin: voi.origin })?;
    out.provenance = inject_provenance(v.provenance)?;
    Ok(out)
}

/// Erase the nodule described by `spec`; only the VOI footprint changes.
pub fn erase_nodule(gans: &NoduleGans, v: &Volume, spec: &NoduleSpec, seed: u64) -> Result<Volume> {
    let voi = extract_voi(&v.data, spec.center, gans.edge)?;
    let cube = apply_eraser(gans, &voi.cube, seed);
    let mut out = v.clone();
    paste_back(&mut out.data, &Voi { cube, origin: voi.origin })?;
    out.provenance = erase_provenance(v.provenance)?;
    Ok(out)
}

// ---- unbiased dataset mixing ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Nodule,
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Untouched,
    Injected,
    Erased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixEntry {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub pathway: Pathway,
    pub domain: String,
}

/// Serialized dataset manifest; the detection stage consumes only this.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMix {
    pub format_version: u32,
    pub train: Vec<MixEntry>,
    pub val: Vec<MixEntry>,
    pub test: Vec<MixEntry>,
}

impl DatasetMix {
    pub fn entries(&self, split: Split) -> &[MixEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetMix> {
        let mix: DatasetMix = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if mix.format_version != 1 {
            return Err(Error::Config(format!(
                "unsupported dataset mix version {}",
                mix.format_version
            )));
        }
        Ok(mix)
    }
}

/// One prepared volume with its mix bookkeeping.
#[derive(Clone, Debug)]
pub struct MixedVolume {
    pub volume: Volume,
    pub label: Label,
    pub pathway: Pathway,
    pub domain: String,
    pub split: Split,
}

pub const SPLIT_RATIOS: [f64; 3] = [0.75, 0.125, 0.125];

fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Even per-domain label mix with stratified splits.
///
/// Domain A arrives with native nodules: half stays untouched (label
/// nodule), the eraser cleans the other half. Domain B arrives clean:
/// half stays untouched, the injector seeds the other half. Each
/// (domain, label) cell is split by the ratio with largest-remainder
/// rounding, so the mix is label-balanced per domain within one volume.
pub fn build_unbiased_dataset(
    gans: &NoduleGans,
    domain_a: &[(Volume, Vec<NoduleSpec>)],
    domain_b: &[Volume],
    dists: &NoduleDists,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<MixedVolume>> {
    let rsum: f64 = ratios.iter().sum();
    if (rsum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r <= 0.0) {
        return Err(Error::Config("split ratios must be positive and sum to 1".to_string()));
    }
    for (name, n) in [("a", domain_a.len()), ("b", domain_b.len())] {
        let smallest_cell = n / 2;
        if (smallest_cell as f64 * ratios[1]) < 1.0 || (smallest_cell as f64 * ratios[2]) < 1.0 {
            return Err(Error::Config(format!(
                "domain {name} with {n} volumes is too small to stratify"
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut cells: Vec<Vec<MixedVolume>> = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut order_a: Vec<usize> = (0..domain_a.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order_a[..], &mut rng);
    let keep_a = domain_a.len() - domain_a.len() / 2;
    for (pos, &i) in order_a.iter().enumerate() {
        let (vol, specs) = &domain_a[i];
        if pos < keep_a {
            cells[0].push(MixedVolume {
                volume: vol.clone(),
                label: Label::Nodule,
                pathway: Pathway::Untouched,
                domain: NoiseDomain::A.tag().to_string(),
                split: Split::Train,
            });
        } else {
            let mut v = vol.clone();
            for (k, spec) in specs.iter().enumerate() {
                v = erase_nodule(gans, &v, spec, seed ^ (i as u64) << 8 ^ k as u64)?;
            }
            v.id.push_str("-erased");
            cells[1].push(MixedVolume {
                volume: v,
                label: Label::Clean,
                pathway: Pathway::Erased,
                domain: NoiseDomain::A.tag().to_string(),
                split: Split::Train,
            });
        }
    }

    let mut order_b: Vec<usize> = (0..domain_b.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order_b[..], &mut rng);
    let keep_b = domain_b.len() - domain_b.len() / 2;
    for (pos, &i) in order_b.iter().enumerate() {
        let vol = &domain_b[i];
        if pos < keep_b {
            cells[2].push(MixedVolume {
                volume: vol.clone(),
                label: Label::Clean,
                pathway: Pathway::Untouched,
                domain: NoiseDomain::B.tag().to_string(),
                split: Split::Train,
            });
        } else {
            let lung = crate::voldata::estimate_lung_mask(&vol.data);
            let plan = sample_nodule_plan(dists, &lung, gans.edge, &mut rng)?;
            if plan.is_empty() {
                return Err(Error::Config(
                    "count distribution must not place mass at zero when injecting".to_string(),
                ));
            }
            let mut v = vol.clone();
            for (k, spec) in plan.iter().enumerate() {
                v = inject_nodule(gans, &v, spec, &lung, seed ^ (i as u64) << 8 ^ k as u64)?;
            }
            v.id.push_str("-injected");
            cells[3].push(MixedVolume {
                volume: v,
                label: Label::Nodule,
                pathway: Pathway::Injected,
                domain: NoiseDomain::B.tag().to_string(),
                split: Split::Train,
            });
        }
    }

    let mut out = Vec::new();
    for cell in &mut cells {
        rand::seq::SliceRandom::shuffle(&mut cell[..], &mut rng);
        let [nt, nv, _] = largest_remainder(cell.len(), ratios);
        for (k, mut mv) in cell.drain(..).enumerate() {
            mv.split = if k < nt {
                Split::Train
            } else if k < nt + nv {
                Split::Val
            } else {
                Split::Test
            };
            out.push(mv);
        }
    }
    Ok(out)
}

/// Half-nodule, half-clean corpus from one pool of clean volumes, split
/// per label cell like [`build_unbiased_dataset`]. With `inject_with`
/// the nodule half goes through the injector; without it, nodules are
/// composited natively during corpus construction.
pub fn build_single_domain_dataset(
    volumes: &[Volume],
    dists: &NoduleDists,
    ratios: [f64; 3],
    seed: u64,
    inject_with: Option<&NoduleGans>,
    edge: usize,
    domain_tag: &str,
) -> Result<Vec<MixedVolume>> {
    let rsum: f64 = ratios.iter().sum();
    if (rsum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r <= 0.0) {
        return Err(Error::Config("split ratios must be positive and sum to 1".to_string()));
    }
    let cell = volumes.len() / 2;
    if (cell as f64 * ratios[1]) < 1.0 || (cell as f64 * ratios[2]) < 1.0 {
        return Err(Error::Config(format!(
            "{} volumes are too few to stratify",
            volumes.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let with_nodules = volumes.len() - cell;

    let mut cells: Vec<Vec<MixedVolume>> = vec![Vec::new(), Vec::new()];
    for (pos, &i) in order.iter().enumerate() {
        let vol = &volumes[i];
        if pos < with_nodules {
            let lung = crate::voldata::estimate_lung_mask(&vol.data);
            let plan = sample_nodule_plan(dists, &lung, edge, &mut rng)?;
            if plan.is_empty() {
                return Err(Error::Config(
                    "count distribution must not place mass at zero when adding nodules"
                        .to_string(),
                ));
            }
            let (v, pathway) = match inject_with {
                Some(gans) => {
                    let mut v = vol.clone();
                    for (k, spec) in plan.iter().enumerate() {
                        v = inject_nodule(gans, &v, spec, &lung, seed ^ (i as u64) << 8 ^ k as u64)?;
                    }
                    v.id.push_str("-injected");
                    (v, Pathway::Injected)
                }
                None => {
                    let mut v = vol.clone();
                    add_native_nodules(&mut v, &plan);
                    (v, Pathway::Untouched)
                }
            };
            cells[0].push(MixedVolume {
                volume: v,
                label: Label::Nodule,
                pathway,
                domain: domain_tag.to_string(),
                split: Split::Train,
            });
        } else {
            cells[1].push(MixedVolume {
                volume: vol.clone(),
                label: Label::Clean,
                pathway: Pathway::Untouched,
                domain: domain_tag.to_string(),
                split: Split::Train,
            });
        }
    }

    let mut out = Vec::new();
    for cell in &mut cells {
        rand::seq::SliceRandom::shuffle(&mut cell[..], &mut rng);
        let [nt, nv, _] = largest_remainder(cell.len(), ratios);
        for (k, mut mv) in cell.drain(..).enumerate() {
            mv.split = if k < nt {
                Split::Train
            } else if k < nt + nv {
                Split::Val
            } else {
                Split::Test
            };
            out.push(mv);
        }
    }
    Ok(out)
}

/// Mutual information between label and source domain, in bits.
pub fn label_domain_mi_bits(items: &[(Label, &str)]) -> f64 {
    let n = items.len() as f64;
    if items.is_empty() {
        return 0.0;
    }
    let mut joint: BTreeMap<(bool, String), f64> = BTreeMap::new();
    for (l, d) in items {
        *joint
            .entry((matches!(l, Label::Nodule), d.to_string()))
            .or_insert(0.0) += 1.0;
    }
    let p_l = |l: bool| -> f64 {
        joint.iter().filter(|((jl, _), _)| *jl == l).map(|(_, c)| c).sum::<f64>() / n
    };
    let p_d = |d: &str| -> f64 {
        joint.iter().filter(|((_, jd), _)| jd == d).map(|(_, c)| c).sum::<f64>() / n
    };
    let mut mi = 0.0;
    for ((l, d), c) in &joint {
        let pj = c / n;
        let denom = p_l(*l) * p_d(d);
        if pj > 0.0 && denom > 0.0 {
            mi += pj * (pj / denom).log2();
        }
    }
    mi.max(0.0)
}

/// Save every mixed volume under `dir` and write `mix.json` describing
/// the splits.
pub fn write_mixed_dataset(mixed: &[MixedVolume], dir: &Path) -> Result<DatasetMix> {
    std::fs::create_dir_all(dir)?;
    let mut mix = DatasetMix {
        format_version: 1,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mv in mixed {
        mv.volume.save(&dir.join(&mv.volume.id))?;
        let entry = MixEntry {
            id: mv.volume.id.clone(),
            path: mv.volume.id.clone(),
            label: mv.label,
            pathway: mv.pathway,
            domain: mv.domain.clone(),
        };
        match mv.split {
            Split::Train => mix.train.push(entry),
            Split::Val => mix.val.push(entry),
            Split::Test => mix.test.push(entry),
        }
    }
    mix.save(&dir.join("mix.json"))?;
    Ok(mix)
}

/// Load the volumes of one split next to a mix manifest.
pub fn load_split(mix: &DatasetMix, dir: &Path, split: Split) -> Result<Vec<(Volume, Label)>> {
    let mut out = Vec::new();
    for e in mix.entries(split) {
        out.push((Volume::load(&dir.join(&e.path))?, e.label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voldata::{estimate_lung_mask, generate_phantom, NoiseDomain, PhantomConfig};

    fn phantom(seed: u64, domain: NoiseDomain) -> Volume {
        generate_phantom(&PhantomConfig { depth: 32, height: 32, width: 32, domain, seed })
            .volume
    }

    /// Corpus selection: advance through seeds, keeping phantoms whose
    /// lung estimate leaves room to site a VOI.
    fn usable_phantoms(n: usize, seed0: u64, domain: NoiseDomain) -> Vec<Volume> {
        let mut out = Vec::new();
        let mut seed = seed0;
        while out.len() < n {
            let v = phantom(seed, domain);
            if voi_candidates(&estimate_lung_mask(&v.data), VOI_EDGE).len() >= 50 {
                out.push(v);
            }
            seed += 1;
        }
        out
    }

    fn interior_lung_center(lung: &Array3<bool>) -> [usize; 3] {
        voi_candidates(lung, VOI_EDGE)
            .first()
            .copied()
            .expect("phantom has an interior lung voxel")
    }

    fn tiny_dists() -> NoduleDists {
        NoduleDists {
            count_probs: vec![0.0, 1.0],
            radius_ln_mean: 2.5f64.ln(),
            radius_ln_std: 0.2,
            radius_clip: [2.0, 3.5],
            intensity_range: [0.55, 0.75],
        }
    }

    #[test]
    fn voi_roundtrip_and_bounds() {
        let v = phantom(1, NoiseDomain::A);
        let voi = extract_voi(&v.data, [16, 16, 16], VOI_EDGE).unwrap();
        assert_eq!(voi.origin, [8, 8, 8]);
        let mut copy = v.data.clone();
        paste_back(&mut copy, &voi).unwrap();
        for (a, b) in copy.iter().zip(v.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        assert!(matches!(
            extract_voi(&v.data, [4, 16, 16], VOI_EDGE),
            Err(Error::Bounds(_))
        ));
        assert!(matches!(
            extract_voi(&v.data, [16, 16, 28], VOI_EDGE),
            Err(Error::Bounds(_))
        ));
        assert!(matches!(
            extract_voi(&v.data, [16, 16, 16], 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn paste_changes_only_the_footprint() {
        let v = phantom(2, NoiseDomain::B);
        let mut voi = extract_voi(&v.data, [14, 18, 12], VOI_EDGE).unwrap();
        voi.cube.mapv_inplace(|x| 1.0 - x);
        let mut copy = v.data.clone();
        paste_back(&mut copy, &voi).unwrap();
        let o = voi.origin;
        let mut outside_diff = 0usize;
        let mut inside_diff = 0usize;
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let inside = (o[0]..o[0] + VOI_EDGE).contains(&z)
                        && (o[1]..o[1] + VOI_EDGE).contains(&y)
                        && (o[2]..o[2] + VOI_EDGE).contains(&x);
                    let changed =
                        copy[[z, y, x]].to_bits() != v.data[[z, y, x]].to_bits();
                    if changed && !inside {
                        outside_diff += 1;
                    }
                    if changed && inside {
                        inside_diff += 1;
                    }
                }
            }
        }
        assert_eq!(outside_diff, 0);
        assert!(inside_diff > 0);
    }

    #[test]
    fn mask_center_geometry() {
        let v = phantom(3, NoiseDomain::A);
        let voi = extract_voi(&v.data, [16, 16, 16], VOI_EDGE).unwrap();

        let same = mask_center(&voi, 0.0).unwrap();
        for (a, b) in same.cube.iter().zip(voi.cube.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        for r in [4.0, 5.0, 6.0] {
            let masked = mask_center(&voi, r).unwrap();
            let zeroed = masked
                .cube
                .indexed_iter()
                .filter(|((z, y, x), m)| {
                    **m == 0.0 && center_distance(VOI_EDGE, *z, *y, *x) < r
                })
                .count();
            let indicated = sphere_mask(VOI_EDGE, r).iter().filter(|m| **m > 0.5).count();
            assert_eq!(zeroed, indicated);
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            let ratio = indicated as f64 / analytic;
            assert!((0.9..1.1).contains(&ratio), "r={r}: {indicated} vs {analytic}");
        }

        let masked = mask_center(&voi, 7.9).unwrap();
        for corner in [[0, 0, 0], [15, 15, 15], [0, 15, 0]] {
            let want = voi.cube[[corner[0], corner[1], corner[2]]];
            let got = masked.cube[[corner[0], corner[1], corner[2]]];
            assert_eq!(want.to_bits(), got.to_bits());
        }

        assert!(matches!(mask_center(&voi, 8.0), Err(Error::Config(_))));
    }

    #[test]
    fn composite_brightens_inside_and_stays_local() {
        let mut data = Array3::<f32>::from_elem((32, 32, 32), 0.1);
        let before = data.clone();
        composite_into(&mut data, [16.0, 16.0, 16.0], 4.0, 0.7);
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let d = ((z as f64 - 16.0).powi(2)
                        + (y as f64 - 16.0).powi(2)
                        + (x as f64 - 16.0).powi(2))
                    .sqrt();
                    let v = data[[z, y, x]];
                    assert!((0.0..=1.0).contains(&v));
                    if d >= 5.0 {
                        assert_eq!(v.to_bits(), before[[z, y, x]].to_bits(), "at d={d}");
                    } else if d < 3.0 {
                        assert!((v - 0.7).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn plan_sampling_contracts() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mask = Array3::from_elem((24, 40, 40), true);

        let point_mass_zero = NoduleDists {
            count_probs: vec![1.0],
            ..NoduleDists::desk()
        };
        assert!(sample_nodule_plan(&point_mass_zero, &mask, VOI_EDGE, &mut rng)
            .unwrap()
            .is_empty());

        let dists = NoduleDists {
            radius_clip: [2.0, 2.5],
            ..NoduleDists::desk()
        };
        for _ in 0..50 {
            let plan = sample_nodule_plan(&dists, &mask, VOI_EDGE, &mut rng).unwrap();
            assert!(!plan.is_empty() && plan.len() <= 4);
            for s in &plan {
                assert!(mask[[s.center[0], s.center[1], s.center[2]]]);
                assert!(s.center[0] >= 8 && s.center[0] < 16);
                for (i, a) in plan.iter().enumerate() {
                    for b in plan.iter().skip(i + 1) {
                        let d = ((a.center[0] as f64 - b.center[0] as f64).powi(2)
                            + (a.center[1] as f64 - b.center[1] as f64).powi(2)
                            + (a.center[2] as f64 - b.center[2] as f64).powi(2))
                        .sqrt();
                        assert!(d >= a.radius_vox + b.radius_vox + 2.0);
                    }
                }
            }
        }

        // determinism
        let mut r1 = ChaCha12Rng::seed_from_u64(77);
        let mut r2 = ChaCha12Rng::seed_from_u64(77);
        let p1 = sample_nodule_plan(&dists, &mask, VOI_EDGE, &mut r1).unwrap();
        let p2 = sample_nodule_plan(&dists, &mask, VOI_EDGE, &mut r2).unwrap();
        assert_eq!(format!("{p1:?}"), format!("{p2:?}"));

        // a mask with no room errors out
        let tiny = Array3::from_elem((10, 10, 10), true);
        assert!(matches!(
            sample_nodule_plan(&dists, &tiny, VOI_EDGE, &mut rng),
            Err(Error::Placement(_))
        ));
    }

    #[test]
    fn count_distribution_matches_chi_squared() {
        let dists = NoduleDists {
            radius_clip: [2.0, 2.5],
            ..NoduleDists::desk()
        };
        let mask = Array3::from_elem((24, 40, 40), true);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 10_000usize;
        let mut observed = [0usize; 4];
        for _ in 0..n {
            let plan = sample_nodule_plan(&dists, &mask, VOI_EDGE, &mut rng).unwrap();
            observed[plan.len() - 1] += 1;
        }
        let expected = [0.3, 0.4, 0.2, 0.1].map(|p| p * n as f64);
        let chi2: f64 = observed
            .iter()
            .zip(expected.iter())
            .map(|(&o, &e)| (o as f64 - e) * (o as f64 - e) / e)
            .sum();
        // 3 degrees of freedom, p = 0.01
        assert!(chi2 < 11.345, "chi-squared {chi2}, observed {observed:?}");
    }

    #[test]
    fn provenance_transitions() {
        let gans = init_nodule_gans(VOI_EDGE, 4, 0).unwrap();
        let v = phantom(8, NoiseDomain::A);
        let lung = estimate_lung_mask(&v.data);
        let center = interior_lung_center(&lung);
        let spec = NoduleSpec { center, radius_vox: 3.0, intensity: 0.7 };

        let injected = inject_nodule(&gans, &v, &spec, &lung, 1).unwrap();
        assert_eq!(injected.provenance, Provenance::Injected);
        let twice = inject_nodule(&gans, &injected, &spec, &lung, 2).unwrap();
        assert_eq!(twice.provenance, Provenance::Injected);

        let erased = erase_nodule(&gans, &v, &spec, 3).unwrap();
        assert_eq!(erased.provenance, Provenance::Erased);
        let erased_again = erase_nodule(&gans, &erased, &spec, 4).unwrap();
        assert_eq!(erased_again.provenance, Provenance::Erased);
        assert!(matches!(
            inject_nodule(&gans, &erased, &spec, &lung, 5),
            Err(Error::Config(_))
        ));

        let back = erase_nodule(&gans, &injected, &spec, 6).unwrap();
        assert_eq!(back.provenance, Provenance::Injected);

        let mut synth = v.clone();
        synth.provenance = Provenance::Synthetic;
        assert!(matches!(erase_nodule(&gans, &synth, &spec, 7), Err(Error::Config(_))));

        let mut outside = spec;
        outside.center = [16, 16, 16];
        if !lung[[16, 16, 16]] {
            assert!(matches!(
                inject_nodule(&gans, &v, &outside, &lung, 8),
                Err(Error::Placement(_))
            ));
        }
    }

    #[test]
    fn untrained_nets_are_local_and_deterministic() {
        let gans = init_nodule_gans(VOI_EDGE, 4, 1).unwrap();
        let v = usable_phantoms(1, 9, NoiseDomain::B).remove(0);
        let lung = estimate_lung_mask(&v.data);
        let center = interior_lung_center(&lung);
        let spec = NoduleSpec { center, radius_vox: 3.0, intensity: 0.7 };

        let a = inject_nodule(&gans, &v, &spec, &lung, 7).unwrap();
        let b = inject_nodule(&gans, &v, &spec, &lung, 7).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let half = VOI_EDGE / 2;
        let mut outside_changed = 0usize;
        for ((z, y, x), val) in a.data.indexed_iter() {
            let inside = (center[0] - half..center[0] + half).contains(&z)
                && (center[1] - half..center[1] + half).contains(&y)
                && (center[2] - half..center[2] + half).contains(&x);
            if !inside && val.to_bits() != v.data[[z, y, x]].to_bits() {
                outside_changed += 1;
            }
        }
        assert_eq!(outside_changed, 0);

        for val in a.data.iter() {
            assert!((0.0..=1.0).contains(val));
        }
    }

    #[test]
    fn voi_gan_training_improves_roundtrip() {
        let mut vols: Vec<Array3<f32>> = usable_phantoms(3, 20, NoiseDomain::A)
            .into_iter()
            .map(|v| v.data)
            .collect();
        vols.extend(usable_phantoms(3, 20, NoiseDomain::B).into_iter().map(|v| v.data));
        let masks: Vec<Array3<bool>> = vols.iter().map(estimate_lung_mask).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let examples =
            make_voi_examples(&vols, &masks, &tiny_dists(), 4, VOI_EDGE, &mut rng).unwrap();
        assert_eq!(examples.len(), 24);

        // errors are measured inside the nodule mask: the residual nets
        // start at identity, so outside the mask they are near-perfect
        // from step zero and full-cube averages would wash out the signal
        let eval = |gans: &NoduleGans| -> (f64, f64) {
            let mut inj_err = 0.0;
            let mut round_err = 0.0;
            for (i, ex) in examples.iter().take(8).enumerate() {
                let injected = apply_injector(gans, &ex.clean, &ex.mask, 1000 + i as u64);
                let erased = apply_eraser(gans, &injected, 2000 + i as u64);
                let m: f64 = ex.mask.iter().map(|&w| w as f64).sum();
                inj_err += injected
                    .iter()
                    .zip(ex.noduled.iter())
                    .zip(ex.mask.iter())
                    .map(|((a, b), &w)| w as f64 * (*a as f64 - *b as f64).abs())
                    .sum::<f64>()
                    / m;
                round_err += erased
                    .iter()
                    .zip(ex.clean.iter())
                    .zip(ex.mask.iter())
                    .map(|((a, b), &w)| w as f64 * (*a as f64 - *b as f64).abs())
                    .sum::<f64>()
                    / m;
            }
            (inj_err / 8.0, round_err / 8.0)
        };

        let mut gans = init_nodule_gans(VOI_EDGE, 4, 2).unwrap();
        let before = eval(&gans);
        let cfg = VoiGanTrainConfig { steps: 60, batch: 4, ..VoiGanTrainConfig::desk() };
        let mut steps_seen = 0;
        train_nodule_gans(&mut gans, &examples, &cfg, |_, _| steps_seen += 1).unwrap();
        assert_eq!(steps_seen, 120);
        let after = eval(&gans);
        assert!(after.0 < before.0, "injector {:?} -> {:?}", before.0, after.0);
        assert!(after.1 < before.1, "roundtrip {:?} -> {:?}", before.1, after.1);
    }

    #[test]
    fn unbiased_dataset_is_balanced_and_fair() {
        let gans = init_nodule_gans(VOI_EDGE, 4, 3).unwrap();
        let dists = tiny_dists();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut domain_a = Vec::new();
        for mut v in usable_phantoms(20, 100, NoiseDomain::A) {
            let lung = estimate_lung_mask(&v.data);
            let plan = sample_nodule_plan(&dists, &lung, VOI_EDGE, &mut rng).unwrap();
            add_native_nodules(&mut v, &plan);
            domain_a.push((v, plan));
        }
        let domain_b = usable_phantoms(20, 200, NoiseDomain::B);

        let mixed =
            build_unbiased_dataset(&gans, &domain_a, &domain_b, &dists, SPLIT_RATIOS, 9).unwrap();
        assert_eq!(mixed.len(), 40);

        for domain in [NoiseDomain::A, NoiseDomain::B] {
            let with: i64 = mixed
                .iter()
                .filter(|m| m.domain == domain.tag() && m.label == Label::Nodule)
                .count() as i64;
            let without: i64 = mixed
                .iter()
                .filter(|m| m.domain == domain.tag() && m.label == Label::Clean)
                .count() as i64;
            assert!((with - without).abs() <= 1, "{domain:?}: {with} vs {without}");
        }

        let pairs: Vec<(Label, &str)> =
            mixed.iter().map(|m| (m.label, m.domain.as_str())).collect();
        assert!(label_domain_mi_bits(&pairs) < 0.01);

        // four cells of ten, each split 8/1/1 by largest remainder
        let count = |s: Split| mixed.iter().filter(|m| m.split == s).count();
        assert_eq!(count(Split::Train), 32);
        assert_eq!(count(Split::Val), 4);
        assert_eq!(count(Split::Test), 4);

        // val and test are label-balanced
        for s in [Split::Val, Split::Test] {
            let nod = mixed.iter().filter(|m| m.split == s && m.label == Label::Nodule).count();
            let cln = mixed.iter().filter(|m| m.split == s && m.label == Label::Clean).count();
            assert_eq!(nod, cln);
        }

        // pathway bookkeeping
        assert!(mixed.iter().any(|m| m.pathway == Pathway::Erased));
        assert!(mixed.iter().any(|m| m.pathway == Pathway::Injected));
        for m in &mixed {
            match m.pathway {
                Pathway::Erased => assert_eq!(m.label, Label::Clean),
                Pathway::Injected => assert_eq!(m.label, Label::Nodule),
                Pathway::Untouched => {}
            }
        }

        // ids unique across splits
        let mut ids: Vec<&str> = mixed.iter().map(|m| m.volume.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 40);

        // too small to stratify
        let small: Vec<Volume> = (0..4).map(|i| phantom(300 + i, NoiseDomain::B)).collect();
        assert!(matches!(
            build_unbiased_dataset(&gans, &domain_a[..4], &small, &dists, SPLIT_RATIOS, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_domain_builder_balances_both_pathways() {
        let vols = usable_phantoms(10, 40, NoiseDomain::A);
        let native = build_single_domain_dataset(
            &vols,
            &tiny_dists(),
            [0.5, 0.25, 0.25],
            3,
            None,
            VOI_EDGE,
            "real",
        )
        .unwrap();
        assert_eq!(native.len(), 10);
        assert_eq!(native.iter().filter(|m| m.label == Label::Nodule).count(), 5);
        assert!(native.iter().all(|m| m.pathway == Pathway::Untouched));
        assert!(native.iter().all(|m| m.domain == "real"));
        assert!(native
            .iter()
            .all(|m| m.volume.provenance == Provenance::RealPhantom));
        // nodule volumes actually differ from their clean sources
        let changed = native
            .iter()
            .filter(|m| m.label == Label::Nodule)
            .filter(|m| {
                let src = vols.iter().find(|v| v.id == m.volume.id).unwrap();
                m.volume.data.iter().zip(src.data.iter()).any(|(a, b)| a != b)
            })
            .count();
        assert_eq!(changed, 5);

        let gans = init_nodule_gans(VOI_EDGE, 4, 9).unwrap();
        let injected = build_single_domain_dataset(
            &vols,
            &tiny_dists(),
            [0.5, 0.25, 0.25],
            3,
            Some(&gans),
            VOI_EDGE,
            "synthetic",
        )
        .unwrap();
        for m in &injected {
            match m.label {
                Label::Nodule => {
                    assert_eq!(m.pathway, Pathway::Injected);
                    assert_eq!(m.volume.provenance, Provenance::Injected);
                    assert!(m.volume.id.ends_with("-injected"));
                }
                Label::Clean => assert_eq!(m.pathway, Pathway::Untouched),
            }
        }
        for split in [Split::Val, Split::Test] {
            let n = injected.iter().filter(|m| m.split == split).count();
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(1200, SPLIT_RATIOS), [900, 150, 150]);
        assert_eq!(largest_remainder(40, SPLIT_RATIOS), [30, 5, 5]);
        for n in [10usize, 11, 17, 23, 80] {
            let c = largest_remainder(n, SPLIT_RATIOS);
            assert_eq!(c[0] + c[1] + c[2], n);
        }
    }

    #[test]
    fn mix_roundtrips_through_disk() {
        let gans = init_nodule_gans(VOI_EDGE, 4, 3).unwrap();
        let dists = tiny_dists();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut domain_a = Vec::new();
        for mut v in usable_phantoms(16, 400, NoiseDomain::A) {
            let lung = estimate_lung_mask(&v.data);
            let plan = sample_nodule_plan(&dists, &lung, VOI_EDGE, &mut rng).unwrap();
            add_native_nodules(&mut v, &plan);
            domain_a.push((v, plan));
        }
        let domain_b = usable_phantoms(16, 500, NoiseDomain::B);
        let mixed =
            build_unbiased_dataset(&gans, &domain_a, &domain_b, &dists, SPLIT_RATIOS, 2).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mix = write_mixed_dataset(&mixed, dir.path()).unwrap();
        let loaded = DatasetMix::load(&dir.path().join("mix.json")).unwrap();
        assert_eq!(loaded.train.len(), mix.train.len());
        let test = load_split(&loaded, dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), mix.test.len());
        for (vol, label) in &test {
            let entry = mix.test.iter().find(|e| e.id == vol.id).unwrap();
            assert_eq!(entry.label, *label);
        }
    }
}
