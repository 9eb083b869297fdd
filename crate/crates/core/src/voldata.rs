//! Volumes on disk, slice/slab views, and procedural chest phantoms.
//!
//! A volume is a `[depth, height, width]` stack of axial planes stored as
//! little-endian f32 in C order next to a JSON sidecar. Phantoms are fully
//! procedural: elliptic body, two lung cavities, airway trees, and vessel
//! filaments, finished with a Gaussian blur and one of two device noise
//! domains. Everything is seed-deterministic down to the byte.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RealPhantom,
    Synthetic,
    Injected,
    Erased,
}

#[derive(Clone, Debug)]
pub struct Volume {
    /// Axial planes, `[depth, height, width]`.
    pub data: Array3<f32>,
    pub spacing_mm: [f64; 3],
    pub provenance: Provenance,
    pub id: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    dtype: String,
    order: String,
    spacing_mm: [f64; 3],
    provenance: Provenance,
    id: String,
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Volume {
    pub fn depth(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Write `<base>.raw` and `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let (d, h, w) = self.data.dim();
        let sidecar = Sidecar {
            shape: [d, h, w],
            dtype: "f32le".to_string(),
            order: "C".to_string(),
            spacing_mm: self.spacing_mm,
            provenance: self.provenance,
            id: self.id.clone(),
        };
        fs::write(
            with_suffix(base, ".json"),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        let std_layout = self.data.as_standard_layout();
        let values = std_layout.as_slice().expect("contiguous volume");
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(with_suffix(base, ".raw"), bytes)?;
        Ok(())
    }

    /// Read a volume written by [`Volume::save`], validating the sidecar.
    pub fn load(base: &Path) -> Result<Volume> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(with_suffix(base, ".json"))?)?;
        if sidecar.dtype != "f32le" {
            return Err(Error::VolumeFormat(format!(
                "unsupported dtype {:?}",
                sidecar.dtype
            )));
        }
        if sidecar.order != "C" {
            return Err(Error::VolumeFormat(format!(
                "unsupported order {:?}",
                sidecar.order
            )));
        }
        let [d, h, w] = sidecar.shape;
        let bytes = fs::read(with_suffix(base, ".raw"))?;
        let expect = d * h * w * 4;
        if bytes.len() != expect {
            return Err(Error::VolumeFormat(format!(
                "raw size {} does not match shape {:?} ({expect} bytes)",
                bytes.len(),
                sidecar.shape
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let data = Array3::from_shape_vec((d, h, w), values)
            .map_err(|e| Error::VolumeFormat(e.to_string()))?;
        Ok(Volume {
            data,
            spacing_mm: sidecar.spacing_mm,
            provenance: sidecar.provenance,
            id: sidecar.id,
        })
    }
}

/// Min-max rescale to [0, 1] in place; constant volumes become all zeros.
/// Applying it twice gives the same bytes as applying it once.
pub fn normalize(data: &mut Array3<f32>) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span <= 0.0 {
        data.fill(0.0);
    } else {
        data.mapv_inplace(|v| (v - lo) / span);
    }
}

// ---- slice and slab views ----

/// Three consecutive planes `[3, H, W]` centered at `center`;
/// valid centers are `1..=depth-2`.
pub fn extract_slice3(data: &Array3<f32>, center: usize) -> Array3<f32> {
    let (d, _, _) = data.dim();
    assert!(
        (1..d.saturating_sub(1)).contains(&center),
        "slice center {center} out of range for depth {d}"
    );
    data.slice(ndarray::s![center - 1..center + 2, .., ..]).to_owned()
}

/// Contiguous run of `t` planes starting at `start`, `[t, H, W]`.
pub fn extract_slab(data: &Array3<f32>, start: usize, t: usize) -> Array3<f32> {
    let (d, _, _) = data.dim();
    assert!(start + t <= d, "slab {start}+{t} exceeds depth {d}");
    data.slice(ndarray::s![start..start + t, .., ..]).to_owned()
}

/// All three-plane windows of a volume, centers `1..=depth-2`.
/// A depth-`S` volume yields `S - 2` of them.
pub fn decompose(data: &Array3<f32>) -> Vec<Array3<f32>> {
    let (d, _, _) = data.dim();
    assert!(d >= 3, "need at least 3 planes");
    (1..d - 1).map(|c| extract_slice3(data, c)).collect()
}

/// Rebuild a volume from consecutive three-plane windows: the first window
/// contributes its leading plane, every window its center plane, and the
/// last window its trailing plane. Exact inverse of [`decompose`].
pub fn assemble(slices: &[Array3<f32>]) -> Array3<f32> {
    assert!(!slices.is_empty(), "no slices to assemble");
    let (three, h, w) = slices[0].dim();
    assert_eq!(three, 3, "windows must hold 3 planes");
    let d = slices.len() + 2;
    let mut out = Array3::zeros((d, h, w));
    out.slice_mut(ndarray::s![0, .., ..])
        .assign(&slices[0].slice(ndarray::s![0, .., ..]));
    for (i, s) in slices.iter().enumerate() {
        assert_eq!(s.dim(), (3, h, w), "window {i} shape");
        out.slice_mut(ndarray::s![i + 1, .., ..])
            .assign(&s.slice(ndarray::s![1, .., ..]));
    }
    out.slice_mut(ndarray::s![d - 1, .., ..])
        .assign(&slices[slices.len() - 1].slice(ndarray::s![2, .., ..]));
    out
}

/// Mean Pearson correlation between each pair of adjacent planes.
/// Pairs where either plane is constant contribute zero.
pub fn mean_adjacent_correlation(data: &Array3<f32>) -> f64 {
    let (d, _, _) = data.dim();
    assert!(d >= 2, "need at least 2 planes");
    let mut total = 0.0;
    for z in 0..d - 1 {
        total += plane_correlation(
            data.slice(ndarray::s![z, .., ..]),
            data.slice(ndarray::s![z + 1, .., ..]),
        );
    }
    total / (d - 1) as f64
}

fn plane_correlation(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().map(|&v| v as f64).sum::<f64>() / n,
        b.iter().map(|&v| v as f64).sum::<f64>() / n,
    );
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 1e-12 || vb <= 1e-12 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

// ---- procedural phantoms ----

/// Device noise domain: A is fine-grained, B is coarser and stronger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseDomain {
    A,
    B,
}

impl NoiseDomain {
    pub fn tag(&self) -> &'static str {
        match self {
            NoiseDomain::A => "a",
            NoiseDomain::B => "b",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub domain: NoiseDomain,
    pub seed: u64,
}

/// Voxel region codes in [`Phantom::regions`].
pub mod region {
    pub const BACKGROUND: u8 = 0;
    pub const BODY: u8 = 1;
    pub const LUNG: u8 = 2;
    pub const VESSEL: u8 = 3;
    pub const AIRWAY_WALL: u8 = 4;
    pub const AIRWAY_LUMEN: u8 = 5;
}

/// Dominant content of one axial plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaneLabel {
    Body,
    Lung,
    Airway,
}

impl PlaneLabel {
    pub fn index(&self) -> usize {
        match self {
            PlaneLabel::Body => 0,
            PlaneLabel::Lung => 1,
            PlaneLabel::Airway => 2,
        }
    }

    pub const COUNT: usize = 3;
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    /// Pre-blur region code per voxel (see [`region`]).
    pub regions: Array3<u8>,
    /// One label per axial plane, derived from the region map.
    pub labels: Vec<PlaneLabel>,
}

const BG_LEVEL: f64 = 0.02;
const BODY_LEVEL: f64 = 0.55;
const LUNG_LEVEL: f64 = 0.08;
const VESSEL_LEVEL: f64 = 0.50;
const WALL_LEVEL: f64 = 0.65;
const LUMEN_LEVEL: f64 = 0.03;
const BLUR_SIGMA: f64 = 0.8;

/// Fraction of a plane that must be lung cavity before the plane counts as
/// a lung plane, and the airway fraction that promotes it to airway.
const LUNG_PLANE_FRAC: f64 = 0.03;
const AIRWAY_PLANE_FRAC: f64 = 0.004;

pub fn generate_phantom(cfg: &PhantomConfig) -> Phantom {
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);
    assert!(d >= 8 && h >= 16 && w >= 16, "phantom too small: {d}x{h}x{w}");
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let mut grid = Array3::<f64>::from_elem((d, h, w), BG_LEVEL);
    let mut regions = Array3::<u8>::from_elem((d, h, w), region::BACKGROUND);

    // per-phantom morphology jitter; draw order is part of the format
    let jit = |rng: &mut ChaCha12Rng| rng.gen_range(0.95..1.05);
    let body_ax = 0.42 * w as f64 * jit(&mut rng);
    let body_ay = 0.36 * h as f64 * jit(&mut rng);
    let body_level = BODY_LEVEL + rng.gen_range(-0.02..0.02);
    let lung_sx = 0.155 * w as f64 * jit(&mut rng);
    let lung_sy = 0.24 * h as f64 * jit(&mut rng);
    let lung_sz = 0.38 * d as f64 * jit(&mut rng);
    let lung_dx = 0.19 * w as f64 * jit(&mut rng);
    let (cx, cy) = (0.5 * (w as f64 - 1.0), 0.52 * (h as f64 - 1.0));
    let cz = 0.5 * (d as f64 - 1.0);
    let lung_centers = [(cx - lung_dx, cy), (cx + lung_dx, cy)];

    for z in 0..d {
        let t = z as f64 / (d.max(2) - 1) as f64;
        let taper = 0.78 + 0.22 * (std::f64::consts::PI * t).sin();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy, fz) = (x as f64, y as f64, z as f64);
                let be = ((fx - cx) / (body_ax * taper)).powi(2)
                    + ((fy - cy) / (body_ay * taper)).powi(2);
                if be > 1.0 {
                    continue;
                }
                grid[[z, y, x]] = body_level + 0.03 * (fy / h as f64 - 0.5);
                regions[[z, y, x]] = region::BODY;
                for &(lx, ly) in &lung_centers {
                    let le = ((fx - lx) / lung_sx).powi(2)
                        + ((fy - ly) / lung_sy).powi(2)
                        + ((fz - cz) / lung_sz).powi(2);
                    if le <= 1.0 {
                        grid[[z, y, x]] = LUNG_LEVEL;
                        regions[[z, y, x]] = region::LUNG;
                    }
                }
            }
        }
    }

    // vessels: filaments radiating from each hilum, only into lung tissue
    for &(lx, ly) in &lung_centers {
        for _ in 0..6 {
            let dir = random_unit(&mut rng);
            let len = rng.gen_range(0.12..0.28) * d.min(h.min(w)) as f64;
            let r = rng.gen_range(0.7..1.3);
            let start = (
                lx + rng.gen_range(-1.5..1.5),
                ly + rng.gen_range(-1.5..1.5),
                cz + rng.gen_range(-0.1..0.1) * d as f64,
            );
            stamp_capsule(
                &mut grid,
                &mut regions,
                start,
                dir,
                len,
                r,
                VESSEL_LEVEL,
                region::VESSEL,
                &[region::LUNG],
            );
        }
    }

    // airways: one stem per lung plus two branches, wall first then lumen
    let stem_r = (0.04 * w as f64).max(1.4);
    let (z0, z1) = (0.25 * d as f64, 0.75 * d as f64);
    for (side, &(lx, ly)) in lung_centers.iter().enumerate() {
        let drift = if side == 0 { -0.03 } else { 0.03 } * w as f64;
        let stem_dir = norm3((drift / (z1 - z0), 0.0, 1.0));
        let stem_start = (lx - drift / 2.0, ly, z0);
        let stem_len = (z1 - z0) / stem_dir.2;
        let lateral = if side == 0 { -1.0 } else { 1.0 };
        let branches = [
            (0.45, norm3((lateral * 0.5, -0.3, 1.0))),
            (0.75, norm3((lateral * 0.45, 0.35, 1.0))),
        ];
        for pass in 0..2 {
            let (radius, level, code, over): (f64, f64, u8, &[u8]) = if pass == 0 {
                (
                    stem_r + 1.2,
                    WALL_LEVEL,
                    region::AIRWAY_WALL,
                    &[region::LUNG, region::VESSEL],
                )
            } else {
                (
                    stem_r,
                    LUMEN_LEVEL,
                    region::AIRWAY_LUMEN,
                    &[region::LUNG, region::VESSEL, region::AIRWAY_WALL],
                )
            };
            stamp_capsule(
                &mut grid, &mut regions, stem_start, stem_dir, stem_len, radius, level,
                code, over,
            );
            for &(frac, bdir) in &branches {
                let bstart = (
                    stem_start.0 + stem_dir.0 * stem_len * frac,
                    stem_start.1 + stem_dir.1 * stem_len * frac,
                    stem_start.2 + stem_dir.2 * stem_len * frac,
                );
                stamp_capsule(
                    &mut grid,
                    &mut regions,
                    bstart,
                    bdir,
                    0.18 * d as f64,
                    radius * 0.6,
                    level,
                    code,
                    over,
                );
            }
        }
    }

    let labels = plane_labels(&regions);

    gaussian_blur3(&mut grid, BLUR_SIGMA);
    apply_device_noise(&mut grid, cfg.domain, &mut rng);

    let data = grid.mapv(|v| v.clamp(0.0, 1.0) as f32);
    Phantom {
        volume: Volume {
            data,
            spacing_mm: [1.25, 0.85, 0.85],
            provenance: Provenance::RealPhantom,
            id: format!("phantom-{}-{:06}", cfg.domain.tag(), cfg.seed),
        },
        regions,
        labels,
    }
}

/// Round-robin phantom cohort: seeds `base_seed..base_seed+n`, domains
/// alternating A/B.
pub fn generate_cohort(n: usize, base_seed: u64, dims: (usize, usize, usize)) -> Vec<Phantom> {
    (0..n)
        .map(|i| {
            generate_phantom(&PhantomConfig {
                depth: dims.0,
                height: dims.1,
                width: dims.2,
                domain: if i % 2 == 0 { NoiseDomain::A } else { NoiseDomain::B },
                seed: base_seed + i as u64,
            })
        })
        .collect()
}

fn plane_labels(regions: &Array3<u8>) -> Vec<PlaneLabel> {
    let (d, h, w) = regions.dim();
    let plane_n = (h * w) as f64;
    (0..d)
        .map(|z| {
            let mut cavity = 0usize;
            let mut airway = 0usize;
            for y in 0..h {
                for x in 0..w {
                    match regions[[z, y, x]] {
                        region::LUNG | region::VESSEL => cavity += 1,
                        region::AIRWAY_WALL | region::AIRWAY_LUMEN => {
                            cavity += 1;
                            airway += 1;
                        }
                        _ => {}
                    }
                }
            }
            if (cavity as f64) < LUNG_PLANE_FRAC * plane_n {
                PlaneLabel::Body
            } else if (airway as f64) > AIRWAY_PLANE_FRAC * plane_n {
                PlaneLabel::Airway
            } else {
                PlaneLabel::Lung
            }
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha12Rng) -> (f64, f64, f64) {
    loop {
        let v = (
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n2: f64 = v.0 * v.0 + v.1 * v.1 + v.2 * v.2;
        if n2 > 1e-3 && n2 <= 1.0 {
            let n = n2.sqrt();
            return (v.0 / n, v.1 / n, v.2 / n);
        }
    }
}

fn norm3(v: (f64, f64, f64)) -> (f64, f64, f64) {
    let n = (v.0 * v.0 + v.1 * v.1 + v.2 * v.2).sqrt();
    (v.0 / n, v.1 / n, v.2 / n)
}

/// Stamp a rounded tube of `radius` from `start` along `dir` for `len`
/// voxels, writing only over regions listed in `over`.
#[allow(clippy::too_many_arguments)]
fn stamp_capsule(
    grid: &mut Array3<f64>,
    regions: &mut Array3<u8>,
    start: (f64, f64, f64),
    dir: (f64, f64, f64),
    len: f64,
    radius: f64,
    level: f64,
    code: u8,
    over: &[u8],
) {
    let (d, h, w) = grid.dim();
    let steps = (len / 0.5).ceil() as usize;
    for s in 0..=steps {
        let t = s as f64 * 0.5;
        if t > len {
            break;
        }
        // start/dir are (x, y, z)
        let px = start.0 + dir.0 * t;
        let py = start.1 + dir.1 * t;
        let pz = start.2 + dir.2 * t;
        let r = radius.ceil() as isize;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let vz = pz.round() as isize + dz;
                    let vy = py.round() as isize + dy;
                    let vx = px.round() as isize + dx;
                    if vz < 0
                        || vy < 0
                        || vx < 0
                        || vz >= d as isize
                        || vy >= h as isize
                        || vx >= w as isize
                    {
                        continue;
                    }
                    let dist2 = (vx as f64 - px).powi(2)
                        + (vy as f64 - py).powi(2)
                        + (vz as f64 - pz).powi(2);
                    if dist2 > radius * radius {
                        continue;
                    }
                    let idx = [vz as usize, vy as usize, vx as usize];
                    if over.contains(&regions[idx]) {
                        grid[idx] = level;
                        regions[idx] = code;
                    }
                }
            }
        }
    }
}

/// Separable Gaussian blur with a fixed radius-2 kernel and edge clamping.
fn gaussian_blur3(grid: &mut Array3<f64>, sigma: f64) {
    let mut kernel = [0.0; 5];
    for (i, k) in kernel.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *k = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }

    let (d, h, w) = grid.dim();
    let mut tmp = grid.clone();
    for axis in 0..3 {
        let extent = [d, h, w][axis];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let pos = [z, y, x][axis] as isize;
                    let mut acc = 0.0;
                    for (i, &k) in kernel.iter().enumerate() {
                        let off = pos + i as isize - 2;
                        let off = off.clamp(0, extent as isize - 1) as usize;
                        let mut idx = [z, y, x];
                        idx[axis] = off;
                        acc += k * grid[idx];
                    }
                    tmp[[z, y, x]] = acc;
                }
            }
        }
        std::mem::swap(grid, &mut tmp);
    }
}

fn apply_device_noise(grid: &mut Array3<f64>, domain: NoiseDomain, rng: &mut ChaCha12Rng) {
    let (d, h, w) = grid.dim();
    match domain {
        NoiseDomain::A => {
            let dist = Normal::new(0.0, 0.015).expect("std");
            for v in grid.iter_mut() {
                *v += dist.sample(rng);
            }
        }
        NoiseDomain::B => {
            // coarse grain: one draw per 2x2x2 block
            let (cd, ch, cw) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
            let dist = Normal::new(0.0, 0.02).expect("std");
            let mut coarse = Array3::<f64>::zeros((cd, ch, cw));
            for v in coarse.iter_mut() {
                *v = dist.sample(rng);
            }
            Zip::indexed(grid).for_each(|(z, y, x), v| {
                *v += coarse[[z / 2, y / 2, x / 2]];
            });
        }
    }
}

/// Binary lung-cavity mask for a volume without a region map: dark voxels
/// that are not reachable from the border through dark voxels, minus tiny
/// speckle components. Bright structures inside the lungs stay unmasked,
/// so the estimate trades recall for placement-safe precision.
pub fn estimate_lung_mask(data: &Array3<f32>) -> Array3<bool> {
    let (d, h, w) = data.dim();
    let dark = data.mapv(|v| v < 0.3);
    let mut outside = Array3::<bool>::from_elem((d, h, w), false);
    let mut queue = std::collections::VecDeque::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let border = z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1;
                if border && dark[[z, y, x]] {
                    outside[[z, y, x]] = true;
                    queue.push_back((z, y, x));
                }
            }
        }
    }
    while let Some((z, y, x)) = queue.pop_front() {
        for (nz, ny, nx) in neighbors6(z, y, x, d, h, w) {
            if dark[[nz, ny, nx]] && !outside[[nz, ny, nx]] {
                outside[[nz, ny, nx]] = true;
                queue.push_back((nz, ny, nx));
            }
        }
    }

    let mut mask = Array3::<bool>::from_elem((d, h, w), false);
    Zip::from(&mut mask).and(&dark).and(&outside).for_each(|m, &dk, &o| {
        *m = dk && !o;
    });
    drop_small_components(&mut mask, 20);
    mask
}

fn neighbors6(
    z: usize,
    y: usize,
    x: usize,
    d: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize, usize)> {
    let mut out = Vec::with_capacity(6);
    if z > 0 {
        out.push((z - 1, y, x));
    }
    if z + 1 < d {
        out.push((z + 1, y, x));
    }
    if y > 0 {
        out.push((z, y - 1, x));
    }
    if y + 1 < h {
        out.push((z, y + 1, x));
    }
    if x > 0 {
        out.push((z, y, x - 1));
    }
    if x + 1 < w {
        out.push((z, y, x + 1));
    }
    out.into_iter()
}

fn drop_small_components(mask: &mut Array3<bool>, min_size: usize) {
    let (d, h, w) = mask.dim();
    let mut seen = Array3::<bool>::from_elem((d, h, w), false);
    let mut queue = std::collections::VecDeque::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] || seen[[z, y, x]] {
                    continue;
                }
                let mut component = vec![(z, y, x)];
                seen[[z, y, x]] = true;
                queue.push_back((z, y, x));
                while let Some((qz, qy, qx)) = queue.pop_front() {
                    for (nz, ny, nx) in neighbors6(qz, qy, qx, d, h, w) {
                        if mask[[nz, ny, nx]] && !seen[[nz, ny, nx]] {
                            seen[[nz, ny, nx]] = true;
                            component.push((nz, ny, nx));
                            queue.push_back((nz, ny, nx));
                        }
                    }
                }
                if component.len() < min_size {
                    for idx in component {
                        mask[idx] = false;
                    }
                }
            }
        }
    }
}
