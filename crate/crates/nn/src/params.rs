//! Named parameter storage, graph binding, and on-disk blobs.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names (`gen.dense.w`).
//! Each training phase binds the set into [`Vars`], choosing per name
//! whether the bound tensor is a differentiable leaf or a frozen constant;
//! that choice is the whole mechanism for phase isolation in alternating
//! training. BTreeMap ordering keeps every traversal, update, and saved
//! byte stream deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Absorb every parameter of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) {
        for (name, value) in other.map {
            self.insert(name, value);
        }
    }

    /// Parameters whose names start with `prefix`, as a sub-map.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, ArrayD<f64>> {
        self.map
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Bind into graph tensors. Names for which `trainable` returns true
    /// become differentiable leaves; the rest become constants.
    pub fn bind(&self, trainable: impl Fn(&str) -> bool) -> Vars {
        let map = self
            .map
            .iter()
            .map(|(name, value)| {
                let t = if trainable(name) {
                    Tensor::leaf(value.clone())
                } else {
                    Tensor::constant(value.clone())
                };
                (name.clone(), t)
            })
            .collect();
        Vars { map }
    }

    pub fn into_inner(self) -> BTreeMap<String, ArrayD<f64>> {
        self.map
    }

    pub fn from_inner(map: BTreeMap<String, ArrayD<f64>>) -> ParamSet {
        ParamSet { map }
    }
}

/// Graph-bound view of a [`ParamSet`] for one forward/backward pass.
pub struct Vars {
    map: BTreeMap<String, Tensor>,
}

impl Vars {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing variable {name}"))
    }

    /// Leaf tensors in name order, the order gradient lists follow.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        self.map
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }
}

/// N(0, std) array with a deterministic fill order.
pub fn normal_array(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("normal_array shape")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// He-style std for hidden layers: sqrt(2 / fan_in).
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Smaller std for output heads: sqrt(1 / fan_in).
pub fn head_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

fn blob_paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut bin = base.as_os_str().to_owned();
    bin.push(".bin");
    let mut man = base.as_os_str().to_owned();
    man.push(".shapes.json");
    (PathBuf::from(bin), PathBuf::from(man))
}

/// Write `<base>.bin` (little-endian f64, name order) plus
/// `<base>.shapes.json` describing the layout.
pub fn save_arrays(base: &Path, arrays: &BTreeMap<String, ArrayD<f64>>) -> io::Result<()> {
    let (bin_path, man_path) = blob_paths(base);
    let entries: Vec<BlobEntry> = arrays
        .iter()
        .map(|(name, a)| BlobEntry { name: name.clone(), shape: a.shape().to_vec() })
        .collect();
    let manifest = serde_json::to_vec_pretty(&entries)?;
    fs::write(&man_path, manifest)?;

    let mut w = io::BufWriter::new(fs::File::create(&bin_path)?);
    for a in arrays.values() {
        let std_layout = a.as_standard_layout();
        for &x in std_layout.as_slice().expect("contiguous") {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Inverse of [`save_arrays`].
pub fn load_arrays(base: &Path) -> io::Result<BTreeMap<String, ArrayD<f64>>> {
    let (bin_path, man_path) = blob_paths(base);
    let entries: Vec<BlobEntry> = serde_json::from_slice(&fs::read(&man_path)?)?;
    let mut r = io::BufReader::new(fs::File::open(&bin_path)?);
    let mut map = BTreeMap::new();
    for entry in &entries {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        map.insert(entry.name.clone(), arr);
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{} trailing bytes in {}", trailing.len(), bin_path.display()),
        ));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn bind_controls_requires_grad() {
        let mut p = ParamSet::new();
        p.insert("gen.w", zeros(&[2, 2]));
        p.insert("dslice.w", zeros(&[2]));
        let vars = p.bind(|name| name.starts_with("gen."));
        assert!(vars.get("gen.w").requires_grad());
        assert!(!vars.get("dslice.w").requires_grad());
        let trainable = vars.trainable();
        assert_eq!(trainable.len(), 1);
        assert_eq!(trainable[0].0, "gen.w");
    }

    #[test]
    fn subset_filters_by_prefix() {
        let mut p = ParamSet::new();
        p.insert("a.x", zeros(&[1]));
        p.insert("a.y", zeros(&[1]));
        p.insert("b.x", zeros(&[1]));
        assert_eq!(p.subset("a.").len(), 2);
        assert_eq!(p.subset("b.").len(), 1);
    }

    #[test]
    fn normal_array_is_seed_deterministic() {
        let a = normal_array(&mut ChaCha12Rng::seed_from_u64(7), &[4, 4], 0.5);
        let b = normal_array(&mut ChaCha12Rng::seed_from_u64(7), &[4, 4], 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn blob_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), normal_array(&mut rng, &[3, 5], 1.0));
        map.insert("b".to_string(), normal_array(&mut rng, &[5], 1.0));
        let base = dir.path().join("net");
        save_arrays(&base, &map).unwrap();
        let loaded = load_arrays(&base).unwrap();
        assert_eq!(map.len(), loaded.len());
        for (name, a) in &map {
            let l = &loaded[name];
            assert_eq!(a.shape(), l.shape());
            for (x, y) in a.iter().zip(l.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_insert_panics() {
        let mut p = ParamSet::new();
        p.insert("w", zeros(&[1]));
        p.insert("w", zeros(&[1]));
    }
}
