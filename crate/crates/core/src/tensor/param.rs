use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{bail, Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

/// Thread-shareable deep copy of a [`ParamSet`]'s values.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSnapshot {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ParamSnapshot {
    pub fn to_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, (shape, data)) in &self.entries {
            set.params
                .insert(name.clone(), Tensor::param(shape, data.clone()).expect("snapshot shapes are valid"));
        }
        set
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            bail!(Argument, "duplicate parameter name {name:?}");
        }
        self.params.insert(name, Tensor::param(shape, data)?);
        Ok(())
    }

    /// Adds an existing tensor (constant or trainable) under `name`.
    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            bail!(Argument, "duplicate parameter name {name:?}");
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Equal names with pairwise-equal shapes.
    pub fn shape_compatible(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Installs zero gradients on parameters the last backward pass did not
    /// reach, returning their names.
    pub fn ensure_grads(&self) -> Vec<String> {
        let mut filled = Vec::new();
        for (name, t) in &self.params {
            if !t.has_grad() {
                t.set_grad(vec![0.0; t.numel()]);
                filled.push(name.clone());
            }
        }
        filled
    }

    /// Same values as constants: usable in a forward pass that must not
    /// build a graph or receive gradients.
    pub fn detached(&self) -> ParamSet {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), (v.shape().to_vec(), v.data().to_vec())))
                .collect(),
        }
    }

    /// Builds a new set from `f(name, values)`, preserving shapes.
    pub fn map_values(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Vec<f64>>) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in &self.params {
            let data = f(name, t)?;
            out.params.insert(name.clone(), Tensor::param(t.shape(), data)?);
        }
        Ok(out)
    }

    /// Plain gradient descent: `p <- p - lr * grad(p)`. The returned set
    /// holds fresh leaves, so gradients start out cleared.
    pub fn sgd_step(&self, lr: f64) -> Result<ParamSet> {
        sgd_step(self, lr)
    }
}

/// Plain gradient descent over every parameter; a parameter without a
/// populated gradient is a state error.
pub fn sgd_step(params: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.map_values(|name, t| {
        let Some(g) = t.grad() else {
            bail!(State, "parameter {name:?} has no gradient");
        };
        Ok(t.data().iter().zip(g.iter()).map(|(p, g)| p - lr * g).collect())
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    dtype: String,
    payload: String,
    params: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

const FORMAT: &str = "dualseg-params-v1";
const DTYPE: &str = "f64-le";

/// A parameter set plus free-form metadata (model configuration).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: serde_json::Value,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<stem>.json` (names, shapes, dtype, byte offsets) and
/// `<stem>.bin` (raw little-endian IEEE-754 doubles in manifest order).
pub fn save_checkpoint(manifest_path: &Path, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    let payload = payload_path(manifest_path);
    let mut bytes = Vec::with_capacity(params.num_values() * 8);
    let mut entries = Vec::new();
    for (name, t) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
            len: t.numel() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: DTYPE.into(),
        payload: payload.file_name().unwrap().to_string_lossy().into_owned(),
        params: entries,
        meta: meta.clone(),
    };
    fs::write(&payload, &bytes)?;
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if manifest.format != FORMAT || manifest.dtype != DTYPE {
        bail!(Argument, "unsupported checkpoint format {} / {}", manifest.format, manifest.dtype);
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&manifest.payload))?;
    let mut params = ParamSet::new();
    for e in &manifest.params {
        let start = e.offset as usize;
        let end = start + 8 * e.len as usize;
        if end > bytes.len() || super::numel(&e.shape) as u64 != e.len {
            bail!(Argument, "checkpoint entry {:?} is inconsistent with its payload", e.name);
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(e.name.clone(), &e.shape, data)?;
    }
    Ok(Checkpoint { params, meta: manifest.meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64, g: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", &[], vec![v]).unwrap();
        p.get("w").unwrap().set_grad(vec![g]);
        p
    }

    #[test]
    fn sgd_closed_form() {
        let p = one(1.0, 0.5).sgd_step(0.01).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.995);
        assert!(!p.get("w").unwrap().has_grad());
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let p = one(1.2345, 7.0).sgd_step(0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.2345);
    }

    #[test]
    fn sgd_two_steps_constant_grad() {
        let (lr, g) = (0.01, 0.25);
        let p1 = one(2.0, g).sgd_step(lr).unwrap();
        p1.get("w").unwrap().set_grad(vec![g]);
        let p2 = p1.sgd_step(lr).unwrap();
        assert!((p2.get("w").unwrap().item() - (2.0 - 2.0 * lr * g)).abs() < 1e-15);
    }

    #[test]
    fn sgd_missing_grad_is_state_error() {
        let mut p = ParamSet::new();
        p.insert("w", &[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(p.sgd_step(0.1), Err(Error::State(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", &[1], vec![0.0]).unwrap();
        assert!(p.insert("a", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("b.conv", &[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, 1.0 / 3.0]).unwrap();
        p.insert("a.bias", &[1], vec![7.0]).unwrap();
        let meta = serde_json::json!({"classes": 6});
        let first = dir.path().join("one.json");
        save_checkpoint(&first, &p, &meta).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        assert_eq!(loaded.params.snapshot(), p.snapshot());
        assert_eq!(loaded.meta, meta);
        let second = dir.path().join("two.json");
        save_checkpoint(&second, &loaded.params, &loaded.meta).unwrap();
        assert_eq!(fs::read(first.with_extension("bin")).unwrap(), fs::read(second.with_extension("bin")).unwrap());
        let strip = |p: &Path| String::from_utf8(fs::read(p).unwrap()).unwrap().replace("two.bin", "one.bin");
        assert_eq!(strip(&first), strip(&second));
    }
}
