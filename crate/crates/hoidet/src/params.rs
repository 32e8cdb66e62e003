//! Named parameter storage, graph binding, and checkpoint round-trips.
//!
//! All learnable state lives in a [`ParamStore`]: a sorted name → tensor map.
//! A forward pass binds every tensor onto a fresh [`Graph`] (trainable or
//! constant) and modules look their parameters up by name through [`Bound`].
//! Checkpoints are a directory of HCTF tensors plus a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{hctf, Graph, Real, Tensor, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor file {path}: {source}")]
    Hctf {
        path: String,
        #[source]
        source: hctf::HctfError,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, ParamError>;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.into()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Tensors in name order, for [`Bound::from_ordered_ids`] round-trips.
    pub fn ordered_tensors(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Inserts every parameter into `g` and returns the name → id map.
    pub fn bind_all(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Bound { ids }
    }
}

/// Name → graph-node map produced by [`ParamStore::bind_all`].
#[derive(Debug, Clone)]
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.into()))
    }

    /// Rebuilds a binding from ids laid out in the store's name order.
    /// Used by gradient checks that re-register tensors themselves.
    pub fn from_ordered_ids(store: &ParamStore, ids: &[TensorId]) -> Self {
        assert_eq!(store.len(), ids.len(), "id count must match store");
        Self {
            ids: store
                .names()
                .map(String::from)
                .zip(ids.iter().copied())
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> + '_ {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: BTreeMap<String, ManifestEntry>,
    config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    shape: Vec<usize>,
}

const MANIFEST_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> ParamError {
    ParamError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl ParamStore {
    /// Writes every tensor as `<dir>/<name>.hctf` plus `manifest.json`.
    /// `config` is carried verbatim for the caller to re-interpret on load.
    pub fn save(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut manifest = Manifest {
            format_version: MANIFEST_VERSION,
            tensors: BTreeMap::new(),
            config: config.clone(),
        };
        for (name, t) in &self.tensors {
            let file = format!("{name}.hctf");
            let path = dir.join(&file);
            hctf::write_file(&path, t, hctf::Dtype::F64).map_err(|e| ParamError::Hctf {
                path: path.display().to_string(),
                source: e,
            })?;
            manifest.tensors.insert(
                name.clone(),
                ManifestEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ParamError::Manifest(e.to_string()))?;
        fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))?;
        Ok(())
    }

    /// Loads a checkpoint directory; returns the store and its config value.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| ParamError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(ParamError::Manifest(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        let mut store = ParamStore::new();
        for (name, entry) in manifest.tensors {
            let path = dir.join(&entry.file);
            let t = hctf::read_file(&path).map_err(|e| ParamError::Hctf {
                path: path.display().to_string(),
                source: e,
            })?;
            if t.shape() != entry.shape.as_slice() {
                return Err(ParamError::Manifest(format!(
                    "tensor `{name}` has shape {:?} but manifest says {:?}",
                    t.shape(),
                    entry.shape
                )));
            }
            store.insert(name, t)?;
        }
        Ok((store, manifest.config))
    }
}

// ── Common initializers ─────────────────────────────────────────────────

/// Truncated-normal weight init, std 0.02 (everything but queries).
pub const INIT_STD: Real = 0.02;

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    store.insert(
        format!("{prefix}.w"),
        Tensor::trunc_randn(&[d_in, d_out], INIT_STD, rng),
    )?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(&[dim], 1.0))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]))?;
    Ok(())
}

/// Binds `{prefix}.w` / `{prefix}.b` and applies `x·W + b`.
pub fn linear_forward(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
) -> crate::tensor::Result<TensorId> {
    let w = bound.id(&format!("{prefix}.w")).map_err(param_shape_err)?;
    let b = bound.id(&format!("{prefix}.b")).map_err(param_shape_err)?;
    g.linear(x, w, b)
}

fn param_shape_err(e: ParamError) -> crate::tensor::TensorError {
    crate::tensor::TensorError::Invalid {
        what: "parameter binding",
        detail: e.to_string(),
    }
}
