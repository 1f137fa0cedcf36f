//! Binary checkpoints: a JSON manifest followed by raw little-endian f64
//! arrays. Reloading is bit-exact.
//!
//! Layout: 8-byte magic, u64 manifest length, manifest bytes, then every
//! array listed in the manifest, row-major, in listed order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Architecture, ParamModel};
use crate::optim::{Optimizer, OptimizerConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LIPOSECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    config: OptimizerConfig,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    step: u64,
    config_hash: String,
    models: BTreeMap<String, Architecture>,
    optimizers: BTreeMap<String, OptimizerMeta>,
    arrays: Vec<ArrayEntry>,
    extra: serde_json::Value,
}

/// Named models, optimizer states and loose arrays plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    pub extra: serde_json::Value,
    pub models: BTreeMap<String, ParamModel>,
    pub optimizers: BTreeMap<String, Optimizer>,
    pub arrays: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(seed: u64, step: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            step,
            config_hash: config_hash.into(),
            extra: serde_json::Value::Null,
            models: BTreeMap::new(),
            optimizers: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn with_model(mut self, name: &str, model: &ParamModel) -> Self {
        self.models.insert(name.to_string(), model.clone());
        self
    }

    pub fn model(&self, name: &str) -> Result<ParamModel> {
        self.models
            .get(name)
            .cloned()
            .ok_or_else(|| bad(format!("missing model `{name}`")))
    }

    pub fn optimizer(&self, name: &str) -> Result<Optimizer> {
        self.optimizers
            .get(name)
            .cloned()
            .ok_or_else(|| bad(format!("missing optimizer `{name}`")))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| bad(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (name, m) in &self.models {
            for (pname, p) in m.param_names().into_iter().zip(m.params()) {
                entries.push((format!("model:{name}:{pname}"), p));
            }
        }
        for (name, o) in &self.optimizers {
            for (i, t) in o.first_moment.iter().enumerate() {
                entries.push((format!("opt:{name}:m:{i}"), t));
            }
            for (i, t) in o.second_moment.iter().enumerate() {
                entries.push((format!("opt:{name}:v:{i}"), t));
            }
        }
        for (name, a) in &self.arrays {
            entries.push((format!("array:{name}"), a));
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            step: self.step,
            config_hash: self.config_hash.clone(),
            models: self.models.iter().map(|(k, m)| (k.clone(), m.arch().clone())).collect(),
            optimizers: self
                .optimizers
                .iter()
                .map(|(k, o)| {
                    (
                        k.clone(),
                        OptimizerMeta {
                            config: o.config,
                            step: o.step,
                        },
                    )
                })
                .collect(),
            arrays: entries
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in entries {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let mut cursor = 16 + len;
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for e in &manifest.arrays {
            let n = e.rows * e.cols;
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad(format!("truncated array `{}`", e.name)))?;
            cursor += 8 * n;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_shape_vec((e.rows, e.cols), values).expect("sized above");
            arrays.insert(e.name.clone(), t);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        let mut take = |key: String| arrays.remove(&key).ok_or_else(|| bad(format!("missing `{key}`")));

        let mut models = BTreeMap::new();
        for (name, arch) in &manifest.models {
            let params = arch
                .param_shapes()
                .iter()
                .map(|(p, _)| take(format!("model:{name}:{p}")))
                .collect::<Result<Vec<_>>>()?;
            models.insert(name.clone(), ParamModel::from_params(arch.clone(), params)?);
        }
        let mut optimizers = BTreeMap::new();
        for (name, meta) in &manifest.optimizers {
            let mut first = Vec::new();
            let mut second = Vec::new();
            let mut i = 0;
            while let Ok(t) = take(format!("opt:{name}:m:{i}")) {
                first.push(t);
                second.push(take(format!("opt:{name}:v:{i}"))?);
                i += 1;
            }
            optimizers.insert(
                name.clone(),
                Optimizer {
                    config: meta.config,
                    first_moment: first,
                    second_moment: second,
                    step: meta.step,
                },
            );
        }
        let arrays = arrays
            .into_iter()
            .map(|(k, v)| match k.strip_prefix("array:") {
                Some(name) => Ok((name.to_string(), v)),
                None => Err(bad(format!("unexpected array `{k}`"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            seed: manifest.seed,
            step: manifest.step,
            config_hash: manifest.config_hash,
            extra: manifest.extra,
            models,
            optimizers,
            arrays,
        })
    }

    /// Writes via a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = ParamModel::init(Architecture::mlp(3, &[5], 2, Activation::Tanh), &mut rng).unwrap();
        m.params_mut()[1][[0, 2]] = -0.0;
        m.params_mut()[1][[0, 3]] = f64::MIN_POSITIVE / 4.0;
        let mut opt = Optimizer::new(OptimizerConfig::adamw(5e-5), &m);
        let mut g = Gradients::zeros_like(&m);
        g.0[0].fill(0.3);
        opt.step(&mut m, &g).unwrap();
        let mut ck = Checkpoint::new(7, 12, "abc").with_model("estimator", &m);
        ck.optimizers.insert("estimator".into(), opt);
        ck.arrays.insert("norm".into(), Tensor::from_elem((1, 1), 1.0 / 3.0));
        ck.extra = serde_json::json!({"phase": 2});
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let bits =
            |m: &ParamModel| -> Vec<u64> { m.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&back.model("estimator").unwrap()), bits(&m));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let m = ParamModel::zeros(Architecture::mlp(2, &[], 1, Activation::Identity)).unwrap();
        let ck = Checkpoint::new(1, 0, "h").with_model("d", &m);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
