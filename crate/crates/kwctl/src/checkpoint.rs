//! KWCK checkpoint container.
//!
//! Layout: magic `KWCK`, version `u32` LE, manifest length `u64` LE, a JSON
//! manifest listing `(name, shape, dtype, offset)` per tensor plus the model
//! metadata needed to rebuild the network, then the raw little-endian `f64`
//! payload. Serialization is canonical (fixed field order, compact JSON,
//! tensors in canonical parameter order), so save -> load -> save is
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kw_core::kwconv::AttentionFn;
use kw_core::planner::{BetaStrategy, BudgetRatio};
use kw_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::{policy_from_str, policy_to_str, KwNet, ModelConfig};
use crate::optim::Sgd;
use crate::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"KWCK";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub arch_json: String,
    pub budget_b: String,
    pub policy: Option<String>,
    pub attention_function: AttentionFn,
    pub beta_strategy: BetaStrategy,
    pub num_classes: usize,
    pub seed: u64,
    pub trained_steps: usize,
    pub anneal_steps: usize,
}

impl Meta {
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            arch_text: self.arch_json.clone(),
            budget: BudgetRatio::from_str_ratio(&self.budget_b)?,
            policy: self.policy.as_deref().map(policy_from_str).transpose()?,
            attention_fn: self.attention_function,
            strategy: self.beta_strategy,
            num_classes: self.num_classes,
            seed: self.seed,
        })
    }

    pub fn from_model_config(cfg: &ModelConfig, trained_steps: usize, anneal_steps: usize) -> Meta {
        Meta {
            arch_json: cfg.arch_text.clone(),
            budget_b: format!("{}", cfg.budget),
            policy: cfg.policy.map(|p| policy_to_str(p).to_string()),
            attention_function: cfg.attention_fn,
            beta_strategy: cfg.strategy,
            num_classes: cfg.num_classes,
            seed: cfg.seed,
            trained_steps,
            anneal_steps,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: metadata plus named tensors in file order.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: Meta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot a network (and optionally optimizer momentum) for saving.
    pub fn from_state(net: &KwNet, meta: Meta, optimizer: Option<&Sgd>) -> Checkpoint {
        let mut tensors = net.named_params();
        if let Some(sgd) = optimizer {
            for (name, buf) in &sgd.buffers {
                tensors.push((format!("{MOMENTUM_PREFIX}{name}"), buf.clone()));
            }
        }
        Checkpoint { meta, tensors }
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    /// Rebuild the network this checkpoint was saved from and restore its
    /// parameters; returns the momentum buffers alongside.
    pub fn restore(&self) -> Result<(KwNet, BTreeMap<String, Tensor>)> {
        let cfg = self.meta.model_config()?;
        let mut net = KwNet::build(&cfg)?;
        let mut params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (name, t) in &self.tensors {
            match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(p) => {
                    momentum.insert(p.to_string(), t.clone());
                }
                None => {
                    params.insert(name.clone(), t.clone());
                }
            }
        }
        net.load_params(&params)?;
        Ok((net, momentum))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { version: VERSION, meta: self.meta.clone(), tensors: entries };
        let mjson = serde_json::to_vec(&manifest)
            .map_err(|e| CliError::Checkpoint(format!("manifest encode: {e}")))?;

        let mut out = Vec::with_capacity(16 + mjson.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        out.extend_from_slice(&payload);
        fs::write(path, out).map_err(|e| CliError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let name = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| CliError::io(&name, e))?;
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(CliError::Checkpoint(format!("{name}: not a KWCK file")));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CliError::Checkpoint(format!(
                "{name}: unsupported version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mend = 16usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(
            || CliError::Checkpoint(format!("{name}: manifest extends past end of file")),
        )?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend])
            .map_err(|e| CliError::Checkpoint(format!("{name}: manifest decode: {e}")))?;
        let payload = &bytes[mend..];

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(CliError::Checkpoint(format!(
                    "{name}: tensor '{}' has unsupported dtype '{}'",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected_offset {
                return Err(CliError::Checkpoint(format!(
                    "{name}: tensor '{}' at offset {} overlaps or leaves a gap (expected {})",
                    e.name, e.offset, expected_offset
                )));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 8;
            if end > payload.len() {
                return Err(CliError::Checkpoint(format!(
                    "{name}: tensor '{}' extends past the payload",
                    e.name
                )));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(CliError::Checkpoint(format!(
                "{name}: payload has {} trailing bytes",
                payload.len() - expected_offset as usize
            )));
        }
        Ok(Checkpoint { meta: manifest.meta, tensors })
    }
}
