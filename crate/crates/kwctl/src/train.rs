//! Config-driven desk-scale training with temperature annealing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use kw_core::kwconv::{AttentionFn, TemperatureSchedule};
use kw_core::planner::{BetaStrategy, BudgetRatio};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Meta};
use crate::idx::{load_split, Split};
use crate::model::{policy_from_str, KwNet, ModelConfig};
use crate::optim::{OptimizerConfig, Sgd};
use crate::{read_spec_text, CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetField {
    Text(String),
    Number(f64),
}

impl BudgetField {
    pub fn to_ratio(&self) -> Result<BudgetRatio> {
        Ok(match self {
            BudgetField::Text(s) => BudgetRatio::from_str_ratio(s)?,
            BudgetField::Number(v) => BudgetRatio::from_f64(*v)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: String,
    pub path: String,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture document path, or `builtin:resnet18`.
    pub arch_spec: String,
    pub budget_b: BudgetField,
    #[serde(default)]
    pub policy: Option<String>,
    pub attention_function: AttentionFn,
    pub beta_strategy: BetaStrategy,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub anneal_epochs: usize,
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub dataset: DatasetConfig,
}

fn default_classes() -> usize {
    10
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate().map_err(CliError::Config)?;
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if self.dataset.kind != "idx" {
            return Err(CliError::Config(format!(
                "unsupported dataset kind '{}'",
                self.dataset.kind
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            arch_text: read_spec_text(&self.arch_spec)?,
            budget: self.budget_b.to_ratio()?,
            policy: self.policy.as_deref().map(policy_from_str).transpose()?,
            attention_fn: self.attention_function,
            strategy: self.beta_strategy,
            num_classes: self.num_classes,
            seed: self.seed,
        })
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub tau: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Mean loss over the whole training set at initialization, evaluated at
    /// the schedule's step-0 temperature before any update.
    pub initial_loss: f64,
    /// Mean loss over the final epoch (equals `initial_loss` for 0 epochs).
    pub final_loss: f64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Run training per config, writing `metrics.jsonl` and `final.kwck` into
/// `out_dir`.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display().to_string(), e))?;

    let model_cfg = config.model_config()?;
    let mut net = KwNet::build(&model_cfg)?;

    let mut data = load_split(Path::new(&config.dataset.path), Split::Train)?;
    if let Some(limit) = config.dataset.limit {
        data.truncate(limit);
    }
    if data.is_empty() {
        return Err(CliError::Config("training dataset is empty".into()));
    }

    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let schedule = TemperatureSchedule { anneal_steps: config.anneal_epochs * steps_per_epoch };
    let total_steps = config.epochs * steps_per_epoch;
    let mut sgd = Sgd::new(config.optimizer);

    let mut records = Vec::with_capacity(config.epochs);
    let mut global_step = 0usize;
    let mut last_lr = config.optimizer.lr;

    let initial_loss = {
        let tau0 = schedule.at(0);
        let mut sum = 0.0;
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(config.batch_size.max(32)) {
            let (x, labels) = data.batch(chunk);
            let logits = net.infer_logits(&x, tau0)?;
            let loss = kw_core::tensor::ops::softmax_cross_entropy(&logits, &labels)?.item()?;
            sum += loss * labels.len() as f64;
        }
        sum / data.len() as f64
    };

    for epoch in 0..config.epochs {
        let mut indices: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_shuffle_seed(config.seed, epoch));
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let (x, labels) = data.batch(chunk);
            let tau = schedule.at(global_step);

            let mut tape = kw_core::tensor::tape::GradTape::new();
            let bound = net.bind(&mut tape);
            let xv = tape.leaf(x);
            let (logits, layer_outs) = net.logits_tape(&mut tape, &bound, xv, tau)?;
            let loss_var = tape.softmax_cross_entropy(logits, &labels)?;
            let loss = tape.value(loss_var).item()?;
            if !loss.is_finite() {
                let culprit = net
                    .layers
                    .iter()
                    .zip(&layer_outs)
                    .find(|(_, &v)| !tape.value(v).is_all_finite())
                    .map(|(l, _)| l.kw.spec.id.clone())
                    .unwrap_or_else(|| "classifier".into());
                return Err(CliError::Train(format!(
                    "non-finite loss {loss} at step {global_step} (first non-finite output: layer '{culprit}')"
                )));
            }
            let grads = tape.backward(loss_var)?;
            let mut by_name = std::collections::BTreeMap::new();
            for (name, var) in &bound.named {
                by_name.insert(name.clone(), grads.wrt(&tape, *var));
            }
            last_lr = config.optimizer.lr_at(global_step, total_steps, epoch);
            net.visit_params_mut(|name, p| {
                let g = by_name.get(name).expect("gradient for every parameter");
                sgd.update(name, p, g, last_lr);
            });

            loss_sum += loss * labels.len() as f64;
            let lv = tape.value(logits);
            let k = net.num_classes();
            for (row, &label) in labels.iter().enumerate() {
                let row = &lv.data()[row * k..(row + 1) * k];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if argmax == label {
                    correct += 1;
                }
            }
            global_step += 1;
        }

        records.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            tau: schedule.at(global_step),
            lr: last_lr,
        });
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut mf = fs::File::create(&metrics_path)
        .map_err(|e| CliError::io(metrics_path.display().to_string(), e))?;
    for r in &records {
        let line = serde_json::to_string(r)
            .map_err(|e| CliError::Config(format!("metrics encode: {e}")))?;
        writeln!(mf, "{line}").map_err(|e| CliError::io(metrics_path.display().to_string(), e))?;
    }

    let checkpoint_path = out_dir.join("final.kwck");
    let meta = Meta::from_model_config(&model_cfg, global_step, schedule.anneal_steps);
    Checkpoint::from_state(&net, meta, Some(&sgd)).save(&checkpoint_path)?;

    let final_loss = records.last().map(|r| r.loss).unwrap_or(initial_loss);
    Ok(TrainOutcome {
        records,
        initial_loss,
        final_loss,
        checkpoint_path,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::write_synthetic_dataset;

    pub(crate) fn smoke_config(data_dir: &Path, b: &str, seed: u64) -> TrainConfig {
        TrainConfig {
            arch_spec: concat!(env!("CARGO_MANIFEST_DIR"), "/assets/desk_arch.json").into(),
            budget_b: BudgetField::Text(b.into()),
            policy: None,
            attention_function: AttentionFn::Naf,
            beta_strategy: BetaStrategy::OneToOne,
            optimizer: OptimizerConfig {
                lr: 0.08,
                momentum: 0.9,
                weight_decay: 1e-4,
                schedule: crate::optim::LrSchedule::Cosine,
            },
            epochs: 1,
            batch_size: 32,
            anneal_epochs: 1,
            seed,
            num_classes: 10,
            dataset: DatasetConfig {
                kind: "idx".into(),
                path: data_dir.display().to_string(),
                limit: Some(96),
            },
        }
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_and_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_synthetic_dataset(&data, 32, 8, 1).unwrap();
        let mut cfg = smoke_config(&data, "1", 3);
        cfg.epochs = 0;
        let out = dir.path().join("run");
        let outcome = train(&cfg, &out).unwrap();
        assert!(outcome.records.is_empty());
        assert_eq!(fs::read_to_string(outcome.metrics_path).unwrap(), "");
        let ck = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        assert_eq!(ck.meta.trained_steps, 0);
        let (net, momentum) = ck.restore().unwrap();
        assert!(momentum.is_empty());
        // Initialized state equals a fresh build from the same seed.
        let fresh = KwNet::build(&cfg.model_config().unwrap()).unwrap();
        for ((_, a), (_, b)) in net.named_params().iter().zip(fresh.named_params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn same_seed_runs_produce_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_synthetic_dataset(&data, 64, 8, 2).unwrap();
        let cfg = smoke_config(&data, "1", 9);
        let o1 = train(&cfg, &dir.path().join("r1")).unwrap();
        let o2 = train(&cfg, &dir.path().join("r2")).unwrap();
        assert_eq!(
            fs::read_to_string(&o1.metrics_path).unwrap(),
            fs::read_to_string(&o2.metrics_path).unwrap()
        );
        assert_eq!(
            fs::read(&o1.checkpoint_path).unwrap(),
            fs::read(&o2.checkpoint_path).unwrap()
        );
    }

    #[test]
    fn metrics_tau_follows_the_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_synthetic_dataset(&data, 64, 8, 4).unwrap();
        let mut cfg = smoke_config(&data, "1", 5);
        cfg.epochs = 3;
        cfg.anneal_epochs = 2;
        let outcome = train(&cfg, &dir.path().join("run")).unwrap();
        let steps_per_epoch = 64usize.div_ceil(32);
        let schedule = TemperatureSchedule { anneal_steps: 2 * steps_per_epoch };
        for (e, r) in outcome.records.iter().enumerate() {
            assert_eq!(r.tau, schedule.at((e + 1) * steps_per_epoch));
        }
        assert_eq!(outcome.records.last().unwrap().tau, 0.0);
    }
}
