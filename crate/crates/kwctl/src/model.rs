//! The desk-scale network: a stack of KernelWarehouse convolution layers with
//! ReLU between them, global average pooling, and an affine classifier.
//!
//! Warehouses are single-storage: every layer of a group reads the same cell
//! tensors, and gradient contributions from all sharing layers accumulate
//! into the same tape leaves.

use std::collections::BTreeMap;

use kw_core::kwconv::{
    init, kw_attentions, kw_forward, kw_forward_tape, AttentionFn, AttentionVars, KWConvLayer,
    Warehouse,
};
use kw_core::planner::{
    assign_beta, parse_arch_spec, plan_warehouses, ArchSpec, BetaStrategy, BudgetRatio,
    DivisorPolicy, WarehousePlan,
};
use kw_core::tensor::tape::{GradTape, Var};
use kw_core::tensor::{ops, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{CliError, Result};

/// Everything needed to rebuild a network deterministically.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Original architecture document text (kept verbatim in checkpoints).
    pub arch_text: String,
    pub budget: BudgetRatio,
    pub policy: Option<DivisorPolicy>,
    pub attention_fn: AttentionFn,
    pub strategy: BetaStrategy,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Clone)]
pub struct NetLayer {
    pub kw: KWConvLayer,
    pub group_idx: usize,
}

#[derive(Clone)]
pub struct KwNet {
    pub arch: ArchSpec,
    pub plan: WarehousePlan,
    pub warehouses: Vec<Warehouse>,
    pub layers: Vec<NetLayer>,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

pub fn policy_from_str(s: &str) -> Result<DivisorPolicy> {
    match s {
        "gcd" => Ok(DivisorPolicy::Gcd),
        "gcd_half" => Ok(DivisorPolicy::GcdHalf),
        other => Err(CliError::Config(format!(
            "unknown cell policy '{other}' (expected gcd or gcd_half)"
        ))),
    }
}

pub fn policy_to_str(p: DivisorPolicy) -> &'static str {
    match p {
        DivisorPolicy::Gcd => "gcd",
        DivisorPolicy::GcdHalf => "gcd_half",
    }
}

impl KwNet {
    /// Plan, assign betas, and initialize all parameters from the seed.
    ///
    /// The RNG draw order is warehouses (group order), then attention heads
    /// (layer order), then the classifier; it does not depend on the beta
    /// strategy, so runs differing only in strategy start from identical
    /// parameters.
    pub fn build(cfg: &ModelConfig) -> Result<KwNet> {
        let arch = parse_arch_spec(&cfg.arch_text)?;
        let mut plan = plan_warehouses(&arch, cfg.budget, cfg.policy)?;
        if cfg.strategy != BetaStrategy::OneToOne {
            let tables = assign_beta(&plan, cfg.strategy)?;
            for (g, t) in plan.groups.iter_mut().zip(tables) {
                g.beta = t;
            }
        }
        let use_blend = cfg.strategy != BetaStrategy::None;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let warehouses: Vec<Warehouse> = plan
            .groups
            .iter()
            .map(|g| Warehouse::from_plan(g, &mut rng))
            .collect();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let (group_idx, member_idx) = plan
                .group_index_of_layer(&spec.id)
                .expect("planned layer belongs to a group");
            let kw = KWConvLayer::from_plan(
                spec,
                &plan.groups[group_idx],
                member_idx,
                cfg.attention_fn,
                use_blend,
                &mut rng,
            );
            layers.push(NetLayer { kw, group_idx });
        }

        let feat = arch
            .layers
            .last()
            .ok_or_else(|| CliError::Config("architecture has no layers".into()))?
            .kernel
            .f;
        let classifier_weight =
            init::uniform_fan_in(&[cfg.num_classes, feat], feat, &mut rng);
        let classifier_bias = Tensor::zeros(&[cfg.num_classes]);

        Ok(KwNet { arch, plan, warehouses, layers, classifier_weight, classifier_bias })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].kw.spec.in_channels()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_weight.shape()[0]
    }

    /// Visit every trainable parameter in canonical order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        for w in &self.warehouses {
            for (j, cell) in w.cells.iter().enumerate() {
                f(&cell_name(&w.name, j), cell);
            }
        }
        for l in &self.layers {
            let a = &l.kw.attention;
            let id = &l.kw.spec.id;
            f(&format!("layer.{id}.fc1.weight"), &a.fc1_weight);
            f(&format!("layer.{id}.fc1.bias"), &a.fc1_bias);
            f(&format!("layer.{id}.fc2.weight"), &a.fc2_weight);
            f(&format!("layer.{id}.fc2.bias"), &a.fc2_bias);
        }
        f("classifier.weight", &self.classifier_weight);
        f("classifier.bias", &self.classifier_bias);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for w in &mut self.warehouses {
            let name = w.name.clone();
            for (j, cell) in w.cells.iter_mut().enumerate() {
                f(&cell_name(&name, j), cell);
            }
        }
        for l in &mut self.layers {
            let a = &mut l.kw.attention;
            let id = l.kw.spec.id.clone();
            f(&format!("layer.{id}.fc1.weight"), &mut a.fc1_weight);
            f(&format!("layer.{id}.fc1.bias"), &mut a.fc1_bias);
            f(&format!("layer.{id}.fc2.weight"), &mut a.fc2_weight);
            f(&format!("layer.{id}.fc2.bias"), &mut a.fc2_bias);
        }
        f("classifier.weight", &mut self.classifier_weight);
        f("classifier.bias", &mut self.classifier_bias);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Register all parameters on a tape (canonical order).
    pub fn bind(&self, tape: &mut GradTape) -> BoundNet {
        let mut named = Vec::new();
        let warehouse_cells: Vec<Vec<Var>> = self
            .warehouses
            .iter()
            .map(|w| {
                w.cells
                    .iter()
                    .enumerate()
                    .map(|(j, cell)| {
                        let v = tape.leaf(cell.clone());
                        named.push((cell_name(&w.name, j), v));
                        v
                    })
                    .collect()
            })
            .collect();
        let layer_attn: Vec<AttentionVars> = self
            .layers
            .iter()
            .map(|l| {
                let a = l.kw.attention.bind(tape);
                let id = &l.kw.spec.id;
                named.push((format!("layer.{id}.fc1.weight"), a.fc1_weight));
                named.push((format!("layer.{id}.fc1.bias"), a.fc1_bias));
                named.push((format!("layer.{id}.fc2.weight"), a.fc2_weight));
                named.push((format!("layer.{id}.fc2.bias"), a.fc2_bias));
                a
            })
            .collect();
        let classifier_w = tape.leaf(self.classifier_weight.clone());
        named.push(("classifier.weight".into(), classifier_w));
        let classifier_b = tape.leaf(self.classifier_bias.clone());
        named.push(("classifier.bias".into(), classifier_b));
        BoundNet { named, warehouse_cells, layer_attn, classifier_w, classifier_b }
    }

    /// Forward to classifier logits on a tape. Also returns each KW layer's
    /// pre-activation output for non-finite diagnostics.
    pub fn logits_tape(
        &self,
        tape: &mut GradTape,
        bound: &BoundNet,
        x: Var,
        tau: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut layer_outs = Vec::with_capacity(self.layers.len());
        for (l, attn) in self.layers.iter().zip(&bound.layer_attn) {
            let y = kw_forward_tape(
                tape,
                h,
                &l.kw,
                attn,
                &bound.warehouse_cells[l.group_idx],
                tau,
            )?;
            layer_outs.push(y);
            h = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.dense_affine(pooled, bound.classifier_w, bound.classifier_b)?;
        Ok((logits, layer_outs))
    }

    /// Inference logits on a throwaway tape.
    pub fn infer_logits(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let (logits, _) = self.logits_tape(&mut tape, &bound, xv, tau)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference that also captures each layer's normalized attentions
    /// `(N, m, n_cols)`, for the statistics exporter.
    pub fn infer_with_attentions(&self, x: &Tensor, tau: f64) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut attentions = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            attentions.push(kw_attentions(&h, &l.kw, tau)?);
            let y = kw_forward(&h, &l.kw, &self.warehouses[l.group_idx], tau)?;
            h = ops::relu(&y);
        }
        let pooled = ops::global_avg_pool(&h)?;
        let logits = ops::dense_affine(&pooled, &self.classifier_weight, &self.classifier_bias)?;
        Ok((logits, attentions))
    }

    /// Overwrite parameters from a name -> tensor map; every parameter must
    /// be present with exactly matching shape. Unknown names are rejected.
    pub fn load_params(&mut self, source: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        let mut shape_err: Option<String> = None;
        self.visit_params_mut(|name, t| {
            match source.get(name) {
                Some(s) if s.shape() == t.shape() => {
                    *t = s.clone();
                    used += 1;
                }
                Some(s) => {
                    shape_err.get_or_insert_with(|| {
                        format!(
                            "parameter '{name}' has shape {:?} but checkpoint provides {:?}",
                            t.shape(),
                            s.shape()
                        )
                    });
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(e) = shape_err {
            return Err(CliError::Checkpoint(e));
        }
        if !missing.is_empty() {
            return Err(CliError::Checkpoint(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            )));
        }
        if used != source.len() {
            let known: std::collections::BTreeSet<String> =
                self.named_params().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> =
                source.keys().filter(|k| !known.contains(*k)).collect();
            return Err(CliError::Checkpoint(format!(
                "checkpoint carries unknown parameters: {extra:?}"
            )));
        }
        Ok(())
    }
}

pub struct BoundNet {
    /// `(name, var)` for every parameter, canonical order.
    pub named: Vec<(String, Var)>,
    pub warehouse_cells: Vec<Vec<Var>>,
    pub layer_attn: Vec<AttentionVars>,
    pub classifier_w: Var,
    pub classifier_b: Var,
}

fn cell_name(group: &str, j: usize) -> String {
    format!("warehouse.{group}.cell{j}")
}
