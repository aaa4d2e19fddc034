//! The runtime KernelWarehouse layer.
//!
//! Per input sample: channel-wise GAP feeds a two-layer FC head producing
//! `m` rows of `n` logits (plus one for the zero cell when the budget is
//! below 1), each row is normalized by the attention function and blended
//! against its frozen beta row under the temperature, the layer kernel is
//! assembled slot by slot as linear mixtures of the shared warehouse cells,
//! and the assembled kernel convolves that sample.

mod assemble;
mod attention;
mod forward;
pub mod init;

pub use assemble::{assemble_kernel, assemble_kernel_tape};
pub use attention::{
    normalize_attention, normalize_attention_all, normalize_attention_tape, temperature_at,
};
pub use forward::{
    attention_logits, attention_logits_tape, kw_attentions, kw_forward, kw_forward_tape,
    reference_dynamic_conv,
};

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::planner::{BetaTable, CellDims, GroupPlan, LayerSpec, PartitionMap};
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Normalizer applied to each row of attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionFn {
    /// `z_j / sum_p |z_p|`; admits negative attentions.
    Naf,
    Softmax,
    Sigmoid,
    /// `max(z_j, 0) / sum_p |z_p|`.
    ReluNorm,
}

/// Linear temperature decay from 1 to 0 over `anneal_steps` optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub anneal_steps: usize,
}

impl TemperatureSchedule {
    pub fn at(&self, step: usize) -> f64 {
        temperature_at(self, step)
    }
}

/// The shared set of learnable kernel cells for one warehouse group.
///
/// The zero cell has no storage: it is permanently zero, takes no gradient,
/// and exists only as an extra logit column during normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Warehouse {
    pub name: String,
    /// `n` cells, all of identical cell shape `(f, c, kh, kw)`.
    pub cells: Vec<Tensor>,
    pub zero_cell_active: bool,
    pub shared_by: Vec<String>,
}

impl Warehouse {
    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cells.len() + usize::from(self.zero_cell_active)
    }

    pub fn cell_shape(&self) -> &[usize] {
        self.cells[0].shape()
    }

    /// Fan-in-scaled normal initialization from the group plan; cell shapes
    /// come from the plan's cell dimensions, the scale from the largest
    /// assembled-kernel fan-in across the sharing layers.
    pub fn from_plan(group: &GroupPlan, rng: &mut impl Rng) -> Self {
        let d = group.cell_dims;
        let fan_in = group
            .partitions
            .iter()
            .map(|p| p.kernel.c * p.kernel.kh * p.kernel.kw)
            .max()
            .unwrap_or(1);
        let cells = (0..group.n)
            .map(|_| init::normal_cell(d, fan_in, rng))
            .collect();
        Warehouse {
            name: group.name.clone(),
            cells,
            zero_cell_active: group.has_zero_cell,
            shared_by: group.partitions.iter().map(|p| p.layer_id.clone()).collect(),
        }
    }

    /// Register every cell on a tape.
    pub fn bind(&self, tape: &mut GradTape) -> WarehouseVars {
        WarehouseVars {
            cells: self.cells.iter().map(|c| tape.leaf(c.clone())).collect(),
        }
    }
}

/// Tape handles for one warehouse's cells.
#[derive(Debug, Clone)]
pub struct WarehouseVars {
    pub cells: Vec<Var>,
}

/// The two FC layers of a layer's attention head.
///
/// `fc1` maps the pooled `c`-vector to `ceil(c/16)` hidden units; `fc2` emits
/// `m * n_cols` logits read as `m` rows of `n_cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModuleParams {
    pub layer_id: String,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl AttentionModuleParams {
    pub fn init(
        layer_id: &str,
        in_channels: usize,
        m: usize,
        n_cols: usize,
        rng: &mut impl Rng,
    ) -> Self {
        init::attention_params(layer_id, in_channels, m, n_cols, rng)
    }

    pub fn hidden_width(&self) -> usize {
        self.fc1_weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.fc1_weight.shape()[1]
    }

    pub fn logit_count(&self) -> usize {
        self.fc2_weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut GradTape) -> AttentionVars {
        AttentionVars {
            fc1_weight: tape.leaf(self.fc1_weight.clone()),
            fc1_bias: tape.leaf(self.fc1_bias.clone()),
            fc2_weight: tape.leaf(self.fc2_weight.clone()),
            fc2_bias: tape.leaf(self.fc2_bias.clone()),
        }
    }
}

/// Tape handles for one attention head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Runtime state of one KernelWarehouse convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KWConvLayer {
    pub spec: LayerSpec,
    pub partition: PartitionMap,
    pub attention: AttentionModuleParams,
    /// This layer's rows of the group beta table, as an `(m, n_cols)` 0/1
    /// tensor. Frozen metadata, never trained.
    pub beta: Tensor,
    pub attention_fn: AttentionFn,
    /// When false the temperature blend is disabled outright (fine-tuning /
    /// no-initialization mode) and the layer always runs at effective tau 0.
    pub use_blend: bool,
}

impl KWConvLayer {
    /// Build the layer for the `layer_idx`-th member of a planned group.
    pub fn from_plan(
        spec: &LayerSpec,
        group: &GroupPlan,
        layer_idx: usize,
        attention_fn: AttentionFn,
        use_blend: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let partition = group.partitions[layer_idx].clone();
        let m = partition.m();
        let n_cols = group.n_cols();
        let attention =
            AttentionModuleParams::init(&spec.id, spec.in_channels(), m, n_cols, rng);
        let beta = beta_rows_tensor(&group.beta, group.layer_rows(layer_idx));
        KWConvLayer {
            spec: spec.clone(),
            partition,
            attention,
            beta,
            attention_fn,
            use_blend,
        }
    }

    /// Replace the frozen beta rows (after re-running beta assignment).
    pub fn set_beta(&mut self, table: &BetaTable, rows: core::ops::Range<usize>) {
        self.beta = beta_rows_tensor(table, rows);
    }

    pub fn m(&self) -> usize {
        self.partition.m()
    }

    pub fn n_cols(&self) -> usize {
        self.beta.shape()[1]
    }

    /// Temperature actually applied, honoring the blend switch.
    pub fn effective_tau(&self, tau: f64) -> f64 {
        if self.use_blend {
            tau
        } else {
            0.0
        }
    }

    pub fn cell_dims(&self) -> CellDims {
        self.partition.cell
    }
}

fn beta_rows_tensor(table: &BetaTable, rows: core::ops::Range<usize>) -> Tensor {
    let m = rows.len();
    let cols = table.cols();
    let mut t = Tensor::zeros(&[m, cols]);
    for (i, row) in rows.enumerate() {
        for j in 0..cols {
            if table.get(row, j) != 0 {
                t.data_mut()[i * cols + j] = 1.0;
            }
        }
    }
    t
}
