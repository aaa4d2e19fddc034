//! Cell-dimension derivation, kernel partition, warehouse sizing, beta
//! assignment, and parameter accounting.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::Serialize;

use super::{
    gcd, ArchSpec, BetaStrategy, BetaTable, BudgetRatio, CellDims, CellPolicy, DivisorPolicy,
    GroupPlan, KernelDims, LayerSpec, PartitionMap, PlanError, PlanResult, Slot, WarehousePlan,
};

/// Hidden width of the attention head for a layer with `c` input channels:
/// a 16x reduction, floored at 4 units. Below the floor (only layers with
/// c < 64, which the published configurations never have) a ReLU head one
/// unit wide goes completely dark for roughly half of all inputs at
/// zero-bias initialization, emitting degenerate all-zero logit rows.
pub fn attention_hidden_width(c: usize) -> usize {
    c.div_ceil(16).max(4)
}

/// Common cell dimensions for a group of layers.
///
/// Channel extents take the elementwise greatest common divisor across the
/// group (halved, minimum 1, under [`DivisorPolicy::GcdHalf`]). Spatial cell
/// extents collapse to 1 whenever the group has more than one member; a
/// single-layer group keeps its own spatial size, so its cell equals its
/// kernel under the plain gcd rule.
pub fn derive_cell_dims(group_layers: &[&LayerSpec], policy: DivisorPolicy) -> PlanResult<CellDims> {
    let Some(first) = group_layers.first() else {
        return Err(PlanError::EmptyGroup("<unnamed>".into()));
    };
    let mut f = first.kernel.f;
    let mut c = first.kernel.c;
    for l in &group_layers[1..] {
        f = gcd(f, l.kernel.f);
        c = gcd(c, l.kernel.c);
    }
    let (kh, kw) = if group_layers.len() == 1 {
        (first.kernel.kh, first.kernel.kw)
    } else {
        (1, 1)
    };
    if matches!(policy, DivisorPolicy::GcdHalf) {
        f = (f / 2).max(1);
        c = (c / 2).max(1);
    }
    Ok(CellDims::new(f, c, kh, kw))
}

/// Tile a kernel volume with disjoint cell-sized blocks, lexicographic over
/// `(f0, c0, kh0, kw0)`.
pub fn partition_kernel(
    layer_id: &str,
    kernel: KernelDims,
    cell: CellDims,
) -> PlanResult<PartitionMap> {
    for (axis, (k, cl)) in [
        ("f", (kernel.f, cell.f)),
        ("c", (kernel.c, cell.c)),
        ("kh", (kernel.kh, cell.kh)),
        ("kw", (kernel.kw, cell.kw)),
    ] {
        if cl == 0 || k % cl != 0 {
            return Err(PlanError::NonDivisible {
                layer: layer_id.to_string(),
                axis,
                kernel: k,
                cell: cl,
            });
        }
    }
    let mut slots = Vec::with_capacity(
        (kernel.f / cell.f) * (kernel.c / cell.c) * (kernel.kh / cell.kh) * (kernel.kw / cell.kw),
    );
    let mut index = 0;
    for f0 in (0..kernel.f).step_by(cell.f) {
        for c0 in (0..kernel.c).step_by(cell.c) {
            for kh0 in (0..kernel.kh).step_by(cell.kh) {
                for kw0 in (0..kernel.kw).step_by(cell.kw) {
                    slots.push(Slot { index, offset: [f0, c0, kh0, kw0] });
                    index += 1;
                }
            }
        }
    }
    Ok(PartitionMap { layer_id: layer_id.to_string(), kernel, cell, slots })
}

/// Plan every warehouse group of an architecture at budget `b`.
///
/// `policy_override`, when given, replaces the `gcd`/`gcd_half` policy of
/// every group (groups with explicit cell dimensions keep them). Beta tables
/// default to the one-to-one strategy; use [`assign_beta`] for alternatives.
pub fn plan_warehouses(
    arch: &ArchSpec,
    b: BudgetRatio,
    policy_override: Option<DivisorPolicy>,
) -> PlanResult<WarehousePlan> {
    let mut groups = Vec::with_capacity(arch.groups.len());
    for spec in &arch.groups {
        let members = arch.group_layers(&spec.name);
        if members.is_empty() {
            return Err(PlanError::EmptyGroup(spec.name.clone()));
        }
        let cell_dims = match (policy_override, spec.cell_policy) {
            (_, CellPolicy::Explicit(d)) => d,
            (Some(p), _) => derive_cell_dims(&members, p)?,
            (None, CellPolicy::Gcd) => derive_cell_dims(&members, DivisorPolicy::Gcd)?,
            (None, CellPolicy::GcdHalf) => derive_cell_dims(&members, DivisorPolicy::GcdHalf)?,
        };
        let partitions: Vec<PartitionMap> = members
            .iter()
            .map(|l| partition_kernel(&l.id, l.kernel, cell_dims))
            .collect::<PlanResult<_>>()?;
        let m_t: usize = partitions.iter().map(|p| p.m()).sum();
        let n = b.round_mul(m_t);
        if n == 0 {
            return Err(PlanError::ZeroCells { group: spec.name.clone() });
        }
        let has_zero_cell = n < m_t;
        let beta = beta_for_group(&spec.name, m_t, n, has_zero_cell, BetaStrategy::OneToOne)?;
        groups.push(GroupPlan {
            name: spec.name.clone(),
            cell_dims,
            partitions,
            m_t,
            n,
            has_zero_cell,
            beta,
        });
    }
    Ok(WarehousePlan { budget: b, groups })
}

/// Build the beta table of every group under the given strategy.
pub fn assign_beta(plan: &WarehousePlan, strategy: BetaStrategy) -> PlanResult<Vec<BetaTable>> {
    plan.groups
        .iter()
        .map(|g| beta_for_group(&g.name, g.m_t, g.n, g.has_zero_cell, strategy))
        .collect()
}

fn beta_for_group(
    group: &str,
    m_t: usize,
    n: usize,
    has_zero_cell: bool,
    strategy: BetaStrategy,
) -> PlanResult<BetaTable> {
    let cols = n + usize::from(has_zero_cell);
    let mut table = BetaTable::zeroed(m_t, cols, strategy);
    match strategy {
        BetaStrategy::OneToOne => {
            // Cells assigned without repetition; once they run out the
            // remaining rows point at the zero-cell column.
            for row in 0..m_t {
                if row < n {
                    table.set(row, row);
                } else {
                    table.set(row, n);
                }
            }
        }
        BetaStrategy::AllToOne => {
            for row in 0..m_t {
                for col in 0..n {
                    table.set(row, col);
                }
            }
        }
        BetaStrategy::KToOne(k) => {
            if k == 0 || k * m_t > n {
                return Err(PlanError::InfeasibleStrategy {
                    group: group.to_string(),
                    msg: alloc::format!("k_to_one({k}) needs k*m_t <= n, have m_t={m_t}, n={n}"),
                });
            }
            for row in 0..m_t {
                for col in row * k..(row + 1) * k {
                    table.set(row, col);
                }
            }
        }
        BetaStrategy::None => {}
    }
    Ok(table)
}

/// Per-group parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupParams {
    /// Learnable warehouse values: `n * |cell|`.
    pub warehouse_params: usize,
    /// Attention-head values over all member layers:
    /// `c*h + h + h*m*n_cols + m*n_cols` per layer with `h = ceil(c/16)`.
    pub attention_params: usize,
    /// What the same layers would cost as static kernels.
    pub static_params: usize,
    /// `warehouse_params / static_params`; equals `b` whenever `b * m_t` is
    /// integral, and in general differs by at most `1 / (2 m_t)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub groups: Vec<(String, GroupParams)>,
    pub total_warehouse_params: usize,
    pub total_attention_params: usize,
    pub total_static_params: usize,
    pub total_ratio: f64,
}

/// Count warehouse, attention and equivalent static parameters.
pub fn count_params(plan: &WarehousePlan, arch: &ArchSpec) -> ParamReport {
    let mut groups = Vec::with_capacity(plan.groups.len());
    let mut tw = 0;
    let mut ta = 0;
    let mut ts = 0;
    for g in &plan.groups {
        let warehouse = g.n * g.cell_dims.volume();
        let n_cols = g.n_cols();
        let mut attention = 0;
        let mut stat = 0;
        for p in &g.partitions {
            let layer = arch.layer(&p.layer_id).expect("planned layer exists in arch");
            let c = layer.in_channels();
            let h = attention_hidden_width(c);
            let m = p.m();
            attention += c * h + h + h * m * n_cols + m * n_cols;
            stat += p.kernel.volume();
        }
        let ratio = warehouse as f64 / stat as f64;
        tw += warehouse;
        ta += attention;
        ts += stat;
        groups.push((
            g.name.clone(),
            GroupParams {
                warehouse_params: warehouse,
                attention_params: attention,
                static_params: stat,
                ratio,
            },
        ));
    }
    ParamReport {
        groups,
        total_warehouse_params: tw,
        total_attention_params: ta,
        total_static_params: ts,
        total_ratio: tw as f64 / ts as f64,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerM {
    pub id: String,
    pub m: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub cell_dims: [usize; 4],
    pub m_per_layer: Vec<LayerM>,
    pub m_t: usize,
    pub n: usize,
    pub has_zero_cell: bool,
    pub param_counts: GroupParams,
}

/// JSON-facing plan report.
#[derive(Debug, Clone, Serialize)]
pub struct PlanReport {
    pub budget_b: String,
    pub budget_value: f64,
    pub groups: Vec<GroupReport>,
    pub total_warehouse_params: usize,
    pub total_attention_params: usize,
    pub total_static_params: usize,
    pub total_ratio: f64,
}

impl WarehousePlan {
    pub fn report(&self, arch: &ArchSpec) -> PlanReport {
        let params = count_params(self, arch);
        let groups = self
            .groups
            .iter()
            .zip(&params.groups)
            .map(|(g, (_, p))| GroupReport {
                name: g.name.clone(),
                cell_dims: g.cell_dims.as_array(),
                m_per_layer: g
                    .partitions
                    .iter()
                    .map(|pt| LayerM { id: pt.layer_id.clone(), m: pt.m() })
                    .collect(),
                m_t: g.m_t,
                n: g.n,
                has_zero_cell: g.has_zero_cell,
                param_counts: p.clone(),
            })
            .collect();
        PlanReport {
            budget_b: alloc::format!("{}", self.budget),
            budget_value: self.budget.to_f64(),
            groups,
            total_warehouse_params: params.total_warehouse_params,
            total_attention_params: params.total_attention_params,
            total_static_params: params.total_static_params,
            total_ratio: params.total_ratio,
        }
    }
}
