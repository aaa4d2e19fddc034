//! Kernel-partition planning: from a declarative layer list plus a budget
//! `b = n / m_t` to cell dimensions, partition maps, warehouse sizes, and
//! beta assignment tables.
//!
//! Everything here is pure integer arithmetic over immutable inputs with a
//! stable ordering, so planning the same document twice yields identical
//! plans bit for bit.

mod parse;
mod plan;

pub use parse::parse_arch_spec;
pub use plan::{
    assign_beta, attention_hidden_width, count_params, derive_cell_dims, partition_kernel,
    plan_warehouses, GroupParams, GroupReport, LayerM, ParamReport, PlanReport,
};

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Planning and parsing failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanError {
    /// Malformed document (includes unknown layer kinds and type errors).
    Syntax { line: usize, column: usize, msg: String },
    DuplicateLayerId(String),
    UnknownGroup { layer: String, group: String },
    InvalidLayer { layer: String, msg: String },
    BadBudget(String),
    EmptyGroup(String),
    /// A cell extent does not divide the kernel extent on the named axis.
    NonDivisible { layer: String, axis: &'static str, kernel: usize, cell: usize },
    /// Rounding `b * m_t` left the warehouse without any cells.
    ZeroCells { group: String },
    InfeasibleStrategy { group: String, msg: String },
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::Syntax { line, column, msg } => {
                write!(f, "spec syntax error at line {line}, column {column}: {msg}")
            }
            PlanError::DuplicateLayerId(id) => write!(f, "duplicate layer id '{id}'"),
            PlanError::UnknownGroup { layer, group } => {
                write!(f, "layer '{layer}' references unknown warehouse group '{group}'")
            }
            PlanError::InvalidLayer { layer, msg } => write!(f, "layer '{layer}': {msg}"),
            PlanError::BadBudget(msg) => write!(f, "bad budget: {msg}"),
            PlanError::EmptyGroup(name) => write!(f, "warehouse group '{name}' has no layers"),
            PlanError::NonDivisible { layer, axis, kernel, cell } => write!(
                f,
                "layer '{layer}': cell extent {cell} does not divide kernel extent {kernel} on axis {axis}"
            ),
            PlanError::ZeroCells { group } => {
                write!(f, "group '{group}': budget rounds to zero kernel cells")
            }
            PlanError::InfeasibleStrategy { group, msg } => {
                write!(f, "group '{group}': {msg}")
            }
        }
    }
}

impl core::error::Error for PlanError {}

pub type PlanResult<T> = core::result::Result<T, PlanError>;

/// Kernel or cell extents `(f, c, kh, kw)`: output filters, input channels,
/// spatial height and width. Serialized as the 4-array `[f, c, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct KernelDims {
    pub f: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
}

/// Common cell extents shared by every kernel in a warehouse group.
pub type CellDims = KernelDims;

impl KernelDims {
    pub fn new(f: usize, c: usize, kh: usize, kw: usize) -> Self {
        KernelDims { f, c, kh, kw }
    }

    pub fn volume(&self) -> usize {
        self.f * self.c * self.kh * self.kw
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.f, self.c, self.kh, self.kw]
    }

    pub fn divides(&self, kernel: &KernelDims) -> bool {
        kernel.f % self.f == 0
            && kernel.c % self.c == 0
            && kernel.kh % self.kh == 0
            && kernel.kw % self.kw == 0
    }
}

impl From<[usize; 4]> for KernelDims {
    fn from(a: [usize; 4]) -> Self {
        KernelDims { f: a[0], c: a[1], kh: a[2], kw: a[3] }
    }
}

impl From<KernelDims> for [usize; 4] {
    fn from(d: KernelDims) -> Self {
        d.as_array()
    }
}

impl fmt::Display for KernelDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.f, self.c, self.kh, self.kw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Standard,
    /// One filter per input channel; the kernel is stored `(channels, 1, k, k)`.
    Depthwise,
}

/// One convolutional layer of the described architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kernel: KernelDims,
    pub stride: usize,
    pub pad: usize,
    pub kind: LayerKind,
    /// Reassigned stage label; defaults to the warehouse group name.
    pub stage: String,
    pub warehouse_group: String,
}

impl LayerSpec {
    /// Channel count of the activation this layer consumes; this is what the
    /// attention head's first FC layer sees.
    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::Standard => self.kernel.c,
            LayerKind::Depthwise => self.kernel.f,
        }
    }
}

/// How a group picks its common cell dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellPolicy {
    Gcd,
    GcdHalf,
    Explicit(CellDims),
}

/// Divisor rule usable as a whole-plan override (`Explicit` is per-group data
/// and cannot be overridden from outside the document).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivisorPolicy {
    Gcd,
    GcdHalf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: String,
    pub cell_policy: CellPolicy,
}

/// Fully resolved architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    pub groups: Vec<GroupSpec>,
    pub budget_b: Option<BudgetRatio>,
}

impl ArchSpec {
    /// Layers of one group, in document order.
    pub fn group_layers(&self, group: &str) -> Vec<&LayerSpec> {
        self.layers
            .iter()
            .filter(|l| l.warehouse_group == group)
            .collect()
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }
}

/// Exact positive rational budget factor `b`.
///
/// Parsed either from a `"p/q"` string or from a JSON number (every finite
/// binary float is itself a rational, so nothing is lost). Kept reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetRatio {
    num: u128,
    den: u128,
}

impl BudgetRatio {
    pub fn new(num: u128, den: u128) -> PlanResult<Self> {
        if num == 0 || den == 0 {
            return Err(PlanError::BadBudget("budget must be positive".into()));
        }
        let g = gcd_u128(num, den);
        Ok(BudgetRatio { num: num / g, den: den / g })
    }

    pub fn from_str_ratio(s: &str) -> PlanResult<Self> {
        let s = s.trim();
        let (p, q) = match s.split_once('/') {
            Some((p, q)) => (p.trim(), q.trim()),
            None => (s, "1"),
        };
        let num: u128 = p
            .parse()
            .map_err(|_| PlanError::BadBudget(alloc::format!("bad numerator '{p}'")))?;
        let den: u128 = q
            .parse()
            .map_err(|_| PlanError::BadBudget(alloc::format!("bad denominator '{q}'")))?;
        BudgetRatio::new(num, den)
    }

    /// Exact conversion of a finite positive float (mantissa over a power of
    /// two).
    pub fn from_f64(v: f64) -> PlanResult<Self> {
        if !v.is_finite() || v <= 0.0 {
            return Err(PlanError::BadBudget(alloc::format!(
                "budget {v} must be a positive finite number"
            )));
        }
        if !(1e-6..=1e6).contains(&v) {
            return Err(PlanError::BadBudget(alloc::format!(
                "budget {v} out of supported range"
            )));
        }
        let bits = v.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64 - 1075;
        let mant = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
        if exp >= 0 {
            BudgetRatio::new((mant as u128) << exp, 1)
        } else {
            BudgetRatio::new(mant as u128, 1u128 << (-exp).min(127))
        }
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(b * m_t)` with exact integer arithmetic, rounding half up.
    pub fn round_mul(&self, m_t: usize) -> usize {
        ((2 * self.num * m_t as u128 + self.den) / (2 * self.den)) as usize
    }

    /// `true` when `b * m_t` is an integer.
    pub fn mul_is_integral(&self, m_t: usize) -> bool {
        (self.num * m_t as u128) % self.den == 0
    }
}

impl fmt::Display for BudgetRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd_u128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

pub(crate) fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// One axis-aligned block of a partitioned kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub index: usize,
    /// Block origin `(f0, c0, kh0, kw0)`.
    pub offset: [usize; 4],
}

/// Disjoint tiling of one layer's kernel into cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    pub layer_id: String,
    pub kernel: KernelDims,
    pub cell: CellDims,
    /// Slots in lexicographic offset order; `slots.len() == m`.
    pub slots: Vec<Slot>,
}

impl PartitionMap {
    pub fn m(&self) -> usize {
        self.slots.len()
    }
}

/// Which slots draw on which cells at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaStrategy {
    OneToOne,
    AllToOne,
    KToOne(usize),
    None,
}

impl fmt::Display for BetaStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaStrategy::OneToOne => write!(f, "one_to_one"),
            BetaStrategy::AllToOne => write!(f, "all_to_one"),
            BetaStrategy::KToOne(k) => write!(f, "k_to_one({k})"),
            BetaStrategy::None => write!(f, "none"),
        }
    }
}

/// Binary initialization table: one row per mixture slot (group-global
/// order), one column per cell plus one for the zero cell when active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BetaTable {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
    pub strategy: BetaStrategy,
}

impl BetaTable {
    pub(crate) fn zeroed(rows: usize, cols: usize, strategy: BetaStrategy) -> Self {
        BetaTable { rows, cols, data: alloc::vec![0; rows * cols], strategy }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Column count, counting the zero-cell column when present.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize) {
        self.data[row * self.cols + col] = 1;
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Columns set in a row (mostly 0 or 1 of them; `k` under k-to-one).
    pub fn row_assignments(&self, row: usize) -> Vec<usize> {
        self.row(row)
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| (v != 0).then_some(j))
            .collect()
    }
}

/// Derived plan for one warehouse group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    pub name: String,
    pub cell_dims: CellDims,
    /// One partition per member layer, document order.
    pub partitions: Vec<PartitionMap>,
    /// Total mixture slots across the group.
    pub m_t: usize,
    /// Real (learnable) cells in the warehouse.
    pub n: usize,
    pub has_zero_cell: bool,
    pub beta: BetaTable,
}

impl GroupPlan {
    /// Column count of attention/beta rows: `n`, plus the zero cell.
    pub fn n_cols(&self) -> usize {
        self.n + usize::from(self.has_zero_cell)
    }

    /// Group-global row range owned by the `layer_idx`-th member layer.
    pub fn layer_rows(&self, layer_idx: usize) -> core::ops::Range<usize> {
        let start: usize = self.partitions[..layer_idx].iter().map(|p| p.m()).sum();
        start..start + self.partitions[layer_idx].m()
    }
}

/// Complete warehouse plan for an architecture at one budget.
#[derive(Debug, Clone, PartialEq)]
pub struct WarehousePlan {
    pub budget: BudgetRatio,
    pub groups: Vec<GroupPlan>,
}

impl WarehousePlan {
    pub fn group(&self, name: &str) -> Option<&GroupPlan> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Group that owns the given layer, with the layer's index inside it.
    pub fn group_of_layer(&self, layer_id: &str) -> Option<(&GroupPlan, usize)> {
        self.groups.iter().find_map(|g| {
            g.partitions
                .iter()
                .position(|p| p.layer_id == layer_id)
                .map(|i| (g, i))
        })
    }

    /// `(group index, member index)` of the given layer.
    pub fn group_index_of_layer(&self, layer_id: &str) -> Option<(usize, usize)> {
        self.groups.iter().enumerate().find_map(|(gi, g)| {
            g.partitions
                .iter()
                .position(|p| p.layer_id == layer_id)
                .map(|i| (gi, i))
        })
    }
}
