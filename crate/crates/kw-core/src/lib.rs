//! KernelWarehouse dynamic convolution on a minimal dense-tensor engine.
//!
//! A static convolutional kernel is partitioned into `m` disjoint cells of a
//! common shape, every cell is recomputed per input sample as a linear mixture
//! of the `n` learnable cells of a shared warehouse, and the mixture weights
//! come from a small attention head with a linear-normalization attention
//! function blended against a binary initialization table under an annealed
//! temperature.
//!
//! The crate is split along those lines:
//!
//! * [`tensor`] — dense `f64` tensors, the forward operations the layer needs
//!   (convolution, pooling, affine, ReLU), a reverse-mode tape, and a
//!   finite-difference gradient checker;
//! * [`planner`] — turns a declarative architecture description plus a budget
//!   `b = n / m_t` into cell dimensions, partition maps, warehouse sizes and
//!   beta assignment tables;
//! * [`kwconv`] — the runtime layer: attention logits, normalization with
//!   temperature, kernel assembly, forward pass, and the vanilla
//!   dynamic-convolution reference used as an equivalence target.
//!
//! `no_std` + `alloc`; all file and process concerns live in the companion
//! `kwctl` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod kwconv;
pub mod planner;
pub mod tensor;

/// Architecture description for the ResNet18 backbone with KernelWarehouse
/// applied to every convolutional layer except the stem: 16 basic-block 3x3
/// kernels plus 3 downsample 1x1 kernels, grouped into four warehouses by the
/// reassigned-stage scheme (each stage boundary layer joins the previous
/// stage's warehouse so that channel divisors stay large).
pub const RESNET18_SPEC_JSON: &str = include_str!("../assets/resnet18_kw.json");
