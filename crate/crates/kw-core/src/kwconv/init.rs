//! Parameter initialization. Warehouse cells draw from a fan-in-scaled
//! normal computed from the cell dimensions; attention FC weights draw from
//! a fan-in-scaled uniform; every bias starts at zero so that zero input
//! yields well-defined logits.

use alloc::string::ToString;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::AttentionModuleParams;
use crate::planner::{attention_hidden_width, CellDims};
use crate::tensor::Tensor;

/// Warehouse-cell initializer: normal with std `sqrt(2 / fan_in)`.
///
/// `fan_in` should be the fan-in of the assembled kernels the cells feed
/// (the largest `c * kh * kw` across the sharing group): cells tile into
/// full kernels, so scaling by the tiny cell fan alone leaves norm-free
/// networks with exploding activations.
pub fn normal_cell(dims: CellDims, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal =
        Normal::new(0.0, libm::sqrt(2.0 / fan_in.max(1) as f64)).expect("finite std");
    Tensor::from_fn(&dims.as_array(), |_| normal.sample(rng))
}

/// Uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub(super) fn attention_params(
    layer_id: &str,
    in_channels: usize,
    m: usize,
    n_cols: usize,
    rng: &mut impl Rng,
) -> AttentionModuleParams {
    let hidden = attention_hidden_width(in_channels);
    AttentionModuleParams {
        layer_id: layer_id.to_string(),
        fc1_weight: uniform_fan_in(&[hidden, in_channels], in_channels, rng),
        fc1_bias: Tensor::zeros(&[hidden]),
        fc2_weight: uniform_fan_in(&[m * n_cols, hidden], hidden, rng),
        fc2_bias: Tensor::zeros(&[m * n_cols]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn hidden_width_is_channels_over_sixteen_rounded_up() {
        let mut rng = StdRng::seed_from_u64(1);
        let p = attention_params("l", 64, 9, 56, &mut rng);
        assert_eq!(p.hidden_width(), 4);
        assert_eq!(p.logit_count(), 9 * 56);
        assert!(p.fc1_bias.data().iter().all(|&v| v == 0.0));
        assert!(p.fc2_bias.data().iter().all(|&v| v == 0.0));
        // Small channel counts get the minimum width, not a 1-unit head.
        let p = attention_params("l", 3, 1, 4, &mut rng);
        assert_eq!(p.hidden_width(), 4);
        assert_eq!(attention_hidden_width(128), 8);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = attention_params("l", 8, 2, 3, &mut StdRng::seed_from_u64(42));
        let b = attention_params("l", 8, 2, 3, &mut StdRng::seed_from_u64(42));
        assert_eq!(a, b);
        let cell_a = normal_cell(CellDims::new(2, 3, 1, 1), 27, &mut StdRng::seed_from_u64(7));
        let cell_b = normal_cell(CellDims::new(2, 3, 1, 1), 27, &mut StdRng::seed_from_u64(7));
        assert_eq!(cell_a, cell_b);
    }
}
