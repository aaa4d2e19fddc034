//! Finite-difference verification of a miniature network built from the
//! training config, per parameter family and per temperature.

use std::collections::BTreeMap;

use kw_core::tensor::gradcheck::finite_diff_check;
use kw_core::tensor::tape::GradTape;
use kw_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::KwNet;
use crate::train::TrainConfig;
use crate::Result;

pub const TAUS: [f64; 3] = [0.0, 0.37, 1.0];
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const COORDS_PER_TENSOR: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct FamilyReport {
    pub family: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TauReport {
    pub tau: f64,
    pub families: Vec<FamilyReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub runs: Vec<TauReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `warehouse.<group>.cellN` -> `warehouse.<group>`; `layer.<id>.fc1.weight`
/// -> `layer.<id>`; classifier tensors stand alone.
fn family_of(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

fn loss_of(net: &KwNet, x: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = net.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let (logits, _) = net.logits_tape(&mut tape, &bound, xv, tau)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok(tape.value(loss).item()?)
}

fn set_param(net: &mut KwNet, target: &str, value: &Tensor) {
    net.visit_params_mut(|name, t| {
        if name == target {
            *t = value.clone();
        }
    });
}

/// Run the check over every parameter family of the config's network at
/// `tau` in {0, 0.37, 1}.
///
/// Freshly initialized biases are zero, which parks the ReLU hidden units
/// and the `|z|` normalizer exactly on their kinks where central differences
/// are undefined; the runner therefore jitters all biases to a generic
/// nearby point first (seeded, deterministic). Beta tables are frozen
/// metadata, not parameters, so they never appear in the report.
pub fn run_gradcheck(config: &TrainConfig) -> Result<GradcheckReport> {
    let model_cfg = config.model_config()?;
    let mut net = KwNet::build(&model_cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6d2b79f5));
    net.visit_params_mut(|name, t| {
        if name.ends_with(".bias") || name.ends_with("bias") {
            for v in t.data_mut() {
                let mag: f64 = rng.gen_range(0.1..0.4);
                *v = if rng.gen_bool(0.5) { mag } else { -mag };
            }
        }
    });

    let c_in = net.in_channels();
    let x = Tensor::from_fn(&[2, c_in, 12, 12], |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = vec![1, 4 % net.num_classes()];

    let named = net.named_params();
    let mut runs = Vec::with_capacity(TAUS.len());
    let mut worst = 0.0f64;

    for &tau in &TAUS {
        // Analytic gradients for every parameter at this tau.
        let mut tape = GradTape::new();
        let bound = net.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let (logits, _) = net.logits_tape(&mut tape, &bound, xv, tau)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let grads = tape.backward(loss)?;
        let analytic: BTreeMap<String, Tensor> = bound
            .named
            .iter()
            .map(|(name, var)| (name.clone(), grads.wrt(&tape, *var)))
            .collect();

        let mut families: BTreeMap<String, FamilyReport> = BTreeMap::new();
        let mut work = net.clone();
        for (name, tensor) in &named {
            let report = finite_diff_check(
                std::slice::from_ref(tensor),
                std::slice::from_ref(&analytic[name]),
                EPS,
                COORDS_PER_TENSOR,
                |p| {
                    set_param(&mut work, name, &p[0]);
                    let l = loss_of(&work, &x, &labels, tau);
                    set_param(&mut work, name, tensor);
                    l.map_err(|e| kw_core::tensor::TensorError::InvalidArgument {
                        op: "gradcheck",
                        detail: e.to_string(),
                    })
                },
            )?;
            worst = worst.max(report.max_rel_error);
            let fam = families.entry(family_of(name)).or_insert_with(|| FamilyReport {
                family: family_of(name),
                max_rel_error: 0.0,
                coords_checked: 0,
            });
            fam.max_rel_error = fam.max_rel_error.max(report.max_rel_error);
            fam.coords_checked += report.coords_checked;
        }
        runs.push(TauReport { tau, families: families.into_values().collect() });
    }

    Ok(GradcheckReport { runs, max_rel_error: worst, passed: worst <= TOLERANCE })
}
