//! Attention-statistics export: mean normalized attentions per mixture slot
//! over an evaluation set, one CSV per warehouse.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::idx::Dataset;
use crate::model::KwNet;
use crate::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub name: String,
    pub rows: usize,
    pub n_cols: usize,
    /// `layer_id:slot` per row, group-global order.
    pub row_labels: Vec<String>,
    /// `e1..en` plus `e_z` when the zero cell is active.
    pub col_labels: Vec<String>,
    /// Row-major `rows x n_cols` mean attentions.
    pub mean: Vec<f64>,
    /// Rows whose `argmax |mean|` hits their one-to-one beta column, over all
    /// rows; `None` for other strategies.
    pub diag_agreement: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionStats {
    pub tau: f64,
    pub samples: usize,
    pub groups: Vec<GroupStats>,
}

/// Average each slot's normalized attention row over the dataset at the
/// given temperature.
pub fn collect_attention_stats(
    net: &KwNet,
    data: &Dataset,
    tau: f64,
    batch_size: usize,
) -> Result<AttentionStats> {
    if data.is_empty() {
        return Err(CliError::Config("attention statistics need a non-empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();

    // Per batch: per layer, sum the (m, n_cols) rows over samples.
    let partial: Vec<Vec<kw_core::tensor::Tensor>> = batches
        .par_iter()
        .map(|chunk| -> Result<Vec<kw_core::tensor::Tensor>> {
            let (x, _) = data.batch(chunk);
            let (_, attns) = net.infer_with_attentions(&x, tau)?;
            Ok(attns
                .iter()
                .map(|a| {
                    let [n, m, c] = [a.shape()[0], a.shape()[1], a.shape()[2]];
                    let mut sum = kw_core::tensor::Tensor::zeros(&[m, c]);
                    for s in 0..n {
                        for i in 0..m * c {
                            sum.data_mut()[i] += a.data()[s * m * c + i];
                        }
                    }
                    sum
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    // Reduce in batch order, then scatter layer sums into group matrices.
    let mut layer_sums: Vec<kw_core::tensor::Tensor> = net
        .layers
        .iter()
        .map(|l| kw_core::tensor::Tensor::zeros(&[l.kw.m(), l.kw.n_cols()]))
        .collect();
    for batch in partial {
        for (acc, add) in layer_sums.iter_mut().zip(batch) {
            for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
    }

    let inv = 1.0 / data.len() as f64;
    let mut groups = Vec::with_capacity(net.plan.groups.len());
    for (gi, g) in net.plan.groups.iter().enumerate() {
        let n_cols = g.n_cols();
        let mut mean = vec![0.0; g.m_t * n_cols];
        let mut row_labels = vec![String::new(); g.m_t];
        for (li, l) in net.layers.iter().enumerate() {
            if l.group_idx != gi {
                continue;
            }
            let (_, member_idx) = net
                .plan
                .group_index_of_layer(&l.kw.spec.id)
                .expect("layer is planned");
            let rows = g.layer_rows(member_idx);
            let sums = &layer_sums[li];
            for (local, global) in rows.enumerate() {
                for c in 0..n_cols {
                    mean[global * n_cols + c] = sums.data()[local * n_cols + c] * inv;
                }
                row_labels[global] = format!("{}:{}", l.kw.spec.id, local);
            }
        }
        let mut col_labels: Vec<String> = (1..=g.n).map(|j| format!("e{j}")).collect();
        if g.has_zero_cell {
            col_labels.push("e_z".into());
        }
        let diag_agreement = matches!(
            g.beta.strategy,
            kw_core::planner::BetaStrategy::OneToOne
        )
        .then(|| {
            let mut hits = 0;
            for r in 0..g.m_t {
                let row = &mean[r * n_cols..(r + 1) * n_cols];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| {
                        a.1.abs().partial_cmp(&b.1.abs()).expect("finite attentions")
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if g.beta.get(r, argmax) == 1 {
                    hits += 1;
                }
            }
            (hits, g.m_t)
        });
        groups.push(GroupStats {
            name: g.name.clone(),
            rows: g.m_t,
            n_cols,
            row_labels,
            col_labels,
            mean,
            diag_agreement,
        });
    }
    Ok(AttentionStats { tau, samples: data.len(), groups })
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// One CSV per warehouse plus a small JSON summary; returns the CSV paths.
pub fn write_stats_csv(stats: &AttentionStats, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
    let mut paths = Vec::with_capacity(stats.groups.len());
    for g in &stats.groups {
        let path = dir.join(format!("attn_{}.csv", g.name));
        let mut f =
            fs::File::create(&path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        writeln!(f, "slot,{}", g.col_labels.join(","))
            .map_err(|e| CliError::io(path.display().to_string(), e))?;
        for r in 0..g.rows {
            let row: Vec<String> = g.mean[r * g.n_cols..(r + 1) * g.n_cols]
                .iter()
                .map(|&v| sig9(v))
                .collect();
            writeln!(f, "{},{}", g.row_labels[r], row.join(","))
                .map_err(|e| CliError::io(path.display().to_string(), e))?;
        }
        paths.push(path);
    }
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(stats)
        .map_err(|e| CliError::Config(format!("summary encode: {e}")))?;
    fs::write(&summary, text).map_err(|e| CliError::io(summary.display().to_string(), e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::write_synthetic_dataset;
    use kw_core::kwconv::AttentionFn;
    use kw_core::planner::{BetaStrategy, BudgetRatio};

    fn fixture(strategy: BetaStrategy) -> (KwNet, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 12, 6, 3).unwrap();
        let data = crate::idx::load_split(dir.path(), crate::idx::Split::Test).unwrap();
        let cfg = ModelConfig {
            arch_text: include_str!("../assets/desk_arch.json").to_string(),
            budget: BudgetRatio::new(1, 2).unwrap(),
            policy: None,
            attention_fn: AttentionFn::Naf,
            strategy,
            num_classes: 10,
            seed: 21,
        };
        (KwNet::build(&cfg).unwrap(), data)
    }

    #[test]
    fn pre_anneal_stats_are_exactly_beta() {
        let (net, data) = fixture(BetaStrategy::OneToOne);
        let stats = collect_attention_stats(&net, &data, 1.0, 4).unwrap();
        for (g, gp) in stats.groups.iter().zip(&net.plan.groups) {
            assert_eq!(g.rows, gp.m_t);
            for r in 0..g.rows {
                for c in 0..g.n_cols {
                    let expect = f64::from(gp.beta.get(r, c));
                    assert_eq!(g.mean[r * g.n_cols + c], expect);
                }
            }
            let (hits, total) = g.diag_agreement.unwrap();
            assert_eq!(hits, total);
        }
    }

    #[test]
    fn csv_shape_contract_holds() {
        let (net, data) = fixture(BetaStrategy::OneToOne);
        let stats = collect_attention_stats(&net, &data, 0.0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_stats_csv(&stats, dir.path()).unwrap();
        assert_eq!(paths.len(), net.plan.groups.len());
        for (path, g) in paths.iter().zip(&net.plan.groups) {
            let text = fs::read_to_string(path).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), g.m_t + 1, "header plus one row per slot");
            for line in &lines {
                assert_eq!(line.split(',').count(), g.n_cols() + 1);
            }
        }
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (net, mut data) = fixture(BetaStrategy::OneToOne);
        data.truncate(0);
        assert!(collect_attention_stats(&net, &data, 0.0, 4).is_err());
    }
}
