//! Kernel assembly: each partition slot is written as a linear mixture of
//! the warehouse cells, blocks laid down disjointly in slot order.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::planner::PartitionMap;
use crate::tensor::tape::{CustomOp, GradTape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Assemble a full kernel from attentions `(m, n_cols)` and warehouse cells.
///
/// Slot `i` receives `sum_j alpha[i, j] * cells[j]` over the real cells; a
/// trailing zero-cell column (when `n_cols == cells.len() + 1`) contributes
/// nothing. The output shape is the partition's kernel `(f, c, kh, kw)`.
pub fn assemble_kernel(
    alpha: &Tensor,
    cells: &[Tensor],
    partition: &PartitionMap,
) -> Result<Tensor> {
    let n = cells.len();
    let m = partition.m();
    if alpha.shape().len() != 2 || alpha.shape()[0] != m {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_kernel",
            detail: alloc::format!(
                "attention shape {:?} does not provide {m} rows",
                alpha.shape()
            ),
        });
    }
    let n_cols = alpha.shape()[1];
    if n_cols != n && n_cols != n + 1 {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_kernel",
            detail: alloc::format!("{n_cols} attention columns for {n} cells"),
        });
    }
    let cell_shape = partition.cell.as_array();
    for (j, cell) in cells.iter().enumerate() {
        if cell.shape() != cell_shape {
            return Err(TensorError::ShapeMismatch {
                op: "assemble_kernel",
                detail: alloc::format!(
                    "cell {j} has shape {:?}, partition expects {cell_shape:?}",
                    cell.shape()
                ),
            });
        }
    }

    let mut out = Tensor::zeros(&partition.kernel.as_array());
    for slot in &partition.slots {
        let arow = &alpha.data()[slot.index * n_cols..slot.index * n_cols + n];
        let mut block = vec![0.0; partition.cell.volume()];
        for (a, cell) in arow.iter().zip(cells) {
            if *a == 0.0 {
                continue;
            }
            for (b, &e) in block.iter_mut().zip(cell.data()) {
                *b += a * e;
            }
        }
        write_block(&mut out, partition, slot.offset, &block);
    }
    Ok(out)
}

/// Copy a cell-shaped block into the kernel at the slot offset.
fn write_block(out: &mut Tensor, partition: &PartitionMap, offset: [usize; 4], block: &[f64]) {
    let k = partition.kernel;
    let d = partition.cell;
    let od = out.data_mut();
    let mut src = 0;
    for df in 0..d.f {
        for dc in 0..d.c {
            for dh in 0..d.kh {
                let f = offset[0] + df;
                let c = offset[1] + dc;
                let h = offset[2] + dh;
                let dst = (((f * k.c) + c) * k.kh + h) * k.kw + offset[3];
                od[dst..dst + d.kw].copy_from_slice(&block[src..src + d.kw]);
                src += d.kw;
            }
        }
    }
}

/// Read the cell-shaped block at a slot offset out of a kernel-shaped tensor.
fn read_block(t: &Tensor, partition: &PartitionMap, offset: [usize; 4], block: &mut [f64]) {
    let k = partition.kernel;
    let d = partition.cell;
    let td = t.data();
    let mut dst = 0;
    for df in 0..d.f {
        for dc in 0..d.c {
            for dh in 0..d.kh {
                let f = offset[0] + df;
                let c = offset[1] + dc;
                let h = offset[2] + dh;
                let src = (((f * k.c) + c) * k.kh + h) * k.kw + offset[3];
                block[dst..dst + d.kw].copy_from_slice(&td[src..src + d.kw]);
                dst += d.kw;
            }
        }
    }
}

struct AssembleKernelOp {
    partition: Rc<PartitionMap>,
    n_cells: usize,
}

impl CustomOp for AssembleKernelOp {
    fn name(&self) -> &'static str {
        "assemble_kernel"
    }

    fn grads(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let alpha = inputs[0];
        let cells = &inputs[1..];
        let n = self.n_cells;
        let n_cols = alpha.shape()[1];
        let mut galpha = Tensor::zeros(alpha.shape());
        let mut gcells: Vec<Tensor> = cells.iter().map(|c| Tensor::zeros(c.shape())).collect();
        let mut gblock = vec![0.0; self.partition.cell.volume()];
        for slot in &self.partition.slots {
            read_block(grad_out, &self.partition, slot.offset, &mut gblock);
            let arow = &alpha.data()[slot.index * n_cols..slot.index * n_cols + n];
            for (j, cell) in cells.iter().enumerate() {
                // d/d alpha_ij = <gW_block, e_j>
                let dot: f64 = gblock.iter().zip(cell.data()).map(|(g, e)| g * e).sum();
                galpha.data_mut()[slot.index * n_cols + j] = dot;
                // d/d e_j += alpha_ij * gW_block
                let a = arow[j];
                if a != 0.0 {
                    for (ge, g) in gcells[j].data_mut().iter_mut().zip(&gblock) {
                        *ge += a * g;
                    }
                }
            }
            // The zero-cell column (if any) never reaches the kernel: its
            // attention gradient through assembly is exactly zero.
        }
        let mut out = Vec::with_capacity(1 + gcells.len());
        out.push(Some(galpha));
        out.extend(gcells.into_iter().map(Some));
        out
    }
}

/// Record kernel assembly on a tape; inputs are the attention rows and every
/// warehouse cell, so gradients accumulate into shared cells across layers.
pub fn assemble_kernel_tape(
    tape: &mut GradTape,
    alpha: Var,
    cells: &[Var],
    partition: &Rc<PartitionMap>,
) -> Result<Var> {
    let cell_values: Vec<Tensor> = cells.iter().map(|&c| tape.value(c).clone()).collect();
    let value = assemble_kernel(tape.value(alpha), &cell_values, partition)?;
    let mut inputs = Vec::with_capacity(1 + cells.len());
    inputs.push(alpha);
    inputs.extend_from_slice(cells);
    Ok(tape.custom(
        Rc::new(AssembleKernelOp {
            partition: Rc::clone(partition),
            n_cells: cells.len(),
        }),
        &inputs,
        value,
    ))
}
