//! Finite-difference sweep over every differentiable graph operation.

use std::ops::Range;

use crate::gradcheck::grad_check_many;
use crate::graph::{Graph, Var, MASKED};
use crate::init::{seeded, uniform};
use crate::tensor::{Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    /// Worst relative error over all cases and seeds.
    pub max_rel_err: f64,
    /// Number of input elements compared.
    pub checked: usize,
}

type Case = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Entry {
    op: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Keeps inputs away from non-differentiable points.
    away_from_zero: bool,
    f: Case,
}

fn entry(op: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Entry {
    Entry {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        away_from_zero: false,
        f: Box::new(f),
    }
}

fn entries() -> Vec<Entry> {
    let mut relu = entry("relu", &[&[3, 4]], |g, v| g.relu(v[0]));
    relu.away_from_zero = true;
    vec![
        entry("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        entry("matmul", &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        entry("matmul", &[&[2, 2, 3, 4], &[2, 2, 4, 3]], |g, v| g.matmul(v[0], v[1])),
        entry("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        entry("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        entry("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        entry("add_row", &[&[2, 2, 3], &[3]], |g, v| g.add_row(v[0], v[1])),
        entry("mul_row", &[&[2, 2, 3], &[3]], |g, v| g.mul_row(v[0], v[1])),
        entry("scale", &[&[4]], |g, v| g.scale(v[0], -2.5)),
        relu,
        entry("softmax", &[&[2, 5]], |g, v| g.softmax(v[0], 1)),
        entry("softmax", &[&[2, 3, 2]], |g, v| g.softmax(v[0], 1)),
        entry("mask_fill", &[&[2, 3]], |g, v| {
            let m = g.mask_fill(v[0], vec![true, false, true, true, false, true], MASKED)?;
            g.softmax(m, 1)
        }),
        entry("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        entry("batch_norm", &[&[4, 3], &[3], &[3]], |g, v| {
            g.batch_norm(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
        }),
        entry("cross_entropy", &[&[2, 3, 5]], |g, v| g.cross_entropy(v[0], &[1, 0, 4, 0, 3, 2], 0)),
        entry("mse", &[&[2, 3], &[2, 3]], |g, v| g.mse(v[0], v[1])),
        entry("gather", &[&[4]], |g, v| g.gather(v[0], vec![Some(3), None, Some(0), Some(3)], vec![2, 2])),
        entry("embedding", &[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        entry("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        entry("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        entry("transpose_last2", &[&[2, 3, 4]], |g, v| g.transpose_last2(v[0])),
        entry("narrow", &[&[2, 5, 3]], |g, v| g.narrow(v[0], 1, 1, 3)),
        entry("concat", &[&[2, 1, 3], &[2, 2, 3]], |g, v| g.concat(&[v[0], v[1]], 1)),
        entry("sum_last_axis", &[&[3, 4]], |g, v| g.sum_last_axis(v[0])),
        entry("mean_last_axis", &[&[3, 4]], |g, v| g.mean_last_axis(v[0])),
        entry("sum", &[&[3, 4]], |g, v| {
            let s = g.sum(v[0])?;
            g.mul(s, s)
        }),
        entry("mean", &[&[3, 4]], |g, v| {
            let m = g.mean(v[0])?;
            g.mul(m, m)
        }),
    ]
}

/// Names of the operations covered by [`op_suite`], in report order.
pub fn covered_ops() -> Vec<&'static str> {
    let mut ops: Vec<&'static str> = entries().iter().map(|e| e.op).collect();
    ops.dedup();
    ops
}

/// Checks every operation on random inputs for each seed. Each output is
/// reduced through a random-weighted sum so every element carries a
/// distinct cotangent.
pub fn op_suite(seeds: Range<u64>, h: f64) -> Result<Vec<OpCheck>> {
    let mut out: Vec<OpCheck> = Vec::new();
    for e in entries() {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for seed in seeds.clone() {
            let inputs: Vec<Tensor> = e
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut t = uniform(&mut seeded(seed * 31 + i as u64), s, -1.5, 1.5);
                    if e.away_from_zero {
                        t.data_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
                    }
                    t
                })
                .collect();
            let report = grad_check_many(
                |g, v| {
                    let y = (e.f)(g, v)?;
                    let w = uniform(&mut seeded(seed ^ 0xabcdef), g.shape(y), -1.0, 1.0);
                    let w = g.constant(w)?;
                    let p = g.mul(y, w)?;
                    g.sum(p)
                },
                &inputs,
                h,
            )?;
            worst = worst.max(report.max_rel_err);
            checked += report.checked;
        }
        match out.last_mut() {
            Some(last) if last.op == e.op => {
                last.max_rel_err = last.max_rel_err.max(worst);
                last.checked += checked;
            }
            _ => out.push(OpCheck {
                op: e.op,
                max_rel_err: worst,
                checked,
            }),
        }
    }
    Ok(out)
}
