//! Finite-difference verification of every differentiable op and of a
//! composed backbone + task head + discriminator head model.

use rand::Rng;

use crate::autodiff::{grad_check_with, NodeId, OpKind, Tape};
use crate::cf::{generator_reg_term, hinge_disc_loss, CFConfig};
use crate::error::Result;
use crate::model::{ArchConfig, Mode, Model};
use crate::seed::{rng, Rng64};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let verdict = if r.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{:<24} max_rel_err={:.3e}  {verdict}\n", r.name, r.max_rel_error));
        }
        s.push_str(&format!(
            "gradcheck: {} ({} checks, tolerance {:.0e})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.results.len(),
            self.tolerance
        ));
        s
    }
}

fn uniform(r: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in [0.1, 1] and random sign, keeping relu away from its kink.
fn off_kink(r: &mut Rng64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y ∘ weights)`, reducing any output to a scalar with a generic gradient.
fn weighted_sum(t: &mut Tape, y: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = t.constant(weights.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type Case = (String, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>, Vec<Tensor>);

fn cases() -> Vec<Case> {
    let mut r = rng(0x6772_6164);
    let mut out: Vec<Case> = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let name = kind.name().to_string();
        let case: Case = match kind {
            OpKind::MatMul => {
                let wts = uniform(&mut r, &[3, 2], -1.0, 1.0);
                let xs = vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4, 2], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let y = t.matmul(ids[0], ids[1])?;
                    weighted_sum(t, y, &wts)
                }), xs)
            }
            OpKind::AddBias => {
                let wts = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
                let xs = vec![uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let y = t.add_bias(ids[0], ids[1])?;
                    weighted_sum(t, y, &wts)
                }), xs)
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let wts = uniform(&mut r, &[2, 3], -1.0, 1.0);
                let xs = vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let y = match kind {
                        OpKind::Add => t.add(ids[0], ids[1])?,
                        OpKind::Sub => t.sub(ids[0], ids[1])?,
                        _ => t.mul(ids[0], ids[1])?,
                    };
                    weighted_sum(t, y, &wts)
                }), xs)
            }
            OpKind::ScalarMul | OpKind::AddScalar | OpKind::Relu | OpKind::Reshape => {
                let wts = uniform(&mut r, &[2, 6], -1.0, 1.0);
                let xs = vec![off_kink(&mut r, &[2, 2, 3])];
                (name, Box::new(move |t, ids| {
                    let x = ids[0];
                    let y = match kind {
                        OpKind::ScalarMul => t.scalar_mul(x, -1.7),
                        OpKind::AddScalar => t.add_scalar(x, 0.3),
                        OpKind::Relu => t.relu(x),
                        _ => x,
                    };
                    // The flatten doubles as the shape adapter for the weights.
                    let f = t.flatten(y)?;
                    let sq = t.mul(f, f)?;
                    weighted_sum(t, sq, &wts)
                }), xs)
            }
            OpKind::Mean | OpKind::Sum => {
                let xs = vec![uniform(&mut r, &[3, 4], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let sq = t.mul(ids[0], ids[0])?;
                    Ok(if kind == OpKind::Mean { t.mean(sq) } else { t.sum(sq) })
                }), xs)
            }
            OpKind::Concat => {
                let wts = uniform(&mut r, &[5, 3], -1.0, 1.0);
                let xs = vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[3, 3], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let y = t.concat(ids)?;
                    weighted_sum(t, y, &wts)
                }), xs)
            }
            OpKind::SelectRows => {
                let wts = uniform(&mut r, &[4, 3], -1.0, 1.0);
                let xs = vec![uniform(&mut r, &[3, 3], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let y = t.select_rows(ids[0], &[2, 0, 2, 1])?;
                    weighted_sum(t, y, &wts)
                }), xs)
            }
            OpKind::Conv2d => {
                let wts = uniform(&mut r, &[2, 4, 4, 4], -1.0, 1.0);
                let xs = vec![uniform(&mut r, &[2, 3, 8, 8], -1.0, 1.0), uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let y = t.conv2d(ids[0], ids[1], 2, 1)?;
                    weighted_sum(t, y, &wts)
                }), xs)
            }
            OpKind::CrossEntropy => {
                let xs = vec![uniform(&mut r, &[4, 5], -2.0, 2.0)];
                (name, Box::new(|t, ids| t.softmax_cross_entropy(ids[0], &[0, 3, 4, 1])), xs)
            }
            OpKind::Dropout => {
                let wts = uniform(&mut r, &[2, 5], -1.0, 1.0);
                let mask: Vec<f64> = (0..10).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
                let xs = vec![uniform(&mut r, &[2, 5], -1.0, 1.0)];
                (name, Box::new(move |t, ids| {
                    let y = t.dropout_mask(ids[0], mask.clone())?;
                    weighted_sum(t, y, &wts)
                }), xs)
            }
            OpKind::Leaf => unreachable!("not differentiable"),
        };
        out.push(case);
    }

    let xs = vec![uniform(&mut r, &[4, 5], -2.0, 2.0)];
    out.push((
        "label_smoothing_ce".into(),
        Box::new(|t, ids| t.cross_entropy(ids[0], &[1, 1, 4, 0], 0.2)),
        xs,
    ));

    let xs = vec![uniform(&mut r, &[3, 1], -2.0, 2.0), uniform(&mut r, &[2, 1], -2.0, 2.0)];
    out.push((
        "hinge_disc_loss".into(),
        Box::new(|t, ids| hinge_disc_loss(t, ids[0], ids[1])),
        xs,
    ));

    out.push(composed_model_case(&mut r));
    out
}

/// Backbone, task head and discriminator head on one tape; the loss mixes
/// task cross-entropy with the weighted generator term, and every parameter
/// of both groups is checked.
fn composed_model_case(r: &mut Rng64) -> Case {
    let model = Model::build(ArchConfig::mlp(5, &[7, 6], 3, 4, 11)).expect("valid arch");
    let x = uniform(r, &[4, 5], -1.0, 1.0);
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let cfg = CFConfig::default();
    (
        "model(backbone+heads)".into(),
        Box::new(move |t, ids| {
            let m = &model;
            let mut binds = m.bindings_from(ids)?;
            let xi = t.constant(x.clone());
            let out = m.forward(t, &mut binds, xi, Mode::Eval, &mut rng(0))?;
            let ce = t.softmax_cross_entropy(out.logits, &[0, 2, 1, 2])?;
            let fb = t.select_rows(out.features, &[1, 3])?;
            let s = m.discriminate(t, &mut binds, fb)?;
            let g = generator_reg_term(t, s, &cfg)?;
            let wg = t.scalar_mul(g, 0.1);
            t.add(ce, wg)
        }),
        params,
    )
}

/// Runs every check. `fault` corrupts one op's backward (negative control).
pub fn run_suite(fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for (name, f, xs) in cases() {
        let make = || fault.map_or_else(Tape::new, Tape::with_fault);
        let err = grad_check_with(make, &*f, &xs, EPS)?;
        results.push(CheckResult {
            name,
            max_rel_error: err,
        });
    }
    Ok(GradcheckReport {
        results,
        tolerance: TOLERANCE,
    })
}
