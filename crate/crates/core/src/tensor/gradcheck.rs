//! Central-finite-difference verification of recorded gradients.
//!
//! [`check_gradients`] rebuilds a scalar-valued graph from a set of parameter
//! leaves, runs `backward` once, then probes every parameter element with a
//! two-sided difference and compares. It runs in `f64`: `f32` rounding noise
//! would swamp the tolerances that make this test worth having.

use rand::Rng;
use thiserror::Error;

use super::Tensor;
use crate::rng::{seeded_rng, uniform_vec};

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Probe step for the two-sided difference.
    pub h: f64,
    /// Relative tolerance against max(|analytic|, |numeric|).
    pub rel: f64,
    /// Absolute floor below which differences are ignored.
    pub abs: f64,
}

impl Tolerance {
    /// For single ops.
    pub const OP: Tolerance = Tolerance {
        h: 1e-5,
        rel: 1e-6,
        abs: 1e-8,
    };
    /// For composed models, where truncation error stacks across ops.
    pub const COMPOSED: Tolerance = Tolerance {
        h: 1e-5,
        rel: 1e-5,
        abs: 1e-8,
    };
}

#[derive(Debug, Clone, Error)]
#[error(
    "gradcheck failed for {graph}: param {param}, element {index}: \
     analytic {analytic:.6e} vs numeric {numeric:.6e} (diff {diff:.3e} > tol {tol:.3e})"
)]
pub struct GradMismatch {
    pub graph: String,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub diff: f64,
    pub tol: f64,
}

/// Verify the gradients of `rebuild`'s scalar output with respect to every
/// tensor in `params`. `rebuild` must reconstruct the graph from the current
/// parameter data each time it is called.
pub fn check_gradients(
    graph: &str,
    params: &[Tensor<f64>],
    rebuild: impl Fn() -> Tensor<f64>,
    tol: Tolerance,
) -> Result<(), GradMismatch> {
    for p in params {
        p.zero_grad();
    }
    let loss = rebuild();
    loss.backward().expect("gradcheck loss must be a tracked scalar");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + tol.h;
            p.set_data(probe.clone()).expect("probe keeps the shape");
            let up = rebuild().item();
            probe[i] = base[i] - tol.h;
            p.set_data(probe).expect("probe keeps the shape");
            let down = rebuild().item();
            p.set_data(base.clone()).expect("restore keeps the shape");

            let numeric = (up - down) / (2.0 * tol.h);
            let a = analytic[pi][i];
            let diff = (a - numeric).abs();
            let bound = tol.abs.max(tol.rel * a.abs().max(numeric.abs()));
            if diff > bound {
                return Err(GradMismatch {
                    graph: graph.to_string(),
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                    diff,
                    tol: bound,
                });
            }
        }
    }
    Ok(())
}

fn rand_param(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape, uniform_vec(rng, n, -2.0, 2.0)).unwrap()
}

fn rand_plain(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform_vec(rng, n, -2.0, 2.0)).unwrap()
}

/// Run `instances` random gradient checks for every differentiable op.
///
/// Each case projects the op output against a fixed random matrix before
/// summing, so the upstream gradient reaching the op is non-uniform and
/// transposition/permutation mistakes cannot cancel out.
pub fn check_all_ops(instances: usize, seed: u64) -> Result<(), GradMismatch> {
    let mut rng = seeded_rng(seed);
    for _ in 0..instances {
        {
            let a = rand_param(&mut rng, vec![3, 4]);
            let b = rand_param(&mut rng, vec![4, 2]);
            let r = rand_plain(&mut rng, vec![3, 2]);
            check_gradients("matmul", &[a.clone(), b.clone()], || {
                a.matmul(&b).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let x = rand_param(&mut rng, vec![2, 5]);
            let r = rand_plain(&mut rng, vec![5, 2]);
            check_gradients("transpose", &[x.clone()], || {
                x.transpose().unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let x = rand_param(&mut rng, vec![2, 6]);
            let r = rand_plain(&mut rng, vec![3, 4]);
            check_gradients("reshape", &[x.clone()], || {
                x.reshape(vec![3, 4]).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let a = rand_param(&mut rng, vec![3, 3]);
            let b = rand_param(&mut rng, vec![3, 3]);
            let r = rand_plain(&mut rng, vec![3, 3]);
            check_gradients("add", &[a.clone(), b.clone()], || {
                a.add(&b).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("sub", &[a.clone(), b.clone()], || {
                a.sub(&b).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("mul", &[a.clone(), b.clone()], || {
                a.mul(&b).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let x = rand_param(&mut rng, vec![4]);
            let r = rand_plain(&mut rng, vec![4]);
            let k: f64 = rng.random_range(-3.0..3.0);
            check_gradients("scale", &[x.clone()], || {
                x.scale(k).mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("add_scalar", &[x.clone()], || {
                x.add_scalar(k).mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("tanh", &[x.clone()], || {
                x.tanh().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("sigmoid", &[x.clone()], || {
                x.sigmoid().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("exp", &[x.clone()], || {
                x.exp().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("gelu", &[x.clone()], || {
                x.gelu().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let x = Tensor::param(vec![5], uniform_vec(&mut rng, 5, 0.1, 2.2)).unwrap();
            let r = rand_plain(&mut rng, vec![5]);
            check_gradients("log", &[x.clone()], || {
                x.log().unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let x = rand_param(&mut rng, vec![6]);
            let r = rand_plain(&mut rng, vec![6]);
            check_gradients("softmax/vec", &[x.clone()], || {
                x.softmax(0).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            let m = rand_param(&mut rng, vec![3, 4]);
            let rm = rand_plain(&mut rng, vec![3, 4]);
            check_gradients("softmax/rows", &[m.clone()], || {
                m.softmax(1).unwrap().mul(&rm).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("softmax/cols", &[m.clone()], || {
                m.softmax(0).unwrap().mul(&rm).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let a = rand_param(&mut rng, vec![2, 3]);
            let b = rand_param(&mut rng, vec![2, 1]);
            let c = rand_param(&mut rng, vec![2, 2]);
            let r = rand_plain(&mut rng, vec![2, 6]);
            check_gradients("concat/cols", &[a.clone(), b.clone(), c.clone()], || {
                Tensor::concat(&[a.clone(), b.clone(), c.clone()], 1)
                    .unwrap()
                    .mul(&r)
                    .unwrap()
                    .sum_all()
            }, Tolerance::OP)?;
            let d = rand_param(&mut rng, vec![1, 3]);
            let rr = rand_plain(&mut rng, vec![3, 3]);
            check_gradients("concat/rows", &[a.clone(), d.clone()], || {
                Tensor::concat(&[a.clone(), d.clone()], 0)
                    .unwrap()
                    .mul(&rr)
                    .unwrap()
                    .sum_all()
            }, Tolerance::OP)?;
        }
        {
            let x = rand_param(&mut rng, vec![5, 3]);
            let r = rand_plain(&mut rng, vec![2, 3]);
            check_gradients("slice_rows", &[x.clone()], || {
                x.slice_rows(1, 3).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
            let rc = rand_plain(&mut rng, vec![5, 2]);
            check_gradients("slice_cols", &[x.clone()], || {
                x.slice_cols(1, 3).unwrap().mul(&rc).unwrap().sum_all()
            }, Tolerance::OP)?;
            let rg = rand_plain(&mut rng, vec![4, 3]);
            check_gradients("gather_rows", &[x.clone()], || {
                x.gather_rows(&[2, 0, 2, 4]).unwrap().mul(&rg).unwrap().sum_all()
            }, Tolerance::OP)?;
            let rmean = rand_plain(&mut rng, vec![1, 3]);
            check_gradients("mean_rows", &[x.clone()], || {
                x.mean_rows().unwrap().mul(&rmean).unwrap().sum_all()
            }, Tolerance::OP)?;
            check_gradients("sum_all", &[x.clone()], || x.sum_all(), Tolerance::OP)?;
        }
        {
            let row = rand_param(&mut rng, vec![1, 4]);
            let r = rand_plain(&mut rng, vec![3, 4]);
            check_gradients("repeat_rows", &[row.clone()], || {
                row.repeat_rows(3).unwrap().mul(&r).unwrap().sum_all()
            }, Tolerance::OP)?;
        }
        {
            let x = rand_param(&mut rng, vec![3, 4]);
            let gamma = Tensor::param(vec![1, 4], uniform_vec(&mut rng, 4, 0.5, 1.5)).unwrap();
            let beta = rand_param(&mut rng, vec![1, 4]);
            let r = rand_plain(&mut rng, vec![3, 4]);
            check_gradients(
                "layer_norm",
                &[x.clone(), gamma.clone(), beta.clone()],
                || {
                    x.layer_norm(&gamma, &beta, 1e-5)
                        .unwrap()
                        .mul(&r)
                        .unwrap()
                        .sum_all()
                },
                Tolerance::OP,
            )?;
        }
        {
            let logits = rand_param(&mut rng, vec![4, 5]);
            let targets = [2u32, 0, 4, 0];
            let k: f64 = rng.random_range(0.5..2.0);
            check_gradients("cross_entropy", &[logits.clone()], || {
                logits.cross_entropy(&targets, 0).unwrap().scale(k)
            }, Tolerance::OP)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic_gradient() {
        let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
        check_gradients("sum_of_squares", &[x.clone()], || {
            x.mul(&x).unwrap().sum_all()
        }, Tolerance::OP)
        .unwrap();
    }

    #[test]
    fn every_op_passes_twenty_random_instances() {
        check_all_ops(20, 0xC0FFEE).unwrap();
    }

    #[test]
    fn checker_detects_a_wrong_gradient() {
        // detach() hides one factor of x² from the tape, so the analytic
        // gradient is x while the true derivative is 2x. The checker must
        // flag the discrepancy — a silent pass here would mean the whole
        // suite proves nothing.
        let x = Tensor::param(vec![1], vec![1.5]).unwrap();
        let err = check_gradients("deliberately_broken", &[x.clone()], || {
            x.detach().mul(&x).unwrap().sum_all()
        }, Tolerance::OP)
        .unwrap_err();
        assert!((err.analytic - 1.5).abs() < 1e-9);
        assert!((err.numeric - 3.0).abs() < 1e-3);
    }
}
