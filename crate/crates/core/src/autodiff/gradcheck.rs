// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over every parameter entry.
    pub max_rel_err: f64,
    /// Largest relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
}

/// Compare reverse-mode gradients with central differences.
///
/// `f` builds a scalar on a fresh tape from leaves holding `params`. The
/// error for one entry is `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::config("eps", format!("must lie in [1e-7, 1e-3], got {eps}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NotScalar { len: v.len() });
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("grad_check objective at the base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        per_param: vec![0.0; params.len()],
        worst: (0, 0),
    };
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("parameters require grad");
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            probe[p].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[p].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[p].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.per_param[p] {
                report.per_param[p] = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (p, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Target;
    use crate::rng::CounterRng;

    const TOL: f64 = 1e-6;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::gaussian(shape, 1.0, &mut CounterRng::new(seed))
    }

    /// Reduce any output to a scalar with fixed random weights so every
    /// output entry contributes a distinct sensitivity.
    fn weighted_sum(t: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId> {
        let w = t.constant(rand(t.value(y).shape(), seed));
        let p = t.mul(y, w)?;
        t.sum(p)
    }

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, p| {
                let y = t.mul(p[0], p[0])?;
                t.sum(y)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let r = grad_check(|t, p| t.sum(p[0]), &[Tensor::scalar(1.0)], 1e-2);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let r = grad_check(
            |t, p| {
                let big = t.scale(p[0], 1e308)?;
                let y = t.scale(big, 10.0)?;
                t.sum(y)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    fn check_unary(build: impl Fn(&mut Tape, NodeId) -> Result<NodeId>, shape: &[usize], seed: u64) {
        let x = rand(shape, seed);
        let r = grad_check(
            |t, p| {
                let y = build(t, p[0])?;
                weighted_sum(t, y, seed + 1000)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= TOL, "{r:?}");
    }

    fn check_binary(
        build: impl Fn(&mut Tape, NodeId, NodeId) -> Result<NodeId>,
        a: &[usize],
        b: &[usize],
        seed: u64,
    ) {
        let r = grad_check(
            |t, p| {
                let y = build(t, p[0], p[1])?;
                weighted_sum(t, y, seed + 1000)
            },
            &[rand(a, seed), rand(b, seed + 1)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= TOL, "{r:?}");
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        for seed in 0..3 {
            check_binary(|t, a, b| t.matmul(a, b), &[3, 5], &[5, 4], seed);
            check_unary(|t, a| t.transpose(a), &[3, 4], seed);
            for (a, b) in [
                (vec![3, 4], vec![3, 4]),
                (vec![3, 4], vec![4]),
                (vec![3, 4], vec![3, 1]),
                (vec![3, 4], vec![1]),
                (vec![1], vec![5]),
            ] {
                check_binary(|t, x, y| t.add(x, y), &a, &b, seed);
                check_binary(|t, x, y| t.sub(x, y), &a, &b, seed);
                check_binary(|t, x, y| t.mul(x, y), &a, &b, seed);
            }
            check_unary(|t, a| t.scale(a, -2.5), &[6], seed);
            check_unary(|t, a| t.relu(a), &[4, 4], seed);
            check_unary(|t, a| t.sigmoid(a), &[4, 4], seed);
            check_unary(|t, a| t.tanh(a), &[4, 4], seed);
            check_unary(|t, a| t.softmax(a), &[3, 7], seed);
            check_unary(|t, a| t.layernorm(a), &[3, 16], seed);
            check_unary(|t, a| t.embedding(a, vec![2, 0, 2, 1]), &[3, 5], seed);
            check_unary(|t, a| t.slice(a, 0, 1, 3), &[4, 5], seed);
            check_unary(|t, a| t.slice(a, 1, 1, 3), &[4, 5], seed);
            check_unary(|t, a| t.slice(a, 0, 2, 5), &[6], seed);
            check_binary(|t, a, b| t.concat(&[a, b], 0), &[2, 3], &[4, 3], seed);
            check_binary(|t, a, b| t.concat(&[a, b], 1), &[2, 3], &[2, 5], seed);
            check_unary(|t, a| t.sum(a), &[3, 3], seed);
            check_unary(|t, a| t.mean(a), &[3, 3], seed);
            check_binary(|t, a, b| t.mse_loss(a, b), &[3, 3], &[3, 3], seed);
            check_unary(
                |t, a| {
                    let targets = vec![
                        Target { row: 0, class: 2, weight: 0.5 },
                        Target { row: 2, class: 0, weight: 0.25 },
                        Target { row: 2, class: 4, weight: 1.0 },
                    ];
                    t.softmax_cross_entropy(a, targets)
                },
                &[3, 5],
                seed,
            );
            check_unary(
                |t, a| {
                    let m = t.causal_mask(a, 3)?;
                    t.softmax(m)
                },
                &[6, 6],
                seed,
            );
            check_binary(|t, a, b| t.scatter_rows(a, vec![3, 0], b), &[4, 3], &[2, 3], seed);
        }
    }

    #[test]
    fn matmul_chain() {
        let r = grad_check(
            |t, p| {
                let a = t.matmul(p[0], p[1])?;
                let b = t.tanh(a)?;
                let c = t.matmul(b, p[2])?;
                let c = t.sigmoid(c)?;
                t.sum(c)
            },
            &[rand(&[2, 4], 1), rand(&[4, 3], 2), rand(&[3, 2], 3)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= TOL, "{r:?}");
    }

    #[test]
    fn gradient_is_linear_in_the_objective() {
        let x = rand(&[5], 8);
        let (a, b) = (1.7, -0.3);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let p = t.param(x.clone());
            let s = t.sigmoid(p)?;
            let f = t.sum(s)?;
            let q = t.mul(p, p)?;
            let q = t.tanh(q)?;
            let g = t.mean(q)?;
            let out = match which {
                0 => f,
                1 => g,
                _ => {
                    let fa = t.scale(f, a)?;
                    let gb = t.scale(g, b)?;
                    t.add(fa, gb)?
                }
            };
            Ok::<_, Error>(t.backward(out)?.get(p).unwrap().clone())
        };
        let gf = grad_of(0).unwrap();
        let gg = grad_of(1).unwrap();
        let gc = grad_of(2).unwrap();
        for i in 0..5 {
            let want = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - want).abs() <= 1e-14);
        }
    }
}
