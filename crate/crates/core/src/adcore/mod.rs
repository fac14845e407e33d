//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    check_against_differences, forward_backward, grad_check, rel_err, GradCheckReport,
    REL_ERR_FLOOR,
};
pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::StreamKey;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], key: StreamKey) -> Tensor {
        let mut rng = key.rng();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let (v, g) = forward_backward(&[("x", x)], |t, v| Ok(t.sq_l2(v[0]))).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let (v, g) = forward_backward(&[("x", x)], |t, _| Ok(t.constant(Tensor::scalar(3.0)))).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(g["x"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g["x"].shape(), &[3]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::zeros(&[2, 2]);
        let err = forward_backward(&[("x", x)], |t, v| Ok(t.relu(v[0]))).unwrap_err();
        assert!(matches!(err, Error::NonScalarOutput { .. }));
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn softmax_rows_examples() {
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()],
        ])
        .unwrap();
        let y = softmax_rows(&x).unwrap();
        for j in 0..3 {
            assert!((y.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
            assert!((y.get(1, j) - (j + 1) as f64 / 6.0).abs() < 1e-15);
        }
        let big = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap()).unwrap();
        assert!(big.is_finite());
        assert!((big.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(big.get(0, 1) < 1e-300);
        assert!(matches!(
            softmax_rows(&Tensor::zeros(&[0, 3])),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn grad_reverse_scales_and_flips() {
        let x = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let (v, g) = forward_backward(&[("x", x.clone())], |t, v| {
            let r = t.grad_reverse(v[0], 10.0);
            Ok(t.sum(r))
        })
        .unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g["x"].data(), &[-10.0, -10.0]);

        let (_, g0) = forward_backward(&[("x", x.clone())], |t, v| {
            let r = t.grad_reverse(v[0], 0.0);
            Ok(t.sq_l2(r))
        })
        .unwrap();
        assert!(g0["x"].data().iter().all(|&v| v == 0.0));

        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let r = t.grad_reverse(xv, 1.0);
        assert_eq!(t.value(r), &x);
        let s = t.sq_l2(r);
        let g1 = t.backward(s).unwrap();
        assert_eq!(g1.get(xv).unwrap().data(), &[-2.0, -2.0]);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let p = randn(&[3, 2], StreamKey::root(1));
        let rep = grad_check(
            |t, v| {
                let s = t.scale(v[0], 0.5);
                Ok(t.sq_l2(s))
            },
            &[("p", p)],
            // Central differences are exact for quadratics at any step; a
            // larger step keeps cancellation error below the tolerance.
            1e-3,
            1e-9,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    fn ce_softmax(t: &mut Tape, v: &[Var]) -> crate::Result<Var> {
        let p = t.softmax_rows(v[0])?;
        let lp = t.log(p);
        let y = t.constant(
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
        );
        let picked = t.mul(lp, y)?;
        let s = t.sum(picked);
        Ok(t.scale(s, -0.5))
    }

    #[test]
    fn cross_entropy_grad_check() {
        for i in 0..5 {
            let logits = randn(&[2, 3], StreamKey::root(10 + i));
            let rep = grad_check(ce_softmax, &[("z", logits)], 1e-6, 1e-5).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let logits = randn(&[2, 3], StreamKey::root(3));
        let (_, g) = forward_backward(&[("z", logits.clone())], ce_softmax).unwrap();
        let bad = g["z"].map(|v| v + 0.1);
        let rep = check_against_differences(ce_softmax, &[("z", logits)], &[bad], 1e-6, 1e-5).unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_err > 1e-3);
    }

    #[test]
    fn nondeterministic_loss_rejected() {
        let counter = std::cell::Cell::new(0.0);
        let err = grad_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                let s = t.sum(v[0]);
                let c = t.constant(Tensor::scalar(counter.get()));
                t.add(s, c)
            },
            &[("x", Tensor::zeros(&[2]))],
            1e-6,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic));
    }

    #[test]
    fn grad_check_rejects_nonpositive_step() {
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[("x", Tensor::zeros(&[1]))], 0.0, 1e-5);
        assert!(err.is_err());
    }

    /// Every primitive checked on random instances.
    #[test]
    fn every_primitive_passes_grad_check() {
        type Graph = fn(&mut Tape, &[Var]) -> crate::Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Graph)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let e = t.exp(m);
                Ok(t.sum(e))
            }),
            ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |t, v| {
                let m = t.matmul_nt(v[0], v[1])?;
                Ok(t.sq_l2(m))
            }),
            ("add_row", vec![vec![3, 2], vec![2]], |t, v| {
                let a = t.add(v[0], v[1])?;
                Ok(t.sq_l2(a))
            }),
            ("add_scalar", vec![vec![3, 2], vec![]], |t, v| {
                let a = t.add(v[0], v[1])?;
                Ok(t.sq_l2(a))
            }),
            ("mul", vec![vec![3, 2], vec![3, 2]], |t, v| {
                let a = t.mul(v[0], v[1])?;
                Ok(t.sum(a))
            }),
            ("mul_row", vec![vec![3, 2], vec![1, 2]], |t, v| {
                let a = t.mul(v[0], v[1])?;
                Ok(t.sq_l2(a))
            }),
            ("relu", vec![vec![4, 3]], |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sq_l2(r))
            }),
            ("softmax_rows", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let s = t.softmax_rows(v[0])?;
                let m = t.mul(s, v[1])?;
                Ok(t.sum(m))
            }),
            ("log_exp", vec![vec![2, 3]], |t, v| {
                let e = t.exp(v[0]);
                let c = t.constant(Tensor::scalar(1.0));
                let a = t.add(e, c)?;
                let l = t.log(a);
                Ok(t.sum(l))
            }),
            ("mean", vec![vec![2, 5]], |t, v| {
                let e = t.exp(v[0]);
                t.mean(e)
            }),
            ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                let e = t.exp(c);
                let s = t.mul(e, c)?;
                Ok(t.sum(s))
            }),
            ("dropout", vec![vec![2, 3]], |t, v| {
                let mask = Tensor::from_rows(&[vec![2.0, 0.0, 2.0], vec![0.0, 2.0, 2.0]]).unwrap();
                let d = t.dropout(v[0], mask)?;
                Ok(t.sq_l2(d))
            }),
        ];
        for (name, shapes, graph) in cases {
            for trial in 0..5 {
                let key = StreamKey::root(trial).child(name);
                let params: Vec<(String, Tensor)> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (format!("in{i}"), randn(s, key.index(i as u64))))
                    .collect();
                let refs: Vec<(&str, Tensor)> =
                    params.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
                let rep = grad_check(graph, &refs, 1e-6, 1e-5).unwrap();
                assert!(rep.passed, "{name} trial {trial}: {rep:?}");
            }
        }
    }

    #[test]
    fn grad_reverse_passes_reversal_aware_grad_check() {
        // The forward pass is the identity, so finite differences see the
        // un-reversed derivative; the tape's gradient must equal -lambda times it.
        let lambda = 0.7;
        let graph = move |t: &mut Tape, v: &[Var]| {
            let r = t.grad_reverse(v[0], lambda);
            let e = t.exp(r);
            Ok(t.sum(e))
        };
        for trial in 0..5 {
            let x = randn(&[2, 2], StreamKey::root(trial).child("grad_reverse"));
            let (_, grads) = forward_backward(&[("x", x.clone())], graph).unwrap();
            let unreversed = grads["x"].map(|g| g / -lambda);
            let rep = check_against_differences(graph, &[("x", x)], &[unreversed], 1e-6, 1e-5).unwrap();
            assert!(rep.passed, "trial {trial}: {rep:?}");
        }
    }

    #[test]
    fn backward_is_linear() {
        for trial in 0..20 {
            let key = StreamKey::root(100 + trial);
            let x = randn(&[3, 3], key.child("x"));
            let (a, b) = {
                let mut rng = key.child("ab").rng();
                (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
            };
            let f = |t: &mut Tape, v: Var| -> crate::Result<Var> {
                let s = t.softmax_rows(v)?;
                Ok(t.sq_l2(s))
            };
            let g = |t: &mut Tape, v: Var| -> crate::Result<Var> {
                let e = t.exp(v);
                let m = t.matmul(e, v)?;
                Ok(t.sum(m))
            };
            let (_, gf) = forward_backward(&[("x", x.clone())], |t, v| f(t, v[0])).unwrap();
            let (_, gg) = forward_backward(&[("x", x.clone())], |t, v| g(t, v[0])).unwrap();
            let (_, gc) = forward_backward(&[("x", x.clone())], |t, v| {
                let fv = f(t, v[0])?;
                let gv = g(t, v[0])?;
                let fa = t.scale(fv, a);
                let gb = t.scale(gv, b);
                t.add(fa, gb)
            })
            .unwrap();
            let expect = gf["x"].zip_map(&gg["x"], |p, q| a * p + b * q).unwrap();
            assert!(gc["x"].max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let x = randn(&[4, 5], StreamKey::root(9));
        let w = randn(&[5, 3], StreamKey::root(10));
        let run = || {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.leaf(w.clone());
            let m = t.matmul(xv, wv).unwrap();
            let s = t.softmax_rows(m).unwrap();
            t.value(s).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
                proptest::collection::vec(-1e3f64..1e3, 1..8), 1..6)) {
                let cols = rows[0].len();
                let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
                let y = softmax_rows(&Tensor::from_rows(&rows).unwrap()).unwrap();
                for r in y.iter_rows() {
                    let s: f64 = r.iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                    prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }
}
