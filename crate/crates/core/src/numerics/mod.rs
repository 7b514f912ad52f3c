//! Dense tensors, a define-by-run autodiff graph, gradient clipping and
//! a finite-difference gradient checker.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{grad_check, GradCheckReport, ParamCheck, DEFAULT_EPS};
pub use graph::{backward, ElementwiseOp, Fault, Graph, NodeId, Operand, PROB_FLOOR};
pub use params::{clip_global_norm, global_norm_clip, Gradients, ParamStore, Parameterized, CLIP_SLACK};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value encountered in {param}")]
    NonFinite { param: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec64(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Central differences of `f` around every entry of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel(a: &[f64], n: &[f64]) -> f64 {
        a.iter()
            .zip(n)
            .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(p).shape(), &[2, 2]);

        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2, 2]"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let loss_of = |a: &Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.constant(a.clone());
            let y = g.constant(b.clone());
            let p = g.matmul(x, y).unwrap();
            let s = g.sum(p);
            g.value(s).item().unwrap()
        };
        let mut g = Graph::new();
        let x = g.param("a", &a).unwrap();
        let y = g.constant(b.clone());
        let p = g.matmul(x, y).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        let analytic = grads.get("a").unwrap().data().to_vec();
        assert!(max_rel(&analytic, &numeric_grad(&a, loss_of)) < 1e-6);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vec64(&[1.0, 2.0, 3.0]));
        let z = g.constant(vec64(&[0.0, 0.0, 0.0]));
        let h = g.elementwise(ElementwiseOp::Hadamard, a, Operand::Node(z)).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0, 0.0]);

        let x = g.constant(vec64(&[1.0, 2.0]));
        let y = g.constant(vec64(&[3.0, 4.0]));
        let s = g.elementwise(ElementwiseOp::Add, x, Operand::Node(y)).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let v = g.constant(vec64(&[2.0, 4.0]));
        let sc = g.elementwise(ElementwiseOp::Scale, v, Operand::Scalar(0.5)).unwrap();
        assert_eq!(g.value(sc).data(), &[1.0, 2.0]);

        let err = g.elementwise(ElementwiseOp::Add, a, Operand::Node(x)).unwrap_err();
        assert!(matches!(err, NumericsError::Shape { op: "add", .. }));
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = vec64(&[0.0, 1e3, -1e3]);
        let p = g.param("x", &x).unwrap();
        let s = g.sigmoid(p);
        let v = g.value(s).data().to_vec();
        assert_eq!(v[0], 0.5);
        assert_eq!(v[1], 1.0);
        assert!(v[2].is_finite() && v[2] >= 0.0);
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get("x").unwrap().data()[0], 0.25);

        let mut g32 = Graph::<f32>::new();
        let c = g32.constant(Tensor::vector(vec![1e3f32, -1e3]));
        let s = g32.sigmoid(c);
        assert!(g32.value(s).is_finite());
        assert_eq!(g32.value(s).data()[0], 1.0);
    }

    #[test]
    fn elu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec64(&[0.0, 2.0, -1.0, 1e-8, -1e-8]));
        let e = g.elu(x);
        let v = g.value(e).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 2.0);
        assert!((v[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v[2] + 0.63212).abs() < 1e-5);
        assert!(v[3].abs() < 2e-8 && v[4].abs() < 2e-8);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vec64(&[0.0, 0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        assert!(close(g.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

        let b = g.constant(vec64(&[1000.0, 0.0, 0.0]));
        let s = g.softmax(b).unwrap();
        let v = g.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12);

        let c = g.constant(vec64(&[2f64.ln(), 0.0]));
        let s = g.softmax(c).unwrap();
        assert!(close(g.value(s).data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(vec64(&[1.0, 0.0, 0.0]));
        let l = g.cross_entropy(q, 0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let q = g.constant(vec64(&[1.0 / 3.0; 3]));
        let l = g.cross_entropy(q, 2).unwrap();
        assert!((g.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-12);

        // clamped probability keeps the loss finite
        let q = g.constant(vec64(&[1.0, 0.0]));
        let l = g.cross_entropy(q, 1).unwrap();
        assert!((g.value(l).item().unwrap() - 1e12f64.ln()).abs() < 1e-9);

        assert!(matches!(
            g.cross_entropy(q, 2),
            Err(NumericsError::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_q_minus_onehot() {
        let logits = vec64(&[0.3, -1.2, 2.0]);
        let target = 1;
        let loss_of = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let c = g.constant(x.clone());
            let q = g.softmax(c).unwrap();
            let l = g.cross_entropy(q, target).unwrap();
            g.value(l).item().unwrap()
        };
        let mut g = Graph::new();
        let p = g.param("z", &logits).unwrap();
        let q = g.softmax(p).unwrap();
        let l = g.cross_entropy(q, target).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.get("z").unwrap().data().to_vec();
        let mut expected = g.value(q).data().to_vec();
        expected[target] -= 1.0;
        assert!(close(&analytic, &expected, 1e-12));
        assert!(max_rel(&analytic, &numeric_grad(&logits, loss_of)) < 1e-6);
    }

    #[test]
    fn concat_examples_and_split_gradient() {
        let a = vec64(&[1.0, 2.0]);
        let b = vec64(&[3.0]);
        let mut g = Graph::<f64>::new();
        let pa = g.param("a", &a).unwrap();
        let pb = g.param("b", &b).unwrap();
        let empty = g.constant(Tensor::vector(vec![]));
        let c = g.concat(&[pa, pb]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let same = g.concat(&[pa, empty]).unwrap();
        assert_eq!(g.value(same).data(), a.data());
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);

        let m = g.constant(Tensor::zeros(&[2, 2]));
        let v = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.concat(&[m, v]), Err(NumericsError::Shape { .. })));

        let m2 = g.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let mm = g.concat(&[m, m2]).unwrap();
        assert_eq!(g.value(mm).shape(), &[2, 3]);
        assert_eq!(g.value(mm).data(), &[0.0, 0.0, 5.0, 0.0, 0.0, 6.0]);
    }

    #[test]
    fn backward_examples() {
        // loss = sum(W x): every row of dW equals x
        let w = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let unused = Tensor::zeros(&[4]);
        let mut g = Graph::<f64>::new();
        let pw = g.param("W", &w).unwrap();
        g.param("unused", &unused).unwrap();
        let x = g.constant(vec64(&[1.0, -2.0, 3.0]));
        let y = g.matmul(pw, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("W").unwrap().data(), &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]);
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[4]));
        assert_eq!(grads.len(), 2);

        assert!(matches!(g.backward(y), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn duplicate_param_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        let mut g = Graph::new();
        g.param("w", &t).unwrap();
        assert!(g.param("w", &t).is_err());
    }

    /// Three stacked layers through every differentiable op.
    fn three_layer(p: &ParamStore<f64>, x: &Tensor<f64>) -> (f64, Gradients<f64>) {
        let mut g = Graph::new();
        let w1 = g.param("w1", p.get("w1").unwrap()).unwrap();
        let w2 = g.param("w2", p.get("w2").unwrap()).unwrap();
        let w3 = g.param("w3", p.get("w3").unwrap()).unwrap();
        let b = g.param("b", p.get("b").unwrap()).unwrap();
        let xi = g.constant(x.clone());
        let h1 = g.matmul(w1, xi).unwrap();
        let h1 = g.add(h1, b).unwrap();
        let a1 = g.sigmoid(h1);
        let h2 = g.matmul(w2, a1).unwrap();
        let a2 = g.elu(h2);
        let om = g.one_minus(a2);
        let mix = g.hadamard(om, a2).unwrap();
        let cat = g.concat(&[mix, a2]).unwrap();
        let h3 = g.matmul(w3, cat).unwrap();
        let h3 = g.scale(h3, 0.7);
        let d = g.sub(h3, xi).unwrap();
        let q = g.softmax(d).unwrap();
        let l = g.cross_entropy(q, 1).unwrap();
        let v = g.value(l).item().unwrap();
        (v, g.backward(l).unwrap())
    }

    #[test]
    fn random_composition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mut p = ParamStore::new();
            p.insert("w1", random(&mut rng, &[4, 3]));
            p.insert("b", random(&mut rng, &[4]));
            p.insert("w2", random(&mut rng, &[2, 4]));
            p.insert("w3", random(&mut rng, &[3, 4]));
            let x = random(&mut rng, &[3]);
            let report = grad_check(&mut p, DEFAULT_EPS, |p| Ok(three_layer(p, &x))).unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn lookup_accumulates_repeated_columns() {
        let table = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let t = g.param("emb", &table).unwrap();
        let e2 = g.lookup(t, 2).unwrap();
        assert_eq!(g.value(e2).data(), &[0.0, 0.0, 1.0]);
        let a = g.lookup(t, 1).unwrap();
        let b = g.lookup(t, 1).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        let gt = grads.get("emb").unwrap();
        assert_eq!(gt.column(1), vec![2.0, 2.0, 2.0]);
        assert_eq!(gt.column(0), vec![0.0; 3]);
        assert_eq!(gt.column(2), vec![0.0; 3]);
        assert!(matches!(g.lookup(t, 3), Err(NumericsError::Index { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(xs in prop::collection::vec(-30.0f64..30.0, 1..12)) {
                let mut g = Graph::new();
                let a = g.constant(Tensor::vector(xs));
                let s = g.softmax(a).unwrap();
                let v = g.value(s).data();
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }

            #[test]
            fn concat_then_split_is_exact(
                a in prop::collection::vec(-1e6f32..1e6, 0..8),
                b in prop::collection::vec(-1e6f32..1e6, 0..8),
            ) {
                let mut g = Graph::new();
                let pa = g.constant(Tensor::vector(a.clone()));
                let pb = g.constant(Tensor::vector(b.clone()));
                let c = g.concat(&[pa, pb]).unwrap();
                let parts = g.value(c).split(&[a.len(), b.len()]).unwrap();
                prop_assert_eq!(parts[0].data(), &a[..]);
                prop_assert_eq!(parts[1].data(), &b[..]);
            }

            #[test]
            fn pointwise_ops_match_finite_differences(xs in prop::collection::vec(-3.0f64..3.0, 1..6)) {
                let x = Tensor::vector(xs);
                let mut p = ParamStore::new();
                p.insert("x", x);
                let report = grad_check(&mut p, DEFAULT_EPS, |p| {
                    let mut g = Graph::new();
                    let v = g.param("x", p.get("x").unwrap())?;
                    let s = g.sigmoid(v);
                    let e = g.elu(v);
                    let h = g.hadamard(s, e)?;
                    let l = g.sum(h);
                    Ok((g.value(l).item()?, g.backward(l)?))
                }).unwrap();
                prop_assert!(report.max_rel_error < 1e-6);
            }
        }
    }
}
