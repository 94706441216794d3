//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{inject_softplus_fault, Gradients, Graph, Reduce, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn logistic_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.logistic(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn concat_channels() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 2, 2, 3]).unwrap());
        let b = g.constant(Tensor::full(vec![2, 2, 2, 3], 1.0).unwrap());
        let c = g.concat(&[a, b], 3).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2, 6]);
        assert_eq!(&g.value(c).data()[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2, 2]).unwrap());
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.variable(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.softplus(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.5);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.relu(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(vec![2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn no_grad_leaves_gives_empty_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(2.0));
        let y = g.exp(x);
        assert!(g.backward(y).unwrap().is_empty());
    }

    #[test]
    fn gradcheck_cube_and_relu() {
        let cube = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.mul(sq, p[0])
            },
            &[Tensor::scalar(1.0)],
            1e-4,
        )
        .unwrap();
        assert!(cube < 1e-7, "{cube}");
        let relu = grad_check(|g, p| Ok(g.relu(p[0])), &[Tensor::scalar(1.0)], 1e-4).unwrap();
        assert!(relu < 1e-7, "{relu}");
    }

    #[test]
    fn gradcheck_rejects_bad_eps_and_reports_non_finite() {
        assert!(grad_check(|g, p| Ok(g.log(p[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
        let err = grad_check(|g, p| Ok(g.log(p[0])), &[Tensor::scalar(1e-9)], 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFiniteCheck { param: 0, entry: 0 }));
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 0.9)
            .collect();
        t(shape, &data)
    }

    /// Every op kind, composed into one smooth scalar.
    #[test]
    fn gradcheck_every_op() {
        let params = vec![
            rand_tensor(&[4, 3], 1),
            rand_tensor(&[3, 2], 2),
            rand_tensor(&[2], 3),
            rand_tensor(&[3, 2, 2], 4),
            rand_tensor(&[2, 2, 2], 5),
            rand_tensor(&[2, 2, 2], 6),
        ];
        let err = grad_check(
            |g, p| {
                let h = g.matmul(p[0], p[1])?; // [4,2]
                let b = g.broadcast_to(p[2], &[4, 2])?;
                let h = g.add(h, b)?;
                let h1 = g.tanh(h);
                let h2 = g.softplus(h);
                let h3 = g.logistic(h);
                let e = g.scale(h, 0.3);
                let h4 = g.exp(e);
                let sq = g.mul(h4, h4)?;
                let shifted = g.add_scalar(sq, 1.0);
                let h5 = g.log(shifted);
                let h6 = g.clamp(h, -5.0, 5.0);
                let d = g.sub(h1, h2)?;
                let cat = g.concat(&[d, h3, h5, h6], 1)?; // [4,8]
                let sl = g.slice(cat, 1, 2, 5)?; // [4,5]
                let rows = g.gather_rows(sl, &[3, 0, 0, 2])?;
                let mx = g.scatter_reduce(rows, &[0, 1, 1, 0], 3, Reduce::Max)?;
                let mn = g.scatter_reduce(rows, &[0, 1, 1, 2], 3, Reduce::Mean)?;
                let both = g.mul(mx, mn)?;
                let wg = g.weighted_gather(cat, &[0, 1, 3, 2], &[0.25, 0.75, 0.6, 0.4], 2)?;
                let vol = g.cp_volume(p[3], p[4], p[5])?; // [3,2,2,2]
                let vr = g.reshape(vol, &[12, 2])?;
                let vs = g.sum_axis(vr, 0)?;
                let vm = g.mean_axis(vr, 1)?;
                let s1 = g.sum(both);
                let s2 = g.mean(wg);
                let s3 = g.sum(vs);
                let vm2 = g.mul(vm, vm)?;
                let s4 = g.sum(vm2);
                let a = g.add(s1, s2)?;
                let c = g.add(s3, s4)?;
                g.add(a, c)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let a = g.variable(rand_tensor(&[5, 4], 9));
            let b = g.variable(rand_tensor(&[4, 3], 10));
            let c = g.matmul(a, b).unwrap();
            let d = g.tanh(c);
            let s = g.sum(d);
            let grads = g.backward(s).unwrap();
            (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
    }

    proptest! {
        #[test]
        fn gradient_is_linear_in_outputs(
            data in proptest::collection::vec(-2.0f64..2.0, 6),
            w in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            // d(Σ_i y_i)/dx == Σ_i dy_i/dx for y = w ⊙ tanh(x)
            let x0 = t(&[2, 3], &data);
            let wt = t(&[2, 3], &w);
            let mut g = Graph::new();
            let x = g.variable(x0.clone());
            let wv = g.constant(wt.clone());
            let th = g.tanh(x);
            let y = g.mul(th, wv).unwrap();
            let s = g.sum(y);
            let total = g.backward(s).unwrap().get(x).unwrap().clone();
            let mut summed = vec![0.0; 6];
            for i in 0..6 {
                let mut g = Graph::new();
                let x = g.variable(x0.clone());
                let wv = g.constant(wt.clone());
                let th = g.tanh(x);
                let y = g.mul(th, wv).unwrap();
                let flat = g.reshape(y, &[6]).unwrap();
                let yi = g.slice(flat, 0, i, 1).unwrap();
                let gi = g.backward(yi).unwrap();
                for (acc, v) in summed.iter_mut().zip(gi.get(x).unwrap().data()) {
                    *acc += v;
                }
            }
            for (a, b) in total.data().iter().zip(&summed) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
