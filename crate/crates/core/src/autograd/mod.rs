//! Minimal reverse-mode differentiation over NCHW double tensors, covering the
//! layer types the generator and discriminators need.

mod graph;
mod kernels;
mod tensor;

pub use graph::{avg_pool2, conv_output_len, upsample2, Grads, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds a scalar from `inputs` with a fixed random projection so every
    /// output element contributes to the gradient.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("gradient present");
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn project(g: &mut Graph, v: Var) -> Var {
        // weighted sum via mse against an offset target keeps the map nonlinear but smooth
        let s = g.mse_const(v, 0.3);
        g.scale(s, 2.0)
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 2, 5, 6], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let b = random([3, 1, 1, 1], &mut rng);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            project(g, y)
        });
    }

    #[test]
    fn conv_transpose2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([2, 3, 3, 4], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let b = random([2, 1, 1, 1], &mut rng);
        check(vec![x, w, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap();
            assert_eq!(g.value(y).shape(), [2, 2, 6, 8]);
            project(g, y)
        });
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([1, 2, 6, 6], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let u = random(g.value(y).shape(), &mut rng);
        let uv = g.constant(u.clone());
        let z = g.conv_transpose2d(uv, wv, None, 2, 1, 1).unwrap();
        let lhs: f64 = g.value(y).data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(z).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pointwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([2, 2, 4, 4], &mut rng);
        let y = random([2, 1, 4, 4], &mut rng);
        check(vec![x.clone(), y], |g, v| {
            let a = g.reflect_pad(v[0], 2).unwrap();
            let a = g.instance_norm(a, 1e-5);
            let a = g.leaky_relu(a, 0.2);
            let b = g.relu(v[0]);
            let b = g.unit_tanh(b);
            let b = g.reflect_pad(b, 2).unwrap();
            let c = g.add(a, b).unwrap();
            let c = g.avg_pool2(c).unwrap();
            let c = g.upsample2(c);
            let cat = g.concat(v[0], v[1]).unwrap();
            let cat = g.channel_mask(cat, vec![1.0, 0.0, 0.5, 0.25, 1.0, 2.0]).unwrap();
            let l1 = project(g, c);
            let l2 = project(g, cat);
            g.sum(&[l1, l2]).unwrap()
        });
    }

    #[test]
    fn l1_gradients_flow_to_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random([1, 2, 3, 3], &mut rng);
        let b = random([1, 2, 3, 3], &mut rng);
        check(vec![a, b], |g, v| {
            let l = g.l1_mean(v[0], v[1]).unwrap();
            g.scale(l, 3.0)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let p = g.param(Tensor::full([1, 1, 2, 2], 0.1));
        let s = g.add(c, p).unwrap();
        let l = g.mse_const(s, 1.0);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
