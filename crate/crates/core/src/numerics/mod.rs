//! Tensor arithmetic, reverse-mode autodiff, Adam, and seeded randomness.

pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Node};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

#[cfg(test)]
mod fd_tests {
    //! Finite-difference oracle for every differentiable op.

    use super::*;
    use crate::numerics::rng::{normal_vec, seed_rng};

    /// Central finite differences, h = 1e-6.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut out = Vec::with_capacity(x.len());
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            buf[i] = x[i] + h;
            let hi = f(&buf);
            buf[i] = x[i] - h;
            let lo = f(&buf);
            buf[i] = x[i];
            out.push((hi - lo) / (2.0 * h));
        }
        out
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    // Each check builds loss = sum(op(...) * w) with fixed weights and
    // compares backprop against central differences per input coordinate.
    // A macro rather than a generic fn: the graph must be rebuilt inside
    // the FD closure, which defeats any single-lifetime signature.
    macro_rules! fd_check {
        ($name:expr, $inputs:expr, $shapes:expr, |$g:ident, $xs:ident| $body:expr) => {{
            let inputs: Vec<Vec<f64>> = $inputs;
            let shapes: Vec<Vec<usize>> = $shapes;
            let weights = {
                let $g = Graph::new();
                let $xs: Vec<Node<'_>> = inputs
                    .iter()
                    .zip(&shapes)
                    .map(|(d, s)| $g.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
                    .collect();
                let out: Node<'_> = $body;
                let n = out.value().numel();
                normal_vec(&mut seed_rng(99), n)
            };
            // Backprop gradients.
            let ad_grads: Vec<Vec<f64>> = {
                let $g = Graph::new();
                let $xs: Vec<Node<'_>> = inputs
                    .iter()
                    .zip(&shapes)
                    .map(|(d, s)| $g.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
                    .collect();
                let out: Node<'_> = $body;
                let w = $g.constant(Tensor::new(out.value().shape().to_vec(), weights.clone()).unwrap());
                let loss = out.mul(w).unwrap().sum(None).unwrap();
                let grads = loss.backward().unwrap();
                $xs.iter()
                    .map(|x| grads.get(*x).unwrap().data().to_vec())
                    .collect()
            };
            // Finite differences per input.
            for (arg, _) in inputs.iter().enumerate() {
                let f = |pt: &[f64]| -> f64 {
                    let mut local = inputs.clone();
                    local[arg] = pt.to_vec();
                    let $g = Graph::new();
                    let $xs: Vec<Node<'_>> = local
                        .iter()
                        .zip(&shapes)
                        .map(|(d, s)| $g.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
                        .collect();
                    let out: Node<'_> = $body;
                    out.value()
                        .data()
                        .iter()
                        .zip(&weights)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let fd = fd_grad(&f, &inputs[arg]);
                let err = max_rel_err(&ad_grads[arg], &fd);
                assert!(
                    err < 1e-6,
                    "{}: arg {} rel err {:.3e}",
                    $name,
                    arg,
                    err
                );
            }
        }};
    }

    #[test]
    fn all_standard_ops_match_finite_differences() {
        let mut rng = seed_rng(42);
        let r = |rng: &mut _, n: usize| normal_vec(rng, n);
        let pos = |rng: &mut _, n: usize| -> Vec<f64> {
            normal_vec(rng, n).iter().map(|v| v.abs() + 0.5).collect()
        };

        fd_check!("add", vec![r(&mut rng, 6), r(&mut rng, 6)], vec![vec![2, 3], vec![2, 3]],
            |g, xs| xs[0].add(xs[1]).unwrap());
        fd_check!("sub", vec![r(&mut rng, 6), r(&mut rng, 6)], vec![vec![2, 3], vec![2, 3]],
            |g, xs| xs[0].sub(xs[1]).unwrap());
        fd_check!("mul", vec![r(&mut rng, 6), r(&mut rng, 6)], vec![vec![2, 3], vec![2, 3]],
            |g, xs| xs[0].mul(xs[1]).unwrap());
        fd_check!("div", vec![r(&mut rng, 6), pos(&mut rng, 6)], vec![vec![2, 3], vec![2, 3]],
            |g, xs| xs[0].div(xs[1]).unwrap());
        fd_check!("add scalar bcast", vec![r(&mut rng, 6), r(&mut rng, 1)], vec![vec![2, 3], vec![1]],
            |g, xs| xs[0].add(xs[1]).unwrap());
        fd_check!("mul scalar bcast", vec![r(&mut rng, 6), r(&mut rng, 1)], vec![vec![2, 3], vec![1]],
            |g, xs| xs[0].mul(xs[1]).unwrap());
        fd_check!("div scalar bcast", vec![r(&mut rng, 6), pos(&mut rng, 1)], vec![vec![2, 3], vec![1]],
            |g, xs| xs[0].div(xs[1]).unwrap());
        fd_check!("neg", vec![r(&mut rng, 5)], vec![vec![5]], |g, xs| xs[0].neg());
        fd_check!("exp", vec![r(&mut rng, 5)], vec![vec![5]], |g, xs| xs[0].exp().unwrap());
        fd_check!("log", vec![pos(&mut rng, 5)], vec![vec![5]], |g, xs| xs[0].log().unwrap());
        fd_check!("sqrt", vec![pos(&mut rng, 5)], vec![vec![5]], |g, xs| xs[0].sqrt().unwrap());
        fd_check!("silu", vec![r(&mut rng, 5)], vec![vec![5]], |g, xs| xs[0].silu());
        fd_check!("matmul", vec![r(&mut rng, 6), r(&mut rng, 12)], vec![vec![2, 3], vec![3, 4]],
            |g, xs| xs[0].matmul(xs[1]).unwrap());
        fd_check!("sum all", vec![r(&mut rng, 6)], vec![vec![2, 3]],
            |g, xs| xs[0].sum(None).unwrap());
        fd_check!("sum axis0", vec![r(&mut rng, 6)], vec![vec![2, 3]],
            |g, xs| xs[0].sum(Some(0)).unwrap());
        fd_check!("mean axis1", vec![r(&mut rng, 6)], vec![vec![2, 3]],
            |g, xs| xs[0].mean(Some(1)).unwrap());
        fd_check!("max all", vec![r(&mut rng, 6)], vec![vec![2, 3]],
            |g, xs| xs[0].max(None).unwrap());
        fd_check!("row", vec![r(&mut rng, 6)], vec![vec![2, 3]],
            |g, xs| xs[0].row(1).unwrap());
        fd_check!("elem", vec![r(&mut rng, 6)], vec![vec![2, 3]],
            |g, xs| xs[0].elem(4).unwrap());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || -> Vec<f64> {
            let data = normal_vec(&mut seed_rng(5), 12);
            let g = Graph::new();
            let x = g.leaf(Tensor::new(vec![3, 4], data).unwrap());
            let y = x.silu().mul(x).unwrap().exp().unwrap();
            let loss = y.sum(None).unwrap();
            loss.backward().unwrap().get(x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
