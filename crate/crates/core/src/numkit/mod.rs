//! Dense tensors, a reverse-mode tape and the Adam optimizer.
//!
//! Everything runs in `f64`. The free functions below are the eager
//! counterparts of the graph ops, used where no gradient is needed.

mod adam;
mod graph;
pub(crate) mod kernels;
mod param;
mod tensor;

pub use adam::{adam_step, init_states, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul of {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut out = vec![0.0; x.numel()];
    for (r, (i, o)) in x.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
        kernels::softmax_row(i, o).ok_or(Error::DegenerateRow { row: r })?;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn log_softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut out = vec![0.0; x.numel()];
    for (r, (i, o)) in x.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
        kernels::log_softmax_row(i, o).ok_or(Error::DegenerateRow { row: r })?;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let g_id = store.add("gamma", gamma.clone())?;
    let b_id = store.add("beta", beta.clone())?;
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let (gv, bv) = (g.param(g_id), g.param(b_id));
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

pub fn cross_entropy_masked(logits: &Tensor, targets: &[usize], positions: &[usize]) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy_masked(l, targets, positions)?;
    Ok(g.value(loss).item())
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(kernels::gelu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_basis() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (m, k, n) in [(3, 4, 2), (9, 5, 7), (1, 1, 1), (17, 3, 4)] {
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_lastdim(&Tensor::vector(vec![0.0; 4]).unwrap()).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let m = softmax_lastdim(&Tensor::vector(vec![5.0, f64::NEG_INFINITY]).unwrap()).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);
        let s = softmax_lastdim(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        // e^k / (e + e^2 + e^3)
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![f64::NEG_INFINITY; 2]]).unwrap();
        assert!(matches!(softmax_lastdim(&x), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap(), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let y = layer_norm(&Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap(), &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-5;
        let x = random(&mut rng, &[6, 16]).map(|v| v * 3.0 + 1.0);
        let y = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), eps).unwrap();
        for r in 0..6 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 10.0 * eps);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut confident = Tensor::zeros(&[1, 5]);
        confident.set(0, 3, 1000.0);
        assert!(cross_entropy_masked(&confident, &[3], &[0]).unwrap() < 1e-12);
        let uniform = Tensor::zeros(&[2, 8]);
        let l = cross_entropy_masked(&uniform, &[5], &[1]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_masked(&uniform, &[], &[]).is_err());
    }

    #[test]
    fn cross_entropy_matches_per_position_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&mut rng, &[4, 6]).map(|v| v * 4.0);
        let (targets, positions) = ([2usize, 5], [0usize, 3]);
        let mut expect = 0.0;
        for (&t, &p) in targets.iter().zip(&positions) {
            let row = logits.row(p);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect -= row[t] - lse;
        }
        let got = cross_entropy_masked(&logits, &targets, &positions).unwrap();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap()).unwrap();
        {
            let mut g = Graph::new(&store);
            let v = g.param(p);
            let s = g.sum(v);
            let grads = g.backward(s).unwrap();
            assert_eq!(grads.get(p).unwrap(), &[1.0; 6]);
        }
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let expect: Vec<f64> = store.value(p).data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(grads.get(p).unwrap(), expect.as_slice());
        assert!(g.backward(sq).is_err());
    }

    #[test]
    fn repeated_accumulation_adds_up() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(p);
            let s = g.sum(v);
            g.backward(s).unwrap()
        };
        store.accumulate(&grads).unwrap();
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(p).grad.data(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(p).grad.data(), &[0.0, 0.0]);
    }
}
