//! Dense tensor math with a recorded op graph, reverse-mode differentiation,
//! a finite-difference oracle, and named deterministic random streams.

pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use gradcheck::{analytic_grads, fd_grad_coord, forward_value, grad_check, rel_err};
pub use graph::{Graph, OpKind, TensorId};
pub use rng::StreamRng;
pub use tensor::{Precision, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;

    fn graph64() -> Graph {
        Graph::new(Precision::F64)
    }

    #[test]
    fn matmul_identity() {
        let mut g = graph64();
        let a = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let i2 = g.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let c = g.matmul(a, i2).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,0]] . [[2],[5]] = [[2]]
        let mut g = graph64();
        let a = g.leaf(vec![1, 2], vec![1.0, 0.0], false).unwrap();
        let b = g.leaf(vec![2, 1], vec![2.0, 5.0], false).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.data(c), &[2.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let mut g = graph64();
        let a = g.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        let b = g.leaf(vec![2, 2], vec![0.0; 4], false).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        // grad of sum(a . b) wrt a for random 3x3, rel err <= 1e-6 in 64-bit
        let mut rng = StreamRng::new(42, "matmul-gc");
        let a_data = rng.normal_vec(9, 0.0, 1.0);
        let b_data = rng.normal_vec(9, 0.0, 1.0);
        let params = vec![(vec![3, 3], a_data), (vec![3, 3], b_data)];
        let build = |g: &mut Graph, ids: &[TensorId]| -> Result<TensorId> {
            let c = g.matmul(ids[0], ids[1])?;
            g.sum(c)
        };
        let err = grad_check(&build, &params, 1e-5, None, &mut rng).unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn cross_entropy_hand_values() {
        let mut g = graph64();
        // logits [0,0], label 0 -> ln 2
        let l = g.leaf(vec![1, 2], vec![0.0, 0.0], false).unwrap();
        let loss = g.cross_entropy(l, vec![0]).unwrap();
        assert!((g.data(loss)[0] - (2.0f64).ln()).abs() < 1e-12);

        // saturated softmax: logits [100,0], label 0 -> ~0
        let mut g = graph64();
        let l = g.leaf(vec![1, 2], vec![100.0, 0.0], false).unwrap();
        let loss = g.cross_entropy(l, vec![0]).unwrap();
        assert!(g.data(loss)[0] <= 1e-6);

        // two rows each [0,0], labels [0,1] -> mean ln 2
        let mut g = graph64();
        let l = g.leaf(vec![2, 2], vec![0.0; 4], false).unwrap();
        let loss = g.cross_entropy(l, vec![0, 1]).unwrap();
        assert!((g.data(loss)[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_contract_errors() {
        let mut g = graph64();
        let l = g.leaf(vec![1, 2], vec![0.0, 0.0], false).unwrap();
        assert!(g.cross_entropy(l, vec![2]).is_err(), "label out of range");

        let mut g = graph64();
        let l = g.leaf(vec![0, 2], vec![], false).unwrap();
        assert!(g.cross_entropy(l, vec![]).is_err(), "empty batch");
    }

    #[test]
    fn backward_linear_and_freeze_contract() {
        // loss = sum(x), x 2x2 -> grad all ones
        let mut g = graph64();
        let x = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        // frozen tensor keeps grad absent
        let mut g = graph64();
        let x = g.leaf(vec![2, 2], vec![1.0; 4], false).unwrap();
        let y = g.leaf(vec![2, 2], vec![2.0; 4], true).unwrap();
        let s = g.add(x, y).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(y).is_some());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = graph64();
        let x = g.leaf(vec![1, 2], vec![1.0, 2.0], true).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = graph64();
        let x = g.leaf(vec![1, 2], vec![1.0, 2.0], true).unwrap();
        assert!(g.backward(x).is_err(), "detached leaf loss");

        let mut g = graph64();
        let x = g.leaf(vec![2, 2], vec![1.0; 4], true).unwrap();
        let y = g.add(x, x).unwrap();
        assert!(g.backward(y).is_err(), "non-scalar loss");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_layer_norm_is_standardized() {
        let mut rng = StreamRng::new(9, "sm");
        let mut g = graph64();
        let x = g.leaf(vec![4, 7], rng.normal_vec(28, 0.0, 3.0), false).unwrap();
        let y = g.row_softmax(x).unwrap();
        for i in 0..4 {
            let s: f64 = g.data(y)[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }

        let ln = g.layer_norm(x).unwrap();
        for i in 0..4 {
            let row = &g.data(ln)[i * 7..(i + 1) * 7];
            let mu: f64 = row.iter().sum::<f64>() / 7.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 7.0;
            assert!(mu.abs() <= 1e-6, "row mean {mu}");
            assert!((var - 1.0).abs() <= 1e-4, "row var {var}");
        }
    }

    #[test]
    fn causal_softmax_zeroes_the_future() {
        let mut g = graph64();
        let s = g.leaf(vec![3, 3], vec![1.0, 5.0, 5.0, 0.5, 0.5, 9.0, 1.0, 1.0, 1.0], false).unwrap();
        let p = g.causal_softmax(s).unwrap();
        let d = g.data(p);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[3] - 0.5).abs() < 1e-12 && (d[4] - 0.5).abs() < 1e-12);
        let last: f64 = d[6..9].iter().sum();
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composed_ops_pass_grad_check() {
        // softmax/attention-flavoured composite: CE over causal attention output.
        let mut rng = StreamRng::new(7, "comp");
        let t = 4;
        let d = 6;
        let params = vec![
            (vec![t, d], rng.normal_vec(t * d, 0.0, 0.8)),
            (vec![t, d], rng.normal_vec(t * d, 0.0, 0.8)),
            (vec![t, d], rng.normal_vec(t * d, 0.0, 0.8)),
        ];
        let build = |g: &mut Graph, ids: &[TensorId]| -> Result<TensorId> {
            let q = g.layer_norm(ids[0])?;
            let scores = g.matmul_nt(q, ids[1])?;
            let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
            let probs = g.causal_softmax(scaled)?;
            let out = g.matmul(probs, ids[2])?;
            let act = g.tanh(out)?;
            g.cross_entropy(act, vec![0, 2, 1, 3])
        };
        let err = grad_check(&build, &params, 1e-5, None, &mut rng).unwrap();
        assert!(err <= 1e-4, "composite rel err {err}");
    }

    #[test]
    fn elementwise_and_broadcast_ops_pass_grad_check() {
        let mut rng = StreamRng::new(11, "ew");
        let params = vec![
            (vec![3, 4], rng.normal_vec(12, 0.0, 1.0)),
            (vec![3, 4], rng.normal_vec(12, 0.0, 1.0)),
            (vec![4], rng.normal_vec(4, 0.0, 1.0)),
        ];
        let build = |g: &mut Graph, ids: &[TensorId]| -> Result<TensorId> {
            let prod = g.mul(ids[0], ids[1])?;
            let biased = g.add_row(prod, ids[2])?;
            let scaled = g.mul_row(biased, ids[2])?;
            let r = g.relu(scaled)?;
            let sc = g.scale(r, 0.7)?;
            g.sum(sc)
        };
        let err = grad_check(&build, &params, 1e-5, None, &mut rng).unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn structural_ops_pass_grad_check() {
        let mut rng = StreamRng::new(13, "st");
        let params = vec![(vec![5, 6], rng.normal_vec(30, 0.0, 1.0))];
        let build = |g: &mut Graph, ids: &[TensorId]| -> Result<TensorId> {
            let top = g.slice_rows(ids[0], 0, 2)?;
            let bottom = g.slice_rows(ids[0], 2, 3)?;
            let gathered = g.gather_rows(ids[0], vec![4, 0, 4])?;
            let joined = g.concat_rows(&[top, bottom, gathered])?;
            let left = g.slice_cols(joined, 0, 3)?;
            let right = g.slice_cols(joined, 3, 3)?;
            let swapped = g.concat_cols(&[right, left])?;
            let pooled = g.masked_mean_rows(swapped, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0])?;
            let resh = g.reshape(pooled, vec![1, 6])?;
            g.sum(resh)
        };
        let err = grad_check(&build, &params, 1e-5, None, &mut rng).unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn masked_mean_hand_values() {
        let mut g = graph64();
        // single live token
        let h = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let p = g.masked_mean_rows(h, vec![1.0, 0.0]).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0]);

        // hand evaluation over three rows
        let mut g = graph64();
        let h = g.leaf(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0], false).unwrap();
        let p = g.masked_mean_rows(h, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.data(p), &[1.0, 1.0]);

        // all-zero mask errors
        let mut g = graph64();
        let h = g.leaf(vec![2, 2], vec![0.0; 4], false).unwrap();
        assert!(g.masked_mean_rows(h, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_replayable() {
        let run = || {
            let mut rng = StreamRng::new(3, "det");
            let mut g = Graph::new(Precision::F32);
            let x = g.leaf(vec![4, 4], rng.normal_vec(16, 0.0, 1.0), true).unwrap();
            let w = g.leaf(vec![4, 4], rng.normal_vec(16, 0.0, 1.0), true).unwrap();
            let y = g.matmul(x, w).unwrap();
            let sm = g.row_softmax(y).unwrap();
            let out: Vec<u64> = g.data(sm).iter().map(|v| v.to_bits()).collect();
            (g, out)
        };
        let (g1, o1) = run();
        let (_, o2) = run();
        assert_eq!(o1, o2, "bit-identical forward within one precision mode");
        assert!(g1.replay_forward_bitexact().unwrap());
    }

    #[test]
    fn f32_mode_rounds_through_f32() {
        let mut g = Graph::new(Precision::F32);
        let x = g.leaf(vec![1, 1], vec![0.1], false).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        let v = g.data(y)[0];
        assert_eq!(v, v as f32 as f64);
        assert_ne!(v, 0.1 * 3.0, "f64 product differs from the f32-rounded one");
    }
}
