use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{self, STEP};

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    rand(shape, seed).map(|x| x.abs() + 0.1)
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut tape = Tape::new();
    let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let b = tape.constant(t2(&[&[2.0, 3.0], &[4.0, 5.0]])).unwrap();
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

    let a = tape.constant(t2(&[&[1.0, 2.0]])).unwrap();
    let b = tape.constant(t2(&[&[3.0], &[4.0]])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let inputs = [rand(&[3, 3], seed), rand(&[3, 3], 100 + seed)];
        let check = gradcheck::check(&inputs, STEP, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            t.sum(c)
        })
        .unwrap();
        assert!(check.max_rel_err() < 1e-6, "seed {seed}: {}", check.max_rel_err());
    }
}

#[test]
fn add_zero_and_tanh_at_zero() {
    let x = rand(&[2, 3], 1);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true).unwrap();
    let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
    let y = tape.add(xv, zero).unwrap();
    assert_eq!(tape.value(y), &x);

    let z = tape.leaf(Tensor::scalar(0.0), true).unwrap();
    let th = tape.tanh(z).unwrap();
    assert_eq!(tape.value(th).item(), 0.0);
    let mut store = ParamStore::new();
    tape.backward(th, &mut store).unwrap();
    assert_eq!(tape.grad(z).unwrap().item(), 1.0);
}

#[test]
fn exp_log_round_trip() {
    let x = positive(&[4, 5], 7);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let l = tape.log(v).unwrap();
    let e = tape.exp(l).unwrap();
    assert!(tape.value(e).max_abs_diff(&x) < 1e-12);
}

#[test]
fn log_of_non_positive_is_a_domain_error() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
    assert!(matches!(tape.log(v), Err(Error::Domain { op: "log", .. })));
}

#[test]
fn broadcast_is_limited_to_scalar_and_row() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let row = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let r = tape.add(a, row).unwrap();
    assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let col = tape.constant(Tensor::zeros(&[2, 1])).unwrap();
    assert!(matches!(tape.add(a, col), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[0.0, 0.0]])).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t2(&[&[1000.0, 0.0]])).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let p = tape.value(y).data();
    assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
}

#[test]
fn softmax_jvp_matches_finite_differences() {
    for seed in 0..10 {
        let x = rand(&[3, 4], seed);
        let w = rand(&[3, 4], 50 + seed);
        let check = gradcheck::check(&[x], STEP, |t, v| {
            let s = t.softmax_rows(v[0])?;
            let wv = t.constant(w.clone())?;
            let p = t.mul(s, wv)?;
            t.sum(p)
        })
        .unwrap();
        assert!(check.max_rel_err() < 1e-5, "seed {seed}: {}", check.max_rel_err());
    }
}

#[test]
fn layernorm_normalises_rows() {
    let mut tape = Tape::new();
    let d = 6;
    let gain = tape.constant(Tensor::full(&[d], 1.0)).unwrap();
    let bias = tape.constant(Tensor::zeros(&[d])).unwrap();

    let c = tape.constant(Tensor::full(&[1, d], 3.5)).unwrap();
    let y = tape.layernorm(c, gain, bias).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(rand(&[1, d], 3)).unwrap();
    let y = tape.layernorm(x, gain, bias).unwrap();
    let out = tape.value(y).data();
    let mean = out.iter().sum::<f64>() / d as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-10);
    // ε = 1e-5 pulls the variance slightly under 1 for unit-scale inputs
    let raw = rand(&[1, d], 3);
    let raw_var = {
        let m = raw.data().iter().sum::<f64>() / d as f64;
        raw.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64
    };
    let expected = raw_var / (raw_var + Tape::LAYERNORM_EPS);
    assert!((var - expected).abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn layernorm_on_large_scale_row_has_unit_variance() {
    let mut tape = Tape::new();
    let d = 8;
    let gain = tape.constant(Tensor::full(&[d], 1.0)).unwrap();
    let bias = tape.constant(Tensor::zeros(&[d])).unwrap();
    let x = tape.constant(rand(&[1, d], 9).map(|v| 1e3 * v)).unwrap();
    let y = tape.layernorm(x, gain, bias).unwrap();
    let out = tape.value(y).data();
    let mean = out.iter().sum::<f64>() / d as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let inputs = [rand(&[3, 5], seed), rand(&[5], 20 + seed), rand(&[5], 40 + seed)];
        let w = rand(&[3, 5], 60 + seed);
        let check = gradcheck::check(&inputs, STEP, |t, v| {
            let y = t.layernorm(v[0], v[1], v[2])?;
            let wv = t.constant(w.clone())?;
            let p = t.mul(y, wv)?;
            t.sum(p)
        })
        .unwrap();
        assert!(check.max_rel_err() < 1e-4, "seed {seed}: {}", check.max_rel_err());
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let confident = tape.constant(t2(&[&[100.0, 0.0, 0.0], &[0.0, 0.0, 100.0]])).unwrap();
    let l = tape.cross_entropy(confident, &[0, 2], &[true, true]).unwrap();
    assert!(tape.value(l).item() < 1e-40);

    let v = 7;
    let uniform = tape.constant(Tensor::zeros(&[4, v])).unwrap();
    let l = tape.cross_entropy(uniform, &[0, 1, 2, 3], &[true; 4]).unwrap();
    assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-14);

    // hand computation: row 1 = ln(e + e² + e³) − 3, row 2 = ln 3
    let logits = tape.constant(t2(&[&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]])).unwrap();
    let l = tape.cross_entropy(logits, &[2, 0], &[true, true]).unwrap();
    assert!((tape.value(l).item() - 0.753_109_126_556_245).abs() < 1e-12);

    // masked row does not count
    let l = tape.cross_entropy(logits, &[2, 0], &[true, false]).unwrap();
    assert!((tape.value(l).item() - 0.407_605_964_444_380_1).abs() < 1e-12);
}

#[test]
fn cross_entropy_with_empty_mask_is_an_error() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(tape.cross_entropy(logits, &[0, 1], &[false, false]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let check = gradcheck::check(&[rand(&[4, 6], seed)], STEP, |t, v| {
            t.cross_entropy(v[0], &[1, 5, 0, 2], &[true, true, false, true])
        })
        .unwrap();
        assert!(check.max_rel_err() < 1e-4, "seed {seed}: {}", check.max_rel_err());
    }
}

#[test]
fn backward_of_square() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
    let y = tape.mul(x, x).unwrap();
    let mut store = ParamStore::new();
    tape.backward(y, &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    // a second call accumulates
    tape.backward(y, &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 12.0);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
    let mut store = ParamStore::new();
    assert!(matches!(tape.backward(x, &mut store), Err(Error::Shape { .. })));
}

#[test]
fn frozen_parameters_never_get_gradients() {
    let mut store = ParamStore::new();
    let w = store.insert("w", rand(&[2, 2], 1)).unwrap();
    let frozen = store.insert("frozen", rand(&[2, 2], 2)).unwrap();
    store.set_requires_grad(frozen, false);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let fv = tape.param(&store, frozen);
    let p = tape.matmul(wv, fv).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s, &mut store).unwrap();
    assert!(store.grad(w).is_some());
    assert!(store.grad(frozen).is_none());

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
    let d = tape.detach(x);
    let y = tape.mul(d, d).unwrap();
    let z = tape.add(y, x).unwrap();
    tape.backward(z, &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 1.0);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    type Unary = fn(&mut Tape, Var) -> Result<Var>;
    let ops: [(&str, Unary); 7] = [
        ("tanh", |t, x| t.tanh(x)),
        ("exp", |t, x| t.exp(x)),
        ("log", |t, x| t.log(x)),
        ("neg", |t, x| t.neg(x)),
        ("gelu", |t, x| t.gelu(x)),
        ("clamp", |t, x| t.clamp(x, 0.5, 1.5)),
        ("floor", |t, x| t.floor_at(x, 1.0)),
    ];
    for (name, op) in ops {
        for seed in 0..10 {
            let x = positive(&[3, 4], seed);
            let w = rand(&[3, 4], 30 + seed);
            let check = gradcheck::check(&[x], STEP, |t, v| {
                let y = op(t, v[0])?;
                let wv = t.constant(w.clone())?;
                let p = t.mul(y, wv)?;
                t.sum(p)
            })
            .unwrap();
            assert!(check.max_rel_err() < 1e-4, "{name} seed {seed}: {}", check.max_rel_err());
        }
    }
}

#[test]
fn binary_and_layout_gradients_match_finite_differences() {
    for seed in 0..10 {
        let inputs = [
            rand(&[3, 4], seed),
            rand(&[4], 10 + seed),
            rand(&[3, 4], 20 + seed),
            rand(&[2, 4], 30 + seed),
        ];
        let check = gradcheck::check(&inputs, STEP, |t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[2])?;
            let m = t.mul(m, v[1])?;
            let c = t.concat_rows(&[m, v[3]])?;
            let s = t.slice_rows(c, 1, 3)?;
            let l = t.slice_cols(s, 1, 2)?;
            let r = t.slice_cols(s, 0, 2)?;
            let cc = t.concat_cols(&[l, r, l])?;
            let g = t.gather_rows(cc, &[2, 0, 2, 1])?;
            let tr = t.transpose(g)?;
            let rs = t.reshape(tr, &[4, 6])?;
            let sr = t.sum_rows(rs)?;
            let sq = t.mul(sr, sr)?;
            let sc = t.scale(sq, 0.5)?;
            let sc = t.add_scalar(sc, 2.0)?;
            let sub = t.sub(sc, sr)?;
            t.mean(sub)
        })
        .unwrap();
        assert!(check.max_rel_err() < 1e-4, "seed {seed}: {}", check.max_rel_err());
    }
}

/// Plain-loop attention used as an oracle for the fused op.
fn brute_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, blocks: &[AttnBlock]) -> Tensor {
    let d = q.cols();
    let dh = d / heads;
    let mut out = Tensor::zeros(&[q.rows(), d]);
    for b in blocks {
        for h in 0..heads {
            for qi in 0..b.q_len {
                let row = b.q_start + qi;
                let vis: Vec<usize> = (0..b.keys.len())
                    .filter(|&j| b.mask.as_ref().is_none_or(|m| m[qi * b.keys.len() + j]))
                    .collect();
                if vis.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = vis
                    .iter()
                    .map(|&j| {
                        (0..dh)
                            .map(|c| q.get(row, h * dh + c) * k.get(b.keys[j], h * dh + c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (s, &j) in scores.iter().zip(&vis) {
                    let p = (s - max).exp() / z;
                    for c in 0..dh {
                        out.data_mut()[row * d + h * dh + c] += p * v.get(b.keys[j], h * dh + c);
                    }
                }
            }
        }
    }
    out
}

fn sample_blocks() -> Arc<Vec<AttnBlock>> {
    // block 0: causal over 3 queries with two always-visible prefix keys and a repeat
    let keys0 = vec![5, 6, 0, 1, 2, 5];
    let mut mask0 = vec![false; 3 * keys0.len()];
    for qi in 0..3 {
        mask0[qi * 6] = true;
        mask0[qi * 6 + 1] = true;
        for j in 0..=qi {
            mask0[qi * 6 + 2 + j] = true;
        }
        mask0[qi * 6 + 5] = qi >= 1;
    }
    Arc::new(vec![
        AttnBlock {
            q_start: 0,
            q_len: 3,
            keys: keys0,
            mask: Some(mask0),
        },
        AttnBlock::full(3, 2, vec![3, 4]),
        // query row 5 with every key hidden produces zeros
        AttnBlock {
            q_start: 5,
            q_len: 1,
            keys: vec![0],
            mask: Some(vec![false]),
        },
    ])
}

#[test]
fn fused_attention_matches_brute_force() {
    let blocks = sample_blocks();
    for seed in 0..5 {
        let q = rand(&[6, 8], seed);
        let k = rand(&[7, 8], 10 + seed);
        let v = rand(&[7, 8], 20 + seed);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()).unwrap(),
            tape.constant(k.clone()).unwrap(),
            tape.constant(v.clone()).unwrap(),
        );
        let o = tape.attention(qv, kv, vv, 2, blocks.clone()).unwrap();
        let expected = brute_attention(&q, &k, &v, 2, &blocks);
        assert!(tape.value(o).max_abs_diff(&expected) < 1e-13);
        assert!(tape.value(o).row_slice(5).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn fused_attention_gradient_matches_finite_differences() {
    let blocks = sample_blocks();
    for seed in 0..10 {
        let inputs = [rand(&[6, 8], seed), rand(&[7, 8], 10 + seed), rand(&[7, 8], 20 + seed)];
        let w = rand(&[6, 8], 30 + seed);
        let check = gradcheck::check(&inputs, STEP, |t, v| {
            let o = t.attention(v[0], v[1], v[2], 2, blocks.clone())?;
            let wv = t.constant(w.clone())?;
            let p = t.mul(o, wv)?;
            t.sum(p)
        })
        .unwrap();
        assert!(check.max_rel_err() < 1e-4, "seed {seed}: {}", check.max_rel_err());
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.constant(rand(&[5, 5], 3)).unwrap();
        let b = tape.constant(rand(&[5, 5], 4)).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(c).unwrap();
        let l = tape.cross_entropy(s, &[0, 1, 2, 3, 4], &[true; 5]).unwrap();
        tape.value(l).item().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
}
