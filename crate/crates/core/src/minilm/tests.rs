use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn tiny() -> LmConfig {
    LmConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_len: 10,
        pad_id: 0,
        bos_id: 1,
        eos_id: 2,
    }
}

fn decoder(cfg: &LmConfig, seed: u64) -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = Decoder::new(&mut store, "decoder", cfg, &mut rng).unwrap();
    (store, dec)
}

fn encoder(cfg: &LmConfig, seed: u64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(&mut store, "encoder", cfg, &mut rng).unwrap();
    (store, enc)
}

fn random_entries(cfg: &LmConfig, s: usize, placement: Placement, seed: u64) -> InjectedEntries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InjectedEntries {
        layers: (0..cfg.n_layers)
            .map(|_| {
                (
                    Tensor::randn(&[s, cfg.d_model], 1.0, &mut rng),
                    Tensor::randn(&[s, cfg.d_model], 1.0, &mut rng),
                )
            })
            .collect(),
        placement,
    }
}

fn incremental(dec: &Decoder, store: &ParamStore, tokens: &[u32], mut cache: KvCache) -> Vec<Tensor> {
    tokens
        .iter()
        .map(|&t| dec.decode_step(store, t, &mut cache).unwrap())
        .collect()
}

fn max_diff_rows(full: &Tensor, steps: &[Tensor]) -> f64 {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            full.row_slice(i)
                .iter()
                .zip(s.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn config_validation() {
    assert!(LmConfig::toy(30).validate().is_ok());
    let mut bad = LmConfig::toy(30);
    bad.n_heads = 3;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = LmConfig::toy(30);
    bad.max_len = 1;
    assert!(bad.validate().is_err());
}

#[test]
fn parameter_count_formula_matches_store() {
    let cfg = tiny();
    let (store, _) = decoder(&cfg, 0);
    assert_eq!(store.num_elements(), cfg.num_parameters(true));
    let (store, _) = encoder(&cfg, 0);
    assert_eq!(store.num_elements(), cfg.num_parameters(false));
}

#[test]
fn single_token_encoding_shape() {
    let cfg = tiny();
    let (store, enc) = encoder(&cfg, 1);
    let out = enc.encode(&store, &[5], &[true]).unwrap();
    assert_eq!(out.hidden_states.shape(), &[1, cfg.d_model]);
    assert_eq!(out.cls_state.data(), out.last_state.data());
}

#[test]
fn encoder_rejects_out_of_vocab_tokens() {
    let cfg = tiny();
    let (store, enc) = encoder(&cfg, 1);
    assert!(enc.encode(&store, &[1, 11], &[true, true]).is_err());
}

#[test]
fn masked_tail_does_not_affect_real_positions() {
    let cfg = tiny();
    let (store, enc) = encoder(&cfg, 2);
    let mask = [true, true, true, false, false, false];
    let a = enc.encode(&store, &[1, 5, 2, 0, 0, 0], &mask).unwrap();
    let b = enc.encode(&store, &[1, 5, 2, 7, 0, 9], &mask).unwrap();
    for i in 0..3 {
        assert_eq!(a.hidden_states.row_slice(i), b.hidden_states.row_slice(i));
    }
    assert_eq!(a.last_state, b.last_state);
    assert_eq!(a.last_state.data(), a.hidden_states.row_slice(2));
}

#[test]
fn encoder_is_bidirectional() {
    let cfg = tiny();
    let (store, enc) = encoder(&cfg, 3);
    let a = enc.encode(&store, &[1, 5, 6, 2], &[true; 4]).unwrap();
    let b = enc.encode(&store, &[1, 5, 7, 2], &[true; 4]).unwrap();
    assert_ne!(a.hidden_states.row_slice(0), b.hidden_states.row_slice(0));
}

#[test]
fn fresh_cache_holds_one_entry_per_layer_after_a_step() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 4);
    let mut cache = dec.new_cache();
    dec.decode_step(&store, cfg.bos_id, &mut cache).unwrap();
    for l in 0..cfg.n_layers {
        assert_eq!(cache.layer(l).len(), 1);
        assert_eq!(cache.layer(l).tags(), &[Provenance::Generated]);
    }
}

#[test]
fn cache_layer_mismatch_is_an_error() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 4);
    let mut cache = KvCache::new(cfg.n_layers + 1, cfg.d_model);
    assert!(matches!(
        dec.decode_step(&store, 1, &mut cache),
        Err(Error::Config(_))
    ));
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 5);
    let tokens = [1, 4, 9, 3, 3, 7, 10];
    let full = dec.full_forward(&store, &tokens, None).unwrap();
    assert_eq!(full.shape(), &[7, cfg.vocab_size]);
    let steps = incremental(&dec, &store, &tokens, dec.new_cache());
    assert!(max_diff_rows(&full, &steps) < 1e-10);
}

#[test]
fn incremental_decoding_matches_full_forward_with_injection() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 6);
    let tokens = [1, 4, 9, 3, 3, 7, 10, 5];
    for placement in [
        Placement::Prefix,
        Placement::Interleave { every: 1 },
        Placement::Interleave { every: 3 },
    ] {
        for s in [1, 2, 3] {
            let entries = random_entries(&cfg, s, placement, 40 + s as u64);
            let full = dec.full_forward(&store, &tokens, Some(&entries)).unwrap();
            let cache = KvCache::with_injection(cfg.d_model, &entries);
            let steps = incremental(&dec, &store, &tokens, cache);
            let diff = max_diff_rows(&full, &steps);
            assert!(diff < 1e-10, "{placement:?} S={s}: {diff}");
        }
    }
}

#[test]
fn empty_injection_is_neutral() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 7);
    let tokens = [1, 3, 5, 7];
    let plain = dec.full_forward(&store, &tokens, None).unwrap();
    let entries = random_entries(&cfg, 0, Placement::Prefix, 0);
    let injected = dec.full_forward(&store, &tokens, Some(&entries)).unwrap();
    assert_eq!(plain, injected);
    let a = incremental(&dec, &store, &tokens, dec.new_cache());
    let b = incremental(&dec, &store, &tokens, KvCache::with_injection(cfg.d_model, &entries));
    assert_eq!(a, b);
}

#[test]
fn pad_tail_does_not_change_real_logits() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 8);
    let a = dec.full_forward(&store, &[1, 6, 7, 0, 0], None).unwrap();
    let b = dec.full_forward(&store, &[1, 6, 7, 0, 0, 0, 0], None).unwrap();
    for i in 0..3 {
        assert_eq!(a.row_slice(i), b.row_slice(i));
    }
}

#[test]
fn injected_entries_reach_every_position() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 9);
    let tokens = [1, 3, 5, 7, 4, 4];
    let e1 = random_entries(&cfg, 2, Placement::Prefix, 1);
    let mut e2 = e1.clone();
    e2.layers[0].1.data_mut()[0] += 1.0;
    let a = dec.full_forward(&store, &tokens, Some(&e1)).unwrap();
    let b = dec.full_forward(&store, &tokens, Some(&e2)).unwrap();
    for i in 0..tokens.len() {
        assert_ne!(a.row_slice(i), b.row_slice(i), "position {i} ignores injected value");
    }
}

#[test]
fn zero_valued_injection_contributes_nothing_but_absorbs_mass() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 10);
    let entries = InjectedEntries {
        layers: (0..cfg.n_layers)
            .map(|_| (Tensor::zeros(&[3, cfg.d_model]), Tensor::zeros(&[3, cfg.d_model])))
            .collect(),
        placement: Placement::Prefix,
    };
    let mut cache = KvCache::with_injection(cfg.d_model, &entries);
    for &t in &[1, 5, 6] {
        let (_, traces) = dec.decode_step_traced(&store, t, &mut cache).unwrap();
        for tr in traces {
            assert!(tr.injected_contribution.iter().all(|&c| c == 0.0));
            assert!(tr.injected_mass.iter().all(|&m| m > 0.0 && m < 1.0));
        }
    }
}

#[test]
fn hidden_injected_entries_leave_logits_unchanged() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 11);
    let entries = random_entries(&cfg, 2, Placement::Prefix, 3);
    let base = KvCache::with_injection(cfg.d_model, &entries);
    let mut hidden = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let kv = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..cfg.n_layers)
            .map(|_| Tensor::randn(&[cfg.d_model], 5.0, rng).into_data())
            .collect()
    };
    let (k, v) = (kv(&mut rng), kv(&mut rng));
    hidden.push_hidden_injected(&k, &v).unwrap();
    let tokens = [1, 3, 8, 2];
    let a = incremental(&dec, &store, &tokens, base);
    let b = incremental(&dec, &store, &tokens, hidden);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.argmax(), y.argmax());
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}

#[test]
fn greedy_generation_is_deterministic_and_bounded() {
    let cfg = tiny();
    let (store, dec) = decoder(&cfg, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = dec.generate(&store, dec.new_cache(), 6, Sampling::Greedy, &mut rng).unwrap();
    let b = dec.generate(&store, dec.new_cache(), 6, Sampling::Greedy, &mut rng).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6);
    let none = dec.generate(&store, dec.new_cache(), 0, Sampling::Greedy, &mut rng).unwrap();
    assert!(none.is_empty());
}

#[test]
fn decoder_loss_gradient_matches_finite_differences() {
    // Every decoder parameter plus the injected rows, against central differences.
    let cfg = LmConfig {
        vocab_size: 6,
        d_model: 4,
        n_heads: 2,
        n_layers: 2,
        d_ff: 6,
        max_len: 5,
        pad_id: 0,
        bos_id: 1,
        eos_id: 2,
    };
    let (store, dec) = decoder(&cfg, 14);
    let ids = dec.params();
    let mut inputs: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
    let entries = random_entries(&cfg, 2, Placement::Interleave { every: 2 }, 15);
    let rows = Tensor::new(vec![2 * 2 * 2 * 2, 4], {
        let mut r = entries.to_rows().unwrap().into_data();
        r.extend(random_entries(&cfg, 2, Placement::Prefix, 16).to_rows().unwrap().into_data());
        r
    })
    .unwrap();
    inputs.push(rows);
    let seqs: [&[u32]; 2] = [&[1, 3, 4, 5], &[1, 5, 5]];
    let targets = [3, 4, 5, 2, 5, 5, 2];
    let n = ids.len();
    let loss = |tape: &mut Tape, vars: &[Var], store: &mut ParamStore| -> Result<Var> {
        for (k, &id) in ids.iter().enumerate() {
            store.set_value(id, tape.value(vars[k]).clone())?;
        }
        let rows = vars[n];
        let logits = dec.forward(
            tape,
            store,
            &seqs,
            Some(&DecoderInjection {
                rows,
                n_entries: 2,
                placement: Placement::Interleave { every: 2 },
            }),
        )?;
        tape.cross_entropy(logits, &targets, &[true; 7])
    };
    // analytic: run through the store so parameter gradients land there
    let mut s = store.clone();
    let mut tape = Tape::new();
    let rows = tape.leaf(inputs[n].clone(), true).unwrap();
    let logits = dec
        .forward(
            &mut tape,
            &s,
            &seqs,
            Some(&DecoderInjection {
                rows,
                n_entries: 2,
                placement: Placement::Interleave { every: 2 },
            }),
        )
        .unwrap();
    let l = tape.cross_entropy(logits, &targets, &[true; 7]).unwrap();
    tape.backward(l, &mut s).unwrap();
    let mut analytic: Vec<Tensor> = ids.iter().map(|&id| s.grad(id).unwrap().clone()).collect();
    analytic.push(tape.grad(rows).unwrap().clone());

    let mut scratch = store.clone();
    let numeric = gradcheck::numeric_grad(&inputs, gradcheck::STEP, |xs| {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = loss(&mut tape, &vars, &mut scratch)?;
        Ok(tape.value(out).item())
    })
    .unwrap();
    for (k, (a, nm)) in analytic.iter().zip(&numeric).enumerate() {
        let err = gradcheck::rel_err(a.data(), nm.data());
        assert!(err < 1e-4, "input {k}: rel err {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_are_causal(tokens in prop::collection::vec(0u32..11, 2..9), pos in 0usize..8, new in 0u32..11) {
        let cfg = tiny();
        let (store, dec) = decoder(&cfg, 20);
        let pos = pos % tokens.len();
        let mut changed = tokens.clone();
        changed[pos] = new;
        let a = dec.full_forward(&store, &tokens, None).unwrap();
        let b = dec.full_forward(&store, &changed, None).unwrap();
        for i in 0..pos {
            prop_assert_eq!(a.row_slice(i), b.row_slice(i));
        }
    }

    #[test]
    fn cache_equivalence_holds_for_random_sequences(
        tokens in prop::collection::vec(0u32..11, 1..11),
        s in 0usize..4,
        every in 1usize..4,
        interleave in any::<bool>(),
    ) {
        let cfg = tiny();
        let (store, dec) = decoder(&cfg, 21);
        let placement = if interleave { Placement::Interleave { every } } else { Placement::Prefix };
        let entries = random_entries(&cfg, s, placement, 22);
        let full = dec.full_forward(&store, &tokens, Some(&entries)).unwrap();
        let steps = incremental(&dec, &store, &tokens, KvCache::with_injection(cfg.d_model, &entries));
        prop_assert!(max_diff_rows(&full, &steps) < 1e-10);
    }
}
