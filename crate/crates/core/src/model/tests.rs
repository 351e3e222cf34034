use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tokenize::{append_placeholders, mask_explicit, patchify};

fn tiny_cfg(u_shape: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 2,
        kv_group: 1,
        embed_dim: 8,
        ffn_dim: 12,
        patch_len: 4,
        quantile_levels: vec![0.1, 0.5, 0.9],
        u_shape,
        ..ModelConfig::default()
    }
}

fn seq_with_mask(values: &[f64], p: usize, mask: Vec<bool>) -> MaskedSequence {
    mask_explicit(&patchify(values, p).unwrap(), mask).unwrap()
}

fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|t| (t as f64 * 0.4 + phase).sin() * 3.0 + 1.0)
        .collect()
}

/// Random weights with norm gains perturbed too, so nothing is trivially one.
fn random_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::init(cfg, &mut rng).unwrap();
    w.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    });
    w
}

fn forward_values(cfg: &ModelConfig, w: &ModelWeights, seq: &MaskedSequence) -> Vec<f64> {
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let h = forward(&mut g, seq, cfg, &b).unwrap();
    g.value(h).to_vec()
}

fn embed_values(cfg: &ModelConfig, w: &ModelWeights, seq: &MaskedSequence) -> Vec<f64> {
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let e = embed(&mut g, seq, cfg, &b).unwrap();
    g.value(e).to_vec()
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = [
        ModelConfig {
            n_layers: 3,
            ..tiny_cfg(true)
        },
        ModelConfig {
            embed_dim: 6,
            ..tiny_cfg(true)
        },
        ModelConfig {
            quantile_levels: vec![0.5, 0.1],
            ..tiny_cfg(true)
        },
        ModelConfig {
            quantile_levels: vec![0.0, 0.5],
            ..tiny_cfg(true)
        },
        ModelConfig {
            eps_denorm: 0.0,
            ..tiny_cfg(true)
        },
        ModelConfig {
            kv_group: 3,
            ..tiny_cfg(true)
        },
    ];
    for cfg in bad {
        assert!(
            matches!(cfg.validate(), Err(ModelError::Config(_))),
            "{cfg:?}"
        );
    }
}

#[test]
fn embed_examples() {
    let cfg = tiny_cfg(true);
    let w = random_weights(&cfg, 1);
    let seq = seq_with_mask(
        &wave(24, 0.0),
        4,
        vec![false, true, false, true, true, false],
    );
    let e = embed_values(&cfg, &w, &seq);
    let d = cfg.embed_dim;
    assert_eq!(&e[d..2 * d], &e[3 * d..4 * d]);
    assert_eq!(&e[d..2 * d], w.mask_embed.data());
    assert_eq!(e, embed_values(&cfg, &w, &seq));

    let mut zero_embed = w.clone();
    zero_embed.patch_embed = Tensor::zeros(vec![d, 4]).unwrap();
    let e = embed_values(&cfg, &zero_embed, &seq);
    assert!(e[..d].iter().all(|&v| v == 0.0));
    assert!(e[2 * d..3 * d].iter().all(|&v| v == 0.0));

    // a different value under a masked token does not matter
    let mut other = wave(24, 0.0);
    other[5] = 1e3;
    let seq2 = seq_with_mask(&other, 4, vec![false, true, false, true, true, false]);
    assert_eq!(embed_values(&cfg, &w, &seq2), embed_values(&cfg, &w, &seq));
}

#[test]
fn zero_block_is_residual_identity() {
    let cfg = tiny_cfg(false);
    let w = ModelWeights::zeros(&cfg).unwrap();
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let x = g
        .constant(vec![3, 8], (0..24).map(|i| i as f64 * 0.1 - 1.0).collect())
        .unwrap();
    let y = attention_block(&mut g, x, &b.layers[0], &cfg, &[0, 1, 2]).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = tiny_cfg(false);
    let w = random_weights(&cfg, 2);
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let x = g.constant(vec![1, 8], wave(8, 0.3)).unwrap();
    let (_, probs) = attention_block_with_probs(&mut g, x, &b.layers[0], &cfg, &[0]).unwrap();
    for p in probs {
        assert_eq!(g.value(p), &[1.0]);
    }
}

#[test]
fn attention_is_bidirectional() {
    let cfg = tiny_cfg(false);
    let w = random_weights(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 5;
    let x: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |x: &[f64]| {
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let xv = g.constant(vec![n, 8], x.to_vec()).unwrap();
        let y = attention_block(&mut g, xv, &b.layers[0], &cfg, &[0, 1, 2, 3, 4]).unwrap();
        g.value(y).to_vec()
    };
    let base = run(&x);
    let mut perturbed = x.clone();
    perturbed[4 * 8 + 2] += 0.5; // last token
    let moved = run(&perturbed);
    let diff: f64 = (0..8).map(|j| (base[j] - moved[j]).abs()).sum();
    assert!(diff > 1e-6, "token 0 ignores token 4");
}

#[test]
fn merge_shallow_examples() {
    let mut g = Graph::new();
    let x = g.constant(vec![3, 1], vec![1.0, 3.0, 5.0]).unwrap();
    let avg = g.constant(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let y = merge_shallow(&mut g, x, avg).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0, 4.0]);

    let d = 3;
    let mut sel = vec![0.0; d * 2 * d];
    for i in 0..d {
        sel[i * 2 * d + d + i] = 1.0;
    }
    let sel = g.constant(vec![d, 2 * d], sel).unwrap();
    for n in [1, 2, 7] {
        let x = g
            .constant(vec![n, d], (0..n * d).map(|v| v as f64).collect())
            .unwrap();
        let y = merge_shallow(&mut g, x, sel).unwrap();
        assert_eq!(g.shape(y), &[n, d]);
        assert_eq!(g.value(y), g.value(x));
    }
}

#[test]
fn merge_deep_examples() {
    let d = 2;
    let mut g = Graph::new();
    let x = g
        .constant(vec![3, d], vec![1.0, -2.0, 0.5, 4.0, 3.0, 3.0])
        .unwrap();
    let avg = g
        .constant(vec![d, 2 * d], vec![0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5])
        .unwrap();
    let y = merge_deep(&mut g, x, x, avg).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let skip = g.constant(vec![3, d], vec![9.0; 6]).unwrap();
    let keep = g
        .constant(vec![d, 2 * d], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        .unwrap();
    let y = merge_deep(&mut g, x, skip, keep).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let short = g.constant(vec![2, d], vec![0.0; 4]).unwrap();
    assert!(merge_deep(&mut g, x, short, keep).is_err());
}

/// Zero blocks, shallow merges that shift tokens right by one, and deep
/// merges chosen per layer to either forward the skip or ignore it.
fn pairing_weights(cfg: &ModelConfig, deep_takes_skip: [bool; 2]) -> ModelWeights {
    let d = cfg.embed_dim;
    let mut w = ModelWeights::zeros(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pe: Vec<f64> = (0..d * cfg.patch_len)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    w.patch_embed = Tensor::new(vec![d, cfg.patch_len], pe).unwrap();
    let selector = |first: bool| {
        let mut m = vec![0.0; d * 2 * d];
        for i in 0..d {
            m[i * 2 * d + if first { i } else { d + i }] = 1.0;
        }
        Tensor::new(vec![d, 2 * d], m).unwrap()
    };
    w.merge_shallow = vec![selector(true), selector(true)];
    w.merge_deep = deep_takes_skip.iter().map(|&s| selector(!s)).collect();
    w
}

#[test]
fn deep_layers_pair_with_mirrored_shallow_layers() {
    let cfg = tiny_cfg(true);
    let seq = seq_with_mask(&wave(20, 0.1), 4, vec![false; 5]);
    let e = embed_values(&cfg, &pairing_weights(&cfg, [true, true]), &seq);
    let d = cfg.embed_dim;
    let shift1: Vec<f64> = (0usize..5)
        .flat_map(|i| e[i.saturating_sub(1) * d..(i.saturating_sub(1) + 1) * d].to_vec())
        .collect();
    // layer 4 takes the skip of layer 1, which is the plain embedding
    let out = forward_values(&cfg, &pairing_weights(&cfg, [true, true]), &seq);
    assert_eq!(out, e);
    // layer 3 takes the skip of layer 2 (shifted once); layer 4 passes it on
    let out = forward_values(&cfg, &pairing_weights(&cfg, [true, false]), &seq);
    assert_eq!(out, shift1);
}

#[test]
fn vanilla_with_zero_blocks_returns_embedding() {
    let cfg = tiny_cfg(false);
    let mut w = ModelWeights::zeros(&cfg).unwrap();
    w.patch_embed = random_weights(&cfg, 5).patch_embed;
    w.mask_embed = random_weights(&cfg, 6).mask_embed;
    let seq = seq_with_mask(&wave(16, 0.0), 4, vec![false, true, false, false]);
    assert_eq!(forward_values(&cfg, &w, &seq), embed_values(&cfg, &w, &seq));
}

#[test]
fn u_shape_changes_the_output() {
    let u_cfg = tiny_cfg(true);
    let v_cfg = tiny_cfg(false);
    let u = random_weights(&u_cfg, 7);
    let v = ModelParams {
        merge_shallow: Vec::new(),
        merge_deep: Vec::new(),
        ..u.clone()
    };
    let seq = seq_with_mask(
        &wave(24, 0.2),
        4,
        vec![false, false, true, false, false, true],
    );
    let a = forward_values(&u_cfg, &u, &seq);
    let b = forward_values(&v_cfg, &v, &seq);
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() > 1e-3);
}

#[test]
fn forward_shape_and_determinism() {
    let cfg = tiny_cfg(true);
    let w = random_weights(&cfg, 8);
    for n_tokens in [1, 3, 17, 128] {
        let mut mask = vec![false; n_tokens];
        mask[n_tokens - 1] = n_tokens > 1;
        let seq = seq_with_mask(&wave(n_tokens * 4, 0.0), 4, mask);
        let out = forward_values(&cfg, &w, &seq);
        assert_eq!(out.len(), n_tokens * cfg.embed_dim);
        let again = forward_values(&cfg, &w, &seq);
        assert!(out
            .iter()
            .zip(&again)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn grouped_query_attention_runs() {
    let cfg = ModelConfig {
        n_heads: 4,
        kv_group: 2,
        embed_dim: 16,
        ..tiny_cfg(true)
    };
    let w = random_weights(&cfg, 9);
    assert_eq!(w.layers[0].wk.shape(), &[8, 16]);
    let seq = append_placeholders(&patchify(&wave(20, 0.0), 4).unwrap(), 2).unwrap();
    let fc = Model::new(cfg, w).unwrap().predict(&seq).unwrap();
    assert_eq!(fc.values().len(), 3 * 2 * 4);
}

#[test]
fn quantile_head_examples() {
    let cfg = tiny_cfg(true);
    let mut w = random_weights(&cfg, 10);
    for h in &mut w.heads {
        h.weight = Tensor::zeros(vec![4, 8]).unwrap();
        h.bias = Tensor::zeros(vec![4]).unwrap();
    }
    let seq = append_placeholders(&patchify(&wave(18, 0.0), 4).unwrap(), 3).unwrap();
    let model = Model::new(cfg.clone(), w.clone()).unwrap();
    let fc = model.predict(&seq).unwrap();
    assert_eq!(fc.values().len(), 3 * 3 * 4);
    assert_eq!(fc.token_index(), &[5, 6, 7]);
    assert!(fc.values().iter().all(|&v| v == seq.mu()));

    // constant history: sigma = 0, so outputs are raw * eps + mu
    let cfg_eps = ModelConfig {
        eps_denorm: 1e-3,
        ..cfg.clone()
    };
    let w = random_weights(&cfg_eps, 11);
    let seq = append_placeholders(&patchify(&[2.5; 12], 4).unwrap(), 2).unwrap();
    assert_eq!(seq.sigma(), 0.0);
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let hidden = forward(&mut g, &seq, &cfg_eps, &b).unwrap();
    let masked = g.gather_rows(hidden, seq.mask_idx()).unwrap();
    let normed = g.rms_norm(masked, b.final_norm, cfg_eps.norm_eps).unwrap();
    let raw_y = g.matmul_nt(normed, b.heads[1].weight).unwrap();
    let raw_y = g.add_row(raw_y, b.heads[1].bias).unwrap();
    let raw = g.value(raw_y).to_vec();
    let fc = Model::new(cfg_eps, w).unwrap().predict(&seq).unwrap();
    for (r, q) in raw.iter().zip(fc.level(1)) {
        assert!((r * 1e-3 + 2.5 - q).abs() < 1e-14);
    }

    let unmasked = seq_with_mask(&wave(8, 0.0), 4, vec![false, false]);
    assert_eq!(model.predict(&unmasked), Err(ModelError::EmptyMask));
}

#[test]
fn scale_shift_equivariance() {
    let cfg = ModelConfig {
        eps_denorm: 1e-8,
        ..tiny_cfg(true)
    };
    let model = Model::new(cfg.clone(), random_weights(&cfg, 12)).unwrap();
    let x = wave(30, 0.5);
    let base = model
        .predict(&append_placeholders(&patchify(&x, 4).unwrap(), 3).unwrap())
        .unwrap();
    for (a, b) in [(0.5, -10.0), (3.0, 7.0), (1.0, 1e3)] {
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let fc = model
            .predict(&append_placeholders(&patchify(&xs, 4).unwrap(), 3).unwrap())
            .unwrap();
        for (q, qs) in base.values().iter().zip(fc.values()) {
            let expect = a * q + b;
            assert!(
                (qs - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                "{qs} vs {expect}"
            );
        }
    }
}

#[test]
fn late_tokens_inform_early_predictions() {
    let cfg = tiny_cfg(true);
    let model = Model::new(cfg.clone(), random_weights(&cfg, 13)).unwrap();
    let x = wave(24, 0.0);
    let mask = vec![false, true, false, false, false, false];
    let base = model.predict(&seq_with_mask(&x, 4, mask.clone())).unwrap();
    // swapping two values inside the last token keeps mu and sigma fixed
    let mut swapped = x.clone();
    swapped.swap(20, 23);
    let seq = seq_with_mask(&swapped, 4, mask);
    let moved = model.predict(&seq).unwrap();
    let diff: f64 = base
        .values()
        .iter()
        .zip(moved.values())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-8);
}

#[test]
fn sort_levels_orders_each_point() {
    let mut fc = QuantileForecast::new(
        vec![0.1, 0.5, 0.9],
        vec![2],
        2,
        vec![3.0, 0.0, 1.0, 2.0, 2.0, 1.0],
    )
    .unwrap();
    fc.sort_levels();
    assert_eq!(fc.level(0), &[1.0, 0.0]);
    assert_eq!(fc.level(1), &[2.0, 1.0]);
    assert_eq!(fc.level(2), &[3.0, 2.0]);
}

#[test]
fn named_weights_roundtrip_and_errors() {
    let cfg = tiny_cfg(true);
    let w = random_weights(&cfg, 14);
    let named: Vec<(String, Tensor)> = w.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    assert_eq!(ModelWeights::from_named(&cfg, named.clone()).unwrap(), w);
    let names = w.names();
    assert_eq!(names.len(), 2 + 9 * 4 + 4 + 1 + 3 * 2);

    let missing: Vec<_> = named.iter().skip(1).cloned().collect();
    assert!(matches!(
        ModelWeights::from_named(&cfg, missing),
        Err(ModelError::MissingWeight(_))
    ));
    let mut wrong = named.clone();
    wrong[0].1 = Tensor::zeros(vec![2, 2]).unwrap();
    assert!(matches!(
        ModelWeights::from_named(&cfg, wrong),
        Err(ModelError::WeightShape { .. })
    ));
    assert!(ModelWeights::from_named(&tiny_cfg(false), named).is_err());
}
