use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{finite_diff_check_guarded, GradCheckOptions};

const C: usize = 8;

fn cfg(layers: usize) -> DecoderConfig {
    DecoderConfig {
        hidden: C,
        heads: 2,
        num_layers: layers,
        num_tokens: 4,
        max_phrases: 5,
        num_classes: 4,
        mask_mode: MaskMode::Masked,
        bare_inner_product: false,
        pos_std: 0.02,
    }
}

const EXTENTS: [(usize, usize); 3] = [(4, 4), (2, 2), (1, 1)];

struct Fixture {
    store: ParamStore,
    decoder: Decoder,
    phrases: Tensor,
    levels: [Tensor; 3],
    per_pixel: Tensor,
}

fn fixture(cfg: &DecoderConfig, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, cfg, EXTENTS, &mut rng).unwrap();
    Fixture {
        store,
        decoder,
        phrases: Tensor::randn(&[3, C], 1.0, &mut rng),
        levels: std::array::from_fn(|s| Tensor::randn(&[EXTENTS[s].0, EXTENTS[s].1, C], 1.0, &mut rng)),
        per_pixel: Tensor::randn(&[8, 8, C], 1.0, &mut rng),
    }
}

fn level(tape: &mut Tape, t: &Tensor) -> Level {
    let v = tape.constant(t.clone());
    let s = t.shape();
    Level {
        var: v,
        height: s[0],
        width: s[1],
        channels: s[2],
    }
}

fn run(f: &Fixture, tape: &mut Tape) -> DecoderOutput {
    let p = f.store.bind(tape, |_| false);
    let r = tape.constant(f.phrases.clone());
    let levels = std::array::from_fn(|s| level(tape, &f.levels[s]));
    let pp = level(tape, &f.per_pixel);
    f.decoder.forward(tape, &p, r, levels, pp).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn queries_identity_case() {
    let mut tape = Tape::new();
    let r = tape.constant(rand_t(&[2, 3], 1));
    let o = tape.constant(rand_t(&[4, 3], 2));
    let pr = tape.constant(Tensor::zeros(&[2, 3]));
    let po = tape.constant(Tensor::zeros(&[4, 3]));
    let w = tape.constant(Tensor::identity(3));
    let q = build_queries(&mut tape, r, o, pr, po, w).unwrap();
    let v = tape.value(q);
    assert_eq!(v.row(0), tape.value(r).row(0));
    assert_eq!(v.row(2), tape.value(o).row(0));

    // zero phrases cannot reach the decoder: the phrase encoder refuses them
    let mut store = ParamStore::new();
    let enc = crate::scene::PhraseEncoder::new(&mut store, 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let p = store.bind(&mut tape, |_| false);
    assert!(enc.forward(&mut tape, &p, &[]).is_err());
}

#[test]
fn queries_match_concat_then_linear() {
    let (r, o, pr, po, w) = (
        rand_t(&[3, 4], 1),
        rand_t(&[2, 4], 2),
        rand_t(&[3, 4], 3),
        rand_t(&[2, 4], 4),
        rand_t(&[4, 5], 5),
    );
    let mut tape = Tape::new();
    let vars: Vec<Var> = [&r, &o, &pr, &po, &w].iter().map(|t| tape.constant((*t).clone())).collect();
    let q = build_queries(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
    for i in 0..5 {
        let (src, pos) = if i < 3 {
            (r.row(i), pr.row(i))
        } else {
            (o.row(i - 3), po.row(i - 3))
        };
        for j in 0..5 {
            let want: f64 = (0..4).map(|k| (src[k] + pos[k]) * w.at2(k, j)).sum();
            assert!((tape.value(q).at2(i, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn kv_examples() {
    let f = rand_t(&[6, 3], 1);
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let zero_pos = tape.constant(Tensor::zeros(&[6, 3]));
    let zero_s = tape.constant(Tensor::zeros(&[3]));
    let eye = tape.constant(Tensor::identity(3));
    let (k, v) = build_kv(&mut tape, fv, zero_pos, zero_s, eye, eye).unwrap();
    assert_eq!(tape.value(k), &f);
    assert_eq!(tape.value(v), &f);

    let shift = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let (k2, _) = build_kv(&mut tape, fv, zero_pos, shift, eye, eye).unwrap();
    for i in 0..6 {
        let d: Vec<f64> = tape.value(k2).row(i).iter().zip(f.row(i)).map(|(a, b)| a - b).collect();
        for (a, b) in d.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let (pos, s, wk, wv) = (rand_t(&[6, 3], 2), rand_t(&[3], 3), rand_t(&[3, 4], 4), rand_t(&[3, 4], 5));
    let vars: Vec<Var> = [&pos, &s, &wk, &wv].iter().map(|t| tape.constant((*t).clone())).collect();
    let (k, v) = build_kv(&mut tape, fv, vars[0], vars[1], vars[2], vars[3]).unwrap();
    for i in 0..6 {
        for j in 0..4 {
            let x = |c: usize| f.at2(i, c) + pos.at2(i, c) + s.data()[c];
            let wk_ij: f64 = (0..3).map(|c| x(c) * wk.at2(c, j)).sum();
            let wv_ij: f64 = (0..3).map(|c| x(c) * wv.at2(c, j)).sum();
            assert!((tape.value(k).at2(i, j) - wk_ij).abs() < 1e-12);
            assert!((tape.value(v).at2(i, j) - wv_ij).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_mask_examples() {
    let all_on = Tensor::full(&[2, 4], 10.0);
    let a = attention_mask_from_logits(&all_on, (2, 2), (2, 2)).unwrap();
    assert!(a.data().iter().all(|&v| v == 0.0));

    let all_off = Tensor::full(&[2, 4], -10.0);
    let a = attention_mask_from_logits(&all_off, (2, 2), (4, 4)).unwrap();
    assert!(a.data().iter().all(|&v| v == 0.0));

    let pair = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
    let a = attention_mask_from_logits(&pair, (1, 2), (1, 2)).unwrap();
    assert_eq!(a.data(), &[0.0, MASKED]);

    let mixed = rand_t(&[5, 64], 9);
    let a = attention_mask_from_logits(&mixed, (8, 8), (4, 4)).unwrap();
    for r in 0..5 {
        assert!(a.row(r).iter().all(|&v| v == 0.0 || v == MASKED));
        assert!(a.row(r).contains(&0.0));
    }
}

fn attention_parts(tape: &mut Tape, store: &mut ParamStore, rng: &mut ChaCha8Rng, c: usize) -> (Bound, Linear, LayerNorm) {
    let out = Linear::new(store, "out", c, c, 1.0, rng);
    let norm = LayerNorm::new(store, "norm", c);
    for v in store.get_mut(norm.gain).data_mut() {
        *v = 1.3;
    }
    (store.bind(tape, |_| false), out, norm)
}

#[test]
fn zero_mask_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let (p, out, norm) = attention_parts(&mut tape, &mut store, &mut rng, 4);
    let q = tape.constant(rand_t(&[3, 4], 1));
    let k = tape.constant(rand_t(&[5, 4], 2));
    let v = tape.constant(rand_t(&[5, 4], 3));
    let x = tape.constant(rand_t(&[3, 4], 4));
    let zeros = Tensor::zeros(&[3, 5]);
    let (a, _) = masked_cross_attention(&mut tape, &p, q, k, v, Some(&zeros), x, &out, &norm, 2).unwrap();
    let (b, _) = masked_cross_attention(&mut tape, &p, q, k, v, None, x, &out, &norm, 2).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) <= 1e-12);
}

#[test]
fn single_key_returns_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let (p, out, norm) = attention_parts(&mut tape, &mut store, &mut rng, 4);
    let q = tape.constant(rand_t(&[3, 4], 1));
    let k = tape.constant(rand_t(&[1, 4], 2));
    let vt = rand_t(&[1, 4], 3);
    let v = tape.constant(vt.clone());
    let xt = rand_t(&[3, 4], 4);
    let x = tape.constant(xt.clone());
    let (y, probs) = masked_cross_attention(&mut tape, &p, q, k, v, None, x, &out, &norm, 2).unwrap();
    assert!(probs.iter().all(|h| h.data().iter().all(|&w| w == 1.0)));
    // expected: LN(v W_out + b + x)
    let w = store.get(out.weight);
    let b = store.get(out.bias);
    let proj: Vec<f64> = (0..4)
        .map(|j| (0..4).map(|i| vt.data()[i] * w.at2(i, j)).sum::<f64>() + b.data()[j])
        .collect();
    let mut t2 = Tape::new();
    let pre: Vec<Vec<f64>> = (0..3).map(|r| (0..4).map(|j| proj[j] + xt.at2(r, j)).collect()).collect();
    let pre = t2.constant(Tensor::from_rows(&pre).unwrap());
    let g = t2.constant(store.get(norm.gain).clone());
    let bb = t2.constant(store.get(norm.bias).clone());
    let want = t2.layer_norm(pre, g, bb).unwrap();
    assert!(tape.value(y).max_abs_diff(t2.value(want)) < 1e-12);
}

#[test]
fn masked_attention_matches_column_deletion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let (p, out, norm) = attention_parts(&mut tape, &mut store, &mut rng, 4);
    let (qt, kt, vt, xt) = (rand_t(&[3, 4], 1), rand_t(&[6, 4], 2), rand_t(&[6, 4], 3), rand_t(&[3, 4], 4));
    let mask = attention_mask_from_logits(&rand_t(&[3, 6], 5), (2, 3), (2, 3)).unwrap();
    let vars: Vec<Var> = [&qt, &kt, &vt, &xt].iter().map(|t| tape.constant((*t).clone())).collect();
    let (y, probs) = masked_cross_attention(&mut tape, &p, vars[0], vars[1], vars[2], Some(&mask), vars[3], &out, &norm, 2).unwrap();
    for r in 0..3 {
        let keep: Vec<usize> = (0..6).filter(|&j| mask.at2(r, j) == 0.0).collect();
        let sub = |t: &Tensor| Tensor::from_rows(&keep.iter().map(|&j| t.row(j).to_vec()).collect::<Vec<_>>()).unwrap();
        let q1 = tape.constant(Tensor::from_rows(&[qt.row(r).to_vec()]).unwrap());
        let x1 = tape.constant(Tensor::from_rows(&[xt.row(r).to_vec()]).unwrap());
        let k1 = tape.constant(sub(&kt));
        let v1 = tape.constant(sub(&vt));
        let (y1, _) = masked_cross_attention(&mut tape, &p, q1, k1, v1, None, x1, &out, &norm, 2).unwrap();
        for j in 0..4 {
            assert!((tape.value(y).at2(r, j) - tape.value(y1).at2(0, j)).abs() < 1e-12);
        }
        for h in &probs {
            for j in 0..6 {
                if mask.at2(r, j) == MASKED {
                    assert_eq!(h.at2(r, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn zero_output_projection_makes_self_attention_residual() {
    let mut f = fixture(&cfg(3), 4);
    let layer = f.decoder.layers[0].clone();
    for id in [
        layer.self_out().weight,
        layer.self_out().bias,
        layer.ffn_out.weight,
        layer.ffn_out.bias,
    ] {
        f.store.get_mut(id).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let p = f.store.bind(&mut tape, |_| false);
    let x = tape.constant(rand_t(&[7, C], 1));
    let pos = tape.constant(rand_t(&[7, C], 2));
    let y = f.decoder.tail_block(&mut tape, &p, &layer, x, pos).unwrap();
    let n1 = layer.self_attn.norm.forward(&mut tape, &p, x).unwrap();
    let want = layer.ffn_norm.forward(&mut tape, &p, n1).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(want)) < 1e-12);

    // one query: attention weight is 1, so the sub-block is v-projection then out-projection
    let f = fixture(&cfg(3), 4);
    let layer = &f.decoder.layers[0];
    let mut tape = Tape::new();
    let p = f.store.bind(&mut tape, |_| false);
    let x = tape.constant(rand_t(&[1, C], 1));
    let pos = tape.constant(rand_t(&[1, C], 2));
    let sa = &layer.self_attn;
    let (_, probs) = {
        let xp = tape.add(x, pos).unwrap();
        let q = sa.q.forward(&mut tape, &p, xp).unwrap();
        let k = sa.k.forward(&mut tape, &p, xp).unwrap();
        let v = sa.v.forward(&mut tape, &p, x).unwrap();
        masked_cross_attention(&mut tape, &p, q, k, v, None, x, &sa.out, &sa.norm, 2).unwrap()
    };
    assert!(probs.iter().all(|h| h.data() == [1.0]));
    let y = f.decoder.tail_block(&mut tape, &p, layer, x, pos).unwrap();
    let v = sa.v.forward(&mut tape, &p, x).unwrap();
    let o = sa.out.forward(&mut tape, &p, v).unwrap();
    let s = tape.add(o, x).unwrap();
    let s = sa.norm.forward(&mut tape, &p, s).unwrap();
    let h = layer.ffn_in.forward(&mut tape, &p, s).unwrap();
    let h = tape.gelu(h);
    let h = layer.ffn_out.forward(&mut tape, &p, h).unwrap();
    let s2 = tape.add(s, h).unwrap();
    let want = layer.ffn_norm.forward(&mut tape, &p, s2).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(want)) < 1e-12);
}

#[test]
fn mask_logit_geometry() {
    let mut c = cfg(3);
    c.bare_inner_product = true;
    let f = fixture(&c, 1);
    let mut tape = Tape::new();
    let p = f.store.bind(&mut tape, |_| false);
    // pixel 2 carries e, the others are orthogonal to it
    let e = [0.0, 3.0, 0.0, 4.0];
    let mut pixels = vec![vec![0.0; 4]; 5];
    pixels[2] = e.to_vec();
    pixels[0] = vec![1.0, 0.0, 0.0, 0.0];
    pixels[4] = vec![0.0, 0.0, 7.0, 0.0];
    let pix = tape.constant(Tensor::from_rows(&pixels).unwrap());
    let pix_t = tape.transpose(pix).unwrap();
    let x = tape.constant(Tensor::from_rows(&[e.to_vec()]).unwrap());
    let logits = f.decoder.predict_masks(&mut tape, &p, x, pix_t).unwrap();
    assert_eq!(tape.value(logits).data(), &[0.0, 0.0, 25.0, 0.0, 0.0]);
}

#[test]
fn mask_logits_zero_features_and_loop_oracle() {
    let f = fixture(&cfg(3), 2);
    let mut tape = Tape::new();
    let p = f.store.bind(&mut tape, |_| false);
    let pix_vals = rand_t(&[64, C], 3);
    let pix = tape.constant(pix_vals.clone());
    let pix_t = tape.transpose(pix).unwrap();
    let zero = tape.constant(Tensor::zeros(&[5, C]));
    let logits = f.decoder.predict_masks(&mut tape, &p, zero, pix_t).unwrap();
    let v = tape.value(logits);
    for r in 1..5 {
        assert_eq!(v.row(r), v.row(0));
    }

    let xv = rand_t(&[5, C], 4);
    let x = tape.constant(xv);
    let emb = f.decoder.mask_embed.forward(&mut tape, &p, x).unwrap();
    let logits = f.decoder.predict_masks(&mut tape, &p, x, pix_t).unwrap();
    let (ev, lv) = (tape.value(emb), tape.value(logits));
    for r in 0..5 {
        for px in 0..64 {
            let mut acc = 0.0;
            for k in 0..C {
                acc += ev.at2(r, k) * pix_vals.at2(px, k);
            }
            assert!((lv.at2(r, px) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn class_head_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let c6 = DecoderConfig {
        num_classes: 6,
        num_tokens: 8,
        ..cfg(3)
    };
    let dec = Decoder::new(&mut store, &c6, EXTENTS, &mut rng).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let x = tape.constant(rand_t(&[11, C], 1));
    let (ph, ob) = dec.classify_heads(&mut tape, &p, x, 3).unwrap();
    assert_eq!(tape.shape(ph), &[3, 6]);
    assert_eq!(tape.shape(ob), &[8, 7]);
    let ob_before = tape.value(ob).clone();

    for v in store.get_mut(dec.phrase_head.weight).data_mut() {
        *v = 0.0;
    }
    for (i, v) in store.get_mut(dec.phrase_head.bias).data_mut().iter_mut().enumerate() {
        *v = i as f64;
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let x = tape.constant(rand_t(&[11, C], 1));
    let (ph, ob) = dec.classify_heads(&mut tape, &p, x, 3).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(ph).row(r), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
    assert_eq!(tape.value(ob), &ob_before);
}

#[test]
fn scale_schedule() {
    let visits = |l: usize| {
        let f = fixture(&cfg(l), 1);
        let mut tape = Tape::new();
        let out = run(&f, &mut tape);
        out.layers
            .iter()
            .filter_map(|p| p.attention.as_ref().map(|a| a.scale))
            .collect::<Vec<_>>()
    };
    assert_eq!(visits(3), vec![2, 1, 0]);
    let nine = visits(9);
    assert_eq!(nine.len(), 9);
    for s in 0..3 {
        assert_eq!(nine.iter().filter(|&&v| v == s).count(), 3);
    }
    assert!(matches!(
        Decoder::new(&mut ParamStore::new(), &cfg(4), EXTENTS, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let f = fixture(&cfg(6), 8);
    let (mut t1, mut t2) = (Tape::new(), Tape::new());
    let (a, b) = (run(&f, &mut t1), run(&f, &mut t2));
    assert_eq!(a.layers.len(), 7);
    for (x, y) in a.layers.iter().zip(&b.layers) {
        for (u, v) in [
            (x.mask_logits, y.mask_logits),
            (x.phrase_logits, y.phrase_logits),
            (x.object_logits, y.object_logits),
        ] {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1.value(u)), bits(t2.value(v)));
        }
    }
}

fn compare_with_reference(mode: MaskMode) {
    let mut c = cfg(6);
    c.mask_mode = mode;
    let f = fixture(&c, 21);
    let mut tape = Tape::new();
    let out = run(&f, &mut tape);
    let refs = reference_forward(
        &f.decoder,
        &f.store,
        &f.phrases,
        [&f.levels[0], &f.levels[1], &f.levels[2]],
        &f.per_pixel,
    )
    .unwrap();
    assert_eq!(refs.len(), out.layers.len());
    let mut masked_entries = 0;
    for (got, want) in out.layers.iter().zip(&refs) {
        assert!(tape.value(got.features).max_abs_diff(&want.features) <= 1e-12);
        assert!(tape.value(got.mask_logits).max_abs_diff(&want.mask_logits) <= 1e-12);
        assert!(tape.value(got.phrase_logits).max_abs_diff(&want.phrase_logits) <= 1e-12);
        assert!(tape.value(got.object_logits).max_abs_diff(&want.object_logits) <= 1e-12);
        if let (Some(rec), Some(vis)) = (&got.attention, &want.visible) {
            for (r, row) in vis.iter().enumerate() {
                for (j, &seen) in row.iter().enumerate() {
                    assert_eq!(rec.mask.at2(r, j) == 0.0, seen);
                    masked_entries += (!seen) as usize;
                }
            }
        }
    }
    if mode == MaskMode::Masked {
        assert!(masked_entries > 0, "fixture never masks anything");
    } else {
        assert_eq!(masked_entries, 0);
    }
}

#[test]
fn all_visible_matches_mask_free_reference() {
    compare_with_reference(MaskMode::AllVisible);
}

#[test]
fn masked_decoder_matches_column_deletion_reference() {
    compare_with_reference(MaskMode::Masked);
}

#[test]
fn attention_rows_are_distributions_with_exact_zeros() {
    let f = fixture(&cfg(9), 13);
    let mut tape = Tape::new();
    let out = run(&f, &mut tape);
    for rec in out.layers.iter().filter_map(|l| l.attention.as_ref()) {
        for r in 0..rec.mask.rows() {
            assert!(rec.mask.row(r).contains(&0.0));
            for h in &rec.probs {
                let s: f64 = h.row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                for (j, &m) in rec.mask.row(r).iter().enumerate() {
                    if m == MASKED {
                        assert_eq!(h.at2(r, j), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn object_token_permutation_equivariance() {
    let f = fixture(&cfg(6), 17);
    let perm = [2usize, 0, 3, 1];
    let mut g = Fixture {
        store: f.store.clone(),
        decoder: f.decoder.clone(),
        phrases: f.phrases.clone(),
        levels: f.levels.clone(),
        per_pixel: f.per_pixel.clone(),
    };
    for id in [f.decoder.object_init, f.decoder.object_pos] {
        let src = f.store.get(id).clone();
        let dst = g.store.get_mut(id);
        for (new, &old) in perm.iter().enumerate() {
            dst.data_mut()[new * C..(new + 1) * C].copy_from_slice(src.row(old));
        }
    }
    let (mut ta, mut tb) = (Tape::new(), Tape::new());
    let (a, b) = (run(&f, &mut ta), run(&g, &mut tb));
    let n = 3;
    for (x, y) in a.layers.iter().zip(&b.layers) {
        let (pa, pb) = (ta.value(x.phrase_logits), tb.value(y.phrase_logits));
        assert!(pa.max_abs_diff(pb) < 1e-12);
        let (oa, ob) = (ta.value(x.object_logits), tb.value(y.object_logits));
        let (ma, mb) = (ta.value(x.mask_logits), tb.value(y.mask_logits));
        for (new, &old) in perm.iter().enumerate() {
            for (u, v) in oa.row(old).iter().zip(ob.row(new)) {
                assert!((u - v).abs() < 1e-12);
            }
            for (u, v) in ma.row(n + old).iter().zip(mb.row(n + new)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        for r in 0..n {
            for (u, v) in ma.row(r).iter().zip(mb.row(r)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn full_forward_gradients_match_finite_differences() {
    let f = fixture(&cfg(3), 29);
    let probes: Vec<Tensor> = (0..4).map(|i| rand_t(&[7, 64], 100 + i)).collect();
    let mut params: Vec<Tensor> = f.store.values().to_vec();
    params.extend([
        f.phrases.clone(),
        f.levels[0].clone(),
        f.levels[1].clone(),
        f.levels[2].clone(),
        f.per_pixel.clone(),
    ]);
    let np = f.store.len();
    let report = finite_diff_check_guarded(
        |tape, vars| {
            let p = ParamStore::bind_vars(vars[..np].to_vec());
            let lv = |i: usize, tape: &Tape| {
                let s = tape.shape(vars[np + i]);
                Level {
                    var: vars[np + i],
                    height: s[0],
                    width: s[1],
                    channels: s[2],
                }
            };
            let levels = [lv(1, tape), lv(2, tape), lv(3, tape)];
            let pp = lv(4, tape);
            let out = f.decoder.forward(tape, &p, vars[np], levels, pp)?;
            let mut terms = Vec::new();
            for (layer, probe) in out.layers.iter().zip(&probes) {
                let probe = tape.constant(probe.clone());
                let weighted = tape.mul(layer.mask_logits, probe)?;
                terms.push(tape.mean(weighted));
                terms.push(tape.cross_entropy_logits(layer.phrase_logits, &[0, 1, 3])?);
                terms.push(tape.cross_entropy_logits(layer.object_logits, &[4, 2, 4, 0])?);
            }
            let sig = out.signature();
            Ok((tape.add_all(&terms)?, sig))
        },
        &params,
        &GradCheckOptions {
            max_coords_per_param: Some(3),
            min_magnitude: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.checked > 100);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn rejects_bad_inputs() {
    let f = fixture(&cfg(3), 1);
    let mut tape = Tape::new();
    let p = f.store.bind(&mut tape, |_| false);
    let levels = std::array::from_fn(|s| level(&mut tape, &f.levels[s]));
    let pp = level(&mut tape, &f.per_pixel);
    let too_many = tape.constant(Tensor::zeros(&[6, C]));
    assert!(matches!(
        f.decoder.forward(&mut tape, &p, too_many, levels, pp),
        Err(Error::TooManyPhrases { .. })
    ));
    let narrow = tape.constant(Tensor::zeros(&[2, C + 1]));
    assert!(matches!(
        f.decoder.forward(&mut tape, &p, narrow, levels, pp),
        Err(Error::Shape { .. })
    ));
}
