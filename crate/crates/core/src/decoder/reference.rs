//! Plain-loop decoder used as an oracle. Masked attention is evaluated by
//! deleting masked columns before the softmax rather than adding `-inf`.

use super::{scale_for_layer, Decoder, DecoderLayer, MaskMode};
use crate::error::Result;
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::numcore::kernels::{bilinear_resize, gelu, sigmoid, LAYER_NORM_EPS};
use crate::numcore::{ParamId, ParamStore, Tensor};

/// Per-layer values from [`reference_forward`].
#[derive(Clone, Debug)]
pub struct ReferenceLayer {
    pub features: Tensor,
    pub mask_logits: Tensor,
    pub phrase_logits: Tensor,
    pub object_logits: Tensor,
    /// Visible pixels per query row, `None` for the initial queries.
    pub visible: Option<Vec<Vec<bool>>>,
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Rows {
    (0..t.outer()).map(|i| t.row(i).to_vec()).collect()
}

fn to_tensor(r: &Rows) -> Tensor {
    Tensor::from_rows(r).expect("rectangular rows")
}

fn mm(a: &Rows, b: &Tensor) -> Rows {
    let (k, n) = (b.rows(), b.cols());
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|i| row[i] * b.at2(i, j)).sum()).collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn add_bias(a: &Rows, bias: &[f64]) -> Rows {
    a.iter().map(|x| x.iter().zip(bias).map(|(u, v)| u + v).collect()).collect()
}

fn lin(store: &ParamStore, l: &Linear, x: &Rows) -> Rows {
    add_bias(&mm(x, store.get(l.weight)), store.get(l.bias).data())
}

fn mat(store: &ParamStore, id: ParamId, x: &Rows) -> Rows {
    mm(x, store.get(id))
}

fn norm(store: &ParamStore, ln: &LayerNorm, x: &Rows) -> Rows {
    let (g, b) = (store.get(ln.gain).data(), store.get(ln.bias).data());
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let s = (var + LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
        })
        .collect()
}

fn mlp(store: &ParamStore, m: &Mlp, x: &Rows) -> Rows {
    let mut h = x.clone();
    for (i, l) in m.layers.iter().enumerate() {
        if i > 0 {
            h = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        }
        h = lin(store, l, &h);
    }
    h
}

/// Multi-head attention where query row `i` sees only keys with
/// `visible[i][j]`.
fn attention(q: &Rows, k: &Rows, v: &Rows, visible: Option<&Vec<Vec<bool>>>, heads: usize) -> Rows {
    let c = q[0].len();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; c]; q.len()];
    for (i, qi) in q.iter().enumerate() {
        let cols: Vec<usize> = (0..k.len()).filter(|&j| visible.is_none_or(|m| m[i][j])).collect();
        for h in 0..heads {
            let r = h * d..(h + 1) * d;
            let scores: Vec<f64> = cols
                .iter()
                .map(|&j| qi[r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&cols) {
                for t in r.clone() {
                    out[i][t] += w / z * v[j][t];
                }
            }
        }
    }
    out
}

fn visibility(logits: &Rows, src: (usize, usize), dst: (usize, usize)) -> Vec<Vec<bool>> {
    logits
        .iter()
        .map(|row| {
            let map = Tensor::new(vec![src.0, src.1, 1], row.clone()).expect("logit map");
            let resized = bilinear_resize(&map, dst.0, dst.1).expect("resize");
            let vis: Vec<bool> = resized.data().iter().map(|&z| sigmoid(z) > 0.5).collect();
            if vis.iter().any(|&b| b) {
                vis
            } else {
                vec![true; vis.len()]
            }
        })
        .collect()
}

fn tail(store: &ParamStore, layer: &DecoderLayer, x: &Rows, pos: &Rows, heads: usize) -> Rows {
    let sa = &layer.self_attn;
    let xp = add(x, pos);
    let a = attention(&lin(store, &sa.q, &xp), &lin(store, &sa.k, &xp), &lin(store, &sa.v, x), None, heads);
    let x = norm(store, &sa.norm, &add(&lin(store, &sa.out, &a), x));
    let h: Rows = lin(store, &layer.ffn_in, &x)
        .iter()
        .map(|r| r.iter().map(|&v| gelu(v)).collect())
        .collect();
    norm(store, &layer.ffn_norm, &add(&x, &lin(store, &layer.ffn_out, &h)))
}

/// Evaluates `decoder` on plain values. `levels` are `F̄3..F̄5` and
/// `per_pixel` is `F̄2`, each `h×w×C_h`.
pub fn reference_forward(
    decoder: &Decoder,
    store: &ParamStore,
    phrases: &Tensor,
    levels: [&Tensor; 3],
    per_pixel: &Tensor,
) -> Result<Vec<ReferenceLayer>> {
    let cfg = &decoder.cfg;
    let n = phrases.rows();
    let (h2, w2) = (per_pixel.shape()[0], per_pixel.shape()[1]);
    let pixel = rows(&per_pixel.reshaped(&[h2 * w2, cfg.hidden])?);

    let predict = |x: &Rows, visible: Option<Vec<Vec<bool>>>| -> ReferenceLayer {
        let normed = norm(store, &decoder.out_norm, x);
        let embed = if cfg.bare_inner_product {
            normed.clone()
        } else {
            mlp(store, &decoder.mask_embed, &normed)
        };
        let logits: Rows = embed
            .iter()
            .map(|e| pixel.iter().map(|p| e.iter().zip(p).map(|(a, b)| a * b).sum()).collect())
            .collect();
        ReferenceLayer {
            features: to_tensor(x),
            mask_logits: to_tensor(&logits),
            phrase_logits: to_tensor(&lin(store, &decoder.phrase_head, &normed[..n].to_vec())),
            object_logits: to_tensor(&lin(store, &decoder.object_head, &normed[n..].to_vec())),
            visible,
        }
    };

    let phrase_pos = rows(store.get(decoder.phrase_pos))[..n].to_vec();
    let object_pos = rows(store.get(decoder.object_pos));
    let pos: Rows = phrase_pos.iter().chain(&object_pos).cloned().collect();
    let mut x: Rows = rows(phrases).into_iter().chain(rows(store.get(decoder.object_init))).collect();
    let mut out = vec![predict(&x, None)];

    for (li, layer) in decoder.layers.iter().enumerate() {
        let s = scale_for_layer(li + 1);
        let level = levels[s];
        let (h, w) = (level.shape()[0], level.shape()[1]);
        let visible = match cfg.mask_mode {
            MaskMode::Masked => Some(visibility(&rows(&out[li].mask_logits), (h2, w2), (h, w))),
            MaskMode::AllVisible => None,
        };
        let q = mat(store, layer.w_q, &add(&x, &pos));
        let scale_row = store.get(decoder.level_embed).row(s).to_vec();
        let f = add_bias(
            &add(
                &rows(&level.reshaped(&[h * w, cfg.hidden])?),
                &rows(store.get(decoder.level_pos[s])),
            ),
            &scale_row,
        );
        let a = attention(
            &q,
            &mat(store, layer.w_k, &f),
            &mat(store, layer.w_v, &f),
            visible.as_ref(),
            cfg.heads,
        );
        let cross = norm(store, &layer.cross_norm, &add(&lin(store, &layer.cross_out, &a), &x));
        x = tail(store, layer, &cross, &pos, cfg.heads);
        out.push(predict(&x, visible.or(Some(vec![vec![true; h * w]; x.len()]))));
    }
    Ok(out)
}
