//! Conditional noise predictor with two cross-attention sites.
//!
//! Layout: `conv_in → res(8×8) → avgpool → res → res → attn(4×4) → upsample
//! → concat skip → res → attn(8×8) → norm/silu/conv_out`. Both attention
//! blocks sit late in the network, which keeps the per-output reverse
//! passes used for attribution short.

use super::{batched_shape, conv, expect_shape, linear, norm, Bound, Init, Manifest, ModelParams};
use super::{HEADS, LATENT_CHANNELS, LATENT_SHAPE, PROMPT_LEN, TEXT_DIM, TIME_DIM, UNET_WIDTH};
use crate::{Error, Graph, NodeId, Result, Tensor};

/// Width of the raw sinusoidal timestep code.
const TIME_CODE: usize = 32;
const VOCAB_SIZE: usize = 24;

/// `(layer_id, prefix, channels)` in forward order.
const ATTENTION_SITES: [(usize, &str, usize); 2] =
    [(0, "unet.attn_mid", 2 * UNET_WIDTH), (1, "unet.attn_up", UNET_WIDTH)];

pub(super) fn declare(m: &mut Manifest) {
    m.push("text.embed", &[VOCAB_SIZE, TEXT_DIM], Init::Embedding);
    m.linear("unet.time.l1", TIME_DIM, TIME_CODE);
    m.linear("unet.time.l2", TIME_DIM, TIME_DIM);
    m.conv("unet.conv_in", UNET_WIDTH, LATENT_CHANNELS, 3);
    declare_res(m, "unet.down0", UNET_WIDTH, UNET_WIDTH);
    declare_res(m, "unet.mid0", UNET_WIDTH, 2 * UNET_WIDTH);
    declare_res(m, "unet.mid1", 2 * UNET_WIDTH, 2 * UNET_WIDTH);
    declare_res(m, "unet.up0", 3 * UNET_WIDTH, UNET_WIDTH);
    for (_, prefix, c) in ATTENTION_SITES {
        m.norm(&format!("{prefix}.norm"), c);
        m.conv(&format!("{prefix}.q"), c, c, 1);
        m.linear(&format!("{prefix}.k"), c, TEXT_DIM);
        m.linear(&format!("{prefix}.v"), c, TEXT_DIM);
        m.conv(&format!("{prefix}.out"), c, c, 1);
    }
    m.norm("unet.out_norm", UNET_WIDTH);
    m.conv("unet.conv_out", LATENT_CHANNELS, UNET_WIDTH, 3);
}

fn declare_res(m: &mut Manifest, prefix: &str, cin: usize, cout: usize) {
    m.norm(&format!("{prefix}.norm1"), cin);
    m.conv(&format!("{prefix}.conv1"), cout, cin, 3);
    m.linear(&format!("{prefix}.temb"), cout, TIME_DIM);
    m.norm(&format!("{prefix}.norm2"), cout);
    m.conv(&format!("{prefix}.conv2"), cout, cout, 3);
    if cin != cout {
        m.conv(&format!("{prefix}.skip"), cout, cin, 1);
    }
}

/// One cross-attention layer's post-softmax weights from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: usize,
    pub heads: usize,
    /// Side of the square spatial grid the layer attends from.
    pub grid: usize,
    pub tokens: usize,
    /// `[H, P², N]` for single-sample passes, `[B, H, P², N]` otherwise.
    pub weights: Tensor,
    pub weight_node: NodeId,
}

impl AttentionRecord {
    /// `W_A(h, p, n)` with `p = x·P + y` for the first batch element.
    pub fn weight(&self, h: usize, p: usize, n: usize) -> f64 {
        let pp = self.grid * self.grid;
        self.weights.data()[(h * pp + p) * self.tokens + n]
    }
}

#[derive(Clone, Debug)]
pub struct UnetOutput {
    /// `[B, 4, 8, 8]`.
    pub eps: NodeId,
    pub records: Vec<AttentionRecord>,
}

/// Sinusoidal code of width 32: sines then cosines over geometric
/// frequencies.
pub fn timestep_embedding(t: usize) -> Vec<f64> {
    let half = TIME_CODE / 2;
    let mut out = vec![0.0; TIME_CODE];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Looks up `[B·N]` ids and returns a `[B, N, d_txt]` node.
pub fn text_graph(g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<NodeId> {
    if ids.is_empty() || ids.len() % PROMPT_LEN != 0 {
        return Err(Error::Model(format!(
            "token id count {} is not a positive multiple of {PROMPT_LEN}",
            ids.len()
        )));
    }
    let table = p.get("text.embed")?;
    let e = g.embed_lookup(table, ids)?;
    g.reshape(e, &[ids.len() / PROMPT_LEN, PROMPT_LEN, TEXT_DIM])
}

/// Row `i` of the result is the table row for `ids[i]`.
pub fn embed_tokens(params: &ModelParams, ids: &[usize]) -> Result<Tensor> {
    if ids.len() != PROMPT_LEN {
        return Err(Error::Model(format!(
            "expected {PROMPT_LEN} token ids, got {}",
            ids.len()
        )));
    }
    let table = params.get("text.embed")?;
    let v = table.shape()[0];
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Model(format!("token id {bad} outside vocabulary of {v}")));
    }
    let mut data = Vec::with_capacity(PROMPT_LEN * TEXT_DIM);
    for &i in ids {
        data.extend_from_slice(&table.data()[i * TEXT_DIM..(i + 1) * TEXT_DIM]);
    }
    Tensor::new(vec![PROMPT_LEN, TEXT_DIM], data)
}

fn res_block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: NodeId,
    temb: NodeId,
    cin: usize,
    cout: usize,
) -> Result<NodeId> {
    let h = norm(g, p, &format!("{prefix}.norm1"), x)?;
    let h = g.silu(h)?;
    let h = conv(g, p, &format!("{prefix}.conv1"), h, 1, 1)?;
    let e = linear(g, p, &format!("{prefix}.temb"), temb)?;
    let h = g.bias_add(h, e)?;
    let h = norm(g, p, &format!("{prefix}.norm2"), h)?;
    let h = g.silu(h)?;
    let h = conv(g, p, &format!("{prefix}.conv2"), h, 1, 1)?;
    let skip = if cin != cout {
        conv(g, p, &format!("{prefix}.skip"), x, 1, 0)?
    } else {
        x
    };
    g.add(h, skip)
}

/// Multi-head cross-attention from `x [B, C, P, P]` to `text [B, N, d_txt]`.
fn cross_attention(
    g: &mut Graph,
    p: &Bound,
    site: (usize, &str, usize),
    x: NodeId,
    text: NodeId,
) -> Result<(NodeId, AttentionRecord)> {
    let (layer_id, prefix, c) = site;
    let shape = g.value(x).shape().to_vec();
    let (b, grid) = (shape[0], shape[2]);
    let (hw, dh) = (grid * grid, c / HEADS);
    let n = g.value(text).shape()[1];

    let h = norm(g, p, &format!("{prefix}.norm"), x)?;
    let q = conv(g, p, &format!("{prefix}.q"), h, 1, 0)?;
    let q = g.reshape(q, &[b, HEADS, dh, hw])?;
    let q = g.permute(q, &[0, 1, 3, 2])?;

    let k = linear(g, p, &format!("{prefix}.k"), text)?;
    let k = g.reshape(k, &[b, n, HEADS, dh])?;
    let k = g.permute(k, &[0, 2, 3, 1])?;
    let v = linear(g, p, &format!("{prefix}.v"), text)?;
    let v = g.reshape(v, &[b, n, HEADS, dh])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;

    let scores = g.matmul(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores, -1)?;

    let o = g.matmul(weights, v)?;
    let o = g.permute(o, &[0, 1, 3, 2])?;
    let o = g.reshape(o, &[b, c, grid, grid])?;
    let o = conv(g, p, &format!("{prefix}.out"), o, 1, 0)?;
    let out = g.add(o, x)?;

    let w = g.value(weights).clone();
    let w = if b == 1 { w.reshape(&[HEADS, hw, n])? } else { w };
    let record = AttentionRecord {
        layer_id,
        heads: HEADS,
        grid,
        tokens: n,
        weights: w,
        weight_node: weights,
    };
    Ok((out, record))
}

/// Batched denoiser: `z [B, 4, 8, 8]`, one timestep per sample, `text
/// [B, N, d_txt]`.
pub fn unet_graph(g: &mut Graph, p: &Bound, z: NodeId, t: &[usize], text: NodeId) -> Result<UnetOutput> {
    let b = g.value(z).shape()[0];
    if t.len() != b {
        return Err(Error::Model(format!("{} timesteps for batch of {b}", t.len())));
    }
    let code: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti)).collect();
    let code = g.input(Tensor::new(vec![b, TIME_CODE], code)?);
    let temb = linear(g, p, "unet.time.l1", code)?;
    let temb = g.silu(temb)?;
    let temb = linear(g, p, "unet.time.l2", temb)?;
    let temb = g.silu(temb)?;

    let w = UNET_WIDTH;
    let h = conv(g, p, "unet.conv_in", z, 1, 1)?;
    let skip = res_block(g, p, "unet.down0", h, temb, w, w)?;
    let h = g.downsample_avg2x(skip)?;
    let h = res_block(g, p, "unet.mid0", h, temb, w, 2 * w)?;
    let h = res_block(g, p, "unet.mid1", h, temb, 2 * w, 2 * w)?;
    let (h, rec_mid) = cross_attention(g, p, ATTENTION_SITES[0], h, text)?;
    let h = g.upsample_nearest2x(h)?;
    let h = g.concat(&[h, skip], 1)?;
    let h = res_block(g, p, "unet.up0", h, temb, 3 * w, w)?;
    let (h, rec_up) = cross_attention(g, p, ATTENTION_SITES[1], h, text)?;
    let h = norm(g, p, "unet.out_norm", h)?;
    let h = g.silu(h)?;
    let eps = conv(g, p, "unet.conv_out", h, 1, 1)?;
    Ok(UnetOutput {
        eps,
        records: vec![rec_mid, rec_up],
    })
}

/// Single-sample forward pass. Returns the `[4, 8, 8]` noise-prediction node
/// and one record per attention layer.
pub fn unet_forward(
    graph: &mut Graph,
    params: &ModelParams,
    z_t: &Tensor,
    t: usize,
    text: &Tensor,
) -> Result<(NodeId, Vec<AttentionRecord>)> {
    expect_shape("unet_forward latent", z_t, &LATENT_SHAPE)?;
    expect_shape("unet_forward text", text, &[PROMPT_LEN, TEXT_DIM])?;
    if !text.is_finite() || !z_t.is_finite() {
        return Err(Error::Model("unet_forward: non-finite input".into()));
    }
    let bound = params.bind(graph, &["unet."]);
    let z = graph.input(z_t.clone().reshape(&batched_shape(&LATENT_SHAPE))?);
    let txt = graph.input(text.clone().reshape(&[1, PROMPT_LEN, TEXT_DIM])?);
    let out = unet_graph(graph, &bound, z, &[t], txt)?;
    let eps = graph.reshape(out.eps, &LATENT_SHAPE)?;
    Ok((eps, out.records))
}

#[cfg(test)]
mod tests {
    use super::super::ModelKind;
    use super::*;
    use crate::rng;

    fn setup() -> (ModelParams, Tensor, Tensor) {
        let p = ModelParams::init(ModelKind::Ldm, &mut rng::stream(0, "params"));
        let z = rng::normal_tensor(&mut rng::stream(0, "z"), &LATENT_SHAPE);
        let ids = super::super::Vocabulary::standard()
            .tokenize("a red circle in forest")
            .unwrap();
        let text = embed_tokens(&p, &ids).unwrap();
        (p, z, text)
    }

    #[test]
    fn records_follow_architecture() {
        let (p, z, text) = setup();
        let mut g = Graph::new();
        let (eps, recs) = unet_forward(&mut g, &p, &z, 50, &text).unwrap();
        assert_eq!(g.value(eps).shape(), &LATENT_SHAPE);
        let grids: Vec<usize> = recs.iter().map(|r| r.grid).collect();
        assert_eq!(grids, vec![4, 8]);
        for r in &recs {
            assert_eq!(r.weights.shape(), &[HEADS, r.grid * r.grid, PROMPT_LEN]);
            assert!(r.weights.min() >= 0.0);
            for row in r.weights.data().chunks(PROMPT_LEN) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(g.contains(r.weight_node));
        }
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let (p, z, text) = setup();
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let (e1, _) = unet_forward(&mut g1, &p, &z, 7, &text).unwrap();
        let (e2, _) = unet_forward(&mut g2, &p, &z, 7, &text).unwrap();
        assert_eq!(g1.value(e1), g2.value(e2));
    }

    #[test]
    fn bad_inputs_rejected() {
        let (p, z, text) = setup();
        let mut g = Graph::new();
        assert!(unet_forward(&mut g, &p, &Tensor::zeros(&[4, 8, 7]), 1, &text).is_err());
        assert!(unet_forward(&mut g, &p, &z, 1, &Tensor::zeros(&[7, 16])).is_err());
        assert!(embed_tokens(&p, &[0, 1, 2, 3, 4, 5, 6, 99]).is_err());
    }

    #[test]
    fn embedding_rows_are_table_rows() {
        let (p, _, _) = setup();
        let e = embed_tokens(&p, &[3, 3, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(e.data()[..TEXT_DIM], e.data()[TEXT_DIM..2 * TEXT_DIM]);
        let table = p.get("text.embed").unwrap();
        assert_eq!(&e.data()[..TEXT_DIM], &table.data()[3 * TEXT_DIM..4 * TEXT_DIM]);
    }

    #[test]
    fn table_gradient_touches_only_used_rows() {
        let (p, _, _) = setup();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, &["text."]);
        let ids = [3, 6, 1, 0, 0, 0, 0, 0];
        let e = text_graph(&mut g, &bound, &ids).unwrap();
        let sq = g.mul(e, e).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let table = bound.get("text.embed").unwrap();
        let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        let gt = grads.get(table).unwrap();
        for row in 0..VOCAB_SIZE {
            let used = ids.contains(&row);
            let norm: f64 = gt.data()[row * TEXT_DIM..(row + 1) * TEXT_DIM]
                .iter()
                .map(|v| v.abs())
                .sum();
            assert_eq!(norm > 0.0, used, "row {row}");
        }
    }
}
