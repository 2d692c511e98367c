//! Scoring networks trained on real data only: a background classifier whose
//! penultimate layer supplies features for the Fréchet distance, and a
//! contrastive image/caption dual encoder for alignment.

use super::{conv, linear, Bound, Init, Manifest, ModelParams, Vocabulary};
use super::{IMAGE_CHANNELS, IMAGE_SHAPE, PROMPT_LEN};
use crate::{Graph, NodeId, Result, Tensor};

pub const CATEGORY_COUNT: usize = 5;
/// Width of the classifier's penultimate features.
pub const FEATURE_DIM: usize = 32;
/// Width of the shared image/caption embedding space.
pub const EMBED_DIM: usize = 32;

const VOCAB_SIZE: usize = 24;

fn declare_cnn(m: &mut Manifest, prefix: &str) {
    m.conv(&format!("{prefix}.conv1"), 16, IMAGE_CHANNELS, 3);
    m.conv(&format!("{prefix}.conv2"), 32, 16, 3);
    m.conv(&format!("{prefix}.conv3"), 32, 32, 3);
}

pub(super) fn declare_classifier(m: &mut Manifest) {
    declare_cnn(m, "cls");
    m.linear("cls.fc1", FEATURE_DIM, 32);
    m.linear("cls.fc2", CATEGORY_COUNT, FEATURE_DIM);
}

pub(super) fn declare_dual(m: &mut Manifest) {
    declare_cnn(m, "img");
    m.linear("img.fc", EMBED_DIM, 32);
    m.push("txt.embed", &[VOCAB_SIZE, EMBED_DIM], Init::Embedding);
    m.linear("txt.fc", EMBED_DIM, EMBED_DIM);
}

/// Three stride-2 convs and a global mean: `[B, 3, 32, 32] → [B, 32]`.
fn cnn(g: &mut Graph, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for layer in ["conv1", "conv2", "conv3"] {
        h = conv(g, p, &format!("{prefix}.{layer}"), h, 2, 1)?;
        h = g.silu(h)?;
    }
    let b = g.value(h).shape()[0];
    let c = g.value(h).shape()[1];
    let h = g.reshape(h, &[b, c, 16])?;
    let h = g.mean(h, -1)?;
    g.reshape(h, &[b, c])
}

/// Returns `(features [B, 32], logits [B, 5])`.
pub fn classifier_graph(g: &mut Graph, p: &Bound, x: NodeId) -> Result<(NodeId, NodeId)> {
    let h = cnn(g, p, "cls", x)?;
    let f = linear(g, p, "cls.fc1", h)?;
    let f = g.silu(f)?;
    let logits = linear(g, p, "cls.fc2", f)?;
    Ok((f, logits))
}

/// Unit-norm image embeddings `[B, 32]`.
pub fn dual_image_graph(g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
    let h = cnn(g, p, "img", x)?;
    let e = linear(g, p, "img.fc", h)?;
    g.l2_normalize(e)
}

/// Unit-norm caption embeddings from `[B·N]` padded ids: mean of token
/// embeddings, then a linear map.
pub fn dual_text_graph(g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<NodeId> {
    let b = ids.len() / PROMPT_LEN;
    let table = p.get("txt.embed")?;
    let e = g.embed_lookup(table, ids)?;
    let e = g.reshape(e, &[b, PROMPT_LEN, EMBED_DIM])?;
    let e = g.permute(e, &[0, 2, 1])?;
    let e = g.mean(e, -1)?;
    let e = g.reshape(e, &[b, EMBED_DIM])?;
    let e = linear(g, p, "txt.fc", e)?;
    g.l2_normalize(e)
}

fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * 32 * 32);
    for img in images {
        super::expect_shape("evaluation image", img, &IMAGE_SHAPE)?;
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&IMAGE_SHAPE);
    Tensor::new(shape, data)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// Penultimate classifier features and predicted category per image.
pub fn classifier_features(params: &ModelParams, images: &[&Tensor]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut feats = Vec::with_capacity(images.len());
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, &["cls."]);
        let x = g.input(stack_images(chunk)?);
        let (f, logits) = classifier_graph(&mut g, &p, x)?;
        feats.extend(rows(g.value(f)));
        for row in rows(g.value(logits)) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            preds.push(arg);
        }
    }
    Ok((feats, preds))
}

pub fn dual_image_embedding(params: &ModelParams, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, &["img."]);
        let x = g.input(stack_images(chunk)?);
        let e = dual_image_graph(&mut g, &p, x)?;
        out.extend(rows(g.value(e)));
    }
    Ok(out)
}

pub fn dual_text_embedding(params: &ModelParams, vocab: &Vocabulary, captions: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut ids = Vec::with_capacity(captions.len() * PROMPT_LEN);
    for c in captions {
        ids.extend(vocab.tokenize(c)?);
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, &["txt."]);
    let e = dual_text_graph(&mut g, &p, &ids)?;
    Ok(rows(g.value(e)))
}
