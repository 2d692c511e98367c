//! `3×32×32 ↔ 4×8×8` convolutional autoencoder.

use super::{batched_shape, conv, expect_shape, Bound, Manifest, ModelParams};
use super::{IMAGE_CHANNELS, IMAGE_SHAPE, LATENT_CHANNELS, LATENT_SHAPE};
use crate::{Graph, NodeId, Result, Tensor};

const C1: usize = 16;
const C2: usize = 32;

pub(super) fn declare(m: &mut Manifest) {
    m.conv("enc.conv1", C1, IMAGE_CHANNELS, 3);
    m.conv("enc.conv2", C2, C1, 3);
    m.conv("enc.conv3", C2, C2, 3);
    m.conv("enc.out", LATENT_CHANNELS, C2, 1);
    m.conv("dec.in", C2, LATENT_CHANNELS, 3);
    m.conv("dec.conv1", C2, C2, 3);
    m.conv("dec.up1", C1, C2, 3);
    m.conv("dec.up2", C1, C1, 3);
    m.conv("dec.out", IMAGE_CHANNELS, C1, 3);
}

/// `[B, 3, 32, 32] → [B, 4, 8, 8]`, unscaled.
pub fn encode_graph(g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
    let h = conv(g, p, "enc.conv1", x, 2, 1)?;
    let h = g.silu(h)?;
    let h = conv(g, p, "enc.conv2", h, 2, 1)?;
    let h = g.silu(h)?;
    let h = conv(g, p, "enc.conv3", h, 1, 1)?;
    let h = g.silu(h)?;
    conv(g, p, "enc.out", h, 1, 0)
}

/// `[B, 4, 8, 8] → [B, 3, 32, 32]`, unclamped.
pub fn decode_graph(g: &mut Graph, p: &Bound, z: NodeId) -> Result<NodeId> {
    let h = conv(g, p, "dec.in", z, 1, 1)?;
    let h = g.silu(h)?;
    let h = conv(g, p, "dec.conv1", h, 1, 1)?;
    let h = g.silu(h)?;
    let h = g.upsample_nearest2x(h)?;
    let h = conv(g, p, "dec.up1", h, 1, 1)?;
    let h = g.silu(h)?;
    let h = g.upsample_nearest2x(h)?;
    let h = conv(g, p, "dec.up2", h, 1, 1)?;
    let h = g.silu(h)?;
    conv(g, p, "dec.out", h, 1, 1)
}

fn latent_scale(params: &ModelParams) -> f64 {
    params.get("latent.scale").map(|t| t.data()[0]).unwrap_or(1.0)
}

fn stack(items: &[Tensor], shape: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(items.len() * shape.iter().product::<usize>());
    for t in items {
        expect_shape("batch item", t, shape)?;
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

fn unstack(t: &Tensor, shape: &[usize]) -> Vec<Tensor> {
    let n: usize = shape.iter().product();
    t.data()
        .chunks(n)
        .map(|c| Tensor::new(shape.to_vec(), c.to_vec()).expect("chunk matches shape"))
        .collect()
}

/// Encodes images `[3, 32, 32]` in chunks, multiplying by `latent.scale`
/// when the parameters carry one.
pub fn encode_batch(params: &ModelParams, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let scale = latent_scale(params);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, &["enc."]);
        let x = g.input(stack(chunk, &IMAGE_SHAPE)?);
        let z = encode_graph(&mut g, &p, x)?;
        out.extend(unstack(&g.value(z).map(|v| v * scale), &LATENT_SHAPE));
    }
    Ok(out)
}

pub fn encode(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    expect_shape("encode input", image, &IMAGE_SHAPE)?;
    Ok(encode_batch(params, std::slice::from_ref(image))?.remove(0))
}

/// Inverse of [`encode`]; pixels are clamped to `[0, 1]`.
pub fn decode(params: &ModelParams, z: &Tensor) -> Result<Tensor> {
    expect_shape("decode input", z, &LATENT_SHAPE)?;
    let scale = latent_scale(params);
    let mut g = Graph::new();
    let p = params.bind(&mut g, &["dec."]);
    let zi = g.input(z.map(|v| v / scale).reshape(&batched_shape(&LATENT_SHAPE))?);
    let x = decode_graph(&mut g, &p, zi)?;
    g.value(x).map(|v| v.clamp(0.0, 1.0)).reshape(&IMAGE_SHAPE)
}

#[cfg(test)]
mod tests {
    use super::super::ModelKind;
    use super::*;
    use crate::rng;

    #[test]
    fn shapes_and_clamping() {
        let p = ModelParams::init(ModelKind::Autoencoder, &mut rng::stream(0, "params"));
        let img = Tensor::from_fn(&IMAGE_SHAPE, |i| (i % 7) as f64 / 7.0);
        let z = encode(&p, &img).unwrap();
        assert_eq!(z.shape(), &LATENT_SHAPE);
        let back = decode(&p, &z).unwrap();
        assert_eq!(back.shape(), &IMAGE_SHAPE);
        assert!(back.min() >= 0.0 && back.max() <= 1.0);
        let batch = encode_batch(&p, &[img.clone(), img]).unwrap();
        assert_eq!(batch[0], z);
        assert_eq!(batch[1], z);
    }

    #[test]
    fn latent_scale_is_applied_symmetrically() {
        let mut p = ModelParams::init(ModelKind::Autoencoder, &mut rng::stream(0, "params"));
        let img = Tensor::from_fn(&IMAGE_SHAPE, |i| (i % 5) as f64 / 5.0);
        let z1 = encode(&p, &img).unwrap();
        let d1 = decode(&p, &z1).unwrap();
        p.insert("latent.scale", Tensor::scalar(2.0));
        let z2 = encode(&p, &img).unwrap();
        for (a, b) in z2.data().iter().zip(z1.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        let d2 = decode(&p, &z2).unwrap();
        for (a, b) in d2.data().iter().zip(d1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
