//! Toy latent-diffusion networks: a convolutional autoencoder, the token
//! embedder, the conditional UNet with recorded cross-attention, and the
//! two small networks used only for evaluation.
//!
//! Every model is a flat, name-sorted [`ModelParams`] map whose names and
//! shapes must match the architecture manifest of its [`ModelKind`].

mod autoencoder;
mod evalnets;
mod unet;
mod vocab;

pub use autoencoder::{decode, decode_graph, encode, encode_batch, encode_graph};
pub use evalnets::{
    classifier_features, classifier_graph, dual_image_embedding, dual_image_graph,
    dual_text_embedding, dual_text_graph, CATEGORY_COUNT, EMBED_DIM, FEATURE_DIM,
};
pub use unet::{
    embed_tokens, text_graph, timestep_embedding, unet_forward, unet_graph, AttentionRecord,
    UnetOutput,
};
pub use vocab::{Vocabulary, COLORS, PROMPT_LEN, SHAPES, CATEGORIES};

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use crate::{Error, Graph, NodeId, Result, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 8;
pub const TEXT_DIM: usize = 16;
pub const UNET_WIDTH: usize = 32;
pub const TIME_DIM: usize = 64;
pub const HEADS: usize = 2;
pub const NORM_GROUPS: usize = 8;
pub const NORM_EPS: f64 = 1e-5;

pub const IMAGE_SHAPE: [usize; 3] = [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
pub const LATENT_SHAPE: [usize; 3] = [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Autoencoder,
    /// Autoencoder + UNet + token table + latent scale.
    Ldm,
    Classifier,
    DualEncoder,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Ldm => "ldm",
            ModelKind::Classifier => "classifier",
            ModelKind::DualEncoder => "dual-encoder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            ModelKind::Autoencoder,
            ModelKind::Ldm,
            ModelKind::Classifier,
            ModelKind::DualEncoder,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn manifest(self) -> Manifest {
        let mut m = Manifest::default();
        match self {
            ModelKind::Autoencoder => autoencoder::declare(&mut m),
            ModelKind::Ldm => {
                autoencoder::declare(&mut m);
                unet::declare(&mut m);
                m.push("latent.scale", &[1], Init::Ones);
            }
            ModelKind::Classifier => evalnets::declare_classifier(&mut m),
            ModelKind::DualEncoder => evalnets::declare_dual(&mut m),
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
    /// `N(0, 0.02²)`.
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter names and shapes for one architecture.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub(crate) fn push(&mut self, name: &str, shape: &[usize], init: Init) {
        self.entries.push(ManifestEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
        });
    }

    pub(crate) fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = cin * k * k;
        self.push(&format!("{name}.weight"), &[cout, cin, k, k], Init::KaimingUniform { fan_in });
        self.push(&format!("{name}.bias"), &[cout], Init::Zeros);
    }

    pub(crate) fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.push(&format!("{name}.weight"), &[out, inp], Init::KaimingUniform { fan_in: inp });
        self.push(&format!("{name}.bias"), &[out], Init::Zeros);
    }

    pub(crate) fn norm(&mut self, name: &str, c: usize) {
        self.push(&format!("{name}.gamma"), &[c], Init::Ones);
        self.push(&format!("{name}.beta"), &[c], Init::Zeros);
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Canonical text form, one `name dims` line per entry sorted by name.
    pub fn canonical(&self) -> String {
        let mut lines: Vec<String> = self
            .entries
            .iter()
            .map(|e| {
                let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
                format!("{} {}", e.name, dims.join("x"))
            })
            .collect();
        lines.sort();
        lines.join("\n")
    }

    /// First eight bytes (little-endian) of SHA-256 over [`Self::canonical`].
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(kind: ModelKind, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, 0.02).unwrap();
        let tensors = kind
            .manifest()
            .entries
            .into_iter()
            .map(|e| {
                let t = match e.init {
                    Init::KaimingUniform { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(&e.shape, |_| rng.gen_range(-bound..bound))
                    }
                    Init::Zeros => Tensor::zeros(&e.shape),
                    Init::Ones => Tensor::full(&e.shape, 1.0),
                    Init::Embedding => Tensor::from_fn(&e.shape, |_| normal.sample(rng)),
                };
                (e.name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks names and shapes against the manifest of `kind`.
    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let manifest = kind.manifest();
        for e in manifest.entries() {
            match self.tensors.get(&e.name) {
                None => {
                    return Err(Error::Model(format!(
                        "{} parameters lack tensor {}",
                        kind.name(),
                        e.name
                    )))
                }
                Some(t) if t.shape() != e.shape.as_slice() => {
                    return Err(Error::Model(format!(
                        "shape mismatch for {}: expected {:?}, found {:?}",
                        e.name,
                        e.shape,
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| manifest.get(k).is_none()) {
            return Err(Error::Model(format!(
                "tensor {extra} is not part of the {} architecture",
                kind.name()
            )));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts the tensors selected by `prefixes` into `g` as root nodes.
    pub fn bind(&self, g: &mut Graph, prefixes: &[&str]) -> Bound {
        let ids = self
            .tensors
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), g.input(v.clone())))
            .collect();
        Bound { ids }
    }
}

/// Graph node ids of bound parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.ids.values().copied().collect()
    }
}

pub(crate) fn conv(g: &mut Graph, p: &Bound, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, stride, pad)
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.linear(x, w, b)
}

pub(crate) fn norm(g: &mut Graph, p: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.group_norm(x, gamma, beta, NORM_GROUPS, NORM_EPS)
}

/// Prepends a batch axis of extent 1.
pub(crate) fn batched_shape(shape: &[usize]) -> Vec<usize> {
    std::iter::once(1).chain(shape.iter().copied()).collect()
}

pub(crate) fn expect_shape(what: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::Model(format!(
            "{what}: expected shape {want:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}
