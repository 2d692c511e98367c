//! Adam-based trainers for the autoencoder, the conditional denoiser and the
//! two evaluation networks, plus the checkpoint format they persist to.

mod checkpoint;

pub use checkpoint::{Checkpoint, MAGIC};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::datasynth::Sample;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::nn::{self, Bound, ModelKind, ModelParams, Vocabulary, IMAGE_SHAPE, LATENT_SHAPE};
use crate::rng::{self, Rng};
use crate::{Error, Graph, NodeId, Result, Tensor};

/// Fixed temperature of the dual encoder's contrastive logits.
pub const CONTRASTIVE_TEMPERATURE: f64 = 0.1;
/// Below this many images a warning is logged before autoencoder training.
pub const RECOMMENDED_MIN_IMAGES: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
}

impl TrainConfig {
    pub const BATCH: usize = 32;
    pub const AUTOENCODER_EPOCHS: usize = 30;
    pub const DENOISER_EPOCHS: usize = 60;
    pub const EVAL_EPOCHS: usize = 30;
    pub const AUTOENCODER_LR: f64 = 2e-3;
    pub const DENOISER_LR: f64 = 1e-3;
    pub const EVAL_LR: f64 = 2e-3;

    fn with(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size: Self::BATCH,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            dataset: None,
        }
    }

    pub fn autoencoder() -> Self {
        Self::with(Self::AUTOENCODER_EPOCHS, Self::AUTOENCODER_LR)
    }

    pub fn denoiser() -> Self {
        Self::with(Self::DENOISER_EPOCHS, Self::DENOISER_LR)
    }

    pub fn eval_models() -> Self {
        Self::with(Self::EVAL_EPOCHS, Self::EVAL_LR)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Training(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!(
                "epochs ({}) and batch size ({}) must be positive",
                self.epochs, self.batch_size
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and nonnegative", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} outside (0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("adam epsilon {} must be positive", self.eps));
        }
        Ok(())
    }
}

/// Textbook Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every named gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Training(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Training(format!(
                    "gradient shape {:?} does not match {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

impl TrainLog {
    /// `epoch<TAB>loss` lines, epochs counted from 1.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.epoch_loss.iter().enumerate() {
            let _ = writeln!(s, "{}\t{l:.6e}", i + 1);
        }
        s
    }
}

/// Shuffled mini-batch loop shared by all trainers. `batch_loss` builds the
/// scalar loss for a batch of sample indices inside a fresh graph.
fn fit<F>(
    what: &str,
    params: &mut ModelParams,
    trainable: &[&str],
    n: usize,
    cfg: &TrainConfig,
    mut batch_loss: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut Graph, &Bound, &[usize], &mut Rng) -> Result<NodeId>,
{
    cfg.validate()?;
    let mut adam = Adam::new(cfg);
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut noise = rng::stream(cfg.seed, "noise");
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, trainable);
            let loss = batch_loss(&mut g, &bound, batch, &mut noise)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training(format!("{what}: non-finite loss at epoch {epoch}")));
            }
            total += value * batch.len() as f64;
            let ids: Vec<(String, NodeId)> = bound.iter().map(|(k, v)| (k.clone(), *v)).collect();
            let wrt: Vec<NodeId> = ids.iter().map(|(_, id)| *id).collect();
            let mut grads = g.backward_wrt(loss, &Tensor::scalar(1.0), &wrt)?;
            let named: Vec<(String, Tensor)> = ids
                .into_iter()
                .map(|(k, id)| {
                    let t = grads.take(id).unwrap_or_else(|| Tensor::zeros(g.value(id).shape()));
                    (k, t)
                })
                .collect();
            adam.step(params, &named)?;
        }
        let mean = total / n as f64;
        log::info!("{what} epoch {epoch}\t{mean:.6e}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    Tensor::new(shape, data)
}

fn mse(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

pub fn train_autoencoder(data: &[Sample], cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Training("autoencoder: empty dataset".into()));
    }
    if data.len() < RECOMMENDED_MIN_IMAGES {
        log::warn!(
            "autoencoder: only {} images (at least {RECOMMENDED_MIN_IMAGES} recommended)",
            data.len()
        );
    }
    for s in data {
        nn_shape(&s.image, &IMAGE_SHAPE)?;
    }
    let mut params = ModelParams::init(ModelKind::Autoencoder, &mut rng::stream(cfg.seed, "params"));
    let log = fit("autoencoder", &mut params, &[], data.len(), cfg, |g, p, idx, _| {
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
        let x = g.input(stack(&imgs)?);
        let z = nn::encode_graph(g, p, x)?;
        let y = nn::decode_graph(g, p, z)?;
        mse(g, y, x)
    })?;
    Ok((
        Checkpoint::new(ModelKind::Autoencoder, params, None, Vocabulary::standard())?,
        log,
    ))
}

fn nn_shape(t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::Training(format!(
            "sample has shape {:?}, expected {want:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn tokenize_all(vocab: &Vocabulary, data: &[Sample]) -> Result<Vec<Vec<usize>>> {
    data.iter().map(|s| vocab.tokenize(&s.caption)).collect()
}

/// Trains the UNet and token table on frozen, cached autoencoder latents.
/// The latent scale (inverse standard deviation of all training latents) is
/// stored with the model.
pub fn train_denoiser(data: &[Sample], ae: &Checkpoint, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    ae.expect_kind(ModelKind::Autoencoder)?;
    if data.is_empty() {
        return Err(Error::Training("denoiser: empty dataset".into()));
    }
    let vocab = ae.vocab.clone();
    let schedule = NoiseSchedule::default();
    let images: Vec<Tensor> = data.iter().map(|s| s.image.clone()).collect();
    let raw = nn::encode_batch(&ae.params, &images)?;
    let count = (raw.len() * raw[0].numel()) as f64;
    let mean = raw.iter().map(Tensor::sum).sum::<f64>() / count;
    let var = raw
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / count;
    let scale = 1.0 / var.sqrt().max(1e-8);
    let latents: Vec<Tensor> = raw.iter().map(|z| z.map(|v| v * scale)).collect();
    let tokens = tokenize_all(&vocab, data)?;

    let mut params = ModelParams::init(ModelKind::Ldm, &mut rng::stream(cfg.seed, "params"));
    for (k, v) in ae.params.iter() {
        params.insert(k, v.clone());
    }
    params.insert("latent.scale", Tensor::scalar(scale));

    let steps = schedule.steps();
    let log = fit("denoiser", &mut params, &["unet.", "text."], data.len(), cfg, |g, p, idx, r| {
        let b = idx.len();
        let mut zt = Vec::with_capacity(b * 256);
        let mut eps = Vec::with_capacity(b * 256);
        let mut ts = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b * tokens[0].len());
        for &i in idx {
            let t = r.gen_range(0..steps);
            let e = rng::normal_tensor(r, &LATENT_SHAPE);
            zt.extend_from_slice(q_sample(&schedule, &latents[i], t, &e)?.data());
            eps.extend_from_slice(e.data());
            ts.push(t);
            ids.extend_from_slice(&tokens[i]);
        }
        let shape = vec![b, LATENT_SHAPE[0], LATENT_SHAPE[1], LATENT_SHAPE[2]];
        let z = g.input(Tensor::new(shape.clone(), zt)?);
        let target = g.input(Tensor::new(shape, eps)?);
        let text = nn::text_graph(g, p, &ids)?;
        let out = nn::unet_graph(g, p, z, &ts, text)?;
        mse(g, out.eps, target)
    })?;
    Ok((
        Checkpoint::new(ModelKind::Ldm, params, Some(schedule), vocab)?,
        log,
    ))
}

#[derive(Clone, Debug)]
pub struct EvalModels {
    pub classifier: Checkpoint,
    pub dual: Checkpoint,
    pub classifier_log: TrainLog,
    pub dual_log: TrainLog,
}

/// Trains the background classifier (cross-entropy) and the dual encoder
/// (symmetric contrastive loss at a fixed temperature). Captions repeated
/// inside a batch share their target mass instead of acting as negatives.
pub fn train_eval_models(data: &[Sample], cfg: &TrainConfig) -> Result<EvalModels> {
    let mut present: Vec<usize> = data.iter().map(|s| s.category.index()).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Training(format!(
            "evaluation models need at least 2 categories, found {}",
            present.len()
        )));
    }
    let vocab = Vocabulary::standard();
    let tokens = tokenize_all(&vocab, data)?;

    let mut cls = ModelParams::init(ModelKind::Classifier, &mut rng::stream(cfg.seed, "params"));
    let classifier_log = fit("classifier", &mut cls, &[], data.len(), cfg, |g, p, idx, _| {
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
        let x = g.input(stack(&imgs)?);
        let (_, logits) = nn::classifier_graph(g, p, x)?;
        let logp = g.log_softmax(logits, -1)?;
        let mut onehot = Tensor::zeros(&[idx.len(), nn::CATEGORY_COUNT]);
        for (row, &i) in idx.iter().enumerate() {
            onehot.set(&[row, data[i].category.index()], 1.0);
        }
        let y = g.input(onehot);
        let picked = g.mul(logp, y)?;
        let m = g.mean_all(picked)?;
        g.scale(m, -(nn::CATEGORY_COUNT as f64))
    })?;

    let mut dual = ModelParams::init(ModelKind::DualEncoder, &mut rng::stream(cfg.seed, "dual-params"));
    let dual_log = fit("dual-encoder", &mut dual, &[], data.len(), cfg, |g, p, idx, _| {
        let b = idx.len();
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
        let x = g.input(stack(&imgs)?);
        let ie = nn::dual_image_graph(g, p, x)?;
        let ids: Vec<usize> = idx.iter().flat_map(|&i| tokens[i].iter().copied()).collect();
        let te = nn::dual_text_graph(g, p, &ids)?;
        let tt = g.permute(te, &[1, 0])?;
        let sim = g.matmul(ie, tt)?;
        let logits = g.scale(sim, 1.0 / CONTRASTIVE_TEMPERATURE)?;
        let mut target = Tensor::zeros(&[b, b]);
        for r in 0..b {
            let same: Vec<usize> = (0..b).filter(|&c| data[idx[c]].caption == data[idx[r]].caption).collect();
            for &c in &same {
                target.set(&[r, c], 1.0 / same.len() as f64);
            }
        }
        let y = g.input(target);
        let rows = g.log_softmax(logits, -1)?;
        let cols = g.log_softmax(logits, 0)?;
        let a = g.mul(rows, y)?;
        let c = g.mul(cols, y)?;
        let both = g.add(a, c)?;
        let m = g.mean_all(both)?;
        g.scale(m, -(b as f64) / 2.0)
    })?;

    Ok(EvalModels {
        classifier: Checkpoint::new(ModelKind::Classifier, cls, None, vocab.clone())?,
        dual: Checkpoint::new(ModelKind::DualEncoder, dual, None, vocab)?,
        classifier_log,
        dual_log,
    })
}
