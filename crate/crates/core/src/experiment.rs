//! End-to-end study on the synthetic scenes: train every model, measure the
//! model quality gates, then compare the masked pipeline against two
//! unmasked img2img baselines over several sampler seeds.
//!
//! Data: training set seed 0, held-out real set seed 1 (quality gates and
//! real feature statistics), reference set seed 2. For each sampler seed and
//! category the reference is a held-out scene of that category and the
//! prompt keeps its background but changes both subject color and shape.

use std::time::{Duration, Instant};

use crate::datasynth::{synthesize, Background, Sample};
use crate::evalmetrics::{alignment_from_embeddings, feature_stats, frechet_distance, FeatureStats};
use crate::nn::{self, COLORS, SHAPES};
use crate::pipeline::{generate, PipelineConfig};
use crate::training::{train_autoencoder, train_denoiser, train_eval_models, Checkpoint, TrainConfig, TrainLog};
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub train_count: usize,
    pub heldout_count: usize,
    pub reference_count: usize,
    pub train_seed: u64,
    pub heldout_seed: u64,
    pub reference_seed: u64,
    pub autoencoder: TrainConfig,
    pub denoiser: TrainConfig,
    pub eval_models: TrainConfig,
    pub sampler_seeds: Vec<u64>,
    pub masked: PipelineConfig,
    pub high_strength: f64,
    pub low_strength: f64,
    /// Images of the held-out set used for the reconstruction gate.
    pub mae_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_count: 2000,
            heldout_count: 400,
            reference_count: 50,
            train_seed: 0,
            heldout_seed: 1,
            reference_seed: 2,
            autoencoder: TrainConfig::autoencoder(),
            denoiser: TrainConfig::denoiser(),
            eval_models: TrainConfig::eval_models(),
            sampler_seeds: (0..10).collect(),
            masked: PipelineConfig::default(),
            high_strength: 0.9,
            low_strength: 0.5,
            mae_count: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub autoencoder: Checkpoint,
    pub ldm: Checkpoint,
    pub classifier: Checkpoint,
    pub dual: Checkpoint,
    pub logs: Vec<(&'static str, TrainLog)>,
    pub train_time: Duration,
}

pub struct Datasets {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    pub references: Vec<Sample>,
}

pub fn datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    Ok(Datasets {
        train: synthesize(cfg.train_count, cfg.train_seed)?,
        heldout: synthesize(cfg.heldout_count, cfg.heldout_seed)?,
        references: synthesize(cfg.reference_count, cfg.reference_seed)?,
    })
}

pub fn train_all(train: &[Sample], cfg: &ExperimentConfig) -> Result<TrainedModels> {
    let started = Instant::now();
    let (autoencoder, ae_log) = train_autoencoder(train, &cfg.autoencoder)?;
    let (ldm, den_log) = train_denoiser(train, &autoencoder, &cfg.denoiser)?;
    let em = train_eval_models(train, &cfg.eval_models)?;
    Ok(TrainedModels {
        autoencoder,
        ldm,
        classifier: em.classifier,
        dual: em.dual,
        logs: vec![
            ("autoencoder", ae_log),
            ("denoiser", den_log),
            ("classifier", em.classifier_log),
            ("dual-encoder", em.dual_log),
        ],
        train_time: started.elapsed(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityGates {
    pub reconstruction_mae: f64,
    pub classifier_accuracy: f64,
    pub dual_ranking: f64,
}

/// Mean absolute per-pixel error of `decode(encode(x))`.
pub fn reconstruction_mae(ae: &Checkpoint, images: &[&Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let back = nn::decode(&ae.params, &nn::encode(&ae.params, img)?)?;
        total += back.zip_map(img, |a, b| (a - b).abs())?.sum() / img.numel() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Fraction of held-out images whose own caption scores a higher cosine than
/// a mismatched caption (the next image in order with a different caption).
pub fn dual_ranking(dual: &Checkpoint, samples: &[Sample]) -> Result<f64> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let ie = nn::dual_image_embedding(&dual.params, &images)?;
    let te = nn::dual_text_embedding(&dual.params, &dual.vocab, &captions)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = samples.len();
    let (mut wins, mut pairs) = (0usize, 0usize);
    for i in 0..n {
        let Some(j) = (1..n).map(|o| (i + o) % n).find(|&j| captions[j] != captions[i]) else {
            continue;
        };
        pairs += 1;
        if dot(&ie[i], &te[i]) > dot(&ie[i], &te[j]) {
            wins += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Eval("no mismatched caption pairs".into()));
    }
    Ok(wins as f64 / pairs as f64)
}

pub fn quality_gates(models: &TrainedModels, heldout: &[Sample], mae_count: usize) -> Result<QualityGates> {
    let images: Vec<&Tensor> = heldout.iter().map(|s| &s.image).collect();
    let reconstruction_mae = reconstruction_mae(&models.autoencoder, &images[..mae_count.min(images.len())])?;
    let (_, preds) = nn::classifier_features(&models.classifier.params, &images)?;
    let correct = preds.iter().zip(heldout).filter(|(p, s)| **p == s.category.index()).count();
    Ok(QualityGates {
        reconstruction_mae,
        classifier_accuracy: correct as f64 / heldout.len() as f64,
        dual_ranking: dual_ranking(&models.dual, heldout)?,
    })
}

/// Prompt for a reference: same background, next color and shape.
pub fn edit_prompt(reference: &Sample, seed: u64) -> Result<String> {
    let (color, shape, bg) = crate::datasynth::parse_caption(&reference.caption)?;
    let c = COLORS[(color.index() + 1 + (seed % 2) as usize) % COLORS.len()];
    let s = SHAPES[(shape.index() + 1 + ((seed / 2) % 2) as usize) % SHAPES.len()];
    Ok(format!("a {c} {s} in {}", bg.word()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Masked,
    HighStrength,
    LowStrength,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub seed: u64,
    pub category: Background,
    pub method: Method,
    pub prompt: String,
    pub image: Tensor,
}

/// Mean over categories of the per-category scores for one method and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodScore {
    pub fid: f64,
    pub alignment: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub masked: MethodScore,
    pub high: MethodScore,
    pub low: MethodScore,
}

impl SeedOutcome {
    pub fn masked_beats_high_fid(&self) -> bool {
        self.masked.fid < self.high.fid
    }

    pub fn masked_matches_low_alignment(&self) -> bool {
        self.masked.alignment >= self.low.alignment
    }
}

pub struct Comparison {
    pub outcomes: Vec<SeedOutcome>,
    pub images: Vec<Generated>,
    pub generation_time: Duration,
}

pub fn real_stats(models: &TrainedModels, heldout: &[Sample]) -> Result<Vec<FeatureStats>> {
    Background::ALL
        .iter()
        .map(|&cat| {
            let imgs: Vec<&Tensor> = heldout.iter().filter(|s| s.category == cat).map(|s| &s.image).collect();
            feature_stats(&imgs, &models.classifier)
        })
        .collect()
}

fn score(models: &TrainedModels, real: &[FeatureStats], images: &[&Generated]) -> Result<MethodScore> {
    let (mut fid, mut align) = (0.0, 0.0);
    for g in images {
        let stats = feature_stats(&[&g.image], &models.classifier)?;
        fid += frechet_distance(&stats, &real[g.category.index()])?;
        let ie = nn::dual_image_embedding(&models.dual.params, &[&g.image])?;
        let te = nn::dual_text_embedding(&models.dual.params, &models.dual.vocab, &[g.prompt.as_str()])?;
        align += alignment_from_embeddings(&ie[0], &te[0])?;
    }
    let n = images.len() as f64;
    Ok(MethodScore {
        fid: fid / n,
        alignment: align / n,
    })
}

/// Generates one image per (seed, category, method) and scores each seed.
pub fn compare(models: &TrainedModels, data: &Datasets, cfg: &ExperimentConfig) -> Result<Comparison> {
    let started = Instant::now();
    let real = real_stats(models, &data.heldout)?;
    let mut images = Vec::new();
    let mut outcomes = Vec::new();
    for &seed in &cfg.sampler_seeds {
        let mut per_seed = Vec::new();
        for &cat in Background::ALL {
            let refs: Vec<&Sample> = data.references.iter().filter(|s| s.category == cat).collect();
            if refs.is_empty() {
                return Err(Error::Eval(format!("no reference image for {}", cat.word())));
            }
            let reference = refs[seed as usize % refs.len()];
            let prompt = edit_prompt(reference, seed)?;
            let runs = [
                (Method::Masked, PipelineConfig { seed, ..cfg.masked.clone() }),
                (Method::HighStrength, PipelineConfig::img2img(cfg.high_strength, seed)),
                (Method::LowStrength, PipelineConfig::img2img(cfg.low_strength, seed)),
            ];
            for (method, pc) in runs {
                let run = generate(&models.ldm, &reference.image, None, &prompt, &pc)?;
                per_seed.push(Generated {
                    seed,
                    category: cat,
                    method,
                    prompt: prompt.clone(),
                    image: run.image,
                });
            }
        }
        let pick = |m: Method| -> Vec<&Generated> { per_seed.iter().filter(|g| g.method == m).collect() };
        let outcome = SeedOutcome {
            seed,
            masked: score(models, &real, &pick(Method::Masked))?,
            high: score(models, &real, &pick(Method::HighStrength))?,
            low: score(models, &real, &pick(Method::LowStrength))?,
        };
        log::info!("seed {seed}: {outcome:?}");
        outcomes.push(outcome);
        images.extend(per_seed);
    }
    Ok(Comparison {
        outcomes,
        images,
        generation_time: started.elapsed(),
    })
}
