//! Masked img2img: forward-noise the reference latent, run the ancestral
//! sampler, and inside the selected timestep window keep only the latent
//! elements the prompt's subjects are attributed to, resetting the rest to
//! the (re-noised) reference.
//!
//! Timestep bookkeeping: levels are 0-based internally. A strength `s` starts
//! the sampler at level `round(s·T) − 1`; the step taken at level `k` is
//! reported as timestep `k + 1`, and the window `[t_lo, t_hi]` selects steps
//! with `t_lo·T ≤ k + 1 ≤ t_hi·T`.
//!
//! Random draws use three independent streams of the run seed: `init`
//! (initial forward noise), `sampler` (one draw per step above level 0) and
//! `ref` (one draw per blended step). Masking therefore never shifts the
//! sampler noise, and a run whose masks are all ones reproduces plain img2img.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::attribution::{attention_jacobian, importance_scores, subject_token_indices, ScoreMode};
use crate::diffusion::{q_sample, reverse_step, NoiseSchedule};
use crate::maskops::{self, BinaryMask, MaskParams, ScoreField};
use crate::nn::{self, ModelKind, COLORS, LATENT_SHAPE, SHAPES};
use crate::rng::{self, Rng};
use crate::training::Checkpoint;
use crate::{Error, Graph, Result, Tensor};

pub const DEFAULT_STRENGTH: f64 = 0.9;
pub const DEFAULT_WINDOW: (f64, f64) = (0.3, 0.8);

/// Noise level of the reference latent blended into the slot produced by
/// the step at level `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RefLevel {
    /// Level `k − 1`, the level of the latent it is blended into (the clean
    /// latent after the final step).
    #[default]
    Aligned,
    /// Level `k`, one step noisier than its destination.
    Paper,
}

impl FromStr for RefLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(RefLevel::Aligned),
            "paper" => Ok(RefLevel::Paper),
            other => Err(Error::Pipeline(format!(
                "unknown reference level '{other}' (expected aligned or paper)"
            ))),
        }
    }
}

impl RefLevel {
    pub fn name(self) -> &'static str {
        match self {
            RefLevel::Aligned => "aligned",
            RefLevel::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum LayerSelection {
    #[default]
    All,
    Only(Vec<usize>),
}

impl FromStr for LayerSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Pipeline(format!("invalid layer list '{s}'")))
            })
            .collect::<Result<Vec<_>>>()
            .map(LayerSelection::Only)
    }
}

impl std::fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Only(ids) => {
                let s: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

fn mode_name(m: ScoreMode) -> &'static str {
    match m {
        ScoreMode::Full => "full",
        ScoreMode::Diagonal => "diagonal",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub strength: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub quantile: f64,
    pub sigma: f64,
    pub blur_radius: usize,
    pub dilate_radius: usize,
    pub mode: ScoreMode,
    pub layers: LayerSelection,
    /// `None` selects the prompt's color and shape words; an empty list
    /// disables masking.
    pub subjects: Option<Vec<String>>,
    pub seed: u64,
    /// Replaces every stochastic draw with zeros.
    pub deterministic: bool,
    pub ref_level: RefLevel,
    /// `false` runs plain img2img.
    pub masking: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strength: DEFAULT_STRENGTH,
            t_lo: DEFAULT_WINDOW.0,
            t_hi: DEFAULT_WINDOW.1,
            quantile: maskops::DEFAULT_QUANTILE,
            sigma: maskops::DEFAULT_SIGMA,
            blur_radius: maskops::DEFAULT_BLUR_RADIUS,
            dilate_radius: maskops::DEFAULT_DILATE_RADIUS,
            mode: ScoreMode::Full,
            layers: LayerSelection::All,
            subjects: None,
            seed: 0,
            deterministic: false,
            ref_level: RefLevel::Aligned,
            masking: true,
        }
    }
}

impl PipelineConfig {
    /// Plain img2img at the given strength.
    pub fn img2img(strength: f64, seed: u64) -> Self {
        Self {
            strength,
            seed,
            masking: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Pipeline(m));
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return bad(format!("strength {} outside (0, 1]", self.strength));
        }
        if !(0.0 <= self.t_lo && self.t_lo <= self.t_hi && self.t_hi <= 1.0) {
            return bad(format!(
                "window [{}, {}] must satisfy 0 <= lo <= hi <= 1",
                self.t_lo, self.t_hi
            ));
        }
        if !(0.0..1.0).contains(&self.quantile) {
            return bad(format!("quantile {} outside [0, 1)", self.quantile));
        }
        Ok(())
    }

    /// Whether the step reported as timestep `t` (1-based) is masked.
    pub fn in_window(&self, t: usize, steps: usize) -> bool {
        let t = t as f64;
        let n = steps as f64;
        t >= self.t_lo * n && t <= self.t_hi * n
    }

    /// `key = value` lines accepted back by the command-line config parser.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strength = {}", self.strength);
        let _ = writeln!(s, "t_lo = {}", self.t_lo);
        let _ = writeln!(s, "t_hi = {}", self.t_hi);
        let _ = writeln!(s, "quantile = {}", self.quantile);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "blur_radius = {}", self.blur_radius);
        let _ = writeln!(s, "dilate_radius = {}", self.dilate_radius);
        let _ = writeln!(s, "mode = {}", mode_name(self.mode));
        let _ = writeln!(s, "layers = {}", self.layers);
        if let Some(subj) = &self.subjects {
            let _ = writeln!(s, "subjects = {}", subj.join(","));
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "ref_level = {}", self.ref_level.name());
        let _ = writeln!(s, "no_mask = {}", !self.masking);
        s
    }
}

/// Reference latent at level `t`, noised with a draw from `rng` (or
/// noiselessly when `rng` is `None`).
pub fn prepare_ref_latent(schedule: &NoiseSchedule, z_ref: &Tensor, t: usize, rng: Option<&mut Rng>) -> Result<Tensor> {
    let eps = match rng {
        Some(r) => rng::normal_tensor(r, z_ref.shape()),
        None => Tensor::zeros(z_ref.shape()),
    };
    q_sample(schedule, z_ref, t, &eps)
}

/// `mask ? denoised : reference`, elementwise.
pub fn blend(denoised: &Tensor, reference: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    if denoised.shape() != reference.shape() || denoised.shape() != mask.shape() {
        return Err(Error::Pipeline(format!(
            "blend shapes differ: {:?}, {:?}, mask {:?}",
            denoised.shape(),
            reference.shape(),
            mask.shape()
        )));
    }
    Ok(Tensor::from_fn(denoised.shape(), |i| {
        if mask.values().data()[i] == 1.0 {
            denoised.data()[i]
        } else {
            reference.data()[i]
        }
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerScore {
    pub layer_id: usize,
    pub subject_word: String,
    pub field: ScoreField,
    pub mask: BinaryMask,
}

/// Attribution products of one masked step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMasks {
    /// 1-based timestep.
    pub t: usize,
    pub scores: Vec<LayerScore>,
    pub final_mask: BinaryMask,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub image: Tensor,
    pub latent: Tensor,
    pub steps: Vec<StepMasks>,
    pub config: PipelineConfig,
    pub prompt: String,
    pub subjects: Vec<String>,
    pub elapsed: Duration,
    pub attribution_time: Duration,
}

impl RunArtifacts {
    /// Config echo, inputs and timings as `key = value` lines. Everything
    /// above the timing comment is reproducible.
    pub fn manifest_text(&self) -> String {
        let mut s = String::from("# run configuration\n");
        s.push_str(&self.config.echo());
        let _ = writeln!(s, "prompt = {}", self.prompt);
        let _ = writeln!(s, "resolved_subjects = {}", self.subjects.join(","));
        let _ = writeln!(s, "rng = {}", rng::ALGORITHM);
        let _ = writeln!(s, "masked_steps = {}", self.steps.len());
        let _ = writeln!(s, "# timing (not reproducible)");
        let _ = writeln!(s, "elapsed_s = {:.3}", self.elapsed.as_secs_f64());
        let _ = writeln!(s, "attribution_s = {:.3}", self.attribution_time.as_secs_f64());
        s
    }
}

/// Color and shape words of `prompt`, in prompt order.
pub fn default_subjects(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(str::to_lowercase)
        .filter(|w| COLORS.contains(&w.as_str()) || SHAPES.contains(&w.as_str()))
        .collect()
}

/// Runs the masked sampler. `init` replaces the reference as the image that
/// is noised at the start; the reference still supplies the blended latents.
pub fn generate(
    ldm: &Checkpoint,
    reference: &Tensor,
    init: Option<&Tensor>,
    prompt: &str,
    cfg: &PipelineConfig,
) -> Result<RunArtifacts> {
    let started = Instant::now();
    cfg.validate()?;
    ldm.expect_kind(ModelKind::Ldm)?;
    let schedule = ldm
        .schedule
        .as_ref()
        .ok_or_else(|| Error::Pipeline("checkpoint carries no noise schedule".into()))?;
    let params = &ldm.params;
    let steps = schedule.steps();
    let start_count = (cfg.strength * steps as f64).round() as usize;
    if start_count == 0 {
        return Err(Error::Pipeline(format!(
            "strength {} rounds to zero steps",
            cfg.strength
        )));
    }
    let k0 = start_count - 1;

    let tokens = ldm.vocab.tokenize(prompt)?;
    let subjects: Vec<String> = match &cfg.subjects {
        Some(s) => s.clone(),
        None => default_subjects(prompt),
    };
    let subject_refs: Vec<&str> = subjects.iter().map(String::as_str).collect();
    let subject_idx = subject_token_indices(&ldm.vocab, &tokens, &subject_refs)?;
    let text = nn::embed_tokens(params, &tokens)?;
    let mask_params = MaskParams::new(cfg.quantile, cfg.sigma, cfg.blur_radius, cfg.dilate_radius)?;

    let z_ref = nn::encode(params, reference)?;
    let z_init = match init {
        Some(img) => nn::encode(params, img)?,
        None => z_ref.clone(),
    };
    let mut init_rng = rng::stream(cfg.seed, "init");
    let mut sampler_rng = rng::stream(cfg.seed, "sampler");
    let mut ref_rng = rng::stream(cfg.seed, "ref");
    let draw = |r: &mut Rng| {
        if cfg.deterministic {
            Tensor::zeros(&LATENT_SHAPE)
        } else {
            rng::normal_tensor(r, &LATENT_SHAPE)
        }
    };

    let mut z = q_sample(schedule, &z_init, k0, &draw(&mut init_rng))?;
    let mut masked_steps = Vec::new();
    let mut attribution_time = Duration::ZERO;
    let masking = cfg.masking && !subject_idx.is_empty();

    for k in (0..=k0).rev() {
        let mut g = Graph::new();
        let (eps_node, records) = nn::unet_forward(&mut g, params, &z, k, &text)?;
        let noise = if k > 0 { draw(&mut sampler_rng) } else { Tensor::zeros(&LATENT_SHAPE) };
        let denoised = reverse_step(schedule, &z, g.value(eps_node), k, &noise)?;
        let t = k + 1;
        z = if masking && cfg.in_window(t, steps) {
            let t0 = Instant::now();
            let step = step_masks(&g, eps_node, &records, &subject_idx, &subjects, cfg, &mask_params, t)?;
            attribution_time += t0.elapsed();
            let reference = match cfg.ref_level {
                RefLevel::Aligned if k == 0 => z_ref.clone(),
                RefLevel::Aligned => q_sample(schedule, &z_ref, k - 1, &draw(&mut ref_rng))?,
                RefLevel::Paper => q_sample(schedule, &z_ref, k, &draw(&mut ref_rng))?,
            };
            let blended = blend(&denoised, &reference, &step.final_mask)?;
            masked_steps.push(step);
            blended
        } else {
            denoised
        };
    }

    let image = nn::decode(params, &z)?;
    Ok(RunArtifacts {
        image,
        latent: z,
        steps: masked_steps,
        config: cfg.clone(),
        prompt: prompt.to_string(),
        subjects,
        elapsed: started.elapsed(),
        attribution_time,
    })
}

/// Per-layer masks (union over subjects), intersected across the selected
/// layers.
#[allow(clippy::too_many_arguments)]
fn step_masks(
    g: &Graph,
    eps_node: crate::NodeId,
    records: &[nn::AttentionRecord],
    subject_idx: &[usize],
    subjects: &[String],
    cfg: &PipelineConfig,
    mask_params: &MaskParams,
    t: usize,
) -> Result<StepMasks> {
    let selected: Vec<&nn::AttentionRecord> = match &cfg.layers {
        LayerSelection::All => records.iter().collect(),
        LayerSelection::Only(ids) => {
            let mut out = Vec::new();
            for id in ids {
                let r = records.iter().find(|r| r.layer_id == *id).ok_or_else(|| {
                    Error::Pipeline(format!(
                        "layer {id} does not exist (layers: {:?})",
                        records.iter().map(|r| r.layer_id).collect::<Vec<_>>()
                    ))
                })?;
                out.push(r);
            }
            out
        }
    };
    let mut scores = Vec::new();
    let mut layer_masks = Vec::new();
    for rec in selected {
        let jac = attention_jacobian(g, eps_node, rec)?;
        let mut subject_masks = Vec::new();
        for (&s, word) in subject_idx.iter().zip(subjects) {
            let field = importance_scores(rec, &jac, s, cfg.mode)?;
            let mask = mask_params.build(&field.values)?;
            subject_masks.push(mask.clone());
            scores.push(LayerScore {
                layer_id: rec.layer_id,
                subject_word: word.clone(),
                field,
                mask,
            });
        }
        layer_masks.push(maskops::mask_union(&subject_masks)?);
    }
    let final_mask = maskops::mask_intersect(&layer_masks)?;
    Ok(StepMasks { t, scores, final_mask })
}
