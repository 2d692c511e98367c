//! Command-line driver: dataset generation, training, masked generation and
//! evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};

use gradmask::attribution::ScoreMode;
use gradmask::datasynth::{load_dataset, make_dataset, Background, MANIFEST_FILE};
use gradmask::evalmetrics;
use gradmask::imageio::{png_read, png_write, png_write_field};
use gradmask::maskops;
use gradmask::nn::ModelKind;
use gradmask::pipeline::{self, generate, LayerSelection, PipelineConfig, RefLevel};
use gradmask::training::{self, Checkpoint, TrainConfig};

pub const AUTOENCODER_FILE: &str = "autoencoder.gmdf";
pub const LDM_FILE: &str = "ldm.gmdf";
pub const CLASSIFIER_FILE: &str = "classifier.gmdf";
pub const DUAL_FILE: &str = "dual.gmdf";
pub const REPORT_FILE: &str = "report.tsv";

#[derive(Parser, Debug)]
#[command(name = "gradmask", version, about = "Toy latent diffusion with gradient-weighted attention masks")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug)]
pub struct AdamArgs {
    /// Mini-batch size.
    #[arg(long, default_value_t = TrainConfig::BATCH)]
    pub batch_size: usize,
    /// Adam first-moment decay.
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    /// Adam second-moment decay.
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// Adam denominator epsilon.
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Root seed for initialization, shuffling and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl AdamArgs {
    fn config(&self, epochs: usize, lr: f64, data: &Path) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            seed: self.seed,
            dataset: Some(data.to_path_buf()),
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic captioned dataset.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Dataset seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Key = value settings file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the autoencoder, then the conditional denoiser.
    Train {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Autoencoder epochs.
        #[arg(long, default_value_t = TrainConfig::AUTOENCODER_EPOCHS)]
        ae_epochs: usize,
        /// Autoencoder learning rate.
        #[arg(long, default_value_t = TrainConfig::AUTOENCODER_LR)]
        ae_lr: f64,
        /// Denoiser epochs.
        #[arg(long, default_value_t = TrainConfig::DENOISER_EPOCHS)]
        denoiser_epochs: usize,
        /// Denoiser learning rate.
        #[arg(long, default_value_t = TrainConfig::DENOISER_LR)]
        denoiser_lr: f64,
        #[command(flatten)]
        adam: AdamArgs,
        /// Key = value settings file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the evaluation classifier and dual encoder.
    TrainEval {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Epochs for each model.
        #[arg(long, default_value_t = TrainConfig::EVAL_EPOCHS)]
        epochs: usize,
        /// Learning rate for each model.
        #[arg(long, default_value_t = TrainConfig::EVAL_LR)]
        lr: f64,
        #[command(flatten)]
        adam: AdamArgs,
        /// Key = value settings file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Masked img2img from a reference image.
    Generate(GenerateArgs),
    /// Score generated images against real ones per category.
    Eval {
        /// Directory of generated images with a manifest.tsv.
        #[arg(long)]
        generated: PathBuf,
        /// Directory of real images with a manifest.tsv.
        #[arg(long)]
        real: PathBuf,
        /// Classifier checkpoint (feature extractor).
        #[arg(long)]
        classifier: PathBuf,
        /// Dual-encoder checkpoint.
        #[arg(long)]
        dual: PathBuf,
        /// Output directory for report.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Key = value settings file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
pub struct GenerateArgs {
    /// Latent diffusion checkpoint written by train.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference image (8-bit RGB PNG, 32x32).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Image noised at the start instead of the reference.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Prompt, e.g. "a red circle in forest".
    #[arg(long)]
    pub prompt: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Output image file name inside --out.
    #[arg(long, default_value = "generated.png")]
    pub name: String,
    /// Fraction of the schedule to noise the reference to.
    #[arg(long, default_value_t = pipeline::DEFAULT_STRENGTH)]
    pub strength: f64,
    /// Start of the masked window, as a fraction of T.
    #[arg(long, default_value_t = pipeline::DEFAULT_WINDOW.0)]
    pub t_lo: f64,
    /// End of the masked window, as a fraction of T.
    #[arg(long, default_value_t = pipeline::DEFAULT_WINDOW.1)]
    pub t_hi: f64,
    /// Score quantile at which masks switch on.
    #[arg(long, default_value_t = maskops::DEFAULT_QUANTILE)]
    pub quantile: f64,
    /// Gaussian blur sigma applied to score fields.
    #[arg(long, default_value_t = maskops::DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Gaussian blur radius.
    #[arg(long, default_value_t = maskops::DEFAULT_BLUR_RADIUS)]
    pub blur_radius: usize,
    /// Square dilation radius.
    #[arg(long, default_value_t = maskops::DEFAULT_DILATE_RADIUS)]
    pub dilate_radius: usize,
    /// Score reduction: full or diagonal.
    #[arg(long, default_value = "full")]
    pub mode: String,
    /// Attention layers to use: all, or comma-separated layer ids.
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Comma-separated subject words (default: the prompt's color and shape).
    #[arg(long)]
    pub subjects: Option<String>,
    /// Sampler seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace all noise draws with zeros.
    #[arg(long)]
    pub deterministic: bool,
    /// Reference noise level: aligned or paper.
    #[arg(long, default_value = "aligned")]
    pub ref_level: String,
    /// Plain img2img without masking.
    #[arg(long)]
    pub no_mask: bool,
    /// Write score fields and masks of every masked step as PNGs.
    #[arg(long)]
    pub dump_masks: bool,
    /// Key = value settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl GenerateArgs {
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let subjects = self.subjects.as_ref().map(|s| {
            s.split(',')
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect()
        });
        Ok(PipelineConfig {
            strength: self.strength,
            t_lo: self.t_lo,
            t_hi: self.t_hi,
            quantile: self.quantile,
            sigma: self.sigma,
            blur_radius: self.blur_radius,
            dilate_radius: self.dilate_radius,
            mode: self.mode.parse::<ScoreMode>()?,
            layers: self.layers.parse::<LayerSelection>()?,
            subjects,
            seed: self.seed,
            deterministic: self.deterministic,
            ref_level: self.ref_level.parse::<RefLevel>()?,
            masking: !self.no_mask,
        })
    }
}

/// Parses `key = value` lines (`#` starts a comment) into flags for
/// `subcommand`. A key is a long flag name with `-` written as `_`; keys that
/// are not flags of that subcommand are rejected.
pub fn config_args(text: &str, subcommand: &str) -> Result<Vec<OsString>> {
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(subcommand)
        .ok_or_else(|| anyhow!("unknown command '{subcommand}'"))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected 'key = value'", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long().is_some_and(|l| l.replace('-', "_") == key) && key != "config")
            .ok_or_else(|| anyhow!("unknown config key '{key}' for {subcommand}"))?;
        let flag = format!("--{}", arg.get_long().unwrap_or_default());
        if matches!(arg.get_action(), clap::ArgAction::SetTrue) {
            match value {
                "true" => out.push(flag.into()),
                "false" => {}
                other => bail!("config key '{key}': expected true or false, got '{other}'"),
            }
        } else {
            out.push(flag.into());
            out.push(value.into());
        }
    }
    Ok(out)
}

/// Inserts the settings of a `--config FILE` right after the subcommand
/// name, so explicit flags (parsed later) take precedence.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = argv.iter().position(|a| a == "--config");
    let eq = argv
        .iter()
        .position(|a| a.to_str().is_some_and(|s| s.starts_with("--config=")));
    let path = match (pos, eq) {
        (Some(i), _) => argv.get(i + 1).cloned().map(PathBuf::from),
        (None, Some(i)) => argv[i].to_str().map(|s| PathBuf::from(&s["--config=".len()..])),
        (None, None) => None,
    };
    let Some(path) = path else {
        return Ok(argv);
    };
    let Some(sub) = argv.get(1).and_then(|s| s.to_str()).map(str::to_string) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let extra = config_args(&text, &sub)?;
    let mut out = argv[..2].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

fn save_log(path: &Path, log: &training::TrainLog) -> Result<()> {
    fs::write(path, log.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn category_of(prompt: &str) -> Option<Background> {
    prompt.split_whitespace().find_map(Background::from_word)
}

/// Adds or replaces the manifest line for `file` in `dir/manifest.tsv`.
fn record_output(dir: &Path, file: &str, prompt: &str) -> Result<()> {
    let Some(cat) = category_of(prompt) else {
        log::warn!("prompt names no background category; {file} not added to the manifest");
        return Ok(());
    };
    let path = dir.join(MANIFEST_FILE);
    let existing = fs::read_to_string(&path).unwrap_or_default();
    let mut lines: Vec<String> = existing
        .lines()
        .filter(|l| l.split('\t').next() != Some(file))
        .map(str::to_string)
        .collect();
    lines.push(format!("{file}\t{prompt}\t{}", cat.word()));
    lines.sort();
    fs::write(&path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = args.pipeline_config()?;
    let ldm = Checkpoint::load_kind(&args.ckpt, ModelKind::Ldm)?;
    let reference = png_read(&args.reference)?;
    let init = args.init.as_deref().map(png_read).transpose()?;
    let run = generate(&ldm, &reference, init.as_ref(), &args.prompt, &cfg)?;
    create_dir(&args.out)?;
    png_write(&args.out.join(&args.name), &run.image)?;
    let stem = Path::new(&args.name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("generated");
    let manifest = args.out.join(format!("{stem}.run.txt"));
    fs::write(&manifest, run.manifest_text()).with_context(|| format!("writing {}", manifest.display()))?;
    record_output(&args.out, &args.name, &args.prompt)?;
    if args.dump_masks {
        let dir = args.out.join(format!("{stem}_masks"));
        create_dir(&dir)?;
        for step in &run.steps {
            for s in &step.scores {
                let base = format!("t{:03}_layer{}_{}", step.t, s.layer_id, s.subject_word);
                png_write_field(&dir.join(format!("{base}_score.png")), &s.field.values)?;
                png_write_field(&dir.join(format!("{base}_mask.png")), s.mask.values())?;
            }
            png_write_field(&dir.join(format!("t{:03}_final.png", step.t)), step.final_mask.values())?;
        }
    }
    log::info!(
        "generated {} ({} masked steps, {:.2}s, {:.2}s in attribution)",
        args.out.join(&args.name).display(),
        run.steps.len(),
        run.elapsed.as_secs_f64(),
        run.attribution_time.as_secs_f64()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, seed, .. } => {
            make_dataset(count, seed, &out)?;
            log::info!("wrote {count} images to {}", out.display());
        }
        Command::Train {
            data,
            out,
            ae_epochs,
            ae_lr,
            denoiser_epochs,
            denoiser_lr,
            adam,
            ..
        } => {
            let samples = load_dataset(&data)?;
            create_dir(&out)?;
            let (ae, ae_log) = training::train_autoencoder(&samples, &adam.config(ae_epochs, ae_lr, &data))?;
            ae.save(&out.join(AUTOENCODER_FILE))?;
            save_log(&out.join("autoencoder_log.tsv"), &ae_log)?;
            let (ldm, log) =
                training::train_denoiser(&samples, &ae, &adam.config(denoiser_epochs, denoiser_lr, &data))?;
            ldm.save(&out.join(LDM_FILE))?;
            save_log(&out.join("denoiser_log.tsv"), &log)?;
        }
        Command::TrainEval { data, out, epochs, lr, adam, .. } => {
            let samples = load_dataset(&data)?;
            create_dir(&out)?;
            let em = training::train_eval_models(&samples, &adam.config(epochs, lr, &data))?;
            em.classifier.save(&out.join(CLASSIFIER_FILE))?;
            em.dual.save(&out.join(DUAL_FILE))?;
            save_log(&out.join("classifier_log.tsv"), &em.classifier_log)?;
            save_log(&out.join("dual_log.tsv"), &em.dual_log)?;
        }
        Command::Generate(args) => run_generate(&args)?,
        Command::Eval {
            generated,
            real,
            classifier,
            dual,
            out,
            ..
        } => {
            let classifier = Checkpoint::load_kind(&classifier, ModelKind::Classifier)?;
            let dual = Checkpoint::load_kind(&dual, ModelKind::DualEncoder)?;
            let gen = load_dataset(&generated)?;
            let real = load_dataset(&real)?;
            let report = evalmetrics::report(&gen, &real, &classifier, &dual)?;
            create_dir(&out)?;
            let path = out.join(REPORT_FILE);
            fs::write(&path, report.to_text()).with_context(|| format!("writing {}", path.display()))?;
            log::info!(
                "fid mean {:.4}, alignment mean {:.2}; report in {}",
                report.fid_mean,
                report.alignment_mean,
                path.display()
            );
        }
    }
    Ok(())
}

/// Runs one command. Returns 0 on success, 2 on usage errors and 1 on
/// runtime failures, each reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn help(sub: &str) -> String {
        let mut cmd = Cli::command();
        cmd.build();
        cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string()
    }

    fn has_default(text: &str, flag: &str, value: &str) -> bool {
        let start = text.find(&format!("--{flag} ")).unwrap_or_else(|| panic!("--{flag} missing"));
        let rest = &text[start..];
        let end = rest[2..].find("\n  -").map(|e| e + 2).unwrap_or(rest.len());
        rest[..end].contains(&format!("[default: {value}]"))
    }

    #[test]
    fn help_defaults_match_code() {
        let p = PipelineConfig::default();
        let g = help("generate");
        for (flag, value) in [
            ("strength", p.strength.to_string()),
            ("t-lo", p.t_lo.to_string()),
            ("t-hi", p.t_hi.to_string()),
            ("quantile", p.quantile.to_string()),
            ("sigma", p.sigma.to_string()),
            ("blur-radius", p.blur_radius.to_string()),
            ("dilate-radius", p.dilate_radius.to_string()),
            ("mode", "full".into()),
            ("layers", p.layers.to_string()),
            ("seed", p.seed.to_string()),
            ("ref-level", p.ref_level.name().into()),
        ] {
            assert!(has_default(&g, flag, &value), "generate --{flag} should default to {value}\n{g}");
        }
        let ae = TrainConfig::autoencoder();
        let den = TrainConfig::denoiser();
        let t = help("train");
        for (flag, value) in [
            ("ae-epochs", ae.epochs.to_string()),
            ("ae-lr", ae.lr.to_string()),
            ("denoiser-epochs", den.epochs.to_string()),
            ("denoiser-lr", den.lr.to_string()),
            ("batch-size", ae.batch_size.to_string()),
            ("beta1", ae.beta1.to_string()),
            ("beta2", ae.beta2.to_string()),
            ("adam-eps", ae.eps.to_string()),
            ("seed", ae.seed.to_string()),
        ] {
            assert!(has_default(&t, flag, &value), "train --{flag} should default to {value}\n{t}");
        }
        let ev = TrainConfig::eval_models();
        let te = help("train-eval");
        assert!(has_default(&te, "epochs", &ev.epochs.to_string()));
        assert!(has_default(&te, "lr", &ev.lr.to_string()));
        assert!(has_default(&help("gen-data"), "count", "2000"));
    }

    #[test]
    fn every_flag_is_documented() {
        let mut cmd = Cli::command();
        cmd.build();
        for sub in cmd.get_subcommands() {
            for a in sub.get_arguments() {
                if a.get_id() == "help" || a.get_id() == "version" {
                    continue;
                }
                assert!(a.get_help().is_some(), "{} --{} lacks help", sub.get_name(), a.get_id());
            }
        }
    }

    #[test]
    fn config_echo_parses_back() {
        let cfg = PipelineConfig {
            subjects: Some(vec!["red".into()]),
            deterministic: true,
            ..PipelineConfig::default()
        };
        let args = config_args(&cfg.echo(), "generate").unwrap();
        let mut argv: Vec<OsString> = ["gradmask", "generate", "--ckpt", "c", "--ref", "r", "--prompt", "p", "--out", "o"]
            .iter()
            .map(OsString::from)
            .collect();
        argv.extend(args);
        let Command::Generate(g) = Cli::try_parse_from(argv).unwrap().command else {
            panic!("wrong command");
        };
        assert_eq!(g.pipeline_config().unwrap(), cfg);
    }

    #[test]
    fn unknown_config_key_is_named() {
        assert_eq!(config_args("ref = x.png\nt_lo = 0.2\n", "generate").unwrap(), ["--ref", "x.png", "--t-lo", "0.2"]);
        let err = config_args("strength = 0.5\nwarp = 9\n", "generate").unwrap_err().to_string();
        assert!(err.contains("'warp'"), "{err}");
        assert!(config_args("no equals sign", "generate").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "# settings\nstrength = 0.5\nseed = 4\n").unwrap();
        let argv: Vec<OsString> = [
            "gradmask", "generate", "--ckpt", "c", "--ref", "r", "--prompt", "p", "--out", "o", "--seed", "9",
            "--config",
        ]
        .iter()
        .map(OsString::from)
        .chain([cfg.clone().into_os_string()])
        .collect();
        let Command::Generate(g) = Cli::try_parse_from(expand_config(argv).unwrap()).unwrap().command else {
            panic!("wrong command");
        };
        assert_eq!((g.strength, g.seed), (0.5, 9));
    }
}
