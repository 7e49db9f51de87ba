//! Run configuration: defaults, config-file parsing, and flag overrides.
//!
//! Config files are line-oriented `key = value` text; `#` starts a comment.
//! Precedence is defaults < file < command-line overrides, and unknown keys
//! are hard errors everywhere.

use crate::captioner::CaptionerConfig;
use crate::codec::CodecConfig;
use crate::joint::JointConfig;
use crate::synth::SynthConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line (expected `key = value`): {text:?}")]
    MalformedLine { path: String, line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for key {key:?}: {detail}")]
    BadValue { key: String, value: String, detail: String },
    #[error("constraint violated: {0}")]
    Constraint(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every tunable of the pipeline, with defaults matching the training
/// recipe (beta1 0.9, beta2 0.999, weight decay 0.01, label smoothing 0.2,
/// mask ratio 0.15, span 10, lambda 0.7, 15 epochs).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    // corpus
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub sample_rate: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_events: usize,
    pub max_events: usize,
    // codec
    pub num_codebooks: usize,
    pub code_vocab: usize,
    pub latent_dim: usize,
    pub frame_hz: u32,
    pub commitment_beta: f64,
    pub ema_decay: f64,
    pub codec_epochs: usize,
    pub codec_lr: f64,
    pub codec_warmup: u64,
    // joint embedding
    pub embed_dim: usize,
    pub clap_epochs: usize,
    pub clap_lr: f64,
    pub clap_warmup: u64,
    pub clap_batch: usize,
    // captioner
    pub model_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mask_ratio: f64,
    pub span_length: usize,
    pub lambda_mcm: f64,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beam_size: usize,
    pub max_caption_len: usize,
    pub max_code_len: usize,
    pub length_norm: f64,
    /// Cap on how many train clips the captioner itself sees (0 = all).
    /// The codec and joint embedding always train on the full split, so a
    /// small cap probes generalization with strong frozen front ends.
    pub captioner_train_size: usize,
    // optimizer
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    // ablation
    pub ablation_seeds: usize,
    // front-end pretraining corpus (ablation harness only; 0 disables it and
    // the codec and joint embedding then train on the task train split)
    pub pretrain_size: usize,
    pub pretrain_min_events: usize,
    pub pretrain_max_events: usize,
    pub pretrain_min_duration_s: f64,
    pub pretrain_max_duration_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let codec = CodecConfig::default();
        let joint = JointConfig::default();
        let cap = CaptionerConfig::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data_dir: PathBuf::from("out/data"),
            train_size: synth.train,
            val_size: synth.val,
            test_size: synth.test,
            sample_rate: synth.sample_rate,
            min_duration_s: synth.min_duration_s,
            max_duration_s: synth.max_duration_s,
            min_events: synth.min_events,
            max_events: synth.max_events,
            num_codebooks: codec.num_codebooks,
            code_vocab: codec.codebook_size,
            latent_dim: codec.latent_dim,
            frame_hz: codec.frame_hz,
            commitment_beta: codec.commitment_beta,
            ema_decay: codec.ema_decay,
            codec_epochs: codec.epochs,
            codec_lr: codec.peak_lr,
            codec_warmup: codec.warmup_steps,
            embed_dim: joint.embed_dim,
            clap_epochs: joint.epochs,
            clap_lr: joint.peak_lr,
            clap_warmup: joint.warmup_steps,
            clap_batch: joint.batch_size,
            model_dim: cap.model_dim,
            enc_layers: cap.enc_layers,
            dec_layers: cap.dec_layers,
            heads: cap.heads,
            ffn_dim: cap.ffn_dim,
            mask_ratio: cap.mask_ratio,
            span_length: cap.span_length,
            lambda_mcm: cap.lambda_mcm,
            label_smoothing: cap.label_smoothing,
            epochs: cap.epochs,
            peak_lr: cap.peak_lr,
            warmup_steps: cap.warmup_steps,
            beam_size: cap.beam_size,
            max_caption_len: cap.max_caption_len,
            max_code_len: cap.max_code_len,
            length_norm: cap.length_norm,
            captioner_train_size: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            ablation_seeds: 3,
            pretrain_size: 0,
            pretrain_min_events: 1,
            pretrain_max_events: 2,
            pretrain_min_duration_s: 0.8,
            pretrain_max_duration_s: 1.2,
        }
    }
}

macro_rules! apply_keys {
    ($self:ident, $key:ident, $value:ident, { $($name:literal => $field:ident),* $(,)? }) => {
        match $key {
            $(
                $name => {
                    $self.$field = $value.parse().map_err(|e| ConfigError::BadValue {
                        key: $key.to_string(),
                        value: $value.to_string(),
                        detail: format!("{e}"),
                    })?;
                }
            )*
            "out_dir" => $self.out_dir = PathBuf::from($value),
            "data_dir" => $self.data_dir = PathBuf::from($value),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    };
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        apply_keys!(self, key, value, {
            "seed" => seed,
            "train_size" => train_size,
            "val_size" => val_size,
            "test_size" => test_size,
            "sample_rate" => sample_rate,
            "min_duration_s" => min_duration_s,
            "max_duration_s" => max_duration_s,
            "min_events" => min_events,
            "max_events" => max_events,
            "num_codebooks" => num_codebooks,
            "code_vocab" => code_vocab,
            "latent_dim" => latent_dim,
            "frame_hz" => frame_hz,
            "commitment_beta" => commitment_beta,
            "ema_decay" => ema_decay,
            "codec_epochs" => codec_epochs,
            "codec_lr" => codec_lr,
            "codec_warmup" => codec_warmup,
            "embed_dim" => embed_dim,
            "clap_epochs" => clap_epochs,
            "clap_lr" => clap_lr,
            "clap_warmup" => clap_warmup,
            "clap_batch" => clap_batch,
            "model_dim" => model_dim,
            "enc_layers" => enc_layers,
            "dec_layers" => dec_layers,
            "heads" => heads,
            "ffn_dim" => ffn_dim,
            "mask_ratio" => mask_ratio,
            "span_length" => span_length,
            "lambda" => lambda_mcm,
            "label_smoothing" => label_smoothing,
            "epochs" => epochs,
            "peak_lr" => peak_lr,
            "warmup_steps" => warmup_steps,
            "beam_size" => beam_size,
            "max_caption_len" => max_caption_len,
            "max_code_len" => max_code_len,
            "length_norm" => length_norm,
            "captioner_train_size" => captioner_train_size,
            "beta1" => beta1,
            "beta2" => beta2,
            "weight_decay" => weight_decay,
            "ablation_seeds" => ablation_seeds,
            "pretrain_size" => pretrain_size,
            "pretrain_min_events" => pretrain_min_events,
            "pretrain_max_events" => pretrain_max_events,
            "pretrain_min_duration_s" => pretrain_min_duration_s,
            "pretrain_max_duration_s" => pretrain_max_duration_s,
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_mcm) {
            return Err(ConfigError::Constraint(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda_mcm
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(ConfigError::Constraint(format!(
                "mask_ratio must be in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.span_length == 0 {
            return Err(ConfigError::Constraint("span_length must be >= 1".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
            sample_rate: self.sample_rate,
            min_duration_s: self.min_duration_s,
            max_duration_s: self.max_duration_s,
            min_events: self.min_events,
            max_events: self.max_events,
        }
    }

    /// Corpus the frozen front ends pretrain on when `pretrain_size > 0`.
    /// Simpler clips than the task corpus, mirroring generic pretraining.
    pub fn pretrain_synth_config(&self) -> SynthConfig {
        SynthConfig {
            train: self.pretrain_size,
            val: 16,
            test: 16,
            sample_rate: self.sample_rate,
            min_duration_s: self.pretrain_min_duration_s,
            max_duration_s: self.pretrain_max_duration_s,
            min_events: self.pretrain_min_events,
            max_events: self.pretrain_max_events,
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            num_codebooks: self.num_codebooks,
            codebook_size: self.code_vocab,
            latent_dim: self.latent_dim,
            frame_hz: self.frame_hz,
            commitment_beta: self.commitment_beta,
            ema_decay: self.ema_decay,
            epochs: self.codec_epochs,
            peak_lr: self.codec_lr,
            warmup_steps: self.codec_warmup,
            ..CodecConfig::default()
        }
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig {
            embed_dim: self.embed_dim,
            epochs: self.clap_epochs,
            peak_lr: self.clap_lr,
            warmup_steps: self.clap_warmup,
            batch_size: self.clap_batch,
            ..JointConfig::default()
        }
    }

    pub fn captioner_config(&self) -> CaptionerConfig {
        CaptionerConfig {
            model_dim: self.model_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            num_codebooks: self.num_codebooks,
            code_vocab: self.code_vocab,
            clap_dim: self.embed_dim,
            mask_ratio: self.mask_ratio,
            span_length: self.span_length,
            lambda_mcm: self.lambda_mcm,
            label_smoothing: self.label_smoothing,
            epochs: self.epochs,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            beam_size: self.beam_size,
            max_caption_len: self.max_caption_len,
            max_code_len: self.max_code_len,
            length_norm: self.length_norm,
            ..CaptionerConfig::default()
        }
    }

    /// Serialized `key = value` form covering every field; reparsing it
    /// reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "train_size = {}", self.train_size);
        let _ = writeln!(s, "val_size = {}", self.val_size);
        let _ = writeln!(s, "test_size = {}", self.test_size);
        let _ = writeln!(s, "sample_rate = {}", self.sample_rate);
        let _ = writeln!(s, "min_duration_s = {}", self.min_duration_s);
        let _ = writeln!(s, "max_duration_s = {}", self.max_duration_s);
        let _ = writeln!(s, "min_events = {}", self.min_events);
        let _ = writeln!(s, "max_events = {}", self.max_events);
        let _ = writeln!(s, "num_codebooks = {}", self.num_codebooks);
        let _ = writeln!(s, "code_vocab = {}", self.code_vocab);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "frame_hz = {}", self.frame_hz);
        let _ = writeln!(s, "commitment_beta = {}", self.commitment_beta);
        let _ = writeln!(s, "ema_decay = {}", self.ema_decay);
        let _ = writeln!(s, "codec_epochs = {}", self.codec_epochs);
        let _ = writeln!(s, "codec_lr = {}", self.codec_lr);
        let _ = writeln!(s, "codec_warmup = {}", self.codec_warmup);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "clap_epochs = {}", self.clap_epochs);
        let _ = writeln!(s, "clap_lr = {}", self.clap_lr);
        let _ = writeln!(s, "clap_warmup = {}", self.clap_warmup);
        let _ = writeln!(s, "clap_batch = {}", self.clap_batch);
        let _ = writeln!(s, "model_dim = {}", self.model_dim);
        let _ = writeln!(s, "enc_layers = {}", self.enc_layers);
        let _ = writeln!(s, "dec_layers = {}", self.dec_layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "ffn_dim = {}", self.ffn_dim);
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(s, "span_length = {}", self.span_length);
        let _ = writeln!(s, "lambda = {}", self.lambda_mcm);
        let _ = writeln!(s, "label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "peak_lr = {}", self.peak_lr);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "beam_size = {}", self.beam_size);
        let _ = writeln!(s, "max_caption_len = {}", self.max_caption_len);
        let _ = writeln!(s, "max_code_len = {}", self.max_code_len);
        let _ = writeln!(s, "length_norm = {}", self.length_norm);
        let _ = writeln!(s, "captioner_train_size = {}", self.captioner_train_size);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "ablation_seeds = {}", self.ablation_seeds);
        let _ = writeln!(s, "pretrain_size = {}", self.pretrain_size);
        let _ = writeln!(s, "pretrain_min_events = {}", self.pretrain_min_events);
        let _ = writeln!(s, "pretrain_max_events = {}", self.pretrain_max_events);
        let _ = writeln!(s, "pretrain_min_duration_s = {}", self.pretrain_min_duration_s);
        let _ = writeln!(s, "pretrain_max_duration_s = {}", self.pretrain_max_duration_s);
        s
    }
}

/// Parses `key = value` lines; `#` comments and blank lines are skipped.
pub fn parse_config_text(cfg: &mut RunConfig, text: &str, path: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::MalformedLine {
                path: path.to_string(),
                line: lineno + 1,
                text: raw.to_string(),
            });
        };
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(())
}

/// Layered configuration: defaults, then the optional file, then explicit
/// `key=value` overrides (highest precedence).
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        parse_config_text(&mut cfg, &text, &path.display().to_string())?;
    }
    for (key, value) in overrides {
        cfg.apply(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
