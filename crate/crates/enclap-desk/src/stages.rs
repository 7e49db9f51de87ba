//! Pipeline stages wired together by the CLI: data generation, the three
//! training stages, captioning, evaluation, and the component ablation.

use crate::audio::AudioClip;
use crate::captioner::{
    generate_from_codes, prepare_items, train_captioner_prepared, CaptionerModel, PreparedItem,
};
use crate::checkpoint::{
    expect_kind, load_checkpoint, params_to_tensors, save_checkpoint, tensors_into_params,
    AdamWSnapshot, Checkpoint, RngSnapshot,
};
use crate::codec::{train_codec, CodecModel};
use crate::config::{parse_config_text, RunConfig};
use crate::data::{load_split, LoadedItem, Vocab};
use crate::joint::{train_joint, JointModel};
use crate::metrics::{cider_d, evaluate, tokenize_caption, EvalReport};
use crate::synth::{make_corpus, write_corpus};
use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(())
}

pub fn run_make_data(cfg: &RunConfig) -> Result<()> {
    let corpus = make_corpus(&cfg.synth_config(), cfg.seed)?;
    fs::create_dir_all(&cfg.data_dir)
        .with_context(|| format!("creating {}", cfg.data_dir.display()))?;
    write_corpus(&corpus, &cfg.data_dir)?;
    println!(
        "wrote {} train / {} val / {} test clips to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn train_clips(cfg: &RunConfig) -> Result<Vec<LoadedItem>> {
    load_split(&cfg.data_dir, "train")
        .with_context(|| format!("loading train split from {}", cfg.data_dir.display()))
}

/// The captioner optionally trains on a prefix of the train split while the
/// frozen codec and joint models keep the whole of it.
fn captioner_subset<'a>(prepared: &'a [PreparedItem], cfg: &RunConfig) -> &'a [PreparedItem] {
    if cfg.captioner_train_size == 0 {
        prepared
    } else {
        &prepared[..cfg.captioner_train_size.min(prepared.len())]
    }
}

// ---------------------------------------------------------------------------
// Checkpoint adapters
// ---------------------------------------------------------------------------

fn codec_checkpoint(model: &CodecModel, cfg: &RunConfig) -> Checkpoint {
    let mut tensors = params_to_tensors(&model.params);
    for (n, cb) in model.codebooks.iter().enumerate() {
        tensors.push((format!("codec.codebook.{n}"), cb.clone()));
    }
    Checkpoint {
        kind: "codec".into(),
        config_text: cfg.to_text(),
        vocab_words: Vec::new(),
        tensors,
        optimizer: None,
        rng: RngSnapshot::capture(&ChaCha8Rng::seed_from_u64(cfg.seed)),
        step: 0,
    }
}

pub fn load_codec(path: &Path) -> Result<CodecModel> {
    let ckpt = load_checkpoint(path)?;
    expect_kind(&ckpt, "codec")?;
    let mut cfg = RunConfig::default();
    parse_config_text(&mut cfg, &ckpt.config_text, "checkpoint")?;
    let mut model = CodecModel::new(cfg.codec_config(), &mut ChaCha8Rng::seed_from_u64(0));
    tensors_into_params(&ckpt.tensors, &mut model.params);
    for (n, cb) in model.codebooks.iter_mut().enumerate() {
        let name = format!("codec.codebook.{n}");
        if let Some((_, t)) = ckpt.tensors.iter().find(|(k, _)| *k == name) {
            *cb = t.clone();
        }
    }
    Ok(model)
}

fn clap_checkpoint(model: &JointModel, cfg: &RunConfig) -> Checkpoint {
    Checkpoint {
        kind: "clap".into(),
        config_text: cfg.to_text(),
        vocab_words: model.vocab.words().to_vec(),
        tensors: params_to_tensors(&model.params),
        optimizer: None,
        rng: RngSnapshot::capture(&ChaCha8Rng::seed_from_u64(cfg.seed)),
        step: 0,
    }
}

pub fn load_clap(path: &Path) -> Result<JointModel> {
    let ckpt = load_checkpoint(path)?;
    expect_kind(&ckpt, "clap")?;
    let mut cfg = RunConfig::default();
    parse_config_text(&mut cfg, &ckpt.config_text, "checkpoint")?;
    let vocab = Vocab::from_words(ckpt.vocab_words.clone());
    let mut model = JointModel::new(cfg.joint_config(), vocab, &mut ChaCha8Rng::seed_from_u64(0));
    tensors_into_params(&ckpt.tensors, &mut model.params);
    Ok(model)
}

pub fn captioner_checkpoint(
    model: &CaptionerModel,
    cfg: &RunConfig,
    optimizer: Option<AdamWSnapshot>,
    rng: &ChaCha8Rng,
    step: u64,
) -> Checkpoint {
    Checkpoint {
        kind: "captioner".into(),
        config_text: cfg.to_text(),
        vocab_words: model.vocab.words().to_vec(),
        tensors: params_to_tensors(&model.params),
        optimizer,
        rng: RngSnapshot::capture(rng),
        step,
    }
}

pub fn load_captioner(path: &Path) -> Result<(CaptionerModel, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    expect_kind(&ckpt, "captioner")?;
    let mut cfg = RunConfig::default();
    parse_config_text(&mut cfg, &ckpt.config_text, "checkpoint")?;
    let vocab = Vocab::from_words(ckpt.vocab_words.clone());
    let mut model =
        CaptionerModel::new(cfg.captioner_config(), vocab, &mut ChaCha8Rng::seed_from_u64(0));
    tensors_into_params(&ckpt.tensors, &mut model.params);
    Ok((model, ckpt))
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

pub fn run_train_codec(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let items = train_clips(cfg)?;
    let clips: Vec<AudioClip> = items.into_iter().map(|i| i.clip).collect();
    let model = train_codec(&clips, &cfg.codec_config(), cfg.seed)?;
    for (n, &used) in model.codebook_usage.iter().enumerate() {
        if used < 2 {
            eprintln!("warning: codebook {n} collapsed ({used} entries in use)");
        }
    }
    let path = cfg.out_dir.join("codec.ckpt");
    save_checkpoint(&codec_checkpoint(&model, cfg), &path)?;
    println!(
        "codec trained on {} clips; codebook usage {:?}; saved {}",
        clips.len(),
        model.codebook_usage,
        path.display()
    );
    Ok(())
}

pub fn run_train_clap(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let items = train_clips(cfg)?;
    let pairs: Vec<(AudioClip, String)> = items
        .into_iter()
        .map(|i| {
            let caption = i.captions.first().cloned().unwrap_or_default();
            (i.clip, caption)
        })
        .collect();
    let model = train_joint(&pairs, &cfg.joint_config(), cfg.seed)?;
    for w in &model.warnings {
        eprintln!("warning: {w}");
    }
    let path = cfg.out_dir.join("clap.ckpt");
    save_checkpoint(&clap_checkpoint(&model, cfg), &path)?;
    println!(
        "joint embedding trained on {} pairs (temperature {:.4}); saved {}",
        pairs.len(),
        model.temperature(),
        path.display()
    );
    Ok(())
}

pub fn run_train_captioner(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let codec = load_codec(&cfg.out_dir.join("codec.ckpt"))?;
    let clap = load_clap(&cfg.out_dir.join("clap.ckpt"))?;
    let items = train_clips(cfg)?;
    let pairs: Vec<(AudioClip, String)> = items
        .into_iter()
        .map(|i| {
            let caption = i.captions.first().cloned().unwrap_or_default();
            (i.clip, caption)
        })
        .collect();
    let captions: Vec<String> = pairs.iter().map(|(_, c)| c.clone()).collect();
    let vocab = Vocab::build(&captions);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = CaptionerModel::new(cfg.captioner_config(), vocab, &mut rng);
    let prepared = prepare_items(&pairs, &codec, &clap, &model.vocab)?;
    let prepared = captioner_subset(&prepared, cfg);
    let (model, stats) = train_captioner_prepared(model, prepared, rng)?;
    let path = cfg.out_dir.join("captioner.ckpt");
    save_checkpoint(
        &captioner_checkpoint(&model, cfg, None, &ChaCha8Rng::seed_from_u64(cfg.seed), stats.steps),
        &path,
    )?;
    println!(
        "captioner trained for {} steps (loss {:.4} -> {:.4}); saved {}",
        stats.steps, stats.first_epoch_loss, stats.last_epoch_loss, path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

fn caption_split(
    cfg: &RunConfig,
    codec: &CodecModel,
    clap: &JointModel,
    model: &CaptionerModel,
    split: &str,
) -> Result<(Vec<String>, Vec<String>, Vec<Vec<String>>)> {
    let items = load_split(&cfg.data_dir, split)
        .with_context(|| format!("loading {split} split from {}", cfg.data_dir.display()))?;
    let mut ids = Vec::with_capacity(items.len());
    let mut captions = Vec::with_capacity(items.len());
    let mut references = Vec::with_capacity(items.len());
    for item in &items {
        let codes = if model.config.ablate_codec {
            crate::codec::CodeMatrix {
                codes: vec![Vec::new(); model.config.num_codebooks],
                frame_hz: 0,
                source_duration_s: 0.0,
            }
        } else {
            crate::codec::codec_encode(&item.clip, codec)?
        };
        let clap_embedding = clap.embed_audio(&item.clip)?;
        let gen = generate_from_codes(&codes, &clap_embedding, model, model.config.beam_size)?;
        ids.push(item.id.clone());
        captions.push(gen.text);
        references.push(item.captions.clone());
    }
    Ok((ids, captions, references))
}

pub fn run_caption(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let codec = load_codec(&cfg.out_dir.join("codec.ckpt"))?;
    let clap = load_clap(&cfg.out_dir.join("clap.ckpt"))?;
    let (model, _) = load_captioner(&cfg.out_dir.join("captioner.ckpt"))?;
    let (ids, captions, _) = caption_split(cfg, &codec, &clap, &model, "test")?;
    let mut out = String::new();
    for (id, caption) in ids.iter().zip(&captions) {
        let _ = writeln!(out, "{id}\t{caption}");
    }
    let path = cfg.out_dir.join("captions_test.txt");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} captions to {}", ids.len(), path.display());
    Ok(())
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    ensure_out(cfg)?;
    let codec = load_codec(&cfg.out_dir.join("codec.ckpt"))?;
    let clap = load_clap(&cfg.out_dir.join("clap.ckpt"))?;
    let (model, _) = load_captioner(&cfg.out_dir.join("captioner.ckpt"))?;
    let (ids, captions, references) = caption_split(cfg, &codec, &clap, &model, "test")?;
    let report = evaluate("captioner", "test", cfg.seed, &ids, &captions, &references)?;
    fs::write(cfg.out_dir.join("eval_summary.txt"), report.summary())?;
    fs::write(cfg.out_dir.join("eval_items.csv"), report.csv())?;
    print!("{}", report.summary());
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "no_mcm", "no_clap", "no_codec"];

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    /// (variant, seed, corpus CIDEr-D) rows.
    pub rows: Vec<(String, u64, f64)>,
}

impl AblationOutcome {
    pub fn median(&self, variant: &str) -> f64 {
        let mut scores: Vec<f64> = self
            .rows
            .iter()
            .filter(|(v, _, _)| v == variant)
            .map(|&(_, _, s)| s)
            .collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores[scores.len() / 2]
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,cider_d\n");
        for (v, seed, score) in &self.rows {
            let _ = writeln!(s, "{v},{seed},{score:.6}");
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for v in ABLATION_VARIANTS {
            let _ = writeln!(s, "median_cider_d.{v} = {:.6}", self.median(v));
        }
        s
    }
}

/// Trains the four captioner variants on identical seeds and scores each
/// with corpus CIDEr-D on the test split. Within a seed the variants share
/// the corpus, the frozen codec and joint models, and the captioner init.
/// With `pretrain_size > 0` the codec and joint embedding pretrain on a
/// separate corpus of simpler clips instead of the task train split.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationOutcome> {
    let mut rows = Vec::new();
    for s in 0..cfg.ablation_seeds as u64 {
        let seed = cfg.seed + s;
        let corpus = make_corpus(&cfg.synth_config(), seed)?;
        let train_pairs: Vec<(AudioClip, String)> = corpus
            .train
            .iter()
            .map(|i| (i.clip.clone(), i.captions[0].clone()))
            .collect();
        // large offset keeps pretraining corpora disjoint from every task
        // corpus seed in the sweep
        let front_end_pairs: Vec<(AudioClip, String)> = if cfg.pretrain_size > 0 {
            make_corpus(&cfg.pretrain_synth_config(), seed + 100_003)?
                .train
                .iter()
                .map(|i| (i.clip.clone(), i.captions[0].clone()))
                .collect()
        } else {
            train_pairs.clone()
        };
        let clips: Vec<AudioClip> = front_end_pairs.iter().map(|(c, _)| c.clone()).collect();
        let codec = train_codec(&clips, &cfg.codec_config(), seed)?;
        let clap = train_joint(&front_end_pairs, &cfg.joint_config(), seed)?;
        let captions: Vec<String> = train_pairs.iter().map(|(_, c)| c.clone()).collect();
        let vocab = Vocab::build(&captions);
        let base = cfg.captioner_config();
        // encode the corpus once; variants reuse it
        let probe = CaptionerModel::new(base.clone(), vocab.clone(), &mut ChaCha8Rng::seed_from_u64(seed));
        let prepared_all: Vec<PreparedItem> = prepare_items(&train_pairs, &codec, &clap, &probe.vocab)?;
        let prepared = captioner_subset(&prepared_all, cfg);
        let test_prepared: Vec<(String, crate::codec::CodeMatrix, Vec<f64>, Vec<String>)> = corpus
            .test
            .iter()
            .map(|i| {
                Ok((
                    i.id.clone(),
                    crate::codec::codec_encode(&i.clip, &codec)?,
                    clap.embed_audio(&i.clip)?,
                    i.captions.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        for variant in ABLATION_VARIANTS {
            let mut vcfg = base.clone();
            match variant {
                "full" => {}
                "no_mcm" => vcfg.lambda_mcm = 0.0,
                "no_clap" => vcfg.ablate_clap = true,
                "no_codec" => vcfg.ablate_codec = true,
                _ => unreachable!(),
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = CaptionerModel::new(vcfg, vocab.clone(), &mut rng);
            let (model, _) = train_captioner_prepared(model, prepared, rng)?;
            let empty = crate::codec::CodeMatrix {
                codes: vec![Vec::new(); model.config.num_codebooks],
                frame_hz: 0,
                source_duration_s: 0.0,
            };
            let mut cands = Vec::new();
            let mut refs = Vec::new();
            for (_, codes, clap_embedding, references) in &test_prepared {
                let codes = if model.config.ablate_codec { &empty } else { codes };
                let gen =
                    generate_from_codes(codes, clap_embedding, &model, model.config.beam_size)?;
                cands.push(tokenize_caption(&gen.text));
                refs.push(references.iter().map(|r| tokenize_caption(r)).collect());
            }
            let (score, _) = cider_d(&cands, &refs)?;
            println!("ablation seed {seed} variant {variant}: cider_d {score:.4}");
            rows.push((variant.to_string(), seed, score));
        }
    }
    let outcome = AblationOutcome { rows };
    ensure_out(cfg)?;
    fs::write(cfg.out_dir.join("ablation.csv"), outcome.csv())?;
    fs::write(cfg.out_dir.join("ablation_summary.txt"), outcome.summary())?;
    print!("{}", outcome.summary());
    Ok(outcome)
}

/// Stage dispatch used by the executable.
pub fn run_stage(stage: &str, cfg: &RunConfig) -> Result<()> {
    match stage {
        "make-data" => run_make_data(cfg),
        "train-codec" => run_train_codec(cfg),
        "train-clap" => run_train_clap(cfg),
        "train-captioner" => run_train_captioner(cfg),
        "caption" => run_caption(cfg),
        "evaluate" => run_evaluate(cfg).map(|_| ()),
        "ablate" => run_ablation(cfg).map(|_| ()),
        other => anyhow::bail!(
            "unknown stage {other:?}; expected one of make-data, train-codec, train-clap, \
             train-captioner, caption, evaluate, ablate"
        ),
    }
}
