//! Encoder-decoder captioner conditioned on the assembled input of a
//! sequence-level audio embedding plus discrete codec tokens, trained with a
//! label-smoothed caption loss and a masked codec modeling auxiliary loss,
//! and decoded by length-normalized beam search.

use crate::audio::AudioClip;
use crate::autodiff::{
    label_smoothed_nll, AdamWState, AutodiffError, Graph, LrSchedule, ParamId, ParamStore,
    Tensor, Var,
};
use crate::codec::{codec_encode, CodecError, CodecModel, CodeMatrix};
use crate::data::{Vocab, BOS, EOS};
use crate::joint::{JointError, JointModel};
use crate::nn::{
    init_embedding, Embedding, Linear, TransformerDecoder, TransformerEncoder,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptionerError {
    #[error("code {code} out of range for embedding table of {size} rows")]
    CodeOutOfRange { code: usize, size: usize },
    #[error("code sequence of {len} frames exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("expected {expected} codebook rows, got {got}")]
    CodebookCountMismatch { expected: usize, got: usize },
    #[error("mask ratio must be in [0, 1), got {0}")]
    BadMaskRatio(f64),
    #[error("span length must be >= 1")]
    BadSpanLength,
    #[error("lambda must be in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("caption must be non-empty")]
    EmptyCaption,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, CaptionerError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerConfig {
    pub model_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_codebooks: usize,
    pub code_vocab: usize,
    pub clap_dim: usize,
    pub max_code_len: usize,
    pub max_caption_len: usize,
    pub mask_ratio: f64,
    pub span_length: usize,
    pub lambda_mcm: f64,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beam_size: usize,
    pub length_norm: f64,
    /// Ablation switch: encoder row 0 is forced to the zero vector.
    pub ablate_clap: bool,
    /// Ablation switch: the code sequence is dropped (L = 0 input).
    pub ablate_codec: bool,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            model_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 512,
            num_codebooks: 4,
            code_vocab: 64,
            clap_dim: 64,
            max_code_len: 384,
            max_caption_len: 64,
            mask_ratio: 0.15,
            span_length: 10,
            lambda_mcm: 0.7,
            label_smoothing: 0.2,
            epochs: 15,
            peak_lr: 1e-3,
            warmup_steps: 200,
            beam_size: 4,
            length_norm: 1.0,
            ablate_clap: false,
            ablate_codec: false,
        }
    }
}

/// Masked positions per codebook, always within [0, L).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub positions: Vec<Vec<usize>>,
    pub span_length: usize,
    pub mask_ratio: f64,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.iter().all(|p| p.is_empty())
    }
}

pub struct CaptionerModel {
    pub config: CaptionerConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
    /// N tables of (V+1) x D_b rows; row V is that codebook's mask token.
    code_tables: Vec<ParamId>,
    clap_proj: Linear,
    e_bos: ParamId,
    e_eos: ParamId,
    pos_table: ParamId,
    encoder: TransformerEncoder,
    decoder: TransformerDecoder,
    tok_emb: Embedding,
    dec_pos: ParamId,
    out_head: Linear,
    mcm_heads: Vec<Linear>,
}

impl CaptionerModel {
    pub fn new(config: CaptionerConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let d = config.model_dim;
        let code_tables = (0..config.num_codebooks)
            .map(|n| {
                params.register(
                    &format!("cap.code_table.{n}"),
                    init_embedding(rng, config.code_vocab + 1, d, 0.1),
                )
            })
            .collect();
        let clap_proj = Linear::new(&mut params, "cap.clap_proj", config.clap_dim, d, rng);
        let e_bos = params.register("cap.e_bos", init_embedding(rng, 1, d, 0.1));
        let e_eos = params.register("cap.e_eos", init_embedding(rng, 1, d, 0.1));
        let pos_table = params.register(
            "cap.pos",
            init_embedding(rng, config.max_code_len + 2, d, 0.1),
        );
        let encoder = TransformerEncoder::new(
            &mut params, "cap.enc", d, config.heads, config.ffn_dim, config.enc_layers, rng,
        );
        let decoder = TransformerDecoder::new(
            &mut params, "cap.dec", d, config.heads, config.ffn_dim, config.dec_layers, rng,
        );
        let tok_emb = Embedding::new(&mut params, "cap.tok_emb", vocab.len(), d, rng);
        let dec_pos = params.register(
            "cap.dec_pos",
            init_embedding(rng, config.max_caption_len + 1, d, 0.1),
        );
        let out_head = Linear::new(&mut params, "cap.out_head", d, vocab.len(), rng);
        let mcm_heads = (0..config.num_codebooks)
            .map(|n| Linear::new(&mut params, &format!("cap.mcm_head.{n}"), d, config.code_vocab, rng))
            .collect();
        CaptionerModel {
            config,
            params,
            vocab,
            code_tables,
            clap_proj,
            e_bos,
            e_eos,
            pos_table,
            encoder,
            decoder,
            tok_emb,
            dec_pos,
            out_head,
            mcm_heads,
        }
    }

    /// Summed per-codebook code embeddings: e[l] = sum_n W_n[C[n, l]].
    /// Mask ids (= code_vocab) select the reserved last table row.
    pub fn embed_codes(&self, g: &mut Graph, c: &CodeMatrix) -> Result<Var> {
        if c.num_codebooks() != self.code_tables.len() {
            return Err(CaptionerError::CodebookCountMismatch {
                expected: self.code_tables.len(),
                got: c.num_codebooks(),
            });
        }
        for row in &c.codes {
            for &code in row {
                if code > self.config.code_vocab {
                    return Err(CaptionerError::CodeOutOfRange {
                        code,
                        size: self.config.code_vocab + 1,
                    });
                }
            }
        }
        let mut acc: Option<Var> = None;
        for (table, row) in self.code_tables.iter().zip(&c.codes) {
            let t = g.param(&self.params, *table)?;
            let e = g.gather_rows(t, row)?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        Ok(acc.expect("at least one codebook"))
    }

    /// Assembles the (L+3) x D_b encoder input: positional embeddings are
    /// added to the bos/codes/eos rows, then the projected audio embedding
    /// is prepended without a positional term.
    pub fn build_encoder_input(
        &self,
        g: &mut Graph,
        e_encodec: Option<Var>,
        clap_embedding: &[f64],
    ) -> Result<Var> {
        let l = e_encodec.map_or(0, |v| g.value(v).rows());
        if l > self.config.max_code_len {
            return Err(CaptionerError::SequenceTooLong { len: l, max: self.config.max_code_len });
        }
        let bos = g.param(&self.params, self.e_bos)?;
        let eos = g.param(&self.params, self.e_eos)?;
        let body = match e_encodec {
            Some(codes) => g.concat_rows(&[bos, codes, eos])?,
            None => g.concat_rows(&[bos, eos])?,
        };
        let pos_table = g.param(&self.params, self.pos_table)?;
        let pos = g.gather_rows(pos_table, &(0..l + 2).collect::<Vec<_>>())?;
        let body = g.add(body, pos)?;
        let clap_row = if self.config.ablate_clap {
            g.constant(Tensor::zeros(vec![1, self.config.model_dim]))?
        } else {
            let e = g.constant(Tensor::matrix(1, self.config.clap_dim, clap_embedding.to_vec())?)?;
            self.clap_proj.forward(g, &self.params, e)?
        };
        Ok(g.concat_rows(&[clap_row, body])?)
    }

    pub fn encode(&self, g: &mut Graph, input: Var) -> Result<Var> {
        Ok(self.encoder.forward(g, &self.params, input)?)
    }

    /// Teacher-forced decoder logits: input is bos + caption prefix, one
    /// logit row per target token.
    pub fn decode_logits(&self, g: &mut Graph, memory: Var, prefix: &[usize]) -> Result<Var> {
        let x = self.tok_emb.lookup(g, &self.params, prefix)?;
        let pos_table = g.param(&self.params, self.dec_pos)?;
        let pos = g.gather_rows(pos_table, &(0..prefix.len()).collect::<Vec<_>>())?;
        let x = g.add(x, pos)?;
        let h = self.decoder.forward(g, &self.params, x, memory)?;
        Ok(self.out_head.forward(g, &self.params, h)?)
    }
}

/// Replaces spans of codes with the mask id (= code vocabulary size),
/// masking exactly floor(mask_ratio * L) positions per codebook with
/// non-overlapping spans; the final span is truncated to hit the count.
pub fn span_mask(
    c: &CodeMatrix,
    mask_ratio: f64,
    span_length: usize,
    mask_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(CodeMatrix, MaskPlan)> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(CaptionerError::BadMaskRatio(mask_ratio));
    }
    if span_length == 0 {
        return Err(CaptionerError::BadSpanLength);
    }
    let l = c.len();
    let target = (mask_ratio * l as f64).floor() as usize;
    let mut corrupted = c.clone();
    let mut positions = Vec::with_capacity(c.num_codebooks());
    for row in corrupted.codes.iter_mut() {
        let mut masked = vec![false; l];
        let mut remaining = target;
        while remaining > 0 {
            // gaps of still-unmasked positions
            let mut gaps: Vec<(usize, usize)> = Vec::new();
            let mut start = None;
            for (i, &m) in masked.iter().enumerate() {
                match (m, start) {
                    (false, None) => start = Some(i),
                    (true, Some(s)) => {
                        gaps.push((s, i - s));
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = start {
                gaps.push((s, l - s));
            }
            let (gap_start, gap_len) = gaps[rng.gen_range(0..gaps.len())];
            let span = span_length.min(remaining).min(gap_len);
            let offset = rng.gen_range(0..=gap_len - span);
            for i in gap_start + offset..gap_start + offset + span {
                masked[i] = true;
                row[i] = mask_id;
            }
            remaining -= span;
        }
        positions.push((0..l).filter(|&i| masked[i]).collect());
    }
    Ok((
        corrupted,
        MaskPlan { positions, span_length, mask_ratio },
    ))
}

/// Masked codec modeling loss: per codebook i (1-indexed), cross-entropy of
/// classifier i at the masked encoder rows (offset +2 past the audio
/// embedding and bos rows), averaged over that codebook's masked positions,
/// combined as sum_i (1/2)^i * l_i. Empty plan yields an exact zero.
pub fn mcm_loss(
    g: &mut Graph,
    model: &CaptionerModel,
    encoder_states: Var,
    plan: &MaskPlan,
    c: &CodeMatrix,
) -> Result<Var> {
    if plan.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0))?);
    }
    let mut total: Option<Var> = None;
    for (i, (head, positions)) in model.mcm_heads.iter().zip(&plan.positions).enumerate() {
        if positions.is_empty() {
            continue;
        }
        let rows: Vec<usize> = positions.iter().map(|&p| p + 2).collect();
        let states = g.gather_rows(encoder_states, &rows)?;
        let logits = head.forward(g, &model.params, states)?;
        let targets: Vec<usize> = positions.iter().map(|&p| c.codes[i][p]).collect();
        let li = label_smoothed_nll(g, logits, &targets, 0.0, None)?;
        let weighted = g.scale(li, 0.5f64.powi(i as i32 + 1))?;
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    Ok(total.expect("non-empty plan"))
}

/// Mean label-smoothed negative log-likelihood of the caption tokens.
pub fn caption_loss(g: &mut Graph, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    if targets.is_empty() {
        return Err(CaptionerError::EmptyCaption);
    }
    Ok(label_smoothed_nll(g, logits, targets, epsilon, None)?)
}

/// Combined objective: caption loss plus lambda times the MCM loss.
pub fn total_loss(g: &mut Graph, l_caption: Var, l_mcm: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CaptionerError::BadLambda(lambda));
    }
    let scaled = g.scale(l_mcm, lambda)?;
    Ok(g.add(l_caption, scaled)?)
}

/// One training example after the frozen front ends have run.
pub struct PreparedItem {
    pub codes: CodeMatrix,
    pub clap: Vec<f64>,
    pub token_ids: Vec<usize>,
}

pub fn prepare_items(
    items: &[(AudioClip, String)],
    codec: &CodecModel,
    clap: &JointModel,
    vocab: &Vocab,
) -> Result<Vec<PreparedItem>> {
    items
        .iter()
        .map(|(clip, caption)| {
            Ok(PreparedItem {
                codes: codec_encode(clip, codec)?,
                clap: clap.embed_audio(clip)?,
                token_ids: vocab.encode(caption),
            })
        })
        .collect()
}

fn empty_codes(model: &CaptionerModel) -> CodeMatrix {
    CodeMatrix {
        codes: vec![Vec::new(); model.config.num_codebooks],
        frame_hz: 0,
        source_duration_s: 0.0,
    }
}

/// Forward pass for one item; returns the scalar loss variable.
fn item_loss(
    g: &mut Graph,
    model: &CaptionerModel,
    item: &PreparedItem,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let cfg = &model.config;
    let codes = if cfg.ablate_codec { empty_codes(model) } else { item.codes.clone() };
    let (corrupted, plan) = span_mask(
        &codes,
        cfg.mask_ratio,
        cfg.span_length,
        cfg.code_vocab,
        rng,
    )?;
    let e_codes = if corrupted.is_empty() {
        None
    } else {
        Some(model.embed_codes(g, &corrupted)?)
    };
    let input = model.build_encoder_input(g, e_codes, &item.clap)?;
    let states = model.encode(g, input)?;
    let l_mcm = mcm_loss(g, model, states, &plan, &codes)?;
    // teacher forcing: decoder input is bos + tokens, target tokens + eos
    let mut prefix = Vec::with_capacity(item.token_ids.len() + 1);
    prefix.push(BOS);
    prefix.extend(&item.token_ids);
    let mut targets = item.token_ids.clone();
    targets.push(EOS);
    let logits = model.decode_logits(g, states, &prefix)?;
    let l_cap = caption_loss(g, logits, &targets, cfg.label_smoothing)?;
    total_loss(g, l_cap, l_mcm, cfg.lambda_mcm)
}

pub struct TrainStats {
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub steps: u64,
}

/// Trains the captioner on frozen codec and joint-embedding outputs. The
/// upstream models never enter the graph, so no gradient can reach them.
pub fn train_captioner(
    items: &[(AudioClip, String)],
    codec: &CodecModel,
    clap: &JointModel,
    config: &CaptionerConfig,
    seed: u64,
) -> Result<(CaptionerModel, TrainStats)> {
    if items.is_empty() {
        return Err(CaptionerError::EmptyDataset);
    }
    let captions: Vec<String> = items.iter().map(|(_, c)| c.clone()).collect();
    let vocab = Vocab::build(&captions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CaptionerModel::new(config.clone(), vocab, &mut rng);
    let prepared = prepare_items(items, codec, clap, &model.vocab)?;
    train_captioner_prepared(model, &prepared, rng)
}

/// Stepwise training state. Everything that determines future steps lives
/// here (parameters inside the model, optimizer moments, RNG position), so
/// a checkpointed driver resumes bit-identically: items are drawn from the
/// RNG one step at a time rather than via per-epoch shuffles.
pub struct TrainDriver {
    pub model: CaptionerModel,
    pub adamw: AdamWState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub losses: Vec<f64>,
    schedule: LrSchedule,
}

impl TrainDriver {
    pub fn new(model: CaptionerModel, rng: ChaCha8Rng) -> Self {
        let adamw = AdamWState::new(&model.params, 0.9, 0.999, 0.01, 1e-8);
        let schedule = LrSchedule::new(model.config.peak_lr, model.config.warmup_steps);
        TrainDriver { model, adamw, rng, step: 0, losses: Vec::new(), schedule }
    }

    /// Rebuilds a driver mid-run from restored state.
    pub fn resume(
        model: CaptionerModel,
        adamw: AdamWState,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Self {
        let schedule = LrSchedule::new(model.config.peak_lr, model.config.warmup_steps);
        TrainDriver { model, adamw, rng, step, losses: Vec::new(), schedule }
    }

    pub fn run_steps(&mut self, prepared: &[PreparedItem], n: u64) -> Result<()> {
        if prepared.is_empty() {
            return Err(CaptionerError::EmptyDataset);
        }
        for _ in 0..n {
            let idx = self.rng.gen_range(0..prepared.len());
            let mut g = Graph::new();
            let loss = item_loss(&mut g, &self.model, &prepared[idx], &mut self.rng)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(CaptionerError::NonFiniteLoss { step: self.step });
            }
            self.losses.push(value);
            self.model.params.zero_grads();
            g.backward(loss, &mut self.model.params)?;
            self.step += 1;
            self.adamw.step(&mut self.model.params, self.schedule.lr_at(self.step)?)?;
        }
        Ok(())
    }
}

/// Training core over pre-encoded items; exposed so ablation variants can
/// share one corpus encoding. Runs epochs * len(items) steps with items
/// sampled uniformly per step.
pub fn train_captioner_prepared(
    model: CaptionerModel,
    prepared: &[PreparedItem],
    rng: ChaCha8Rng,
) -> Result<(CaptionerModel, TrainStats)> {
    if prepared.is_empty() {
        return Err(CaptionerError::EmptyDataset);
    }
    let epochs = model.config.epochs.max(1);
    let mut driver = TrainDriver::new(model, rng);
    let steps = (epochs * prepared.len()) as u64;
    driver.run_steps(prepared, steps)?;
    let chunk = prepared.len().min(driver.losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let stats = TrainStats {
        first_epoch_loss: mean(&driver.losses[..chunk]),
        last_epoch_loss: mean(&driver.losses[driver.losses.len() - chunk..]),
        steps: driver.step,
    };
    Ok((driver.model, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCaption {
    /// Token ids excluding bos, ending with eos.
    pub token_ids: Vec<usize>,
    pub text: String,
    pub score: f64,
    pub truncated: bool,
}

#[derive(Clone)]
struct Hypothesis {
    prefix: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

/// Length-normalized beam search over a frozen model. No masking is applied
/// at inference. beam_size = 1 reduces to greedy argmax decoding.
pub fn generate_caption(
    clip: &AudioClip,
    codec: &CodecModel,
    clap: &JointModel,
    model: &CaptionerModel,
    beam_size: usize,
) -> Result<GeneratedCaption> {
    let codes = if model.config.ablate_codec {
        empty_codes(model)
    } else {
        codec_encode(clip, codec)?
    };
    let clap_embedding = clap.embed_audio(clip)?;
    generate_from_codes(&codes, &clap_embedding, model, beam_size)
}

pub fn generate_from_codes(
    codes: &CodeMatrix,
    clap_embedding: &[f64],
    model: &CaptionerModel,
    beam_size: usize,
) -> Result<GeneratedCaption> {
    let beam_size = beam_size.max(1);
    let max_len = model.config.max_caption_len;
    let alpha = model.config.length_norm;

    let mut g = Graph::new();
    let e_codes = if codes.is_empty() { None } else { Some(model.embed_codes(&mut g, codes)?) };
    let input = model.build_encoder_input(&mut g, e_codes, clap_embedding)?;
    let memory_var = model.encode(&mut g, input)?;
    let memory = g.value(memory_var).clone();

    let mut beams = vec![Hypothesis { prefix: vec![BOS], log_prob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let mut g = Graph::new();
            let mem = g.constant(memory.clone())?;
            let logits = model.decode_logits(&mut g, mem, &hyp.prefix)?;
            let ls = g.log_softmax_rows(logits)?;
            let last = g.value(ls).row(hyp.prefix.len() - 1).to_vec();
            // top beam_size continuations, ties to the lowest token id
            let mut order: Vec<usize> = (0..last.len()).collect();
            order.sort_by(|&a, &b| last[b].partial_cmp(&last[a]).unwrap().then(a.cmp(&b)));
            for &tok in order.iter().take(beam_size) {
                let mut prefix = hyp.prefix.clone();
                prefix.push(tok);
                candidates.push(Hypothesis {
                    prefix,
                    log_prob: hyp.log_prob + last[tok],
                    finished: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
        candidates.truncate(beam_size);
        for c in &candidates {
            if c.finished {
                finished.push(c.clone());
            }
        }
        beams = candidates;
        if beams.iter().all(|b| b.finished) {
            break;
        }
    }

    let normalized = |h: &Hypothesis| {
        let len = (h.prefix.len() - 1).max(1) as f64; // tokens after bos
        h.log_prob / len.powf(alpha)
    };
    let (best, truncated) = match finished
        .iter()
        .max_by(|a, b| normalized(a).partial_cmp(&normalized(b)).unwrap())
    {
        Some(h) => (h.clone(), false),
        None => {
            // ran out of length: close the best open hypothesis with eos
            let mut h = beams
                .into_iter()
                .max_by(|a, b| normalized(a).partial_cmp(&normalized(b)).unwrap())
                .expect("beam never empty");
            h.prefix.push(EOS);
            (h, true)
        }
    };
    let token_ids: Vec<usize> = best.prefix[1..].to_vec();
    Ok(GeneratedCaption {
        text: model.vocab.decode(&token_ids),
        score: normalized(&best),
        token_ids,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(rng: &mut ChaCha8Rng) -> CaptionerModel {
        let vocab = Vocab::build(&vec![
            "a low tone".to_string(),
            "a noise burst".to_string(),
            "a high chirp".to_string(),
        ]);
        let cfg = CaptionerConfig {
            model_dim: 32,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 64,
            num_codebooks: 2,
            code_vocab: 8,
            clap_dim: 8,
            max_code_len: 32,
            ..CaptionerConfig::default()
        };
        CaptionerModel::new(cfg, vocab, rng)
    }

    fn codes_of(rows: Vec<Vec<usize>>) -> CodeMatrix {
        CodeMatrix {
            source_duration_s: rows[0].len() as f64 / 75.0,
            codes: rows,
            frame_hz: 75,
        }
    }

    #[test]
    fn embed_codes_matches_gather_and_add_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = tiny_model(&mut rng);
        let c = codes_of(vec![vec![0, 3, 8], vec![5, 1, 2]]);
        let mut g = Graph::new();
        let e = model.embed_codes(&mut g, &c).unwrap();
        let got = g.value(e).clone();
        assert_eq!(got.rows(), 3);
        let t0 = model.params.value(model.code_tables[0]);
        let t1 = model.params.value(model.code_tables[1]);
        for l in 0..3 {
            for j in 0..model.config.model_dim {
                let want = t0.row(c.codes[0][l])[j] + t1.row(c.codes[1][l])[j];
                assert!((got.row(l)[j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn embed_codes_rejects_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = tiny_model(&mut rng);
        let c = codes_of(vec![vec![9], vec![0]]);
        let mut g = Graph::new();
        assert!(matches!(
            model.embed_codes(&mut g, &c),
            Err(CaptionerError::CodeOutOfRange { .. })
        ));
    }

    #[test]
    fn encoder_input_has_l_plus_3_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(&mut rng);
        let clap = vec![0.1; 8];
        for l in [0usize, 1, 4, 20] {
            let mut g = Graph::new();
            let e = if l == 0 {
                None
            } else {
                let c = codes_of(vec![vec![1; l], vec![2; l]]);
                Some(model.embed_codes(&mut g, &c).unwrap())
            };
            let input = model.build_encoder_input(&mut g, e, &clap).unwrap();
            assert_eq!(g.value(input).rows(), l + 3);
        }
    }

    #[test]
    fn clap_row_carries_no_positional_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(&mut rng);
        let clap = vec![0.25; 8];
        let mut g = Graph::new();
        let input = model.build_encoder_input(&mut g, None, &clap).unwrap();
        let row0 = g.value(input).row(0).to_vec();
        // oracle: plain affine projection of the audio embedding
        let mut g2 = Graph::new();
        let e = g2.constant(Tensor::matrix(1, 8, clap.clone()).unwrap()).unwrap();
        let proj = model.clap_proj.forward(&mut g2, &model.params, e).unwrap();
        assert_eq!(row0, g2.value(proj).row(0));
    }

    #[test]
    fn span_mask_exact_counts_and_disjoint_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in [5usize, 64, 100, 1000] {
            let c = codes_of(vec![(0..l).map(|i| i % 8).collect(), vec![3; l]]);
            let (corrupted, plan) = span_mask(&c, 0.15, 10, 8, &mut rng).unwrap();
            let want = (0.15 * l as f64).floor() as usize;
            for (cb, positions) in plan.positions.iter().enumerate() {
                assert_eq!(positions.len(), want, "L={l} codebook {cb}");
                let unique: std::collections::HashSet<_> = positions.iter().collect();
                assert_eq!(unique.len(), positions.len());
                for l_pos in 0..l {
                    if positions.contains(&l_pos) {
                        assert_eq!(corrupted.codes[cb][l_pos], 8);
                    } else {
                        assert_eq!(corrupted.codes[cb][l_pos], c.codes[cb][l_pos]);
                    }
                }
            }
        }
    }

    #[test]
    fn span_mask_zero_ratio_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = codes_of(vec![vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]]);
        let (corrupted, plan) = span_mask(&c, 0.0, 10, 8, &mut rng).unwrap();
        assert_eq!(corrupted, c);
        assert!(plan.is_empty());
        // floor boundary: L=5 at ratio 0.15 -> zero masked
        let (c2, plan2) = span_mask(&c, 0.15, 10, 8, &mut rng).unwrap();
        assert_eq!(c2, c);
        assert!(plan2.is_empty());
    }

    #[test]
    fn mcm_weights_follow_halving_law() {
        // hand-set logits making each head's average loss exactly ln(8)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = tiny_model(&mut rng);
        let l = 20;
        let c = codes_of(vec![vec![0; l], vec![1; l]]);
        let (_, plan) = span_mask(&c, 0.15, 4, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        // zero encoder states isolate the head biases; zero the biases and
        // weights so every head emits uniform logits
        let mut probe = CaptionerModel::new(model.config.clone(), model.vocab.clone(), &mut ChaCha8Rng::seed_from_u64(9));
        for (_, p) in probe.params.iter_mut() {
            if p.name.starts_with("cap.mcm_head") {
                p.value.data_mut().fill(0.0);
            }
        }
        let states = g.constant(Tensor::zeros(vec![l + 3, probe.config.model_dim])).unwrap();
        let loss = mcm_loss(&mut g, &probe, states, &plan, &c).unwrap();
        let want = (0.5 + 0.25) * (8.0f64).ln();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn mcm_empty_plan_is_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = tiny_model(&mut rng);
        let c = codes_of(vec![vec![0, 1], vec![2, 3]]);
        let plan = MaskPlan { positions: vec![vec![], vec![]], span_length: 10, mask_ratio: 0.15 };
        let mut g = Graph::new();
        let states = g.constant(Tensor::zeros(vec![5, model.config.model_dim])).unwrap();
        let loss = mcm_loss(&mut g, &model, states, &plan, &c).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn total_loss_combines_and_validates_lambda() {
        let mut g = Graph::new();
        let cap = g.constant(Tensor::scalar(2.0)).unwrap();
        let mcm = g.constant(Tensor::scalar(1.0)).unwrap();
        let t = total_loss(&mut g, cap, mcm, 0.7).unwrap();
        assert!((g.value(t).item() - 2.7).abs() < 1e-15);
        assert!(matches!(
            total_loss(&mut g, cap, mcm, 1.5),
            Err(CaptionerError::BadLambda(_))
        ));
        let t0 = total_loss(&mut g, cap, mcm, 0.0).unwrap();
        assert_eq!(g.value(t0).item(), 2.0);
    }

    #[test]
    fn caption_loss_uniform_logits_is_log_k() {
        let mut g = Graph::new();
        let k = 50;
        let logits = g.constant(Tensor::zeros(vec![3, k])).unwrap();
        let l = caption_loss(&mut g, logits, &[4, 7, 11], 0.2).unwrap();
        assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
        assert!(matches!(
            caption_loss(&mut g, logits, &[], 0.2),
            Err(CaptionerError::EmptyCaption)
        ));
    }

    #[test]
    fn greedy_equals_stepwise_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = tiny_model(&mut rng);
        let codes = codes_of(vec![vec![1, 2, 3, 4], vec![4, 3, 2, 1]]);
        let clap = vec![0.3; 8];
        let beam1 = generate_from_codes(&codes, &clap, &model, 1).unwrap();

        // manual stepwise argmax rollout
        let mut g = Graph::new();
        let e = model.embed_codes(&mut g, &codes).unwrap();
        let input = model.build_encoder_input(&mut g, Some(e), &clap).unwrap();
        let memv = model.encode(&mut g, input).unwrap();
        let memory = g.value(memv).clone();
        let mut prefix = vec![BOS];
        for _ in 0..model.config.max_caption_len {
            let mut g = Graph::new();
            let mem = g.constant(memory.clone()).unwrap();
            let logits = model.decode_logits(&mut g, mem, &prefix).unwrap();
            let last = g.value(logits).row(prefix.len() - 1).to_vec();
            let mut argmax = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[argmax] {
                    argmax = i;
                }
            }
            prefix.push(argmax);
            if argmax == EOS {
                break;
            }
        }
        // truncation contract: an open rollout is closed with eos
        if *prefix.last().unwrap() != EOS {
            prefix.push(EOS);
        }
        assert_eq!(beam1.prefix_oracle(), prefix[1..].to_vec());
    }

    impl GeneratedCaption {
        fn prefix_oracle(&self) -> Vec<usize> {
            self.token_ids.clone()
        }
    }

    #[test]
    fn beam_score_dominates_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = tiny_model(&mut rng);
        let codes = codes_of(vec![vec![0, 5, 2], vec![7, 1, 6]]);
        let clap = vec![-0.2; 8];
        let greedy = generate_from_codes(&codes, &clap, &model, 1).unwrap();
        let beam = generate_from_codes(&codes, &clap, &model, 4).unwrap();
        assert!(beam.score >= greedy.score - 1e-12);
    }

    #[test]
    fn inference_ignores_masking_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = tiny_model(&mut rng);
        let codes = codes_of(vec![vec![1, 1, 2, 2, 3], vec![3, 2, 1, 0, 4]]);
        let clap = vec![0.05; 8];
        let a = generate_from_codes(&codes, &clap, &model, 4).unwrap();
        let b = generate_from_codes(&codes, &clap, &model, 4).unwrap();
        assert_eq!(a, b);
    }
}
