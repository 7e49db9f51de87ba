//! Dual-encoder audio/text embedding trained with a symmetric contrastive
//! objective. The frozen audio embedding is the sequence-level conditioning
//! vector consumed by the captioner.

use crate::audio::AudioClip;
use crate::autodiff::{AdamWState, AutodiffError, Graph, LrSchedule, ParamStore, Tensor, Var};
use crate::data::Vocab;
use crate::nn::{init_embedding, EncoderLayer, Embedding, Linear};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JointError {
    #[error("clip of {0} samples is shorter than one analysis window")]
    ClipTooShort(usize),
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("row {row} of {side} batch has norm {norm}, expected 1 within 1e-6")]
    NotNormalized { side: &'static str, row: usize, norm: f64 },
    #[error("training needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("sequence of {len} exceeds positional table of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, JointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    /// Shared embedding dimensionality D.
    pub embed_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Log filterbank bands per analysis frame.
    pub bands: usize,
    /// Analysis window and hop in samples (40 ms / 20 ms at 16 kHz).
    pub window: usize,
    pub hop: usize,
    pub max_audio_frames: usize,
    pub max_text_len: usize,
    pub temperature_init: f64,
    pub temperature_min: f64,
    pub temperature_max: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            embed_dim: 64,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            bands: 32,
            window: 640,
            hop: 320,
            max_audio_frames: 208,
            max_text_len: 32,
            temperature_init: 0.07,
            temperature_min: 1e-3,
            temperature_max: 1.0,
            batch_size: 16,
            epochs: 40,
            peak_lr: 2e-3,
            warmup_steps: 50,
        }
    }
}

pub struct JointModel {
    pub config: JointConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub warnings: Vec<String>,
    band_freqs: Vec<f64>,
    audio_in: Linear,
    audio_pos: crate::autodiff::ParamId,
    audio_layer: EncoderLayer,
    audio_proj: Linear,
    text_emb: Embedding,
    text_pos: crate::autodiff::ParamId,
    text_layer: EncoderLayer,
    text_proj: Linear,
    log_tau: crate::autodiff::ParamId,
}

/// Pooling segments per tower; audio gets finer spans than the short captions.
const AUDIO_SEGMENTS: usize = 2;
const TEXT_SEGMENTS: usize = 2;

fn band_frequencies(bands: usize) -> Vec<f64> {
    // log-spaced centers from 100 Hz to 6 kHz
    let (lo, hi) = (100.0f64, 6000.0f64);
    (0..bands)
        .map(|b| lo * (hi / lo).powf(b as f64 / (bands - 1) as f64))
        .collect()
}

impl JointModel {
    pub fn new(config: JointConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let d = config.model_dim;
        let audio_in =
            Linear::new(&mut params, "joint.audio_in", config.bands * 2, d, rng);
        let audio_pos = params.register(
            "joint.audio_pos",
            init_embedding(rng, config.max_audio_frames, d, 0.1),
        );
        let audio_layer = EncoderLayer::new(&mut params, "joint.audio_layer", d, config.heads, config.ffn_dim, rng);
        let audio_proj =
            Linear::new(&mut params, "joint.audio_proj", d * AUDIO_SEGMENTS, config.embed_dim, rng);
        let text_emb = Embedding::new(&mut params, "joint.text_emb", vocab.len(), d, rng);
        let text_pos = params.register(
            "joint.text_pos",
            init_embedding(rng, config.max_text_len, d, 0.1),
        );
        let text_layer = EncoderLayer::new(&mut params, "joint.text_layer", d, config.heads, config.ffn_dim, rng);
        let text_proj =
            Linear::new(&mut params, "joint.text_proj", d * TEXT_SEGMENTS, config.embed_dim, rng);
        let log_tau = params.register(
            "joint.log_tau",
            Tensor::scalar(config.temperature_init.ln()),
        );
        JointModel {
            band_freqs: band_frequencies(config.bands),
            config,
            params,
            vocab,
            warnings: Vec::new(),
            audio_in,
            audio_pos,
            audio_layer,
            audio_proj,
            text_emb,
            text_pos,
            text_layer,
            text_proj,
            log_tau,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.params.value(self.log_tau).item().exp()
    }

    /// Log filterbank energies, one row per analysis frame.
    pub fn audio_features(&self, clip: &AudioClip) -> Result<Tensor> {
        let (w, hop) = (self.config.window, self.config.hop);
        let samples = clip.samples();
        if samples.len() < w {
            return Err(JointError::ClipTooShort(samples.len()));
        }
        let frames = (samples.len() - w) / hop + 1;
        let frames = frames.min(self.config.max_audio_frames);
        let sr = clip.sample_rate_hz() as f64;
        let bands = self.config.bands;
        let mut log_power = vec![0.0f64; frames * bands];
        for f in 0..frames {
            let seg = &samples[f * hop..f * hop + w];
            for (b, &freq) in self.band_freqs.iter().enumerate() {
                // Goertzel power at the band center frequency
                let omega = 2.0 * std::f64::consts::PI * freq / sr;
                let coeff = 2.0 * omega.cos();
                let (mut s1, mut s2) = (0.0f64, 0.0f64);
                for &x in seg {
                    let s0 = x + coeff * s1 - s2;
                    s2 = s1;
                    s1 = s0;
                }
                let power = (s1 * s1 + s2 * s2 - coeff * s1 * s2) / w as f64;
                log_power[f * bands + b] = (power + 1e-6).ln();
            }
        }
        // each frame carries its log powers plus their frame-to-frame deltas;
        // the deltas separate steady, drifting and oscillating narrowband
        // events that look identical after time pooling
        let mut data = Vec::with_capacity(frames * bands * 2);
        for f in 0..frames {
            data.extend_from_slice(&log_power[f * bands..(f + 1) * bands]);
            for b in 0..bands {
                let prev = if f == 0 { f } else { f - 1 };
                data.push(log_power[f * bands + b] - log_power[prev * bands + b]);
            }
        }
        Ok(Tensor::matrix(frames, bands * 2, data)?)
    }

    /// Order-sensitive pooling: the rows are mean-pooled over `segments`
    /// consecutive spans and concatenated into a 1 x (segments * d) row, so
    /// swapped event orders stay distinguishable after pooling. Spans that
    /// would be empty fall back to the whole-sequence mean.
    fn split_pool(&self, g: &mut Graph, h: Var, rows: usize, segments: usize) -> Result<Var> {
        let whole = g.mean_pool_rows(h, rows)?;
        let mut parts = Vec::with_capacity(segments);
        for q in 0..segments {
            let start = q * rows / segments;
            let end = (q + 1) * rows / segments;
            if end == start {
                parts.push(whole);
            } else {
                let seg = g.slice_rows(h, start, end - start)?;
                parts.push(g.mean_pool_rows(seg, end - start)?);
            }
        }
        Ok(g.concat_cols(&parts)?)
    }

    /// Pooled (pre-projection) audio representation for one clip, 1 x 2d.
    fn audio_pooled(&self, g: &mut Graph, feats: Tensor) -> Result<Var> {
        let frames = feats.rows();
        if frames > self.config.max_audio_frames {
            return Err(JointError::SequenceTooLong { len: frames, max: self.config.max_audio_frames });
        }
        let x = g.constant(feats)?;
        let h = self.audio_in.forward(g, &self.params, x)?;
        let pos_table = g.param(&self.params, self.audio_pos)?;
        let pos = g.gather_rows(pos_table, &(0..frames).collect::<Vec<_>>())?;
        let h = g.add(h, pos)?;
        let h = self.audio_layer.forward(g, &self.params, h)?;
        self.split_pool(g, h, frames, AUDIO_SEGMENTS)
    }

    /// Pooled (pre-projection) text representation for one token sequence.
    fn text_pooled(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let ids: Vec<usize> = if ids.is_empty() { vec![crate::data::UNK] } else { ids.to_vec() };
        let len = ids.len().min(self.config.max_text_len);
        let ids = &ids[..len];
        let h = self.text_emb.lookup(g, &self.params, ids)?;
        let pos_table = g.param(&self.params, self.text_pos)?;
        let pos = g.gather_rows(pos_table, &(0..len).collect::<Vec<_>>())?;
        let h = g.add(h, pos)?;
        let h = self.text_layer.forward(g, &self.params, h)?;
        self.split_pool(g, h, len, TEXT_SEGMENTS)
    }

    /// Batched audio embeddings: unit-norm rows, one per clip.
    fn embed_audio_batch(&self, g: &mut Graph, clips: &[&AudioClip]) -> Result<Var> {
        let pooled = clips
            .iter()
            .map(|c| {
                let feats = self.audio_features(c)?;
                self.audio_pooled(g, feats)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&pooled)?;
        let projected = self.audio_proj.forward(g, &self.params, stacked)?;
        Ok(g.normalize_rows(projected)?)
    }

    fn embed_text_batch(&self, g: &mut Graph, captions: &[Vec<usize>]) -> Result<Var> {
        let pooled = captions
            .iter()
            .map(|ids| self.text_pooled(g, ids))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&pooled)?;
        let projected = self.text_proj.forward(g, &self.params, stacked)?;
        Ok(g.normalize_rows(projected)?)
    }

    /// Unit-norm sequence-level audio embedding.
    pub fn embed_audio(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let e = self.embed_audio_batch(&mut g, &[clip])?;
        Ok(g.value(e).data().to_vec())
    }

    /// Unit-norm text embedding of a caption string.
    pub fn embed_text(&self, caption: &str) -> Result<Vec<f64>> {
        let ids = self.vocab.encode(caption);
        let mut g = Graph::new();
        let e = self.embed_text_batch(&mut g, &[ids])?;
        Ok(g.value(e).data().to_vec())
    }
}

/// Symmetric InfoNCE over unit-norm batches: mean of the audio-to-text and
/// text-to-audio cross-entropies with positives on the diagonal.
/// `inv_tau` is a scalar graph variable holding 1/temperature.
pub fn contrastive_loss(g: &mut Graph, audio: Var, text: Var, inv_tau: Var) -> Result<Var> {
    let b = g.value(audio).rows();
    if b == 0 {
        return Err(JointError::EmptyBatch);
    }
    for (side, v) in [("audio", audio), ("text", text)] {
        let t = g.value(v);
        for row in 0..t.rows() {
            let norm = t.row(row).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(JointError::NotNormalized { side, row, norm });
            }
        }
    }
    let mut eye = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = 1.0;
    }
    let mask = g.constant(eye)?;
    let direction = |g: &mut Graph, q: Var, k: Var| -> Result<Var> {
        let sims = g.matmul(q, k, false, true)?;
        let logits = g.mul(sims, inv_tau)?;
        let ls = g.log_softmax_rows(logits)?;
        let picked = g.mul(ls, mask)?;
        let total = g.sum_all(picked)?;
        Ok(g.scale(total, -1.0 / b as f64)?)
    };
    let la = direction(g, audio, text)?;
    let lt = direction(g, text, audio)?;
    let sum = g.add(la, lt)?;
    Ok(g.scale(sum, 0.5)?)
}

/// Trains the dual encoder; the returned model is frozen by convention
/// (no further gradient path touches it downstream).
pub fn train_joint(pairs: &[(AudioClip, String)], config: &JointConfig, seed: u64) -> Result<JointModel> {
    if pairs.len() < 2 {
        return Err(JointError::TooFewPairs(pairs.len()));
    }
    let captions: Vec<String> = pairs.iter().map(|(_, c)| c.clone()).collect();
    let vocab = Vocab::build(&captions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = JointModel::new(config.clone(), vocab, &mut rng);
    if captions.iter().all(|c| c == &captions[0]) {
        model.warnings.push("degenerate corpus: all captions identical".to_string());
    }
    let token_ids: Vec<Vec<usize>> = captions.iter().map(|c| model.vocab.encode(c)).collect();
    let features: Vec<Tensor> = pairs
        .iter()
        .map(|(clip, _)| model.audio_features(clip))
        .collect::<Result<Vec<_>>>()?;

    let mut adamw = AdamWState::new(&model.params, 0.9, 0.999, 0.01, 1e-8);
    let schedule = LrSchedule::new(config.peak_lr, config.warmup_steps);
    let (tau_lo, tau_hi) = (config.temperature_min.ln(), config.temperature_max.ln());
    let mut step: u64 = 0;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let pooled_a = batch
                .iter()
                .map(|&i| model.audio_pooled(&mut g, features[i].clone()))
                .collect::<Result<Vec<_>>>()?;
            let stacked_a = g.concat_rows(&pooled_a)?;
            let proj_a = model.audio_proj.forward(&mut g, &model.params, stacked_a)?;
            let audio = g.normalize_rows(proj_a)?;
            let pooled_t = batch
                .iter()
                .map(|&i| model.text_pooled(&mut g, &token_ids[i]))
                .collect::<Result<Vec<_>>>()?;
            let stacked_t = g.concat_rows(&pooled_t)?;
            let proj_t = model.text_proj.forward(&mut g, &model.params, stacked_t)?;
            let text = g.normalize_rows(proj_t)?;
            let log_tau = g.param(&model.params, model.log_tau)?;
            let neg = g.scale(log_tau, -1.0)?;
            let inv_tau = g.exp(neg)?;
            let loss = contrastive_loss(&mut g, audio, text, inv_tau)?;
            model.params.zero_grads();
            g.backward(loss, &mut model.params)?;
            step += 1;
            adamw.step(&mut model.params, schedule.lr_at(step)?)?;
            let t = model.params.value_mut(model.log_tau).data_mut();
            t[0] = t[0].clamp(tau_lo, tau_hi);
        }
    }
    Ok(model)
}

/// Fraction of audio queries whose nearest text embedding is their own pair.
pub fn retrieval_recall_at_1(model: &JointModel, pairs: &[(AudioClip, String)]) -> Result<f64> {
    let texts: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(_, c)| model.embed_text(c))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    for (i, (clip, _)) in pairs.iter().enumerate() {
        let a = model.embed_audio(clip)?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, t) in texts.iter().enumerate() {
            let sim: f64 = a.iter().zip(t).map(|(x, y)| x * y).sum();
            if sim > best.1 {
                best = (j, sim);
            }
        }
        if best.0 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows
            .into_iter()
            .flat_map(|row| {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.into_iter().map(move |x| x / n)
            })
            .collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    fn loss_value(a: Tensor, t: Tensor, inv_tau: f64) -> f64 {
        let mut g = Graph::new();
        let av = g.constant(a).unwrap();
        let tv = g.constant(t).unwrap();
        let it = g.constant(Tensor::scalar(inv_tau)).unwrap();
        let l = contrastive_loss(&mut g, av, tv, it).unwrap();
        g.value(l).item()
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let a = unit_rows(vec![vec![1.0, 2.0, -0.5]]);
        let t = unit_rows(vec![vec![0.3, -1.0, 0.7]]);
        assert!(loss_value(a, t, 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_log_b() {
        let row = vec![0.5, -0.5, 1.0, 0.25];
        let a = unit_rows(vec![row.clone(); 3]);
        let t = unit_rows(vec![row; 3]);
        assert!((loss_value(a, t, 1.0) - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pair_matches_scalar_oracle() {
        // similarity matrix [[1,0],[0,1]] at temperature 1:
        // each row's CE = -ln(e / (e + 1)) = ln(1 + e^{-1})
        let a = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let t = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss_value(a, t, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_symmetric_and_permutation_invariant() {
        let a = unit_rows(vec![vec![0.2, 1.0, -0.3], vec![1.0, 0.1, 0.4], vec![-0.6, 0.5, 0.9]]);
        let t = unit_rows(vec![vec![0.9, -0.2, 0.1], vec![0.3, 0.8, -0.5], vec![0.2, 0.2, 1.0]]);
        let l = loss_value(a.clone(), t.clone(), 2.0);
        let l_swapped = loss_value(t.clone(), a.clone(), 2.0);
        assert!((l - l_swapped).abs() < 1e-12);

        let perm = [2usize, 0, 1];
        let pa = unit_rows(perm.iter().map(|&i| a.row(i).to_vec()).collect());
        let pt = unit_rows(perm.iter().map(|&i| t.row(i).to_vec()).collect());
        let l_perm = loss_value(pa, pt, 2.0);
        assert!((l - l_perm).abs() < 1e-12);
        assert!(l >= 0.0);
    }

    #[test]
    fn non_normalized_rows_rejected() {
        let a = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let t = unit_rows(vec![vec![1.0, 0.0]]);
        let mut g = Graph::new();
        let av = g.constant(a).unwrap();
        let tv = g.constant(t).unwrap();
        let it = g.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            contrastive_loss(&mut g, av, tv, it),
            Err(JointError::NotNormalized { .. })
        ));
    }

    fn tone_clip(freq: f64, seconds: f64) -> AudioClip {
        let sr = 16000;
        let n = (seconds * sr as f64) as usize;
        AudioClip::new(
            (0..n)
                .map(|i| 0.7 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let vocab = Vocab::build(&vec!["a low tone".to_string(), "a high tone".to_string()]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = JointModel::new(JointConfig::default(), vocab, &mut rng);
        let clip = tone_clip(440.0, 0.5);
        let e1 = model.embed_audio(&clip).unwrap();
        let e2 = model.embed_audio(&clip).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let t = model.embed_text("a low tone").unwrap();
        let tn: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((tn - 1.0).abs() < 1e-9);
    }

    #[test]
    fn short_training_run_reduces_loss_and_is_deterministic() {
        let pairs: Vec<(AudioClip, String)> = vec![
            (tone_clip(300.0, 0.3), "a low tone".to_string()),
            (tone_clip(1800.0, 0.3), "a high tone".to_string()),
            (tone_clip(350.0, 0.3), "a deep tone".to_string()),
            (tone_clip(2100.0, 0.3), "a shrill tone".to_string()),
        ];
        let cfg = JointConfig { epochs: 12, batch_size: 4, ..JointConfig::default() };

        let eval_loss = |model: &JointModel| -> f64 {
            let mut g = Graph::new();
            let clips: Vec<&AudioClip> = pairs.iter().map(|(c, _)| c).collect();
            let a = model.embed_audio_batch(&mut g, &clips).unwrap();
            let ids: Vec<Vec<usize>> =
                pairs.iter().map(|(_, c)| model.vocab.encode(c)).collect();
            let t = model.embed_text_batch(&mut g, &ids).unwrap();
            let it = g.constant(Tensor::scalar(1.0 / model.temperature())).unwrap();
            let l = contrastive_loss(&mut g, a, t, it).unwrap();
            g.value(l).item()
        };

        let trained = train_joint(&pairs, &cfg, 5).unwrap();
        let trained2 = train_joint(&pairs, &cfg, 5).unwrap();
        for (id, p) in trained.params.iter() {
            assert_eq!(p.value.data(), trained2.params.value(id).data());
        }

        let vocab = Vocab::build(&pairs.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let untrained = JointModel::new(cfg.clone(), vocab, &mut rng);
        assert!(eval_loss(&trained) < eval_loss(&untrained));
        assert!(trained.temperature() >= cfg.temperature_min);
        assert!(trained.temperature() <= cfg.temperature_max);
    }

    #[test]
    fn degenerate_corpus_warns_but_trains() {
        let pairs: Vec<(AudioClip, String)> = vec![
            (tone_clip(300.0, 0.2), "a tone".to_string()),
            (tone_clip(900.0, 0.2), "a tone".to_string()),
        ];
        let cfg = JointConfig { epochs: 1, batch_size: 2, ..JointConfig::default() };
        let model = train_joint(&pairs, &cfg, 0).unwrap();
        assert_eq!(model.warnings.len(), 1);
    }

    #[test]
    fn too_few_pairs_rejected() {
        let pairs = vec![(tone_clip(440.0, 0.2), "a tone".to_string())];
        assert!(matches!(
            train_joint(&pairs, &JointConfig::default(), 0),
            Err(JointError::TooFewPairs(1))
        ));
    }
}
