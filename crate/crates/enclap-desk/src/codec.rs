//! Neural audio codec: frame encoder, residual vector quantization, and a
//! reconstruction decoder used only while training the codec itself.
//!
//! Downstream consumers depend only on [`codec_encode`] and the
//! [`CodeMatrix`] contract; the encoder architecture behind it is a small
//! strided stack expressed as matmuls over pre-extracted patches.

use crate::autodiff::{AdamWState, AutodiffError, Graph, LrSchedule, ParamStore, Tensor, Var};
use crate::audio::AudioClip;
use crate::nn::{init_matrix, Linear};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("clip of {samples} samples is shorter than one frame at {frame_hz} Hz")]
    ClipTooShort { samples: usize, frame_hz: u32 },
    #[error("latent dim {latent} does not match codebook dim {codebook}")]
    DimMismatch { latent: usize, codebook: usize },
    #[error("code {code} out of range for codebook of size {size}")]
    CodeOutOfRange { code: usize, size: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Discrete acoustic code matrix: row n is codebook n's code sequence,
/// column l is the code vector for frame l.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    /// N rows, each of length L.
    pub codes: Vec<Vec<usize>>,
    pub frame_hz: u32,
    pub source_duration_s: f64,
}

impl CodeMatrix {
    pub fn num_codebooks(&self) -> usize {
        self.codes.len()
    }

    /// Number of frames L.
    pub fn len(&self) -> usize {
        self.codes.first().map_or(0, |r| r.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, l: usize) -> Vec<usize> {
        self.codes.iter().map(|row| row[l]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub frame_hz: u32,
    /// Samples of context encoded per frame.
    pub frame_window: usize,
    pub commitment_beta: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            num_codebooks: 4,
            codebook_size: 64,
            latent_dim: 16,
            frame_hz: 75,
            frame_window: 432,
            commitment_beta: 0.25,
            ema_decay: 0.99,
            epochs: 8,
            peak_lr: 3e-3,
            warmup_steps: 100,
        }
    }
}

// Frame encoder geometry. Stage 1 is an im2col patch projection (the raw
// waveform needs no gradient); stage 2 is a differentiable strided window
// stack over stage-1 rows, pooled to one latent per frame.
const K1: usize = 32;
const S1: usize = 16;
const C1: usize = 8;
const K2: usize = 8;
const S2: usize = 2;
const C2: usize = 16;
const T1: usize = 26; // (frame_window - K1) / S1 + 1
const T2: usize = 10; // (T1 - K2) / S2 + 1
const DEC_HIDDEN: usize = 64;

pub struct CodecModel {
    pub config: CodecConfig,
    pub params: ParamStore,
    /// N codebooks, each (V x d); entry 0 of every codebook is pinned to
    /// the zero vector, which makes residual norms monotone across stages.
    pub codebooks: Vec<Tensor>,
    /// Distinct entries assigned at least once during the final training
    /// epoch, per codebook. A value below 2 means the codebook collapsed.
    pub codebook_usage: Vec<usize>,
    enc1: Linear,
    enc2: Linear,
    enc_out: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl CodecModel {
    pub fn new(config: CodecConfig, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!((config.frame_window - K1) / S1 + 1, T1);
        let mut params = ParamStore::new();
        let enc1 = Linear::new(&mut params, "codec.enc1", K1, C1, rng);
        let enc2 = Linear::new(&mut params, "codec.enc2", K2 * C1, C2, rng);
        let enc_out = Linear::new(&mut params, "codec.enc_out", C2, config.latent_dim, rng);
        let dec1 = Linear::new(&mut params, "codec.dec1", config.latent_dim, DEC_HIDDEN, rng);
        let dec2 = Linear::new(&mut params, "codec.dec2", DEC_HIDDEN, config.frame_window, rng);
        let codebooks = (0..config.num_codebooks)
            .map(|_| {
                let mut t = init_matrix(rng, config.codebook_size, config.latent_dim);
                t.data_mut()[..config.latent_dim].fill(0.0);
                t
            })
            .collect();
        CodecModel {
            codebook_usage: vec![config.codebook_size; config.num_codebooks],
            config,
            params,
            codebooks,
            enc1,
            enc2,
            enc_out,
            dec1,
            dec2,
        }
    }
}

/// Number of frames emitted for a clip, and the frame start positions.
fn frame_starts(clip: &AudioClip, frame_hz: u32) -> Result<Vec<usize>> {
    let num = (clip.duration_s() * frame_hz as f64).round() as usize;
    if num == 0 {
        return Err(CodecError::ClipTooShort {
            samples: clip.len(),
            frame_hz,
        });
    }
    let hop = clip.sample_rate_hz() as f64 / frame_hz as f64;
    Ok((0..num).map(|l| (l as f64 * hop).round() as usize).collect())
}

/// Frame windows as an (L x frame_window) matrix, zero-padded at the tail.
fn frame_windows(clip: &AudioClip, config: &CodecConfig) -> Result<Tensor> {
    let starts = frame_starts(clip, config.frame_hz)?;
    let w = config.frame_window;
    let samples = clip.samples();
    let mut data = vec![0.0; starts.len() * w];
    for (l, &start) in starts.iter().enumerate() {
        let end = (start + w).min(samples.len());
        if start < samples.len() {
            data[l * w..l * w + (end - start)].copy_from_slice(&samples[start..end]);
        }
    }
    Ok(Tensor::matrix(starts.len(), w, data)?)
}

/// im2col over frame windows: (L*T1) x K1 patch matrix.
fn im2col_patches(windows: &Tensor) -> Tensor {
    let l_frames = windows.rows();
    let w = windows.cols();
    let mut data = Vec::with_capacity(l_frames * T1 * K1);
    for l in 0..l_frames {
        let row = windows.row(l);
        for t in 0..T1 {
            let start = t * S1;
            data.extend_from_slice(&row[start..start + K1]);
        }
    }
    debug_assert_eq!(w, (T1 - 1) * S1 + K1);
    Tensor::matrix(l_frames * T1, K1, data).expect("patch shape")
}

/// Differentiable frame encoder over pre-extracted patches.
/// Returns an (L x d) latent matrix.
fn encoder_forward(
    g: &mut Graph,
    ps: &ParamStore,
    model: &CodecModel,
    patches: Var,
    l_frames: usize,
) -> Result<Var> {
    let h1 = model.enc1.forward(g, ps, patches)?;
    let h1 = g.gelu(h1)?;
    // strided windows within each frame; never crossing frame boundaries
    let mut windows = Vec::with_capacity(l_frames * T2);
    for l in 0..l_frames {
        for t in 0..T2 {
            let base = l * T1 + t * S2;
            windows.push((base..base + K2).collect());
        }
    }
    let unfolded = g.unfold_rows(h1, &windows)?;
    let h2 = model.enc2.forward(g, ps, unfolded)?;
    let h2 = g.gelu(h2)?;
    let pooled = g.mean_pool_rows(h2, T2)?;
    Ok(model.enc_out.forward(g, ps, pooled)?)
}

fn decoder_forward(g: &mut Graph, ps: &ParamStore, model: &CodecModel, z: Var) -> Result<Var> {
    let h = model.dec1.forward(g, ps, z)?;
    let h = g.gelu(h)?;
    Ok(model.dec2.forward(g, ps, h)?)
}

/// Latent frame sequence (L x d) for a clip under the current encoder.
pub fn encode_frames(clip: &AudioClip, model: &CodecModel) -> Result<Tensor> {
    let windows = frame_windows(clip, &model.config)?;
    let l_frames = windows.rows();
    let mut g = Graph::new();
    let patches = g.constant(im2col_patches(&windows))?;
    let z = encoder_forward(&mut g, &model.params, model, patches, l_frames)?;
    Ok(g.value(z).clone())
}

/// Residual quantization of one latent vector. Returns the per-stage codes
/// and the residual left after the final stage. Ties pick the lowest index.
pub fn rvq_quantize(latent: &[f64], codebooks: &[Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut residual = latent.to_vec();
    let mut codes = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        if cb.cols() != residual.len() {
            return Err(CodecError::DimMismatch { latent: residual.len(), codebook: cb.cols() });
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for v in 0..cb.rows() {
            let d: f64 = cb
                .row(v)
                .iter()
                .zip(&residual)
                .map(|(c, r)| (r - c) * (r - c))
                .sum();
            if d < best_d {
                best = v;
                best_d = d;
            }
        }
        for (r, c) in residual.iter_mut().zip(cb.row(best)) {
            *r -= c;
        }
        codes.push(best);
    }
    Ok((codes, residual))
}

/// Sum of the selected entries across stages.
pub fn rvq_dequantize(codes: &[usize], codebooks: &[Tensor]) -> Result<Vec<f64>> {
    let d = codebooks.first().map_or(0, |cb| cb.cols());
    let mut out = vec![0.0; d];
    for (cb, &code) in codebooks.iter().zip(codes) {
        if code >= cb.rows() {
            return Err(CodecError::CodeOutOfRange { code, size: cb.rows() });
        }
        for (o, c) in out.iter_mut().zip(cb.row(code)) {
            *o += c;
        }
    }
    Ok(out)
}

/// Full waveform-to-codes mapping: frame encoder then per-frame RVQ.
pub fn codec_encode(clip: &AudioClip, model: &CodecModel) -> Result<CodeMatrix> {
    let latents = encode_frames(clip, model)?;
    let n = model.config.num_codebooks;
    let mut codes = vec![Vec::with_capacity(latents.rows()); n];
    for l in 0..latents.rows() {
        let (frame_codes, _) = rvq_quantize(latents.row(l), &model.codebooks)?;
        for (row, c) in codes.iter_mut().zip(frame_codes) {
            row.push(c);
        }
    }
    Ok(CodeMatrix {
        codes,
        frame_hz: model.config.frame_hz,
        source_duration_s: clip.duration_s(),
    })
}

/// Per-codebook EMA accumulators for codebook entry updates.
struct EmaState {
    counts: Vec<Vec<f64>>,
    sums: Vec<Tensor>,
}

impl EmaState {
    fn new(model: &CodecModel) -> Self {
        EmaState {
            counts: vec![vec![1.0; model.config.codebook_size]; model.config.num_codebooks],
            sums: model.codebooks.clone(),
        }
    }
}

/// Quantizes every latent row; returns codes, the quantized matrix, and the
/// per-stage inputs (residual before each stage) needed for EMA updates.
fn quantize_batch(
    latents: &Tensor,
    codebooks: &[Tensor],
) -> Result<(Vec<Vec<usize>>, Tensor, Vec<Tensor>)> {
    let l_frames = latents.rows();
    let d = latents.cols();
    let n = codebooks.len();
    let mut codes = vec![Vec::with_capacity(l_frames); n];
    let mut zq = vec![0.0; l_frames * d];
    let mut stage_inputs = vec![vec![0.0; l_frames * d]; n];
    for l in 0..l_frames {
        let mut residual = latents.row(l).to_vec();
        for (s, cb) in codebooks.iter().enumerate() {
            stage_inputs[s][l * d..(l + 1) * d].copy_from_slice(&residual);
            let (code, next) = rvq_quantize(&residual, std::slice::from_ref(cb))?;
            codes[s].push(code[0]);
            residual = next;
        }
        for (q, (orig, res)) in zq[l * d..(l + 1) * d]
            .iter_mut()
            .zip(latents.row(l).iter().zip(&residual))
        {
            *q = orig - res;
        }
    }
    let stage_inputs = stage_inputs
        .into_iter()
        .map(|v| Tensor::matrix(l_frames, d, v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((codes, Tensor::matrix(l_frames, d, zq)?, stage_inputs))
}

fn ema_update(
    model: &mut CodecModel,
    ema: &mut EmaState,
    codes: &[Vec<usize>],
    stage_inputs: &[Tensor],
) {
    let d = model.config.latent_dim;
    let decay = model.config.ema_decay;
    for s in 0..model.config.num_codebooks {
        let mut batch_count = vec![0.0; model.config.codebook_size];
        let mut batch_sum = vec![0.0; model.config.codebook_size * d];
        for (l, &v) in codes[s].iter().enumerate() {
            batch_count[v] += 1.0;
            for (acc, x) in batch_sum[v * d..(v + 1) * d].iter_mut().zip(stage_inputs[s].row(l)) {
                *acc += x;
            }
        }
        let counts = &mut ema.counts[s];
        let sums = ema.sums[s].data_mut();
        let entries = model.codebooks[s].data_mut();
        // entry 0 stays the zero vector
        for v in 1..model.config.codebook_size {
            counts[v] = decay * counts[v] + (1.0 - decay) * batch_count[v];
            for i in 0..d {
                sums[v * d + i] =
                    decay * sums[v * d + i] + (1.0 - decay) * batch_sum[v * d + i];
                entries[v * d + i] = sums[v * d + i] / counts[v].max(1e-9);
            }
        }
    }
}

/// Reseeds entries whose EMA usage has decayed away, drawing replacement
/// vectors from the given latent rows. Entry 0 is never reseeded.
fn reseed_dead_codes(model: &mut CodecModel, ema: &mut EmaState, latents: &Tensor, rng: &mut ChaCha8Rng) {
    let d = model.config.latent_dim;
    for s in 0..model.config.num_codebooks {
        for v in 1..model.config.codebook_size {
            if ema.counts[s][v] < 0.03 {
                let l = rng.gen_range(0..latents.rows());
                let row = latents.row(l).to_vec();
                model.codebooks[s].data_mut()[v * d..(v + 1) * d].copy_from_slice(&row);
                ema.sums[s].data_mut()[v * d..(v + 1) * d].copy_from_slice(&row);
                ema.counts[s][v] = 1.0;
            }
        }
    }
}

/// Mean squared reconstruction error over frame windows, no training.
pub fn reconstruction_mse(clip: &AudioClip, model: &CodecModel) -> Result<f64> {
    let windows = frame_windows(clip, &model.config)?;
    let latents = encode_frames(clip, model)?;
    let (_, zq, _) = quantize_batch(&latents, &model.codebooks)?;
    let mut g = Graph::new();
    let z = g.constant(zq)?;
    let recon = decoder_forward(&mut g, &model.params, model, z)?;
    let target = g.constant(windows)?;
    let diff = g.sub(recon, target)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean_all(sq)?;
    Ok(g.value(mse).item())
}

/// Trains encoder/decoder by gradient descent and codebooks by EMA, then
/// freezes the model. One clip per optimization step.
pub fn train_codec(corpus: &[AudioClip], config: &CodecConfig, seed: u64) -> Result<CodecModel> {
    if corpus.is_empty() {
        return Err(CodecError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CodecModel::new(config.clone(), &mut rng);
    let mut ema = EmaState::new(&model);
    let mut adamw = AdamWState::new(&model.params, 0.9, 0.999, 0.01, 1e-8);
    let schedule = LrSchedule::new(config.peak_lr, config.warmup_steps);
    let mut step: u64 = 0;
    let mut usage: Vec<std::collections::HashSet<usize>> = Vec::new();

    // precompute per-clip constants once
    let prepared: Vec<(Tensor, Tensor)> = corpus
        .iter()
        .map(|clip| {
            let w = frame_windows(clip, config)?;
            let p = im2col_patches(&w);
            Ok((w, p))
        })
        .collect::<Result<Vec<_>>>()?;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let last_epoch = epoch + 1 == config.epochs;
        if last_epoch {
            usage = vec![std::collections::HashSet::new(); config.num_codebooks];
        }
        for &idx in &order {
            let (windows, patches) = &prepared[idx];
            let l_frames = windows.rows();
            let mut g = Graph::new();
            let patches_v = g.constant(patches.clone())?;
            let z_e = encoder_forward(&mut g, &model.params, &model, patches_v, l_frames)?;
            let latents = g.value(z_e).clone();
            let (codes, zq, stage_inputs) = quantize_batch(&latents, &model.codebooks)?;
            if last_epoch {
                for (set, row) in usage.iter_mut().zip(&codes) {
                    set.extend(row.iter().copied());
                }
            }
            // straight-through: decoder sees z_q, encoder receives its gradient
            let delta = {
                let mut d = zq.clone();
                for (q, e) in d.data_mut().iter_mut().zip(latents.data()) {
                    *q -= e;
                }
                d
            };
            let delta_v = g.constant(delta)?;
            let z_st = g.add(z_e, delta_v)?;
            let recon = decoder_forward(&mut g, &model.params, &model, z_st)?;
            let target = g.constant(windows.clone())?;
            let diff = g.sub(recon, target)?;
            let sq = g.mul(diff, diff)?;
            let recon_loss = g.mean_all(sq)?;
            // commitment: pull the encoder toward the (stopped) quantized code
            let zq_v = g.constant(zq)?;
            let cdiff = g.sub(z_e, zq_v)?;
            let csq = g.mul(cdiff, cdiff)?;
            let commit = g.mean_all(csq)?;
            let commit = g.scale(commit, config.commitment_beta)?;
            let loss = g.add(recon_loss, commit)?;
            model.params.zero_grads();
            g.backward(loss, &mut model.params)?;
            step += 1;
            adamw.step(&mut model.params, schedule.lr_at(step)?)?;
            ema_update(&mut model, &mut ema, &codes, &stage_inputs);
            reseed_dead_codes(&mut model, &mut ema, &latents, &mut rng);
        }
    }
    model.codebook_usage = usage.iter().map(|s| s.len()).collect();
    Ok(model)
}
