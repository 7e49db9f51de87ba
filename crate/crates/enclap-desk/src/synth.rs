//! Procedural (audio clip, caption) corpus with known ground truth.
//!
//! Clips are additive mixes of 1-3 parametric sound events; captions come
//! from a small templated grammar whose event kinds, pitch classes and
//! temporal order are exactly recoverable by [`parse_caption`]. That parser
//! is the oracle behind the end-to-end event-recall metric.

use crate::audio::{AudioClip, AudioError};
use crate::data::{write_captions, write_manifest, DataError, ManifestEntry};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("a clip needs at least one event")]
    NoEvents,
    #[error("split sizes must each be >= 10 (got {0})")]
    SplitTooSmall(usize),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Tone,
    Chirp,
    NoiseBurst,
    ClickTrain,
    Siren,
}

pub const ALL_KINDS: [EventKind; 5] = [
    EventKind::Tone,
    EventKind::Chirp,
    EventKind::NoiseBurst,
    EventKind::ClickTrain,
    EventKind::Siren,
];

impl EventKind {
    pub fn is_pitched(self) -> bool {
        matches!(self, EventKind::Tone | EventKind::Chirp | EventKind::Siren)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pitch {
    Low,
    High,
}

/// One sound event inside a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub kind: EventKind,
    pub pitch: Option<Pitch>,
    pub freq_hz: f64,
    pub onset_s: f64,
    pub duration_s: f64,
    pub amplitude: f64,
}

/// Semantic signature: event kinds with pitch class, in temporal order.
pub type Signature = Vec<(EventKind, Option<Pitch>)>;

pub fn signature(specs: &[EventSpec]) -> Signature {
    let mut s: Vec<&EventSpec> = specs.iter().collect();
    s.sort_by(|a, b| a.onset_s.partial_cmp(&b.onset_s).unwrap());
    s.iter().map(|e| (e.kind, e.pitch)).collect()
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Additive synthesis of the events, peak-normalized to 0.9.
pub fn synth_clip(
    specs: &[EventSpec],
    duration_s: f64,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<AudioClip, SynthError> {
    if specs.is_empty() {
        return Err(SynthError::NoEvents);
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut mix = vec![0.0f64; n.max(1)];
    for spec in specs {
        render_event(spec, sample_rate, rng, &mut mix);
    }
    let peak = mix.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let s = 0.9 / peak;
        mix.iter_mut().for_each(|v| *v *= s);
    }
    Ok(AudioClip::new(mix, sample_rate)?)
}

fn render_event(spec: &EventSpec, sample_rate: u32, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let sr = sample_rate as f64;
    let start = (spec.onset_s * sr).round() as usize;
    let len = (spec.duration_s * sr).round() as usize;
    let end = (start + len).min(out.len());
    let fade = (0.01 * sr) as usize; // 10 ms edges
    let mut phase = 0.0f64;
    for i in start..end {
        let t = (i - start) as f64 / sr;
        let rel = i - start;
        let env = envelope(rel, end - start, fade);
        let v = match spec.kind {
            EventKind::Tone => (2.0 * std::f64::consts::PI * spec.freq_hz * t).sin(),
            EventKind::Chirp => {
                // linear sweep from f to 2.5 f over the event
                let f0 = spec.freq_hz;
                let k = 1.5 * f0 / spec.duration_s;
                (2.0 * std::f64::consts::PI * (f0 * t + 0.5 * k * t * t)).sin()
            }
            EventKind::Siren => {
                let f = spec.freq_hz
                    * (1.0 + 0.45 * (2.0 * std::f64::consts::PI * 5.0 * t).sin());
                phase += 2.0 * std::f64::consts::PI * f / sr;
                phase.sin()
            }
            EventKind::NoiseBurst => rng.gen_range(-1.0..1.0),
            EventKind::ClickTrain => {
                // 10 Hz train of 2 ms decaying impulses
                let within = t % 0.1;
                if within < 0.002 {
                    (1.0 - within / 0.002) * if ((t / 0.1) as usize) % 2 == 0 { 1.0 } else { -1.0 }
                } else {
                    0.0
                }
            }
        };
        out[i] += spec.amplitude * env * v;
    }
}

fn envelope(i: usize, len: usize, fade: usize) -> f64 {
    let fade = fade.min(len / 2).max(1);
    if i < fade {
        i as f64 / fade as f64
    } else if i + fade > len {
        (len - i) as f64 / fade as f64
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Caption grammar and parser
// ---------------------------------------------------------------------------

pub const NUM_VARIANTS: usize = 5;

const CONNECTIVES: [&str; NUM_VARIANTS] =
    ["followed by", "then", "and then", "giving way to", "leading into"];

fn phrases(kind: EventKind, pitch: Option<Pitch>) -> [&'static str; NUM_VARIANTS] {
    use EventKind::*;
    use Pitch::*;
    match (kind, pitch) {
        (Tone, Some(Low)) => [
            "a low tone",
            "a deep tone",
            "a low beep",
            "a low steady tone",
            "a deep beep",
        ],
        (Tone, Some(High)) => [
            "a high tone",
            "a high pitched tone",
            "a sharp beep",
            "a high beep",
            "a shrill tone",
        ],
        (Chirp, Some(Low)) => [
            "a low chirp",
            "a deep rising chirp",
            "a low sweep",
            "a low rising sweep",
            "a deep chirp",
        ],
        (Chirp, Some(High)) => [
            "a high chirp",
            "a high rising chirp",
            "a sharp sweep",
            "a high sweep",
            "a shrill chirp",
        ],
        (Siren, Some(Low)) => [
            "a low siren",
            "a deep siren",
            "a low howling siren",
            "a deep droning siren",
            "a low slow siren",
        ],
        (Siren, Some(High)) => [
            "a high siren",
            "a high pitched siren",
            "a shrill siren",
            "a sharp siren",
            "a high wavering siren",
        ],
        (NoiseBurst, None) => [
            "a burst of noise",
            "a noise burst",
            "a burst of static",
            "a crackle of static",
            "a rush of noise",
        ],
        (ClickTrain, None) => [
            "a series of clicks",
            "a train of clicks",
            "rapid clicking",
            "a run of clicks",
            "steady ticking",
        ],
        _ => unreachable!("pitch class only applies to tonal events"),
    }
}

/// Deterministic surface form `variant` (0-based) for an event sequence.
pub fn render_caption_variant(specs: &[EventSpec], variant: usize) -> String {
    let sig = signature(specs);
    let v = variant % NUM_VARIANTS;
    let parts: Vec<&str> = sig.iter().map(|&(k, p)| phrases(k, p)[v]).collect();
    parts.join(&format!(" {} ", CONNECTIVES[v]))
}

/// Random surface form.
pub fn render_caption(specs: &[EventSpec], rng: &mut ChaCha8Rng) -> String {
    render_caption_variant(specs, rng.gen_range(0..NUM_VARIANTS))
}

/// All five paraphrases; pairwise distinct by construction.
pub fn render_paraphrases(specs: &[EventSpec]) -> Vec<String> {
    (0..NUM_VARIANTS).map(|v| render_caption_variant(specs, v)).collect()
}

fn pitch_keyword(tok: &str) -> Option<Pitch> {
    match tok {
        "low" | "deep" => Some(Pitch::Low),
        "high" | "sharp" | "shrill" => Some(Pitch::High),
        _ => None,
    }
}

fn kind_keyword(tok: &str) -> Option<EventKind> {
    match tok {
        "tone" | "beep" => Some(EventKind::Tone),
        "chirp" | "sweep" => Some(EventKind::Chirp),
        "noise" | "static" => Some(EventKind::NoiseBurst),
        "clicks" | "clicking" | "ticking" => Some(EventKind::ClickTrain),
        "siren" => Some(EventKind::Siren),
        _ => None,
    }
}

/// Rule-based inverse of the caption grammar: recovers (kind, pitch) pairs
/// in order. Also usable on model output, where unknown words are skipped.
pub fn parse_caption(text: &str) -> Signature {
    let mut out = Vec::new();
    let mut pending: Option<Pitch> = None;
    for tok in text.split_whitespace() {
        let tok: String = tok
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '\'')
            .collect::<String>()
            .to_lowercase();
        if let Some(p) = pitch_keyword(&tok) {
            pending = Some(p);
        } else if let Some(k) = kind_keyword(&tok) {
            out.push((k, if k.is_pitched() { pending } else { None }));
            pending = None;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub sample_rate: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_events: usize,
    pub max_events: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 2000,
            val: 200,
            test: 200,
            sample_rate: 16000,
            min_duration_s: 1.0,
            max_duration_s: 4.0,
            min_events: 1,
            max_events: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub specs: Vec<EventSpec>,
    pub duration_s: f64,
    pub clip: AudioClip,
    /// 1 caption for train items, 5 paraphrases for val/test.
    pub captions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<CorpusItem>,
    pub val: Vec<CorpusItem>,
    pub test: Vec<CorpusItem>,
}

/// Bag sampler that keeps event kinds balanced: refills with a shuffled
/// copy of all kinds whenever it runs dry.
struct KindBag {
    bag: Vec<EventKind>,
}

impl KindBag {
    fn new() -> Self {
        KindBag { bag: Vec::new() }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> EventKind {
        if self.bag.is_empty() {
            self.bag = ALL_KINDS.to_vec();
            self.bag.shuffle(rng);
        }
        self.bag.pop().unwrap()
    }
}

fn random_pitch(kind: EventKind, rng: &mut ChaCha8Rng) -> Option<Pitch> {
    if kind.is_pitched() {
        Some(if rng.gen_bool(0.5) { Pitch::Low } else { Pitch::High })
    } else {
        None
    }
}

fn freq_for(kind: EventKind, pitch: Option<Pitch>, rng: &mut ChaCha8Rng) -> f64 {
    match (kind, pitch) {
        (_, Some(Pitch::Low)) => rng.gen_range(220.0..420.0),
        (_, Some(Pitch::High)) => rng.gen_range(1300.0..2300.0),
        _ => 0.0,
    }
}

fn build_specs(sig: &Signature, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<EventSpec> {
    let n = sig.len();
    let seg = duration_s / n as f64;
    sig.iter()
        .enumerate()
        .map(|(i, &(kind, pitch))| {
            let freq_hz = freq_for(kind, pitch, rng);
            let dur = seg * rng.gen_range(0.6..0.85);
            let onset = seg * i as f64 + seg * rng.gen_range(0.02..0.1);
            EventSpec {
                kind,
                pitch,
                freq_hz,
                onset_s: onset,
                duration_s: dur,
                amplitude: rng.gen_range(0.6..1.0),
            }
        })
        .collect()
}

pub fn make_corpus(cfg: &SynthConfig, seed: u64) -> Result<CorpusSplit, SynthError> {
    for size in [cfg.train, cfg.val, cfg.test] {
        if size < 10 {
            return Err(SynthError::SplitTooSmall(size));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bag = KindBag::new();

    let mut make_split = |name: &str, size: usize, unique: bool, refs: usize| -> Result<Vec<CorpusItem>, SynthError> {
        let mut used: HashSet<Signature> = HashSet::new();
        let mut items = Vec::with_capacity(size);
        for idx in 0..size {
            let duration_s = rng.gen_range(cfg.min_duration_s..=cfg.max_duration_s);
            let mut sig: Signature;
            let mut attempts = 0;
            loop {
                let n_events = rng.gen_range(cfg.min_events..=cfg.max_events);
                sig = (0..n_events)
                    .map(|_| {
                        let k = bag.draw(&mut rng);
                        (k, random_pitch(k, &mut rng))
                    })
                    .collect();
                attempts += 1;
                if !unique || !used.contains(&sig) || attempts > 200 {
                    break;
                }
            }
            used.insert(sig.clone());
            let specs = build_specs(&sig, duration_s, &mut rng);
            let clip = synth_clip(&specs, duration_s, cfg.sample_rate, &mut rng)?;
            let captions = if refs == 1 {
                vec![render_caption(&specs, &mut rng)]
            } else {
                render_paraphrases(&specs)
            };
            items.push(CorpusItem {
                id: format!("{name}_{idx:05}"),
                specs,
                duration_s,
                clip,
                captions,
            });
        }
        Ok(items)
    };

    let train = make_split("train", cfg.train, false, 1)?;
    let val = make_split("val", cfg.val, true, 5)?;
    let test = make_split("test", cfg.test, true, 5)?;
    Ok(CorpusSplit { train, val, test })
}

/// Writes manifests, caption files and PCM clips under `dir`.
pub fn write_corpus(split: &CorpusSplit, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir.join("clips")).map_err(|e| {
        SynthError::Data(DataError::Io { path: dir.display().to_string(), source: e })
    })?;
    for (stem, items) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let mut captions = Vec::new();
        let mut entries = Vec::new();
        for item in items.iter() {
            let rel = format!("clips/{}.pcm", item.id);
            item.clip.write_pcm(&dir.join(&rel))?;
            let ids: Vec<usize> = (0..item.captions.len()).map(|k| captions.len() + k).collect();
            captions.extend(item.captions.iter().cloned());
            entries.push(ManifestEntry {
                path: rel,
                sample_rate: item.clip.sample_rate_hz(),
                duration_s: item.duration_s,
                caption_ids: ids,
            });
        }
        write_manifest(&dir.join(format!("{stem}.manifest")), &entries)?;
        write_captions(&dir.join(format!("{stem}.captions.txt")), &captions)?;
    }
    Ok(())
}
