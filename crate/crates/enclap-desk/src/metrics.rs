//! Caption evaluation: CIDEr-D, an exact-match METEOR variant, and the
//! synthetic event-recall score, plus the corpus evaluation report.

use crate::synth::parse_caption;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpus must contain at least 2 items for IDF, got {0}")]
    CorpusTooSmall(usize),
    #[error("candidate and reference counts differ: {candidates} vs {references}")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("item {0} has no references")]
    NoReferences(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Lowercases, strips punctuation except intra-word apostrophes, splits on
/// whitespace. Idempotent on its own output.
pub fn tokenize_caption(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let tok: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .flat_map(|c| c.to_lowercase())
                .collect();
            let tok = tok.trim_matches('\'').to_string();
            if tok.is_empty() {
                None
            } else {
                Some(tok)
            }
        })
        .collect()
}

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

type Counts = HashMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut m = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// CIDEr-D: TF-IDF n-gram cosine (n = 1..4) with a Gaussian length penalty,
/// averaged over references and n, scaled by 10. Document frequencies come
/// from the reference sets; a corpus needs at least 2 items.
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<(f64, Vec<f64>)> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if references.len() < 2 {
        return Err(MetricsError::CorpusTooSmall(references.len()));
    }
    for (i, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(MetricsError::NoReferences(i));
        }
    }
    let m_docs = references.len() as f64;
    // df[n][gram] = number of reference sets containing the gram
    let mut df: Vec<Counts> = vec![Counts::new(); MAX_N];
    for refs in references {
        for n in 1..=MAX_N {
            let mut seen = Counts::new();
            for r in refs {
                for g in ngram_counts(r, n).into_keys() {
                    seen.insert(g, 1.0);
                }
            }
            for g in seen.into_keys() {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, g: &Vec<String>| -> f64 {
        let d = df[n - 1].get(g).copied().unwrap_or(0.0).max(1.0);
        (m_docs / d).ln()
    };
    let vectorize = |tokens: &[String], n: usize| -> (Counts, f64) {
        let mut v = Counts::new();
        for (g, tf) in ngram_counts(tokens, n) {
            let w = idf(n, &g);
            v.insert(g, tf * w);
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    };

    let mut per_item = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let mut score_n = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let (cv, cn) = vectorize(cand, n);
            for r in refs {
                let (rv, rn) = vectorize(r, n);
                if cn == 0.0 || rn == 0.0 {
                    continue;
                }
                // clipped TF: min(candidate, reference) weight per gram
                let mut dot = 0.0;
                for (g, &cw) in &cv {
                    if let Some(&rw) = rv.get(g) {
                        dot += cw.min(rw) * rw;
                    }
                }
                let delta = cand.len() as f64 - r.len() as f64;
                let penalty = (-delta * delta / (2.0 * SIGMA * SIGMA)).exp();
                score_n[n - 1] += dot / (cn * rn) * penalty;
            }
        }
        let score =
            score_n.iter().sum::<f64>() / MAX_N as f64 / refs.len() as f64 * 10.0;
        per_item.push(score);
    }
    let corpus = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok((corpus, per_item))
}

/// Greedy exact-match unigram alignment preferring the fewest chunks: each
/// candidate token takes the reference position immediately after the
/// previous match when possible, else the lowest free position.
fn align(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0usize;
    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for tok in cand {
        let next = prev.map(|p| p + 1);
        let contiguous = next
            .filter(|&p| p < reference.len() && !used[p] && reference[p] == *tok);
        let pos = contiguous.or_else(|| {
            (0..reference.len()).find(|&p| !used[p] && reference[p] == *tok)
        });
        match pos {
            Some(p) => {
                used[p] = true;
                if next != Some(p) {
                    chunks += 1;
                }
                matches += 1;
                prev = Some(p);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

fn meteor_single(cand: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = align(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// Exact-match METEOR variant (no stemming or synonym matching). Takes the
/// best-scoring reference per item.
pub fn meteor_lite(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<(f64, Vec<f64>)> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut per_item = Vec::with_capacity(candidates.len());
    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(MetricsError::NoReferences(i));
        }
        let best = refs
            .iter()
            .map(|r| if cand.is_empty() { 0.0 } else { meteor_single(cand, r) })
            .fold(0.0f64, f64::max);
        per_item.push(best);
    }
    let corpus = if per_item.is_empty() {
        0.0
    } else {
        per_item.iter().sum::<f64>() / per_item.len() as f64
    };
    Ok((corpus, per_item))
}

/// Fraction of ground-truth events (kind, pitch, order-sensitive prefix
/// match) that the candidate caption names, judged by the rule-based parser.
pub fn event_recall(candidate: &str, reference: &str) -> f64 {
    let truth = parse_caption(reference);
    if truth.is_empty() {
        return 0.0;
    }
    let got = parse_caption(candidate);
    // longest common subsequence preserves temporal order credit
    let n = truth.len();
    let m = got.len();
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..n {
        for j in 0..m {
            dp[i + 1][j + 1] = if truth[i] == got[j] {
                dp[i][j] + 1
            } else {
                dp[i][j + 1].max(dp[i + 1][j])
            };
        }
    }
    dp[n][m] as f64 / n as f64
}

#[derive(Debug, Clone)]
pub struct EvalItem {
    pub item_id: String,
    pub cider_d: f64,
    pub meteor_lite: f64,
    pub event_recall: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub model_id: String,
    pub split: String,
    pub seed: u64,
    pub cider_d: f64,
    pub meteor_lite: f64,
    pub event_recall: f64,
    pub items: Vec<EvalItem>,
}

/// Scores candidate captions against references. `ids`, `candidates` and
/// `references` are parallel; event recall uses the first reference as the
/// semantic ground truth.
pub fn evaluate(
    model_id: &str,
    split: &str,
    seed: u64,
    ids: &[String],
    candidates: &[String],
    references: &[Vec<String>],
) -> Result<EvalReport> {
    let cand_tok: Vec<Vec<String>> = candidates.iter().map(|c| tokenize_caption(c)).collect();
    let ref_tok: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize_caption(r)).collect())
        .collect();
    let (cider_corpus, cider_items) = cider_d(&cand_tok, &ref_tok)?;
    let (meteor_corpus, meteor_items) = meteor_lite(&cand_tok, &ref_tok)?;
    let mut items = Vec::with_capacity(ids.len());
    let mut recall_sum = 0.0;
    for i in 0..ids.len() {
        let recall = event_recall(&candidates[i], &references[i][0]);
        recall_sum += recall;
        items.push(EvalItem {
            item_id: ids[i].clone(),
            cider_d: cider_items[i],
            meteor_lite: meteor_items[i],
            event_recall: recall,
        });
    }
    Ok(EvalReport {
        model_id: model_id.to_string(),
        split: split.to_string(),
        seed,
        cider_d: cider_corpus,
        meteor_lite: meteor_corpus,
        event_recall: recall_sum / ids.len().max(1) as f64,
        items,
    })
}

impl EvalReport {
    /// Line-oriented key/value summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model_id = {}", self.model_id);
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "items = {}", self.items.len());
        let _ = writeln!(s, "cider_d = {:.6}", self.cider_d);
        let _ = writeln!(s, "meteor_lite = {:.6}", self.meteor_lite);
        let _ = writeln!(s, "event_recall = {:.6}", self.event_recall);
        s
    }

    /// Machine-readable per-item table.
    pub fn csv(&self) -> String {
        let mut s = String::from("item_id,cider_d,meteor_lite,event_recall\n");
        for it in &self.items {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                it.item_id, it.cider_d, it.meteor_lite, it.event_recall
            );
        }
        s
    }
}
