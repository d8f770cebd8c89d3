//! Semantic similarity and BLEU scoring.
//!
//! Sentence similarity is the cosine between 384-dimensional sentence
//! embeddings, averaged over the sentences of a text and clamped to [0, 1].
//! The embedding provider is pluggable: hermetic runs use a deterministic
//! fallback built from fixed per-word random vectors, while externally
//! comparable runs can plug in a pretrained sentence encoder behind the
//! same trait.
//!
//! BLEU is computed per sentence as `exp(BP + sum_n u_n ln p_n)` with
//! clipped n-gram precision and averaged over the text.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Output width of every sentence embedder.
pub const EMBED_DIM: usize = 384;

/// Maps a sentence to a fixed-width real vector.
pub trait SentenceEmbedder {
    /// 384-dimensional embedding; deterministic per sentence for a fixed
    /// provider.  The empty sentence maps to the zero vector.
    fn embed(&self, sentence: &str) -> Vec<f64>;
}

/// Deterministic, dependency-free embedder: the mean of fixed per-word
/// random vectors keyed by the word itself.
///
/// Unrelated sentences score near zero while sentences sharing words score
/// higher, which is all the desk-scale trend experiments need.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackEmbedder;

impl FallbackEmbedder {
    fn word_vector(word: &str) -> Vec<f64> {
        // FNV-1a of the word seeds a private stream per word identity.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in word.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..EMBED_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl SentenceEmbedder for FallbackEmbedder {
    fn embed(&self, sentence: &str) -> Vec<f64> {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let mut acc = vec![0.0; EMBED_DIM];
        if words.is_empty() {
            return acc;
        }
        for w in &words {
            for (a, v) in acc.iter_mut().zip(Self::word_vector(w)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= words.len() as f64;
        }
        acc
    }
}

/// Cosine similarity clamped to [0, 1]; zero vectors are rejected.
pub fn cosine_similarity(mu: &[f64], mu_hat: &[f64]) -> Result<f64> {
    assert_eq!(mu.len(), mu_hat.len(), "embedding widths differ");
    let na = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = mu_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = mu.iter().zip(mu_hat).map(|(a, b)| a * b).sum();
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// Average per-sentence cosine similarity between a text and its decode.
///
/// A missing or empty decoded sentence contributes zero.
pub fn text_similarity<E: SentenceEmbedder>(
    text: &[String],
    decoded: &[String],
    embedder: &E,
) -> Result<f64> {
    assert!(!text.is_empty(), "reference text is empty");
    let mut total = 0.0;
    for (j, sentence) in text.iter().enumerate() {
        let cand = decoded.get(j).map(String::as_str).unwrap_or("");
        if cand.trim().is_empty() {
            continue;
        }
        let mu = embedder.embed(sentence);
        let mu_hat = embedder.embed(cand);
        total += cosine_similarity(&mu, &mu_hat)?;
    }
    Ok(total / text.len() as f64)
}

/// Which way the brevity term reads its length ratio.
///
/// `PenalizeShort` is the conventional orientation, `BP = min(1 - ref/cand, 0)`,
/// and the default; `PenalizeLong` is the literal printed ratio
/// `min(1 - cand/ref, 0)`, kept behind this toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BrevityOrientation {
    #[default]
    PenalizeShort,
    PenalizeLong,
}

/// Per-order and combined BLEU for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuScores {
    /// `per_order[n-1]` is the order-n score `mean_j exp(BP_j + ln p_n)`.
    pub per_order: Vec<f64>,
    /// `mean_j exp(BP_j + sum_n u_n ln p_n)` with the given weights.
    pub combined: f64,
}

/// BLEU over aligned sentence lists with uniform weights up to order 4.
pub fn bleu(text: &[String], decoded: &[String]) -> BleuScores {
    bleu_weighted(
        text,
        decoded,
        &[0.25; 4],
        BrevityOrientation::PenalizeShort,
    )
}

/// BLEU with explicit n-gram weights (`weights.len()` is the maximum order).
pub fn bleu_weighted(
    text: &[String],
    decoded: &[String],
    weights: &[f64],
    orientation: BrevityOrientation,
) -> BleuScores {
    assert!(!text.is_empty(), "reference text is empty");
    assert!(!weights.is_empty());
    let n_max = weights.len();
    let mut per_order = vec![0.0; n_max];
    let mut combined = 0.0;
    for (j, sentence) in text.iter().enumerate() {
        let cand = decoded.get(j).map(String::as_str).unwrap_or("");
        let (orders, bp) = sentence_precisions(sentence, cand, n_max, orientation);
        let mut log_sum = 0.0;
        let mut all_defined = true;
        for (n, p) in orders.iter().enumerate() {
            match p {
                Some(pn) => {
                    per_order[n] += (bp + pn.ln()).exp();
                    log_sum += weights[n] * pn.ln();
                }
                None => {
                    all_defined = false;
                }
            }
        }
        if all_defined {
            combined += (bp + log_sum).exp();
        }
    }
    let l = text.len() as f64;
    for p in &mut per_order {
        *p /= l;
    }
    BleuScores {
        per_order,
        combined: combined / l,
    }
}

/// Raw clipped n-gram precisions for one sentence pair, without smoothing.
///
/// `None` marks orders with no candidate n-grams at all; zero-match orders
/// report `Some(0.0)`.  These are non-increasing in the order.
pub fn clipped_precisions(reference: &str, candidate: &str, n_max: usize) -> Vec<Option<f64>> {
    let ref_words: Vec<&str> = reference.split_whitespace().collect();
    let cand_words: Vec<&str> = candidate.split_whitespace().collect();
    (1..=n_max)
        .map(|n| {
            if cand_words.len() < n {
                return None;
            }
            let ref_counts = ngram_counts(&ref_words, n);
            let cand_counts = ngram_counts(&cand_words, n);
            let total: usize = cand_counts.values().sum();
            let clipped: usize = cand_counts
                .iter()
                .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
                .sum();
            Some(clipped as f64 / total as f64)
        })
        .collect()
}

/// Precisions (smoothed where the clipped count is zero) and the brevity
/// term for one sentence pair.
fn sentence_precisions(
    reference: &str,
    candidate: &str,
    n_max: usize,
    orientation: BrevityOrientation,
) -> (Vec<Option<f64>>, f64) {
    let ref_words: Vec<&str> = reference.split_whitespace().collect();
    let cand_words: Vec<&str> = candidate.split_whitespace().collect();
    if cand_words.is_empty() {
        return (vec![None; n_max], f64::NEG_INFINITY);
    }
    let bp = match orientation {
        BrevityOrientation::PenalizeShort => {
            (1.0 - ref_words.len() as f64 / cand_words.len() as f64).min(0.0)
        }
        BrevityOrientation::PenalizeLong => {
            (1.0 - cand_words.len() as f64 / ref_words.len() as f64).min(0.0)
        }
    };
    let orders = clipped_precisions(reference, candidate, n_max)
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            p.map(|p| {
                if p == 0.0 {
                    // Zero-count smoothing keeps the logarithm finite.
                    let total = cand_words.len() - i;
                    1.0 / (2.0 * total as f64)
                } else {
                    p
                }
            })
        })
        .collect();
    (orders, bp)
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if words.len() < n {
        return counts;
    }
    for i in 0..=words.len() - n {
        *counts.entry(&words[i..i + n]).or_insert(0) += 1;
    }
    counts
}

/// One user's evaluated quality.
#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user_index: usize,
    /// Average sentence similarity `delta` in [0, 1].
    pub similarity: f64,
    /// BLEU-1..BLEU-4 (per-order scores).
    pub bleu: [f64; 4],
}

/// Per-user metrics plus the minimum across users against a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub users: Vec<UserMetrics>,
    pub min_similarity: f64,
    pub min_bleu: [f64; 4],
    /// Target `zeta` on the min similarity.
    pub threshold: f64,
    pub pass: bool,
}

/// Elementwise minimum across users for every metric.
pub fn min_across_users(users: Vec<UserMetrics>, threshold: f64) -> MetricReport {
    assert!(!users.is_empty(), "need at least one user");
    let min_similarity = users.iter().map(|u| u.similarity).fold(f64::INFINITY, f64::min);
    let mut min_bleu = [f64::INFINITY; 4];
    for u in &users {
        for (mb, b) in min_bleu.iter_mut().zip(u.bleu) {
            *mb = mb.min(b);
        }
    }
    let pass = min_similarity >= threshold;
    MetricReport {
        users,
        min_similarity,
        min_bleu,
        threshold,
        pass,
    }
}
