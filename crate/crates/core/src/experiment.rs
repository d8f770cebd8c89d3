//! Frame-level evaluation of trained systems and the classical baseline.
//!
//! References are chunked into frames of `L` sentences, transmitted over a
//! fresh channel realization per frame, decoded (either by the joint SIC
//! decoder or the two-phase decoder used after partial retraining), and
//! scored with sentence similarity and BLEU.

use crate::baseline::{classical_sic_receive, ClassicalCodec};
use crate::channel::{transmit_mac, ChannelConfig};
use crate::codec::{encode_text, CodecDims};
use crate::corpus::{tokenize_and_filter, Batch, TokenizedSentence, Vocabulary};
use crate::metrics::{
    bleu, min_across_users, text_similarity, MetricReport, SentenceEmbedder, UserMetrics,
};
use crate::channel::derive_rng;
use crate::sic::{semantic_sic_decode, two_phase_decode, DecodeOptions, FrameMeta, UserStacks};
use crate::Result;

/// Which receive procedure to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeProcess {
    /// Plain SIC over all users (the decoder after full retraining).
    Joint,
    /// Two phases around the `k_old` original users (after partial
    /// retraining).
    TwoPhase { k_old: usize },
    /// No multi-user processing: every user equalizes the raw received
    /// signal and decodes, treating the others as noise (the deployment of
    /// single-user-trained stacks).
    PerUser,
}

fn batch_of(sentences: &[String], vocab: &Vocabulary, n: usize) -> Result<Batch> {
    let toks: Vec<TokenizedSentence> = sentences
        .iter()
        .map(|s| tokenize_and_filter(s, vocab))
        .collect::<Result<_>>()?;
    let refs: Vec<&TokenizedSentence> = toks.iter().collect();
    Ok(Batch::from_sentences(&refs, n))
}

/// Transmits and decodes every frame, returning per-user decoded sentences.
#[allow(clippy::too_many_arguments)]
pub fn run_semantic_frames(
    users: &[&UserStacks],
    references: &[Vec<String>],
    channel: &ChannelConfig,
    dims: &CodecDims,
    vocab: &Vocabulary,
    process: DecodeProcess,
    opts: DecodeOptions,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    let k = users.len();
    assert_eq!(references.len(), k, "references per user");
    let frames = references.iter().map(|r| r.len() / dims.l).min().unwrap_or(0);
    assert!(frames > 0, "need at least one full frame of sentences");

    let mut noise_rng = derive_rng(seed, "eval-noise");
    let mut fading_rng = derive_rng(seed, "eval-fading");
    let mut decoded: Vec<Vec<String>> = vec![Vec::new(); k];

    for f in 0..frames {
        let mut batches = Vec::with_capacity(k);
        for refs in references {
            batches.push(batch_of(&refs[f * dims.l..(f + 1) * dims.l], vocab, dims.n)?);
        }
        let links = channel.realize(&mut fading_rng);
        let mut frames_tx = Vec::with_capacity(k);
        for (u, stacks) in users.iter().enumerate() {
            frames_tx.push(encode_text(&batches[u], &stacks.enc, dims, links[u].power)?);
        }
        let frame_refs: Vec<&_> = frames_tx.iter().collect();
        let rx = transmit_mac(&frame_refs, &links, channel.sigma2, &mut noise_rng)?;
        let metas: Vec<FrameMeta> = frames_tx.iter().map(FrameMeta::from).collect();

        let outs = match process {
            DecodeProcess::Joint => {
                semantic_sic_decode(&rx, &links, users, &metas, dims, vocab, opts)?
            }
            DecodeProcess::PerUser => {
                let mut all = Vec::with_capacity(k);
                for (u, stacks) in users.iter().enumerate() {
                    let single = semantic_sic_decode(
                        &rx,
                        &links[u..u + 1],
                        &[stacks],
                        &metas[u..u + 1],
                        dims,
                        vocab,
                        opts,
                    )?;
                    all.extend(single);
                }
                all
            }
            DecodeProcess::TwoPhase { k_old } => two_phase_decode(
                &rx,
                &links[..k_old],
                &users[..k_old],
                &metas[..k_old],
                &links[k_old..],
                &users[k_old..],
                &metas[k_old..],
                dims,
                vocab,
                opts,
            )?,
        };
        for (u, out) in outs.into_iter().enumerate() {
            decoded[u].extend(out.texts);
        }
    }
    Ok(decoded)
}

/// Scores decoded texts against their references, per user plus the minimum.
pub fn score_users<E: SentenceEmbedder>(
    references: &[Vec<String>],
    decoded: &[Vec<String>],
    embedder: &E,
    threshold: f64,
) -> Result<MetricReport> {
    let mut users = Vec::with_capacity(references.len());
    for (u, (refs, dec)) in references.iter().zip(decoded).enumerate() {
        let usable = &refs[..dec.len().min(refs.len())];
        let similarity = text_similarity(usable, dec, embedder)?;
        let scores = bleu(usable, dec);
        users.push(UserMetrics {
            user_index: u + 1,
            similarity,
            bleu: [
                scores.per_order[0],
                scores.per_order[1],
                scores.per_order[2],
                scores.per_order[3],
            ],
        });
    }
    Ok(min_across_users(users, threshold))
}

/// Full semantic evaluation: transmit, decode, score.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_semantic<E: SentenceEmbedder>(
    users: &[&UserStacks],
    references: &[Vec<String>],
    channel: &ChannelConfig,
    dims: &CodecDims,
    vocab: &Vocabulary,
    process: DecodeProcess,
    opts: DecodeOptions,
    embedder: &E,
    threshold: f64,
    seed: u64,
) -> Result<MetricReport> {
    let decoded = run_semantic_frames(
        users, references, channel, dims, vocab, process, opts, seed,
    )?;
    let frames = references.iter().map(|r| r.len() / dims.l).min().unwrap_or(0);
    let trimmed: Vec<Vec<String>> = references
        .iter()
        .map(|r| r[..frames * dims.l].to_vec())
        .collect();
    score_users(&trimmed, &decoded, embedder, threshold)
}

/// Classical-chain evaluation under the same channel and budget.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_classical<E: SentenceEmbedder>(
    codecs: &[ClassicalCodec],
    references: &[Vec<String>],
    channel: &ChannelConfig,
    dims: &CodecDims,
    embedder: &E,
    threshold: f64,
    seed: u64,
) -> Result<MetricReport> {
    let k = codecs.len();
    assert_eq!(references.len(), k);
    let frames = references.iter().map(|r| r.len() / dims.l).min().unwrap_or(0);
    assert!(frames > 0, "need at least one full frame of sentences");

    let mut noise_rng = derive_rng(seed, "eval-noise");
    let mut fading_rng = derive_rng(seed, "eval-fading");
    let mut decoded: Vec<Vec<String>> = vec![Vec::new(); k];

    for f in 0..frames {
        let links = channel.realize(&mut fading_rng);
        let mut tx = Vec::with_capacity(k);
        for (u, codec) in codecs.iter().enumerate() {
            let sentences: Vec<Vec<String>> = references[u][f * dims.l..(f + 1) * dims.l]
                .iter()
                .map(|s| s.split_whitespace().map(str::to_string).collect())
                .collect();
            tx.push(codec.encode_text(&sentences, dims, links[u].power, u + 1)?);
        }
        let frame_refs: Vec<&_> = tx.iter().collect();
        let rx = transmit_mac(&frame_refs, &links, channel.sigma2, &mut noise_rng)?;
        let metas: Vec<(f64, f64)> = tx.iter().map(|t| (t.power, t.norm_scale)).collect();
        let outs = classical_sic_receive(&rx, &links, codecs, &metas, dims)?;
        for (u, sentences) in outs.into_iter().enumerate() {
            decoded[u].extend(sentences.into_iter().map(|ws| ws.join(" ")));
        }
    }

    let trimmed: Vec<Vec<String>> = references
        .iter()
        .map(|r| r[..frames * dims.l].to_vec())
        .collect();
    score_users(&trimmed, &decoded, embedder, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::HuffmanCodebook;
    use crate::channel::{ChannelModel, Scenario};
    use crate::metrics::FallbackEmbedder;

    #[test]
    fn classical_eval_perfect_at_high_snr_single_user() {
        let corpus: Vec<String> = crate::corpus::synth::generate_groups(8, 1, 5)
            .into_iter()
            .flatten()
            .collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let toks: Vec<Vec<String>> = corpus
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect();
        let cb = HuffmanCodebook::from_sentences(&toks).unwrap();
        let codec = ClassicalCodec::new(cb, false);
        let dims = CodecDims {
            vocab: vocab.size(),
            d: 8,
            m: 8,
            c: 36,
            n: 10,
            l: 4,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ff: 16,
            dropout: 0.0,
        };
        // 30 dB single user.
        let channel = ChannelConfig {
            links: vec![crate::channel::UserLink::fixed(
                1,
                1000.0,
                num_complex::Complex64::new(1.0, 0.0),
            )],
            sigma2: 1.0,
            model: ChannelModel::Awgn,
        };
        let report = evaluate_classical(
            &[codec],
            &[corpus.clone()],
            &channel,
            &dims,
            &FallbackEmbedder,
            0.9,
            3,
        )
        .unwrap();
        assert!(
            (report.min_bleu[0] - 1.0).abs() < 1e-12,
            "BLEU-1 {}",
            report.min_bleu[0]
        );
        assert!(report.pass);
    }

    #[test]
    fn scenario_users_counts() {
        assert_eq!(Scenario::TwoPlusOne.users(), 3);
        assert_eq!(Scenario::ThreePlusTwo.users(), 5);
    }
}
