//! Per-user semantic codec: text to complex channel symbols and back.
//!
//! Encoding pipeline per word: a learned projection of the one-hot embedding
//! (`f = A e + p_l` with a fixed sinusoidal position term), a Transformer
//! encoder producing the word-semantic vector `u`, and an autoencoder
//! compressor producing `r` of width `c`.  Per sentence the `r` vectors of
//! the real words are concatenated, zero-padded to `c*N`, packed as
//! real/imaginary pairs into complex symbols, and the whole frame is scaled
//! to the target transmit power.
//!
//! Decoding reverses each stage: decompress, Transformer decode, project
//! against a second learned matrix `B`, softmax, and harden to dictionary
//! indices with end-marker truncation.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Batch, Vocabulary};
use crate::nn::{Binding, Dropout, Mlp2, ParamId, ParamStore, Tape, TransformerStack, Var};
use crate::{Error, Result};

/// Model dimensions shared by all stacks in a system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecDims {
    /// Dictionary size `|W|`.
    pub vocab: usize,
    /// Embedding width `d`.
    pub d: usize,
    /// Word-semantic width `m` (conventionally equal to `d`).
    pub m: usize,
    /// Compressed width `c` (even, below `m`); `c/2` complex symbols per word.
    pub c: usize,
    /// Padded sentence length `N` (20-word maximum plus the end marker).
    pub n: usize,
    /// Sentences per frame `L`.
    pub l: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl CodecDims {
    /// Defaults shaped like the reference configuration: `d = m = 128`,
    /// 18 complex symbols per word (`c = 36`), `N = 21`, 4+4 layers.
    pub fn with_vocab(vocab: usize) -> Self {
        Self {
            vocab,
            d: 128,
            m: 128,
            c: 36,
            n: 21,
            l: 1,
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            d_ff: 512,
            dropout: 0.1,
        }
    }

    /// Channel uses per frame: `M = c*N*L/2`.
    pub fn channel_uses(&self) -> usize {
        self.c * self.n * self.l / 2
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.c % 2 == 0
            && self.c < self.m
            && self.d % self.heads == 0
            && self.m % self.heads == 0
            && self.vocab >= 2
            && self.n >= 2
            && self.l >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("invalid codec dims: {self:?}")))
        }
    }
}

/// Sinusoidal position code for the word at 1-based position `l`.
///
/// Entry `z` (1-based) is `sin(l * 10^(-4z/d))` for even `z` and
/// `cos(l * 10^(-4(z-1)/d))` for odd `z`.
pub fn positional_encoding(l: usize, d: usize) -> Vec<f64> {
    assert!(d >= 1);
    let lf = l as f64;
    (1..=d)
        .map(|z| {
            if z % 2 == 0 {
                (lf * 10f64.powf(-4.0 * z as f64 / d as f64)).sin()
            } else {
                (lf * 10f64.powf(-4.0 * (z - 1) as f64 / d as f64)).cos()
            }
        })
        .collect()
}

/// Position table for sentence positions `1..=n`, tiled over `seqs` sentences.
fn pe_tiled(seqs: usize, n: usize, d: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n * d);
    for l in 1..=n {
        table.extend(positional_encoding(l, d));
    }
    let mut out = Vec::with_capacity(seqs * n * d);
    for _ in 0..seqs {
        out.extend_from_slice(&table);
    }
    out
}

/// Trainable transmitter stack for one user.
pub struct EncoderStack {
    pub user_index: usize,
    pub dims: CodecDims,
    pub store: ParamStore,
    /// One-hot compressor `A` stored row-per-word as `[vocab, d]`.
    pub a: ParamId,
    pub te: TransformerStack,
    pub ae: Mlp2,
}

impl EncoderStack {
    pub fn new(user_index: usize, dims: &CodecDims, rng: &mut ChaCha8Rng) -> Self {
        dims.validate().expect("codec dims");
        let mut store = ParamStore::new();
        let a = store.add_xavier("a", dims.vocab, dims.d, rng);
        let te = TransformerStack::new(
            &mut store,
            "te",
            dims.d,
            dims.m,
            dims.enc_layers,
            dims.heads,
            dims.d_ff,
            rng,
        );
        let ae = Mlp2::new(&mut store, "ae", dims.m, dims.m, dims.c, rng);
        Self {
            user_index,
            dims: *dims,
            store,
            a,
            te,
            ae,
        }
    }

    /// Embedding + Transformer encoder + compressor on the tape.
    ///
    /// Returns the `[L*N, c]` compressed features (not yet masked or framed).
    pub fn features_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        batch: &Batch,
        dropout: &mut Dropout,
    ) -> Var {
        let d = self.dims.d;
        let a = bind.var(tape, &self.store, self.a);
        let e = tape.embedding(a, &batch.ids);
        let pe = pe_tiled(batch.rows, batch.n, d);
        let f = tape.add_const(e, &pe);
        let u = self
            .te
            .forward(tape, bind, &self.store, f, batch.rows, batch.n, dropout);
        self.ae.forward(tape, bind, &self.store, u)
    }

    /// Re-compression of decoded word-semantic vectors: `r = AE(u)`.
    pub fn compress_on_tape(&self, tape: &mut Tape, bind: &mut Binding, u: Var) -> Var {
        self.ae.forward(tape, bind, &self.store, u)
    }
}

/// Trainable receiver stack for one user.
pub struct DecoderStack {
    pub user_index: usize,
    pub dims: CodecDims,
    pub store: ParamStore,
    pub ad: Mlp2,
    pub td: TransformerStack,
    /// Vocabulary projection `B` stored as `[vocab, d]`; scores are `f @ B^T`.
    pub b: ParamId,
}

impl DecoderStack {
    pub fn new(user_index: usize, dims: &CodecDims, rng: &mut ChaCha8Rng) -> Self {
        dims.validate().expect("codec dims");
        let mut store = ParamStore::new();
        let ad = Mlp2::new(&mut store, "ad", dims.c, dims.m, dims.m, rng);
        let td = TransformerStack::new(
            &mut store,
            "td",
            dims.m,
            dims.d,
            dims.dec_layers,
            dims.heads,
            dims.d_ff,
            rng,
        );
        let b = store.add_xavier("b", dims.vocab, dims.d, rng);
        Self {
            user_index,
            dims: *dims,
            store,
            ad,
            td,
            b,
        }
    }

    /// Decompress + Transformer decode + vocabulary projection.
    ///
    /// Input is `[L*N, c]`; output is pre-softmax scores `[L*N, vocab]`.
    /// Also returns the intermediate `u = AD(input)` used for re-encoding.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        feat: Var,
        seqs: usize,
        len: usize,
        dropout: &mut Dropout,
    ) -> (Var, Var) {
        let u = self.ad.forward(tape, bind, &self.store, feat);
        let f = self
            .td
            .forward(tape, bind, &self.store, u, seqs, len, dropout);
        let b = bind.var(tape, &self.store, self.b);
        (tape.matmul_bt(f, b), u)
    }
}

/// A frame of complex transmit symbols with its power bookkeeping.
#[derive(Debug, Clone)]
pub struct SymbolFrame {
    pub user_index: usize,
    pub symbols: Vec<Complex64>,
    /// Transmit power `P` (watts); after normalization
    /// `(1/M) * sum |x_m|^2 = P` holds to relative 1e-9.
    pub power: f64,
    /// The scale `sqrt(M*P) / ||x_check||` applied by the normalization;
    /// treated as known at the receiver (out-of-band side state).
    pub norm_scale: f64,
}

impl SymbolFrame {
    /// `(1/M) * sum |x_m|^2`.
    pub fn mean_power(&self) -> f64 {
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }
}

/// Compressed feature tensor shaped `(L, N, c)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub data: Vec<f64>,
    pub l: usize,
    pub n: usize,
    pub c: usize,
}

impl Features {
    pub fn word(&self, sentence: usize, pos: usize) -> &[f64] {
        let off = (sentence * self.n + pos) * self.c;
        &self.data[off..off + self.c]
    }
}

/// Soft vocabulary scores shaped `(L, N, vocab)`.
#[derive(Debug, Clone)]
pub struct Scores {
    pub data: Vec<f64>,
    pub l: usize,
    pub n: usize,
    pub vocab: usize,
}

impl Scores {
    pub fn row(&self, sentence: usize, pos: usize) -> &[f64] {
        let off = (sentence * self.n + pos) * self.vocab;
        &self.data[off..off + self.vocab]
    }
}

/// Row mask that keeps only the `raw_length` word positions of each sentence
/// (the end-marker and pad positions transmit zero vectors).
pub(crate) fn word_mask(batch: &Batch) -> Vec<f64> {
    let mut mask = vec![0.0; batch.rows * batch.n];
    for r in 0..batch.rows {
        for pos in 0..batch.lengths[r].min(batch.n) {
            mask[r * batch.n + pos] = 1.0;
        }
    }
    mask
}

/// Frames masked features into a power-normalized interleaved symbol vector.
///
/// Returns the tape node holding `[1, 2M]` interleaved (re, im) values plus
/// the normalization scale, or an error for a zero-energy frame.
pub(crate) fn frame_on_tape(
    tape: &mut Tape,
    features: Var,
    batch: &Batch,
    dims: &CodecDims,
    power: f64,
) -> Result<(Var, f64)> {
    let mask = word_mask(batch);
    let masked = tape.mul_row_const(features, &mask);
    let two_m = batch.rows * batch.n * dims.c;
    let flat = tape.reshape(masked, 1, two_m);
    let m = two_m / 2;
    let target = ((m as f64) * power).sqrt();
    let pre_norm = tape.value(flat).iter().map(|v| v * v).sum::<f64>().sqrt();
    let x = tape
        .normalize_to_power(flat, target)
        .ok_or(Error::ZeroEnergyFrame)?;
    Ok((x, target / pre_norm))
}

/// Encodes a padded batch into a transmit frame (evaluation path).
pub fn encode_text(
    batch: &Batch,
    enc: &EncoderStack,
    dims: &CodecDims,
    power: f64,
) -> Result<SymbolFrame> {
    assert_eq!(batch.n, dims.n, "batch padding must match dims.n");
    assert_eq!(batch.rows, dims.l, "batch rows must match dims.l");
    let mut tape = Tape::new();
    let mut bind = Binding::new(&enc.store, false);
    let mut drop = Dropout::inactive();
    let feat = enc.features_on_tape(&mut tape, &mut bind, batch, &mut drop);
    let (x, norm_scale) = frame_on_tape(&mut tape, feat, batch, dims, power)?;
    Ok(SymbolFrame {
        user_index: enc.user_index,
        symbols: pack_complex(tape.value(x)),
        power,
        norm_scale,
    })
}

/// Packs interleaved (re, im) values into complex symbols.
pub fn pack_complex(interleaved: &[f64]) -> Vec<Complex64> {
    interleaved
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

/// Splits complex symbols back into interleaved (re, im) values.
pub fn unpack_complex(symbols: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(symbols.len() * 2);
    for s in symbols {
        out.push(s.re);
        out.push(s.im);
    }
    out
}

/// Reshapes an equalized frame into per-word compressed features.
///
/// Exact inverse of the packing in [`encode_text`] up to the transmit
/// normalization scale, which the caller undoes separately.
pub fn unpack_frame(xhat: &[Complex64], dims: &CodecDims) -> Result<Features> {
    let m = dims.channel_uses();
    if xhat.len() != m {
        return Err(Error::FrameLength {
            got: xhat.len(),
            expected: m,
        });
    }
    Ok(Features {
        data: unpack_complex(xhat),
        l: dims.l,
        n: dims.n,
        c: dims.c,
    })
}

/// Runs the receive stack over features, returning per-word probabilities.
pub fn decode_features(feat: &Features, dec: &DecoderStack) -> Result<Scores> {
    if feat.c != dec.dims.c {
        return Err(Error::Shape(format!(
            "feature width {} does not match decoder c={}",
            feat.c, dec.dims.c
        )));
    }
    let mut tape = Tape::new();
    let mut bind = Binding::new(&dec.store, false);
    let mut drop = Dropout::inactive();
    let input = tape.constant(feat.data.clone(), feat.l * feat.n, feat.c);
    let (logits, _) = dec.logits_on_tape(&mut tape, &mut bind, input, feat.l, feat.n, &mut drop);
    let probs = tape.softmax_rows(logits);
    Ok(Scores {
        data: tape.value(probs).to_vec(),
        l: feat.l,
        n: feat.n,
        vocab: dec.dims.vocab,
    })
}

/// Argmax per word (ties to the lowest index), truncated at the end marker.
pub fn harden_ids(scores: &Scores) -> Vec<Vec<usize>> {
    (0..scores.l)
        .map(|j| {
            (0..scores.n)
                .map(|pos| argmax(scores.row(j, pos)))
                .collect()
        })
        .collect()
}

/// Hard decision plus dictionary lookup; anything after the first end marker
/// in a sentence is removed.
pub fn harden_and_detokenize(scores: &Scores, vocab: &Vocabulary) -> Vec<String> {
    harden_ids(scores)
        .iter()
        .map(|ids| crate::corpus::detokenize(ids, vocab))
        .collect()
}

/// Left-to-right argmax where ids already emitted in the sentence have their
/// scores divided by `penalty` first.  `exempt` (normally the end marker) is
/// never penalized.  `penalty = 1` reduces to the plain hard decision.
pub fn greedy_decode_with_repetition_penalty(
    scores: &Scores,
    penalty: f64,
    exempt: Option<usize>,
) -> Vec<Vec<usize>> {
    assert!(penalty >= 1.0, "repetition penalty must be >= 1");
    (0..scores.l)
        .map(|j| {
            let mut emitted = vec![false; scores.vocab];
            let mut ids = Vec::with_capacity(scores.n);
            for pos in 0..scores.n {
                let row = scores.row(j, pos);
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (w, &p) in row.iter().enumerate() {
                    let v = if emitted[w] && exempt != Some(w) {
                        p / penalty
                    } else {
                        p
                    };
                    if v > best_v {
                        best_v = v;
                        best = w;
                    }
                }
                emitted[best] = true;
                ids.push(best);
            }
            ids
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{TokenizedSentence, END_ID};
    use rand::SeedableRng;

    fn tiny_dims(vocab: usize) -> CodecDims {
        CodecDims {
            vocab,
            d: 8,
            m: 8,
            c: 4,
            n: 6,
            l: 2,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ff: 16,
            dropout: 0.0,
        }
    }

    fn tiny_batch(n: usize) -> Batch {
        let s1 = TokenizedSentence {
            token_ids: vec![2, 3, 4, 5, END_ID],
            raw_length: 4,
        };
        let s2 = TokenizedSentence {
            token_ids: vec![5, 4, 3, 2, END_ID],
            raw_length: 4,
        };
        Batch::from_sentences(&[&s1, &s2], n)
    }

    #[test]
    fn positional_encoding_closed_form() {
        // l = 0: odd entries cos(0) = 1, even entries sin(0) = 0.
        let p0 = positional_encoding(0, 6);
        for (i, v) in p0.iter().enumerate() {
            let expect = if (i + 1) % 2 == 0 { 0.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-15);
        }
        // l = 1, d = 4: z = 1 -> cos(1), z = 2 -> sin(10^-2).
        let p1 = positional_encoding(1, 4);
        assert!((p1[0] - 1f64.cos()).abs() < 1e-15);
        assert!((p1[1] - 0.01f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn packing_definition() {
        let q = [1.0, 0.0, 0.0, 1.0];
        let sym = pack_complex(&q);
        assert_eq!(sym, vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let q: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
        assert_eq!(unpack_complex(&pack_complex(&q)), q);
    }

    #[test]
    fn normalization_scalar_example() {
        // x_check = [3+4j], M = 1, P = 1 -> x = (3+4j)/5.
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0, 4.0], 1, 2);
        let y = tape.normalize_to_power(x, 1.0).unwrap();
        assert!((tape.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn encode_masks_padding_and_meets_power() {
        let dims = tiny_dims(8);
        let batch = tiny_batch(dims.n);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = EncoderStack::new(1, &dims, &mut rng);
        let frame = encode_text(&batch, &enc, &dims, 2.5).unwrap();
        assert_eq!(frame.symbols.len(), dims.channel_uses());
        let rel = (frame.mean_power() - 2.5).abs() / 2.5;
        assert!(rel <= 1e-9, "power error {rel}");

        // Positions for l >= raw_length carry zeros: symbols after the 4
        // word slots of each sentence are exactly zero.
        let feats = unpack_frame(&frame.symbols, &dims).unwrap();
        for j in 0..dims.l {
            for pos in 4..dims.n {
                assert!(feats.word(j, pos).iter().all(|&v| v == 0.0));
            }
            for pos in 0..4 {
                assert!(feats.word(j, pos).iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn paper_scale_framing_arithmetic() {
        // 18 complex symbols per word (c = 36), N = 21: a 4-word sentence
        // occupies 4*36 feature slots and the remaining 17*36 are zeros.
        let dims = CodecDims {
            vocab: 8,
            d: 40,
            m: 40,
            c: 36,
            n: 21,
            l: 1,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ff: 32,
            dropout: 0.0,
        };
        let s = TokenizedSentence {
            token_ids: vec![2, 3, 4, 5, END_ID],
            raw_length: 4,
        };
        let batch = Batch::from_sentences(&[&s], dims.n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderStack::new(1, &dims, &mut rng);
        let frame = encode_text(&batch, &enc, &dims, 1.0).unwrap();
        assert_eq!(frame.symbols.len(), 36 * 21 / 2);
        let feats = unpack_frame(&frame.symbols, &dims).unwrap();
        for pos in 0..4 {
            assert!(feats.word(0, pos).iter().any(|&v| v != 0.0));
        }
        for pos in 4..21 {
            assert!(feats.word(0, pos).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_energy_frame_is_an_error() {
        let dims = tiny_dims(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = EncoderStack::new(1, &dims, &mut rng);
        // All rows claim zero real words: every feature row is masked out.
        let batch = Batch {
            ids: vec![END_ID; dims.l * dims.n],
            rows: dims.l,
            n: dims.n,
            lengths: vec![0; dims.l],
        };
        assert!(matches!(
            encode_text(&batch, &enc, &dims, 1.0),
            Err(Error::ZeroEnergyFrame)
        ));
    }

    #[test]
    fn unpack_wrong_length_errors() {
        let dims = tiny_dims(8);
        let m = dims.channel_uses();
        let xs = vec![Complex64::new(1.0, 2.0); m - 1];
        assert!(matches!(
            unpack_frame(&xs, &dims),
            Err(Error::FrameLength { .. })
        ));
        let one = CodecDims {
            l: 1,
            n: 1,
            c: 2,
            ..tiny_dims(8)
        };
        let f = unpack_frame(&[Complex64::new(1.0, 2.0)], &one).unwrap();
        assert_eq!(f.data, vec![1.0, 2.0]);
    }

    #[test]
    fn decode_features_rows_are_probabilities() {
        let dims = tiny_dims(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = DecoderStack::new(1, &dims, &mut rng);
        let feat = Features {
            data: (0..dims.l * dims.n * dims.c)
                .map(|i| ((i * 37 % 19) as f64 - 9.0) / 7.0)
                .collect(),
            l: dims.l,
            n: dims.n,
            c: dims.c,
        };
        let s1 = decode_features(&feat, &dec).unwrap();
        for j in 0..s1.l {
            for pos in 0..s1.n {
                let row = s1.row(j, pos);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
        // Deterministic given identical parameters and input.
        let s2 = decode_features(&feat, &dec).unwrap();
        assert_eq!(s1.data, s2.data);
    }

    #[test]
    fn harden_truncates_at_end_marker() {
        let scores = Scores {
            data: vec![
                0.0, 0.1, 0.0, 0.2, 0.0, 0.7, // -> 5
                0.6, 0.1, 0.1, 0.1, 0.05, 0.05, // -> 0 (END)
                0.0, 0.0, 0.0, 1.0, 0.0, 0.0, // -> 3 (dropped)
            ],
            l: 1,
            n: 3,
            vocab: 6,
        };
        let ids = harden_ids(&scores);
        assert_eq!(ids, vec![vec![5, 0, 3]]);
        let corpus: Vec<String> = vec!["aa bb cc dd ee".into()];
        let vocab = crate::corpus::Vocabulary::build(&corpus, 1).unwrap();
        let texts = harden_and_detokenize(&scores, &vocab);
        assert_eq!(texts[0].split(' ').count(), 1);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.1, 0.4, 0.1, 0.4]), 1);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }

    #[test]
    fn repetition_penalty_hand_trace() {
        let scores = Scores {
            data: vec![0.6, 0.4, 0.6, 0.4],
            l: 1,
            n: 2,
            vocab: 2,
        };
        // penalty 2: second step sees 0.3 vs 0.4.
        let ids = greedy_decode_with_repetition_penalty(&scores, 2.0, None);
        assert_eq!(ids, vec![vec![0, 1]]);
        // penalty 1 reduces to the plain hard decision.
        let plain = greedy_decode_with_repetition_penalty(&scores, 1.0, None);
        assert_eq!(plain, harden_ids(&scores));
        // Exempt id never penalized.
        let exempt = greedy_decode_with_repetition_penalty(&scores, 2.0, Some(0));
        assert_eq!(exempt, vec![vec![0, 0]]);
    }
}
