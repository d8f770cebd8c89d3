//! Classical transmission chain: Huffman source coding, optional rate-1/3
//! repetition coding, 64-QAM modulation, and conventional symbol-level SIC
//! with hard decisions.
//!
//! The chain shares the semantic system's channel budget (`c/2` symbols per
//! word slot, `N` slots per sentence, `L` sentences per frame) and its
//! power-normalization convention, so baseline and semantic results are
//! directly comparable per channel use.

use std::collections::HashMap;

use num_complex::Complex64;

use crate::channel::{order_users, ReceivedFrame, UserLink};
use crate::codec::{CodecDims, SymbolFrame};
use crate::corpus::END_TOKEN;
use crate::{Error, Result};

/// Prefix-free word code built from corpus frequencies.
#[derive(Debug, Clone)]
pub struct HuffmanCodebook {
    /// word -> bit string (as 0/1 bytes).
    codes: HashMap<String, Vec<u8>>,
    /// Binary decode trie: node = (zero-child, one-child, word index or MAX).
    trie: Vec<(u32, u32, u32)>,
    words: Vec<String>,
}

const NO_CHILD: u32 = u32::MAX;

impl HuffmanCodebook {
    /// Builds the canonical code for words with the given counts.
    ///
    /// Ties merge deterministically (lowest insertion order first).  A
    /// single-word alphabet degenerates to a 1-bit code.
    pub fn build(word_counts: &[(String, u64)]) -> Result<Self> {
        if word_counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = word_counts.len();
        let mut lengths = vec![0usize; n];
        if n == 1 {
            lengths[0] = 1;
        } else {
            // Huffman merge over (count, tie-order) pairs.
            #[derive(Clone)]
            struct Item {
                count: u64,
                order: u64,
                leaves: Vec<usize>,
            }
            let mut pool: Vec<Item> = word_counts
                .iter()
                .enumerate()
                .map(|(i, (_, c))| Item {
                    count: *c,
                    order: i as u64,
                    leaves: vec![i],
                })
                .collect();
            let mut next_order = n as u64;
            while pool.len() > 1 {
                pool.sort_by_key(|it| (it.count, it.order));
                let a = pool.remove(0);
                let b = pool.remove(0);
                for &leaf in a.leaves.iter().chain(&b.leaves) {
                    lengths[leaf] += 1;
                }
                pool.push(Item {
                    count: a.count + b.count,
                    order: next_order,
                    leaves: a.leaves.into_iter().chain(b.leaves).collect(),
                });
                next_order += 1;
            }
        }

        // Canonical code assignment: sort by (length, original index).
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by_key(|&i| (lengths[i], i));
        let mut codes: HashMap<String, Vec<u8>> = HashMap::new();
        let mut code: u64 = 0;
        let mut prev_len = 0usize;
        for &i in &idx {
            let len = lengths[i];
            code <<= len - prev_len;
            prev_len = len;
            let bits: Vec<u8> = (0..len).rev().map(|b| ((code >> b) & 1) as u8).collect();
            codes.insert(word_counts[i].0.clone(), bits);
            code += 1;
        }

        // Decode trie.
        let words: Vec<String> = word_counts.iter().map(|(w, _)| w.clone()).collect();
        let mut trie: Vec<(u32, u32, u32)> = vec![(NO_CHILD, NO_CHILD, NO_CHILD)];
        for (wi, w) in words.iter().enumerate() {
            let mut node = 0usize;
            for &bit in &codes[w] {
                let next = if bit == 0 { trie[node].0 } else { trie[node].1 };
                let next = if next == NO_CHILD {
                    trie.push((NO_CHILD, NO_CHILD, NO_CHILD));
                    let fresh = (trie.len() - 1) as u32;
                    if bit == 0 {
                        trie[node].0 = fresh;
                    } else {
                        trie[node].1 = fresh;
                    }
                    fresh
                } else {
                    next
                };
                node = next as usize;
            }
            trie[node].2 = wi as u32;
        }
        Ok(Self { codes, trie, words })
    }

    /// Builds from corpus sentences, reserving the end marker with one count
    /// per sentence so it stays encodable.
    pub fn from_sentences(sentences: &[Vec<String>]) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for s in sentences {
            for w in s {
                *counts.entry(w.clone()).or_insert(0) += 1;
            }
            *counts.entry(END_TOKEN.to_string()).or_insert(0) += 1;
        }
        let mut ordered: Vec<(String, u64)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::build(&ordered)
    }

    pub fn code(&self, word: &str) -> Result<&[u8]> {
        self.codes
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn code_len(&self, word: &str) -> Option<usize> {
        self.codes.get(word).map(Vec::len)
    }

    /// Mean code length in bits under the given counts.
    pub fn average_length(&self, word_counts: &[(String, u64)]) -> f64 {
        let total: u64 = word_counts.iter().map(|(_, c)| c).sum();
        word_counts
            .iter()
            .map(|(w, c)| self.codes[w].len() as f64 * *c as f64)
            .sum::<f64>()
            / total as f64
    }

    /// Encodes words to bits; every word must be in the codebook.
    pub fn encode(&self, words: &[String]) -> Result<Vec<u8>> {
        let mut bits = Vec::new();
        for w in words {
            bits.extend_from_slice(self.code(w)?);
        }
        Ok(bits)
    }

    /// Decodes bits to words, truncating at the last full word.
    pub fn decode(&self, bits: &[u8]) -> Vec<String> {
        let mut out = Vec::new();
        let mut node = 0usize;
        for &bit in bits {
            let next = if bit == 0 {
                self.trie[node].0
            } else {
                self.trie[node].1
            };
            if next == NO_CHILD {
                break; // non-decodable tail
            }
            node = next as usize;
            let word = self.trie[node].2;
            if word != NO_CHILD {
                out.push(self.words[word as usize].clone());
                node = 0;
            }
        }
        out
    }
}

/// Empirical entropy in bits/word of a count table.
pub fn entropy_bits(word_counts: &[(String, u64)]) -> f64 {
    let total: u64 = word_counts.iter().map(|(_, c)| c).sum();
    word_counts
        .iter()
        .filter(|(_, c)| *c > 0)
        .map(|(_, c)| {
            let p = *c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// Gray-labeled square 64-QAM constellation at unit average energy.
#[derive(Debug, Clone)]
pub struct QamConstellation {
    levels: [f64; 8],
    /// `gray[i]` is the 3-bit Gray label of amplitude level `i`.
    gray: [u8; 8],
    /// Inverse lookup: label -> level index.
    level_of: [u8; 8],
}

impl Default for QamConstellation {
    fn default() -> Self {
        Self::new()
    }
}

impl QamConstellation {
    pub fn new() -> Self {
        let norm = 42f64.sqrt();
        let mut levels = [0.0; 8];
        for (i, l) in levels.iter_mut().enumerate() {
            *l = (2.0 * i as f64 - 7.0) / norm;
        }
        let mut gray = [0u8; 8];
        let mut level_of = [0u8; 8];
        for i in 0..8 {
            gray[i] = (i ^ (i >> 1)) as u8;
            level_of[gray[i] as usize] = i as u8;
        }
        Self {
            levels,
            gray,
            level_of,
        }
    }

    /// All 64 points (for energy/geometry checks).
    pub fn points(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(64);
        for &i in &self.levels {
            for &q in &self.levels {
                out.push(Complex64::new(i, q));
            }
        }
        out
    }

    /// Minimum distance between distinct points.
    pub fn min_distance(&self) -> f64 {
        2.0 / 42f64.sqrt()
    }

    /// Maps 6 bits (I label high, Q label low) to one point.
    fn map6(&self, bits: &[u8]) -> Complex64 {
        let li = (bits[0] << 2 | bits[1] << 1 | bits[2]) as usize;
        let lq = (bits[3] << 2 | bits[4] << 1 | bits[5]) as usize;
        Complex64::new(
            self.levels[self.level_of[li] as usize],
            self.levels[self.level_of[lq] as usize],
        )
    }

    fn unmap_axis(&self, value: f64) -> u8 {
        // Nearest of the 8 levels.
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &l) in self.levels.iter().enumerate() {
            let d = (value - l).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        self.gray[best]
    }

    /// 6 bits per symbol; the bit count is padded with zeros to a multiple
    /// of six.
    pub fn modulate(&self, bits: &[u8]) -> Vec<Complex64> {
        let mut padded = bits.to_vec();
        while padded.len() % 6 != 0 {
            padded.push(0);
        }
        padded.chunks_exact(6).map(|c| self.map6(c)).collect()
    }

    /// Nearest-point hard decisions back to bits.
    pub fn demodulate(&self, symbols: &[Complex64]) -> Vec<u8> {
        let mut bits = Vec::with_capacity(symbols.len() * 6);
        for s in symbols {
            let li = self.unmap_axis(s.re);
            let lq = self.unmap_axis(s.im);
            for b in [li >> 2 & 1, li >> 1 & 1, li & 1, lq >> 2 & 1, lq >> 1 & 1, lq & 1] {
                bits.push(b);
            }
        }
        bits
    }
}

/// Rate-1/3 repetition code with majority decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepetitionCode;

impl RepetitionCode {
    pub fn encode(bits: &[u8]) -> Vec<u8> {
        bits.iter().flat_map(|&b| [b, b, b]).collect()
    }

    pub fn decode(bits: &[u8]) -> Vec<u8> {
        bits.chunks(3)
            .map(|c| {
                let ones: u8 = c.iter().sum();
                u8::from(ones * 2 > c.len() as u8)
            })
            .collect()
    }
}

/// Per-user classical transmitter/receiver configuration.
#[derive(Debug, Clone)]
pub struct ClassicalCodec {
    pub codebook: HuffmanCodebook,
    pub qam: QamConstellation,
    /// Use the rate-1/3 repetition code.
    pub repetition: bool,
}

impl ClassicalCodec {
    pub fn new(codebook: HuffmanCodebook, repetition: bool) -> Self {
        Self {
            codebook,
            qam: QamConstellation::new(),
            repetition,
        }
    }

    fn bits_per_sentence(&self, dims: &CodecDims) -> usize {
        (dims.c / 2) * dims.n * 6
    }

    /// Source-encodes one sentence into its fixed frame slot of bits:
    /// Huffman bits (words then the end marker), channel-coded if enabled,
    /// truncated or zero-padded to the slot budget.
    fn sentence_bits(&self, words: &[String], dims: &CodecDims) -> Result<Vec<u8>> {
        let budget = self.bits_per_sentence(dims);
        let mut bits = self.codebook.encode(words)?;
        bits.extend_from_slice(self.codebook.code(END_TOKEN)?);
        if self.repetition {
            bits = RepetitionCode::encode(&bits);
        }
        bits.truncate(budget);
        bits.resize(budget, 0);
        Ok(bits)
    }

    /// Encodes `L` sentences into a power-normalized frame of `M` symbols.
    pub fn encode_text(
        &self,
        sentences: &[Vec<String>],
        dims: &CodecDims,
        power: f64,
        user_index: usize,
    ) -> Result<SymbolFrame> {
        assert_eq!(sentences.len(), dims.l, "sentences per frame");
        let mut raw = Vec::with_capacity(dims.channel_uses());
        for s in sentences {
            let bits = self.sentence_bits(s, dims)?;
            raw.extend(self.qam.modulate(&bits));
        }
        debug_assert_eq!(raw.len(), dims.channel_uses());
        let energy: f64 = raw.iter().map(|s| s.norm_sqr()).sum();
        if energy == 0.0 {
            return Err(Error::ZeroEnergyFrame);
        }
        let m = raw.len() as f64;
        let scale = (m * power).sqrt() / energy.sqrt();
        Ok(SymbolFrame {
            user_index,
            symbols: raw.into_iter().map(|s| s * scale).collect(),
            power,
            norm_scale: scale,
        })
    }

    /// Hard-decides an equalized, de-normalized frame back to text and the
    /// re-modulated (sliced) constellation points used for cancellation.
    pub fn decode_frame(
        &self,
        xhat: &[Complex64],
        dims: &CodecDims,
    ) -> (Vec<Vec<String>>, Vec<Complex64>) {
        let per_sentence = (dims.c / 2) * dims.n;
        let mut texts = Vec::with_capacity(dims.l);
        let mut sliced = Vec::with_capacity(xhat.len());
        for j in 0..dims.l {
            let slot = &xhat[j * per_sentence..(j + 1) * per_sentence];
            let bits = self.qam.demodulate(slot);
            sliced.extend(self.qam.modulate(&bits));
            let payload = if self.repetition {
                RepetitionCode::decode(&bits)
            } else {
                bits
            };
            let mut words = self.codebook.decode(&payload);
            if let Some(end) = words.iter().position(|w| w == END_TOKEN) {
                words.truncate(end);
            } else {
                // No end marker survived; drop trailing pad garbage words.
                words.retain(|w| w != END_TOKEN);
            }
            texts.push(words);
        }
        (texts, sliced)
    }
}

/// Conventional SIC at the base station over classical frames.
///
/// Users are processed in descending received-power order: equalize,
/// hard-decide against the constellation (treating weaker users as noise),
/// re-modulate, cancel, continue.  Returns per-user decoded texts in user
/// order.
pub fn classical_sic_receive(
    rx: &ReceivedFrame,
    links: &[UserLink],
    codecs: &[ClassicalCodec],
    frames_meta: &[(f64, f64)],
    dims: &CodecDims,
) -> Result<Vec<Vec<Vec<String>>>> {
    assert_eq!(links.len(), codecs.len());
    assert_eq!(links.len(), frames_meta.len());
    let order = order_users(links);
    let mut residual = rx.y.clone();
    let mut texts: Vec<Vec<Vec<String>>> = vec![Vec::new(); links.len()];
    for &li in &order {
        let link = &links[li];
        if link.h.norm_sqr() == 0.0 {
            return Err(Error::ZeroGain(link.index));
        }
        let (_power, norm_scale) = frames_meta[li];
        // Equalize and undo the transmit normalization.
        let xhat: Vec<Complex64> = residual
            .iter()
            .map(|&y| y / link.h / norm_scale)
            .collect();
        let (decoded, sliced) = codecs[li].decode_frame(&xhat, dims);
        texts[li] = decoded;
        // Cancel the re-modulated signal.
        for (res, s) in residual.iter_mut().zip(&sliced) {
            *res -= link.h * (s * norm_scale);
        }
    }
    Ok(texts)
}
