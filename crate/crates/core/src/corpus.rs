//! Text ingestion: dictionary construction, tokenization, batching.
//!
//! A corpus is a set of sentence pairs (premise TAB hypothesis, one pair per
//! line).  Sentences are lowercased, stripped of punctuation, filtered to
//! 4..=20 words, mapped to dictionary indices with the end marker appended,
//! and zero-padded to a fixed length `N` for batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Dictionary index of the reserved end-of-sentence marker.
pub const END_ID: usize = 0;
/// Index that out-of-vocabulary words collapse onto.
pub const UNK_ID: usize = 1;
/// Printed form of the end marker in vocabulary files.
pub const END_TOKEN: &str = "<END>";

/// Minimum accepted sentence length in words (before the end marker).
pub const MIN_WORDS: usize = 4;
/// Maximum accepted sentence length in words.
pub const MAX_WORDS: usize = 20;

/// Ordered dictionary over the corpus words.
///
/// Entry 0 is always the end marker; the remaining entries are corpus words
/// sorted by descending count with lexicographic tie-breaks, so the same
/// corpus always produces a byte-identical word list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the dictionary from raw corpus lines.
    ///
    /// Words are normalized the same way [`tokenize_and_filter`] normalizes
    /// them, counted, filtered by `min_count`, and ordered by descending
    /// count (ties lexicographic).  The end marker occupies index 0.
    pub fn build(corpus_lines: &[String], min_count: usize) -> Result<Self> {
        if corpus_lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus_lines {
            for part in line.split('\t') {
                for word in normalize_words(part) {
                    *counts.entry(word).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut words = Vec::with_capacity(ranked.len() + 1);
        words.push(END_TOKEN.to_string());
        words.extend(ranked.into_iter().map(|(w, _)| w));

        let index_of = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Self { words, index_of })
    }

    /// Number of dictionary entries, end marker included.
    pub fn size(&self) -> usize {
        self.words.len()
    }

    /// Index of `word`, if present.
    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index_of.get(word).copied()
    }

    /// The word stored at `id`.
    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// All words in index order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Serializes as one word per line; the line number is the index.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for w in &self.words {
            let _ = writeln!(out, "{w}");
        }
        out
    }

    /// Parses the one-word-per-line format written by [`Self::to_file_string`].
    pub fn from_file_string(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if words.is_empty() || words[0] != END_TOKEN {
            return Err(Error::Checkpoint(
                "vocabulary file must start with the end marker".into(),
            ));
        }
        let index_of = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Self { words, index_of })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file_string(&text)
    }
}

/// Lowercases, strips punctuation, and splits on whitespace.
fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect())
        .filter(|w: &String| !w.is_empty())
        .collect()
}

/// One tokenized sentence: word indices with the end marker appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    /// Dictionary indices; the last entry is always [`END_ID`].
    pub token_ids: Vec<usize>,
    /// Word count before padding (the end marker is not counted).
    pub raw_length: usize,
}

/// Tokenizes one sentence, rejecting lengths outside 4..=20 words.
///
/// Unknown words collapse onto [`UNK_ID`]; the corpus is assumed closed in
/// normal operation so this only matters for vocabularies built with a
/// `min_count` above one.
pub fn tokenize_and_filter(text: &str, vocab: &Vocabulary) -> Result<TokenizedSentence> {
    let words = normalize_words(text);
    let raw_length = words.len();
    if !(MIN_WORDS..=MAX_WORDS).contains(&raw_length) {
        return Err(Error::SentenceLength(raw_length));
    }
    let mut token_ids: Vec<usize> = words
        .iter()
        .map(|w| vocab.index_of(w).unwrap_or(UNK_ID))
        .collect();
    token_ids.push(END_ID);
    Ok(TokenizedSentence {
        token_ids,
        raw_length,
    })
}

/// Maps ids back to words, truncating at the first end marker.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut words = Vec::new();
    for &id in ids {
        if id == END_ID {
            break;
        }
        words.push(vocab.word(id).to_string());
    }
    words.join(" ")
}

/// The text corpus associated with one user.
#[derive(Debug, Clone)]
pub struct KnowledgeSet {
    pub user_index: usize,
    pub sentences: Vec<TokenizedSentence>,
    /// Cross-user correspondence keys (entailment pairing).  Sentences with
    /// the same key across users are pairs; `None` when unpaired.
    pub pairing: Option<Vec<usize>>,
}

impl KnowledgeSet {
    /// Tokenizes `lines` for one user, silently skipping rejected sentences.
    /// Pairing keys record the surviving source line numbers so line-aligned
    /// corpora stay in correspondence only when the same lines survive.
    pub fn from_lines(user_index: usize, lines: &[String], vocab: &Vocabulary) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut pairing = Vec::new();
        for (lineno, line) in lines.iter().enumerate() {
            if let Ok(ts) = tokenize_and_filter(line, vocab) {
                sentences.push(ts);
                pairing.push(lineno);
            }
        }
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            user_index,
            sentences,
            pairing: Some(pairing),
        })
    }

    /// Longest `token_ids` among the sentences (raw length + end marker).
    pub fn max_token_len(&self) -> usize {
        self.sentences
            .iter()
            .map(|s| s.token_ids.len())
            .max()
            .unwrap_or(0)
    }
}

/// A zero-padded id matrix ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `(rows, n)` id matrix.
    pub ids: Vec<usize>,
    /// Number of sentences in the batch.
    pub rows: usize,
    /// Padded sentence length `N`.
    pub n: usize,
    /// Per-row word counts before padding.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.n..(r + 1) * self.n]
    }

    /// Builds one batch directly from sentences (no shuffling).
    pub fn from_sentences(sentences: &[&TokenizedSentence], n: usize) -> Self {
        let rows = sentences.len();
        let mut ids = vec![END_ID; rows * n];
        let mut lengths = Vec::with_capacity(rows);
        for (r, s) in sentences.iter().enumerate() {
            assert!(
                s.token_ids.len() <= n,
                "sentence of {} tokens exceeds padded length {n}",
                s.token_ids.len()
            );
            ids[r * n..r * n + s.token_ids.len()].copy_from_slice(&s.token_ids);
            lengths.push(s.raw_length);
        }
        Self {
            ids,
            rows,
            n,
            lengths,
        }
    }
}

/// Shuffles a knowledge set and splits it into padded batches.
///
/// The shuffle depends only on `seed` and the sentence count, so paired
/// knowledge sets of equal length batched with the same seed stay row-aligned
/// across users.  The final batch may be smaller than `batch_size`.
pub fn batch_source(
    ks: &KnowledgeSet,
    batch_size: usize,
    n_padded: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..ks.sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let sel: Vec<&TokenizedSentence> = chunk.iter().map(|&i| &ks.sentences[i]).collect();
            Batch::from_sentences(&sel, n_padded)
        })
        .collect()
}

/// Reads a pair corpus (premise TAB hypothesis per line).
pub fn load_pair_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.splitn(2, '\t');
        let premise = it.next().unwrap_or("").to_string();
        let hypothesis = it.next().unwrap_or("").to_string();
        pairs.push((premise, hypothesis));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(pairs)
}

pub mod synth {
    //! Deterministic synthetic sentence-pair corpora.
    //!
    //! Desk-scale stand-in for a large entailment corpus: every group holds
    //! one sentence per user derived from a shared template, so texts of
    //! different users in the same group overlap heavily in content words.

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SUBJECTS: &[&str] = &[
        "man", "woman", "dog", "girl", "boy", "bird", "rider", "worker", "child", "player",
        "runner", "artist", "farmer", "singer", "driver", "vendor",
    ];
    const VERBS: &[&str] = &[
        "walks", "holds", "watches", "carries", "throws", "pulls", "paints", "rides", "kicks",
        "follows", "lifts", "washes",
    ];
    const OBJECTS: &[&str] = &[
        "ball", "rope", "truck", "bike", "stick", "kite", "basket", "wagon", "drum", "ladder",
        "banner", "bucket",
    ];
    const ADJECTIVES: &[&str] = &[
        "red", "small", "young", "old", "busy", "tall", "green", "quiet", "heavy", "bright",
    ];
    const PLACES: &[&str] = &[
        "park", "street", "field", "beach", "market", "yard", "station", "garden",
    ];

    /// Generates `n_groups` aligned sentence groups, one sentence per user.
    ///
    /// User 0 gets the full sentence; later users get entailment-style
    /// reductions of the same template, so all sentences in a group share
    /// subject, verb, and object.  Every sentence has 4..=9 words.
    pub fn generate_groups(n_groups: usize, users: usize, seed: u64) -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let subj = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
            let verb = VERBS[rng.gen_range(0..VERBS.len())];
            let obj = OBJECTS[rng.gen_range(0..OBJECTS.len())];
            let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
            let place = PLACES[rng.gen_range(0..PLACES.len())];

            // Variants share content words at aligned positions, so the
            // fused side features stay within a short convolution's reach.
            // Function words appear once per sentence to keep the word
            // frequency profile flat.
            let full = format!("the {adj} {subj} {verb} his {obj} near my {place}");
            let medium = format!("a {adj} {subj} {verb} his {obj}");
            let short = format!("a {subj} {verb} his {obj}");

            // Later (weaker) users get shorter reductions, so their content
            // is covered by the sentences of the users decoded before them.
            let mut group = Vec::with_capacity(users);
            for u in 0..users {
                let s = match u % 3 {
                    0 => full.clone(),
                    1 => medium.clone(),
                    _ => short.clone(),
                };
                group.push(s);
            }
            groups.push(group);
        }
        groups
    }

    /// Flattens groups into per-user line vectors (line index = group).
    pub fn per_user_lines(groups: &[Vec<String>]) -> Vec<Vec<String>> {
        let users = groups.first().map_or(0, |g| g.len());
        let mut out = vec![Vec::with_capacity(groups.len()); users];
        for g in groups {
            for (u, s) in g.iter().enumerate() {
                out[u].push(s.clone());
            }
        }
        out
    }

    /// Formats the first two users of each group as premise TAB hypothesis.
    pub fn to_pair_lines(groups: &[Vec<String>]) -> Vec<String> {
        groups
            .iter()
            .map(|g| format!("{}\t{}", g[0], g.get(1).unwrap_or(&g[0])))
            .collect()
    }
}
