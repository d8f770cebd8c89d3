//! Property tests over the codec framing, metrics, and the Huffman code.

use proptest::prelude::*;

use num_complex::Complex64;
use semcom_core::baseline::{HuffmanCodebook, QamConstellation};
use semcom_core::codec::{pack_complex, unpack_complex, unpack_frame, CodecDims};
use semcom_core::metrics::{bleu, text_similarity, FallbackEmbedder};

fn dims(l: usize, n: usize, c: usize) -> CodecDims {
    CodecDims {
        vocab: 8,
        d: 8,
        m: 2 * c.max(4),
        c,
        n,
        l,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_ff: 16,
        dropout: 0.0,
    }
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "man", "dog", "kite", "walks", "holds", "the", "a", "red", "park", "ball",
    ])
    .prop_map(str::to_string)
}

fn sentence(min_words: usize, max_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), min_words..=max_words).prop_map(|ws| ws.join(" "))
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(q in prop::collection::vec(-10.0f64..10.0, 2..200)) {
        let q = if q.len() % 2 == 1 { q[..q.len() - 1].to_vec() } else { q };
        prop_assert_eq!(unpack_complex(&pack_complex(&q)), q);
    }

    #[test]
    fn unpack_frame_inverts_packing(
        l in 1usize..4,
        n in 1usize..6,
        half_c in 1usize..4,
        seed in 0u64..1000,
    ) {
        let c = 2 * half_c;
        let d = dims(l, n, c);
        let m = d.channel_uses();
        let q: Vec<f64> = (0..2 * m)
            .map(|i| (((i as u64 + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        let feats = unpack_frame(&pack_complex(&q), &d).unwrap();
        prop_assert_eq!(&feats.data, &q);
        prop_assert_eq!((feats.l, feats.n, feats.c), (l, n, c));
    }

    #[test]
    fn bleu_and_similarity_stay_in_unit_interval(
        a in prop::collection::vec(sentence(1, 8), 1..4),
        b in prop::collection::vec(sentence(1, 8), 1..4),
    ) {
        let scores = bleu(&a, &b);
        for p in &scores.per_order {
            prop_assert!((0.0..=1.0 + 1e-12).contains(p));
        }
        prop_assert!((0.0..=1.0 + 1e-12).contains(&scores.combined));
        let sim = text_similarity(&a, &b, &FallbackEmbedder).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&sim));
    }

    #[test]
    fn bleu_identity_holds_for_corpus_length_sentences(s in prop::collection::vec(sentence(4, 10), 1..4)) {
        let scores = bleu(&s, &s);
        for p in &scores.per_order {
            prop_assert!((p - 1.0).abs() < 1e-12);
        }
        prop_assert!((text_similarity(&s, &s, &FallbackEmbedder).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_precision_non_increasing_in_order(
        reference in sentence(1, 12),
        candidate in sentence(1, 12),
    ) {
        let orders = semcom_core::metrics::clipped_precisions(&reference, &candidate, 4);
        let mut prev = f64::INFINITY;
        for p in orders.into_iter().flatten() {
            prop_assert!(p <= prev + 1e-12, "precision rose: {} > {}", p, prev);
            prev = p;
        }
    }

    #[test]
    fn huffman_round_trip(
        words in prop::collection::vec(word(), 1..40),
    ) {
        let mut counts: std::collections::BTreeMap<String, u64> = Default::default();
        for w in &words {
            *counts.entry(w.clone()).or_insert(0) += 1;
        }
        let table: Vec<(String, u64)> = counts.into_iter().collect();
        let cb = HuffmanCodebook::build(&table).unwrap();
        let bits = cb.encode(&words).unwrap();
        prop_assert_eq!(cb.decode(&bits), words);
    }

    #[test]
    fn qam_round_trip(bits in prop::collection::vec(0u8..2, 6..120)) {
        let qam = QamConstellation::new();
        let symbols = qam.modulate(&bits);
        let mut padded = bits.clone();
        while padded.len() % 6 != 0 {
            padded.push(0);
        }
        prop_assert_eq!(qam.demodulate(&symbols), padded);
    }

    #[test]
    fn power_normalization_invariant(
        raw in prop::collection::vec(-5.0f64..5.0, 4..64),
        power in 0.1f64..50.0,
    ) {
        let raw = if raw.len() % 2 == 1 { raw[..raw.len() - 1].to_vec() } else { raw };
        prop_assume!(raw.iter().any(|&v| v != 0.0));
        let mut tape = semcom_core::nn::Tape::new();
        let x = tape.leaf(raw.clone(), 1, raw.len());
        let m = raw.len() / 2;
        let target = ((m as f64) * power).sqrt();
        let y = tape.normalize_to_power(x, target).unwrap();
        let symbols: Vec<Complex64> = pack_complex(tape.value(y));
        let mean = symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / m as f64;
        prop_assert!((mean - power).abs() / power <= 1e-9);
    }
}
