//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured values (run with `--nocapture` to see them).
//!
//! The heavier criteria train desk-scale systems; the full suite is sized
//! for roughly fifteen minutes of CPU time on two cores.

use num_complex::Complex64;

use semcom_core::baseline::{
    entropy_bits, ClassicalCodec, HuffmanCodebook, QamConstellation, RepetitionCode,
};
use semcom_core::channel::{
    configure_case, seeded_rng, transmit_mac, ChannelConfig, ChannelModel, Scenario, UserLink,
};
use semcom_core::checkpoint::Checkpoint;
use semcom_core::codec::{
    encode_text, pack_complex, positional_encoding, unpack_complex, CodecDims,
};
use semcom_core::corpus::{batch_source, KnowledgeSet, Vocabulary};
use semcom_core::experiment::{evaluate_classical, evaluate_semantic, DecodeProcess};
use semcom_core::metrics::{bleu, cosine_similarity, FallbackEmbedder, MetricReport};
use semcom_core::sic::{DecodeOptions, UserStacks};
use semcom_core::training::{
    assemble_users, loss_ce, loss_fp, loss_joint, pretrain_single_user, retrain, train_initial_k,
    LossReport, OptimizerConfig, RetrainMode,
};

// ---------------------------------------------------------------------------
// Criterion 1: closed-form unit suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_closed_form_unit_suite() {
    // Positional encoding against an independent evaluation of the closed
    // form, to 1e-12.
    for (l, d) in [(1usize, 4usize), (3, 8), (7, 16), (20, 128)] {
        let got = positional_encoding(l, d);
        for z in 1..=d {
            let want = if z % 2 == 0 {
                ((l as f64) * 10f64.powf(-4.0 * (z as f64) / (d as f64))).sin()
            } else {
                ((l as f64) * 10f64.powf(-4.0 * ((z - 1) as f64) / (d as f64))).cos()
            };
            assert!(
                (got[z - 1] - want).abs() <= 1e-12,
                "PE l={l} d={d} z={z}: {} vs {want}",
                got[z - 1]
            );
        }
    }

    // Pack/unpack round trip, exact.
    let q: Vec<f64> = (0..360).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
    assert_eq!(unpack_complex(&pack_complex(&q)), q);

    // Power normalization to relative 1e-9.
    let mut tape = semcom_core::nn::Tape::new();
    let x = tape.leaf(q.clone(), 1, q.len());
    let m = q.len() / 2;
    let power = 2.7;
    let y = tape
        .normalize_to_power(x, ((m as f64) * power).sqrt())
        .unwrap();
    let mean_p = pack_complex(tape.value(y))
        .iter()
        .map(|s| s.norm_sqr())
        .sum::<f64>()
        / m as f64;
    assert!((mean_p - power).abs() / power <= 1e-9);

    // Cosine hand-derived examples to 1e-9.
    let mut a = vec![0.0; 384];
    let mut b = vec![0.0; 384];
    a[0] = 1.0;
    a[1] = 1.0;
    b[0] = 1.0;
    assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    assert!((cosine_similarity(&a, &b).unwrap() - 1.0 / 2f64.sqrt()).abs() <= 1e-9);

    // BLEU hand-derived examples to 1e-9.
    let t = |s: &str| vec![s.to_string()];
    let same = bleu(&t("a man walks the dog"), &t("a man walks the dog"));
    assert!((same.per_order[0] - 1.0).abs() <= 1e-9);
    assert!((same.combined - 1.0).abs() <= 1e-9);
    let uni = bleu(&t("a b d"), &t("a b c"));
    assert!((uni.per_order[0] - 2.0 / 3.0).abs() <= 1e-9);
    let brevity = bleu(&t("a b c d"), &t("a b"));
    assert!((brevity.per_order[0] - (-1.0f64).exp()).abs() <= 1e-9);

    // Huffman and QAM round trips, exact.
    let counts: Vec<(String, u64)> = [("a", 4u64), ("b", 2), ("c", 1), ("d", 1)]
        .iter()
        .map(|(w, c)| (w.to_string(), *c))
        .collect();
    let cb = HuffmanCodebook::build(&counts).unwrap();
    let msg: Vec<String> = "a b c d a a b".split(' ').map(str::to_string).collect();
    assert_eq!(cb.decode(&cb.encode(&msg).unwrap()), msg);
    let h = entropy_bits(&counts);
    let avg = cb.average_length(&counts);
    assert!(avg >= h && avg < h + 1.0, "avg {avg} entropy {h}");

    let qam = QamConstellation::new();
    let bits: Vec<u8> = (0..120).map(|i| ((i * 5 + 1) % 3 % 2) as u8).collect();
    assert_eq!(qam.demodulate(&qam.modulate(&bits)), bits);
    let mean: f64 = qam.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / 64.0;
    assert!((mean - 1.0).abs() <= 1e-12);
    let coded = RepetitionCode::encode(&bits);
    assert_eq!(RepetitionCode::decode(&coded), bits);

    // Loss identities to 1e-9.
    let ces = [0.31, 1.7, 2.44];
    assert!((loss_joint(&ces) - (0.31 + 1.7 + 2.44)).abs() <= 1e-9);
    let tau = vec![1.0, 1.0, 1.0];
    assert!((loss_fp(&ces, 1, 3, &tau).unwrap() - loss_joint(&ces)).abs() <= 1e-9);
    assert!((loss_fp(&ces, 3, 3, &tau).unwrap() - 2.44).abs() <= 1e-9);
    assert!((loss_fp(&ces, 1, 2, &[2.0, 1.0, 1.0]).unwrap() - (2.0 * 0.31 + 1.7)).abs() <= 1e-9);
    // Hand value: two-word dictionary, uniform soft decision.
    let batch = semcom_core::corpus::Batch {
        ids: vec![1],
        rows: 1,
        n: 1,
        lengths: vec![0],
    };
    let scores = semcom_core::codec::Scores {
        data: vec![0.5, 0.5],
        l: 1,
        n: 1,
        vocab: 2,
    };
    assert!((loss_ce(&batch, &scores) - 2.0).abs() <= 1e-9);

    println!("criterion 1 (closed-form unit suite): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 2: exact cancellation and two-phase bit-identity
// ---------------------------------------------------------------------------

fn micro_dims(vocab: usize, l: usize) -> CodecDims {
    CodecDims {
        vocab,
        d: 16,
        m: 16,
        c: 8,
        n: 7,
        l,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_ff: 64,
        dropout: 0.0,
    }
}

fn short_corpus(groups: usize, users: usize, seed: u64) -> Vec<Vec<String>> {
    let g = semcom_core::corpus::synth::generate_groups(groups, users, seed);
    semcom_core::corpus::synth::per_user_lines(&g)
        .into_iter()
        .map(|lines| {
            lines
                .iter()
                .map(|s| s.split(' ').take(6).collect::<Vec<_>>().join(" "))
                .collect()
        })
        .collect()
}

#[test]
fn criterion_2_exact_cancellation_and_two_phase_identity() {
    let lines = short_corpus(16, 1, 17).pop().unwrap();
    let vocab = Vocabulary::build(&lines, 1).unwrap();
    let ks = KnowledgeSet::from_lines(0, &lines, &vocab).unwrap();
    let dims = micro_dims(vocab.size(), 8);

    // Part 1: noise-free 3-user frame; re-encoding each user from its true
    // text reproduces the transmitted symbols, so successive cancellation
    // leaves a residual that vanishes against the signal.
    let users = assemble_users(3, &dims, false, 71);
    let links = vec![
        UserLink::fixed(1, 9.0, Complex64::new(0.9, 0.1)),
        UserLink::fixed(2, 3.0, Complex64::new(0.7, -0.4)),
        UserLink::fixed(3, 1.0, Complex64::new(0.5, 0.2)),
    ];
    let batch = &batch_source(&ks, dims.l, dims.n, 3)[0];
    let frames: Vec<_> = users
        .iter()
        .zip(&links)
        .map(|(u, l)| encode_text(batch, &u.enc, &dims, l.power).unwrap())
        .collect();
    let frame_refs: Vec<&_> = frames.iter().collect();
    let mut rng = seeded_rng(0);
    let rx = transmit_mac(&frame_refs, &links, 0.0, &mut rng).unwrap();
    let signal_norm: f64 = rx.y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();

    let mut residual = rx.y.clone();
    for (u, link) in links.iter().enumerate() {
        // Perfect re-encoding: the encoder run again on the true text.
        let re = encode_text(batch, &users[u].enc, &dims, link.power).unwrap();
        for (r, &x) in residual.iter_mut().zip(&re.symbols) {
            *r -= link.h * x;
        }
    }
    let resid_norm: f64 = residual.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    assert!(
        resid_norm <= 1e-9 * signal_norm,
        "residual {resid_norm} vs signal {signal_norm}"
    );

    // Part 2: two-phase decoding with a perfectly cancelled new user is
    // bit-identical to the K-user system without it.  The new user is
    // strongest (G1 empty) and micro-trained so its phase-I decode is exact.
    let mut new_user = assemble_users(1, &dims, false, 41).pop().unwrap();
    new_user.enc.user_index = 3;
    new_user.dec.user_index = 3;
    let new_link = UserLink::fixed(3, 1e6, Complex64::new(1.0, 0.0));
    pretrain_single_user(
        &mut new_user,
        &ks,
        new_link,
        0.0,
        &dims,
        OptimizerConfig::default(),
        500,
        43,
    )
    .unwrap();

    let old = assemble_users(2, &dims, false, 47);
    let old_links = vec![links[0], links[1]];
    let f1 = encode_text(batch, &old[0].enc, &dims, old_links[0].power).unwrap();
    let f2 = encode_text(batch, &old[1].enc, &dims, old_links[1].power).unwrap();
    let f3 = encode_text(batch, &new_user.enc, &dims, new_link.power).unwrap();
    let all_links = vec![old_links[0], old_links[1], new_link];
    let rx_all = transmit_mac(&[&f1, &f2, &f3], &all_links, 0.0, &mut rng).unwrap();
    let rx_old = transmit_mac(&[&f1, &f2], &old_links, 0.0, &mut rng).unwrap();

    let opts = DecodeOptions {
        repetition_penalty: 1.0,
        use_side_info: false,
    };
    use semcom_core::sic::{semantic_sic_decode, two_phase_decode, FrameMeta};
    let out = two_phase_decode(
        &rx_all,
        &old_links,
        &[&old[0], &old[1]],
        &[FrameMeta::from(&f1), FrameMeta::from(&f2)],
        &[new_link],
        &[&new_user],
        &[FrameMeta::from(&f3)],
        &dims,
        &vocab,
        opts,
    )
    .unwrap();
    let reference = semantic_sic_decode(
        &rx_old,
        &old_links,
        &[&old[0], &old[1]],
        &[FrameMeta::from(&f1), FrameMeta::from(&f2)],
        &dims,
        &vocab,
        opts,
    )
    .unwrap();
    for (r, text) in out[2].texts.iter().enumerate() {
        assert_eq!(
            text,
            &semcom_core::corpus::detokenize(batch.row(r), &vocab),
            "new-user decode must be exact (row {r})"
        );
    }
    for u in 0..2 {
        assert_eq!(out[u].ids, reference[u].ids, "old user {} differs", u + 1);
    }

    println!("criterion 2 (exact cancellation + two-phase identity): PASS (residual {resid_norm:.2e})");
}

// ---------------------------------------------------------------------------
// Criterion 3: end-to-end gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let report = semcom_core::training::gradient_check(20, 0x5eed);
    let worst = report
        .iter()
        .cloned()
        .fold(0.0f64, |acc, (_, _, rel)| acc.max(rel));
    for (name, entry, rel) in &report {
        assert!(
            *rel <= 1e-3,
            "{name}[{entry}]: relative error {rel}"
        );
    }
    assert!(report.len() >= 20);
    println!(
        "criterion 3 (gradient check, {} parameters): PASS (worst relative error {worst:.2e})",
        report.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: single-user desk-scale convergence
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_single_user_convergence() {
    let lines: Vec<String> = semcom_core::corpus::synth::generate_groups(600, 1, 42)
        .into_iter()
        .flatten()
        .collect();
    assert!(lines.len() <= 1000);
    let vocab = Vocabulary::build(&lines, 1).unwrap();
    assert!(vocab.size() <= 1500);
    let ks = KnowledgeSet::from_lines(0, &lines, &vocab).unwrap();
    let dims = CodecDims {
        vocab: vocab.size(),
        d: 64,
        m: 64,
        c: 36,
        n: 10,
        l: 32,
        enc_layers: 2,
        dec_layers: 2,
        heads: 8,
        d_ff: 256,
        dropout: 0.0,
    };
    // 20 dB receive SNR over AWGN.
    let link = UserLink::fixed(1, 100.0, Complex64::new(1.0, 0.0));
    let channel = ChannelConfig {
        links: vec![link],
        sigma2: 1.0,
        model: ChannelModel::Awgn,
    };
    let mut users = assemble_users(1, &dims, false, 1);
    pretrain_single_user(
        &mut users[0],
        &ks,
        link,
        1.0,
        &dims,
        OptimizerConfig::default(),
        30,
        7,
    )
    .unwrap();

    // 200 held-in training sentences (rounded up to whole frames).
    let held: Vec<String> = lines[..224.min(lines.len())].to_vec();
    let report = evaluate_semantic(
        &[&users[0]],
        &[held],
        &channel,
        &dims,
        &vocab,
        DecodeProcess::Joint,
        DecodeOptions::default(),
        &FallbackEmbedder,
        0.9,
        99,
    )
    .unwrap();
    assert!(
        report.min_bleu[0] >= 0.9,
        "BLEU-1 {} below 0.9",
        report.min_bleu[0]
    );
    println!(
        "criterion 4 (single-user convergence): PASS (BLEU-1 {:.4})",
        report.min_bleu[0]
    );
}

// ---------------------------------------------------------------------------
// Criteria 5-9 share one desk-scale setup
// ---------------------------------------------------------------------------

struct Desk {
    vocab: Vocabulary,
    knowledge: Vec<KnowledgeSet>,
    references: Vec<Vec<String>>,
    dims: CodecDims,
}

fn desk(groups: usize, users: usize, eval_sentences: usize) -> Desk {
    let g = semcom_core::corpus::synth::generate_groups(groups, users, 5);
    let per_user = semcom_core::corpus::synth::per_user_lines(&g);
    let all: Vec<String> = per_user.iter().flatten().cloned().collect();
    let vocab = Vocabulary::build(&all, 1).unwrap();
    let knowledge: Vec<KnowledgeSet> = per_user
        .iter()
        .enumerate()
        .map(|(u, l)| KnowledgeSet::from_lines(u + 1, l, &vocab).unwrap())
        .collect();
    let references: Vec<Vec<String>> = per_user
        .iter()
        .map(|l| l[..eval_sentences.min(l.len())].to_vec())
        .collect();
    let dims = CodecDims {
        vocab: vocab.size(),
        d: 32,
        m: 32,
        c: 16,
        n: 10,
        l: 16,
        enc_layers: 2,
        dec_layers: 2,
        heads: 4,
        d_ff: 128,
        dropout: 0.0,
    };
    Desk {
        vocab,
        knowledge,
        references,
        dims,
    }
}

const PRE_EPOCHS: usize = 10;
const JOINT_EPOCHS: usize = 10;
const RETRAIN_EPOCHS: usize = 24;

/// Pretrains each user alone at a clean 18 dB link (interference-free
/// initialization), reusable across method variants.
fn pretrain_case(desk: &Desk, channel: &ChannelConfig, seed: u64) -> Vec<Checkpoint> {
    (0..channel.links.len())
        .map(|u| {
            let mut stacks = assemble_users(1, &desk.dims, false, seed ^ (u as u64 * 13 + 1))
                .pop()
                .unwrap();
            stacks.enc.user_index = u + 1;
            stacks.dec.user_index = u + 1;
            let clean = UserLink::clean(u + 1, 18.0, channel.sigma2);
            pretrain_single_user(
                &mut stacks,
                &desk.knowledge[u],
                clean,
                channel.sigma2,
                &desk.dims,
                OptimizerConfig::default(),
                PRE_EPOCHS,
                seed ^ ((u as u64 + 1) * 7),
            )
            .unwrap();
            Checkpoint::from_users(std::slice::from_ref(&stacks))
        })
        .collect()
}

/// Joint 2-user stage on top of the pretrained users.
fn joint_stage(
    desk: &Desk,
    channel: &ChannelConfig,
    pre: &[Checkpoint],
    use_si: bool,
    seed: u64,
) -> Vec<UserStacks> {
    let mut users = assemble_users(channel.links.len(), &desk.dims, use_si, seed);
    for (u, ck) in pre.iter().enumerate() {
        ck.apply_to_user(u as u32 + 1, &mut users[u]).unwrap();
    }
    let channel2 = ChannelConfig {
        links: channel.links[..2].to_vec(),
        sigma2: channel.sigma2,
        model: channel.model,
    };
    train_initial_k(
        &mut users[..2],
        &[&desk.knowledge[0], &desk.knowledge[1]],
        &channel2,
        &desk.dims,
        OptimizerConfig::default(),
        JOINT_EPOCHS,
        use_si,
        seed ^ 0x1111,
    )
    .unwrap();
    users
}

struct VariantResult {
    report: MetricReport,
    retrain_reports: Vec<LossReport>,
    old_checksums_before: Vec<u64>,
    old_checksums_after: Vec<u64>,
}

/// Retrains (full or partial) and evaluates one method variant.
fn run_variant(
    desk: &Desk,
    channel: &ChannelConfig,
    mut users: Vec<UserStacks>,
    mode: RetrainMode,
    use_si: bool,
    seed: u64,
) -> VariantResult {
    let ks: Vec<&KnowledgeSet> = desk.knowledge.iter().collect();
    let old_checksums_before: Vec<u64> = users[..2].iter().map(|u| u.checksum()).collect();
    let retrain_reports = retrain(
        mode,
        &mut users,
        2,
        &ks,
        channel,
        &desk.dims,
        OptimizerConfig::default(),
        RETRAIN_EPOCHS,
        None,
        use_si,
        seed ^ 0x2222,
    )
    .unwrap();
    let old_checksums_after: Vec<u64> = users[..2].iter().map(|u| u.checksum()).collect();
    let process = match mode {
        RetrainMode::Full => DecodeProcess::Joint,
        RetrainMode::Partial => DecodeProcess::TwoPhase { k_old: 2 },
    };
    let user_refs: Vec<&UserStacks> = users.iter().collect();
    let report = evaluate_semantic(
        &user_refs,
        &desk.references,
        channel,
        &desk.dims,
        &desk.vocab,
        process,
        DecodeOptions {
            repetition_penalty: 1.2,
            use_side_info: use_si,
        },
        &FallbackEmbedder,
        0.9,
        seed ^ 0x3333,
    )
    .unwrap();
    VariantResult {
        report,
        retrain_reports,
        old_checksums_before,
        old_checksums_after,
    }
}

fn case_channel(case: usize) -> ChannelConfig {
    configure_case(Scenario::TwoPlusOne, case, ChannelModel::Awgn).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 5: pretraining advantage at epoch 5
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_pretraining_advantage() {
    let desk = desk(192, 2, 64);
    let channel = {
        let mut c = case_channel(5);
        c.links.truncate(2);
        c
    };
    let epoch5 = |reports: &[LossReport]| -> f64 {
        let in_epoch: Vec<f64> = reports
            .iter()
            .filter(|r| r.epoch == 4)
            .map(|r| r.aggregate)
            .collect();
        in_epoch.iter().sum::<f64>() / in_epoch.len() as f64
    };
    let mut wins = 0;
    let mut detail = String::new();
    for seed in [11u64, 12, 13] {
        let pre = pretrain_case(&desk, &channel, seed);
        let mut pretrained = assemble_users(2, &desk.dims, true, seed);
        for (u, ck) in pre.iter().enumerate() {
            ck.apply_to_user(u as u32 + 1, &mut pretrained[u]).unwrap();
        }
        let mut scratch = assemble_users(2, &desk.dims, true, seed);
        let ks: Vec<&KnowledgeSet> = desk.knowledge.iter().collect();
        let run = |users: &mut [UserStacks]| {
            train_initial_k(
                users,
                &ks,
                &channel,
                &desk.dims,
                OptimizerConfig::default(),
                5,
                true,
                seed ^ 0x77,
            )
            .unwrap()
        };
        let with_pre = epoch5(&run(&mut pretrained));
        let from_scratch = epoch5(&run(&mut scratch));
        if with_pre < from_scratch {
            wins += 1;
        }
        detail.push_str(&format!(" seed{seed}: {with_pre:.2} vs {from_scratch:.2};"));
    }
    assert_eq!(wins, 3, "pretraining advantage must hold for all seeds:{detail}");
    println!("criterion 5 (pretraining advantage at epoch 5, 3/3 seeds): PASS ({detail})");
}

// ---------------------------------------------------------------------------
// Criterion 6: SNR trend across cases
// ---------------------------------------------------------------------------

fn count_inversions(curve: &[f64], tol: f64) -> (usize, f64) {
    let mut inversions = 0;
    let mut worst: f64 = 0.0;
    for w in curve.windows(2) {
        if w[1] < w[0] - 1e-12 {
            inversions += 1;
            worst = worst.max(w[0] - w[1]);
        }
    }
    let _ = tol;
    (inversions, worst)
}

#[test]
fn criterion_6_snr_trend() {
    let desk = desk(256, 3, 128);
    let seed = 1000u64;
    let mut bleu1 = Vec::new();
    let mut sims = Vec::new();
    for case in 1..=7 {
        let channel = case_channel(case);
        let pre = pretrain_case(&desk, &channel, seed);
        let users = joint_stage(&desk, &channel, &pre, true, seed);
        let out = run_variant(&desk, &channel, users, RetrainMode::Partial, true, seed);
        bleu1.push(out.report.min_bleu[0]);
        sims.push(out.report.min_similarity);
    }
    let (bi, bworst) = count_inversions(&bleu1, 0.02);
    let (si, sworst) = count_inversions(&sims, 0.02);
    assert!(
        bi <= 1 && bworst <= 0.02,
        "min BLEU-1 trend: {bi} inversions, worst {bworst:.4}; curve {bleu1:?}"
    );
    assert!(
        si <= 1 && sworst <= 0.02,
        "min similarity trend: {si} inversions, worst {sworst:.4}; curve {sims:?}"
    );
    println!(
        "criterion 6 (SNR trend, cases 1..7): PASS (BLEU-1 {bleu1:?}, similarity {sims:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: side information helps at low SNR
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_side_information_ordering() {
    let desk = desk(256, 3, 96);
    let seeds = [1u64, 2, 3];
    let mut failures = Vec::new();
    for case in [1usize, 2] {
        let channel = case_channel(case);
        let mut means = std::collections::BTreeMap::new();
        for &seed in &seeds {
            let pre = pretrain_case(&desk, &channel, seed);
            let joint_si = joint_stage(&desk, &channel, &pre, true, seed);
            let joint_nosi = joint_stage(&desk, &channel, &pre, false, seed);
            for (mode, label) in [(RetrainMode::Full, "full"), (RetrainMode::Partial, "partial")] {
                let users_si = clone_via_checkpoint(&joint_si, &desk.dims, true, seed);
                let out_si = run_variant(&desk, &channel, users_si, mode, true, seed);
                let users_no = clone_via_checkpoint(&joint_nosi, &desk.dims, false, seed);
                let out_no = run_variant(&desk, &channel, users_no, mode, false, seed);
                let min_user_si = out_si
                    .report
                    .users
                    .iter()
                    .min_by(|a, b| a.bleu[0].partial_cmp(&b.bleu[0]).unwrap())
                    .unwrap()
                    .user_index;
                println!(
                    "  case {case} seed {seed} {label}: si {:.4} (min user {min_user_si}) vs nosi {:.4}",
                    out_si.report.min_bleu[0], out_no.report.min_bleu[0]
                );
                *means.entry(format!("{label}_si")).or_insert(0.0) +=
                    out_si.report.min_bleu[0] / seeds.len() as f64;
                *means.entry(format!("{label}_nosi")).or_insert(0.0) +=
                    out_no.report.min_bleu[0] / seeds.len() as f64;
            }
        }
        for label in ["full", "partial"] {
            let si = means[&format!("{label}_si")];
            let nosi = means[&format!("{label}_nosi")];
            println!(
                "criterion 7 case {case} {label}: si {si:.4} vs nosi {nosi:.4} ({})",
                if si >= nosi { "ok" } else { "VIOLATION" }
            );
            if si < nosi {
                failures.push(format!(
                    "case {case}: {label} retraining with SI {si:.4} below without {nosi:.4}"
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("; "));
    println!("criterion 7 (side-information ordering at low SNR): PASS");
}

/// Deep-copies trained stacks through the checkpoint layer so one joint
/// stage can feed several retraining variants.
fn clone_via_checkpoint(
    users: &[UserStacks],
    dims: &CodecDims,
    use_si: bool,
    seed: u64,
) -> Vec<UserStacks> {
    let ck = Checkpoint::from_users(users);
    let mut fresh = assemble_users(users.len(), dims, use_si, seed);
    ck.apply_to_users(&mut fresh).unwrap();
    fresh
}

// ---------------------------------------------------------------------------
// Criterion 8: partial retraining freezes old users and costs less
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_partial_freeze_and_cost() {
    let desk = desk(192, 3, 64);
    let channel = case_channel(4);
    let seed = 21u64;
    let pre = pretrain_case(&desk, &channel, seed);
    let joint = joint_stage(&desk, &channel, &pre, true, seed);

    let full = run_variant(
        &desk,
        &channel,
        clone_via_checkpoint(&joint, &desk.dims, true, seed),
        RetrainMode::Full,
        true,
        seed,
    );
    let partial = run_variant(
        &desk,
        &channel,
        clone_via_checkpoint(&joint, &desk.dims, true, seed),
        RetrainMode::Partial,
        true,
        seed,
    );

    assert_eq!(
        partial.old_checksums_before, partial.old_checksums_after,
        "partial retraining must not touch old users"
    );
    assert_ne!(
        full.old_checksums_before, full.old_checksums_after,
        "full retraining must update old users"
    );

    let mean = |rs: &[LossReport]| {
        rs.iter().map(|r| r.wall_secs).sum::<f64>() / rs.len() as f64
    };
    let t_full = mean(&full.retrain_reports);
    let t_partial = mean(&partial.retrain_reports);
    assert!(
        t_partial < t_full,
        "partial {t_partial:.4}s/it should be below full {t_full:.4}s/it"
    );
    println!(
        "criterion 8 (freeze + cost ordering): PASS (partial {t_partial:.3}s/it < full {t_full:.3}s/it)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: classical baseline sanity
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_classical_baseline() {
    let desk = desk(512, 3, 256);
    let seeds = [1u64, 2, 3];

    // The classical baseline: plain Huffman + 64-QAM with conventional SIC
    // (the optional repetition code stays off here; at these SINRs it
    // cannot correct hard-decision errors and only reshuffles the floor).
    let codecs: Vec<ClassicalCodec> = desk
        .knowledge
        .iter()
        .map(|ks| {
            let sentences: Vec<Vec<String>> = ks
                .sentences
                .iter()
                .map(|s| {
                    semcom_core::corpus::detokenize(&s.token_ids, &desk.vocab)
                        .split_whitespace()
                        .map(str::to_string)
                        .collect()
                })
                .collect();
            ClassicalCodec::new(HuffmanCodebook::from_sentences(&sentences).unwrap(), false)
        })
        .collect();

    let channel = case_channel(1);
    let mut classical_mean = 0.0;
    let mut variant_means: std::collections::BTreeMap<&str, f64> = Default::default();
    for &seed in &seeds {
        let classical = evaluate_classical(
            &codecs,
            &desk.references,
            &channel,
            &desk.dims,
            &FallbackEmbedder,
            0.9,
            seed,
        )
        .unwrap();
        classical_mean += classical.min_bleu[0] / seeds.len() as f64;

        let pre = pretrain_case(&desk, &channel, seed);
        let joint_si = joint_stage(&desk, &channel, &pre, true, seed);
        let joint_nosi = joint_stage(&desk, &channel, &pre, false, seed);
        for (name, mode, si, joint) in [
            ("full_retrain_si", RetrainMode::Full, true, &joint_si),
            ("full_retrain_no_si", RetrainMode::Full, false, &joint_nosi),
            ("partial_retrain_si", RetrainMode::Partial, true, &joint_si),
            ("partial_retrain_no_si", RetrainMode::Partial, false, &joint_nosi),
        ] {
            let users = clone_via_checkpoint(joint, &desk.dims, si, seed);
            let out = run_variant(&desk, &channel, users, mode, si, seed);
            *variant_means.entry(name).or_insert(0.0) +=
                out.report.min_bleu[0] / seeds.len() as f64;
        }
        // Isolated: single-user-trained stacks decode the raw signal
        // directly, every other user treated as noise.
        let mut isolated = assemble_users(3, &desk.dims, false, seed);
        for (u, ck) in pre.iter().enumerate() {
            ck.apply_to_user(u as u32 + 1, &mut isolated[u]).unwrap();
        }
        let user_refs: Vec<&UserStacks> = isolated.iter().collect();
        let iso = evaluate_semantic(
            &user_refs,
            &desk.references,
            &channel,
            &desk.dims,
            &desk.vocab,
            DecodeProcess::PerUser,
            DecodeOptions {
                repetition_penalty: 1.2,
                use_side_info: false,
            },
            &FallbackEmbedder,
            0.9,
            seed ^ 0x3333,
        )
        .unwrap();
        *variant_means.entry("isolated").or_insert(0.0) +=
            iso.min_bleu[0] / seeds.len() as f64;
    }

    // Interference-free 30 dB single user: the classical chain is exact.
    let single = ChannelConfig {
        links: vec![UserLink::fixed(1, 1000.0, Complex64::new(1.0, 0.0))],
        sigma2: 1.0,
        model: ChannelModel::Awgn,
    };
    let clean = evaluate_classical(
        &codecs[..1],
        &desk.references[..1],
        &single,
        &desk.dims,
        &FallbackEmbedder,
        0.9,
        1,
    )
    .unwrap();
    assert!(
        (clean.min_bleu[0] - 1.0).abs() <= 1e-12,
        "clean classical BLEU-1 {}",
        clean.min_bleu[0]
    );

    println!(
        "criterion 9 measurements (case 1, mean of 3 seeds): classical {classical_mean:.4}, variants {variant_means:?}"
    );
    let mut below_all = true;
    for (name, mean) in &variant_means {
        if classical_mean >= *mean {
            below_all = false;
            println!(
                "criterion 9: classical {classical_mean:.4} is NOT below {name} ({mean:.4})"
            );
        }
    }
    assert!(
        below_all,
        "classical baseline must score below every trained semantic variant"
    );
    println!(
        "criterion 9 (classical baseline sanity): PASS (classical {classical_mean:.4} below all variants; clean chain exact)"
    );
}
