//! Semantic successive interference cancellation at the base station.
//!
//! Users are decoded strongest first.  Each pass equalizes the residual
//! signal, undoes the transmit normalization, reshapes to compressed
//! word-semantic features, optionally fuses already-decoded users' features
//! through the integrated feature generator (IFG), and runs the user's
//! decoder stack.  The decoded user is then re-encoded (feature-level
//! `r = AE(u)` inside the SIC loop, or full text re-encoding in the
//! two-phase decoder) and its signal is subtracted before the next pass.
//!
//! After partial retraining the receiver runs two phases: decode the strong
//! old users and the new users first, cancel the new users from the original
//! signal, then run the original K-user decoder as if the new users never
//! joined.

use num_complex::Complex64;

use crate::channel::{order_users, ReceivedFrame, UserLink};
use crate::codec::{
    decode_features, greedy_decode_with_repetition_penalty, harden_ids, CodecDims, DecoderStack,
    EncoderStack, Features, Scores, SymbolFrame,
};
use crate::corpus::{Batch, TokenizedSentence, Vocabulary, END_ID};
use crate::nn::{Binding, Conv1d, Gdn, ParamStore, Tape, Var};
use crate::{Error, Result};

use rand_chacha::ChaCha8Rng;

/// Re-encoded features of already-decoded users, keyed by user index.
#[derive(Debug, Clone, Default)]
pub struct SideInfoCache {
    entries: Vec<(usize, Features)>,
}

impl SideInfoCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, user_index: usize, features: Features) {
        self.entries.push((user_index, features));
    }

    pub fn get(&self, user_index: usize) -> Option<&Features> {
        self.entries
            .iter()
            .find(|(u, _)| *u == user_index)
            .map(|(_, f)| f)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One feature-extraction branch: two kernel-3 convolutions, each followed
/// by (inverse) generalized divisive normalization.
#[derive(Debug, Clone)]
struct ConvBranch {
    c1: Conv1d,
    g1: Gdn,
    c2: Conv1d,
    g2: Gdn,
}

impl ConvBranch {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        deconv: bool,
        inverse_gdn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            c1: Conv1d::new(store, &format!("{name}.c1"), c_in, c_mid, deconv, rng),
            g1: Gdn::new(store, &format!("{name}.g1"), c_mid, inverse_gdn),
            c2: Conv1d::new(store, &format!("{name}.c2"), c_mid, c_out, deconv, rng),
            g2: Gdn::new(store, &format!("{name}.g2"), c_out, inverse_gdn),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        seqs: usize,
        len: usize,
    ) -> Var {
        let h = self.c1.forward(tape, bind, store, x, seqs, len);
        let h = self.g1.forward(tape, bind, store, h);
        let h = self.c2.forward(tape, bind, store, h, seqs, len);
        self.g2.forward(tape, bind, store, h)
    }
}

/// Integrated feature generator for one user.
///
/// `g = ReLU(theta(concat(pi(r_hat), omega_1(r_tilde_1), ...)) + r_hat)`.
/// The extraction branches are convolution + GDN pairs (channels
/// `c -> 2c -> c`); the fusion branch runs deconvolution + IGDN over the
/// concatenated channels (`c*(sides+1) -> 2c -> c`).
pub struct IfgNet {
    pub user_index: usize,
    /// Users whose cached features this net fuses, in decode order.
    pub side_users: Vec<usize>,
    pub store: ParamStore,
    omegas: Vec<ConvBranch>,
    pi: ConvBranch,
    theta: ConvBranch,
}

impl IfgNet {
    /// `side_users` are the already-decoded users visible to this user, in
    /// the order they are decoded.
    pub fn new(
        user_index: usize,
        side_users: Vec<usize>,
        dims: &CodecDims,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            !side_users.is_empty(),
            "the first decoded user bypasses the IFG"
        );
        let c = dims.c;
        let mut store = ParamStore::new();
        let omegas = side_users
            .iter()
            .map(|u| ConvBranch::new(&mut store, &format!("omega{u}"), c, 2 * c, c, false, false, rng))
            .collect();
        let pi = ConvBranch::new(&mut store, "pi", c, 2 * c, c, false, false, rng);
        let fused_in = c * (side_users.len() + 1);
        let theta = ConvBranch::new(&mut store, "theta", fused_in, 2 * c, c, true, true, rng);
        // The fusion branch starts near-silent: its final weights are zeroed
        // so no initialization noise enters the residual, and its bias is
        // lifted so g = ReLU(r_hat + b) keeps units alive under heavy
        // channel noise (a plain shift the decoder absorbs).  Training grows
        // the actual mixing from there.
        for v in &mut store.params[theta.c2.w.0].data {
            *v = 0.0;
        }
        for v in &mut store.params[theta.c2.b.0].data {
            *v = 1.0;
        }
        Self {
            user_index,
            side_users,
            store,
            omegas,
            pi,
            theta,
        }
    }

    /// Fusion on an existing tape; `r_hat` and the side features are
    /// `[L*N, c]` nodes.
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        r_hat: Var,
        side: &[Var],
        seqs: usize,
        len: usize,
    ) -> Var {
        assert_eq!(side.len(), self.side_users.len(), "side feature count");
        let mut parts = Vec::with_capacity(side.len() + 1);
        parts.push(self.pi.forward(tape, bind, &self.store, r_hat, seqs, len));
        for (branch, &s) in self.omegas.iter().zip(side) {
            parts.push(branch.forward(tape, bind, &self.store, s, seqs, len));
        }
        let stacked = tape.concat_cols(&parts);
        let fused = self.theta.forward(tape, bind, &self.store, stacked, seqs, len);
        let residual = tape.add(fused, r_hat);
        tape.relu(residual)
    }

    /// Test hook: zeroes the fusion branch output so `g = ReLU(r_hat)`.
    pub fn zero_theta_output(&mut self) {
        let ids = [self.theta.c2.w, self.theta.c2.b];
        for id in ids {
            for v in &mut self.store.params[id.0].data {
                *v = 0.0;
            }
        }
    }
}

/// Fuses the current user's features with cached side information.
///
/// Shape-preserving; errors when a required user's features are missing.
pub fn ifg_fuse(r_hat: &Features, cache: &SideInfoCache, net: &IfgNet) -> Result<Features> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(&net.store, false);
    let input = tape.constant(r_hat.data.clone(), r_hat.l * r_hat.n, r_hat.c);
    let mut side_vars = Vec::with_capacity(net.side_users.len());
    for &u in &net.side_users {
        let f = cache.get(u).ok_or(Error::MissingSideInfo(u))?;
        side_vars.push(tape.constant(f.data.clone(), f.l * f.n, f.c));
    }
    let g = net.fuse_on_tape(&mut tape, &mut bind, input, &side_vars, r_hat.l, r_hat.n);
    Ok(Features {
        data: tape.value(g).to_vec(),
        l: r_hat.l,
        n: r_hat.n,
        c: r_hat.c,
    })
}

/// Trainable stacks of one user.
pub struct UserStacks {
    pub enc: EncoderStack,
    pub dec: DecoderStack,
    pub ifg: Option<IfgNet>,
}

impl UserStacks {
    /// A fresh user: encoder/decoder stacks plus an IFG when the user has
    /// stronger peers to listen to.
    pub fn new(
        user_index: usize,
        side_users: Vec<usize>,
        dims: &CodecDims,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let enc = EncoderStack::new(user_index, dims, rng);
        let dec = DecoderStack::new(user_index, dims, rng);
        let ifg = if side_users.is_empty() {
            None
        } else {
            Some(IfgNet::new(user_index, side_users, dims, rng))
        };
        Self { enc, dec, ifg }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = self.enc.store.checksum() ^ self.dec.store.checksum().rotate_left(17);
        if let Some(ifg) = &self.ifg {
            h ^= ifg.store.checksum().rotate_left(31);
        }
        h
    }
}

/// Out-of-band frame state the receiver is assumed to know.
#[derive(Debug, Clone, Copy)]
pub struct FrameMeta {
    pub power: f64,
    pub norm_scale: f64,
}

impl From<&SymbolFrame> for FrameMeta {
    fn from(f: &SymbolFrame) -> Self {
        Self {
            power: f.power,
            norm_scale: f.norm_scale,
        }
    }
}

/// Zero-forcing equalization `x_hat = y / h`.
pub fn equalize(y: &[Complex64], link: &UserLink) -> Result<Vec<Complex64>> {
    if link.h.norm_sqr() == 0.0 {
        return Err(Error::ZeroGain(link.index));
    }
    Ok(y.iter().map(|&v| v / link.h).collect())
}

/// Decode controls used at evaluation time.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    /// Greedy repetition penalty (1.0 disables it); the end marker is exempt.
    pub repetition_penalty: f64,
    /// Fuse side information through the IFG nets.
    pub use_side_info: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            repetition_penalty: 1.2,
            use_side_info: true,
        }
    }
}

/// One user's decoded output.
#[derive(Debug, Clone)]
pub struct DecodedUser {
    pub user_index: usize,
    pub scores: Scores,
    pub ids: Vec<Vec<usize>>,
    pub texts: Vec<String>,
}

/// Word counts before the first end marker, per sentence.
pub fn decoded_lengths(ids: &[Vec<usize>], n: usize) -> Vec<usize> {
    ids.iter()
        .map(|row| row.iter().position(|&id| id == END_ID).unwrap_or(n))
        .collect()
}

/// Builds a padded batch out of hard-decoded sentences (for text-level
/// re-encoding).  A sentence that never emitted the end marker is capped at
/// `n - 1` words so the marker still fits the frame format.
pub fn batch_from_ids(ids: &[Vec<usize>], n: usize) -> Batch {
    let sentences: Vec<TokenizedSentence> = ids
        .iter()
        .map(|row| {
            let len = row
                .iter()
                .position(|&id| id == END_ID)
                .unwrap_or(row.len())
                .min(n - 1);
            let mut token_ids: Vec<usize> = row[..len].to_vec();
            token_ids.push(END_ID);
            TokenizedSentence {
                token_ids,
                raw_length: len,
            }
        })
        .collect();
    let refs: Vec<&TokenizedSentence> = sentences.iter().collect();
    Batch::from_sentences(&refs, n)
}

/// Re-encodes decoded word-semantic vectors and cancels the user's signal.
///
/// `u_hat` is the decoder's `(L, N, m)` intermediate; `lengths` are the
/// decoded word counts that define which positions transmit.  Returns the
/// updated residual and the masked re-encoded features `r_tilde` for the
/// side-information cache.  A frame that re-encodes to zero energy cancels
/// nothing.
pub fn reencode_cancel(
    y: &[Complex64],
    u_hat: &Features,
    lengths: &[usize],
    enc: &EncoderStack,
    link: &UserLink,
    meta: FrameMeta,
    dims: &CodecDims,
) -> Result<(Vec<Complex64>, Features)> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(&enc.store, false);
    let rows = u_hat.l * u_hat.n;
    let input = tape.constant(u_hat.data.clone(), rows, u_hat.c);
    let r = enc.compress_on_tape(&mut tape, &mut bind, input);

    let mut mask = vec![0.0; rows];
    for (j, &len) in lengths.iter().enumerate() {
        for pos in 0..len.min(u_hat.n) {
            mask[j * u_hat.n + pos] = 1.0;
        }
    }
    let masked = tape.mul_row_const(r, &mask);
    let r_tilde = Features {
        data: tape.value(masked).to_vec(),
        l: u_hat.l,
        n: u_hat.n,
        c: dims.c,
    };

    let m = dims.channel_uses();
    let flat = tape.reshape(masked, 1, 2 * m);
    let target = ((m as f64) * meta.power).sqrt();
    let mut y_out = y.to_vec();
    if let Some(x) = tape.normalize_to_power(flat, target) {
        let xv = tape.value(x);
        for (t, res) in y_out.iter_mut().enumerate() {
            let sym = Complex64::new(xv[2 * t], xv[2 * t + 1]);
            *res -= link.h * sym;
        }
    }
    Ok((y_out, r_tilde))
}

/// Full semantic SIC over one received frame.
///
/// `users` and `metas` are aligned with `links`; the decode order is
/// resolved internally by long-term received power, so permuting the inputs
/// never changes the outputs.  Results come back in the order given.
pub fn semantic_sic_decode(
    rx: &ReceivedFrame,
    links: &[UserLink],
    users: &[&UserStacks],
    metas: &[FrameMeta],
    dims: &CodecDims,
    vocab: &Vocabulary,
    opts: DecodeOptions,
) -> Result<Vec<DecodedUser>> {
    assert_eq!(links.len(), users.len());
    assert_eq!(links.len(), metas.len());
    let order = order_users(links);
    let mut residual = rx.y.clone();
    let mut cache = SideInfoCache::new();
    let mut out: Vec<Option<DecodedUser>> = (0..links.len()).map(|_| None).collect();

    for (pos, &li) in order.iter().enumerate() {
        let link = &links[li];
        let stacks = users[li];
        let meta = metas[li];

        let xhat = equalize(&residual, link)?;
        let denorm: Vec<Complex64> = xhat.iter().map(|&v| v / meta.norm_scale).collect();
        let r_hat = crate::codec::unpack_frame(&denorm, dims)?;

        let fused = if opts.use_side_info {
            match &stacks.ifg {
                Some(net) if !net.side_users.is_empty() => {
                    if cache.is_empty() && pos > 0 {
                        return Err(Error::MissingSideInfo(net.side_users[0]));
                    }
                    ifg_fuse(&r_hat, &cache, net)?
                }
                _ => r_hat.clone(),
            }
        } else {
            r_hat.clone()
        };

        let scores = decode_features(&fused, &stacks.dec)?;
        let ids = if opts.repetition_penalty > 1.0 {
            greedy_decode_with_repetition_penalty(&scores, opts.repetition_penalty, Some(END_ID))
        } else {
            harden_ids(&scores)
        };
        let texts = ids
            .iter()
            .map(|row| crate::corpus::detokenize(row, vocab))
            .collect();

        // Re-encode and cancel before moving to the next user.
        if pos + 1 < order.len() {
            let u_hat = decode_u_hat(&fused, &stacks.dec)?;
            let lengths = decoded_lengths(&ids, dims.n);
            let (y_next, r_tilde) =
                reencode_cancel(&residual, &u_hat, &lengths, &stacks.enc, link, meta, dims)?;
            residual = y_next;
            cache.push(link.index, r_tilde);
        }

        out[li] = Some(DecodedUser {
            user_index: link.index,
            scores,
            ids,
            texts,
        });
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Recomputes the decoder's decompressed intermediate `u = AD(features)`.
fn decode_u_hat(feat: &Features, dec: &DecoderStack) -> Result<Features> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(&dec.store, false);
    let input = tape.constant(feat.data.clone(), feat.l * feat.n, feat.c);
    let u = dec.ad.forward(&mut tape, &mut bind, &dec.store, input);
    Ok(Features {
        data: tape.value(u).to_vec(),
        l: feat.l,
        n: feat.n,
        c: dec.dims.m,
    })
}

/// Grouping of old users around the new arrivals for two-phase decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoPhasePlan {
    /// Positions (into the old-user slice) stronger than the weakest new user.
    pub g1: Vec<usize>,
    /// Remaining old-user positions.
    pub g2: Vec<usize>,
    /// Count of new users.
    pub new_users: usize,
}

impl TwoPhasePlan {
    /// Partitions by long-term received power; old users tie-break ahead of
    /// new ones.
    pub fn build(old_links: &[UserLink], new_links: &[UserLink]) -> Self {
        let threshold = new_links
            .iter()
            .map(|l| l.power * l.avg_gain_sq)
            .fold(f64::INFINITY, f64::min);
        let mut g1 = Vec::new();
        let mut g2 = Vec::new();
        for (i, l) in old_links.iter().enumerate() {
            if l.power * l.avg_gain_sq >= threshold {
                g1.push(i);
            } else {
                g2.push(i);
            }
        }
        Self {
            g1,
            g2,
            new_users: new_links.len(),
        }
    }
}

/// Two-phase decoding after partial retraining.
///
/// Phase I runs semantic SIC over the strong old users and the new users to
/// recover the new users' texts.  Phase II subtracts the new users'
/// re-encoded (text-level) signals from the original received frame and
/// runs the untouched K-user decoder.  Returns old users first, then new
/// users, aligned with the input slices.
#[allow(clippy::too_many_arguments)]
pub fn two_phase_decode(
    rx: &ReceivedFrame,
    old_links: &[UserLink],
    old_users: &[&UserStacks],
    old_metas: &[FrameMeta],
    new_links: &[UserLink],
    new_users: &[&UserStacks],
    new_metas: &[FrameMeta],
    dims: &CodecDims,
    vocab: &Vocabulary,
    opts: DecodeOptions,
) -> Result<Vec<DecodedUser>> {
    let plan = TwoPhasePlan::build(old_links, new_links);

    // Phase I: strong old users plus the new users, combined SIC.
    let new_decoded: Vec<DecodedUser> = if plan.new_users > 0 {
        let mut links = Vec::new();
        let mut users = Vec::new();
        let mut metas = Vec::new();
        for &i in &plan.g1 {
            links.push(old_links[i]);
            users.push(old_users[i]);
            metas.push(old_metas[i]);
        }
        for i in 0..new_links.len() {
            links.push(new_links[i]);
            users.push(new_users[i]);
            metas.push(new_metas[i]);
        }
        let decoded = semantic_sic_decode(rx, &links, &users, &metas, dims, vocab, opts)?;
        decoded.into_iter().skip(plan.g1.len()).collect()
    } else {
        Vec::new()
    };

    // Phase II: remove the new users from the original signal, then run the
    // original K-user decoder unchanged.
    let mut y = rx.y.clone();
    for (i, dec) in new_decoded.iter().enumerate() {
        let batch = batch_from_ids(&dec.ids, dims.n);
        match crate::codec::encode_text(&batch, &new_users[i].enc, dims, new_metas[i].power) {
            Ok(frame) => {
                for (res, &x) in y.iter_mut().zip(&frame.symbols) {
                    *res -= new_links[i].h * x;
                }
            }
            // Nothing decodable for this user: cancel nothing.
            Err(Error::ZeroEnergyFrame) => {}
            Err(e) => return Err(e),
        }
    }
    let old_decoded = semantic_sic_decode(
        &ReceivedFrame { y },
        old_links,
        old_users,
        old_metas,
        dims,
        vocab,
        opts,
    )?;

    Ok(old_decoded.into_iter().chain(new_decoded).collect())
}
