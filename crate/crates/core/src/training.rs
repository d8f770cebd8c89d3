//! Losses and the training stages: single-user pretraining, initial K-user
//! joint training, and full/partial retraining after new users join.
//!
//! Every step builds one tape spanning all users: encode, superpose over the
//! channel, then sequential SIC decoding with soft scores feeding the loss.
//! Cancellation and cached side features are treated as constants (no
//! gradient flows back through them), matching the sequential
//! decode-then-cache structure of the receiver.
//!
//! The cross-entropy is the two-term binary form in bits, summed over word
//! positions and dictionary entries and averaged over sentences; positions
//! after the end marker are masked out.

use std::time::Instant;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;

use crate::channel::{derive_rng, noise_interleaved, order_users, ChannelConfig, UserLink};
use crate::codec::{frame_on_tape, CodecDims, Scores};
use crate::corpus::{batch_source, Batch, KnowledgeSet, END_ID};
use crate::nn::{Adam, Binding, Dropout, Tape, Var, PROB_CLAMP};
pub use crate::nn::OptimizerConfig;
use crate::sic::UserStacks;
use crate::{Error, Result};

/// Training stage selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PretrainSingle,
    JointK,
    RetrainFull,
    RetrainPartial,
}

/// A resolved training plan: stage, epoch budget, which users receive
/// gradients, loss weights, and the trained-user index range of the
/// retraining loss.
#[derive(Debug, Clone)]
pub struct TrainingPlan {
    pub stage: Stage,
    pub epochs: usize,
    /// Per-user trainable flags (aligned with the system's user list).
    pub trainable: Vec<bool>,
    /// Per-user tradeoff weights `tau` (all ones by default).
    pub tau: Vec<f64>,
    /// 1-based inclusive user range whose losses enter the objective.
    pub xi: usize,
    pub rho: usize,
}

impl TrainingPlan {
    /// 50-epoch single-user pretraining.
    pub fn pretrain_single(epochs: usize) -> Self {
        Self {
            stage: Stage::PretrainSingle,
            epochs,
            trainable: vec![true],
            tau: vec![1.0],
            xi: 1,
            rho: 1,
        }
    }

    /// 30-epoch joint training of `k` users with the unweighted sum loss.
    pub fn joint(k: usize, epochs: usize) -> Self {
        Self {
            stage: Stage::JointK,
            epochs,
            trainable: vec![true; k],
            tau: vec![1.0; k],
            xi: 1,
            rho: k,
        }
    }

    /// Full retraining of `k` old plus `n` new users, loss over all of them.
    pub fn retrain_full(k: usize, n: usize, epochs: usize, tau: Vec<f64>) -> Self {
        assert_eq!(tau.len(), k + n);
        Self {
            stage: Stage::RetrainFull,
            epochs,
            trainable: vec![true; k + n],
            tau,
            xi: 1,
            rho: k + n,
        }
    }

    /// Partial retraining: only the `n` new users' stacks receive gradients
    /// and only their losses enter the objective.
    pub fn retrain_partial(k: usize, n: usize, epochs: usize) -> Self {
        let mut trainable = vec![false; k + n];
        for t in trainable.iter_mut().skip(k) {
            *t = true;
        }
        Self {
            stage: Stage::RetrainPartial,
            epochs,
            trainable,
            tau: vec![1.0; k + n],
            xi: k + 1,
            rho: k + n,
        }
    }

    fn loss_weights(&self) -> Vec<f64> {
        (1..=self.trainable.len())
            .map(|i| {
                if (self.xi..=self.rho).contains(&i) {
                    self.tau[i - 1]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Loss bookkeeping for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    /// Per-user cross-entropy, in user order.
    pub per_user: Vec<f64>,
    /// The training objective value (weighted sum per the plan).
    pub aggregate: f64,
    pub wall_secs: f64,
}

impl LossReport {
    pub fn csv_header(users: usize) -> String {
        let mut cols: Vec<String> = vec!["step".into(), "epoch".into()];
        cols.extend((1..=users).map(|u| format!("loss_user{u}")));
        cols.push("aggregate".into());
        cols.push("wall_secs_per_iter".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.epoch.to_string()];
        cols.extend(self.per_user.iter().map(|v| format!("{v:.12e}")));
        cols.push(format!("{:.12e}", self.aggregate));
        cols.push(format!("{:.6}", self.wall_secs));
        cols.join(",")
    }
}

/// Cross-entropy of soft scores against a target batch: two-term
/// binary cross-entropy in bits over the dictionary, positions past the end
/// marker masked, averaged over sentences.
pub fn loss_ce(targets: &Batch, scores: &Scores) -> f64 {
    assert_eq!(scores.l, targets.rows, "sentence count mismatch");
    assert_eq!(scores.n, targets.n, "padded length mismatch");
    let ln2 = std::f64::consts::LN_2;
    let mut total = 0.0;
    for j in 0..targets.rows {
        for pos in 0..targets.n {
            if pos > targets.lengths[j] {
                continue; // masked padding after the end marker
            }
            let t = targets.row(j)[pos];
            for (w, &p) in scores.row(j, pos).iter().enumerate() {
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if w == t {
                    total -= pc.ln() / ln2;
                } else {
                    total -= (1.0 - pc).ln() / ln2;
                }
            }
        }
    }
    total / targets.rows as f64
}

/// Unweighted sum of per-user cross-entropies.
pub fn loss_joint(per_user: &[f64]) -> f64 {
    per_user.iter().sum()
}

/// Weighted sum over the 1-based inclusive user range `xi..=rho`.
pub fn loss_fp(per_user: &[f64], xi: usize, rho: usize, tau: &[f64]) -> Result<f64> {
    if xi == 0 || xi > rho || rho > per_user.len() || tau.len() != per_user.len() {
        return Err(Error::EmptyLossRange);
    }
    Ok((xi..=rho).map(|i| tau[i - 1] * per_user[i - 1]).sum())
}

/// Loss mask: word positions up to and including the end marker.
fn target_mask(batch: &Batch) -> Vec<f64> {
    let mut mask = vec![0.0; batch.rows * batch.n];
    for j in 0..batch.rows {
        for pos in 0..batch.n {
            if pos <= batch.lengths[j] {
                mask[j * batch.n + pos] = 1.0;
            }
        }
    }
    mask
}

/// Pre-drawn inputs of one training step, so a step can be replayed exactly
/// (finite-difference checks perturb parameters and re-run the same step).
pub struct StepInputs<'a> {
    /// One batch per user, row-aligned for paired corpora.
    pub batches: Vec<&'a Batch>,
    /// Realized links for this frame.
    pub links: Vec<UserLink>,
    /// Interleaved complex noise of length `2M`.
    pub noise: Vec<f64>,
}

struct UserGraph {
    enc_bind: Binding,
    dec_bind: Binding,
    ifg_bind: Option<Binding>,
    ce: Var,
}

/// Values produced on the gradient-stopped re-encode path, keyed by user.
///
/// The training objective treats these as constants, so finite-difference
/// replays must pin them for the analytic/numeric comparison to be of the
/// same function.
#[derive(Debug, Clone, Default)]
pub(crate) struct DetachedValues {
    /// Masked re-encoded features per cancelled user.
    side: Vec<(usize, Vec<f64>)>,
    /// The cancellation vector `h * x_tilde` (interleaved), when nonzero.
    cancel: Vec<(usize, Option<Vec<f64>>)>,
    /// Receiver-known transmit normalization scales, one per user slot.
    scales: Vec<f64>,
}

pub(crate) struct StepGraph {
    tape: Tape,
    users: Vec<UserGraph>,
    pub ce_values: Vec<f64>,
    pub aggregate: Var,
    #[allow(dead_code)] // consumed by the finite-difference test harness
    pub detached: DetachedValues,
}

/// Builds the full differentiable step: encode every user, superpose, then
/// SIC-decode with soft losses.  `weights[i] = 0` keeps user `i+1` out of
/// the objective while still decoding (and cancelling) it.
pub(crate) fn build_step_graph(
    users: &[UserStacks],
    trainable: &[bool],
    inputs: &StepInputs<'_>,
    dims: &CodecDims,
    use_si: bool,
    weights: &[f64],
    dropout_rng: Option<&mut ChaCha8Rng>,
    replay: Option<&DetachedValues>,
) -> Result<StepGraph> {
    let k = users.len();
    assert_eq!(inputs.batches.len(), k);
    assert_eq!(inputs.links.len(), k);
    assert_eq!(weights.len(), k);

    let mut tape = Tape::new();
    let mut drop = match dropout_rng {
        Some(rng) if dims.dropout > 0.0 => Dropout {
            p: dims.dropout,
            rng: Some(rng),
        },
        _ => Dropout::inactive(),
    };

    // Encode all users.
    let mut enc_binds: Vec<Binding> = Vec::with_capacity(k);
    let mut frames: Vec<Var> = Vec::with_capacity(k);
    let mut scales: Vec<f64> = Vec::with_capacity(k);
    for (i, stacks) in users.iter().enumerate() {
        let mut bind = Binding::new(&stacks.enc.store, trainable[i]);
        let feat = stacks
            .enc
            .features_on_tape(&mut tape, &mut bind, inputs.batches[i], &mut drop);
        let (x, scale) = frame_on_tape(
            &mut tape,
            feat,
            inputs.batches[i],
            dims,
            inputs.links[i].power,
        )?;
        enc_binds.push(bind);
        frames.push(x);
        scales.push(scale);
    }
    // The receiver's denormalization scales are out-of-band constants; a
    // pinned replay must reuse the recorded ones.
    let scales: Vec<f64> = match replay {
        Some(rep) => rep.scales.clone(),
        None => scales,
    };

    // Superpose and add the pre-drawn noise.
    let two_m = 2 * dims.channel_uses();
    assert_eq!(inputs.noise.len(), two_m, "noise length");
    let scaled: Vec<Var> = frames
        .iter()
        .zip(&inputs.links)
        .map(|(&x, l)| tape.complex_scale(x, l.h.re, l.h.im))
        .collect();
    let superposed = tape.sum_list(&scaled);
    let mut residual = tape.add_const(superposed, &inputs.noise);

    // SIC decode in long-term power order.
    let order = order_users(&inputs.links);
    let mut graphs: Vec<Option<UserGraph>> = (0..k).map(|_| None).collect();
    let mut ce_values = vec![0.0; k];
    let mut side_cache: Vec<(usize, Var)> = Vec::new();
    let mut detached = DetachedValues {
        scales: scales.clone(),
        ..Default::default()
    };

    for (pos, &ui) in order.iter().enumerate() {
        let stacks = &users[ui];
        let link = &inputs.links[ui];
        let batch = inputs.batches[ui];
        if link.h.norm_sqr() == 0.0 {
            return Err(Error::ZeroGain(link.index));
        }

        let inv_h = Complex64::new(1.0, 0.0) / link.h;
        let xhat = tape.complex_scale(residual, inv_h.re, inv_h.im);
        let denorm = tape.scale(xhat, 1.0 / scales[ui]);
        let r_hat = tape.reshape(denorm, batch.rows * batch.n, dims.c);

        let mut ifg_bind = None;
        let fused = match (&stacks.ifg, use_si) {
            (Some(net), true) => {
                let mut bind = Binding::new(&net.store, trainable[ui]);
                let mut side_vars = Vec::with_capacity(net.side_users.len());
                for &su in &net.side_users {
                    let var = side_cache
                        .iter()
                        .find(|(u, _)| *u == su)
                        .map(|(_, v)| *v)
                        .ok_or(Error::MissingSideInfo(su))?;
                    side_vars.push(var);
                }
                let g = net.fuse_on_tape(&mut tape, &mut bind, r_hat, &side_vars, batch.rows, batch.n);
                ifg_bind = Some(bind);
                g
            }
            _ => r_hat,
        };

        let mut dec_bind = Binding::new(&stacks.dec.store, trainable[ui]);
        let (logits, u_hat) = stacks.dec.logits_on_tape(
            &mut tape,
            &mut dec_bind,
            fused,
            batch.rows,
            batch.n,
            &mut drop,
        );
        let mask = target_mask(batch);
        let ce = tape.softmax_bce2(logits, &batch.ids, &mask, batch.rows);
        ce_values[ui] = tape.value(ce)[0];

        // Re-encode (all constants) and cancel before the next user.
        if pos + 1 < order.len() {
            if let Some(rep) = replay {
                // Pinned replay: reuse the recorded constants so the loss is
                // the same function of the parameters that backward saw.
                let side = &rep.side.iter().find(|(u, _)| *u == link.index).unwrap().1;
                let svar = tape.constant(side.clone(), batch.rows * batch.n, dims.c);
                side_cache.push((link.index, svar));
                let cancel = &rep.cancel.iter().find(|(u, _)| *u == link.index).unwrap().1;
                if let Some(cv) = cancel {
                    let cvar = tape.constant(cv.clone(), 1, two_m);
                    residual = tape.sub(residual, cvar);
                }
            } else {
                let u_det = tape.detach(u_hat);
                let mut frozen = Binding::new(&stacks.enc.store, false);
                let r_tilde = stacks.enc.compress_on_tape(&mut tape, &mut frozen, u_det);

                // Decoded sentence lengths from the hard decision on the
                // soft scores (receiver knowledge only; detached path).
                let lengths = hard_lengths(&tape, logits, batch.rows, batch.n, dims.vocab);
                let mut mask = vec![0.0; batch.rows * batch.n];
                for (j, &len) in lengths.iter().enumerate() {
                    for p in 0..len {
                        mask[j * batch.n + p] = 1.0;
                    }
                }
                let masked = tape.mul_row_const(r_tilde, &mask);
                side_cache.push((link.index, masked));
                detached
                    .side
                    .push((link.index, tape.value(masked).to_vec()));

                let flat = tape.reshape(masked, 1, two_m);
                let target = ((dims.channel_uses() as f64) * link.power).sqrt();
                if let Some(x_tilde) = tape.normalize_to_power(flat, target) {
                    let cancel = tape.complex_scale(x_tilde, link.h.re, link.h.im);
                    detached
                        .cancel
                        .push((link.index, Some(tape.value(cancel).to_vec())));
                    residual = tape.sub(residual, cancel);
                } else {
                    detached.cancel.push((link.index, None));
                }
            }
        }

        graphs[ui] = Some(UserGraph {
            enc_bind: std::mem::replace(&mut enc_binds[ui], Binding::new(&stacks.enc.store, false)),
            dec_bind,
            ifg_bind,
            ce,
        });
    }

    let users_graphs: Vec<UserGraph> = graphs.into_iter().map(Option::unwrap).collect();
    let mut aggregate = tape.scale(users_graphs[0].ce, weights[0]);
    for (g, &w) in users_graphs.iter().zip(weights).skip(1) {
        aggregate = tape.add_scaled(aggregate, g.ce, w);
    }

    Ok(StepGraph {
        tape,
        users: users_graphs,
        ce_values,
        aggregate,
        detached,
    })
}

/// Argmax word counts before the first end marker, read straight from
/// logits data (no tape nodes).
fn hard_lengths(tape: &Tape, logits: Var, rows: usize, n: usize, vocab: usize) -> Vec<usize> {
    let data = tape.value(logits);
    (0..rows)
        .map(|j| {
            for pos in 0..n {
                let row = &data[(j * n + pos) * vocab..(j * n + pos + 1) * vocab];
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (w, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = w;
                    }
                }
                if best == END_ID {
                    return pos;
                }
            }
            n
        })
        .collect()
}

impl StepGraph {
    pub fn aggregate_value(&self) -> f64 {
        self.tape.value(self.aggregate)[0]
    }

    /// Backward pass plus gradient collection per user component.
    fn backprop(&mut self, users: &[UserStacks]) -> Vec<UserGrads> {
        self.tape.backward(self.aggregate);
        self.users
            .iter()
            .zip(users)
            .map(|(g, stacks)| UserGrads {
                enc: g.enc_bind.gradients(&self.tape, &stacks.enc.store),
                dec: g.dec_bind.gradients(&self.tape, &stacks.dec.store),
                ifg: g.ifg_bind.as_ref().map(|b| {
                    b.gradients(&self.tape, &stacks.ifg.as_ref().unwrap().store)
                }),
            })
            .collect()
    }
}

struct UserGrads {
    enc: Vec<Vec<f64>>,
    dec: Vec<Vec<f64>>,
    ifg: Option<Vec<Vec<f64>>>,
}

/// Adam state for one user's stacks.
struct UserOptimizers {
    enc: Adam,
    dec: Adam,
    ifg: Option<Adam>,
}

impl UserOptimizers {
    fn new(stacks: &UserStacks, cfg: OptimizerConfig) -> Self {
        Self {
            enc: Adam::new(&stacks.enc.store, cfg),
            dec: Adam::new(&stacks.dec.store, cfg),
            ifg: stacks.ifg.as_ref().map(|n| Adam::new(&n.store, cfg)),
        }
    }

    fn apply(&mut self, stacks: &mut UserStacks, grads: &UserGrads) {
        self.enc.step(&mut stacks.enc.store, &grads.enc);
        self.dec.step(&mut stacks.dec.store, &grads.dec);
        if let (Some(opt), Some(g), Some(net)) =
            (self.ifg.as_mut(), grads.ifg.as_ref(), stacks.ifg.as_mut())
        {
            opt.step(&mut net.store, g);
        }
    }
}

/// Shared driver for every stage: iterates epochs over seed-deterministic
/// batches, resamples channel noise (and fading) per step, backpropagates
/// the plan's objective, and updates the trainable users.
pub fn run_training(
    users: &mut [UserStacks],
    knowledge: &[&KnowledgeSet],
    channel: &ChannelConfig,
    dims: &CodecDims,
    plan: &TrainingPlan,
    opt: OptimizerConfig,
    use_si: bool,
    seed: u64,
) -> Result<Vec<LossReport>> {
    let k = users.len();
    assert_eq!(knowledge.len(), k, "one knowledge set per user");
    assert_eq!(plan.trainable.len(), k, "plan sized for the user count");
    assert_eq!(channel.links.len(), k, "one link per user");

    let weights = plan.loss_weights();
    let mut optimizers: Vec<Option<UserOptimizers>> = users
        .iter()
        .zip(&plan.trainable)
        .map(|(s, &t)| t.then(|| UserOptimizers::new(s, opt)))
        .collect();

    let mut noise_rng = derive_rng(seed, "noise");
    let mut fading_rng = derive_rng(seed, "fading");
    let mut dropout_rng = derive_rng(seed, "dropout");

    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 0..plan.epochs {
        // Same shuffle seed across users keeps paired corpora row-aligned.
        let epoch_seed = seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15);
        let per_user: Vec<Vec<Batch>> = knowledge
            .iter()
            .map(|ks| batch_source(ks, dims.l, dims.n, epoch_seed))
            .collect();
        let n_batches = per_user.iter().map(Vec::len).min().unwrap_or(0);

        for b in 0..n_batches {
            if per_user.iter().any(|bs| bs[b].rows != dims.l) {
                continue; // drop ragged final batches to keep M fixed
            }
            let started = Instant::now();
            let batches: Vec<&Batch> = per_user.iter().map(|bs| &bs[b]).collect();
            let links = channel.realize(&mut fading_rng);
            let noise = noise_interleaved(2 * dims.channel_uses(), channel.sigma2, &mut noise_rng);
            let inputs = StepInputs {
                batches,
                links,
                noise,
            };
            let mut graph = build_step_graph(
                users,
                &plan.trainable,
                &inputs,
                dims,
                use_si,
                &weights,
                Some(&mut dropout_rng),
                None,
            )?;
            let aggregate = graph.aggregate_value();
            if !aggregate.is_finite() {
                return Err(Error::Diverged(step));
            }
            let grads = graph.backprop(users);
            for ((stacks, opt_state), g) in users.iter_mut().zip(&mut optimizers).zip(&grads) {
                if let Some(o) = opt_state {
                    o.apply(stacks, g);
                }
            }
            reports.push(LossReport {
                step,
                epoch,
                per_user: graph.ce_values.clone(),
                aggregate,
                wall_secs: started.elapsed().as_secs_f64(),
            });
            step += 1;
        }
    }
    Ok(reports)
}

/// End-to-end gradient verification on a micro two-user system with side
/// information (dictionary under 50 words, `d = 16`, `c = 4`).
///
/// Backpropagates the joint loss once, then compares at least `min_params`
/// randomly selected parameter gradients (drawn across both users'
/// encoder, decoder, and fusion stores) against central finite differences
/// with step 1e-4 over the pinned-constant objective.  Parameters whose
/// analytic gradient is below 1e-6 are skipped: the finite difference
/// cannot resolve them above floating-point noise.
///
/// Returns `(parameter name, entry index, relative error)` triples.
pub fn gradient_check(min_params: usize, seed: u64) -> Vec<(String, usize, f64)> {
    // The 1e-5 fallback resolves parameters whose 1e-4 interval straddles a
    // ReLU kink (the difference quotient is then one-sided there).
    gradient_check_with_steps(min_params, seed, &[1e-4, 1e-5])
}

/// [`gradient_check`] with explicit central-difference steps; each
/// parameter reports its best (smallest) relative error over the steps.
pub fn gradient_check_with_steps(
    min_params: usize,
    seed: u64,
    steps: &[f64],
) -> Vec<(String, usize, f64)> {
    use rand::Rng;
    use rand::SeedableRng;

    let lines: Vec<String> = crate::corpus::synth::generate_groups(8, 1, 17)
        .into_iter()
        .flatten()
        .map(|s| s.split(' ').take(6).collect::<Vec<_>>().join(" "))
        .collect();
    let vocab = crate::corpus::Vocabulary::build(&lines, 1).unwrap();
    assert!(vocab.size() <= 50);
    let ks = KnowledgeSet::from_lines(0, &lines, &vocab).unwrap();
    let dims = CodecDims {
        vocab: vocab.size(),
        d: 16,
        m: 16,
        c: 4,
        n: 7,
        l: 4,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_ff: 32,
        dropout: 0.0,
    };
    let mut users = assemble_users(2, &dims, true, seed);
    let links = vec![
        UserLink::fixed(1, 2.0, Complex64::new(0.9, 0.1)),
        UserLink::fixed(2, 1.0, Complex64::new(0.7, -0.2)),
    ];
    let batch = batch_source(&ks, dims.l, dims.n, 1)[0].clone();
    let mut noise_rng = derive_rng(seed, "gradcheck-noise");
    let noise = noise_interleaved(2 * dims.channel_uses(), 0.02, &mut noise_rng);
    let weights = vec![1.0, 1.0];
    let trainable = vec![true, true];

    let inputs = StepInputs {
        batches: vec![&batch, &batch],
        links: links.clone(),
        noise: noise.clone(),
    };
    let mut graph =
        build_step_graph(&users, &trainable, &inputs, &dims, true, &weights, None, None).unwrap();
    let grads = graph.backprop(&users);
    let pinned = graph.detached.clone();

    // Candidate pool: (user, component, param index, entry, analytic grad).
    let mut pool: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for (u, g) in grads.iter().enumerate() {
        for (comp, comp_grads) in [&g.enc, &g.dec].into_iter().enumerate() {
            for (pi, pg) in comp_grads.iter().enumerate() {
                for (ei, &val) in pg.iter().enumerate() {
                    if val.abs() > 1e-6 {
                        pool.push((u, comp, pi, ei, val));
                    }
                }
            }
        }
        if let Some(ifg) = &g.ifg {
            for (pi, pg) in ifg.iter().enumerate() {
                for (ei, &val) in pg.iter().enumerate() {
                    if val.abs() > 1e-6 {
                        pool.push((u, 2, pi, ei, val));
                    }
                }
            }
        }
    }
    assert!(pool.len() >= min_params, "gradient pool too small");

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut picked = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    while picked.len() < min_params {
        let i = rng.gen_range(0..pool.len());
        if seen.insert(i) {
            picked.push(pool[i]);
        }
    }

    let loss_of = |users: &[UserStacks]| -> f64 {
        let inputs = StepInputs {
            batches: vec![&batch, &batch],
            links: links.clone(),
            noise: noise.clone(),
        };
        build_step_graph(
            users,
            &trainable,
            &inputs,
            &dims,
            true,
            &weights,
            None,
            Some(&pinned),
        )
        .unwrap()
        .aggregate_value()
    };

    fn entry_mut<'a>(
        users: &'a mut [UserStacks],
        u: usize,
        comp: usize,
        pi: usize,
        ei: usize,
    ) -> &'a mut f64 {
        let store = match comp {
            0 => &mut users[u].enc.store,
            1 => &mut users[u].dec.store,
            _ => &mut users[u].ifg.as_mut().unwrap().store,
        };
        &mut store.params[pi].data[ei]
    }

    let mut out = Vec::with_capacity(picked.len());
    for (u, comp, pi, ei, analytic) in picked {
        let name = {
            let store = match comp {
                0 => &users[u].enc.store,
                1 => &users[u].dec.store,
                _ => &users[u].ifg.as_ref().unwrap().store,
            };
            format!("user{}/{}", u + 1, store.params[pi].name)
        };
        let orig = *entry_mut(&mut users, u, comp, pi, ei);
        let mut best = f64::INFINITY;
        for &h in steps {
            *entry_mut(&mut users, u, comp, pi, ei) = orig + h;
            let up = loss_of(&users);
            *entry_mut(&mut users, u, comp, pi, ei) = orig - h;
            let down = loss_of(&users);
            *entry_mut(&mut users, u, comp, pi, ei) = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            best = best.min(rel);
        }
        out.push((name, ei, best));
    }
    out
}

/// Builds `k` fresh users; with side information enabled, user `i` listens
/// to all stronger users `1..i`.
///
/// All users draw their initialization from the same stream, so encoder and
/// decoder stacks start identical (and the fusion networks start over
/// nearly aligned feature spaces); the per-user corpora and channel
/// conditions drive them apart from the first training step.
pub fn assemble_users(k: usize, dims: &CodecDims, use_si: bool, seed: u64) -> Vec<UserStacks> {
    (1..=k)
        .map(|i| {
            let mut rng = derive_rng(seed, "stack-init");
            let side = if use_si && i > 1 {
                (1..i).collect()
            } else {
                Vec::new()
            };
            UserStacks::new(i, side, dims, &mut rng)
        })
        .collect()
}

/// End-to-end single-user training without inter-user interference.
pub fn pretrain_single_user(
    stacks: &mut UserStacks,
    knowledge: &KnowledgeSet,
    link: UserLink,
    sigma2: f64,
    dims: &CodecDims,
    opt: OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<LossReport>> {
    let channel = ChannelConfig {
        links: vec![link],
        sigma2,
        model: crate::channel::ChannelModel::Awgn,
    };
    let plan = TrainingPlan::pretrain_single(epochs);
    run_training(
        std::slice::from_mut(stacks),
        &[knowledge],
        &channel,
        dims,
        &plan,
        opt,
        false,
        seed,
    )
}

/// Initial joint training of the K-user system (the L_joint objective).
#[allow(clippy::too_many_arguments)]
pub fn train_initial_k(
    users: &mut [UserStacks],
    knowledge: &[&KnowledgeSet],
    channel: &ChannelConfig,
    dims: &CodecDims,
    opt: OptimizerConfig,
    epochs: usize,
    use_si: bool,
    seed: u64,
) -> Result<Vec<LossReport>> {
    let plan = TrainingPlan::joint(users.len(), epochs);
    run_training(users, knowledge, channel, dims, &plan, opt, use_si, seed)
}

/// Retraining mode after `n` new users join a `k`-user system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainMode {
    Full,
    Partial,
}

/// Retrains a combined system of `k` old + `n` new users.
///
/// Full mode trains everyone under the weighted loss over all users;
/// partial mode freezes the old users (their parameters stay bit-identical)
/// and optimizes only the new users' stacks under their own losses.
#[allow(clippy::too_many_arguments)]
pub fn retrain(
    mode: RetrainMode,
    users: &mut [UserStacks],
    k_old: usize,
    knowledge: &[&KnowledgeSet],
    channel: &ChannelConfig,
    dims: &CodecDims,
    opt: OptimizerConfig,
    epochs: usize,
    tau: Option<Vec<f64>>,
    use_si: bool,
    seed: u64,
) -> Result<Vec<LossReport>> {
    let total = users.len();
    assert!(k_old <= total);
    let n_new = total - k_old;
    let plan = match mode {
        RetrainMode::Full => {
            let tau = tau.unwrap_or_else(|| vec![1.0; total]);
            TrainingPlan::retrain_full(k_old, n_new, epochs, tau)
        }
        RetrainMode::Partial => TrainingPlan::retrain_partial(k_old, n_new, epochs),
    };
    run_training(users, knowledge, channel, dims, &plan, opt, use_si, seed)
}
