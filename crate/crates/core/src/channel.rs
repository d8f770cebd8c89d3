//! The K-user multiple access channel.
//!
//! Users are indexed so that received powers satisfy
//! `P_1 |h_1|^2 >= ... >= P_K |h_K|^2`; the received signal per channel use
//! is `y_m = sum_i h_i x_m^i + z_m` with `z_m ~ CN(0, sigma^2)`.  The noise
//! power is normalized to one and per-user transmit powers carry the SNR of
//! each experiment case.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::SymbolFrame;
use crate::{Error, Result};

/// One user's link to the base station.
#[derive(Debug, Clone, Copy)]
pub struct UserLink {
    /// 1-based user index (identity, not decode position).
    pub index: usize,
    /// Transmit power `P` in watts.
    pub power: f64,
    /// Current complex channel gain (the per-frame draw under fading).
    pub h: Complex64,
    /// Long-term `E[|h|^2]`; equals `|h|^2` for a static channel, 1 under
    /// Rayleigh fading.  Decode ordering uses this so the SIC order is
    /// stable across fading realizations.
    pub avg_gain_sq: f64,
}

impl UserLink {
    /// Static-gain link.
    pub fn fixed(index: usize, power: f64, h: Complex64) -> Self {
        Self {
            index,
            power,
            h,
            avg_gain_sq: h.norm_sqr(),
        }
    }

    /// Unit-gain link whose power realizes `snr_db` against `sigma2`.
    pub fn clean(index: usize, snr_db: f64, sigma2: f64) -> Self {
        Self::fixed(
            index,
            sigma2 * 10f64.powf(snr_db / 10.0),
            Complex64::new(1.0, 0.0),
        )
    }

    /// Average receive SNR in dB for noise power `sigma2`.
    pub fn snr_db(&self, sigma2: f64) -> f64 {
        10.0 * (self.power * self.avg_gain_sq / sigma2).log10()
    }
}

/// Fading model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelModel {
    Awgn,
    Rayleigh,
}

/// A configured experiment channel: links plus noise power and model.
#[derive(Debug, Clone)]
pub struct ChannelConfig {
    pub links: Vec<UserLink>,
    pub sigma2: f64,
    pub model: ChannelModel,
}

/// Per-user SNR rows (dB) for the experiments adding one user to a 2-user
/// system.
pub const CASES_TWO_PLUS_ONE: [[f64; 3]; 7] = [
    [-3.29, -5.95, -9.0],
    [-0.29, -2.95, -6.0],
    [2.71, 0.05, -3.0],
    [5.71, 3.05, 0.0],
    [8.71, 6.05, 3.0],
    [11.71, 9.05, 6.0],
    [14.71, 12.05, 9.0],
];

/// Per-user SNR rows (dB) for the experiments adding two users to a 3-user
/// system.
pub const CASES_THREE_PLUS_TWO: [[f64; 5]; 7] = [
    [-3.29, -5.95, -6.27, -7.49, -9.0],
    [-0.29, -2.95, -3.27, -4.49, -6.0],
    [2.71, 0.05, -0.27, -1.49, -3.0],
    [5.71, 3.05, 2.73, 1.51, 0.0],
    [8.71, 6.05, 5.73, 4.51, 3.0],
    [11.71, 9.05, 8.73, 7.51, 6.0],
    [14.71, 12.05, 11.73, 10.51, 9.0],
];

/// Experiment scenario selecting one of the SNR tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    TwoPlusOne,
    ThreePlusTwo,
}

impl Scenario {
    pub fn users(&self) -> usize {
        match self {
            Scenario::TwoPlusOne => 3,
            Scenario::ThreePlusTwo => 5,
        }
    }

    pub fn snrs_db(&self, case_index: usize) -> Result<Vec<f64>> {
        if !(1..=7).contains(&case_index) {
            return Err(Error::InvalidCase(case_index));
        }
        Ok(match self {
            Scenario::TwoPlusOne => CASES_TWO_PLUS_ONE[case_index - 1].to_vec(),
            Scenario::ThreePlusTwo => CASES_THREE_PLUS_TWO[case_index - 1].to_vec(),
        })
    }
}

/// Builds links for one table row with `sigma^2 = 1`.
///
/// Powers are set so each user's (average) receive SNR matches the row:
/// `P_i |h_i|^2 = 10^(SNR_dB/10)`.  Under AWGN the gains are deterministic
/// (h = 1); under Rayleigh `h ~ CN(0, 1)` is redrawn per frame by
/// [`ChannelConfig::realize`] while powers keep the average on the row.
pub fn configure_case(
    scenario: Scenario,
    case_index: usize,
    model: ChannelModel,
) -> Result<ChannelConfig> {
    let snrs = scenario.snrs_db(case_index)?;
    let sigma2 = 1.0;
    let links: Vec<UserLink> = snrs
        .iter()
        .enumerate()
        .map(|(i, &snr)| UserLink {
            index: i + 1,
            power: sigma2 * 10f64.powf(snr / 10.0),
            h: Complex64::new(1.0, 0.0),
            avg_gain_sq: 1.0,
        })
        .collect();
    // All table rows are descending; assert the SIC ordering assumption.
    for w in links.windows(2) {
        debug_assert!(w[0].power * w[0].avg_gain_sq >= w[1].power * w[1].avg_gain_sq);
    }
    Ok(ChannelConfig {
        links,
        sigma2,
        model,
    })
}

impl ChannelConfig {
    /// Draws this frame's channel gains: identity for AWGN, fresh
    /// `CN(0, 1)` values under Rayleigh block fading (one draw per frame).
    pub fn realize(&self, rng: &mut ChaCha8Rng) -> Vec<UserLink> {
        match self.model {
            ChannelModel::Awgn => self.links.clone(),
            ChannelModel::Rayleigh => {
                let normal = Normal::new(0.0, (0.5f64).sqrt()).unwrap();
                self.links
                    .iter()
                    .map(|l| UserLink {
                        h: Complex64::new(normal.sample(rng), normal.sample(rng)),
                        ..*l
                    })
                    .collect()
            }
        }
    }
}

/// Decode order: indices into `links` sorted by descending `P * E[|h|^2]`,
/// ties keeping the lower original position first.
pub fn order_users(links: &[UserLink]) -> Vec<usize> {
    assert!(!links.is_empty(), "no users to order");
    let mut order: Vec<usize> = (0..links.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = links[a].power * links[a].avg_gain_sq;
        let pb = links[b].power * links[b].avg_gain_sq;
        pb.partial_cmp(&pa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// The superposed received frame at the base station.
#[derive(Debug, Clone)]
pub struct ReceivedFrame {
    pub y: Vec<Complex64>,
}

/// Superposes the users' frames and adds circularly symmetric Gaussian noise
/// of total power `sigma2` (variance `sigma2/2` per component).
pub fn transmit_mac(
    frames: &[&SymbolFrame],
    links: &[UserLink],
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ReceivedFrame> {
    assert_eq!(frames.len(), links.len(), "one link per frame");
    let m = frames.first().map(|f| f.symbols.len()).unwrap_or(0);
    if frames.iter().any(|f| f.symbols.len() != m) {
        return Err(Error::MismatchedFrames);
    }
    let mut y = vec![Complex64::new(0.0, 0.0); m];
    for (frame, link) in frames.iter().zip(links) {
        for (acc, &x) in y.iter_mut().zip(&frame.symbols) {
            *acc += link.h * x;
        }
    }
    if sigma2 > 0.0 {
        let normal = Normal::new(0.0, (sigma2 / 2.0).sqrt()).unwrap();
        for v in &mut y {
            *v += Complex64::new(normal.sample(rng), normal.sample(rng));
        }
    }
    Ok(ReceivedFrame { y })
}

/// Samples complex Gaussian noise of total power `sigma2` as interleaved
/// (re, im) values; the training path adds this as a constant tensor.
pub fn noise_interleaved(len_2m: usize, sigma2: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma2 == 0.0 {
        return vec![0.0; len_2m];
    }
    let normal = Normal::new(0.0, (sigma2 / 2.0).sqrt()).unwrap();
    (0..len_2m).map(|_| normal.sample(rng)).collect()
}

/// Uniform random draw helper kept here so channel-facing code shares one
/// generator type.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a role tag, so every
/// consumer (init, batching, noise, fading) gets its own deterministic rng.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seeded_rng(seed ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(symbols: Vec<Complex64>) -> SymbolFrame {
        SymbolFrame {
            user_index: 1,
            symbols,
            power: 1.0,
            norm_scale: 1.0,
        }
    }

    #[test]
    fn order_by_received_power() {
        let links = vec![
            UserLink::fixed(1, 1.0, Complex64::new(0.5, 0.0)),
            UserLink::fixed(2, 1.0, Complex64::new(2.0, 0.0)),
            UserLink::fixed(3, 1.0, Complex64::new(1.0, 0.0)),
        ];
        // Received powers 0.25, 4, 1 -> decode order users 2, 3, 1.
        let order = order_users(&links);
        assert_eq!(
            order.iter().map(|&i| links[i].index).collect::<Vec<_>>(),
            vec![2, 3, 1]
        );
    }

    #[test]
    fn order_single_and_ties() {
        let single = vec![UserLink::fixed(1, 1.0, Complex64::new(1.0, 0.0))];
        assert_eq!(order_users(&single), vec![0]);
        let equal = vec![
            UserLink::fixed(1, 2.0, Complex64::new(1.0, 0.0)),
            UserLink::fixed(2, 2.0, Complex64::new(1.0, 0.0)),
        ];
        assert_eq!(order_users(&equal), vec![0, 1]);
    }

    #[test]
    fn noiseless_single_user_identity() {
        let x = vec![Complex64::new(1.0, -2.0), Complex64::new(0.5, 0.25)];
        let f = frame(x.clone());
        let links = vec![UserLink::fixed(1, 1.0, Complex64::new(1.0, 0.0))];
        let mut rng = seeded_rng(0);
        let rx = transmit_mac(&[&f], &links, 0.0, &mut rng).unwrap();
        assert_eq!(rx.y, x);
    }

    #[test]
    fn noiseless_superposition() {
        let f1 = frame(vec![Complex64::new(1.0, 0.0)]);
        let f2 = frame(vec![Complex64::new(0.0, 1.0)]);
        let links = vec![
            UserLink::fixed(1, 1.0, Complex64::new(2.0, 0.0)),
            UserLink::fixed(2, 1.0, Complex64::new(0.0, 3.0)),
        ];
        let mut rng = seeded_rng(0);
        let rx = transmit_mac(&[&f1, &f2], &links, 0.0, &mut rng).unwrap();
        // y = 2*(1+0j) + 3j*(0+1j) = 2 - 3.
        assert!((rx.y[0] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn transmit_is_linear_with_shared_noise_seed() {
        let x = vec![Complex64::new(0.7, -0.3); 64];
        let f = frame(x.clone());
        let zero = frame(vec![Complex64::new(0.0, 0.0); 64]);
        let links = vec![UserLink::fixed(1, 1.0, Complex64::new(0.8, 0.6))];
        let mut r1 = seeded_rng(5);
        let mut r2 = seeded_rng(5);
        let with_sig = transmit_mac(&[&f], &links, 0.3, &mut r1).unwrap();
        let noise_only = transmit_mac(&[&zero], &links, 0.3, &mut r2).unwrap();
        for i in 0..64 {
            let diff = with_sig.y[i] - noise_only.y[i];
            assert!((diff - links[0].h * x[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn empirical_noise_power_within_one_percent() {
        let m = 1_000_000;
        let zero = frame(vec![Complex64::new(0.0, 0.0); m]);
        let links = vec![UserLink::fixed(1, 1.0, Complex64::new(1.0, 0.0))];
        let sigma2 = 0.8;
        let mut rng = seeded_rng(42);
        let rx = transmit_mac(&[&zero], &links, sigma2, &mut rng).unwrap();
        let measured = rx.y.iter().map(|v| v.norm_sqr()).sum::<f64>() / m as f64;
        assert!(
            (measured - sigma2).abs() / sigma2 < 0.01,
            "measured {measured}"
        );
    }

    #[test]
    fn mismatched_lengths_error() {
        let f1 = frame(vec![Complex64::new(1.0, 0.0); 4]);
        let f2 = frame(vec![Complex64::new(1.0, 0.0); 5]);
        let links = vec![
            UserLink::fixed(1, 1.0, Complex64::new(1.0, 0.0)),
            UserLink::fixed(2, 1.0, Complex64::new(1.0, 0.0)),
        ];
        let mut rng = seeded_rng(0);
        assert!(matches!(
            transmit_mac(&[&f1, &f2], &links, 0.0, &mut rng),
            Err(Error::MismatchedFrames)
        ));
    }

    #[test]
    fn case_tables_match_rows() {
        let cfg = configure_case(Scenario::TwoPlusOne, 4, ChannelModel::Awgn).unwrap();
        let snrs: Vec<f64> = cfg.links.iter().map(|l| l.snr_db(cfg.sigma2)).collect();
        for (got, want) in snrs.iter().zip([5.71, 3.05, 0.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        // 0 dB user: P |h|^2 equals sigma^2 exactly.
        let u3 = cfg.links[2];
        assert!((u3.power * u3.avg_gain_sq - cfg.sigma2).abs() < 1e-12);

        let cfg5 = configure_case(Scenario::ThreePlusTwo, 1, ChannelModel::Awgn).unwrap();
        let snrs5: Vec<f64> = cfg5.links.iter().map(|l| l.snr_db(cfg5.sigma2)).collect();
        for (got, want) in snrs5.iter().zip([-3.29, -5.95, -6.27, -7.49, -9.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_case_rejected() {
        assert!(matches!(
            configure_case(Scenario::TwoPlusOne, 0, ChannelModel::Awgn),
            Err(Error::InvalidCase(0))
        ));
        assert!(matches!(
            configure_case(Scenario::TwoPlusOne, 8, ChannelModel::Awgn),
            Err(Error::InvalidCase(8))
        ));
    }

    #[test]
    fn configured_cases_preserve_decode_order() {
        for scenario in [Scenario::TwoPlusOne, Scenario::ThreePlusTwo] {
            for case in 1..=7 {
                let cfg = configure_case(scenario, case, ChannelModel::Awgn).unwrap();
                let order = order_users(&cfg.links);
                let expect: Vec<usize> = (0..cfg.links.len()).collect();
                assert_eq!(order, expect, "{scenario:?} case {case}");
            }
        }
    }

    #[test]
    fn rayleigh_realization_keeps_average_power() {
        let cfg = configure_case(Scenario::TwoPlusOne, 4, ChannelModel::Rayleigh).unwrap();
        let mut rng = seeded_rng(9);
        let mut acc = 0.0;
        let draws = 20_000;
        for _ in 0..draws {
            let links = cfg.realize(&mut rng);
            acc += links[0].h.norm_sqr();
        }
        let mean = acc / draws as f64;
        assert!((mean - 1.0).abs() < 0.05, "E|h|^2 = {mean}");
        // Frames redraw: two realizations differ.
        let a = cfg.realize(&mut rng);
        let b = cfg.realize(&mut rng);
        assert!((a[0].h - b[0].h).norm() > 0.0);
    }
}
