#![allow(dead_code)]

use fdgfdm_core::analytics::{AnalyticsConfig, ExclusionSet};
use fdgfdm_core::impairments::{coeffs_from_irr, CfoParam, ChannelPdp, PdpTap};
use fdgfdm_core::link::{CancellationMode, ImpairmentConfig, LinkConfig};
use fdgfdm_core::waveform::{zf_receiver, GfdmGrid, PrototypeFilter, ReceiverFilter, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TS: f64 = 1.0 / 15.36e6;

/// Small strongly impaired link: every SI and desired path is active.
pub fn impaired_link(k: usize, m: usize) -> LinkConfig {
    let grid = GfdmGrid::new(k, m, 3).unwrap();
    let g = PrototypeFilter::rrc(&grid, 0.3).unwrap();
    let f = zf_receiver(&g, &grid).unwrap();
    LinkConfig {
        grid,
        g_tx: g,
        f_rx: f,
        impairments: ImpairmentConfig {
            beta_hz: 3e4,
            ts_s: TS,
            cfo: CfoParam(0.23),
            tx_mixer: coeffs_from_irr(-6.0, 0.5),
            rx_mixer: coeffs_from_irr(-4.0, -0.9),
            noise_power: 0.0,
        },
        pdp_rsi: ChannelPdp::new(vec![
            PdpTap { delay: 0, power_db: 0.0 },
            PdpTap { delay: 1, power_db: -4.0 },
            PdpTap { delay: 3, power_db: -9.0 },
        ])
        .unwrap(),
        pdp_s: ChannelPdp::from_db(&[-2.0, -7.0]).unwrap(),
        p_d: 1.0,
        cancellation: CancellationMode::CDlc,
    }
}

pub fn random_filter(n: usize, rng: &mut impl Rng) -> Vec<C64> {
    (0..n)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

/// Random configuration with `L <= 3` and a random receiver filter.
pub fn random_link(seed: u64, k: usize, m: usize) -> LinkConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GfdmGrid::new(k, m, 2).unwrap();
    let g = PrototypeFilter::rrc(&grid, rng.random_range(0.05..0.9)).unwrap();
    let f = ReceiverFilter::new(
        random_filter(grid.n(), &mut rng),
        fdgfdm_core::waveform::FilterOrigin::Custom,
    )
    .unwrap();
    let span_si = rng.random_range(1..=3);
    let span_s = rng.random_range(1..=3);
    let pdp = |span: usize, rng: &mut ChaCha8Rng| {
        let powers: Vec<f64> = (0..span).map(|_| rng.random_range(-12.0..0.0)).collect();
        ChannelPdp::from_db(&powers).unwrap()
    };
    let pdp_rsi = pdp(span_si, &mut rng);
    let pdp_s = pdp(span_s, &mut rng);
    LinkConfig {
        grid,
        g_tx: g,
        f_rx: f,
        impairments: ImpairmentConfig {
            beta_hz: 10f64.powf(rng.random_range(2.0..5.0)),
            ts_s: TS,
            cfo: CfoParam(rng.random_range(-0.5..0.5)),
            tx_mixer: coeffs_from_irr(rng.random_range(-25.0..-3.0), rng.random_range(-3.0..3.0)),
            rx_mixer: coeffs_from_irr(rng.random_range(-25.0..-3.0), rng.random_range(-3.0..3.0)),
            noise_power: 0.0,
        },
        pdp_rsi,
        pdp_s,
        p_d: rng.random_range(0.5..4.0),
        cancellation: CancellationMode::CDlc,
    }
}

pub fn analytics(link: &LinkConfig, exclusion: ExclusionSet) -> AnalyticsConfig {
    let mut cfg = AnalyticsConfig::from_link(link);
    cfg.exclusion = exclusion;
    cfg
}
