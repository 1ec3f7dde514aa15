mod common;

use common::{impaired_link, random_link};
use fdgfdm_core::impairments::{
    coeffs_from_irr, gen_phase_noise, phase_correlation, phase_increment_variance, ChannelPdp,
};
use fdgfdm_core::link::{
    apply_cancellation, composite_received, decompose, dlc_grid, draw_realization, simulate_frame,
    trial_rng, CancellationMode,
};
use fdgfdm_core::waveform::{demodulate_all, C64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Empirical `E[exp(j(φ[n+lag] - φ[n]))]` over independent trajectories.
fn empirical_correlation(beta: f64, lags: usize, paths: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![C64::new(0.0, 0.0); lags + 1];
    for _ in 0..paths {
        let p = gen_phase_noise(lags + 1, beta, common::TS, &mut rng).unwrap();
        let t = p.trajectory();
        for (lag, slot) in acc.iter_mut().enumerate() {
            *slot += C64::from_polar(1.0, t[lag] - t[0]);
        }
    }
    acc.iter().map(|v| v / paths as f64).collect()
}

#[test]
fn phase_correlation_follows_exponential_law() {
    for beta in [10.0, 1000.0] {
        let emp = empirical_correlation(beta, 50, 20_000, 11);
        for (lag, e) in emp.iter().enumerate() {
            let model = phase_correlation(beta, common::TS, lag);
            assert!(e.im.abs() < 0.02, "beta {beta} lag {lag}: {e}");
            assert!((e.re - model).abs() < 0.02 * model, "beta {beta} lag {lag}: {e} vs {model}");
        }
    }
}

#[test]
fn fast_decay_within_sampling_error() {
    let paths = 20_000;
    let emp = empirical_correlation(1e5, 50, paths, 12);
    for (lag, e) in emp.iter().enumerate() {
        let model = phase_correlation(1e5, common::TS, lag);
        // Variance of cos of a Gaussian phase with correlation `model`.
        let se = ((1.0 + model.powi(4)) / 2.0 - model * model).max(0.0).sqrt() / (paths as f64).sqrt();
        assert!((e.re - model).abs() <= 4.0 * se + 1e-12, "lag {lag}: {e} vs {model}");
    }
}

#[test]
fn increment_variance_reference_value() {
    assert!((phase_increment_variance(100.0, common::TS) - 8.18e-5).abs() < 5e-8);
}

#[test]
fn image_gain_reference_value() {
    assert!((coeffs_from_irr(-37.5, 0.0).g_i.norm() - 0.01333).abs() < 1e-5);
}

#[test]
fn pdp_rejects_invalid_profiles() {
    assert!(ChannelPdp::from_db(&[]).is_err());
    assert!(ChannelPdp::from_db(&[f64::NAN]).is_err());
    let pdp = ChannelPdp::from_db(&[0.0, -10.0, -20.0]).unwrap();
    assert_eq!(pdp.span(), 3);
    assert!((pdp.total_power() - 1.11).abs() < 1e-12);
}

#[test]
fn dlc_removes_own_replica_of_impaired_link() {
    let cfg = impaired_link(4, 3);
    let mut rng = trial_rng(21, 4);
    let real = draw_realization(&cfg, &mut rng).unwrap();
    let symbols = decompose(&cfg, &real).unwrap();
    let dlc = dlc_grid(&cfg, &real).unwrap();
    let alc = apply_cancellation(&symbols, &dlc, CancellationMode::AlcOnly);
    let cdlc = apply_cancellation(&symbols, &dlc, CancellationMode::CDlc);
    for ((a, c), (s, t)) in alc.iter().zip(&cdlc).zip(symbols.iter().zip(&dlc)) {
        assert!((a - c - t.r_dlc - t.r_dlc_i).norm() < 1e-12);
        assert!((s.total() - a).norm() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn irr_round_trip(irr in -80.0f64..20.0, phase in -3.2f64..3.2) {
        let c = coeffs_from_irr(irr, phase);
        prop_assert!((c.irr_db() - irr).abs() < 1e-9);
        prop_assert_eq!(c.g_d, C64::new(1.0, 0.0));
        prop_assert!((c.g_i.arg() - phase).abs() < 1e-12 || (c.g_i.arg() - phase).abs() > 6.2);
    }

    #[test]
    fn components_sum_to_composite(link_seed in 0u64..1000, trial in any::<u64>(), shape in 0usize..3) {
        let (k, m) = [(2, 3), (4, 1), (4, 3)][shape];
        let cfg = random_link(link_seed, k, m);
        let mut rng = trial_rng(link_seed, trial);
        let frame = simulate_frame(&cfg, &mut rng).unwrap();
        let y = composite_received(&cfg, &frame.realization).unwrap();
        let direct = demodulate_all(&y, &cfg.f_rx, &cfg.grid).unwrap();
        let scale = direct.iter().map(|v| v.norm()).fold(1.0, f64::max);
        for (s, d) in frame.symbols.iter().zip(&direct) {
            prop_assert!((s.total() - d).norm() < 1e-9 * scale);
        }
    }

    #[test]
    fn trials_are_reproducible(seed in any::<u64>(), trial in any::<u64>()) {
        let cfg = impaired_link(4, 3);
        let a = simulate_frame(&cfg, &mut trial_rng(seed, trial)).unwrap();
        let b = simulate_frame(&cfg, &mut trial_rng(seed, trial)).unwrap();
        prop_assert_eq!(a.symbols, b.symbols);
    }
}
