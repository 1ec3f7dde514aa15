mod common;

use common::{analytics, impaired_link, random_filter, random_link};
use fdgfdm_core::analytics::{
    mapped_filter, quadratic, AnalyticsConfig, ClosedForm, ExclusionSet, QuadraticFormSet,
};
use fdgfdm_core::link::{monte_carlo_powers, CancellationMode, Quantity};
use fdgfdm_core::waveform::{mf_receiver, GfdmGrid, PrototypeFilter, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn closed_form_matches_monte_carlo_grid_means() {
    let link = impaired_link(4, 3);
    let cf = ClosedForm::new(&analytics(&link, ExclusionSet::SelfOnly)).unwrap();
    let b = cf.breakdown().unwrap();
    let mc = monte_carlo_powers(&link, 4000, 11).unwrap();
    let pairs: [(Quantity, f64); 8] = [
        (Quantity::SiAlc, b.mean(|s| s.si_alc)),
        (Quantity::SiDlc, b.mean(|s| s.si_dlc)),
        (Quantity::SiImAlc, b.mean(|s| s.si_im_alc)),
        (Quantity::SiImDlc, b.mean(|s| s.si_im_dlc)),
        (Quantity::SiTotalCDlc, b.mean_residual_si(CancellationMode::CDlc)),
        (Quantity::Desired, b.mean(|s| s.desired)),
        (Quantity::Rs, b.mean(|s| s.rs)),
        (Quantity::Interference, b.mean(|s| s.interference)),
    ];
    for (q, analytic) in pairs {
        let (mean, se) = (mc.grid_mean(q), mc.grid_std_error(q));
        assert!(
            (mean - analytic).abs() <= 4.0 * se,
            "{q:?}: analytic {analytic:.6e}, simulated {mean:.6e} +- {se:.2e}"
        );
    }
}

#[test]
fn closed_form_matches_monte_carlo_per_symbol() {
    let link = impaired_link(4, 3);
    let cf = ClosedForm::new(&analytics(&link, ExclusionSet::SelfOnly)).unwrap();
    let mc = monte_carlo_powers(&link, 4000, 5).unwrap();
    for (k, m) in [(0, 0), (3, 2), (1, 1)] {
        let s = cf.symbol(k, m).unwrap();
        for (q, analytic) in [
            (Quantity::SiDlc, s.si_dlc),
            (Quantity::SiImAlc, s.si_im_alc),
            (Quantity::Desired, s.desired),
            (Quantity::RsIm, s.rs_im),
        ] {
            let (mean, se) = (mc.mean(q, k, m), mc.std_error(q, k, m));
            assert!(
                (mean - analytic).abs() <= 4.5 * se,
                "({k},{m}) {q:?}: analytic {analytic:.6e}, simulated {mean:.6e} +- {se:.2e}"
            );
        }
    }
}

fn assert_routes_agree(cfg: &AnalyticsConfig, f: &[C64]) {
    let mut cf = ClosedForm::new(cfg).unwrap();
    cf.set_filter(f).unwrap();
    let qf = QuadraticFormSet::build(cfg).unwrap();
    for (k, m) in cfg.grid.positions() {
        let fm = mapped_filter(f, &cfg.grid, k, m);
        let desired = quadratic(&qf.u_mapped(k, m), &fm).re;
        let rs_total = quadratic(&qf.v_r, &fm).re;
        let s = cf.symbol(k, m).unwrap();
        assert!(rel_close(desired, s.desired, 1e-9), "desired {desired} vs {}", s.desired);
        assert!(rel_close(rs_total, s.rs + s.rs_im, 1e-9));
        for mode in CancellationMode::ALL {
            let v = quadratic(&qf.v_si(k, m, mode), &fm).re;
            assert!(
                rel_close(v, s.si_total(mode), 1e-9),
                "({k},{m}) {mode:?}: matrix {v:.12e} scalar {:.12e}",
                s.si_total(mode)
            );
        }
    }
}

#[test]
fn scalar_and_matrix_routes_agree_for_random_filters() {
    for seed in 0..6 {
        let link = random_link(seed, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let f = random_filter(link.grid.n(), &mut rng);
        assert_routes_agree(&analytics(&link, ExclusionSet::SelfOnly), &f);
        assert_routes_agree(&analytics(&link, ExclusionSet::RowAndColumn), &f);
    }
}

#[test]
fn row_and_column_exclusion_removes_more() {
    let link = impaired_link(4, 3);
    let narrow = ClosedForm::new(&analytics(&link, ExclusionSet::SelfOnly)).unwrap();
    let wide = ClosedForm::new(&analytics(&link, ExclusionSet::RowAndColumn)).unwrap();
    for (k, m) in link.grid.positions() {
        assert_eq!(
            narrow.sigma_si_alc(k, m).unwrap(),
            wide.sigma_si_alc(k, m).unwrap()
        );
    }
    let a = narrow.breakdown().unwrap().mean(|s| s.si_dlc);
    let b = wide.breakdown().unwrap().mean(|s| s.si_dlc);
    assert!(b < a);
}

#[test]
fn image_terms_vanish_without_iq_imbalance() {
    let mut link = impaired_link(4, 3);
    link.impairments.tx_mixer = fdgfdm_core::impairments::IqMixerCoeffs::ideal();
    link.impairments.rx_mixer = fdgfdm_core::impairments::IqMixerCoeffs::ideal();
    let cf = ClosedForm::new(&analytics(&link, ExclusionSet::SelfOnly)).unwrap();
    for (k, m) in link.grid.positions() {
        let s = cf.symbol(k, m).unwrap();
        assert_eq!(s.si_im_alc, 0.0);
        assert_eq!(s.rs_im, 0.0);
        assert_eq!(s.si_total(CancellationMode::Dlc), s.si_total(CancellationMode::CDlc));
    }
}

#[test]
fn alc_residual_does_not_depend_on_subcarrier() {
    let link = impaired_link(8, 3);
    let cf = ClosedForm::new(&analytics(&link, ExclusionSet::SelfOnly)).unwrap();
    for m in 0..3 {
        let first = cf.sigma_si_alc(0, m).unwrap();
        for k in 1..8 {
            assert!(rel_close(cf.sigma_si_alc(k, m).unwrap(), first, 1e-10));
        }
    }
}

#[test]
fn ofdm_mf_without_impairments_gives_unit_desired_power() {
    let grid = GfdmGrid::new(16, 1, 0).unwrap();
    let g = PrototypeFilter::rectangular(&grid).unwrap();
    let mut link = impaired_link(4, 3);
    link.grid = grid;
    link.f_rx = mf_receiver(&g);
    link.g_tx = g;
    link.impairments = fdgfdm_core::link::ImpairmentConfig::ideal(common::TS);
    link.pdp_s = fdgfdm_core::impairments::ChannelPdp::from_db(&[0.0]).unwrap();
    let cf = ClosedForm::new(&analytics(&link, ExclusionSet::SelfOnly)).unwrap();
    for k in 0..16 {
        let s = cf.symbol(k, 0).unwrap();
        assert!(rel_close(s.desired, 1.0, 1e-12));
        assert!(s.interference.abs() < 1e-12);
    }
}

#[test]
fn rejects_mismatched_filter_length() {
    let link = impaired_link(4, 3);
    let mut cfg = analytics(&link, ExclusionSet::SelfOnly);
    cfg.f.pop();
    assert!(ClosedForm::new(&cfg).is_err());
    assert!(QuadraticFormSet::build(&cfg).is_err());
}
