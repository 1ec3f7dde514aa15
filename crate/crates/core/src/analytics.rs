//! Closed-form residual-SI, desired-signal and interference variances, and
//! the SIR built from them.
//!
//! Two independent evaluation routes are provided:
//!
//! * [`ClosedForm`] evaluates the per-symbol double sums over `(n1, n2)`
//!   directly, with the `(l, k, m)` inner sums tabulated once per
//!   configuration.
//! * [`QuadraticFormSet`] assembles the `N x N` matrices `U`, `V^SI`, `V^R`
//!   whose quadratic forms in the mapped receiver filter
//!   `f_{k',m'} = S_{k'} M_{m'} f` reproduce the same variances.
//!
//! All variances are expectations over data, channels and phase noise for
//! a fixed receiver filter.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impairments::phase_correlation;
use crate::link::{CancellationMode, LinkConfig};
use crate::waveform::{modulation_matrix, GfdmGrid, PrototypeFilter, C64};

/// Which `(k, m)` replicas the digital canceller is taken to remove.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionSet {
    /// Only the symbol's own replica `(k', m')`.
    #[default]
    SelfOnly,
    /// Every replica sharing the subcarrier `k'` or the subsymbol `m'`.
    RowAndColumn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticsConfig {
    pub grid: GfdmGrid,
    pub g: Vec<C64>,
    pub f: Vec<C64>,
    pub beta_hz: f64,
    pub ts_s: f64,
    pub epsilon: f64,
    /// `|g_Tx,d|²`
    pub tx_d2: f64,
    /// `|g_Tx,I|²`
    pub tx_i2: f64,
    /// `|g_Rx,d|²`
    pub rx_d2: f64,
    /// `|g_Rx,I|²`
    pub rx_i2: f64,
    /// Linear residual-SI tap variances, delays `0..L`.
    pub pdp_rsi: Vec<f64>,
    /// Linear desired-channel tap variances, delays `0..L`.
    pub pdp_s: Vec<f64>,
    pub p_d: f64,
    pub exclusion: ExclusionSet,
}

impl AnalyticsConfig {
    pub fn from_link(cfg: &LinkConfig) -> Self {
        let imp = &cfg.impairments;
        Self {
            grid: cfg.grid,
            g: cfg.g_tx.taps().to_vec(),
            f: cfg.f_rx.taps().to_vec(),
            beta_hz: imp.beta_hz,
            ts_s: imp.ts_s,
            epsilon: imp.cfo.0,
            tx_d2: imp.tx_mixer.g_d.norm_sqr(),
            tx_i2: imp.tx_mixer.g_i.norm_sqr(),
            rx_d2: imp.rx_mixer.g_d.norm_sqr(),
            rx_i2: imp.rx_mixer.g_i.norm_sqr(),
            pdp_rsi: cfg.pdp_rsi.linear_powers(),
            pdp_s: cfg.pdp_s.linear_powers(),
            p_d: cfg.p_d,
            exclusion: ExclusionSet::SelfOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n();
        if self.g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.g.len(),
            });
        }
        if self.f.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.f.len(),
            });
        }
        let powers = [self.tx_d2, self.tx_i2, self.rx_d2, self.rx_i2, self.p_d];
        if powers.iter().chain(&self.pdp_rsi).chain(&self.pdp_s).any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidParameter("all powers must be non-negative".into()));
        }
        if self.pdp_rsi.len() > n || self.pdp_s.len() > n {
            return Err(Error::InvalidParameter("channel span exceeds frame length".into()));
        }
        if !(self.beta_hz >= 0.0) || !(self.ts_s > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(
                "need beta >= 0, ts > 0 and finite epsilon".into(),
            ));
        }
        Ok(())
    }

    fn mixer_weights(&self) -> MixerWeights {
        MixerWeights {
            dd: self.tx_d2 * self.rx_d2,
            ii: self.tx_i2 * self.rx_i2,
            id: self.tx_i2 * self.rx_d2,
            di: self.tx_d2 * self.rx_i2,
        }
    }
}

/// Products of mixer power gains weighting the four SI paths.
#[derive(Clone, Copy, Debug)]
struct MixerWeights {
    /// `|g_Tx,d g_Rx,d|²`
    dd: f64,
    /// `|g_Tx,I g_Rx,I|²`
    ii: f64,
    /// `|g_Tx,I g_Rx,d|²`
    id: f64,
    /// `|g_Tx,d g_Rx,I|²`
    di: f64,
}

/// Per-symbol variances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymbolPowers {
    pub k: usize,
    pub m: usize,
    pub si_alc: f64,
    pub si_dlc: f64,
    pub si_im_alc: f64,
    pub si_im_dlc: f64,
    pub desired: f64,
    pub rs: f64,
    pub rs_im: f64,
    /// `rs + rs_im - desired`, clamped at zero below the round-off floor.
    pub interference: f64,
}

impl SymbolPowers {
    /// Total residual SI after the given cancellation stage.
    pub fn si_total(&self, mode: CancellationMode) -> f64 {
        match mode {
            CancellationMode::AlcOnly => self.si_alc + self.si_im_alc,
            CancellationMode::Dlc => self.si_dlc + self.si_im_alc,
            CancellationMode::CDlc => self.si_dlc + self.si_im_dlc,
        }
    }

    pub fn sir(&self, mode: CancellationMode) -> f64 {
        ratio(self.desired, self.si_total(mode) + self.interference)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        f64::NAN
    }
}

/// Grid of per-symbol variances with grid aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct SirBreakdown {
    pub grid: GfdmGrid,
    pub symbols: Vec<SymbolPowers>,
}

impl SirBreakdown {
    pub fn at(&self, k: usize, m: usize) -> &SymbolPowers {
        &self.symbols[self.grid.index(k, m)]
    }

    /// Ratio-of-sums SIR over the grid.
    pub fn sir_aggregate(&self, mode: CancellationMode) -> f64 {
        let num: f64 = self.symbols.iter().map(|s| s.desired).sum();
        let den: f64 = self
            .symbols
            .iter()
            .map(|s| s.si_total(mode) + s.interference)
            .sum();
        ratio(num, den)
    }

    /// Mean residual SI power over the grid.
    pub fn mean_residual_si(&self, mode: CancellationMode) -> f64 {
        self.mean(|s| s.si_total(mode))
    }

    pub fn mean(&self, field: impl Fn(&SymbolPowers) -> f64) -> f64 {
        self.symbols.iter().map(field).sum::<f64>() / self.symbols.len() as f64
    }
}

/// Scalar-route evaluator. Tables depend on everything except the receiver
/// filter, so one instance serves any number of filters.
#[derive(Clone, Debug)]
pub struct ClosedForm {
    cfg: AnalyticsConfig,
    n: usize,
    /// `exp(-4πβT_s|d|)` and `exp(-2πβT_s|d|)` by lag.
    rho_si: Vec<f64>,
    rho_s: Vec<f64>,
    /// `exp(j2πdε/K)` at `d + N - 1`.
    cfo: Vec<C64>,
    /// `sum_k exp(j2πd(k - k')/K)` at `[(d mod K) * K + k']`.
    ksum_lin: Vec<C64>,
    /// `sum_k exp(-j2πd(k + k')/K)` at `[(d mod K) * K + k']`.
    ksum_im: Vec<C64>,
    /// `sum_l σ²_RSI,l g_m[n1-l] g*_m[n2-l]` per `m`, row-major `n1 * N + n2`.
    q_si: Vec<Vec<C64>>,
    q_si_all: Vec<C64>,
    q_s: Vec<Vec<C64>>,
    q_s_all: Vec<C64>,
}

impl ClosedForm {
    pub fn new(cfg: &AnalyticsConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid;
        let n = grid.n();
        let kk = grid.subcarriers();
        let rho_si = (0..n)
            .map(|d| phase_correlation(cfg.beta_hz, cfg.ts_s, d).powi(2))
            .collect();
        let rho_s = (0..n)
            .map(|d| phase_correlation(cfg.beta_hz, cfg.ts_s, d))
            .collect();
        let cfo = (0..2 * n - 1)
            .map(|i| {
                let d = i as f64 - (n as f64 - 1.0);
                C64::from_polar(1.0, 2.0 * PI * d * cfg.epsilon / kk as f64)
            })
            .collect();
        let phasor = |q: i64| C64::from_polar(1.0, 2.0 * PI * q.rem_euclid(kk as i64) as f64 / kk as f64);
        let mut ksum_lin = vec![C64::new(0.0, 0.0); kk * kk];
        let mut ksum_im = vec![C64::new(0.0, 0.0); kk * kk];
        for dm in 0..kk as i64 {
            for kp in 0..kk as i64 {
                let idx = dm as usize * kk + kp as usize;
                ksum_lin[idx] = (0..kk as i64).map(|k| phasor(dm * (k - kp))).sum();
                ksum_im[idx] = (0..kk as i64).map(|k| phasor(-dm * (k + kp))).sum();
            }
        }
        let shifted_products = |pdp: &[f64]| -> Vec<Vec<C64>> {
            (0..grid.subsymbols())
                .map(|m| {
                    let gm = shifted(&cfg.g, m * kk);
                    let mut q = vec![C64::new(0.0, 0.0); n * n];
                    for (l, &s2) in pdp.iter().enumerate() {
                        if s2 == 0.0 {
                            continue;
                        }
                        for n1 in 0..n {
                            let a = gm[(n1 + n - l) % n] * s2;
                            let row = &mut q[n1 * n..(n1 + 1) * n];
                            for (n2, slot) in row.iter_mut().enumerate() {
                                *slot += a * gm[(n2 + n - l) % n].conj();
                            }
                        }
                    }
                    q
                })
                .collect()
        };
        let sum_all = |qs: &[Vec<C64>]| -> Vec<C64> {
            let mut out = vec![C64::new(0.0, 0.0); n * n];
            for q in qs {
                out.iter_mut().zip(q).for_each(|(o, v)| *o += v);
            }
            out
        };
        let q_si = shifted_products(&cfg.pdp_rsi);
        let q_s = shifted_products(&cfg.pdp_s);
        let q_si_all = sum_all(&q_si);
        let q_s_all = sum_all(&q_s);
        Ok(Self {
            cfg: cfg.clone(),
            n,
            rho_si,
            rho_s,
            cfo,
            ksum_lin,
            ksum_im,
            q_si,
            q_si_all,
            q_s,
            q_s_all,
        })
    }

    pub fn config(&self) -> &AnalyticsConfig {
        &self.cfg
    }

    /// Installs a different receiver filter.
    pub fn set_filter(&mut self, f: &[C64]) -> Result<()> {
        if f.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: f.len(),
            });
        }
        self.cfg.f = f.to_vec();
        Ok(())
    }

    /// `sum_{n1,n2} f_m'[n1] f*_m'[n2] ρ(|d|) (a e^{jθ} + b e^{-jθ}) Q[n1,n2] κ(d)`
    /// with `d = n1 - n2`, `θ = 2πdε/K`. Returns the real part after checking
    /// the imaginary residue.
    fn double_sum(
        &self,
        m_p: usize,
        rho: &[f64],
        a: f64,
        b: f64,
        q: &[C64],
        conj_q: bool,
        kernel: impl Fn(i64) -> C64,
    ) -> Result<f64> {
        if a == 0.0 && b == 0.0 {
            return Ok(0.0);
        }
        let n = self.n;
        let fm = shifted(&self.cfg.f, m_p * self.cfg.grid.subcarriers());
        let mut acc = C64::new(0.0, 0.0);
        let mut scale = 0.0;
        for n1 in 0..n {
            let row = &q[n1 * n..(n1 + 1) * n];
            let f1 = fm[n1];
            if f1 == C64::new(0.0, 0.0) {
                continue;
            }
            let mut inner = C64::new(0.0, 0.0);
            for n2 in 0..n {
                let qv = if conj_q { row[n2].conj() } else { row[n2] };
                if qv == C64::new(0.0, 0.0) {
                    continue;
                }
                let d = n1 as i64 - n2 as i64;
                let c = self.cfo[(d + n as i64 - 1) as usize];
                let w = (c * a + c.conj() * b) * rho[d.unsigned_abs() as usize];
                let term = fm[n2].conj() * w * qv * kernel(d);
                scale += term.re.abs() + term.im.abs();
                inner += term;
            }
            acc += f1 * inner;
        }
        check_real(acc, scale)
    }

    fn k_lin(&self, d: i64, k_p: usize) -> C64 {
        let kk = self.cfg.grid.subcarriers();
        self.ksum_lin[d.rem_euclid(kk as i64) as usize * kk + k_p]
    }

    fn k_im(&self, d: i64, k_p: usize) -> C64 {
        let kk = self.cfg.grid.subcarriers();
        self.ksum_im[d.rem_euclid(kk as i64) as usize * kk + k_p]
    }

    /// `exp(-j2π d 2k'/K)`: image kernel of the `k = k'` replica.
    fn k_im_self(&self, d: i64, k_p: usize) -> C64 {
        let kk = self.cfg.grid.subcarriers() as i64;
        C64::from_polar(
            1.0,
            -2.0 * PI * (d * 2 * k_p as i64).rem_euclid(kk) as f64 / kk as f64,
        )
    }

    fn check(&self, k_p: usize, m_p: usize) -> Result<()> {
        self.cfg.grid.check_position(k_p, m_p)
    }

    /// Linear residual SI after analog cancellation.
    pub fn sigma_si_alc(&self, k_p: usize, m_p: usize) -> Result<f64> {
        self.check(k_p, m_p)?;
        let w = self.cfg.mixer_weights();
        let v = self.double_sum(m_p, &self.rho_si, w.dd, w.ii, &self.q_si_all, false, |d| {
            self.k_lin(d, k_p)
        })?;
        Ok(self.cfg.p_d * v)
    }

    /// Contribution of the replicas removed by DLC to [`Self::sigma_si_alc`].
    pub fn sigma_si_excluded(&self, k_p: usize, m_p: usize) -> Result<f64> {
        self.check(k_p, m_p)?;
        let w = self.cfg.mixer_weights();
        let own = |q: &[C64], kernel: &dyn Fn(i64) -> C64| {
            self.double_sum(m_p, &self.rho_si, w.dd, w.ii, q, false, kernel)
        };
        let v = match self.cfg.exclusion {
            ExclusionSet::SelfOnly => own(&self.q_si[m_p], &|_| C64::new(1.0, 0.0))?,
            ExclusionSet::RowAndColumn => {
                own(&self.q_si_all, &|_| C64::new(1.0, 0.0))?
                    + own(&self.q_si[m_p], &|d| self.k_lin(d, k_p))?
                    - own(&self.q_si[m_p], &|_| C64::new(1.0, 0.0))?
            }
        };
        Ok(self.cfg.p_d * v)
    }

    /// Linear residual SI after DLC.
    pub fn sigma_si_dlc(&self, k_p: usize, m_p: usize) -> Result<f64> {
        let full = self.sigma_si_alc(k_p, m_p)?;
        let removed = self.sigma_si_excluded(k_p, m_p)?;
        clamp_floor(full - removed, full)
    }

    /// Image residual SI after analog cancellation.
    pub fn sigma_si_im_alc(&self, k_p: usize, m_p: usize) -> Result<f64> {
        self.check(k_p, m_p)?;
        let w = self.cfg.mixer_weights();
        let v = self.double_sum(m_p, &self.rho_si, w.id, w.di, &self.q_si_all, true, |d| {
            self.k_im(d, k_p)
        })?;
        Ok(self.cfg.p_d * v)
    }

    /// Contribution of the conjugate replicas removed by C-DLC.
    pub fn sigma_si_im_excluded(&self, k_p: usize, m_p: usize) -> Result<f64> {
        self.check(k_p, m_p)?;
        let w = self.cfg.mixer_weights();
        let own = |q: &[C64], kernel: &dyn Fn(i64) -> C64| {
            self.double_sum(m_p, &self.rho_si, w.id, w.di, q, true, kernel)
        };
        let v = match self.cfg.exclusion {
            ExclusionSet::SelfOnly => own(&self.q_si[m_p], &|d| self.k_im_self(d, k_p))?,
            ExclusionSet::RowAndColumn => {
                own(&self.q_si_all, &|d| self.k_im_self(d, k_p))?
                    + own(&self.q_si[m_p], &|d| self.k_im(d, k_p))?
                    - own(&self.q_si[m_p], &|d| self.k_im_self(d, k_p))?
            }
        };
        Ok(self.cfg.p_d * v)
    }

    /// Image residual SI after C-DLC.
    pub fn sigma_si_im_dlc(&self, k_p: usize, m_p: usize) -> Result<f64> {
        let full = self.sigma_si_im_alc(k_p, m_p)?;
        let removed = self.sigma_si_im_excluded(k_p, m_p)?;
        clamp_floor(full - removed, full)
    }

    /// Residual SI after C-DLC (linear plus image).
    pub fn sigma_si_total(&self, k_p: usize, m_p: usize) -> Result<f64> {
        Ok(self.sigma_si_dlc(k_p, m_p)? + self.sigma_si_im_dlc(k_p, m_p)?)
    }

    pub fn sigma_si_total_mode(&self, k_p: usize, m_p: usize, mode: CancellationMode) -> Result<f64> {
        Ok(match mode {
            CancellationMode::AlcOnly => self.sigma_si_alc(k_p, m_p)? + self.sigma_si_im_alc(k_p, m_p)?,
            CancellationMode::Dlc => self.sigma_si_dlc(k_p, m_p)? + self.sigma_si_im_alc(k_p, m_p)?,
            CancellationMode::CDlc => self.sigma_si_total(k_p, m_p)?,
        })
    }

    /// Power of the desired symbol's own replica.
    pub fn sigma_desired(&self, k_p: usize, m_p: usize) -> Result<f64> {
        self.check(k_p, m_p)?;
        let v = self.double_sum(m_p, &self.rho_s, 1.0, 0.0, &self.q_s[m_p], false, |_| {
            C64::new(1.0, 0.0)
        })?;
        Ok(self.cfg.rx_d2 * self.cfg.p_d * v)
    }

    /// Full desired-path power through the direct receiver branch.
    pub fn sigma_rs(&self, k_p: usize, m_p: usize) -> Result<f64> {
        self.check(k_p, m_p)?;
        let v = self.double_sum(m_p, &self.rho_s, 1.0, 0.0, &self.q_s_all, false, |d| {
            self.k_lin(d, k_p)
        })?;
        Ok(self.cfg.rx_d2 * self.cfg.p_d * v)
    }

    /// Desired-path power through the receiver image branch.
    pub fn sigma_rs_im(&self, k_p: usize, m_p: usize) -> Result<f64> {
        self.check(k_p, m_p)?;
        let v = self.double_sum(m_p, &self.rho_s, 0.0, 1.0, &self.q_s_all, true, |d| {
            self.k_im(d, k_p)
        })?;
        Ok(self.cfg.rx_i2 * self.cfg.p_d * v)
    }

    pub fn sigma_interf_total(&self, k_p: usize, m_p: usize) -> Result<f64> {
        let desired = self.sigma_desired(k_p, m_p)?;
        let total = self.sigma_rs(k_p, m_p)? + self.sigma_rs_im(k_p, m_p)?;
        clamp_floor(total - desired, total)
    }

    /// Per-symbol SIR after C-DLC.
    pub fn sir(&self, k_p: usize, m_p: usize) -> Result<f64> {
        let p = self.symbol(k_p, m_p)?;
        Ok(p.sir(CancellationMode::CDlc))
    }

    pub fn symbol(&self, k_p: usize, m_p: usize) -> Result<SymbolPowers> {
        let si_alc = self.sigma_si_alc(k_p, m_p)?;
        let si_dlc = clamp_floor(si_alc - self.sigma_si_excluded(k_p, m_p)?, si_alc)?;
        let si_im_alc = self.sigma_si_im_alc(k_p, m_p)?;
        let si_im_dlc = clamp_floor(si_im_alc - self.sigma_si_im_excluded(k_p, m_p)?, si_im_alc)?;
        let desired = self.sigma_desired(k_p, m_p)?;
        let rs = self.sigma_rs(k_p, m_p)?;
        let rs_im = self.sigma_rs_im(k_p, m_p)?;
        let interference = clamp_floor(rs + rs_im - desired, rs + rs_im)?;
        Ok(SymbolPowers {
            k: k_p,
            m: m_p,
            si_alc,
            si_dlc,
            si_im_alc,
            si_im_dlc,
            desired,
            rs,
            rs_im,
            interference,
        })
    }

    /// Every symbol of the grid, evaluated in parallel.
    pub fn breakdown(&self) -> Result<SirBreakdown> {
        let grid = self.cfg.grid;
        let positions: Vec<_> = grid.positions().collect();
        let symbols = positions
            .par_iter()
            .map(|&(k, m)| self.symbol(k, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(SirBreakdown { grid, symbols })
    }

    /// Ratio-of-sums SIR over the grid.
    pub fn sir_aggregate(&self, mode: CancellationMode) -> Result<f64> {
        Ok(self.breakdown()?.sir_aggregate(mode))
    }
}

/// `v[(n - shift) mod N]`.
fn shifted(v: &[C64], shift: usize) -> Vec<C64> {
    let n = v.len();
    (0..n).map(|i| v[(i + n - shift % n) % n]).collect()
}

fn check_real(v: C64, scale: f64) -> Result<f64> {
    let tol = 1e-9 * v.re.abs().max(1e-3 * scale);
    if v.im.abs() > tol && v.im.abs() > 1e-300 {
        return Err(Error::ComplexResidue {
            real: v.re,
            imag: v.im,
        });
    }
    Ok(v.re)
}

/// Clamps round-off negatives of a difference of variances to zero.
fn clamp_floor(value: f64, reference: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -1e-9 * reference.abs().max(f64::MIN_POSITIVE) {
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance { value })
    }
}

/// Matrix-route quadratic forms.
///
/// With `f_{k',m'} = S_{k'} M_{m'} f` (the vector the demodulator applies at
/// `(k', m')`), every variance is `f_{k',m'}^H A f_{k',m'}`:
///
/// * desired: `A = S_{k'} U_{m'} S_{k'}^H` ([`Self::u_mapped`]); `U_{m'}` itself
///   is the form in the shift-only vector `M_{m'} f`,
/// * residual SI: [`Self::v_si`] (full-grid matrix minus the replicas removed
///   by the chosen cancellation stage),
/// * desired-path total: [`Self::v_r`]; interference is `V^R` minus the
///   mapped `U`.
#[derive(Clone, Debug)]
pub struct QuadraticFormSet {
    grid: GfdmGrid,
    exclusion: ExclusionSet,
    /// Modulated pulses `p_{k,m}[n]`, column `index(k, m)`.
    pulses: DMatrix<C64>,
    /// SI kernel weight `P_d σ²_RSI,l ρ_SI(|d|)(w e^{jθ} + w' e^{-jθ})` per
    /// tap for the direct and image paths, row-major `(l, d + N - 1)`.
    si_lin_kernel: Vec<Vec<C64>>,
    si_im_kernel: Vec<Vec<C64>>,
    pub u: Vec<DMatrix<C64>>,
    pub v_si_lin: DMatrix<C64>,
    pub v_si_im: DMatrix<C64>,
    pub v_r: DMatrix<C64>,
}

impl QuadraticFormSet {
    pub fn build(cfg: &AnalyticsConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid;
        let n = grid.n();
        let kk = grid.subcarriers() as f64;
        let g = PrototypeFilter::custom(cfg.g.clone())?;
        // The closed forms take the prototype as given; undo the renormalisation.
        let energy: f64 = cfg.g.iter().map(|t| t.norm_sqr()).sum();
        let pulses = modulation_matrix(&g, &grid) * C64::new(energy.sqrt(), 0.0);
        let gram = &pulses * pulses.adjoint();
        let w = cfg.mixer_weights();

        let theta = |d: i64| C64::from_polar(1.0, 2.0 * PI * d as f64 * cfg.epsilon / kk);
        let rho_si = |d: i64| phase_correlation(cfg.beta_hz, cfg.ts_s, d.unsigned_abs() as usize).powi(2);
        let rho_s = |d: i64| phase_correlation(cfg.beta_hz, cfg.ts_s, d.unsigned_abs() as usize);
        let kernel_table = |pdp: &[f64], rho: &dyn Fn(i64) -> f64, a: f64, b: f64| -> Vec<Vec<C64>> {
            pdp.iter()
                .map(|&s2| {
                    (0..2 * n - 1)
                        .map(|i| {
                            let d = i as i64 - (n as i64 - 1);
                            let c = theta(d);
                            (c * a + c.conj() * b) * (cfg.p_d * s2 * rho(d))
                        })
                        .collect()
                })
                .collect()
        };
        let si_lin_kernel = kernel_table(&cfg.pdp_rsi, &rho_si, w.dd, w.ii);
        let si_im_kernel = kernel_table(&cfg.pdp_rsi, &rho_si, w.id, w.di);
        let r_lin_kernel = kernel_table(&cfg.pdp_s, &rho_s, cfg.rx_d2, 0.0);
        let r_im_kernel = kernel_table(&cfg.pdp_s, &rho_s, 0.0, cfg.rx_i2);

        // A[n2, n1] = sum_l kern_l(n1 - n2) * P[(n1 - l), (n2 - l)] with P
        // either the Gram matrix (direct) or its transpose (image).
        let assemble = |kernel: &[Vec<C64>], source: &dyn Fn(usize, usize) -> C64| -> DMatrix<C64> {
            DMatrix::from_fn(n, n, |n2, n1| {
                let d = n1 as i64 - n2 as i64;
                kernel
                    .iter()
                    .enumerate()
                    .filter(|(_, kern)| kern.iter().any(|v| *v != C64::new(0.0, 0.0)))
                    .map(|(l, kern)| {
                        kern[(d + n as i64 - 1) as usize] * source((n1 + n - l) % n, (n2 + n - l) % n)
                    })
                    .sum()
            })
        };
        let direct = |a: usize, b: usize| gram[(a, b)];
        let image = |a: usize, b: usize| gram[(b, a)];
        let v_si_lin = assemble(&si_lin_kernel, &direct);
        let v_si_im = assemble(&si_im_kernel, &image);
        let v_r = assemble(&r_lin_kernel, &direct) + assemble(&r_im_kernel, &image);

        let u = (0..grid.subsymbols())
            .map(|m| {
                let gm = pulses.column(grid.index(0, m)).into_owned();
                let pair = |a: usize, b: usize| gm[a] * gm[b].conj();
                assemble(&r_lin_kernel, &pair)
            })
            .collect();

        Ok(Self {
            grid,
            exclusion: cfg.exclusion,
            pulses,
            si_lin_kernel,
            si_im_kernel,
            u,
            v_si_lin,
            v_si_im,
            v_r,
        })
    }

    pub fn grid(&self) -> &GfdmGrid {
        &self.grid
    }

    /// `S_{k'} U_{m'} S_{k'}^H`.
    pub fn u_mapped(&self, k_p: usize, m_p: usize) -> DMatrix<C64> {
        let n = self.grid.n();
        let kk = self.grid.subcarriers();
        let u = &self.u[m_p];
        DMatrix::from_fn(n, n, |n2, n1| {
            let q = (k_p * ((n1 + kk * n - n2) % kk)) % kk;
            u[(n2, n1)] * C64::from_polar(1.0, 2.0 * PI * q as f64 / kk as f64)
        })
    }

    fn excluded_positions(&self, k_p: usize, m_p: usize) -> Vec<(usize, usize)> {
        match self.exclusion {
            ExclusionSet::SelfOnly => vec![(k_p, m_p)],
            ExclusionSet::RowAndColumn => self
                .grid
                .positions()
                .filter(|&(k, m)| k == k_p || m == m_p)
                .collect(),
        }
    }

    /// Sum over the excluded replicas of the direct (`image = false`) or
    /// conjugate SI quadratic-form matrices.
    pub fn si_excluded(&self, k_p: usize, m_p: usize, image: bool) -> DMatrix<C64> {
        let n = self.grid.n();
        let kernel = if image { &self.si_im_kernel } else { &self.si_lin_kernel };
        let mut out = DMatrix::zeros(n, n);
        for (k, m) in self.excluded_positions(k_p, m_p) {
            let p = self.pulses.column(self.grid.index(k, m));
            for (l, kern) in kernel.iter().enumerate() {
                if kern.iter().all(|v| *v == C64::new(0.0, 0.0)) {
                    continue;
                }
                for n1 in 0..n {
                    let a = p[(n1 + n - l) % n];
                    for n2 in 0..n {
                        let b = p[(n2 + n - l) % n];
                        let prod = if image { a.conj() * b } else { a * b.conj() };
                        let d = n1 as i64 - n2 as i64;
                        out[(n2, n1)] += kern[(d + n as i64 - 1) as usize] * prod;
                    }
                }
            }
        }
        out
    }

    /// Residual-SI matrix at `(k', m')` after `mode`.
    pub fn v_si(&self, k_p: usize, m_p: usize, mode: CancellationMode) -> DMatrix<C64> {
        let mut v = &self.v_si_lin + &self.v_si_im;
        if mode != CancellationMode::AlcOnly {
            v -= self.si_excluded(k_p, m_p, false);
        }
        if mode == CancellationMode::CDlc {
            v -= self.si_excluded(k_p, m_p, true);
        }
        v
    }
}

/// `x^H A x`.
pub fn quadratic(a: &DMatrix<C64>, x: &[C64]) -> C64 {
    let n = x.len();
    let mut acc = C64::new(0.0, 0.0);
    for c in 0..n {
        let col: C64 = (0..n).map(|r| x[r].conj() * a[(r, c)]).sum();
        acc += col * x[c];
    }
    acc
}

/// `f_{k',m'}[n] = f[(n - m'K) mod N] exp(-j2πk'n/K)`.
pub fn mapped_filter(f: &[C64], grid: &GfdmGrid, k_p: usize, m_p: usize) -> Vec<C64> {
    let n = grid.n();
    let kk = grid.subcarriers();
    (0..n)
        .map(|i| {
            let q = (k_p * i) % kk;
            f[(i + n - m_p * kk) % n] * C64::from_polar(1.0, -2.0 * PI * q as f64 / kk as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{mf_receiver, zf_receiver};

    fn simple(k: usize, m: usize) -> AnalyticsConfig {
        let grid = GfdmGrid::new(k, m, 0).unwrap();
        let g = PrototypeFilter::rrc(&grid, 0.4).unwrap();
        let f = zf_receiver(&g, &grid).unwrap();
        AnalyticsConfig {
            grid,
            g: g.taps().to_vec(),
            f: f.taps().to_vec(),
            beta_hz: 0.0,
            ts_s: 1.0 / 15.36e6,
            epsilon: 0.0,
            tx_d2: 1.0,
            tx_i2: 0.0,
            rx_d2: 1.0,
            rx_i2: 0.0,
            pdp_rsi: vec![1.0],
            pdp_s: vec![1.0],
            p_d: 1.0,
            exclusion: ExclusionSet::SelfOnly,
        }
    }

    #[test]
    fn zero_si_profile_is_zero() {
        let mut cfg = simple(4, 2);
        cfg.pdp_rsi = vec![0.0, 0.0];
        let cf = ClosedForm::new(&cfg).unwrap();
        assert_eq!(cf.sigma_si_alc(1, 1).unwrap(), 0.0);
        assert_eq!(cf.sigma_si_im_alc(1, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_symbol_frame_dlc_removes_everything() {
        let cfg = simple(1, 1);
        let cf = ClosedForm::new(&cfg).unwrap();
        assert!(cf.sigma_si_alc(0, 0).unwrap() > 0.0);
        assert_eq!(cf.sigma_si_dlc(0, 0).unwrap(), 0.0);
    }

    #[test]
    fn zf_reconstructs_desired_power() {
        let cfg = simple(4, 3);
        let cf = ClosedForm::new(&cfg).unwrap();
        for (k, m) in cfg.grid.positions() {
            assert!((cf.sigma_desired(k, m).unwrap() - 1.0).abs() < 1e-9);
            assert!(cf.sigma_interf_total(k, m).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_ofdm_has_no_interference() {
        let grid = GfdmGrid::new(8, 1, 0).unwrap();
        let g = PrototypeFilter::rectangular(&grid).unwrap();
        let mut cfg = simple(8, 1);
        cfg.grid = grid;
        cfg.g = g.taps().to_vec();
        cfg.f = mf_receiver(&g).taps().to_vec();
        let cf = ClosedForm::new(&cfg).unwrap();
        for k in 0..8 {
            let p = cf.symbol(k, 0).unwrap();
            assert!((p.rs - p.desired).abs() < 1e-12);
            assert_eq!(p.interference, 0.0);
            assert_eq!(p.rs_im, 0.0);
        }
        let b = cf.breakdown().unwrap();
        assert_eq!(b.sir_aggregate(CancellationMode::CDlc), f64::INFINITY);
    }

    #[test]
    fn desired_power_decreases_with_linewidth() {
        let mut cfg = simple(8, 3);
        cfg.epsilon = 0.1;
        let mut prev = f64::INFINITY;
        for beta in [0.0, 1e3, 1e4, 1e5, 1e6] {
            cfg.beta_hz = beta;
            let v = ClosedForm::new(&cfg).unwrap().sigma_desired(3, 1).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn hand_computed_u_for_two_sample_ofdm() {
        let grid = GfdmGrid::new(2, 1, 0).unwrap();
        let g = PrototypeFilter::rectangular(&grid).unwrap();
        let mut cfg = simple(2, 1);
        cfg.grid = grid;
        cfg.g = g.taps().to_vec();
        cfg.f = mf_receiver(&g).taps().to_vec();
        cfg.p_d = 2.0;
        let qf = QuadraticFormSet::build(&cfg).unwrap();
        for n2 in 0..2 {
            for n1 in 0..2 {
                let expected = cfg.g[n1] * cfg.g[n2].conj() * 2.0;
                assert!((qf.u[0][(n2, n1)] - expected).norm() < 1e-15);
            }
        }
    }
}
