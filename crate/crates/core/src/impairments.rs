//! Stochastic RF impairment models: free-running oscillator phase noise, CFO,
//! IQ imbalance, WSSUS multipath, and additive noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::waveform::C64;

/// Brownian-motion phase trajectory.
///
/// Sample `i` of `trajectory` belongs to time index `start + i`, so link
/// simulations can address the cyclic-prefix region with negative indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseNoiseProcess {
    beta_hz: f64,
    ts_s: f64,
    start: isize,
    trajectory: Vec<f64>,
}

impl PhaseNoiseProcess {
    /// Constant zero phase over `n` samples starting at time `start`.
    pub fn silent(n: usize, start: isize) -> Self {
        Self {
            beta_hz: 0.0,
            ts_s: 1.0,
            start,
            trajectory: vec![0.0; n],
        }
    }

    pub fn from_trajectory(trajectory: Vec<f64>, start: isize) -> Self {
        Self {
            beta_hz: f64::NAN,
            ts_s: f64::NAN,
            start,
            trajectory,
        }
    }

    pub fn beta_hz(&self) -> f64 {
        self.beta_hz
    }

    pub fn ts_s(&self) -> f64 {
        self.ts_s
    }

    pub fn start(&self) -> isize {
        self.start
    }

    pub fn trajectory(&self) -> &[f64] {
        &self.trajectory
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    /// Phase at absolute time index `n`.
    pub fn at(&self, n: isize) -> Result<f64> {
        let offset = n - self.start;
        if offset < 0 || offset as usize >= self.trajectory.len() {
            return Err(Error::IndexOutOfRange(format!(
                "phase index {n} outside [{}, {})",
                self.start,
                self.start + self.trajectory.len() as isize
            )));
        }
        Ok(self.trajectory[offset as usize])
    }

    pub(crate) fn at_unchecked(&self, n: isize) -> f64 {
        self.trajectory[(n - self.start) as usize]
    }
}

/// Increment variance `4πβT_s` of the free-running oscillator model.
pub fn phase_increment_variance(beta_hz: f64, ts_s: f64) -> f64 {
    4.0 * PI * beta_hz * ts_s
}

/// `E[exp(j(φ[a] - φ[b]))]` for one oscillator at lag `|a - b|`.
pub fn phase_correlation(beta_hz: f64, ts_s: f64, lag: usize) -> f64 {
    (-2.0 * PI * beta_hz * ts_s * lag as f64).exp()
}

pub fn gen_phase_noise<R: Rng + ?Sized>(
    n: usize,
    beta_hz: f64,
    ts_s: f64,
    rng: &mut R,
) -> Result<PhaseNoiseProcess> {
    gen_phase_noise_from(n, 0, beta_hz, ts_s, rng)
}

/// Phase trajectory over time indices `start .. start + n`, with `φ[start] = 0`.
pub fn gen_phase_noise_from<R: Rng + ?Sized>(
    n: usize,
    start: isize,
    beta_hz: f64,
    ts_s: f64,
    rng: &mut R,
) -> Result<PhaseNoiseProcess> {
    if n == 0 {
        return Err(Error::InvalidParameter("phase noise needs n >= 1".into()));
    }
    if !(beta_hz >= 0.0) || !beta_hz.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "phase noise bandwidth {beta_hz} Hz must be finite and non-negative"
        )));
    }
    if !(ts_s > 0.0) || !ts_s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sample interval {ts_s} s must be positive"
        )));
    }
    let mut trajectory = Vec::with_capacity(n);
    trajectory.push(0.0);
    let sigma = phase_increment_variance(beta_hz, ts_s).sqrt();
    if sigma == 0.0 {
        trajectory.resize(n, 0.0);
    } else {
        let mut phi = 0.0;
        for _ in 1..n {
            let w: f64 = StandardNormal.sample(rng);
            phi += sigma * w;
            trajectory.push(phi);
        }
    }
    Ok(PhaseNoiseProcess {
        beta_hz,
        ts_s,
        start,
        trajectory,
    })
}

/// Direct and image gains of an IQ mixer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqMixerCoeffs {
    pub g_d: C64,
    pub g_i: C64,
}

impl IqMixerCoeffs {
    pub fn ideal() -> Self {
        Self {
            g_d: C64::new(1.0, 0.0),
            g_i: C64::new(0.0, 0.0),
        }
    }

    /// Image-rejection ratio `10 log10(|g_i|² / |g_d|²)`; `-inf` for an ideal mixer.
    pub fn irr_db(&self) -> f64 {
        10.0 * (self.g_i.norm_sqr() / self.g_d.norm_sqr()).log10()
    }
}

/// `g_d = 1`, `g_i = 10^(irr/20) exp(j·image_phase)`.
pub fn coeffs_from_irr(irr_db: f64, image_phase: f64) -> IqMixerCoeffs {
    let mag = if irr_db == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf(irr_db / 20.0)
    };
    IqMixerCoeffs {
        g_d: C64::new(1.0, 0.0),
        g_i: C64::from_polar(mag, image_phase),
    }
}

/// Carrier frequency offset as a fraction of the subcarrier spacing.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct CfoParam(pub f64);

impl CfoParam {
    /// `exp(j2πεn/K)`.
    pub fn ramp(&self, n: isize, k: usize) -> C64 {
        C64::from_polar(1.0, 2.0 * PI * self.0 * n as f64 / k as f64)
    }
}

/// `(g_d x[n] + g_i x*[n]) exp(jφ_Tx[n])`, sample `i` at time `phase.start() + i`.
pub fn apply_tx_iq(x: &[C64], mixer: &IqMixerCoeffs, phase: &PhaseNoiseProcess) -> Result<Vec<C64>> {
    apply_tx_iq_at(x, phase.start(), mixer, phase)
}

/// As [`apply_tx_iq`] with sample `i` at time `t0 + i`.
pub fn apply_tx_iq_at(
    x: &[C64],
    t0: isize,
    mixer: &IqMixerCoeffs,
    phase: &PhaseNoiseProcess,
) -> Result<Vec<C64>> {
    check_cover(phase, t0, x.len())?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let rot = C64::from_polar(1.0, phase.at_unchecked(t0 + i as isize));
            (mixer.g_d * v + mixer.g_i * v.conj()) * rot
        })
        .collect())
}

/// Receiver mixer with CFO:
/// `g_d y[n] e^{-jφ_Rx[n]} e^{j2πεn/K} + g_i y*[n] e^{jφ_Rx[n]} e^{-j2πεn/K}`.
pub fn apply_rx_iq(
    y: &[C64],
    mixer: &IqMixerCoeffs,
    phase: &PhaseNoiseProcess,
    cfo: CfoParam,
    k: usize,
) -> Result<Vec<C64>> {
    apply_rx_iq_at(y, phase.start(), mixer, phase, cfo, k)
}

/// As [`apply_rx_iq`] with sample `i` at time `t0 + i`.
pub fn apply_rx_iq_at(
    y: &[C64],
    t0: isize,
    mixer: &IqMixerCoeffs,
    phase: &PhaseNoiseProcess,
    cfo: CfoParam,
    k: usize,
) -> Result<Vec<C64>> {
    check_cover(phase, t0, y.len())?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &v)| {
            let n = t0 + i as isize;
            let rot = C64::from_polar(1.0, -phase.at_unchecked(n)) * cfo.ramp(n, k);
            mixer.g_d * v * rot + mixer.g_i * v.conj() * rot.conj()
        })
        .collect())
}

fn check_cover(phase: &PhaseNoiseProcess, t0: isize, len: usize) -> Result<()> {
    let end = phase.start() + phase.len() as isize;
    if t0 < phase.start() || t0 + len as isize > end {
        return Err(Error::DimensionMismatch {
            expected: phase.len(),
            got: len,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdpTap {
    pub delay: usize,
    pub power_db: f64,
}

/// Power delay profile; unlisted delays inside the span carry zero power.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PdpTap>", into = "Vec<PdpTap>")]
pub struct ChannelPdp {
    taps: Vec<PdpTap>,
}

impl ChannelPdp {
    pub fn new(taps: Vec<PdpTap>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidParameter("power delay profile is empty".into()));
        }
        for w in taps.windows(2) {
            if w[1].delay <= w[0].delay {
                return Err(Error::InvalidParameter(
                    "power delay profile delays must be strictly increasing".into(),
                ));
            }
        }
        if taps.iter().any(|t| t.power_db.is_nan() || t.power_db == f64::INFINITY) {
            return Err(Error::InvalidParameter("tap power must be finite or -inf".into()));
        }
        Ok(Self { taps })
    }

    /// Consecutive delays `0..powers.len()`.
    pub fn from_db(powers_db: &[f64]) -> Result<Self> {
        Self::new(
            powers_db
                .iter()
                .enumerate()
                .map(|(delay, &power_db)| PdpTap { delay, power_db })
                .collect(),
        )
    }

    /// A PDP whose every tap is switched off.
    pub fn silent(span: usize) -> Self {
        Self {
            taps: vec![PdpTap {
                delay: span.max(1) - 1,
                power_db: f64::NEG_INFINITY,
            }],
        }
    }

    pub fn taps(&self) -> &[PdpTap] {
        &self.taps
    }

    /// Total span `L` (maximum delay + 1).
    pub fn span(&self) -> usize {
        self.taps.last().map_or(0, |t| t.delay + 1)
    }

    /// Linear per-delay variances over `0..L`.
    pub fn linear_powers(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.span()];
        for t in &self.taps {
            out[t.delay] = db_to_linear(t.power_db);
        }
        out
    }

    pub fn total_power(&self) -> f64 {
        self.linear_powers().iter().sum()
    }
}

impl TryFrom<Vec<PdpTap>> for ChannelPdp {
    type Error = Error;
    fn try_from(taps: Vec<PdpTap>) -> Result<Self> {
        Self::new(taps)
    }
}

impl From<ChannelPdp> for Vec<PdpTap> {
    fn from(p: ChannelPdp) -> Self {
        p.taps
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    if db == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf(db / 10.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<C64>,
}

impl ChannelRealization {
    pub fn zeros(span: usize) -> Self {
        Self {
            h: vec![C64::new(0.0, 0.0); span],
        }
    }

    pub fn span(&self) -> usize {
        self.h.len()
    }
}

pub fn draw_channel<R: Rng + ?Sized>(pdp: &ChannelPdp, rng: &mut R) -> ChannelRealization {
    ChannelRealization {
        h: pdp
            .linear_powers()
            .into_iter()
            .map(|p| complex_gaussian(p, rng))
            .collect(),
    }
}

/// Circularly-symmetric complex Gaussian sample with variance `power`.
pub fn complex_gaussian<R: Rng + ?Sized>(power: f64, rng: &mut R) -> C64 {
    if power == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let normal = Normal::new(0.0, (power / 2.0).sqrt()).expect("finite variance");
    C64::new(normal.sample(rng), normal.sample(rng))
}

/// Per-`(n, l)` coefficients of the discrete equivalent channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalentTaps {
    /// Multiplies `x[n-l]` (direct SI).
    pub h1_rsi: C64,
    /// Multiplies `x*[n-l]` (image SI).
    pub h2_rsi: C64,
    /// Multiplies `s[n-l]` (direct desired).
    pub h1_s: C64,
    /// Multiplies `s*[n-l]` (image desired).
    pub h2_s: C64,
}

/// Everything the equivalent-channel coefficients depend on.
#[derive(Clone, Copy, Debug)]
pub struct ImpairmentState<'a> {
    pub tx_mixer: &'a IqMixerCoeffs,
    pub rx_mixer: &'a IqMixerCoeffs,
    pub phi_tx: &'a PhaseNoiseProcess,
    pub phi_rx: &'a PhaseNoiseProcess,
    pub cfo: CfoParam,
    pub h_rsi: &'a ChannelRealization,
    pub h_s: &'a ChannelRealization,
    pub subcarriers: usize,
}

/// Equivalent channel coefficients at sample `n`, tap `l`.
pub fn equivalent_channels(n: isize, l: usize, st: &ImpairmentState<'_>) -> Result<EquivalentTaps> {
    let span = st.h_rsi.span().max(st.h_s.span());
    if l >= span {
        return Err(Error::IndexOutOfRange(format!("tap {l} outside span {span}")));
    }
    let tap = |h: &ChannelRealization| h.h.get(l).copied().unwrap_or_default();
    let h_rsi = tap(st.h_rsi);
    let h_s = tap(st.h_s);
    let phi = st.phi_tx.at(n - l as isize)? - st.phi_rx.at(n)?;
    let phi_rx = st.phi_rx.at(n)?;
    let ramp = st.cfo.ramp(n, st.subcarriers);
    let e = C64::from_polar(1.0, phi) * ramp;
    let (tx, rx) = (st.tx_mixer, st.rx_mixer);
    let rx_rot = C64::from_polar(1.0, -phi_rx) * ramp;
    Ok(EquivalentTaps {
        h1_rsi: tx.g_d * rx.g_d * h_rsi * e + tx.g_i.conj() * rx.g_i * h_rsi.conj() * e.conj(),
        h2_rsi: tx.g_i * rx.g_d * h_rsi * e + tx.g_d.conj() * rx.g_i * h_rsi.conj() * e.conj(),
        h1_s: rx.g_d * h_s * rx_rot,
        h2_s: rx.g_i * h_s.conj() * rx_rot.conj(),
    })
}

/// Direct and image branches of the receiver-mixed noise at sample `n`.
pub fn equivalent_noise(
    w: C64,
    n: isize,
    rx_mixer: &IqMixerCoeffs,
    phi_rx: &PhaseNoiseProcess,
    cfo: CfoParam,
    k: usize,
) -> Result<(C64, C64)> {
    let rot = C64::from_polar(1.0, -phi_rx.at(n)?) * cfo.ramp(n, k);
    Ok((rx_mixer.g_d * rot * w, rx_mixer.g_i * rot.conj() * w.conj()))
}
