//! Monte-Carlo simulation of the full-duplex link.
//!
//! Each signal component (direct SI, image SI, direct desired, image desired,
//! and the two noise branches) is propagated separately through the linear
//! receive chain, so the per-symbol decomposition is exact rather than
//! estimated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impairments::{
    apply_rx_iq_at, apply_tx_iq_at, complex_gaussian, draw_channel, equivalent_channels,
    equivalent_noise, gen_phase_noise_from, CfoParam, ChannelPdp, ChannelRealization,
    EquivalentTaps, ImpairmentState, IqMixerCoeffs, PhaseNoiseProcess,
};
use crate::waveform::{
    add_cp, demodulate_raw, modulate_raw, remove_cp, twiddles, GfdmGrid, PrototypeFilter,
    ReceiverFilter, SymbolFrame, C64,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CancellationMode {
    #[serde(rename = "ALC")]
    AlcOnly,
    #[serde(rename = "DLC")]
    Dlc,
    #[serde(rename = "C_DLC")]
    CDlc,
}

impl CancellationMode {
    pub const ALL: [CancellationMode; 3] = [Self::AlcOnly, Self::Dlc, Self::CDlc];

    pub fn label(&self) -> &'static str {
        match self {
            Self::AlcOnly => "ALC",
            Self::Dlc => "DLC",
            Self::CDlc => "C_DLC",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpairmentConfig {
    pub beta_hz: f64,
    pub ts_s: f64,
    pub cfo: CfoParam,
    pub tx_mixer: IqMixerCoeffs,
    pub rx_mixer: IqMixerCoeffs,
    /// Linear power of the receiver noise `w[n]`; zero switches it off.
    pub noise_power: f64,
}

impl ImpairmentConfig {
    pub fn ideal(ts_s: f64) -> Self {
        Self {
            beta_hz: 0.0,
            ts_s,
            cfo: CfoParam(0.0),
            tx_mixer: IqMixerCoeffs::ideal(),
            rx_mixer: IqMixerCoeffs::ideal(),
            noise_power: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkConfig {
    pub grid: GfdmGrid,
    pub g_tx: PrototypeFilter,
    pub f_rx: ReceiverFilter,
    pub impairments: ImpairmentConfig,
    pub pdp_rsi: ChannelPdp,
    pub pdp_s: ChannelPdp,
    pub p_d: f64,
    pub cancellation: CancellationMode,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n();
        for (len, what) in [(self.g_tx.len(), "prototype"), (self.f_rx.len(), "receiver")] {
            if len != n {
                return Err(Error::InvalidParameter(format!(
                    "{what} filter has {len} taps, frame has {n} samples"
                )));
            }
        }
        let span = self.span();
        if self.grid.cp_len() + 1 < span {
            return Err(Error::CpTooShort {
                cp_len: self.grid.cp_len(),
                span,
            });
        }
        if span > n {
            return Err(Error::InvalidParameter(format!(
                "channel span {span} exceeds frame length {n}"
            )));
        }
        if !(self.p_d >= 0.0) {
            return Err(Error::InvalidParameter("symbol energy must be >= 0".into()));
        }
        if !(self.impairments.noise_power >= 0.0) {
            return Err(Error::InvalidParameter("noise power must be >= 0".into()));
        }
        Ok(())
    }

    /// Longest channel span `L` of the two profiles.
    pub fn span(&self) -> usize {
        self.pdp_rsi.span().max(self.pdp_s.span())
    }
}

/// One draw of every random quantity in a frame.
#[derive(Clone, Debug)]
pub struct FrameRealization {
    pub d_si: SymbolFrame,
    pub d_s: SymbolFrame,
    pub h_rsi: ChannelRealization,
    pub h_s: ChannelRealization,
    /// Trajectories cover time indices `-cp_len ..= N-1`.
    pub phi_tx: PhaseNoiseProcess,
    pub phi_rx: PhaseNoiseProcess,
    /// Receiver noise over `-cp_len ..= N-1`.
    pub noise: Vec<C64>,
}

impl FrameRealization {
    fn state<'a>(&'a self, cfg: &'a LinkConfig) -> ImpairmentState<'a> {
        ImpairmentState {
            tx_mixer: &cfg.impairments.tx_mixer,
            rx_mixer: &cfg.impairments.rx_mixer,
            phi_tx: &self.phi_tx,
            phi_rx: &self.phi_rx,
            cfo: cfg.impairments.cfo,
            h_rsi: &self.h_rsi,
            h_s: &self.h_s,
            subcarriers: cfg.grid.subcarriers(),
        }
    }
}

pub fn draw_realization<R: rand::Rng + ?Sized>(cfg: &LinkConfig, rng: &mut R) -> Result<FrameRealization> {
    cfg.validate()?;
    let grid = &cfg.grid;
    let cp = grid.cp_len();
    let len = grid.n() + cp;
    let start = -(cp as isize);
    let imp = &cfg.impairments;
    let d_si = SymbolFrame::random_qam16(grid, cfg.p_d, rng);
    let d_s = SymbolFrame::random_qam16(grid, cfg.p_d, rng);
    let span = cfg.span();
    let mut h_rsi = draw_channel(&cfg.pdp_rsi, rng);
    let mut h_s = draw_channel(&cfg.pdp_s, rng);
    h_rsi.h.resize(span, C64::new(0.0, 0.0));
    h_s.h.resize(span, C64::new(0.0, 0.0));
    let phi_tx = gen_phase_noise_from(len, start, imp.beta_hz, imp.ts_s, rng)?;
    let phi_rx = gen_phase_noise_from(len, start, imp.beta_hz, imp.ts_s, rng)?;
    let noise = (0..len)
        .map(|_| complex_gaussian(imp.noise_power, rng))
        .collect();
    Ok(FrameRealization {
        d_si,
        d_s,
        h_rsi,
        h_s,
        phi_tx,
        phi_rx,
        noise,
    })
}

/// Demodulator output at one `(k', m')` split by origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecomposedSymbol {
    pub k: usize,
    pub m: usize,
    pub r_si: C64,
    pub r_si_im: C64,
    pub r_s: C64,
    pub r_s_im: C64,
    pub w_eq: C64,
    pub w_eq_im: C64,
    /// Portion of `r_s` carried by the desired symbol `d^s[k', m']` itself.
    pub d_ss: C64,
}

impl DecomposedSymbol {
    /// Demodulated output before any digital cancellation.
    pub fn total(&self) -> C64 {
        self.r_si + self.r_si_im + self.r_s + self.r_s_im + self.w_eq + self.w_eq_im
    }
}

/// Regenerated SI replicas subtracted by the digital cancellers.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DlcTerms {
    pub r_dlc: C64,
    pub r_dlc_i: C64,
}

#[derive(Clone, Debug)]
pub struct SimulatedFrame {
    pub realization: FrameRealization,
    pub symbols: Vec<DecomposedSymbol>,
    pub dlc: Vec<DlcTerms>,
}

impl SimulatedFrame {
    pub fn cancelled(&self, mode: CancellationMode) -> Vec<C64> {
        apply_cancellation(&self.symbols, &self.dlc, mode)
    }
}

pub fn simulate_frame<R: rand::Rng + ?Sized>(cfg: &LinkConfig, rng: &mut R) -> Result<SimulatedFrame> {
    let realization = draw_realization(cfg, rng)?;
    let taps = equivalent_tap_table(cfg, &realization)?;
    let symbols = decompose_with(cfg, &realization, &taps)?;
    let dlc = dlc_grid_with(cfg, &realization, &taps);
    Ok(SimulatedFrame {
        realization,
        symbols,
        dlc,
    })
}

/// `table[n * L + l]` for `n = 0..N`, `l = 0..L`.
fn equivalent_tap_table(cfg: &LinkConfig, real: &FrameRealization) -> Result<Vec<EquivalentTaps>> {
    let n = cfg.grid.n();
    let span = cfg.span();
    let st = real.state(cfg);
    let mut table = Vec::with_capacity(n * span);
    for i in 0..n {
        for l in 0..span {
            table.push(equivalent_channels(i as isize, l, &st)?);
        }
    }
    Ok(table)
}

/// Per-component decomposition of the demodulated frame.
pub fn decompose(cfg: &LinkConfig, real: &FrameRealization) -> Result<Vec<DecomposedSymbol>> {
    let taps = equivalent_tap_table(cfg, real)?;
    decompose_with(cfg, real, &taps)
}

/// Received component signals after CP removal, indexed `0..N`.
struct ComponentSignals {
    si: Vec<C64>,
    si_im: Vec<C64>,
    s: Vec<C64>,
    s_im: Vec<C64>,
    w_d: Vec<C64>,
    w_i: Vec<C64>,
}

fn component_signals(
    cfg: &LinkConfig,
    real: &FrameRealization,
    taps: &[EquivalentTaps],
) -> Result<ComponentSignals> {
    let grid = &cfg.grid;
    let n = grid.n();
    let span = cfg.span();
    let x = modulate_raw(real.d_si.data(), cfg.g_tx.taps(), grid);
    let s = modulate_raw(real.d_s.data(), cfg.g_tx.taps(), grid);
    let zero = C64::new(0.0, 0.0);
    let mut out = ComponentSignals {
        si: vec![zero; n],
        si_im: vec![zero; n],
        s: vec![zero; n],
        s_im: vec![zero; n],
        w_d: vec![zero; n],
        w_i: vec![zero; n],
    };
    let cp = grid.cp_len();
    for i in 0..n {
        for l in 0..span {
            let t = &taps[i * span + l];
            let j = (i + n - l) % n;
            out.si[i] += t.h1_rsi * x[j];
            out.si_im[i] += t.h2_rsi * x[j].conj();
            out.s[i] += t.h1_s * s[j];
            out.s_im[i] += t.h2_s * s[j].conj();
        }
        let (wd, wi) = equivalent_noise(
            real.noise[i + cp],
            i as isize,
            &cfg.impairments.rx_mixer,
            &real.phi_rx,
            cfg.impairments.cfo,
            grid.subcarriers(),
        )?;
        out.w_d[i] = wd;
        out.w_i[i] = wi;
    }
    Ok(out)
}

fn decompose_with(
    cfg: &LinkConfig,
    real: &FrameRealization,
    taps: &[EquivalentTaps],
) -> Result<Vec<DecomposedSymbol>> {
    let grid = &cfg.grid;
    let f = cfg.f_rx.taps();
    let sig = component_signals(cfg, real, taps)?;
    let r_si = demodulate_raw(&sig.si, f, grid);
    let r_si_im = demodulate_raw(&sig.si_im, f, grid);
    let r_s = demodulate_raw(&sig.s, f, grid);
    let r_s_im = demodulate_raw(&sig.s_im, f, grid);
    let w_eq = demodulate_raw(&sig.w_d, f, grid);
    let w_eq_im = demodulate_raw(&sig.w_i, f, grid);
    let gains = self_gains(cfg, taps, |t| t.h1_s);
    Ok(grid
        .positions()
        .map(|(k, m)| {
            let idx = grid.index(k, m);
            DecomposedSymbol {
                k,
                m,
                r_si: r_si[idx],
                r_si_im: r_si_im[idx],
                r_s: r_s[idx],
                r_s_im: r_s_im[idx],
                w_eq: w_eq[idx],
                w_eq_im: w_eq_im[idx],
                d_ss: real.d_s.data()[idx] * gains[idx],
            }
        })
        .collect())
}

/// `sum_l sum_n h[n,l] f_m'[n] g_m'[n-l] exp(-j2πk'l/K)` for every `(k', m')`.
fn self_gains(
    cfg: &LinkConfig,
    taps: &[EquivalentTaps],
    pick: impl Fn(&EquivalentTaps) -> C64,
) -> Vec<C64> {
    let grid = &cfg.grid;
    let n = grid.n();
    let kk = grid.subcarriers();
    let span = cfg.span();
    let g = cfg.g_tx.taps();
    let f = cfg.f_rx.taps();
    let tw = twiddles(kk);
    let mut out = vec![C64::new(0.0, 0.0); n];
    for m in 0..grid.subsymbols() {
        let shift = m * kk;
        let per_tap: Vec<C64> = (0..span)
            .map(|l| {
                (0..n)
                    .map(|i| {
                        pick(&taps[i * span + l])
                            * f[(i + n - shift) % n]
                            * g[(i + 2 * n - shift - l) % n]
                    })
                    .sum()
            })
            .collect();
        for k in 0..kk {
            out[grid.index(k, m)] = per_tap
                .iter()
                .enumerate()
                .map(|(l, a)| a * tw[(kk - (k * l) % kk) % kk])
                .sum();
        }
    }
    out
}

/// Digital cancellation replicas for one symbol, assuming perfect knowledge
/// of the equivalent SI channels.
pub fn dlc_terms(cfg: &LinkConfig, real: &FrameRealization, k_p: usize, m_p: usize) -> Result<DlcTerms> {
    cfg.grid.check_position(k_p, m_p)?;
    let taps = equivalent_tap_table(cfg, real)?;
    let grid = &cfg.grid;
    let n = grid.n();
    let kk = grid.subcarriers();
    let span = cfg.span();
    let g = cfg.g_tx.taps();
    let f = cfg.f_rx.taps();
    let tw = twiddles(kk);
    let shift = m_p * kk;
    let d = real.d_si.get(grid, k_p, m_p);
    let mut lin = C64::new(0.0, 0.0);
    let mut img = C64::new(0.0, 0.0);
    for l in 0..span {
        for i in 0..n {
            let t = &taps[i * span + l];
            let fm = f[(i + n - shift) % n];
            let gm = g[(i + 2 * n - shift - l) % n];
            lin += t.h1_rsi * fm * gm * tw[(kk - (k_p * l) % kk) % kk];
            // exp(-j2πk'(2n - l)/K)
            let q = (k_p * ((2 * i + kk * span - l) % kk)) % kk;
            img += t.h2_rsi * fm * gm.conj() * tw[(kk - q) % kk];
        }
    }
    Ok(DlcTerms {
        r_dlc: d * lin,
        r_dlc_i: d.conj() * img,
    })
}

/// [`dlc_terms`] for the whole grid in flat-index order.
pub fn dlc_grid(cfg: &LinkConfig, real: &FrameRealization) -> Result<Vec<DlcTerms>> {
    let taps = equivalent_tap_table(cfg, real)?;
    Ok(dlc_grid_with(cfg, real, &taps))
}

fn dlc_grid_with(cfg: &LinkConfig, real: &FrameRealization, taps: &[EquivalentTaps]) -> Vec<DlcTerms> {
    let grid = &cfg.grid;
    let n = grid.n();
    let kk = grid.subcarriers();
    let span = cfg.span();
    let g = cfg.g_tx.taps();
    let f = cfg.f_rx.taps();
    let tw = twiddles(kk);
    let lin_gain = self_gains(cfg, taps, |t| t.h1_rsi);
    let mut out = vec![DlcTerms::default(); n];
    let mut folded = vec![C64::new(0.0, 0.0); kk];
    for m in 0..grid.subsymbols() {
        let shift = m * kk;
        // Image replica: fold by (2n - l) mod K, then evaluate each k'.
        folded.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for l in 0..span {
            for i in 0..n {
                let t = &taps[i * span + l];
                let term = t.h2_rsi * f[(i + n - shift) % n] * g[(i + 2 * n - shift - l) % n].conj();
                folded[(2 * i + kk * span - l) % kk] += term;
            }
        }
        for k in 0..kk {
            let idx = grid.index(k, m);
            let img: C64 = folded
                .iter()
                .enumerate()
                .map(|(r, v)| v * tw[(kk - (k * r) % kk) % kk])
                .sum();
            let d = real.d_si.data()[idx];
            out[idx] = DlcTerms {
                r_dlc: d * lin_gain[idx],
                r_dlc_i: d.conj() * img,
            };
        }
    }
    out
}

/// Cancelled demodulator outputs in flat-index order.
pub fn apply_cancellation(
    symbols: &[DecomposedSymbol],
    dlc: &[DlcTerms],
    mode: CancellationMode,
) -> Vec<C64> {
    symbols
        .iter()
        .zip(dlc)
        .map(|(s, t)| match mode {
            CancellationMode::AlcOnly => s.total(),
            CancellationMode::Dlc => s.total() - t.r_dlc,
            CancellationMode::CDlc => s.total() - t.r_dlc - t.r_dlc_i,
        })
        .collect()
}

/// Received frame built by running the physical chain (TX mixer, linear
/// convolution over the CP-extended stream, RX mixer, CP removal).
pub fn composite_received(cfg: &LinkConfig, real: &FrameRealization) -> Result<Vec<C64>> {
    cfg.validate()?;
    let grid = &cfg.grid;
    let cp = grid.cp_len();
    let t0 = -(cp as isize);
    let imp = &cfg.impairments;
    let x = add_cp(&modulate_raw(real.d_si.data(), cfg.g_tx.taps(), grid), cp)?;
    let s = add_cp(&modulate_raw(real.d_s.data(), cfg.g_tx.taps(), grid), cp)?;
    let x_iq = apply_tx_iq_at(&x, t0, &imp.tx_mixer, &real.phi_tx)?;
    let si = convolve_causal(&x_iq, &real.h_rsi.h);
    let desired = convolve_causal(&s, &real.h_s.h);
    let y: Vec<C64> = si
        .iter()
        .zip(&desired)
        .zip(&real.noise)
        .map(|((a, b), w)| a + b + w)
        .collect();
    let y_iq = apply_rx_iq_at(&y, t0, &imp.rx_mixer, &real.phi_rx, imp.cfo, grid.subcarriers())?;
    remove_cp(&y_iq, cp)
}

/// Linear convolution truncated to the input length.
fn convolve_causal(x: &[C64], h: &[C64]) -> Vec<C64> {
    (0..x.len())
        .map(|i| {
            h.iter()
                .enumerate()
                .take(i + 1)
                .map(|(l, hl)| hl * x[i - l])
                .sum()
        })
        .collect()
}

/// Quantities tracked by the Monte-Carlo estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quantity {
    /// `|R^SI|²`
    SiAlc,
    /// `|R^SI - R^DLC|²`
    SiDlc,
    /// `|R^SI,im|²`
    SiImAlc,
    /// `|R^SI,im - R^DLC,i|²`
    SiImDlc,
    /// Total residual SI per cancellation mode.
    SiTotalAlc,
    SiTotalDlc,
    SiTotalCDlc,
    /// `|d^ss|²`
    Desired,
    /// `|R^s|²`
    Rs,
    /// `|R^s,im|²`
    RsIm,
    /// `|R^s - d^ss + R^s,im|²`
    Interference,
    /// `|w_eq + w_eq,im|²`
    Noise,
}

impl Quantity {
    pub const ALL: [Quantity; 12] = [
        Self::SiAlc,
        Self::SiDlc,
        Self::SiImAlc,
        Self::SiImDlc,
        Self::SiTotalAlc,
        Self::SiTotalDlc,
        Self::SiTotalCDlc,
        Self::Desired,
        Self::Rs,
        Self::RsIm,
        Self::Interference,
        Self::Noise,
    ];

    pub fn si_total(mode: CancellationMode) -> Self {
        match mode {
            CancellationMode::AlcOnly => Self::SiTotalAlc,
            CancellationMode::Dlc => Self::SiTotalDlc,
            CancellationMode::CDlc => Self::SiTotalCDlc,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

const NQ: usize = Quantity::ALL.len();

fn symbol_powers(s: &DecomposedSymbol, t: &DlcTerms) -> [f64; NQ] {
    let si_dlc = s.r_si - t.r_dlc;
    let si_im_dlc = s.r_si_im - t.r_dlc_i;
    let mut out = [0.0; NQ];
    out[Quantity::SiAlc.slot()] = s.r_si.norm_sqr();
    out[Quantity::SiDlc.slot()] = si_dlc.norm_sqr();
    out[Quantity::SiImAlc.slot()] = s.r_si_im.norm_sqr();
    out[Quantity::SiImDlc.slot()] = si_im_dlc.norm_sqr();
    out[Quantity::SiTotalAlc.slot()] = (s.r_si + s.r_si_im).norm_sqr();
    out[Quantity::SiTotalDlc.slot()] = (si_dlc + s.r_si_im).norm_sqr();
    out[Quantity::SiTotalCDlc.slot()] = (si_dlc + si_im_dlc).norm_sqr();
    out[Quantity::Desired.slot()] = s.d_ss.norm_sqr();
    out[Quantity::Rs.slot()] = s.r_s.norm_sqr();
    out[Quantity::RsIm.slot()] = s.r_s_im.norm_sqr();
    out[Quantity::Interference.slot()] = (s.r_s - s.d_ss + s.r_s_im).norm_sqr();
    out[Quantity::Noise.slot()] = (s.w_eq + s.w_eq_im).norm_sqr();
    out
}

/// Running sums over trials.
#[derive(Clone, Debug)]
struct Accum {
    trials: usize,
    per_symbol: Vec<[f64; NQ]>,
    per_symbol_sq: Vec<[f64; NQ]>,
    grid: [f64; NQ],
    grid_sq: [f64; NQ],
    /// Per mode: sums of A, B, A², B², AB with A = Σ desired, B = Σ (SI_mode + interference).
    ratio: [[f64; 5]; 3],
}

impl Accum {
    fn new(symbols: usize) -> Self {
        Self {
            trials: 0,
            per_symbol: vec![[0.0; NQ]; symbols],
            per_symbol_sq: vec![[0.0; NQ]; symbols],
            grid: [0.0; NQ],
            grid_sq: [0.0; NQ],
            ratio: [[0.0; 5]; 3],
        }
    }

    fn push(&mut self, frame: &SimulatedFrame) {
        self.trials += 1;
        let count = frame.symbols.len() as f64;
        let mut grid_sum = [0.0; NQ];
        for (i, (s, t)) in frame.symbols.iter().zip(&frame.dlc).enumerate() {
            let p = symbol_powers(s, t);
            for q in 0..NQ {
                self.per_symbol[i][q] += p[q];
                self.per_symbol_sq[i][q] += p[q] * p[q];
                grid_sum[q] += p[q];
            }
        }
        for q in 0..NQ {
            let mean = grid_sum[q] / count;
            self.grid[q] += mean;
            self.grid_sq[q] += mean * mean;
        }
        let a = grid_sum[Quantity::Desired.slot()];
        for (mi, mode) in CancellationMode::ALL.iter().enumerate() {
            let b = grid_sum[Quantity::si_total(*mode).slot()]
                + grid_sum[Quantity::Interference.slot()];
            let r = &mut self.ratio[mi];
            r[0] += a;
            r[1] += b;
            r[2] += a * a;
            r[3] += b * b;
            r[4] += a * b;
        }
    }

    fn merge(&mut self, other: &Accum) {
        self.trials += other.trials;
        for (a, b) in self.per_symbol.iter_mut().zip(&other.per_symbol) {
            for q in 0..NQ {
                a[q] += b[q];
            }
        }
        for (a, b) in self.per_symbol_sq.iter_mut().zip(&other.per_symbol_sq) {
            for q in 0..NQ {
                a[q] += b[q];
            }
        }
        for q in 0..NQ {
            self.grid[q] += other.grid[q];
            self.grid_sq[q] += other.grid_sq[q];
        }
        for (a, b) in self.ratio.iter_mut().zip(&other.ratio) {
            for j in 0..5 {
                a[j] += b[j];
            }
        }
    }
}

/// Monte-Carlo power estimates.
#[derive(Clone, Debug)]
pub struct PowerEstimates {
    pub trials: usize,
    pub seed: u64,
    grid: GfdmGrid,
    mean: Vec<[f64; NQ]>,
    std_error: Vec<[f64; NQ]>,
    grid_mean: [f64; NQ],
    grid_std_error: [f64; NQ],
    sir: [(f64, f64); 3],
}

impl PowerEstimates {
    /// Sample mean of `quantity` at `(k', m')`.
    pub fn mean(&self, quantity: Quantity, k: usize, m: usize) -> f64 {
        self.mean[self.grid.index(k, m)][quantity.slot()]
    }

    pub fn std_error(&self, quantity: Quantity, k: usize, m: usize) -> f64 {
        self.std_error[self.grid.index(k, m)][quantity.slot()]
    }

    /// Mean over the whole `(k', m')` grid.
    pub fn grid_mean(&self, quantity: Quantity) -> f64 {
        self.grid_mean[quantity.slot()]
    }

    pub fn grid_std_error(&self, quantity: Quantity) -> f64 {
        self.grid_std_error[quantity.slot()]
    }

    /// Grid-averaged residual SI power for `mode`.
    pub fn residual_si(&self, mode: CancellationMode) -> (f64, f64) {
        let q = Quantity::si_total(mode);
        (self.grid_mean(q), self.grid_std_error(q))
    }

    /// Ratio-of-sums SIR (linear) for `mode` with its delta-method standard error.
    pub fn sir(&self, mode: CancellationMode) -> (f64, f64) {
        let idx = CancellationMode::ALL.iter().position(|m| *m == mode).unwrap();
        self.sir[idx]
    }
}

/// Trials per work unit; fixed so results do not depend on the thread count.
const CHUNK: usize = 32;

/// Independent trials, each with its own ChaCha stream derived from `seed`.
pub fn monte_carlo_powers(cfg: &LinkConfig, trials: usize, seed: u64) -> Result<PowerEstimates> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    cfg.validate()?;
    let symbols = cfg.grid.symbols();
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<Result<Accum>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Accum::new(symbols);
            for trial in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let mut rng = trial_rng(seed, trial as u64);
                let frame = simulate_frame(cfg, &mut rng)?;
                acc.push(&frame);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Accum::new(symbols);
    for p in partial {
        total.merge(&p?);
    }
    Ok(finish(cfg.grid, seed, total))
}

/// RNG for trial `trial` under master seed `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn finish(grid: GfdmGrid, seed: u64, acc: Accum) -> PowerEstimates {
    let t = acc.trials as f64;
    let se = |sum: f64, sq: f64| -> f64 {
        if acc.trials < 2 {
            return f64::NAN;
        }
        let mean = sum / t;
        let var = ((sq - t * mean * mean) / (t - 1.0)).max(0.0);
        (var / t).sqrt()
    };
    let mean = acc
        .per_symbol
        .iter()
        .map(|row| row.map(|v| v / t))
        .collect();
    let std_error = acc
        .per_symbol
        .iter()
        .zip(&acc.per_symbol_sq)
        .map(|(s, sq)| std::array::from_fn(|q| se(s[q], sq[q])))
        .collect();
    let grid_mean = acc.grid.map(|v| v / t);
    let grid_std_error = std::array::from_fn(|q| se(acc.grid[q], acc.grid_sq[q]));
    let sir = acc.ratio.map(|r| {
        let (ma, mb) = (r[0] / t, r[1] / t);
        let ratio = if mb > 0.0 { ma / mb } else { f64::INFINITY };
        let err = if acc.trials < 2 || mb <= 0.0 {
            f64::NAN
        } else {
            // Var(A - R B) from raw moments.
            let var_a = (r[2] - t * ma * ma) / (t - 1.0);
            let var_b = (r[3] - t * mb * mb) / (t - 1.0);
            let cov = (r[4] - t * ma * mb) / (t - 1.0);
            let var = (var_a - 2.0 * ratio * cov + ratio * ratio * var_b).max(0.0);
            (var / t).sqrt() / mb
        };
        (ratio, err)
    });
    PowerEstimates {
        trials: acc.trials,
        seed,
        grid,
        mean,
        std_error,
        grid_mean,
        grid_std_error,
        sir,
    }
}
