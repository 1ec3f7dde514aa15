//! GFDM frame geometry, prototype/receiver pulses, modulation and demodulation.
//!
//! A frame carries `K` subcarriers by `M` subsymbols in `N = M*K` samples.
//! Every transmit pulse is a circularly shifted and subcarrier-modulated copy
//! of one prototype `g[n]`:
//!
//! ```text
//! x[n] = sum_k sum_m d[k,m] g[(n - mK) mod N] exp(j2πkn/K)
//! ```
//!
//! Demodulation applies the receiver filter `f[n]` *without* conjugation,
//! `d̂[k',m'] = sum_n y[n] f[(n - m'K) mod N] exp(-j2πk'n/K)`, so the matched
//! filter is `f = g*`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Frame geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GfdmGrid {
    k: usize,
    m: usize,
    cp_len: usize,
}

impl GfdmGrid {
    pub fn new(subcarriers: usize, subsymbols: usize, cp_len: usize) -> Result<Self> {
        if subcarriers == 0 || subsymbols == 0 {
            return Err(Error::InvalidGrid(format!(
                "K={subcarriers} and M={subsymbols} must both be positive"
            )));
        }
        let n = subcarriers * subsymbols;
        if cp_len > n {
            return Err(Error::CpTooLong { cp_len, n });
        }
        Ok(Self {
            k: subcarriers,
            m: subsymbols,
            cp_len,
        })
    }

    pub fn subcarriers(&self) -> usize {
        self.k
    }

    pub fn subsymbols(&self) -> usize {
        self.m
    }

    /// Samples per frame, `M*K`.
    pub fn n(&self) -> usize {
        self.k * self.m
    }

    pub fn cp_len(&self) -> usize {
        self.cp_len
    }

    /// Flat index of symbol `(k, m)`; subcarrier varies fastest.
    pub fn index(&self, k: usize, m: usize) -> usize {
        m * self.k + k
    }

    /// Number of data symbols per frame (equals `n()`).
    pub fn symbols(&self) -> usize {
        self.n()
    }

    /// Iterates `(k, m)` in flat-index order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.m).flat_map(move |m| (0..self.k).map(move |k| (k, m)))
    }

    pub(crate) fn check_position(&self, k: usize, m: usize) -> Result<()> {
        if k >= self.k || m >= self.m {
            return Err(Error::IndexOutOfRange(format!(
                "(k={k}, m={m}) outside K={}, M={}",
                self.k, self.m
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseKind {
    Rrc { rolloff: f64 },
    Rectangular,
    Custom,
}

/// Unit-energy length-`N` transmit prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeFilter {
    taps: Vec<C64>,
    kind: PulseKind,
}

impl PrototypeFilter {
    /// Builds a root-raised-cosine or rectangular prototype for `grid`.
    ///
    /// The RRC is evaluated at one sample per index with a symbol period of
    /// `K` samples, centred on `n = 0` and wrapped circularly onto `N` samples
    /// (indices above `N/2` carry negative time offsets).
    pub fn build(grid: &GfdmGrid, kind: PulseKind) -> Result<Self> {
        let n = grid.n();
        let k = grid.subcarriers();
        let taps = match kind {
            PulseKind::Rrc { rolloff } => {
                if !(0.0..=1.0).contains(&rolloff) || rolloff.is_nan() {
                    return Err(Error::InvalidRolloff(rolloff));
                }
                (0..n)
                    .map(|i| {
                        let offset = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                        C64::new(rrc_impulse(offset / k as f64, rolloff), 0.0)
                    })
                    .collect()
            }
            PulseKind::Rectangular => {
                let amp = 1.0 / (k as f64).sqrt();
                (0..n)
                    .map(|i| C64::new(if i < k { amp } else { 0.0 }, 0.0))
                    .collect()
            }
            PulseKind::Custom => {
                return Err(Error::InvalidParameter(
                    "custom prototypes are built with PrototypeFilter::custom".into(),
                ))
            }
        };
        Self::normalized(taps, kind)
    }

    pub fn rrc(grid: &GfdmGrid, rolloff: f64) -> Result<Self> {
        Self::build(grid, PulseKind::Rrc { rolloff })
    }

    pub fn rectangular(grid: &GfdmGrid) -> Result<Self> {
        Self::build(grid, PulseKind::Rectangular)
    }

    /// Energy-normalises arbitrary taps.
    pub fn custom(taps: Vec<C64>) -> Result<Self> {
        Self::normalized(taps, PulseKind::Custom)
    }

    fn normalized(mut taps: Vec<C64>, kind: PulseKind) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidGrid("prototype must have N > 0 taps".into()));
        }
        let energy: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
        if !(energy > 0.0) || !energy.is_finite() {
            return Err(Error::InvalidParameter(
                "prototype has zero or non-finite energy".into(),
            ));
        }
        let scale = energy.sqrt().recip();
        taps.iter_mut().for_each(|t| *t *= scale);
        Ok(Self { taps, kind })
    }

    pub fn taps(&self) -> &[C64] {
        &self.taps
    }

    pub fn kind(&self) -> PulseKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t.norm_sqr()).sum()
    }
}

/// Root-raised-cosine impulse response at time `t` in symbol periods.
fn rrc_impulse(t: f64, alpha: f64) -> f64 {
    const EPS: f64 = 1e-9;
    if t.abs() < EPS {
        return 1.0 - alpha + 4.0 * alpha / PI;
    }
    if alpha == 0.0 {
        return (PI * t).sin() / (PI * t);
    }
    let x = 4.0 * alpha * t;
    if (1.0 - x * x).abs() < EPS {
        let q = PI / (4.0 * alpha);
        return alpha / 2f64.sqrt() * ((1.0 + 2.0 / PI) * q.sin() + (1.0 - 2.0 / PI) * q.cos());
    }
    ((PI * t * (1.0 - alpha)).sin() + x * (PI * t * (1.0 + alpha)).cos())
        / (PI * t * (1.0 - x * x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrigin {
    Mf,
    Zf,
    Optimal,
    Custom,
}

/// Length-`N` receive filter applied unconjugated by [`demodulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReceiverFilter {
    taps: Vec<C64>,
    origin: FilterOrigin,
}

impl ReceiverFilter {
    pub fn new(taps: Vec<C64>, origin: FilterOrigin) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidParameter("receiver filter is empty".into()));
        }
        let mut filter = Self { taps, origin };
        if origin == FilterOrigin::Optimal {
            let norm = filter.norm();
            if norm == 0.0 {
                return Err(Error::InvalidParameter("optimal filter has zero norm".into()));
            }
            filter.taps.iter_mut().for_each(|t| *t /= norm);
        }
        Ok(filter)
    }

    pub fn taps(&self) -> &[C64] {
        &self.taps
    }

    pub fn origin(&self) -> FilterOrigin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.taps.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// `K x M` grid of data symbols, stored subcarrier-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolFrame {
    data: Vec<C64>,
    symbol_energy: f64,
}

impl SymbolFrame {
    pub fn new(grid: &GfdmGrid, data: Vec<C64>, symbol_energy: f64) -> Result<Self> {
        if data.len() != grid.symbols() {
            return Err(Error::DimensionMismatch {
                expected: grid.symbols(),
                got: data.len(),
            });
        }
        Ok(Self {
            data,
            symbol_energy,
        })
    }

    pub fn zeros(grid: &GfdmGrid) -> Self {
        Self {
            data: vec![C64::new(0.0, 0.0); grid.symbols()],
            symbol_energy: 0.0,
        }
    }

    /// i.i.d. 16-QAM symbols with average energy `p_d`.
    pub fn random_qam16<R: Rng + ?Sized>(grid: &GfdmGrid, p_d: f64, rng: &mut R) -> Self {
        const LEVELS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
        let scale = (p_d / 10.0).sqrt();
        let data = (0..grid.symbols())
            .map(|_| {
                let re = LEVELS[rng.random_range(0..4)];
                let im = LEVELS[rng.random_range(0..4)];
                C64::new(re, im) * scale
            })
            .collect();
        Self {
            data,
            symbol_energy: p_d,
        }
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn symbol_energy(&self) -> f64 {
        self.symbol_energy
    }

    pub fn get(&self, grid: &GfdmGrid, k: usize, m: usize) -> C64 {
        self.data[grid.index(k, m)]
    }

    pub fn set(&mut self, grid: &GfdmGrid, k: usize, m: usize, value: C64) {
        self.data[grid.index(k, m)] = value;
    }
}

/// `exp(j2πq/K)` for `q = 0..K`.
pub(crate) fn twiddles(k: usize) -> Vec<C64> {
    (0..k)
        .map(|q| C64::from_polar(1.0, 2.0 * PI * q as f64 / k as f64))
        .collect()
}

/// `output[n] = pulse[(n - mK) mod N]`.
pub fn circular_shift(pulse: &[C64], grid: &GfdmGrid, m: usize) -> Result<Vec<C64>> {
    if m >= grid.subsymbols() {
        return Err(Error::IndexOutOfRange(format!(
            "subsymbol {m} outside M={}",
            grid.subsymbols()
        )));
    }
    check_len(pulse.len(), grid.n())?;
    let n = grid.n();
    let shift = m * grid.subcarriers();
    Ok((0..n).map(|i| pulse[(i + n - shift) % n]).collect())
}

/// Transmit pulse of symbol `(k, m)`: `g[(n - mK) mod N] exp(j2πkn/K)`.
pub fn modulated_pulse(g: &[C64], grid: &GfdmGrid, k: usize, m: usize) -> Vec<C64> {
    let n = grid.n();
    let kk = grid.subcarriers();
    let tw = twiddles(kk);
    let shift = m * kk;
    (0..n)
        .map(|i| g[(i + n - shift) % n] * tw[(k * i) % kk])
        .collect()
}

pub fn modulate(frame: &SymbolFrame, g: &PrototypeFilter, grid: &GfdmGrid) -> Result<Vec<C64>> {
    check_len(frame.data.len(), grid.symbols())?;
    check_len(g.len(), grid.n())?;
    Ok(modulate_raw(&frame.data, g.taps(), grid))
}

/// Modulation over raw symbol and pulse slices; lengths must already match.
pub(crate) fn modulate_raw(data: &[C64], g: &[C64], grid: &GfdmGrid) -> Vec<C64> {
    let n = grid.n();
    let kk = grid.subcarriers();
    let tw = twiddles(kk);
    let mut x = vec![C64::new(0.0, 0.0); n];
    let mut per_phase = vec![C64::new(0.0, 0.0); kk];
    for m in 0..grid.subsymbols() {
        let symbols = &data[m * kk..(m + 1) * kk];
        // Subcarrier sum depends on n only through n mod K.
        for (r, slot) in per_phase.iter_mut().enumerate() {
            *slot = symbols
                .iter()
                .enumerate()
                .map(|(k, d)| d * tw[(k * r) % kk])
                .sum();
        }
        let shift = m * kk;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += g[(i + n - shift) % n] * per_phase[i % kk];
        }
    }
    x
}

/// Single-symbol demodulation `sum_n y[n] f[(n - m'K) mod N] exp(-j2πk'n/K)`.
pub fn demodulate(
    signal: &[C64],
    f: &ReceiverFilter,
    k_p: usize,
    m_p: usize,
    grid: &GfdmGrid,
) -> Result<C64> {
    grid.check_position(k_p, m_p)?;
    check_len(signal.len(), grid.n())?;
    check_len(f.len(), grid.n())?;
    let n = grid.n();
    let kk = grid.subcarriers();
    let tw = twiddles(kk);
    let shift = m_p * kk;
    Ok((0..n)
        .map(|i| signal[i] * f.taps[(i + n - shift) % n] * tw[(kk - (k_p * i) % kk) % kk])
        .sum())
}

/// Demodulates every `(k', m')`, returned in flat-index order.
pub fn demodulate_all(signal: &[C64], f: &ReceiverFilter, grid: &GfdmGrid) -> Result<Vec<C64>> {
    check_len(signal.len(), grid.n())?;
    check_len(f.len(), grid.n())?;
    Ok(demodulate_raw(signal, f.taps(), grid))
}

pub(crate) fn demodulate_raw(signal: &[C64], f: &[C64], grid: &GfdmGrid) -> Vec<C64> {
    let n = grid.n();
    let kk = grid.subcarriers();
    let tw = twiddles(kk);
    let mut out = vec![C64::new(0.0, 0.0); n];
    let mut folded = vec![C64::new(0.0, 0.0); kk];
    for m in 0..grid.subsymbols() {
        folded.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        let shift = m * kk;
        for i in 0..n {
            folded[i % kk] += signal[i] * f[(i + n - shift) % n];
        }
        for k in 0..kk {
            out[m * kk + k] = folded
                .iter()
                .enumerate()
                .map(|(r, v)| v * tw[(kk - (k * r) % kk) % kk])
                .sum();
        }
    }
    out
}

pub fn add_cp(signal: &[C64], cp_len: usize) -> Result<Vec<C64>> {
    let n = signal.len();
    if cp_len > n {
        return Err(Error::CpTooLong { cp_len, n });
    }
    let mut out = Vec::with_capacity(n + cp_len);
    out.extend_from_slice(&signal[n - cp_len..]);
    out.extend_from_slice(signal);
    Ok(out)
}

pub fn remove_cp(signal: &[C64], cp_len: usize) -> Result<Vec<C64>> {
    if cp_len > signal.len() {
        return Err(Error::CpTooLong {
            cp_len,
            n: signal.len(),
        });
    }
    Ok(signal[cp_len..].to_vec())
}

pub fn mf_receiver(g: &PrototypeFilter) -> ReceiverFilter {
    ReceiverFilter {
        taps: g.taps().iter().map(|t| t.conj()).collect(),
        origin: FilterOrigin::Mf,
    }
}

/// `N x N` modulation matrix; column `index(k, m)` is the pulse of symbol `(k, m)`.
pub fn modulation_matrix(g: &PrototypeFilter, grid: &GfdmGrid) -> DMatrix<C64> {
    let n = grid.n();
    let mut a = DMatrix::zeros(n, n);
    for (k, m) in grid.positions() {
        let col = modulated_pulse(g.taps(), grid, k, m);
        a.set_column(grid.index(k, m), &nalgebra::DVector::from_vec(col));
    }
    a
}

/// Zero-forcing receiver: row `(0, 0)` of the inverse modulation matrix.
///
/// The remaining rows are checked against the shifted/modulated copies of that
/// row; a mismatch is reported as [`Error::NonStationaryInverse`].
pub fn zf_receiver(g: &PrototypeFilter, grid: &GfdmGrid) -> Result<ReceiverFilter> {
    check_len(g.len(), grid.n())?;
    let a = modulation_matrix(g, grid);
    let inv = a.try_inverse().ok_or(Error::SingularModulation)?;
    if inv.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::SingularModulation);
    }
    let n = grid.n();
    let taps: Vec<C64> = (0..n).map(|i| inv[(0, i)]).collect();
    let peak = taps.iter().map(|t| t.norm()).fold(0.0, f64::max);

    let kk = grid.subcarriers();
    let tw = twiddles(kk);
    let mut deviation: f64 = 0.0;
    for (k, m) in grid.positions() {
        let row = grid.index(k, m);
        for i in 0..n {
            let expected = taps[(i + n - m * kk) % n] * tw[(kk - (k * i) % kk) % kk];
            deviation = deviation.max((inv[(row, i)] - expected).norm());
        }
    }
    if deviation > 1e-8 * peak.max(1.0) {
        return Err(Error::NonStationaryInverse(deviation));
    }
    Ok(ReceiverFilter {
        taps,
        origin: FilterOrigin::Zf,
    })
}

/// 2-norm condition number of the modulation matrix.
pub fn modulation_condition_number(g: &PrototypeFilter, grid: &GfdmGrid) -> f64 {
    let sv = modulation_matrix(g, grid).singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Diagonal subcarrier mapping `S_k = diag(exp(-j2πkn/K))`.
pub fn subcarrier_mapping(grid: &GfdmGrid, k: usize) -> DMatrix<C64> {
    let n = grid.n();
    let kk = grid.subcarriers();
    let tw = twiddles(kk);
    DMatrix::from_fn(n, n, |r, c| {
        if r == c {
            tw[(kk - (k * r) % kk) % kk]
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Permutation matrix shifting a length-`N` vector circularly by `mK` samples.
pub fn shift_matrix(grid: &GfdmGrid, m: usize) -> DMatrix<C64> {
    let n = grid.n();
    let shift = (m * grid.subcarriers()) % n;
    DMatrix::from_fn(n, n, |r, c| {
        if (r + n - shift) % n == c {
            C64::new(1.0, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
        (0..n)
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect()
    }

    fn max_diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn grid_rejects_degenerate_shapes() {
        assert!(GfdmGrid::new(0, 5, 0).is_err());
        assert!(GfdmGrid::new(4, 1, 5).is_err());
        let grid = GfdmGrid::new(32, 5, 4).unwrap();
        assert_eq!(grid.n(), 160);
    }

    #[test]
    fn rectangular_prototype_is_flat() {
        let grid = GfdmGrid::new(4, 1, 0).unwrap();
        let g = PrototypeFilter::rectangular(&grid).unwrap();
        for t in g.taps() {
            assert!((t - c(0.5)).norm() < 1e-15);
        }
    }

    #[test]
    fn rrc_has_unit_energy_and_rejects_bad_rolloff() {
        let grid = GfdmGrid::new(32, 5, 4).unwrap();
        let g = PrototypeFilter::rrc(&grid, 0.1).unwrap();
        assert_eq!(g.len(), 160);
        assert!((g.energy() - 1.0).abs() < 1e-12);
        assert!(matches!(
            PrototypeFilter::rrc(&grid, 1.5),
            Err(Error::InvalidRolloff(_))
        ));
        assert!(PrototypeFilter::rrc(&grid, -0.1).is_err());
    }

    #[test]
    fn rrc_singular_points_are_finite() {
        // t = 1/(4α) falls exactly on a sample for K=32, α=0.1 (n = 80).
        for &alpha in &[0.0, 0.1, 0.25, 0.5, 1.0] {
            let grid = GfdmGrid::new(32, 5, 0).unwrap();
            let g = PrototypeFilter::rrc(&grid, alpha).unwrap();
            assert!(g.taps().iter().all(|t| t.re.is_finite()));
        }
        let left = rrc_impulse(2.5 - 1e-7, 0.1);
        let mid = rrc_impulse(2.5, 0.1);
        assert!((left - mid).abs() < 1e-5);
    }

    #[test]
    fn circular_shift_by_one_subsymbol() {
        let grid = GfdmGrid::new(2, 2, 0).unwrap();
        let p = vec![c(1.0), c(2.0), c(3.0), c(4.0)];
        assert_eq!(circular_shift(&p, &grid, 0).unwrap(), p);
        assert_eq!(
            circular_shift(&p, &grid, 1).unwrap(),
            vec![c(3.0), c(4.0), c(1.0), c(2.0)]
        );
        assert!(circular_shift(&p, &grid, 2).is_err());
    }

    #[test]
    fn circular_shift_matches_permutation_matrix() {
        let grid = GfdmGrid::new(32, 5, 0).unwrap();
        let g = PrototypeFilter::rrc(&grid, 0.1).unwrap();
        let shifted = circular_shift(g.taps(), &grid, 3).unwrap();
        let via_matrix = shift_matrix(&grid, 3) * nalgebra::DVector::from_column_slice(g.taps());
        assert!(max_diff(&shifted, via_matrix.as_slice()) < 1e-15);
        let perm = shift_matrix(&grid, 3);
        for r in 0..grid.n() {
            let ones = perm.row(r).iter().filter(|v| **v == c(1.0)).count();
            assert_eq!(ones, 1);
        }
    }

    #[test]
    fn single_symbol_modulates_to_prototype() {
        let grid = GfdmGrid::new(8, 3, 0).unwrap();
        let g = PrototypeFilter::rrc(&grid, 0.3).unwrap();
        let mut frame = SymbolFrame::zeros(&grid);
        frame.set(&grid, 0, 0, c(1.0));
        let x = modulate(&frame, &g, &grid).unwrap();
        assert!(max_diff(&x, g.taps()) < 1e-15);
    }

    #[test]
    fn ofdm_case_is_scaled_inverse_dft() {
        let grid = GfdmGrid::new(4, 1, 0).unwrap();
        let g = PrototypeFilter::rectangular(&grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_vec(4, &mut rng);
        let frame = SymbolFrame::new(&grid, d.clone(), 1.0).unwrap();
        let x = modulate(&frame, &g, &grid).unwrap();
        for n in 0..4 {
            let idft: C64 = (0..4)
                .map(|k| d[k] * C64::from_polar(1.0, 2.0 * PI * (k * n) as f64 / 4.0))
                .sum();
            assert!((x[n] - idft * 0.5).norm() < 1e-14);
        }
        let mf = mf_receiver(&g);
        let back = demodulate_all(&x, &mf, &grid).unwrap();
        assert!(max_diff(&back, &d) < 1e-14);
    }

    #[test]
    fn modulation_equals_matrix_product() {
        let grid = GfdmGrid::new(32, 5, 0).unwrap();
        let g = PrototypeFilter::rrc(&grid, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame = SymbolFrame::random_qam16(&grid, 1.0, &mut rng);
        let x = modulate(&frame, &g, &grid).unwrap();
        // Column-by-column assembly from the defining sum.
        let n = grid.n();
        let mut expected = vec![c(0.0); n];
        for k in 0..32 {
            for m in 0..5 {
                let d = frame.get(&grid, k, m);
                for i in 0..n {
                    let gm = g.taps()[(i + n - m * 32) % n];
                    let ph = C64::from_polar(1.0, 2.0 * PI * (k * i) as f64 / 32.0);
                    expected[i] += d * gm * ph;
                }
            }
        }
        assert!(max_diff(&x, &expected) < 1e-12);
    }

    #[test]
    fn cp_round_trip() {
        let x = vec![c(1.0), c(2.0), c(3.0), c(4.0)];
        let with = add_cp(&x, 2).unwrap();
        assert_eq!(with, vec![c(3.0), c(4.0), c(1.0), c(2.0), c(3.0), c(4.0)]);
        assert_eq!(remove_cp(&with, 2).unwrap(), x);
        assert!(add_cp(&x, 5).is_err());
    }

    #[test]
    fn cp_turns_linear_convolution_circular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_vec(16, &mut rng);
        let h = random_vec(5, &mut rng);
        let tx = add_cp(&x, 4).unwrap();
        let mut linear = vec![c(0.0); tx.len() + h.len() - 1];
        for (i, xi) in tx.iter().enumerate() {
            for (l, hl) in h.iter().enumerate() {
                linear[i + l] += xi * hl;
            }
        }
        let rx = remove_cp(&linear[..tx.len()], 4).unwrap();
        let circular: Vec<C64> = (0..16)
            .map(|n| (0..5).map(|l| h[l] * x[(n + 16 - l) % 16]).sum())
            .collect();
        assert!(max_diff(&rx, &circular) < 1e-13);
    }

    #[test]
    fn demodulation_matches_mapping_matrices() {
        let grid = GfdmGrid::new(8, 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = ReceiverFilter::new(random_vec(24, &mut rng), FilterOrigin::Custom).unwrap();
        let y = random_vec(24, &mut rng);
        let all = demodulate_all(&y, &f, &grid).unwrap();
        for _ in 0..10 {
            let k = rng.random_range(0..8);
            let m = rng.random_range(0..3);
            let mapped = subcarrier_mapping(&grid, k)
                * shift_matrix(&grid, m)
                * nalgebra::DVector::from_column_slice(f.taps());
            let inner: C64 = y.iter().zip(mapped.iter()).map(|(a, b)| a * b).sum();
            let single = demodulate(&y, &f, k, m, &grid).unwrap();
            assert!((single - inner).norm() < 1e-12);
            assert!((all[grid.index(k, m)] - inner).norm() < 1e-12);
        }
    }

    #[test]
    fn mapping_matrix_entries_are_unit_modulus() {
        let grid = GfdmGrid::new(8, 2, 0).unwrap();
        let s = subcarrier_mapping(&grid, 3);
        for r in 0..16 {
            assert!((s[(r, r)].norm() - 1.0).abs() < 1e-15);
            let expected = C64::from_polar(1.0, -2.0 * PI * (3 * r) as f64 / 8.0);
            assert!((s[(r, r)] - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn zf_equals_mf_for_orthogonal_ofdm() {
        let grid = GfdmGrid::new(4, 1, 0).unwrap();
        let g = PrototypeFilter::rectangular(&grid).unwrap();
        let zf = zf_receiver(&g, &grid).unwrap();
        let mf = mf_receiver(&g);
        assert!(max_diff(zf.taps(), mf.taps()) < 1e-14);
    }

    #[test]
    fn zf_inverts_clean_gfdm() {
        let grid = GfdmGrid::new(32, 5, 0).unwrap();
        let g = PrototypeFilter::rrc(&grid, 0.1).unwrap();
        let zf = zf_receiver(&g, &grid).unwrap();
        // signal = g, i.e. d[0,0] = 1.
        let d00 = demodulate(g.taps(), &zf, 0, 0, &grid).unwrap();
        assert!((d00 - c(1.0)).norm() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = SymbolFrame::random_qam16(&grid, 1.0, &mut rng);
        let x = modulate(&frame, &g, &grid).unwrap();
        let back = demodulate_all(&x, &zf, &grid).unwrap();
        assert!(max_diff(&back, frame.data()) < 1e-9);
    }

    #[test]
    fn zf_exists_for_wide_rolloff() {
        let grid = GfdmGrid::new(8, 3, 0).unwrap();
        let g = PrototypeFilter::rrc(&grid, 0.9).unwrap();
        let cond = modulation_condition_number(&g, &grid);
        assert!(cond.is_finite() && cond >= 1.0);
        let zf = zf_receiver(&g, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = SymbolFrame::random_qam16(&grid, 1.0, &mut rng);
        let x = modulate(&frame, &g, &grid).unwrap();
        let back = demodulate_all(&x, &zf, &grid).unwrap();
        assert!(max_diff(&back, frame.data()) < 1e-9);
    }

    #[test]
    fn zf_reports_singular_prototype() {
        // A single-sample pulse with M=2 cannot separate the two subsymbols' phases
        // when the pulse is zero over half the frame... use an all-zero-but-one
        // periodic pulse that makes columns collide.
        let grid = GfdmGrid::new(2, 2, 0).unwrap();
        let g = PrototypeFilter::custom(vec![c(1.0), c(0.0), c(1.0), c(0.0)]).unwrap();
        assert!(matches!(
            zf_receiver(&g, &grid),
            Err(Error::SingularModulation)
        ));
    }

    #[test]
    fn qam16_average_energy() {
        let grid = GfdmGrid::new(32, 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut total = 0.0;
        let mut count = 0usize;
        while count < 20_000 {
            let frame = SymbolFrame::random_qam16(&grid, 2.5, &mut rng);
            total += frame.data().iter().map(|d| d.norm_sqr()).sum::<f64>();
            count += grid.symbols();
        }
        let mean = total / count as f64;
        assert!((mean / 2.5 - 1.0).abs() < 0.02);
    }

    #[test]
    fn dimension_errors() {
        let grid = GfdmGrid::new(4, 2, 0).unwrap();
        let g = PrototypeFilter::rectangular(&grid).unwrap();
        let mf = mf_receiver(&g);
        assert!(SymbolFrame::new(&grid, vec![c(0.0); 3], 1.0).is_err());
        assert!(demodulate(&[c(0.0); 7], &mf, 0, 0, &grid).is_err());
        assert!(demodulate(&[c(0.0); 8], &mf, 4, 0, &grid).is_err());
    }
}
