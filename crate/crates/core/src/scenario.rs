//! Scenario files, sweep execution, result emission and calibration against
//! reference curves.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analytics::{AnalyticsConfig, ClosedForm, ExclusionSet, SirBreakdown};
use crate::error::{Error, Result};
use crate::impairments::{coeffs_from_irr, CfoParam, ChannelPdp, IqMixerCoeffs, PdpTap};
use crate::link::{monte_carlo_powers, CancellationMode, ImpairmentConfig, LinkConfig, PowerEstimates, Quantity};
use crate::optimizer::{assemble_problem_for, solve, OptimalFilter};
use crate::waveform::{
    mf_receiver, zf_receiver, FilterOrigin, GfdmGrid, PrototypeFilter, PulseKind, ReceiverFilter, C64,
};

pub const CSV_HEADER: &str =
    "scenario,sweep_param,sweep_value,receiver,mode,engine,metric,value_db,std_error_db,trials,seed";

const DEFAULT_SAMPLE_RATE_HZ: f64 = 15.36e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub subcarriers: usize,
    pub subsymbols: usize,
    pub cp_len: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            subcarriers: 32,
            subsymbols: 5,
            cp_len: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpairmentSpec {
    pub beta_hz: f64,
    pub ts_s: f64,
    pub epsilon: f64,
    /// Image rejection ratio of both mixers; `null` means ideal mixers.
    pub irr_db: Option<f64>,
    /// Per-mixer overrides of `irr_db`.
    pub tx_irr_db: Option<f64>,
    pub rx_irr_db: Option<f64>,
    pub image_phase_rad: f64,
    pub noise_power: f64,
}

impl Default for ImpairmentSpec {
    fn default() -> Self {
        Self {
            beta_hz: 0.0,
            ts_s: 1.0 / DEFAULT_SAMPLE_RATE_HZ,
            epsilon: 0.0,
            irr_db: None,
            tx_irr_db: None,
            rx_irr_db: None,
            image_phase_rad: 0.0,
            noise_power: 0.0,
        }
    }
}

impl ImpairmentSpec {
    fn mixer(&self, irr_db: Option<f64>) -> IqMixerCoeffs {
        match irr_db.or(self.irr_db) {
            Some(irr) => coeffs_from_irr(irr, self.image_phase_rad),
            None => IqMixerCoeffs::ideal(),
        }
    }

    pub fn to_config(&self) -> ImpairmentConfig {
        ImpairmentConfig {
            beta_hz: self.beta_hz,
            ts_s: self.ts_s,
            cfo: CfoParam(self.epsilon),
            tx_mixer: self.mixer(self.tx_irr_db),
            rx_mixer: self.mixer(self.rx_irr_db),
            noise_power: self.noise_power,
        }
    }
}

fn default_si_pdp() -> ChannelPdp {
    ChannelPdp::new(
        [(0, -30.0), (1, -65.0), (2, -70.0), (4, -75.0)]
            .into_iter()
            .map(|(delay, power_db)| PdpTap { delay, power_db })
            .collect(),
    )
    .expect("default profile is valid")
}

fn default_desired_pdp() -> ChannelPdp {
    ChannelPdp::from_db(&[-50.0, -75.0, -80.0, -85.0, -90.0]).expect("default profile is valid")
}

fn default_pulse() -> PulseKind {
    PulseKind::Rrc { rolloff: 0.1 }
}

fn default_p_d() -> f64 {
    1.0
}

/// Link parameters of one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_pulse")]
    pub pulse: PulseKind,
    #[serde(default)]
    pub impairments: ImpairmentSpec,
    #[serde(default = "default_si_pdp")]
    pub si_pdp: ChannelPdp,
    #[serde(default = "default_desired_pdp")]
    pub desired_pdp: ChannelPdp,
    #[serde(default = "default_p_d")]
    pub p_d: f64,
    #[serde(default)]
    pub exclusion: ExclusionSet,
    /// OFDM symbols per frame-equivalent; defaults to the GFDM subsymbol count.
    #[serde(default)]
    pub ofdm_symbols: Option<usize>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            pulse: default_pulse(),
            impairments: ImpairmentSpec::default(),
            si_pdp: default_si_pdp(),
            desired_pdp: default_desired_pdp(),
            p_d: default_p_d(),
            exclusion: ExclusionSet::default(),
            ofdm_symbols: None,
        }
    }
}

impl BaseConfig {
    pub fn grid(&self) -> Result<GfdmGrid> {
        GfdmGrid::new(self.grid.subcarriers, self.grid.subsymbols, self.grid.cp_len)
    }

    pub fn ofdm_symbols(&self) -> usize {
        self.ofdm_symbols.unwrap_or(self.grid.subsymbols)
    }

    /// GFDM link with `f_rx` installed.
    fn gfdm_link(&self, f_rx: impl FnOnce(&PrototypeFilter, &GfdmGrid) -> Result<ReceiverFilter>) -> Result<LinkConfig> {
        let grid = self.grid()?;
        let g = PrototypeFilter::build(&grid, self.pulse)?;
        let f = f_rx(&g, &grid)?;
        self.finish(grid, g, f)
    }

    /// `K`-subcarrier OFDM link: one subsymbol, rectangular prototype, MF receiver.
    pub fn ofdm_link(&self) -> Result<LinkConfig> {
        let grid = GfdmGrid::new(self.grid.subcarriers, 1, self.grid.cp_len)?;
        let g = PrototypeFilter::rectangular(&grid)?;
        let f = mf_receiver(&g);
        self.finish(grid, g, f)
    }

    fn finish(&self, grid: GfdmGrid, g_tx: PrototypeFilter, f_rx: ReceiverFilter) -> Result<LinkConfig> {
        let cfg = LinkConfig {
            grid,
            g_tx,
            f_rx,
            impairments: self.impairments.to_config(),
            pdp_rsi: self.si_pdp.clone(),
            pdp_s: self.desired_pdp.clone(),
            p_d: self.p_d,
            cancellation: CancellationMode::CDlc,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        let imp = &self.impairments;
        if !(imp.beta_hz >= 0.0) || !(imp.ts_s > 0.0) || !imp.epsilon.is_finite() {
            return Err(Error::InvalidParameter(
                "impairments need beta_hz >= 0, ts_s > 0 and finite epsilon".into(),
            ));
        }
        if [imp.irr_db, imp.tx_irr_db, imp.rx_irr_db]
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter("irr_db must be finite".into()));
        }
        if self.ofdm_symbols == Some(0) {
            return Err(Error::InvalidParameter("ofdm_symbols must be >= 1".into()));
        }
        self.gfdm_link(|g, _| Ok(mf_receiver(g)))?;
        self.ofdm_link()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Receiver {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "ZF")]
    Zf,
    #[serde(rename = "OPTIMAL")]
    Optimal,
    #[serde(rename = "OFDM_BASELINE")]
    OfdmBaseline,
}

impl Receiver {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Mf => "MF",
            Self::Zf => "ZF",
            Self::Optimal => "OPTIMAL",
            Self::OfdmBaseline => "OFDM_BASELINE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "ANALYTIC")]
    Analytic,
    #[serde(rename = "MONTE_CARLO")]
    MonteCarlo,
}

impl Engine {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Analytic => "ANALYTIC",
            Self::MonteCarlo => "MONTE_CARLO",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ResidualSiDb,
    SirDb,
    DesiredPowerDb,
}

impl Metric {
    pub fn label(&self) -> &'static str {
        match self {
            Self::ResidualSiDb => "residual_si_db",
            Self::SirDb => "sir_db",
            Self::DesiredPowerDb => "desired_power_db",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Dotted path into `base`; numeric segments index arrays.
    pub path: String,
    pub values: Vec<Value>,
}

fn default_modes() -> Vec<CancellationMode> {
    vec![CancellationMode::CDlc]
}

fn default_receivers() -> Vec<Receiver> {
    vec![Receiver::Zf]
}

fn default_engines() -> Vec<Engine> {
    vec![Engine::Analytic]
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::SirDb]
}

fn default_trials() -> usize {
    1000
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default = "default_modes")]
    pub modes: Vec<CancellationMode>,
    #[serde(default = "default_receivers")]
    pub receivers: Vec<Receiver>,
    #[serde(default = "default_engines")]
    pub engines: Vec<Engine>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Scenario {
    /// Parses and validates a scenario from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(path_label(e.path()), e.inner().to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Canonical JSON form with every default spelled out.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::config("", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        for (field, empty) in [
            ("modes", self.modes.is_empty()),
            ("receivers", self.receivers.is_empty()),
            ("engines", self.engines.is_empty()),
            ("metrics", self.metrics.is_empty()),
        ] {
            if empty {
                return Err(Error::config(field, "must list at least one entry"));
            }
        }
        if self.engines.contains(&Engine::MonteCarlo) && self.trials < 2 {
            return Err(Error::config("trials", "Monte-Carlo needs at least 2 trials"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config("sweep.values", "must not be empty"));
            }
        }
        for i in 0..self.points() {
            let base = self.point_config(i)?;
            base.check().map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::config(self.point_label(i), other.to_string()),
            })?;
        }
        Ok(())
    }

    /// Number of sweep points (1 without a sweep).
    pub fn points(&self) -> usize {
        self.sweep.as_ref().map_or(1, |s| s.values.len())
    }

    pub fn sweep_param(&self) -> &str {
        self.sweep.as_ref().map_or("", |s| s.path.as_str())
    }

    pub fn sweep_value(&self, i: usize) -> Option<&Value> {
        self.sweep.as_ref().map(|s| &s.values[i])
    }

    fn point_label(&self, i: usize) -> String {
        match self.sweep_value(i) {
            Some(v) => format!("{}={}", self.sweep_param(), v),
            None => "base".into(),
        }
    }

    /// `base` with the sweep path set to its `i`-th value.
    pub fn point_config(&self, i: usize) -> Result<BaseConfig> {
        let Some(sweep) = &self.sweep else {
            return Ok(self.base.clone());
        };
        let mut tree = serde_json::to_value(&self.base).map_err(|e| Error::config("base", e.to_string()))?;
        let slot = resolve_path(&mut tree, &sweep.path)?;
        *slot = sweep.values[i].clone();
        let text = tree.to_string();
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            Error::config(
                format!("sweep.values[{i}] at base.{}", path_label(e.path())),
                e.inner().to_string(),
            )
        })
    }
}

fn path_label(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        String::new()
    } else {
        s
    }
}

/// Mutable slot named by a dotted path; the path must already exist.
fn resolve_path<'a>(tree: &'a mut Value, path: &str) -> Result<&'a mut Value> {
    let unresolved = || Error::config("sweep.path", format!("`{path}` does not resolve against base"));
    if path.is_empty() {
        return Err(unresolved());
    }
    let mut node = tree;
    for seg in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(seg).ok_or_else(unresolved)?,
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| unresolved())?;
                items.get_mut(idx).ok_or_else(unresolved)?
            }
            _ => return Err(unresolved()),
        };
    }
    Ok(node)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    Scenario::from_json(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub sweep_param: String,
    pub sweep_value: Option<Value>,
    pub receiver: Receiver,
    pub mode: CancellationMode,
    pub engine: Engine,
    pub metric: Metric,
    pub value_db: f64,
    pub std_error_db: Option<f64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
}

impl ResultRow {
    fn sweep_number(&self) -> Option<f64> {
        self.sweep_value.as_ref().and_then(Value::as_f64)
    }
}

fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Standard error of `10 log10(x)` from that of `x`.
fn se_to_db(mean: f64, se: f64) -> f64 {
    10.0 / std::f64::consts::LN_10 * se / mean
}

/// Per-series evaluation of one receiver filter.
struct Evaluation {
    analytic: Option<SirBreakdown>,
    mc: Option<(PowerEstimates, usize)>,
}

impl Evaluation {
    fn metric(&self, engine: Engine, metric: Metric, mode: CancellationMode) -> (f64, Option<f64>) {
        match engine {
            Engine::Analytic => {
                let b = self.analytic.as_ref().expect("analytic engine evaluated");
                let v = match metric {
                    Metric::ResidualSiDb => b.mean_residual_si(mode),
                    Metric::SirDb => b.sir_aggregate(mode),
                    Metric::DesiredPowerDb => b.mean(|s| s.desired),
                };
                (to_db(v), None)
            }
            Engine::MonteCarlo => {
                let (mc, _) = self.mc.as_ref().expect("Monte-Carlo engine evaluated");
                let (mean, se) = match metric {
                    Metric::ResidualSiDb => mc.residual_si(mode),
                    Metric::SirDb => mc.sir(mode),
                    Metric::DesiredPowerDb => (
                        mc.grid_mean(Quantity::Desired),
                        mc.grid_std_error(Quantity::Desired),
                    ),
                };
                (to_db(mean), Some(se_to_db(mean, se)))
            }
        }
    }
}

fn evaluate(link: &LinkConfig, exclusion: ExclusionSet, engines: &[Engine], trials: usize, seed: u64) -> Result<Evaluation> {
    let analytic = if engines.contains(&Engine::Analytic) {
        let mut cfg = AnalyticsConfig::from_link(link);
        cfg.exclusion = exclusion;
        Some(ClosedForm::new(&cfg)?.breakdown()?)
    } else {
        None
    };
    let mc = if engines.contains(&Engine::MonteCarlo) {
        Some((monte_carlo_powers(link, trials, seed)?, trials))
    } else {
        None
    };
    Ok(Evaluation { analytic, mc })
}

/// Optimal receiver filter for `base` under `mode`.
pub fn optimal_filter(base: &BaseConfig, mode: CancellationMode) -> Result<OptimalFilter> {
    let link = base.gfdm_link(|g, _| Ok(mf_receiver(g)))?;
    let mut cfg = AnalyticsConfig::from_link(&link);
    cfg.exclusion = base.exclusion;
    solve(&assemble_problem_for(&cfg, mode)?)
}

/// Link for `receiver`; `OPTIMAL` needs the filter from [`optimal_filter`].
pub fn receiver_link(base: &BaseConfig, receiver: Receiver, optimal: Option<&ReceiverFilter>) -> Result<LinkConfig> {
    match receiver {
        Receiver::Zf => base.gfdm_link(|g, grid| zf_receiver(g, grid)),
        Receiver::Mf => base.gfdm_link(|g, _| Ok(mf_receiver(g))),
        Receiver::Optimal => {
            let f = optimal.ok_or_else(|| Error::InvalidParameter("optimal filter missing".into()))?;
            base.gfdm_link(|_, _| Ok(f.clone()))
        }
        Receiver::OfdmBaseline => base.ofdm_link(),
    }
}

fn run_point(s: &Scenario, i: usize) -> Result<Vec<ResultRow>> {
    let base = s.point_config(i)?;
    // One evaluation per receiver, except OPTIMAL which is re-derived per mode.
    let mut evals: BTreeMap<(Receiver, Option<usize>), Evaluation> = BTreeMap::new();
    for &receiver in &s.receivers {
        if receiver == Receiver::Optimal {
            for (mi, &mode) in s.modes.iter().enumerate() {
                let opt = optimal_filter(&base, mode)?;
                let link = receiver_link(&base, receiver, Some(&opt.f))?;
                evals.insert((receiver, Some(mi)), evaluate(&link, base.exclusion, &s.engines, s.trials, s.seed)?);
            }
        } else {
            let link = receiver_link(&base, receiver, None)?;
            // OFDM frames carry one symbol, so simulate as many as match the GFDM data volume.
            let trials = if receiver == Receiver::OfdmBaseline {
                s.trials * base.ofdm_symbols()
            } else {
                s.trials
            };
            evals.insert((receiver, None), evaluate(&link, base.exclusion, &s.engines, trials, s.seed)?);
        }
    }
    let mut rows = Vec::new();
    for &receiver in &s.receivers {
        for (mi, &mode) in s.modes.iter().enumerate() {
            let key = (receiver, (receiver == Receiver::Optimal).then_some(mi));
            let eval = &evals[&key];
            for &engine in &s.engines {
                for &metric in &s.metrics {
                    let (value_db, std_error_db) = eval.metric(engine, metric, mode);
                    let mc = engine == Engine::MonteCarlo;
                    rows.push(ResultRow {
                        scenario: s.name.clone(),
                        sweep_param: s.sweep_param().to_string(),
                        sweep_value: s.sweep_value(i).cloned(),
                        receiver,
                        mode,
                        engine,
                        metric,
                        value_db,
                        std_error_db,
                        trials: if mc { eval.mc.as_ref().map(|m| m.1) } else { None },
                        seed: mc.then_some(s.seed),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Evaluates every sweep point; rows follow sweep value, receiver, mode,
/// engine and metric in declared order.
pub fn run_scenario(s: &Scenario) -> Result<Vec<ResultRow>> {
    let per_point: Vec<Result<Vec<ResultRow>>> = (0..s.points())
        .into_par_iter()
        .map(|i| {
            run_point(s, i).map_err(|e| Error::AtSweepPoint {
                point: s.point_label(i),
                source: Box::new(e),
            })
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_point {
        rows.extend(r?);
    }
    Ok(rows)
}

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (5 - exp) as usize, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), format_sig6),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn csv_fields(row: &ResultRow) -> [String; 11] {
    [
        row.scenario.clone(),
        row.sweep_param.clone(),
        row.sweep_value.as_ref().map(format_value).unwrap_or_default(),
        row.receiver.label().into(),
        row.mode.label().into(),
        row.engine.label().into(),
        row.metric.label().into(),
        format_sig6(row.value_db),
        row.std_error_db.map(format_sig6).unwrap_or_default(),
        row.trials.map(|t| t.to_string()).unwrap_or_default(),
        row.seed.map(|s| s.to_string()).unwrap_or_default(),
    ]
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(CSV_HEADER.split(',')).map_err(io)?;
    for row in rows {
        w.write_record(csv_fields(row)).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("no result rows to write".into()));
    }
    write_csv(rows, fs::File::create(path)?)
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one whitespace-separated file per (receiver, mode, engine) series
/// into `dir`; returns the files in series order.
pub fn emit_plotdata(rows: &[ResultRow], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("no result rows to write".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut series: Vec<((Receiver, CancellationMode, Engine), Vec<&ResultRow>)> = Vec::new();
    for row in rows {
        let key = (row.receiver, row.mode, row.engine);
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row),
            None => series.push((key, vec![row])),
        }
    }
    let mut files = Vec::new();
    for ((receiver, mode, engine), members) in series {
        let first = members[0];
        let name = format!(
            "{}__{}__{}__{}.dat",
            file_safe(&first.scenario),
            receiver.label(),
            mode.label(),
            engine.label()
        );
        let path = dir.join(name);
        let mut metrics: Vec<Metric> = Vec::new();
        for r in &members {
            if !metrics.contains(&r.metric) {
                metrics.push(r.metric);
            }
        }
        let mut text = format!(
            "# scenario={} receiver={} mode={} engine={}\n# {}",
            first.scenario,
            receiver.label(),
            mode.label(),
            engine.label(),
            if first.sweep_param.is_empty() { "point" } else { &first.sweep_param }
        );
        for m in &metrics {
            text.push_str(&format!(" {} {}_se", m.label(), m.label()));
        }
        text.push('\n');
        let mut points: Vec<Option<&Value>> = Vec::new();
        for r in &members {
            if !points.contains(&r.sweep_value.as_ref()) {
                points.push(r.sweep_value.as_ref());
            }
        }
        for (pi, point) in points.iter().enumerate() {
            let mut line = point.map(format_value).unwrap_or_else(|| pi.to_string());
            for m in &metrics {
                let r = members
                    .iter()
                    .find(|r| r.sweep_value.as_ref() == *point && r.metric == *m);
                let (v, se) = r.map_or((f64::NAN, None), |r| (r.value_db, r.std_error_db));
                line.push_str(&format!(" {} {}", format_sig6(v), format_sig6(se.unwrap_or(f64::NAN))));
            }
            line.push('\n');
            text.push_str(&line);
        }
        fs::write(&path, text)?;
        files.push(path);
    }
    Ok(files)
}

/// Filter file: `{"n": N, "taps": [[re, im], ...], "origin": "...", "norm": 1.0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterFile {
    pub n: usize,
    pub taps: Vec<[f64; 2]>,
    pub origin: FilterOrigin,
    pub norm: f64,
}

impl FilterFile {
    pub fn from_filter(f: &ReceiverFilter) -> Self {
        Self {
            n: f.len(),
            taps: f.taps().iter().map(|t| [t.re, t.im]).collect(),
            origin: f.origin(),
            norm: f.norm(),
        }
    }

    pub fn to_filter(&self) -> Result<ReceiverFilter> {
        if self.taps.len() != self.n {
            return Err(Error::config(
                "taps",
                format!("{} taps listed, n = {}", self.taps.len(), self.n),
            ));
        }
        ReceiverFilter::new(
            self.taps.iter().map(|t| C64::new(t[0], t[1])).collect(),
            self.origin,
        )
    }
}

/// One digitized reference value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub scenario: String,
    pub sweep_value: f64,
    pub receiver: Receiver,
    pub mode: CancellationMode,
    pub metric: Metric,
    pub value_db: f64,
}

/// Reference values and the scenarios that reproduce them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSet {
    pub scenarios: Vec<Scenario>,
    pub anchors: Vec<Anchor>,
}

pub fn load_anchor_set(path: impl AsRef<Path>) -> Result<AnchorSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("anchor fixture unavailable: {e}")))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let set: AnchorSet = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::config(path_label(e.path()), e.inner().to_string()))?;
    for s in &set.scenarios {
        s.validate()?;
    }
    if set.anchors.is_empty() {
        return Err(Error::config("anchors", "must not be empty"));
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnchorComparison {
    pub anchor: Anchor,
    pub ours_db: f64,
    /// `ours - reference`.
    pub diff_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapComparison {
    pub upper: String,
    pub lower: String,
    pub reference_db: f64,
    pub ours_db: f64,
}

/// Curves meeting at one sweep value of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupComparison {
    pub scenario: String,
    pub sweep_value: f64,
    /// Series labels sorted by descending reference value.
    pub reference_order: Vec<String>,
    pub rank_order_matches: bool,
    /// Gaps between neighbours in `reference_order`.
    pub gaps: Vec<GapComparison>,
    pub max_gap_error_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    /// Median of `ours - reference` over all anchors.
    pub offset_db: f64,
    pub points: Vec<AnchorComparison>,
    pub groups: Vec<GroupComparison>,
}

fn series_label(a: &Anchor) -> String {
    format!("{}/{}/{}", a.receiver.label(), a.mode.label(), a.metric.label())
}

fn same_point(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Compares analytic result rows against reference anchors.
pub fn calibrate(anchors: &[Anchor], rows: &[ResultRow]) -> Result<CalibrationReport> {
    if anchors.is_empty() {
        return Err(Error::config("anchors", "must not be empty"));
    }
    let mut points = Vec::with_capacity(anchors.len());
    for a in anchors {
        let row = rows
            .iter()
            .find(|r| {
                r.scenario == a.scenario
                    && r.receiver == a.receiver
                    && r.mode == a.mode
                    && r.metric == a.metric
                    && r.engine == Engine::Analytic
                    && r.sweep_number().is_some_and(|v| same_point(v, a.sweep_value))
            })
            .ok_or_else(|| {
                Error::config(
                    "anchors",
                    format!(
                        "no result for {} at {}={}",
                        series_label(a),
                        a.scenario,
                        a.sweep_value
                    ),
                )
            })?;
        points.push(AnchorComparison {
            anchor: a.clone(),
            ours_db: row.value_db,
            diff_db: row.value_db - a.value_db,
        });
    }
    let mut diffs: Vec<f64> = points.iter().map(|p| p.diff_db).collect();
    diffs.sort_by(f64::total_cmp);
    let mid = diffs.len() / 2;
    let offset_db = if diffs.len() % 2 == 1 {
        diffs[mid]
    } else {
        0.5 * (diffs[mid - 1] + diffs[mid])
    };

    let mut groups: Vec<GroupComparison> = Vec::new();
    let mut keys: Vec<(String, f64)> = Vec::new();
    for p in &points {
        let key = (p.anchor.scenario.clone(), p.anchor.sweep_value);
        if !keys.iter().any(|k| k.0 == key.0 && same_point(k.1, key.1)) {
            keys.push(key);
        }
    }
    for (scenario, sweep_value) in keys {
        let mut members: Vec<&AnchorComparison> = points
            .iter()
            .filter(|p| p.anchor.scenario == scenario && same_point(p.anchor.sweep_value, sweep_value))
            .collect();
        if members.len() < 2 {
            continue;
        }
        members.sort_by(|a, b| b.anchor.value_db.total_cmp(&a.anchor.value_db));
        let rank_order_matches = members.windows(2).all(|w| w[0].ours_db > w[1].ours_db);
        let gaps: Vec<GapComparison> = members
            .windows(2)
            .map(|w| GapComparison {
                upper: series_label(&w[0].anchor),
                lower: series_label(&w[1].anchor),
                reference_db: w[0].anchor.value_db - w[1].anchor.value_db,
                ours_db: w[0].ours_db - w[1].ours_db,
            })
            .collect();
        let max_gap_error_db = gaps
            .iter()
            .map(|g| (g.ours_db - g.reference_db).abs())
            .fold(0.0, f64::max);
        groups.push(GroupComparison {
            scenario,
            sweep_value,
            reference_order: members.iter().map(|p| series_label(&p.anchor)).collect(),
            rank_order_matches,
            gaps,
            max_gap_error_db,
        });
    }
    Ok(CalibrationReport {
        offset_db,
        points,
        groups,
    })
}

/// Runs the anchor set's scenarios with the analytic engine and calibrates.
pub fn run_calibration(set: &AnchorSet) -> Result<CalibrationReport> {
    let mut rows = Vec::new();
    for s in &set.scenarios {
        let mut s = s.clone();
        s.engines = vec![Engine::Analytic];
        rows.extend(run_scenario(&s)?);
    }
    calibrate(&set.anchors, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(-13.9303038286095), "-13.9303");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(1e-7), "1e-07");
        assert_eq!(format_sig6(10.0), "10");
        assert_eq!(format_sig6(999999.6), "1e+06");
        assert_eq!(format_sig6(f64::INFINITY), "inf");
        assert_eq!(format_sig6(0.0), "0");
    }

    #[test]
    fn minimal_scenario_takes_defaults() {
        let s = Scenario::from_json(r#"{"name":"x","sweep":{"path":"impairments.beta_hz","values":[1,10]}}"#)
            .unwrap();
        assert_eq!(s.base, BaseConfig::default());
        assert_eq!(s.base.grid.subcarriers, 32);
        assert_eq!(s.base.grid.subsymbols, 5);
        assert_eq!(s.base.pulse, PulseKind::Rrc { rolloff: 0.1 });
        assert_eq!(s.base.si_pdp.linear_powers().len(), 5);
        assert_eq!(s.base.si_pdp.linear_powers()[3], 0.0);
        assert!((1.0 / s.base.impairments.ts_s - 15.36e6).abs() < 1e-3);
        assert_eq!(s.points(), 2);
        assert_eq!(s.point_config(1).unwrap().impairments.beta_hz, 10.0);
    }

    #[test]
    fn unresolved_sweep_path_is_named() {
        let err = Scenario::from_json(r#"{"name":"x","sweep":{"path":"impairments.betaa","values":[1]}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("impairments.betaa"), "{err}");
        assert!(err.is_config_error());
    }

    #[test]
    fn schema_violation_names_field() {
        let err = Scenario::from_json(r#"{"name":"x","base":{"impairments":{"beta_hz":"fast"}}}"#).unwrap_err();
        assert!(err.to_string().contains("base.impairments.beta_hz"), "{err}");
        let err = Scenario::from_json(r#"{"name":"x","base":{"grid":{"subcarier":4}}}"#).unwrap_err();
        assert!(err.to_string().contains("base.grid"), "{err}");
    }

    #[test]
    fn every_field_is_sweepable() {
        let s = Scenario::from_json(r#"{"name":"x"}"#).unwrap();
        let tree = serde_json::to_value(&s.base).unwrap();
        let mut leaves = Vec::new();
        fn walk(v: &Value, prefix: String, out: &mut Vec<(String, Value)>) {
            match v {
                Value::Object(m) => m.iter().for_each(|(k, v)| {
                    walk(v, if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }, out)
                }),
                Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| walk(v, format!("{prefix}.{i}"), out)),
                other => out.push((prefix, other.clone())),
            }
        }
        walk(&tree, String::new(), &mut leaves);
        for (path, value) in leaves {
            let mut t = s.clone();
            t.sweep = Some(Sweep { path: path.clone(), values: vec![value] });
            t.point_config(0).unwrap_or_else(|e| panic!("{path}: {e}"));
        }
    }

    #[test]
    fn integral_sweep_values_reach_integer_fields() {
        let s = Scenario::from_json(r#"{"name":"x","sweep":{"path":"grid.subsymbols","values":[3, 7]}}"#).unwrap();
        assert_eq!(s.point_config(1).unwrap().grid.subsymbols, 7);
    }
}
