//! Experiment orchestration: TOML configuration, validation, seeded sweeps
//! and self-describing CSV output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{
    bch_uber_analytic, bch_uber_curve, implied_parity_fraction, ldpc_level_fer, lifetime, multirate_lifetime, p_ecfr,
    p_lbfail, p_parity, table1, DriveConfig, EccConfig, RateSegment,
};
use crate::bch::BchCode;
use crate::calibration::{CalibrationTables, Mechanism, DAY, MONTH, WEEK, YEAR};
use crate::degradation::{ChannelModel, DegradationState};
use crate::ecc::{BchPageCodec, LdpcPageCodec};
use crate::error::{Error, Result};
use crate::flash::BlockConfig;
use crate::ftl::{measure_uniform_wa, warm_comparison, Ftl, FtlConfig, MemoryMedia, Workload, WorkloadKind};
use crate::ldpc::{LdpcCode, LdpcConfig};
use crate::mitigation::{EccEngine, EccEngineSet, WarmConfig};
use crate::recovery::{correct_flow, FlowCodec, FlowConfig, FlowStatus, Superpage};
use crate::voltage::{bin_of, optimal_refs, sample_stratified, sample_vth, CellMode, State, StateDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Characterize,
    EccCurve,
    FlowBench,
    Lifetime,
    Ftl,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Characterize,
        ExperimentKind::EccCurve,
        ExperimentKind::FlowBench,
        ExperimentKind::Lifetime,
        ExperimentKind::Ftl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Characterize => "characterize",
            ExperimentKind::EccCurve => "ecc-curve",
            ExperimentKind::FlowBench => "flow-bench",
            ExperimentKind::Lifetime => "lifetime",
            ExperimentKind::Ftl => "ftl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub chips: usize,
    pub dies: usize,
    pub wordlines: usize,
    pub bitlines: usize,
    pub mode: CellMode,
    pub endurance: u32,
    pub parity: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { chips: 1, dies: 4, wordlines: 8, bitlines: 1023, mode: CellMode::Tlc, endurance: 3000, parity: true }
    }
}

/// Degradation grid. Retention and disturb sweeps sit at `base_pe`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub pe: Vec<u32>,
    pub retention_s: Vec<f64>,
    pub disturbs: Vec<u64>,
    pub base_pe: u32,
    pub extrapolate: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            pe: vec![0, 200, 400, 1000, 2000, 3000],
            retention_s: vec![DAY, WEEK, MONTH, 3.0 * MONTH, YEAR],
            disturbs: vec![1, 1_000, 10_000, 50_000, 100_000],
            base_pe: 2000,
            extrapolate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Bch,
    Ldpc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub bch_m: u32,
    pub bch_t: usize,
    pub ldpc_n: usize,
    pub ldpc_k: usize,
    pub ldpc_column_weight: usize,
    pub ldpc: LdpcConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            kind: CodecKind::Bch,
            bch_m: 10,
            bch_t: 16,
            ldpc_n: 1024,
            ldpc_k: 922,
            ldpc_column_weight: 3,
            ldpc: LdpcConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    pub read_retry: bool,
    pub flow: FlowConfig,
    pub ecc_engines: Vec<EccEngine>,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            read_retry: true,
            flow: FlowConfig::default(),
            ecc_engines: vec![EccEngine { rate: 0.93, max_rber: 1e-3 }, EccEngine { rate: 0.90, max_rber: 5e-3 }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeConfig {
    pub cells_per_state: usize,
    pub rber_cells_per_state: usize,
}

impl Default for CharacterizeConfig {
    fn default() -> Self {
        CharacterizeConfig { cells_per_state: 1_000_000, rber_cells_per_state: 2_500_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EccCurveConfig {
    pub rber: Vec<f64>,
    pub frames: u64,
    /// LDPC read levels; every max-level from hard (1) up to this is reported.
    pub levels: usize,
}

impl Default for EccCurveConfig {
    fn default() -> Self {
        EccCurveConfig { rber: vec![1e-3, 2e-3, 5e-3, 1e-2], frames: 10_000, levels: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowStage {
    pub pe: u32,
    pub retention_s: f64,
    pub disturbs: u64,
}

impl Default for FlowStage {
    fn default() -> Self {
        FlowStage { pe: 0, retention_s: DAY, disturbs: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowBenchConfig {
    /// Superpages per stage.
    pub superpages: usize,
    pub hgbb_probability: f64,
    pub stages: Vec<FlowStage>,
}

impl Default for FlowBenchConfig {
    fn default() -> Self {
        FlowBenchConfig {
            superpages: 4,
            hgbb_probability: 0.02,
            stages: vec![
                FlowStage { pe: 0, retention_s: DAY, disturbs: 0 },
                FlowStage { pe: 2000, retention_s: MONTH, disturbs: 0 },
                FlowStage { pe: 3000, retention_s: YEAR, disturbs: 0 },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifetimeConfig {
    pub parity_fraction: f64,
    pub drive: Option<DriveConfig>,
    pub ecc: Option<EccConfig>,
    pub rber: f64,
    pub segments: Vec<RateSegment>,
}

impl Default for LifetimeConfig {
    fn default() -> Self {
        LifetimeConfig { parity_fraction: 1.0 / 32.0, drive: None, ecc: None, rber: 1e-3, segments: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtlExperimentConfig {
    pub footprint: usize,
    pub pages_per_block: usize,
    pub op: Vec<f64>,
    /// Uniform writes per logical page before and during measurement.
    pub warmup_per_page: usize,
    pub measure_per_page: usize,
    pub warm_op: f64,
    pub warm_requests: usize,
    pub hot_fraction: f64,
    pub hot_share: f64,
    pub warm: WarmConfig,
    pub warm_window: u64,
    pub seconds_per_request: f64,
    pub refresh_interval: Option<f64>,
    pub trace: Option<PathBuf>,
    /// Host writes between metrics snapshots.
    pub metrics_every: usize,
}

impl Default for FtlExperimentConfig {
    fn default() -> Self {
        FtlExperimentConfig {
            footprint: 4096,
            pages_per_block: 64,
            op: vec![0.1, 0.25, 0.5, 1.0, 3.0],
            warmup_per_page: 10,
            measure_per_page: 10,
            warm_op: 0.15,
            warm_requests: 200_000,
            hot_fraction: 0.01,
            hot_share: 0.95,
            warm: WarmConfig::default(),
            warm_window: 10_000,
            seconds_per_request: 60.0,
            refresh_interval: Some(3.0 * MONTH),
            trace: None,
            metrics_every: 10_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub calibration: Option<PathBuf>,
    pub output: OutputConfig,
    pub geometry: GeometryConfig,
    pub sweep: SweepConfig,
    pub codec: CodecConfig,
    pub mitigation: MitigationConfig,
    pub characterize: CharacterizeConfig,
    pub ecc_curve: EccCurveConfig,
    pub flow_bench: FlowBenchConfig,
    pub lifetime: LifetimeConfig,
    pub ftl: FtlExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn channel(&self) -> Result<ChannelModel> {
        let tables = match &self.calibration {
            Some(p) => CalibrationTables::from_path(p)?,
            None => CalibrationTables::builtin(),
        };
        Ok(ChannelModel::new(Arc::new(tables), self.sweep.extrapolate))
    }

    pub fn block_config(&self) -> BlockConfig {
        let g = &self.geometry;
        BlockConfig {
            wordlines: g.wordlines,
            bitlines: g.bitlines,
            mode: g.mode,
            endurance: g.endurance,
            disturb_on_read: false,
            ..BlockConfig::default()
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        let mut f = self.mitigation.flow.clone();
        if !self.mitigation.read_retry {
            f.retry_attempts = 1;
        }
        f
    }
}

/// Schema and cross-field checks. Never touches the filesystem beyond
/// checking that referenced inputs exist.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    let mut err = |field: &str, message: String| d.push(Diagnostic { field: field.into(), message });

    if cfg.seed.is_none() {
        err("seed", "a seed is required".into());
    }
    if cfg.experiment.is_none() {
        err("experiment", "no experiment selected".into());
    }
    if let Some(p) = &cfg.calibration {
        if !p.is_file() {
            err("calibration", format!("file {} does not exist", p.display()));
        }
    }

    let g = &cfg.geometry;
    if g.wordlines == 0 {
        err("geometry.wordlines", "must be positive".into());
    }
    if g.bitlines == 0 {
        err("geometry.bitlines", "must be positive".into());
    }
    if g.endurance == 0 {
        err("geometry.endurance", "must be positive".into());
    }
    if g.chips * g.dies < 2 {
        err("geometry.dies", "a superpage needs at least two dies".into());
    }

    let s = &cfg.sweep;
    if s.pe.iter().any(|&p| p > g.endurance) {
        err("sweep.pe", format!("grid exceeds the endurance of {}", g.endurance));
    }
    if s.retention_s.iter().any(|r| !(*r > 0.0)) {
        err("sweep.retention_s", "retention ages must be positive".into());
    }
    if s.pe.is_empty() && s.retention_s.is_empty() && s.disturbs.is_empty() {
        err("sweep", "all grids are empty".into());
    }

    let c = &cfg.codec;
    match c.kind {
        CodecKind::Bch => {
            if !(3..=16).contains(&c.bch_m) {
                err("codec.bch_m", format!("field degree {} outside 3..=16", c.bch_m));
            } else {
                let n = (1usize << c.bch_m) - 1;
                if c.bch_t == 0 || c.bch_m as usize * c.bch_t >= n {
                    err("codec.bch_t", format!("t = {} leaves no message bits in a {n}-bit code", c.bch_t));
                }
                if n > g.bitlines {
                    err("codec.bch_m", format!("{n}-bit codeword does not fit {} bitlines", g.bitlines));
                }
            }
        }
        CodecKind::Ldpc => {
            if c.ldpc_k == 0 || c.ldpc_k >= c.ldpc_n {
                err("codec.ldpc_k", format!("need 0 < k < n, got k = {}, n = {}", c.ldpc_k, c.ldpc_n));
            }
            if c.ldpc_column_weight < 2 {
                err("codec.ldpc_column_weight", "must be at least 2".into());
            }
            if c.ldpc_n > g.bitlines {
                err("codec.ldpc_n", format!("{}-bit codeword does not fit {} bitlines", c.ldpc_n, g.bitlines));
            }
        }
    }
    if c.ldpc.max_iters == 0 || c.ldpc.max_levels == 0 {
        err("codec.ldpc", "iterations and levels must be positive".into());
    }

    let m = &cfg.mitigation;
    if m.read_retry && (m.flow.retry_attempts == 0 || !(m.flow.retry_step > 0.0)) {
        err("mitigation.flow.retry_attempts", "read retry is enabled but the retry schedule is empty".into());
    }
    if m.flow.nac && m.flow.nac_classes == 0 {
        err("mitigation.flow.nac_classes", "NAC is enabled with no neighbor classes".into());
    }
    if let Err(e) = EccEngineSet::new(m.ecc_engines.clone()) {
        err("mitigation.ecc_engines", format!("{e} (rates must decrease while RBER thresholds increase)"));
    }

    if cfg.characterize.cells_per_state < 2 || cfg.characterize.rber_cells_per_state == 0 {
        err("characterize.cells_per_state", "need at least two cells per state".into());
    }

    let e = &cfg.ecc_curve;
    if e.rber.is_empty() {
        err("ecc_curve.rber", "empty RBER grid".into());
    }
    if e.rber.iter().any(|r| !(*r > 0.0 && *r < 0.5)) {
        err("ecc_curve.rber", "RBER values must lie in (0, 0.5)".into());
    }
    if e.frames == 0 {
        err("ecc_curve.frames", "must be positive".into());
    }
    if e.levels == 0 {
        err("ecc_curve.levels", "must be positive".into());
    }

    let f = &cfg.flow_bench;
    if f.stages.is_empty() {
        err("flow_bench.stages", "no degradation stages".into());
    }
    if f.stages.iter().any(|st| st.pe > g.endurance) {
        err("flow_bench.stages", format!("stage P/E exceeds the endurance of {}", g.endurance));
    }
    if !(0.0..=1.0).contains(&f.hgbb_probability) {
        err("flow_bench.hgbb_probability", "must be a probability".into());
    }

    let l = &cfg.lifetime;
    if !(0.0..1.0).contains(&l.parity_fraction) {
        err("lifetime.parity_fraction", "must lie in [0, 1)".into());
    }
    if let Some(dr) = &l.drive {
        if dr.pec == 0.0 {
            err("lifetime.drive.pec", "endurance must be positive".into());
        } else if let Err(e) = dr.validate() {
            err("lifetime.drive", e.to_string());
        }
    }
    if let Some(ecc) = &l.ecc {
        if let Err(e) = ecc.validate() {
            err("lifetime.ecc", e.to_string());
        }
        if l.drive.is_none() {
            err("lifetime.drive", "failure probabilities need a drive".into());
        }
    }

    let t = &cfg.ftl;
    if t.footprint == 0 || t.pages_per_block == 0 {
        err("ftl.footprint", "footprint and block size must be positive".into());
    }
    if t.op.iter().any(|o| !(*o > 0.0)) {
        err("ftl.op", "overprovisioning must be positive".into());
    }
    if !(t.warm_op > 0.0) {
        err("ftl.warm_op", "overprovisioning must be positive".into());
    }
    if t.warm_window == 0 || t.metrics_every == 0 {
        err("ftl.warm_window", "windows must be positive".into());
    }
    if !(0.0 < t.hot_fraction && t.hot_fraction < 1.0 && 0.0 < t.hot_share && t.hot_share < 1.0) {
        err("ftl.hot_fraction", "hot fraction and share must lie in (0, 1)".into());
    }
    if let Some(p) = &t.trace {
        if !p.is_file() {
            err("ftl.trace", format!("file {} does not exist", p.display()));
        }
    }
    d
}

/// Independent RNG for sweep point `index` under `seed`.
pub fn point_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn point_seed(seed: u64, index: u64) -> u64 {
    point_rng(seed, index).next_u64()
}

/// One CSV output: column names, a units row, then data.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<(String, String)>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[(&str, &str)]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|(c, u)| (c.to_string(), u.to_string())).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(c, _)| c == name)
    }

    pub fn get(&self, row: usize, name: &str) -> Option<&str> {
        self.column(name).map(|c| self.rows[row][c].as_str())
    }

    pub fn f64(&self, row: usize, name: &str) -> Option<f64> {
        self.get(row, name)?.parse().ok()
    }

    pub fn to_csv(&self, experiment: ExperimentKind, config_hash: &str, seed: u64) -> Result<String> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        w.write_record([format!("# flashsim {experiment} {} config_sha256={config_hash} seed={seed}", self.name)])?;
        w.write_record(self.columns.iter().map(|(c, _)| c))?;
        w.write_record(self.columns.iter().map(|(_, u)| u))?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn int(v: impl Into<u64>) -> String {
    v.into().to_string()
}

/// Result of one experiment run.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub config_hash: String,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for t in &self.tables {
            let p = dir.join(format!("{}.csv", t.name));
            std::fs::write(&p, t.to_csv(self.experiment, &self.config_hash, self.seed)?)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Validate and run the configured experiment, without writing files.
pub fn execute(cfg: &ExperimentConfig) -> Result<Report> {
    let diags = validate(cfg);
    if !diags.is_empty() {
        let msg: Vec<String> = diags.iter().map(Diagnostic::to_string).collect();
        return Err(Error::Config(msg.join("; ")));
    }
    let kind = cfg.experiment.expect("validated");
    let seed = cfg.seed.expect("validated");
    let tables = match kind {
        ExperimentKind::Characterize => characterize(cfg, seed)?,
        ExperimentKind::EccCurve => ecc_curve(cfg, seed)?,
        ExperimentKind::FlowBench => flow_bench(cfg, seed)?,
        ExperimentKind::Lifetime => lifetime_tables(cfg)?,
        ExperimentKind::Ftl => ftl_tables(cfg, seed)?,
    };
    Ok(Report { experiment: kind, seed, config_hash: cfg.hash()?, tables })
}

pub fn run(cfg: &ExperimentConfig) -> Result<(Report, Vec<PathBuf>)> {
    let report = execute(cfg)?;
    let files = report.write(&cfg.output.dir)?;
    Ok((report, files))
}

/// `n` standard normal draws, one per equal-probability stratum, in random
/// order. Pairing independent shuffles gives a Latin hypercube.
fn lhs_normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f32> = sample_stratified(&StateDistribution::new(State::Er, 0.0, 1.0), n, rng)
        .into_iter()
        .map(|x| x as f32)
        .collect();
    v.shuffle(rng);
    v
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    (mean, (m2 / (n.max(2) - 1) as f64).sqrt(), n)
}

fn characterize(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Table>> {
    let ch = cfg.channel()?;
    let n = cfg.characterize.cells_per_state;
    // One fixed cell population per state, tracked across every grid row.
    let latents: Vec<[Vec<f32>; 3]> = (0..8u64)
        .into_par_iter()
        .map(|s| {
            let mut rng = point_rng(seed, s);
            [lhs_normals(n, &mut rng), lhs_normals(n, &mut rng), lhs_normals(n, &mut rng)]
        })
        .collect();
    let mut jobs = Vec::new();
    for m in [Mechanism::Pe, Mechanism::Retention, Mechanism::Disturb] {
        for (row, &key) in ch.tables().table(m).keys.iter().enumerate() {
            for s in State::ALL {
                jobs.push((m, row, key, s));
            }
        }
    }
    let rows: Vec<Vec<String>> = jobs
        .par_iter()
        .map(|&(m, row, key, s)| {
            let p = ch.table_points(m, key)?[s.index()];
            let c = p.coeffs();
            let [z, wr, wd] = &latents[s.index()];
            let (mean, sd, cells) = mean_std((0..n).map(|i| c.vth(z[i], wr[i], wd[i])));
            let t = ch.tables().table(m);
            Ok(vec![
                m.name().to_string(),
                num(key),
                s.name().to_string(),
                cells.to_string(),
                num(mean),
                num(sd),
                num(t.means[row][s.index()]),
                num(t.stddevs[row][s.index()]),
            ])
        })
        .collect::<Result<_>>()?;
    let mut dist = Table::new(
        "characterize_distributions",
        &[
            ("mechanism", "-"),
            ("key", "cycles|s|reads"),
            ("state", "-"),
            ("cells", "count"),
            ("mean", "norm. V"),
            ("stddev", "norm. V"),
            ("table_mean", "norm. V"),
            ("table_stddev", "norm. V"),
        ],
    );
    dist.rows = rows;

    let sw = &cfg.sweep;
    let mut points = Vec::new();
    for &pe in &sw.pe {
        points.push((Mechanism::Pe, DegradationState::new(pe, DAY, 1)));
    }
    for &r in &sw.retention_s {
        points.push((Mechanism::Retention, DegradationState::new(sw.base_pe, r, 1)));
    }
    for &d in &sw.disturbs {
        points.push((Mechanism::Disturb, DegradationState::new(sw.base_pe, DAY, d)));
    }
    let frozen = ch.frozen_refs(CellMode::Tlc);
    let gray = CellMode::Tlc.gray();
    let cells = cfg.characterize.rber_cells_per_state;
    let rows: Vec<Vec<String>> = points
        .par_iter()
        .enumerate()
        .map(|(i, (m, deg))| {
            let dist = ch.distribution_at(CellMode::Tlc, deg)?;
            let opt = optimal_refs(&dist)?;
            let mut rng = point_rng(seed, 1000 + i as u64);
            let (mut ef, mut eo) = (0u64, 0u64);
            for level in 0..8 {
                let sd = dist.level(level);
                let code = gray.code(level);
                for _ in 0..cells {
                    let v = sample_vth(sd, &mut rng);
                    ef += (code ^ gray.code(bin_of(v, frozen.voltages()))).count_ones() as u64;
                    eo += (code ^ gray.code(bin_of(v, opt.voltages()))).count_ones() as u64;
                }
            }
            let bits = (8 * cells * 3) as u64;
            let key = match m {
                Mechanism::Pe => deg.pe_cycles as f64,
                Mechanism::Retention => deg.retention_s,
                Mechanism::Disturb => deg.read_disturbs as f64,
            };
            Ok(vec![
                m.name().to_string(),
                num(key),
                int(deg.pe_cycles),
                num(deg.retention_s),
                int(deg.read_disturbs),
                int(bits),
                int(ef),
                num(ef as f64 / bits as f64),
                int(eo),
                num(eo as f64 / bits as f64),
                num(crate::voltage::analytic_rber_all(&dist, &frozen)?),
                num(crate::voltage::analytic_rber_all(&dist, &opt)?),
            ])
        })
        .collect::<Result<_>>()?;
    let mut rber = Table::new(
        "characterize_rber",
        &[
            ("axis", "-"),
            ("key", "cycles|s|reads"),
            ("pe", "cycles"),
            ("retention", "s"),
            ("disturbs", "reads"),
            ("bits", "count"),
            ("frozen_errors", "count"),
            ("frozen_rber", "ratio"),
            ("optimal_errors", "count"),
            ("optimal_rber", "ratio"),
            ("frozen_rber_analytic", "ratio"),
            ("optimal_rber_analytic", "ratio"),
        ],
    );
    rber.rows = rows;
    Ok(vec![dist, rber])
}

pub fn build_bch(cfg: &CodecConfig) -> Result<BchCode> {
    BchCode::new(cfg.bch_m, cfg.bch_t)
}

/// LDPC codes are constructed from a dedicated stream of the master seed.
pub fn build_ldpc(cfg: &CodecConfig, seed: u64) -> Result<LdpcCode> {
    let mut rng = point_rng(seed, u64::MAX);
    LdpcCode::construct(cfg.ldpc_n, cfg.ldpc_k, cfg.ldpc_column_weight, &mut rng)
}

pub fn build_flow_codec(cfg: &ExperimentConfig, seed: u64) -> Result<FlowCodec> {
    let bits = cfg.geometry.bitlines;
    Ok(match cfg.codec.kind {
        CodecKind::Bch => FlowCodec::Bch(BchPageCodec::new(build_bch(&cfg.codec)?, bits)?),
        CodecKind::Ldpc => FlowCodec::Ldpc(LdpcPageCodec::new(build_ldpc(&cfg.codec, seed)?, cfg.codec.ldpc, bits)?),
    })
}

fn ecc_curve(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Table>> {
    let e = &cfg.ecc_curve;
    let mut t = Table::new(
        "ecc_curve",
        &[
            ("codec", "-"),
            ("n", "bits"),
            ("k", "bits"),
            ("rber", "ratio"),
            ("levels", "reads"),
            ("frames", "count"),
            ("failures", "count"),
            ("fer", "ratio"),
            ("uber", "ratio"),
            ("uber_stderr", "ratio"),
            ("uber_analytic", "ratio"),
        ],
    );
    match cfg.codec.kind {
        CodecKind::Bch => {
            let code = build_bch(&cfg.codec)?;
            let pts: Vec<_> = e
                .rber
                .par_iter()
                .enumerate()
                .map(|(i, &r)| bch_uber_curve(&code, &[r], e.frames, point_seed(seed, i as u64)).map(|v| v[0]))
                .collect::<Result<_>>()?;
            let analytic = bch_uber_analytic(code.n(), code.t(), &e.rber);
            for (p, a) in pts.iter().zip(&analytic) {
                t.push(vec![
                    "bch".into(),
                    code.n().to_string(),
                    code.k().to_string(),
                    num(p.rber),
                    "1".into(),
                    int(p.frames),
                    int(p.failures),
                    num(p.failures as f64 / p.frames as f64),
                    num(p.uber),
                    num(p.stderr),
                    num(a.uber),
                ]);
            }
        }
        CodecKind::Ldpc => {
            let code = build_ldpc(&cfg.codec, seed)?;
            let per_point: Vec<_> = e
                .rber
                .par_iter()
                .enumerate()
                .map(|(i, &r)| ldpc_level_fer(&code, r, e.levels, e.frames, &cfg.codec.ldpc, point_seed(seed, i as u64)))
                .collect::<Result<_>>()?;
            for pts in &per_point {
                for (l, p) in pts.iter().enumerate() {
                    t.push(vec![
                        "ldpc".into(),
                        code.n().to_string(),
                        code.k().to_string(),
                        num(p.rber),
                        (l + 1).to_string(),
                        int(p.frames),
                        int(p.failures),
                        num(p.failures as f64 / p.frames as f64),
                        num(p.uber),
                        num(p.stderr),
                        String::new(),
                    ]);
                }
            }
        }
    }
    Ok(vec![t])
}

#[derive(Clone, Debug, Default, PartialEq)]
struct StageTally {
    pages: u64,
    stage1: u64,
    stage2: u64,
    parity: u64,
    uncorrectable: u64,
    violations: u64,
    hgbb_dies: u64,
    latency_us: f64,
    reads: u64,
    retry_attempts: u64,
    nac_classes: u64,
    soft_levels: u64,
}

impl StageTally {
    fn add(&mut self, o: &StageTally) {
        self.pages += o.pages;
        self.stage1 += o.stage1;
        self.stage2 += o.stage2;
        self.parity += o.parity;
        self.uncorrectable += o.uncorrectable;
        self.violations += o.violations;
        self.hgbb_dies += o.hgbb_dies;
        self.latency_us += o.latency_us;
        self.reads += o.reads;
        self.retry_attempts += o.retry_attempts;
        self.nac_classes += o.nac_classes;
        self.soft_levels += o.soft_levels;
    }
}

fn flow_superpage(cfg: &ExperimentConfig, codec: &FlowCodec, ch: &ChannelModel, stage: &FlowStage, seed: u64) -> Result<StageTally> {
    let g = &cfg.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sp = Superpage::new(g.chips, g.dies, g.parity, cfg.block_config(), ch.clone(), codec.clone(), seed)?;
    if stage.pe > 0 {
        sp.fast_forward_wear(stage.pe)?;
    }
    sp.program_random(&mut rng)?;
    sp.advance_time(stage.retention_s);
    if stage.disturbs > 0 {
        for d in 0..sp.lbs() {
            sp.block_mut(d).inject_read_disturb(stage.disturbs);
        }
    }
    let mut t = StageTally { hgbb_dies: sp.inject_hgbb_random(cfg.flow_bench.hgbb_probability, &mut rng) as u64, ..Default::default() };
    let flow = cfg.flow_config();
    for die in sp.data_dies() {
        for page in 0..sp.pages_written() {
            let o = correct_flow(&mut sp, die, page, &flow)?;
            t.pages += 1;
            match o.status {
                FlowStatus::CorrectedStage1 => t.stage1 += 1,
                FlowStatus::CorrectedStage2 => t.stage2 += 1,
                FlowStatus::CorrectedParity => t.parity += 1,
                FlowStatus::Uncorrectable => t.uncorrectable += 1,
            }
            if o.status != FlowStatus::Uncorrectable && o.data.as_deref() != Some(sp.truth(die, page)) {
                t.violations += 1;
            }
            t.latency_us += o.latency_us;
            t.reads += o.counts.reads() as u64;
            t.retry_attempts += o.retry_attempts as u64;
            t.nac_classes += o.nac_classes as u64;
            t.soft_levels += o.soft_levels as u64;
        }
    }
    Ok(t)
}

fn flow_bench(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Table>> {
    let ch = cfg.channel()?;
    let codec = build_flow_codec(cfg, seed)?;
    let f = &cfg.flow_bench;
    let jobs: Vec<(usize, u64)> = (0..f.stages.len())
        .flat_map(|s| (0..f.superpages).map(move |i| (s, (s * f.superpages + i) as u64)))
        .collect();
    let tallies: Vec<(usize, StageTally)> = jobs
        .par_iter()
        .map(|&(s, idx)| Ok((s, flow_superpage(cfg, &codec, &ch, &f.stages[s], point_seed(seed, idx))?)))
        .collect::<Result<_>>()?;
    let mut per = vec![StageTally::default(); f.stages.len()];
    for (s, t) in &tallies {
        per[*s].add(t);
    }
    let mut total = StageTally::default();
    for t in &per {
        total.add(t);
    }
    let mut out = Table::new(
        "flow_bench",
        &[
            ("stage", "-"),
            ("pe", "cycles"),
            ("retention", "s"),
            ("disturbs", "reads"),
            ("pages", "count"),
            ("hgbb_dies", "count"),
            ("stage1", "count"),
            ("stage2", "count"),
            ("parity", "count"),
            ("uncorrectable", "count"),
            ("integrity_violations", "count"),
            ("stage1_rate", "ratio"),
            ("stage2_rate", "ratio"),
            ("parity_rate", "ratio"),
            ("mean_latency", "us"),
            ("mean_reads", "reads/page"),
            ("mean_retry_attempts", "reads/page"),
            ("mean_nac_classes", "classes/page"),
            ("mean_soft_levels", "levels/page"),
        ],
    );
    let mut push = |name: String, st: Option<&FlowStage>, t: &StageTally| {
        let p = t.pages.max(1) as f64;
        let (pe, r, d) = st.map_or((String::new(), String::new(), String::new()), |s| (int(s.pe), num(s.retention_s), int(s.disturbs)));
        out.push(vec![
            name,
            pe,
            r,
            d,
            int(t.pages),
            int(t.hgbb_dies),
            int(t.stage1),
            int(t.stage2),
            int(t.parity),
            int(t.uncorrectable),
            int(t.violations),
            num(t.stage1 as f64 / p),
            num(t.stage2 as f64 / p),
            num(t.parity as f64 / p),
            num(t.latency_us / p),
            num(t.reads as f64 / p),
            num(t.retry_attempts as f64 / p),
            num(t.nac_classes as f64 / p),
            num(t.soft_levels as f64 / p),
        ]);
    };
    for (i, t) in per.iter().enumerate() {
        push(i.to_string(), Some(&f.stages[i]), t);
    }
    push("all".into(), None, &total);
    Ok(vec![out])
}

fn lifetime_tables(cfg: &ExperimentConfig) -> Result<Vec<Table>> {
    let l = &cfg.lifetime;
    let mut t1 = Table::new(
        "lifetime_op",
        &[
            ("drive", "-"),
            ("raw", "TB"),
            ("advertised", "TB"),
            ("coding_rate", "ratio"),
            ("parity_fraction", "ratio"),
            ("op", "%"),
            ("implied_parity_fraction", "ratio"),
        ],
    );
    for r in table1(l.parity_fraction)? {
        let pf = if r.parity { l.parity_fraction } else { 0.0 };
        t1.push(vec![
            format!("rate {}{}", r.rate, if r.parity { " + parity" } else { "" }),
            num(2.4),
            num(2.0),
            num(r.rate),
            num(pf),
            num(r.op * 100.0),
            num(implied_parity_fraction(2.4, 2.0, r.rate, r.op)),
        ]);
    }
    let mut tables = vec![t1];
    if l.drive.is_some() || !l.segments.is_empty() {
        let mut d = Table::new("lifetime_drive", &[("quantity", "-"), ("value", "-"), ("unit", "-")]);
        let mut put = |q: &str, v: f64, u: &str| d.push(vec![q.into(), num(v), u.into()]);
        if let Some(dr) = &l.drive {
            put("op", dr.op() * 100.0, "%");
            put("lifetime", lifetime(dr)?, "years");
            if let Some(ecc) = &l.ecc {
                let ecfr = p_ecfr(ecc.codeword_bits, ecc.t, l.rber);
                let lb = p_lbfail(dr.p_hgbb, ecfr, dr.codewords_per_lb);
                put("rber", l.rber, "ratio");
                put("p_ecfr", ecfr, "probability");
                put("p_lbfail", lb, "probability");
                if ecc.superpage_parity {
                    put("p_parity", p_parity(lb, dr.chips, dr.dies)?, "probability");
                }
            }
        }
        if !l.segments.is_empty() {
            let (dwpd, rc) = l.drive.map_or((1.0, 1.0), |d| (d.dwpd, d.r_compress));
            put("multirate_lifetime", multirate_lifetime(&l.segments, dwpd, rc)?, "years");
        }
        tables.push(d);
    }
    Ok(tables)
}

fn ftl_tables(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Table>> {
    let f = &cfg.ftl;
    let pts: Vec<_> = f
        .op
        .par_iter()
        .map(|&op| {
            measure_uniform_wa(
                f.footprint,
                f.pages_per_block,
                op,
                f.warmup_per_page * f.footprint,
                f.measure_per_page * f.footprint,
                // Paired seeds across the OP grid.
                point_seed(seed, 0),
            )
        })
        .collect::<Result<_>>()?;
    let mut wa = Table::new(
        "ftl_wa",
        &[
            ("op", "ratio"),
            ("host_writes", "pages"),
            ("gc_writes", "pages"),
            ("gc_runs", "count"),
            ("erases", "count"),
            ("wa", "ratio"),
            ("pe_spread", "cycles"),
        ],
    );
    for p in &pts {
        wa.push(vec![
            num(p.op),
            int(p.stats.host_writes),
            int(p.stats.gc_writes),
            int(p.stats.gc_runs),
            int(p.stats.erases),
            num(p.wa),
            int(p.pe_spread),
        ]);
    }

    let requests = match &f.trace {
        Some(path) => Workload {
            kind: WorkloadKind::Trace { path: path.display().to_string() },
            footprint: f.footprint as u64,
            requests: 0,
            read_fraction: 0.0,
        }
        .generate(seed)?,
        None => Workload {
            kind: WorkloadKind::Zipf { theta: None, hot_fraction: f.hot_fraction, hot_share: f.hot_share },
            footprint: f.footprint as u64,
            requests: f.warm_requests,
            read_fraction: 0.0,
        }
        .generate(point_seed(seed, 1))?,
    };
    let blocks = ((f.footprint as f64 * (1.0 + f.warm_op)).ceil() as usize).div_ceil(f.pages_per_block);
    let ftl_cfg = FtlConfig {
        footprint: f.footprint,
        warm: Some(f.warm),
        warm_window: f.warm_window,
        seconds_per_request: f.seconds_per_request,
        refresh_interval: f.refresh_interval,
        ..FtlConfig::default()
    };
    let (base, warm) = warm_comparison(&ftl_cfg, blocks, f.pages_per_block, &requests)?;
    let mut wt = Table::new(
        "ftl_warm",
        &[
            ("mode", "-"),
            ("host_writes", "pages"),
            ("gc_writes", "pages"),
            ("refresh_writes", "pages"),
            ("background_writes", "pages"),
            ("gc_runs", "count"),
            ("erases", "count"),
            ("wa", "ratio"),
        ],
    );
    for (name, s) in [("baseline", &base), ("warm", &warm)] {
        wt.push(vec![
            name.into(),
            int(s.host_writes),
            int(s.gc_writes),
            int(s.refresh_writes),
            int(s.background_writes()),
            int(s.gc_runs),
            int(s.erases),
            num(s.write_amplification()),
        ]);
    }

    // Time series of the WARM run.
    let mut metrics = Table::new(
        "ftl_metrics",
        &[
            ("time", "s"),
            ("host_writes", "pages"),
            ("wa", "ratio"),
            ("gc_runs", "count"),
            ("refresh_writes", "pages"),
            ("pe_min", "cycles"),
            ("pe_median", "cycles"),
            ("pe_max", "cycles"),
        ],
    );
    let mut ftl = Ftl::new(MemoryMedia::new(blocks, f.pages_per_block, 1), ftl_cfg)?;
    for l in 0..f.footprint as u64 {
        ftl.host_write(l, &[0])?;
    }
    ftl.reset_stats();
    for chunk in requests.chunks(f.metrics_every) {
        ftl.run(chunk, |_, _| vec![0])?;
        let mut pe = ftl.pe_counts();
        pe.sort_unstable();
        let s = ftl.stats();
        metrics.push(vec![
            num(ftl.now()),
            int(s.host_writes),
            num(s.write_amplification()),
            int(s.gc_runs),
            int(s.refresh_writes),
            int(pe[0]),
            int(pe[pe.len() / 2]),
            int(pe[pe.len() - 1]),
        ]);
    }
    Ok(vec![wa, wt, metrics])
}

/// Minimal configuration for `kind` with the given seed.
pub fn minimal_config(kind: ExperimentKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig { experiment: Some(kind), seed: Some(seed), ..Default::default() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_clean() {
        for k in ExperimentKind::ALL {
            assert!(validate(&minimal_config(k, 1)).is_empty(), "{k}");
        }
        let parsed = ExperimentConfig::from_toml("experiment = \"ftl\"\nseed = 3\n").unwrap();
        assert!(validate(&parsed).is_empty());
        assert_eq!(parsed.experiment, Some(ExperimentKind::Ftl));
    }

    #[test]
    fn diagnostics_name_fields() {
        let mut c = minimal_config(ExperimentKind::Lifetime, 1);
        c.geometry.endurance = 0;
        c.sweep.pe.clear();
        let d = validate(&c);
        assert!(d.iter().any(|x| x.field == "geometry.endurance"), "{d:?}");

        let mut c = minimal_config(ExperimentKind::Lifetime, 1);
        c.mitigation.ecc_engines = vec![EccEngine { rate: 0.9, max_rber: 5e-3 }, EccEngine { rate: 0.93, max_rber: 1e-3 }];
        let d = validate(&c);
        assert!(d.iter().any(|x| x.field == "mitigation.ecc_engines" && x.message.contains("decrease")), "{d:?}");

        let mut c = minimal_config(ExperimentKind::Lifetime, 1);
        c.seed = None;
        c.mitigation.flow.retry_attempts = 0;
        c.calibration = Some("/nonexistent/cal.csv".into());
        let fields: Vec<String> = validate(&c).into_iter().map(|d| d.field).collect();
        for f in ["seed", "mitigation.flow.retry_attempts", "calibration"] {
            assert!(fields.iter().any(|x| x == f), "{f} in {fields:?}");
        }
        c.mitigation.read_retry = false;
        assert!(!validate(&c).iter().any(|d| d.field.starts_with("mitigation")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"nope\"\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = minimal_config(ExperimentKind::Ftl, 1);
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.ftl.footprint += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn point_streams_differ_and_repeat() {
        assert_eq!(point_seed(5, 3), point_seed(5, 3));
        assert_ne!(point_seed(5, 3), point_seed(5, 4));
        assert_ne!(point_seed(5, 3), point_seed(6, 3));
    }

    #[test]
    fn lifetime_csv_layout() {
        let r = execute(&minimal_config(ExperimentKind::Lifetime, 9)).unwrap();
        let t = r.table("lifetime_op").unwrap();
        let ops: Vec<f64> = (0..4).map(|i| t.f64(i, "op").unwrap()).collect();
        for (got, want) in ops.iter().zip([11.6, 8.1, 8.0, 4.6]) {
            assert!((got - want).abs() < 0.05, "{ops:?}");
        }
        let csv = t.to_csv(r.experiment, &r.config_hash, r.seed).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# flashsim lifetime lifetime_op config_sha256="));
        assert!(lines[0].ends_with("seed=9"));
        assert!(lines[1].starts_with("drive,raw"));
        assert!(lines[2].starts_with("-,TB"));
        assert_eq!(lines.len(), 3 + 4);
    }

    #[test]
    fn lhs_moments_are_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = lhs_normals(10_000, &mut rng);
        let (m, s, _) = mean_std(v.iter().map(|&x| x as f64));
        assert!(m.abs() < 1e-3 && (s - 1.0).abs() < 5e-3, "{m} {s}");
    }
}
