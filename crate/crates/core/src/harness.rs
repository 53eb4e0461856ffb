//! Scenario files, the staged pipeline (cover, looping, partition, bound,
//! spectrum), run reports and the verification suites behind the CLI.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound::{
    evaluate_bound, make_schedule, names, quantitative_ift, write_bound_csv, BoundEstimate, ConstantsLedger,
    IftOptions, IftProblem, PartitionCounts, Provenance, ScheduleKind, ScheduleOptions,
};
use crate::conormal::{Submanifold, SubmanifoldSpec};
use crate::cover::{
    build_good_cover, classify_looping, dyadic_ladder, flow_contraction_certificate, partition_single_window,
    union_violations, CoverOptions, CoverPartition, GoodCover, LoopingOptions, LoopingReport, SegmentCover,
};
use crate::eigenlab::{
    average_over, compare_growth, default_degrees, growth_fit, sphere_zonal, torus_eigenfunction, write_records_csv,
    AverageRecord, Eigenfunction, GrowthModel, Weight,
};
use crate::error::{GeoError, Result};
use crate::flow::{
    conjugate_points, estimate_lambda_max, propagate_linearization, riccati_bound_check, DiscreteHyperbolicSystem,
    PhasePoint, PiecewiseCurvature,
};
use crate::manifold::ManifoldModel;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the fixture directory.
pub const DATA_DIR_ENV: &str = "GEOBEAM_DATA_DIR";

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverSection {
    pub tau: f64,
    pub r: f64,
    pub separation: Option<f64>,
    pub max_colors: Option<usize>,
    #[serde(default = "default_mc_samples")]
    pub monte_carlo_samples: usize,
}

fn default_mc_samples() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub t0: f64,
    /// Horizon `T₀`.
    pub t1: f64,
    #[serde(default)]
    pub lambda_hat: f64,
    #[serde(default = "one")]
    pub probe_density: usize,
    /// Probe density of the union retest of good families.
    #[serde(default = "two")]
    pub union_density: usize,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    SingleWindow,
    DyadicLadder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub kind: PartitionKind,
    /// Tubes per certificate ball.
    #[serde(default = "eight")]
    pub ball_tubes: usize,
}

fn eight() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub schedule: ScheduleKind,
    pub eps: f64,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
    pub h: Vec<f64>,
    #[serde(default = "unit")]
    pub weight_sup: f64,
    #[serde(default)]
    pub constants: ConstantsLedger,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumFamily {
    Zonal,
    Torus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub family: SpectrumFamily,
    #[serde(default)]
    pub degrees: Vec<usize>,
    #[serde(default)]
    pub modes: Vec<Vec<i64>>,
    #[serde(default)]
    pub weight: Weight,
    #[serde(default = "twenty")]
    pub residual_samples: usize,
}

fn twenty() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatMapSection {
    #[serde(default = "cat_matrix")]
    pub matrix: [[i64; 2]; 2],
    /// Rational base point `base/den` of the segment.
    pub base: [i64; 2],
    pub den: i64,
    pub length: f64,
    pub r: f64,
    pub t0: u32,
    pub t1: u32,
    #[serde(default = "eight")]
    pub ball_tubes: usize,
}

fn cat_matrix() -> [[i64; 2]; 2] {
    [[2, 1], [1, 1]]
}

/// A pipeline configuration. Either the flow sections (`model`,
/// `submanifold`, `cover`, `window`) or `cat_map` describe the cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: Option<ManifoldModel>,
    pub submanifold: Option<SubmanifoldSpec>,
    pub cover: Option<CoverSection>,
    pub window: Option<WindowSection>,
    pub partition: Option<PartitionSection>,
    pub bound: Option<BoundSection>,
    pub spectrum: Option<SpectrumSection>,
    pub cat_map: Option<CatMapSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Cover,
    Loops,
    Partition,
    Bound,
    Spectrum,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Cover => "cover",
            Stage::Loops => "loops",
            Stage::Partition => "partition",
            Stage::Bound => "bound",
            Stage::Spectrum => "spectrum",
        }
    }

    /// Stages needed to produce this one.
    pub fn through(self) -> Vec<Stage> {
        match self {
            Stage::Spectrum => vec![Stage::Spectrum],
            s => [Stage::Cover, Stage::Loops, Stage::Partition, Stage::Bound].into_iter().filter(|t| *t <= s).collect(),
        }
    }

    pub fn all() -> Vec<Stage> {
        vec![Stage::Cover, Stage::Loops, Stage::Partition, Stage::Bound, Stage::Spectrum]
    }
}

fn config(msg: impl Into<String>) -> GeoError {
    GeoError::Config(msg.into())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config(format!("`{name}` must be positive, got {v}")))
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| config(format!("scenario: {e}")))?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", s.schema_version)));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(format!("scenario: {e}")))
    }

    /// SHA-256 of the scenario with its output directory removed.
    pub fn hash(&self) -> String {
        let mut s = self.clone();
        s.output_dir = None;
        let text = serde_json::to_string(&s).expect("scenario serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn is_cat_map(&self) -> bool {
        self.cat_map.is_some()
    }

    /// Checks that every section needed by `stages` is present and consistent.
    pub fn validate(&self, stages: &[Stage]) -> Result<()> {
        let flow_parts = self.model.is_some() || self.submanifold.is_some() || self.cover.is_some();
        let needs_cover = stages.iter().any(|s| *s <= Stage::Bound);
        if self.is_cat_map() && flow_parts {
            return Err(config("`cat_map` cannot be combined with `model`, `submanifold` or `cover`"));
        }
        if let Some(c) = &self.cat_map {
            DiscreteHyperbolicSystem::new(c.matrix).map_err(|e| config(e.to_string()))?;
            positive("cat_map.length", c.length)?;
            positive("cat_map.r", c.r)?;
            if c.den <= 0 || !(c.t0 >= 1 && c.t1 >= c.t0) {
                return Err(config("cat_map needs den > 0 and 1 ≤ t0 ≤ t1"));
            }
            if stages.contains(&Stage::Bound) && self.bound.is_some() {
                return Err(config("the bound stage needs a flow scenario"));
            }
        } else if needs_cover {
            let model = self.model.as_ref().ok_or_else(|| config("missing [model]"))?;
            model.validate()?;
            if self.submanifold.is_none() {
                return Err(config("missing [submanifold]"));
            }
            let c = self.cover.as_ref().ok_or_else(|| config("missing [cover]"))?;
            positive("cover.tau", c.tau)?;
            positive("cover.r", c.r)?;
            if stages.iter().any(|s| *s >= Stage::Loops && *s <= Stage::Bound) {
                let w = self.window.as_ref().ok_or_else(|| config("missing [window]"))?;
                positive("window.t0", w.t0)?;
                if !(w.t1 >= w.t0) || w.probe_density == 0 || w.union_density == 0 {
                    return Err(config("window needs t1 ≥ t0 and positive probe densities"));
                }
            }
        }
        if stages.iter().any(|s| *s >= Stage::Partition && *s <= Stage::Bound) && !self.is_cat_map() {
            let p = self.partition.as_ref().ok_or_else(|| config("missing [partition]"))?;
            if p.ball_tubes == 0 {
                return Err(config("partition.ball_tubes must be positive"));
            }
        }
        if stages.contains(&Stage::Bound) {
            if let Some(b) = &self.bound {
                if b.h.is_empty() {
                    return Err(config("bound.h is empty"));
                }
                positive("bound.weight_sup", b.weight_sup)?;
                let mut required = vec![names::C_BOUND, names::R0];
                required.push(match b.schedule {
                    ScheduleKind::NoConj => names::A,
                    ScheduleKind::TangentSpace => names::C_TILDE,
                });
                for n in required {
                    if b.constants.entry(n).is_none() {
                        return Err(config(format!("bound.constants.{n} is required")));
                    }
                }
            }
        }
        if stages.contains(&Stage::Spectrum) {
            if let Some(sp) = &self.spectrum {
                let model = self.model.as_ref().ok_or_else(|| config("spectrum needs [model]"))?;
                match (sp.family, model) {
                    (SpectrumFamily::Zonal, ManifoldModel::RoundSphere { dim: 2 }) => {}
                    (SpectrumFamily::Torus, ManifoldModel::FlatTorus { periods }) => {
                        if periods.iter().any(|p| (p - 2.0 * PI).abs() > 1e-12) {
                            return Err(config("torus modes need periods 2π"));
                        }
                        if sp.modes.is_empty() || sp.modes.iter().any(|m| m.len() != periods.len()) {
                            return Err(config("spectrum.modes must list vectors of the torus dimension"));
                        }
                    }
                    (f, m) => return Err(config(format!("{f:?} eigenfunctions are not available on {}", m.name()))),
                }
                if self.submanifold.is_none() {
                    return Err(config("spectrum needs [submanifold]"));
                }
            }
        }
        Ok(())
    }
}

/// Fixture directory: `GEOBEAM_DATA_DIR`, or the `data/` directory of the source tree.
pub fn data_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

pub fn fixture(name: &str) -> Result<Scenario> {
    Scenario::load(&data_dir().join("scenarios").join(format!("{name}.toml")))
}

/// Sets the global worker count of the parallel stages.
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub stages: Vec<StageTiming>,
    pub artifacts: Vec<PathBuf>,
    pub invariants: Vec<InvariantCheck>,
    pub summary: BTreeMap<String, f64>,
    pub passed: bool,
}

impl RunReport {
    pub fn failed_invariants(&self) -> Vec<&InvariantCheck> {
        self.invariants.iter().filter(|c| !c.passed).collect()
    }
}

/// Re-raises `e` with the stage name and its inputs prepended, keeping the kind.
fn in_stage(stage: Stage, inputs: &str, e: GeoError) -> GeoError {
    let m = |s: String| format!("stage `{}` ({inputs}): {s}", stage.name());
    match e {
        GeoError::Domain(s) => GeoError::Domain(m(s)),
        GeoError::FrameDrift(d) => GeoError::Numeric(m(format!("parallel frame drifted by {d:.3e}"))),
        GeoError::Stiffness(s) => GeoError::Stiffness(m(s)),
        GeoError::Precondition(s) => GeoError::Precondition(m(s)),
        GeoError::Numeric(s) => GeoError::Numeric(m(s)),
        GeoError::Config(s) => GeoError::Config(m(s)),
        GeoError::Infeasible(s) => GeoError::Infeasible(m(s)),
        GeoError::Unsupported(s) => GeoError::Unsupported(m(s)),
        GeoError::Invariant(s) => GeoError::Invariant(m(s)),
        GeoError::Io(e) => GeoError::Io(std::io::Error::new(e.kind(), m(e.to_string()))),
        GeoError::Csv(e) => GeoError::Io(std::io::Error::other(m(e.to_string()))),
    }
}

struct Run<'a> {
    scenario: &'a Scenario,
    hash: String,
    out: PathBuf,
    report: RunReport,
    cover: Option<GoodCover>,
    segment: Option<SegmentCover>,
    looping: Option<LoopingReport>,
    partition: Option<CoverPartition>,
}

impl<'a> Run<'a> {
    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.report.invariants.push(InvariantCheck { name: name.into(), passed, detail });
    }

    /// Writes a CSV artifact whose first row names the scenario hash and units.
    fn artifact(&mut self, file: &str, units: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = format!("# scenario {}; units: {units}\n", self.hash).into_bytes();
        body(&mut buf)?;
        self.write_file(file, &buf)
    }

    fn write_file(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(file);
        fs::write(&path, bytes)?;
        self.report.artifacts.push(path);
        Ok(())
    }

    fn stage_cover(&mut self) -> Result<()> {
        let s = self.scenario;
        if let Some(c) = &s.cat_map {
            let system = DiscreteHyperbolicSystem::new(c.matrix)?;
            let seg = SegmentCover::stable(system, c.base, c.den, c.length, c.r)?;
            self.report.summary.insert("tube_count".into(), seg.len() as f64);
            self.segment = Some(seg);
            return Ok(());
        }
        let model = s.model.as_ref().expect("validated");
        let h = Submanifold::new(model, s.submanifold.clone().expect("validated"))?;
        let c = s.cover.as_ref().expect("validated");
        let opts = CoverOptions { separation: c.separation, max_colors: c.max_colors, ..CoverOptions::default() };
        let cover = build_good_cover(&h, c.tau, c.r, &opts)?;
        self.check("cover_coloring_proper", cover.coloring_is_proper(), format!("{} colors", cover.color_count));
        let misses = cover.monte_carlo_misses(c.monte_carlo_samples, s.seed)?;
        self.check(
            "cover_monte_carlo",
            misses == 0,
            format!("{misses} of {} sampled points of SN*H uncovered", c.monte_carlo_samples),
        );
        self.report.summary.insert("tube_count".into(), cover.len() as f64);
        self.report.summary.insert("color_count".into(), cover.color_count as f64);
        self.write_file("cover.toml", cover.to_text()?.as_bytes())?;
        self.cover = Some(cover);
        Ok(())
    }

    fn stage_loops(&mut self) -> Result<()> {
        let Some(cover) = &self.cover else {
            // landings of the discrete backend are exact and computed in the ladder
            return Ok(());
        };
        let w = self.scenario.window.as_ref().expect("validated");
        let opts = LoopingOptions { lambda_hat: w.lambda_hat, probe_density: w.probe_density, ..LoopingOptions::default() };
        let rep = classify_looping(cover, w.t0, w.t1, &opts)?;
        self.report.summary.insert("looping_fraction".into(), rep.looping_fraction());
        self.artifact("loops.csv", "times in unit-speed flow time; distances in the Sasaki metric", |b| rep.write_csv(b))?;
        self.looping = Some(rep);
        Ok(())
    }

    fn stage_partition(&mut self) -> Result<()> {
        let s = self.scenario;
        let p = if let (Some(seg), Some(c)) = (&self.segment, &s.cat_map) {
            let cert = seg.certificate(c.ball_tubes, c.t1);
            seg.ladder(c.t0, c.t1, Some(&cert))?
        } else {
            let cover = self.cover.as_ref().expect("cover stage ran");
            let rep = self.looping.as_ref().expect("loops stage ran");
            let w = s.window.as_ref().expect("validated");
            let section = s.partition.as_ref().expect("validated");
            let p = match section.kind {
                PartitionKind::SingleWindow => partition_single_window(cover, rep, w.t0, w.t1)?,
                PartitionKind::DyadicLadder => {
                    let m = (w.t1 / w.t0).log2().floor().max(0.0) as i32;
                    let times: Vec<f64> = (0..=m).map(|l| w.t1 / 2f64.powi(l)).collect();
                    let cert = flow_contraction_certificate(cover, section.ball_tubes, &times)?;
                    dyadic_ladder(cover, rep, w.t0, w.t1, Some(&cert))?
                }
            };
            let mut bad_pairs = 0;
            for g in &p.rungs {
                bad_pairs += union_violations(cover, &g.tubes, g.t_start, g.t_end, w.union_density)?.len();
            }
            self.check(
                "union_non_looping",
                bad_pairs == 0,
                format!("{bad_pairs} looping pairs in good families at probe density {}", w.union_density),
            );
            p
        };
        let all: Vec<usize> = (0..p.tube_count).collect();
        self.check("partition_covers", p.covers(&all), format!("{} bad, {} good", p.bad.len(), p.good_count()));
        self.report.summary.insert("bad_count".into(), p.bad.len() as f64);
        self.report.summary.insert("bad_fraction".into(), p.bad_fraction());
        if let Some(fit) = &p.counting {
            self.report.summary.insert("rung_ratio".into(), fit.ratio);
        }
        self.artifact("partition.csv", "times in flow time (steps for the discrete backend)", |b| p.write_csv(b))?;
        self.partition = Some(p);
        Ok(())
    }

    fn stage_bound(&mut self) -> Result<()> {
        let s = self.scenario;
        let Some(b) = &s.bound else { return Ok(()) };
        let p = self.partition.as_ref().expect("partition stage ran");
        let mut ledger = b.constants.clone();
        if ledger.entry(names::LAMBDA_HAT).is_none() {
            let model = s.model.as_ref().expect("validated");
            let est = estimate_lambda_max(model, 64, 10.0, s.seed)?;
            ledger.insert(names::LAMBDA_HAT, est.lambda_hat, Provenance::EmpiricalFit, "max log‖dφ_T‖/T over 64 samples, T = 10")?;
        }
        ledger.insert(names::D_MAX, p.color_count as f64, Provenance::EmpiricalFit, "colors used by the cover")?;
        ledger.insert(names::TAU0, p.tau, Provenance::Config, "tube half-length")?;
        if let Some(fit) = &p.counting {
            ledger.insert(names::C_LADDER, fit.c_ladder, Provenance::EmpiricalFit, "max |G_ℓ| 5^ℓ r^(n−1)")?;
        }
        let w = s.window.as_ref().expect("validated");
        let opts = ScheduleOptions { kind: b.schedule, eps: b.eps, delta: b.delta, alpha: b.alpha, t_start: w.t0 };
        let schedule = make_schedule(&opts, &b.h, &ledger)?;
        let counts = PartitionCounts::from(p);
        let estimates: Vec<BoundEstimate> = schedule
            .points
            .iter()
            .map(|pt| evaluate_bound(&counts, &schedule, pt.h, &ledger, b.weight_sup))
            .collect::<Result<_>>()?;
        let nonneg = estimates.iter().all(|e| e.bound >= 0.0 && e.bound.is_finite());
        self.check("bound_nonnegative", nonneg, format!("{} grid points", estimates.len()));
        let max = estimates.iter().map(|e| e.bound).fold(0.0, f64::max);
        let min = estimates.iter().map(|e| e.bound).fold(f64::INFINITY, f64::min);
        self.report.summary.insert("bound_max".into(), max);
        self.report.summary.insert("bound_min".into(), min);
        self.report.summary.insert("excluded_h".into(), schedule.excluded.len() as f64);
        self.artifact("bound.csv", "h dimensionless; bound relative to ‖u‖ with h^((k−1)/2) scaling", |buf| {
            write_bound_csv(&estimates, buf)
        })?;
        self.artifact("ledger.csv", "constants in flow units", |buf| ledger.write_csv(buf))?;
        self.write_file("bound.gp", BOUND_PLOT.as_bytes())?;
        Ok(())
    }

    fn stage_spectrum(&mut self) -> Result<()> {
        let s = self.scenario;
        let Some(sp) = &s.spectrum else { return Ok(()) };
        let model = s.model.as_ref().expect("validated");
        let h = Submanifold::new(model, s.submanifold.clone().expect("validated"))?;
        let funcs: Vec<Eigenfunction> = match sp.family {
            SpectrumFamily::Zonal => {
                let degrees = if sp.degrees.is_empty() { default_degrees() } else { sp.degrees.clone() };
                degrees.iter().map(|&l| sphere_zonal(l)).collect::<Result<_>>()?
            }
            SpectrumFamily::Torus => sp.modes.iter().map(|m| torus_eigenfunction(m)).collect::<Result<_>>()?,
        };
        let mut worst: f64 = 0.0;
        for (i, f) in funcs.iter().enumerate() {
            worst = worst.max(f.laplacian_residual(sp.residual_samples, s.seed.wrapping_add(i as u64)));
            worst = worst.max((f.l2_norm - 1.0).abs());
        }
        self.check("eigen_residual", worst < 1e-6, format!("max residual or norm defect {worst:.3e}"));
        let records: Vec<AverageRecord> = {
            use rayon::prelude::*;
            funcs.par_iter().map(|f| average_over(&h, &sp.weight, f)).collect::<Result<_>>()?
        };
        let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.lambda, r.value)).collect();
        if let Ok(fit) = growth_fit(&pts, GrowthModel::Power) {
            self.report.summary.insert("growth_exponent".into(), fit.exponent);
        }
        self.artifact("spectrum.csv", "λ = frequency, h = 1/λ; values are |∫_H w φ dσ|", |b| write_records_csv(&records, b))?;
        self.write_file("spectrum.gp", SPECTRUM_PLOT.as_bytes())?;
        Ok(())
    }
}

const BOUND_PLOT: &str = "set datafile separator ','
set logscale xy
set xlabel 'h'
set ylabel 'bound'
set key left
plot 'bound.csv' every ::1 using 1:4 with linespoints title 'bound', \\
     '' every ::1 using 1:7 with linespoints title 'bound * sqrt(log(1/h))'
";

const SPECTRUM_PLOT: &str = "set datafile separator ','
set logscale xy
set xlabel 'lambda'
set ylabel '|average|'
set key left
plot 'spectrum.csv' every ::1 using 1:3 with points title 'average', \\
     '' every ::1 using 1:4 with lines title 'classical', \\
     '' every ::1 using 1:5 with lines title 'log-improved'
";

/// Runs the given stages (in pipeline order) and writes artifacts to `out`.
/// A failed invariant marks the report failed; stage errors carry the stage name.
pub fn run_stages(scenario: &Scenario, stages: &[Stage], out: &Path) -> Result<RunReport> {
    scenario.validate(stages)?;
    fs::create_dir_all(out)?;
    let hash = scenario.hash();
    let mut run = Run {
        scenario,
        hash: hash.clone(),
        out: out.to_path_buf(),
        report: RunReport {
            scenario: scenario.name.clone(),
            scenario_hash: hash,
            seed: scenario.seed,
            stages: vec![],
            artifacts: vec![],
            invariants: vec![],
            summary: BTreeMap::new(),
            passed: true,
        },
        cover: None,
        segment: None,
        looping: None,
        partition: None,
    };
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    for stage in ordered {
        let inputs = stage_inputs(scenario, stage);
        let start = Instant::now();
        let res = match stage {
            Stage::Cover => run.stage_cover(),
            Stage::Loops => run.stage_loops(),
            Stage::Partition => run.stage_partition(),
            Stage::Bound => run.stage_bound(),
            Stage::Spectrum => run.stage_spectrum(),
        };
        res.map_err(|e| in_stage(stage, &inputs, e))?;
        run.report.stages.push(StageTiming { stage: stage.name().into(), seconds: start.elapsed().as_secs_f64() });
    }
    let mut report = run.report;
    report.passed = report.invariants.iter().all(|c| c.passed);
    let json = serde_json::to_string_pretty(&report).map_err(|e| GeoError::Numeric(e.to_string()))?;
    fs::write(out.join("report.json"), &json)?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join("reports.jsonl"))?;
    writeln!(log, "{}", serde_json::to_string(&report).map_err(|e| GeoError::Numeric(e.to_string()))?)?;
    Ok(report)
}

/// Runs every stage.
pub fn run(scenario: &Scenario, out: &Path) -> Result<RunReport> {
    let mut stages = Stage::all();
    if scenario.spectrum.is_none() {
        stages.retain(|s| *s != Stage::Spectrum);
    }
    run_stages(scenario, &stages, out)
}

fn stage_inputs(s: &Scenario, stage: Stage) -> String {
    match stage {
        Stage::Cover => match (&s.cat_map, &s.cover) {
            (Some(c), _) => format!("cat map {:?}, r = {}, length = {}", c.matrix, c.r, c.length),
            (_, Some(c)) => format!(
                "{} / {:?}, τ = {}, r = {}",
                s.model.as_ref().map(|m| m.name()).unwrap_or_default(),
                s.submanifold,
                c.tau,
                c.r
            ),
            _ => String::new(),
        },
        Stage::Loops | Stage::Partition => match (&s.window, &s.cat_map) {
            (_, Some(c)) => format!("steps [{}, {}]", c.t0, c.t1),
            (Some(w), _) => format!("window [{}, {}], probe density {}", w.t0, w.t1, w.probe_density),
            _ => String::new(),
        },
        Stage::Bound => s.bound.as_ref().map(|b| format!("{:?}, ε = {}, h = {:?}", b.schedule, b.eps, b.h)).unwrap_or_default(),
        Stage::Spectrum => s.spectrum.as_ref().map(|sp| format!("{:?}", sp.family)).unwrap_or_default(),
    }
}

// ---------------------------------------------------------------------------
// Verification suites

pub const SUITES: [&str; 6] = ["jacobi", "riccati", "cover", "ladder", "ift", "eigen"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifySummary {
    pub suite: String,
    pub checks: Vec<InvariantCheck>,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(InvariantCheck { name: name.into(), passed, detail });
    }
}

pub fn verify(suite: &str, seed: u64) -> Result<VerifySummary> {
    let mut s = VerifySummary { suite: suite.into(), checks: vec![] };
    match suite {
        "jacobi" => verify_jacobi(&mut s)?,
        "riccati" => verify_riccati(&mut s, seed)?,
        "cover" => verify_cover(&mut s)?,
        "ladder" => verify_ladder(&mut s)?,
        "ift" => verify_ift(&mut s, seed)?,
        "eigen" => verify_eigen(&mut s, seed)?,
        other => return Err(config(format!("unknown suite `{other}`; expected one of {}", SUITES.join(", ")))),
    }
    Ok(s)
}

fn verify_jacobi(s: &mut VerifySummary) -> Result<()> {
    let sphere = ManifoldModel::sphere(2);
    let rho = PhasePoint::from_direction(&sphere, &[1.0, 0.0, 0.0], &[0.0, 0.6, 0.8])?;
    let seg = propagate_linearization(&sphere, &rho, 7.0, &Default::default())?;
    let r = conjugate_points(&seg, (0.0, 7.0), 1e-7)?;
    let ok = r.points.len() == 2
        && (r.points[0].0 - PI).abs() < 2e-3
        && (r.points[1].0 - 2.0 * PI).abs() < 2e-3
        && r.points.iter().all(|p| p.1 == 1);
    s.push("s2_conjugate_times", ok, format!("{:?}", r.points));
    s.push("s2_wronskian", seg.wronskian_drift() < 1e-6, format!("drift {:.3e}", seg.wronskian_drift()));

    let s3 = ManifoldModel::sphere(3);
    let rho = PhasePoint::from_direction(&s3, &[0.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0])?;
    let seg = propagate_linearization(&s3, &rho, 4.0, &Default::default())?;
    let r = conjugate_points(&seg, (0.0, 4.0), 1e-7)?;
    let ok = r.points.len() == 1 && (r.points[0].0 - PI).abs() < 2e-3 && r.points[0].1 == 2;
    s.push("s3_multiplicity", ok, format!("{:?}", r.points));

    let torus = ManifoldModel::flat_torus(2);
    let rho = PhasePoint::from_direction(&torus, &[0.0, 0.0], &[1.0, 0.3])?;
    let seg = propagate_linearization(&torus, &rho, 50.0, &Default::default())?;
    let r = conjugate_points(&seg, (0.0, 50.0), 1e-7)?;
    s.push("torus_none", r.points.is_empty(), format!("{:?}", r.points));
    Ok(())
}

/// Random symmetric matrix with spectrum in `[−k², 2]`.
fn random_curvature(rng: &mut ChaCha8Rng, m: usize, k: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let q = a.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.gen_range(-k * k..2.0)));
    let r = &q * d * q.transpose();
    (&r + r.transpose()) * 0.5
}

/// Piecewise-constant curvature trials for the Riccati comparison; trial `i`
/// uses `k = [0.5, 1, 2][i mod 3]` and `n − 1 = 1 + (i/3) mod 3`.
pub fn riccati_trials(count: usize, seed: u64) -> Vec<(PiecewiseCurvature, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let k = [0.5, 1.0, 2.0][i % 3];
            let m = 1 + (i / 3) % 3;
            let pieces = rng.gen_range(1..=5);
            let mut breaks = vec![0.0];
            for _ in 0..pieces {
                let last = *breaks.last().unwrap();
                breaks.push(last + rng.gen_range(0.2..1.5));
            }
            let values = (0..pieces).map(|_| random_curvature(&mut rng, m, k)).collect();
            (PiecewiseCurvature { breaks, values }, k)
        })
        .collect()
}

fn verify_riccati(s: &mut VerifySummary, seed: u64) -> Result<()> {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for (i, (curv, k)) in riccati_trials(200, seed).iter().enumerate() {
        let r = riccati_bound_check(curv, *k, 200, seed.wrapping_add(i as u64))?;
        worst = worst.max(r.max_violation);
        if r.max_violation > 1e-6 {
            violations += 1;
        }
    }
    s.push("random_trials", violations == 0, format!("{violations} of 200 trials violate; worst margin {worst:.3e}"));
    for k in [0.5, 1.0, 2.0] {
        let curv = PiecewiseCurvature::constant(0.0, 3.0, DMatrix::identity(2, 2) * (-k * k));
        let r = riccati_bound_check(&curv, k, 200, seed)?;
        s.push(
            &format!("saturation_k{k}"),
            r.max_violation <= 1e-6 && r.min_gap.abs() < 1e-6,
            format!("violation {:.3e}, gap {:.3e}", r.max_violation, r.min_gap),
        );
    }
    Ok(())
}

fn verify_cover(s: &mut VerifySummary) -> Result<()> {
    let sc = fixture("sphere_point")?;
    let cover_sec = sc.cover.as_ref().ok_or_else(|| config("fixture needs [cover]"))?;
    let w = sc.window.as_ref().ok_or_else(|| config("fixture needs [window]"))?;
    let h = Submanifold::new(sc.model.as_ref().ok_or_else(|| config("fixture needs [model]"))?, sc.submanifold.clone().ok_or_else(|| config("fixture needs [submanifold]"))?)?;
    let cover = build_good_cover(&h, cover_sec.tau, cover_sec.r, &CoverOptions::default())?;
    s.push("coloring_proper", cover.coloring_is_proper(), format!("{} tubes, {} colors", cover.len(), cover.color_count));
    let misses = cover.monte_carlo_misses(2000, sc.seed)?;
    s.push("covers_snh", misses == 0, format!("{misses} misses of 2000"));
    let rep = classify_looping(&cover, w.t0, w.t1, &LoopingOptions::default())?;
    let p = partition_single_window(&cover, &rep, w.t0, w.t1)?;
    s.push("full_looping", p.bad.len() == cover.len(), format!("{} of {} tubes bad", p.bad.len(), cover.len()));
    Ok(())
}

fn verify_ladder(s: &mut VerifySummary) -> Result<()> {
    let seg = SegmentCover::stable(DiscreteHyperbolicSystem::new(cat_matrix())?, [12345, 67890], 999_983, 4.0, 2f64.powi(-7))?;
    let cert = seg.certificate(8, 1024);
    let p = seg.ladder(2, 1024, Some(&cert))?;
    let fit = p.counting.clone().ok_or_else(|| GeoError::Invariant("ladder reported no counting fit".into()))?;
    s.push("rung_ratio", fit.ratio <= 0.55, format!("fitted ratio {:.4}", fit.ratio));
    s.push("bad_fraction", p.bad.len() as f64 <= 0.05 * seg.len() as f64, format!("{} of {}", p.bad.len(), seg.len()));
    let all: Vec<usize> = (0..seg.len()).collect();
    s.push("partition_covers", p.covers(&all), String::new());
    Ok(())
}

type Field = dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync;

/// The three reference problems of the implicit function check, with their
/// derivative bounds: `x₀ − x₁x₂`, `x₀`, and `x₀ − sin(x₀)x₁`.
pub fn ift_reference_problems() -> Vec<(&'static str, Box<Field>, [usize; 3], fn([f64; 3]) -> [f64; 3], fn([f64; 3]) -> [f64; 2])> {
    vec![
        (
            "product",
            Box::new(|x0, x1, x2| DVector::from_element(1, x0[0] - x1[0] * x2[0])),
            [1, 1, 1],
            |_| [0.0; 3],
            |r| [r[2], r[1]],
        ),
        ("uncoupled", Box::new(|x0, _, _| x0.clone()), [1, 1, 1], |_| [0.0; 3], |_| [0.0; 2]),
        (
            "sine",
            Box::new(|x0, x1, _| DVector::from_element(1, x0[0] - x0[0].sin() * x1[0])),
            [1, 1, 1],
            |r| [r[0].min(1.0) * r[1], 1.0, 0.0],
            |r| [r[0].min(1.0), 0.0],
        ),
    ]
}

fn verify_ift(s: &mut VerifySummary, seed: u64) -> Result<()> {
    for (name, f, dims, mixed, first) in ift_reference_problems() {
        let p = IftProblem { dims, f: f.as_ref(), l: DMatrix::identity(dims[0], dims[0]), mixed: &mixed, first: &first };
        let rep = quantitative_ift(&p, &IftOptions { seed, ..IftOptions::default() })?;
        let ok = rep.s < 1.0 && rep.converged == rep.samples && rep.max_ratio <= rep.s + 0.02;
        s.push(
            name,
            ok,
            format!("radii {:?}, S = {:.4}, {}/{} converged, ratio {:.4}", rep.radii, rep.s, rep.converged, rep.samples, rep.max_ratio),
        );
    }
    Ok(())
}

fn verify_eigen(s: &mut VerifySummary, seed: u64) -> Result<()> {
    let circle = Submanifold::new(&ManifoldModel::flat_torus(2), SubmanifoldSpec::CoordinateCircle { axis: 1, offset: 0.0 })?;
    let mut worst: f64 = 0.0;
    for m1 in -3i64..=3 {
        for m2 in [-2i64, 0, 5] {
            let r = average_over(&circle, &Weight::default(), &torus_eigenfunction(&[m1, m2])?)?;
            let expect = if m1 == 0 { 1.0 } else { 0.0 };
            worst = worst.max((r.value - expect).abs());
        }
    }
    s.push("torus_kronecker", worst < 1e-8, format!("max error {worst:.3e}"));

    let pole = Submanifold::new(&ManifoldModel::sphere(2), SubmanifoldSpec::Point { x: vec![0.0, 0.0, 1.0] })?;
    let degrees = default_degrees();
    let mut worst: f64 = 0.0;
    let mut pts = vec![];
    let mut residual: f64 = 0.0;
    for (i, &l) in degrees.iter().enumerate() {
        let f = sphere_zonal(l)?;
        residual = residual.max(f.laplacian_residual(10, seed.wrapping_add(i as u64)));
        let r = average_over(&pole, &Weight::default(), &f)?;
        worst = worst.max((r.value - ((2 * l + 1) as f64 / (4.0 * PI)).sqrt()).abs());
        pts.push((r.lambda, r.value));
    }
    s.push("zonal_pole_values", worst < 1e-8, format!("max error {worst:.3e}"));
    s.push("zonal_residual", residual < 1e-6, format!("max residual {residual:.3e}"));
    let fit = growth_fit(&pts, GrowthModel::Power)?;
    s.push("pole_exponent", (fit.exponent - 0.5).abs() <= 0.03, format!("exponent {:.4}", fit.exponent));
    let synth: Vec<(f64, f64)> = (0..12)
        .map(|i| {
            let l = 10.0 * 1.5f64.powi(i);
            (l, l.sqrt() / l.ln().sqrt())
        })
        .collect();
    let cmp = compare_growth(&synth)?;
    s.push(
        "sqrt_log_preferred",
        cmp.preferred == GrowthModel::PowerOverSqrtLog && cmp.residual_ratio < 0.5,
        format!("residual ratio {:.3e}", cmp.residual_ratio),
    );
    Ok(())
}
