//! Averaged eigenfunction bounds assembled from good/bad partitions, `h`-schedules,
//! baseline growth rates and an implicit function theorem with explicit radii.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cover::CoverPartition;
use crate::error::{GeoError, Result};
use crate::flow::fmt;

/// Names of the constants read by this module.
pub mod names {
    /// Multiplicative constant `C_{n,k}` of the bound.
    pub const C_BOUND: &str = "c_bound";
    /// Expansion rate estimate.
    pub const LAMBDA_HAT: &str = "lambda_hat";
    /// Additive slack `a` in the logarithmic horizon coefficient.
    pub const A: &str = "a";
    /// Rate `c̃` in `T₀ = (ε/c̃) log(1/h)`.
    pub const C_TILDE: &str = "c_tilde";
    /// Largest admissible tube radius.
    pub const R0: &str = "r0_max";
    pub const C_PANDA: &str = "c_panda";
    pub const C_LADDER: &str = "c_ladder";
    pub const C3: &str = "c3";
    pub const C4: &str = "c4";
    pub const C0: &str = "c0";
    pub const B_HAT: &str = "b_hat";
    pub const D_MAX: &str = "d_max";
    pub const TAU0: &str = "tau0";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    EmpiricalFit,
    Config,
    PaperExistential,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::EmpiricalFit => "empirical-fit",
            Provenance::Config => "config",
            Provenance::PaperExistential => "paper-existential",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constant {
    pub value: f64,
    pub provenance: Provenance,
    #[serde(default)]
    pub note: String,
}

/// Named constants with provenance. Reading a missing constant is an error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConstantsLedger {
    pub constants: BTreeMap<String, Constant>,
}

impl ConstantsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: f64, provenance: Provenance, note: &str) -> Result<()> {
        if !value.is_finite() {
            return Err(GeoError::Config(format!("constant `{name}` = {value} is not finite")));
        }
        self.constants.insert(name.to_string(), Constant { value, provenance, note: note.to_string() });
        Ok(())
    }

    /// Builder form of [`insert`](Self::insert) for finite literals.
    pub fn with(mut self, name: &str, value: f64, provenance: Provenance) -> Self {
        self.insert(name, value, provenance, "").expect("finite constant");
        self
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.constants
            .get(name)
            .map(|c| c.value)
            .ok_or_else(|| GeoError::Precondition(format!("constant `{name}` is not in the ledger")))
    }

    pub fn entry(&self, name: &str) -> Option<&Constant> {
        self.constants.get(name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "value", "provenance", "note"])?;
        for (k, c) in &self.constants {
            w.write_record([k.as_str(), &fmt(c.value), c.provenance.as_str(), &c.note])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedules

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// No conjugate points: `R = h^ε`, `r₀ = h^{2ε}`, `T₀ = b log(1/h)`, `0 < ε < 1/4`.
    NoConj,
    /// Contraction regime: `R = h^ε`, `r₀ = h^δ`, `T₀ = (ε/c̃) log(1/h)`, `0 < ε < 1/2`.
    TangentSpace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleOptions {
    pub kind: ScheduleKind,
    pub eps: f64,
    /// Exponent of the small radius; `2ε` for `NoConj` and `(ε + 1/2)/2` otherwise.
    pub delta: Option<f64>,
    /// Ehrenfest fraction; just below `1 − 2ε` by default.
    pub alpha: Option<f64>,
    /// Start `t₀` of every window.
    pub t_start: f64,
}

impl ScheduleOptions {
    pub fn new(kind: ScheduleKind, eps: f64) -> Self {
        ScheduleOptions { kind, eps, delta: None, alpha: None, t_start: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchedulePoint {
    pub h: f64,
    /// Tube radius `R(h) = h^ε`.
    pub radius: f64,
    /// Small radius `h^δ`.
    pub small_radius: f64,
    /// Horizon `T₀(h)`.
    pub horizon: f64,
    /// Ehrenfest time `log(1/h) / (2Λ)`.
    pub ehrenfest: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub eps: f64,
    pub delta: f64,
    pub alpha: f64,
    pub t_start: f64,
    /// Coefficient of `log(1/h)` in `T₀(h)`.
    pub coefficient: f64,
    pub lambda: f64,
    pub r_max: f64,
    /// Grid points satisfying every schedule inequality.
    pub points: Vec<SchedulePoint>,
    /// Grid points left out, with the violated inequality.
    pub excluded: Vec<(f64, String)>,
}

const STRICT: f64 = 1.0 - 1e-9;

/// Builds a schedule over an `h` grid from ledger constants (`lambda_hat`, `r0_max`,
/// and `a` or `c_tilde` depending on the kind).
pub fn make_schedule(opts: &ScheduleOptions, hs: &[f64], ledger: &ConstantsLedger) -> Result<Schedule> {
    let eps = opts.eps;
    let limit = match opts.kind {
        ScheduleKind::NoConj => 0.25,
        ScheduleKind::TangentSpace => 0.5,
    };
    if !(eps > 0.0 && eps < limit) {
        return Err(GeoError::Precondition(format!("ε = {eps} must lie in (0, {limit}) for {:?}", opts.kind)));
    }
    let delta = opts.delta.unwrap_or(match opts.kind {
        ScheduleKind::NoConj => 2.0 * eps,
        ScheduleKind::TangentSpace => 0.5 * (eps + 0.5),
    });
    if !(delta > 0.0 && delta < 0.5) {
        return Err(GeoError::Precondition(format!("δ = {delta} must lie in (0, 1/2)")));
    }
    let alpha_max = 1.0 - 2.0 * eps;
    let alpha = opts.alpha.unwrap_or(alpha_max * STRICT);
    if !(alpha >= 0.0 && alpha < alpha_max) {
        return Err(GeoError::Precondition(format!("α = {alpha} must lie in [0, {alpha_max})")));
    }
    if !(opts.t_start > 0.0) {
        return Err(GeoError::Precondition("t₀ must be positive".into()));
    }
    let lambda = ledger.get(names::LAMBDA_HAT)?;
    let r_max = ledger.get(names::R0)?;
    let coefficient = match opts.kind {
        ScheduleKind::NoConj => eps / (12.0 * (2.0 * lambda + ledger.get(names::A)?)) * STRICT,
        ScheduleKind::TangentSpace => eps / ledger.get(names::C_TILDE)?,
    };
    let mut points = vec![];
    let mut excluded = vec![];
    for &h in hs {
        if !(h > 0.0 && h < (-1f64).exp()) {
            excluded.push((h, "h must lie in (0, 1/e)".to_string()));
            continue;
        }
        let ln = (1.0 / h).ln();
        let p = SchedulePoint {
            h,
            radius: h.powf(eps),
            small_radius: h.powf(delta),
            horizon: coefficient * ln,
            ehrenfest: if lambda > 0.0 { ln / (2.0 * lambda) } else { f64::INFINITY },
        };
        if 8.0 * p.small_radius > p.radius {
            excluded.push((h, format!("8h^δ = {:.3e} exceeds R = {:.3e}", 8.0 * p.small_radius, p.radius)));
        } else if p.radius > r_max {
            excluded.push((h, format!("R = {:.3e} exceeds R₀ = {r_max}", p.radius)));
        } else if p.horizon > 2.0 * alpha * p.ehrenfest {
            excluded.push((h, format!("T₀ = {:.3e} exceeds 2αT_e = {:.3e}", p.horizon, 2.0 * alpha * p.ehrenfest)));
        } else {
            points.push(p);
        }
    }
    if points.is_empty() {
        return Err(GeoError::Infeasible(format!("no grid point satisfies the schedule inequalities: {excluded:?}")));
    }
    Ok(Schedule { kind: opts.kind, eps, delta, alpha, t_start: opts.t_start, coefficient, lambda, r_max, points, excluded })
}

impl Schedule {
    /// `T₀(h)` from the horizon rule, whether or not `h` is on the grid.
    pub fn horizon(&self, h: f64) -> f64 {
        self.coefficient * (1.0 / h).ln()
    }

    pub fn point(&self, h: f64) -> Result<&SchedulePoint> {
        self.points
            .iter()
            .find(|p| (p.h - h).abs() <= 1e-12 * h)
            .ok_or_else(|| GeoError::Precondition(format!("h = {h} is not a feasible point of the schedule")))
    }
}

// ---------------------------------------------------------------------------
// Bound evaluation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RungCount {
    pub count: f64,
    pub t_start: f64,
    pub t_end: f64,
}

/// Counts of a partition, measured at tube radius `r`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionCounts {
    pub dim: usize,
    pub codim: usize,
    pub color_count: usize,
    pub tau: f64,
    pub r: f64,
    pub bad: f64,
    pub rungs: Vec<RungCount>,
}

impl From<&CoverPartition> for PartitionCounts {
    fn from(p: &CoverPartition) -> Self {
        PartitionCounts {
            dim: p.dim,
            codim: p.codim,
            color_count: p.color_count,
            tau: p.tau,
            r: p.r,
            bad: p.bad.len() as f64,
            rungs: p
                .rungs
                .iter()
                .map(|g| RungCount { count: g.tubes.len() as f64, t_start: g.t_start, t_end: g.t_end })
                .collect(),
        }
    }
}

/// Ladder counts `|G_ℓ| = c·5^{−ℓ}R^{1−n}` on `[t₀, 2^{−ℓ}T₀]` and `|B| = c·e^{−c_B T₀}R^{1−n}`.
pub fn synthetic_ladder(point: &SchedulePoint, t_start: f64, c: f64, bad_rate: f64, dim: usize, codim: usize) -> PartitionCounts {
    let scale = point.radius.powi(1 - dim as i32);
    let t1 = point.horizon.max(t_start);
    let m = (t1 / t_start).log2().floor().max(0.0) as i32;
    PartitionCounts {
        dim,
        codim,
        color_count: 1,
        tau: 1.0,
        r: point.radius,
        bad: c * (-bad_rate * t1).exp() * scale,
        rungs: (0..=m)
            .map(|l| RungCount { count: c * 5f64.powi(-l) * scale, t_start, t_end: t1 / 2f64.powi(l) })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Classical,
    LogImproved,
}

/// `λ^{(k−1)/2}`, divided by `√log λ` for the log-improved rate.
pub fn baseline(lambda: f64, k: usize, kind: BaselineKind) -> Result<f64> {
    if !(lambda > std::f64::consts::E) {
        return Err(GeoError::Precondition(format!("λ = {lambda} must exceed e")));
    }
    let c = lambda.powf(0.5 * (k as f64 - 1.0));
    Ok(match kind {
        BaselineKind::Classical => c,
        BaselineKind::LogImproved => c / lambda.ln().sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub h: f64,
    pub radius: f64,
    /// `(r/R)^{n−1}`, applied to measured counts.
    pub count_scale: f64,
    pub bad_term: f64,
    pub good_term: f64,
    pub prefactor: f64,
    /// Bound on `h^{(k−1)/2}|∫_H w u|/‖u‖`.
    pub bound: f64,
    pub classical: f64,
    pub log_improved: f64,
    /// `bound·√log(1/h)`, flat exactly when the bound follows the log-improved rate.
    pub ratio: f64,
    /// Remainder terms, zero for exact eigenfunctions.
    pub remainders: Vec<String>,
}

/// Evaluates the bound at a feasible schedule point. Counts measured at radius `r`
/// are carried to `R(h)` by the power law `(r/R)^{n−1}`.
pub fn evaluate_bound(
    counts: &PartitionCounts,
    schedule: &Schedule,
    h: f64,
    ledger: &ConstantsLedger,
    weight_sup: f64,
) -> Result<BoundEstimate> {
    let point = schedule.point(h)?;
    let limit = 2.0 * schedule.alpha * point.ehrenfest;
    for (l, g) in counts.rungs.iter().enumerate() {
        if g.t_end > limit {
            return Err(GeoError::Precondition(format!("rung {l}: T = {} exceeds 2αT_e = {limit:.4}", g.t_end)));
        }
        if !(g.t_start > 0.0 && g.t_end >= g.t_start) {
            return Err(GeoError::Precondition(format!("rung {l}: window [{}, {}] is empty", g.t_start, g.t_end)));
        }
    }
    if !(counts.tau > 0.0 && counts.r > 0.0) || counts.bad < 0.0 || counts.rungs.iter().any(|g| g.count < 0.0) {
        return Err(GeoError::Precondition("partition counts must be nonnegative with τ, r > 0".into()));
    }
    let c = ledger.get(names::C_BOUND)?;
    let n1 = counts.dim as i32 - 1;
    let scale = (counts.r / point.radius).powi(n1);
    let bad_term = (counts.bad * scale).sqrt();
    let good_term: f64 = counts.rungs.iter().map(|g| (g.count * scale * g.t_start / g.t_end).sqrt()).sum();
    let prefactor =
        c * counts.color_count as f64 * weight_sup * point.radius.powf(0.5 * n1 as f64) / counts.tau.sqrt();
    let bound = prefactor * (bad_term + good_term);
    let lambda = 1.0 / h;
    Ok(BoundEstimate {
        h,
        radius: point.radius,
        count_scale: scale,
        bad_term,
        good_term,
        prefactor,
        bound,
        classical: baseline(lambda, counts.codim, BaselineKind::Classical)?,
        log_improved: baseline(lambda, counts.codim, BaselineKind::LogImproved)?,
        ratio: bound * lambda.ln().sqrt(),
        remainders: vec![
            "C·𝔇·‖w‖∞·R^((n−1)/2)·τ^(−1/2)·Σ(|G_ℓ|t_ℓT_ℓ)^(1/2)·h^(−1)·‖(−h²Δ−1)u‖ = 0".into(),
            "C·h^(−1)·‖w‖∞·‖(−h²Δ−1)u‖_{H^((k−3)/2)} = 0".into(),
            "C_N·h^N·(‖u‖ + ‖(−h²Δ−1)u‖) not evaluated".into(),
        ],
    })
}

pub fn write_bound_csv<W: Write>(estimates: &[BoundEstimate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["h", "bad_term", "good_term", "bound", "classical", "logImproved", "ratio"])?;
    for e in estimates {
        w.write_record([
            fmt(e.h),
            fmt(e.bad_term),
            fmt(e.good_term),
            fmt(e.bound),
            fmt(e.classical),
            fmt(e.log_improved),
            fmt(e.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Semiclassical Sobolev norm `‖(1 + h²λ²)^{s/2} c‖` of a Fourier expansion
/// with frequencies `λ` and coefficients `c`.
pub fn semiclassical_sobolev(modes: &[(f64, f64)], h: f64, s: f64) -> f64 {
    modes.iter().map(|(l, c)| (1.0 + h * h * l * l).powf(s) * c * c).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Implicit function theorem with radii

type VecFn<'a> = dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync + 'a;

/// `f(x₀, x₁, x₂) = 0` to be solved for `x₀`, with derivative bounds on balls of
/// radii `(r₀, r₁, r₂)`.
pub struct IftProblem<'a> {
    pub dims: [usize; 3],
    pub f: &'a VecFn<'a>,
    /// `(D_{x₀} f(0))^{−1}`.
    pub l: DMatrix<f64>,
    /// `(B₀, B₁, B₂)`: bounds on `∂_{x_i}∂_{x₀} f` over the balls.
    pub mixed: &'a (dyn Fn([f64; 3]) -> [f64; 3] + Sync + 'a),
    /// `(B̃₁, B̃₂)`: bounds on `∂_{x_i} f` over the balls.
    pub first: &'a (dyn Fn([f64; 3]) -> [f64; 2] + Sync + 'a),
}

#[derive(Clone, Debug)]
pub struct IftOptions {
    pub per_decade: usize,
    pub range: (f64, f64),
    pub samples: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for IftOptions {
    fn default() -> Self {
        IftOptions { per_decade: 20, range: (1e-4, 10.0), samples: 100, seed: 0, max_iter: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IftReport {
    pub radii: [f64; 3],
    pub l_norm: f64,
    /// `‖L‖ Σ m_i B_i r_i`.
    pub s: f64,
    /// `r₀ − (S r₀ + ‖L‖ Σ m_i B̃_i r_i)`.
    pub margin: f64,
    pub samples: usize,
    pub converged: usize,
    /// Largest observed ratio of consecutive iteration steps.
    pub max_ratio: f64,
    pub max_residual: f64,
}

fn contraction_terms(p: &IftProblem, l_norm: f64, r: [f64; 3]) -> (f64, f64) {
    let b = (p.mixed)(r);
    let bt = (p.first)(r);
    let m = p.dims.map(|d| d as f64);
    let s = l_norm * (m[0] * b[0] * r[0] + m[1] * b[1] * r[1] + m[2] * b[2] * r[2]);
    let lhs = s * r[0] + l_norm * (m[1] * bt[0] * r[1] + m[2] * bt[1] * r[2]);
    (s, r[0] - lhs)
}

fn ball_sample(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n <= 1.0 {
            return v * radius;
        }
    }
}

/// Largest `r₁r₂` on a logarithmic radius grid subject to `S < 1` and
/// `S r₀ + ‖L‖ Σ m_i B̃_i r_i ≤ r₀`, then a sampled check of the contraction
/// `x₀ ↦ x₀ − L f(x₀, x₁, x₂)`.
pub fn quantitative_ift(p: &IftProblem, opts: &IftOptions) -> Result<IftReport> {
    let [m0, m1, m2] = p.dims;
    if p.l.nrows() != m0 || p.l.ncols() != m0 {
        return Err(GeoError::Precondition(format!("L must be {m0}×{m0}")));
    }
    let zero = |m: usize| DVector::<f64>::zeros(m);
    let f0 = (p.f)(&zero(m0), &zero(m1), &zero(m2));
    if f0.norm() > 1e-12 {
        return Err(GeoError::Precondition(format!("f(0, 0, 0) = {} is not zero", f0.norm())));
    }
    // L must invert the x₀-derivative at the origin
    let step = 1e-6;
    let mut d0 = DMatrix::zeros(m0, m0);
    for j in 0..m0 {
        let mut e = zero(m0);
        e[j] = step;
        let col = ((p.f)(&e, &zero(m1), &zero(m2)) - (p.f)(&(-e.clone()), &zero(m1), &zero(m2))) / (2.0 * step);
        d0.set_column(j, &col);
    }
    if (&p.l * &d0 - DMatrix::identity(m0, m0)).norm() > 1e-5 {
        return Err(GeoError::Precondition("L is not the inverse of D_{x₀} f(0)".into()));
    }
    let l_norm = p.l.clone().singular_values().max();
    let (lo, hi) = opts.range;
    if !(lo > 0.0 && hi > lo && opts.per_decade > 0) {
        return Err(GeoError::Precondition("radius grid needs 0 < lo < hi".into()));
    }
    let count = ((hi / lo).log10() * opts.per_decade as f64).round() as i32;
    let grid: Vec<f64> = (0..=count).map(|i| lo * 10f64.powf(i as f64 / opts.per_decade as f64)).collect();
    let mut best: Option<([f64; 3], f64, f64)> = None;
    for &r0 in &grid {
        for &r1 in &grid {
            for &r2 in &grid {
                let r = [r0, r1, r2];
                let (s, margin) = contraction_terms(p, l_norm, r);
                if !(s < 1.0 && margin >= 0.0) {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => r1 * r2 > b[1] * b[2] * (1.0 + 1e-12),
                };
                if better {
                    best = Some((r, s, margin));
                }
            }
        }
    }
    let (radii, s, margin) = best.ok_or_else(|| GeoError::Infeasible("no grid radii satisfy the contraction conditions".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut converged = 0;
    let mut max_ratio: f64 = 0.0;
    let mut max_residual: f64 = 0.0;
    for _ in 0..opts.samples {
        let x1 = ball_sample(&mut rng, m1, radii[1]);
        let x2 = ball_sample(&mut rng, m2, radii[2]);
        let mut x0 = ball_sample(&mut rng, m0, radii[0]);
        let mut prev_step: Option<f64> = None;
        let mut ok = false;
        let mut inside = true;
        for _ in 0..opts.max_iter {
            let next = &x0 - &p.l * (p.f)(&x0, &x1, &x2);
            let stepn = (&next - &x0).norm();
            if let Some(ps) = prev_step {
                if ps > 1e-12 {
                    max_ratio = max_ratio.max(stepn / ps);
                }
            }
            x0 = next;
            inside &= x0.norm() <= radii[0] * (1.0 + 1e-12);
            if stepn <= 1e-14 * (1.0 + x0.norm()) {
                ok = true;
                break;
            }
            prev_step = Some(stepn);
        }
        let res = (p.f)(&x0, &x1, &x2).norm();
        max_residual = max_residual.max(res);
        if ok && inside && res < 1e-10 {
            converged += 1;
        }
    }
    Ok(IftReport { radii, l_norm, s, margin, samples: opts.samples, converged, max_ratio, max_residual })
}
