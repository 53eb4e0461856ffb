//! Submanifolds, their unit conormal bundles and tubes around conormal points.
//!
//! Conormal covectors live in phase coordinates (see [`crate::manifold`]).
//! Distances between phase points use the Sasaki metric: base geodesic
//! distance combined with the fiber angle after parallel transport along the
//! minimizing base geodesic.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{GeoError, Result};
use crate::flow::{default_frame, flow, fmt, tangent_to_jacobi, FlowStepper, PhasePoint, SplittingEstimate, MAX_COORDS};
use crate::manifold::{perpendicular_2d, Coords, ManifoldModel, WarpProfile};

/// Principal angles below this count as a subspace intersection.
pub const INTERSECTION_ANGLE: f64 = 1e-3;
/// Upper end of the ambiguous principal-angle band.
pub const GRAY_ZONE_ANGLE: f64 = 1e-2;

pub(crate) fn coords(v: &[f64]) -> Coords {
    let mut c = [0.0; MAX_COORDS];
    c[..v.len()].copy_from_slice(v);
    c
}

pub(crate) fn dot(a: &Coords, b: &Coords) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub(crate) fn scaled(a: &Coords, s: f64) -> Coords {
    let mut o = *a;
    for v in o.iter_mut() {
        *v *= s;
    }
    o
}

pub(crate) fn add(a: &Coords, b: &Coords, s: f64) -> Coords {
    let mut o = *a;
    for i in 0..MAX_COORDS {
        o[i] += s * b[i];
    }
    o
}

fn wrap_delta(d: f64, period: f64) -> f64 {
    d - period * (d / period).round()
}

/// Chart difference `x2 − x1` reduced to the nearest periodic image.
pub fn chart_difference(model: &ManifoldModel, x1: &Coords, x2: &Coords) -> Coords {
    let mut d = [0.0; MAX_COORDS];
    for i in 0..MAX_COORDS {
        d[i] = x2[i] - x1[i];
    }
    match model {
        ManifoldModel::FlatTorus { periods } => {
            for (i, p) in periods.iter().enumerate() {
                d[i] = wrap_delta(d[i], *p);
            }
        }
        ManifoldModel::Warped { profile } => {
            d[1] = wrap_delta(d[1], 2.0 * PI);
            if let WarpProfile::Revolution { .. } = profile {
                d[0] = wrap_delta(d[0], 2.0 * PI);
            }
        }
        _ => {}
    }
    d
}

/// Orthonormal basis of the tangent space at `x`.
pub fn tangent_basis(model: &ManifoldModel, x: &Coords) -> Vec<Coords> {
    let n = model.dim();
    let len = model.coord_len();
    let sphere = matches!(model, ManifoldModel::RoundSphere { .. });
    let mut basis: Vec<Coords> = Vec::with_capacity(n);
    for k in 0..len {
        if basis.len() == n {
            break;
        }
        let mut e = [0.0; MAX_COORDS];
        e[k] = 1.0;
        if sphere {
            e = add(&e, x, -x[k]);
        }
        for b in &basis {
            e = add(&e, b, -model.inner(x, &e, b));
        }
        let nn = model.inner(x, &e, &e).sqrt();
        if nn > 1e-6 {
            basis.push(scaled(&e, 1.0 / nn));
        }
    }
    basis
}

// ---------------------------------------------------------------------------
// Minimizing geodesics and transport

/// Unit velocities at both ends of a minimizing geodesic.
#[derive(Clone, Copy, Debug)]
pub struct Chord {
    pub length: f64,
    pub v_start: Coords,
    pub v_end: Coords,
}

/// Radius below which minimizing geodesics are computed exactly.
pub fn injectivity_estimate(model: &ManifoldModel) -> f64 {
    match model {
        ManifoldModel::FlatTorus { periods } => periods.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0,
        ManifoldModel::RoundSphere { .. } => PI - 1e-3,
        ManifoldModel::HyperbolicHalfPlane { .. } => f64::INFINITY,
        ManifoldModel::Warped { profile: WarpProfile::Cosh } => PI,
        ManifoldModel::Warped { .. } => model.focal_radius_estimate(),
    }
}

/// Minimizing geodesic from `x1` to `x2`, or `None` beyond the injectivity estimate.
pub fn chord(model: &ManifoldModel, x1: &Coords, x2: &Coords) -> Option<Chord> {
    let zero = [0.0; MAX_COORDS];
    let c = match model {
        ManifoldModel::FlatTorus { .. } => {
            let d = chart_difference(model, x1, x2);
            let l = dot(&d, &d).sqrt();
            let v = if l > 0.0 { scaled(&d, 1.0 / l) } else { zero };
            Chord { length: l, v_start: v, v_end: v }
        }
        ManifoldModel::RoundSphere { .. } => {
            let c = dot(x1, x2).clamp(-1.0, 1.0);
            let l = c.acos();
            let a = add(x2, x1, -c);
            let b = add(x1, x2, -c);
            let (na, nb) = (dot(&a, &a).sqrt(), dot(&b, &b).sqrt());
            if na < 1e-300 {
                Chord { length: l, v_start: zero, v_end: zero }
            } else {
                Chord { length: l, v_start: scaled(&a, 1.0 / na), v_end: scaled(&b, -1.0 / nb) }
            }
        }
        ManifoldModel::HyperbolicHalfPlane { .. } => half_plane_chord(x1, x2),
        ManifoldModel::Warped { .. } => shoot(model, x1, x2)?,
    };
    if c.length > injectivity_estimate(model) {
        return None;
    }
    Some(c)
}

fn half_plane_chord(x1: &Coords, x2: &Coords) -> Chord {
    let (dx, dy) = (x2[0] - x1[0], x2[1] - x1[1]);
    let l = (1.0 + (dx * dx + dy * dy) / (2.0 * x1[1] * x2[1])).acosh();
    let unit = |x: &Coords, w: [f64; 2]| -> Coords {
        let n = (w[0] * w[0] + w[1] * w[1]).sqrt();
        coords(&[x[1] * w[0] / n, x[1] * w[1] / n])
    };
    if dx.abs() <= 1e-12 * (x1[1] + x2[1]) {
        if dy == 0.0 {
            return Chord { length: 0.0, v_start: [0.0; MAX_COORDS], v_end: [0.0; MAX_COORDS] };
        }
        let s = dy.signum();
        let v = unit(x1, [0.0, s]);
        return Chord { length: l, v_start: v, v_end: unit(x2, [0.0, s]) };
    }
    // circle centred on the real axis
    let c = ((x2[0] * x2[0] + x2[1] * x2[1]) - (x1[0] * x1[0] + x1[1] * x1[1])) / (2.0 * dx);
    let tangent = |x: &Coords| -> [f64; 2] {
        let t = [x[1], -(x[0] - c)];
        // orient along increasing x when travelling from x1 to x2
        if t[0] * dx.signum() < 0.0 {
            [-t[0], -t[1]]
        } else {
            t
        }
    };
    Chord { length: l, v_start: unit(x1, tangent(x1)), v_end: unit(x2, tangent(x2)) }
}

fn shoot(model: &ManifoldModel, x1: &Coords, x2: &Coords) -> Option<Chord> {
    let d = chart_difference(model, x1, x2);
    let basis = tangent_basis(model, x1);
    let (a0, b0) = (model.inner(x1, &d, &basis[0]), model.inner(x1, &d, &basis[1]));
    let mut l = (a0 * a0 + b0 * b0).sqrt();
    if l < 1e-14 {
        return Some(Chord { length: 0.0, v_start: [0.0; MAX_COORDS], v_end: [0.0; MAX_COORDS] });
    }
    let mut alpha = b0.atan2(a0);
    let stepper = FlowStepper::with_dt(model, 5e-3);
    let end = |alpha: f64, l: f64| -> PhasePoint {
        let v = add(&scaled(&basis[0], alpha.cos()), &basis[1], alpha.sin());
        let mut p = PhasePoint { x: *x1, xi: model.lower(x1, &v) };
        stepper.advance(&mut p, l);
        p
    };
    let resid = |p: &PhasePoint| -> [f64; 2] {
        let r = chart_difference(model, x2, &p.x);
        [r[0], r[1]]
    };
    for _ in 0..40 {
        let p = end(alpha, l);
        let r = resid(&p);
        let rn = model.inner(x2, &coords(&r), &coords(&r)).sqrt();
        if rn < 1e-11 {
            let v_start = add(&scaled(&basis[0], alpha.cos()), &basis[1], alpha.sin());
            return Some(Chord { length: l, v_start, v_end: p.velocity(model) });
        }
        let h = 1e-7;
        let ra = resid(&end(alpha + h, l));
        let rl = resid(&end(alpha, l + h));
        let j = [[(ra[0] - r[0]) / h, (rl[0] - r[0]) / h], [(ra[1] - r[1]) / h, (rl[1] - r[1]) / h]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            return None;
        }
        let da = (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let dl = (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        alpha -= da;
        l -= dl;
        if !(l > 0.0) || !l.is_finite() {
            return None;
        }
    }
    None
}

/// Parallel transport of the tangent vector `v` from `x1` to `x2` along `c`.
pub fn transport(model: &ManifoldModel, x1: &Coords, x2: &Coords, c: &Chord, v: &Coords) -> Coords {
    if c.length == 0.0 {
        return *v;
    }
    match model {
        ManifoldModel::FlatTorus { .. } => *v,
        ManifoldModel::RoundSphere { .. } => {
            let s = dot(x2, v) / (1.0 + dot(x1, x2));
            add(v, &add(x1, x2, 1.0), -s)
        }
        _ => {
            // surfaces: transport preserves the oriented angle with the geodesic
            let n1 = perpendicular_2d(model, x1, &c.v_start);
            let n2 = perpendicular_2d(model, x2, &c.v_end);
            let (a, b) = (model.inner(x1, v, &c.v_start), model.inner(x1, v, &n1));
            add(&scaled(&c.v_end, a), &n2, b)
        }
    }
}

/// Sasaki distance with its components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SasakiDistance {
    pub distance: f64,
    pub base: f64,
    pub fiber: f64,
    /// Set when the base points were too far apart for a minimizing geodesic
    /// and a chordal bound was used instead.
    pub chordal: bool,
}

fn unit_angle(model: &ManifoldModel, x: &Coords, a: &Coords, b: &Coords) -> f64 {
    let c = model.inner(x, a, b) / (model.inner(x, a, a) * model.inner(x, b, b)).sqrt();
    c.clamp(-1.0, 1.0).acos()
}

/// Geodesic distance between base points, `None` beyond the injectivity estimate.
pub fn base_distance(model: &ManifoldModel, x1: &Coords, x2: &Coords) -> Option<f64> {
    match model {
        ManifoldModel::FlatTorus { .. } | ManifoldModel::RoundSphere { .. } | ManifoldModel::HyperbolicHalfPlane { .. } => {
            let d = match model {
                ManifoldModel::FlatTorus { .. } => {
                    let d = chart_difference(model, x1, x2);
                    dot(&d, &d).sqrt()
                }
                ManifoldModel::RoundSphere { .. } => dot(x1, x2).clamp(-1.0, 1.0).acos(),
                _ => {
                    let (dx, dy) = (x2[0] - x1[0], x2[1] - x1[1]);
                    (1.0 + (dx * dx + dy * dy) / (2.0 * x1[1] * x2[1])).acosh()
                }
            };
            (d <= injectivity_estimate(model)).then_some(d)
        }
        ManifoldModel::Warped { .. } => chord(model, x1, x2).map(|c| c.length),
    }
}

/// Sasaki distance between two unit covectors.
pub fn sasaki_distance(model: &ManifoldModel, p: &PhasePoint, q: &PhasePoint) -> SasakiDistance {
    let v1 = p.velocity(model);
    let v2 = q.velocity(model);
    match chord(model, &p.x, &q.x) {
        Some(c) => {
            let w = transport(model, &p.x, &q.x, &c, &v1);
            let fiber = unit_angle(model, &q.x, &w, &v2);
            SasakiDistance { distance: c.length.hypot(fiber), base: c.length, fiber, chordal: false }
        }
        None => {
            // metric averaged over both ends keeps the bound symmetric
            let d = chart_difference(model, &p.x, &q.x);
            let base = 0.5 * (model.inner(&p.x, &d, &d).sqrt() + model.inner(&q.x, &d, &d).sqrt());
            let fiber = 0.5 * (unit_angle(model, &p.x, &v1, &v2) + unit_angle(model, &q.x, &v1, &v2));
            SasakiDistance { distance: base.hypot(fiber), base, fiber, chordal: true }
        }
    }
}

// ---------------------------------------------------------------------------
// Spatial hash

/// Uniform grid over base coordinates, respecting periodic axes.
#[derive(Clone, Debug)]
pub struct SpatialHash {
    model: ManifoldModel,
    cell: f64,
    /// Per axis: cell width and, for periodic axes, the number of cells per period.
    axes: Vec<(f64, Option<i64>)>,
    map: HashMap<[i64; MAX_COORDS], Vec<usize>>,
}

fn hash_coords(model: &ManifoldModel, x: &Coords) -> Coords {
    match model {
        ManifoldModel::FlatTorus { periods } => {
            let mut y = *x;
            for (i, p) in periods.iter().enumerate() {
                y[i] = y[i].rem_euclid(*p);
            }
            y
        }
        ManifoldModel::HyperbolicHalfPlane { .. } => coords(&[x[0], x[1].ln()]),
        ManifoldModel::Warped { profile } => {
            let r = match profile {
                WarpProfile::Revolution { .. } => x[0].rem_euclid(2.0 * PI),
                WarpProfile::Cosh => x[0],
            };
            coords(&[r, x[1].rem_euclid(2.0 * PI)])
        }
        ManifoldModel::RoundSphere { .. } => *x,
    }
}

/// Per-axis half-widths in hash coordinates covering a geodesic ball of radius `radius`.
fn hash_extent(model: &ManifoldModel, x: &Coords, radius: f64) -> Coords {
    match model {
        ManifoldModel::HyperbolicHalfPlane { .. } => coords(&[x[1] * radius.sinh(), radius]),
        ManifoldModel::Warped { profile } => {
            let fmin = match profile {
                WarpProfile::Cosh => (x[0].abs() - radius).max(0.0).cosh(),
                WarpProfile::Revolution { major } => major - 1.0,
            };
            coords(&[radius, radius / fmin])
        }
        _ => [radius; MAX_COORDS],
    }
}

impl SpatialHash {
    pub fn new(model: &ManifoldModel, cell: f64) -> Self {
        let n = model.coord_len();
        let periodic: Vec<Option<f64>> = match model {
            ManifoldModel::FlatTorus { periods } => periods.iter().map(|p| Some(*p)).collect(),
            ManifoldModel::Warped { profile: WarpProfile::Revolution { .. } } => vec![Some(2.0 * PI); 2],
            ManifoldModel::Warped { .. } => vec![None, Some(2.0 * PI)],
            _ => vec![None; n],
        };
        let axes = periodic
            .into_iter()
            .map(|p| match p {
                Some(p) => {
                    let k = ((p / cell).floor() as i64).max(1);
                    (p / k as f64, Some(k))
                }
                None => (cell, None),
            })
            .collect();
        SpatialHash { model: model.clone(), cell, axes, map: HashMap::new() }
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    fn key(&self, y: &Coords) -> [i64; MAX_COORDS] {
        let mut k = [0i64; MAX_COORDS];
        for (i, (w, per)) in self.axes.iter().enumerate() {
            let c = (y[i] / w).floor() as i64;
            k[i] = match per {
                Some(m) => c.rem_euclid(*m),
                None => c,
            };
        }
        k
    }

    pub fn insert(&mut self, id: usize, x: &Coords) {
        let k = self.key(&hash_coords(&self.model, x));
        self.map.entry(k).or_default().push(id);
    }

    pub fn len(&self) -> usize {
        self.map.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Ids stored in cells that may contain points within `radius` of `x` (a superset).
    pub fn query(&self, x: &Coords, radius: f64) -> Vec<usize> {
        let y = hash_coords(&self.model, x);
        let e = hash_extent(&self.model, x, radius);
        let ranges: Vec<Vec<i64>> = self
            .axes
            .iter()
            .enumerate()
            .map(|(i, (w, per))| {
                let lo = ((y[i] - e[i]) / w).floor() as i64;
                let hi = ((y[i] + e[i]) / w).floor() as i64;
                match per {
                    Some(m) if hi - lo + 1 >= *m => (0..*m).collect(),
                    Some(m) => (lo..=hi).map(|c| c.rem_euclid(*m)).collect(),
                    None => (lo..=hi).collect(),
                }
            })
            .collect();
        let total: usize = ranges.iter().map(Vec::len).product();
        if total > self.map.len() {
            // wide query: scan occupied cells instead of the box
            let bounds: Vec<(i64, i64, Option<i64>)> = self
                .axes
                .iter()
                .enumerate()
                .map(|(i, (w, per))| {
                    (((y[i] - e[i]) / w).floor() as i64, ((y[i] + e[i]) / w).floor() as i64, *per)
                })
                .collect();
            let inside = |k: &[i64; MAX_COORDS]| {
                bounds.iter().enumerate().all(|(i, &(lo, hi, per))| match per {
                    Some(m) => hi - lo + 1 >= m || (k[i] - lo).rem_euclid(m) <= hi - lo,
                    None => lo <= k[i] && k[i] <= hi,
                })
            };
            let mut out: Vec<usize> =
                self.map.iter().filter(|(k, _)| inside(k)).flat_map(|(_, v)| v.iter().cloned()).collect();
            out.sort_unstable();
            return out;
        }
        let mut out = vec![];
        let mut idx = vec![0usize; ranges.len()];
        'outer: loop {
            let mut k = [0i64; MAX_COORDS];
            for (i, r) in ranges.iter().enumerate() {
                k[i] = r[idx[i]];
            }
            if let Some(v) = self.map.get(&k) {
                out.extend_from_slice(v);
            }
            for i in 0..ranges.len() {
                idx[i] += 1;
                if idx[i] < ranges[i].len() {
                    continue 'outer;
                }
                idx[i] = 0;
            }
            break;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Submanifolds

/// Shape of a submanifold `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SubmanifoldSpec {
    /// A single point, in phase coordinates.
    Point { x: Vec<f64> },
    /// `{x_axis = offset}` on a flat 2-torus.
    CoordinateCircle { axis: usize, offset: f64 },
    /// The equator `{x₃ = 0}` of `S²`.
    Equator,
    /// `{x = x0, y_min ≤ y ≤ y_max}` in the half-plane.
    VerticalGeodesic { x0: f64, y_min: f64, y_max: f64 },
    /// Geodesic arc of the given length on a surface.
    GeodesicArc { x: Vec<f64>, dir: Vec<f64>, length: f64 },
    /// Arc `center + radius (cos u, sin u)` of a coordinate circle in a chart model.
    ChartCircle { center: [f64; 2], radius: f64, from: f64, to: f64 },
}

/// A closed or compact embedded submanifold `H` of a model.
#[derive(Clone, Debug)]
pub struct Submanifold {
    pub model: ManifoldModel,
    pub spec: SubmanifoldSpec,
    pub codim: usize,
    /// Bound on the curvature and second fundamental form of `H`.
    pub curvature_bound: f64,
    arc_table: Vec<PhasePoint>,
    length_table: Vec<(f64, f64)>,
}

const ARC_TABLE_STEP: f64 = 0.01;

impl Submanifold {
    pub fn new(model: &ManifoldModel, spec: SubmanifoldSpec) -> Result<Self> {
        model.validate()?;
        let n = model.dim();
        let surface_only = |what: &str| -> Result<()> {
            if n != 2 {
                return Err(GeoError::Config(format!("{what} needs a surface")));
            }
            Ok(())
        };
        match (&spec, model) {
            (SubmanifoldSpec::Point { x }, _) => {
                if x.len() != model.coord_len() {
                    return Err(GeoError::Config(format!("point needs {} coordinates", model.coord_len())));
                }
            }
            (SubmanifoldSpec::CoordinateCircle { axis, .. }, ManifoldModel::FlatTorus { periods }) => {
                if periods.len() != 2 || *axis > 1 {
                    return Err(GeoError::Config("coordinate circle needs a 2-torus and axis 0 or 1".into()));
                }
            }
            (SubmanifoldSpec::Equator, ManifoldModel::RoundSphere { dim: 2 }) => {}
            (SubmanifoldSpec::VerticalGeodesic { y_min, y_max, .. }, ManifoldModel::HyperbolicHalfPlane { .. }) => {
                if !(0.0 < *y_min && y_min < y_max) {
                    return Err(GeoError::Config("vertical geodesic needs 0 < y_min < y_max".into()));
                }
            }
            (SubmanifoldSpec::GeodesicArc { length, .. }, _) => {
                surface_only("geodesic arc")?;
                if !(*length > 0.0) {
                    return Err(GeoError::Config("arc length must be positive".into()));
                }
            }
            (SubmanifoldSpec::ChartCircle { radius, from, to, .. }, _) => {
                surface_only("chart circle")?;
                if matches!(model, ManifoldModel::RoundSphere { .. }) {
                    return Err(GeoError::Config("chart circles need a chart model".into()));
                }
                if !(*radius > 0.0 && to > from) {
                    return Err(GeoError::Config("chart circle needs radius > 0 and from < to".into()));
                }
            }
            (s, m) => return Err(GeoError::Config(format!("{s:?} is not available on {}", m.name()))),
        }
        let mut h = Submanifold {
            model: model.clone(),
            codim: if matches!(spec, SubmanifoldSpec::Point { .. }) { n } else { n - 1 },
            spec,
            curvature_bound: 0.0,
            arc_table: vec![],
            length_table: vec![],
        };
        if let SubmanifoldSpec::GeodesicArc { x, dir, length } = &h.spec {
            let mut p = PhasePoint::from_direction(model, x, dir)?;
            let stepper = FlowStepper::new(model);
            let steps = (length / ARC_TABLE_STEP).ceil() as usize;
            h.arc_table.push(p);
            for _ in 0..steps {
                stepper.advance(&mut p, ARC_TABLE_STEP);
                h.arc_table.push(p);
            }
        }
        if !h.is_point() {
            h.check_immersion()?;
            h.build_length_table()?;
            h.curvature_bound = h.geodesic_curvature_bound();
        }
        Ok(h)
    }

    pub fn is_point(&self) -> bool {
        matches!(self.spec, SubmanifoldSpec::Point { .. })
    }

    /// Dimension of `SN*H`, which is `n − 1` for every `H`.
    pub fn conormal_dim(&self) -> usize {
        self.model.dim() - 1
    }

    /// Parameter interval of a curve and whether it closes up.
    pub fn param_range(&self) -> (f64, f64, bool) {
        match &self.spec {
            SubmanifoldSpec::Point { .. } => (0.0, 0.0, false),
            SubmanifoldSpec::CoordinateCircle { axis, .. } => {
                let p = match &self.model {
                    ManifoldModel::FlatTorus { periods } => periods[1 - axis],
                    _ => unreachable!(),
                };
                (0.0, p, true)
            }
            SubmanifoldSpec::Equator => (0.0, 2.0 * PI, true),
            SubmanifoldSpec::VerticalGeodesic { y_min, y_max, .. } => (y_min.ln(), y_max.ln(), false),
            SubmanifoldSpec::GeodesicArc { length, .. } => (0.0, *length, false),
            SubmanifoldSpec::ChartCircle { from, to, .. } => (*from, *to, (to - from - 2.0 * PI).abs() < 1e-12),
        }
    }

    fn clamp_param(&self, u: f64) -> f64 {
        let (a, b, closed) = self.param_range();
        if closed {
            a + (u - a).rem_euclid(b - a)
        } else {
            u.clamp(a, b)
        }
    }

    fn arc_state(&self, u: f64) -> PhasePoint {
        let i = ((u / ARC_TABLE_STEP).floor() as usize).min(self.arc_table.len() - 1);
        let mut p = self.arc_table[i];
        FlowStepper::new(&self.model).advance(&mut p, u - i as f64 * ARC_TABLE_STEP);
        p
    }

    /// Point of `H` at parameter `u`, in phase coordinates.
    pub fn point_at(&self, u: f64) -> Coords {
        let u = self.clamp_param(u);
        match &self.spec {
            SubmanifoldSpec::Point { x } => {
                let mut c = coords(x);
                if let ManifoldModel::RoundSphere { .. } = self.model {
                    let r = dot(&c, &c).sqrt();
                    c = scaled(&c, 1.0 / r);
                }
                c
            }
            SubmanifoldSpec::CoordinateCircle { axis, offset } => {
                let mut c = [0.0; MAX_COORDS];
                c[*axis] = *offset;
                c[1 - axis] = u;
                c
            }
            SubmanifoldSpec::Equator => coords(&[u.cos(), u.sin(), 0.0]),
            SubmanifoldSpec::VerticalGeodesic { x0, .. } => coords(&[*x0, u.exp()]),
            SubmanifoldSpec::GeodesicArc { .. } => self.arc_state(u).x,
            SubmanifoldSpec::ChartCircle { center, radius, .. } => {
                coords(&[center[0] + radius * u.cos(), center[1] + radius * u.sin()])
            }
        }
    }

    /// `dx/du` in phase coordinates.
    pub fn tangent_at(&self, u: f64) -> Coords {
        let u = self.clamp_param(u);
        match &self.spec {
            SubmanifoldSpec::Point { .. } => [0.0; MAX_COORDS],
            SubmanifoldSpec::CoordinateCircle { axis, .. } => {
                let mut c = [0.0; MAX_COORDS];
                c[1 - axis] = 1.0;
                c
            }
            SubmanifoldSpec::Equator => coords(&[-u.sin(), u.cos(), 0.0]),
            SubmanifoldSpec::VerticalGeodesic { .. } => coords(&[0.0, u.exp()]),
            SubmanifoldSpec::GeodesicArc { .. } => self.arc_state(u).velocity(&self.model),
            SubmanifoldSpec::ChartCircle { radius, .. } => coords(&[-radius * u.sin(), radius * u.cos()]),
        }
    }

    fn speed(&self, u: f64) -> f64 {
        let x = self.point_at(u);
        let t = self.tangent_at(u);
        self.model.inner(&x, &t, &t).sqrt()
    }

    fn check_immersion(&self) -> Result<()> {
        let (a, b, _) = self.param_range();
        for i in 0..=64 {
            let u = a + (b - a) * i as f64 / 64.0;
            if self.point_at(u).iter().any(|v| !v.is_finite()) {
                return Err(GeoError::Domain("parametrization leaves the model".into()));
            }
            if let ManifoldModel::HyperbolicHalfPlane { .. } = self.model {
                if self.point_at(u)[1] <= 0.0 {
                    return Err(GeoError::Domain("curve crosses the boundary of the half-plane".into()));
                }
            }
            if self.speed(u) < 1e-8 {
                return Err(GeoError::Domain(format!("parametrization degenerates at u = {u}")));
            }
        }
        Ok(())
    }

    fn build_length_table(&mut self) -> Result<()> {
        let (a, b, _) = self.param_range();
        let m = 2048;
        let h = (b - a) / m as f64;
        let mut s = 0.0;
        self.length_table.push((a, 0.0));
        for i in 0..m {
            let u0 = a + h * i as f64;
            // Simpson on each cell
            s += h / 6.0 * (self.speed(u0) + 4.0 * self.speed(u0 + 0.5 * h) + self.speed(u0 + h));
            self.length_table.push((u0 + h, s));
        }
        Ok(())
    }

    /// Riemannian length of a curve (zero for a point).
    pub fn length(&self) -> f64 {
        self.length_table.last().map(|e| e.1).unwrap_or(0.0)
    }

    /// Arclength from the start of the parameter interval to `u`.
    pub fn arclength_at(&self, u: f64) -> f64 {
        let t = &self.length_table;
        if t.is_empty() {
            return 0.0;
        }
        let i = t.partition_point(|e| e.0 < u).clamp(1, t.len() - 1);
        let (u0, s0) = t[i - 1];
        let (u1, s1) = t[i];
        s0 + (s1 - s0) * (u - u0) / (u1 - u0)
    }

    /// Parameter at arclength `s`.
    pub fn param_at_length(&self, s: f64) -> f64 {
        let t = &self.length_table;
        let i = t.partition_point(|e| e.1 < s).clamp(1, t.len() - 1);
        let (u0, s0) = t[i - 1];
        let (u1, s1) = t[i];
        if s1 == s0 {
            return u0;
        }
        u0 + (u1 - u0) * (s - s0) / (s1 - s0)
    }

    /// Unit normal vector at parameter `u` (curves only).
    pub fn normal_at(&self, u: f64) -> Coords {
        let x = self.point_at(u);
        perpendicular_2d(&self.model, &x, &self.tangent_at(u))
    }

    fn geodesic_curvature_bound(&self) -> f64 {
        let (a, b, _) = self.param_range();
        let m = &self.model;
        let mut worst: f64 = 0.0;
        let h = 1e-4 * (b - a).max(1.0);
        for i in 1..64 {
            let u = a + (b - a) * i as f64 / 64.0;
            let x = self.point_at(u);
            let t = self.tangent_at(u);
            let (tp, tm) = (self.tangent_at(u + h), self.tangent_at(u - h));
            let mut acc = [0.0; MAX_COORDS];
            for k in 0..MAX_COORDS {
                acc[k] = (tp[k] - tm[k]) / (2.0 * h);
            }
            if !matches!(m, ManifoldModel::RoundSphere { .. } | ManifoldModel::FlatTorus { .. }) {
                acc = add(&acc, &m.christoffel_contract(&x, &t, &t), 1.0);
            }
            let nrm = self.normal_at(u);
            let kappa = m.inner(&x, &acc, &nrm).abs() / m.inner(&x, &t, &t);
            worst = worst.max(kappa);
        }
        worst
    }

    /// Conormal point over a curve at parameter `u` on side `sign`.
    pub fn conormal_at(&self, u: f64, sign: f64) -> ConormalPoint {
        let u = self.clamp_param(u);
        let x = self.point_at(u);
        let nrm = scaled(&self.normal_at(u), sign.signum());
        let mut rho = PhasePoint { x, xi: self.model.lower(&x, &nrm) };
        self.model.renormalize(&mut rho);
        ConormalPoint { u: vec![u], fiber: vec![sign.signum()], rho }
    }

    /// Conormal point over a point `H` with fiber angles (one angle for surfaces,
    /// polar and azimuthal angles in dimension three).
    pub fn conormal_fiber(&self, angles: &[f64]) -> ConormalPoint {
        let x = self.point_at(0.0);
        let basis = tangent_basis(&self.model, &x);
        let v = match basis.len() {
            1 => scaled(&basis[0], angles[0].signum()),
            2 => add(&scaled(&basis[0], angles[0].cos()), &basis[1], angles[0].sin()),
            _ => {
                let (th, ph) = (angles[0], angles[1]);
                add(
                    &add(&scaled(&basis[0], th.sin() * ph.cos()), &basis[1], th.sin() * ph.sin()),
                    &basis[2],
                    th.cos(),
                )
            }
        };
        let mut rho = PhasePoint { x, xi: self.model.lower(&x, &v) };
        self.model.renormalize(&mut rho);
        ConormalPoint { u: vec![], fiber: angles.to_vec(), rho }
    }

    /// Largest `|ξ(dx·e)|` over parameter directions, for checking the conormal condition.
    pub fn annihilation_defect(&self, cp: &ConormalPoint) -> f64 {
        if self.is_point() {
            return 0.0;
        }
        let t = self.tangent_at(cp.u[0]);
        let x = self.point_at(cp.u[0]);
        dot(&cp.rho.xi, &t).abs() / self.model.inner(&x, &t, &t).sqrt()
    }

    /// Sasaki distance from `q` to `SN*H`.
    pub fn distance_to_snh(&self, q: &PhasePoint) -> f64 {
        if self.is_point() {
            let x0 = self.point_at(0.0);
            return match base_distance(&self.model, &q.x, &x0) {
                Some(d) => d,
                None => sasaki_distance(&self.model, q, &self.conormal_fiber(&[0.0, 0.0]).rho).base,
            };
        }
        let (a, b, closed) = self.param_range();
        let m = ((self.length() / 0.02).ceil() as usize).clamp(64, 4096);
        let du = (b - a) / m as f64;
        let dist = |u: f64, s: f64| sasaki_distance(&self.model, q, &self.conormal_at(u, s).rho).distance;
        let mut best = (f64::INFINITY, a, 1.0);
        // coarse scan on the base, then refine on both sides of the best node
        for i in 0..=m {
            let u = a + du * i as f64;
            let x = self.point_at(u);
            let d = base_distance(&self.model, &q.x, &x).unwrap_or(f64::INFINITY);
            if d < best.0 {
                best = (d, u, 1.0);
            }
        }
        let mut out = f64::INFINITY;
        for s in [1.0, -1.0] {
            let (lo, hi) = if closed { (best.1 - du, best.1 + du) } else { ((best.1 - du).max(a), (best.1 + du).min(b)) };
            let u = crate::flow::golden_min(|u| dist(u, s), lo, hi, 1e-10);
            out = out.min(dist(u, s)).min(dist(lo, s)).min(dist(hi, s));
        }
        out
    }
}

/// A unit covector conormal to `H`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConormalPoint {
    /// Parameter on `H` (empty for a point).
    pub u: Vec<f64>,
    /// Fiber coordinates: side `±1` for curves, angles for a point.
    pub fiber: Vec<f64>,
    pub rho: PhasePoint,
}

fn greedy_net<T: Clone>(cands: &[T], sep: f64, dist: impl Fn(&T, &T) -> f64) -> Vec<T> {
    let mut out: Vec<T> = vec![];
    for c in cands {
        if out.iter().all(|o| dist(o, c) >= sep) {
            out.push(c.clone());
        }
    }
    out
}

/// Net of `SN*H` with pairwise Sasaki distance at least `spacing/2` and
/// covering radius at most `spacing`.
pub fn sample_snh(h: &Submanifold, spacing: f64) -> Result<Vec<ConormalPoint>> {
    if !(spacing > 0.0) {
        return Err(GeoError::Precondition("spacing must be positive".into()));
    }
    let n = h.model.dim();
    if h.is_point() {
        return Ok(match n {
            1 => vec![h.conormal_fiber(&[1.0]), h.conormal_fiber(&[-1.0])],
            2 => {
                let m = (2.0 * PI / spacing).ceil().max(3.0) as usize;
                (0..m).map(|i| h.conormal_fiber(&[2.0 * PI * i as f64 / m as f64])).collect()
            }
            _ => {
                // Fibonacci lattice at a quarter of the spacing, thinned greedily
                let fine = spacing / 4.0;
                let count = ((4.0 * PI / (fine * fine)).ceil() as usize).max(32);
                let golden = PI * (3.0 - 5f64.sqrt());
                let cands: Vec<ConormalPoint> = (0..count)
                    .map(|i| {
                        let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
                        h.conormal_fiber(&[z.acos(), golden * i as f64])
                    })
                    .collect();
                greedy_net(&cands, 0.75 * spacing, |a, b| sasaki_distance(&h.model, &a.rho, &b.rho).distance)
            }
        });
    }
    let len = h.length();
    let (_, _, closed) = h.param_range();
    let step = 0.75 * spacing;
    let m = if closed { (len / step).ceil().max(3.0) as usize } else { (len / step).ceil() as usize + 1 };
    let ds = if closed { len / m as f64 } else { len / (m - 1).max(1) as f64 };
    let mut out = Vec::with_capacity(2 * m);
    for i in 0..m {
        let u = h.param_at_length(ds * i as f64);
        for s in [1.0, -1.0] {
            out.push(h.conormal_at(u, s));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Defining function

/// A local defining function `F` of `SN*H` with `½d ≤ |F| ≤ 2d` on `d < δ_F`.
#[derive(Clone, Debug)]
pub struct DefiningFunction {
    pub h: Submanifold,
    pub delta_f: f64,
    /// Largest observed `d(q, SN*H) / |F(q)|`, a proxy for the right-inverse norm.
    pub right_inverse_bound: f64,
    /// Extreme ratios `|F|/d` over the verification sample at `δ_F`.
    pub ratio_range: (f64, f64),
}

impl DefiningFunction {
    /// `F(q) ∈ ℝ^{n+1}`: base components first, fiber components after.
    pub fn evaluate(&self, q: &PhasePoint) -> Vec<f64> {
        let h = &self.h;
        let m = &h.model;
        let n = m.dim();
        let mut f = vec![0.0; n + 1];
        if h.is_point() {
            let x0 = h.point_at(0.0);
            match m {
                ManifoldModel::RoundSphere { .. } => {
                    for i in 0..=n {
                        f[i] = q.x[i] - x0[i];
                    }
                }
                _ => {
                    let d = chart_difference(m, &x0, &q.x);
                    let basis = tangent_basis(m, &x0);
                    for (i, e) in basis.iter().enumerate() {
                        f[i] = m.inner(&x0, &d, e);
                    }
                }
            }
            return f;
        }
        let (u, _) = nearest_param(h, &q.x);
        let x = h.point_at(u);
        let nrm = h.normal_at(u);
        let t = perpendicular_2d(m, &x, &nrm);
        let (dist, side) = match chord(m, &x, &q.x) {
            Some(c) => (c.length, m.inner(&x, &c.v_start, &nrm).signum()),
            None => {
                let d = chart_difference(m, &x, &q.x);
                (m.inner(&x, &d, &d).sqrt(), m.inner(&x, &d, &nrm).signum())
            }
        };
        f[0] = side * dist;
        let tq = match chord(m, &x, &q.x) {
            Some(c) => transport(m, &x, &q.x, &c, &t),
            None => t,
        };
        f[1] = dot(&q.xi, &tq) / m.co_norm(&q.x, &q.xi);
        f
    }

    pub fn norm(&self, q: &PhasePoint) -> f64 {
        self.evaluate(q).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn nearest_param(h: &Submanifold, x: &Coords) -> (f64, f64) {
    let (a, b, closed) = h.param_range();
    let m = ((h.length() / 0.02).ceil() as usize).clamp(64, 4096);
    let du = (b - a) / m as f64;
    let d = |u: f64| {
        let y = h.point_at(u);
        base_distance(&h.model, x, &y).unwrap_or_else(|| {
            let c = chart_difference(&h.model, &y, x);
            h.model.inner(&y, &c, &c).sqrt()
        })
    };
    let mut best = (a, f64::INFINITY);
    for i in 0..=m {
        let u = a + du * i as f64;
        let v = d(u);
        if v < best.1 {
            best = (u, v);
        }
    }
    let (lo, hi) = if closed { (best.0 - du, best.0 + du) } else { ((best.0 - du).max(a), (best.0 + du).min(b)) };
    let u = crate::flow::golden_min(d, lo, hi, 1e-12);
    let u = h.clamp_param(u);
    let v = d(u);
    if v <= best.1 {
        (u, v)
    } else {
        best
    }
}

/// Displaces `rho` by a base geodesic of length `s_base` in a random direction
/// and rotates the covector by `s_fiber` (surfaces) after transport.
pub(crate) fn perturb(model: &ManifoldModel, rho: &PhasePoint, s_base: f64, s_fiber: f64, rng: &mut impl Rng) -> Result<PhasePoint> {
    let basis = tangent_basis(model, &rho.x);
    let mut w = [0.0; MAX_COORDS];
    for e in &basis {
        w = add(&w, e, crate::flow::gaussian(rng));
    }
    let wn = model.inner(&rho.x, &w, &w).sqrt();
    w = scaled(&w, 1.0 / wn);
    let v = rho.velocity(model);
    let start = PhasePoint { x: rho.x, xi: model.lower(&rho.x, &w) };
    let end = flow(model, &start, s_base)?;
    let w_end = end.velocity(model);
    let out_v = if model.dim() == 2 {
        let n0 = perpendicular_2d(model, &rho.x, &w);
        let ang = model.inner(&rho.x, &v, &n0).atan2(model.inner(&rho.x, &v, &w)) + s_fiber;
        let n1 = perpendicular_2d(model, &end.x, &w_end);
        add(&scaled(&w_end, ang.cos()), &n1, ang.sin())
    } else {
        w_end
    };
    let mut q = PhasePoint { x: end.x, xi: model.lower(&end.x, &out_v) };
    model.renormalize(&mut q);
    Ok(q)
}

/// Builds the defining function and finds `δ_F` by bisection on the comparability inequality.
pub fn defining_function(h: &Submanifold, seed: u64) -> Result<DefiningFunction> {
    let mut f = DefiningFunction { h: h.clone(), delta_f: 0.0, right_inverse_bound: 0.0, ratio_range: (0.0, 0.0) };
    let samples = sample_snh(h, 0.3)?;
    let check = |f: &DefiningFunction, delta: f64| -> Result<Option<(f64, f64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..48 {
            let rho = &samples[(i * 7) % samples.len()].rho;
            let s = delta * rng.gen_range(0.05..1.0);
            let a = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
            let q = perturb(&h.model, rho, s * a.cos(), s * a.sin(), &mut rng)?;
            let d = h.distance_to_snh(&q);
            if d < 1e-12 {
                continue;
            }
            let ratio = f.norm(&q) / d;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        Ok((lo >= 0.5 && hi <= 2.0).then_some((lo, hi)))
    };
    let cap = injectivity_estimate(&h.model).min(1.0) * 0.5;
    if let Some(r) = check(&f, cap)? {
        f.delta_f = cap;
        f.ratio_range = r;
    } else {
        let floor = 1e-3;
        let Some(r) = check(&f, floor)? else {
            return Err(GeoError::Numeric("defining function is not comparable to the distance at any radius".into()));
        };
        let (mut lo, mut hi, mut best) = (floor, cap, r);
        for _ in 0..12 {
            let mid = (lo * hi).sqrt();
            match check(&f, mid)? {
                Some(r) => {
                    lo = mid;
                    best = r;
                }
                None => hi = mid,
            }
        }
        f.delta_f = lo;
        f.ratio_range = best;
    }
    f.right_inverse_bound = 1.0 / f.ratio_range.0;
    Ok(f)
}

// ---------------------------------------------------------------------------
// Tubes

/// The flow-out `Λ_ρ^τ(r)` of an `r`-ball around a conormal point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tube {
    pub id: usize,
    pub center: ConormalPoint,
    pub tau: f64,
    pub r: f64,
}

/// Whether `q` lies in the tube, by sampling its orbit at step `r/4` over `|t| ≤ τ + r`.
pub fn tube_membership(model: &ManifoldModel, tube: &Tube, q: &PhasePoint) -> bool {
    let span = tube.tau + tube.r;
    let step = tube.r / 4.0;
    let stepper = FlowStepper::with_dt(model, step.min(crate::flow::DEFAULT_DT));
    let mut p = *q;
    stepper.advance(&mut p, -span);
    let m = (2.0 * span / step).ceil() as usize;
    let h = 2.0 * span / m as f64;
    for i in 0..=m {
        if sasaki_distance(model, &p, &tube.center.rho).distance <= tube.r {
            return true;
        }
        if i < m {
            stepper.advance(&mut p, h);
        }
    }
    false
}

/// Lower estimate of the injectivity horizon of the flow-out of `SN*H`, capped at 1.
pub fn tau_inj(h: &Submanifold) -> Result<f64> {
    let spacing = 0.05;
    let tol = 0.5 * spacing;
    let samples = sample_snh(h, spacing)?;
    let model = &h.model;
    let collides = |tau: f64| -> Result<bool> {
        let nt = (tau / spacing).ceil() as usize;
        let dt = tau / nt.max(1) as f64;
        let mut pts: Vec<(usize, f64, PhasePoint)> = vec![];
        let stepper = FlowStepper::new(model);
        for (i, s) in samples.iter().enumerate() {
            for dir in [1.0, -1.0] {
                let mut p = s.rho;
                for k in 0..=nt {
                    if k > 0 || dir > 0.0 {
                        pts.push((i, dir * dt * k as f64, p));
                    }
                    if k < nt {
                        stepper.advance(&mut p, dir * dt);
                    }
                }
            }
        }
        let mut hash = SpatialHash::new(model, tol);
        for (id, (_, _, p)) in pts.iter().enumerate() {
            hash.insert(id, &p.x);
        }
        for (a, (ia, ta, pa)) in pts.iter().enumerate() {
            for b in hash.query(&pa.x, tol) {
                if b <= a {
                    continue;
                }
                let (ib, tb, pb) = &pts[b];
                if sasaki_distance(model, pa, pb).distance >= tol {
                    continue;
                }
                let sep = (ta - tb).abs() + sasaki_distance(model, &samples[*ia].rho, &samples[*ib].rho).distance;
                if sep > 4.0 * spacing {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    };
    if !collides(1.0)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..6 {
        let mid = 0.5 * (lo + hi);
        if collides(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

// ---------------------------------------------------------------------------
// Splitting classification

/// Position of `T_ρ(SN*H)` relative to the stable/unstable splitting.
#[derive(Clone, Debug, Serialize)]
pub struct SplittingClass {
    pub rho: PhasePoint,
    /// `dim T_ρ(SN*H) ∩ E₊` (expanding).
    pub m_plus: usize,
    /// `dim T_ρ(SN*H) ∩ E₋` (contracting).
    pub m_minus: usize,
    pub in_mixed: bool,
    pub in_split: bool,
    /// Mixed and split at once.
    pub in_degenerate: bool,
    /// A principal angle fell in the ambiguous band.
    pub indeterminate: bool,
    /// `(Θ⁺, Θ⁻)` on each basis vector of the tangent space.
    pub theta: Vec<(f64, f64)>,
}

/// Tangent space of `SN*H` at a conormal point, in perpendicular Jacobi coordinates
/// of the default frame (columns).
pub fn conormal_tangent(h: &Submanifold, cp: &ConormalPoint) -> DMatrix<f64> {
    let m = &h.model;
    let frame = default_frame(m, &cp.rho);
    let k = frame.len() - 1;
    let cols: Vec<DVector<f64>> = if h.is_point() {
        // vertical directions: rotations of the covector within the fiber
        (0..k)
            .map(|i| {
                let dxi = m.lower(&cp.rho.x, &frame[i]);
                let d = tangent_to_jacobi(m, &cp.rho, &frame, &[0.0; MAX_COORDS], &dxi);
                let mut v = DVector::zeros(2 * k);
                v.rows_mut(0, k).copy_from(&d.j);
                v.rows_mut(k, k).copy_from(&d.jp);
                v
            })
            .collect()
    } else {
        let u = cp.u[0];
        let s = cp.fiber[0];
        let eps = 1e-6;
        let (p, q) = (h.conormal_at(u + eps, s).rho, h.conormal_at(u - eps, s).rho);
        let mut dx = [0.0; MAX_COORDS];
        let mut dxi = [0.0; MAX_COORDS];
        for i in 0..MAX_COORDS {
            dx[i] = chart_difference(m, &q.x, &p.x)[i] / (2.0 * eps);
            dxi[i] = (p.xi[i] - q.xi[i]) / (2.0 * eps);
        }
        let d = tangent_to_jacobi(m, &cp.rho, &frame, &dx, &dxi);
        let mut v = DVector::zeros(2 * k);
        v.rows_mut(0, k).copy_from(&d.j);
        v.rows_mut(k, k).copy_from(&d.jp);
        vec![v]
    };
    DMatrix::from_columns(&cols)
}

fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    qr.q().columns(0, m.ncols()).into_owned()
}

/// Principal angles (ascending) and the matching directions in `u`.
fn principal_pairs(u: &DMatrix<f64>, v: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let qu = orthonormal_columns(u);
    let qv = orthonormal_columns(v);
    let svd = (qu.transpose() * &qv).svd(true, false);
    let su = svd.u.unwrap();
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|a, b| svd.singular_values[*b].partial_cmp(&svd.singular_values[*a]).unwrap());
    let angles = idx.iter().map(|&i| svd.singular_values[i].clamp(-1.0, 1.0).acos()).collect();
    let dirs = DMatrix::from_columns(&idx.iter().map(|&i| &qu * su.column(i)).collect::<Vec<_>>());
    (angles, dirs)
}

/// Classifies a tangent subspace (columns) against an estimated splitting.
pub fn classify_tangent(rho: &PhasePoint, tangent: &DMatrix<f64>, splitting: &SplittingEstimate) -> Result<SplittingClass> {
    if !splitting.hyperbolic {
        return Err(GeoError::Precondition(format!(
            "splitting residual {:.3e} is too large to classify",
            splitting.residual
        )));
    }
    let mut indeterminate = false;
    let mut intersect = |e: &DMatrix<f64>| -> (usize, DMatrix<f64>) {
        let (angles, dirs) = principal_pairs(tangent, e);
        let mut cols = vec![];
        for (i, a) in angles.iter().enumerate() {
            if *a < INTERSECTION_ANGLE {
                cols.push(dirs.column(i).into_owned());
            } else if *a < GRAY_ZONE_ANGLE {
                indeterminate = true;
            }
        }
        let n = if cols.is_empty() { DMatrix::zeros(tangent.nrows(), 0) } else { DMatrix::from_columns(&cols) };
        (cols.len(), n)
    };
    let (m_plus, n_plus) = intersect(&splitting.e_plus);
    let (m_minus, n_minus) = intersect(&splitting.e_minus);
    let mut sum_cols: Vec<DVector<f64>> = n_plus.column_iter().map(|c| c.into_owned()).collect();
    sum_cols.extend(n_minus.column_iter().map(|c| c.into_owned()));
    let sum_dim = if sum_cols.is_empty() {
        0
    } else {
        DMatrix::from_columns(&sum_cols).singular_values().iter().filter(|s| **s > INTERSECTION_ANGLE).count()
    };
    let in_mixed = m_plus > 0 && m_minus > 0;
    let in_split = sum_dim == tangent.ncols();
    let theta = tangent.column_iter().map(|c| theta_angles(&c.into_owned(), splitting)).collect();
    Ok(SplittingClass {
        rho: *rho,
        m_plus,
        m_minus,
        in_mixed,
        in_split,
        in_degenerate: in_mixed && in_split,
        indeterminate,
        theta,
    })
}

/// Classifies a conormal point of `H`.
pub fn classify_splitting(h: &Submanifold, cp: &ConormalPoint, splitting: &SplittingEstimate) -> Result<SplittingClass> {
    classify_tangent(&cp.rho, &conormal_tangent(h, cp), splitting)
}

/// `Θ⁺ = ‖π₋v‖/‖π₊v‖` and `Θ⁻ = ‖π₊v‖/‖π₋v‖` for the oblique projections onto `E_±`;
/// a vanishing denominator gives `+∞`.
pub fn theta_angles(v: &DVector<f64>, splitting: &SplittingEstimate) -> (f64, f64) {
    let (pp, pm) = oblique_parts(v, splitting);
    let (a, b) = (pp.norm(), pm.norm());
    let ratio = |num: f64, den: f64| if den <= 1e-300 * num.max(1.0) || den == 0.0 { f64::INFINITY } else { num / den };
    (ratio(b, a), ratio(a, b))
}

/// Components of `v` along `E₊` and `E₋`.
pub fn oblique_parts(v: &DVector<f64>, splitting: &SplittingEstimate) -> (DVector<f64>, DVector<f64>) {
    let (ep, em) = (&splitting.e_plus, &splitting.e_minus);
    let k = ep.ncols();
    let mut basis = DMatrix::zeros(v.len(), k + em.ncols());
    basis.columns_mut(0, k).copy_from(ep);
    basis.columns_mut(k, em.ncols()).copy_from(em);
    let c = basis.clone().svd(true, true).solve(v, 1e-14).unwrap_or_else(|_| DVector::zeros(basis.ncols()));
    let clean = |x: f64| if x.abs() < 1e-15 * v.norm() { 0.0 } else { x };
    let cp = DVector::from_fn(k, |i, _| clean(c[i]));
    let cm = DVector::from_fn(em.ncols(), |i, _| clean(c[k + i]));
    (ep * cp, em * cm)
}

/// CSV export of conormal samples with optional classifications.
pub fn write_classification_csv<W: Write>(rows: &[(ConormalPoint, Option<SplittingClass>)], dim: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["u".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.extend((0..dim).map(|i| format!("xi{i}")));
    header.extend(["m_plus", "m_minus", "mixed", "split", "degenerate", "indeterminate"].map(String::from));
    w.write_record(&header)?;
    for (cp, class) in rows {
        let mut rec = vec![cp.u.first().map(|u| fmt(*u)).unwrap_or_default()];
        rec.extend(cp.rho.x[..dim].iter().map(|v| fmt(*v)));
        rec.extend(cp.rho.xi[..dim].iter().map(|v| fmt(*v)));
        match class {
            Some(c) => rec.extend([
                c.m_plus.to_string(),
                c.m_minus.to_string(),
                c.in_mixed.to_string(),
                c.in_split.to_string(),
                c.in_degenerate.to_string(),
                c.indeterminate.to_string(),
            ]),
            None => rec.extend(std::iter::repeat(String::new()).take(6)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
