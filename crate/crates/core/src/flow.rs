//! Geodesic flow on the unit cosphere bundle and its linearization.
//!
//! The flow is integrated with fixed-step RK4 and renormalized onto `|ξ|_g = 1`
//! after every step. Linearized data is carried in a parallel orthonormal frame
//! `E_1, …, E_{n-1}, E_n = γ̇`: a tangent vector of `S*M` splits into a flow
//! component and a perpendicular Jacobi pair `(J, J')`, and on the latter
//! `dφ_t` acts by
//!
//! ```text
//! Φ(t) = [ B(t)   A(t)  ]
//!        [ B'(t)  A'(t) ]
//! ```
//!
//! where `A'' + R A = 0, A(0) = 0, A'(0) = I` and `B'' + R B = 0, B(0) = I, B'(0) = 0`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{GeoError, Result};
use crate::manifold::{frame_drift, perpendicular_2d, Coords, ManifoldModel, WarpProfile};

/// Number of coordinate slots in a [`PhasePoint`].
pub const MAX_COORDS: usize = 4;

/// Default integration step.
pub const DEFAULT_DT: f64 = 1e-3;

/// Floor substituted for a vanishing expansion rate.
pub const LAMBDA_FLOOR: f64 = 0.05;

/// A point `(x, ξ)` of the unit cosphere bundle in phase coordinates.
///
/// Unused trailing slots are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Coords,
    pub xi: Coords,
}

impl PhasePoint {
    /// Builds a unit covector at `x` pointing along the tangent vector `dir`.
    pub fn from_direction(model: &ManifoldModel, x: &[f64], dir: &[f64]) -> Result<Self> {
        let n = model.coord_len();
        if x.len() != n || dir.len() != n {
            return Err(GeoError::Domain(format!("expected {n} phase coordinates")));
        }
        let mut p = PhasePoint { x: [0.0; MAX_COORDS], xi: [0.0; MAX_COORDS] };
        p.x[..n].copy_from_slice(x);
        let mut v = [0.0; MAX_COORDS];
        v[..n].copy_from_slice(dir);
        if let ManifoldModel::RoundSphere { .. } = model {
            let r = norm_n(&p.x, n);
            for c in p.x.iter_mut() {
                *c /= r;
            }
            let d = dot_n(&v, &p.x, n);
            for i in 0..n {
                v[i] -= d * p.x[i];
            }
        }
        if let ManifoldModel::HyperbolicHalfPlane { .. } = model {
            if p.x[1] <= 0.0 {
                return Err(GeoError::Domain("base point below the real axis".into()));
            }
        }
        if model.inner(&p.x, &v, &v) <= 0.0 {
            return Err(GeoError::Domain("direction vanishes".into()));
        }
        p.xi = model.lower(&p.x, &v);
        model.renormalize(&mut p);
        Ok(p)
    }

    /// Unit velocity `g⁻¹ξ`.
    pub fn velocity(&self, model: &ManifoldModel) -> Coords {
        model.raise(&self.x, &self.xi)
    }

    pub fn reversed(&self) -> Self {
        let mut q = *self;
        for c in q.xi.iter_mut() {
            *c = -*c;
        }
        q
    }
}

#[inline]
fn dot_n(a: &Coords, b: &Coords, n: usize) -> f64 {
    (0..n).map(|i| a[i] * b[i]).sum()
}

#[inline]
fn norm_n(a: &Coords, n: usize) -> f64 {
    dot_n(a, a, n).sqrt()
}

#[inline]
fn axpy(y: &Coords, a: f64, x: &Coords) -> Coords {
    let mut out = *y;
    for i in 0..MAX_COORDS {
        out[i] += a * x[i];
    }
    out
}

/// Scalar Jacobi pair, exact on models with isotropic curvature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarJacobi {
    pub a: f64,
    pub ap: f64,
    pub b: f64,
    pub bp: f64,
}

impl ScalarJacobi {
    pub fn identity() -> Self {
        ScalarJacobi { a: 0.0, ap: 1.0, b: 1.0, bp: 0.0 }
    }

    /// Spectral norm of `[[b, a], [b', a']]`.
    pub fn norm(&self) -> f64 {
        mat2_norm(self.b, self.a, self.bp, self.ap)
    }
}

/// Spectral norm of a 2×2 matrix `[[p, q], [r, s]]`.
pub fn mat2_norm(p: f64, q: f64, r: f64, s: f64) -> f64 {
    let f = p * p + q * q + r * r + s * s;
    let d = p * s - q * r;
    let disc = (f * f - 4.0 * d * d).max(0.0).sqrt();
    (0.5 * (f + disc)).sqrt()
}

/// Fixed-step RK4 integrator for the geodesic flow.
#[derive(Clone, Debug)]
pub struct FlowStepper<'a> {
    pub model: &'a ManifoldModel,
    pub dt: f64,
}

impl<'a> FlowStepper<'a> {
    pub fn new(model: &'a ManifoldModel) -> Self {
        FlowStepper { model, dt: DEFAULT_DT }
    }

    pub fn with_dt(model: &'a ManifoldModel, dt: f64) -> Self {
        FlowStepper { model, dt }
    }

    #[inline]
    fn rk4(&self, p: &mut PhasePoint, h: f64) {
        let m = self.model;
        let (k1x, k1p) = m.geodesic_rhs(&p.x, &p.xi);
        let (k2x, k2p) = m.geodesic_rhs(&axpy(&p.x, 0.5 * h, &k1x), &axpy(&p.xi, 0.5 * h, &k1p));
        let (k3x, k3p) = m.geodesic_rhs(&axpy(&p.x, 0.5 * h, &k2x), &axpy(&p.xi, 0.5 * h, &k2p));
        let (k4x, k4p) = m.geodesic_rhs(&axpy(&p.x, h, &k3x), &axpy(&p.xi, h, &k3p));
        for i in 0..MAX_COORDS {
            p.x[i] += h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]);
            p.xi[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
        }
        m.renormalize(p);
    }

    #[inline]
    fn rk4_jacobi(&self, p: &mut PhasePoint, j: &mut ScalarJacobi, h: f64) {
        let m = self.model;
        let x1 = p.x;
        let (k1x, k1p) = m.geodesic_rhs(&p.x, &p.xi);
        let x2 = axpy(&p.x, 0.5 * h, &k1x);
        let (k2x, k2p) = m.geodesic_rhs(&x2, &axpy(&p.xi, 0.5 * h, &k1p));
        let x3 = axpy(&p.x, 0.5 * h, &k2x);
        let (k3x, k3p) = m.geodesic_rhs(&x3, &axpy(&p.xi, 0.5 * h, &k2p));
        let x4 = axpy(&p.x, h, &k3x);
        let (k4x, k4p) = m.geodesic_rhs(&x4, &axpy(&p.xi, h, &k3p));
        let (c1, c2, c3, c4) = (m.curvature_at(&x1), m.curvature_at(&x2), m.curvature_at(&x3), m.curvature_at(&x4));
        let jac = |y: f64, yp: f64| -> (f64, f64) {
            let (a1, v1) = (yp, -c1 * y);
            let (a2, v2) = (yp + 0.5 * h * v1, -c2 * (y + 0.5 * h * a1));
            let (a3, v3) = (yp + 0.5 * h * v2, -c3 * (y + 0.5 * h * a2));
            let (a4, v4) = (yp + h * v3, -c4 * (y + h * a3));
            (
                y + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
                yp + h / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4),
            )
        };
        let (a, ap) = jac(j.a, j.ap);
        let (b, bp) = jac(j.b, j.bp);
        *j = ScalarJacobi { a, ap, b, bp };
        for i in 0..MAX_COORDS {
            p.x[i] += h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]);
            p.xi[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
        }
        m.renormalize(p);
    }

    fn steps_for(&self, t: f64) -> (usize, f64) {
        if t == 0.0 {
            return (0, 0.0);
        }
        let n = (t.abs() / self.dt).ceil().max(1.0) as usize;
        (n, t / n as f64)
    }

    /// Flows `p` for time `t` (negative times run backwards).
    pub fn advance(&self, p: &mut PhasePoint, t: f64) {
        let (n, h) = self.steps_for(t);
        for _ in 0..n {
            self.rk4(p, h);
        }
    }

    /// Flows `p` and a scalar Jacobi pair for time `t`.
    pub fn advance_jacobi(&self, p: &mut PhasePoint, j: &mut ScalarJacobi, t: f64) {
        let (n, h) = self.steps_for(t);
        for _ in 0..n {
            self.rk4_jacobi(p, j, h);
        }
    }

    /// Single step of length `h`, exposed for callers that sample along the orbit.
    #[inline]
    pub fn step(&self, p: &mut PhasePoint, h: f64) {
        self.rk4(p, h);
    }

    #[inline]
    pub fn step_jacobi(&self, p: &mut PhasePoint, j: &mut ScalarJacobi, h: f64) {
        self.rk4_jacobi(p, j, h);
    }
}

/// `φ_t(ρ)`.
pub fn flow(model: &ManifoldModel, rho: &PhasePoint, t: f64) -> Result<PhasePoint> {
    let mut p = *rho;
    FlowStepper::new(model).advance(&mut p, t);
    if p.x.iter().chain(p.xi.iter()).any(|v| !v.is_finite()) {
        return Err(GeoError::Stiffness(format!("state blew up before t = {t}")));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Linearization

/// Options for [`propagate_linearization`].
#[derive(Clone, Debug)]
pub struct LinearizationOptions {
    pub dt: f64,
    /// Record every `record_stride` steps.
    pub record_stride: usize,
    pub reorthonormalize_every: usize,
    /// Perpendicular frame `E_1..E_{n-1}` at the start; built automatically when absent.
    pub initial_frame: Option<Vec<Coords>>,
    /// Largest admissible horizon.
    pub horizon: f64,
}

impl Default for LinearizationOptions {
    fn default() -> Self {
        LinearizationOptions {
            dt: DEFAULT_DT,
            record_stride: 10,
            reorthonormalize_every: 100,
            initial_frame: None,
            horizon: 1000.0,
        }
    }
}

/// One recorded state of a [`FlowSegment`].
#[derive(Clone, Debug)]
pub struct SegmentSample {
    pub t: f64,
    pub point: PhasePoint,
    /// `E_1..E_{n-1}` followed by `E_n = γ̇`.
    pub frame: Vec<Coords>,
    pub a: DMatrix<f64>,
    pub ap: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bp: DMatrix<f64>,
}

impl SegmentSample {
    /// The perpendicular block `Φ(t)` of `dφ_t`.
    pub fn phi(&self) -> DMatrix<f64> {
        let m = self.a.nrows();
        let mut phi = DMatrix::zeros(2 * m, 2 * m);
        phi.view_mut((0, 0), (m, m)).copy_from(&self.b);
        phi.view_mut((0, m), (m, m)).copy_from(&self.a);
        phi.view_mut((m, 0), (m, m)).copy_from(&self.bp);
        phi.view_mut((m, m), (m, m)).copy_from(&self.ap);
        phi
    }

    /// `[A; A']`, the image of the vertical subspace.
    pub fn vertical_block(&self) -> DMatrix<f64> {
        let m = self.a.nrows();
        let mut v = DMatrix::zeros(2 * m, m);
        v.view_mut((0, 0), (m, m)).copy_from(&self.a);
        v.view_mut((m, 0), (m, m)).copy_from(&self.ap);
        v
    }

    /// Wronskian `A'ᵗA − AᵗA'`.
    pub fn wronskian(&self) -> DMatrix<f64> {
        self.ap.transpose() * &self.a - self.a.transpose() * &self.ap
    }
}

/// A geodesic segment with frame and Jacobi data.
#[derive(Clone, Debug)]
pub struct FlowSegment {
    pub model: ManifoldModel,
    pub initial: PhasePoint,
    pub dt: f64,
    pub samples: Vec<SegmentSample>,
}

struct JointState {
    p: PhasePoint,
    frame: Vec<Coords>,
    a: DMatrix<f64>,
    ap: DMatrix<f64>,
    b: DMatrix<f64>,
    bp: DMatrix<f64>,
}

impl JointState {
    fn sample(&self, t: f64) -> SegmentSample {
        SegmentSample {
            t,
            point: self.p,
            frame: self.frame.clone(),
            a: self.a.clone(),
            ap: self.ap.clone(),
            b: self.b.clone(),
            bp: self.bp.clone(),
        }
    }

    fn from_sample(s: &SegmentSample) -> Self {
        JointState {
            p: s.point,
            frame: s.frame.clone(),
            a: s.a.clone(),
            ap: s.ap.clone(),
            b: s.b.clone(),
            bp: s.bp.clone(),
        }
    }
}

fn joint_step(model: &ManifoldModel, s: &mut JointState, h: f64) {
    let stepper = FlowStepper::with_dt(model, h);
    let x0 = s.p.x;
    // frame: transported along the same RK4 stages as the base curve
    let (k1x, k1p) = model.geodesic_rhs(&s.p.x, &s.p.xi);
    let x2 = axpy(&s.p.x, 0.5 * h, &k1x);
    let xi2 = axpy(&s.p.xi, 0.5 * h, &k1p);
    let (k2x, k2p) = model.geodesic_rhs(&x2, &xi2);
    let x3 = axpy(&s.p.x, 0.5 * h, &k2x);
    let xi3 = axpy(&s.p.xi, 0.5 * h, &k2p);
    let (k3x, _k3p) = model.geodesic_rhs(&x3, &xi3);
    let x4 = axpy(&s.p.x, h, &k3x);
    let xi4 = axpy(&s.p.xi, h, &_k3p);
    let stages = [(x0, s.p.xi), (x2, xi2), (x3, xi3), (x4, xi4)];
    let vel: Vec<Coords> = stages.iter().map(|(x, xi)| model.raise(x, xi)).collect();
    for e in s.frame.iter_mut() {
        let f1 = model.transport_rhs(&stages[0].0, &vel[0], e);
        let f2 = model.transport_rhs(&stages[1].0, &vel[1], &axpy(e, 0.5 * h, &f1));
        let f3 = model.transport_rhs(&stages[2].0, &vel[2], &axpy(e, 0.5 * h, &f2));
        let f4 = model.transport_rhs(&stages[3].0, &vel[3], &axpy(e, h, &f3));
        for i in 0..MAX_COORDS {
            e[i] += h / 6.0 * (f1[i] + 2.0 * f2[i] + 2.0 * f3[i] + f4[i]);
        }
    }
    let c = [
        model.curvature_at(&x0),
        model.curvature_at(&x2),
        model.curvature_at(&x3),
        model.curvature_at(&x4),
    ];
    jacobi_rk4_scalar_curv(&mut s.a, &mut s.ap, &c, h);
    jacobi_rk4_scalar_curv(&mut s.b, &mut s.bp, &c, h);
    let _ = k2p;
    stepper.step(&mut s.p, h);
}

// RK4 for Y'' = -K(t) Y with the curvature sampled at the four RK stages.
fn jacobi_rk4_scalar_curv(y: &mut DMatrix<f64>, yp: &mut DMatrix<f64>, c: &[f64; 4], h: f64) {
    let a1 = yp.clone();
    let v1 = &*y * (-c[0]);
    let a2 = &*yp + &v1 * (0.5 * h);
    let v2 = (&*y + &a1 * (0.5 * h)) * (-c[1]);
    let a3 = &*yp + &v2 * (0.5 * h);
    let v3 = (&*y + &a2 * (0.5 * h)) * (-c[2]);
    let a4 = &*yp + &v3 * h;
    let v4 = (&*y + &a3 * h) * (-c[3]);
    *y += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
    *yp += (v1 + v2 * 2.0 + v3 * 2.0 + v4) * (h / 6.0);
}

/// Orthonormal perpendicular frame at `p`, completed by the velocity.
pub fn default_frame(model: &ManifoldModel, p: &PhasePoint) -> Vec<Coords> {
    let n = model.dim();
    let v = p.velocity(model);
    let mut frame: Vec<Coords> = Vec::with_capacity(n);
    if n == 2 {
        frame.push(perpendicular_2d(model, &p.x, &v));
    } else {
        let len = model.coord_len();
        let mut basis: Vec<Coords> = vec![v];
        for k in 0..len {
            if basis.len() == n {
                break;
            }
            let mut e = [0.0; MAX_COORDS];
            e[k] = 1.0;
            if let ManifoldModel::RoundSphere { .. } = model {
                let d = dot_n(&e, &p.x, len);
                e = axpy(&e, -d, &p.x);
            }
            for b in &basis {
                let d = model.inner(&p.x, &e, b) / model.inner(&p.x, b, b);
                e = axpy(&e, -d, b);
            }
            let nn = model.inner(&p.x, &e, &e).sqrt();
            if nn > 1e-6 {
                for c in e.iter_mut() {
                    *c /= nn;
                }
                basis.push(e);
            }
        }
        frame.extend(basis.into_iter().skip(1));
    }
    frame.push(v);
    frame
}

fn reorthonormalize(model: &ManifoldModel, p: &PhasePoint, frame: &mut [Coords]) {
    let n = frame.len();
    let v = p.velocity(model);
    frame[n - 1] = v;
    for i in 0..n - 1 {
        let mut e = frame[i];
        for j in std::iter::once(n - 1).chain(0..i) {
            let d = model.inner(&p.x, &e, &frame[j]);
            e = axpy(&e, -d, &frame[j]);
        }
        if let ManifoldModel::RoundSphere { .. } = model {
            let d = dot_n(&e, &p.x, model.coord_len());
            e = axpy(&e, -d, &p.x);
        }
        let nn = model.inner(&p.x, &e, &e).sqrt();
        for c in e.iter_mut() {
            *c /= nn;
        }
        frame[i] = e;
    }
}

/// Integrates the geodesic from `rho` for time `t_end` with frame and Jacobi data.
pub fn propagate_linearization(
    model: &ManifoldModel,
    rho: &PhasePoint,
    t_end: f64,
    opts: &LinearizationOptions,
) -> Result<FlowSegment> {
    if !(t_end >= 0.0) || t_end > opts.horizon {
        return Err(GeoError::Precondition(format!("horizon {t_end} outside [0, {}]", opts.horizon)));
    }
    let n = model.dim();
    if n < 2 {
        return Err(GeoError::Unsupported("linearization needs dimension at least 2".into()));
    }
    let m = n - 1;
    let frame = match &opts.initial_frame {
        Some(f) => {
            if f.len() != m {
                return Err(GeoError::Precondition(format!("initial frame needs {m} vectors")));
            }
            let mut full = f.clone();
            full.push(rho.velocity(model));
            let drift = frame_drift(model, &rho.x, &full);
            if drift > 1e-6 {
                return Err(GeoError::FrameDrift(drift));
            }
            full
        }
        None => default_frame(model, rho),
    };
    let mut s = JointState {
        p: *rho,
        frame,
        a: DMatrix::zeros(m, m),
        ap: DMatrix::identity(m, m),
        b: DMatrix::identity(m, m),
        bp: DMatrix::zeros(m, m),
    };
    let steps = if t_end == 0.0 { 0 } else { (t_end / opts.dt).ceil().max(1.0) as usize };
    let h = if steps == 0 { 0.0 } else { t_end / steps as f64 };
    let mut samples = vec![s.sample(0.0)];
    for k in 1..=steps {
        joint_step(model, &mut s, h);
        if k % opts.reorthonormalize_every == 0 || k == steps {
            let drift = frame_drift(model, &s.p.x, &s.frame);
            if drift > 1e-6 {
                return Err(GeoError::FrameDrift(drift));
            }
            reorthonormalize(model, &s.p, &mut s.frame);
        }
        if !s.p.x[0].is_finite() || !s.a[(0, 0)].is_finite() {
            return Err(GeoError::Stiffness(format!("state blew up at t = {}", k as f64 * h)));
        }
        if k % opts.record_stride == 0 || k == steps {
            samples.push(s.sample(k as f64 * h));
        }
    }
    Ok(FlowSegment { model: model.clone(), initial: *rho, dt: h.max(f64::MIN_POSITIVE), samples })
}

impl FlowSegment {
    pub fn t_end(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    /// Perpendicular dimension `n − 1`.
    pub fn perp_dim(&self) -> usize {
        self.samples[0].a.nrows()
    }

    /// State at an arbitrary time, re-integrated from the closest earlier sample.
    pub fn state_at(&self, t: f64) -> Result<SegmentSample> {
        let t_end = self.t_end();
        if t < -1e-12 || t > t_end + 1e-12 {
            return Err(GeoError::Precondition(format!("t = {t} outside segment [0, {t_end}]")));
        }
        let idx = match self.samples.binary_search_by(|s| s.t.partial_cmp(&t).unwrap()) {
            Ok(i) => return Ok(self.samples[i].clone()),
            Err(i) => i.saturating_sub(1),
        };
        let start = &self.samples[idx];
        let mut s = JointState::from_sample(start);
        let span = t - start.t;
        let steps = (span / DEFAULT_DT).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for _ in 0..steps {
            joint_step(&self.model, &mut s, h);
        }
        Ok(s.sample(t))
    }

    /// Maximum drift of the Wronskian from its initial value.
    pub fn wronskian_drift(&self) -> f64 {
        let w0 = self.samples[0].wronskian();
        self.samples.iter().map(|s| (s.wronskian() - &w0).abs().max()).fold(0.0, f64::max)
    }

    /// Maximum deviation `||ξ|_g − 1|` over the samples.
    pub fn energy_drift(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| (self.model.co_norm(&s.point.x, &s.point.xi) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `t, x…, ξ…, det A, σ_min(A)` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.model.coord_len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..n).map(|i| format!("xi{i}")));
        header.push("det_a".into());
        header.push("sigma_min_a".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![fmt(s.t)];
            row.extend((0..n).map(|i| fmt(s.point.x[i])));
            row.extend((0..n).map(|i| fmt(s.point.xi[i])));
            row.push(fmt(s.a.determinant()));
            row.push(fmt(sigma_min(&s.a)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

fn sigma_min(a: &DMatrix<f64>) -> f64 {
    a.clone().singular_values().min()
}

// ---------------------------------------------------------------------------
// Tangent vectors ↔ Jacobi data

/// Jacobi data of a tangent vector of `S*M` in the frame at `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobiData {
    /// Component along the flow.
    pub along: f64,
    pub j: DVector<f64>,
    pub jp: DVector<f64>,
}

/// Converts a phase-space variation `(δx, δξ)` into frame Jacobi data.
pub fn tangent_to_jacobi(model: &ManifoldModel, p: &PhasePoint, frame: &[Coords], dx: &Coords, dxi: &Coords) -> JacobiData {
    let v = p.velocity(model);
    let cov = covariant_velocity_variation(model, p, &v, dx, dxi);
    let m = frame.len() - 1;
    JacobiData {
        along: model.inner(&p.x, dx, &frame[m]),
        j: DVector::from_fn(m, |i, _| model.inner(&p.x, dx, &frame[i])),
        jp: DVector::from_fn(m, |i, _| model.inner(&p.x, &cov, &frame[i])),
    }
}

fn covariant_velocity_variation(model: &ManifoldModel, p: &PhasePoint, v: &Coords, dx: &Coords, dxi: &Coords) -> Coords {
    match model {
        ManifoldModel::FlatTorus { .. } => *dxi,
        ManifoldModel::RoundSphere { dim } => {
            let n = dim + 1;
            let d = dot_n(dxi, &p.x, n);
            axpy(dxi, -d, &p.x)
        }
        _ => {
            // δv = g⁻¹δξ − g⁻¹(δg)v, then add Γ(δx, v)
            let gdv = model.metric_variation(&p.x, dx, v);
            let mut rhs = *dxi;
            for i in 0..MAX_COORDS {
                rhs[i] -= gdv[i];
            }
            let dv = model.raise(&p.x, &rhs);
            let gam = model.christoffel_contract(&p.x, dx, v);
            let mut out = dv;
            for i in 0..MAX_COORDS {
                out[i] += gam[i];
            }
            out
        }
    }
}

/// Inverse of [`tangent_to_jacobi`] (with zero covariant flow-direction component).
pub fn jacobi_to_tangent(model: &ManifoldModel, p: &PhasePoint, frame: &[Coords], data: &JacobiData) -> (Coords, Coords) {
    let m = frame.len() - 1;
    let mut dx = [0.0; MAX_COORDS];
    let mut cov = [0.0; MAX_COORDS];
    for i in 0..m {
        dx = axpy(&dx, data.j[i], &frame[i]);
        cov = axpy(&cov, data.jp[i], &frame[i]);
    }
    dx = axpy(&dx, data.along, &frame[m]);
    let v = p.velocity(model);
    let dxi = match model {
        ManifoldModel::FlatTorus { .. } => cov,
        ManifoldModel::RoundSphere { dim } => {
            let d = dot_n(&p.xi, &dx, dim + 1);
            axpy(&cov, -d, &p.x)
        }
        _ => {
            let gam = model.christoffel_contract(&p.x, &dx, &v);
            let mut dv = cov;
            for i in 0..MAX_COORDS {
                dv[i] -= gam[i];
            }
            let mut dxi = model.lower(&p.x, &dv);
            let gdv = model.metric_variation(&p.x, &dx, &v);
            for i in 0..MAX_COORDS {
                dxi[i] += gdv[i];
            }
            dxi
        }
    };
    (dx, dxi)
}

// ---------------------------------------------------------------------------
// Norms, conjugate points

/// Spectral norms of the linearized flow at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DflowNorm {
    /// Norm of `dφ_t` on `T(S*M)`, flow direction included.
    pub full: f64,
    /// Norm of `dφ_t` restricted to the vertical subspace, `‖[A; A']‖`.
    pub vertical: f64,
}

pub fn operator_norm_dflow(segment: &FlowSegment, t: f64) -> Result<DflowNorm> {
    let s = segment.state_at(t)?;
    let phi_norm = s.phi().singular_values().max();
    let vert = s.vertical_block().singular_values().max();
    Ok(DflowNorm { full: phi_norm.max(1.0), vertical: vert })
}

/// Located conjugate times.
#[derive(Clone, Debug, Serialize)]
pub struct ConjugateReport {
    pub points: Vec<(f64, usize)>,
    pub window: (f64, f64),
    pub tolerance: f64,
    pub warnings: Vec<String>,
}

/// Finds the rank drops of `A(t)` in `window`.
///
/// Candidates are sign changes of `det A` and local minima of `σ_min(A)` between
/// recorded samples; each is refined by golden-section search with local
/// re-integration. A singular value counts towards the multiplicity when it is
/// below `tol · ‖[A; A']‖`.
pub fn conjugate_points(segment: &FlowSegment, window: (f64, f64), tol: f64) -> Result<ConjugateReport> {
    let (lo, hi) = window;
    if lo < 0.0 || hi > segment.t_end() + 1e-9 || !(hi > lo) {
        return Err(GeoError::Precondition(format!("window {window:?} not covered by the segment")));
    }
    let samples: Vec<&SegmentSample> = segment.samples.iter().filter(|s| s.t > 0.0).collect();
    let mut out = ConjugateReport { points: vec![], window, tolerance: tol, warnings: vec![] };
    let eval = |t: f64| -> Result<(f64, DVector<f64>, f64)> {
        let s = segment.state_at(t)?;
        let sv = s.a.clone().singular_values();
        let scale = s.vertical_block().singular_values().max();
        Ok((sv.min() / scale, sv, scale))
    };
    let rel = |s: &SegmentSample| sigma_min(&s.a) / s.vertical_block().singular_values().max();
    let mut candidates: Vec<(f64, f64)> = vec![];
    for w in samples.windows(3) {
        let (s0, s1, s2) = (w[0], w[1], w[2]);
        let d0 = s0.a.determinant();
        let d1 = s1.a.determinant();
        if d0 == 0.0 || d0.signum() != d1.signum() {
            candidates.push((s0.t, s1.t));
        }
        let (r0, r1, r2) = (rel(s0), rel(s1), rel(s2));
        if r1 < r0 && r1 <= r2 && r1 < 0.05 {
            candidates.push((s0.t, s2.t));
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut found: Vec<(f64, usize, f64)> = vec![];
    for (a, b) in candidates {
        let t = golden_min(|t| eval(t).map(|e| e.0).unwrap_or(f64::INFINITY), a, b, 1e-12);
        let (_, sv, scale) = eval(t)?;
        let mult = sv.iter().filter(|v| **v < tol * scale).count();
        if mult == 0 || t < lo || t > hi {
            continue;
        }
        if let Some(last) = found.last() {
            if (t - last.0).abs() < 2.0 * segment.dt * 10.0 {
                if (t - last.0).abs() > 1e-6 {
                    out.warnings.push(format!("conjugate times {:.6} and {:.6} closer than the sampling step", last.0, t));
                }
                continue;
            }
        }
        found.push((t, mult, scale));
    }
    out.points = found.into_iter().map(|(t, m, _)| (t, m)).collect();
    Ok(out)
}

/// Golden-section minimization on [a, b].
pub(crate) fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() < tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        c
    } else {
        d
    }
}

// ---------------------------------------------------------------------------
// Riccati comparison

/// Piecewise-constant symmetric curvature on `[a, b]`: piece `i` covers
/// `[breaks[i], breaks[i+1])`.
#[derive(Clone, Debug)]
pub struct PiecewiseCurvature {
    pub breaks: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl PiecewiseCurvature {
    pub fn constant(a: f64, b: f64, r: DMatrix<f64>) -> Self {
        PiecewiseCurvature { breaks: vec![a, b], values: vec![r] }
    }

    pub fn span(&self) -> (f64, f64) {
        (self.breaks[0], *self.breaks.last().unwrap())
    }

    pub fn dim(&self) -> usize {
        self.values[0].nrows()
    }

    fn validate(&self, k: f64) -> Result<()> {
        if self.breaks.len() != self.values.len() + 1 || self.values.is_empty() {
            return Err(GeoError::Precondition("breaks and pieces do not match".into()));
        }
        if self.breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GeoError::Precondition("breaks must increase".into()));
        }
        for r in &self.values {
            if (r - r.transpose()).abs().max() > 1e-12 {
                return Err(GeoError::Precondition("curvature matrix not symmetric".into()));
            }
            let low = SymmetricEigen::new(r.clone()).eigenvalues.min();
            if low < -k * k - 1e-12 {
                return Err(GeoError::Precondition(format!("curvature {low} below −k² = {}", -k * k)));
            }
        }
        Ok(())
    }
}

/// Outcome of a Riccati comparison check.
#[derive(Clone, Debug, Serialize)]
pub struct RiccatiReport {
    /// `max (|⟨Ux,x⟩| − bound)` over the grid and test vectors; `≤ 0` means no violation.
    pub max_violation: f64,
    /// `min (bound − ‖U‖)` over the grid; zero when the bound is attained.
    pub min_gap: f64,
    /// Interior times where `X` was singular and the interval was split.
    pub splits: Vec<f64>,
    pub checked_points: usize,
}

/// Propagates `U = X'X⁻¹` from `X(a) = 0, X'(a) = I` and compares it with the
/// comparison bound `k·max(|coth k(t−c)|, |coth k(t−d)|)` on each maximal
/// interval `(c, d)` where `X` is invertible.
pub fn riccati_bound_check(curv: &PiecewiseCurvature, k: f64, grid: usize, seed: u64) -> Result<RiccatiReport> {
    curv.validate(k)?;
    if !(k > 0.0) {
        return Err(GeoError::Precondition("k must be positive".into()));
    }
    let m = curv.dim();
    let (a, b) = curv.span();
    // Fine trajectory aligned with the piece boundaries.
    let mut traj: Vec<(f64, DMatrix<f64>, DMatrix<f64>)> = vec![(a, DMatrix::zeros(m, m), DMatrix::identity(m, m))];
    let mut x = DMatrix::zeros(m, m);
    let mut xp = DMatrix::identity(m, m);
    for (i, r) in curv.values.iter().enumerate() {
        let (t0, t1) = (curv.breaks[i], curv.breaks[i + 1]);
        let steps = ((t1 - t0) / 1e-3).ceil().max(1.0) as usize;
        let h = (t1 - t0) / steps as f64;
        for s in 1..=steps {
            jacobi_rk4_matrix(&mut x, &mut xp, r, h);
            traj.push((t0 + s as f64 * h, x.clone(), xp.clone()));
        }
    }
    // Interior singular times of X.
    let rel = |x: &DMatrix<f64>, xp: &DMatrix<f64>| -> f64 {
        let mut v = DMatrix::zeros(2 * m, m);
        v.view_mut((0, 0), (m, m)).copy_from(x);
        v.view_mut((m, 0), (m, m)).copy_from(xp);
        sigma_min(x) / v.singular_values().max()
    };
    let mut splits = vec![];
    for w in traj.windows(3).skip(1) {
        let (r0, r1, r2) = (rel(&w[0].1, &w[0].2), rel(&w[1].1, &w[1].2), rel(&w[2].1, &w[2].2));
        let sign_change = w[0].1.determinant().signum() != w[1].1.determinant().signum();
        if (r1 < r0 && r1 <= r2 && r1 < 1e-2) || sign_change {
            let t = golden_min(
                |t| {
                    let (x, xp) = riccati_state_at(curv, &traj, t);
                    rel(&x, &xp)
                },
                w[0].0,
                w[2].0,
                1e-13,
            );
            let (xs, xps) = riccati_state_at(curv, &traj, t);
            if rel(&xs, &xps) < 1e-6 && splits.last().map_or(true, |l: &f64| t - l > 1e-6) {
                splits.push(t);
            }
        }
    }
    let mut ends = vec![a];
    ends.extend(splits.iter().cloned());
    ends.push(b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_violation = f64::NEG_INFINITY;
    let mut min_gap = f64::INFINITY;
    let mut checked = 0;
    let coth = |z: f64| 1.0 / z.tanh();
    for gi in 1..grid {
        let t = a + (b - a) * gi as f64 / grid as f64;
        let idx = ends.windows(2).position(|w| t > w[0] && t < w[1]);
        let Some(idx) = idx else { continue };
        let (c, d) = (ends[idx], ends[idx + 1]);
        // stay clear of the endpoints where U and the bound both blow up
        if (t - c).min(d - t) < 1e-3 {
            continue;
        }
        let (x, xp) = riccati_state_at(curv, &traj, t);
        let Some(xinv) = x.clone().try_inverse() else { continue };
        let u = &xp * xinv;
        let u = (&u + u.transpose()) * 0.5;
        let bound = k * coth(k * (t - c)).abs().max(coth(k * (t - d)).abs());
        let eig = SymmetricEigen::new(u.clone()).eigenvalues;
        let unorm = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
        max_violation = max_violation.max(unorm - bound);
        min_gap = min_gap.min(bound - unorm);
        for _ in 0..64 {
            let mut v = DVector::from_fn(m, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let nv = v.norm();
            if nv == 0.0 {
                continue;
            }
            v /= nv;
            let q = (&u * &v).dot(&v);
            max_violation = max_violation.max(q.abs() - bound);
        }
        checked += 1;
    }
    Ok(RiccatiReport { max_violation, min_gap, splits, checked_points: checked })
}

fn jacobi_rk4_matrix(y: &mut DMatrix<f64>, yp: &mut DMatrix<f64>, r: &DMatrix<f64>, h: f64) {
    let a1 = yp.clone();
    let v1 = -(r * &*y);
    let a2 = &*yp + &v1 * (0.5 * h);
    let v2 = -(r * (&*y + &a1 * (0.5 * h)));
    let a3 = &*yp + &v2 * (0.5 * h);
    let v3 = -(r * (&*y + &a2 * (0.5 * h)));
    let a4 = &*yp + &v3 * h;
    let v4 = -(r * (&*y + &a3 * h));
    *y += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
    *yp += (v1 + v2 * 2.0 + v3 * 2.0 + v4) * (h / 6.0);
}

fn riccati_state_at(
    curv: &PiecewiseCurvature,
    traj: &[(f64, DMatrix<f64>, DMatrix<f64>)],
    t: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let idx = traj.partition_point(|s| s.0 <= t).saturating_sub(1);
    let (t0, x0, xp0) = &traj[idx];
    let mut x = x0.clone();
    let mut xp = xp0.clone();
    let mut tc = *t0;
    while tc < t - 1e-15 {
        let piece = curv.breaks.partition_point(|bk| *bk <= tc).saturating_sub(1).min(curv.values.len() - 1);
        let piece_end = curv.breaks[piece + 1];
        let target = t.min(piece_end);
        let span = target - tc;
        if span <= 0.0 {
            tc = piece_end;
            continue;
        }
        let steps = (span / 1e-4).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for _ in 0..steps {
            jacobi_rk4_matrix(&mut x, &mut xp, &curv.values[piece], h);
        }
        tc = target;
    }
    (x, xp)
}

// ---------------------------------------------------------------------------
// Expansion rate, Ehrenfest time

#[derive(Clone, Debug, Serialize)]
pub struct LambdaEstimate {
    pub lambda_hat: f64,
    pub sample_min: f64,
    pub sample_max: f64,
    pub samples: usize,
    pub horizon: f64,
}

/// Random unit covector in a bounded region of the model.
pub fn random_phase_point(model: &ManifoldModel, rng: &mut impl Rng) -> PhasePoint {
    let n = model.coord_len();
    let mut x = vec![0.0; n];
    let mut d = vec![0.0; n];
    match model {
        ManifoldModel::FlatTorus { periods } => {
            for i in 0..n {
                x[i] = rng.gen::<f64>() * periods[i];
            }
        }
        ManifoldModel::RoundSphere { .. } => {
            for v in x.iter_mut() {
                *v = gaussian(rng);
            }
        }
        ManifoldModel::HyperbolicHalfPlane { x_min, x_max, y_min, y_max } => {
            let (lo, hi) = (x_min.max(-1.0), x_max.min(1.0));
            x[0] = lo + rng.gen::<f64>() * (hi - lo);
            let (ylo, yhi) = (y_min.max(0.5).ln(), y_max.min(2.0).ln());
            x[1] = (ylo + rng.gen::<f64>() * (yhi - ylo)).exp();
        }
        ManifoldModel::Warped { profile } => {
            x[0] = match profile {
                WarpProfile::Cosh => rng.gen::<f64>() * 2.0 - 1.0,
                WarpProfile::Revolution { .. } => rng.gen::<f64>() * 2.0 * PI,
            };
            x[1] = rng.gen::<f64>() * 2.0 * PI;
        }
    }
    loop {
        for v in d.iter_mut() {
            *v = gaussian(rng);
        }
        if let Ok(p) = PhasePoint::from_direction(model, &x, &d) {
            return p;
        }
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// `max (1/T) log ‖dφ_T‖` over random initial points.
pub fn estimate_lambda_max(model: &ManifoldModel, sample_count: usize, horizon: f64, seed: u64) -> Result<LambdaEstimate> {
    if sample_count < 32 {
        return Err(GeoError::Precondition("at least 32 samples are required".into()));
    }
    if !(horizon > 0.0) {
        return Err(GeoError::Precondition("horizon must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<PhasePoint> = (0..sample_count).map(|_| random_phase_point(model, &mut rng)).collect();
    let rates: Vec<f64> = points
        .iter()
        .map(|p| {
            let mut q = *p;
            let mut j = ScalarJacobi::identity();
            FlowStepper::new(model).advance_jacobi(&mut q, &mut j, horizon);
            j.norm().max(1.0).ln() / horizon
        })
        .collect();
    let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(LambdaEstimate { lambda_hat: max, sample_min: min, sample_max: max, samples: sample_count, horizon })
}

/// `log(1/h) / (2Λ)`, with `floor` substituted when `Λ` is not above it.
pub fn ehrenfest_time(h: f64, lambda: f64, floor: f64) -> Result<f64> {
    if !(h > 0.0 && h < 1.0) {
        return Err(GeoError::Precondition(format!("h = {h} not in (0, 1)")));
    }
    if !(floor > 0.0) {
        return Err(GeoError::Precondition("floor must be positive".into()));
    }
    let l = if lambda > floor { lambda } else { floor };
    Ok((1.0 / h).ln() / (2.0 * l))
}

// ---------------------------------------------------------------------------
// Stable/unstable splitting

/// Estimated splitting at one point.
#[derive(Clone, Debug, Serialize)]
pub struct SplittingEstimate {
    pub point: PhasePoint,
    /// Columns span the expanding subspace, in perpendicular frame coordinates `(J, J')`.
    pub e_plus: DMatrix<f64>,
    /// Columns span the contracting subspace.
    pub e_minus: DMatrix<f64>,
    pub invariance_residual: f64,
    pub convergence_residual: f64,
    /// Smallest principal angle between the two subspaces.
    pub angle: f64,
    /// `max(invariance, convergence) / sin(angle)`.
    pub residual: f64,
    /// Empirical constant in `|dφ_t v| ≤ B e^{∓t/B}|v|`, when hyperbolic.
    pub b_hat: Option<f64>,
    pub hyperbolic: bool,
}

/// Residual above which a splitting is reported unusable.
pub const SPLITTING_THRESHOLD: f64 = 0.1;

fn smallest_right_singular(phi: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let ata = phi.transpose() * phi;
    let eig = SymmetricEigen::new(ata);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|a, b| eig.eigenvalues[*a].partial_cmp(&eig.eigenvalues[*b]).unwrap());
    DMatrix::from_fn(phi.ncols(), k, |r, c| eig.eigenvectors[(r, idx[c])])
}

fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    qr.q().columns(0, m.ncols()).into_owned()
}

/// `‖P_U − P_V‖` for subspaces given by basis columns.
pub fn subspace_distance(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let qu = orthonormalize(u);
    let qv = orthonormalize(v);
    let pu = &qu * qu.transpose();
    let pv = &qv * qv.transpose();
    (pu - pv).singular_values().max()
}

/// Smallest principal angle between two subspaces.
pub fn principal_angle(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let qu = orthonormalize(u);
    let qv = orthonormalize(v);
    let c = (qu.transpose() * qv).singular_values().max().min(1.0);
    c.acos()
}

fn reversal(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(2 * m, 2 * m, |i, j| if i != j { 0.0 } else if i < m { 1.0 } else { -1.0 })
}

/// Forward and backward perpendicular linearizations from `p` in the given frame.
fn forward_backward(model: &ManifoldModel, p: &PhasePoint, frame: &[Coords], t: f64) -> Result<(FlowSegment, FlowSegment)> {
    let m = frame.len() - 1;
    let opts = LinearizationOptions { initial_frame: Some(frame[..m].to_vec()), ..Default::default() };
    let fwd = propagate_linearization(model, p, t, &opts)?;
    let bwd = propagate_linearization(model, &p.reversed(), t, &opts)?;
    Ok((fwd, bwd))
}

/// Estimates `E_±` at `rho` from the linearization over `[−T, T]`.
pub fn stable_unstable(model: &ManifoldModel, rho: &PhasePoint, horizon: f64) -> Result<SplittingEstimate> {
    if horizon < 5.0 {
        return Err(GeoError::Precondition("splitting horizon must be at least 5".into()));
    }
    let frame = default_frame(model, rho);
    let m = frame.len() - 1;
    let d = reversal(m);
    let spaces = |p: &PhasePoint, fr: &[Coords], t: f64| -> Result<(DMatrix<f64>, DMatrix<f64>, FlowSegment, FlowSegment)> {
        let (fwd, bwd) = forward_backward(model, p, fr, t)?;
        let phi_f = fwd.samples.last().unwrap().phi();
        let phi_b = &d * bwd.samples.last().unwrap().phi() * &d;
        Ok((smallest_right_singular(&phi_b, m), smallest_right_singular(&phi_f, m), fwd, bwd))
    };
    let (e_plus, e_minus, fwd, bwd) = spaces(rho, &frame, horizon)?;
    let (e_plus_half, e_minus_half, _, _) = spaces(rho, &frame, 0.5 * horizon)?;
    let convergence = subspace_distance(&e_plus, &e_plus_half).max(subspace_distance(&e_minus, &e_minus_half));
    // invariance: push E_± forward by one unit and compare with the estimate there
    let one = fwd.state_at(1.0)?;
    let (e_plus_1, e_minus_1, _, _) = spaces(&one.point, &one.frame, horizon)?;
    let phi1 = one.phi();
    let invariance =
        subspace_distance(&(&phi1 * &e_plus), &e_plus_1).max(subspace_distance(&(&phi1 * &e_minus), &e_minus_1));
    let angle = principal_angle(&e_plus, &e_minus);
    let residual = invariance.max(convergence) / angle.sin().max(1e-300);
    let hyperbolic = residual <= SPLITTING_THRESHOLD;
    let b_hat = if hyperbolic {
        let mut ratios: Vec<(f64, f64)> = vec![];
        for s in fwd.samples.iter().skip(1) {
            let v = s.phi() * &e_minus;
            ratios.push((s.t, v.singular_values().max()));
        }
        for s in bwd.samples.iter().skip(1) {
            let v = &d * s.phi() * &d * &e_plus;
            ratios.push((s.t, v.singular_values().max()));
        }
        anosov_constant(&ratios)
    } else {
        None
    };
    Ok(SplittingEstimate {
        point: *rho,
        e_plus,
        e_minus,
        invariance_residual: invariance,
        convergence_residual: convergence,
        angle,
        residual,
        b_hat,
        hyperbolic,
    })
}

/// Smallest `B ≥ 1` with `q ≤ B e^{−t/B}` for every `(t, q)`; `B e^{−t/B}` increases in `B`.
pub fn anosov_constant(ratios: &[(f64, f64)]) -> Option<f64> {
    let ok = |b: f64| ratios.iter().all(|(t, q)| *q <= b * (-t / b).exp() * (1.0 + 1e-12));
    let (mut lo, mut hi) = (1.0, 1e8);
    if ok(lo) {
        return Some(lo);
    }
    if !ok(hi) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-10 * hi {
            break;
        }
    }
    Some(hi)
}

// ---------------------------------------------------------------------------
// Vertical subspace with controlled projection

/// Result of [`panda_subspace`].
#[derive(Clone, Debug, Serialize)]
pub struct PandaReport {
    /// Orthonormal columns in `ℝ^{n−1}` (vertical directions `J(0) = 0, J'(0) = v`).
    pub basis: DMatrix<f64>,
    pub dim: usize,
    /// `max_t sup_V |dφ_t V| / |dπ dφ_t V|` over the window.
    pub factor: f64,
    /// `max (factor² − 1) ε²`, the calibrated constant.
    pub c_hat: f64,
}

/// Builds the `(n−1−m)`-dimensional vertical subspace on which `dπ∘dφ_t` stays
/// invertible over `(t₀ − ε, t₀ + ε)` and measures the expansion factor.
pub fn panda_subspace(segment: &FlowSegment, t0: f64, eps: f64, m: usize) -> Result<PandaReport> {
    let k = segment.perp_dim();
    if !(eps > 0.0) {
        return Err(GeoError::Precondition("ε must be positive".into()));
    }
    let lo = (t0 - 2.0 * eps).max(0.0);
    let hi = (t0 + 2.0 * eps).min(segment.t_end());
    let report = if hi > lo { conjugate_points(segment, (lo, hi), 1e-7)? } else { ConjugateReport { points: vec![], window: (lo, hi), tolerance: 1e-7, warnings: vec![] } };
    let count: usize = report.points.iter().map(|p| p.1).sum();
    if count > m {
        return Err(GeoError::Precondition(format!(
            "{count} conjugate points in ({lo:.4}, {hi:.4}) exceed m = {m}"
        )));
    }
    if m > k {
        return Err(GeoError::Precondition(format!("m = {m} exceeds n − 1 = {k}")));
    }
    // Kernel directions at the located conjugate times.
    let mut kernels: Vec<DVector<f64>> = vec![];
    for (t, mult) in &report.points {
        let s = segment.state_at(*t)?;
        let svd = s.a.clone().svd(true, true);
        let vt = svd.v_t.unwrap();
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|a, b| svd.singular_values[*a].partial_cmp(&svd.singular_values[*b]).unwrap());
        for &i in idx.iter().take(*mult) {
            kernels.push(vt.row(i).transpose());
        }
    }
    // Pad with the directions where A is smallest in the window.
    let wlo = (t0 - eps).max(1e-6);
    let whi = (t0 + eps).min(segment.t_end());
    let times: Vec<f64> = {
        let mut v: Vec<f64> = segment.samples.iter().map(|s| s.t).filter(|t| *t > wlo && *t < whi).collect();
        v.push(wlo);
        v.push(whi);
        v
    };
    if kernels.len() < m {
        let mut worst_t = times[0];
        let mut worst = f64::INFINITY;
        for &t in &times {
            let s = segment.state_at(t)?;
            let v = sigma_min(&s.a);
            if v < worst {
                worst = v;
                worst_t = t;
            }
        }
        let s = segment.state_at(worst_t)?;
        let svd = s.a.clone().svd(true, true);
        let vt = svd.v_t.unwrap();
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|a, b| svd.singular_values[*a].partial_cmp(&svd.singular_values[*b]).unwrap());
        for &i in &idx {
            if kernels.len() >= m {
                break;
            }
            kernels.push(vt.row(i).transpose());
        }
    }
    let dim = k - m;
    let basis = if dim == 0 {
        DMatrix::zeros(k, 0)
    } else if kernels.is_empty() {
        DMatrix::identity(k, k)
    } else {
        let kmat = DMatrix::from_columns(&kernels);
        let q = orthonormalize(&kmat);
        let full = q.clone().qr();
        // complete the kernel basis and keep the complement
        let mut cols: Vec<DVector<f64>> = vec![];
        for j in 0..k {
            let mut e = DVector::zeros(k);
            e[j] = 1.0;
            let proj = &q * (q.transpose() * &e);
            let mut r = e - proj;
            for c in &cols {
                let d = r.dot(c);
                r -= c * d;
            }
            if r.norm() > 1e-8 {
                cols.push(r.normalize());
            }
            if cols.len() == dim {
                break;
            }
        }
        let _ = full;
        DMatrix::from_columns(&cols)
    };
    if dim == 0 {
        return Ok(PandaReport { basis, dim, factor: 1.0, c_hat: 0.0 });
    }
    let mut factor: f64 = 1.0;
    for &t in &times {
        let s = segment.state_at(t)?;
        let aq = &s.a * &basis;
        let apq = &s.ap * &basis;
        let lhs = apq.transpose() * &apq;
        let rhs = aq.transpose() * &aq;
        let lam = generalized_max_eig(&lhs, &rhs)?;
        factor = factor.max((1.0 + lam).sqrt());
    }
    if !factor.is_finite() {
        return Err(GeoError::Numeric("projection degenerates in the window".into()));
    }
    Ok(PandaReport { basis, dim, factor, c_hat: (factor * factor - 1.0) * eps * eps })
}

fn generalized_max_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| GeoError::Numeric("projection singular in the window".into()))?;
    let linv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| GeoError::Numeric("projection singular in the window".into()))?;
    let c = &linv * a * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Ok(SymmetricEigen::new(c).eigenvalues.max())
}

// ---------------------------------------------------------------------------
// Discrete hyperbolic backend

/// Hyperbolic toral automorphism `x ↦ Mx mod 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteHyperbolicSystem {
    pub matrix: [[i64; 2]; 2],
}

impl Default for DiscreteHyperbolicSystem {
    fn default() -> Self {
        DiscreteHyperbolicSystem { matrix: [[2, 1], [1, 1]] }
    }
}

impl DiscreteHyperbolicSystem {
    pub fn new(matrix: [[i64; 2]; 2]) -> Result<Self> {
        let s = DiscreteHyperbolicSystem { matrix };
        let det = s.det();
        if det.abs() != 1 {
            return Err(GeoError::Precondition(format!("determinant {det} is not ±1")));
        }
        let tr = (matrix[0][0] + matrix[1][1]) as f64;
        let disc = tr * tr - 4.0 * det as f64;
        if disc <= 0.0 {
            return Err(GeoError::Precondition("eigenvalues are not real".into()));
        }
        let (l1, l2) = s.eigenvalues();
        if (l1.abs() - 1.0).abs() < 1e-12 || (l2.abs() - 1.0).abs() < 1e-12 {
            return Err(GeoError::Precondition("eigenvalue on the unit circle".into()));
        }
        Ok(s)
    }

    pub fn det(&self) -> i64 {
        let m = self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Eigenvalues ordered by decreasing modulus.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let m = self.matrix;
        let tr = (m[0][0] + m[1][1]) as f64;
        let det = self.det() as f64;
        let r = (tr * tr - 4.0 * det).sqrt();
        let (a, b) = (0.5 * (tr + r), 0.5 * (tr - r));
        if a.abs() >= b.abs() {
            (a, b)
        } else {
            (b, a)
        }
    }

    /// Unit eigenvector for eigenvalue `lam`.
    pub fn eigenvector(&self, lam: f64) -> [f64; 2] {
        let m = self.matrix;
        let (a, b) = (m[0][0] as f64 - lam, m[0][1] as f64);
        let v = if b.abs() > 1e-14 || a.abs() > 1e-14 { [b, -a] } else { [1.0, 0.0] };
        let v = if v[0] == 0.0 && v[1] == 0.0 { [m[1][1] as f64 - lam, -(m[1][0] as f64)] } else { v };
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    }

    pub fn unstable_direction(&self) -> [f64; 2] {
        self.eigenvector(self.eigenvalues().0)
    }

    pub fn stable_direction(&self) -> [f64; 2] {
        self.eigenvector(self.eigenvalues().1)
    }

    /// `|λ₋|`.
    pub fn contraction_rate(&self) -> f64 {
        self.eigenvalues().1.abs()
    }

    /// Constant `1 / log(1/|λ₋|)` of the contraction certificate.
    pub fn contraction_constant(&self) -> f64 {
        1.0 / (1.0 / self.contraction_rate()).ln()
    }

    fn inverse_matrix(&self) -> [[i64; 2]; 2] {
        let m = self.matrix;
        let d = self.det();
        [[m[1][1] * d, -m[0][1] * d], [-m[1][0] * d, m[0][0] * d]]
    }

    fn apply(m: &[[i64; 2]; 2], p: [f64; 2]) -> [f64; 2] {
        [
            (m[0][0] as f64 * p[0] + m[0][1] as f64 * p[1]).rem_euclid(1.0),
            (m[1][0] as f64 * p[0] + m[1][1] as f64 * p[1]).rem_euclid(1.0),
        ]
    }

    /// `k`-fold action mod 1 (negative `k` uses the inverse).
    pub fn discrete_step(&self, p: [f64; 2], k: i64) -> [f64; 2] {
        let m = if k >= 0 { self.matrix } else { self.inverse_matrix() };
        let mut q = [p[0].rem_euclid(1.0), p[1].rem_euclid(1.0)];
        for _ in 0..k.unsigned_abs() {
            q = Self::apply(&m, q);
        }
        q
    }

    /// Exact orbit of the rational point `num / den` (numerators reduced mod `den`).
    pub fn step_rational(&self, num: [i64; 2], den: i64, k: i64) -> [i64; 2] {
        let m = if k >= 0 { self.matrix } else { self.inverse_matrix() };
        let d = den as i128;
        let mut q = [(num[0] as i128).rem_euclid(d), (num[1] as i128).rem_euclid(d)];
        for _ in 0..k.unsigned_abs() {
            q = [
                (m[0][0] as i128 * q[0] + m[0][1] as i128 * q[1]).rem_euclid(d),
                (m[1][0] as i128 * q[0] + m[1][1] as i128 * q[1]).rem_euclid(d),
            ];
        }
        [q[0] as i64, q[1] as i64]
    }

    /// Length scaling `|M^k v| / |v|` of a segment direction, evaluated in the
    /// eigenbasis; components below rounding level are treated as zero.
    pub fn segment_scaling(&self, dir: [f64; 2], k: u32) -> f64 {
        let (lp, lm) = self.eigenvalues();
        let (ep, em) = (self.unstable_direction(), self.stable_direction());
        let det = ep[0] * em[1] - ep[1] * em[0];
        let n0 = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let mut cp = (dir[0] * em[1] - dir[1] * em[0]) / det;
        let mut cm = (ep[0] * dir[1] - ep[1] * dir[0]) / det;
        if cp.abs() < 1e-12 * n0 {
            cp = 0.0;
        }
        if cm.abs() < 1e-12 * n0 {
            cm = 0.0;
        }
        let grow = |c: f64, l: f64| if c == 0.0 { 0.0 } else { c * l.powi(k as i32) };
        let (a, b) = (grow(cp, lp), grow(cm, lm));
        let w = [a * ep[0] + b * em[0], a * ep[1] + b * em[1]];
        (w[0] * w[0] + w[1] * w[1]).sqrt() / n0
    }

    /// Exact eigen-splitting; the residual measures `‖M e_± − λ_± e_±‖`.
    pub fn splitting(&self) -> SplittingEstimate {
        let (lp, lm) = self.eigenvalues();
        let (vp, vm) = (self.unstable_direction(), self.stable_direction());
        let m = self.matrix;
        let res = |v: [f64; 2], l: f64| {
            let w = [
                m[0][0] as f64 * v[0] + m[0][1] as f64 * v[1] - l * v[0],
                m[1][0] as f64 * v[0] + m[1][1] as f64 * v[1] - l * v[1],
            ];
            (w[0] * w[0] + w[1] * w[1]).sqrt()
        };
        let e_plus = DMatrix::from_column_slice(2, 1, &vp);
        let e_minus = DMatrix::from_column_slice(2, 1, &vm);
        let angle = principal_angle(&e_plus, &e_minus);
        let inv = res(vp, lp).max(res(vm, lm));
        let residual = inv / angle.sin();
        let b_hat = {
            let rate = 1.0 / lp.abs().ln();
            Some(rate.max(1.0))
        };
        SplittingEstimate {
            point: PhasePoint { x: [0.0; MAX_COORDS], xi: [0.0; MAX_COORDS] },
            e_plus,
            e_minus,
            invariance_residual: inv,
            convergence_residual: 0.0,
            angle,
            residual,
            b_hat,
            hyperbolic: residual <= SPLITTING_THRESHOLD,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat2_norm_matches_svd() {
        let m = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]);
        let s = m.singular_values().max();
        assert!((mat2_norm(1.0, 3.0, 0.0, 1.0) - s).abs() < 1e-12);
    }

    #[test]
    fn golden_finds_vertex() {
        let t = golden_min(|t| (t - 1.3).abs(), 0.0, 2.0, 1e-12);
        assert!((t - 1.3).abs() < 1e-10);
    }

    #[test]
    fn cat_map_rejects_shear() {
        assert!(DiscreteHyperbolicSystem::new([[1, 1], [0, 1]]).is_err());
        assert!(DiscreteHyperbolicSystem::new([[2, 0], [0, 1]]).is_err());
        assert!(DiscreteHyperbolicSystem::new([[2, 1], [1, 1]]).is_ok());
    }

    #[test]
    fn anosov_constant_for_pure_decay() {
        let r: Vec<(f64, f64)> = (1..100).map(|i| (i as f64 * 0.1, (-(i as f64) * 0.1).exp())).collect();
        assert_eq!(anosov_constant(&r), Some(1.0));
        let r: Vec<(f64, f64)> = (1..100).map(|i| (i as f64 * 0.1, 1.0)).collect();
        let b = anosov_constant(&r);
        assert!(b.is_some() && b.unwrap() > 1.0);
    }
}
