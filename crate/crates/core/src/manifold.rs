//! Analytic model manifolds.
//!
//! Two coordinate conventions coexist. *Chart* coordinates are what
//! [`ManifoldModel::metric_at`] and the Christoffel routines accept: the
//! identity chart on the torus, hyperspherical angles on the sphere, `(x, y)`
//! on the half-plane and `(r, θ)` on warped products. *Phase* coordinates are
//! what the flow integrates; they coincide with chart coordinates except on
//! the sphere, which is handled in its embedding `Sⁿ ⊂ ℝⁿ⁺¹`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{GeoError, Result};
use crate::flow::{FlowStepper, PhasePoint, MAX_COORDS};
use crate::quad::gauss_legendre;

/// Fixed-size coordinate slot used by the integrators.
pub type Coords = [f64; MAX_COORDS];

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    Flat,
    ConstantPositive,
    ConstantNegative,
    Variable,
}

/// Radial profile `f` of a warped product `dr² + f(r)² dθ²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum WarpProfile {
    /// `f = cosh r`; curvature −1 everywhere.
    Cosh,
    /// `f = major + cos r`, the intrinsic torus of revolution with unit tube radius.
    Revolution { major: f64 },
}

impl WarpProfile {
    fn f(&self, r: f64) -> f64 {
        match self {
            WarpProfile::Cosh => r.cosh(),
            WarpProfile::Revolution { major } => major + r.cos(),
        }
    }
    fn df(&self, r: f64) -> f64 {
        match self {
            WarpProfile::Cosh => r.sinh(),
            WarpProfile::Revolution { .. } => -r.sin(),
        }
    }
    fn ddf(&self, r: f64) -> f64 {
        match self {
            WarpProfile::Cosh => r.cosh(),
            WarpProfile::Revolution { .. } => -r.cos(),
        }
    }
}

/// An analytic Riemannian model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldModel {
    /// `ℝⁿ / Π periods·ℤ` with the identity metric.
    FlatTorus { periods: Vec<f64> },
    /// Unit sphere `Sⁿ`.
    RoundSphere { dim: usize },
    /// Upper half-plane `(dx² + dy²)/y²` restricted to a bounding box.
    HyperbolicHalfPlane { x_min: f64, x_max: f64, y_min: f64, y_max: f64 },
    /// Surface `dr² + f(r)² dθ²` with θ of period 2π.
    Warped { profile: WarpProfile },
}

impl ManifoldModel {
    pub fn flat_torus(dim: usize) -> Self {
        ManifoldModel::FlatTorus { periods: vec![2.0 * PI; dim] }
    }

    pub fn sphere(dim: usize) -> Self {
        ManifoldModel::RoundSphere { dim }
    }

    pub fn half_plane() -> Self {
        ManifoldModel::HyperbolicHalfPlane { x_min: -10.0, x_max: 10.0, y_min: 1e-3, y_max: 1e3 }
    }

    /// Looks a model up by registry name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "flat_torus" | "torus" | "t2" => Self::flat_torus(2),
            "t3" => Self::flat_torus(3),
            "sphere" | "s2" => Self::sphere(2),
            "s3" => Self::sphere(3),
            "half_plane" | "hyperbolic" => Self::half_plane(),
            "warped_cosh" => ManifoldModel::Warped { profile: WarpProfile::Cosh },
            "torus_of_revolution" => ManifoldModel::Warped { profile: WarpProfile::Revolution { major: 2.0 } },
            other => return Err(GeoError::Config(format!("unknown model `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ManifoldModel::FlatTorus { periods } => {
                if periods.is_empty() || periods.len() > MAX_COORDS || periods.iter().any(|p| !(*p > 0.0)) {
                    return Err(GeoError::Config("torus needs 1..=4 positive periods".into()));
                }
            }
            ManifoldModel::RoundSphere { dim } => {
                if *dim < 1 || *dim + 1 > MAX_COORDS {
                    return Err(GeoError::Config("sphere dimension must be 1..=3".into()));
                }
            }
            ManifoldModel::HyperbolicHalfPlane { x_min, x_max, y_min, y_max } => {
                if !(x_min < x_max && 0.0 < *y_min && y_min < y_max) {
                    return Err(GeoError::Config("half-plane box must satisfy x_min<x_max, 0<y_min<y_max".into()));
                }
            }
            ManifoldModel::Warped { profile } => {
                if let WarpProfile::Revolution { major } = profile {
                    if !(*major > 1.0) {
                        return Err(GeoError::Config("torus of revolution needs major radius > 1".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self {
            ManifoldModel::FlatTorus { periods } => format!("flat_torus_{}", periods.len()),
            ManifoldModel::RoundSphere { dim } => format!("sphere_{dim}"),
            ManifoldModel::HyperbolicHalfPlane { .. } => "half_plane".into(),
            ManifoldModel::Warped { profile: WarpProfile::Cosh } => "warped_cosh".into(),
            ManifoldModel::Warped { profile: WarpProfile::Revolution { .. } } => "torus_of_revolution".into(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ManifoldModel::FlatTorus { periods } => periods.len(),
            ManifoldModel::RoundSphere { dim } => *dim,
            _ => 2,
        }
    }

    /// Number of phase coordinates used for a base point.
    pub fn coord_len(&self) -> usize {
        match self {
            ManifoldModel::RoundSphere { dim } => dim + 1,
            _ => self.dim(),
        }
    }

    pub fn curvature_kind(&self) -> CurvatureKind {
        match self {
            ManifoldModel::FlatTorus { .. } => CurvatureKind::Flat,
            ManifoldModel::RoundSphere { .. } => CurvatureKind::ConstantPositive,
            ManifoldModel::HyperbolicHalfPlane { .. } | ManifoldModel::Warped { profile: WarpProfile::Cosh } => {
                CurvatureKind::ConstantNegative
            }
            ManifoldModel::Warped { .. } => CurvatureKind::Variable,
        }
    }

    /// Upper bound for the sectional curvature.
    pub fn max_curvature(&self) -> f64 {
        match self {
            ManifoldModel::FlatTorus { .. } => 0.0,
            ManifoldModel::RoundSphere { .. } => 1.0,
            ManifoldModel::HyperbolicHalfPlane { .. } => -1.0,
            ManifoldModel::Warped { profile: WarpProfile::Cosh } => -1.0,
            ManifoldModel::Warped { profile: WarpProfile::Revolution { major } } => 1.0 / (major + 1.0),
        }
    }

    /// Lower bound for the sectional curvature.
    pub fn min_curvature(&self) -> f64 {
        match self {
            ManifoldModel::Warped { profile: WarpProfile::Revolution { major } } => -1.0 / (major - 1.0),
            _ => self.max_curvature(),
        }
    }

    // ---- chart level -------------------------------------------------

    fn check_chart(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(GeoError::Domain(format!("expected {} coordinates, got {}", self.dim(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Domain("non-finite coordinate".into()));
        }
        match self {
            ManifoldModel::HyperbolicHalfPlane { x_min, x_max, y_min, y_max } => {
                if x[1] <= 0.0 {
                    return Err(GeoError::Domain(format!("y = {} is not in the upper half-plane", x[1])));
                }
                if x[0] < *x_min || x[0] > *x_max || x[1] < *y_min || x[1] > *y_max {
                    return Err(GeoError::Domain(format!("({}, {}) outside the bounding box", x[0], x[1])));
                }
            }
            ManifoldModel::RoundSphere { dim } => {
                for a in &x[..dim - 1] {
                    let s = a.sin();
                    if s.abs() < 1e-8 {
                        return Err(GeoError::Domain("hyperspherical chart degenerates at a pole".into()));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Metric tensor in chart coordinates.
    pub fn metric_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_chart(x)?;
        Ok(self.metric_unchecked(x))
    }

    fn metric_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        match self {
            ManifoldModel::FlatTorus { .. } => DMatrix::identity(n, n),
            ManifoldModel::RoundSphere { .. } => {
                let mut g = DMatrix::zeros(n, n);
                let mut w = 1.0;
                for i in 0..n {
                    g[(i, i)] = w;
                    if i + 1 < n {
                        w *= x[i].sin().powi(2);
                    }
                }
                g
            }
            ManifoldModel::HyperbolicHalfPlane { .. } => DMatrix::identity(2, 2) / (x[1] * x[1]),
            ManifoldModel::Warped { profile } => {
                let f = profile.f(x[0]);
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, f * f]))
            }
        }
    }

    /// Partial derivative `∂_k g` in chart coordinates by central differences.
    pub fn metric_derivative_fd(&self, x: &[f64], k: usize) -> DMatrix<f64> {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += FD_STEP;
        xm[k] -= FD_STEP;
        (self.metric_unchecked(&xp) - self.metric_unchecked(&xm)) / (2.0 * FD_STEP)
    }

    /// Christoffel symbols `Γ[k][(i, j)] = Γ^k_ij`, closed form where registered.
    pub fn christoffel(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_chart(x)?;
        let n = self.dim();
        let mut gam = vec![DMatrix::zeros(n, n); n];
        match self {
            ManifoldModel::FlatTorus { .. } => {}
            ManifoldModel::HyperbolicHalfPlane { .. } => {
                let y = x[1];
                gam[0][(0, 1)] = -1.0 / y;
                gam[0][(1, 0)] = -1.0 / y;
                gam[1][(0, 0)] = 1.0 / y;
                gam[1][(1, 1)] = -1.0 / y;
            }
            ManifoldModel::Warped { profile } => {
                let (f, df) = (profile.f(x[0]), profile.df(x[0]));
                gam[0][(1, 1)] = -f * df;
                gam[1][(0, 1)] = df / f;
                gam[1][(1, 0)] = df / f;
            }
            ManifoldModel::RoundSphere { dim: 2 } => {
                let (s, c) = x[0].sin_cos();
                gam[0][(1, 1)] = -s * c;
                gam[1][(0, 1)] = c / s;
                gam[1][(1, 0)] = c / s;
            }
            ManifoldModel::RoundSphere { .. } => return self.christoffel_fd(x),
        }
        Ok(gam)
    }

    /// Christoffel symbols from central differences of the metric.
    pub fn christoffel_fd(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_chart(x)?;
        let n = self.dim();
        let ginv = self
            .metric_unchecked(x)
            .try_inverse()
            .ok_or_else(|| GeoError::Numeric("singular metric".into()))?;
        let dg: Vec<DMatrix<f64>> = (0..n).map(|k| self.metric_derivative_fd(x, k)).collect();
        let mut gam = vec![DMatrix::zeros(n, n); n];
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += ginv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                    }
                    gam[k][(i, j)] = 0.5 * s;
                }
            }
        }
        Ok(gam)
    }

    /// Gauss (sectional) curvature at a chart point.
    pub fn gauss_curvature(&self, x: &[f64]) -> Result<f64> {
        self.check_chart(x)?;
        Ok(match self {
            ManifoldModel::Warped { profile } => -profile.ddf(x[0]) / profile.f(x[0]),
            _ => self.max_curvature(),
        })
    }

    /// Embedding of hyperspherical angles into `ℝⁿ⁺¹`.
    pub fn sphere_embed(angles: &[f64]) -> Vec<f64> {
        let n = angles.len();
        let mut out = vec![0.0; n + 1];
        let mut w = 1.0;
        for i in 0..n {
            if i + 1 < n {
                out[i] = w * angles[i].cos();
                w *= angles[i].sin();
            } else {
                out[i] = w * angles[i].cos();
                out[i + 1] = w * angles[i].sin();
            }
        }
        out
    }

    // ---- phase level -------------------------------------------------

    /// Sectional curvature at phase coordinates.
    #[inline]
    pub fn curvature_at(&self, x: &Coords) -> f64 {
        match self {
            ManifoldModel::Warped { profile } => -profile.ddf(x[0]) / profile.f(x[0]),
            _ => self.max_curvature(),
        }
    }

    /// Metric inner product of two tangent vectors at phase coordinates.
    #[inline]
    pub fn inner(&self, x: &Coords, u: &Coords, v: &Coords) -> f64 {
        match self {
            ManifoldModel::HyperbolicHalfPlane { .. } => (u[0] * v[0] + u[1] * v[1]) / (x[1] * x[1]),
            ManifoldModel::Warped { profile } => {
                let f = profile.f(x[0]);
                u[0] * v[0] + f * f * u[1] * v[1]
            }
            _ => {
                let n = self.coord_len();
                (0..n).map(|i| u[i] * v[i]).sum()
            }
        }
    }

    /// Dual norm `|ξ|_g` of a covector.
    #[inline]
    pub fn co_norm(&self, x: &Coords, xi: &Coords) -> f64 {
        let v = self.raise(x, xi);
        self.inner(x, &v, &v).sqrt()
    }

    /// `g⁻¹ξ`.
    #[inline]
    pub fn raise(&self, x: &Coords, xi: &Coords) -> Coords {
        let mut v = *xi;
        match self {
            ManifoldModel::HyperbolicHalfPlane { .. } => {
                let y2 = x[1] * x[1];
                v[0] *= y2;
                v[1] *= y2;
            }
            ManifoldModel::Warped { profile } => {
                let f = profile.f(x[0]);
                v[1] /= f * f;
            }
            _ => {}
        }
        v
    }

    /// `g v`.
    #[inline]
    pub fn lower(&self, x: &Coords, v: &Coords) -> Coords {
        let mut xi = *v;
        match self {
            ManifoldModel::HyperbolicHalfPlane { .. } => {
                let y2 = x[1] * x[1];
                xi[0] /= y2;
                xi[1] /= y2;
            }
            ManifoldModel::Warped { profile } => {
                let f = profile.f(x[0]);
                xi[1] *= f * f;
            }
            _ => {}
        }
        xi
    }

    /// Hamilton equations of `½|ξ|²_g` (equal to `H_p` on the cosphere bundle).
    #[inline]
    pub fn geodesic_rhs(&self, x: &Coords, xi: &Coords) -> (Coords, Coords) {
        let mut dx = [0.0; MAX_COORDS];
        let mut dxi = [0.0; MAX_COORDS];
        match self {
            ManifoldModel::FlatTorus { periods } => {
                dx[..periods.len()].copy_from_slice(&xi[..periods.len()]);
            }
            ManifoldModel::RoundSphere { dim } => {
                let n = dim + 1;
                let s: f64 = (0..n).map(|i| xi[i] * xi[i]).sum();
                for i in 0..n {
                    dx[i] = xi[i];
                    dxi[i] = -s * x[i];
                }
            }
            ManifoldModel::HyperbolicHalfPlane { .. } => {
                let y = x[1];
                dx[0] = y * y * xi[0];
                dx[1] = y * y * xi[1];
                dxi[1] = -y * (xi[0] * xi[0] + xi[1] * xi[1]);
            }
            ManifoldModel::Warped { profile } => {
                let f = profile.f(x[0]);
                let df = profile.df(x[0]);
                dx[0] = xi[0];
                dx[1] = xi[1] / (f * f);
                dxi[0] = df / (f * f * f) * xi[1] * xi[1];
            }
        }
        (dx, dxi)
    }

    /// Projects a phase point back onto the unit cosphere bundle.
    #[inline]
    pub fn renormalize(&self, p: &mut PhasePoint) {
        if let ManifoldModel::RoundSphere { dim } = self {
            let n = dim + 1;
            let r = (0..n).map(|i| p.x[i] * p.x[i]).sum::<f64>().sqrt();
            for i in 0..n {
                p.x[i] /= r;
            }
            let d: f64 = (0..n).map(|i| p.xi[i] * p.x[i]).sum();
            for i in 0..n {
                p.xi[i] -= d * p.x[i];
            }
        }
        let nrm = self.co_norm(&p.x, &p.xi);
        for v in p.xi.iter_mut() {
            *v /= nrm;
        }
    }

    /// Covariant derivative of a vector field `e` transported along velocity `v`:
    /// returns `de/dt` for parallel transport.
    #[inline]
    pub fn transport_rhs(&self, x: &Coords, v: &Coords, e: &Coords) -> Coords {
        let mut d = [0.0; MAX_COORDS];
        match self {
            ManifoldModel::FlatTorus { .. } => {}
            ManifoldModel::RoundSphere { dim } => {
                let n = dim + 1;
                let ev: f64 = (0..n).map(|i| e[i] * v[i]).sum();
                for i in 0..n {
                    d[i] = -ev * x[i];
                }
            }
            ManifoldModel::HyperbolicHalfPlane { .. } => {
                let y = x[1];
                // Γ^x_xy = Γ^x_yx = -1/y, Γ^y_xx = 1/y, Γ^y_yy = -1/y
                d[0] = (v[0] * e[1] + v[1] * e[0]) / y;
                d[1] = (-v[0] * e[0] + v[1] * e[1]) / y;
            }
            ManifoldModel::Warped { profile } => {
                let (f, df) = (profile.f(x[0]), profile.df(x[0]));
                d[0] = f * df * v[1] * e[1];
                d[1] = -(df / f) * (v[0] * e[1] + v[1] * e[0]);
            }
        }
        d
    }

    /// Christoffel contraction `Γ^k_ij u^i w^j` at phase coordinates (chart models only;
    /// zero on the torus, embedded normal term excluded on the sphere).
    #[inline]
    pub fn christoffel_contract(&self, x: &Coords, u: &Coords, w: &Coords) -> Coords {
        let mut d = self.transport_rhs(x, u, w);
        if let ManifoldModel::RoundSphere { .. } = self {
            d = [0.0; MAX_COORDS];
        }
        for v in d.iter_mut() {
            *v = -*v;
        }
        d
    }

    /// Derivative `∂_k g` applied as `(Σ_k δx^k ∂_k g) v`, closed form on chart models.
    #[inline]
    pub fn metric_variation(&self, x: &Coords, dx: &Coords, v: &Coords) -> Coords {
        let mut out = [0.0; MAX_COORDS];
        match self {
            ManifoldModel::HyperbolicHalfPlane { .. } => {
                let y = x[1];
                let s = -2.0 * dx[1] / (y * y * y);
                out[0] = s * v[0];
                out[1] = s * v[1];
            }
            ManifoldModel::Warped { profile } => {
                let (f, df) = (profile.f(x[0]), profile.df(x[0]));
                out[1] = 2.0 * f * df * dx[0] * v[1];
            }
            _ => {}
        }
        out
    }

    /// Reduces torus coordinates into the fundamental domain; identity elsewhere.
    pub fn wrap(&self, x: &mut Coords) {
        match self {
            ManifoldModel::FlatTorus { periods } => {
                for (i, p) in periods.iter().enumerate() {
                    x[i] = x[i].rem_euclid(*p);
                }
            }
            ManifoldModel::Warped { profile } => {
                x[1] = x[1].rem_euclid(2.0 * PI);
                if let WarpProfile::Revolution { .. } = profile {
                    x[0] = x[0].rem_euclid(2.0 * PI);
                }
            }
            _ => {}
        }
    }

    /// Largest halfwidth for which the normal exponential map along a geodesic is
    /// expected to stay injective.
    pub fn focal_radius_estimate(&self) -> f64 {
        let k = self.max_curvature();
        let focal = if k > 0.0 { PI / (2.0 * k.sqrt()) } else { f64::INFINITY };
        match self {
            ManifoldModel::FlatTorus { periods } => periods.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0,
            ManifoldModel::Warped { profile: WarpProfile::Revolution { .. } } => focal.min(PI / 2.0),
            _ => focal,
        }
    }
}

/// Curvature data along a geodesic at one time.
#[derive(Clone, Debug)]
pub struct CurvatureData {
    pub t: f64,
    pub point: PhasePoint,
    /// Orthonormal frame; the last vector is the geodesic velocity.
    pub frame: Vec<Coords>,
    /// Sectional curvature matrix in the perpendicular part of the frame.
    pub r: DMatrix<f64>,
    pub gauss: f64,
}

/// Curvature matrix `R(t)` along the geodesic from `rho`, with the frame carried along.
pub fn curvature_matrix_along(model: &ManifoldModel, rho: &PhasePoint, t: f64) -> Result<CurvatureData> {
    let seg = crate::flow::propagate_linearization(model, rho, t, &Default::default())?;
    let last = seg.samples.last().expect("segment has samples");
    let frame = last.frame.clone();
    let drift = frame_drift(model, &last.point.x, &frame);
    if drift > 1e-6 {
        return Err(GeoError::FrameDrift(drift));
    }
    let m = model.dim() - 1;
    let k = model.curvature_at(&last.point.x);
    // Sectional curvatures of the planes (E_i, E_n) are isotropic on every registered model,
    // so the off-diagonal entries vanish and the diagonal is the pointwise curvature.
    let r = DMatrix::from_fn(m, m, |i, j| if i == j { k } else { 0.0 });
    Ok(CurvatureData { t, point: last.point, frame, r, gauss: k })
}

/// Maximum deviation of a frame from orthonormality.
pub fn frame_drift(model: &ManifoldModel, x: &Coords, frame: &[Coords]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..frame.len() {
        for j in 0..frame.len() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((model.inner(x, &frame[i], &frame[j]) - target).abs());
        }
    }
    worst
}

/// `∫_{Ω} K dv` over the Fermi tube of halfwidth `s` around `γ|[a,b]`, where `γ` starts at `rho`.
///
/// Midpoint rule on a grid of 64 nodes per unit length in each direction,
/// Richardson-extrapolated once.
pub fn integrated_curvature(model: &ManifoldModel, rho: &PhasePoint, s: f64, window: (f64, f64)) -> Result<f64> {
    if model.dim() != 2 {
        return Err(GeoError::Unsupported("tube integrals are implemented for surfaces".into()));
    }
    if !(s > 0.0) {
        return Err(GeoError::Precondition("halfwidth must be positive".into()));
    }
    if s >= model.focal_radius_estimate() {
        return Err(GeoError::Precondition(format!(
            "halfwidth {s} overlaps itself (focal estimate {:.4})",
            model.focal_radius_estimate()
        )));
    }
    let (a, b) = window;
    if !(b > a) {
        return Err(GeoError::Precondition("empty window".into()));
    }
    let nt = ((64.0 * (b - a)).ceil() as usize).max(8);
    let nu = ((64.0 * 2.0 * s).ceil() as usize).max(8);
    let coarse = fermi_midpoint(model, rho, s, a, b, nt, nu)?;
    let fine = fermi_midpoint(model, rho, s, a, b, 2 * nt, 2 * nu)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

fn fermi_midpoint(model: &ManifoldModel, rho: &PhasePoint, s: f64, a: f64, b: f64, nt: usize, nu: usize) -> Result<f64> {
    let dt = (b - a) / nt as f64;
    let du = s / nu as f64;
    let mut start = *rho;
    let stepper = FlowStepper::new(model);
    stepper.advance(&mut start, a);
    let mut total = 0.0;
    let mut here = start;
    let mut t_here = 0.0;
    for i in 0..nt {
        let tm = (i as f64 + 0.5) * dt;
        stepper.advance(&mut here, tm - t_here);
        t_here = tm;
        let v = model.raise(&here.x, &here.xi);
        let normal = perpendicular_2d(model, &here.x, &v);
        for sign in [1.0, -1.0] {
            let mut nv = normal;
            for c in nv.iter_mut() {
                *c *= sign;
            }
            let mut q = PhasePoint { x: here.x, xi: model.lower(&here.x, &nv) };
            if let ManifoldModel::RoundSphere { .. } = model {
                q.xi = nv;
            }
            let mut jac = crate::flow::ScalarJacobi { a: 1.0, ap: 0.0, b: 0.0, bp: 1.0 };
            let mut u_here = 0.0;
            for j in 0..nu {
                let um = (j as f64 + 0.5) * du;
                stepper.advance_jacobi(&mut q, &mut jac, um - u_here);
                u_here = um;
                total += model.curvature_at(&q.x) * jac.a * du * dt;
            }
        }
    }
    Ok(total)
}

/// Unit vector perpendicular to `v` in a 2-dimensional tangent space.
pub(crate) fn perpendicular_2d(model: &ManifoldModel, x: &Coords, v: &Coords) -> Coords {
    let mut n = [0.0; MAX_COORDS];
    match model {
        ManifoldModel::RoundSphere { .. } => {
            // x × v in ℝ³
            n[0] = x[1] * v[2] - x[2] * v[1];
            n[1] = x[2] * v[0] - x[0] * v[2];
            n[2] = x[0] * v[1] - x[1] * v[0];
        }
        _ => {
            // rotate the lowered vector so that ⟨n, v⟩_g = 0, then normalize
            let lv = model.lower(x, v);
            n[0] = -lv[1];
            n[1] = lv[0];
        }
    }
    let len = model.inner(x, &n, &n).sqrt();
    for c in n.iter_mut() {
        *c /= len;
    }
    n
}

/// Outcome of a Gauss–Bonnet identity check on a geodesic polygon.
#[derive(Clone, Debug, Serialize)]
pub struct GaussBonnetReport {
    pub angle_sum: f64,
    /// `(m − 2)π` for an m-gon.
    pub flat_angle_sum: f64,
    pub curvature_integral: f64,
    /// `angle_sum − flat_angle_sum − ∫K dA`; zero for an exact computation.
    pub defect: f64,
}

/// Checks `Σ angles − (m−2)π = ∫ K dA` for a convex geodesic polygon.
///
/// Sphere vertices are unit vectors in ℝ³; half-plane vertices are `(x, y)`.
pub fn gauss_bonnet_check(model: &ManifoldModel, vertices: &[Vec<f64>], order: usize) -> Result<GaussBonnetReport> {
    let m = vertices.len();
    if m < 3 {
        return Err(GeoError::Precondition("polygon needs at least three vertices".into()));
    }
    let mut angle_sum = 0.0;
    for i in 0..m {
        let v = &vertices[i];
        let prev = &vertices[(i + m - 1) % m];
        let next = &vertices[(i + 1) % m];
        let (t1, t2) = match model {
            ManifoldModel::RoundSphere { dim: 2 } => (sphere_tangent(v, next), sphere_tangent(v, prev)),
            ManifoldModel::HyperbolicHalfPlane { .. } => (half_plane_tangent(v, next), half_plane_tangent(v, prev)),
            _ => return Err(GeoError::Unsupported("polygon checks need the 2-sphere or the half-plane".into())),
        };
        let c = (t1[0] * t2[0] + t1[1] * t2[1] + t1.get(2).unwrap_or(&0.0) * t2.get(2).unwrap_or(&0.0))
            / (norm(&t1) * norm(&t2));
        angle_sum += c.clamp(-1.0, 1.0).acos();
    }
    let (gx, gw) = gauss_legendre(order);
    let mut integral = 0.0;
    for i in 1..m - 1 {
        let tri = [&vertices[0], &vertices[i], &vertices[i + 1]];
        integral += triangle_curvature_integral(model, tri, &gx, &gw)?;
    }
    let flat = (m as f64 - 2.0) * PI;
    Ok(GaussBonnetReport {
        angle_sum,
        flat_angle_sum: flat,
        curvature_integral: integral,
        defect: angle_sum - flat - integral,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn sphere_tangent(v: &[f64], w: &[f64]) -> Vec<f64> {
    let d: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    w.iter().zip(v).map(|(wi, vi)| wi - d * vi).collect()
}

fn half_plane_tangent(v: &[f64], w: &[f64]) -> Vec<f64> {
    if (w[0] - v[0]).abs() < 1e-14 {
        return vec![0.0, (w[1] - v[1]).signum()];
    }
    let c = (w[0] * w[0] + w[1] * w[1] - v[0] * v[0] - v[1] * v[1]) / (2.0 * (w[0] - v[0]));
    let mut t = vec![-v[1], v[0] - c];
    if t[0] * (w[0] - v[0]) + t[1] * (w[1] - v[1]) < 0.0 {
        t[0] = -t[0];
        t[1] = -t[1];
    }
    t
}

// Half-plane ↔ Klein disk; geodesics of the half-plane are straight chords in the Klein disk.
fn half_plane_to_klein(z: &[f64]) -> [f64; 2] {
    // Cayley: p = (z − i)/(z + i)
    let (x, y) = (z[0], z[1]);
    let den = x * x + (y + 1.0) * (y + 1.0);
    let px = (x * x + y * y - 1.0) / den;
    let py = -2.0 * x / den;
    let r2 = px * px + py * py;
    [2.0 * px / (1.0 + r2), 2.0 * py / (1.0 + r2)]
}

fn klein_to_half_plane(k: [f64; 2]) -> [f64; 2] {
    let r2 = k[0] * k[0] + k[1] * k[1];
    let s = 1.0 + (1.0 - r2).max(0.0).sqrt();
    let (px, py) = (k[0] / s, k[1] / s);
    // z = i(1+p)/(1−p)
    let den = (1.0 - px) * (1.0 - px) + py * py;
    let re = ((1.0 + px) * (1.0 - px) - py * py) / den;
    let im = ((1.0 + px) * py + py * (1.0 - px)) / den;
    [-im, re]
}

fn triangle_curvature_integral(model: &ManifoldModel, tri: [&Vec<f64>; 3], gx: &[f64], gw: &[f64]) -> Result<f64> {
    // Duffy map of the unit square onto the parameter triangle: a = u(1−w), b = uw, Jacobian u.
    let mut total = 0.0;
    match model {
        ManifoldModel::RoundSphere { .. } => {
            let (p0, p1, p2) = (tri[0], tri[1], tri[2]);
            let e1: Vec<f64> = (0..3).map(|i| p1[i] - p0[i]).collect();
            let e2: Vec<f64> = (0..3).map(|i| p2[i] - p0[i]).collect();
            for (xu, wu) in gx.iter().zip(gw) {
                let u = 0.5 * (xu + 1.0);
                for (xw, ww) in gx.iter().zip(gw) {
                    let w = 0.5 * (xw + 1.0);
                    let (a, b) = (u * (1.0 - w), u * w);
                    let p: Vec<f64> = (0..3).map(|i| p0[i] + a * e1[i] + b * e2[i]).collect();
                    let r = norm(&p);
                    let s: Vec<f64> = p.iter().map(|c| c / r).collect();
                    // d(p/|p|) = (I − s sᵀ) dp / |p|
                    let proj = |d: &[f64]| -> Vec<f64> {
                        let q: f64 = d.iter().zip(&s).map(|(x, y)| x * y).sum();
                        d.iter().zip(&s).map(|(x, y)| (x - q * y) / r).collect()
                    };
                    let (da, db) = (proj(&e1), proj(&e2));
                    let cross = [
                        da[1] * db[2] - da[2] * db[1],
                        da[2] * db[0] - da[0] * db[2],
                        da[0] * db[1] - da[1] * db[0],
                    ];
                    let mut xs = [0.0; MAX_COORDS];
                    xs[..3].copy_from_slice(&s);
                    let k = model.curvature_at(&xs);
                    total += 0.25 * wu * ww * u * k * norm(&cross);
                }
            }
        }
        ManifoldModel::HyperbolicHalfPlane { .. } => {
            let k0 = half_plane_to_klein(tri[0]);
            let k1 = half_plane_to_klein(tri[1]);
            let k2 = half_plane_to_klein(tri[2]);
            let e1 = [k1[0] - k0[0], k1[1] - k0[1]];
            let e2 = [k2[0] - k0[0], k2[1] - k0[1]];
            let map = |a: f64, b: f64| klein_to_half_plane([k0[0] + a * e1[0] + b * e2[0], k0[1] + a * e1[1] + b * e2[1]]);
            let h = 1e-6;
            for (xu, wu) in gx.iter().zip(gw) {
                let u = 0.5 * (xu + 1.0);
                for (xw, ww) in gx.iter().zip(gw) {
                    let w = 0.5 * (xw + 1.0);
                    let (a, b) = (u * (1.0 - w), u * w);
                    let z = map(a, b);
                    let za = [map(a + h, b), map(a - h, b)];
                    let zb = [map(a, b + h), map(a, b - h)];
                    let ja = [(za[0][0] - za[1][0]) / (2.0 * h), (za[0][1] - za[1][1]) / (2.0 * h)];
                    let jb = [(zb[0][0] - zb[1][0]) / (2.0 * h), (zb[0][1] - zb[1][1]) / (2.0 * h)];
                    let jac = (ja[0] * jb[1] - ja[1] * jb[0]).abs();
                    let g = model.metric_unchecked(&z);
                    let vol = g.determinant().sqrt();
                    let mut xs = [0.0; MAX_COORDS];
                    xs[0] = z[0];
                    xs[1] = z[1];
                    total += 0.25 * wu * ww * u * model.curvature_at(&xs) * vol * jac;
                }
            }
        }
        _ => return Err(GeoError::Unsupported("polygon checks need the 2-sphere or the half-plane".into())),
    }
    Ok(total)
}
