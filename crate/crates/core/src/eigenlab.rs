//! Eigenfunctions with explicit spectra, their averages over submanifolds,
//! and growth-law fits against the classical and log-improved rates.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::{baseline, BaselineKind};
use crate::conormal::Submanifold;
use crate::error::{GeoError, Result};
use crate::flow::{fmt, MAX_COORDS};
use crate::manifold::{Coords, ManifoldModel};
use crate::quad::{composite, gauss_legendre};

/// Largest zonal degree evaluated before recurrence round-off matters.
pub const MAX_DEGREE: usize = 2000;

/// `P_ℓ(z)` by the three-term recurrence.
pub fn legendre(l: usize, z: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, z);
    if l == 0 {
        return 1.0;
    }
    for k in 2..=l {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    p1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenKind {
    /// `e^{i⟨m,x⟩}` on the torus `ℝⁿ/2πℤⁿ`.
    TorusMode { m: Vec<i64> },
    /// `P_ℓ(x₃)` on `S²`.
    SphereZonal { degree: usize },
}

/// An L²-normalized eigenfunction, `−Δφ = λ²φ`.
#[derive(Clone, Debug)]
pub struct Eigenfunction {
    pub model: ManifoldModel,
    pub kind: EigenKind,
    pub lambda: f64,
    /// Constant in front of the unnormalized formula.
    pub normalization: f64,
    /// `‖φ‖_{L²}` recomputed by quadrature.
    pub l2_norm: f64,
}

pub fn torus_eigenfunction(m: &[i64]) -> Result<Eigenfunction> {
    let n = m.len();
    if n == 0 || n > 4 {
        return Err(GeoError::Config("torus modes need 1..=4 components".into()));
    }
    let lambda = m.iter().map(|&k| (k * k) as f64).sum::<f64>().sqrt();
    let normalization = (2.0 * PI).powf(-(n as f64) / 2.0);
    let mut f = Eigenfunction {
        model: ManifoldModel::flat_torus(n),
        kind: EigenKind::TorusMode { m: m.to_vec() },
        lambda,
        normalization,
        l2_norm: 0.0,
    };
    // |φ|² is constant, so a coarse product grid is exact
    let k = 3usize;
    let cell = (2.0 * PI / k as f64).powi(n as i32);
    let mut total = 0.0;
    for idx in 0..k.pow(n as u32) {
        let mut x = [0.0; MAX_COORDS];
        let mut r = idx;
        for xi in x.iter_mut().take(n) {
            *xi = (r % k) as f64 * 2.0 * PI / k as f64 + 0.3;
            r /= k;
        }
        total += f.value(&x).norm_sqr() * cell;
    }
    f.l2_norm = total.sqrt();
    Ok(f)
}

pub fn sphere_zonal(degree: usize) -> Result<Eigenfunction> {
    if degree > MAX_DEGREE {
        return Err(GeoError::Numeric(format!("zonal degree {degree} exceeds {MAX_DEGREE}")));
    }
    let l = degree as f64;
    let normalization = ((2.0 * l + 1.0) / (4.0 * PI)).sqrt();
    // exact for the degree-2ℓ integrand
    let (z, w) = gauss_legendre(degree + 1);
    let s: f64 = z.iter().zip(&w).map(|(z, w)| w * legendre(degree, *z).powi(2)).sum();
    Ok(Eigenfunction {
        model: ManifoldModel::sphere(2),
        kind: EigenKind::SphereZonal { degree },
        lambda: (l * (l + 1.0)).sqrt(),
        normalization,
        l2_norm: (2.0 * PI * s).sqrt() * normalization,
    })
}

const FD2: [f64; 9] = [-1.0 / 560.0, 8.0 / 315.0, -0.2, 1.6, -205.0 / 72.0, 1.6, -0.2, 8.0 / 315.0, -1.0 / 560.0];
const FD1: [f64; 9] = [1.0 / 280.0, -4.0 / 105.0, 0.2, -0.8, 0.0, 0.8, -0.2, 4.0 / 105.0, -1.0 / 280.0];

fn stencil(c: &[f64; 9], step: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    c.iter().enumerate().map(|(i, c)| c * f((i as f64 - 4.0) * step)).sum()
}

impl Eigenfunction {
    /// `φ` at phase coordinates (embedded coordinates on the sphere).
    pub fn value(&self, x: &Coords) -> Complex<f64> {
        match &self.kind {
            EigenKind::TorusMode { m } => {
                let phase: f64 = m.iter().enumerate().map(|(i, &k)| k as f64 * x[i]).sum();
                Complex::from_polar(self.normalization, phase)
            }
            EigenKind::SphereZonal { degree } => {
                let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
                Complex::new(self.normalization * legendre(*degree, x[2] / r), 0.0)
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.normalization
    }

    pub fn h(&self) -> f64 {
        1.0 / self.lambda
    }

    /// Largest `|(−Δ − λ²)φ| / (λ² sup|φ|)` over random points, with an
    /// eighth-order finite-difference Laplacian.
    pub fn laplacian_residual(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = 0.02 / self.lambda.max(1.0);
        let scale = self.lambda.max(1.0).powi(2) * self.sup_norm();
        let l2 = self.lambda * self.lambda;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let lap = match &self.kind {
                EigenKind::TorusMode { m } => {
                    let mut x = [0.0; MAX_COORDS];
                    for xi in x.iter_mut().take(m.len()) {
                        *xi = rng.gen_range(0.0..2.0 * PI);
                    }
                    let mut lap = Complex::new(0.0, 0.0);
                    for i in 0..m.len() {
                        let re = stencil(&FD2, step, |d| {
                            let mut y = x;
                            y[i] += d;
                            self.value(&y).re
                        });
                        let im = stencil(&FD2, step, |d| {
                            let mut y = x;
                            y[i] += d;
                            self.value(&y).im
                        });
                        lap += Complex::new(re, im) / (step * step);
                    }
                    (lap + self.value(&x) * l2).norm()
                }
                EigenKind::SphereZonal { .. } => {
                    let th = rng.gen_range(0.1..PI - 0.1);
                    let ps = rng.gen_range(0.0..2.0 * PI);
                    let at = |t: f64, p: f64| {
                        let mut y = [0.0; MAX_COORDS];
                        y[..3].copy_from_slice(&[t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]);
                        self.value(&y).re
                    };
                    let ftt = stencil(&FD2, step, |d| at(th + d, ps)) / (step * step);
                    let ft = stencil(&FD1, step, |d| at(th + d, ps)) / step;
                    let fpp = stencil(&FD2, step, |d| at(th, ps + d)) / (step * step);
                    let lap = ftt + ft * th.cos() / th.sin() + fpp / th.sin().powi(2);
                    (lap + l2 * at(th, ps)).abs()
                }
            };
            worst = worst.max(lap / scale);
        }
        worst
    }
}

/// Smooth weight on `H` as a function of the curve parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Weight {
    Constant { value: f64 },
    /// `mean + amplitude·cos(frequency·u)`.
    Cosine { mean: f64, amplitude: f64, frequency: f64 },
}

impl Default for Weight {
    fn default() -> Self {
        Weight::Constant { value: 1.0 }
    }
}

impl Weight {
    pub fn at(&self, u: f64) -> f64 {
        match *self {
            Weight::Constant { value } => value,
            Weight::Cosine { mean, amplitude, frequency } => mean + amplitude * (frequency * u).cos(),
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            Weight::Constant { value } => value.abs(),
            Weight::Cosine { mean, amplitude, .. } => mean.abs() + amplitude.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AverageRecord {
    pub submanifold: String,
    pub codim: usize,
    pub weight: Weight,
    pub lambda: f64,
    /// `∫_H w φ dσ_H`.
    pub integral: Complex<f64>,
    /// `|∫_H w φ dσ_H|`.
    pub value: f64,
    pub error: f64,
}

const MAX_PANELS: usize = 1 << 16;

/// `∫_H w φ dσ_H` by composite Gauss–Legendre with dyadic refinement until two
/// levels agree to `1e−8` absolute or `1e−4` relative. For a point this is `w φ(x)`.
pub fn average_over(h: &Submanifold, w: &Weight, phi: &Eigenfunction) -> Result<AverageRecord> {
    if h.model != phi.model {
        return Err(GeoError::Precondition(format!("H lives on {} but φ on {}", h.model.name(), phi.model.name())));
    }
    let label = format!("{:?}", h.spec);
    if h.is_point() {
        let v = phi.value(&h.point_at(0.0)) * w.at(0.0);
        return Ok(AverageRecord {
            submanifold: label,
            codim: h.codim,
            weight: w.clone(),
            lambda: phi.lambda,
            integral: v,
            value: v.norm(),
            error: 0.0,
        });
    }
    let (a, b, _) = h.param_range();
    let integrand = |u: f64| {
        let x = h.point_at(u);
        let t = h.tangent_at(u);
        phi.value(&x) * (w.at(u) * h.model.inner(&x, &t, &t).sqrt())
    };
    let level = |panels: usize| {
        Complex::new(composite(|u| integrand(u).re, a, b, panels, 16), composite(|u| integrand(u).im, a, b, panels, 16))
    };
    let waves = phi.lambda * (b - a) / (2.0 * PI);
    let mut panels = 8usize.max(2 * waves.ceil() as usize);
    let mut prev = level(panels);
    loop {
        panels *= 2;
        let next = level(panels);
        let diff = (next - prev).norm();
        if diff <= 1e-8 || diff <= 1e-4 * next.norm() {
            let floor = phi.lambda.max(1.0).powf(0.5 * (h.codim as f64 - 1.0)) * 1e-4;
            if diff >= 0.01 * next.norm().max(floor) {
                return Err(GeoError::Numeric(format!("quadrature error {diff:.3e} too large at λ = {}", phi.lambda)));
            }
            return Ok(AverageRecord {
                submanifold: label,
                codim: h.codim,
                weight: w.clone(),
                lambda: phi.lambda,
                integral: next,
                value: next.norm(),
                error: diff,
            });
        }
        if panels >= MAX_PANELS {
            return Err(GeoError::Numeric(format!("quadrature did not converge at λ = {}", phi.lambda)));
        }
        prev = next;
    }
}

/// Log-spaced zonal degrees `16·2^{k/2}` up to 400.
pub fn default_degrees() -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| (16.0 * 2f64.powf(k as f64 / 2.0)).round() as usize)
        .take_while(|&l| l < 400)
        .collect();
    out.push(400);
    out
}

/// Averages of zonal harmonics of the given degrees over `H ⊂ S²`.
pub fn zonal_sweep(h: &Submanifold, w: &Weight, degrees: &[usize]) -> Result<Vec<AverageRecord>> {
    degrees.par_iter().map(|&l| average_over(h, w, &sphere_zonal(l)?)).collect()
}

/// Averages of torus modes over `H ⊂ Tⁿ`.
pub fn torus_sweep(h: &Submanifold, w: &Weight, modes: &[Vec<i64>]) -> Result<Vec<AverageRecord>> {
    modes.par_iter().map(|m| average_over(h, w, &torus_eigenfunction(m)?)).collect()
}

pub fn write_records_csv<W: Write>(records: &[AverageRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "h", "value", "baseline_classical", "baseline_logimproved"])?;
    for r in records {
        let b = |kind| baseline(r.lambda, r.codim, kind).map(fmt).unwrap_or_default();
        w.write_record([
            fmt(r.lambda),
            fmt(1.0 / r.lambda),
            fmt(r.value),
            b(BaselineKind::Classical),
            b(BaselineKind::LogImproved),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthModel {
    /// `c λ^p`.
    Power,
    /// `c λ^p / √log λ`.
    PowerOverSqrtLog,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthFit {
    pub model: GrowthModel,
    pub exponent: f64,
    pub prefactor: f64,
    /// Root mean square of the log residuals.
    pub residual: f64,
}

/// Least squares fit of `log v` against `log λ` over `(λ, v)` pairs.
pub fn growth_fit(points: &[(f64, f64)], model: GrowthModel) -> Result<GrowthFit> {
    if points.len() < 8 {
        return Err(GeoError::Precondition(format!("growth fit needs 8 records, got {}", points.len())));
    }
    if points.iter().any(|&(l, v)| !(l > std::f64::consts::E && v > 0.0)) {
        return Err(GeoError::Precondition("growth fit needs λ > e and positive values".into()));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if hi < 10.0 * lo {
        return Err(GeoError::Precondition(format!("λ spread [{lo}, {hi}] is less than a decade")));
    }
    let m = points.len();
    let a = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { points[i].0.ln() });
    let y = DVector::from_fn(m, |i, _| {
        let (l, v) = points[i];
        match model {
            GrowthModel::Power => v.ln(),
            GrowthModel::PowerOverSqrtLog => v.ln() + 0.5 * l.ln().ln(),
        }
    });
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| GeoError::Numeric(format!("growth fit: {e}")))?;
    let res = &y - &a * &coef;
    Ok(GrowthFit {
        model,
        exponent: coef[1],
        prefactor: coef[0].exp(),
        residual: (res.norm_squared() / m as f64).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthComparison {
    pub power: GrowthFit,
    pub power_over_sqrtlog: GrowthFit,
    pub preferred: GrowthModel,
    /// Residual of the preferred fit over the other one.
    pub residual_ratio: f64,
}

pub fn compare_growth(points: &[(f64, f64)]) -> Result<GrowthComparison> {
    let power = growth_fit(points, GrowthModel::Power)?;
    let sqrtlog = growth_fit(points, GrowthModel::PowerOverSqrtLog)?;
    let (preferred, num, den) = if sqrtlog.residual < power.residual {
        (GrowthModel::PowerOverSqrtLog, sqrtlog.residual, power.residual)
    } else {
        (GrowthModel::Power, power.residual, sqrtlog.residual)
    };
    Ok(GrowthComparison {
        power,
        power_over_sqrtlog: sqrtlog,
        preferred,
        residual_ratio: if den > 0.0 { num / den } else { 1.0 },
    })
}
