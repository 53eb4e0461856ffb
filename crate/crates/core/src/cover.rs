//! Good covers of `SN*H` by tubes, looping reports and good/bad partitions.
//!
//! A tube loops on `[t₀, T₀]` when the flow of some of its points re-enters the
//! flow-out `Λ^τ_{SN*H}(r)`. Tubes are probed at finitely many points (the
//! center and points at distance up to `r` along `SN*H`), and an entry is
//! recorded when a probe comes within the detection radius `1.5r` of `SN*H`,
//! enlarged by half the probe gap times the observed spreading of the probes.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conormal::{
    add, chart_difference, conormal_tangent, perturb, sample_snh, sasaki_distance, scaled, tangent_basis, tau_inj,
    ConormalPoint, SpatialHash, Submanifold, SubmanifoldSpec, Tube,
};
use crate::error::{GeoError, Result};
use crate::flow::{
    fmt, propagate_linearization, DiscreteHyperbolicSystem, FlowStepper, LinearizationOptions, PhasePoint, DEFAULT_DT,
};
use crate::manifold::{CurvatureKind, ManifoldModel};

/// Detection radius in units of `r`.
pub const DETECTION_FACTOR: f64 = 1.5;
/// Version written into persisted covers.
pub const COVER_FORMAT_VERSION: u32 = 1;
/// Largest integrator step used while scanning orbits; RK4 at this step keeps
/// orbit errors far below any admissible tube radius over desk-scale horizons.
pub const SCAN_DT: f64 = 1e-2;

fn local_distance(model: &ManifoldModel, p: &PhasePoint, q: &PhasePoint) -> f64 {
    match model {
        // shooting is too slow for per-sample use; first-order chart distance instead
        ManifoldModel::Warped { .. } => {
            let d = chart_difference(model, &p.x, &q.x);
            let dv = add(&q.velocity(model), &p.velocity(model), -1.0);
            model.inner(&p.x, &d, &d).sqrt().hypot(model.inner(&p.x, &dv, &dv).sqrt())
        }
        _ => sasaki_distance(model, p, q).distance,
    }
}

// ---------------------------------------------------------------------------
// Good covers

#[derive(Clone, Debug)]
pub struct CoverOptions {
    /// Center separation in units of `r`; by default 0.9 when `SN*H` is a curve
    /// and 0.5 otherwise.
    pub separation: Option<f64>,
    /// Largest admissible number of color classes; by default 16 when `SN*H`
    /// is a curve (short cycles of tubes need up to 9) and 64 otherwise.
    pub max_colors: Option<usize>,
    /// Largest admissible tube radius.
    pub r_max: f64,
    /// Upper bound for `τ`; `τ_inj(H)/2` is computed when absent.
    pub tau_limit: Option<f64>,
}

impl Default for CoverOptions {
    fn default() -> Self {
        CoverOptions { separation: None, max_colors: None, r_max: 1.0, tau_limit: None }
    }
}

/// A `(𝔇, τ, r)`-good cover of `SN*H`.
#[derive(Clone, Debug)]
pub struct GoodCover {
    pub h: Submanifold,
    pub tau: f64,
    pub r: f64,
    pub tubes: Vec<Tube>,
    /// Color class of each tube.
    pub colors: Vec<usize>,
    pub color_count: usize,
    /// Largest distance from the fine net of `SN*H` to the nearest center.
    pub covering_radius: f64,
}

fn fine_net(h: &Submanifold, r: f64) -> Result<Vec<ConormalPoint>> {
    let spacing = if h.conormal_dim() <= 1 { r / 16.0 } else { r / 4.0 };
    sample_snh(h, spacing)
}

fn center_hash(model: &ManifoldModel, tubes: &[Tube], r: f64, keep: impl Fn(usize) -> bool) -> SpatialHash {
    let mut hash = SpatialHash::new(model, r);
    for t in tubes {
        if keep(t.id) {
            hash.insert(t.id, &t.center.rho.x);
        }
    }
    hash
}

/// Greedy separated centers on a fine net of `SN*H`, a repair pass for the
/// covering radius `r/2`, and greedy coloring of the `3r`-intersection graph.
pub fn build_good_cover(h: &Submanifold, tau: f64, r: f64, opts: &CoverOptions) -> Result<GoodCover> {
    if !(r > 0.0 && r <= opts.r_max) {
        return Err(GeoError::Precondition(format!("r = {r} outside (0, {}]", opts.r_max)));
    }
    let limit = match opts.tau_limit {
        Some(l) => l,
        None => tau_inj(h)? / 2.0,
    };
    if !(tau > 0.0 && tau <= limit + 1e-12) {
        return Err(GeoError::Precondition(format!("τ = {tau} outside (0, {limit}]")));
    }
    let model = &h.model;
    let dim = h.conormal_dim();
    let sep = opts.separation.unwrap_or(if dim <= 1 { 0.9 } else { 0.5 }) * r;
    let fine = fine_net(h, r)?;
    let dist = |a: &PhasePoint, b: &PhasePoint| sasaki_distance(model, a, b).distance;

    let mut centers: Vec<ConormalPoint> = vec![];
    let mut keys: Vec<usize> = vec![];
    let mut hash = SpatialHash::new(model, sep);
    let nearest = |q: &PhasePoint, centers: &[ConormalPoint], hash: &SpatialHash, radius: f64| -> f64 {
        hash.query(&q.x, radius).into_iter().map(|i| dist(q, &centers[i].rho)).fold(f64::INFINITY, f64::min)
    };
    for (i, c) in fine.iter().enumerate() {
        if nearest(&c.rho, &centers, &hash, sep) >= sep {
            hash.insert(centers.len(), &c.rho.x);
            centers.push(c.clone());
            keys.push(i);
        }
    }
    let mut covering: f64 = 0.0;
    for (i, c) in fine.iter().enumerate() {
        let d = nearest(&c.rho, &centers, &hash, 0.5 * r);
        if d > 0.5 * r {
            hash.insert(centers.len(), &c.rho.x);
            centers.push(c.clone());
            keys.push(i);
        } else {
            covering = covering.max(d);
        }
    }
    let tubes: Vec<Tube> =
        centers.into_iter().enumerate().map(|(id, center)| Tube { id, center, tau, r }).collect();
    let (colors, color_count) = color_tubes(model, &tubes, r, (dim == 1).then_some(keys.as_slice()));
    let max_colors = opts.max_colors.unwrap_or(if dim <= 1 { 16 } else { 64 });
    if color_count > max_colors {
        return Err(GeoError::Invariant(format!(
            "{color_count} color classes exceed the limit {max_colors}; r is too large or the net too coarse"
        )));
    }
    Ok(GoodCover { h: h.clone(), tau, r, tubes, colors, color_count, covering_radius: covering })
}

/// Tubes whose `3r`-enlargements can meet: centers closer than `6r`.
fn conflicts(model: &ManifoldModel, tubes: &[Tube], r: f64) -> Vec<Vec<usize>> {
    let hash = center_hash(model, tubes, 6.0 * r, |_| true);
    tubes
        .par_iter()
        .map(|t| {
            let mut out: Vec<usize> = hash
                .query(&t.center.rho.x, 6.0 * r)
                .into_iter()
                .filter(|&j| j != t.id && sasaki_distance(model, &t.center.rho, &tubes[j].center.rho).distance < 6.0 * r)
                .collect();
            out.sort_unstable();
            out
        })
        .collect()
}

fn greedy_in_order(adj: &[Vec<usize>], order: &[usize]) -> (Vec<usize>, usize) {
    let mut colors = vec![usize::MAX; adj.len()];
    let mut count = 0;
    for &i in order {
        let used: BTreeSet<usize> = adj[i].iter().map(|&j| colors[j]).collect();
        let c = (0..).find(|c| !used.contains(c)).unwrap();
        colors[i] = c;
        count = count.max(c + 1);
    }
    (colors, count)
}

/// Saturation-degree greedy coloring (ties by degree, then index).
fn dsatur(adj: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let n = adj.len();
    let mut colors = vec![usize::MAX; n];
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut count = 0;
    for _ in 0..n {
        let i = (0..n)
            .filter(|&i| colors[i] == usize::MAX)
            .max_by(|&a, &b| {
                (seen[a].len(), adj[a].len()).cmp(&(seen[b].len(), adj[b].len())).then(b.cmp(&a))
            })
            .unwrap();
        let c = (0..).find(|c| !seen[i].contains(c)).unwrap();
        colors[i] = c;
        count = count.max(c + 1);
        for &j in &adj[i] {
            seen[j].insert(c);
        }
    }
    (colors, count)
}

/// Tabu search for a proper `k`-coloring starting from `init` (colors ≥ k are folded).
fn tabu_coloring(adj: &[Vec<usize>], init: &[usize], k: usize, iterations: usize, seed: u64) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col: Vec<usize> = init.iter().map(|&c| if c < k { c } else { rng.gen_range(0..k) }).collect();
    let mut gamma = vec![0i64; n * k];
    for i in 0..n {
        for &j in &adj[i] {
            gamma[i * k + col[j]] += 1;
        }
    }
    let mut conflicts: i64 = (0..n).map(|i| gamma[i * k + col[i]]).sum::<i64>() / 2;
    let mut best = conflicts;
    let mut tabu = vec![0usize; n * k];
    for it in 0..iterations {
        if conflicts == 0 {
            return Some(col);
        }
        let mut mv: Option<(usize, usize, i64)> = None;
        for v in 0..n {
            let own = gamma[v * k + col[v]];
            if own == 0 {
                continue;
            }
            for c in 0..k {
                if c == col[v] {
                    continue;
                }
                let delta = gamma[v * k + c] - own;
                let allowed = tabu[v * k + c] <= it || conflicts + delta < best;
                if allowed && mv.map(|m| delta < m.2).unwrap_or(true) {
                    mv = Some((v, c, delta));
                }
            }
        }
        let (v, c, delta) = match mv {
            Some(m) => m,
            None => {
                // every move is tabu: perturb a conflicting vertex
                let bad: Vec<usize> = (0..n).filter(|&v| gamma[v * k + col[v]] > 0).collect();
                let v = bad[rng.gen_range(0..bad.len())];
                let c = (col[v] + 1 + rng.gen_range(0..k - 1)) % k;
                (v, c, gamma[v * k + c] - gamma[v * k + col[v]])
            }
        };
        let old = col[v];
        for &j in &adj[v] {
            gamma[j * k + old] -= 1;
            gamma[j * k + c] += 1;
        }
        col[v] = c;
        conflicts += delta;
        best = best.min(conflicts);
        tabu[v * k + old] = it + 1 + rng.gen_range(0..10) + (0.6 * conflicts as f64) as usize;
    }
    (conflicts == 0).then_some(col)
}

/// Block coloring of a one-dimensional net: each connected component is walked
/// in net order and cut into runs longer than the conflict reach.
fn block_coloring(adj: &[Vec<usize>], keys: &[usize]) -> Option<(Vec<usize>, usize)> {
    let n = adj.len();
    let mut colors = vec![usize::MAX; n];
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut members = vec![start];
        comp[start] = start;
        let mut i = 0;
        while i < members.len() {
            for &j in &adj[members[i]] {
                if comp[j] == usize::MAX {
                    comp[j] = start;
                    members.push(j);
                }
            }
            i += 1;
        }
        members.sort_by_key(|&v| keys[v]);
        let m = members.len();
        let mut pos = vec![0usize; n];
        for (k, &v) in members.iter().enumerate() {
            pos[v] = k;
        }
        let pos = &pos;
        let linear = members.iter().flat_map(|&v| adj[v].iter().map(move |&w| pos[v].abs_diff(pos[w]))).max().unwrap_or(0);
        if 2 * linear < m {
            // a path: runs of length reach + 1 repeat without clashes
            for &v in &members {
                colors[v] = pos[v] % (linear + 1);
            }
            count = count.max((linear + 1).min(m));
            continue;
        }
        let reach = members
            .iter()
            .flat_map(|&v| {
                adj[v].iter().map(move |&w| {
                    let d = pos[v].abs_diff(pos[w]);
                    d.min(m - d)
                })
            })
            .max()
            .unwrap_or(0);
        // a cycle: b runs of length reach + 2 and the rest of length reach + 1
        let b = m % (reach + 1);
        if b * (reach + 2) > m || 2 * reach >= m {
            return None;
        }
        let mut k = 0;
        let mut run = 0;
        while k < m {
            let len = if run < b { reach + 2 } else { reach + 1 };
            for c in 0..len {
                colors[members[k + c]] = c;
            }
            k += len;
            run += 1;
        }
        count = count.max(if b > 0 { reach + 2 } else { reach + 1 });
    }
    let proper = (0..n).all(|v| adj[v].iter().all(|&w| colors[v] != colors[w]));
    proper.then_some((colors, count))
}

fn color_tubes(model: &ManifoldModel, tubes: &[Tube], r: f64, net_keys: Option<&[usize]>) -> (Vec<usize>, usize) {
    let adj = conflicts(model, tubes, r);
    let order: Vec<usize> = (0..tubes.len()).collect();
    let mut best = greedy_in_order(&adj, &order);
    let mut candidates = vec![dsatur(&adj)];
    if let Some(keys) = net_keys {
        candidates.extend(block_coloring(&adj, keys));
    }
    for c in candidates {
        if c.1 < best.1 {
            best = c;
        }
    }
    let (mut colors, mut count) = best;
    while count > 2 {
        match tabu_coloring(&adj, &colors, count - 1, 20_000, count as u64) {
            Some(c) => {
                colors = c;
                count -= 1;
            }
            None => break,
        }
    }
    (colors, count)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CenterRecord {
    u: Vec<f64>,
    fiber: Vec<f64>,
    color: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverFile {
    version: u32,
    model: ManifoldModel,
    submanifold: SubmanifoldSpec,
    tau: f64,
    r: f64,
    color_count: usize,
    covering_radius: f64,
    centers: Vec<CenterRecord>,
}

impl GoodCover {
    pub fn len(&self) -> usize {
        self.tubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tubes.is_empty()
    }

    pub fn model(&self) -> &ManifoldModel {
        &self.h.model
    }

    pub fn color_classes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]; self.color_count];
        for (i, c) in self.colors.iter().enumerate() {
            out[*c].push(i);
        }
        out
    }

    /// Whether centers in each color class are at least `6r` apart.
    pub fn coloring_is_proper(&self) -> bool {
        conflicts(self.model(), &self.tubes, self.r)
            .iter()
            .enumerate()
            .all(|(i, adj)| adj.iter().all(|&j| self.colors[i] != self.colors[j]))
    }

    fn random_conormal(&self, rng: &mut ChaCha8Rng) -> ConormalPoint {
        let h = &self.h;
        if h.is_point() {
            match h.conormal_dim() {
                0 => h.conormal_fiber(&[if rng.gen::<bool>() { 1.0 } else { -1.0 }]),
                1 => h.conormal_fiber(&[rng.gen_range(0.0..std::f64::consts::TAU)]),
                _ => {
                    let z: f64 = rng.gen_range(-1.0..1.0);
                    h.conormal_fiber(&[z.acos(), rng.gen_range(0.0..std::f64::consts::TAU)])
                }
            }
        } else {
            let s = rng.gen_range(0.0..h.length());
            h.conormal_at(h.param_at_length(s), if rng.gen::<bool>() { 1.0 } else { -1.0 })
        }
    }

    /// Whether `q` lies in some tube, by scanning its orbit over `|s| ≤ τ + r`
    /// at step `r/8` against the tube centers.
    pub fn contains(&self, q: &PhasePoint) -> bool {
        let model = self.model();
        let hash = center_hash(model, &self.tubes, self.r, |_| true);
        self.contains_with(&hash, q)
    }

    fn contains_with(&self, hash: &SpatialHash, q: &PhasePoint) -> bool {
        let model = self.model();
        let span = self.tau + self.r;
        let m = (2.0 * span / (self.r / 8.0)).ceil() as usize;
        let step = 2.0 * span / m as f64;
        let stepper = FlowStepper::with_dt(model, step.min(DEFAULT_DT));
        let mut p = *q;
        stepper.advance(&mut p, -span);
        for i in 0..=m {
            let hit = hash
                .query(&p.x, self.r)
                .into_iter()
                .any(|j| sasaki_distance(model, &p, &self.tubes[j].center.rho).distance <= self.r);
            if hit {
                return true;
            }
            if i < m {
                stepper.advance(&mut p, step);
            }
        }
        false
    }

    /// Number of Monte Carlo points of `Λ^τ_{SN*H}(r/2)` that no tube contains.
    pub fn monte_carlo_misses(&self, samples: usize, seed: u64) -> Result<usize> {
        let model = self.model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(samples);
        while points.len() < samples {
            let rho = self.random_conormal(&mut rng).rho;
            let rad = 0.5 * self.r * rng.gen::<f64>().sqrt();
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let q = perturb(model, &rho, rad * ang.cos(), rad * ang.sin(), &mut rng)?;
            if sasaki_distance(model, &q, &rho).distance > 0.5 * self.r {
                continue;
            }
            let s = rng.gen_range(-self.tau..=self.tau);
            let mut p = q;
            FlowStepper::new(model).advance(&mut p, s);
            points.push(p);
        }
        let hash = center_hash(model, &self.tubes, self.r, |_| true);
        Ok(points.par_iter().filter(|p| !self.contains_with(&hash, p)).count())
    }

    /// Versioned structured-text form of the cover.
    pub fn to_text(&self) -> Result<String> {
        let file = CoverFile {
            version: COVER_FORMAT_VERSION,
            model: self.h.model.clone(),
            submanifold: self.h.spec.clone(),
            tau: self.tau,
            r: self.r,
            color_count: self.color_count,
            covering_radius: self.covering_radius,
            centers: self
                .tubes
                .iter()
                .map(|t| CenterRecord { u: t.center.u.clone(), fiber: t.center.fiber.clone(), color: self.colors[t.id] })
                .collect(),
        };
        toml::to_string(&file).map_err(|e| GeoError::Config(format!("cannot serialize cover: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let file: CoverFile = toml::from_str(text).map_err(|e| GeoError::Config(format!("bad cover file: {e}")))?;
        if file.version != COVER_FORMAT_VERSION {
            return Err(GeoError::Config(format!("cover format version {} is not supported", file.version)));
        }
        let h = Submanifold::new(&file.model, file.submanifold)?;
        let mut tubes = Vec::with_capacity(file.centers.len());
        let mut colors = Vec::with_capacity(file.centers.len());
        for (id, c) in file.centers.iter().enumerate() {
            let center = if h.is_point() {
                h.conormal_fiber(&c.fiber)
            } else {
                let (u, side) = match (c.u.first(), c.fiber.first()) {
                    (Some(u), Some(s)) => (*u, *s),
                    _ => return Err(GeoError::Config(format!("center {id} needs a parameter and a side"))),
                };
                h.conormal_at(u, side)
            };
            if c.color >= file.color_count {
                return Err(GeoError::Config(format!("center {id} has color {} ≥ {}", c.color, file.color_count)));
            }
            tubes.push(Tube { id, center, tau: file.tau, r: file.r });
            colors.push(c.color);
        }
        Ok(GoodCover {
            h,
            tau: file.tau,
            r: file.r,
            tubes,
            colors,
            color_count: file.color_count,
            covering_radius: file.covering_radius,
        })
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_text()?.as_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut s = String::new();
        input.read_to_string(&mut s)?;
        Self::from_text(&s)
    }
}

// ---------------------------------------------------------------------------
// Looping reports

#[derive(Clone, Debug)]
pub struct LoopingOptions {
    /// Expansion rate used to choose the sampling step `min(τ/4, r/(2e^Λ))`.
    pub lambda_hat: f64,
    /// Probes per direction and side of `SN*H`.
    pub probe_density: usize,
    /// Enlarge the detection radius by half the probe gap times the probe spreading.
    pub inflate: bool,
    pub detection_factor: f64,
    /// Largest number of orbit samples per probe.
    pub max_samples: usize,
}

impl Default for LoopingOptions {
    fn default() -> Self {
        LoopingOptions {
            lambda_hat: 0.0,
            probe_density: 1,
            inflate: false,
            detection_factor: DETECTION_FACTOR,
            max_samples: 4_000_000,
        }
    }
}

/// A maximal run of consecutive orbit samples inside the detection radius.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReturnEvent {
    pub start: f64,
    pub end: f64,
    /// Sample time of the closest approach.
    pub time: f64,
    pub distance: f64,
    /// Tubes whose centers were within reach during the run.
    pub hit_tubes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TubeLoops {
    pub tube_id: usize,
    /// Merged windows `[t_a, t_b] ⊂ [t₀, T₀]` of times `t` at which the flowed tube meets the target.
    pub windows: Vec<(f64, f64)>,
    /// Smallest probe distance observed within reach; infinite if the orbit never came close.
    pub min_return_distance: f64,
    pub events: Vec<ReturnEvent>,
}

impl TubeLoops {
    pub fn loops(&self) -> bool {
        !self.windows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoopingReport {
    pub t0: f64,
    pub t1: f64,
    pub tau: f64,
    pub r: f64,
    pub step: f64,
    pub probe_density: usize,
    pub tubes: Vec<TubeLoops>,
}

impl LoopingReport {
    pub fn looping_ids(&self) -> Vec<usize> {
        self.tubes.iter().filter(|t| t.loops()).map(|t| t.tube_id).collect()
    }

    pub fn looping_fraction(&self) -> f64 {
        if self.tubes.is_empty() {
            return 0.0;
        }
        self.looping_ids().len() as f64 / self.tubes.len() as f64
    }

    /// One row per window; tubes without returns get one row with empty window fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tube_id", "window_start", "window_end", "min_return_distance"])?;
        for t in &self.tubes {
            let d = fmt(t.min_return_distance);
            if t.windows.is_empty() {
                w.write_record([t.tube_id.to_string(), String::new(), String::new(), d.clone()])?;
            }
            for (a, b) in &t.windows {
                w.write_record([t.tube_id.to_string(), fmt(*a), fmt(*b), d.clone()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

enum Target {
    /// All of `SN*H`, with the exact distance.
    Snh,
    /// The union of the listed tubes, by distance to their centers.
    Tubes(Vec<bool>),
}

struct ScanSetup<'a> {
    cover: &'a GoodCover,
    t0: f64,
    t1: f64,
    start: f64,
    samples: usize,
    dstep: f64,
    nsub: usize,
    opts: &'a LoopingOptions,
    target: Target,
    hash: SpatialHash,
}

fn probe_points(cover: &GoodCover, j: usize, density: usize) -> Vec<(PhasePoint, f64)> {
    let h = &cover.h;
    let model = &h.model;
    let c = &cover.tubes[j].center;
    let r = cover.r;
    let mut out = vec![(c.rho, 0.0)];
    if h.is_point() {
        let x = c.rho.x;
        let v = c.rho.velocity(model);
        let mut dirs: Vec<_> = vec![];
        for e in tangent_basis(model, &x) {
            let mut w = add(&e, &v, -model.inner(&x, &e, &v));
            for d in &dirs {
                w = add(&w, d, -model.inner(&x, &w, d));
            }
            let n = model.inner(&x, &w, &w).sqrt();
            if n > 1e-8 {
                dirs.push(scaled(&w, 1.0 / n));
            }
        }
        for d in &dirs {
            for i in 1..=density {
                let a = r * i as f64 / density as f64;
                for sgn in [1.0, -1.0] {
                    let vv = add(&scaled(&v, a.cos()), d, sgn * a.sin());
                    let mut p = PhasePoint { x, xi: model.lower(&x, &vv) };
                    model.renormalize(&mut p);
                    out.push((p, a));
                }
            }
        }
    } else {
        let (_, _, closed) = h.param_range();
        let len = h.length();
        let s0 = h.arclength_at(c.u[0]);
        for i in 1..=density {
            let a = r * i as f64 / density as f64;
            for sgn in [1.0, -1.0] {
                let s = s0 + sgn * a;
                let (s, off) = if closed { (s.rem_euclid(len), a) } else { (s.clamp(0.0, len), (s.clamp(0.0, len) - s0).abs()) };
                if off < 1e-12 {
                    continue;
                }
                out.push((h.conormal_at(h.param_at_length(s), c.fiber[0]).rho, off));
            }
        }
    }
    out
}

fn merge_windows(mut w: Vec<(f64, f64)>, gap: f64) -> Vec<(f64, f64)> {
    w.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<(f64, f64)> = vec![];
    for (a, b) in w {
        match out.last_mut() {
            Some(last) if a <= last.1 + gap => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

impl<'a> ScanSetup<'a> {
    fn new(cover: &'a GoodCover, t0: f64, t1: f64, opts: &'a LoopingOptions, target: Target) -> Result<Self> {
        if !(t0 > 0.0 && t1 >= t0) {
            return Err(GeoError::Precondition(format!("window [{t0}, {t1}] needs T₀ ≥ t₀ > 0")));
        }
        if opts.probe_density == 0 {
            return Err(GeoError::Precondition("probe density must be positive".into()));
        }
        let (tau, r) = (cover.tau, cover.r);
        let step = (tau / 4.0).min(r / (2.0 * opts.lambda_hat.max(0.0).exp()));
        let start = t0 - tau;
        let span = t1 + tau - start;
        let samples = (span / step).ceil() as usize;
        if !(step > 1e-9) || samples > opts.max_samples {
            return Err(GeoError::Precondition(format!(
                "horizon: {samples} samples at step {step:.3e} exceed the limit {}",
                opts.max_samples
            )));
        }
        let dstep = span / samples as f64;
        let nsub = (dstep / SCAN_DT).ceil().max(1.0) as usize;
        let hash = match &target {
            Target::Snh => center_hash(cover.model(), &cover.tubes, r, |_| true),
            Target::Tubes(keep) => center_hash(cover.model(), &cover.tubes, r, |i| keep[i]),
        };
        Ok(ScanSetup { cover, t0, t1, start, samples, dstep, nsub, opts, target, hash })
    }

    fn scan(&self, j: usize) -> TubeLoops {
        let cover = self.cover;
        let model = cover.model();
        let (tau, r) = (cover.tau, cover.r);
        let density = self.opts.probe_density;
        let gap = r / density as f64;
        let mut probes = probe_points(cover, j, density);
        let stepper = FlowStepper::new(model);
        for (p, _) in probes.iter_mut() {
            stepper.advance(p, self.start);
        }
        let h = self.dstep / self.nsub as f64;
        let mut min_d = f64::INFINITY;
        let mut windows = vec![];
        let mut events: Vec<ReturnEvent> = vec![];
        let mut open = false;
        for i in 0..=self.samples {
            let t = self.start + self.dstep * i as f64;
            let inflation = if self.opts.inflate {
                let c = probes[0].0;
                let growth = probes[1..].iter().map(|(p, off)| local_distance(model, &c, p) / off).fold(0.0, f64::max);
                0.5 * gap * growth
            } else {
                0.0
            };
            let det = self.opts.detection_factor * r + inflation;
            let mut hit: Option<(f64, Vec<usize>)> = None;
            for (q, _) in &probes {
                let (d, tubes) = match &self.target {
                    Target::Snh => {
                        let reach = det + cover.covering_radius + 0.5 * r;
                        let cands = self.hash.query(&q.x, reach);
                        if cands.is_empty() {
                            continue;
                        }
                        let d = cover.h.distance_to_snh(q);
                        let tubes: Vec<usize> = if d <= det {
                            cands
                                .into_iter()
                                .filter(|&c| sasaki_distance(model, q, &cover.tubes[c].center.rho).distance <= reach)
                                .collect()
                        } else {
                            vec![]
                        };
                        (d, tubes)
                    }
                    Target::Tubes(_) => {
                        let mut d = f64::INFINITY;
                        let mut tubes = vec![];
                        for c in self.hash.query(&q.x, det) {
                            let dc = sasaki_distance(model, q, &cover.tubes[c].center.rho).distance;
                            d = d.min(dc);
                            if dc <= det {
                                tubes.push(c);
                            }
                        }
                        (d, tubes)
                    }
                };
                min_d = min_d.min(d);
                if d <= det {
                    let e = hit.get_or_insert((d, vec![]));
                    e.0 = e.0.min(d);
                    e.1.extend(tubes);
                }
            }
            match hit {
                Some((d, mut tubes)) => {
                    let (a, b) = ((t - tau).max(self.t0), (t + tau).min(self.t1));
                    if a <= b {
                        windows.push((a, b));
                    }
                    tubes.sort_unstable();
                    tubes.dedup();
                    if open {
                        let e = events.last_mut().unwrap();
                        e.end = t;
                        if d < e.distance {
                            e.distance = d;
                            e.time = t;
                        }
                        e.hit_tubes.extend(tubes);
                        e.hit_tubes.sort_unstable();
                        e.hit_tubes.dedup();
                    } else {
                        events.push(ReturnEvent { start: t, end: t, time: t, distance: d, hit_tubes: tubes });
                        open = true;
                    }
                }
                None => open = false,
            }
            if i < self.samples {
                for (p, _) in probes.iter_mut() {
                    for _ in 0..self.nsub {
                        stepper.step(p, h);
                    }
                }
            }
        }
        TubeLoops { tube_id: j, windows: merge_windows(windows, self.dstep), min_return_distance: min_d, events }
    }
}

/// Flows every tube over `[t₀ − τ, T₀ + τ]` and records entries into `Λ^τ_{SN*H}(r)`.
pub fn classify_looping(cover: &GoodCover, t0: f64, t1: f64, opts: &LoopingOptions) -> Result<LoopingReport> {
    let ids: Vec<usize> = (0..cover.len()).collect();
    classify_subset(cover, &ids, t0, t1, opts)
}

/// [`classify_looping`] restricted to the listed tubes.
pub fn classify_subset(cover: &GoodCover, ids: &[usize], t0: f64, t1: f64, opts: &LoopingOptions) -> Result<LoopingReport> {
    let setup = ScanSetup::new(cover, t0, t1, opts, Target::Snh)?;
    let tubes = ids.par_iter().map(|&j| setup.scan(j)).collect();
    Ok(LoopingReport {
        t0,
        t1,
        tau: cover.tau,
        r: cover.r,
        step: setup.dstep,
        probe_density: opts.probe_density,
        tubes,
    })
}

/// Re-tests the union of `members` against itself at the given probe density,
/// with the plain detection radius. Returns edges `(source, hit)` inside the union.
pub fn union_violations(cover: &GoodCover, members: &[usize], t0: f64, t1: f64, density: usize) -> Result<Vec<(usize, usize)>> {
    let mut keep = vec![false; cover.len()];
    for &m in members {
        keep[m] = true;
    }
    let opts = LoopingOptions { probe_density: density, inflate: false, ..LoopingOptions::default() };
    let setup = ScanSetup::new(cover, t0, t1, &opts, Target::Tubes(keep.clone()))?;
    let loops: Vec<TubeLoops> = members.par_iter().map(|&j| setup.scan(j)).collect();
    let mut edges = BTreeSet::new();
    for l in &loops {
        for e in &l.events {
            let (a, b) = (e.start - cover.tau, e.end + cover.tau);
            if b < t0 || a > t1 {
                continue;
            }
            for &i in &e.hit_tubes {
                if keep[i] {
                    edges.insert((l.tube_id, i));
                }
            }
        }
    }
    Ok(edges.into_iter().collect())
}

// ---------------------------------------------------------------------------
// Partitions

/// One rung `(G_ℓ, t_ℓ, T_ℓ)` of a partition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rung {
    pub tubes: Vec<usize>,
    pub t_start: f64,
    pub t_end: f64,
}

/// Fitted decay of the rung counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountingFit {
    /// `exp` of the least-squares slope of `log |G_ℓ|` against `ℓ`.
    pub ratio: f64,
    pub prefactor: f64,
    /// Smallest `c` with `|G_ℓ| ≤ c·5^{−ℓ}·r^{1−n}` on every rung.
    pub c_ladder: f64,
    pub bad_fraction: f64,
    pub rungs_fitted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverPartition {
    pub tube_count: usize,
    pub color_count: usize,
    pub tau: f64,
    pub r: f64,
    /// Dimension of the ambient manifold.
    pub dim: usize,
    /// Codimension of `H`.
    pub codim: usize,
    pub bad: Vec<usize>,
    pub rungs: Vec<Rung>,
    /// Tubes moved to `B` by the union re-test.
    pub union_moved: Vec<usize>,
    pub diagnostics: Vec<String>,
    pub counting: Option<CountingFit>,
}

impl CoverPartition {
    pub fn good_count(&self) -> usize {
        self.rungs.iter().map(|g| g.tubes.len()).sum()
    }

    pub fn bad_fraction(&self) -> f64 {
        self.bad.len() as f64 / self.tube_count.max(1) as f64
    }

    /// Whether `B ∪ ⋃G_ℓ` contains every listed tube.
    pub fn covers(&self, relevant: &[usize]) -> bool {
        let mut seen = vec![false; self.tube_count];
        for i in self.bad.iter().chain(self.rungs.iter().flat_map(|g| g.tubes.iter())) {
            seen[*i] = true;
        }
        relevant.iter().all(|i| *i < self.tube_count && seen[*i])
    }

    /// Rows `tube_id, class, rung, t_start, t_end`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows: Vec<(usize, String, String, String, String)> = vec![];
        for (l, g) in self.rungs.iter().enumerate() {
            for &t in &g.tubes {
                rows.push((t, "good".into(), l.to_string(), fmt(g.t_start), fmt(g.t_end)));
            }
        }
        for &t in &self.bad {
            rows.push((t, "bad".into(), String::new(), String::new(), String::new()));
        }
        rows.sort_by_key(|r| r.0);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tube_id", "class", "rung", "t_start", "t_end"])?;
        for r in rows {
            w.write_record([r.0.to_string(), r.1, r.2, r.3, r.4])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_report(report: &LoopingReport, cover: &GoodCover, t0: f64, t1: f64) -> Result<()> {
    if report.tubes.len() != cover.len() {
        return Err(GeoError::Precondition(format!(
            "report has {} tubes but the cover has {}",
            report.tubes.len(),
            cover.len()
        )));
    }
    if report.t0 > t0 + 1e-12 || report.t1 < t1 - 1e-12 {
        return Err(GeoError::Precondition(format!(
            "report window [{}, {}] does not contain [{t0}, {t1}]",
            report.t0, report.t1
        )));
    }
    Ok(())
}

fn empty_partition(cover: &GoodCover) -> CoverPartition {
    CoverPartition {
        tube_count: cover.len(),
        color_count: cover.color_count,
        tau: cover.tau,
        r: cover.r,
        dim: cover.model().dim(),
        codim: cover.h.codim,
        bad: vec![],
        rungs: vec![],
        union_moved: vec![],
        diagnostics: vec![],
        counting: None,
    }
}

/// Greedily removes the most connected tube until no edge is left.
fn greedy_edge_cover(edges: &[(usize, usize)]) -> Vec<usize> {
    let mut live: Vec<(usize, usize)> = edges.to_vec();
    let mut moved = vec![];
    while !live.is_empty() {
        let mut deg = std::collections::BTreeMap::new();
        for (a, b) in &live {
            *deg.entry(*a).or_insert(0usize) += 1;
            if a != b {
                *deg.entry(*b).or_insert(0usize) += 1;
            }
        }
        let (&worst, _) = deg.iter().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0))).unwrap();
        moved.push(worst);
        live.retain(|(a, b)| *a != worst && *b != worst);
    }
    moved.sort_unstable();
    moved
}

/// `B` = tubes with a return window in `[t₀, T₀]`; one rung with the rest, after a
/// union re-test at double probe density moves offending tubes to `B`.
pub fn partition_single_window(cover: &GoodCover, report: &LoopingReport, t0: f64, t1: f64) -> Result<CoverPartition> {
    check_report(report, cover, t0, t1)?;
    let mut bad = vec![];
    let mut good = vec![];
    for l in &report.tubes {
        if l.windows.iter().any(|(a, b)| *b >= t0 && *a <= t1) {
            bad.push(l.tube_id);
        } else {
            good.push(l.tube_id);
        }
    }
    let mut p = empty_partition(cover);
    let edges = if good.is_empty() { vec![] } else { union_violations(cover, &good, t0, t1, 2)? };
    let moved = greedy_edge_cover(&edges);
    if !moved.is_empty() {
        p.diagnostics.push(format!("union re-test moved {} tubes to the bad set", moved.len()));
        good.retain(|t| moved.binary_search(t).is_err());
        bad.extend(&moved);
        bad.sort_unstable();
    }
    p.bad = bad;
    p.union_moved = moved;
    p.rungs.push(Rung { tubes: good, t_start: t0, t_end: t1 });
    Ok(p)
}

/// Per-ball contraction data `sup |det J_t|` of `T(SN*H)` under the flow.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BallCertificate {
    pub tubes: Vec<usize>,
    pub decay: Vec<(f64, f64)>,
}

impl BallCertificate {
    /// Contracting if the last recorded value is below one.
    pub fn contracts(&self) -> bool {
        self.decay.last().map(|(_, v)| *v < 1.0 - 1e-9).unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Default)]
pub struct ContractionCertificate {
    pub balls: Vec<BallCertificate>,
}

impl ContractionCertificate {
    fn split(&self, n: usize) -> Result<Vec<usize>> {
        let mut seen = vec![false; n];
        let mut bad = vec![];
        for b in &self.balls {
            for &t in &b.tubes {
                if t >= n {
                    return Err(GeoError::Precondition(format!("certificate names tube {t} outside the cover")));
                }
                seen[t] = true;
                if !b.contracts() {
                    bad.push(t);
                }
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(GeoError::Precondition(format!("no contraction data covers tube {t}")));
        }
        bad.sort_unstable();
        bad.dedup();
        Ok(bad)
    }
}

/// Volume growth of `T(SN*H)` under `dφ_t`, sup over groups of `ball_tubes`
/// consecutive tubes, at the given times.
pub fn flow_contraction_certificate(cover: &GoodCover, ball_tubes: usize, times: &[f64]) -> Result<ContractionCertificate> {
    let t_max = times.iter().cloned().fold(0.0, f64::max);
    let opts = LinearizationOptions { record_stride: 1_000_000, ..LinearizationOptions::default() };
    let per_tube: Vec<Vec<f64>> = cover
        .tubes
        .par_iter()
        .map(|t| -> Result<Vec<f64>> {
            let seg = propagate_linearization(cover.model(), &t.center.rho, t_max, &opts)?;
            let v = conormal_tangent(&cover.h, &t.center);
            let g0 = (v.transpose() * &v).determinant();
            times
                .iter()
                .map(|&s| {
                    let phi = seg.state_at(s)?.phi();
                    let w = &phi * &v;
                    Ok(((w.transpose() * &w).determinant() / g0).max(0.0).sqrt())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let size = ball_tubes.max(1);
    let balls = (0..cover.len())
        .collect::<Vec<_>>()
        .chunks(size)
        .map(|ch| BallCertificate {
            tubes: ch.to_vec(),
            decay: times
                .iter()
                .enumerate()
                .map(|(k, &s)| (s, ch.iter().map(|&t| per_tube[t][k]).fold(0.0, f64::max)))
                .collect(),
        })
        .collect();
    Ok(ContractionCertificate { balls })
}

/// Assigns tubes rung by rung: at rung `ℓ`, tubes of the current set hit by returns
/// of the current set within `[t₀, T_ℓ]` are removed and carried to the next rung.
fn ladder_core(
    n: usize,
    pre_bad: &[usize],
    windows: &[(f64, f64)],
    landings: &(dyn Fn(usize, f64) -> Vec<usize> + Sync),
) -> (Vec<Rung>, Vec<usize>) {
    let mut in_e = vec![true; n];
    for &b in pre_bad {
        in_e[b] = false;
    }
    let mut e: Vec<usize> = (0..n).filter(|&i| in_e[i]).collect();
    let mut rungs = vec![];
    for &(ts, te) in windows {
        let hits: Vec<Vec<usize>> = e.par_iter().map(|&j| landings(j, te)).collect();
        let mut land = vec![false; n];
        for h in hits {
            for i in h {
                if in_e[i] {
                    land[i] = true;
                }
            }
        }
        let good: Vec<usize> = e.iter().cloned().filter(|&i| !land[i]).collect();
        e.retain(|&i| land[i]);
        in_e = land;
        rungs.push(Rung { tubes: good, t_start: ts, t_end: te });
    }
    let mut bad: Vec<usize> = pre_bad.iter().cloned().chain(e).collect();
    bad.sort_unstable();
    bad.dedup();
    (rungs, bad)
}

fn counting_fit(rungs: &[Rung], bad: usize, total: usize, r: f64, dim: usize) -> CountingFit {
    let pts: Vec<(f64, f64)> = rungs
        .iter()
        .take(7)
        .enumerate()
        .filter(|(_, g)| !g.tubes.is_empty())
        .map(|(l, g)| (l as f64, (g.tubes.len() as f64).ln()))
        .collect();
    let (ratio, prefactor) = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        (slope.exp(), (my - slope * mx).exp())
    } else {
        (0.0, pts.first().map(|p| p.1.exp()).unwrap_or(0.0))
    };
    let scale = r.powi(dim as i32 - 1);
    let c_ladder = rungs
        .iter()
        .enumerate()
        .map(|(l, g)| g.tubes.len() as f64 * 5f64.powi(l as i32) * scale)
        .fold(0.0, f64::max);
    CountingFit { ratio, prefactor, c_ladder, bad_fraction: bad as f64 / total.max(1) as f64, rungs_fitted: pts.len() }
}

/// Dyadic ladder on `[t₀, 2^{−ℓ}T₀]`, `ℓ = 0..⌊log₂(T₀/t₀)⌋`.
///
/// Tubes in balls whose certificate shows no contraction go to `B` directly.
/// Without a certificate the rungs are still built, but no counting law is
/// claimed and a diagnostic says so.
pub fn dyadic_ladder(
    cover: &GoodCover,
    report: &LoopingReport,
    t0: f64,
    t1: f64,
    certificate: Option<&ContractionCertificate>,
) -> Result<CoverPartition> {
    check_report(report, cover, t0, t1)?;
    let m = (t1 / t0).log2().floor().max(0.0) as usize;
    if m == 0 {
        return partition_single_window(cover, report, t0, t1);
    }
    let mut p = empty_partition(cover);
    let pre_bad = match certificate {
        Some(c) => c.split(cover.len())?,
        None => {
            p.diagnostics.push("no contraction certificate: rungs built from returns only, counting laws not asserted".into());
            vec![]
        }
    };
    let windows: Vec<(f64, f64)> = (0..=m).map(|l| (t0, t1 / 2f64.powi(l as i32))).collect();
    let tau = cover.tau;
    let landings = |j: usize, te: f64| -> Vec<usize> {
        report.tubes[j]
            .events
            .iter()
            .filter(|e| e.end + tau >= t0 && e.start - tau <= te)
            .flat_map(|e| e.hit_tubes.iter().cloned())
            .collect()
    };
    let (rungs, bad) = ladder_core(cover.len(), &pre_bad, &windows, &landings);
    if certificate.is_some() {
        p.counting = Some(counting_fit(&rungs, bad.len(), cover.len(), cover.r, p.dim));
    }
    p.rungs = rungs;
    p.bad = bad;
    Ok(p)
}

// ---------------------------------------------------------------------------
// Discrete hyperbolic backend: a segment in T² with exact landings

/// Arcs of half-length `r` along a segment `{p + s·d : |s| ≤ L/2}` of the torus,
/// where `p = base/den` is rational so that its orbit is exact.
#[derive(Clone, Debug)]
pub struct SegmentCover {
    pub system: DiscreteHyperbolicSystem,
    pub base: [i64; 2],
    pub den: i64,
    pub direction: [f64; 2],
    pub length: f64,
    pub r: f64,
    /// Arclength offsets of the arc centers, increasing.
    pub centers: Vec<f64>,
}

/// A removal ball of [`SegmentCover::controlled_refinement`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RemovalBall {
    pub center: f64,
    pub radius: f64,
    pub step: u32,
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefinementReport {
    /// First step of the window on which the survivors are non-looping.
    pub t_start: u32,
    pub removed: Vec<RemovalBall>,
    /// `ε·Σ R_{0,i}^{n−1}`.
    pub budget: f64,
    /// `Σ radii^{n−1}` of the removal balls.
    pub used: f64,
    pub floor: f64,
}

impl SegmentCover {
    pub fn new(
        system: DiscreteHyperbolicSystem,
        base: [i64; 2],
        den: i64,
        direction: [f64; 2],
        length: f64,
        r: f64,
    ) -> Result<Self> {
        if den <= 0 || !(length > 0.0) || !(r > 0.0) {
            return Err(GeoError::Precondition("segment needs den > 0, length > 0, r > 0".into()));
        }
        let n = (direction[0] * direction[0] + direction[1] * direction[1]).sqrt();
        if !(n > 0.0) {
            return Err(GeoError::Precondition("segment direction vanishes".into()));
        }
        let count = (length / (0.9 * r)).ceil() as usize + 1;
        let spacing = length / (count - 1) as f64;
        let centers = (0..count).map(|i| -0.5 * length + spacing * i as f64).collect();
        Ok(SegmentCover { system, base, den, direction: [direction[0] / n, direction[1] / n], length, r, centers })
    }

    /// Segment along the contracting eigendirection.
    pub fn stable(system: DiscreteHyperbolicSystem, base: [i64; 2], den: i64, length: f64, r: f64) -> Result<Self> {
        let d = system.stable_direction();
        Self::new(system, base, den, d, length, r)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn is_stable(&self) -> bool {
        let e = self.system.stable_direction();
        (self.direction[0] * e[1] - self.direction[1] * e[0]).abs() < 1e-9
    }

    /// Signed length factor of the segment direction after `k` steps.
    fn factor(&self, k: u32) -> f64 {
        self.system.eigenvalues().1.powi(k as i32)
    }

    /// Exact `f^k(p)` for `k = 0..=k_max`.
    fn base_orbit(&self, k_max: u32) -> Vec<[f64; 2]> {
        let m = self.system.matrix;
        let d = self.den as i128;
        let mut q = [(self.base[0] as i128).rem_euclid(d), (self.base[1] as i128).rem_euclid(d)];
        let mut out = Vec::with_capacity(k_max as usize + 1);
        for _ in 0..=k_max {
            out.push([q[0] as f64 / self.den as f64, q[1] as f64 / self.den as f64]);
            q = [
                (m[0][0] as i128 * q[0] + m[0][1] as i128 * q[1]).rem_euclid(d),
                (m[1][0] as i128 * q[0] + m[1][1] as i128 * q[1]).rem_euclid(d),
            ];
        }
        out
    }

    /// Along-segment positions `a` of lattice images of `f^k(p)` lying within
    /// `thickness` of the line of the segment, with `|a|` small enough for the
    /// image of the whole segment to reach it.
    fn landing_offsets(&self, q: [f64; 2], k: u32, thickness: f64) -> Vec<f64> {
        let p = [self.base[0] as f64 / self.den as f64, self.base[1] as f64 / self.den as f64];
        let d = self.direction;
        let half = 0.5 * self.length + self.r;
        let reach = half + half * self.factor(k).abs();
        let bound = (reach + thickness + 1.5).ceil() as i64;
        let mut out = vec![];
        for mx in -bound..=bound {
            for my in -bound..=bound {
                let w = [q[0] - p[0] + mx as f64, q[1] - p[1] + my as f64];
                let a = w[0] * d[0] + w[1] * d[1];
                let b = w[0] * d[1] - w[1] * d[0];
                if b.abs() <= thickness && a.abs() <= reach {
                    out.push(a);
                }
            }
        }
        out.sort_by(|x, y| x.partial_cmp(y).unwrap());
        out
    }

    /// Arcs overlapping the interval `[lo, hi]` of arclength offsets.
    fn arcs_meeting(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = self.centers.partition_point(|c| *c < lo - self.r);
        let b = self.centers.partition_point(|c| *c <= hi + self.r);
        a..b.max(a)
    }

    /// Arcs met by the image of arc `j` after `k` steps (target arcs thickened by `r`).
    pub fn landings(&self, j: usize, k: u32) -> Result<Vec<usize>> {
        if !self.is_stable() {
            return Err(GeoError::Unsupported("exact landings need a segment along the contracting direction".into()));
        }
        let q = *self.base_orbit(k).last().unwrap();
        Ok(self.landings_from(j, k, &self.landing_offsets(q, k, self.r)))
    }

    fn landings_from(&self, j: usize, k: u32, offsets: &[f64]) -> Vec<usize> {
        let f = self.factor(k);
        let mut out = vec![];
        for a in offsets {
            let c = a + self.centers[j] * f;
            let half = self.r * f.abs();
            out.extend(self.arcs_meeting(c - half, c + half));
        }
        out
    }

    /// Per-ball certificate from the exact length scaling of the segment direction.
    pub fn certificate(&self, ball_tubes: usize, horizon: u32) -> ContractionCertificate {
        let size = ball_tubes.max(1);
        let decay: Vec<(f64, f64)> =
            (0..=horizon).map(|k| (k as f64, self.system.segment_scaling(self.direction, k))).collect();
        let balls = (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size)
            .map(|ch| BallCertificate { tubes: ch.to_vec(), decay: decay.clone() })
            .collect();
        ContractionCertificate { balls }
    }

    /// Dyadic ladder with exact landings over integer steps `[t₀, ⌊T₀/2^ℓ⌋]`.
    pub fn ladder(&self, t0: u32, t1: u32, certificate: Option<&ContractionCertificate>) -> Result<CoverPartition> {
        if !(t0 >= 1 && t1 >= t0) {
            return Err(GeoError::Precondition(format!("window [{t0}, {t1}] needs T₀ ≥ t₀ ≥ 1")));
        }
        let n = self.len();
        let mut p = CoverPartition {
            tube_count: n,
            color_count: 1,
            tau: 0.0,
            r: self.r,
            dim: 2,
            codim: 1,
            bad: vec![],
            rungs: vec![],
            union_moved: vec![],
            diagnostics: vec![],
            counting: None,
        };
        let pre_bad = match certificate {
            Some(c) => c.split(n)?,
            None => {
                p.diagnostics.push("no contraction certificate: counting laws not asserted".into());
                vec![]
            }
        };
        if pre_bad.len() < n && !self.is_stable() {
            return Err(GeoError::Precondition(
                "tubes without contraction data along a non-contracting segment; certificate required".into(),
            ));
        }
        let m = ((t1 as f64) / (t0 as f64)).log2().floor().max(0.0) as u32;
        let orbit = self.base_orbit(t1);
        let offsets: Vec<(u32, Vec<f64>)> = (t0..=t1)
            .map(|k| (k, self.landing_offsets(orbit[k as usize], k, self.r)))
            .filter(|(_, o)| !o.is_empty())
            .collect();
        let windows: Vec<(f64, f64)> = (0..=m).map(|l| (t0 as f64, (t1 >> l) as f64)).collect();
        let landings = |j: usize, te: f64| -> Vec<usize> {
            offsets
                .iter()
                .take_while(|(k, _)| (*k as f64) <= te)
                .flat_map(|(k, o)| self.landings_from(j, *k, o))
                .collect()
        };
        let (rungs, bad) = ladder_core(n, &pre_bad, &windows, &landings);
        if certificate.is_some() {
            p.counting = Some(counting_fit(&rungs, bad.len(), n, self.r, 2));
        }
        p.rungs = rungs;
        p.bad = bad;
        Ok(p)
    }

    /// First step `s ≥ t₀` with `γ Σ_{k ≥ s} f(k) ≤ ε`, the tail past `T₀`
    /// extrapolated geometrically.
    pub fn refinement_start(decay: &dyn Fn(u32) -> f64, eps: f64, t0: u32, t1: u32, gamma: f64) -> Option<u32> {
        let (last, prev) = (decay(t1), decay(t1.saturating_sub(1)));
        let tail = if last <= 0.0 {
            0.0
        } else if prev > 0.0 && last < prev {
            let q = last / prev;
            last * q / (1.0 - q)
        } else {
            return None;
        };
        let mut sum = tail;
        let mut best = None;
        for s in (t0..=t1).rev() {
            sum += decay(s);
            if gamma * sum <= eps {
                best = Some(s);
            } else {
                break;
            }
        }
        best
    }

    /// One refinement round for a family of balls `(center offset, radius)` on the
    /// segment: every return of a ball onto the family within `[𝔱₀(ε), T₀]` is
    /// covered by a ball of radius `max(γ f(k) R, floor)` around its landing site,
    /// where `floor = e^{−rate·T₀} inf R`.
    #[allow(clippy::too_many_arguments)]
    pub fn controlled_refinement(
        &self,
        balls: &[(f64, f64)],
        decay: &dyn Fn(u32) -> f64,
        eps: f64,
        t0: u32,
        t1: u32,
        gamma: f64,
        thickness: f64,
        floor_rate: f64,
    ) -> Result<RefinementReport> {
        if !self.is_stable() {
            return Err(GeoError::Unsupported("refinement needs a segment along the contracting direction".into()));
        }
        if balls.is_empty() || !(eps > 0.0) || !(gamma >= 1.0) {
            return Err(GeoError::Precondition("refinement needs balls, ε > 0 and γ ≥ 1".into()));
        }
        for w in 1..=t1 {
            if decay(w) > decay(w - 1) + 1e-15 {
                return Err(GeoError::Precondition(format!("decay function increases at step {w}")));
            }
        }
        let budget = eps * balls.iter().map(|b| b.1).sum::<f64>();
        let floor = (-floor_rate * t1 as f64).exp() * balls.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
        let start = Self::refinement_start(decay, eps, t0, t1, gamma)
            .ok_or_else(|| GeoError::Infeasible(format!("γ Σ f(k) never drops below ε = {eps} before T₀ = {t1}")))?;
        let orbit = self.base_orbit(t1);
        let mut removed = vec![];
        let overlaps = |lo: f64, hi: f64| balls.iter().any(|(c, r)| lo <= c + r && hi >= c - r);
        let landing_sets: Vec<(u32, Vec<f64>)> =
            (start..=t1).map(|k| (k, self.landing_offsets(orbit[k as usize], k, thickness))).collect();
        for (k, offs) in &landing_sets {
            let f = self.factor(*k);
            for a in offs {
                for (i, (c, r)) in balls.iter().enumerate() {
                    let mid = a + c * f;
                    let half = r * f.abs();
                    if overlaps(mid - half, mid + half) {
                        removed.push(RemovalBall {
                            center: mid,
                            radius: (gamma * decay(*k) * r).max(floor),
                            step: *k,
                            source: i,
                        });
                    }
                }
            }
        }
        let used: f64 = removed.iter().map(|b| b.radius).sum();
        if used > budget {
            return Err(GeoError::Infeasible(format!(
                "removal radii sum {used:.3e} exceeds the budget {budget:.3e}; lower T₀"
            )));
        }
        // survivors must not return onto survivors
        let survivors = subtract_intervals(balls, &removed);
        for (k, offs) in &landing_sets {
            let f = self.factor(*k);
            for a in offs {
                for (lo, hi) in &survivors {
                    let (x, y) = (a + lo * f, a + hi * f);
                    let (x, y) = (x.min(y), x.max(y));
                    let tol = 1e-12 * (1.0 + x.abs().max(y.abs()));
                    if survivors.iter().any(|(s, e)| x < *e - tol && y > *s + tol) {
                        return Err(GeoError::Invariant(format!("survivors still return at step {k}")));
                    }
                }
            }
        }
        Ok(RefinementReport { t_start: start, removed, budget, used, floor })
    }
}

fn subtract_intervals(balls: &[(f64, f64)], removed: &[RemovalBall]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<(f64, f64)> = removed.iter().map(|b| (b.center - b.radius, b.center + b.radius)).collect();
    cuts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out = vec![];
    for (c, r) in balls {
        let mut pieces = vec![(c - r, c + r)];
        for (a, b) in &cuts {
            pieces = pieces
                .into_iter()
                .flat_map(|(s, e)| {
                    if *b <= s || *a >= e {
                        vec![(s, e)]
                    } else {
                        let mut v = vec![];
                        if *a > s {
                            v.push((s, *a));
                        }
                        if *b < e {
                            v.push((*b, e));
                        }
                        v
                    }
                })
                .collect();
        }
        out.extend(pieces);
    }
    out
}

// ---------------------------------------------------------------------------
// Recurrence gap on negatively curved surfaces

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    /// Excluded band `[c̃ ln(1/r)^{−2}, c₃]` of center distances.
    pub band: (f64, f64),
    /// `(window start, number of tubes returning in the window)`.
    pub window_counts: Vec<(f64, usize)>,
    /// Pairs returning in a common window with center distance inside the band.
    pub violations: Vec<(usize, usize, f64)>,
    /// Largest per-window count.
    pub max_count: usize,
}

/// Checks that tubes returning in a common `τ/2`-window are either very close or far apart.
pub fn recurrence_gap_check(cover: &GoodCover, report: &LoopingReport, c_tilde: f64, c3: f64) -> Result<GapReport> {
    let model = cover.model();
    match model.curvature_kind() {
        CurvatureKind::Flat => {
            return Err(GeoError::Unsupported("the gap mechanism needs negative curvature; model is flat".into()))
        }
        CurvatureKind::ConstantPositive => {
            return Err(GeoError::Unsupported("the gap mechanism needs negative curvature; model is positively curved".into()))
        }
        CurvatureKind::Variable if model.max_curvature() > 0.0 => {
            return Err(GeoError::Unsupported("the gap mechanism needs nonpositive curvature everywhere".into()))
        }
        _ => {}
    }
    if model.dim() != 2 {
        return Err(GeoError::Unsupported("the gap check is for surfaces".into()));
    }
    if !matches!(cover.h.spec, SubmanifoldSpec::VerticalGeodesic { .. } | SubmanifoldSpec::GeodesicArc { .. }) {
        return Err(GeoError::Precondition("the gap check needs H to be a geodesic".into()));
    }
    let r = cover.r;
    let band = (c_tilde * (1.0 / r).ln().powi(-2), c3);
    let width = 0.5 * cover.tau;
    let mut buckets: std::collections::BTreeMap<i64, BTreeSet<usize>> = Default::default();
    for l in &report.tubes {
        for e in &l.events {
            let k = ((e.time - report.t0) / width).floor() as i64;
            buckets.entry(k).or_default().insert(l.tube_id);
        }
    }
    let mut violations = vec![];
    let mut window_counts = vec![];
    for (k, set) in &buckets {
        window_counts.push((report.t0 + *k as f64 * width, set.len()));
        let ids: Vec<usize> = set.iter().cloned().collect();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                let d = sasaki_distance(model, &cover.tubes[i].center.rho, &cover.tubes[j].center.rho).distance;
                if d >= band.0 && d <= band.1 {
                    violations.push((i, j, d));
                }
            }
        }
    }
    let max_count = window_counts.iter().map(|w| w.1).max().unwrap_or(0);
    Ok(GapReport { band, window_counts, violations, max_count })
}
