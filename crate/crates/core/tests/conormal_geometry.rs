use geobeam::conormal::*;
use geobeam::flow::{flow, propagate_linearization, stable_unstable, PhasePoint, MAX_COORDS};
use geobeam::{DiscreteHyperbolicSystem, GeoError, ManifoldModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn pt(model: &ManifoldModel, x: &[f64], d: &[f64]) -> PhasePoint {
    PhasePoint::from_direction(model, x, d).unwrap()
}

fn torus_point() -> Submanifold {
    Submanifold::new(&ManifoldModel::flat_torus(2), SubmanifoldSpec::Point { x: vec![1.0, 2.0] }).unwrap()
}

fn min_pairwise(model: &ManifoldModel, pts: &[ConormalPoint]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..pts.len() {
        for j in 0..i {
            m = m.min(sasaki_distance(model, &pts[i].rho, &pts[j].rho).distance);
        }
    }
    m
}

#[test]
fn torus_point_fiber_is_a_circle() {
    let h = torus_point();
    let s = 0.1;
    let pts = sample_snh(&h, s).unwrap();
    assert!((pts.len() as f64 - 2.0 * PI / s).abs() <= 1.0);
    assert!(min_pairwise(&h.model, &pts) >= s / 2.0);
    // covering radius against a dense set of fiber angles
    for k in 0..2000 {
        let q = h.conormal_fiber(&[2.0 * PI * k as f64 / 2000.0]);
        let d = pts.iter().map(|p| sasaki_distance(&h.model, &q.rho, &p.rho).distance).fold(f64::INFINITY, f64::min);
        assert!(d <= s);
    }
}

#[test]
fn equator_has_both_normals() {
    let s2 = ManifoldModel::sphere(2);
    let h = Submanifold::new(&s2, SubmanifoldSpec::Equator).unwrap();
    let pts = sample_snh(&h, 0.2).unwrap();
    assert_eq!(pts.len() % 2, 0);
    for pair in pts.chunks(2) {
        assert_eq!(pair[0].u, pair[1].u);
        for i in 0..3 {
            assert!((pair[0].rho.xi[i] + pair[1].rho.xi[i]).abs() < 1e-12);
        }
        assert!((pair[0].rho.xi[2].abs() - 1.0).abs() < 1e-12);
        assert!(h.annihilation_defect(&pair[0]) < 1e-9);
    }
    assert!(min_pairwise(&s2, &pts) >= 0.1);
}

#[test]
fn sphere_point_covering_radius_brute_force() {
    let s2 = ManifoldModel::sphere(2);
    let h = Submanifold::new(&s2, SubmanifoldSpec::Point { x: vec![0.0, 0.0, 1.0] }).unwrap();
    let s = 0.15;
    let pts = sample_snh(&h, s).unwrap();
    assert!(min_pairwise(&s2, &pts) >= s / 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let q = h.conormal_fiber(&[rng.gen_range(0.0..2.0 * PI)]);
        let d = pts.iter().map(|p| sasaki_distance(&s2, &q.rho, &p.rho).distance).fold(f64::INFINITY, f64::min);
        assert!(d <= s);
    }
}

#[test]
fn s3_point_net_is_separated_and_covering() {
    let s3 = ManifoldModel::sphere(3);
    let h = Submanifold::new(&s3, SubmanifoldSpec::Point { x: vec![1.0, 0.0, 0.0, 0.0] }).unwrap();
    let s = 0.4;
    let pts = sample_snh(&h, s).unwrap();
    assert!(min_pairwise(&s3, &pts) >= s / 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let q = h.conormal_fiber(&[z.acos(), rng.gen_range(0.0..2.0 * PI)]);
        let d = pts.iter().map(|p| sasaki_distance(&s3, &q.rho, &p.rho).distance).fold(f64::INFINITY, f64::min);
        assert!(d <= s, "{d}");
    }
}

#[test]
fn sasaki_fiber_and_horizontal_cases() {
    let t = ManifoldModel::flat_torus(2);
    let a = pt(&t, &[0.0, 0.0], &[1.0, 0.0]);
    let b = pt(&t, &[0.0, 0.0], &[0.6f64.cos(), 0.6f64.sin()]);
    assert!((sasaki_distance(&t, &a, &b).distance - 0.6).abs() < 1e-12);
    let c = pt(&t, &[0.3, 0.0], &[0.0, 1.0]);
    let d = sasaki_distance(&t, &a, &c).distance;
    assert!((d - (0.09 + (PI / 2.0).powi(2)).sqrt()).abs() < 1e-12);

    for (m, rho) in [
        (ManifoldModel::sphere(2), pt(&ManifoldModel::sphere(2), &[1.0, 0.0, 0.0], &[0.0, 0.6, 0.8])),
        (ManifoldModel::half_plane(), pt(&ManifoldModel::half_plane(), &[0.0, 1.0], &[0.7, 0.2])),
        (
            ManifoldModel::from_name("torus_of_revolution").unwrap(),
            pt(&ManifoldModel::from_name("torus_of_revolution").unwrap(), &[0.5, 0.3], &[0.4, 0.3]),
        ),
    ] {
        let q = flow(&m, &rho, 0.7).unwrap();
        let sd = sasaki_distance(&m, &rho, &q);
        assert!(!sd.chordal);
        assert!((sd.base - 0.7).abs() < 1e-8, "{}: {sd:?}", m.name());
        assert!(sd.fiber < 1e-6, "{}: {sd:?}", m.name());
    }
}

#[test]
fn sasaki_chordal_fallback_is_flagged() {
    let s2 = ManifoldModel::sphere(2);
    let a = pt(&s2, &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]);
    let b = pt(&s2, &[0.0, 0.0, -1.0], &[1.0, 0.0, 0.0]);
    assert!(sasaki_distance(&s2, &a, &b).chordal);
}

fn random_point(m: &ManifoldModel, rng: &mut ChaCha8Rng) -> PhasePoint {
    match m {
        ManifoldModel::HyperbolicHalfPlane { .. } => {
            pt(m, &[rng.gen_range(-0.5..0.5), rng.gen_range(0.7..1.4)], &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        }
        ManifoldModel::RoundSphere { .. } => {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.3..1.0)];
            pt(m, &x, &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        }
        _ => pt(m, &[rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)], &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
    }
}

#[test]
fn sasaki_is_symmetric_with_triangle_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [ManifoldModel::sphere(2), ManifoldModel::half_plane(), ManifoldModel::from_name("torus_of_revolution").unwrap()] {
        for _ in 0..40 {
            let (a, b, c) = (random_point(&m, &mut rng), random_point(&m, &mut rng), random_point(&m, &mut rng));
            let ab = sasaki_distance(&m, &a, &b).distance;
            let ba = sasaki_distance(&m, &b, &a).distance;
            assert!((ab - ba).abs() < 1e-6, "{}: {ab} vs {ba}", m.name());
            let bc = sasaki_distance(&m, &b, &c).distance;
            let ac = sasaki_distance(&m, &a, &c).distance;
            assert!(ac <= ab + bc + 1e-6, "{}", m.name());
        }
    }
}

#[test]
fn half_plane_chord_matches_flow() {
    let h = ManifoldModel::half_plane();
    let rho = pt(&h, &[0.2, 0.8], &[0.9, -0.3]);
    let q = flow(&h, &rho, 1.3).unwrap();
    let c = chord(&h, &rho.x, &q.x).unwrap();
    assert!((c.length - 1.3).abs() < 1e-9);
    let v = q.velocity(&h);
    for i in 0..2 {
        assert!((c.v_end[i] - v[i]).abs() < 1e-8);
    }
}

// Independent nearest-point oracle: minimum over a dense sample of SN*H.
fn brute_distance(h: &Submanifold, q: &PhasePoint, dense: &[ConormalPoint]) -> f64 {
    dense.iter().map(|p| sasaki_distance(&h.model, q, &p.rho).distance).fold(f64::INFINITY, f64::min)
}

#[test]
fn defining_function_torus_point_comparable() {
    let h = torus_point();
    let f = defining_function(&h, 1).unwrap();
    assert!(f.delta_f > 0.0);
    let dense = sample_snh(&h, 2e-3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let x = [1.0 + rng.gen_range(-0.3..0.3), 2.0 + rng.gen_range(-0.3..0.3)];
        let q = pt(&h.model, &x, &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let d = brute_distance(&h, &q, &dense);
        if d >= f.delta_f {
            continue;
        }
        let ratio = f.norm(&q) / d;
        assert!((0.5..=2.0).contains(&ratio), "{ratio}");
    }
    for p in sample_snh(&h, 0.3).unwrap() {
        assert!(f.norm(&p.rho) < 1e-9);
    }
}

#[test]
fn defining_function_equator_comparable() {
    let s2 = ManifoldModel::sphere(2);
    let h = Submanifold::new(&s2, SubmanifoldSpec::Equator).unwrap();
    let f = defining_function(&h, 2).unwrap();
    assert!(f.delta_f >= 0.05, "{}", f.delta_f);
    let dense = sample_snh(&h, 2e-3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    for _ in 0..40 {
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let lat: f64 = rng.gen_range(-0.2..0.2);
        let x = [lat.cos() * phi.cos(), lat.cos() * phi.sin(), lat.sin()];
        let ang: f64 = rng.gen_range(-0.2..0.2);
        // mostly-normal covector tilted by `ang` towards the equator direction
        let dir = [-phi.sin() * ang.sin(), phi.cos() * ang.sin(), ang.cos()];
        let q = pt(&s2, &x, &dir);
        let d = brute_distance(&h, &q, &dense);
        if d >= f.delta_f || d < 1e-3 {
            continue;
        }
        checked += 1;
        let ratio = f.norm(&q) / d;
        assert!((0.5..=2.0).contains(&ratio), "{ratio}");
    }
    assert!(checked > 10);
    for p in sample_snh(&h, 0.3).unwrap() {
        assert!(f.norm(&p.rho) < 1e-9);
    }
}

#[test]
fn distance_to_snh_matches_dense_sampling() {
    let hp = ManifoldModel::half_plane();
    let h = Submanifold::new(&hp, SubmanifoldSpec::VerticalGeodesic { x0: 0.0, y_min: 0.5, y_max: 2.0 }).unwrap();
    let dense = sample_snh(&h, 1e-3).unwrap();
    let q = pt(&hp, &[0.05, 1.0], &[1.0, 0.1]);
    let exact = h.distance_to_snh(&q);
    let oracle = brute_distance(&h, &q, &dense);
    assert!(exact <= oracle + 1e-9 && oracle - exact < 1e-3, "{exact} vs {oracle}");
    // closed form for the base part: asinh(|x|/y)
    // with the covector along the connecting geodesic the fiber part vanishes
    let q = pt(&hp, &[0.1, 1.0], &[1.0, -0.1]);
    assert!((h.distance_to_snh(&q) - 0.1f64.asinh()).abs() < 1e-7);
}

#[test]
fn tube_membership_examples() {
    let h = torus_point();
    let cp = h.conormal_fiber(&[0.4]);
    let tube = Tube { id: 0, center: cp.clone(), tau: 0.5, r: 0.05 };
    assert!(tube_membership(&h.model, &tube, &cp.rho));
    assert!(tube_membership(&h.model, &tube, &flow(&h.model, &cp.rho, 0.5).unwrap()));
    // 3r away transversally from every orbit sample
    let far = h.conormal_fiber(&[0.4 + 0.15]);
    let q = flow(&h.model, &far.rho, 0.0).unwrap();
    let orbit_min = (0..=200)
        .map(|i| {
            let t = -0.55 + 1.1 * i as f64 / 200.0;
            sasaki_distance(&h.model, &flow(&h.model, &q, t).unwrap(), &cp.rho).distance
        })
        .fold(f64::INFINITY, f64::min);
    assert!(orbit_min >= 0.15 - 1e-9);
    assert!(!tube_membership(&h.model, &tube, &q));
}

#[test]
fn tau_inj_examples() {
    assert_eq!(tau_inj(&torus_point()).unwrap(), 1.0);
    let small = ManifoldModel::FlatTorus { periods: vec![0.5, 0.5] };
    let h = Submanifold::new(&small, SubmanifoldSpec::Point { x: vec![0.1, 0.1] }).unwrap();
    let t = tau_inj(&h).unwrap();
    assert!(t < 0.25 && t > 0.0, "{t}");
    let s2 = ManifoldModel::sphere(2);
    let e = Submanifold::new(&s2, SubmanifoldSpec::Equator).unwrap();
    assert!(tau_inj(&e).unwrap() <= 1.0);
}

#[test]
fn generic_curve_in_hyperbolic_surface_is_not_split() {
    let hp = ManifoldModel::half_plane();
    let h = Submanifold::new(&hp, SubmanifoldSpec::ChartCircle { center: [0.0, 2.0], radius: 0.5, from: 0.0, to: 2.0 * PI })
        .unwrap();
    for u in [0.3, 1.7, 4.0] {
        let cp = h.conormal_at(u, 1.0);
        let sp = stable_unstable(&hp, &cp.rho, 8.0).unwrap();
        let c = classify_splitting(&h, &cp, &sp).unwrap();
        assert_eq!((c.m_plus, c.m_minus), (0, 0));
        assert!(!c.in_split && !c.in_degenerate);
    }
}

#[test]
fn expanding_direction_is_classified() {
    let hp = ManifoldModel::half_plane();
    let rho = pt(&hp, &[0.0, 1.0], &[0.0, 1.0]);
    let sp = stable_unstable(&hp, &rho, 8.0).unwrap();
    // J' = J along a geodesic of curvature −1 is expanding
    let t = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
    let c = classify_tangent(&rho, &t, &sp).unwrap();
    assert_eq!((c.m_plus, c.m_minus), (1, 0));
    assert!(c.in_split && !c.in_mixed);
}

#[test]
fn cat_map_expanding_segment_is_split() {
    let sys = DiscreteHyperbolicSystem::default();
    let sp = sys.splitting();
    let u = sys.unstable_direction();
    let rho = PhasePoint { x: [0.0; MAX_COORDS], xi: [0.0; MAX_COORDS] };
    let c = classify_tangent(&rho, &DMatrix::from_column_slice(2, 1, &u), &sp).unwrap();
    assert_eq!(c.m_plus, 1);
    assert!(c.in_split);
}

#[test]
fn flat_torus_classification_refused() {
    let t = ManifoldModel::flat_torus(2);
    let h = Submanifold::new(&t, SubmanifoldSpec::CoordinateCircle { axis: 0, offset: 0.0 }).unwrap();
    let cp = h.conormal_at(1.0, 1.0);
    let sp = stable_unstable(&t, &cp.rho, 10.0).unwrap();
    assert!(matches!(classify_splitting(&h, &cp, &sp), Err(GeoError::Precondition(_))));
}

#[test]
fn theta_examples() {
    let sys = DiscreteHyperbolicSystem::default();
    let sp = sys.splitting();
    let (ep, em) = (sys.unstable_direction(), sys.stable_direction());
    let (a, b) = theta_angles(&DVector::from_column_slice(&ep), &sp);
    assert!(a.abs() < 1e-12 && b.is_infinite());
    let v = DVector::from_vec(vec![ep[0] + em[0], ep[1] + em[1]]);
    let (a, b) = theta_angles(&v, &sp);
    assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    // (1, 0) = c₊e₊ + c₋e₋ by Cramer's rule
    let det = ep[0] * em[1] - ep[1] * em[0];
    let (cp, cm) = (em[1] / det, -ep[1] / det);
    let (a, b) = theta_angles(&DVector::from_vec(vec![1.0, 0.0]), &sp);
    assert!((a - (cm / cp).abs()).abs() < 1e-12);
    assert!((b - (cp / cm).abs()).abs() < 1e-12);
    assert!((a * b - 1.0).abs() < 1e-12);
}

#[test]
fn expanding_ratio_grows_along_the_flow() {
    // Θ⁻ = ‖π₊v‖/‖π₋v‖ compares expanding to contracting parts; it must increase.
    let hp = ManifoldModel::half_plane();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut done = 0;
    while done < 100 {
        let rho = random_point(&hp, &mut rng);
        let sp = stable_unstable(&hp, &rho, 6.0).unwrap();
        let v = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let (pp, pm) = oblique_parts(&v, &sp);
        if pp.norm() < 1e-3 || pm.norm() < 1e-3 {
            continue;
        }
        let seg = propagate_linearization(&hp, &rho, 3.0, &Default::default()).unwrap();
        let mut last = pp.norm() / pm.norm();
        for t in [1.0, 2.0, 3.0] {
            let phi = seg.state_at(t).unwrap().phi();
            let now = (&phi * &pp).norm() / (&phi * &pm).norm();
            assert!(now > last, "{now} <= {last}");
            last = now;
        }
        done += 1;
    }
}

#[test]
fn classification_csv_has_header_and_rows() {
    let h = torus_point();
    let rows: Vec<_> = sample_snh(&h, 1.0).unwrap().into_iter().map(|p| (p, None)).collect();
    let mut buf = vec![];
    write_classification_csv(&rows, 2, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("u,x0,x1,xi0,xi1,m_plus"));
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn spatial_hash_returns_superset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in [ManifoldModel::flat_torus(2), ManifoldModel::sphere(2), ManifoldModel::half_plane()] {
        let pts: Vec<PhasePoint> = (0..400).map(|_| random_point(&m, &mut rng)).collect();
        let mut hash = SpatialHash::new(&m, 0.1);
        for (i, p) in pts.iter().enumerate() {
            hash.insert(i, &p.x);
        }
        for q in pts.iter().take(50) {
            let cand = hash.query(&q.x, 0.15);
            for (i, p) in pts.iter().enumerate() {
                if base_distance(&m, &q.x, &p.x).unwrap() <= 0.15 {
                    assert!(cand.contains(&i), "{}", m.name());
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn half_radius_ball_lies_in_tube(angle in 0.0f64..6.28, s in -0.5f64..0.5, db in -1.0f64..1.0, df in -1.0f64..1.0) {
        let r = 0.05;
        for m in [ManifoldModel::flat_torus(2), ManifoldModel::sphere(2), ManifoldModel::half_plane()] {
            let x: Vec<f64> = match m {
                ManifoldModel::RoundSphere { .. } => vec![0.0, 0.0, 1.0],
                ManifoldModel::HyperbolicHalfPlane { .. } => vec![0.0, 1.0],
                _ => vec![1.0, 1.0],
            };
            let h = Submanifold::new(&m, SubmanifoldSpec::Point { x }).unwrap();
            let c = h.conormal_fiber(&[angle]);
            let tube = Tube { id: 0, center: c.clone(), tau: 0.5, r };
            let on_orbit = flow(&m, &c.rho, s).unwrap();
            // move the base transversally, then turn the covector
            let n = (db * db + df * df).sqrt().max(1.0);
            let (b, f) = (0.45 * r * db / n, 0.45 * r * df / n);
            let perp = geobeam::flow::default_frame(&m, &on_orbit)[0];
            let side = PhasePoint { x: on_orbit.x, xi: m.lower(&on_orbit.x, &perp) };
            let moved = flow(&m, &side, b).unwrap();
            let w = moved.velocity(&m);
            let nrm = geobeam::flow::default_frame(&m, &moved)[0];
            let mut best: Option<PhasePoint> = None;
            for sign in [1.0, -1.0] {
                let mut dir = [0.0; MAX_COORDS];
                for i in 0..MAX_COORDS {
                    dir[i] = sign * nrm[i] * f.cos() + w[i] * f.sin();
                }
                let mut q = PhasePoint { x: moved.x, xi: m.lower(&moved.x, &dir) };
                m.renormalize(&mut q);
                let better = best.map_or(true, |b| {
                    sasaki_distance(&m, &q, &on_orbit).distance < sasaki_distance(&m, &b, &on_orbit).distance
                });
                if better {
                    best = Some(q);
                }
            }
            let q = best.unwrap();
            let d = sasaki_distance(&m, &q, &on_orbit).distance;
            prop_assume!(d <= r / 2.0);
            prop_assert!(tube_membership(&m, &tube, &q), "{}: d = {d}", m.name());
        }
    }

    #[test]
    fn surface_classes_respect_dimension_rule(x in -0.5f64..0.5, y in 0.7f64..1.5, u in 0.0f64..6.28) {
        let hp = ManifoldModel::half_plane();
        let h = Submanifold::new(&hp, SubmanifoldSpec::ChartCircle { center: [x, y + 0.6], radius: 0.3, from: 0.0, to: 2.0 * PI }).unwrap();
        let cp = h.conormal_at(u, 1.0);
        let sp = stable_unstable(&hp, &cp.rho, 6.0).unwrap();
        let c = classify_splitting(&h, &cp, &sp).unwrap();
        prop_assert!(!(c.in_mixed && !c.in_split && c.m_plus == 1 && c.m_minus == 1));
        prop_assert!(!c.in_degenerate);
    }
}
