use geobeam::conormal::*;
use geobeam::cover::*;
use geobeam::flow::PhasePoint;
use geobeam::{DiscreteHyperbolicSystem, GeoError, ManifoldModel};
use proptest::prelude::*;
use std::collections::BTreeSet;
use std::f64::consts::PI;

fn torus_point() -> Submanifold {
    Submanifold::new(&ManifoldModel::flat_torus(2), SubmanifoldSpec::Point { x: vec![1.0, 2.0] }).unwrap()
}

fn torus_cover(r: f64) -> GoodCover {
    build_good_cover(&torus_point(), 0.5, r, &CoverOptions::default()).unwrap()
}

fn sphere_cover(spec: SubmanifoldSpec, r: f64) -> GoodCover {
    let h = Submanifold::new(&ManifoldModel::sphere(2), spec).unwrap();
    build_good_cover(&h, 0.5, r, &CoverOptions::default()).unwrap()
}

/// Tube whose center direction is closest to the given angle.
fn tube_at_angle(cover: &GoodCover, angle: f64) -> usize {
    let d = |t: &Tube| {
        let v = t.center.rho.velocity(cover.model());
        ((v[0] - angle.cos()).powi(2) + (v[1] - angle.sin()).powi(2)).sqrt()
    };
    (0..cover.len()).min_by(|&a, &b| d(&cover.tubes[a]).partial_cmp(&d(&cover.tubes[b])).unwrap()).unwrap()
}

#[test]
fn torus_point_tube_count_and_colors() {
    let c = torus_cover(0.1);
    // a circle of length 2π covered by arcs of length about 2r
    let n = c.len();
    assert!((44..=82).contains(&n), "N = {n}");
    assert!(c.color_count <= 8, "𝔇 = {}", c.color_count);
    assert!(c.coloring_is_proper());
    assert!(c.covering_radius <= 0.05 + 1e-12);
    assert_eq!(c.color_classes().iter().map(Vec::len).sum::<usize>(), n);
}

#[test]
fn halving_r_doubles_tube_count() {
    let a = torus_cover(0.1).len() as f64;
    let b = torus_cover(0.05).len() as f64;
    let ratio = b / a;
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn monte_carlo_cover_property() {
    assert_eq!(torus_cover(0.1).monte_carlo_misses(10_000, 7).unwrap(), 0);
    let eq = sphere_cover(SubmanifoldSpec::Equator, 0.1);
    assert_eq!(eq.monte_carlo_misses(2_000, 8).unwrap(), 0);
}

#[test]
fn far_points_are_not_covered() {
    let c = torus_cover(0.1);
    // base point at distance 1 from the point and moving parallel to it never meets the fiber
    let q = PhasePoint::from_direction(c.model(), &[1.0, 3.0], &[1.0, 0.0]).unwrap();
    assert!(!c.contains(&q));
    assert!(c.contains(&c.tubes[3].center.rho));
}

#[test]
fn oversized_tubes_are_rejected() {
    let h = torus_point();
    let opts = CoverOptions { max_colors: Some(4), ..CoverOptions::default() };
    assert!(matches!(build_good_cover(&h, 0.5, 0.1, &opts), Err(GeoError::Invariant(_))));
    let opts = CoverOptions { r_max: 0.05, ..CoverOptions::default() };
    assert!(matches!(build_good_cover(&h, 0.5, 0.1, &opts), Err(GeoError::Precondition(_))));
    let opts = CoverOptions { tau_limit: Some(0.2), ..CoverOptions::default() };
    assert!(matches!(build_good_cover(&h, 0.5, 0.1, &opts), Err(GeoError::Precondition(_))));
}

#[test]
fn sphere_tubes_all_loop() {
    for spec in [SubmanifoldSpec::Point { x: vec![0.0, 0.0, 1.0] }, SubmanifoldSpec::Equator] {
        let c = sphere_cover(spec, 0.05);
        let rep = classify_looping(&c, 1.0, 7.0, &LoopingOptions::default()).unwrap();
        assert_eq!(rep.looping_fraction(), 1.0);
        let p = partition_single_window(&c, &rep, 1.0, 7.0).unwrap();
        assert_eq!(p.bad.len(), c.len());
        assert!(p.rungs[0].tubes.is_empty());
    }
}

#[test]
fn equator_returns_after_half_a_great_circle() {
    let c = sphere_cover(SubmanifoldSpec::Equator, 0.1);
    let rep = classify_subset(&c, &[0], 1.0, 4.0, &LoopingOptions::default()).unwrap();
    let ev = &rep.tubes[0].events[0];
    // meridians cross the equator again at t = π
    assert!((ev.time - PI).abs() <= rep.step, "{}", ev.time);
    assert!(ev.distance < 1e-2);
}

#[test]
fn torus_closed_geodesic_returns_at_two_pi() {
    let c = torus_cover(0.1);
    let j = tube_at_angle(&c, 0.0);
    let rep = classify_subset(&c, &[j], 1.0, 7.0, &LoopingOptions::default()).unwrap();
    let t = &rep.tubes[0];
    assert!(t.loops());
    let first = &t.events[0];
    assert!((first.time - 2.0 * PI).abs() <= rep.step);
    assert!(t.min_return_distance <= 0.5 * rep.step + 1e-9);
    assert!(first.hit_tubes.contains(&j));
    let (a, b) = t.windows[0];
    assert!(a <= 2.0 * PI && 2.0 * PI <= b && b <= 7.0);
}

#[test]
fn golden_slope_does_not_return() {
    let mut c = torus_cover(0.01);
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let angle = golden.atan();
    c.tubes[0].center = c.h.conormal_fiber(&[angle]);
    // oracle: distance from lattice points 2π(a, b) with |2π(a, b)| ≤ 20 to the line of slope φ
    let mut oracle = f64::INFINITY;
    for a in 1..=4i32 {
        for b in 0..=8i32 {
            let len = 2.0 * PI * ((a * a + b * b) as f64).sqrt();
            if len <= 20.0 + 0.5 {
                oracle = oracle.min(2.0 * PI * (b as f64 - golden * a as f64).abs() / (1.0 + golden * golden).sqrt());
            }
        }
    }
    assert!(oracle > 1.0);
    let rep = classify_subset(&c, &[0], 1.0, 20.0, &LoopingOptions::default()).unwrap();
    assert!(!rep.tubes[0].loops());
    assert!(rep.tubes[0].min_return_distance > 0.01);
}

#[test]
fn short_windows_have_no_bad_tubes() {
    let c = torus_cover(0.05);
    let rep = classify_looping(&c, 1.0, 5.0, &LoopingOptions::default()).unwrap();
    let p = partition_single_window(&c, &rep, 1.0, 5.0).unwrap();
    assert!(p.bad.is_empty());
    assert_eq!(p.rungs[0].tubes.len(), c.len());
    assert!(p.covers(&(0..c.len()).collect::<Vec<_>>()));
}

#[test]
fn bad_set_grows_with_the_window() {
    let c = torus_cover(0.05);
    let mut prev: BTreeSet<usize> = BTreeSet::new();
    for t1 in [8.0, 14.0, 20.0] {
        let rep = classify_looping(&c, 1.0, t1, &LoopingOptions::default()).unwrap();
        let now: BTreeSet<usize> = rep.looping_ids().into_iter().collect();
        assert!(prev.is_subset(&now), "T₀ = {t1}");
        prev = now;
    }
    assert!(!prev.is_empty());
}

#[test]
fn good_union_survives_double_density_retest() {
    let c = torus_cover(0.02);
    let rep = classify_looping(&c, 1.0, 20.0, &LoopingOptions::default()).unwrap();
    let p = partition_single_window(&c, &rep, 1.0, 20.0).unwrap();
    assert!(p.bad_fraction() <= 0.2);
    let edges = union_violations(&c, &p.rungs[0].tubes, 1.0, 20.0, 2).unwrap();
    assert!(edges.is_empty(), "{edges:?}");
    // every bad tube either has a window or was moved by the re-test
    for b in &p.bad {
        assert!(rep.tubes[*b].loops() || p.union_moved.contains(b));
    }
}

#[test]
fn union_retest_finds_sphere_edges() {
    let c = sphere_cover(SubmanifoldSpec::Point { x: vec![0.0, 0.0, 1.0] }, 0.1);
    let edges = union_violations(&c, &[0, 1, 2], 1.0, 7.0, 2).unwrap();
    assert!(edges.iter().any(|e| e.0 == 0));
}

#[test]
fn horizon_limit_is_enforced() {
    let c = torus_cover(0.1);
    let opts = LoopingOptions { max_samples: 100, ..LoopingOptions::default() };
    assert!(matches!(classify_looping(&c, 1.0, 50.0, &opts), Err(GeoError::Precondition(_))));
    assert!(classify_looping(&c, 2.0, 1.0, &LoopingOptions::default()).is_err());
}

#[test]
fn degenerate_ladder_is_the_single_window_partition() {
    let c = torus_cover(0.1);
    let rep = classify_looping(&c, 1.0, 1.5, &LoopingOptions::default()).unwrap();
    let a = dyadic_ladder(&c, &rep, 1.0, 1.5, None).unwrap();
    let b = partition_single_window(&c, &rep, 1.0, 1.5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn flat_flow_gives_no_contraction() {
    let c = torus_cover(0.1);
    let cert = flow_contraction_certificate(&c, 8, &[2.0, 4.0]).unwrap();
    // |dφ_t V| = √(1 + t²) for a vertical unit vector on the flat torus
    for b in &cert.balls {
        assert!((b.decay[1].1 - 17f64.sqrt()).abs() < 1e-3);
        assert!(!b.contracts());
    }
    let rep = classify_looping(&c, 1.0, 8.0, &LoopingOptions::default()).unwrap();
    let p = dyadic_ladder(&c, &rep, 1.0, 8.0, Some(&cert)).unwrap();
    assert_eq!(p.bad.len(), c.len());
    assert!(p.rungs.iter().all(|g| g.tubes.is_empty()));
}

#[test]
fn ladder_without_certificate_reports_diagnostic() {
    let c = torus_cover(0.1);
    let rep = classify_looping(&c, 1.0, 8.0, &LoopingOptions::default()).unwrap();
    let p = dyadic_ladder(&c, &rep, 1.0, 8.0, None).unwrap();
    assert!(p.counting.is_none());
    assert!(!p.diagnostics.is_empty());
    assert_eq!(p.rungs.len(), 4);
    assert_eq!(p.rungs[2].t_end, 2.0);
    let incomplete = ContractionCertificate {
        balls: vec![BallCertificate { tubes: vec![0], decay: vec![(1.0, 0.5)] }],
    };
    assert!(matches!(dyadic_ladder(&c, &rep, 1.0, 8.0, Some(&incomplete)), Err(GeoError::Precondition(_))));
}

fn cat() -> DiscreteHyperbolicSystem {
    DiscreteHyperbolicSystem::new([[2, 1], [1, 1]]).unwrap()
}

#[test]
fn cat_landings_contain_sampled_images() {
    let seg = SegmentCover::stable(cat(), [12345, 67890], 999_983, 4.0, 2f64.powi(-5)).unwrap();
    let sys = cat();
    let p = [12345.0 / 999_983.0, 67890.0 / 999_983.0];
    let d = seg.direction;
    let r = seg.r;
    for k in 1..=6u32 {
        for j in (0..seg.len()).step_by(7) {
            let exact: BTreeSet<usize> = seg.landings(j, k).unwrap().into_iter().collect();
            for s in 0..=20 {
                let off = seg.centers[j] + r * (s as f64 / 10.0 - 1.0);
                let y = sys.discrete_step([p[0] + off * d[0], p[1] + off * d[1]], k as i64);
                for mx in -4..=4 {
                    for my in -4..=4 {
                        let w = [y[0] - p[0] + mx as f64, y[1] - p[1] + my as f64];
                        let a = w[0] * d[0] + w[1] * d[1];
                        let b = w[0] * d[1] - w[1] * d[0];
                        if b.abs() > r {
                            continue;
                        }
                        for (i, c) in seg.centers.iter().enumerate() {
                            if (a - c).abs() <= r {
                                assert!(exact.contains(&i), "k={k} j={j} misses {i}");
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn cat_ladder_counts_decay() {
    let seg = SegmentCover::stable(cat(), [1, 2], 1_000_003, 4.0, 2f64.powi(-6)).unwrap();
    let cert = seg.certificate(8, 256);
    assert!(cert.balls.iter().all(BallCertificate::contracts));
    let p = seg.ladder(2, 256, Some(&cert)).unwrap();
    assert_eq!(p.rungs.len(), 8);
    assert_eq!(p.good_count() + p.bad.len(), seg.len());
    let fit = p.counting.unwrap();
    assert!(fit.ratio < 0.8, "{fit:?}");
    assert!(fit.bad_fraction < 0.1);
    // rung windows halve
    assert_eq!(p.rungs[1].t_end, 128.0);
}

#[test]
fn unstable_segment_needs_certificate() {
    let sys = cat();
    let d = sys.unstable_direction();
    let seg = SegmentCover::new(sys, [1, 2], 101, d, 1.0, 0.05).unwrap();
    assert!(seg.ladder(2, 16, None).is_err());
    assert!(seg.landings(0, 3).is_err());
    let cert = seg.certificate(4, 16);
    let p = seg.ladder(2, 16, Some(&cert)).unwrap();
    assert_eq!(p.bad.len(), seg.len());
}

#[test]
fn refinement_stays_within_budget() {
    let seg = SegmentCover::stable(cat(), [1, 2], 1_000_003, 4.0, 2f64.powi(-4)).unwrap();
    let lm = cat().contraction_rate();
    let decay = move |k: u32| lm.powi(k as i32);
    let r0 = 2f64.powi(-4);
    let rep = seg.controlled_refinement(&[(0.0, r0)], &decay, 0.2, 2, 256, 1.0, r0, cat().eigenvalues().0.ln()).unwrap();
    // Σ_{k ≥ s} λ^k = λ^s / (1 − λ) ≤ 0.2 first holds at s = 3
    assert_eq!(rep.t_start, 3);
    assert!(rep.used <= 0.2 * r0);
    assert!((rep.budget - 0.2 * r0).abs() < 1e-15);
    for b in &rep.removed {
        assert!(b.radius >= rep.floor);
        assert!((b.radius - (lm.powi(b.step as i32) * r0).max(rep.floor)).abs() < 1e-15);
    }
}

#[test]
fn refinement_without_returns_removes_nothing() {
    let seg = SegmentCover::stable(cat(), [1, 2], 1_000_003, 4.0, 2f64.powi(-4)).unwrap();
    let zero = |k: u32| if k <= 2 { 1.0 } else { 0.0 };
    let rep = seg.controlled_refinement(&[(0.0, 1e-4)], &zero, 0.2, 2, 4, 1.0, 1e-9, 1.0).unwrap();
    assert!(rep.removed.is_empty());
    assert_eq!(rep.used, 0.0);
}

#[test]
fn refinement_rejects_bad_inputs() {
    let seg = SegmentCover::stable(cat(), [1, 2], 1_000_003, 4.0, 2f64.powi(-4)).unwrap();
    let growing = |k: u32| k as f64;
    assert!(matches!(
        seg.controlled_refinement(&[(0.0, 0.1)], &growing, 0.2, 2, 16, 1.0, 0.1, 1.0),
        Err(GeoError::Precondition(_))
    ));
    let flat = |_k: u32| 1.0;
    assert!(matches!(
        seg.controlled_refinement(&[(0.0, 0.1)], &flat, 0.2, 2, 16, 1.0, 0.1, 1.0),
        Err(GeoError::Infeasible(_))
    ));
}

#[test]
fn gap_check_refuses_flat_and_positive_curvature() {
    let c = torus_cover(0.1);
    let rep = classify_looping(&c, 1.0, 3.0, &LoopingOptions::default()).unwrap();
    assert!(matches!(recurrence_gap_check(&c, &rep, 1.0, 1.0), Err(GeoError::Unsupported(_))));
    let s = sphere_cover(SubmanifoldSpec::Equator, 0.1);
    let rep = classify_looping(&s, 1.0, 3.0, &LoopingOptions::default()).unwrap();
    assert!(matches!(recurrence_gap_check(&s, &rep, 1.0, 1.0), Err(GeoError::Unsupported(_))));
}

#[test]
fn gap_check_on_half_plane_patch_has_no_returns() {
    let hp = ManifoldModel::half_plane();
    let h = Submanifold::new(&hp, SubmanifoldSpec::VerticalGeodesic { x0: 0.0, y_min: 1.0, y_max: 2.0 }).unwrap();
    let c = build_good_cover(&h, 0.25, 0.05, &CoverOptions { tau_limit: Some(0.25), ..CoverOptions::default() }).unwrap();
    let rep = classify_looping(&c, 1.0, 4.0, &LoopingOptions::default()).unwrap();
    assert_eq!(rep.looping_fraction(), 0.0);
    let g = recurrence_gap_check(&c, &rep, 1.0, 1.0).unwrap();
    assert!(g.violations.is_empty());
    assert_eq!(g.max_count, 0);
    assert!((g.band.0 - 1.0 / 20f64.ln().powi(2)).abs() < 1e-12);
}

#[test]
fn cover_text_round_trip() {
    for c in [torus_cover(0.1), sphere_cover(SubmanifoldSpec::Equator, 0.2)] {
        let mut buf = vec![];
        c.save(&mut buf).unwrap();
        let back = GoodCover::load(buf.as_slice()).unwrap();
        assert_eq!(back.len(), c.len());
        assert_eq!(back.colors, c.colors);
        assert_eq!(back.tau, c.tau);
        assert_eq!(back.r, c.r);
        for (a, b) in back.tubes.iter().zip(&c.tubes) {
            assert_eq!(a.center.rho.x, b.center.rho.x);
            assert_eq!(a.center.rho.xi, b.center.rho.xi);
        }
        let bumped = String::from_utf8(buf).unwrap().replacen("version = 1", "version = 9", 1);
        assert!(matches!(GoodCover::from_text(&bumped), Err(GeoError::Config(_))));
    }
}

#[test]
fn looping_csv_layout() {
    let c = torus_cover(0.1);
    let rep = classify_looping(&c, 1.0, 7.0, &LoopingOptions::default()).unwrap();
    let mut buf = vec![];
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "tube_id,window_start,window_end,min_return_distance");
    let rows: Vec<&str> = lines.collect();
    let windows: usize = rep.tubes.iter().map(|t| t.windows.len().max(1)).sum();
    assert_eq!(rows.len(), windows);
    let mut again = vec![];
    classify_looping(&c, 1.0, 7.0, &LoopingOptions::default()).unwrap().write_csv(&mut again).unwrap();
    assert_eq!(text.as_bytes(), again.as_slice());
}

#[test]
fn partition_csv_lists_every_tube() {
    let c = torus_cover(0.1);
    let rep = classify_looping(&c, 1.0, 10.0, &LoopingOptions::default()).unwrap();
    let p = partition_single_window(&c, &rep, 1.0, 10.0).unwrap();
    let mut buf = vec![];
    p.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), c.len() + 1);
    assert!(text.starts_with("tube_id,class,rung,t_start,t_end"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn covers_are_good(r in 0.04f64..0.2, x in 0.0f64..6.0, y in 0.0f64..6.0) {
        let h = Submanifold::new(&ManifoldModel::flat_torus(2), SubmanifoldSpec::Point { x: vec![x, y] }).unwrap();
        let c = build_good_cover(&h, 0.5, r, &CoverOptions::default()).unwrap();
        prop_assert!(c.coloring_is_proper());
        prop_assert!(c.covering_radius <= 0.5 * r + 1e-12);
        // dense fiber samples lie within the net's covering radius plus half its spacing
        for k in 0..300 {
            let q = h.conormal_fiber(&[2.0 * PI * k as f64 / 300.0]);
            let d = c.tubes.iter().map(|t| sasaki_distance(&h.model, &q.rho, &t.center.rho).distance).fold(f64::INFINITY, f64::min);
            prop_assert!(d <= c.covering_radius + r / 32.0 + 1e-9);
        }
    }

    #[test]
    fn ladder_partitions_every_tube(base0 in 1i64..1000, base1 in 1i64..1000) {
        let seg = SegmentCover::stable(cat(), [base0, base1], 7919, 2.0, 2f64.powi(-5)).unwrap();
        let cert = seg.certificate(8, 64);
        let p = seg.ladder(2, 64, Some(&cert)).unwrap();
        let mut all: Vec<usize> = p.bad.clone();
        for g in &p.rungs { all.extend(&g.tubes); }
        all.sort_unstable();
        prop_assert_eq!(all, (0..seg.len()).collect::<Vec<_>>());
    }
}
