//! Shared fixtures for the benchmarks.

use geobeam::conormal::{Submanifold, SubmanifoldSpec};
use geobeam::{ManifoldModel, PhasePoint};

/// Unit-speed phase point on the round 2-sphere starting at the north pole.
pub fn sphere_start() -> (ManifoldModel, PhasePoint) {
    let m = ManifoldModel::sphere(2);
    let rho = PhasePoint::from_direction(&m, &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]).expect("valid phase point");
    (m, rho)
}

/// A point of the flat square 2-torus.
pub fn torus_point() -> Submanifold {
    Submanifold::new(&ManifoldModel::flat_torus(2), SubmanifoldSpec::Point { x: vec![1.0, 2.0] }).expect("valid point")
}

pub fn sphere_equator() -> Submanifold {
    Submanifold::new(&ManifoldModel::sphere(2), SubmanifoldSpec::Equator).expect("valid equator")
}
