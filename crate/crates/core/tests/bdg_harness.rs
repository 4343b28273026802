use std::sync::Arc;

use spde_smp::spectral::{SpectralField, SpectralSpace};
use spde_smp::stochastics::{bdg_lp_check, davis_constant, FieldIntegrand, PathPrefix, SeedPolicy, TimeGrid};

struct Zero(usize);

impl FieldIntegrand for Zero {
    fn dim(&self) -> usize {
        1
    }

    fn values(&self, _: usize, _: f64, _: PathPrefix<'_>) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.0]]
    }
}

struct Constant(Vec<f64>);

impl FieldIntegrand for Constant {
    fn dim(&self) -> usize {
        1
    }

    fn values(&self, _: usize, _: f64, _: PathPrefix<'_>) -> Vec<Vec<f64>> {
        vec![self.0.clone()]
    }
}

struct HeatFlow(SpectralField);

impl FieldIntegrand for HeatFlow {
    fn dim(&self) -> usize {
        1
    }

    fn values(&self, _: usize, t: f64, _: PathPrefix<'_>) -> Vec<Vec<f64>> {
        vec![self.0.apply_semigroup(t).unwrap().grid_values().to_vec()]
    }
}

fn setup() -> (Arc<SpectralSpace>, TimeGrid) {
    (SpectralSpace::new(16).unwrap(), TimeGrid::new(1.0, 64).unwrap())
}

#[test]
fn sharp_constants() {
    assert!((davis_constant(2.0) - 1.0).abs() < 1e-12);
    let z4 = (3.0 + 6f64.sqrt()).sqrt();
    assert!((davis_constant(4.0) - z4.powi(4)).abs() < 1e-9);
}

#[test]
fn zero_integrand_has_zero_sides() {
    let (space, grid) = setup();
    let r = bdg_lp_check(
        4.0,
        &Zero(space.n_points()),
        &space,
        &grid,
        &SeedPolicy::new(1),
        10,
        &[0.5, 1.0],
    )
    .unwrap();
    for row in r.rows {
        assert_eq!((row.lhs, row.rhs, row.ratio), (0.0, 0.0, 0.0));
    }
}

#[test]
fn deterministic_integrand_obeys_the_isometry_at_p_two() {
    let (space, grid) = setup();
    let h0 = space.field_from_fn(|x| 1.0 + x);
    let norm2 = h0.lp_norm(2.0).unwrap().powi(2);
    let r = bdg_lp_check(
        2.0,
        &Constant(h0.grid_values().to_vec()),
        &space,
        &grid,
        &SeedPolicy::new(2),
        4000,
        &[0.25, 1.0],
    )
    .unwrap();
    for row in r.rows {
        assert!((row.rhs - row.t * norm2).abs() < 1e-12);
        assert!((row.lhs - row.t * norm2).abs() < 3.0 * row.lhs_std_error, "{row:?}");
    }
}

#[test]
fn heat_flow_integrand_respects_the_fourth_moment_bound() {
    let (space, grid) = setup();
    let r = bdg_lp_check(
        4.0,
        &HeatFlow(space.sine(1)),
        &space,
        &grid,
        &SeedPolicy::new(3),
        10_000,
        &[0.25, 0.5, 1.0],
    )
    .unwrap();
    for row in r.rows {
        assert!(row.ratio <= 1.0 && row.ratio_upper99 <= 1.0, "{row:?}");
    }
}

#[test]
fn exponents_outside_the_supported_range_are_rejected() {
    let (space, grid) = setup();
    for p in [1.5, 9.0] {
        assert!(bdg_lp_check(
            p,
            &Zero(space.n_points()),
            &space,
            &grid,
            &SeedPolicy::new(1),
            10,
            &[1.0]
        )
        .is_err());
    }
}
