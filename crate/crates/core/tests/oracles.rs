//! Vectorised kernels against direct loops over every output element.

mod naive;

const TOL: f64 = 1e-10;

fn assert_within(sweep: naive::Sweep, min_cases: usize) {
    assert!(sweep.cases >= min_cases, "{sweep:?}");
    assert!(sweep.max_diff <= TOL, "{sweep:?}");
}

#[test]
fn conv2d_matches_direct_sum() {
    assert_within(naive::conv2d_sweep(), 500);
}

#[test]
fn bone_and_velocity_match_direct_indexing() {
    let (bone, velocity) = naive::modality_sweeps();
    assert_within(bone, 3 * 216);
    assert_within(velocity, 500);
}

#[test]
fn adjacency_matches_formula_on_trees_and_forests() {
    assert_within(naive::adjacency_sweep(), 154 + 100);
}

#[test]
fn samg_matches_definition() {
    assert_within(naive::samg_sweep(), 54);
}
