//! Central finite-difference checks of the analytic gradients.

mod common;

use biaslens::nn::{Architecture, CnnConfig};
use common::{check, small_vit, Case, REL_TOL};

#[test]
fn cnn_gradients_match_finite_differences() {
    let case = Case::new(Architecture::TinyCnn(CnnConfig::tiny(3)), 5);
    assert!(case.model.n_params() <= 5000);
    let (p, x) = check(&case);
    assert!(p <= REL_TOL && x <= REL_TOL, "param {p:e}, input {x:e}");
}

#[test]
fn vit_gradients_match_finite_differences() {
    let case = Case::new(Architecture::TinyVit(small_vit()), 9);
    assert!(case.model.n_params() <= 5000, "{}", case.model.n_params());
    let (p, x) = check(&case);
    assert!(p <= REL_TOL && x <= REL_TOL, "param {p:e}, input {x:e}");
}
