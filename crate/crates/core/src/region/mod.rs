//! Selection regions: the sets of limiting standardized estimators under
//! which cAIC picks a given model.

mod builders;
mod constraint;
mod sigma;
mod upsilon;

pub use builders::{general_region_nonorthogonal, general_region_orthogonal, misspecified_region, nested_region, StackedRegion};
pub use constraint::{ConstraintSet, QuadraticConstraint, Sense};
pub use sigma::{check_orthogonality, sigma_matrix, SigmaEstimate, ORTHOGONALITY_TOL};
pub use upsilon::ExtendedSelectionMatrix;

use crate::error::{LmmError, Result};

/// Probes used by [`ensure_nonempty`].
pub const EMPTY_REGION_PROBES: usize = 100_000;

/// Fraction of standard normal probes inside `region`; errors when none of
/// [`EMPTY_REGION_PROBES`] draws land inside.
pub fn ensure_nonempty(region: &ConstraintSet, seed: u64) -> Result<f64> {
    let acc = crate::tmvn::acceptance_estimate(region, EMPTY_REGION_PROBES, seed);
    if acc == 0.0 {
        return Err(LmmError::Region(format!(
            "no draw out of {EMPTY_REGION_PROBES} falls in the region ({} constraints); rho + b may be non-monotone",
            region.len()
        )));
    }
    Ok(acc)
}
