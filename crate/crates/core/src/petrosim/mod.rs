//! Petrophysical evaluation: two-point probability, inscribed radii, voxel
//! pore-graph flow, drainage and relative permeability.

mod drainage;
mod edt;
mod network;
mod two_point;

pub use drainage::{
    drainage_sequence, relative_permeability_graph, DrainageSequence, DrainageStatus, KrCurve, KrPoint, KrStatus,
};
pub use edt::{distance_transform, squared_distance_field};
pub use network::{extract_pore_graph, solve_flow, throat_conductance, FlowSolution, PoreGraph};
pub use two_point::{two_point_probability, TwoPointCurve};

use crate::voxcore::Volume3D;

/// Square metres per millidarcy.
pub const M2_PER_MILLIDARCY: f64 = 9.869233e-16;

#[derive(Debug, thiserror::Error)]
pub enum PetroError {
    #[error("{0}")]
    Invalid(String),
    #[error("solver did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("non-percolating reference")]
    NonPercolatingReference,
}

/// Fluid properties for the flow calculations. Gravity is carried but the
/// channel angle must stay 0, so it never enters the result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluidSpec {
    /// Wetting-phase (brine) viscosity, Pa s.
    pub mu_w: f64,
    /// Non-wetting-phase (CO2) viscosity, Pa s.
    pub mu_nw: f64,
    pub rho_w: f64,
    pub rho_nw: f64,
    pub gravity: f64,
    /// Channel inclination in radians.
    pub alpha: f64,
    /// Applied pressure drop, Pa.
    pub dp: f64,
}

impl Default for FluidSpec {
    fn default() -> Self {
        Self {
            mu_w: 1.0e-3,
            mu_nw: 5.0e-5,
            rho_w: 1000.0,
            rho_nw: 700.0,
            gravity: 9.81,
            alpha: 0.0,
            dp: 1.0,
        }
    }
}

impl FluidSpec {
    pub fn validate(&self) -> Result<(), PetroError> {
        if !(self.mu_w > 0.0 && self.mu_nw > 0.0) {
            return Err(PetroError::Invalid("viscosities must be positive".into()));
        }
        if self.alpha != 0.0 {
            return Err(PetroError::Invalid("channel angle must be 0 (horizontal flow)".into()));
        }
        if !(self.dp > 0.0 && self.dp.is_finite()) {
            return Err(PetroError::Invalid("pressure drop must be positive".into()));
        }
        Ok(())
    }
}

/// Darcy's law solved for permeability: `mu * L * Q / (A * dP)`.
pub fn darcy_permeability(mu: f64, length: f64, area: f64, dp: f64, q: f64) -> f64 {
    mu * length * q / (area * dp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermeabilityReport {
    pub axis: usize,
    pub k_m2: f64,
    pub k_md: f64,
    pub percolating: bool,
    pub q: f64,
}

/// Single-phase (wetting) permeability of `v` along `axis`.
pub fn absolute_permeability(v: &Volume3D, axis: usize, fluids: &FluidSpec) -> Result<PermeabilityReport, PetroError> {
    fluids.validate()?;
    let graph = extract_pore_graph(v, axis)?;
    let sol = solve_flow(&graph, fluids.mu_w, fluids.dp)?;
    let dims = v.dims();
    let vs = v.voxel_size_um() as f64 * 1e-6;
    let length = dims[axis] as f64 * vs;
    let area = (dims.iter().product::<usize>() / dims[axis]) as f64 * vs * vs;
    let k_m2 = darcy_permeability(fluids.mu_w, length, area, fluids.dp, sol.q);
    Ok(PermeabilityReport {
        axis,
        k_m2,
        k_md: k_m2 / M2_PER_MILLIDARCY,
        percolating: sol.percolating,
        q: sol.q,
    })
}

/// Drainage relative permeability of `v` along `axis`.
pub fn relative_permeability(v: &Volume3D, axis: usize, fluids: &FluidSpec, n_steps: usize) -> Result<KrCurve, PetroError> {
    fluids.validate()?;
    let graph = extract_pore_graph(v, axis)?;
    relative_permeability_graph(&graph, n_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxcore::{PORE, SOLID};
    use std::f64::consts::PI;

    #[test]
    fn darcy_unit_bookkeeping() {
        assert_eq!(darcy_permeability(1.0, 1.0, 1.0, 1.0, 2.0), 2.0);
    }

    #[test]
    fn all_solid_has_zero_permeability() {
        let v = Volume3D::filled([4; 3], 1.0, SOLID).unwrap();
        let r = absolute_permeability(&v, 0, &FluidSpec::default()).unwrap();
        assert_eq!(r.k_m2, 0.0);
        assert!(!r.percolating);
    }

    #[test]
    fn open_cube_of_three_matches_lattice_formula() {
        // every throat has r = 1 voxel; 9 parallel chains of 2 edges each
        let vs_um = 1.0f32;
        let vs = vs_um as f64 * 1e-6;
        let v = Volume3D::filled([3; 3], vs_um, PORE).unwrap();
        let fluids = FluidSpec {
            mu_w: 1.0,
            dp: 1.0,
            ..FluidSpec::default()
        };
        let r = absolute_permeability(&v, 0, &fluids).unwrap();
        let g = PI * vs.powi(4) / (8.0 * vs);
        let q = 9.0 * g / 2.0;
        let k = darcy_permeability(1.0, 3.0 * vs, 9.0 * vs * vs, 1.0, q);
        assert!((r.k_m2 - k).abs() <= 1e-6 * k);
        // 3 pi / 16 in voxel units
        assert!((k / (vs * vs) - 3.0 * PI / 16.0).abs() < 1e-12);
    }

    #[test]
    fn nonzero_angle_rejected() {
        let f = FluidSpec {
            alpha: 0.1,
            ..FluidSpec::default()
        };
        assert!(f.validate().is_err());
    }
}
