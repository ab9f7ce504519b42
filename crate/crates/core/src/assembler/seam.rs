use super::AssemblyError;
use crate::voxcore::{Volume3D, PORE};

/// Pore fraction of the `e × e` face at `plane` along `axis`, restricted to
/// the patch footprint starting at `(u0, v0)` on the two other axes.
fn face(v: &Volume3D, axis: usize, plane: usize, u0: usize, v0: usize, e: usize) -> f64 {
    let mut pores = 0usize;
    for a in u0..u0 + e {
        for b in v0..v0 + e {
            let idx = match axis {
                0 => (plane, a, b),
                1 => (a, plane, b),
                _ => (a, b, plane),
            };
            pores += usize::from(v.get(idx.0, idx.1, idx.2) == PORE);
        }
    }
    pores as f64 / (e * e) as f64
}

/// Ratio of the mean porosity jump between adjacent one-voxel faces across
/// patch boundaries to the same mean at offsets inside patches. Faces are
/// `patch_edge²` slabs over one patch footprint. Near 1 means the seams are
/// indistinguishable from the interior; `0/0` is defined as 1.
pub fn seam_score(v: &Volume3D, patch_edge: usize) -> Result<f64, AssemblyError> {
    let dims = v.dims();
    let e = patch_edge;
    if e < 2 || dims.iter().any(|&d| d % e != 0) {
        return Err(AssemblyError::NotDivisible { dims, patch: e });
    }
    let (mut seam, mut n_seam) = (0.0, 0usize);
    let (mut inner, mut n_inner) = (0.0, 0usize);
    for axis in 0..3 {
        let (ua, va) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for u0 in (0..dims[ua]).step_by(e) {
            for v0 in (0..dims[va]).step_by(e) {
                let mut prev = face(v, axis, 0, u0, v0, e);
                for p in 1..dims[axis] {
                    let cur = face(v, axis, p, u0, v0, e);
                    let d = (cur - prev).abs();
                    if p % e == 0 {
                        seam += d;
                        n_seam += 1;
                    } else {
                        inner += d;
                        n_inner += 1;
                    }
                    prev = cur;
                }
            }
        }
    }
    let seam = if n_seam > 0 { seam / n_seam as f64 } else { 0.0 };
    let inner = inner / n_inner as f64;
    Ok(if seam == 0.0 && inner == 0.0 {
        1.0
    } else {
        seam / inner
    })
}
