//! Derivative of the boundary measurement map with respect to the free
//! (D, μ) values.
//!
//! For a source `s` with forward field `u_s` and the adjoint field `w_b`
//! solving `A w_b = e_b` (unit load at boundary node `b`), the trace
//! derivative is
//!
//! ```text
//! ∂u_s(b)/∂D_T = −∫_T ∇u_s·∇w_b      ∂u_s(b)/∂μ_T = −∫_T u_s w_b
//! ```
//!
//! Complex rows are split into real and imaginary rows in the same order as
//! [`MeasurementSet::flatten`](crate::forward::MeasurementSet::flatten).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{element_matrices, ForwardModel, MeasurementSet};
use crate::mesh::Mesh;
use crate::phantom::{FreeIndex, ParameterField};

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    /// `m × 2n`: flattened measurements by `[D(free), μ(free)]`.
    pub matrix: DMatrix<f64>,
    /// Factor each column has been multiplied by (1 for physical units).
    pub column_scale: Vec<f64>,
}

impl JacobianMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Returns the Jacobian with respect to `x / scale`, i.e. column `c`
    /// multiplied by `scale[c]`.
    pub fn scaled_columns(mut self, scale: &[f64]) -> Result<Self> {
        if scale.len() != self.cols() {
            return Err(Error::Dimension {
                what: "column scale",
                expected: self.cols(),
                got: scale.len(),
            });
        }
        for (c, &s) in scale.iter().enumerate() {
            self.matrix.column_mut(c).scale_mut(s);
            self.column_scale[c] *= s;
        }
        Ok(self)
    }

    /// Max over columns of ‖a_c − b_c‖∞ / ‖b_c‖∞; columns where `b` is
    /// identically zero compare absolute differences.
    pub fn max_relative_column_error(&self, reference: &JacobianMatrix) -> f64 {
        (0..self.cols())
            .map(|c| {
                let a = self.matrix.column(c);
                let b = reference.matrix.column(c);
                let diff = (a - b).amax();
                let scale = b.amax();
                if scale > 0.0 {
                    diff / scale
                } else {
                    diff
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Adjoint fields `w_b = A⁻¹ e_b` for every boundary node, in canonical order.
pub fn adjoint_fields(model: &ForwardModel, system: &crate::forward::ForwardSystem) -> Result<Vec<Vec<Complex64>>> {
    let n = model.mesh.node_count();
    system.factorization()?;
    model
        .mesh
        .boundary_nodes()
        .par_iter()
        .map(|&b| {
            let mut e = vec![Complex64::new(0.0, 0.0); n];
            e[b] = Complex64::new(1.0, 0.0);
            system.solve_load(&e)
        })
        .collect()
}

impl ForwardModel {
    /// Measurements and adjoint Jacobian at `q` from one factorization.
    pub fn measure_with_jacobian(
        &self,
        q: &ParameterField,
        free: &FreeIndex,
    ) -> Result<(MeasurementSet, JacobianMatrix)> {
        if free.triangle_count() != self.mesh.triangle_count() {
            return Err(Error::Dimension {
                what: "free index",
                expected: self.mesh.triangle_count(),
                got: free.triangle_count(),
            });
        }
        let system = self.assemble(q)?;
        let fields = self.solve_all(&system)?;
        let adjoints = adjoint_fields(self, &system)?;
        let mesh = &self.mesh;
        let nb = mesh.boundary_nodes().len();
        let nfree = free.len();
        let elems: Vec<_> = free.triangles().iter().map(|&t| (t, element_matrices(mesh, t))).collect();

        // One row block (2·nb rows) per source, stored row-major.
        let blocks: Vec<Vec<f64>> = fields
            .par_iter()
            .map(|u| {
                let mut block = vec![0.0; 2 * nb * 2 * nfree];
                let width = 2 * nfree;
                for (i, (t, e)) in elems.iter().enumerate() {
                    let tri = mesh.triangles()[*t];
                    let ut = [u[tri[0]], u[tri[1]], u[tri[2]]];
                    let mut ku = [Complex64::new(0.0, 0.0); 3];
                    let mut mu = [Complex64::new(0.0, 0.0); 3];
                    for a in 0..3 {
                        for c in 0..3 {
                            ku[a] += e.stiffness[a][c] * ut[c];
                            mu[a] += e.mass[a][c] * ut[c];
                        }
                    }
                    for (b, w) in adjoints.iter().enumerate() {
                        let wt = [w[tri[0]], w[tri[1]], w[tri[2]]];
                        let dd = -(wt[0] * ku[0] + wt[1] * ku[1] + wt[2] * ku[2]);
                        let dm = -(wt[0] * mu[0] + wt[1] * mu[1] + wt[2] * mu[2]);
                        let re = 2 * b * width;
                        let im = re + width;
                        block[re + i] = dd.re;
                        block[im + i] = dd.im;
                        block[re + nfree + i] = dm.re;
                        block[im + nfree + i] = dm.im;
                    }
                }
                block
            })
            .collect();

        let rows = 2 * nb * fields.len();
        let mut matrix = DMatrix::zeros(rows, 2 * nfree);
        for (s, block) in blocks.iter().enumerate() {
            for r in 0..2 * nb {
                for c in 0..2 * nfree {
                    matrix[(s * 2 * nb + r, c)] = block[r * 2 * nfree + c];
                }
            }
        }
        let set = MeasurementSet {
            boundary_nodes: mesh.boundary_nodes().to_vec(),
            traces: fields.iter().map(|u| crate::forward::measure(u, mesh)).collect(),
            noise_sigma: None,
        };
        Ok((
            set,
            JacobianMatrix {
                matrix,
                column_scale: vec![1.0; 2 * nfree],
            },
        ))
    }
}

/// Adjoint Jacobian with respect to the free parameters of `mesh`.
pub fn adjoint_jacobian(
    mesh: &Mesh,
    q: &ParameterField,
    k: f64,
    sources: &crate::forward::SourceBank,
) -> Result<JacobianMatrix> {
    let model = ForwardModel::new(mesh.clone(), k, sources.clone())?;
    let free = FreeIndex::new(mesh);
    Ok(model.measure_with_jacobian(q, &free)?.1)
}

/// Central-difference Jacobian over `free`. Each parameter is perturbed by
/// `step·|x_i|` (or `step` when `x_i = 0`).
pub fn fd_jacobian(
    model: &ForwardModel,
    q: &ParameterField,
    free: &FreeIndex,
    step: f64,
) -> Result<JacobianMatrix> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let x = free.gather(q);
    let n = free.len();
    let columns: Vec<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|c| {
            let h = if x[c] != 0.0 { step * x[c].abs() } else { step };
            let (lo, hi) = (x[c] - h, x[c] + h);
            let is_d = c < n;
            if (is_d && lo <= 0.0) || (!is_d && lo < 0.0) {
                return Err(Error::Bounds(format!(
                    "parameter {c} perturbed to {lo} leaves the admissible set"
                )));
            }
            let mut xp = x.clone();
            xp[c] = hi;
            let gp = model.forward_map(&free.scatter(&xp, q)?)?.flatten();
            xp[c] = lo;
            let gm = model.forward_map(&free.scatter(&xp, q)?)?.flatten();
            Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (hi - lo)).collect())
        })
        .collect::<Result<_>>()?;
    let rows = model.measurement_count();
    let matrix = DMatrix::from_fn(rows, x.len(), |r, c| columns[c][r]);
    Ok(JacobianMatrix {
        matrix,
        column_scale: vec![1.0; x.len()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{Source, SourceBank};
    use crate::mesh::generate_disk_mesh;
    use crate::phantom::OpticalValues;

    #[test]
    fn zero_source_rows_vanish() {
        let mesh = generate_disk_mesh(10.0, 60, 2).unwrap();
        let mut bank = SourceBank::trigonometric(&mesh, 2, 1.0, [0.0, 0.0]);
        bank.sources.push(Source {
            label: "zero".into(),
            edge_flux: vec![0.0; mesh.boundary_edges().len()],
        });
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues::default());
        let j = adjoint_jacobian(&mesh, &q, 0.01, &bank).unwrap();
        let nb = mesh.boundary_nodes().len();
        assert_eq!(j.rows(), 2 * 3 * nb);
        assert!(j.matrix.rows(2 * 2 * nb, 2 * nb).iter().all(|&v| v == 0.0));
        assert!(j.matrix.rows(0, 2 * nb).amax() > 0.0);
    }

    #[test]
    fn adjoint_fields_are_symmetric() {
        let mesh = generate_disk_mesh(10.0, 80, 2).unwrap();
        let bank = SourceBank::trigonometric(&mesh, 1, 1.0, [0.0, 0.0]);
        let model = ForwardModel::new(mesh.clone(), 0.02, bank).unwrap();
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues::default());
        let sys = model.assemble(&q).unwrap();
        let w = adjoint_fields(&model, &sys).unwrap();
        let bn = mesh.boundary_nodes();
        for i in 0..bn.len() {
            for j in 0..bn.len() {
                let (a, b) = (w[i][bn[j]], w[j][bn[i]]);
                assert!((a - b).norm() <= 1e-10 * a.norm().max(b.norm()));
            }
        }
    }

    #[test]
    fn permuting_sources_permutes_row_blocks() {
        let mesh = generate_disk_mesh(10.0, 60, 2).unwrap();
        let bank = SourceBank::trigonometric(&mesh, 3, 1.0, [0.0, 0.0]);
        let mut swapped = bank.clone();
        swapped.sources.swap(0, 2);
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues::default());
        let a = adjoint_jacobian(&mesh, &q, 0.01, &bank).unwrap();
        let b = adjoint_jacobian(&mesh, &q, 0.01, &swapped).unwrap();
        let rows = 2 * mesh.boundary_nodes().len();
        assert_eq!(a.matrix.rows(0, rows), b.matrix.rows(2 * rows, rows));
        assert_eq!(a.matrix.rows(rows, rows), b.matrix.rows(rows, rows));
    }

    #[test]
    fn fd_rejects_out_of_bounds_perturbation() {
        let mesh = generate_disk_mesh(10.0, 60, 2).unwrap();
        let bank = SourceBank::trigonometric(&mesh, 1, 1.0, [0.0, 0.0]);
        let model = ForwardModel::new(mesh.clone(), 0.0, bank).unwrap();
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues::default());
        let free = FreeIndex::new(&mesh);
        assert!(fd_jacobian(&model, &q, &free, 2.0).is_err());
        assert!(fd_jacobian(&model, &q, &free, 0.0).is_err());
    }
}
