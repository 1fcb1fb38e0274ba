//! The DOT inverse problem restricted to the free parameters.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::forward::ForwardModel;
use crate::phantom::{Bounds, FreeIndex, ParameterField};

/// A differentiable map from an unknown vector to a flat real measurement
/// vector.
pub trait InverseModel: Sync {
    fn parameter_count(&self) -> usize;

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Value and Jacobian at `x`.
    fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

/// Forward model over the free triangles in background-normalized units:
/// the unknown is `x = q / q_bg` componentwise, so `x ≡ 1` is the background.
#[derive(Debug, Clone)]
pub struct DotProblem {
    pub model: ForwardModel,
    pub free: FreeIndex,
    /// Field supplying the pinned (non-free) triangle values.
    pub base: ParameterField,
    /// Physical value per unknown corresponding to `x = 1`.
    pub scale: Vec<f64>,
}

impl DotProblem {
    pub fn new(model: ForwardModel, base: ParameterField) -> Self {
        let free = FreeIndex::new(&model.mesh);
        let bg = base.boundary_background;
        let n = free.len();
        let scale = std::iter::repeat_n(bg.d, n)
            .chain(std::iter::repeat_n(bg.mu, n))
            .collect();
        DotProblem {
            model,
            free,
            base,
            scale,
        }
    }

    pub fn to_physical(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scale).map(|(a, s)| a * s).collect()
    }

    pub fn to_scaled(&self, q: &[f64]) -> Vec<f64> {
        q.iter().zip(&self.scale).map(|(a, s)| a / s).collect()
    }

    /// Full-mesh field for a scaled unknown vector.
    pub fn field(&self, x: &[f64]) -> Result<ParameterField> {
        self.free.scatter(&self.to_physical(x), &self.base)
    }

    /// Full-mesh field for a physical unknown vector.
    pub fn field_physical(&self, q: &[f64]) -> Result<ParameterField> {
        self.free.scatter(q, &self.base)
    }

    /// Box bounds in scaled units. μ is kept strictly positive by a floor of
    /// `1e-6` background.
    pub fn scaled_box(&self, bounds: &Bounds) -> BoxBounds {
        let n = self.free.len();
        let bg = self.base.boundary_background;
        let mut lower = vec![bounds.d_min / bg.d; n];
        lower.extend(std::iter::repeat_n(1e-6, n));
        let mut upper = vec![bounds.d_max / bg.d; n];
        upper.extend(std::iter::repeat_n(bounds.mu_max / bg.mu, n));
        BoxBounds { lower, upper }
    }
}

impl InverseModel for DotProblem {
    fn parameter_count(&self) -> usize {
        self.free.parameter_count()
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.forward_map(&self.field(x)?)?.flatten())
    }

    fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (g, jac) = self.model.measure_with_jacobian(&self.field(x)?, &self.free)?;
        Ok((g.flatten(), jac.scaled_columns(&self.scale)?.matrix))
    }
}

/// Componentwise box `lower ≤ x ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn unbounded(n: usize) -> Self {
        BoxBounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((&v, &lo), &hi)| v >= lo && v <= hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::SourceBank;
    use crate::mesh::generate_disk_mesh;
    use crate::phantom::OpticalValues;

    #[test]
    fn unit_vector_is_background() {
        let mesh = generate_disk_mesh(10.0, 80, 3).unwrap();
        let bank = SourceBank::trigonometric(&mesh, 2, 1.0, [0.0, 0.0]);
        let bg = OpticalValues::default();
        let base = ParameterField::constant(mesh.triangle_count(), bg);
        let model = ForwardModel::new(mesh, 0.01, bank).unwrap();
        let p = DotProblem::new(model.clone(), base.clone());
        let x = vec![1.0; p.parameter_count()];
        assert_eq!(p.field(&x).unwrap(), base);
        assert_eq!(p.evaluate(&x).unwrap(), model.forward_map(&base).unwrap().flatten());
        let b = p.scaled_box(&Bounds::default());
        assert!(b.contains(&x));
    }
}
