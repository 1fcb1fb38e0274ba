//! Regularization functionals and the anchored graph Laplacian.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{EdgeAdjacency, Mesh};
use crate::phantom::{FreeIndex, ParameterField};

/// R_ℓp(y) = Σ cᵢ |yᵢ − yᵇᵢ|^p.
pub fn lp_reg(y: &[f64], y_b: &[f64], c: &[f64], p: f64) -> Result<f64> {
    if y_b.len() != y.len() {
        return Err(Error::Dimension {
            what: "background vector",
            expected: y.len(),
            got: y_b.len(),
        });
    }
    if c.len() != y.len() {
        return Err(Error::Dimension {
            what: "weight vector",
            expected: y.len(),
            got: c.len(),
        });
    }
    check_exponent(p)?;
    if let Some(i) = c.iter().position(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("weight c[{i}] = {} is negative", c[i])));
    }
    Ok(y.iter()
        .zip(y_b)
        .zip(c)
        .map(|((&v, &b), &w)| if w == 0.0 { 0.0 } else { w * (v - b).abs().powf(p) })
        .sum())
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 2.0) {
        return Err(Error::InvalidArgument(format!("exponent p = {p} outside (0, 2]")));
    }
    Ok(())
}

/// R_TV(y) = Σ over interior edges of lᵢ |y_a − y_b|.
pub fn tv_reg(y: &[f64], adj: &EdgeAdjacency) -> Result<f64> {
    if y.len() != adj.triangle_count {
        return Err(Error::Dimension {
            what: "per-triangle vector",
            expected: adj.triangle_count,
            got: y.len(),
        });
    }
    Ok(adj
        .entries
        .iter()
        .map(|e| e.length * (y[e.a] - y[e.b]).abs())
        .sum())
}

/// R_G = α₁ R_ℓp + α₂ R_TV.
#[allow(clippy::too_many_arguments)]
pub fn mixed_reg(
    y: &[f64],
    y_b: &[f64],
    c: &[f64],
    p: f64,
    adj: &EdgeAdjacency,
    alpha1: f64,
    alpha2: f64,
) -> Result<f64> {
    if !(alpha1 > 0.0 && alpha2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mixing weights must be positive, got ({alpha1}, {alpha2})"
        )));
    }
    Ok(alpha1 * lp_reg(y, y_b, c, p)? + alpha2 * tv_reg(y, adj)?)
}

/// Inner functional applied to background-normalized fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularizer {
    Lp { p: f64 },
    Tv,
    Mixed { p: f64, alpha1: f64, alpha2: f64 },
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::Lp { p } => check_exponent(p),
            Regularizer::Tv => Ok(()),
            Regularizer::Mixed { p, alpha1, alpha2 } => {
                check_exponent(p)?;
                if !(alpha1 > 0.0 && alpha2 > 0.0) {
                    return Err(Error::InvalidArgument("mixing weights must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Evaluates on a normalized per-triangle field with unit background.
    pub fn eval_normalized(&self, y: &[f64], weights: &[f64], adj: &EdgeAdjacency) -> Result<f64> {
        let ones = vec![1.0; y.len()];
        match *self {
            Regularizer::Lp { p } => lp_reg(y, &ones, weights, p),
            Regularizer::Tv => tv_reg(y, adj),
            Regularizer::Mixed { p, alpha1, alpha2 } => {
                mixed_reg(y, &ones, weights, p, adj, alpha1, alpha2)
            }
        }
    }
}

/// Combined DOT regularizer
/// `R(q) = β₁ R(μ/μᵇ) + β₂ R(μ_s'/μ_sᵇ)` with `μ_s' = 1/(3D) − μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub inner: Regularizer,
    pub beta1: f64,
    pub beta2: f64,
    /// Expected background absorption μᵇ.
    pub mu_background: f64,
    /// Expected background reduced scattering μ_sᵇ.
    pub mus_background: f64,
    /// Per-triangle weights cᵢ for the ℓp part; `None` means all ones.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl RegularizerSpec {
    pub fn new(inner: Regularizer, mu_background: f64, mus_background: f64) -> Self {
        RegularizerSpec {
            inner,
            beta1: 0.5,
            beta2: 0.5,
            mu_background,
            mus_background,
            weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "β weights must be positive, got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if (self.beta1 + self.beta2 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "β₁ + β₂ must equal 1, got {}",
                self.beta1 + self.beta2
            )));
        }
        if !(self.mu_background > 0.0 && self.mus_background > 0.0) {
            return Err(Error::InvalidArgument("backgrounds must be positive".into()));
        }
        Ok(())
    }
}

pub fn dot_reg(q: &ParameterField, spec: &RegularizerSpec, adj: &EdgeAdjacency) -> Result<f64> {
    if let Some(t) = q.d.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Bounds(format!(
            "triangle {t}: D = {} leaves reduced scattering undefined",
            q.d[t]
        )));
    }
    let ones;
    let weights = match &spec.weights {
        Some(w) => w.as_slice(),
        None => {
            ones = vec![1.0; q.len()];
            &ones
        }
    };
    let mu: Vec<f64> = q.mu.iter().map(|m| m / spec.mu_background).collect();
    let mus: Vec<f64> = q
        .d
        .iter()
        .zip(&q.mu)
        .map(|(&d, &m)| (1.0 / (3.0 * d) - m) / spec.mus_background)
        .collect();
    Ok(spec.beta1 * spec.inner.eval_normalized(&mu, weights, adj)?
        + spec.beta2 * spec.inner.eval_normalized(&mus, weights, adj)?)
}

/// Edge-weighted graph Laplacian over the free triangles, repeated on the D
/// and μ blocks. Edges to pinned triangles contribute to the diagonal only.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaplacian {
    /// Free-triangle count `n`; the operator acts on vectors of length `2n`.
    n: usize,
    diag: Vec<f64>,
    /// Off-diagonal couplings `(i, j, −l)` with `i < j`, free positions.
    off: Vec<(usize, usize, f64)>,
    /// Anchoring weight per free position (sum of edge lengths to pinned
    /// neighbours).
    anchor: Vec<f64>,
}

pub fn graph_laplacian(mesh: &Mesh, adj: &EdgeAdjacency, free: &FreeIndex) -> DiscreteLaplacian {
    debug_assert_eq!(adj.triangle_count, mesh.triangle_count());
    let n = free.len();
    let mut diag = vec![0.0; n];
    let mut anchor = vec![0.0; n];
    let mut off = Vec::new();
    for e in &adj.entries {
        match (free.position(e.a), free.position(e.b)) {
            (Some(i), Some(j)) => {
                diag[i] += e.length;
                diag[j] += e.length;
                off.push((i.min(j), i.max(j), -e.length));
            }
            (Some(i), None) | (None, Some(i)) => {
                diag[i] += e.length;
                anchor[i] += e.length;
            }
            (None, None) => {}
        }
    }
    DiscreteLaplacian { n, diag, off, anchor }
}

impl DiscreteLaplacian {
    /// Dimension of the operator (2n).
    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn anchor_weights(&self) -> &[f64] {
        &self.anchor
    }

    /// L·v for a vector of length 2n.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim());
        let mut out = vec![0.0; v.len()];
        for block in [0, self.n] {
            for i in 0..self.n {
                out[block + i] = self.diag[i] * v[block + i];
            }
            for &(i, j, w) in &self.off {
                out[block + i] += w * v[block + j];
                out[block + j] += w * v[block + i];
            }
        }
        out
    }

    /// vᵀ L v.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        self.apply(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for block in [0, self.n] {
            for i in 0..self.n {
                m[(block + i, block + i)] = self.diag[i];
            }
            for &(i, j, w) in &self.off {
                m[(block + i, block + j)] += w;
                m[(block + j, block + i)] += w;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{edge_adjacency, generate_disk_mesh};
    use crate::phantom::OpticalValues;

    fn two_triangles() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn lp_examples() {
        assert_eq!(lp_reg(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert_eq!(lp_reg(&[2.0, 0.0], &[1.0, 1.0], &[1.0, 1.0], 1.0).unwrap(), 2.0);
        let y = [1.0, -2.0, 0.5];
        let b = [0.0, 1.0, 0.5];
        assert_eq!(lp_reg(&y, &b, &[1.0; 3], 2.0).unwrap(), 1.0 + 9.0);
        // zero weight masks a mismatch
        assert_eq!(lp_reg(&[5.0], &[1.0], &[0.0], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn lp_errors() {
        assert!(lp_reg(&[1.0], &[1.0, 2.0], &[1.0], 1.0).is_err());
        assert!(lp_reg(&[1.0], &[1.0], &[1.0, 1.0], 1.0).is_err());
        assert!(lp_reg(&[1.0], &[1.0], &[1.0], 0.0).is_err());
        assert!(lp_reg(&[1.0], &[1.0], &[1.0], 2.5).is_err());
        assert!(lp_reg(&[1.0], &[1.0], &[-1.0], 1.0).is_err());
    }

    #[test]
    fn tv_examples() {
        let m = two_triangles();
        let adj = edge_adjacency(&m);
        assert_eq!(tv_reg(&[4.0, 4.0], &adj).unwrap(), 0.0);
        assert_eq!(tv_reg(&[0.0, 1.0], &adj).unwrap(), 2f64.sqrt());
        assert!(tv_reg(&[0.0], &adj).is_err());
    }

    #[test]
    fn mixed_examples() {
        let m = two_triangles();
        let adj = edge_adjacency(&m);
        let y = [1.0, 1.0];
        assert_eq!(mixed_reg(&y, &y, &[1.0; 2], 1.0, &adj, 0.3, 0.7).unwrap(), 0.0);
        let y = [1.5, 0.2];
        let b = [1.0, 1.0];
        let v1 = mixed_reg(&y, &b, &[1.0; 2], 1.0, &adj, 0.3, 0.7).unwrap();
        let v2 = mixed_reg(&y, &b, &[1.0; 2], 1.0, &adj, 0.6, 1.4).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-15);
        assert!(mixed_reg(&y, &b, &[1.0; 2], 1.0, &adj, 0.0, 1.0).is_err());
    }

    #[test]
    fn mixed_on_three_triangle_chain() {
        // Triangle 0 touches 1 and 2 across edges of length √2.
        let mesh = Mesh::new(
            vec![[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [3.0, 1.0], [-1.0, 1.0]],
            vec![[0, 1, 2], [1, 3, 2], [0, 2, 4]],
            None,
        )
        .unwrap();
        let adj = edge_adjacency(&mesh);
        assert_eq!(adj.entries.len(), 2);
        let y = [1.2, 0.9, 1.0];
        let v = mixed_reg(&y, &[1.0; 3], &[1.0; 3], 1.0, &adj, 2.0, 0.5).unwrap();
        // independent scalar evaluation:
        // ℓ1 = 0.2 + 0.1 + 0 = 0.3; TV = √2·|1.2 − 0.9| + √2·|1.2 − 1.0| = √2·0.5
        let want = 2.0 * 0.3 + 0.5 * 2f64.sqrt() * 0.5;
        assert!((v - want).abs() < 1e-14, "{v} vs {want}");
    }

    #[test]
    fn dot_reg_zero_at_background() {
        let mesh = generate_disk_mesh(10.0, 60, 1).unwrap();
        let adj = edge_adjacency(&mesh);
        let bg = OpticalValues::default();
        let q = ParameterField::constant(mesh.triangle_count(), bg);
        for inner in [Regularizer::Lp { p: 1.0 }, Regularizer::Tv] {
            let spec = RegularizerSpec::new(inner, bg.mu, bg.reduced_scattering());
            assert!(dot_reg(&q, &spec, &adj).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn dot_reg_two_triangle_hand_value() {
        let mesh = two_triangles();
        let adj = edge_adjacency(&mesh);
        let bg = OpticalValues { d: 0.2, mu: 0.02 };
        let mus_b = bg.reduced_scattering();
        let mut q = ParameterField::constant(2, bg);
        q.mu[1] = 0.03;
        // μ/μᵇ = (1, 1.5); μ_s' on triangle 1 drops by 0.01
        let mus1 = 1.0 / 0.6 - 0.03;
        for (inner, want) in [
            (
                Regularizer::Lp { p: 1.0 },
                0.5 * 0.5 + 0.5 * ((mus1 / mus_b) - 1.0).abs(),
            ),
            (
                Regularizer::Tv,
                0.5 * 2f64.sqrt() * 0.5 + 0.5 * 2f64.sqrt() * (1.0 - mus1 / mus_b).abs(),
            ),
        ] {
            let spec = RegularizerSpec::new(inner, bg.mu, mus_b);
            let v = dot_reg(&q, &spec, &adj).unwrap();
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn dot_reg_monotone_in_anomaly() {
        let mesh = generate_disk_mesh(10.0, 60, 1).unwrap();
        let adj = edge_adjacency(&mesh);
        let bg = OpticalValues::default();
        let spec = RegularizerSpec::new(Regularizer::Lp { p: 1.0 }, bg.mu, bg.reduced_scattering());
        let mut last = 0.0;
        for t in [0.1, 0.2, 0.4, 0.8] {
            let mut q = ParameterField::constant(mesh.triangle_count(), bg);
            q.mu[5] = bg.mu * (1.0 + t);
            let v = dot_reg(&q, &spec, &adj).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn dot_reg_rejects_bad_d_and_spec() {
        let mesh = two_triangles();
        let adj = edge_adjacency(&mesh);
        let mut q = ParameterField::constant(2, OpticalValues::default());
        q.d[0] = 0.0;
        let spec = RegularizerSpec::new(Regularizer::Tv, 0.025, 2.0);
        assert!(dot_reg(&q, &spec, &adj).is_err());
        let mut bad = spec.clone();
        bad.beta1 = 0.7;
        assert!(bad.validate().is_err());
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn laplacian_small_cases() {
        // Two free triangles, no pinned neighbours.
        let mesh = two_triangles();
        let adj = edge_adjacency(&mesh);
        let l = graph_laplacian(&mesh, &adj, &FreeIndex::all(2)).to_dense();
        let s = 2f64.sqrt();
        assert_eq!(l.nrows(), 4);
        assert_eq!(
            l.view((0, 0), (2, 2)).clone_owned(),
            DMatrix::from_row_slice(2, 2, &[s, -s, -s, s])
        );
        assert_eq!(l.view((2, 2), (2, 2)), l.view((0, 0), (2, 2)));
        assert!(l.view((0, 2), (2, 2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_single_anchored_triangle() {
        let mesh = two_triangles();
        let adj = edge_adjacency(&mesh);
        let l = graph_laplacian(&mesh, &adj, &one_free(&mesh, 0));
        let s = 2f64.sqrt();
        assert_eq!(l.to_dense(), DMatrix::from_row_slice(2, 2, &[s, 0.0, 0.0, s]));
        assert_eq!(l.anchor_weights(), &[s]);
    }

    fn one_free(mesh: &Mesh, t: usize) -> FreeIndex {
        FreeIndex::from_triangles(mesh.triangle_count(), vec![t]).unwrap()
    }
}
