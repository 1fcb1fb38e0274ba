//! Ground-truth optical scenes and per-triangle parameter fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

/// A (D, μ) pair: diffusion coefficient in mm and absorption in mm⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalValues {
    pub d: f64,
    pub mu: f64,
}

impl OpticalValues {
    /// Diffusion coefficient from absorption and reduced scattering.
    pub fn from_absorption_scattering(mu_a: f64, mu_s_prime: f64) -> Self {
        OpticalValues {
            d: 1.0 / (3.0 * (mu_a + mu_s_prime)),
            mu: mu_a,
        }
    }

    /// μ_s' = 1/(3D) − μ.
    pub fn reduced_scattering(&self) -> f64 {
        1.0 / (3.0 * self.d) - self.mu
    }
}

impl Default for OpticalValues {
    fn default() -> Self {
        OpticalValues::from_absorption_scattering(0.025, 2.0)
    }
}

/// Admissible box for the parameters: `d_min ≤ D ≤ d_max`, `0 < μ ≤ mu_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub d_min: f64,
    pub d_max: f64,
    pub mu_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            d_min: 0.01,
            d_max: 1.0,
            mu_max: 0.5,
        }
    }
}

impl Bounds {
    pub fn check(&self, v: OpticalValues) -> Result<()> {
        if !(v.d >= self.d_min && v.d <= self.d_max) {
            return Err(Error::Bounds(format!(
                "D = {} outside [{}, {}]",
                v.d, self.d_min, self.d_max
            )));
        }
        if !(v.mu > 0.0 && v.mu <= self.mu_max) {
            return Err(Error::Bounds(format!("mu = {} outside (0, {}]", v.mu, self.mu_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Circle {
        center: Point,
        radius: f64,
    },
    /// Angles in radians, counter-clockwise from `theta_start` to `theta_end`.
    HalfAnnulus {
        center: Point,
        r_in: f64,
        r_out: f64,
        theta_start: f64,
        theta_end: f64,
    },
    Polygon {
        vertices: Vec<Point>,
    },
}

impl Shape {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Shape::Circle { center, radius } => {
                (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) <= radius * radius
            }
            Shape::HalfAnnulus {
                center,
                r_in,
                r_out,
                theta_start,
                theta_end,
            } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let r = dx.hypot(dy);
                if r < *r_in || r > *r_out {
                    return false;
                }
                let tau = std::f64::consts::TAU;
                let span = (theta_end - theta_start).rem_euclid(tau);
                let span = if span == 0.0 && theta_end != theta_start { tau } else { span };
                (dy.atan2(dx) - theta_start).rem_euclid(tau) <= span
            }
            Shape::Polygon { vertices } => point_in_polygon(vertices, p),
        }
    }
}

fn point_in_polygon(v: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1])
            && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0]
        {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub shape: Shape,
    pub values: OpticalValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub background: OpticalValues,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
}

impl Phantom {
    pub fn homogeneous(background: OpticalValues) -> Self {
        Phantom {
            background,
            inclusions: Vec::new(),
        }
    }

    /// Single disc with 2× absorption and 0.5× diffusion of the background.
    pub fn single_circle(background: OpticalValues, center: Point, radius: f64) -> Self {
        Phantom {
            background,
            inclusions: vec![Inclusion {
                shape: Shape::Circle { center, radius },
                values: OpticalValues {
                    d: 0.5 * background.d,
                    mu: 2.0 * background.mu,
                },
            }],
        }
    }

    pub fn validate(&self, bounds: &Bounds) -> Result<()> {
        bounds.check(self.background)?;
        for (i, inc) in self.inclusions.iter().enumerate() {
            bounds
                .check(inc.values)
                .map_err(|e| Error::Bounds(format!("inclusion {i}: {e}")))?;
        }
        Ok(())
    }

    /// Value at a point: the last inclusion containing it, else background.
    pub fn value_at(&self, p: Point) -> OpticalValues {
        self.inclusions
            .iter()
            .rev()
            .find(|inc| inc.shape.contains(p))
            .map_or(self.background, |inc| inc.values)
    }
}

/// Per-triangle (D, μ) on a mesh, plus the background held on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterField {
    pub d: Vec<f64>,
    pub mu: Vec<f64>,
    pub boundary_background: OpticalValues,
}

impl ParameterField {
    pub fn constant(triangles: usize, v: OpticalValues) -> Self {
        ParameterField {
            d: vec![v.d; triangles],
            mu: vec![v.mu; triangles],
            boundary_background: v,
        }
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn get(&self, t: usize) -> OpticalValues {
        OpticalValues {
            d: self.d[t],
            mu: self.mu[t],
        }
    }

    /// Per-triangle reduced scattering μ_s' = 1/(3D) − μ.
    pub fn reduced_scattering(&self) -> Vec<f64> {
        self.d
            .iter()
            .zip(&self.mu)
            .map(|(&d, &mu)| 1.0 / (3.0 * d) - mu)
            .collect()
    }

    /// Sets every boundary-adjacent triangle to the boundary background.
    pub fn pin_boundary(&mut self, mesh: &Mesh) {
        for t in boundary_adjacent(mesh) {
            self.d[t] = self.boundary_background.d;
            self.mu[t] = self.boundary_background.mu;
        }
    }

    pub fn check_bounds(&self, bounds: &Bounds) -> Result<()> {
        for t in 0..self.len() {
            bounds
                .check(self.get(t))
                .map_err(|e| Error::Bounds(format!("triangle {t}: {e}")))?;
        }
        Ok(())
    }
}

/// Rasterizes a phantom: each triangle takes the value at its centroid.
pub fn rasterize(phantom: &Phantom, mesh: &Mesh, bounds: &Bounds) -> Result<ParameterField> {
    phantom.validate(bounds)?;
    let (d, mu) = (0..mesh.triangle_count())
        .map(|t| {
            let v = phantom.value_at(mesh.centroid(t));
            (v.d, v.mu)
        })
        .unzip();
    Ok(ParameterField {
        d,
        mu,
        boundary_background: phantom.background,
    })
}

/// Triangles owning at least one boundary node.
pub fn boundary_adjacent(mesh: &Mesh) -> Vec<usize> {
    (0..mesh.triangle_count())
        .filter(|&t| mesh.triangles()[t].iter().any(|&n| mesh.is_boundary_node(n)))
        .collect()
}

/// Ordered interior triangles whose (D, μ) values are the inverse-problem
/// unknowns. The unknown vector is laid out as `[D(free[0..n]), μ(free[0..n])]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeIndex {
    free: Vec<usize>,
    position: Vec<Option<usize>>,
}

impl FreeIndex {
    pub fn new(mesh: &Mesh) -> Self {
        let mut position = vec![None; mesh.triangle_count()];
        let free: Vec<usize> = (0..mesh.triangle_count())
            .filter(|&t| !mesh.triangles()[t].iter().any(|&n| mesh.is_boundary_node(n)))
            .collect();
        for (i, &t) in free.iter().enumerate() {
            position[t] = Some(i);
        }
        FreeIndex { free, position }
    }

    /// Every triangle free; used for problems without a pinned boundary layer.
    pub fn all(triangles: usize) -> Self {
        FreeIndex {
            free: (0..triangles).collect(),
            position: (0..triangles).map(Some).collect(),
        }
    }

    /// Explicit free set, in the given order.
    pub fn from_triangles(triangles: usize, free: Vec<usize>) -> Result<Self> {
        let mut position = vec![None; triangles];
        for (i, &t) in free.iter().enumerate() {
            match position.get_mut(t) {
                Some(slot @ None) => *slot = Some(i),
                Some(Some(_)) => {
                    return Err(Error::InvalidArgument(format!("triangle {t} listed twice")))
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "triangle {t} out of range for {triangles} triangles"
                    )))
                }
            }
        }
        Ok(FreeIndex { free, position })
    }

    /// Number of free triangles `n`; the unknown vector has length `2n`.
    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.free.len()
    }

    pub fn triangles(&self) -> &[usize] {
        &self.free
    }

    pub fn position(&self, triangle: usize) -> Option<usize> {
        self.position.get(triangle).copied().flatten()
    }

    pub fn triangle_count(&self) -> usize {
        self.position.len()
    }

    pub fn gather(&self, field: &ParameterField) -> Vec<f64> {
        self.free
            .iter()
            .map(|&t| field.d[t])
            .chain(self.free.iter().map(|&t| field.mu[t]))
            .collect()
    }

    /// Writes an unknown vector into a copy of `base`.
    pub fn scatter(&self, x: &[f64], base: &ParameterField) -> Result<ParameterField> {
        if x.len() != self.parameter_count() {
            return Err(Error::Dimension {
                what: "unknown vector",
                expected: self.parameter_count(),
                got: x.len(),
            });
        }
        let n = self.len();
        let mut field = base.clone();
        for (i, &t) in self.free.iter().enumerate() {
            field.d[t] = x[i];
            field.mu[t] = x[n + i];
        }
        Ok(field)
    }
}
