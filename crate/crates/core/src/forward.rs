//! Frequency-domain diffusion forward model.
//!
//! Solves the Neumann problem
//!
//! ```text
//! −∇·(D∇u) + (μ + ik)u = 0   in Ω
//!              D ∂u/∂ν = f   on ∂Ω
//! ```
//!
//! with P1 nodal elements and per-triangle constant D, μ, and records the
//! Dirichlet trace of `u` on the boundary nodes.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::phantom::ParameterField;
use crate::sparse::{SkylineLdlt, SkylineMatrix};

/// Speed of light in tissue, mm/ps.
pub const DEFAULT_LIGHT_SPEED_MM_PER_PS: f64 = 0.214;
/// Source modulation frequency, Hz.
pub const DEFAULT_MODULATION_HZ: f64 = 100e6;

/// Wavenumber k = ω/c in mm⁻¹ for modulation frequency `hz` and light speed
/// `c_mm_per_ps`.
pub fn wavenumber(hz: f64, c_mm_per_ps: f64) -> f64 {
    2.0 * std::f64::consts::PI * hz * 1e-12 / c_mm_per_ps
}

pub fn default_wavenumber() -> f64 {
    wavenumber(DEFAULT_MODULATION_HZ, DEFAULT_LIGHT_SPEED_MM_PER_PS)
}

/// P1 element matrices with unit coefficients.
#[derive(Debug, Clone, Copy)]
pub struct ElementMatrices {
    /// ∫ ∇φ_a·∇φ_b
    pub stiffness: [[f64; 3]; 3],
    /// ∫ φ_a φ_b
    pub mass: [[f64; 3]; 3],
}

pub fn element_matrices(mesh: &Mesh, t: usize) -> ElementMatrices {
    let [p0, p1, p2] = mesh.vertices(t);
    let area = mesh.area(t);
    let p = [p0, p1, p2];
    let mut b = [0.0; 3];
    let mut c = [0.0; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        b[i] = p[j][1] - p[k][1];
        c[i] = p[k][0] - p[j][0];
    }
    let mut stiffness = [[0.0; 3]; 3];
    let mut mass = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            stiffness[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
            mass[i][j] = area / 12.0 * if i == j { 2.0 } else { 1.0 };
        }
    }
    ElementMatrices { stiffness, mass }
}

/// Assembled system matrix `K(D) + M(μ) + ik·M` with a lazily built
/// factorization.
#[derive(Debug)]
pub struct ForwardSystem {
    matrix: SkylineMatrix,
    wavenumber: f64,
    factor: OnceLock<std::result::Result<SkylineLdlt, String>>,
}

/// Node adjacency graph of a mesh (for the sparse profile).
pub fn node_graph(mesh: &Mesh) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); mesh.node_count()];
    for tri in mesh.triangles() {
        for i in 0..3 {
            for j in 0..3 {
                if i != j && !adj[tri[i]].contains(&tri[j]) {
                    adj[tri[i]].push(tri[j]);
                }
            }
        }
    }
    adj
}

/// Assembles the system for `q` at wavenumber `k`.
pub fn assemble(mesh: &Mesh, q: &ParameterField, k: f64) -> Result<ForwardSystem> {
    let template = SkylineMatrix::with_graph(&node_graph(mesh));
    assemble_into(mesh, q, k, template)
}

pub(crate) fn assemble_into(
    mesh: &Mesh,
    q: &ParameterField,
    k: f64,
    mut matrix: SkylineMatrix,
) -> Result<ForwardSystem> {
    if q.len() != mesh.triangle_count() || q.mu.len() != q.d.len() {
        return Err(Error::Dimension {
            what: "parameter field",
            expected: mesh.triangle_count(),
            got: q.len(),
        });
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(Error::InvalidArgument(format!("wavenumber must be ≥ 0, got {k}")));
    }
    for t in 0..q.len() {
        if !(q.d[t] > 0.0 && q.d[t].is_finite()) {
            return Err(Error::Bounds(format!("triangle {t}: D = {} must be positive", q.d[t])));
        }
        if !(q.mu[t] >= 0.0 && q.mu[t].is_finite()) {
            return Err(Error::Bounds(format!("triangle {t}: mu = {} must be ≥ 0", q.mu[t])));
        }
    }
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let e = element_matrices(mesh, t);
        let (d, mu) = (q.d[t], q.mu[t]);
        for i in 0..3 {
            for j in 0..=i {
                let v = Complex64::new(d * e.stiffness[i][j] + mu * e.mass[i][j], k * e.mass[i][j]);
                matrix.add(tri[i], tri[j], v);
            }
        }
    }
    Ok(ForwardSystem {
        matrix,
        wavenumber: k,
        factor: OnceLock::new(),
    })
}

impl ForwardSystem {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    pub fn entry(&self, a: usize, b: usize) -> Complex64 {
        self.matrix.get(a, b)
    }

    pub fn matrix(&self) -> &SkylineMatrix {
        &self.matrix
    }

    pub fn factorization(&self) -> Result<&SkylineLdlt> {
        self.factor
            .get_or_init(|| self.matrix.factorize().map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::Solver(e.clone()))
    }

    /// Solves `A u = b` for a nodal load vector.
    pub fn solve_load(&self, load: &[Complex64]) -> Result<Vec<Complex64>> {
        if load.len() != self.dim() {
            return Err(Error::Dimension {
                what: "load vector",
                expected: self.dim(),
                got: load.len(),
            });
        }
        Ok(self.factorization()?.solve(load))
    }

    /// Relative residual ‖Au − b‖/‖b‖ (0 when b = 0 and u = 0).
    pub fn relative_residual(&self, u: &[Complex64], b: &[Complex64]) -> f64 {
        let au = self.matrix.mul_vec(u);
        let r: f64 = au.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        let bn: f64 = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if bn == 0.0 {
            r
        } else {
            r / bn
        }
    }
}

/// A Neumann boundary flux, one value per boundary edge (in the mesh's
/// boundary-edge order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub label: String,
    pub edge_flux: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceBank {
    pub description: String,
    pub sources: Vec<Source>,
}

impl SourceBank {
    /// Samples `f(x)` at boundary edge midpoints for each pattern.
    pub fn from_functions(
        mesh: &Mesh,
        description: impl Into<String>,
        patterns: &[(String, &dyn Fn([f64; 2]) -> f64)],
    ) -> Self {
        let nodes = mesh.nodes();
        let sources = patterns
            .iter()
            .map(|(label, f)| Source {
                label: label.clone(),
                edge_flux: mesh
                    .boundary_edges()
                    .iter()
                    .map(|e| {
                        let (p, q) = (nodes[e[0]], nodes[e[1]]);
                        f([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0])
                    })
                    .collect(),
            })
            .collect();
        SourceBank {
            description: description.into(),
            sources,
        }
    }

    /// Trigonometric bank: source j (1-based) is `amplitude·cos(⌈j/2⌉θ)` for
    /// odd j and `amplitude·sin(⌈j/2⌉θ)` for even j, with θ the polar angle
    /// about `center`.
    pub fn trigonometric(mesh: &Mesh, count: usize, amplitude: f64, center: [f64; 2]) -> Self {
        let patterns: Vec<(String, Box<dyn Fn([f64; 2]) -> f64>)> = (1..=count)
            .map(|j| {
                let n = j.div_ceil(2) as f64;
                let odd = j % 2 == 1;
                let label = format!("{}({}θ)", if odd { "cos" } else { "sin" }, n);
                let f: Box<dyn Fn([f64; 2]) -> f64> = Box::new(move |p: [f64; 2]| {
                    let theta = (p[1] - center[1]).atan2(p[0] - center[0]);
                    amplitude * if odd { (n * theta).cos() } else { (n * theta).sin() }
                });
                (label, f)
            })
            .collect();
        let refs: Vec<(String, &dyn Fn([f64; 2]) -> f64)> =
            patterns.iter().map(|(l, f)| (l.clone(), f.as_ref())).collect();
        SourceBank::from_functions(
            mesh,
            format!("trigonometric, {count} sources, amplitude {amplitude}"),
            &refs,
        )
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidArgument("source bank is empty".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if s.edge_flux.len() != mesh.boundary_edges().len() {
                return Err(Error::Dimension {
                    what: "source edge flux",
                    expected: mesh.boundary_edges().len(),
                    got: s.edge_flux.len(),
                });
            }
            if s.edge_flux.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("source {i} has non-finite flux")));
            }
        }
        Ok(())
    }

    /// Scales every source by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.sources {
            s.edge_flux.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

/// Nodal load `b_a = ∫_∂Ω f φ_a`. Per edge the trapezoidal rule on `f φ_a`
/// with edge-constant `f` gives `f_e |e| / 2` to each endpoint.
pub fn neumann_load(mesh: &Mesh, source: &Source) -> Vec<Complex64> {
    let mut b = vec![Complex64::new(0.0, 0.0); mesh.node_count()];
    let nodes = mesh.nodes();
    for (e, &f) in mesh.boundary_edges().iter().zip(&source.edge_flux) {
        let (p, q) = (nodes[e[0]], nodes[e[1]]);
        let len = (p[0] - q[0]).hypot(p[1] - q[1]);
        b[e[0]].re += 0.5 * f * len;
        b[e[1]].re += 0.5 * f * len;
    }
    b
}

/// Solves the Neumann problem for one source.
pub fn solve_forward(system: &ForwardSystem, mesh: &Mesh, source: &Source) -> Result<Vec<Complex64>> {
    let b = neumann_load(mesh, source);
    if b.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
        return Ok(b);
    }
    system.solve_load(&b)
}

/// Dirichlet trace: `u` on the boundary nodes in canonical loop order.
pub fn measure(u: &[Complex64], mesh: &Mesh) -> Vec<Complex64> {
    mesh.boundary_nodes().iter().map(|&n| u[n]).collect()
}

/// Boundary traces for a bank of sources, plus an optional diagonal noise
/// model.
///
/// The flat real vector is ordered source-major, boundary-node-minor, with
/// the real part before the imaginary part:
/// `g[2·(s·B + b)] = Re u_s(b)`, `g[2·(s·B + b) + 1] = Im u_s(b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub boundary_nodes: Vec<usize>,
    pub traces: Vec<Vec<Complex64>>,
    /// Standard deviation per flat component.
    pub noise_sigma: Option<Vec<f64>>,
}

pub const FLATTENING_ORDER: &str = "source-major, boundary-node-minor, real-then-imaginary";

impl MeasurementSet {
    pub fn source_count(&self) -> usize {
        self.traces.len()
    }

    pub fn flat_len(&self) -> usize {
        2 * self.traces.len() * self.boundary_nodes.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.traces
            .iter()
            .flat_map(|t| t.iter().flat_map(|z| [z.re, z.im]))
            .collect()
    }

    pub fn from_flat(boundary_nodes: Vec<usize>, flat: &[f64]) -> Result<Self> {
        let nb = boundary_nodes.len();
        if nb == 0 || flat.len() % (2 * nb) != 0 {
            return Err(Error::Dimension {
                what: "flat measurement vector",
                expected: 2 * nb,
                got: flat.len(),
            });
        }
        let traces = flat
            .chunks(2 * nb)
            .map(|c| c.chunks(2).map(|z| Complex64::new(z[0], z[1])).collect())
            .collect();
        Ok(MeasurementSet {
            boundary_nodes,
            traces,
            noise_sigma: None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,node,re,im\n");
        for (k, trace) in self.traces.iter().enumerate() {
            for (&n, z) in self.boundary_nodes.iter().zip(trace) {
                let _ = writeln!(s, "{k},{n},{:e},{:e}", z.re, z.im);
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: "measurements".into(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "source,node,re,im" => {}
            _ => return Err(perr(1, "expected header `source,node,re,im`".into())),
        }
        let mut traces: Vec<Vec<Complex64>> = Vec::new();
        let mut nodes: Vec<usize> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(perr(i + 1, "expected 4 fields".into()));
            }
            let s: usize = f[0].parse().map_err(|e| perr(i + 1, format!("{e}")))?;
            let n: usize = f[1].parse().map_err(|e| perr(i + 1, format!("{e}")))?;
            let re: f64 = f[2].parse().map_err(|e| perr(i + 1, format!("{e}")))?;
            let im: f64 = f[3].parse().map_err(|e| perr(i + 1, format!("{e}")))?;
            if s == traces.len() {
                traces.push(Vec::new());
            } else if s + 1 != traces.len() {
                return Err(perr(i + 1, "sources must appear in order".into()));
            }
            if s == 0 {
                nodes.push(n);
            } else if nodes.get(traces[s].len()) != Some(&n) {
                return Err(perr(i + 1, "node order differs between sources".into()));
            }
            traces[s].push(Complex64::new(re, im));
        }
        if traces.iter().any(|t| t.len() != nodes.len()) {
            return Err(perr(0, "ragged source blocks".into()));
        }
        Ok(MeasurementSet {
            boundary_nodes: nodes,
            traces,
            noise_sigma: None,
        })
    }
}

/// Sidecar record written next to a measurement CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub wavenumber: f64,
    pub sources: String,
    pub source_count: usize,
    pub boundary_nodes: usize,
    pub flattening_order: String,
    pub noise_model: String,
    pub noise_level: f64,
    pub noise_norm: f64,
}

pub fn write_measurements(
    set: &MeasurementSet,
    meta: &MeasurementMeta,
    csv_path: impl AsRef<Path>,
) -> Result<()> {
    let csv_path = csv_path.as_ref();
    std::fs::write(csv_path, set.to_csv()).map_err(|e| Error::io(csv_path, e))?;
    let meta_path = csv_path.with_extension("meta.json");
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    if let Some(sigma) = &set.noise_sigma {
        let path = csv_path.with_extension("sigma.csv");
        let mut s = String::from("index,sigma\n");
        for (i, v) in sigma.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:e}");
        }
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_measurements(csv_path: impl AsRef<Path>) -> Result<(MeasurementSet, MeasurementMeta)> {
    let csv_path = csv_path.as_ref();
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut set = MeasurementSet::from_csv(&text)?;
    let sigma_path = csv_path.with_extension("sigma.csv");
    if sigma_path.exists() {
        let text = std::fs::read_to_string(&sigma_path).map_err(|e| Error::io(&sigma_path, e))?;
        let sigma = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        path: sigma_path.display().to_string(),
                        line: i + 2,
                        msg: "expected `index,sigma`".into(),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if sigma.len() != set.flat_len() {
            return Err(Error::Dimension {
                what: "noise sigma",
                expected: set.flat_len(),
                got: sigma.len(),
            });
        }
        set.noise_sigma = Some(sigma);
    }
    let meta_path = csv_path.with_extension("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = serde_json::from_str(&meta_text).map_err(|e| Error::Config(e.to_string()))?;
    Ok((set, meta))
}

/// Forward solver bound to one mesh and source bank. Reuses the sparse
/// profile across parameter updates.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub mesh: Mesh,
    pub wavenumber: f64,
    pub sources: SourceBank,
    template: SkylineMatrix,
    loads: Vec<Vec<Complex64>>,
}

impl ForwardModel {
    pub fn new(mesh: Mesh, wavenumber: f64, sources: SourceBank) -> Result<Self> {
        sources.validate(&mesh)?;
        let template = SkylineMatrix::with_graph(&node_graph(&mesh));
        let loads = sources.sources.iter().map(|s| neumann_load(&mesh, s)).collect();
        Ok(ForwardModel {
            mesh,
            wavenumber,
            sources,
            template,
            loads,
        })
    }

    pub fn assemble(&self, q: &ParameterField) -> Result<ForwardSystem> {
        assemble_into(&self.mesh, q, self.wavenumber, self.template.clone())
    }

    /// Nodal fields, one per source, against a single factorization.
    pub fn solve_all(&self, system: &ForwardSystem) -> Result<Vec<Vec<Complex64>>> {
        let zero = Complex64::new(0.0, 0.0);
        if self.loads.iter().any(|b| b.iter().any(|v| *v != zero)) {
            system.factorization()?;
        }
        self.loads
            .par_iter()
            .map(|b| {
                if b.iter().all(|v| *v == zero) {
                    Ok(b.clone())
                } else {
                    system.solve_load(b)
                }
            })
            .collect()
    }

    pub fn measurement_count(&self) -> usize {
        2 * self.sources.len() * self.mesh.boundary_nodes().len()
    }

    pub fn forward_map(&self, q: &ParameterField) -> Result<MeasurementSet> {
        let system = self.assemble(q)?;
        let fields = self.solve_all(&system)?;
        Ok(MeasurementSet {
            boundary_nodes: self.mesh.boundary_nodes().to_vec(),
            traces: fields.iter().map(|u| measure(u, &self.mesh)).collect(),
            noise_sigma: None,
        })
    }
}

/// Θ(q): one solve per source against a shared factorization.
pub fn forward_map(mesh: &Mesh, q: &ParameterField, k: f64, sources: &SourceBank) -> Result<MeasurementSet> {
    ForwardModel::new(mesh.clone(), k, sources.clone())?.forward_map(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_disk_mesh;
    use crate::phantom::OpticalValues;

    fn unit_triangle() -> Mesh {
        Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]], None).unwrap()
    }

    #[test]
    fn reference_element_stiffness() {
        let mesh = unit_triangle();
        let q = ParameterField::constant(1, OpticalValues { d: 1.0, mu: 0.0 });
        let sys = assemble(&mesh, &q, 0.0).unwrap();
        let want = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for a in 0..3 {
            for b in 0..3 {
                let v = sys.entry(a, b);
                assert!((v.re - want[a][b]).abs() < 1e-15, "({a},{b})");
                assert_eq!(v.im, 0.0);
            }
        }
        // μ = 0, k = 0: pure Neumann Laplacian is singular
        assert!(matches!(sys.factorization(), Err(Error::Solver(_))));
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let mesh = generate_disk_mesh(10.0, 120, 3).unwrap();
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues { d: 0.3, mu: 0.0 });
        let sys = assemble(&mesh, &q, 0.0).unwrap();
        for a in 0..mesh.node_count() {
            let s: f64 = (0..mesh.node_count()).map(|b| sys.entry(a, b).re).sum();
            assert!(s.abs() < 1e-12, "row {a}: {s}");
        }
    }

    #[test]
    fn imaginary_part_is_k_times_mass() {
        let mesh = generate_disk_mesh(10.0, 60, 3).unwrap();
        let bg = OpticalValues::default();
        let q = ParameterField::constant(mesh.triangle_count(), bg);
        let k = 0.37;
        let sys = assemble(&mesh, &q, k).unwrap();
        let massonly = assemble(
            &mesh,
            &ParameterField::constant(mesh.triangle_count(), OpticalValues { d: 1e-300, mu: 1.0 }),
            0.0,
        )
        .unwrap();
        for a in 0..mesh.node_count() {
            for b in 0..mesh.node_count() {
                let m = massonly.entry(a, b).re;
                assert!((sys.entry(a, b).im - k * m).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mesh = unit_triangle();
        let q = ParameterField::constant(1, OpticalValues { d: 0.0, mu: 0.1 });
        assert!(matches!(assemble(&mesh, &q, 0.0), Err(Error::Bounds(_))));
        let q = ParameterField::constant(1, OpticalValues { d: 1.0, mu: -0.1 });
        assert!(matches!(assemble(&mesh, &q, 0.0), Err(Error::Bounds(_))));
        let q = ParameterField::constant(1, OpticalValues { d: 1.0, mu: 0.1 });
        assert!(assemble(&mesh, &q, -1.0).is_err());
    }

    #[test]
    fn zero_source_gives_zero_field() {
        let mesh = generate_disk_mesh(10.0, 60, 3).unwrap();
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues::default());
        let sys = assemble(&mesh, &q, 0.0).unwrap();
        let src = Source {
            label: "zero".into(),
            edge_flux: vec![0.0; mesh.boundary_edges().len()],
        };
        let u = solve_forward(&sys, &mesh, &src).unwrap();
        assert!(u.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn residual_and_reciprocity() {
        let mesh = generate_disk_mesh(25.0, 400, 9).unwrap();
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues::default());
        let bank = SourceBank::trigonometric(&mesh, 4, 1.0, [0.0, 0.0]);
        let sys = assemble(&mesh, &q, default_wavenumber()).unwrap();
        let us: Vec<_> = bank
            .sources
            .iter()
            .map(|s| solve_forward(&sys, &mesh, s).unwrap())
            .collect();
        for (s, u) in bank.sources.iter().zip(&us) {
            assert!(sys.relative_residual(u, &neumann_load(&mesh, s)) <= 1e-10);
        }
        // ⟨f₂, γ₀u₁⟩ = bᵀ₂u₁ = bᵀ₁u₂ by symmetry of A
        let b: Vec<_> = bank.sources.iter().map(|s| neumann_load(&mesh, s)).collect();
        for (i, j) in [(0, 1), (0, 3), (2, 3)] {
            let lhs: Complex64 = b[j].iter().zip(&us[i]).map(|(x, y)| x * y).sum();
            let rhs: Complex64 = b[i].iter().zip(&us[j]).map(|(x, y)| x * y).sum();
            let scale = lhs.norm().max(rhs.norm()).max(1e-300);
            assert!((lhs - rhs).norm() / scale < 1e-8, "{i},{j}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn measurement_layout() {
        let mesh = generate_disk_mesh(10.0, 60, 3).unwrap();
        let u = vec![Complex64::new(2.5, -1.0); mesh.node_count()];
        let tr = measure(&u, &mesh);
        assert_eq!(tr.len(), mesh.boundary_nodes().len());
        assert!(tr.iter().all(|z| *z == Complex64::new(2.5, -1.0)));
        assert_eq!(measure(&u, &mesh), tr);

        let set = MeasurementSet {
            boundary_nodes: vec![7, 9],
            traces: vec![
                vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, 4.0)],
                vec![Complex64::new(5.0, 6.0), Complex64::new(7.0, 8.0)],
            ],
            noise_sigma: None,
        };
        assert_eq!(set.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let back = MeasurementSet::from_flat(vec![7, 9], &set.flatten()).unwrap();
        assert_eq!(back, set);
        assert_eq!(MeasurementSet::from_csv(&set.to_csv()).unwrap(), set);
    }

    #[test]
    fn forward_map_linear_in_source_and_deterministic() {
        let mesh = generate_disk_mesh(25.0, 300, 1).unwrap();
        let q = ParameterField::constant(mesh.triangle_count(), OpticalValues::default());
        let k = default_wavenumber();
        let bank = SourceBank::trigonometric(&mesh, 3, 1.0, [0.0, 0.0]);
        let g1 = forward_map(&mesh, &q, k, &bank).unwrap();
        let g2 = forward_map(&mesh, &q, k, &bank.scaled(2.0)).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
        assert_eq!(forward_map(&mesh, &q, k, &bank).unwrap(), g1);
        assert_eq!(g1.flat_len(), 2 * 3 * mesh.boundary_nodes().len());

        let zero = SourceBank {
            description: "zero".into(),
            sources: vec![Source {
                label: "0".into(),
                edge_flux: vec![0.0; mesh.boundary_edges().len()],
            }],
        };
        assert!(forward_map(&mesh, &q, k, &zero).unwrap().flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn higher_absorption_lowers_trace_energy() {
        let mesh = generate_disk_mesh(25.0, 300, 1).unwrap();
        let bank = SourceBank {
            description: "positive".into(),
            sources: vec![Source {
                label: "1".into(),
                edge_flux: vec![1.0; mesh.boundary_edges().len()],
            }],
        };
        let k = default_wavenumber();
        let mut last = f64::INFINITY;
        for mu in [0.01, 0.02, 0.04, 0.08] {
            let q = ParameterField::constant(mesh.triangle_count(), OpticalValues { d: 0.16, mu });
            let e: f64 = forward_map(&mesh, &q, k, &bank).unwrap().flatten().iter().map(|v| v * v).sum();
            assert!(e < last);
            last = e;
        }
    }

    #[test]
    fn default_wavenumber_value() {
        assert!((default_wavenumber() - 2.936e-3).abs() < 1e-6);
    }
}
