//! Planar triangular meshes.
//!
//! A [`Mesh`] is immutable once built. Construction validates connectivity,
//! fixes clockwise triangles and derives the boundary from edge multiplicity,
//! so every `Mesh` value in the program satisfies:
//!
//! * all triangles have strictly positive signed area,
//! * every edge is shared by one (boundary) or two (interior) triangles,
//! * the boundary edges close into one or more loops.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Smallest signed area accepted for a triangle, relative to the squared
/// bounding-box diagonal of the mesh.
const DEGENERATE_AREA_REL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    /// Oriented as in the owning (counter-clockwise) triangle.
    boundary_edges: Vec<[usize; 2]>,
    region_labels: Option<Vec<i32>>,
    /// Boundary nodes in canonical loop order.
    boundary_nodes: Vec<usize>,
    /// `boundary_node_position[n]` is the index of node `n` in `boundary_nodes`.
    boundary_node_position: Vec<Option<usize>>,
    /// Interior edges as `(tri_a, tri_b, [node_i, node_j])` with `tri_a < tri_b`.
    interior_edges: Vec<(usize, usize, [usize; 2])>,
}

/// Interior-edge adjacency between triangles, with shared edge lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeAdjacency {
    pub triangle_count: usize,
    pub entries: Vec<AdjacentPair>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacentPair {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

impl Mesh {
    /// Builds a mesh from raw node and triangle lists.
    ///
    /// Clockwise triangles are reoriented. Degenerate triangles, out of range
    /// indices and non-manifold edges are rejected.
    pub fn new(
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        region_labels: Option<Vec<i32>>,
    ) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::InvalidMesh {
                entity: "mesh",
                index: 0,
                reason: "no triangles".into(),
            });
        }
        if let Some(labels) = &region_labels {
            if labels.len() != triangles.len() {
                return Err(Error::Dimension {
                    what: "region labels",
                    expected: triangles.len(),
                    got: labels.len(),
                });
            }
        }
        for (i, p) in nodes.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::InvalidMesh {
                    entity: "node",
                    index: i,
                    reason: "non-finite coordinate".into(),
                });
            }
        }

        let scale = bbox_diag_sq(&nodes).max(f64::MIN_POSITIVE);
        let mut triangles = triangles;
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in tri.iter() {
                if v >= nodes.len() {
                    return Err(Error::InvalidMesh {
                        entity: "triangle",
                        index: t,
                        reason: format!("node index {v} out of range (n = {})", nodes.len()),
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh {
                    entity: "triangle",
                    index: t,
                    reason: "repeated node".into(),
                });
            }
            let a = signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            if a.abs() <= DEGENERATE_AREA_REL * scale {
                return Err(Error::InvalidMesh {
                    entity: "triangle",
                    index: t,
                    reason: "zero area".into(),
                });
            }
            if a < 0.0 {
                tri.swap(1, 2);
            }
        }

        // edge key -> owning (triangle, oriented edge)
        let mut edges: BTreeMap<(usize, usize), Vec<(usize, [usize; 2])>> = BTreeMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (i, j) = (tri[k], tri[(k + 1) % 3]);
                edges.entry(key(i, j)).or_default().push((t, [i, j]));
            }
        }

        let mut boundary_edges = Vec::new();
        let mut interior_edges = Vec::new();
        for (&(i, j), owners) in &edges {
            match owners.as_slice() {
                [(_, e)] => boundary_edges.push(*e),
                [(ta, ea), (tb, eb)] => {
                    if ea == eb {
                        return Err(Error::InvalidMesh {
                            entity: "triangle",
                            index: *tb,
                            reason: format!(
                                "edge ({i}, {j}) traversed in the same direction as triangle {ta}"
                            ),
                        });
                    }
                    interior_edges.push(((*ta).min(*tb), (*ta).max(*tb), [i, j]));
                }
                _ => {
                    return Err(Error::InvalidMesh {
                        entity: "triangle",
                        index: owners[2].0,
                        reason: format!("edge ({i}, {j}) shared by more than two triangles"),
                    })
                }
            }
        }

        let boundary_nodes = boundary_loops(nodes.len(), &boundary_edges)?;
        let mut boundary_node_position = vec![None; nodes.len()];
        for (pos, &n) in boundary_nodes.iter().enumerate() {
            boundary_node_position[n] = Some(pos);
        }

        Ok(Mesh {
            nodes,
            triangles,
            boundary_edges,
            region_labels,
            boundary_nodes,
            boundary_node_position,
            interior_edges,
        })
    }

    /// Like [`Mesh::new`], additionally cross-checking a stored boundary edge
    /// list against the one derived from connectivity.
    pub fn with_stored_boundary(
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        region_labels: Option<Vec<i32>>,
        stored: &[[usize; 2]],
    ) -> Result<Self> {
        let mesh = Mesh::new(nodes, triangles, region_labels)?;
        let derived: std::collections::BTreeSet<_> =
            mesh.boundary_edges.iter().map(|e| key(e[0], e[1])).collect();
        for (i, e) in stored.iter().enumerate() {
            if e[0] >= mesh.nodes.len() || e[1] >= mesh.nodes.len() {
                return Err(Error::InvalidMesh {
                    entity: "boundary edge",
                    index: i,
                    reason: "node index out of range".into(),
                });
            }
            if !derived.contains(&key(e[0], e[1])) {
                return Err(Error::InvalidMesh {
                    entity: "boundary edge",
                    index: i,
                    reason: format!("({}, {}) is not a boundary edge of the triangulation", e[0], e[1]),
                });
            }
        }
        if stored.len() != derived.len() {
            return Err(Error::InvalidMesh {
                entity: "boundary",
                index: stored.len(),
                reason: format!(
                    "stored boundary has {} edges, connectivity implies {}",
                    stored.len(),
                    derived.len()
                ),
            });
        }
        Ok(mesh)
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    pub fn region_labels(&self) -> Option<&[i32]> {
        self.region_labels.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn interior_edge_count(&self) -> usize {
        self.interior_edges.len()
    }

    /// Boundary nodes in canonical order: loops sorted by their smallest node
    /// index, each loop starting at that node and walking counter-clockwise.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn boundary_position(&self, node: usize) -> Option<usize> {
        self.boundary_node_position.get(node).copied().flatten()
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        self.boundary_position(node).is_some()
    }

    pub fn vertices(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.vertices(t);
        signed_area(a, b, c)
    }

    pub fn areas(&self) -> Vec<f64> {
        (0..self.triangles.len()).map(|t| self.area(t)).collect()
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.vertices(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn total_area(&self) -> f64 {
        self.areas().iter().sum()
    }

    /// Splits every triangle into four through its edge midpoints. New nodes
    /// on boundary edges are passed through `snap`, which lets curved domains
    /// keep their boundary on the true curve.
    pub fn refine_uniform(&self, snap: impl Fn(Point) -> Point) -> Result<Mesh> {
        let mut nodes = self.nodes.clone();
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let boundary: std::collections::BTreeSet<_> =
            self.boundary_edges.iter().map(|e| key(e[0], e[1])).collect();
        let mut mid = |i: usize, j: usize, nodes: &mut Vec<Point>| -> usize {
            *midpoint.entry(key(i, j)).or_insert_with(|| {
                let (p, q) = (nodes[i], nodes[j]);
                let mut m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
                if boundary.contains(&key(i, j)) {
                    m = snap(m);
                }
                nodes.push(m);
                nodes.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = mid(a, b, &mut nodes);
            let bc = mid(b, c, &mut nodes);
            let ca = mid(c, a, &mut nodes);
            triangles.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        let labels = self
            .region_labels
            .as_ref()
            .map(|l| l.iter().flat_map(|&x| [x; 4]).collect());
        Mesh::new(nodes, triangles, labels)
    }
}

fn key(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn bbox_diag_sq(nodes: &[Point]) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in nodes {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if nodes.is_empty() {
        return 0.0;
    }
    (hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)
}

fn boundary_loops(node_count: usize, edges: &[[usize; 2]]) -> Result<Vec<usize>> {
    let mut next = vec![usize::MAX; node_count];
    for (i, e) in edges.iter().enumerate() {
        if next[e[0]] != usize::MAX {
            return Err(Error::InvalidMesh {
                entity: "boundary edge",
                index: i,
                reason: format!("node {} has two outgoing boundary edges (pinched boundary)", e[0]),
            });
        }
        next[e[0]] = e[1];
    }
    let mut starts: Vec<usize> = edges.iter().map(|e| e[0]).collect();
    starts.sort_unstable();
    let mut visited = vec![false; node_count];
    let mut order = Vec::with_capacity(edges.len());
    for s in starts {
        if visited[s] {
            continue;
        }
        let mut n = s;
        loop {
            visited[n] = true;
            order.push(n);
            n = next[n];
            if n == usize::MAX {
                return Err(Error::InvalidMesh {
                    entity: "boundary node",
                    index: *order.last().unwrap_or(&0),
                    reason: "boundary does not close into a loop".into(),
                });
            }
            if n == s {
                break;
            }
            if visited[n] {
                return Err(Error::InvalidMesh {
                    entity: "boundary node",
                    index: n,
                    reason: "boundary loops intersect".into(),
                });
            }
        }
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

/// Reads a mesh in the `dotmesh 1` text format.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text, &path.display().to_string())
}

pub fn parse_mesh(text: &str, origin: &str) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    if header.split_whitespace().collect::<Vec<_>>() != ["dotmesh", "1"] {
        return Err(err(ln, format!("expected header `dotmesh 1`, found `{header}`")));
    }

    let mut nodes = Vec::new();
    let mut triangles = Vec::new();
    let mut labels: Vec<i32> = Vec::new();
    let mut boundary: Option<Vec<[usize; 2]>> = None;
    let mut saw_nodes = false;
    let mut saw_triangles = false;

    while let Some((ln, line)) = lines.next() {
        let mut it = line.split_whitespace();
        let section = it.next().unwrap_or_default();
        let count: usize = it
            .next()
            .ok_or_else(|| err(ln, format!("section `{section}` missing count")))?
            .parse()
            .map_err(|e| err(ln, format!("bad count: {e}")))?;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let (rl, row) = lines
                .next()
                .ok_or_else(|| err(ln, format!("section `{section}` truncated")))?;
            rows.push((rl, row.split_whitespace().collect::<Vec<_>>()));
        }
        match section {
            "nodes" => {
                saw_nodes = true;
                for (rl, f) in rows {
                    if f.len() != 2 {
                        return Err(err(rl, "node line needs `x y`".into()));
                    }
                    let x = f[0].parse().map_err(|e| err(rl, format!("{e}")))?;
                    let y = f[1].parse().map_err(|e| err(rl, format!("{e}")))?;
                    nodes.push([x, y]);
                }
            }
            "triangles" => {
                saw_triangles = true;
                for (rl, f) in rows {
                    if f.len() != 3 && f.len() != 4 {
                        return Err(err(rl, "triangle line needs `i j k [label]`".into()));
                    }
                    let mut t = [0usize; 3];
                    for d in 0..3 {
                        t[d] = f[d].parse().map_err(|e| err(rl, format!("{e}")))?;
                    }
                    triangles.push(t);
                    if f.len() == 4 {
                        labels.push(f[3].parse().map_err(|e| err(rl, format!("{e}")))?);
                    }
                }
            }
            "boundary" => {
                let mut b = Vec::with_capacity(count);
                for (rl, f) in rows {
                    if f.len() != 2 {
                        return Err(err(rl, "boundary line needs `i j`".into()));
                    }
                    let i = f[0].parse().map_err(|e| err(rl, format!("{e}")))?;
                    let j = f[1].parse().map_err(|e| err(rl, format!("{e}")))?;
                    b.push([i, j]);
                }
                boundary = Some(b);
            }
            other => return Err(err(ln, format!("unknown section `{other}`"))),
        }
    }
    if !saw_nodes || !saw_triangles {
        return Err(err(1, "missing `nodes` or `triangles` section".into()));
    }
    let labels = match labels.len() {
        0 => None,
        n if n == triangles.len() => Some(labels),
        _ => return Err(err(1, "region labels must be given for all triangles or none".into())),
    };
    match boundary {
        Some(b) => Mesh::with_stored_boundary(nodes, triangles, labels, &b),
        None => Mesh::new(nodes, triangles, labels),
    }
}

pub fn format_mesh(mesh: &Mesh) -> String {
    let mut s = String::from("dotmesh 1\n");
    let _ = writeln!(s, "nodes {}", mesh.nodes.len());
    for p in &mesh.nodes {
        let _ = writeln!(s, "{:?} {:?}", p[0], p[1]);
    }
    let _ = writeln!(s, "triangles {}", mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        match &mesh.region_labels {
            Some(l) => {
                let _ = writeln!(s, "{} {} {} {}", tri[0], tri[1], tri[2], l[t]);
            }
            None => {
                let _ = writeln!(s, "{} {} {}", tri[0], tri[1], tri[2]);
            }
        }
    }
    let _ = writeln!(s, "boundary {}", mesh.boundary_edges.len());
    for e in &mesh.boundary_edges {
        let _ = writeln!(s, "{} {}", e[0], e[1]);
    }
    s
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_mesh(mesh)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Disk generation
// ---------------------------------------------------------------------------

/// Fraction of the local node spacing used for interior jitter.
const JITTER: f64 = 0.15;

/// Generates a disk mesh centred at the origin from concentric node rings.
///
/// With `n` rings and roughly `c·r` nodes on ring `r`, the zipper between
/// consecutive rings yields about `c·n²` triangles; `n` and `c` are picked so
/// that this matches `target_triangle_count`. Interior nodes are jittered
/// from the seed; boundary nodes lie exactly on the circle.
pub fn generate_disk_mesh(radius: f64, target_triangle_count: usize, seed: u64) -> Result<Mesh> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::MeshGeneration(format!("radius must be positive, got {radius}")));
    }
    if target_triangle_count < 4 {
        return Err(Error::MeshGeneration(format!(
            "target triangle count {target_triangle_count} is below the minimum of 4"
        )));
    }
    let target = target_triangle_count as f64;
    let rings = ((target / 6.0).sqrt().round() as usize).max(1);
    let per_ring = target / (rings * rings) as f64;
    let ring_sizes: Vec<usize> = (1..=rings)
        .map(|r| ((per_ring * r as f64).round() as usize).max(3))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = JITTER;
    for _ in 0..8 {
        if let Some(mesh) = build_rings(radius, &ring_sizes, jitter, &mut rng) {
            return Mesh::new(mesh.0, mesh.1, None);
        }
        jitter *= 0.5;
    }
    build_rings(radius, &ring_sizes, 0.0, &mut rng)
        .ok_or_else(|| Error::MeshGeneration("ring triangulation produced inverted triangles".into()))
        .and_then(|(n, t)| Mesh::new(n, t, None))
}

#[allow(clippy::type_complexity)]
fn build_rings(
    radius: f64,
    ring_sizes: &[usize],
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Point>, Vec<[usize; 3]>)> {
    let rings = ring_sizes.len();
    let dr = radius / rings as f64;
    let mut nodes = vec![[0.0, 0.0]];
    // (first node index, angles) per ring
    let mut ring_nodes: Vec<(usize, Vec<f64>)> = Vec::with_capacity(rings);
    for (r0, &count) in ring_sizes.iter().enumerate() {
        let r = r0 + 1;
        let spacing = 2.0 * PI / count as f64;
        let offset = if r % 2 == 0 { 0.5 } else { 0.0 };
        let start = nodes.len();
        let mut angles = Vec::with_capacity(count);
        for k in 0..count {
            let mut theta = spacing * (k as f64 + offset);
            let mut rad = dr * r as f64;
            if r < rings && jitter > 0.0 {
                theta += spacing * jitter * rng.random_range(-1.0..1.0);
                rad += dr * jitter * rng.random_range(-1.0..1.0);
            }
            angles.push(theta);
            nodes.push([rad * theta.cos(), rad * theta.sin()]);
        }
        ring_nodes.push((start, angles));
    }

    let mut triangles = Vec::new();
    let (first, n1) = (ring_nodes[0].0, ring_sizes[0]);
    for k in 0..n1 {
        triangles.push([0, first + k, first + (k + 1) % n1]);
    }
    for w in ring_nodes.windows(2) {
        zip_rings(&w[0], &w[1], &mut triangles);
    }

    let ok = triangles
        .iter()
        .all(|t| signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) > 0.0);
    ok.then_some((nodes, triangles))
}

/// Triangulates the annulus between two node rings by advancing along
/// whichever ring has the next node at smaller angle.
fn zip_rings(inner: &(usize, Vec<f64>), outer: &(usize, Vec<f64>), out: &mut Vec<[usize; 3]>) {
    let (ia, ang_in) = (inner.0, &inner.1);
    let (oa, ang_out) = (outer.0, &outer.1);
    let (ni, no) = (ang_in.len(), ang_out.len());
    let base = ang_in[0];
    let wrap = |a: f64| {
        let mut d = (a - base) % (2.0 * PI);
        if d < -PI {
            d += 2.0 * PI;
        } else if d >= PI {
            d -= 2.0 * PI;
        }
        d
    };
    // outer node closest in angle to inner node 0
    let j0 = (0..no)
        .min_by(|&a, &b| wrap(ang_out[a]).abs().total_cmp(&wrap(ang_out[b]).abs()))
        .unwrap_or(0);
    let a_out = cumulative(wrap(ang_out[j0]), (0..no).map(|s| ang_out[(j0 + s) % no]));
    let a_in = cumulative(0.0, (0..ni).map(|s| ang_in[s]));
    let inner_node = |s: usize| ia + s % ni;
    let outer_node = |s: usize| oa + (j0 + s) % no;

    let (mut i, mut j) = (0usize, 0usize);
    while i < ni || j < no {
        let advance_inner = if i == ni {
            false
        } else if j == no {
            true
        } else {
            a_in[i + 1] < a_out[j + 1]
        };
        if advance_inner {
            out.push([inner_node(i), outer_node(j), inner_node(i + 1)]);
            i += 1;
        } else {
            out.push([inner_node(i), outer_node(j), outer_node(j + 1)]);
            j += 1;
        }
    }
}

/// Unwraps a cyclic angle sequence into a strictly increasing one starting at
/// `first`, closing with `first + 2π`.
fn cumulative(first: f64, angles: impl Iterator<Item = f64>) -> Vec<f64> {
    let angles: Vec<f64> = angles.collect();
    let mut out = Vec::with_capacity(angles.len() + 1);
    out.push(first);
    for w in angles.windows(2) {
        let step = (w[1] - w[0]).rem_euclid(2.0 * PI);
        out.push(out[out.len() - 1] + step);
    }
    out.push(first + 2.0 * PI);
    out
}

// ---------------------------------------------------------------------------
// Adjacency and field transfer
// ---------------------------------------------------------------------------

/// One entry per interior edge: the two triangles sharing it and its length.
pub fn edge_adjacency(mesh: &Mesh) -> EdgeAdjacency {
    let entries = mesh
        .interior_edges
        .iter()
        .map(|&(a, b, [i, j])| {
            let (p, q) = (mesh.nodes[i], mesh.nodes[j]);
            AdjacentPair {
                a,
                b,
                length: ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(),
            }
        })
        .collect();
    EdgeAdjacency {
        triangle_count: mesh.triangle_count(),
        entries,
    }
}

/// Uniform-grid point locator over a mesh's triangles.
pub struct TriangleLocator<'a> {
    mesh: &'a Mesh,
    origin: Point,
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl<'a> TriangleLocator<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in mesh.nodes() {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let side = ((mesh.triangle_count() as f64).sqrt().ceil() as usize).max(1);
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(f64::MIN_POSITIVE);
        let cell = extent / side as f64;
        let dims = [
            (((hi[0] - lo[0]) / cell).floor() as usize + 1).max(1),
            (((hi[1] - lo[1]) / cell).floor() as usize + 1).max(1),
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for t in 0..mesh.triangle_count() {
            let v = mesh.vertices(t);
            let (mut tl, mut th) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in v {
                for d in 0..2 {
                    tl[d] = tl[d].min(p[d]);
                    th[d] = th[d].max(p[d]);
                }
            }
            let c0 = cell_index(tl, lo, cell, dims);
            let c1 = cell_index(th, lo, cell, dims);
            for cx in c0[0]..=c1[0] {
                for cy in c0[1]..=c1[1] {
                    buckets[cy * dims[0] + cx].push(t);
                }
            }
        }
        TriangleLocator {
            mesh,
            origin: lo,
            cell,
            dims,
            buckets,
        }
    }

    /// Triangle containing `p` (boundary inclusive), lowest index on ties.
    pub fn locate(&self, p: Point) -> Option<usize> {
        let (lo, hi) = (self.origin, [
            self.origin[0] + self.cell * self.dims[0] as f64,
            self.origin[1] + self.cell * self.dims[1] as f64,
        ]);
        if p[0] < lo[0] - self.cell || p[1] < lo[1] - self.cell || p[0] > hi[0] || p[1] > hi[1] {
            return None;
        }
        let c = cell_index(p, self.origin, self.cell, self.dims);
        self.buckets[c[1] * self.dims[0] + c[0]]
            .iter()
            .copied()
            .filter(|&t| contains(self.mesh.vertices(t), p))
            .min()
    }

    /// Triangle nearest to `p` in Euclidean distance (containing triangles
    /// have distance zero).
    pub fn nearest(&self, p: Point) -> usize {
        if let Some(t) = self.locate(p) {
            return t;
        }
        (0..self.mesh.triangle_count())
            .map(|t| (t, point_triangle_distance_sq(p, self.mesh.vertices(t))))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(t, _)| t)
            .unwrap_or(0)
    }
}

fn cell_index(p: Point, lo: Point, cell: f64, dims: [usize; 2]) -> [usize; 2] {
    let mut c = [0usize; 2];
    for d in 0..2 {
        let x = ((p[d] - lo[d]) / cell).floor();
        c[d] = if x < 0.0 { 0 } else { (x as usize).min(dims[d] - 1) };
    }
    c
}

fn contains(v: [Point; 3], p: Point) -> bool {
    let area = signed_area(v[0], v[1], v[2]);
    let tol = -1e-12 * area.abs();
    signed_area(v[0], v[1], p) >= tol
        && signed_area(v[1], v[2], p) >= tol
        && signed_area(v[2], v[0], p) >= tol
}

fn point_segment_distance_sq(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    d[0] * d[0] + d[1] * d[1]
}

fn point_triangle_distance_sq(p: Point, v: [Point; 3]) -> f64 {
    if contains(v, p) {
        return 0.0;
    }
    (0..3)
        .map(|k| point_segment_distance_sq(p, v[k], v[(k + 1) % 3]))
        .fold(f64::INFINITY, f64::min)
}

/// Samples a piecewise-constant field from `src` at the centroids of `dst`.
/// Centroids outside `src` take the value of the nearest source triangle.
pub fn transfer_field(src: &Mesh, field: &[f64], dst: &Mesh) -> Result<Vec<f64>> {
    if src.triangle_count() == 0 {
        return Err(Error::InvalidArgument("empty source mesh".into()));
    }
    if field.len() != src.triangle_count() {
        return Err(Error::Dimension {
            what: "source field",
            expected: src.triangle_count(),
            got: field.len(),
        });
    }
    let locator = TriangleLocator::new(src);
    Ok((0..dst.triangle_count())
        .map(|t| field[locator.nearest(dst.centroid(t))])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_triangle() {
        let m = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]], None).unwrap();
        assert_eq!(m.triangle_count(), 1);
        assert_eq!(m.boundary_edges().len(), 3);
        assert_eq!(m.boundary_nodes(), &[0, 1, 2]);
        assert!(edge_adjacency(&m).entries.is_empty());
    }

    #[test]
    fn shared_edge_counts() {
        let m = two_triangles();
        assert_eq!(m.boundary_edges().len(), 4);
        assert_eq!(m.interior_edge_count(), 1);
        let adj = edge_adjacency(&m);
        assert_eq!(adj.entries.len(), 1);
        assert_eq!((adj.entries[0].a, adj.entries[0].b), (0, 1));
        assert!((adj.entries[0].length - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn clockwise_triangle_is_reoriented() {
        let m = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 2, 1]], None).unwrap();
        assert!(m.area(0) > 0.0);
        assert!((m.area(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_index_and_degenerate() {
        let e = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0]], vec![[0, 1, 2]], None).unwrap_err();
        assert!(matches!(e, Error::InvalidMesh { entity: "triangle", index: 0, .. }));
        let e = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap_err();
        assert!(e.to_string().contains("zero area"));
    }

    #[test]
    fn rejects_non_manifold_edge() {
        let e = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, -1.0], [0.5, 2.0]],
            vec![[0, 1, 2], [0, 3, 1], [0, 1, 4]],
            None,
        )
        .unwrap_err();
        assert!(matches!(e, Error::InvalidMesh { .. }));
    }

    #[test]
    fn parse_roundtrip_and_comments() {
        let text = "# a comment\ndotmesh 1\nnodes 4\n0 0\n1 0 # trailing\n1 1\n0 1\n\ntriangles 2\n0 1 2\n0 2 3\nboundary 4\n0 1\n1 2\n2 3\n3 0\n";
        let m = parse_mesh(text, "inline").unwrap();
        assert_eq!(m, two_triangles());
        let again = parse_mesh(&format_mesh(&m), "again").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn parse_rejects_inconsistent_boundary() {
        let text = "dotmesh 1\nnodes 4\n0 0\n1 0\n1 1\n0 1\ntriangles 2\n0 1 2\n0 2 3\nboundary 2\n0 1\n0 2\n";
        let e = parse_mesh(text, "x").unwrap_err();
        assert!(matches!(e, Error::InvalidMesh { entity: "boundary edge", index: 1, .. }));
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = parse_mesh("dotmesh 1\nnodes 1\n0 zero\n", "f").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        assert!(parse_mesh("meshfile 2\n", "f").is_err());
    }

    #[test]
    fn disk_counts_match_requested_sizes() {
        for (target, lo, hi) in [(541, 433, 649), (2097, 1678, 2516)] {
            let m = generate_disk_mesh(25.0, target, 7).unwrap();
            let t = m.triangle_count();
            assert!((lo..=hi).contains(&t), "target {target} gave {t}");
        }
    }

    #[test]
    fn disk_is_deterministic_and_round() {
        let a = generate_disk_mesh(25.0, 541, 3).unwrap();
        let b = generate_disk_mesh(25.0, 541, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_disk_mesh(25.0, 541, 4).unwrap();
        assert_ne!(a.nodes(), c.nodes());
        for &n in a.boundary_nodes() {
            let p = a.nodes()[n];
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 25.0).abs() <= 0.02 * 25.0);
        }
        assert_eq!(a.boundary_nodes().len(), a.boundary_edges().len());
    }

    #[test]
    fn small_targets() {
        assert!(generate_disk_mesh(1.0, 3, 0).is_err());
        assert!(generate_disk_mesh(0.0, 10, 0).is_err());
        let m = generate_disk_mesh(1.0, 4, 0).unwrap();
        assert_eq!(m.triangle_count(), 4);
    }

    #[test]
    fn refinement_quadruples() {
        let m = generate_disk_mesh(1.0, 60, 1).unwrap();
        let r = m.refine_uniform(|p| {
            let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
            [p[0] / n, p[1] / n]
        })
        .unwrap();
        assert_eq!(r.triangle_count(), 4 * m.triangle_count());
        assert_eq!(r.boundary_edges().len(), 2 * m.boundary_edges().len());
    }

    #[test]
    fn transfer_identity_and_constant() {
        let fine = generate_disk_mesh(25.0, 800, 1).unwrap();
        let coarse = generate_disk_mesh(25.0, 200, 2).unwrap();
        let vals: Vec<f64> = (0..fine.triangle_count()).map(|t| t as f64).collect();
        assert_eq!(transfer_field(&fine, &vals, &fine).unwrap(), vals);
        let c = vec![3.5; fine.triangle_count()];
        assert!(transfer_field(&fine, &c, &coarse).unwrap().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn locator_nearest_outside() {
        let m = two_triangles();
        let loc = TriangleLocator::new(&m);
        assert_eq!(loc.locate([0.9, 0.1]), Some(0));
        assert_eq!(loc.locate([0.1, 0.9]), Some(1));
        assert_eq!(loc.locate([5.0, 5.0]), None);
        assert_eq!(loc.nearest([2.0, 0.1]), 0);
        assert_eq!(loc.nearest([-1.0, 0.9]), 1);
    }
}
