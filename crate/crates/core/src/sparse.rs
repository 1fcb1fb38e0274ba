//! Skyline (variable-band) storage and LDLᵀ factorization for complex
//! symmetric matrices.
//!
//! The FEM system is symmetric but not Hermitian, so the factorization uses
//! plain transposes without conjugation. Rows are renumbered with reverse
//! Cuthill–McKee to keep the profile small. No pivoting is done: the real
//! part of the system is positive definite for positive absorption, which
//! keeps the pivots away from zero.

use std::collections::VecDeque;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Lower profile of a symmetric matrix in a permuted numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct SkylineMatrix {
    n: usize,
    /// `perm[original] = permuted`.
    perm: Vec<usize>,
    /// First stored column of each permuted row.
    first: Vec<usize>,
    /// Offset of each permuted row in `values`; row `i` holds columns
    /// `first[i]..=i`.
    start: Vec<usize>,
    values: Vec<Complex64>,
}

impl SkylineMatrix {
    /// Builds an all-zero matrix whose profile covers the given symmetric
    /// sparsity graph (adjacency lists over the original numbering).
    pub fn with_graph(adjacency: &[Vec<usize>]) -> Self {
        let n = adjacency.len();
        let perm = reverse_cuthill_mckee(adjacency);
        let mut first: Vec<usize> = (0..n).collect();
        for (a, nbrs) in adjacency.iter().enumerate() {
            let pa = perm[a];
            for &b in nbrs {
                let pb = perm[b];
                if pb < pa {
                    first[pa] = first[pa].min(pb);
                }
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for i in 0..n {
            start.push(total);
            total += i - first[i] + 1;
        }
        start.push(total);
        SkylineMatrix {
            n,
            perm,
            first,
            start,
            values: vec![Complex64::new(0.0, 0.0); total],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn stored_entries(&self) -> usize {
        self.values.len()
    }

    fn slot(&self, a: usize, b: usize) -> Option<usize> {
        let (pa, pb) = (self.perm[a], self.perm[b]);
        let (i, j) = if pa >= pb { (pa, pb) } else { (pb, pa) };
        (j >= self.first[i]).then(|| self.start[i] + (j - self.first[i]))
    }

    /// Adds `v` to entry (a, b) and, by symmetry, (b, a). Indices are in the
    /// original numbering.
    pub fn add(&mut self, a: usize, b: usize, v: Complex64) {
        let s = self
            .slot(a, b)
            .unwrap_or_else(|| panic!("entry ({a}, {b}) outside the skyline profile"));
        self.values[s] += v;
    }

    pub fn get(&self, a: usize, b: usize) -> Complex64 {
        self.slot(a, b)
            .map_or(Complex64::new(0.0, 0.0), |s| self.values[s])
    }

    /// y = A x in the original numbering.
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut px = vec![Complex64::new(0.0, 0.0); self.n];
        for (a, &v) in x.iter().enumerate() {
            px[self.perm[a]] = v;
        }
        let mut py = vec![Complex64::new(0.0, 0.0); self.n];
        for i in 0..self.n {
            let row = &self.values[self.start[i]..self.start[i + 1]];
            let f = self.first[i];
            let last = row.len() - 1;
            let mut acc = row[last] * px[i];
            for (k, &v) in row[..last].iter().enumerate() {
                let j = f + k;
                acc += v * px[j];
                py[j] += v * px[i];
            }
            py[i] += acc;
        }
        (0..self.n).map(|a| py[self.perm[a]]).collect()
    }

    /// Complex-symmetric LDLᵀ factorization of the profile.
    pub fn factorize(&self) -> Result<SkylineLdlt> {
        let n = self.n;
        let mut l = self.values.clone();
        let mut diag = vec![Complex64::new(0.0, 0.0); n];
        let scale = (0..n)
            .map(|i| l[self.start[i + 1] - 1].norm())
            .fold(0.0f64, f64::max);
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            // Row i entries hold l_ik·d_k while being reduced, then l_ik.
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut acc = l[si + (j - fi)];
                for k in k0..j {
                    acc -= l[si + (k - fi)] * l[sj + (k - fj)];
                }
                l[si + (j - fi)] = acc;
            }
            let mut d = l[si + (i - fi)];
            for j in fi..i {
                let w = l[si + (j - fi)];
                let lij = w / diag[j];
                d -= w * lij;
                l[si + (j - fi)] = lij;
            }
            if !(d.norm() > 1e-13 * scale) || !d.re.is_finite() || !d.im.is_finite() {
                return Err(Error::Solver(format!(
                    "zero pivot at row {i} (|d| = {:e}); system is singular",
                    d.norm()
                )));
            }
            l[si + (i - fi)] = Complex64::new(1.0, 0.0);
            diag[i] = d;
        }
        Ok(SkylineLdlt {
            n,
            perm: self.perm.clone(),
            first: self.first.clone(),
            start: self.start.clone(),
            lower: l,
            diag,
        })
    }
}

/// Factor `P A Pᵀ = L D Lᵀ` with unit lower-triangular `L` in skyline form.
#[derive(Debug, Clone)]
pub struct SkylineLdlt {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    lower: Vec<Complex64>,
    diag: Vec<Complex64>,
}

impl SkylineLdlt {
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(b.len(), self.n, "right-hand side length");
        let mut y = vec![Complex64::new(0.0, 0.0); self.n];
        for (a, &v) in b.iter().enumerate() {
            y[self.perm[a]] = v;
        }
        for i in 0..self.n {
            let f = self.first[i];
            let row = &self.lower[self.start[i]..self.start[i + 1] - 1];
            let mut acc = y[i];
            for (k, &v) in row.iter().enumerate() {
                acc -= v * y[f + k];
            }
            y[i] = acc;
        }
        for i in 0..self.n {
            y[i] /= self.diag[i];
        }
        for i in (0..self.n).rev() {
            let f = self.first[i];
            let row = &self.lower[self.start[i]..self.start[i + 1] - 1];
            let yi = y[i];
            for (k, &v) in row.iter().enumerate() {
                y[f + k] -= v * yi;
            }
        }
        (0..self.n).map(|a| y[self.perm[a]]).collect()
    }
}

/// Reverse Cuthill–McKee ordering; returns `perm[original] = new`.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        // start each component from a minimum-degree node
        let Some(seed) = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (degree[v], v)) else {
            break;
        };
        let root = pseudo_peripheral(adjacency, seed);
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adjacency[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            nbrs.dedup();
            for w in nbrs {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    let mut perm = vec![0; n];
    for (new, &old) in order.iter().rev().enumerate() {
        perm[old] = new;
    }
    perm
}

fn pseudo_peripheral(adjacency: &[Vec<usize>], start: usize) -> usize {
    let mut root = start;
    let mut depth = 0;
    for _ in 0..8 {
        let (far, d) = farthest(adjacency, root);
        if d <= depth {
            break;
        }
        depth = d;
        root = far;
    }
    root
}

fn farthest(adjacency: &[Vec<usize>], root: usize) -> (usize, usize) {
    let mut dist = vec![usize::MAX; adjacency.len()];
    dist[root] = 0;
    let mut queue = VecDeque::from([root]);
    let mut best = (root, 0);
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                if dist[w] > best.1 || (dist[w] == best.1 && adjacency[w].len() < adjacency[best.0].len()) {
                    best = (w, dist[w]);
                }
                queue.push_back(w);
            }
        }
    }
    best
}
