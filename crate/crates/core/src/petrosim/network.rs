//! Voxel pore graph and the pressure solve on it.

use std::f64::consts::PI;

use super::edt::squared_distance_field;
use super::PetroError;
use crate::voxcore::{flat_index, Volume3D, PORE};

/// Pore voxels as nodes, 6-neighbour adjacencies as edges.
///
/// Conductances are geometric, `pi * r^4 / (8 * L)` in SI units with the
/// throat radius `r` the smaller endpoint radius and `L` the voxel edge;
/// dividing by viscosity gives the hydraulic conductance.
#[derive(Clone, Debug)]
pub struct PoreGraph {
    /// Flat voxel index of each node, ascending.
    pub voxel: Vec<usize>,
    /// Squared inscribed radius in voxel units; exact integers.
    pub radius_sq: Vec<i64>,
    /// `(a, b, conductance)` with `a < b`.
    pub edges: Vec<(u32, u32, f64)>,
    pub inlet: Vec<u32>,
    pub outlet: Vec<u32>,
    adj_start: Vec<usize>,
    adj: Vec<(u32, f64)>,
}

impl PoreGraph {
    /// Builds a graph from explicit parts. `radius_sq` is in squared voxel
    /// units and `voxel_size_m` scales conductances.
    pub fn from_parts(
        radius_sq: Vec<i64>,
        links: &[(u32, u32)],
        inlet: Vec<u32>,
        outlet: Vec<u32>,
        voxel_size_m: f64,
    ) -> Result<Self, PetroError> {
        let n = radius_sq.len();
        if radius_sq.iter().any(|&r| r <= 0) {
            return Err(PetroError::Invalid("node radii must be positive".into()));
        }
        let mut edges = Vec::with_capacity(links.len());
        for &(a, b) in links {
            if a == b || a as usize >= n || b as usize >= n {
                return Err(PetroError::Invalid(format!("bad edge ({a}, {b}) for {n} nodes")));
            }
            let r2 = radius_sq[a as usize].min(radius_sq[b as usize]);
            edges.push((a.min(b), a.max(b), throat_conductance(r2, voxel_size_m)));
        }
        if inlet.iter().chain(&outlet).any(|&i| i as usize >= n) {
            return Err(PetroError::Invalid("boundary node out of range".into()));
        }
        Ok(Self::assemble((0..n).collect(), radius_sq, edges, inlet, outlet))
    }

    fn assemble(
        voxel: Vec<usize>,
        radius_sq: Vec<i64>,
        edges: Vec<(u32, u32, f64)>,
        inlet: Vec<u32>,
        outlet: Vec<u32>,
    ) -> Self {
        let n = voxel.len();
        let mut deg = vec![0usize; n + 1];
        for &(a, b, _) in &edges {
            deg[a as usize + 1] += 1;
            deg[b as usize + 1] += 1;
        }
        for i in 0..n {
            deg[i + 1] += deg[i];
        }
        let mut fill = deg.clone();
        let mut adj = vec![(0u32, 0f64); deg[n]];
        for &(a, b, g) in &edges {
            adj[fill[a as usize]] = (b, g);
            fill[a as usize] += 1;
            adj[fill[b as usize]] = (a, g);
            fill[b as usize] += 1;
        }
        Self {
            voxel,
            radius_sq,
            edges,
            inlet,
            outlet,
            adj_start: deg,
            adj,
        }
    }

    pub fn node_count(&self) -> usize {
        self.voxel.len()
    }

    pub fn radius(&self, node: usize) -> f64 {
        (self.radius_sq[node] as f64).sqrt()
    }

    /// `(neighbour, conductance)` pairs of `node`.
    pub fn neighbours(&self, node: usize) -> &[(u32, f64)] {
        &self.adj[self.adj_start[node]..self.adj_start[node + 1]]
    }

    /// Connected components as a label per node.
    pub fn component_labels(&self) -> Vec<u32> {
        let n = self.node_count();
        let mut label = vec![u32::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if label[s] != u32::MAX {
                continue;
            }
            label[s] = next;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &(w, _) in self.neighbours(u) {
                    if label[w as usize] == u32::MAX {
                        label[w as usize] = next;
                        stack.push(w as usize);
                    }
                }
            }
            next += 1;
        }
        label
    }
}

/// `pi * r^4 / (8 * L)` for a throat of squared radius `r2` voxels.
pub fn throat_conductance(r2: i64, voxel_size_m: f64) -> f64 {
    let r2 = r2 as f64 * voxel_size_m * voxel_size_m;
    PI * r2 * r2 / (8.0 * voxel_size_m)
}

/// Pore graph of `v` for flow along `axis` (0, 1 or 2).
pub fn extract_pore_graph(v: &Volume3D, axis: usize) -> Result<PoreGraph, PetroError> {
    if axis > 2 {
        return Err(PetroError::Invalid(format!("axis {axis} not in 0..3")));
    }
    let dims = v.dims();
    let vs = v.voxel_size_um() as f64 * 1e-6;
    let d2 = squared_distance_field(v);
    let mut node_of = vec![u32::MAX; v.len()];
    let mut voxel = Vec::new();
    let mut radius_sq = Vec::new();
    for (idx, &p) in v.data().iter().enumerate() {
        if p == PORE {
            node_of[idx] = voxel.len() as u32;
            voxel.push(idx);
            radius_sq.push(d2[idx]);
        }
    }
    let mut edges = Vec::new();
    let mut inlet = Vec::new();
    let mut outlet = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let idx = flat_index(dims, i, j, k);
                let a = node_of[idx];
                if a == u32::MAX {
                    continue;
                }
                let c = [i, j, k];
                if c[axis] == 0 {
                    inlet.push(a);
                }
                if c[axis] + 1 == dims[axis] {
                    outlet.push(a);
                }
                for d in 0..3 {
                    if c[d] + 1 < dims[d] {
                        let mut n = c;
                        n[d] += 1;
                        let b = node_of[flat_index(dims, n[0], n[1], n[2])];
                        if b != u32::MAX {
                            let r2 = radius_sq[a as usize].min(radius_sq[b as usize]);
                            edges.push((a, b, throat_conductance(r2, vs)));
                        }
                    }
                }
            }
        }
    }
    Ok(PoreGraph::assemble(voxel, radius_sq, edges, inlet, outlet))
}

/// Result of a pressure solve.
#[derive(Clone, Debug)]
pub struct FlowSolution {
    /// Node pressures; `NaN` for nodes not connected to any boundary.
    pub pressures: Vec<f64>,
    /// Volumetric flow leaving the inlet nodes.
    pub q: f64,
    pub percolating: bool,
    pub iterations: usize,
    pub relative_residual: f64,
}

pub(crate) const CG_TOL: f64 = 1e-8;

/// Solves for pressures with `dp` on the inlet and 0 on the outlet, using only
/// the nodes where `active` is true (all nodes if `None`).
pub(crate) fn solve_masked(
    graph: &PoreGraph,
    active: Option<&[bool]>,
    mu: f64,
    dp: f64,
) -> Result<FlowSolution, PetroError> {
    let n = graph.node_count();
    let on = |i: usize| active.is_none_or(|m| m[i]);
    const FREE: u8 = 0;
    const INLET: u8 = 1;
    const OUTLET: u8 = 2;
    let mut kind = vec![FREE; n];
    for &i in &graph.inlet {
        if on(i as usize) {
            kind[i as usize] = INLET;
        }
    }
    for &o in &graph.outlet {
        if on(o as usize) {
            if kind[o as usize] == INLET {
                return Err(PetroError::Invalid(
                    "inlet and outlet faces coincide; flow axis needs at least 2 voxels".into(),
                ));
            }
            kind[o as usize] = OUTLET;
        }
    }

    // Nodes reachable from a Dirichlet node take part in the solve.
    let mut reach = vec![false; n];
    let mut percolating = false;
    let mut stack = Vec::new();
    let mut seen = vec![false; n];
    for s in 0..n {
        if seen[s] || !on(s) {
            continue;
        }
        let mut comp = Vec::new();
        let mut touches = [false; 3];
        seen[s] = true;
        stack.push(s);
        while let Some(u) = stack.pop() {
            comp.push(u);
            touches[kind[u] as usize] = true;
            for &(w, _) in graph.neighbours(u) {
                let w = w as usize;
                if !seen[w] && on(w) {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if touches[INLET as usize] || touches[OUTLET as usize] {
            for &u in &comp {
                reach[u] = true;
            }
        }
        percolating |= touches[INLET as usize] && touches[OUTLET as usize];
    }

    let mut pressures = vec![f64::NAN; n];
    let mut unknown_of = vec![usize::MAX; n];
    let mut unknowns = Vec::new();
    for u in 0..n {
        if !reach[u] {
            continue;
        }
        match kind[u] {
            INLET => pressures[u] = dp,
            OUTLET => pressures[u] = 0.0,
            _ => {
                unknown_of[u] = unknowns.len();
                unknowns.push(u);
            }
        }
    }
    if !percolating {
        // every reachable component is held at a single boundary value
        fill_constant_components(graph, &reach, &kind, &mut pressures, on, dp);
        return Ok(FlowSolution {
            pressures,
            q: 0.0,
            percolating: false,
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    // Reduced system A x = b over the free nodes.
    let m = unknowns.len();
    let mut diag = vec![0f64; m];
    let mut b = vec![0f64; m];
    for (r, &u) in unknowns.iter().enumerate() {
        for &(w, g) in graph.neighbours(u) {
            let w = w as usize;
            if !on(w) {
                continue;
            }
            diag[r] += g;
            if kind[w] != FREE {
                b[r] += g * pressures[w];
            }
        }
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        for (r, &u) in unknowns.iter().enumerate() {
            let mut acc = diag[r] * x[r];
            for &(w, g) in graph.neighbours(u) {
                let c = unknown_of[w as usize];
                if c != usize::MAX {
                    acc -= g * x[c];
                }
            }
            y[r] = acc;
        }
    };
    let (x, iterations, relative_residual) = pcg(m, &diag, &b, apply)?;
    for (r, &u) in unknowns.iter().enumerate() {
        pressures[u] = x[r];
    }

    let mut q = 0.0;
    for &i in &graph.inlet {
        let i = i as usize;
        if kind[i] != INLET {
            continue;
        }
        for &(w, g) in graph.neighbours(i) {
            let w = w as usize;
            if on(w) && kind[w] != INLET {
                q += g * (dp - pressures[w]);
            }
        }
    }
    Ok(FlowSolution {
        pressures,
        q: q / mu,
        percolating: true,
        iterations,
        relative_residual,
    })
}

fn fill_constant_components(
    graph: &PoreGraph,
    reach: &[bool],
    kind: &[u8],
    pressures: &mut [f64],
    on: impl Fn(usize) -> bool,
    dp: f64,
) {
    // Components touching only one boundary sit at that boundary's pressure.
    let n = graph.node_count();
    let mut stack: Vec<usize> = (0..n).filter(|&u| reach[u] && kind[u] != 0).collect();
    while let Some(u) = stack.pop() {
        let p = if kind[u] == 1 { dp } else { pressures[u] };
        for &(w, _) in graph.neighbours(u) {
            let w = w as usize;
            if on(w) && reach[w] && pressures[w].is_nan() {
                pressures[w] = p;
                stack.push(w);
            }
        }
    }
}

/// Jacobi-preconditioned conjugate gradients.
fn pcg(
    m: usize,
    diag: &[f64],
    b: &[f64],
    apply: impl Fn(&[f64], &mut [f64]),
) -> Result<(Vec<f64>, usize, f64), PetroError> {
    let mut x = vec![0f64; m];
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if m == 0 || bnorm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0f64; m];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let cap = 50 * m.max(1);
    let mut rel = 1.0;
    for it in 1..=cap {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        if rel <= CG_TOL {
            return Ok((x, it, rel));
        }
        for i in 0..m {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(PetroError::NotConverged {
        iterations: cap,
        residual: rel,
    })
}

/// Pressure solve on the whole graph.
pub fn solve_flow(graph: &PoreGraph, mu: f64, dp: f64) -> Result<FlowSolution, PetroError> {
    if !(mu > 0.0) {
        return Err(PetroError::Invalid(format!("viscosity {mu} must be positive")));
    }
    solve_masked(graph, None, mu, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Chain of `n` unit-radius nodes with unit conductances (voxel size
    /// chosen so that pi * 1 / (8 L) = 1 up to the L^3 factor).
    fn unit_chain(n: usize) -> (Vec<i64>, Vec<(u32, u32)>) {
        let links = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
        (vec![1; n], links)
    }

    const UNIT: f64 = 1.0;

    fn unit_g() -> f64 {
        throat_conductance(1, UNIT)
    }

    #[test]
    fn series_chain() {
        let (r, l) = unit_chain(3);
        let g = PoreGraph::from_parts(r, &l, vec![0], vec![2], UNIT).unwrap();
        let s = solve_flow(&g, 1.0, 1.0).unwrap();
        let expect = unit_g() / 2.0;
        assert!((s.q - expect).abs() <= 1e-8 * expect, "{} vs {expect}", s.q);
        assert!((s.pressures[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn parallel_chains_double_flow() {
        let (r, l) = unit_chain(3);
        let one = PoreGraph::from_parts(r, &l, vec![0], vec![2], UNIT).unwrap();
        let links = vec![(0, 1), (1, 2), (3, 4), (4, 5)];
        let two = PoreGraph::from_parts(vec![1; 6], &links, vec![0, 3], vec![2, 5], UNIT).unwrap();
        let q1 = solve_flow(&one, 1.0, 1.0).unwrap().q;
        let q2 = solve_flow(&two, 1.0, 1.0).unwrap().q;
        assert!((q2 - 2.0 * q1).abs() <= 1e-8 * q2);
    }

    #[test]
    fn disconnected_is_non_percolating() {
        let g = PoreGraph::from_parts(vec![1; 4], &[(0, 1), (2, 3)], vec![0], vec![3], UNIT).unwrap();
        let s = solve_flow(&g, 1.0, 1.0).unwrap();
        assert!(!s.percolating);
        assert_eq!(s.q, 0.0);
        assert_eq!(s.pressures[1], 1.0);
        assert_eq!(s.pressures[2], 0.0);
    }

    #[test]
    fn straight_channel_is_a_chain() {
        let mut v = Volume3D::filled([5, 3, 3], 1.0, crate::voxcore::SOLID).unwrap();
        for i in 0..5 {
            v.set(i, 1, 1, PORE);
        }
        let g = extract_pore_graph(&v, 0).unwrap();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.edges.len(), 4);
        assert_eq!(g.inlet, vec![0]);
        assert_eq!(g.outlet, vec![4]);
        // no pore on the axis-1 faces
        let g1 = extract_pore_graph(&v, 1).unwrap();
        assert!(g1.inlet.is_empty());
    }

    #[test]
    fn two_clusters_two_components() {
        let mut v = Volume3D::filled([4, 4, 4], 1.0, crate::voxcore::SOLID).unwrap();
        v.set(0, 0, 0, PORE);
        v.set(0, 0, 1, PORE);
        v.set(3, 3, 3, PORE);
        let g = extract_pore_graph(&v, 0).unwrap();
        let labels = g.component_labels();
        assert_eq!(labels, vec![0, 0, 1]);
    }

    #[test]
    fn single_layer_axis_is_rejected() {
        let v = Volume3D::filled([1, 3, 3], 1.0, PORE).unwrap();
        let g = extract_pore_graph(&v, 0).unwrap();
        assert!(solve_flow(&g, 1.0, 1.0).is_err());
    }
}
