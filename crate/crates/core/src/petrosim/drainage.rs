//! Invasion-percolation drainage and relative permeability on a pore graph.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::network::{solve_masked, PoreGraph};
use super::PetroError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrainageStatus {
    Ok,
    /// No pore on the inlet face; nothing can be invaded.
    EmptyInlet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrainageSequence {
    /// Node ids in invasion order.
    pub order: Vec<u32>,
    pub status: DrainageStatus,
}

/// Invades from the inlet face, always taking the frontier node with the
/// largest inscribed radius; ties go to the lowest voxel index.
pub fn drainage_sequence(graph: &PoreGraph) -> DrainageSequence {
    if graph.inlet.is_empty() {
        return DrainageSequence {
            order: Vec::new(),
            status: DrainageStatus::EmptyInlet,
        };
    }
    let n = graph.node_count();
    let mut queued = vec![false; n];
    let mut heap = BinaryHeap::new();
    let key = |u: u32| (graph.radius_sq[u as usize], Reverse(graph.voxel[u as usize]), u);
    for &i in &graph.inlet {
        if !queued[i as usize] {
            queued[i as usize] = true;
            heap.push(key(i));
        }
    }
    let mut order = Vec::with_capacity(n);
    while let Some((_, _, u)) = heap.pop() {
        order.push(u);
        for &(w, _) in graph.neighbours(u as usize) {
            if !queued[w as usize] {
                queued[w as usize] = true;
                heap.push(key(w));
            }
        }
    }
    DrainageSequence {
        order,
        status: DrainageStatus::Ok,
    }
}

/// Nodes lying on some inlet-to-outlet simple path within `active`: the
/// biconnected block containing a virtual source-sink edge. Only these nodes
/// carry flow.
pub(crate) fn backbone(graph: &PoreGraph, active: &[bool]) -> Vec<bool> {
    let n = graph.node_count();
    let (s, t) = (n, n + 1);
    let mut is_in = vec![false; n];
    let mut is_out = vec![false; n];
    for &i in &graph.inlet {
        is_in[i as usize] = active[i as usize];
    }
    for &o in &graph.outlet {
        is_out[o as usize] = active[o as usize];
    }
    let src: Vec<usize> = (0..n).filter(|&u| is_in[u]).collect();
    let snk: Vec<usize> = (0..n).filter(|&u| is_out[u]).collect();
    let mut result = vec![false; n];
    if src.is_empty() || snk.is_empty() {
        return result;
    }

    // neighbours in the augmented graph, enumerated lazily by position
    let degree = |u: usize| -> usize {
        if u == s {
            src.len() + 1
        } else if u == t {
            snk.len() + 1
        } else {
            graph.neighbours(u).len() + usize::from(is_in[u]) + usize::from(is_out[u])
        }
    };
    let neighbour = |u: usize, pos: usize| -> Option<usize> {
        if u == s {
            return Some(if pos < src.len() { src[pos] } else { t });
        }
        if u == t {
            return Some(if pos < snk.len() { snk[pos] } else { s });
        }
        let nb = graph.neighbours(u);
        if pos < nb.len() {
            let w = nb[pos].0 as usize;
            return active[w].then_some(w);
        }
        let extra = pos - nb.len();
        if is_in[u] && extra == 0 {
            Some(s)
        } else {
            Some(t)
        }
    };

    const UNSEEN: usize = usize::MAX;
    let mut disc = vec![UNSEEN; n + 2];
    let mut low = vec![0usize; n + 2];
    let mut next_pos = vec![0usize; n + 2];
    let mut parent = vec![UNSEEN; n + 2];
    let mut vstack: Vec<usize> = Vec::new();
    let mut call: Vec<usize> = vec![s];
    let mut time = 0;
    disc[s] = time;
    low[s] = time;
    vstack.push(s);
    while let Some(&u) = call.last() {
        if next_pos[u] < degree(u) {
            let pos = next_pos[u];
            next_pos[u] += 1;
            let Some(w) = neighbour(u, pos) else { continue };
            if disc[w] == UNSEEN {
                time += 1;
                disc[w] = time;
                low[w] = time;
                parent[w] = u;
                vstack.push(w);
                call.push(w);
            } else if w != parent[u] {
                low[u] = low[u].min(disc[w]);
            }
            continue;
        }
        call.pop();
        let p = parent[u];
        if p == UNSEEN {
            continue;
        }
        low[p] = low[p].min(low[u]);
        if low[u] >= disc[p] {
            // pop the block rooted at edge (p, u)
            let mut block = Vec::new();
            loop {
                let x = vstack.pop().expect("block vertices on stack");
                block.push(x);
                if x == u {
                    break;
                }
            }
            block.push(p);
            if block.contains(&s) && block.contains(&t) {
                for &x in &block {
                    if x < n {
                        result[x] = true;
                    }
                }
            }
        }
    }
    result
}

/// Flow with unit viscosity and pressure drop through the `active` nodes,
/// solved on their backbone only.
pub(crate) fn backbone_flow(graph: &PoreGraph, active: &[bool]) -> Result<(f64, Vec<bool>), PetroError> {
    let bb = backbone(graph, active);
    if !bb.iter().any(|&b| b) {
        return Ok((0.0, bb));
    }
    let sol = solve_masked(graph, Some(&bb), 1.0, 1.0)?;
    Ok((sol.q, bb))
}

/// Which phases have a connected path between the faces at a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KrStatus {
    Both,
    WettingOnly,
    NonWettingOnly,
    Neither,
}

impl KrStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            KrStatus::Both => "both",
            KrStatus::WettingOnly => "wetting_only",
            KrStatus::NonWettingOnly => "nonwetting_only",
            KrStatus::Neither => "neither",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrPoint {
    pub sw: f64,
    pub krw: f64,
    pub krnw: f64,
    pub invaded: usize,
    pub status: KrStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrCurve {
    pub points: Vec<KrPoint>,
}

/// Relative permeability along the drainage sequence of `graph`, at
/// `n_steps` evenly spaced invaded counts from none to the full sequence.
pub fn relative_permeability_graph(graph: &PoreGraph, n_steps: usize) -> Result<KrCurve, PetroError> {
    if n_steps < 2 {
        return Err(PetroError::Invalid("kr needs at least 2 steps".into()));
    }
    let n = graph.node_count();
    let all = vec![true; n];
    let (q_abs, _) = backbone_flow(graph, &all)?;
    if q_abs <= 0.0 {
        return Err(PetroError::NonPercolatingReference);
    }
    let seq = drainage_sequence(graph);
    let m = seq.order.len();
    let mut invaded = vec![false; n];
    let mut done = 0;
    let mut cache_nw: Option<(Vec<bool>, f64)> = None;
    let mut cache_w: Option<(Vec<bool>, f64)> = None;
    let mut points = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let c = (s * m + (n_steps - 1) / 2) / (n_steps - 1);
        for &u in &seq.order[done..c] {
            invaded[u as usize] = true;
        }
        done = c;
        let wetting: Vec<bool> = invaded.iter().map(|&x| !x).collect();
        let q_nw = cached_flow(graph, &invaded, &mut cache_nw)?;
        let q_w = cached_flow(graph, &wetting, &mut cache_w)?;
        let status = match (q_w > 0.0, q_nw > 0.0) {
            (true, true) => KrStatus::Both,
            (true, false) => KrStatus::WettingOnly,
            (false, true) => KrStatus::NonWettingOnly,
            (false, false) => KrStatus::Neither,
        };
        points.push(KrPoint {
            sw: 1.0 - c as f64 / n as f64,
            krw: q_w / q_abs,
            krnw: q_nw / q_abs,
            invaded: c,
            status,
        });
    }
    Ok(KrCurve { points })
}

/// Reuses the previous solve when the backbone has not changed, so identical
/// flowing networks give bitwise identical flows.
fn cached_flow(graph: &PoreGraph, active: &[bool], cache: &mut Option<(Vec<bool>, f64)>) -> Result<f64, PetroError> {
    let bb = backbone(graph, active);
    if let Some((prev, q)) = cache {
        if *prev == bb {
            return Ok(*q);
        }
    }
    let q = if bb.iter().any(|&b| b) {
        solve_masked(graph, Some(&bb), 1.0, 1.0)?.q
    } else {
        0.0
    };
    *cache = Some((bb, q));
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::petrosim::network::throat_conductance;

    #[test]
    fn channel_with_growing_radii_invades_in_order() {
        let links: Vec<(u32, u32)> = (0..4).map(|i| (i, i + 1)).collect();
        let g = PoreGraph::from_parts(vec![1, 2, 3, 4, 5], &links, vec![0], vec![4], 1.0).unwrap();
        assert_eq!(drainage_sequence(&g).order, vec![0, 1, 2, 3, 4]);
    }

    /// Two 4-node channels, wide (r^2 = 9) nodes 0..4 and narrow (r^2 = 1)
    /// nodes 4..8, joined by an edge between their inlet nodes.
    fn two_channels() -> PoreGraph {
        let mut radius_sq = vec![9; 4];
        radius_sq.extend([1; 4]);
        let mut links = vec![(0, 4)];
        for c in [0u32, 4] {
            links.extend((c..c + 3).map(|i| (i, i + 1)));
        }
        PoreGraph::from_parts(radius_sq, &links, vec![0, 4], vec![3, 7], 1.0).unwrap()
    }

    #[test]
    fn wide_channel_fills_first() {
        let seq = drainage_sequence(&two_channels());
        assert_eq!(seq.order, vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn single_node_sequence() {
        let g = PoreGraph::from_parts(vec![1], &[], vec![0], vec![], 1.0).unwrap();
        assert_eq!(drainage_sequence(&g).order, vec![0]);
        let e = PoreGraph::from_parts(vec![1], &[], vec![], vec![0], 1.0).unwrap();
        assert_eq!(drainage_sequence(&e).status, DrainageStatus::EmptyInlet);
    }

    #[test]
    fn parallel_channel_kr_matches_resistor_algebra() {
        let g = two_channels();
        let curve = relative_permeability_graph(&g, 9).unwrap();
        let p0 = curve.points[0];
        assert_eq!((p0.sw, p0.krw, p0.krnw), (1.0, 1.0, 0.0));
        let wide = throat_conductance(9, 1.0) / 3.0;
        let narrow = throat_conductance(1, 1.0) / 3.0;
        let half = curve.points[4];
        assert_eq!(half.invaded, 4);
        assert!((half.krnw - wide / (wide + narrow)).abs() < 1e-6);
        assert!((half.krw - narrow / (wide + narrow)).abs() < 1e-6);
        let last = curve.points[8];
        assert_eq!((last.krw, last.krnw), (0.0, 1.0));
    }

    #[test]
    fn dead_ends_are_off_the_backbone() {
        // chain 0-1-2 with a spur 3 hanging off node 1
        let g = PoreGraph::from_parts(vec![1; 4], &[(0, 1), (1, 2), (1, 3)], vec![0], vec![2], 1.0).unwrap();
        assert_eq!(backbone(&g, &[true; 4]), vec![true, true, true, false]);
        // a loop is on it
        let g = PoreGraph::from_parts(vec![1; 4], &[(0, 1), (1, 2), (1, 3), (3, 2)], vec![0], vec![2], 1.0).unwrap();
        assert_eq!(backbone(&g, &[true; 4]), vec![true; 4]);
    }
}
