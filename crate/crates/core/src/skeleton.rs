//! Topology-preserving 3D thinning and the attributed branch graph built on
//! the resulting one-voxel-wide skeleton.
//!
//! Thinning follows the Lee/Kashyap/Chu directional peeling scheme: six
//! sub-iterations per pass (one per face direction), each collecting border
//! voxels that are not line ends, are Euler invariant and are simple, then
//! deleting them sequentially while re-checking simplicity. Simplicity uses
//! the (26, 6) topological-number characterization.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::voxel::{for_each_neighbor, Connectivity, DistanceField, Voxel, VoxelVolume, FACE_OFFSETS};

const CENTER: usize = 13;

#[inline]
fn pos(dx: i64, dy: i64, dz: i64) -> usize {
    ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize
}

#[inline]
fn offset_of(p: usize) -> [i64; 3] {
    let p = p as i64;
    [p % 3 - 1, (p / 3) % 3 - 1, p / 9 - 1]
}

struct Tables {
    adj26: [Vec<usize>; 27],
    adj6_in18: [Vec<usize>; 27],
    in18: u32,
    face: u32,
    /// For each of the 26 boundary cells of the center cube: the neighbor
    /// positions whose closed cubes also contain that cell, and the sign
    /// `(-1)^dim` of the cell.
    cells: Vec<(u32, i32)>,
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut adj26: [Vec<usize>; 27] = Default::default();
        let mut adj6_in18: [Vec<usize>; 27] = Default::default();
        let mut in18 = 0u32;
        let mut face = 0u32;
        let l1 = |o: [i64; 3]| o.iter().map(|c| c.abs()).sum::<i64>();
        for p in 0..27 {
            let o = offset_of(p);
            if p != CENTER && l1(o) <= 2 {
                in18 |= 1 << p;
            }
            if l1(o) == 1 {
                face |= 1 << p;
            }
        }
        for p in 0..27 {
            if p == CENTER {
                continue;
            }
            let a = offset_of(p);
            for q in 0..27 {
                if q == CENTER || q == p {
                    continue;
                }
                let b = offset_of(q);
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                if d.iter().all(|c| c.abs() <= 1) {
                    adj26[p].push(q);
                }
                if l1(d) == 1 && in18 & (1 << p) != 0 && in18 & (1 << q) != 0 {
                    adj6_in18[p].push(q);
                }
            }
        }
        let mut cells = Vec::new();
        for p in 0..27 {
            if p == CENTER {
                continue;
            }
            let h = offset_of(p);
            let nonzero = h.iter().filter(|&&c| c != 0).count();
            let dim = 3 - nonzero as i32;
            let sign = if dim % 2 == 0 { 1 } else { -1 };
            let mut cover = 0u32;
            for q in 0..27 {
                if q == CENTER {
                    continue;
                }
                let o = offset_of(q);
                if (0..3).all(|a| o[a] == 0 || o[a] == h[a]) {
                    cover |= 1 << q;
                }
            }
            cells.push((cover, sign));
        }
        Tables { adj26, adj6_in18, in18, face, cells }
    })
}

/// 27-bit occupancy of the 3x3x3 block around `v` (off-grid reads as 0).
pub fn neighborhood(vol: &VoxelVolume, v: Voxel) -> u32 {
    let mut bits = 0u32;
    let c = [v[0] as i64, v[1] as i64, v[2] as i64];
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if vol.get_or_zero([c[0] + dx, c[1] + dy, c[2] + dz]) > 0 {
                    bits |= 1 << pos(dx, dy, dz);
                }
            }
        }
    }
    bits
}

fn count_components(set: u32, adj: &[Vec<usize>; 27], must_touch: Option<u32>) -> usize {
    let mut remaining = set;
    let mut count = 0;
    let mut stack = Vec::with_capacity(27);
    while remaining != 0 {
        let start = remaining.trailing_zeros() as usize;
        remaining &= !(1 << start);
        stack.push(start);
        let mut comp = 1u32 << start;
        while let Some(p) = stack.pop() {
            for &q in &adj[p] {
                if remaining & (1 << q) != 0 {
                    remaining &= !(1 << q);
                    comp |= 1 << q;
                    stack.push(q);
                }
            }
        }
        match must_touch {
            Some(t) if comp & t == 0 => {}
            _ => count += 1,
        }
    }
    count
}

/// Whether deleting the center voxel preserves topology (26-foreground,
/// 6-background).
pub fn is_simple(bits: u32) -> bool {
    let t = tables();
    let fg = bits & !(1 << CENTER) & ((1 << 27) - 1);
    if count_components(fg, &t.adj26, None) != 1 {
        return false;
    }
    let bg = !bits & t.in18;
    count_components(bg, &t.adj6_in18, Some(t.face)) == 1
}

/// Change in the Euler characteristic of the foreground (closed unit cubes)
/// caused by deleting the center voxel.
pub fn euler_change(bits: u32) -> i32 {
    let t = tables();
    let mut delta = -1;
    for &(cover, sign) in &t.cells {
        if bits & cover == 0 {
            delta += sign;
        }
    }
    delta
}

pub fn is_euler_invariant(bits: u32) -> bool {
    euler_change(bits) == 0
}

fn neighbor_count(bits: u32) -> u32 {
    (bits & !(1 << CENTER)).count_ones()
}

/// Thins a binary volume to a one-voxel-wide skeleton. Output is a binary
/// mask; the 26-connected component count of the input is preserved.
pub fn thin_3d(vol: &VoxelVolume) -> VoxelVolume {
    let mut skel = vol.to_binary();
    let mut alive: Vec<usize> = skel.foreground_indices();
    let mut candidates: Vec<Voxel> = Vec::new();
    loop {
        let mut changed = false;
        for dir in FACE_OFFSETS {
            candidates.clear();
            for &idx in &alive {
                if !skel.is_foreground_at(idx) {
                    continue;
                }
                let v = skel.coord(idx);
                let n = [v[0] as i64 + dir[0], v[1] as i64 + dir[1], v[2] as i64 + dir[2]];
                if skel.get_or_zero(n) > 0 {
                    continue;
                }
                let bits = neighborhood(&skel, v);
                if neighbor_count(bits) == 1 {
                    continue;
                }
                if !is_euler_invariant(bits) || !is_simple(bits) {
                    continue;
                }
                candidates.push(v);
            }
            for &v in &candidates {
                if is_simple(neighborhood(&skel, v)) {
                    let idx = skel.index(v);
                    skel.raw_mut()[idx] = 0;
                    changed = true;
                }
            }
        }
        alive.retain(|&i| skel.is_foreground_at(i));
        if !changed {
            break;
        }
    }
    skel
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Endpoint,
    Junction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    /// Representative voxel (centroid-nearest member of the clique).
    pub position: Voxel,
    pub kind: NodeKind,
    /// Every skeleton voxel collapsed into this node.
    pub members: Vec<Voxel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub path: Vec<Voxel>,
    pub radius_profile: Vec<f64>,
    /// Number of voxel steps, `path.len() - 1`.
    pub length: usize,
    pub mean_radius: f64,
    /// Node ids at the two ends of `path`.
    pub nodes: [usize; 2],
}

impl Branch {
    fn new(path: Vec<Voxel>, dist: &DistanceField, nodes: [usize; 2]) -> Self {
        let radius_profile: Vec<f64> = path.iter().map(|&v| dist.get(v)).collect();
        let mean_radius = radius_profile.iter().sum::<f64>() / radius_profile.len() as f64;
        Self { length: path.len() - 1, path, radius_profile, mean_radius, nodes }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkeletonGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Branch>,
}

#[derive(Serialize)]
struct EdgeJson<'a> {
    path: &'a [Voxel],
    radius: &'a [f64],
}

impl SkeletonGraph {
    /// `{ "nodes": [[[x,y,z], kind], ...], "edges": [{ "path": [...], "radius": [...] }] }`
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<(Voxel, NodeKind)> = self.nodes.iter().map(|n| (n.position, n.kind)).collect();
        let edges: Vec<EdgeJson> =
            self.edges.iter().map(|b| EdgeJson { path: &b.path, radius: &b.radius_profile }).collect();
        serde_json::json!({ "nodes": nodes, "edges": edges })
    }
}

/// Splits a skeleton into nodes (voxels with != 2 neighbors, junction cliques
/// collapsed) and branches (maximal chains of 2-neighbor voxels).
pub fn build_skeleton_graph(skel: &VoxelVolume, dist: &DistanceField) -> SkeletonGraph {
    let dims = skel.dims();
    let fg = skel.foreground_indices();
    if fg.is_empty() {
        return SkeletonGraph::default();
    }
    let mut degree: HashMap<usize, usize> = HashMap::with_capacity(fg.len());
    for &i in &fg {
        let mut d = 0;
        for_each_neighbor(dims, i, Connectivity::TwentySix, |n| d += skel.is_foreground_at(n) as usize);
        degree.insert(i, d);
    }

    // Node voxels grouped into 26-connected clusters; each cluster is one node.
    let mut node_of: HashMap<usize, usize> = HashMap::new();
    let mut nodes: Vec<Node> = Vec::new();
    for &i in &fg {
        if degree[&i] == 2 || node_of.contains_key(&i) {
            continue;
        }
        let id = nodes.len();
        let mut members = vec![i];
        node_of.insert(i, id);
        let mut k = 0;
        while k < members.len() {
            let cur = members[k];
            k += 1;
            if degree[&cur] < 3 {
                continue;
            }
            for_each_neighbor(dims, cur, Connectivity::TwentySix, |n| {
                if skel.is_foreground_at(n) && degree[&n] >= 3 && !node_of.contains_key(&n) {
                    node_of.insert(n, id);
                    members.push(n);
                }
            });
        }
        members.sort_unstable();
        let coords: Vec<Voxel> = members.iter().map(|&m| skel.coord(m)).collect();
        let kind = if degree[&i] >= 3 { NodeKind::Junction } else { NodeKind::Endpoint };
        nodes.push(Node { position: centroid_nearest(&coords), kind, members: coords });
    }

    let mut edges = Vec::new();
    let mut visited: HashMap<usize, bool> = HashMap::new();
    let mut direct: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    for node_id in 0..nodes.len() {
        let members: Vec<usize> = nodes[node_id].members.iter().map(|&v| skel.index(v)).collect();
        for &m in &members {
            let mut nbrs = Vec::new();
            for_each_neighbor(dims, m, Connectivity::TwentySix, |n| {
                if skel.is_foreground_at(n) {
                    nbrs.push(n);
                }
            });
            for n in nbrs {
                match node_of.get(&n) {
                    Some(&other) if other == node_id => {}
                    Some(&other) => {
                        let key = (m.min(n), m.max(n));
                        if direct.insert(key, ()).is_none() {
                            let path = vec![skel.coord(m), skel.coord(n)];
                            edges.push(Branch::new(path, dist, [node_id, other]));
                        }
                    }
                    None => {
                        if visited.contains_key(&n) {
                            continue;
                        }
                        let mut path = vec![skel.coord(m)];
                        let mut prev = m;
                        let mut cur = n;
                        let end_node;
                        loop {
                            if let Some(&nid) = node_of.get(&cur) {
                                path.push(skel.coord(cur));
                                end_node = nid;
                                break;
                            }
                            visited.insert(cur, true);
                            path.push(skel.coord(cur));
                            let mut next = None;
                            for_each_neighbor(dims, cur, Connectivity::TwentySix, |x| {
                                if x != prev && skel.is_foreground_at(x) && next.is_none() {
                                    next = Some(x);
                                }
                            });
                            let Some(x) = next else {
                                end_node = node_id;
                                break;
                            };
                            if visited.contains_key(&x) && !node_of.contains_key(&x) {
                                // chain loops back on itself without a node
                                end_node = node_id;
                                break;
                            }
                            prev = cur;
                            cur = x;
                        }
                        edges.push(Branch::new(path, dist, [node_id, end_node]));
                    }
                }
            }
        }
    }

    // Pure cycles: every voxel has two neighbors, so no node was created.
    for &i in &fg {
        if degree[&i] != 2 || visited.contains_key(&i) {
            continue;
        }
        let id = nodes.len();
        let start = skel.coord(i);
        node_of.insert(i, id);
        nodes.push(Node { position: start, kind: NodeKind::Junction, members: vec![start] });
        let mut path = vec![start];
        let mut prev = i;
        let mut cur = None;
        for_each_neighbor(dims, i, Connectivity::TwentySix, |x| {
            if skel.is_foreground_at(x) && cur.is_none() {
                cur = Some(x);
            }
        });
        while let Some(c) = cur {
            if c == i {
                path.push(start);
                break;
            }
            visited.insert(c, true);
            path.push(skel.coord(c));
            let mut next = None;
            for_each_neighbor(dims, c, Connectivity::TwentySix, |x| {
                if x != prev && skel.is_foreground_at(x) && next.is_none() {
                    next = Some(x);
                }
            });
            prev = c;
            cur = next;
        }
        edges.push(Branch::new(path, dist, [id, id]));
    }

    SkeletonGraph { nodes, edges }
}

fn centroid_nearest(coords: &[Voxel]) -> Voxel {
    let n = coords.len() as f64;
    let mut c = [0.0; 3];
    for v in coords {
        for a in 0..3 {
            c[a] += v[a] as f64 / n;
        }
    }
    *coords
        .iter()
        .min_by(|a, b| {
            let da: f64 = (0..3).map(|k| (a[k] as f64 - c[k]).powi(2)).sum();
            let db: f64 = (0..3).map(|k| (b[k] as f64 - c[k]).powi(2)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}
