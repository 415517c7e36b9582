//! Conforming triangle meshes on axis-aligned rectangles, boundary tagging,
//! uniform refinement, and one-dimensional interface trace partitions.

use crate::{Error, Result, Vec2};
use std::collections::BTreeMap;

/// Which physical region a mesh discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subdomain {
    Fluid,
    Poro,
}

/// Boundary condition class carried by a tagged boundary edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    /// Fluid velocity prescribed (enters the load as a natural term).
    FluidDirichlet,
    /// Fluid pseudostress flux prescribed (essential on stress dofs).
    FluidNeumann,
    /// Darcy pressure prescribed (enters the load as a natural term).
    PoroDirichlet,
    /// Darcy flux prescribed (essential on velocity dofs).
    PoroNeumann,
    /// Shared fluid/poroelastic interface.
    Interface,
}

/// How rectangular grid cells are split into triangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagonal {
    /// One diagonal per cell, from the top-left to the bottom-right corner.
    Left,
    /// One diagonal per cell, from the bottom-left to the top-right corner.
    Right,
    /// Both diagonals; four triangles meeting at the cell center.
    Crisscross,
}

/// Mesh edge; `vertices` is sorted by global index, `cells` lists incident
/// triangles in triangle order (interior edges have two).
#[derive(Debug, Clone)]
pub struct Edge {
    pub vertices: [usize; 2],
    pub cells: [Option<usize>; 2],
}

/// Conforming triangulation of one subdomain. All triangles are stored
/// counterclockwise. Each edge carries a fixed unit normal (see
/// [`TriangleMesh::edge_normal`]); `cell_edge_signs` records, per triangle and
/// local edge, whether that normal points out of the triangle (+1) or into it
/// (-1), which makes normal-flux bases well defined across edges.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub subdomain: Subdomain,
    pub vertices: Vec<Vec2>,
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<Edge>,
    /// Per triangle: global edge ids, entry `i` opposite local vertex `i`.
    pub cell_edges: Vec<[usize; 3]>,
    /// Per triangle: +-1.0 per local edge, +1 when the global edge normal
    /// points out of the triangle.
    pub cell_edge_signs: Vec<[f64; 3]>,
    /// Per edge: boundary tag, `None` on interior (or not yet tagged) edges.
    pub boundary_tags: Vec<Option<BoundaryTag>>,
}

impl TriangleMesh {
    /// Builds connectivity from raw vertex/triangle lists. Triangles with
    /// clockwise orientation are flipped; degenerate triangles and edges
    /// shared by more than two triangles are rejected.
    pub fn from_raw(
        subdomain: Subdomain,
        vertices: Vec<Vec2>,
        mut triangles: Vec<[usize; 3]>,
    ) -> Result<Self> {
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in tri.iter() {
                if v >= vertices.len() {
                    return Err(Error::Mesh(format!(
                        "triangle {t} references missing vertex {v}"
                    )));
                }
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area.abs() < 1e-14 {
                return Err(Error::Mesh(format!("triangle {t} is degenerate")));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }

        let mut edge_ids: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut cell_edges = vec![[usize::MAX; 3]; triangles.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                let a = tri[(i + 1) % 3];
                let b = tri[(i + 2) % 3];
                let key = [a.min(b), a.max(b)];
                let id = *edge_ids.entry(key).or_insert_with(|| {
                    edges.push(Edge {
                        vertices: key,
                        cells: [None, None],
                    });
                    edges.len() - 1
                });
                cell_edges[t][i] = id;
                let slots = &mut edges[id].cells;
                if slots[0].is_none() {
                    slots[0] = Some(t);
                } else if slots[1].is_none() {
                    slots[1] = Some(t);
                } else {
                    return Err(Error::Mesh(format!(
                        "edge {:?} is shared by more than two triangles",
                        key
                    )));
                }
            }
        }

        let mut mesh = TriangleMesh {
            subdomain,
            vertices,
            triangles,
            edges,
            cell_edges,
            cell_edge_signs: Vec::new(),
            boundary_tags: Vec::new(),
        };
        mesh.boundary_tags = vec![None; mesh.edges.len()];
        mesh.cell_edge_signs = mesh
            .cell_edges
            .iter()
            .enumerate()
            .map(|(t, edges)| {
                let mut signs = [0.0; 3];
                for i in 0..3 {
                    let tri = mesh.triangles[t];
                    let a = mesh.vertices[tri[(i + 1) % 3]];
                    let b = mesh.vertices[tri[(i + 2) % 3]];
                    let outward = rotate_cw(b - a);
                    signs[i] = if outward.dot(&mesh.edge_normal(edges[i])) > 0.0 {
                        1.0
                    } else {
                        -1.0
                    };
                }
                signs
            })
            .collect();

        for (e, edge) in mesh.edges.iter().enumerate() {
            if let [Some(l), Some(r)] = edge.cells {
                let sl = mesh.sign_in_cell(l, e);
                let sr = mesh.sign_in_cell(r, e);
                if sl * sr != -1.0 {
                    return Err(Error::Mesh(format!(
                        "interior edge {e} has inconsistent orientation"
                    )));
                }
            }
        }
        Ok(mesh)
    }

    pub fn n_cells(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Corner coordinates of triangle `t`, counterclockwise.
    pub fn cell_vertices(&self, t: usize) -> [Vec2; 3] {
        let tri = self.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    pub fn cell_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.cell_vertices(t);
        signed_area(a, b, c)
    }

    pub fn cell_diameter(&self, t: usize) -> f64 {
        let [a, b, c] = self.cell_vertices(t);
        ((b - a).norm()).max((c - b).norm()).max((a - c).norm())
    }

    /// Largest triangle diameter.
    pub fn h_max(&self) -> f64 {
        (0..self.n_cells())
            .map(|t| self.cell_diameter(t))
            .fold(0.0, f64::max)
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e].vertices;
        (self.vertices[b] - self.vertices[a]).norm()
    }

    pub fn edge_midpoint(&self, e: usize) -> Vec2 {
        let [a, b] = self.edges[e].vertices;
        0.5 * (self.vertices[a] + self.vertices[b])
    }

    /// Fixed unit normal of edge `e`: the direction from the lower-index to
    /// the higher-index endpoint, rotated 90 degrees clockwise.
    pub fn edge_normal(&self, e: usize) -> Vec2 {
        let [a, b] = self.edges[e].vertices;
        let d = (self.vertices[b] - self.vertices[a]).normalize();
        rotate_cw(d)
    }

    /// +1 if `edge_normal(e)` points out of triangle `t`, else -1.
    pub fn sign_in_cell(&self, t: usize, e: usize) -> f64 {
        let i = self.local_edge_index(t, e);
        self.cell_edge_signs[t][i]
    }

    /// Position of edge `e` within `cell_edges[t]`.
    pub fn local_edge_index(&self, t: usize, e: usize) -> usize {
        self.cell_edges[t]
            .iter()
            .position(|&x| x == e)
            .expect("edge does not belong to triangle")
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.edges[e].cells[1].is_none()
    }

    pub fn boundary_edges(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_edges()).filter(|&e| self.is_boundary_edge(e))
    }

    /// Edges carrying a given tag.
    pub fn tagged_edges(&self, tag: BoundaryTag) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_edges()).filter(move |&e| self.boundary_tags[e] == Some(tag))
    }

    /// Assigns a tag to every boundary edge. Each rule is a predicate on the
    /// edge midpoint; every boundary edge must be claimed by exactly one rule.
    pub fn tag_boundaries(&mut self, rules: &[(&dyn Fn(Vec2) -> bool, BoundaryTag)]) -> Result<()> {
        let boundary: Vec<usize> = self.boundary_edges().collect();
        for e in boundary {
            let mid = self.edge_midpoint(e);
            let mut hits = rules.iter().filter(|(pred, _)| pred(mid));
            let tag = match (hits.next(), hits.next()) {
                (Some((_, tag)), None) => *tag,
                (None, _) => {
                    return Err(Error::Mesh(format!(
                        "boundary edge at ({:.6}, {:.6}) matches no tagging rule",
                        mid.x, mid.y
                    )))
                }
                (Some(_), Some(_)) => {
                    return Err(Error::Mesh(format!(
                        "boundary edge at ({:.6}, {:.6}) matches multiple tagging rules",
                        mid.x, mid.y
                    )))
                }
            };
            self.boundary_tags[e] = Some(tag);
        }
        Ok(())
    }

    /// Splits every triangle into four congruent children via edge midpoints.
    /// Boundary tags are inherited by the two halves of each boundary edge.
    pub fn refine_uniform(&self) -> TriangleMesh {
        let mut vertices = self.vertices.clone();
        let midpoint_vertex: Vec<usize> = (0..self.n_edges())
            .map(|e| {
                vertices.push(self.edge_midpoint(e));
                vertices.len() - 1
            })
            .collect();

        let mut triangles = Vec::with_capacity(4 * self.n_cells());
        for t in 0..self.n_cells() {
            let [v0, v1, v2] = self.triangles[t];
            let m0 = midpoint_vertex[self.cell_edges[t][0]];
            let m1 = midpoint_vertex[self.cell_edges[t][1]];
            let m2 = midpoint_vertex[self.cell_edges[t][2]];
            triangles.push([v0, m2, m1]);
            triangles.push([v1, m0, m2]);
            triangles.push([v2, m1, m0]);
            triangles.push([m0, m1, m2]);
        }

        let mut child_tags: BTreeMap<[usize; 2], BoundaryTag> = BTreeMap::new();
        for e in 0..self.n_edges() {
            if let Some(tag) = self.boundary_tags[e] {
                let [a, b] = self.edges[e].vertices;
                let m = midpoint_vertex[e];
                child_tags.insert([a.min(m), a.max(m)], tag);
                child_tags.insert([b.min(m), b.max(m)], tag);
            }
        }

        let mut mesh = TriangleMesh::from_raw(self.subdomain, vertices, triangles)
            .expect("refinement of a valid mesh is valid");
        for e in 0..mesh.n_edges() {
            if let Some(&tag) = child_tags.get(&mesh.edges[e].vertices) {
                mesh.boundary_tags[e] = Some(tag);
            }
        }
        mesh
    }

    /// Orders the `Interface`-tagged edges into a polyline and returns its
    /// partition. The walk starts at the lexicographically smallest endpoint,
    /// so the two subdomains parameterize a shared interface identically.
    pub fn extract_trace_mesh(&self) -> Result<TraceMesh> {
        let interface: Vec<usize> = self.tagged_edges(BoundaryTag::Interface).collect();
        if interface.is_empty() {
            return Err(Error::Mesh("mesh has no interface edges".into()));
        }

        let mut incident: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &e in &interface {
            for &v in &self.edges[e].vertices {
                incident.entry(v).or_default().push(e);
            }
        }
        let mut endpoints: Vec<usize> = incident
            .iter()
            .filter(|(_, es)| es.len() == 1)
            .map(|(&v, _)| v)
            .collect();
        if endpoints.len() != 2 || incident.values().any(|es| es.len() > 2) {
            return Err(Error::Mesh(
                "interface edges do not form a simple open polyline".into(),
            ));
        }
        endpoints.sort_by(|&a, &b| lex_cmp(self.vertices[a], self.vertices[b]));
        let start = endpoints[0];

        let mut points = vec![self.vertices[start]];
        let mut arc = vec![0.0];
        let mut parent_edges = Vec::with_capacity(interface.len());
        let mut visited = vec![false; self.n_edges()];
        let mut current = start;
        for _ in 0..interface.len() {
            let &e = incident[&current]
                .iter()
                .find(|&&e| !visited[e])
                .expect("open polyline walk cannot get stuck");
            visited[e] = true;
            let [a, b] = self.edges[e].vertices;
            let next = if a == current { b } else { a };
            points.push(self.vertices[next]);
            arc.push(arc.last().unwrap() + self.edge_length(e));
            parent_edges.push(e);
            current = next;
        }

        let (fluid_edges, poro_edges) = match self.subdomain {
            Subdomain::Fluid => (Some(parent_edges), None),
            Subdomain::Poro => (None, Some(parent_edges)),
        };
        Ok(TraceMesh {
            points,
            arc,
            fluid_edges,
            poro_edges,
        })
    }

    /// Plain-text dump for debugging: vertex coordinates, triangle
    /// connectivity, and tagged boundary edges.
    pub fn dump_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let name = match self.subdomain {
            Subdomain::Fluid => "fluid",
            Subdomain::Poro => "poro",
        };
        writeln!(
            out,
            "mesh {name}: {} vertices, {} triangles, {} edges, h = {:.6}",
            self.n_vertices(),
            self.n_cells(),
            self.n_edges(),
            self.h_max()
        )
        .unwrap();
        for (i, v) in self.vertices.iter().enumerate() {
            writeln!(out, "v {i} {:.12} {:.12}", v.x, v.y).unwrap();
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            writeln!(out, "t {t} {} {} {}", tri[0], tri[1], tri[2]).unwrap();
        }
        for e in 0..self.n_edges() {
            if let Some(tag) = self.boundary_tags[e] {
                let [a, b] = self.edges[e].vertices;
                writeln!(out, "b {e} {a} {b} {:?}", tag).unwrap();
            }
        }
        out
    }
}

/// Structured triangulation of an axis-aligned rectangle with `nx` by `ny`
/// grid cells.
pub fn build_rectangle_mesh(
    subdomain: Subdomain,
    lower: Vec2,
    upper: Vec2,
    nx: usize,
    ny: usize,
    diagonal: Diagonal,
) -> Result<TriangleMesh> {
    let line = |a: f64, b: f64, n: usize| -> Vec<f64> {
        (0..=n)
            .map(|i| if i == n { b } else { a + (b - a) * i as f64 / n as f64 })
            .collect()
    };
    let xs = line(lower.x, upper.x, nx);
    let ys = line(lower.y, upper.y, ny);
    build_tensor_mesh(subdomain, &xs, &ys, diagonal, |_, _| true)
}

/// Triangulates the cells of a tensor-product grid with the given x/y grid
/// lines, keeping only cells where `keep(i, j)` holds. Unused vertices are
/// dropped.
pub fn build_tensor_mesh(
    subdomain: Subdomain,
    xs: &[f64],
    ys: &[f64],
    diagonal: Diagonal,
    keep: impl Fn(usize, usize) -> bool,
) -> Result<TriangleMesh> {
    let nx = xs.len().saturating_sub(1);
    let ny = ys.len().saturating_sub(1);
    if nx == 0 || ny == 0 {
        return Err(Error::Mesh("grid needs at least one cell per axis".into()));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) || ys.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Mesh("grid lines must be strictly increasing".into()));
    }

    let mut vertices: Vec<Vec2> = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push(Vec2::new(xs[i], ys[j]));
        }
    }
    let vid = |i: usize, j: usize| j * (nx + 1) + i;

    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if !keep(i, j) {
                continue;
            }
            let v00 = vid(i, j);
            let v10 = vid(i + 1, j);
            let v11 = vid(i + 1, j + 1);
            let v01 = vid(i, j + 1);
            match diagonal {
                Diagonal::Left => {
                    triangles.push([v00, v10, v01]);
                    triangles.push([v10, v11, v01]);
                }
                Diagonal::Right => {
                    triangles.push([v00, v10, v11]);
                    triangles.push([v00, v11, v01]);
                }
                Diagonal::Crisscross => {
                    let c = vertices.len();
                    vertices.push(Vec2::new(
                        0.5 * (xs[i] + xs[i + 1]),
                        0.5 * (ys[j] + ys[j + 1]),
                    ));
                    triangles.push([v00, v10, c]);
                    triangles.push([v10, v11, c]);
                    triangles.push([v11, v01, c]);
                    triangles.push([v01, v00, c]);
                }
            }
        }
    }
    if triangles.is_empty() {
        return Err(Error::Mesh("keep predicate rejected every cell".into()));
    }

    let mut used = vec![false; vertices.len()];
    for tri in &triangles {
        for &v in tri {
            used[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut compact = Vec::new();
    for (v, &u) in used.iter().enumerate() {
        if u {
            remap[v] = compact.len();
            compact.push(vertices[v]);
        }
    }
    for tri in &mut triangles {
        for v in tri.iter_mut() {
            *v = remap[*v];
        }
    }

    TriangleMesh::from_raw(subdomain, compact, triangles)
}

/// Partition of the interface polyline: breakpoints in arc length together
/// with their positions. A trace extracted from one mesh records that side's
/// parent edges; a merged trace records both sides'.
#[derive(Debug, Clone)]
pub struct TraceMesh {
    /// Breakpoint positions along the polyline.
    pub points: Vec<Vec2>,
    /// Cumulative arc length per breakpoint, starting at 0.
    pub arc: Vec<f64>,
    /// Per segment: fluid mesh edge the segment lies in.
    pub fluid_edges: Option<Vec<usize>>,
    /// Per segment: poroelastic mesh edge the segment lies in.
    pub poro_edges: Option<Vec<usize>>,
}

impl TraceMesh {
    /// Builds a free-standing partition from an ordered breakpoint list,
    /// with no parent-edge bookkeeping.
    pub fn from_points(points: Vec<Vec2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Mesh("a trace needs at least two breakpoints".into()));
        }
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            let len = (w[1] - w[0]).norm();
            if len <= 0.0 {
                return Err(Error::Mesh("coincident consecutive trace breakpoints".into()));
            }
            arc.push(arc.last().unwrap() + len);
        }
        Ok(TraceMesh {
            points,
            arc,
            fluid_edges: None,
            poro_edges: None,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.arc.len() - 1
    }

    pub fn n_breakpoints(&self) -> usize {
        self.arc.len()
    }

    pub fn total_length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn segment_length(&self, k: usize) -> f64 {
        self.arc[k + 1] - self.arc[k]
    }

    pub fn h_max(&self) -> f64 {
        (0..self.n_segments())
            .map(|k| self.segment_length(k))
            .fold(0.0, f64::max)
    }

    /// Segment index containing arc-length position `s` (clamped to the ends).
    pub fn segment_of(&self, s: f64) -> usize {
        let k = self.arc.partition_point(|&a| a <= s);
        k.saturating_sub(1).min(self.n_segments() - 1)
    }

    /// Physical position at arc-length coordinate `s`.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let k = self.segment_of(s);
        let len = self.segment_length(k);
        let w = ((s - self.arc[k]) / len).clamp(0.0, 1.0);
        self.points[k] * (1.0 - w) + self.points[k + 1] * w
    }
}

/// Overlays two partitions of the same interface polyline. Breakpoints are
/// the sorted union, so every merged segment lies inside exactly one parent
/// edge on each side.
pub fn merge_trace_partitions(fluid: &TraceMesh, poro: &TraceMesh) -> Result<TraceMesh> {
    let fluid_parents = fluid
        .fluid_edges
        .as_ref()
        .ok_or_else(|| Error::Mesh("first trace must come from the fluid mesh".into()))?;
    let poro_parents = poro
        .poro_edges
        .as_ref()
        .ok_or_else(|| Error::Mesh("second trace must come from the poro mesh".into()))?;

    let length = fluid.total_length();
    let tol = 1e-9 * length;
    if (length - poro.total_length()).abs() > tol {
        return Err(Error::Mesh(format!(
            "trace lengths differ: {} vs {}",
            length,
            poro.total_length()
        )));
    }

    let mut arc: Vec<f64> = fluid.arc.iter().chain(poro.arc.iter()).copied().collect();
    arc.sort_by(|a, b| a.partial_cmp(b).unwrap());
    arc.dedup_by(|a, b| (*a - *b).abs() <= tol);

    let mut points = Vec::with_capacity(arc.len());
    for &s in &arc {
        let pf = fluid.point_at(s);
        let pp = poro.point_at(s);
        if (pf - pp).norm() > 1e-7 * length.max(1.0) {
            return Err(Error::Mesh(format!(
                "trace partitions disagree geometrically at arc length {s}: \
                 ({:.6}, {:.6}) vs ({:.6}, {:.6})",
                pf.x, pf.y, pp.x, pp.y
            )));
        }
        points.push(pf);
    }

    let mut fluid_edges = Vec::with_capacity(arc.len() - 1);
    let mut poro_edges = Vec::with_capacity(arc.len() - 1);
    for k in 0..arc.len() - 1 {
        let mid = 0.5 * (arc[k] + arc[k + 1]);
        fluid_edges.push(fluid_parents[fluid.segment_of(mid)]);
        poro_edges.push(poro_parents[poro.segment_of(mid)]);
    }

    Ok(TraceMesh {
        points,
        arc,
        fluid_edges: Some(fluid_edges),
        poro_edges: Some(poro_edges),
    })
}

fn signed_area(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

/// 90 degree clockwise rotation; maps a counterclockwise edge traversal
/// direction to the outward normal.
fn rotate_cw(v: Vec2) -> Vec2 {
    Vec2::new(v.y, -v.x)
}

fn lex_cmp(a: Vec2, b: Vec2) -> std::cmp::Ordering {
    a.x.partial_cmp(&b.x)
        .unwrap()
        .then(a.y.partial_cmp(&b.y).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_square(nx: usize, ny: usize, diagonal: Diagonal) -> TriangleMesh {
        build_rectangle_mesh(
            Subdomain::Fluid,
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            nx,
            ny,
            diagonal,
        )
        .unwrap()
    }

    /// Tags for the upper unit square: interface along y = 0, the rest split
    /// into a Dirichlet top and Neumann sides.
    fn tag_fluid_square(mesh: &mut TriangleMesh) {
        let interface = |p: Vec2| p.y < 1e-12;
        let top = |p: Vec2| p.y > 1.0 - 1e-12;
        let sides = |p: Vec2| p.y >= 1e-12 && p.y <= 1.0 - 1e-12;
        mesh.tag_boundaries(&[
            (&interface, BoundaryTag::Interface),
            (&top, BoundaryTag::FluidDirichlet),
            (&sides, BoundaryTag::FluidNeumann),
        ])
        .unwrap();
    }

    fn poro_crisscross(n: usize) -> TriangleMesh {
        let mut mesh = build_rectangle_mesh(
            Subdomain::Poro,
            Vec2::new(0.0, -1.0),
            Vec2::new(1.0, 0.0),
            n,
            n,
            Diagonal::Crisscross,
        )
        .unwrap();
        let interface = |p: Vec2| p.y > -1e-12;
        let bottom = |p: Vec2| p.y < -1.0 + 1e-12;
        let sides = |p: Vec2| p.y <= -1e-12 && p.y >= -1.0 + 1e-12;
        mesh.tag_boundaries(&[
            (&interface, BoundaryTag::Interface),
            (&bottom, BoundaryTag::PoroDirichlet),
            (&sides, BoundaryTag::PoroNeumann),
        ])
        .unwrap();
        mesh
    }

    #[test]
    fn rectangle_mesh_counts_and_sizes() {
        let mesh = unit_square(4, 4, Diagonal::Left);
        assert_eq!(mesh.n_cells(), 32);
        assert_eq!(mesh.n_vertices(), 25);
        // 2*4*4 horizontal+vertical strips plus one diagonal per grid cell
        assert_eq!(mesh.n_edges(), 2 * 4 * 5 + 16);
        assert_relative_eq!(mesh.h_max(), std::f64::consts::SQRT_2 / 4.0);

        let cc = poro_crisscross(3);
        assert_eq!(cc.n_cells(), 36);
        assert_eq!(cc.n_vertices(), 16 + 9);
        assert_relative_eq!(cc.h_max(), 1.0 / 3.0);
    }

    #[test]
    fn triangles_are_counterclockwise_with_total_area() {
        for diagonal in [Diagonal::Left, Diagonal::Right, Diagonal::Crisscross] {
            let mesh = unit_square(3, 5, diagonal);
            let mut total = 0.0;
            for t in 0..mesh.n_cells() {
                let area = mesh.cell_area(t);
                assert!(area > 0.0);
                total += area;
            }
            assert_relative_eq!(total, 1.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn interior_edges_have_opposite_signs() {
        let mesh = unit_square(3, 3, Diagonal::Crisscross);
        for (e, edge) in mesh.edges.iter().enumerate() {
            match edge.cells {
                [Some(l), Some(r)] => {
                    assert_eq!(mesh.sign_in_cell(l, e) * mesh.sign_in_cell(r, e), -1.0)
                }
                [Some(_), None] => assert!(mesh.is_boundary_edge(e)),
                _ => panic!("edge without incident cell"),
            }
        }
    }

    #[test]
    fn edge_normals_are_outward_on_boundary() {
        let mesh = unit_square(2, 2, Diagonal::Right);
        for e in mesh.boundary_edges() {
            let t = mesh.edges[e].cells[0].unwrap();
            let outward = mesh.sign_in_cell(t, e) * mesh.edge_normal(e);
            let mid = mesh.edge_midpoint(e);
            // Outward means pointing away from the square's center.
            assert!(outward.dot(&(mid - Vec2::new(0.5, 0.5))) > 0.0);
        }
    }

    #[test]
    fn tagging_rejects_gaps_and_overlaps() {
        let mut mesh = unit_square(2, 2, Diagonal::Left);
        let bottom = |p: Vec2| p.y < 1e-12;
        let all = |_: Vec2| true;
        let err = mesh
            .tag_boundaries(&[(&bottom, BoundaryTag::Interface)])
            .unwrap_err();
        assert!(err.to_string().contains("no tagging rule"));
        let err = mesh
            .tag_boundaries(&[
                (&bottom, BoundaryTag::Interface),
                (&all, BoundaryTag::FluidDirichlet),
            ])
            .unwrap_err();
        assert!(err.to_string().contains("multiple"));
    }

    #[test]
    fn refinement_preserves_structure_and_tags() {
        let mut mesh = unit_square(4, 4, Diagonal::Left);
        tag_fluid_square(&mut mesh);
        let fine = mesh.refine_uniform();
        assert_eq!(fine.n_cells(), 4 * mesh.n_cells());
        assert_relative_eq!(fine.h_max(), mesh.h_max() / 2.0);
        let total: f64 = (0..fine.n_cells()).map(|t| fine.cell_area(t)).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-13);

        // Tag counts double per refinement: 4 interface, 4 top, 8 side edges.
        assert_eq!(fine.tagged_edges(BoundaryTag::Interface).count(), 8);
        assert_eq!(fine.tagged_edges(BoundaryTag::FluidDirichlet).count(), 8);
        assert_eq!(fine.tagged_edges(BoundaryTag::FluidNeumann).count(), 16);
        for e in fine.boundary_edges() {
            assert!(fine.boundary_tags[e].is_some());
        }
    }

    #[test]
    fn trace_extraction_matches_grid_breakpoints() {
        let mut fluid = unit_square(4, 4, Diagonal::Left);
        tag_fluid_square(&mut fluid);
        let tf = fluid.extract_trace_mesh().unwrap();
        assert_eq!(tf.arc, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(tf.points[0], Vec2::new(0.0, 0.0));
        assert_eq!(tf.points[4], Vec2::new(1.0, 0.0));
        assert!(tf.fluid_edges.is_some() && tf.poro_edges.is_none());

        let poro = poro_crisscross(3);
        let tp = poro.extract_trace_mesh().unwrap();
        assert_eq!(tp.n_segments(), 3);
        for (k, s) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
            assert_relative_eq!(tp.arc[k], s, max_relative = 1e-14);
        }
    }

    #[test]
    fn merged_partition_is_sorted_union() {
        let mut fluid = unit_square(4, 4, Diagonal::Left);
        tag_fluid_square(&mut fluid);
        let poro = poro_crisscross(3);
        let tf = fluid.extract_trace_mesh().unwrap();
        let tp = poro.extract_trace_mesh().unwrap();
        let merged = merge_trace_partitions(&tf, &tp).unwrap();

        let expected = [0.0, 0.25, 1.0 / 3.0, 0.5, 2.0 / 3.0, 0.75, 1.0];
        assert_eq!(merged.n_breakpoints(), expected.len());
        for (k, s) in expected.iter().enumerate() {
            assert_relative_eq!(merged.arc[k], s, epsilon = 1e-12);
        }

        // Parent containment: each merged segment sits inside its parents.
        let fe = merged.fluid_edges.as_ref().unwrap();
        let pe = merged.poro_edges.as_ref().unwrap();
        for k in 0..merged.n_segments() {
            let mid = merged.point_at(0.5 * (merged.arc[k] + merged.arc[k + 1]));
            let fmid = fluid.edge_midpoint(fe[k]);
            let flen = fluid.edge_length(fe[k]);
            assert!((mid - fmid).norm() <= 0.5 * flen + 1e-12);
            let pmid = poro.edge_midpoint(pe[k]);
            let plen = poro.edge_length(pe[k]);
            assert!((mid - pmid).norm() <= 0.5 * plen + 1e-12);
        }
    }

    #[test]
    fn merging_matching_partitions_is_identity() {
        let mut fluid = unit_square(3, 3, Diagonal::Left);
        tag_fluid_square(&mut fluid);
        let poro = poro_crisscross(3);
        let tf = fluid.extract_trace_mesh().unwrap();
        let tp = poro.extract_trace_mesh().unwrap();
        let merged = merge_trace_partitions(&tf, &tp).unwrap();
        assert_eq!(merged.n_segments(), 3);
        for k in 0..merged.n_breakpoints() {
            assert_relative_eq!(merged.arc[k], tf.arc[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn tensor_mesh_with_hole_walks_three_sided_trace() {
        // Channel with a square cut out of the bottom: the interface trace
        // runs up the left flank, across the top, and down the right flank.
        let xs: Vec<f64> = (0..=10).map(|i| 0.25 * i as f64).collect();
        let ys: Vec<f64> = (0..=4).map(|j| 0.25 * j as f64).collect();
        let hole = |i: usize, j: usize| !((4..6).contains(&i) && (0..2).contains(&j));
        let mut mesh = build_tensor_mesh(Subdomain::Fluid, &xs, &ys, Diagonal::Left, hole).unwrap();
        assert_eq!(mesh.n_cells(), 2 * (40 - 4));

        let on_hole = |p: Vec2| {
            let left = (p.x - 1.0).abs() < 1e-12 && p.y < 0.5;
            let right = (p.x - 1.5).abs() < 1e-12 && p.y < 0.5;
            let top = (p.y - 0.5).abs() < 1e-12 && p.x > 1.0 && p.x < 1.5;
            left || right || top
        };
        let outer = |p: Vec2| !on_hole(p);
        mesh.tag_boundaries(&[
            (&on_hole, BoundaryTag::Interface),
            (&outer, BoundaryTag::FluidDirichlet),
        ])
        .unwrap();

        let trace = mesh.extract_trace_mesh().unwrap();
        assert_eq!(trace.n_segments(), 6);
        assert_relative_eq!(trace.total_length(), 1.5, max_relative = 1e-13);
        assert_eq!(trace.points[0], Vec2::new(1.0, 0.0));
        assert_eq!(*trace.points.last().unwrap(), Vec2::new(1.5, 0.0));
        // Corners of the hole are breakpoints.
        assert!(trace
            .points
            .iter()
            .any(|p| (p - Vec2::new(1.0, 0.5)).norm() < 1e-12));
        assert!(trace
            .points
            .iter()
            .any(|p| (p - Vec2::new(1.5, 0.5)).norm() < 1e-12));
    }

    proptest! {
        #[test]
        fn area_is_preserved_by_any_grid(
            nx in 1usize..7,
            ny in 1usize..7,
            diag in prop_oneof![
                Just(Diagonal::Left),
                Just(Diagonal::Right),
                Just(Diagonal::Crisscross)
            ],
        ) {
            let mesh = build_rectangle_mesh(
                Subdomain::Poro,
                Vec2::new(-1.0, 0.5),
                Vec2::new(2.0, 2.0),
                nx,
                ny,
                diag,
            ).unwrap();
            let total: f64 = (0..mesh.n_cells()).map(|t| mesh.cell_area(t)).sum();
            prop_assert!((total - 4.5).abs() < 1e-12);
            for t in 0..mesh.n_cells() {
                prop_assert!(mesh.cell_area(t) > 0.0);
            }
        }
    }
}
