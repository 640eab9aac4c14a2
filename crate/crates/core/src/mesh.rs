//! Simplicial mesh with tagged boundary facets.
//!
//! The mesh owns the geometry that the optimizer deforms: vertex coordinates,
//! cell connectivity, boundary facets with their tags, and the adjacency maps
//! needed for assembly and geometric queries. Cells are stored positively
//! oriented; a negative signed volume appearing later is a hard inversion
//! signal. Vertex coordinates change only through [`Mesh::apply_displacement`],
//! which gates the move on element quality.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Boundary classification. The integer codes are a file-format contract
/// (MSH physical tags) and must not be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Inlet = 1,
    Outlet = 2,
    CylWall = 3,
    PackingJacket = 4,
    Packing = 5,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 5] = [
        BoundaryTag::Inlet,
        BoundaryTag::Outlet,
        BoundaryTag::CylWall,
        BoundaryTag::PackingJacket,
        BoundaryTag::Packing,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<BoundaryTag> {
        match code {
            1 => Some(BoundaryTag::Inlet),
            2 => Some(BoundaryTag::Outlet),
            3 => Some(BoundaryTag::CylWall),
            4 => Some(BoundaryTag::PackingJacket),
            5 => Some(BoundaryTag::Packing),
            _ => None,
        }
    }

    /// The wall boundary of the flow problem (no-slip).
    pub fn is_wall(self) -> bool {
        matches!(
            self,
            BoundaryTag::CylWall | BoundaryTag::PackingJacket | BoundaryTag::Packing
        )
    }
}

/// Per-vertex displacement field, same layout as the mesh coordinates
/// (`dim`-interleaved, length `vertex_count * dim`).
#[derive(Debug, Clone)]
pub struct VertexDisplacement {
    pub data: Vec<f64>,
}

impl VertexDisplacement {
    pub fn zeros(mesh: &Mesh) -> Self {
        VertexDisplacement {
            data: vec![0.0; mesh.vertex_count() * mesh.dim()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        VertexDisplacement { data }
    }

    /// Displacement of one vertex as a coordinate slice.
    pub fn at(&self, dim: usize, v: usize) -> &[f64] {
        &self.data[v * dim..(v + 1) * dim]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        VertexDisplacement {
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// One boundary facet: its vertices in outward-oriented order, the unique
/// cell it belongs to, and its tag.
#[derive(Debug, Clone)]
pub struct BoundaryFacet {
    verts: [usize; 3],
    pub cell: usize,
    pub tag: BoundaryTag,
}

/// Outcome of a quality-gated displacement attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum DisplacementOutcome {
    Accepted,
    /// The mesh was left unchanged; carries the offending quality and cell.
    Rejected {
        min_quality: f64,
        cell: usize,
    },
}

impl DisplacementOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, DisplacementOutcome::Accepted)
    }
}

/// Simplicial mesh in 2 or 3 dimensions (triangles or tetrahedra).
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    /// Flat coordinates, `dim`-interleaved.
    vertices: Vec<f64>,
    /// Flat connectivity, `dim + 1` vertex indices per cell.
    cells: Vec<usize>,
    facets: Vec<BoundaryFacet>,
    /// vertex -> incident cells
    vertex_cells: Vec<Vec<usize>>,
}

impl Mesh {
    /// Builds and validates a mesh. `tagged_facets` must list every
    /// topological boundary facet exactly once with its tag. Cells with
    /// negative signed volume are reoriented in place.
    pub fn new(
        dim: usize,
        vertices: Vec<f64>,
        mut cells: Vec<usize>,
        tagged_facets: Vec<(Vec<usize>, BoundaryTag)>,
    ) -> Result<Mesh> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidMesh(format!("dimension {dim} not supported")));
        }
        if !vertices.len().is_multiple_of(dim) {
            return Err(Error::InvalidMesh(
                "coordinate array length is not a multiple of dim".into(),
            ));
        }
        let nv = vertices.len() / dim;
        let npc = dim + 1;
        if !cells.len().is_multiple_of(npc) {
            return Err(Error::InvalidMesh(
                "cell array length is not a multiple of dim + 1".into(),
            ));
        }
        let nc = cells.len() / npc;
        if nc == 0 {
            return Err(Error::EmptyMesh);
        }
        if let Some(&bad) = cells.iter().find(|&&v| v >= nv) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: nv,
            });
        }
        if vertices.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vertex coordinates"));
        }

        // Orient every cell positively; a zero volume at load is rejected.
        for c in 0..nc {
            let vol = signed_volume(dim, &vertices, &cells[c * npc..(c + 1) * npc]);
            if vol == 0.0 {
                return Err(Error::InvalidMesh(format!("cell {c} is degenerate")));
            }
            if vol < 0.0 {
                cells.swap(c * npc, c * npc + 1);
            }
        }

        // Topological boundary: faces incident to exactly one cell.
        let mut face_cells: HashMap<[usize; 3], (usize, usize, u8)> = HashMap::new();
        for c in 0..nc {
            let cv = &cells[c * npc..(c + 1) * npc];
            for omit in 0..npc {
                let key = face_key(dim, cv, omit);
                let entry = face_cells.entry(key).or_insert((c, omit, 0));
                if entry.2 >= 2 {
                    return Err(Error::InvalidMesh(format!(
                        "facet {key:?} shared by more than two cells"
                    )));
                }
                if entry.2 == 1 && entry.0 == c {
                    return Err(Error::InvalidMesh(format!(
                        "cell {c} contains facet {key:?} twice"
                    )));
                }
                entry.2 += 1;
                if entry.2 == 1 {
                    *entry = (c, omit, 1);
                }
            }
        }

        let mut tag_of: HashMap<[usize; 3], BoundaryTag> = HashMap::new();
        for (fverts, tag) in &tagged_facets {
            if fverts.len() != dim {
                return Err(Error::InvalidMesh(format!(
                    "tagged facet {fverts:?} has {} vertices, expected {dim}",
                    fverts.len()
                )));
            }
            let key = sorted_key(fverts);
            if tag_of.insert(key, *tag).is_some() {
                return Err(Error::InvalidMesh(format!(
                    "facet {fverts:?} tagged more than once"
                )));
            }
        }

        let mut facets = Vec::new();
        for (key, (cell, omit, count)) in &face_cells {
            if *count != 1 {
                if tag_of.contains_key(key) {
                    return Err(Error::InvalidMesh(format!(
                        "tagged facet {key:?} is interior"
                    )));
                }
                continue;
            }
            let tag = *tag_of.get(key).ok_or_else(|| {
                Error::InvalidMesh(format!("boundary facet {key:?} carries no tag"))
            })?;
            let cv = &cells[cell * npc..(cell + 1) * npc];
            let verts = oriented_facet(dim, &vertices, cv, *omit);
            facets.push(BoundaryFacet {
                verts,
                cell: *cell,
                tag,
            });
        }
        if facets.len() != tag_of.len() {
            return Err(Error::InvalidMesh(
                "tagged facet list does not match the topological boundary".into(),
            ));
        }
        // Deterministic facet order regardless of hash-map iteration.
        facets.sort_by_key(|f| f.verts);

        let mut vertex_cells = vec![Vec::new(); nv];
        for c in 0..nc {
            for &v in &cells[c * npc..(c + 1) * npc] {
                vertex_cells[v].push(c);
            }
        }

        Ok(Mesh {
            dim,
            vertices,
            cells,
            facets,
            vertex_cells,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn facet_count(&self) -> usize {
        self.facets.len()
    }

    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.vertices[v * self.dim..(v + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.vertices
    }

    pub fn cell_vertices(&self, c: usize) -> &[usize] {
        let npc = self.dim + 1;
        &self.cells[c * npc..(c + 1) * npc]
    }

    pub fn facet(&self, f: usize) -> &BoundaryFacet {
        &self.facets[f]
    }

    pub fn facets(&self) -> &[BoundaryFacet] {
        &self.facets
    }

    pub fn facet_vertices(&self, f: usize) -> &[usize] {
        &self.facets[f].verts[..self.dim]
    }

    pub fn cells_of_vertex(&self, v: usize) -> &[usize] {
        &self.vertex_cells[v]
    }

    /// Iterator over facet indices carrying any of the given tags.
    pub fn facets_with_tag(&self, tag: BoundaryTag) -> impl Iterator<Item = usize> + '_ {
        self.facets
            .iter()
            .enumerate()
            .filter(move |(_, f)| f.tag == tag)
            .map(|(i, _)| i)
    }

    /// Vertices lying on a facet with any of the given tags, deduplicated, sorted.
    pub fn vertices_on_tags(&self, tags: &[BoundaryTag]) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .facets
            .iter()
            .filter(|f| tags.contains(&f.tag))
            .flat_map(|f| f.verts[..self.dim].iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn has_tag(&self, tag: BoundaryTag) -> bool {
        self.facets.iter().any(|f| f.tag == tag)
    }

    /// Signed volume of a cell under the stored orientation.
    pub fn cell_volume(&self, c: usize) -> Result<f64> {
        let nc = self.cell_count();
        if c >= nc {
            return Err(Error::IndexOutOfRange { index: c, len: nc });
        }
        Ok(signed_volume(
            self.dim,
            &self.vertices,
            self.cell_vertices(c),
        ))
    }

    /// Longest edge of a cell.
    pub fn cell_diameter(&self, c: usize) -> f64 {
        let cv = self.cell_vertices(c);
        let mut h: f64 = 0.0;
        for i in 0..cv.len() {
            for j in (i + 1)..cv.len() {
                h = h.max(dist(self.vertex(cv[i]), self.vertex(cv[j])));
            }
        }
        h
    }

    pub fn cell_centroid(&self, c: usize) -> Vec<f64> {
        let cv = self.cell_vertices(c);
        let mut x = vec![0.0; self.dim];
        for &v in cv {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk += self.vertex(v)[k];
            }
        }
        for xk in &mut x {
            *xk /= cv.len() as f64;
        }
        x
    }

    /// Bounding-box diagonal of the whole mesh.
    pub fn diameter(&self) -> f64 {
        let d = self.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for v in 0..self.vertex_count() {
            for k in 0..d {
                lo[k] = lo[k].min(self.vertex(v)[k]);
                hi[k] = hi[k].max(self.vertex(v)[k]);
            }
        }
        (0..d).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Unit outward normal and measure of a boundary facet.
    pub fn facet_normal_area(&self, f: usize) -> Result<(Vec<f64>, f64)> {
        if f >= self.facets.len() {
            return Err(Error::IndexOutOfRange {
                index: f,
                len: self.facets.len(),
            });
        }
        let facet = &self.facets[f];
        facet_normal_area_of(self.dim, &self.vertices, &facet.verts)
    }

    pub fn facet_measure(&self, f: usize) -> Result<f64> {
        Ok(self.facet_normal_area(f)?.1)
    }

    pub fn facet_centroid(&self, f: usize) -> Vec<f64> {
        let fv = self.facet_vertices(f);
        let mut x = vec![0.0; self.dim];
        for &v in fv {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk += self.vertex(v)[k];
            }
        }
        for xk in &mut x {
            *xk /= fv.len() as f64;
        }
        x
    }

    /// Sum of facet measures over a tag set.
    pub fn tagged_measure(&self, tags: &[BoundaryTag]) -> Result<f64> {
        let mut sum = 0.0;
        for (i, facet) in self.facets.iter().enumerate() {
            if tags.contains(&facet.tag) {
                sum += self.facet_measure(i)?;
            }
        }
        Ok(sum)
    }

    /// Radius-ratio quality in [0, 1]: `dim * inradius / circumradius`.
    /// 1 for the regular simplex, 0 for degenerate or inverted cells.
    pub fn cell_quality(&self, c: usize) -> f64 {
        let cv = self.cell_vertices(c);
        cell_quality_of(self.dim, &self.vertices, cv)
    }

    pub fn min_quality(&self) -> Result<f64> {
        if self.cell_count() == 0 {
            return Err(Error::EmptyMesh);
        }
        Ok((0..self.cell_count())
            .map(|c| self.cell_quality(c))
            .fold(f64::INFINITY, f64::min))
    }

    pub fn mean_quality(&self) -> f64 {
        let nc = self.cell_count();
        (0..nc).map(|c| self.cell_quality(c)).sum::<f64>() / nc as f64
    }

    /// Moves every vertex by `d` iff the deformed mesh keeps all volumes
    /// positive and `min_quality >= quality_floor`; otherwise leaves the
    /// mesh untouched and reports the offending quality.
    pub fn apply_displacement(
        &mut self,
        d: &VertexDisplacement,
        quality_floor: f64,
    ) -> Result<DisplacementOutcome> {
        if d.data.len() != self.vertices.len() {
            return Err(Error::LengthMismatch {
                expected: self.vertices.len(),
                got: d.data.len(),
            });
        }
        if d.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vertex displacement"));
        }
        if !(0.0..1.0).contains(&quality_floor) {
            return Err(Error::InvalidConfig(format!(
                "quality_floor {quality_floor} not in [0, 1)"
            )));
        }
        for (x, dx) in self.vertices.iter_mut().zip(&d.data) {
            *x += dx;
        }
        let mut worst = (f64::INFINITY, 0usize);
        for c in 0..self.cell_count() {
            let vol = signed_volume(self.dim, &self.vertices, self.cell_vertices(c));
            let q = if vol <= 0.0 {
                0.0
            } else {
                self.cell_quality(c)
            };
            if q < worst.0 {
                worst = (q, c);
            }
        }
        if worst.0 < quality_floor {
            for (x, dx) in self.vertices.iter_mut().zip(&d.data) {
                *x -= dx;
            }
            return Ok(DisplacementOutcome::Rejected {
                min_quality: worst.0,
                cell: worst.1,
            });
        }
        Ok(DisplacementOutcome::Accepted)
    }
}

fn sorted_key(verts: &[usize]) -> [usize; 3] {
    let mut key = [usize::MAX; 3];
    key[..verts.len()].copy_from_slice(verts);
    key[..verts.len()].sort_unstable();
    key
}

fn face_key(dim: usize, cell_verts: &[usize], omit: usize) -> [usize; 3] {
    let face: Vec<usize> = cell_verts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != omit)
        .map(|(_, &v)| v)
        .collect();
    let mut key = [usize::MAX; 3];
    key[..dim].copy_from_slice(&face);
    key[..dim].sort_unstable();
    key
}

/// Facet vertices ordered so the implied normal points out of the cell.
fn oriented_facet(dim: usize, coords: &[f64], cell_verts: &[usize], omit: usize) -> [usize; 3] {
    let face: Vec<usize> = cell_verts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != omit)
        .map(|(_, &v)| v)
        .collect();
    let opposite = cell_verts[omit];
    let mut verts = [usize::MAX; 3];
    verts[..dim].copy_from_slice(&face);
    let (n, _) = facet_normal_area_of(dim, coords, &verts).expect("nondegenerate facet");
    let centroid: Vec<f64> = (0..dim)
        .map(|k| face.iter().map(|&v| coords[v * dim + k]).sum::<f64>() / dim as f64)
        .collect();
    let to_face: Vec<f64> = (0..dim)
        .map(|k| centroid[k] - coords[opposite * dim + k])
        .collect();
    let dot: f64 = n.iter().zip(&to_face).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        verts.swap(0, 1);
    }
    verts
}

/// Unit normal and measure implied by the stored vertex order.
fn facet_normal_area_of(dim: usize, coords: &[f64], verts: &[usize; 3]) -> Result<(Vec<f64>, f64)> {
    let at = |v: usize, k: usize| coords[v * dim + k];
    match dim {
        2 => {
            let (a, b) = (verts[0], verts[1]);
            let (dx, dy) = (at(b, 0) - at(a, 0), at(b, 1) - at(a, 1));
            let len = (dx * dx + dy * dy).sqrt();
            if len == 0.0 {
                return Err(Error::DegenerateCell(a));
            }
            Ok((vec![dy / len, -dx / len], len))
        }
        3 => {
            let (a, b, c) = (verts[0], verts[1], verts[2]);
            let u = [
                at(b, 0) - at(a, 0),
                at(b, 1) - at(a, 1),
                at(b, 2) - at(a, 2),
            ];
            let v = [
                at(c, 0) - at(a, 0),
                at(c, 1) - at(a, 1),
                at(c, 2) - at(a, 2),
            ];
            let n = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateCell(a));
            }
            Ok((vec![n[0] / norm, n[1] / norm, n[2] / norm], 0.5 * norm))
        }
        _ => unreachable!(),
    }
}

/// Signed volume of a simplex under the stored vertex order.
pub(crate) fn signed_volume(dim: usize, coords: &[f64], cell_verts: &[usize]) -> f64 {
    let at = |v: usize, k: usize| coords[cell_verts[v] * dim + k];
    match dim {
        2 => {
            let (ax, ay) = (at(0, 0), at(0, 1));
            0.5 * ((at(1, 0) - ax) * (at(2, 1) - ay) - (at(2, 0) - ax) * (at(1, 1) - ay))
        }
        3 => {
            let (ax, ay, az) = (at(0, 0), at(0, 1), at(0, 2));
            let m = [
                [at(1, 0) - ax, at(1, 1) - ay, at(1, 2) - az],
                [at(2, 0) - ax, at(2, 1) - ay, at(2, 2) - az],
                [at(3, 0) - ax, at(3, 1) - ay, at(3, 2) - az],
            ];
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            det / 6.0
        }
        _ => unreachable!(),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cell_quality_of(dim: usize, coords: &[f64], cell_verts: &[usize]) -> f64 {
    let vol = signed_volume(dim, coords, cell_verts);
    if vol <= 0.0 {
        return 0.0;
    }
    let v = |i: usize| &coords[cell_verts[i] * dim..cell_verts[i] * dim + dim];
    match dim {
        2 => {
            let (a, b, c) = (dist(v(1), v(2)), dist(v(0), v(2)), dist(v(0), v(1)));
            let s = 0.5 * (a + b + c);
            if s == 0.0 {
                return 0.0;
            }
            let inradius = vol / s;
            let circum = a * b * c / (4.0 * vol);
            if circum == 0.0 {
                return 0.0;
            }
            (2.0 * inradius / circum).clamp(0.0, 1.0)
        }
        3 => {
            // inradius = 3V / (total face area)
            let face_area = |i: usize, j: usize, k: usize| {
                let u: Vec<f64> = (0..3).map(|m| v(j)[m] - v(i)[m]).collect();
                let w: Vec<f64> = (0..3).map(|m| v(k)[m] - v(i)[m]).collect();
                let n = [
                    u[1] * w[2] - u[2] * w[1],
                    u[2] * w[0] - u[0] * w[2],
                    u[0] * w[1] - u[1] * w[0],
                ];
                0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
            };
            let total =
                face_area(0, 1, 2) + face_area(0, 1, 3) + face_area(0, 2, 3) + face_area(1, 2, 3);
            if total == 0.0 {
                return 0.0;
            }
            let inradius = 3.0 * vol / total;
            // circumcenter from 2 (x_i - x_0) . c = |x_i|^2 - |x_0|^2
            let x0 = v(0);
            let mut m = [[0.0; 3]; 3];
            let mut rhs = [0.0; 3];
            for i in 1..4 {
                let xi = v(i);
                for k in 0..3 {
                    m[i - 1][k] = 2.0 * (xi[k] - x0[k]);
                }
                rhs[i - 1] =
                    xi.iter().map(|x| x * x).sum::<f64>() - x0.iter().map(|x| x * x).sum::<f64>();
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            if det == 0.0 {
                return 0.0;
            }
            let solve_col = |col: usize| {
                let mut mm = m;
                for row in &mut mm {
                    row[col] = 0.0;
                }
                mm[0][col] = rhs[0];
                mm[1][col] = rhs[1];
                mm[2][col] = rhs[2];
                (mm[0][0] * (mm[1][1] * mm[2][2] - mm[1][2] * mm[2][1])
                    - mm[0][1] * (mm[1][0] * mm[2][2] - mm[1][2] * mm[2][0])
                    + mm[0][2] * (mm[1][0] * mm[2][1] - mm[1][1] * mm[2][0]))
                    / det
            };
            let center = [solve_col(0), solve_col(1), solve_col(2)];
            let circum = dist(&center, x0);
            if circum == 0.0 {
                return 0.0;
            }
            (3.0 * inradius / circum).clamp(0.0, 1.0)
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// One positively oriented unit right triangle with all edges tagged.
    pub(crate) fn unit_triangle() -> Mesh {
        Mesh::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            vec![0, 1, 2],
            vec![
                (vec![0, 1], BoundaryTag::CylWall),
                (vec![1, 2], BoundaryTag::Outlet),
                (vec![2, 0], BoundaryTag::Inlet),
            ],
        )
        .unwrap()
    }

    fn unit_tet() -> Mesh {
        Mesh::new(
            3,
            vec![
                0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
            vec![0, 1, 2, 3],
            vec![
                (vec![0, 1, 2], BoundaryTag::CylWall),
                (vec![0, 1, 3], BoundaryTag::CylWall),
                (vec![0, 2, 3], BoundaryTag::Inlet),
                (vec![1, 2, 3], BoundaryTag::Outlet),
            ],
        )
        .unwrap()
    }

    #[test]
    fn triangle_area() {
        let mesh = unit_triangle();
        assert_relative_eq!(mesh.cell_volume(0).unwrap(), 0.5);
    }

    #[test]
    fn tet_volume() {
        let mesh = unit_tet();
        assert_relative_eq!(mesh.cell_volume(0).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn degenerate_cell_rejected_at_load() {
        // two coincident vertices -> zero signed volume
        let err = Mesh::new(2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0], vec![0, 1, 2], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn zero_volume_reported_as_zero() {
        // degeneracy checked through the free function so the "-> 0" contract
        // of the volume formula itself is covered
        let coords = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(signed_volume(2, &coords, &[0, 1, 2]), 0.0);
    }

    #[test]
    fn cell_volume_bad_index() {
        let mesh = unit_triangle();
        assert!(mesh.cell_volume(1).is_err());
    }

    #[test]
    fn facet_normals_axis_aligned() {
        let mesh = unit_triangle();
        // bottom edge (0,0)-(1,0), cell above -> n = (0,-1), length 1
        let f = mesh.facets_with_tag(BoundaryTag::CylWall).next().unwrap();
        let (n, len) = mesh.facet_normal_area(f).unwrap();
        assert_relative_eq!(n[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(n[1], -1.0);
        assert_relative_eq!(len, 1.0);
    }

    #[test]
    fn facet_normal_left_edge_length_two() {
        // edge (0,0)-(0,2) of a cell to its right -> n = (-1,0), length 2
        let mesh = Mesh::new(
            2,
            vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0],
            vec![0, 1, 2],
            vec![
                (vec![0, 1], BoundaryTag::CylWall),
                (vec![1, 2], BoundaryTag::Outlet),
                (vec![2, 0], BoundaryTag::Inlet),
            ],
        )
        .unwrap();
        let f = mesh.facets_with_tag(BoundaryTag::Inlet).next().unwrap();
        let (n, len) = mesh.facet_normal_area(f).unwrap();
        assert_relative_eq!(n[0], -1.0);
        assert_relative_eq!(n[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(len, 2.0);
    }

    #[test]
    fn facet_of_reference_tet_has_unit_square_pieces() {
        let mesh = unit_tet();
        // face z=0 of the unit tet: area 1/2, normal (0,0,-1)
        let f = (0..mesh.facet_count())
            .find(|&f| {
                let fv = mesh.facet_vertices(f);
                fv.iter().all(|&v| mesh.vertex(v)[2] == 0.0)
            })
            .unwrap();
        let (n, area) = mesh.facet_normal_area(f).unwrap();
        assert_relative_eq!(area, 0.5);
        assert_relative_eq!(n[2], -1.0);
    }

    #[test]
    fn quality_equilateral_is_one() {
        let h = (3.0f64).sqrt() / 2.0;
        let mesh = Mesh::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.5, h],
            vec![0, 1, 2],
            vec![
                (vec![0, 1], BoundaryTag::CylWall),
                (vec![1, 2], BoundaryTag::CylWall),
                (vec![2, 0], BoundaryTag::CylWall),
            ],
        )
        .unwrap();
        assert_relative_eq!(mesh.cell_quality(0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quality_collinear_is_zero() {
        let coords = vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0];
        assert_eq!(cell_quality_of(2, &coords, &[0, 1, 2]), 0.0);
    }

    #[test]
    fn quality_right_isoceles() {
        // legs 1: r = (2 - sqrt(2))/2, R = sqrt(2)/2, q = 2 r / R
        let mesh = unit_triangle();
        let expected = 2.0 * ((2.0 - 2f64.sqrt()) / 2.0) / (2f64.sqrt() / 2.0);
        assert_relative_eq!(mesh.cell_quality(0), expected, epsilon = 1e-12);
        assert_relative_eq!(mesh.cell_quality(0), 0.8284271247461903, epsilon = 1e-12);
    }

    #[test]
    fn quality_regular_tet_is_one() {
        // regular tetrahedron with edge sqrt(2)
        let mesh = Mesh::new(
            3,
            vec![
                1.0, 1.0, 1.0, //
                1.0, -1.0, -1.0, //
                -1.0, 1.0, -1.0, //
                -1.0, -1.0, 1.0,
            ],
            vec![0, 1, 2, 3],
            vec![
                (vec![0, 1, 2], BoundaryTag::CylWall),
                (vec![0, 1, 3], BoundaryTag::CylWall),
                (vec![0, 2, 3], BoundaryTag::CylWall),
                (vec![1, 2, 3], BoundaryTag::CylWall),
            ],
        )
        .unwrap();
        assert_relative_eq!(mesh.cell_quality(0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn min_quality_uniform_mesh() {
        let mesh = crate::casegen::structured_channel(1.0, 1.0, 4, 4, false).unwrap();
        // split-diagonal mesh of right isoceles triangles
        assert_relative_eq!(
            mesh.min_quality().unwrap(),
            0.8284271247461903,
            epsilon = 1e-12
        );
    }

    #[test]
    fn displacement_identity_accepted() {
        let mut mesh = unit_triangle();
        let before = mesh.coords().to_vec();
        let out = mesh
            .apply_displacement(&VertexDisplacement::zeros(&mesh), 0.1)
            .unwrap();
        assert!(out.is_accepted());
        assert_eq!(mesh.coords(), &before[..]);
    }

    #[test]
    fn displacement_rigid_translation_preserves_quality() {
        let mut mesh = unit_triangle();
        let q0 = mesh.min_quality().unwrap();
        let v0 = mesh.cell_volume(0).unwrap();
        let d = VertexDisplacement::from_vec(vec![3.0, -2.0, 3.0, -2.0, 3.0, -2.0]);
        assert!(mesh.apply_displacement(&d, 0.1).unwrap().is_accepted());
        assert_relative_eq!(mesh.min_quality().unwrap(), q0, epsilon = 1e-12);
        assert_relative_eq!(mesh.cell_volume(0).unwrap(), v0, epsilon = 1e-12);
    }

    #[test]
    fn displacement_inverting_cell_rejected() {
        let mut mesh = unit_triangle();
        let before = mesh.coords().to_vec();
        // drag vertex 0 across the opposite edge x + y = 1
        let d = VertexDisplacement::from_vec(vec![2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let out = mesh.apply_displacement(&d, 0.1).unwrap();
        match out {
            DisplacementOutcome::Rejected { min_quality, cell } => {
                assert_eq!(min_quality, 0.0);
                assert_eq!(cell, 0);
            }
            DisplacementOutcome::Accepted => panic!("inverted cell accepted"),
        }
        assert_eq!(mesh.coords(), &before[..]);
    }

    #[test]
    fn displacement_length_mismatch_is_error() {
        let mut mesh = unit_triangle();
        let d = VertexDisplacement::from_vec(vec![0.0; 4]);
        assert!(mesh.apply_displacement(&d, 0.1).is_err());
    }

    #[test]
    fn displacement_roundtrip_restores_coordinates() {
        let mut mesh = crate::casegen::structured_channel(4.0, 1.0, 8, 4, true).unwrap();
        let before = mesh.coords().to_vec();
        let d = VertexDisplacement::from_vec(
            (0..mesh.vertex_count() * 2)
                .map(|i| 0.01 * ((i * 7919 % 13) as f64 / 13.0 - 0.5))
                .collect(),
        );
        assert!(mesh.apply_displacement(&d, 0.0).unwrap().is_accepted());
        assert!(mesh
            .apply_displacement(&d.scaled(-1.0), 0.0)
            .unwrap()
            .is_accepted());
        for (a, b) in mesh.coords().iter().zip(&before) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn untagged_boundary_is_error() {
        let err = Mesh::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            vec![0, 1, 2],
            vec![(vec![0, 1], BoundaryTag::CylWall)],
        );
        assert!(matches!(err, Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn volume_sum_matches_analytic_area() {
        let mesh = crate::casegen::structured_channel(4.0, 1.0, 16, 8, true).unwrap();
        let total: f64 = (0..mesh.cell_count())
            .map(|c| mesh.cell_volume(c).unwrap())
            .sum();
        assert_relative_eq!(total, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn tagged_measures_match_analytic_boundary() {
        let mesh = crate::casegen::structured_channel(4.0, 1.0, 16, 8, false).unwrap();
        assert_relative_eq!(
            mesh.tagged_measure(&[BoundaryTag::Inlet]).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            mesh.tagged_measure(&[BoundaryTag::Outlet]).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            mesh.tagged_measure(&[BoundaryTag::CylWall]).unwrap(),
            8.0,
            max_relative = 1e-12
        );
    }

    proptest! {
        /// Quality is invariant under rigid motion and uniform scaling.
        #[test]
        fn quality_rigid_and_scale_invariant(
            angle in 0.0f64..std::f64::consts::TAU,
            tx in -5.0f64..5.0,
            ty in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let coords = [0.0, 0.0, 1.3, 0.2, 0.4, 0.9];
            let q0 = cell_quality_of(2, &coords, &[0, 1, 2]);
            let (s, c) = angle.sin_cos();
            let mut moved = [0.0; 6];
            for i in 0..3 {
                let (x, y) = (coords[2 * i], coords[2 * i + 1]);
                moved[2 * i] = scale * (c * x - s * y) + tx;
                moved[2 * i + 1] = scale * (s * x + c * y) + ty;
            }
            let q1 = cell_quality_of(2, &moved, &[0, 1, 2]);
            prop_assert!((q0 - q1).abs() < 1e-10);
        }
    }
}
