//! Built-in case geometries: structured channel meshes and a channel with
//! circular obstacles meshed by constrained Delaunay refinement. These
//! stand in for external CAD geometry; real meshes enter through MSH files.

use std::collections::{HashMap, HashSet};

use spade::{
    AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation,
};

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Mesh};

/// Structured triangulation of the channel [0, length] x [0, height].
/// Left edge is tagged Inlet, right edge Outlet, top and bottom CylWall.
/// With `crisscross` each quad is split into four triangles around its
/// center (mirror-symmetric pattern); otherwise into two by the diagonal.
pub fn structured_channel(
    length: f64,
    height: f64,
    nx: usize,
    ny: usize,
    crisscross: bool,
) -> Result<Mesh> {
    structured_channel_with_hole(length, height, nx, ny, crisscross, None)
}

/// Same as [`structured_channel`], optionally carving a rectangular hole
/// given by grid-index bounds (i0..i1, j0..j1) in quad coordinates; the
/// hole boundary is tagged Packing.
pub fn structured_channel_with_hole(
    length: f64,
    height: f64,
    nx: usize,
    ny: usize,
    crisscross: bool,
    hole: Option<(usize, usize, usize, usize)>,
) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidGeometry("nx and ny must be positive".into()));
    }
    if !(length > 0.0 && height > 0.0) {
        return Err(Error::InvalidGeometry(
            "channel dimensions must be positive".into(),
        ));
    }
    if let Some((i0, i1, j0, j1)) = hole {
        if !(i0 < i1 && i1 < nx && i0 > 0 && j0 < j1 && j1 < ny && j0 > 0) {
            return Err(Error::InvalidGeometry(
                "hole index bounds must lie strictly inside the quad grid".into(),
            ));
        }
    }
    let (dx, dy) = (length / nx as f64, height / ny as f64);
    // y-fastest numbering keeps the matrix bandwidth at O(ny)
    let gv = |i: usize, j: usize| i * (ny + 1) + j;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * 2);
    for i in 0..=nx {
        for j in 0..=ny {
            vertices.push(i as f64 * dx);
            vertices.push(j as f64 * dy);
        }
    }
    let in_hole = |i: usize, j: usize| {
        hole.is_some_and(|(i0, i1, j0, j1)| i >= i0 && i < i1 && j >= j0 && j < j1)
    };
    let mut cells = Vec::new();
    let mut center_of: HashMap<(usize, usize), usize> = HashMap::new();
    for i in 0..nx {
        for j in 0..ny {
            if in_hole(i, j) {
                continue;
            }
            let (v00, v10, v11, v01) = (gv(i, j), gv(i + 1, j), gv(i + 1, j + 1), gv(i, j + 1));
            if crisscross {
                let c = vertices.len() / 2;
                vertices.push((i as f64 + 0.5) * dx);
                vertices.push((j as f64 + 0.5) * dy);
                center_of.insert((i, j), c);
                cells.extend_from_slice(&[v00, v10, c, v10, v11, c, v11, v01, c, v01, v00, c]);
            } else {
                cells.extend_from_slice(&[v00, v10, v11, v00, v11, v01]);
            }
        }
    }
    let mut facets = Vec::new();
    for j in 0..ny {
        if !in_hole(0, j) {
            facets.push((vec![gv(0, j), gv(0, j + 1)], BoundaryTag::Inlet));
        }
        if !in_hole(nx - 1, j) {
            facets.push((vec![gv(nx, j), gv(nx, j + 1)], BoundaryTag::Outlet));
        }
    }
    for i in 0..nx {
        if !in_hole(i, 0) {
            facets.push((vec![gv(i, 0), gv(i + 1, 0)], BoundaryTag::CylWall));
        }
        if !in_hole(i, ny - 1) {
            facets.push((vec![gv(i, ny), gv(i + 1, ny)], BoundaryTag::CylWall));
        }
    }
    if let Some((i0, i1, j0, j1)) = hole {
        for j in j0..j1 {
            facets.push((vec![gv(i0, j), gv(i0, j + 1)], BoundaryTag::Packing));
            facets.push((vec![gv(i1, j), gv(i1, j + 1)], BoundaryTag::Packing));
        }
        for i in i0..i1 {
            facets.push((vec![gv(i, j0), gv(i + 1, j0)], BoundaryTag::Packing));
            facets.push((vec![gv(i, j1), gv(i + 1, j1)], BoundaryTag::Packing));
        }
    }
    // drop vertices orphaned by the hole (interior grid points and their
    // quad centers) by remapping through the used set
    compact_mesh(2, vertices, cells, facets)
}

/// A circular obstacle: center and radius.
#[derive(Debug, Clone, Copy)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Parameters of the channel-obstacles case.
#[derive(Debug, Clone)]
pub struct ChannelObstaclesParams {
    pub length: f64,
    pub height: f64,
    pub obstacles: Vec<Obstacle>,
    /// Target element edge length.
    pub resolution: f64,
    /// Polygon segments approximating each circle.
    pub segments: usize,
}

/// Staggered obstacle layout across the channel midsection (the built-in
/// desk arrangement used by the CLI and the acceptance runs).
pub fn staggered_obstacles(length: f64, height: f64, count: usize, radius: f64) -> Vec<Obstacle> {
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let frac = (k as f64 + 1.0) / (count as f64 + 1.0);
        let cx = 0.15 * length + 0.7 * length * frac;
        let cy = if k % 2 == 0 {
            0.38 * height
        } else {
            0.62 * height
        };
        out.push(Obstacle { cx, cy, r: radius });
    }
    out
}

/// Meshes the channel [0, L] x [0, H] minus polygonal obstacles with a
/// quality-refined constrained Delaunay triangulation. Obstacle boundaries
/// are tagged Packing, the left edge Inlet, the right edge Outlet, the top
/// and bottom CylWall.
pub fn channel_with_obstacles(params: &ChannelObstaclesParams) -> Result<Mesh> {
    let (length, height, h) = (params.length, params.height, params.resolution);
    if !(length > 0.0 && height > 0.0 && h > 0.0) {
        return Err(Error::InvalidGeometry(
            "channel dimensions and resolution must be positive".into(),
        ));
    }
    if params.segments < 8 {
        return Err(Error::InvalidGeometry(
            "need at least 8 segments per obstacle".into(),
        ));
    }
    for (k, o) in params.obstacles.iter().enumerate() {
        if o.r < 2.0 * h {
            return Err(Error::InvalidGeometry(format!(
                "resolution {h} too coarse to resolve obstacle {k} of radius {}",
                o.r
            )));
        }
        let clear = o.r + 2.0 * h;
        if o.cx - clear < 0.0
            || o.cx + clear > length
            || o.cy - clear < 0.0
            || o.cy + clear > height
        {
            return Err(Error::InvalidGeometry(format!(
                "obstacle {k} too close to the channel boundary"
            )));
        }
        for (m, p) in params.obstacles.iter().enumerate().skip(k + 1) {
            let d = ((o.cx - p.cx).powi(2) + (o.cy - p.cy).powi(2)).sqrt();
            if d < o.r + p.r + 2.0 * h {
                return Err(Error::InvalidGeometry(format!(
                    "obstacles {k} and {m} overlap or nearly touch"
                )));
            }
        }
    }

    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::new();
    let insert = |cdt: &mut ConstrainedDelaunayTriangulation<Point2<f64>>, x: f64, y: f64| {
        cdt.insert(Point2::new(x, y))
            .map_err(|e| Error::InvalidGeometry(format!("point insertion failed: {e:?}")))
    };
    let corners = [
        insert(&mut cdt, 0.0, 0.0)?,
        insert(&mut cdt, length, 0.0)?,
        insert(&mut cdt, length, height)?,
        insert(&mut cdt, 0.0, height)?,
    ];
    for k in 0..4 {
        cdt.add_constraint(corners[k], corners[(k + 1) % 4]);
    }
    for o in &params.obstacles {
        let n = params.segments;
        let mut ring = Vec::with_capacity(n);
        for k in 0..n {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            ring.push(insert(
                &mut cdt,
                o.cx + o.r * t.cos(),
                o.cy + o.r * t.sin(),
            )?);
        }
        for k in 0..n {
            cdt.add_constraint(ring[k], ring[(k + 1) % n]);
        }
    }
    let refinement = RefinementParameters::<f64>::new()
        .exclude_outer_faces(true)
        .with_angle_limit(AngleLimit::from_deg(30.0))
        .with_max_allowed_area(0.5 * h * h)
        .with_max_additional_vertices(4_000_000);
    let outcome = cdt.refine(refinement);
    if !outcome.refinement_complete {
        return Err(Error::InvalidGeometry(
            "mesh refinement hit its vertex budget before reaching the target quality".into(),
        ));
    }
    let excluded: HashSet<usize> = outcome.excluded_faces.iter().map(|f| f.index()).collect();

    let mut vertices = Vec::with_capacity(cdt.num_vertices() * 2);
    for v in cdt.vertices() {
        let p = v.position();
        vertices.push(p.x);
        vertices.push(p.y);
    }
    let mut cells = Vec::new();
    for face in cdt.inner_faces() {
        if excluded.contains(&face.fix().index()) {
            continue;
        }
        for v in face.vertices() {
            cells.push(v.fix().index());
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidGeometry("no interior cells remain".into()));
    }

    // boundary edges of the kept triangulation, then classify geometrically
    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    for tri in cells.chunks(3) {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            *edge_count.entry(key).or_insert(0) += 1;
        }
    }
    let tol = 1e-9 * length.max(height);
    let classify = |a: usize, b: usize| -> Result<BoundaryTag> {
        let (xa, ya) = (vertices[2 * a], vertices[2 * a + 1]);
        let (xb, yb) = (vertices[2 * b], vertices[2 * b + 1]);
        if xa.abs() <= tol && xb.abs() <= tol {
            return Ok(BoundaryTag::Inlet);
        }
        if (xa - length).abs() <= tol && (xb - length).abs() <= tol {
            return Ok(BoundaryTag::Outlet);
        }
        if (ya.abs() <= tol && yb.abs() <= tol)
            || ((ya - height).abs() <= tol && (yb - height).abs() <= tol)
        {
            return Ok(BoundaryTag::CylWall);
        }
        for o in &params.obstacles {
            let near = |x: f64, y: f64| {
                let d = ((x - o.cx).powi(2) + (y - o.cy).powi(2)).sqrt();
                d <= o.r + tol && d >= o.r * 0.8
            };
            if near(xa, ya) && near(xb, yb) {
                return Ok(BoundaryTag::Packing);
            }
        }
        Err(Error::InvalidGeometry(format!(
            "boundary edge ({xa}, {ya})-({xb}, {yb}) matches no geometric feature"
        )))
    };
    let mut facets = Vec::new();
    let mut keys: Vec<(usize, usize)> = edge_count
        .iter()
        .filter(|(_, &c)| c == 1)
        .map(|(&k, _)| k)
        .collect();
    keys.sort_unstable();
    for (a, b) in keys {
        facets.push((vec![a, b], classify(a, b)?));
    }

    let mesh = compact_mesh(2, vertices, cells, facets)?;
    let q = mesh.min_quality()?;
    if q < 0.3 {
        return Err(Error::InvalidGeometry(format!(
            "generated mesh quality {q:.3} below the 0.3 floor"
        )));
    }
    Ok(mesh)
}

/// Drops unused vertices and builds the mesh.
fn compact_mesh(
    dim: usize,
    vertices: Vec<f64>,
    cells: Vec<usize>,
    facets: Vec<(Vec<usize>, BoundaryTag)>,
) -> Result<Mesh> {
    let nv = vertices.len() / dim;
    let mut used = vec![false; nv];
    for &v in &cells {
        used[v] = true;
    }
    let mut remap = vec![usize::MAX; nv];
    let mut packed = Vec::new();
    let mut next = 0usize;
    for v in 0..nv {
        if used[v] {
            remap[v] = next;
            packed.extend_from_slice(&vertices[v * dim..(v + 1) * dim]);
            next += 1;
        }
    }
    let cells: Vec<usize> = cells.iter().map(|&v| remap[v]).collect();
    let facets: Vec<(Vec<usize>, BoundaryTag)> = facets
        .into_iter()
        .map(|(fv, tag)| (fv.iter().map(|&v| remap[v]).collect(), tag))
        .collect();
    Mesh::new(dim, packed, cells, facets)
}
