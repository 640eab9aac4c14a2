//! MSH 2.2 ASCII subset: `$MeshFormat 2.2 0 8`, `$Nodes`, `$Elements` with
//! element types 1 (line), 2 (triangle), 4 (tetrahedron). Physical tags of
//! codimension-1 elements map onto the boundary tag codes 1..=5. Binary
//! files, other versions and other element types are rejected.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Mesh};

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

pub fn read_msh(path: &Path) -> Result<Mesh> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_msh(&text, &path.display().to_string())
}

pub fn parse_msh(text: &str, path: &str) -> Result<Mesh> {
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0usize;
    let mut nodes: Vec<(u64, [f64; 3])> = Vec::new();
    let mut elements: Vec<(usize, usize, Vec<u64>)> = Vec::new(); // (type, physical tag, node ids)
    let mut format_seen = false;

    while i < lines.len() {
        let line = lines[i].trim();
        match line {
            "$MeshFormat" => {
                let fmt = lines
                    .get(i + 1)
                    .ok_or_else(|| parse_err(path, i + 2, "truncated $MeshFormat"))?
                    .trim();
                let mut parts = fmt.split_whitespace();
                let version = parts.next().unwrap_or("");
                let file_type = parts.next().unwrap_or("");
                if version != "2.2" {
                    return Err(parse_err(
                        path,
                        i + 2,
                        format!("unsupported MSH version `{version}` (only 2.2 ASCII is read)"),
                    ));
                }
                if file_type != "0" {
                    return Err(parse_err(
                        path,
                        i + 2,
                        "binary MSH files are not supported (file-type must be 0)",
                    ));
                }
                format_seen = true;
                i += 2;
                expect_line(&lines, &mut i, "$EndMeshFormat", path)?;
            }
            "$Nodes" => {
                let n: usize = lines
                    .get(i + 1)
                    .and_then(|l| l.trim().parse().ok())
                    .ok_or_else(|| parse_err(path, i + 2, "bad node count"))?;
                for k in 0..n {
                    let row = lines
                        .get(i + 2 + k)
                        .ok_or_else(|| parse_err(path, i + 3 + k, "truncated $Nodes"))?;
                    let mut parts = row.split_whitespace();
                    let id: u64 = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err(path, i + 3 + k, "bad node id"))?;
                    let mut xyz = [0.0f64; 3];
                    for x in &mut xyz {
                        *x = parts
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| parse_err(path, i + 3 + k, "bad node coordinate"))?;
                    }
                    nodes.push((id, xyz));
                }
                i += 2 + n;
                expect_line(&lines, &mut i, "$EndNodes", path)?;
            }
            "$Elements" => {
                let n: usize = lines
                    .get(i + 1)
                    .and_then(|l| l.trim().parse().ok())
                    .ok_or_else(|| parse_err(path, i + 2, "bad element count"))?;
                for k in 0..n {
                    let row = lines
                        .get(i + 2 + k)
                        .ok_or_else(|| parse_err(path, i + 3 + k, "truncated $Elements"))?;
                    let toks: Vec<&str> = row.split_whitespace().collect();
                    if toks.len() < 3 {
                        return Err(parse_err(path, i + 3 + k, "short element row"));
                    }
                    let etype: usize = toks[1]
                        .parse()
                        .map_err(|_| parse_err(path, i + 3 + k, "bad element type"))?;
                    let ntags: usize = toks[2]
                        .parse()
                        .map_err(|_| parse_err(path, i + 3 + k, "bad tag count"))?;
                    let nnodes = match etype {
                        1 => 2,
                        2 => 3,
                        4 => 4,
                        3 => {
                            return Err(parse_err(
                                path,
                                i + 3 + k,
                                "quad elements (type 3) are not supported",
                            ))
                        }
                        other => {
                            return Err(parse_err(
                                path,
                                i + 3 + k,
                                format!("unknown element type {other}"),
                            ))
                        }
                    };
                    if toks.len() < 3 + ntags + nnodes {
                        return Err(parse_err(path, i + 3 + k, "element row too short"));
                    }
                    let ptag: usize = if ntags > 0 {
                        toks[3]
                            .parse()
                            .map_err(|_| parse_err(path, i + 3 + k, "bad physical tag"))?
                    } else {
                        0
                    };
                    let ids: std::result::Result<Vec<u64>, _> = toks[3 + ntags..3 + ntags + nnodes]
                        .iter()
                        .map(|t| t.parse::<u64>())
                        .collect();
                    let ids = ids.map_err(|_| parse_err(path, i + 3 + k, "bad element node id"))?;
                    elements.push((etype, ptag, ids));
                }
                i += 2 + n;
                expect_line(&lines, &mut i, "$EndElements", path)?;
            }
            "" => i += 1,
            other if other.starts_with('$') => {
                // skip unknown sections up to their matching end marker
                let end = format!("$End{}", &other[1..]);
                let mut j = i + 1;
                while j < lines.len() && lines[j].trim() != end {
                    j += 1;
                }
                if j == lines.len() {
                    return Err(parse_err(
                        path,
                        i + 1,
                        format!("unterminated section {other}"),
                    ));
                }
                i = j + 1;
            }
            _ => return Err(parse_err(path, i + 1, format!("unexpected line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(parse_err(path, 1, "missing $MeshFormat"));
    }
    if nodes.is_empty() {
        return Err(parse_err(path, 1, "no nodes"));
    }

    // dimension: tetrahedra present -> 3D, else triangles are the cells
    let has_tet = elements.iter().any(|(t, _, _)| *t == 4);
    let dim = if has_tet { 3 } else { 2 };
    let (cell_type, facet_type) = if has_tet { (4, 2) } else { (2, 1) };

    // non-contiguous ids are remapped in first-appearance order
    let mut remap: HashMap<u64, usize> = HashMap::new();
    let mut coords = Vec::with_capacity(nodes.len() * dim);
    for (id, xyz) in &nodes {
        if remap.insert(*id, remap.len()).is_some() {
            return Err(parse_err(path, 1, format!("duplicate node id {id}")));
        }
        coords.extend_from_slice(&xyz[..dim]);
    }
    let lookup = |id: u64| -> Result<usize> {
        remap
            .get(&id)
            .copied()
            .ok_or_else(|| Error::InvalidMesh(format!("element references unknown node {id}")))
    };

    let mut cells = Vec::new();
    let mut facets = Vec::new();
    for (etype, ptag, ids) in &elements {
        if *etype == cell_type {
            for &id in ids {
                cells.push(lookup(id)?);
            }
        } else if *etype == facet_type {
            let tag = BoundaryTag::from_code(*ptag).ok_or_else(|| {
                Error::InvalidMesh(format!(
                    "facet {ids:?} carries unrecognized physical tag {ptag} (expected 1-5)"
                ))
            })?;
            let fverts: Result<Vec<usize>> = ids.iter().map(|&id| lookup(id)).collect();
            facets.push((fverts?, tag));
        } else {
            // a line element inside a 3D mesh has no role here
            return Err(Error::InvalidMesh(format!(
                "element type {etype} does not belong to a {dim}D mesh"
            )));
        }
    }
    Mesh::new(dim, coords, cells, facets)
}

fn expect_line(lines: &[&str], i: &mut usize, expected: &str, path: &str) -> Result<()> {
    let got = lines.get(*i).map(|l| l.trim()).unwrap_or("");
    if got != expected {
        return Err(parse_err(path, *i + 1, format!("expected {expected}")));
    }
    *i += 1;
    Ok(())
}

/// Serializes the mesh in the same MSH 2.2 subset the reader accepts.
pub fn msh_string(mesh: &Mesh) -> String {
    let dim = mesh.dim();
    let nv = mesh.vertex_count();
    let mut out = String::from("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n");
    out.push_str(&format!("{nv}\n"));
    for v in 0..nv {
        let x = mesh.vertex(v);
        let z = if dim == 3 { x[2] } else { 0.0 };
        out.push_str(&format!(
            "{} {:.17e} {:.17e} {:.17e}\n",
            v + 1,
            x[0],
            x[1],
            z
        ));
    }
    out.push_str("$EndNodes\n$Elements\n");
    let ne = mesh.facet_count() + mesh.cell_count();
    out.push_str(&format!("{ne}\n"));
    let mut eid = 1usize;
    let facet_type = if dim == 3 { 2 } else { 1 };
    for f in 0..mesh.facet_count() {
        let tag = mesh.facet(f).tag.code();
        let ids: Vec<String> = mesh
            .facet_vertices(f)
            .iter()
            .map(|&v| (v + 1).to_string())
            .collect();
        out.push_str(&format!(
            "{eid} {facet_type} 2 {tag} {tag} {}\n",
            ids.join(" ")
        ));
        eid += 1;
    }
    let cell_type = if dim == 3 { 4 } else { 2 };
    for c in 0..mesh.cell_count() {
        let ids: Vec<String> = mesh
            .cell_vertices(c)
            .iter()
            .map(|&v| (v + 1).to_string())
            .collect();
        out.push_str(&format!("{eid} {cell_type} 2 0 0 {}\n", ids.join(" ")));
        eid += 1;
    }
    out.push_str("$EndElements\n");
    out
}

pub fn write_msh(path: &Path, mesh: &Mesh) -> Result<()> {
    super::write_atomic(path, &msh_string(mesh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const MINIMAL: &str = "$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n3\n1 0 0 0\n2 1 0 0\n3 0 1 0\n$EndNodes\n$Elements\n4\n1 2 2 0 0 1 2 3\n2 1 2 3 3 1 2\n3 1 2 2 2 2 3\n4 1 2 1 1 3 1\n$EndElements\n";

    #[test]
    fn minimal_triangle_roundtrip() {
        let mesh = parse_msh(MINIMAL, "mem").unwrap();
        assert_eq!(mesh.dim(), 2);
        assert_eq!(mesh.cell_count(), 1);
        assert_eq!(mesh.facet_count(), 3);
        assert_relative_eq!(mesh.cell_volume(0).unwrap(), 0.5);
        assert!(mesh.has_tag(BoundaryTag::Inlet));
        assert!(mesh.has_tag(BoundaryTag::Outlet));
        assert!(mesh.has_tag(BoundaryTag::CylWall));
    }

    #[test]
    fn unrecognized_tag_is_error_naming_the_facet() {
        let bad = MINIMAL.replace("2 1 2 3 3 1 2", "2 1 2 7 7 1 2");
        let err = parse_msh(&bad, "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7'), "message should name the tag: {msg}");
    }

    #[test]
    fn version_and_binary_rejected() {
        let v4 = MINIMAL.replace("2.2 0 8", "4.1 0 8");
        assert!(parse_msh(&v4, "mem").is_err());
        let bin = MINIMAL.replace("2.2 0 8", "2.2 1 8");
        assert!(parse_msh(&bin, "mem").is_err());
    }

    #[test]
    fn quad_elements_rejected() {
        let quad = MINIMAL.replace("1 2 2 0 0 1 2 3", "1 3 2 0 0 1 2 3");
        assert!(parse_msh(&quad, "mem").is_err());
    }

    #[test]
    fn noncontiguous_node_ids_are_remapped() {
        let gappy = MINIMAL
            .replace("1 0 0 0", "10 0 0 0")
            .replace("2 1 0 0", "20 1 0 0")
            .replace("3 0 1 0", "30 0 1 0")
            .replace("1 2 2 0 0 1 2 3", "1 2 2 0 0 10 20 30")
            .replace("2 1 2 3 3 1 2", "2 1 2 3 3 10 20")
            .replace("3 1 2 2 2 2 3", "3 1 2 2 2 20 30")
            .replace("4 1 2 1 1 3 1", "4 1 2 1 1 30 10");
        let mesh = parse_msh(&gappy, "mem").unwrap();
        assert_eq!(mesh.vertex_count(), 3);
        assert_relative_eq!(mesh.cell_volume(0).unwrap(), 0.5);
    }

    #[test]
    fn untagged_boundary_facet_is_error() {
        // drop one of the tagged lines: the boundary is no longer covered
        let missing = MINIMAL
            .replace("$Elements\n4\n", "$Elements\n3\n")
            .replace("4 1 2 1 1 3 1\n", "");
        assert!(parse_msh(&missing, "mem").is_err());
    }

    #[test]
    fn generated_mesh_roundtrips_exactly() {
        let mesh = crate::casegen::structured_channel(2.0, 1.0, 6, 3, true).unwrap();
        let text = msh_string(&mesh);
        let back = parse_msh(&text, "mem").unwrap();
        assert_eq!(back.vertex_count(), mesh.vertex_count());
        assert_eq!(back.cell_count(), mesh.cell_count());
        assert_eq!(back.facet_count(), mesh.facet_count());
        for v in 0..mesh.vertex_count() {
            for k in 0..2 {
                assert_eq!(back.vertex(v)[k], mesh.vertex(v)[k]);
            }
        }
        for c in 0..mesh.cell_count() {
            assert_eq!(back.cell_vertices(c), mesh.cell_vertices(c));
        }
        for f in 0..mesh.facet_count() {
            assert_eq!(back.facet(f).tag, mesh.facet(f).tag);
        }
    }

    #[test]
    fn tet_mesh_roundtrip() {
        let mesh = Mesh::new(
            3,
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0, 1, 2, 3],
            vec![
                (vec![0, 1, 2], BoundaryTag::CylWall),
                (vec![0, 1, 3], BoundaryTag::CylWall),
                (vec![0, 2, 3], BoundaryTag::Inlet),
                (vec![1, 2, 3], BoundaryTag::Outlet),
            ],
        )
        .unwrap();
        let back = parse_msh(&msh_string(&mesh), "mem").unwrap();
        assert_eq!(back.dim(), 3);
        assert_relative_eq!(back.cell_volume(0).unwrap(), 1.0 / 6.0);
    }
}
