//! Legacy VTK ASCII writer (UNSTRUCTURED_GRID with POINT_DATA).

use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// A nodal field to export: scalars carry one value per vertex, vectors
/// `dim` values per vertex (padded to 3 components in the file).
pub enum VtkField<'a> {
    Scalar(&'a str, &'a [f64]),
    Vector(&'a str, &'a [f64]),
}

pub fn vtk_string(mesh: &Mesh, fields: &[VtkField<'_>]) -> Result<String> {
    let dim = mesh.dim();
    let nv = mesh.vertex_count();
    for f in fields {
        let (name, len, expected) = match f {
            VtkField::Scalar(n, v) => (*n, v.len(), nv),
            VtkField::Vector(n, v) => (*n, v.len(), nv * dim),
        };
        if len != expected {
            return Err(Error::LengthMismatch { expected, got: len });
        }
        if name.contains(char::is_whitespace) {
            return Err(Error::InvalidConfig(format!(
                "VTK field name `{name}` must not contain whitespace"
            )));
        }
    }
    let mut out = String::from(
        "# vtk DataFile Version 3.0\npackopt fields\nASCII\nDATASET UNSTRUCTURED_GRID\n",
    );
    out.push_str(&format!("POINTS {nv} double\n"));
    for v in 0..nv {
        let x = mesh.vertex(v);
        let z = if dim == 3 { x[2] } else { 0.0 };
        out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", x[0], x[1], z));
    }
    let npc = dim + 1;
    let nc = mesh.cell_count();
    out.push_str(&format!("CELLS {nc} {}\n", nc * (npc + 1)));
    for c in 0..nc {
        let ids: Vec<String> = mesh
            .cell_vertices(c)
            .iter()
            .map(|v| v.to_string())
            .collect();
        out.push_str(&format!("{npc} {}\n", ids.join(" ")));
    }
    let cell_type = if dim == 3 { 10 } else { 5 };
    out.push_str(&format!("CELL_TYPES {nc}\n"));
    for _ in 0..nc {
        out.push_str(&format!("{cell_type}\n"));
    }
    if !fields.is_empty() {
        out.push_str(&format!("POINT_DATA {nv}\n"));
        for f in fields {
            match f {
                VtkField::Scalar(name, vals) => {
                    out.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
                    for v in vals.iter() {
                        out.push_str(&format!("{v:.17e}\n"));
                    }
                }
                VtkField::Vector(name, vals) => {
                    out.push_str(&format!("VECTORS {name} double\n"));
                    for v in 0..nv {
                        let x = &vals[v * dim..(v + 1) * dim];
                        let z = if dim == 3 { x[2] } else { 0.0 };
                        out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", x[0], x[1], z));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_vtk(path: &Path, mesh: &Mesh, fields: &[VtkField<'_>]) -> Result<()> {
    super::write_atomic(path, &vtk_string(mesh, fields)?)
}
