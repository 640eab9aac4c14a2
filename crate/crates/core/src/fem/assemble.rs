//! Canonical P1 assemblers and the deterministic parallel cell loop.
//!
//! Parallel assembly splits the cell range into fixed-size chunks, builds a
//! local triplet buffer per chunk, and merges the buffers in chunk order.
//! The result is bitwise identical for any thread count, including one.

use std::sync::OnceLock;

use crate::error::Result;
use crate::fem::quadrature::cell_rule;
use crate::fem::space::ElementGeom;
use crate::fem::sparse::{CooBuilder, CsrMatrix};
use crate::mesh::Mesh;

const CHUNK: usize = 512;

/// Shared assembly pool. `PACKOPT_THREADS` caps the worker count; unset or
/// `0` means the rayon default.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("PACKOPT_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build assembly thread pool")
    })
}

/// Runs `per_cell` over all cells in parallel chunks and merges the triplet
/// buffers in a fixed order.
pub fn assemble_matrix<F>(
    ncells: usize,
    nrows: usize,
    ncols: usize,
    per_cell: F,
) -> Result<CsrMatrix>
where
    F: Fn(usize, &mut CooBuilder) -> Result<()> + Sync,
{
    use rayon::prelude::*;
    let starts: Vec<usize> = (0..ncells).step_by(CHUNK).collect();
    let buffers: Vec<Result<CooBuilder>> = thread_pool().install(|| {
        starts
            .par_iter()
            .map(|&start| {
                let mut local = CooBuilder::new(nrows, ncols);
                for cell in start..(start + CHUNK).min(ncells) {
                    per_cell(cell, &mut local)?;
                }
                Ok(local)
            })
            .collect()
    });
    let mut merged = CooBuilder::with_capacity(nrows, ncols, 0);
    merged.reserve_diagonal();
    for buf in buffers {
        merged.append(&mut buf?);
    }
    Ok(merged.build())
}

/// Parallel-chunked accumulation into a dense vector, deterministic like
/// [`assemble_matrix`].
pub fn assemble_vector<F>(ncells: usize, ndof: usize, per_cell: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut Vec<(usize, f64)>) -> Result<()> + Sync,
{
    use rayon::prelude::*;
    let starts: Vec<usize> = (0..ncells).step_by(CHUNK).collect();
    let buffers: Vec<Result<Vec<(usize, f64)>>> = thread_pool().install(|| {
        starts
            .par_iter()
            .map(|&start| {
                let mut local = Vec::new();
                for cell in start..(start + CHUNK).min(ncells) {
                    per_cell(cell, &mut local)?;
                }
                Ok(local)
            })
            .collect()
    });
    let mut out = vec![0.0; ndof];
    for buf in buffers {
        for (dof, v) in buf? {
            out[dof] += v;
        }
    }
    Ok(out)
}

/// P1 mass matrix, integrated with the shared cell rule.
pub fn assemble_mass(mesh: &Mesh) -> CsrMatrix {
    let nv = mesh.vertex_count();
    let rule = cell_rule(mesh.dim());
    assemble_matrix(mesh.cell_count(), nv, nv, |cell, coo| {
        let g = ElementGeom::new(mesh, cell)?;
        let n = g.nverts();
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for q in rule {
                    s += q.weight * q.bary[i] * q.bary[j];
                }
                coo.push(g.verts[i], g.verts[j], s * g.vol);
            }
        }
        Ok(())
    })
    .expect("mass assembly cannot fail")
}

/// P1 stiffness matrix `coeff * (grad u, grad v)`.
pub fn assemble_stiffness(mesh: &Mesh, coeff: f64) -> CsrMatrix {
    let nv = mesh.vertex_count();
    let dim = mesh.dim();
    assemble_matrix(mesh.cell_count(), nv, nv, |cell, coo| {
        let g = ElementGeom::new(mesh, cell)?;
        let n = g.nverts();
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..dim {
                    s += g.grads[i][k] * g.grads[j][k];
                }
                coo.push(g.verts[i], g.verts[j], coeff * s * g.vol);
            }
        }
        Ok(())
    })
    .expect("stiffness assembly cannot fail")
}

/// Load vector of a constant source: `f * integral(phi_i)`.
pub fn assemble_load_constant(mesh: &Mesh, f: f64) -> Vec<f64> {
    let nv = mesh.vertex_count();
    let dim = mesh.dim();
    assemble_vector(mesh.cell_count(), nv, |cell, out| {
        let g = ElementGeom::new(mesh, cell)?;
        let share = f * g.vol / (dim as f64 + 1.0);
        for &v in g.vert_ids() {
            out.push((v, share));
        }
        Ok(())
    })
    .expect("load assembly cannot fail")
}
