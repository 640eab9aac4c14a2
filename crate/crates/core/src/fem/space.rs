//! Piecewise-linear Lagrange spaces and per-element geometry.

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Continuous P1 space over the mesh vertices with `value_dim` components
/// per vertex, dof = vertex * value_dim + component.
#[derive(Debug, Clone, Copy)]
pub struct FunctionSpace {
    pub value_dim: usize,
    pub vertex_count: usize,
}

impl FunctionSpace {
    pub fn scalar(mesh: &Mesh) -> Self {
        FunctionSpace {
            value_dim: 1,
            vertex_count: mesh.vertex_count(),
        }
    }

    pub fn vector(mesh: &Mesh) -> Self {
        FunctionSpace {
            value_dim: mesh.dim(),
            vertex_count: mesh.vertex_count(),
        }
    }

    /// Vector velocity + scalar pressure, interleaved per vertex.
    pub fn velocity_pressure(mesh: &Mesh) -> Self {
        FunctionSpace {
            value_dim: mesh.dim() + 1,
            vertex_count: mesh.vertex_count(),
        }
    }

    pub fn ndof(&self) -> usize {
        self.value_dim * self.vertex_count
    }

    pub fn dof(&self, vertex: usize, component: usize) -> usize {
        debug_assert!(component < self.value_dim);
        vertex * self.value_dim + component
    }
}

/// Geometry of one simplex: constant P1 basis gradients, positive volume,
/// diameter, and the vertex ids.
#[derive(Debug, Clone)]
pub struct ElementGeom {
    pub dim: usize,
    pub verts: [usize; 4],
    /// grads[i][k] = d(lambda_i)/d(x_k); entries beyond `dim` are zero.
    pub grads: [[f64; 3]; 4],
    pub vol: f64,
    pub h: f64,
}

impl ElementGeom {
    pub fn new(mesh: &Mesh, cell: usize) -> Result<ElementGeom> {
        let dim = mesh.dim();
        let cv = mesh.cell_vertices(cell);
        let mut verts = [usize::MAX; 4];
        verts[..cv.len()].copy_from_slice(cv);
        let x = |i: usize, k: usize| mesh.vertex(cv[i])[k];
        let mut grads = [[0.0; 3]; 4];
        let vol;
        match dim {
            2 => {
                let (a, c) = (x(1, 0) - x(0, 0), x(1, 1) - x(0, 1));
                let (b, d) = (x(2, 0) - x(0, 0), x(2, 1) - x(0, 1));
                let det = a * d - b * c;
                if det == 0.0 {
                    return Err(Error::DegenerateCell(cell));
                }
                grads[1] = [d / det, -b / det, 0.0];
                grads[2] = [-c / det, a / det, 0.0];
                vol = det / 2.0;
            }
            3 => {
                let e = |i: usize, k: usize| x(i, k) - x(0, k);
                let m = [
                    [e(1, 0), e(2, 0), e(3, 0)],
                    [e(1, 1), e(2, 1), e(3, 1)],
                    [e(1, 2), e(2, 2), e(3, 2)],
                ];
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                if det == 0.0 {
                    return Err(Error::DegenerateCell(cell));
                }
                // rows of the inverse of m are the gradients of lambda_1..3
                let inv = [
                    [
                        (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                        (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                        (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
                    ],
                    [
                        (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                        (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                        (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
                    ],
                    [
                        (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                        (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                        (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
                    ],
                ];
                grads[1] = inv[0];
                grads[2] = inv[1];
                grads[3] = inv[2];
                vol = det / 6.0;
            }
            _ => unreachable!(),
        }
        for k in 0..dim {
            grads[0][k] = -(1..=dim).map(|i| grads[i][k]).sum::<f64>();
        }
        if vol <= 0.0 {
            return Err(Error::DegenerateCell(cell));
        }
        Ok(ElementGeom {
            dim,
            verts,
            grads,
            vol,
            h: mesh.cell_diameter(cell),
        })
    }

    pub fn nverts(&self) -> usize {
        self.dim + 1
    }

    pub fn vert_ids(&self) -> &[usize] {
        &self.verts[..self.dim + 1]
    }
}
