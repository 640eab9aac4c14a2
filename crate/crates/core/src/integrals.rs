//! Boundary-facet integrals of P1 fields over tag sets.

use crate::error::Result;
use crate::fem::quadrature::facet_rule;
use crate::mesh::{BoundaryTag, Mesh};

/// Integral of `(weight) * u . n` over all facets carrying one of `tags`.
/// `velocity` is dim-interleaved per vertex; `weight` is an optional scalar
/// nodal field (1 if absent). Exact for the quadratic integrand.
pub fn flux_integral(
    mesh: &Mesh,
    velocity: &[f64],
    weight: Option<&[f64]>,
    tags: &[BoundaryTag],
) -> Result<f64> {
    let dim = mesh.dim();
    let rule = facet_rule(dim);
    let mut total = 0.0;
    for (f, facet) in mesh.facets().iter().enumerate() {
        if !tags.contains(&facet.tag) {
            continue;
        }
        let (n, area) = mesh.facet_normal_area(f)?;
        let fv = mesh.facet_vertices(f);
        for q in rule {
            let mut un = 0.0;
            let mut w = 0.0;
            for (i, &v) in fv.iter().enumerate() {
                for k in 0..dim {
                    un += q.bary[i] * velocity[v * dim + k] * n[k];
                }
                if let Some(c) = weight {
                    w += q.bary[i] * c[v];
                }
            }
            if weight.is_none() {
                w = 1.0;
            }
            total += q.weight * area * w * un;
        }
    }
    Ok(total)
}

/// Integral of a scalar nodal field over the tagged facets.
pub fn scalar_integral(mesh: &Mesh, scalar: &[f64], tags: &[BoundaryTag]) -> Result<f64> {
    let dim = mesh.dim();
    let rule = facet_rule(dim);
    let mut total = 0.0;
    for (f, facet) in mesh.facets().iter().enumerate() {
        if !tags.contains(&facet.tag) {
            continue;
        }
        let (_, area) = mesh.facet_normal_area(f)?;
        let fv = mesh.facet_vertices(f);
        for q in rule {
            let mut w = 0.0;
            for (i, &v) in fv.iter().enumerate() {
                w += q.bary[i] * scalar[v];
            }
            total += q.weight * area * w;
        }
    }
    Ok(total)
}
