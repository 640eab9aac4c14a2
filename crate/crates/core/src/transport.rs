//! Stabilized convection-diffusion transport of the fictitious
//! concentration on a given velocity field.
//!
//! Galerkin form D (grad c, grad w) + (u.grad c, w), SUPG term
//! tau_c (u.grad c, u.grad w), and crosswind discontinuity-capturing
//! diffusion D_cw = max(0, C h |u| / 2 - D) acting on the component of
//! grad c orthogonal to u (C = 0.7). The capturing diffusivity is taken
//! from the velocity only, so the system stays linear per lag; the lag
//! loop is kept for coefficient models that feed back on c.

use crate::error::{Error, Result};
use crate::fem::assemble::assemble_matrix;
use crate::fem::bc::{apply_dirichlet, constrained_dofs, DirichletBC};
use crate::fem::quadrature::cell_rule;
use crate::fem::solver::{solve_linear, LinearSolverConfig};
use crate::fem::space::{ElementGeom, FunctionSpace};
use crate::fem::sparse::CsrMatrix;
use crate::integrals::flux_integral;
use crate::mesh::{BoundaryTag, Mesh};

/// Transport constants and boundary concentrations.
#[derive(Debug, Clone, Copy)]
pub struct TransportProps {
    /// Diffusion coefficient [m^2/s].
    pub diffusivity: f64,
    /// Inlet concentration [mol/m^3].
    pub c_in: f64,
    /// Concentration held on the packing surfaces [mol/m^3].
    pub c_pack: f64,
}

impl TransportProps {
    pub fn validate(&self) -> Result<()> {
        if !self.diffusivity.is_finite() || self.diffusivity <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "diffusivity must be positive, got {}",
                self.diffusivity
            )));
        }
        if self.c_in == self.c_pack {
            return Err(Error::InvalidConfig(
                "c_in and c_pack must differ (zero driving force)".into(),
            ));
        }
        Ok(())
    }
}

/// Stabilization switches for the transport solve.
#[derive(Debug, Clone, Copy)]
pub struct TransportStab {
    pub supg: bool,
    pub crosswind: bool,
    /// Crosswind constant C in D_cw = max(0, C h |u| / 2 - D).
    pub crosswind_c: f64,
}

impl Default for TransportStab {
    fn default() -> Self {
        TransportStab {
            supg: true,
            crosswind: true,
            crosswind_c: 0.7,
        }
    }
}

/// Scalar P1 coefficient field (also reused for adjoint variables).
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(mesh: &Mesh) -> Self {
        ScalarField {
            values: vec![0.0; mesh.vertex_count()],
        }
    }
}

/// SUPG parameter per cell: tau_c = [(2|u|/h)^2 + (4 D / h^2)^2]^(-1/2)
/// at the cell midpoint velocity.
pub fn compute_tau_transport(mesh: &Mesh, velocity: &[f64], diffusivity: f64) -> Result<Vec<f64>> {
    let dim = mesh.dim();
    let mut tau = Vec::with_capacity(mesh.cell_count());
    for c in 0..mesh.cell_count() {
        let h = mesh.cell_diameter(c);
        if h == 0.0 {
            return Err(Error::DegenerateCell(c));
        }
        let unorm = midpoint_speed(mesh, velocity, c, dim);
        let conv = 2.0 * unorm / h;
        let diff = 4.0 * diffusivity / (h * h);
        tau.push(1.0 / conv.hypot(diff));
    }
    Ok(tau)
}

fn midpoint_speed(mesh: &Mesh, velocity: &[f64], cell: usize, dim: usize) -> f64 {
    let cv = mesh.cell_vertices(cell);
    let mut umid = [0.0f64; 3];
    for &v in cv {
        for k in 0..dim {
            umid[k] += velocity[v * dim + k];
        }
    }
    umid[..dim]
        .iter()
        .map(|x| (x / cv.len() as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-cell crosswind data: added diffusivity and the frozen projector
/// direction (unit velocity; a zero direction disables the cell).
#[derive(Debug, Clone)]
pub struct CrosswindCoeffs {
    pub d_cw: Vec<f64>,
    pub unit_u: Vec<[f64; 3]>,
}

pub fn compute_crosswind(
    mesh: &Mesh,
    velocity: &[f64],
    diffusivity: f64,
    stab: &TransportStab,
) -> CrosswindCoeffs {
    let dim = mesh.dim();
    let nc = mesh.cell_count();
    let mut d_cw = vec![0.0; nc];
    let mut unit_u = vec![[0.0f64; 3]; nc];
    if !stab.crosswind {
        return CrosswindCoeffs { d_cw, unit_u };
    }
    for c in 0..nc {
        let h = mesh.cell_diameter(c);
        let cv = mesh.cell_vertices(c);
        let mut umid = [0.0f64; 3];
        for &v in cv {
            for k in 0..dim {
                umid[k] += velocity[v * dim + k] / cv.len() as f64;
            }
        }
        let unorm = umid[..dim].iter().map(|x| x * x).sum::<f64>().sqrt();
        let dcw = (stab.crosswind_c * h * unorm / 2.0 - diffusivity).max(0.0);
        if dcw > 0.0 && unorm > 0.0 {
            d_cw[c] = dcw;
            for k in 0..dim {
                unit_u[c][k] = umid[k] / unorm;
            }
        }
    }
    CrosswindCoeffs { d_cw, unit_u }
}

/// Assembles the full transport operator (no boundary conditions applied)
/// and the zero right-hand side.
pub fn transport_system(
    mesh: &Mesh,
    velocity: &[f64],
    props: &TransportProps,
    stab: &TransportStab,
) -> Result<(CsrMatrix, Vec<f64>)> {
    props.validate()?;
    let tau = if stab.supg {
        compute_tau_transport(mesh, velocity, props.diffusivity)?
    } else {
        vec![0.0; mesh.cell_count()]
    };
    let cw = compute_crosswind(mesh, velocity, props.diffusivity, stab);
    let a = transport_matrix(mesh, velocity, props.diffusivity, &tau, &cw)?;
    let b = vec![0.0; mesh.vertex_count()];
    Ok((a, b))
}

/// The operator with explicitly supplied (frozen) stabilization data; the
/// adjoint path reuses this to transpose exactly the forward operator.
pub fn transport_matrix(
    mesh: &Mesh,
    velocity: &[f64],
    diffusivity: f64,
    tau: &[f64],
    cw: &CrosswindCoeffs,
) -> Result<CsrMatrix> {
    let dim = mesh.dim();
    let nv = mesh.vertex_count();
    if velocity.len() != nv * dim {
        return Err(Error::LengthMismatch {
            expected: nv * dim,
            got: velocity.len(),
        });
    }
    if velocity.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("velocity field"));
    }
    let rule = cell_rule(dim);
    assemble_matrix(mesh.cell_count(), nv, nv, |cell, coo| {
        let g = ElementGeom::new(mesh, cell)?;
        let n = g.nverts();
        let tau_c = tau[cell];
        let d_cw = cw.d_cw[cell];
        let uhat = &cw.unit_u[cell];
        let mut un = [[0.0f64; 3]; 4];
        for i in 0..n {
            for k in 0..dim {
                un[i][k] = velocity[g.verts[i] * dim + k];
            }
        }
        let mut local = [[0.0f64; 4]; 4];
        // constant-gradient terms: diffusion and crosswind
        for j in 0..n {
            for m in 0..n {
                let mut diff = 0.0;
                for k in 0..dim {
                    diff += g.grads[m][k] * g.grads[j][k];
                }
                let mut val = diffusivity * diff;
                if d_cw > 0.0 {
                    // (I - uhat uhat^T) grad c . grad w
                    let mut gu_m = 0.0;
                    let mut gu_j = 0.0;
                    for k in 0..dim {
                        gu_m += g.grads[m][k] * uhat[k];
                        gu_j += g.grads[j][k] * uhat[k];
                    }
                    val += d_cw * (diff - gu_m * gu_j);
                }
                local[j][m] += val * g.vol;
            }
        }
        // convection and SUPG via quadrature
        for q in rule {
            let w = q.weight * g.vol;
            let mut uq = [0.0f64; 3];
            for i in 0..n {
                for k in 0..dim {
                    uq[k] += q.bary[i] * un[i][k];
                }
            }
            for j in 0..n {
                let phi_j = q.bary[j];
                let mut ug_j = 0.0;
                for k in 0..dim {
                    ug_j += uq[k] * g.grads[j][k];
                }
                for m in 0..n {
                    let mut ug_m = 0.0;
                    for k in 0..dim {
                        ug_m += uq[k] * g.grads[m][k];
                    }
                    let mut val = ug_m * phi_j;
                    val += tau_c * ug_m * ug_j;
                    local[j][m] += w * val;
                }
            }
        }
        for j in 0..n {
            for m in 0..n {
                coo.push(g.verts[j], g.verts[m], local[j][m]);
            }
        }
        Ok(())
    })
}

/// Default Dirichlet set: c_in at the inlet, c_pack on packing surfaces
/// that exist in the mesh (an empty packing jacket is legal).
pub fn default_transport_bcs(mesh: &Mesh, props: &TransportProps) -> Vec<DirichletBC> {
    let mut bcs = vec![DirichletBC::constant(
        &[BoundaryTag::Inlet],
        &[0],
        props.c_in,
    )];
    let mut pack_tags = Vec::new();
    for tag in [BoundaryTag::PackingJacket, BoundaryTag::Packing] {
        if mesh.has_tag(tag) {
            pack_tags.push(tag);
        }
    }
    if !pack_tags.is_empty() {
        bcs.push(DirichletBC::constant(&pack_tags, &[0], props.c_pack));
    }
    bcs
}

/// Transport solution with maximum-principle diagnostics.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub c: ScalarField,
    pub c_min: f64,
    pub c_max: f64,
    pub lag_iterations: usize,
}

pub fn solve_transport(
    mesh: &Mesh,
    velocity: &[f64],
    props: &TransportProps,
    stab: &TransportStab,
    lin_cfg: &LinearSolverConfig,
) -> Result<TransportSolution> {
    let bcs = default_transport_bcs(mesh, props);
    solve_transport_with_bcs(mesh, velocity, props, stab, &bcs, lin_cfg)
}

/// Linear solve inside a lag loop over the capturing coefficients. The
/// coefficients depend on the velocity only, so the loop converges as soon
/// as two successive coefficient sets agree (immediately, today); it guards
/// future concentration-dependent capturing models.
pub fn solve_transport_with_bcs(
    mesh: &Mesh,
    velocity: &[f64],
    props: &TransportProps,
    stab: &TransportStab,
    bcs: &[DirichletBC],
    lin_cfg: &LinearSolverConfig,
) -> Result<TransportSolution> {
    props.validate()?;
    let space = FunctionSpace::scalar(mesh);
    let constraints = constrained_dofs(mesh, &space, bcs)?;
    let tau = if stab.supg {
        compute_tau_transport(mesh, velocity, props.diffusivity)?
    } else {
        vec![0.0; mesh.cell_count()]
    };
    const MAX_LAGS: usize = 10;
    let mut c_prev: Option<Vec<f64>> = None;
    let mut coeffs = compute_crosswind(mesh, velocity, props.diffusivity, stab);
    for lag in 1..=MAX_LAGS {
        let mut a = transport_matrix(mesh, velocity, props.diffusivity, &tau, &coeffs)?;
        let mut b = vec![0.0; space.ndof()];
        apply_dirichlet(&mut a, &mut b, &constraints, true)?;
        let c = solve_linear(&a, &b, lin_cfg)?.x;
        let converged = match &c_prev {
            Some(prev) => {
                let dc: f64 = c
                    .iter()
                    .zip(prev)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                let nc: f64 = c.iter().map(|x| x * x).sum::<f64>();
                dc.sqrt() <= 1e-6 * nc.sqrt().max(1e-300)
            }
            None => {
                // today's coefficients cannot change between lags; re-deriving
                // them and comparing is the fixed-point check
                let next = compute_crosswind(mesh, velocity, props.diffusivity, stab);
                next.d_cw == coeffs.d_cw
            }
        };
        if converged {
            let (mut c_min, mut c_max) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in &c {
                c_min = c_min.min(v);
                c_max = c_max.max(v);
            }
            return Ok(TransportSolution {
                c: ScalarField { values: c },
                c_min,
                c_max,
                lag_iterations: lag,
            });
        }
        coeffs = compute_crosswind(mesh, velocity, props.diffusivity, stab);
        c_prev = Some(c);
    }
    Err(Error::LagNonConvergence(MAX_LAGS))
}

/// Total discrete boundary flux of the solved field: advective outflow
/// over the whole boundary minus the reactions at the Dirichlet nodes
/// (which carry the diffusive and near-wall advective exchange). For a
/// solved transport field this equals the volume integral of c div u
/// exactly, so it closes to roundoff for divergence-free velocities and is
/// bounded by the flow's mass defect otherwise. Returns (total, inlet
/// advective flux) for relative comparison.
pub fn flux_balance(
    mesh: &Mesh,
    velocity: &[f64],
    c: &ScalarField,
    props: &TransportProps,
    stab: &TransportStab,
    bcs: &[DirichletBC],
) -> Result<(f64, f64)> {
    let space = FunctionSpace::scalar(mesh);
    let (a_full, _) = transport_system(mesh, velocity, props, stab)?;
    let reactions = a_full.matvec(&c.values);
    let constrained = constrained_dofs(mesh, &space, bcs)?;
    let dirichlet_flux: f64 = constrained.iter().map(|&(dof, _)| reactions[dof]).sum();
    let boundary_adv = flux_integral(mesh, velocity, Some(&c.values), &BoundaryTag::ALL)?;
    let inlet_adv = flux_integral(mesh, velocity, Some(&c.values), &[BoundaryTag::Inlet])?;
    Ok((boundary_adv - dirichlet_flux, inlet_adv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casegen::{structured_channel, structured_channel_with_hole};
    use approx::assert_relative_eq;

    fn uniform_velocity(mesh: &Mesh, ux: f64) -> Vec<f64> {
        let nv = mesh.vertex_count();
        let mut u = vec![0.0; nv * 2];
        for v in 0..nv {
            u[2 * v] = ux;
        }
        u
    }

    #[test]
    fn tau_limits() {
        let mesh = structured_channel(1.0, 1.0, 2, 2, false).unwrap();
        // diffusive limit u = 0: tau = h^2 / (4 D)
        let u0 = vec![0.0; mesh.vertex_count() * 2];
        let tau = compute_tau_transport(&mesh, &u0, 2.5).unwrap();
        for c in 0..mesh.cell_count() {
            let h = mesh.cell_diameter(c);
            assert_relative_eq!(tau[c], h * h / 10.0, epsilon = 1e-14);
        }
        // convective limit D -> 0, |u| = 1: tau = h / 2
        let u1 = uniform_velocity(&mesh, 1.0);
        let tau = compute_tau_transport(&mesh, &u1, 1e-300).unwrap();
        for c in 0..mesh.cell_count() {
            assert_relative_eq!(tau[c], mesh.cell_diameter(c) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tau_with_reference_constants() {
        // |u| = 0.933, h = 2.5e-4, D = 3.72e-6 -> 1.33908e-4 (hand evaluation)
        let conv: f64 = 2.0 * 0.933 / 2.5e-4;
        let diff: f64 = 4.0 * 3.72e-6 / 2.5e-4f64.powi(2);
        let tau = 1.0 / conv.hypot(diff);
        assert_relative_eq!(tau, 1.33908e-4, max_relative = 1e-4);
    }

    #[test]
    fn equal_dirichlet_values_give_constant_field() {
        let mesh =
            structured_channel_with_hole(3.0, 1.0, 12, 8, false, Some((5, 7, 3, 5))).unwrap();
        let u = vec![0.0; mesh.vertex_count() * 2];
        let props = TransportProps {
            diffusivity: 1.0,
            c_in: 7.5,
            c_pack: 7.5000001,
        };
        // c_in == c_pack exactly is rejected by validate; emulate the
        // constant case through explicit equal-value bcs
        let bcs = vec![
            DirichletBC::constant(&[BoundaryTag::Inlet], &[0], 7.5),
            DirichletBC::constant(&[BoundaryTag::Packing], &[0], 7.5),
        ];
        let sol = solve_transport_with_bcs(
            &mesh,
            &u,
            &props,
            &TransportStab::default(),
            &bcs,
            &LinearSolverConfig::default(),
        )
        .unwrap();
        for v in &sol.c.values {
            assert_relative_eq!(*v, 7.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn no_packing_tags_yield_inlet_concentration_everywhere() {
        let mesh = structured_channel(4.0, 1.0, 16, 4, false).unwrap();
        let u = uniform_velocity(&mesh, 0.8);
        let props = TransportProps {
            diffusivity: 0.05,
            c_in: 100.0,
            c_pack: 1.0,
        };
        let sol = solve_transport(
            &mesh,
            &u,
            &props,
            &TransportStab::default(),
            &LinearSolverConfig::default(),
        )
        .unwrap();
        for v in &sol.c.values {
            assert_relative_eq!(*v, 100.0, epsilon = 1e-9);
        }
    }

    /// Dirichlet ends: c(x) = c0 + (cL - c0) (e^{Ux/D} - 1) / (e^{UL/D} - 1).
    #[test]
    fn one_dimensional_boundary_layer() {
        for pe in [1.0, 10.0, 50.0] {
            let (l_chan, u_mag) = (1.0, 1.0);
            let d = u_mag * l_chan / pe;
            let mesh = structured_channel(l_chan, 0.025, 160, 4, false).unwrap();
            let u = uniform_velocity(&mesh, u_mag);
            let (c0, cl) = (100.0, 1.0);
            let props = TransportProps {
                diffusivity: d,
                c_in: c0,
                c_pack: cl,
            };
            let bcs = vec![
                DirichletBC::constant(&[BoundaryTag::Inlet], &[0], c0),
                DirichletBC::constant(&[BoundaryTag::Outlet], &[0], cl),
            ];
            let sol = solve_transport_with_bcs(
                &mesh,
                &u,
                &props,
                &TransportStab::default(),
                &bcs,
                &LinearSolverConfig::default(),
            )
            .unwrap();
            let exact = |x: f64| {
                c0 + (cl - c0) * ((u_mag * x / d).exp() - 1.0) / ((u_mag * l_chan / d).exp() - 1.0)
            };
            let mut err2 = 0.0;
            let mut nrm2 = 0.0;
            for v in 0..mesh.vertex_count() {
                let e = exact(mesh.vertex(v)[0]);
                err2 += (sol.c.values[v] - e).powi(2);
                nrm2 += e * e;
            }
            let rel = (err2 / nrm2).sqrt();
            assert!(rel < 0.02, "Pe {pe}: relative error {rel:.4}");
            // over/undershoot beyond the data range within 1% of the range
            let range = c0 - cl;
            assert!(sol.c_max <= c0 + 0.01 * range, "overshoot {}", sol.c_max);
            assert!(sol.c_min >= cl - 0.01 * range, "undershoot {}", sol.c_min);
        }
    }

    #[test]
    fn zero_flux_outlet_keeps_inlet_value() {
        let mesh = structured_channel(1.0, 0.25, 32, 4, false).unwrap();
        let u = uniform_velocity(&mesh, 1.0);
        let props = TransportProps {
            diffusivity: 0.02,
            c_in: 3.0,
            c_pack: 0.0,
        };
        // only the inlet Dirichlet: natural outlet, no packing anywhere
        let bcs = vec![DirichletBC::constant(&[BoundaryTag::Inlet], &[0], 3.0)];
        let sol = solve_transport_with_bcs(
            &mesh,
            &u,
            &props,
            &TransportStab::default(),
            &bcs,
            &LinearSolverConfig::default(),
        )
        .unwrap();
        for v in &sol.c.values {
            assert_relative_eq!(*v, 3.0, epsilon = 1e-9);
        }
    }

    /// With a huge diffusivity the field relaxes to the pure-diffusion
    /// solution of the same boundary data.
    #[test]
    fn large_diffusivity_matches_diffusion_only_oracle() {
        let mesh =
            structured_channel_with_hole(2.0, 1.0, 16, 8, false, Some((7, 9, 3, 5))).unwrap();
        let props = TransportProps {
            diffusivity: 1e4,
            c_in: 100.0,
            c_pack: 1.0,
        };
        let stab = TransportStab::default();
        let lin = LinearSolverConfig::default();
        let u = uniform_velocity(&mesh, 1.0);
        let with_flow = solve_transport(&mesh, &u, &props, &stab, &lin).unwrap();
        let no_flow = solve_transport(
            &mesh,
            &vec![0.0; mesh.vertex_count() * 2],
            &props,
            &stab,
            &lin,
        )
        .unwrap();
        for (a, b) in with_flow.c.values.iter().zip(&no_flow.c.values) {
            assert!((a - b).abs() < 1e-2, "diffusion limit mismatch {a} vs {b}");
        }
    }

    #[test]
    fn flux_balance_closes_for_divergence_free_velocity() {
        let mesh =
            structured_channel_with_hole(2.0, 1.0, 16, 8, false, Some((7, 9, 3, 5))).unwrap();
        let u = uniform_velocity(&mesh, 1.3);
        let props = TransportProps {
            diffusivity: 0.05,
            c_in: 100.0,
            c_pack: 1.0,
        };
        let stab = TransportStab::default();
        let bcs = default_transport_bcs(&mesh, &props);
        let sol = solve_transport_with_bcs(
            &mesh,
            &u,
            &props,
            &stab,
            &bcs,
            &LinearSolverConfig::default(),
        )
        .unwrap();
        let (total, inlet) = flux_balance(&mesh, &u, &sol.c, &props, &stab, &bcs).unwrap();
        assert!(
            total.abs() <= 1e-10 * inlet.abs(),
            "balance {total:.3e} vs inlet {inlet:.3e}"
        );
    }

    /// Swapping which no-flux tag the walls carry must not change anything.
    #[test]
    fn solution_invariant_under_no_flux_tag_relabeling() {
        let base = structured_channel(2.0, 1.0, 12, 6, false).unwrap();
        // rebuild with walls labeled Outlet -> CylWall swap is not legal
        // (outlet must exist); instead relabel CylWall as PackingJacket-free
        // equivalents is covered by: both tags are natural for transport
        // when not in the Dirichlet list. Compare CylWall walls vs a mesh
        // where walls are split between CylWall and a second natural tag.
        let mut facets = Vec::new();
        for f in 0..base.facet_count() {
            let fv = base.facet_vertices(f).to_vec();
            let tag = base.facet(f).tag;
            facets.push((fv, tag));
        }
        let relabeled: Vec<_> = facets
            .iter()
            .enumerate()
            .map(|(i, (fv, tag))| {
                let new_tag = if *tag == BoundaryTag::CylWall && i % 2 == 0 {
                    BoundaryTag::PackingJacket
                } else {
                    *tag
                };
                (fv.clone(), new_tag)
            })
            .collect();
        let alt = Mesh::new(
            2,
            base.coords().to_vec(),
            (0..base.cell_count())
                .flat_map(|c| base.cell_vertices(c).to_vec())
                .collect(),
            relabeled,
        )
        .unwrap();
        let u = uniform_velocity(&base, 1.0);
        let props = TransportProps {
            diffusivity: 0.05,
            c_in: 10.0,
            c_pack: 1.0,
        };
        // same Dirichlet list for both: inlet only, so both wall tags are
        // natural no-flux boundaries
        let bcs = vec![DirichletBC::constant(&[BoundaryTag::Inlet], &[0], 10.0)];
        let stab = TransportStab::default();
        let lin = LinearSolverConfig::default();
        let a = solve_transport_with_bcs(&base, &u, &props, &stab, &bcs, &lin).unwrap();
        let b = solve_transport_with_bcs(&alt, &u, &props, &stab, &bcs, &lin).unwrap();
        for (x, y) in a.c.values.iter().zip(&b.c.values) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }
}
