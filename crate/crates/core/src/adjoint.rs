//! Discrete adjoint of the forward pipeline at frozen stabilization.
//!
//! The objective depends on the concentration only through the
//! flow-averaged outlet value, so the adjoint system is block triangular:
//! first the transposed (frozen-coefficient) transport operator is solved
//! against dJ/dc, then the transposed flow Jacobian against the sum of the
//! direct dJ/du terms and the transport coupling (the derivative of
//! z^T T(u) c with respect to the velocity dofs, with tau and the
//! crosswind data held fixed).

use crate::error::{Error, Result};
use crate::fem::bc::{apply_dirichlet, constrained_dofs};
use crate::fem::quadrature::{cell_rule, facet_rule};
use crate::fem::solver::{solve_linear, LinearSolverConfig};
use crate::fem::space::ElementGeom;
use crate::fem::space::FunctionSpace;
use crate::flow::{
    compute_tau_flow, flow_bcs, flow_jacobian, flow_jacobian_tau_feedback, StabilizationParams,
};
use crate::integrals::flux_integral;
use crate::mesh::{BoundaryTag, Mesh};
use crate::metrics::{CaseMetrics, CaseSetup, CaseSolution};
use crate::transport::{
    compute_crosswind, compute_tau_transport, default_transport_bcs, transport_matrix,
    CrosswindCoeffs,
};

/// Adjoint concentration and adjoint velocity/pressure (packed like the
/// flow solver layout).
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Stabilization data frozen at the converged forward state; shared by the
/// adjoint solves and the shape derivative so both differentiate exactly
/// the same discrete operators.
#[derive(Debug, Clone)]
pub struct FrozenCoeffs {
    pub flow_stab: StabilizationParams,
    pub tau_transport: Vec<f64>,
    pub crosswind: CrosswindCoeffs,
}

pub fn freeze_coeffs(mesh: &Mesh, setup: &CaseSetup, sol: &CaseSolution) -> Result<FrozenCoeffs> {
    let flow_stab = compute_tau_flow(mesh, &sol.flow.u, &setup.fluid, setup.flow_cfg.switches)?;
    let tau_transport = if setup.transport_stab.supg {
        compute_tau_transport(mesh, &sol.flow.u, setup.transport.diffusivity)?
    } else {
        vec![0.0; mesh.cell_count()]
    };
    let crosswind = compute_crosswind(
        mesh,
        &sol.flow.u,
        setup.transport.diffusivity,
        &setup.transport_stab,
    );
    Ok(FrozenCoeffs {
        flow_stab,
        tau_transport,
        crosswind,
    })
}

/// dJ/dc as a nodal vector: the outlet functional
/// (vdot / a_geo) / (c_pack - c_out) * int(phi_i u.n) / int(u.n).
pub fn objective_gradient_c(
    mesh: &Mesh,
    velocity: &[f64],
    metrics: &CaseMetrics,
    c_pack: f64,
) -> Result<Vec<f64>> {
    let dim = mesh.dim();
    let rule = facet_rule(dim);
    let den = flux_integral(mesh, velocity, None, &[BoundaryTag::Outlet])?;
    if den == 0.0 {
        return Err(Error::ZeroOutletFlux);
    }
    let djdcout = metrics.vdot / metrics.a_geo / (c_pack - metrics.c_out);
    let mut g = vec![0.0; mesh.vertex_count()];
    for f in mesh.facets_with_tag(BoundaryTag::Outlet) {
        let (n, area) = mesh.facet_normal_area(f)?;
        let fv = mesh.facet_vertices(f);
        for q in rule {
            let mut un = 0.0;
            for (i, &v) in fv.iter().enumerate() {
                for k in 0..dim {
                    un += q.bary[i] * velocity[v * dim + k] * n[k];
                }
            }
            for (i, &v) in fv.iter().enumerate() {
                g[v] += q.weight * area * q.bary[i] * un / den * djdcout;
            }
        }
    }
    Ok(g)
}

/// Direct dJ/d(u, p) as a packed vector: the velocity dependence of the
/// outlet average and of the volume flow rate (pressure does not enter J).
pub fn objective_gradient_flow(
    mesh: &Mesh,
    velocity: &[f64],
    c: &[f64],
    metrics: &CaseMetrics,
    c_pack: f64,
) -> Result<Vec<f64>> {
    let dim = mesh.dim();
    let nf = dim + 1;
    let rule = facet_rule(dim);
    let mut g = vec![0.0; mesh.vertex_count() * nf];
    let den = flux_integral(mesh, velocity, None, &[BoundaryTag::Outlet])?;
    if den == 0.0 {
        return Err(Error::ZeroOutletFlux);
    }
    let djdcout = metrics.vdot / metrics.a_geo / (c_pack - metrics.c_out);
    // d c_out / d u[j,k] = int(phi_j n_k (c - c_out)) / den over the outlet
    for f in mesh.facets_with_tag(BoundaryTag::Outlet) {
        let (n, area) = mesh.facet_normal_area(f)?;
        let fv = mesh.facet_vertices(f);
        for q in rule {
            let mut cq = 0.0;
            for (i, &v) in fv.iter().enumerate() {
                cq += q.bary[i] * c[v];
            }
            for (i, &v) in fv.iter().enumerate() {
                for k in 0..dim {
                    g[v * nf + k] +=
                        q.weight * area * q.bary[i] * n[k] * (cq - metrics.c_out) / den * djdcout;
                }
            }
        }
    }
    // d vdot / d u via the inlet flux (signed); dJ/dvdot = beta / vdot
    let q_in = flux_integral(mesh, velocity, None, &[BoundaryTag::Inlet])?;
    let sign = if q_in < 0.0 { -1.0 } else { 1.0 };
    if metrics.vdot > 0.0 {
        let djdvdot = metrics.beta / metrics.vdot;
        for f in mesh.facets_with_tag(BoundaryTag::Inlet) {
            let (n, area) = mesh.facet_normal_area(f)?;
            let fv = mesh.facet_vertices(f);
            for q in rule {
                for (i, &v) in fv.iter().enumerate() {
                    for k in 0..dim {
                        g[v * nf + k] += q.weight * area * q.bary[i] * n[k] * sign * djdvdot;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// d/d(u) of z^T T(u) c in the packed layout: the Galerkin convection and
/// the SUPG term carry the velocity directly, and the stabilization
/// coefficients (tau_c, crosswind diffusivity and projector) feed back
/// through the cell-midpoint speed.
pub fn coupling_gradient_flow(
    mesh: &Mesh,
    velocity: &[f64],
    c: &[f64],
    z: &[f64],
    crosswind_c: f64,
    coeffs: &FrozenCoeffs,
    coefficient_feedback: bool,
) -> Result<Vec<f64>> {
    let dim = mesh.dim();
    let nf = dim + 1;
    let rule = cell_rule(dim);
    let mut g = vec![0.0; mesh.vertex_count() * nf];
    for cell in 0..mesh.cell_count() {
        let geom = ElementGeom::new(mesh, cell)?;
        let n = geom.nverts();
        let tau = coeffs.tau_transport[cell];
        let d_cw = coeffs.crosswind.d_cw[cell];
        let uhat = &coeffs.crosswind.unit_u[cell];
        // constant gradients of c and z
        let mut grad_c = [0.0f64; 3];
        let mut grad_z = [0.0f64; 3];
        let mut u_mid = [0.0f64; 3];
        for i in 0..n {
            for k in 0..dim {
                grad_c[k] += c[geom.verts[i]] * geom.grads[i][k];
                grad_z[k] += z[geom.verts[i]] * geom.grads[i][k];
                u_mid[k] += velocity[geom.verts[i] * dim + k] / n as f64;
            }
        }
        let mut s_supg = 0.0;
        for q in rule {
            let w = q.weight * geom.vol;
            let mut uq = [0.0f64; 3];
            let mut zq = 0.0;
            for i in 0..n {
                for k in 0..dim {
                    uq[k] += q.bary[i] * velocity[geom.verts[i] * dim + k];
                }
                zq += q.bary[i] * z[geom.verts[i]];
            }
            let ug_c: f64 = (0..dim).map(|k| uq[k] * grad_c[k]).sum();
            let ug_z: f64 = (0..dim).map(|k| uq[k] * grad_z[k]).sum();
            s_supg += w * ug_c * ug_z;
            for j in 0..n {
                let phi_j = q.bary[j];
                for k in 0..dim {
                    let mut val = phi_j * grad_c[k] * zq;
                    val += tau * (phi_j * grad_c[k] * ug_z + ug_c * phi_j * grad_z[k]);
                    g[geom.verts[j] * nf + k] += w * val;
                }
            }
        }
        // coefficient feedback through the midpoint speed
        let speed = u_mid[..dim].iter().map(|x| x * x).sum::<f64>().sqrt();
        if coefficient_feedback && speed > 0.0 {
            let h = geom.h;
            let mut fb = [0.0f64; 3];
            if tau > 0.0 {
                let dtau = -tau.powi(3) * 4.0 * speed / (h * h);
                for k in 0..dim {
                    fb[k] += dtau * u_mid[k] / (speed * n as f64) * s_supg;
                }
            }
            if d_cw > 0.0 {
                let uc: f64 = (0..dim).map(|k| uhat[k] * grad_c[k]).sum();
                let uz: f64 = (0..dim).map(|k| uhat[k] * grad_z[k]).sum();
                let s_cw: f64 = (0..dim).map(|k| grad_c[k] * grad_z[k]).sum::<f64>() - uc * uz;
                // d d_cw / d speed = C h / 2 when active
                let ddcw = 0.5 * crosswind_c * h;
                for k in 0..dim {
                    fb[k] += ddcw * u_mid[k] / (speed * n as f64) * s_cw * geom.vol;
                    // projector feedback: P = I - uhat uhat^T with
                    // uhat = u_mid / |u_mid|
                    let duh_c = -((grad_c[k] - uc * uhat[k]) * uz
                        + uc * (grad_z[k] - uz * uhat[k]))
                        / (speed * n as f64);
                    fb[k] += d_cw * duh_c * geom.vol;
                }
            }
            for j in 0..n {
                for k in 0..dim {
                    g[geom.verts[j] * nf + k] += fb[k];
                }
            }
        }
    }
    Ok(g)
}

/// Solves the block-triangular adjoint at the converged forward solution.
pub fn solve_adjoint(
    mesh: &Mesh,
    setup: &CaseSetup,
    sol: &CaseSolution,
    coeffs: &FrozenCoeffs,
    lin_cfg: &LinearSolverConfig,
) -> Result<AdjointState> {
    solve_adjoint_with(mesh, setup, sol, coeffs, lin_cfg, true)
}

/// [`solve_adjoint`] with the coefficient feedback optional; the
/// fixed-coefficient variant pairs with the geometry-only shape derivative
/// in the frozen-pipeline oracle.
pub fn solve_adjoint_with(
    mesh: &Mesh,
    setup: &CaseSetup,
    sol: &CaseSolution,
    coeffs: &FrozenCoeffs,
    lin_cfg: &LinearSolverConfig,
    coefficient_feedback: bool,
) -> Result<AdjointState> {
    let dim = mesh.dim();
    // adjoint transport: T^T z = dJ/dc, z = 0 where c is constrained
    let t_full = transport_matrix(
        mesh,
        &sol.flow.u,
        setup.transport.diffusivity,
        &coeffs.tau_transport,
        &coeffs.crosswind,
    )?;
    let mut tt = t_full.transpose();
    let mut rhs_z = objective_gradient_c(mesh, &sol.flow.u, &sol.metrics, setup.transport.c_pack)?;
    let scalar_space = FunctionSpace::scalar(mesh);
    let c_bcs = default_transport_bcs(mesh, &setup.transport);
    let c_constraints: Vec<(usize, f64)> = constrained_dofs(mesh, &scalar_space, &c_bcs)?
        .into_iter()
        .map(|(dof, _)| (dof, 0.0))
        .collect();
    apply_dirichlet(&mut tt, &mut rhs_z, &c_constraints, true)?;
    let z = solve_linear(&tt, &rhs_z, lin_cfg)?.x;

    // adjoint flow: A^T lambda = dJ/dw - d(z^T T c)/dw, with A the
    // self-consistent Jacobian (fixed-tau part plus coefficient feedback)
    let packed = sol.flow.pack(dim);
    let a_fixed = flow_jacobian(mesh, &packed, &setup.fluid, &coeffs.flow_stab, 1.0)?;
    let a_full = if coefficient_feedback {
        let a_fb = flow_jacobian_tau_feedback(mesh, &packed, &setup.fluid, &coeffs.flow_stab)?;
        a_fixed.add(&a_fb)?
    } else {
        a_fixed
    };
    let mut at = a_full.transpose();
    let direct = objective_gradient_flow(
        mesh,
        &sol.flow.u,
        &sol.concentration.values,
        &sol.metrics,
        setup.transport.c_pack,
    )?;
    let coupling = coupling_gradient_flow(
        mesh,
        &sol.flow.u,
        &sol.concentration.values,
        &z,
        setup.transport_stab.crosswind_c,
        coeffs,
        coefficient_feedback,
    )?;
    let mut rhs_l: Vec<f64> = direct.iter().zip(&coupling).map(|(d, c)| d - c).collect();
    let vp_space = FunctionSpace::velocity_pressure(mesh);
    let u_bcs = flow_bcs(mesh, &setup.inlet)?;
    let u_constraints: Vec<(usize, f64)> = constrained_dofs(mesh, &vp_space, &u_bcs)?
        .into_iter()
        .map(|(dof, _)| (dof, 0.0))
        .collect();
    apply_dirichlet(&mut at, &mut rhs_l, &u_constraints, true)?;
    let lambda = solve_linear(&at, &rhs_l, lin_cfg)?.x;
    Ok(AdjointState { z, lambda })
}


#[cfg(test)]
mod highpe_tests {
    use super::*;
    use crate::casegen::structured_channel_with_hole;
    use crate::flow::{FlowSolveConfig, FluidProps, InletProfile, InletSpec};
    use crate::metrics::{evaluate_case, CaseSetup};
    use crate::transport::{TransportProps, TransportStab};

    /// Velocity-space gradient check in the convection-dominated regime
    /// (the operating point of interest: crosswind diffusivity far above
    /// the physical one).
    #[test]
    fn state_space_gradient_matches_fd_high_peclet() {
        let mesh =
            structured_channel_with_hole(2.0, 1.0, 16, 8, false, Some((7, 9, 3, 5))).unwrap();
        let s = CaseSetup {
            fluid: FluidProps { mu: 2e-3, rho: 1.0 },
            transport: TransportProps {
                diffusivity: 2e-4,
                c_in: 100.0,
                c_pack: 1.0,
            },
            inlet: InletSpec {
                mean_speed: 1.0,
                profile: InletProfile::Uniform,
            },
            flow_cfg: FlowSolveConfig::default(),
            transport_stab: TransportStab::default(),
        };
        let sol = evaluate_case(&mesh, &s).unwrap();
        let coeffs = freeze_coeffs(&mesh, &s, &sol).unwrap();
        let dim = 2;
        let nf = 3;
        let nv = mesh.vertex_count();
        let space = FunctionSpace::scalar(&mesh);
        let bcs = default_transport_bcs(&mesh, &s.transport);
        let constraints = constrained_dofs(&mesh, &space, &bcs).unwrap();
        let lin = LinearSolverConfig::default();
        let eval = |u: &[f64]| -> f64 {
            let (mut a, _) =
                crate::transport::transport_system(&mesh, u, &s.transport, &s.transport_stab)
                    .unwrap();
            let mut b = vec![0.0; nv];
            apply_dirichlet(&mut a, &mut b, &constraints, true).unwrap();
            let c = solve_linear(&a, &b, &lin).unwrap().x;
            let vdot = crate::metrics::volume_flow_rate(&mesh, u).unwrap();
            let c_out = crate::metrics::outlet_concentration(
                &mesh,
                u,
                &crate::transport::ScalarField { values: c },
            )
            .unwrap();
            crate::metrics::beta(vdot, sol.metrics.a_geo, 100.0, 1.0, c_out).unwrap()
        };
        let t_full = transport_matrix(
            &mesh,
            &sol.flow.u,
            s.transport.diffusivity,
            &coeffs.tau_transport,
            &coeffs.crosswind,
        )
        .unwrap();
        let mut tt = t_full.transpose();
        let mut rhs_z =
            objective_gradient_c(&mesh, &sol.flow.u, &sol.metrics, s.transport.c_pack).unwrap();
        let hom: Vec<(usize, f64)> = constraints.iter().map(|&(d, _)| (d, 0.0)).collect();
        apply_dirichlet(&mut tt, &mut rhs_z, &hom, true).unwrap();
        let z = solve_linear(&tt, &rhs_z, &lin).unwrap().x;
        let direct = objective_gradient_flow(
            &mesh,
            &sol.flow.u,
            &sol.concentration.values,
            &sol.metrics,
            s.transport.c_pack,
        )
        .unwrap();
        let coupling = coupling_gradient_flow(
            &mesh,
            &sol.flow.u,
            &sol.concentration.values,
            &z,
            s.transport_stab.crosswind_c,
            &coeffs,
            true,
        )
        .unwrap();
        let grad: Vec<f64> = direct.iter().zip(&coupling).map(|(d, c)| d - c).collect();
        let mut rng = crate::rng::SplitMix64::new(23);
        let du: Vec<f64> = (0..nv * dim).map(|_| rng.next_symmetric()).collect();
        let gdot: f64 = (0..nv)
            .map(|v| {
                (0..dim)
                    .map(|k| grad[v * nf + k] * du[v * dim + k])
                    .sum::<f64>()
            })
            .sum();
        let eps = 1e-6;
        let up: Vec<f64> = sol
            .flow
            .u
            .iter()
            .zip(&du)
            .map(|(a, d)| a + eps * d)
            .collect();
        let um: Vec<f64> = sol
            .flow
            .u
            .iter()
            .zip(&du)
            .map(|(a, d)| a - eps * d)
            .collect();
        let fd = (eval(&up) - eval(&um)) / (2.0 * eps);
        let rel = (fd - gdot).abs() / gdot.abs().max(1e-300);
        assert!(
            rel <= 1e-4,
            "high-Pe state-space mismatch: fd {fd:.8e} vs adjoint {gdot:.8e} rel {rel:.3e}"
        );
    }
}
