//! Cross-module invariants that need full forward solves: mesh-refinement
//! stability of the outlet quantities, global mass balance, and the
//! transport flux balance on converged states. The conservation defects of
//! the stabilized P1 discretization shrink like the PSPG consistency
//! error, so the tight bounds are checked at the finest member of an
//! aligned refinement family.

use packopt_core::casegen::structured_channel_with_hole;
use packopt_core::integrals::flux_integral;
use packopt_core::metrics::evaluate_case;
use packopt_core::transport::{default_transport_bcs, flux_balance};
use packopt_core::{
    BoundaryTag, CaseSetup, CaseSolution, FluidProps, InletProfile, InletSpec, Mesh, TransportProps,
};

fn setup() -> CaseSetup {
    CaseSetup {
        fluid: FluidProps { mu: 0.05, rho: 1.0 },
        transport: TransportProps {
            diffusivity: 0.02,
            c_in: 100.0,
            c_pack: 1.0,
        },
        inlet: InletSpec {
            mean_speed: 1.0,
            profile: InletProfile::Uniform,
        },
        flow_cfg: Default::default(),
        transport_stab: Default::default(),
    }
}

/// Same geometry at refinement factor k: channel [0,2]x[0,1] with the
/// hole [0.875, 1.125] x [0.375, 0.625].
fn refined_case(k: usize) -> (Mesh, CaseSolution) {
    let mesh = structured_channel_with_hole(
        2.0,
        1.0,
        16 * k,
        8 * k,
        false,
        Some((7 * k, 9 * k, 3 * k, 5 * k)),
    )
    .unwrap();
    let sol = evaluate_case(&mesh, &setup()).unwrap();
    (mesh, sol)
}

/// Refinement stability of the outlet concentration (the beta-relevant
/// outlet flux), plus mass and scalar-flux conservation on the finest
/// mesh.
#[test]
fn refinement_and_conservation() {
    let (_, coarse) = refined_case(8);
    let (mesh, fine) = refined_case(12);

    // outlet quantity changes by < 1% between the two finest meshes
    let drift = ((fine.metrics.c_out - coarse.metrics.c_out) / fine.metrics.c_out).abs();
    assert!(
        drift < 0.01,
        "outlet concentration drift {drift:.4} between refinements ({} vs {})",
        coarse.metrics.c_out,
        fine.metrics.c_out
    );

    // global mass balance below 0.1% of the inlet flux
    let q_in = flux_integral(&mesh, &fine.flow.u, None, &[BoundaryTag::Inlet]).unwrap();
    let q_out = flux_integral(&mesh, &fine.flow.u, None, &[BoundaryTag::Outlet]).unwrap();
    assert!(
        (q_in + q_out).abs() <= 1e-3 * q_in.abs(),
        "mass imbalance {:.3e} vs inlet {:.3e}",
        q_in + q_out,
        q_in
    );

    // total discrete boundary flux of the scalar closes below 1e-3 of the
    // inlet advective flux
    let s = setup();
    let bcs = default_transport_bcs(&mesh, &s.transport);
    let (total, inlet) = flux_balance(
        &mesh,
        &fine.flow.u,
        &fine.concentration,
        &s.transport,
        &s.transport_stab,
        &bcs,
    )
    .unwrap();
    assert!(
        total.abs() <= 1e-3 * inlet.abs(),
        "transport flux balance {total:.3e} vs inlet {inlet:.3e}"
    );
}

/// Flow-weighted mean concentration over streamwise stations is
/// nonincreasing toward the outlet (the packing is the only sink); a small
/// slack absorbs the numerical wiggle downstream of the obstacle.
#[test]
fn station_means_nonincreasing_downstream() {
    let (mesh, sol) = refined_case(4);
    let nx = 16 * 4;
    let dx = 2.0 / nx as f64;
    let mut means = Vec::new();
    for i in (0..=nx).step_by(8) {
        let x_i = i as f64 * dx;
        let mut num = 0.0;
        let mut den = 0.0;
        for v in 0..mesh.vertex_count() {
            if (mesh.vertex(v)[0] - x_i).abs() < 1e-9 {
                let w = sol.flow.u[2 * v].max(0.0);
                num += w * sol.concentration.values[v];
                den += w;
            }
        }
        if den > 0.0 {
            means.push(num / den);
        }
    }
    assert!(means.len() >= 5);
    let slack = 1e-3 * (100.0 - 1.0);
    for w in means.windows(2) {
        assert!(
            w[1] <= w[0] + slack,
            "station means increased downstream: {means:?}"
        );
    }
}
