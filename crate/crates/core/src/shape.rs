//! Shape gradient of the objective with respect to the mesh vertex
//! coordinates, its elasticity-smoothed Riesz representative under the
//! boundary constraints, and the quality-guarded ascent loop.
//!
//! The raw gradient differentiates the discrete residual-weighted
//! Lagrangian through the element geometry: for every cell integral
//! I = vol * sum_q w_q F(grad lambda, nodal values), moving vertex i by
//! e_k changes vol by vol * g_i[k] and every basis gradient by
//! d g_j = -g_j[k] g_i, so
//!   dI/dX_i = vol * (Fbar I - Mbar) g_i,  Mbar[k][m] = sum_j g_j[k] T_j[m],
//! with T_j = dF/d(g_j) accumulated per quadrature point.
//!
//! The stabilization coefficients depend on the cell diameter, and on
//! convection-dominated meshes the crosswind diffusivity dwarfs the
//! physical one, so their geometric sensitivity is differentiated as well
//! (through the longest-edge direction). What stays frozen is the state
//! feedback of the coefficients (d tau / d u) and the crosswind projector;
//! the finite-difference tolerance absorbs that residual gap.

use crate::adjoint::{freeze_coeffs, solve_adjoint, AdjointState, FrozenCoeffs};
use crate::error::{Error, Result};
use crate::fem::assemble::assemble_matrix;
use crate::fem::bc::apply_dirichlet;
use crate::fem::quadrature::cell_rule;
use crate::fem::solver::{solve_linear, LinearSolverConfig};
use crate::fem::space::ElementGeom;
use crate::fem::sparse::{dot, norm2, CsrMatrix};
use crate::mesh::{BoundaryTag, DisplacementOutcome, Mesh, VertexDisplacement};
use crate::metrics::{evaluate_case_from, CaseMetrics, CaseSetup, CaseSolution};
use crate::rng::SplitMix64;

/// What the optimizer may do to the vertices on a boundary tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagRole {
    /// Vertices pinned (zero displacement).
    Fixed,
    /// Vertices slide in the tangent plane of the configured normal.
    Sliding,
    /// Vertices move freely.
    Free,
}

/// Role per boundary tag plus the analytic jacket normal used by the
/// sliding constraint. Defaults follow the optimization problem: inlet,
/// outlet and cylinder wall fixed, packing jacket sliding, packing free.
#[derive(Debug, Clone)]
pub struct RoleMap {
    pub inlet: TagRole,
    pub outlet: TagRole,
    pub cyl_wall: TagRole,
    pub packing_jacket: TagRole,
    pub packing: TagRole,
    /// Unit normal of the (planar or cylindrical) jacket; when absent the
    /// per-vertex normal is averaged from the adjacent jacket facets.
    pub jacket_normal: Option<Vec<f64>>,
}

impl Default for RoleMap {
    fn default() -> Self {
        RoleMap {
            inlet: TagRole::Fixed,
            outlet: TagRole::Fixed,
            cyl_wall: TagRole::Fixed,
            packing_jacket: TagRole::Sliding,
            packing: TagRole::Free,
            jacket_normal: None,
        }
    }
}

impl RoleMap {
    pub fn role(&self, tag: BoundaryTag) -> TagRole {
        match tag {
            BoundaryTag::Inlet => self.inlet,
            BoundaryTag::Outlet => self.outlet,
            BoundaryTag::CylWall => self.cyl_wall,
            BoundaryTag::PackingJacket => self.packing_jacket,
            BoundaryTag::Packing => self.packing,
        }
    }

    fn tags_with_role(&self, role: TagRole) -> Vec<BoundaryTag> {
        BoundaryTag::ALL
            .into_iter()
            .filter(|&t| self.role(t) == role)
            .collect()
    }
}

/// Vertex-level constraint sets derived from the roles: fixed vertices,
/// and sliding vertices with their unit normals (fixed wins on vertices
/// shared between a fixed and a sliding tag).
pub struct VertexConstraints {
    pub fixed: Vec<usize>,
    pub sliding: Vec<(usize, Vec<f64>)>,
}

pub fn vertex_constraints(mesh: &Mesh, roles: &RoleMap) -> Result<VertexConstraints> {
    let dim = mesh.dim();
    let fixed = mesh.vertices_on_tags(&roles.tags_with_role(TagRole::Fixed));
    let fixed_set: std::collections::HashSet<usize> = fixed.iter().copied().collect();
    let sliding_tags = roles.tags_with_role(TagRole::Sliding);
    let mut normals: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
    for (f, facet) in mesh.facets().iter().enumerate() {
        if !sliding_tags.contains(&facet.tag) {
            continue;
        }
        let (n, area) = mesh.facet_normal_area(f)?;
        for &v in mesh.facet_vertices(f) {
            if fixed_set.contains(&v) {
                continue;
            }
            let entry = normals.entry(v).or_insert_with(|| vec![0.0; dim]);
            for k in 0..dim {
                entry[k] += n[k] * area;
            }
        }
    }
    let mut sliding: Vec<(usize, Vec<f64>)> = normals
        .into_iter()
        .map(|(v, mut n)| {
            if let Some(cfg_n) = &roles.jacket_normal {
                n = cfg_n.clone();
            }
            let len = norm2(&n);
            ((v, n.iter().map(|x| x / len).collect()), len)
        })
        .filter(|(_, len)| *len > 0.0)
        .map(|(pair, _)| pair)
        .collect();
    sliding.sort_by_key(|(v, _)| *v);
    Ok(VertexConstraints { fixed, sliding })
}

/// Raw coordinate sensitivity plus its smoothed Riesz representative.
#[derive(Debug, Clone)]
pub struct ShapeGradient {
    pub raw: Vec<f64>,
    pub smoothed: VertexDisplacement,
}

/// Total derivative of J with respect to every vertex coordinate:
/// the explicit packing-area term plus the adjoint-weighted geometric
/// derivatives of the flow and transport residuals (frozen stabilization).
pub fn shape_derivative(
    mesh: &Mesh,
    setup: &CaseSetup,
    sol: &CaseSolution,
    adj: &AdjointState,
    coeffs: &FrozenCoeffs,
) -> Result<Vec<f64>> {
    shape_derivative_with(mesh, setup, sol, adj, coeffs, true)
}

/// [`shape_derivative`] with the coefficient-sensitivity terms optional;
/// disabling them exposes the pure element-geometry derivative that the
/// frozen-pipeline finite-difference oracle validates exactly.
pub fn shape_derivative_with(
    mesh: &Mesh,
    setup: &CaseSetup,
    sol: &CaseSolution,
    adj: &AdjointState,
    coeffs: &FrozenCoeffs,
    differentiate_coefficients: bool,
) -> Result<Vec<f64>> {
    let dim = mesh.dim();
    let nf = dim + 1;
    let nv = mesh.vertex_count();
    let rule = cell_rule(dim);
    let mut g = vec![0.0; nv * dim];

    // explicit objective dependence: J = (vdot / a_geo) ln(r) with only
    // a_geo moving, dJ/dA = -J / A
    let djda = -sol.metrics.j / sol.metrics.a_geo;
    for (f, facet) in mesh.facets().iter().enumerate() {
        if !matches!(facet.tag, BoundaryTag::Packing | BoundaryTag::PackingJacket) {
            continue;
        }
        let fv = mesh.facet_vertices(f);
        match dim {
            2 => {
                let (a, b) = (fv[0], fv[1]);
                let (xa, xb) = (mesh.vertex(a), mesh.vertex(b));
                let len = ((xb[0] - xa[0]).powi(2) + (xb[1] - xa[1]).powi(2)).sqrt();
                for k in 0..2 {
                    let t = (xb[k] - xa[k]) / len;
                    g[a * 2 + k] += djda * (-t);
                    g[b * 2 + k] += djda * t;
                }
            }
            3 => {
                let (a, b, c) = (fv[0], fv[1], fv[2]);
                let (xa, xb, xc) = (mesh.vertex(a), mesh.vertex(b), mesh.vertex(c));
                let (n, _) = mesh.facet_normal_area(f)?;
                let cross = |u: &[f64], v: &[f64]| {
                    [
                        u[1] * v[2] - u[2] * v[1],
                        u[2] * v[0] - u[0] * v[2],
                        u[0] * v[1] - u[1] * v[0],
                    ]
                };
                let e_bc: Vec<f64> = (0..3).map(|k| xb[k] - xc[k]).collect();
                let e_ca: Vec<f64> = (0..3).map(|k| xc[k] - xa[k]).collect();
                let e_ab: Vec<f64> = (0..3).map(|k| xa[k] - xb[k]).collect();
                let da = cross(&e_bc, &n);
                let db = cross(&e_ca, &n);
                let dc = cross(&e_ab, &n);
                for k in 0..3 {
                    g[a * 3 + k] += djda * 0.5 * da[k];
                    g[b * 3 + k] += djda * 0.5 * db[k];
                    g[c * 3 + k] += djda * 0.5 * dc[k];
                }
            }
            _ => unreachable!(),
        }
    }

    // adjoint-weighted residual derivatives, cell by cell
    let packed = sol.flow.pack(dim);
    let cvals = &sol.concentration.values;
    let props = &setup.fluid;
    for cell in 0..mesh.cell_count() {
        let geom = ElementGeom::new(mesh, cell)?;
        let n = geom.nverts();
        let (rho, mu, dcoef) = (props.rho, props.mu, setup.transport.diffusivity);
        let tau_m = coeffs.flow_stab.tau_mom[cell];
        let tau_l = coeffs.flow_stab.tau_lsic[cell];
        let sw = coeffs.flow_stab.switches;
        let tau_c = coeffs.tau_transport[cell];
        let d_cw = coeffs.crosswind.d_cw[cell];
        let uhat = &coeffs.crosswind.unit_u[cell];

        // nodal values on this cell
        let mut un = [[0.0f64; 3]; 4];
        let mut pn = [0.0f64; 4];
        let mut lun = [[0.0f64; 3]; 4];
        let mut lpn = [0.0f64; 4];
        let mut cn = [0.0f64; 4];
        let mut zn = [0.0f64; 4];
        for i in 0..n {
            let v = geom.verts[i];
            for k in 0..dim {
                un[i][k] = packed[v * nf + k];
                lun[i][k] = adj.lambda[v * nf + k];
            }
            pn[i] = packed[v * nf + dim];
            lpn[i] = adj.lambda[v * nf + dim];
            cn[i] = cvals[v];
            zn[i] = adj.z[v];
        }
        // constant gradients
        let mut grad_u = [[0.0f64; 3]; 3];
        let mut grad_lu = [[0.0f64; 3]; 3];
        let mut grad_p = [0.0f64; 3];
        let mut grad_lp = [0.0f64; 3];
        let mut grad_c = [0.0f64; 3];
        let mut grad_z = [0.0f64; 3];
        for i in 0..n {
            for a in 0..dim {
                for b in 0..dim {
                    grad_u[a][b] += un[i][a] * geom.grads[i][b];
                    grad_lu[a][b] += lun[i][a] * geom.grads[i][b];
                }
            }
            for k in 0..dim {
                grad_p[k] += pn[i] * geom.grads[i][k];
                grad_lp[k] += lpn[i] * geom.grads[i][k];
                grad_c[k] += cn[i] * geom.grads[i][k];
                grad_z[k] += zn[i] * geom.grads[i][k];
            }
        }
        let div_u: f64 = (0..dim).map(|a| grad_u[a][a]).sum();
        let div_lu: f64 = (0..dim).map(|a| grad_lu[a][a]).sum();
        // projected gradients for the crosswind term
        let mut pgc = [0.0f64; 3];
        let mut pgz = [0.0f64; 3];
        if d_cw > 0.0 {
            let uc: f64 = (0..dim).map(|k| uhat[k] * grad_c[k]).sum();
            let uz: f64 = (0..dim).map(|k| uhat[k] * grad_z[k]).sum();
            for k in 0..dim {
                pgc[k] = grad_c[k] - uhat[k] * uc;
                pgz[k] = grad_z[k] - uhat[k] * uz;
            }
        }

        let mut fbar = 0.0;
        let mut mbar = [[0.0f64; 3]; 3];
        // integrals multiplied by each stabilization coefficient, kept
        // separate for the d(coef)/dh terms
        let mut s_supg_flow = 0.0;
        let mut s_supg_c = 0.0;
        for q in rule {
            let w = q.weight;
            let mut uq = [0.0f64; 3];
            let mut luq = [0.0f64; 3];
            let mut pq = 0.0;
            let mut lpq = 0.0;
            let mut zq = 0.0;
            for i in 0..n {
                for k in 0..dim {
                    uq[k] += q.bary[i] * un[i][k];
                    luq[k] += q.bary[i] * lun[i][k];
                }
                pq += q.bary[i] * pn[i];
                lpq += q.bary[i] * lpn[i];
                zq += q.bary[i] * zn[i];
            }
            // strong residual r and adjoint test s of the SUPG pair
            let mut r = [0.0f64; 3];
            let mut s = [0.0f64; 3];
            for a in 0..dim {
                let mut conv = 0.0;
                let mut conv_l = 0.0;
                for b in 0..dim {
                    conv += uq[b] * grad_u[a][b];
                    conv_l += uq[b] * grad_lu[a][b];
                }
                r[a] = rho * conv + grad_p[a];
                s[a] = rho * conv_l + grad_lp[a];
            }
            let ug_c: f64 = (0..dim).map(|k| uq[k] * grad_c[k]).sum();
            let ug_z: f64 = (0..dim).map(|k| uq[k] * grad_z[k]).sum();

            // integrand value F at this quadrature point
            let mut f_val = 0.0;
            for a in 0..dim {
                for b in 0..dim {
                    f_val += mu * grad_u[a][b] * grad_lu[a][b];
                }
            }
            for a in 0..dim {
                let mut conv = 0.0;
                for b in 0..dim {
                    conv += uq[b] * grad_u[a][b];
                }
                f_val += rho * conv * luq[a];
            }
            f_val -= pq * div_lu;
            f_val += div_u * lpq;
            if sw.grad_div {
                f_val += tau_l * div_u * div_lu;
            }
            if sw.supg || sw.pspg {
                // the SUPG test part carries rho (u.grad)lambda_u, the PSPG
                // part grad lambda_p; switches gate each half
                let mut rs = 0.0;
                for a in 0..dim {
                    let s_eff = (if sw.supg {
                        rho * (0..dim).map(|b| uq[b] * grad_lu[a][b]).sum::<f64>()
                    } else {
                        0.0
                    }) + (if sw.pspg { grad_lp[a] } else { 0.0 });
                    rs += r[a] * s_eff;
                }
                f_val += tau_m * rs;
                s_supg_flow += w * rs;
            }
            f_val += dcoef * (0..dim).map(|k| grad_c[k] * grad_z[k]).sum::<f64>();
            f_val += ug_c * zq;
            f_val += tau_c * ug_c * ug_z;
            s_supg_c += w * ug_c * ug_z;
            if d_cw > 0.0 {
                f_val += d_cw * (0..dim).map(|k| pgc[k] * grad_z[k]).sum::<f64>();
            }
            fbar += w * f_val;

            // T_j = dF/d(grad lambda_j) per local node, accumulated into Mbar
            for j in 0..n {
                let mut t = [0.0f64; 3];
                // viscous
                for m in 0..dim {
                    let mut val = 0.0;
                    for a in 0..dim {
                        val += mu * (grad_lu[a][m] * un[j][a] + grad_u[a][m] * lun[j][a]);
                    }
                    t[m] = val;
                }
                // Galerkin convection
                let lu_uj: f64 = (0..dim).map(|a| luq[a] * un[j][a]).sum();
                for m in 0..dim {
                    t[m] += rho * lu_uj * uq[m];
                }
                // pressure and continuity
                for m in 0..dim {
                    t[m] += -pq * lun[j][m] + lpq * un[j][m];
                }
                if sw.grad_div {
                    for m in 0..dim {
                        t[m] += tau_l * (div_lu * un[j][m] + div_u * lun[j][m]);
                    }
                }
                if sw.supg || sw.pspg {
                    let s_eff: Vec<f64> = (0..dim)
                        .map(|a| {
                            (if sw.supg {
                                rho * (0..dim).map(|b| uq[b] * grad_lu[a][b]).sum::<f64>()
                            } else {
                                0.0
                            }) + (if sw.pspg { grad_lp[a] } else { 0.0 })
                        })
                        .collect();
                    // p_j enters through grad p inside r (tested by s_eff);
                    // lambda_p_j enters through the PSPG part of s_eff
                    let s_uj: f64 = (0..dim).map(|a| s_eff[a] * un[j][a]).sum();
                    let r_luj: f64 = (0..dim).map(|a| r[a] * lun[j][a]).sum();
                    for m in 0..dim {
                        let mut val = rho * s_uj * uq[m] + pn[j] * s_eff[m];
                        if sw.supg {
                            val += rho * r_luj * uq[m];
                        }
                        if sw.pspg {
                            val += lpn[j] * r[m];
                        }
                        t[m] += tau_m * val;
                    }
                }
                // transport pieces
                for m in 0..dim {
                    t[m] += dcoef * (cn[j] * grad_z[m] + zn[j] * grad_c[m]);
                    t[m] += zq * cn[j] * uq[m];
                    t[m] += tau_c * (ug_z * cn[j] + ug_c * zn[j]) * uq[m];
                    if d_cw > 0.0 {
                        t[m] += d_cw * (cn[j] * pgz[m] + zn[j] * pgc[m]);
                    }
                }
                for k in 0..dim {
                    for m in 0..dim {
                        mbar[k][m] += w * geom.grads[j][k] * t[m];
                    }
                }
            }
        }
        // dI/dX_i = vol (Fbar g_i - Mbar g_i); the Lagrangian subtracts the
        // residual terms, so they enter g with a minus sign
        for i in 0..n {
            let v = geom.verts[i];
            for k in 0..dim {
                let mut mg = 0.0;
                for m in 0..dim {
                    mg += mbar[k][m] * geom.grads[i][m];
                }
                g[v * dim + k] -= geom.vol * (fbar * geom.grads[i][k] - mg);
            }
        }

        if differentiate_coefficients {
            // the coefficients vary with the cell's longest edge:
            //   tau = (a^2 + b^2)^(-1/2), a ~ 1/h, b ~ 1/h^2
            //     -> d tau / dh = tau^3 (a^2 + 2 b^2) / h
            //   tau_lsic = rho U h / 2 -> tau_lsic / h
            //   d_cw = C h U / 2 - D (active) -> C U / 2
            let (h, ties) = longest_edges(mesh, cell);
            let u_mid = {
                let cv = mesh.cell_vertices(cell);
                let mut m = [0.0f64; 3];
                for &v in cv {
                    for k in 0..dim {
                        m[k] += sol.flow.u[v * dim + k] / cv.len() as f64;
                    }
                }
                m[..dim].iter().map(|x| x * x).sum::<f64>().sqrt()
            };
            let mut dcoef_sum = 0.0;
            if sw.supg || sw.pspg {
                let a = 2.0 * rho * u_mid / h;
                let b = 4.0 * mu / (h * h);
                dcoef_sum += tau_m.powi(3) * (a * a + 2.0 * b * b) / h * s_supg_flow * geom.vol;
            }
            if sw.grad_div {
                dcoef_sum += 0.5 * rho * u_mid * (div_u * div_lu) * geom.vol;
            }
            if tau_c > 0.0 {
                let a = 2.0 * u_mid / h;
                let b = 4.0 * dcoef / (h * h);
                dcoef_sum += tau_c.powi(3) * (a * a + 2.0 * b * b) / h * s_supg_c * geom.vol;
            }
            if d_cw > 0.0 {
                let s_cw: f64 = (0..dim).map(|k| pgc[k] * grad_z[k]).sum();
                dcoef_sum += 0.5 * setup.transport_stab.crosswind_c * u_mid * s_cw * geom.vol;
            }
            if dcoef_sum != 0.0 {
                // exactly tied longest edges (isoceles cells are common in
                // refined meshes): the symmetric subgradient, which equally
                // weights the tied edges, is what central differences see
                for &(ta, tb) in &ties {
                    let (xa, xb) = (mesh.vertex(ta), mesh.vertex(tb));
                    let share = dcoef_sum / ties.len() as f64;
                    for k in 0..dim {
                        let e_k = (xb[k] - xa[k]) / h;
                        g[tb * dim + k] -= share * e_k;
                        g[ta * dim + k] += share * e_k;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Longest edge length of a cell together with every edge tied for the
/// maximum (relative tolerance 1e-9), matching [`Mesh::cell_diameter`].
fn longest_edges(mesh: &Mesh, cell: usize) -> (f64, Vec<(usize, usize)>) {
    let cv = mesh.cell_vertices(cell);
    let mut edges = Vec::new();
    let mut h = 0.0f64;
    for i in 0..cv.len() {
        for j in (i + 1)..cv.len() {
            let (xa, xb) = (mesh.vertex(cv[i]), mesh.vertex(cv[j]));
            let d = xa
                .iter()
                .zip(xb)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            edges.push((d, cv[i], cv[j]));
            h = h.max(d);
        }
    }
    let ties: Vec<(usize, usize)> = edges
        .into_iter()
        .filter(|&(d, _, _)| d >= h * (1.0 - 1e-9))
        .map(|(_, a, b)| (a, b))
        .collect();
    (h, ties)
}

/// Assembles the vector-elasticity extension form
/// a(g, v) = int grad g : grad v + int (div g)(div v) with unit parameters.
fn assemble_extension(mesh: &Mesh) -> Result<CsrMatrix> {
    let dim = mesh.dim();
    let nv = mesh.vertex_count();
    assemble_matrix(mesh.cell_count(), nv * dim, nv * dim, |cell, coo| {
        let g = ElementGeom::new(mesh, cell)?;
        let n = g.nverts();
        for i in 0..n {
            for j in 0..n {
                let gg: f64 = (0..dim).map(|k| g.grads[i][k] * g.grads[j][k]).sum();
                for a in 0..dim {
                    for b in 0..dim {
                        // grad:grad gives gg on the diagonal blocks;
                        // div-div couples components via g_i[a] g_j[b]
                        let mut val = g.grads[i][a] * g.grads[j][b];
                        if a == b {
                            val += gg;
                        }
                        coo.push(g.verts[i] * dim + a, g.verts[j] * dim + b, val * g.vol);
                    }
                }
            }
        }
        Ok(())
    })
}

/// Applies the symmetric tangent-plane projection P A P + (I - P) for one
/// sliding vertex block and projects the right-hand side.
fn project_sliding(a: &mut CsrMatrix, b: &mut [f64], vertex: usize, normal: &[f64]) -> Result<()> {
    let dim = normal.len();
    let base = vertex * dim;
    let proj = |k: usize, m: usize| (if k == m { 1.0 } else { 0.0 }) - normal[k] * normal[m];
    // rows: the block rows share the sparsity pattern by construction
    let pattern_len = a.row(base).0.len();
    for k in 0..dim {
        if a.row(base + k).0.len() != pattern_len {
            return Err(Error::InvalidConfig(
                "sliding projection requires uniform block sparsity".into(),
            ));
        }
    }
    let old_rows: Vec<Vec<f64>> = (0..dim).map(|k| a.row(base + k).1.to_vec()).collect();
    for k in 0..dim {
        let (_, vals) = a.row_mut(base + k);
        for (pos, val) in vals.iter_mut().enumerate() {
            *val = (0..dim).map(|m| proj(k, m) * old_rows[m][pos]).sum();
        }
    }
    // columns
    for i in 0..a.nrows() {
        let (cols, _) = a.row(i);
        if cols.binary_search(&base).is_err() {
            continue;
        }
        let old: Vec<f64> = (0..dim).map(|m| a.get(i, base + m)).collect();
        for k in 0..dim {
            let newv: f64 = (0..dim).map(|m| old[m] * proj(m, k)).sum();
            a.set(i, base + k, newv)?;
        }
    }
    // (I - P) = n n^T on the diagonal block keeps the system nonsingular
    for k in 0..dim {
        for m in 0..dim {
            let v = a.get(base + k, base + m) + normal[k] * normal[m];
            a.set(base + k, base + m, v)?;
        }
    }
    let old_b: Vec<f64> = (0..dim).map(|m| b[base + m]).collect();
    for k in 0..dim {
        b[base + k] = (0..dim).map(|m| proj(k, m) * old_b[m]).sum();
    }
    Ok(())
}

/// Smooths the raw sensitivity into a constrained displacement field by a
/// linear-elasticity solve: zero on fixed boundaries, tangent-projected on
/// sliding ones, free elsewhere.
pub fn riesz_gradient(
    mesh: &Mesh,
    raw: &[f64],
    roles: &RoleMap,
    lin_cfg: &LinearSolverConfig,
) -> Result<ShapeGradient> {
    let dim = mesh.dim();
    let constraints = vertex_constraints(mesh, roles)?;
    if constraints.fixed.is_empty() {
        return Err(Error::UnconstrainedExtension);
    }
    // with every boundary tag fixed the shape cannot change; the interior
    // coordinate sensitivity is pure discretization noise, so the gradient
    // is identically zero and the optimizer stalls
    let movable = BoundaryTag::ALL
        .iter()
        .any(|&t| mesh.has_tag(t) && roles.role(t) != TagRole::Fixed);
    if !movable {
        return Ok(ShapeGradient {
            raw: raw.to_vec(),
            smoothed: VertexDisplacement::zeros(mesh),
        });
    }
    let mut a = assemble_extension(mesh)?;
    let mut b = raw.to_vec();
    for (v, n) in &constraints.sliding {
        project_sliding(&mut a, &mut b, *v, n)?;
    }
    let dirichlet: Vec<(usize, f64)> = constraints
        .fixed
        .iter()
        .flat_map(|&v| (0..dim).map(move |k| (v * dim + k, 0.0)))
        .collect();
    apply_dirichlet(&mut a, &mut b, &dirichlet, true)?;
    let mut x = solve_linear(&a, &b, lin_cfg)?.x;
    // exact constraint enforcement after the solve
    for &v in &constraints.fixed {
        for k in 0..dim {
            x[v * dim + k] = 0.0;
        }
    }
    for (v, n) in &constraints.sliding {
        let gn: f64 = (0..dim).map(|k| x[v * dim + k] * n[k]).sum();
        for k in 0..dim {
            x[v * dim + k] -= gn * n[k];
        }
    }
    Ok(ShapeGradient {
        raw: raw.to_vec(),
        smoothed: VertexDisplacement::from_vec(x),
    })
}

/// Ascent direction bundle computed at one state.
pub struct GradientBundle {
    pub gradient: ShapeGradient,
    pub adjoint: AdjointState,
    /// g_raw . g_smoothed, the ascent slope used by the Armijo rule.
    pub slope: f64,
}

/// Forward solve + adjoint + shape derivative + smoothing at one state.
pub fn compute_gradient(
    mesh: &Mesh,
    setup: &CaseSetup,
    sol: &CaseSolution,
    roles: &RoleMap,
) -> Result<GradientBundle> {
    let coeffs = freeze_coeffs(mesh, setup, sol)?;
    let adjoint = solve_adjoint(mesh, setup, sol, &coeffs, &setup.flow_cfg.linear)?;
    let raw = shape_derivative(mesh, setup, sol, &adjoint, &coeffs)?;
    let gradient = riesz_gradient(mesh, &raw, roles, &setup.flow_cfg.linear)?;
    let slope = dot(&gradient.raw, &gradient.smoothed.data);
    Ok(GradientBundle {
        gradient,
        adjoint,
        slope,
    })
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// 0 scales the first step to 2% of the domain diameter.
    pub initial_step: f64,
    pub armijo_c: f64,
    pub step_shrink: f64,
    pub step_grow: f64,
    pub quality_floor: f64,
    /// Stop when the smoothed gradient norm falls below this.
    pub grad_tol: f64,
    pub max_halvings: usize,
    /// Run a one-direction finite-difference audit every N iterations
    /// (0 disables).
    pub audit_every: usize,
    /// Monitored bound on the total vertex displacement (0 = 20% of the
    /// domain diameter).
    pub trust_radius: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 50,
            initial_step: 0.0,
            armijo_c: 1e-4,
            step_shrink: 0.5,
            step_grow: 1.5,
            quality_floor: 0.1,
            grad_tol: 1e-14,
            max_halvings: 20,
            audit_every: 0,
            trust_radius: 0.0,
            seed: 42,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "armijo_c {} not in (0, 1)",
                self.armijo_c
            )));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::InvalidConfig("step_shrink must be in (0, 1)".into()));
        }
        if self.step_grow < 1.0 {
            return Err(Error::InvalidConfig("step_grow must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.quality_floor) {
            return Err(Error::InvalidConfig(
                "quality_floor must be in [0, 1)".into(),
            ));
        }
        if self.initial_step < 0.0 || self.grad_tol < 0.0 || self.trust_radius < 0.0 {
            return Err(Error::InvalidConfig(
                "steps, tolerances and radii must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One history row; row 0 describes the initial design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationRecord {
    pub iteration: usize,
    pub j: f64,
    pub beta: f64,
    pub c_out: f64,
    pub dp: f64,
    pub a_geo: f64,
    pub min_quality: f64,
    /// Accepted step size that produced this state (0 for row 0).
    pub step: f64,
    /// Smoothed gradient norm computed at this state (0 when the loop
    /// stopped before evaluating it).
    pub grad_norm: f64,
}

impl OptimizationRecord {
    fn new(iteration: usize, m: &CaseMetrics, min_quality: f64, step: f64) -> Self {
        OptimizationRecord {
            iteration,
            j: m.j,
            beta: m.beta,
            c_out: m.c_out,
            dp: m.dp,
            a_geo: m.a_geo,
            min_quality,
            step,
            grad_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxIterations,
    GradientTolerance,
    /// No acceptable step (zero gradient, exhausted halvings, or every
    /// candidate rejected by the quality gate).
    Stalled,
    /// A solver failure ended the run; the last valid state is kept.
    Aborted(String),
}

/// Result of one audit row: relative error of the one-direction FD check.
#[derive(Debug, Clone, Copy)]
pub struct AuditRecord {
    pub iteration: usize,
    pub rel_err: f64,
}

pub struct OptimizeResult {
    pub mesh: Mesh,
    pub solution: CaseSolution,
    pub history: Vec<OptimizationRecord>,
    pub stop: StopReason,
    pub audits: Vec<AuditRecord>,
    /// Max-norm of the total displacement from the initial coordinates.
    pub max_displacement: f64,
}

/// Backtracking ascent step from the current state. Returns the accepted
/// (step, mesh, solution) or None when no step passed the quality gate and
/// the Armijo test within the halving budget.
#[allow(clippy::too_many_arguments)]
pub fn line_search_step(
    mesh: &Mesh,
    setup: &CaseSetup,
    sol: &CaseSolution,
    bundle: &GradientBundle,
    first_step: f64,
    cfg: &OptimizerConfig,
) -> Result<Option<(f64, Mesh, CaseSolution)>> {
    if bundle.slope <= 0.0 {
        return Ok(None);
    }
    let mut t = first_step;
    for _ in 0..=cfg.max_halvings {
        let mut candidate = mesh.clone();
        let d = bundle.gradient.smoothed.scaled(t);
        match candidate.apply_displacement(&d, cfg.quality_floor)? {
            DisplacementOutcome::Rejected { .. } => {
                t *= cfg.step_shrink;
                continue;
            }
            DisplacementOutcome::Accepted => {}
        }
        match evaluate_case_from(&candidate, setup, Some(&sol.flow)) {
            Ok(new_sol) => {
                if new_sol.metrics.j >= sol.metrics.j + cfg.armijo_c * t * bundle.slope {
                    return Ok(Some((t, candidate, new_sol)));
                }
                t *= cfg.step_shrink;
            }
            // a failed candidate solve is treated like a rejected step
            Err(_) => {
                t *= cfg.step_shrink;
            }
        }
    }
    Ok(None)
}

/// Gradient-ascent loop: forward solve, adjoint gradient, smoothing,
/// quality-guarded Armijo line search; J is nondecreasing over accepted
/// iterations by construction.
pub fn optimize(
    mesh: Mesh,
    setup: &CaseSetup,
    roles: &RoleMap,
    cfg: &OptimizerConfig,
) -> Result<OptimizeResult> {
    optimize_with_callback(mesh, setup, roles, cfg, |_, _, _| {})
}

/// [`optimize`] with a per-accepted-iteration callback (used by the CLI to
/// dump fields); called with (iteration, mesh, solution) including
/// iteration 0.
pub fn optimize_with_callback<F>(
    mesh: Mesh,
    setup: &CaseSetup,
    roles: &RoleMap,
    cfg: &OptimizerConfig,
    mut on_iteration: F,
) -> Result<OptimizeResult>
where
    F: FnMut(usize, &Mesh, &CaseSolution),
{
    cfg.validate()?;
    let mut mesh = mesh;
    let initial_coords = mesh.coords().to_vec();
    let diameter = mesh.diameter();
    let trust_radius = if cfg.trust_radius > 0.0 {
        cfg.trust_radius
    } else {
        0.2 * diameter
    };
    let mut sol = evaluate_case_from(&mesh, setup, None)?;
    on_iteration(0, &mesh, &sol);
    let mut history = vec![OptimizationRecord::new(
        0,
        &sol.metrics,
        mesh.min_quality()?,
        0.0,
    )];
    let mut audits = Vec::new();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut step = cfg.initial_step;
    let mut max_displacement = 0.0f64;
    let mut stop = StopReason::MaxIterations;

    for it in 1..=cfg.max_iterations {
        let bundle = match compute_gradient(&mesh, setup, &sol, roles) {
            Ok(b) => b,
            Err(e) => {
                stop = StopReason::Aborted(e.to_string());
                break;
            }
        };
        let gnorm = norm2(&bundle.gradient.smoothed.data);
        history.last_mut().unwrap().grad_norm = gnorm;
        if gnorm <= cfg.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        if cfg.audit_every > 0 && (it - 1) % cfg.audit_every == 0 {
            let rel_err = audit_direction(&mesh, setup, roles, &bundle, &mut rng)?;
            audits.push(AuditRecord {
                iteration: it - 1,
                rel_err,
            });
        }
        let first_step = if step > 0.0 {
            step
        } else {
            let gmax = bundle.gradient.smoothed.max_norm();
            if gmax == 0.0 {
                stop = StopReason::Stalled;
                break;
            }
            0.02 * diameter / gmax
        };
        match line_search_step(&mesh, setup, &sol, &bundle, first_step, cfg)? {
            Some((t, new_mesh, new_sol)) => {
                mesh = new_mesh;
                sol = new_sol;
                on_iteration(it, &mesh, &sol);
                history.push(OptimizationRecord::new(
                    it,
                    &sol.metrics,
                    mesh.min_quality()?,
                    t,
                ));
                step = t * cfg.step_grow;
                let disp = mesh
                    .coords()
                    .iter()
                    .zip(&initial_coords)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                max_displacement = max_displacement.max(disp);
                if disp > trust_radius {
                    stop = StopReason::Aborted(format!(
                        "trust radius exceeded: displacement {disp:.3e} > {trust_radius:.3e}"
                    ));
                    break;
                }
            }
            None => {
                stop = StopReason::Stalled;
                break;
            }
        }
    }
    Ok(OptimizeResult {
        mesh,
        solution: sol,
        history,
        stop,
        audits,
        max_displacement,
    })
}

/// A deterministic admissible direction: random on free vertices,
/// tangent-projected on sliding ones, zero on fixed ones.
pub fn random_admissible_direction(
    mesh: &Mesh,
    roles: &RoleMap,
    rng: &mut SplitMix64,
) -> Result<Vec<f64>> {
    let dim = mesh.dim();
    let nv = mesh.vertex_count();
    let constraints = vertex_constraints(mesh, roles)?;
    let mut v: Vec<f64> = (0..nv * dim).map(|_| rng.next_symmetric()).collect();
    for &f in &constraints.fixed {
        for k in 0..dim {
            v[f * dim + k] = 0.0;
        }
    }
    for (s, n) in &constraints.sliding {
        let vn: f64 = (0..dim).map(|k| v[s * dim + k] * n[k]).sum();
        for k in 0..dim {
            v[s * dim + k] -= vn * n[k];
        }
    }
    Ok(v)
}

/// Evaluates J on a displaced copy of the mesh with tight solver settings
/// (used by the finite-difference oracles; no quality gate).
pub fn objective_at_displacement(
    mesh: &Mesh,
    setup: &CaseSetup,
    direction: &[f64],
    amount: f64,
    warm: Option<&CaseSolution>,
) -> Result<f64> {
    let dim = mesh.dim();
    let moved: Vec<f64> = mesh
        .coords()
        .iter()
        .zip(direction)
        .map(|(x, d)| x + amount * d)
        .collect();
    let cells: Vec<usize> = (0..mesh.cell_count())
        .flat_map(|c| mesh.cell_vertices(c).to_vec())
        .collect();
    let facets: Vec<(Vec<usize>, BoundaryTag)> = (0..mesh.facet_count())
        .map(|f| (mesh.facet_vertices(f).to_vec(), mesh.facet(f).tag))
        .collect();
    let deformed = Mesh::new(dim, moved, cells, facets)?;
    let mut tight = setup.clone();
    tight.flow_cfg.newton.rel_tol = tight.flow_cfg.newton.rel_tol.min(1e-10);
    let sol = evaluate_case_from(&deformed, &tight, warm.map(|s| &s.flow))?;
    Ok(sol.metrics.j)
}

fn audit_direction(
    mesh: &Mesh,
    setup: &CaseSetup,
    roles: &RoleMap,
    bundle: &GradientBundle,
    rng: &mut SplitMix64,
) -> Result<f64> {
    let dir = random_admissible_direction(mesh, roles, rng)?;
    let h_mean = (0..mesh.cell_count())
        .map(|c| mesh.cell_diameter(c))
        .sum::<f64>()
        / mesh.cell_count() as f64;
    let eps = 1e-6 * h_mean;
    let jp = objective_at_displacement(mesh, setup, &dir, eps, None)?;
    let jm = objective_at_displacement(mesh, setup, &dir, -eps, None)?;
    let fd = (jp - jm) / (2.0 * eps);
    let analytic = dot(&bundle.gradient.raw, &dir);
    let denom = fd.abs().max(analytic.abs()).max(1e-300);
    Ok((fd - analytic).abs() / denom)
}

/// One row of the finite-difference gradient table.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckRow {
    pub direction: usize,
    pub eps: f64,
    pub fd: f64,
    pub adjoint: f64,
    pub rel_err: f64,
}

/// Central-difference validation of the raw shape gradient over random
/// admissible directions and a sweep of step factors (relative to the mean
/// cell diameter). The forward solves run at tightened Newton tolerance.
pub fn gradient_fd_check(
    mesh: &Mesh,
    setup: &CaseSetup,
    roles: &RoleMap,
    n_directions: usize,
    eps_factors: &[f64],
    seed: u64,
) -> Result<Vec<GradCheckRow>> {
    let mut tight = setup.clone();
    tight.flow_cfg.newton.rel_tol = tight.flow_cfg.newton.rel_tol.min(1e-10);
    let sol = evaluate_case_from(mesh, &tight, None)?;
    let bundle = compute_gradient(mesh, &tight, &sol, roles)?;
    let h_mean = (0..mesh.cell_count())
        .map(|c| mesh.cell_diameter(c))
        .sum::<f64>()
        / mesh.cell_count() as f64;
    let mut rng = SplitMix64::new(seed);
    let mut rows = Vec::new();
    for d in 0..n_directions {
        let dir = random_admissible_direction(mesh, roles, &mut rng)?;
        let analytic = dot(&bundle.gradient.raw, &dir);
        for &factor in eps_factors {
            let eps = factor * h_mean;
            let jp = objective_at_displacement(mesh, &tight, &dir, eps, Some(&sol))?;
            let jm = objective_at_displacement(mesh, &tight, &dir, -eps, Some(&sol))?;
            let fd = (jp - jm) / (2.0 * eps);
            let denom = fd.abs().max(analytic.abs()).max(1e-300);
            rows.push(GradCheckRow {
                direction: d,
                eps,
                fd,
                adjoint: analytic,
                rel_err: (fd - analytic).abs() / denom,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casegen::structured_channel_with_hole;
    use crate::fem::space::FunctionSpace;
    use crate::flow::{FlowSolveConfig, FluidProps, InletProfile, InletSpec};
    use crate::metrics::evaluate_case;
    use crate::transport::{TransportProps, TransportStab};
    use approx::assert_relative_eq;

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
            flow_cfg: FlowSolveConfig::default(),
            transport_stab: TransportStab::default(),
        }
    }

    fn desk_mesh() -> Mesh {
        structured_channel_with_hole(2.0, 1.0, 16, 8, false, Some((7, 9, 3, 5))).unwrap()
    }

    #[test]
    fn facet_area_derivative_matches_fd() {
        // validates the explicit a_geo shape term through the beta formula:
        // displace one packing vertex and compare dJ_explicit via a pure
        // area perturbation at frozen fields
        let mesh = desk_mesh();
        let s = setup();
        let sol = evaluate_case(&mesh, &s).unwrap();
        let coeffs = freeze_coeffs(&mesh, &s, &sol).unwrap();
        // zero adjoints isolate the explicit area term
        let adj = AdjointState {
            z: vec![0.0; mesh.vertex_count()],
            lambda: vec![0.0; mesh.vertex_count() * 3],
        };
        let g = shape_derivative(&mesh, &s, &sol, &adj, &coeffs).unwrap();
        // FD of the explicit part: J(A(X)) with fields frozen
        let packing = mesh.vertices_on_tags(&[BoundaryTag::Packing]);
        let v = packing[1];
        let eps = 1e-7;
        let mut dir = vec![0.0; mesh.vertex_count() * 2];
        dir[v * 2] = 1.0;
        dir[v * 2 + 1] = -0.7;
        let area_at = |amount: f64| {
            let moved: Vec<f64> = mesh
                .coords()
                .iter()
                .zip(&dir)
                .map(|(x, d)| x + amount * d)
                .collect();
            let cells: Vec<usize> = (0..mesh.cell_count())
                .flat_map(|c| mesh.cell_vertices(c).to_vec())
                .collect();
            let facets: Vec<(Vec<usize>, BoundaryTag)> = (0..mesh.facet_count())
                .map(|f| (mesh.facet_vertices(f).to_vec(), mesh.facet(f).tag))
                .collect();
            let m2 = Mesh::new(2, moved, cells, facets).unwrap();
            crate::metrics::geometric_area(&m2).unwrap()
        };
        let j_of_area = |a: f64| {
            crate::metrics::beta(sol.metrics.vdot, a, 100.0, 1.0, sol.metrics.c_out).unwrap()
        };
        let fd = (j_of_area(area_at(eps)) - j_of_area(area_at(-eps))) / (2.0 * eps);
        let analytic = g[v * 2] * dir[v * 2] + g[v * 2 + 1] * dir[v * 2 + 1];
        assert_relative_eq!(fd, analytic, max_relative = 1e-5);
    }

    #[test]
    fn shape_gradient_matches_fd_on_admissible_directions() {
        let mesh = desk_mesh();
        let s = setup();
        let roles = RoleMap::default();
        let rows = gradient_fd_check(&mesh, &s, &roles, 3, &[1e-4, 1e-5], 7).unwrap();
        for row in &rows {
            assert!(
                row.rel_err < 1e-2,
                "direction {} eps {:.1e}: fd {:.6e} adjoint {:.6e} rel {:.3e}",
                row.direction,
                row.eps,
                row.fd,
                row.adjoint,
                row.rel_err
            );
        }
        let best = rows.iter().map(|r| r.rel_err).fold(f64::INFINITY, f64::min);
        assert!(best < 2e-3, "best eps error {best:.3e}");
    }

    #[test]
    fn fixed_direction_has_zero_projected_derivative() {
        // a direction supported on fixed vertices only: the admissible
        // projection wipes it, and the smoothed gradient vanishes there
        let mesh = desk_mesh();
        let s = setup();
        let roles = RoleMap::default();
        let sol = evaluate_case(&mesh, &s).unwrap();
        let bundle = compute_gradient(&mesh, &s, &sol, &roles).unwrap();
        let constraints = vertex_constraints(&mesh, &roles).unwrap();
        for &v in &constraints.fixed {
            for k in 0..2 {
                assert_eq!(bundle.gradient.smoothed.data[v * 2 + k], 0.0);
            }
        }
        // projected contribution of a fixed-supported direction is zero
        let mut dir = vec![0.0; mesh.vertex_count() * 2];
        let f = constraints.fixed[0];
        dir[f * 2] = 1.0;
        let mut rng = SplitMix64::new(0);
        let _ = rng.next_u64();
        let proj = {
            let mut d = dir.clone();
            for &v in &constraints.fixed {
                d[v * 2] = 0.0;
                d[v * 2 + 1] = 0.0;
            }
            d
        };
        assert_eq!(dot(&bundle.gradient.smoothed.data, &proj), 0.0);
    }

    #[test]
    fn riesz_zero_raw_gives_zero() {
        let mesh = desk_mesh();
        let roles = RoleMap::default();
        let raw = vec![0.0; mesh.vertex_count() * 2];
        let g = riesz_gradient(&mesh, &raw, &roles, &LinearSolverConfig::default()).unwrap();
        for v in &g.smoothed.data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn riesz_ascent_property() {
        let mesh = desk_mesh();
        let s = setup();
        let roles = RoleMap::default();
        let sol = evaluate_case(&mesh, &s).unwrap();
        let bundle = compute_gradient(&mesh, &s, &sol, &roles).unwrap();
        assert!(
            bundle.slope > 0.0,
            "raw . smoothed = {} must be positive",
            bundle.slope
        );
    }

    #[test]
    fn sliding_constraint_tangency() {
        // reuse the desk mesh but declare the top/bottom walls sliding with
        // normal (0, 1): the smoothed gradient may move along x only there
        let mesh = desk_mesh();
        let s = setup();
        let roles = RoleMap {
            cyl_wall: TagRole::Sliding,
            jacket_normal: Some(vec![0.0, 1.0]),
            ..Default::default()
        };
        let sol = evaluate_case(&mesh, &s).unwrap();
        let bundle = compute_gradient(&mesh, &s, &sol, &roles).unwrap();
        let constraints = vertex_constraints(&mesh, &roles).unwrap();
        assert!(!constraints.sliding.is_empty());
        for (v, n) in &constraints.sliding {
            let gn: f64 = (0..2)
                .map(|k| bundle.gradient.smoothed.data[v * 2 + k] * n[k])
                .sum();
            assert!(gn.abs() < 1e-12, "normal component {gn:.2e} at vertex {v}");
        }
    }

    #[test]
    fn mirror_symmetric_case_gives_equivariant_gradient() {
        // channel with a y-centered rectangular hole meshed by the
        // mirror-symmetric criss-cross pattern
        let mesh = structured_channel_with_hole(2.0, 1.0, 16, 8, true, Some((7, 9, 3, 5))).unwrap();
        let s = setup();
        let sol = evaluate_case(&mesh, &s).unwrap();
        let coeffs = freeze_coeffs(&mesh, &s, &sol).unwrap();
        let adj = solve_adjoint(&mesh, &s, &sol, &coeffs, &s.flow_cfg.linear).unwrap();
        let g = shape_derivative(&mesh, &s, &sol, &adj, &coeffs).unwrap();
        // vertex pairing under y -> 1 - y
        let nv = mesh.vertex_count();
        let mut pair = vec![usize::MAX; nv];
        for v in 0..nv {
            let (x, y) = (mesh.vertex(v)[0], mesh.vertex(v)[1]);
            for w in 0..nv {
                if (mesh.vertex(w)[0] - x).abs() < 1e-12
                    && (mesh.vertex(w)[1] - (1.0 - y)).abs() < 1e-12
                {
                    pair[v] = w;
                    break;
                }
            }
            assert_ne!(pair[v], usize::MAX, "no mirror image for vertex {v}");
        }
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for v in 0..nv {
            let w = pair[v];
            let gx = g[v * 2];
            let gy = g[v * 2 + 1];
            assert!(
                (gx - g[w * 2]).abs() <= 1e-10 * scale,
                "x-equivariance broken at {v}"
            );
            assert!(
                (gy + g[w * 2 + 1]).abs() <= 1e-10 * scale,
                "y-equivariance broken at {v}"
            );
        }
    }

    #[test]
    fn optimizer_zero_iterations_returns_initial_row() {
        let mesh = desk_mesh();
        let s = setup();
        let cfg = OptimizerConfig {
            max_iterations: 0,
            ..Default::default()
        };
        let out = optimize(mesh, &s, &RoleMap::default(), &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].iteration, 0);
        assert_eq!(out.history[0].step, 0.0);
        assert_eq!(out.stop, StopReason::MaxIterations);
    }

    #[test]
    fn optimizer_all_fixed_stalls_immediately() {
        let mesh = desk_mesh();
        let s = setup();
        let roles = RoleMap {
            packing: TagRole::Fixed,
            packing_jacket: TagRole::Fixed,
            ..Default::default()
        };
        let cfg = OptimizerConfig {
            max_iterations: 3,
            ..Default::default()
        };
        let out = optimize(mesh, &s, &roles, &cfg).unwrap();
        // the gradient is killed by the constraints: either it is zero to
        // tolerance or no ascent step exists
        assert!(matches!(
            out.stop,
            StopReason::Stalled | StopReason::GradientTolerance
        ));
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn optimizer_improves_objective_and_respects_constraints() {
        let mesh = desk_mesh();
        let initial_coords = mesh.coords().to_vec();
        let s = setup();
        let roles = RoleMap::default();
        let cfg = OptimizerConfig {
            max_iterations: 5,
            quality_floor: 0.1,
            audit_every: 4,
            ..Default::default()
        };
        let out = optimize(mesh, &s, &roles, &cfg).unwrap();
        assert!(out.history.len() >= 2, "no accepted steps: {:?}", out.stop);
        // J nondecreasing across accepted iterations
        for w in out.history.windows(2) {
            assert!(w[1].j >= w[0].j, "J decreased: {} -> {}", w[0].j, w[1].j);
        }
        assert!(
            out.history.last().unwrap().j > out.history[0].j,
            "no improvement"
        );
        // quality floor held everywhere
        for row in &out.history {
            assert!(row.min_quality >= cfg.quality_floor);
        }
        // fixed vertices bitwise unmoved
        let constraints = vertex_constraints(&out.mesh, &roles).unwrap();
        for &v in &constraints.fixed {
            for k in 0..2 {
                assert_eq!(
                    out.mesh.vertex(v)[k],
                    initial_coords[v * 2 + k],
                    "fixed vertex {v} moved"
                );
            }
        }
        // audits ran and passed the documented tolerance
        assert!(!out.audits.is_empty());
        for audit in &out.audits {
            assert!(audit.rel_err < 1e-2, "audit failed: {:?}", audit);
        }
        // line-search acceptance grew the step at least once
        assert!(out.history[1].step > 0.0);
    }

    #[test]
    fn line_search_halves_on_quality_violation() {
        let mesh = desk_mesh();
        let s = setup();
        let roles = RoleMap::default();
        let sol = evaluate_case(&mesh, &s).unwrap();
        let bundle = compute_gradient(&mesh, &s, &sol, &roles).unwrap();
        // a deliberately huge first step must be halved down to acceptance
        let gmax = bundle.gradient.smoothed.max_norm();
        let huge = 10.0 * mesh.diameter() / gmax;
        let cfg = OptimizerConfig::default();
        let accepted = line_search_step(&mesh, &s, &sol, &bundle, huge, &cfg)
            .unwrap()
            .expect("line search should eventually accept");
        let (t, new_mesh, new_sol) = accepted;
        assert!(t < huge, "no halving happened");
        assert!(new_mesh.min_quality().unwrap() >= cfg.quality_floor);
        assert!(new_sol.metrics.j > sol.metrics.j);
    }

    #[test]
    fn frozen_pipeline_fd_validates_geometric_terms() {
        use crate::fem::bc::{apply_dirichlet, constrained_dofs};
        use crate::fem::newton::{newton_solve, NewtonConfig};
        use crate::flow::{flow_bcs, flow_jacobian, flow_residual, FlowState};
        use crate::transport::{default_transport_bcs, transport_matrix};
        let mesh = desk_mesh();
        let s = setup();
        let roles = RoleMap::default();
        let mut tight = s.clone();
        tight.flow_cfg.newton.rel_tol = 1e-12;
        let sol = crate::metrics::evaluate_case_from(&mesh, &tight, None).unwrap();
        let coeffs = freeze_coeffs(&mesh, &tight, &sol).unwrap();
        let adj = crate::adjoint::solve_adjoint_with(
            &mesh,
            &tight,
            &sol,
            &coeffs,
            &tight.flow_cfg.linear,
            false,
        )
        .unwrap();
        let g = shape_derivative_with(&mesh, &tight, &sol, &adj, &coeffs, false).unwrap();

        // frozen-pipeline objective evaluation on a deformed copy
        let eval_frozen = |amount: f64, dir: &[f64]| -> f64 {
            let moved: Vec<f64> = mesh
                .coords()
                .iter()
                .zip(dir)
                .map(|(x, d)| x + amount * d)
                .collect();
            let cells: Vec<usize> = (0..mesh.cell_count())
                .flat_map(|c| mesh.cell_vertices(c).to_vec())
                .collect();
            let facets: Vec<(Vec<usize>, BoundaryTag)> = (0..mesh.facet_count())
                .map(|f| (mesh.facet_vertices(f).to_vec(), mesh.facet(f).tag))
                .collect();
            let m2 = Mesh::new(2, moved, cells, facets).unwrap();
            let space = FunctionSpace::velocity_pressure(&m2);
            let bcs = flow_bcs(&m2, &tight.inlet).unwrap();
            let constraints = constrained_dofs(&m2, &space, &bcs).unwrap();
            let mut x0 = sol.flow.pack(2);
            for &(dof, v) in &constraints {
                x0[dof] = v;
            }
            let residual = |x: &[f64]| {
                let mut r = flow_residual(&m2, x, &tight.fluid, &coeffs.flow_stab, 1.0)?;
                for &(dof, v) in &constraints {
                    r[dof] = x[dof] - v;
                }
                Ok(r)
            };
            let jacobian = |x: &[f64]| {
                let mut a = flow_jacobian(&m2, x, &tight.fluid, &coeffs.flow_stab, 1.0)?;
                let mut dummy = vec![0.0; a.nrows()];
                let rows: Vec<(usize, f64)> = constraints.iter().map(|&(d, _)| (d, 0.0)).collect();
                apply_dirichlet(&mut a, &mut dummy, &rows, false)?;
                Ok(a)
            };
            let cold = {
                let mut xc = vec![0.0; space.ndof()];
                for &(dof, v) in &constraints {
                    xc[dof] = v;
                }
                let mut r = flow_residual(&m2, &xc, &tight.fluid, &coeffs.flow_stab, 1.0).unwrap();
                for &(dof, _) in &constraints {
                    r[dof] = 0.0;
                }
                crate::fem::sparse::norm2(&r)
            };
            let ncfg = NewtonConfig {
                rel_tol: 1e-12,
                abs_tol: 1e-12 * cold,
                max_iter: 40,
                max_backtracks: 8,
            };
            let (x, _) =
                newton_solve(residual, jacobian, &x0, &ncfg, &tight.flow_cfg.linear).unwrap();
            let state = FlowState::unpack(2, &x);
            // frozen transport
            let mut a = transport_matrix(
                &m2,
                &state.u,
                tight.transport.diffusivity,
                &coeffs.tau_transport,
                &coeffs.crosswind,
            )
            .unwrap();
            let mut b = vec![0.0; m2.vertex_count()];
            let sspace = FunctionSpace::scalar(&m2);
            let cbcs = default_transport_bcs(&m2, &tight.transport);
            let ccon = constrained_dofs(&m2, &sspace, &cbcs).unwrap();
            apply_dirichlet(&mut a, &mut b, &ccon, true).unwrap();
            let c = solve_linear(&a, &b, &tight.flow_cfg.linear).unwrap().x;
            let vdot = crate::metrics::volume_flow_rate(&m2, &state.u).unwrap();
            let c_out = crate::metrics::outlet_concentration(
                &m2,
                &state.u,
                &crate::transport::ScalarField { values: c },
            )
            .unwrap();
            let a_geo = crate::metrics::geometric_area(&m2).unwrap();
            crate::metrics::beta(vdot, a_geo, 100.0, 1.0, c_out).unwrap()
        };
        let mut rng = SplitMix64::new(7);
        let dir = random_admissible_direction(&mesh, &roles, &mut rng).unwrap();
        let analytic = dot(&g, &dir);
        for eps in [1e-5, 1e-6] {
            let fd = (eval_frozen(eps, &dir) - eval_frozen(-eps, &dir)) / (2.0 * eps);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
            assert!(
                rel < 1e-7,
                "frozen-pipeline FD mismatch at eps {eps:.0e}: {rel:.3e}"
            );
        }
    }
}


#[cfg(test)]
mod stall_tests {
    use super::*;
    use crate::casegen::structured_channel_with_hole;
    use crate::flow::{FluidProps, InletProfile, InletSpec};
    use crate::metrics::evaluate_case;
    use crate::transport::TransportProps;

    /// A zero gradient is a stalled signal, not a crash, and leaves the
    /// mesh untouched.
    #[test]
    fn zero_gradient_line_search_stalls() {
        let mesh =
            structured_channel_with_hole(2.0, 1.0, 12, 6, false, Some((5, 7, 2, 4))).unwrap();
        let s = CaseSetup {
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
        };
        let sol = evaluate_case(&mesh, &s).unwrap();
        let bundle = GradientBundle {
            gradient: ShapeGradient {
                raw: vec![0.0; mesh.vertex_count() * 2],
                smoothed: VertexDisplacement::zeros(&mesh),
            },
            adjoint: crate::adjoint::AdjointState {
                z: vec![0.0; mesh.vertex_count()],
                lambda: vec![0.0; mesh.vertex_count() * 3],
            },
            slope: 0.0,
        };
        let out =
            line_search_step(&mesh, &s, &sol, &bundle, 1.0, &OptimizerConfig::default()).unwrap();
        assert!(out.is_none());
    }
}
