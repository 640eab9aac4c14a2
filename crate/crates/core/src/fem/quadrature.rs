//! Fixed quadrature rules on reference simplices and facets.
//!
//! One cell rule per dimension (degree 4 on triangles, degree 5 on
//! tetrahedra) is used for every volume integral in the crate, so that
//! residuals, Jacobians and geometric derivatives all see the same
//! discrete integrals. Facet rules are exact for quadratic integrands.

/// A quadrature point given by barycentric coordinates (length dim + 1)
/// and a weight; weights sum to 1 and are scaled by the cell measure.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub bary: [f64; 4],
    pub weight: f64,
}

/// Degree-4 six-point rule on the triangle (Dunavant).
const TRI_A1: f64 = 0.445948490915965;
const TRI_W1: f64 = 0.223381589678011;
const TRI_A2: f64 = 0.091576213509771;
const TRI_W2: f64 = 0.109951743655322;

pub const TRI_RULE: [QuadPoint; 6] = [
    QuadPoint {
        bary: [1.0 - 2.0 * TRI_A1, TRI_A1, TRI_A1, 0.0],
        weight: TRI_W1,
    },
    QuadPoint {
        bary: [TRI_A1, 1.0 - 2.0 * TRI_A1, TRI_A1, 0.0],
        weight: TRI_W1,
    },
    QuadPoint {
        bary: [TRI_A1, TRI_A1, 1.0 - 2.0 * TRI_A1, 0.0],
        weight: TRI_W1,
    },
    QuadPoint {
        bary: [1.0 - 2.0 * TRI_A2, TRI_A2, TRI_A2, 0.0],
        weight: TRI_W2,
    },
    QuadPoint {
        bary: [TRI_A2, 1.0 - 2.0 * TRI_A2, TRI_A2, 0.0],
        weight: TRI_W2,
    },
    QuadPoint {
        bary: [TRI_A2, TRI_A2, 1.0 - 2.0 * TRI_A2, 0.0],
        weight: TRI_W2,
    },
];

/// Degree-5 fourteen-point rule on the tetrahedron (Keast), all weights positive.
const TET_G1: f64 = 0.092735250310891226402323913737030605245203;
const TET_W1: f64 = 0.073493043116361949544710807856179551125790;
const TET_G2: f64 = 0.310885919263300609797345733763457842445557;
const TET_W2: f64 = 0.112687925718015267169145983697831517954164;
const TET_G3: f64 = 0.045503704125649649492974424085344511164485;
const TET_W3: f64 = 0.042546020777081466438608790101810436138749;

pub const TET_RULE: [QuadPoint; 14] = [
    QuadPoint {
        bary: [1.0 - 3.0 * TET_G1, TET_G1, TET_G1, TET_G1],
        weight: TET_W1,
    },
    QuadPoint {
        bary: [TET_G1, 1.0 - 3.0 * TET_G1, TET_G1, TET_G1],
        weight: TET_W1,
    },
    QuadPoint {
        bary: [TET_G1, TET_G1, 1.0 - 3.0 * TET_G1, TET_G1],
        weight: TET_W1,
    },
    QuadPoint {
        bary: [TET_G1, TET_G1, TET_G1, 1.0 - 3.0 * TET_G1],
        weight: TET_W1,
    },
    QuadPoint {
        bary: [1.0 - 3.0 * TET_G2, TET_G2, TET_G2, TET_G2],
        weight: TET_W2,
    },
    QuadPoint {
        bary: [TET_G2, 1.0 - 3.0 * TET_G2, TET_G2, TET_G2],
        weight: TET_W2,
    },
    QuadPoint {
        bary: [TET_G2, TET_G2, 1.0 - 3.0 * TET_G2, TET_G2],
        weight: TET_W2,
    },
    QuadPoint {
        bary: [TET_G2, TET_G2, TET_G2, 1.0 - 3.0 * TET_G2],
        weight: TET_W2,
    },
    QuadPoint {
        bary: [TET_G3, TET_G3, 0.5 - TET_G3, 0.5 - TET_G3],
        weight: TET_W3,
    },
    QuadPoint {
        bary: [TET_G3, 0.5 - TET_G3, TET_G3, 0.5 - TET_G3],
        weight: TET_W3,
    },
    QuadPoint {
        bary: [TET_G3, 0.5 - TET_G3, 0.5 - TET_G3, TET_G3],
        weight: TET_W3,
    },
    QuadPoint {
        bary: [0.5 - TET_G3, TET_G3, TET_G3, 0.5 - TET_G3],
        weight: TET_W3,
    },
    QuadPoint {
        bary: [0.5 - TET_G3, TET_G3, 0.5 - TET_G3, TET_G3],
        weight: TET_W3,
    },
    QuadPoint {
        bary: [0.5 - TET_G3, 0.5 - TET_G3, TET_G3, TET_G3],
        weight: TET_W3,
    },
];

pub fn cell_rule(dim: usize) -> &'static [QuadPoint] {
    match dim {
        2 => &TRI_RULE,
        3 => &TET_RULE,
        _ => unreachable!("unsupported dimension"),
    }
}

/// Two-point Gauss rule on an edge (2D facets), exact to degree 3.
const EDGE_G: f64 = 0.28867513459481287; // 1/(2 sqrt(3))
pub const EDGE_RULE: [QuadPoint; 2] = [
    QuadPoint {
        bary: [0.5 + EDGE_G, 0.5 - EDGE_G, 0.0, 0.0],
        weight: 0.5,
    },
    QuadPoint {
        bary: [0.5 - EDGE_G, 0.5 + EDGE_G, 0.0, 0.0],
        weight: 0.5,
    },
];

/// Three-point rule on a triangle facet (3D), exact to degree 2.
const FTRI_W: f64 = 1.0 / 3.0;
pub const FACET_TRI_RULE: [QuadPoint; 3] = [
    QuadPoint {
        bary: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 0.0],
        weight: FTRI_W,
    },
    QuadPoint {
        bary: [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0, 0.0],
        weight: FTRI_W,
    },
    QuadPoint {
        bary: [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0, 0.0],
        weight: FTRI_W,
    },
];

/// Facet rule for codimension-1 entities of a `dim`-dimensional mesh.
pub fn facet_rule(dim: usize) -> &'static [QuadPoint] {
    match dim {
        2 => &EDGE_RULE,
        3 => &FACET_TRI_RULE,
        _ => unreachable!("unsupported dimension"),
    }
}
