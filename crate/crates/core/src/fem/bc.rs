//! Dirichlet boundary conditions: nodal constraint extraction and
//! row-replacement application with optional column symmetrization.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::space::FunctionSpace;
use crate::fem::sparse::CsrMatrix;
use crate::mesh::{BoundaryTag, Mesh};

/// Spatially varying boundary value.
pub type SpatialFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Prescribed value: a constant or a function of the vertex position.
#[derive(Clone)]
pub enum BcValue {
    Constant(f64),
    Spatial(SpatialFn),
}

impl std::fmt::Debug for BcValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BcValue::Constant(v) => write!(f, "Constant({v})"),
            BcValue::Spatial(_) => write!(f, "Spatial(..)"),
        }
    }
}

impl BcValue {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BcValue::Constant(v) => *v,
            BcValue::Spatial(func) => func(x),
        }
    }
}

/// One Dirichlet condition: which tags, which components of the space, and
/// the prescribed value.
#[derive(Debug, Clone)]
pub struct DirichletBC {
    pub tags: Vec<BoundaryTag>,
    pub components: Vec<usize>,
    pub value: BcValue,
}

impl DirichletBC {
    pub fn constant(tags: &[BoundaryTag], components: &[usize], value: f64) -> Self {
        DirichletBC {
            tags: tags.to_vec(),
            components: components.to_vec(),
            value: BcValue::Constant(value),
        }
    }

    pub fn spatial(
        tags: &[BoundaryTag],
        components: &[usize],
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        DirichletBC {
            tags: tags.to_vec(),
            components: components.to_vec(),
            value: BcValue::Spatial(Arc::new(f)),
        }
    }
}

/// Expands a BC list into (dof, value) pairs, sorted by dof. Conditions
/// later in the list override earlier ones on shared vertices (walls are
/// listed after the inlet so no-slip wins at corners). Errors if a listed
/// tag matches no facet of the mesh.
pub fn constrained_dofs(
    mesh: &Mesh,
    space: &FunctionSpace,
    bcs: &[DirichletBC],
) -> Result<Vec<(usize, f64)>> {
    let mut values: Vec<Option<f64>> = vec![None; space.ndof()];
    for bc in bcs {
        for &tag in &bc.tags {
            if !mesh.has_tag(tag) {
                return Err(Error::EmptyTag(tag));
            }
        }
        for v in mesh.vertices_on_tags(&bc.tags) {
            let x = mesh.vertex(v);
            let val = bc.value.eval(x);
            for &comp in &bc.components {
                values[space.dof(v, comp)] = Some(val);
            }
        }
    }
    Ok(values
        .iter()
        .enumerate()
        .filter_map(|(dof, v)| v.map(|val| (dof, val)))
        .collect())
}

/// Replaces constrained rows by identity rows with the prescribed values in
/// `b`. With `eliminate_columns`, the constrained columns are folded into
/// the right-hand side and zeroed, so symmetric matrices stay symmetric.
/// Every constrained row must have a structural diagonal entry.
pub fn apply_dirichlet(
    a: &mut CsrMatrix,
    b: &mut [f64],
    constraints: &[(usize, f64)],
    eliminate_columns: bool,
) -> Result<()> {
    let n = a.nrows();
    let mut value: Vec<Option<f64>> = vec![None; n];
    for &(dof, v) in constraints {
        if dof >= n {
            return Err(Error::IndexOutOfRange { index: dof, len: n });
        }
        value[dof] = Some(v);
    }
    if eliminate_columns {
        for i in 0..n {
            if value[i].is_some() {
                continue;
            }
            let (cols, vals) = a.row_mut(i);
            for (k, &j) in cols.iter().enumerate() {
                if let Some(vj) = value[j] {
                    b[i] -= vals[k] * vj;
                    vals[k] = 0.0;
                }
            }
        }
    }
    for &(dof, v) in constraints {
        let (cols, vals) = a.row_mut(dof);
        let mut has_diag = false;
        for (k, &j) in cols.iter().enumerate() {
            if j == dof {
                vals[k] = 1.0;
                has_diag = true;
            } else {
                vals[k] = 0.0;
            }
        }
        if !has_diag {
            return Err(Error::InvalidConfig(format!(
                "row {dof} has no structural diagonal for Dirichlet replacement"
            )));
        }
        b[dof] = v;
    }
    Ok(())
}
