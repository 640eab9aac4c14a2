//! Case configuration: flat `key = value` text with `#` comments and
//! dotted namespaces. Unknown keys are errors; every default is printable.

use crate::error::{Error, Result};
use crate::fem::newton::NewtonConfig;
use crate::fem::solver::{LinearMethod, LinearSolverConfig, Preconditioner};
use crate::flow::{FlowSolveConfig, FlowStabSwitches, FluidProps, InletProfile, InletSpec};
use crate::metrics::CaseSetup;
use crate::shape::{OptimizerConfig, RoleMap, TagRole};
use crate::transport::{TransportProps, TransportStab};

/// Full case configuration. The defaults are the reference operating
/// point: nitrogen-like gas, u_in = 0.933 m/s, c_in = 100, c_pack = 1.
#[derive(Debug, Clone)]
pub struct CaseConfig {
    pub fluid: FluidProps,
    pub transport: TransportProps,
    pub inlet: InletSpec,
    pub flow_stab: FlowStabSwitches,
    pub transport_stab: TransportStab,
    pub newton: NewtonConfig,
    pub linear: LinearSolverConfig,
    pub continuation: bool,
    pub optimizer: OptimizerConfig,
    pub roles: RoleMap,
    /// Write fields every k accepted iterations (0 disables).
    pub vtk_every: usize,
    pub seed: u64,
}

impl Default for CaseConfig {
    fn default() -> Self {
        CaseConfig {
            fluid: FluidProps {
                mu: 1.728e-5,
                rho: 1.138,
            },
            transport: TransportProps {
                diffusivity: 3.72e-6,
                c_in: 100.0,
                c_pack: 1.0,
            },
            inlet: InletSpec {
                mean_speed: 0.933,
                profile: InletProfile::Uniform,
            },
            flow_stab: FlowStabSwitches::default(),
            transport_stab: TransportStab::default(),
            newton: NewtonConfig::default(),
            linear: LinearSolverConfig::default(),
            continuation: true,
            optimizer: OptimizerConfig::default(),
            roles: RoleMap::default(),
            vtk_every: 10,
            seed: 42,
        }
    }
}

impl CaseConfig {
    /// Parses overrides from the flat text format and applies them on top
    /// of the defaults.
    pub fn parse(text: &str, path: &str) -> Result<CaseConfig> {
        let mut cfg = CaseConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<CaseConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        CaseConfig::parse(&text, &path.display().to_string())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let fval = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("`{value}` is not a number")))
        };
        let uval = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("`{value}` is not an integer")))
        };
        let bval = || -> Result<bool> {
            match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::InvalidConfig(format!("`{value}` is not a boolean"))),
            }
        };
        let role = || -> Result<TagRole> {
            match value {
                "fixed" => Ok(TagRole::Fixed),
                "sliding" => Ok(TagRole::Sliding),
                "free" => Ok(TagRole::Free),
                _ => Err(Error::InvalidConfig(format!(
                    "`{value}` is not a role (fixed | sliding | free)"
                ))),
            }
        };
        match key {
            "fluid.mu" => self.fluid.mu = fval()?,
            "fluid.rho" => self.fluid.rho = fval()?,
            "transport.d" => self.transport.diffusivity = fval()?,
            "transport.c_in" => self.transport.c_in = fval()?,
            "transport.c_pack" => self.transport.c_pack = fval()?,
            "inlet.u_in" => self.inlet.mean_speed = fval()?,
            "inlet.profile" => {
                self.inlet.profile = match value {
                    "uniform" => InletProfile::Uniform,
                    "parabolic" => InletProfile::Parabolic,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "`{value}` is not a profile (uniform | parabolic)"
                        )))
                    }
                }
            }
            "stab.supg" => self.flow_stab.supg = bval()?,
            "stab.pspg" => self.flow_stab.pspg = bval()?,
            "stab.grad_div" => self.flow_stab.grad_div = bval()?,
            "stab.transport_supg" => self.transport_stab.supg = bval()?,
            "stab.crosswind" => self.transport_stab.crosswind = bval()?,
            "stab.crosswind_c" => self.transport_stab.crosswind_c = fval()?,
            "solver.newton_rel_tol" => self.newton.rel_tol = fval()?,
            "solver.newton_max_iter" => self.newton.max_iter = uval()?,
            "solver.continuation" => self.continuation = bval()?,
            "solver.linear_method" => {
                self.linear.method = match value {
                    "direct" => LinearMethod::Direct,
                    "gmres" => LinearMethod::Gmres,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "`{value}` is not a method (direct | gmres)"
                        )))
                    }
                }
            }
            "solver.linear_rel_tol" => self.linear.rel_tol = fval()?,
            "solver.linear_max_iter" => self.linear.max_iter = uval()?,
            "solver.linear_restart" => self.linear.restart = uval()?,
            "solver.precond" => {
                self.linear.precond = match value {
                    "jacobi" => Preconditioner::Jacobi,
                    "ilu0" => Preconditioner::Ilu0,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "`{value}` is not a preconditioner (jacobi | ilu0)"
                        )))
                    }
                }
            }
            "optimizer.max_iterations" => self.optimizer.max_iterations = uval()?,
            "optimizer.initial_step" => self.optimizer.initial_step = fval()?,
            "optimizer.armijo_c" => self.optimizer.armijo_c = fval()?,
            "optimizer.step_shrink" => self.optimizer.step_shrink = fval()?,
            "optimizer.step_grow" => self.optimizer.step_grow = fval()?,
            "optimizer.quality_floor" => self.optimizer.quality_floor = fval()?,
            "optimizer.grad_tol" => self.optimizer.grad_tol = fval()?,
            "optimizer.max_halvings" => self.optimizer.max_halvings = uval()?,
            "optimizer.audit_every" => self.optimizer.audit_every = uval()?,
            "optimizer.trust_radius" => self.optimizer.trust_radius = fval()?,
            "roles.inlet" => self.roles.inlet = role()?,
            "roles.outlet" => self.roles.outlet = role()?,
            "roles.cyl_wall" => self.roles.cyl_wall = role()?,
            "roles.packing_jacket" => self.roles.packing_jacket = role()?,
            "roles.packing" => self.roles.packing = role()?,
            "jacket.normal" => {
                if value == "auto" {
                    self.roles.jacket_normal = None;
                    return Ok(());
                }
                let comps: std::result::Result<Vec<f64>, _> =
                    value.split(',').map(|v| v.trim().parse::<f64>()).collect();
                let comps = comps
                    .map_err(|_| Error::InvalidConfig(format!("`{value}` is not a vector")))?;
                if comps.len() < 2 || comps.len() > 3 {
                    return Err(Error::InvalidConfig(
                        "jacket.normal needs 2 or 3 comma-separated components".into(),
                    ));
                }
                if comps.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                    return Err(Error::InvalidConfig("jacket.normal must be nonzero".into()));
                }
                self.roles.jacket_normal = Some(comps);
            }
            "output.vtk_every" => self.vtk_every = uval()?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::InvalidConfig(format!("`{value}` is not a seed")))?;
                self.optimizer.seed = self.seed;
            }
            _ => {
                return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.fluid.validate()?;
        self.transport.validate()?;
        self.linear.validate()?;
        self.optimizer.validate()?;
        if !(self.newton.rel_tol > 0.0 && self.newton.rel_tol < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "newton rel_tol {} not in (0, 1)",
                self.newton.rel_tol
            )));
        }
        Ok(())
    }

    /// The forward-pipeline slice of the configuration.
    pub fn case_setup(&self) -> CaseSetup {
        CaseSetup {
            fluid: self.fluid,
            transport: self.transport,
            inlet: self.inlet,
            flow_cfg: FlowSolveConfig {
                newton: self.newton,
                linear: self.linear,
                switches: self.flow_stab,
                continuation: self.continuation,
            },
            transport_stab: self.transport_stab,
        }
    }

    /// All keys with their current values, in the file format.
    pub fn print(&self) -> String {
        let profile = match self.inlet.profile {
            InletProfile::Uniform => "uniform",
            InletProfile::Parabolic => "parabolic",
        };
        let method = match self.linear.method {
            LinearMethod::Direct => "direct",
            LinearMethod::Gmres => "gmres",
        };
        let precond = match self.linear.precond {
            Preconditioner::Jacobi => "jacobi",
            Preconditioner::Ilu0 => "ilu0",
        };
        let role = |r: TagRole| match r {
            TagRole::Fixed => "fixed",
            TagRole::Sliding => "sliding",
            TagRole::Free => "free",
        };
        let jacket = match &self.roles.jacket_normal {
            Some(n) => n
                .iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(","),
            None => "auto".to_string(),
        };
        format!(
            "fluid.mu = {}\nfluid.rho = {}\n\
             transport.d = {}\ntransport.c_in = {}\ntransport.c_pack = {}\n\
             inlet.u_in = {}\ninlet.profile = {profile}\n\
             stab.supg = {}\nstab.pspg = {}\nstab.grad_div = {}\n\
             stab.transport_supg = {}\nstab.crosswind = {}\nstab.crosswind_c = {}\n\
             solver.newton_rel_tol = {}\nsolver.newton_max_iter = {}\n\
             solver.continuation = {}\nsolver.linear_method = {method}\n\
             solver.linear_rel_tol = {}\nsolver.linear_max_iter = {}\n\
             solver.linear_restart = {}\nsolver.precond = {precond}\n\
             optimizer.max_iterations = {}\noptimizer.initial_step = {}\n\
             optimizer.armijo_c = {}\noptimizer.step_shrink = {}\n\
             optimizer.step_grow = {}\noptimizer.quality_floor = {}\n\
             optimizer.grad_tol = {}\noptimizer.max_halvings = {}\n\
             optimizer.audit_every = {}\noptimizer.trust_radius = {}\n\
             roles.inlet = {}\nroles.outlet = {}\nroles.cyl_wall = {}\n\
             roles.packing_jacket = {}\nroles.packing = {}\n\
             jacket.normal = {jacket}\noutput.vtk_every = {}\nseed = {}\n",
            self.fluid.mu,
            self.fluid.rho,
            self.transport.diffusivity,
            self.transport.c_in,
            self.transport.c_pack,
            self.inlet.mean_speed,
            self.flow_stab.supg,
            self.flow_stab.pspg,
            self.flow_stab.grad_div,
            self.transport_stab.supg,
            self.transport_stab.crosswind,
            self.transport_stab.crosswind_c,
            self.newton.rel_tol,
            self.newton.max_iter,
            self.continuation,
            self.linear.rel_tol,
            self.linear.max_iter,
            self.linear.restart,
            self.optimizer.max_iterations,
            self.optimizer.initial_step,
            self.optimizer.armijo_c,
            self.optimizer.step_shrink,
            self.optimizer.step_grow,
            self.optimizer.quality_floor,
            self.optimizer.grad_tol,
            self.optimizer.max_halvings,
            self.optimizer.audit_every,
            self.optimizer.trust_radius,
            role(self.roles.inlet),
            role(self.roles.outlet),
            role(self.roles.cyl_wall),
            role(self.roles.packing_jacket),
            role(self.roles.packing),
            self.vtk_every,
            self.seed,
        )
    }
}
