//! The reduced-space inverse problem: observation operators, objective and
//! gradient, Hessian-vector products, the Schur-complement Newton-CG loop
//! and L-curve regularization selection.

pub mod basis;
mod lcurve;
mod newton;

pub use basis::GaussianBasis;
pub use lcurve::{lcurve, write_lcurve_csv, LCurvePoint};
pub use newton::{
    build_preconditioner, newton_solve, schur_solve, HessianOp, InversionState, IterRecord,
    NewtonOptions, NewtonStatus, Preconditioner, SchurStep,
};

use crate::adjoint::AdjointSweep;
use crate::anatomy::{assemble_k_base, masked_tensor, DiffusionParams, TissueMap};
use crate::error::{Error, Result};
use crate::field::spectral::SpectralOps;
use crate::field::{Grid, ScalarField, TensorField, TimeGrid};
use crate::forward::{CgOptions, DiffusionCoeff, Stepper, Trajectory};

/// Diagonal projector onto voxels where the generating datum reached the
/// detection threshold. Masks are frozen from the data once and never depend
/// on the current iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    grid: Grid,
    mask: Vec<bool>,
    threshold: f64,
}

impl ObservationMask {
    /// Voxel is observed iff the datum is at or above the threshold.
    pub fn from_data(d: &ScalarField, c_d: f64) -> Self {
        Self {
            grid: d.grid().clone(),
            mask: d.values().iter().map(|&v| v >= c_d).collect(),
            threshold: c_d,
        }
    }

    /// All-true mask (full observation).
    pub fn full(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            mask: vec![true; grid.len()],
            threshold: 0.0,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Apply the projector: zero outside the mask. Idempotent; O^T O = O.
    pub fn apply(&self, c: &ScalarField) -> ScalarField {
        let vals = c
            .values()
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        ScalarField::from_values(&self.grid, vals).expect("mask grid matches")
    }
}

/// Apply an observation operator to a field.
pub fn observe(mask: &ObservationMask, c: &ScalarField) -> Result<ScalarField> {
    c.same_grid(&ScalarField::zeros(mask.grid()), "observe")?;
    Ok(mask.apply(c))
}

/// Everything fixed during one inversion: geometry, anatomy-derived
/// coefficients, data, masks, regularization and solver tolerances.
#[derive(Clone)]
pub struct InverseProblem {
    pub ops: SpectralOps,
    /// k_f-independent part of K (tissue rates plus penalty).
    pub k_base: TensorField,
    /// dK/dk_f: anisotropy tensor restricted to the brain.
    pub t_eff: TensorField,
    pub brain_mask: Vec<bool>,
    pub rho: f64,
    pub tg: TimeGrid,
    pub d0: ScalarField,
    pub d1: ScalarField,
    pub mask0: ObservationMask,
    pub mask1: ObservationMask,
    pub beta_p: f64,
    pub basis: GaussianBasis,
    /// Whether k_f is an inversion variable (otherwise fixed at kf_fixed).
    pub invert_kf: bool,
    pub kf_fixed: f64,
    pub cg_forward: CgOptions,
    pub cg_hessian: CgOptions,
    /// Brain-average of k_base (upper-triangle components): the constant
    /// part of the surrogate tensor.
    kbase_mean: Vec<f64>,
    /// Brain-average of t_eff: the surrogate's slope in k_f.
    teff_mean: Vec<f64>,
}

impl InverseProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tissue: &TissueMap,
        tensor: &TensorField,
        params: &DiffusionParams,
        rho: f64,
        tg: TimeGrid,
        d0: ScalarField,
        d1: ScalarField,
        mask0: ObservationMask,
        mask1: ObservationMask,
        beta_p: f64,
        basis: GaussianBasis,
        invert_kf: bool,
    ) -> Result<Self> {
        if !(beta_p > 0.0) {
            return Err(Error::InvalidParam(format!("beta_p = {beta_p} must be > 0")));
        }
        for (name, d) in [("d0", &d0), ("d1", &d1)] {
            d.check_finite("inverse problem data")?;
            let (lo, hi) = d.min_max();
            if lo < -1e-9 || hi > 1.0 + 1e-6 {
                return Err(Error::InvalidParam(format!(
                    "{name} values outside [0, 1]: range [{lo}, {hi}]"
                )));
            }
        }
        let grid = tissue.grid().clone();
        d0.same_grid(&ScalarField::zeros(&grid), "inverse problem d0")?;
        d1.same_grid(&ScalarField::zeros(&grid), "inverse problem d1")?;
        let k_base = assemble_k_base(tissue, params)?;
        let t_eff = masked_tensor(tensor, tissue)?;
        let brain_mask = tissue.brain_mask();
        let kbase_mean = k_base.mean_components(Some(&brain_mask));
        let teff_mean = t_eff.mean_components(Some(&brain_mask));
        Ok(Self {
            ops: SpectralOps::new(&grid),
            k_base,
            t_eff,
            brain_mask,
            rho,
            tg,
            d0,
            d1,
            mask0,
            mask1,
            beta_p,
            basis,
            invert_kf,
            kf_fixed: params.k_f,
            cg_forward: CgOptions {
                tol: 1e-10,
                max_iters: 500,
            },
            // tight enough that matvec noise stays below the 1e-7 symmetry bar
            cg_hessian: CgOptions {
                tol: 1e-9,
                max_iters: 500,
            },
            kbase_mean,
            teff_mean,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.ops.grid()
    }

    pub fn n_p(&self) -> usize {
        self.basis.len()
    }

    /// Full diffusion coefficient at a given anisotropy scale.
    pub fn k_at(&self, kf: f64) -> TensorField {
        let mut k = self.k_base.clone();
        if kf != 0.0 {
            k.axpy(kf, &self.t_eff);
        }
        k
    }

    /// Constant-tensor surrogate of the diffusion coefficient: the
    /// brain-average of K at the given anisotropy scale.
    pub fn kbar_tensor_at(&self, kf: f64) -> Vec<f64> {
        self.kbase_mean
            .iter()
            .zip(&self.teff_mean)
            .map(|(b, t)| b + kf * t)
            .collect()
    }

    /// Integrator at the given anisotropy scale. `surrogate` replaces the
    /// variable coefficient by its brain-average tensor (all solves become
    /// exact spectral multiplies); the anisotropy channel then uses the
    /// averaged sensitivity so the surrogate objective stays exactly
    /// differentiable.
    pub fn stepper(&self, kf: f64, surrogate: bool, cg: CgOptions) -> Stepper<'_> {
        let (diff, source) = if surrogate {
            let src = if self.invert_kf {
                DiffusionCoeff::ConstTensor(self.teff_mean.clone())
            } else {
                DiffusionCoeff::Zero
            };
            (DiffusionCoeff::ConstTensor(self.kbar_tensor_at(kf)), src)
        } else {
            let src = if self.invert_kf {
                DiffusionCoeff::Tensor(self.t_eff.clone())
            } else {
                DiffusionCoeff::Zero
            };
            (DiffusionCoeff::Tensor(self.k_at(kf)), src)
        };
        Stepper::new(&self.ops, diff, source, self.rho, self.tg, cg)
    }

    /// Initial condition from coefficients.
    pub fn c0_from(&self, p: &[f64]) -> Result<ScalarField> {
        self.basis.apply(p)
    }

    /// Data-misfit residual at t = 0 for given coefficients (already masked).
    fn residual0(&self, c0: &ScalarField) -> ScalarField {
        self.mask0.apply(c0).sub(&self.d0)
    }

    /// Data-misfit residual at t = 1 for a terminal state (already masked).
    fn residual1(&self, c1: &ScalarField) -> ScalarField {
        self.mask1.apply(c1).sub(&self.d1)
    }

    /// Objective value and the forward trajectory it was computed from.
    pub fn objective_with_traj(&self, stepper: &Stepper, p: &[f64], _kf: f64) -> Result<(f64, Trajectory)> {
        let c0 = self.c0_from(p)?;
        let traj = stepper.forward_solve(&c0)?;
        let r0 = self.residual0(&c0);
        let r1 = self.residual1(traj.terminal());
        let pnorm2: f64 = p.iter().map(|v| v * v).sum();
        let j = 0.5 * r0.dot_h(&r0) + 0.5 * r1.dot_h(&r1) + 0.5 * self.beta_p * pnorm2;
        Ok((j, traj))
    }

    /// Misfit norms (t0, t1) for reporting.
    pub fn misfit_norms(&self, p: &[f64], traj: &Trajectory) -> Result<(f64, f64)> {
        let c0 = self.c0_from(p)?;
        Ok((
            self.residual0(&c0).norm_h(),
            self.residual1(traj.terminal()).norm_h(),
        ))
    }

    /// Gradient of the objective, with the forward trajectory and backward
    /// sweep it was assembled from (reused by the Hessian matvecs).
    pub fn gradient_with_parts(
        &self,
        stepper: &Stepper,
        p: &[f64],
    ) -> Result<(Vec<f64>, f64, f64, Trajectory, AdjointSweep)> {
        let c0 = self.c0_from(p)?;
        let traj = stepper.forward_solve(&c0)?;
        let r0 = self.residual0(&c0);
        let r1 = self.residual1(traj.terminal());
        let pnorm2: f64 = p.iter().map(|v| v * v).sum();
        let j = 0.5 * r0.dot_h(&r0) + 0.5 * r1.dot_h(&r1) + 0.5 * self.beta_p * pnorm2;
        // transpose sweep from the masked terminal residual
        let terminal = self.mask1.apply(&r1);
        let sweep = stepper.transpose_sweep(&traj, &terminal)?;
        let mut g_p = self.basis.apply_transpose(&self.mask0.apply(&r0))?;
        let lam0_t = self.basis.apply_transpose(&sweep.lambda[0])?;
        for ((g, l), pj) in g_p.iter_mut().zip(&lam0_t).zip(p) {
            *g += l + self.beta_p * pj;
        }
        let g_k = if self.invert_kf { sweep.gk } else { 0.0 };
        Ok((g_p, g_k, j, traj, sweep))
    }

    /// Combined gradient norm over (p, k_f).
    pub fn grad_norm(&self, g_p: &[f64], g_k: f64) -> f64 {
        let mut s: f64 = g_p.iter().map(|v| v * v).sum();
        if self.invert_kf {
            s += g_k * g_k;
        }
        s.sqrt()
    }
}

/// Objective value at given coefficients and anisotropy scale.
pub fn objective(problem: &InverseProblem, p: &[f64], kf: f64) -> Result<f64> {
    let stepper = problem.stepper(kf, false, problem.cg_forward);
    Ok(problem.objective_with_traj(&stepper, p, kf)?.0)
}

/// Gradient (g_p, g_k) at given coefficients and anisotropy scale.
pub fn gradient(problem: &InverseProblem, p: &[f64], kf: f64) -> Result<(Vec<f64>, f64)> {
    let stepper = problem.stepper(kf, false, problem.cg_forward);
    let (g_p, g_k, _, _, _) = problem.gradient_with_parts(&stepper, p)?;
    Ok((g_p, g_k))
}
