//! Backward-in-time sweeps: the first-order adjoint and the incremental
//! (second-order) adjoint, realized as exact transposes and exact
//! derivatives of the discrete forward sub-steps.
//!
//! The CN diffusion half-step is self-adjoint and the reaction tangent is
//! diagonal, so one backward step applies the same half-step solves with a
//! voxelwise multiplication in between. While sweeping, the sensitivity of
//! the objective to the anisotropy scale accumulates from the per-half-step
//! solves; that quadrature is the exact transpose of the tangent source
//! injection, which is what makes the finite-difference gradient checks pass
//! at tight tolerances.
//!
//! Sign convention: internal sweeps propagate the plain transpose variable
//! (terminal value `O1^T (O1 c1 - d1)` for the gradient); the public adjoint
//! trajectory negates it to match the usual optimality-system form where the
//! terminal condition reads `alpha_1 = -O1^T (O1 c1 - d1)`.

use crate::error::Result;
use crate::field::{ScalarField, TimeGrid};
use crate::forward::{Stepper, Trajectory};
use crate::inversion::ObservationMask;

/// Dual states at step boundaries, same shape as the forward trajectory.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub tg: TimeGrid,
    /// Adjoint at step boundaries; length n_steps + 1.
    pub steps: Vec<ScalarField>,
}

impl AdjointTrajectory {
    pub fn initial(&self) -> &ScalarField {
        &self.steps[0]
    }

    pub fn terminal(&self) -> &ScalarField {
        self.steps.last().expect("adjoint trajectory is nonempty")
    }
}

/// One backward transpose sweep: the transpose variable at step boundaries,
/// the two implicit solves of every step (reused by the incremental sweep),
/// and the accumulated anisotropy sensitivity.
#[derive(Debug, Clone)]
pub struct AdjointSweep {
    /// Transpose variable at step boundaries; length n_steps + 1.
    pub(crate) lambda: Vec<ScalarField>,
    /// Solve of the second half-step of each step (processed first backward).
    pub(crate) z2: Vec<ScalarField>,
    /// Solve of the first half-step of each step.
    pub(crate) z1: Vec<ScalarField>,
    /// Accumulated d(objective)/d(k_f) contribution of the swept misfit.
    pub(crate) gk: f64,
}

impl AdjointSweep {
    /// Transpose variable at t = 0.
    pub fn initial(&self) -> &ScalarField {
        &self.lambda[0]
    }

    /// Transpose variable at a step boundary.
    pub fn at_step(&self, n: usize) -> &ScalarField {
        &self.lambda[n]
    }

    /// Accumulated anisotropy sensitivity of the swept functional.
    pub fn gk(&self) -> f64 {
        self.gk
    }
}

/// Whether Hessian sweeps keep the reaction-curvature coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Second variation kept in full.
    Full,
    /// Reaction-curvature term dropped; the initial-condition block becomes
    /// a positive semi-definite Gram operator.
    GaussNewton,
}

impl<'a> Stepper<'a> {
    /// Backward transpose sweep from an arbitrary terminal value, with the
    /// anisotropy sensitivity accumulated along the way.
    pub fn transpose_sweep(
        &self,
        base: &Trajectory,
        terminal: &ScalarField,
    ) -> Result<AdjointSweep> {
        terminal.same_grid(&base.steps[0], "transpose_sweep")?;
        let n = self.tg.n_steps();
        let g = self.gamma();
        let mut lambda = vec![ScalarField::zeros(terminal.grid()); n + 1];
        let mut z1 = Vec::with_capacity(n);
        let mut z2 = Vec::with_capacity(n);
        let mut gk = 0.0;
        lambda[n] = terminal.clone();
        let mut cur = terminal.clone();
        for step in (0..n).rev() {
            let u = &base.steps[step];
            let v = &base.half[step];
            let w = self.reaction(v);
            let unext = &base.steps[step + 1];
            // transpose of the second half-step
            let (z2n, _) = self.solve_implicit(&cur)?;
            if self.has_source() {
                gk += g * self.apply_source(&w.add(unext)).dot_h(&z2n);
            }
            cur = self.apply_explicit(&z2n);
            // transpose of the (diagonal) reaction tangent
            cur = self.reaction_tangent_at(v).hadamard(&cur);
            // transpose of the first half-step
            let (z1n, _) = self.solve_implicit(&cur)?;
            if self.has_source() {
                gk += g * self.apply_source(&u.add(v)).dot_h(&z1n);
            }
            cur = self.apply_explicit(&z1n);
            lambda[step] = cur.clone();
            z2.push(z2n);
            z1.push(z1n);
        }
        z1.reverse();
        z2.reverse();
        Ok(AdjointSweep { lambda, z2, z1, gk })
    }

    /// Exact derivative of `transpose_sweep` along a tangent trajectory and
    /// an anisotropy perturbation, with the terminal derivative supplied by
    /// the caller. Returns the derivative of the transpose variable at t = 0
    /// and the derivative of the accumulated anisotropy sensitivity.
    ///
    /// The base sweep internals are only needed for the anisotropy channel;
    /// callers without a source tensor may pass None.
    pub fn incremental_sweep(
        &self,
        base: &Trajectory,
        sweep: Option<&AdjointSweep>,
        tangent: &Trajectory,
        dkf: f64,
        dterminal: &ScalarField,
        mode: HessianMode,
    ) -> Result<(ScalarField, f64)> {
        let n = self.tg.n_steps();
        let g = self.gamma();
        let mut dcur = dterminal.clone();
        let mut dgk = 0.0;
        let with_source = self.has_source();
        if with_source && sweep.is_none() {
            return Err(crate::error::Error::InvalidParam(
                "incremental_sweep needs the base sweep when a source tensor is present".into(),
            ));
        }
        for step in (0..n).rev() {
            let u = &base.steps[step];
            let v = &base.half[step];
            let w = self.reaction(v);
            let unext = &base.steps[step + 1];
            let du = &tangent.steps[step];
            let dv = &tangent.half[step];
            let dunext = &tangent.steps[step + 1];
            let rt = self.reaction_tangent_at(v);

            // derivative of z2 = A^{-1} lambda: dz2 = A^{-1}(dlambda + g dkf T z2)
            let mut rhs = dcur;
            if dkf != 0.0 && with_source {
                let z2 = &sweep.unwrap().z2[step];
                rhs.axpy(g * dkf, &self.apply_source(z2));
            }
            let (dz2, _) = self.solve_implicit(&rhs)?;
            if with_source {
                let z2 = &sweep.unwrap().z2[step];
                let dw = rt.hadamard(dv);
                dgk += g * self.apply_source(&dw.add(dunext)).dot_h(z2);
                dgk += g * self.apply_source(&w.add(unext)).dot_h(&dz2);
            }
            // derivative of lambda = B z2
            let mut dl = self.apply_explicit(&dz2);
            if dkf != 0.0 && with_source {
                let z2 = &sweep.unwrap().z2[step];
                dl.axpy(g * dkf, &self.apply_source(z2));
            }
            // derivative of the reaction transpose
            dcur = rt.hadamard(&dl);
            if mode == HessianMode::Full {
                let lam_mid = match sweep {
                    Some(s) => self.apply_explicit(&s.z2[step]),
                    None => {
                        return Err(crate::error::Error::InvalidParam(
                            "full Hessian mode needs the base sweep".into(),
                        ))
                    }
                };
                let curv = self.reaction_curvature_at(v);
                dcur.axpy(1.0, &curv.hadamard(dv).hadamard(&lam_mid));
            }
            // derivative of z1 = A^{-1} lambda
            let mut rhs1 = dcur;
            if dkf != 0.0 && with_source {
                let z1 = &sweep.unwrap().z1[step];
                rhs1.axpy(g * dkf, &self.apply_source(z1));
            }
            let (dz1, _) = self.solve_implicit(&rhs1)?;
            if with_source {
                let z1 = &sweep.unwrap().z1[step];
                dgk += g * self.apply_source(&du.add(dv)).dot_h(z1);
                dgk += g * self.apply_source(&u.add(v)).dot_h(&dz1);
            }
            let mut dl1 = self.apply_explicit(&dz1);
            if dkf != 0.0 && with_source {
                let z1 = &sweep.unwrap().z1[step];
                dl1.axpy(g * dkf, &self.apply_source(z1));
            }
            dcur = dl1;
        }
        Ok((dcur, dgk))
    }
}

/// Solve the first-order adjoint equation backward from the terminal misfit.
///
/// The terminal condition is `alpha_1 = -O1^T (O1 c1 - d1)`; each backward
/// step is the transpose of the corresponding forward step's linearization.
pub fn adjoint_solve(
    stepper: &Stepper,
    c_traj: &Trajectory,
    d1: &ScalarField,
    mask1: &ObservationMask,
) -> Result<AdjointTrajectory> {
    d1.same_grid(c_traj.terminal(), "adjoint_solve data")?;
    let residual = mask1.apply(c_traj.terminal()).sub(d1);
    let terminal = mask1.apply(&residual);
    let sweep = stepper.transpose_sweep(c_traj, &terminal)?;
    Ok(AdjointTrajectory {
        tg: c_traj.tg,
        steps: sweep.lambda.iter().map(|l| l.map(|v| -v)).collect(),
    })
}

/// Solve the incremental adjoint backward from `alpha~_1 = -O^T O c~_1` for
/// a given tangent trajectory, returning the incremental adjoint at t = 0
/// (in the negated, optimality-system convention).
pub fn incremental_adjoint(
    stepper: &Stepper,
    c_traj: &Trajectory,
    a_sweep_terminal_data: (&ScalarField, &ObservationMask),
    ctilde: &Trajectory,
    dkf: f64,
    mode: HessianMode,
) -> Result<ScalarField> {
    let (d1, mask1) = a_sweep_terminal_data;
    let residual = mask1.apply(c_traj.terminal()).sub(d1);
    let terminal = mask1.apply(&residual);
    let sweep = stepper.transpose_sweep(c_traj, &terminal)?;
    let dterminal = mask1.apply(ctilde.terminal());
    let (dlambda0, _) =
        stepper.incremental_sweep(c_traj, Some(&sweep), ctilde, dkf, &dterminal, mode)?;
    Ok(dlambda0.map(|v| -v))
}
