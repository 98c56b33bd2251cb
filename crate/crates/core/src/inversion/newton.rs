//! Reduced-space Newton-CG: Hessian-vector products assembled from one
//! tangent solve and one incremental backward sweep, a Schur-complement CG
//! solve for the coupled (p, k_f) step, a dense analytic preconditioner, a
//! surrogate warm-start phase and an Armijo line search.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::adjoint::{AdjointSweep, HessianMode};
use crate::error::Result;
use crate::forward::{Stepper, Trajectory};
use crate::inversion::InverseProblem;

/// Matrix-free reduced Hessian at a fixed linearization point.
///
/// One combined application costs a single tangent solve plus a single
/// incremental sweep and yields both the p-block and the k-row outputs.
pub struct HessianOp<'a> {
    problem: &'a InverseProblem,
    stepper: &'a Stepper<'a>,
    base: &'a Trajectory,
    sweep: &'a AdjointSweep,
    mode: HessianMode,
}

impl<'a> HessianOp<'a> {
    pub fn new(
        problem: &'a InverseProblem,
        stepper: &'a Stepper<'a>,
        base: &'a Trajectory,
        sweep: &'a AdjointSweep,
        mode: HessianMode,
    ) -> Self {
        Self {
            problem,
            stepper,
            base,
            sweep,
            mode,
        }
    }

    /// Apply the full reduced Hessian to (p~, k~); returns (H_p, H_k).
    pub fn matvec(&self, pt: &[f64], kt: f64) -> Result<(Vec<f64>, f64)> {
        let pr = self.problem;
        let dc0 = pr.basis.apply(pt)?;
        let kt = if pr.invert_kf { kt } else { 0.0 };
        let tan = self.stepper.tangent_solve(self.base, &dc0, kt)?;
        let dterm = pr.mask1.apply(tan.terminal());
        let (dl0, dgk) = self.stepper.incremental_sweep(
            self.base,
            Some(self.sweep),
            &tan,
            kt,
            &dterm,
            self.mode,
        )?;
        let mut hp = pr.basis.apply_transpose(&pr.mask0.apply(&dc0))?;
        let lt = pr.basis.apply_transpose(&dl0)?;
        for ((h, l), ptj) in hp.iter_mut().zip(&lt).zip(pt) {
            *h += l + pr.beta_p * ptj;
        }
        let hk = if pr.invert_kf { dgk } else { 0.0 };
        Ok((hp, hk))
    }

    pub fn matvec_pp(&self, pt: &[f64]) -> Result<Vec<f64>> {
        Ok(self.matvec(pt, 0.0)?.0)
    }

    pub fn matvec_pk(&self, kt: f64) -> Result<Vec<f64>> {
        Ok(self.matvec(&vec![0.0; self.problem.n_p()], kt)?.0)
    }

    pub fn matvec_kp(&self, pt: &[f64]) -> Result<f64> {
        Ok(self.matvec(pt, 0.0)?.1)
    }

    pub fn matvec_kk(&self, kt: f64) -> Result<f64> {
        Ok(self.matvec(&vec![0.0; self.problem.n_p()], kt)?.1)
    }
}

/// Dense factorized approximation of the p-block Hessian, built from the
/// constant-coefficient surrogate (exact spectral diffusion, the true
/// trajectory's reaction tangents, the same basis/observation/Tikhonov
/// terms). Falls back to the identity when the factorization fails.
pub struct Preconditioner {
    chol: Option<Cholesky<f64, Dyn>>,
}

impl Preconditioner {
    pub fn identity() -> Self {
        Self { chol: None }
    }

    pub fn is_identity(&self) -> bool {
        self.chol.is_none()
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        match &self.chol {
            None => r.to_vec(),
            Some(c) => {
                let x = c.solve(&DVector::from_column_slice(r));
                x.as_slice().to_vec()
            }
        }
    }
}

/// Assemble the surrogate p-block Hessian densely (one column per basis
/// function) and factorize it.
pub fn build_preconditioner(
    problem: &InverseProblem,
    kf: f64,
    base: &Trajectory,
) -> Result<Preconditioner> {
    use crate::forward::DiffusionCoeff;
    let np = problem.n_p();
    let surro = Stepper::new(
        &problem.ops,
        DiffusionCoeff::ConstTensor(problem.kbar_tensor_at(kf)),
        DiffusionCoeff::Zero,
        problem.rho,
        problem.tg,
        problem.cg_hessian,
    );
    let mut m = DMatrix::<f64>::zeros(np, np);
    for j in 0..np {
        let mut e = vec![0.0; np];
        e[j] = 1.0;
        let dc0 = problem.basis.apply(&e)?;
        let tan = surro.tangent_solve(base, &dc0, 0.0)?;
        let dterm = problem.mask1.apply(tan.terminal());
        let (dl0, _) =
            surro.incremental_sweep(base, None, &tan, 0.0, &dterm, HessianMode::GaussNewton)?;
        let mut col = problem.basis.apply_transpose(&problem.mask0.apply(&dc0))?;
        let lt = problem.basis.apply_transpose(&dl0)?;
        for ((c, l), ej) in col.iter_mut().zip(&lt).zip(&e) {
            *c += l + problem.beta_p * ej;
        }
        for (i, v) in col.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    // enforce exact symmetry before factorizing
    let mt = m.transpose();
    let sym = (m + mt) * 0.5;
    match Cholesky::new(sym) {
        Some(chol) => Ok(Preconditioner { chol: Some(chol) }),
        None => {
            log::warn!("surrogate Hessian not positive definite; preconditioner disabled");
            Ok(Preconditioner::identity())
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Newton step produced by the reduced solve.
pub struct SchurStep {
    pub pt: Vec<f64>,
    pub kt: f64,
    pub cg_iters: usize,
}

/// Solve the reduced Newton system for the step (p~, k~).
///
/// With k_f inverted, CG runs on the Schur complement of the p-block; the
/// k-row response of the accepted search direction accumulates alongside so
/// the scalar back-substitution needs no extra solves. Nonpositive curvature
/// truncates CG at the best available step (first-iteration truncation
/// returns the preconditioned steepest-descent direction).
pub fn schur_solve(
    problem: &InverseProblem,
    hess: &HessianOp,
    precond: &Preconditioner,
    g_p: &[f64],
    g_k: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SchurStep> {
    let np = problem.n_p();
    let (h_pk, h_kk) = if problem.invert_kf {
        hess.matvec(&vec![0.0; np], 1.0)?
    } else {
        (vec![0.0; np], 1.0)
    };
    let coupled = problem.invert_kf && h_kk.abs() >= 1e-14;
    if problem.invert_kf && !coupled {
        log::warn!("|H_kk| = {:.3e} below cutoff; freezing k_f this step", h_kk.abs());
    }

    // rhs = H_pk H_kk^{-1} g_k - g_p (reduces to -g_p when k_f is frozen)
    let mut rhs: Vec<f64> = g_p.iter().map(|v| -v).collect();
    if coupled {
        axpy(&mut rhs, g_k / h_kk, &h_pk);
    }
    let bnorm = norm(&rhs);
    if bnorm == 0.0 {
        return Ok(SchurStep {
            pt: vec![0.0; np],
            kt: if coupled { -g_k / h_kk } else { 0.0 },
            cg_iters: 0,
        });
    }

    // Schur operator application; also reports H_kp p for accumulation
    let apply = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
        let (mut hp, hk) = hess.matvec(x, 0.0)?;
        if coupled {
            axpy(&mut hp, -hk / h_kk, &h_pk);
        }
        Ok((hp, hk))
    };

    let mut x = vec![0.0; np];
    let mut kp_acc = 0.0; // H_kp x, accumulated
    let mut r = rhs.clone();
    let mut z = precond.apply(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iters = 0;
    for iter in 1..=max_iters {
        let (ap, hk_p) = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            log::warn!("nonpositive curvature in Schur CG at iteration {iter}; truncating");
            if iter == 1 {
                x = z.clone();
                let (_, hk_z) = hess.matvec(&x, 0.0)?;
                kp_acc = hk_z;
            }
            iters = iter;
            break;
        }
        let alpha = rz / pap;
        axpy(&mut x, alpha, &p);
        kp_acc += alpha * hk_p;
        axpy(&mut r, -alpha, &ap);
        iters = iter;
        if norm(&r) <= tol * bnorm {
            break;
        }
        z = precond.apply(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut pnew = z.clone();
        axpy(&mut pnew, beta, &p);
        p = pnew;
    }
    let kt = if coupled { -(g_k + kp_acc) / h_kk } else { 0.0 };
    Ok(SchurStep {
        pt: x,
        kt,
        cg_iters: iters,
    })
}

/// Options of the outer Newton loop.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_newton: usize,
    /// Stop when the gradient norm falls below this fraction of its initial value.
    pub grad_tol_rel: f64,
    pub warm_start: bool,
    pub warm_max_iters: usize,
    pub warm_tol_rel: f64,
    pub precondition: bool,
    pub hessian_mode: HessianMode,
    pub schur_tol: f64,
    pub schur_max_iters: usize,
    pub armijo_c1: f64,
    pub max_halvings: usize,
    pub kf_init: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_newton: 25,
            grad_tol_rel: 1e-6,
            warm_start: true,
            warm_max_iters: 10,
            warm_tol_rel: 1e-3,
            precondition: true,
            hessian_mode: HessianMode::GaussNewton,
            schur_tol: 1e-6,
            schur_max_iters: 100,
            armijo_c1: 1e-4,
            max_halvings: 20,
            kf_init: 0.0,
        }
    }
}

/// One row of the convergence log. The row describes the state at the start
/// of the iteration and the step taken from it (zero step on the final row).
#[derive(Debug, Clone, Copy)]
pub struct IterRecord {
    pub iter: usize,
    pub phase: u8,
    pub objective: f64,
    pub grad_norm: f64,
    pub cg_iters: usize,
    pub step_length: f64,
    pub k_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonStatus {
    ConvergedGrad,
    MaxIterations,
    LineSearchFailed,
}

/// Result of one inversion.
#[derive(Debug, Clone)]
pub struct InversionState {
    pub p: Vec<f64>,
    pub k_f: f64,
    pub history: Vec<IterRecord>,
    pub status: NewtonStatus,
    /// Accepted Newton steps in the true (phase-2) loop.
    pub phase2_steps: usize,
}

impl InversionState {
    pub fn converged(&self) -> bool {
        self.status == NewtonStatus::ConvergedGrad
    }

    /// Mean CG iterations per phase-2 Newton step that solved a system.
    pub fn mean_cg_iters_phase2(&self) -> f64 {
        let rows: Vec<&IterRecord> = self
            .history
            .iter()
            .filter(|r| r.phase == 2 && r.cg_iters > 0)
            .collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|r| r.cg_iters as f64).sum::<f64>() / rows.len() as f64
    }

    /// Convergence log as CSV.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iter,phase,objective,grad_norm,cg_iters,step_length,k_f")?;
        for r in &self.history {
            writeln!(
                f,
                "{},{},{:.9e},{:.9e},{},{:.6},{:.9e}",
                r.iter, r.phase, r.objective, r.grad_norm, r.cg_iters, r.step_length, r.k_f
            )?;
        }
        Ok(())
    }
}

struct PhaseOutcome {
    status: NewtonStatus,
    accepted: usize,
}

/// Gradient-norm stopping rule of one phase.
enum GradTarget {
    /// Stop at a fraction of the phase's own initial gradient norm.
    RelativeToStart(f64),
    /// Stop at an absolute norm (shared bar for warm/cold comparisons).
    Absolute(f64),
}

#[allow(clippy::too_many_arguments)]
fn newton_phase(
    problem: &InverseProblem,
    opts: &NewtonOptions,
    phase: u8,
    surrogate: bool,
    max_iters: usize,
    target: GradTarget,
    p: &mut Vec<f64>,
    kf: &mut f64,
    history: &mut Vec<IterRecord>,
) -> Result<PhaseOutcome> {
    let mut g0: Option<f64> = None;
    let mut accepted = 0;
    for it in 0..=max_iters {
        let stepper = problem.stepper(*kf, surrogate, problem.cg_forward);
        let (g_p, g_k, j, traj, sweep) = problem.gradient_with_parts(&stepper, p)?;
        let gnorm = problem.grad_norm(&g_p, g_k);
        let g0v = *g0.get_or_insert(gnorm);
        let bar = match target {
            GradTarget::RelativeToStart(rel) => rel * g0v,
            GradTarget::Absolute(abs) => abs,
        };
        if gnorm <= bar || gnorm == 0.0 {
            history.push(IterRecord {
                iter: it,
                phase,
                objective: j,
                grad_norm: gnorm,
                cg_iters: 0,
                step_length: 0.0,
                k_f: *kf,
            });
            return Ok(PhaseOutcome {
                status: NewtonStatus::ConvergedGrad,
                accepted,
            });
        }
        if it == max_iters {
            history.push(IterRecord {
                iter: it,
                phase,
                objective: j,
                grad_norm: gnorm,
                cg_iters: 0,
                step_length: 0.0,
                k_f: *kf,
            });
            return Ok(PhaseOutcome {
                status: NewtonStatus::MaxIterations,
                accepted,
            });
        }

        let precond = if opts.precondition {
            build_preconditioner(problem, *kf, &traj)?
        } else {
            Preconditioner::identity()
        };
        let hess_stepper = problem.stepper(*kf, surrogate, problem.cg_hessian);
        let hess = HessianOp::new(problem, &hess_stepper, &traj, &sweep, opts.hessian_mode);
        let step = schur_solve(
            problem,
            &hess,
            &precond,
            &g_p,
            g_k,
            opts.schur_tol,
            opts.schur_max_iters,
        )?;

        let mut pt = step.pt;
        let mut kt = step.kt;
        let mut slope = dot(&g_p, &pt) + if problem.invert_kf { g_k * kt } else { 0.0 };
        if slope >= 0.0 {
            log::warn!("Newton direction is not a descent direction (slope {slope:.3e}); reversing");
            for v in pt.iter_mut() {
                *v = -*v;
            }
            kt = -kt;
            slope = -slope;
        }

        // Armijo backtracking on the shared (p, k_f) direction. A trial that
        // fails to evaluate (e.g. k_f overshooting far enough negative that
        // the implicit diffusion system loses definiteness) is treated as an
        // insufficient decrease and backtracked over.
        let mut s = 1.0;
        let mut found = None;
        for _ in 0..=opts.max_halvings {
            let mut trial_p = p.clone();
            axpy(&mut trial_p, s, &pt);
            let trial_kf = *kf + s * kt;
            let trial_stepper = problem.stepper(trial_kf, surrogate, problem.cg_forward);
            match problem.objective_with_traj(&trial_stepper, &trial_p, trial_kf) {
                Ok((jt, _)) if jt.is_finite() && jt <= j + opts.armijo_c1 * s * slope => {
                    found = Some((trial_p, trial_kf, s));
                    break;
                }
                Ok(_) => {}
                Err(e) => {
                    log::debug!("line search trial at step {s:.3e} failed: {e}");
                }
            }
            s *= 0.5;
        }
        match found {
            None => {
                history.push(IterRecord {
                    iter: it,
                    phase,
                    objective: j,
                    grad_norm: gnorm,
                    cg_iters: step.cg_iters,
                    step_length: 0.0,
                    k_f: *kf,
                });
                return Ok(PhaseOutcome {
                    status: NewtonStatus::LineSearchFailed,
                    accepted,
                });
            }
            Some((trial_p, trial_kf, s)) => {
                history.push(IterRecord {
                    iter: it,
                    phase,
                    objective: j,
                    grad_norm: gnorm,
                    cg_iters: step.cg_iters,
                    step_length: s,
                    k_f: *kf,
                });
                *p = trial_p;
                *kf = trial_kf;
                accepted += 1;
            }
        }
    }
    unreachable!("loop returns from within");
}

/// Run the inversion: an optional warm-start phase on the analytic surrogate
/// followed by the true Newton-CG loop, both with Armijo backtracking.
///
/// Phase 2 stops relative to the gradient norm at the original initial guess
/// (not at the warm-start point), so warm and cold runs share the same bar.
pub fn newton_solve(problem: &InverseProblem, opts: &NewtonOptions) -> Result<InversionState> {
    let mut p = vec![0.0; problem.n_p()];
    let mut kf = if problem.invert_kf {
        opts.kf_init
    } else {
        problem.kf_fixed
    };
    // reference gradient norm at the initial guess, with the true operator
    let gref = {
        let stepper = problem.stepper(kf, false, problem.cg_forward);
        let (g_p, g_k, _, _, _) = problem.gradient_with_parts(&stepper, &p)?;
        problem.grad_norm(&g_p, g_k)
    };
    let mut history = Vec::new();
    if opts.warm_start {
        let outcome = newton_phase(
            problem,
            opts,
            1,
            true,
            opts.warm_max_iters,
            GradTarget::RelativeToStart(opts.warm_tol_rel),
            &mut p,
            &mut kf,
            &mut history,
        )?;
        if outcome.status == NewtonStatus::LineSearchFailed {
            log::warn!("warm start stalled; continuing from its best point");
        }
    }
    let outcome = newton_phase(
        problem,
        opts,
        2,
        false,
        opts.max_newton,
        GradTarget::Absolute(opts.grad_tol_rel * gref),
        &mut p,
        &mut kf,
        &mut history,
    )?;
    if outcome.status == NewtonStatus::LineSearchFailed {
        log::warn!(
            "line search found no decrease after {} accepted steps; returning best point",
            outcome.accepted
        );
    }
    Ok(InversionState {
        p,
        k_f: kf,
        history,
        status: outcome.status,
        phase2_steps: outcome.accepted,
    })
}
