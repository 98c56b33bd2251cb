//! Time integration of the reaction-diffusion state equation and its exact
//! linearization.
//!
//! One step of the splitting advances the state by a Crank-Nicolson diffusion
//! half-step, an exact logistic reaction step, and a second diffusion
//! half-step. Each CN half-step solves the symmetric system
//! `(I - dt/4 D) c_out = (I + dt/4 D) c_in` by preconditioned conjugate
//! gradients (exactly, in transform space, when the coefficient is a constant
//! multiple of the identity). The half-step is self-adjoint and the reaction
//! tangent is diagonal, which the adjoint module exploits: backward sweeps
//! are exact transposes of the forward linearization.
//!
//! The trajectory stores the state at every step boundary plus the
//! intermediate after the first half-step of each step; those intermediates
//! are the linearization points of the reaction sub-step.

use crate::error::{Error, Result};
use crate::field::spectral::SpectralOps;
use crate::field::{ScalarField, TensorField, TimeGrid};

/// Logistic reaction parameters.
#[derive(Debug, Clone, Copy)]
pub struct ReactionParams {
    pub rho: f64,
}

impl ReactionParams {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho >= 0.0) {
            return Err(Error::InvalidParam(format!("rho = {rho} must be >= 0")));
        }
        Ok(Self { rho })
    }
}

impl Default for ReactionParams {
    fn default() -> Self {
        Self { rho: 2.0 }
    }
}

/// Exact flow of c' = rho c (1 - c) over time dt, per value.
#[inline]
pub fn logistic_flow(c: f64, rho: f64, dt: f64) -> f64 {
    let e = (-rho * dt).exp();
    c / (e + c * (1.0 - e))
}

/// Derivative of `logistic_flow` with respect to its input.
#[inline]
pub fn logistic_flow_tangent(c: f64, rho: f64, dt: f64) -> f64 {
    let e = (-rho * dt).exp();
    let den = e + c * (1.0 - e);
    e / (den * den)
}

/// Second derivative of `logistic_flow` with respect to its input.
#[inline]
pub fn logistic_flow_curvature(c: f64, rho: f64, dt: f64) -> f64 {
    let e = (-rho * dt).exp();
    let den = e + c * (1.0 - e);
    -2.0 * e * (1.0 - e) / (den * den * den)
}

/// Exact logistic reaction step applied voxelwise.
pub fn reaction_step(c: &ScalarField, rho: f64, dt: f64) -> Result<ScalarField> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParam(format!("reaction dt = {dt} must be > 0")));
    }
    c.check_finite("reaction_step")?;
    Ok(c.map(|v| logistic_flow(v, rho, dt)))
}

/// Diffusion coefficient as seen by the integrator.
#[derive(Debug, Clone)]
pub enum DiffusionCoeff {
    /// No diffusion.
    Zero,
    /// Constant isotropic coefficient; solves are exact in transform space.
    Constant(f64),
    /// Constant symmetric tensor (upper-triangle components); solves are
    /// exact in transform space via the quadratic-form symbol.
    ConstTensor(Vec<f64>),
    /// Voxelwise symmetric tensor; solves use preconditioned CG.
    Tensor(TensorField),
}

impl DiffusionCoeff {
    fn mean_isotropic(&self, dim: usize) -> f64 {
        match self {
            DiffusionCoeff::Zero => 0.0,
            DiffusionCoeff::Constant(k) => *k,
            DiffusionCoeff::ConstTensor(c) => {
                let mut tr = 0.0;
                let mut slot = 0;
                for i in 0..dim {
                    for j in i..dim {
                        if i == j {
                            tr += c[slot];
                        }
                        slot += 1;
                    }
                }
                tr / dim as f64
            }
            DiffusionCoeff::Tensor(t) => t.mean_isotropic_part(None),
        }
    }
}

/// Conjugate-gradient options for the implicit diffusion solves.
#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    /// Relative-residual convergence threshold.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 500,
        }
    }
}

/// States along one integration, at step boundaries and at the reaction
/// linearization points (after the first diffusion half-step of each step).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tg: TimeGrid,
    /// State at step boundaries; length n_steps + 1.
    pub steps: Vec<ScalarField>,
    /// Intermediate after the first half-step of each step; length n_steps.
    pub half: Vec<ScalarField>,
}

impl Trajectory {
    pub fn initial(&self) -> &ScalarField {
        &self.steps[0]
    }

    pub fn terminal(&self) -> &ScalarField {
        self.steps.last().expect("trajectory has at least one state")
    }

    pub fn check_compatible(&self, other: &Trajectory) -> Result<()> {
        if self.tg != other.tg || self.steps.len() != other.steps.len() {
            return Err(Error::GridMismatch("trajectory time grids differ".into()));
        }
        self.steps[0].same_grid(&other.steps[0], "trajectory grids differ")
    }
}

/// Integrator for the state equation and its linearization on a fixed
/// diffusion coefficient, anisotropy source tensor, reaction rate and time
/// grid. A single instance is used sequentially; independent instances may
/// run concurrently.
pub struct Stepper<'a> {
    pub(crate) ops: &'a SpectralOps,
    /// Full diffusion coefficient K.
    pub(crate) diff: DiffusionCoeff,
    /// Sensitivity dK/dk_f (the anisotropy tensor restricted to the brain);
    /// Zero when k_f is not a variable.
    pub(crate) source: DiffusionCoeff,
    pub(crate) rho: f64,
    pub(crate) tg: TimeGrid,
    pub(crate) cg: CgOptions,
    /// Constant-coefficient surrogate of K for the CN preconditioner.
    kbar: f64,
    /// Quadratic-form symbol of a constant-tensor coefficient.
    diff_symbol: Option<Vec<f64>>,
    /// Quadratic-form symbol of a constant-tensor source.
    source_symbol: Option<Vec<f64>>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        ops: &'a SpectralOps,
        diff: DiffusionCoeff,
        source: DiffusionCoeff,
        rho: f64,
        tg: TimeGrid,
        cg: CgOptions,
    ) -> Self {
        let kbar = diff.mean_isotropic(ops.grid().dim()).max(0.0);
        let diff_symbol = match &diff {
            DiffusionCoeff::ConstTensor(c) => Some(ops.quad_symbol(c)),
            _ => None,
        };
        let source_symbol = match &source {
            DiffusionCoeff::ConstTensor(c) => Some(ops.quad_symbol(c)),
            _ => None,
        };
        Self {
            ops,
            diff,
            source,
            rho,
            tg,
            cg,
            kbar,
            diff_symbol,
            source_symbol,
        }
    }

    pub fn time_grid(&self) -> TimeGrid {
        self.tg
    }

    pub fn diffusion(&self) -> &DiffusionCoeff {
        &self.diff
    }

    /// CN half-step weight: dt/4 (trapezoidal over a half-step of dt/2).
    pub(crate) fn gamma(&self) -> f64 {
        0.25 * self.tg.dt()
    }

    fn apply_coeff(
        &self,
        which: &DiffusionCoeff,
        symbol: Option<&Vec<f64>>,
        f: &ScalarField,
    ) -> ScalarField {
        match which {
            DiffusionCoeff::Zero => ScalarField::zeros(f.grid()),
            DiffusionCoeff::Constant(k) => self.ops.apply_iso_diffusion(f, *k),
            DiffusionCoeff::ConstTensor(_) => self
                .ops
                .apply_const_tensor_diffusion(f, symbol.expect("symbol cached")),
            DiffusionCoeff::Tensor(t) => self.ops.apply_tensor_diffusion(f, t),
        }
    }

    /// div(K grad f).
    pub(crate) fn apply_diff(&self, f: &ScalarField) -> ScalarField {
        self.apply_coeff(&self.diff, self.diff_symbol.as_ref(), f)
    }

    /// div(T grad f) with the anisotropy sensitivity tensor.
    pub(crate) fn apply_source(&self, f: &ScalarField) -> ScalarField {
        self.apply_coeff(&self.source, self.source_symbol.as_ref(), f)
    }

    pub(crate) fn has_source(&self) -> bool {
        !matches!(self.source, DiffusionCoeff::Zero)
    }

    /// Solve (I - gamma D) x = rhs. Exact for Zero/Constant coefficients,
    /// preconditioned CG for tensors. Returns the solution and CG iterations.
    pub(crate) fn solve_implicit(&self, rhs: &ScalarField) -> Result<(ScalarField, usize)> {
        let g = self.gamma();
        match &self.diff {
            DiffusionCoeff::Zero => Ok((rhs.clone(), 0)),
            DiffusionCoeff::Constant(k) => Ok((self.ops.solve_iso_helmholtz(rhs, g * k), 0)),
            DiffusionCoeff::ConstTensor(_) => Ok((
                self.ops.solve_const_tensor_helmholtz(
                    rhs,
                    g,
                    self.diff_symbol.as_ref().expect("symbol cached"),
                ),
                0,
            )),
            DiffusionCoeff::Tensor(t) => {
                let apply_a = |x: &ScalarField| -> ScalarField {
                    let mut out = x.clone();
                    out.axpy(-g, &self.ops.apply_tensor_diffusion(x, t));
                    out
                };
                let precond = |r: &ScalarField| self.ops.solve_iso_helmholtz(r, g * self.kbar);
                pcg(rhs, apply_a, precond, self.cg)
            }
        }
    }

    /// Apply (I + gamma D).
    pub(crate) fn apply_explicit(&self, f: &ScalarField) -> ScalarField {
        let mut out = f.clone();
        out.axpy(self.gamma(), &self.apply_diff(f));
        out
    }

    /// One diffusion half-step over dt/2: (I - dt/4 D) out = (I + dt/4 D) in.
    pub(crate) fn halfstep(&self, c: &ScalarField) -> Result<(ScalarField, usize)> {
        match &self.diff {
            DiffusionCoeff::Zero => Ok((c.clone(), 0)),
            DiffusionCoeff::Constant(k) => {
                let g = self.gamma();
                let num = self.ops.apply_iso_helmholtz(c, g * k);
                Ok((self.ops.solve_iso_helmholtz(&num, g * k), 0))
            }
            DiffusionCoeff::ConstTensor(_) => Ok((
                self.ops.cn_halfstep_const_tensor(
                    c,
                    self.gamma(),
                    self.diff_symbol.as_ref().expect("symbol cached"),
                ),
                0,
            )),
            DiffusionCoeff::Tensor(_) => {
                let rhs = self.apply_explicit(c);
                self.solve_implicit(&rhs)
            }
        }
    }

    pub(crate) fn reaction(&self, c: &ScalarField) -> ScalarField {
        let (rho, dt) = (self.rho, self.tg.dt());
        c.map(|v| logistic_flow(v, rho, dt))
    }

    pub(crate) fn reaction_tangent_at(&self, v: &ScalarField) -> ScalarField {
        let (rho, dt) = (self.rho, self.tg.dt());
        v.map(|x| logistic_flow_tangent(x, rho, dt))
    }

    pub(crate) fn reaction_curvature_at(&self, v: &ScalarField) -> ScalarField {
        let (rho, dt) = (self.rho, self.tg.dt());
        v.map(|x| logistic_flow_curvature(x, rho, dt))
    }

    /// Integrate the state equation from `c0` over the time grid.
    pub fn forward_solve(&self, c0: &ScalarField) -> Result<Trajectory> {
        c0.check_finite("forward_solve")?;
        let n = self.tg.n_steps();
        let mut steps = Vec::with_capacity(n + 1);
        let mut half = Vec::with_capacity(n);
        steps.push(c0.clone());
        for step in 0..n {
            let (v, _) = self.halfstep(&steps[step])?;
            let w = self.reaction(&v);
            let (next, _) = self.halfstep(&w)?;
            half.push(v);
            steps.push(next);
        }
        Ok(Trajectory {
            tg: self.tg,
            steps,
            half,
        })
    }

    /// Exact derivative of `forward_solve` along a perturbation of the
    /// initial condition (`dc0`) and of the anisotropy scale (`dkf`).
    /// The returned trajectory holds the tangent states in the same layout.
    pub fn tangent_solve(
        &self,
        base: &Trajectory,
        dc0: &ScalarField,
        dkf: f64,
    ) -> Result<Trajectory> {
        dc0.same_grid(&base.steps[0], "tangent_solve")?;
        let n = self.tg.n_steps();
        let g = self.gamma();
        let mut steps = Vec::with_capacity(n + 1);
        let mut half = Vec::with_capacity(n);
        steps.push(dc0.clone());
        for step in 0..n {
            let u = &base.steps[step];
            let v = &base.half[step];
            // half-step 1 tangent: A dv = B du + gamma dkf T_op(u + v)
            let mut rhs = self.apply_explicit(&steps[step]);
            if dkf != 0.0 && self.has_source() {
                rhs.axpy(g * dkf, &self.apply_source(&u.add(v)));
            }
            let (dv, _) = self.solve_implicit(&rhs)?;
            // reaction tangent at the recorded intermediate
            let dw = self.reaction_tangent_at(v).hadamard(&dv);
            // half-step 2 tangent
            let w = self.reaction(v);
            let unext = &base.steps[step + 1];
            let mut rhs2 = self.apply_explicit(&dw);
            if dkf != 0.0 && self.has_source() {
                rhs2.axpy(g * dkf, &self.apply_source(&w.add(unext)));
            }
            let (dnext, _) = self.solve_implicit(&rhs2)?;
            half.push(dv);
            steps.push(dnext);
        }
        Ok(Trajectory {
            tg: self.tg,
            steps,
            half,
        })
    }
}

/// One CN diffusion half-step as a standalone operation.
pub fn diffusion_halfstep(
    ops: &SpectralOps,
    c: &ScalarField,
    k: &TensorField,
    dt: f64,
    cg: CgOptions,
) -> Result<ScalarField> {
    if c.grid() != k.grid() {
        return Err(Error::GridMismatch("diffusion_halfstep".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParam(format!("dt = {dt} must be > 0")));
    }
    c.check_finite("diffusion_halfstep")?;
    let tg = TimeGrid::new(1, dt)?;
    let stepper = Stepper::new(
        ops,
        DiffusionCoeff::Tensor(k.clone()),
        DiffusionCoeff::Zero,
        0.0,
        tg,
        cg,
    );
    let (out, _) = stepper.halfstep(c)?;
    Ok(out)
}

/// Write a trajectory as numbered GLF1 volumes plus a plain-text manifest
/// mapping step index to time. Returns the manifest path.
pub fn export_trajectory(
    traj: &Trajectory,
    dir: &std::path::Path,
    prefix: &str,
) -> Result<std::path::PathBuf> {
    use crate::field::glf1::{save_volume, Volume};
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join(format!("{prefix}_manifest.txt"));
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    writeln!(manifest, "# step time file")?;
    for (n, s) in traj.steps.iter().enumerate() {
        let name = format!("{prefix}_step{n:04}.glf1");
        save_volume(&dir.join(&name), &Volume::from_scalar(s))?;
        writeln!(manifest, "{n} {:.6} {name}", traj.tg.time(n))?;
    }
    Ok(manifest_path)
}

/// Preconditioned conjugate gradients for an SPD operator, with relative
/// residual stopping. The initial guess is the preconditioned right-hand
/// side, which keeps the mean (zero-frequency) component exact.
pub(crate) fn pcg(
    b: &ScalarField,
    apply_a: impl Fn(&ScalarField) -> ScalarField,
    precond: impl Fn(&ScalarField) -> ScalarField,
    opts: CgOptions,
) -> Result<(ScalarField, usize)> {
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok((ScalarField::zeros(b.grid()), 0));
    }
    let mut x = precond(b);
    let mut r = b.clone();
    r.axpy(-1.0, &apply_a(&x));
    if r.norm() <= opts.tol * bnorm {
        return Ok((x, 0));
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for iter in 1..=opts.max_iters {
        let ap = apply_a(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(Error::CgDidNotConverge {
                iters: iter,
                residual: r.norm() / bnorm,
            });
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        if r.norm() <= opts.tol * bnorm {
            return Ok((x, iter));
        }
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut pnew = z.clone();
        pnew.axpy(beta, &p);
        p = pnew;
    }
    Err(Error::CgDidNotConverge {
        iters: opts.max_iters,
        residual: r.norm() / bnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn reaction_fixed_points() {
        let g = Grid::regular(&[4, 4], 1.0).unwrap();
        let zero = ScalarField::zeros(&g);
        let one = ScalarField::constant(&g, 1.0);
        assert_eq!(reaction_step(&zero, 2.0, 0.1).unwrap(), zero);
        let r1 = reaction_step(&one, 2.0, 0.1).unwrap();
        assert!(r1.sub(&one).max_abs() < 1e-15);
    }

    #[test]
    fn reaction_rho_zero_is_identity() {
        let g = Grid::regular(&[4, 4], 1.0).unwrap();
        let c = ScalarField::from_fn(&g, |x| 0.1 + 0.01 * x[0]);
        let out = reaction_step(&c, 0.0, 0.37).unwrap();
        assert!(out.sub(&c).max_abs() < 1e-15);
    }

    /// RK4 oracle with dt/1000 sub-steps for the logistic ODE.
    fn rk4_logistic(c0: f64, rho: f64, dt: f64) -> f64 {
        let n = 1000;
        let h = dt / n as f64;
        let f = |c: f64| rho * c * (1.0 - c);
        let mut c = c0;
        for _ in 0..n {
            let k1 = f(c);
            let k2 = f(c + 0.5 * h * k1);
            let k3 = f(c + 0.5 * h * k2);
            let k4 = f(c + h * k3);
            c += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        c
    }

    #[test]
    fn reaction_matches_rk4_oracle() {
        let got = logistic_flow(0.5, 2.0, 0.1);
        let want = rk4_logistic(0.5, 2.0, 0.1);
        assert_relative_eq!(got, want, epsilon = 1e-12);
        assert_relative_eq!(got, 0.549834, epsilon = 1e-6);
        assert_relative_eq!(
            logistic_flow(0.2, 3.0, 0.25),
            rk4_logistic(0.2, 3.0, 0.25),
            epsilon = 1e-11
        );
    }

    #[test]
    fn reaction_tangent_matches_fd() {
        for &(c, rho, dt) in &[(0.3, 2.0, 0.1), (0.9, 1.5, 0.2), (0.05, 4.0, 0.05)] {
            let h = 1e-6;
            let fd = (logistic_flow(c + h, rho, dt) - logistic_flow(c - h, rho, dt)) / (2.0 * h);
            assert_relative_eq!(logistic_flow_tangent(c, rho, dt), fd, epsilon = 1e-8);
            let fd2 = (logistic_flow_tangent(c + h, rho, dt)
                - logistic_flow_tangent(c - h, rho, dt))
                / (2.0 * h);
            assert_relative_eq!(logistic_flow_curvature(c, rho, dt), fd2, max_relative = 1e-6);
        }
    }

    fn iso_tensor(grid: &Grid, k: f64) -> TensorField {
        TensorField::isotropic(&ScalarField::constant(grid, k))
    }

    #[test]
    fn halfstep_keeps_constants() {
        let grid = Grid::regular(&[16, 16], 1.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let k = iso_tensor(&grid, 0.3);
        let c = ScalarField::constant(&grid, 0.42);
        let out = diffusion_halfstep(&ops, &c, &k, 0.1, CgOptions::default()).unwrap();
        assert!(out.sub(&c).max_abs() < 1e-12);
    }

    #[test]
    fn halfstep_amplification_factor() {
        // K = k I, one sine mode: amplification (1 - a)/(1 + a), a = k (2 pi/L)^2 dt/4
        let grid = Grid::regular(&[32, 8], 2.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let kval = 0.7;
        let k = iso_tensor(&grid, kval);
        let l = grid.extent(0);
        let c = ScalarField::from_fn(&grid, |x| (2.0 * PI * x[0] / l).sin());
        let dt = 0.2;
        let out = diffusion_halfstep(&ops, &c, &k, dt, CgOptions::default()).unwrap();
        let a = kval * (2.0 * PI / l).powi(2) * dt / 4.0;
        let amp = (1.0 - a) / (1.0 + a);
        let expect = c.map(|v| amp * v);
        let rel = out.sub(&expect).norm() / expect.norm();
        assert!(rel < 1e-9, "relative error {rel:.3e}");
    }

    #[test]
    fn halfstep_pair_is_third_order_per_step() {
        // ((1-a)/(1+a))^2 vs exp(-4a): per-step error O(dt^3), Richardson ratio ~8.
        let grid = Grid::regular(&[32, 8], 2.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let kval = 0.7;
        let k = iso_tensor(&grid, kval);
        let l = grid.extent(0);
        let c = ScalarField::from_fn(&grid, |x| (2.0 * PI * x[0] / l).sin());
        let om2 = (2.0 * PI / l).powi(2);
        let step_err = |dt: f64| -> f64 {
            let h1 = diffusion_halfstep(&ops, &c, &k, dt, CgOptions::default()).unwrap();
            let h2 = diffusion_halfstep(&ops, &h1, &k, dt, CgOptions::default()).unwrap();
            let exact = c.map(|v| (-kval * om2 * dt).exp() * v);
            h2.sub(&exact).norm() / exact.norm()
        };
        let e1 = step_err(0.4);
        let e2 = step_err(0.2);
        let ratio = e1 / e2;
        assert!((6.0..10.0).contains(&ratio), "Richardson ratio {ratio}");
    }

    #[test]
    fn forward_zero_stays_zero() {
        let grid = Grid::regular(&[16, 16], 1.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let tg = TimeGrid::new(10, 1.0).unwrap();
        let stepper = Stepper::new(
            &ops,
            DiffusionCoeff::Tensor(iso_tensor(&grid, 0.1)),
            DiffusionCoeff::Zero,
            2.0,
            tg,
            CgOptions::default(),
        );
        let traj = stepper.forward_solve(&ScalarField::zeros(&grid)).unwrap();
        for s in &traj.steps {
            assert_eq!(s.max_abs(), 0.0);
        }
    }

    #[test]
    fn forward_mass_conserved_without_reaction() {
        let grid = Grid::regular(&[24, 16], 1.5).unwrap();
        let ops = SpectralOps::new(&grid);
        let tg = TimeGrid::new(8, 1.0).unwrap();
        // heterogeneous SPD tensor, no penalty region
        let mut kt = TensorField::zeros(&grid);
        for i in 0..grid.len() {
            let x = grid.coord(i);
            let w = 0.1 + 0.05 * (2.0 * PI * x[0] / grid.extent(0)).cos();
            kt.set_voxel(i, &[w, 0.02, 0.02, 0.08]);
        }
        let stepper = Stepper::new(
            &ops,
            DiffusionCoeff::Tensor(kt),
            DiffusionCoeff::Zero,
            0.0,
            tg,
            CgOptions::default(),
        );
        let c0 = ScalarField::from_fn(&grid, |x| {
            0.5 * (-((x[0] - 18.0).powi(2) + (x[1] - 12.0).powi(2)) / 18.0).exp()
        });
        let traj = stepper.forward_solve(&c0).unwrap();
        let m0 = c0.mass();
        for s in &traj.steps {
            assert!(
                (s.mass() - m0).abs() <= 1e-10 * m0.abs(),
                "mass drifted: {} vs {}",
                s.mass(),
                m0
            );
        }
    }

    #[test]
    fn forward_pure_reaction_uniform_closed_form() {
        let grid = Grid::regular(&[8, 8], 1.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let tg = TimeGrid::new(10, 1.0).unwrap();
        let stepper = Stepper::new(
            &ops,
            DiffusionCoeff::Zero,
            DiffusionCoeff::Zero,
            2.0,
            tg,
            CgOptions::default(),
        );
        let traj = stepper
            .forward_solve(&ScalarField::constant(&grid, 0.1))
            .unwrap();
        // c(1) = 0.1 / (0.1 + 0.9 e^{-2})
        let want = 0.1 / (0.1 + 0.9 * (-2.0f64).exp());
        assert_relative_eq!(want, 0.4508530, epsilon = 1e-6);
        for &v in traj.terminal().values() {
            assert_relative_eq!(v, want, epsilon = 1e-12);
        }
    }

    fn random_smooth(grid: &Grid, seed: u64, amp: f64, base: f64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lx = grid.extent(0);
        let ly = grid.extent(1);
        let coefs: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..3.0f64).round(),
                    rng.gen_range(0.0..3.0f64).round(),
                )
            })
            .collect();
        ScalarField::from_fn(grid, |x| {
            let mut v = base;
            for &(a, mx, my) in &coefs {
                v += amp * a * (2.0 * PI * mx * x[0] / lx).cos() * (2.0 * PI * my * x[1] / ly).cos();
            }
            v.clamp(0.001, 0.999)
        })
    }

    fn standard_stepper<'a>(ops: &'a SpectralOps, grid: &Grid, nt: usize) -> Stepper<'a> {
        let mut kt = TensorField::zeros(grid);
        for i in 0..grid.len() {
            let x = grid.coord(i);
            let w = 0.12 + 0.04 * (2.0 * PI * x[0] / grid.extent(0)).cos();
            kt.set_voxel(i, &[w, 0.01, 0.01, 0.1]);
        }
        let mut te = TensorField::zeros(grid);
        for i in 0..grid.len() {
            te.set_voxel(i, &[0.5, 0.1, 0.1, 0.2]);
        }
        Stepper::new(
            ops,
            DiffusionCoeff::Tensor(kt),
            DiffusionCoeff::Tensor(te),
            2.0,
            TimeGrid::new(nt, 1.0).unwrap(),
            CgOptions {
                tol: 1e-12,
                max_iters: 500,
            },
        )
    }

    #[test]
    fn tangent_zero_input_is_zero() {
        let grid = Grid::regular(&[16, 16], 4.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let stepper = standard_stepper(&ops, &grid, 5);
        let c0 = random_smooth(&grid, 1, 0.2, 0.3);
        let base = stepper.forward_solve(&c0).unwrap();
        let tan = stepper
            .tangent_solve(&base, &ScalarField::zeros(&grid), 0.0)
            .unwrap();
        for s in &tan.steps {
            assert_eq!(s.max_abs(), 0.0);
        }
    }

    #[test]
    fn tangent_superposition() {
        let grid = Grid::regular(&[16, 16], 4.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let stepper = standard_stepper(&ops, &grid, 5);
        let c0 = random_smooth(&grid, 2, 0.2, 0.3);
        let base = stepper.forward_solve(&c0).unwrap();
        let d1 = random_smooth(&grid, 3, 0.1, 0.0);
        let d2 = random_smooth(&grid, 4, 0.1, 0.0);
        let t1 = stepper.tangent_solve(&base, &d1, 0.02).unwrap();
        let t2 = stepper.tangent_solve(&base, &d2, -0.01).unwrap();
        let t12 = stepper.tangent_solve(&base, &d1.add(&d2), 0.01).unwrap();
        let mut sum = t1.terminal().clone();
        sum.axpy(1.0, t2.terminal());
        let rel = sum.sub(t12.terminal()).norm() / t12.terminal().norm();
        assert!(rel < 1e-10, "superposition violated: {rel:.3e}");
    }

    #[test]
    fn tangent_is_directional_derivative() {
        let grid = Grid::regular(&[16, 16], 4.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let stepper = standard_stepper(&ops, &grid, 5);
        let c0 = random_smooth(&grid, 5, 0.2, 0.3);
        let base = stepper.forward_solve(&c0).unwrap();
        let dir = random_smooth(&grid, 6, 0.1, 0.0);
        let tan = stepper.tangent_solve(&base, &dir, 0.0).unwrap();
        // forward-difference error scales O(h); observed order >= 0.9
        let mut errs = Vec::new();
        for &h in &[1e-3, 1e-4, 1e-5] {
            let mut c0h = c0.clone();
            c0h.axpy(h, &dir);
            let pert = stepper.forward_solve(&c0h).unwrap();
            let mut fd = pert.terminal().sub(base.terminal());
            fd.scale(1.0 / h);
            errs.push(fd.sub(tan.terminal()).norm());
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log10();
            assert!(order >= 0.9, "observed order {order} (errors {errs:?})");
        }
    }

    #[test]
    fn tangent_kf_direction_matches_fd() {
        let grid = Grid::regular(&[16, 16], 4.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let c0 = random_smooth(&grid, 7, 0.2, 0.3);
        let base_stepper = standard_stepper(&ops, &grid, 5);
        let base = base_stepper.forward_solve(&c0).unwrap();
        let tan = base_stepper
            .tangent_solve(&base, &ScalarField::zeros(&grid), 1.0)
            .unwrap();
        let h = 1e-6;
        let (kt, te) = match (&base_stepper.diff, &base_stepper.source) {
            (DiffusionCoeff::Tensor(k), DiffusionCoeff::Tensor(t)) => (k.clone(), t.clone()),
            _ => unreachable!(),
        };
        let mut kph = kt.clone();
        kph.axpy(h, &te);
        let pert_stepper = Stepper::new(
            &ops,
            DiffusionCoeff::Tensor(kph),
            DiffusionCoeff::Zero,
            2.0,
            base_stepper.tg,
            base_stepper.cg,
        );
        let pert = pert_stepper.forward_solve(&c0).unwrap();
        let mut fd = pert.terminal().sub(base.terminal());
        fd.scale(1.0 / h);
        let rel = fd.sub(tan.terminal()).norm() / tan.terminal().norm();
        assert!(rel < 1e-4, "kf tangent vs FD: {rel:.3e}");
    }

    #[test]
    fn strang_second_order() {
        let grid = Grid::regular(&[16, 16], 4.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let c0 = random_smooth(&grid, 8, 0.2, 0.3);
        let solve = |nt: usize| -> ScalarField {
            let stepper = Stepper::new(
                &ops,
                DiffusionCoeff::Constant(0.5),
                DiffusionCoeff::Zero,
                2.0,
                TimeGrid::new(nt, 1.0).unwrap(),
                CgOptions::default(),
            );
            stepper.forward_solve(&c0).unwrap().terminal().clone()
        };
        let reference = solve(640);
        let e1 = solve(10).sub(&reference).norm();
        let e2 = solve(20).sub(&reference).norm();
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "Strang order ratio {ratio}");
    }

    #[test]
    fn maximum_principle_weak_form() {
        let grid = Grid::regular(&[32, 32], 2.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let stepper = standard_stepper(&ops, &grid, 10);
        let c0 = ScalarField::from_fn(&grid, |x| {
            (-((x[0] - 32.0).powi(2) + (x[1] - 32.0).powi(2)) / 50.0).exp()
        });
        let traj = stepper.forward_solve(&c0).unwrap();
        for s in &traj.steps {
            let (lo, hi) = s.min_max();
            assert!(lo >= -1e-6 && hi <= 1.0 + 1e-6, "range [{lo}, {hi}]");
        }
    }

    #[test]
    fn mirror_symmetry_preserved() {
        let grid = Grid::regular(&[32, 32], 2.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let n = grid.dims()[0];
        // symmetric anatomy-like coefficient about the x-center
        let mut kt = TensorField::zeros(&grid);
        for i in 0..grid.len() {
            let x = grid.coord(i);
            let r2 = (x[0] - 32.0).powi(2) + (x[1] - 32.0).powi(2);
            let w = if r2 < 500.0 { 0.1 } else { 2e-5 };
            kt.set_voxel(i, &[w, 0.0, 0.0, w]);
        }
        let stepper = Stepper::new(
            &ops,
            DiffusionCoeff::Tensor(kt),
            DiffusionCoeff::Zero,
            2.0,
            TimeGrid::new(10, 1.0).unwrap(),
            CgOptions::default(),
        );
        let c0 = ScalarField::from_fn(&grid, |x| {
            (-((x[0] - 32.0).powi(2) + (x[1] - 32.0).powi(2)) / 30.0).exp()
        });
        let traj = stepper.forward_solve(&c0).unwrap();
        let c1 = traj.terminal();
        let mut max_asym: f64 = 0.0;
        for j in 0..n {
            for i in 0..n {
                let a = c1.values()[grid.index(&[i, j])];
                let b = c1.values()[grid.index(&[(n - i) % n, j])];
                max_asym = max_asym.max((a - b).abs());
            }
        }
        assert!(max_asym < 1e-9, "mirror asymmetry {max_asym:.3e}");
    }

    #[test]
    fn rejects_bad_dt_and_nonfinite() {
        let grid = Grid::regular(&[8, 8], 1.0).unwrap();
        let ops = SpectralOps::new(&grid);
        let k = iso_tensor(&grid, 0.1);
        let c = ScalarField::zeros(&grid);
        assert!(diffusion_halfstep(&ops, &c, &k, 0.0, CgOptions::default()).is_err());
        let mut bad = c.clone();
        bad.values_mut()[0] = f64::NAN;
        assert!(reaction_step(&bad, 2.0, 0.1).is_err());
    }
}
