//! L-curve selection of the Tikhonov weight: solve the inversion over a list
//! of regularization values, then pick the corner of the log-log curve of
//! solution norm against misfit norm by maximum three-point curvature.

use crate::error::{Error, Result};
use crate::inversion::{newton_solve, InverseProblem, NewtonOptions};

#[derive(Debug, Clone, Copy)]
pub struct LCurvePoint {
    pub beta: f64,
    /// Combined data misfit sqrt(|O0 Phi p - d0|^2 + |O1 c1 - d1|^2), h-weighted.
    pub misfit: f64,
    /// Euclidean norm of the recovered coefficients.
    pub p_norm: f64,
    /// False when the solve for this beta failed.
    pub ok: bool,
}

/// Run the inversion per beta and locate the corner.
///
/// Betas must be at least four, positive and increasing (log-spaced by
/// convention). Individual solve failures mark their point as missing; the
/// corner needs at least three valid points.
pub fn lcurve(
    problem: &InverseProblem,
    betas: &[f64],
    opts: &NewtonOptions,
) -> Result<(Vec<LCurvePoint>, f64)> {
    if betas.len() < 4 {
        return Err(Error::InvalidParam(format!(
            "l-curve needs at least 4 beta values, got {}",
            betas.len()
        )));
    }
    for w in betas.windows(2) {
        if !(w[0] > 0.0 && w[1] > w[0]) {
            return Err(Error::InvalidParam(
                "l-curve betas must be positive and increasing".into(),
            ));
        }
    }
    let mut points = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut pb = problem.clone();
        pb.beta_p = beta;
        match newton_solve(&pb, opts) {
            Ok(state) => {
                let stepper = pb.stepper(state.k_f, false, pb.cg_forward);
                let (_, traj) = pb.objective_with_traj(&stepper, &state.p, state.k_f)?;
                let (m0, m1) = pb.misfit_norms(&state.p, &traj)?;
                let misfit = (m0 * m0 + m1 * m1).sqrt();
                let p_norm = state.p.iter().map(|v| v * v).sum::<f64>().sqrt();
                points.push(LCurvePoint {
                    beta,
                    misfit,
                    p_norm,
                    ok: true,
                });
            }
            Err(e) => {
                log::warn!("l-curve solve failed at beta = {beta:.3e}: {e}");
                points.push(LCurvePoint {
                    beta,
                    misfit: f64::NAN,
                    p_norm: f64::NAN,
                    ok: false,
                });
            }
        }
    }
    let valid: Vec<LCurvePoint> = points.iter().filter(|p| p.ok).cloned().collect();
    if valid.len() < 3 {
        return Err(Error::InvalidParam(format!(
            "l-curve corner needs at least 3 valid points, got {}",
            valid.len()
        )));
    }
    // Menger curvature on the log-log curve; interior points only
    let mut best = (1, f64::NEG_INFINITY);
    for i in 1..valid.len() - 1 {
        let xy = |p: &LCurvePoint| {
            (
                p.misfit.max(1e-300).log10(),
                p.p_norm.max(1e-300).log10(),
            )
        };
        let (xa, ya) = xy(&valid[i - 1]);
        let (xb, yb) = xy(&valid[i]);
        let (xc, yc) = xy(&valid[i + 1]);
        let area2 = ((xb - xa) * (yc - ya) - (xc - xa) * (yb - ya)).abs();
        let ab = ((xb - xa).powi(2) + (yb - ya).powi(2)).sqrt();
        let bc = ((xc - xb).powi(2) + (yc - yb).powi(2)).sqrt();
        let ca = ((xc - xa).powi(2) + (yc - ya).powi(2)).sqrt();
        let denom = ab * bc * ca;
        let curvature = if denom > 0.0 { 2.0 * area2 / denom } else { 0.0 };
        if curvature > best.1 {
            best = (i, curvature);
        }
    }
    Ok((points, valid[best.0].beta))
}

/// Write the curve as CSV: `beta,misfit,p_norm,ok`.
pub fn write_lcurve_csv(points: &[LCurvePoint], chosen: f64, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "beta,misfit,p_norm,ok")?;
    for p in points {
        if p.ok {
            writeln!(f, "{:.6e},{:.9e},{:.9e},1", p.beta, p.misfit, p.p_norm)?;
        } else {
            writeln!(f, "{:.6e},missing,missing,0", p.beta)?;
        }
    }
    writeln!(f, "# chosen_beta = {chosen:.6e}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::tests::small_problem;

    #[test]
    fn rejects_short_or_unsorted_beta_lists() {
        let (problem, _) = small_problem(&[8, 8], 1.25, 0.0, false, 1e-3, 0.0, 40);
        let opts = NewtonOptions::default();
        assert!(lcurve(&problem, &[1e-3, 1e-2, 1e-1], &opts).is_err());
        assert!(lcurve(&problem, &[1e-1, 1e-2, 1e-3, 1e-4], &opts).is_err());
    }

    #[test]
    fn curve_monotone_and_limits() {
        let (mut problem, _) = small_problem(&[16, 16], 0.625, 0.1, false, 1e-3, 0.0, 41);
        problem.rho = 0.0; // linear problem: clean Tikhonov monotonicity
        let opts = NewtonOptions {
            warm_start: false,
            grad_tol_rel: 1e-9,
            schur_tol: 1e-9,
            ..NewtonOptions::default()
        };
        let betas = [1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e6];
        let (points, chosen) = lcurve(&problem, &betas, &opts).unwrap();
        assert!(points.iter().all(|p| p.ok));
        for w in points.windows(2) {
            assert!(
                w[1].misfit >= w[0].misfit * (1.0 - 1e-9),
                "misfit must be nondecreasing in beta"
            );
            assert!(
                w[1].p_norm <= w[0].p_norm * (1.0 + 1e-9),
                "p norm must be nonincreasing in beta"
            );
        }
        // beta -> infinity: p -> 0, misfit -> |d|
        let last = points.last().unwrap();
        let dnorm = {
            let m0 = problem.d0.norm_h();
            let m1 = problem.d1.norm_h();
            (m0 * m0 + m1 * m1).sqrt()
        };
        assert!(
            last.p_norm < 1e-3 * points[0].p_norm,
            "p should vanish at huge beta ({} vs {})",
            last.p_norm,
            points[0].p_norm
        );
        assert!((last.misfit - dnorm).abs() / dnorm < 1e-3);
        assert!(betas.contains(&chosen));
    }
}
