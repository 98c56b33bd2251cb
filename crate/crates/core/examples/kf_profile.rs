//! Profile of the optimal objective over pinned anisotropy values, for the
//! standard 2D cell. Diagnostic tool.

use glioma_core::experiments::{self, TestCaseSpec};
use glioma_core::inversion::{newton_solve, GaussianBasis, InverseProblem, NewtonOptions};

fn main() {
    let mut spec = TestCaseSpec::preset(2, 2).unwrap();
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 {
        spec.kf_true = args[1].parse().unwrap();
    }
    let prep = experiments::prepare_case(&spec).unwrap();
    let (c_d, eta) = (0.2, 0.05);
    let noisy0 = experiments::add_noise(&prep.targets.c0, eta, experiments::cell_seed(spec.seed, c_d, eta, 0)).unwrap();
    let noisy1 = experiments::add_noise(&prep.targets.c1, eta, experiments::cell_seed(spec.seed, c_d, eta, 1)).unwrap();
    let mask0 = experiments::threshold_mask(&noisy0, c_d);
    let mask1 = experiments::threshold_mask(&noisy1, c_d);
    let d0 = mask0.apply(&noisy0);
    let d1 = mask1.apply(&noisy1);
    let basis = GaussianBasis::lattice_for_mask(&mask0, 3).unwrap();
    println!("kf_true = {}, n_p = {}", spec.kf_true, basis.len());
    for kf in [0.05, 0.08, 0.1, 0.12, 0.15, 0.2, 0.25, 0.3] {
        let mut params = prep.params;
        params.k_f = kf;
        let problem = InverseProblem::new(
            &prep.tissue, &prep.tensor, &params, spec.rho, prep.tg,
            d0.clone(), d1.clone(), mask0.clone(), mask1.clone(),
            0.01, basis.clone(), false,
        ).unwrap();
        let state = newton_solve(&problem, &NewtonOptions::default()).unwrap();
        let stepper = problem.stepper(kf, false, problem.cg_forward);
        let (j, traj) = problem.objective_with_traj(&stepper, &state.p, kf).unwrap();
        let (m0, m1) = problem.misfit_norms(&state.p, &traj).unwrap();
        println!("kf = {kf:.3}: J = {j:.8e}  misfit0 = {m0:.4e}  misfit1 = {m1:.4e} ({:?})", state.status);
    }
}
