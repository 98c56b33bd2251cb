//! Recovered anisotropy versus regularization weight on the standard cell.
//! Diagnostic tool.

use glioma_core::experiments::{self, TestCaseSpec};
use glioma_core::inversion::{newton_solve, GaussianBasis, InverseProblem, NewtonOptions};

fn main() {
    let spec = TestCaseSpec::preset(2, 2).unwrap();
    let prep = experiments::prepare_case(&spec).unwrap();
    let args: Vec<String> = std::env::args().collect();
    let c_d: f64 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(0.2);
    let eta: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(0.05);
    println!("c_d = {c_d}, eta = {eta}");
    let noisy0 = experiments::add_noise(&prep.targets.c0, eta, experiments::cell_seed(spec.seed, c_d, eta, 0)).unwrap();
    let noisy1 = experiments::add_noise(&prep.targets.c1, eta, experiments::cell_seed(spec.seed, c_d, eta, 1)).unwrap();
    let mask0 = experiments::threshold_mask(&noisy0, c_d);
    let mask1 = experiments::threshold_mask(&noisy1, c_d);
    let d0 = mask0.apply(&noisy0);
    let d1 = mask1.apply(&noisy1);
    let basis = GaussianBasis::lattice_for_mask(&mask0, 3).unwrap();
    for beta in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
        let problem = InverseProblem::new(
            &prep.tissue, &prep.tensor, &prep.params, spec.rho, prep.tg,
            d0.clone(), d1.clone(), mask0.clone(), mask1.clone(),
            beta, basis.clone(), true,
        ).unwrap();
        let state = newton_solve(&problem, &NewtonOptions::default()).unwrap();
        let c0r = problem.basis.apply(&state.p).unwrap().clamp01();
        let eps0 = experiments::rel_error(&c0r, &prep.targets.c0).unwrap();
        let pn = state.p.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "beta = {beta:.1e}: kf = {:.4}, eps_kf = {:.3}, eps0 = {:.4}, |p| = {pn:.3}, iters = {}, {:?}",
            state.k_f,
            (state.k_f - spec.kf_true).abs() / spec.kf_true,
            eps0,
            state.phase2_steps,
            state.status
        );
    }
}
