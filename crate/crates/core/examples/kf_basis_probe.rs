//! Does an exactly-representable target remove the anisotropy bias?
//! Diagnostic tool.

use glioma_core::experiments::{self, TestCaseSpec};
use glioma_core::inversion::{newton_solve, GaussianBasis, InverseProblem, NewtonOptions};

fn main() {
    let spec = TestCaseSpec::preset(2, 2).unwrap();
    let prep = experiments::prepare_case(&spec).unwrap();
    let (c_d, eta) = (0.2, 0.0);
    let noisy0 = experiments::add_noise(&prep.targets.c0, eta, 1).unwrap();
    let noisy1 = experiments::add_noise(&prep.targets.c1, eta, 2).unwrap();
    let mask0 = experiments::threshold_mask(&noisy0, c_d);
    let mask1 = experiments::threshold_mask(&noisy1, c_d);
    let d0 = mask0.apply(&noisy0);
    let d1 = mask1.apply(&noisy1);
    let grid = spec.grid().unwrap();
    // basis containing the exact target function: one Gaussian at the focus
    let f = &spec.foci[0];
    let exact = GaussianBasis::new(&grid, vec![f.center.clone()], f.width).unwrap();
    // and the standard lattice for comparison
    let lattice = GaussianBasis::lattice_for_mask(&mask0, 3).unwrap();
    for (name, basis) in [("exact-1dof", exact), ("lattice-9", lattice)] {
        let problem = InverseProblem::new(
            &prep.tissue, &prep.tensor, &prep.params, spec.rho, prep.tg,
            d0.clone(), d1.clone(), mask0.clone(), mask1.clone(),
            1e-4, basis, true,
        ).unwrap();
        let state = newton_solve(&problem, &NewtonOptions::default()).unwrap();
        let c0r = problem.basis.apply(&state.p).unwrap().clamp01();
        let eps0 = experiments::rel_error(&c0r, &prep.targets.c0).unwrap();
        println!(
            "{name}: kf = {:.4} (true {}), eps0 = {:.4}, p = {:?}",
            state.k_f, spec.kf_true, eps0,
            state.p.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
    }
}
