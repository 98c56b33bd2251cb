//! The five batch commands. All diagnostics go to stderr; data goes to
//! stdout or files under the output directory.

use std::io::Write;
use std::path::Path;

use glioma_core::anatomy::TensorMode;
use glioma_core::error::Result;
use glioma_core::experiments::{
    self, prepare_case, run_testcase, PreparedCase, RunOptions, TestCaseSpec,
};
use glioma_core::field::glf1::{save_volume, Volume};
use glioma_core::field::spectral::SpectralOps;
use glioma_core::field::TimeGrid;
use glioma_core::forward::{export_trajectory, CgOptions, DiffusionCoeff, Stepper};
use glioma_core::inversion::{
    lcurve, newton_solve, write_lcurve_csv, GaussianBasis, InverseProblem, NewtonOptions,
    NewtonStatus,
};

use crate::config::RunConfig;

/// Build the test-case spec with the config's overrides applied.
pub fn spec_from_config(cfg: &RunConfig) -> Result<TestCaseSpec> {
    let dimension = cfg.grid.as_ref().map(|g| g.len()).unwrap_or(3);
    let mut spec = TestCaseSpec::preset(cfg.case, dimension)?;
    if let Some(grid) = &cfg.grid {
        // resolution changes the voxel count, not the domain extent
        spec.grid_dims = grid.clone();
        spec.spacing = experiments::DOMAIN_EXTENT / grid[0] as f64;
        spec.dimension = grid.len();
        if spec.dimension == 2 {
            for f in &mut spec.foci {
                f.center.truncate(2);
            }
        }
    }
    spec.n_steps = cfg.nt;
    spec.rho = cfg.rho;
    spec.kf_true = cfg.kf;
    spec.seed = cfg.seed;
    if let Some(mode) = cfg.mode {
        spec.tensor_mode = mode;
    }
    if let Some(cd) = &cfg.cd {
        spec.cd_list = cd.clone();
    }
    if let Some(eta) = &cfg.eta {
        spec.eta_list = eta.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn prepared(cfg: &RunConfig) -> Result<PreparedCase> {
    let spec = spec_from_config(cfg)?;
    let mut prep = prepare_case(&spec)?;
    prep.params.k_g = cfg.kg;
    prep.params.k_w = cfg.kw;
    prep.params.penalty_eps = cfg.penalty_eps;
    prep.params.validate()?;
    Ok(prep)
}

fn newton_options(cfg: &RunConfig) -> NewtonOptions {
    NewtonOptions {
        hessian_mode: cfg.hessian,
        ..NewtonOptions::default()
    }
}

/// Write the synthetic anatomy and target volumes.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    save_volume(&dir.join("tissue.glf1"), &Volume::from_scalar(&prep.tissue.to_field()))?;
    save_volume(&dir.join("dti.glf1"), &Volume::from_tensor(prep.dti.tensors()))?;
    save_volume(&dir.join("tensor.glf1"), &Volume::from_tensor(&prep.tensor))?;
    save_volume(&dir.join("target_t0.glf1"), &Volume::from_scalar(&prep.targets.c0))?;
    save_volume(&dir.join("target_t1.glf1"), &Volume::from_scalar(&prep.targets.c1))?;
    save_volume(&dir.join("target_t2.glf1"), &Volume::from_scalar(&prep.targets.c2))?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
    writeln!(manifest, "# synthetic anatomy and targets")?;
    writeln!(manifest, "case = {}", prep.spec.case_id)?;
    writeln!(manifest, "seed = {}", prep.spec.seed)?;
    writeln!(manifest, "kf_true = {}", prep.spec.kf_true)?;
    writeln!(
        manifest,
        "grid = {}",
        prep.spec
            .grid_dims
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )?;
    writeln!(manifest, "spacing = {}", prep.spec.spacing)?;
    for name in ["tissue", "dti", "tensor", "target_t0", "target_t1", "target_t2"] {
        writeln!(manifest, "file = {name}.glf1")?;
    }
    eprintln!("synth: wrote anatomy and targets to {}", dir.display());
    Ok(())
}

/// Run the forward model and export the trajectory with a mass/extent log.
pub fn cmd_forward(cfg: &RunConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let grid = prep.spec.grid()?;
    let ops = SpectralOps::new(&grid);
    let k = glioma_core::anatomy::assemble_k(&prep.tissue, &prep.tensor, &prep.params)?;
    let stepper = Stepper::new(
        &ops,
        DiffusionCoeff::Tensor(k),
        DiffusionCoeff::Zero,
        prep.spec.rho,
        TimeGrid::new(prep.spec.n_steps, 1.0)?,
        CgOptions::default(),
    );
    let traj = stepper.forward_solve(&prep.targets.c0)?;
    let dir = &cfg.out;
    export_trajectory(&traj, dir, "forward")?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("forward_mass.csv"))?);
    writeln!(log, "step,time,mass,extent_voxels")?;
    for (n, s) in traj.steps.iter().enumerate() {
        let extent = s.values().iter().filter(|&&v| v >= 0.01).count();
        writeln!(log, "{n},{:.6},{:.9e},{extent}", traj.tg.time(n), s.mass())?;
    }
    eprintln!("forward: wrote trajectory to {}", dir.display());
    Ok(())
}

/// Invert one cell (the first threshold/noise pair) and write the
/// reconstruction volumes plus the convergence log.
pub fn cmd_invert(cfg: &RunConfig) -> Result<i32> {
    let prep = prepared(cfg)?;
    let spec = &prep.spec;
    let c_d = spec.cd_list[0];
    let eta = spec.eta_list[0];
    let noisy0 = experiments::add_noise(
        &prep.targets.c0,
        eta,
        experiments::cell_seed(spec.seed, c_d, eta, 0),
    )?;
    let noisy1 = experiments::add_noise(
        &prep.targets.c1,
        eta,
        experiments::cell_seed(spec.seed, c_d, eta, 1),
    )?;
    let mask0 = experiments::threshold_mask(&noisy0, c_d);
    let mask1 = experiments::threshold_mask(&noisy1, c_d);
    let d0 = mask0.apply(&noisy0);
    let d1 = mask1.apply(&noisy1);
    let basis = GaussianBasis::lattice_for_mask(&mask0, 3)?;
    let problem = InverseProblem::new(
        &prep.tissue,
        &prep.tensor,
        &prep.params,
        spec.rho,
        prep.tg,
        d0,
        d1,
        mask0,
        mask1,
        cfg.beta,
        basis,
        spec.invert_kf,
    )?;
    let state = newton_solve(&problem, &newton_options(cfg))?;

    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    state.write_csv(&dir.join("convergence.csv"))?;
    let c0_rec = problem.basis.apply(&state.p)?;
    let grid = spec.grid()?;
    let ops = SpectralOps::new(&grid);
    let stepper = Stepper::new(
        &ops,
        DiffusionCoeff::Tensor(problem.k_at(state.k_f)),
        DiffusionCoeff::Zero,
        spec.rho,
        TimeGrid::new(2 * spec.n_steps, 2.0)?,
        CgOptions::default(),
    );
    let traj = stepper.forward_solve(&c0_rec)?;
    save_volume(&dir.join("recon_t0.glf1"), &Volume::from_scalar(&c0_rec.clamp01()))?;
    save_volume(
        &dir.join("recon_t1.glf1"),
        &Volume::from_scalar(&traj.steps[spec.n_steps]),
    )?;
    save_volume(
        &dir.join("recon_t2.glf1"),
        &Volume::from_scalar(&traj.steps[2 * spec.n_steps]),
    )?;

    let eps0 = experiments::rel_error(&c0_rec.clamp01(), &prep.targets.c0)?;
    println!("status = {:?}", state.status);
    println!("k_f = {:.6e}", state.k_f);
    println!("eps_0 = {:.6e}", eps0);
    println!("newton_iterations = {}", state.phase2_steps);
    match state.status {
        NewtonStatus::ConvergedGrad => Ok(0),
        NewtonStatus::LineSearchFailed | NewtonStatus::MaxIterations => {
            eprintln!("invert: did not converge ({:?})", state.status);
            Ok(3)
        }
    }
}

/// Regularization sweep on one cell; prints the chosen weight.
pub fn cmd_lcurve(cfg: &RunConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    let spec = &prep.spec;
    let c_d = spec.cd_list[0];
    let eta = spec.eta_list[0];
    let noisy0 = experiments::add_noise(
        &prep.targets.c0,
        eta,
        experiments::cell_seed(spec.seed, c_d, eta, 0),
    )?;
    let noisy1 = experiments::add_noise(
        &prep.targets.c1,
        eta,
        experiments::cell_seed(spec.seed, c_d, eta, 1),
    )?;
    let mask0 = experiments::threshold_mask(&noisy0, c_d);
    let mask1 = experiments::threshold_mask(&noisy1, c_d);
    let d0 = mask0.apply(&noisy0);
    let d1 = mask1.apply(&noisy1);
    let basis = GaussianBasis::lattice_for_mask(&mask0, 3)?;
    let problem = InverseProblem::new(
        &prep.tissue,
        &prep.tensor,
        &prep.params,
        spec.rho,
        prep.tg,
        d0,
        d1,
        mask0,
        mask1,
        cfg.beta,
        basis,
        spec.invert_kf,
    )?;
    let (points, chosen) = lcurve(&problem, &cfg.betas, &newton_options(cfg))?;
    std::fs::create_dir_all(&cfg.out)?;
    write_lcurve_csv(&points, chosen, &cfg.out.join("lcurve.csv"))?;
    println!("chosen_beta = {chosen:.6e}");
    Ok(())
}

/// Full experiment grid of the selected case.
pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let prep = prepared(cfg)?;
    eprintln!("{}", experiments::report_disclaimer());
    let opts = RunOptions {
        beta_p: cfg.beta,
        newton: newton_options(cfg),
        jobs: cfg.jobs,
        out_dir: Some(cfg.out.clone()),
        write_slices: true,
    };
    let report = run_testcase(&prep, &opts)?;
    let missing = report.cells.iter().filter(|c| c.row().is_none()).count();
    eprintln!(
        "report: {} cells ({missing} missing) written to {}",
        report.cells.len(),
        cfg.out.display()
    );
    Ok(())
}

/// Check a path is writable early, so I/O errors surface before compute.
pub fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}
