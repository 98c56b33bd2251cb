//! Experiment-grid runner: per-cell data synthesis, inversion, prediction to
//! t = 2, metric rows, CSV tables and PGM slice images.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiments::{
    add_noise, cell_seed, jaccard, kf_error, margin, rel_error, threshold_mask, MetricsRow,
    PreparedCase,
};
use crate::field::spectral::SpectralOps;
use crate::field::{ScalarField, TimeGrid};
use crate::forward::{CgOptions, DiffusionCoeff, Stepper};
use crate::inversion::{newton_solve, GaussianBasis, InverseProblem, NewtonOptions};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub beta_p: f64,
    pub newton: NewtonOptions,
    /// Experiment-grid parallelism; capped by the GLIO_THREADS variable.
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,
    pub write_slices: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            beta_p: 0.01,
            newton: NewtonOptions::default(),
            jobs: 1,
            out_dir: None,
            write_slices: false,
        }
    }
}

/// Outcome of one (c_d, eta) cell; failures are recorded, not fatal.
#[derive(Debug, Clone)]
pub enum CellResult {
    Row(MetricsRow),
    Missing { c_d: f64, eta: f64, reason: String },
}

impl CellResult {
    pub fn row(&self) -> Option<&MetricsRow> {
        match self {
            CellResult::Row(r) => Some(r),
            CellResult::Missing { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub case_id: u8,
    pub cells: Vec<CellResult>,
}

impl CaseReport {
    pub fn rows(&self) -> Vec<&MetricsRow> {
        self.cells.iter().filter_map(|c| c.row()).collect()
    }

    /// Metric rows of one fixed noise level, ordered by threshold.
    pub fn slice_eta(&self, eta: f64) -> Vec<&MetricsRow> {
        self.rows()
            .into_iter()
            .filter(|r| (r.eta - eta).abs() < 1e-12)
            .collect()
    }

    /// Metric rows of one fixed threshold, ordered by noise level.
    pub fn slice_cd(&self, c_d: f64) -> Vec<&MetricsRow> {
        self.rows()
            .into_iter()
            .filter(|r| (r.c_d - c_d).abs() < 1e-12)
            .collect()
    }

    /// Write the table: header pinned, eps in scientific notation with three
    /// decimals, JI with three decimals, eps_kf empty when absent, failed
    /// cells flagged as `missing`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "c_d,eta,eps_kf,eps_0,JI_0,eps_1,JI_1,eps_2,JI_2")?;
        for cell in &self.cells {
            match cell {
                CellResult::Row(r) => {
                    let ekf = r.eps_kf.map(fmt_c_e3).unwrap_or_default();
                    writeln!(
                        f,
                        "{:.2},{:.2},{},{},{:.3},{},{:.3},{},{:.3}",
                        r.c_d,
                        r.eta,
                        ekf,
                        fmt_c_e3(r.eps[0]),
                        r.ji[0],
                        fmt_c_e3(r.eps[1]),
                        r.ji[1],
                        fmt_c_e3(r.eps[2]),
                        r.ji[2],
                    )?;
                }
                CellResult::Missing { c_d, eta, .. } => {
                    writeln!(
                        f,
                        "{c_d:.2},{eta:.2},missing,missing,missing,missing,missing,missing,missing"
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// C-style `%.3e` (two-digit signed exponent).
pub fn fmt_c_e3(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let s = format!("{x:.3e}");
    match s.split_once('e') {
        Some((m, e)) => {
            let (sign, digits) = match e.strip_prefix('-') {
                Some(d) => ('-', d),
                None => ('+', e),
            };
            format!("{m}e{sign}{digits:0>2}")
        }
        None => s,
    }
}

/// Run one (c_d, eta) cell end to end and compute its metric row.
pub fn run_cell(prep: &PreparedCase, c_d: f64, eta: f64, opts: &RunOptions) -> Result<MetricsRow> {
    let spec = &prep.spec;
    // observation protocol: noise on the targets, then threshold, then mask
    let noisy0 = add_noise(&prep.targets.c0, eta, cell_seed(spec.seed, c_d, eta, 0))?;
    let noisy1 = add_noise(&prep.targets.c1, eta, cell_seed(spec.seed, c_d, eta, 1))?;
    let mask0 = threshold_mask(&noisy0, c_d);
    let mask1 = threshold_mask(&noisy1, c_d);
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
        opts.beta_p,
        basis,
        spec.invert_kf,
    )?;
    let state = newton_solve(&problem, &opts.newton)?;

    // prediction: continue the reconstruction to t = 2, never re-fit
    let c0_rec = problem.basis.apply(&state.p)?;
    let k_rec = problem.k_at(state.k_f);
    let ops = SpectralOps::new(problem.grid());
    let tg2 = TimeGrid::new(2 * spec.n_steps, 2.0)?;
    let stepper = Stepper::new(
        &ops,
        DiffusionCoeff::Tensor(k_rec),
        DiffusionCoeff::Zero,
        spec.rho,
        tg2,
        CgOptions::default(),
    );
    let traj = stepper.forward_solve(&c0_rec)?;
    let rec = [
        c0_rec.clamp01(),
        traj.steps[spec.n_steps].clone(),
        traj.steps[2 * spec.n_steps].clone(),
    ];
    let targets = [&prep.targets.c0, &prep.targets.c1, &prep.targets.c2];

    let mut eps = [0.0; 3];
    let mut ji = [0.0; 3];
    for i in 0..3 {
        eps[i] = rel_error(&rec[i], targets[i])?;
        ji[i] = jaccard(&margin(&rec[i], c_d), &margin(targets[i], c_d))?;
    }
    let eps_kf = if spec.invert_kf {
        Some(kf_error(state.k_f, spec.kf_true)?)
    } else {
        None
    };

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        let tag = format!("case{}_cd{:.2}_eta{:.2}", spec.case_id, c_d, eta);
        state.write_csv(&dir.join(format!("{tag}_convergence.csv")))?;
        if opts.write_slices {
            for (i, (r, t)) in rec.iter().zip(&targets).enumerate() {
                write_pgm_slice(&dir.join(format!("{tag}_t{i}_recon.pgm")), r, c_d)?;
                write_pgm_slice(&dir.join(format!("{tag}_t{i}_target.pgm")), t, c_d)?;
            }
        }
    }

    Ok(MetricsRow {
        c_d,
        eta,
        eps_kf,
        eps,
        ji,
    })
}

fn thread_cap() -> usize {
    std::env::var("GLIO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(usize::MAX)
}

/// Run the full (c_d, eta) grid of a test case and write the report table.
/// Cells run independently (up to `jobs` in parallel, capped by
/// GLIO_THREADS); individual failures are flagged, not fatal.
pub fn run_testcase(prep: &PreparedCase, opts: &RunOptions) -> Result<CaseReport> {
    let spec = &prep.spec;
    let grid_cells: Vec<(f64, f64)> = spec
        .cd_list
        .iter()
        .flat_map(|&cd| spec.eta_list.iter().map(move |&eta| (cd, eta)))
        .collect();
    let jobs = opts.jobs.clamp(1, thread_cap().min(grid_cells.len().max(1)));

    let mut results: Vec<Option<CellResult>> = vec![None; grid_cells.len()];
    if jobs <= 1 {
        for (slot, &(cd, eta)) in results.iter_mut().zip(&grid_cells) {
            *slot = Some(run_one(prep, cd, eta, opts));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<CellResult>>> =
            (0..grid_cells.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= grid_cells.len() {
                        break;
                    }
                    let (cd, eta) = grid_cells[i];
                    let out = run_one(prep, cd, eta, opts);
                    *slots[i].lock().expect("cell slot") = Some(out);
                });
            }
        });
        for (slot, m) in results.iter_mut().zip(slots) {
            *slot = m.into_inner().expect("cell slot");
        }
    }

    let report = CaseReport {
        case_id: spec.case_id,
        cells: results.into_iter().map(|r| r.expect("cell computed")).collect(),
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        report.write_csv(&dir.join(format!("case{}_metrics.csv", spec.case_id)))?;
        let mut notes = std::io::BufWriter::new(
            std::fs::File::create(dir.join(format!("case{}_NOTES.txt", spec.case_id)))?,
        );
        writeln!(notes, "{}", report_disclaimer())?;
    }
    Ok(report)
}

fn run_one(prep: &PreparedCase, cd: f64, eta: f64, opts: &RunOptions) -> CellResult {
    match run_cell(prep, cd, eta, opts) {
        Ok(row) => CellResult::Row(row),
        Err(e) => {
            log::warn!("cell (c_d={cd}, eta={eta}) failed: {e}");
            CellResult::Missing {
                c_d: cd,
                eta,
                reason: e.to_string(),
            }
        }
    }
}

/// Stated loudly wherever tables are emitted.
pub fn report_disclaimer() -> &'static str {
    "These tables are computed on synthetic anatomy with synthetic targets. \
     They reproduce trends and properties of the reference protocol, not its \
     absolute values: the original atlas/DTI inputs and exact targets are not \
     available, so rows are not comparable number-for-number."
}

/// 8-bit PGM of a field slice (mid-z plane in 3D) with linear [0, 1] gray
/// mapping and a white contour where the field crosses the threshold.
pub fn write_pgm_slice(path: &Path, c: &ScalarField, c_d: f64) -> Result<()> {
    let grid = c.grid();
    let (nx, ny) = (grid.dims()[0], grid.dims()[1]);
    let zoff = if grid.dim() == 3 {
        (grid.dims()[2] / 2) * grid.stride(2)
    } else {
        0
    };
    let at = |i: usize, j: usize| c.values()[zoff + i + nx * j];
    let mut img = vec![0u8; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let v = at(i, j).clamp(0.0, 1.0);
            img[j * nx + i] = (v * 255.0).round() as u8;
        }
    }
    // contour overlay: 4-neighborhood sign change of (c - c_d)
    if c_d > 0.0 {
        for j in 0..ny {
            for i in 0..nx {
                let v = at(i, j) - c_d;
                let neighbors = [
                    at((i + 1) % nx, j) - c_d,
                    at((i + nx - 1) % nx, j) - c_d,
                    at(i, (j + 1) % ny) - c_d,
                    at(i, (j + ny - 1) % ny) - c_d,
                ];
                if neighbors.iter().any(|&n| (v >= 0.0) != (n >= 0.0)) {
                    img[j * nx + i] = 255;
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{nx} {ny}\n255\n")?;
    f.write_all(&img)?;
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidParam("spearman needs two equal series, length >= 2".into()));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(x);
    let ry = rank(y);
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        // constant series: no ordering information, treat as uncorrelated
        return Ok(0.0);
    }
    Ok(num / (dx * dy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{Focus, TestCaseSpec};

    fn tiny_spec() -> TestCaseSpec {
        use crate::experiments::DOMAIN_EXTENT;
        let mut spec = TestCaseSpec::preset(2, 2).unwrap();
        spec.grid_dims = vec![24, 24];
        spec.spacing = DOMAIN_EXTENT / 24.0;
        spec.foci = vec![Focus {
            center: vec![0.5 * DOMAIN_EXTENT, 0.5 * DOMAIN_EXTENT],
            amplitude: 1.0,
            width: 0.09 * DOMAIN_EXTENT,
        }];
        spec.n_steps = 4;
        spec.cd_list = vec![0.2];
        spec.eta_list = vec![0.05];
        spec
    }

    #[test]
    fn fmt_matches_c_printf() {
        assert_eq!(fmt_c_e3(0.057), "5.700e-02");
        assert_eq!(fmt_c_e3(1.3e-2), "1.300e-02");
        assert_eq!(fmt_c_e3(0.794), "7.940e-01");
        assert_eq!(fmt_c_e3(123.456), "1.235e+02");
        assert_eq!(fmt_c_e3(0.0), "0.000e+00");
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn run_cell_deterministic_and_in_range() {
        let spec = tiny_spec();
        let prep = crate::experiments::prepare_case(&spec).unwrap();
        let opts = RunOptions {
            beta_p: 0.01,
            newton: crate::inversion::NewtonOptions {
                max_newton: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let r1 = run_cell(&prep, 0.2, 0.05, &opts).unwrap();
        let r2 = run_cell(&prep, 0.2, 0.05, &opts).unwrap();
        assert!(r1.in_range(), "{r1:?}");
        assert_eq!(r1.eps, r2.eps);
        assert_eq!(r1.ji, r2.ji);
        assert_eq!(r1.eps_kf, r2.eps_kf);
    }

    #[test]
    fn report_csv_byte_identical() {
        let spec = tiny_spec();
        let prep = crate::experiments::prepare_case(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            beta_p: 0.01,
            newton: crate::inversion::NewtonOptions {
                max_newton: 3,
                ..Default::default()
            },
            out_dir: Some(dir.path().join("a")),
            ..Default::default()
        };
        let rep1 = run_testcase(&prep, &opts).unwrap();
        assert_eq!(rep1.cells.len(), 1);
        let opts2 = RunOptions {
            out_dir: Some(dir.path().join("b")),
            ..opts.clone()
        };
        run_testcase(&prep, &opts2).unwrap();
        let a = std::fs::read(dir.path().join("a/case2_metrics.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b/case2_metrics.csv")).unwrap();
        assert_eq!(a, b, "report must be byte-identical for identical inputs");
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("c_d,eta,eps_kf,eps_0,JI_0,eps_1,JI_1,eps_2,JI_2\n"));
    }

    #[test]
    fn pgm_slice_shape() {
        let grid = crate::field::Grid::regular(&[8, 6], 1.0).unwrap();
        let c = ScalarField::from_fn(&grid, |x| (x[0] / 8.0).clamp(0.0, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        write_pgm_slice(&path, &c, 0.5).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n8 6\n255\n";
        assert!(bytes.starts_with(header));
        assert_eq!(bytes.len(), header.len() + 48);
    }
}
