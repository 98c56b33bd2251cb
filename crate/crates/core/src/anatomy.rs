//! Tissue maps, DTI tensor processing and assembly of the anisotropic
//! diffusion coefficient, including the fictitious-domain penalty outside
//! the brain.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField, TensorField};

/// Tissue classes on the voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    White,
    Grey,
    Other,
}

impl Tissue {
    pub fn code(self) -> f64 {
        match self {
            Tissue::Other => 0.0,
            Tissue::Grey => 1.0,
            Tissue::White => 2.0,
        }
    }

    pub fn from_code(v: f64) -> Result<Self> {
        match v.round() as i64 {
            0 => Ok(Tissue::Other),
            1 => Ok(Tissue::Grey),
            2 => Ok(Tissue::White),
            other => Err(Error::BadVolume(format!("unknown tissue code {other}"))),
        }
    }
}

/// Per-voxel tissue labels. The brain domain is the set of non-Other voxels.
#[derive(Debug, Clone)]
pub struct TissueMap {
    grid: Grid,
    labels: Vec<Tissue>,
}

impl TissueMap {
    pub fn new(grid: &Grid, labels: Vec<Tissue>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidParam("tissue label count != grid size".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            labels,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[Tissue] {
        &self.labels
    }

    pub fn label(&self, voxel: usize) -> Tissue {
        self.labels[voxel]
    }

    /// Boolean brain mask (true on non-Other voxels).
    pub fn brain_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&t| t != Tissue::Other).collect()
    }

    pub fn count(&self, t: Tissue) -> usize {
        self.labels.iter().filter(|&&l| l == t).count()
    }

    /// Encode labels as a scalar field (0 = other, 1 = grey, 2 = white).
    pub fn to_field(&self) -> ScalarField {
        ScalarField::from_values(&self.grid, self.labels.iter().map(|t| t.code()).collect())
            .expect("label count matches grid")
    }

    pub fn from_field(f: &ScalarField) -> Result<Self> {
        let labels = f
            .values()
            .iter()
            .map(|&v| Tissue::from_code(v))
            .collect::<Result<Vec<_>>>()?;
        TissueMap::new(f.grid(), labels)
    }
}

/// Water-diffusion tensors from imaging; symmetric PSD per voxel.
#[derive(Debug, Clone)]
pub struct DtiVolume {
    tensors: TensorField,
}

impl DtiVolume {
    /// Validates per-voxel positive semi-definiteness.
    pub fn new(tensors: TensorField) -> Result<Self> {
        let d = tensors.grid().dim();
        for voxel in 0..tensors.grid().len() {
            let eigs = sym_eigenvalues(&tensors.voxel_matrix(voxel), d);
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-10 {
                return Err(Error::NotPsd { voxel, min_eig: min });
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &TensorField {
        &self.tensors
    }

    pub fn grid(&self) -> &Grid {
        self.tensors.grid()
    }
}

/// How the tumor diffusion tensor is derived from DTI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorMode {
    /// Fractional-anisotropy weighting of the full tensor.
    FullFa,
    /// Rank-one tensor from the dominant eigenpair.
    Principal,
}

/// Scalar diffusion parameters.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionParams {
    /// Grey-matter rate (nondimensional).
    pub k_g: f64,
    /// White-matter rate; five-fold the grey rate at the default operating point.
    pub k_w: f64,
    /// Anisotropy scale multiplying the DTI-derived tensor.
    pub k_f: f64,
    pub tensor_mode: TensorMode,
    /// Penalty factor for the fictitious domain outside the brain.
    pub penalty_eps: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            k_g: 0.02,
            k_w: 0.1,
            k_f: 0.0,
            tensor_mode: TensorMode::FullFa,
            penalty_eps: 1e-3,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_g > 0.0) || self.k_w < self.k_g {
            return Err(Error::InvalidParam(format!(
                "diffusion rates need k_w >= k_g > 0, got k_g={}, k_w={}",
                self.k_g, self.k_w
            )));
        }
        if self.k_f < 0.0 {
            return Err(Error::InvalidParam(format!("k_f = {} must be >= 0", self.k_f)));
        }
        if !(self.penalty_eps > 0.0 && self.penalty_eps <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "penalty_eps = {} must be in (0, 1]",
                self.penalty_eps
            )));
        }
        Ok(())
    }
}

/// Eigenvalues of a dense symmetric d x d matrix (row-major), unordered.
pub fn sym_eigenvalues(m: &[f64], d: usize) -> Vec<f64> {
    match d {
        2 => {
            let mat = Matrix2::new(m[0], m[1], m[2], m[3]);
            mat.symmetric_eigen().eigenvalues.iter().cloned().collect()
        }
        3 => {
            let mat = Matrix3::new(m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]);
            mat.symmetric_eigen().eigenvalues.iter().cloned().collect()
        }
        _ => unreachable!("dimension is 2 or 3"),
    }
}

/// Eigenpairs (value, unit vector) of a dense symmetric matrix, unordered.
fn sym_eigenpairs(m: &[f64], d: usize) -> Vec<(f64, Vec<f64>)> {
    match d {
        2 => {
            let mat = Matrix2::new(m[0], m[1], m[2], m[3]);
            let e = mat.symmetric_eigen();
            (0..2)
                .map(|j| {
                    let v: Vector2<f64> = e.eigenvectors.column(j).into();
                    (e.eigenvalues[j], vec![v[0], v[1]])
                })
                .collect()
        }
        3 => {
            let mat = Matrix3::new(m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]);
            let e = mat.symmetric_eigen();
            (0..3)
                .map(|j| {
                    let v: Vector3<f64> = e.eigenvectors.column(j).into();
                    (e.eigenvalues[j], vec![v[0], v[1], v[2]])
                })
                .collect()
        }
        _ => unreachable!("dimension is 2 or 3"),
    }
}

/// Fractional anisotropy of a set of 2 or 3 nonnegative eigenvalues.
///
/// Returns 0 for the all-zero tensor. In 2D the three-eigenvalue formula
/// reduces to |l1 - l2| / sqrt(l1^2 + l2^2), which is 0 for isotropic and 1
/// for rank-one tensors.
pub fn fractional_anisotropy(eigs: &[f64]) -> Result<f64> {
    for &l in eigs {
        if l < -1e-10 {
            return Err(Error::InvalidParam(format!(
                "fractional_anisotropy: negative eigenvalue {l}"
            )));
        }
    }
    let sq: f64 = eigs.iter().map(|l| l * l).sum();
    if sq == 0.0 {
        return Ok(0.0);
    }
    let fa = match eigs.len() {
        2 => {
            let diff = (eigs[0] - eigs[1]).abs();
            diff / sq.sqrt()
        }
        3 => {
            let (a, b, c) = (eigs[0], eigs[1], eigs[2]);
            let num = (a - b).powi(2) + (b - c).powi(2) + (c - a).powi(2);
            (0.5 * num / sq).sqrt()
        }
        n => {
            return Err(Error::InvalidParam(format!(
                "fractional_anisotropy expects 2 or 3 eigenvalues, got {n}"
            )))
        }
    };
    Ok(fa.clamp(0.0, 1.0))
}

/// FA-weighted tumor diffusion tensor: per voxel FA times the DTI tensor.
pub fn build_tensor_full(dti: &DtiVolume) -> Result<TensorField> {
    let grid = dti.grid().clone();
    let d = grid.dim();
    let mut out = TensorField::zeros(&grid);
    for voxel in 0..grid.len() {
        let m = dti.tensors().voxel_matrix(voxel);
        let mut eigs = sym_eigenvalues(&m, d);
        for e in &mut eigs {
            if *e < -1e-10 {
                return Err(Error::NotPsd { voxel, min_eig: *e });
            }
            *e = e.max(0.0);
        }
        let fa = fractional_anisotropy(&eigs)?;
        let scaled: Vec<f64> = m.iter().map(|&v| fa * v).collect();
        out.set_voxel(voxel, &scaled);
    }
    Ok(out)
}

/// Rank-one tumor diffusion tensor from the dominant eigenpair.
///
/// Eigenvalue ties are broken by the smallest axis index of the
/// eigenvector's largest absolute component.
pub fn build_tensor_principal(dti: &DtiVolume) -> Result<TensorField> {
    let grid = dti.grid().clone();
    let d = grid.dim();
    let mut out = TensorField::zeros(&grid);
    for voxel in 0..grid.len() {
        let m = dti.tensors().voxel_matrix(voxel);
        let pairs = sym_eigenpairs(&m, d);
        let scale = pairs.iter().fold(0.0f64, |a, (l, _)| a.max(l.abs()));
        let min = pairs.iter().fold(f64::INFINITY, |a, (l, _)| a.min(*l));
        if min < -1e-10 {
            return Err(Error::NotPsd { voxel, min_eig: min });
        }
        let max = pairs.iter().fold(f64::NEG_INFINITY, |a, (l, _)| a.max(*l));
        let tol = 1e-12 * scale.max(1e-300);
        // dominant axis of each candidate eigenvector; first strict maximum
        let axis_of = |v: &[f64]| -> usize {
            let mut axis = 0;
            let mut best = -1.0;
            for (a, &c) in v.iter().enumerate() {
                if c.abs() > best {
                    best = c.abs();
                    axis = a;
                }
            }
            axis
        };
        let mut chosen: Option<(usize, &(f64, Vec<f64>))> = None;
        for p in &pairs {
            if p.0 >= max - tol {
                let axis = axis_of(&p.1);
                match chosen {
                    Some((a, _)) if a <= axis => {}
                    _ => chosen = Some((axis, p)),
                }
            }
        }
        let (_, (l1, e1)) = chosen.expect("at least one eigenpair");
        let l1 = l1.max(0.0);
        let mut sym = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                sym[i * d + j] = l1 * e1[i] * e1[j];
            }
        }
        out.set_voxel(voxel, &sym);
    }
    Ok(out)
}

/// Derive the tumor diffusion tensor under the requested mode.
pub fn build_tensor(dti: &DtiVolume, mode: TensorMode) -> Result<TensorField> {
    match mode {
        TensorMode::FullFa => build_tensor_full(dti),
        TensorMode::Principal => build_tensor_principal(dti),
    }
}

/// Isotropic part of the diffusion coefficient including the penalty region:
/// k_w or k_g times I inside the brain, penalty_eps * k_g * I outside.
pub fn assemble_k_base(tissue: &TissueMap, params: &DiffusionParams) -> Result<TensorField> {
    params.validate()?;
    if tissue.count(Tissue::White) + tissue.count(Tissue::Grey) == 0 {
        return Err(Error::InvalidParam("zero-measure brain: no tissue voxels".into()));
    }
    let grid = tissue.grid();
    let coef = ScalarField::from_values(
        grid,
        tissue
            .labels()
            .iter()
            .map(|t| match t {
                Tissue::White => params.k_w,
                Tissue::Grey => params.k_g,
                Tissue::Other => params.penalty_eps * params.k_g,
            })
            .collect(),
    )?;
    Ok(TensorField::isotropic(&coef))
}

/// Anisotropic tensor restricted to the brain domain (zero outside), so the
/// penalty region stays isotropic and independent of k_f.
pub fn masked_tensor(tensor: &TensorField, tissue: &TissueMap) -> Result<TensorField> {
    if tensor.grid() != tissue.grid() {
        return Err(Error::GridMismatch("masked_tensor".into()));
    }
    let mut out = tensor.clone();
    let mask = tissue.brain_mask();
    for s in 0..out.n_components() {
        for (v, &keep) in out.component_mut(s).iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Full diffusion coefficient K = k0(x) I + k_f T(x) inside the brain,
/// penalty_eps * k_g * I outside.
pub fn assemble_k(tissue: &TissueMap, tensor: &TensorField, params: &DiffusionParams) -> Result<TensorField> {
    if tensor.grid() != tissue.grid() {
        return Err(Error::GridMismatch("assemble_k".into()));
    }
    let mut k = assemble_k_base(tissue, params)?;
    let te = masked_tensor(tensor, tissue)?;
    k.axpy(params.k_f, &te);
    Ok(k)
}

/// Fiber orientation model for the synthetic anatomy.
#[derive(Debug, Clone)]
pub enum FiberModel {
    /// Constant direction everywhere.
    Uniform(Vec<f64>),
    /// Tangential to circles around the domain center (xy-plane in 3D).
    Circumferential,
}

/// Geometry of the synthetic brain: grey ellipsoidal shell around a white
/// core, embedded in a non-tissue background.
#[derive(Debug, Clone)]
pub struct SynthAnatomySpec {
    pub grid: Grid,
    /// Outer ellipsoid semi-axes (length units). Defaults to 0.42 of the
    /// extent per axis.
    pub outer_semiaxes: Vec<f64>,
    /// Grey shell thickness; zero makes the whole ellipsoid white.
    pub shell_thickness: f64,
    pub fiber: FiberModel,
    /// Isotropic floor of the synthetic DTI tensors (transverse eigenvalue).
    pub dti_floor: f64,
    /// Standard deviation (radians) of fiber direction jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl SynthAnatomySpec {
    pub fn default_for(grid: &Grid) -> Self {
        let outer: Vec<f64> = (0..grid.dim()).map(|a| 0.42 * grid.extent(a)).collect();
        let min_extent = (0..grid.dim()).map(|a| grid.extent(a)).fold(f64::INFINITY, f64::min);
        Self {
            grid: grid.clone(),
            outer_semiaxes: outer,
            // grey shell about a tenth of the domain across, at any scale
            shell_thickness: 0.09375 * min_extent,
            fiber: FiberModel::Circumferential,
            dti_floor: 0.12,
            jitter: 0.0,
            seed: 0,
        }
    }
}

/// Deterministic synthetic brain: tissue map plus DTI tensors aligned with
/// the prescribed fiber field (rank-one plus isotropic floor).
pub fn synth_anatomy(spec: &SynthAnatomySpec) -> Result<(TissueMap, DtiVolume)> {
    let grid = &spec.grid;
    let d = grid.dim();
    if spec.outer_semiaxes.len() != d {
        return Err(Error::InvalidParam("outer_semiaxes length != grid dimension".into()));
    }
    for &a in &spec.outer_semiaxes {
        if !(a > 0.0) {
            return Err(Error::InvalidParam(format!("degenerate ellipsoid semi-axis {a}")));
        }
    }
    if spec.shell_thickness < 0.0 {
        return Err(Error::InvalidParam("shell thickness must be >= 0".into()));
    }
    let inner: Vec<f64> = spec
        .outer_semiaxes
        .iter()
        .map(|a| a - spec.shell_thickness)
        .collect();
    if inner.iter().any(|&a| a <= 0.0) {
        return Err(Error::InvalidParam(
            "degenerate ellipsoid: shell thicker than semi-axis".into(),
        ));
    }
    if !(spec.dti_floor > 0.0 && spec.dti_floor < 1.0) {
        return Err(Error::InvalidParam("dti_floor must be in (0, 1)".into()));
    }
    let center: Vec<f64> = (0..d)
        .map(|a| grid.origin()[a] + 0.5 * grid.extent(a))
        .collect();

    let ellipse = |x: &[f64], semi: &[f64]| -> f64 {
        x.iter()
            .zip(center.iter())
            .zip(semi.iter())
            .map(|((xi, ci), ai)| ((xi - ci) / ai).powi(2))
            .sum()
    };

    let mut labels = Vec::with_capacity(grid.len());
    for lin in 0..grid.len() {
        let x = grid.coord(lin);
        let q_out = ellipse(&x, &spec.outer_semiaxes);
        let label = if q_out > 1.0 {
            Tissue::Other
        } else if ellipse(&x, &inner) <= 1.0 {
            Tissue::White
        } else {
            Tissue::Grey
        };
        labels.push(label);
    }
    let tissue = TissueMap::new(grid, labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tensors = TensorField::zeros(grid);
    let floor = spec.dti_floor;
    for lin in 0..grid.len() {
        let x = grid.coord(lin);
        if tissue.label(lin) == Tissue::White {
            let mut v = match &spec.fiber {
                FiberModel::Uniform(dir) => dir.clone(),
                FiberModel::Circumferential => {
                    let dx = x[0] - center[0];
                    let dy = x[1] - center[1];
                    let r = (dx * dx + dy * dy).sqrt();
                    if r < 1e-12 {
                        let mut e = vec![0.0; d];
                        e[0] = 1.0;
                        e
                    } else {
                        let mut t = vec![0.0; d];
                        t[0] = -dy / r;
                        t[1] = dx / r;
                        t
                    }
                }
            };
            if spec.jitter > 0.0 {
                for c in v.iter_mut() {
                    *c += spec.jitter * rng.sample::<f64, _>(rand_distr_standard());
                }
            }
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::InvalidParam("fiber direction has zero length".into()));
            }
            for c in v.iter_mut() {
                *c /= norm;
            }
            let mut sym = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    sym[i * d + j] = (1.0 - floor) * v[i] * v[j] + if i == j { floor } else { 0.0 };
                }
            }
            tensors.set_voxel(lin, &sym);
        } else {
            let mut sym = vec![0.0; d * d];
            for i in 0..d {
                sym[i * d + i] = floor;
            }
            tensors.set_voxel(lin, &sym);
        }
    }
    let dti = DtiVolume::new(tensors)?;
    Ok((tissue, dti))
}

/// Standard normal sampler without pulling in rand_distr.
fn rand_distr_standard() -> impl rand::distributions::Distribution<f64> {
    struct StdNormal;
    impl rand::distributions::Distribution<f64> for StdNormal {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
    StdNormal
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn fa_isotropic_is_zero() {
        assert_eq!(fractional_anisotropy(&[0.7, 0.7, 0.7]).unwrap(), 0.0);
        assert_eq!(fractional_anisotropy(&[0.3, 0.3]).unwrap(), 0.0);
        assert_eq!(fractional_anisotropy(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn fa_rank_one_is_one() {
        assert_relative_eq!(fractional_anisotropy(&[1.0, 0.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(fractional_anisotropy(&[2.5, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fa_321_matches_closed_form() {
        // direct evaluation: sqrt(0.5 * 6 / 14) = sqrt(3/14)
        let fa = fractional_anisotropy(&[3.0, 2.0, 1.0]).unwrap();
        assert_relative_eq!(fa, (3.0f64 / 14.0).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(fa, 0.46291004988627577, epsilon = 1e-12);
    }

    #[test]
    fn fa_rejects_negative() {
        assert!(fractional_anisotropy(&[1.0, -0.5, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn fa_in_unit_interval(l1 in 0.0..10.0f64, l2 in 0.0..10.0f64, l3 in 0.0..10.0f64) {
            let fa = fractional_anisotropy(&[l1, l2, l3]).unwrap();
            prop_assert!((0.0..=1.0).contains(&fa));
            let fa2 = fractional_anisotropy(&[l1, l2]).unwrap();
            prop_assert!((0.0..=1.0).contains(&fa2));
        }
    }

    fn diag_dti(grid: &Grid, diag: &[f64]) -> DtiVolume {
        let d = grid.dim();
        let mut t = TensorField::zeros(grid);
        for i in 0..grid.len() {
            let mut sym = vec![0.0; d * d];
            for a in 0..d {
                sym[a * d + a] = diag[a];
            }
            t.set_voxel(i, &sym);
        }
        DtiVolume::new(t).unwrap()
    }

    #[test]
    fn tensor_full_isotropic_gives_zero() {
        let grid = Grid::regular(&[4, 4, 4], 1.0).unwrap();
        let dti = diag_dti(&grid, &[0.5, 0.5, 0.5]);
        let t = build_tensor_full(&dti).unwrap();
        for s in 0..t.n_components() {
            assert!(t.component(s).iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn tensor_full_rank_one_unchanged() {
        let grid = Grid::regular(&[4, 4, 4], 1.0).unwrap();
        let dti = diag_dti(&grid, &[1.0, 0.0, 0.0]);
        let t = build_tensor_full(&dti).unwrap();
        let m = t.voxel_matrix(0);
        assert_relative_eq!(m[0], 1.0, epsilon = 1e-12);
        assert!(m[4].abs() < 1e-12 && m[8].abs() < 1e-12);
    }

    #[test]
    fn tensor_full_321_scaled_by_fa() {
        let grid = Grid::regular(&[4, 4, 4], 1.0).unwrap();
        let dti = diag_dti(&grid, &[3.0, 2.0, 1.0]);
        let t = build_tensor_full(&dti).unwrap();
        let m = t.voxel_matrix(0);
        assert_relative_eq!(m[0], 1.3887301496588273, epsilon = 1e-10);
        assert_relative_eq!(m[4], 0.9258200997725515, epsilon = 1e-10);
        assert_relative_eq!(m[8], 0.46291004988627577, epsilon = 1e-10);
    }

    /// Algebraic identity: full-FA tensor equals FA(voxel) times the DTI tensor.
    #[test]
    fn tensor_full_equals_fa_times_dti() {
        let grid = Grid::regular(&[4, 4], 1.0).unwrap();
        let mut t = TensorField::zeros(&grid);
        for i in 0..grid.len() {
            let a = 0.2 + 0.01 * i as f64;
            t.set_voxel(i, &[a + 0.3, 0.05, 0.05, a]);
        }
        let dti = DtiVolume::new(t.clone()).unwrap();
        let full = build_tensor_full(&dti).unwrap();
        for i in 0..grid.len() {
            let eigs = sym_eigenvalues(&t.voxel_matrix(i), 2);
            let fa = fractional_anisotropy(&eigs.iter().map(|e| e.max(0.0)).collect::<Vec<_>>())
                .unwrap();
            let m0 = t.voxel_matrix(i);
            let m1 = full.voxel_matrix(i);
            for (a, b) in m0.iter().zip(&m1) {
                assert_relative_eq!(fa * a, *b, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn tensor_principal_degenerate_tie_break() {
        let grid = Grid::regular(&[4, 4, 4], 1.0).unwrap();
        let dti = diag_dti(&grid, &[0.7, 0.7, 0.7]);
        let t = build_tensor_principal(&dti).unwrap();
        let m = t.voxel_matrix(0);
        // lambda * e_x e_x^T per the tie-break
        assert_relative_eq!(m[0], 0.7, epsilon = 1e-12);
        for (i, v) in m.iter().enumerate() {
            if i != 0 {
                assert!(v.abs() < 1e-12, "entry {i} = {v}");
            }
        }
    }

    #[test]
    fn tensor_principal_dominant_axis() {
        let grid = Grid::regular(&[4, 4, 4], 1.0).unwrap();
        let dti = diag_dti(&grid, &[3.0, 2.0, 1.0]);
        let t = build_tensor_principal(&dti).unwrap();
        let m = t.voxel_matrix(0);
        assert_relative_eq!(m[0], 3.0, epsilon = 1e-12);
        assert!(m[4].abs() < 1e-12 && m[8].abs() < 1e-12);
    }

    #[test]
    fn tensor_principal_reconstructs_rotated_rank_one() {
        let grid = Grid::regular(&[4, 4], 1.0).unwrap();
        // R diag(2,0) R^T for a 30-degree rotation
        let th = 30.0f64.to_radians();
        let (c, s) = (th.cos(), th.sin());
        let v = [c, s];
        let mut t = TensorField::zeros(&grid);
        for i in 0..grid.len() {
            t.set_voxel(i, &[2.0 * v[0] * v[0], 2.0 * v[0] * v[1], 2.0 * v[0] * v[1], 2.0 * v[1] * v[1]]);
        }
        let dti = DtiVolume::new(t.clone()).unwrap();
        let p = build_tensor_principal(&dti).unwrap();
        for (a, b) in t.voxel_matrix(5).iter().zip(&p.voxel_matrix(5)) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    fn small_tissue() -> (Grid, TissueMap) {
        let grid = Grid::regular(&[4, 4], 1.0).unwrap();
        let mut labels = vec![Tissue::Grey; grid.len()];
        labels[0] = Tissue::Other;
        labels[5] = Tissue::White;
        (grid.clone(), TissueMap::new(&grid, labels).unwrap())
    }

    #[test]
    fn assemble_k_piecewise_values() {
        let (grid, tissue) = small_tissue();
        let t = TensorField::zeros(&grid);
        let params = DiffusionParams::default();
        let k = assemble_k(&tissue, &t, &params).unwrap();
        // grey voxel: 0.02 I
        let mg = k.voxel_matrix(1);
        assert_relative_eq!(mg[0], 0.02, epsilon = 1e-15);
        assert_relative_eq!(mg[3], 0.02, epsilon = 1e-15);
        assert_eq!(mg[1], 0.0);
        // white voxel: five-fold, 0.1 I
        let mw = k.voxel_matrix(5);
        assert_relative_eq!(mw[0], 0.1, epsilon = 1e-15);
        // penalty voxel: 1e-3 * 0.02 = 2e-5
        let mo = k.voxel_matrix(0);
        assert_relative_eq!(mo[0], 2e-5, epsilon = 1e-18);
    }

    #[test]
    fn assemble_k_leakage_bound_and_monotonicity() {
        let (grid, tissue) = small_tissue();
        let mut t = TensorField::zeros(&grid);
        for i in 0..grid.len() {
            t.set_voxel(i, &[0.5, 0.1, 0.1, 0.3]);
        }
        let mut params = DiffusionParams::default();
        params.k_f = 0.05;
        let k1 = assemble_k(&tissue, &t, &params).unwrap();
        // outside the brain every eigenvalue is <= penalty_eps * k_g
        let eigs = sym_eigenvalues(&k1.voxel_matrix(0), 2);
        for e in eigs {
            assert!(e <= params.penalty_eps * params.k_g + 1e-15);
        }
        // eigenvalues nondecreasing in k_f (PSD T)
        params.k_f = 0.2;
        let k2 = assemble_k(&tissue, &t, &params).unwrap();
        for voxel in [1usize, 5] {
            let mut e1 = sym_eigenvalues(&k1.voxel_matrix(voxel), 2);
            let mut e2 = sym_eigenvalues(&k2.voxel_matrix(voxel), 2);
            e1.sort_by(f64::total_cmp);
            e2.sort_by(f64::total_cmp);
            for (a, b) in e1.iter().zip(&e2) {
                assert!(b + 1e-12 >= *a);
            }
        }
    }

    #[test]
    fn assemble_k_rejects_empty_brain() {
        let grid = Grid::regular(&[4, 4], 1.0).unwrap();
        let tissue = TissueMap::new(&grid, vec![Tissue::Other; grid.len()]).unwrap();
        let t = TensorField::zeros(&grid);
        assert!(assemble_k(&tissue, &t, &DiffusionParams::default()).is_err());
    }

    #[test]
    fn synth_zero_shell_all_white() {
        let grid = Grid::regular(&[16, 16], 4.0).unwrap();
        let mut spec = SynthAnatomySpec::default_for(&grid);
        spec.shell_thickness = 0.0;
        let (tissue, _) = synth_anatomy(&spec).unwrap();
        assert_eq!(tissue.count(Tissue::Grey), 0);
        assert!(tissue.count(Tissue::White) > 0);
    }

    #[test]
    fn synth_uniform_fiber_principal_axis() {
        let grid = Grid::regular(&[16, 16], 4.0).unwrap();
        let mut spec = SynthAnatomySpec::default_for(&grid);
        spec.fiber = FiberModel::Uniform(vec![1.0, 0.0]);
        let (tissue, dti) = synth_anatomy(&spec).unwrap();
        for i in 0..grid.len() {
            if tissue.label(i) == Tissue::White {
                let m = dti.tensors().voxel_matrix(i);
                // principal eigenvector is +-x: off-diagonals vanish, xx largest
                assert!(m[1].abs() < 1e-14);
                assert!(m[0] > m[3]);
            }
        }
    }

    #[test]
    fn synth_default_white_fraction() {
        let grid = Grid::regular(&[64, 64], 1.0).unwrap();
        let spec = SynthAnatomySpec::default_for(&grid);
        let (tissue, _) = synth_anatomy(&spec).unwrap();
        let frac = tissue.count(Tissue::White) as f64 / grid.len() as f64;
        assert!((0.2..=0.6).contains(&frac), "white fraction {frac}");
    }

    #[test]
    fn synth_rejects_degenerate() {
        let grid = Grid::regular(&[16, 16], 1.0).unwrap();
        let mut spec = SynthAnatomySpec::default_for(&grid);
        spec.shell_thickness = 1000.0;
        assert!(synth_anatomy(&spec).is_err());
    }

    #[test]
    fn tissue_field_round_trip() {
        let (_, tissue) = small_tissue();
        let f = tissue.to_field();
        let back = TissueMap::from_field(&f).unwrap();
        assert_eq!(tissue.labels(), back.labels());
    }
}
