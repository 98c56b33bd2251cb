//! Voxel grids and scalar/vector/tensor fields on a periodic cubic domain.
//!
//! Values are stored flat in x-fastest order: for dims `[nx, ny, nz]` the
//! linear index of voxel `(i, j, k)` is `i + nx*(j + ny*k)`. Physical voxel
//! coordinates are `origin + index * spacing` per axis; the domain is
//! periodic with extent `dims * spacing`.

pub mod glf1;
pub mod spectral;

use crate::error::{Error, Result};

/// Periodic voxel grid in 2 or 3 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl Grid {
    /// Dims must be even and at least 4 per axis (spectral transforms);
    /// spacing must be positive.
    pub fn new(dims: &[usize], spacing: &[f64], origin: &[f64]) -> Result<Self> {
        if dims.len() < 2 || dims.len() > 3 {
            return Err(Error::InvalidParam(format!(
                "grid must have 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() || origin.len() != dims.len() {
            return Err(Error::InvalidParam(
                "grid dims/spacing/origin length mismatch".into(),
            ));
        }
        for (a, &n) in dims.iter().enumerate() {
            if n < 4 || n % 2 != 0 {
                return Err(Error::InvalidParam(format!(
                    "grid dims[{a}] = {n}: must be even and >= 4"
                )));
            }
        }
        for (a, &h) in spacing.iter().enumerate() {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidParam(format!("grid spacing[{a}] = {h}: must be > 0")));
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
            origin: origin.to_vec(),
        })
    }

    /// Uniform grid with the given spacing and origin 0.
    pub fn regular(dims: &[usize], spacing: f64) -> Result<Self> {
        let d = dims.len();
        Grid::new(dims, &vec![spacing; d], &vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical extent per axis (periodic wrap length).
    pub fn extent(&self, axis: usize) -> f64 {
        self.dims[axis] as f64 * self.spacing[axis]
    }

    /// Voxel volume h^d, the quadrature weight of the discrete L2 inner product.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Linear index of a voxel given per-axis indices.
    pub fn index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        let mut stride = 1;
        for (a, &i) in idx.iter().enumerate() {
            lin += i * stride;
            stride *= self.dims[a];
        }
        lin
    }

    /// Per-axis indices of a linear index.
    pub fn unindex(&self, mut lin: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in 0..self.dim() {
            idx[a] = lin % self.dims[a];
            lin /= self.dims[a];
        }
        idx
    }

    /// Physical coordinate of a voxel.
    pub fn coord(&self, lin: usize) -> Vec<f64> {
        self.unindex(lin)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + i as f64 * self.spacing[a])
            .collect()
    }

    /// Stride of an axis in the flat layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.dims[..axis].iter().product()
    }

    fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(what.to_string()));
        }
        Ok(())
    }
}

/// Uniform time grid on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n_steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps < 1 {
            return Err(Error::InvalidParam("time grid needs n_steps >= 1".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParam(format!("time horizon {horizon} must be > 0")));
        }
        Ok(Self { n_steps, horizon })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt()
    }
}

/// One real value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![value; grid.len()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidParam(format!(
                "field value count {} != grid size {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// Field built from a function of the physical coordinate.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.coord(i))).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Index of the first non-finite voxel, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.first_non_finite() {
            Some(voxel) => Err(Error::NonFinite { op, voxel }),
            None => Ok(()),
        }
    }

    pub fn same_grid(&self, other: &ScalarField, what: &str) -> Result<()> {
        self.grid.check_same(&other.grid, what)
    }

    /// Plain Euclidean dot product over voxels.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Discrete L2 inner product with h^d quadrature weight.
    pub fn dot_h(&self, other: &ScalarField) -> f64 {
        self.dot(other) * self.grid.cell_volume()
    }

    pub fn norm_h(&self) -> f64 {
        self.dot_h(self).sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// Total mass: sum of values times voxel volume.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f64, other: &ScalarField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Per-voxel product.
    pub fn hadamard(&self, other: &ScalarField) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn clamp01(&self) -> ScalarField {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

/// d real components per voxel (d = grid dimension), stored per component.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            comps: vec![vec![0.0; grid.len()]; grid.dim()],
        }
    }

    pub fn from_components(grid: &Grid, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim() || comps.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::InvalidParam(
                "vector field component shape does not match grid".into(),
            ));
        }
        Ok(Self {
            grid: grid.clone(),
            comps,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, a: usize) -> &[f64] {
        &self.comps[a]
    }

    pub fn component_mut(&mut self, a: usize) -> &mut [f64] {
        &mut self.comps[a]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        for c in &self.comps {
            if let Some(voxel) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op, voxel });
            }
        }
        Ok(())
    }

    /// Sum over components and voxels of pairwise products, times h^d.
    pub fn dot_h(&self, other: &VectorField) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.comps.iter().zip(&other.comps) {
            s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        s * self.grid.cell_volume()
    }

    pub fn norm_h(&self) -> f64 {
        self.dot_h(self).sqrt()
    }
}

/// Symmetric d x d tensor per voxel, upper triangle stored row-major:
/// 2D `[xx, xy, yy]`, 3D `[xx, xy, xz, yy, yz, zz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    grid: Grid,
    comps: Vec<Vec<f64>>,
}

/// Number of upper-triangle components for dimension d.
pub fn tensor_components(d: usize) -> usize {
    d * (d + 1) / 2
}

impl TensorField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            comps: vec![vec![0.0; grid.len()]; tensor_components(grid.dim())],
        }
    }

    /// Isotropic field k(x) * I from a scalar coefficient field.
    pub fn isotropic(coef: &ScalarField) -> Self {
        let grid = coef.grid().clone();
        let d = grid.dim();
        let mut comps = vec![vec![0.0; grid.len()]; tensor_components(d)];
        for a in 0..d {
            let slot = Self::diag_slot(d, a);
            comps[slot].copy_from_slice(coef.values());
        }
        Self { grid, comps }
    }

    pub fn from_components(grid: &Grid, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != tensor_components(grid.dim())
            || comps.iter().any(|c| c.len() != grid.len())
        {
            return Err(Error::InvalidParam(
                "tensor field component shape does not match grid".into(),
            ));
        }
        Ok(Self {
            grid: grid.clone(),
            comps,
        })
    }

    /// Upper-triangle slot of entry (i, j), i <= j.
    pub fn slot(d: usize, i: usize, j: usize) -> usize {
        debug_assert!(i <= j && j < d);
        // row-major upper triangle
        i * d + j - i * (i + 1) / 2
    }

    fn diag_slot(d: usize, a: usize) -> usize {
        Self::slot(d, a, a)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_components(&self) -> usize {
        self.comps.len()
    }

    pub fn component(&self, slot: usize) -> &[f64] {
        &self.comps[slot]
    }

    pub fn component_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.comps[slot]
    }

    /// Symmetric matrix of one voxel as a dense row-major d x d array.
    pub fn voxel_matrix(&self, voxel: usize) -> Vec<f64> {
        let d = self.grid.dim();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v = self.comps[Self::slot(d, i, j)][voxel];
                m[i * d + j] = v;
                m[j * d + i] = v;
            }
        }
        m
    }

    pub fn set_voxel(&mut self, voxel: usize, sym: &[f64]) {
        let d = self.grid.dim();
        let mut s = 0;
        for i in 0..d {
            for j in i..d {
                self.comps[s][voxel] = sym[i * d + j];
                s += 1;
            }
        }
    }

    /// Per-voxel tensor-vector product, written into `out`.
    pub fn apply_to(&self, v: &VectorField, out: &mut VectorField) {
        let d = self.grid.dim();
        let n = self.grid.len();
        match d {
            2 => {
                let (xx, xy, yy) = (&self.comps[0], &self.comps[1], &self.comps[2]);
                let vx = v.component(0);
                let vy = v.component(1);
                // split borrows
                for i in 0..n {
                    let (a, b) = (vx[i], vy[i]);
                    out.comps[0][i] = xx[i] * a + xy[i] * b;
                    out.comps[1][i] = xy[i] * a + yy[i] * b;
                }
            }
            3 => {
                let (xx, xy, xz) = (&self.comps[0], &self.comps[1], &self.comps[2]);
                let (yy, yz, zz) = (&self.comps[3], &self.comps[4], &self.comps[5]);
                let vx = v.component(0);
                let vy = v.component(1);
                let vz = v.component(2);
                for i in 0..n {
                    let (a, b, c) = (vx[i], vy[i], vz[i]);
                    out.comps[0][i] = xx[i] * a + xy[i] * b + xz[i] * c;
                    out.comps[1][i] = xy[i] * a + yy[i] * b + yz[i] * c;
                    out.comps[2][i] = xz[i] * a + yz[i] * b + zz[i] * c;
                }
            }
            _ => unreachable!("grid dimension is 2 or 3"),
        }
    }

    /// Componentwise mean over voxels selected by `mask` (all voxels when
    /// None): the constant-tensor average used by analytic surrogates.
    pub fn mean_components(&self, mask: Option<&[bool]>) -> Vec<f64> {
        let n = self.grid.len();
        let mut sums = vec![0.0; self.comps.len()];
        let mut count = 0usize;
        for i in 0..n {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            for (s, c) in sums.iter_mut().zip(&self.comps) {
                *s += c[i];
            }
            count += 1;
        }
        if count > 0 {
            for s in sums.iter_mut() {
                *s /= count as f64;
            }
        }
        sums
    }

    /// Mean of trace/d over voxels selected by `mask` (all voxels when None).
    pub fn mean_isotropic_part(&self, mask: Option<&[bool]>) -> f64 {
        let d = self.grid.dim();
        let n = self.grid.len();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            let mut tr = 0.0;
            for a in 0..d {
                tr += self.comps[Self::diag_slot(d, a)][i];
            }
            sum += tr / d as f64;
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// self += s * other (componentwise).
    pub fn axpy(&mut self, s: f64, other: &TensorField) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    /// Minimum eigenvalue over all voxels (PSD check helper).
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.grid.len();
        let mut min = f64::INFINITY;
        for i in 0..n {
            let eigs = crate::anatomy::sym_eigenvalues(&self.voxel_matrix(i), self.grid.dim());
            for e in eigs {
                min = min.min(e);
            }
        }
        min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(Grid::regular(&[8, 8], 1.0).is_ok());
        assert!(Grid::regular(&[7, 8], 1.0).is_err()); // odd
        assert!(Grid::regular(&[2, 8], 1.0).is_err()); // too small
        assert!(Grid::regular(&[8], 1.0).is_err()); // 1D
        assert!(Grid::regular(&[8, 8, 8, 8], 1.0).is_err()); // 4D
        assert!(Grid::new(&[8, 8], &[0.0, 1.0], &[0.0, 0.0]).is_err()); // zero spacing
    }

    #[test]
    fn grid_indexing_round_trip() {
        let g = Grid::regular(&[4, 6, 8], 0.5).unwrap();
        for lin in [0usize, 1, 5, 37, 4 * 6 * 8 - 1] {
            assert_eq!(g.index(&g.unindex(lin)), lin);
        }
        assert_eq!(g.len(), 4 * 6 * 8);
        assert_eq!(g.stride(0), 1);
        assert_eq!(g.stride(1), 4);
        assert_eq!(g.stride(2), 24);
        assert!((g.extent(2) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn time_grid() {
        let tg = TimeGrid::new(10, 1.0).unwrap();
        assert!((tg.dt() - 0.1).abs() < 1e-15);
        assert!(TimeGrid::new(0, 1.0).is_err());
        assert!(TimeGrid::new(10, 0.0).is_err());
    }

    #[test]
    fn scalar_field_ops() {
        let g = Grid::regular(&[4, 4], 2.0).unwrap();
        let f = ScalarField::constant(&g, 3.0);
        // mass = 3 * 16 voxels * 4 mm^2
        assert!((f.mass() - 192.0).abs() < 1e-12);
        assert!((f.dot_h(&f) - 9.0 * 16.0 * 4.0).abs() < 1e-12);
        let mut h = f.clone();
        h.axpy(-1.0, &f);
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_detection() {
        let g = Grid::regular(&[4, 4], 1.0).unwrap();
        let mut f = ScalarField::zeros(&g);
        f.values_mut()[7] = f64::NAN;
        match f.check_finite("test") {
            Err(Error::NonFinite { voxel, .. }) => assert_eq!(voxel, 7),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn tensor_slots() {
        assert_eq!(TensorField::slot(2, 0, 0), 0);
        assert_eq!(TensorField::slot(2, 0, 1), 1);
        assert_eq!(TensorField::slot(2, 1, 1), 2);
        assert_eq!(TensorField::slot(3, 0, 0), 0);
        assert_eq!(TensorField::slot(3, 0, 2), 2);
        assert_eq!(TensorField::slot(3, 1, 1), 3);
        assert_eq!(TensorField::slot(3, 1, 2), 4);
        assert_eq!(TensorField::slot(3, 2, 2), 5);
    }

    #[test]
    fn tensor_apply_symmetry() {
        let g = Grid::regular(&[4, 4, 4], 1.0).unwrap();
        let mut t = TensorField::zeros(&g);
        for i in 0..g.len() {
            t.set_voxel(i, &[2.0, 0.5, 0.1, 0.5, 3.0, -0.2, 0.1, -0.2, 1.0]);
        }
        let mut v = VectorField::zeros(&g);
        for a in 0..3 {
            for (i, x) in v.component_mut(a).iter_mut().enumerate() {
                *x = (i as f64 * 0.37 + a as f64).sin();
            }
        }
        let mut tv = VectorField::zeros(&g);
        t.apply_to(&v, &mut tv);
        // check one voxel against the dense matrix
        let m = t.voxel_matrix(11);
        let vin = [v.component(0)[11], v.component(1)[11], v.component(2)[11]];
        for r in 0..3 {
            let want: f64 = (0..3).map(|c| m[r * 3 + c] * vin[c]).sum();
            assert!((tv.component(r)[11] - want).abs() < 1e-14);
        }
    }
}
