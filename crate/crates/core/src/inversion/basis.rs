//! Gaussian parametrization of the tumor initial condition.
//!
//! The map from coefficients to the initial field is a superposition of
//! fixed-width Gaussians; the transpose uses the h^d-weighted inner product
//! so that `<apply(p), f>_h = p . apply_transpose(f)` holds to roundoff.

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField};
use crate::inversion::ObservationMask;

#[derive(Debug, Clone)]
pub struct GaussianBasis {
    grid: Grid,
    centers: Vec<Vec<f64>>,
    sigma: f64,
    /// Precomputed basis fields, one per center.
    fields: Vec<ScalarField>,
}

impl GaussianBasis {
    pub fn new(grid: &Grid, centers: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidParam("basis needs at least one center".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParam(format!("basis sigma = {sigma} must be > 0")));
        }
        for (j, c) in centers.iter().enumerate() {
            if c.len() != grid.dim() {
                return Err(Error::InvalidParam(format!(
                    "basis center {j} has {} coordinates on a {}-d grid",
                    c.len(),
                    grid.dim()
                )));
            }
            for a in 0..grid.dim() {
                let lo = grid.origin()[a];
                let hi = lo + grid.extent(a);
                if c[a] < lo || c[a] > hi {
                    return Err(Error::InvalidParam(format!(
                        "basis center {j} outside the domain on axis {a}"
                    )));
                }
            }
        }
        let fields = centers
            .iter()
            .map(|c| {
                ScalarField::from_fn(grid, |x| {
                    let r2: f64 = x.iter().zip(c).map(|(xi, ci)| (xi - ci) * (xi - ci)).sum();
                    (-r2 / (2.0 * sigma * sigma)).exp()
                })
            })
            .collect();
        Ok(Self {
            grid: grid.clone(),
            centers,
            sigma,
            fields,
        })
    }

    /// Regular sub-lattice of n_side^d centers spanning the bounding box of
    /// the observed mask dilated by two voxels; sigma is 0.75 of the mean
    /// center spacing.
    pub fn lattice_for_mask(mask: &ObservationMask, n_side: usize) -> Result<Self> {
        let grid = mask.grid().clone();
        let d = grid.dim();
        if n_side == 0 {
            return Err(Error::InvalidParam("basis lattice needs n_side >= 1".into()));
        }
        let mut lo = vec![usize::MAX; d];
        let mut hi = vec![0usize; d];
        let mut any = false;
        for (lin, &m) in mask.mask().iter().enumerate() {
            if m {
                any = true;
                let idx = grid.unindex(lin);
                for a in 0..d {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
        if !any {
            return Err(Error::InvalidParam(
                "cannot place basis: observation mask is empty".into(),
            ));
        }
        // dilate by two voxels, clamped to the grid
        for a in 0..d {
            lo[a] = lo[a].saturating_sub(2);
            hi[a] = (hi[a] + 2).min(grid.dims()[a] - 1);
        }
        let mut mean_spacing = 0.0;
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(d);
        for a in 0..d {
            let x_lo = grid.origin()[a] + lo[a] as f64 * grid.spacing()[a];
            let x_hi = grid.origin()[a] + hi[a] as f64 * grid.spacing()[a];
            let span = (x_hi - x_lo).max(grid.spacing()[a]);
            let step = span / n_side as f64;
            mean_spacing += step;
            axes.push((0..n_side).map(|i| x_lo + (i as f64 + 0.5) * step).collect());
        }
        mean_spacing /= d as f64;
        let sigma = (0.75 * mean_spacing).max(0.5 * grid.spacing().iter().cloned().fold(f64::INFINITY, f64::min));
        // cartesian product, x-fastest
        let n_p = n_side.pow(d as u32);
        let mut centers = Vec::with_capacity(n_p);
        for lin in 0..n_p {
            let mut rem = lin;
            let mut c = Vec::with_capacity(d);
            for axis in axes.iter() {
                c.push(axis[rem % n_side]);
                rem /= n_side;
            }
            centers.push(c);
        }
        GaussianBasis::new(&grid, centers, sigma)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// c0(x) = sum_j p_j exp(-|x - x_j|^2 / (2 sigma^2)).
    pub fn apply(&self, p: &[f64]) -> Result<ScalarField> {
        if p.len() != self.len() {
            return Err(Error::InvalidParam(format!(
                "coefficient count {} != basis size {}",
                p.len(),
                self.len()
            )));
        }
        let mut out = ScalarField::zeros(&self.grid);
        for (pj, fj) in p.iter().zip(&self.fields) {
            if *pj != 0.0 {
                out.axpy(*pj, fj);
            }
        }
        Ok(out)
    }

    /// Exact discrete adjoint: (Phi^T f)_j = <phi_j, f>_h.
    pub fn apply_transpose(&self, f: &ScalarField) -> Result<Vec<f64>> {
        f.same_grid(&self.fields[0], "basis apply_transpose")?;
        Ok(self.fields.iter().map(|fj| fj.dot_h(f)).collect())
    }
}
