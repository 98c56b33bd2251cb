//! GLF1 raw volume format.
//!
//! Layout, all little-endian:
//! - 8-byte magic `GLIOF1\0\0`
//! - u32 ndims, u32 dims[ndims], u32 components
//! - f64 spacing[ndims], f64 origin[ndims]
//! - f64 values, component-major: all voxels of component 0 in x-fastest
//!   order, then component 1, ...
//!
//! Scalar fields have 1 component, vector fields d, tensor fields d(d+1)/2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{tensor_components, Grid, ScalarField, TensorField, VectorField};

pub const MAGIC: &[u8; 8] = b"GLIOF1\0\0";

/// A raw volume: grid geometry plus one or more value planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub components: Vec<Vec<f64>>,
}

impl Volume {
    pub fn from_scalar(f: &ScalarField) -> Self {
        Volume {
            grid: f.grid().clone(),
            components: vec![f.values().to_vec()],
        }
    }

    pub fn from_vector(v: &VectorField) -> Self {
        Volume {
            grid: v.grid().clone(),
            components: (0..v.grid().dim()).map(|a| v.component(a).to_vec()).collect(),
        }
    }

    pub fn from_tensor(t: &TensorField) -> Self {
        Volume {
            grid: t.grid().clone(),
            components: (0..t.n_components()).map(|s| t.component(s).to_vec()).collect(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarField> {
        if self.components.len() != 1 {
            return Err(Error::BadVolume(format!(
                "expected 1 component for a scalar field, found {}",
                self.components.len()
            )));
        }
        ScalarField::from_values(&self.grid, self.components.into_iter().next().unwrap())
    }

    pub fn into_vector(self) -> Result<VectorField> {
        if self.components.len() != self.grid.dim() {
            return Err(Error::BadVolume(format!(
                "expected {} components for a vector field, found {}",
                self.grid.dim(),
                self.components.len()
            )));
        }
        VectorField::from_components(&self.grid.clone(), self.components)
    }

    pub fn into_tensor(self) -> Result<TensorField> {
        let want = tensor_components(self.grid.dim());
        if self.components.len() != want {
            return Err(Error::BadVolume(format!(
                "expected {want} components for a tensor field, found {}",
                self.components.len()
            )));
        }
        TensorField::from_components(&self.grid.clone(), self.components)
    }
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let dims = vol.grid.dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(vol.components.len() as u32).to_le_bytes())?;
    for &h in vol.grid.spacing() {
        w.write_all(&h.to_le_bytes())?;
    }
    for &o in vol.grid.origin() {
        w.write_all(&o.to_le_bytes())?;
    }
    for comp in &vol.components {
        for &v in comp {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadVolume("bad magic".into()));
    }
    let ndims = read_u32(&mut r, "ndims")? as usize;
    if !(2..=3).contains(&ndims) {
        return Err(Error::BadVolume(format!("ndims {ndims} out of range")));
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut total: u64 = 1;
    for a in 0..ndims {
        let d = read_u32(&mut r, "dims")? as usize;
        total = total.saturating_mul(d as u64);
        if total >= 1u64 << 31 {
            return Err(Error::BadVolume(format!(
                "dims product overflows 2^31 at axis {a}"
            )));
        }
        dims.push(d);
    }
    let components = read_u32(&mut r, "components")? as usize;
    if components == 0 || components > 16 {
        return Err(Error::BadVolume(format!("components {components} out of range")));
    }
    let mut spacing = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        spacing.push(read_f64(&mut r, "spacing")?);
    }
    let mut origin = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        origin.push(read_f64(&mut r, "origin")?);
    }
    let grid = Grid::new(&dims, &spacing, &origin)
        .map_err(|e| Error::BadVolume(format!("invalid grid header: {e}")))?;
    let n = grid.len();
    let mut comps = Vec::with_capacity(components);
    for _ in 0..components {
        let mut vals = vec![0.0f64; n];
        let mut buf = vec![0u8; n * 8];
        read_exact(&mut r, &mut buf, "values")?;
        for (v, chunk) in vals.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        comps.push(vals);
    }
    Ok(Volume {
        grid,
        components: comps,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::BadVolume(format!("truncated payload reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.glf1");
        let grid = Grid::new(&[6, 4], &[1.5, 2.0], &[-3.0, 1.0]).unwrap();
        let f = ScalarField::from_fn(&grid, |x| x[0] * 0.1 + (x[1] * 7.7).sin());
        save_volume(&path, &Volume::from_scalar(&f)).unwrap();
        let back = load_volume(&path).unwrap().into_scalar().unwrap();
        assert_eq!(f, back);
        // bitwise: compare raw bytes of two saves
        let path2 = dir.path().join("g.glf1");
        save_volume(&path2, &Volume::from_scalar(&back)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.glf1");
        let grid = Grid::regular(&[4, 4, 4], 1.0).unwrap();
        let mut t = TensorField::zeros(&grid);
        for i in 0..grid.len() {
            let v = i as f64;
            t.set_voxel(i, &[v, 0.1, 0.2, 0.1, v + 1.0, 0.3, 0.2, 0.3, v + 2.0]);
        }
        save_volume(&path, &Volume::from_tensor(&t)).unwrap();
        let back = load_volume(&path).unwrap().into_tensor().unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn empty_file_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.glf1");
        File::create(&path).unwrap();
        match load_volume(&path) {
            Err(Error::BadVolume(msg)) => assert!(msg.contains("truncated") || msg.contains("magic")),
            other => panic!("expected BadVolume, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.glf1");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"NOTGLIO1somepayload").unwrap();
        match load_volume(&path) {
            Err(Error::BadVolume(msg)) => assert!(msg.contains("bad magic"), "{msg}"),
            other => panic!("expected BadVolume, got {other:?}"),
        }
    }

    #[test]
    fn dims_overflow_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.glf1");
        let mut f = File::create(&path).unwrap();
        f.write_all(MAGIC).unwrap();
        f.write_all(&3u32.to_le_bytes()).unwrap();
        for _ in 0..3 {
            f.write_all(&2000u32.to_le_bytes()).unwrap(); // 8e9 voxels
        }
        f.write_all(&1u32.to_le_bytes()).unwrap();
        match load_volume(&path) {
            Err(Error::BadVolume(msg)) => assert!(msg.contains("overflow"), "{msg}"),
            other => panic!("expected BadVolume, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.glf1");
        let grid = Grid::regular(&[4, 4], 1.0).unwrap();
        let f = ScalarField::constant(&grid, 1.0);
        save_volume(&path, &Volume::from_scalar(&f)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_volume(&path) {
            Err(Error::BadVolume(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected BadVolume, got {other:?}"),
        }
    }
}
