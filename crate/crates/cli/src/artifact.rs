//! Binary container for the periodic solution the evolve mode marches
//! around.
//!
//! Little-endian, fixed layout: an 8-byte magic, the shape and wall
//! parameters the producing run used, then the raw field data. The loader
//! cross-checks every parameter against the consuming run's configuration so
//! a stale artifact cannot silently drive a mismatched march.

use std::fs;
use std::path::Path;

use pkin::error::Error;
use pkin::{DistributionField, Result};

const MAGIC: &[u8; 8] = b"PKFIELD1";

/// A stored periodic solution plus the parameters that produced it.
#[derive(Debug, Clone)]
pub struct PeriodicArtifact {
    pub period: f64,
    pub delta1: f64,
    pub theta_bar: [f64; 2],
    pub v_max: f64,
    pub n_per_axis: u64,
    pub slab_length: f64,
    pub residual: f64,
    pub weighted_sup: f64,
    /// Oscillatory part, `period_steps + 1` slices.
    pub field: DistributionField,
    /// Steady part the field oscillates around.
    pub steady: Vec<f64>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CacheFormat(
                "periodic artifact is truncated".into(),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Writes the artifact; the parent directory must exist.
pub fn save(path: &Path, art: &PeriodicArtifact) -> Result<()> {
    let mut buf = Vec::with_capacity(128 + 8 * (art.field.len() + art.steady.len()));
    buf.extend_from_slice(MAGIC);
    for dim in [
        art.field.n_t as u64,
        art.field.n_x as u64,
        art.field.n_v as u64,
        art.n_per_axis,
    ] {
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for value in [
        art.period,
        art.delta1,
        art.theta_bar[0],
        art.theta_bar[1],
        art.v_max,
        art.slab_length,
        art.residual,
        art.weighted_sup,
    ] {
        buf.extend_from_slice(&value.to_le_bytes());
    }
    for v in art.field.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &art.steady {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads an artifact back; shape and parameter validation is the caller's
/// job, this only checks structural integrity.
pub fn load(path: &Path) -> Result<PeriodicArtifact> {
    let data = fs::read(path)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::CacheFormat(format!(
            "{} is not a periodic artifact (bad magic)",
            path.display()
        )));
    }
    let n_t = cur.u64()? as usize;
    let n_x = cur.u64()? as usize;
    let n_v = cur.u64()? as usize;
    let n_per_axis = cur.u64()?;
    let period = cur.f64()?;
    let delta1 = cur.f64()?;
    let theta_bar = [cur.f64()?, cur.f64()?];
    let v_max = cur.f64()?;
    let slab_length = cur.f64()?;
    let residual = cur.f64()?;
    let weighted_sup = cur.f64()?;
    if n_t < 2 || n_x == 0 || n_v == 0 {
        return Err(Error::CacheFormat(format!(
            "periodic artifact claims degenerate shape ({n_t}, {n_x}, {n_v})"
        )));
    }
    let field_data = cur.f64_vec(n_t * n_x * n_v)?;
    let steady = cur.f64_vec(n_x * n_v)?;
    if cur.pos != data.len() {
        return Err(Error::CacheFormat(
            "periodic artifact has trailing bytes".into(),
        ));
    }
    let mut field = DistributionField::zeros(n_t, n_x, n_v);
    field.as_mut_slice().copy_from_slice(&field_data);
    Ok(PeriodicArtifact {
        period,
        delta1,
        theta_bar,
        v_max,
        n_per_axis,
        slab_length,
        residual,
        weighted_sup,
        field,
        steady,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifact_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("periodic.field.bin");
        let mut field = DistributionField::zeros(3, 2, 4);
        for (i, v) in field.as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64) * 0.37 - 1.0;
        }
        let art = PeriodicArtifact {
            period: 0.75,
            delta1: 0.015,
            theta_bar: [1.02, 0.98],
            v_max: 3.25,
            n_per_axis: 6,
            slab_length: 1.0,
            residual: 1e-9,
            weighted_sup: 0.042,
            field,
            steady: vec![0.5; 8],
        };
        save(&path, &art).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.field.as_slice(), art.field.as_slice());
        assert_eq!(back.steady, art.steady);
        assert_eq!(back.period, art.period);
        assert_eq!(back.theta_bar, art.theta_bar);

        // Corruption is caught, not misread.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err(), "truncated artifact must be rejected");
    }
}
