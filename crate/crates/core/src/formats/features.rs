//! `PTXF` feature files: per-step scores and texture features plus the
//! whole-image feature of every image.
//!
//! Layout, little-endian: magic `PTXF`, version `u32`, steps `u16`, classes
//! `u32`, feature dim `u32`, record count `u64`; per record a `u16`-prefixed
//! UTF-8 image id, `steps` blocks of `classes` scores then `feature_dim`
//! feature values, then `steps·feature_dim` whole-image values, all `f32`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::retrieval::{ImageFeatures, PartFeature};

pub const FEATURE_MAGIC: &[u8; 4] = b"PTXF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub steps: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub records: Vec<ImageFeatures>,
}

impl FeatureFile {
    pub fn new(steps: usize, classes: usize, feature_dim: usize, records: Vec<ImageFeatures>) -> Result<Self> {
        let f = FeatureFile {
            steps,
            classes,
            feature_dim,
            records,
        };
        f.check()?;
        Ok(f)
    }

    fn check(&self) -> Result<()> {
        for r in &self.records {
            let ok = r.parts.len() == self.steps
                && r.whole.len() == self.steps * self.feature_dim
                && r.parts
                    .iter()
                    .all(|p| p.scores.len() == self.classes && p.feature.len() == self.feature_dim);
            if !ok {
                return Err(Error::Invalid(format!(
                    "features of {:?} do not match the declared dims (T={}, C={}, dim={})",
                    r.image_id, self.steps, self.classes, self.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Checks the declared dims against a model configuration.
    pub fn expect_dims(&self, steps: usize, classes: usize, feature_dim: usize) -> Result<()> {
        if (self.steps, self.classes, self.feature_dim) != (steps, classes, feature_dim) {
            return Err(Error::Invalid(format!(
                "feature file dims (T={}, C={}, dim={}) differ from the model (T={steps}, C={classes}, dim={feature_dim})",
                self.steps, self.classes, self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = FEATURE_MAGIC.to_vec();
        out.write_u32::<LE>(FEATURE_VERSION).unwrap();
        out.write_u16::<LE>(self.steps as u16).unwrap();
        out.write_u32::<LE>(self.classes as u32).unwrap();
        out.write_u32::<LE>(self.feature_dim as u32).unwrap();
        out.write_u64::<LE>(self.records.len() as u64).unwrap();
        let put = |out: &mut Vec<u8>, v: &[f64]| {
            for &x in v {
                out.write_f32::<LE>(x as f32).unwrap();
            }
        };
        for r in &self.records {
            out.write_u16::<LE>(r.image_id.len() as u16).unwrap();
            out.extend_from_slice(r.image_id.as_bytes());
            for p in &r.parts {
                put(&mut out, &p.scores);
                put(&mut out, &p.feature);
            }
            put(&mut out, &r.whole);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor::new(bytes);
        let trunc = |_| "truncated feature file".to_string();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != FEATURE_MAGIC {
            return Err("not a feature file (bad magic)".into());
        }
        let version = r.read_u32::<LE>().map_err(trunc)?;
        if version != FEATURE_VERSION {
            return Err(format!(
                "unsupported feature file version {version}, this build reads version {FEATURE_VERSION}"
            ));
        }
        let steps = r.read_u16::<LE>().map_err(trunc)? as usize;
        let classes = r.read_u32::<LE>().map_err(trunc)? as usize;
        let feature_dim = r.read_u32::<LE>().map_err(trunc)? as usize;
        let count = r.read_u64::<LE>().map_err(trunc)?;
        let per_record = 4 * (steps * (classes + feature_dim) + steps * feature_dim);
        let mut records = Vec::new();
        let floats = |r: &mut Cursor<&[u8]>, n: usize| -> std::result::Result<Vec<f64>, String> {
            (0..n)
                .map(|_| r.read_f32::<LE>().map(f64::from))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(trunc)
        };
        for _ in 0..count {
            let len = r.read_u16::<LE>().map_err(trunc)?;
            let mut id = vec![0u8; len as usize];
            r.read_exact(&mut id).map_err(trunc)?;
            let id = String::from_utf8(id).map_err(|_| "image id is not UTF-8".to_string())?;
            if bytes.len() - (r.position() as usize) < per_record {
                return Err(format!("truncated record {id:?}"));
            }
            let mut parts = Vec::with_capacity(steps);
            for t in 0..steps {
                let scores = floats(&mut r, classes)?;
                let feature = floats(&mut r, feature_dim)?;
                parts.push(PartFeature::new(id.clone(), t + 1, feature, scores));
            }
            let whole = floats(&mut r, steps * feature_dim)?;
            records.push(ImageFeatures {
                image_id: id,
                parts,
                whole,
            });
        }
        if (r.position() as usize) != bytes.len() {
            return Err("trailing bytes after last record".into());
        }
        Ok(FeatureFile {
            steps,
            classes,
            feature_dim,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureFile::decode(&bytes).map_err(|m| Error::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureFile {
        let rec = |id: &str, base: f64| ImageFeatures {
            image_id: id.into(),
            parts: (0..2)
                .map(|t| PartFeature::new(id, t + 1, vec![base + t as f64, 0.25], vec![0.5, 0.125 * t as f64, 0.75]))
                .collect(),
            whole: vec![base, 0.25, base + 1.0, 0.25],
        };
        FeatureFile::new(2, 3, 2, vec![rec("x", 1.0), rec("é", -2.5)]).unwrap()
    }

    #[test]
    fn round_trip_exact() {
        let f = sample();
        let bytes = f.encode();
        let back = FeatureFile::decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rejects_bad_dims_and_versions() {
        let mut f = sample();
        f.records[0].whole.pop();
        assert!(f.check().is_err());
        let mut bytes = sample().encode();
        bytes[4] = 2;
        assert!(FeatureFile::decode(&bytes).unwrap_err().contains("version 2"));
        assert!(sample().expect_dims(2, 3, 3).is_err());
    }
}
