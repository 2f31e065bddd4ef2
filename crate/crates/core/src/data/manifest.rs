//! JSON-lines scan manifest.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::Split;
use super::volume::{Class, Volume};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub label: Class,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { records, base_dir: base_dir.into() };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate scan id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Parse and verify that ids are unique and all referenced files exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open manifest {}: {}", path.display(), e)))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
            records.push(rec);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(records, base)?;
        for r in &m.records {
            for p in std::iter::once(&r.path).chain(&r.mask_path).chain(&r.lesion_path) {
                if !m.resolve(p).is_file() {
                    return Err(Error::Data(format!("{}: missing file {}", r.id, m.resolve(p).display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn in_split(&self, s: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == Some(s))
    }

    fn load_rank3(&self, id: &str, p: &str) -> Result<Tensor> {
        let t = Tensor::load(self.resolve(p))?;
        if t.rank() != 3 {
            return Err(Error::Data(format!("{}: {} is rank {}, expected 3", id, p, t.rank())));
        }
        Ok(t)
    }

    pub fn load_volume(&self, r: &ManifestRecord) -> Result<Volume> {
        let mut v = Volume::new(r.id.clone(), self.load_rank3(&r.id, &r.path)?, r.label)?;
        if let Some(p) = &r.mask_path {
            v = v.with_mask(self.load_rank3(&r.id, p)?)?;
        }
        if let Some(p) = &r.lesion_path {
            v = v.with_lesion(self.load_rank3(&r.id, p)?)?;
        }
        Ok(v)
    }

    /// Write `v` (and its masks) under `dir` as `<id>.nlt`, `<id>.mask.nlt`,
    /// `<id>.lesion.nlt` and return the record, with paths relative to `dir`.
    pub fn write_volume(dir: &Path, v: &Volume, split: Option<Split>) -> Result<ManifestRecord> {
        fs::create_dir_all(dir)?;
        let put = |suffix: &str, t: &Tensor| -> Result<String> {
            let name = format!("{}{}.nlt", v.id, suffix);
            t.save(dir.join(&name), DType::F32)?;
            Ok(name)
        };
        Ok(ManifestRecord {
            id: v.id.clone(),
            path: put("", &v.voxels)?,
            label: v.label,
            mask_path: v.mask.as_ref().map(|m| put(".mask", m)).transpose()?,
            lesion_path: v.lesion.as_ref().map(|m| put(".lesion", m)).transpose()?,
            split,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> ManifestRecord {
        ManifestRecord { id: id.into(), path: format!("{}.nlt", id), label: Class::CP, mask_path: None, lesion_path: None, split: None }
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Manifest::new(vec![rec("a"), rec("a")], ".").is_err());
    }

    #[test]
    fn missing_file_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new("a", Tensor::full(&[2, 3, 3], 7.0), Class::NCP).unwrap();
        let r = Manifest::write_volume(dir.path(), &v, Some(Split::Val)).unwrap();
        let m = Manifest::new(vec![r, rec("b")], dir.path()).unwrap();
        let mpath = dir.path().join("m.jsonl");
        m.save(&mpath).unwrap();
        assert!(matches!(Manifest::load(&mpath), Err(Error::Data(_))));
        let m = Manifest::new(vec![m.records[0].clone()], dir.path()).unwrap();
        m.save(&mpath).unwrap();
        let back = Manifest::load(&mpath).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.load_volume(&back.records[0]).unwrap(), v);
        let line = fs::read_to_string(&mpath).unwrap();
        assert_eq!(line.trim(), r#"{"id":"a","path":"a.nlt","label":"NCP","split":"val"}"#);
    }
}
