use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagnostic class. The discriminant is the class index used by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    /// Common pneumonia.
    CP = 0,
    /// Novel coronavirus pneumonia.
    NCP = 1,
    Normal = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::CP, Class::NCP, Class::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Class> {
        Class::ALL.get(i).copied().ok_or(Error::Label { label: i, classes: 3 })
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::CP => "CP",
            Class::NCP => "NCP",
            Class::Normal => "Normal",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;
    fn from_str(s: &str) -> Result<Class> {
        Class::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown class label {:?}", s)))
    }
}

/// One labelled scan: `S x H x W` voxels in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub voxels: Tensor,
    /// Binary lung mask.
    pub mask: Option<Tensor>,
    pub label: Class,
    /// Binary ground-truth lesion mask, when known.
    pub lesion: Option<Tensor>,
}

impl Volume {
    pub fn new(id: impl Into<String>, voxels: Tensor, label: Class) -> Result<Self> {
        let v = Self { id: id.into(), voxels, mask: None, label, lesion: None };
        v.validate()?;
        Ok(v)
    }

    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        self.mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    pub fn with_lesion(mut self, lesion: Tensor) -> Result<Self> {
        self.lesion = Some(lesion);
        self.validate()?;
        Ok(self)
    }

    /// `[S, H, W]`.
    pub fn extents(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.rank() != 3 {
            return Err(Error::Data(format!("{}: volume must be rank 3, got {:?}", self.id, self.voxels.shape())));
        }
        if let Some(bad) = self.voxels.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::Data(format!("{}: voxel value {} outside [0, 255]", self.id, bad)));
        }
        for (what, m) in [("mask", &self.mask), ("lesion mask", &self.lesion)] {
            if let Some(m) = m {
                if m.shape() != self.voxels.shape() {
                    return Err(Error::Data(format!(
                        "{}: {} shape {:?} differs from volume {:?}",
                        self.id,
                        what,
                        m.shape(),
                        self.voxels.shape()
                    )));
                }
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Data(format!("{}: {} is not binary", self.id, what)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_non_binary_mask() {
        assert!(Volume::new("a", Tensor::full(&[1, 2, 2], 256.0), Class::CP).is_err());
        let v = Volume::new("a", Tensor::full(&[1, 2, 2], 5.0), Class::CP).unwrap();
        assert!(v.clone().with_mask(Tensor::full(&[1, 2, 2], 0.5)).is_err());
        assert!(v.with_mask(Tensor::ones(&[1, 2, 3])).is_err());
    }

    #[test]
    fn labels_parse() {
        assert_eq!("NCP".parse::<Class>().unwrap(), Class::NCP);
        assert!("covid".parse::<Class>().is_err());
        assert_eq!(serde_json::to_string(&Class::Normal).unwrap(), "\"Normal\"");
    }
}
