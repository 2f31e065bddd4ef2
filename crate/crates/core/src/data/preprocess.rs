//! Lung masking, fixed central crop, and slice-count normalisation.

use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_slices() -> usize {
    16
}
fn default_crop() -> [usize; 2] {
    [32, 32]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Output slice count.
    #[serde(default = "default_slices")]
    pub slices: usize,
    /// Output `[H, W]`.
    #[serde(default = "default_crop")]
    pub crop: [usize; 2],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { slices: default_slices(), crop: default_crop() }
    }
}

impl PreprocessConfig {
    pub fn clinical() -> Self {
        Self { slices: 64, crop: [160, 160] }
    }
}

/// Source slice for each output slice: `floor(i * S / target)`. Selects at
/// even intervals when `S > target` and repeats slices in order when
/// `S < target`.
pub fn slice_indices(source: usize, target: usize) -> Result<Vec<usize>> {
    if source == 0 || target == 0 {
        return Err(Error::Data(format!("cannot resample {} slices to {}", source, target)));
    }
    Ok((0..target).map(|i| i * source / target).collect())
}

fn gather_slices(t: &Tensor, idx: &[usize]) -> Tensor {
    let s = t.shape();
    let plane = s[1] * s[2];
    let mut data = Vec::with_capacity(idx.len() * plane);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(vec![idx.len(), s[1], s[2]], data).expect("extents preserved")
}

fn map_all(v: &Volume, f: impl Fn(&Tensor) -> Tensor) -> Volume {
    Volume {
        id: v.id.clone(),
        voxels: f(&v.voxels),
        mask: v.mask.as_ref().map(&f),
        label: v.label,
        lesion: v.lesion.as_ref().map(&f),
    }
}

/// Exactly `target` slices. Masks follow the voxels.
pub fn resample_slices(v: &Volume, target: usize) -> Result<Volume> {
    let idx = slice_indices(v.extents()[0], target)?;
    Ok(map_all(v, |t| gather_slices(t, &idx)))
}

/// Fixed `[h, w]` window whose top-left corner is
/// `(floor((H - h) / 2), floor((W - w) / 2))`. Never resamples or pads.
pub fn center_crop(v: &Volume, size: [usize; 2]) -> Result<Volume> {
    let [s, h, w] = v.extents();
    let [ch, cw] = size;
    if h < ch || w < cw || ch == 0 || cw == 0 {
        return Err(Error::Data(format!("{}: {}x{} slices cannot be cropped to {}x{}", v.id, h, w, ch, cw)));
    }
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    Ok(map_all(v, |t| {
        let mut data = Vec::with_capacity(s * ch * cw);
        for z in 0..s {
            for y in top..top + ch {
                let row = (z * h + y) * w;
                data.extend_from_slice(&t.data()[row + left..row + left + cw]);
            }
        }
        Tensor::new(vec![s, ch, cw], data).expect("crop extents positive")
    }))
}

/// Zero every voxel outside the lung mask.
pub fn apply_mask(v: &Volume) -> Result<Volume> {
    let mask = v.mask.as_ref().ok_or_else(|| Error::Data(format!("{}: no lung mask", v.id)))?;
    if mask.shape() != v.voxels.shape() {
        return Err(Error::Data(format!("{}: mask shape {:?} vs volume {:?}", v.id, mask.shape(), v.voxels.shape())));
    }
    let data = v.voxels.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Ok(Volume { voxels: Tensor::new(v.voxels.shape().to_vec(), data)?, ..v.clone() })
}

/// mask (when present) -> crop -> slice resampling.
pub fn preprocess(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let masked = if v.mask.is_some() { apply_mask(v)? } else { v.clone() };
    let cropped = center_crop(&masked, cfg.crop)?;
    resample_slices(&cropped, cfg.slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Class;

    fn ramp(s: usize, h: usize, w: usize) -> Volume {
        // each slice filled with its index
        Volume::new("r", Tensor::from_fn(&[s, h, w], |i| (i / (h * w)) as f64), Class::Normal).unwrap()
    }

    fn slice_ids(v: &Volume) -> Vec<usize> {
        let [s, h, w] = v.extents();
        (0..s).map(|z| v.voxels.data()[z * h * w] as usize).collect()
    }

    #[test]
    fn resample_identity_down_and_up() {
        assert_eq!(slice_ids(&resample_slices(&ramp(64, 1, 1), 64).unwrap()), (0..64).collect::<Vec<_>>());
        assert_eq!(slice_ids(&resample_slices(&ramp(128, 1, 1), 64).unwrap()), (0..128).step_by(2).collect::<Vec<_>>());
        let up = slice_ids(&resample_slices(&ramp(32, 1, 1), 64).unwrap());
        assert_eq!(up, (0..64).map(|i| i / 2).collect::<Vec<_>>());
        assert!(slice_indices(0, 64).is_err());
    }

    #[test]
    fn crop_offsets() {
        let v = Volume::new("c", Tensor::from_fn(&[1, 162, 162], |i| ((i / 162 + i % 162) % 256) as f64), Class::CP).unwrap();
        let c = center_crop(&v, [160, 160]).unwrap();
        assert_eq!(c.extents(), [1, 160, 160]);
        // (0,0) of the crop is (1,1) of the source
        assert_eq!(c.voxels.data()[0], 2.0);
        let same = center_crop(&c, [160, 160]).unwrap();
        assert_eq!(same, c);
        let small = Volume::new("s", Tensor::zeros(&[1, 100, 100]), Class::CP).unwrap();
        assert!(matches!(center_crop(&small, [160, 160]), Err(Error::Data(_))));
    }

    #[test]
    fn masks() {
        let v = Volume::new("m", Tensor::full(&[2, 2, 2], 9.0), Class::NCP).unwrap();
        let ones = apply_mask(&v.clone().with_mask(Tensor::ones(&[2, 2, 2])).unwrap()).unwrap();
        assert_eq!(ones.voxels, v.voxels);
        let zeros = apply_mask(&v.clone().with_mask(Tensor::zeros(&[2, 2, 2])).unwrap()).unwrap();
        assert!(zeros.voxels.data().iter().all(|&x| x == 0.0));
        let checker = Tensor::from_fn(&[2, 2, 2], |i| ((i + i / 2 + i / 4) % 2) as f64);
        let out = apply_mask(&v.clone().with_mask(checker.clone()).unwrap()).unwrap();
        for (o, m) in out.voxels.data().iter().zip(checker.data()) {
            assert_eq!(*o, if *m == 1.0 { 9.0 } else { 0.0 });
        }
        assert!(apply_mask(&v).is_err());
    }
}
