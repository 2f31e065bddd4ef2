//! Heat maps from the first attention module and from class activation
//! mapping, overlap scoring against lesion masks, and scalar map export.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{argmax, auc, roc_curve};
use crate::model::Model;
use crate::ops::{ResampleMode, ResizePlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatSource {
    Attention,
    Cam,
}

/// How the channel axis of an attention map is collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelReduce {
    #[default]
    Mean,
    Max,
}

/// Values in `[0, 1]` on the input grid `[D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub values: Tensor,
    pub source: HeatSource,
    pub scan_id: String,
    pub target_class: Option<usize>,
}

/// Min-max scaling to `[0, 1]`; a flat map becomes all 0.5.
pub fn normalize_min_max(values: &mut [f64]) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = 0.5);
        return;
    }
    let span = hi - lo;
    values.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// `[1, C, d, h, w]` or `[C, d, h, w]` -> `[d, h, w]`.
pub fn reduce_channels(map: &Tensor, reduce: ChannelReduce) -> Result<Tensor> {
    let s = map.shape();
    let (c, sp) = match s.len() {
        5 if s[0] == 1 => (s[1], &s[2..]),
        4 => (s[0], &s[1..]),
        _ => return Err(Error::Shape(format!("expected one sample's [C, D, H, W] map, got {:?}", s))),
    };
    let m: usize = sp.iter().product();
    let d = map.data();
    let out = (0..m)
        .map(|i| {
            let vals = (0..c).map(|ch| d[ch * m + i]);
            match reduce {
                ChannelReduce::Mean => vals.sum::<f64>() / c as f64,
                ChannelReduce::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Tensor::new(sp.to_vec(), out)
}

/// Trilinear resize of a `[d, h, w]` map to `target`.
pub fn upsample(map: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::Rank(format!("expected a rank-3 map, got {:?}", s)));
    }
    let plan = ResizePlan::new([s[0], s[1], s[2]], target, ResampleMode::Trilinear)?;
    let (out, _) = plan.forward(map.data(), &[1, 1, s[0], s[1], s[2]])?;
    Tensor::new(target.to_vec(), out)
}

/// Reduce, upsample and normalise a captured attention map.
pub fn attention_map_to_heat(map: &Tensor, target: [usize; 3], reduce: ChannelReduce) -> Result<Tensor> {
    let mut up = upsample(&reduce_channels(map, reduce)?, target)?;
    normalize_min_max(up.data_mut());
    Ok(up)
}

/// Raw class activation map `sum_c w[class, c] * A_c` of one sample's
/// `[1, C, d, h, w]` features, before clamping.
pub fn class_activation(features: &Tensor, fc_weight: &Tensor, class: usize) -> Result<Tensor> {
    let s = features.shape();
    let w = fc_weight.shape();
    if s.len() != 5 || s[0] != 1 || w.len() != 2 || w[1] != s[1] {
        return Err(Error::Shape(format!("features {:?} do not match FC weight {:?}", s, w)));
    }
    if class >= w[0] {
        return Err(Error::Label { label: class, classes: w[0] });
    }
    let (c, m) = (s[1], s[2] * s[3] * s[4]);
    let row = &fc_weight.data()[class * c..(class + 1) * c];
    let mut out = vec![0.0; m];
    for (ch, &wc) in row.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(&features.data()[ch * m..(ch + 1) * m]) {
            *o += wc * a;
        }
    }
    Tensor::new(s[2..].to_vec(), out)
}

/// Clamp, upsample and normalise a class activation map.
pub fn cam_to_heat(features: &Tensor, fc_weight: &Tensor, class: usize, target: [usize; 3]) -> Result<Tensor> {
    let raw = class_activation(features, fc_weight, class)?.map(|v| v.max(0.0));
    let mut up = upsample(&raw, target)?;
    normalize_min_max(up.data_mut());
    Ok(up)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub attention: bool,
    pub cam: bool,
    pub reduce: ChannelReduce,
    /// CAM class; the predicted class when `None`.
    pub cam_class: Option<usize>,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { attention: true, cam: true, reduce: ChannelReduce::Mean, cam_class: None }
    }
}

#[derive(Debug, Clone)]
pub struct Explanation {
    /// `[1, num_classes]`, from the same forward pass that produced the maps.
    pub logits: Tensor,
    pub predicted: usize,
    pub attention: Option<HeatMap>,
    pub cam: Option<HeatMap>,
}

/// One forward pass of a single sample `[1, Cin, D, H, W]`, capturing the maps
/// requested by `opts`.
pub fn explain(model: &Model, input: &Tensor, scan_id: &str, opts: &ExplainOptions) -> Result<Explanation> {
    let s = input.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(Error::Shape(format!("explain takes a single [1, C, D, H, W] sample, got {:?}", s)));
    }
    if opts.attention && model.plan.attention_module_count() == 0 {
        return Err(Error::Capability("model has no attention modules to visualise".into()));
    }
    let target = [s[2], s[3], s[4]];
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let out = model.forward(&mut tape, &pv, x)?;
    let logits = tape.value(out.logits).clone();
    let predicted = argmax(logits.data());
    let attention = if opts.attention {
        let values = attention_map_to_heat(tape.value(out.attention_maps[0]), target, opts.reduce)?;
        Some(HeatMap { values, source: HeatSource::Attention, scan_id: scan_id.into(), target_class: None })
    } else {
        None
    };
    let cam = if opts.cam {
        let class = opts.cam_class.unwrap_or(predicted);
        let w = model.params.get(model.plan.fc().weight());
        let values = cam_to_heat(tape.value(out.features), w, class, target)?;
        Some(HeatMap { values, source: HeatSource::Cam, scan_id: scan_id.into(), target_class: Some(class) })
    } else {
        None
    };
    Ok(Explanation { logits, predicted, attention, cam })
}

pub fn attention_heatmap(model: &Model, input: &Tensor, scan_id: &str) -> Result<HeatMap> {
    let opts = ExplainOptions { cam: false, ..Default::default() };
    Ok(explain(model, input, scan_id, &opts)?.attention.expect("requested"))
}

pub fn cam_heatmap(model: &Model, input: &Tensor, scan_id: &str, class: usize) -> Result<HeatMap> {
    let opts = ExplainOptions { attention: false, cam_class: Some(class), ..Default::default() };
    Ok(explain(model, input, scan_id, &opts)?.cam.expect("requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// Mean heat inside the lesion minus mean heat outside.
    pub difference: f64,
    /// Heat as a voxel-level lesion detector.
    pub auc: f64,
}

pub fn overlap_score(heat: &Tensor, lesion: &Tensor) -> Result<Overlap> {
    if heat.shape() != lesion.shape() {
        return Err(Error::Shape(format!("heat map {:?} vs lesion mask {:?}", heat.shape(), lesion.shape())));
    }
    let truth: Vec<bool> = lesion.data().iter().map(|&m| m > 0.5).collect();
    let inside = truth.iter().filter(|&&t| t).count();
    if inside == 0 {
        return Err(Error::Data("lesion mask is empty".into()));
    }
    if inside == truth.len() {
        return Err(Error::Data("lesion mask covers the whole volume".into()));
    }
    let (mut sin, mut sout) = (0.0, 0.0);
    for (&h, &t) in heat.data().iter().zip(&truth) {
        if t {
            sin += h;
        } else {
            sout += h;
        }
    }
    let difference = sin / inside as f64 - sout / (truth.len() - inside) as f64;
    Ok(Overlap { difference, auc: auc(&roc_curve(heat.data(), &truth)?)? })
}

fn check_map(h: &Tensor) -> Result<[usize; 3]> {
    match h.shape() {
        &[d, r, c] => Ok([d, r, c]),
        s => Err(Error::Rank(format!("heat map must be rank 3, got {:?}", s))),
    }
}

/// One binary PGM per slice, `<stem>_<slice>.pgm`, pixel `round(255 * v)`.
pub fn write_pgm_stack(h: &Tensor, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let [d, rows, cols] = check_map(h)?;
    fs::create_dir_all(dir)?;
    let digits = d.to_string().len().max(3);
    let plane = rows * cols;
    (0..d)
        .map(|z| {
            let path = dir.join(format!("{}_{:0width$}.pgm", stem, z, width = digits));
            let mut f = BufWriter::new(fs::File::create(&path)?);
            write!(f, "P5\n{} {}\n255\n", cols, rows)?;
            let bytes: Vec<u8> =
                h.data()[z * plane..(z + 1) * plane].iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect();
            f.write_all(&bytes)?;
            f.flush()?;
            Ok(path)
        })
        .collect()
}

/// Read one P5 slice written by [`write_pgm_stack`], scaled back to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = || Error::Format(format!("{} is not an 8-bit P5 image", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (cols, rows) = (num(&fields[1])?, num(&fields[2])?);
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + rows * cols {
        return Err(bad());
    }
    Tensor::new(vec![rows, cols], bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect())
}

/// `slice,row,col,value` rows with round-trip exact values.
pub fn write_csv(h: &Tensor, path: &Path) -> Result<()> {
    let [d, rows, cols] = check_map(h)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "slice,row,col,value")?;
    let mut it = h.data().iter();
    for z in 0..d {
        for r in 0..rows {
            for c in 0..cols {
                writeln!(f, "{},{},{},{}", z, r, c, it.next().expect("length checked"))?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path, shape: [usize; 3]) -> Result<Tensor> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Tensor::zeros(&shape);
    let [_, rows, cols] = shape;
    for (n, line) in f.lines().enumerate().skip(1) {
        let line = line?;
        let bad = || Error::Format(format!("{}:{}: malformed row", path.display(), n + 1));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let idx = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        let (z, r, c) = (idx(0)?, idx(1)?, idx(2)?);
        if z >= shape[0] || r >= rows || c >= cols {
            return Err(bad());
        }
        out.data_mut()[(z * rows + r) * cols + c] = parts[3].parse::<f64>().map_err(|_| bad())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_map_is_half() {
        let mut v = vec![3.0; 5];
        normalize_min_max(&mut v);
        assert!(v.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn single_channel_full_resolution_is_min_max() {
        let m = Tensor::from_fn(&[1, 1, 2, 3, 3], |i| (i as f64 * 0.37).sin());
        let h = attention_map_to_heat(&m, [2, 3, 3], ChannelReduce::Mean).unwrap();
        let mut expect = m.data().to_vec();
        normalize_min_max(&mut expect);
        assert_eq!(h.data(), &expect[..]);
    }

    #[test]
    fn cam_weighted_sum_is_clamped() {
        let f = Tensor::from_fn(&[1, 2, 1, 2, 2], |i| [1.0, 2.0, 3.0, 4.0, 3.0, 3.0, 3.0, 3.0][i]);
        let w = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let raw = class_activation(&f, &w, 0).unwrap();
        assert_eq!(raw.data(), &[-1.0, 1.0, 3.0, 5.0]);
        let heat = cam_to_heat(&f, &w, 0, [1, 2, 2]).unwrap();
        assert_eq!(heat.data(), &[0.0, 0.2, 0.6, 1.0]);
        assert!(matches!(class_activation(&f, &w, 1), Err(Error::Label { .. })));
        let zero = cam_to_heat(&f, &Tensor::zeros(&[1, 2]), 0, [1, 2, 2]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn overlap_examples() {
        let mask = Tensor::from_fn(&[1, 2, 4], |i| (i % 3 == 0) as u8 as f64);
        let o = overlap_score(&mask, &mask).unwrap();
        assert_eq!((o.difference, o.auc), (1.0, 1.0));
        let o = overlap_score(&Tensor::full(&[1, 2, 4], 0.3), &mask).unwrap();
        assert_eq!((o.difference, o.auc), (0.0, 0.5));
        assert!(overlap_score(&mask, &Tensor::zeros(&[1, 2, 4])).is_err());
    }

    #[test]
    fn exports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = Tensor::from_fn(&[3, 2, 5], |i| (i as f64 / 29.0).powf(1.3));
        let paths = write_pgm_stack(&h, dir.path(), "scan").unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[1].ends_with("scan_001.pgm"));
        for (z, p) in paths.iter().enumerate() {
            let s = read_pgm(p).unwrap();
            for (a, b) in s.data().iter().zip(&h.data()[z * 10..(z + 1) * 10]) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let ones = write_pgm_stack(&Tensor::ones(&[1, 2, 2]), dir.path(), "ones").unwrap();
        assert!(fs::read(&ones[0]).unwrap().ends_with(&[255; 4]));
        let csv = dir.path().join("h.csv");
        write_csv(&h, &csv).unwrap();
        assert_eq!(read_csv(&csv, [3, 2, 5]).unwrap(), h);
    }
}
