//! Synthetic chest-CT-like lesion phantoms with known lesion masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{Class, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_PLACEMENT_TRIES: usize = 500;

/// How lesions of one class are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionRule {
    /// Inclusive lesion count range.
    pub count: [usize; 2],
    /// In-plane radius range in voxels.
    pub radius: [f64; 2],
    pub intensity: f64,
    /// Restrict centres to the outer band of the lung.
    pub peripheral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Inclusive slice-count range; each volume draws its own.
    pub slices: [usize; 2],
    pub height: usize,
    pub width: usize,
    /// Slice count at which lesions are isotropic. The through-plane radius
    /// scales with `S / reference_slices` so preprocessed lesions keep their
    /// shape.
    pub reference_slices: usize,
    pub body_intensity: f64,
    pub lung_intensity: f64,
    pub vessel_intensity: f64,
    pub vessel_count: [usize; 2],
    pub cp: LesionRule,
    pub ncp: LesionRule,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            slices: [12, 40],
            height: 40,
            width: 40,
            reference_slices: 16,
            body_intensity: 100.0,
            lung_intensity: 30.0,
            vessel_intensity: 70.0,
            vessel_count: [3, 6],
            cp: LesionRule { count: [1, 2], radius: [3.0, 4.5], intensity: 200.0, peripheral: false },
            ncp: LesionRule { count: [4, 7], radius: [2.2, 3.0], intensity: 90.0, peripheral: true },
            noise: 6.0,
            seed: 0,
        }
    }
}

/// A rendered ellipsoid, in voxel coordinates `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

impl Blob {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub lesions: Vec<Blob>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.slices[0] == 0 || self.slices[0] > self.slices[1] {
            return bad(format!("invalid slice range {:?}", self.slices));
        }
        if self.height < 8 || self.width < 8 || self.reference_slices == 0 {
            return bad(format!("phantom extent {}x{} too small", self.height, self.width));
        }
        for (name, r) in [("cp", &self.cp), ("ncp", &self.ncp)] {
            if r.count[0] > r.count[1] || r.radius[0] <= 0.0 || r.radius[0] > r.radius[1] {
                return bad(format!("invalid {} lesion rule {:?}", name, r));
            }
        }
        if self.vessel_count[0] > self.vessel_count[1] || self.noise < 0.0 {
            return bad("invalid vessel range or noise".into());
        }
        Ok(())
    }

    fn z_scale(&self, s: usize) -> f64 {
        s as f64 / self.reference_slices as f64
    }
}

struct Lungs {
    s: usize,
    h: usize,
    w: usize,
}

impl Lungs {
    // Normalised elliptic radius of (z,y,x) within either lung, < 1 inside.
    fn radius(&self, z: f64, y: f64, x: f64) -> f64 {
        let (h, w, s) = (self.h as f64, self.w as f64, self.s as f64);
        // lungs narrow towards apex and base
        let t = (z + 0.5) / s * 2.0 - 1.0;
        let taper = (1.0 - 0.5 * t * t).sqrt();
        let (ry, rx) = (0.3 * h * taper, 0.18 * w * taper);
        let cy = 0.5 * h - 0.5;
        [0.5 * w - 0.5 - 0.2 * w, 0.5 * w - 0.5 + 0.2 * w]
            .iter()
            .map(|&cx| (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    fn inside(&self, z: usize, y: usize, x: usize) -> bool {
        self.radius(z as f64, y as f64, x as f64) < 1.0
    }

    fn body(&self, y: usize, x: usize) -> bool {
        let (h, w) = (self.h as f64, self.w as f64);
        let dy = (y as f64 - (0.5 * h - 0.5)) / (0.46 * h);
        let dx = (x as f64 - (0.5 * w - 0.5)) / (0.46 * w);
        dy * dy + dx * dx < 1.0
    }
}

fn blob_voxels(b: &Blob, ext: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let range = move |a: usize| {
        let lo = (b.center[a] - b.radii[a]).floor().max(0.0) as usize;
        let hi = ((b.center[a] + b.radii[a]).ceil() as usize).min(ext[a] - 1);
        lo..=hi
    };
    range(0).flat_map(move |z| {
        range(1).flat_map(move |y| range(2).filter_map(move |x| b.contains(z, y, x).then_some((z, y, x))))
    })
}

fn place_lesion(rng: &mut ChaCha8Rng, spec: &PhantomSpec, rule: &LesionRule, lungs: &Lungs) -> Result<Blob> {
    let ext = [lungs.s, lungs.h, lungs.w];
    for _ in 0..MAX_PLACEMENT_TRIES {
        let r = rng.gen_range(rule.radius[0]..=rule.radius[1]);
        let radii = [(r * spec.z_scale(lungs.s)).max(0.6), r, r];
        let center = [
            rng.gen_range(0.0..lungs.s as f64 - 1.0).max(0.0),
            rng.gen_range(0.0..lungs.h as f64 - 1.0),
            rng.gen_range(0.0..lungs.w as f64 - 1.0),
        ];
        let rc = lungs.radius(center[0], center[1], center[2]);
        if rc >= 1.0 || (rule.peripheral && rc < 0.55) {
            continue;
        }
        let blob = Blob { center, radii, intensity: rule.intensity };
        let mut any = false;
        let mut all_in = true;
        for (z, y, x) in blob_voxels(&blob, ext) {
            any = true;
            all_in &= lungs.inside(z, y, x);
        }
        if any && all_in {
            return Ok(blob);
        }
    }
    Err(Error::Data(format!(
        "could not place a lesion of radius {:?} inside the lungs after {} tries",
        rule.radius, MAX_PLACEMENT_TRIES
    )))
}

/// Phantom `index` of the dataset described by `spec`. Each index has its own
/// random stream so volumes can be generated independently.
pub fn generate_phantom(spec: &PhantomSpec, index: usize, label: Class) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = rng.gen_range(spec.slices[0]..=spec.slices[1]);
    let (h, w) = (spec.height, spec.width);
    let lungs = Lungs { s, h, w };
    let plane = h * w;
    let mut vox = vec![0.0; s * plane];
    let mut lung = vec![0.0; s * plane];
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let i = z * plane + y * w + x;
                if lungs.inside(z, y, x) {
                    lung[i] = 1.0;
                    vox[i] = spec.lung_intensity;
                } else if lungs.body(y, x) {
                    vox[i] = spec.body_intensity;
                }
            }
        }
    }

    // vessel-like streaks: thin segments clipped to the lungs
    let n_vessels = rng.gen_range(spec.vessel_count[0]..=spec.vessel_count[1]);
    for _ in 0..n_vessels {
        let a = [rng.gen_range(0.0..s as f64), rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)];
        let b = [rng.gen_range(0.0..s as f64), rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)];
        let steps = 4 * (s + h + w);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let p: Vec<usize> = (0..3).map(|d| (a[d] + t * (b[d] - a[d])).round() as usize).collect();
            let (z, y, x) = (p[0].min(s - 1), p[1].min(h - 1), p[2].min(w - 1));
            if lung[z * plane + y * w + x] == 1.0 {
                vox[z * plane + y * w + x] = spec.vessel_intensity;
            }
        }
    }

    let rule = match label {
        Class::CP => Some(&spec.cp),
        Class::NCP => Some(&spec.ncp),
        Class::Normal => None,
    };
    let mut lesions = Vec::new();
    let mut lesion_mask = vec![0.0; s * plane];
    if let Some(rule) = rule {
        let n = rng.gen_range(rule.count[0]..=rule.count[1]);
        for _ in 0..n {
            let blob = place_lesion(&mut rng, spec, rule, &lungs)?;
            for (z, y, x) in blob_voxels(&blob, [s, h, w]) {
                let i = z * plane + y * w + x;
                vox[i] = blob.intensity;
                lesion_mask[i] = 1.0;
            }
            lesions.push(blob);
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in vox.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in vox.iter_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }

    let shape = vec![s, h, w];
    let volume = Volume::new(format!("phantom-{:05}", index), Tensor::new(shape.clone(), vox)?, label)?
        .with_mask(Tensor::new(shape.clone(), lung)?)?
        .with_lesion(Tensor::new(shape, lesion_mask)?)?;
    Ok(Phantom { volume, lesions })
}

/// `count` phantoms with classes cycling CP, NCP, Normal.
pub fn generate_phantoms(spec: &PhantomSpec, count: usize) -> Result<Vec<Phantom>> {
    (0..count).map(|i| generate_phantom(spec, i, Class::ALL[i % 3])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = PhantomSpec { seed: 4, ..Default::default() };
        let a = generate_phantoms(&spec, 9).unwrap();
        let b = generate_phantoms(&spec, 9).unwrap();
        assert_eq!(a, b);
        for c in Class::ALL {
            assert_eq!(a.iter().filter(|p| p.volume.label == c).count(), 3);
        }
        let other = generate_phantoms(&PhantomSpec { seed: 5, ..spec }, 9).unwrap();
        assert_ne!(a[0].volume.voxels, other[0].volume.voxels);
    }

    #[test]
    fn lesion_mask_matches_blobs() {
        let spec = PhantomSpec { noise: 0.0, ..Default::default() };
        for p in generate_phantoms(&spec, 12).unwrap() {
            let [s, h, w] = p.volume.extents();
            let mask = p.volume.lesion.as_ref().unwrap().data();
            for z in 0..s {
                for y in 0..h {
                    for x in 0..w {
                        let inside = p.lesions.iter().any(|b| b.contains(z, y, x));
                        assert_eq!(mask[(z * h + y) * w + x] == 1.0, inside);
                    }
                }
            }
            assert_eq!(p.lesions.is_empty(), p.volume.label == Class::Normal);
        }
    }

    #[test]
    fn infeasible_placement() {
        let mut spec = PhantomSpec::default();
        spec.cp.radius = [30.0, 30.0];
        assert!(matches!(generate_phantom(&spec, 0, Class::CP), Err(Error::Data(_))));
    }
}
