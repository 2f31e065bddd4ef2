//! Seeded, class-stratified train/validation/test assignment.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split {:?}", s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn of(m: &Manifest) -> Self {
        let mut c = Self::default();
        for r in &m.records {
            match r.split {
                Some(Split::Train) => c.train += 1,
                Some(Split::Val) => c.val += 1,
                Some(Split::Test) => c.test += 1,
                None => {}
            }
        }
        c
    }
}

/// Largest-remainder apportionment of `n` items by `ratios`. Ties go to the
/// earlier split.
pub(crate) fn apportion(n: usize, ratios: [usize; 3]) -> [usize; 3] {
    let total: usize = ratios.iter().sum();
    let mut counts = [0; 3];
    let mut rem = [(0usize, 0usize); 3];
    for j in 0..3 {
        counts[j] = n * ratios[j] / total;
        rem[j] = (n * ratios[j] % total, j);
    }
    let left = n - counts.iter().sum::<usize>();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, j) in rem.iter().take(left) {
        counts[j] += 1;
    }
    counts
}

/// Evenly interleaved label sequence with exact per-split totals: at each step
/// the split furthest behind its pro-rata share is emitted.
fn interleave(totals: [usize; 3]) -> Vec<usize> {
    let n: usize = totals.iter().sum();
    let mut assigned = [0usize; 3];
    (0..n)
        .map(|k| {
            let deficit = |j: usize| (totals[j] * (k + 1)) as i128 - (assigned[j] * n) as i128;
            let j = (0..3).fold(0, |best, j| if deficit(j) > deficit(best) { j } else { best });
            assigned[j] += 1;
            j
        })
        .collect()
}

/// Assign every record to a split. Overall counts follow `ratios` with
/// largest-remainder rounding. Records are grouped by class, shuffled within
/// each class, and dealt an evenly interleaved split sequence so every class
/// is represented close to pro rata.
pub fn split(manifest: &Manifest, ratios: [usize; 3], seed: u64) -> Result<Manifest> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::Config(format!("split ratios must be positive, got {:?}", ratios)));
    }
    let n = manifest.records.len();
    if n < ratios.len() {
        return Err(Error::Data(format!("{} records cannot fill {} splits", n, ratios.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // stable sort keeps the shuffled order inside each class
    order.sort_by_key(|&i| manifest.records[i].label);
    let seq = interleave(apportion(n, ratios));
    let mut out = manifest.clone();
    for (pos, &i) in order.iter().enumerate() {
        out.records[i].split = Some(Split::ALL[seq[pos]]);
    }
    Ok(out)
}
