//! Second-order cleaning, positive/negative samplers and neighbor
//! statistics.
//!
//! `UNICNBR1` layout (little-endian): magic, `u32` n, `u32` tau1, `u32`
//! tau2, `u32` eta, then per anchor `u8` was_cleaned, `u32` union_size,
//! `u32` count, count × `u32` indices, `f32` negative_radius, `u32`
//! negative_tiebreak. The stored indices are the mined (pre-cleaning) list;
//! the cleaned list of a cleaned anchor is the anchor alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::embed_store::{EmbeddingSet, SplitSpec};
use crate::error::{Error, Result};
use crate::knn::{self, RankedNeighborhood};

pub const NBR_MAGIC: &[u8; 8] = b"UNICNBR1";

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorNeighbors {
    /// Mined first-order list, anchor first.
    pub mined: Vec<u32>,
    pub was_cleaned: bool,
    /// Cardinality of the union of the mined lists of every mined neighbor.
    pub union_size: u32,
    pub negative_radius: f32,
    pub negative_tiebreak: u32,
}

/// Cleaned positives, cleaning flags and negative cutoffs for every anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub tau1: usize,
    pub tau2: usize,
    pub eta: usize,
    pub anchors: Vec<AnchorNeighbors>,
}

impl NeighborIndex {
    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    pub fn mined(&self, anchor: usize) -> &[u32] {
        &self.anchors[anchor].mined
    }

    /// The mined list, or the anchor alone when it was cleaned.
    pub fn cleaned_positives(&self, anchor: usize) -> &[u32] {
        let a = &self.anchors[anchor];
        if a.was_cleaned {
            &a.mined[..1]
        } else {
            &a.mined
        }
    }

    pub fn was_cleaned(&self, anchor: usize) -> bool {
        self.anchors[anchor].was_cleaned
    }

    pub fn removed_fraction(&self) -> f64 {
        self.anchors.iter().filter(|a| a.was_cleaned).count() as f64 / self.n() as f64
    }

    pub fn is_negative(&self, set: &EmbeddingSet, anchor: usize, j: usize) -> bool {
        knn::ranks_beyond(set, anchor, self.anchors[anchor].negative_tiebreak, j)
    }

    /// Mines and cleans in one go.
    pub fn build(set: &EmbeddingSet, tau1: usize, tau2: usize, eta: usize) -> Result<Self> {
        let nbs = knn::compute_neighborhoods(set, tau1, tau2)?;
        Ok(clean(&nbs, tau2, eta))
    }

    /// Re-applies cleaning at a different threshold; union sizes are kept.
    pub fn with_eta(&self, eta: usize) -> Self {
        let anchors = self
            .anchors
            .iter()
            .map(|a| AnchorNeighbors { was_cleaned: a.union_size as usize > eta, ..a.clone() })
            .collect();
        Self { eta, anchors, ..*self }
    }

    pub fn check_against(&self, set: &EmbeddingSet) -> Result<()> {
        if self.n() != set.n() {
            return Err(Error::CountMismatch { expected: set.n(), found: self.n() });
        }
        Ok(())
    }
}

/// |⋃_{j ∈ N(anchor)} N(j)| over the mined lists.
pub fn second_order_union_size(neighborhoods: &[RankedNeighborhood], anchor: usize) -> usize {
    let mut seen = vec![false; neighborhoods.len()];
    union_with(neighborhoods, anchor, &mut seen, &mut Vec::new())
}

fn union_with(nbs: &[RankedNeighborhood], anchor: usize, seen: &mut [bool], touched: &mut Vec<u32>) -> usize {
    touched.clear();
    for &j in &nbs[anchor].positives {
        for &m in &nbs[j as usize].positives {
            if !seen[m as usize] {
                seen[m as usize] = true;
                touched.push(m);
            }
        }
    }
    for &m in touched.iter() {
        seen[m as usize] = false;
    }
    touched.len()
}

/// Discards the mined list of every anchor whose second-order union exceeds
/// `eta`; those anchors keep only themselves as positives.
pub fn clean(neighborhoods: &[RankedNeighborhood], tau2: usize, eta: usize) -> NeighborIndex {
    let n = neighborhoods.len();
    let tau1 = neighborhoods.first().map_or(0, |nb| nb.positives.len());
    let anchors = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![false; n], Vec::new()),
            |(seen, touched), i| {
                let union_size = union_with(neighborhoods, i, seen, touched);
                let nb = &neighborhoods[i];
                AnchorNeighbors {
                    mined: nb.positives.clone(),
                    was_cleaned: union_size > eta,
                    union_size: union_size as u32,
                    negative_radius: nb.negative_radius,
                    negative_tiebreak: nb.negative_tiebreak,
                }
            },
        )
        .collect();
    NeighborIndex { tau1, tau2, eta, anchors }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Cluster,
    Gcd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveSource {
    /// Same-class labeled samples (labeled anchors only).
    Labeled,
    Mined,
    Cleaned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    /// Different-class labeled samples with probability α, mined otherwise.
    Labeled,
    Mined,
    Random,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(Mode { Cluster => "cluster", Gcd => "gcd" });
text_enum!(PositiveSource { Labeled => "labeled", Mined => "mined", Cleaned => "cleaned" });
text_enum!(NegativeSource { Labeled => "labeled", Mined => "mined", Random => "random" });

/// Where positives and negatives come from, separately for labeled and
/// unlabeled anchors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisionConfig {
    pub mode: Mode,
    pub positive_source_labeled: PositiveSource,
    pub positive_source_unlabeled: PositiveSource,
    pub negative_source_labeled: NegativeSource,
    pub negative_source_unlabeled: NegativeSource,
    /// Share of labeled anchors' negatives drawn from other labeled classes
    /// when the labeled negative source is `Labeled`.
    pub labeled_negative_fraction: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self::clustering()
    }
}

impl SupervisionConfig {
    pub fn clustering() -> Self {
        Self {
            mode: Mode::Cluster,
            positive_source_labeled: PositiveSource::Cleaned,
            positive_source_unlabeled: PositiveSource::Cleaned,
            negative_source_labeled: NegativeSource::Mined,
            negative_source_unlabeled: NegativeSource::Mined,
            labeled_negative_fraction: 0.5,
        }
    }

    fn gcd(pl: PositiveSource, pu: PositiveSource, nl: NegativeSource, nu: NegativeSource) -> Self {
        Self {
            mode: Mode::Gcd,
            positive_source_labeled: pl,
            positive_source_unlabeled: pu,
            negative_source_labeled: nl,
            negative_source_unlabeled: nu,
            labeled_negative_fraction: 0.5,
        }
    }

    /// Labeled / Mined / Random / Random.
    pub fn gcd_random_negatives() -> Self {
        use {NegativeSource::Random, PositiveSource::*};
        Self::gcd(Labeled, Mined, Random, Random)
    }

    /// Labeled / Cleaned / Mined / Mined.
    pub fn gcd_mined_negatives() -> Self {
        use {NegativeSource::Mined as NMined, PositiveSource::*};
        Self::gcd(Labeled, Cleaned, NMined, NMined)
    }

    /// Labeled / Cleaned / Labeled / Mined.
    pub fn gcd_labeled_negatives() -> Self {
        use PositiveSource::*;
        Self::gcd(Labeled, Cleaned, NegativeSource::Labeled, NegativeSource::Mined)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_source_unlabeled == PositiveSource::Labeled
            || self.negative_source_unlabeled == NegativeSource::Labeled
        {
            return Err(Error::InvalidArgument("unlabeled anchors cannot use labeled sources".into()));
        }
        if !(0.0..=1.0).contains(&self.labeled_negative_fraction) {
            return Err(Error::InvalidArgument("labeled_negative_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Draws positives and negatives for anchors under a supervision config.
pub struct Sampler<'a> {
    set: &'a EmbeddingSet,
    index: &'a NeighborIndex,
    split: Option<&'a SplitSpec>,
    cfg: SupervisionConfig,
    labels: Option<&'a [i32]>,
    labeled_by_class: BTreeMap<i32, Vec<u32>>,
    labeled: Vec<u32>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        set: &'a EmbeddingSet,
        index: &'a NeighborIndex,
        split: Option<&'a SplitSpec>,
        cfg: SupervisionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        index.check_against(set)?;
        let split = match cfg.mode {
            Mode::Cluster => None,
            Mode::Gcd => Some(split.ok_or_else(|| Error::InvalidArgument("gcd mode requires a split".into()))?),
        };
        let mut labeled_by_class: BTreeMap<i32, Vec<u32>> = BTreeMap::new();
        let mut labeled = Vec::new();
        let mut labels = None;
        if let Some(split) = split {
            split.validate(set)?;
            if split.labeled_count() > 0 {
                let l = set.require_labels()?;
                labels = Some(l);
                for i in (0..set.n()).filter(|&i| split.is_labeled(i)) {
                    labeled_by_class.entry(l[i]).or_default().push(i as u32);
                    labeled.push(i as u32);
                }
            }
        }
        Ok(Self { set, index, split, cfg, labels, labeled_by_class, labeled })
    }

    fn labeled_class(&self, anchor: usize) -> Option<i32> {
        match (self.split, self.labels) {
            (Some(split), Some(labels)) if split.is_labeled(anchor) => Some(labels[anchor]),
            _ => None,
        }
    }

    pub fn sample_positive<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Result<usize> {
        let class = self.labeled_class(anchor);
        let source = if class.is_some() {
            self.cfg.positive_source_labeled
        } else {
            self.cfg.positive_source_unlabeled
        };
        let pool: &[u32] = match source {
            PositiveSource::Labeled => match class.and_then(|c| self.labeled_by_class.get(&c)) {
                Some(p) => p,
                None => return Err(Error::EmptyPositiveSet(anchor)),
            },
            PositiveSource::Mined => self.index.mined(anchor),
            PositiveSource::Cleaned => self.index.cleaned_positives(anchor),
        };
        if pool.is_empty() {
            return Err(Error::EmptyPositiveSet(anchor));
        }
        Ok(pool[rng.random_range(0..pool.len())] as usize)
    }

    pub fn sample_negative<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Result<usize> {
        let class = self.labeled_class(anchor);
        let source = if class.is_some() {
            self.cfg.negative_source_labeled
        } else {
            self.cfg.negative_source_unlabeled
        };
        match source {
            NegativeSource::Mined => self.mined_negative(anchor, rng),
            NegativeSource::Random => {
                let n = self.set.n();
                if n < 2 {
                    return Err(Error::EmptyNegativeSet);
                }
                let j = rng.random_range(0..n - 1);
                Ok(if j >= anchor { j + 1 } else { j })
            }
            NegativeSource::Labeled => {
                let c = class.expect("labeled source applies to labeled anchors only");
                let other_classes = self.labeled_by_class.len() > 1;
                if other_classes && rng.random::<f64>() < self.cfg.labeled_negative_fraction {
                    let labels = self.labels.expect("labels present when samples are labeled");
                    loop {
                        let j = self.labeled[rng.random_range(0..self.labeled.len())] as usize;
                        if labels[j] != c {
                            return Ok(j);
                        }
                    }
                }
                self.mined_negative(anchor, rng)
            }
        }
    }

    /// Rejection sampling: uniform over the whole set until the draw ranks
    /// beyond tau2.
    fn mined_negative<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Result<usize> {
        if self.index.tau2 >= self.set.n() {
            return Err(Error::EmptyNegativeSet);
        }
        loop {
            let j = rng.random_range(0..self.set.n());
            if self.index.is_negative(self.set, anchor, j) {
                return Ok(j);
            }
        }
    }

    pub fn split(&self) -> Option<&SplitSpec> {
        self.split
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub eta: usize,
    pub removed_fraction: f64,
    /// NaN when no anchor is retained.
    pub retained_purity: f64,
    /// NaN when no anchor is removed.
    pub removed_purity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    /// (union size, anchor count), ascending by size.
    pub union_histogram: Vec<(usize, usize)>,
    pub rows: Vec<StatsRow>,
}

pub const STATS_HEADER: &str = "eta,removed_fraction,retained_purity,removed_purity";

impl StatsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(STATS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.eta, r.removed_fraction, r.retained_purity, r.removed_purity));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("union_size,count\n");
        for (size, count) in &self.union_histogram {
            out.push_str(&format!("{size},{count}\n"));
        }
        out
    }
}

/// `steps` evenly spaced thresholds from tau1 to tau1², deduplicated.
pub fn eta_sweep(tau1: usize, steps: usize) -> Vec<usize> {
    let (lo, hi) = (tau1, tau1 * tau1);
    if steps <= 1 || lo == hi {
        return vec![hi];
    }
    let mut etas: Vec<usize> = (0..steps)
        .map(|s| lo + ((hi - lo) as f64 * s as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    etas.dedup();
    etas
}

/// Union-size histogram, and for each threshold the removed fraction and
/// the purity of the mined lists (self excluded) of retained versus removed
/// anchors.
pub fn neighbor_stats(index: &NeighborIndex, labels: &[i32], etas: &[usize]) -> Result<StatsReport> {
    if labels.len() != index.n() {
        return Err(Error::CountMismatch { expected: index.n(), found: labels.len() });
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for a in &index.anchors {
        *histogram.entry(a.union_size as usize).or_default() += 1;
    }
    // per anchor: (union size, same-class count, compared count)
    let per_anchor: Vec<(usize, usize, usize)> = index
        .anchors
        .iter()
        .enumerate()
        .filter(|&(i, _)| labels[i] >= 0)
        .map(|(i, a)| {
            let same = a.mined[1..].iter().filter(|&&j| labels[j as usize] == labels[i]).count();
            (a.union_size as usize, same, a.mined.len() - 1)
        })
        .collect();
    if per_anchor.is_empty() {
        return Err(Error::MissingLabels);
    }
    let ratio = |same: usize, total: usize| if total == 0 { f64::NAN } else { same as f64 / total as f64 };
    let rows = etas
        .iter()
        .map(|&eta| {
            let (mut kept, mut dropped) = ((0, 0), (0, 0));
            let mut removed = 0usize;
            for &(u, same, total) in &per_anchor {
                let bucket = if u > eta {
                    removed += 1;
                    &mut dropped
                } else {
                    &mut kept
                };
                bucket.0 += same;
                bucket.1 += total;
            }
            StatsRow {
                eta,
                removed_fraction: removed as f64 / per_anchor.len() as f64,
                retained_purity: ratio(kept.0, kept.1),
                removed_purity: ratio(dropped.0, dropped.1),
            }
        })
        .collect();
    Ok(StatsReport { union_histogram: histogram.into_iter().collect(), rows })
}

/// Byte size of a `UNICNBR1` file.
pub fn nbr_file_size(index: &NeighborIndex) -> usize {
    8 + 16 + index.anchors.iter().map(|a| 1 + 4 + 4 + 4 * a.mined.len() + 4 + 4).sum::<usize>()
}

pub fn encode_index(index: &NeighborIndex) -> Vec<u8> {
    let mut buf = Vec::with_capacity(nbr_file_size(index));
    buf.extend_from_slice(NBR_MAGIC);
    for v in [index.n(), index.tau1, index.tau2, index.eta] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for a in &index.anchors {
        buf.push(u8::from(a.was_cleaned));
        buf.extend_from_slice(&a.union_size.to_le_bytes());
        buf.extend_from_slice(&(a.mined.len() as u32).to_le_bytes());
        for &j in &a.mined {
            buf.extend_from_slice(&j.to_le_bytes());
        }
        buf.extend_from_slice(&a.negative_radius.to_le_bytes());
        buf.extend_from_slice(&a.negative_tiebreak.to_le_bytes());
    }
    buf
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<NeighborIndex> {
    if bytes.len() < 8 {
        return Err(Error::Truncated);
    }
    if &bytes[..8] != NBR_MAGIC {
        if &bytes[..7] == &NBR_MAGIC[..7] {
            return Err(Error::UnsupportedVersion);
        }
        return Err(Error::BadMagic { expected: "UNICNBR1" });
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let n = cur.u32()? as usize;
    let tau1 = cur.u32()? as usize;
    let tau2 = cur.u32()? as usize;
    let eta = cur.u32()? as usize;
    let mut anchors = Vec::with_capacity(n.min(bytes.len() / 21));
    for i in 0..n {
        let was_cleaned = match cur.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::InvalidArgument(format!("anchor {i}: cleaning flag {other}"))),
        };
        let union_size = cur.u32()?;
        let count = cur.u32()? as usize;
        if count == 0 || count > n {
            return Err(Error::InvalidArgument(format!("anchor {i}: positive count {count}")));
        }
        let raw = cur.take(4 * count)?;
        let mined: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        if mined[0] as usize != i || mined.iter().any(|&j| j as usize >= n) {
            return Err(Error::InvalidArgument(format!("anchor {i}: malformed positive list")));
        }
        let negative_radius = cur.f32()?;
        let negative_tiebreak = cur.u32()?;
        if negative_tiebreak as usize >= n {
            return Err(Error::InvalidArgument(format!("anchor {i}: tiebreak out of range")));
        }
        anchors.push(AnchorNeighbors { mined, was_cleaned, union_size, negative_radius, negative_tiebreak });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Shape(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(NeighborIndex { tau1, tau2, eta, anchors })
}

pub fn write_index(index: &NeighborIndex, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_index(index))?;
    w.flush()?;
    Ok(())
}

pub fn read_index(path: impl AsRef<Path>) -> Result<NeighborIndex> {
    decode_index(&fs::read(path)?)
}

/// Reads an index and checks it was built over `set`.
pub fn read_index_for(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<NeighborIndex> {
    let index = read_index(path)?;
    index.check_against(set)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_store::{generate_gaussian_mixture, make_gcd_split, MixtureParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line() -> EmbeddingSet {
        EmbeddingSet::new(4, 1, vec![0.0, 1.0, 2.0, 10.0], None).unwrap()
    }

    #[test]
    fn union_on_a_line() {
        let nbs = knn::compute_neighborhoods(&line(), 2, 3).unwrap();
        assert_eq!(second_order_union_size(&nbs, 0), 2);
        let nbs = knn::compute_neighborhoods(&line(), 1, 3).unwrap();
        assert!((0..4).all(|i| second_order_union_size(&nbs, i) == 1));
    }

    /// Anchor at the origin with its two neighbors on separate spokes; each
    /// neighbor's own list runs outward along its spoke, so the second-order
    /// lists overlap only in their heads. That is the largest union possible:
    /// tau1 + (tau1 - 1)², i.e. 7 for tau1 = 3.
    #[test]
    fn fanned_out_union_is_maximal() {
        let mut rows = vec![vec![0.0f32, 0.0]];
        for (x, y) in [(-0.5f32, 0.866f32), (-0.5, -0.866)] {
            for r in [1.0f32, 1.1, 1.2] {
                rows.push(vec![x * r, y * r]);
            }
        }
        let set = EmbeddingSet::from_rows(&rows, None).unwrap();
        let nbs = knn::compute_neighborhoods(&set, 3, 4).unwrap();
        assert_eq!(nbs[0].positives, vec![0, 1, 4]);
        assert_eq!(nbs[1].positives, vec![1, 2, 3]);
        assert_eq!(nbs[4].positives, vec![4, 5, 6]);
        assert_eq!(second_order_union_size(&nbs, 0), 3 + 2 * 2);
    }

    #[test]
    fn eta_extremes() {
        let (set, _) = generate_gaussian_mixture(&MixtureParams::new(120, 4, 3, 1.0, 4)).unwrap();
        let nbs = knn::compute_neighborhoods(&set, 5, 60).unwrap();
        assert!(clean(&nbs, 60, 25).anchors.iter().all(|a| !a.was_cleaned));
        let all = clean(&nbs, 60, 0);
        assert!(all.anchors.iter().enumerate().all(|(i, a)| a.was_cleaned && all.cleaned_positives(i) == [i as u32]));
        let idx = clean(&nbs, 60, 12);
        for (i, a) in idx.anchors.iter().enumerate() {
            let u = a.union_size as usize;
            assert!((5..=25).contains(&u));
            if !a.was_cleaned {
                assert!(u <= 12);
                assert_eq!(idx.cleaned_positives(i), &nbs[i].positives[..]);
            }
        }
    }

    #[test]
    fn negative_on_a_line_is_always_the_far_point() {
        let set = line();
        let index = NeighborIndex::build(&set, 2, 3, 4).unwrap();
        let sampler = Sampler::new(&set, &index, None, SupervisionConfig::clustering()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert_eq!(sampler.sample_negative(0, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn full_tau2_has_no_negatives() {
        let set = line();
        let index = NeighborIndex::build(&set, 2, 4, 4).unwrap();
        let sampler = Sampler::new(&set, &index, None, SupervisionConfig::clustering()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sampler.sample_negative(0, &mut rng).unwrap_err();
        assert_eq!(err.to_string(), "empty negative set");
    }

    #[test]
    fn cleaned_anchor_returns_itself() {
        let set = line();
        let index = NeighborIndex::build(&set, 2, 3, 0).unwrap();
        let sampler = Sampler::new(&set, &index, None, SupervisionConfig::clustering()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for a in 0..4 {
            assert!(index.was_cleaned(a));
            for _ in 0..20 {
                assert_eq!(sampler.sample_positive(a, &mut rng).unwrap(), a);
            }
        }
    }

    fn mixture(n: usize, k: usize, sep: f64, seed: u64) -> (EmbeddingSet, SplitSpec) {
        let p = MixtureParams {
            k,
            dim: 8,
            n,
            separation: sep,
            seed,
            labeled_fraction: 0.5,
            old_class_fraction: 0.5,
        };
        generate_gaussian_mixture(&p).unwrap()
    }

    #[test]
    fn labeled_positives_share_class() {
        let (set, _) = mixture(60, 6, 3.0, 9);
        let split = make_gcd_split(&set, 0.5, 0.5, 1).unwrap();
        let index = NeighborIndex::build(&set, 4, 30, 16).unwrap();
        let sampler = Sampler::new(&set, &index, Some(&split), SupervisionConfig::gcd_mined_negatives()).unwrap();
        let labels = set.labels().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for a in (0..60).filter(|&a| split.is_labeled(a)) {
            for _ in 0..50 {
                let p = sampler.sample_positive(a, &mut rng).unwrap();
                assert_eq!(labels[p], labels[a]);
                assert!(split.is_labeled(p));
            }
        }
    }

    #[test]
    fn cleaned_positives_are_pure_on_separated_data() {
        let (set, _) = mixture(500, 5, 12.0, 2);
        let index = NeighborIndex::build(&set, 10, 250, 70).unwrap();
        let sampler = Sampler::new(&set, &index, None, SupervisionConfig::clustering()).unwrap();
        let labels = set.labels().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut same = 0;
        for t in 0..10_000 {
            let a = t % 500;
            same += usize::from(labels[sampler.sample_positive(a, &mut rng).unwrap()] == labels[a]);
        }
        assert!(same as f64 / 1e4 >= 0.99);
    }

    #[test]
    fn mined_negatives_rarely_share_class() {
        let k = 10;
        let (set, _) = mixture(1000, k, 3.0, 5);
        let index = NeighborIndex::build(&set, 10, 500, 70).unwrap();
        let sampler = Sampler::new(&set, &index, None, SupervisionConfig::clustering()).unwrap();
        let labels = set.labels().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut same = 0;
        let draws = 10_000;
        for t in 0..draws {
            let a = t % 1000;
            let j = sampler.sample_negative(a, &mut rng).unwrap();
            assert!(index.is_negative(&set, a, j));
            same += usize::from(labels[j] == labels[a]);
        }
        assert!((same as f64 / draws as f64) < 2.0 / k as f64);
    }

    #[test]
    fn random_negatives_exclude_anchor_only() {
        let set = line();
        let index = NeighborIndex::build(&set, 1, 2, 4).unwrap();
        let (set_l, _) = (set.clone().with_labels(Some(vec![0, 0, 1, 1])).unwrap(), ());
        let split = SplitSpec::unlabeled(&set_l);
        let sampler = Sampler::new(&set_l, &index, Some(&split), SupervisionConfig::gcd_random_negatives()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = [0usize; 4];
        for _ in 0..3000 {
            seen[sampler.sample_negative(1, &mut rng).unwrap()] += 1;
        }
        assert_eq!(seen[1], 0);
        assert!(seen.iter().enumerate().filter(|&(j, _)| j != 1).all(|(_, &c)| c > 800));
    }

    #[test]
    fn labeled_negative_mixing_fraction() {
        let (set, split) = mixture(200, 4, 6.0, 3);
        let index = NeighborIndex::build(&set, 5, 100, 25).unwrap();
        let mut cfg = SupervisionConfig::gcd_labeled_negatives();
        let labels = set.labels().unwrap();
        let anchor = (0..200).find(|&i| split.is_labeled(i)).unwrap();
        let count_labeled_draws = |cfg: SupervisionConfig| {
            let sampler = Sampler::new(&set, &index, Some(&split), cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut from_labeled = 0;
            for _ in 0..4000 {
                let j = sampler.sample_negative(anchor, &mut rng).unwrap();
                assert_ne!(labels[j], labels[anchor]);
                from_labeled += usize::from(split.is_labeled(j) && !index.is_negative(&set, anchor, j));
                if !split.is_labeled(j) {
                    assert!(index.is_negative(&set, anchor, j));
                }
            }
            from_labeled
        };
        cfg.labeled_negative_fraction = 1.0;
        let all_labeled = Sampler::new(&set, &index, Some(&split), cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            assert!(split.is_labeled(all_labeled.sample_negative(anchor, &mut rng).unwrap()));
        }
        cfg.labeled_negative_fraction = 0.0;
        assert_eq!(count_labeled_draws(cfg), 0);
    }

    #[test]
    fn gcd_requires_split() {
        let set = line();
        let index = NeighborIndex::build(&set, 1, 2, 4).unwrap();
        assert!(Sampler::new(&set, &index, None, SupervisionConfig::gcd_mined_negatives()).is_err());
        let mut bad = SupervisionConfig::clustering();
        bad.positive_source_unlabeled = PositiveSource::Labeled;
        assert!(Sampler::new(&set, &index, None, bad).is_err());
    }

    #[test]
    fn positive_draws_are_uniform() {
        let (set, _) = mixture(100, 2, 20.0, 1);
        let index = NeighborIndex::build(&set, 10, 50, 100).unwrap();
        let sampler = Sampler::new(&set, &index, None, SupervisionConfig::clustering()).unwrap();
        let anchor = 17;
        let pool = index.cleaned_positives(anchor).to_vec();
        assert_eq!(pool.len(), 10);
        let mut counts = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000usize;
        for _ in 0..draws {
            *counts.entry(sampler.sample_positive(anchor, &mut rng).unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square, 9 degrees of freedom, upper 0.001 quantile
        assert!(chi2 < 27.877, "chi2 = {chi2}");
    }

    #[test]
    fn stats_on_separated_data() {
        let (set, _) = mixture(300, 3, 25.0, 6);
        let index = NeighborIndex::build(&set, 10, 150, 70).unwrap();
        let etas = eta_sweep(10, 10);
        assert_eq!(etas.first(), Some(&10));
        assert_eq!(etas.last(), Some(&100));
        let report = neighbor_stats(&index, set.labels().unwrap(), &etas).unwrap();
        for row in &report.rows {
            if !row.retained_purity.is_nan() {
                assert_eq!(row.retained_purity, 1.0);
            }
        }
        let last = report.rows.last().unwrap();
        assert_eq!(last.removed_fraction, 0.0);
        assert!(last.removed_purity.is_nan());
        assert_eq!(report.union_histogram.iter().map(|h| h.1).sum::<usize>(), 300);
        assert!(report.to_csv().starts_with(STATS_HEADER));
    }

    #[test]
    fn retained_purity_dominates_on_overlap() {
        let (set, _) = mixture(600, 6, 2.0, 12);
        let index = NeighborIndex::build(&set, 10, 300, 70).unwrap();
        let report = neighbor_stats(&index, set.labels().unwrap(), &eta_sweep(10, 30)).unwrap();
        for row in report.rows.iter().filter(|r| !r.retained_purity.is_nan() && !r.removed_purity.is_nan()) {
            assert!(row.retained_purity >= row.removed_purity, "{row:?}");
        }
    }

    #[test]
    fn index_round_trip_and_size() {
        let (set, _) = mixture(2000, 4, 3.0, 1);
        let index = NeighborIndex::build(&set, 10, 1000, 70).unwrap();
        let bytes = encode_index(&index);
        assert_eq!(bytes.len(), 24 + 2000 * (1 + 4 + 4 + 40 + 4 + 4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.nbr");
        write_index(&index, &path).unwrap();
        assert_eq!(read_index_for(&path, &set).unwrap(), index);
        let other = EmbeddingSet::new(3, 1, vec![0.0; 3], None).unwrap();
        assert!(matches!(read_index_for(&path, &other), Err(Error::CountMismatch { .. })));
        assert!(matches!(decode_index(&bytes[..bytes.len() - 3]), Err(Error::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_index(&bad), Err(Error::BadMagic { .. })));
    }

    proptest! {
        #[test]
        fn cleaning_is_monotone_and_bounded(seed in 0u64..500, e1 in 0usize..40, e2 in 0usize..40) {
            let (set, _) = mixture(60, 3, 1.5, seed);
            let tau1 = 6;
            let nbs = knn::compute_neighborhoods(&set, tau1, 30).unwrap();
            let (lo, hi) = (e1.min(e2), e1.max(e2));
            let a = clean(&nbs, 30, lo);
            let b = clean(&nbs, 30, hi);
            for i in 0..60 {
                let u = a.anchors[i].union_size as usize;
                prop_assert!(tau1 <= u && u <= tau1 * tau1);
                prop_assert_eq!(u, second_order_union_size(&nbs, i));
                if !a.was_cleaned(i) {
                    prop_assert!(!b.was_cleaned(i));
                }
            }
            prop_assert_eq!(a.with_eta(hi), b);
        }
    }
}
