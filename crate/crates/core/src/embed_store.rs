//! Embedding datasets, GCD splits and their on-disk formats.
//!
//! `UNICEMB1` layout (little-endian, no padding):
//!
//! | bytes            | content                         |
//! |------------------|---------------------------------|
//! | 0..8             | ASCII `UNICEMB1`                |
//! | 8..12            | `u32` n                         |
//! | 12..16           | `u32` dim                       |
//! | 16               | `u8` label flag (0 or 1)        |
//! | 17..             | n·dim `f32`, row-major          |
//! | (flag = 1)       | n `i32` labels                  |

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 8] = b"UNICEMB1";
const EMB_MAGIC_STEM: &[u8; 7] = b"UNICEMB";
const EMB_HEADER_LEN: usize = 8 + 4 + 4 + 1;

/// Sentinel for a sample whose class is unknown.
pub const UNKNOWN_LABEL: i32 = -1;

/// Row limit for CSV import.
pub const CSV_MAX_ROWS: usize = 10_000;

/// An n×dim matrix of finite embeddings with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<i32>>,
}

impl EmbeddingSet {
    pub fn new(n: usize, dim: usize, data: Vec<f32>, labels: Option<Vec<i32>>) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Shape(format!("n and dim must be positive (n={n}, dim={dim})")));
        }
        if data.len() != n * dim {
            return Err(Error::Shape(format!(
                "data length {} does not match n·dim = {}",
                data.len(),
                n * dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::LabelLength { expected: n, found: l.len() });
            }
            if let Some(bad) = l.iter().find(|&&c| c < UNKNOWN_LABEL) {
                return Err(Error::InvalidArgument(format!("label {bad} is below -1")));
            }
        }
        Ok(Self { n, dim, data, labels })
    }

    /// Builds a set from nested rows; convenient for small fixtures.
    pub fn from_rows(rows: &[Vec<f32>], labels: Option<Vec<i32>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), dim, data, labels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[i32]> {
        self.labels().ok_or(Error::MissingLabels)
    }

    /// Number of distinct known classes.
    pub fn class_count(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| {
            l.iter().filter(|&&c| c >= 0).collect::<BTreeSet<_>>().len()
        })
    }

    pub fn with_labels(mut self, labels: Option<Vec<i32>>) -> Result<Self> {
        let data = std::mem::take(&mut self.data);
        Self::new(self.n, self.dim, data, labels)
    }
}

/// Serialized byte size of a `UNICEMB1` file.
pub fn emb_file_size(n: usize, dim: usize, labeled: bool) -> usize {
    EMB_HEADER_LEN + 4 * n * dim + if labeled { 4 * n } else { 0 }
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(emb_file_size(set.n, set.dim, set.labels.is_some()));
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(set.n as u32).to_le_bytes());
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    buf.push(u8::from(set.labels.is_some()));
    for v in &set.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &set.labels {
        for c in labels {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < 8 {
        return Err(Error::Truncated);
    }
    if &bytes[..8] != EMB_MAGIC {
        if &bytes[..7] == EMB_MAGIC_STEM {
            return Err(Error::UnsupportedVersion);
        }
        return Err(Error::BadMagic { expected: "UNICEMB1" });
    }
    if bytes.len() < EMB_HEADER_LEN {
        return Err(Error::Truncated);
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let flag = bytes[16];
    if flag > 1 {
        return Err(Error::InvalidArgument(format!("label flag {flag}")));
    }
    if n == 0 || dim == 0 {
        return Err(Error::Shape(format!("n and dim must be positive (n={n}, dim={dim})")));
    }
    let data_len = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Shape("dimensions overflow".into()))?;
    let payload = &bytes[EMB_HEADER_LEN..];
    if payload.len() < data_len {
        return Err(Error::Truncated);
    }
    let data: Vec<f32> = payload[..data_len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let rest = &payload[data_len..];
    let labels = if flag == 1 {
        if rest.len() != 4 * n {
            return Err(Error::LabelLength { expected: n, found: rest.len() / 4 });
        }
        Some(rest.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    } else {
        if !rest.is_empty() {
            return Err(Error::Shape(format!("{} trailing bytes", rest.len())));
        }
        None
    };
    EmbeddingSet::new(n, dim, data, labels)
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    if set.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_embeddings(set))?;
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    decode_embeddings(&fs::read(path)?)
}

/// Imports a headerless CSV (one sample per row). With `with_labels`, the
/// last column is parsed as an integer label.
pub fn read_csv(path: impl AsRef<Path>, with_labels: bool) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    let mut n = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if n >= CSV_MAX_ROWS {
            return Err(Error::InvalidArgument(format!(
                "csv import is limited to fewer than {CSV_MAX_ROWS} rows"
            )));
        }
        let fields: Vec<&str> = record.iter().collect();
        let (features, label) = if with_labels {
            match fields.split_last() {
                Some((last, rest)) => (rest, Some(*last)),
                None => (&fields[..], None),
            }
        } else {
            (&fields[..], None)
        };
        let parsed: std::result::Result<Vec<f32>, _> =
            features.iter().map(|f| f.parse::<f32>()).collect();
        let row = match parsed {
            Ok(r) => r,
            // a leading header row is tolerated
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::InvalidArgument(format!("csv line {}: {e}", line + 1))),
        };
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Shape(format!("csv line {} has {} columns", line + 1, row.len())))
            }
            _ => {}
        }
        if let Some(l) = label {
            let c = l
                .parse::<i32>()
                .map_err(|e| Error::InvalidArgument(format!("csv line {} label: {e}", line + 1)))?;
            labels.push(c);
        }
        data.extend(row);
        n += 1;
    }
    let labels = with_labels.then_some(labels);
    EmbeddingSet::new(n, dim.unwrap_or(0), data, labels)
}

/// GCD supervision structure: which samples are labeled, and which classes
/// are Old (have labeled samples) versus New.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_mask: Vec<bool>,
    pub old_classes: BTreeSet<i32>,
    pub new_classes: BTreeSet<i32>,
}

impl SplitSpec {
    /// The clustering special case: nothing labeled, every class New.
    pub fn unlabeled(set: &EmbeddingSet) -> Self {
        let new_classes = set
            .labels()
            .map(|l| l.iter().copied().filter(|&c| c >= 0).collect())
            .unwrap_or_default();
        Self { labeled_mask: vec![false; set.n()], old_classes: BTreeSet::new(), new_classes }
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_mask.iter().filter(|&&b| b).count()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled_mask[i]
    }

    pub fn validate(&self, set: &EmbeddingSet) -> Result<()> {
        if self.labeled_mask.len() != set.n() {
            return Err(Error::CountMismatch { expected: set.n(), found: self.labeled_mask.len() });
        }
        if let Some(c) = self.old_classes.intersection(&self.new_classes).next() {
            return Err(Error::InvalidArgument(format!("class {c} is both old and new")));
        }
        if self.labeled_count() == 0 {
            return Ok(());
        }
        let labels = set.require_labels()?;
        for (i, _) in self.labeled_mask.iter().enumerate().filter(|(_, &b)| b) {
            let c = labels[i];
            if c < 0 {
                return Err(Error::InvalidArgument(format!("labeled sample {i} has unknown class")));
            }
            if !self.old_classes.contains(&c) {
                return Err(Error::InvalidArgument(format!(
                    "labeled sample {i} has class {c} outside the old classes"
                )));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

// Fractions times counts such as 0.3·10 land a hair above the integer.
const FRACTION_SLACK: f64 = 1e-9;

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Marks ⌈old_class_fraction·C⌉ classes Old and labels
/// ⌊labeled_fraction·|class|⌋ samples of each Old class.
pub fn make_gcd_split(
    set: &EmbeddingSet,
    old_class_fraction: f64,
    labeled_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_with_rng(set, old_class_fraction, labeled_fraction, &mut rng)
}

fn split_with_rng(
    set: &EmbeddingSet,
    old_class_fraction: f64,
    labeled_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SplitSpec> {
    check_fraction("old_class_fraction", old_class_fraction)?;
    check_fraction("labeled_fraction", labeled_fraction)?;
    let labels = set.require_labels()?;
    let mut classes: Vec<i32> =
        labels.iter().copied().filter(|&c| c >= 0).collect::<BTreeSet<_>>().into_iter().collect();
    let n_old = ((old_class_fraction * classes.len() as f64) - FRACTION_SLACK).ceil().max(0.0) as usize;
    classes.shuffle(rng);
    let old_classes: BTreeSet<i32> = classes[..n_old].iter().copied().collect();
    let new_classes: BTreeSet<i32> = classes[n_old..].iter().copied().collect();

    let mut labeled_mask = vec![false; set.n()];
    for &c in &old_classes {
        let mut members: Vec<usize> = (0..set.n()).filter(|&i| labels[i] == c).collect();
        let take = (labeled_fraction * members.len() as f64 + FRACTION_SLACK).floor() as usize;
        members.shuffle(rng);
        for &i in &members[..take.min(members.len())] {
            labeled_mask[i] = true;
        }
    }
    Ok(SplitSpec { labeled_mask, old_classes, new_classes })
}

/// Parameters of the synthetic isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub k: usize,
    pub dim: usize,
    pub n: usize,
    /// Minimum distance between component means, in units of the
    /// (unit) component standard deviation.
    pub separation: f64,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub old_class_fraction: f64,
}

impl MixtureParams {
    pub fn new(n: usize, dim: usize, k: usize, separation: f64, seed: u64) -> Self {
        Self { k, dim, n, separation, seed, labeled_fraction: 0.0, old_class_fraction: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dim must be at least 1".into()));
        }
        if self.n < self.k {
            return Err(Error::InvalidArgument(format!("n = {} is below k = {}", self.n, self.k)));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::InvalidArgument("separation must be finite and nonnegative".into()));
        }
        check_fraction("labeled_fraction", self.labeled_fraction)?;
        check_fraction("old_class_fraction", self.old_class_fraction)
    }
}

/// Component means: standard-normal draws rescaled so the closest pair sits
/// exactly `separation` apart.
fn mixture_means(k: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut means: Vec<f64> = (0..k * dim).map(|_| StandardNormal.sample(rng)).collect();
    if k == 1 {
        means.iter_mut().for_each(|m| *m = 0.0);
        return means;
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = (0..dim)
                .map(|t| (means[a * dim + t] - means[b * dim + t]).powi(2))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if min_dist > 0.0 {
        let scale = separation / min_dist;
        means.iter_mut().for_each(|m| *m *= scale);
    }
    means
}

/// Samples a balanced isotropic mixture and its GCD split. Output is a pure
/// function of `params`.
pub fn generate_gaussian_mixture(params: &MixtureParams) -> Result<(EmbeddingSet, SplitSpec)> {
    params.validate()?;
    let MixtureParams { k, dim, n, .. } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let means = mixture_means(k, dim, params.separation, &mut rng);

    let mut class_of: Vec<i32> = (0..k)
        .flat_map(|c| std::iter::repeat_n(c as i32, n / k + usize::from(c < n % k)))
        .collect();
    class_of.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * dim);
    for &c in &class_of {
        let mean = &means[c as usize * dim..(c as usize + 1) * dim];
        for &m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((m + z) as f32);
        }
    }
    let set = EmbeddingSet::new(n, dim, data, Some(class_of))?;
    let split =
        split_with_rng(&set, params.old_class_fraction, params.labeled_fraction, &mut rng)?;
    Ok((set, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> EmbeddingSet {
        EmbeddingSet::from_rows(
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            Some(vec![0, 1, 1]),
        )
        .unwrap()
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.emb");
        let set = small();
        write_embeddings(&set, &path).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), set);
    }

    #[test]
    fn single_value_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.emb");
        let set = EmbeddingSet::new(1, 1, vec![0.0], None).unwrap();
        write_embeddings(&set, &path).unwrap();
        // magic + n + dim + flag + one f32
        assert_eq!(fs::metadata(&path).unwrap().len(), 8 + 4 + 4 + 1 + 4);
        assert_eq!(emb_file_size(1, 1, false), 21);
    }

    #[test]
    fn nan_is_rejected() {
        let err = EmbeddingSet::new(1, 2, vec![1.0, f32::NAN], None).unwrap_err();
        assert_eq!(err.to_string(), "non-finite data");
    }

    #[test]
    fn other_version_is_unsupported() {
        let mut bytes = encode_embeddings(&small());
        bytes[7] = b'2';
        assert_eq!(decode_embeddings(&bytes).unwrap_err().to_string(), "unsupported format version");
        bytes[0] = b'X';
        assert!(matches!(decode_embeddings(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_embeddings(&small());
        let err = decode_embeddings(&bytes[..bytes.len() - 20]).unwrap_err();
        assert_eq!(err.to_string(), "truncated payload");
        assert!(matches!(decode_embeddings(&bytes[..10]), Err(Error::Truncated)));
    }

    #[test]
    fn label_block_mismatch() {
        let mut bytes = encode_embeddings(&small());
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(decode_embeddings(&bytes), Err(Error::LabelLength { .. })));
    }

    #[test]
    fn csv_import_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "a,b,label\n1.0,2.0,0\n3,4,1\n").unwrap();
        let set = read_csv(&path, true).unwrap();
        assert_eq!(set.n(), 2);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.labels(), Some(&[0, 1][..]));
        // without labels the last column is just another feature
        let plain = read_csv(&path, false).unwrap();
        assert_eq!((plain.n(), plain.dim()), (2, 3));
        assert!(plain.labels().is_none());
        fs::write(&path, "1,2,0
3,x,1
").unwrap();
        assert!(matches!(read_csv(&path, true), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn csv_row_limit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.csv");
        fs::write(&path, "0.5\n".repeat(CSV_MAX_ROWS + 1)).unwrap();
        assert!(read_csv(&path, false).is_err());
    }

    fn mixture(k: usize, n: usize, sep: f64, seed: u64) -> MixtureParams {
        MixtureParams { k, dim: 2, n, separation: sep, seed, labeled_fraction: 0.5, old_class_fraction: 0.5 }
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let a = generate_gaussian_mixture(&mixture(3, 30, 5.0, 7)).unwrap();
        let b = generate_gaussian_mixture(&mixture(3, 30, 5.0, 7)).unwrap();
        let c = generate_gaussian_mixture(&mixture(3, 30, 5.0, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.data(), c.0.data());
    }

    #[test]
    fn generator_balances_classes() {
        let (set, _) = generate_gaussian_mixture(&mixture(3, 11, 5.0, 1)).unwrap();
        let labels = set.labels().unwrap();
        let counts: Vec<usize> = (0..3).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        assert_eq!(counts, vec![4, 4, 3]);
    }

    #[test]
    fn generator_means_respect_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means = mixture_means(6, 4, 2.5, &mut rng);
        for a in 0..6 {
            for b in a + 1..6 {
                let d: f64 =
                    (0..4).map(|t| (means[a * 4 + t] - means[b * 4 + t]).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 2.5 * (1.0 - 1e-12), "means {a},{b} at {d}");
            }
        }
    }

    #[test]
    fn single_component_has_single_label() {
        let (set, _) = generate_gaussian_mixture(&mixture(1, 5, 1.0, 0)).unwrap();
        assert!(set.labels().unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn generator_rejects_n_below_k() {
        assert!(generate_gaussian_mixture(&mixture(4, 3, 1.0, 0)).is_err());
        let mut p = mixture(0, 3, 1.0, 0);
        assert!(generate_gaussian_mixture(&p).is_err());
        p.k = 2;
        p.labeled_fraction = 1.5;
        assert!(generate_gaussian_mixture(&p).is_err());
    }

    fn ten_classes() -> EmbeddingSet {
        let n = 100;
        let labels: Vec<i32> = (0..n).map(|i| (i % 10) as i32).collect();
        EmbeddingSet::new(n, 1, (0..n).map(|i| i as f32).collect(), Some(labels)).unwrap()
    }

    #[test]
    fn half_old_half_labeled() {
        let set = ten_classes();
        let split = make_gcd_split(&set, 0.5, 0.5, 11).unwrap();
        assert_eq!(split.old_classes.len(), 5);
        assert_eq!(split.new_classes.len(), 5);
        let labels = set.labels().unwrap();
        for &c in &split.old_classes {
            let labeled = (0..set.n()).filter(|&i| labels[i] == c && split.is_labeled(i)).count();
            assert_eq!(labeled, 5);
        }
        split.validate(&set).unwrap();
        assert_eq!(split, make_gcd_split(&set, 0.5, 0.5, 11).unwrap());
    }

    #[test]
    fn odd_class_sizes_floor() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1];
        let set = EmbeddingSet::new(7, 1, vec![0.0; 7], Some(labels)).unwrap();
        let split = make_gcd_split(&set, 1.0, 0.5, 0).unwrap();
        assert_eq!(split.labeled_count(), 1 + 2);
    }

    #[test]
    fn zero_labeled_fraction_is_clustering() {
        let split = make_gcd_split(&ten_classes(), 0.5, 0.0, 3).unwrap();
        assert!(split.labeled_mask.iter().all(|&b| !b));
    }

    #[test]
    fn fully_supervised_boundary() {
        let set = ten_classes();
        let split = make_gcd_split(&set, 1.0, 1.0, 3).unwrap();
        assert!(split.labeled_mask.iter().all(|&b| b));
        assert!(split.new_classes.is_empty());
        split.validate(&set).unwrap();
    }

    #[test]
    fn split_requires_labels() {
        let set = EmbeddingSet::new(2, 1, vec![0.0, 1.0], None).unwrap();
        assert!(matches!(make_gcd_split(&set, 0.5, 0.5, 0), Err(Error::MissingLabels)));
    }

    #[test]
    fn split_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let split = make_gcd_split(&ten_classes(), 0.3, 0.5, 9).unwrap();
        assert_eq!(split.old_classes.len(), 3);
        split.write_json(&path).unwrap();
        assert_eq!(SplitSpec::read_json(&path).unwrap(), split);
    }

    fn arb_set() -> impl Strategy<Value = EmbeddingSet> {
        (1usize..12, 1usize..6, any::<bool>()).prop_flat_map(|(n, dim, labeled)| {
            let data = proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO, n * dim);
            let labels = proptest::collection::vec(-1i32..50, n);
            (data, labels).prop_map(move |(d, l)| {
                EmbeddingSet::new(n, dim, d, labeled.then_some(l)).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(set in arb_set()) {
            let bytes = encode_embeddings(&set);
            prop_assert_eq!(bytes.len(), emb_file_size(set.n(), set.dim(), set.labels().is_some()));
            let back = decode_embeddings(&bytes).unwrap();
            prop_assert_eq!(encode_embeddings(&back), bytes);
        }

        #[test]
        fn generated_splits_are_sound(
            seed in 0u64..1000, k in 1usize..8, lf in 0.0f64..=1.0, of in 0.0f64..=1.0
        ) {
            let p = MixtureParams { k, dim: 3, n: 40, separation: 2.0, seed, labeled_fraction: lf, old_class_fraction: of };
            let (set, split) = generate_gaussian_mixture(&p).unwrap();
            split.validate(&set).unwrap();
            let labels = set.labels().unwrap();
            for i in 0..set.n() {
                if split.is_labeled(i) {
                    prop_assert!(split.old_classes.contains(&labels[i]));
                }
            }
        }
    }
}
