//! Datasets, non-IID client partitioning and per-class subsampling.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// Guards `floor(fraction * n)` against `0.8 * 10 = 7.9999...` style round-off.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: features.nrows(),
                right: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row indices grouped by label, each list ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Gather rows in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
}

/// Isotropic Gaussian blobs, one per class, `n_per_class` rows each.
///
/// Class centers are drawn from a standard normal per coordinate.
pub fn generate_synthetic(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least 2"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be positive"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be positive"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::invalid("spread", "must be a finite nonnegative number"));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut center_rng = seed::rng(seed, &[0xce]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| std_normal.sample(&mut center_rng)).collect())
        .collect();

    let mut rng = seed::rng(seed, &[0x5a]);
    let n = classes * n_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..n_per_class {
            let mut row = features.row_mut(c * n_per_class + i);
            for (x, &mu) in row.iter_mut().zip(center) {
                *x = mu + spread * std_normal.sample(&mut rng);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, classes)
}

/// Header-free numeric CSV, label in the last column.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let io_err = |e: &dyn std::fmt::Display| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(&e))?;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let line = line + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "need at least one feature and a label".into(),
            });
        }
        let d = record.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(Error::Parse {
                line,
                message: format!("expected {} features, found {d}", width.unwrap_or(d)),
            });
        }
        for field in record.iter().take(d) {
            rows.push(field.parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("bad feature `{field}`: {e}"),
            })?);
        }
        let label_field = &record[d];
        let label = label_field
            .parse::<f64>()
            .ok()
            .filter(|v| *v >= 0.0 && v.fract() == 0.0)
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("bad label `{label_field}`"),
            })?;
        labels.push(label as usize);
    }
    let d = width.ok_or(Error::Empty("csv dataset"))?;
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Array2::from_shape_vec((labels.len(), d), rows).expect("row widths checked");
    LabeledDataset::new(features, labels, classes)
}

/// A client's share of the master dataset before the train/validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPartition {
    pub client_id: usize,
    pub indices_by_class: Vec<Vec<usize>>,
}

impl RawPartition {
    pub fn len(&self) -> usize {
        self.indices_by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Class-wise Dirichlet split over `k` clients.
///
/// For every class a proportion vector `p ~ Dir(alpha·1_k)` is drawn and the
/// (shuffled) class samples are dealt out as `floor(p_j·n_c)`; the leftover
/// goes to the client with the largest proportion.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<RawPartition>> {
    if k == 0 {
        return Err(Error::invalid("clients", "need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", "must be positive and finite"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;
    let mut rng = seed::rng(seed, &[0xd1]);
    let mut parts: Vec<RawPartition> = (0..k)
        .map(|client_id| RawPartition {
            client_id,
            indices_by_class: vec![Vec::new(); ds.num_classes],
        })
        .collect();

    for (c, mut members) in ds.indices_by_class().into_iter().enumerate() {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        members.shuffle(&mut rng);
        let total: f64 = draws.iter().sum();
        // Very small alpha can underflow every gamma draw to zero.
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|g| g / total).collect()
        } else {
            let mut p = vec![0.0; k];
            p[draws
                .iter()
                .enumerate()
                .fold(0, |best, (i, &g)| if g > draws[best] { i } else { best })] = 1.0;
            p
        };
        let n = members.len();
        let mut counts: Vec<usize> = props
            .iter()
            .map(|p| ((p * n as f64) + FLOOR_EPS).floor() as usize)
            .collect();
        let assigned: usize = counts.iter().sum();
        let largest = props
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > props[best] { i } else { best });
        if assigned > n {
            // Only possible through FLOOR_EPS; take the surplus back from the largest share.
            counts[largest] -= assigned - n;
        } else {
            counts[largest] += n - assigned;
        }
        let mut offset = 0;
        for (part, &count) in parts.iter_mut().zip(&counts) {
            let mut chunk = members[offset..offset + count].to_vec();
            chunk.sort_unstable();
            part.indices_by_class[c] = chunk;
            offset += count;
        }
    }
    Ok(parts)
}

/// A client's local data: per-class training indices plus a validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub train_indices_by_class: Vec<Vec<usize>>,
    pub val_indices: Vec<usize>,
}

impl ClientPartition {
    pub fn num_classes(&self) -> usize {
        self.train_indices_by_class.len()
    }

    pub fn train_class_counts(&self) -> Vec<usize> {
        self.train_indices_by_class.iter().map(Vec::len).collect()
    }

    pub fn train_len(&self) -> usize {
        self.train_indices_by_class.iter().map(Vec::len).sum()
    }

    /// Training indices, class by class.
    pub fn train_indices(&self) -> Vec<usize> {
        self.train_indices_by_class.concat()
    }
}

fn floor_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + FLOOR_EPS).floor() as usize
}

/// Per-class shuffled split; `floor(ratio·n)` (at least one) go to training.
pub fn train_val_split(raw: &RawPartition, ratio: f64, seed: u64) -> Result<ClientPartition> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split_ratio", "must lie in (0, 1)"));
    }
    let mut rng = seed::rng(seed, &[0x5b, raw.client_id as u64]);
    let mut train = Vec::with_capacity(raw.indices_by_class.len());
    let mut val = Vec::new();
    for members in &raw.indices_by_class {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let n_train = if n == 0 { 0 } else { floor_count(ratio, n).max(1) };
        let mut t = shuffled[..n_train].to_vec();
        t.sort_unstable();
        train.push(t);
        val.extend_from_slice(&shuffled[n_train..]);
    }
    val.sort_unstable();
    Ok(ClientPartition {
        client_id: raw.client_id,
        train_indices_by_class: train,
        val_indices: val,
    })
}

/// Per-class subset of a client's training split selected by an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPartitionedDataset {
    pub parent: usize,
    pub selected_indices_by_class: Vec<Vec<usize>>,
}

impl ActionPartitionedDataset {
    pub fn len(&self) -> usize {
        self.selected_indices_by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected_indices_by_class.concat()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.selected_indices_by_class.iter().map(Vec::len).collect()
    }
}

/// Number of samples a fraction selects from a class of size `n`.
pub fn selected_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        0
    } else {
        floor_count(fraction, n).clamp(1, n)
    }
}

/// Uniformly subsample `floor(f_c·|D_c|)` (minimum one) indices per class.
///
/// The selection is a prefix of a seeded shuffle, so for a fixed seed larger
/// fractions select supersets of smaller ones.
pub fn action_partition(
    p: &ClientPartition,
    fractions: &[f64],
    seed: u64,
) -> Result<ActionPartitionedDataset> {
    if fractions.len() != p.num_classes() {
        return Err(Error::LengthMismatch {
            left: p.num_classes(),
            right: fractions.len(),
        });
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::invalid("fractions", format!("{f} is outside (0, 1]")));
    }
    let selected = p
        .train_indices_by_class
        .iter()
        .zip(fractions)
        .enumerate()
        .map(|(c, (members, &f))| {
            let count = selected_count(f, members.len());
            if count == members.len() {
                return members.clone();
            }
            let mut rng = seed::rng(seed, &[0xac, p.client_id as u64, c as u64]);
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            shuffled.truncate(count);
            shuffled.sort_unstable();
            shuffled
        })
        .collect();
    Ok(ActionPartitionedDataset {
        parent: p.client_id,
        selected_indices_by_class: selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn partition_with(counts: &[usize]) -> ClientPartition {
        let mut next = 0;
        let train = counts
            .iter()
            .map(|&n| {
                let v: Vec<usize> = (next..next + n).collect();
                next += n;
                v
            })
            .collect();
        ClientPartition {
            client_id: 3,
            train_indices_by_class: train,
            val_indices: vec![],
        }
    }

    #[test]
    fn test_synthetic_zero_spread() {
        let ds = generate_synthetic(2, 5, 3, 0.0, 1).unwrap();
        for c in 0..2 {
            let rows: Vec<_> = ds.indices_by_class()[c]
                .iter()
                .map(|&i| ds.features.row(i).to_vec())
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn test_synthetic_counts_and_determinism() {
        let ds = generate_synthetic(4, 100, 8, 1.0, 5).unwrap();
        assert_eq!(ds.len(), 400);
        assert!(ds.indices_by_class().iter().all(|c| c.len() == 100));
        assert_eq!(ds, generate_synthetic(4, 100, 8, 1.0, 5).unwrap());
        assert_ne!(ds, generate_synthetic(4, 100, 8, 1.0, 6).unwrap());
    }

    #[test]
    fn test_synthetic_rejects_bad_sizes() {
        assert!(generate_synthetic(1, 5, 3, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 0, 3, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 5, 0, 1.0, 0).is_err());
    }

    #[test]
    fn test_single_client_gets_everything() {
        let ds = generate_synthetic(3, 7, 2, 1.0, 0).unwrap();
        let parts = dirichlet_partition(&ds, 1, 0.5, 9).unwrap();
        assert_eq!(parts[0].indices_by_class, ds.indices_by_class());
    }

    #[test]
    fn test_dirichlet_partition_property() {
        let ds = generate_synthetic(5, 200, 2, 1.0, 0).unwrap();
        for (alpha, seed) in [(0.05, 1), (0.5, 2), (10.0, 3)] {
            let parts = dirichlet_partition(&ds, 7, alpha, seed).unwrap();
            let mut seen = vec![false; ds.len()];
            for p in &parts {
                for (c, list) in p.indices_by_class.iter().enumerate() {
                    for &i in list {
                        assert!(!seen[i], "index {i} assigned twice");
                        assert_eq!(ds.labels[i], c);
                        seen[i] = true;
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn test_more_clients_than_samples() {
        let ds = generate_synthetic(2, 3, 2, 1.0, 0).unwrap();
        let parts = dirichlet_partition(&ds, 10, 1.0, 0).unwrap();
        assert_eq!(parts.iter().map(RawPartition::len).sum::<usize>(), 6);
    }

    #[test]
    fn test_split_eighty_twenty() {
        let raw = RawPartition {
            client_id: 0,
            indices_by_class: vec![(0..10).collect(), vec![10], vec![]],
        };
        let p = train_val_split(&raw, 0.8, 4).unwrap();
        assert_eq!(p.train_class_counts(), vec![8, 1, 0]);
        assert_eq!(p.val_indices.len(), 2);
        let train: BTreeSet<_> = p.train_indices().into_iter().collect();
        assert!(p.val_indices.iter().all(|i| !train.contains(i)));
        assert!(train_val_split(&raw, 1.0, 0).is_err());
    }

    #[test]
    fn test_action_partition_identity_and_counts() {
        let p = partition_with(&[10, 4, 0]);
        let full = action_partition(&p, &[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(full.selected_indices_by_class, p.train_indices_by_class);

        let half = action_partition(&p, &[0.5, 0.1, 0.3], 1).unwrap();
        assert_eq!(half.class_counts(), vec![5, 1, 0]);
        assert!(half.selected_indices_by_class[0]
            .iter()
            .all(|i| p.train_indices_by_class[0].contains(i)));
        assert_eq!(half, action_partition(&p, &[0.5, 0.1, 0.3], 1).unwrap());
    }

    #[test]
    fn test_action_partition_rejects_bad_fractions() {
        let p = partition_with(&[4, 4]);
        assert!(action_partition(&p, &[0.0, 1.0], 0).is_err());
        assert!(action_partition(&p, &[1.2, 1.0], 0).is_err());
        assert!(action_partition(&p, &[0.5], 0).is_err());
    }

    #[test]
    fn test_load_csv() {
        let dir = std::env::temp_dir().join(format!("fedopt-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.csv");
        std::fs::write(&path, "0.5, 1.0, 0\n-1.0, 2.0, 2\n").unwrap();
        let ds = load_csv(&path, None).unwrap();
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.labels, vec![0, 2]);
        assert_eq!(ds.features[[1, 0]], -1.0);

        std::fs::write(&path, "0.5,1.0,0\n1.0,x,1\n").unwrap();
        assert!(matches!(load_csv(&path, None), Err(Error::Parse { line: 2, .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn prop_action_partition_subset_and_monotone(
            counts in prop::collection::vec(0usize..40, 1..6),
            f1 in prop::collection::vec(0.01f64..=1.0, 6),
            f2 in prop::collection::vec(0.01f64..=1.0, 6),
            seed in any::<u64>(),
        ) {
            let p = partition_with(&counts);
            let c = counts.len();
            let lo: Vec<f64> = f1[..c].iter().zip(&f2[..c]).map(|(a, b)| a.min(*b)).collect();
            let hi: Vec<f64> = f1[..c].iter().zip(&f2[..c]).map(|(a, b)| a.max(*b)).collect();
            let small = action_partition(&p, &lo, seed).unwrap();
            let large = action_partition(&p, &hi, seed).unwrap();
            for cls in 0..c {
                let parent: BTreeSet<_> = p.train_indices_by_class[cls].iter().collect();
                prop_assert!(small.selected_indices_by_class[cls].iter().all(|i| parent.contains(i)));
                prop_assert!(small.selected_indices_by_class[cls].len() <= large.selected_indices_by_class[cls].len());
                prop_assert_eq!(small.selected_indices_by_class[cls].len(), selected_count(lo[cls], counts[cls]));
            }
        }
    }
}
