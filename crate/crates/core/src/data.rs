//! Dataset ingestion and generation: synthetic Gaussian blobs as a
//! desk-scale stand-in for pre-extracted CNN features, a CSV reader/writer
//! for real feature files, per-class even splitting, and the per-class
//! training-set reduction protocol.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
    /// Removed from training by the reduction protocol; never evaluated.
    Excluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    File,
}

/// Feature matrix (one sample per column) with integer labels and
/// per-sample split tags. Immutable after construction; the split
/// transformations return new datasets sharing nothing mutable.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    split: Vec<SplitTag>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        split: Vec<SplitTag>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = features.cols();
        if labels.len() != n || split.len() != n {
            return Err(Error::Argument(format!(
                "dataset with {n} feature columns, {} labels, {} split tags",
                labels.len(),
                split.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label,
                classes: class_count,
            });
        }
        if !features.is_finite() {
            return Err(Error::Argument("dataset features contain non-finite values".into()));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            split,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> &[SplitTag] {
        &self.split
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    /// Classes with no samples at all (possible when a label file skips
    /// class ids); callers should warn about them.
    pub fn empty_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.class_count];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.class_count).filter(|&c| !seen[c]).collect()
    }

    /// Gather the feature columns and labels carrying `tag`.
    pub fn subset(&self, tag: SplitTag) -> (Matrix, Vec<usize>) {
        let idx = self.indices(tag);
        let features = Matrix::from_fn(self.dim(), idx.len(), |r, c| {
            self.features.get(r, idx[c])
        });
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (features, labels)
    }

    /// Every class must appear in both the train and the test split.
    pub fn validate_for_training(&self) -> Result<()> {
        let mut in_train = vec![false; self.class_count];
        let mut in_test = vec![false; self.class_count];
        for i in 0..self.len() {
            match self.split[i] {
                SplitTag::Train => in_train[self.labels[i]] = true,
                SplitTag::Test => in_test[self.labels[i]] = true,
                SplitTag::Excluded => {}
            }
        }
        for c in 0..self.class_count {
            if !in_train[c] || !in_test[c] {
                return Err(Error::Argument(format!(
                    "class {c} missing from the {} split",
                    if in_train[c] { "test" } else { "train" }
                )));
            }
        }
        Ok(())
    }

    /// Re-tag every sample by splitting each class evenly at random (odd
    /// class sizes put the extra sample in the train split). Clears any
    /// reduction exclusions.
    pub fn resplit_even(&self, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = vec![SplitTag::Test; self.len()];
        for class in 0..self.class_count {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            if members.len() < 2 {
                return Err(Error::Argument(format!(
                    "class {class} has {} samples; need at least 2 to split",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            let train_count = members.len().div_ceil(2);
            for &i in &members[..train_count] {
                split[i] = SplitTag::Train;
            }
        }
        let mut out = self.clone();
        out.split = split;
        Ok(out)
    }

    /// Remove exactly `n_remove` uniformly chosen training samples per
    /// class (they become `Excluded`); the test split is untouched.
    pub fn reduce_training(&self, n_remove: usize, seed: u64) -> Result<Dataset> {
        if n_remove == 0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = self.split.clone();
        for class in 0..self.class_count {
            let mut train_members: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class && self.split[i] == SplitTag::Train)
                .collect();
            if train_members.len() <= n_remove {
                return Err(Error::Argument(format!(
                    "removing {n_remove} training samples would leave class {class} with {} (need >= 1)",
                    train_members.len().saturating_sub(n_remove)
                )));
            }
            train_members.shuffle(&mut rng);
            for &i in &train_members[..n_remove] {
                split[i] = SplitTag::Excluded;
            }
        }
        let mut out = self.clone();
        out.split = split;
        Ok(out)
    }
}

/// Minimum pairwise angle enforced between synthetic class means.
const MEAN_MIN_ANGLE_DEG: f64 = 60.0;
const MEAN_PLACEMENT_ATTEMPTS: usize = 200;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn place_means(
    k: usize,
    dim: usize,
    min_angle_deg: f64,
    attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let max_cos = min_angle_deg.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut placed = false;
        for _ in 0..attempts {
            let candidate = random_unit_vector(dim, rng);
            if means.iter().all(|m| dot(m, &candidate) <= max_cos) {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Geometry {
                k,
                dim,
                min_angle_deg,
            });
        }
    }
    Ok(means)
}

/// Synthetic k-class benchmark: class means are random unit vectors kept at
/// pairwise angles of at least 60 degrees, samples add isotropic Gaussian
/// noise. Deterministic per seed.
pub fn generate_blobs(
    k: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if dim < k {
        return Err(Error::Config(format!(
            "feature dim {dim} must be at least the class count {k}"
        )));
    }
    if train_per_class == 0 || test_per_class == 0 {
        return Err(Error::Config(
            "train_per_class and test_per_class must be >= 1".into(),
        ));
    }
    if noise_scale < 0.0 {
        return Err(Error::Config(format!("noise_scale must be >= 0, got {noise_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = place_means(k, dim, MEAN_MIN_ANGLE_DEG, MEAN_PLACEMENT_ATTEMPTS, &mut rng)?;

    let per_class = train_per_class + test_per_class;
    let n = k * per_class;
    let mut features = Matrix::zeros(dim, n);
    let mut labels = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let mut col = 0;
    for (class, mean) in means.iter().enumerate() {
        for s in 0..per_class {
            for (r, &m) in mean.iter().enumerate() {
                features.set(r, col, m + noise_scale * gaussian(&mut rng));
            }
            labels.push(class);
            split.push(if s < train_per_class {
                SplitTag::Train
            } else {
                SplitTag::Test
            });
            col += 1;
        }
    }
    Dataset::new(features, labels, k, split, Provenance::Synthetic)
}

/// Read a feature CSV: first column integer label, remaining columns real
/// features, optional leading comment lines starting with '#'. Every sample
/// is tagged `Train`; callers split before training.
pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut dim: Option<usize> = None;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or("").trim();
        let label: usize = label_field.parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("expected an integer class label, got {label_field:?}"),
        })?;
        let values: Vec<f64> = fields
            .enumerate()
            .map(|(col, f)| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad feature value {:?} in column {}", f.trim(), col + 2),
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "row has a label but no features".into(),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("ragged row: {} features, expected {d}", values.len()),
                });
            }
            Some(_) => {}
        }
        labels.push(label);
        rows.push(values);
    }
    let dim = dim.ok_or(Error::Parse {
        line: 0,
        message: "file contains no data rows".into(),
    })?;
    let n = rows.len();
    let features = Matrix::from_fn(dim, n, |r, c| rows[c][r]);
    let class_count = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(
        features,
        labels,
        class_count,
        vec![SplitTag::Train; n],
        Provenance::File,
    )
}

/// Deterministic CSV writer matching `load_features`: one sample per line,
/// label first, features with shortest round-trip formatting.
pub fn write_features(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..data.len() {
        write!(out, "{}", data.labels()[i]).expect("string write");
        for r in 0..data.dim() {
            write!(out, ",{}", data.features().get(r, i)).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blobs_zero_noise_samples_equal_their_mean() {
        let data = generate_blobs(3, 6, 4, 2, 0.0, 5).unwrap();
        // All samples of a class are identical and unit norm.
        for class in 0..3 {
            let members: Vec<usize> = (0..data.len())
                .filter(|&i| data.labels()[i] == class)
                .collect();
            let first = data.features().column(members[0]);
            assert!((dot(&first, &first).sqrt() - 1.0).abs() < 1e-12);
            for &i in &members[1..] {
                assert_eq!(data.features().column(i), first);
            }
        }
    }

    #[test]
    fn blobs_same_seed_bit_identical() {
        let a = generate_blobs(4, 16, 10, 5, 0.3, 99).unwrap();
        let b = generate_blobs(4, 16, 10, 5, 0.3, 99).unwrap();
        assert_eq!(a.features().data(), b.features().data());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.split(), b.split());
    }

    #[test]
    fn blobs_class_balance_exact() {
        let data = generate_blobs(5, 8, 7, 3, 0.2, 1).unwrap();
        for class in 0..5 {
            let train = (0..data.len())
                .filter(|&i| data.labels()[i] == class && data.split()[i] == SplitTag::Train)
                .count();
            let test = (0..data.len())
                .filter(|&i| data.labels()[i] == class && data.split()[i] == SplitTag::Test)
                .count();
            assert_eq!((train, test), (7, 3));
        }
        data.validate_for_training().unwrap();
    }

    #[test]
    fn blob_means_respect_angle_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means = place_means(6, 12, 60.0, 200, &mut rng).unwrap();
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                assert!(dot(&means[i], &means[j]) <= 60f64.to_radians().cos() + 1e-12);
            }
        }
    }

    #[test]
    fn mean_placement_can_fail_in_tight_geometry() {
        // Three directions pairwise >= 150 degrees apart do not fit in a
        // plane; bounded resampling must give up.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = place_means(3, 2, 150.0, 50, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Geometry { .. }));
    }

    #[test]
    fn load_three_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        std::fs::write(&path, "0,1.5,2.5\n1,-1,0.25\n0,0,3\n").unwrap();
        let data = load_features(&path).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.dim(), 2);
        assert_eq!(data.class_count(), 2);
        assert_eq!(data.labels(), &[0, 1, 0]);
        assert_eq!(data.features().get(1, 1), 0.25);
    }

    #[test]
    fn load_skips_comment_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.csv");
        std::fs::write(&path, "# label,f0\n2,0.5\n0,1.5\n").unwrap();
        let data = load_features(&path).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.class_count(), 3);
        assert_eq!(data.empty_classes(), vec![1]);
    }

    #[test]
    fn load_sparse_labels_reports_empty_classes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparse.csv");
        std::fs::write(&path, "7,1\n0,2\n3,3\n").unwrap();
        let data = load_features(&path).unwrap();
        assert_eq!(data.class_count(), 8);
        assert_eq!(data.empty_classes(), vec![1, 2, 4, 5, 6]);
    }

    #[test]
    fn load_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_features(&empty), Err(Error::Parse { .. })));

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "0,1,2\n1,3\n").unwrap();
        match load_features(&ragged) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let bad_label = dir.path().join("bad_label.csv");
        std::fs::write(&bad_label, "x,1,2\n").unwrap();
        assert!(matches!(load_features(&bad_label), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_load_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let original = generate_blobs(3, 5, 6, 4, 0.37, 123).unwrap();
        let path = dir.path().join("rt.csv");
        write_features(&path, &original).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.features().data(), original.features().data());
        assert_eq!(loaded.labels(), original.labels());

        // And a second pass over the loaded copy is byte-identical.
        let path2 = dir.path().join("rt2.csv");
        write_features(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn resplit_even_covers_every_class() {
        let data = generate_blobs(4, 8, 5, 5, 0.2, 9).unwrap();
        let resplit = data.resplit_even(77).unwrap();
        resplit.validate_for_training().unwrap();
        for class in 0..4 {
            let train = (0..resplit.len())
                .filter(|&i| resplit.labels()[i] == class && resplit.split()[i] == SplitTag::Train)
                .count();
            assert_eq!(train, 5);
        }
        // Deterministic per seed, different across seeds.
        let again = data.resplit_even(77).unwrap();
        assert_eq!(again.split(), resplit.split());
        let other = data.resplit_even(78).unwrap();
        assert_ne!(other.split(), resplit.split());
    }

    #[test]
    fn resplit_odd_class_puts_extra_in_train() {
        // 5 samples in one class: 3 train, 2 test.
        let features = Matrix::from_fn(2, 7, |r, c| (r + c) as f64);
        let labels = vec![0, 0, 0, 0, 0, 1, 1];
        let data = Dataset::new(
            features,
            labels,
            2,
            vec![SplitTag::Train; 7],
            Provenance::File,
        )
        .unwrap();
        let resplit = data.resplit_even(1).unwrap();
        let class0_train = (0..5)
            .filter(|&i| resplit.split()[i] == SplitTag::Train)
            .count();
        assert_eq!(class0_train, 3);
    }

    #[test]
    fn reduce_training_identity_and_boundary() {
        let data = generate_blobs(3, 6, 4, 2, 0.1, 11).unwrap();
        let same = data.reduce_training(0, 5).unwrap();
        assert_eq!(same.split(), data.split());

        let minimal = data.reduce_training(3, 5).unwrap();
        for class in 0..3 {
            let train = (0..minimal.len())
                .filter(|&i| minimal.labels()[i] == class && minimal.split()[i] == SplitTag::Train)
                .count();
            assert_eq!(train, 1);
        }
        minimal.validate_for_training().unwrap();

        let err = data.reduce_training(4, 5).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn reduce_training_leaves_test_untouched() {
        let data = generate_blobs(4, 8, 10, 6, 0.2, 21).unwrap();
        let reduced = data.reduce_training(5, 3).unwrap();
        for i in 0..data.len() {
            if data.split()[i] == SplitTag::Test {
                assert_eq!(reduced.split()[i], SplitTag::Test);
            }
        }
    }

    proptest! {
        // Reduction only turns Train tags into Excluded, exactly
        // n_remove per class, and every sample keeps exactly one tag.
        #[test]
        fn reduction_partition_invariant(n_remove in 0usize..5, seed in 0u64..50) {
            let data = generate_blobs(3, 6, 6, 3, 0.2, 31).unwrap();
            let reduced = data.reduce_training(n_remove, seed).unwrap();
            let mut removed = vec![0usize; 3];
            for i in 0..data.len() {
                match (data.split()[i], reduced.split()[i]) {
                    (a, b) if a == b => {}
                    (SplitTag::Train, SplitTag::Excluded) => removed[data.labels()[i]] += 1,
                    (a, b) => prop_assert!(false, "illegal tag change {a:?} -> {b:?}"),
                }
            }
            prop_assert!(removed.iter().all(|&r| r == n_remove));
        }
    }
}
