use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Labelled examples stored as one `[N × d]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::Dataset(format!("inputs must be [N x d], got {:?}", inputs.shape())));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Dataset(format!("{} input rows but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gather the examples with the given ids into a batch.
    pub fn batch(&self, ids: &[usize]) -> Batch {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.inputs.row(i));
        }
        Batch {
            inputs: Tensor::new(vec![ids.len(), d], data).expect("non-empty batch"),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            sample_ids: ids.to_vec(),
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let b = self.batch(ids);
        Dataset { inputs: b.inputs, labels: b.labels, classes: self.classes }
    }

    /// Content fingerprint, used to refuse comparisons across datasets.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.classes as u64).to_le_bytes());
        for &s in self.inputs.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for &x in self.inputs.data() {
            h.update(x.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

/// A minibatch. `sample_ids` are dataset row indices so that gradients at two
/// parameter points can be evaluated on the same examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same examples with replaced inputs (e.g. adversarial perturbations).
    pub fn with_inputs(&self, inputs: Tensor) -> Batch {
        assert!(inputs.same_shape(&self.inputs), "replacement inputs change batch shape");
        Batch { inputs, labels: self.labels.clone(), sample_ids: self.sample_ids.clone() }
    }
}

/// Gaussian blobs in the unit cube.
///
/// Class centres are drawn uniformly from a cube of side `separation`
/// centred at `0.5`; points are centre plus `N(0, noise²)` per coordinate,
/// clamped to `[0, 1]`. Labels cycle `0, 1, ..., classes-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default = "BlobsSpec::default_separation")]
    pub separation: f64,
    #[serde(default = "BlobsSpec::default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BlobsSpec {
    fn default_separation() -> f64 {
        0.6
    }

    fn default_noise() -> f64 {
        0.15
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("dataset.classes", "need at least 2"));
        }
        if self.dim == 0 {
            return Err(Error::config("dataset.dim", "must be positive"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("dataset.train_size", "train_size and test_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(Error::config("dataset.separation", "must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("dataset.noise", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Generate `(train, test)`.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let root = RngStream::new(self.seed);
        let mut centre_rng = root.substream(0);
        let centres: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| (0..self.dim).map(|_| 0.5 + self.separation * (centre_rng.next_f64() - 0.5)).collect())
            .collect();
        let sample = |n: usize, rng: &mut RngStream| -> Result<Dataset> {
            let mut data = Vec::with_capacity(n * self.dim);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let y = i % self.classes;
                for &c in &centres[y] {
                    data.push((c + self.noise * rng.next_gaussian()).clamp(0.0, 1.0));
                }
                labels.push(y);
            }
            Dataset::new(Tensor::new(vec![n, self.dim], data)?, labels, self.classes)
        };
        let train = sample(self.train_size, &mut root.substream(1))?;
        let test = sample(self.test_size, &mut root.substream(2))?;
        Ok((train, test))
    }
}

/// Load a CSV of `d` feature columns followed by one integer label column.
///
/// A first row that does not parse as numbers is treated as a header.
/// Features are divided by `feature_scale` (use 16 for 8×8 digit scans).
/// `classes` defaults to the largest label plus one.
pub fn load_csv(path: &Path, feature_scale: f64, classes: Option<usize>) -> Result<Dataset> {
    if !(feature_scale > 0.0) {
        return Err(Error::Argument("feature_scale must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if record.len() < 2 {
            return Err(Error::Dataset(format!(
                "{}:{}: need at least one feature and a label",
                path.display(),
                line + 1
            )));
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().take(record.len() - 1).map(str::parse::<f64>).collect();
        let label = record[record.len() - 1].parse::<usize>();
        let (features, label) = match (parsed, label) {
            (Ok(f), Ok(y)) => (f, y),
            _ if line == 0 => continue,
            _ => return Err(Error::Dataset(format!("{}:{}: unparsable row", path.display(), line + 1))),
        };
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected {w} features, found {}",
                    path.display(),
                    line + 1,
                    features.len()
                )))
            }
            _ => {}
        }
        data.extend(features.into_iter().map(|x| x / feature_scale));
        labels.push(label);
    }
    let d = width.ok_or_else(|| Error::Dataset(format!("{}: no data rows", path.display())))?;
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Tensor::new(vec![labels.len(), d], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_reproducible_and_bounded() {
        let spec =
            BlobsSpec { classes: 3, dim: 4, train_size: 30, test_size: 12, separation: 0.8, noise: 0.3, seed: 5 };
        let (a, t) = spec.generate().unwrap();
        let (b, _) = spec.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(t.len(), 12);
        assert!(a.inputs().data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(&a.labels()[..4], &[0, 1, 2, 0]);
    }

    #[test]
    fn csv_with_header_and_scale() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,label").unwrap();
        writeln!(f, "0,16,1").unwrap();
        writeln!(f, "8,4,0").unwrap();
        let ds = load_csv(f.path(), 16.0, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.classes(), 2);
        assert_eq!(ds.inputs().data(), &[0.0, 1.0, 0.5, 0.25]);
        assert_eq!(ds.labels(), &[1, 0]);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "0.1,0.2,1").unwrap();
        writeln!(f, "0.3,0").unwrap();
        assert!(matches!(load_csv(f.path(), 1.0, None), Err(Error::Dataset(_))));
    }

    #[test]
    fn batch_gathers_rows() {
        let ds = Dataset::new(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let b = ds.batch(&[2, 0]);
        assert_eq!(b.inputs.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(b.labels, vec![0, 0]);
        assert_eq!(b.sample_ids, vec![2, 0]);
        assert!(Dataset::new(Tensor::zeros(&[1, 1]), vec![3], 2).is_err());
    }
}
