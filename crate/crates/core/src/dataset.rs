//! Labeled sample stores and the synthetic Gaussian-mixture generator.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// An indexed store of feature vectors with integer class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::ShapeMismatch("feature_dim must be positive".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                feature_dim
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            feature_dim,
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

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let start = index * self.feature_dim;
        &self.features[start..start + self.feature_dim]
    }
}

/// Configuration of the synthetic Gaussian-mixture dataset: one Gaussian per
/// class, means drawn once from the seed, sample noise isotropic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class_count: usize,
    pub feature_dim: usize,
    /// Standard deviation of the class-mean placement; larger means easier.
    pub class_separation: f64,
    /// Standard deviation of per-sample noise around the class mean.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class_count == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "classes, per_class_count and feature_dim must be positive".into(),
            ));
        }
        if self.class_separation <= 0.0
            || self.noise_sigma < 0.0
            || self.class_separation.is_nan()
            || self.noise_sigma.is_nan()
        {
            return Err(Error::InvalidConfig(
                "class_separation must be > 0 and noise_sigma >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Generate the dataset described by this spec. Deterministic in the seed.
    pub fn generate(&self) -> Result<LabeledDataset> {
        self.generate_with_seed(self.seed)
    }

    /// Same mixture but a different sampling seed; used for held-out test sets.
    pub fn generate_with_seed(&self, sample_seed: u64) -> Result<LabeledDataset> {
        self.validate()?;
        let mean_noise = Normal::new(0.0, self.class_separation)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        // Class means always come from the dataset's own seed so train and
        // test sets share the same mixture.
        let mut mean_rng = rng::stream(self.seed, "class-means", 0);
        let means: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| mean_noise.sample(&mut mean_rng))
                    .collect()
            })
            .collect();

        let noise =
            Normal::new(0.0, self.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let total = self.classes * self.per_class_count;
        let mut features = Vec::with_capacity(total * self.feature_dim);
        let mut labels = Vec::with_capacity(total);
        for (class, mean) in means.iter().enumerate() {
            let mut sample_rng = rng::stream(sample_seed, "class-samples", class as u64);
            for _ in 0..self.per_class_count {
                for &m in mean {
                    features.push(m + noise.sample(&mut sample_rng));
                }
                labels.push(class);
            }
        }
        LabeledDataset::new(features, self.feature_dim, labels, self.classes)
    }
}
