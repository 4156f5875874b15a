//! Datasets, file loaders and preprocessing.

mod augment;
mod io;
mod normalize;
mod preprocess;

use std::ops::Range;

pub use augment::{augment_rows, augment_shift, max_shift, shift_image};
pub use io::{load_cifar_bin, load_csv, load_idx, CIFAR_RECORD_BYTES, IDX_IMAGE_MAGIC};
pub use normalize::{absorb_normalizer, fit_normalizer, Normalizer};
pub use preprocess::{
    bpd, dequantize_dataset, dequantize_logit, logit_to_pixels, logit_transform, LAMBDA_CIFAR, LAMBDA_MNIST,
};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Image layout for flattened samples: channel-planar, row-major within a
/// plane (`c * H * W + y * W + x`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageGeom {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "validation" | "val" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Contiguous, disjoint train/validation/test index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Everything in the training split.
    pub fn all_train(len: usize) -> Self {
        Self {
            train: 0..len,
            validation: len..len,
            test: len..len,
        }
    }

    /// Deterministic tail split: `[train | validation | test]`, with the
    /// fractions rounded to whole samples.
    pub fn tail(len: usize, val_frac: f64, test_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_frac)
            || !(0.0..1.0).contains(&test_frac)
            || val_frac + test_frac >= 1.0
        {
            return Err(Error::Config(format!(
                "split fractions {val_frac} + {test_frac} must be in [0, 1) and sum below 1"
            )));
        }
        let n_test = (len as f64 * test_frac).round() as usize;
        let n_val = (len as f64 * val_frac).round() as usize;
        let n_train = len.saturating_sub(n_test + n_val);
        if n_train == 0 {
            return Err(Error::Config(format!(
                "{len} samples leave no training data after the split"
            )));
        }
        Ok(Self {
            train: 0..n_train,
            validation: n_train..n_train + n_val,
            test: n_train + n_val..len,
        })
    }

    pub fn get(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Validation => self.validation.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }

    fn validate(&self, len: usize) -> Result<()> {
        let ordered = self.train.start <= self.train.end
            && self.validation.start <= self.validation.end
            && self.test.start <= self.test.end;
        let ranges = [&self.train, &self.validation, &self.test];
        let in_bounds = ranges.iter().all(|r| r.end <= len);
        let disjoint = ranges.iter().enumerate().all(|(i, a)| {
            ranges
                .iter()
                .skip(i + 1)
                .all(|b| a.is_empty() || b.is_empty() || a.end <= b.start || b.end <= a.start)
        });
        if ordered && in_bounds && disjoint {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid splits {self:?} for {len} samples")))
        }
    }
}

/// Per-sample record of the logit preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessMeta {
    pub lambda: f64,
    /// `ln |det d z / d pixel|` for each sample (includes `-N ln 256`).
    pub corrections: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Mat,
    splits: Splits,
    image_geom: Option<ImageGeom>,
    preprocess: Option<PreprocessMeta>,
}

impl Dataset {
    /// A dataset whose samples all belong to the training split.
    pub fn new(samples: Mat) -> Self {
        let splits = Splits::all_train(samples.rows());
        Self {
            samples,
            splits,
            image_geom: None,
            preprocess: None,
        }
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate(self.len())?;
        self.splits = splits;
        Ok(self)
    }

    pub fn with_tail_split(self, val_frac: f64, test_frac: f64) -> Result<Self> {
        let splits = Splits::tail(self.len(), val_frac, test_frac)?;
        self.with_splits(splits)
    }

    pub fn with_image_geom(mut self, geom: ImageGeom) -> Result<Self> {
        if geom.pixels() != self.n_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} image does not match {} columns",
                geom.height,
                geom.width,
                geom.channels,
                self.n_dim()
            )));
        }
        self.image_geom = Some(geom);
        Ok(self)
    }

    pub fn with_preprocess(mut self, meta: PreprocessMeta) -> Result<Self> {
        if meta.corrections.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} corrections for {} samples",
                meta.corrections.len(),
                self.len()
            )));
        }
        self.preprocess = Some(meta);
        Ok(self)
    }

    pub fn samples(&self) -> &Mat {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut Mat {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn image_geom(&self) -> Option<ImageGeom> {
        self.image_geom
    }

    pub fn preprocess(&self) -> Option<&PreprocessMeta> {
        self.preprocess.as_ref()
    }

    pub fn split_range(&self, kind: SplitKind) -> Range<usize> {
        self.splits.get(kind)
    }

    /// Copy of one split's rows.
    pub fn split_samples(&self, kind: SplitKind) -> Mat {
        let idx: Vec<usize> = self.split_range(kind).collect();
        self.samples.select_rows(&idx)
    }

    /// Mean preprocessing correction over a split, if the data was preprocessed.
    pub fn mean_correction(&self, kind: SplitKind) -> Option<f64> {
        let meta = self.preprocess.as_ref()?;
        let range = self.split_range(kind);
        if range.is_empty() {
            return None;
        }
        let n = range.len() as f64;
        Some(meta.corrections[range].iter().sum::<f64>() / n)
    }

    /// Applies a row map to every sample, keeping splits and metadata.
    pub fn map_rows<F>(&self, f: F) -> Result<Dataset>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut out = Mat::zeros(self.len(), self.n_dim());
        for r in 0..self.len() {
            let v = f(self.samples.row(r));
            if v.len() != self.n_dim() {
                return Err(Error::ShapeMismatch("row map changed the dimension".into()));
            }
            out.row_mut(r).copy_from_slice(&v);
        }
        Ok(Dataset {
            samples: out,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_split_layout() {
        let s = Splits::tail(100, 0.1, 0.2).unwrap();
        assert_eq!(s.train, 0..70);
        assert_eq!(s.validation, 70..80);
        assert_eq!(s.test, 80..100);
        assert!(Splits::tail(3, 0.5, 0.49).is_err());
        assert!(Splits::tail(10, 0.6, 0.5).is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let ds = Dataset::new(Mat::zeros(10, 1));
        let bad = Splits {
            train: 0..6,
            validation: 5..8,
            test: 8..10,
        };
        assert!(ds.clone().with_splits(bad).is_err());
        let oob = Splits {
            train: 0..6,
            validation: 6..8,
            test: 8..11,
        };
        assert!(ds.with_splits(oob).is_err());
    }

    #[test]
    fn correction_length_checked() {
        let ds = Dataset::new(Mat::zeros(4, 2));
        let meta = PreprocessMeta {
            lambda: 0.0,
            corrections: vec![0.0; 3],
        };
        assert!(ds.with_preprocess(meta).is_err());
    }
}
