//! Samples, splits, and the on-disk dataset layout.
//!
//! A dataset directory holds one TSR1 image (`[C, H, W]`) and one TSR1 mask
//! (`[1, H, W]`, values in {0, 1}) per case, listed in `index.csv`:
//!
//! ```text
//! case_id,image_path,mask_path,split
//! train_0000,train_0000_image.tsr,train_0000_mask.tsr,train
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor, write_atomic};
use crate::tensor::{Scalar, Tensor};

pub const INDEX_FILE: &str = "index.csv";
const INDEX_HEADER: &str = "case_id,image_path,mask_path,split";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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

    pub(crate) fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
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

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split {s:?}")))
    }
}

/// One image/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    /// `[C, H, W]`
    pub image: Tensor<T>,
    /// `[1, H, W]` with values in {0, 1}
    pub mask: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(id: impl Into<String>, image: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        let id = id.into();
        let (&[_, h, w], &[1, mh, mw]) = (image.shape(), mask.shape()) else {
            return Err(Error::Shape(format!(
                "{id}: image must be [C, H, W] and mask [1, H, W], got {:?} and {:?}",
                image.shape(),
                mask.shape()
            )));
        };
        if (h, w) != (mh, mw) {
            return Err(Error::Shape(format!("{id}: image {h}×{w} but mask {mh}×{mw}")));
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Value(format!("{id}: mask is not binary")));
        }
        Ok(Sample { id, image, mask })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.mask.data().iter().filter(|&&v| v == T::one()).count();
        fg as f64 / self.mask.numel() as f64
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            id: self.id.clone(),
            image: self.image.cast(),
            mask: self.mask.cast(),
        }
    }
}

/// Train/validation/test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn split(&self, s: Split) -> &[Sample<T>] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &Sample<T>)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |x| (s, x)))
    }

    /// Channel count shared by every sample, or an error if they disagree.
    pub fn channels(&self) -> Result<usize> {
        let mut it = self.iter().map(|(_, s)| s.channels());
        let first = it.next().ok_or_else(|| Error::Value("dataset is empty".into()))?;
        if it.any(|c| c != first) {
            return Err(Error::Shape("samples disagree on channel count".into()));
        }
        Ok(first)
    }

    /// Case ids must be unique across splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (_, s) in self.iter() {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Value(format!("case {} appears more than once", s.id)));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        let c = |v: &[Sample<T>]| v.iter().map(Sample::cast).collect();
        Dataset {
            train: c(&self.train),
            val: c(&self.val),
            test: c(&self.test),
        }
    }
}

/// Writes every sample plus `index.csv` into `dir`, returning the written file names.
pub fn write_dataset<T: Scalar>(dir: &Path, data: &Dataset<T>) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut files = Vec::new();
    for (split, s) in data.iter() {
        let image = format!("{}_image.tsr", s.id);
        let mask = format!("{}_mask.tsr", s.id);
        write_atomic(&dir.join(&image), &encode_tensor(&s.image))?;
        write_atomic(&dir.join(&mask), &encode_tensor(&s.mask))?;
        index.push_str(&format!("{},{image},{mask},{split}\n", s.id));
        files.push(image);
        files.push(mask);
    }
    write_atomic(&dir.join(INDEX_FILE), index.as_bytes())?;
    files.push(INDEX_FILE.to_string());
    Ok(files)
}

/// Reads a dataset directory; paths in the index are relative to `dir`.
pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(INDEX_HEADER) {
        return Err(Error::Format(format!("{INDEX_FILE} must start with `{INDEX_HEADER}`")));
    }
    let mut data = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let &[id, image, mask, split] = fields.as_slice() else {
            return Err(Error::Format(format!("{INDEX_FILE} line {}: expected 4 fields", n + 2)));
        };
        let image = decode_tensor(&fs::read(dir.join(image))?)?;
        let mask = decode_tensor(&fs::read(dir.join(mask))?)?;
        let sample = Sample::new(id, image, mask)?;
        match split.parse()? {
            Split::Train => data.train.push(sample),
            Split::Val => data.val.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    data.check_disjoint()?;
    Ok(data)
}
