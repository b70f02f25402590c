//! Zero-shot datasets: class prototypes, seen/unseen splits and images, plus the
//! on-disk directory layout.
//!
//! ```text
//! attributes.tsv   class_id<TAB>z_1<TAB>…<TAB>z_A<TAB>seen|unseen
//! splits.tsv       image_file<TAB>class_id<TAB>trs|tes|teu
//! images/*.zvt     C×H×W tensors
//! spec.txt         generating spec, when synthetic
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::Tensor;
use crate::prototypes::{ClassId, ClassPrototype, PrototypeTable};

mod synth;

pub use synth::{generate, hadamard_sign, AttributeLayout, AttributeSite, SynthSpec};

pub const ATTRIBUTES_FILE: &str = "attributes.tsv";
pub const SPLITS_FILE: &str = "splits.tsv";
pub const IMAGES_DIR: &str = "images";
pub const SPEC_FILE: &str = "spec.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    /// Seen-class training images.
    TrainSeen,
    /// Held-out images of seen classes.
    TestSeen,
    /// Images of unseen classes.
    TestUnseen,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::TrainSeen => "trs",
            Split::TestSeen => "tes",
            Split::TestUnseen => "teu",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trs" => Ok(Split::TrainSeen),
            "tes" => Ok(Split::TestSeen),
            "teu" => Ok(Split::TestUnseen),
            other => Err(format!("unknown split {other:?}, expected trs, tes or teu")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Path relative to the dataset directory.
    pub image_file: String,
    pub class_id: ClassId,
    pub split: Split,
}

/// Parse failure inside a text table, 1-based line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

impl LineError {
    fn new(line: usize, reason: impl Into<String>) -> Self {
        LineError {
            line,
            reason: reason.into(),
        }
    }

    fn at(self, path: &Path) -> Error {
        Error::format(path, Some(self.line), self.reason)
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Parses `attributes.tsv`. With `attr_dim` set, every row must carry exactly that
/// many values; otherwise the first row fixes it.
pub fn parse_attributes(text: &str, attr_dim: Option<usize>) -> std::result::Result<Vec<ClassPrototype>, LineError> {
    let mut out: Vec<ClassPrototype> = Vec::new();
    let mut dim = attr_dim;
    let mut ids = HashSet::new();
    for (line, row) in content_lines(text) {
        let fields: Vec<&str> = row.split('\t').collect();
        let class_id: ClassId = fields[0]
            .trim()
            .parse()
            .map_err(|_| LineError::new(line, format!("bad class id {:?}", fields[0])))?;
        if fields.len() < 3 {
            return Err(LineError::new(line, format!("class {class_id}: row has no attribute values")));
        }
        let flag = fields[fields.len() - 1].trim();
        let seen = match flag {
            "seen" => true,
            "unseen" => false,
            other => {
                return Err(LineError::new(
                    line,
                    format!("class {class_id}: flag {other:?} is neither seen nor unseen"),
                ))
            }
        };
        let z = fields[1..fields.len() - 1]
            .iter()
            .map(|f| match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(LineError::new(line, format!("class {class_id}: bad attribute value {f:?}"))),
            })
            .collect::<std::result::Result<Vec<f64>, _>>()?;
        let expected = *dim.get_or_insert(z.len());
        if z.len() != expected {
            return Err(LineError::new(
                line,
                format!("class {class_id}: {} attribute values, expected {expected}", z.len()),
            ));
        }
        if !ids.insert(class_id) {
            return Err(LineError::new(line, format!("duplicate class id {class_id}")));
        }
        out.push(ClassPrototype { class_id, z, seen });
    }
    if out.is_empty() {
        return Err(LineError::new(1, "no classes"));
    }
    Ok(out)
}

/// Parses `splits.tsv`.
pub fn parse_splits(text: &str) -> std::result::Result<Vec<Sample>, LineError> {
    content_lines(text)
        .map(|(line, row)| {
            let fields: Vec<&str> = row.split('\t').collect();
            if fields.len() != 3 {
                return Err(LineError::new(line, format!("expected 3 fields, found {}", fields.len())));
            }
            let image_file = fields[0].trim();
            if image_file.is_empty()
                || image_file.starts_with('/')
                || image_file.split(['/', '\\']).any(|c| c == "..")
            {
                return Err(LineError::new(line, format!("invalid image path {image_file:?}")));
            }
            let class_id = fields[1]
                .trim()
                .parse()
                .map_err(|_| LineError::new(line, format!("bad class id {:?}", fields[1])))?;
            let split = fields[2].trim().parse().map_err(|e: String| LineError::new(line, e))?;
            Ok(Sample {
                image_file: image_file.to_string(),
                class_id,
                split,
            })
        })
        .collect()
}

pub fn format_attributes(table: &PrototypeTable) -> String {
    let mut s = String::new();
    for c in table.classes() {
        s.push_str(&c.class_id.to_string());
        for v in &c.z {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s.push('\t');
        s.push_str(if c.seen { "seen" } else { "unseen" });
        s.push('\n');
    }
    s
}

pub fn format_splits(samples: &[Sample]) -> String {
    samples
        .iter()
        .map(|s| format!("{}\t{}\t{}\n", s.image_file, s.class_id, s.split))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZslDataset {
    pub prototypes: PrototypeTable,
    pub samples: Vec<Sample>,
    /// Aligned with `samples`.
    pub images: Vec<Tensor>,
    pub channels: usize,
    pub image_size: usize,
    pub spec: Option<SynthSpec>,
}

impl ZslDataset {
    /// Checks split membership, prototype coverage and image geometry.
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.images.len() {
            return Err(Error::Contract(format!(
                "{} samples but {} images",
                self.samples.len(),
                self.images.len()
            )));
        }
        for (s, img) in self.samples.iter().zip(&self.images) {
            check_sample(&self.prototypes, s).map_err(Error::Contract)?;
            if img.shape() != [self.channels, self.image_size, self.image_size] {
                return Err(Error::dim(
                    "dataset",
                    format!("{} has shape {:?}", s.image_file, img.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn attr_dim(&self) -> usize {
        self.prototypes.attr_dim()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Images and labels of one split, in file order.
    pub fn split(&self, split: Split) -> (Vec<&Tensor>, Vec<ClassId>) {
        self.indices(split)
            .into_iter()
            .map(|i| (&self.images[i], self.samples[i].class_id))
            .unzip()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join(IMAGES_DIR);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        write_text(&dir.join(ATTRIBUTES_FILE), &format_attributes(&self.prototypes))?;
        write_text(&dir.join(SPLITS_FILE), &format_splits(&self.samples))?;
        for (s, img) in self.samples.iter().zip(&self.images) {
            write_tensor(&dir.join(&s.image_file), img)?;
        }
        if let Some(spec) = &self.spec {
            write_text(&dir.join(SPEC_FILE), &spec.to_text())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let attr_path = dir.join(ATTRIBUTES_FILE);
        let classes = parse_attributes(&read_text(&attr_path)?, None).map_err(|e| e.at(&attr_path))?;
        let prototypes = PrototypeTable::new(classes)?;

        let split_path = dir.join(SPLITS_FILE);
        let split_text = read_text(&split_path)?;
        let samples = parse_splits(&split_text).map_err(|e| e.at(&split_path))?;
        for ((line, _), s) in content_lines(&split_text).zip(&samples) {
            check_sample(&prototypes, s).map_err(|r| Error::format(&split_path, Some(line), r))?;
        }
        if samples.is_empty() {
            return Err(Error::format(&split_path, None, "no samples"));
        }

        let images = samples
            .iter()
            .map(|s| read_tensor(&dir.join(&s.image_file)))
            .collect::<Result<Vec<_>>>()?;
        let (channels, image_size) = match images[0].shape() {
            &[c, h, w] if h == w => (c, h),
            other => {
                return Err(Error::format(
                    dir.join(&samples[0].image_file),
                    None,
                    format!("expected a square C×H×W image, found shape {other:?}"),
                ))
            }
        };
        for (s, img) in samples.iter().zip(&images) {
            if img.shape() != [channels, image_size, image_size] {
                return Err(Error::format(
                    dir.join(&s.image_file),
                    None,
                    format!("shape {:?} differs from {:?}", img.shape(), [channels, image_size, image_size]),
                ));
            }
        }

        let spec_path = dir.join(SPEC_FILE);
        let spec = if spec_path.exists() {
            Some(SynthSpec::from_text(&read_text(&spec_path)?).map_err(|r| Error::format(&spec_path, None, r))?)
        } else {
            None
        };
        Ok(ZslDataset {
            prototypes,
            samples,
            images,
            channels,
            image_size,
            spec,
        })
    }
}

fn check_sample(table: &PrototypeTable, s: &Sample) -> std::result::Result<(), String> {
    let class = table
        .get(s.class_id)
        .ok_or_else(|| format!("class {} has no prototype", s.class_id))?;
    let ok = match s.split {
        Split::TrainSeen | Split::TestSeen => class.seen,
        Split::TestUnseen => !class.seen,
    };
    if !ok {
        return Err(format!(
            "class {} is {} but listed in split {}",
            s.class_id,
            if class.seen { "seen" } else { "unseen" },
            s.split
        ));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
