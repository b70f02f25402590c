//! Calibrated zero-shot prediction and the CZSL/GZSL protocol.
//!
//! Accuracy is averaged per class first, then across classes. In the generalized
//! setting `τ` is added to the softmax score of every unseen candidate before the
//! argmax.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Split, ZslDataset};
use crate::error::{Error, Result};
use crate::model::ZslVit;
use crate::numerics::{softmax_last, Tensor};
use crate::prototypes::{ClassId, PrototypeTable};

pub const DEFAULT_TAU: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Unseen test images against unseen candidates only.
    Czsl,
    /// Seen and unseen test images against every class.
    Gzsl,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Czsl => "czsl",
            EvalMode::Gzsl => "gzsl",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "czsl" => Ok(EvalMode::Czsl),
            "gzsl" => Ok(EvalMode::Gzsl),
            other => Err(Error::config("mode", format!("{other:?} is neither czsl nor gzsl"))),
        }
    }
}

/// `2SU / (S+U)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Softmax over candidates of `φ · zᶜ`; `prototypes` is `[C×|A|]`.
pub fn class_scores(phi: &[f64], prototypes: &Tensor) -> Result<Vec<f64>> {
    if prototypes.rank() != 2 || prototypes.rows() == 0 {
        return Err(Error::Contract("empty candidate set".into()));
    }
    if prototypes.cols() != phi.len() {
        return Err(Error::dim(
            "class_scores",
            format!("features of width {} vs prototypes {:?}", phi.len(), prototypes.shape()),
        ));
    }
    let logits: Vec<f64> = (0..prototypes.rows())
        .map(|c| prototypes.row(c).iter().zip(phi).map(|(z, p)| z * p).sum())
        .collect();
    Ok(softmax_last(&Tensor::vector(logits), "class_scores")?.into_data())
}

/// Argmax of `score + τ·[unseen]`; ties go to the lowest class id.
pub fn predict(scores: &[f64], candidates: &[ClassId], unseen: &[bool], tau: f64) -> ClassId {
    debug_assert_eq!(scores.len(), candidates.len());
    let mut best = (f64::NEG_INFINITY, ClassId::MAX);
    for ((&s, &c), &u) in scores.iter().zip(candidates).zip(unseen) {
        let adjusted = if u { s + tau } else { s };
        if adjusted > best.0 || (adjusted == best.0 && c < best.1) {
            best = (adjusted, c);
        }
    }
    best.1
}

/// Anything that can score test images against candidate classes.
pub trait Scorer {
    /// One probability row per image, aligned with `candidates`.
    fn scores(&self, images: &[&Tensor], table: &PrototypeTable, candidates: &[ClassId]) -> Result<Vec<Vec<f64>>>;
}

/// Images per inference graph during evaluation.
pub const EVAL_CHUNK: usize = 32;

impl Scorer for ZslVit {
    fn scores(&self, images: &[&Tensor], table: &PrototypeTable, candidates: &[ClassId]) -> Result<Vec<Vec<f64>>> {
        let phi = self.embed_all(images, EVAL_CHUNK)?;
        let protos = table.rows(candidates, self.config().normalize_prototypes)?;
        (0..phi.rows()).map(|i| class_scores(phi.row(i), &protos)).collect()
    }
}

/// Candidate scores of every test image of one protocol, reusable across `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub mode: EvalMode,
    pub candidates: Vec<ClassId>,
    pub candidate_unseen: Vec<bool>,
    pub labels: Vec<ClassId>,
    pub scores: Vec<Vec<f64>>,
    /// Seen flag of every evaluated class, keyed by id.
    pub classes: BTreeMap<ClassId, bool>,
}

pub fn score<S: Scorer + ?Sized>(scorer: &S, ds: &ZslDataset, mode: EvalMode) -> Result<ScoredSet> {
    let table = &ds.prototypes;
    let (splits, candidates): (&[Split], Vec<ClassId>) = match mode {
        EvalMode::Czsl => (&[Split::TestUnseen], table.unseen_ids()),
        EvalMode::Gzsl => (&[Split::TestSeen, Split::TestUnseen], table.all_ids()),
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for &split in splits {
        let (imgs, ls) = ds.split(split);
        if imgs.is_empty() {
            return Err(Error::Contract(format!("split {split} is empty")));
        }
        images.extend(imgs);
        labels.extend(ls);
    }
    if candidates.is_empty() {
        return Err(Error::Contract("empty candidate set".into()));
    }
    let scores = scorer.scores(&images, table, &candidates)?;
    let classes = labels.iter().map(|&l| (l, table.is_seen(l))).collect();
    Ok(ScoredSet {
        mode,
        candidate_unseen: candidates.iter().map(|&c| !table.is_seen(c)).collect(),
        candidates,
        labels,
        scores,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: ClassId,
    pub seen: bool,
    pub correct: usize,
    pub total: usize,
}

impl ClassResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub tau: f64,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub per_class: Vec<ClassResult>,
    /// CZSL mean per-class accuracy.
    pub acc: Option<f64>,
    /// GZSL unseen, seen and harmonic accuracies.
    pub u: Option<f64>,
    pub s: Option<f64>,
    pub h: Option<f64>,
    /// Per-sample accuracy, diagnostics only.
    pub per_sample_acc: f64,
    /// `(true, predicted) → count`.
    pub confusion: BTreeMap<(ClassId, ClassId), usize>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn report(set: &ScoredSet, tau: f64) -> EvalReport {
    let mut per: BTreeMap<ClassId, ClassResult> = set
        .classes
        .iter()
        .map(|(&class_id, &seen)| {
            (
                class_id,
                ClassResult {
                    class_id,
                    seen,
                    correct: 0,
                    total: 0,
                },
            )
        })
        .collect();
    let mut confusion = BTreeMap::new();
    let mut hits = 0;
    for (label, scores) in set.labels.iter().zip(&set.scores) {
        let pred = predict(scores, &set.candidates, &set.candidate_unseen, tau);
        let r = per.get_mut(label).expect("label registered");
        r.total += 1;
        if pred == *label {
            r.correct += 1;
            hits += 1;
        }
        *confusion.entry((*label, pred)).or_insert(0) += 1;
    }
    let per_class: Vec<ClassResult> = per.into_values().collect();
    let unseen = mean(per_class.iter().filter(|c| !c.seen).map(ClassResult::accuracy));
    let (acc, u, s, h) = match set.mode {
        EvalMode::Czsl => (Some(unseen), None, None, None),
        EvalMode::Gzsl => {
            let seen = mean(per_class.iter().filter(|c| c.seen).map(ClassResult::accuracy));
            (None, Some(unseen), Some(seen), Some(harmonic_mean(unseen, seen)))
        }
    };
    EvalReport {
        mode: set.mode,
        tau,
        seed: None,
        config_hash: None,
        per_class,
        acc,
        u,
        s,
        h,
        per_sample_acc: hits as f64 / set.labels.len().max(1) as f64,
        confusion,
    }
}

/// Scores the protocol's test splits with `scorer` and summarizes at `tau`.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, ds: &ZslDataset, mode: EvalMode, tau: f64) -> Result<EvalReport> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::config("tau", format!("{tau} must be a finite non-negative number")));
    }
    Ok(report(&score(scorer, ds, mode)?, tau))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    /// `acc=… | U=… S=… H=…` in percent.
    pub fn summary(&self) -> String {
        format!("acc={} | U={} S={} H={}", pct(self.acc), pct(self.u), pct(self.s), pct(self.h))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode\t{}", self.mode)?;
        writeln!(f, "tau\t{}", self.tau)?;
        writeln!(f, "seed\t{}", self.seed.map_or("-".to_string(), |s| s.to_string()))?;
        writeln!(f, "config\t{}", self.config_hash.as_deref().unwrap_or("-"))?;
        writeln!(f, "class\tkind\tcorrect\ttotal\tacc")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{:.4}",
                c.class_id,
                if c.seen { "seen" } else { "unseen" },
                c.correct,
                c.total,
                c.accuracy()
            )?;
        }
        for ((t, p), n) in &self.confusion {
            writeln!(f, "confusion\t{t}\t{p}\t{n}")?;
        }
        writeln!(f, "per_sample_acc\t{:.4}", self.per_sample_acc)?;
        writeln!(f, "{}", self.summary())
    }
}

#[cfg(test)]
mod tests;
