//! Component ablations: the full model against four single-component removals.

use std::fmt;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::ZslDataset;
use crate::error::Result;
use crate::eval::{evaluate, EvalMode};
use crate::model::ZslVit;
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// `λ_VR = 0`.
    NoVisualReconstruction,
    /// `λ_SR = 0`.
    NoSemanticReconstruction,
    /// `γ = 1`: the cls stream is never blended with the reconstructed cls.
    NoEnhancement,
    /// `κ = 1`: no token is fused away.
    NoFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoVisualReconstruction,
        Variant::NoSemanticReconstruction,
        Variant::NoEnhancement,
        Variant::NoFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVisualReconstruction => "w/o L_VR",
            Variant::NoSemanticReconstruction => "w/o L_SR",
            Variant::NoEnhancement => "w/o enhancement",
            Variant::NoFusion => "w/o ViE",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoVisualReconstruction => c.lambda_vr = 0.0,
            Variant::NoSemanticReconstruction => c.lambda_sr = 0.0,
            Variant::NoEnhancement => c.gamma = 1.0,
            Variant::NoFusion => c.kappa = 1.0,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    /// CZSL accuracy.
    pub acc: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

/// Trains and evaluates one variant at one seed; the seed drives both the
/// initialization and the minibatch order.
pub fn run_one(ds: &ZslDataset, base: &RunConfig, variant: Variant, seed: u64) -> Result<AblationRun> {
    let cfg = RunConfig { seed, ..variant.apply(base) };
    let mcfg = cfg.model_config(ds.image_size, ds.channels, ds.attr_dim())?;
    let tcfg = cfg.train_config()?;
    let mut model = ZslVit::new(mcfg, seed)?;
    train(&mut model, ds, &tcfg, None, None)?;
    let c = evaluate(&model, ds, EvalMode::Czsl, cfg.tau)?;
    let g = evaluate(&model, ds, EvalMode::Gzsl, cfg.tau)?;
    log::info!("{} seed {seed}: {} {}", variant.name(), c.summary(), g.summary());
    Ok(AblationRun {
        variant,
        seed,
        acc: c.acc.unwrap_or(0.0),
        u: g.u.unwrap_or(0.0),
        s: g.s.unwrap_or(0.0),
        h: g.h.unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
}

/// Every variant at every seed, runs in parallel.
pub fn run_ablation(ds: &ZslDataset, base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(v, s)| run_one(ds, base, v, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        runs,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl AblationTable {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    fn of(&self, v: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// Mean and population standard deviation of CZSL accuracy.
    pub fn acc(&self, v: Variant) -> (f64, f64) {
        mean_std(&self.of(v).map(|r| r.acc).collect::<Vec<_>>())
    }

    pub fn h(&self, v: Variant) -> (f64, f64) {
        mean_std(&self.of(v).map(|r| r.h).collect::<Vec<_>>())
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "variant\tacc_mean\tacc_std\tH_mean\tH_std")?;
        for s in &self.seeds {
            write!(f, "\tacc@{s}\tH@{s}")?;
        }
        writeln!(f)?;
        for v in self.variants() {
            let (am, asd) = self.acc(v);
            let (hm, hsd) = self.h(v);
            write!(f, "{}\t{am:.4}\t{asd:.4}\t{hm:.4}\t{hsd:.4}", v.name())?;
            for s in &self.seeds {
                match self.of(v).find(|r| r.seed == *s) {
                    Some(r) => write!(f, "\t{:.4}\t{:.4}", r.acc, r.h)?,
                    None => write!(f, "\t-\t-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
