use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zslvit::ablation::{run_ablation, Variant};
use zslvit::config::{parse_flat, parse_override, with_overrides, RunConfig};
use zslvit::data::{generate, SynthSpec, ZslDataset};
use zslvit::eval::{evaluate, report, score, EvalMode, EvalReport, DEFAULT_TAU};
use zslvit::manifest::{config_hash, ManifestBuilder, RunManifest};
use zslvit::model::ZslVit;
use zslvit::numerics::{grad_check, GradCheckOptions, Tensor};
use zslvit::objectives::LossWeights;
use zslvit::params::ParamVars;
use zslvit::prototypes::{ClassPrototype, PrototypeTable};
use zslvit::trace::{format_traces, trace};
use zslvit::trainer::{train, TrainState};
use zslvit::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "zslvit", version, about = "Zero-shot vision transformer with semantic token learning")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic zero-shot dataset.
    GenData(GenData),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint under CZSL or GZSL.
    Eval(EvalArgs),
    /// Train and evaluate the full model and its four ablations.
    Ablate(AblateArgs),
    /// Write per-layer token-selection traces for chosen images.
    DumpAttention(DumpArgs),
    /// Finite-difference check of the full training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenData {
    /// Generator spec file (flat key = value).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override one spec key, e.g. `--set seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Run-config sources shared by the training commands: file, then flags, then `--set`.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run config file (flat key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    lambda_sr: Option<f64>,
    #[arg(long)]
    lambda_vr: Option<f64>,
    /// Comma-separated 0-based encoder indices; "" for none.
    #[arg(long)]
    set_layers: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Override any config key, e.g. `--set embed_dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => parse_flat(&read(p)?).map_err(|e| in_file(e, p))?,
            None => base,
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("epochs", self.epochs.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("learning_rate", self.learning_rate.map(float));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("gamma", self.gamma.map(float));
        flag("kappa", self.kappa.map(float));
        flag("lambda_sr", self.lambda_sr.map(float));
        flag("lambda_vr", self.lambda_vr.map(float));
        flag("set_layers", self.set_layers.clone());
        flag("tau", self.tau.map(float));
        flag("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        for s in &self.set {
            pairs.push(parse_override(s)?);
        }
        base.with_overrides(&pairs)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "gzsl")]
    mode: EvalMode,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Also report every τ in {0, 0.1, …, 1.0}.
    #[arg(long)]
    sweep: bool,
    /// Directory for the report; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample indices (rows of splits.tsv).
    #[arg(long)]
    images: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Tiny-model config file; defaults to an 8-wide, 3-layer model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Multiplies every initial parameter; at the standard init scale hidden
    /// ReLU inputs sit within a finite-difference step of the kink.
    #[arg(long, default_value_t = 5.0)]
    scale: f64,
    /// Test hook: add DELTA to element INDEX of NAME's analytic gradient.
    #[arg(long, value_name = "NAME:INDEX:DELTA")]
    corrupt: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::DumpAttention(a) => dump_attention(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn in_file(e: Error, p: &Path) -> Error {
    match e {
        Error::Config { key, reason } => Error::Config {
            key,
            reason: format!("{reason} (in {})", p.display()),
        },
        other => other,
    }
}

fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| Error::Config {
                key: key.into(),
                reason: format!("{s:?} is not a valid element"),
            })
        })
        .collect()
}

fn gen_data(a: GenData) -> Result<()> {
    let base = match &a.spec {
        Some(p) => parse_flat(&read(p)?).map_err(|e| in_file(e, p))?,
        None => SynthSpec::default(),
    };
    let mut pairs = a.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = a.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    let spec: SynthSpec = with_overrides(&base, &pairs)?;
    let m = ManifestBuilder::start("gen-data", spec.to_text(), Some(spec.seed), a.spec.into_iter().collect(), a.out.clone());
    let ds = generate(&spec)?;
    ds.save(&a.out)?;
    m.finish().save(&a.out)?;
    println!(
        "{} classes ({} seen), {} images -> {}",
        ds.prototypes.len(),
        ds.prototypes.seen_ids().len(),
        ds.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn write_reports(model: &ZslVit, ds: &ZslDataset, tau: f64, seed: Option<u64>, hash: &str, path: &Path) -> Result<()> {
    let mut text = String::new();
    for mode in [EvalMode::Czsl, EvalMode::Gzsl] {
        let mut r = evaluate(model, ds, mode, tau)?;
        r.seed = seed;
        r.config_hash = Some(hash.to_string());
        println!("{mode}: {}", r.summary());
        text.push_str(&r.to_string());
        text.push('\n');
    }
    write(path, &text)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = ZslDataset::load(&a.data)?;
    let (mut model, resume, cfg) = match &a.resume {
        Some(dir) => {
            let (model, state) = TrainState::load(dir)?;
            let base = RunManifest::load(dir.parent().unwrap_or(dir))
                .ok()
                .and_then(|m| RunConfig::from_text(&m.config).ok())
                .unwrap_or_default();
            let cfg = a.cfg.resolve(base)?;
            (model, Some(state), cfg)
        }
        None => {
            let cfg = a.cfg.resolve(RunConfig::default())?;
            let mcfg = cfg.model_config(ds.image_size, ds.channels, ds.attr_dim())?;
            (ZslVit::new(mcfg, cfg.seed)?, None, cfg)
        }
    };
    let tcfg = cfg.train_config()?;
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.cfg.config.clone());
    inputs.extend(a.resume.clone());
    let m = ManifestBuilder::start("train", cfg.to_text(), Some(cfg.seed), inputs, a.out.clone());
    let hash = m.config_hash().to_string();
    let outcome = train(&mut model, &ds, &tcfg, Some(&a.out), resume)?;
    if let (Some(h), Some(e)) = (outcome.state.best_h, outcome.state.best_epoch) {
        println!("best H {:.2} at epoch {e}", 100.0 * h);
    }
    write_reports(&model, &ds, cfg.tau, Some(cfg.seed), &hash, &a.out.join("report.txt"))?;
    m.finish().save(&a.out)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    if !(a.tau >= 0.0 && a.tau.is_finite()) {
        return Err(Error::Config {
            key: "tau".into(),
            reason: format!("{} must be a finite non-negative number", a.tau),
        });
    }
    let model = ZslVit::load(&a.ckpt)?;
    let ds = ZslDataset::load(&a.data)?;
    let run = a.ckpt.parent().and_then(|p| RunManifest::load(p).ok());
    let hash = run.as_ref().map_or_else(|| config_hash(&format!("{:?}", model.config())), |m| m.config_hash.clone());
    let seed = run.as_ref().and_then(|m| m.seed);
    let set = score(&model, &ds, a.mode)?;
    let stamp = |mut r: EvalReport| {
        r.seed = seed;
        r.config_hash = Some(hash.clone());
        r
    };
    let main = stamp(report(&set, a.tau));
    println!("{}", main.summary());
    let mut sweep = String::from("tau\tacc\tU\tS\tH\n");
    if a.sweep {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for k in 0..=10 {
            let tau = k as f64 / 10.0;
            let r = report(&set, tau);
            sweep.push_str(&format!("{tau:.1}\t{}\t{}\t{}\t{}\n", cell(r.acc), cell(r.u), cell(r.s), cell(r.h)));
        }
        print!("{sweep}");
    }
    if let Some(out) = &a.out {
        let m = ManifestBuilder::start(
            "eval",
            format!("mode = \"{}\"\ntau = {:?}\nsweep = {}\n", a.mode, a.tau, a.sweep),
            seed,
            vec![a.ckpt.clone(), a.data.clone()],
            out.clone(),
        );
        write(&out.join(format!("eval_{}.txt", a.mode)), &main.to_string())?;
        if a.sweep {
            write(&out.join(format!("tau_sweep_{}.tsv", a.mode)), &sweep)?;
        }
        m.finish().save(out)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let ds = ZslDataset::load(&a.data)?;
    let cfg = a.cfg.resolve(RunConfig::default())?;
    cfg.model_config(ds.image_size, ds.channels, ds.attr_dim())?;
    cfg.train_config()?;
    let seeds: Vec<u64> = list("seeds", &a.seeds)?;
    if seeds.is_empty() {
        return Err(Error::Config {
            key: "seeds".into(),
            reason: "at least one seed is required".into(),
        });
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.cfg.config.clone());
    let m = ManifestBuilder::start(
        "ablate",
        format!("{}seeds = {seeds:?}\n", cfg.to_text()),
        None,
        inputs,
        a.out.clone(),
    );
    let table = run_ablation(&ds, &cfg, &Variant::ALL, &seeds)?;
    print!("{table}");
    write(&a.out.join("ablation.tsv"), &table.to_string())?;
    m.finish().save(&a.out)
}

fn dump_attention(a: DumpArgs) -> Result<()> {
    let model = ZslVit::load(&a.ckpt)?;
    let ds = ZslDataset::load(&a.data)?;
    let ids: Vec<usize> = list("images", &a.images)?;
    if ids.is_empty() {
        return Err(Error::Config {
            key: "images".into(),
            reason: "no image indices given".into(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= ds.images.len()) {
        return Err(Error::Config {
            key: "images".into(),
            reason: format!("index {bad} out of range for {} samples", ds.images.len()),
        });
    }
    let images: Vec<&Tensor> = ids.iter().map(|&i| &ds.images[i]).collect();
    let m = ManifestBuilder::start(
        "dump-attention",
        format!("images = {ids:?}\n"),
        None,
        vec![a.ckpt.clone(), a.data.clone()],
        a.out.clone(),
    );
    let records = trace(&model, &images, &ids)?;
    for &layer in &model.config().backbone.set_layers {
        let of_layer: Vec<_> = records.iter().filter(|r| r.layer == layer).cloned().collect();
        write(&a.out.join(format!("layer{layer}.trace")), &format_traces(&of_layer))?;
    }
    println!("{} records -> {}", records.len(), a.out.display());
    m.finish().save(&a.out)
}

/// The smallest model that still exercises every loss term.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        num_layers: 3,
        set_layers: vec![1],
        bridge_hidden: 8,
        ..Default::default()
    }
}

const GRADCHECK_IMAGE: usize = 16;
const GRADCHECK_ATTRS: usize = 6;

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => parse_flat(&read(p)?).map_err(|e| in_file(e, p))?,
        None => tiny_config(),
    };
    let pairs = a.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let cfg = base.with_overrides(&pairs)?;
    let mcfg = cfg.model_config(GRADCHECK_IMAGE, 1, GRADCHECK_ATTRS)?;
    let mut model = ZslVit::new(mcfg, cfg.seed)?;
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v *= a.scale;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = PrototypeTable::new(
        (0..4)
            .map(|c| ClassPrototype {
                class_id: c,
                z: Tensor::uniform(&[GRADCHECK_ATTRS], 0.0, 1.0, &mut rng).into_data(),
                seen: c < 3,
            })
            .collect(),
    )?;
    let images: Vec<Tensor> = (0..2)
        .map(|_| Tensor::uniform(&[1, GRADCHECK_IMAGE, GRADCHECK_IMAGE], -1.0, 1.0, &mut rng))
        .collect();
    let labels = [0, 2];
    let weights = LossWeights {
        lambda_sr: cfg.lambda_sr,
        lambda_vr: cfg.lambda_vr,
    };

    let corrupt = match &a.corrupt {
        None => None,
        Some(raw) => {
            let bad = || Error::Config {
                key: "corrupt".into(),
                reason: format!("{raw:?} is not NAME:INDEX:DELTA"),
            };
            let mut it = raw.rsplitn(3, ':');
            let delta: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let index: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let name = it.next().ok_or_else(bad)?.to_string();
            match model.params().get(&name) {
                Some(t) if index < t.len() => {}
                _ => {
                    return Err(Error::Config {
                        key: "corrupt".into(),
                        reason: format!("no element {index} in parameter {name:?}"),
                    })
                }
            }
            Some((name, index, delta))
        }
    };
    let opts = GradCheckOptions {
        tol: a.tol,
        corrupt,
        ..Default::default()
    };
    let params: Vec<(String, Tensor)> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let report = grad_check(
        |g, vars| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let (loss, _) = model.loss(g, &pv, &refs, &labels, &table, &weights, cfg.l1_reduction)?;
            Ok(loss)
        },
        &params,
        &opts,
    )?;
    println!("{report}");
    if let Some(out) = &a.out {
        let m = ManifestBuilder::start("gradcheck", cfg.to_text(), Some(cfg.seed), a.config.into_iter().collect(), out.clone());
        write(&out.join("gradcheck.txt"), &format!("{report}\n"))?;
        m.finish().save(out)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let w = report.worst().expect("failing report has a worst parameter");
        Err(Error::Numerical(format!(
            "gradient check failed: {} max_rel_err={:.3e} > tol {:.1e}",
            w.name, w.max_rel_err, report.tol
        )))
    }
}
