use super::*;
use crate::data::{generate, SynthSpec};

fn small() -> (ZslDataset, RunConfig) {
    let ds = generate(&SynthSpec {
        num_seen: 4,
        num_unseen: 5,
        attr_dim: 8,
        train_per_seen: 3,
        test_per_seen: 2,
        test_per_unseen: 3,
        image_size: 16,
        channels: 1,
        ..Default::default()
    })
    .unwrap();
    let cfg = RunConfig {
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        set_layers: vec![1],
        bridge_hidden: 8,
        epochs: 1,
        batch_size: 4,
        eval_every: 0,
        ..Default::default()
    };
    (ds, cfg)
}

#[test]
fn variants_change_one_knob() {
    let base = RunConfig::default();
    assert_eq!(Variant::Full.apply(&base), base);
    assert_eq!(Variant::NoVisualReconstruction.apply(&base).lambda_vr, 0.0);
    assert_eq!(Variant::NoSemanticReconstruction.apply(&base).lambda_sr, 0.0);
    assert_eq!(Variant::NoEnhancement.apply(&base).gamma, 1.0);
    assert_eq!(Variant::NoFusion.apply(&base).kappa, 1.0);
    for v in &Variant::ALL[1..] {
        let c = v.apply(&base);
        let diffs = [
            c.lambda_vr != base.lambda_vr,
            c.lambda_sr != base.lambda_sr,
            c.gamma != base.gamma,
            c.kappa != base.kappa,
        ];
        assert_eq!(diffs.iter().filter(|&&d| d).count(), 1, "{v:?}");
    }
}

#[test]
fn table_shape() {
    let (ds, cfg) = small();
    let t = run_ablation(&ds, &cfg, &Variant::ALL, &[0, 1]).unwrap();
    assert_eq!(t.runs.len(), 10);
    let text = t.to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "variant\tacc_mean\tacc_std\tH_mean\tH_std\tacc@0\tH@0\tacc@1\tH@1");
    for (line, v) in lines[1..].iter().zip(Variant::ALL) {
        let cells: Vec<&str> = line.split('\t').collect();
        assert_eq!(cells.len(), 9);
        assert_eq!(cells[0], v.name());
    }
}

#[test]
fn untrained_variants_score_near_chance() {
    let (ds, cfg) = small();
    let cfg = RunConfig { epochs: 0, ..cfg };
    let t = run_ablation(&ds, &cfg, &Variant::ALL, &[0, 1, 2]).unwrap();
    let mean: f64 = t.runs.iter().map(|r| r.acc).sum::<f64>() / t.runs.len() as f64;
    // five unseen candidates
    assert!((mean - 0.2).abs() <= 0.1, "mean CZSL acc {mean}");
}

#[test]
fn runs_are_reproducible() {
    let (ds, cfg) = small();
    let a = run_one(&ds, &cfg, Variant::NoFusion, 3).unwrap();
    let b = run_one(&ds, &cfg, Variant::NoFusion, 3).unwrap();
    assert_eq!(a, b);
}
