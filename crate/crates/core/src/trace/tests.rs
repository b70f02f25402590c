use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::BackboneConfig;
use crate::block::{keep_count, BlockConfig};
use crate::model::ModelConfig;

fn setup(kappa: f64, set_layers: Vec<usize>) -> (ZslVit, Vec<Tensor>) {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            num_layers: 4,
            set_layers,
        },
        block: BlockConfig { kappa, bridge_hidden: 8, ..Default::default() },
        attr_dim: 4,
        normalize_prototypes: false,
    };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let images = (0..3).map(|_| Tensor::uniform(&[1, 16, 16], -1.0, 1.0, &mut r)).collect();
    (ZslVit::new(cfg, 2).unwrap(), images)
}

fn run(kappa: f64, set_layers: Vec<usize>) -> Vec<LayerTrace> {
    let (m, images) = setup(kappa, set_layers);
    let refs: Vec<&Tensor> = images.iter().collect();
    trace(&m, &refs, &[10, 11, 12]).unwrap()
}

#[test]
fn one_record_per_image_and_layer() {
    let t = run(0.7, vec![0, 2, 3]);
    assert_eq!(t.len(), 9);
    assert_eq!(t[0].image, 10);
    assert_eq!(t.iter().filter(|r| r.image == 12).map(|r| r.layer).collect::<Vec<_>>(), vec![0, 2, 3]);
    assert!(run(0.7, vec![]).is_empty());
}

#[test]
fn scores_sum_to_one_and_counts_follow_keep_rate() {
    for r in run(0.6, vec![1, 2, 3]) {
        let n = r.provenance.len();
        assert_eq!(r.scores.len(), n);
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.kept.len(), keep_count(n, 0.6));
        assert_eq!(r.dropped.len(), n - keep_count(n, 0.6));
    }
}

#[test]
fn first_mask_covers_dropped_patches() {
    for r in run(0.75, vec![1, 3]).iter().filter(|r| r.layer == 1) {
        assert_eq!(r.masked_count(), 16 - keep_count(16, 0.75));
        for &j in &r.dropped {
            assert!(r.mask[j]);
        }
    }
}

#[test]
fn provenance_is_consistent_across_layers() {
    let t = run(0.7, vec![0, 1, 2, 3]);
    for pair in t.windows(2).filter(|w| w[0].image == w[1].image) {
        let (a, b) = (&pair[0], &pair[1]);
        let alive = surviving_patches(&a.provenance, &a.kept);
        let fused_slots = b.provenance.iter().filter(|p| matches!(p, Provenance::Fused(_))).count();
        assert!(fused_slots <= 1);
        for p in &b.provenance {
            match p {
                Provenance::Patch(i) => assert!(alive.contains(i)),
                Provenance::Fused(members) => {
                    assert!(members.iter().all(|m| a.mask[*m]));
                }
            }
        }
        // every original patch is accounted for exactly once
        let mut all: Vec<usize> = b.provenance.iter().flat_map(|p| p.patches()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        // masks only grow
        assert!(a.mask.iter().zip(&b.mask).all(|(x, y)| !x || *y));
    }
}

#[test]
fn text_roundtrip() {
    let t = run(0.5, vec![1, 2]);
    let text = format_traces(&t);
    assert_eq!(text.lines().count(), t.len());
    assert_eq!(parse_traces(&text).unwrap(), t);
    assert!(text.lines().next().unwrap().starts_with("image=10 layer=1 grid=4 scores="));
}

#[test]
fn malformed_lines_are_rejected() {
    let good = format_traces(&run(0.5, vec![1]));
    let first = good.lines().next().unwrap();
    for bad in [
        first.replace("grid=4", "grid=5"),
        first.replace("mask=", "mask=2"),
        first.replace("provenance=p", "provenance=q"),
        first.replace(" kept=", " kept=x,"),
        first.replace("image=10", "image=10 image=11"),
        first.replace("layer=1 ", ""),
    ] {
        assert!(bad.parse::<LayerTrace>().is_err(), "{bad}");
    }
    assert_eq!(parse_traces(&format!("\n{first}\nbogus\n")).unwrap_err().0, 3);
}
