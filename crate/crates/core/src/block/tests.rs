use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::init_params as init_backbone;
use crate::numerics::{grad_check, GradCheckOptions};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 4,
        num_heads: 2,
        mlp_ratio: 2,
        num_layers: 1,
        set_layers: vec![0],
    }
}

fn tiny_store(bb: &BackboneConfig, block: &BlockConfig, attr_dim: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    let mut r = rng(seed);
    init_backbone(bb, &mut s, &mut r);
    init_params(0, bb, block, attr_dim, &mut s, &mut r);
    // Larger weights than the 0.02 init so every path carries signal.
    for (_, t) in s.iter_mut() {
        for v in t.data_mut() {
            *v *= 5.0;
        }
    }
    s
}

fn fixed_attention(g: &mut Graph, scores: &[f64], values: Tensor) -> Attention {
    let n = scores.len();
    let a = g.constant(Tensor::matrix(1, n, scores.to_vec()).unwrap());
    let v = g.constant(values);
    let af = g.reshape(a, &[n]).unwrap();
    let f = g.scale_rows(v, af).unwrap();
    Attention { a, v, f }
}

/// Bridge whose `s2v` branch outputs the constant `out` regardless of input.
fn constant_s2v_store(attr_dim: usize, out: &[f64]) -> ParamStore {
    let bb = BackboneConfig { embed_dim: out.len(), ..tiny_backbone() };
    let block = BlockConfig { bridge_hidden: 3, ..Default::default() };
    let mut s = ParamStore::new();
    init_params(0, &bb, &block, attr_dim, &mut s, &mut rng(1));
    s.insert("enc0.s2v.2.w", Tensor::zeros(&[3, out.len()]));
    s.insert("enc0.s2v.2.b", Tensor::vector(out.to_vec()));
    s
}

#[test]
fn gamma_one_keeps_cls_exactly() {
    let s = constant_s2v_store(3, &[5.0, -7.0]);
    let mut g = Graph::new();
    let pv = s.attach(&mut g, false);
    let cls = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap());
    let z = g.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap());
    let e = semantic_enhance(&mut g, &pv, 0, cls, Some(z), 1.0, true).unwrap();
    assert_eq!(g.value(e.cls_enhanced), g.value(cls));
    let e = semantic_enhance(&mut g, &pv, 0, cls, Some(z), 0.0, true).unwrap();
    assert_eq!(g.value(e.cls_enhanced).data(), &[5.0, -7.0]);
}

#[test]
fn gamma_point_nine_hand_example() {
    let s = constant_s2v_store(3, &[0.0, 1.0]);
    let mut g = Graph::new();
    let pv = s.attach(&mut g, false);
    let cls = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let z = g.constant(Tensor::matrix(1, 3, vec![0.2, 0.4, 0.6]).unwrap());
    let e = semantic_enhance(&mut g, &pv, 0, cls, Some(z), 0.9, true).unwrap();
    let got = g.value(e.cls_enhanced).data();
    assert!((got[0] - 0.9).abs() < 1e-15 && (got[1] - 0.1).abs() < 1e-15);
    assert_eq!(g.shape(e.z_hat), &[1, 3]);
    assert_eq!(g.shape(e.cls_hat.unwrap()), &[1, 2]);
}

#[test]
fn semantic_enhance_errors() {
    let s = constant_s2v_store(3, &[0.0, 1.0]);
    let mut g = Graph::new();
    let pv = s.attach(&mut g, false);
    let cls = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    assert!(matches!(
        semantic_enhance(&mut g, &pv, 0, cls, None, 1.2, true),
        Err(Error::Config { .. })
    ));
    assert!(matches!(
        semantic_enhance(&mut g, &pv, 0, cls, None, 0.9, true),
        Err(Error::Contract(_))
    ));
    let e = semantic_enhance(&mut g, &pv, 0, cls, None, 0.9, false).unwrap();
    assert_eq!(e.cls_enhanced, cls);
    assert!(e.cls_hat.is_none());
}

#[test]
fn singleton_and_symmetric_scores() {
    let mut g = Graph::new();
    let cls = g.constant(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
    let p = g.constant(Tensor::matrix(1, 2, vec![7.0, 2.0]).unwrap());
    let att = token_attention(&mut g, cls, p, 1, 1, None).unwrap();
    assert_eq!(g.value(att.a).data(), &[1.0]);

    let p = g.constant(Tensor::matrix(2, 2, vec![0.4, 0.1, 0.4, 0.1]).unwrap());
    let att = token_attention(&mut g, cls, p, 1, 2, None).unwrap();
    assert_eq!(g.value(att.a).data(), &[0.5, 0.5]);
}

#[test]
fn hand_scores_two_thirds_one_third() {
    let mut g = Graph::new();
    let cls = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let l2 = std::f64::consts::LN_2;
    let p = g.constant(Tensor::matrix(2, 2, vec![2f64.sqrt() * l2, 0.0, 0.0, 0.0]).unwrap());
    let att = token_attention(&mut g, cls, p, 1, 2, None).unwrap();
    let a = g.value(att.a).data();
    assert!((a[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((a[1] - 1.0 / 3.0).abs() < 1e-12);
    // Rows of f sum to the attention readout a·V.
    let f = g.value(att.f);
    let v = g.value(p);
    for c in 0..2 {
        let readout = a[0] * v.row(0)[c] + a[1] * v.row(1)[c];
        assert!((f.row(0)[c] + f.row(1)[c] - readout).abs() < 1e-15);
    }
}

#[test]
fn keep_counts_at_default_kappa() {
    assert_eq!(keep_count(10, 0.9), 9);
    assert_eq!(patches_after(10, 0.9), 10);
    assert_eq!(keep_count(64, 0.9), 57);
    assert_eq!(patches_after(64, 0.9), 58);
    assert_eq!(keep_count(3, 0.1), 1);
    assert_eq!(patches_after(64, 1.0), 64);
}

#[test]
fn count_law_matches_integer_oracle() {
    for n in 2..=64usize {
        for tenths in 1..=10usize {
            let kappa = tenths as f64 / 10.0;
            let k = (tenths * n / 10).max(1);
            let expect = if tenths < 10 { k + 1 } else { k };
            assert_eq!(patches_after(n, kappa), expect, "n={n} kappa={kappa}");
        }
    }
}

#[test]
fn hand_fusion_example() {
    let mut g = Graph::new();
    let att = fixed_attention(&mut g, &[0.1, 0.2, 0.3, 0.4], Tensor::eye(4));
    let out = visual_enhance(&mut g, &att, 1, 4, 0.5, KeptTokens::Raw).unwrap();
    assert_eq!(out.kept, vec![vec![2, 3]]);
    assert_eq!(out.dropped, vec![vec![0, 1]]);
    assert_eq!(g.value(out.fused.unwrap()).data(), &[0.1, 0.2, 0.0, 0.0]);
    assert_eq!(
        g.value(out.patches_out).data(),
        &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.1, 0.2, 0.0, 0.0]
    );
    assert_eq!(out.n_out, 3);
}

#[test]
fn scaled_variant_rescales_kept_tokens() {
    let mut g = Graph::new();
    let att = fixed_attention(&mut g, &[0.1, 0.2, 0.3, 0.4], Tensor::eye(4));
    let out = visual_enhance(&mut g, &att, 1, 4, 0.5, KeptTokens::Scaled).unwrap();
    assert_eq!(g.value(out.patches_out).row(0), &[0.0, 0.0, 0.3, 0.0]);
    assert_eq!(g.value(out.patches_out).row(1), &[0.0, 0.0, 0.0, 0.4]);
}

#[test]
fn kappa_one_appends_nothing() {
    let mut g = Graph::new();
    let att = fixed_attention(&mut g, &[0.25; 4], Tensor::eye(4));
    let out = visual_enhance(&mut g, &att, 1, 4, 1.0, KeptTokens::Raw).unwrap();
    assert!(out.fused.is_none());
    assert_eq!(out.n_out, 4);
    assert_eq!(g.value(out.patches_out), &Tensor::eye(4));
}

#[test]
fn ties_prefer_lower_index() {
    let mut g = Graph::new();
    let att = fixed_attention(&mut g, &[0.2, 0.3, 0.2, 0.3], Tensor::eye(4));
    let out = visual_enhance(&mut g, &att, 1, 4, 0.75, KeptTokens::Raw).unwrap();
    assert_eq!(out.kept, vec![vec![0, 1, 3]]);
}

#[test]
fn invalid_kappa_and_short_input() {
    let mut g = Graph::new();
    let att = fixed_attention(&mut g, &[0.5, 0.5], Tensor::eye(2));
    assert!(matches!(visual_enhance(&mut g, &att, 1, 2, 0.0, KeptTokens::Raw), Err(Error::Config { .. })));
    assert!(matches!(visual_enhance(&mut g, &att, 1, 2, 1.5, KeptTokens::Raw), Err(Error::Config { .. })));
    let att = fixed_attention(&mut g, &[1.0], Tensor::eye(1));
    let out = visual_enhance(&mut g, &att, 1, 1, 0.5, KeptTokens::Raw).unwrap();
    assert_eq!(out.n_out, 1);
    assert!(out.fused.is_none());
}

#[test]
fn fusion_is_scale_covariant_in_dropped_values() {
    let scores = [0.05, 0.4, 0.15, 0.4];
    let mut r = rng(3);
    let base = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
    let fused_with = |c: f64| {
        let mut v = base.clone();
        for j in [0usize, 2] {
            for x in &mut v.data_mut()[j * 3..(j + 1) * 3] {
                *x *= c;
            }
        }
        let mut g = Graph::new();
        let att = fixed_attention(&mut g, &scores, v);
        let out = visual_enhance(&mut g, &att, 1, 4, 0.5, KeptTokens::Raw).unwrap();
        assert_eq!(out.dropped, vec![vec![0, 2]]);
        g.value(out.fused.unwrap()).clone()
    };
    let one = fused_with(1.0);
    let three = fused_with(3.0);
    for (a, b) in one.data().iter().zip(three.data()) {
        assert!((3.0 * a - b).abs() < 1e-14);
    }
}

proptest::proptest! {
    #[test]
    fn top_k_matches_full_sort_oracle(
        raw in proptest::collection::vec(0u8..6, 2..40),
        tenths in 1usize..=10,
    ) {
        let scores: Vec<f64> = raw.iter().map(|&x| x as f64 / 10.0).collect();
        let n = scores.len();
        let k = keep_count(n, tenths as f64 / 10.0);
        let mut oracle: Vec<(f64, usize)> = scores.iter().copied().zip(0..n).collect();
        oracle.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let mut expect: Vec<usize> = oracle[..k].iter().map(|p| p.1).collect();
        expect.sort_unstable();
        let got = top_k(&scores, k);
        proptest::prop_assert_eq!(&got, &expect);
        let min_kept = got.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_drop = (0..n).filter(|i| !got.contains(i)).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        proptest::prop_assert!(min_kept >= max_drop);
    }
}

fn run_encoder(store: &ParamStore, block: &BlockConfig, training: bool, seed: u64) -> (Graph, TokenSet, LayerOutput, TokenSet) {
    let bb = tiny_backbone();
    let mut r = rng(seed);
    let img = Tensor::uniform(&[1, 8, 8], -1.0, 1.0, &mut r);
    let img2 = Tensor::uniform(&[1, 8, 8], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let pv = store.attach(&mut g, false);
    let tokens = backbone::patch_embed(&mut g, &pv, &bb, &[&img, &img2]).unwrap();
    let z = g.constant(Tensor::uniform(&[2, 3], 0.0, 1.0, &mut r));
    let (out, layer) = zslvit_encoder(&mut g, &pv, 0, &bb, block, &tokens, Some(z), training).unwrap();
    (g, tokens, layer, out)
}

#[test]
fn degenerate_block_equals_plain_encoder() {
    let block = BlockConfig { gamma: 1.0, kappa: 1.0, bridge_hidden: 5, ..Default::default() };
    let bb = tiny_backbone();
    let s = tiny_store(&bb, &block, 3, 20);
    let (mut g, tokens, layer, out) = run_encoder(&s, &block, true, 21);
    let pv = s.attach(&mut g, false);
    let (plain, _) = backbone::encoder(&mut g, &pv, 0, &bb, &tokens).unwrap();
    assert_eq!(out.n, plain.n);
    assert_eq!(g.value(out.x), g.value(plain.x));
    assert_eq!(g.value(layer.set.enhanced.cls_enhanced), g.value(layer.set.cls_in));
}

#[test]
fn inference_skips_enhancement_but_still_prunes() {
    let block = BlockConfig { gamma: 0.5, kappa: 0.5, bridge_hidden: 5, ..Default::default() };
    let bb = tiny_backbone();
    let s = tiny_store(&bb, &block, 3, 22);
    let (g, _, layer, out) = run_encoder(&s, &block, false, 23);
    assert_eq!(layer.set.enhanced.cls_enhanced, layer.set.cls_in);
    assert_eq!(out.n, 3);
    for b in 0..2 {
        let row = g.value(layer.set.attention.a).row(b).to_vec();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(out.provenance[b].len(), 3);
        assert!(matches!(out.provenance[b][2], Provenance::Fused(ref m) if m.len() == 2));
    }
    let (g2, _, layer2, _) = run_encoder(&s, &block, true, 23);
    assert_ne!(g2.value(layer2.set.enhanced.cls_enhanced), g2.value(layer2.set.cls_in));
    drop(g);
}

#[test]
fn encoder_gradient_check() {
    for kv in [KvProjection::Identity, KvProjection::Learned] {
        let block = BlockConfig { gamma: 0.7, kappa: 0.5, bridge_hidden: 3, kv_projection: kv, ..Default::default() };
        let bb = tiny_backbone();
        let s = tiny_store(&bb, &block, 3, 30);
        let mut r = rng(31);
        let img = Tensor::uniform(&[1, 8, 8], -1.0, 1.0, &mut r);
        let z = Tensor::uniform(&[1, 3], 0.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let params: Vec<(String, Tensor)> = s.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let report = grad_check(
            |g, p| {
                let pv = ParamVars::from_pairs(names.iter().cloned().zip(p.iter().copied()));
                let tokens = backbone::patch_embed(g, &pv, &bb, &[&img])?;
                let zv = g.constant(z.clone());
                let (out, _) = zslvit_encoder(g, &pv, 0, &bb, &block, &tokens, Some(zv), true)?;
                assert_eq!(out.n, 3);
                let wv = g.constant(w.clone());
                let m = g.mul(out.x, wv)?;
                Ok(g.sum(m))
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
