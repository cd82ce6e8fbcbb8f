use dtm_core::model::{
    Attribute, AttributeSchema, Checkpoint, DtmHead, DtmModel, FcBaseline, Head, HeadMode, Layer,
    ModelConfig, ModelStats,
};
use dtm_core::tensor::{BnMode, Graph, Tensor};
use dtm_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg(head: HeadMode) -> ModelConfig {
    ModelConfig {
        head,
        ..ModelConfig::default()
    }
}

fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[n, 3, h, w], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn backbone_default_shapes() {
    let mut m = DtmModel::new(AttributeSchema::synthetic_default(), ModelConfig::default(), 1).unwrap();
    assert_eq!(m.down_stride(), 8);
    let mut g = Graph::new();
    let x = g.constant(images(2, 128, 96, 2));
    let out = m.forward(&mut g, x).unwrap();
    assert_eq!(g.value(out.features).shape(), &[2, 64, 16, 12]);
    assert_eq!(g.value(out.logits).shape(), &[2, 12]);
    let d = out.dtm.as_ref().unwrap();
    assert_eq!(g.value(d.heatmaps_gap.unwrap()).shape(), &[2, 3, 16, 12]);
    assert_eq!(g.value(d.heatmaps_gmp.unwrap()).shape(), &[2, 9, 16, 12]);
    assert_eq!(m.heatmap_dims(128, 96), (16, 12));
}

#[test]
fn backbone_rejects_indivisible_input() {
    let mut m = DtmModel::new(AttributeSchema::synthetic_default(), ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(images(1, 100, 96, 2));
    assert!(matches!(m.forward(&mut g, x), Err(Error::InvalidArgument(_))));
}

#[test]
fn gradient_reaches_first_layer() {
    let mut m = DtmModel::new(AttributeSchema::synthetic_default(), ModelConfig::default(), 3).unwrap();
    let mut g = Graph::new();
    let x = g.constant(images(4, 32, 24, 4));
    let out = m.forward(&mut g, x).unwrap();
    let sq = g.mul(out.logits, out.logits).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    m.collect_grads(&g).unwrap();
    let first = &m.backbone.stages[0].kernel;
    assert!(first.grad().unwrap().iter().any(|&v| v != 0.0));
    let n_params = m.params_mut().len();
    assert_eq!(n_params, g.params().len());
}

fn features(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, c, h, w], 1.0, &mut rng(seed))
}

#[test]
fn degenerate_splits_reduce_to_single_pooling() {
    let all_local = AttributeSchema::new(vec![
        Attribute::local("a", &["nose"]).unwrap(),
        Attribute::local("b", &["hands"]).unwrap(),
    ])
    .unwrap();
    let c = cfg(HeadMode::DtmMixed);
    let mut head = DtmHead::new(&all_local, HeadMode::DtmMixed, 5, &c, &mut rng(1)).unwrap();
    assert!(head.gap.is_none() && head.gmp.is_some());
    let mut g = Graph::new();
    let f = g.constant(features(3, 5, 4, 4, 2));
    let out = head.forward(&mut g, f).unwrap();
    let (pooled, _) = g.gmp(out.heatmaps_gmp.unwrap()).unwrap();
    assert_eq!(g.value(out.logits), g.value(pooled));

    let all_global =
        AttributeSchema::new(vec![Attribute::global("x"), Attribute::global("y")]).unwrap();
    let mut head = DtmHead::new(&all_global, HeadMode::DtmMixed, 5, &c, &mut rng(1)).unwrap();
    assert!(head.gmp.is_none());
    let out = head.forward(&mut g, f).unwrap();
    let pooled = g.gap(out.heatmaps_gap.unwrap()).unwrap();
    assert_eq!(g.value(out.logits), g.value(pooled));
}

/// Equal weights, no BN: GAP(T ∗ F) == W · GAP(F).
#[test]
fn template_gap_equals_fc_on_gap() {
    let schema = AttributeSchema::synthetic_default();
    let mut c = cfg(HeadMode::DtmGap);
    c.head_bn = false;
    let mut head = DtmHead::new(&schema, HeadMode::DtmGap, 64, &c, &mut rng(5)).unwrap();
    let mut fc = FcBaseline::new(12, 64, &c, &mut rng(6));
    let t = head.gap.as_ref().unwrap().templates.clone();
    fc.w_fc = t.reshape(&[12, 64]).unwrap();
    let mut g = Graph::new();
    let f = g.constant(features(4, 64, 16, 12, 7));
    let a = head.forward(&mut g, f).unwrap().logits;
    let b = fc.forward(&mut g, f).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-9);
}

#[test]
fn fc_identity_weights_give_gap() {
    let mut c = cfg(HeadMode::FcBaseline);
    c.head_bn = false;
    let mut fc = FcBaseline::new(6, 6, &c, &mut rng(1));
    let mut eye = Tensor::zeros(&[6, 6]);
    for i in 0..6 {
        eye.data_mut()[i * 6 + i] = 1.0;
    }
    fc.w_fc = eye;
    let mut g = Graph::new();
    let f = g.constant(features(3, 6, 5, 4, 2));
    let z = fc.forward(&mut g, f).unwrap();
    let p = g.gap(f).unwrap();
    assert!(g.value(z).max_abs_diff(g.value(p)) < 1e-15);
}

#[test]
fn batchnorm_breaks_the_equivalence() {
    let schema = AttributeSchema::synthetic_default();
    let c = cfg(HeadMode::DtmGap);
    let mut head = DtmHead::new(&schema, HeadMode::DtmGap, 16, &c, &mut rng(5)).unwrap();
    let mut fc = FcBaseline::new(12, 16, &c, &mut rng(6));
    fc.w_fc = head.gap.as_ref().unwrap().templates.clone().reshape(&[12, 16]).unwrap();
    let mut g = Graph::new();
    let f = g.constant(features(8, 16, 4, 4, 7));
    let a = head.forward(&mut g, f).unwrap().logits;
    let b = fc.forward(&mut g, f).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-3);
}

#[test]
fn channel_mismatch_is_a_dimension_error() {
    let schema = AttributeSchema::synthetic_default();
    let c = cfg(HeadMode::DtmMixed);
    let mut head = DtmHead::new(&schema, HeadMode::DtmMixed, 16, &c, &mut rng(5)).unwrap();
    let mut g = Graph::new();
    let f = g.constant(features(2, 8, 4, 4, 7));
    assert!(matches!(head.forward(&mut g, f), Err(Error::Dimension { .. })));
    let mut fc = FcBaseline::new(12, 16, &c, &mut rng(6));
    assert!(matches!(fc.forward(&mut g, f), Err(Error::Dimension { .. })));
}

/// Logits follow schema order however globals and locals interleave.
#[test]
fn logit_columns_follow_schema_permutation() {
    let schema = AttributeSchema::synthetic_default();
    let perm = [11, 0, 5, 3, 9, 1, 7, 2, 10, 4, 8, 6];
    let permuted = schema.permuted(&perm).unwrap();
    let c = cfg(HeadMode::DtmMixed);
    let mut a = DtmModel::new(schema.clone(), c.clone(), 9).unwrap();
    let mut b = DtmModel::new(permuted.clone(), c, 10).unwrap();
    b.backbone = a.backbone.clone();
    // copy each attribute's template to wherever it lives in the other model
    let (Head::Dtm(ha), Head::Dtm(hb)) = (&a.head, &mut b.head) else {
        unreachable!()
    };
    for (k, &old) in perm.iter().enumerate() {
        let (pa, ca) = ha.locate(old).unwrap();
        let (pb, cb) = hb.locate(k).unwrap();
        assert_eq!(pa, pb);
        let src = match pa {
            dtm_core::model::Pooling::Gap => ha.gap.as_ref().unwrap(),
            dtm_core::model::Pooling::Gmp => ha.gmp.as_ref().unwrap(),
        };
        let dst = match pb {
            dtm_core::model::Pooling::Gap => hb.gap.as_mut().unwrap(),
            dtm_core::model::Pooling::Gmp => hb.gmp.as_mut().unwrap(),
        };
        let row: Vec<f64> = src.templates.data()[ca * 64..(ca + 1) * 64].to_vec();
        dst.templates.data_mut()[cb * 64..(cb + 1) * 64].copy_from_slice(&row);
    }
    let x = images(3, 32, 24, 11);
    let mut g = Graph::new();
    let xa = g.constant(x.clone());
    let la = a.forward(&mut g, xa).unwrap().logits;
    let xb = g.constant(x);
    let lb = b.forward(&mut g, xb).unwrap().logits;
    let (va, vb) = (g.value(la), g.value(lb));
    for n in 0..3 {
        for (k, &old) in perm.iter().enumerate() {
            assert_eq!(vb.at(&[n, k]), va.at(&[n, old]), "sample {n} column {k}");
        }
    }
}

/// 1×1 templates: a heatmap cell depends only on the features at that cell.
#[test]
fn heatmap_cells_are_local() {
    let schema = AttributeSchema::synthetic_default();
    let c = cfg(HeadMode::DtmMixed);
    let mut head = DtmHead::new(&schema, HeadMode::DtmMixed, 8, &c, &mut rng(3)).unwrap();
    for bank in [head.gap.as_mut(), head.gmp.as_mut()].into_iter().flatten() {
        bank.bn.as_mut().unwrap().mode = BnMode::Eval;
    }
    let base = features(1, 8, 4, 5, 4);
    let run = |head: &mut DtmHead, f: &Tensor| {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let o = head.forward(&mut g, fv).unwrap();
        g.value(o.heatmaps_gmp.unwrap()).clone()
    };
    let h0 = run(&mut head, &base);
    let target = 7; // cell (row 1, col 2)
    for other in (0..20).filter(|&s| s != target) {
        let mut f = base.clone();
        for ch in 0..8 {
            f.data_mut()[ch * 20 + other] += 3.0;
        }
        let h1 = run(&mut head, &f);
        for k in 0..9 {
            assert_eq!(h1.data()[k * 20 + target], h0.data()[k * 20 + target]);
        }
    }
}

#[test]
fn stats_single_pointwise_conv_and_empty() {
    let conv = Layer::Conv {
        k: 1,
        c_in: 64,
        c_out: 10,
        h_out: 16,
        w_out: 12,
    };
    assert_eq!(
        ModelStats::of_layers(&[conv]),
        ModelStats {
            params: 640,
            flops: 245_760
        }
    );
    assert_eq!(ModelStats::of_layers(&[]), ModelStats { params: 0, flops: 0 });
}

#[test]
fn stats_scale_with_input_area_only() {
    for head in HeadMode::ALL {
        let m = DtmModel::new(AttributeSchema::synthetic_default(), cfg(head), 1).unwrap();
        let small = m.stats(128, 96);
        let big = m.stats(256, 192);
        assert_eq!(small.params, big.params);
        assert_eq!(small.params as usize, m.param_count());
        // the FC head's linear + vector BN terms do not scale with area
        let fixed = match head {
            HeadMode::FcBaseline => 2 * 64 * 12 + 2 * 12,
            _ => 0,
        };
        assert_eq!(big.flops - fixed, 4 * (small.flops - fixed), "{head:?}");
    }
}

#[test]
fn checkpoint_round_trip_and_stability() {
    for head in HeadMode::ALL {
        let mut m = DtmModel::new(AttributeSchema::synthetic_default(), cfg(head), 4).unwrap();
        // move running stats off their defaults
        let mut g = Graph::new();
        let x = g.constant(images(2, 32, 24, 5));
        m.forward(&mut g, x).unwrap();
        let ck = Checkpoint::new(m, serde_json::json!({"seed": 4, "note": "test"}));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes, ck.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = DtmModel::new(AttributeSchema::synthetic_default(), ModelConfig::default(), 4).unwrap();
    let bytes = Checkpoint::new(m, serde_json::Value::Null).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut v2 = bytes.clone();
    v2[8] = 2;
    assert!(Checkpoint::from_bytes(&v2).is_err());
}

#[test]
fn affine_switch_removes_bn_parameters() {
    let mut c = ModelConfig::default();
    c.bn_affine = false;
    let mut m = DtmModel::new(AttributeSchema::synthetic_default(), c, 1).unwrap();
    // 4 conv kernels + 2 template banks
    assert_eq!(m.params_mut().len(), 6);
    let mut g = Graph::new();
    let x = g.constant(images(2, 16, 16, 1));
    m.forward(&mut g, x).unwrap();
    assert_eq!(g.params().len(), 6);
}
