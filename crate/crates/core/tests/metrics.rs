mod common;

use dtm_core::metrics::{binarize, instance_metrics, label_based_ma, MetricsReport};
use dtm_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{oracle_instance, oracle_ma, random_instance};

#[test]
fn matches_loop_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (p, y) = random_instance(&mut rng, 50, 8);
        let lb = label_based_ma(&p, &y).unwrap();
        let (ma, per) = oracle_ma(&p, &y);
        assert_eq!(lb.ma, ma, "case {case}");
        assert_eq!(lb.per_attribute, per, "case {case}");
        let m = instance_metrics(&p, &y).unwrap();
        assert_eq!([m.accuracy, m.precision, m.recall, m.f1], oracle_instance(&p, &y), "case {case}");
    }
}

#[test]
fn small_case_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (p, y) = random_instance(&mut rng, 50, 4);
    let (ma, _) = oracle_ma(&p, &y);
    assert!((label_based_ma(&p, &y).unwrap().ma - ma).abs() < 1e-12);
}

#[test]
fn binarize_matches_comparison() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let probs = Tensor::uniform(&[20, 6], 0.0, 1.0, &mut rng);
    for thr in [0.0, 0.25, 0.5, 1.0] {
        let b = binarize(&probs, thr);
        for (k, &v) in probs.data().iter().enumerate() {
            assert_eq!(b.data()[k] == 1.0, v >= thr);
        }
    }
}

#[test]
fn perfect_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, y) = random_instance(&mut rng, 30, 5);
    let r = MetricsReport::from_predictions(&y, &y, 0.5).unwrap();
    assert_eq!([r.ma, r.accuracy, r.precision, r.recall, r.f1], [1.0; 5]);
}

fn permute(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let j = t.shape()[1];
    let mut data = Vec::new();
    for &i in rows {
        for &a in cols {
            data.push(t.data()[i * j + a]);
        }
    }
    Tensor::new(t.shape(), data).unwrap()
}

#[test]
fn invariant_under_row_and_column_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (p, y) = random_instance(&mut rng, 50, 8);
        let base = MetricsReport::from_predictions(&p, &y, 0.5).unwrap();
        let mut rows: Vec<usize> = (0..50).collect();
        let mut cols: Vec<usize> = (0..8).collect();
        rows.shuffle(&mut rng);
        cols.shuffle(&mut rng);
        let r = MetricsReport::from_predictions(&permute(&p, &rows, &cols), &permute(&y, &rows, &cols), 0.5)
            .unwrap();
        assert_eq!(
            [r.ma, r.accuracy, r.precision, r.recall, r.f1],
            [base.ma, base.accuracy, base.precision, base.recall, base.f1]
        );
        for (k, &c) in cols.iter().enumerate() {
            assert_eq!(r.per_attribute_ma[k], base.per_attribute_ma[c]);
        }
    }
}

#[test]
fn flipping_a_two_sided_attribute_complements_its_ma() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = Tensor::new(&[40, 1], (0..40).map(|i| f64::from((i % 3 == 0) as u8)).collect()).unwrap();
    let p = Tensor::new(&[40, 1], (0..40).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect()).unwrap();
    let flipped = Tensor::new(&[40, 1], p.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    let a = label_based_ma(&p, &y).unwrap().ma;
    let b = label_based_ma(&flipped, &y).unwrap().ma;
    assert!((a + b - 1.0).abs() < 1e-15);
}

#[test]
fn metrics_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (p, y) = random_instance(&mut rng, 10, 3);
        let r = MetricsReport::from_predictions(&p, &y, 0.5).unwrap();
        for v in [r.ma, r.accuracy, r.precision, r.recall, r.f1]
            .into_iter()
            .chain(r.per_attribute_ma.iter().copied())
        {
            assert!((0.0..=1.0).contains(&v));
        }
        let f1 = if r.precision + r.recall > 0.0 {
            2.0 * r.precision * r.recall / (r.precision + r.recall)
        } else {
            0.0
        };
        assert!((r.f1 - f1).abs() < 1e-15);
    }
}
