use proptest::prelude::*;
use vmamba3d::metrics::{
    accuracy, confusion, f1, micro_precision_recall, precision_recall, ClassMetrics,
    ConfusionMatrix, EvalReport,
};
use vmamba3d::volume::ClassLabel;

fn label() -> impl Strategy<Value = ClassLabel> {
    (0usize..3).prop_map(|i| ClassLabel::from_index(i).unwrap())
}

fn pairs() -> impl Strategy<Value = Vec<(ClassLabel, ClassLabel)>> {
    prop::collection::vec((label(), label()), 1..200)
}

fn split(p: &[(ClassLabel, ClassLabel)]) -> (Vec<ClassLabel>, Vec<ClassLabel>) {
    p.iter().copied().unzip()
}

proptest! {
    #[test]
    fn micro_scores_equal_accuracy(p in pairs()) {
        let (pred, truth) = split(&p);
        let cm = confusion(&pred, &truth).unwrap();
        let acc = accuracy(&cm).unwrap();
        let (mp, mr) = micro_precision_recall(&cm);
        prop_assert!((mp - acc).abs() <= 1e-12);
        prop_assert!((mr - acc).abs() <= 1e-12);
    }

    #[test]
    fn tallies_partition_total(p in pairs()) {
        let (pred, truth) = split(&p);
        let cm = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(cm.total(), p.len() as u64);
        for c in ClassLabel::ALL {
            let o = cm.one_vs_rest(c);
            prop_assert_eq!(o.tp + o.fp + o.fn_ + o.tn, cm.total());
        }
    }

    #[test]
    fn order_invariant(p in pairs(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (pred, truth) = split(&p);
        let mut q = p.clone();
        q.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (pred2, truth2) = split(&q);
        prop_assert_eq!(confusion(&pred, &truth).unwrap(), confusion(&pred2, &truth2).unwrap());
    }

    #[test]
    fn metrics_in_unit_interval(p in pairs()) {
        let (pred, truth) = split(&p);
        let m = ClassMetrics::from_confusion(&confusion(&pred, &truth).unwrap()).unwrap();
        let mut all = vec![m.accuracy, m.r#macro.precision, m.r#macro.recall, m.r#macro.f1];
        for c in &m.per_class {
            all.extend([c.precision, c.recall, c.f1]);
        }
        prop_assert!(all.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn report_json_round_trip(p in pairs(), ts in any::<u64>()) {
        let (pred, truth) = split(&p);
        let r = EvalReport::new("set", confusion(&pred, &truth).unwrap(), "ckpt", ts).unwrap();
        let text = r.to_json().unwrap();
        let back = EvalReport::from_json(&text).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(back.to_json().unwrap(), text);
        prop_assert!(back.consistency_error().unwrap() <= 1e-12);
    }

    #[test]
    fn f1_fixed_point(x in 0.0f64..=1.0) {
        prop_assert!((f1(x, x) - x).abs() <= 1e-15);
    }
}

#[test]
fn perfect_classifier() {
    let truth: Vec<ClassLabel> = ClassLabel::ALL.iter().cycle().take(30).copied().collect();
    let cm = confusion(&truth, &truth).unwrap();
    for t in 0..3 {
        for p in 0..3 {
            assert_eq!(cm.counts[t][p] == 0, t != p);
        }
    }
    assert_eq!(accuracy(&cm).unwrap(), 1.0);
    for c in ClassLabel::ALL {
        assert_eq!(precision_recall(&cm, c), (1.0, 1.0));
    }
}

#[test]
fn json_keys() {
    let cm = ConfusionMatrix {
        counts: [[2, 1, 0], [0, 3, 1], [1, 0, 4]],
    };
    let r = EvalReport::new("synthetic", cm, "model.ckpt", 17).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in [
        "dataset",
        "confusion",
        "per_class",
        "accuracy",
        "macro",
        "checkpoint",
        "timestamp",
    ] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(v["per_class"][1]["label"], "MCI");
    assert_eq!(v["confusion"][2][2], 4);
}
