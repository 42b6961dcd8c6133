use cxrseg_core::metrics::{
    confidence_radius, confusion, confusion_masks, det_metrics, evaluate_detection, evaluate_segmentation, format_cell,
    format_table, seg_metrics, Averaging, CIParams, ConfusionCounts, Task,
};
use cxrseg_core::{BinaryMask, Error};
use proptest::prelude::*;

fn cc(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts { tp, tn, fp, fn_ }
}

#[test]
fn confusion_hand_counts() {
    let gt: Vec<u8> = (0..16).map(|i| (i < 10) as u8).collect();
    assert_eq!(confusion(&gt, &gt).unwrap(), cc(10, 6, 0, 0));
    let neg: Vec<u8> = gt.iter().map(|&v| 1 - v).collect();
    let c = confusion(&neg, &gt).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
    assert_eq!(c.total(), 16);
    assert_eq!(confusion(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), cc(1, 2, 0, 1));
    assert!(matches!(confusion(&[1, 0], &[1]), Err(Error::Dimension { .. })));
    assert!(matches!(
        confusion_masks(&BinaryMask::zeros(2, 3), &BinaryMask::zeros(3, 2)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn segmentation_metric_examples() {
    let m = seg_metrics(&cc(5, 5, 0, 0)).unwrap();
    assert_eq!((m.accuracy, m.iou, m.dsc), (1.0, 1.0, 1.0));
    let m = seg_metrics(&cc(1, 2, 0, 1)).unwrap();
    assert_eq!(m.accuracy, 0.75);
    assert_eq!(m.iou, 0.5);
    assert!((m.dsc - 2.0 / 3.0).abs() < 1e-15);
    // Both empty: overlap defined as perfect.
    let m = seg_metrics(&cc(0, 9, 0, 0)).unwrap();
    assert_eq!((m.iou, m.dsc), (1.0, 1.0));
    assert!(matches!(seg_metrics(&cc(0, 0, 0, 0)), Err(Error::Usage(_))));
}

#[test]
fn detection_metric_examples() {
    let d = det_metrics(&cc(583, 583, 0, 0));
    assert_eq!(d.sensitivity, Some(1.0));
    assert_eq!(d.specificity, Some(1.0));
    assert_eq!(d.accuracy, Some(1.0));
    let d = det_metrics(&cc(8, 8, 2, 2));
    for v in [d.precision, d.sensitivity, d.f1, d.specificity, d.accuracy] {
        assert!((v.unwrap() - 0.8).abs() < 1e-12);
    }
    // No positive predictions: precision is undefined, not an error.
    let d = det_metrics(&cc(0, 5, 0, 3));
    assert_eq!(d.precision, None);
    assert_eq!(d.f1, None);
    assert_eq!(d.sensitivity, Some(0.0));
}

/// Reference "value ± radius" cells, reproduced at n = test-sample count.
#[test]
fn radius_matches_reported_cells() {
    let cases = [(0.9611, 6788, 0.00460, "96.11 ± 0.46"), (0.8305, 1166, 0.02154, "83.05 ± 2.15"), (0.9889, 1166, 0.00601, "98.89 ± 0.60")];
    for (metric, n, radius, cell) in cases {
        let r = confidence_radius(metric, &CIParams::new(n).unwrap());
        assert!((r - radius).abs() < 5e-6, "{metric} {n}: {r}");
        let mv = cxrseg_core::metrics::MetricValue { name: "x".into(), value: Some(metric), radius: Some(r) };
        assert_eq!(format_cell(&mv), cell);
    }
    for n in [1, 10, 1166] {
        assert_eq!(confidence_radius(1.0, &CIParams::new(n).unwrap()), 0.0);
        assert_eq!(confidence_radius(0.0, &CIParams::new(n).unwrap()), 0.0);
    }
    assert!(CIParams::new(0).is_err());
    assert!(CIParams::with_z(5, 0.0).is_err());
    assert!(CIParams::with_z(5, f64::NAN).is_err());
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

#[test]
fn perfect_segmentation_report() {
    let masks = [BinaryMask::from_fn(4, 4, |r, c| r < c), BinaryMask::from_fn(4, 4, |r, _| r == 2)];
    let set: Vec<(String, BinaryMask)> = ids(2).into_iter().zip(masks).collect();
    let rep = evaluate_segmentation(&set, &set, Task::LungSegmentation, Averaging::Micro).unwrap();
    assert_eq!(rep.n, 2);
    assert_eq!(rep.counts.total(), 32);
    for m in &rep.metrics {
        assert_eq!(m.value, Some(1.0));
        assert_eq!(m.radius, Some(0.0));
    }
}

#[test]
fn micro_and_macro_differ() {
    let gt = vec![("a".to_string(), BinaryMask::ones(2, 2)), ("b".to_string(), BinaryMask::ones(4, 4))];
    let pred = vec![("a".to_string(), BinaryMask::zeros(2, 2)), ("b".to_string(), BinaryMask::ones(4, 4))];
    let micro = evaluate_segmentation(&pred, &gt, Task::InfectionSegmentation, Averaging::Micro).unwrap();
    let macro_ = evaluate_segmentation(&pred, &gt, Task::InfectionSegmentation, Averaging::Macro).unwrap();
    assert!((micro.value("iou").unwrap() - 16.0 / 20.0).abs() < 1e-12);
    assert!((macro_.value("iou").unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn alignment_errors_list_ids() {
    let a = vec![("x".to_string(), true), ("y".to_string(), false)];
    let b = vec![("x".to_string(), true), ("z".to_string(), false)];
    match evaluate_detection(&a, &b) {
        Err(Error::Alignment(ids)) => assert_eq!(ids, vec!["y".to_string(), "z".to_string()]),
        other => panic!("{other:?}"),
    }
    let dup = vec![("x".to_string(), true), ("x".to_string(), false)];
    assert!(matches!(evaluate_detection(&dup, &dup), Err(Error::Alignment(_))));
    assert!(matches!(evaluate_detection(&[], &[]), Err(Error::Usage(_))));
}

#[test]
fn table_layout() {
    let preds: Vec<(String, bool)> = ids(4).into_iter().zip([true, true, false, false]).collect();
    let gts: Vec<(String, bool)> = ids(4).into_iter().zip([true, false, false, false]).collect();
    let rep = evaluate_detection(&preds, &gts).unwrap().with_labels("U-Net", "Mini");
    let table = format_table(&[rep.clone(), rep]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("Task"));
    assert!(lines[0].contains("Specificity"));
    assert!(lines[1].contains("COVID-19 Detection"));
    assert!(lines[1].contains("75.00 ± 42.44"));
    let col = lines[0].find("Accuracy").unwrap();
    assert_eq!(lines[1].find("75.00"), Some(col));
    assert_eq!(format_table(&[]), "");
}

fn arb_counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(a, b, c, d)| cc(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dsc_iou_identity(c in arb_counts()) {
        prop_assume!(c.total() > 0);
        let m = seg_metrics(&c).unwrap();
        prop_assert!((m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert!(m.dsc >= m.iou - 1e-15);
        if m.iou > 0.0 && m.iou < 1.0 {
            prop_assert!(m.dsc > m.iou);
        } else {
            prop_assert!((m.dsc - m.iou).abs() < 1e-15);
        }
        for v in [m.accuracy, m.iou, m.dsc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn f1_is_harmonic_mean(c in arb_counts()) {
        let d = det_metrics(&c);
        if let (Some(p), Some(s), Some(f)) = (d.precision, d.sensitivity, d.f1) {
            prop_assert!((f - 2.0 * p * s / (p + s)).abs() < 1e-12);
        }
    }

    #[test]
    fn radius_peaks_at_half(m in 0.0f64..=1.0, n in 1u64..100_000) {
        let p = CIParams::new(n).unwrap();
        prop_assert!(confidence_radius(m, &p) <= confidence_radius(0.5, &p) + 1e-15);
        prop_assert!(confidence_radius(m, &p) >= 0.0);
    }

    #[test]
    fn confusion_is_order_invariant(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..100), rot in 0usize..100) {
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let k = rot % pairs.len();
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (p2, g2): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(c, confusion(&p2, &g2).unwrap());
        prop_assert_eq!(c.total(), pairs.len() as u64);
    }

    #[test]
    fn report_radii_are_consistent(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let preds: Vec<(String, bool)> = bits.iter().enumerate().map(|(i, b)| (format!("s{i}"), b.0)).collect();
        let gts: Vec<(String, bool)> = bits.iter().enumerate().map(|(i, b)| (format!("s{i}"), b.1)).collect();
        let rep = evaluate_detection(&preds, &gts).unwrap();
        let ci = CIParams::new(rep.n).unwrap();
        for m in &rep.metrics {
            prop_assert_eq!(m.radius, m.value.map(|v| confidence_radius(v, &ci)));
        }
    }
}
