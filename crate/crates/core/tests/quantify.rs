use cxrseg_core::maskops::{postprocess_infection, postprocess_lung, PostprocessConfig};
use cxrseg_core::quantify::{
    detect, infection_percentage, per_lung_percentages, quantify_masks, run_pipeline, split_lungs, ReportStatus,
};
use cxrseg_core::{build_model, Arch, BinaryMask, Detection, Error, GrayImage, ModelConfig, PipelineMode, ProbMap, SegModel64};
use proptest::prelude::*;

fn ellipse(h: usize, w: usize, cr: f64, cc: f64, ar: f64, ac: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| ((r as f64 - cr) / ar).powi(2) + ((c as f64 - cc) / ac).powi(2) <= 1.0)
}

fn two_lobes() -> BinaryMask {
    ellipse(32, 32, 15.5, 9.0, 11.0, 5.0).union(&ellipse(32, 32, 15.5, 22.0, 11.0, 5.0)).unwrap()
}

#[test]
fn detection_rule() {
    assert_eq!(detect(&BinaryMask::zeros(8, 8)), Detection::Negative);
    let mut one = BinaryMask::zeros(8, 8);
    one.set(3, 5, true);
    assert_eq!(detect(&one), Detection::Positive);
    assert_eq!(detect(&BinaryMask::ones(8, 8)), Detection::Positive);
    assert_eq!(serde_json::to_string(&Detection::Positive).unwrap(), "\"positive\"");
}

#[test]
fn percentage_examples() {
    let lung = BinaryMask::from_fn(10, 20, |_, _| true);
    let inf = BinaryMask::from_fn(10, 20, |r, c| r < 5 && c < 10);
    assert_eq!(lung.count(), 200);
    assert_eq!(inf.count(), 50);
    assert_eq!(infection_percentage(&inf, &lung).unwrap(), 25.0);
    assert_eq!(infection_percentage(&lung, &lung).unwrap(), 100.0);
    assert_eq!(infection_percentage(&BinaryMask::zeros(10, 20), &lung).unwrap(), 0.0);
    assert!(matches!(infection_percentage(&inf, &BinaryMask::zeros(10, 20)), Err(Error::NoLung)));
    assert!(matches!(infection_percentage(&inf, &BinaryMask::zeros(10, 10)), Err(Error::Dimension { .. })));
    let outside = BinaryMask::from_fn(10, 20, |r, _| r == 0);
    let partial = BinaryMask::from_fn(10, 20, |r, _| r > 0);
    assert!(matches!(infection_percentage(&outside, &partial), Err(Error::Usage(_))));
}

#[test]
fn symmetric_ellipses_split_evenly() {
    let lung = two_lobes();
    let sides = split_lungs(&lung).unwrap();
    assert_eq!(sides.left.count(), sides.right.count());
    assert!(sides.left.get(15, 9) && sides.right.get(15, 22));
    assert!(sides.left.is_disjoint(&sides.right));
    assert_eq!(sides.left.union(&sides.right).unwrap(), lung);
}

#[test]
fn single_blob_split_at_midline() {
    // Blob spanning columns 3..=12 (width 10): the left side takes 3..=7.
    let lung = BinaryMask::from_fn(6, 16, |r, c| (1..5).contains(&r) && (3..=12).contains(&c));
    let sides = split_lungs(&lung).unwrap();
    for r in 0..6 {
        for c in 0..16 {
            let on = lung.get(r, c);
            assert_eq!(sides.left.get(r, c), on && c < 8, "({r},{c})");
            assert_eq!(sides.right.get(r, c), on && c >= 8, "({r},{c})");
        }
    }
    assert!(matches!(split_lungs(&BinaryMask::zeros(4, 4)), Err(Error::NoLung)));
}

#[test]
fn fragment_joins_nearer_lobe() {
    let mut lung = two_lobes();
    // A fragment below the right lobe, and one nearer the left lobe's centroid.
    for (r, c) in [(30, 24), (30, 25), (1, 12)] {
        lung.set(r, c, true);
    }
    let sides = split_lungs(&lung).unwrap();
    assert!(sides.right.get(30, 24) && sides.right.get(30, 25));
    assert!(sides.left.get(1, 12));
    assert_eq!(sides.left.union(&sides.right).unwrap(), lung);
    assert!(sides.left.is_disjoint(&sides.right));
}

#[test]
fn per_lung_examples() {
    let lung = two_lobes();
    let left_only = ellipse(32, 32, 15.5, 9.0, 3.0, 2.0);
    let p = per_lung_percentages(&left_only, &lung).unwrap();
    assert!(p.left_pct > 0.0);
    assert_eq!(p.right_pct, 0.0);
    assert!(!p.left_absent && !p.right_absent);

    let sym = left_only.union(&ellipse(32, 32, 15.5, 22.0, 3.0, 2.0)).unwrap();
    let p = per_lung_percentages(&sym, &lung).unwrap();
    assert_eq!(p.left_pct, p.right_pct);

    // One-pixel lung: the midline cut falls on its only column, so the
    // pixel goes right and the left side is flagged absent.
    let mut dot = BinaryMask::zeros(4, 4);
    dot.set(1, 1, true);
    let p = per_lung_percentages(&dot, &dot).unwrap();
    assert_eq!((p.left_pct, p.right_pct), (0.0, 100.0));
    assert!(p.left_absent && !p.right_absent);
}

#[test]
fn report_no_lung_status() {
    let report = quantify_masks("c1", &BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 4)).unwrap();
    assert_eq!(report.status, ReportStatus::NoLungDetected);
    assert_eq!(report.detection, Detection::Negative);
    assert_eq!(report.overall_pct, 0.0);
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["status"], "no_lung_detected");
    assert!(json.get("timestamp").is_none());
}

fn tiny_model(seed: u64) -> SegModel64 {
    build_model(ModelConfig::new(Arch::Unet, 2, 4), seed).unwrap()
}

fn ramp_image(n: usize) -> GrayImage {
    GrayImage::new(n, n, (0..n * n).map(|i| ((i * 37) % 256) as u8).collect()).unwrap()
}

#[test]
fn parallel_matches_composition() {
    let (lung_model, inf_model) = (tiny_model(1), tiny_model(2));
    let image = ramp_image(16);
    let out = run_pipeline("case", &image, &lung_model, &inf_model, PipelineMode::Parallel, &PostprocessConfig::default())
        .unwrap();

    let lung_probs = ProbMap::from_batch(&lung_model.forward(&image.to_tensor()).unwrap(), 0).unwrap();
    let inf_probs = ProbMap::from_batch(&inf_model.forward(&image.to_tensor()).unwrap(), 0).unwrap();
    let lung = postprocess_lung(&lung_probs).unwrap();
    let inf = postprocess_infection(&inf_probs, &lung).unwrap();
    let mut expected = quantify_masks("case", &lung, &inf).unwrap();
    expected.mode = Some(PipelineMode::Parallel);
    assert_eq!(out.lung_mask, lung);
    assert_eq!(out.infection_mask, inf);
    assert_eq!(out.report, expected);

    // Running the infection model first changes nothing.
    let inf_first = ProbMap::from_batch(&inf_model.forward(&image.to_tensor()).unwrap(), 0).unwrap();
    assert_eq!(inf_first, inf_probs);
}

#[test]
fn cascaded_feeds_masked_image() {
    let (lung_model, inf_model) = (tiny_model(3), tiny_model(4));
    let image = ramp_image(16);
    let cfg = PostprocessConfig::default();
    let out = run_pipeline("case", &image, &lung_model, &inf_model, PipelineMode::Cascaded, &cfg).unwrap();
    let masked = image.masked(&out.lung_mask).unwrap();
    let inf_probs = ProbMap::from_batch(&inf_model.forward(&masked.to_tensor()).unwrap(), 0).unwrap();
    assert_eq!(out.infection_mask, postprocess_infection(&inf_probs, &out.lung_mask).unwrap());
    assert!(out.infection_mask.is_subset_of(&out.lung_mask));
    assert_eq!(out.report.mode, Some(PipelineMode::Cascaded));
}

#[test]
fn zero_image_gives_valid_report() {
    let (lung_model, inf_model) = (tiny_model(5), tiny_model(6));
    for mode in [PipelineMode::Parallel, PipelineMode::Cascaded] {
        let out = run_pipeline("z", &GrayImage::filled(16, 16, 0), &lung_model, &inf_model, mode, &PostprocessConfig::default())
            .unwrap();
        let r = out.report;
        match r.status {
            ReportStatus::Ok => assert!(r.lung_pixels > 0),
            ReportStatus::NoLungDetected => {
                assert_eq!(r.lung_pixels, 0);
                assert_eq!(r.detection, Detection::Negative);
            }
        }
        assert!((0.0..=100.0).contains(&r.overall_pct));
    }
}

#[test]
fn size_mismatch_is_dimension_error() {
    let (lung_model, inf_model) = (tiny_model(1), tiny_model(2));
    let err = run_pipeline("x", &ramp_image(15), &lung_model, &inf_model, PipelineMode::Parallel, &PostprocessConfig::default());
    assert!(matches!(err, Err(Error::Dimension { .. })));
}

#[test]
fn mode_parsing() {
    assert_eq!("parallel".parse::<PipelineMode>().unwrap(), PipelineMode::Parallel);
    assert_eq!("cascaded".parse::<PipelineMode>().unwrap(), PipelineMode::Cascaded);
    assert!("serial".parse::<PipelineMode>().is_err());
    assert_eq!(PipelineMode::default(), PipelineMode::Parallel);
}

fn arb_nested(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (2..=max, 2..=max).prop_flat_map(|(h, w)| {
        (prop::collection::vec(prop::bool::weighted(0.6), h * w), prop::collection::vec(prop::bool::weighted(0.3), h * w)).prop_map(
            move |(l, i)| {
                let lung = BinaryMask::new(h, w, l.iter().map(|&b| b as u8).collect()).unwrap();
                let inf = BinaryMask::new(h, w, l.iter().zip(&i).map(|(&a, &b)| (a && b) as u8).collect()).unwrap();
                (lung, inf)
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn detect_iff_nonempty(bits in prop::collection::vec(prop::bool::weighted(0.02), 1..200)) {
        let n = bits.len();
        let m = BinaryMask::new(1, n, bits.iter().map(|&b| b as u8).collect()).unwrap();
        prop_assert_eq!(detect(&m) == Detection::Positive, bits.iter().any(|&b| b));
    }

    #[test]
    fn quantities_match_recount((lung, inf) in arb_nested(14)) {
        prop_assume!(lung.count() > 0);
        let pct = infection_percentage(&inf, &lung).unwrap();
        let oracle = 100.0 * inf.count() as f64 / lung.count() as f64;
        prop_assert!((pct - oracle).abs() <= 1e-9);
        prop_assert!((0.0..=100.0).contains(&pct));
        prop_assert_eq!(pct == 100.0, inf == lung);

        let sides = split_lungs(&lung).unwrap();
        prop_assert!(sides.left.is_disjoint(&sides.right));
        prop_assert_eq!(sides.left.union(&sides.right).unwrap(), lung.clone());

        let p = per_lung_percentages(&inf, &lung).unwrap();
        let recount = |side: &BinaryMask| side.data().iter().zip(inf.data()).filter(|&(&a, &b)| a == 1 && b == 1).count();
        prop_assert_eq!(p.left_infection_pixels, recount(&sides.left));
        prop_assert_eq!(p.right_infection_pixels, recount(&sides.right));
        prop_assert_eq!(p.left_infection_pixels + p.right_infection_pixels, inf.count());
        prop_assert_eq!(p.left_lung_pixels + p.right_lung_pixels, lung.count());
        prop_assert!(p.left_pct <= 100.0 && p.right_pct <= 100.0);

        let r = quantify_masks("p", &lung, &inf).unwrap();
        prop_assert_eq!(r.status, ReportStatus::Ok);
        prop_assert!((r.overall_pct - 100.0 * r.infection_pixels as f64 / r.lung_pixels as f64).abs() <= 1e-9);
        prop_assert_eq!(r.detection == Detection::Positive, r.infection_pixels >= 1);
    }
}
