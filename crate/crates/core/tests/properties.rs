use std::collections::BTreeSet;

use proptest::prelude::*;

use oneshot_core::eval::{self, ApMethod};
use oneshot_core::pipeline::{BackendSpec, PipelineConfig};
use oneshot_core::recognize::{
    self, PatchStrategy, PlatePattern, PromptId, RecognitionResult, PATCH_SIZE,
};
use oneshot_core::segment::{self, Detection, Mask};
use oneshot_core::select::{self, Strategy as SelectStrategy};
use oneshot_core::track;
use oneshot_core::videoio::{Frame, QueryAnnotation};
use oneshot_core::{BBox, Exec, GrayImage, Point, RgbImage};

fn bbox_in(w: f64, h: f64) -> impl Strategy<Value = BBox> {
    (0.0..w - 1.0, 0.0..h - 1.0, 1.0..w, 1.0..h)
        .prop_map(move |(x0, y0, bw, bh)| BBox::new(x0, y0, (x0 + bw).min(w), (y0 + bh).min(h)))
}

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), w * h)
            .prop_filter("non-empty", |bits| bits.iter().any(|b| *b))
            .prop_map(move |bits| Mask::from_bits(w, h, bits, 1.0).unwrap())
    })
}

fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
    // xorshift texture; enough structure for NCC to lock on
    let mut s = seed | 1;
    let mut data = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        let v = (s >> 24) as u8;
        data.extend([v, v, v]);
    }
    RgbImage::from_raw(w, h, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox_in(100.0, 80.0), b in bbox_in(100.0, 80.0)) {
        let ab = eval::iou(&a, &b).unwrap();
        let ba = eval::iou(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((eval::iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_bbox_is_tight(mask in mask_strategy()) {
        let b = segment::mask_to_bbox(&mask).unwrap();
        let px = mask.pixels();
        for &(x, y) in &px {
            prop_assert!(b.x0 <= x as f64 && (x as f64) < b.x1);
            prop_assert!(b.y0 <= y as f64 && (y as f64) < b.y1);
        }
        prop_assert!(px.iter().any(|p| p.0 as f64 == b.x0));
        prop_assert!(px.iter().any(|p| p.0 as f64 + 1.0 == b.x1));
        prop_assert!(px.iter().any(|p| p.1 as f64 == b.y0));
        prop_assert!(px.iter().any(|p| p.1 as f64 + 1.0 == b.y1));
    }

    #[test]
    fn ppm_and_pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let img = noise_image(w, h, seed);
        prop_assert_eq!(&RgbImage::from_ppm_bytes(&img.to_ppm_bytes()).unwrap(), &img);
        let gray = img.to_gray();
        let mut buf = Vec::new();
        gray.write_pgm(&mut buf).unwrap();
        prop_assert_eq!(GrayImage::from_pgm_bytes(&buf).unwrap(), gray);
    }

    #[test]
    fn config_text_round_trips(
        strategy in prop::sample::select(vec!["single", "crosshairs", "random", "kmedoids"]),
        offset in 1u32..30,
        per_arm in 1usize..5,
        k in 1usize..12,
        seed in any::<u64>(),
        refine in any::<bool>(),
        tau in 1.0f64..80.0,
        motion_weight in 0.0f64..1.0,
        recog in any::<bool>(),
        patch in prop::sample::select(PatchStrategy::ALL.to_vec()),
        prompt in 1u8..=6,
        workers in 0usize..8,
        external in any::<bool>(),
    ) {
        let mut cfg = PipelineConfig::default();
        cfg.set("select.strategy", strategy).unwrap();
        cfg.set("select.offset_px", &offset.to_string()).unwrap();
        cfg.set("select.per_arm", &per_arm.to_string()).unwrap();
        cfg.set("select.k", &k.to_string()).unwrap();
        cfg.set("select.seed", &seed.to_string()).unwrap();
        cfg.set("track.backward_refine", &refine.to_string()).unwrap();
        cfg.set("track.motion_weight", &motion_weight.to_string()).unwrap();
        cfg.set("segment.tau", &tau.to_string()).unwrap();
        cfg.set("recog.enabled", &recog.to_string()).unwrap();
        cfg.set("recog.strategy", patch.as_str()).unwrap();
        cfg.set("recog.prompt", &format!("P{prompt}")).unwrap();
        cfg.set("pipeline.workers", &workers.to_string()).unwrap();
        if external {
            cfg.set("segment.backend", "external:http://127.0.0.1:9/seg").unwrap();
            prop_assert_eq!(&cfg.segment_backend, &BackendSpec::External("http://127.0.0.1:9/seg".into()));
        }
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn plate_parsing_is_idempotent(
        letters in "[A-Za-z]{3}",
        digits in "[0-9]{4}",
        sep in prop::sample::select(vec!["", "-", " "]),
        prefix in "[a-z ,.]{0,20}",
        suffix in "[a-z ,.]{0,20}",
    ) {
        let pattern = PlatePattern::default();
        let caption = format!("{prefix} {letters}{sep}{digits} {suffix}");
        let plate = recognize::parse_plate(&caption, &pattern).unwrap();
        prop_assert_eq!(&plate, &format!("{}{}", letters.to_uppercase(), digits));
        prop_assert_eq!(recognize::parse_plate(&plate, &pattern).unwrap(), plate);
    }

    #[test]
    fn stricter_char_threshold_never_scores_higher(
        pairs in proptest::collection::vec(("[A-C0-2]{7}", proptest::option::of("[A-C0-2]{5,8}")), 1..20)
    ) {
        let view = || pairs.iter().map(|(gt, p)| (p.as_deref(), gt.as_str()));
        let mut prev = f64::INFINITY;
        for min_chars in 1..=8 {
            let acc = eval::recognition_accuracy(view(), min_chars);
            prop_assert!(acc <= prev + 1e-12);
            prev = acc;
        }
    }

    #[test]
    fn ap_is_a_probability(hits in proptest::collection::vec(any::<bool>(), 0..40), extra_gt in 0usize..10) {
        let num_gt = hits.iter().filter(|h| **h).count() + extra_gt;
        prop_assume!(num_gt > 0);
        let ranked: Vec<(f64, bool)> = hits.iter().enumerate().map(|(i, &h)| (1.0 - i as f64 * 1e-3, h)).collect();
        for method in [ApMethod::AllPoint, ApMethod::ElevenPoint] {
            let ap = eval::ap_from_ranked(&ranked, num_gt, method).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }
    }

    #[test]
    fn kmedoids_admits_no_improving_swap(
        raw in proptest::collection::btree_set((0u32..40, 0u32..40), 2..60),
        k in 1usize..5,
    ) {
        let pts: Vec<Point> = raw.into_iter().map(|(x, y)| Point::new(x as f64, y as f64)).collect();
        prop_assume!(k <= pts.len());
        let medoids = select::kmedoids(&pts, k, Exec::Sequential);
        let distinct: BTreeSet<usize> = medoids.iter().copied().collect();
        prop_assert_eq!(distinct.len(), k);
        let cost = select::medoid_cost(&pts, &medoids);
        for slot in 0..k {
            for o in (0..pts.len()).filter(|o| !distinct.contains(o)) {
                let mut swapped = medoids.clone();
                swapped[slot] = o;
                prop_assert!(select::medoid_cost(&pts, &swapped) >= cost - 1e-9);
            }
        }
    }

    #[test]
    fn crosshairs_stay_in_frame(
        w in 40usize..200, h in 40usize..200,
        fx in 0.0f64..1.0, fy in 0.0f64..1.0,
        per_arm in 1usize..4, offset in 1.0f64..6.0,
    ) {
        let q = QueryAnnotation::new(1, fx * (w - 1) as f64, fy * (h - 1) as f64);
        let set = select::select_crosshairs(&q, offset, per_arm, (w, h)).unwrap();
        prop_assert_eq!(set.strategy, SelectStrategy::Crosshairs);
        prop_assert_eq!(set.points.len(), 1 + 4 * per_arm);
        prop_assert_eq!(set.points[0], q.point());
        for p in &set.points {
            prop_assert!(p.in_bounds(w, h));
        }
    }

    #[test]
    fn random_points_are_distinct_mask_pixels(mask in mask_strategy(), k in 1usize..10, seed in any::<u64>()) {
        let (x, y) = mask.pixels()[0];
        let q = QueryAnnotation::new(0, x as f64, y as f64);
        match select::select_random(&q, &mask, k, seed) {
            Ok(set) => {
                prop_assert_eq!(set.points.len(), k);
                prop_assert_eq!(set.points[0], q.point());
                let keys: BTreeSet<(u64, u64)> = set.points.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
                prop_assert_eq!(keys.len(), k);
                for p in &set.points {
                    prop_assert!(mask.contains_point(*p));
                }
                let again = select::select_random(&q, &mask, k, seed).unwrap();
                prop_assert_eq!(again.points, set.points);
            }
            Err(_) => prop_assert!(mask.area() < k),
        }
    }

    #[test]
    fn patches_are_always_full_size(
        fw in 64usize..400, fh in 64usize..300,
        fx in 0.0f64..0.9, fy in 0.0f64..0.9, fbw in 0.02f64..1.0, fbh in 0.02f64..1.0,
    ) {
        let (fw_f, fh_f) = (fw as f64, fh as f64);
        let x0 = fx * fw_f;
        let y0 = fy * fh_f;
        let bbox = BBox::new(x0, y0, (x0 + fbw * fw_f).min(fw_f).max(x0 + 1.0), (y0 + fbh * fh_f).min(fh_f).max(y0 + 1.0));
        let frame = Frame::new(0, RgbImage::filled(fw, fh, [90, 90, 90]));
        let det = Detection { frame_index: 0, instance_id: 0, bbox, confidence: 1.0, mask: None };
        for strategy in PatchStrategy::ALL {
            let patch = recognize::extract_patch(&frame, &det, strategy).unwrap();
            prop_assert_eq!((patch.pixels().width(), patch.pixels().height()), (PATCH_SIZE, PATCH_SIZE));
            prop_assert_eq!(patch.strategy, strategy);
            prop_assert!(patch.scale.0 > 0.0 && patch.scale.1 > 0.0);
        }
    }

    #[test]
    fn ncc_recovers_integer_shifts(dx in -6i64..=6, dy in -6i64..=6, seed in any::<u64>()) {
        let (w, h) = (64usize, 64usize);
        let base = noise_image(w + 20, h + 20, seed);
        let prev = Frame::new(0, base.crop(10, 10, w, h));
        let next = Frame::new(1, base.crop(10 - dx, 10 - dy, w, h));
        let start = Point::new(32.0, 32.0);
        let (p, score) = track::ncc_track_point(&prev, &next, start, 7, 10).unwrap();
        prop_assert!((p.x - (32.0 + dx as f64)).abs() < 1e-9 && (p.y - (32.0 + dy as f64)).abs() < 1e-9, "{p:?}");
        prop_assert!(score > 0.999);
    }

    #[test]
    fn sequence_vote_picks_a_majority_plate(votes in proptest::collection::vec(prop::sample::select(vec!["AAA1111", "BBB2222", "CCC3333"]), 1..15)) {
        let results: Vec<RecognitionResult> = votes
            .iter()
            .enumerate()
            .map(|(i, p)| RecognitionResult {
                frame_index: i,
                instance_id: 4,
                caption: String::new(),
                plate: Some(p.to_string()),
                prompt_id: PromptId::P6,
                confidence: 0.5,
            })
            .collect();
        let winner = recognize::recognize_sequence(&results, 4).unwrap();
        let count = |s: &str| votes.iter().filter(|v| **v == s).count();
        let top = ["AAA1111", "BBB2222", "CCC3333"].iter().map(|s| count(s)).max().unwrap();
        prop_assert_eq!(count(&winner), top);
        // equal confidences: ties resolve to the smallest string
        let first_top = ["AAA1111", "BBB2222", "CCC3333"].into_iter().find(|s| count(s) == top).unwrap();
        prop_assert_eq!(winner, first_top);
    }
}
