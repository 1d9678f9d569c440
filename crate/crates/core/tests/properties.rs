use proptest::prelude::*;

use mitodet::data::{label_foreground, remap_annotations, split_leave_one_tumor_out, Annotation, CaseRecord, Species};
use mitodet::geometry::{self, decode, encode, iou, nms, BBox};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip(gt in bbox(), anchor in bbox()) {
        let back = decode(&encode(&gt, &anchor).unwrap(), &anchor).unwrap();
        for (x, y) in back.to_array().iter().zip(gt.to_array()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn nms_is_idempotent(items in prop::collection::vec((bbox(), 0.0..1.0f64), 0..30), thr in 0.1..0.9f64) {
        let kept: Vec<(BBox, f64)> = nms(&items, thr).into_iter().map(|i| items[i]).collect();
        let again = nms(&kept, thr);
        prop_assert_eq!(again, (0..kept.len()).collect::<Vec<_>>());
    }

    #[test]
    fn translation_preserves_iou(a in bbox(), b in bbox(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy));
        prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn remapping_inside_window_preserves_iou(a in bbox(), b in bbox(), x0 in 0.0..40.0f64, y0 in 0.0..40.0f64) {
        let anns = [Annotation::mitosis(a), Annotation::mitosis(b)];
        let out = remap_annotations(&anns, -x0, -y0, 400.0, 400.0);
        prop_assert_eq!(out.len(), 2);
        prop_assert!((iou(&out[0].bbox, &out[1].bbox) - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn foreground_is_non_emptiness(n in 0usize..4) {
        let anns: Vec<Annotation> = (0..n).map(|i| Annotation::hard_negative(BBox::new(i as f64, 0.0, i as f64 + 5.0, 5.0).unwrap())).collect();
        prop_assert_eq!(label_foreground(&anns), n > 0);
    }

    #[test]
    fn anchor_count_matches_closed_form(w in 8usize..300, h in 8usize..300) {
        let cfg = geometry::AnchorConfig::default();
        let set = geometry::generate_anchors(w, h, &cfg).unwrap();
        let expected: usize = cfg.levels.iter()
            .map(|l| geometry::grid_len(w, l.stride) * geometry::grid_len(h, l.stride) * l.anchors_per_cell())
            .sum();
        prop_assert_eq!(set.len(), expected);
    }

    #[test]
    fn leave_one_out_is_an_order_invariant_partition(types in prop::collection::vec(0usize..3, 1..20), rot in 0usize..20) {
        let names = ["a", "b", "c"];
        let records: Vec<CaseRecord> = types.iter().enumerate().map(|(i, &t)| CaseRecord {
            case_id: format!("c{i}"),
            image: format!("{i}.png").into(),
            tumor_type: names[t].to_string(),
            species: Species::Human,
            scanner: None,
            annotations: Vec::new(),
        }).collect();
        let held = names[types[0]];
        if types.iter().all(|&t| t == types[0]) {
            prop_assert!(split_leave_one_tumor_out(&records, held).is_err());
            return Ok(());
        }
        let (train, test) = split_leave_one_tumor_out(&records, held).unwrap();
        prop_assert_eq!(train.len() + test.len(), records.len());
        prop_assert!(test.iter().all(|r| r.tumor_type == held));
        prop_assert!(train.iter().all(|r| r.tumor_type != held));

        let mut rotated = records.clone();
        rotated.rotate_left(rot % records.len());
        let (train2, test2) = split_leave_one_tumor_out(&rotated, held).unwrap();
        let ids = |v: &[CaseRecord]| { let mut s: Vec<String> = v.iter().map(|r| r.case_id.clone()).collect(); s.sort(); s };
        prop_assert_eq!(ids(&train), ids(&train2));
        prop_assert_eq!(ids(&test), ids(&test2));
    }
}
