use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cefa::alignment::build_graph;
use cefa::boxes::{iou, BBox};
use cefa::config::{DataConfig, EvalMode, GraphVariant, SceneConfig};
use cefa::context::{mask_count, MaskPlan};
use cefa::data::{build_longtail_dataset, random_shift, Domain, HoiAnnotation};
use cefa::detector::Triplet;
use cefa::eval::{compute_map, CategorySplit};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.2f32..0.8, 0.2f32..0.8, 0.05f32..0.35, 0.05f32..0.35).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn small_scene() -> SceneConfig {
    SceneConfig {
        image_size: 32,
        ..SceneConfig::default()
    }
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        // corners are recomputed in f32, so self-overlap is 1 up to rounding
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn mask_plan_hides_rounded_share(rows in 1usize..14, cols in 1usize..14, sigma in 0.05f32..0.95, seed: u64) {
        let plan = MaskPlan::new(rows, cols, sigma, seed).unwrap();
        let n = rows * cols;
        prop_assert_eq!(plan.masked_count(), mask_count(sigma, n));
        prop_assert_eq!(mask_count(sigma, n), (sigma as f64 * n as f64 + 0.5).floor() as usize);
    }

    #[test]
    fn bidirectional_edge_count(n in 2usize..20, k_seed: usize) {
        let k = 1 + k_seed % (n - 1);
        let protos: Vec<usize> = (0..k).collect();
        let a = build_graph(n, &protos, GraphVariant::Bidirectional).unwrap();
        let edges = a.iter().filter(|&&v| v != 0.0).count();
        prop_assert_eq!(edges, 2 * k * (n - k) + k * (k - 1));
        prop_assert_eq!(&a, &a.t());
    }

    #[test]
    fn shift_keeps_boxes_inside(seed: u64, h in bbox(), o in bbox()) {
        let ann = HoiAnnotation { human_box: h, object_box: o, object_class: 0, verb_class: 0 };
        let image = cefa::data::Image::zeros((32, 32, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, moved) = random_shift(&image, &[ann], &mut rng);
        for b in [moved[0].human_box, moved[0].object_box] {
            prop_assert!(b.invalid_field().is_none(), "{:?}", b);
        }
        prop_assert!((moved[0].human_box.w - h.w).abs() < 1e-6);
    }

    #[test]
    fn ap_is_bounded_and_order_free(
        scores in prop::collection::vec(0.0f32..1.0, 1..8),
        hits in prop::collection::vec(any::<bool>(), 8),
    ) {
        let gt = HoiAnnotation {
            human_box: BBox::new(0.3, 0.5, 0.2, 0.4),
            object_box: BBox::new(0.7, 0.5, 0.2, 0.2),
            object_class: 0,
            verb_class: 0,
        };
        let dets: Vec<Triplet> = scores
            .iter()
            .zip(&hits)
            .map(|(&score, &hit)| Triplet {
                human_box: if hit { gt.human_box } else { BBox::new(0.6, 0.2, 0.1, 0.1) },
                object_box: gt.object_box,
                object_class: 0,
                verb_class: 0,
                score,
            })
            .collect();
        let split = CategorySplit { num_objects: 1, rare: vec![false], mode: EvalMode::Hoi };
        let gts = vec![vec![gt], vec![gt]];
        let mut reversed = dets.clone();
        reversed.reverse();
        let a = compute_map(&[dets, vec![]], &gts, &split, 0.5).unwrap();
        let b = compute_map(&[reversed, vec![]], &gts, &split, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.map_full));
        prop_assert!(a.map_full <= 0.5 + 1e-12);
        prop_assert_eq!(a.map_full, b.map_full);
    }
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn rare_partition_and_count_accounting(classes in 4usize..12, tail in 1usize..3, seed in 0u64..1000) {
        let cfg = DataConfig {
            classes,
            rare_threshold: 4,
            tail_classes: tail,
            tail_count: 2,
            head_max: 8,
            zipf_exponent: 0.6,
            test_per_class: 1,
            per_rare: 0,
            seed,
        };
        let ds = build_longtail_dataset(&small_scene(), &cfg).unwrap();
        let m = &ds.manifest;
        let rare = m.rare_categories();
        let non = m.nonrare_categories();
        prop_assert_eq!(rare.len() + non.len(), m.num_categories);
        prop_assert!(rare.iter().all(|c| !non.contains(c)));
        prop_assert_eq!(rare.len(), tail);
        let train_anns: usize = ds
            .train_original()
            .iter()
            .map(|&i| m.samples[i].annotations.len())
            .sum();
        prop_assert_eq!(m.category_counts.values().sum::<usize>(), train_anns);
        prop_assert!(ds.train_original().iter().all(|&i| m.samples[i].domain == Domain::Original));
    }
}
