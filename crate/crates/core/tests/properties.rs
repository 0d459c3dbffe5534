use image::{Rgb, RgbImage};
use proptest::prelude::*;

use pathagent::eval_harness::{balanced_accuracy, pass_at_k, pass_at_k_exact};
use pathagent::nav_dsl::{
    extract_answer, parse_nav_plan, parse_reasoning_result, parse_region_selection, serialize_nav_plan, NavAction,
    NavPlan, NavStep,
};
use pathagent::region_tiler::{plan_regions, DEFAULT_OVERLAP, DEFAULT_REGION_SIZE};
use pathagent::slide_model::{crop_viewport, viewport_window, RegionImage, Viewport};

fn valid_plan() -> impl Strategy<Value = NavPlan> {
    let step = (0u8..3, 0u32..=1000, 0u32..=1000, 1u32..=300, "[ -~]{0,12}");
    prop::collection::vec(step, 0..15).prop_map(|raw| {
        let mut steps = vec![NavStep {
            action: NavAction::Overview,
            viewport: Viewport::new(0.5, 0.5, 1.0),
            rationale: "start".into(),
        }];
        let mut m_hund = 100u32;
        for (kind, cx, cy, dm, rationale) in raw {
            let prev = steps.last().unwrap().viewport;
            let (action, m) = match kind {
                0 => (NavAction::ZoomIn, m_hund + dm),
                1 if m_hund > 100 => (NavAction::ZoomOut, m_hund - 1 - (dm % (m_hund - 100))),
                _ => (NavAction::Move, m_hund),
            };
            let mut center = (cx as f64 / 1000.0, cy as f64 / 1000.0);
            if action == NavAction::Move && center == prev.center {
                center.0 = if cx == 0 { 0.001 } else { 0.0 };
            }
            m_hund = m;
            steps.push(NavStep {
                action,
                viewport: Viewport::new(center.0, center.1, m as f64 / 100.0),
                rationale,
            });
        }
        NavPlan::new(steps)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn viewport_window_geometry(cx in -2.0f64..3.0, cy in -2.0f64..3.0, m in 1.0f64..64.0) {
        let w = viewport_window(Viewport::new(cx, cy, m)).unwrap();
        let side = 1.0 / m;
        prop_assert!((w.x1 - w.x0 - side).abs() < 1e-12);
        prop_assert!((w.y1 - w.y0 - side).abs() < 1e-12);
        prop_assert!(w.x0 >= 0.0 && w.y0 >= 0.0 && w.x1 <= 1.0 && w.y1 <= 1.0);
    }

    #[test]
    fn crop_stays_inside_region(w in 1u32..300, h in 1u32..300, cx in -1.0f64..2.0, cy in -1.0f64..2.0, m in 1.0f64..8.0) {
        let region = RegionImage::new(0, "s", (0, 0), RgbImage::new(w, h));
        let v = crop_viewport(&region, Viewport::new(cx, cy, m), 16).unwrap();
        let r = v.provenance;
        prop_assert!(r.w >= 1 && r.h >= 1 && r.x + r.w <= w && r.y + r.h <= h);
        prop_assert_eq!(v.pixels.dimensions(), (16, 16));
    }

    #[test]
    fn plan_round_trip(plan in valid_plan()) {
        plan.validate().unwrap();
        let text = serialize_nav_plan(&plan);
        let back = parse_nav_plan(&text).unwrap();
        prop_assert_eq!(&back, &plan);
        prop_assert_eq!(serialize_nav_plan(&back), text);
    }

    #[test]
    fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_nav_plan(&text);
        let _ = parse_region_selection(&text);
        let _ = parse_reasoning_result(&text, 3, Some(4));
        let _ = extract_answer(&text, &["a", "b", "c", "d"]);
    }

    #[test]
    fn tiling_covers_slide(w in 1u32..60_000, h in 1u32..60_000) {
        let plan = plan_regions("s", w, h, DEFAULT_REGION_SIZE, DEFAULT_OVERLAP).unwrap();
        let mut xs: Vec<(u32, u32)> = plan.specs.iter().map(|s| (s.x, s.w)).collect();
        xs.sort();
        xs.dedup();
        prop_assert_eq!(xs[0].0, 0);
        let last = xs.last().unwrap();
        prop_assert_eq!(last.0 + last.1, w);
        for pair in xs.windows(2) {
            // neighbours overlap by at least the nominal band
            prop_assert!(pair[0].0 + pair[0].1 >= pair[1].0 + 800);
        }
    }

    #[test]
    fn pass_at_k_monotone(n in 1u64..30, c in 0u64..30, k in 1u64..30) {
        prop_assume!(c <= n && k <= n);
        let p = pass_at_k_exact(n, c, k).unwrap();
        if k < n {
            prop_assert!(pass_at_k_exact(n, c, k + 1).unwrap() >= p);
        }
        if c < n {
            prop_assert!(pass_at_k_exact(n, c + 1, k).unwrap() >= p);
        }
        let f = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let full = pass_at_k(n, c, n).unwrap();
        prop_assert_eq!(full == 1.0, c >= 1);
    }

    #[test]
    fn balanced_accuracy_duplication_invariant(
        pairs in prop::collection::vec((0usize..3, 0usize..4), 1..40),
        dup_class in 0usize..3,
    ) {
        let labels = ["a", "b", "c"];
        let name = |i: usize| if i < 3 { labels[i] } else { "other" };
        let gold: Vec<&str> = pairs.iter().map(|p| name(p.0)).collect();
        let pred: Vec<&str> = pairs.iter().map(|p| name(p.1)).collect();
        let base = balanced_accuracy(&pred, &gold, &labels).unwrap().value;
        let (mut g2, mut p2) = (gold.clone(), pred.clone());
        for (g, p) in gold.iter().zip(&pred) {
            if *g == labels[dup_class] {
                g2.push(g);
                p2.push(p);
            }
        }
        let dup = balanced_accuracy(&p2, &g2, &labels).unwrap().value;
        prop_assert!((base - dup).abs() < 1e-12);
    }
}

#[test]
fn full_window_at_unit_magnification() {
    let img = RgbImage::from_fn(40, 30, |x, y| Rgb([x as u8, y as u8, 0]));
    let region = RegionImage::new(0, "s", (0, 0), img);
    for c in [(0.0, 0.0), (0.5, 0.5), (1.0, 0.3)] {
        let v = crop_viewport(&region, Viewport::new(c.0, c.1, 1.0), 20).unwrap();
        assert_eq!(
            (v.provenance.x, v.provenance.y, v.provenance.w, v.provenance.h),
            (0, 0, 40, 30)
        );
    }
}
