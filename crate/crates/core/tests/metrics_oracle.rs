mod common;

use atsg_core::metrics::{dsc, evaluate, surface_distance_stats, SegmentationMask};
use atsg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_metrics, brute_surface, random_mask};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn fast_metrics_equal_the_pairwise_oracle_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut defined = 0;
    for case in 0..100 {
        let shape = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
        let spacing = if case % 3 == 0 {
            [1.0; 3]
        } else {
            [rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)]
        };
        let a = random_mask(&mut rng, shape, spacing, 2);
        let b = random_mask(&mut rng, shape, spacing, 2);
        let (d, surf) = brute_metrics(&a, &b, 1);
        assert!(close(dsc(&a, &b, 1).unwrap(), d), "case {case}: dsc");
        match (surface_distance_stats(&a, &b, 1), surf) {
            (Ok((h, s)), Some((ho, so))) => {
                defined += 1;
                assert!(close(h, ho), "case {case}: hd95 {h} vs {ho}");
                assert!(close(s, so), "case {case}: assd {s} vs {so}");
            }
            (Err(Error::UndefinedMetric(_)), None) => {}
            (got, want) => panic!("case {case}: {got:?} vs {want:?}"),
        }
    }
    assert!(defined >= 80, "only {defined} cases exercised surface distances");
}

#[test]
fn single_voxels_three_apart_give_three_and_three() {
    let mut a = SegmentationMask::empty([8, 3, 3], [1.0; 3]);
    let mut b = a.clone();
    let i = a.index(1, 1, 1);
    a.labels[i] = 1;
    let j = b.index(4, 1, 1);
    b.labels[j] = 1;
    assert_eq!(surface_distance_stats(&a, &b, 1).unwrap(), (3.0, 3.0));
    assert_eq!(evaluate(&a, &b, 1).unwrap().dsc, 0.0);
}

#[test]
fn offset_cubes_match_the_oracle() {
    let cube = |off: usize| {
        let mut m = SegmentationMask::empty([10, 10, 10], [1.0; 3]);
        for x in off..off + 4 {
            for y in 2..6 {
                for z in 2..6 {
                    let i = m.index(x, y, z);
                    m.labels[i] = 1;
                }
            }
        }
        m
    };
    let (a, b) = (cube(1), cube(3));
    let (d, surf) = brute_metrics(&a, &b, 1);
    let (ho, so) = surf.unwrap();
    let r = evaluate(&a, &b, 1).unwrap();
    assert!(close(r.dsc, d) && close(r.hd95_mm, ho) && close(r.assd_mm, so));
    // Half the cubes overlap.
    assert_eq!(r.dsc, 0.5);
    assert_eq!(brute_surface(&a, 1).len(), 56);
}

fn mask_pair() -> impl Strategy<Value = (SegmentationMask, SegmentationMask)> {
    (1usize..8, 1usize..8, 1usize..8, any::<u64>()).prop_map(|(x, y, z, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spacing = [rng.random_range(0.5..2.0), 1.0, rng.random_range(0.5..2.0)];
        (random_mask(&mut rng, [x, y, z], spacing, 3), random_mask(&mut rng, [x, y, z], spacing, 3))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_bounded((a, b) in mask_pair(), class in 1u8..3) {
        let d = dsc(&a, &b, class).unwrap();
        prop_assert_eq!(d, dsc(&b, &a, class).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dsc(&a, &a, class).unwrap(), 1.0);
        if let Ok((h, s)) = surface_distance_stats(&a, &b, class) {
            let (h2, s2) = surface_distance_stats(&b, &a, class).unwrap();
            prop_assert!(close(h, h2) && close(s, s2));
            prop_assert!(h >= 0.0 && s >= 0.0);
            prop_assert_eq!(surface_distance_stats(&a, &a, class).unwrap(), (0.0, 0.0));
            // Zero distance only when the surfaces coincide.
            let same = brute_surface(&a, class) == brute_surface(&b, class);
            prop_assert_eq!(s == 0.0, same);
        }
    }

    #[test]
    fn distance_transform_matches_brute_force((a, b) in mask_pair()) {
        let (_, surf) = brute_metrics(&a, &b, 1);
        if let Some((ho, so)) = surf {
            let (h, s) = surface_distance_stats(&a, &b, 1).unwrap();
            prop_assert!(close(h, ho), "hd95 {} vs {}", h, ho);
            prop_assert!(close(s, so), "assd {} vs {}", s, so);
        }
    }
}
