use capsnet::capsule::{dynamic_routing, squash_values};
use capsnet::data::{read_volume, write_volume, Volume};
use capsnet::harness::TrainConfig;
use capsnet::metrics::seg_metrics;
use capsnet::tensor::Tensor;
use proptest::prelude::*;

fn votes() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(n, j, d)| {
        (Just(n), Just(j), Just(d), prop::collection::vec(-10.0f64..10.0, n * j * d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn couplings_stay_on_the_simplex((n, j, d, v) in votes(), iters in 1usize..6) {
        let out = dynamic_routing(&Tensor::from_vec(&[n, j, d], v).unwrap(), iters, None).unwrap();
        for c in &out.trace.couplings {
            for row in c.chunks(j) {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for p in out.parents.data().chunks(d) {
            prop_assert!(p.iter().map(|x| x * x).sum::<f64>() < 1.0);
        }
    }

    #[test]
    fn squash_shrinks_along_the_input_direction(s in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let v = squash_values(&Tensor::from_vec(&[s.len()], s.clone()).unwrap());
        let sn = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(vn < 1.0);
        prop_assert!((vn - sn * sn / (1.0 + sn * sn)).abs() < 1e-12);
        if sn > 1e-6 {
            for (a, b) in v.data().iter().zip(&s) {
                prop_assert!((a / vn - b / sn).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200)
    ) {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let ab = seg_metrics(&a, &b, 3).unwrap();
        let ba = seg_metrics(&b, &a, 3).unwrap();
        for (x, y) in ab.per_class.iter().zip(&ba.per_class) {
            prop_assert!((0.0..=1.0).contains(&x.dice));
            prop_assert_eq!(x.dice, y.dice);
            prop_assert_eq!(x.precision, y.recall);
        }
        prop_assert_eq!(seg_metrics(&a, &a, 3).unwrap().mean_dice, 1.0);
    }

    #[test]
    fn volumes_round_trip(
        shape in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64)) % 1000) as f32 / 7.0).collect();
        let labels: Vec<u8> = (0..n).map(|i| ((seed as usize + i) % 5) as u8).collect();
        for vol in [Volume::F32 { shape: shape.clone(), data }, Volume::U8 { shape: shape.clone(), data: labels }] {
            let bytes = write_volume(&vol);
            prop_assert_eq!(read_volume(&bytes).unwrap(), vol);
        }
    }

    #[test]
    fn config_render_round_trips(
        seed in any::<u64>(),
        lr in 1e-8f64..1.0,
        iters in 0u64..100_000,
        routing in 1usize..6,
        decay in 0.01f64..0.99,
    ) {
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.learning_rate = lr;
        cfg.max_iterations = iters;
        cfg.routing_iters = routing;
        cfg.lr_decay = decay;
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.render()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
