mod common;

use bncodec::complexity::conv_macs;
use bncodec::nn::{conv2d, count_macs};
use bncodec::structure::intra::{dynamic_masked_conv, DynamicKernel, MaskRule};
use common::{counting_conv, max_abs_diff, random_field, random_tiled_field, sequential_masked_conv, vector, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_against_sequential(seed: u64, groups: usize, aux: usize, k: usize, (h, w): (usize, usize), stages: usize, rule: MaskRule, tiled: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_grouped, o) = (2 * groups, 3 * groups);
    let x = Array4::random([2, aux + c_grouped, h, w], &mut rng);
    let weight = Array4::random([o, aux + c_grouped, k, k], &mut rng);
    let bias = Array4::random([1, 1, 1, o], &mut rng).data;
    let topo = if tiled { random_tiled_field(stages, groups, h, w, &mut rng) } else { random_field(stages, groups, h, w, &mut rng) };

    let kernel = DynamicKernel::new(weight.tensor(), vector(&bias), groups, aux).unwrap();
    let fast = dynamic_masked_conv(&x.tensor(), &topo, &kernel, aux, rule).unwrap();
    let fast = Array4::from_tensor(&fast);
    let slow = sequential_masked_conv(&x, &weight, &bias, &topo, aux, rule);
    max_abs_diff(&fast.data, &slow.data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn one_pass_matches_stage_by_stage_decoding(
        seed in any::<u64>(),
        groups in prop::sample::select(vec![1usize, 2, 4]),
        aux in 0usize..3,
        k in prop::sample::select(vec![1usize, 3, 5]),
        h in 1usize..7,
        w in 1usize..7,
        stages in 1usize..5,
        strict in any::<bool>(),
        tiled in any::<bool>(),
    ) {
        let rule = if strict { MaskRule::Strict } else { MaskRule::Inclusive };
        let err = check_against_sequential(seed, groups, aux, k, (h, w), stages, rule, tiled);
        prop_assert!(err <= 1e-5, "max deviation {err}");
    }

    #[test]
    fn analytic_macs_match_counted_multiplies(
        seed in any::<u64>(),
        c_in in 1usize..6,
        c_out in 1usize..6,
        k in prop::sample::select(vec![1usize, 3, 5]),
        h in 1usize..9,
        w in 1usize..9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array4::random([1, c_in, h, w], &mut rng);
        let weight = Array4::random([c_out, c_in, k, k], &mut rng);
        let (reference, multiplies) = counting_conv(&x, &weight, &vec![0.0; c_out]);
        prop_assert_eq!(conv_macs(h, w, c_out, c_in, k), multiplies);

        let (out, counted) = count_macs(|| conv2d(&x.tensor(), &weight.tensor(), None, 1).unwrap());
        prop_assert_eq!(counted, multiplies);
        prop_assert!(max_abs_diff(&Array4::from_tensor(&out).data, &reference.data) <= 1e-4);
    }
}

#[test]
fn masking_does_not_change_the_counted_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (groups, h, w, k) = (4, 6, 5, 5);
    let x = Array4::random([1, 8, h, w], &mut rng);
    let weight = Array4::random([8, 8, k, k], &mut rng);
    let kernel = DynamicKernel::new(weight.tensor(), vector(&[0.0; 8]), groups, 0).unwrap();
    let (_, dense) = count_macs(|| conv2d(&x.tensor(), &weight.tensor(), None, 1).unwrap());
    for stages in [1, 2, 4] {
        let topo = random_field(stages, groups, h, w, &mut rng);
        let (_, masked) = count_macs(|| dynamic_masked_conv(&x.tensor(), &topo, &kernel, 0, MaskRule::Strict).unwrap());
        assert_eq!(masked, dense);
    }
    assert_eq!(dense, conv_macs(h, w, 8, 8, k));
}

#[test]
fn single_stage_strict_sees_only_the_auxiliary_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let topo = random_field(1, 2, 4, 4, &mut rng);
    let x = Array4::random([1, 3 + 4, 4, 4], &mut rng);
    let mut zeroed = x.clone();
    for c in 3..7 {
        for y in 0..4 {
            for xx in 0..4 {
                zeroed.set(0, c, y, xx, 0.0);
            }
        }
    }
    let weight = Array4::random([4, 7, 3, 3], &mut rng);
    let bias = vec![0.0; 4];
    let a = sequential_masked_conv(&x, &weight, &bias, &topo, 3, MaskRule::Strict);
    let (b, _) = counting_conv(&zeroed, &weight, &bias);
    assert!(max_abs_diff(&a.data, &b.data) < 1e-12);
}
