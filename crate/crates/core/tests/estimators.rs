mod common;

use bncodec::structure::inter::{gumbel_softmax, sample_inter, InterStructureParams};
use bncodec::EdgeId;
use candle_core::{Device, Tensor};
use common::{enumerated_bound_gradient, softmax, vimco_gradient};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hard_gumbel_frequencies_follow_the_softmax() {
    let logits = [0.4f32, -1.2, 1.5, 0.0, -0.3];
    let q = softmax(&logits.map(|l| l as f64));
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Tensor::from_vec(logits.repeat(n), (n, logits.len()), &Device::Cpu).unwrap();
    let hard: Vec<Vec<f32>> = gumbel_softmax(&batch, 0.5, true, &mut rng).unwrap().to_vec2().unwrap();
    let mut counts = [0usize; 5];
    for row in &hard {
        assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        counts[row.iter().position(|&v| v == 1.0).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip(&q) {
        assert!((*c as f64 / n as f64 - p).abs() <= 0.02, "{counts:?} vs {q:?}");
    }

    let mut params = InterStructureParams::uniform(5, 0.7);
    params.logits.insert(EdgeId::Synthesis, logits.map(|l| l as f64).to_vec());
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_inter(&params, EdgeId::Synthesis, true, &mut rng).unwrap().index] += 1;
    }
    for (c, p) in counts.iter().zip(&q) {
        assert!((*c as f64 / n as f64 - p).abs() <= 0.02, "{counts:?} vs {q:?}");
    }
}

#[test]
fn vimco_is_unbiased_on_a_discrete_toy() {
    let theta = [0.2, -0.6, 0.5];
    let f = [0.3, 1.0, 2.5];
    let exact = enumerated_bound_gradient(&theta, &f, 4);
    let estimate = vimco_gradient(&theta, &f, 4, 50_000, 17);
    let norm = exact.iter().map(|g| g * g).sum::<f64>().sqrt();
    let err = exact.iter().zip(&estimate).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err <= 0.05 * norm, "exact {exact:?} estimate {estimate:?}");
}
