mod common;

use bncodec::structure::intra::TopologyField;
use bncodec::{Model, ModelConfig};
use candle_core::{Device, Tensor};
use common::{audit_context, random_field};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inputs(seed: u64, m: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        use rand::Rng;
        (0..n).map(|_| rng.random_range(-3i32..=3) as f32).collect()
    };
    let hyper = Tensor::from_vec(noise(2 * m * h * w, &mut rng), (1, 2 * m, h, w), &Device::Cpu).unwrap();
    let y = Tensor::from_vec(noise(m * h * w, &mut rng), (1, m, h, w), &Device::Cpu).unwrap();
    (hyper, y)
}

fn small_model(stages: usize) -> Model {
    let config = ModelConfig { latent_channels: 8, merge_widths: vec![8, 16], widths: vec![4, 8], stages, ..Default::default() };
    Model::new(config, &Device::Cpu).unwrap()
}

#[test]
fn parameters_depend_only_on_earlier_partites() {
    let model = small_model(4);
    let (hyper, y) = inputs(1, 8, 5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fields = [
        TopologyField::from_tile(4, &[0, 1, 2, 3, 3, 2, 1, 0, 1, 0, 3, 2, 2, 3, 0, 1], 5, 6).unwrap(),
        random_field(4, 4, 5, 6, &mut rng),
        random_field(4, 4, 5, 6, &mut rng),
    ];
    for (i, topo) in fields.iter().enumerate() {
        for merge in 0..2 {
            let audit = audit_context(&model.context, topo, &hyper, &y, merge, 1e-6);
            assert!(audit.violations.is_empty(), "field {i}: {:?}", &audit.violations[..audit.violations.len().min(5)]);
            assert!(audit.live_pairs > 0);
        }
    }
}

#[test]
fn a_single_partite_sees_no_latents() {
    let model = small_model(2);
    let (hyper, y) = inputs(3, 8, 4, 4);
    let topo = TopologyField::zeros(2, 4, 4).unwrap();
    let audit = audit_context(&model.context, &topo, &hyper, &y, 1, 0.0);
    assert!(audit.violations.is_empty());
    assert_eq!(audit.live_pairs, 0);
}
