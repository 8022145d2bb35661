use bncodec::codec::Codec;
use bncodec::{ControllerState, Model, ModelConfig, Task};
use bncodec_bench::test_image;
use candle_core::Device;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn codec(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), &Device::Cpu).unwrap();
    let codec = Codec::new(&model);
    let x = test_image(128);
    let mut group = c.benchmark_group("codec_128px");
    group.sample_size(10);
    for level in [0usize, 7] {
        let controller = ControllerState::new(level, Task::Psnr, 0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bytes = codec.compress_bytes(&x, &controller, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::new("compress", level), &controller, |b, ctl| {
            b.iter(|| codec.compress_bytes(&x, ctl, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("decompress", level), &bytes, |b, bytes| b.iter(|| codec.decompress_bytes(bytes).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
