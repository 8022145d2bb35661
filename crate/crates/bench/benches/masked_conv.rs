use bncodec::structure::intra::{masked_conv, DynamicKernel, MaskRule, MaskSet, TopologyField};
use bncodec_bench::uniform;
use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn context_conv(c: &mut Criterion) {
    let (m, size, k) = (32, 16, 5);
    let x = uniform(&[1, m, size, size], 1);
    let mut group = c.benchmark_group("context_conv");
    for groups in [1usize, 4, 8] {
        let kernel = DynamicKernel::new(uniform(&[2 * m, m, k, k], 2), Tensor::zeros(2 * m, DType::F32, &Device::Cpu).unwrap(), groups, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let topo = TopologyField::random(4, groups, size, size, &mut rng).unwrap();
        let periodic = MaskSet::new(&topo, k, 0, m, MaskRule::Strict, &Device::Cpu).unwrap();
        let dense = MaskSet::dense(&topo, k, 0, m, MaskRule::Strict, &Device::Cpu).unwrap();
        group.bench_with_input(BenchmarkId::new("periodic", groups), &periodic, |b, masks| b.iter(|| masked_conv(&x, masks, &kernel).unwrap()));
        group.bench_with_input(BenchmarkId::new("dense", groups), &dense, |b, masks| b.iter(|| masked_conv(&x, masks, &kernel).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, context_conv);
criterion_main!(benches);
