use bncodec::coder::{CdfTable, EntropyCoder, RansCoder};
use bncodec::entropy::gaussian_table;
use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tables: Vec<CdfTable> = (0..64).map(|i| gaussian_table(0.0, 0.2 + i as f64 * 0.1).unwrap()).collect();
    let n = 100_000;
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..tables.len())).collect();
    let refs: Vec<&CdfTable> = picks.iter().map(|&t| &tables[t]).collect();
    let symbols: Vec<usize> = (0..n).map(|_| (64 + rng.random_range(-3i32..=3)) as usize).collect();
    let coder = RansCoder;
    let buf = coder.encode(&symbols, &refs).unwrap();

    let mut group = c.benchmark_group("rans");
    group.throughput(Throughput::Elements(n as u64));
    group.bench_function("encode", |b| b.iter(|| coder.encode(&symbols, &refs).unwrap()));
    group.bench_function("decode", |b| b.iter(|| coder.decode(&buf, &refs).unwrap()));
    group.finish();
}

criterion_group!(benches, rans);
criterion_main!(benches);
