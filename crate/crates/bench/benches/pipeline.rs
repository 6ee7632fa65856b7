use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spedn::encoder::Crf;
use spedn::{assemble, execute, generate, parse_blocks, print_blocks, random_sequence, Fixture, Graph2Seq, ModelConfig, Tensor};

fn blocks(c: &mut Criterion) {
    let fx = Fixture::geo();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: Vec<_> = (0..64).map(|_| random_sequence(&fx.kg, &fx.ordinals, &mut rng, 6)).collect();
    let texts: Vec<String> = seqs.iter().map(|s| print_blocks(s)).collect();
    c.bench_function("parse_blocks x64", |b| {
        b.iter(|| texts.iter().map(|t| parse_blocks(black_box(t)).unwrap().len()).sum::<usize>())
    });
    c.bench_function("assemble+execute x64", |b| {
        b.iter(|| {
            seqs.iter()
                .filter(|s| assemble(s, &fx.kg).is_ok_and(|g| execute(&g, &fx.kg, &fx.ordinals).is_ok()))
                .count()
        })
    });
}

fn decoding(c: &mut Criterion) {
    let fx = Fixture::geo();
    let ex = generate(&fx, 2, 30);
    let data: Vec<_> = ex.iter().map(|e| (fx.context(&e.question), e.blocks.clone().unwrap())).collect();
    let cfg = ModelConfig {
        node_dim: 32,
        hidden: 64,
        ..ModelConfig::default()
    };
    let m = Graph2Seq::new(cfg, &fx.kg, &fx.ordinals, &data, 3).unwrap();
    let p = m.prepare(fx.context(&ex[0].question));
    c.bench_function("beam decode (5)", |b| b.iter(|| m.decode(black_box(&p), 5).unwrap().symbols.len()));
}

fn crf(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, l) = (20, 3);
    let em = Tensor::matrix(n, l, (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let tr = Tensor::matrix(l + 2, l + 2, (0..(l + 2) * (l + 2)).map(|_| rng.gen_range(-1.0..1.0)).collect());
    c.bench_function("crf partition n=20", |b| b.iter(|| Crf::log_partition(black_box(&em), &tr)));
    c.bench_function("crf viterbi n=20", |b| b.iter(|| Crf::viterbi(black_box(&em), &tr).1));
}

criterion_group!(benches, blocks, decoding, crf);
criterion_main!(benches);
