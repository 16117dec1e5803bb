use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use std::hint::black_box;

use mmsink_bench::{desk_workload, policies, trajectory};
use mmsink_core::cachepolicy::retain_positions;
use mmsink_core::seqmodel::BlockHistory;

fn decode(c: &mut Criterion) {
    let (model, prompt) = desk_workload(0);
    let toks = trajectory(&model, &prompt, 512);
    let mut g = c.benchmark_group("decode_512");
    g.sample_size(10);
    for policy in policies() {
        g.bench_with_input(BenchmarkId::from_parameter(policy.name()), &policy, |b, &p| {
            b.iter_batched(
                || model.new_cache(p, false).unwrap(),
                |mut cache| {
                    for &t in &toks {
                        black_box(model.forward_step(&mut cache, t, false).unwrap());
                    }
                },
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn retain(c: &mut Criterion) {
    let (model, prompt) = desk_workload(0);
    let toks = trajectory(&model, &prompt, 2048);
    let hist = BlockHistory::scan_lenient(&toks, model.config.seq.image_block_len);
    let mut g = c.benchmark_group("retain_positions_2k");
    for policy in policies() {
        g.bench_with_input(BenchmarkId::from_parameter(policy.name()), &policy, |b, p| {
            b.iter(|| black_box(retain_positions(p, &hist)))
        });
    }
    g.finish();
}

criterion_group!(benches, decode, retain);
criterion_main!(benches);
