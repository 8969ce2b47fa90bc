//! Forward + backward of one block at a few sequence lengths, sized for
//! quick comparisons. The full sweep lives in `gamlab bench`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use gamlab_bench::{measure_block, BenchConfig};
use gamlab_core::Arch;

fn blocks(c: &mut Criterion) {
    let cfg = BenchConfig {
        batch: 2,
        d_model: 64,
        num_slots: 64,
        n_head: 4,
        warmup: 0,
        iters: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("block_fwd_bwd");
    group.sample_size(10);
    for arch in [Arch::Gam, Arch::Transformer] {
        for n in [128usize, 256, 512] {
            group.throughput(Throughput::Elements((cfg.batch * n) as u64));
            group.bench_with_input(BenchmarkId::new(arch.name(), n), &n, |b, &n| {
                b.iter(|| measure_block(arch, &cfg, n))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, blocks);
criterion_main!(benches);
