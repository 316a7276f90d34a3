use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tilefuse::kernels::canonical::grrg_canonical;
use tilefuse::kernels::{grrg_forward, kernel4_res_partial_rms, layer_backward, layer_forward};
use tilefuse::reduce::finalize_rms;
use tilefuse::{run_gemm, Bindings, EpilogueProgram, GemmProblem, PipelineConfig, Precision, TileShape};
use tilefuse_bench::{grrg_inputs, layer_inputs};

fn gemm_vs_epilogue(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [64usize, 128, 256] {
        let cfg = PipelineConfig::toy(n, n, n).with_tiles(TileShape::new(32, 32).unwrap(), 32);
        let (x, w, z, gamma, _) = grrg_inputs(&cfg, 1);
        let p = GemmProblem::new(n, n, n, cfg.precision).with_tiles(cfg.tile_shape, cfg.reduction_tile_n);
        let empty = EpilogueProgram::empty();
        g.bench_with_input(BenchmarkId::new("identity", n), &n, |b, _| {
            b.iter(|| run_gemm(&p, black_box(&x), &w, &empty, &Bindings::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("k4_res_partial_rms", n), &n, |b, _| {
            b.iter(|| kernel4_res_partial_rms(&cfg, black_box(&x), &w, &z, &gamma).unwrap())
        });
        let k4 = kernel4_res_partial_rms(&cfg, &x, &w, &z, &gamma).unwrap();
        let slot = k4.partials("rms_partials").unwrap();
        g.bench_with_input(BenchmarkId::new("finalize_rms", n), &n, |b, _| {
            b.iter(|| finalize_rms(black_box(slot), cfg.eps).unwrap())
        });
    }
    g.finish();
}

fn grrg_orders(c: &mut Criterion) {
    let mut g = c.benchmark_group("grrg");
    for precision in [Precision::Exact64, Precision::SimBF16] {
        let cfg = PipelineConfig::toy(128, 128, 128).with_precision(precision);
        let (x, w0, z, gamma, w1) = grrg_inputs(&cfg, 2);
        let tag = format!("{precision:?}");
        g.bench_function(BenchmarkId::new("fused", &tag), |b| {
            b.iter(|| grrg_forward(&cfg, black_box(&x), &w0, &z, &gamma, &w1).unwrap())
        });
        g.bench_function(BenchmarkId::new("canonical", &tag), |b| {
            b.iter(|| grrg_canonical(&cfg, black_box(&x), &w0, &z, &gamma, &w1).unwrap())
        });
    }
    g.finish();
}

fn layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("layer");
    g.sample_size(20);
    for parallel in [false, true] {
        let cfg = PipelineConfig {
            parallel,
            ..PipelineConfig::toy(64, 64, 176)
        };
        let i = layer_inputs(&cfg, 3);
        let tag = if parallel { "parallel" } else { "sequential" };
        g.bench_function(BenchmarkId::new("forward", tag), |b| {
            b.iter(|| layer_forward(&cfg, black_box(&i.x), &i.z, &i.w, &i.cos, &i.sin).unwrap())
        });
        let (_, tape) = layer_forward(&cfg, &i.x, &i.z, &i.w, &i.cos, &i.sin).unwrap();
        g.bench_function(BenchmarkId::new("backward", tag), |b| {
            b.iter(|| layer_backward(&cfg, black_box(&tape), &i.w, &i.dq, &i.dres).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gemm_vs_epilogue, grrg_orders, layer);
criterion_main!(benches);
