//! Parallel vs sequential throughput on the pipeline's hot loops: repeated
//! sampling plus judging against the mock backend, and threshold sweeps.
//!
//! Run with `cargo bench -p kbgate`. The sequential series is the exact code
//! path a `--no-default-features` build uses.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kbgate::config::Config;
use kbgate::domain::{ImageRef, QueryRecord};
use kbgate::gateway::DecodingOverrides;
use kbgate::judge::parse_first_number;
use kbgate::par::{map_units, map_units_seq};
use kbgate::run::RunContext;
use kbgate::template::{compose_answer_message, render_judge, Dialect, TemplateVariant};

fn corpus(n: usize) -> Vec<QueryRecord> {
    (0..n)
        .map(|i| QueryRecord {
            id: format!("q{i:04}"),
            source: "bench".into(),
            text: format!("benchmark question number {i}?"),
            images: vec![ImageRef::uri(format!("https://example.com/{i}.png"))],
            gold_answer: format!("gold {i}"),
            gold_query: None,
            human_label: None,
        })
        .collect()
}

/// One (query, draw) unit of the sampling+judging loop: draw a sample, then
/// judge it. No caching, so every iteration pays the full backend cost.
fn sample_and_judge(ctx: &RunContext, query: &QueryRecord, index: u32) -> f64 {
    let dialect = Dialect::default();
    let message = compose_answer_message(query, None, &dialect).unwrap();
    let sample = ctx
        .gateway
        .generate("sampler", &message, DecodingOverrides::default(), index)
        .unwrap();
    let judge_template = ctx.config.template(TemplateVariant::Judge).unwrap();
    let judge_message =
        render_judge(&judge_template, &query.text, &sample.text, &query.gold_answer).unwrap();
    let reply = ctx
        .gateway
        .generate("judge", &judge_message, DecodingOverrides::greedy(), index)
        .unwrap();
    parse_first_number(&reply.text).unwrap_or(0.0)
}

fn bench_sample_judge(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let ctx = RunContext::new(Config::default(), dir.path(), true).unwrap();
    let queries = corpus(24);
    let draws = 4u32;
    let units: Vec<(usize, u32)> = (0..queries.len())
        .flat_map(|qi| (0..draws).map(move |d| (qi, d)))
        .collect();

    let mut group = c.benchmark_group("sample_judge");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", units.len()), |b| {
        b.iter(|| {
            map_units_seq(&units, |&(qi, d)| sample_and_judge(&ctx, &queries[qi], d))
        })
    });
    for threads in [2usize, 8] {
        group.bench_function(BenchmarkId::new("parallel", threads), |b| {
            b.iter(|| {
                map_units(threads, &units, |&(qi, d)| {
                    sample_and_judge(&ctx, &queries[qi], d)
                })
            })
        });
    }
    group.finish();
}

fn bench_gate_sweep(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let ctx = RunContext::new(Config::default(), dir.path(), true).unwrap();
    let templates = ctx.config.template_set().unwrap();
    let queries = corpus(64);
    let dialect = Dialect::default();
    let opts = kbgate::gate::GateOpts {
        boundary_profile: "boundary",
        prompt_profile: "answerer",
        templates: &templates,
        boundary_dialect: &dialect,
        prompt_dialect: &dialect,
        scale: Default::default(),
    };

    let mut group = c.benchmark_group("soft_gate");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            map_units_seq(&queries, |q| {
                kbgate::gate::decide(&ctx.gateway, q, kbgate::domain::Mode::Skb, Some(4.5), &opts)
                    .unwrap()
                    .retrieve
            })
        })
    });
    group.bench_function("parallel_8", |b| {
        b.iter(|| {
            map_units(8, &queries, |q| {
                kbgate::gate::decide(&ctx.gateway, q, kbgate::domain::Mode::Skb, Some(4.5), &opts)
                    .unwrap()
                    .retrieve
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_sample_judge, bench_gate_sweep);
criterion_main!(benches);
