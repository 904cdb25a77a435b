use std::collections::BTreeSet;
use std::hint::black_box;

use casegraph_bench::fixture;
use casegraph_core::eval::RankedList;
use casegraph_core::model::{forward_graph, Mode};
use casegraph_core::{evaluate, ModelParams, Tape};
use criterion::{criterion_group, criterion_main, Criterion};

fn layer_forward(c: &mut Criterion) {
    let (_, data, config) = fixture();
    let params = ModelParams::init(config.model.clone()).unwrap();
    let graph = &data.graphs[0].fact;
    c.bench_function("forward_graph", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let out = forward_graph(&mut tape, &vars, &params.config, black_box(graph), &mut Mode::Eval)
                .unwrap();
            black_box(out.readout)
        })
    });
    c.bench_function("embed_corpus", |b| b.iter(|| data.embed(black_box(&params)).unwrap()));
}

fn bm25(c: &mut Criterion) {
    let (_, data, _) = fixture();
    let exclude: BTreeSet<String> = [data.records[0].case_id.clone()].into();
    c.bench_function("bm25_top_10", |b| {
        b.iter(|| data.bm25.top_k("q", black_box(&data.texts[0]), 10, &exclude))
    });
}

fn metrics(c: &mut Criterion) {
    let (corpus, data, _) = fixture();
    let queries: Vec<&String> = corpus.test_labels.keys().collect();
    let rankings: Vec<RankedList> = data.bm25_rankings(queries, 100).unwrap();
    c.bench_function("evaluate", |b| {
        b.iter(|| evaluate(black_box(&rankings), &corpus.test_labels, 5))
    });
}

criterion_group!(benches, layer_forward, bm25, metrics);
criterion_main!(benches);
