use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use envinvert_core::prompt::{build_degradation_prompt, sample_inputs, DirectionCatalog, MemoryPool, PromptStage};
use envinvert_core::{
    classify_outcomes, parse_verbose_log, render_run_script, BaseImageRef, EnvDelta, EnvironmentState, GoldInstance,
    TestId,
};

fn test_ids(n: usize) -> Vec<TestId> {
    (0..n).map(|i| format!("tests/test_mod{}.py::test_case[{i}]", i % 37).parse().unwrap()).collect()
}

fn verbose_log(ids: &[TestId]) -> String {
    let n = ids.len();
    let mut log = String::from("============================= test session starts ==============================\n");
    log.push_str(&format!("collecting ... collected {n} items\n\n"));
    for (i, id) in ids.iter().enumerate() {
        let status = match i % 7 {
            0 => "FAILED",
            3 => "ERROR",
            5 => "SKIPPED",
            _ => "PASSED",
        };
        log.push_str(&format!("{:<73} [{:>3}%]\n", format!("{id} {status}"), (i + 1) * 100 / n));
    }
    log.push_str("=================== 100 failed, 500 passed in 12.34s ===================\n");
    log
}

fn log_parsing(c: &mut Criterion) {
    let mut g = c.benchmark_group("parse_verbose_log");
    for n in [100, 1_000, 10_000] {
        let log = verbose_log(&test_ids(n));
        g.throughput(Throughput::Bytes(log.len() as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &log, |b, log| b.iter(|| parse_verbose_log(black_box(log))));
    }
    g.finish();
}

fn classification(c: &mut Criterion) {
    let mut g = c.benchmark_group("classify_outcomes");
    for n in [50, 1_000] {
        let ids = test_ids(n);
        let report = parse_verbose_log(&verbose_log(&ids));
        g.bench_with_input(BenchmarkId::from_parameter(n), &(ids, report), |b, (ids, report)| {
            b.iter(|| classify_outcomes(black_box(ids), black_box(report)))
        });
    }
    g.finish();
}

fn fingerprint(c: &mut Criterion) {
    let base: BaseImageRef = "task-bench:latest".parse().unwrap();
    let mut state = EnvironmentState::new(base, "bench@0000000").unwrap();
    for i in 0..50 {
        let delta =
            EnvDelta::new(vec![format!("RUN echo layer {i} > /tmp/layer{i}"), format!("ENV STEP_{i}=on")], vec![])
                .unwrap();
        state = state.apply_delta(&delta).unwrap();
    }
    c.bench_function("fingerprint/50_layers", |b| b.iter(|| black_box(&state).fingerprint()));
}

fn templates(c: &mut Criterion) {
    let ids = test_ids(400);
    let gold = GoldInstance {
        state: EnvironmentState::new("task-bench:latest".parse().unwrap(), "bench@0000000").unwrap(),
        repo_name: "bench".into(),
        test_inventory: ids.clone(),
        image_tag: "task-bench:latest".into(),
    };
    let pool = MemoryPool::new();
    for i in 0..200 {
        pool.push(format!("Previous task {i}"));
    }
    let catalog = DirectionCatalog::builtin();
    let inputs = sample_inputs(&gold, &pool, &catalog, 7).unwrap();
    c.bench_function("render/degradation_prompt", |b| {
        b.iter(|| build_degradation_prompt(black_box(&inputs), PromptStage::Initial, None).unwrap())
    });
    c.bench_function("render/run_tests_script", |b| b.iter(|| render_run_script(black_box(&ids[..50])).unwrap()));
}

criterion_group!(benches, log_parsing, classification, fingerprint, templates);
criterion_main!(benches);
