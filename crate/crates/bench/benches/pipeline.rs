use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ctxfold_core::planner::CompressionInput;
use ctxfold_core::workload::base_trajectory;
use ctxfold_core::{
    gate_trajectory, ContextState, GateConfig, Retrofitter, Step, Summarizer, ToolAction, WorkloadSpec,
};

fn workspace(c: &mut Criterion) {
    let steps: Vec<Step> = (1..=200)
        .map(|i| {
            Step::new(
                i,
                "look at the failing test",
                ToolAction::new("execute_bash", format!("pytest -x tests/test_{i}.py")),
                "x".repeat(2_000),
            )
        })
        .collect();
    let summarizer = Summarizer::mock(0.3);

    c.bench_function("workspace/append_200", |b| {
        b.iter(|| {
            let mut ctx = ContextState::new("sys", "fix it", 5).unwrap();
            for s in &steps {
                ctx.append_step(s.clone()).unwrap();
            }
            black_box(ctx.rendered_tokens())
        })
    });

    c.bench_function("workspace/append_fold_every_20", |b| {
        b.iter(|| {
            let mut ctx = ContextState::new("sys", "fix it", 5).unwrap();
            for (i, s) in steps.iter().enumerate() {
                ctx.append_step(s.clone()).unwrap();
                if i % 20 == 19 {
                    let input = CompressionInput::from_workspace(&ctx).unwrap();
                    ctx.fold(summarizer.summarize(&input).unwrap()).unwrap();
                }
            }
            black_box(ctx.rendered_tokens())
        })
    });
}

fn pipeline(c: &mut Criterion) {
    let spec = WorkloadSpec {
        n_tasks: 4,
        ..WorkloadSpec::retrofit_corpus()
    };
    let mock = Summarizer::mock(0.3);
    let bases: Vec<_> = spec
        .generate(7)
        .iter()
        .map(|t| base_trajectory(t, &mock).unwrap())
        .collect();
    let retrofitter = Retrofitter::with_mock(0.3);
    c.bench_function("retrofit/one_trajectory", |b| {
        b.iter(|| black_box(retrofitter.retrofit(&bases[0]).unwrap()))
    });

    let records: Vec<_> = bases.iter().map(|t| retrofitter.retrofit(t).unwrap()).collect();
    let gate = GateConfig::default();
    c.bench_function("gate/four_records", |b| {
        b.iter(|| records.iter().filter(|r| gate_trajectory(r, &gate).is_accept()).count())
    });
}

criterion_group!(benches, workspace, pipeline);
criterion_main!(benches);
