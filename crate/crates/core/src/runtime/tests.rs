use proptest::prelude::*;

use super::*;
use crate::trajectory::ToolName;
use crate::workload::{run_scripted, FoldMode, ScriptStep, TaskScript, WorkloadSpec};

fn task(n: usize, pad: u32) -> TaskScript {
    let mut steps: Vec<ScriptStep> = (1..n)
        .map(|i| ScriptStep {
            thought: format!("step {i}"),
            tool: if (i / 6) % 2 == 0 { ToolName::ExecuteBash } else { ToolName::StrReplaceEditor },
            action: format!("cmd {i}"),
            observation: format!("out {i}"),
            pad_tokens: pad,
        })
        .collect();
    steps.push(ScriptStep {
        thought: "done".into(),
        tool: ToolName::Submit,
        action: "submit".into(),
        observation: "ok".into(),
        pad_tokens: 0,
    });
    TaskScript {
        task_id: format!("task-{n}-{pad}"),
        system_prompt: "You are an agent.".into(),
        task_prompt: "Fix the bug.".into(),
        success: true,
        steps,
    }
}

fn mock() -> Summarizer {
    Summarizer::mock(0.3)
}

#[test]
fn short_script_submits() {
    let t = task(3, 0);
    let ep = run_scripted(&t, &StrategyConfig::new(StrategyKind::AppendOnly), FoldMode::Never, &mock()).unwrap();
    assert_eq!(ep.trajectory.len(), 3);
    assert_eq!(ep.trajectory.terminal_status, TerminalStatus::SubmittedSuccess);
    assert_eq!(ep.contexts.len(), 3);
    assert!(ep.trajectory.validate().is_empty());
}

/// Independent rendering of an append-only context, by bytes.
fn rendered_bytes(t: &TaskScript, upto: usize) -> usize {
    let mut bytes = format!(
        "<system>\n{}\n</system>\n<user>\n{}\n</user>\n",
        t.system_prompt, t.task_prompt
    )
    .len();
    for (i, s) in t.steps[..upto].iter().enumerate() {
        bytes += format!(
            "<step round=\"{}\" tool=\"{}\">\n<thought>\n{}\n</thought>\n<action>\n{}\n</action>\n<observation>\n{}\n</observation>\n</step>\n",
            i + 1,
            s.tool,
            s.thought,
            s.action,
            s.observation_text(i as u32)
        )
        .len();
    }
    bytes
}

#[test]
fn append_only_exhausts_where_cumulative_sum_crosses() {
    let t = task(20, 10_000);
    let budget = 65_536usize;
    let first_over = (1..=t.steps.len())
        .find(|&r| rendered_bytes(&t, r).div_ceil(4) > budget)
        .unwrap();
    assert_eq!(first_over, 7);
    let ep = run_scripted(&t, &StrategyConfig::new(StrategyKind::AppendOnly), FoldMode::Never, &mock()).unwrap();
    assert_eq!(ep.trajectory.terminal_status, TerminalStatus::BudgetExhausted);
    assert_eq!(ep.trajectory.len(), first_over - 1);
    assert_eq!(ep.final_context.0 as usize, rendered_bytes(&t, first_over - 1).div_ceil(4));
}

#[test]
fn periodic_folding_completes_long_task() {
    let t = task(200, 1000);
    let strategy = StrategyConfig::new(StrategyKind::CatFolding);
    let ep = run_scripted(&t, &strategy, FoldMode::EveryN { n: 20 }, &mock()).unwrap();
    let traj = &ep.trajectory;
    assert_eq!(traj.terminal_status, TerminalStatus::SubmittedSuccess);
    assert_eq!(traj.environment_steps().count(), 200);
    assert!(traj.fold_count() >= 9);
    assert!(traj.validate().is_empty(), "{:?}", traj.validate());
    let curve = replay_contexts(traj, 5).unwrap();
    assert!(curve.iter().all(|(_, c)| *c <= strategy.budget.max_context));
    // the policy saw exactly the replayed contexts
    assert_eq!(&ep.contexts[1..], &curve[..curve.len() - 1].iter().map(|c| c.1).collect::<Vec<_>>()[..]);
    assert_eq!(ep.final_context, curve.last().unwrap().1);
}

#[test]
fn context_action_is_illegal_without_folding_strategy() {
    let t = task(40, 100);
    for kind in [StrategyKind::AppendOnly, StrategyKind::ThresholdCompression] {
        let err = run_scripted(&t, &StrategyConfig::new(kind), FoldMode::EveryN { n: 10 }, &mock()).unwrap_err();
        assert!(matches!(err, Error::IllegalAction { .. }), "{err}");
    }
}

#[test]
fn threshold_compression_folds_on_its_own() {
    let t = task(200, 1000);
    let strategy = StrategyConfig::new(StrategyKind::ThresholdCompression);
    let ep = run_scripted(&t, &strategy, FoldMode::Never, &mock()).unwrap();
    assert_eq!(ep.trajectory.terminal_status, TerminalStatus::SubmittedSuccess);
    assert!(ep.trajectory.fold_count() >= 1);
    assert_eq!(ep.trajectory.provenance, Provenance::Online);
    let threshold = strategy.budget.max_context.scale(0.75);
    for (i, s) in ep.trajectory.steps.iter().enumerate() {
        if s.is_fold() {
            assert!(ep.contexts[i] > threshold);
        }
    }
    assert!(ep.contexts.iter().all(|c| *c <= strategy.budget.max_context));
}

#[test]
fn strategies_agree_on_short_tasks() {
    let t = task(30, 50);
    let runs: Vec<_> = StrategyKind::ALL
        .into_iter()
        .map(|k| {
            let cfg = StrategyConfig::new(k);
            run_scripted(&t, &cfg, FoldMode::cooperative(&cfg.budget), &mock()).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.trajectory.steps, runs[0].trajectory.steps);
        assert_eq!(r.trajectory.terminal_status, runs[0].trajectory.terminal_status);
        assert_eq!(r.contexts, runs[0].contexts);
    }
}

#[test]
fn error_loop_stops_episode() {
    let mut t = task(30, 0);
    for s in &mut t.steps[10..20] {
        s.observation = "Error: still broken".into();
    }
    let mut cfg = StrategyConfig::new(StrategyKind::AppendOnly);
    cfg.error_loop_limit = Some(5);
    let ep = run_scripted(&t, &cfg, FoldMode::Never, &mock()).unwrap();
    assert_eq!(ep.trajectory.terminal_status, TerminalStatus::ErrorLoop);
    assert_eq!(ep.trajectory.len(), 15);
}

#[test]
fn max_rounds_truncates() {
    let t = task(30, 0);
    let cfg = StrategyConfig::new(StrategyKind::AppendOnly).with_max_rounds(12);
    let ep = run_scripted(&t, &cfg, FoldMode::Never, &mock()).unwrap();
    assert_eq!(ep.trajectory.terminal_status, TerminalStatus::Truncated);
    assert_eq!(ep.trajectory.len(), 12);
}

#[test]
fn survival_uses_strict_length() {
    let trajs: Vec<_> = [5, 10, 10]
        .iter()
        .map(|&n| {
            run_scripted(&task(n, 10), &StrategyConfig::new(StrategyKind::AppendOnly), FoldMode::Never, &mock())
                .unwrap()
                .trajectory
        })
        .collect();
    let a = analyze_runs(&trajs, 5).unwrap();
    assert_eq!(a.rows.len(), 10);
    assert_eq!(a.rows[5].survivors, 2);
    assert_eq!(a.rows[4].survivors, 3);
    assert!(analyze_runs(&[], 5).is_err());
}

#[test]
fn single_run_mean_is_its_curve() {
    let t = task(25, 200);
    let cfg = StrategyConfig::new(StrategyKind::CatFolding);
    let ep = run_scripted(&t, &cfg, FoldMode::EveryN { n: 8 }, &mock()).unwrap();
    let a = analyze_runs(std::slice::from_ref(&ep.trajectory), 5).unwrap();
    for row in &a.rows {
        assert_eq!(row.mean, a.curves[0][row.t as usize].0 as f64);
        assert_eq!(TokenCount(row.token_sum), ep.contexts[row.t as usize]);
    }
}

#[test]
fn strategy_names_parse() {
    for k in StrategyKind::ALL {
        assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
    }
    assert!("react".parse::<StrategyKind>().is_err());
}

#[test]
fn sweep_completion_is_monotone_in_rounds() {
    let spec = WorkloadSpec {
        n_tasks: 6,
        ..WorkloadSpec::long_horizon()
    };
    let tasks = spec.generate(11);
    let s = mock();
    let strategies = [
        StrategyConfig::new(StrategyKind::AppendOnly),
        StrategyConfig::new(StrategyKind::CatFolding),
    ];
    let rows = budget_sweep(&strategies, &[150, 500], |cfg| {
        tasks
            .iter()
            .map(|t| run_scripted(t, cfg, FoldMode::for_strategy(cfg), &s))
            .collect()
    })
    .unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].completed + rows[1].completed, 0, "append-only cannot finish long tasks");
    assert!(rows[3].completion_rate >= rows[2].completion_rate);
    assert_eq!(rows[3].completion_rate, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn survival_is_non_increasing(lens in prop::collection::vec(2usize..40, 1..8)) {
        let trajs: Vec<_> = lens
            .iter()
            .map(|&n| run_scripted(&task(n, 30), &StrategyConfig::new(StrategyKind::AppendOnly), FoldMode::Never, &mock()).unwrap().trajectory)
            .collect();
        let a = analyze_runs(&trajs, 5).unwrap();
        prop_assert_eq!(a.rows.len(), *lens.iter().max().unwrap());
        prop_assert!(a.rows.windows(2).all(|w| w[1].survivors <= w[0].survivors));
    }
}
