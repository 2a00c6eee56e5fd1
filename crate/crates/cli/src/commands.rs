use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context as _};
use ctxfold_core::io::{fold_log_rows, parse_line, survival_csv, sweep_csv, to_line, RejectedRecord, FOLD_LOG_HEADER};
use ctxfold_core::workload::{base_trajectory, run_scripted};
use ctxfold_core::{
    analyze_runs, budget_sweep, gate_trajectory, replay_contexts, validate_trajectory, Error, FoldMode, Reason,
    RetrofitRecord, Retrofitter, StatsAccumulator, StrategyKind, Summarizer, Trajectory, Verdict, Workload,
    WorkloadSpec,
};
use rayon::prelude::*;
use tracing::{info, warn};

use crate::batch::{self, create, finish, io_err, write_line};
use crate::{CmdResult, Ctx, Failure};

fn config_err(e: Error) -> Failure {
    Failure::Config(e.into())
}

fn summarizer(ctx: &Ctx) -> CmdResult<Summarizer> {
    Summarizer::new(ctx.cfg.summarizer.clone(), ctx.cfg.planner.failure_patterns.clone()).map_err(config_err)
}

pub fn retrofit(ctx: &Ctx, input: &Path, output: &Path) -> CmdResult {
    let retrofitter = Retrofitter::from_config(&ctx.cfg).map_err(config_err)?;
    let sidecar = output.with_extension("fold_log.csv");
    let mut out = create(output)?;
    let mut log = create(&sidecar)?;
    write_line(&mut log, FOLD_LOG_HEADER, &sidecar)?;

    let (mut ok, mut failed) = (0usize, 0usize);
    batch::process(
        ctx,
        input,
        |line| {
            let base: Trajectory = parse_line(line)?;
            let record = retrofitter.retrofit(&base)?;
            let mut rows = String::new();
            fold_log_rows(&mut rows, &record);
            Ok::<_, Error>((to_line(&record)?, rows))
        },
        |n, result| {
            match result {
                Ok((line, rows)) => {
                    write_line(&mut out, &line, output)?;
                    log.write_all(rows.as_bytes()).map_err(|e| io_err(e, &sidecar))?;
                    ok += 1;
                }
                Err(e) => {
                    warn!(line = n, error = %e, "row skipped");
                    failed += 1;
                }
            }
            Ok(())
        },
    )?;
    finish(out, output)?;
    finish(log, &sidecar)?;
    info!(ok, failed, "retrofit done");
    println!("retrofitted {ok} trajectories, {failed} failed");
    Ok(())
}

pub fn filter(ctx: &Ctx, input: &Path, outdir: &Path) -> CmdResult {
    let gate = &ctx.cfg.gate;
    let accepted_path = outdir.join("accepted.jsonl");
    let rejected_path = outdir.join("rejected.jsonl");
    let mut accepted = create(&accepted_path)?;
    let mut rejected = create(&rejected_path)?;

    let (mut n_acc, mut n_rej, mut failed) = (0usize, 0usize, 0usize);
    let mut by_reason: BTreeMap<Reason, usize> = BTreeMap::new();
    batch::process(
        ctx,
        input,
        |line| {
            let record: RetrofitRecord = parse_line(line)?;
            Ok::<_, Error>(match gate_trajectory(&record, gate) {
                Verdict::Accept => (None, to_line(&record)?),
                Verdict::Reject(reasons) => {
                    let line = to_line(&RejectedRecord {
                        reasons: reasons.clone(),
                        record,
                    })?;
                    (Some(reasons), line)
                }
            })
        },
        |n, result| {
            match result {
                Ok((None, line)) => {
                    write_line(&mut accepted, &line, &accepted_path)?;
                    n_acc += 1;
                }
                Ok((Some(reasons), line)) => {
                    write_line(&mut rejected, &line, &rejected_path)?;
                    for r in reasons {
                        *by_reason.entry(r).or_default() += 1;
                    }
                    n_rej += 1;
                }
                Err(e) => {
                    warn!(line = n, error = %e, "row skipped");
                    failed += 1;
                }
            }
            Ok(())
        },
    )?;
    finish(accepted, &accepted_path)?;
    finish(rejected, &rejected_path)?;
    println!("accepted {n_acc}");
    println!("rejected {n_rej}");
    for r in Reason::ALL {
        println!("  {:<26} {}", r.code(), by_reason.get(&r).copied().unwrap_or(0));
    }
    if failed > 0 {
        println!("unreadable {failed}");
    }
    Ok(())
}

pub fn stats(input: &Path, output: Option<&Path>) -> CmdResult {
    let mut acc = StatsAccumulator::default();
    let reader = batch::open(input)?;
    for (i, line) in std::io::BufRead::lines(reader).enumerate() {
        let line = line.map_err(|e| io_err(e, input))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line::<RetrofitRecord>(&line) {
            Ok(r) => acc.add(&r),
            Err(e) => warn!(line = i + 1, error = %e, "row skipped"),
        }
    }
    let stats = acc.finish().map_err(config_err)?;
    let json = serde_json::to_string_pretty(&stats).map_err(|e| Failure::Config(e.into()))?;
    let mut stdout = std::io::stdout().lock();
    let stdout_err = |e| io_err(e, Path::new("<stdout>"));
    stdout.write_all(stats.table().as_bytes()).map_err(stdout_err)?;
    match output {
        Some(path) => {
            let mut w = create(path)?;
            write_line(&mut w, &json, path)?;
            finish(w, path)
        }
        None => write_line(&mut stdout, &json, Path::new("<stdout>")),
    }
}

pub fn simulate(
    ctx: &Ctx,
    input: &Path,
    outdir: &Path,
    strategies: &[StrategyKind],
    max_rounds: &[usize],
) -> CmdResult {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("cannot read {}", input.display()))
        .map_err(Failure::Io)?;
    let workload: Workload = serde_json::from_str(&text)
        .with_context(|| format!("bad workload {}", input.display()))
        .map_err(Failure::Config)?;
    if let Some(spec) = &workload.generator {
        spec.validate().map_err(config_err)?;
    }
    let tasks = workload.tasks(ctx.seed);
    if tasks.is_empty() {
        return Err(Failure::Config(anyhow!("workload has no tasks")));
    }
    let summarizer = summarizer(ctx)?;
    let mut cfg = ctx.cfg.clone();
    cfg.runtime.strategies = strategies.to_vec();
    let configs = cfg.strategies(max_rounds[0]);
    for c in &configs {
        c.validate().map_err(config_err)?;
    }
    std::fs::create_dir_all(outdir)
        .with_context(|| format!("cannot create {}", outdir.display()))
        .map_err(Failure::Io)?;

    let longest = *max_rounds.iter().max().expect("non-empty");
    let mut finals: Vec<(StrategyKind, Vec<Trajectory>)> = Vec::new();
    let rows = budget_sweep(&configs, max_rounds, |strategy| {
        let episodes = ctx.pool.install(|| {
            tasks
                .par_iter()
                .map(|t| run_scripted(t, strategy, FoldMode::for_strategy(strategy), &summarizer))
                .collect::<Result<Vec<_>, _>>()
        })?;
        if strategy.max_rounds == longest && !finals.iter().any(|(k, _)| *k == strategy.kind) {
            finals.push((strategy.kind, episodes.iter().map(|e| e.trajectory.clone()).collect()));
        }
        Ok(episodes)
    })
    .map_err(|e| Failure::Config(e.into()))?;

    for (kind, trajs) in &finals {
        let analysis = analyze_runs(trajs, ctx.cfg.planner.retain_k).map_err(config_err)?;
        let path = outdir.join(format!("survival_{kind}.csv"));
        std::fs::write(&path, survival_csv(&analysis.rows)).map_err(|e| io_err(e, &path))?;
        let mean = analysis
            .mean_a(100..=longest as u32)
            .map_or_else(|| "n/a".to_string(), |m| format!("{m:.0}"));
        println!(
            "{kind:<22} rows {:>4}  max context {:>6}  mean A(100..{longest}) {mean}",
            analysis.rows.len(),
            analysis.max_context()
        );
    }
    let path = outdir.join("sweep.csv");
    let sweep = sweep_csv(&rows);
    std::fs::write(&path, &sweep).map_err(|e| io_err(e, &path))?;
    print!("{sweep}");
    Ok(())
}

/// Rows that look like retrofit records also get their stored contexts
/// checked against a fresh replay.
fn check_row(line: &str) -> Result<Vec<String>, Error> {
    let value: serde_json::Value = serde_json::from_str(line)?;
    if value.get("trajectory").is_some() {
        let record: RetrofitRecord = parse_line(line)?;
        let mut issues: Vec<String> = validate_trajectory(&record.trajectory)
            .iter()
            .map(|v| format!("step {}: {v}", v.position))
            .collect();
        match replay_contexts(&record.trajectory, record.retain_k) {
            Ok(replayed) => {
                let stored: Vec<_> = record.per_step_contexts.iter().map(|c| (c.round, c.tokens)).collect();
                if stored != replayed {
                    issues.push("stored contexts differ from replay".into());
                }
            }
            Err(e) => issues.push(format!("replay failed: {e}")),
        }
        Ok(issues)
    } else {
        let traj: Trajectory = parse_line(line)?;
        Ok(validate_trajectory(&traj)
            .iter()
            .map(|v| format!("step {}: {v}", v.position))
            .collect())
    }
}

pub fn validate(ctx: &Ctx, input: &Path) -> CmdResult {
    let (mut valid, mut invalid) = (0usize, 0usize);
    batch::process(ctx, input, check_row, |n, result| {
        match result {
            Ok(issues) if issues.is_empty() => valid += 1,
            Ok(issues) => {
                invalid += 1;
                for issue in issues {
                    println!("line {n}: {issue}");
                }
            }
            Err(e) => {
                invalid += 1;
                println!("line {n}: {e}");
            }
        }
        Ok(())
    })?;
    println!("valid {valid}, invalid {invalid}");
    Ok(())
}

pub fn generate(ctx: &Ctx, corpus: bool, output: &Path, tasks: Option<usize>) -> CmdResult {
    let seed = ctx.seed.unwrap_or(ctx.cfg.seed);
    let mut spec = if corpus {
        WorkloadSpec::retrofit_corpus()
    } else {
        WorkloadSpec::long_horizon()
    };
    if let Some(n) = tasks {
        spec.n_tasks = n;
    }
    spec.validate().map_err(config_err)?;
    let mut out = create(output)?;
    if corpus {
        let summarizer = summarizer(ctx)?;
        let lines = ctx.pool.install(|| {
            spec.generate(seed)
                .par_iter()
                .map(|t| base_trajectory(t, &summarizer).and_then(|traj| to_line(&traj)))
                .collect::<Result<Vec<_>, _>>()
        });
        for line in lines.map_err(config_err)? {
            write_line(&mut out, &line, output)?;
        }
    } else {
        let workload = Workload {
            seed,
            generator: Some(spec),
            tasks: Vec::new(),
        };
        let json = serde_json::to_string_pretty(&workload).map_err(|e| Failure::Config(e.into()))?;
        write_line(&mut out, &json, output)?;
    }
    finish(out, output)
}
