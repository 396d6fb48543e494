//! `simulate-dialogue`: fixed-context continuations per self-emotion mode.

use std::fmt::Write as _;

use anyhow::{Context, Result};

use emosim::dialogue::{run_fixed_context_experiment, ExperimentTable, FixedContextCase, RunOptions};
use emosim::metrics::{emotion_strategy_flow, evaluate_fixed_context, flow_input, FlowMatrix, ModeAccuracy};

use crate::Session;

pub fn run(s: &Session) -> Result<()> {
    let c = &s.loaded.config;
    let block = c
        .fixed_context
        .as_ref()
        .context("config has no [fixed_context] block")?;
    let cases: Vec<FixedContextCase> = emosim::persist::read_jsonl(&s.loaded.resolve(&block.cases_path))?;
    let modes = c.dialogue_modes();
    let table = run_fixed_context_experiment(
        &cases,
        &modes,
        &s.engine,
        RunOptions {
            seed: c.seed,
            jobs: s.jobs,
        },
    )?;
    s.run.write_jsonl("transcripts.jsonl", &table.rows)?;

    let accuracy = evaluate_fixed_context(&table, &cases, &s.engine.strategies);
    let flow = emotion_strategy_flow(&flow_input(&table), &s.engine.labels, &s.engine.strategies)
        .top_k(block.flow_top_k, block.flow_top_k);
    s.run.write_text("report.txt", &report_text(&table, &accuracy, &flow))?;
    s.run.write_csv("report.csv", &report_csv(&table, &accuracy))?;
    s.run.write_csv("flow.csv", &flow.to_edge_csv())?;
    Ok(())
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn accuracy_of(acc: &[ModeAccuracy], mode: emosim::dialogue::SeMode) -> Option<&ModeAccuracy> {
    acc.iter().find(|a| a.mode == mode)
}

pub fn report_text(table: &ExperimentTable, acc: &[ModeAccuracy], flow: &FlowMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>6} {:>9} {:>8} {:>6} {:>6} {:>8}",
        "mode", "total", "completed", "filtered", "errors", "scored", "accuracy"
    );
    for m in &table.summary {
        let a = accuracy_of(acc, m.mode);
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>9} {:>8} {:>6} {:>6} {:>8}",
            m.mode.as_str(),
            m.total,
            m.completed,
            m.filtered,
            m.errors,
            a.map_or(0, |a| a.scored),
            fmt_acc(a.and_then(|a| a.accuracy))
        );
    }
    let edges = flow.edges();
    if !edges.is_empty() {
        let _ = writeln!(out, "\nself-emotion -> strategy");
        for (label, strategy, n) in edges {
            let _ = writeln!(out, "{label:>14} -> {strategy:<40} {n:>4}");
        }
    }
    out
}

pub fn report_csv(table: &ExperimentTable, acc: &[ModeAccuracy]) -> String {
    let mut out = String::from("mode,total,completed,filtered,errors,scored,accuracy\n");
    for m in &table.summary {
        let a = accuracy_of(acc, m.mode);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.mode.as_str(),
            m.total,
            m.completed,
            m.filtered,
            m.errors,
            a.map_or(0, |a| a.scored),
            a.and_then(|a| a.accuracy).map_or_else(String::new, |x| format!("{x:.2}"))
        );
    }
    out
}
