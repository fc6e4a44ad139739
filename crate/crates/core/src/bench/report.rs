//! Markdown and CSV renderings of evaluation results.

use std::fmt::Write as _;

use super::{Comparison, InstanceErrors, Mode, SuiteResult, SweepPoint};
use crate::error::Result;

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

pub fn result_markdown(r: &SuiteResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## {} (bank {}, k = {})\n", r.mode, r.bank.id(), r.k);
    let _ = writeln!(s, "| subtask | n | correct | accuracy % | 95% CI |");
    let _ = writeln!(s, "|---|---:|---:|---:|---|");
    for (name, a) in r
        .subtasks
        .iter()
        .map(|(k, a)| (k.name().to_string(), a))
        .chain(std::iter::once(("overall".to_string(), &r.overall)))
    {
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | [{}, {}] |",
            a.n,
            a.correct,
            pct(a.accuracy),
            pct(a.ci95.0),
            pct(a.ci95.1)
        );
    }
    let _ = writeln!(s, "\nchance: {}%", pct(r.chance));
    if r.degenerate_instances > 0 {
        let _ = writeln!(s, "degenerate instances (all scores tied): {}", r.degenerate_instances);
    }
    s
}

pub fn result_csv(r: &SuiteResult) -> String {
    let mut s = String::from("mode,bank_id,subtask,n,correct,accuracy,ci_lo,ci_hi\n");
    for (name, a) in r
        .subtasks
        .iter()
        .map(|(k, a)| (k.name().to_string(), a))
        .chain(std::iter::once(("overall".to_string(), &r.overall)))
    {
        let _ = writeln!(
            s,
            "{},{},{name},{},{},{},{},{}",
            r.mode,
            r.bank.id(),
            a.n,
            a.correct,
            a.accuracy,
            a.ci95.0,
            a.ci95.1
        );
    }
    s
}

/// One row per (instance, candidate) with the raw error terms at the full
/// bank size.
pub fn score_dump_csv(errors: &[InstanceErrors], mode: Mode) -> Result<String> {
    let mut s = String::from("instance,candidate,gold,conditional,unconditional,normalized,rank,bank_id\n");
    for e in errors {
        let n = e.bank_size();
        let ranking = crate::itm::Ranking::from_scores(e.scores(mode, n)?);
        for (j, c) in e.candidates.iter().enumerate() {
            let cond = c.cond.iter().sum::<f64>() / n as f64;
            let uncond = if c.uncond.is_empty() {
                f64::NAN
            } else {
                c.uncond.iter().sum::<f64>() / n as f64
            };
            let _ = writeln!(
                s,
                "{},{j},{},{cond},{uncond},{},{},{}",
                e.id,
                u8::from(j == e.gold),
                cond - uncond,
                ranking.rank_of(j),
                e.bank_id
            );
        }
    }
    Ok(s)
}

pub fn sweep_markdown(mode: Mode, points: &[SweepPoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## bank-size sweep ({mode})\n");
    let _ = writeln!(s, "| bank size | accuracy % | 95% CI |");
    let _ = writeln!(s, "|---:|---:|---|");
    for p in points {
        let _ = writeln!(
            s,
            "| {} | {} | [{}, {}] |",
            p.bank_size,
            pct(p.accuracy.accuracy),
            pct(p.accuracy.ci95.0),
            pct(p.accuracy.ci95.1)
        );
    }
    s
}

pub fn sweep_csv(mode: Mode, points: &[SweepPoint]) -> String {
    let mut s = String::from("mode,bank_size,n,correct,accuracy,ci_lo,ci_hi\n");
    for p in points {
        let a = &p.accuracy;
        let _ = writeln!(s, "{mode},{},{},{},{},{},{}", p.bank_size, a.n, a.correct, a.accuracy, a.ci95.0, a.ci95.1);
    }
    s
}

pub fn comparison_markdown(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = write!(s, "| subtask |");
    for l in &c.labels {
        let _ = write!(s, " {l} % |");
    }
    for l in c.labels.iter().skip(1) {
        let _ = write!(s, " Δ {l} (95% CI) |");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "|---|{}", "---:|".repeat(2 * c.labels.len() - 1));
    for row in &c.rows {
        let _ = write!(s, "| {} |", row.subtask);
        for a in &row.accuracies {
            let _ = write!(s, " {} |", pct(*a));
        }
        for i in 1..row.deltas.len() {
            let mark = if row.separated[i] { " *" } else { "" };
            let _ = write!(
                s,
                " {:+.1} [{:+.1}, {:+.1}]{mark} |",
                100.0 * row.deltas[i],
                100.0 * row.delta_ci[i].0,
                100.0 * row.delta_ci[i].1
            );
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "\nchance: {}%. `*`: non-overlapping 95% intervals.", pct(c.chance));
    s
}

pub fn comparison_csv(c: &Comparison) -> String {
    let mut s = String::from("subtask,label,accuracy,delta,delta_lo,delta_hi,separated\n");
    for row in &c.rows {
        for (i, l) in c.labels.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{l},{},{},{},{},{}",
                row.subtask, row.accuracies[i], row.deltas[i], row.delta_ci[i].0, row.delta_ci[i].1, row.separated[i]
            );
        }
    }
    s
}
