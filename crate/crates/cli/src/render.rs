//! Plain-text tables for terminal output.

use std::collections::{BTreeMap, BTreeSet};

use edgetier::control::{AgentRow, TaskRow};
use edgetier::domain::ResourceVector;
use edgetier::simnet::SimReport;

/// Left-aligned columns separated by two spaces.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let text: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(text.join("  ").trim_end());
        out.push('\n');
    };
    line(headers.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), ToString::to_string)
}

fn brief(r: &ResourceVector) -> String {
    format!("{:.2} cpu {} MB", r.cpus(), r.mem_mb)
}

pub fn tasks(rows: &[TaskRow]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut status = r.status.to_string();
            if r.requeue_pending {
                status.push_str(" (requeue)");
            }
            vec![
                r.task_id.to_string(),
                r.name.clone(),
                r.runtime.clone(),
                status,
                opt(&r.started),
                opt(&r.stopped),
                opt(&r.agent),
            ]
        })
        .collect();
    table(&["TASK", "NAME", "SERVICE", "STATUS", "STARTED", "STOPPED", "AGENT"], &rows)
}

pub fn agents(rows: &[AgentRow]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|a| {
            vec![
                a.agent_id.to_string(),
                a.gateway.to_string(),
                a.liveness.clone(),
                brief(&a.advertised),
                brief(&a.allocated),
            ]
        })
        .collect();
    table(&["AGENT", "GATEWAY", "LIVENESS", "ADVERTISED", "ALLOCATED"], &rows)
}

pub fn attributes(attrs: &BTreeMap<String, BTreeSet<String>>) -> String {
    let rows: Vec<Vec<String>> = attrs
        .iter()
        .map(|(k, vs)| vec![k.clone(), vs.iter().cloned().collect::<Vec<_>>().join(", ")])
        .collect();
    table(&["ATTRIBUTE", "VALUES"], &rows)
}

pub fn report(r: &SimReport) -> String {
    let mut out = String::new();
    for a in &r.assertions {
        let verdict = if a.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{verdict}  {}: {}\n", a.name, a.detail));
    }
    out.push_str(&format!(
        "{} trace lines, {} tasks, {} agent-ticks checked, {} violations\n",
        r.trace.len(),
        r.tasks.len(),
        r.conservation_checks,
        r.violations.len()
    ));
    for (tick, v) in &r.violations {
        out.push_str(&format!("violation at {tick}: {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_line_up() {
        let t = table(&["A", "BB"], &[vec!["xyz".into(), "1".into()], vec!["q".into(), "22".into()]]);
        assert_eq!(t, "A    BB\nxyz  1\nq    22\n");
    }
}
