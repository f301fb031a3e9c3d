//! Wall time for a fixed sample budget across strategies and client counts.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use splitfed_core::orchestrator::{self, RunConfig, TrainingStrategy};
use splitfed_core::Result;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub strategy: TrainingStrategy,
    pub clients: usize,
    pub steps_per_client: u64,
    pub samples: u64,
    pub mean_s: f64,
    pub std_s: f64,
    /// Serial wall time at the same client count over this row's.
    pub speedup_vs_serial: f64,
}

/// Rounds per client so that all clients together see about `budget`
/// samples.
pub fn steps_for(budget: u64, clients: usize, batch: usize) -> u64 {
    budget.div_ceil((clients * batch) as u64).max(1)
}

/// Repeats are interleaved across strategies so slow drift in machine load
/// hits every strategy alike.
pub fn run(base: &RunConfig, strategies: &[TrainingStrategy], counts: &[usize], budget: u64, repeats: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &m in counts {
        let steps = steps_for(budget, m, base.batch_size);
        let cfgs: Vec<RunConfig> = strategies
            .iter()
            .map(|&s| RunConfig {
                strategy: s,
                clients: m,
                steps,
                ..base.clone()
            })
            .collect();
        for c in &cfgs {
            c.validate()?;
        }
        let mut times = vec![Vec::with_capacity(repeats); cfgs.len()];
        for _ in 0..repeats.max(1) {
            for (cfg, t) in cfgs.iter().zip(&mut times) {
                let start = Instant::now();
                orchestrator::run(cfg)?;
                t.push(start.elapsed().as_secs_f64());
            }
        }
        let mut at_m: Vec<BenchRow> = strategies
            .iter()
            .zip(&times)
            .map(|(&s, t)| {
                let n = t.len() as f64;
                let mean = t.iter().sum::<f64>() / n;
                let std = (t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                log::info!("{s:?} M={m}: {mean:.2}s");
                BenchRow {
                    strategy: s,
                    clients: m,
                    steps_per_client: steps,
                    samples: steps * (m * base.batch_size) as u64,
                    mean_s: mean,
                    std_s: std,
                    speedup_vs_serial: f64::NAN,
                }
            })
            .collect();
        let serial = at_m.iter().find(|r| r.strategy == TrainingStrategy::Serial).map(|r| r.mean_s);
        for r in &mut at_m {
            r.speedup_vs_serial = serial.map_or(f64::NAN, |s| s / r.mean_s);
        }
        rows.extend(at_m);
    }
    Ok(rows)
}

fn label(s: TrainingStrategy) -> &'static str {
    match s {
        TrainingStrategy::Serial => "serial",
        TrainingStrategy::ClientBatch => "client-batch",
        TrainingStrategy::ServerHierarchical => "server-hierarchical",
    }
}

/// One column per (strategy, M), grouped by strategy like the usual
/// training-time comparison table.
pub fn table(rows: &[BenchRow]) -> String {
    let mut order: Vec<&BenchRow> = rows.iter().collect();
    order.sort_by_key(|r| (r.strategy as u8, r.clients));
    let cells: Vec<[String; 4]> = order
        .iter()
        .map(|r| {
            [
                label(r.strategy).to_string(),
                r.clients.to_string(),
                format!("{:.2}±{:.2}", r.mean_s, r.std_s),
                if r.speedup_vs_serial.is_finite() {
                    format!("{:.2}x", r.speedup_vs_serial)
                } else {
                    "-".into()
                },
            ]
        })
        .collect();
    let heads = ["strategy", "num. of clients", "time(s)", "vs serial"];
    let mut out = String::new();
    let widths: Vec<usize> = cells.iter().map(|c| c.iter().map(|x| x.chars().count()).max().unwrap_or(0)).collect();
    for (i, head) in heads.iter().enumerate() {
        let _ = write!(out, "{head:<16}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, " | {:>w$}", c[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &std::path::Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| splitfed_core::Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| splitfed_core::Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
