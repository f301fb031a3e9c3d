use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::DatasetEval;

/// One completed client step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Completed optimizer steps of this client, 1-based.
    pub step: u64,
    /// Protocol round the step ran in; rounds aborted by the server are
    /// skipped, so `round ≥ step`.
    pub round: u64,
    pub client_id: u32,
    pub loss: f64,
    /// Milliseconds since the run started.
    pub wall_ms: f64,
}

/// Server-side counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    /// Body forward passes (one per stacked round in client-batch mode).
    pub body_passes: u64,
    /// Optimizer updates applied to a body.
    pub updates: u64,
    /// Largest number of clients stacked into one pass.
    pub max_stack: usize,
    pub syncs: u64,
    pub handshakes: u64,
    /// Rounds aborted for a client whose gradient missed the deadline.
    pub aborted_rounds: u64,
    pub rejected_peers: u64,
}

impl ServerStats {
    pub fn merge(&mut self, o: &ServerStats) {
        self.body_passes += o.body_passes;
        self.updates += o.updates;
        self.max_stack = self.max_stack.max(o.max_stack);
        self.syncs += o.syncs;
        self.handshakes += o.handshakes;
        self.aborted_rounds += o.aborted_rounds;
        self.rejected_peers += o.rejected_peers;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodStat {
    pub period: u64,
    pub client_id: u32,
    pub steps: u64,
    pub mean_loss: f64,
}

/// Mean training loss per client per averaging period.
pub fn period_stats(cfg: &RunConfig, records: &[StepRecord]) -> Vec<PeriodStat> {
    let mut acc: BTreeMap<(u64, u32), (u64, f64)> = BTreeMap::new();
    for r in records {
        let e = acc.entry((cfg.period_of(r.round), r.client_id)).or_default();
        e.0 += 1;
        e.1 += r.loss;
    }
    acc.into_iter()
        .map(|((period, client_id), (steps, sum))| PeriodStat {
            period,
            client_id,
            steps,
            mean_loss: sum / steps as f64,
        })
        .collect()
}

/// `(initial, final)` mean loss: the first `window` steps and the last
/// `window` steps of every client.
pub fn loss_window(records: &[StepRecord], window: u64) -> Option<(f64, f64)> {
    let mut by_client: BTreeMap<u32, Vec<&StepRecord>> = BTreeMap::new();
    for r in records {
        by_client.entry(r.client_id).or_default().push(r);
    }
    let (mut first, mut last) = (Vec::new(), Vec::new());
    for rs in by_client.values_mut() {
        rs.sort_by_key(|r| r.step);
        let w = (window as usize).min(rs.len());
        first.extend(rs[..w].iter().map(|r| r.loss));
        last.extend(rs[rs.len() - w..].iter().map(|r| r.loss));
    }
    if first.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((mean(&first), mean(&last)))
}

/// Records ordered by client then step, as written to CSV.
pub fn sorted(records: &[StepRecord]) -> Vec<StepRecord> {
    let mut v = records.to_vec();
    v.sort_by_key(|r| (r.client_id, r.step));
    v
}

pub fn write_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in sorted(records) {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("metrics CSV: {other:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: u32,
    pub steps: u64,
    pub rounds: u64,
    pub handshakes: u64,
    pub dropped: bool,
    pub error: Option<String>,
}

/// Everything a run reports besides the per-step CSV. The resolved config
/// is embedded so the file alone describes the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub wall_ms: f64,
    pub interrupted: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub clients: Vec<ClientSummary>,
    pub server: ServerStats,
    pub periods: Vec<PeriodStat>,
    pub eval: Option<DatasetEval>,
}

impl RunSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(client_id: u32, step: u64, loss: f64) -> StepRecord {
        StepRecord {
            step,
            round: step,
            client_id,
            loss,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn windows_and_periods() {
        let rs: Vec<StepRecord> = (1..=4).flat_map(|s| [rec(0, s, s as f64), rec(1, s, 10.0 * s as f64)]).collect();
        let (a, b) = loss_window(&rs, 1).unwrap();
        assert_eq!((a, b), ((1.0 + 10.0) / 2.0, (4.0 + 40.0) / 2.0));
        let cfg = RunConfig {
            averaging: super::super::AveragingConfig {
                period_steps: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let p = period_stats(&cfg, &rs);
        assert_eq!(p.len(), 4);
        assert_eq!((p[0].period, p[0].client_id, p[0].mean_loss), (1, 0, 1.5));
        assert!(loss_window(&[], 3).is_none());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rs = vec![rec(1, 1, 0.5), rec(0, 2, 0.25), rec(0, 1, 1.0)];
        write_csv(&path, &rs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,round,client_id,loss,wall_ms\n"));
        assert_eq!(read_csv(&path).unwrap(), sorted(&rs));
    }
}
