//! CSV views of a ledger.

use std::fmt::Write as _;
use std::path::Path;

use super::ledger::{MetricsLedger, Phase};
use crate::evolution::NormScope;
use crate::plasticity::KernelStat;
use crate::topology::OPTIONS;
use crate::{Error, Result};

pub const SUMMARY_HEADER: &str = "phase_index,phase,task,average_metric,learned_tasks,active_local,total_local,long_range_edges,long_range_params,long_range_sparsity";

/// File name and contents of every report CSV; `scope` is the h_l
/// normalization the run used.
pub fn render(ledger: &MetricsLedger, scope: NormScope) -> Vec<(&'static str, String)> {
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut metrics = String::from("phase_index,phase,task_under_training,task,metric\n");
    let mut census = String::from("phase_index,phase,task,block,total_weights,active_weights,sparsity\n");
    let mut choices = String::from("task,dest_block,source_task,option,p,h_n,h_l\n");
    let mut pruning = String::from("round,task,block,active_before,active_after,mean_V,mean_H,E\n");
    let mut fine_tune = String::from("phase_index,task,epochs,before,after\n");
    for r in &ledger.records {
        // growth is reported together with the training phase that follows it
        if r.phase != Phase::Grow {
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{},{},{},{},{}",
                r.index,
                r.phase,
                r.task,
                r.average(),
                r.metrics.len(),
                r.census.active_local,
                r.census.total_local,
                r.census.long_range_edges,
                r.census.long_range_params,
                r.long_range_sparsity
            );
        }
        for (task, m) in &r.metrics {
            let _ = writeln!(metrics, "{},{},{},{task},{m}", r.index, r.phase, r.task);
        }
        for b in &r.census.blocks {
            let _ = writeln!(
                census,
                "{},{},{},{},{},{},{}",
                r.index, r.phase, b.task, b.block, b.total_weights, b.active_weights, b.sparsity
            );
        }
        if let Some(m) = &r.choices {
            for row in &m.rows {
                let h_l = m.performance(row, scope);
                for o in 0..OPTIONS {
                    let _ = writeln!(
                        choices,
                        "{},{},{},{},{},{},{}",
                        m.task,
                        row.dst_block,
                        row.src_task,
                        o + 1,
                        row.p[o],
                        row.history[o].h_n,
                        h_l[o]
                    );
                }
            }
        }
        for p in &r.pruning {
            let _ = writeln!(
                pruning,
                "{},{},{},{},{},{},{},{}",
                p.round, p.task, p.block, p.active_before, p.active_after, p.mean_v, p.mean_h, p.e
            );
        }
        if let Some(f) = &r.fine_tune {
            let _ = writeln!(fine_tune, "{},{},{},{},{}", r.index, f.task, f.epochs, f.before, f.after);
        }
    }
    vec![
        ("summary.csv", summary),
        ("metrics.csv", metrics),
        ("census.csv", census),
        ("choices.csv", choices),
        ("pruning.csv", pruning),
        ("fine_tune.csv", fine_tune),
    ]
}

/// Writes every report CSV into `dir`.
pub fn write_report(ledger: &MetricsLedger, scope: NormScope, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in render(ledger, scope) {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn write_kernels(path: &Path, stats: &[KernelStat]) -> Result<()> {
    let mut text = String::from("task,block,layer,post,pre,mean_H,pruned_fraction\n");
    for k in stats {
        let _ = writeln!(text, "{},{},{},{},{},{},{}", k.task, k.block, k.layer, k.post, k.pre, k.mean_h, k.pruned_fraction);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
