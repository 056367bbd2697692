use serde::{Deserialize, Serialize};

use super::ColumnGraph;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCensus {
    pub task: usize,
    pub block: usize,
    pub total_weights: usize,
    pub active_weights: usize,
    pub sparsity: f64,
}

/// Snapshot of local (in-block) and long-range parameter counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub blocks: Vec<BlockCensus>,
    pub total_local: usize,
    pub active_local: usize,
    pub long_range_edges: usize,
    pub long_range_params: usize,
}

impl Census {
    pub fn of<S: Scalar>(graph: &ColumnGraph<S>) -> Self {
        let blocks: Vec<BlockCensus> = graph
            .columns
            .iter()
            .flat_map(|c| c.blocks.iter())
            .map(|b| {
                let total = b.total_weights();
                let active = b.active_weights();
                BlockCensus {
                    task: b.task,
                    block: b.index,
                    total_weights: total,
                    active_weights: active,
                    sparsity: if total == 0 { 0.0 } else { 1.0 - active as f64 / total as f64 },
                }
            })
            .collect();
        Census {
            total_local: blocks.iter().map(|b| b.total_weights).sum(),
            active_local: blocks.iter().map(|b| b.active_weights).sum(),
            long_range_edges: graph.edges.len(),
            long_range_params: graph.long_range_params(),
            blocks,
        }
    }

    pub fn task_active(&self, task: usize) -> usize {
        self.blocks.iter().filter(|b| b.task == task).map(|b| b.active_weights).sum()
    }

    pub fn task_total(&self, task: usize) -> usize {
        self.blocks.iter().filter(|b| b.task == task).map(|b| b.total_weights).sum()
    }

    pub fn get(&self, task: usize, block: usize) -> Option<&BlockCensus> {
        self.blocks.iter().find(|b| b.task == task && b.block == block)
    }
}
