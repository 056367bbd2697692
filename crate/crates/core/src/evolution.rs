//! Evolutionary controller for long-range wiring.
//!
//! Each (destination block, earlier task) pair of a new column owns a
//! six-way probability vector: three "no connection" slots and one slot per
//! source block 2..4. Episodes sample a wiring, train briefly and record the
//! loss; probabilities then move toward options that were picked rarely but
//! performed well, and away from options picked often that performed badly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::topology::{decode_option, Choice, BLOCKS, OPTIONS};
use crate::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.5;

/// Performance assigned to an option without any recorded loss.
pub const UNINFORMED_SCORE: f64 = 0.5;

/// Which recorded losses the 0-1 normalization of an option's loss spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormScope {
    /// The option's own records.
    Option,
    /// All records of the option's row.
    Row,
    /// All records of the task's matrix.
    Task,
}

impl std::str::FromStr for NormScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "option" => Ok(NormScope::Option),
            "row" => Ok(NormScope::Row),
            "task" => Ok(NormScope::Task),
            other => Err(format!("expected option|row|task, got `{other}`")),
        }
    }
}

impl std::fmt::Display for NormScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormScope::Option => "option",
            NormScope::Row => "row",
            NormScope::Task => "task",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptionHistory {
    /// Times this option was sampled.
    pub h_n: u32,
    pub losses: Vec<f64>,
}

impl OptionHistory {
    fn mean_loss(&self) -> Option<f64> {
        (!self.losses.is_empty()).then(|| self.losses.iter().sum::<f64>() / self.losses.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRow {
    pub dst_block: usize,
    pub src_task: usize,
    pub p: [f64; OPTIONS],
    pub history: [OptionHistory; OPTIONS],
}

impl ChoiceRow {
    fn uniform(dst_block: usize, src_task: usize) -> Self {
        ChoiceRow {
            dst_block,
            src_task,
            p: [1.0 / OPTIONS as f64; OPTIONS],
            history: Default::default(),
        }
    }

    pub fn counts(&self) -> [f64; OPTIONS] {
        self.history.clone().map(|h| h.h_n as f64)
    }

    fn loss_range(&self) -> Option<(f64, f64)> {
        min_max(self.history.iter().flat_map(|h| h.losses.iter().copied()))
    }

    /// h_l per option under `scope`; `task_range` is used for task scope.
    pub fn performance(&self, scope: NormScope, task_range: Option<(f64, f64)>) -> [f64; OPTIONS] {
        let row_range = self.loss_range();
        std::array::from_fn(|o| {
            let h = &self.history[o];
            let Some(mean) = h.mean_loss() else { return UNINFORMED_SCORE };
            let range = match scope {
                NormScope::Option => min_max(h.losses.iter().copied()),
                NormScope::Row => row_range,
                NormScope::Task => task_range,
            };
            let (lo, hi) = range.unwrap_or((mean, mean));
            performance_score(mean, lo, hi)
        })
    }

    fn check(&self) -> Result<()> {
        let sum: f64 = self.p.iter().sum();
        if self.p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Controller(format!(
                "row (block {}, task {}) is not a probability vector: {:?}",
                self.dst_block, self.src_task, self.p
            )));
        }
        Ok(())
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    it.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// `1 - Normalize01(loss)` within `[lo, hi]`; a degenerate window scores 0.5.
pub fn performance_score(loss: f64, lo: f64, hi: f64) -> f64 {
    if hi - lo <= 0.0 {
        return 0.5;
    }
    (1.0 - (loss - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// All connection-probability rows of task `task`: `3 * (task - 1)` rows,
/// ordered by destination block then source task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceMatrix {
    pub task: usize,
    pub rows: Vec<ChoiceRow>,
    pub episodes: usize,
}

pub fn init_choice_matrix(task: usize) -> Result<ChoiceMatrix> {
    if task < 2 {
        return Err(Error::Controller(format!("task {task} has no earlier tasks to connect to")));
    }
    let rows = (2..=BLOCKS)
        .flat_map(|b| (1..task).map(move |k| ChoiceRow::uniform(b, k)))
        .collect();
    Ok(ChoiceMatrix { task, rows, episodes: 0 })
}

/// Antisymmetric pairwise difference `d[i][j] = v[i] - v[j]`.
pub fn pairwise_diff(v: &[f64; OPTIONS]) -> [[f64; OPTIONS]; OPTIONS] {
    std::array::from_fn(|i| std::array::from_fn(|j| v[i] - v[j]))
}

/// Opponent counts `(dp+, dp-)` per option.
pub fn dp_counts(h_n: &[f64; OPTIONS], h_l: &[f64; OPTIONS]) -> ([u32; OPTIONS], [u32; OPTIONS]) {
    let dn = pairwise_diff(h_n);
    let dl = pairwise_diff(h_l);
    let mut plus = [0u32; OPTIONS];
    let mut minus = [0u32; OPTIONS];
    for i in 0..OPTIONS {
        for j in 0..OPTIONS {
            if dn[i][j] < 0.0 && dl[i][j] > 0.0 {
                plus[i] += 1;
            }
            if dn[i][j] > 0.0 && dl[i][j] < 0.0 {
                minus[i] += 1;
            }
        }
    }
    (plus, minus)
}

pub fn softmax(z: &[f64; OPTIONS]) -> [f64; OPTIONS] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - max).exp());
    let sum: f64 = e.iter().sum();
    e.map(|v| v / sum)
}

/// `p <- softmax(p + gamma * (dp+ - dp-))`.
pub fn update_probabilities(p: &[f64; OPTIONS], h_n: &[f64; OPTIONS], h_l: &[f64; OPTIONS], gamma: f64) -> [f64; OPTIONS] {
    let (plus, minus) = dp_counts(h_n, h_l);
    let z: [f64; OPTIONS] = std::array::from_fn(|i| p[i] + gamma * (plus[i] as f64 - minus[i] as f64));
    softmax(&z)
}

impl ChoiceMatrix {
    pub fn row(&self, dst_block: usize, src_task: usize) -> Option<&ChoiceRow> {
        self.rows.iter().find(|r| r.dst_block == dst_block && r.src_task == src_task)
    }

    pub fn row_mut(&mut self, dst_block: usize, src_task: usize) -> Option<&mut ChoiceRow> {
        self.rows.iter_mut().find(|r| r.dst_block == dst_block && r.src_task == src_task)
    }

    /// One categorical draw per row.
    pub fn sample_wiring<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Choice>> {
        self.rows
            .iter()
            .map(|row| {
                row.check()?;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut option = OPTIONS - 1;
                for (o, &p) in row.p.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        option = o;
                        break;
                    }
                }
                Ok(Choice {
                    dst_block: row.dst_block,
                    src_task: row.src_task,
                    option,
                })
            })
            .collect()
    }

    /// Counts the sampled options and stores the episode loss against them.
    pub fn record_episode(&mut self, choices: &[Choice], loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Controller(format!("episode loss {loss} is not finite")));
        }
        for c in choices {
            let row = self
                .row_mut(c.dst_block, c.src_task)
                .ok_or_else(|| Error::Controller(format!("no row for block {} / task {}", c.dst_block, c.src_task)))?;
            let h = &mut row.history[c.option];
            h.h_n += 1;
            h.losses.push(loss);
        }
        self.episodes += 1;
        Ok(())
    }

    pub fn performance(&self, row: &ChoiceRow, scope: NormScope) -> [f64; OPTIONS] {
        let task_range = min_max(self.rows.iter().flat_map(|r| r.history.iter().flat_map(|h| h.losses.iter().copied())));
        row.performance(scope, task_range)
    }

    /// Applies the probability update to every row independently.
    pub fn update(&mut self, gamma: f64, scope: NormScope) {
        let h_l: Vec<[f64; OPTIONS]> = self.rows.iter().map(|r| self.performance(r, scope)).collect();
        for (row, h_l) in self.rows.iter_mut().zip(h_l) {
            row.p = update_probabilities(&row.p, &row.counts(), &h_l, gamma);
        }
    }

    /// Argmax option per row, ties to the lowest index.
    pub fn finalize_wiring(&self) -> Vec<Choice> {
        self.rows
            .iter()
            .map(|row| {
                let mut best = 0;
                for o in 1..OPTIONS {
                    if row.p[o] > row.p[best] {
                        best = o;
                    }
                }
                Choice {
                    dst_block: row.dst_block,
                    src_task: row.src_task,
                    option: best,
                }
            })
            .collect()
    }
}

/// Fraction of choices that decode to "no connection".
pub fn no_connection_fraction(choices: &[Choice]) -> f64 {
    if choices.is_empty() {
        return 0.0;
    }
    choices.iter().filter(|c| decode_option(c.option).is_none()).count() as f64 / choices.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes() {
        let m = init_choice_matrix(2).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert!(m.rows.iter().all(|r| r.p == [1.0 / 6.0; 6]));
        assert_eq!(init_choice_matrix(4).unwrap().rows.len(), 9);
        assert!(init_choice_matrix(1).is_err());
        let p = m.rows[0].p;
        assert!((p[..3].iter().sum::<f64>() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn point_masses_sample_deterministically() {
        let mut m = init_choice_matrix(2).unwrap();
        m.rows[0].p = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        m.rows[1].p = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let w = m.sample_wiring(&mut rng).unwrap();
            assert_eq!(decode_option(w[0].option), None);
            assert_eq!(decode_option(w[1].option), Some(2));
        }
    }

    #[test]
    fn degenerate_row_is_a_controller_error() {
        let mut m = init_choice_matrix(2).unwrap();
        m.rows[2].p[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(m.sample_wiring(&mut rng), Err(Error::Controller(_))));
    }

    #[test]
    fn record_episode_counts_and_scores() {
        let mut m = init_choice_matrix(2).unwrap();
        let pick = |option| vec![Choice { dst_block: 2, src_task: 1, option }];
        m.record_episode(&pick(4), 2.0).unwrap();
        let row = m.row(2, 1).unwrap().clone();
        assert_eq!(row.history[4].h_n, 1);
        assert_eq!(m.performance(&row, NormScope::Option)[4], 0.5);
        assert_eq!(row.history[0].h_n, 0);
        assert_eq!(m.row(3, 1).unwrap().history.iter().map(|h| h.h_n).sum::<u32>(), 0);

        m.record_episode(&pick(1), 1.0).unwrap();
        m.record_episode(&pick(4), 3.0).unwrap();
        let row = m.row(2, 1).unwrap().clone();
        // {1.0, 3.0}: min 1, max 3
        assert_eq!(performance_score(1.0, 1.0, 3.0), 1.0);
        assert_eq!(performance_score(3.0, 1.0, 3.0), 0.0);
        let row_scope = m.performance(&row, NormScope::Row);
        assert_eq!(row_scope[1], 1.0);
        assert_eq!(row_scope[4], 0.25); // mean 2.5 within [1, 3]
        assert_eq!(row_scope[0], UNINFORMED_SCORE);
    }

    #[test]
    fn no_information_update_is_softmax() {
        let p = [0.1, 0.2, 0.3, 0.2, 0.1, 0.1];
        let out = update_probabilities(&p, &[2.0; 6], &[0.4; 6], 0.5);
        assert_eq!(out, softmax(&p));
    }

    #[test]
    fn rare_good_option_gains_over_frequent_bad() {
        let p = [1.0 / 6.0; 6];
        let mut h_n = [3.0; 6];
        let mut h_l = [0.5; 6];
        h_n[0] = 1.0;
        h_l[0] = 0.9;
        h_n[1] = 5.0;
        h_l[1] = 0.2;
        let (plus, minus) = dp_counts(&h_n, &h_l);
        assert!(plus[0] >= 1 && minus[1] >= 1);
        let out = update_probabilities(&p, &h_n, &h_l, DEFAULT_GAMMA);
        assert!(out[0] / out[1] > p[0] / p[1]);
    }

    #[test]
    fn finalize_picks_argmax_with_low_index_ties() {
        let mut m = init_choice_matrix(2).unwrap();
        m.rows[0].p = [0.1, 0.1, 0.1, 0.4, 0.2, 0.1];
        m.rows[1].p = [0.1, 0.3, 0.1, 0.1, 0.3, 0.1];
        let w = m.finalize_wiring();
        assert_eq!(w[0].option, 3);
        assert_eq!(w[1].option, 1);
        assert_eq!(w[2].option, 0);
    }

    fn history() -> impl Strategy<Value = ([f64; 6], [f64; 6])> {
        (
            prop::array::uniform6(0u32..6).prop_map(|a| a.map(f64::from)),
            prop::array::uniform6(0u32..5).prop_map(|a| a.map(|v| v as f64 / 4.0)),
        )
    }

    proptest! {
        #[test]
        fn update_stays_on_simplex((h_n, h_l) in history(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: [f64; 6] = std::array::from_fn(|_| rng.random::<f64>() + 1e-3);
            let sum: f64 = raw.iter().sum();
            let p = raw.map(|v| v / sum);
            let out = update_probabilities(&p, &h_n, &h_l, DEFAULT_GAMMA);
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn differences_are_antisymmetric((h_n, h_l) in history()) {
            for d in [pairwise_diff(&h_n), pairwise_diff(&h_l)] {
                for i in 0..6 {
                    for j in 0..6 {
                        prop_assert_eq!(d[i][j], -d[j][i]);
                    }
                }
            }
        }

        #[test]
        fn gain_and_loss_against_one_opponent_exclude_each_other((h_n, h_l) in history()) {
            let dn = pairwise_diff(&h_n);
            let dl = pairwise_diff(&h_l);
            for i in 0..6 {
                for j in 0..6 {
                    let gain = dn[i][j] < 0.0 && dl[i][j] > 0.0;
                    let loss = dn[i][j] > 0.0 && dl[i][j] < 0.0;
                    prop_assert!(!(gain && loss));
                }
            }
        }

        #[test]
        fn raising_score_of_least_used_option_never_hurts((mut h_n, h_l) in history(), opt in 0usize..6, bump in 0.0f64..1.0) {
            let min = h_n.iter().copied().fold(f64::INFINITY, f64::min);
            h_n[opt] = min;
            let p = [1.0 / 6.0; 6];
            let before = update_probabilities(&p, &h_n, &h_l, DEFAULT_GAMMA)[opt];
            let mut better = h_l;
            better[opt] = (h_l[opt] + bump).min(1.0);
            let after = update_probabilities(&p, &h_n, &better, DEFAULT_GAMMA)[opt];
            prop_assert!(after >= before - 1e-15);
        }
    }
}
