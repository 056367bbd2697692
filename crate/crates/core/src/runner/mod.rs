//! The continual-learning protocol: per task grow a column, evolve its
//! long-range wiring, train it, then feed back an inhibition/pruning pass onto
//! earlier columns. Every phase is evaluated, appended to the ledger and
//! checkpointed.

mod checkpoint;
mod config;
mod ledger;
mod report;

pub use checkpoint::{Checkpoint, CHECKPOINT_FILE, CHECKPOINT_MAGIC};
pub use config::{EvolutionConfig, Mode, NetConfig, PlasticityConfig, RunConfig, RunSection, TrainConfig, KEYS};
pub use ledger::{FineTuneOutcome, MetricsLedger, Phase, PhaseRecord, LEDGER_FILE};
pub use report::{render as render_report, write_kernels, write_report, SUMMARY_HEADER};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::evolution::{init_choice_matrix, no_connection_fraction, ChoiceMatrix};
use crate::plasticity::{column_hebbian, correlate_plasticity_pruning, probe_indices, probe_traces, prune_column, KernelStat};
use crate::snn::{train_step, Sgd};
use crate::tasks::{generate_suite, read_suite, Dataset, Split, SuiteConfig, Targets};
use crate::topology::{to_scalars, ColumnGraph, ColumnTrainer, SampleSet, SourceCache};
use crate::{Error, Result, Scalar};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective.cfg";
pub const KERNELS_FILE: &str = "kernels.csv";

/// Ordered (phase, task) list of a run.
pub fn protocol(mode: Mode, tasks: usize, every: usize) -> Vec<(Phase, usize)> {
    let mut out = Vec::new();
    for t in 1..=tasks {
        out.push((Phase::Grow, t));
        if t >= 2 && mode.uses_wiring() {
            out.push((Phase::Evolve, t));
        }
        out.push((Phase::Train, t));
        if t >= 2 && mode.prunes() && (t - 1) % every.max(1) == 0 {
            out.push((Phase::Prune, t));
        }
    }
    out
}

/// RNG of one (task, phase) pair. Independent of the mode, so paired runs
/// start every column from the same weights.
fn phase_rng(seed: u64, task: usize, phase: Phase, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 32) | ((phase as u64) << 24) | salt);
    rng
}

/// Uses the suite stored in `dir` if there is one, otherwise generates it.
pub fn load_or_generate_suite(dir: Option<&Path>, cfg: &SuiteConfig) -> Result<Vec<Dataset>> {
    if let Some(dir) = dir.filter(|d| d.join("manifest.csv").exists()) {
        let suite = read_suite(dir)?;
        for d in &suite {
            if d.seed != cfg.seed || d.train.len() != cfg.train || d.val.len() != cfg.val || d.test.len() != cfg.test {
                return Err(Error::InvalidConfig(format!(
                    "suite in {} (seed {}, {}/{}/{} samples) does not match suite.* settings (seed {}, {}/{}/{})",
                    dir.display(),
                    d.seed,
                    d.train.len(),
                    d.val.len(),
                    d.test.len(),
                    cfg.seed,
                    cfg.train,
                    cfg.val,
                    cfg.test
                )));
            }
        }
        return Ok(suite);
    }
    generate_suite(cfg)
}

/// Training view of a task: regression targets optionally z-scored.
#[derive(Debug, Clone)]
struct Prepared {
    train: Split,
    val: Split,
    stats: Option<(Vec<f32>, Vec<f32>)>,
}

impl Prepared {
    fn new(d: &Dataset, standardize: bool) -> Self {
        let mut p = Prepared {
            train: d.train.clone(),
            val: d.val.clone(),
            stats: None,
        };
        let Targets::Values { dim, data } = &d.train.targets else { return p };
        if !standardize || data.is_empty() {
            return p;
        }
        let dim = *dim;
        let n = (data.len() / dim) as f64;
        let mut mu = vec![0f64; dim];
        let mut var = vec![0f64; dim];
        for row in data.chunks_exact(dim) {
            for k in 0..dim {
                mu[k] += row[k] as f64 / n;
            }
        }
        for row in data.chunks_exact(dim) {
            for k in 0..dim {
                var[k] += (row[k] as f64 - mu[k]).powi(2) / n;
            }
        }
        let mu: Vec<f32> = mu.into_iter().map(|v| v as f32).collect();
        let sd: Vec<f32> = var.into_iter().map(|v| v.sqrt().max(1e-3) as f32).collect();
        for split in [&mut p.train, &mut p.val] {
            if let Targets::Values { data, .. } = &mut split.targets {
                for row in data.chunks_exact_mut(dim) {
                    for k in 0..dim {
                        row[k] = (row[k] - mu[k]) / sd[k];
                    }
                }
            }
        }
        p.stats = Some((mu, sd));
        p
    }

    fn restore(&self, out: &mut [f32]) {
        if let Some((mu, sd)) = &self.stats {
            for ((o, m), s) in out.iter_mut().zip(mu).zip(sd) {
                *o = *o * s + m;
            }
        }
    }
}

fn source_cache<S: Scalar, D: SampleSet>(graph: &ColumnGraph<S>, task: usize, data: &D) -> Result<SourceCache<S>> {
    if graph.edges_into(task).next().is_none() {
        Ok(SourceCache::empty(data.len()))
    } else {
        SourceCache::build(graph, task, data)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_epochs<S: Scalar, D: SampleSet>(
    graph: &mut ColumnGraph<S>,
    task: usize,
    data: &D,
    cache: &SourceCache<S>,
    train_adapters: bool,
    epochs: usize,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut opt = Sgd::<S>::new(cfg.train.lr, cfg.train.momentum, cfg.clip());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut last = 0.0;
    for _ in 0..epochs {
        idx.shuffle(rng);
        let mut total = 0.0;
        for batch in idx.chunks(cfg.train.batch) {
            let mut trainer = ColumnTrainer {
                graph: &mut *graph,
                task,
                data,
                cache,
                train_adapters,
            };
            total += train_step(&mut trainer, batch, &mut opt)?.as_f64() * batch.len() as f64;
        }
        last = total / idx.len().max(1) as f64;
    }
    Ok(last)
}

fn mean_loss<S: Scalar, D: SampleSet>(graph: &mut ColumnGraph<S>, task: usize, data: &D, cache: &SourceCache<S>) -> Result<f64> {
    let trainer = ColumnTrainer {
        graph,
        task,
        data,
        cache,
        train_adapters: false,
    };
    let losses = (0..data.len())
        .into_par_iter()
        .map(|i| trainer.sample_loss(i).map(|l| l.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            location: format!("validation loss of task {task}"),
        });
    }
    Ok(loss)
}

fn digest(m: &ChoiceMatrix) -> String {
    format!("{:08x}", crc32fast::hash(&serde_json::to_vec(m).expect("matrix serializes")))
}

/// Identifies the weights an evaluation of one task depends on.
type Fingerprint = Vec<(usize, u64, usize)>;

pub struct Runner<S> {
    pub config: RunConfig,
    pub suite: Vec<Dataset>,
    pub graph: ColumnGraph<S>,
    /// `matrices[t-1]`: finalized choice matrix of task t.
    pub matrices: Vec<Option<ChoiceMatrix>>,
    pub ledger: MetricsLedger,
    progress: usize,
    out_dir: Option<PathBuf>,
    prepared: Vec<Prepared>,
    eval_cache: BTreeMap<usize, (Fingerprint, f64)>,
}

impl<S: Scalar + Serialize + DeserializeOwned> Runner<S> {
    /// In-memory runner over `suite` (which must hold at least `run.tasks` tasks).
    pub fn new(config: RunConfig, suite: Vec<Dataset>) -> Result<Self> {
        config.validate()?;
        if suite.len() < config.run.tasks {
            return Err(Error::InvalidConfig(format!("suite holds {} tasks, run.tasks = {}", suite.len(), config.run.tasks)));
        }
        for (i, d) in suite.iter().enumerate() {
            if d.spec.task_id != i + 1 {
                return Err(Error::InvalidConfig(format!("suite entry {} holds task {}", i + 1, d.spec.task_id)));
            }
        }
        let mut graph = ColumnGraph::new(config.net.width_factor, config.net.spike);
        graph.gains = config.net.init;
        let prepared = suite.iter().map(|d| Prepared::new(d, config.train.standardize)).collect();
        Ok(Runner {
            matrices: vec![None; suite.len()],
            graph,
            suite,
            config,
            ledger: MetricsLedger::in_memory(),
            progress: 0,
            out_dir: None,
            prepared,
            eval_cache: BTreeMap::new(),
        })
    }

    /// Mirrors the ledger, config echo, checkpoints and reports into `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&echo, self.config.to_text()).map_err(|e| Error::io(&echo, e))?;
        let mut ledger = MetricsLedger::create(&dir.join(LEDGER_FILE))?;
        ledger.records = std::mem::take(&mut self.ledger.records);
        ledger.attach(&dir.join(LEDGER_FILE))?;
        self.ledger = ledger;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Restores the run saved in `dir`.
    pub fn resume(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::<S>::load(&dir.join(CHECKPOINT_FILE))?;
        let suite = load_or_generate_suite(Some(dir), &ck.config.suite)?;
        let mut runner = Self::from_checkpoint(ck.clone(), suite)?;
        let mut ledger = MetricsLedger::load(&dir.join(LEDGER_FILE))?;
        if ledger.len() < ck.ledger_len {
            return Err(Error::Corrupt {
                path: dir.join(LEDGER_FILE),
                offset: 0,
                msg: format!("ledger holds {} records, checkpoint expects {}", ledger.len(), ck.ledger_len),
            });
        }
        ledger.truncate(ck.ledger_len)?;
        runner.ledger = ledger;
        runner.out_dir = Some(dir.to_path_buf());
        Ok(runner)
    }

    /// In-memory runner positioned at a checkpoint; the ledger starts empty.
    pub fn from_checkpoint(ck: Checkpoint<S>, suite: Vec<Dataset>) -> Result<Self> {
        let mut runner = Self::new(ck.config, suite)?;
        runner.graph = ck.graph;
        runner.matrices = ck.matrices;
        runner.matrices.resize(runner.suite.len(), None);
        runner.progress = ck.progress;
        Ok(runner)
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            config: self.config.clone(),
            progress: self.progress,
            ledger_len: self.ledger.len(),
            matrices: self.matrices.clone(),
            graph: self.graph.clone(),
        }
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    pub fn protocol(&self) -> Vec<(Phase, usize)> {
        protocol(self.config.run.mode, self.config.run.tasks, self.config.plasticity.every)
    }

    /// Index of the next protocol phase.
    pub fn progress(&self) -> usize {
        self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.progress >= self.protocol().len()
    }

    /// Tasks whose training phase has completed.
    pub fn learned_tasks(&self) -> usize {
        self.protocol()[..self.progress].iter().filter(|(p, _)| *p == Phase::Train).count()
    }

    /// Runs the remaining protocol, calling `on_record` after every phase,
    /// then writes the reports.
    pub fn run(&mut self, on_record: &mut dyn FnMut(&PhaseRecord)) -> Result<&MetricsLedger> {
        self.run_until(usize::MAX, on_record)?;
        self.finish()?;
        Ok(&self.ledger)
    }

    /// Runs phases while the protocol index is below `stop`.
    pub fn run_until(&mut self, stop: usize, on_record: &mut dyn FnMut(&PhaseRecord)) -> Result<()> {
        while self.progress < stop.min(self.protocol().len()) {
            let rec = self.step()?;
            on_record(&rec);
        }
        Ok(())
    }

    /// Runs one protocol phase and returns its ledger record.
    pub fn step(&mut self) -> Result<PhaseRecord> {
        let (phase, task) = self.protocol()[self.progress];
        log::info!("phase {} ({phase} task {task}) starting", self.progress);
        let outcome = match phase {
            Phase::Grow => self.grow(task).map(|_| (None, Vec::new())),
            Phase::Evolve => self.evolve(task).map(|m| (Some(m), Vec::new())),
            Phase::Train => self.train(task).map(|_| (None, Vec::new())),
            Phase::Prune => self.prune(task).map(|r| (None, r)),
            Phase::FineTune => unreachable!("fine-tuning is not a protocol phase"),
        };
        let (choices, pruning) = match outcome {
            Ok(v) => v,
            Err(Error::Divergence { location }) => {
                let ck = self.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE)).filter(|p| p.exists());
                return Err(Error::PhaseDivergence {
                    phase: format!("{phase} of task {task} ({location})"),
                    checkpoint: ck.map_or_else(|| "none".to_string(), |p| p.display().to_string()),
                });
            }
            Err(e) => return Err(e),
        };
        self.progress += 1;
        let learned = self.learned_tasks();
        let mut rec = self.snapshot(phase, task, learned)?;
        rec.choices = choices;
        rec.pruning = pruning;
        let rec = self.ledger.push(rec)?.clone();
        self.save_checkpoint()?;
        Ok(rec)
    }

    fn save_checkpoint(&self) -> Result<()> {
        if let (Some(dir), true) = (&self.out_dir, self.config.run.checkpoint) {
            self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }

    /// Writes the report CSVs and the kernel table (when the run has one).
    pub fn finish(&mut self) -> Result<()> {
        let Some(dir) = self.out_dir.clone() else { return Ok(()) };
        write_report(&self.ledger, self.config.evolution.norm_scope, &dir)?;
        if self.is_finished() && self.config.run.mode.prunes() {
            write_kernels(&dir.join(KERNELS_FILE), &self.kernel_stats()?)?;
        }
        Ok(())
    }

    fn snapshot(&mut self, phase: Phase, task: usize, learned: usize) -> Result<PhaseRecord> {
        let metrics = self.evaluate_all(learned)?;
        let finalized: Vec<_> = self.matrices.iter().flatten().flat_map(|m| m.finalize_wiring()).collect();
        Ok(PhaseRecord {
            index: 0,
            phase,
            task,
            metrics,
            census: self.graph.census(),
            long_range_sparsity: no_connection_fraction(&finalized),
            choice_digests: self.matrices.iter().flatten().map(|m| (m.task, digest(m))).collect(),
            choices: None,
            pruning: Vec::new(),
            fine_tune: None,
        })
    }

    fn grow(&mut self, task: usize) -> Result<()> {
        let spec = self.suite[task - 1].spec.column_spec();
        let mut rng = phase_rng(self.config.run.seed, task, Phase::Grow, 0);
        self.graph.grow_task_column(task, self.config.net.width_factor, spec, &mut rng)
    }

    fn evolve(&mut self, task: usize) -> Result<ChoiceMatrix> {
        let cfg = &self.config;
        let ev = &cfg.evolution;
        let mut matrix = init_choice_matrix(task)?;
        let mut rng = phase_rng(cfg.run.seed, task, Phase::Evolve, 0);
        let data = &self.prepared[task - 1];
        let burst = if ev.burst_samples == 0 || ev.burst_samples >= data.train.len() {
            data.train.clone()
        } else {
            data.train.subset(&(0..ev.burst_samples).collect::<Vec<_>>())
        };
        let val = if data.val.is_empty() { &burst } else { &data.val };
        let initial = self.graph.column(task).clone();
        let train_cache = SourceCache::build(&self.graph, task, &burst)?;
        let val_cache = SourceCache::build(&self.graph, task, val)?;
        for episode in 0..ev.episodes {
            let choices = matrix.sample_wiring(&mut rng)?;
            *self.graph.column_mut(task) = initial.clone();
            self.graph.clear_edges_into(task);
            self.graph.wire_edges(&choices, &mut rng)?;
            train_epochs(&mut self.graph, task, &burst, &train_cache, true, ev.burst_epochs, cfg, &mut rng)?;
            let loss = mean_loss(&mut self.graph, task, val, &val_cache)?;
            log::debug!("task {task} episode {episode}: validation loss {loss:.5}");
            matrix.record_episode(&choices, loss)?;
            matrix.update(ev.gamma, ev.norm_scope);
        }
        *self.graph.column_mut(task) = initial;
        self.graph.clear_edges_into(task);
        let mut wire_rng = phase_rng(cfg.run.seed, task, Phase::Evolve, 1);
        self.graph.wire_edges(&matrix.finalize_wiring(), &mut wire_rng)?;
        self.matrices[task - 1] = Some(matrix.clone());
        Ok(matrix)
    }

    fn train(&mut self, task: usize) -> Result<()> {
        let data = &self.prepared[task - 1].train;
        let cache = source_cache(&self.graph, task, data)?;
        let mut rng = phase_rng(self.config.run.seed, task, Phase::Train, 0);
        let loss = train_epochs(&mut self.graph, task, data, &cache, true, self.config.train.epochs, &self.config, &mut rng)?;
        log::debug!("task {task} trained, final epoch loss {loss:.5}");
        let col = self.graph.column_mut(task);
        col.blocks.iter_mut().for_each(|b| b.updates += 1);
        col.version += 1;
        Ok(())
    }

    fn prune(&mut self, task: usize) -> Result<Vec<crate::plasticity::PruneRecord>> {
        let round = self.protocol()[..=self.progress].iter().filter(|(p, _)| *p == Phase::Prune).count();
        let settings = self.config.prune_settings();
        let mut rng = phase_rng(self.config.run.seed, task, Phase::Prune, 0);
        let mut records = Vec::new();
        for k in 1..task {
            let later: Vec<&ChoiceMatrix> = self.matrices[k..task].iter().flatten().collect();
            let seed: u64 = rng.random();
            records.extend(prune_column(&mut self.graph, k, &self.prepared[k - 1].train, &later, &settings, round, seed)?);
        }
        Ok(records)
    }

    /// Trains task `task`'s surviving weights for `epochs` more epochs and
    /// records the before/after test metric. Masks stay fixed.
    pub fn fine_tune(&mut self, task: usize, epochs: usize) -> Result<FineTuneOutcome> {
        if task == 0 || task > self.learned_tasks() {
            return Err(Error::InvalidConfig(format!("task {task} has not been learned yet")));
        }
        let before = self.evaluate(task)?;
        if epochs > 0 {
            let rounds = self.ledger.records.iter().filter(|r| r.phase == Phase::FineTune && r.task == task).count();
            let data = &self.prepared[task - 1].train;
            let cache = source_cache(&self.graph, task, data)?;
            let mut rng = phase_rng(self.config.run.seed, task, Phase::FineTune, rounds as u64);
            train_epochs(&mut self.graph, task, data, &cache, false, epochs, &self.config, &mut rng).map_err(|e| match e {
                Error::Divergence { location } => Error::PhaseDivergence {
                    phase: format!("fine_tune of task {task} ({location})"),
                    checkpoint: "none".into(),
                },
                e => e,
            })?;
            let col = self.graph.column_mut(task);
            col.blocks.iter_mut().for_each(|b| b.updates += 1);
            col.version += 1;
        }
        let after = self.evaluate(task)?;
        let outcome = FineTuneOutcome {
            task,
            epochs,
            before,
            after,
        };
        let learned = self.learned_tasks();
        let mut rec = self.snapshot(Phase::FineTune, task, learned)?;
        rec.fine_tune = Some(outcome.clone());
        self.ledger.push(rec)?;
        self.save_checkpoint()?;
        Ok(outcome)
    }

    fn fingerprint(&self, task: usize) -> Fingerprint {
        self.graph
            .dependencies(task)
            .into_iter()
            .map(|d| (d, self.graph.column(d).version, self.graph.edges_into(d).count()))
            .collect()
    }

    /// Test metric of `task` through its own column and frozen inputs.
    pub fn evaluate(&mut self, task: usize) -> Result<f64> {
        let fp = self.fingerprint(task);
        if let Some((cached, m)) = self.eval_cache.get(&task) {
            if *cached == fp {
                return Ok(*m);
            }
        }
        let d = &self.suite[task - 1];
        let prep = &self.prepared[task - 1];
        let graph = &self.graph;
        let outputs = (0..d.test.len())
            .into_par_iter()
            .map(|i| {
                let out = graph.forward(task, &to_scalars::<S>(d.test.image(i)), &to_scalars::<S>(d.test.state(i)))?;
                let mut out: Vec<f32> = out.iter().map(|v| v.as_f64() as f32).collect();
                prep.restore(&mut out);
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = d.spec.evaluate(&outputs, &d.test);
        self.eval_cache.insert(task, (fp, m));
        Ok(m)
    }

    /// Metrics of tasks `1..=tasks`.
    pub fn evaluate_all(&mut self, tasks: usize) -> Result<BTreeMap<usize, f64>> {
        (1..=tasks).map(|t| self.evaluate(t).map(|m| (t, m))).collect()
    }

    /// Per-kernel mean Hebbian value and pruned fraction of every column
    /// that went through pruning, measured on the current network.
    pub fn kernel_stats(&self) -> Result<Vec<KernelStat>> {
        let settings = self.config.prune_settings();
        let last = self.learned_tasks();
        let mut out = Vec::new();
        for k in 1..last {
            let data = &self.prepared[k - 1].train;
            let idx = probe_indices(data.len(), settings.probe_size, self.config.run.seed ^ k as u64);
            let traces = probe_traces(&self.graph, k, data, &idx, settings.alpha)?;
            let hebb = column_hebbian(&traces, settings.scope);
            out.extend(correlate_plasticity_pruning(&self.graph, k, &hebb));
        }
        Ok(out)
    }
}
