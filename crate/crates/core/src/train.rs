//! Metric-learning training loop, loss log and resumable checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trigait_tensor::nn::NormMode;
use trigait_tensor::{sgd_step_module, Checkpoint, Module, SgdConfig};

use crate::data::synth::mix_seed;
use crate::data::{sample_batch, BatchSpec, Dataset, SequencePair};
use crate::error::{Error, Result};
use crate::model::loss::{LossReport, DEFAULT_MARGIN};
use crate::model::{prepare_input, ModelConfig, TriGait};

pub const CHECKPOINT_FILE: &str = "checkpoint.tgck";
pub const LOG_FILE: &str = "train_log.tsv";
pub const LOG_HEADER: &str = "iteration\tlr\tL_tri\tL_ce\tL\tactive_triplet_fraction";

const META_ITERATION: &str = "meta.iteration";
const META_CONFIG_HASH: &str = "meta.config_hash";
const META_SEED: &str = "meta.seed";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: BatchSpec,
    pub iterations: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// First iteration (0-based) trained at `lr_final`.
    pub lr_boundary: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub seed: u64,
    /// Log and checkpoint every this many iterations (and after the last).
    pub checkpoint_interval: usize,
}

impl TrainConfig {
    /// 60k iterations of (8, 16, 30) batches, 1e-4 stepping to 1e-5 at 30k.
    pub fn full() -> Self {
        Self {
            batch: BatchSpec::default(),
            iterations: 60_000,
            lr: 1e-4,
            lr_final: 1e-5,
            lr_boundary: 30_000,
            momentum: 0.9,
            weight_decay: 5e-4,
            margin: DEFAULT_MARGIN,
            seed: 0,
            checkpoint_interval: 1_000,
        }
    }

    /// Desk-scale schedule for the miniature model.
    pub fn miniature() -> Self {
        Self {
            batch: BatchSpec {
                subjects: 8,
                sequences_per_subject: 2,
                frames: 10,
            },
            iterations: 1_500,
            lr: 0.05,
            lr_final: 0.005,
            lr_boundary: 1_200,
            checkpoint_interval: 50,
            ..Self::full()
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_boundary {
            self.lr
        } else {
            self.lr_final
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let b = &self.batch;
        if b.subjects < 2 {
            errs.push(format!("batch needs at least 2 subjects, got {}", b.subjects));
        }
        if b.sequences_per_subject < 2 {
            errs.push(format!("batch needs at least 2 sequences per subject, got {}", b.sequences_per_subject));
        }
        if b.frames < 5 {
            errs.push(format!("batch clips need at least 5 frames, got {}", b.frames));
        }
        for (name, v) in [("lr", self.lr), ("lr_final", self.lr_final)] {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            errs.push(format!("margin must be positive, got {}", self.margin));
        }
        if self.checkpoint_interval == 0 {
            errs.push("checkpoint_interval must be positive".into());
        }
        errs
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl LogRow {
    pub fn to_tsv(&self) -> String {
        let r = &self.report;
        format!(
            "{}\t{:e}\t{}\t{}\t{}\t{}",
            self.iteration, self.lr, r.l_tri, r.l_ce, r.l, r.active_triplet_fraction
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            iteration: f[0].parse().ok()?,
            lr: num(1)?,
            report: LossReport {
                l_tri: num(2)?,
                l_ce: num(3)?,
                l: num(4)?,
                active_triplet_fraction: num(5)?,
            },
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if i == 0 && line == LOG_HEADER || line.is_empty() {
            continue;
        }
        rows.push(LogRow::parse(&line).ok_or_else(|| Error::format(path, format!("bad log line {}", i + 1)))?);
    }
    Ok(rows)
}

/// Contiguous class indices over the dataset's sorted subjects.
pub fn class_map(dataset: &Dataset) -> Vec<u32> {
    dataset.subjects()
}

fn class_of(classes: &[u32], subject: u32) -> Result<usize> {
    classes
        .binary_search(&subject)
        .map_err(|_| Error::Invalid(format!("subject {subject} has no class index")))
}

/// Stores a `u64` exactly as two 32-bit halves.
fn push_u64(ck: &mut Checkpoint, name: &str, v: u64) {
    ck.push(name, &[2], vec![(v >> 32) as f64, (v & 0xFFFF_FFFF) as f64]);
}

fn read_u64(ck: &Checkpoint, name: &str, path: &Path) -> Result<u64> {
    let rec = ck
        .get(name)
        .filter(|r| r.data.len() == 2)
        .ok_or_else(|| Error::format(path, format!("checkpoint lacks {name}")))?;
    Ok(((rec.data[0] as u64) << 32) | rec.data[1] as u64)
}

/// Model state plus the training position.
pub fn to_checkpoint(model: &TriGait, iteration: usize, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::from_module(model);
    push_u64(&mut ck, META_ITERATION, iteration as u64);
    push_u64(&mut ck, META_CONFIG_HASH, model.config.hash());
    push_u64(&mut ck, META_SEED, seed);
    ck
}

/// Completed iteration count stored in a checkpoint.
pub fn checkpoint_iteration(ck: &Checkpoint, path: &Path) -> Result<usize> {
    Ok(read_u64(ck, META_ITERATION, path)? as usize)
}

/// Builds a model for `config` and loads `path` into it, rejecting a
/// checkpoint written for another configuration.
pub fn load_model(config: &ModelConfig, path: &Path) -> Result<(TriGait, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let stored = read_u64(&ck, META_CONFIG_HASH, path)?;
    if stored != config.hash() {
        return Err(Error::ConfigMismatch {
            checkpoint: stored,
            config: config.hash(),
        });
    }
    let mut model = TriGait::new(config.clone(), 0)?;
    ck.restore(&mut model, path)?;
    Ok((model, ck))
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

/// Owns the model and dataset between iterations.
pub struct Trainer<'a> {
    pub model: TriGait,
    pub config: TrainConfig,
    dataset: &'a Dataset,
    classes: Vec<u32>,
    /// Completed iterations.
    pub iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: TriGait, dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let classes = class_map(dataset);
        if classes.len() != model.config.num_classes {
            return Err(Error::Invalid(format!(
                "dataset has {} subjects, classifier has {} classes",
                classes.len(),
                model.config.num_classes
            )));
        }
        Ok(Self {
            model,
            config,
            dataset,
            classes,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(dataset: &'a Dataset, model_config: &ModelConfig, config: TrainConfig, path: &Path) -> Result<Self> {
        let (model, ck) = load_model(model_config, path)?;
        let mut t = Self::new(model, dataset, config)?;
        t.iteration = checkpoint_iteration(&ck, path)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        to_checkpoint(&self.model, self.iteration, self.config.seed)
    }

    /// One SGD iteration on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LogRow> {
        let it = self.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, it as u64]));
        let batch = sample_batch(self.dataset, self.config.batch, &mut rng)?;
        let clips: Vec<&SequencePair> = batch.iter().map(|b| &b.pair).collect();
        let labels = batch
            .iter()
            .map(|b| class_of(&self.classes, b.label))
            .collect::<Result<Vec<_>>>()?;
        let input = prepare_input(&self.model.config, &clips)?;
        self.model.zero_grad();
        let out = self.model.forward(&input, NormMode::Train)?;
        let (loss, report) = self.model.loss(&out.embedding, &labels, self.config.margin)?;
        if !report.l.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: report.l,
            });
        }
        loss.backward()?;
        let lr = self.config.lr_at(it);
        sgd_step_module(
            &mut self.model,
            SgdConfig {
                lr,
                momentum: self.config.momentum,
                weight_decay: self.config.weight_decay,
            },
        );
        self.iteration += 1;
        Ok(LogRow {
            iteration: it,
            lr,
            report,
        })
    }

    /// Trains up to `config.iterations`, writing the log and checkpoint into
    /// `out_dir` every interval. Returns the rows produced by this call.
    pub fn run(&mut self, out_dir: &Path, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
        let log_path = out_dir.join(LOG_FILE);
        let fresh = self.iteration == 0 || !log_path.exists();
        let mut log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(Error::io(&log_path))?;
        if fresh {
            writeln!(log, "{LOG_HEADER}").map_err(Error::io(&log_path))?;
        }
        let ck_path = out_dir.join(CHECKPOINT_FILE);
        let mut rows = Vec::new();
        let mut pending = Vec::new();
        while self.iteration < self.config.iterations {
            let row = self.step()?;
            on_row(&row);
            pending.push(row);
            rows.push(row);
            if self.iteration.is_multiple_of(self.config.checkpoint_interval) || self.iteration == self.config.iterations {
                for r in pending.drain(..) {
                    writeln!(log, "{}", r.to_tsv()).map_err(Error::io(&log_path))?;
                }
                log.flush().map_err(Error::io(&log_path))?;
                save_atomic(&self.checkpoint(), &ck_path)?;
            }
        }
        Ok(rows)
    }
}

/// Checkpoint path inside a training output directory.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHECKPOINT_FILE)
}
