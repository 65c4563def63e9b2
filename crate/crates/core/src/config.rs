//! Line-oriented run configuration: `key = value`, `#` starts a comment.
//!
//! Values are kept as text until [`RunConfig::resolve`], which validates
//! every key at once and reports all problems together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::BatchSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PartitionMode};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "TRIGAIT_SEED";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed (default: $TRIGAIT_SEED or 0)"),
    ("threads", "worker threads for synthesis and evaluation (1 = deterministic order)"),
    ("miniature", "desk-scale model and schedule (true|false)"),
    ("partition_mode", "motion | uniform"),
    ("input_size", "silhouette side after downsampling"),
    ("stem_channels", "four comma-separated 3-D conv widths"),
    ("parts", "horizontal strips of local spatial attention"),
    ("reduction", "spatial attention channel reduction r"),
    ("dilations", "three comma-separated temporal dilations"),
    ("gem_p", "initial GeM exponent"),
    ("skeleton_channels", "four comma-separated JSA-TC widths"),
    ("heads", "joint self-attention heads"),
    ("fusion_heads", "fusion transformer heads"),
    ("embed_dim", "embedding channels per part"),
    ("batch_subjects", "subjects per batch P"),
    ("batch_sequences", "sequences per subject K"),
    ("batch_frames", "frames per clip"),
    ("iterations", "total training iterations"),
    ("lr", "initial learning rate"),
    ("lr_final", "learning rate after the boundary"),
    ("lr_boundary", "first iteration at lr_final"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "SGD weight decay"),
    ("margin", "triplet margin"),
    ("checkpoint_interval", "iterations between log flushes and checkpoints"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Fully validated settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub seed: u64,
    pub threads: usize,
    pub miniature: bool,
    /// Model shape with `num_classes` left at 0 until the dataset is known.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Resolved {
    pub fn model_for(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            ..self.model.clone()
        }
    }
}

fn parse_list<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected {N} values, got {}", v.len()))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{s:?} is not a boolean")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        errs.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => errs.push(format!("line {}: expected `key = value`", i + 1)),
            }
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(errs) => Error::Config(errs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    /// Sets a key, rejecting names outside [`KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(format!("unknown key {key:?}"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Values from `other` win.
    pub fn merge(&mut self, other: &RunConfig) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Validates every value and applies them over the full or miniature
    /// presets. `env_seed` is the fallback when `seed` is unset.
    pub fn resolve(&self, env_seed: Option<&str>) -> Result<Resolved> {
        let mut errs = Vec::new();
        fn take<T: FromStr>(cfg: &RunConfig, errs: &mut Vec<String>, key: &str) -> Option<T>
        where
            T::Err: std::fmt::Display,
        {
            let v = cfg.get(key)?;
            v.parse::<T>().map_err(|e| errs.push(format!("{key} = {v}: {e}"))).ok()
        }
        fn take_with<T>(
            cfg: &RunConfig,
            errs: &mut Vec<String>,
            key: &str,
            f: impl Fn(&str) -> std::result::Result<T, String>,
        ) -> Option<T> {
            let v = cfg.get(key)?;
            f(v).map_err(|e| errs.push(format!("{key} = {v}: {e}"))).ok()
        }

        let miniature = take_with(self, &mut errs, "miniature", parse_bool).unwrap_or(false);
        let seed = match self.get("seed") {
            Some(_) => take::<u64>(self, &mut errs, "seed"),
            None => match env_seed {
                Some(v) => v
                    .parse::<u64>()
                    .map_err(|e| errs.push(format!("{SEED_ENV}={v}: {e}")))
                    .ok(),
                None => Some(0),
            },
        }
        .unwrap_or(0);
        let threads = take::<usize>(self, &mut errs, "threads").unwrap_or(1);
        if threads == 0 {
            errs.push("threads must be at least 1".into());
        }

        let mut model = if miniature {
            ModelConfig::miniature(0)
        } else {
            ModelConfig::full(0)
        };
        if let Some(m) = take_with(self, &mut errs, "partition_mode", |s| {
            PartitionMode::from_str(s).map_err(|e| e.to_string())
        }) {
            model.partition = m;
        }
        macro_rules! field {
            ($target:expr, $key:literal) => {
                if let Some(v) = take(self, &mut errs, $key) {
                    $target = v;
                }
            };
            ($target:expr, $key:literal, $f:expr) => {
                if let Some(v) = take_with(self, &mut errs, $key, $f) {
                    $target = v;
                }
            };
        }
        field!(model.input_size, "input_size");
        field!(model.stem_channels, "stem_channels", parse_list::<4>);
        field!(model.parts, "parts");
        field!(model.reduction, "reduction");
        field!(model.dilations, "dilations", parse_list::<3>);
        field!(model.gem_p_init, "gem_p");
        field!(model.skeleton_channels, "skeleton_channels", parse_list::<4>);
        field!(model.heads, "heads");
        field!(model.fusion_heads, "fusion_heads");
        field!(model.embed_dim, "embed_dim");
        // The class count is unknown here; validate with a placeholder.
        errs.extend(ModelConfig { num_classes: 2, ..model.clone() }.validate());

        let mut train = if miniature {
            TrainConfig::miniature()
        } else {
            TrainConfig::full()
        };
        let mut batch: BatchSpec = train.batch;
        field!(batch.subjects, "batch_subjects");
        field!(batch.sequences_per_subject, "batch_sequences");
        field!(batch.frames, "batch_frames");
        train.batch = batch;
        field!(train.iterations, "iterations");
        field!(train.lr, "lr");
        field!(train.lr_final, "lr_final");
        field!(train.lr_boundary, "lr_boundary");
        field!(train.momentum, "momentum");
        field!(train.weight_decay, "weight_decay");
        field!(train.margin, "margin");
        field!(train.checkpoint_interval, "checkpoint_interval");
        train.seed = seed;
        errs.extend(train.validate());

        if errs.is_empty() {
            Ok(Resolved {
                seed,
                threads,
                miniature,
                model,
                train,
            })
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Default output locations under a run directory.
pub fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("report.tsv"), out.join("report.md"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_presets() {
        let r = RunConfig::default().resolve(None).unwrap();
        assert_eq!(r.seed, 0);
        assert_eq!(r.model, ModelConfig::full(0));
        assert_eq!(r.train.batch, BatchSpec::default());
        assert_eq!(r.train.iterations, 60_000);
        assert_eq!((r.train.lr, r.train.lr_final, r.train.lr_boundary), (1e-4, 1e-5, 30_000));
        assert_eq!(r.train.margin, 0.2);
        let m = RunConfig::parse("miniature = true").unwrap().resolve(None).unwrap();
        assert_eq!(m.model, ModelConfig::miniature(0));
    }

    #[test]
    fn parses_comments_and_lists() {
        let text = "# header\nseed = 7  # trailing\n\nstem_channels = 4, 8, 8, 8\npartition_mode = uniform\nminiature = true\nparts = 2\nreduction = 2\n";
        let r = RunConfig::parse(text).unwrap().resolve(None).unwrap();
        assert_eq!(r.seed, 7);
        assert_eq!(r.model.stem_channels, [4, 8, 8, 8]);
        assert_eq!(r.model.partition, PartitionMode::Uniform);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_all_reported() {
        let err = RunConfig::parse("colour = red\nnonsense\nlr = 0.1\nsize = 3").unwrap_err();
        match err {
            Error::Config(errs) => {
                assert_eq!(errs.len(), 3, "{errs:?}");
                assert!(errs[0].contains("line 1") && errs[0].contains("colour"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn every_invalid_value_is_listed() {
        let text = "lr = fast\nmargin = -1\nstem_channels = 1,2\nthreads = 0\npartition_mode = diagonal";
        let err = RunConfig::parse(text).unwrap().resolve(None).unwrap_err();
        let Error::Config(errs) = err else { panic!() };
        assert_eq!(errs.len(), 5, "{errs:?}");
    }

    #[test]
    fn seed_falls_back_to_the_environment() {
        assert_eq!(RunConfig::default().resolve(Some("42")).unwrap().seed, 42);
        let explicit = RunConfig::parse("seed = 3").unwrap();
        assert_eq!(explicit.resolve(Some("42")).unwrap().seed, 3);
        assert!(RunConfig::default().resolve(Some("x")).is_err());
    }

    #[test]
    fn later_values_override() {
        let mut file = RunConfig::parse("seed = 1\nlr = 0.5").unwrap();
        let mut cli = RunConfig::default();
        cli.set("seed", "9").unwrap();
        file.merge(&cli);
        let r = file.resolve(None).unwrap();
        assert_eq!((r.seed, r.train.lr), (9, 0.5));
        assert_eq!(RunConfig::parse(&file.to_text()).unwrap(), file);
    }
}
