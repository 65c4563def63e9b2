//! Dataset directories and training-batch sampling.
//!
//! A dataset directory holds `manifest.tsv` and one `<stem>.tgsl` /
//! `<stem>.tgkt` pair per sequence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;

use super::sequence::{SequenceMeta, SilhouetteSequence, SkeletonSequence};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "subject\tcondition\tview\tseq_index\tstem";

/// A frame-aligned silhouette/skeleton pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePair {
    pub silhouette: SilhouetteSequence,
    pub skeleton: SkeletonSequence,
}

impl SequencePair {
    pub fn new(skeleton: SkeletonSequence, silhouette: SilhouetteSequence) -> Result<Self> {
        if skeleton.meta != silhouette.meta {
            return Err(Error::Invalid(format!(
                "pair metadata differs: {} vs {}",
                skeleton.meta.stem(),
                silhouette.meta.stem()
            )));
        }
        if skeleton.frames() != silhouette.frames() {
            return Err(Error::Invalid(format!(
                "{}: {} skeleton frames vs {} silhouette frames",
                skeleton.meta.stem(),
                skeleton.frames(),
                silhouette.frames()
            )));
        }
        Ok(Self { silhouette, skeleton })
    }

    pub fn meta(&self) -> SequenceMeta {
        self.skeleton.meta
    }

    pub fn frames(&self) -> usize {
        self.skeleton.frames()
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            silhouette: self.silhouette.window(start, len),
            skeleton: self.skeleton.window(start, len),
        }
    }
}

/// Read-only collection of sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SequencePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.sequences.iter().map(|p| p.meta().subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Sequence indices grouped by subject.
    pub fn by_subject(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.sequences.iter().enumerate() {
            map.entry(p.meta().subject).or_default().push(i);
        }
        map
    }
}

/// Source of datasets; only the synthetic on-disk format ships.
pub trait DatasetLoader {
    fn load(&self, root: &Path) -> Result<Dataset>;
}

/// Loads the `manifest.tsv` + `.tgsl`/`.tgkt` layout.
#[derive(Debug, Clone, Copy, Default)]
pub struct TgLoader;

impl DatasetLoader for TgLoader {
    fn load(&self, root: &Path) -> Result<Dataset> {
        read_dataset(root)
    }
}

pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for pair in &dataset.sequences {
        let m = pair.meta();
        let stem = m.stem();
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            m.subject, m.condition, m.view, m.seq_index, stem
        ));
        let sil = root.join(format!("{stem}.tgsl"));
        fs::write(&sil, pair.silhouette.to_bytes()).map_err(Error::io(&sil))?;
        let ske = root.join(format!("{stem}.tgkt"));
        fs::write(&ske, pair.skeleton.to_bytes()).map_err(Error::io(&ske))?;
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(Error::io(&path))
}

pub fn read_manifest(root: &Path) -> Result<Vec<(SequenceMeta, String)>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(&path, "missing or unexpected header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: &str| Error::format(&path, format!("line {}: {msg}", n + 2));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let meta = SequenceMeta {
            subject: f[0].parse().map_err(|_| bad("bad subject"))?,
            condition: f[1].parse().map_err(|_| bad("bad condition"))?,
            view: f[2].parse().map_err(|_| bad("bad view"))?,
            seq_index: f[3].parse().map_err(|_| bad("bad seq_index"))?,
        };
        out.push((meta, f[4].to_string()));
    }
    Ok(out)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let entries = read_manifest(root)?;
    let mut sequences = Vec::with_capacity(entries.len());
    for (meta, stem) in entries {
        let read = |ext: &str| -> Result<(PathBuf, Vec<u8>)> {
            let p = root.join(format!("{stem}.{ext}"));
            let bytes = fs::read(&p).map_err(Error::io(&p))?;
            Ok((p, bytes))
        };
        let (sp, sb) = read("tgsl")?;
        let silhouette = SilhouetteSequence::from_bytes(&sb, meta, &sp)?;
        let (kp, kb) = read("tgkt")?;
        let skeleton = SkeletonSequence::from_bytes(&kb, meta, &kp)?;
        let pair = SequencePair::new(skeleton, silhouette).map_err(|e| Error::format(&kp, e.to_string()))?;
        sequences.push(pair);
    }
    Ok(Dataset { sequences })
}

/// (P subjects, Kseq sequences each, Tb frames).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub subjects: usize,
    pub sequences_per_subject: usize,
    pub frames: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            subjects: 8,
            sequences_per_subject: 16,
            frames: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub pair: SequencePair,
    pub label: u32,
}

/// Samples P distinct subjects, Kseq sequences of each and one contiguous
/// Tb-frame window per sequence, shared by both modalities.
pub fn sample_batch<R: Rng>(dataset: &Dataset, spec: BatchSpec, rng: &mut R) -> Result<Vec<BatchItem>> {
    if spec.subjects == 0 || spec.sequences_per_subject == 0 || spec.frames == 0 {
        return Err(Error::Invalid(format!("batch spec must be positive: {spec:?}")));
    }
    let groups: Vec<(u32, Vec<usize>)> = dataset.by_subject().into_iter().collect();
    if groups.len() < spec.subjects {
        return Err(Error::Invalid(format!(
            "batch needs {} subjects, dataset has {}",
            spec.subjects,
            groups.len()
        )));
    }
    let mut items = Vec::with_capacity(spec.subjects * spec.sequences_per_subject);
    for g in sample(rng, groups.len(), spec.subjects) {
        let (subject, seqs) = &groups[g];
        let picks: Vec<usize> = if seqs.len() >= spec.sequences_per_subject {
            sample(rng, seqs.len(), spec.sequences_per_subject).into_vec()
        } else {
            (0..spec.sequences_per_subject).map(|_| rng.gen_range(0..seqs.len())).collect()
        };
        for k in picks {
            let pair = &dataset.sequences[seqs[k]];
            let t = pair.frames();
            let start = if t > spec.frames { rng.gen_range(0..=t - spec.frames) } else { 0 };
            items.push(BatchItem {
                pair: pair.window(start, spec.frames),
                label: *subject,
            });
        }
    }
    Ok(items)
}
