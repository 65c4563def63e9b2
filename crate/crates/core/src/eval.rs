//! Gallery/probe rank-1 protocol and its TSV and markdown reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use trigait_tensor::nn::NormMode;
use trigait_tensor::no_grad;

use crate::data::{Condition, Dataset, SequenceMeta};
use crate::error::{Error, Result};
use crate::model::{prepare_input, TriGait};

/// NM sequences with an index up to this form the gallery.
pub const GALLERY_NM_SEQUENCES: u32 = 4;

/// One sequence embedding, `dim × parts` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub meta: SequenceMeta,
    pub dim: usize,
    pub parts: usize,
    pub values: Vec<f64>,
}

impl Embedding {
    /// Sum over parts of the Euclidean distance between part vectors.
    pub fn distance(&self, other: &Embedding) -> f64 {
        debug_assert_eq!((self.dim, self.parts), (other.dim, other.parts));
        let mut sq = vec![0.0; self.parts];
        for d in 0..self.dim {
            let row = d * self.parts;
            for (p, acc) in sq.iter_mut().enumerate() {
                let diff = self.values[row + p] - other.values[row + p];
                *acc += diff * diff;
            }
        }
        sq.iter().map(|v| v.sqrt()).sum()
    }
}

/// Indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSplit {
    pub gallery: Vec<usize>,
    pub probes: Vec<usize>,
}

pub fn is_gallery(meta: &SequenceMeta) -> bool {
    meta.condition == Condition::Nm && meta.seq_index <= GALLERY_NM_SEQUENCES
}

/// Gallery: the first four NM sequences per subject and view. Probes: the rest.
pub fn split(metas: &[SequenceMeta]) -> EvalSplit {
    let (gallery, probes) = (0..metas.len()).partition(|&i| is_gallery(&metas[i]));
    EvalSplit { gallery, probes }
}

/// Embeds every sequence over all its frames in eval mode, `threads` at a
/// time. The result does not depend on `threads`.
pub fn embed_all(model: &TriGait, dataset: &Dataset, threads: usize) -> Result<Vec<Embedding>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        dataset
            .sequences
            .par_iter()
            .map(|pair| {
                no_grad(|| {
                    let input = prepare_input(&model.config, &[pair])?;
                    let out = model.forward(&input, NormMode::Eval)?;
                    let s = out.embedding.shape();
                    Ok(Embedding {
                        meta: pair.meta(),
                        dim: s[1],
                        parts: s[2],
                        values: out.embedding.to_vec(),
                    })
                })
            })
            .collect()
    })
}

/// Rank-1 accuracy grid: `cells[condition][probe_view][gallery_view]`,
/// `None` where no probe or no gallery entry exists.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub conditions: Vec<Condition>,
    pub views: Vec<u32>,
    pub cells: Vec<Vec<Vec<Option<f64>>>>,
    /// Means over identical-view cells only. Used when the probes are the
    /// gallery itself, where cross-view cells say nothing about matching.
    pub same_view: bool,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    fn counted(&self, p: usize, g: usize) -> bool {
        (p == g) == self.same_view
    }

    /// Mean over gallery views other than the probe view.
    pub fn view_mean(&self, c: usize, probe_view: usize) -> Option<f64> {
        mean(
            self.cells[c][probe_view]
                .iter()
                .enumerate()
                .filter(|&(g, _)| self.counted(probe_view, g))
                .filter_map(|(_, v)| *v),
        )
    }

    /// Mean over all off-diagonal cells of a condition.
    pub fn condition_mean(&self, c: usize) -> Option<f64> {
        mean(
            (0..self.views.len())
                .flat_map(|p| (0..self.views.len()).map(move |g| (p, g)))
                .filter(|&(p, g)| self.counted(p, g))
                .filter_map(|(p, g)| self.cells[c][p][g]),
        )
    }

    /// Mean of the condition means.
    pub fn grand_mean(&self) -> Option<f64> {
        mean((0..self.conditions.len()).filter_map(|c| self.condition_mean(c)))
    }

    /// Number of cells that enter a condition mean.
    pub fn counted_cells(&self, c: usize) -> usize {
        let n = self.views.len();
        (0..n * n).filter(|&i| self.counted(i / n, i % n) && self.cells[c][i / n][i % n].is_some()).count()
    }
}

/// Nearest gallery entry of `probe` among `candidates`, lowest index on ties.
fn nearest<'a>(probe: &Embedding, candidates: impl Iterator<Item = &'a Embedding>) -> Option<&'a Embedding> {
    let mut best: Option<(f64, &Embedding)> = None;
    for g in candidates {
        let d = probe.distance(g);
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, g));
        }
    }
    best.map(|(_, g)| g)
}

/// Scores every probe against the gallery restricted to each view.
pub fn rank1(gallery: &[Embedding], probes: &[Embedding]) -> EvalReport {
    let mut views: Vec<u32> = gallery.iter().chain(probes).map(|e| e.meta.view).collect();
    views.sort_unstable();
    views.dedup();
    let conditions: Vec<Condition> = Condition::ALL
        .into_iter()
        .filter(|c| probes.iter().any(|p| p.meta.condition == *c))
        .collect();
    let by_view: BTreeMap<u32, Vec<&Embedding>> = views
        .iter()
        .map(|&v| (v, gallery.iter().filter(|g| g.meta.view == v).collect()))
        .collect();
    let n = views.len();
    let mut hits = vec![vec![vec![(0usize, 0usize); n]; n]; conditions.len()];
    let view_index = |v: u32| views.binary_search(&v).expect("view collected above");
    let scored: Vec<(usize, usize, Vec<Option<bool>>)> = probes
        .par_iter()
        .map(|p| {
            let c = conditions.iter().position(|c| *c == p.meta.condition).expect("condition collected above");
            let row = views
                .iter()
                .map(|v| nearest(p, by_view[v].iter().copied()).map(|g| g.meta.subject == p.meta.subject))
                .collect();
            (c, view_index(p.meta.view), row)
        })
        .collect();
    for (c, pv, row) in scored {
        for (gv, hit) in row.into_iter().enumerate() {
            if let Some(hit) = hit {
                let cell = &mut hits[c][pv][gv];
                cell.0 += hit as usize;
                cell.1 += 1;
            }
        }
    }
    let cells = hits
        .into_iter()
        .map(|grid| {
            grid.into_iter()
                .map(|row| row.into_iter().map(|(h, t)| (t > 0).then(|| h as f64 / t as f64)).collect())
                .collect()
        })
        .collect();
    EvalReport {
        conditions,
        views,
        cells,
        same_view: false,
    }
}

/// Splits embeddings by the gallery rule and scores them.
pub fn evaluate(embeddings: &[Embedding]) -> EvalReport {
    let metas: Vec<SequenceMeta> = embeddings.iter().map(|e| e.meta).collect();
    let s = split(&metas);
    let pick = |idx: &[usize]| idx.iter().map(|&i| embeddings[i].clone()).collect::<Vec<_>>();
    rank1(&pick(&s.gallery), &pick(&s.probes))
}

/// Sanity mode: the gallery is scored against itself over identical views.
pub fn evaluate_gallery_as_probes(embeddings: &[Embedding]) -> EvalReport {
    let gallery: Vec<Embedding> = embeddings.iter().filter(|e| is_gallery(&e.meta)).cloned().collect();
    EvalReport {
        same_view: true,
        ..rank1(&gallery, &gallery)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| v.to_string())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

/// Tab-separated report: one `cell` line per grid entry, then the derived
/// view, condition and grand means. Values are fractions in [0, 1].
pub fn to_tsv(report: &EvalReport) -> String {
    let mut s = String::from("kind\tcondition\tprobe_view\tgallery_view\taccuracy\n");
    let mode = if report.same_view { "same_view" } else { "cross_view" };
    let _ = writeln!(s, "mode\t-\t-\t-\t{mode}");
    for (c, cond) in report.conditions.iter().enumerate() {
        for (p, pv) in report.views.iter().enumerate() {
            for (g, gv) in report.views.iter().enumerate() {
                let _ = writeln!(s, "cell\t{cond}\t{pv}\t{gv}\t{}", fmt_opt(report.cells[c][p][g]));
            }
        }
    }
    for (c, cond) in report.conditions.iter().enumerate() {
        for (p, pv) in report.views.iter().enumerate() {
            let _ = writeln!(s, "view_mean\t{cond}\t{pv}\t-\t{}", fmt_opt(report.view_mean(c, p)));
        }
        let _ = writeln!(s, "condition_mean\t{cond}\t-\t-\t{}", fmt_opt(report.condition_mean(c)));
    }
    let _ = writeln!(s, "grand_mean\t-\t-\t-\t{}", fmt_opt(report.grand_mean()));
    s
}

/// Rebuilds a report from the `cell` lines of [`to_tsv`] output.
pub fn parse_tsv(text: &str) -> Result<EvalReport> {
    let bad = |n: usize, msg: &str| Error::Invalid(format!("report line {n}: {msg}"));
    let mut entries = Vec::new();
    let mut same_view = false;
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 fields"));
        }
        if f[0] == "mode" {
            same_view = match f[4] {
                "same_view" => true,
                "cross_view" => false,
                _ => return Err(bad(i + 1, "unknown mode")),
            };
        }
        if f[0] != "cell" {
            continue;
        }
        let cond: Condition = f[1].parse().map_err(|_| bad(i + 1, "unknown condition"))?;
        let pv: u32 = f[2].parse().map_err(|_| bad(i + 1, "bad probe view"))?;
        let gv: u32 = f[3].parse().map_err(|_| bad(i + 1, "bad gallery view"))?;
        let acc = match f[4] {
            "NA" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad(i + 1, "bad accuracy"))?),
        };
        entries.push((cond, pv, gv, acc));
    }
    let mut conditions: Vec<Condition> = Vec::new();
    let mut views: Vec<u32> = Vec::new();
    for &(c, pv, _, _) in &entries {
        if !conditions.contains(&c) {
            conditions.push(c);
        }
        if !views.contains(&pv) {
            views.push(pv);
        }
    }
    let n = views.len();
    if entries.len() != conditions.len() * n * n {
        return Err(Error::Invalid("report grid is incomplete".into()));
    }
    let mut cells = vec![vec![vec![None; n]; n]; conditions.len()];
    for (c, pv, gv, acc) in entries {
        let ci = conditions.iter().position(|x| *x == c).expect("collected");
        let pi = views.iter().position(|x| *x == pv).expect("collected");
        let gi = views.iter().position(|x| *x == gv).ok_or_else(|| Error::Invalid(format!("gallery view {gv} has no row")))?;
        cells[ci][pi][gi] = acc;
    }
    Ok(EvalReport {
        conditions,
        views,
        cells,
        same_view,
    })
}

/// Rank-1 accuracy (%) per probe view and condition, excluding identical
/// views, plus a per-condition summary.
pub fn to_markdown(report: &EvalReport) -> String {
    let mut s = String::from("# Rank-1 accuracy (%)\n\n");
    s.push_str(if report.same_view {
        "Gallery scored against itself; identical views only.\n\n"
    } else {
        "Per probe view, averaged over gallery views excluding the identical view.\n\n"
    });
    let header: Vec<String> = report.views.iter().map(|v| format!("{v}°")).collect();
    let _ = writeln!(s, "| Condition | {} | Mean |", header.join(" | "));
    let _ = writeln!(s, "|---|{}---|", "---|".repeat(report.views.len()));
    for (c, cond) in report.conditions.iter().enumerate() {
        let row: Vec<String> = (0..report.views.len()).map(|p| pct(report.view_mean(c, p))).collect();
        let _ = writeln!(s, "| {} | {} | {} |", cond.label(), row.join(" | "), pct(report.condition_mean(c)));
    }
    s.push_str("\n## Summary\n\n| Condition | Mean |\n|---|---|\n");
    for (c, cond) in report.conditions.iter().enumerate() {
        let _ = writeln!(s, "| {} | {} |", cond.label(), pct(report.condition_mean(c)));
    }
    let _ = writeln!(s, "| Mean | {} |", pct(report.grand_mean()));
    s
}
