//! Embedding-space inspection, ablation sweeps and figures.

pub mod figure;
pub mod sweep;
pub mod tsne;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;

pub use figure::{emit_figure, render_svg};
pub use sweep::{run_sweep, short_vs_long_report, ComparisonTable, SweepGrid, SweepParam, SweepTable};
pub use tsne::{perplexity_search, tsne, TsneConfig, TsneOutput};

use crate::cache::EmbeddingCache;
use crate::error::{Error, Result};
use crate::seeding;

pub const DEFAULT_CLASSES: usize = 50;
pub const DEFAULT_PER_CLASS: usize = 250;

/// Fraction of points whose nearest class centroid is their own class.
pub fn nearest_centroid_purity(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut sums: BTreeMap<usize, ([f64; 2], usize)> = BTreeMap::new();
    for (p, &l) in points.iter().zip(labels) {
        let e = sums.entry(l).or_insert(([0.0; 2], 0));
        e.0[0] += p[0];
        e.0[1] += p[1];
        e.1 += 1;
    }
    let centroids: Vec<(usize, [f64; 2])> = sums
        .into_iter()
        .map(|(l, (s, n))| (l, [s[0] / n as f64, s[1] / n as f64]))
        .collect();
    let hits = points
        .iter()
        .zip(labels)
        .filter(|(p, &l)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for &(c, m) in &centroids {
                let d = (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1 == l
        })
        .count();
    hits as f64 / points.len() as f64
}

/// Mean silhouette coefficient; `None` unless there are between 2 and
/// N−1 clusters. Singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Option<f64> {
    let n = points.len();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    labels.iter().for_each(|&l| *sizes.entry(l).or_default() += 1);
    if sizes.len() < 2 || sizes.len() >= n {
        return None;
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        if sizes[&labels[i]] == 1 {
            continue;
        }
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                *sums.entry(labels[j]).or_default() += dist(&points[i], &points[j]);
            }
        }
        let a = sums[&labels[i]] / (sizes[&labels[i]] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(l, s)| s / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingAnalysis {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub tsne: TsneOutput,
    pub silhouette: Option<f64>,
    pub purity: f64,
}

impl EmbeddingAnalysis {
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.tsne.points()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label,x,y\n");
        for ((id, l), p) in self.ids.iter().zip(&self.labels).zip(self.points()) {
            writeln!(out, "{id},{l},{:.6},{:.6}", p[0], p[1]).unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        let sil = self.silhouette.map_or_else(|| "n/a".to_owned(), |s| format!("{s:.4}"));
        format!(
            "points={} silhouette={sil} purity={:.4} kl_initial={:.4} kl_final={:.4}",
            self.ids.len(),
            self.purity,
            self.tsne.kl_initial,
            self.tsne.kl_final
        )
    }
}

/// Samples `classes` classes and `per_class` rows of each from the cache
/// (seeded by `config.seed`), embeds them with t-SNE and scores the
/// clustering. Cache rows without a label are ignored.
pub fn embedding_analysis(
    cache: &EmbeddingCache,
    labels: &HashMap<String, usize>,
    classes: usize,
    per_class: usize,
    config: &TsneConfig,
) -> Result<EmbeddingAnalysis> {
    if classes == 0 || per_class == 0 {
        return Err(Error::Config("class and per-class counts must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, id) in cache.ids().iter().enumerate() {
        if let Some(&l) = labels.get(id) {
            by_class.entry(l).or_default().push(row);
        }
    }
    let mut eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, rows)| rows.len() >= per_class)
        .map(|(&l, _)| l)
        .collect();
    if eligible.len() < classes {
        return Err(Error::Validation(format!(
            "cannot sample {classes} classes × {per_class}: only {} of {} labelled classes have {per_class} rows",
            eligible.len(),
            by_class.len()
        )));
    }
    eligible.shuffle(&mut seeding::rng(config.seed, "analysis-classes", 0));
    let mut chosen = eligible[..classes].to_vec();
    chosen.sort_unstable();

    let (mut rows, mut row_labels) = (Vec::new(), Vec::new());
    for &c in &chosen {
        let mut members = by_class[&c].clone();
        members.shuffle(&mut seeding::rng(config.seed, "analysis-rows", c as u64));
        members.truncate(per_class);
        members.sort_unstable();
        row_labels.extend(std::iter::repeat_n(c, members.len()));
        rows.extend(members);
    }
    let k = cache.k();
    let x: Vec<f64> = rows.iter().flat_map(|&r| cache.row_f64(r)).collect();
    let out = tsne(&x, rows.len(), k, config)?;
    let points = out.points();
    Ok(EmbeddingAnalysis {
        ids: rows.iter().map(|&r| cache.ids()[r].clone()).collect(),
        silhouette: silhouette(&points, &row_labels),
        purity: nearest_centroid_purity(&points, &row_labels),
        labels: row_labels,
        tsne: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purity_of_separated_points() {
        let pts = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        assert_eq!(nearest_centroid_purity(&pts, &[0, 0, 1, 1]), 1.0);
        assert_eq!(nearest_centroid_purity(&pts, &[0, 1, 0, 1]), 0.5);
    }

    #[test]
    fn silhouette_cases() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        let expect = ((10.5 - 1.0) / 10.5 + (9.5 - 1.0) / 9.5) / 2.0;
        assert!((s - expect).abs() < 1e-12);
        assert_eq!(silhouette(&pts, &[0, 1, 2, 3]), None);
        assert_eq!(silhouette(&pts, &[0, 0, 0, 0]), None);
    }

    #[test]
    fn infeasible_sampling_names_counts() {
        let cache = EmbeddingCache::from_rows(2, vec!["a".into(), "b".into()], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels: HashMap<String, usize> = [("a".to_owned(), 0), ("b".to_owned(), 1)].into();
        let err = embedding_analysis(&cache, &labels, 3, 1, &TsneConfig::default()).unwrap_err();
        assert!(err.to_string().contains("only 2 of 2"), "{err}");
    }
}
