//! Detection matching, precision/recall/F1 and the full-versus-sparse
//! annotation experiment.

use std::fmt::Write as _;

use crate::dataset::{split_of, Split};
use crate::error::{Error, Result};
use crate::mixture::Point;
use crate::network::{train, Checkpoint, NetworkConfig, TrainOutcome};
use crate::pipeline::{detect, DetectConfig, Detection};
use crate::synth::{build_patches, drop_annotations, AnnotatedImage, Center, DilationConfig};

/// Default matching radius in pixels.
pub const DEFAULT_RADIUS_PX: f64 = 6.0;

/// One-to-one partial matching between detections and ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(detection index, ground-truth index, distance)`, sorted by detection.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Unmatched detections.
    pub false_positives: Vec<usize>,
    /// Unmatched ground-truth points.
    pub false_negatives: Vec<usize>,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<(usize, usize, f64)>, n_det: usize, n_gt: usize) -> Self {
        pairs.sort_by_key(|p| (p.0, p.1));
        let mut det_used = vec![false; n_det];
        let mut gt_used = vec![false; n_gt];
        for &(d, g, _) in &pairs {
            det_used[d] = true;
            gt_used[g] = true;
        }
        Self {
            pairs,
            false_positives: (0..n_det).filter(|&i| !det_used[i]).collect(),
            false_negatives: (0..n_gt).filter(|&i| !gt_used[i]).collect(),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.pairs.len(),
            fp: self.false_positives.len(),
            fn_: self.false_negatives.len(),
        }
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Globally greedy matching: candidate pairs within `radius_px` are taken in
/// ascending distance order, ties by `(detection, ground truth)` index.
///
/// Greedy can miss the maximum-cardinality matching when a short pair blocks
/// two longer ones; [`match_points`] does not have that problem.
pub fn greedy_match(detections: &[Point], gts: &[Point], radius_px: f64) -> MatchResult {
    let mut candidates = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let dd = dist(*d, *g);
            if dd <= radius_px {
                candidates.push((i, j, dd));
            }
        }
    }
    candidates.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut det_used = vec![false; detections.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (i, j, d) in candidates {
        if !det_used[i] && !gt_used[j] {
            det_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j, d));
        }
    }
    MatchResult::from_pairs(pairs, detections.len(), gts.len())
}

/// Maximum-cardinality matching within `radius_px`; among those, one of
/// minimum total distance. Solved as a square assignment problem where
/// out-of-radius pairs cost more than any set of in-radius pairs.
pub fn match_points(detections: &[Point], gts: &[Point], radius_px: f64) -> MatchResult {
    let (nd, ng) = (detections.len(), gts.len());
    let n = nd.max(ng);
    if nd == 0 || ng == 0 {
        return MatchResult::from_pairs(Vec::new(), nd, ng);
    }
    let big = (n as f64 + 1.0) * (radius_px.max(0.0) + 1.0);
    let mut cost = vec![big; n * n];
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let dd = dist(*d, *g);
            if dd <= radius_px {
                cost[i * n + j] = dd;
            }
        }
    }
    let assignment = hungarian(&cost, n);
    let pairs = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < nd && j < ng && cost[i * n + j] < big)
        .map(|(i, &j)| (i, j, cost[i * n + j]))
        .collect();
    MatchResult::from_pairs(pairs, nd, ng)
}

/// Minimum-cost perfect assignment on a dense `n × n` cost matrix
/// (shortest augmenting paths with potentials). Returns the column of every
/// row.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[(r0 - 1) * n + (col - 1)] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged scores plus the per-image counts they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub totals: Counts,
    pub per_image: Vec<Counts>,
}

/// Sums counts over images before forming the ratios.
pub fn metrics(results: &[MatchResult]) -> MetricsReport {
    let per_image: Vec<Counts> = results.iter().map(MatchResult::counts).collect();
    let totals = per_image
        .iter()
        .copied()
        .fold(Counts::default(), |a, b| a + b);
    MetricsReport {
        precision: totals.precision(),
        recall: totals.recall(),
        f1: totals.f1(),
        totals,
        per_image,
    }
}

/// Human-readable table with Method, Precision, Recall and F1 columns.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$} | Precision | Recall | F1 score", "Method");
    let _ = writeln!(out, "{}-+-----------+--------+---------", "-".repeat(width));
    for (method, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>9.3} | {:>6.3} | {:>8.3}",
            method, r.precision, r.recall, r.f1
        );
    }
    out
}

pub fn metrics_csv(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::from("method,precision,recall,f1,tp,fp,fn\n");
    for (method, r) in rows {
        let _ = writeln!(
            out,
            "{method},{},{},{},{},{},{}",
            r.precision, r.recall, r.f1, r.totals.tp, r.totals.fp, r.totals.fn_
        );
    }
    out
}

pub fn detection_points(detections: &[Detection]) -> Vec<Point> {
    detections.iter().map(|d| [d.x, d.y]).collect()
}

pub fn center_points(centers: &[Center]) -> Vec<Point> {
    centers.iter().map(|c| [c[0] as f64, c[1] as f64]).collect()
}

/// Runs detection on every image and scores it against its centers.
pub fn evaluate(
    images: &[AnnotatedImage],
    checkpoint: &Checkpoint,
    detect_config: &DetectConfig,
    radius_px: f64,
) -> Result<MetricsReport> {
    let mut results = Vec::with_capacity(images.len());
    for img in images {
        let out = detect(&img.image, checkpoint, detect_config)?;
        results.push(match_points(
            &detection_points(&out.detections),
            &center_points(&img.centers),
            radius_px,
        ));
    }
    Ok(metrics(&results))
}

/// Everything needed to train and score one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    /// Stride used to cut training patches.
    pub train_stride: usize,
    pub dilation: DilationConfig,
    pub detect: DetectConfig,
    pub radius_px: f64,
    /// Seeds annotation dropping and target dilation.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let network = NetworkConfig::default();
        Self {
            train_stride: network.patch_size,
            network,
            dilation: DilationConfig::default(),
            detect: DetectConfig::default(),
            radius_px: DEFAULT_RADIUS_PX,
            seed: 0,
        }
    }
}

/// Trains on `train_images` after dropping `drop_fraction` of their centers.
pub fn train_on(
    train_images: &[AnnotatedImage],
    drop_fraction: f64,
    config: &ExperimentConfig,
) -> Result<TrainOutcome> {
    let images = drop_annotations(train_images, drop_fraction, config.seed)?;
    let patches = build_patches(
        &images,
        config.network.patch_size,
        config.train_stride,
        &config.dilation,
        config.seed,
    )?;
    train(&patches, &config.network)
}

/// Reports and models of the full-versus-sparse comparison.
#[derive(Debug, Clone)]
pub struct SparseReport {
    pub drop_fraction: f64,
    pub full: MetricsReport,
    pub sparse: MetricsReport,
    pub full_model: TrainOutcome,
    pub sparse_model: TrainOutcome,
}

impl SparseReport {
    /// Sparse minus full, as (precision, recall, F1).
    pub fn deltas(&self) -> (f64, f64, f64) {
        (
            self.sparse.precision - self.full.precision,
            self.sparse.recall - self.full.recall,
            self.sparse.f1 - self.full.f1,
        )
    }

    pub fn table(&self) -> String {
        format_table(&[("full", &self.full), ("sparse", &self.sparse)])
    }
}

/// Trains once on the full training split and once with `drop_fraction` of
/// its annotations removed (same seeds otherwise), then scores both on the
/// untouched test split.
pub fn sparse_experiment(
    dataset: &[(AnnotatedImage, Split)],
    drop_fraction: f64,
    config: &ExperimentConfig,
) -> Result<SparseReport> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::config(format!(
            "drop fraction {drop_fraction} must lie in [0, 1)"
        )));
    }
    let train_images = split_of(dataset, Split::Train);
    let test_images = split_of(dataset, Split::Test);
    if train_images.is_empty() || test_images.is_empty() {
        return Err(Error::config("experiment needs both train and test images"));
    }
    let full_model = train_on(&train_images, 0.0, config)?;
    let sparse_model = train_on(&train_images, drop_fraction, config)?;
    let full = evaluate(
        &test_images,
        &full_model.checkpoint,
        &config.detect,
        config.radius_px,
    )?;
    let sparse = evaluate(
        &test_images,
        &sparse_model.checkpoint,
        &config.detect,
        config.radius_px,
    )?;
    Ok(SparseReport {
        drop_fraction,
        full,
        sparse,
        full_model,
        sparse_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_boundary() {
        let r = match_points(&[[5.0, 0.0]], &[[0.0, 0.0]], 6.0);
        assert_eq!(
            r.counts(),
            Counts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
        let r = match_points(&[[7.0, 0.0]], &[[0.0, 0.0]], 6.0);
        assert_eq!(
            r.counts(),
            Counts {
                tp: 0,
                fp: 1,
                fn_: 1
            }
        );
        let r = match_points(&[[6.0, 0.0]], &[[0.0, 0.0]], 6.0);
        assert_eq!(r.counts().tp, 1);
    }

    #[test]
    fn greedy_can_lose_a_pair_that_the_assignment_keeps() {
        // d0 is closest to g0 but is the only detection that can reach g1.
        let dets = [[0.0, 0.0], [-5.0, 0.0]];
        let gts = [[1.0, 0.0], [5.0, 0.0]];
        assert_eq!(greedy_match(&dets, &gts, 6.0).pairs.len(), 1);
        let r = match_points(&dets, &gts, 6.0);
        assert_eq!(r.pairs.len(), 2);
        assert!(r.false_positives.is_empty() && r.false_negatives.is_empty());
    }

    #[test]
    fn crossing_pairs_use_the_shorter_assignment() {
        let dets = [[0.0, 0.0], [4.0, 0.0]];
        let gts = [[3.5, 0.5], [0.5, 0.5]];
        let r = match_points(&dets, &gts, 6.0);
        let g: Vec<(usize, usize)> = r.pairs.iter().map(|p| (p.0, p.1)).collect();
        assert_eq!(g, vec![(0, 1), (1, 0)]);
        assert_eq!(greedy_match(&dets, &gts, 6.0).pairs, r.pairs);
    }

    #[test]
    fn metric_conventions() {
        let c = Counts {
            tp: 8,
            fp: 2,
            fn_: 2,
        };
        assert!((c.precision() - 0.8).abs() < 1e-12);
        assert!((c.recall() - 0.8).abs() < 1e-12);
        assert!((c.f1() - 0.8).abs() < 1e-12);
        let r = metrics(&[match_points(&[], &[[1.0, 1.0]], 6.0)]);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = metrics(&[]);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn table_has_header_and_rows() {
        let r = metrics(&[match_points(&[[0.0, 0.0]], &[[0.0, 0.0]], 6.0)]);
        let t = format_table(&[("full", &r), ("sparse", &r)]);
        assert!(t.starts_with("Method"));
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("1.000"));
        let csv = metrics_csv(&[("full", &r)]);
        assert_eq!(csv.lines().nth(1).unwrap(), "full,1,1,1,1,0,0");
    }
}
