//! Board-state probing metrics over harvested activations: single-feature
//! threshold classifiers, coverage, a high-precision classifier index and
//! board reconstruction.

mod dataset;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chess::{BspVector, BSP_COUNT};
use crate::error::{Error, Result};

pub use dataset::{read_activations, write_activations, ActivationDataset, ActivationRow, Split};

pub const DEFAULT_MIN_FIRE: usize = 5;
pub const MIN_PRECISION: f64 = 0.95;

/// Thresholds 0.0, 0.1, ..., 0.9.
pub fn default_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("thresholds must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("threshold grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `value > t * f_max`. A feature whose maximum is not positive never fires.
pub fn fires(value: f32, t: f64, f_max: f32) -> bool {
    f_max > 0.0 && value as f64 > t * f_max as f64
}

pub fn binarize(column: &[f32], t: f64) -> Vec<bool> {
    let f_max = column.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    column.iter().map(|&v| fires(v, t, f_max)).collect()
}

/// F1 from counts. Predicting nothing when nothing is true scores 1.
pub fn f1_from_counts(tp: usize, predicted: usize, actual: usize) -> f64 {
    if predicted == 0 && actual == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / actual as f64;
    2.0 * p * r / (p + r)
}

pub fn f1(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("f1", &[pred.len()], &[truth.len()]));
    }
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    let np = pred.iter().filter(|p| **p).count();
    let nt = truth.iter().filter(|t| **t).count();
    Ok(f1_from_counts(tp, np, nt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BspScore {
    pub bsp: usize,
    /// `None` only when the dataset has no features.
    pub feature: Option<usize>,
    pub threshold: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_bsp: Vec<BspScore>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub feature: usize,
    pub threshold: f64,
}

/// Classifiers with training precision at least [`MIN_PRECISION`], keyed by
/// BSP. Holds the training maxima so thresholds transfer to new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighPrecisionIndex {
    pub f_max: Vec<f32>,
    pub entries: BTreeMap<usize, Vec<Classifier>>,
}

impl HighPrecisionIndex {
    pub fn empty(width: usize) -> Self {
        Self {
            f_max: vec![0.0; width],
            entries: BTreeMap::new(),
        }
    }

    pub fn classifier_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// Per-feature confusion counts at every grid threshold.
struct Counts {
    /// `predicted[j]`: rows firing at threshold `j`.
    predicted: Vec<usize>,
    /// `tp[g * L + j]`: firing rows where BSP `g` holds.
    tp: Vec<usize>,
}

struct Scanner<'a> {
    ds: &'a ActivationDataset,
    grid: &'a [f64],
    ones: Vec<Vec<u16>>,
    actual: Vec<usize>,
}

impl<'a> Scanner<'a> {
    fn new(ds: &'a ActivationDataset, grid: &'a [f64]) -> Result<Self> {
        check_grid(grid)?;
        let ones: Vec<Vec<u16>> = ds.labels().iter().map(|l| l.ones().map(|g| g as u16).collect()).collect();
        let mut actual = vec![0; BSP_COUNT];
        for row in &ones {
            for &g in row {
                actual[g as usize] += 1;
            }
        }
        Ok(Self { ds, grid, ones, actual })
    }

    /// Rows that fire at threshold `j` are exactly those whose level exceeds
    /// `j`, since the grid is increasing. Bucket rows by level, then sum
    /// buckets from the top.
    fn counts(&self, feature: usize, counts: &mut Counts) {
        let l = self.grid.len();
        let f_max = self.ds.f_max()[feature];
        counts.predicted.clear();
        counts.predicted.resize(l + 1, 0);
        counts.tp.clear();
        counts.tp.resize(BSP_COUNT * (l + 1), 0);
        for (s, ones) in self.ones.iter().enumerate() {
            let v = self.ds.value(s, feature);
            let level = self.grid.iter().take_while(|&&t| fires(v, t, f_max)).count();
            if level == 0 {
                continue;
            }
            counts.predicted[level] += 1;
            for &g in ones {
                counts.tp[g as usize * (l + 1) + level] += 1;
            }
        }
        // after this, index j + 1 holds the count for threshold j
        for j in (1..l).rev() {
            counts.predicted[j] += counts.predicted[j + 1];
        }
        for g in 0..BSP_COUNT {
            let row = &mut counts.tp[g * (l + 1)..(g + 1) * (l + 1)];
            for j in (1..l).rev() {
                row[j] += row[j + 1];
            }
        }
    }

    fn scan(&self, features: std::ops::Range<usize>, mut visit: impl FnMut(usize, &Counts)) {
        let mut counts = Counts {
            predicted: Vec::new(),
            tp: Vec::new(),
        };
        for i in features {
            self.counts(i, &mut counts);
            visit(i, &counts);
        }
    }
}

/// Worker count: `MOEX_THREADS` if set, otherwise the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MOEX_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Split `0..width` into contiguous chunks, run `work` on each and return
/// the results in chunk order.
fn par_chunks<R: Send>(threads: usize, width: usize, work: impl Fn(std::ops::Range<usize>) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, width.max(1));
    let chunk = width.div_ceil(threads).max(1);
    let ranges: Vec<_> = (0..threads)
        .map(|t| (t * chunk).min(width)..((t + 1) * chunk).min(width))
        .collect();
    if ranges.len() == 1 {
        return vec![work(ranges[0].clone())];
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = ranges.into_iter().map(|r| s.spawn(|| work(r))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn best_scores(ds: &ActivationDataset, bsps: &[usize], grid: &[f64], threads: usize) -> Result<Vec<BspScore>> {
    if let Some(&g) = bsps.iter().find(|&&g| g >= BSP_COUNT) {
        return Err(Error::Config(format!("BSP id {g} out of range")));
    }
    let scanner = Scanner::new(ds, grid)?;
    let l = grid.len();
    let empty = || {
        bsps.iter()
            .map(|&g| BspScore {
                bsp: g,
                feature: None,
                threshold: grid[0],
                f1: f64::NEG_INFINITY,
            })
            .collect::<Vec<_>>()
    };
    let partial = par_chunks(threads, ds.width(), |range| {
        let mut best = empty();
        scanner.scan(range, |i, c| {
            for b in best.iter_mut() {
                for (j, &t) in grid.iter().enumerate() {
                    let f = f1_from_counts(c.tp[b.bsp * (l + 1) + j + 1], c.predicted[j + 1], scanner.actual[b.bsp]);
                    if f > b.f1 {
                        *b = BspScore {
                            bsp: b.bsp,
                            feature: Some(i),
                            threshold: t,
                            f1: f,
                        };
                    }
                }
            }
        });
        best
    });
    let mut best = empty();
    for chunk in partial {
        for (b, c) in best.iter_mut().zip(chunk) {
            if c.f1 > b.f1 {
                *b = c;
            }
        }
    }
    for b in &mut best {
        if b.feature.is_none() {
            b.f1 = 0.0;
        }
    }
    Ok(best)
}

/// Best single-feature threshold classifier for BSP `g`. Ties go to the
/// lower feature id, then the lower threshold.
pub fn best_f1_for_bsp(ds: &ActivationDataset, g: usize, grid: &[f64]) -> Result<BspScore> {
    Ok(best_scores(ds, &[g], grid, 1)?[0])
}

/// Mean best F1 over `bsps`, with per-BSP records in the given order. An
/// empty BSP list has mean 0.
pub fn coverage(ds: &ActivationDataset, bsps: &[usize], grid: &[f64]) -> Result<CoverageReport> {
    let per_bsp = best_scores(ds, bsps, grid, worker_threads())?;
    let mean = mean(per_bsp.iter().map(|b| b.f1));
    Ok(CoverageReport { per_bsp, mean })
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// Every (feature, threshold) pair whose precision for a BSP in `bsps` is at
/// least [`MIN_PRECISION`] over at least `min_fire` firing rows.
pub fn fit_high_precision_index(
    train: &ActivationDataset,
    bsps: &[usize],
    grid: &[f64],
    min_fire: usize,
) -> Result<HighPrecisionIndex> {
    let scanner = Scanner::new(train, grid)?;
    let l = grid.len();
    let min_fire = min_fire.max(1);
    let partial = par_chunks(worker_threads(), train.width(), |range| {
        let mut found: Vec<(usize, Classifier)> = Vec::new();
        scanner.scan(range, |i, c| {
            for &g in bsps {
                for (j, &t) in grid.iter().enumerate() {
                    let np = c.predicted[j + 1];
                    if np < min_fire {
                        continue;
                    }
                    let tp = c.tp[g * (l + 1) + j + 1];
                    if tp as f64 >= MIN_PRECISION * np as f64 {
                        found.push((g, Classifier { feature: i, threshold: t }));
                    }
                }
            }
        });
        found
    });
    let mut entries: BTreeMap<usize, Vec<Classifier>> = BTreeMap::new();
    for (g, c) in partial.into_iter().flatten() {
        entries.entry(g).or_default().push(c);
    }
    Ok(HighPrecisionIndex {
        f_max: train.f_max().to_vec(),
        entries,
    })
}

/// OR over each BSP's classifiers; BSPs without classifiers stay off.
pub fn predict_board(row: &[f32], index: &HighPrecisionIndex) -> Result<BspVector> {
    if row.len() != index.f_max.len() {
        return Err(Error::dim("predict_board", &[row.len()], &[index.f_max.len()]));
    }
    let mut out = BspVector::default();
    for (&g, classifiers) in &index.entries {
        if classifiers
            .iter()
            .any(|c| fires(row[c.feature], c.threshold, index.f_max[c.feature]))
        {
            out.set(g, true);
        }
    }
    Ok(out)
}

/// Mean over rows of the F1 between the predicted and true boards.
pub fn reconstruction(test: &ActivationDataset, index: &HighPrecisionIndex) -> Result<ReconstructionReport> {
    let mut per_sample = Vec::with_capacity(test.rows());
    for s in 0..test.rows() {
        let pred = predict_board(test.row(s), index)?;
        let truth = &test.labels()[s];
        per_sample.push(f1_from_counts(
            pred.count_common(truth),
            pred.count_ones(),
            truth.count_ones(),
        ));
    }
    let mean = mean(per_sample.iter().copied());
    Ok(ReconstructionReport { per_sample, mean })
}

/// Coverage after permuting labels across rows, which keeps label
/// frequencies but removes any link to the features.
pub fn shuffled_label_coverage(
    ds: &ActivationDataset,
    bsps: &[usize],
    grid: &[f64],
    seed: u64,
) -> Result<CoverageReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut labels = ds.labels().to_vec();
    labels.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    coverage(&ds.with_labels(labels)?, bsps, grid)
}

/// Full scoring of a harvested dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpReport {
    pub grid: Vec<f64>,
    pub min_fire: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub coverage: CoverageReport,
    pub reconstruction: ReconstructionReport,
    pub index_size: usize,
    pub shuffled_coverage: Option<f64>,
}

/// Coverage over all rows, index fitted on the train split and
/// reconstruction scored on the test split.
pub fn score(ds: &ActivationDataset, grid: &[f64], min_fire: usize, shuffle_seed: Option<u64>) -> Result<InterpReport> {
    let train = ds.split(Split::Train);
    let test = ds.split(Split::Test);
    if train.rows() == 0 || test.rows() == 0 {
        let missing = if train.rows() == 0 { "train" } else { "test" };
        return Err(Error::Data(format!("activation file has no {missing} rows")));
    }
    let all: Vec<usize> = (0..BSP_COUNT).collect();
    let coverage = coverage(ds, &all, grid)?;
    let index = fit_high_precision_index(&train, &all, grid, min_fire)?;
    let reconstruction = reconstruction(&test, &index)?;
    let shuffled_coverage = match shuffle_seed {
        Some(seed) => Some(shuffled_label_coverage(ds, &all, grid, seed)?.mean),
        None => None,
    };
    Ok(InterpReport {
        grid: grid.to_vec(),
        min_fire,
        train_rows: train.rows(),
        test_rows: test.rows(),
        coverage,
        reconstruction,
        index_size: index.classifier_count(),
        shuffled_coverage,
    })
}

/// `bsp,best_feature,best_t,f1` rows.
pub fn coverage_csv(report: &CoverageReport) -> String {
    let mut out = String::from("bsp,best_feature,best_t,f1\n");
    for b in &report.per_bsp {
        let feature = b.feature.map_or(String::new(), |f| f.to_string());
        out.push_str(&format!("{},{},{},{}\n", b.bsp, feature, b.threshold, b.f1));
    }
    out
}
