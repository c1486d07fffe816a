//! Pixel-level segmentation metrics: AUC, thresholded confusion-matrix
//! scores, threshold selection and run aggregation.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::dataset::Sample;
use crate::data::image::{write_image, Image8};
use crate::error::{Error, Result};
use crate::model::UNet;
use crate::tensor::Scalar;
use crate::train::trainer::image_tensor;

/// Number of evenly spaced thresholds in `[0, 1]` scanned by [`select_threshold`].
pub const THRESHOLD_GRID: usize = 1001;

/// Scores and binary labels of a pooled pixel set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPixels {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        Ok(ScoredPixels { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Append the eroded-FOV pixels of one probability map.
    pub fn push_sample(&mut self, probs: &[f32], sample: &Sample) {
        for i in 0..sample.pixels() {
            if sample.fov_eroded[i] {
                self.scores.push(probs[i] as f64);
                self.labels.push(sample.label[i]);
            }
        }
    }

    pub fn extend(&mut self, other: &ScoredPixels) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }
}

/// Mann–Whitney AUC with midranks for tied scores.
pub fn auc(sp: &ScoredPixels) -> Result<f64> {
    let pos = sp.labels.iter().filter(|&&l| l).count();
    let neg = sp.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut order: Vec<usize> = (0..sp.len()).collect();
    order.sort_unstable_by(|&a, &b| sp.scores[a].total_cmp(&sp.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && sp.scores[order[j]] == sp.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let p = order[i..j].iter().filter(|&&k| sp.labels[k]).count();
        rank_sum += mid * p as f64;
        i = j;
    }
    let (pf, nf) = (pos as f64, neg as f64);
    Ok((rank_sum - pf * (pf + 1.0) / 2.0) / (pf * nf))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn at(sp: &ScoredPixels, threshold: f64) -> Self {
        let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for (&s, &l) in sp.scores.iter().zip(&sp.labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

/// Thresholded scores; a zero denominator yields 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholded {
    pub specificity: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Scores at `threshold`; a pixel is predicted vessel when `score >= threshold`.
pub fn metrics_at(sp: &ScoredPixels, threshold: f64) -> Thresholded {
    let c = Confusion::at(sp, threshold);
    Thresholded { specificity: c.specificity(), sensitivity: c.sensitivity(), f1: c.f1(), accuracy: c.accuracy() }
}

pub fn grid_threshold(k: usize) -> f64 {
    k as f64 / (THRESHOLD_GRID - 1) as f64
}

/// The grid threshold with the highest F1; ties go to the smallest.
pub fn select_threshold(sp: &ScoredPixels) -> f64 {
    let mut pairs: Vec<(f64, bool)> = sp.scores.iter().copied().zip(sp.labels.iter().copied()).collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    // positives among pairs[..i]
    let mut pos_below = Vec::with_capacity(pairs.len() + 1);
    pos_below.push(0u64);
    for &(_, l) in &pairs {
        pos_below.push(pos_below.last().unwrap() + l as u64);
    }
    let total_pos = *pos_below.last().unwrap();
    let (mut best_t, mut best_f1) = (0.0, f64::NEG_INFINITY);
    for k in 0..THRESHOLD_GRID {
        let t = grid_threshold(k);
        let i = pairs.partition_point(|p| p.0 < t);
        let tp = total_pos - pos_below[i];
        let fp = (pairs.len() - i) as u64 - tp;
        let fn_ = pos_below[i];
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = t;
        }
    }
    best_t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub auc: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

/// Vessel probability maps of whole images (row-major, one per sample).
pub fn probability_maps<T: Scalar>(net: &mut UNet<T>, samples: &[&Sample]) -> Result<Vec<Vec<f32>>> {
    samples
        .iter()
        .map(|s| {
            let p = net.infer_padded(image_tensor(s))?;
            Ok(p.plane(0, 1).iter().map(|v| v.f64() as f32).collect())
        })
        .collect()
}

pub fn scored_pixels(maps: &[Vec<f32>], samples: &[&Sample]) -> ScoredPixels {
    let mut sp = ScoredPixels::default();
    for (m, s) in maps.iter().zip(samples) {
        sp.push_sample(m, s);
    }
    sp
}

/// Threshold from the validation set, metrics over all test pixels pooled.
pub fn evaluate_maps(test: &ScoredPixels, validation: &ScoredPixels) -> Result<RunMetrics> {
    let threshold = select_threshold(validation);
    let t = metrics_at(test, threshold);
    Ok(RunMetrics {
        auc: auc(test)?,
        specificity: t.specificity,
        sensitivity: t.sensitivity,
        f1: t.f1,
        accuracy: t.accuracy,
        threshold,
    })
}

pub fn evaluate<T: Scalar>(net: &mut UNet<T>, test: &[&Sample], validation: &[&Sample]) -> Result<RunMetrics> {
    let tm = probability_maps(net, test)?;
    let vm = probability_maps(net, validation)?;
    evaluate_maps(&scored_pixels(&tm, test), &scored_pixels(&vm, validation))
}

pub fn write_probability_map(path: &Path, map: &[f32], width: usize, height: usize) -> Result<()> {
    write_image(path, &Image8::from_unit(width, height, map, 0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample (n − 1) standard deviation; std is 0 for one value.
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auc: Stat,
    pub specificity: Stat,
    pub sensitivity: Stat,
    pub f1: Stat,
    pub accuracy: Stat,
    pub thresholds: Vec<f64>,
    pub params: usize,
    pub runs: usize,
    /// Set when fewer than two runs were aggregated (std is then 0).
    pub few_runs: bool,
}

pub fn aggregate(runs: &[RunMetrics], params: usize) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::Metric("no runs to aggregate".into()));
    }
    let col = |f: fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let few_runs = runs.len() < 2;
    if few_runs {
        log::warn!("aggregating a single run; standard deviations are reported as 0");
    }
    Ok(MetricsReport {
        auc: col(|r| r.auc),
        specificity: col(|r| r.specificity),
        sensitivity: col(|r| r.sensitivity),
        f1: col(|r| r.f1),
        accuracy: col(|r| r.accuracy),
        thresholds: runs.iter().map(|r| r.threshold).collect(),
        params,
        runs: runs.len(),
        few_runs,
    })
}

/// One row per run followed by `mean` and `std` rows.
pub fn metrics_csv(runs: &[RunMetrics], report: &MetricsReport) -> String {
    let mut s = String::from("run,threshold,auc,specificity,sensitivity,f1,accuracy\n");
    for (i, r) in runs.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{:.3},{:.6},{:.6},{:.6},{:.6},{:.6}",
            i + 1,
            r.threshold,
            r.auc,
            r.specificity,
            r.sensitivity,
            r.f1,
            r.accuracy
        );
    }
    let stats = [report.auc, report.specificity, report.sensitivity, report.f1, report.accuracy];
    let row = |name: &str, f: fn(&Stat) -> f64| {
        let vals: Vec<String> = stats.iter().map(|st| format!("{:.6}", f(st))).collect();
        format!("{name},,{}\n", vals.join(","))
    };
    s.push_str(&row("mean", |st| st.mean));
    s.push_str(&row("std", |st| st.std));
    s
}
