//! Detection and segmentation metrics.
//!
//! A sample is predicted anomalous when its score is `>=` the threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decompose::BinaryMask;
use crate::error::{contract, invalid_input, Error, Result};
use crate::scoremap::ScoreMap;

/// Default cap on candidate thresholds for pixel-level sweeps.
pub const DEFAULT_SEG_THRESHOLDS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    /// `true` for anomalous.
    pub label: bool,
}

impl LabeledScore {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

/// Best F1 over thresholds and the (lowest) threshold achieving it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Result {
    pub f1: f64,
    pub threshold: f64,
}

/// `2 tp / (2 tp + fp + fn)`, which is `2PR / (P + R)` and 0 when `tp = 0`.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Scores sorted ascending with a prefix count of positives.
struct Sorted {
    scores: Vec<f64>,
    /// `pos_before[i]` = positives among the first `i` sorted items.
    pos_before: Vec<usize>,
}

impl Sorted {
    fn new(items: impl Iterator<Item = LabeledScore>) -> Result<Self> {
        let mut v: Vec<LabeledScore> = items.collect();
        if let Some(bad) = v.iter().find(|s| !s.score.is_finite()) {
            return Err(invalid_input!("score {} is not finite", bad.score));
        }
        let positives = v.iter().filter(|s| s.label).count();
        if positives == 0 || positives == v.len() {
            return Err(Error::UndefinedMetric(format!(
                "need both labels, got {positives} positive of {}",
                v.len()
            )));
        }
        v.sort_by(|a, b| a.score.total_cmp(&b.score));
        let mut pos_before = Vec::with_capacity(v.len() + 1);
        pos_before.push(0);
        let mut acc = 0;
        for s in &v {
            acc += usize::from(s.label);
            pos_before.push(acc);
        }
        Ok(Self {
            scores: v.into_iter().map(|s| s.score).collect(),
            pos_before,
        })
    }

    fn positives(&self) -> usize {
        self.pos_before[self.scores.len()]
    }

    fn f1_at(&self, threshold: f64) -> f64 {
        let idx = self.scores.partition_point(|&s| s < threshold);
        let tp = self.positives() - self.pos_before[idx];
        let fp = (self.scores.len() - idx) - tp;
        f1_from_counts(tp, fp, self.positives() - tp)
    }

    /// Best F1 over `candidates` given in ascending order; ties keep the lowest threshold.
    fn sweep(&self, candidates: impl Iterator<Item = f64>) -> F1Result {
        let mut best = F1Result {
            f1: -1.0,
            threshold: f64::NAN,
        };
        for t in candidates {
            let f1 = self.f1_at(t);
            if f1 > best.f1 {
                best = F1Result { f1, threshold: t };
            }
        }
        best
    }

    fn distinct(&self) -> impl Iterator<Item = f64> + '_ {
        let s = &self.scores;
        (0..s.len()).filter(move |&i| i == 0 || s[i] != s[i - 1]).map(move |i| s[i])
    }
}

/// Best-threshold F1 sweeping every distinct score.
pub fn f1_max(items: &[LabeledScore]) -> Result<F1Result> {
    let sorted = Sorted::new(items.iter().copied())?;
    Ok(sorted.sweep(sorted.distinct()))
}

/// Threshold candidates for the pixel sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegSweep {
    /// Every distinct pixel score.
    Exact,
    /// At most this many thresholds at uniform quantiles of the pixel scores.
    Quantiles(usize),
}

impl Default for SegSweep {
    fn default() -> Self {
        SegSweep::Quantiles(DEFAULT_SEG_THRESHOLDS)
    }
}

/// Pixel-level F1 over all maps pooled together.
pub fn f1_seg(maps: &[(ScoreMap, BinaryMask)], sweep: SegSweep) -> Result<F1Result> {
    for (i, (m, gt)) in maps.iter().enumerate() {
        if (m.height(), m.width()) != (gt.height(), gt.width()) {
            return Err(contract!(
                "map {i} is {}x{} but its ground truth is {}x{}",
                m.height(),
                m.width(),
                gt.height(),
                gt.width()
            ));
        }
    }
    let items = maps.iter().flat_map(|(m, gt)| {
        m.values()
            .iter()
            .zip(gt.data())
            .map(|(&score, &label)| LabeledScore { score, label })
    });
    let sorted = Sorted::new(items)?;
    match sweep {
        SegSweep::Exact => Ok(sorted.sweep(sorted.distinct())),
        SegSweep::Quantiles(0) => Err(Error::InvalidConfig("quantile sweep needs at least one threshold".into())),
        SegSweep::Quantiles(m) => {
            let n = sorted.scores.len();
            if m >= n {
                return Ok(sorted.sweep(sorted.distinct()));
            }
            let mut picks: Vec<f64> = (0..m)
                .map(|i| sorted.scores[if m == 1 { 0 } else { i * (n - 1) / (m - 1) }])
                .collect();
            picks.dedup();
            Ok(sorted.sweep(picks.into_iter()))
        }
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks for ties.
pub fn auroc(items: &[LabeledScore]) -> Result<f64> {
    let mut v: Vec<LabeledScore> = items.to_vec();
    if let Some(bad) = v.iter().find(|s| !s.score.is_finite()) {
        return Err(invalid_input!("score {} is not finite", bad.score));
    }
    let p = v.iter().filter(|s| s.label).count();
    let n = v.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!("need both labels, got {p} positive of {}", v.len())));
    }
    v.sort_by(|a, b| a.score.total_cmp(&b.score));
    // sum of doubled midranks of positives, kept integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].score == v[i].score {
            j += 1;
        }
        // 1-based ranks i+1..=j, midrank (i+1+j)/2
        let positives = v[i..j].iter().filter(|s| s.label).count() as u128;
        rank_sum2 += positives * (i + 1 + j) as u128;
        i = j;
    }
    let (p, n) = (p as u128, n as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Metrics of one category; `None` where a metric is undefined or has no ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub images: usize,
    pub f1_cls: Option<F1Result>,
    pub auroc_cls: Option<f64>,
    pub f1_seg: Option<F1Result>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub f1_cls: Option<f64>,
    pub auroc_cls: Option<f64>,
    pub f1_seg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub categories: BTreeMap<String, CategoryMetrics>,
    /// Unweighted means over the categories where each metric is defined.
    pub mean: MeanMetrics,
}

impl MetricsReport {
    pub fn new(categories: BTreeMap<String, CategoryMetrics>) -> Self {
        fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
            let v: Vec<f64> = xs.collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        }
        let mean = MeanMetrics {
            f1_cls: mean(categories.values().filter_map(|c| c.f1_cls.map(|r| r.f1))),
            auroc_cls: mean(categories.values().filter_map(|c| c.auroc_cls)),
            f1_seg: mean(categories.values().filter_map(|c| c.f1_seg.map(|r| r.f1))),
        };
        Self { categories, mean }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Image-level metrics for one category; undefined metrics become `None`.
pub fn category_metrics(image_scores: &[LabeledScore], seg: Option<&[(ScoreMap, BinaryMask)]>, sweep: SegSweep) -> Result<CategoryMetrics> {
    fn defined<T>(r: Result<T>) -> Result<Option<T>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(msg)) => {
                log::warn!("metric skipped: {msg}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
    Ok(CategoryMetrics {
        images: image_scores.len(),
        f1_cls: defined(f1_max(image_scores))?,
        auroc_cls: defined(auroc(image_scores))?,
        f1_seg: match seg {
            Some(maps) => defined(f1_seg(maps, sweep))?,
            None => None,
        },
    })
}
