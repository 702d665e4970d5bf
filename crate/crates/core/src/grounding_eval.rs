//! Saliency-style grounding metrics: KLD, SIM and NSS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affordance_net::{FingerAnnotation, HeatmapStack};
use crate::error::{Error, Result};
use crate::tensorkit::{bilinear_resize, Tensor};

pub const EVAL_SIZE: usize = 448;
pub const KLD_EPS: f64 = 1e-12;
/// Largest tolerated deviation of a channel's mass from one.
pub const MASS_TOLERANCE: f64 = 1e-3;

/// Eval-normalized stack kept in 64-bit. Channels with no mass are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedStack {
    pub h: usize,
    pub w: usize,
    pub channels: Vec<Option<Vec<f64>>>,
}

impl NormalizedStack {
    pub fn zero_mass_channels(&self) -> Vec<usize> {
        (0..self.channels.len())
            .filter(|&k| self.channels[k].is_none())
            .collect()
    }
}

/// Resizes to `size x size` and scales each channel to unit mass.
pub fn normalize_to(stack: &HeatmapStack, size: usize) -> Result<NormalizedStack> {
    let src: Tensor<f64> = stack.tensor().cast();
    let resized = bilinear_resize(&src, (size, size))?;
    let channels = (0..stack.fingers())
        .map(|k| {
            // negative decoder output carries no mass
            let plane: Vec<f64> = resized.plane(k).iter().map(|v| v.max(0.0)).collect();
            let mass: f64 = plane.iter().sum();
            (mass > 0.0).then(|| plane.iter().map(|v| v / mass).collect())
        })
        .collect();
    Ok(NormalizedStack {
        h: size,
        w: size,
        channels,
    })
}

pub fn normalize_for_eval(stack: &HeatmapStack) -> Result<NormalizedStack> {
    normalize_to(stack, EVAL_SIZE)
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{name} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("{name} has negative or non-finite mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::invalid(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

fn check_pair(p: &[f64], g: &[f64]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::shape("prediction and ground truth differ in size"));
    }
    check_distribution("prediction", p)?;
    check_distribution("ground truth", g)
}

/// `sum G ln(eps + G / (eps + P))`.
pub fn kld(p: &[f64], g: &[f64]) -> Result<f64> {
    check_pair(p, g)?;
    Ok(p
        .iter()
        .zip(g)
        .map(|(&pv, &gv)| gv * (KLD_EPS + gv / (KLD_EPS + pv)).ln())
        .sum())
}

/// Histogram intersection.
pub fn sim(p: &[f64], g: &[f64]) -> Result<f64> {
    check_pair(p, g)?;
    Ok(p.iter().zip(g).map(|(a, b)| a.min(*b)).sum())
}

/// Standardized value of `p` at a sub-pixel fixation; zero for flat maps.
pub fn nss(p: &[f64], h: usize, w: usize, row: f64, col: f64) -> Result<f64> {
    if p.len() != h * w || p.is_empty() {
        return Err(Error::shape("map size disagrees with its extents"));
    }
    let inside = (0.0..=(h - 1) as f64).contains(&row) && (0.0..=(w - 1) as f64).contains(&col);
    if !inside {
        return Err(Error::invalid(format!("fixation ({row}, {col}) outside {h}x{w}")));
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(0.0);
    }
    let (r0, c0) = (row.floor() as usize, col.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (row - r0 as f64, col - c0 as f64);
    let at = |r: usize, c: usize| p[r * w + c];
    let v = (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1)) + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1));
    Ok((v - mean) / std)
}

/// Maps a sub-pixel position on an `n`-pixel axis onto the `m`-pixel eval axis.
pub fn rescale_coordinate(x: f64, n: usize, m: usize) -> f64 {
    ((x + 0.5) * m as f64 / n as f64 - 0.5).clamp(0.0, (m - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerMetrics {
    pub finger: usize,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
    pub fingers: Vec<FingerMetrics>,
    /// Predicted channels with zero mass; excluded from the means.
    #[serde(default)]
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub averaging: String,
    pub resolution: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<EvalRecord>,
    pub mean: MetricMeans,
    pub meta: EvalMeta,
}

/// One evaluation sample: prediction, ground truth and its fixations.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub pred: HeatmapStack,
    pub gt: HeatmapStack,
    pub annotations: Vec<FingerAnnotation>,
}

fn mean_of(xs: impl Iterator<Item = MetricMeans>) -> Option<MetricMeans> {
    let mut acc = MetricMeans {
        kld: 0.0,
        sim: 0.0,
        nss: 0.0,
    };
    let mut n = 0usize;
    for x in xs {
        acc.kld += x.kld;
        acc.sim += x.sim;
        acc.nss += x.nss;
        n += 1;
    }
    (n > 0).then(|| MetricMeans {
        kld: acc.kld / n as f64,
        sim: acc.sim / n as f64,
        nss: acc.nss / n as f64,
    })
}

/// Scores every annotated finger; unannotated or massless ground-truth
/// channels are skipped.
pub fn evaluate_sample(sample: &EvalSample) -> Result<EvalRecord> {
    if sample.pred.fingers() != sample.gt.fingers() {
        return Err(Error::shape(format!(
            "sample {}: prediction has {} channels, ground truth {}",
            sample.id,
            sample.pred.fingers(),
            sample.gt.fingers()
        )));
    }
    let p = normalize_for_eval(&sample.pred)?;
    let g = normalize_for_eval(&sample.gt)?;
    let mut anns = sample.annotations.clone();
    anns.sort_by_key(|a| a.id);
    let mut fingers = Vec::new();
    let mut flagged = p.zero_mass_channels();
    flagged.retain(|k| anns.iter().any(|a| a.id == *k));
    for a in &anns {
        if a.id >= sample.gt.fingers() {
            return Err(Error::invalid(format!("sample {}: finger id {} out of range", sample.id, a.id)));
        }
        let (Some(pc), Some(gc)) = (&p.channels[a.id], &g.channels[a.id]) else {
            continue;
        };
        let row = rescale_coordinate(a.row, sample.gt.height(), EVAL_SIZE);
        let col = rescale_coordinate(a.col, sample.gt.width(), EVAL_SIZE);
        fingers.push(FingerMetrics {
            finger: a.id,
            kld: kld(pc, gc)?,
            sim: sim(pc, gc)?,
            nss: nss(pc, EVAL_SIZE, EVAL_SIZE, row, col)?,
        });
    }
    let m = mean_of(fingers.iter().map(|f| MetricMeans {
        kld: f.kld,
        sim: f.sim,
        nss: f.nss,
    }))
    .ok_or_else(|| Error::invalid(format!("sample {} has no scorable finger", sample.id)))?;
    Ok(EvalRecord {
        id: sample.id.clone(),
        kld: m.kld,
        sim: m.sim,
        nss: m.nss,
        fingers,
        flagged,
    })
}

/// Averages over fingers within a sample, then over samples sorted by id.
pub fn evaluate_set(samples: &[EvalSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate sample id"));
    }
    let mut per_sample = samples
        .par_iter()
        .map(evaluate_sample)
        .collect::<Result<Vec<_>>>()?;
    per_sample.sort_by(|a, b| a.id.cmp(&b.id));
    let mean = mean_of(per_sample.iter().map(|r| MetricMeans {
        kld: r.kld,
        sim: r.sim,
        nss: r.nss,
    }))
    .expect("non-empty");
    Ok(EvalReport {
        per_sample,
        mean,
        meta: EvalMeta {
            averaging: "finger-then-sample".into(),
            resolution: EVAL_SIZE,
            epsilon: KLD_EPS,
        },
    })
}

/// Pairs predictions with ground truths by id, rejecting mismatches.
pub fn pair_samples(
    preds: Vec<(String, HeatmapStack)>,
    gts: Vec<(String, HeatmapStack, Vec<FingerAnnotation>)>,
) -> Result<Vec<EvalSample>> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut gts = gts;
    preds
        .into_iter()
        .map(|(id, pred)| {
            let i = gts
                .iter()
                .position(|g| g.0 == id)
                .ok_or_else(|| Error::invalid(format!("no ground truth for sample {id}")))?;
            let (_, gt, annotations) = gts.swap_remove(i);
            Ok(EvalSample {
                id,
                pred,
                gt,
                annotations,
            })
        })
        .collect()
}

/// CSV mirror of a report: one row per sample plus a `mean` row.
pub fn report_csv_rows(report: &EvalReport) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = report
        .per_sample
        .iter()
        .map(|r| vec![r.id.clone(), r.kld.to_string(), r.sim.to_string(), r.nss.to_string()])
        .collect();
    rows.push(vec![
        "mean".into(),
        report.mean.kld.to_string(),
        report.mean.sim.to_string(),
        report.mean.nss.to_string(),
    ]);
    rows
}
