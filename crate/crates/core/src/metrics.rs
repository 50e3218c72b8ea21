//! Hard per-class IoU, Dice and exact Hausdorff distance, and dataset-level
//! aggregation.
//!
//! A class that is absent from both masks has no IoU or Dice; a class absent
//! from either mask has no Hausdorff distance. Undefined entries are left out
//! of every mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Prediction, TaskDecompModel};
use crate::synthdata::Sample;
use crate::tensor::Tensor;

/// Row-major integer label mask.
#[derive(Clone, Copy, Debug)]
pub struct MaskView<'a> {
    pub labels: &'a [usize],
    pub height: usize,
    pub width: usize,
}

impl<'a> MaskView<'a> {
    pub fn new(labels: &'a [usize], height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} labels for a {height}x{width} mask", labels.len()),
            ));
        }
        Ok(Self { labels, height, width })
    }
}

fn check_same(op: &'static str, a: &MaskView, b: &MaskView) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

/// `(|pred ∩ gt|, |pred|, |gt|)` for class `k`.
fn counts(pred: &MaskView, gt: &MaskView, k: usize) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.labels.iter().zip(gt.labels) {
        let (ip, ig) = (p == k, g == k);
        c.0 += usize::from(ip && ig);
        c.1 += usize::from(ip);
        c.2 += usize::from(ig);
    }
    c
}

pub fn hard_iou(pred: &MaskView, gt: &MaskView, k: usize) -> Result<Option<f64>> {
    check_same("hard_iou", pred, gt)?;
    let (i, p, g) = counts(pred, gt, k);
    let union = p + g - i;
    Ok((union > 0).then(|| i as f64 / union as f64))
}

pub fn hard_dice(pred: &MaskView, gt: &MaskView, k: usize) -> Result<Option<f64>> {
    check_same("hard_dice", pred, gt)?;
    let (i, p, g) = counts(pred, gt, k);
    Ok((p + g > 0).then(|| 2.0 * i as f64 / (p + g) as f64))
}

/// Largest squared distance from a pixel of `from` to its nearest pixel of `to`.
///
/// Per column, the vertical distance to the nearest `to` pixel is computed
/// once; the nearest neighbour of a query is then a minimum over columns.
fn directed_sq(from: &[(usize, usize)], to_mask: &[bool], h: usize, w: usize) -> u64 {
    const FAR: u64 = u64::MAX / 4;
    // col_dist[x * h + y]: squared vertical distance from (y, x) to the nearest target in column x.
    let mut col_dist = vec![FAR; h * w];
    for x in 0..w {
        let col = &mut col_dist[x * h..(x + 1) * h];
        let mut last: Option<usize> = None;
        for (y, d) in col.iter_mut().enumerate() {
            if to_mask[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                *d = ((y - l) as u64).pow(2);
            }
        }
        last = None;
        for y in (0..h).rev() {
            if to_mask[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y] = col[y].min(((l - y) as u64).pow(2));
            }
        }
    }
    let mut worst = 0;
    for &(ya, xa) in from {
        let mut best = FAR;
        for x in 0..w {
            let v = col_dist[x * h + ya];
            if v == FAR {
                continue;
            }
            let dx = xa.abs_diff(x) as u64;
            best = best.min(v + dx * dx);
        }
        worst = worst.max(best);
    }
    worst
}

/// Exact symmetric Hausdorff distance between the class-`k` pixel sets, in
/// pixel units (Euclidean distance between pixel centers).
pub fn hausdorff(pred: &MaskView, gt: &MaskView, k: usize) -> Result<Option<f64>> {
    check_same("hausdorff", pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let set = |m: &MaskView| -> (Vec<(usize, usize)>, Vec<bool>) {
        let bits: Vec<bool> = m.labels.iter().map(|&l| l == k).collect();
        let pts = (0..h * w).filter(|&i| bits[i]).map(|i| (i / w, i % w)).collect();
        (pts, bits)
    };
    let (pa, ma) = set(pred);
    let (pb, mb) = set(gt);
    if pa.is_empty() || pb.is_empty() {
        return Ok(None);
    }
    let d2 = directed_sq(&pa, &mb, h, w).max(directed_sq(&pb, &ma, h, w));
    Ok(Some((d2 as f64).sqrt()))
}

/// Anything that produces the three task outputs for an image.
pub trait Segmenter {
    fn predict(&self, image: &Tensor) -> Result<Prediction>;
}

impl Segmenter for TaskDecompModel {
    fn predict(&self, image: &Tensor) -> Result<Prediction> {
        TaskDecompModel::predict(self, image)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_samples: usize,
    /// Foreground classes `1..K`, each averaged over samples where defined.
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_dice: Vec<Option<f64>>,
    pub per_class_hd: Vec<Option<f64>>,
    /// Mean over samples of the per-sample mean over defined classes.
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub mean_hd: Option<f64>,
    /// Fraction of samples whose thresholded presence vector is entirely correct.
    pub class_accuracy: f64,
    pub scene_accuracy: f64,
}

/// Per-sample, per-class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub iou: Vec<Option<f64>>,
    pub dice: Vec<Option<f64>>,
    pub hd: Vec<Option<f64>>,
}

pub fn score_masks(pred: &MaskView, gt: &MaskView, num_classes: usize) -> Result<SampleScores> {
    let mut s = SampleScores {
        iou: Vec::with_capacity(num_classes - 1),
        dice: Vec::with_capacity(num_classes - 1),
        hd: Vec::with_capacity(num_classes - 1),
    };
    for k in 1..num_classes {
        s.iou.push(hard_iou(pred, gt, k)?);
        s.dice.push(hard_dice(pred, gt, k)?);
        s.hd.push(hausdorff(pred, gt, k)?);
    }
    Ok(s)
}

fn mean_defined(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = xs
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores `predictor` on `samples` with argmax segmentation.
pub fn evaluate<P: Segmenter + ?Sized>(predictor: &P, samples: &[Sample], num_classes: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let mut all = Vec::with_capacity(samples.len());
    let mut class_hits = 0usize;
    let mut scene_hits = 0usize;
    for s in samples {
        let pred = predictor.predict(&s.image)?;
        let labels = pred
            .seg_logits
            .argmax_channels()
            .ok_or_else(|| Error::shape("evaluate", "segmentation output must be [K,H,W]"))?;
        let (h, w) = (s.height(), s.width());
        let scores = score_masks(&MaskView::new(&labels, h, w)?, &MaskView::new(&s.mask, h, w)?, num_classes)?;
        all.push(scores);

        let presence: Vec<u8> = pred.class_logits.data().iter().map(|&z| u8::from(z > 0.0)).collect();
        class_hits += usize::from(presence == s.class_presence);
        let scene = argmax(pred.scene_logits.data());
        scene_hits += usize::from(scene == s.scene);
    }
    let per_class = |f: fn(&SampleScores) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
        (0..num_classes - 1)
            .map(|k| mean_defined(all.iter().map(|s| f(s)[k])))
            .collect()
    };
    let overall = |f: fn(&SampleScores) -> &Vec<Option<f64>>| -> Option<f64> {
        mean_defined(all.iter().map(|s| mean_defined(f(s).iter().copied())))
    };
    let n = samples.len() as f64;
    Ok(MetricReport {
        num_samples: samples.len(),
        per_class_iou: per_class(|s| &s.iou),
        per_class_dice: per_class(|s| &s.dice),
        per_class_hd: per_class(|s| &s.hd),
        mean_iou: overall(|s| &s.iou),
        mean_dice: overall(|s| &s.dice),
        mean_hd: overall(|s| &s.hd),
        class_accuracy: class_hits as f64 / n,
        scene_accuracy: scene_hits as f64 / n,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: String, v: String| {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("num_samples".into(), self.num_samples.to_string());
        line("mean_iou".into(), fmt_opt(self.mean_iou));
        line("mean_dice".into(), fmt_opt(self.mean_dice));
        line("mean_hd".into(), fmt_opt(self.mean_hd));
        line("class_accuracy".into(), format!("{:.6}", self.class_accuracy));
        line("scene_accuracy".into(), format!("{:.6}", self.scene_accuracy));
        for (i, ((iou, dice), hd)) in self
            .per_class_iou
            .iter()
            .zip(&self.per_class_dice)
            .zip(&self.per_class_hd)
            .enumerate()
        {
            let k = i + 1;
            line(format!("class{k}.iou"), fmt_opt(*iou));
            line(format!("class{k}.dice"), fmt_opt(*dice));
            line(format!("class{k}.hd"), fmt_opt(*hd));
        }
        out
    }

    /// One JSON object on a single line.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
