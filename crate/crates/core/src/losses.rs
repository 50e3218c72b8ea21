//! Segmentation, class, scene and sync-regularization losses and their
//! weighted total.
//!
//! Every loss is a mean over pixels (or vector entries) of one sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{linear_combination, Graph, Var};
use crate::tensor::Tensor;

/// Values the task weights are swept over.
pub const WEIGHT_GRID: [f64; 5] = [0.0, 0.2, 0.4, 0.8, 1.0];

/// How the segmentation output is turned into a class-presence vector for
/// the sync term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Boolean presence of each argmax label, used as a constant target.
    #[default]
    HardDetached,
    /// Per-class maximum softmax probability; differentiable.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Class task.
    pub w1: f64,
    /// Scene task.
    pub w2: f64,
    /// Sync regularization.
    pub w3: f64,
    #[serde(default)]
    pub projection: ProjectionMode,
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Self {
        Self {
            w1,
            w2,
            w3,
            projection: ProjectionMode::default(),
        }
    }

    pub fn with_projection(mut self, projection: ProjectionMode) -> Self {
        self.projection = projection;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// The four loss components of one evaluation and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_cla: f64,
    pub l_scene: f64,
    pub l_sync: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean; empty input gives all zeros.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l_seg += b.l_seg;
            m.l_cla += b.l_cla;
            m.l_scene += b.l_scene;
            m.l_sync += b.l_sync;
            m.total += b.total;
        }
        m.l_seg /= n;
        m.l_cla /= n;
        m.l_scene /= n;
        m.l_sync /= n;
        m.total /= n;
        m
    }
}

/// `[K,H,W]` one-hot encoding of an integer mask.
pub fn onehot(mask: &[usize], k: usize, h: usize, w: usize) -> Result<Tensor> {
    let n = h * w;
    if mask.len() != n {
        return Err(Error::shape("onehot", format!("mask has {} pixels, expected {n}", mask.len())));
    }
    let mut data = vec![0.0; k * n];
    for (p, &l) in mask.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidArgument(format!("mask label {l} out of range for K={k}")));
        }
        data[l * n + p] = 1.0;
    }
    Tensor::new(vec![k, h, w], data)
}

pub fn pixel_cross_entropy(g: &mut Graph, seg_logits: Var, gt_mask: &[usize]) -> Result<Var> {
    g.pixel_cross_entropy(seg_logits, gt_mask)
}

pub fn soft_iou(g: &mut Graph, seg_probs: Var, gt_onehot: &Tensor) -> Result<Var> {
    g.soft_iou(seg_probs, gt_onehot)
}

/// `CE + (1 - softIoU)`.
pub fn seg_loss(g: &mut Graph, seg_logits: Var, gt_mask: &[usize]) -> Result<Var> {
    let (k, h, w) = g
        .value(seg_logits)
        .chw()
        .ok_or_else(|| Error::shape("seg_loss", format!("logits must be [K,H,W], got {:?}", g.shape(seg_logits))))?;
    let ce = g.pixel_cross_entropy(seg_logits, gt_mask)?;
    let probs = g.softmax_channels(seg_logits)?;
    let target = onehot(gt_mask, k, h, w)?;
    let iou = g.soft_iou(probs, &target)?;
    g.linear(1.0, &[(ce, 1.0), (iou, -1.0)])
}

/// Mean clamped BCE of `sigmoid(pred_logits)` against `target`.
///
/// Targets must be exactly 0 or 1 unless `soft_targets` is set, in which
/// case any value in `[0, 1]` is accepted.
pub fn binary_cross_entropy(g: &mut Graph, pred_logits: Var, target: Var, soft_targets: bool) -> Result<Var> {
    for &t in g.value(target).data() {
        let ok = if soft_targets {
            (0.0..=1.0).contains(&t)
        } else {
            t == 0.0 || t == 1.0
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("BCE target {t} outside the allowed range")));
        }
    }
    g.binary_cross_entropy(pred_logits, target)
}

/// Foreground presence implied by the per-pixel argmax of `seg_logits`:
/// entry `k-1` is 1 iff some pixel's argmax is `k`.
pub fn project_classes_hard(seg_logits: &Tensor) -> Result<Tensor> {
    let (k, _, _) = seg_logits
        .chw()
        .ok_or_else(|| Error::shape("project_classes", format!("expected [K,H,W], got {:?}", seg_logits.shape())))?;
    if k < 2 {
        return Err(Error::InvalidArgument("project_classes needs K >= 2".into()));
    }
    let mut present = vec![0.0; k - 1];
    for l in seg_logits.argmax_channels().expect("chw checked") {
        if l > 0 {
            present[l - 1] = 1.0;
        }
    }
    Ok(Tensor::from_vec(present))
}

/// Class-presence projection of a recorded segmentation output.
///
/// `HardDetached` expects logits and returns a constant (no gradient);
/// `Soft` expects channel-softmax probabilities and returns the per-class
/// spatial maximum.
pub fn project_classes(g: &mut Graph, seg_output: Var, mode: ProjectionMode) -> Result<Var> {
    match mode {
        ProjectionMode::HardDetached => {
            let p = project_classes_hard(g.value(seg_output))?;
            Ok(g.detached(p))
        }
        ProjectionMode::Soft => g.foreground_max(seg_output),
    }
}

/// BCE between the class head and the projected segmentation output.
pub fn sync_loss(g: &mut Graph, seg_logits: Var, class_logits: Var, mode: ProjectionMode) -> Result<Var> {
    let target = match mode {
        ProjectionMode::HardDetached => project_classes(g, seg_logits, mode)?,
        ProjectionMode::Soft => {
            let probs = g.softmax_channels(seg_logits)?;
            project_classes(g, probs, mode)?
        }
    };
    binary_cross_entropy(g, class_logits, target, mode == ProjectionMode::Soft)
}

/// Scalar loss components in the order `[seg, cla, scene, sync]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub l_seg: f64,
    pub l_cla: f64,
    pub l_scene: f64,
    pub l_sync: f64,
}

/// `l_seg + w1 l_cla + w2 l_scene + w3 l_sync`, with the breakdown.
pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_seg", parts.l_seg),
        ("l_cla", parts.l_cla),
        ("l_scene", parts.l_scene),
        ("l_sync", parts.l_sync),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss component {name} ({v})"),
            });
        }
    }
    let total = linear_combination(
        0.0,
        &[
            (parts.l_seg, 1.0),
            (parts.l_cla, weights.w1),
            (parts.l_scene, weights.w2),
            (parts.l_sync, weights.w3),
        ],
    );
    Ok(LossBreakdown {
        l_seg: parts.l_seg,
        l_cla: parts.l_cla,
        l_scene: parts.l_scene,
        l_sync: parts.l_sync,
        total,
    })
}

/// Recorded counterpart of [`total_loss`]; bit-identical value.
pub fn total_loss_var(g: &mut Graph, seg: Var, cla: Var, scene: Var, sync: Var, weights: &LossWeights) -> Result<Var> {
    g.linear(
        0.0,
        &[(seg, 1.0), (cla, weights.w1), (scene, weights.w2), (sync, weights.w3)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[4, 3, 3]));
        let ce = pixel_cross_entropy(&mut g, z, &[0, 1, 2, 3, 0, 1, 2, 3, 0]).unwrap();
        assert!((scalar(&g, ce) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_confident_is_near_zero() {
        let mask = [0, 1, 2, 1];
        let mut logits = Tensor::zeros(&[3, 2, 2]);
        for (p, &l) in mask.iter().enumerate() {
            logits.data_mut()[l * 4 + p] = 25.0;
        }
        let mut g = Graph::new();
        let z = g.input(logits);
        let ce = pixel_cross_entropy(&mut g, z, &mask).unwrap();
        assert!(scalar(&g, ce) < 1e-6);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[2, 1, 2]));
        assert!(pixel_cross_entropy(&mut g, z, &[0, 2]).is_err());
    }

    #[test]
    fn ce_matches_hand_computation() {
        // 2 classes, 3x3 pixels, logits chosen by hand.
        let l0: [f64; 9] = [0.3, -1.0, 2.0, 0.0, 0.5, -0.2, 1.1, 0.9, -2.0];
        let l1: [f64; 9] = [-0.4, 0.7, 0.1, 1.5, 0.5, 0.3, -1.0, 0.0, 2.5];
        let mask = [0, 1, 0, 1, 1, 0, 0, 1, 1];
        let mut expect = 0.0;
        for p in 0..9 {
            let (a, b) = (l0[p], l1[p]);
            let z = a.exp() + b.exp();
            let prob = if mask[p] == 0 { a.exp() / z } else { b.exp() / z };
            expect -= prob.ln();
        }
        expect /= 9.0;
        let mut data = l0.to_vec();
        data.extend_from_slice(&l1);
        let mut g = Graph::new();
        let z = g.input(Tensor::new(vec![2, 3, 3], data).unwrap());
        let ce = pixel_cross_entropy(&mut g, z, &mask).unwrap();
        assert!((scalar(&g, ce) - expect).abs() < 1e-14);
    }

    #[test]
    fn soft_iou_of_ground_truth_is_one() {
        let mask = [0, 1, 2, 2, 1, 0];
        let y = onehot(&mask, 3, 2, 3).unwrap();
        let mut g = Graph::new();
        let p = g.input(y.clone());
        let iou = soft_iou(&mut g, p, &y).unwrap();
        assert!((scalar(&g, iou) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn soft_iou_uniform_probs_single_class() {
        // Per class: I = HW/K, U = HW/K + HW - HW/K = HW, so IoU = 1/K.
        let (k, h, w) = (4, 3, 5);
        let y = onehot(&[2; 15], k, h, w).unwrap();
        let mut g = Graph::new();
        let p = g.input(Tensor::full(&[k, h, w], 1.0 / k as f64));
        let iou = soft_iou(&mut g, p, &y).unwrap();
        let hw = (h * w) as f64;
        let expect = (hw / k as f64) / (hw + 1e-7);
        assert!((scalar(&g, iou) - expect).abs() < 1e-15);
    }

    #[test]
    fn seg_loss_uniform_binary_balanced() {
        // p = 1/2 everywhere, N/2 pixels per class: I = N/4, U = N/2 + N/2 - N/4.
        let mask = [0, 1, 0, 1, 1, 0, 0, 1];
        let n = 8.0;
        let iou = (n / 4.0) / (3.0 * n / 4.0 + 1e-7);
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[2, 2, 4]));
        let l = seg_loss(&mut g, z, &mask).unwrap();
        assert!((scalar(&g, l) - (LN_2 + 1.0 - iou)).abs() < 1e-14);
    }

    #[test]
    fn seg_loss_perfect_prediction() {
        let mask = [1, 0, 2, 2, 0, 1];
        let mut logits = Tensor::full(&[3, 2, 3], -15.0);
        for (p, &l) in mask.iter().enumerate() {
            logits.data_mut()[l * 6 + p] = 15.0;
        }
        let mut g = Graph::new();
        let z = g.input(logits);
        let l = seg_loss(&mut g, z, &mask).unwrap();
        assert!(scalar(&g, l) < 1e-5);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let z = g.input(Tensor::from_vec(vec![0.0]));
        let t = g.input(Tensor::from_vec(vec![1.0]));
        let l = binary_cross_entropy(&mut g, z, t, false).unwrap();
        assert!((scalar(&g, l) - LN_2).abs() < 1e-15);

        let z = g.input(Tensor::from_vec(vec![30.0]));
        let l = binary_cross_entropy(&mut g, z, t, false).unwrap();
        assert!(scalar(&g, l) <= -(1.0f64 - 1e-7).ln() + 1e-18);
    }

    #[test]
    fn bce_matches_hand_computation() {
        let z = [0.4, -1.3, 2.2, 0.0, -0.7];
        let t = [1.0, 0.0, 1.0, 0.0, 1.0];
        let expect = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let s = 1.0 / (1.0 + (-z as f64).exp());
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 5.0;
        let mut g = Graph::new();
        let zv = g.input(Tensor::from_vec(z.to_vec()));
        let tv = g.input(Tensor::from_vec(t.to_vec()));
        let l = binary_cross_entropy(&mut g, zv, tv, false).unwrap();
        assert!((scalar(&g, l) - expect).abs() < 1e-14);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut g = Graph::new();
        let z = g.input(Tensor::from_vec(vec![0.0, 0.0]));
        let t = g.input(Tensor::from_vec(vec![0.5, 1.0]));
        assert!(binary_cross_entropy(&mut g, z, t, false).is_err());
        assert!(binary_cross_entropy(&mut g, z, t, true).is_ok());
        let bad = g.input(Tensor::from_vec(vec![1.5, 1.0]));
        assert!(binary_cross_entropy(&mut g, z, bad, true).is_err());
    }

    #[test]
    fn hard_projection_examples() {
        // K = 4 (background + 3), argmax labels {0, 1, 3}.
        let mask = [0, 1, 3, 0];
        let logits = onehot(&mask, 4, 2, 2).unwrap();
        assert_eq!(project_classes_hard(&logits).unwrap().data(), &[1.0, 0.0, 1.0]);
        let bg = onehot(&[0; 4], 4, 2, 2).unwrap();
        assert_eq!(project_classes_hard(&bg).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sync_loss_saturated_and_neutral() {
        let mask = [0, 2, 2, 0];
        let logits = onehot(&mask, 3, 2, 2).unwrap();
        let mut g = Graph::new();
        let s = g.input(logits);
        let c = g.input(Tensor::from_vec(vec![-30.0, 30.0]));
        let l = sync_loss(&mut g, s, c, ProjectionMode::HardDetached).unwrap();
        assert!(scalar(&g, l) <= 1e-6);

        let c0 = g.input(Tensor::from_vec(vec![0.0, 0.0]));
        for mode in [ProjectionMode::HardDetached, ProjectionMode::Soft] {
            let l = sync_loss(&mut g, s, c0, mode).unwrap();
            assert!((scalar(&g, l) - LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let parts = LossParts {
            l_seg: 1.0,
            l_cla: 2.0,
            l_scene: 3.0,
            l_sync: 4.0,
        };
        let b = total_loss(parts, &LossWeights::new(0.2, 0.4, 0.8)).unwrap();
        assert!((b.total - 5.8).abs() < 1e-12);
        let b = total_loss(parts, &LossWeights::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(b.total.to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn total_loss_names_non_finite_component() {
        let parts = LossParts {
            l_seg: 1.0,
            l_cla: 2.0,
            l_scene: f64::NAN,
            l_sync: 4.0,
        };
        let err = total_loss(parts, &LossWeights::new(1.0, 1.0, 1.0)).unwrap_err();
        assert!(err.to_string().contains("l_scene"));
    }
}
