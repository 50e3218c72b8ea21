use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskdecomp::metrics::{hard_dice, hard_iou, hausdorff, MaskView};
use taskdecomp::synthdata::generate_samples;
use taskdecomp::{evaluate, Prediction, Result, Segmenter, Tensor, WorldSpec};

fn pixels(m: &[usize], w: usize, k: usize) -> Vec<(i64, i64)> {
    m.iter()
        .enumerate()
        .filter(|&(_, &l)| l == k)
        .map(|(i, _)| ((i / w) as i64, (i % w) as i64))
        .collect()
}

fn iou_oracle(a: &[usize], b: &[usize], k: usize) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|&(&x, &y)| x == k && y == k).count();
    let union = a.iter().zip(b).filter(|&(&x, &y)| x == k || y == k).count();
    (union > 0).then(|| inter as f64 / union as f64)
}

fn dice_oracle(a: &[usize], b: &[usize], k: usize) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|&(&x, &y)| x == k && y == k).count();
    let total = a.iter().filter(|&&x| x == k).count() + b.iter().filter(|&&y| y == k).count();
    (total > 0).then(|| 2.0 * inter as f64 / total as f64)
}

fn hd_oracle(a: &[usize], b: &[usize], w: usize, k: usize) -> Option<f64> {
    let (pa, pb) = (pixels(a, w, k), pixels(b, w, k));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

fn check_pair(a: &[usize], b: &[usize], h: usize, w: usize, k: usize) {
    let (va, vb) = (MaskView::new(a, h, w).unwrap(), MaskView::new(b, h, w).unwrap());
    let iou = hard_iou(&va, &vb, k).unwrap();
    let dice = hard_dice(&va, &vb, k).unwrap();
    let hd = hausdorff(&va, &vb, k).unwrap();
    assert_eq!(iou, iou_oracle(a, b, k), "{a:?} {b:?}");
    assert_eq!(dice, dice_oracle(a, b, k), "{a:?} {b:?}");
    assert_eq!(hd, hd_oracle(a, b, w, k), "{a:?} {b:?}");
    assert_eq!(hd, hausdorff(&vb, &va, k).unwrap());
    if let (Some(i), Some(d)) = (iou, dice) {
        assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
    }
}

#[test]
fn exhaustive_three_by_three_binary_masks() {
    let unpack = |bits: u32| (0..9).map(|i| ((bits >> i) & 1) as usize).collect::<Vec<_>>();
    let masks: Vec<Vec<usize>> = (0..512).map(unpack).collect();
    for a in &masks {
        for b in &masks {
            check_pair(a, b, 3, 3, 1);
        }
    }
}

#[test]
fn random_eight_by_eight_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let density = rng.gen_range(0.0..1.0);
        let mut draw = || (0..64).map(|_| usize::from(rng.gen_bool(density))).collect::<Vec<_>>();
        let (a, b) = (draw(), draw());
        check_pair(&a, &b, 8, 8, 1);
        check_pair(&a, &b, 8, 8, 0);
    }
}

#[test]
fn mismatched_sizes_are_rejected() {
    let a = [0usize; 6];
    assert!(MaskView::new(&a, 2, 2).is_err());
    let (va, vb) = (MaskView::new(&a, 2, 3).unwrap(), MaskView::new(&a, 3, 2).unwrap());
    assert!(hard_iou(&va, &vb, 1).is_err());
    assert!(hausdorff(&va, &vb, 1).is_err());
}

/// Reads the mask straight off the image with the world's threshold rule.
struct ThresholdStub {
    world: WorldSpec,
}

impl Segmenter for ThresholdStub {
    fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let k = self.world.num_classes();
        let hw = image.len();
        let mut seg = vec![0.0; k * hw];
        let mut present = vec![-10.0; k - 1];
        for (p, &v) in image.data().iter().enumerate() {
            let l = self.world.threshold_label(v);
            seg[l * hw + p] = 1.0;
            if l > 0 {
                present[l - 1] = 10.0;
            }
        }
        let scene = self
            .world
            .scenes
            .iter()
            .position(|allowed| (1..k).all(|c| present[c - 1] < 0.0 || allowed.contains(&c)))
            .unwrap();
        let mut scene_logits = vec![0.0; self.world.num_scenes()];
        scene_logits[scene] = 1.0;
        Ok(Prediction {
            seg_logits: Tensor::new(vec![k, self.world.height, self.world.width], seg)?,
            class_logits: Tensor::from_vec(present),
            scene_logits: Tensor::from_vec(scene_logits),
        })
    }
}

struct BackgroundStub;

impl Segmenter for BackgroundStub {
    fn predict(&self, _image: &Tensor) -> Result<Prediction> {
        let mut seg = Tensor::zeros(&[4, 32, 32]);
        seg.data_mut()[..1024].fill(1.0);
        Ok(Prediction {
            seg_logits: seg,
            class_logits: Tensor::full(&[3], -1.0),
            scene_logits: Tensor::from_vec(vec![1.0, 0.0]),
        })
    }
}

/// Pseudo-random output seeded by the image contents.
struct RandomStub;

impl RandomStub {
    fn rng(image: &Tensor) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(image.data().iter().fold(0u64, |h, v| h.rotate_left(5) ^ v.to_bits()))
    }
}

impl Segmenter for RandomStub {
    fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut rng = Self::rng(image);
        let seg = (0..4 * 1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Prediction {
            seg_logits: Tensor::new(vec![4, 32, 32], seg)?,
            class_logits: Tensor::from_vec((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            scene_logits: Tensor::from_vec((0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        })
    }
}

#[test]
fn perfect_predictor_scores_perfectly() {
    let world = WorldSpec::default();
    let samples = generate_samples(&world, 40, 1).unwrap();
    let r = evaluate(&ThresholdStub { world }, &samples, 4).unwrap();
    assert_eq!(r.num_samples, 40);
    assert_eq!(r.mean_iou, Some(1.0));
    assert_eq!(r.mean_dice, Some(1.0));
    assert_eq!(r.mean_hd, Some(0.0));
    assert_eq!(r.class_accuracy, 1.0);
    assert_eq!(r.scene_accuracy, 1.0);
}

#[test]
fn background_predictor_scores_zero() {
    let samples = generate_samples(&WorldSpec::default(), 40, 2).unwrap();
    let r = evaluate(&BackgroundStub, &samples, 4).unwrap();
    assert_eq!(r.mean_iou, Some(0.0));
    assert_eq!(r.mean_dice, Some(0.0));
    assert_eq!(r.mean_hd, None);
    assert!(r.per_class_hd.iter().all(Option::is_none));
    assert_eq!(r.class_accuracy, 0.0);
    let scene0 = samples.iter().filter(|s| s.scene == 0).count() as f64 / 40.0;
    assert_eq!(r.scene_accuracy, scene0);
    assert!(r.to_text().contains("mean_hd=undefined"));
}

#[test]
fn random_predictor_matches_per_sample_oracle() {
    let samples = generate_samples(&WorldSpec::default(), 25, 3).unwrap();
    let r = evaluate(&RandomStub, &samples, 4).unwrap();
    let mut per_sample_iou = Vec::new();
    let mut per_sample_hd = Vec::new();
    let mut class_iou: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let (mut cls, mut scn) = (0, 0);
    for s in &samples {
        let p = RandomStub.predict(&s.image).unwrap();
        let labels = p.seg_logits.argmax_channels().unwrap();
        let ious: Vec<f64> = (1..4).filter_map(|k| iou_oracle(&labels, &s.mask, k)).collect();
        for k in 1..4 {
            if let Some(v) = iou_oracle(&labels, &s.mask, k) {
                class_iou[k - 1].push(v);
            }
        }
        let hds: Vec<f64> = (1..4).filter_map(|k| hd_oracle(&labels, &s.mask, 32, k)).collect();
        per_sample_iou.push(ious.iter().sum::<f64>() / ious.len() as f64);
        if !hds.is_empty() {
            per_sample_hd.push(hds.iter().sum::<f64>() / hds.len() as f64);
        }
        let bits: Vec<u8> = p.class_logits.data().iter().map(|&z| u8::from(z > 0.0)).collect();
        cls += usize::from(bits == s.class_presence);
        let d = p.scene_logits.data();
        scn += usize::from(usize::from(d[1] > d[0]) == s.scene);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((r.mean_iou.unwrap() - mean(&per_sample_iou)).abs() < 1e-12);
    assert!((r.mean_hd.unwrap() - mean(&per_sample_hd)).abs() < 1e-12);
    for k in 0..3 {
        let expect = (!class_iou[k].is_empty()).then(|| mean(&class_iou[k]));
        match (r.per_class_iou[k], expect) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }
    assert_eq!(r.class_accuracy, cls as f64 / 25.0);
    assert_eq!(r.scene_accuracy, scn as f64 / 25.0);
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(evaluate(&BackgroundStub, &[], 4).is_err());
}

proptest! {
    #[test]
    fn hausdorff_is_a_symmetric_metric(
        a in prop::collection::vec(0usize..3, 30),
        b in prop::collection::vec(0usize..3, 30),
        c in prop::collection::vec(0usize..3, 30),
    ) {
        fn v(m: &[usize]) -> MaskView<'_> {
            MaskView::new(m, 5, 6).unwrap()
        }
        for k in 1..3 {
            let ab = hausdorff(&v(&a), &v(&b), k).unwrap();
            prop_assert_eq!(ab, hausdorff(&v(&b), &v(&a), k).unwrap());
            if let Some(aa) = hausdorff(&v(&a), &v(&a), k).unwrap() {
                prop_assert_eq!(aa, 0.0);
            }
            if let (Some(ab), Some(bc), Some(ac)) = (
                ab,
                hausdorff(&v(&b), &v(&c), k).unwrap(),
                hausdorff(&v(&a), &v(&c), k).unwrap(),
            ) {
                prop_assert!(ac <= ab + bc + 1e-12);
            }
        }
    }

    #[test]
    fn dice_iou_identity(a in prop::collection::vec(0usize..4, 64), b in prop::collection::vec(0usize..4, 64)) {
        let (va, vb) = (MaskView::new(&a, 8, 8).unwrap(), MaskView::new(&b, 8, 8).unwrap());
        for k in 0..4 {
            if let (Some(i), Some(d)) = (hard_iou(&va, &vb, k).unwrap(), hard_dice(&va, &vb, k).unwrap()) {
                prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&i) && i <= d);
            }
        }
    }
}
