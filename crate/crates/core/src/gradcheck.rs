//! Central finite-difference gradient checking.
//!
//! Every perturbed evaluation is compared against the unperturbed
//! [`Graph::kink_signature`]; elements whose ±step crosses a relu kink, a
//! clamp boundary or a max switch are skipped rather than scored.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{ConvOpts, Graph, Var};
use crate::losses::{self, LossWeights, ProjectionMode, WEIGHT_GRID};
use crate::model::{ModelConfig, TaskDecompModel};
use crate::synthdata::Sample;
use crate::trainer::sample_loss;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub denom_clamp: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_elems_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            denom_clamp: 1e-8,
            max_elems_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// `(tensor index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: None,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }

    fn record(&mut self, tensor: usize, elem: usize, analytic: f64, numeric: f64, clamp: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric, clamp);
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((tensor, elem, analytic, numeric));
        }
    }
}

/// `|a - n| / max(|a|, |n|, clamp)`.
pub fn relative_error(analytic: f64, numeric: f64, clamp: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(clamp)
}

fn chosen_elements(len: usize, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cfg.max_elems_per_tensor {
        Some(m) if m < len => {
            let mut v = sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks the gradient of a scalar built from differentiable leaves.
///
/// `build` receives one leaf per entry of `inputs` and returns the scalar
/// output.
pub fn check_leaves<F>(name: &str, inputs: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g.value(out).item(), g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    g.backward_leaves(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut report = GradCheckReport::new(name, cfg.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xs = inputs.to_vec();
    for ti in 0..xs.len() {
        for ei in chosen_elements(xs[ti].len(), cfg, &mut rng) {
            let orig = xs[ti].data()[ei];
            xs[ti].data_mut()[ei] = orig + cfg.step;
            let (fp, sp) = eval(&xs)?;
            xs[ti].data_mut()[ei] = orig - cfg.step;
            let (fm, sm) = eval(&xs)?;
            xs[ti].data_mut()[ei] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            report.record(ti, ei, analytic[ti][ei], numeric, cfg.denom_clamp);
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar w.r.t. every parameter in `store`.
///
/// `store` is restored exactly before returning; its gradient buffers are
/// left zeroed.
pub fn check_params<F>(name: &str, store: &mut ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let base_sig = g.kink_signature();
    g.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();

    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        Ok((g.value(out).item(), g.kink_signature()))
    };

    let mut report = GradCheckReport::new(name, cfg.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = store.ids().collect();
    for (ti, id) in ids.into_iter().enumerate() {
        let len = store.get(id).value.len();
        for ei in chosen_elements(len, cfg, &mut rng) {
            let orig = store.get(id).value.data()[ei];
            store.get_mut(id).value.data_mut()[ei] = orig + cfg.step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[ei] = orig - cfg.step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[ei] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            report.record(ti, ei, analytic[ti][ei], numeric, cfg.denom_clamp);
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape and data agree")
}

/// `sum(y * r)` for a fixed random `r`, turning any op into a scalar whose
/// gradient exercises the full vector-Jacobian product.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.input(r.clone());
    let m = g.mul(y, rv)?;
    Ok(g.sum(m))
}

fn check_projected<F>(name: &str, inputs: Vec<Tensor>, out_shape: &[usize], rng: &mut ChaCha8Rng, op: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = random_tensor(rng, out_shape, -1.0, 1.0);
    check_leaves(
        name,
        &inputs,
        |g, v| {
            let y = op(g, v)?;
            project(g, y, &r)
        },
        cfg,
    )
}

/// Finite-difference checks of every differentiable op plus the full
/// weighted training loss of a small model, all drawn from `seed`.
pub fn op_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let cfg = &GradCheckConfig { seed, ..*cfg };
    let mut out = Vec::new();

    let x = random_tensor(rng, &[2, 6, 6], -1.0, 1.0);
    let k3 = random_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b3 = random_tensor(rng, &[3], -0.5, 0.5);
    for (name, opts, shape) in [
        ("conv2d", ConvOpts::default(), [3, 6, 6]),
        ("conv2d_dilated", ConvOpts::dilated(2), [3, 6, 6]),
        ("conv2d_strided", ConvOpts::strided(2), [3, 3, 3]),
    ] {
        out.push(check_projected(
            name,
            vec![x.clone(), k3.clone(), b3.clone()],
            &shape,
            rng,
            |g, v| g.conv2d(v[0], v[1], v[2], opts),
            cfg,
        )?);
    }
    let k1 = random_tensor(rng, &[4, 2, 1, 1], -0.5, 0.5);
    let b4 = random_tensor(rng, &[4], -0.5, 0.5);
    out.push(check_projected(
        "conv2d_1x1",
        vec![x.clone(), k1, b4],
        &[4, 6, 6],
        rng,
        |g, v| g.conv2d(v[0], v[1], v[2], ConvOpts::default()),
        cfg,
    )?);

    let t = random_tensor(rng, &[4, 8, 8], -2.0, 2.0);
    out.push(check_projected("relu", vec![t.clone()], &[4, 8, 8], rng, |g, v| Ok(g.relu(v[0])), cfg)?);
    out.push(check_projected("sigmoid", vec![t.clone()], &[4, 8, 8], rng, |g, v| Ok(g.sigmoid(v[0])), cfg)?);
    out.push(check_projected("softmax_channels", vec![t.clone()], &[4, 8, 8], rng, |g, v| g.softmax_channels(v[0]), cfg)?);
    let small = random_tensor(rng, &[3, 3, 4], -1.0, 1.0);
    out.push(check_projected("upsample_nearest", vec![small.clone()], &[3, 6, 8], rng, |g, v| g.upsample_nearest(v[0], 2), cfg)?);
    out.push(check_projected("global_avg_pool", vec![t.clone()], &[4], rng, |g, v| g.global_avg_pool(v[0]), cfg)?);

    let xv = random_tensor(rng, &[6], -1.0, 1.0);
    let wm = random_tensor(rng, &[4, 6], -1.0, 1.0);
    let bv = random_tensor(rng, &[4], -1.0, 1.0);
    out.push(check_projected("dense", vec![xv, wm, bv], &[4], rng, |g, v| g.dense(v[0], v[1], v[2]), cfg)?);

    let a = random_tensor(rng, &[2, 3, 4], -1.0, 1.0);
    let c = random_tensor(rng, &[1, 3, 4], -1.0, 1.0);
    out.push(check_projected("concat_channels", vec![a.clone(), c, small], &[6, 3, 4], rng, |g, v| g.concat_channels(v), cfg)?);
    let b = random_tensor(rng, &[2, 3, 4], -1.0, 1.0);
    out.push(check_projected("add", vec![a.clone(), b.clone()], &[2, 3, 4], rng, |g, v| g.add(v[0], v[1]), cfg)?);
    out.push(check_projected("mul", vec![a.clone(), b.clone()], &[2, 3, 4], rng, |g, v| g.mul(v[0], v[1]), cfg)?);
    out.push(check_leaves("sum", &[a.clone()], |g, v| Ok(g.sum(v[0])), cfg)?);
    let s1 = random_tensor(rng, &[], -2.0, 2.0);
    let s2 = random_tensor(rng, &[], -2.0, 2.0);
    let coefs = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    out.push(check_leaves("linear", &[s1, s2], |g, v| g.linear(0.3, &[(v[0], coefs[0]), (v[1], coefs[1])]), cfg)?);

    let logits = random_tensor(rng, &[4, 4, 4], -2.0, 2.0);
    let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..4)).collect();
    out.push(check_leaves("pixel_cross_entropy", &[logits.clone()], |g, v| g.pixel_cross_entropy(v[0], &labels), cfg)?);
    let target = losses::onehot(&labels, 4, 4, 4)?;
    let probs = random_tensor(rng, &[4, 4, 4], 0.05, 0.95);
    out.push(check_leaves("soft_iou", &[probs.clone()], |g, v| g.soft_iou(v[0], &target), cfg)?);
    out.push(check_leaves("seg_loss", &[logits.clone()], |g, v| losses::seg_loss(g, v[0], &labels), cfg)?);

    let z = random_tensor(rng, &[5], -3.0, 3.0);
    let hard = Tensor::from_vec((0..5).map(|_| f64::from(rng.gen_bool(0.5))).collect());
    out.push(check_leaves(
        "binary_cross_entropy",
        &[z.clone()],
        |g, v| {
            let t = g.input(hard.clone());
            g.binary_cross_entropy(v[0], t)
        },
        cfg,
    )?);
    let soft = random_tensor(rng, &[5], 0.05, 0.95);
    out.push(check_leaves("binary_cross_entropy_soft_target", &[z, soft], |g, v| g.binary_cross_entropy(v[0], v[1]), cfg)?);
    out.push(check_projected("foreground_max", vec![probs], &[3], rng, |g, v| g.foreground_max(v[0]), cfg)?);
    let cls = random_tensor(rng, &[3], -2.0, 2.0);
    out.push(check_leaves(
        "sync_loss_soft",
        &[logits, cls],
        |g, v| losses::sync_loss(g, v[0], v[1], ProjectionMode::Soft),
        cfg,
    )?);

    for mode in [ProjectionMode::HardDetached, ProjectionMode::Soft] {
        out.push(composite_check(seed, mode, rng, cfg)?);
    }
    Ok(out)
}

/// Full weighted loss of a small random model w.r.t. all of its parameters.
fn composite_check(seed: u64, mode: ProjectionMode, rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mc = ModelConfig {
        in_channels: 1,
        base_channels: 2,
        num_classes: 3,
        num_scenes: 2,
        dilation_rates: vec![1, 2],
        hidden_units: 4,
        image_size: (8, 8),
    };
    let mut model = TaskDecompModel::build(&mc, seed)?;
    let image = random_tensor(rng, &[1, 8, 8], 0.0, 1.0);
    let mask: Vec<usize> = (0..64).map(|_| rng.gen_range(0..3)).collect();
    let mut class_presence = vec![0u8; 2];
    for &l in &mask {
        if l > 0 {
            class_presence[l - 1] = 1;
        }
    }
    let sample = Sample {
        image,
        mask,
        class_presence,
        scene: rng.gen_range(0..2),
    };
    let pick = |rng: &mut ChaCha8Rng| WEIGHT_GRID[rng.gen_range(1..WEIGHT_GRID.len())];
    let weights = LossWeights::new(pick(rng), pick(rng), pick(rng)).with_projection(mode);
    let name = match mode {
        ProjectionMode::HardDetached => "total_loss_hard",
        ProjectionMode::Soft => "total_loss_soft",
    };
    let cfg = GradCheckConfig {
        max_elems_per_tensor: Some(cfg.max_elems_per_tensor.unwrap_or(6)),
        ..*cfg
    };
    let shadow = model.clone();
    check_params(
        name,
        &mut model.params,
        |g, store| Ok(sample_loss(g, &shadow, store, &sample, &weights)?.total),
        &cfg,
    )
}
