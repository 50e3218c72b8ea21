//! Three-phase training: segmentation + class, then sync added, then scene
//! added, each phase starting from the previous phase's parameters.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossBreakdown, LossParts, LossWeights, ProjectionMode};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{ModelConfig, TaskDecompModel};
use crate::optim::sgd_step;
use crate::synthdata::{augment_flip, Sample};
use crate::tensor::ParamStore;

pub const NUM_PHASES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub iterations: usize,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl PhaseConfig {
    pub fn new(iterations: usize, w1: f64, w2: f64, w3: f64) -> Self {
        Self { iterations, w1, w2, w3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phases: Vec<PhaseConfig>,
    /// Piecewise-constant `(first iteration, lr)` steps.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Restart the schedule at every phase boundary instead of running it
    /// over the global iteration count.
    pub reset_schedule_each_phase: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the validation split every this many iterations (0 = never).
    pub eval_every: usize,
    pub augment: bool,
    pub projection: ProjectionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phases: vec![
                PhaseConfig::new(300, 1.0, 0.0, 0.0),
                PhaseConfig::new(300, 1.0, 0.0, 1.0),
                PhaseConfig::new(300, 1.0, 1.0, 1.0),
            ],
            lr_schedule: vec![(0, 1e-4), (50, 5e-5), (100, 2e-5)],
            reset_schedule_each_phase: true,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
            eval_every: 0,
            augment: true,
            projection: ProjectionMode::HardDetached,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.phases.len() != NUM_PHASES {
            return bad(format!("expected {NUM_PHASES} phases, got {}", self.phases.len()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            self.weights(i).validate()?;
            let active = p.iterations > 0;
            let ok = match i {
                0 => p.w2 == 0.0 && p.w3 == 0.0,
                1 => !active || (p.w2 == 0.0 && p.w3 > 0.0),
                _ => !active || (p.w1 > 0.0 && p.w2 > 0.0 && p.w3 > 0.0),
            };
            if !ok {
                return bad(format!(
                    "phase {} weights (w1={}, w2={}, w3={}) break the three-step procedure",
                    i + 1,
                    p.w1,
                    p.w2,
                    p.w3
                ));
            }
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return bad("lr_schedule must start at iteration 0".into());
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("lr_schedule iterations must increase".into());
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr.is_finite() && lr > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn weights(&self, phase: usize) -> LossWeights {
        let p = &self.phases[phase];
        LossWeights::new(p.w1, p.w2, p.w3).with_projection(self.projection)
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    /// Learning rate at `iteration` of `phase`.
    pub fn lr_at(&self, phase: usize, iteration: usize) -> f64 {
        let it = if self.reset_schedule_each_phase {
            iteration
        } else {
            self.phases[..phase].iter().map(|p| p.iterations).sum::<usize>() + iteration
        };
        self.lr_schedule
            .iter()
            .take_while(|&&(start, _)| start <= it)
            .last()
            .map(|&(_, lr)| lr)
            .expect("schedule starts at 0")
    }
}

/// Fingerprint of everything that determines a training run's trajectory.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("serializable"));
    h.update(serde_json::to_vec(train).expect("serializable"));
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// One emitted history line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// 1-based phase number.
    pub phase: usize,
    /// Iteration within the phase, 0-based.
    pub iteration: usize,
    pub l_seg: f64,
    pub l_cla: f64,
    pub l_scene: f64,
    pub l_sync: f64,
    pub total: f64,
    pub lr: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub phase: usize,
    pub iteration: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub losses: Vec<HistoryRecord>,
    pub evals: Vec<EvalRecord>,
}

impl History {
    /// Loss history as line-delimited JSON.
    pub fn to_records(&self) -> String {
        self.losses
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}

/// Recorded per-sample loss components.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub seg: Var,
    pub cla: Var,
    pub scene: Var,
    pub sync: Var,
    pub total: Var,
}

/// Records the full weighted loss of `sample` into `g`.
pub fn sample_loss(
    g: &mut Graph,
    model: &TaskDecompModel,
    store: &ParamStore,
    sample: &Sample,
    weights: &LossWeights,
) -> Result<SampleLoss> {
    let out = model.forward_with(g, store, &sample.image)?;
    let seg = losses::seg_loss(g, out.seg_logits, &sample.mask)?;
    let presence = g.input(sample.presence_tensor());
    let cla = losses::binary_cross_entropy(g, out.class_logits, presence, false)?;
    let scene_target = g.input(sample.scene_onehot(model.config().num_scenes));
    let scene = losses::binary_cross_entropy(g, out.scene_logits, scene_target, false)?;
    let sync = losses::sync_loss(g, out.seg_logits, out.class_logits, weights.projection)?;
    let total = losses::total_loss_var(g, seg, cla, scene, sync, weights)?;
    Ok(SampleLoss {
        seg,
        cla,
        scene,
        sync,
        total,
    })
}

/// Breakdown of a recorded [`SampleLoss`], checked for finiteness.
pub fn breakdown(g: &Graph, l: &SampleLoss, weights: &LossWeights) -> Result<LossBreakdown> {
    let parts = LossParts {
        l_seg: g.value(l.seg).item(),
        l_cla: g.value(l.cla).item(),
        l_scene: g.value(l.scene).item(),
        l_sync: g.value(l.sync).item(),
    };
    losses::total_loss(parts, weights)
}

/// Position in the three-phase schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainState {
    /// 0-based phase index; `NUM_PHASES` once finished.
    pub phase: usize,
    pub iteration: usize,
}

pub struct Trainer<'a> {
    model: TaskDecompModel,
    cfg: TrainConfig,
    train: &'a [Sample],
    val: Option<&'a [Sample]>,
    state: TrainState,
    history: History,
}

impl<'a> Trainer<'a> {
    pub fn new(model: TaskDecompModel, cfg: TrainConfig, train: &'a [Sample], val: Option<&'a [Sample]>) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        for (i, s) in train.iter().chain(val.unwrap_or(&[])).enumerate() {
            let (h, w) = mc.image_size;
            if s.image.shape() != [mc.in_channels, h, w]
                || s.class_presence.len() != mc.num_classes - 1
                || s.scene >= mc.num_scenes
                || s.mask.iter().any(|&l| l >= mc.num_classes)
            {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} (image {:?}, {} presence bits, scene {}) does not fit model K={} S={} image {h}x{w}",
                    s.image.shape(),
                    s.class_presence.len(),
                    s.scene,
                    mc.num_classes,
                    mc.num_scenes
                )));
            }
        }
        let mut t = Self {
            model,
            cfg,
            train,
            val,
            state: TrainState::default(),
            history: History::default(),
        };
        t.skip_empty_phases();
        Ok(t)
    }

    /// Continues from `ckpt`. The checkpoint must come from the same model
    /// and training configuration.
    pub fn resume(
        mut model: TaskDecompModel,
        cfg: TrainConfig,
        train: &'a [Sample],
        val: Option<&'a [Sample]>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let expect = config_hash(model.config(), &cfg);
        if ckpt.config_hash != expect {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint config hash {:016x} != current {:016x}",
                ckpt.config_hash, expect
            )));
        }
        if ckpt.seed != cfg.seed {
            return Err(Error::CheckpointMismatch(format!("seed {} != {}", ckpt.seed, cfg.seed)));
        }
        ckpt.restore_into(&mut model)?;
        let mut t = Self::new(model, cfg, train, val)?;
        t.state = TrainState {
            phase: ckpt.phase,
            iteration: ckpt.iteration,
        };
        t.skip_empty_phases();
        Ok(t)
    }

    fn skip_empty_phases(&mut self) {
        while self.state.phase < NUM_PHASES && self.state.iteration >= self.cfg.phases[self.state.phase].iterations {
            self.state.phase += 1;
            self.state.iteration = 0;
        }
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TaskDecompModel {
        &self.model
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.state.phase >= NUM_PHASES
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            self.state.phase,
            self.state.iteration,
            self.cfg.seed,
            config_hash(self.model.config(), &self.cfg),
        )
    }

    fn rng_for(&self, phase: usize, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((phase as u64) << 40) | iteration as u64);
        rng
    }

    /// Runs one iteration. Returns `None` once all phases are done.
    ///
    /// A non-finite loss aborts before any parameter is touched, so
    /// [`Trainer::checkpoint`] still captures the last good state.
    pub fn step(&mut self) -> Result<Option<HistoryRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let TrainState { phase, iteration } = self.state;
        let weights = self.cfg.weights(phase);
        let lr = self.cfg.lr_at(phase, iteration);
        let mut rng = self.rng_for(phase, iteration);
        let b = self.cfg.batch_size.min(self.train.len());
        let batch = sample_indices(&mut rng, self.train.len(), b).into_vec();
        let scale = 1.0 / b as f64;

        let mut parts = Vec::with_capacity(b);
        for idx in batch {
            let sample = if self.cfg.augment {
                augment_flip(&self.train[idx], &mut rng)
            } else {
                self.train[idx].clone()
            };
            let mut g = Graph::new();
            let l = sample_loss(&mut g, &self.model, &self.model.params, &sample, &weights)?;
            let bd = breakdown(&g, &l, &weights).map_err(|e| match e {
                Error::NonFinite { what } => Error::NonFinite {
                    what: format!("{what} at phase {} iteration {iteration}", phase + 1),
                },
                e => e,
            })?;
            parts.push(bd);
            let scaled = g.linear(0.0, &[(l.total, scale)])?;
            g.backward(scaled, &mut self.model.params)?;
        }
        if let Err(e) = sgd_step(&mut self.model.params, lr, self.cfg.momentum, self.cfg.weight_decay) {
            self.model.params.zero_grad();
            return Err(e);
        }

        let mean = LossBreakdown::mean(&parts);
        let rec = HistoryRecord {
            phase: phase + 1,
            iteration,
            l_seg: mean.l_seg,
            l_cla: mean.l_cla,
            l_scene: mean.l_scene,
            l_sync: mean.l_sync,
            total: mean.total,
            lr,
            w1: weights.w1,
            w2: weights.w2,
            w3: weights.w3,
        };
        self.history.losses.push(rec);

        self.state.iteration += 1;
        if let Some(val) = self.val {
            if self.cfg.eval_every > 0 && self.state.iteration % self.cfg.eval_every == 0 {
                let report = evaluate(&self.model, val, self.model.config().num_classes)?;
                self.history.evals.push(EvalRecord {
                    phase: phase + 1,
                    iteration: self.state.iteration,
                    report,
                });
            }
        }
        self.skip_empty_phases();
        Ok(Some(rec))
    }

    pub fn run_steps(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.step()?.is_none() {
                break;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    pub fn into_parts(self) -> (TaskDecompModel, History) {
        (self.model, self.history)
    }
}

/// Runs all three phases and returns the trained model with its history.
pub fn train(
    model: TaskDecompModel,
    train: &[Sample],
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<(TaskDecompModel, History)> {
    let mut t = Trainer::new(model, cfg.clone(), train, val)?;
    t.run()?;
    Ok(t.into_parts())
}
