//! Optimization loop, Adam, checkpoints and metric logging.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{put_u128, put_u32, put_u64, ByteReader};
use crate::data::{dequantize, epoch_batches, logit_transform, Dataset, Space};
use crate::error::{Error, Result};
use crate::flow::{IntegratorConfig, ParamField};
use crate::potential::PotentialParams;
use crate::symmetry::{GroupKind, Symmetrized, SymmetryGroup, SymmetryMode};
use crate::targets::{nll_loss, variational_loss, Energy, LossEstimate};

const MAGIC: &[u8; 8] = b"MAFLOW01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Maximum likelihood on data.
    Nll,
    /// Reverse KL against an energy, `E_model[ln p + E]`.
    Variational,
}

/// Hyperparameters of a training run.
///
/// `Default` gives the density-estimation settings; [`TrainConfig::ising`]
/// the lattice ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Integration step ε.
    pub epsilon: f64,
    /// Number of integration steps d.
    #[serde(alias = "d")]
    pub steps: usize,
    /// Hidden units h.
    #[serde(alias = "h")]
    pub hidden: usize,
    /// Minibatch size B.
    #[serde(alias = "B")]
    pub batch: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch for the variational objective (NLL epochs
    /// are one pass over the data).
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; zero or negative disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub symmetry: GroupKind,
    pub symmetry_mode: SymmetryMode,
    /// Start from `a = 0`, i.e. the identity flow.
    pub zero_init_output: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Nll,
            epsilon: 0.1,
            steps: 100,
            hidden: 1024,
            batch: 100,
            epochs: 10,
            steps_per_epoch: 1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 10.0,
            seed: 0,
            symmetry: GroupKind::None,
            symmetry_mode: SymmetryMode::SampledPerStep,
            zero_init_output: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Variational settings for lattice models: ε = 0.1, d = 50, h = 512,
    /// B = 64, full lattice group sampled once per step.
    pub fn ising() -> Self {
        Self {
            objective: Objective::Variational,
            steps: 50,
            hidden: 512,
            batch: 64,
            symmetry: GroupKind::IsingFull,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.integrator()?;
        let positive = [
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("steps_per_epoch", self.steps_per_epoch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon >= 0.0) {
            return Err(Error::Config("adam_epsilon must be non-negative".into()));
        }
        if self.clip_norm.is_nan() {
            return Err(Error::Config("clip_norm is NaN".into()));
        }
        Ok(())
    }

    pub fn integrator(&self) -> Result<IntegratorConfig> {
        IntegratorConfig::forward(self.epsilon, self.steps)
    }

    /// Hex digest of the canonical JSON form, optionally salted with a task
    /// description.
    pub fn hash(&self, salt: &str) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::new()
            .chain_update(json.as_bytes())
            .chain_update([0u8])
            .chain_update(salt.as_bytes())
            .finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// True when `other` describes the same run apart from its length and
    /// checkpoint cadence.
    fn resumable_from(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.epochs = other.epochs;
        a.checkpoint_every = other.checkpoint_every;
        a == *other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: PotentialParams,
    pub v: PotentialParams,
}

impl AdamState {
    pub fn new(like: &PotentialParams) -> Self {
        Self {
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_epsilon,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

/// One bias-corrected Adam step: `θ ← θ − lr·m̂/(√v̂ + eps)`.
pub fn adam_update(
    state: &mut AdamState,
    params: &mut PotentialParams,
    grad: &PotentialParams,
    hp: &AdamHyper,
) -> Result<()> {
    if !params.same_shape(grad) || !params.same_shape(&state.m) {
        return Err(Error::Shape(format!(
            "gradient is {}x{}, parameters {}x{}",
            grad.dim(),
            grad.hidden(),
            params.dim(),
            params.hidden()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: PotentialParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Checkpoint")
            .field("epoch", &self.epoch)
            .field("step", &self.step)
            .field("dim", &self.params.dim())
            .field("hidden", &self.params.hidden())
            .field(
                "fingerprint",
                &format_args!("{:016x}", self.params.fingerprint()),
            )
            .finish_non_exhaustive()
    }
}

impl Checkpoint {
    /// Fresh parameters for a `dim`-dimensional model, drawn from the run seed.
    pub fn initial(config: &TrainConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Config("model dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = PotentialParams::init(dim, config.hidden, &mut rng);
        if config.zero_init_output {
            params.a.fill(0.0);
        }
        Ok(Self {
            config: config.clone(),
            epoch: 0,
            step: 0,
            adam: AdamState::new(&params),
            params,
            rng,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let json = serde_json::to_string(&self.config).expect("config serializes");
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(json.as_bytes());
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.step);
        self.params.write_section(&mut out);
        put_u64(&mut out, self.adam.t);
        crate::binio::put_f64s(&mut out, self.adam.m.iter());
        crate::binio::put_f64s(&mut out, self.adam.v.iter());
        out.extend_from_slice(&self.rng.get_seed());
        put_u64(&mut out, self.rng.get_stream());
        put_u128(&mut out, self.rng.get_word_pos());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if &r.array::<8>()? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32_le()?;
        if version != CHECKPOINT_VERSION {
            return r.fail(format!("unsupported checkpoint version {version}"));
        }
        let len = r.len_le(1)?;
        let at = r.offset();
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format {
            offset: at,
            msg: format!("config is not UTF-8: {e}"),
        })?;
        let config: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: at,
            msg: format!("bad config: {e}"),
        })?;
        let epoch = r.u64_le()?;
        let step = r.u64_le()?;
        let params = PotentialParams::read_section(&mut r)?;
        let t = r.u64_le()?;
        let n = params.num_params();
        let m = PotentialParams::from_flat(params.dim(), params.hidden(), &r.f64s_le(n)?)?;
        let v = PotentialParams::from_flat(params.dim(), params.hidden(), &r.f64s_le(n)?)?;
        let seed = r.array::<32>()?;
        let stream = r.u64_le()?;
        let word_pos = r.u128_le()?;
        if r.remaining() != 0 {
            return r.fail(format!("{} trailing bytes", r.remaining()));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            config,
            epoch,
            step,
            params,
            adam: AdamState { t, m, v },
            rng,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The symmetry group named in the config, sized for this model.
    pub fn group(&self) -> Result<SymmetryGroup> {
        SymmetryGroup::named(self.config.symmetry, self.dim())
    }
}

/// What the model is fitted to.
#[derive(Clone, Copy)]
pub enum Target<'a> {
    /// Fixed real-valued rows.
    Points(ArrayView2<'a, f64>),
    /// Raw 8-bit images, re-dequantized every epoch and moved to logit space.
    Images { raw: &'a Dataset, lambda: f64 },
    /// Unnormalized density `e^{−E}`.
    Energy(&'a dyn Energy),
}

impl Target<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Target::Points(x) => x.ncols(),
            Target::Images { raw, .. } => raw.dim(),
            Target::Energy(e) => e.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub std_err: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Wall time since the start of this invocation.
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,loss,grad_norm,seconds";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:.3}",
            self.epoch, self.step, self.loss, self.grad_norm, self.seconds
        )
    }
}

/// Per-step callback; returning `false` stops training.
pub type Observer<'a> = dyn FnMut(&MetricsRow, &PotentialParams) -> bool + 'a;

/// Side outputs of [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for the append-only metrics CSV.
    pub metrics_dir: Option<PathBuf>,
    /// Extra text mixed into the metrics file name (e.g. the task).
    pub run_tag: String,
    /// Where periodic and final checkpoints are written.
    pub checkpoint_path: Option<PathBuf>,
    /// Called after every optimizer step; returning `false` stops training
    /// at that point.
    pub observer: Option<&'a mut Observer<'a>>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub metrics_file: Option<PathBuf>,
    /// True when the observer ended the run early.
    pub stopped_early: bool,
}

/// Name of the metrics file for a run.
pub fn metrics_file_name(config: &TrainConfig, tag: &str) -> String {
    format!("metrics-{}.csv", config.hash(tag))
}

/// Builds the field for `params` according to the symmetry settings and runs `f` on it.
fn with_field<T>(
    params: &PotentialParams,
    group: Option<&SymmetryGroup>,
    mode: SymmetryMode,
    f: impl FnOnce(&dyn ParamField) -> Result<T>,
) -> Result<T> {
    match group {
        None => f(params),
        Some(g) => f(&Symmetrized::new(params, g, mode)?),
    }
}

/// Loss and gradient of one minibatch (or one batch of model samples).
pub fn batch_loss(
    ckpt: &Checkpoint,
    group: Option<&SymmetryGroup>,
    rows: Option<ArrayView2<f64>>,
    energy: Option<&dyn Energy>,
    rng: &mut ChaCha8Rng,
) -> Result<LossEstimate> {
    let cfg = ckpt.config.integrator()?;
    with_field(
        &ckpt.params,
        group,
        ckpt.config.symmetry_mode,
        |field| match (ckpt.config.objective, rows, energy) {
            (Objective::Nll, Some(x), _) => nll_loss(field, x, &cfg, Some(rng)),
            (Objective::Variational, _, Some(e)) => {
                variational_loss(field, e, ckpt.config.batch, &cfg, rng)
            }
            _ => Err(Error::Config(
                "objective does not match the training target".into(),
            )),
        },
    )
}

struct Run<'a, 'o> {
    ckpt: Checkpoint,
    group: Option<SymmetryGroup>,
    target: Target<'a>,
    hp: AdamHyper,
    start: Instant,
    metrics: Vec<MetricsRow>,
    sink: Option<std::fs::File>,
    options: TrainOptions<'o>,
    stopped: bool,
}

impl Run<'_, '_> {
    fn step(&mut self, rows: Option<ArrayView2<f64>>) -> Result<()> {
        let energy = match self.target {
            Target::Energy(e) => Some(e),
            _ => None,
        };
        let mut rng = self.ckpt.rng.clone();
        let est = batch_loss(&self.ckpt, self.group.as_ref(), rows, energy, &mut rng)?;
        let mut grad = est.grad.expect("loss computed with gradient");
        let norm = grad.norm();
        if !norm.is_finite() {
            return Err(Error::non_finite("gradient"));
        }
        let clip = self.ckpt.config.clip_norm;
        if clip > 0.0 && norm > clip {
            grad.scale(clip / norm);
        }
        adam_update(&mut self.ckpt.adam, &mut self.ckpt.params, &grad, &self.hp)?;
        if self.ckpt.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("parameters"));
        }
        self.ckpt.rng = rng;
        self.ckpt.step += 1;
        let row = MetricsRow {
            epoch: self.ckpt.epoch,
            step: self.ckpt.step,
            loss: est.loss,
            std_err: est.std_err,
            grad_norm: norm,
            seconds: self.start.elapsed().as_secs_f64(),
        };
        if let Some(file) = self.sink.as_mut() {
            writeln!(file, "{}", row.csv_line())?;
        }
        if let Some(obs) = self.options.observer.as_mut() {
            if !obs(&row, &self.ckpt.params) {
                self.stopped = true;
            }
        }
        self.metrics.push(row);
        Ok(())
    }

    fn epoch(&mut self) -> Result<()> {
        match self.target {
            Target::Energy(_) => {
                for _ in 0..self.ckpt.config.steps_per_epoch {
                    self.step(None)?;
                    if self.stopped {
                        return Ok(());
                    }
                }
            }
            Target::Points(x) => {
                let batches = epoch_batches(x.nrows(), self.ckpt.config.batch, &mut self.ckpt.rng);
                for idx in batches {
                    let rows = x.select(ndarray::Axis(0), &idx);
                    self.step(Some(rows.view()))?;
                    if self.stopped {
                        return Ok(());
                    }
                }
            }
            Target::Images { raw, lambda } => {
                let unit = dequantize(raw, &mut self.ckpt.rng)?;
                let (logit, _) = logit_transform(&unit, lambda)?;
                let batches =
                    epoch_batches(logit.len(), self.ckpt.config.batch, &mut self.ckpt.rng);
                for idx in batches {
                    let rows: Array2<f64> = logit.select(&idx);
                    self.step(Some(rows.view()))?;
                    if self.stopped {
                        return Ok(());
                    }
                }
            }
        }
        self.ckpt.epoch += 1;
        Ok(())
    }
}

/// Trains until `config.epochs` epochs are complete.
///
/// With `resume`, the run continues from that checkpoint; its config must
/// match `config` except for `epochs` and `checkpoint_every`. A non-finite
/// loss, gradient or parameter aborts with [`Error::Aborted`] carrying the
/// last checkpoint taken at an epoch boundary.
pub fn train(
    config: &TrainConfig,
    target: Target<'_>,
    resume: Option<Checkpoint>,
    options: TrainOptions<'_>,
) -> Result<TrainReport> {
    config.validate()?;
    match (config.objective, &target) {
        (Objective::Nll, Target::Energy(_)) => {
            return Err(Error::Config("the nll objective needs data".into()))
        }
        (Objective::Variational, Target::Points(_) | Target::Images { .. }) => {
            return Err(Error::Config(
                "the variational objective needs an energy".into(),
            ))
        }
        _ => {}
    }
    if let Target::Images { raw, .. } = target {
        if raw.space != Space::Raw {
            return Err(Error::Config("image targets take raw 8-bit pixels".into()));
        }
    }
    let mut ckpt = match resume {
        Some(c) => {
            if !c.config.resumable_from(config) {
                return Err(Error::Config(
                    "checkpoint was trained with different hyperparameters".into(),
                ));
            }
            c
        }
        None => Checkpoint::initial(config, target.dim())?,
    };
    ckpt.config = config.clone();
    if ckpt.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "model has dimension {}, target {}",
            ckpt.dim(),
            target.dim()
        )));
    }
    let group = match config.symmetry {
        GroupKind::None => None,
        kind => Some(SymmetryGroup::named(kind, ckpt.dim())?),
    };

    let (sink, metrics_file) = match &options.metrics_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(metrics_file_name(config, &options.run_tag));
            let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
            if file.metadata()?.len() == 0 {
                writeln!(file, "{METRICS_HEADER}")?;
            }
            (Some(file), Some(path))
        }
        None => (None, None),
    };

    let mut run = Run {
        hp: AdamHyper::from_config(config),
        ckpt,
        group,
        target,
        start: Instant::now(),
        metrics: Vec::new(),
        sink,
        options,
        stopped: false,
    };
    let mut last_good = run.ckpt.clone();
    while run.ckpt.epoch < config.epochs as u64 && !run.stopped {
        if let Err(e) = run.epoch() {
            return Err(match e {
                Error::NonFinite { .. } => Error::Aborted {
                    epoch: run.ckpt.epoch,
                    step: run.ckpt.step,
                    cause: Box::new(e),
                    last_good: Box::new(last_good),
                },
                other => other,
            });
        }
        if run.stopped {
            break;
        }
        last_good = run.ckpt.clone();
        let every = config.checkpoint_every as u64;
        if every > 0 && run.ckpt.epoch.is_multiple_of(every) {
            if let Some(p) = &run.options.checkpoint_path {
                run.ckpt.save(p)?;
            }
        }
    }
    if let Some(p) = &run.options.checkpoint_path {
        run.ckpt.save(p)?;
    }
    if let Some(f) = run.sink.as_mut() {
        f.flush()?;
    }
    Ok(TrainReport {
        checkpoint: run.ckpt,
        metrics: run.metrics,
        metrics_file,
        stopped_early: run.stopped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> TrainConfig {
        TrainConfig {
            hidden: 4,
            steps: 3,
            batch: 8,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let d = TrainConfig::default();
        assert_eq!(
            (d.epsilon, d.steps, d.hidden, d.batch),
            (0.1, 100, 1024, 100)
        );
        let i = TrainConfig::ising();
        assert_eq!((i.epsilon, i.steps, i.hidden, i.batch), (0.1, 50, 512, 64));
        assert_eq!(
            (d.learning_rate, d.beta1, d.beta2, d.adam_epsilon),
            (1e-3, 0.9, 0.999, 1e-8)
        );
        assert_eq!(d.clip_norm, 10.0);
    }

    #[test]
    fn config_rejects_unknown_keys_and_accepts_aliases() {
        let err =
            serde_json::from_str::<TrainConfig>("{\"epsilon\": 0.1,\n \"lr\": 1}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lr") && msg.contains("line 2"), "{msg}");
        let c: TrainConfig = serde_json::from_str(r#"{"d": 7, "h": 9, "B": 3}"#).unwrap();
        assert_eq!((c.steps, c.hidden, c.batch), (7, 9, 3));
    }

    #[test]
    fn adam_single_step_hand_computed() {
        let mut p = PotentialParams::zeros(1, 1);
        let mut g = p.zeros_like();
        g.c = 0.5;
        g.a[0] = -2.0;
        let mut st = AdamState::new(&p);
        let hp = AdamHyper::default();
        adam_update(&mut st, &mut p, &g, &hp).unwrap();
        // m̂ = g, v̂ = g², so the step is −lr·g/(|g| + eps)
        assert!((p.c - (-1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-18);
        assert!((p.a[0] - (1e-3 * 2.0 / (2.0 + 1e-8))).abs() < 1e-18);
        assert_eq!(p.w[[0, 0]], 0.0);
        assert!((st.m.c - 0.05).abs() < 1e-15);
        assert!((st.v.c - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PotentialParams::init(3, 4, &mut rng);
        let before = p.clone();
        let zero = p.zeros_like();
        let mut st = AdamState::new(&p);
        let hp = AdamHyper::default();
        adam_update(&mut st, &mut p, &zero, &hp).unwrap();
        assert_eq!(p, before);
        // moments decay under zero gradient
        let mut g = p.zeros_like();
        g.c = 1.0;
        adam_update(&mut st, &mut p, &g, &hp).unwrap();
        let m = st.m.c;
        adam_update(&mut st, &mut p, &zero, &hp).unwrap();
        assert!((st.m.c - 0.9 * m).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let mut p = PotentialParams::zeros(1, 1);
        let mut g = p.zeros_like();
        g.b[0] = 3.7;
        let mut st = AdamState::new(&p);
        let hp = AdamHyper::default();
        let mut prev = p.b[0];
        for _ in 0..2000 {
            adam_update(&mut st, &mut p, &g, &hp).unwrap();
            let step = prev - p.b[0];
            assert!((step - 1e-3).abs() < 1e-9);
            prev = p.b[0];
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = PotentialParams::zeros(2, 3);
        let mut st = AdamState::new(&p);
        let g = PotentialParams::zeros(2, 4);
        assert!(adam_update(&mut st, &mut p, &g, &AdamHyper::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut c = Checkpoint::initial(&small(), 3).unwrap();
        let _: u64 = c.rng.random();
        c.adam.t = 7;
        c.adam.m.c = 0.25;
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_format_errors() {
        let bytes = Checkpoint::initial(&small(), 2).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn zero_init_output_is_identity() {
        let cfg = TrainConfig {
            zero_init_output: true,
            ..small()
        };
        let c = Checkpoint::initial(&cfg, 3).unwrap();
        assert!(c.params.a.iter().all(|&v| v == 0.0));
        assert!(c.params.w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hash_depends_on_config_and_tag() {
        let a = small();
        let b = TrainConfig { seed: 1, ..small() };
        assert_ne!(a.hash(""), b.hash(""));
        assert_ne!(a.hash("x"), a.hash("y"));
        assert_eq!(a.hash("x"), small().hash("x"));
        assert_eq!(a.hash("").len(), 16);
    }
}
