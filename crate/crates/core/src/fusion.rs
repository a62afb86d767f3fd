//! Multimodal encoders, the regression head, the penalised loss and the
//! two-stage trainer that alternates critic and classifier updates.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, Dataset, Splits};
use crate::error::{Error, Result};
use crate::estimators::{
    bound_from_scores, draw_permutations, objective, shuffle_product_of_marginals, CriticSpec, CriticTrainer,
    CriticTraining, EstimatorKind, OutputActivation, StatisticNetwork,
};
use crate::matrix::Matrix;
use crate::nn::{self, Activation, AdamWConfig, AdamWState, Bound, DenseLayer, DropoutSpec, LstmCell, Param, ParamStore};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    /// Concatenate the modalities, then a two-layer perceptron.
    ConcatMlp,
    /// Early-fusion LSTM over per-step `[a, v, l_t]`.
    EfLstm,
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::ConcatMlp => "concat-mlp",
            EncoderVariant::EfLstm => "ef-lstm",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "concat-mlp" | "concatmlp" | "mlp" => Ok(EncoderVariant::ConcatMlp),
            "ef-lstm" | "eflstm" | "lstm" => Ok(EncoderVariant::EfLstm),
            other => Err(Error::contract(format!(
                "unknown encoder variant `{other}` (expected concat-mlp or ef-lstm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionEncoderSpec {
    pub variant: EncoderVariant,
    pub dim_audio: usize,
    pub dim_visual: usize,
    pub dim_language: usize,
    /// Language time steps; `None` for vector features.
    pub seq_len: Option<usize>,
    /// Hidden width of the perceptron (unused by the LSTM).
    pub hidden: usize,
    /// Width `d_in` of the fused representation; the LSTM's hidden size.
    pub out_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl FusionEncoderSpec {
    pub fn new(variant: EncoderVariant, dims: (usize, usize, usize), seq_len: Option<usize>) -> Self {
        Self {
            variant,
            dim_audio: dims.0,
            dim_visual: dims.1,
            dim_language: dims.2,
            seq_len,
            hidden: 32,
            out_dim: 16,
            dropout: 0.2,
            activation: Activation::leaky(),
        }
    }

    /// Spec whose modality widths match the first sample of `data`.
    pub fn for_dataset(variant: EncoderVariant, data: &Dataset) -> Result<Self> {
        let (a, v, l, steps) = data
            .dims()
            .ok_or_else(|| Error::contract("cannot size an encoder from an empty dataset"))?;
        Ok(Self::new(variant, (a, v, l), steps))
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(Error::contract("encoder output width must be positive"));
        }
        if self.dim_audio == 0 || self.dim_visual == 0 || self.dim_language == 0 {
            return Err(Error::contract("modality widths must be positive"));
        }
        match self.variant {
            EncoderVariant::ConcatMlp if self.hidden == 0 => {
                Err(Error::contract("perceptron hidden width must be positive"))
            }
            EncoderVariant::ConcatMlp if self.seq_len.is_some() => Err(Error::contract(
                "concat-mlp takes vector language features; use ef-lstm for sequences",
            )),
            EncoderVariant::EfLstm if self.seq_len == Some(0) => {
                Err(Error::contract("ef-lstm needs at least one time step"))
            }
            _ => {
                DropoutSpec::new(self.dropout, false)?;
                Ok(())
            }
        }
    }

    /// Width of one time step of raw features.
    pub fn step_width(&self) -> usize {
        self.dim_audio + self.dim_visual + self.dim_language
    }

    /// Width of all raw features of a sample side by side.
    pub fn raw_width(&self) -> usize {
        self.dim_audio + self.dim_visual + self.dim_language * self.seq_len.unwrap_or(1)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Mlp { hidden: DenseLayer, out: DenseLayer },
    Lstm { cell: LstmCell },
}

/// Encoder `f_θe` and linear head `A_θp`, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub spec: FusionEncoderSpec,
    pub store: ParamStore,
    encoder: Encoder,
    head: DenseLayer,
    dropout: DropoutSpec,
}

impl FusionModel {
    pub fn new(spec: FusionEncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let encoder = match spec.variant {
            EncoderVariant::ConcatMlp => Encoder::Mlp {
                hidden: DenseLayer::new(&mut store, "encoder.fc1", spec.step_width(), spec.hidden, spec.activation, rng),
                out: DenseLayer::new(&mut store, "encoder.fc2", spec.hidden, spec.out_dim, spec.activation, rng),
            },
            EncoderVariant::EfLstm => Encoder::Lstm {
                cell: LstmCell::new(&mut store, "encoder.lstm", spec.step_width(), spec.out_dim, rng),
            },
        };
        let head = DenseLayer::new(&mut store, "head", spec.out_dim, 1, Activation::Identity, rng);
        let dropout = DropoutSpec::new(spec.dropout, false)?;
        Ok(Self {
            spec,
            store,
            encoder,
            head,
            dropout,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = &self.spec;
        let steps = s.seq_len.unwrap_or(1);
        let lang_ok = batch.language.len() == steps && batch.language.iter().all(|m| m.cols == s.dim_language);
        if batch.audio.cols != s.dim_audio || batch.visual.cols != s.dim_visual || !lang_ok {
            let got = [
                batch.audio.cols,
                batch.visual.cols,
                batch.language.first().map_or(0, |m| m.cols),
                batch.language.len(),
            ];
            return Err(Error::shape(
                "encode",
                &got,
                &[s.dim_audio, s.dim_visual, s.dim_language, steps],
            ));
        }
        Ok(())
    }

    /// Fused representation `Z: m×d_in`. Dropout is active only when an RNG
    /// is supplied.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, mut dropout: Option<&mut Rng>) -> Result<Var> {
        self.check_batch(batch)?;
        let train = self.dropout.with_training(true);
        let z = match &self.encoder {
            Encoder::Mlp { hidden, out } => {
                let x = Matrix::hcat(&[&batch.audio, &batch.visual, &batch.language[0]])?;
                let x = tape.constant_matrix(&x);
                let mut h = hidden.forward(tape, bound, x)?;
                if let Some(rng) = dropout.as_deref_mut() {
                    h = nn::dropout_forward(tape, train, h, rng);
                }
                out.forward(tape, bound, h)?
            }
            Encoder::Lstm { cell } => {
                let m = batch.len();
                let mut h = tape.constant(m, cell.hidden, vec![0.0; m * cell.hidden])?;
                let mut c = tape.constant(m, cell.hidden, vec![0.0; m * cell.hidden])?;
                for l in &batch.language {
                    let x = Matrix::hcat(&[&batch.audio, &batch.visual, l])?;
                    let x = tape.constant_matrix(&x);
                    (h, c) = cell.step(tape, bound, x, h, c)?;
                }
                h
            }
        };
        Ok(match dropout {
            Some(rng) => nn::dropout_forward(tape, train, z, rng),
            None => z,
        })
    }

    /// Predictions `m×1` from a fused representation.
    pub fn head(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        self.head.forward(tape, bound, z)
    }

    /// Eval-mode fused representation.
    pub fn embed(&self, batch: &Batch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let z = self.encode(&mut tape, &bound, batch, None)?;
        let [r, c] = tape.shape(z);
        Matrix::from_vec(r, c, tape.value(z).to_vec())
    }

    /// Eval-mode predictions, one per row.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let z = self.encode(&mut tape, &bound, batch, None)?;
        let y = self.head(&mut tape, &bound, z)?;
        Ok(tape.value(y).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownstreamLoss {
    L1,
    /// Binary cross-entropy on logits; targets must be 0 or 1.
    Bce,
}

impl fmt::Display for DownstreamLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DownstreamLoss::L1 => "l1",
            DownstreamLoss::Bce => "bce",
        })
    }
}

impl FromStr for DownstreamLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "mae" => Ok(DownstreamLoss::L1),
            "bce" | "cross-entropy" => Ok(DownstreamLoss::Bce),
            other => Err(Error::contract(format!("unknown downstream loss `{other}` (expected l1 or bce)"))),
        }
    }
}

/// Downstream loss on the tape. `pred` is `m×1`; for BCE it holds logits.
pub fn downstream_loss(kind: DownstreamLoss, tape: &mut Tape, pred: Var, y: &[f64]) -> Result<Var> {
    let [m, c] = tape.shape(pred);
    if m != y.len() || c != 1 {
        return Err(Error::shape("downstream loss", &[m, c], &[y.len(), 1]));
    }
    if kind == DownstreamLoss::Bce {
        if let Some(bad) = y.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::contract(format!("cross-entropy target {bad} is not 0 or 1")));
        }
    }
    let target = tape.constant(m, 1, y.to_vec())?;
    let per_row = match kind {
        DownstreamLoss::L1 => {
            let d = tape.sub(pred, target)?;
            tape.abs(d)
        }
        DownstreamLoss::Bce => {
            // softplus(s) − y·s = −y·ln σ(s) − (1−y)·ln(1 − σ(s))
            let sp = tape.softplus(pred);
            let ys = tape.mul(target, pred)?;
            tape.sub(sp, ys)?
        }
    };
    tape.mean(per_row)
}

/// [`downstream_loss`] on plain values.
pub fn downstream_loss_value(kind: DownstreamLoss, pred: &[f64], y: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.len(), 1, pred.to_vec())?;
    let l = downstream_loss(kind, &mut tape, p, y)?;
    Ok(tape.scalar(l))
}

/// `L_down − λ·Î`.
pub fn penalized_loss(tape: &mut Tape, loss_down: Var, lambda: f64, mdm: Var) -> Result<Var> {
    let pen = tape.scale(mdm, lambda);
    tape.sub(loss_down, pen)
}

/// The total loss from predictions and critic scores on joint and shuffled
/// representations.
pub fn total_loss_value(
    cfg: &TotalLossConfig,
    pred: &[f64],
    y: &[f64],
    t_joint: &[f64],
    t_marg: &[f64],
) -> Result<f64> {
    let down = downstream_loss_value(cfg.loss, pred, y)?;
    if cfg.lambda == 0.0 {
        return Ok(down);
    }
    Ok(down - cfg.lambda * bound_from_scores(cfg.kind, t_joint, t_marg)?)
}

/// What the critic scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticInput {
    /// The encoder output `Z`.
    Fused,
    /// The concatenated raw modalities.
    Raw,
}

impl fmt::Display for CriticInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriticInput::Fused => "fused",
            CriticInput::Raw => "raw",
        })
    }
}

impl FromStr for CriticInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fused" => Ok(CriticInput::Fused),
            "raw" => Ok(CriticInput::Raw),
            other => Err(Error::contract(format!("unknown critic input `{other}` (expected fused or raw)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLossConfig {
    pub lambda: f64,
    pub kind: EstimatorKind,
    pub loss: DownstreamLoss,
    /// Critic steps per classifier step.
    pub unroll: usize,
    pub lr: f64,
    /// Critic learning rate; `None` reuses `lr`.
    pub critic_lr: Option<f64>,
    pub weight_decay: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// `None` uses the estimator's default output activation.
    pub critic_output: Option<OutputActivation>,
    pub critic_input: CriticInput,
    pub critic_dropout: f64,
    /// Critic base width; `None` derives it from the input width.
    pub critic_width: Option<usize>,
    pub ema_decay: Option<f64>,
    /// Draw marginal batches from one shuffle of the training set fixed at
    /// the start, instead of reshuffling every step.
    pub static_shuffle: bool,
}

impl Default for TotalLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            kind: EstimatorKind::Kl,
            loss: DownstreamLoss::L1,
            unroll: 10,
            lr: 1e-3,
            critic_lr: None,
            weight_decay: 0.01,
            clip: 0.05,
            batch_size: 64,
            epochs: 40,
            patience: 10,
            seed: 0,
            critic_output: None,
            critic_input: CriticInput::Fused,
            critic_dropout: 0.4,
            critic_width: None,
            ema_decay: None,
            static_shuffle: false,
        }
    }
}

impl TotalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::contract(format!("λ must be a finite non-negative number, got {}", self.lambda)));
        }
        if self.unroll == 0 {
            return Err(Error::contract("unroll must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::contract("batch size must be at least 2"));
        }
        if !(self.lr >= 0.0) || !(self.critic_lr.unwrap_or(self.lr) >= 0.0) {
            return Err(Error::contract("learning rates must be non-negative"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::contract(format!("clip bound must be positive, got {}", self.clip)));
        }
        DropoutSpec::new(self.critic_dropout, false)?;
        Ok(())
    }

    pub fn critic_spec(&self, input_dim: usize) -> CriticSpec {
        let mut spec = CriticSpec::new(input_dim, self.critic_output.unwrap_or_else(|| self.kind.default_output()));
        spec.dropout = self.critic_dropout;
        if let Some(w) = self.critic_width {
            spec.base_width = w;
        }
        spec
    }

    fn critic_training(&self) -> CriticTraining {
        CriticTraining {
            optimizer: AdamWConfig {
                lr: self.critic_lr.unwrap_or(self.lr),
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            clip: (self.kind == EstimatorKind::W).then_some(self.clip),
            ema_decay: self.ema_decay.filter(|_| self.kind == EstimatorKind::Kl),
        }
    }
}

/// Critic-input width for an encoder under `input`.
pub fn critic_input_dim(input: CriticInput, spec: &FusionEncoderSpec) -> usize {
    match input {
        CriticInput::Fused => spec.out_dim,
        CriticInput::Raw => spec.raw_width(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_mae: f64,
    pub model: ParamStore,
    pub critic: ParamStore,
}

/// Everything a run updates.
#[derive(Debug, Clone)]
pub struct FusionTrainState {
    pub model: FusionModel,
    pub critic: CriticTrainer,
    pub critic_input: CriticInput,
    pub optimizer: AdamWState,
    pub epoch: usize,
    pub best: Snapshot,
}

impl FusionTrainState {
    pub fn new(cfg: &TotalLossConfig, spec: FusionEncoderSpec) -> Result<Self> {
        cfg.validate()?;
        let model = FusionModel::new(spec, &mut rng::stream(cfg.seed, Stream::Init))?;
        let critic_spec = cfg.critic_spec(critic_input_dim(cfg.critic_input, &model.spec));
        let critic = StatisticNetwork::new(critic_spec, &mut rng::stream(cfg.seed, Stream::CriticInit))?;
        let mut critic = CriticTrainer::new(cfg.kind, critic, &cfg.critic_training())?;
        if let Some(c) = critic.clip {
            nn::clip_weights(&mut critic.critic.store, c)?;
        }
        let optimizer = AdamWState::new(
            &model.store,
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        );
        let best = Snapshot {
            epoch: 0,
            val_mae: f64::INFINITY,
            model: model.store.clone(),
            critic: critic.critic.store.clone(),
        };
        Ok(Self {
            model,
            critic,
            critic_input: cfg.critic_input,
            optimizer,
            epoch: 0,
            best,
        })
    }

    /// What the critic sees for `batch` (eval mode).
    pub fn critic_features(&self, batch: &Batch) -> Result<Matrix> {
        match self.critic_input {
            CriticInput::Fused => self.model.embed(batch),
            CriticInput::Raw => batch.flat_features(),
        }
    }

    /// Eval-mode critic scores on aligned rows of `batch`.
    pub fn critic_scores(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.critic.critic.score(&self.critic_features(batch)?)
    }

    pub fn restore_best(&mut self) {
        self.model.store = self.best.model.clone();
        self.critic.critic.store = self.best.critic.clone();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Critic,
    Classifier,
    Validation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Critic => "critic",
            Phase::Classifier => "classifier",
            Phase::Validation => "validation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub loss_down: Option<f64>,
    pub mdm_estimate: Option<f64>,
    pub loss_total: Option<f64>,
    pub val_mae: Option<f64>,
}

pub const LOG_HEADER: &str = "step,epoch,phase,loss_down,mdm_estimate,loss_total,val_mae";

impl LogRow {
    fn new(step: usize, epoch: usize, phase: Phase) -> Self {
        Self {
            step,
            epoch,
            phase,
            loss_down: None,
            mdm_estimate: None,
            loss_total: None,
            val_mae: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.phase,
            cell(self.loss_down),
            cell(self.mdm_estimate),
            cell(self.loss_total),
            cell(self.val_mae)
        )
    }
}

pub fn write_log<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainReport {
    /// Holds the best-validation parameters.
    pub state: FusionTrainState,
    pub log: Vec<LogRow>,
    /// Set when a non-finite loss stopped the run early.
    pub aborted: Option<Error>,
}

/// Rows `idx` of every modality and of the labels.
fn select(full: &Batch, idx: &[usize]) -> Batch {
    let mut b = full.permuted(&[idx.to_vec(), idx.to_vec(), idx.to_vec()]);
    b.y = idx.iter().map(|&i| full.y[i]).collect();
    b
}

fn binarize(y: &[f64]) -> Vec<f64> {
    y.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect()
}

struct Streams {
    batches: Rng,
    critic_batches: Rng,
    shuffle: Rng,
    dropout: Rng,
    critic_dropout: Rng,
}

/// Two-stage training: per outer step, `unroll` critic steps on fresh
/// joint/shuffled pairs, then one classifier step on the next batch with a
/// freshly shuffled companion. The model with the lowest validation MAE is
/// kept; `λ = 0` skips the critic entirely.
pub fn train(cfg: &TotalLossConfig, spec: FusionEncoderSpec, splits: &Splits) -> Result<TrainReport> {
    if splits.train.len() < 2 || splits.valid.is_empty() {
        return Err(Error::contract("training needs at least 2 training and 1 validation sample"));
    }
    let mut state = FusionTrainState::new(cfg, spec)?;
    let train = splits.train.full_batch()?;
    let valid = splits.valid.full_batch()?;
    let n = train.len();
    let m = cfg.batch_size.min(n);
    let mut s = Streams {
        batches: rng::stream(cfg.seed, Stream::Batches),
        critic_batches: rng::stream(cfg.seed, Stream::CriticBatches),
        shuffle: rng::stream(cfg.seed, Stream::Shuffle),
        dropout: rng::stream(cfg.seed, Stream::Dropout),
        critic_dropout: rng::stream(cfg.seed, Stream::CriticDropout),
    };
    let static_perms = if cfg.static_shuffle {
        Some(draw_permutations(3, n, &mut s.shuffle)?)
    } else {
        None
    };
    let marginal = |batch_idx: &[usize], batch: &Batch, rng: &mut Rng| -> Result<Batch> {
        match &static_perms {
            Some(p) => {
                let rows = |j: usize| batch_idx.iter().map(|&i| p[j][i]).collect::<Vec<_>>();
                Ok(train.permuted(&[rows(0), rows(1), rows(2)]))
            }
            None => Ok(shuffle_product_of_marginals(batch, rng)?.batch),
        }
    };

    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        order.shuffle(&mut s.batches);
        for chunk in order.chunks(m).filter(|c| c.len() >= 2) {
            step += 1;
            if cfg.lambda > 0.0 {
                let mut sum = 0.0;
                for _ in 0..cfg.unroll {
                    let idx = index::sample(&mut s.critic_batches, n, m).into_vec();
                    let b = select(&train, &idx);
                    let bm = marginal(&idx, &b, &mut s.shuffle)?;
                    let zj = state.critic_features(&b)?;
                    let zm = state.critic_features(&bm)?;
                    let v = state.critic.step(&zj, &zm, &mut s.critic_dropout);
                    match v {
                        Ok(v) if v.is_finite() && state.critic.critic.store.all_finite() => sum += v,
                        Ok(v) => return Ok(abort(state, log, step, format!("critic estimate {v}"))),
                        Err(e) => return Ok(abort(state, log, step, e.to_string())),
                    }
                }
                let mut row = LogRow::new(step, epoch, Phase::Critic);
                row.mdm_estimate = Some(sum / cfg.unroll as f64);
                log.push(row);
            }

            let b = select(&train, chunk);
            let bm = if cfg.lambda > 0.0 {
                Some(marginal(chunk, &b, &mut s.shuffle)?)
            } else {
                None
            };
            match classifier_step(cfg, &mut state, &b, bm.as_ref(), &mut s.dropout) {
                Ok(row) if row.loss_total.is_some_and(f64::is_finite) && state.model.store.all_finite() => {
                    log.push(LogRow { step, epoch, ..row })
                }
                Ok(row) => return Ok(abort(state, log, step, format!("total loss {:?}", row.loss_total))),
                Err(e @ (Error::Estimation(_) | Error::Optimizer { .. })) => {
                    return Ok(abort(state, log, step, e.to_string()))
                }
                Err(e) => return Err(e),
            }
        }

        let val = downstream_loss_value(DownstreamLoss::L1, &state.model.predict(&valid)?, &valid.y)?;
        let mut row = LogRow::new(step, epoch, Phase::Validation);
        row.val_mae = Some(val);
        log.push(row);
        if val < state.best.val_mae {
            state.best = Snapshot {
                epoch,
                val_mae: val,
                model: state.model.store.clone(),
                critic: state.critic.critic.store.clone(),
            };
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    state.restore_best();
    Ok(TrainReport {
        state,
        log,
        aborted: None,
    })
}

fn abort(mut state: FusionTrainState, log: Vec<LogRow>, step: usize, reason: String) -> TrainReport {
    state.restore_best();
    TrainReport {
        state,
        log,
        aborted: Some(Error::Training { step, reason }),
    }
}

/// One update of encoder and head on `L_down − λ·Î`, with the critic held
/// constant. Gradients reach the encoder through both the joint and the
/// shuffled representations.
fn classifier_step(
    cfg: &TotalLossConfig,
    state: &mut FusionTrainState,
    batch: &Batch,
    shuffled: Option<&Batch>,
    dropout: &mut Rng,
) -> Result<LogRow> {
    let mut tape = Tape::new();
    let bm = state.model.store.bind(&mut tape, true);
    let z = state.model.encode(&mut tape, &bm, batch, Some(dropout))?;
    let pred = state.model.head(&mut tape, &bm, z)?;
    let y = match cfg.loss {
        DownstreamLoss::L1 => batch.y.clone(),
        DownstreamLoss::Bce => binarize(&batch.y),
    };
    let down = downstream_loss(cfg.loss, &mut tape, pred, &y)?;
    let mut row = LogRow::new(0, 0, Phase::Classifier);
    row.loss_down = Some(tape.scalar(down));

    let total = match shuffled {
        Some(sb) => {
            let bc = state.critic.critic.store.bind(&mut tape, false);
            let (zj, zm) = match state.critic_input {
                CriticInput::Fused => (z, state.model.encode(&mut tape, &bm, sb, Some(dropout))?),
                CriticInput::Raw => (
                    tape.constant_matrix(&batch.flat_features()?),
                    tape.constant_matrix(&sb.flat_features()?),
                ),
            };
            let tj = state.critic.critic.forward(&mut tape, &bc, zj, None)?;
            let tm = state.critic.critic.forward(&mut tape, &bc, zm, None)?;
            let mdm = objective(cfg.kind, &mut tape, tj, tm)?;
            row.mdm_estimate = Some(tape.scalar(mdm));
            penalized_loss(&mut tape, down, cfg.lambda, mdm)?
        }
        None => down,
    };
    row.loss_total = Some(tape.scalar(total));
    if !tape.scalar(total).is_finite() {
        return Ok(row);
    }
    tape.backward(total)?;
    let grads = bm.grads(&tape);
    state.optimizer.step(&mut state.model.store, &grads)?;
    Ok(row)
}

/// Writes model parameters, followed by the critic's when given.
pub fn write_checkpoint<W: Write>(w: W, model: &FusionModel, critic: Option<&StatisticNetwork>) -> Result<()> {
    let params: Vec<&Param> = model
        .store
        .params()
        .iter()
        .chain(critic.into_iter().flat_map(|c| c.store.params()))
        .collect();
    nn::write_checkpoint(w, params)
}

/// Rebuilds a training state from checkpoint entries. The flag reports
/// whether the checkpoint carried critic parameters; without them the
/// critic keeps its initial values.
pub fn restore_state(
    cfg: &TotalLossConfig,
    spec: FusionEncoderSpec,
    named: &[(String, nn::Tensor)],
) -> Result<(FusionTrainState, bool)> {
    let mut state = FusionTrainState::new(cfg, spec)?;
    state.model.store.load_from(named)?;
    let has_critic = named.iter().any(|(n, _)| n.starts_with("critic."));
    if has_critic {
        state.critic.critic.store.load_from(named)?;
    }
    state.best.model = state.model.store.clone();
    state.best.critic = state.critic.critic.store.clone();
    Ok((state, has_critic))
}
