//! The statistic network and the three variational dependency surrogates:
//!
//! * `Kl`: Donsker-Varadhan, `E_p[T] − log E_q[e^T]`
//! * `F`:  f-divergence (NWJ), `E_p[T] − E_q[e^{T−1}]`
//! * `W`:  Wasserstein dependency, `E_p[T] − log E_q[T]` with a clipped,
//!   positive-output critic
//!
//! `p` is the joint distribution of the modalities and `q` the product of
//! their marginals, sampled by shuffling each modality within a batch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var, LEAKY_RELU_SLOPE};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Activation, AdamWConfig, AdamWState, DenseLayer, DropoutSpec, ParamStore};
use crate::rng::Rng;

/// Largest critic output accepted inside the exponential of the `F` bound.
pub const MAX_EXP_ARGUMENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Kl,
    F,
    W,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Kl, EstimatorKind::F, EstimatorKind::W];

    /// Output activation used when none is configured.
    pub fn default_output(self) -> OutputActivation {
        match self {
            EstimatorKind::Kl | EstimatorKind::F => OutputActivation::Identity,
            EstimatorKind::W => OutputActivation::Sigmoid,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Kl => "kl",
            EstimatorKind::F => "f",
            EstimatorKind::W => "w",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(EstimatorKind::Kl),
            "f" => Ok(EstimatorKind::F),
            "w" => Ok(EstimatorKind::W),
            other => Err(format!("unknown estimator kind `{other}` (expected kl, f or w)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    Softplus,
}

impl OutputActivation {
    fn activation(self) -> Activation {
        match self {
            OutputActivation::Identity => Activation::Identity,
            OutputActivation::Sigmoid => Activation::Sigmoid,
            OutputActivation::Softplus => Activation::Softplus,
        }
    }

    pub fn is_positive(self) -> bool {
        !matches!(self, OutputActivation::Identity)
    }
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Sigmoid => "sigmoid",
            OutputActivation::Softplus => "softplus",
        })
    }
}

impl FromStr for OutputActivation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(OutputActivation::Identity),
            "sigmoid" => Ok(OutputActivation::Sigmoid),
            "softplus" => Ok(OutputActivation::Softplus),
            other => Err(format!("unknown critic output `{other}`")),
        }
    }
}

pub const MIN_CRITIC_WIDTH: usize = 4;

/// Shape of the statistic network.
///
/// The hidden widths follow `w/2, w, w, w/4, w/4` (integer division, at least
/// [`MIN_CRITIC_WIDTH`]) with `w` the base width, which defaults to the input
/// width. Every hidden layer uses LeakyReLU followed by dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSpec {
    pub input_dim: usize,
    pub base_width: usize,
    pub dropout: f64,
    pub output: OutputActivation,
}

impl CriticSpec {
    pub fn new(input_dim: usize, output: OutputActivation) -> Self {
        Self {
            input_dim,
            base_width: input_dim,
            dropout: 0.4,
            output,
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        let w = self.base_width;
        [w / 2, w, w, w / 4, w / 4]
            .into_iter()
            .map(|d| d.max(MIN_CRITIC_WIDTH))
            .collect()
    }
}

/// The critic `T_θ`: one scalar per input row.
#[derive(Debug, Clone)]
pub struct StatisticNetwork {
    pub spec: CriticSpec,
    pub store: ParamStore,
    layers: Vec<DenseLayer>,
    dropout: DropoutSpec,
}

impl StatisticNetwork {
    pub fn new(spec: CriticSpec, rng: &mut Rng) -> Result<Self> {
        if spec.input_dim == 0 {
            return Err(Error::contract("critic input width must be positive"));
        }
        let dropout = DropoutSpec::new(spec.dropout, false)?;
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = spec.input_dim;
        for (i, out) in spec.hidden_widths().into_iter().enumerate() {
            layers.push(DenseLayer::new(
                &mut store,
                &format!("critic.l{i}"),
                width,
                out,
                Activation::LeakyRelu(LEAKY_RELU_SLOPE),
                rng,
            ));
            width = out;
        }
        let last = layers.len();
        layers.push(DenseLayer::new(
            &mut store,
            &format!("critic.l{last}"),
            width,
            1,
            spec.output.activation(),
            rng,
        ));
        Ok(Self {
            spec,
            store,
            layers,
            dropout,
        })
    }

    /// Scores `z: m×d_in` into an `m×1` node. Dropout is active only when a
    /// dropout RNG is supplied.
    pub fn forward(&self, tape: &mut Tape, bound: &nn::Bound, z: Var, mut dropout: Option<&mut Rng>) -> Result<Var> {
        let mut h = z;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last {
                if let Some(rng) = dropout.as_deref_mut() {
                    h = nn::dropout_forward(tape, self.dropout.with_training(true), h, rng);
                }
            }
        }
        Ok(h)
    }

    /// Eval-mode scores for every row of `z`.
    pub fn score(&self, z: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let zv = tape.constant_matrix(z);
        let out = self.forward(&mut tape, &bound, zv, None)?;
        Ok(tape.value(out).to_vec())
    }
}

/// A dependency estimate in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdmEstimate {
    pub value: f64,
    pub kind: EstimatorKind,
    pub batch_size: usize,
    /// Fingerprint of the critic parameters that produced the value.
    pub critic_id: u64,
}

/// Builds the bound of `kind` from critic outputs on joint and
/// product-of-marginals samples.
pub fn objective(kind: EstimatorKind, tape: &mut Tape, t_joint: Var, t_marg: Var) -> Result<Var> {
    for (name, v) in [("joint", t_joint), ("marginal", t_marg)] {
        if let Some(i) = tape.value(v).iter().position(|x| !x.is_finite()) {
            return Err(Error::Estimation(format!(
                "non-finite critic output on {name} row {i}"
            )));
        }
    }
    let first = tape.mean(t_joint)?;
    let second = match kind {
        EstimatorKind::Kl => tape.log_mean_exp(t_marg)?,
        EstimatorKind::F => {
            let max = tape.value(t_marg).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max - 1.0 > MAX_EXP_ARGUMENT {
                return Err(Error::Estimation(format!(
                    "critic output {max} overflows exp in the f-divergence bound; \
                     enable weight clipping or lower the critic learning rate"
                )));
            }
            let shifted = tape.add_scalar(t_marg, -1.0);
            let e = tape.exp(shifted);
            tape.mean(e)?
        }
        EstimatorKind::W => {
            let mean = tape.mean(t_marg)?;
            if !(tape.scalar(mean) > 0.0) {
                return Err(Error::Estimation(format!(
                    "mean critic output on marginal samples is {}, the Wasserstein bound needs it positive",
                    tape.scalar(mean)
                )));
            }
            tape.log(mean)?
        }
    };
    tape.sub(first, second)
}

/// The bound of `kind` evaluated on fixed critic outputs.
pub fn bound_from_scores(kind: EstimatorKind, t_joint: &[f64], t_marg: &[f64]) -> Result<f64> {
    if t_joint.is_empty() || t_marg.is_empty() {
        return Err(Error::contract("estimates need non-empty joint and marginal samples"));
    }
    let mut tape = Tape::new();
    let j = tape.constant(t_joint.len(), 1, t_joint.to_vec())?;
    let m = tape.constant(t_marg.len(), 1, t_marg.to_vec())?;
    let out = objective(kind, &mut tape, j, m)?;
    Ok(tape.scalar(out))
}

/// Eval-mode estimate on critic inputs `z_joint` and `z_marg`.
pub fn estimate(kind: EstimatorKind, critic: &StatisticNetwork, z_joint: &Matrix, z_marg: &Matrix) -> Result<MdmEstimate> {
    for z in [z_joint, z_marg] {
        if z.rows == 0 || z.cols != critic.spec.input_dim {
            return Err(Error::shape("estimate", &z.shape(), &[z.rows, critic.spec.input_dim]));
        }
    }
    let tj = critic.score(z_joint)?;
    let tm = critic.score(z_marg)?;
    Ok(MdmEstimate {
        value: bound_from_scores(kind, &tj, &tm)?,
        kind,
        batch_size: z_joint.rows,
        critic_id: critic.store.fingerprint(),
    })
}

pub fn estimate_kl(critic: &StatisticNetwork, z_joint: &Matrix, z_marg: &Matrix) -> Result<MdmEstimate> {
    estimate(EstimatorKind::Kl, critic, z_joint, z_marg)
}

pub fn estimate_f(critic: &StatisticNetwork, z_joint: &Matrix, z_marg: &Matrix) -> Result<MdmEstimate> {
    estimate(EstimatorKind::F, critic, z_joint, z_marg)
}

pub fn estimate_w(critic: &StatisticNetwork, z_joint: &Matrix, z_marg: &Matrix) -> Result<MdmEstimate> {
    estimate(EstimatorKind::W, critic, z_joint, z_marg)
}

/// Independent uniform permutations of `0..m`, one per block.
pub fn draw_permutations(blocks: usize, m: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if m < 2 {
        return Err(Error::contract(format!(
            "shuffling needs at least 2 samples, got {m}"
        )));
    }
    Ok((0..blocks)
        .map(|_| {
            let mut p: Vec<usize> = (0..m).collect();
            p.shuffle(rng);
            p
        })
        .collect())
}

/// A product-of-marginals batch and the permutations that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffledBatch {
    pub perms: [Vec<usize>; 3],
    pub batch: Batch,
}

/// Shuffles each modality of `batch` with its own permutation; row `i` of
/// modality `j` is source row `σ_j(i)`.
pub fn shuffle_product_of_marginals(batch: &Batch, rng: &mut Rng) -> Result<ShuffledBatch> {
    let mut p = draw_permutations(3, batch.len(), rng)?.into_iter();
    let perms = [p.next().unwrap(), p.next().unwrap(), p.next().unwrap()];
    Ok(ShuffledBatch {
        batch: batch.permuted(&perms),
        perms,
    })
}

/// Row-shuffles every block independently, then joins them column-wise.
pub fn shuffle_blocks(blocks: &[&Matrix], rng: &mut Rng) -> Result<Matrix> {
    let m = blocks.first().map_or(0, |b| b.rows);
    let perms = draw_permutations(blocks.len(), m, rng)?;
    let shuffled: Vec<Matrix> = blocks.iter().zip(&perms).map(|(b, p)| b.gather_rows(p)).collect();
    Matrix::hcat(&shuffled.iter().collect::<Vec<_>>())
}

/// Critic optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTraining {
    pub optimizer: AdamWConfig,
    /// Weight clipping bound, applied after every step when set.
    pub clip: Option<f64>,
    /// Moving-average decay for the `Kl` denominator; `None` uses the raw
    /// (biased) gradient.
    pub ema_decay: Option<f64>,
}

/// Critic, its optimizer and the running state of one estimator.
#[derive(Debug, Clone)]
pub struct CriticTrainer {
    pub kind: EstimatorKind,
    pub critic: StatisticNetwork,
    pub optimizer: AdamWState,
    pub clip: Option<f64>,
    ema_decay: Option<f64>,
    log_ema: Option<f64>,
}

impl CriticTrainer {
    pub fn new(kind: EstimatorKind, critic: StatisticNetwork, training: &CriticTraining) -> Result<Self> {
        if kind == EstimatorKind::W {
            if !critic.spec.output.is_positive() {
                return Err(Error::contract(
                    "the Wasserstein estimator needs a positive critic output (sigmoid or softplus)",
                ));
            }
            if training.clip.is_none() {
                return Err(Error::contract("the Wasserstein estimator needs weight clipping"));
            }
        }
        if let Some(c) = training.clip {
            if !(c > 0.0) {
                return Err(Error::contract(format!("clip bound must be positive, got {c}")));
            }
        }
        if let Some(d) = training.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::contract(format!("moving-average decay {d} outside [0, 1)")));
            }
        }
        let optimizer = AdamWState::new(&critic.store, training.optimizer);
        Ok(Self {
            kind,
            critic,
            optimizer,
            clip: training.clip,
            ema_decay: training.ema_decay,
            log_ema: None,
        })
    }

    /// One gradient-ascent step on the critic parameters only. Returns the
    /// bound measured before the update (dropout active).
    pub fn step(&mut self, z_joint: &Matrix, z_marg: &Matrix, dropout: &mut Rng) -> Result<f64> {
        if z_joint.rows != z_marg.rows {
            return Err(Error::shape("statistic step", &z_joint.shape(), &z_marg.shape()));
        }
        let mut tape = Tape::new();
        let bound = self.critic.store.bind(&mut tape, true);
        let zj = tape.constant_matrix(z_joint);
        let zm = tape.constant_matrix(z_marg);
        let tj = self.critic.forward(&mut tape, &bound, zj, Some(dropout))?;
        let tm = self.critic.forward(&mut tape, &bound, zm, Some(dropout))?;
        let obj = objective(self.kind, &mut tape, tj, tm)?;
        let value = tape.scalar(obj);

        let target = match (self.kind, self.ema_decay) {
            (EstimatorKind::Kl, Some(decay)) => {
                let lme = tape.log_mean_exp(tm)?;
                let batch = tape.scalar(lme);
                let log_ema = match self.log_ema {
                    None => batch,
                    Some(prev) => log_add(decay.ln() + prev, (1.0 - decay).ln() + batch),
                };
                self.log_ema = Some(log_ema);
                // ∇ = E_p[∇T] − E_q[e^T ∇T] / ema
                let first = tape.mean(tj)?;
                let shifted = tape.add_scalar(lme, -log_ema);
                let ratio = tape.exp(shifted);
                tape.sub(first, ratio)?
            }
            _ => obj,
        };
        let loss = tape.scale(target, -1.0);
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        self.optimizer.step(&mut self.critic.store, &grads)?;
        if let Some(c) = self.clip {
            nn::clip_weights(&mut self.critic.store, c)?;
        }
        Ok(value)
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Features, MultimodalSample};
    use crate::rng::{stream, Rng, Stream};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn rng(seed: u64) -> Rng {
        stream(seed, Stream::CriticInit)
    }

    fn critic(input: usize, output: OutputActivation, seed: u64) -> StatisticNetwork {
        StatisticNetwork::new(CriticSpec::new(input, output), &mut rng(seed)).unwrap()
    }

    /// Zeroes every weight and sets the final bias to `c`, giving `T ≡ c`
    /// before the output activation.
    fn constant_critic(input: usize, output: OutputActivation, c: f64) -> StatisticNetwork {
        let mut net = critic(input, output, 0);
        let n = net.store.len();
        for (i, p) in net.store.params_mut().iter_mut().enumerate() {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
            if i == n - 1 {
                p.value.data[0] = c;
            }
        }
        net
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn table_widths() {
        let spec = CriticSpec::new(32, OutputActivation::Identity);
        assert_eq!(spec.hidden_widths(), vec![16, 32, 32, 8, 8]);
        let spec = CriticSpec::new(10, OutputActivation::Identity);
        assert_eq!(spec.hidden_widths(), vec![5, 10, 10, 4, 4]);
        let net = critic(10, OutputActivation::Sigmoid, 1);
        assert_eq!(net.store.len(), 12);
        let scores = net.score(&random_matrix(7, 10, 2)).unwrap();
        assert_eq!(scores.len(), 7);
        assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn constant_critic_examples() {
        let z = random_matrix(6, 4, 3);
        let zm = random_matrix(6, 4, 4);
        let kl = estimate_kl(&constant_critic(4, OutputActivation::Identity, 1.7), &z, &zm).unwrap();
        assert!(kl.value.abs() < 1e-12);
        let f = estimate_f(&constant_critic(4, OutputActivation::Identity, 1.0), &z, &zm).unwrap();
        assert!(f.value.abs() < 1e-12);
        assert_eq!(bound_from_scores(EstimatorKind::W, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_critic_values_are_exact() {
        let z = random_matrix(5, 4, 5);
        let net = constant_critic(4, OutputActivation::Identity, 0.0);
        assert_eq!(estimate_kl(&net, &z, &z).unwrap().value, 0.0);
        let f = estimate_f(&net, &z, &z).unwrap().value;
        assert_eq!(f, -(-1.0f64).exp());
        assert!((f + 0.3679).abs() < 1e-4);
    }

    #[test]
    fn hand_computed_bounds() {
        let kl = bound_from_scores(EstimatorKind::Kl, &[1.0, 2.0], &[0.0, 1.0]).unwrap();
        let expect = 1.5 - ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.8799).abs() < 1e-4);
        let f = bound_from_scores(EstimatorKind::F, &[1.0, 2.0], &[0.0, 1.0]).unwrap();
        assert!((f - (1.5 - ((-1.0f64).exp() + 1.0) / 2.0)).abs() < 1e-12);
        assert!((f - 0.8161).abs() < 1e-4);
        let w = bound_from_scores(EstimatorKind::W, &[0.5, 0.5], &[0.25, 0.25]).unwrap();
        assert!((w - (0.5 - 0.25f64.ln())).abs() < 1e-12);
        assert!((w - 1.8863).abs() < 1e-4);
    }

    #[test]
    fn estimation_errors() {
        assert!(matches!(
            bound_from_scores(EstimatorKind::Kl, &[f64::NAN], &[0.0]),
            Err(Error::Estimation(_))
        ));
        match bound_from_scores(EstimatorKind::F, &[0.0], &[800.0]) {
            Err(Error::Estimation(msg)) => assert!(msg.contains("clipping"), "{msg}"),
            other => panic!("expected estimation error, got {other:?}"),
        }
        assert!(matches!(
            bound_from_scores(EstimatorKind::W, &[0.5], &[-0.5, 0.25]),
            Err(Error::Estimation(_))
        ));
        assert!(bound_from_scores(EstimatorKind::Kl, &[], &[1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn dv_dominates_nwj(seed in any::<u64>(), m in 2usize..40) {
            let mut r = rng(seed);
            let net = StatisticNetwork::new(CriticSpec::new(6, OutputActivation::Identity), &mut r).unwrap();
            let zj = random_matrix(m, 6, seed ^ 1);
            let zm = random_matrix(m, 6, seed ^ 2);
            let kl = estimate_kl(&net, &zj, &zm).unwrap().value;
            let f = estimate_f(&net, &zj, &zm).unwrap().value;
            prop_assert!(kl - f >= -1e-12, "{kl} < {f}");
        }

        #[test]
        fn estimates_ignore_row_order(seed in any::<u64>(), m in 2usize..20) {
            let net = critic(5, OutputActivation::Softplus, seed);
            let zj = random_matrix(m, 5, seed ^ 3);
            let zm = random_matrix(m, 5, seed ^ 4);
            let mut r = rng(seed ^ 5);
            let p = draw_permutations(2, m, &mut r).unwrap();
            let (zj2, zm2) = (zj.gather_rows(&p[0]), zm.gather_rows(&p[1]));
            for kind in EstimatorKind::ALL {
                let a = estimate(kind, &net, &zj, &zm).unwrap().value;
                let b = estimate(kind, &net, &zj2, &zm).unwrap().value;
                let c = estimate(kind, &net, &zj, &zm2).unwrap().value;
                prop_assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
            }
        }

        #[test]
        fn shuffling_preserves_multisets(seed in any::<u64>(), m in 2usize..30) {
            let ds = Dataset {
                samples: (0..m)
                    .map(|i| MultimodalSample {
                        audio: vec![i as f64, -(i as f64)],
                        visual: vec![100.0 + i as f64],
                        language: Features::Vector(vec![200.0 + i as f64]),
                        y: 0.0,
                    })
                    .collect(),
            };
            let batch = ds.full_batch().unwrap();
            let s = shuffle_product_of_marginals(&batch, &mut rng(seed)).unwrap();
            for (src, out) in [(&batch.audio, &s.batch.audio), (&batch.visual, &s.batch.visual), (&batch.language[0], &s.batch.language[0])] {
                let mut a: Vec<Vec<u64>> = (0..m).map(|i| src.row(i).iter().map(|v| v.to_bits()).collect()).collect();
                let mut b: Vec<Vec<u64>> = (0..m).map(|i| out.row(i).iter().map(|v| v.to_bits()).collect()).collect();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
            for p in &s.perms {
                let mut q = p.clone();
                q.sort();
                prop_assert_eq!(q, (0..m).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn shuffle_needs_two_rows() {
        let ds = Dataset {
            samples: vec![MultimodalSample {
                audio: vec![1.0],
                visual: vec![1.0],
                language: Features::Vector(vec![1.0]),
                y: 0.0,
            }],
        };
        let b = ds.full_batch().unwrap();
        assert!(matches!(shuffle_product_of_marginals(&b, &mut rng(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_permutations_reproduce_the_batch() {
        let ds = Dataset {
            samples: (0..4)
                .map(|i| MultimodalSample {
                    audio: vec![i as f64],
                    visual: vec![i as f64 * 2.0],
                    language: Features::Vector(vec![i as f64 * 3.0]),
                    y: 1.0,
                })
                .collect(),
        };
        let b = ds.full_batch().unwrap();
        let id: Vec<usize> = (0..4).collect();
        let p = b.permuted(&[id.clone(), id.clone(), id]);
        assert_eq!(p.audio, b.audio);
        assert_eq!(p.visual, b.visual);
        assert_eq!(p.language, b.language);
    }

    #[test]
    fn eval_estimates_are_bitwise_deterministic() {
        let net = critic(6, OutputActivation::Identity, 8);
        let (zj, zm) = (random_matrix(16, 6, 9), random_matrix(16, 6, 10));
        for kind in [EstimatorKind::Kl, EstimatorKind::F] {
            let a = estimate(kind, &net, &zj, &zm).unwrap();
            let b = estimate(kind, &net, &zj, &zm).unwrap();
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            assert_eq!(a.critic_id, b.critic_id);
        }
    }

    fn training(lr: f64, clip: Option<f64>) -> CriticTraining {
        CriticTraining {
            optimizer: AdamWConfig { lr, ..Default::default() },
            clip,
            ema_decay: None,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_critic_unchanged() {
        let net = critic(6, OutputActivation::Identity, 11);
        let before = net.store.fingerprint();
        let mut trainer = CriticTrainer::new(EstimatorKind::Kl, net, &training(0.0, None)).unwrap();
        let zj = random_matrix(8, 6, 12);
        let zm = random_matrix(8, 6, 13);
        let v = trainer.step(&zj, &zm, &mut rng(14)).unwrap();
        assert_eq!(trainer.critic.store.fingerprint(), before);
        // same dropout draws reproduce the returned value
        let mut tape = Tape::new();
        let b = trainer.critic.store.bind(&mut tape, false);
        let (j, m) = (tape.constant_matrix(&zj), tape.constant_matrix(&zm));
        let mut d = rng(14);
        let tj = trainer.critic.forward(&mut tape, &b, j, Some(&mut d)).unwrap();
        let tm = trainer.critic.forward(&mut tape, &b, m, Some(&mut d)).unwrap();
        let o = objective(EstimatorKind::Kl, &mut tape, tj, tm).unwrap();
        assert_eq!(tape.scalar(o).to_bits(), v.to_bits());
    }

    #[test]
    fn single_step_increases_the_objective() {
        for kind in EstimatorKind::ALL {
            let output = kind.default_output();
            let net = critic(6, output, 15);
            let clip = (kind == EstimatorKind::W).then_some(0.05);
            let mut trainer = CriticTrainer::new(kind, net, &training(1e-3, clip)).unwrap();
            if let Some(c) = clip {
                nn::clip_weights(&mut trainer.critic.store, c).unwrap();
            }
            let zj = random_matrix(32, 6, 16);
            let zm = random_matrix(32, 6, 17);
            let before = trainer.step(&zj, &zm, &mut rng(18)).unwrap();
            // replay the same dropout mask after the update
            let after = {
                let mut t = trainer.clone();
                t.optimizer.config.lr = 0.0;
                t.step(&zj, &zm, &mut rng(18)).unwrap()
            };
            assert!(after > before, "{kind}: {after} <= {before}");
        }
    }

    #[test]
    fn wasserstein_step_respects_clip() {
        let net = critic(6, OutputActivation::Sigmoid, 19);
        let mut trainer = CriticTrainer::new(EstimatorKind::W, net, &training(0.1, Some(0.05))).unwrap();
        let zj = random_matrix(16, 6, 20);
        let zm = random_matrix(16, 6, 21);
        for _ in 0..3 {
            trainer.step(&zj, &zm, &mut rng(22)).unwrap();
        }
        let max = trainer
            .critic
            .store
            .params()
            .iter()
            .flat_map(|p| p.value.data.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max <= 0.05);
    }

    #[test]
    fn wasserstein_requires_positive_output_and_clipping() {
        let net = critic(6, OutputActivation::Identity, 0);
        assert!(CriticTrainer::new(EstimatorKind::W, net, &training(1e-3, Some(0.05))).is_err());
        let net = critic(6, OutputActivation::Sigmoid, 0);
        assert!(CriticTrainer::new(EstimatorKind::W, net, &training(1e-3, None)).is_err());
    }

    #[test]
    fn moving_average_correction_trains() {
        let net = critic(4, OutputActivation::Identity, 23);
        let cfg = CriticTraining { ema_decay: Some(0.99), ..training(1e-3, None) };
        let mut trainer = CriticTrainer::new(EstimatorKind::Kl, net, &cfg).unwrap();
        let zj = random_matrix(16, 4, 24);
        let zm = random_matrix(16, 4, 25);
        let before = trainer.critic.store.fingerprint();
        let v = trainer.step(&zj, &zm, &mut rng(26)).unwrap();
        assert!(v.is_finite());
        assert_ne!(trainer.critic.store.fingerprint(), before);
    }
}
