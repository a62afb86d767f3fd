//! Synthetic data with analytic dependency oracles, multimodal samples and
//! the JSON-lines dataset format.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng, Stream};

/// Language-modality features: one vector, or one vector per time step.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Features {
    Vector(Vec<f64>),
    Sequence(Vec<Vec<f64>>),
}

impl Features {
    /// Time steps; a plain vector counts as a single step.
    pub fn steps(&self) -> Vec<&[f64]> {
        match self {
            Features::Vector(v) => vec![v.as_slice()],
            Features::Sequence(s) => s.iter().map(Vec::as_slice).collect(),
        }
    }

    /// `(steps, width)`; `steps` is `None` for a plain vector.
    pub fn layout(&self) -> (Option<usize>, usize) {
        match self {
            Features::Vector(v) => (None, v.len()),
            Features::Sequence(s) => (Some(s.len()), s.first().map_or(0, Vec::len)),
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            Features::Vector(v) => Box::new(v.iter()),
            Features::Sequence(s) => Box::new(s.iter().flatten()),
        }
    }
}

/// Audio, visual and language features with a sentiment label in `[−3, 3]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalSample {
    #[serde(rename = "a")]
    pub audio: Vec<f64>,
    #[serde(rename = "v")]
    pub visual: Vec<f64>,
    #[serde(rename = "l")]
    pub language: Features,
    pub y: f64,
}

impl MultimodalSample {
    fn layout(&self) -> (usize, usize, (Option<usize>, usize)) {
        (self.audio.len(), self.visual.len(), self.language.layout())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.y.abs() <= 3.0) {
            return Err(format!("label {} outside [-3, 3]", self.y));
        }
        let finite = self
            .audio
            .iter()
            .chain(&self.visual)
            .chain(self.language.values())
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite feature".into());
        }
        if let Features::Sequence(s) = &self.language {
            if s.is_empty() {
                return Err("empty language sequence".into());
            }
            if s.iter().any(|step| step.len() != s[0].len()) {
                return Err("ragged language sequence".into());
            }
        }
        Ok(())
    }
}

/// Rows of a batch, one matrix per modality; the language modality holds one
/// matrix per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub audio: Matrix,
    pub visual: Matrix,
    pub language: Vec<Matrix>,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&MultimodalSample]) -> Result<Self> {
        let audio = Matrix::from_rows(&samples.iter().map(|s| s.audio.as_slice()).collect::<Vec<_>>())?;
        let visual = Matrix::from_rows(&samples.iter().map(|s| s.visual.as_slice()).collect::<Vec<_>>())?;
        let steps = samples.first().map_or(1, |s| s.language.steps().len());
        let mut language = Vec::with_capacity(steps);
        for t in 0..steps {
            let rows = samples
                .iter()
                .map(|s| {
                    s.language
                        .steps()
                        .get(t)
                        .copied()
                        .ok_or_else(|| Error::shape("language steps", &[steps], &[s.language.steps().len()]))
                })
                .collect::<Result<Vec<_>>>()?;
            language.push(Matrix::from_rows(&rows)?);
        }
        Ok(Self {
            audio,
            visual,
            language,
            y: samples.iter().map(|s| s.y).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.audio.rows
    }

    pub fn is_empty(&self) -> bool {
        self.audio.rows == 0
    }

    /// Row `i` of modality `j` becomes source row `perms[j][i]`. Labels are
    /// dropped since they belong to no single modality.
    pub fn permuted(&self, perms: &[Vec<usize>; 3]) -> Self {
        Self {
            audio: self.audio.gather_rows(&perms[0]),
            visual: self.visual.gather_rows(&perms[1]),
            language: self.language.iter().map(|m| m.gather_rows(&perms[2])).collect(),
            y: Vec::new(),
        }
    }

    /// All modalities of each row flattened side by side.
    pub fn flat_features(&self) -> Result<Matrix> {
        let mut parts = vec![&self.audio, &self.visual];
        parts.extend(self.language.iter());
        Matrix::hcat(&parts)
    }
}

/// Ordered samples sharing one layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, index: &[usize]) -> Result<Batch> {
        let rows: Vec<&MultimodalSample> = index.iter().map(|&i| &self.samples[i]).collect();
        Batch::from_samples(&rows)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        let index: Vec<usize> = (0..self.len()).collect();
        self.batch(&index)
    }

    /// `(d_a, d_v, d_l, steps)` of the first sample.
    pub fn dims(&self) -> Option<(usize, usize, usize, Option<usize>)> {
        self.samples.first().map(|s| {
            let (a, v, (steps, l)) = s.layout();
            (a, v, l, steps)
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Multivariate Gaussian whose variables are `d`-dimensional blocks with
/// `corr(X_i, X_k) = δ_ik ρ` across blocks and identity within a block.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub dim: usize,
    pub rho: f64,
    pub vars: usize,
    pub n: usize,
    covariance: Matrix,
    cholesky: Matrix,
}

impl GaussianSpec {
    pub fn new(dim: usize, rho: f64, vars: usize, n: usize) -> Result<Self> {
        if !(2..=3).contains(&vars) {
            return Err(Error::contract(format!("number of variables must be 2 or 3, got {vars}")));
        }
        if dim == 0 {
            return Err(Error::contract("variable dimension must be positive"));
        }
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::contract(format!("correlation {rho} outside (-1, 1)")));
        }
        let size = vars * dim;
        let mut cov = Matrix::zeros(size, size);
        for i in 0..size {
            for k in 0..size {
                let same_var = i / dim == k / dim;
                let same_coord = i % dim == k % dim;
                cov.data[i * size + k] = match (same_var, same_coord) {
                    (true, true) => 1.0,
                    (false, true) => rho,
                    _ => 0.0,
                };
            }
        }
        Self::with_covariance(dim, vars, n, rho, cov)
    }

    /// Explicit joint covariance of `vars` blocks of width `dim`.
    pub fn with_covariance(dim: usize, vars: usize, n: usize, rho: f64, covariance: Matrix) -> Result<Self> {
        let size = vars * dim;
        if covariance.shape() != [size, size] {
            return Err(Error::shape("gaussian covariance", &covariance.shape(), &[size, size]));
        }
        let cholesky = cholesky(&covariance)?;
        Ok(Self {
            dim,
            rho,
            vars,
            n,
            covariance,
            cholesky,
        })
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    /// Lower-triangular factor `L` with `L·Lᵀ = Σ`.
    pub fn cholesky(&self) -> &Matrix {
        &self.cholesky
    }
}

/// Lower Cholesky factor; fails when `a` is not symmetric positive definite.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::shape("cholesky", &a.shape(), &[n, n]));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            if (a.data[i * n + j] - a.data[j * n + i]).abs() > 1e-12 {
                return Err(Error::contract("covariance matrix is not symmetric"));
            }
            let mut s = a.data[i * n + j];
            for k in 0..j {
                s -= l.data[i * n + k] * l.data[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::contract(format!(
                        "covariance matrix is not positive definite (pivot {i} = {s})"
                    )));
                }
                l.data[i * n + i] = s.sqrt();
            } else {
                l.data[i * n + j] = s / l.data[j * n + j];
            }
        }
    }
    Ok(l)
}

fn log_det_spd(a: &Matrix) -> Result<f64> {
    let l = cholesky(a)?;
    Ok((0..a.rows).map(|i| 2.0 * l.data[i * a.rows + i].ln()).sum())
}

/// Draws `spec.n` joint samples; returns one `n×d` matrix per variable.
pub fn gen_correlated_gaussian(spec: &GaussianSpec, rng: &mut Rng) -> Vec<Matrix> {
    let size = spec.vars * spec.dim;
    let l = &spec.cholesky;
    let mut blocks = vec![Matrix::zeros(spec.n, spec.dim); spec.vars];
    let mut eps = vec![0.0; size];
    for r in 0..spec.n {
        eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        for i in 0..size {
            let x: f64 = (0..=i).map(|k| l.data[i * size + k] * eps[k]).sum();
            blocks[i / spec.dim].data[r * spec.dim + i % spec.dim] = x;
        }
    }
    blocks
}

/// Total correlation in nats: `½ (Σ_j log det Σ_jj − log det Σ)`.
pub fn gaussian_dependency_oracle(spec: &GaussianSpec) -> Result<f64> {
    let size = spec.vars * spec.dim;
    let mut marginal = 0.0;
    for j in 0..spec.vars {
        let idx: Vec<usize> = (j * spec.dim..(j + 1) * spec.dim).collect();
        let mut block = Matrix::zeros(spec.dim, spec.dim);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &k) in idx.iter().enumerate() {
                block.data[r * spec.dim + c] = spec.covariance.data[i * size + k];
            }
        }
        marginal += log_det_spd(&block)?;
    }
    Ok(0.5 * (marginal - log_det_spd(&spec.covariance)?))
}

/// Desk-scale multimodal regression task driven by a shared latent factor:
/// `x_j = W_j z + ε_j`, `y = clamp(w·z + ε_y, −3, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub latent_dim: usize,
    pub dim_audio: usize,
    pub dim_visual: usize,
    pub dim_language: usize,
    /// Language time steps; `None` for a single vector per sample.
    pub seq_len: Option<usize>,
    pub loading_scale: f64,
    pub noise_audio: f64,
    pub noise_visual: f64,
    pub noise_language: f64,
    /// Standard deviation of `w·z`.
    pub label_scale: f64,
    pub label_noise: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            dim_audio: 12,
            dim_visual: 12,
            dim_language: 12,
            seq_len: None,
            loading_scale: 1.0,
            noise_audio: 2.0,
            noise_visual: 2.0,
            noise_language: 1.0,
            label_scale: 1.5,
            label_noise: 0.3,
            n_train: 2000,
            n_valid: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let noises = [self.noise_audio, self.noise_visual, self.noise_language];
        if noises.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::contract("modality noise standard deviations must be positive"));
        }
        if self.noise_language > self.noise_audio || self.noise_language > self.noise_visual {
            return Err(Error::contract(
                "the language modality must carry the smallest noise standard deviation",
            ));
        }
        if !(self.label_noise >= 0.0) || !(self.label_scale >= 0.0) || !(self.loading_scale > 0.0) {
            return Err(Error::contract("label noise, label scale and loading scale must be non-negative"));
        }
        if self.latent_dim == 0 || self.dim_audio == 0 || self.dim_visual == 0 || self.dim_language == 0 {
            return Err(Error::contract("dimensions must be positive"));
        }
        if self.seq_len == Some(0) {
            return Err(Error::contract("sequence length must be at least 1"));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn project(w: &[f64], z: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    let k = z.len();
    w.chunks(k)
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates disjoint train/valid/test splits, reproducible from `spec.seed`.
pub fn gen_synthetic_multimodal(spec: &SyntheticTaskSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let k = spec.latent_dim;
    let load = spec.loading_scale / (k as f64).sqrt();
    let w_a = normal_vec(&mut rng, spec.dim_audio * k, load);
    let w_v = normal_vec(&mut rng, spec.dim_visual * k, load);
    let w_l = normal_vec(&mut rng, spec.dim_language * k, load);
    let mut w_y = normal_vec(&mut rng, k, 1.0);
    let norm = w_y.iter().map(|v| v * v).sum::<f64>().sqrt();
    w_y.iter_mut().for_each(|v| *v *= spec.label_scale / norm);

    let total = spec.n_train + spec.n_valid + spec.n_test;
    let mut samples = Vec::with_capacity(total);
    for _ in 0..total {
        let z = normal_vec(&mut rng, k, 1.0);
        let audio = project(&w_a, &z, spec.noise_audio, &mut rng);
        let visual = project(&w_v, &z, spec.noise_visual, &mut rng);
        let language = match spec.seq_len {
            None => Features::Vector(project(&w_l, &z, spec.noise_language, &mut rng)),
            Some(t) => Features::Sequence(
                (0..t)
                    .map(|_| project(&w_l, &z, spec.noise_language, &mut rng))
                    .collect(),
            ),
        };
        let signal: f64 = w_y.iter().zip(&z).map(|(a, b)| a * b).sum();
        let y = (signal + spec.label_noise * rng.sample::<f64, _>(StandardNormal)).clamp(-3.0, 3.0);
        samples.push(MultimodalSample {
            audio,
            visual,
            language,
            y,
        });
    }
    let test = samples.split_off(spec.n_train + spec.n_valid);
    let valid = samples.split_off(spec.n_train);
    Ok(Splits {
        train: Dataset { samples },
        valid: Dataset { samples: valid },
        test: Dataset { samples: test },
    })
}

fn push_float(out: &mut String, v: f64) {
    // 17 significant digits round-trip every finite f64
    write!(out, "{v:.16e}").expect("writing to a String");
}

fn push_array(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_float(out, *v);
    }
    out.push(']');
}

/// One JSON object per line with keys `a`, `v`, `l`, `y`.
pub fn write_dataset<W: Write>(mut w: W, samples: &[MultimodalSample]) -> Result<()> {
    let mut line = String::new();
    for s in samples {
        line.clear();
        line.push_str("{\"a\":");
        push_array(&mut line, &s.audio);
        line.push_str(",\"v\":");
        push_array(&mut line, &s.visual);
        line.push_str(",\"l\":");
        match &s.language {
            Features::Vector(v) => push_array(&mut line, v),
            Features::Sequence(steps) => {
                line.push('[');
                for (i, step) in steps.iter().enumerate() {
                    if i > 0 {
                        line.push(',');
                    }
                    push_array(&mut line, step);
                }
                line.push(']');
            }
        }
        line.push_str(",\"y\":");
        push_float(&mut line, s.y);
        line.push_str("}\n");
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, samples: &[MultimodalSample]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(f), samples)
}

/// Parses JSON lines; blank lines are skipped. Every sample must share the
/// first sample's layout.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut samples: Vec<MultimodalSample> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: MultimodalSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: number,
            detail: e.to_string(),
        })?;
        sample.validate().map_err(|detail| Error::Schema { line: number, detail })?;
        if let Some(first) = samples.first() {
            if first.layout() != sample.layout() {
                return Err(Error::Schema {
                    line: number,
                    detail: format!(
                        "layout {:?} differs from the first sample's {:?}",
                        sample.layout(),
                        first.layout()
                    ),
                });
            }
        }
        samples.push(sample);
    }
    Ok(Dataset { samples })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}
