//! Residual-quantized autoencoder.
//!
//! An MLP encoder maps a POI feature vector to `z_e`; `L` codebooks quantize
//! successive residuals; an MLP decoder reconstructs the input from the sum
//! of the selected codewords. The tuple of selected indices is the POI's
//! base semantic ID.

mod kmeans;

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{adam_step, glorot_uniform, sq_dist_rows, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};

pub use kmeans::{kmeans, nearest};

/// Which vectors the compactness term measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompactnessOperand {
    /// Layer-input residuals assigned to each codeword in the batch.
    /// Pulling residuals together shrinks the encoder output until most
    /// codewords go unused.
    Assigned,
    /// The codebook rows of each layer.
    #[default]
    Codewords,
}

impl fmt::Display for CompactnessOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompactnessOperand::Assigned => "assigned",
            CompactnessOperand::Codewords => "codewords",
        })
    }
}

impl FromStr for CompactnessOperand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assigned" => Ok(CompactnessOperand::Assigned),
            "codewords" => Ok(CompactnessOperand::Codewords),
            _ => Err(Error::Config(format!(
                "compactness must be `assigned` or `codewords`, got `{s}`"
            ))),
        }
    }
}

/// How the utilization term contributes gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UtilizeGradient {
    /// Hard counts only; the term is a constant.
    None,
    /// Value from hard counts, gradient from soft assignment counts.
    #[default]
    Soft,
}

impl fmt::Display for UtilizeGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UtilizeGradient::None => "none",
            UtilizeGradient::Soft => "soft",
        })
    }
}

impl FromStr for UtilizeGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(UtilizeGradient::None),
            "soft" => Ok(UtilizeGradient::Soft),
            _ => Err(Error::Config(format!(
                "utilize_gradient must be `none` or `soft`, got `{s}`"
            ))),
        }
    }
}

/// Gradient of the compactness term over assigned residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompactnessGradient {
    /// Plain gradient of the pairwise distances.
    Raw,
    /// Gradient of within-codeword spread relative to total batch spread,
    /// rescaled by the (frozen) total. The value is unchanged; shrinking
    /// every residual uniformly no longer lowers the loss.
    #[default]
    ScaleFree,
}

impl fmt::Display for CompactnessGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompactnessGradient::Raw => "raw",
            CompactnessGradient::ScaleFree => "scale_free",
        })
    }
}

impl FromStr for CompactnessGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(CompactnessGradient::Raw),
            "scale_free" => Ok(CompactnessGradient::ScaleFree),
            _ => Err(Error::Config(format!(
                "compactness_gradient must be `raw` or `scale_free`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqvaeConfig {
    pub num_layers: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub commitment_beta: f64,
    pub quant_weight: f64,
    pub diversity_weight: f64,
    pub batch_size: usize,
    /// Upper bound on training epochs.
    pub epochs: usize,
    /// Epochs without reconstruction improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub compactness: CompactnessOperand,
    pub compactness_gradient: CompactnessGradient,
    pub utilize_gradient: UtilizeGradient,
    /// Soft-assignment temperature relative to the batch's mean squared
    /// distance from residuals to codewords.
    pub utilize_temperature: f64,
}

impl Default for RqvaeConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            codebook_size: 32,
            code_dim: 64,
            encoder_hidden: vec![512, 128],
            commitment_beta: 0.25,
            quant_weight: 1.0,
            diversity_weight: 0.25,
            batch_size: 256,
            epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            seed: 0,
            kmeans_iters: 10,
            compactness: CompactnessOperand::Codewords,
            compactness_gradient: CompactnessGradient::ScaleFree,
            utilize_gradient: UtilizeGradient::Soft,
            utilize_temperature: 0.02,
        }
    }
}

impl RqvaeConfig {
    pub const KEYS: [&'static str; 17] = [
        "num_layers",
        "codebook_size",
        "code_dim",
        "encoder_hidden",
        "commitment_beta",
        "quant_weight",
        "diversity_weight",
        "batch_size",
        "epochs",
        "patience",
        "learning_rate",
        "seed",
        "kmeans_iters",
        "compactness",
        "compactness_gradient",
        "utilize_gradient",
        "utilize_temperature",
    ];

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_layers < 1 {
            out.push("rqvae.num_layers must be at least 1".to_string());
        }
        if self.num_layers > 25 {
            out.push("rqvae.num_layers must be at most 25 (one letter per layer plus the suffix)".to_string());
        }
        if self.codebook_size < 2 {
            out.push("rqvae.codebook_size must be at least 2".to_string());
        }
        if self.code_dim < 1 {
            out.push("rqvae.code_dim must be at least 1".to_string());
        }
        if self.encoder_hidden.contains(&0) {
            out.push("rqvae.encoder_hidden widths must be positive".to_string());
        }
        for (name, v) in [
            ("quant_weight", self.quant_weight),
            ("diversity_weight", self.diversity_weight),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("rqvae.{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.commitment_beta >= 0.0 && self.commitment_beta.is_finite()) {
            out.push(format!(
                "rqvae.commitment_beta must be a non-negative number, got {}",
                self.commitment_beta
            ));
        }
        if self.batch_size < 1 {
            out.push("rqvae.batch_size must be at least 1".to_string());
        }
        if !(self.utilize_temperature > 0.0 && self.utilize_temperature.is_finite()) {
            out.push(format!(
                "rqvae.utilize_temperature must be positive, got {}",
                self.utilize_temperature
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("rqvae.learning_rate must be positive, got {}", self.learning_rate));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("rqvae.{key}: cannot parse `{value}`")))
        }
        match key {
            "num_layers" => self.num_layers = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "code_dim" => self.code_dim = num(key, value)?,
            "encoder_hidden" => {
                self.encoder_hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "commitment_beta" => self.commitment_beta = num(key, value)?,
            "quant_weight" => self.quant_weight = num(key, value)?,
            "diversity_weight" => self.diversity_weight = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "kmeans_iters" => self.kmeans_iters = num(key, value)?,
            "compactness" => self.compactness = value.trim().parse()?,
            "compactness_gradient" => self.compactness_gradient = value.trim().parse()?,
            "utilize_gradient" => self.utilize_gradient = value.trim().parse()?,
            "utilize_temperature" => self.utilize_temperature = num(key, value)?,
            _ => {
                return Err(Error::Unknown {
                    kind: "rqvae key",
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`RqvaeConfig::KEYS`] order; `set` accepts
    /// every value back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hidden: Vec<String> = self.encoder_hidden.iter().map(|h| h.to_string()).collect();
        vec![
            ("num_layers", self.num_layers.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("encoder_hidden", hidden.join(",")),
            ("commitment_beta", format!("{:?}", self.commitment_beta)),
            ("quant_weight", format!("{:?}", self.quant_weight)),
            ("diversity_weight", format!("{:?}", self.diversity_weight)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("seed", self.seed.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("compactness", self.compactness.to_string()),
            ("compactness_gradient", self.compactness_gradient.to_string()),
            ("utilize_gradient", self.utilize_gradient.to_string()),
            ("utilize_temperature", format!("{:?}", self.utilize_temperature)),
        ]
    }
}

/// One layer's codewords, `K x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub layer: usize,
    pub vectors: Tensor,
}

/// Output of greedy residual quantization over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    /// `indices[l][i]`: codeword chosen at layer `l` for row `i`.
    pub indices: Vec<Vec<usize>>,
    /// Layer inputs `r^(0)..r^(L-1)`; `r^(0) = z_e`.
    pub residuals: Vec<Tensor>,
    /// Sum of the selected codewords.
    pub quantized: Tensor,
    /// `r^(L)`.
    pub final_residual: Tensor,
}

impl QuantizationResult {
    /// Per-row index tuples.
    pub fn tuples(&self) -> Vec<Vec<usize>> {
        let n = self.indices.first().map_or(0, Vec::len);
        (0..n).map(|i| self.indices.iter().map(|l| l[i]).collect()).collect()
    }
}

/// Greedy layer-by-layer nearest-codeword quantization.
pub fn quantize(z_e: &Tensor, codebooks: &[Tensor]) -> Result<QuantizationResult> {
    let mut residual = z_e.clone();
    let mut quantized = Tensor::zeros(z_e.rows(), z_e.cols());
    let mut indices = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        if cb.cols() != z_e.cols() {
            return Err(Error::Shape {
                op: "quantize",
                left: z_e.shape(),
                right: cb.shape(),
            });
        }
        let idx = nearest(&residual, cb);
        let chosen = cb.select_rows(&idx);
        quantized.add_assign(&chosen)?;
        let next = residual.sub(&chosen)?;
        residuals.push(std::mem::replace(&mut residual, next));
        indices.push(idx);
    }
    Ok(QuantizationResult {
        indices,
        residuals,
        quantized,
        final_residual: residual,
    })
}

/// `(1/N) Σ_i ‖p_i − p̂_i‖²`.
pub fn loss_recon(p: &Tensor, p_hat: &Tensor) -> Result<f64> {
    p.same_shape(p_hat, "loss_recon")?;
    Ok(row_sq_mean(&p.sub(p_hat)?))
}

/// Value of the quantization loss. Both terms compare the same vectors, so
/// the value is `(1 + β) Σ_l (1/N) Σ_i ‖r_i^(l) − e_{k_i}^(l)‖²`; the stop
/// gradients only matter for how gradients are routed.
pub fn loss_quant(result: &QuantizationResult, codebooks: &[Tensor], beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for ((r, idx), cb) in result.residuals.iter().zip(&result.indices).zip(codebooks) {
        let diff = r.sub(&cb.select_rows(idx))?;
        total += (1.0 + beta) * row_sq_mean(&diff);
    }
    Ok(total)
}

/// `(1/N) Σ_k |count_k − N/K|` over one layer's assignments.
pub fn loss_utilize(indices: &[usize], k: usize) -> f64 {
    let n = indices.len();
    if n == 0 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i] += 1;
    }
    let fair = n as f64 / k as f64;
    counts.iter().map(|&c| (c as f64 - fair).abs()).sum::<f64>() / n as f64
}

/// Sum over codewords of the mean pairwise squared distance among the
/// vectors assigned to it; codewords with fewer than two vectors add 0.
pub fn loss_compactness(vectors: &Tensor, indices: &[usize], k: usize) -> f64 {
    let groups = groups_of(indices, k);
    groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| {
            let mean = mean_of(vectors, g);
            let spread: f64 = g
                .iter()
                .map(|&i| vectors.row(i).iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
                .sum();
            2.0 * spread / (g.len() as f64 - 1.0)
        })
        .sum()
}

/// Diversity loss summed over layers.
pub fn loss_diversity(
    result: &QuantizationResult,
    codebooks: &[Tensor],
    operand: CompactnessOperand,
) -> f64 {
    let mut total = 0.0;
    for ((idx, r), cb) in result.indices.iter().zip(&result.residuals).zip(codebooks) {
        let k = cb.rows();
        total += loss_utilize(idx, k);
        total += match operand {
            CompactnessOperand::Assigned => loss_compactness(r, idx, k),
            CompactnessOperand::Codewords => {
                let all: Vec<usize> = vec![0; k];
                loss_compactness(cb, &all, 1)
            }
        };
    }
    total
}

fn row_sq_mean(t: &Tensor) -> f64 {
    if t.rows() == 0 {
        return 0.0;
    }
    t.data().iter().map(|v| v * v).sum::<f64>() / t.rows() as f64
}

fn groups_of(indices: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &c) in indices.iter().enumerate() {
        groups[c].push(i);
    }
    groups
}

fn mean_of(t: &Tensor, rows: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; t.cols()];
    for &i in rows {
        for (m, &v) in mean.iter_mut().zip(t.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Scalar nodes of one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub total: Var,
    pub recon: Var,
    pub quant: Var,
    pub diversity: Var,
    pub assignments: Vec<Vec<usize>>,
}

/// Encoder, codebooks and decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RqvaeModel {
    config: RqvaeConfig,
    input_dim: usize,
    store: ParamStore,
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    codebooks: Vec<ParamId>,
}

impl RqvaeModel {
    /// Fresh model with Glorot-initialized layers and zero codebooks.
    pub fn new(input_dim: usize, config: RqvaeConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("feature width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut widths = vec![input_dim];
        widths.extend(&config.encoder_hidden);
        widths.push(config.code_dim);
        let mut dense = |store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize| Dense {
            w: store.add(format!("{name}.w"), glorot_uniform(&mut rng, fan_in, fan_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)),
        };
        let encoder: Vec<Dense> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense(&mut store, format!("encoder.{i}"), w[0], w[1]))
            .collect();
        let decoder: Vec<Dense> = widths
            .iter()
            .rev()
            .collect::<Vec<_>>()
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense(&mut store, format!("decoder.{i}"), *w[0], *w[1]))
            .collect();
        let codebooks = (0..config.num_layers)
            .map(|l| store.add(format!("codebook.{l}"), Tensor::zeros(config.codebook_size, config.code_dim)))
            .collect();
        Ok(Self {
            config,
            input_dim,
            store,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn config(&self) -> &RqvaeConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn codebook_tensors(&self) -> Vec<Tensor> {
        self.codebooks.iter().map(|&id| self.store.value(id).clone()).collect()
    }

    pub fn codebooks(&self) -> Vec<Codebook> {
        self.codebooks
            .iter()
            .enumerate()
            .map(|(layer, &id)| Codebook {
                layer,
                vectors: self.store.value(id).clone(),
            })
            .collect()
    }

    pub fn set_codebook(&mut self, layer: usize, vectors: Tensor) -> Result<()> {
        let id = *self
            .codebooks
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("no codebook layer {layer}")))?;
        if !vectors.is_finite() {
            return Err(Error::NonFinite("set_codebook"));
        }
        self.store.set_value(id, vectors)
    }

    fn check_width(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape {
                op,
                left: x.shape(),
                right: (x.rows(), self.input_dim),
            });
        }
        Ok(())
    }

    fn mlp(&self, layers: &[Dense], x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, d) in layers.iter().enumerate() {
            let mut y = h.matmul(self.store.value(d.w))?;
            let b = self.store.value(d.b);
            for r in 0..y.rows() {
                for (o, &bias) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bias;
                }
            }
            if i + 1 < layers.len() {
                y = y.map(|v| v.max(0.0));
            }
            h = y;
        }
        Ok(h)
    }

    /// Rows of `x` (`N x input_dim`) to `z_e` (`N x d`).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x, "encode")?;
        self.mlp(&self.encoder, x)
    }

    pub fn quantize(&self, z_e: &Tensor) -> Result<QuantizationResult> {
        quantize(z_e, &self.codebook_tensors())
    }

    /// Rows of `ẑ_e` (`N x d`) to reconstructions (`N x input_dim`).
    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        if z_q.cols() != self.config.code_dim {
            return Err(Error::Shape {
                op: "decode",
                left: z_q.shape(),
                right: (z_q.rows(), self.config.code_dim),
            });
        }
        self.mlp(&self.decoder, z_q)
    }

    /// Index tuple for every row of `x`.
    pub fn infer_indices(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        Ok(self.quantize(&self.encode(x)?)?.tuples())
    }

    /// Loss components from plain forward arithmetic.
    pub fn evaluate(&self, x: &Tensor) -> Result<LossBreakdown> {
        let z = self.encode(x)?;
        let q = self.quantize(&z)?;
        let p_hat = self.decode(&q.quantized)?;
        let cbs = self.codebook_tensors();
        let recon = loss_recon(x, &p_hat)?;
        let quant = loss_quant(&q, &cbs, self.config.commitment_beta)?;
        let diversity = loss_diversity(&q, &cbs, self.config.compactness);
        Ok(LossBreakdown {
            recon,
            quant,
            diversity,
            total: recon + self.config.quant_weight * quant + self.config.diversity_weight * diversity,
        })
    }

    /// Records the total loss on `tape`.
    ///
    /// With `frozen` set, codeword choices are taken from it instead of the
    /// nearest-neighbour search; together with a replaying tape this turns
    /// the loss into a smooth function of the parameters for gradient checks.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, frozen: Option<&[Vec<usize>]>) -> Result<ForwardPass> {
        self.check_width(x, "forward")?;
        let cfg = &self.config;
        let input = tape.constant(x.clone())?;
        let z_e = self.tape_mlp(tape, &self.encoder, input)?;

        let mut r = z_e;
        let mut z_q: Option<Var> = None;
        let mut quant_terms = Vec::new();
        let mut div_terms = Vec::new();
        let mut assignments = Vec::with_capacity(cfg.num_layers);
        for (l, &cb_id) in self.codebooks.iter().enumerate() {
            let cb = tape.param(&self.store, cb_id);
            let idx = match frozen {
                Some(a) => a
                    .get(l)
                    .filter(|a| a.len() == x.rows())
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("frozen assignments missing for layer {l}")))?,
                None => nearest(tape.value(r), tape.value(cb)),
            };
            let e = tape.gather_rows(cb, &idx)?;
            let r_sg = tape.stop_gradient(r)?;
            let e_sg = tape.stop_gradient(e)?;
            let codebook_term = tape.sub(r_sg, e)?;
            let codebook_term = tape.row_sq_norm_mean(codebook_term)?;
            let commit_term = tape.sub(r, e_sg)?;
            let commit_term = tape.row_sq_norm_mean(commit_term)?;
            quant_terms.push((codebook_term, 1.0));
            quant_terms.push((commit_term, cfg.commitment_beta));

            let utilize = self.tape_utilize(tape, r, cb, r_sg, &idx)?;
            let compact = match cfg.compactness {
                CompactnessOperand::Assigned => self.tape_compactness(tape, r, &idx)?,
                CompactnessOperand::Codewords => {
                    tape.group_pairwise_sq(cb, vec![(0..cfg.codebook_size).collect()])?
                }
            };
            div_terms.push((utilize, 1.0));
            div_terms.push((compact, 1.0));

            z_q = Some(match z_q {
                None => e,
                Some(acc) => tape.add(acc, e)?,
            });
            r = tape.sub(r, e_sg)?;
            assignments.push(idx);
        }
        let z_q = z_q.expect("at least one layer");
        let z_st = tape.straight_through(z_e, z_q)?;
        let p_hat = self.tape_mlp(tape, &self.decoder, z_st)?;
        let diff = tape.sub(p_hat, input)?;
        let recon = tape.row_sq_norm_mean(diff)?;
        let quant = tape.weighted_sum(&quant_terms)?;
        let diversity = tape.weighted_sum(&div_terms)?;
        let total = tape.weighted_sum(&[
            (recon, 1.0),
            (quant, cfg.quant_weight),
            (diversity, cfg.diversity_weight),
        ])?;
        Ok(ForwardPass {
            total,
            recon,
            quant,
            diversity,
            assignments,
        })
    }

    fn tape_compactness(&self, tape: &mut Tape, r: Var, idx: &[usize]) -> Result<Var> {
        let within = tape.group_pairwise_sq(r, groups_of(idx, self.config.codebook_size))?;
        if self.config.compactness_gradient == CompactnessGradient::Raw {
            return Ok(within);
        }
        // within_sg + T_sg (q − sg(q)) with q = within / T.
        let total = tape.group_pairwise_sq(r, vec![(0..idx.len()).collect()])?;
        let total_sg = tape.stop_gradient(total)?;
        let within_sg = tape.stop_gradient(within)?;
        let t = tape.value(total_sg).item();
        if t <= 0.0 {
            return Ok(within_sg);
        }
        let q = tape.ratio(within, total)?;
        let q_sg = tape.stop_gradient(q)?;
        let delta = tape.sub(q, q_sg)?;
        let delta = tape.scale(delta, t)?;
        tape.add(within_sg, delta)
    }

    /// Hard-count utilization value. With soft gradients it is
    /// `hard + S − sg(S)`, where `S` weights each codeword's soft count by
    /// the sign of its hard-count excess, so the value is unchanged while
    /// gradients move rows away from over-used codewords.
    fn tape_utilize(&self, tape: &mut Tape, r: Var, cb: Var, frozen: Var, idx: &[usize]) -> Result<Var> {
        let k = self.config.codebook_size;
        let hard = tape.constant(Tensor::scalar(loss_utilize(idx, k)))?;
        if self.config.utilize_gradient == UtilizeGradient::None || idx.is_empty() {
            return Ok(hard);
        }
        let n = idx.len() as f64;
        let mut counts = vec![0usize; k];
        for &i in idx {
            counts[i] += 1;
        }
        let weights: Vec<f64> = counts
            .iter()
            .map(|&c| {
                let excess = c as f64 - n / k as f64;
                if excess == 0.0 {
                    0.0
                } else {
                    excess.signum() / n
                }
            })
            .collect();
        // Temperature from stop-gradient values so that it stays fixed
        // under replay.
        let cb_sg = tape.stop_gradient(cb)?;
        let d = sq_dist_rows(tape.value(frozen), tape.value(cb_sg))?;
        let scale = d.sum() / d.len().max(1) as f64;
        let tau = self.config.utilize_temperature * scale.max(1e-12);
        let soft = tape.soft_count_dot(r, cb, &weights, tau)?;
        let soft_sg = tape.stop_gradient(soft)?;
        let lifted = tape.add(hard, soft)?;
        tape.sub(lifted, soft_sg)
    }

    fn tape_mlp(&self, tape: &mut Tape, layers: &[Dense], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, d) in layers.iter().enumerate() {
            let w = tape.param(&self.store, d.w);
            let b = tape.param(&self.store, d.b);
            h = tape.affine(h, w, b)?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Initializes codebooks layer by layer with k-means over the residuals
    /// of `batch` left by the layers already initialized.
    pub fn kmeans_init(&mut self, batch: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut residual = self.encode(batch)?;
        for l in 0..self.config.num_layers {
            let centroids = kmeans(&residual, self.config.codebook_size, self.config.kmeans_iters, rng);
            let idx = nearest(&residual, &centroids);
            residual = residual.sub(&centroids.select_rows(&idx))?;
            self.set_codebook(l, centroids)?;
        }
        Ok(())
    }

    /// Config echo, input width, then every parameter tensor.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        writeln!(w, "input_dim = {}", self.input_dim)?;
        for (k, v) in self.config.entries() {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w)?;
        self.store.write_checkpoint(w)
    }

    pub fn read_checkpoint(mut r: impl BufRead) -> Result<Self> {
        let mut line = String::new();
        let read_line = |r: &mut dyn BufRead, line: &mut String| -> Result<()> {
            line.clear();
            r.read_line(line).map_err(|e| Error::Parse(e.to_string()))?;
            Ok(())
        };
        read_line(&mut r, &mut line)?;
        if line.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Parse(format!("not an rqvae checkpoint: `{}`", line.trim_end())));
        }
        let mut config = RqvaeConfig::default();
        let mut input_dim = None;
        loop {
            read_line(&mut r, &mut line)?;
            let t = line.trim();
            if t.is_empty() {
                break;
            }
            let (k, v) = t
                .split_once(" = ")
                .ok_or_else(|| Error::Parse(format!("bad checkpoint line `{t}`")))?;
            if k == "input_dim" {
                input_dim = Some(v.parse().map_err(|_| Error::Parse(format!("bad input_dim `{v}`")))?);
            } else {
                config.set(k, v)?;
            }
        }
        let input_dim = input_dim.ok_or_else(|| Error::Parse("checkpoint lacks input_dim".into()))?;
        let stored = ParamStore::read_checkpoint(r)?;
        let mut model = RqvaeModel::new(input_dim, config)?;
        if stored.len() != model.store.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, architecture needs {}",
                stored.len(),
                model.store.len()
            )));
        }
        for id in stored.ids() {
            let target = model
                .store
                .find(stored.name(id))
                .ok_or_else(|| Error::Parse(format!("unexpected tensor `{}`", stored.name(id))))?;
            model.store.set_value(target, stored.value(id).clone())?;
        }
        Ok(model)
    }
}

pub const CHECKPOINT_HEADER: &str = "# rqvae checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub quant: f64,
    pub diversity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's mini-batches.
    pub train: LossBreakdown,
    /// Reconstruction loss over the full matrix after the epoch.
    pub eval_recon: f64,
    /// Entropy in bits of codeword usage over all rows, per layer.
    pub utilization_entropy: Vec<f64>,
    /// Rows whose index tuple is shared with another row.
    pub collisions: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub initial: Option<LossBreakdown>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (best full-matrix reconstruction).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub aborted: Option<String>,
}

impl TrainingReport {
    pub fn write_log(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch\trecon\tquant\tdiv\ttotal\teval_recon\tutil_entropy\tcollisions")?;
        for e in &self.epochs {
            let ent: Vec<String> = e.utilization_entropy.iter().map(|h| format!("{h:.4}")).collect();
            writeln!(
                w,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                e.epoch,
                e.train.recon,
                e.train.quant,
                e.train.diversity,
                e.train.total,
                e.eval_recon,
                ent.join(","),
                e.collisions
            )?;
        }
        if let Some(b) = self.best_epoch {
            writeln!(w, "# kept epoch {b}")?;
        }
        if self.stopped_early {
            writeln!(w, "# stopped early")?;
        }
        if let Some(msg) = &self.aborted {
            writeln!(w, "# aborted: {msg}")?;
        }
        Ok(())
    }
}

/// Shannon entropy in bits of the codeword usage histogram.
pub fn utilization_entropy(indices: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i] += 1;
    }
    let n = indices.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Number of rows whose tuple is shared with at least one other row.
pub fn collision_count(tuples: &[Vec<usize>]) -> usize {
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    for t in tuples {
        *counts.entry(t.as_slice()).or_default() += 1;
    }
    counts.values().filter(|&&c| c > 1).sum()
}

/// Trains a model on the rows of `features` (`N x D`).
///
/// Codebooks are k-means initialized from the first mini-batch. Training
/// keeps the parameters with the best full-matrix reconstruction, stops
/// after `patience` epochs without improvement, and on a non-finite loss
/// returns the last good parameters with `aborted` set.
pub fn train(features: &Tensor, config: &RqvaeConfig) -> Result<(RqvaeModel, TrainingReport)> {
    if features.rows() == 0 {
        return Err(Error::Invalid("cannot train on an empty feature matrix".into()));
    }
    let mut model = RqvaeModel::new(features.cols(), config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let n = features.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainingReport::default();

    order.shuffle(&mut rng);
    let first = features.select_rows(&order[..config.batch_size.min(n)]);
    model.kmeans_init(&first, &mut rng)?;
    report.initial = Some(model.evaluate(features)?);

    let mut best = (f64::INFINITY, model.store.clone(), None);
    let mut stale = 0;
    'epochs: for epoch in 0..config.epochs {
        if epoch > 0 {
            order.shuffle(&mut rng);
        }
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = features.select_rows(chunk);
            let mut tape = Tape::new();
            let step = model
                .forward(&mut tape, &batch, None)
                .and_then(|pass| tape.backward(pass.total).map(|g| (pass, g)));
            let (pass, grads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(op)) => {
                    let msg = format!("non-finite value in {op} during epoch {epoch}");
                    warn!("{msg}; keeping last good parameters");
                    report.aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            for (s, v) in sums.iter_mut().zip([pass.recon, pass.quant, pass.diversity, pass.total]) {
                *s += tape.value(v).item();
            }
            batches += 1;
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store)?;
            adam_step(&mut model.store, &adam);
        }
        let b = batches as f64;
        let train = LossBreakdown {
            recon: sums[0] / b,
            quant: sums[1] / b,
            diversity: sums[2] / b,
            total: sums[3] / b,
        };
        let z = model.encode(features)?;
        let q = model.quantize(&z)?;
        let eval_recon = loss_recon(features, &model.decode(&q.quantized)?)?;
        if !eval_recon.is_finite() {
            report.aborted = Some(format!("non-finite reconstruction after epoch {epoch}"));
            break;
        }
        let log = EpochLog {
            epoch,
            train,
            eval_recon,
            utilization_entropy: q
                .indices
                .iter()
                .map(|idx| utilization_entropy(idx, config.codebook_size))
                .collect(),
            collisions: collision_count(&q.tuples()),
        };
        debug!(
            "epoch {epoch}: recon {:.5} quant {:.5} div {:.5} eval {:.5} collisions {}",
            train.recon, train.quant, train.diversity, eval_recon, log.collisions
        );
        report.epochs.push(log);
        if eval_recon < best.0 {
            best = (eval_recon, model.store.clone(), Some(epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if best.2.is_some() {
        model.store = best.1;
        report.best_epoch = best.2;
    }
    info!(
        "trained {} epochs, kept epoch {:?}",
        report.epochs.len(),
        report.best_epoch
    );
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_difference, relative_error};
    use rand::Rng;

    fn small_config() -> RqvaeConfig {
        RqvaeConfig {
            num_layers: 2,
            codebook_size: 4,
            code_dim: 8,
            encoder_hidden: vec![12],
            batch_size: 10,
            epochs: 5,
            seed: 4,
            ..RqvaeConfig::default()
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // Multi-hot rows with at least one active bit, so no pre-activation
    // sits exactly on the ReLU kink at initialization.
    fn binary(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let mut t = Tensor::from_vec(r, c, (0..r * c).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect()).unwrap();
        for i in 0..r {
            let j = rng.random_range(0..c);
            t.set(i, j, 1.0);
        }
        t
    }

    #[test]
    fn config_entries_round_trip() {
        let cfg = RqvaeConfig {
            encoder_hidden: vec![7, 3],
            compactness: CompactnessOperand::Assigned,
            diversity_weight: 0.1,
            ..RqvaeConfig::default()
        };
        let mut back = RqvaeConfig::default();
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        back.codebook_size = 1;
        back.diversity_weight = 2.0;
        assert_eq!(back.problems().len(), 2);
        assert!(back.set("nope", "1").is_err());
    }

    #[test]
    fn exact_codeword_quantizes_to_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer1 = random(&mut rng, 8, 3);
        layer1.row_mut(7).copy_from_slice(&[0.3, -0.2, 0.9]);
        let mut layer2 = random(&mut rng, 4, 3);
        layer2.row_mut(2).fill(0.0);
        let mut layer3 = random(&mut rng, 4, 3);
        layer3.row_mut(1).fill(0.0);
        let z = Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let q = quantize(&z, &[layer1, layer2, layer3]).unwrap();
        assert_eq!(q.tuples(), vec![vec![7, 2, 1]]);
        assert!(q.final_residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantize_matches_brute_force_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cbs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 2, 4)).collect();
        let z = random(&mut rng, 50, 4);
        let q = quantize(&z, &cbs).unwrap();
        for i in 0..50 {
            let mut r = z.row(i).to_vec();
            for (l, cb) in cbs.iter().enumerate() {
                let d: Vec<f64> = (0..2)
                    .map(|k| r.iter().zip(cb.row(k)).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                let k = if d[1] < d[0] { 1 } else { 0 };
                assert_eq!(q.indices[l][i], k);
                r.iter_mut().zip(cb.row(k)).for_each(|(a, b)| *a -= b);
            }
        }
    }

    #[test]
    fn recon_loss_cases() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap();
        assert_eq!(loss_recon(&p, &p).unwrap(), 0.0);
        let q = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(loss_recon(&p, &q).unwrap(), 1.0);
        assert!(loss_recon(&p, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn utilize_closed_forms() {
        assert_eq!(loss_utilize(&[0, 1, 2, 3, 0, 1, 2, 3], 4), 0.0);
        let k = 8;
        let v = loss_utilize(&[5; 64], k);
        assert!((v - 2.0 * (k as f64 - 1.0) / k as f64).abs() < 1e-12);
    }

    #[test]
    fn compactness_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random(&mut rng, 7, 3);
        let idx = [0, 1, 0, 2, 0, 1, 3];
        let mut naive = 0.0;
        for c in 0..4 {
            let members: Vec<usize> = (0..7).filter(|&i| idx[i] == c).collect();
            let k = members.len();
            if k < 2 {
                continue;
            }
            let mut s = 0.0;
            for &i in &members {
                for &j in &members {
                    if i != j {
                        s += v.row(i).iter().zip(v.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    }
                }
            }
            naive += s / (k * (k - 1)) as f64;
        }
        assert!((loss_compactness(&v, &idx, 4) - naive).abs() < 1e-12);
    }

    #[test]
    fn quant_loss_single_example_by_hand() {
        let z = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let cb = Tensor::from_rows(&[vec![0.5, 2.5], vec![-3.0, 0.0]]).unwrap();
        let q = quantize(&z, std::slice::from_ref(&cb)).unwrap();
        // ‖(0.5, -0.5)‖² = 0.5, weighted (1 + 0.25).
        assert!((loss_quant(&q, &[cb], 0.25).unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn step_zero_total_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = binary(&mut rng, 10, 9);
        let mut model = RqvaeModel::new(9, small_config()).unwrap();
        model.kmeans_init(&x, &mut rng).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &x, None).unwrap();
        let e = model.evaluate(&x).unwrap();
        for (var, want) in [
            (pass.recon, e.recon),
            (pass.quant, e.quant),
            (pass.diversity, e.diversity),
            (pass.total, e.total),
        ] {
            assert!((tape.value(var).item() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for compactness in [CompactnessOperand::Codewords, CompactnessOperand::Assigned] {
            for compactness_gradient in [CompactnessGradient::ScaleFree, CompactnessGradient::Raw] {
                for utilize_gradient in [UtilizeGradient::Soft, UtilizeGradient::None] {
                    check_gradients(RqvaeConfig {
                        compactness,
                        compactness_gradient,
                        utilize_gradient,
                        ..small_config()
                    });
                }
            }
        }
    }

    fn check_gradients(config: RqvaeConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = binary(&mut rng, 10, 9);
        let mut model = RqvaeModel::new(9, config).unwrap();
        model.kmeans_init(&x, &mut rng).unwrap();
        // Codewords sit at their cluster means right after k-means, where the
        // codebook gradient vanishes; move them off that point.
        for (l, cb) in model.codebook_tensors().into_iter().enumerate() {
            let jitter = random(&mut rng, cb.rows(), cb.cols()).scale(0.05);
            model.set_codebook(l, cb.add(&jitter).unwrap()).unwrap();
        }
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &x, None).unwrap();
        let grads = tape.backward(pass.total).unwrap();
        let replay = tape.into_stop_gradient_log();
        model.params_mut().zero_grad();
        grads.accumulate_into(model.params_mut()).unwrap();
        let frozen = pass.assignments;
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            let analytic = model.params().grad(id).clone();
            let mut probe = model.clone();
            let numeric = finite_difference(probe.params_mut(), id, 1e-6, |store| {
                let mut m = model.clone();
                *m.params_mut() = store.clone();
                let mut t = Tape::replaying(replay.clone());
                let p = m.forward(&mut t, &x, Some(&frozen))?;
                Ok(t.value(p.total).item())
            })
            .unwrap();
            let err = relative_error(&analytic, &numeric);
            assert!(
                err < 1e-4,
                "{:?} {}: {err} {} {}",
                model.config(),
                model.params().name(id),
                analytic.norm(),
                numeric.norm()
            );
        }
    }

    #[test]
    fn training_reduces_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = binary(&mut rng, 50, 20);
        let cfg = RqvaeConfig {
            num_layers: 2,
            codebook_size: 8,
            code_dim: 8,
            encoder_hidden: vec![32],
            batch_size: 16,
            epochs: 150,
            patience: 150,
            learning_rate: 5e-3,
            ..RqvaeConfig::default()
        };
        let (model, report) = train(&x, &cfg).unwrap();
        let initial = report.initial.unwrap().recon;
        let after = model.evaluate(&x).unwrap().recon;
        assert!(after < 0.5 * initial, "{after} vs {initial}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = binary(&mut rng, 10, 9);
        let (model, _) = train(&x, &small_config()).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        let back = RqvaeModel::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.infer_indices(&x).unwrap(), model.infer_indices(&x).unwrap());
        assert_eq!(back.codebooks(), model.codebooks());
    }

    #[test]
    fn inference_is_batch_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = binary(&mut rng, 20, 9);
        let (model, _) = train(&x, &small_config()).unwrap();
        let all = model.infer_indices(&x).unwrap();
        let rev: Vec<usize> = (0..20).rev().collect();
        let mut back = model.infer_indices(&x.select_rows(&rev)).unwrap();
        back.reverse();
        assert_eq!(all, back);
        assert!(all.iter().flatten().all(|&k| k < 4));
    }

    #[test]
    fn collisions_and_entropy() {
        let t = vec![vec![1, 2], vec![1, 2], vec![0, 0], vec![1, 2], vec![3, 3]];
        assert_eq!(collision_count(&t), 3);
        assert!((utilization_entropy(&[0, 1, 2, 3], 4) - 2.0).abs() < 1e-12);
        assert_eq!(utilization_entropy(&[1, 1, 1], 4), 0.0);
    }
}
