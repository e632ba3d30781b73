//! Contrastive alignment loss between noisy and clean sentence embeddings,
//! with masked-token loss, analytic gradients and a small trainer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("embedding has dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embedding has a non-finite entry".into()));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Maps a token sequence to one embedding per token.
pub trait Encoder {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Vec<Embedding>;
}

/// Hashed lookup table followed by a fixed random projection. Stands in for
/// a transformer so the loss can be exercised end to end.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    hidden: usize,
    projection: Vec<Vec<f64>>,
    seed: u64,
}

impl ToyEncoder {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        assert!(dim > 0 && hidden > 0, "encoder dimensions must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim)
            .map(|_| (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        ToyEncoder {
            hidden,
            projection,
            seed,
        }
    }

    fn lookup(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        (0..self.hidden).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl Encoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.projection.len()
    }

    fn encode(&self, tokens: &[String]) -> Vec<Embedding> {
        tokens
            .iter()
            .map(|t| {
                let x = self.lookup(t);
                Embedding(self.projection.iter().map(|row| dot(row, &x)).collect())
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn mean_pool(tokens: &[Embedding]) -> Result<Embedding> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::Invalid("mean of zero embeddings".into()))?;
    let d = first.dim();
    // Running mean, so k copies of v pool to exactly v.
    let mut mean = vec![0.0; d];
    for (n, e) in tokens.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::Invalid(format!("dimension {} vs {d}", e.dim())));
        }
        for (m, v) in mean.iter_mut().zip(&e.0) {
            *m += (v - *m) / (n + 1) as f64;
        }
    }
    Ok(Embedding(mean))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Invalid(format!("dimension {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `N` clean/noisy pairs stored flat: pair `i` puts its noisy embedding at
/// index `2i` and its clean embedding at `2i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    flat: Vec<Vec<f64>>,
}

impl ContrastiveBatch {
    /// Builds a batch from `(clean, noisy)` pairs.
    pub fn from_pairs(pairs: Vec<(Embedding, Embedding)>) -> Result<Self> {
        let flat = pairs
            .into_iter()
            .flat_map(|(clean, noisy)| [noisy.0, clean.0])
            .collect();
        Self::from_flat(flat)
    }

    pub fn from_flat(flat: Vec<Vec<f64>>) -> Result<Self> {
        if flat.is_empty() || flat.len() % 2 != 0 {
            return Err(Error::Invalid(format!(
                "batch needs a positive even number of embeddings, got {}",
                flat.len()
            )));
        }
        let d = flat[0].len();
        for v in &flat {
            if v.len() != d || d == 0 {
                return Err(Error::Invalid("batch embeddings differ in dimension".into()));
            }
            if norm(v) == 0.0 || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid("batch has a zero or non-finite embedding".into()));
            }
        }
        Ok(ContrastiveBatch { flat })
    }

    pub fn pair_count(&self) -> usize {
        self.flat.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.flat[0].len()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.flat
    }

    pub fn noisy_index(i: usize) -> usize {
        2 * i
    }

    pub fn clean_index(i: usize) -> usize {
        2 * i + 1
    }

    /// Index of the other member of `k`'s pair.
    pub fn partner(k: usize) -> usize {
        k ^ 1
    }

    fn similarities(&self) -> Vec<Vec<f64>> {
        let m = self.flat.len();
        let norms: Vec<f64> = self.flat.iter().map(|v| norm(v)).collect();
        let mut s = vec![vec![0.0; m]; m];
        for i in 0..m {
            for k in i..m {
                let c = (dot(&self.flat[i], &self.flat[k]) / (norms[i] * norms[k])).clamp(-1.0, 1.0);
                s[i][k] = c;
                s[k][i] = c;
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// When false the numerator uses the raw similarity.
    pub apply_tau_to_numerator: bool,
}

pub const DEFAULT_TAU: f64 = 0.1;

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: DEFAULT_TAU,
            apply_tau_to_numerator: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn new(tau: f64) -> Result<Self> {
        let cfg = ContrastiveConfig {
            tau,
            apply_tau_to_numerator: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config {
                field: "tau",
                message: format!("must be a positive real, got {}", self.tau),
            });
        }
        Ok(())
    }

    fn numerator_scale(&self) -> f64 {
        if self.apply_tau_to_numerator {
            1.0 / self.tau
        } else {
            1.0
        }
    }
}

/// `log Σ_{k≠i} exp(row[k] / tau)`, shifted by the maximum for stability.
fn log_sum_exp_excluding(row: &[f64], i: usize, tau: f64) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != i)
        .map(|(_, s)| s / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let terms = row
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != i)
        .map(|(_, s)| (s / tau - max).exp());
    max + sorted_sum(terms).ln()
}

/// Sums in ascending order so the result does not depend on batch order.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn term(sims: &[Vec<f64>], i: usize, j: usize, cfg: &ContrastiveConfig) -> f64 {
    log_sum_exp_excluding(&sims[i], i, cfg.tau) - sims[i][j] * cfg.numerator_scale()
}

/// Loss of pulling embedding `i` towards embedding `j` against every other
/// embedding in the batch.
pub fn nt_xent(i: usize, j: usize, batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    let m = batch.flat.len();
    if i >= m || j >= m || i == j {
        return Err(Error::Invalid(format!("invalid index pair ({i}, {j}) for {m} embeddings")));
    }
    Ok(term(&batch.similarities(), i, j, cfg))
}

/// Both directions of every pair, summed.
pub fn contrastive_loss(batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    let sims = batch.similarities();
    Ok(sorted_sum(
        (0..batch.flat.len()).map(|k| term(&sims, k, ContrastiveBatch::partner(k), cfg)),
    ))
}

/// Gradient of `contrastive_loss` with respect to every embedding entry,
/// laid out like `batch.embeddings()`.
pub fn grad_contrastive(batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let m = batch.flat.len();
    let sims = batch.similarities();
    // d loss / d sim(i, k), before symmetrisation.
    let mut g = vec![vec![0.0; m]; m];
    for i in 0..m {
        let lse = log_sum_exp_excluding(&sims[i], i, cfg.tau);
        for k in 0..m {
            if k != i {
                g[i][k] += ((sims[i][k] / cfg.tau) - lse).exp() / cfg.tau;
            }
        }
        g[i][ContrastiveBatch::partner(i)] -= cfg.numerator_scale();
    }
    let norms: Vec<f64> = batch.flat.iter().map(|v| norm(v)).collect();
    let d = batch.dim();
    let mut grad = vec![vec![0.0; d]; m];
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let w = g[a][b] + g[b][a];
            if w == 0.0 {
                continue;
            }
            // d cos(a, b) / d e_a = e_b / (|a||b|) - cos(a, b) e_a / |a|^2
            let c1 = w / (norms[a] * norms[b]);
            let c2 = w * sims[a][b] / (norms[a] * norms[a]);
            for t in 0..d {
                grad[a][t] += c1 * batch.flat[b][t] - c2 * batch.flat[a][t];
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Masked-token loss

pub const DEFAULT_MASK_PROB: f64 = 0.15;
pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub mask_token: String,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            mask_prob: DEFAULT_MASK_PROB,
            mask_token: DEFAULT_MASK_TOKEN.into(),
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config {
                field: "mask_prob",
                message: format!("must lie in [0, 1], got {}", self.mask_prob),
            });
        }
        Ok(())
    }
}

/// Masks each position independently with `mask_prob`.
pub fn mask_tokens<R: Rng + ?Sized>(tokens: &[String], cfg: &MlmConfig, rng: &mut R) -> (Vec<String>, Vec<usize>) {
    let mut out = tokens.to_vec();
    let mut positions = Vec::new();
    for (i, t) in out.iter_mut().enumerate() {
        if rng.gen_bool(cfg.mask_prob) {
            *t = cfg.mask_token.clone();
            positions.push(i);
        }
    }
    (out, positions)
}

/// Predicts masked tokens. Returns the natural-log probability of `target`
/// at `position` given the masked sequence.
pub trait MlmScorer {
    fn log_prob(&self, masked: &[String], position: usize, target: &str) -> f64;
}

/// Every vocabulary item equally likely.
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl MlmScorer for UniformScorer {
    fn log_prob(&self, _: &[String], _: usize, _: &str) -> f64 {
        -(self.vocab_size as f64).ln()
    }
}

/// Add-one smoothed unigram frequencies; one extra slot covers unseen tokens.
#[derive(Debug, Clone)]
pub struct UnigramScorer {
    counts: HashMap<String, u64>,
    total: u64,
}

impl UnigramScorer {
    pub fn fit<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut counts = HashMap::new();
        let mut total = 0;
        for s in sentences {
            for t in s {
                *counts.entry(t.clone()).or_insert(0) += 1;
                total += 1;
            }
        }
        UnigramScorer { counts, total }
    }
}

impl MlmScorer for UnigramScorer {
    fn log_prob(&self, _: &[String], _: usize, target: &str) -> f64 {
        let c = self.counts.get(target).copied().unwrap_or(0);
        let v = self.counts.len() as u64 + 1;
        ((c + 1) as f64 / (self.total + v) as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedLoss {
    pub total: f64,
    pub contrastive: f64,
    pub mlm_noisy: f64,
    pub mlm_clean: f64,
}

/// Summed cross-entropy over masked positions.
fn mlm_loss<S: MlmScorer + ?Sized, R: Rng + ?Sized>(
    tokens: &[String],
    scorer: &S,
    cfg: &MlmConfig,
    rng: &mut R,
) -> f64 {
    let (masked, positions) = mask_tokens(tokens, cfg, rng);
    positions
        .iter()
        .map(|&p| -scorer.log_prob(&masked, p, &tokens[p]))
        .sum()
}

/// Contrastive loss over mean-pooled encodings plus masked-token loss on
/// each side. Masking draws come from `rng`, noisy sentence first.
pub fn combined_loss<E, S, R>(
    clean: &[Vec<String>],
    noisy: &[Vec<String>],
    encoder: &E,
    scorer: &S,
    cfg_c: &ContrastiveConfig,
    cfg_m: &MlmConfig,
    rng: &mut R,
) -> Result<CombinedLoss>
where
    E: Encoder + ?Sized,
    S: MlmScorer + ?Sized,
    R: Rng + ?Sized,
{
    cfg_c.validate()?;
    cfg_m.validate()?;
    if clean.len() != noisy.len() || clean.is_empty() {
        return Err(Error::Invalid(format!(
            "batches must be non-empty and aligned, got {} clean and {} noisy",
            clean.len(),
            noisy.len()
        )));
    }
    let mut pairs = Vec::with_capacity(clean.len());
    let (mut mlm_noisy, mut mlm_clean) = (0.0, 0.0);
    for (c, n) in clean.iter().zip(noisy) {
        pairs.push((mean_pool(&encoder.encode(c))?, mean_pool(&encoder.encode(n))?));
        mlm_noisy += mlm_loss(n, scorer, cfg_m, rng);
        mlm_clean += mlm_loss(c, scorer, cfg_m, rng);
    }
    let contrastive = contrastive_loss(&ContrastiveBatch::from_pairs(pairs)?, cfg_c)?;
    Ok(CombinedLoss {
        total: contrastive + mlm_noisy + mlm_clean,
        contrastive,
        mlm_noisy,
        mlm_clean,
    })
}

// ---------------------------------------------------------------------------
// Toy trainer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAlignment {
    /// Flat layout, as in `ContrastiveBatch`.
    pub embeddings: Vec<Vec<f64>>,
    /// Loss before the first step and after every step.
    pub loss_trace: Vec<f64>,
    pub final_pos_cos: f64,
    pub final_neg_cos: f64,
}

/// Mean cosine over positive pairs and over all other distinct pairs.
pub fn pair_cosines(batch: &ContrastiveBatch) -> (f64, f64) {
    let sims = batch.similarities();
    let m = sims.len();
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0, 0.0, 0);
    for i in 0..m {
        for k in i + 1..m {
            if k == ContrastiveBatch::partner(i) {
                pos += sims[i][k];
                np += 1;
            } else {
                neg += sims[i][k];
                nn += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(pos, np), mean(neg, nn))
}

/// Plain gradient descent on free, randomly initialised embeddings.
pub fn toy_align<R: Rng + ?Sized>(
    pairs: usize,
    dim: usize,
    cfg: &ContrastiveConfig,
    steps: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<ToyAlignment> {
    if steps == 0 || pairs == 0 || dim == 0 {
        return Err(Error::Invalid("toy_align needs steps, pairs and dim ≥ 1".into()));
    }
    let flat: Vec<Vec<f64>> = (0..2 * pairs)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut batch = ContrastiveBatch::from_flat(flat)?;
    let mut loss_trace = Vec::with_capacity(steps + 1);
    loss_trace.push(contrastive_loss(&batch, cfg)?);
    for _ in 0..steps {
        let grad = grad_contrastive(&batch, cfg)?;
        for (e, g) in batch.flat.iter_mut().zip(&grad) {
            for (x, dx) in e.iter_mut().zip(g) {
                *x -= learning_rate * dx;
            }
        }
        loss_trace.push(contrastive_loss(&batch, cfg)?);
    }
    let (final_pos_cos, final_neg_cos) = pair_cosines(&batch);
    Ok(ToyAlignment {
        embeddings: batch.flat,
        loss_trace,
        final_pos_cos,
        final_neg_cos,
    })
}

/// One row of a batch fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub clean_tokens: Vec<String>,
    pub noisy_tokens: Vec<String>,
}

/// Reads JSONL rows of `{clean_tokens, noisy_tokens}`.
pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<TokenPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TokenPair =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        if row.clean_tokens.is_empty() || row.noisy_tokens.is_empty() {
            return Err(Error::parse(path, idx + 1, "empty token list"));
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const TAU1: ContrastiveConfig = ContrastiveConfig {
        tau: 1.0,
        apply_tau_to_numerator: true,
    };

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ContrastiveBatch {
        ContrastiveBatch::from_flat(
            (0..2 * n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pooling() {
        assert_eq!(mean_pool(&[emb(&[1.0, 2.0]), emb(&[3.0, 4.0])]).unwrap(), emb(&[2.0, 3.0]));
        assert_eq!(mean_pool(&[emb(&[0.3, -7.0])]).unwrap(), emb(&[0.3, -7.0]));
        assert_eq!(mean_pool(&vec![emb(&[0.1, 0.7]); 9]).unwrap(), emb(&[0.1, 0.7]));
        assert!(mean_pool(&[]).is_err());
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn cosine() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_sim(&v, &[0.0; 3]).is_err());
    }

    #[test]
    fn layout() {
        let b = ContrastiveBatch::from_pairs(vec![(emb(&[1.0, 0.0]), emb(&[0.0, 1.0]))]).unwrap();
        assert_eq!(b.embeddings()[ContrastiveBatch::noisy_index(0)], vec![0.0, 1.0]);
        assert_eq!(b.embeddings()[ContrastiveBatch::clean_index(0)], vec![1.0, 0.0]);
        assert!(ContrastiveBatch::from_flat(vec![]).is_err());
        assert!(ContrastiveBatch::from_flat(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn single_pair_is_zero() {
        let b = ContrastiveBatch::from_flat(vec![vec![0.2, 0.9], vec![-1.0, 0.4]]).unwrap();
        assert_eq!(nt_xent(0, 1, &b, &TAU1).unwrap(), 0.0);
        assert_eq!(nt_xent(1, 0, &b, &TAU1).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&b, &TAU1).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_batch() {
        let b = ContrastiveBatch::from_flat((0..4).map(|i| unit(4, i)).collect()).unwrap();
        for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
            assert!((nt_xent(i, j, &b, &TAU1).unwrap() - 3f64.ln()).abs() < 1e-12);
        }
        assert!((contrastive_loss(&b, &TAU1).unwrap() - 4.0 * 3f64.ln()).abs() < 1e-12);
        let g = grad_contrastive(&b, &TAU1).unwrap();
        let norms: Vec<f64> = g.iter().map(|v| norm(v)).collect();
        assert!(norms.iter().all(|n| (n - norms[0]).abs() < 1e-12));
    }

    #[test]
    fn aligned_pair() {
        // Anchor and positive coincide; the other two are orthogonal to them.
        let b = ContrastiveBatch::from_flat(vec![unit(3, 0), unit(3, 0), unit(3, 1), unit(3, 2)]).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((nt_xent(0, 1, &b, &TAU1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn numerator_switch() {
        let b = ContrastiveBatch::from_flat(vec![unit(2, 0), unit(2, 0)]).unwrap();
        let printed = ContrastiveConfig {
            tau: 0.5,
            apply_tau_to_numerator: false,
        };
        // Single term in the denominator: exp(1/0.5); numerator exp(1).
        assert!((nt_xent(0, 1, &b, &printed).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nt_xent(0, 1, &b, &ContrastiveConfig::new(0.5).unwrap()).unwrap(), 0.0);
        assert!(ContrastiveConfig::new(0.0).is_err());
        assert!(nt_xent(0, 0, &b, &TAU1).is_err());
    }

    fn naive_loss(batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> f64 {
        let e = batch.embeddings();
        let m = e.len();
        let mut total = 0.0;
        for i in 0..m {
            let j = if i % 2 == 0 { i + 1 } else { i - 1 };
            let mut denom = 0.0;
            for (k, ek) in e.iter().enumerate() {
                if k != i {
                    denom += (cosine_sim(&e[i], ek).unwrap() / cfg.tau).exp();
                }
            }
            let scale = if cfg.apply_tau_to_numerator { cfg.tau } else { 1.0 };
            let num = (cosine_sim(&e[i], &e[j]).unwrap() / scale).exp();
            total += -(num / denom).ln();
        }
        total
    }

    fn max_relative_deviation(batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> f64 {
        let analytic = grad_contrastive(batch, cfg).unwrap();
        let h = 1e-5;
        let mut worst_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..batch.embeddings().len() {
            for t in 0..batch.dim() {
                let mut plus = batch.embeddings().to_vec();
                let mut minus = plus.clone();
                plus[k][t] += h;
                minus[k][t] -= h;
                let lp = contrastive_loss(&ContrastiveBatch::from_flat(plus).unwrap(), cfg).unwrap();
                let lm = contrastive_loss(&ContrastiveBatch::from_flat(minus).unwrap(), cfg).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                worst_abs = worst_abs.max((fd - analytic[k][t]).abs());
                scale = scale.max(fd.abs());
            }
        }
        worst_abs / scale.max(1e-12)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let b = random_batch(&mut rng, 4, 8);
            let cfg = ContrastiveConfig {
                tau: rng.gen_range(0.1..1.0),
                apply_tau_to_numerator: rng.gen_bool(0.5),
            };
            let dev = max_relative_deviation(&b, &cfg);
            assert!(dev < 1e-4, "relative deviation {dev}");
        }
    }

    #[test]
    fn masking() {
        let tokens: Vec<String> = (0..50).map(|i| format!("t{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = MlmConfig {
            mask_prob: 0.0,
            ..MlmConfig::default()
        };
        assert_eq!(mask_tokens(&tokens, &none, &mut rng), (tokens.clone(), vec![]));
        let all = MlmConfig {
            mask_prob: 1.0,
            ..MlmConfig::default()
        };
        let (masked, pos) = mask_tokens(&tokens, &all, &mut rng);
        assert_eq!(pos, (0..50).collect::<Vec<_>>());
        assert!(masked.iter().all(|t| t == DEFAULT_MASK_TOKEN));
        let cfg = MlmConfig::default();
        let a = mask_tokens(&tokens, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = mask_tokens(&tokens, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(MlmConfig { mask_prob: 1.5, ..cfg }.validate().is_err());
    }

    #[test]
    fn masking_rate() {
        let n = 100_000;
        let tokens = vec!["w".to_string(); n];
        let (_, pos) = mask_tokens(&tokens, &MlmConfig::default(), &mut ChaCha8Rng::seed_from_u64(11));
        let frac = pos.len() as f64 / n as f64;
        assert!((frac - 0.15).abs() < 0.01, "{frac}");
        let sd = (n as f64 * 0.15 * 0.85).sqrt();
        assert!((pos.len() as f64 - 0.15 * n as f64).abs() < 3.0 * sd);
    }

    fn toy_batch() -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        let s = |t: &str| t.split(' ').map(String::from).collect::<Vec<_>>();
        (
            vec![s("show me flights to boston"), s("what is the fare"), s("list all airlines")],
            vec![s("show me fligts to boston"), s("what is teh fare"), s("LIST all airlines")],
        )
    }

    #[test]
    fn combined_uniform_scorer() {
        let (clean, noisy) = toy_batch();
        let enc = ToyEncoder::new(8, 16, 5);
        let v = 1000;
        let cfg_m = MlmConfig {
            mask_prob: 1.0,
            ..MlmConfig::default()
        };
        let r = combined_loss(
            &clean,
            &noisy,
            &enc,
            &UniformScorer { vocab_size: v },
            &ContrastiveConfig::default(),
            &cfg_m,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let ln_v = (v as f64).ln();
        assert!((r.mlm_noisy - 12.0 * ln_v).abs() < 1e-9);
        assert!((r.mlm_clean - 12.0 * ln_v).abs() < 1e-9);
        assert_eq!(r.total, r.contrastive + r.mlm_noisy + r.mlm_clean);
    }

    #[test]
    fn combined_without_masking() {
        let (clean, noisy) = toy_batch();
        let enc = ToyEncoder::new(8, 16, 5);
        let cfg_m = MlmConfig {
            mask_prob: 0.0,
            ..MlmConfig::default()
        };
        let scorer = UnigramScorer::fit(clean.iter().map(Vec::as_slice));
        let r = combined_loss(&clean, &noisy, &enc, &scorer, &TAU1, &cfg_m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((r.mlm_noisy, r.mlm_clean), (0.0, 0.0));
        assert_eq!(r.total, r.contrastive);
        assert!(combined_loss(&clean, &noisy[..2], &enc, &scorer, &TAU1, &cfg_m, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn combined_parts_recomputed() {
        let (clean, noisy) = toy_batch();
        let enc = ToyEncoder::new(8, 16, 5);
        let scorer = UnigramScorer::fit(clean.iter().chain(&noisy).map(Vec::as_slice));
        let cfg_m = MlmConfig {
            mask_prob: 0.4,
            ..MlmConfig::default()
        };
        let r = combined_loss(&clean, &noisy, &enc, &scorer, &TAU1, &cfg_m, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut mn, mut mc) = (0.0, 0.0);
        let mut pairs = Vec::new();
        for (c, n) in clean.iter().zip(&noisy) {
            for (toks, acc) in [(n, &mut mn), (c, &mut mc)] {
                let (masked, pos) = mask_tokens(toks, &cfg_m, &mut rng);
                for p in pos {
                    *acc -= scorer.log_prob(&masked, p, &toks[p]);
                }
            }
            pairs.push((mean_pool(&enc.encode(c)).unwrap(), mean_pool(&enc.encode(n)).unwrap()));
        }
        let con = naive_loss(&ContrastiveBatch::from_pairs(pairs).unwrap(), &TAU1);
        assert!((r.contrastive - con).abs() < 1e-9);
        assert_eq!((r.mlm_noisy, r.mlm_clean), (mn, mc));
        assert!((r.total - (con + mn + mc)).abs() < 1e-9);
        assert!(r.contrastive >= 0.0 && r.mlm_noisy >= 0.0 && r.mlm_clean >= 0.0);
    }

    #[test]
    fn encoder_is_deterministic() {
        let enc = ToyEncoder::new(4, 6, 2);
        let t = vec!["a".to_string(), "b".to_string()];
        assert_eq!(enc.encode(&t), ToyEncoder::new(4, 6, 2).encode(&t));
        assert_ne!(enc.encode(&t)[0], enc.encode(&t)[1]);
        assert_eq!(enc.encode(&t)[0].dim(), 4);
    }

    #[test]
    fn toy_alignment_separates_pairs() {
        let cfg = ContrastiveConfig::default();
        let r = toy_align(8, 16, &cfg, 500, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.final_pos_cos - r.final_neg_cos >= 0.5, "{} {}", r.final_pos_cos, r.final_neg_cos);
        assert_eq!(r.loss_trace.len(), 501);
    }

    #[test]
    fn toy_alignment_descends_over_seeds() {
        let cfg = ContrastiveConfig::default();
        for seed in 0..20 {
            let r = toy_align(8, 16, &cfg, 500, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(r.loss_trace.last() <= r.loss_trace.first(), "seed {seed}");
        }
    }

    #[test]
    fn zero_learning_rate_is_constant() {
        let r = toy_align(3, 4, &TAU1, 10, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.loss_trace.iter().all(|l| *l == r.loss_trace[0]));
        assert!(toy_align(3, 4, &TAU1, 0, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    proptest! {
        #[test]
        fn loss_matches_naive(seed in any::<u64>(), n in 1usize..5, d in 1usize..6, tau in 0.05f64..2.0, flag in any::<bool>()) {
            let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), n, d);
            let cfg = ContrastiveConfig { tau, apply_tau_to_numerator: flag };
            let fast = contrastive_loss(&b, &cfg).unwrap();
            let slow = naive_loss(&b, &cfg);
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1.0));
        }

        #[test]
        fn rescaling_one_embedding(seed in any::<u64>(), n in 1usize..5, c in 0.01f64..100.0, pick in any::<prop::sample::Index>()) {
            let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), n, 6);
            let k = pick.index(2 * n);
            let mut scaled = b.embeddings().to_vec();
            scaled[k].iter_mut().for_each(|x| *x *= c);
            let s = ContrastiveBatch::from_flat(scaled).unwrap();
            for i in 0..2 * n {
                let j = ContrastiveBatch::partner(i);
                prop_assert!((nt_xent(i, j, &b, &TAU1).unwrap() - nt_xent(i, j, &s, &TAU1).unwrap()).abs() < 1e-9);
            }
            let g = grad_contrastive(&b, &ContrastiveConfig::default()).unwrap();
            let along = dot(&g[k], &b.embeddings()[k]) / norm(&b.embeddings()[k]);
            prop_assert!(along.abs() < 1e-8);
        }

        #[test]
        fn pair_order_irrelevant(seed in any::<u64>(), n in 1usize..6, perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), n, 5);
            let mut pairs: Vec<_> = b.embeddings().chunks(2).map(|c| c.to_vec()).collect();
            pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let p = ContrastiveBatch::from_flat(pairs.concat()).unwrap();
            let cfg = ContrastiveConfig::default();
            prop_assert_eq!(contrastive_loss(&b, &cfg).unwrap(), contrastive_loss(&p, &cfg).unwrap());
        }
    }
}
