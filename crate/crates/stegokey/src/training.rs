//! The multi-key training objective and the gradient-masked optimizer.
//!
//! Every step evaluates four loss families on one batch:
//!
//! * `emb`: stego vs cover, summed over keys,
//! * `rec`: matched-key recovery vs secret, summed over keys,
//! * `pur`: purified vs clean,
//! * `mki`: mismatched-key recovery vs the *cover* that produced the stego,
//!
//! each the mean squared error over pixels and batch, and combines them as
//! `total = λe·emb + λr·rec + λp·pur + λm·mki`. Gradients flow through the
//! full embed→recover chains; before the update, gradients at mask-zero
//! positions are dropped so the complement region `M̄` never moves.
//!
//! The training loop emits one JSON object per line to its metrics sink:
//! `{"step":0,"loss_emb":..,"loss_rec":..,"loss_pur":..,"loss_mki":..,
//! "total":..,"wall_ms":..}`.

use std::time::Instant;

use ndarray::Array4;
use rayon::prelude::*;

use crate::backbone::{
    plane_batch, BackboneConfig, Capture, Grads, ImagePlane, ModelState, TaskMode,
};
use crate::data_io::pair_for_counter;
use crate::error::{Error, Result};
use crate::keyed_weights::{BinaryMask, KeyRegistry, WeightSet};
use crate::rng::SeedStream;

const LABEL_INIT: u64 = 1;
const LABEL_CLEAN: u64 = 2;
const LABEL_SIGMA: u64 = 3;
const LABEL_NOISE: u64 = 4;
const LABEL_MISMATCH: u64 = 5;
const LABEL_PAIRS: u64 = 6;

/// Loss-term weights; defaults are (1.0, 0.75, 0.25, 0.5).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_emb: f64,
    pub lambda_rec: f64,
    pub lambda_pur: f64,
    pub lambda_mki: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_emb: 1.0,
            lambda_rec: 0.75,
            lambda_pur: 0.25,
            lambda_mki: 0.5,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        let all = [self.lambda_emb, self.lambda_rec, self.lambda_pur, self.lambda_mki];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// How mismatched (i, j) pairs are drawn for the isolation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    /// One random j != i per key per step (cost O(K)).
    SampleOne,
    /// All ordered pairs i != j (cost O(K^2)).
    Exhaustive,
}

/// Training hyperparameters. `keys` is runtime-only: serialized snapshots
/// keep `k` but never the key values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub alpha: f64,
    pub mask_seed: u64,
    #[serde(skip)]
    pub keys: Vec<(u64, u64)>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Per-image noise sigma drawn uniformly from `[lo, hi)` (or exactly
    /// `lo` when `lo == hi`).
    pub noise_sigma: [f64; 2],
    pub mismatch: MismatchPolicy,
    /// Evaluate every N steps (0 = never).
    pub eval_every: u64,
    /// Checkpoint every N steps (0 = final only).
    pub checkpoint_every: u64,
    /// Master seed driving init, batch order, noise, and mismatch draws.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 1,
            alpha: 0.7,
            mask_seed: 0,
            keys: Vec::new(),
            learning_rate: 1e-4,
            batch_size: 4,
            steps: 1000,
            noise_sigma: [0.0, 0.1],
            mismatch: MismatchPolicy::SampleOne,
            eval_every: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let [lo, hi] = self.noise_sigma;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "noise sigma range [{lo}, {hi}) must sit inside [0, 1)"
            )));
        }
        if self.keys.len() != self.k {
            return Err(Error::Config(format!(
                "expected {} key pair(s), got {}",
                self.k,
                self.keys.len()
            )));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<KeyRegistry> {
        KeyRegistry::new(self.keys.clone())
    }
}

/// Per-step record. `total` always reproduces as the weighted term sum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_emb: f64,
    pub loss_rec: f64,
    pub loss_pur: f64,
    pub loss_mki: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub emb: f64,
    pub rec: f64,
    pub pur: f64,
    pub mki: f64,
}

impl LossTerms {
    fn add_assign(&mut self, other: &LossTerms) {
        self.emb += other.emb;
        self.rec += other.rec;
        self.pur += other.pur;
        self.mki += other.mki;
    }
}

/// Weighted total of the four terms.
pub fn loss_total(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.lambda_emb * terms.emb
        + weights.lambda_rec * terms.rec
        + weights.lambda_pur * terms.pur
        + weights.lambda_mki * terms.mki
}

pub(crate) fn mse4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

fn planes_to_batch(images: &[ImagePlane]) -> Array4<f64> {
    let refs: Vec<&ImagePlane> = images.iter().collect();
    plane_batch(&refs)
}

fn check_matched(a: &[ImagePlane], b: &[ImagePlane]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "lists must be nonempty and matched, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.height() != y.height() || x.width() != y.width() {
            return Err(Error::Shape("image sizes differ within a pair".into()));
        }
    }
    Ok(())
}

fn summed_mse_over_keys(a: &[Vec<ImagePlane>], b: &[Vec<ImagePlane>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "per-key lists must be nonempty and matched, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (xa, xb) in a.iter().zip(b) {
        check_matched(xa, xb)?;
        total += mse4(&planes_to_batch(xa), &planes_to_batch(xb));
    }
    Ok(total)
}

/// Embedding loss: sum over keys of MSE(stego_i, cover_i), each term the
/// mean over pixels and batch.
pub fn loss_emb(stegos: &[Vec<ImagePlane>], covers: &[Vec<ImagePlane>]) -> Result<f64> {
    summed_mse_over_keys(stegos, covers)
}

/// Recovery loss: sum over keys of MSE(recovered_i, secret_i).
pub fn loss_rec(recovered: &[Vec<ImagePlane>], secrets: &[Vec<ImagePlane>]) -> Result<f64> {
    summed_mse_over_keys(recovered, secrets)
}

/// Purification loss: MSE(clean, purified).
pub fn loss_pur(clean: &ImagePlane, purified: &ImagePlane) -> Result<f64> {
    check_matched(
        std::slice::from_ref(clean),
        std::slice::from_ref(purified),
    )?;
    Ok(mse4(
        &planes_to_batch(std::slice::from_ref(clean)),
        &planes_to_batch(std::slice::from_ref(purified)),
    ))
}

/// Mismatched-key isolation loss at evaluation granularity: runs
/// `Recover(j)` on `stego_i` for every listed `j != i` and sums the MSE
/// against the cover that produced the stego.
pub fn loss_mki(
    state: &ModelState,
    registry: &KeyRegistry,
    i: usize,
    stego_i: &ImagePlane,
    cover_i: &ImagePlane,
    mismatched: &[usize],
) -> Result<f64> {
    registry.pair(i)?;
    let mut total = 0.0;
    for &j in mismatched {
        if j == i {
            return Err(Error::Parameter(format!(
                "mismatched index list contains the matched key {i}"
            )));
        }
        let rec = crate::backbone::recover_batch(state, registry, j, &[stego_i])?;
        total += loss_pur(cover_i, &rec[0])?;
    }
    Ok(total)
}

/// Adds pixelwise Gaussian noise `N(0, sigma^2)` and clamps to `[0, 1]`.
/// Deterministic in `seed`.
pub fn add_gaussian_noise(clean: &ImagePlane, sigma: f64, seed: u64) -> Result<ImagePlane> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be nonnegative, got {sigma}")));
    }
    let stream = SeedStream::new(seed);
    let mut counter = 0u64;
    let noisy = clean.data().mapv(|v| {
        let g = stream.gaussian(counter);
        counter += 1;
        v + sigma * g
    });
    ImagePlane::from_array(noisy)
}

/// One step's data: clean images plus a (secrets, covers) batch per key.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub cleans: Vec<ImagePlane>,
    pub per_key: Vec<KeyBatch>,
}

#[derive(Debug, Clone)]
pub struct KeyBatch {
    pub secrets: Vec<ImagePlane>,
    pub covers: Vec<ImagePlane>,
}

/// Deterministic batch assembly: embed pairs walk disjoint-half epoch
/// pairings; purify cleans are uniform draws. Everything derives from
/// `(seed, step)`.
pub struct BatchScheduler {
    seed: u64,
    k: usize,
    batch_size: usize,
}

impl BatchScheduler {
    pub fn new(config: &TrainConfig) -> Self {
        BatchScheduler {
            seed: config.seed,
            k: config.k,
            batch_size: config.batch_size,
        }
    }

    pub fn batch_for_step(&self, data: &[ImagePlane], step: u64) -> Result<StepBatch> {
        if data.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 images to form pairs, got {}",
                data.len()
            )));
        }
        let root = SeedStream::new(self.seed);
        let pair_seed = root.substream(LABEL_PAIRS).value(0);
        let clean_stream = root.substream(LABEL_CLEAN).substream(step);

        let cleans = (0..self.batch_size)
            .map(|b| data[clean_stream.bounded(b as u64, data.len() as u64) as usize].clone())
            .collect();

        let per_key = (1..=self.k)
            .map(|i| {
                let mut secrets = Vec::with_capacity(self.batch_size);
                let mut covers = Vec::with_capacity(self.batch_size);
                for b in 0..self.batch_size {
                    let counter = step * (self.k * self.batch_size) as u64
                        + ((i - 1) * self.batch_size + b) as u64;
                    let (si, ci) = pair_for_counter(data.len(), pair_seed, counter);
                    secrets.push(data[si].clone());
                    covers.push(data[ci].clone());
                }
                KeyBatch { secrets, covers }
            })
            .collect();

        Ok(StepBatch { cleans, per_key })
    }
}

/// Raw parameter gradients in manifest order (kernels) plus biases,
/// before mask zeroing. Exposed for gradient audits.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub kernels: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Adam moments; serialized into checkpoints so training resumes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m_kernels: Vec<Vec<f64>>,
    pub v_kernels: Vec<Vec<f64>>,
    pub m_biases: Vec<Vec<f64>>,
    pub v_biases: Vec<Vec<f64>>,
}

impl AdamState {
    fn zeros_like(shared: &WeightSet, biases: &crate::backbone::BiasSet) -> Self {
        let zk = || shared.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let zb = || biases.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            t: 0,
            m_kernels: zk(),
            v_kernels: zk(),
            m_biases: zb(),
            v_biases: zb(),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update_slice(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    mask: Option<&[u8]>,
    lr: f64,
    t: u64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for p in 0..w.len() {
        if let Some(bits) = mask {
            if bits[p] == 0 {
                continue;
            }
        }
        m[p] = ADAM_BETA1 * m[p] + (1.0 - ADAM_BETA1) * g[p];
        v[p] = ADAM_BETA2 * v[p] + (1.0 - ADAM_BETA2) * g[p] * g[p];
        let mhat = m[p] / bc1;
        let vhat = v[p] / bc2;
        w[p] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// A training session: model, registry, optimizer, and step counter.
pub struct Trainer {
    model: ModelState,
    registry: KeyRegistry,
    config: TrainConfig,
    weights: LossWeights,
    adam: AdamState,
    step: u64,
}

impl Trainer {
    /// Fresh session. Shared weights are Glorot-initialized from a stream
    /// derived from `config.seed`; biases start at zero.
    pub fn new(
        backbone: BackboneConfig,
        config: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let registry = config.registry()?;
        let init_seed = SeedStream::new(config.seed).substream(LABEL_INIT).value(0);
        let model = ModelState::init(backbone, config.alpha, config.mask_seed, init_seed)?;
        let adam = AdamState::zeros_like(model.shared(), model.biases());
        Ok(Trainer { model, registry, config, weights, adam, step: 0 })
    }

    /// Rebuilds a session from explicit parts (checkpoint resume).
    pub fn from_parts(
        model: ModelState,
        config: TrainConfig,
        weights: LossWeights,
        adam: Option<AdamState>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let registry = config.registry()?;
        let adam = adam.unwrap_or_else(|| AdamState::zeros_like(model.shared(), model.biases()));
        Ok(Trainer { model, registry, config, weights, adam, step })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    /// Mismatched key indices for key `i` at `step` under the policy.
    fn mismatches_for(&self, step: u64, i: usize) -> Vec<usize> {
        let k = self.config.k;
        if k == 1 {
            return Vec::new();
        }
        match self.config.mismatch {
            MismatchPolicy::Exhaustive => (1..=k).filter(|&j| j != i).collect(),
            MismatchPolicy::SampleOne => {
                let stream = SeedStream::new(self.config.seed)
                    .substream(LABEL_MISMATCH)
                    .substream(step);
                let mut j = 1 + stream.bounded(i as u64, (k - 1) as u64) as usize;
                if j >= i {
                    j += 1;
                }
                vec![j]
            }
        }
    }

    fn prepared_noisy(&self, batch: &StepBatch, step: u64) -> Result<(Array4<f64>, Array4<f64>)> {
        let root = SeedStream::new(self.config.seed);
        let sigma_stream = root.substream(LABEL_SIGMA).substream(step);
        let noise_stream = root.substream(LABEL_NOISE).substream(step);
        let [lo, hi] = self.config.noise_sigma;
        let mut noisy = Vec::with_capacity(batch.cleans.len());
        for (b, clean) in batch.cleans.iter().enumerate() {
            let sigma = lo + (hi - lo) * sigma_stream.unit_f64(b as u64);
            noisy.push(add_gaussian_noise(clean, sigma, noise_stream.value(b as u64))?);
        }
        Ok((planes_to_batch(&noisy), planes_to_batch(&batch.cleans)))
    }

    /// Loss terms only, at the current weights. Same data path as
    /// [`Trainer::train_step`] for the same `(batch, step)`.
    pub fn losses(&self, batch: &StepBatch, step: u64) -> Result<LossTerms> {
        Ok(self.forward_backward(batch, step, false)?.0)
    }

    /// Loss terms plus raw gradients of the weighted total, before mask
    /// zeroing. The gradient of every parameter the optimizer can touch
    /// (mask-one kernel positions and all biases) is exact.
    pub fn loss_and_gradients(&self, batch: &StepBatch, step: u64) -> Result<(LossTerms, ParamGrads)> {
        let (terms, grads) = self.forward_backward(batch, step, true)?;
        let g = grads.expect("gradients requested");
        Ok((terms, ParamGrads { kernels: g.kernels, biases: g.biases }))
    }

    fn forward_backward(
        &self,
        batch: &StepBatch,
        step: u64,
        want_grads: bool,
    ) -> Result<(LossTerms, Option<Grads>)> {
        if batch.per_key.len() != self.config.k {
            return Err(Error::Shape(format!(
                "batch carries {} key groups, config has k = {}",
                batch.per_key.len(),
                self.config.k
            )));
        }
        let (noisy4, clean4) = self.prepared_noisy(batch, step)?;
        let backbone = self.model.backbone();
        let net = backbone.net();
        let cap = Capture { cache: want_grads, ..Default::default() };

        enum Chain {
            Purify,
            Key(usize),
        }
        let chains: Vec<Chain> = std::iter::once(Chain::Purify)
            .chain((1..=self.config.k).map(Chain::Key))
            .collect();

        let results: Vec<Result<(LossTerms, Option<Grads>)>> = chains
            .par_iter()
            .map(|chain| match chain {
                Chain::Purify => {
                    let x = crate::backbone::cat_arrays(&noisy4, &noisy4);
                    let view = backbone.params_view(self.model.shared(), self.model.biases());
                    let out = net.forward(&view, &x, cap);
                    let l_pur = mse4(&out.y, &clean4);
                    let mut terms = LossTerms::default();
                    terms.pur = l_pur;
                    let grads = if want_grads {
                        let n = out.y.len() as f64;
                        let scale = 2.0 * self.weights.lambda_pur / n;
                        let dy = (&out.y - &clean4).mapv(|v| v * scale);
                        let (g, _) = net.backward(&view, out.cache.as_ref().unwrap(), &dy, false);
                        Some(g)
                    } else {
                        None
                    };
                    Ok((terms, grads))
                }
                Chain::Key(i) => self.key_chain(batch, step, *i, want_grads),
            })
            .collect();

        let mut terms = LossTerms::default();
        let mut grads = want_grads.then(|| Grads::zeros(net));
        for r in results {
            let (t, g) = r?;
            terms.add_assign(&t);
            if let (Some(total), Some(part)) = (grads.as_mut(), g.as_ref()) {
                total.add_assign(part);
            }
        }
        Ok((terms, grads))
    }

    fn key_chain(
        &self,
        batch: &StepBatch,
        step: u64,
        i: usize,
        want_grads: bool,
    ) -> Result<(LossTerms, Option<Grads>)> {
        let backbone = self.model.backbone();
        let net = backbone.net();
        let cap = Capture { cache: want_grads, ..Default::default() };
        let kb = &batch.per_key[i - 1];
        let sec4 = planes_to_batch(&kb.secrets);
        let cov4 = planes_to_batch(&kb.covers);
        let mism = self.mismatches_for(step, i);

        let w_emb = self.model.assembled_for(&self.registry, TaskMode::Embed(i))?;
        let w_rec = self.model.assembled_for(&self.registry, TaskMode::Recover(i))?;

        // embed
        let x_emb = crate::backbone::cat_arrays(&sec4, &cov4);
        let view_emb = backbone.params_view(&w_emb, self.model.biases());
        let out_emb = net.forward(&view_emb, &x_emb, cap);
        let stego4 = &out_emb.y;
        let n = stego4.len() as f64;

        let mut terms = LossTerms::default();
        terms.emb = mse4(stego4, &cov4);

        // matched recovery
        let x_stego = crate::backbone::cat_arrays(stego4, stego4);
        let view_rec = backbone.params_view(&w_rec, self.model.biases());
        let out_rec = net.forward(&view_rec, &x_stego, cap);
        terms.rec = mse4(&out_rec.y, &sec4);

        // mismatched recoveries
        let mut mis_outs = Vec::with_capacity(mism.len());
        for &j in &mism {
            let w_j = self.model.assembled_for(&self.registry, TaskMode::Recover(j))?;
            let view_j = backbone.params_view(&w_j, self.model.biases());
            let out_j = net.forward(&view_j, &x_stego, cap);
            terms.mki += mse4(&out_j.y, &cov4);
            mis_outs.push((w_j, out_j));
        }

        if !want_grads {
            return Ok((terms, None));
        }

        let mut grads = Grads::zeros(net);
        // gradient reaching the stego image: direct embed term plus the
        // chain through every recovery that consumed it
        let mut d_stego = (stego4 - &cov4).mapv(|v| v * 2.0 * self.weights.lambda_emb / n);

        let dy_rec = (&out_rec.y - &sec4).mapv(|v| v * 2.0 * self.weights.lambda_rec / n);
        let (g_rec, dx) = net.backward(&view_rec, out_rec.cache.as_ref().unwrap(), &dy_rec, true);
        grads.add_assign(&g_rec);
        add_dup_adjoint(&mut d_stego, &dx.unwrap());

        for (w_j, out_j) in &mis_outs {
            let view_j = backbone.params_view(w_j, self.model.biases());
            let dy_j = (&out_j.y - &cov4).mapv(|v| v * 2.0 * self.weights.lambda_mki / n);
            let (g_j, dx_j) = net.backward(&view_j, out_j.cache.as_ref().unwrap(), &dy_j, true);
            grads.add_assign(&g_j);
            add_dup_adjoint(&mut d_stego, &dx_j.unwrap());
        }

        let (g_emb, _) = net.backward(&view_emb, out_emb.cache.as_ref().unwrap(), &d_stego, false);
        grads.add_assign(&g_emb);
        Ok((terms, Some(grads)))
    }

    /// One optimization step. Returns the per-term report; the weights at
    /// mask-zero positions are bit-identical before and after.
    pub fn train_step(&mut self, batch: &StepBatch) -> Result<StepReport> {
        let started = Instant::now();
        let step = self.step;
        let (terms, grads) = self.forward_backward(batch, step, true)?;
        let mut grads = grads.expect("training gradients");
        let total = loss_total(&terms, &self.weights);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "emb={} rec={} pur={} mki={}",
                    terms.emb, terms.rec, terms.pur, terms.mki
                ),
            });
        }

        zero_masked_gradients(&mut grads, self.model.mask());

        self.adam.t += 1;
        let t = self.adam.t;
        let lr = self.config.learning_rate;
        let mask_bits: Vec<Vec<u8>> = (0..self.model.mask().manifest().len())
            .map(|i| self.model.mask().tensor_bits(i).to_vec())
            .collect();
        {
            let shared = self.model.shared_mut();
            for (ti, bits) in mask_bits.iter().enumerate() {
                adam_update_slice(
                    shared.tensor_mut(ti),
                    &grads.kernels[ti],
                    &mut self.adam.m_kernels[ti],
                    &mut self.adam.v_kernels[ti],
                    Some(bits),
                    lr,
                    t,
                );
            }
        }
        {
            let biases = self.model.biases_mut();
            for bi in 0..grads.biases.len() {
                adam_update_slice(
                    biases.tensor_mut(bi),
                    &grads.biases[bi],
                    &mut self.adam.m_biases[bi],
                    &mut self.adam.v_biases[bi],
                    None,
                    lr,
                    t,
                );
            }
        }

        self.step += 1;
        Ok(StepReport {
            step,
            loss_emb: terms.emb,
            loss_rec: terms.rec,
            loss_pur: terms.pur,
            loss_mki: terms.mki,
            total,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Drops gradient at every mask-zero kernel position.
fn zero_masked_gradients(grads: &mut Grads, mask: &BinaryMask) {
    for (ti, g) in grads.kernels.iter_mut().enumerate() {
        let bits = mask.tensor_bits(ti);
        for (gv, &bit) in g.iter_mut().zip(bits) {
            if bit == 0 {
                *gv = 0.0;
            }
        }
    }
}

/// Adjoint of duplicating a 3-channel batch into both input slots.
fn add_dup_adjoint(d_img: &mut Array4<f64>, dx6: &Array4<f64>) {
    let c = d_img.dim().1;
    let first = dx6.slice(ndarray::s![.., ..c, .., ..]);
    let second = dx6.slice(ndarray::s![.., c.., .., ..]);
    *d_img += &first;
    *d_img += &second;
}

/// Output sinks for [`train`].
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// JSONL per-step reports.
    pub metrics: Option<&'a mut dyn std::io::Write>,
    /// Directory receiving `step_NNNNNN.skc` and `latest.skc`.
    pub checkpoint_dir: Option<&'a std::path::Path>,
    /// Held-out images for cadenced evaluation.
    pub eval_data: Option<&'a [ImagePlane]>,
    /// JSONL evaluation reports.
    pub eval_reports: Option<&'a mut dyn std::io::Write>,
}

/// Runs the step loop from the trainer's current step to the configured
/// budget, with cadenced evaluation and checkpointing. Resuming from a
/// checkpoint continues the identical trajectory for identical seeds.
pub fn train(
    trainer: &mut Trainer,
    data: &[ImagePlane],
    sinks: &mut TrainSinks,
) -> Result<Option<StepReport>> {
    let scheduler = BatchScheduler::new(trainer.config());
    let steps = trainer.config().steps;
    let eval_every = trainer.config().eval_every;
    let ckpt_every = trainer.config().checkpoint_every;
    let mut last = None;

    while trainer.current_step() < steps {
        let step = trainer.current_step();
        let batch = scheduler.batch_for_step(data, step)?;
        let report = trainer.train_step(&batch)?;
        if let Some(w) = sinks.metrics.as_mut() {
            serde_json::to_writer(&mut *w, &report)
                .map_err(|e| Error::Dataset(format!("metrics log: {e}")))?;
            writeln!(w)?;
        }
        let done = step + 1;
        if eval_every > 0 && done % eval_every == 0 {
            if let Some(eval_data) = sinks.eval_data {
                let report = crate::evaluation::evaluate(
                    trainer.model(),
                    trainer.registry(),
                    eval_data,
                    &crate::evaluation::EvalOptions { pair_seed: trainer.config().seed, step: Some(done) },
                )?;
                if let Some(w) = sinks.eval_reports.as_mut() {
                    serde_json::to_writer(&mut *w, &report)
                        .map_err(|e| Error::Dataset(format!("eval log: {e}")))?;
                    writeln!(w)?;
                }
            }
        }
        if let Some(dir) = sinks.checkpoint_dir {
            if ckpt_every > 0 && done % ckpt_every == 0 {
                let ck = crate::data_io::Checkpoint::from_trainer(trainer);
                crate::data_io::save_checkpoint(&dir.join(format!("step_{done:06}.skc")), &ck)?;
                crate::data_io::save_checkpoint(&dir.join("latest.skc"), &ck)?;
            }
        }
        last = Some(report);
    }
    if let Some(dir) = sinks.checkpoint_dir {
        let ck = crate::data_io::Checkpoint::from_trainer(trainer);
        crate::data_io::save_checkpoint(&dir.join("latest.skc"), &ck)?;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Nonlinearity;

    fn plane_of(v: f64, side: usize) -> ImagePlane {
        ImagePlane::constant(v, side, side)
    }

    fn rand_plane(seed: u64, side: usize) -> ImagePlane {
        let s = SeedStream::new(seed);
        let mut c = 0;
        ImagePlane::from_array(ndarray::Array3::from_shape_simple_fn((3, side, side), || {
            c += 1;
            s.unit_f64(c)
        }))
        .unwrap()
    }

    fn toy_trainer(k: usize, side: usize) -> Trainer {
        let backbone = BackboneConfig {
            base_width: 4,
            depth: 1,
            side,
            nonlinearity: Nonlinearity::LeakyRelu,
            input_slots: 2,
        };
        let config = TrainConfig {
            k,
            alpha: 0.7,
            mask_seed: 3,
            keys: (0..k as u64).map(|i| (1000 + 2 * i, 1001 + 2 * i)).collect(),
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 10,
            noise_sigma: [0.0, 0.05],
            mismatch: MismatchPolicy::SampleOne,
            eval_every: 0,
            checkpoint_every: 0,
            seed: 5,
        };
        Trainer::new(backbone, config, LossWeights::default()).unwrap()
    }

    fn toy_batch(trainer: &Trainer, side: usize) -> StepBatch {
        let b = trainer.config().batch_size;
        StepBatch {
            cleans: (0..b).map(|i| rand_plane(50 + i as u64, side)).collect(),
            per_key: (0..trainer.config().k)
                .map(|ki| KeyBatch {
                    secrets: (0..b).map(|i| rand_plane(100 + (ki * b + i) as u64, side)).collect(),
                    covers: (0..b).map(|i| rand_plane(200 + (ki * b + i) as u64, side)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn noise_sigma_zero_is_identity() {
        let img = rand_plane(1, 8);
        let out = add_gaussian_noise(&img, 0.0, 9).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn noise_matches_requested_sigma() {
        let img = plane_of(0.5, 64);
        let out = add_gaussian_noise(&img, 0.05, 7).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().sum() / n;
        let std = (out
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!((0.045..=0.055).contains(&std), "std {std}");
    }

    #[test]
    fn noise_is_deterministic_and_rejects_negative_sigma() {
        let img = rand_plane(2, 8);
        let a = add_gaussian_noise(&img, 0.1, 42).unwrap();
        let b = add_gaussian_noise(&img, 0.1, 42).unwrap();
        assert_eq!(a, b);
        assert!(add_gaussian_noise(&img, -0.1, 42).is_err());
    }

    #[test]
    fn loss_emb_zero_and_closed_form() {
        let a = vec![vec![plane_of(0.5, 8)]];
        assert_eq!(loss_emb(&a, &a).unwrap(), 0.0);
        let stego = vec![vec![plane_of(0.6, 8)]];
        let cover = vec![vec![plane_of(0.5, 8)]];
        let l = loss_emb(&stego, &cover).unwrap();
        assert!((l - 0.01).abs() < 1e-12, "{l}");
    }

    #[test]
    fn loss_emb_matches_elementwise_oracle_for_two_keys() {
        let stegos = vec![
            vec![rand_plane(1, 8), rand_plane(2, 8)],
            vec![rand_plane(3, 8), rand_plane(4, 8)],
        ];
        let covers = vec![
            vec![rand_plane(5, 8), rand_plane(6, 8)],
            vec![rand_plane(7, 8), rand_plane(8, 8)],
        ];
        let got = loss_emb(&stegos, &covers).unwrap();
        let mut want = 0.0;
        for key in 0..2 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (s, c) in stegos[key].iter().zip(&covers[key]) {
                for (x, y) in s.data().iter().zip(c.data()) {
                    sum += (x - y) * (x - y);
                    count += 1;
                }
            }
            want += sum / count as f64;
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn loss_emb_rejects_mismatched_shapes() {
        let a = vec![vec![plane_of(0.5, 8)]];
        let b = vec![vec![plane_of(0.5, 16)]];
        assert!(loss_emb(&a, &b).is_err());
        let c: Vec<Vec<ImagePlane>> = vec![];
        assert!(loss_emb(&c, &c).is_err());
    }

    #[test]
    fn loss_pur_closed_form() {
        let clean = plane_of(0.3, 8);
        assert_eq!(loss_pur(&clean, &clean).unwrap(), 0.0);
        let off = plane_of(0.5, 8);
        let l = loss_pur(&clean, &off).unwrap();
        assert!((l - 0.04).abs() < 1e-12, "{l}");
        let r = loss_pur(&rand_plane(1, 8), &rand_plane(2, 8)).unwrap();
        let a = rand_plane(1, 8);
        let b = rand_plane(2, 8);
        let mut sum = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            sum += (x - y) * (x - y);
        }
        assert!((r - sum / a.data().len() as f64).abs() < 1e-12);
    }

    #[test]
    fn loss_mki_zero_offset_and_additivity() {
        let trainer = toy_trainer(3, 8);
        let state = trainer.model();
        let reg = trainer.registry();
        let stego = rand_plane(11, 8);
        let cover = rand_plane(12, 8);

        // j == i rejected
        assert!(loss_mki(state, reg, 1, &stego, &cover, &[1]).is_err());

        // additivity: sum of single-j terms equals the two-j call
        let l2 = loss_mki(state, reg, 1, &stego, &cover, &[2]).unwrap();
        let l3 = loss_mki(state, reg, 1, &stego, &cover, &[3]).unwrap();
        let both = loss_mki(state, reg, 1, &stego, &cover, &[2, 3]).unwrap();
        assert!((both - (l2 + l3)).abs() < 1e-12);

        // zero residual: cover equal to the mismatched recovery itself
        let rec = crate::backbone::recover_batch(state, reg, 2, &[&stego]).unwrap();
        let zero = loss_mki(state, reg, 1, &stego, &rec[0], &[2]).unwrap();
        assert!(zero.abs() < 1e-30);
    }

    #[test]
    fn loss_total_paper_defaults() {
        let w = LossWeights::default();
        assert_eq!(loss_total(&LossTerms::default(), &w), 0.0);
        let ones = LossTerms { emb: 1.0, rec: 1.0, pur: 1.0, mki: 1.0 };
        assert!((loss_total(&ones, &w) - 2.5).abs() < 1e-15);
        let t = LossTerms { emb: 0.3, rec: 0.7, pur: 0.11, mki: 0.9 };
        let dot = 1.0 * 0.3 + 0.75 * 0.7 + 0.25 * 0.11 + 0.5 * 0.9;
        assert!((loss_total(&t, &w) - dot).abs() < 1e-15);
    }

    #[test]
    fn step_keeps_masked_positions_fixed_and_moves_shared() {
        let mut trainer = toy_trainer(2, 8);
        let batch = toy_batch(&trainer, 8);
        let before = trainer.model().shared().clone();
        let report = trainer.train_step(&batch).unwrap();
        assert!(report.total.is_finite());
        let after = trainer.model().shared();
        let mask = trainer.model().mask().clone();
        let mut moved = false;
        for t in 0..before.manifest().len() {
            let bits = mask.tensor_bits(t);
            for p in 0..bits.len() {
                let (a, b) = (before.tensor(t)[p], after.tensor(t)[p]);
                if bits[p] == 0 {
                    assert_eq!(a.to_bits(), b.to_bits(), "mask-zero weight moved");
                } else if a != b {
                    moved = true;
                }
            }
        }
        assert!(moved, "no shared weight changed");
    }

    #[test]
    fn report_total_decomposes() {
        let mut trainer = toy_trainer(2, 8);
        let batch = toy_batch(&trainer, 8);
        let r = trainer.train_step(&batch).unwrap();
        let w = trainer.loss_weights();
        let recomposed = w.lambda_emb * r.loss_emb
            + w.lambda_rec * r.loss_rec
            + w.lambda_pur * r.loss_pur
            + w.lambda_mki * r.loss_mki;
        assert!((recomposed - r.total).abs() <= 1e-6 * r.total.abs().max(1e-30));
    }

    #[test]
    fn mismatch_sampler_avoids_identity() {
        let trainer = toy_trainer(3, 8);
        for step in 0..50 {
            for i in 1..=3 {
                for j in trainer.mismatches_for(step, i) {
                    assert_ne!(j, i);
                    assert!((1..=3).contains(&j));
                }
            }
        }
        // exhaustive policy lists everyone else
        let mut t2 = toy_trainer(3, 8);
        t2.config.mismatch = MismatchPolicy::Exhaustive;
        assert_eq!(t2.mismatches_for(0, 2), vec![1, 3]);
    }

    #[test]
    fn scheduler_is_deterministic_and_pairs_are_disjoint() {
        let trainer = toy_trainer(2, 8);
        let data: Vec<ImagePlane> = (0..10).map(|i| rand_plane(i, 8)).collect();
        let sched = BatchScheduler::new(trainer.config());
        let a = sched.batch_for_step(&data, 3).unwrap();
        let b = sched.batch_for_step(&data, 3).unwrap();
        assert_eq!(a.cleans, b.cleans);
        for (ka, kb) in a.per_key.iter().zip(&b.per_key) {
            assert_eq!(ka.secrets, kb.secrets);
            assert_eq!(ka.covers, kb.covers);
            for (s, c) in ka.secrets.iter().zip(&ka.covers) {
                assert_ne!(s, c, "secret and cover must be distinct images");
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let mut c = TrainConfig::default();
        c.keys = vec![(1, 2)];
        assert!(c.validate().is_ok());
        c.noise_sigma = [0.5, 0.2];
        assert!(c.validate().is_err());
        c.noise_sigma = [0.0, 1.0];
        assert!(c.validate().is_err());
        let mut c2 = TrainConfig { k: 0, ..TrainConfig::default() };
        c2.keys = vec![];
        assert!(c2.validate().is_err());
    }
}
