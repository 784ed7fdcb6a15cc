//! Quality metrics and the leakage-evaluation protocols.
//!
//! Three metric families mirror the quantitative protocol:
//! imperceptibility (cover vs stego), recoverability (secret vs matched
//! recovery), and cross decoding (secret vs mismatched recovery). The
//! cross-key matrix generalizes recoverability to every (encode, decode)
//! key combination; the random-key probe decodes with unregistered keys;
//! the PCA report projects recovery features to two components per
//! (encode, decode) condition.

use ndarray::Array2;

use crate::backbone::{
    embed_batch, extract_recovery_features_batch, purify_batch, recover_batch, ImagePlane,
    ModelState,
};
use crate::data_io::make_pairs;
use crate::error::{Error, Result};
use crate::keyed_weights::KeyRegistry;
use crate::rng::SeedStream;
use crate::training::add_gaussian_noise;

/// PSNR / SSIM / MAE for one image pairing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricTriple {
    /// Peak signal-to-noise ratio in dB against peak 1.0, capped at 100.
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// PSNR cap applied when the MSE drops below 1e-10.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_shapes(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels and pixels, peak 1.0.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean absolute error over all channels and pixels.
pub fn mae(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data().len() as f64)
}

pub(crate) const SSIM_WINDOW: usize = 11;
pub(crate) const SSIM_SIGMA: f64 = 1.5;
pub(crate) const SSIM_K1: f64 = 0.01;
pub(crate) const SSIM_K2: f64 = 0.03;

/// Normalized 11-tap Gaussian window, sigma 1.5.
pub(crate) fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter of one channel.
fn gauss_valid(ch: &ndarray::ArrayView2<f64>) -> Array2<f64> {
    let w = ssim_window();
    let (h, wd) = ch.dim();
    let ow = wd - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * ch[(y, x + k)];
            }
            horiz[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * horiz[(y + k, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1.0, averaged over valid windows and channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let xa = a.data().index_axis(ndarray::Axis(0), ch);
        let xb = b.data().index_axis(ndarray::Axis(0), ch);
        let mu_a = gauss_valid(&xa);
        let mu_b = gauss_valid(&xb);
        let aa = gauss_valid(&(&xa * &xa).view());
        let bb = gauss_valid(&(&xb * &xb).view());
        let ab = gauss_valid(&(&xa * &xb).view());
        let mut sum = 0.0;
        for (idx, ma) in mu_a.indexed_iter() {
            let mb = mu_b[idx];
            let va = aa[idx] - ma * ma;
            let vb = bb[idx] - mb * mb;
            let cov = ab[idx] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// All three metrics for one pairing.
pub fn metric_triple(a: &ImagePlane, b: &ImagePlane) -> Result<MetricTriple> {
    Ok(MetricTriple {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        mae: mae(a, b)?,
    })
}

/// Running mean of metric triples.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct TripleAccumulator {
    psnr: f64,
    ssim: f64,
    mae: f64,
    n: usize,
}

impl TripleAccumulator {
    pub fn push(&mut self, t: MetricTriple) {
        self.psnr += t.psnr;
        self.ssim += t.ssim;
        self.mae += t.mae;
        self.n += 1;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> MetricTriple {
        let n = self.n.max(1) as f64;
        MetricTriple {
            psnr: self.psnr / n,
            ssim: self.ssim / n,
            mae: self.mae / n,
        }
    }
}

/// Per-key metric family means.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct KeyReport {
    pub key_index: usize,
    pub imperceptibility: MetricTriple,
    pub recoverability: MetricTriple,
    pub cross_decoding: MetricTriple,
}

/// The three metric families over an evaluation set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    pub sample_count: usize,
    /// cover vs stego
    pub imperceptibility: MetricTriple,
    /// secret vs matched recovery
    pub recoverability: MetricTriple,
    /// secret vs mismatched recovery, mean over all wrong registered keys
    pub cross_decoding: MetricTriple,
    pub per_key: Vec<KeyReport>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Seed for the secret/cover pairing of the evaluation set.
    pub pair_seed: u64,
    /// Training step this evaluation belongs to, if any.
    pub step: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { pair_seed: 0, step: None }
    }
}

const EVAL_CHUNK: usize = 8;

fn chunked_embed(
    state: &ModelState,
    registry: &KeyRegistry,
    i: usize,
    pairs: &[(&ImagePlane, &ImagePlane)],
) -> Result<Vec<ImagePlane>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        out.extend(embed_batch(state, registry, i, chunk)?);
    }
    Ok(out)
}

fn chunked_recover(
    state: &ModelState,
    registry: &KeyRegistry,
    i: usize,
    stegos: &[&ImagePlane],
) -> Result<Vec<ImagePlane>> {
    let mut out = Vec::with_capacity(stegos.len());
    for chunk in stegos.chunks(EVAL_CHUNK) {
        out.extend(recover_batch(state, registry, i, chunk)?);
    }
    Ok(out)
}

fn eval_pairs(data: &[ImagePlane], seed: u64) -> Result<Vec<(&ImagePlane, &ImagePlane)>> {
    if data.len() < 2 {
        return Err(Error::Dataset(format!(
            "evaluation needs at least 2 images, got {}",
            data.len()
        )));
    }
    Ok(make_pairs(data.len(), seed, 0)
        .into_iter()
        .map(|(s, c)| (&data[s], &data[c]))
        .collect())
}

/// Evaluates all three families over every (pair, key) combination; cross
/// decoding averages over every mismatched registered key.
pub fn evaluate(
    state: &ModelState,
    registry: &KeyRegistry,
    data: &[ImagePlane],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let pairs = eval_pairs(data, opts.pair_seed)?;
    let k = registry.len();
    let mut all_imp = TripleAccumulator::default();
    let mut all_rec = TripleAccumulator::default();
    let mut all_cross = TripleAccumulator::default();
    let mut per_key = Vec::with_capacity(k);

    for i in 1..=k {
        let mut imp = TripleAccumulator::default();
        let mut rec = TripleAccumulator::default();
        let mut cross = TripleAccumulator::default();

        let stegos = chunked_embed(state, registry, i, &pairs)?;
        let stego_refs: Vec<&ImagePlane> = stegos.iter().collect();
        let recovered = chunked_recover(state, registry, i, &stego_refs)?;

        for (p, (secret, cover)) in pairs.iter().enumerate() {
            let t = metric_triple(cover, &stegos[p])?;
            imp.push(t);
            all_imp.push(t);
            let t = metric_triple(secret, &recovered[p])?;
            rec.push(t);
            all_rec.push(t);
        }
        for j in (1..=k).filter(|&j| j != i) {
            let wrong = chunked_recover(state, registry, j, &stego_refs)?;
            for (p, (secret, _)) in pairs.iter().enumerate() {
                let t = metric_triple(secret, &wrong[p])?;
                cross.push(t);
                all_cross.push(t);
            }
        }
        per_key.push(KeyReport {
            key_index: i,
            imperceptibility: imp.mean(),
            recoverability: rec.mean(),
            cross_decoding: if cross.count() > 0 {
                cross.mean()
            } else {
                MetricTriple { psnr: f64::NAN, ssim: f64::NAN, mae: f64::NAN }
            },
        });
    }

    Ok(EvalReport {
        step: opts.step,
        sample_count: all_imp.count(),
        imperceptibility: all_imp.mean(),
        recoverability: all_rec.mean(),
        cross_decoding: if all_cross.count() > 0 {
            all_cross.mean()
        } else {
            MetricTriple { psnr: f64::NAN, ssim: f64::NAN, mae: f64::NAN }
        },
        per_key,
    })
}

/// K x K grid of mean recovery metrics. Rows are the encoding key, columns
/// the decoding key; the diagonal is matched-key recoverability.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrossKeyMatrix {
    pub k: usize,
    /// Row-major cells: `(i, j)` at `(i-1) * k + (j-1)`.
    pub cells: Vec<MetricTriple>,
}

impl CrossKeyMatrix {
    pub fn cell(&self, i: usize, j: usize) -> &MetricTriple {
        &self.cells[(i - 1) * self.k + (j - 1)]
    }

    /// Smallest diagonal PSNR minus largest off-diagonal PSNR; positive
    /// means every matched decode beats every mismatched one.
    pub fn diagonal_margin_db(&self) -> f64 {
        let mut min_diag = f64::INFINITY;
        let mut max_off = f64::NEG_INFINITY;
        for i in 1..=self.k {
            for j in 1..=self.k {
                let v = self.cell(i, j).psnr;
                if i == j {
                    min_diag = min_diag.min(v);
                } else {
                    max_off = max_off.max(v);
                }
            }
        }
        if self.k == 1 {
            f64::INFINITY
        } else {
            min_diag - max_off
        }
    }

    /// True when every row's diagonal PSNR beats all its off-diagonals.
    pub fn diagonal_dominant(&self) -> bool {
        (1..=self.k).all(|i| {
            let d = self.cell(i, i).psnr;
            (1..=self.k).filter(|&j| j != i).all(|j| d > self.cell(i, j).psnr)
        })
    }

    /// PSNR heatmap as CSV (rows = encode key, columns = decode key).
    pub fn psnr_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.k).map(|j| format!("decode_{j}")).collect();
        out.push_str(&format!("encode,{}\n", header.join(",")));
        for i in 1..=self.k {
            let row: Vec<String> = (1..=self.k)
                .map(|j| format!("{:.4}", self.cell(i, j).psnr))
                .collect();
            out.push_str(&format!("{i},{}\n", row.join(",")));
        }
        out
    }
}

/// Fills the full K x K recoverability grid.
pub fn cross_key_matrix(
    state: &ModelState,
    registry: &KeyRegistry,
    data: &[ImagePlane],
    pair_seed: u64,
) -> Result<CrossKeyMatrix> {
    let pairs = eval_pairs(data, pair_seed)?;
    let k = registry.len();
    let mut cells = Vec::with_capacity(k * k);
    for i in 1..=k {
        let stegos = chunked_embed(state, registry, i, &pairs)?;
        let stego_refs: Vec<&ImagePlane> = stegos.iter().collect();
        for j in 1..=k {
            let rec = chunked_recover(state, registry, j, &stego_refs)?;
            let mut acc = TripleAccumulator::default();
            for (p, (secret, _)) in pairs.iter().enumerate() {
                acc.push(metric_triple(secret, &rec[p])?);
            }
            cells.push(acc.mean());
        }
    }
    Ok(CrossKeyMatrix { k, cells })
}

/// One decoded sample kept for the probe image grids.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub stego: ImagePlane,
    pub recovered: ImagePlane,
    pub secret: ImagePlane,
}

/// Leakage under unregistered random keys.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    pub n_random: usize,
    /// Recovery quality against the true secret (low = no leakage).
    pub vs_secret: MetricTriple,
    /// Recovery agreement with the cover image.
    pub vs_cover: MetricTriple,
    /// Worst-case structural similarity to any secret.
    pub max_ssim_vs_secret: f64,
    #[serde(skip)]
    pub samples: Vec<ProbeSample>,
}

/// Decodes stego images with `n_random` keys drawn uniformly over the
/// 64-bit space, excluding every registered value. Stegos are produced
/// with registered keys round-robin over the evaluation pairs.
pub fn random_key_probe(
    state: &ModelState,
    registry: &KeyRegistry,
    data: &[ImagePlane],
    n_random: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if n_random == 0 {
        return Err(Error::Parameter("probe needs at least one random key".into()));
    }
    let pairs = eval_pairs(data, seed)?;
    let k = registry.len();

    // stegos for each pair under its round-robin key
    let mut stegos = Vec::with_capacity(pairs.len());
    for (p, &(secret, cover)) in pairs.iter().enumerate() {
        let i = (p % k) + 1;
        let out = embed_batch(state, registry, i, &[(secret, cover)])?;
        stegos.push(out.into_iter().next().unwrap());
    }

    // unregistered random keys
    let stream = SeedStream::new(seed).substream(0x7072_6f62); // "prob"
    let mut keys = Vec::with_capacity(n_random);
    let mut counter = 0u64;
    while keys.len() < n_random {
        let v = stream.value(counter);
        counter += 1;
        if !registry.contains_value(v) && !keys.contains(&v) {
            keys.push(v);
        }
    }

    let mut vs_secret = TripleAccumulator::default();
    let mut vs_cover = TripleAccumulator::default();
    let mut max_ssim = f64::NEG_INFINITY;
    let mut samples = Vec::new();
    for (ki, &key) in keys.iter().enumerate() {
        for (p, &(secret, cover)) in pairs.iter().enumerate() {
            let rec = crate::backbone::run_with_key(state, key, None, Some(&stegos[p]))?;
            let ts = metric_triple(secret, &rec)?;
            vs_secret.push(ts);
            vs_cover.push(metric_triple(cover, &rec)?);
            max_ssim = max_ssim.max(ts.ssim);
            if ki == 0 && samples.len() < 4 {
                samples.push(ProbeSample {
                    stego: stegos[p].clone(),
                    recovered: rec,
                    secret: secret.clone(),
                });
            }
        }
    }

    Ok(ProbeReport {
        n_random,
        vs_secret: vs_secret.mean(),
        vs_cover: vs_cover.mean(),
        max_ssim_vs_secret: max_ssim,
        samples,
    })
}

/// Residual image `|a - b| * gain`, clamped into `[0, 1]`.
pub fn residual_image(a: &ImagePlane, b: &ImagePlane, gain: f64) -> Result<ImagePlane> {
    check_shapes(a, b)?;
    let d = a.data() - b.data();
    ImagePlane::from_array(d.mapv(|v| (v.abs() * gain).clamp(0.0, 1.0)))
}

/// 2-D PCA point set for one (encode key, decode key) condition.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PcaCondition {
    pub encode_key: usize,
    pub decode_key: usize,
    pub points: Vec<[f64; 2]>,
}

/// PCA of recovery features across all key conditions plus a scalar
/// separation score: between-condition centroid scatter over mean
/// within-condition scatter (in the 2-D projection).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PcaReport {
    pub conditions: Vec<PcaCondition>,
    pub separation: f64,
}

/// Projects recovery features onto the top two principal components,
/// computed from the centered feature covariance via its Gram matrix.
pub fn pca_entanglement(
    state: &ModelState,
    registry: &KeyRegistry,
    data: &[ImagePlane],
    n_samples: usize,
    seed: u64,
) -> Result<PcaReport> {
    if n_samples == 0 {
        return Err(Error::Parameter("pca needs at least one sample".into()));
    }
    let pairs = eval_pairs(data, seed)?;
    if pairs.len() < n_samples {
        return Err(Error::Dataset(format!(
            "pca wants {n_samples} pairs, evaluation set provides {}",
            pairs.len()
        )));
    }
    let pairs = &pairs[..n_samples];
    let k = registry.len();

    // rows: condition-major feature vectors
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k * k * n_samples);
    let mut labels: Vec<(usize, usize)> = Vec::with_capacity(k * k);
    for i in 1..=k {
        let stegos = chunked_embed(state, registry, i, pairs)?;
        let stego_refs: Vec<&ImagePlane> = stegos.iter().collect();
        for j in 1..=k {
            labels.push((i, j));
            for chunk in stego_refs.chunks(EVAL_CHUNK) {
                rows.extend(extract_recovery_features_batch(state, registry, j, chunk)?);
            }
        }
    }

    let r = rows.len();
    let d = rows[0].len();
    // center feature columns
    let mut mean = vec![0.0; d];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= r as f64;
    }
    for row in &mut rows {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    // Gram matrix G = Xc Xc^T; top-2 eigenpairs give the projections:
    // scores along component c are sqrt(lambda_c) * u_c.
    let mut gram = Array2::<f64>::zeros((r, r));
    for a in 0..r {
        for b in a..r {
            let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
            gram[(a, b)] = dot;
            gram[(b, a)] = dot;
        }
    }

    let (l1, u1) = top_eigenpair(&gram, seed ^ 1);
    let mut deflated = gram.clone();
    for a in 0..r {
        for b in 0..r {
            deflated[(a, b)] -= l1 * u1[a] * u1[b];
        }
    }
    let (l2, u2) = top_eigenpair(&deflated, seed ^ 2);

    let s1 = l1.max(0.0).sqrt();
    let s2 = l2.max(0.0).sqrt();
    let points: Vec<[f64; 2]> = (0..r).map(|a| [s1 * u1[a], s2 * u2[a]]).collect();

    let mut conditions = Vec::with_capacity(labels.len());
    for (c, &(i, j)) in labels.iter().enumerate() {
        let pts = points[c * n_samples..(c + 1) * n_samples].to_vec();
        conditions.push(PcaCondition { encode_key: i, decode_key: j, points: pts });
    }

    // centroid scatter ratio
    let centroid = |pts: &[[f64; 2]]| -> [f64; 2] {
        let mut c = [0.0, 0.0];
        for p in pts {
            c[0] += p[0];
            c[1] += p[1];
        }
        [c[0] / pts.len() as f64, c[1] / pts.len() as f64]
    };
    let global = centroid(&points);
    let mut between = 0.0;
    let mut within = 0.0;
    for cond in &conditions {
        let c = centroid(&cond.points);
        between += (c[0] - global[0]).powi(2) + (c[1] - global[1]).powi(2);
        let mut w = 0.0;
        for p in &cond.points {
            w += (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        }
        within += w / cond.points.len() as f64;
    }
    between /= conditions.len() as f64;
    within /= conditions.len() as f64;
    let separation = between / within.max(1e-12);

    Ok(PcaReport { conditions, separation })
}

/// Power iteration with a deterministic start vector.
fn top_eigenpair(m: &Array2<f64>, seed: u64) -> (f64, Vec<f64>) {
    let n = m.dim().0;
    let stream = SeedStream::new(seed);
    let mut v: Vec<f64> = (0..n).map(|i| stream.symmetric_f64(i as u64, 1.0)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = norm(&v).max(1e-12);
    for x in &mut v {
        *x /= nv;
    }
    let mut lambda = 0.0;
    for _ in 0..300 {
        let mut next = vec![0.0; n];
        for a in 0..n {
            let mut acc = 0.0;
            for b in 0..n {
                acc += m[(a, b)] * v[b];
            }
            next[a] = acc;
        }
        lambda = norm(&next);
        if lambda < 1e-12 {
            return (0.0, v);
        }
        for x in &mut next {
            *x /= lambda;
        }
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    (lambda, v)
}

/// Mean PSNR of `noisy` and of `purify(noisy)` against the clean images at
/// one noise level. The difference is the purification gain.
pub fn purification_gain(
    state: &ModelState,
    data: &[ImagePlane],
    sigma: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Dataset("purification check needs images".into()));
    }
    let stream = SeedStream::new(seed);
    let mut noisy_psnr = 0.0;
    let mut purified_psnr = 0.0;
    for (idx, clean) in data.iter().enumerate() {
        let noisy = add_gaussian_noise(clean, sigma, stream.value(idx as u64))?;
        let purified = purify_batch(state, &[&noisy])?.remove(0);
        noisy_psnr += psnr(&noisy, clean)?;
        purified_psnr += psnr(&purified, clean)?;
    }
    let n = data.len() as f64;
    Ok((noisy_psnr / n, purified_psnr / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn rand_plane(seed: u64, side: usize) -> ImagePlane {
        let s = SeedStream::new(seed);
        let mut c = 0;
        ImagePlane::from_array(Array3::from_shape_simple_fn((3, side, side), || {
            c += 1;
            s.unit_f64(c)
        }))
        .unwrap()
    }

    #[test]
    fn psnr_identical_caps_at_100() {
        let img = rand_plane(1, 16);
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);
    }

    #[test]
    fn psnr_uniform_offset_closed_form() {
        let a = ImagePlane::constant(0.4, 16, 16);
        let b = ImagePlane::constant(0.5, 16, 16);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn mae_closed_forms() {
        let a = ImagePlane::constant(0.4, 16, 16);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b = ImagePlane::constant(0.5, 16, 16);
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_constant_stability() {
        let img = rand_plane(2, 16);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let c = ImagePlane::constant(0.7, 16, 16);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = rand_plane(3, 16);
        let b = rand_plane(4, 16);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        let d = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();
        assert!(d < 1e-12);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = rand_plane(5, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn residual_amplifies_and_clamps() {
        let a = ImagePlane::constant(0.5, 16, 16);
        let b = ImagePlane::constant(0.4, 16, 16);
        let r = residual_image(&a, &b, 5.0).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let big = residual_image(&a, &ImagePlane::constant(0.0, 16, 16), 5.0).unwrap();
        assert!(big.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn top_eigenpair_recovers_dominant_direction() {
        // diag(5, 2, 1) plus symmetry
        let mut m = Array2::<f64>::zeros((3, 3));
        m[(0, 0)] = 5.0;
        m[(1, 1)] = 2.0;
        m[(2, 2)] = 1.0;
        let (l, v) = top_eigenpair(&m, 3);
        assert!((l - 5.0).abs() < 1e-9);
        assert!(v[0].abs() > 0.999);
    }
}
