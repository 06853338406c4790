//! Image quality metrics: structural similarity, Fréchet embedding
//! distance and an inception-style score, with pluggable feature
//! backends so pretrained networks can be dropped in where available.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

// ── Structural similarity ───────────────────────────────────────────────

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// BT.601 luma of an RGB image in [-1, 1], remapped to [0, 1].
fn luma(img: &Tensor<f32>) -> Result<Vec<f64>> {
    if img.shape().len() != 3 || img.dim(0) != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected RGB image (3, H, W), got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let d = img.data();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let r = d[i] as f64;
        let g = d[h * w + i] as f64;
        let b = d[2 * h * w + i] as f64;
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        if !y.is_finite() {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        out.push((y + 1.0) / 2.0);
    }
    Ok(out)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean structural similarity between two RGB images in [-1, 1], computed
/// on luma with an 11x11 Gaussian window over valid positions.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.dim(1), a.dim(2));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let xa = luma(a)?;
    let xb = luma(b)?;
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                let row = (oy + wy) * w + ox;
                let wrow = wy * SSIM_WINDOW;
                for wx in 0..SSIM_WINDOW {
                    let g = win[wrow + wx];
                    let va = xa[row + wx];
                    let vb = xb[row + wx];
                    mx += g * va;
                    my += g * vb;
                    sxx += g * va * va;
                    syy += g * vb * vb;
                    sxy += g * va * vb;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ── Embedding backends ──────────────────────────────────────────────────

/// Maps an RGB image to a fixed-length feature vector.
pub trait Embedder {
    fn embed(&self, image: &Tensor<f32>) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
    /// Identifier recorded in reports; distances are only comparable
    /// between runs that used the same backend.
    fn name(&self) -> &str;
}

/// Produces a class-probability vector for an RGB image.
pub trait Classifier {
    fn probabilities(&self, image: &Tensor<f32>) -> Result<Vec<f64>>;
    fn classes(&self) -> usize;
    fn name(&self) -> &str;
}

fn random_conv_stack(seed: u64, chans: &[usize]) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    for lv in 0..chans.len() - 1 {
        let (ic, oc) = (chans[lv], chans[lv + 1]);
        let std = (2.0 / (ic as f64 * 9.0)).sqrt() as f32;
        let data: Vec<f32> = (0..oc * ic * 9)
            .map(|_| crate::nets::gaussian_sample(&mut rng) as f32 * std)
            .collect();
        weights.push(Tensor::from_vec(&[oc, ic * 9], data));
    }
    weights
}

fn run_stack(weights: &[Tensor<f32>], image: &Tensor<f32>) -> Result<Vec<f64>> {
    if image.shape().len() != 3 || image.dim(0) != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected RGB image (3, H, W), got {:?}",
            image.shape()
        )));
    }
    if image.dim(1) < 8 || image.dim(2) < 8 {
        return Err(Error::InvalidArgument("image too small to embed (min 8x8)".into()));
    }
    let mut cur = image.reshaped(&[1, 3, image.dim(1), image.dim(2)]);
    for w in weights {
        cur = kernels::conv3_forward(&cur, w, 2);
        // Leaky rectification keeps sign information.
        cur = cur.map(|v| if v > 0.0 { v } else { 0.2 * v });
    }
    let c = cur.dim(1);
    let hw = cur.dim(2) * cur.dim(3);
    let d = cur.data();
    Ok((0..c)
        .map(|ch| d[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
        .collect())
}

/// Fixed random-convolution embedder: three stride-2 stages and global
/// average pooling. Deterministic in its seed.
pub struct RandomProjectionEmbedder {
    weights: Vec<Tensor<f32>>,
    name: String,
}

impl RandomProjectionEmbedder {
    pub fn new(seed: u64) -> Self {
        RandomProjectionEmbedder {
            weights: random_conv_stack(seed.wrapping_add(0x656d_6264), &[3, 16, 32, 64]),
            name: format!("random-proj-v1:{seed}"),
        }
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn embed(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        run_stack(&self.weights, image)
    }

    fn dim(&self) -> usize {
        64
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Fixed random classifier: the embedder stack followed by a fixed linear
/// map and softmax over 10 pseudo-classes.
pub struct RandomProjectionClassifier {
    weights: Vec<Tensor<f32>>,
    linear: Vec<f64>,
    name: String,
}

impl RandomProjectionClassifier {
    pub fn new(seed: u64) -> Self {
        let weights = random_conv_stack(seed.wrapping_add(0x636c_7366), &[3, 16, 32, 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x736d_6178));
        let linear = (0..10 * 64)
            .map(|_| crate::nets::gaussian_sample(&mut rng) / 8.0)
            .collect();
        RandomProjectionClassifier { weights, linear, name: format!("random-cls-v1:{seed}") }
    }
}

impl Classifier for RandomProjectionClassifier {
    fn probabilities(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let feat = run_stack(&self.weights, image)?;
        let logits: Vec<f64> = (0..10)
            .map(|k| (0..64).map(|j| self.linear[k * 64 + j] * feat[j]).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.iter().map(|&e| e / z).collect())
    }

    fn classes(&self) -> usize {
        10
    }

    fn name(&self) -> &str {
        &self.name
    }
}

// ── Fréchet distance ────────────────────────────────────────────────────

/// Sample mean and unbiased covariance of a set of vectors (rows).
pub fn gaussian_stats(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for covariance, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::InvalidArgument("embedding dimensions differ".into()));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        for (i, &v) in s.iter().enumerate() {
            mean[i] += v / n;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    Ok((mean, cov))
}

/// Principal square root of a symmetric PSD matrix; tiny negative
/// eigenvalues from floating-point noise are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// `|m1-m2|^2 + tr(c1 + c2 - 2 (c1^{1/2} c2 c1^{1/2})^{1/2})`.
pub fn frechet_distance(
    m1: &DVector<f64>,
    c1: &DMatrix<f64>,
    m2: &DVector<f64>,
    c2: &DMatrix<f64>,
) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || c1.nrows() != d || c1.ncols() != d || c2.nrows() != d || c2.ncols() != d {
        return Err(Error::InvalidArgument("statistics dimensions differ".into()));
    }
    let diff = m1 - m2;
    let s1 = sqrtm_psd(c1);
    let inner = &s1 * c2 * &s1;
    let cross = sqrtm_psd(&inner);
    let val = diff.dot(&diff) + c1.trace() + c2.trace() - 2.0 * cross.trace();
    if !val.is_finite() {
        return Err(Error::InvalidArgument("non-finite distance (degenerate statistics)".into()));
    }
    // Exact-zero distances can dip a hair below zero in floating point.
    Ok(val.max(0.0))
}

/// Fréchet distance between two image sets under one embedder.
pub fn frechet_between(
    embedder: &dyn Embedder,
    reference: &[Tensor<f32>],
    generated: &[Tensor<f32>],
) -> Result<f64> {
    let er: Result<Vec<Vec<f64>>> = reference.iter().map(|t| embedder.embed(t)).collect();
    let eg: Result<Vec<Vec<f64>>> = generated.iter().map(|t| embedder.embed(t)).collect();
    let (m1, c1) = gaussian_stats(&er?)?;
    let (m2, c2) = gaussian_stats(&eg?)?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

// ── Inception-style score ───────────────────────────────────────────────

/// Score from class probabilities: per contiguous split,
/// `exp(mean_i KL(p_i || marginal))`; returns (mean, std) over splits.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 || probs.len() < splits {
        return Err(Error::InvalidArgument(format!(
            "need at least {splits} probability rows for {splits} splits, got {}",
            probs.len()
        )));
    }
    let k = probs[0].len();
    for p in probs {
        if p.len() != k {
            return Err(Error::InvalidArgument("probability lengths differ".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "rows must be probability vectors (sum 1), got sum {s}"
            )));
        }
    }
    let mut scores = Vec::with_capacity(splits);
    let n = probs.len();
    for s in 0..splits {
        let lo = s * n / splits;
        let hi = (s + 1) * n / splits;
        let chunk = &probs[lo..hi];
        let mut marginal = vec![0.0; k];
        for p in chunk {
            for (m, &v) in marginal.iter_mut().zip(p) {
                *m += v / chunk.len() as f64;
            }
        }
        let mut kl_sum = 0.0;
        for p in chunk {
            for (&pi, &mi) in p.iter().zip(&marginal) {
                if pi > 1e-12 {
                    kl_sum += pi * (pi.ln() - mi.max(1e-12).ln());
                }
            }
        }
        scores.push((kl_sum / chunk.len() as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Inception-style score of an image set under one classifier.
pub fn inception_of(
    classifier: &dyn Classifier,
    images: &[Tensor<f32>],
    splits: usize,
) -> Result<(f64, f64)> {
    let probs: Result<Vec<Vec<f64>>> = images.iter().map(|t| classifier.probabilities(t)).collect();
    inception_score(&probs?, splits)
}

// ── Directory evaluation ────────────────────────────────────────────────

/// Aggregate quality of a generated set against a reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Number of paired images that entered the SSIM average.
    pub pairs: usize,
    pub ssim_mean: f64,
    pub fid: f64,
    pub inception_mean: f64,
    pub inception_std: f64,
    pub embedder: String,
    pub classifier: String,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "pairs,ssim,fid,is_mean,is_std,embedder,classifier"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.pairs,
            self.ssim_mean,
            self.fid,
            self.inception_mean,
            self.inception_std,
            self.embedder,
            self.classifier
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pairs:     {}", self.pairs)?;
        writeln!(f, "ssim:      {:.4}", self.ssim_mean)?;
        writeln!(f, "fid:       {:.4} ({})", self.fid, self.embedder)?;
        write!(
            f,
            "is:        {:.4} +/- {:.4} ({})",
            self.inception_mean, self.inception_std, self.classifier
        )
    }
}

/// Compare every same-named PNG in two directories: paired SSIM, set-level
/// Fréchet distance and the inception-style score of the generated set.
pub fn evaluate_dirs(
    reference_dir: &Path,
    generated_dir: &Path,
    embedder: &dyn Embedder,
    classifier: &dyn Classifier,
    splits: usize,
) -> Result<MetricReport> {
    let names = |dir: &Path| -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".png") {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    };
    let ref_names = names(reference_dir)?;
    let gen_names = names(generated_dir)?;
    let common: Vec<&String> = ref_names.iter().filter(|n| gen_names.contains(n)).collect();
    if common.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 paired images, found {}",
            common.len()
        )));
    }
    let mut refs = Vec::new();
    let mut gens = Vec::new();
    let mut ssim_sum = 0.0;
    for name in &common {
        let r = crate::data::load_rgb_png(&reference_dir.join(name))?;
        let g = crate::data::load_rgb_png(&generated_dir.join(name))?;
        ssim_sum += ssim(&r, &g)?;
        refs.push(r);
        gens.push(g);
    }
    let fid = frechet_between(embedder, &refs, &gens)?;
    let (is_mean, is_std) = inception_of(classifier, &gens, splits.min(common.len()))?;
    Ok(MetricReport {
        pairs: common.len(),
        ssim_mean: ssim_sum / common.len() as f64,
        fid,
        inception_mean: is_mean,
        inception_std: is_std,
        embedder: embedder.name().to_string(),
        classifier: classifier.name().to_string(),
    })
}
