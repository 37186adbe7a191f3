//! Keypoint accuracy (OKS, DAP, MPJPE), distribution distances (FID, KID)
//! and the boundary-artifact score used by the blending ablation.

mod estimate;
mod features;

pub use estimate::{estimate, estimate_body, estimate_hands, Estimate, FitConfig, Segmenter};
pub use features::{extract_all, foreground, ExtractorKind, FeatureExtractor, RandomProjection, StyleCnn, StyleCnnConfig};

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Keypoint, Layout, Skeleton};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::morphology::{Mask, StructuringElement};
use crate::rng::{self, Domain};
use crate::synth::Style;
use crate::tensor::Tensor4;

/// Uniform OKS constant for the synthetic layouts.
pub const DEFAULT_K: f64 = 0.1;
/// Distance charged to a ground-truth-visible joint the estimator missed.
pub const UNDETECTED_DISTANCE: f64 = std::f64::consts::SQRT_2;
pub const COVARIANCE_RIDGE: f64 = 1e-6;
pub const BAND_WIDTH: usize = 3;

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn dap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn uniform_k(n: usize) -> Vec<f64> {
    vec![DEFAULT_K; n]
}

/// Ground truth and prediction of one instance. Coordinates and `scale`
/// share a unit.
#[derive(Clone, Copy, Debug)]
pub struct KeypointMatch<'a> {
    pub gt: &'a [Keypoint],
    pub pred: &'a [Keypoint],
    pub k: &'a [f64],
    pub scale: f64,
}

fn check_layout(gt: usize, pred: usize, k: usize) -> Result<()> {
    if gt != pred || gt != k {
        return Err(Error::Data(format!(
            "keypoint layouts differ: {gt} ground truth, {pred} predicted, {k} constants"
        )));
    }
    Ok(())
}

/// Object keypoint similarity. Invisible predictions contribute zero.
pub fn oks(m: KeypointMatch<'_>) -> Result<f64> {
    check_layout(m.gt.len(), m.pred.len(), m.k.len())?;
    if !(m.scale > 0.0) || m.k.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::Config("OKS needs positive scale and constants".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((g, p), &k) in m.gt.iter().zip(m.pred).zip(m.k) {
        if g[2] <= 0.0 {
            continue;
        }
        n += 1;
        if p[2] > 0.0 {
            let d2 = (g[0] - p[0]).powi(2) + (g[1] - p[1]).powi(2);
            sum += (-d2 / (2.0 * m.scale * m.scale * k * k)).exp();
        }
    }
    if n == 0 {
        return Err(Error::Data("OKS needs at least one visible ground-truth keypoint".into()));
    }
    Ok(sum / n as f64)
}

/// Ground truth of one image for DAP.
#[derive(Clone, Debug)]
pub struct GtInstance {
    pub keypoints: Vec<Keypoint>,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct Detection {
    pub image: usize,
    pub score: f64,
    pub keypoints: Vec<Keypoint>,
}

/// Indices of `dets` by descending score; ties keep input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// OKS of every detection against the ground truth of its image.
pub fn detection_oks(gts: &[GtInstance], dets: &[Detection], k: &[f64]) -> Result<Vec<f64>> {
    dets.iter()
        .map(|d| {
            let g = gts
                .get(d.image)
                .ok_or_else(|| Error::Data(format!("detection refers to missing image {}", d.image)))?;
            oks(KeypointMatch {
                gt: &g.keypoints,
                pred: &d.keypoints,
                k,
                scale: g.scale,
            })
        })
        .collect()
}

/// COCO 101-point interpolated AP from true-positive flags in score order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let i = recall.partition_point(|&x| x < r);
        if i < precision.len() {
            total += precision[i];
        }
    }
    total / 101.0
}

/// Greedy matching at one threshold: in score order, a detection is a true
/// positive when its image's ground truth is still unmatched and the OKS
/// clears the threshold.
pub fn greedy_match(dets: &[Detection], order: &[usize], oks: &[f64], num_images: usize, threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; num_images];
    order
        .iter()
        .map(|&i| {
            let img = dets[i].image;
            let hit = !taken[img] && oks[i] >= threshold;
            taken[img] |= hit;
            hit
        })
        .collect()
}

/// Keypoint AP averaged over OKS thresholds, one person per image.
pub fn dap(gts: &[GtInstance], dets: &[Detection], k: &[f64], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("DAP needs at least one threshold".into()));
    }
    let oks = detection_oks(gts, dets, k)?;
    let order = score_order(dets);
    let sum: f64 = thresholds
        .iter()
        .map(|&t| average_precision(&greedy_match(dets, &order, &oks, gts.len(), t), gts.len()))
        .sum();
    Ok(sum / thresholds.len() as f64)
}

/// Mean joint error with the count of joints charged as undetected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointError {
    pub mean: f64,
    pub joints: usize,
    pub undetected: usize,
}

/// Mean Euclidean joint distance over ground-truth-visible joints of
/// `subset`, pooled over all instances. Coordinates are normalized to [0, 1].
pub fn mpjpe(pairs: &[(&[Keypoint], &[Keypoint])], subset: Range<usize>) -> Result<JointError> {
    let (mut sum, mut joints, mut undetected) = (0.0, 0usize, 0usize);
    for (gt, pred) in pairs {
        check_layout(gt.len(), pred.len(), gt.len())?;
        if subset.end > gt.len() {
            return Err(Error::Data(format!("joint subset {subset:?} exceeds {} keypoints", gt.len())));
        }
        for i in subset.clone() {
            let (g, p) = (gt[i], pred[i]);
            if g[2] <= 0.0 {
                continue;
            }
            joints += 1;
            if p[2] > 0.0 {
                sum += (g[0] - p[0]).hypot(g[1] - p[1]);
            } else {
                undetected += 1;
                sum += UNDETECTED_DISTANCE;
            }
        }
    }
    if joints == 0 {
        return Err(Error::Data("MPJPE subset has no visible joints".into()));
    }
    Ok(JointError {
        mean: sum / joints as f64,
        joints,
        undetected,
    })
}

fn feature_matrix(x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = x.first().map(|v| v.len()).ok_or_else(|| Error::Data("empty feature set".into()))?;
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::Data("feature vectors differ in length".into()));
    }
    Ok(DMatrix::from_fn(x.len(), d, |i, j| x[i][j]))
}

fn gaussian_fit(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n as f64);
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    for i in 0..cov.nrows() {
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    (mean, cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (xa, xb) = (feature_matrix(a)?, feature_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::shape(&[xa.ncols()], &[xb.ncols()]));
    }
    let (ma, ca) = gaussian_fit(&xa);
    let (mb, cb) = gaussian_fit(&xb);
    let sa = psd_sqrt(ca.clone());
    let inner = &sa * &cb * &sa;
    let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KidConfig {
    pub block_size: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self {
            block_size: 100,
            blocks: 10,
            seed: 0,
        }
    }
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let within = |s: &[&[f64]]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(s[i], s[j]);
                }
            }
        }
        t
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    within(x) / (m * (m - 1.0)) + within(y) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
}

/// Kernel inception distance: mean and standard deviation of the unbiased
/// MMD² over random blocks.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &KidConfig) -> Result<(f64, f64)> {
    let (xa, xb) = (feature_matrix(a)?, feature_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::shape(&[xa.ncols()], &[xb.ncols()]));
    }
    let m = cfg.block_size;
    if m < 2 || m > a.len().min(b.len()) || cfg.blocks == 0 {
        return Err(Error::Data(format!(
            "KID needs 2 <= block size <= samples per side; block {m}, sides {} and {}",
            a.len(),
            b.len()
        )));
    }
    // canonical argument order makes the estimate exactly symmetric
    let swap = match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Equal => a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Greater),
        o => o.is_gt(),
    };
    let (a, b) = if swap { (b, a) } else { (a, b) };
    let vals: Vec<f64> = (0..cfg.blocks)
        .map(|blk| {
            let mut r = rng::stream(cfg.seed, Domain::Eval, blk as u64);
            let pick = |s: &'_ [Vec<f64>], r: &mut rng::Rng| -> Vec<usize> {
                if m == s.len() {
                    (0..m).collect()
                } else {
                    sample_indices(r, s.len(), m).into_vec()
                }
            };
            let ia = pick(a, &mut r);
            let ib = pick(b, &mut r);
            let x: Vec<&[f64]> = ia.iter().map(|&i| a[i].as_slice()).collect();
            let y: Vec<&[f64]> = ib.iter().map(|&i| b[i].as_slice()).collect();
            mmd2_unbiased(&x, &y)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// Outer band of `BAND_WIDTH` pixels around the mask.
pub fn boundary_band(mask: &Mask) -> Mask {
    mask.dilate_n(&StructuringElement::square(3), BAND_WIDTH)
        .difference(mask)
        .expect("same dimensions")
}

/// Mean absolute difference between `image` and `reference` over the band
/// just outside `mask`, averaged over channels.
pub fn boundary_artifact_score(image: &Tensor4, mask: &Mask, reference: &Tensor4) -> Result<f64> {
    image.same_shape(reference)?;
    let [b, c, h, w] = image.shape();
    if b != 1 || (mask.width(), mask.height()) != (w, h) {
        return Err(Error::shape(&[1, c, mask.height(), mask.width()], &image.shape()));
    }
    if mask.is_empty() {
        return Err(Error::Data("boundary score needs a non-empty mask".into()));
    }
    let band = boundary_band(mask);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if band.get(x, y) {
                for ch in 0..c {
                    sum += (image.at(0, ch, y, x) as f64 - reference.at(0, ch, y, x) as f64).abs();
                }
                n += c;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("boundary band is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Percentile bootstrap interval of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn bootstrap_mean(values: &[f64], resamples: usize, confidence: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() || resamples == 0 || !(0.0..1.0).contains(&confidence) {
        return Err(Error::Config("bootstrap needs data, resamples and confidence in [0, 1)".into()));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|i| {
            let mut r = rng::stream(seed, Domain::Bootstrap, i as u64);
            (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(Interval {
        mean: values.iter().sum::<f64>() / n as f64,
        lo: at(tail),
        hi: at(1.0 - tail),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub oks_k: f64,
    pub thresholds: Vec<f64>,
    pub fit: FitConfig,
    pub kid: KidConfig,
    pub extractor: ExtractorKind,
    pub feature_dim: usize,
    pub feature_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            oks_k: DEFAULT_K,
            thresholds: dap_thresholds(),
            fit: FitConfig::default(),
            kid: KidConfig::default(),
            extractor: ExtractorKind::RandomProjection,
            feature_dim: 192,
            feature_seed: 0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.oks_k > 0.0) {
            return Err(Error::Config("metrics.oks_k must be positive".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("metrics.thresholds must be non-empty and within [0, 1]".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("metrics.feature_dim must be positive".into()));
        }
        if self.kid.block_size < 2 || self.kid.blocks == 0 {
            return Err(Error::Config("metrics.kid needs block_size >= 2 and blocks >= 1".into()));
        }
        self.fit.validate()
    }
}

/// One image with its ground truth: skeleton, subject mask and style.
#[derive(Clone, Copy, Debug)]
pub struct EvalFrame<'a> {
    pub image: &'a Tensor4,
    pub gt: &'a Skeleton,
    pub mask: &'a Mask,
    pub style: Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dap: f64,
    pub dap_hands: f64,
    pub mpjpe: f64,
    pub mpjpe_hands: f64,
    pub fid_fg: f64,
    pub kid_fg_mean: f64,
    pub kid_fg_std: f64,
    pub n_samples: usize,
    pub config_hash: String,
    /// Ground-truth-visible joints the estimator missed, charged at √2.
    pub undetected_joints: usize,
    pub per_sample: Vec<SampleMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub oks: f64,
    pub oks_hands: f64,
    pub mpjpe: f64,
    pub fit_score: f64,
}

fn pixel_keypoints(kps: &[Keypoint], w: usize, h: usize) -> Vec<Keypoint> {
    kps.iter().map(|k| [k[0] * w as f64, k[1] * h as f64, k[2]]).collect()
}

/// Estimate keypoints on `frames`, score them against their ground truth,
/// and compare foreground features with `reference`.
pub fn evaluate(
    frames: &[EvalFrame<'_>],
    reference: &[EvalFrame<'_>],
    extractor: &dyn FeatureExtractor,
    cfg: &MetricsConfig,
    config_hash: &str,
    exec: ExecMode,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if frames.is_empty() || reference.is_empty() {
        return Err(Error::Data("evaluation needs generated and reference images".into()));
    }
    let layout = frames[0].gt.layout;
    if frames.iter().chain(reference).any(|f| f.gt.layout != layout) {
        return Err(Error::Data("evaluation frames mix skeleton layouts".into()));
    }
    let estimates: Vec<Estimate> = exec
        .map(frames, |f| estimate(f.image, f.style, f.gt, &cfg.fit))
        .into_iter()
        .collect::<Result<_>>()?;

    let n = layout.len();
    let k = vec![cfg.oks_k; n];
    let hands = layout.hand_indices();
    let mut gts = Vec::with_capacity(frames.len());
    let mut gts_h = Vec::with_capacity(frames.len());
    let mut dets = Vec::with_capacity(frames.len());
    let mut dets_h = Vec::with_capacity(frames.len());
    let mut per_sample = Vec::with_capacity(frames.len());
    for (i, (f, e)) in frames.iter().zip(&estimates).enumerate() {
        let (w, h) = (f.image.width(), f.image.height());
        let area = f.mask.area();
        if area == 0 {
            return Err(Error::Data(format!("frame {i} has an empty subject mask")));
        }
        let scale = (area as f64).sqrt();
        let g = pixel_keypoints(&f.gt.keypoints, w, h);
        let p = pixel_keypoints(&e.keypoints, w, h);
        let o = oks(KeypointMatch { gt: &g, pred: &p, k: &k, scale })?;
        let oh = oks(KeypointMatch {
            gt: &g[hands.clone()],
            pred: &p[hands.clone()],
            k: &k[hands.clone()],
            scale,
        })?;
        let j = mpjpe(&[(&f.gt.keypoints, &e.keypoints)], 0..n)?;
        per_sample.push(SampleMetrics {
            oks: o,
            oks_hands: oh,
            mpjpe: j.mean,
            fit_score: e.score,
        });
        gts_h.push(GtInstance {
            keypoints: g[hands.clone()].to_vec(),
            scale,
        });
        gts.push(GtInstance { keypoints: g, scale });
        if e.detected() {
            dets_h.push(Detection {
                image: i,
                score: e.score,
                keypoints: p[hands.clone()].to_vec(),
            });
            dets.push(Detection {
                image: i,
                score: e.score,
                keypoints: p,
            });
        }
    }
    let pairs: Vec<(&[Keypoint], &[Keypoint])> = frames
        .iter()
        .zip(&estimates)
        .map(|(f, e)| (f.gt.keypoints.as_slice(), e.keypoints.as_slice()))
        .collect();
    let full = mpjpe(&pairs, 0..n)?;
    let hand_err = mpjpe(&pairs, hands.clone())?;

    let fg = |fs: &[EvalFrame<'_>]| -> Result<Vec<Vec<f64>>> {
        let images: Vec<Tensor4> = fs.iter().map(|f| foreground(f.image, f.mask)).collect::<Result<_>>()?;
        extract_all(extractor, &images, exec)
    };
    let (fa, fb) = (fg(frames)?, fg(reference)?);
    let kid_cfg = KidConfig {
        block_size: cfg.kid.block_size.min(fa.len()).min(fb.len()),
        ..cfg.kid.clone()
    };
    let (kid_mean, kid_std) = if kid_cfg.block_size >= 2 { kid(&fa, &fb, &kid_cfg)? } else { (f64::NAN, f64::NAN) };
    Ok(MetricsReport {
        dap: dap(&gts, &dets, &k, &cfg.thresholds)?,
        dap_hands: dap(&gts_h, &dets_h, &k[hands.clone()], &cfg.thresholds)?,
        mpjpe: full.mean,
        mpjpe_hands: hand_err.mean,
        fid_fg: fid(&fa, &fb)?,
        kid_fg_mean: kid_mean,
        kid_fg_std: kid_std,
        n_samples: frames.len(),
        config_hash: config_hash.to_string(),
        undetected_joints: full.undetected,
        per_sample,
    })
}

/// Hand keypoint indices of a layout, for callers that slice skeletons.
pub fn hand_subset(layout: Layout) -> Range<usize> {
    layout.hand_indices()
}
