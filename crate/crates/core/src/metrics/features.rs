//! Image feature extractors for FID and KID.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::morphology::Mask;
use crate::nn::{Adam, AdamConfig, Conv2d, Linear, ParamBuilder, ParamStore, Tape};
use crate::rng::{self, Domain};
use crate::synth::{Style, NUM_STYLES};
use crate::tensor::Tensor4;

/// Deterministic map from a (1, 3, H, W) image to a fixed-length vector.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Tensor4) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    #[default]
    RandomProjection,
    StyleCnn,
}

pub fn extract_all(ext: &dyn FeatureExtractor, images: &[Tensor4], exec: ExecMode) -> Result<Vec<Vec<f64>>> {
    exec.map(images, |im| ext.extract(im)).into_iter().collect()
}

/// Zero every pixel outside `mask`.
pub fn foreground(image: &Tensor4, mask: &Mask) -> Result<Tensor4> {
    let [b, c, h, w] = image.shape();
    if b != 1 || (mask.width(), mask.height()) != (w, h) {
        return Err(Error::shape(&[1, c, mask.height(), mask.width()], &image.shape()));
    }
    Ok(Tensor4::from_fn(image.shape(), |[_, ch, y, x]| {
        if mask.get(x, y) {
            image.at(0, ch, y, x)
        } else {
            0.0
        }
    }))
}

/// Box-filter resize of a (1, C, H, W) image to `size`×`size`.
pub fn resize_area(image: &Tensor4, size: usize) -> Tensor4 {
    let [_, c, h, w] = image.shape();
    let span = |i: usize, n: usize| {
        let a = i * n / size;
        let b = ((i + 1) * n).div_ceil(size).max(a + 1);
        a..b.min(n)
    };
    Tensor4::from_fn([1, c, size, size], |[_, ch, gy, gx]| {
        let (ys, xs) = (span(gy, h), span(gx, w));
        let mut s = 0.0f64;
        for y in ys.clone() {
            for x in xs.clone() {
                s += image.at(0, ch, y, x) as f64;
            }
        }
        (s / (ys.len() * xs.len()) as f64) as f32
    })
}

fn check_image(image: &Tensor4) -> Result<()> {
    let [b, c, _, _] = image.shape();
    if b != 1 || c != 3 {
        return Err(Error::shape(&[1, 3], &[b, c]));
    }
    Ok(())
}

/// Seeded Gaussian projection of a 16×16 box-filtered thumbnail, squashed by
/// `tanh`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    dim: usize,
    grid: usize,
    weights: Vec<f64>,
}

impl RandomProjection {
    pub const GRID: usize = 16;

    pub fn new(dim: usize, seed: u64) -> Self {
        let inputs = 3 * Self::GRID * Self::GRID;
        let mut r = rng::stream(seed, Domain::Features, 0);
        let s = 1.0 / (inputs as f64).sqrt();
        let weights = (0..dim * inputs).map(|_| s * r.sample::<f64, _>(StandardNormal)).collect();
        Self {
            dim,
            grid: Self::GRID,
            weights,
        }
    }
}

impl FeatureExtractor for RandomProjection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &Tensor4) -> Result<Vec<f64>> {
        check_image(image)?;
        let thumb = resize_area(image, self.grid);
        let x: Vec<f64> = thumb.data().iter().map(|&v| v as f64).collect();
        Ok(self
            .weights
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>().tanh())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleCnnConfig {
    pub input_size: usize,
    pub channels: [usize; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for StyleCnnConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: [32, 64, 192],
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Small convolutional style classifier; features are the pooled
/// activations of its last convolution.
pub struct StyleCnn {
    cfg: StyleCnnConfig,
    params: ParamStore<f32>,
    convs: [Conv2d; 3],
    head: Linear,
}

impl StyleCnn {
    pub fn new(cfg: StyleCnnConfig) -> Result<Self> {
        if cfg.input_size < 4 || cfg.channels.contains(&0) || cfg.batch_size == 0 {
            return Err(Error::Config("style CNN needs input_size >= 4 and non-zero widths".into()));
        }
        let mut params = ParamStore::new();
        let mut r = rng::stream(cfg.seed, Domain::Init, 1 << 30);
        let mut pb = ParamBuilder::new(&mut params, &mut r);
        let [c1, c2, c3] = cfg.channels;
        let convs = [
            Conv2d::new(&mut pb, "conv1", 3, c1, 3, 1, 1.0),
            Conv2d::new(&mut pb, "conv2", c1, c2, 3, 2, 1.0),
            Conv2d::new(&mut pb, "conv3", c2, c3, 3, 2, 1.0),
        ];
        let head = Linear::new(&mut pb, "head", c3, NUM_STYLES, 1.0);
        Ok(Self {
            cfg,
            params,
            convs,
            head,
        })
    }

    fn features_var(&self, tape: &mut Tape<'_, f32>, x: Tensor4) -> Result<crate::nn::Var> {
        let mut h = tape.leaf(x);
        for c in &self.convs {
            let y = c.forward(tape, h)?;
            h = tape.silu(y);
        }
        Ok(tape.global_avg_pool(h))
    }

    fn prepare(&self, images: &[&Tensor4]) -> Result<Tensor4> {
        let thumbs: Vec<Tensor4> = images
            .iter()
            .map(|im| {
                check_image(im)?;
                Ok(resize_area(im, self.cfg.input_size))
            })
            .collect::<Result<_>>()?;
        Tensor4::stack(&thumbs)
    }

    /// Fit the classifier with softmax cross-entropy; returns the loss per step.
    pub fn train(&mut self, data: &[(Tensor4, Style)], exec: ExecMode) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Data("style CNN needs training images".into()));
        }
        let mut adam = Adam::new(
            AdamConfig {
                lr: self.cfg.lr,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let mut r = rng::stream(self.cfg.seed, Domain::Features, 1 + step as u64);
            let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| r.random_range(0..data.len())).collect();
            let x = self.prepare(&idx.iter().map(|&i| &data[i].0).collect::<Vec<_>>())?;
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].1 .0).collect();
            let mut tape = Tape::new(&self.params, exec);
            let f = self.features_var(&mut tape, x)?;
            let logits = self.head.forward(&mut tape, f)?;
            let (loss, grad) = softmax_cross_entropy(tape.value(logits), &labels);
            let back = tape.backward(&[(logits, &grad)])?;
            drop(tape);
            adam.step(&mut self.params, &back.params);
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Predicted style ids.
    pub fn classify(&self, images: &[Tensor4]) -> Result<Vec<usize>> {
        let x = self.prepare(&images.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new(&self.params, ExecMode::Sequential);
        let f = self.features_var(&mut tape, x)?;
        let logits = self.head.forward(&mut tape, f)?;
        let l = tape.value(logits);
        Ok((0..images.len())
            .map(|b| {
                let row = l.item(b);
                (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0)
            })
            .collect())
    }
}

impl FeatureExtractor for StyleCnn {
    fn dim(&self) -> usize {
        self.cfg.channels[2]
    }

    fn extract(&self, image: &Tensor4) -> Result<Vec<f64>> {
        let x = self.prepare(&[image])?;
        let mut tape = Tape::new(&self.params, ExecMode::Sequential);
        let f = self.features_var(&mut tape, x)?;
        Ok(tape.value(f).data().iter().map(|&v| v as f64).collect())
    }
}

/// Mean cross-entropy of (B, K, 1, 1) logits and its gradient.
fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> (f64, Tensor4) {
    let [b, k, _, _] = logits.shape();
    let mut grad = Tensor4::zeros(logits.shape());
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.item(i);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        loss += z.ln() + m - row[labels[i]] as f64;
        let g = grad.item_mut(i);
        for j in 0..k {
            let p = (row[j] as f64 - m).exp() / z;
            g[j] = ((p - (j == labels[i]) as u8 as f64) / b as f64) as f32;
        }
    }
    (loss / b as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_hand, Gesture};

    fn hand_images(n: usize) -> Vec<(Tensor4, Style)> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(3, Domain::Data, i as u64);
                let s = Style(i % NUM_STYLES);
                (sample_hand(&mut r, 32, s, Gesture::ALL[i % 5]).image, s)
            })
            .collect()
    }

    #[test]
    fn resize_area_preserves_constant_and_mean() {
        let c = Tensor4::full([1, 3, 32, 48], 0.25);
        let r = resize_area(&c, 16);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let img = Tensor4::from_fn([1, 3, 32, 32], |[_, c, y, x]| (c * 1000 + y * 32 + x) as f32 / 3000.0);
        let r = resize_area(&img, 16);
        assert!((r.mean() - img.mean()).abs() < 1e-5);
    }

    #[test]
    fn projection_is_deterministic_and_sized() {
        let imgs = hand_images(2);
        let a = RandomProjection::new(192, 7);
        let b = RandomProjection::new(192, 7);
        let fa = a.extract(&imgs[0].0).unwrap();
        assert_eq!(fa.len(), 192);
        assert_eq!(fa, b.extract(&imgs[0].0).unwrap());
        assert_ne!(fa, a.extract(&imgs[1].0).unwrap());
        assert_ne!(fa, RandomProjection::new(192, 8).extract(&imgs[0].0).unwrap());
    }

    #[test]
    fn foreground_zeroes_background() {
        let img = Tensor4::full([1, 3, 4, 4], 0.7);
        let mut m = Mask::empty(4, 4);
        m.set(1, 2, true);
        let f = foreground(&img, &m).unwrap();
        assert_eq!(f.sum(), 0.7 * 3.0);
        assert_eq!(f.at(0, 1, 2, 1), 0.7);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = Tensor4::from_vec([2, 3, 1, 1], vec![0.2, -0.4, 1.1, 0.0, 0.5, -0.3]).unwrap();
        let labels = [2, 1];
        let (_, g) = softmax_cross_entropy(&logits, &labels);
        for i in 0..6 {
            let h = 1e-3;
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&p, &labels).0 - softmax_cross_entropy(&m, &labels).0) / (2.0 * h as f64);
            assert!((fd - g.data()[i] as f64).abs() < 1e-4, "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn style_cnn_learns() {
        let data = hand_images(64);
        let mut cnn = StyleCnn::new(StyleCnnConfig {
            input_size: 16,
            channels: [8, 16, 192],
            steps: 60,
            batch_size: 16,
            lr: 3e-3,
            seed: 1,
        })
        .unwrap();
        let losses = cnn.train(&data, ExecMode::Sequential).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(cnn.extract(&data[0].0).unwrap().len(), 192);
        assert_eq!(cnn.dim(), 192);
    }
}
