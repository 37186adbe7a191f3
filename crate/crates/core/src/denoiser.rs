//! Conditional U-Net denoiser with an auxiliary segmentation head.
//!
//! The network sees the noisy latent concatenated with the condition
//! channels, a timestep and a style id, and predicts the added noise. When
//! the mask head is enabled it also predicts hand-mask logits at image
//! resolution from the final decoder feature map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::nn::{timestep_embedding, AttnBlock, Conv2d, ConvTranspose2x2, Linear, ParamBuilder, ParamId, ParamStore, ResBlock, Tape, Var};
use crate::rng::{self, Domain};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Condition channels K concatenated to the latent.
    pub cond_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    /// Resolution levels (0 = full) that carry self-attention.
    pub attention_levels: Vec<usize>,
    /// Size of the style table; 0 disables style conditioning.
    pub num_styles: usize,
    pub emb_dim: usize,
    pub mask_head: bool,
    /// Spatial upsampling of the mask head, equal to the codec factor.
    pub mask_upsample: usize,
    pub mask_layers: usize,
    pub mask_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            cond_channels: 11,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            num_res_blocks: 1,
            attention_levels: vec![2],
            num_styles: 16,
            emb_dim: 128,
            mask_head: true,
            mask_upsample: 1,
            mask_layers: 4,
            mask_hidden: 16,
        }
    }
}

impl DenoiserConfig {
    /// Stage-II body outpainter: latent plus skeleton render (3) and mask (1).
    pub fn outpainter() -> Self {
        Self {
            cond_channels: 4,
            mask_head: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("denoiser: {m}")));
        if self.latent_channels == 0 || self.base_channels == 0 || self.emb_dim == 0 {
            return bad("channel counts must be positive");
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive");
        }
        if self.num_res_blocks == 0 {
            return bad("num_res_blocks must be at least 1");
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.channel_mults.len()) {
            return bad(&format!("attention level {l} does not exist"));
        }
        if self.mask_head {
            if !self.mask_upsample.is_power_of_two() {
                return bad("mask_upsample must be a power of two");
            }
            if self.mask_upsample.trailing_zeros() as usize > self.mask_layers || self.mask_layers == 0 {
                return bad("mask head needs at least log2(mask_upsample) layers");
            }
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.latent_channels + self.cond_channels
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_mults[l]
    }
}

#[derive(Clone, Debug)]
enum HeadLayer {
    Up(ConvTranspose2x2),
    Same(Conv2d),
}

/// Stack of layers mapping decoder features to one channel of logits,
/// upsampling ×2 in each of the first log2(factor) layers.
#[derive(Clone, Debug)]
pub struct MaskHead {
    layers: Vec<HeadLayer>,
    factor: usize,
}

impl MaskHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, hidden: usize, layers: usize, factor: usize) -> Self {
        let ups = factor.trailing_zeros() as usize;
        pb.scoped(name, |pb| {
            let layers = (0..layers)
                .map(|i| {
                    let (ci, co) = (if i == 0 { cin } else { hidden }, if i + 1 == layers { 1 } else { hidden });
                    let gain = if i + 1 == layers { 0.0 } else { 1.0 };
                    let n = format!("layer{i}");
                    if i < ups {
                        HeadLayer::Up(ConvTranspose2x2::new(pb, &n, ci, co, gain))
                    } else {
                        HeadLayer::Same(Conv2d::new(pb, &n, ci, co, 3, 1, gain))
                    }
                })
                .collect();
            Self { layers, factor }
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var) -> Result<Var> {
        let mut h = features;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.silu(h);
            }
            h = match layer {
                HeadLayer::Up(l) => l.forward(tape, h)?,
                HeadLayer::Same(l) => l.forward(tape, h)?,
            };
        }
        Ok(h)
    }
}

struct Level {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    resample: Option<Conv2d>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserVars {
    pub eps: Var,
    pub mask_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput<T: Real = f32> {
    pub eps_hat: Tensor4<T>,
    pub mask_logits: Option<Tensor4<T>>,
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    style: Option<ParamId>,
    down: Vec<Level>,
    mid: (ResBlock, AttnBlock),
    up: Vec<Level>,
    conv_out: Conv2d,
    mask_head: Option<MaskHead>,
}

impl Denoiser {
    /// Build the network, registering its parameters in `store`.
    pub fn new<T: Real>(cfg: &DenoiserConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let pb = &mut pb;
        let (base, emb) = (cfg.base_channels, cfg.emb_dim);
        let n_levels = cfg.channel_mults.len();
        let conv_in = Conv2d::new(pb, "conv_in", cfg.input_channels(), base, 3, 1, 1.0);
        let time1 = Linear::new(pb, "time1", base, emb, 1.0);
        let time2 = Linear::new(pb, "time2", emb, emb, 1.0);
        let style = (cfg.num_styles > 0).then(|| pb.param("style", [cfg.num_styles, emb, 1, 1], crate::nn::Init::Normal { std: 1.0 }));

        let mut down = Vec::new();
        let mut ch = base;
        for l in 0..n_levels {
            let co = cfg.level_channels(l);
            let attn = cfg.attention_levels.contains(&l);
            let level = pb.scoped(&format!("down{l}"), |pb| {
                let blocks = (0..cfg.num_res_blocks)
                    .map(|b| {
                        let rb = ResBlock::new(pb, &format!("res{b}"), if b == 0 { ch } else { co }, co, emb);
                        (rb, attn.then(|| AttnBlock::new(pb, &format!("attn{b}"), co)))
                    })
                    .collect();
                let resample = (l + 1 < n_levels).then(|| Conv2d::new(pb, "downsample", co, co, 3, 2, 1.0));
                Level { blocks, resample }
            });
            ch = co;
            down.push(level);
        }
        let mid = pb.scoped("mid", |pb| (ResBlock::new(pb, "res", ch, ch, emb), AttnBlock::new(pb, "attn", ch)));
        let mut up = Vec::new();
        for l in (0..n_levels).rev() {
            let co = cfg.level_channels(l);
            let attn = cfg.attention_levels.contains(&l);
            let level = pb.scoped(&format!("up{l}"), |pb| {
                let blocks = (0..cfg.num_res_blocks)
                    .map(|b| {
                        let ci = if b == 0 { ch + co } else { co };
                        let rb = ResBlock::new(pb, &format!("res{b}"), ci, co, emb);
                        (rb, attn.then(|| AttnBlock::new(pb, &format!("attn{b}"), co)))
                    })
                    .collect();
                let next = if l > 0 { cfg.level_channels(l - 1) } else { co };
                let resample = (l > 0).then(|| Conv2d::new(pb, "upsample", co, next, 3, 1, 1.0));
                Level { blocks, resample }
            });
            ch = if l > 0 { cfg.level_channels(l - 1) } else { co };
            up.push(level);
        }
        let conv_out = Conv2d::new(pb, "conv_out", base, cfg.latent_channels, 3, 1, 0.0);
        let mask_head = cfg
            .mask_head
            .then(|| MaskHead::new(pb, "mask_head", base, cfg.mask_hidden, cfg.mask_layers, cfg.mask_upsample));
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            time1,
            time2,
            style,
            down,
            mid,
            up,
            conv_out,
            mask_head,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Record a forward pass on `tape`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, xt: Var, t: &[usize], cond: Var, style: &[usize]) -> Result<DenoiserVars> {
        let cfg = &self.cfg;
        let [b, c, h, w] = tape.value(xt).shape();
        if c != cfg.latent_channels {
            return Err(Error::shape(&[b, cfg.latent_channels, h, w], &[b, c, h, w]));
        }
        tape.value(cond).ensure_shape([b, cfg.cond_channels, h, w])?;
        let m = cfg.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!("spatial size {h}x{w} must be divisible by {m}")));
        }
        if t.len() != b || (self.style.is_some() && style.len() != b) {
            return Err(Error::shape(&[b], &[t.len(), style.len()]));
        }

        let temb = tape.leaf(timestep_embedding(t, cfg.base_channels));
        let e = self.time1.forward(tape, temb)?;
        let e = tape.silu(e);
        let mut e = self.time2.forward(tape, e)?;
        if let Some(table) = self.style {
            let s = tape.embed(table, style)?;
            e = tape.add(e, s)?;
        }
        let emb = tape.silu(e);

        let x = tape.concat(xt, cond)?;
        let mut h = self.conv_in.forward(tape, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            for (rb, attn) in &level.blocks {
                h = rb.forward(tape, h, emb)?;
                if let Some(a) = attn {
                    h = a.forward(tape, h)?;
                }
            }
            skips.push(h);
            if let Some(ds) = &level.resample {
                h = ds.forward(tape, h)?;
            }
        }
        h = self.mid.0.forward(tape, h, emb)?;
        h = self.mid.1.forward(tape, h)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip)?;
            for (rb, attn) in &level.blocks {
                h = rb.forward(tape, h, emb)?;
                if let Some(a) = attn {
                    h = a.forward(tape, h)?;
                }
            }
            if let Some(us) = &level.resample {
                h = tape.upsample2(h);
                h = us.forward(tape, h)?;
            }
        }
        let out = tape.silu(h);
        let eps = self.conv_out.forward(tape, out)?;
        let mask_logits = match &self.mask_head {
            Some(head) => Some(head.forward(tape, h)?),
            None => None,
        };
        Ok(DenoiserVars { eps, mask_logits })
    }

    /// Inference forward pass returning plain tensors.
    pub fn predict<T: Real>(
        &self,
        params: &ParamStore<T>,
        xt: &Tensor4<T>,
        t: &[usize],
        cond: &Tensor4<T>,
        style: &[usize],
        exec: ExecMode,
    ) -> Result<DenoiserOutput<T>> {
        let mut tape = Tape::new(params, exec);
        let x = tape.leaf(xt.clone());
        let c = tape.leaf(cond.clone());
        let vars = self.forward(&mut tape, x, t, c, style)?;
        Ok(DenoiserOutput {
            eps_hat: tape.value(vars.eps).clone(),
            mask_logits: vars.mask_logits.map(|m| tape.value(m).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            emb_dim: 16,
            num_styles: 4,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = DenoiserConfig {
            latent_channels: 4,
            mask_upsample: 8,
            ..small()
        };
        let mut store = ParamStore::<f32>::new();
        let net = Denoiser::new(&cfg, &mut store, 0).unwrap();
        let x = Tensor4::full([2, 4, 16, 16], 0.1);
        let cond = Tensor4::zeros([2, 11, 16, 16]);
        let out = net.predict(&store, &x, &[5, 9], &cond, &[0, 3], ExecMode::Sequential).unwrap();
        assert_eq!(out.eps_hat.shape(), [2, 4, 16, 16]);
        assert_eq!(out.mask_logits.unwrap().shape(), [2, 1, 128, 128]);
    }

    #[test]
    fn rejects_wrong_condition_channels() {
        let mut store = ParamStore::<f32>::new();
        let net = Denoiser::new(&small(), &mut store, 0).unwrap();
        let x = Tensor4::zeros([1, 3, 8, 8]);
        let cond = Tensor4::zeros([1, 10, 8, 8]);
        assert!(matches!(
            net.predict(&store, &x, &[1], &cond, &[0], ExecMode::Sequential),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let mut store = ParamStore::<f32>::new();
        let net = Denoiser::new(&small(), &mut store, 3).unwrap();
        // make the zero-initialized output layers non-trivial
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).data().iter().all(|&v| v == 0.0) {
                let n = store.get(id).len();
                *store.get_mut(id) = Tensor4::from_fn(store.get(id).shape(), |[a, b, c, d]| ((a * 7 + b * 3 + c + d) % 5) as f32 * 0.01 - 0.02);
                assert_eq!(store.get(id).len(), n);
            }
        }
        let x = Tensor4::from_fn([3, 3, 8, 8], |[b, c, y, x]| ((b + c * 2 + y * 3 + x) % 7) as f32 / 7.0);
        let cond = Tensor4::from_fn([3, 11, 8, 8], |[_, c, y, x]| ((c + y * x) % 3) as f32 / 3.0);
        let a = net.predict(&store, &x, &[1, 2, 3], &cond, &[0, 1, 2], ExecMode::Sequential).unwrap();
        let b = net.predict(&store, &x, &[1, 2, 3], &cond, &[0, 1, 2], ExecMode::Parallel).unwrap();
        assert_eq!(a.eps_hat, b.eps_hat);
        assert_eq!(a.mask_logits, b.mask_logits);
    }

    #[test]
    fn zero_condition_is_valid_and_fresh_mask_head_is_neutral() {
        let mut store = ParamStore::<f32>::new();
        let net = Denoiser::new(&small(), &mut store, 1).unwrap();
        let x = Tensor4::full([1, 3, 8, 8], 0.3);
        let out = net
            .predict(&store, &x, &[10], &Tensor4::zeros([1, 11, 8, 8]), &[2], ExecMode::Sequential)
            .unwrap();
        assert!(out.eps_hat.is_finite());
        assert!(out.mask_logits.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let count = |seed| {
            let mut store = ParamStore::<f32>::new();
            Denoiser::new(&DenoiserConfig::default(), &mut store, seed).unwrap();
            store.num_scalars()
        };
        assert_eq!(count(0), count(99));
        // frozen value for the default configuration
        assert_eq!(count(0), 779_172);
    }

    #[test]
    fn mask_head_upsamples_by_sixteen() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::stream(0, Domain::Init, 0);
        let head = MaskHead::new(&mut ParamBuilder::new(&mut store, &mut r), "head", 5, 6, 4, 16);
        for (h, w) in [(1, 1), (4, 4), (3, 5)] {
            let mut tape = Tape::new(&store, ExecMode::Sequential);
            let x = tape.leaf(Tensor4::full([2, 5, h, w], 0.5));
            let y = head.forward(&mut tape, x).unwrap();
            assert_eq!(tape.value(y).shape(), [2, 1, 16 * h, 16 * w]);
            assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mask_head_gradient_matches_central_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(4, Domain::Init, 0);
        let head = MaskHead::new(&mut ParamBuilder::new(&mut store, &mut r), "head", 2, 3, 4, 16);
        // randomize the zero-initialized final layer
        let last = store.ids().last().unwrap();
        let w_last = store.ids().nth(store.len() - 2).unwrap();
        for id in [last, w_last] {
            *store.get_mut(id) = Tensor4::from_fn(store.get(id).shape(), |[a, b, c, d]| 0.1 * ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 0.3);
        }
        let input = Tensor4::from_fn([1, 2, 4, 4], |[_, c, y, x]| ((c * 16 + y * 4 + x) as f64 * 0.37).sin());
        let loss = |store: &ParamStore<f64>, input: &Tensor4<f64>| -> (f64, Option<Tensor4<f64>>, Option<crate::nn::Grads<f64>>) {
            let mut tape = Tape::new(store, ExecMode::Sequential);
            let x = tape.leaf(input.clone());
            let y = head.forward(&mut tape, x).unwrap();
            let yv = tape.value(y).clone();
            // L = ½ Σ (sigmoid(y) − target)²
            let target = Tensor4::from_fn(yv.shape(), |[_, _, y, x]| ((y / 8 + x / 8) % 2) as f64);
            let mut l = 0.0;
            let g = Tensor4::from_fn(yv.shape(), |i| {
                let s = 1.0 / (1.0 + (-yv[i]).exp());
                let r = s - target[i];
                l += 0.5 * r * r;
                r * s * (1.0 - s)
            });
            let back = tape.backward(&[(y, &g)]).unwrap();
            (l, back.of(x).cloned(), Some(back.params))
        };
        let (_, dx, dp) = loss(&store, &input);
        let (dx, dp) = (dx.unwrap(), dp.unwrap());
        let h = 1e-5;
        let check = |num: f64, ana: f64, what: &str| {
            assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{what}: numeric {num} analytic {ana}");
        };
        for i in 0..input.len() {
            let (mut p, mut m) = (input.clone(), input.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (loss(&store, &p).0 - loss(&store, &m).0) / (2.0 * h);
            check(num, dx.data()[i], &format!("input[{i}]"));
        }
        for id in store.ids() {
            for i in (0..store.get(id).len()).step_by(3) {
                let (mut p, mut m) = (store.clone(), store.clone());
                p.get_mut(id).data_mut()[i] += h;
                m.get_mut(id).data_mut()[i] -= h;
                let num = (loss(&p, &input).0 - loss(&m, &input).0) / (2.0 * h);
                check(num, dp.get(id).data()[i], store.name(id));
            }
        }
    }
}
