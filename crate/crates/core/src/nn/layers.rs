use crate::error::Result;
use crate::tensor::Real;

use super::params::{Init, ParamBuilder, ParamId};
use super::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Self {
        let fan_in = cin * k * k;
        let (w, b) = pb.scoped(name, |pb| {
            let w = if gain == 0.0 {
                pb.param("weight", [cout, cin, k, k], Init::Zeros)
            } else {
                pb.param("weight", [cout, cin, k, k], Init::Uniform { fan_in, gain })
            };
            (w, pb.param("bias", [cout, 1, 1, 1], Init::Zeros))
        });
        Self {
            w,
            b: Some(b),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

/// Dense layer over (B, C, 1, 1) vectors, implemented as a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Linear(Conv2d);

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, gain: f64) -> Self {
        Self(Conv2d::new(pb, name, cin, cout, 1, 1, gain))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.0.forward(tape, x)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, gain: f64) -> Self {
        pb.scoped(name, |pb| {
            let w = if gain == 0.0 {
                pb.param("weight", [cin, cout, 2, 2], Init::Zeros)
            } else {
                pb.param("weight", [cin, cout, 2, 2], Init::Uniform { fan_in: cin, gain })
            };
            Self {
                w,
                b: pb.param("bias", [cout, 1, 1, 1], Init::Zeros),
            }
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        tape.conv_transpose2x2(x, self.w, Some(self.b))
    }
}

/// Residual block whose first convolution output is modulated by the
/// conditioning embedding (`h·(1+scale)+shift`).
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    scale: Linear,
    shift: Linear,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, emb: usize) -> Self {
        pb.scoped(name, |pb| Self {
            conv1: Conv2d::new(pb, "conv1", cin, cout, 3, 1, 1.0),
            conv2: Conv2d::new(pb, "conv2", cout, cout, 3, 1, 0.2),
            scale: Linear::new(pb, "emb_scale", emb, cout, 0.2),
            shift: Linear::new(pb, "emb_shift", emb, cout, 0.2),
            skip: (cin != cout).then(|| Conv2d::new(pb, "skip", cin, cout, 1, 1, 1.0)),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, emb: Var) -> Result<Var> {
        let h = tape.silu(x);
        let h = self.conv1.forward(tape, h)?;
        let s = self.scale.forward(tape, emb)?;
        let t = self.shift.forward(tape, emb)?;
        let h = tape.film(h, s, t)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

/// Spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Self {
        pb.scoped(name, |pb| Self {
            q: Conv2d::new(pb, "q", c, c, 1, 1, 1.0),
            k: Conv2d::new(pb, "k", c, c, 1, 1, 1.0),
            v: Conv2d::new(pb, "v", c, c, 1, 1, 1.0),
            proj: Conv2d::new(pb, "proj", c, c, 1, 1, 0.2),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let a = tape.attention(q, k, v)?;
        let a = self.proj.forward(tape, a)?;
        tape.add(x, a)
    }
}
