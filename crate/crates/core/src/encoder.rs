//! Wide residual embedding network and the linear student head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Total conv depth; `(depth - 4)` must be divisible by 6.
    pub depth: usize,
    pub width_factor: usize,
    pub dropout_rate: f64,
    pub embed_dim: usize,
    /// Square input side length.
    pub input_size: usize,
    /// 3 for colour images, 1 for pseudo-images.
    pub in_channels: usize,
    /// Groups of the per-sample normalisation layers; must divide 16.
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale network: trains in seconds per epoch on one CPU core.
    fn default() -> Self {
        EncoderConfig {
            depth: 10,
            width_factor: 1,
            dropout_rate: 0.3,
            embed_dim: 64,
            input_size: 32,
            in_channels: 3,
            norm_groups: 4,
        }
    }
}

impl EncoderConfig {
    /// WRN-28-2 on 128x128 inputs with a 128-d projection.
    pub fn full_scale() -> Self {
        EncoderConfig {
            depth: 28,
            width_factor: 2,
            embed_dim: 128,
            input_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.depth < 10 || !(self.depth - 4).is_multiple_of(6) {
            return fail(format!(
                "depth {} must satisfy (depth - 4) % 6 == 0, depth >= 10",
                self.depth
            ));
        }
        if self.width_factor == 0 {
            return fail("width_factor must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.embed_dim < 2 {
            return fail("embed_dim must be >= 2".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return fail(format!(
                "input_size {} must be a positive multiple of 4",
                self.input_size
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.norm_groups == 0 || 16 % self.norm_groups != 0 {
            return fail(format!("norm_groups {} must divide 16", self.norm_groups));
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 4) / 6
    }

    /// Channel widths of the stem and the three residual stages.
    pub fn widths(&self) -> [usize; 4] {
        let k = self.width_factor;
        [16, 16 * k, 32 * k, 64 * k]
    }
}

/// Named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect()
    }

    /// Registers every parameter as a constant of `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect()
    }

    /// Replaces values with same-named, same-shaped tensors from `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(other) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Fan-in scaled normal init for a conv kernel `[cout, cin, k, k]`.
fn conv_init<T: Real>(cout: usize, cin: usize, k: usize, rng: &mut Rng) -> Tensor<T> {
    let fan_in = (cin * k * k) as f64;
    normal_tensor(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), rng)
}

#[derive(Debug, Clone, Copy)]
struct NormSlots {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct Block {
    stride: usize,
    norm1: NormSlots,
    conv1: usize,
    norm2: NormSlots,
    conv2: usize,
    shortcut: Option<usize>,
}

/// Pre-activation wide residual network followed by a linear projection.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamStore<T>,
    stem: usize,
    blocks: Vec<Block>,
    final_norm: NormSlots,
    proj_w: usize,
    proj_b: usize,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let widths = config.widths();
        let norm = |params: &mut ParamStore<T>, name: &str, ch: usize| NormSlots {
            gamma: params.push(format!("{name}.gamma"), Tensor::full(&[ch], T::one())),
            beta: params.push(format!("{name}.beta"), Tensor::zeros(&[ch])),
        };
        let stem = params.push(
            "stem.conv",
            conv_init(widths[0], config.in_channels, 3, rng),
        );
        let mut blocks = Vec::new();
        let mut in_ch = widths[0];
        for stage in 0..3 {
            let out_ch = widths[stage + 1];
            for b in 0..config.blocks_per_stage() {
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                let prefix = format!("stage{stage}.block{b}");
                let norm1 = norm(&mut params, &format!("{prefix}.norm1"), in_ch);
                let conv1 =
                    params.push(format!("{prefix}.conv1"), conv_init(out_ch, in_ch, 3, rng));
                let norm2 = norm(&mut params, &format!("{prefix}.norm2"), out_ch);
                let conv2 =
                    params.push(format!("{prefix}.conv2"), conv_init(out_ch, out_ch, 3, rng));
                let shortcut = (in_ch != out_ch).then(|| {
                    params.push(
                        format!("{prefix}.shortcut"),
                        conv_init(out_ch, in_ch, 1, rng),
                    )
                });
                blocks.push(Block {
                    stride,
                    norm1,
                    conv1,
                    norm2,
                    conv2,
                    shortcut,
                });
                in_ch = out_ch;
            }
        }
        let final_norm = norm(&mut params, "final.norm", in_ch);
        let proj_w = params.push(
            "proj.weight",
            normal_tensor(&[config.embed_dim, in_ch], (1.0 / in_ch as f64).sqrt(), rng),
        );
        let proj_b = params.push("proj.bias", Tensor::zeros(&[config.embed_dim]));
        Ok(Encoder {
            config,
            params,
            stem,
            blocks,
            final_norm,
            proj_w,
            proj_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            [_, ch, h, w] if *ch == c.in_channels && *h == c.input_size && *w == c.input_size => {
                Ok(())
            }
            _ => Err(Error::shape(
                "embed",
                format!(
                    "expected [B, {}, {s}, {s}], got {shape:?}",
                    c.in_channels,
                    s = c.input_size
                ),
            )),
        }
    }

    /// Records the forward pass on `g`. `bound` are this encoder's parameters
    /// as registered by [`ParamStore::bind`] (or `bind_frozen`).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let groups = self.config.norm_groups;
        let norm = |g: &mut Graph<T>, x: Var, n: NormSlots| {
            g.group_norm(x, bound[n.gamma], bound[n.beta], groups)
        };
        let mut h = g.conv2d(x, bound[self.stem], 1, 1)?;
        for block in &self.blocks {
            let o = norm(g, h, block.norm1)?;
            let o = g.relu(o)?;
            let mut y = g.conv2d(o, bound[block.conv1], block.stride, 1)?;
            y = norm(g, y, block.norm2)?;
            y = g.relu(y)?;
            y = g.dropout(y, self.config.dropout_rate, mode, rng)?;
            y = g.conv2d(y, bound[block.conv2], 1, 1)?;
            let skip = match block.shortcut {
                Some(k) => g.conv2d(o, bound[k], block.stride, 0)?,
                None => h,
            };
            h = g.add(y, skip)?;
        }
        let h = norm(g, h, self.final_norm)?;
        let h = g.relu(h)?;
        let h = g.mean_pool(h)?;
        g.linear(h, bound[self.proj_w], Some(bound[self.proj_b]))
    }

    /// Eval-mode embeddings, computed in chunks without recording gradients.
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        const CHUNK: usize = 64;
        self.check_input(batch.shape())?;
        let n = batch.shape()[0];
        let per = batch.numel() / n;
        let mut out = Vec::with_capacity(n * self.config.embed_dim);
        let mut rng = Rng::new(0); // unused in eval mode
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, batch.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let bound = self.params.bind_frozen(&mut g);
            let x = g.constant(chunk);
            let e = self.forward(&mut g, &bound, x, Mode::Eval, &mut rng)?;
            out.extend_from_slice(g.value(e).data());
        }
        Tensor::new(&[n, self.config.embed_dim], out)
    }
}

/// Linear classifier on top of the embeddings (the distillation student).
#[derive(Debug, Clone)]
pub struct StudentHead<T> {
    params: ParamStore<T>,
}

impl<T: Real> StudentHead<T> {
    pub fn new(embed_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        params.push(
            "head.weight",
            normal_tensor(&[classes, embed_dim], (1.0 / embed_dim as f64).sqrt(), rng),
        );
        params.push("head.bias", Tensor::zeros(&[classes]));
        StudentHead { params }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (c, _) = weight.dims2("student_head")?;
        if bias.shape() != [c] {
            return Err(Error::shape(
                "student_head",
                format!("bias {:?} for {c} classes", bias.shape()),
            ));
        }
        let mut params = ParamStore::new();
        params.push("head.weight", weight);
        params.push("head.bias", bias);
        Ok(StudentHead { params })
    }

    pub fn classes(&self) -> usize {
        self.params.get(0).value.shape()[0]
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Raw logits `[B, C]`; `bound` as returned by binding [`Self::params`].
    pub fn logits(&self, g: &mut Graph<T>, bound: &[Var], embeddings: Var) -> Result<Var> {
        g.linear(embeddings, bound[0], Some(bound[1]))
    }

    pub fn logits_of(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let e = g.constant(embeddings.clone());
        let out = self.logits(&mut g, &bound, e)?;
        Ok(g.value(out).clone())
    }
}
