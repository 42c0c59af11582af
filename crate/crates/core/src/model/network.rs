use super::config::{ModelConfig, Variant, DOWNSAMPLE, TRANSFORMER_ONLY_MAX_PATCH};
use super::params::{join, ParamKind, Visit};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    flatten_tokens, relu_backward, relu_inplace, unflatten_tokens, AttentionCache, BatchNorm2d, BatchNormCache, Conv2d,
    ConvProjection, ConvTranspose2d, MultiHeadAttention, PointwiseConv,
};
use crate::rng::derive;
use crate::tensor::{softmax, Real, Tensor};

/// Number of input polarization channels (HH, HV).
pub const INPUT_CHANNELS: usize = 2;

fn add_into<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a = *a + *b;
    }
}

fn finite<T: Real>(t: Tensor<T>, location: impl FnOnce() -> String) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NumericFault { location: location() })
    }
}

/// Spatial layers that can sit in front of a batch-norm and ReLU.
pub trait Spatial<T: Real>: Visit<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn apply_backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Spatial<T> for Conv2d<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
    fn apply_backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward(x, dy)
    }
}

impl<T: Real> Spatial<T> for ConvTranspose2d<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
    fn apply_backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward(x, dy)
    }
}

/// `layer → batch-norm → ReLU`
#[derive(Clone, Debug, PartialEq)]
pub struct Unit<T: Real, L> {
    pub conv: L,
    pub bn: BatchNorm2d<T>,
}

pub type DownUnit<T> = Unit<T, Conv2d<T>>;
pub type UpUnit<T> = Unit<T, ConvTranspose2d<T>>;

#[derive(Clone, Debug)]
pub struct UnitCache<T: Real> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    out: Tensor<T>,
}

impl<T: Real, L: Spatial<T>> Unit<T, L> {
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.bn.infer(&self.conv.apply(x)?)?;
        relu_inplace(&mut y);
        Ok(y)
    }

    fn forward_train(&mut self, input: Tensor<T>) -> Result<UnitCache<T>> {
        let z = self.conv.apply(&input)?;
        let (mut out, bn) = self.bn.forward_train(&z)?;
        relu_inplace(&mut out);
        Ok(UnitCache { input, bn, out })
    }

    /// Smallest |batch-norm output| entering the ReLU.
    fn relu_margin(&self, cache: &UnitCache<T>) -> f64 {
        let shape = cache.bn.shape();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let (g, b) = (self.bn.scale.data(), self.bn.shift.data());
        cache.bn.xhat().chunks(plane).enumerate().fold(f64::INFINITY, |m, (i, xs)| {
            let ch = i % c;
            xs.iter().fold(m, |m, x| m.min((g[ch] * *x + b[ch]).f64().abs()))
        })
    }

    fn backward(&mut self, cache: &UnitCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = relu_backward(&cache.out, dy)?;
        let d = self.bn.backward(&cache.bn, &d)?;
        self.conv.apply_backward(&cache.input, &d)
    }
}

impl<T: Real, L: Visit<T>> Visit<T> for Unit<T, L> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// One repetition of the core:
/// `y = f + unflatten(mha(proj(f)))`, `z = y + pointwise(bn(y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock<T: Real> {
    pub projection: ConvProjection<T>,
    pub attention: MultiHeadAttention<T>,
    pub norm: BatchNorm2d<T>,
    pub pointwise: PointwiseConv<T>,
}

super::params::visit_fields!(TransformerBlock; params: []; buffers: []; children: [projection, attention, norm, pointwise]);

#[derive(Clone, Debug)]
pub struct BlockCache<T: Real> {
    input: Tensor<T>,
    attention: AttentionCache<T>,
    norm: BatchNormCache<T>,
    normed: Tensor<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_model();
        Ok(Self {
            projection: ConvProjection::new(d, derive(seed, 1))?,
            attention: MultiHeadAttention::new(cfg.attention(), derive(seed, 2))?,
            norm: BatchNorm2d::new(d, cfg.bn_momentum, cfg.bn_eps)?,
            pointwise: PointwiseConv::new(d, d, derive(seed, 3))?,
        })
    }

    /// Zeroes the maps that feed the two residual additions, making the block the identity.
    pub fn zero_residual_maps(&mut self) {
        for t in [&mut self.attention.output.weight, &mut self.attention.output.bias, &mut self.pointwise.weight, &mut self.pointwise.bias] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn infer(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = f.dims4()?;
        let a = self.attention.infer(&self.projection.forward(f)?)?;
        let mut y = unflatten_tokens(&a, h, w)?;
        add_into(&mut y, f);
        let p = self.pointwise.forward(&self.norm.infer(&y)?)?;
        add_into(&mut y, &p);
        Ok(y)
    }

    fn forward_train(&mut self, input: Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (_, _, h, w) = input.dims4()?;
        let (a, attention) = self.attention.forward_train(&self.projection.forward(&input)?)?;
        let mut y = unflatten_tokens(&a, h, w)?;
        add_into(&mut y, &input);
        let (normed, norm) = self.norm.forward_train(&y)?;
        add_into(&mut y, &self.pointwise.forward(&normed)?);
        Ok((y, BlockCache { input, attention, norm, normed }))
    }

    fn backward(&mut self, cache: &BlockCache<T>, dz: &Tensor<T>) -> Result<Tensor<T>> {
        let dnormed = self.pointwise.backward(&cache.normed, dz)?;
        let mut dy = self.norm.backward(&cache.norm, &dnormed)?;
        add_into(&mut dy, dz);
        let dt = self.attention.backward(&cache.attention, &flatten_tokens(&dy)?)?;
        let mut df = self.projection.backward(&cache.input, &dt)?;
        add_into(&mut df, &dy);
        Ok(df)
    }
}

/// Final map to class logits.
#[derive(Clone, Debug, PartialEq)]
pub enum Head<T: Real> {
    /// 7×7 convolution after the upsampling block.
    Conv(Conv2d<T>),
    /// Pointwise map used by the full-resolution transformer variant.
    Pointwise(PointwiseConv<T>),
}

impl<T: Real> Head<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Head::Conv(c) => c.forward(x),
            Head::Pointwise(p) => p.forward(x),
        }
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Head::Conv(c) => c.backward(x, dy),
            Head::Pointwise(p) => p.backward(x, dy),
        }
    }
}

impl<T: Real> Visit<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        match self {
            Head::Conv(c) => c.visit(prefix, f),
            Head::Pointwise(p) => p.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        match self {
            Head::Conv(c) => c.visit_mut(prefix, f),
            Head::Pointwise(p) => p.visit_mut(prefix, f),
        }
    }
}

/// Everything the backward pass needs from a train-mode forward.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real> {
    down: Vec<UnitCache<T>>,
    entry_input: Option<Tensor<T>>,
    core: Vec<BlockCache<T>>,
    up: Vec<UnitCache<T>>,
    head_input: Tensor<T>,
}

/// Per-pixel class indices, `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl ClassMap {
    /// Argmax over the channel axis of `[N, C, H, W]`; ties go to the lowest class index.
    pub fn argmax<T: Real>(scores: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = scores.dims4()?;
        let hw = h * w;
        let mut data = vec![0u8; n * hw];
        for b in 0..n {
            let s = &scores.data()[b * c * hw..(b + 1) * c * hw];
            for (p, out) in data[b * hw..(b + 1) * hw].iter_mut().enumerate() {
                let mut best = 0;
                for k in 1..c {
                    if s[k * hw + p] > s[best * hw + p] {
                        best = k;
                    }
                }
                *out = best as u8;
            }
        }
        Ok(Self { shape: [n, h, w], data })
    }
}

/// Channel-softmax probabilities with their argmax labels.
#[derive(Clone, Debug)]
pub struct Prediction<T: Real> {
    /// `[N, C, H, W]`, summing to one over `C`.
    pub probs: Tensor<T>,
    pub classes: ClassMap,
}

/// The segmentation network in one of its three variants.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTr<T: Real> {
    pub config: ModelConfig,
    pub down: Vec<DownUnit<T>>,
    pub entry: Option<PointwiseConv<T>>,
    pub core: Vec<TransformerBlock<T>>,
    pub up: Vec<UpUnit<T>>,
    pub head: Head<T>,
}

impl<T: Real> Visit<T> for ConvTr<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.down.visit(&join(prefix, "down"), f);
        self.entry.visit(&join(prefix, "entry"), f);
        self.core.visit(&join(prefix, "core"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.entry.visit_mut(&join(prefix, "entry"), f);
        self.core.visit_mut(&join(prefix, "core"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl<T: Real> ConvTr<T> {
    /// Builds and initializes the network; initialization is a pure function of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::Precision(format!(
                "config asks for {} precision but the model is built in {}",
                config.precision,
                T::PRECISION
            )));
        }
        let [w0, w1, w2, w3] = config.widths;
        let (m, e) = (config.bn_momentum, config.bn_eps);
        let bn = |c| BatchNorm2d::new(c, m, e);
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut entry = None;
        let head;
        if config.variant.has_sampling() {
            let spec = [(INPUT_CHANNELS, w0, 7, 1, 3), (w0, w1, 3, 2, 1), (w1, w2, 3, 2, 1), (w2, w3, 3, 2, 1)];
            for (i, (cin, cout, k, s, p)) in spec.into_iter().enumerate() {
                down.push(Unit { conv: Conv2d::new(cin, cout, k, s, p, derive(seed, 100 + i as u64))?, bn: bn(cout)? });
            }
            for (i, (cin, cout)) in [(w3, w3), (w3, w2), (w2, w1)].into_iter().enumerate() {
                let tconv = ConvTranspose2d::new(cin, cout, 3, 2, 1, 1, derive(seed, 300 + i as u64))?;
                up.push(Unit { conv: tconv, bn: bn(cout)? });
            }
            head = Head::Conv(Conv2d::new(w1, config.classes, 7, 1, 3, derive(seed, 500))?);
        } else {
            entry = Some(PointwiseConv::new(INPUT_CHANNELS, w3, derive(seed, 400))?);
            head = Head::Pointwise(PointwiseConv::new(w3, config.classes, derive(seed, 500))?);
        }
        let mut core = Vec::new();
        if config.variant.has_core() {
            for i in 0..config.depth {
                core.push(TransformerBlock::new(config, derive(seed, 200 + i as u64))?);
            }
        }
        Ok(Self { config: config.clone(), down, entry, core, up, head })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Rejects inputs the variant cannot process.
    pub fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != INPUT_CHANNELS {
            return shape_err(format!("model input needs {INPUT_CHANNELS} channels, got {c}"));
        }
        if self.config.variant.has_sampling() && (h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0) {
            return shape_err(format!("input {h}x{w} is not divisible by {DOWNSAMPLE}"));
        }
        if self.config.variant == Variant::TransformerOnly && (h > TRANSFORMER_ONLY_MAX_PATCH || w > TRANSFORMER_ONLY_MAX_PATCH) {
            return Err(Error::Config(format!(
                "variant transformer_only is limited to inputs of at most {TRANSFORMER_ONLY_MAX_PATCH}x{TRANSFORMER_ONLY_MAX_PATCH} pixels \
                 (attention memory overflow); got {h}x{w}"
            )));
        }
        Ok((n, h, w))
    }

    /// `[N, 2, P, P] → [N, w3, P/8, P/8]` with running statistics.
    pub fn downsample(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = x.clone();
        for (i, unit) in self.down.iter().enumerate() {
            f = finite(unit.infer(&f)?, || format!("down.{i}"))?;
        }
        Ok(f)
    }

    /// Shape-preserving pass through every transformer block.
    pub fn transform(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = f.clone();
        for (i, block) in self.core.iter().enumerate() {
            f = finite(block.infer(&f)?, || format!("core.{i}"))?;
        }
        Ok(f)
    }

    /// `[N, w3, H, W] → [N, C, 8H, 8W]` raw logits.
    pub fn upsample(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = f.clone();
        for (i, unit) in self.up.iter().enumerate() {
            f = finite(unit.infer(&f)?, || format!("up.{i}"))?;
        }
        finite(self.head.forward(&f)?, || "head".into())
    }

    /// Eval-mode logits `[N, C, H, W]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut f = self.downsample(x)?;
        if let Some(entry) = &self.entry {
            f = finite(entry.forward(&f)?, || "entry".into())?;
        }
        self.upsample(&self.transform(&f)?)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        let probs = softmax(&self.forward(x)?, 1)?;
        let classes = ClassMap::argmax(&probs)?;
        Ok(Prediction { probs, classes })
    }

    /// Train-mode forward: batch statistics, running-statistic updates, and a cache for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut f = x.clone();
        let mut down = Vec::with_capacity(self.down.len());
        for (i, unit) in self.down.iter_mut().enumerate() {
            let cache = unit.forward_train(f)?;
            f = finite(cache.out.clone(), || format!("down.{i}"))?;
            down.push(cache);
        }
        let mut entry_input = None;
        if let Some(entry) = &self.entry {
            let y = finite(entry.forward(&f)?, || "entry".into())?;
            entry_input = Some(std::mem::replace(&mut f, y));
        }
        let mut core = Vec::with_capacity(self.core.len());
        for (i, block) in self.core.iter_mut().enumerate() {
            let (y, cache) = block.forward_train(f)?;
            f = finite(y, || format!("core.{i}"))?;
            core.push(cache);
        }
        let mut up = Vec::with_capacity(self.up.len());
        for (i, unit) in self.up.iter_mut().enumerate() {
            let cache = unit.forward_train(f)?;
            f = finite(cache.out.clone(), || format!("up.{i}"))?;
            up.push(cache);
        }
        let logits = finite(self.head.forward(&f)?, || "head".into())?;
        Ok((logits, ForwardCache { down, entry_input, core, up, head_input: f }))
    }

    /// Distance of the closest ReLU input to its kink in a train-mode forward.
    pub fn relu_margin(&self, cache: &ForwardCache<T>) -> f64 {
        let down = self.down.iter().zip(&cache.down).map(|(u, c)| u.relu_margin(c));
        down.chain(self.up.iter().zip(&cache.up).map(|(u, c)| u.relu_margin(c))).fold(f64::INFINITY, f64::min)
    }

    /// Accumulates parameter gradients for upstream `dlogits` and returns the input gradient.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = self.head.backward(&cache.head_input, dlogits)?;
        for (unit, c) in self.up.iter_mut().zip(&cache.up).rev() {
            d = unit.backward(c, &d)?;
        }
        for (block, c) in self.core.iter_mut().zip(&cache.core).rev() {
            d = block.backward(c, &d)?;
        }
        if let (Some(entry), Some(x)) = (&mut self.entry, &cache.entry_input) {
            d = entry.backward(x, &d)?;
        }
        for (unit, c) in self.down.iter_mut().zip(&cache.down).rev() {
            d = unit.backward(c, &d)?;
        }
        Ok(d)
    }

    /// Names of all tensors in visiting order.
    pub fn names(&self) -> Vec<(String, ParamKind)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, _| out.push((name.to_string(), kind)));
        out
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                n += t.len()
            }
        });
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, _, t| t.clear_grad());
    }

    /// Euclidean norm of each trainable tensor's gradient (zero when absent).
    pub fn grad_norms(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, t| {
            if kind == ParamKind::Trainable {
                let norm = t.grad().map_or(0.0, |g| g.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt());
                out.push((name.to_string(), norm));
            }
        });
        out
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> Result<ConvTr<U>> {
        let mut cfg = self.config.clone();
        cfg.precision = U::PRECISION;
        let mut out = ConvTr::<U>::new(&cfg, 0)?;
        let mut src = Vec::new();
        self.visit("", &mut |_, _, t| src.push(t.cast::<U>()));
        let mut it = src.into_iter();
        out.visit_mut("", &mut |_, _, t| *t = it.next().expect("same structure"));
        Ok(out)
    }
}
