//! Compact U-Net: VGG-like encoder stages of two 3x3 convolutions, dropout
//! after every block, nearest-upsample + conv decoder with skip
//! concatenation, and a 1x1 classifier. Forward and backward passes are
//! written out by hand.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::rng;
use crate::tensor::{
    conv_backward, conv_forward, maxpool2, maxpool2_backward, relu_backward_inplace, relu_inplace, softmax, upsample2,
    upsample2_backward, Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutKind {
    /// Independent mask per activation.
    Standard,
    /// One mask value per (sample, channel).
    Spatial,
}

/// Which blocks carry a dropout layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutPlacement {
    pub encoder: bool,
    pub bottleneck: bool,
    pub decoder: bool,
}

impl Default for DropoutPlacement {
    fn default() -> Self {
        DropoutPlacement {
            encoder: true,
            bottleneck: true,
            decoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Number of encoder stages including the bottleneck; the network pools
    /// `depth − 1` times.
    pub depth: usize,
    pub base_width: usize,
    pub in_bands: usize,
    pub classes: usize,
    pub dropout_rate_train: f64,
    pub dropout_kind: DropoutKind,
    #[serde(default)]
    pub dropout_placement: DropoutPlacement,
}

impl ArchSpec {
    /// Desk-scale default: depth 3, base width 8.
    pub fn desk() -> Self {
        ArchSpec {
            depth: 3,
            base_width: 8,
            in_bands: 4,
            classes: 3,
            dropout_rate_train: 0.15,
            dropout_kind: DropoutKind::Spatial,
            dropout_placement: DropoutPlacement::default(),
        }
    }

    /// Full-size network: six encoder widths 64 … 2048, 32x downsampling,
    /// 12 encoder convolutions. Not trainable on a desk CPU.
    pub fn paper_xl() -> Self {
        ArchSpec {
            depth: 6,
            base_width: 64,
            ..ArchSpec::desk()
        }
    }

    pub fn pools(&self) -> usize {
        self.depth - 1
    }

    /// Channel widths of the pooled stages followed by the bottleneck.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.pools()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth > 9 {
            return config_err("depth must be in 2..=9");
        }
        if self.base_width == 0 || self.in_bands == 0 || self.classes < 2 {
            return config_err("base_width and in_bands must be positive and classes >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout_rate_train) {
            return config_err("dropout_rate_train must lie in [0,1)");
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return dim_err(format!("input {}x{} is not divisible by the downsampling factor {}", h, w, f));
        }
        Ok(())
    }

    /// Layer table in parameter order.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let wd = self.widths();
        let mut v = Vec::new();
        let mut push = |name: String, cin: usize, cout: usize, k: usize| v.push((name, cin, cout, k));
        let mut cin = self.in_bands;
        let pools = self.pools();
        for (i, &w) in wd.iter().enumerate().take(pools) {
            push(format!("enc{i}.conv_a"), cin, w, 3);
            push(format!("enc{i}.conv_b"), w, w, 3);
            cin = w;
        }
        push("bottleneck.conv_a".into(), cin, wd[pools], 3);
        push("bottleneck.conv_b".into(), wd[pools], wd[pools], 3);
        for i in (0..pools).rev() {
            push(format!("dec{i}.up_conv"), wd[i + 1], wd[i], 3);
            push(format!("dec{i}.conv"), 2 * wd[i], wd[i], 3);
        }
        push("head".into(), wd[0], self.classes, 1);
        let mut offset = 0;
        v.into_iter()
            .map(|(name, cin, cout, k)| {
                let weight_offset = offset;
                offset += cout * cin * k * k;
                let bias_offset = offset;
                offset += cout;
                LayerShape {
                    name,
                    cin,
                    cout,
                    k,
                    weight_offset,
                    bias_offset,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|l| l.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// All kernels and biases in one flat buffer, laid out per `layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: ArchSpec,
    pub layers: Vec<LayerShape>,
    pub data: Vec<T>,
}

/// Gradient buffer with the same layout as [`NetworkParams::data`].
pub type ParamGrads<T> = Vec<T>;

impl<T: Real> NetworkParams<T> {
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layer_shapes();
        let n = layers.iter().map(|l| l.len()).sum();
        Ok(NetworkParams {
            arch: arch.clone(),
            layers,
            data: vec![T::zero(); n],
        })
    }

    pub fn weight(&self, l: usize) -> &[T] {
        let s = &self.layers[l];
        &self.data[s.weight_offset..s.weight_offset + s.weight_len()]
    }

    pub fn bias(&self, l: usize) -> &[T] {
        let s = &self.layers[l];
        &self.data[s.bias_offset..s.bias_offset + s.cout]
    }

    /// Layer name owning flat parameter index `i`.
    pub fn layer_of(&self, i: usize) -> Option<&str> {
        self.layers
            .iter()
            .find(|l| i >= l.weight_offset && i < l.bias_offset + l.cout)
            .map(|l| l.name.as_str())
    }

    pub fn check_finite(&self, values: &[T], what: &str) -> Result<()> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite {} in layer {} (index {})",
                what,
                self.layer_of(i).unwrap_or("?"),
                i
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// He-style initialization: kernels ~ N(0, 2/fan_in), biases zero. Each layer
/// draws from its own stream.
pub fn init_params<T: Real>(arch: &ArchSpec, seed: u64) -> Result<NetworkParams<T>> {
    let mut p = NetworkParams::zeros(arch)?;
    for (li, l) in p.layers.clone().iter().enumerate() {
        let std = (2.0 / l.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut r = rng::stream(seed, &[li as u64]);
        for v in &mut p.data[l.weight_offset..l.weight_offset + l.weight_len()] {
            *v = T::lit(normal.sample(&mut r));
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
    /// Dropout active at inference, no cache kept.
    Mc,
}

/// Per-sample multiplicative dropout mask: scale factors `0` or `1/(1-p)`,
/// one per channel (spatial) or per activation (standard).
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask<T> {
    pub per_channel: bool,
    pub scale: Vec<T>,
}

impl<T: Real> DropMask<T> {
    pub fn draw(kind: DropoutKind, c: usize, hw: usize, rate: f64, r: &mut impl Rng) -> Self {
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = match kind {
            DropoutKind::Spatial => c,
            DropoutKind::Standard => c * hw,
        };
        let scale = (0..n)
            .map(|_| if r.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        DropMask {
            per_channel: kind == DropoutKind::Spatial,
            scale,
        }
    }

    pub fn apply(&self, x: &mut Tensor<T>) {
        if self.per_channel {
            let hw = x.plane();
            for (c, &s) in self.scale.iter().enumerate() {
                x.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v *= s);
            }
        } else {
            x.data.iter_mut().zip(&self.scale).for_each(|(v, &s)| *v *= s);
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input_a: Tensor<T>,
    out_a: Tensor<T>,
    out_b: Tensor<T>,
    drop: Option<DropMask<T>>,
}

#[derive(Debug, Clone)]
struct DecoderCache<T> {
    up: Tensor<T>,
    cat: Tensor<T>,
    out: Tensor<T>,
    drop: Option<DropMask<T>>,
}

/// Activations, pooling indices and dropout masks of one training-mode
/// forward pass over a single sample.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoder: Vec<BlockCache<T>>,
    pool_idx: Vec<Vec<u32>>,
    bottleneck: BlockCache<T>,
    decoder: Vec<DecoderCache<T>>,
    head_input: Tensor<T>,
}

struct Ctx<'a, T: Real> {
    p: &'a NetworkParams<T>,
    rate: f64,
    rng: Option<rng::StreamRng>,
}

impl<T: Real> Ctx<'_, T> {
    fn conv(&self, l: usize, x: &Tensor<T>) -> Tensor<T> {
        let s = &self.p.layers[l];
        conv_forward(x, self.p.weight(l), self.p.bias(l), s.cout, s.k)
    }

    fn dropout(&mut self, x: &mut Tensor<T>, enabled: bool) -> Option<DropMask<T>> {
        let r = self.rng.as_mut()?;
        if !enabled || self.rate <= 0.0 {
            return None;
        }
        let m = DropMask::draw(self.p.arch.dropout_kind, x.c, x.plane(), self.rate, r);
        m.apply(x);
        Some(m)
    }

    fn block(&mut self, la: usize, x: Tensor<T>, drop: bool) -> (Tensor<T>, BlockCache<T>) {
        let mut a = self.conv(la, &x);
        relu_inplace(&mut a);
        let mut b = self.conv(la + 1, &a);
        relu_inplace(&mut b);
        let mut out = b.clone();
        let mask = self.dropout(&mut out, drop);
        (
            out,
            BlockCache {
                input_a: x,
                out_a: a,
                out_b: b,
                drop: mask,
            },
        )
    }
}

fn forward_one<T: Real>(p: &NetworkParams<T>, x: &Tensor<T>, mode: Mode, rate: f64, r: rng::StreamRng) -> (Tensor<T>, Option<ForwardCache<T>>) {
    let depth = p.arch.pools();
    let place = p.arch.dropout_placement;
    let mut ctx = Ctx {
        p,
        rate,
        rng: if mode == Mode::Eval { None } else { Some(r) },
    };
    let mut encoder = Vec::with_capacity(depth);
    let mut pool_idx = Vec::with_capacity(depth);
    let mut skips = Vec::with_capacity(depth);
    let mut cur = x.clone();
    for i in 0..depth {
        let (out, cache) = ctx.block(2 * i, cur, place.encoder);
        let (pooled, idx) = maxpool2(&out);
        skips.push(out);
        encoder.push(cache);
        pool_idx.push(idx);
        cur = pooled;
    }
    let (mut cur, bottleneck) = ctx.block(2 * depth, cur, place.bottleneck);
    let mut decoder = Vec::with_capacity(depth);
    for (j, i) in (0..depth).rev().enumerate() {
        let l = 2 * depth + 2 + 2 * j;
        let up = upsample2(&cur);
        let v = ctx.conv(l, &up);
        let skip = &skips[i];
        let mut cat = Tensor::zeros(v.c + skip.c, v.h, v.w);
        cat.data[..v.data.len()].copy_from_slice(&v.data);
        cat.data[v.data.len()..].copy_from_slice(&skip.data);
        let mut z = ctx.conv(l + 1, &cat);
        relu_inplace(&mut z);
        let mut out = z.clone();
        let mask = ctx.dropout(&mut out, place.decoder);
        decoder.push(DecoderCache { up, cat, out: z, drop: mask });
        cur = out;
    }
    let head = p.layers.len() - 1;
    let logits = ctx.conv(head, &cur);
    let cache = (mode == Mode::Train).then_some(ForwardCache {
        encoder,
        pool_idx,
        bottleneck,
        decoder,
        head_input: cur,
    });
    (logits, cache)
}

/// Forward pass over a batch. Sample `i` draws its dropout masks from stream
/// `(seed, i)`, so results do not depend on thread count. `Train` keeps a
/// cache per sample; `Eval` disables dropout.
pub fn forward<T: Real>(
    params: &NetworkParams<T>,
    batch: &[Tensor<T>],
    mode: Mode,
    dropout_rate: f64,
    seed: u64,
) -> Result<(Vec<Tensor<T>>, Option<Vec<ForwardCache<T>>>)> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return config_err("dropout rate must lie in [0,1)");
    }
    for x in batch {
        params.arch.check_input(x.h, x.w)?;
        if x.c != params.arch.in_bands {
            return dim_err(format!("input has {} bands, network expects {}", x.c, params.arch.in_bands));
        }
    }
    let results: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| forward_one(params, x, mode, dropout_rate, rng::stream(seed, &[i as u64])))
        .collect();
    let mut logits = Vec::with_capacity(results.len());
    let mut caches = Vec::with_capacity(results.len());
    for (l, c) in results {
        logits.push(l);
        if let Some(c) = c {
            caches.push(c);
        }
    }
    let caches = (mode == Mode::Train).then_some(caches);
    Ok((logits, caches))
}

/// Gradients of one sample: parameters (flat) and input.
#[derive(Debug, Clone)]
pub struct SampleGrads<T> {
    pub params: ParamGrads<T>,
    pub input: Tensor<T>,
}

fn backward_one<T: Real>(p: &NetworkParams<T>, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> SampleGrads<T> {
    let depth = p.arch.pools();
    let mut g = vec![T::zero(); p.data.len()];
    let conv_back = |l: usize, x: &Tensor<T>, gout: &Tensor<T>, g: &mut [T], need: bool| {
        let s = &p.layers[l];
        let (gw, rest) = g[s.weight_offset..].split_at_mut(s.weight_len());
        conv_backward(x, p.weight(l), gout, s.k, gw, &mut rest[..s.cout], need)
    };
    let block_back = |la: usize, c: &BlockCache<T>, mut gout: Tensor<T>, g: &mut [T], need: bool| {
        if let Some(m) = &c.drop {
            m.apply(&mut gout);
        }
        relu_backward_inplace(&mut gout, &c.out_b);
        let mut ga = conv_back(la + 1, &c.out_a, &gout, g, true).unwrap();
        relu_backward_inplace(&mut ga, &c.out_a);
        conv_back(la, &c.input_a, &ga, g, need)
    };

    let head = p.layers.len() - 1;
    let mut cur = conv_back(head, &cache.head_input, grad_logits, &mut g, true).unwrap();
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
    for (j, i) in (0..depth).rev().enumerate().rev() {
        let l = 2 * depth + 2 + 2 * j;
        let c = &cache.decoder[j];
        if let Some(m) = &c.drop {
            m.apply(&mut cur);
        }
        relu_backward_inplace(&mut cur, &c.out);
        let gcat = conv_back(l + 1, &c.cat, &cur, &mut g, true).unwrap();
        let half = gcat.data.len() / 2;
        let gv = Tensor::from_vec(gcat.c / 2, gcat.h, gcat.w, gcat.data[..half].to_vec());
        skip_grads[i] = Some(Tensor::from_vec(gcat.c / 2, gcat.h, gcat.w, gcat.data[half..].to_vec()));
        let gup = conv_back(l, &c.up, &gv, &mut g, true).unwrap();
        cur = upsample2_backward(&gup);
    }
    cur = block_back(2 * depth, &cache.bottleneck, cur, &mut g, true).unwrap();
    for i in (0..depth).rev() {
        let c = &cache.encoder[i];
        let mut gblock = maxpool2_backward(&cur, &cache.pool_idx[i], c.out_b.c, c.out_b.h, c.out_b.w);
        let skip = skip_grads[i].take().unwrap();
        gblock.data.iter_mut().zip(&skip.data).for_each(|(a, &b)| *a += b);
        cur = block_back(2 * i, c, gblock, &mut g, true).unwrap();
    }
    SampleGrads { params: g, input: cur }
}

/// Exact gradients for a batch; parameter gradients are summed over samples
/// in index order.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    caches: Option<&[ForwardCache<T>]>,
    grad_logits: &[Tensor<T>],
) -> Result<(ParamGrads<T>, Vec<Tensor<T>>)> {
    let caches = caches.ok_or_else(|| Error::State("backward needs the cache of a train-mode forward pass".into()))?;
    if caches.len() != grad_logits.len() {
        return dim_err("one logit gradient per cached sample is required");
    }
    let per: Vec<SampleGrads<T>> = caches
        .par_iter()
        .zip(grad_logits.par_iter())
        .map(|(c, g)| backward_one(params, c, g))
        .collect();
    let mut total = vec![T::zero(); params.data.len()];
    let mut inputs = Vec::with_capacity(per.len());
    for s in per {
        total.iter_mut().zip(&s.params).for_each(|(a, &b)| *a += b);
        inputs.push(s.input);
    }
    Ok((total, inputs))
}

/// Per-pixel class probabilities. A positive `dropout_rate` runs the pass in
/// MC mode with masks from `seed`.
pub fn predict_proba<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>, dropout_rate: f64, seed: u64) -> Result<Tensor<T>> {
    let mode = if dropout_rate > 0.0 { Mode::Mc } else { Mode::Eval };
    let (logits, _) = forward(params, std::slice::from_ref(x), mode, dropout_rate, seed)?;
    Ok(softmax(&logits[0]))
}
