//! The student network: spiking tokenizer (SPE/SPED stages), spiking
//! self-attention blocks with spike-driven residuals, and the averaged
//! fully-connected classification head.
//!
//! Every convolution sits behind a spiking-neuron layer, so conv inputs are
//! strictly binary; the residual stream itself is real-valued. The forward
//! pass can be instrumented with a [`Probe`] that records firing statistics
//! and synaptic-operation counts per layer.

use crate::convops::{conv_sops, ConvGeom};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, SpikeMode, SurrogateKind, SurrogateSpec};
use crate::scalar::Scalar;
use crate::tape::{matmul_nn, matmul_nt, matmul_tn, Tape, Var};
use crate::tensor::{read_named_record, write_named_record, Tensor};
use rand::Rng;
use std::cell::RefCell;
use std::io::{Read, Write};
use std::rc::Rc;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SNPK1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Output channels of each SPED tokenizer stage; the last entry must
    /// equal `embed_dim`. Each stage halves the spatial dims.
    pub tokenizer_widths: Vec<usize>,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub time_steps: usize,
    pub num_attributes: usize,
    pub attention_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.time_steps == 0 {
            return Err(Error::Config("embed_dim, num_heads, time_steps must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.tokenizer_widths.is_empty()
            || *self.tokenizer_widths.last().unwrap() != self.embed_dim
        {
            return Err(Error::Config(
                "last tokenizer width must equal embed_dim".into(),
            ));
        }
        if self.num_attributes == 0 || self.in_channels == 0 {
            return Err(Error::Config("in_channels and num_attributes must be positive".into()));
        }
        let (th, tw) = self.token_hw();
        if th == 0 || tw == 0 {
            return Err(Error::Config(format!(
                "image {}x{} too small for {} downsampling stages",
                self.image_h,
                self.image_w,
                self.tokenizer_widths.len()
            )));
        }
        Ok(())
    }

    /// Token grid after all SPED stages (each halves with floor semantics).
    pub fn token_hw(&self) -> (usize, usize) {
        let mut h = self.image_h;
        let mut w = self.image_w;
        for _ in &self.tokenizer_widths {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Full-size preset (2:1 pedestrian crops).
    pub fn base() -> Self {
        ModelConfig {
            in_channels: 3,
            image_h: 256,
            image_w: 128,
            tokenizer_widths: vec![32, 64],
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 2,
            mlp_ratio: 4,
            time_steps: 4,
            num_attributes: 8,
            attention_scale: 0.125,
        }
    }

    /// Desk-scale preset used by the training and acceptance runs.
    pub fn toy() -> Self {
        ModelConfig {
            in_channels: 3,
            image_h: 64,
            image_w: 32,
            tokenizer_widths: vec![16, 32, 64],
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 2,
            mlp_ratio: 2,
            time_steps: 4,
            num_attributes: 8,
            attention_scale: 0.125,
        }
    }

    /// Minimal config for end-to-end gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 1,
            image_h: 4,
            image_w: 4,
            tokenizer_widths: vec![4, 8],
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            mlp_ratio: 2,
            time_steps: 2,
            num_attributes: 3,
            attention_scale: 0.25,
        }
    }
}

/// Exact learnable-scalar count for a config: 3x3 tokenizer convs with BN
/// affine, per-block 1x1 QKV/proj/MLP convs with BN affine, and the FC head.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let mut n = 0u64;
    let mut c_in = cfg.in_channels as u64;
    for &w in &cfg.tokenizer_widths {
        let w = w as u64;
        n += w * c_in * 9 + 2 * w;
        c_in = w;
    }
    let d = cfg.embed_dim as u64;
    let rd = d * cfg.mlp_ratio as u64;
    let per_block = 4 * (d * d + 2 * d)      // q, k, v, proj
        + (d * rd + 2 * rd) + (rd * d + 2 * d); // mlp up/down
    n += cfg.num_blocks as u64 * per_block;
    n + d * cfg.num_attributes as u64 + cfg.num_attributes as u64
}

// --- parameter / buffer registries --------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(pub usize);

#[derive(Debug, Clone)]
pub struct Params<S> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct Buffers<S> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Buffers<S> {
    pub fn new() -> Self {
        Buffers { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> BufId {
        self.names.push(name.into());
        self.tensors.push(t);
        BufId(self.tensors.len() - 1)
    }

    fn pair_mut(&mut self, a: BufId, b: BufId) -> (&mut [S], &mut [S]) {
        assert_ne!(a.0, b.0);
        let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
        let (left, right) = self.tensors.split_at_mut(hi);
        let (x, y) = (&mut left[lo].data[..], &mut right[0].data[..]);
        if swap { (y, x) } else { (x, y) }
    }
}

impl<S: Scalar> Default for Buffers<S> {
    fn default() -> Self {
        Self::new()
    }
}

// --- instrumentation -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerStat {
    pub name: String,
    pub input_binary: bool,
    pub input_nnz: u64,
    pub input_elems: u64,
    /// Accumulate count when the input is binary, 0 otherwise.
    pub sops: u64,
    /// Dense multiply-accumulate count for the same layer and batch.
    pub macs: u64,
}

impl LayerStat {
    pub fn firing_rate(&self) -> f64 {
        if self.input_elems == 0 {
            0.0
        } else {
            self.input_nnz as f64 / self.input_elems as f64
        }
    }
}

/// Collects per-layer spike statistics during an instrumented forward pass.
#[derive(Debug, Default, Clone)]
pub struct Probe {
    pub layers: Vec<LayerStat>,
    /// When set, a non-binary tensor entering a spike-consuming layer panics
    /// the forward (pure-spike structural invariant).
    pub assert_binary: bool,
}

impl Probe {
    pub fn asserting() -> Self {
        Probe { layers: Vec::new(), assert_binary: true }
    }

    pub fn all_binary(&self) -> bool {
        self.layers.iter().all(|l| l.input_binary)
    }

    pub fn total_sops(&self) -> u64 {
        self.layers.iter().map(|l| l.sops).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}

// --- layers ---------------------------------------------------------------

fn he_uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::of_f64(rng.gen_range(-bound..bound)))
}

#[derive(Debug, Clone)]
struct ConvBn {
    name: String,
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    rm: BufId,
    rv: BufId,
    geom: ConvGeom,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Scalar, R: Rng>(
        params: &mut Params<S>,
        bufs: &mut Buffers<S>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = params.add(format!("{name}.conv.weight"), he_uniform(rng, &[out_ch, in_ch, k, k], fan_in));
        let gamma = params.add(format!("{name}.bn.gamma"), Tensor::full(&[out_ch], S::one()));
        let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros(&[out_ch]));
        let rm = bufs.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[out_ch]));
        let rv = bufs.add(format!("{name}.bn.running_var"), Tensor::full(&[out_ch], S::one()));
        ConvBn {
            name: name.to_string(),
            w,
            gamma,
            beta,
            rm,
            rv,
            geom: ConvGeom { in_ch, out_ch, kh: k, kw: k, stride, padding },
        }
    }

    fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var) -> Result<Var> {
        if let Some(probe) = ctx.probe {
            let vx = ctx.tape.value(x);
            record_conv_stat(&mut probe.borrow_mut(), &self.name, &vx, &self.geom, ctx.mode)?;
        }
        let y = ctx.tape.conv2d(x, ctx.bound[self.w.0], self.geom.stride, self.geom.padding)?;
        let mut bufs = ctx.buffers.borrow_mut();
        let (rm, rv) = bufs.pair_mut(self.rm, self.rv);
        ctx.tape.batchnorm2d(y, ctx.bound[self.gamma.0], ctx.bound[self.beta.0], rm, rv, ctx.train)
    }
}

fn record_conv_stat<S: Scalar>(
    probe: &mut Probe,
    name: &str,
    input: &Tensor<S>,
    geom: &ConvGeom,
    mode: SpikeMode,
) -> Result<()> {
    let binary = input.is_binary();
    if probe.assert_binary && mode == SpikeMode::Hard {
        assert!(binary, "non-binary tensor entered conv layer {name}");
    }
    let n = input.shape[0] as u64;
    let (h, w) = (input.shape[2], input.shape[3]);
    let macs = geom.macs(h, w)? * n;
    let sops = if binary { conv_sops(input, geom)? } else { 0 };
    probe.layers.push(LayerStat {
        name: name.to_string(),
        input_binary: binary,
        input_nnz: input.count_nonzero() as u64,
        input_elems: input.numel() as u64,
        sops,
        macs,
    });
    Ok(())
}

struct Ctx<'a, S: Scalar> {
    tape: &'a Tape<S>,
    bound: &'a [Var],
    buffers: &'a RefCell<Buffers<S>>,
    train: bool,
    mode: SpikeMode,
    probe: Option<&'a RefCell<Probe>>,
    lif: LifParams<S>,
    sg: SurrogateSpec<S>,
    t_steps: usize,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    /// Multistep spiking neuron over the time axis folded into dim 0.
    fn spike(&self, x: Var) -> Result<Var> {
        let shape = self.tape.shape(x);
        let n: usize = shape.iter().product();
        let flat = self.tape.reshape(x, vec![self.t_steps, n / self.t_steps])?;
        let s = self.tape.lif_multistep(flat, &self.lif, &self.sg, self.mode)?;
        self.tape.reshape(s, shape)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ssa_q: ConvBn,
    ssa_k: ConvBn,
    ssa_v: ConvBn,
    ssa_proj: ConvBn,
    mlp_up: ConvBn,
    mlp_down: ConvBn,
}

pub struct ModelOutput {
    /// Pre-sigmoid attribute logits, `[B, M]`.
    pub logits: Var,
    /// Pooled penultimate features (distillation hook), `[B, D]`.
    pub features: Var,
}

pub struct Spikingformer<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: Params<S>,
    pub buffers: RefCell<Buffers<S>>,
    pub lif: LifParams<S>,
    pub surrogate: SurrogateSpec<S>,
    pub attr_names: Vec<String>,
    tokenizer: Vec<ConvBn>,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<S: Scalar> Spikingformer<S> {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut bufs = Buffers::new();
        let mut tokenizer = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &width) in cfg.tokenizer_widths.iter().enumerate() {
            tokenizer.push(ConvBn::new(
                &mut params,
                &mut bufs,
                rng,
                &format!("tokenizer.{i}"),
                c_in,
                width,
                3,
                1,
                1,
            ));
            c_in = width;
        }
        let d = cfg.embed_dim;
        let rd = d * cfg.mlp_ratio;
        let mut blocks = Vec::new();
        for l in 0..cfg.num_blocks {
            let cb = |params: &mut Params<S>, bufs: &mut Buffers<S>, rng: &mut R, part: &str, ci: usize, co: usize| {
                ConvBn::new(params, bufs, rng, &format!("block.{l}.{part}"), ci, co, 1, 1, 0)
            };
            blocks.push(Block {
                ssa_q: cb(&mut params, &mut bufs, rng, "ssa.q", d, d),
                ssa_k: cb(&mut params, &mut bufs, rng, "ssa.k", d, d),
                ssa_v: cb(&mut params, &mut bufs, rng, "ssa.v", d, d),
                ssa_proj: cb(&mut params, &mut bufs, rng, "ssa.proj", d, d),
                mlp_up: cb(&mut params, &mut bufs, rng, "mlp.up", d, rd),
                mlp_down: cb(&mut params, &mut bufs, rng, "mlp.down", rd, d),
            });
        }
        let head_w = params.add("head.weight", he_uniform(rng, &[d, cfg.num_attributes], d));
        let head_b = params.add("head.bias", Tensor::zeros(&[cfg.num_attributes]));
        let attr_names = (0..cfg.num_attributes).map(|i| format!("attr{i}")).collect();
        Ok(Spikingformer {
            cfg,
            params,
            buffers: RefCell::new(bufs),
            // R = 2 so the per-step drive is R/tau = 1 and the steady-state
            // membrane is 2x: [0,1]-scaled pixel intensities above ~0.53 can
            // cross the unit threshold within a few steps. With the default
            // R = 1 the membrane saturates at x <= u_th and the encoder
            // neuron would stay silent on normalized images.
            lif: LifParams::new(
                S::of_f64(2.0),
                S::zero(),
                S::one(),
                S::zero(),
                S::of_f64(2.0),
            )
            .expect("valid LIF defaults"),
            surrogate: SurrogateSpec::default(),
            attr_names,
            tokenizer,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Registers every parameter on the tape. With `trainable`, gradients
    /// flow to them during backward.
    pub fn bind(&self, tape: &Tape<S>, trainable: bool) -> Vec<Var> {
        self.params.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Forward pass over a batch of images `[B, C, H, W]` with pixel values
    /// in `[0, 1]`. The image is replicated across the time axis; the first
    /// spiking layer acts as the spike encoder.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape<S>,
        bound: &[Var],
        images: &Tensor<S>,
        train: bool,
        mode: SpikeMode,
        probe: Option<&RefCell<Probe>>,
    ) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        if images.shape.len() != 4
            || images.shape[1] != cfg.in_channels
            || images.shape[2] != cfg.image_h
            || images.shape[3] != cfg.image_w
        {
            return Err(Error::Config(format!(
                "image batch shape {:?} does not match configured {}x{}x{}",
                images.shape, cfg.in_channels, cfg.image_h, cfg.image_w
            )));
        }
        let b = images.shape[0];
        let t = cfg.time_steps;
        // static-image encoding: replicate across T
        let per = images.numel();
        let mut rep = Vec::with_capacity(t * per);
        for _ in 0..t {
            rep.extend_from_slice(&images.data);
        }
        let x0 = Tensor::new(
            vec![t * b, cfg.in_channels, cfg.image_h, cfg.image_w],
            rep,
        )?;
        let ctx = Ctx {
            tape,
            bound,
            buffers: &self.buffers,
            train,
            mode,
            probe,
            lif: self.lif,
            sg: self.surrogate,
            t_steps: t,
        };
        let mut x = tape.constant(x0);
        for stage in &self.tokenizer {
            x = self.sped_forward_inner(&ctx, stage, x)?;
        }
        for block in &self.blocks {
            x = self.block_forward_inner(&ctx, block, x)?;
        }
        // average over tokens and time, then FC
        let shape = tape.shape(x);
        let x5 = tape.reshape(x, vec![t, b, shape[1], shape[2], shape[3]])?;
        let features = tape.pool_time_spatial(x5)?;
        let logits = tape.linear(features, bound[self.head_w.0], bound[self.head_b.0])?;
        Ok(ModelOutput { logits, features })
    }

    /// SPE: SN -> ConvBN (used by the spiking MLP path, 1x1 convs).
    fn spe_forward_inner(&self, ctx: &Ctx<'_, S>, cb: &ConvBn, x: Var) -> Result<Var> {
        let s = ctx.spike(x)?;
        cb.forward(ctx, s)
    }

    /// SPED: SN -> MaxPool(2,2) -> ConvBN; spatial dims halve.
    fn sped_forward_inner(&self, ctx: &Ctx<'_, S>, cb: &ConvBn, x: Var) -> Result<Var> {
        let s = ctx.spike(x)?;
        let pooled = ctx.tape.maxpool2d(s, 2, 2)?;
        cb.forward(ctx, pooled)
    }

    /// SSA path: X' = SN(X); Q/K/V = SN(ConvBN(X')); out = ConvBN(SB(QK^T V * s)).
    fn ssa_forward_inner(&self, ctx: &Ctx<'_, S>, block: &Block, x: Var) -> Result<Var> {
        let xp = ctx.spike(x)?;
        let q = ctx.spike(block.ssa_q.forward(ctx, xp)?)?;
        let k = ctx.spike(block.ssa_k.forward(ctx, xp)?)?;
        let v = ctx.spike(block.ssa_v.forward(ctx, xp)?)?;
        let attn = self.ssa_core(ctx, q, k, v)?;
        let sb = ctx.spike(attn)?;
        block.ssa_proj.forward(ctx, sb)
    }

    /// Per-head Q K^T V product over binary spike tensors, scaled by s.
    /// Inputs are `[TB, D, H, W]`; tokens are the H*W positions.
    fn ssa_core(&self, ctx: &Ctx<'_, S>, q: Var, k: Var, v: Var) -> Result<Var> {
        let tape = ctx.tape;
        let vq = tape.value(q);
        let vk = tape.value(k);
        let vv = tape.value(v);
        if vq.shape != vk.shape || vq.shape != vv.shape {
            return Err(Error::ShapeMismatch {
                op: "ssa_core",
                lhs: vq.shape.clone(),
                rhs: vk.shape.clone(),
            });
        }
        if let Some(probe) = ctx.probe {
            if probe.borrow().assert_binary && ctx.mode == SpikeMode::Hard {
                assert!(
                    vq.is_binary() && vk.is_binary() && vv.is_binary(),
                    "non-binary Q/K/V entered spiking self-attention"
                );
            }
        }
        let tb = vq.shape[0];
        let d = vq.shape[1];
        let n = vq.shape[2] * vq.shape[3];
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = S::of_f64(self.cfg.attention_scale);

        // per-head slices are stored [dh, N]; all products phrased on that
        // layout to avoid transposes (see matmul_{nn,nt,tn}).
        let mut out = vec![S::zero(); vq.numel()];
        let mut a = vec![S::zero(); n * n];
        for i in 0..tb {
            for h in 0..heads {
                let off = (i * d + h * dh) * n;
                let qs = &vq.data[off..off + dh * n];
                let ks = &vk.data[off..off + dh * n];
                let vs = &vv.data[off..off + dh * n];
                a.iter_mut().for_each(|x| *x = S::zero());
                matmul_tn(qs, ks, &mut a, n, dh, n); // A = Q K^T
                let ys = &mut out[off..off + dh * n];
                matmul_nt(vs, &a, ys, dh, n, n); // Y^T = V^T A^T, stored [dh, N]
                for y in ys.iter_mut() {
                    *y *= scale;
                }
            }
        }
        let out = Tensor { shape: vq.shape.clone(), data: out };
        let (cq, ck, cv) = (Rc::clone(&vq), Rc::clone(&vk), Rc::clone(&vv));
        Ok(tape.push(
            out,
            &[q, k, v],
            Some(Box::new(move |g| {
                let mut dq = vec![S::zero(); cq.data.len()];
                let mut dk = vec![S::zero(); ck.data.len()];
                let mut dv = vec![S::zero(); cv.data.len()];
                let mut a = vec![S::zero(); n * n];
                let mut da = vec![S::zero(); n * n];
                let mut gs = vec![S::zero(); dh * n];
                for i in 0..tb {
                    for h in 0..heads {
                        let off = (i * d + h * dh) * n;
                        let qs = &cq.data[off..off + dh * n];
                        let ks = &ck.data[off..off + dh * n];
                        let vs = &cv.data[off..off + dh * n];
                        for (dst, src) in gs.iter_mut().zip(&g[off..off + dh * n]) {
                            *dst = *src * scale;
                        }
                        a.iter_mut().for_each(|x| *x = S::zero());
                        matmul_tn(qs, ks, &mut a, n, dh, n);
                        da.iter_mut().for_each(|x| *x = S::zero());
                        matmul_tn(&gs, vs, &mut da, n, dh, n); // dA = dY^T V
                        matmul_nn(&gs, &a, &mut dv[off..off + dh * n], dh, n, n); // dV^T = dY^T A
                        matmul_nt(ks, &da, &mut dq[off..off + dh * n], dh, n, n); // dQ^T = K^T dA^T
                        matmul_nn(qs, &da, &mut dk[off..off + dh * n], dh, n, n); // dK^T = Q^T dA
                    }
                }
                vec![Some(dq), Some(dk), Some(dv)]
            })),
        ))
    }

    /// Spiking MLP: two SPE stages with 1x1 convs (token-wise linear).
    fn mlp_forward_inner(&self, ctx: &Ctx<'_, S>, block: &Block, x: Var) -> Result<Var> {
        let h = self.spe_forward_inner(ctx, &block.mlp_up, x)?;
        self.spe_forward_inner(ctx, &block.mlp_down, h)
    }

    /// Spike-driven residual block: y = x + SSA(x); z = y + MLP(y).
    fn block_forward_inner(&self, ctx: &Ctx<'_, S>, block: &Block, x: Var) -> Result<Var> {
        let attn = self.ssa_forward_inner(ctx, block, x)?;
        let y = ctx.tape.add(x, attn)?;
        let ff = self.mlp_forward_inner(ctx, block, y)?;
        ctx.tape.add(y, ff)
    }

    // --- checkpoint IO ----------------------------------------------------

    fn config_meta(&self) -> Tensor<S> {
        let cfg = &self.cfg;
        let mut v: Vec<f64> = vec![
            1.0, // format version
            cfg.in_channels as f64,
            cfg.image_h as f64,
            cfg.image_w as f64,
            cfg.embed_dim as f64,
            cfg.num_heads as f64,
            cfg.num_blocks as f64,
            cfg.mlp_ratio as f64,
            cfg.time_steps as f64,
            cfg.num_attributes as f64,
            cfg.attention_scale,
            self.lif.tau_m.as_f64(),
            self.lif.u_rest.as_f64(),
            self.lif.u_th.as_f64(),
            self.lif.u_r.as_f64(),
            self.lif.r.as_f64(),
            match self.surrogate.kind {
                SurrogateKind::Sigmoid => 0.0,
                SurrogateKind::Arctan => 1.0,
                SurrogateKind::Rectangular => 2.0,
            },
            self.surrogate.width.as_f64(),
            cfg.tokenizer_widths.len() as f64,
        ];
        v.extend(cfg.tokenizer_widths.iter().map(|&w| w as f64));
        Tensor::from_fn(&[v.len()], |i| S::of_f64(v[i]))
    }

    fn vocab_meta(&self) -> Tensor<S> {
        let joined = self.attr_names.join(",");
        let bytes = joined.as_bytes();
        Tensor::from_fn(&[bytes.len()], |i| S::of_usize(bytes[i] as usize))
    }

    /// Writes the checkpoint container: named parameter tensors, BN running
    /// buffers, config/vocab metadata, and any extra records (optimizer
    /// state, epoch counter).
    pub fn save_checkpoint(
        &self,
        path: &std::path::Path,
        extra: &[(String, Tensor<S>)],
    ) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        write_named_record(&mut w, "meta.config", &self.config_meta())?;
        write_named_record(&mut w, "meta.attr_vocab", &self.vocab_meta())?;
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            write_named_record(&mut w, &format!("param.{name}"), t)?;
        }
        let bufs = self.buffers.borrow();
        for (name, t) in bufs.names.iter().zip(&bufs.tensors) {
            write_named_record(&mut w, &format!("buffer.{name}"), t)?;
        }
        for (name, t) in extra {
            write_named_record(&mut w, &format!("extra.{name}"), t)?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`save_checkpoint`]; returns the model
    /// and the extra records.
    pub fn load_checkpoint(path: &std::path::Path) -> Result<(Self, Vec<(String, Tensor<S>)>)> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("{}: bad checkpoint magic", path.display())));
        }
        let mut records: Vec<(String, Tensor<S>)> = Vec::new();
        loop {
            match read_named_record(&mut r) {
                Ok(rec) => records.push(rec),
                Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e),
            }
        }
        let meta = records
            .iter()
            .find(|(n, _)| n == "meta.config")
            .ok_or_else(|| Error::Format("checkpoint missing meta.config".into()))?
            .1
            .data
            .iter()
            .map(|v| v.as_f64())
            .collect::<Vec<f64>>();
        if meta.first() != Some(&1.0) {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        let n_stages = meta[18] as usize;
        let cfg = ModelConfig {
            in_channels: meta[1] as usize,
            image_h: meta[2] as usize,
            image_w: meta[3] as usize,
            embed_dim: meta[4] as usize,
            num_heads: meta[5] as usize,
            num_blocks: meta[6] as usize,
            mlp_ratio: meta[7] as usize,
            time_steps: meta[8] as usize,
            num_attributes: meta[9] as usize,
            attention_scale: meta[10],
            tokenizer_widths: (0..n_stages).map(|i| meta[19 + i] as usize).collect(),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Spikingformer::new(cfg, &mut rng)?;
        model.lif = LifParams::new(
            S::of_f64(meta[11]),
            S::of_f64(meta[12]),
            S::of_f64(meta[13]),
            S::of_f64(meta[14]),
            S::of_f64(meta[15]),
        )?;
        model.surrogate = SurrogateSpec::new(
            match meta[16] as usize {
                0 => SurrogateKind::Sigmoid,
                1 => SurrogateKind::Arctan,
                _ => SurrogateKind::Rectangular,
            },
            S::of_f64(meta[17]),
        )?;
        if let Some((_, vocab)) = records.iter().find(|(n, _)| n == "meta.attr_vocab") {
            let bytes: Vec<u8> = vocab.data.iter().map(|v| v.as_f64() as u8).collect();
            let joined = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
            if !joined.is_empty() {
                model.attr_names = joined.split(',').map(String::from).collect();
            }
        }
        let mut extra = Vec::new();
        for (name, t) in records {
            if let Some(pname) = name.strip_prefix("param.") {
                let idx = model
                    .params
                    .names
                    .iter()
                    .position(|n| n == pname)
                    .ok_or_else(|| Error::Format(format!("unknown parameter {pname}")))?;
                if model.params.tensors[idx].shape != t.shape {
                    return Err(Error::Format(format!("shape mismatch for {pname}")));
                }
                model.params.tensors[idx] = t;
            } else if let Some(bname) = name.strip_prefix("buffer.") {
                let mut bufs = model.buffers.borrow_mut();
                let idx = bufs
                    .names
                    .iter()
                    .position(|n| n == bname)
                    .ok_or_else(|| Error::Format(format!("unknown buffer {bname}")))?;
                bufs.tensors[idx] = t;
            } else if let Some(ename) = name.strip_prefix("extra.") {
                extra.push((ename.to_string(), t));
            }
        }
        Ok((model, extra))
    }
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> Spikingformer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Spikingformer::new(ModelConfig::tiny(), &mut rng).unwrap()
    }

    fn run_forward(model: &Spikingformer<f64>, images: &Tensor<f64>, probe: Option<&RefCell<Probe>>) -> Tensor<f64> {
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let out = model
            .forward(&tape, &bound, images, false, SpikeMode::Hard, probe)
            .unwrap();
        tape.value(out.logits).as_ref().clone()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny();
        cfg.num_heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.tokenizer_widths = vec![4, 4]; // last != embed_dim
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let model = toy_model(1);
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let bad = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(matches!(
            model.forward(&tape, &bound, &bad, false, SpikeMode::Hard, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn logits_shape_law() {
        for (b, cfg) in [(1, ModelConfig::tiny()), (3, ModelConfig::tiny())] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let model: Spikingformer<f64> = Spikingformer::new(cfg.clone(), &mut rng).unwrap();
            let images = Tensor::from_fn(&[b, cfg.in_channels, cfg.image_h, cfg.image_w], |i| {
                ((i * 2654435761) % 256) as f64 / 255.0
            });
            let logits = run_forward(&model, &images, None);
            assert_eq!(logits.shape, vec![b, cfg.num_attributes]);
        }
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut model = toy_model(2);
        for (name, t) in model.params.names.clone().iter().zip(model.params.tensors.iter_mut()) {
            t.data.iter_mut().for_each(|v| *v = 0.0);
            if name == "head.bias" {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 + 0.5);
            }
        }
        let images = Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 7) as f64 / 6.0);
        let logits = run_forward(&model, &images, None);
        for b in 0..2 {
            for m in 0..3 {
                assert!((logits.data[b * 3 + m] - (m as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let model = toy_model(5);
        let images = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 31) % 11) as f64 / 10.0);
        let a = run_forward(&model, &images, None);
        let b = run_forward(&model, &images, None);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn pure_spike_invariant_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let model: Spikingformer<f64> =
            Spikingformer::new(ModelConfig::tiny(), &mut rng).unwrap();
        let probe = RefCell::new(Probe::asserting());
        let images = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 131) % 97) as f64 / 96.0);
        let _ = run_forward(&model, &images, Some(&probe));
        let probe = probe.into_inner();
        assert!(probe.all_binary());
        assert!(!probe.layers.is_empty());
    }

    #[test]
    fn block_is_identity_with_zero_path_weights() {
        let mut model = toy_model(3);
        // zero every block conv weight and BN affine so both paths emit 0
        for (name, t) in model.params.names.clone().iter().zip(model.params.tensors.iter_mut()) {
            if name.starts_with("block.") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let x0 = Tensor::from_fn(&[2, 8, 1, 1], |i| ((i * 13) % 7) as f64 / 3.0);
        let ctx = Ctx {
            tape: &tape,
            bound: &bound,
            buffers: &model.buffers,
            train: false,
            mode: SpikeMode::Hard,
            probe: None,
            lif: model.lif,
            sg: model.surrogate,
            t_steps: 2,
        };
        let xv = tape.constant(x0.clone());
        let y = model.block_forward_inner(&ctx, &model.blocks[0], xv).unwrap();
        assert_eq!(tape.value(y).data, x0.data);
    }

    #[test]
    fn ssa_core_hand_case_single_token() {
        // single token, single head, Q=K=V=[1], s=1 -> QK^TV = 1
        let mut cfg = ModelConfig::tiny();
        cfg.num_heads = 1;
        cfg.attention_scale = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model: Spikingformer<f64> = Spikingformer::new(cfg, &mut rng).unwrap();
        model.cfg.embed_dim = 1; // ssa_core only reads heads/scale + shapes
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let ctx = Ctx {
            tape: &tape,
            bound: &bound,
            buffers: &model.buffers,
            train: false,
            mode: SpikeMode::Hard,
            probe: None,
            lif: model.lif,
            sg: model.surrogate,
            t_steps: 1,
        };
        let one = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = model.ssa_core(&ctx, one, one, one).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0]);
    }

    #[test]
    fn ssa_core_binary_inputs_integer_outputs() {
        let mut cfg = ModelConfig::tiny();
        cfg.attention_scale = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model: Spikingformer<f64> = Spikingformer::new(cfg, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let ctx = Ctx {
            tape: &tape,
            bound: &bound,
            buffers: &model.buffers,
            train: false,
            mode: SpikeMode::Hard,
            probe: None,
            lif: model.lif,
            sg: model.surrogate,
            t_steps: 1,
        };
        let mk = |seed: usize| {
            Tensor::from_fn(&[2, 8, 2, 2], |i| ((i * 7 + seed) % 3 == 0) as usize as f64)
        };
        let q = tape.constant(mk(0));
        let k = tape.constant(mk(1));
        let v = tape.constant(mk(2));
        let y = model.ssa_core(&ctx, q, k, v).unwrap();
        for &val in &tape.value(y).data {
            assert_eq!(val, val.round());
            assert!(val >= 0.0);
        }
    }

    #[test]
    fn ssa_is_permutation_equivariant_over_tokens() {
        let model = toy_model(11);
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let ctx = Ctx {
            tape: &tape,
            bound: &bound,
            buffers: &model.buffers,
            train: false,
            mode: SpikeMode::Hard,
            probe: None,
            lif: model.lif,
            sg: model.surrogate,
            t_steps: 1,
        };
        let n = 4; // 2x2 token grid
        let d = 8;
        let mk = |seed: usize| {
            Tensor::from_fn(&[1, d, 2, 2], |i| ((i * 13 + seed) % 3 == 0) as usize as f64)
        };
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn(&[1, d, 2, 2], |i| {
                let (c, pos) = (i / n, i % n);
                t.data[c * n + perm[pos]]
            })
        };
        let (q0, k0, v0) = (mk(0), mk(1), mk(2));
        let y = {
            let q = tape.constant(q0.clone());
            let k = tape.constant(k0.clone());
            let v = tape.constant(v0.clone());
            tape.value(model.ssa_core(&ctx, q, k, v).unwrap())
        };
        let yp = {
            let q = tape.constant(permute(&q0));
            let k = tape.constant(permute(&k0));
            let v = tape.constant(permute(&v0));
            tape.value(model.ssa_core(&ctx, q, k, v).unwrap())
        };
        let y_perm = permute(&y);
        assert_eq!(y_perm.data, yp.data);
    }

    #[test]
    fn param_count_closed_forms() {
        // FC alone: D=64, M=8 -> 64*8+8 = 520
        let d = 64u64;
        let m = 8u64;
        assert_eq!(d * m + m, 520);
        // hand-derived totals for five configs
        let count = |cfg: &ModelConfig| param_count(cfg);
        let tiny = ModelConfig::tiny();
        // tokenizer: 4*1*9+8 + 8*4*9+16 = 44 + 304 = 348
        // block: 4*(64+16) + (8*16+2*16 + 16*8+16) = 320 + 304 = 624... recomputed below
        let hand_tiny = {
            let tok = (4 * 1 * 9 + 2 * 4) + (8 * 4 * 9 + 2 * 8);
            let d = 8u64;
            let rd = 16u64;
            let block = 4 * (d * d + 2 * d) + (d * rd + 2 * rd) + (rd * d + 2 * d);
            tok + block + d * 3 + 3
        };
        assert_eq!(count(&tiny), hand_tiny);

        let toy = ModelConfig::toy();
        let hand_toy = {
            let tok = (16 * 3 * 9 + 32) + (32 * 16 * 9 + 64) + (64 * 32 * 9 + 128);
            let d = 64u64;
            let rd = 128u64;
            let block = 4 * (d * d + 2 * d) + (d * rd + 2 * rd) + (rd * d + 2 * d);
            tok + 2 * block + d * 8 + 8
        };
        assert_eq!(count(&toy), hand_toy);

        // zero-block config: tokenizer + head only
        let mut zb = ModelConfig::tiny();
        zb.num_blocks = 0;
        let hand_zb = (4 * 9 + 8) + (8 * 4 * 9 + 16) + 8 * 3 + 3;
        assert_eq!(count(&zb), hand_zb);

        // doubling L adds exactly one block share
        let mut l1 = ModelConfig::tiny();
        l1.num_blocks = 1;
        let mut l2 = ModelConfig::tiny();
        l2.num_blocks = 2;
        let block_share = count(&l2) - count(&l1);
        let mut l4 = ModelConfig::tiny();
        l4.num_blocks = 4;
        assert_eq!(count(&l4), count(&l2) + 2 * block_share);

        // registry total must agree with the closed form
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: Spikingformer<f32> = Spikingformer::new(ModelConfig::toy(), &mut rng).unwrap();
        assert_eq!(model.params.total_scalars(), count(&ModelConfig::toy()));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.snpk");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model: Spikingformer<f32> =
            Spikingformer::new(ModelConfig::tiny(), &mut rng).unwrap();
        let extra = vec![("epoch".to_string(), Tensor::scalar(7.0f32))];
        model.save_checkpoint(&path, &extra).unwrap();
        let (loaded, ex) = Spikingformer::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for (a, b) in model.params.tensors.iter().zip(&loaded.params.tensors) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].0, "epoch");
        assert_eq!(ex[0].1.item(), 7.0);
    }

    #[test]
    fn soft_mode_end_to_end_gradcheck_is_separately_tested() {
        // covered by train::grad_check tests; here we only assert the soft
        // forward produces finite real-valued logits
        let model = toy_model(8);
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let images = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 5) as f64 / 4.0);
        let out = model
            .forward(&tape, &bound, &images, false, SpikeMode::Soft, None)
            .unwrap();
        assert!(tape.value(out.logits).all_finite());
    }
}
