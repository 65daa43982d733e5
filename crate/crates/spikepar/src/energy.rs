//! Energy accounting: synaptic-operation counts from an instrumented
//! forward pass versus the dense-MAC cost of an equal-architecture ANN.
//!
//! Only Conv/FC layers are tallied; BN and pooling are omitted from both
//! sides. The SNN side sums spike-driven accumulates over all time steps;
//! the ANN side is a single dense pass.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Probe};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::Serialize;

/// Energy per operation in picojoules (45nm CMOS convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyModel {
    pub fn new(e_mac: f64, e_ac: f64) -> Result<Self> {
        if !(e_mac > e_ac && e_ac > 0.0) {
            return Err(Error::Config(format!(
                "energy model requires e_mac > e_ac > 0, got {e_mac}/{e_ac}"
            )));
        }
        Ok(EnergyModel { e_mac, e_ac })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerEnergy {
    pub name: String,
    /// Spike-driven accumulates over all T steps (0 for real-valued input).
    pub sops: u64,
    /// Dense MACs of the ANN counterpart (single pass over the batch).
    pub macs: u64,
    pub firing_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub total_sops: u64,
    pub total_macs: u64,
    pub snn_pj: f64,
    pub ann_pj: f64,
    pub ratio: f64,
}

impl EnergyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("energy serialize")
    }
}

/// Builds the report from an instrumented forward pass. Probe MAC counts
/// cover the time-replicated batch, so the ANN single pass is `macs / T`.
/// snn = e_ac * SOPs + e_mac * MACs of any real-valued (encoder) layer;
/// ann = e_mac * total dense MACs.
pub fn estimate_energy(probe: &Probe, time_steps: usize, model: &EnergyModel) -> Result<EnergyReport> {
    if time_steps == 0 {
        return Err(Error::Config("time_steps must be positive".into()));
    }
    let mut layers = Vec::with_capacity(probe.layers.len());
    let mut snn_pj = 0.0;
    let mut ann_pj = 0.0;
    let mut total_sops = 0u64;
    let mut total_macs = 0u64;
    for l in &probe.layers {
        let ann_macs = l.macs / time_steps as u64;
        if l.input_binary {
            snn_pj += l.sops as f64 * model.e_ac;
        } else {
            snn_pj += l.macs as f64 * model.e_mac;
        }
        ann_pj += ann_macs as f64 * model.e_mac;
        total_sops += l.sops;
        total_macs += ann_macs;
        layers.push(LayerEnergy {
            name: l.name.clone(),
            sops: l.sops,
            macs: ann_macs,
            firing_rate: l.firing_rate(),
        });
    }
    let ratio = if ann_pj > 0.0 { snn_pj / ann_pj } else { 0.0 };
    Ok(EnergyReport { layers, total_sops, total_macs, snn_pj, ann_pj, ratio })
}

/// Closed-form dense MACs of the equal-architecture ANN for one image,
/// single pass: all convolutions plus the FC head.
pub fn dense_mac_count(cfg: &ModelConfig) -> u64 {
    let mut macs = 0u64;
    let mut c_in = cfg.in_channels as u64;
    let (mut h, mut w) = (cfg.image_h as u64, cfg.image_w as u64);
    for &width in &cfg.tokenizer_widths {
        // SPED: pool halves dims before the 3x3 stride-1 pad-1 conv
        h /= 2;
        w /= 2;
        macs += width as u64 * c_in * 9 * h * w;
        c_in = width as u64;
    }
    let d = cfg.embed_dim as u64;
    let rd = d * cfg.mlp_ratio as u64;
    let n = h * w;
    // per block: q/k/v/proj 1x1 convs + two MLP 1x1 convs, all over N tokens
    let per_block = 4 * d * d * n + (d * rd + rd * d) * n;
    macs += cfg.num_blocks as u64 * per_block;
    macs + d * cfg.num_attributes as u64
}

/// Reference SOP counter: walks every output position of a convolution and
/// counts nonzero input elements inside the receptive field. Quadratic and
/// allocation-free on purpose; used to cross-check instrumentation.
pub fn brute_force_conv_sops<S: Scalar>(
    x: &Tensor<S>,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> u64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut sops = 0u64;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut nnz = 0u64;
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = x.data[((b * c + ci) * h + iy as usize) * w + ix as usize];
                            if v != S::zero() {
                                nnz += 1;
                            }
                        }
                    }
                }
                sops += nnz * out_ch as u64;
            }
        }
    }
    sops
}
