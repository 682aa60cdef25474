//! Cross-modality U-Net with a Transformer encoder on the bottleneck.
//!
//! ```text
//! x[B,3,T] ─ mask ─ pad ─► encoder (conv·BN·ReLU ×2, maxpool) × levels
//!                                │ skips                    │ bottleneck
//!                                ▼                          ▼
//!                   decoder up to stride out_stride   project + PE → Transformer
//!                                │ V_unet                   │ V_trans (repeat-interleave)
//!                                └──────── concat ──────────┘
//!                                              ▼
//!                                   linear head → logits[B,T',4]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{ChannelKind, EventLabel, ModalityMask};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{
    positional_encoding, BatchNorm1d, MhsaWeights, Mode, ParamId, ParamStore, Real, RunningStats, Tape,
    Tensor, Var,
};

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Number of 2× poolings between the input and the bottleneck.
    pub unet_levels: usize,
    /// Width of the first level; level `i` has `min(base·(i+1), max)` channels.
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel_size: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Hidden width of the Transformer feed-forward block, as a multiple of `model_dim`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub out_stride: usize,
    /// Samples per channel of one input window.
    pub input_len: usize,
    /// Initial scale of the head weights reading Transformer features,
    /// relative to the standard initialization.
    pub trans_head_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            unet_levels: 7,
            base_channels: 8,
            max_channels: 64,
            kernel_size: 5,
            transformer_layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_mult: 2,
            dropout: 0.25,
            out_stride: 8,
            input_len: crate::dsp::EPOCH_SAMPLES,
            trans_head_init: 1e-3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.unet_levels < 2 {
            return bad(format!("unet_levels must be at least 2, got {}", self.unet_levels));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad(format!(
                "need 0 < base_channels <= max_channels, got {} and {}",
                self.base_channels, self.max_channels
            ));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 || self.model_dim % 2 != 0 {
            return bad(format!(
                "model_dim {} must be even and divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !self.out_stride.is_power_of_two() || self.out_stride.trailing_zeros() as usize > self.unet_levels {
            return bad(format!(
                "out_stride must be 2^k with k <= unet_levels, got {}",
                self.out_stride
            ));
        }
        if self.input_len == 0 || self.input_len % self.out_stride != 0 {
            return bad(format!(
                "input_len {} must be a positive multiple of out_stride {}",
                self.input_len, self.out_stride
            ));
        }
        if !(self.trans_head_init > 0.0) {
            return bad("trans_head_init must be positive".into());
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_channels * (level + 1)).min(self.max_channels)
    }

    /// Level at which the decoder stops.
    pub fn out_level(&self) -> usize {
        self.out_stride.trailing_zeros() as usize
    }

    /// Input length after right zero-padding to a multiple of `2^unet_levels`.
    pub fn padded_len(&self) -> usize {
        let unit = 1usize << self.unet_levels;
        self.input_len.div_ceil(unit) * unit
    }

    /// T' = input_len / out_stride.
    pub fn out_len(&self) -> usize {
        self.input_len / self.out_stride
    }

    /// Seconds covered by one output bin at `rate_hz` input sampling.
    pub fn bin_s(&self, rate_hz: f64) -> f64 {
        self.out_stride as f64 / rate_hz
    }
}

/// Closed-form learnable scalar count.
pub fn count_params(cfg: &NetConfig) -> usize {
    let k = cfg.kernel_size;
    let block = |cin: usize, cout: usize| cin * cout * k + cout * cout * k + 4 * cout;
    let mut n = 0;
    let mut cin = ChannelKind::COUNT;
    for level in 0..=cfg.unet_levels {
        n += block(cin, cfg.width(level));
        cin = cfg.width(level);
    }
    for level in cfg.out_level()..cfg.unet_levels {
        let (w, below) = (cfg.width(level), cfg.width(level + 1));
        n += below * w * 2 + w + block(2 * w, w);
    }
    n + transformer_params(cfg) + (cfg.width(cfg.out_level()) + cfg.model_dim + 1) * EventLabel::COUNT
}

/// Input projection plus all encoder layers.
fn transformer_params(cfg: &NetConfig) -> usize {
    let d = cfg.model_dim;
    let f = d * cfg.ffn_mult;
    let layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
    cfg.width(cfg.unet_levels) * d + d + cfg.transformer_layers * layer
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w1: ParamId,
    g1: ParamId,
    b1: ParamId,
    w2: ParamId,
    g2: ParamId,
    b2: ParamId,
    bn1: usize,
    bn2: usize,
}

#[derive(Debug, Clone)]
struct UpBlock {
    up_w: ParamId,
    up_b: ParamId,
    block: ConvBlock,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: [ParamId; 8],
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

/// Output of [`Net::forward`]: handles on the caller's tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[B, T', 4]`, columns in [`EventLabel`] order.
    pub logits: Var,
    /// Decoder features `[B, T', C]`.
    pub v_unet: Var,
    /// Transformer features at output resolution `[B, T', model_dim]`.
    pub v_trans: Var,
}

#[derive(Debug, Clone)]
pub struct Net {
    pub cfg: NetConfig,
    pub params: ParamStore,
    pub norms: Vec<BatchNorm1d>,
    encoder: Vec<ConvBlock>,
    decoder: Vec<UpBlock>,
    proj: (ParamId, ParamId),
    layers: Vec<EncoderLayer>,
    head: (ParamId, ParamId),
}

struct Builder {
    rng: ChaCha8Rng,
    params: ParamStore,
    norms: Vec<BatchNorm1d>,
}

impl Builder {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| (std * rng.sample::<f64, _>(StandardNormal)) as f32);
        self.params.add(name, t)
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound) as f32);
        self.params.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) -> Result<ParamId> {
        self.params.add(name, Tensor::full(shape, v))
    }

    /// He-normal conv weights, BN affine at identity.
    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvBlock> {
        let half = |b: &mut Self, tag: &str, cin: usize| -> Result<(ParamId, ParamId, ParamId, usize)> {
            let w = b.normal(format!("{name}.{tag}.w"), &[cout, cin, k], (2.0 / (cin * k) as f64).sqrt())?;
            let g = b.constant(format!("{name}.{tag}.bn.gamma"), &[cout], 1.0)?;
            let beta = b.constant(format!("{name}.{tag}.bn.beta"), &[cout], 0.0)?;
            let mut bn = BatchNorm1d::new(cout);
            bn.eps = BN_EPS;
            bn.running = Some(RunningStats::identity(cout));
            b.norms.push(bn);
            Ok((w, g, beta, b.norms.len() - 1))
        };
        let (w1, g1, b1, bn1) = half(self, "conv1", cin)?;
        let (w2, g2, b2, bn2) = half(self, "conv2", cout)?;
        Ok(ConvBlock {
            w1,
            g1,
            b1,
            w2,
            g2,
            b2,
            bn1,
            bn2,
        })
    }

    /// Xavier-uniform weight `[din, dout]` and zero bias.
    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<(ParamId, ParamId)> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let w = self.uniform(format!("{name}.w"), &[din, dout], bound)?;
        let b = self.constant(format!("{name}.b"), &[dout], 0.0)?;
        Ok((w, b))
    }
}

impl Net {
    /// Freshly initialized network; weights depend only on `cfg` and `seed`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamStore::new(),
            norms: Vec::new(),
        };
        let k = cfg.kernel_size;
        let mut encoder = Vec::new();
        let mut cin = ChannelKind::COUNT;
        for level in 0..=cfg.unet_levels {
            encoder.push(b.conv_block(&format!("enc{level}"), cin, cfg.width(level), k)?);
            cin = cfg.width(level);
        }
        let mut decoder = Vec::new();
        for level in (cfg.out_level()..cfg.unet_levels).rev() {
            let (w, below) = (cfg.width(level), cfg.width(level + 1));
            let up_w = b.normal(format!("dec{level}.up.w"), &[below, w, 2], (1.0 / below as f64).sqrt())?;
            let up_b = b.constant(format!("dec{level}.up.b"), &[w], 0.0)?;
            let block = b.conv_block(&format!("dec{level}"), 2 * w, w, k)?;
            decoder.push(UpBlock { up_w, up_b, block });
        }
        let d = cfg.model_dim;
        let proj = b.linear("proj", cfg.width(cfg.unet_levels), d)?;
        let mut layers = Vec::new();
        for l in 0..cfg.transformer_layers {
            let p = format!("trans{l}");
            let mut attn = Vec::new();
            for name in ["q", "k", "v", "o"] {
                let (w, bias) = b.linear(&format!("{p}.attn.{name}"), d, d)?;
                attn.extend([w, bias]);
            }
            let ln1 = (
                b.constant(format!("{p}.ln1.gamma"), &[d], 1.0)?,
                b.constant(format!("{p}.ln1.beta"), &[d], 0.0)?,
            );
            let ff1 = b.linear(&format!("{p}.ff1"), d, d * cfg.ffn_mult)?;
            let ff2 = b.linear(&format!("{p}.ff2"), d * cfg.ffn_mult, d)?;
            let ln2 = (
                b.constant(format!("{p}.ln2.gamma"), &[d], 1.0)?,
                b.constant(format!("{p}.ln2.beta"), &[d], 0.0)?,
            );
            layers.push(EncoderLayer {
                attn: attn.try_into().expect("four projections"),
                ln1,
                ff1,
                ff2,
                ln2,
            });
        }
        let c_out = cfg.width(cfg.out_level());
        let head = b.linear("head", c_out + d, EventLabel::COUNT)?;
        // the Transformer rows start small so the head initially reads local features
        let scale = cfg.trans_head_init as f32;
        let w = b.params.get_mut(head.0);
        for v in &mut w.data_mut()[c_out * EventLabel::COUNT..] {
            *v *= scale;
        }
        Ok(Self {
            cfg,
            params: b.params,
            norms: b.norms,
            encoder,
            decoder,
            proj,
            layers,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Places all parameters on `tape`, cast to `F`; indexed by [`ParamId::index`].
    pub fn bind<F: Real>(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                let t = t.cast::<F>();
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// `x` is `[B, 3, input_len]` in [`ChannelKind`] order; channels absent
    /// from `mask` are zero-filled. Train mode updates batch-norm statistics.
    pub fn forward<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        params: &[Var],
        x: Var,
        mask: ModalityMask,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        mask.validate()?;
        let cfg = &self.cfg;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != ChannelKind::COUNT || shape[2] != cfg.input_len {
            return Err(Error::Shape(format!(
                "network input must be [B, {}, {}], got {shape:?}",
                ChannelKind::COUNT,
                cfg.input_len
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let batch = shape[0];
        let p = |id: ParamId| params[id.index()];

        let x = if mask.count() == ChannelKind::COUNT {
            x
        } else {
            let len = cfg.input_len;
            let m = Tensor::from_fn(&shape, |i| {
                if mask.flags[(i / len) % ChannelKind::COUNT] {
                    F::one()
                } else {
                    F::zero()
                }
            });
            let m = tape.constant(m);
            tape.mul(x, m)?
        };
        let mut h = tape.pad_end(x, 2, cfg.padded_len() - cfg.input_len)?;

        let pad = cfg.kernel_size / 2;
        let levels = cfg.unet_levels;
        let out_level = cfg.out_level();
        let mut skips = Vec::with_capacity(levels);
        for (level, blk) in self.encoder.iter().enumerate() {
            h = conv_block(tape, &mut self.norms, blk, params, h, pad, mode)?;
            if level < levels {
                skips.push(h);
                h = tape.maxpool1d(h, 2)?;
            }
        }
        let bottleneck = h;

        for (up, level) in self.decoder.iter().zip((out_level..levels).rev()) {
            let u = tape.conv1d_transpose(h, p(up.up_w), Some(p(up.up_b)), 2)?;
            let cat = tape.concat(&[u, skips[level]], 1)?;
            h = conv_block(tape, &mut self.norms, &up.block, params, cat, pad, mode)?;
        }
        let t_out = cfg.out_len();
        let dec = tape.permute(h, &[0, 2, 1])?;
        let v_unet = tape.narrow(dec, 1, 0, t_out)?;

        let tokens = tape.permute(bottleneck, &[0, 2, 1])?;
        let mut z = tape.linear(tokens, p(self.proj.0), Some(p(self.proj.1)))?;
        let n_tok = tape.shape(z)[1];
        let pe = tape.constant(positional_encoding::<F>(n_tok, cfg.model_dim)?);
        z = tape.add_broadcast(z, pe)?;
        for layer in &self.layers {
            let a = &layer.attn;
            let w = MhsaWeights {
                wq: p(a[0]),
                bq: p(a[1]),
                wk: p(a[2]),
                bk: p(a[3]),
                wv: p(a[4]),
                bv: p(a[5]),
                wo: p(a[6]),
                bo: p(a[7]),
            };
            let att = tape.mhsa(z, cfg.heads, &w)?;
            let att = tape.dropout(att, cfg.dropout, mode)?;
            let res = tape.add(z, att)?;
            z = tape.layer_norm(res, p(layer.ln1.0), p(layer.ln1.1), LN_EPS)?;
            let f = tape.linear(z, p(layer.ff1.0), Some(p(layer.ff1.1)))?;
            let f = tape.relu(f);
            let f = tape.linear(f, p(layer.ff2.0), Some(p(layer.ff2.1)))?;
            let f = tape.dropout(f, cfg.dropout, mode)?;
            let res = tape.add(z, f)?;
            z = tape.layer_norm(res, p(layer.ln2.0), p(layer.ln2.1), LN_EPS)?;
        }
        let up = tape.repeat_interleave(z, 1, 1 << (levels - out_level))?;
        let v_trans = tape.narrow(up, 1, 0, t_out)?;

        let fused = tape.concat(&[v_unet, v_trans], 2)?;
        let fused = tape.dropout(fused, cfg.dropout, mode)?;
        let logits = tape.linear(fused, p(self.head.0), Some(p(self.head.1)))?;
        debug_assert_eq!(tape.shape(logits), [batch, t_out, EventLabel::COUNT]);
        Ok(ForwardOutput {
            logits,
            v_unet,
            v_trans,
        })
    }

    /// Eval-mode logits for `x[B, 3, input_len]`.
    pub fn logits(&mut self, x: &Tensor<f32>, mask: ModalityMask) -> Result<Tensor<f32>> {
        let mut tape = Tape::new(0);
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv, mask, Mode::Eval)?;
        Ok(tape.into_value(out.logits))
    }

    /// Eval-mode probabilities `[B, T', 4]`.
    pub fn predict(&mut self, x: &Tensor<f32>, mask: ModalityMask) -> Result<Tensor<f32>> {
        Ok(self.logits(x, mask)?.map(crate::tensor::sigmoid))
    }

    /// Parameters, batch-norm statistics and the config as JSON metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut records: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (i, bn) in self.norms.iter().enumerate() {
            let stats = bn.running.clone().unwrap_or_else(|| RunningStats::identity(bn.channels));
            let to_t = |v: &[f64]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect());
            records.push((format!("bn{i}.running_mean"), to_t(&stats.mean)?));
            records.push((format!("bn{i}.running_var"), to_t(&stats.var)?));
        }
        Ok(Checkpoint {
            metadata: serde_json::to_string(&self.cfg)?,
            records,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: NetConfig = serde_json::from_str(&ckpt.metadata)?;
        let mut net = Net::new(cfg, 0)?;
        for id in net.params.ids().collect::<Vec<_>>() {
            let name = net.params.name(id).to_string();
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != net.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, network shape {:?}",
                    t.shape(),
                    net.params.get(id).shape()
                )));
            }
            *net.params.get_mut(id) = t.clone();
        }
        for (i, bn) in net.norms.iter_mut().enumerate() {
            let get = |what: &str| -> Result<Vec<f64>> {
                let name = format!("bn{i}.{what}");
                let t = ckpt
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                if t.numel() != bn.channels {
                    return Err(Error::Format(format!("{name} has {} entries", t.numel())));
                }
                Ok(t.data().iter().map(|&v| v as f64).collect())
            };
            bn.running = Some(RunningStats {
                mean: get("running_mean")?,
                var: get("running_var")?,
            });
        }
        Ok(net)
    }
}

fn conv_block<F: Real>(
    tape: &mut Tape<F>,
    norms: &mut [BatchNorm1d],
    blk: &ConvBlock,
    params: &[Var],
    x: Var,
    pad: usize,
    mode: Mode,
) -> Result<Var> {
    let p = |id: ParamId| params[id.index()];
    let h = tape.conv1d(x, p(blk.w1), None, 1, pad)?;
    let h = tape.batchnorm1d(h, p(blk.g1), p(blk.b1), &mut norms[blk.bn1], mode)?;
    let h = tape.relu(h);
    let h = tape.conv1d(h, p(blk.w2), None, 1, pad)?;
    let h = tape.batchnorm1d(h, p(blk.g2), p(blk.b2), &mut norms[blk.bn2], mode)?;
    Ok(tape.relu(h))
}
