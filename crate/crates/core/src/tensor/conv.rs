//! Temporal convolution, pooling and batch normalization on `[B, C, L]`.

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::tape::{Op, Tape, Var};
use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Running per-channel statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Zero mean, unit variance: makes an untrained layer act as the affine map.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Non-learnable state of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub running: Option<RunningStats>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            momentum: 0.1,
            eps: 1e-5,
            running: None,
        }
    }
}

fn im2col<F: Real>(
    x: &[F],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    lout: usize,
    cols: &mut [F],
) {
    for c in 0..channels {
        let xc = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, v) in row.iter_mut().enumerate() {
                let src = (t * stride + kk) as isize - padding as isize;
                *v = if src >= 0 && (src as usize) < len {
                    xc[src as usize]
                } else {
                    F::zero()
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<F: Real>(
    cols: &[F],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    lout: usize,
    x: &mut [F],
) {
    for c in 0..channels {
        let xc = &mut x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, &v) in row.iter().enumerate() {
                let dst = (t * stride + kk) as isize - padding as isize;
                if dst >= 0 && (dst as usize) < len {
                    xc[dst as usize] += v;
                }
            }
        }
    }
}

fn check_bias<F: Real>(tape: &Tape<F>, b: Option<Var>, n: usize, op: &str) -> Result<()> {
    if let Some(b) = b {
        if tape.shape(b) != [n] {
            return Err(Error::Shape(format!(
                "{op}: bias shape {:?}, expected [{n}]",
                tape.shape(b)
            )));
        }
    }
    Ok(())
}

impl<F: Real> Tape<F> {
    /// Cross-correlation of `x[B, Cin, L]` with `w[Cout, Cin, K]`.
    ///
    /// Output length is `(L + 2·padding − K) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 3 || tx.shape()[1] != tw.shape()[1] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv1d: input {:?} incompatible with weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        if len + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv1d: input {:?} shorter than kernel {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        check_bias(self, b, cout, "conv1d")?;
        let lout = (len + 2 * padding - k) / stride + 1;
        let mut out = vec![F::zero(); bsz * cout * lout];
        let mut cols = vec![F::zero(); cin * k * lout];
        for bi in 0..bsz {
            let ob = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data().iter().enumerate() {
                    ob[c * lout..(c + 1) * lout].fill(bv);
                }
            }
            im2col(
                &tx.data()[bi * cin * len..(bi + 1) * cin * len],
                cin,
                len,
                k,
                stride,
                padding,
                lout,
                &mut cols,
            );
            mm_nn(tw.data(), &cols, ob, cout, cin * k, lout);
        }
        let value = Tensor::new(vec![bsz, cout, lout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Transposed convolution of `x[B, Cin, L]` with `w[Cin, Cout, K]`.
    ///
    /// Output length is `(L − 1)·stride + K`; with `K = stride` it is the
    /// exact upsampling `stride·L`.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 3 || tx.shape()[1] != tw.shape()[0] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv1d_transpose: input {:?} incompatible with weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, k) = (tw.shape()[1], tw.shape()[2]);
        check_bias(self, b, cout, "conv1d_transpose")?;
        let lout = (len - 1) * stride + k;
        let mut out = vec![F::zero(); bsz * cout * lout];
        let mut cols = vec![F::zero(); cout * k * len];
        for bi in 0..bsz {
            cols.fill(F::zero());
            mm_tn(
                tw.data(),
                &tx.data()[bi * cin * len..(bi + 1) * cin * len],
                &mut cols,
                cout * k,
                cin,
                len,
            );
            let ob = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data().iter().enumerate() {
                    ob[c * lout..(c + 1) * lout].fill(bv);
                }
            }
            col2im(&cols, cout, lout, k, stride, 0, len, ob);
        }
        let value = Tensor::new(vec![bsz, cout, lout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::ConvTranspose1d { x, w, b, stride }, &inputs))
    }

    /// Non-overlapping max pooling (window = stride) along the last axis.
    /// A trailing partial window is dropped; ties go to the earliest index.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || window == 0 || tx.shape()[2] < window {
            return Err(Error::Shape(format!(
                "maxpool1d: window {window} on input {:?}",
                tx.shape()
            )));
        }
        let (bsz, c, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let lout = len / window;
        let mut out = Vec::with_capacity(bsz * c * lout);
        let mut argmax = Vec::with_capacity(bsz * c * lout);
        for row in 0..bsz * c {
            for t in 0..lout {
                let start = row * len + t * window;
                let mut best = start;
                for j in start + 1..start + window {
                    if tx.data()[j] > tx.data()[best] {
                        best = j;
                    }
                }
                out.push(tx.data()[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![bsz, c, lout], out)?;
        Ok(self.push(value, Op::MaxPool1d { x, argmax }, &[x]))
    }

    /// Batch normalization of `x[B, C, L]` per channel.
    ///
    /// Train mode normalizes with the batch mean and biased variance and
    /// folds them into `state.running` (unbiased variance, `momentum`).
    /// Eval mode uses the running statistics.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNorm1d,
        mode: Mode,
    ) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || tx.shape()[1] != state.channels {
            return Err(Error::Shape(format!(
                "batchnorm1d: input {:?} for {} channels",
                tx.shape(),
                state.channels
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [state.channels] {
                return Err(Error::Shape(format!(
                    "batchnorm1d: affine shape {:?}, expected [{}]",
                    self.shape(p),
                    state.channels
                )));
            }
        }
        let (bsz, c, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let n = bsz * len;
        let (mean, var): (Vec<f64>, Vec<f64>) = if mode.is_train() {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..bsz {
                    let row = &tx.data()[(bi * c + ch) * len..(bi * c + ch + 1) * len];
                    s += row.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for bi in 0..bsz {
                    let row = &tx.data()[(bi * c + ch) * len..(bi * c + ch + 1) * len];
                    ss += row
                        .iter()
                        .map(|v| {
                            let d = v.to_f64_lossy() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / n as f64;
            }
            let running = state
                .running
                .get_or_insert_with(|| RunningStats::identity(c));
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            for ch in 0..c {
                running.mean[ch] = (1.0 - state.momentum) * running.mean[ch] + state.momentum * mean[ch];
                running.var[ch] =
                    (1.0 - state.momentum) * running.var[ch] + state.momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            let running = state.running.as_ref().ok_or(Error::UninitializedStatistics)?;
            (running.mean.clone(), running.var.clone())
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<F> = var.iter().map(|&v| F::lit(1.0 / (v + state.eps).sqrt())).collect();
        let mut xhat = vec![F::zero(); tx.numel()];
        let mut out = vec![F::zero(); tx.numel()];
        for bi in 0..bsz {
            for ch in 0..c {
                let m = F::lit(mean[ch]);
                let off = (bi * c + ch) * len;
                for t in 0..len {
                    let xh = (tx.data()[off + t] - m) * inv_std[ch];
                    xhat[off + t] = xh;
                    out[off + t] = xh * g[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode.is_train(),
            },
            &[x, gamma, beta],
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<F: Real>(
    tape: &Tape<F>,
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
) {
    let (tx, tw) = (tape.value(x), tape.value(w));
    let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let (cout, k) = (tw.shape()[0], tw.shape()[2]);
    let lout = g.len() / (bsz * cout);
    if let Some(b) = b {
        tape.acc_pub(grads, b, |gb| {
            for bi in 0..bsz {
                for (c, acc) in gb.iter_mut().enumerate() {
                    let off = (bi * cout + c) * lout;
                    *acc += super::kernels::sum(&g[off..off + lout]);
                }
            }
        });
    }
    let mut cols = vec![F::zero(); cin * k * lout];
    tape.acc_pub(grads, w, |gw| {
        for bi in 0..bsz {
            im2col(
                &tx.data()[bi * cin * len..(bi + 1) * cin * len],
                cin,
                len,
                k,
                stride,
                padding,
                lout,
                &mut cols,
            );
            mm_nt(&g[bi * cout * lout..(bi + 1) * cout * lout], &cols, gw, cout, lout, cin * k);
        }
    });
    tape.acc_pub(grads, x, |gx| {
        for bi in 0..bsz {
            cols.fill(F::zero());
            mm_tn(
                tw.data(),
                &g[bi * cout * lout..(bi + 1) * cout * lout],
                &mut cols,
                cin * k,
                cout,
                lout,
            );
            col2im(
                &cols,
                cin,
                len,
                k,
                stride,
                padding,
                lout,
                &mut gx[bi * cin * len..(bi + 1) * cin * len],
            );
        }
    });
}

pub(crate) fn conv_transpose1d_backward<F: Real>(
    tape: &Tape<F>,
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
) {
    let (tx, tw) = (tape.value(x), tape.value(w));
    let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let (cout, k) = (tw.shape()[1], tw.shape()[2]);
    let lout = g.len() / (bsz * cout);
    if let Some(b) = b {
        tape.acc_pub(grads, b, |gb| {
            for bi in 0..bsz {
                for (c, acc) in gb.iter_mut().enumerate() {
                    let off = (bi * cout + c) * lout;
                    *acc += super::kernels::sum(&g[off..off + lout]);
                }
            }
        });
    }
    let mut cols = vec![F::zero(); cout * k * len];
    let gcols: Vec<Vec<F>> = (0..bsz)
        .map(|bi| {
            im2col(
                &g[bi * cout * lout..(bi + 1) * cout * lout],
                cout,
                lout,
                k,
                stride,
                0,
                len,
                &mut cols,
            );
            cols.clone()
        })
        .collect();
    tape.acc_pub(grads, w, |gw| {
        for (bi, gc) in gcols.iter().enumerate() {
            mm_nt(&tx.data()[bi * cin * len..(bi + 1) * cin * len], gc, gw, cin, len, cout * k);
        }
    });
    tape.acc_pub(grads, x, |gx| {
        for (bi, gc) in gcols.iter().enumerate() {
            mm_nn(tw.data(), gc, &mut gx[bi * cin * len..(bi + 1) * cin * len], cin, cout * k, len);
        }
    });
}

pub(crate) fn batchnorm_backward<F: Real>(
    tape: &Tape<F>,
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    (x, gamma, beta): (Var, Var, Var),
    xhat: &[F],
    inv_std: &[F],
    batch_stats: bool,
) {
    let shape = tape.shape(x);
    let (bsz, c, len) = (shape[0], shape[1], shape[2]);
    let gam = tape.value(gamma).data();
    let mut sum_g = vec![F::zero(); c];
    let mut sum_gx = vec![F::zero(); c];
    for bi in 0..bsz {
        for ch in 0..c {
            let off = (bi * c + ch) * len;
            for t in 0..len {
                sum_g[ch] += g[off + t];
                sum_gx[ch] += g[off + t] * xhat[off + t];
            }
        }
    }
    tape.acc_pub(grads, gamma, |gg| {
        for ch in 0..c {
            gg[ch] += sum_gx[ch];
        }
    });
    tape.acc_pub(grads, beta, |gb| {
        for ch in 0..c {
            gb[ch] += sum_g[ch];
        }
    });
    tape.acc_pub(grads, x, |gx| {
        let n = F::lit((bsz * len) as f64);
        for bi in 0..bsz {
            for ch in 0..c {
                let off = (bi * c + ch) * len;
                let scale = gam[ch] * inv_std[ch];
                for t in 0..len {
                    gx[off + t] += if batch_stats {
                        scale / n * (n * g[off + t] - sum_g[ch] - xhat[off + t] * sum_gx[ch])
                    } else {
                        scale * g[off + t]
                    };
                }
            }
        }
    });
}
