//! Forward pass with cached intermediates and hand-written reverse-mode
//! gradients over a window of consecutive slices.

use std::f64::consts::LN_2;

use crate::model::layers::{
    clamp_log_scale, conv_window, depthwise_window, estimator_raw, gather_scalar, gather_vector,
    hard_sigmoid, hard_sigmoid_grad, hard_tanh, hard_tanh_grad, TapSet, LOG_SCALE_MAX,
    LOG_SCALE_MIN,
};
use crate::model::{normalize_slice, Gradients, HiddenState, ModelParams, Tensors};
use crate::prob::{log_prob_with_grad, LogisticParams};

/// Output of one truncated-BPTT window.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub loss_bits: f64,
    pub grads: Gradients,
    /// Final hidden state, detached from the graph.
    pub h_out: HiddenState,
    /// Fingerprint of every activation's piecewise regime; two evaluations
    /// with equal fingerprints lie on the same smooth piece of the loss.
    pub regimes: u64,
}

struct SliceCache {
    plane: Vec<f64>,
    h_prev: HiddenState,
    dsc_pre: Vec<f64>,
    dsc_act: Vec<f64>,
    fh: Vec<f64>,
    fx: Vec<f64>,
    fused: Vec<f64>,
    preds: Vec<LogisticParams>,
    ls_raw: Vec<f64>,
    fs: Option<Vec<f64>>,
}

/// FNV-1a over regime codes.
struct RegimeHash(u64);

impl RegimeHash {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn push(&mut self, code: u8) {
        self.0 ^= u64::from(code);
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn hsig(&mut self, x: f64) {
        self.push(if x <= -3.0 {
            0
        } else if x >= 3.0 {
            2
        } else {
            1
        });
    }

    fn htanh(&mut self, x: f64) {
        self.push(if x <= -1.0 {
            3
        } else if x >= 1.0 {
            5
        } else {
            4
        });
    }
}

fn gate_forward(fx: &[f64], fh: &[f64], h_prev: &[f64], out: &mut [f64], rh: &mut RegimeHash) {
    let m = h_prev.len();
    for c in 0..m {
        let pr = fx[c] + fh[c];
        let pu = fx[m + c] + fh[m + c];
        let r = hard_sigmoid(pr);
        let u = hard_sigmoid(pu);
        let pc = fx[2 * m + c] + r * fh[2 * m + c];
        rh.hsig(pr);
        rh.hsig(pu);
        rh.htanh(pc);
        out[c] = u * h_prev[c] + (1.0 - u) * hard_tanh(pc);
    }
}

/// Backward through the fusion gate; accumulates into `dfx`, `dfh`, `dh`.
fn gate_backward(
    fx: &[f64],
    fh: &[f64],
    h_prev: &[f64],
    dout: &[f64],
    dfx: &mut [f64],
    dfh: &mut [f64],
    dh: &mut [f64],
) {
    let m = h_prev.len();
    for c in 0..m {
        let g = dout[c];
        if g == 0.0 {
            continue;
        }
        let pr = fx[c] + fh[c];
        let pu = fx[m + c] + fh[m + c];
        let r = hard_sigmoid(pr);
        let u = hard_sigmoid(pu);
        let pc = fx[2 * m + c] + r * fh[2 * m + c];
        let cand = hard_tanh(pc);

        dh[c] += g * u;
        let du = g * (h_prev[c] - cand);
        let dpc = g * (1.0 - u) * hard_tanh_grad(pc);
        dfx[2 * m + c] += dpc;
        dfh[2 * m + c] += dpc * r;
        let dr = dpc * fh[2 * m + c];
        let dpu = du * hard_sigmoid_grad(pu);
        dfx[m + c] += dpu;
        dfh[m + c] += dpu;
        let dpr = dr * hard_sigmoid_grad(pr);
        dfx[c] += dpr;
        dfh[c] += dpr;
    }
}

fn conv_weight_backward(dout: &[f64], window: &[f64], dw: &mut [f64], db: &mut [f64]) {
    let taps = window.len();
    for (o, &g) in dout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        for (d, &x) in dw[o * taps..(o + 1) * taps].iter_mut().zip(window) {
            *d += g * x;
        }
    }
}

pub(crate) struct WindowEngine<'a> {
    p: &'a ModelParams,
    taps: TapSet,
    h: usize,
    w: usize,
    zero_hidden: bool,
}

impl<'a> WindowEngine<'a> {
    pub(crate) fn new(p: &'a ModelParams, h: usize, w: usize, zero_hidden: bool) -> Self {
        Self {
            p,
            taps: TapSet::new(&p.shape),
            h,
            w,
            zero_hidden,
        }
    }

    fn forward_slice(
        &self,
        samples: &[u16],
        h_prev: HiddenState,
        need_update: bool,
        loss: &mut f64,
        rh: &mut RegimeHash,
    ) -> (SliceCache, Option<HiddenState>) {
        let p = self.p;
        let (h, w, m) = (self.h, self.w, p.m());
        let g = p.shape.gate_channels();
        let d = p.depth_bits;
        let l = p.scale_l;
        let n = h * w;
        let plane = normalize_slice(samples, d);

        let mut dsc_pre = vec![0.0; n * m];
        let mut dsc_act = vec![0.0; n * m];
        let mut fh = vec![0.0; n * g];
        let mut win = vec![0.0; self.taps.dsc.len() * m];
        for k in 0..n {
            let (i, j) = (k / w, k % w);
            gather_vector(&h_prev.data, h, w, m, i, j, &self.taps.dsc, &mut win);
            let pre = &mut dsc_pre[k * m..(k + 1) * m];
            depthwise_window(p, &win, pre);
            let act = &mut dsc_act[k * m..(k + 1) * m];
            for (a, &v) in act.iter_mut().zip(pre.iter()) {
                rh.push(if v > 0.0 { 7 } else { 6 });
                *a = v.max(0.0);
            }
            conv_window(
                &p.weights.pw_w,
                &p.weights.pw_b,
                act,
                &mut fh[k * g..(k + 1) * g],
            );
        }

        let mut fx = vec![0.0; n * g];
        let mut fused = vec![0.0; n * m];
        let mut preds = Vec::with_capacity(n);
        let mut ls_raw = Vec::with_capacity(n);
        let mut mwin = vec![0.0; self.taps.masked.len()];
        for k in 0..n {
            let (i, j) = (k / w, k % w);
            gather_scalar(&plane, h, w, i, j, &self.taps.masked, &mut mwin);
            let fxk = &mut fx[k * g..(k + 1) * g];
            conv_window(&p.weights.masked_w, &p.weights.masked_b, &mwin, fxk);
            let fk = &mut fused[k * m..(k + 1) * m];
            gate_forward(fxk, &fh[k * g..(k + 1) * g], h_prev.at(i, j), fk, rh);
            let (mu_n, raw) = estimator_raw(p, fk);
            rh.push(if raw <= LOG_SCALE_MIN {
                8
            } else if raw >= LOG_SCALE_MAX {
                10
            } else {
                9
            });
            let lp = LogisticParams {
                mu_n,
                log_s: clamp_log_scale(raw),
            };
            *loss -= log_prob_with_grad(u32::from(samples[k]), &lp, d, l).0 / LN_2;
            preds.push(lp);
            ls_raw.push(raw);
        }

        let (fs, next) = if need_update {
            let mut fs = vec![0.0; n * g];
            let mut next = HiddenState::zeros(h, w, m);
            let mut swin = vec![0.0; self.taps.full.len()];
            for k in 0..n {
                let (i, j) = (k / w, k % w);
                gather_scalar(&plane, h, w, i, j, &self.taps.full, &mut swin);
                let fsk = &mut fs[k * g..(k + 1) * g];
                conv_window(&p.weights.std_w, &p.weights.std_b, &swin, fsk);
                gate_forward(
                    fsk,
                    &fh[k * g..(k + 1) * g],
                    h_prev.at(i, j),
                    &mut next.data[k * m..(k + 1) * m],
                    rh,
                );
            }
            (Some(fs), Some(next))
        } else {
            (None, None)
        };

        (
            SliceCache {
                plane,
                h_prev,
                dsc_pre,
                dsc_act,
                fh,
                fx,
                fused,
                preds,
                ls_raw,
                fs,
            },
            next,
        )
    }

    /// Backward for one slice. `dh_next` is the gradient arriving at this
    /// slice's updated state; returns the gradient for its input state.
    fn backward_slice(
        &self,
        cache: &SliceCache,
        samples: &[u16],
        dh_next: Option<&[f64]>,
        grads: &mut Tensors,
    ) -> Vec<f64> {
        let p = self.p;
        let wt = &p.weights;
        let (h, w, m) = (self.h, self.w, p.m());
        let g = p.shape.gate_channels();
        let n = h * w;
        let d = p.depth_bits;
        let l = p.scale_l;
        let mut dfh = vec![0.0; n * g];
        let mut dh_prev = vec![0.0; n * m];
        let mut dfeat = vec![0.0; g];

        // update path
        if let (Some(dnext), Some(fs)) = (dh_next, cache.fs.as_ref()) {
            let mut swin = vec![0.0; self.taps.full.len()];
            for k in 0..n {
                let dout = &dnext[k * m..(k + 1) * m];
                if dout.iter().all(|&v| v == 0.0) {
                    continue;
                }
                dfeat.fill(0.0);
                gate_backward(
                    &fs[k * g..(k + 1) * g],
                    &cache.fh[k * g..(k + 1) * g],
                    cache.h_prev.at(k / w, k % w),
                    dout,
                    &mut dfeat,
                    &mut dfh[k * g..(k + 1) * g],
                    &mut dh_prev[k * m..(k + 1) * m],
                );
                gather_scalar(&cache.plane, h, w, k / w, k % w, &self.taps.full, &mut swin);
                conv_weight_backward(&dfeat, &swin, &mut grads.std_w, &mut grads.std_b);
            }
        }

        // prediction path
        let mut mwin = vec![0.0; self.taps.masked.len()];
        let mut dfused = vec![0.0; m];
        for k in 0..n {
            let lp = cache.preds[k];
            let (_, dmu, dls) = log_prob_with_grad(u32::from(samples[k]), &lp, d, l);
            // loss is −log2 p
            let dmu = -dmu / LN_2;
            let raw = cache.ls_raw[k];
            let dls = if raw > LOG_SCALE_MIN && raw < LOG_SCALE_MAX {
                -dls / LN_2
            } else {
                0.0
            };
            let fused = &cache.fused[k * m..(k + 1) * m];
            grads.est_b[0] += dmu;
            grads.est_b[1] += dls;
            for c in 0..m {
                grads.est_w[c] += dmu * fused[c];
                grads.est_w[m + c] += dls * fused[c];
                dfused[c] = dmu * wt.est_w[c] + dls * wt.est_w[m + c];
            }
            dfeat.fill(0.0);
            gate_backward(
                &cache.fx[k * g..(k + 1) * g],
                &cache.fh[k * g..(k + 1) * g],
                cache.h_prev.at(k / w, k % w),
                &dfused,
                &mut dfeat,
                &mut dfh[k * g..(k + 1) * g],
                &mut dh_prev[k * m..(k + 1) * m],
            );
            gather_scalar(
                &cache.plane,
                h,
                w,
                k / w,
                k % w,
                &self.taps.masked,
                &mut mwin,
            );
            conv_weight_backward(&dfeat, &mwin, &mut grads.masked_w, &mut grads.masked_b);
        }

        // depthwise-separable block over the previous state
        let kd = self.taps.dsc.len();
        let mut win = vec![0.0; kd * m];
        let mut dact = vec![0.0; m];
        for k in 0..n {
            let dout = &dfh[k * g..(k + 1) * g];
            let act = &cache.dsc_act[k * m..(k + 1) * m];
            conv_weight_backward(dout, act, &mut grads.pw_w, &mut grads.pw_b);
            dact.fill(0.0);
            for (o, &gv) in dout.iter().enumerate() {
                if gv != 0.0 {
                    for c in 0..m {
                        dact[c] += wt.pw_w[o * m + c] * gv;
                    }
                }
            }
            let pre = &cache.dsc_pre[k * m..(k + 1) * m];
            let (i, j) = (k / w, k % w);
            gather_vector(&cache.h_prev.data, h, w, m, i, j, &self.taps.dsc, &mut win);
            for c in 0..m {
                let dp = if pre[c] > 0.0 { dact[c] } else { 0.0 };
                if dp == 0.0 {
                    continue;
                }
                grads.dw_b[c] += dp;
                for (t, &(dy, dx)) in self.taps.dsc.iter().enumerate() {
                    grads.dw_w[c * kd + t] += dp * win[t * m + c];
                    let (y, x) = (i as isize + dy, j as isize + dx);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        let at = (y as usize * w + x as usize) * m + c;
                        dh_prev[at] += wt.dw_w[c * kd + t] * dp;
                    }
                }
            }
        }
        dh_prev
    }

    /// Runs the window forward and, if `backward`, accumulates gradients.
    pub(crate) fn run(
        &self,
        slices: &[&[u16]],
        h_in: &HiddenState,
        backward: bool,
    ) -> WindowResult {
        let p = self.p;
        let (h, w, m) = (self.h, self.w, p.m());
        let mut loss = 0.0;
        let mut rh = RegimeHash::new();
        let mut caches = Vec::with_capacity(slices.len());
        let mut state = if self.zero_hidden {
            HiddenState::zeros(h, w, m)
        } else {
            h_in.clone()
        };
        for &s in slices {
            let input = if self.zero_hidden {
                HiddenState::zeros(h, w, m)
            } else {
                state.clone()
            };
            let (cache, next) = self.forward_slice(s, input, !self.zero_hidden, &mut loss, &mut rh);
            if let Some(next) = next {
                state = next;
            }
            caches.push(cache);
        }

        let mut grads = Tensors::zeros(&p.shape);
        if backward {
            let mut carry: Option<Vec<f64>> = None;
            for (cache, &s) in caches.iter().zip(slices).rev() {
                let dh = self.backward_slice(cache, s, carry.as_deref(), &mut grads);
                carry = (!self.zero_hidden).then_some(dh);
            }
        }
        WindowResult {
            loss_bits: loss,
            grads,
            h_out: state,
            regimes: rh.0,
        }
    }
}
