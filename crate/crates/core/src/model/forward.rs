use super::layers::{
    clamp_log_scale, conv_window, dsc_window, estimator_raw, fusion_gate, gather_scalar,
    gather_vector, TapSet,
};
use super::params::ModelParams;
use crate::prob::LogisticParams;

/// Per-pixel recurrent state, `h × w × m` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(h: usize, w: usize, m: usize) -> Self {
        Self {
            h,
            w,
            m,
            data: vec![0.0; h * w * m],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.w + j) * self.m;
        &self.data[k..k + self.m]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.w * self.m;
        &self.data[i * n..(i + 1) * n]
    }
}

/// Three `m`-channel feature planes in one `h × w × 3m` buffer; channel
/// ranges `[0,m)` Rst, `[m,2m)` Upd, `[2m,3m)` Cand.
#[derive(Debug, Clone, PartialEq)]
pub struct GateFeatures {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl GateFeatures {
    fn new(h: usize, w: usize, m: usize) -> Self {
        Self {
            h,
            w,
            m,
            data: vec![0.0; h * w * 3 * m],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let g = 3 * self.m;
        let k = (i * self.w + j) * g;
        &self.data[k..k + g]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let g = 3 * self.m;
        let k = (i * self.w + j) * g;
        &mut self.data[k..k + g]
    }

    pub fn rst(&self, i: usize, j: usize) -> &[f64] {
        &self.at(i, j)[..self.m]
    }

    pub fn upd(&self, i: usize, j: usize) -> &[f64] {
        &self.at(i, j)[self.m..2 * self.m]
    }

    pub fn cand(&self, i: usize, j: usize) -> &[f64] {
        &self.at(i, j)[2 * self.m..]
    }
}

/// Scales samples into `[0, 1)` by `1 / 2^D` for use as convolution input.
pub fn normalize_slice(samples: &[u16], depth_bits: u8) -> Vec<f64> {
    let scale = f64::from(1u32 << depth_bits);
    samples.iter().map(|&v| f64::from(v) / scale).collect()
}

fn conv_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    taps: &[(isize, isize)],
    weights: &[f64],
    bias: &[f64],
    m: usize,
) -> GateFeatures {
    let mut out = GateFeatures::new(h, w, m);
    let mut win = vec![0.0; taps.len()];
    for i in 0..h {
        for j in 0..w {
            gather_scalar(plane, h, w, i, j, taps, &mut win);
            conv_window(weights, bias, &win, out.at_mut(i, j));
        }
    }
    out
}

/// Causal (masked) convolution of a normalized slice.
pub fn masked_conv_forward(plane: &[f64], h: usize, w: usize, p: &ModelParams) -> GateFeatures {
    let taps = TapSet::new(&p.shape);
    let wt = &p.weights;
    conv_plane(plane, h, w, &taps.masked, &wt.masked_w, &wt.masked_b, p.m())
}

/// Full-neighbourhood convolution of a completed, normalized slice.
pub fn standard_conv_forward(plane: &[f64], h: usize, w: usize, p: &ModelParams) -> GateFeatures {
    let taps = TapSet::new(&p.shape);
    let wt = &p.weights;
    conv_plane(plane, h, w, &taps.full, &wt.std_w, &wt.std_b, p.m())
}

/// Depthwise-separable convolution of the hidden state.
pub fn dsc_forward(state: &HiddenState, p: &ModelParams) -> GateFeatures {
    let taps = TapSet::new(&p.shape).dsc;
    let (h, w, m) = (state.h, state.w, state.m);
    let mut out = GateFeatures::new(h, w, m);
    let mut win = vec![0.0; taps.len() * m];
    let mut relu = vec![0.0; m];
    for i in 0..h {
        for j in 0..w {
            gather_vector(&state.data, h, w, m, i, j, &taps, &mut win);
            dsc_window(p, &win, &mut relu, out.at_mut(i, j));
        }
    }
    out
}

/// Estimator head applied to a fused state vector.
pub fn estimate(p: &ModelParams, fused: &[f64]) -> LogisticParams {
    let (mu_n, raw) = estimator_raw(p, fused);
    LogisticParams {
        mu_n,
        log_s: clamp_log_scale(raw),
    }
}

/// Per-slice prediction context: the hidden-state features are computed
/// once, after which any pixel can be predicted from the causal part of a
/// (possibly partially decoded) slice.
pub struct SlicePredictor<'a> {
    params: &'a ModelParams,
    h_prev: &'a HiddenState,
    fh: GateFeatures,
    taps: TapSet,
    window: Vec<f64>,
    fx: Vec<f64>,
    fused: Vec<f64>,
}

impl<'a> SlicePredictor<'a> {
    pub fn new(params: &'a ModelParams, h_prev: &'a HiddenState) -> Self {
        let shape = params.shape;
        Self {
            params,
            h_prev,
            fh: dsc_forward(h_prev, params),
            taps: TapSet::new(&shape),
            window: vec![0.0; shape.masked_taps()],
            fx: vec![0.0; shape.gate_channels()],
            fused: vec![0.0; shape.m],
        }
    }

    /// Hidden-state features shared by prediction and update.
    pub fn hidden_features(&self) -> &GateFeatures {
        &self.fh
    }

    /// Prediction for `(i, j)`. Reads only pixels strictly before `(i, j)`
    /// in raster order from `plane`.
    pub fn predict_at(&mut self, plane: &[f64], i: usize, j: usize) -> LogisticParams {
        let (h, w) = (self.h_prev.h, self.h_prev.w);
        let wt = &self.params.weights;
        gather_scalar(plane, h, w, i, j, &self.taps.masked, &mut self.window);
        conv_window(&wt.masked_w, &wt.masked_b, &self.window, &mut self.fx);
        fusion_gate(
            &self.fx,
            self.fh.at(i, j),
            self.h_prev.at(i, j),
            &mut self.fused,
        );
        estimate(self.params, &self.fused)
    }

    /// Next hidden state from the completed slice.
    pub fn update(&self, plane: &[f64]) -> HiddenState {
        update_with_features(plane, self.h_prev, &self.fh, self.params)
    }
}

fn update_with_features(
    plane: &[f64],
    h_prev: &HiddenState,
    fh: &GateFeatures,
    p: &ModelParams,
) -> HiddenState {
    let (h, w, m) = (h_prev.h, h_prev.w, h_prev.m);
    let fx = standard_conv_forward(plane, h, w, p);
    let mut next = HiddenState::zeros(h, w, m);
    for i in 0..h {
        for j in 0..w {
            let k = (i * w + j) * m;
            fusion_gate(
                fx.at(i, j),
                fh.at(i, j),
                h_prev.at(i, j),
                &mut next.data[k..k + m],
            );
        }
    }
    next
}

/// Logistic parameters for every pixel of a slice, in raster order.
pub fn predict_slice(
    samples: &[u16],
    h_prev: &HiddenState,
    p: &ModelParams,
) -> Vec<LogisticParams> {
    let plane = normalize_slice(samples, p.depth_bits);
    let mut pred = SlicePredictor::new(p, h_prev);
    let mut out = Vec::with_capacity(plane.len());
    for i in 0..h_prev.h {
        for j in 0..h_prev.w {
            out.push(pred.predict_at(&plane, i, j));
        }
    }
    out
}

/// Hidden state for the next slice, computed from the full current slice.
pub fn update_hidden(samples: &[u16], h_prev: &HiddenState, p: &ModelParams) -> HiddenState {
    let plane = normalize_slice(samples, p.depth_bits);
    let fh = dsc_forward(h_prev, p);
    update_with_features(&plane, h_prev, &fh, p)
}
