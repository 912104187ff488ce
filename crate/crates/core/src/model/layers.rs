//! Per-pixel building blocks shared by the batch, streaming, codec and
//! training paths. Every accumulation runs in a fixed order (taps in raster
//! order, then bias) so all paths agree bitwise.

use super::params::{ModelParams, Shape};

/// Bounds on the estimator's log-scale output.
pub const LOG_SCALE_MIN: f64 = -7.0;
pub const LOG_SCALE_MAX: f64 = 7.0;

pub fn hard_sigmoid(x: f64) -> f64 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        x / 6.0 + 0.5
    }
}

pub fn hard_tanh(x: f64) -> f64 {
    if x <= -1.0 {
        -1.0
    } else if x >= 1.0 {
        1.0
    } else {
        x
    }
}

/// Subgradient of [`hard_sigmoid`]; zero at the kinks.
pub fn hard_sigmoid_grad(x: f64) -> f64 {
    if x > -3.0 && x < 3.0 {
        1.0 / 6.0
    } else {
        0.0
    }
}

/// Subgradient of [`hard_tanh`]; zero at the kinks.
pub fn hard_tanh_grad(x: f64) -> f64 {
    if x > -1.0 && x < 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Row/column offsets of a full `k × k` window in raster order.
pub fn full_taps(k: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect()
}

/// The strictly causal half of a `k × k` window: rows above, plus the left
/// neighbours on the current row. Center excluded.
pub fn causal_taps(k: usize) -> Vec<(isize, isize)> {
    full_taps(k)
        .into_iter()
        .filter(|&(dy, dx)| dy < 0 || (dy == 0 && dx < 0))
        .collect()
}

/// Fills `out` with `plane[i+dy][j+dx]` for each tap, zero outside the plane.
pub fn gather_scalar(
    plane: &[f64],
    h: usize,
    w: usize,
    i: usize,
    j: usize,
    taps: &[(isize, isize)],
    out: &mut [f64],
) {
    for (slot, &(dy, dx)) in out.iter_mut().zip(taps) {
        let (y, x) = (i as isize + dy, j as isize + dx);
        *slot = if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            plane[y as usize * w + x as usize]
        } else {
            0.0
        };
    }
}

/// Tap-major window over an `h × w × m` grid: `out[tap * m + c]`.
#[allow(clippy::too_many_arguments)]
pub fn gather_vector(
    grid: &[f64],
    h: usize,
    w: usize,
    m: usize,
    i: usize,
    j: usize,
    taps: &[(isize, isize)],
    out: &mut [f64],
) {
    for (t, &(dy, dx)) in taps.iter().enumerate() {
        let (y, x) = (i as isize + dy, j as isize + dx);
        let dst = &mut out[t * m..(t + 1) * m];
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            let at = (y as usize * w + x as usize) * m;
            dst.copy_from_slice(&grid[at..at + m]);
        } else {
            dst.fill(0.0);
        }
    }
}

/// `out[o] = Σ_t weights[o][t] · window[t] + bias[o]`.
pub fn conv_window(weights: &[f64], bias: &[f64], window: &[f64], out: &mut [f64]) {
    let taps = window.len();
    for (o, (slot, &b)) in out.iter_mut().zip(bias).enumerate() {
        let row = &weights[o * taps..(o + 1) * taps];
        let mut acc = 0.0;
        for (&wt, &x) in row.iter().zip(window) {
            acc += wt * x;
        }
        *slot = acc + b;
    }
}

/// Depthwise stage on a tap-major window; writes pre-activations.
pub fn depthwise_window(p: &ModelParams, window: &[f64], pre: &mut [f64]) {
    let m = p.shape.m;
    let taps = p.shape.dsc_taps();
    let w = &p.weights;
    for (c, slot) in pre.iter_mut().enumerate() {
        let row = &w.dw_w[c * taps..(c + 1) * taps];
        let mut acc = 0.0;
        for (t, &wt) in row.iter().enumerate() {
            acc += wt * window[t * m + c];
        }
        *slot = acc + w.dw_b[c];
    }
}

/// Full depthwise-separable block for one pixel: depthwise, ReLU, pointwise.
/// `relu` receives the activated depthwise output.
pub fn dsc_window(p: &ModelParams, window: &[f64], relu: &mut [f64], out: &mut [f64]) {
    depthwise_window(p, window, relu);
    for v in relu.iter_mut() {
        *v = v.max(0.0);
    }
    conv_window(&p.weights.pw_w, &p.weights.pw_b, relu, out);
}

/// Parameter-free GRU-style combiner of intra-slice features `fx`,
/// hidden-state features `fh` (each `3m` long, Rst|Upd|Cand) and the
/// previous state.
pub fn fusion_gate(fx: &[f64], fh: &[f64], h_prev: &[f64], out: &mut [f64]) {
    let m = h_prev.len();
    for c in 0..m {
        let r = hard_sigmoid(fx[c] + fh[c]);
        let u = hard_sigmoid(fx[m + c] + fh[m + c]);
        let cand = hard_tanh(fx[2 * m + c] + r * fh[2 * m + c]);
        out[c] = u * h_prev[c] + (1.0 - u) * cand;
    }
}

/// Linear estimator producing `(mu_n, raw log-scale)`; the caller clamps.
pub fn estimator_raw(p: &ModelParams, fused: &[f64]) -> (f64, f64) {
    let m = p.shape.m;
    let w = &p.weights;
    let mut mu = 0.0;
    let mut ls = 0.0;
    for c in 0..m {
        mu += w.est_w[c] * fused[c];
    }
    for c in 0..m {
        ls += w.est_w[m + c] * fused[c];
    }
    (mu + w.est_b[0], ls + w.est_b[1])
}

pub fn clamp_log_scale(raw: f64) -> f64 {
    raw.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)
}

/// Precomputed tap tables for a shape.
#[derive(Debug, Clone)]
pub struct TapSet {
    pub masked: Vec<(isize, isize)>,
    pub full: Vec<(isize, isize)>,
    pub dsc: Vec<(isize, isize)>,
}

impl TapSet {
    pub fn new(shape: &Shape) -> Self {
        Self {
            masked: causal_taps(shape.k_mask),
            full: full_taps(shape.k_mask),
            dsc: full_taps(shape.k_dsc),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        assert_eq!(hard_sigmoid(0.0), 0.5);
        assert_eq!(hard_tanh(0.0), 0.0);
        assert_eq!(hard_sigmoid(3.0), 1.0);
        assert_eq!(hard_sigmoid(-3.0), 0.0);
        assert_eq!(hard_tanh(2.0), 1.0);
        assert_eq!(hard_sigmoid(1.5), 0.75);
        assert_eq!(hard_tanh(-0.3), -0.3);
        assert_eq!(hard_sigmoid_grad(3.0), 0.0);
        assert_eq!(hard_sigmoid_grad(2.9), 1.0 / 6.0);
        assert_eq!(hard_tanh_grad(-1.0), 0.0);
    }

    #[test]
    fn causal_tap_layout() {
        let taps = causal_taps(7);
        assert_eq!(taps.len(), 24);
        assert_eq!(taps.first(), Some(&(-3, -3)));
        assert_eq!(taps.last(), Some(&(0, -1)));
        assert_eq!(full_taps(7).len(), 49);
        assert_eq!(causal_taps(3), vec![(-1, -1), (-1, 0), (-1, 1), (0, -1)]);
    }

    #[test]
    fn corner_window_sees_sixteen_pixels() {
        let plane = vec![1.0; 10 * 10];
        let taps = full_taps(7);
        let mut win = vec![0.0; 49];
        gather_scalar(&plane, 10, 10, 0, 0, &taps, &mut win);
        assert_eq!(win.iter().filter(|&&v| v != 0.0).count(), 16);
    }

    #[test]
    fn gate_saturated_update_keeps_state() {
        let m = 3;
        let mut fx = vec![0.3; 3 * m];
        let fh = vec![-0.2; 3 * m];
        for c in 0..m {
            fx[m + c] = 3.5;
        }
        let h_prev = [0.25, -0.75, 0.9];
        let mut out = [0.0; 3];
        fusion_gate(&fx, &fh, &h_prev, &mut out);
        assert_eq!(out, h_prev);
    }

    #[test]
    fn gate_closed_reset_and_update() {
        let m = 2;
        let fx = vec![-2.0, -2.0, -1.5, -1.5, 0.4, 1.7];
        let fh = vec![-1.0, -1.5, -2.0, -2.0, 9.0, 9.0];
        let mut out = [0.0; 2];
        fusion_gate(&fx, &fh, &[0.6, -0.6], &mut out);
        assert_eq!(out, [hard_tanh(0.4), hard_tanh(1.7)]);
        let _ = m;
    }

    #[test]
    fn gate_scalar_hand_evaluation() {
        // R = 0.5, U = 0.7, C = tanh(0.2 + 0.5 * 0.6) = 0.5
        let fx = [0.0, 0.6, 0.2];
        let fh = [0.0, 0.6, 0.6];
        let mut out = [0.0];
        fusion_gate(&fx, &fh, &[0.4], &mut out);
        assert!((out[0] - 0.43).abs() < 1e-15, "{}", out[0]);
    }
}
