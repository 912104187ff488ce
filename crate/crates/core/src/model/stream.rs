//! Row-streaming execution of one slice step (prediction plus hidden-state
//! update) with bounded memory.
//!
//! Input rows arrive in lockstep: slice row `i` together with hidden-state
//! row `i`. The engine keeps `k_mask` slice rows and `k_dsc + 1` hidden rows
//! in cyclic line buffers, slides a window along each output row, and emits
//! output row `o` as soon as slice row `o + k_mask/2` is in. Window contents
//! and accumulation order match the batch path, so results are bitwise equal.

use super::forward::{estimate, HiddenState};
use super::layers::{conv_window, dsc_window, fusion_gate, TapSet};
use super::params::ModelParams;
use crate::prob::LogisticParams;

/// One finished output row.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRow {
    pub row: usize,
    pub predictions: Vec<LogisticParams>,
    /// `w × m` next-slice hidden state for this row.
    pub hidden: Vec<f64>,
}

/// A `k × k` window of `depth`-vectors that shifts one column per step.
#[derive(Debug, Clone)]
struct SlidingWindow {
    k: usize,
    depth: usize,
    /// `[dy][dx][c]`, row-major.
    cells: Vec<f64>,
}

impl SlidingWindow {
    fn new(k: usize, depth: usize) -> Self {
        Self {
            k,
            depth,
            cells: vec![0.0; k * k * depth],
        }
    }

    fn clear(&mut self) {
        self.cells.fill(0.0);
    }

    /// Drops the leftmost column and appends `column(dy)` on the right.
    fn shift_in(&mut self, mut column: impl FnMut(usize, &mut [f64])) {
        let (k, d) = (self.k, self.depth);
        for dy in 0..k {
            let row = &mut self.cells[dy * k * d..(dy + 1) * k * d];
            row.copy_within(d.., 0);
            column(dy, &mut row[(k - 1) * d..]);
        }
    }

    fn cell(&self, dy: usize, dx: usize) -> &[f64] {
        let at = (dy * self.k + dx) * self.depth;
        &self.cells[at..at + self.depth]
    }
}

/// Cyclic buffer of `capacity` rows, each `len` values.
#[derive(Debug, Clone)]
struct LineBuffer {
    capacity: usize,
    len: usize,
    rows: Vec<f64>,
}

impl LineBuffer {
    fn new(capacity: usize, len: usize) -> Self {
        Self {
            capacity,
            len,
            rows: vec![0.0; capacity * len],
        }
    }

    fn store(&mut self, row: usize, data: &[f64]) {
        let slot = row % self.capacity;
        self.rows[slot * self.len..(slot + 1) * self.len].copy_from_slice(data);
    }

    fn get(&self, row: usize) -> &[f64] {
        let slot = row % self.capacity;
        &self.rows[slot * self.len..(slot + 1) * self.len]
    }
}

pub struct StreamEngine<'a> {
    params: &'a ModelParams,
    h: usize,
    w: usize,
    taps: TapSet,
    pixels: LineBuffer,
    hidden: LineBuffer,
    pixel_window: SlidingWindow,
    hidden_window: SlidingWindow,
    rows_in: usize,
    rows_out: usize,
    scale: f64,
    // per-pixel scratch
    masked_in: Vec<f64>,
    full_in: Vec<f64>,
    dsc_in: Vec<f64>,
    relu: Vec<f64>,
    fx: Vec<f64>,
    fs: Vec<f64>,
    fh: Vec<f64>,
    fused: Vec<f64>,
}

impl<'a> StreamEngine<'a> {
    pub fn new(params: &'a ModelParams, h: usize, w: usize) -> Self {
        let s = params.shape;
        let m = s.m;
        Self {
            params,
            h,
            w,
            taps: TapSet::new(&s),
            pixels: LineBuffer::new(s.k_mask, w),
            // k_dsc + 1 rows for the default shapes; wider when the pixel
            // lag exceeds the hidden-state radius by more than one row
            hidden: LineBuffer::new((s.k_dsc + 1).max(s.k_mask / 2 + s.k_dsc / 2 + 1), w * m),
            pixel_window: SlidingWindow::new(s.k_mask, 1),
            hidden_window: SlidingWindow::new(s.k_dsc, m),
            rows_in: 0,
            rows_out: 0,
            scale: f64::from(1u32 << params.depth_bits),
            masked_in: vec![0.0; s.masked_taps()],
            full_in: vec![0.0; s.std_taps()],
            dsc_in: vec![0.0; s.dsc_taps() * m],
            relu: vec![0.0; m],
            fx: vec![0.0; s.gate_channels()],
            fs: vec![0.0; s.gate_channels()],
            fh: vec![0.0; s.gate_channels()],
            fused: vec![0.0; m],
        }
    }

    /// Number of f64 slots held by buffers and windows; independent of the
    /// slice height.
    pub fn footprint(&self) -> usize {
        self.pixels.rows.len()
            + self.hidden.rows.len()
            + self.pixel_window.cells.len()
            + self.hidden_window.cells.len()
            + self.masked_in.len()
            + self.full_in.len()
            + self.dsc_in.len()
            + self.relu.len()
            + self.fx.len()
            + self.fs.len()
            + self.fh.len()
            + self.fused.len()
    }

    /// Feeds slice row `i` and hidden row `i`; returns any rows that became
    /// complete.
    pub fn push_row(&mut self, samples: &[u16], hidden: &[f64]) -> Vec<StreamRow> {
        assert!(self.rows_in < self.h, "more rows than the slice height");
        assert_eq!(samples.len(), self.w);
        assert_eq!(hidden.len(), self.w * self.params.m());
        let plane: Vec<f64> = samples.iter().map(|&v| f64::from(v) / self.scale).collect();
        self.pixels.store(self.rows_in, &plane);
        self.hidden.store(self.rows_in, hidden);
        self.rows_in += 1;
        let mut out = Vec::new();
        let lag = self.params.shape.k_mask / 2;
        while self.rows_out < self.h && self.rows_in >= (self.rows_out + lag + 1).min(self.h) {
            out.push(self.emit_row());
        }
        out
    }

    fn emit_row(&mut self) -> StreamRow {
        let o = self.rows_out;
        let (w, m) = (self.w, self.params.m());
        let k = self.params.shape.k_mask;
        let kd = self.params.shape.k_dsc;
        let (r, rd) = ((k / 2) as isize, (kd / 2) as isize);

        // prime both windows with the columns left of j = 0 (all padding)
        // and the first `r` real columns
        self.pixel_window.clear();
        self.hidden_window.clear();
        for col in 0..r {
            self.shift_pixel_column(o, col);
        }
        for col in 0..rd {
            self.shift_hidden_column(o, col);
        }

        let mut predictions = Vec::with_capacity(w);
        let mut hidden_out = vec![0.0; w * m];
        for j in 0..w {
            self.shift_pixel_column(o, j as isize + r);
            self.shift_hidden_column(o, j as isize + rd);

            let center = |dy: isize, dx: isize, rr: isize| ((dy + rr) as usize, (dx + rr) as usize);
            for (slot, &(dy, dx)) in self.masked_in.iter_mut().zip(&self.taps.masked) {
                let (y, x) = center(dy, dx, r);
                *slot = self.pixel_window.cell(y, x)[0];
            }
            for (slot, &(dy, dx)) in self.full_in.iter_mut().zip(&self.taps.full) {
                let (y, x) = center(dy, dx, r);
                *slot = self.pixel_window.cell(y, x)[0];
            }
            for (t, &(dy, dx)) in self.taps.dsc.iter().enumerate() {
                let (y, x) = center(dy, dx, rd);
                self.dsc_in[t * m..(t + 1) * m].copy_from_slice(self.hidden_window.cell(y, x));
            }

            let p = self.params;
            let wt = &p.weights;
            conv_window(&wt.masked_w, &wt.masked_b, &self.masked_in, &mut self.fx);
            conv_window(&wt.std_w, &wt.std_b, &self.full_in, &mut self.fs);
            dsc_window(p, &self.dsc_in, &mut self.relu, &mut self.fh);

            let prev = &self.hidden.get(o)[j * m..(j + 1) * m];
            fusion_gate(&self.fx, &self.fh, prev, &mut self.fused);
            predictions.push(estimate(p, &self.fused));
            fusion_gate(
                &self.fs,
                &self.fh,
                prev,
                &mut hidden_out[j * m..(j + 1) * m],
            );
        }
        self.rows_out += 1;
        StreamRow {
            row: o,
            predictions,
            hidden: hidden_out,
        }
    }

    fn shift_pixel_column(&mut self, o: usize, col: isize) {
        let (h, w) = (self.h, self.w);
        let r = (self.params.shape.k_mask / 2) as isize;
        let pixels = &self.pixels;
        self.pixel_window.shift_in(|dy, dst| {
            let y = o as isize + dy as isize - r;
            dst[0] = if y >= 0 && (y as usize) < h && col >= 0 && (col as usize) < w {
                pixels.get(y as usize)[col as usize]
            } else {
                0.0
            };
        });
    }

    fn shift_hidden_column(&mut self, o: usize, col: isize) {
        let (h, w, m) = (self.h, self.w, self.params.m());
        let rd = (self.params.shape.k_dsc / 2) as isize;
        let hidden = &self.hidden;
        self.hidden_window.shift_in(|dy, dst| {
            let y = o as isize + dy as isize - rd;
            if y >= 0 && (y as usize) < h && col >= 0 && (col as usize) < w {
                let c = col as usize;
                dst.copy_from_slice(&hidden.get(y as usize)[c * m..(c + 1) * m]);
            } else {
                dst.fill(0.0);
            }
        });
    }
}

/// Runs a whole slice through the streaming engine, row by row.
pub fn stream_forward(
    samples: &[u16],
    h_prev: &HiddenState,
    p: &ModelParams,
) -> (Vec<LogisticParams>, HiddenState) {
    let (h, w, m) = (h_prev.h, h_prev.w, h_prev.m);
    let mut engine = StreamEngine::new(p, h, w);
    let mut predictions = Vec::with_capacity(h * w);
    let mut next = HiddenState::zeros(h, w, m);
    for i in 0..h {
        for row in engine.push_row(&samples[i * w..(i + 1) * w], h_prev.row(i)) {
            predictions.extend(row.predictions);
            let n = w * m;
            next.data[row.row * n..(row.row + 1) * n].copy_from_slice(&row.hidden);
        }
    }
    (predictions, next)
}
