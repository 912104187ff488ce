use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters that fix every tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    /// Hidden-state / feature dimension M.
    pub m: usize,
    /// Kernel size of the masked and standard convolutions.
    pub k_mask: usize,
    /// Kernel size of the depthwise convolution over hidden states.
    pub k_dsc: usize,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            m: 16,
            k_mask: 7,
            k_dsc: 5,
        }
    }
}

impl Shape {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            ..Self::default()
        }
    }

    /// Output channels of every gate-feature producer (Rst | Upd | Cand).
    pub fn gate_channels(&self) -> usize {
        3 * self.m
    }

    pub fn masked_taps(&self) -> usize {
        (self.k_mask * self.k_mask - 1) / 2
    }

    pub fn std_taps(&self) -> usize {
        self.k_mask * self.k_mask
    }

    pub fn dsc_taps(&self) -> usize {
        self.k_dsc * self.k_dsc
    }

    pub fn is_valid(&self) -> bool {
        self.m >= 1 && self.k_mask % 2 == 1 && self.k_dsc % 2 == 1
    }

    /// Lengths of the ten tensors in canonical order.
    pub fn tensor_lens(&self) -> [usize; 10] {
        let (m, g) = (self.m, self.gate_channels());
        [
            g * self.masked_taps(),
            g,
            g * self.std_taps(),
            g,
            m * self.dsc_taps(),
            m,
            g * m,
            g,
            2 * m,
            2,
        ]
    }
}

/// Tensor names in canonical (serialization) order.
pub const TENSOR_NAMES: [&str; 10] = [
    "masked_w", "masked_b", "std_w", "std_b", "dw_w", "dw_b", "pw_w", "pw_b", "est_w", "est_b",
];

/// Every learnable tensor, flattened row-major `[out][in]`.
///
/// Also serves as the gradient and Adam-moment container, since those
/// mirror the parameter shapes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub masked_w: Vec<f64>,
    pub masked_b: Vec<f64>,
    pub std_w: Vec<f64>,
    pub std_b: Vec<f64>,
    pub dw_w: Vec<f64>,
    pub dw_b: Vec<f64>,
    pub pw_w: Vec<f64>,
    pub pw_b: Vec<f64>,
    pub est_w: Vec<f64>,
    pub est_b: Vec<f64>,
}

pub type Gradients = Tensors;

impl Tensors {
    pub fn zeros(shape: &Shape) -> Self {
        let l = shape.tensor_lens();
        Self {
            masked_w: vec![0.0; l[0]],
            masked_b: vec![0.0; l[1]],
            std_w: vec![0.0; l[2]],
            std_b: vec![0.0; l[3]],
            dw_w: vec![0.0; l[4]],
            dw_b: vec![0.0; l[5]],
            pw_w: vec![0.0; l[6]],
            pw_b: vec![0.0; l[7]],
            est_w: vec![0.0; l[8]],
            est_b: vec![0.0; l[9]],
        }
    }

    pub fn as_slices(&self) -> [&[f64]; 10] {
        [
            &self.masked_w,
            &self.masked_b,
            &self.std_w,
            &self.std_b,
            &self.dw_w,
            &self.dw_b,
            &self.pw_w,
            &self.pw_b,
            &self.est_w,
            &self.est_b,
        ]
    }

    pub fn as_slices_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.masked_w,
            &mut self.masked_b,
            &mut self.std_w,
            &mut self.std_b,
            &mut self.dw_w,
            &mut self.dw_b,
            &mut self.pw_w,
            &mut self.pw_b,
            &mut self.est_w,
            &mut self.est_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.as_slices().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.as_slices().into_iter().flatten().copied()
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(f64) -> f64) {
        for t in self.as_slices_mut() {
            for v in t.iter_mut() {
                *v = f(*v);
            }
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Tensors) {
        for (dst, src) in self.as_slices_mut().into_iter().zip(other.as_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Model weights plus the hyperparameters needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: Shape,
    pub depth_bits: u8,
    /// Scaling factor L of the likelihood normalization. Kept on the f32
    /// grid since that is how it is stored on disk.
    pub scale_l: f64,
    pub weights: Tensors,
}

impl ModelParams {
    pub fn zeros(shape: Shape, depth_bits: u8, scale_l: f64) -> Self {
        Self {
            shape,
            depth_bits,
            scale_l: scale_l as f32 as f64,
            weights: Tensors::zeros(&shape),
        }
    }

    pub fn m(&self) -> usize {
        self.shape.m
    }

    /// Copy with every weight rounded to the nearest f32.
    ///
    /// The codec always evaluates this canonical form so that in-memory
    /// f64 weights and weights reloaded from an f32 file predict the same.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        out.weights.map_inplace(|v| v as f32 as f64);
        out.scale_l = self.scale_l as f32 as f64;
        out
    }
}

/// Fan-in scaled uniform initialization; biases start at zero.
pub fn init_params(seed: u64, m: usize, depth_bits: u8, scale_l: f64) -> ModelParams {
    init_params_with_shape(seed, Shape::with_m(m), depth_bits, scale_l)
}

pub fn init_params_with_shape(
    seed: u64,
    shape: Shape,
    depth_bits: u8,
    scale_l: f64,
) -> ModelParams {
    assert!(shape.is_valid(), "invalid model shape {shape:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(shape, depth_bits, scale_l);
    let fan_ins = [
        shape.masked_taps(),
        shape.std_taps(),
        shape.dsc_taps(),
        shape.m,
        shape.m,
    ];
    let w = &mut p.weights;
    for (tensor, fan_in) in [
        &mut w.masked_w,
        &mut w.std_w,
        &mut w.dw_w,
        &mut w.pw_w,
        &mut w.est_w,
    ]
    .into_iter()
    .zip(fan_ins)
    {
        let a = (1.0 / fan_in as f64).sqrt();
        for v in tensor.iter_mut() {
            *v = rng.gen_range(-a..=a);
        }
    }
    p
}

pub fn parameter_count(p: &ModelParams) -> usize {
    p.weights.len()
}

/// Rounds every weight to the nearest IEEE binary16 value.
pub fn quantize_weights_f16(p: &ModelParams) -> ModelParams {
    let mut out = p.clone();
    out.weights.map_inplace(|v| half::f16::from_f64(v).to_f64());
    out
}
