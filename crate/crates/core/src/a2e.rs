//! Audio-to-expression regression: a per-frame network mapping a 16x29 logit
//! window to a 32-dim code, and a content-aware temporal filter that predicts
//! convex combination weights over 8 neighbouring per-frame codes.

use rand::Rng;

use crate::audio_features::{AudioFeatureWindow, LOGIT_WIDTH, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::face_model::{AudioExpressionCode, CODE_DIM};
use crate::nn::{
    leaky_relu_backward, leaky_relu_inplace, Conv2d, ConvSpec, FeatureMap, Linear, Params,
};
use crate::real::Real;

/// Negative slope of every leaky ReLU in both networks.
pub const LEAKY_SLOPE: f64 = 0.02;
/// Number of per-frame codes the filter combines.
pub const FILTER_TAPS: usize = 8;
/// Frame offset of filter slot 0 relative to the predicted frame (slots cover t-4 ..= t+3).
pub const FILTER_FIRST_OFFSET: isize = -(FILTER_TAPS as isize / 2);

/// Channel widths of the four time-strided convolutions.
const CONV_CHANNELS: [usize; 5] = [LOGIT_WIDTH, 32, 32, 64, 64];
const FC_WIDTHS: [usize; 4] = [64, 128, 64, CODE_DIM];
const FILTER_CHANNELS: [usize; 6] = [CODE_DIM, 16, 8, 4, 2, 1];

fn time_conv(in_channels: usize, out_channels: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        in_channels,
        out_channels,
        kernel: (3, 1),
        stride: (stride, 1),
        padding: (1, 0),
        dilation: (1, 1),
    }
}

/// Per-frame expression regressor: four `(3,1)` convolutions with stride
/// `(2,1)` over time, then three affine layers ending in TanH.
#[derive(Debug, Clone, PartialEq)]
pub struct PerFrameNet<T> {
    pub convs: Vec<Conv2d<T>>,
    pub fcs: Vec<Linear<T>>,
}

/// Activations kept from a per-frame forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct PerFrameTrace<T> {
    input: FeatureMap<T>,
    conv_out: Vec<FeatureMap<T>>,
    fc_in: Vec<Vec<T>>,
    pub code: Vec<T>,
}

impl<T: Real> PerFrameTrace<T> {
    /// `(time, channels)` of the input and of every convolution output.
    pub fn shape_chain(&self) -> Vec<(usize, usize)> {
        std::iter::once(&self.input)
            .chain(&self.conv_out)
            .map(|m| (m.height, m.channels))
            .collect()
    }
}

impl<T: Real> PerFrameNet<T> {
    pub fn zeros() -> Self {
        Self {
            convs: (0..4)
                .map(|i| Conv2d::zeros(time_conv(CONV_CHANNELS[i], CONV_CHANNELS[i + 1], 2)))
                .collect(),
            fcs: (0..3)
                .map(|i| Linear::zeros(FC_WIDTHS[i], FC_WIDTHS[i + 1]))
                .collect(),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            convs: (0..4)
                .map(|i| Conv2d::xavier(time_conv(CONV_CHANNELS[i], CONV_CHANNELS[i + 1], 2), rng))
                .collect(),
            fcs: (0..3)
                .map(|i| Linear::xavier(FC_WIDTHS[i], FC_WIDTHS[i + 1], rng))
                .collect(),
        }
    }

    /// Runs the network on a row-major `16 x 29` window.
    pub fn forward_trace(&self, window: &[T]) -> Result<PerFrameTrace<T>> {
        if window.len() != WINDOW_LEN * LOGIT_WIDTH {
            return Err(Error::invalid(format!(
                "per-frame network expects a {WINDOW_LEN}x{LOGIT_WIDTH} window, got {} values",
                window.len()
            )));
        }
        // logits become channels, time becomes the height axis
        let mut data = vec![T::zero(); window.len()];
        for t in 0..WINDOW_LEN {
            for c in 0..LOGIT_WIDTH {
                data[c * WINDOW_LEN + t] = window[t * LOGIT_WIDTH + c];
            }
        }
        let input = FeatureMap::from_vec(LOGIT_WIDTH, WINDOW_LEN, 1, data)?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut conv_out = Vec::with_capacity(4);
        let mut x = input.clone();
        for conv in &self.convs {
            let mut y = conv.forward(&x)?;
            leaky_relu_inplace(&mut y.data, slope);
            conv_out.push(y.clone());
            x = y;
        }
        let mut fc_in = Vec::with_capacity(3);
        let mut h = x.data;
        for (i, fc) in self.fcs.iter().enumerate() {
            fc_in.push(h.clone());
            h = fc.forward(&h)?;
            if i + 1 < self.fcs.len() {
                leaky_relu_inplace(&mut h, slope);
            } else {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(PerFrameTrace {
            input,
            conv_out,
            fc_in,
            code: h,
        })
    }

    pub fn forward(&self, window: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_trace(window)?.code)
    }

    /// Accumulates parameter gradients for `dL/dcode`.
    pub fn backward(
        &self,
        trace: &PerFrameTrace<T>,
        grad_code: &[T],
        grads: &mut Self,
    ) -> Result<()> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut g: Vec<T> = grad_code
            .iter()
            .zip(&trace.code)
            .map(|(&g, &y)| g * (T::one() - y * y))
            .collect();
        for i in (0..self.fcs.len()).rev() {
            let gin = self.fcs[i].backward(&trace.fc_in[i], &g, &mut grads.fcs[i]);
            g = gin;
            if i > 0 {
                leaky_relu_backward(&mut g, &trace.fc_in[i], slope);
            }
        }
        let last = trace.conv_out.last().expect("four convolutions");
        leaky_relu_backward(&mut g, &last.data, slope);
        let mut gmap = FeatureMap::from_vec(last.channels, last.height, last.width, g)?;
        for i in (0..self.convs.len()).rev() {
            let x = if i == 0 {
                &trace.input
            } else {
                &trace.conv_out[i - 1]
            };
            let gin = self.convs[i].backward(x, &gmap, &mut grads.convs[i], i > 0)?;
            if let Some(mut gin) = gin {
                leaky_relu_backward(&mut gin.data, &trace.conv_out[i - 1].data, slope);
                gmap = gin;
            }
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for PerFrameNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&crate::nn::join_name(prefix, &format!("conv{i}")), f);
        }
        for (i, l) in self.fcs.iter().enumerate() {
            l.visit(&crate::nn::join_name(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&crate::nn::join_name(prefix, &format!("conv{i}")), f);
        }
        for (i, l) in self.fcs.iter_mut().enumerate() {
            l.visit_mut(&crate::nn::join_name(prefix, &format!("fc{i}")), f);
        }
    }
}

/// Filter-weight network: five kernel-3 convolutions over the 8 time slots
/// (channels 32 -> 16 -> 8 -> 4 -> 2 -> 1), then an 8 -> 8 affine layer and softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterNet<T> {
    pub convs: Vec<Conv2d<T>>,
    pub fc: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FilterTrace<T> {
    input: FeatureMap<T>,
    conv_out: Vec<FeatureMap<T>>,
    pub weights: Vec<T>,
}

impl<T: Real> FilterNet<T> {
    pub fn zeros() -> Self {
        Self {
            convs: (0..5)
                .map(|i| Conv2d::zeros(time_conv(FILTER_CHANNELS[i], FILTER_CHANNELS[i + 1], 1)))
                .collect(),
            fc: Linear::zeros(FILTER_TAPS, FILTER_TAPS),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            convs: (0..5)
                .map(|i| {
                    Conv2d::xavier(
                        time_conv(FILTER_CHANNELS[i], FILTER_CHANNELS[i + 1], 1),
                        rng,
                    )
                })
                .collect(),
            fc: Linear::xavier(FILTER_TAPS, FILTER_TAPS, rng),
        }
    }

    /// `codes` holds the 8 per-frame codes of the window, oldest first.
    pub fn forward_trace(&self, codes: &[Vec<T>]) -> Result<FilterTrace<T>> {
        if codes.len() != FILTER_TAPS || codes.iter().any(|c| c.len() != CODE_DIM) {
            return Err(Error::invalid(format!(
                "filter expects {FILTER_TAPS} codes of dimension {CODE_DIM}"
            )));
        }
        let mut data = vec![T::zero(); CODE_DIM * FILTER_TAPS];
        for (t, code) in codes.iter().enumerate() {
            for (c, &v) in code.iter().enumerate() {
                data[c * FILTER_TAPS + t] = v;
            }
        }
        let input = FeatureMap::from_vec(CODE_DIM, FILTER_TAPS, 1, data)?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut conv_out = Vec::with_capacity(5);
        let mut x = input.clone();
        for conv in &self.convs {
            let mut y = conv.forward(&x)?;
            leaky_relu_inplace(&mut y.data, slope);
            conv_out.push(y.clone());
            x = y;
        }
        let logits = self.fc.forward(&x.data)?;
        Ok(FilterTrace {
            input,
            conv_out,
            weights: softmax(&logits),
        })
    }

    pub fn forward(&self, codes: &[Vec<T>]) -> Result<Vec<T>> {
        Ok(self.forward_trace(codes)?.weights)
    }

    /// Accumulates parameter gradients for `dL/dweights`; returns `dL/dcodes`.
    pub fn backward(
        &self,
        trace: &FilterTrace<T>,
        grad_weights: &[T],
        grads: &mut Self,
    ) -> Result<Vec<Vec<T>>> {
        let w = &trace.weights;
        let dot: T = w.iter().zip(grad_weights).map(|(&a, &b)| a * b).sum();
        let grad_logits: Vec<T> = w
            .iter()
            .zip(grad_weights)
            .map(|(&wi, &gi)| wi * (gi - dot))
            .collect();
        let last = trace.conv_out.last().expect("five convolutions");
        let mut g = self.fc.backward(&last.data, &grad_logits, &mut grads.fc);
        leaky_relu_backward(&mut g, &last.data, T::lit(LEAKY_SLOPE));
        let mut gmap = FeatureMap::from_vec(last.channels, last.height, last.width, g)?;
        for i in (0..self.convs.len()).rev() {
            let x = if i == 0 {
                &trace.input
            } else {
                &trace.conv_out[i - 1]
            };
            let mut gin = self.convs[i]
                .backward(x, &gmap, &mut grads.convs[i], true)?
                .expect("input gradient requested");
            if i > 0 {
                leaky_relu_backward(
                    &mut gin.data,
                    &trace.conv_out[i - 1].data,
                    T::lit(LEAKY_SLOPE),
                );
            }
            gmap = gin;
        }
        Ok((0..FILTER_TAPS)
            .map(|t| {
                (0..CODE_DIM)
                    .map(|c| gmap.data[c * FILTER_TAPS + t])
                    .collect()
            })
            .collect())
    }
}

impl<T: Real> Params<T> for FilterNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&crate::nn::join_name(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit(&crate::nn::join_name(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&crate::nn::join_name(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit_mut(&crate::nn::join_name(prefix, "fc"), f);
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Both halves of the audio-to-expression network.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionNet<T> {
    pub per_frame: PerFrameNet<T>,
    pub filter: FilterNet<T>,
}

impl<T: Real> ExpressionNet<T> {
    pub fn zeros() -> Self {
        Self {
            per_frame: PerFrameNet::zeros(),
            filter: FilterNet::zeros(),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            per_frame: PerFrameNet::xavier(rng),
            filter: FilterNet::xavier(rng),
        }
    }

    /// Per-frame codes for a whole sequence of windows.
    pub fn per_frame_codes(&self, windows: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        windows.iter().map(|w| self.per_frame.forward(w)).collect()
    }

    /// Filters a sequence of per-frame codes; slots outside the sequence
    /// repeat the nearest edge code.
    pub fn filter_sequence(&self, codes: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        (0..codes.len())
            .map(|t| {
                let slots = code_window(codes, t);
                let w = self.filter.forward(&slots)?;
                Ok(combine(&slots, &w))
            })
            .collect()
    }

    /// Smoothed codes for every frame of a sequence of windows.
    pub fn predict_sequence(&self, windows: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        self.filter_sequence(&self.per_frame_codes(windows)?)
    }
}

impl<T: Real> Params<T> for ExpressionNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        self.per_frame
            .visit(&crate::nn::join_name(prefix, "per_frame"), f);
        self.filter
            .visit(&crate::nn::join_name(prefix, "filter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.per_frame
            .visit_mut(&crate::nn::join_name(prefix, "per_frame"), f);
        self.filter
            .visit_mut(&crate::nn::join_name(prefix, "filter"), f);
    }
}

/// Index of the frame feeding filter slot `slot` when predicting frame `t`,
/// clamped to the sequence.
pub fn slot_frame(t: usize, slot: usize, len: usize) -> usize {
    (t as isize + FILTER_FIRST_OFFSET + slot as isize).clamp(0, len as isize - 1) as usize
}

/// The 8 codes feeding the filter for frame `t`, edge-replicated.
pub fn code_window<T: Clone>(codes: &[Vec<T>], t: usize) -> Vec<Vec<T>> {
    (0..FILTER_TAPS)
        .map(|s| codes[slot_frame(t, s, codes.len())].clone())
        .collect()
}

/// `sum_i w_i c_i`.
pub fn combine<T: Real>(codes: &[Vec<T>], weights: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); codes[0].len()];
    for (c, &w) in codes.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(c) {
            *o += w * v;
        }
    }
    out
}

pub fn window_values<T: Real>(window: &AudioFeatureWindow) -> Vec<T> {
    window
        .flatten()
        .into_iter()
        .map(|v| T::lit(v as f64))
        .collect()
}

fn to_code<T: Real>(v: &[T]) -> Result<AudioExpressionCode> {
    let vals: Vec<f64> = v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    AudioExpressionCode::new(&vals)
}

/// Eight consecutive per-frame codes, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeWindow {
    pub codes: [AudioExpressionCode; FILTER_TAPS],
}

/// Per-frame code for one window.
pub fn per_frame_forward<T: Real>(
    window: &AudioFeatureWindow,
    params: &PerFrameNet<T>,
) -> Result<AudioExpressionCode> {
    to_code(&params.forward(&window_values::<T>(window))?)
}

/// Convex filter weights for a window of 8 codes.
pub fn filter_weights<T: Real>(
    codes: &CodeWindow,
    params: &FilterNet<T>,
) -> Result<[f64; FILTER_TAPS]> {
    let input: Vec<Vec<T>> = codes
        .codes
        .iter()
        .map(|c| c.0.iter().map(|&v| T::lit(v)).collect())
        .collect();
    let w = params.forward(&input)?;
    let mut out = [0.0; FILTER_TAPS];
    for (o, v) in out.iter_mut().zip(&w) {
        *o = v.to_f64().unwrap_or(f64::NAN);
    }
    Ok(out)
}

/// Filtered code from the 8 windows of frames `t-4 ..= t+3`.
pub fn filtered_prediction<T: Real>(
    windows: &[AudioFeatureWindow],
    per_frame: &PerFrameNet<T>,
    filter: &FilterNet<T>,
) -> Result<AudioExpressionCode> {
    if windows.len() != FILTER_TAPS {
        return Err(Error::invalid(format!(
            "filtered prediction needs {FILTER_TAPS} windows, got {}",
            windows.len()
        )));
    }
    let codes = windows
        .iter()
        .map(|w| per_frame.forward(&window_values::<T>(w)))
        .collect::<Result<Vec<_>>>()?;
    let w = filter.forward(&codes)?;
    let z = combine(&codes, &w);
    // rounding can push a convex combination of values at +-1 a hair outside
    let z: Vec<T> = z
        .into_iter()
        .map(|v| v.max(-T::one()).min(T::one()))
        .collect();
    to_code(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_features::LogitFrame;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng) -> AudioFeatureWindow {
        let rows: Vec<f32> = (0..WINDOW_LEN * LOGIT_WIDTH)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        AudioFeatureWindow::from_flat(&rows).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PerFrameNet::<f32>::zeros();
        let code = per_frame_forward(&random_window(&mut rng), &net).unwrap();
        assert!(code.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_stay_inside_tanh_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let net = PerFrameNet::<f64>::xavier(&mut rng);
            let code = per_frame_forward(&random_window(&mut rng), &net).unwrap();
            assert!(code.0.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn shape_chain_matches_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PerFrameNet::<f32>::xavier(&mut rng);
        let w = window_values::<f32>(&random_window(&mut rng));
        let trace = net.forward_trace(&w).unwrap();
        assert_eq!(
            trace.shape_chain(),
            vec![(16, 29), (8, 32), (4, 32), (2, 64), (1, 64)]
        );
        assert_eq!(trace.code.len(), 32);
    }

    #[test]
    fn wrong_window_size_is_rejected() {
        let net = PerFrameNet::<f32>::zeros();
        assert!(matches!(
            net.forward(&[0.0; 10]),
            Err(Error::InvalidInput(_))
        ));
        let f = FilterNet::<f32>::zeros();
        assert!(f.forward(&vec![vec![0.0; 32]; 7]).is_err());
    }

    #[test]
    fn hand_sized_conv_and_affine_forward() {
        // 2 time steps x 2 logits; one (3,1) conv with stride 2, pad 1 -> 1 x 1;
        // then an affine 1 -> 1 and tanh.
        let spec = time_conv(2, 1, 2);
        let mut conv = Conv2d::<f64>::zeros(spec);
        // weight layout [out][in][k]: logit 0 taps (a0,a1,a2), logit 1 taps (b0,b1,b2)
        conv.weight = vec![0.5, -1.0, 2.0, 0.25, 0.75, -0.5];
        conv.bias = vec![0.1];
        // input x[t][c]: t0 = (1, 2), t1 = (3, 4); CHW: channel 0 = [1, 3], channel 1 = [2, 4]
        let x = FeatureMap::from_vec(2, 2, 1, vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let y = conv.forward(&x).unwrap();
        // output row 0 sees rows -1 (pad), 0, 1:
        // ch0: -1*1 + 2*3 = 5 ; ch1: 0.75*2 + -0.5*4 = -0.5 ; + 0.1 = 4.6
        assert_eq!(y.shape(), (1, 1, 1));
        assert!((y.data[0] - 4.6).abs() < 1e-12);
        let mut h = y.data.clone();
        leaky_relu_inplace(&mut h, LEAKY_SLOPE);
        let fc = Linear {
            in_features: 1,
            out_features: 1,
            weight: vec![-0.2],
            bias: vec![0.3],
        };
        let out = fc.forward(&h).unwrap()[0].tanh();
        // tanh(-0.2 * 4.6 + 0.3) = tanh(-0.62)
        assert!((out - (-0.62f64).tanh()).abs() < 1e-12);
        // a negative pre-activation goes through the 0.02 slope
        let mut neg = vec![-5.0];
        leaky_relu_inplace(&mut neg, LEAKY_SLOPE);
        assert!((neg[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_filter_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes = CodeWindow {
            codes: std::array::from_fn(|_| {
                AudioExpressionCode::new(
                    &(0..CODE_DIM)
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            }),
        };
        let w = filter_weights(&codes, &FilterNet::<f64>::zeros()).unwrap();
        assert!(w.iter().all(|&x| (x - 0.125).abs() < 1e-15));
    }

    #[test]
    fn hand_sized_filter_head() {
        // all convolutions zero except the last bias, so every slot feature is
        // leaky(b); the head then adds its own bias per slot.
        let mut f = FilterNet::<f64>::zeros();
        f.convs[4].bias = vec![-1.0];
        for i in 0..FILTER_TAPS {
            f.fc.weight[i * FILTER_TAPS + i] = 2.0;
            f.fc.bias[i] = i as f64 * 0.1;
        }
        let w = f.forward(&vec![vec![0.0; CODE_DIM]; FILTER_TAPS]).unwrap();
        // logits_i = 2 * (-0.02) + 0.1 i ; softmax removes the constant
        let denom: f64 = (0..FILTER_TAPS).map(|i| (0.1 * i as f64).exp()).sum();
        for (i, wi) in w.iter().enumerate() {
            assert!((wi - (0.1 * i as f64).exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_windows_give_the_per_frame_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pf = PerFrameNet::<f64>::xavier(&mut rng);
        let fnet = FilterNet::<f64>::xavier(&mut rng);
        let w = random_window(&mut rng);
        let windows = vec![w.clone(); FILTER_TAPS];
        let z = filtered_prediction(&windows, &pf, &fnet).unwrap();
        let single = per_frame_forward(&w, &pf).unwrap();
        for (a, b) in z.0.iter().zip(&single.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_filter_averages_per_frame_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pf = PerFrameNet::<f64>::xavier(&mut rng);
        let windows: Vec<_> = (0..FILTER_TAPS).map(|_| random_window(&mut rng)).collect();
        let z = filtered_prediction(&windows, &pf, &FilterNet::zeros()).unwrap();
        let codes: Vec<_> = windows
            .iter()
            .map(|w| per_frame_forward(w, &pf).unwrap())
            .collect();
        for c in 0..CODE_DIM {
            let mean = codes.iter().map(|z| z.0[c]).sum::<f64>() / 8.0;
            assert!((z.0[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn filtered_prediction_matches_weighted_sum_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pf = PerFrameNet::<f64>::xavier(&mut rng);
        let mut fnet = FilterNet::<f64>::xavier(&mut rng);
        fnet.fc
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-1.0..1.0));
        let windows: Vec<_> = (0..FILTER_TAPS).map(|_| random_window(&mut rng)).collect();
        let codes: Vec<_> = windows
            .iter()
            .map(|w| per_frame_forward(w, &pf).unwrap())
            .collect();
        let w = filter_weights(
            &CodeWindow {
                codes: codes.clone().try_into().unwrap(),
            },
            &fnet,
        )
        .unwrap();
        let z = filtered_prediction(&windows, &pf, &fnet).unwrap();
        for c in 0..CODE_DIM {
            let mut acc = 0.0;
            for i in 0..FILTER_TAPS {
                acc += w[i] * codes[i].0[c];
            }
            assert!((z.0[c] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_filtering_replicates_edges() {
        assert_eq!(slot_frame(0, 0, 10), 0);
        assert_eq!(slot_frame(0, 4, 10), 0);
        assert_eq!(slot_frame(0, 7, 10), 3);
        assert_eq!(slot_frame(9, 7, 10), 9);
        assert_eq!(slot_frame(5, 0, 10), 1);
        let codes: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64; CODE_DIM]).collect();
        let win = code_window(&codes, 0);
        let firsts: Vec<f64> = win.iter().map(|c| c[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = ExpressionNet::<f32>::xavier(&mut rng);
        let windows: Vec<Vec<f32>> = (0..12)
            .map(|_| window_values(&random_window(&mut rng)))
            .collect();
        let a = net.predict_sequence(&windows).unwrap();
        let b = net.predict_sequence(&windows).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_logits_window_round_trip() {
        let w = AudioFeatureWindow::from_rows([LogitFrame::splat(0.5); WINDOW_LEN]);
        assert_eq!(
            window_values::<f32>(&w),
            vec![0.5; WINDOW_LEN * LOGIT_WIDTH]
        );
    }
}
