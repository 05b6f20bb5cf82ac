//! Five-level encoder/decoder image translation network with skip connections.
//!
//! The dilated variant keeps full resolution at every layer: 3x3 kernels with
//! encoder dilations 1, 2, 4, 8, 16 and plain 3x3 decoder convolutions. The
//! strided variant halves resolution per encoder level (4x4, stride 2) and
//! upsamples with transposed convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu_backward, leaky_relu_inplace, Conv2d, ConvSpec, ConvTranspose2d, FeatureMap, Params,
};
use crate::real::Real;

pub const LEVELS: usize = 5;
pub const RGB_CHANNELS: usize = 3;
pub const UNET_LEAKY_SLOPE: f64 = 0.2;
/// Parameter count of the full-width dilated network and the tolerance around it.
pub const REFERENCE_PARAM_COUNT: usize = 2_350_000;
pub const PARAM_COUNT_TOLERANCE: f64 = 0.15;
/// Channel width of the first level at full scale.
pub const FULL_BASE_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetVariant {
    Dilated,
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub variant: UNetVariant,
    pub in_channels: usize,
    pub base_width: usize,
}

impl UNetConfig {
    pub fn dilated(in_channels: usize) -> Self {
        Self {
            variant: UNetVariant::Dilated,
            in_channels,
            base_width: FULL_BASE_WIDTH,
        }
    }

    /// Level widths `min(base * 2^i, 8 * base)`.
    pub fn widths(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| (self.base_width << i).min(8 * self.base_width))
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.variant {
            UNetVariant::Dilated => 1,
            UNetVariant::Strided => 1 << LEVELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Up(ConvTranspose2d<T>),
}

impl<T: Real> Layer<T> {
    fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Up(c) => c.forward(x),
        }
    }

    fn backward(
        &self,
        x: &FeatureMap<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut Layer<T>,
        want_input: bool,
    ) -> Result<Option<FeatureMap<T>>> {
        match (self, grads) {
            (Layer::Conv(c), Layer::Conv(g)) => c.backward(x, grad_out, g, want_input),
            (Layer::Up(c), Layer::Up(g)) => c.backward(x, grad_out, g, want_input),
            _ => Err(Error::invalid("gradient layer kind does not match")),
        }
    }

    pub fn spec(&self) -> ConvSpec {
        match self {
            Layer::Conv(c) => c.spec,
            Layer::Up(c) => c.spec,
        }
    }
}

impl<T: Real> Params<T> for Layer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        match self {
            Layer::Conv(c) => c.visit(prefix, f),
            Layer::Up(c) => c.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        match self {
            Layer::Conv(c) => c.visit_mut(prefix, f),
            Layer::Up(c) => c.visit_mut(prefix, f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    encoder: Vec<Layer<T>>,
    /// The last decoder layer is the linear RGB output.
    decoder: Vec<Layer<T>>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct UNetTrace<T> {
    input: FeatureMap<T>,
    encoder_out: Vec<FeatureMap<T>>,
    /// Decoder inputs after skip concatenation (the first one is `encoder_out[4]`).
    decoder_in: Vec<Option<FeatureMap<T>>>,
    decoder_out: Vec<FeatureMap<T>>,
}

impl<T: Real> UNetTrace<T> {
    pub fn output(&self) -> &FeatureMap<T> {
        self.decoder_out.last().expect("decoder is non-empty")
    }

    /// Output `(channels, height, width)` of every layer in evaluation order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.encoder_out
            .iter()
            .chain(&self.decoder_out)
            .map(|m| m.shape())
            .collect()
    }

    fn decoder_input(&self, d: usize) -> &FeatureMap<T> {
        self.decoder_in[d]
            .as_ref()
            .unwrap_or(&self.encoder_out[LEVELS - 1])
    }
}

impl<T: Real> UNet<T> {
    /// `make(spec, upsample)` builds one layer.
    fn build(config: UNetConfig, mut make: impl FnMut(ConvSpec, bool) -> Layer<T>) -> Result<Self> {
        if config.in_channels == 0 || config.base_width == 0 {
            return Err(Error::invalid(
                "U-Net needs positive input channels and base width",
            ));
        }
        let c = config.widths();
        let enc_spec = |i: usize, cin: usize, cout: usize| match config.variant {
            UNetVariant::Dilated => ConvSpec::same(cin, cout, 3, 1 << i),
            UNetVariant::Strided => ConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel: (4, 4),
                stride: (2, 2),
                padding: (1, 1),
                dilation: (1, 1),
            },
        };
        let mut encoder = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let cin = if i == 0 { config.in_channels } else { c[i - 1] };
            encoder.push(make(enc_spec(i, cin, c[i]), false));
        }
        let dec_spec = |cin: usize, cout: usize| match config.variant {
            UNetVariant::Dilated => ConvSpec::same(cin, cout, 3, 1),
            UNetVariant::Strided => enc_spec(0, cin, cout),
        };
        let upsample = config.variant == UNetVariant::Strided;
        let mut decoder = Vec::with_capacity(LEVELS);
        decoder.push(make(dec_spec(c[4], c[3]), upsample));
        for d in 1..LEVELS {
            let skip = c[LEVELS - 1 - d];
            let cin = 2 * skip;
            let cout = if d == LEVELS - 1 {
                RGB_CHANNELS
            } else {
                c[LEVELS - 2 - d]
            };
            decoder.push(make(dec_spec(cin, cout), upsample));
        }
        let net = Self {
            config,
            encoder,
            decoder,
        };
        net.check_param_count()?;
        Ok(net)
    }

    /// Rejects a full-width dilated network whose size drifted from the reference.
    fn check_param_count(&self) -> Result<()> {
        if self.config.variant == UNetVariant::Dilated && self.config.base_width == FULL_BASE_WIDTH
        {
            let n = self.param_count() as f64;
            let r = REFERENCE_PARAM_COUNT as f64;
            if (n - r).abs() > PARAM_COUNT_TOLERANCE * r {
                return Err(Error::invalid(format!(
                    "U-Net has {n} parameters, expected {r} within {PARAM_COUNT_TOLERANCE}"
                )));
            }
        }
        Ok(())
    }

    pub fn zeros(config: UNetConfig) -> Result<Self> {
        Self::build(config, |spec, up| {
            if up {
                Layer::Up(ConvTranspose2d::zeros(spec))
            } else {
                Layer::Conv(Conv2d::zeros(spec))
            }
        })
    }

    pub fn xavier<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, |spec, up| {
            if up {
                Layer::Up(ConvTranspose2d::xavier(spec, rng))
            } else {
                Layer::Conv(Conv2d::xavier(spec, rng))
            }
        })
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels != self.config.in_channels {
            return Err(Error::invalid(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.channels
            )));
        }
        let m = self.config.size_multiple();
        if x.height == 0
            || x.width == 0
            || !x.height.is_multiple_of(m)
            || !x.width.is_multiple_of(m)
        {
            return Err(Error::invalid(format!(
                "input {}x{} must be a positive multiple of {m}",
                x.height, x.width
            )));
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: &FeatureMap<T>) -> Result<UNetTrace<T>> {
        self.check_input(x)?;
        let slope = T::lit(UNET_LEAKY_SLOPE);
        let mut encoder_out: Vec<FeatureMap<T>> = Vec::with_capacity(LEVELS);
        for (i, layer) in self.encoder.iter().enumerate() {
            let mut y = layer.forward(if i == 0 { x } else { &encoder_out[i - 1] })?;
            leaky_relu_inplace(&mut y.data, slope);
            encoder_out.push(y);
        }
        let mut decoder_in = Vec::with_capacity(LEVELS);
        let mut decoder_out: Vec<FeatureMap<T>> = Vec::with_capacity(LEVELS);
        for (d, layer) in self.decoder.iter().enumerate() {
            let input = if d == 0 {
                None
            } else {
                Some(decoder_out[d - 1].concat_channels(&encoder_out[LEVELS - 1 - d])?)
            };
            let mut y = layer.forward(input.as_ref().unwrap_or(&encoder_out[LEVELS - 1]))?;
            if d + 1 < LEVELS {
                leaky_relu_inplace(&mut y.data, slope);
            }
            decoder_in.push(input);
            decoder_out.push(y);
        }
        Ok(UNetTrace {
            input: x.clone(),
            encoder_out,
            decoder_in,
            decoder_out,
        })
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut trace = self.forward_trace(x)?;
        Ok(trace.decoder_out.pop().expect("decoder is non-empty"))
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient if requested.
    pub fn backward(
        &self,
        trace: &UNetTrace<T>,
        grad_output: &FeatureMap<T>,
        grads: &mut UNet<T>,
        want_input: bool,
    ) -> Result<Option<FeatureMap<T>>> {
        if grad_output.shape() != trace.output().shape() {
            return Err(Error::invalid("U-Net output gradient has the wrong shape"));
        }
        let slope = T::lit(UNET_LEAKY_SLOPE);
        let mut enc_grad: Vec<Option<FeatureMap<T>>> = vec![None; LEVELS];
        let mut g = grad_output.clone();
        for d in (0..LEVELS).rev() {
            if d + 1 < LEVELS {
                leaky_relu_backward(&mut g.data, &trace.decoder_out[d].data, slope);
            }
            let gi = self.decoder[d]
                .backward(trace.decoder_input(d), &g, &mut grads.decoder[d], true)?
                .expect("input gradient requested");
            if d == 0 {
                accumulate(&mut enc_grad[LEVELS - 1], gi);
            } else {
                let (prev, skip) = gi.split_channels(trace.decoder_out[d - 1].channels);
                accumulate(&mut enc_grad[LEVELS - 1 - d], skip);
                g = prev;
            }
        }
        let mut grad_input = None;
        for e in (0..LEVELS).rev() {
            let mut g = enc_grad[e]
                .take()
                .expect("every encoder level feeds the decoder");
            leaky_relu_backward(&mut g.data, &trace.encoder_out[e].data, slope);
            let x = if e == 0 {
                &trace.input
            } else {
                &trace.encoder_out[e - 1]
            };
            let gi = self.encoder[e].backward(x, &g, &mut grads.encoder[e], e > 0 || want_input)?;
            if e > 0 {
                accumulate(&mut enc_grad[e - 1], gi.expect("input gradient requested"));
            } else {
                grad_input = gi;
            }
        }
        Ok(grad_input)
    }
}

fn accumulate<T: Real>(slot: &mut Option<FeatureMap<T>>, g: FeatureMap<T>) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Params<T> for UNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&crate::nn::join_name(prefix, &format!("enc{i}")), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&crate::nn::join_name(prefix, &format!("dec{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&crate::nn::join_name(prefix, &format!("enc{i}")), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&crate::nn::join_name(prefix, &format!("dec{i}")), f);
        }
    }
}
