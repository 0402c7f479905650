use rand::Rng;

use super::{BatchNorm, ForwardCtx, Init, ParamStore};
use crate::autograd::{ParamId, Var};
use crate::error::{arg_err, Result};
use crate::tensor::{Padding, Scalar};

/// Bias-free convolution with a `kh×kw×Cin×Cout` kernel, same padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel_size: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel_size * kernel_size * c_in;
        let kernel = store.add_param(
            format!("{name}.kernel"),
            Init::HeUniform { fan_in }.tensor(&[kernel_size, kernel_size, c_in, c_out], rng),
        );
        Conv2d {
            kernel,
            kernel_size,
            c_in,
            c_out,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        ctx.tape.conv2d(x, k, self.stride, Padding::Same)
    }

    pub fn param_count(&self) -> usize {
        self.kernel_size * self.kernel_size * self.c_in * self.c_out
    }
}

/// Bias-free depthwise convolution with a `k×k×C` kernel, same padding.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub kernel_size: usize,
    pub channels: usize,
    pub stride: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel_size: usize,
        channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel_size * kernel_size;
        let kernel = store.add_param(
            format!("{name}.kernel"),
            Init::HeUniform { fan_in }.tensor(&[kernel_size, kernel_size, channels], rng),
        );
        DepthwiseConv {
            kernel,
            kernel_size,
            channels,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        ctx.tape.depthwise_conv2d(x, k, self.stride, Padding::Same)
    }

    pub fn param_count(&self) -> usize {
        self.kernel_size * self.kernel_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvKind {
    Full(Conv2d),
    Depthwise(DepthwiseConv),
}

/// Convolution → batch norm → optional ReLU6.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: ConvKind,
    pub norm: BatchNorm,
    pub relu6: bool,
}

impl ConvBn {
    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let y = match &self.conv {
            ConvKind::Full(c) => c.forward(ctx, x)?,
            ConvKind::Depthwise(c) => c.forward(ctx, x)?,
        };
        let y = self.norm.forward(ctx, y)?;
        Ok(if self.relu6 { ctx.tape.relu6(y) } else { y })
    }

    pub fn param_count(&self) -> usize {
        let conv = match &self.conv {
            ConvKind::Full(c) => c.param_count(),
            ConvKind::Depthwise(c) => c.param_count(),
        };
        conv + self.norm.param_count()
    }

    /// Kernel parameter of the convolution.
    pub fn kernel(&self) -> ParamId {
        match &self.conv {
            ConvKind::Full(c) => c.kernel,
            ConvKind::Depthwise(c) => c.kernel,
        }
    }

    /// `(kind, kernel shape)` used to compare architectures structurally.
    pub fn signature(&self) -> (&'static str, Vec<usize>) {
        match &self.conv {
            ConvKind::Full(c) => ("conv", vec![c.kernel_size, c.kernel_size, c.c_in, c.c_out]),
            ConvKind::Depthwise(c) => ("depthwise", vec![c.kernel_size, c.kernel_size, c.channels]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn full<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel_size: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        relu6: bool,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, name, kernel_size, c_in, c_out, stride, rng);
        let norm = BatchNorm::new(store, &format!("{name}.bn"), c_out);
        ConvBn {
            conv: ConvKind::Full(conv),
            norm,
            relu6,
        }
    }

    pub fn depthwise<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv = DepthwiseConv::new(store, name, 3, channels, stride, rng);
        let norm = BatchNorm::new(store, &format!("{name}.bn"), channels);
        ConvBn {
            conv: ConvKind::Depthwise(conv),
            norm,
            relu6: true,
        }
    }
}

/// MobileNetV2 inverted residual: 1×1 expansion → 3×3 depthwise → linear
/// 1×1 projection, with an identity skip when shapes allow it.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedResidual {
    /// Absent when the expansion factor is 1.
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub expansion: usize,
}

impl InvertedResidual {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        expansion: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !matches!(stride, 1 | 2) {
            return Err(arg_err!("inverted residual stride must be 1 or 2, got {stride}"));
        }
        if expansion == 0 || c_in == 0 || c_out == 0 {
            return Err(arg_err!("inverted residual needs positive channels and expansion"));
        }
        let hidden = c_in * expansion;
        let expand =
            (expansion != 1).then(|| ConvBn::full(store, &format!("{name}.expand"), 1, c_in, hidden, 1, true, rng));
        let depthwise = ConvBn::depthwise(store, &format!("{name}.depthwise"), hidden, stride, rng);
        let project = ConvBn::full(store, &format!("{name}.project"), 1, hidden, c_out, 1, false, rng);
        Ok(InvertedResidual {
            expand,
            depthwise,
            project,
            c_in,
            c_out,
            stride,
            expansion,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(expand) = &self.expand {
            h = expand.forward(ctx, h)?;
        }
        h = self.depthwise.forward(ctx, h)?;
        h = self.project.forward(ctx, h)?;
        if self.has_skip() {
            h = ctx.tape.add(x, h)?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.expand.as_ref().map_or(0, ConvBn::param_count) + self.depthwise.param_count() + self.project.param_count()
    }

    pub fn stages(&self) -> impl Iterator<Item = &ConvBn> {
        self.expand.iter().chain([&self.depthwise, &self.project])
    }
}
