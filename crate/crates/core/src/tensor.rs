//! Plain tensor containers and convolution geometry shared by every stage
//! of the pipeline.

use serde::{Deserialize, Serialize};

/// Channel-major (C, H, W) shape of an activation tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub const fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Kernel size, stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub const fn new(kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Self { kh, kw, stride, pad }
    }

    /// Square kernel with "same"-style padding of `k / 2`.
    pub const fn square(k: usize, stride: usize) -> Self {
        Self { kh: k, kw: k, stride, pad: k / 2 }
    }

    pub const fn kernel_pixels(&self) -> usize {
        self.kh * self.kw
    }

    /// Output spatial dims, `floor((in + 2·pad − k) / stride) + 1`.
    /// Returns zero dims when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let dim = |n: usize, k: usize| {
            let padded = n + 2 * self.pad;
            if padded < k || self.stride == 0 {
                0
            } else {
                (padded - k) / self.stride + 1
            }
        };
        (dim(h, self.kh), dim(w, self.kw))
    }
}

/// A ternary weight value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Trit {
    Neg,
    #[default]
    Zero,
    Pos,
}

impl Trit {
    pub const fn value(self) -> i8 {
        match self {
            Trit::Neg => -1,
            Trit::Zero => 0,
            Trit::Pos => 1,
        }
    }

    pub const fn from_sign(v: i8) -> Self {
        if v > 0 {
            Trit::Pos
        } else if v < 0 {
            Trit::Neg
        } else {
            Trit::Zero
        }
    }
}

/// FP32 activation tensor in (C, H, W) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FpTensor {
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl FpTensor {
    pub fn zeros(shape: Shape3) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn from_vec(shape: Shape3, data: Vec<f32>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match shape {shape}");
        Self { shape, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(c, y, x)]
    }
}

/// FP32 convolution weights in (OFM, IFM, KH, KW) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FpWeights {
    pub ofm: usize,
    pub ifm: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f32>,
}

impl FpWeights {
    pub fn zeros(ofm: usize, ifm: usize, kh: usize, kw: usize) -> Self {
        Self { ofm, ifm, kh, kw, data: vec![0.0; ofm * ifm * kh * kw] }
    }

    pub fn from_vec(ofm: usize, ifm: usize, kh: usize, kw: usize, data: Vec<f32>) -> Self {
        assert_eq!(ofm * ifm * kh * kw, data.len(), "weight data does not match shape");
        Self { ofm, ifm, kh, kw, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.ifm + i) * self.kh + ky) * self.kw + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.data[self.index(o, i, ky, kx)]
    }

    /// The weights feeding one output channel, in (IFM, KH, KW) order.
    pub fn ofm_slice(&self, o: usize) -> &[f32] {
        let n = self.ifm * self.kh * self.kw;
        &self.data[o * n..(o + 1) * n]
    }
}

/// Direct FP convolution accumulated in f64. `weights` is indexed like
/// [`FpWeights`] and `bias` (one per output channel) is added once.
pub fn conv2d(
    x: &FpTensor,
    weights: &[f64],
    ofm: usize,
    bias: Option<&[f64]>,
    p: ConvParams,
) -> Vec<f64> {
    let ifm = x.shape.channels;
    assert_eq!(weights.len(), ofm * ifm * p.kh * p.kw);
    let (oh, ow) = p.output_hw(x.shape.height, x.shape.width);
    let mut out = vec![0.0; ofm * oh * ow];
    for o in 0..ofm {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..ifm {
                    for ky in 0..p.kh {
                        let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                        if iy < 0 || iy >= x.shape.height as isize {
                            continue;
                        }
                        for kx in 0..p.kw {
                            let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                            if ix < 0 || ix >= x.shape.width as isize {
                                continue;
                            }
                            let w = weights[((o * ifm + i) * p.kh + ky) * p.kw + kx];
                            acc += w * x.get(i, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        assert_eq!(ConvParams::square(3, 1).output_hw(56, 56), (56, 56));
        assert_eq!(ConvParams::square(3, 2).output_hw(56, 56), (28, 28));
        assert_eq!(ConvParams::new(1, 1, 2, 0).output_hw(56, 56), (28, 28));
        assert_eq!(ConvParams::new(7, 7, 2, 3).output_hw(224, 224), (112, 112));
        assert_eq!(ConvParams::new(3, 3, 1, 0).output_hw(2, 2), (0, 0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = FpTensor::from_vec(Shape3::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let w = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let y = conv2d(&x, &w, 1, Some(&[0.5]), ConvParams::square(3, 1));
        assert_eq!(y, vec![1.5, 2.5, 3.5, 4.5]);
    }
}
