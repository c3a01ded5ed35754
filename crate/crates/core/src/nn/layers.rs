use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One layer of a [`super::Sequential`] network. Activations carry a leading
/// channel axis for the 3D kinds (`[C, D, H, W]`); dense layers see a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Adjoint of `Conv3d` with the channel roles swapped; `output_padding`
    /// picks among the spatial sizes that map back onto the input size.
    Conv3dTransposed {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Flatten,
    /// Reinterprets a flat vector as the given shape (inverse of `Flatten`).
    Reshape {
        shape: Vec<usize>,
    },
    /// Zero padding of every spatial axis.
    Pad3d {
        low: usize,
        high: usize,
    },
    Crop3d {
        low: usize,
        high: usize,
    },
}

impl LayerSpec {
    /// Shapes of the weight and bias tensors, if the layer has parameters.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::Conv3dTransposed {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![in_channels, out_channels, kernel, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    /// (fan_in, fan_out) for Glorot-uniform initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerSpec::Conv3dTransposed {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let k3 = kernel.pow(3);
                Some((in_channels * k3, out_channels * k3))
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            _ => None,
        }
    }

    /// Output shape for `input`, or a shape error naming the offending axis.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<[usize; 4]> {
            match input {
                &[c, d, h, w] => Ok([c, d, h, w]),
                _ => Err(Error::shape(
                    input.len(),
                    format!("{what} expects [C, D, H, W], got {input:?}"),
                )),
            }
        };
        match self {
            &LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, d, h, w] = spatial("conv3d")?;
                if c != in_channels {
                    return Err(Error::shape(
                        0,
                        format!("conv3d expects {in_channels} channels, got {c}"),
                    ));
                }
                if stride == 0 || kernel == 0 {
                    return Err(Error::Config("conv3d stride and kernel must be >= 1".into()));
                }
                let mut out = vec![out_channels];
                for (axis, n) in [(1, d), (2, h), (3, w)] {
                    let padded = n + 2 * padding;
                    if padded < kernel {
                        return Err(Error::shape(
                            axis,
                            format!("conv3d kernel {kernel} exceeds padded extent {padded}"),
                        ));
                    }
                    out.push((padded - kernel) / stride + 1);
                }
                Ok(out)
            }
            &LayerSpec::Conv3dTransposed {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => {
                let [c, d, h, w] = spatial("conv3d_transposed")?;
                if c != in_channels {
                    return Err(Error::shape(
                        0,
                        format!("conv3d_transposed expects {in_channels} channels, got {c}"),
                    ));
                }
                if stride == 0 || kernel == 0 || output_padding >= stride {
                    return Err(Error::Config(
                        "conv3d_transposed needs stride, kernel >= 1 and output_padding < stride".into(),
                    ));
                }
                let mut out = vec![out_channels];
                for (axis, n) in [(1, d), (2, h), (3, w)] {
                    let full = (n - 1) * stride + kernel + output_padding;
                    if full <= 2 * padding {
                        return Err(Error::shape(axis, "conv3d_transposed output would be empty"));
                    }
                    out.push(full - 2 * padding);
                }
                Ok(out)
            }
            &LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != in_features {
                    return Err(Error::shape(
                        0,
                        format!("dense expects a flat [{in_features}] input, got {input:?}"),
                    ));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(Error::shape(0, format!("cannot reshape {input:?} into {shape:?}")));
                }
                Ok(shape.clone())
            }
            &LayerSpec::Pad3d { low, high } => {
                let [c, d, h, w] = spatial("pad3d")?;
                Ok(vec![c, d + low + high, h + low + high, w + low + high])
            }
            &LayerSpec::Crop3d { low, high } => {
                let [c, d, h, w] = spatial("crop3d")?;
                let mut out = vec![c];
                for (axis, n) in [(1, d), (2, h), (3, w)] {
                    if n <= low + high {
                        return Err(Error::shape(axis, format!("crop {low}+{high} empties extent {n}")));
                    }
                    out.push(n - low - high);
                }
                Ok(out)
            }
        }
    }
}

/// Geometry of a strided 3D cross-correlation from `input` to `output`
/// spatial extents; shared by the forward conv and its adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Precomputed `(out_index, in_index)` along one axis for a kernel offset.
    fn axis_map(&self, axis: usize, k: usize) -> Vec<Option<usize>> {
        (0..self.output[axis])
            .map(|o| {
                let i = (o * self.stride + k) as isize - self.padding as isize;
                (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
            })
            .collect()
    }

    /// Unfolds `x` (`[channels, input...]`) into `[channels * k^3, prod(output)]`.
    pub fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let k = self.kernel;
        let [id, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let p = self.col_cols();
        let mut cols = vec![T::zero(); self.col_rows() * p];
        let maps: [Vec<Vec<Option<usize>>>; 3] =
            std::array::from_fn(|a| (0..k).map(|kk| self.axis_map(a, kk)).collect());
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        for (oz, iz) in maps[0][kz].iter().enumerate() {
                            let Some(iz) = *iz else { continue };
                            for (oy, iy) in maps[1][ky].iter().enumerate() {
                                let Some(iy) = *iy else { continue };
                                let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                let out = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                for (o, ix) in maps[2][kx].iter().enumerate() {
                                    if let Some(ix) = *ix {
                                        out[o] = src[ix];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds columns back into `x`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let k = self.kernel;
        let [id, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let p = self.col_cols();
        let maps: [Vec<Vec<Option<usize>>>; 3] =
            std::array::from_fn(|a| (0..k).map(|kk| self.axis_map(a, kk)).collect());
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &cols[row * p..(row + 1) * p];
                        for (oz, iz) in maps[0][kz].iter().enumerate() {
                            let Some(iz) = *iz else { continue };
                            for (oy, iy) in maps[1][ky].iter().enumerate() {
                                let Some(iy) = *iy else { continue };
                                let dst = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                let col = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                for (o, ix) in maps[2][kx].iter().enumerate() {
                                    if let Some(ix) = *ix {
                                        dst[ix] += col[o];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_geometry(spec: &LayerSpec, in_shape: &[usize], out_shape: &[usize]) -> Conv3dGeometry {
    match *spec {
        LayerSpec::Conv3d {
            kernel,
            stride,
            padding,
            ..
        } => Conv3dGeometry {
            channels: in_shape[0],
            input: [in_shape[1], in_shape[2], in_shape[3]],
            output: [out_shape[1], out_shape[2], out_shape[3]],
            kernel,
            stride,
            padding,
        },
        // the transposed layer runs the forward geometry backwards
        LayerSpec::Conv3dTransposed {
            kernel,
            stride,
            padding,
            ..
        } => Conv3dGeometry {
            channels: out_shape[0],
            input: [out_shape[1], out_shape[2], out_shape[3]],
            output: [in_shape[1], in_shape[2], in_shape[3]],
            kernel,
            stride,
            padding,
        },
        _ => unreachable!("not a convolution"),
    }
}

/// Direct conv3d on `[C_in, D, H, W]` with weights `[C_out, C_in, k, k, k]`.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ws = weights.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::shape(
            ws.len(),
            format!("conv3d weights must be [Co, Ci, k, k, k], got {ws:?}"),
        ));
    }
    let spec = LayerSpec::Conv3d {
        in_channels: ws[1],
        out_channels: ws[0],
        kernel: ws[2],
        stride,
        padding,
    };
    let out_shape = spec.output_shape(input.shape())?;
    if bias.shape() != [ws[0]] {
        return Err(Error::shape(
            0,
            format!("bias must be [{}], got {:?}", ws[0], bias.shape()),
        ));
    }
    let geom = conv_geometry(&spec, input.shape(), &out_shape);
    let cols = geom.im2col(input.data());
    Ok(Tensor {
        data: conv_apply(&geom, ws[0], weights.data(), bias.data(), &cols),
        shape: out_shape,
    })
}

/// Transposed conv3d on `[C_in, D, H, W]` with weights `[C_in, C_out, k, k, k]`.
pub fn conv3d_transposed_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let ws = weights.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::shape(
            ws.len(),
            format!("conv3d_transposed weights must be [Ci, Co, k, k, k], got {ws:?}"),
        ));
    }
    let spec = LayerSpec::Conv3dTransposed {
        in_channels: ws[0],
        out_channels: ws[1],
        kernel: ws[2],
        stride,
        padding,
        output_padding,
    };
    let out_shape = spec.output_shape(input.shape())?;
    if bias.shape() != [ws[1]] {
        return Err(Error::shape(
            0,
            format!("bias must be [{}], got {:?}", ws[1], bias.shape()),
        ));
    }
    let geom = conv_geometry(&spec, input.shape(), &out_shape);
    Ok(Tensor {
        data: conv_transposed_apply(&geom, ws[0], weights.data(), bias.data(), input.data()),
        shape: out_shape,
    })
}

pub(crate) fn conv_apply<T: Scalar>(
    geom: &Conv3dGeometry,
    out_channels: usize,
    w: &[T],
    b: &[T],
    cols: &[T],
) -> Vec<T> {
    let p = geom.col_cols();
    let mut out = vec![T::zero(); out_channels * p];
    for (c, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(b[c]);
    }
    T::gemm(
        false,
        false,
        out_channels,
        p,
        geom.col_rows(),
        T::one(),
        w,
        cols,
        T::one(),
        &mut out,
    );
    out
}

/// Returns the input gradient; accumulates into `dw` and `db`.
pub(crate) fn conv_backward<T: Scalar>(
    geom: &Conv3dGeometry,
    out_channels: usize,
    w: &[T],
    cols: &[T],
    grad_out: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let p = geom.col_cols();
    let r = geom.col_rows();
    for (c, g) in grad_out.chunks(p).enumerate() {
        db[c] += g.iter().copied().sum();
    }
    T::gemm(false, true, out_channels, r, p, T::one(), grad_out, cols, T::one(), dw);
    let mut dcols = vec![T::zero(); r * p];
    T::gemm(
        true,
        false,
        r,
        p,
        out_channels,
        T::one(),
        w,
        grad_out,
        T::zero(),
        &mut dcols,
    );
    let mut dx = vec![T::zero(); geom.channels * geom.input.iter().product::<usize>()];
    geom.col2im(&dcols, &mut dx);
    dx
}

pub(crate) fn conv_transposed_apply<T: Scalar>(
    geom: &Conv3dGeometry,
    in_channels: usize,
    w: &[T],
    b: &[T],
    x: &[T],
) -> Vec<T> {
    let p = geom.col_cols();
    let r = geom.col_rows();
    let mut cols = vec![T::zero(); r * p];
    T::gemm(true, false, r, p, in_channels, T::one(), w, x, T::zero(), &mut cols);
    let vox: usize = geom.input.iter().product();
    let mut out = vec![T::zero(); geom.channels * vox];
    for (c, chunk) in out.chunks_mut(vox).enumerate() {
        chunk.fill(b[c]);
    }
    geom.col2im(&cols, &mut out);
    out
}

pub(crate) fn conv_transposed_backward<T: Scalar>(
    geom: &Conv3dGeometry,
    in_channels: usize,
    w: &[T],
    x: &[T],
    grad_out: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let p = geom.col_cols();
    let r = geom.col_rows();
    let vox: usize = geom.input.iter().product();
    for (c, g) in grad_out.chunks(vox).enumerate() {
        db[c] += g.iter().copied().sum();
    }
    let dcols = geom.im2col(grad_out);
    T::gemm(false, true, in_channels, r, p, T::one(), x, &dcols, T::one(), dw);
    let mut dx = vec![T::zero(); in_channels * p];
    T::gemm(false, false, in_channels, p, r, T::one(), w, &dcols, T::zero(), &mut dx);
    dx
}

pub(crate) fn pad3d<T: Scalar>(x: &[T], in_shape: &[usize], out_shape: &[usize], low: usize) -> Vec<T> {
    let mut out = vec![T::zero(); out_shape.iter().product()];
    copy_block(x, in_shape, &mut out, out_shape, low, true);
    out
}

pub(crate) fn crop3d<T: Scalar>(x: &[T], in_shape: &[usize], out_shape: &[usize], low: usize) -> Vec<T> {
    let mut out = vec![T::zero(); out_shape.iter().product()];
    copy_block(x, in_shape, &mut out, out_shape, low, false);
    out
}

/// Copies the overlap of a small block placed at offset `low` inside a large
/// one. `into_large` selects the direction.
fn copy_block<T: Scalar>(
    src: &[T],
    src_shape: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    low: usize,
    into_large: bool,
) {
    let (small, large) = if into_large {
        (src_shape, dst_shape)
    } else {
        (dst_shape, src_shape)
    };
    let [c, d, h, w] = [small[0], small[1], small[2], small[3]];
    let [ld, lh, lw] = [large[1], large[2], large[3]];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ci * d + z) * h + y) * w;
                let l = ((ci * ld + z + low) * lh + y + low) * lw + low;
                if into_large {
                    dst[l..l + w].copy_from_slice(&src[s..s + w]);
                } else {
                    dst[s..s + w].copy_from_slice(&src[l..l + w]);
                }
            }
        }
    }
}
