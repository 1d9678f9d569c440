//! 2-D convolution as im2col followed by a matrix product, so that both the
//! forward and backward passes run through the dense matmul kernel.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(self.height), o(self.width))
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.batch * ho * wo
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap of row `r`.
    #[inline]
    fn for_row(&self, r: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let k = self.kernel;
        let (c, ky, kx) = (r / (k * k), (r / k) % k, r % k);
        for b in 0..self.batch {
            let img = (b * self.channels + c) * self.height * self.width;
            let col0 = b * ho * wo;
            for oy in 0..ho {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy as usize >= self.height {
                    continue;
                }
                let row_in = img + iy as usize * self.width;
                let row_out = col0 + oy * wo;
                for ox in 0..wo {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix >= 0 && (ix as usize) < self.width {
                        f(row_out + ox, row_in + ix as usize);
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let n = self.cols();
        let mut out = vec![T::zero(); self.rows() * n];
        for r in 0..self.rows() {
            let dst = &mut out[r * n..(r + 1) * n];
            self.for_row(r, |col, i| dst[col] = src[i]);
        }
        out
    }

    fn col2im<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let n = self.cols();
        let mut out = vec![T::zero(); self.batch * self.channels * self.height * self.width];
        for r in 0..self.rows() {
            let row = &src[r * n..(r + 1) * n];
            self.for_row(r, |col, i| out[i] += row[col]);
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous tensor".into())),
    }
}

/// `(B, C, H, W)` -> `(C*k*k, B*Ho*Wo)`.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters columns back onto the image, summing overlaps.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Square-kernel convolution of `x: (B, C, H, W)` with `weight: (O, C, k, k)`.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (c_out, c_w, kernel, _) = weight.dims4()?;
    if c_w != channels {
        return Err(candle_core::Error::Msg(format!("conv expects {c_w} input channels, got {channels}")));
    }
    let g = Geometry { batch, channels, height, width, kernel, stride, padding };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((c_out, g.rows()))?.matmul(&cols)?;
    y.reshape((c_out, batch, ho, wo))?.transpose(0, 1)?.contiguous()
}
