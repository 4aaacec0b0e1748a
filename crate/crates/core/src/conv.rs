//! Convolutions expressed as a single matrix product each.
//!
//! Candle's CPU convolution kernels, and the transposed convolutions its
//! backward pass relies on, are several times slower than its matmul on the
//! small feature maps used here. [`conv2d`] unfolds patches with a dedicated
//! im2col op (whose gradient is the matching col2im) and multiplies once.
//! Weight layouts match `candle_nn::Conv2d` / `ConvTranspose2d`.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// For output column `ox`, the kernel taps `kx` that land inside the
    /// image and the input column of the first one.
    #[inline]
    fn kx_span(&self, ox: usize) -> (usize, usize, usize) {
        let left = ox * self.stride;
        let lo = self.padding.saturating_sub(left);
        let hi = self.kw.min((self.w + self.padding).saturating_sub(left));
        (lo, hi.max(lo), (left + lo).saturating_sub(self.padding))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.padding)
            .filter(|&iy| iy < self.h)
    }

    /// Calls `f(col_start, input_start, len)` for every in-image run of one patch row.
    #[inline]
    fn runs(&self, b: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (lo, hi, ix) = self.kx_span(ox);
        if hi == lo {
            return;
        }
        for ci in 0..self.c {
            let plane = (b * self.c + ci) * self.h * self.w;
            for ky in 0..self.kh {
                if let Some(iy) = self.input_row(oy, ky) {
                    f(
                        (ci * self.kh + ky) * self.kw + lo,
                        plane + iy * self.w + ix,
                        hi - lo,
                    );
                }
            }
        }
    }

    /// For each output pixel of one image, `(column, input offset)` pairs of
    /// its in-image taps, with `starts[p]..starts[p + 1]` indexing pixel `p`.
    fn taps(&self) -> (Vec<usize>, Vec<(u32, u32)>) {
        let pixels = self.ho * self.wo;
        let mut starts = Vec::with_capacity(pixels + 1);
        let mut taps = Vec::with_capacity(pixels * self.cols());
        starts.push(0);
        for p in 0..pixels {
            self.runs(0, p / self.wo, p % self.wo, |j, i, len| {
                taps.extend((0..len).map(|k| ((j + k) as u32, (i + k) as u32)));
            });
            starts.push(taps.len());
        }
        (starts, taps)
    }

    fn unfold<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let (k, pixels, image) = (self.cols(), self.ho * self.wo, self.c * self.h * self.w);
        let (starts, taps) = self.taps();
        let mut out = vec![T::default(); self.n * pixels * k];
        for (row, dst) in out.chunks_exact_mut(k).enumerate() {
            let (b, p) = (row / pixels, row % pixels);
            let src = &x[b * image..(b + 1) * image];
            for &(j, i) in &taps[starts[p]..starts[p + 1]] {
                dst[j as usize] = src[i as usize];
            }
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let (k, pixels, image) = (self.cols(), self.ho * self.wo, self.c * self.h * self.w);
        let (starts, taps) = self.taps();
        let mut out = vec![T::default(); self.n * image];
        for (row, src) in cols.chunks_exact(k).enumerate() {
            let (b, p) = (row / pixels, row % pixels);
            let dst = &mut out[b * image..(b + 1) * image];
            for &(j, i) in &taps[starts[p]..starts[p + 1]] {
                dst[i as usize] += src[j as usize];
            }
        }
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

/// `N×C×H×W` to `[N·Ho·Wo, C·kh·kw]` patch rows.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters patch rows back onto the image.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.n * g.ho * g.wo, g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?,
        ))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.n, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// 2-D convolution of `N×C×H×W` input with `O×C×kh×kw` weights.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, cw, kh, kw) = w.dims4()?;
    if c != cw {
        candle_core::bail!("conv2d: input has {c} channels, weight expects {cw}");
    }
    if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        candle_core::bail!(
            "conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"
        );
    }
    let g = Geometry {
        n,
        c,
        h,
        w: wd,
        kh,
        kw,
        stride,
        padding,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (wd + 2 * padding - kw) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let out = cols.matmul(&w.reshape((o, g.cols()))?.t()?)?;
    let out = match b {
        Some(b) => out.broadcast_add(&b.reshape((1, o))?)?,
        None => out,
    };
    out.reshape((n, g.ho * g.wo, o))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, o, g.ho, g.wo))
}

/// Transposed convolution with a 2×2 kernel and stride 2 (no overlap), for
/// `I×O×2×2` weights.
pub fn conv_transpose_2x2(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
) -> candle_core::Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (ci, o, kh, kw) = w.dims4()?;
    if ci != c || kh != 2 || kw != 2 {
        candle_core::bail!(
            "conv_transpose_2x2: weight {:?} does not fit input {:?}",
            w.dims(),
            x.dims()
        );
    }
    let wm = w.reshape((c, o * 4))?.t()?;
    let xm = x.transpose(0, 1)?.reshape((c, n * h * wd))?;
    let out = wm
        .matmul(&xm)?
        .reshape((o, 2, 2, n, h, wd))?
        .permute((3, 0, 4, 1, 5, 2))?
        .reshape((n, o, 2 * h, 2 * wd))?;
    match b {
        Some(b) => out.broadcast_add(&b.reshape((1, o, 1, 1))?),
        None => Ok(out),
    }
}

/// Drop-in forward for a `candle_nn::Conv2d` (dilation 1, one group).
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn from_candle(c: &Conv2d) -> Self {
        let cfg = c.config();
        Self::new(
            c.weight().clone(),
            c.bias().cloned(),
            cfg.stride,
            cfg.padding,
        )
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
        )
    }
}

/// Drop-in forward for a 2×2 / stride-2 `candle_nn::ConvTranspose2d`.
#[derive(Debug, Clone)]
pub struct UpConv {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl UpConv {
    pub fn from_candle(c: &ConvTranspose2d) -> Self {
        Self {
            weight: c.weight().clone(),
            bias: c.bias().cloned(),
        }
    }
}

impl Module for UpConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        conv_transpose_2x2(x, &self.weight, self.bias.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, max_abs_diff};
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian(shape, DType::F64, &Device::Cpu, &mut rng).unwrap()
    }

    #[test]
    fn conv_matches_candle_values_and_gradients() {
        for &(k, stride, padding, h) in &[
            (3, 1, 1, 8),
            (3, 2, 1, 8),
            (1, 2, 0, 6),
            (7, 2, 3, 9),
            (3, 1, 0, 5),
        ] {
            let x = Var::from_tensor(&rand(&[2, 3, h, h], 1)).unwrap();
            let w = Var::from_tensor(&rand(&[4, 3, k, k], 2)).unwrap();
            let b = Var::from_tensor(&rand(&[4], 3)).unwrap();
            let ours = conv2d(
                x.as_tensor(),
                w.as_tensor(),
                Some(b.as_tensor()),
                stride,
                padding,
            )
            .unwrap();
            let reference = x
                .as_tensor()
                .conv2d(w.as_tensor(), padding, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference).unwrap() < 1e-12);
            let probe = rand(ours.dims(), 4);
            let g1 = (&ours * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let g2 = (&reference * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            for v in [&x, &w, &b] {
                let a = g1.get(v.as_tensor()).unwrap();
                let r = g2.get(v.as_tensor()).unwrap();
                assert!(max_abs_diff(a, r).unwrap() < 1e-10, "k={k} s={stride}");
            }
        }
    }

    #[test]
    fn transposed_conv_matches_candle() {
        let x = Var::from_tensor(&rand(&[2, 4, 3, 5], 5)).unwrap();
        let w = Var::from_tensor(&rand(&[4, 3, 2, 2], 6)).unwrap();
        let ours = conv_transpose_2x2(x.as_tensor(), w.as_tensor(), None).unwrap();
        let reference = x
            .as_tensor()
            .conv_transpose2d(w.as_tensor(), 0, 0, 2, 1)
            .unwrap();
        assert_eq!(ours.dims(), &[2, 3, 6, 10]);
        assert!(max_abs_diff(&ours, &reference).unwrap() < 1e-12);
        let probe = rand(ours.dims(), 7);
        let g1 = (&ours * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g2 = (&reference * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &w] {
            assert!(
                max_abs_diff(
                    g1.get(v.as_tensor()).unwrap(),
                    g2.get(v.as_tensor()).unwrap()
                )
                .unwrap()
                    < 1e-10
            );
        }
    }
}
