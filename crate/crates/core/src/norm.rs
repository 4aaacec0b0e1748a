//! GroupNorm followed by SiLU as one op with a hand-written backward pass.
//!
//! Equivalent to `silu(candle_nn::GroupNorm::forward(x))`: biased variance,
//! `eps` added before the square root.

use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor, WithDType};
use candle_nn::{Init, VarBuilder};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
}

impl Geometry {
    fn group_len(&self) -> usize {
        self.c / self.groups * self.spatial
    }

    /// Mean and reciprocal standard deviation of one group.
    fn stats<T: WithDType>(&self, x: &[T]) -> (f64, f64) {
        let len = x.len() as f64;
        let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / len;
        let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / len;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        let per_group = self.c / self.groups;
        for (gi, xs) in x.chunks_exact(self.group_len()).enumerate() {
            let (mean, rstd) = self.stats(xs);
            let c0 = (gi % self.groups) * per_group;
            for (k, plane) in xs.chunks_exact(self.spatial).enumerate() {
                let (g, b) = (gamma[c0 + k].to_f64(), beta[c0 + k].to_f64());
                out.extend(plane.iter().map(|v| {
                    let y = g * (v.to_f64() - mean) * rstd + b;
                    T::from_f64(y / (1.0 + (-y).exp()))
                }));
            }
        }
        out
    }

    /// Gradients with respect to the input, the scale and the shift.
    fn backward<T: WithDType>(
        &self,
        x: &[T],
        grad: &[T],
        gamma: &[T],
        beta: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let per_group = self.c / self.groups;
        let mut dx = Vec::with_capacity(x.len());
        let mut dgamma = vec![0.0; self.c];
        let mut dbeta = vec![0.0; self.c];
        let mut xhat = vec![0.0; self.group_len()];
        let mut dxhat = vec![0.0; self.group_len()];
        for (gi, (xs, gs)) in x
            .chunks_exact(self.group_len())
            .zip(grad.chunks_exact(self.group_len()))
            .enumerate()
        {
            let (mean, rstd) = self.stats(xs);
            let c0 = (gi % self.groups) * per_group;
            for (i, (v, go)) in xs.iter().zip(gs).enumerate() {
                let ch = c0 + i / self.spatial;
                let (g, b) = (gamma[ch].to_f64(), beta[ch].to_f64());
                let h = (v.to_f64() - mean) * rstd;
                let y = g * h + b;
                let s = 1.0 / (1.0 + (-y).exp());
                let dy = go.to_f64() * s * (1.0 + y * (1.0 - s));
                dgamma[ch] += dy * h;
                dbeta[ch] += dy;
                xhat[i] = h;
                dxhat[i] = dy * g;
            }
            let len = xhat.len() as f64;
            let mean_d = dxhat.iter().sum::<f64>() / len;
            let mean_dh = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / len;
            dx.extend(
                dxhat
                    .iter()
                    .zip(&xhat)
                    .map(|(d, h)| T::from_f64(rstd * (d - mean_d - h * mean_dh))),
            );
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, cast(dgamma), cast(dbeta))
    }
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("group_norm_silu expects contiguous tensors"),
    }
}

fn to_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

struct GroupNormSilu(Geometry);

impl CustomOp3 for GroupNormSilu {
    fn name(&self) -> &'static str {
        "group-norm-silu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(g.forward(
                slice::<f32>(s1, l1)?,
                slice::<f32>(s2, l2)?,
                slice::<f32>(s3, l3)?,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(g.forward(
                slice::<f64>(s1, l1)?,
                slice::<f64>(s2, l2)?,
                slice::<f64>(s3, l3)?,
            )),
            _ => candle_core::bail!("group_norm_silu supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType>(
            g: &Geometry,
            x: &Tensor,
            gamma: &Tensor,
            beta: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
            let (dx, dg, db) = g.backward(
                &to_vec::<T>(x)?,
                &to_vec::<T>(grad)?,
                &to_vec::<T>(gamma)?,
                &to_vec::<T>(beta)?,
            );
            let dev = x.device();
            Ok((
                Some(Tensor::from_vec(dx, x.shape(), dev)?),
                Some(Tensor::from_vec(dg, gamma.shape(), dev)?),
                Some(Tensor::from_vec(db, beta.shape(), dev)?),
            ))
        }
        match x.dtype() {
            candle_core::DType::F32 => run::<f32>(&self.0, x, gamma, beta, grad),
            candle_core::DType::F64 => run::<f64>(&self.0, x, gamma, beta, grad),
            d => candle_core::bail!("group_norm_silu does not support {d:?}"),
        }
    }
}

/// `silu(GroupNorm(x))` for `N×C×…` input with per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNormSiluLayer {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNormSiluLayer {
    pub fn new(weight: Tensor, bias: Tensor, groups: usize, eps: f64) -> candle_core::Result<Self> {
        let c = weight.elem_count();
        if groups == 0 || c % groups != 0 || bias.elem_count() != c {
            candle_core::bail!("group_norm_silu: {c} channels do not split into {groups} groups");
        }
        Ok(Self {
            weight,
            bias,
            groups,
            eps,
        })
    }

    /// Parameters named `weight` (ones) and `bias` (zeros), as `candle_nn::group_norm` creates them.
    pub fn build(
        groups: usize,
        channels: usize,
        eps: f64,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        let weight = vb.get_with_hints(channels, "weight", Init::Const(1.))?;
        let bias = vb.get_with_hints(channels, "bias", Init::Const(0.))?;
        Self::new(weight, bias, groups, eps)
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims();
        if dims.len() < 3 || dims[1] != self.weight.elem_count() {
            candle_core::bail!(
                "group_norm_silu: input {dims:?} does not have {} channels",
                self.weight.elem_count()
            );
        }
        let g = Geometry {
            c: dims[1],
            spatial: dims[2..].iter().product(),
            groups: self.groups,
            eps: self.eps,
        };
        x.contiguous()?.apply_op3(
            &self.weight.contiguous()?,
            &self.bias.contiguous()?,
            GroupNormSilu(g),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Module, Var};

    fn reference(x: &Tensor, w: &Tensor, b: &Tensor, groups: usize) -> Tensor {
        let gn =
            candle_nn::GroupNorm::new(w.clone(), b.clone(), w.elem_count(), groups, 1e-5).unwrap();
        candle_nn::ops::silu(&gn.forward(x).unwrap()).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_composed_ops_and_their_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.3f64, 2.0, (3, 8, 5, 4), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(1.0f64, 0.5, 8, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0.0f64, 0.5, 8, &dev).unwrap()).unwrap();
        let up = Tensor::randn(0.0f64, 1.0, (3, 8, 5, 4), &dev).unwrap();
        let layer =
            GroupNormSiluLayer::new(w.as_tensor().clone(), b.as_tensor().clone(), 4, 1e-5).unwrap();
        let fused = layer.forward(&x).unwrap();
        let composed = reference(&x, &w, &b, 4);
        assert!(max_diff(&fused, &composed) < 1e-12);
        let gf = (&fused * &up)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gc = (&composed * &up)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &w, &b] {
            assert!(max_diff(gf.get(v).unwrap(), gc.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn f32_matches_f64() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 16, 6, 6), &dev).unwrap();
        let w = Tensor::ones(16, DType::F64, &dev).unwrap();
        let b = Tensor::zeros(16, DType::F64, &dev).unwrap();
        let f64_out = GroupNormSiluLayer::new(w.clone(), b.clone(), 8, 1e-5)
            .unwrap()
            .forward(&x)
            .unwrap();
        let to32 = |t: &Tensor| t.to_dtype(DType::F32).unwrap();
        let f32_out = GroupNormSiluLayer::new(to32(&w), to32(&b), 8, 1e-5)
            .unwrap()
            .forward(&to32(&x))
            .unwrap();
        assert!(max_diff(&f32_out.to_dtype(DType::F64).unwrap(), &f64_out) < 1e-5);
    }

    #[test]
    fn rejects_mismatched_channels() {
        let dev = Device::Cpu;
        let w = Tensor::ones(6, DType::F32, &dev).unwrap();
        assert!(GroupNormSiluLayer::new(w.clone(), w.clone(), 4, 1e-5).is_err());
        let layer = GroupNormSiluLayer::new(w.clone(), w, 3, 1e-5).unwrap();
        assert!(layer
            .forward(&Tensor::zeros((1, 4, 2, 2), DType::F32, &dev).unwrap())
            .is_err());
    }
}
