//! Fused CPU kernels with hand-written backward passes for the row-wise
//! operations that dominate training time: softmax, parameter-free layer
//! normalization and per-row cross-entropy.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("fused op needs a contiguous input"),
    }
}

fn last_dim(l: &Layout) -> candle_core::Result<usize> {
    match l.dims().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => bail!("fused op needs a non-empty last dimension"),
    }
}

/// Applies `f` to `f64` copies of one or two same-typed storages and stores
/// the result back in the input dtype.
macro_rules! with_float {
    ($s:expr, $l:expr, |$x:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $x: Vec<f64> = contiguous(v, $l)?.iter().map(|a| a.to_f64()).collect();
                CpuStorage::F32($body.into_iter().map(f32::from_f64).collect())
            }
            CpuStorage::F64(v) => {
                let $x: Vec<f64> = contiguous(v, $l)?.to_vec();
                CpuStorage::F64($body)
            }
            _ => bail!("fused op supports f32 and f64 only"),
        }
    };
}

macro_rules! with_float2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$x:ident, $y:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let $x: Vec<f64> = contiguous(a, $l1)?.iter().map(|v| v.to_f64()).collect();
                let $y: Vec<f64> = contiguous(b, $l2)?.iter().map(|v| v.to_f64()).collect();
                CpuStorage::F32($body.into_iter().map(f32::from_f64).collect())
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let $x: Vec<f64> = contiguous(a, $l1)?.to_vec();
                let $y: Vec<f64> = contiguous(b, $l2)?.to_vec();
                CpuStorage::F64($body)
            }
            _ => bail!("fused op needs matching f32 or f64 inputs"),
        }
    };
}

fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

struct Softmax;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = last_dim(l)?;
        Ok((with_float!(s, l, |x| softmax_rows(&x, d)), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = last_dim(l1)?;
        let out = with_float2!(s1, l1, s2, l2, |y, g| {
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), o) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                    *oi = yi * (gi - dot);
                }
            }
            dx
        });
        Ok((out, l1.shape().clone()))
    }
}

/// Differentiable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}

const LN_EPS: f64 = 1e-5;

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

struct Normalize;

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "fused-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = last_dim(l)?;
        let out = with_float!(s, l, |x| {
            let mut y = vec![0.0; x.len()];
            for (row, o) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
                let (mean, rstd) = row_stats(row);
                for (oi, &xi) in o.iter_mut().zip(row) {
                    *oi = (xi - mean) * rstd;
                }
            }
            y
        });
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &NormalizeGrad)?))
    }
}

struct NormalizeGrad;

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "fused-normalize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = last_dim(l1)?;
        let out = with_float2!(s1, l1, s2, l2, |x, g| {
            let n = d as f64;
            let mut dx = vec![0.0; x.len()];
            for ((xr, gr), o) in x.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                let (mean, rstd) = row_stats(xr);
                let g_mean = gr.iter().sum::<f64>() / n;
                let gy_mean = xr.iter().zip(gr).map(|(xi, gi)| (xi - mean) * rstd * gi).sum::<f64>() / n;
                for ((oi, &xi), &gi) in o.iter_mut().zip(xr).zip(gr) {
                    let yi = (xi - mean) * rstd;
                    *oi = rstd * (gi - g_mean - yi * gy_mean);
                }
            }
            dx
        });
        Ok((out, l1.shape().clone()))
    }
}

/// Differentiable zero-mean unit-variance normalization over the last
/// dimension, without affine parameters.
pub fn normalize_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Normalize)?)
}

struct RowNll {
    targets: Vec<u32>,
}

impl CustomOp1 for RowNll {
    fn name(&self) -> &'static str {
        "fused-row-nll"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, v) = l.shape().dims2()?;
        if self.targets.len() != n {
            bail!("{} targets for {n} rows", self.targets.len());
        }
        let targets = &self.targets;
        let out = with_float!(s, l, |x| {
            x.chunks_exact(v)
                .zip(targets)
                .map(|(row, &t)| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
                    lse - row[t as usize]
                })
                .collect::<Vec<f64>>()
        });
        Ok((out, Shape::from(n)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = RowNllGrad { targets: self.targets.clone() };
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

struct RowNllGrad {
    targets: Vec<u32>,
}

impl CustomOp2 for RowNllGrad {
    fn name(&self) -> &'static str {
        "fused-row-nll-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, v) = l1.shape().dims2()?;
        let targets = &self.targets;
        let out = with_float2!(s1, l1, s2, l2, |x, g| {
            let mut dx = softmax_rows(&x, v);
            for ((o, &t), &gi) in dx.chunks_exact_mut(v).zip(targets).zip(&g) {
                o[t as usize] -= 1.0;
                o.iter_mut().for_each(|e| *e *= gi);
            }
            dx
        });
        Ok((out, l1.shape().clone()))
    }
}

/// Per-row negative log-likelihood `[N]` of `targets` under `[N, V]` logits.
/// Targets must already be range-checked.
pub fn row_nll(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    Ok(logits.contiguous()?.apply_op1(RowNll { targets: targets.to_vec() })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, scalar};
    use candle_core::{DType, Device, Var, D};

    fn input(shape: (usize, usize), seed: u64) -> Var {
        let mut rng = crate::rng::CounterRng::new(seed, "ops");
        let data: Vec<f64> = (0..shape.0 * shape.1).map(|_| rng.normal() * 2.0).collect();
        Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn softmax_matches_reference_and_gradients() {
        let x = input((5, 7), 1);
        let reference = candle_nn::ops::softmax(x.as_tensor(), D::Minus1).unwrap();
        assert!(max_abs(&softmax_last_dim(x.as_tensor()).unwrap(), &reference) < 1e-14);
        let w = input((5, 7), 2).as_tensor().clone();
        let loss = || Ok((softmax_last_dim(x.as_tensor())? * &w)?.sum_all()?);
        assert!(gradient_check(&[x.clone()], loss, 20, 1e-6, 1).unwrap() < 1e-6);
    }

    #[test]
    fn normalize_matches_reference_and_gradients() {
        let x = input((4, 9), 3);
        let y = normalize_last_dim(x.as_tensor()).unwrap();
        let mean = y.mean_keepdim(D::Minus1).unwrap();
        assert!(scalar(&mean.abs().unwrap().max_all().unwrap()).unwrap() < 1e-12);
        let w = input((4, 9), 4).as_tensor().clone();
        let loss = || Ok((normalize_last_dim(x.as_tensor())? * &w)?.sum_all()?);
        let err = gradient_check(&[x.clone()], loss, 20, 1e-6, 2).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn row_nll_matches_log_softmax_and_gradients() {
        let x = input((6, 5), 5);
        let t = [0u32, 4, 2, 2, 1, 3];
        let nll = row_nll(x.as_tensor(), &t).unwrap();
        let logp = candle_nn::ops::log_softmax(x.as_tensor(), D::Minus1).unwrap();
        let idx = Tensor::new(&t, &Device::Cpu).unwrap().unsqueeze(1).unwrap();
        let reference = logp.gather(&idx, 1).unwrap().squeeze(1).unwrap().neg().unwrap();
        assert!(max_abs(&nll, &reference) < 1e-12);
        let w = Tensor::new(&[1.0f64, 0.5, 2.0, 0.0, 1.0, 3.0], &Device::Cpu).unwrap();
        let loss = || Ok((row_nll(x.as_tensor(), &t)? * &w)?.sum_all()?);
        assert!(gradient_check(&[x.clone()], loss, 20, 1e-6, 3).unwrap() < 1e-6);
    }

    #[test]
    fn f32_inputs_are_supported() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0]], &Device::Cpu).unwrap();
        let y = softmax_last_dim(&x).unwrap();
        assert_eq!(y.dtype(), DType::F32);
        let s: f32 = y.sum_all().unwrap().to_scalar().unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
