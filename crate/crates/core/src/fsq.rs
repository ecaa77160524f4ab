//! Finite scalar quantization.
//!
//! A latent vector is squashed per dimension with `tanh`, then each dimension
//! snaps to the nearest of `L_i` bin midpoints `-1 + (2k + 1) / L_i`. The
//! implicit codebook is the product grid; codes are flattened to a single
//! token id with big-endian mixed-radix arithmetic.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude a bounded value may take. `tanh` saturates to exactly 1.0
/// in floating point for large inputs; values are clamped just inside.
const MAX_BOUND: f64 = 1.0 - f64::EPSILON / 2.0;

/// Per-dimension level counts of one FSQ branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct FsqLevels(Vec<u32>);

impl FsqLevels {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("FSQ levels must be non-empty".into()));
        }
        if let Some(&l) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!("FSQ level {l} < 2")));
        }
        let size = levels
            .iter()
            .try_fold(1u64, |acc, &l| acc.checked_mul(l as u64));
        if size.is_none() {
            return Err(Error::Config("FSQ codebook size overflows u64".into()));
        }
        Ok(Self(levels))
    }

    /// 64-entry prompt-preference branch: (4, 4, 4).
    pub fn prompt_default() -> Self {
        Self(vec![4, 4, 4])
    }

    /// 1296-entry content-preference branch: (6, 6, 6, 6).
    pub fn content_default() -> Self {
        Self(vec![6, 6, 6, 6])
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn codebook_size(&self) -> u64 {
        self.0.iter().map(|&l| l as u64).product()
    }

    /// Grid value of code `k` in a dimension with `level` bins.
    #[inline]
    pub fn grid_value(level: u32, k: u32) -> f64 {
        -1.0 + (2.0 * k as f64 + 1.0) / level as f64
    }

    /// Dequantized vector of a code.
    pub fn dequantize(&self, code: &FsqCode) -> Result<Vec<f64>> {
        self.check_code(code)?;
        Ok(code
            .0
            .iter()
            .zip(&self.0)
            .map(|(&c, &l)| Self::grid_value(l, c))
            .collect())
    }

    fn check_code(&self, code: &FsqCode) -> Result<()> {
        if code.0.len() != self.0.len() {
            return Err(Error::Shape(format!(
                "code has {} components, levels have {}",
                code.0.len(),
                self.0.len()
            )));
        }
        for (i, (&c, &l)) in code.0.iter().zip(&self.0).enumerate() {
            if c >= l {
                return Err(Error::InvalidCode {
                    index: i,
                    value: c as i64,
                    level: l,
                });
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<u32>> for FsqLevels {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FsqLevels> for Vec<u32> {
    fn from(l: FsqLevels) -> Self {
        l.0
    }
}

/// Integer code of one FSQ branch, one component per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FsqCode(pub Vec<u32>);

/// Output of the bounding step; every component lies in (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedLatent(Vec<f64>);

impl BoundedLatent {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn bound(z: &[f64]) -> Result<BoundedLatent> {
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite latent {v}")));
    }
    Ok(BoundedLatent(
        z.iter().map(|v| v.tanh().clamp(-MAX_BOUND, MAX_BOUND)).collect(),
    ))
}

/// Nearest bin for one bounded value; exact midpoints go to the lower code.
#[inline]
fn nearest_code(v: f64, level: u32) -> u32 {
    let approx = ((v + 1.0) * level as f64 / 2.0).floor() as i64;
    let lo = (approx - 1).max(0) as u32;
    let hi = (approx + 1).min(level as i64 - 1) as u32;
    let mut best = lo;
    let mut best_dist = (v - FsqLevels::grid_value(level, lo)).abs();
    for k in lo + 1..=hi {
        let d = (v - FsqLevels::grid_value(level, k)).abs();
        if d < best_dist {
            best = k;
            best_dist = d;
        }
    }
    best
}

/// Quantizes an already-bounded vector.
pub fn quantize_bounded(zb: &BoundedLatent, levels: &FsqLevels) -> Result<(FsqCode, Vec<f64>)> {
    if zb.0.len() != levels.dims() {
        return Err(Error::Shape(format!(
            "latent has {} dims, levels have {}",
            zb.0.len(),
            levels.dims()
        )));
    }
    let code: Vec<u32> = zb
        .0
        .iter()
        .zip(levels.levels())
        .map(|(&v, &l)| nearest_code(v, l))
        .collect();
    let values = code
        .iter()
        .zip(levels.levels())
        .map(|(&c, &l)| FsqLevels::grid_value(l, c))
        .collect();
    Ok((FsqCode(code), values))
}

/// Bounds then quantizes `z`, returning the code and its grid vector.
pub fn quantize(z: &[f64], levels: &FsqLevels) -> Result<(FsqCode, Vec<f64>)> {
    if z.len() != levels.dims() {
        return Err(Error::Shape(format!(
            "latent has {} dims, levels have {}",
            z.len(),
            levels.dims()
        )));
    }
    quantize_bounded(&bound(z)?, levels)
}

pub fn code_to_index(code: &FsqCode, levels: &FsqLevels) -> Result<u64> {
    levels.check_code(code)?;
    Ok(code
        .0
        .iter()
        .zip(levels.levels())
        .fold(0u64, |acc, (&c, &l)| acc * l as u64 + c as u64))
}

pub fn index_to_code(index: u64, levels: &FsqLevels) -> Result<FsqCode> {
    let size = levels.codebook_size();
    if index >= size {
        return Err(Error::InvalidIndex { index, size });
    }
    let mut rest = index;
    let mut code = vec![0u32; levels.dims()];
    for (slot, &l) in code.iter_mut().zip(levels.levels()).rev() {
        *slot = (rest % l as u64) as u32;
        rest /= l as u64;
    }
    Ok(FsqCode(code))
}

pub fn codebook_size(levels: &FsqLevels) -> u64 {
    levels.codebook_size()
}

/// Grid vector of a flat token id.
pub fn index_to_grid(index: u64, levels: &FsqLevels) -> Result<Vec<f64>> {
    levels.dequantize(&index_to_code(index, levels)?)
}

/// Tensor-level FSQ with a straight-through gradient.
///
/// `z` has shape `[.., d]`. The returned tensor equals the grid values exactly
/// in the forward pass, and its gradient flows to `tanh(z)` unchanged:
/// `out = q + (z_b - detach(z_b))`.
pub fn quantize_ste(z: &Tensor, levels: &FsqLevels) -> Result<(Tensor, Vec<u32>)> {
    let zb = z.tanh()?;
    quantize_bounded_ste(&zb, levels)
}

/// As [`quantize_ste`], for input that is already bounded.
pub fn quantize_bounded_ste(zb: &Tensor, levels: &FsqLevels) -> Result<(Tensor, Vec<u32>)> {
    let d = levels.dims();
    let last = zb.dims().last().copied().unwrap_or(0);
    if last != d {
        return Err(Error::Shape(format!(
            "latent tensor last dim {last}, levels have {d}"
        )));
    }
    let flat = zb.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("FSQ input".into()));
    }
    let mut grid = Vec::with_capacity(flat.len());
    let mut indices = Vec::with_capacity(flat.len() / d);
    for row in flat.chunks(d) {
        let mut index = 0u64;
        for (&v, &l) in row.iter().zip(levels.levels()) {
            let k = nearest_code(v.clamp(-MAX_BOUND, MAX_BOUND), l);
            grid.push(FsqLevels::grid_value(l, k));
            index = index * l as u64 + k as u64;
        }
        indices.push(index as u32);
    }
    let q = Tensor::from_vec(grid, zb.shape(), zb.device())?.to_dtype(zb.dtype())?;
    let passthrough = (zb - zb.detach())?;
    Ok(((q + passthrough)?, indices))
}

/// Grid tensor `[n, d]` for a list of flat indices (no gradient).
pub fn indices_to_grid_tensor(
    indices: &[u32],
    levels: &FsqLevels,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let mut grid = Vec::with_capacity(indices.len() * levels.dims());
    for &i in indices {
        grid.extend(index_to_grid(i as u64, levels)?);
    }
    Ok(Tensor::from_vec(grid, (indices.len(), levels.dims()), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn l444() -> FsqLevels {
        FsqLevels::prompt_default()
    }

    /// Brute-force nearest grid point, lowest code on ties.
    fn oracle_nearest(v: f64, level: u32) -> u32 {
        let mut best = 0;
        for k in 1..level {
            let dk = (v - FsqLevels::grid_value(level, k)).abs();
            let db = (v - FsqLevels::grid_value(level, best)).abs();
            if dk < db {
                best = k;
            }
        }
        best
    }

    #[test]
    fn bound_fixes_origin_and_saturates() {
        assert_eq!(bound(&[0.0, 0.0, 0.0]).unwrap().values(), &[0.0, 0.0, 0.0]);
        let b = bound(&[1e6]).unwrap();
        assert!(b.values()[0] < 1.0 && b.values()[0] > 0.999_999);
        let b = bound(&[0.5]).unwrap();
        assert!((b.values()[0] - 0.462_117_157_260_009_8).abs() < 1e-15);
        assert!(bound(&[f64::NAN]).is_err());
        assert!(bound(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn quantize_single_dim_example() {
        let levels = FsqLevels::new(vec![4]).unwrap();
        let (code, value) = quantize_bounded(&BoundedLatent(vec![0.3]), &levels).unwrap();
        assert_eq!(code.0, vec![2]);
        assert_eq!(value, vec![0.25]);
        let grid: Vec<f64> = (0..4).map(|k| FsqLevels::grid_value(4, k)).collect();
        assert_eq!(grid, vec![-0.75, -0.25, 0.25, 0.75]);
    }

    #[test]
    fn tie_breaks_toward_lower_code() {
        let (code, value) =
            quantize_bounded(&BoundedLatent(vec![-0.9, 0.0, 0.9]), &l444()).unwrap();
        assert_eq!(code.0, vec![0, 1, 3]);
        assert_eq!(value, vec![-0.75, -0.25, 0.75]);
        for (v, k) in [(-0.9, 0), (0.0, 1), (0.9, 3)] {
            assert_eq!(oracle_nearest(v, 4), k);
        }
    }

    #[test]
    fn mixed_radix_examples() {
        let l = l444();
        assert_eq!(code_to_index(&FsqCode(vec![0, 0, 0]), &l).unwrap(), 0);
        assert_eq!(code_to_index(&FsqCode(vec![3, 3, 3]), &l).unwrap(), 63);
        assert_eq!(code_to_index(&FsqCode(vec![1, 2, 3]), &l).unwrap(), 27);
        let c = FsqLevels::content_default();
        assert_eq!(index_to_code(0, &c).unwrap().0, vec![0, 0, 0, 0]);
        assert_eq!(index_to_code(1295, &c).unwrap().0, vec![5, 5, 5, 5]);
        assert_eq!(index_to_code(27, &l).unwrap().0, vec![1, 2, 3]);
    }

    #[test]
    fn codebook_sizes() {
        assert_eq!(codebook_size(&l444()), 64);
        assert_eq!(codebook_size(&FsqLevels::content_default()), 1296);
        assert_eq!(codebook_size(&FsqLevels::new(vec![2]).unwrap()), 2);
    }

    #[test]
    fn error_paths() {
        assert!(FsqLevels::new(vec![4, 1]).is_err());
        assert!(FsqLevels::new(vec![]).is_err());
        assert!(matches!(
            code_to_index(&FsqCode(vec![0, 4, 0]), &l444()),
            Err(Error::InvalidCode { index: 1, .. })
        ));
        assert!(matches!(
            index_to_code(64, &l444()),
            Err(Error::InvalidIndex { index: 64, size: 64 })
        ));
        assert!(matches!(quantize(&[0.1, 0.2], &l444()), Err(Error::Shape(_))));
    }

    #[test]
    fn exhaustive_bijection_and_idempotence() {
        for levels in [l444(), FsqLevels::content_default()] {
            for i in 0..levels.codebook_size() {
                let code = index_to_code(i, &levels).unwrap();
                assert_eq!(code_to_index(&code, &levels).unwrap(), i);
                let grid = levels.dequantize(&code).unwrap();
                let (c2, v2) = quantize_bounded(&BoundedLatent(grid.clone()), &levels).unwrap();
                assert_eq!(c2, code);
                assert_eq!(v2, grid);
            }
        }
    }

    #[test]
    fn grid_coverage() {
        let levels = FsqLevels::content_default();
        for dim in 0..levels.dims() {
            let mut seen: Vec<f64> = (0..levels.codebook_size())
                .map(|i| index_to_grid(i, &levels).unwrap()[dim])
                .collect();
            seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
            seen.dedup();
            let expected: Vec<f64> = (0..6).map(|k| -1.0 + (2.0 * k as f64 + 1.0) / 6.0).collect();
            assert_eq!(seen, expected);
        }
    }

    #[test]
    fn ste_forward_is_exactly_on_grid_and_gradient_passes_through() {
        let dev = Device::Cpu;
        let levels = FsqLevels::content_default();
        let zb = Var::from_vec(vec![0.1f64, -0.5, 0.77, 0.33], (1, 4), &dev).unwrap();
        let (out, idx) = quantize_bounded_ste(zb.as_tensor(), &levels).unwrap();
        let expect = index_to_grid(idx[0] as u64, &levels).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), expect);
        let w = Tensor::new(&[[1.5f64, -2.0, 0.25, 3.0]], &dev).unwrap();
        let loss = (out * &w).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let gz = g.get(zb.as_tensor()).unwrap();
        assert_eq!(gz.to_vec2::<f64>().unwrap(), w.to_vec2::<f64>().unwrap());
    }

    proptest! {
        #[test]
        fn quantize_matches_enumeration(v in -0.999_999f64..0.999_999, l in 2u32..9) {
            let levels = FsqLevels::new(vec![l]).unwrap();
            let (code, _) = quantize_bounded(&BoundedLatent(vec![v]), &levels).unwrap();
            prop_assert_eq!(code.0[0], oracle_nearest(v, l));
        }

        #[test]
        fn bound_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let bl = bound(&[lo]).unwrap().values()[0];
            let bh = bound(&[hi]).unwrap().values()[0];
            prop_assert!(bl <= bh);
            prop_assert!(bl.abs() < 1.0 && bh.abs() < 1.0);
        }
    }
}
