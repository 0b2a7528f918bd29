//! Columnization (`H×W×C → W×(H·C) → W×C′`) and its inverse.
//!
//! Flatten convention: inside a column, element `(h, c)` lands at index
//! `h·C + c` (height-major, then channel).

use crate::error::{contract, shape_err, Result};
use crate::numerics::{Float, Tape, Tensor, Var};

/// Latent feature map of shape `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T>(Tensor<T>);

impl<T: Float> FeatureMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        match t.shape() {
            &[h, w, c] if h >= 1 && w >= 1 && c >= 1 => Ok(Self(t)),
            s => Err(shape_err("feature_map", format!("need H×W×C with all ≥ 1, got {:?}", s))),
        }
    }

    pub fn height(&self) -> usize {
        self.0.dim(0)
    }

    pub fn width(&self) -> usize {
        self.0.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// `W × C′` token sequence; token `j` covers column band `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T>(Tensor<T>);

impl<T: Float> TokenSequence<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(shape_err("token_sequence", format!("need W×C′, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(contract("token sequence has non-finite entries"));
        }
        Ok(Self(t))
    }

    pub fn len(&self) -> usize {
        self.0.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.dim(1)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn token(&self, j: usize) -> &[T] {
        let c = self.channels();
        &self.0.data()[j * c..(j + 1) * c]
    }
}

/// Affine map on row vectors: `y = x·weight + bias`, weight `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Float> LinearMap<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(shape_err("linear_map", format!("weight {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.dim(1)] {
                return Err(shape_err("linear_map", format!("bias {:?} for weight {:?}", b.shape(), weight.shape())));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        let w = Tensor::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() });
        Self { weight: w, bias: None }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

/// Flatten each column of a `[..., H, W, C]` map into `[..., W, H·C]`.
pub fn column_flatten<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 3 {
        return Err(shape_err("columnize", format!("{:?}", x.shape())));
    }
    let (h, w, c) = (x.dim(r - 3), x.dim(r - 2), x.dim(r - 1));
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    let mut shape = x.shape()[..r - 3].to_vec();
    shape.extend([w, h * c]);
    x.permute(&axes)?.into_reshape(shape)
}

/// Inverse of [`column_flatten`]: `[..., W, H·C]` back to `[..., H, W, C]`.
pub fn column_unflatten<T: Float>(x: &Tensor<T>, height: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 || height == 0 || x.dim(r - 1) % height != 0 {
        return Err(shape_err("rasterize", format!("{:?} with height {}", x.shape(), height)));
    }
    let (w, hc) = (x.dim(r - 2), x.dim(r - 1));
    let c = hc / height;
    let mut shape = x.shape()[..r - 2].to_vec();
    shape.extend([w, height, c]);
    let y = x.reshape(shape)?;
    let mut axes: Vec<usize> = (0..r + 1).collect();
    axes.swap(r - 2, r - 1);
    y.permute(&axes)
}

pub fn columnize<T: Float>(fmap: &FeatureMap<T>, proj: &LinearMap<T>) -> Result<TokenSequence<T>> {
    let hc = fmap.height() * fmap.channels();
    if proj.in_dim() != hc {
        return Err(shape_err("columnize", format!("projection input {} but H·C = {}", proj.in_dim(), hc)));
    }
    let flat = column_flatten(fmap.tensor())?;
    TokenSequence::new(proj.apply(&flat)?)
}

pub fn rasterize<T: Float>(tokens: &TokenSequence<T>, proj: &LinearMap<T>, height: usize) -> Result<FeatureMap<T>> {
    if proj.in_dim() != tokens.channels() {
        return Err(shape_err(
            "rasterize",
            format!("projection input {} but tokens have {} channels", proj.in_dim(), tokens.channels()),
        ));
    }
    if height == 0 || proj.out_dim() % height != 0 {
        return Err(shape_err("rasterize", format!("projection output {} not divisible by H = {}", proj.out_dim(), height)));
    }
    let flat = proj.apply(tokens.tensor())?;
    FeatureMap::new(column_unflatten(&flat, height)?)
}

/// Tape version of [`column_flatten`] for a batched `[B, H, W, C]` map.
pub(crate) fn column_flatten_var<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(y, [b, w, h * c])
}

/// Tape version of [`column_unflatten`]: `[B, W, H·C]` to `[B, H, W, C]`.
pub(crate) fn column_unflatten_var<T: Float>(tape: &mut Tape<T>, x: Var, height: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, w, hc) = (s[0], s[1], s[2]);
    let y = tape.reshape(x, [b, w, height, hc / height])?;
    tape.permute(y, &[0, 2, 1, 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_height_one_is_plain_reshape() {
        let f = FeatureMap::new(Tensor::<f64>::from_fn([1, 5, 1], |i| i as f64 * 1.5)).unwrap();
        let t = columnize(&f, &LinearMap::identity(1)).unwrap();
        assert_eq!(t.tensor().shape(), &[5, 1]);
        assert_eq!(t.tensor().data(), f.tensor().data());
    }

    #[test]
    fn two_by_two_follows_height_major_convention() {
        // [[a, b], [c, d]] with a=1, b=2, c=3, d=4
        let f = FeatureMap::new(Tensor::<f64>::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let t = columnize(&f, &LinearMap::identity(2)).unwrap();
        assert_eq!(t.tensor().data(), &[1.0, 3.0, 2.0, 4.0]);
        let back = rasterize(&t, &LinearMap::identity(2), 2).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn projection_dimension_mismatch_is_rejected() {
        let f = FeatureMap::new(Tensor::<f32>::zeros([2, 3, 4])).unwrap();
        assert!(columnize(&f, &LinearMap::identity(7)).is_err());
        let t = TokenSequence::new(Tensor::<f32>::zeros([3, 8])).unwrap();
        assert!(rasterize(&t, &LinearMap::identity(8), 3).is_err());
        assert!(rasterize(&t, &LinearMap::identity(4), 2).is_err());
    }

    #[test]
    fn zero_tokens_rasterize_to_zero() {
        let t = TokenSequence::new(Tensor::<f32>::zeros([4, 6])).unwrap();
        let p = LinearMap::new(Tensor::from_fn([6, 6], |i| i as f32 * 0.1), None).unwrap();
        let f = rasterize(&t, &p, 3).unwrap();
        assert!(f.tensor().data().iter().all(|&x| x == 0.0));
        assert!(FeatureMap::new(Tensor::<f32>::zeros([0, 1, 1])).is_err());
    }
}
