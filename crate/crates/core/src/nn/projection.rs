use super::attention::{flatten_tokens, unflatten_tokens, ProjectionTriple};
use super::conv::{DepthwiseConv2d, PointwiseConv};
use crate::error::Result;
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Depthwise 3×3 followed by a pointwise `d → d` map.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBranch<T: Real> {
    pub depthwise: DepthwiseConv2d<T>,
    pub pointwise: PointwiseConv<T>,
}

impl<T: Real> ProjectionBranch<T> {
    pub fn new(d_model: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            depthwise: DepthwiseConv2d::new(d_model, 3, rng::derive(seed, 1))?,
            pointwise: PointwiseConv::new(d_model, d_model, rng::derive(seed, 2))?,
        })
    }

    /// Delta depthwise kernels and identity pointwise weights.
    pub fn identity(d_model: usize) -> Result<Self> {
        let mut pointwise = PointwiseConv::zeroed(d_model, d_model)?;
        for c in 0..d_model {
            pointwise.weight.data_mut()[c * d_model + c] = T::one();
        }
        Ok(Self { depthwise: DepthwiseConv2d::identity(d_model, 3)?, pointwise })
    }

    /// `[N, d, H, W] → [N, H·W, d]`
    pub fn forward(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        flatten_tokens(&self.pointwise.forward(&self.depthwise.forward(f)?)?)
    }

    pub fn backward(&mut self, f: &Tensor<T>, dtokens: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = f.dims4()?;
        let mid = self.depthwise.forward(f)?;
        let dmid = self.pointwise.backward(&mid, &unflatten_tokens(dtokens, h, w)?)?;
        self.depthwise.backward(f, &dmid)
    }
}

/// Convolutional token projection: three structurally identical branches
/// with independent parameters produce Q, K and V from one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvProjection<T: Real> {
    pub query: ProjectionBranch<T>,
    pub key: ProjectionBranch<T>,
    pub value: ProjectionBranch<T>,
}

impl<T: Real> ConvProjection<T> {
    pub fn new(d_model: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            query: ProjectionBranch::new(d_model, rng::derive(seed, 11))?,
            key: ProjectionBranch::new(d_model, rng::derive(seed, 12))?,
            value: ProjectionBranch::new(d_model, rng::derive(seed, 13))?,
        })
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<ProjectionTriple<T>> {
        Ok(ProjectionTriple { q: self.query.forward(f)?, k: self.key.forward(f)?, v: self.value.forward(f)? })
    }

    /// Sum of the three branch input gradients.
    pub fn backward(&mut self, f: &Tensor<T>, grads: &ProjectionTriple<T>) -> Result<Tensor<T>> {
        let mut df = self.query.backward(f, &grads.q)?;
        for g in [self.key.backward(f, &grads.k)?, self.value.backward(f, &grads.v)?] {
            for (a, b) in df.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        Ok(df)
    }
}
