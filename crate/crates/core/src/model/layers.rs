use rand::Rng;

use crate::numerics::{Graph, NumericsError, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Builds parameters with a shared initializer.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<ParamId, NumericsError> {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.store.add(name, t, group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId, NumericsError> {
        self.store.add(name, Tensor::filled(shape, value), ParamGroup::Head)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear, NumericsError> {
        Ok(Linear {
            weight: self.normal(&format!("{name}.weight"), &[input, output], ParamGroup::Head)?,
            bias: Some(self.constant(&format!("{name}.bias"), &[output], 0.0)?),
        })
    }

    /// A linear map without bias, for outputs that only feed a softmax,
    /// where a bias would shift every logit equally and never learn.
    pub fn linear_unbiased(&mut self, name: &str, input: usize, output: usize) -> Result<Linear, NumericsError> {
        Ok(Linear {
            weight: self.normal(&format!("{name}.weight"), &[input, output], ParamGroup::Head)?,
            bias: None,
        })
    }

    pub fn ffn(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Result<Ffn, NumericsError> {
        Ok(Ffn {
            inner: self.linear(&format!("{name}.0"), input, hidden)?,
            outer: self.linear(&format!("{name}.1"), hidden, output)?,
        })
    }

    /// An FFN whose output layer has no bias; see `linear_unbiased`.
    pub fn ffn_unbiased(
        &mut self,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Ffn, NumericsError> {
        Ok(Ffn {
            inner: self.linear(&format!("{name}.0"), input, hidden)?,
            outer: self.linear_unbiased(&format!("{name}.1"), hidden, output)?,
        })
    }

    pub fn norm(&mut self, name: &str, width: usize, group: ParamGroup) -> Result<Norm, NumericsError> {
        Ok(Norm {
            gain: self
                .store
                .add(format!("{name}.gain"), Tensor::filled(&[width], 1.0), group)?,
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[width]), group)?,
        })
    }
}

/// `x W + b` with `W` stored as `[input, output]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub inner: Linear,
    pub outer: Linear,
}

impl Ffn {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// Layer normalization over the last axis with a learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let axis = g.shape(x).len() - 1;
        let n = g.layer_norm(x, axis, LAYER_NORM_EPS)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}
