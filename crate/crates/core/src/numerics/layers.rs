use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

/// Tensor of the given shape with i.i.d. `N(0, std²)` entries.
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor, NumericsError> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).map_err(|e| NumericsError::Config(e.to_string()))?;
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Affine map `x·W + b` on row vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers `<name>.weight` ([in×out], std `1/sqrt(in)` scaled by `gain`)
    /// and a zero `<name>.bias`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let std = gain / (input as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[input, output], std)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output])?)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (g.p(self.weight), g.p(self.bias));
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// LayerNorm gain (ones) and bias (zeros).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn register(store: &mut ParamStore, name: &str, width: usize) -> Result<Self, NumericsError> {
        Ok(Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[width], 1.0)?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])?)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NumericsError> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}
