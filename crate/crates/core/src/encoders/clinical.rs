use rand::Rng;

use crate::numerics::{Graph, Linear, NumericsError, ParamStore, Var};

/// Two-layer perceptron `GELU(x·W1 + b1)·W2 + b2` from the profile text
/// embedding to the clinical embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClinicalMlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl ClinicalMlp {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        text_dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(ClinicalMlp {
            hidden: Linear::register(store, &format!("{name}.hidden"), text_dim, hidden, 1.0, rng)?,
            output: Linear::register(store, &format!("{name}.output"), hidden, out, 1.0, rng)?,
        })
    }

    /// `x` is `[n × text_dim]`; returns `[n × out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NumericsError> {
        let h = self.hidden.forward(g, x)?;
        let h = g.gelu(h)?;
        self.output.forward(g, h)
    }
}
