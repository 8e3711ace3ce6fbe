use rand::Rng;

use crate::numerics::{Graph, Linear, Norm, NumericsError, ParamStore, Var};

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    width: usize,
}

impl Attention {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Attention {
            query: Linear::register(store, &format!("{name}.query"), width, width, 1.0, rng)?,
            key: Linear::register(store, &format!("{name}.key"), width, width, 1.0, rng)?,
            value: Linear::register(store, &format!("{name}.value"), width, width, 1.0, rng)?,
            out: Linear::register(store, &format!("{name}.out"), width, width, out_gain, rng)?,
            width,
        })
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, context: Var) -> Result<Var, NumericsError> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, 1.0 / (self.width as f64).sqrt())?;
        let weights = g.softmax(logits, 1)?;
        let mixed = g.matmul(weights, v)?;
        self.out.forward(g, mixed)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(FeedForward {
            up: Linear::register(store, &format!("{name}.up"), width, 4 * width, 1.0, rng)?,
            down: Linear::register(store, &format!("{name}.down"), 4 * width, width, out_gain, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NumericsError> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm block: `x += Attn(LN(x), LN(ctx)); x += FFN(LN(x))`. Without a
/// separate context the block is self-attention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Block {
    attn_norm: Norm,
    context_norm: Option<Norm>,
    attn: Attention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

impl Block {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        cross: bool,
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Block {
            attn_norm: Norm::register(store, &format!("{name}.attn_norm"), width)?,
            context_norm: if cross {
                Some(Norm::register(store, &format!("{name}.context_norm"), width)?)
            } else {
                None
            },
            attn: Attention::register(store, &format!("{name}.attn"), width, out_gain, rng)?,
            ffn_norm: Norm::register(store, &format!("{name}.ffn_norm"), width)?,
            ffn: FeedForward::register(store, &format!("{name}.ffn"), width, out_gain, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, context: Option<Var>) -> Result<Var, NumericsError> {
        let xn = self.attn_norm.forward(g, x)?;
        let ctx = match (self.context_norm, context) {
            (Some(norm), Some(c)) => norm.forward(g, c)?,
            (None, None) => xn,
            _ => return Err(NumericsError::Usage("block context does not match its kind".into())),
        };
        let a = self.attn.forward(g, xn, ctx)?;
        let x = g.add(x, a)?;
        let xn = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, xn)?;
        g.add(x, f)
    }
}
