use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

use super::ModelConfig;

/// One forward pass: the tape, the dropout RNG and the mode.
pub struct Pass<'a, 'p> {
    pub tape: &'a mut Tape<'p>,
    pub rng: &'a mut ChaCha8Rng,
    pub training: bool,
    pub config: &'a ModelConfig,
}

impl Pass<'_, '_> {
    pub fn dropout(&mut self, x: Var) -> Result<Var, NumericsError> {
        let rate = self.config.dropout;
        self.tape.dropout(x, rate, self.rng, self.training)
    }

    /// Fresh randomness for callers that need their own stream.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Affine map `x W + b` with `W` of shape `inputs × outputs`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            weight: store.add_xavier(format!("{name}.w"), inputs, outputs, rng)?,
            bias: store.add_filled(format!("{name}.b"), outputs, 0.0)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gain: store.add_filled(format!("{name}.g"), width, 1.0)?,
            bias: store.add_filled(format!("{name}.b"), width, 0.0)?,
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var, NumericsError> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Multi-head attention followed by a feed-forward layer, each with a
/// residual connection and layer norm.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), hidden, hidden, rng)?,
            key: Linear::new(store, &format!("{name}.k"), hidden, hidden, rng)?,
            value: Linear::new(store, &format!("{name}.v"), hidden, hidden, rng)?,
            output: Linear::new(store, &format!("{name}.o"), hidden, hidden, rng)?,
            norm1: Norm::new(store, &format!("{name}.ln1"), hidden)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), hidden, ff, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, hidden, rng)?,
            norm2: Norm::new(store, &format!("{name}.ln2"), hidden)?,
        })
    }
}

/// `x` attends to `context` (itself when `None`) under an optional additive
/// mask of shape `rows(x) × rows(context)` or `1 × rows(context)`.
pub fn attention_block(
    pass: &mut Pass,
    p: &AttentionParams,
    x: Var,
    context: Option<Var>,
    mask: Option<&Tensor>,
) -> Result<Var, NumericsError> {
    let ctx = context.unwrap_or(x);
    let hidden = pass.config.hidden;
    if pass.tape.value(x).cols() != hidden || pass.tape.value(ctx).cols() != hidden {
        return Err(NumericsError::ShapeMismatch {
            op: "attention_block",
            left: pass.tape.value(x).shape().to_vec(),
            right: pass.tape.value(ctx).shape().to_vec(),
        });
    }
    let heads = pass.config.heads;
    let dk = pass.config.head_width();
    let q = p.query.apply(pass.tape, x)?;
    let k = p.key.apply(pass.tape, ctx)?;
    let v = p.value.apply(pass.tape, ctx)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                pass.tape.slice_cols(q, h * dk, dk)?,
                pass.tape.slice_cols(k, h * dk, dk)?,
                pass.tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = pass.tape.matmul_nt(qh, kh)?;
        let scores = pass.tape.scale(scores, scale);
        let weights = pass.tape.masked_softmax(scores, mask)?;
        outs.push(pass.tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { pass.tape.concat_cols(&outs)? };
    let attended = p.output.apply(pass.tape, joined)?;
    let attended = pass.dropout(attended)?;
    let res = pass.tape.add(x, attended)?;
    let eps = pass.config.layer_norm_eps;
    let y = p.norm1.apply(pass.tape, res, eps)?;
    let f = p.ff1.apply(pass.tape, y)?;
    let f = pass.tape.relu(f);
    let f = p.ff2.apply(pass.tape, f)?;
    let f = pass.dropout(f)?;
    let res = pass.tape.add(y, f)?;
    p.norm2.apply(pass.tape, res, eps)
}
