//! Parameter registry and shared network building blocks.

use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Standard deviation for Gaussian parameter init.
pub const INIT_STD: f64 = 0.02;

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named, ordered registry of trainable parameters.
///
/// Every parameter is registered exactly once; the registration order is the
/// canonical order for optimizer state and checkpoints.
pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!(
                "parameter {name:?} registered twice"
            )));
        }
        tensor.requires_grad = true;
        self.entries.push((name, tensor));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Adds a dense per-parameter gradient table (aligned by id) into the
    /// stored gradients.
    pub fn accumulate_table(&mut self, table: &[Option<Vec<F>>]) {
        for (slot, (_, t)) in table.iter().zip(self.entries.iter_mut()) {
            if let Some(g) = slot {
                t.accumulate_grad(g);
            }
        }
    }
}

/// Maps parameters to tape leaves for one forward pass.
///
/// A parameter used several times in one graph is registered as a single
/// leaf, so the tape accumulates all of its gradient contributions.
pub struct TapeBind {
    vars: Vec<Option<Var>>,
}

impl TapeBind {
    pub fn new<F: Scalar>(store: &ParamStore<F>) -> Self {
        TapeBind {
            vars: vec![None; store.len()],
        }
    }

    pub fn var<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        id: ParamId,
    ) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = tape.leaf(store.get(id))?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Extracts parameter gradients from a backward pass into a dense table
    /// aligned with the store order. Parameters never bound, or bound but not
    /// on a path to the root, get `None`.
    pub fn grad_table<F: Scalar>(&self, grads: &Gradients<F>) -> Vec<Option<Vec<F>>> {
        self.vars
            .iter()
            .map(|slot| slot.and_then(|v| grads.wrt(v).map(|g| g.to_vec())))
            .collect()
    }

    /// Accumulates gradients straight into the store.
    pub fn accumulate<F: Scalar>(&self, grads: &Gradients<F>, store: &mut ParamStore<F>) {
        for (slot, idx) in self.vars.iter().zip(0..) {
            if let Some(v) = slot {
                if let Some(g) = grads.wrt(*v) {
                    store.get_mut(ParamId(idx)).accumulate_grad(g);
                }
            }
        }
    }
}

// ── Layers ───────────────────────────────────────────────────────────

/// Affine map `x @ w + b` with `w: [d_in, d_out]`; the bias is optional.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(vec![d_in, d_out], INIT_STD, rng),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]))?;
        Ok(Linear { w, b: Some(b) })
    }

    /// Projection without a bias term.
    pub fn init_no_bias<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(vec![d_in, d_out], INIT_STD, rng),
        )?;
        Ok(Linear { w, b: None })
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let w = bind.var(tape, store, self.w)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = bind.var(tape, store, b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![d], F::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![d]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let gamma = bind.var(tape, store, self.gamma)?;
        let beta = bind.var(tape, store, self.beta)?;
        tape.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention sublayer (projections around the fused primitive).
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        // no key bias: a shared shift of every key is erased by the row
        // softmax, so the parameter would never receive gradient
        Ok(AttentionLayer {
            q: Linear::init(store, rng, &format!("{name}.q"), d, d)?,
            k: Linear::init_no_bias(store, rng, &format!("{name}.k"), d, d)?,
            v: Linear::init(store, rng, &format!("{name}.v"), d, d)?,
            o: Linear::init(store, rng, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    /// Self-attention when `memory` is None, cross-attention otherwise.
    pub fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        x: Var,
        memory: Option<Var>,
        causal: bool,
    ) -> Result<Var> {
        let kv_src = memory.unwrap_or(x);
        let q = self.q.apply(tape, bind, store, x)?;
        let k = self.k.apply(tape, bind, store, kv_src)?;
        let v = self.v.apply(tape, bind, store, kv_src)?;
        let attn = tape.attention(q, k, v, self.heads, causal)?;
        self.o.apply(tape, bind, store, attn)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`
/// with a GELU feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: AttentionLayer,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        ff: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), d)?,
            attn: AttentionLayer::init(store, rng, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), d, ff)?,
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), ff, d)?,
        })
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        x: Var,
        causal: bool,
    ) -> Result<Var> {
        let normed = self.ln1.apply(tape, bind, store, x)?;
        let attn = self.attn.apply(tape, bind, store, normed, None, causal)?;
        let x = tape.add(x, attn)?;
        let normed = self.ln2.apply(tape, bind, store, x)?;
        let h = self.ff1.apply(tape, bind, store, normed)?;
        let h = tape.gelu(h)?;
        let h = self.ff2.apply(tape, bind, store, h)?;
        tape.add(x, h)
    }
}

/// Decoder block with causal self-attention, cross-attention into encoder
/// memory, and a GELU feed-forward (all pre-norm).
#[derive(Debug, Clone, Copy)]
pub struct CrossBlock {
    pub ln_sa: LayerNorm,
    pub self_attn: AttentionLayer,
    pub ln_ca: LayerNorm,
    pub cross_attn: AttentionLayer,
    pub ln_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CrossBlock {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        ff: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(CrossBlock {
            ln_sa: LayerNorm::init(store, &format!("{name}.ln_sa"), d)?,
            self_attn: AttentionLayer::init(store, rng, &format!("{name}.sa"), d, heads)?,
            ln_ca: LayerNorm::init(store, &format!("{name}.ln_ca"), d)?,
            cross_attn: AttentionLayer::init(store, rng, &format!("{name}.ca"), d, heads)?,
            ln_ff: LayerNorm::init(store, &format!("{name}.ln_ff"), d)?,
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), d, ff)?,
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), ff, d)?,
        })
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        x: Var,
        memory: Var,
    ) -> Result<Var> {
        let normed = self.ln_sa.apply(tape, bind, store, x)?;
        let sa = self
            .self_attn
            .apply(tape, bind, store, normed, None, true)?;
        let x = tape.add(x, sa)?;
        let normed = self.ln_ca.apply(tape, bind, store, x)?;
        let ca = self
            .cross_attn
            .apply(tape, bind, store, normed, Some(memory), false)?;
        let x = tape.add(x, ca)?;
        let normed = self.ln_ff.apply(tape, bind, store, x)?;
        let h = self.ff1.apply(tape, bind, store, normed)?;
        let h = tape.gelu(h)?;
        let h = self.ff2.apply(tape, bind, store, h)?;
        tape.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn bind_registers_single_leaf_for_repeated_use() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let a = bind.var(&mut tape, &store, id).unwrap();
        let b = bind.var(&mut tape, &store, id).unwrap();
        assert_eq!(a, b);
        // y = w * w; dy/dw = 2w = 6 accumulated through both uses
        let y = tape.mul(a, b).unwrap();
        let root = tape.sum_all(y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[6.0]);
    }

    #[test]
    fn block_forward_shapes_hold() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_from(1);
        let block = Block::init(&mut store, &mut rng, "blk", 8, 16, 2).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let x = tape
            .constant(vec![5, 8], (0..40).map(|i| i as f32 * 0.01).collect())
            .unwrap();
        let y = block.apply(&mut tape, &mut bind, &store, x, false).unwrap();
        assert_eq!(tape.shape(y), &[5, 8]);
    }
}
