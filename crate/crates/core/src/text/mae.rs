//! Masked report reconstruction: sentinel corruption, transformer encoder,
//! and an autoregressive decoder that predicts only the masked tokens
//! (teacher-forced, conditioned on the encoder via cross-attention).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Block, CrossBlock, Linear, ParamId, ParamStore, TapeBind, INIT_STD};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::vocab::{BOS, EOS, PAD, SENTINEL};
use crate::{Error, Result};

/// A corrupted token sequence plus the ground truth at masked positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    /// Same length as the input; SENTINEL substituted at masked positions.
    pub corrupted: Vec<usize>,
    /// Masked positions in ascending order.
    pub masked_positions: Vec<usize>,
    /// Ground-truth token at each masked position.
    pub masked_ids: Vec<usize>,
}

/// Masks `round(rate * maskable)` positions (minimum 1), sampled uniformly
/// without replacement from positions that are not PAD/BOS/EOS.
pub fn mask_text(ids: &[usize], rate: f64, seed: u64) -> Result<MaskedText> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("text mask rate {rate} outside [0, 1]")));
    }
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != PAD && id != BOS && id != EOS)
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(Error::invalid("mask_text: no maskable position"));
    }
    let count = ((rate * maskable.len() as f64).round() as usize).max(1);
    let count = count.min(maskable.len());
    let mut pool = maskable;
    let mut rng = rng_from(seed);
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut masked_positions: Vec<usize> = pool[..count].to_vec();
    masked_positions.sort_unstable();
    let masked_ids = masked_positions.iter().map(|&p| ids[p]).collect();
    let mut corrupted = ids.to_vec();
    for &p in &masked_positions {
        corrupted[p] = SENTINEL;
    }
    Ok(MaskedText {
        corrupted,
        masked_positions,
        masked_ids,
    })
}

#[derive(Debug, Clone)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
}

pub struct TextModel {
    pub cfg: TextConfig,
    token_emb: ParamId,
    pos_emb: ParamId,
    encoder: Vec<Block>,
    decoder: Vec<CrossBlock>,
    out_head: Linear,
}

impl TextModel {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: TextConfig,
    ) -> Result<Self> {
        let d = cfg.dim;
        let token_emb = store.add(
            "text.token_emb",
            Tensor::randn(vec![cfg.vocab_size, d], INIT_STD, rng),
        )?;
        let pos_emb = store.add(
            "text.pos_emb",
            Tensor::randn(vec![cfg.max_len, d], INIT_STD, rng),
        )?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| Block::init(store, rng, &format!("text.enc{i}"), d, cfg.ff_dim, cfg.heads))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                CrossBlock::init(store, rng, &format!("text.dec{i}"), d, cfg.ff_dim, cfg.heads)
            })
            .collect::<Result<_>>()?;
        let out_head = Linear::init(store, rng, "text.out", d, cfg.vocab_size)?;
        Ok(TextModel {
            cfg,
            token_emb,
            pos_emb,
            encoder,
            decoder,
            out_head,
        })
    }

    pub fn param_count(cfg: &TextConfig) -> usize {
        let d = cfg.dim;
        let enc_block = 2 * d + 4 * d * d + 3 * d + 2 * d + d * cfg.ff_dim + cfg.ff_dim
            + cfg.ff_dim * d + d;
        let dec_block = enc_block + 2 * d + 4 * d * d + 3 * d; // extra ln + cross-attention
        cfg.vocab_size * d
            + cfg.max_len * d
            + cfg.enc_layers * enc_block
            + cfg.dec_layers * dec_block
            + d * cfg.vocab_size
            + cfg.vocab_size
    }

    /// Drops trailing padding; the encoder and pooling never see PAD.
    fn trim(ids: &[usize]) -> &[usize] {
        let end = ids.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1);
        &ids[..end]
    }

    fn embed<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        ids: &[usize],
        positions: Option<&[usize]>,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("text embed: empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                self.cfg.vocab_size
            )));
        }
        let tok = bind.var(tape, store, self.token_emb)?;
        let pos = bind.var(tape, store, self.pos_emb)?;
        let tok_rows = tape.gather_rows(tok, ids)?;
        let default_positions: Vec<usize> = (0..ids.len()).collect();
        let positions = positions.unwrap_or(&default_positions);
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.cfg.max_len) {
            return Err(Error::invalid(format!(
                "position {bad} outside maximum length {}",
                self.cfg.max_len
            )));
        }
        let pos_rows = tape.gather_rows(pos, positions)?;
        tape.add(tok_rows, pos_rows)
    }

    /// Encoder over a (possibly corrupted) sequence; trailing PAD trimmed.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        ids: &[usize],
    ) -> Result<Var> {
        let ids = Self::trim(ids);
        let mut x = self.embed(tape, bind, store, ids, None)?;
        for block in &self.encoder {
            x = block.apply(tape, bind, store, x, false)?;
        }
        Ok(x)
    }

    /// Per-sample masked-token cross-entropy.
    ///
    /// The decoder predicts the masked tokens left to right: query i carries
    /// the embedding of the previous ground-truth masked token (BOS for the
    /// first) plus the positional embedding of the masked slot it predicts,
    /// attends causally over earlier queries, and cross-attends into the
    /// encoder output of the corrupted sequence.
    pub fn sample_rec_loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        masked: &MaskedText,
    ) -> Result<Var> {
        let seq_len = Self::trim(&masked.corrupted).len();
        if let Some(&bad) = masked
            .masked_positions
            .iter()
            .find(|&&p| p >= seq_len)
        {
            return Err(Error::invalid(format!(
                "masked position {bad} outside sequence of length {seq_len}"
            )));
        }
        if masked.masked_positions.len() != masked.masked_ids.len()
            || masked.masked_ids.is_empty()
        {
            return Err(Error::invalid("masked text: positions and ids disagree"));
        }
        let memory = self.encode(tape, bind, store, &masked.corrupted)?;
        let mut input_ids = Vec::with_capacity(masked.masked_ids.len());
        input_ids.push(BOS);
        input_ids.extend_from_slice(&masked.masked_ids[..masked.masked_ids.len() - 1]);
        let mut x = self.embed(
            tape,
            bind,
            store,
            &input_ids,
            Some(&masked.masked_positions),
        )?;
        for block in &self.decoder {
            x = block.apply(tape, bind, store, x, memory)?;
        }
        let logits = self.out_head.apply(tape, bind, store, x)?;
        let losses = tape.softmax_xent(logits, &masked.masked_ids)?;
        Ok(tape.mean_all(losses))
    }

    /// Pooled text representation: mean over encoder outputs at non-PAD
    /// positions of the uncorrupted sequence. Returns `[dim]`.
    pub fn pooled<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        ids: &[usize],
    ) -> Result<Var> {
        let enc = self.encode(tape, bind, store, ids)?;
        tape.mean_rows(enc)
    }
}
