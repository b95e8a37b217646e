//! Masked autoencoder over tokenized multi-lead signals.
//!
//! Token construction sums three terms per (lead, patch) cell: a shared
//! temporal embedding, a lead-specific spatial embedding, and the output of a
//! small convolutional tokenizer applied to the patch. The encoder sees only
//! unmasked tokens; the decoder sees the full sequence with a shared mask
//! embedding substituted at masked slots (position terms re-added there) and
//! a linear head predicts the masked patches.

use rand_chacha::ChaCha8Rng;

use crate::ecg::tokenizer::{MaskSet, PatchGrid};
use crate::nn::{Block, Linear, ParamId, ParamStore, TapeBind, INIT_STD};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct EcgConfig {
    pub leads: usize,
    pub patch_count: usize,
    pub patch_len: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub gn_groups: usize,
}

pub struct EcgModel {
    pub cfg: EcgConfig,
    conv1_w: ParamId,
    conv1_b: ParamId,
    gn1_gamma: ParamId,
    gn1_beta: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    gn2_gamma: ParamId,
    gn2_beta: ParamId,
    spatial: ParamId,
    temporal: ParamId,
    encoder: Vec<Block>,
    mask_emb: ParamId,
    decoder: Vec<Block>,
    recon_head: Linear,
}

const CONV_KERNEL: usize = 5;

impl EcgModel {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: EcgConfig,
    ) -> Result<Self> {
        let d = cfg.dim;
        let half = d / 2;
        if half == 0 || half % cfg.gn_groups != 0 || d % cfg.gn_groups != 0 {
            return Err(Error::invalid(format!(
                "tokenizer channels ({half}, {d}) must divide into {} norm groups",
                cfg.gn_groups
            )));
        }
        let conv1_w = store.add(
            "ecg.tok.conv1.w",
            Tensor::randn(vec![half, 1, CONV_KERNEL], INIT_STD, rng),
        )?;
        let conv1_b = store.add("ecg.tok.conv1.b", Tensor::zeros(vec![half]))?;
        let gn1_gamma = store.add("ecg.tok.gn1.gamma", Tensor::full(vec![half], F::one()))?;
        let gn1_beta = store.add("ecg.tok.gn1.beta", Tensor::zeros(vec![half]))?;
        let conv2_w = store.add(
            "ecg.tok.conv2.w",
            Tensor::randn(vec![d, half, CONV_KERNEL], INIT_STD, rng),
        )?;
        let conv2_b = store.add("ecg.tok.conv2.b", Tensor::zeros(vec![d]))?;
        let gn2_gamma = store.add("ecg.tok.gn2.gamma", Tensor::full(vec![d], F::one()))?;
        let gn2_beta = store.add("ecg.tok.gn2.beta", Tensor::zeros(vec![d]))?;
        let spatial = store.add(
            "ecg.spatial",
            Tensor::randn(vec![cfg.leads, d], INIT_STD, rng),
        )?;
        let temporal = store.add(
            "ecg.temporal",
            Tensor::randn(vec![cfg.patch_count, d], INIT_STD, rng),
        )?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| Block::init(store, rng, &format!("ecg.enc{i}"), d, cfg.ff_dim, cfg.heads))
            .collect::<Result<_>>()?;
        let mask_emb = store.add("ecg.mask_emb", Tensor::randn(vec![d], INIT_STD, rng))?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| Block::init(store, rng, &format!("ecg.dec{i}"), d, cfg.ff_dim, cfg.heads))
            .collect::<Result<_>>()?;
        let recon_head = Linear::init(store, rng, "ecg.recon", d, cfg.patch_len)?;
        Ok(EcgModel {
            cfg,
            conv1_w,
            conv1_b,
            gn1_gamma,
            gn1_beta,
            conv2_w,
            conv2_b,
            gn2_gamma,
            gn2_beta,
            spatial,
            temporal,
            encoder,
            mask_emb,
            decoder,
            recon_head,
        })
    }

    pub fn param_count(cfg: &EcgConfig) -> usize {
        let d = cfg.dim;
        let half = d / 2;
        let tokenizer = half * CONV_KERNEL + half + 2 * half   // conv1 + gn1
            + d * half * CONV_KERNEL + d + 2 * d; // conv2 + gn2
        let tables = cfg.leads * d + cfg.patch_count * d;
        let block = 2 * d                      // ln1
            + 4 * d * d + 3 * d                // q k v o (k has no bias)
            + 2 * d                            // ln2
            + d * cfg.ff_dim + cfg.ff_dim      // ff1
            + cfg.ff_dim * d + d; // ff2
        let recon = d * cfg.patch_len + cfg.patch_len;
        tokenizer + tables + (cfg.enc_layers + cfg.dec_layers) * block + d + recon
    }

    /// Token grid per the embedding construction: for every (lead, patch)
    /// cell, `temporal[patch] + spatial[lead] + tokenizer(patch_signal)`.
    /// Returns `[leads * patch_count, dim]` in lead-major order.
    pub fn tokens<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        grid: &PatchGrid<F>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if grid.leads != cfg.leads
            || grid.patch_count != cfg.patch_count
            || grid.patch_len != cfg.patch_len
        {
            return Err(Error::ShapeMismatch {
                op: "tokens",
                lhs: vec![grid.leads, grid.patch_count, grid.patch_len],
                rhs: vec![cfg.leads, cfg.patch_count, cfg.patch_len],
            });
        }
        let rows = grid.rows();
        let x = tape.constant(vec![rows, 1, cfg.patch_len], grid.data().to_vec())?;
        let w1 = bind.var(tape, store, self.conv1_w)?;
        let b1 = bind.var(tape, store, self.conv1_b)?;
        let h = tape.conv1d(x, w1, b1)?;
        let h = tape.gelu(h)?;
        let g1 = bind.var(tape, store, self.gn1_gamma)?;
        let be1 = bind.var(tape, store, self.gn1_beta)?;
        let h = tape.group_norm(h, g1, be1, cfg.gn_groups)?;
        let w2 = bind.var(tape, store, self.conv2_w)?;
        let b2 = bind.var(tape, store, self.conv2_b)?;
        let h = tape.conv1d(h, w2, b2)?;
        let h = tape.gelu(h)?;
        let g2 = bind.var(tape, store, self.gn2_gamma)?;
        let be2 = bind.var(tape, store, self.gn2_beta)?;
        let h = tape.group_norm(h, g2, be2, cfg.gn_groups)?;
        let tok = tape.mean_last(h)?; // [rows, dim]

        let lead_of_row: Vec<usize> = (0..rows).map(|r| r / cfg.patch_count).collect();
        let patch_of_row: Vec<usize> = (0..rows).map(|r| r % cfg.patch_count).collect();
        let spa = bind.var(tape, store, self.spatial)?;
        let temp = bind.var(tape, store, self.temporal)?;
        let spa_rows = tape.gather_rows(spa, &lead_of_row)?;
        let temp_rows = tape.gather_rows(temp, &patch_of_row)?;
        let sum = tape.add(tok, spa_rows)?;
        tape.add(sum, temp_rows)
    }

    /// Runs the encoder over unmasked tokens only, in canonical
    /// (lead-major, time-minor) order.
    pub fn encode_visible<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        tokens: Var,
        mask: &MaskSet,
    ) -> Result<Var> {
        let visible = mask.visible_rows();
        if visible.is_empty() {
            return Err(Error::invalid("encode_visible: empty visible set"));
        }
        let mut x = tape.gather_rows(tokens, &visible)?;
        for block in &self.encoder {
            x = block.apply(tape, bind, store, x, false)?;
        }
        Ok(x)
    }

    /// Decodes the full sequence (visible encodings + shared mask embedding
    /// with position terms re-added at masked slots) and predicts a patch for
    /// every masked position. Returns `[mask.len(), patch_len]`.
    pub fn decode_and_reconstruct<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        visible_encodings: Var,
        mask: &MaskSet,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let visible = mask.visible_rows();
        let masked = mask.masked_rows();
        if tape.shape(visible_encodings)[0] != visible.len() {
            return Err(Error::ShapeMismatch {
                op: "decode_and_reconstruct",
                lhs: tape.shape(visible_encodings).to_vec(),
                rhs: vec![visible.len()],
            });
        }
        let d = cfg.dim;
        let m = masked.len();

        let mask_vec = bind.var(tape, store, self.mask_emb)?;
        let mask_row = tape.reshape(mask_vec, vec![1, d])?;
        let mask_block = tape.gather_rows(mask_row, &vec![0; m])?;
        let spa = bind.var(tape, store, self.spatial)?;
        let temp = bind.var(tape, store, self.temporal)?;
        let masked_leads: Vec<usize> = masked.iter().map(|r| r / cfg.patch_count).collect();
        let masked_patches: Vec<usize> = masked.iter().map(|r| r % cfg.patch_count).collect();
        let spa_rows = tape.gather_rows(spa, &masked_leads)?;
        let temp_rows = tape.gather_rows(temp, &masked_patches)?;
        let mask_block = tape.add(mask_block, spa_rows)?;
        let mask_block = tape.add(mask_block, temp_rows)?;

        // reorder [visible; masked] back into canonical sequence order
        let total = visible.len() + m;
        let mut slot_of_row = vec![0usize; total];
        for (rank, &row) in visible.iter().enumerate() {
            slot_of_row[row] = rank;
        }
        for (rank, &row) in masked.iter().enumerate() {
            slot_of_row[row] = visible.len() + rank;
        }
        let stacked = tape.concat_rows(&[visible_encodings, mask_block])?;
        let mut x = tape.gather_rows(stacked, &slot_of_row)?;
        for block in &self.decoder {
            x = block.apply(tape, bind, store, x, false)?;
        }
        let masked_out = tape.gather_rows(x, &masked)?;
        self.recon_head.apply(tape, bind, store, masked_out)
    }

    /// Per-sample reconstruction loss: mean over the masked set of squared
    /// L2 patch errors (no division by patch length).
    pub fn sample_rec_loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        predictions: Var,
        grid: &PatchGrid<F>,
        mask: &MaskSet,
    ) -> Result<Var> {
        let masked = mask.masked_rows();
        let p = self.cfg.patch_len;
        if tape.shape(predictions) != [masked.len(), p] {
            return Err(Error::ShapeMismatch {
                op: "sample_rec_loss",
                lhs: tape.shape(predictions).to_vec(),
                rhs: vec![masked.len(), p],
            });
        }
        let mut target = Vec::with_capacity(masked.len() * p);
        for &row in &masked {
            target.extend_from_slice(&grid.data()[row * p..(row + 1) * p]);
        }
        let target = tape.constant(vec![masked.len(), p], target)?;
        let total = tape.sq_dist(predictions, target)?;
        Ok(tape.scale(total, F::one() / F::cast(masked.len() as f64)))
    }

    /// Pooled signal representation: mean over all encoder outputs of a
    /// mask-free forward pass. Returns `[dim]`.
    pub fn pooled<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        tokens: Var,
    ) -> Result<Var> {
        let mut x = tokens;
        for block in &self.encoder {
            x = block.apply(tape, bind, store, x, false)?;
        }
        tape.mean_rows(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecg::tokenizer::{patchify, select_mask};
    use crate::rng::rng_from;

    fn tiny_cfg(enc_layers: usize) -> EcgConfig {
        EcgConfig {
            leads: 2,
            patch_count: 4,
            patch_len: 6,
            dim: 8,
            ff_dim: 16,
            heads: 2,
            enc_layers,
            dec_layers: 1,
            gn_groups: 2,
        }
    }

    fn tiny_model(enc_layers: usize, seed: u64) -> (ParamStore<f64>, EcgModel) {
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed);
        let model = EcgModel::init(&mut store, &mut rng, tiny_cfg(enc_layers)).unwrap();
        (store, model)
    }

    fn tiny_signal(seed: u64) -> Tensor<f64> {
        Tensor::randn(vec![2, 24], 1.0, &mut rng_from(seed))
    }

    fn zero_tokenizer(store: &mut ParamStore<f64>) {
        for name in [
            "ecg.tok.conv1.w",
            "ecg.tok.conv1.b",
            "ecg.tok.conv2.w",
            "ecg.tok.conv2.b",
            "ecg.tok.gn2.gamma",
            "ecg.tok.gn2.beta",
        ] {
            let id = (0..store.len())
                .map(crate::nn::ParamId)
                .find(|&id| store.name(id) == name)
                .unwrap();
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zeroed_tokenizer_reduces_tokens_to_embedding_sums() {
        let (mut store, model) = tiny_model(1, 3);
        zero_tokenizer(&mut store);
        let grid = patchify(&tiny_signal(5), 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let spa = store.get(model.spatial).data();
        let temp = store.get(model.temporal).data();
        let d = 8;
        for row in 0..8 {
            let (lead, patch) = (row / 4, row % 4);
            for j in 0..d {
                let expected = spa[lead * d + j] + temp[patch * d + j];
                let got = tape.value(tokens)[row * d + j];
                assert!((got - expected).abs() < 1e-12, "row {row} dim {j}");
            }
        }
    }

    #[test]
    fn same_patch_content_isolates_embedding_differences() {
        let (mut store, model) = tiny_model(1, 4);
        zero_tokenizer(&mut store);
        // identical signal in both leads: token difference across leads is
        // exactly spatial[l1] - spatial[l2]; across patches of one lead it is
        // temporal[p1] - temporal[p2]
        let row: Vec<f64> = (0..24).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let sig = Tensor::new(vec![2, 24], data).unwrap();
        let grid = patchify(&sig, 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let spa = store.get(model.spatial).data();
        let temp = store.get(model.temporal).data();
        let d = 8;
        let tok = tape.value(tokens);
        for j in 0..d {
            let across_leads = tok[j] - tok[4 * d + j]; // (lead0, patch0) vs (lead1, patch0)
            assert!((across_leads - (spa[j] - spa[d + j])).abs() < 1e-12);
        }
        // first lead's two patches share content only if the patch signal
        // repeats; build that case explicitly
        let rep: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&rep);
        }
        data.extend(std::iter::repeat(0.0).take(24));
        let sig = Tensor::new(vec![2, 24], data).unwrap();
        let grid = patchify(&sig, 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let tok = tape.value(tokens);
        for j in 0..d {
            let across_patches = tok[j] - tok[d + j]; // (lead0, patch0) vs (lead0, patch1)
            assert!((across_patches - (temp[j] - temp[d + j])).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_leads_and_spatial_table_permutes_tokens() {
        let (store, model) = tiny_model(1, 6);
        let sig = tiny_signal(7);
        let grid = patchify(&sig, 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let base = tape.value(tokens).to_vec();

        // swap the two leads in both the signal and the spatial table
        let mut swapped = ParamStore::new();
        let mut rng = rng_from(6);
        let model2 = EcgModel::init(&mut swapped, &mut rng, tiny_cfg(1)).unwrap();
        let spa = swapped.get_mut(model2.spatial);
        let d = 8;
        let row0: Vec<f64> = spa.data()[..d].to_vec();
        let row1: Vec<f64> = spa.data()[d..].to_vec();
        spa.data_mut()[..d].copy_from_slice(&row1);
        spa.data_mut()[d..].copy_from_slice(&row0);
        let mut sdata = sig.data()[24..].to_vec();
        sdata.extend_from_slice(&sig.data()[..24]);
        let sig2 = Tensor::new(vec![2, 24], sdata).unwrap();
        let grid2 = patchify(&sig2, 4).unwrap();
        let mut tape2 = Tape::new();
        let mut bind2 = TapeBind::new(&swapped);
        let tokens2 = model2
            .tokens(&mut tape2, &mut bind2, &swapped, &grid2)
            .unwrap();
        let perm = tape2.value(tokens2);
        // lead 0 of the permuted run equals lead 1 of the base run
        for j in 0..4 * d {
            assert!((perm[j] - base[4 * d + j]).abs() < 1e-12);
            assert!((perm[4 * d + j] - base[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn visible_count_shrinks_with_ratio() {
        let (store, model) = tiny_model(1, 8);
        let grid = patchify(&tiny_signal(9), 4).unwrap();
        // r = 0.75 on 4 patches: 3 masked per lead, 1 visible per lead
        let mask = select_mask(2, 4, 0.75, 1).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let enc = model
            .encode_visible(&mut tape, &mut bind, &store, tokens, &mask)
            .unwrap();
        assert_eq!(tape.shape(enc)[0], 2); // one visible patch per lead
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let (store, model) = tiny_model(0, 10);
        let grid = patchify(&tiny_signal(11), 4).unwrap();
        let mask = select_mask(2, 4, 0.5, 2).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let enc = model
            .encode_visible(&mut tape, &mut bind, &store, tokens, &mask)
            .unwrap();
        let visible = mask.visible_rows();
        for (rank, &row) in visible.iter().enumerate() {
            for j in 0..8 {
                assert_eq!(
                    tape.value(enc)[rank * 8 + j],
                    tape.value(tokens)[row * 8 + j]
                );
            }
        }
    }

    #[test]
    fn reconstruction_output_counts_masked_patches() {
        let (store, model) = tiny_model(1, 12);
        let grid = patchify(&tiny_signal(13), 4).unwrap();
        let mask = select_mask(2, 4, 0.5, 3).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let enc = model
            .encode_visible(&mut tape, &mut bind, &store, tokens, &mask)
            .unwrap();
        let preds = model
            .decode_and_reconstruct(&mut tape, &mut bind, &store, enc, &mask)
            .unwrap();
        assert_eq!(tape.shape(preds), &[mask.len(), 6]);
    }

    #[test]
    fn zero_weight_head_predicts_zero_patches() {
        let (mut store, model) = tiny_model(1, 14);
        for name in ["ecg.recon.w", "ecg.recon.b"] {
            let id = (0..store.len())
                .map(crate::nn::ParamId)
                .find(|&id| store.name(id) == name)
                .unwrap();
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let grid = patchify(&tiny_signal(15), 4).unwrap();
        let mask = select_mask(2, 4, 0.5, 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let enc = model
            .encode_visible(&mut tape, &mut bind, &store, tokens, &mask)
            .unwrap();
        let preds = model
            .decode_and_reconstruct(&mut tape, &mut bind, &store, enc, &mask)
            .unwrap();
        assert!(tape.value(preds).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rec_loss_matches_scalar_oracle() {
        // two samples with 2 and 3 masked patches; oracle is a plain loop
        let (store, model) = tiny_model(1, 16);
        let mut batch_losses = Vec::new();
        let mut oracle_losses = Vec::new();
        for (seed, ratio) in [(20u64, 0.5), (21, 0.75)] {
            let sig = tiny_signal(seed);
            let grid = patchify(&sig, 4).unwrap();
            let mask = select_mask(2, 4, ratio, seed).unwrap();
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&store);
            let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
            let enc = model
                .encode_visible(&mut tape, &mut bind, &store, tokens, &mask)
                .unwrap();
            let preds = model
                .decode_and_reconstruct(&mut tape, &mut bind, &store, enc, &mask)
                .unwrap();
            let loss = model
                .sample_rec_loss(&mut tape, preds, &grid, &mask)
                .unwrap();
            batch_losses.push(tape.item(loss));

            let mut acc = 0.0;
            for (rank, &row) in mask.masked_rows().iter().enumerate() {
                for j in 0..6 {
                    let diff =
                        tape.value(preds)[rank * 6 + j] - grid.data()[row * 6 + j];
                    acc += diff * diff;
                }
            }
            oracle_losses.push(acc / mask.len() as f64);
        }
        let batch_mean = batch_losses.iter().sum::<f64>() / 2.0;
        let oracle_mean = oracle_losses.iter().sum::<f64>() / 2.0;
        assert!((batch_mean - oracle_mean).abs() < 1e-10);
    }

    #[test]
    fn identical_predictions_give_zero_loss() {
        let (_store, model) = tiny_model(0, 17);
        let grid = patchify(&tiny_signal(18), 4).unwrap();
        let mask = select_mask(2, 4, 0.5, 5).unwrap();
        let mut tape = Tape::<f64>::new();
        let masked = mask.masked_rows();
        let mut target = Vec::new();
        for &row in &masked {
            target.extend_from_slice(&grid.data()[row * 6..(row + 1) * 6]);
        }
        let preds = tape.constant(vec![masked.len(), 6], target).unwrap();
        let loss = model
            .sample_rec_loss(&mut tape, preds, &grid, &mask)
            .unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn single_masked_patch_squared_error() {
        // pred [1,2] vs target [1,1] -> ||[0,1]||^2 = 1
        let cfg = EcgConfig {
            leads: 1,
            patch_count: 2,
            patch_len: 2,
            dim: 8,
            ff_dim: 8,
            heads: 2,
            enc_layers: 0,
            dec_layers: 0,
            gn_groups: 2,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from(1);
        let model = EcgModel::init(&mut store, &mut rng, cfg).unwrap();
        let sig = Tensor::new(vec![1, 4], vec![9.0, 9.0, 1.0, 1.0]).unwrap();
        let grid = patchify(&sig, 2).unwrap();
        // pick any seed whose single masked patch is the second one
        let mask = (0..64)
            .map(|s| select_mask(1, 2, 0.5, s).unwrap())
            .find(|m| m.is_masked(0, 1))
            .unwrap();
        let mut tape = Tape::<f64>::new();
        let preds = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let loss = model
            .sample_rec_loss(&mut tape, preds, &grid, &mask)
            .unwrap();
        assert!((tape.item(loss) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_is_mean_of_token_grid_for_zero_layer_encoder() {
        let (mut store, model) = tiny_model(0, 19);
        zero_tokenizer(&mut store);
        let grid = patchify(&tiny_signal(20), 4).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let tokens = model.tokens(&mut tape, &mut bind, &store, &grid).unwrap();
        let pooled = model.pooled(&mut tape, &mut bind, &store, tokens).unwrap();
        // scalar oracle: mean over the 8 rows of spa + temp sums
        let tok = tape.value(tokens).to_vec();
        for j in 0..8 {
            let mean = (0..8).map(|r| tok[r * 8 + j]).sum::<f64>() / 8.0;
            assert!((tape.value(pooled)[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn rec_loss_gradient_passes_grad_check_on_tiny_model() {
        let (mut store, model) = tiny_model(1, 22);
        crate::verify::randomize_store(&mut store, 0.3, 220);
        let sig = tiny_signal(23);
        let grid = patchify(&sig, 4).unwrap();
        let mask = select_mask(2, 4, 0.5, 6).unwrap();
        // numeric-vs-analytic over every parameter via the store path
        let report = crate::verify::store_grad_check(
            store,
            1e-6,
            1e-4,
            Some(64),
            77,
            |tape, bind, store| {
                let tokens = model.tokens(tape, bind, store, &grid)?;
                let enc = model.encode_visible(tape, bind, store, tokens, &mask)?;
                let preds = model.decode_and_reconstruct(tape, bind, store, enc, &mask)?;
                let loss = model.sample_rec_loss(tape, preds, &grid, &mask)?;
                Ok(tape.scale(loss, 1e-4))
            },
        )
        .unwrap();
        assert!(
            report.pass(),
            "rel err {} at param {} coord {} (analytic {} numeric {})",
            report.max_rel_err,
            store2_name(report.worst.0),
            report.worst.1,
            report.analytic,
            report.numeric
        );
    }

    fn store2_name(idx: usize) -> String {
        let (store, _) = tiny_model(1, 22);
        store.name(crate::nn::ParamId(idx)).to_string()
    }
}
