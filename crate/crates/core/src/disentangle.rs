//! Modality-specific / modality-shared projection heads and the squared
//! cosine orthogonality penalty between them.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Linear, ParamStore, TapeBind};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Ecg,
    Text,
}

/// Two-layer projection: `d -> d -> d_proj` with GELU between.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    l1: Linear,
    l2: Linear,
}

impl ProjectionHead {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        d_proj: usize,
    ) -> Result<Self> {
        Ok(ProjectionHead {
            l1: Linear::init(store, rng, &format!("{name}.l1"), d, d)?,
            l2: Linear::init(store, rng, &format!("{name}.l2"), d, d_proj)?,
        })
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let h = self.l1.apply(tape, bind, store, x)?;
        let h = tape.gelu(h)?;
        self.l2.apply(tape, bind, store, h)
    }
}

/// Four independent heads: {specific, shared} x {ecg, text}. No parameter
/// sharing across them.
pub struct HeadSet {
    pub ecg_specific: ProjectionHead,
    pub ecg_shared: ProjectionHead,
    pub text_specific: ProjectionHead,
    pub text_shared: ProjectionHead,
    pub d_in: usize,
    pub d_proj: usize,
}

impl HeadSet {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        d: usize,
        d_proj: usize,
    ) -> Result<Self> {
        Ok(HeadSet {
            ecg_specific: ProjectionHead::init(store, rng, "heads.ecg_sp", d, d_proj)?,
            ecg_shared: ProjectionHead::init(store, rng, "heads.ecg_sh", d, d_proj)?,
            text_specific: ProjectionHead::init(store, rng, "heads.text_sp", d, d_proj)?,
            text_shared: ProjectionHead::init(store, rng, "heads.text_sh", d, d_proj)?,
            d_in: d,
            d_proj,
        })
    }

    pub fn param_count(d: usize, d_proj: usize) -> usize {
        4 * (d * d + d + d * d_proj + d_proj)
    }

    /// Projects pooled representations `[batch, d]` into the (specific,
    /// shared) pair, each `[batch, d_proj]`.
    pub fn project<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBind,
        store: &ParamStore<F>,
        pooled: Var,
        modality: Modality,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(pooled);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "project",
                lhs: shape.to_vec(),
                rhs: vec![self.d_in],
            });
        }
        let (sp_head, sh_head) = match modality {
            Modality::Ecg => (&self.ecg_specific, &self.ecg_shared),
            Modality::Text => (&self.text_specific, &self.text_shared),
        };
        let sp = sp_head.apply(tape, bind, store, pooled)?;
        let sh = sh_head.apply(tape, bind, store, pooled)?;
        Ok((sp, sh))
    }
}

/// Orthogonality penalty: batch mean of the squared cosine similarity
/// between specific and shared vectors, summed over both modalities.
/// Always lies in [0, 2]. Rows with norm below 1e-8 contribute 0.
pub fn loss_orth<F: Scalar>(
    tape: &mut Tape<F>,
    ecg_specific: Var,
    ecg_shared: Var,
    text_specific: Var,
    text_shared: Var,
) -> Result<Var> {
    let b = tape.shape(ecg_specific)[0];
    for (name, v) in [
        ("ecg_shared", ecg_shared),
        ("text_specific", text_specific),
        ("text_shared", text_shared),
    ] {
        if tape.shape(v)[0] != b {
            return Err(Error::invalid(format!(
                "loss_orth: batch size mismatch for {name}"
            )));
        }
    }
    let mut per_sample = Vec::with_capacity(b);
    for i in 0..b {
        let sp_e = tape.slice_rows(ecg_specific, i, 1)?;
        let sh_e = tape.slice_rows(ecg_shared, i, 1)?;
        let sp_t = tape.slice_rows(text_specific, i, 1)?;
        let sh_t = tape.slice_rows(text_shared, i, 1)?;
        let cos_t = tape.cosine_sim(sp_t, sh_t)?;
        let cos_e = tape.cosine_sim(sp_e, sh_e)?;
        let sq_t = tape.mul(cos_t, cos_t)?;
        let sq_e = tape.mul(cos_e, cos_e)?;
        per_sample.push(tape.add(sq_t, sq_e)?);
    }
    let stacked = tape.concat_rows(&per_sample)?;
    Ok(tape.mean_all(stacked))
}
