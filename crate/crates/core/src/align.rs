//! Cross-modal alignment losses over shared embeddings: the pairwise
//! sigmoid loss, symmetric InfoNCE (standard and literal readings), and the
//! overall weighted objective.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::{Error, Result};

/// Which reading of the symmetric InfoNCE combination to use.
///
/// `Standard` is the conventional form: per anchor i, cross-entropy of the
/// row softmax (denominator over all k, including k = i) against target i,
/// averaged over both directions. `Literal` reproduces the printed double
/// sum with the positive term excluded from the denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InfoNceMode {
    #[default]
    Standard,
    Literal,
}

/// Weights of the overall objective
/// `L = L_cons + w.e_rec * L_e_rec + w.t_rec * L_t_rec + w.orth * L_orth + w.siglip * L_siglip`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub e_rec: f64,
    pub t_rec: f64,
    pub orth: f64,
    pub siglip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            e_rec: 1.0,
            t_rec: 1.0,
            orth: 1.0,
            siglip: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("e_rec", self.e_rec),
            ("t_rec", self.t_rec),
            ("orth", self.orth),
            ("siglip", self.siglip),
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::invalid(format!(
                    "loss weight {name} = {w} must be nonnegative"
                )));
            }
        }
        Ok(())
    }
}

fn batch_of<F: Scalar>(tape: &Tape<F>, op: &'static str, e: Var, t: Var) -> Result<usize> {
    let (esh, tsh) = (tape.shape(e), tape.shape(t));
    if esh.len() != 2 || esh != tsh {
        return Err(Error::ShapeMismatch {
            op,
            lhs: esh.to_vec(),
            rhs: tsh.to_vec(),
        });
    }
    Ok(esh[0])
}

/// Pairwise sigmoid loss over all batch pairs with +1 on the diagonal and
/// -1 elsewhere:
/// `-(1/B) sum_ij log sigmoid(y_ij * <e_i, t_j>)`.
///
/// Inputs are expected L2-normalized by the caller; the loss itself applies
/// no normalization (tests exercise raw embeddings deliberately).
pub fn loss_siglip<F: Scalar>(tape: &mut Tape<F>, ecg: Var, text: Var) -> Result<Var> {
    let b = batch_of(tape, "loss_siglip", ecg, text)?;
    let text_t = tape.transpose(text)?;
    let sims = tape.matmul(ecg, text_t)?;
    let mut labels = vec![-F::one(); b * b];
    for i in 0..b {
        labels[i * b + i] = F::one();
    }
    let y = tape.constant(vec![b, b], labels)?;
    let signed = tape.mul(sims, y)?;
    let log_probs = tape.log_sigmoid(signed)?;
    let total = tape.sum_all(log_probs);
    Ok(tape.scale(total, -F::one() / F::cast(b as f64)))
}

/// Symmetric InfoNCE over a batch of paired shared embeddings.
///
/// Batch size 1 returns a constant 0 (single-candidate convention) with a
/// warning so reconstruction-only smoke runs proceed.
pub fn loss_infonce<F: Scalar>(
    tape: &mut Tape<F>,
    ecg: Var,
    text: Var,
    temperature: f64,
    mode: InfoNceMode,
) -> Result<Var> {
    let b = batch_of(tape, "loss_infonce", ecg, text)?;
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if b == 1 {
        eprintln!("warning: contrastive InfoNCE defined as 0 for batch size 1");
        return Ok(tape.scalar(F::zero()));
    }
    let text_t = tape.transpose(text)?;
    let sims = tape.matmul(ecg, text_t)?;
    if tape.value(sims).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "loss_infonce",
        });
    }
    match mode {
        InfoNceMode::Standard => {
            let scaled = tape.scale(sims, F::cast(1.0 / temperature));
            let targets: Vec<usize> = (0..b).collect();
            let e2t = tape.softmax_xent(scaled, &targets)?;
            let scaled_t = tape.transpose(scaled)?;
            let t2e = tape.softmax_xent(scaled_t, &targets)?;
            let se = tape.sum_all(e2t);
            let st = tape.sum_all(t2e);
            let total = tape.add(se, st)?;
            Ok(tape.scale(total, F::cast(1.0 / (2.0 * b as f64))))
        }
        InfoNceMode::Literal => tape.infonce_literal(sims, F::cast(temperature)),
    }
}

/// Overall objective: `cons + w.e_rec * e_rec + w.t_rec * t_rec +
/// w.orth * orth + w.siglip * siglip`. Negative weights are rejected.
pub fn loss_full<F: Scalar>(
    tape: &mut Tape<F>,
    cons: Var,
    e_rec: Var,
    t_rec: Var,
    orth: Var,
    siglip: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut acc = cons;
    for (w, term) in [
        (weights.e_rec, e_rec),
        (weights.t_rec, t_rec),
        (weights.orth, orth),
        (weights.siglip, siglip),
    ] {
        let scaled = tape.scale(term, F::cast(w));
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::rng_from;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn pair_on_tape(
        tape: &mut Tape<f64>,
        e: Vec<f64>,
        t: Vec<f64>,
        b: usize,
        d: usize,
    ) -> (Var, Var) {
        let e = tape.constant(vec![b, d], e).unwrap();
        let t = tape.constant(vec![b, d], t).unwrap();
        (e, t)
    }

    #[test]
    fn siglip_all_zero_embeddings() {
        // sigma(0) = 1/2 on all four pairs: -(1/2) * 4 * ln(1/2) = 2 ln 2
        let mut tape = Tape::new();
        let (e, t) = pair_on_tape(&mut tape, vec![0.0; 4], vec![0.0; 4], 2, 2);
        let loss = loss_siglip(&mut tape, e, t).unwrap();
        assert!((tape.item(loss) - 2.0 * (2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn siglip_single_orthogonal_pair() {
        let mut tape = Tape::new();
        let (e, t) = pair_on_tape(&mut tape, vec![1.0, 0.0], vec![0.0, 1.0], 1, 2);
        let loss = loss_siglip(&mut tape, e, t).unwrap();
        assert!((tape.item(loss) - (2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn siglip_matches_double_loop_oracle() {
        let mut rng = rng_from(21);
        let b = 3;
        let d = 4;
        let norm_rows = |t: &mut Tensor<f64>| {
            for row in t.data_mut().chunks_mut(d) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
        };
        let mut e = Tensor::randn(vec![b, d], 1.0, &mut rng);
        let mut t = Tensor::randn(vec![b, d], 1.0, &mut rng);
        norm_rows(&mut e);
        norm_rows(&mut t);
        let mut tape = Tape::new();
        let (ev, tv) = pair_on_tape(&mut tape, e.data().to_vec(), t.data().to_vec(), b, d);
        let loss = loss_siglip(&mut tape, ev, tv).unwrap();

        let mut oracle = 0.0;
        for i in 0..b {
            for j in 0..b {
                let dot: f64 = (0..d)
                    .map(|k| e.data()[i * d + k] * t.data()[j * d + k])
                    .sum();
                let y = if i == j { 1.0 } else { -1.0 };
                oracle -= (1.0 / (1.0 + (-y * dot).exp())).ln();
            }
        }
        oracle /= b as f64;
        assert!((tape.item(loss) - oracle).abs() < 1e-8);
    }

    #[test]
    fn infonce_uniform_similarities_give_ln_b() {
        let mut tape = Tape::new();
        let (e, t) = pair_on_tape(&mut tape, vec![0.5; 4], vec![0.5; 4], 2, 2);
        let loss = loss_infonce(&mut tape, e, t, 0.07, InfoNceMode::Standard).unwrap();
        assert!((tape.item(loss) - (2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_saturated_diagonal_vanishes() {
        // realizes s_ii = 1, s_ij = -1 with antipodal unit embeddings
        let mut tape = Tape::new();
        let e = vec![1.0, 0.0, -1.0, 0.0];
        let t = vec![1.0, 0.0, -1.0, 0.0];
        let (ev, tv) = pair_on_tape(&mut tape, e, t, 2, 2);
        let loss = loss_infonce(&mut tape, ev, tv, 0.07, InfoNceMode::Standard).unwrap();
        assert!(tape.item(loss) < 1e-8, "loss {}", tape.item(loss));
    }

    #[test]
    fn infonce_literal_matches_printed_formula_oracle() {
        let tau = 0.07;
        let s = [0.9, 0.1, 0.2, 0.8];
        let mut tape = Tape::new();
        let sims = tape.constant(vec![2, 2], s.to_vec()).unwrap();
        let loss = tape.infonce_literal(sims, tau).unwrap();

        // scalar double-loop oracle of the printed equations
        let b = 2;
        let mut oracle = 0.0;
        for direction in 0..2 {
            for i in 0..b {
                let at = |r: usize, c: usize| -> f64 {
                    if direction == 0 {
                        s[r * b + c]
                    } else {
                        s[c * b + r]
                    }
                };
                let denom: f64 = (0..b)
                    .filter(|&k| k != i)
                    .map(|k| (at(i, k) / tau).exp())
                    .sum();
                for j in 0..b {
                    oracle += -((at(i, j) / tau).exp() / denom).ln();
                }
            }
        }
        oracle /= 2.0 * b as f64;
        assert!(
            (tape.item(loss) - oracle).abs() < 1e-8,
            "loss {} oracle {oracle}",
            tape.item(loss)
        );
    }

    #[test]
    fn transposed_direction_is_exactly_the_transpose() {
        let mut rng = rng_from(31);
        let b = 4;
        let d = 3;
        let e = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
        let t = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (ev, tv) = pair_on_tape(&mut tape, e.data().to_vec(), t.data().to_vec(), b, d);
        let tt = tape.transpose(tv).unwrap();
        let s_e2t = tape.matmul(ev, tt).unwrap();
        let et = tape.transpose(ev).unwrap();
        let s_t2e = tape.matmul(tv, et).unwrap();
        let s_e2t_t = tape.transpose(s_e2t).unwrap();
        for (a, b) in tape.value(s_t2e).iter().zip(tape.value(s_e2t_t)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn standard_mode_direction_symmetry_within_tolerance() {
        // computing L_cons with the arguments swapped agrees to 1e-12
        let mut rng = rng_from(32);
        let b = 5;
        let d = 4;
        let e = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
        let t = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (ev, tv) = pair_on_tape(&mut tape, e.data().to_vec(), t.data().to_vec(), b, d);
        let a = loss_infonce(&mut tape, ev, tv, 0.1, InfoNceMode::Standard).unwrap();
        let b_ = loss_infonce(&mut tape, tv, ev, 0.1, InfoNceMode::Standard).unwrap();
        assert!((tape.item(a) - tape.item(b_)).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_returns_zero_by_convention() {
        let mut tape = Tape::new();
        let (e, t) = pair_on_tape(&mut tape, vec![1.0, 0.0], vec![0.0, 1.0], 1, 2);
        let loss = loss_infonce(&mut tape, e, t, 0.07, InfoNceMode::Standard).unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn temperature_monotonicity_with_dominant_diagonal() {
        let e = vec![1.0, 0.0, 0.0, 1.0];
        let t = vec![0.9, 0.1, 0.1, 0.9];
        let mut last = f64::INFINITY;
        for tau in [0.5, 0.2, 0.1, 0.05] {
            let mut tape = Tape::new();
            let (ev, tv) = pair_on_tape(&mut tape, e.clone(), t.clone(), 2, 2);
            let loss = loss_infonce(&mut tape, ev, tv, tau, InfoNceMode::Standard).unwrap();
            let v = tape.item(loss);
            assert!(v < last, "tau {tau} loss {v} not below {last}");
            last = v;
        }
    }

    #[test]
    fn standard_mode_invariant_to_joint_positive_rescaling() {
        // normalization precedes similarity, so scaling raw embeddings by
        // positive constants leaves the loss unchanged
        let mut rng = rng_from(33);
        let b = 3;
        let d = 4;
        let e = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
        let t = Tensor::<f64>::randn(vec![b, d], 1.0, &mut rng);
        let run = |scale_e: f64, scale_t: f64| {
            let mut tape = Tape::new();
            let ev = tape
                .constant(vec![b, d], e.data().iter().map(|v| v * scale_e).collect())
                .unwrap();
            let tv = tape
                .constant(vec![b, d], t.data().iter().map(|v| v * scale_t).collect())
                .unwrap();
            let en = tape.l2_normalize_rows(ev).unwrap();
            let tn = tape.l2_normalize_rows(tv).unwrap();
            let loss = loss_infonce(&mut tape, en, tn, 0.07, InfoNceMode::Standard).unwrap();
            tape.item(loss)
        };
        let reference = run(1.0, 1.0);
        let mut rng2 = rng_from(34);
        for _ in 0..5 {
            let a: f64 = rng2.gen_range(0.2..5.0);
            let b_: f64 = rng2.gen_range(0.2..5.0);
            assert!((run(a, b_) - reference).abs() < 1e-9);
        }
    }

    #[test]
    fn full_objective_reduces_to_cons_with_zero_weights() {
        let mut tape = Tape::new();
        let cons = tape.scalar(0.37);
        let zero = tape.scalar(5.0);
        let w = LossWeights {
            e_rec: 0.0,
            t_rec: 0.0,
            orth: 0.0,
            siglip: 0.0,
        };
        let full = loss_full(&mut tape, cons, zero, zero, zero, zero, &w).unwrap();
        assert_eq!(tape.item(full), 0.37);
    }

    #[test]
    fn full_objective_weighted_sum_example() {
        // components (cons, e_rec, t_rec, orth, siglip) = (.5, .2, .3, .1, .4),
        // all weights 1 -> 1.5
        let mut tape = Tape::<f64>::new();
        let parts: Vec<Var> = [0.5, 0.2, 0.3, 0.1, 0.4]
            .iter()
            .map(|&v| tape.scalar(v))
            .collect();
        let full = loss_full(
            &mut tape,
            parts[0],
            parts[1],
            parts[2],
            parts[3],
            parts[4],
            &LossWeights::default(),
        )
        .unwrap();
        assert!((tape.item(full) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn full_objective_matches_weighted_sum_oracle() {
        let mut rng = rng_from(34);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..2.0)).collect();
            let w = LossWeights {
                e_rec: rng.gen_range(0.0..2.0),
                t_rec: rng.gen_range(0.0..2.0),
                orth: rng.gen_range(0.0..2.0),
                siglip: rng.gen_range(0.0..2.0),
            };
            let mut tape = Tape::new();
            let parts: Vec<Var> = vals.iter().map(|&v| tape.scalar(v)).collect();
            let full = loss_full(
                &mut tape,
                parts[0],
                parts[1],
                parts[2],
                parts[3],
                parts[4],
                &w,
            )
            .unwrap();
            let oracle = vals[0]
                + w.e_rec * vals[1]
                + w.t_rec * vals[2]
                + w.orth * vals[3]
                + w.siglip * vals[4];
            assert!((tape.item(full) - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let mut tape = Tape::<f64>::new();
        let s = tape.scalar(1.0);
        let w = LossWeights {
            e_rec: -0.1,
            ..Default::default()
        };
        assert!(loss_full(&mut tape, s, s, s, s, s, &w).is_err());
    }

    #[test]
    fn batch_size_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let t = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(loss_siglip(&mut tape, e, t).is_err());
    }

    #[test]
    fn siglip_gradient_passes_and_decreases_under_optimization() {
        let mut rng = rng_from(35);
        let b = 3;
        let d = 4;
        let e = Tensor::randn(vec![b, d], 0.5, &mut rng);
        let t = Tensor::randn(vec![b, d], 0.5, &mut rng);
        let report = grad_check(&[e.clone(), t.clone()], 1e-6, 1e-4, |tape, vars| {
            let en = tape.l2_normalize_rows(vars[0])?;
            let tn = tape.l2_normalize_rows(vars[1])?;
            let loss = loss_siglip(tape, en, tn)?;
            Ok(tape.scale(loss, 1e-3))
        })
        .unwrap();
        assert!(report.pass(), "rel err {}", report.max_rel_err);

        // gradient descent directly on the embeddings decreases the loss
        // monotonically over 100 steps
        let mut e = e;
        let mut t = t;
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let mut ev = e.clone();
            ev.requires_grad = true;
            let mut tv = t.clone();
            tv.requires_grad = true;
            let ev = tape.leaf(&ev).unwrap();
            let tv = tape.leaf(&tv).unwrap();
            let en = tape.l2_normalize_rows(ev).unwrap();
            let tn = tape.l2_normalize_rows(tv).unwrap();
            let loss = loss_siglip(&mut tape, en, tn).unwrap();
            let value = tape.item(loss);
            assert!(value < last, "loss {value} did not decrease from {last}");
            last = value;
            let grads = tape.backward(loss).unwrap();
            let lr = 0.1;
            for (p, g) in e.data_mut().iter_mut().zip(grads.wrt(ev).unwrap()) {
                *p -= lr * g;
            }
            for (p, g) in t.data_mut().iter_mut().zip(grads.wrt(tv).unwrap()) {
                *p -= lr * g;
            }
        }
    }

    #[test]
    fn infonce_gradients_pass_both_modes() {
        let mut rng = rng_from(36);
        let b = 3;
        let d = 4;
        let e = Tensor::randn(vec![b, d], 0.5, &mut rng);
        let t = Tensor::randn(vec![b, d], 0.5, &mut rng);
        for mode in [InfoNceMode::Standard, InfoNceMode::Literal] {
            let report = grad_check(&[e.clone(), t.clone()], 1e-6, 1e-4, |tape, vars| {
                let en = tape.l2_normalize_rows(vars[0])?;
                let tn = tape.l2_normalize_rows(vars[1])?;
                let loss = loss_infonce(tape, en, tn, 0.2, mode)?;
                Ok(tape.scale(loss, 1e-3))
            })
            .unwrap();
            assert!(report.pass(), "{mode:?} rel err {}", report.max_rel_err);
        }
    }
}
