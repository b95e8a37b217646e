//! Verification suites: gradient checks over every primitive and loss, and
//! the analytic-oracle table. Shared by `cargo test` and the `gradcheck` /
//! `losscheck` CLI commands.

use rand::Rng;

use crate::gradcheck::{grad_check, GradCheckReport};
use crate::nn::{ParamStore, TapeBind};
use crate::rng::rng_from;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

/// One verification line: a named check with its outcome.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckLine {
    pub(crate) fn from_report(name: &str, report: &GradCheckReport) -> Self {
        CheckLine {
            name: name.to_string(),
            pass: report.pass(),
            detail: format!(
                "max rel err {:.3e} (tol {:.0e}) at leaf {} coord {}",
                report.max_rel_err, report.tol, report.worst.0, report.worst.1
            ),
        }
    }

    pub(crate) fn value(name: &str, pass: bool, detail: String) -> Self {
        CheckLine {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

/// Central-difference check of a loss defined over a parameter store.
///
/// Analytic gradients come from one backward pass; numeric gradients perturb
/// individual parameter coordinates and re-evaluate the loss. When
/// `max_coords_per_param` is set, a random subsample of coordinates is
/// checked per parameter.
pub fn store_grad_check<B>(
    mut store: ParamStore<f64>,
    h: f64,
    tol: f64,
    max_coords_per_param: Option<usize>,
    sample_seed: u64,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &mut TapeBind, &ParamStore<f64>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&store);
        let root = build(&mut tape, &mut bind, &store)?;
        let grads = tape.backward(root)?;
        bind.grad_table(&grads)
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(store);
        let root = build(&mut tape, &mut bind, store)?;
        Ok(tape.item(root))
    };
    let mut rng = rng_from(sample_seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        tol,
    };
    for pi in 0..store.len() {
        let id = crate::nn::ParamId(pi);
        let numel = store.get(id).numel();
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if numel > k => {
                let mut picks: Vec<usize> = (0..k).map(|_| rng.gen_range(0..numel)).collect();
                picks.sort_unstable();
                picks.dedup();
                picks
            }
            _ => (0..numel).collect(),
        };
        for ci in coords {
            let orig = store.get(id).data()[ci];
            store.get_mut(id).data_mut()[ci] = orig + h;
            let fp = eval(&store)?;
            store.get_mut(id).data_mut()[ci] = orig - h;
            let fm = eval(&store)?;
            store.get_mut(id).data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].as_ref().map(|g| g[ci]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn randn(shape: Vec<usize>, seed: u64, std: f64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut rng_from(seed))
}

/// Redraws every parameter from N(0, std^2). Gradient checks need healthy
/// gradient magnitudes; the 0.02-std training init leaves many coordinates
/// below what central differences can resolve against the 1e-8 floor.
pub fn randomize_store(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = rng_from(seed);
    for pi in 0..store.len() {
        let id = crate::nn::ParamId(pi);
        let shape = store.get(id).shape().to_vec();
        let fresh = Tensor::randn(shape, std, &mut rng);
        store
            .get_mut(id)
            .data_mut()
            .copy_from_slice(fresh.data());
    }
}

const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-6;
const INSTANCES: usize = 20;

/// Gradient checks for every differentiable primitive, >= 20 random
/// instances each at 64-bit precision.
pub fn gradcheck_primitives(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let mut rng = rng_from(seed);

    macro_rules! sweep {
        ($name:expr, $leaves:expr, $build:expr) => {{
            let mut worst = GradCheckReport {
                max_rel_err: 0.0,
                worst: (0, 0),
                analytic: 0.0,
                numeric: 0.0,
                tol: GRAD_TOL,
            };
            for _ in 0..INSTANCES {
                let leaves = $leaves(&mut rng);
                // the 1e-3 output scale keeps finite-difference noise below
                // the 1e-8 relative-error denominator floor on coordinates
                // whose true gradient is near zero
                let build: fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var> = $build;
                let report = grad_check(
                    &leaves,
                    GRAD_H,
                    GRAD_TOL,
                    |t: &mut Tape<f64>, v: &[Var]| {
                        let raw = build(t, v)?;
                        Ok(t.scale(raw, 1e-3))
                    },
                )?;
                if report.max_rel_err > worst.max_rel_err {
                    worst = report;
                }
            }
            lines.push(CheckLine::from_report($name, &worst));
        }};
    }

    let dims = |rng: &mut rand_chacha::ChaCha8Rng| {
        (rng.gen_range(1..5usize), rng.gen_range(1..6usize))
    };
    let seed_of = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen::<u64>();

    sweep!(
        "primitive add",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![
                randn(vec![m, n], seed_of(rng), 1.0),
                randn(vec![m, n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.add(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive add (broadcast bias)",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![
                randn(vec![m, n], seed_of(rng), 1.0),
                randn(vec![n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.add(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive sub",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![
                randn(vec![m, n], seed_of(rng), 1.0),
                randn(vec![m, n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.sub(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive multiply",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![
                randn(vec![m, n], seed_of(rng), 1.0),
                randn(vec![m, n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum_all(y))
        }
    );
    sweep!(
        "primitive matmul",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5usize);
            vec![
                randn(vec![m, k], seed_of(rng), 1.0),
                randn(vec![k, n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.matmul(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive transpose",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.transpose(v[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive reshape",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let numel = t.numel(v[0]);
            let y = t.reshape(v[0], vec![numel])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive concatenate",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let n = rng.gen_range(1..5usize);
            vec![
                randn(vec![rng.gen_range(1..4usize), n], seed_of(rng), 1.0),
                randn(vec![rng.gen_range(1..4usize), n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive slice",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let n = rng.gen_range(1..5usize);
            let m = rng.gen_range(2..6usize);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let rows = t.shape(v[0])[0];
            let y = t.slice_rows(v[0], 1, rows - 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive gather",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let rows = t.shape(v[0])[0];
            let idx: Vec<usize> = (0..rows + 2).map(|i| i % rows).collect();
            let y = t.gather_rows(v[0], &idx)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive sum",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive mean",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean_all(sq))
        }
    );
    sweep!(
        "primitive mean over rows",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mean_rows(v[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive mean over last axis",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mean_last(v[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive exponential",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 0.8)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.exp(v[0])?;
            Ok(t.sum_all(y))
        }
    );
    sweep!(
        "primitive logarithm",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            let mut t = randn(vec![m, n], seed_of(rng), 0.5);
            for x in t.data_mut() {
                *x = x.abs() + 0.5;
            }
            vec![t]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.log(v[0])?;
            Ok(t.sum_all(y))
        }
    );
    sweep!(
        "primitive square-root",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            let mut t = randn(vec![m, n], seed_of(rng), 0.5);
            for x in t.data_mut() {
                *x = x.abs() + 0.5;
            }
            vec![t]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.sqrt(v[0])?;
            Ok(t.sum_all(y))
        }
    );
    sweep!(
        "primitive GELU",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 1.5)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.gelu(v[0])?;
            Ok(t.sum_all(y))
        }
    );
    sweep!(
        "primitive softmax",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 2.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.softmax(v[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }
    );
    sweep!(
        "primitive sigmoid",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 2.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.sigmoid(v[0])?;
            Ok(t.sum_all(y))
        }
    );
    sweep!(
        "primitive log-sigmoid",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![randn(vec![m, n], seed_of(rng), 2.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.log_sigmoid(v[0])?;
            Ok(t.sum_all(y))
        }
    );
    sweep!(
        "primitive layer normalization",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = (rng.gen_range(1..5usize), rng.gen_range(2..6usize));
            vec![
                randn(vec![m, n], seed_of(rng), 1.0),
                randn(vec![n], seed_of(rng), 0.5),
                randn(vec![n], seed_of(rng), 0.5),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        }
    );
    sweep!(
        "primitive group normalization",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let b = rng.gen_range(1..4usize);
            let ch = 2 * rng.gen_range(1..4usize);
            let tlen = rng.gen_range(3..6usize);
            vec![
                randn(vec![b, ch, tlen], seed_of(rng), 1.0),
                randn(vec![ch], seed_of(rng), 0.5),
                randn(vec![ch], seed_of(rng), 0.5),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.group_norm(v[0], v[1], v[2], 2)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        }
    );
    sweep!(
        "primitive L2-normalize",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = (rng.gen_range(1..5usize), rng.gen_range(2..6usize));
            vec![randn(vec![m, n], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.l2_normalize_rows(v[0])?;
            let w = t.gelu(y)?;
            Ok(t.sum_all(w))
        }
    );
    sweep!(
        "primitive squared-L2 distance",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = dims(rng);
            vec![
                randn(vec![m, n], seed_of(rng), 1.0),
                randn(vec![m, n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| t.sq_dist(v[0], v[1])
    );
    sweep!(
        "primitive cosine similarity",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let n = rng.gen_range(2..8usize);
            vec![
                randn(vec![n], seed_of(rng), 1.0),
                randn(vec![n], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| t.cosine_sim(v[0], v[1])
    );
    sweep!(
        "primitive softmax-cross-entropy",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, n) = (rng.gen_range(1..5usize), rng.gen_range(2..6usize));
            vec![randn(vec![m, n], seed_of(rng), 2.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let rows = t.shape(v[0])[0];
            let classes = t.shape(v[0])[1];
            let targets: Vec<usize> = (0..rows).map(|i| i % classes).collect();
            let l = t.softmax_xent(v[0], &targets)?;
            Ok(t.mean_all(l))
        }
    );
    sweep!(
        "primitive conv1d",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let b = rng.gen_range(1..4usize);
            let cin = rng.gen_range(1..4usize);
            let cout = rng.gen_range(1..4usize);
            let tlen = rng.gen_range(3..8usize);
            let k = if rng.gen::<bool>() { 3 } else { 5 };
            vec![
                randn(vec![b, cin, tlen], seed_of(rng), 1.0),
                randn(vec![cout, cin, k], seed_of(rng), 1.0),
                randn(vec![cout], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        }
    );
    sweep!(
        "primitive attention",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let d = 4 * rng.gen_range(1..3usize);
            let sq = rng.gen_range(1..5usize);
            let sk = rng.gen_range(1..5usize);
            vec![
                randn(vec![sq, d], seed_of(rng), 1.0),
                randn(vec![sk, d], seed_of(rng), 1.0),
                randn(vec![sk, d], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.attention(v[0], v[1], v[2], 2, false)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        }
    );
    sweep!(
        "primitive attention (causal)",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let d = 4 * rng.gen_range(1..3usize);
            let s = rng.gen_range(1..5usize);
            vec![
                randn(vec![s, d], seed_of(rng), 1.0),
                randn(vec![s, d], seed_of(rng), 1.0),
                randn(vec![s, d], seed_of(rng), 1.0),
            ]
        },
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.attention(v[0], v[1], v[2], 2, true)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        }
    );
    sweep!(
        "primitive InfoNCE (literal form)",
        |rng: &mut rand_chacha::ChaCha8Rng| {
            let b = rng.gen_range(2..6usize);
            vec![randn(vec![b, b], seed_of(rng), 1.0)]
        },
        |t: &mut Tape<f64>, v: &[Var]| t.infonce_literal(v[0], 0.3)
    );

    Ok(lines)
}
