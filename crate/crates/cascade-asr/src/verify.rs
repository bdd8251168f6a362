//! Named self-checks behind the `check` command: alignment-enumeration
//! oracles for the sequence losses, dense references and invariances
//! for the similarity-preserving distillation algebra, blocking
//! geometry, and finite-difference gradient validation.  Each property
//! returns a verdict; the whole suite runs in seconds.

use crate::blocking::{algorithmic_delay_ms, segment_blocks, BlockSpec};
use crate::distill::{mse_ed_loss, sp_kd_loss};
use crate::losses::{
    attention_ce_loss, ctc_loss, mlm_loss, offline_loss, rnnt_loss, Loss, LossWeights,
};
use crate::model::Lattice;
use crate::numerics::{grad_check, log_softmax, logaddexp, GradTape, Tensor, Var};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-6;
const GRAD_EPS: f64 = 1e-5;

/// Outcome of one named property.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn gap_result(name: &'static str, worst: f64, tol: f64) -> CheckResult {
    CheckResult {
        name,
        pass: worst.is_finite() && worst <= tol,
        detail: format!("worst deviation {worst:.3e}, tolerance {tol:.1e}"),
    }
}

/// Run a fallible measurement and fold errors into a failed verdict.
fn measured(name: &'static str, tol: f64, f: impl FnOnce() -> Result<f64>) -> CheckResult {
    match f() {
        Ok(worst) => gap_result(name, worst, tol),
        Err(e) => CheckResult { name, pass: false, detail: format!("error: {e}") },
    }
}

fn node_of(loss: Loss) -> Result<Var> {
    loss.node.ok_or_else(|| Error::Domain("loss is infeasible".into()))
}

/// Random table whose rows are valid log-distributions.
fn log_prob_table(seed: u64, rows: usize, classes: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        data.extend(log_softmax(&logits).expect("finite logits"));
    }
    Tensor::new(rows, classes, data).expect("positive shape")
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(rows, cols, data).expect("positive shape")
}

// ---------------------------------------------------------------------------
// Sequence-loss oracles.

/// Collapse a frame-level path: merge repeats, then drop blanks.
fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = usize::MAX;
    for &p in path {
        if p != last && p != 0 {
            out.push(p);
        }
        last = p;
    }
    out
}

/// Log-likelihood of `y` by brute-force enumeration of every
/// frame-level path (classes^T of them).
fn ctc_enumerate(table: &Tensor, y: &[usize]) -> f64 {
    let t_len = table.rows();
    let classes = table.cols();
    let mut total = f64::NEG_INFINITY;
    let n_paths = classes.pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    for code in 0..n_paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % classes;
            c /= classes;
        }
        if collapse(&path) == y {
            let score: f64 = path.iter().enumerate().map(|(t, &k)| table.get(t, k)).sum();
            total = logaddexp(total, score);
        }
    }
    total
}

/// Log-likelihood of `y` by enumerating every interleaving of emits
/// and frame advances through the joint lattice.
fn rnnt_enumerate(table: &Tensor, t_len: usize, u_len: usize, y: &[usize]) -> f64 {
    fn go(table: &Tensor, t_len: usize, u_len: usize, y: &[usize], t: usize, u: usize) -> f64 {
        let row = t * u_len + u;
        let mut acc = f64::NEG_INFINITY;
        if u < y.len() {
            acc = logaddexp(acc, table.get(row, y[u]) + go(table, t_len, u_len, y, t, u + 1));
        }
        if t + 1 < t_len {
            acc = logaddexp(acc, table.get(row, 0) + go(table, t_len, u_len, y, t + 1, u));
        } else if u == y.len() {
            acc = logaddexp(acc, table.get(row, 0));
        }
        acc
    }
    go(table, t_len, u_len, y, 0, 0)
}

pub fn check_ctc_oracle() -> CheckResult {
    measured("ctc-oracle-enumeration", 1e-9, || {
        let mut worst = 0.0_f64;
        for t_len in 1..=4usize {
            for vocab in 1..=3usize {
                for u in 0..=2usize {
                    for seed in 0..20u64 {
                        let mix = seed * 977 + (t_len * 100 + vocab * 10 + u) as u64;
                        let table = log_prob_table(mix, t_len, vocab + 1);
                        let mut rng = ChaCha8Rng::seed_from_u64(mix ^ 0x5eed);
                        let y: Vec<usize> = (0..u).map(|_| rng.gen_range(1..=vocab)).collect();
                        let mut tape = GradTape::new();
                        let lp = tape.constant(&table)?;
                        let loss = ctc_loss(&mut tape, lp, &y)?;
                        let ll = ctc_enumerate(&table, &y);
                        if ll == f64::NEG_INFINITY {
                            if loss.value.is_finite() || loss.node.is_some() {
                                return Ok(f64::INFINITY);
                            }
                        } else {
                            worst = worst.max((loss.value - (-ll)).abs());
                        }
                    }
                }
            }
        }
        Ok(worst)
    })
}

pub fn check_rnnt_oracle() -> CheckResult {
    measured("rnnt-oracle-enumeration", 1e-9, || {
        let mut worst = 0.0_f64;
        for t_len in 1..=4usize {
            for vocab in 1..=3usize {
                for u in 0..=2usize {
                    for seed in 0..20u64 {
                        let mix = seed * 769 + (t_len * 100 + vocab * 10 + u) as u64;
                        let table = log_prob_table(mix, t_len * (u + 1), vocab + 1);
                        let mut rng = ChaCha8Rng::seed_from_u64(mix ^ 0xfeed);
                        let y: Vec<usize> = (0..u).map(|_| rng.gen_range(1..=vocab)).collect();
                        let mut tape = GradTape::new();
                        let lp = tape.constant(&table)?;
                        let lat = Lattice { log_probs: lp, t_len, u_len: u + 1, vocab };
                        let loss = rnnt_loss(&mut tape, &lat, &y)?;
                        let ll = rnnt_enumerate(&table, t_len, u + 1, &y);
                        worst = worst.max((loss.value - (-ll)).abs());
                    }
                }
            }
        }
        Ok(worst)
    })
}

pub fn check_ctc_normalization() -> CheckResult {
    measured("ctc-normalization", 1e-9, || {
        let (t_len, vocab) = (3usize, 2usize);
        // Every label sequence short enough to possibly align.
        let mut targets: Vec<Vec<usize>> = vec![vec![]];
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..t_len {
            let mut next = Vec::new();
            for base in &frontier {
                for tok in 1..=vocab {
                    let mut v = base.clone();
                    v.push(tok);
                    next.push(v);
                }
            }
            targets.extend(next.iter().cloned());
            frontier = next;
        }

        let mut worst = 0.0_f64;
        for seed in 0..10u64 {
            let table = log_prob_table(seed * 31 + 5, t_len, vocab + 1);
            let mut total = 0.0;
            for y in &targets {
                let mut tape = GradTape::new();
                let lp = tape.constant(&table)?;
                let loss = ctc_loss(&mut tape, lp, y)?;
                total += (-loss.value).exp(); // infeasible adds exp(-inf) = 0
            }
            worst = worst.max((total - 1.0).abs());
        }
        Ok(worst)
    })
}

// ---------------------------------------------------------------------------
// Gradient checks for the sequence losses.

pub fn check_ctc_gradient() -> CheckResult {
    measured("ctc-gradient", GRAD_TOL, || {
        let mut worst = 0.0_f64;
        // (T', y) pairs, including an adjacent repeat.
        let cases: [(usize, &[usize]); 3] = [(4, &[1, 2]), (3, &[2, 2]), (2, &[1])];
        for (i, (t_len, y)) in cases.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(41 + i as u64);
            let x = random_tensor(&mut rng, *t_len, 4);
            let err = grad_check(
                |tape, xv| {
                    let lp = tape.log_softmax_rows(xv)?;
                    node_of(ctc_loss(tape, lp, y)?)
                },
                &x,
                GRAD_EPS,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    })
}

/// Finite-difference check of the transducer gradient, with a hook
/// that lets the test suite corrupt the analytic gradient and watch
/// this property fail by name.
pub(crate) fn rnnt_gradient_with(tweak: &dyn Fn(f64) -> f64) -> CheckResult {
    measured("rnnt-gradient", GRAD_TOL, || {
        let (t_len, vocab) = (3usize, 2usize);
        let y = [1usize, 2];
        let u_len = y.len() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let x = random_tensor(&mut rng, t_len * u_len, vocab + 1);

        let value_of = |data: &[f64]| -> Result<f64> {
            let t = Tensor::new(x.rows(), x.cols(), data.to_vec())?;
            let mut tape = GradTape::new();
            let leaf = tape.constant(&t)?;
            let lp = tape.log_softmax_rows(leaf)?;
            let lat = Lattice { log_probs: lp, t_len, u_len, vocab };
            Ok(rnnt_loss(&mut tape, &lat, &y)?.value)
        };

        let mut tape = GradTape::new();
        let leaf = tape.leaf(&x)?;
        let lp = tape.log_softmax_rows(leaf)?;
        let lat = Lattice { log_probs: lp, t_len, u_len, vocab };
        let loss = rnnt_loss(&mut tape, &lat, &y)?;
        let grads = tape.backward(node_of(loss)?)?;
        let analytic: Vec<f64> = grads.get_or_zeros(leaf).iter().map(|&g| tweak(g)).collect();

        let mut worst = 0.0_f64;
        for i in 0..x.numel() {
            let mut plus = x.data().to_vec();
            plus[i] += GRAD_EPS;
            let mut minus = x.data().to_vec();
            minus[i] -= GRAD_EPS;
            let numeric = (value_of(&plus)? - value_of(&minus)?) / (2.0 * GRAD_EPS);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
        Ok(worst)
    })
}

pub fn check_rnnt_gradient() -> CheckResult {
    rnnt_gradient_with(&|g| g)
}

pub fn check_attention_ce_gradient() -> CheckResult {
    measured("attention-ce-gradient", GRAD_TOL, || {
        let y = [1usize, 3, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x = random_tensor(&mut rng, y.len() + 1, 4);
        grad_check(
            |tape, xv| {
                let lp = tape.log_softmax_rows(xv)?;
                node_of(attention_ce_loss(tape, lp, &y)?)
            },
            &x,
            GRAD_EPS,
        )
    })
}

pub fn check_mlm_gradient() -> CheckResult {
    measured("mlm-gradient", GRAD_TOL, || {
        let y = [2usize, 1, 3];
        let positions = [0usize, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let x = random_tensor(&mut rng, y.len(), 5);
        grad_check(
            |tape, xv| {
                let lp = tape.log_softmax_rows(xv)?;
                node_of(mlm_loss(tape, lp, &y, &positions)?)
            },
            &x,
            GRAD_EPS,
        )
    })
}

/// One leaf feeds all four offline losses through their weighted sum,
/// validating the composite backward pass.
pub fn check_offline_composite_gradient() -> CheckResult {
    measured("offline-composite-gradient", GRAD_TOL, || {
        let vocab = 2usize;
        let y = [1usize, 2];
        let (t_len, u_len) = (3usize, y.len() + 1);
        let rows = t_len + t_len * u_len + u_len + y.len();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = random_tensor(&mut rng, rows, vocab + 2);
        grad_check(
            |tape, xv| {
                let mut at = 0usize;
                let mut block = |tape: &mut GradTape, n: usize, cols: usize| -> Result<Var> {
                    let rows = tape.slice_rows(xv, at, at + n)?;
                    at += n;
                    let rows = tape.slice_cols(rows, 0, cols)?;
                    tape.log_softmax_rows(rows)
                };
                let ctc_lp = block(tape, t_len, vocab + 1)?;
                let rnnt_lp = block(tape, t_len * u_len, vocab + 1)?;
                let att_lp = block(tape, u_len, vocab + 1)?;
                let mlm_lp = block(tape, y.len(), vocab + 2)?;

                let ctc = ctc_loss(tape, ctc_lp, &y)?;
                let lat = Lattice { log_probs: rnnt_lp, t_len, u_len, vocab };
                let rnnt = rnnt_loss(tape, &lat, &y)?;
                let att = attention_ce_loss(tape, att_lp, &y)?;
                let mlm = mlm_loss(tape, mlm_lp, &y, &[0, 1])?;
                node_of(offline_loss(tape, &LossWeights::default(), ctc, rnnt, att, mlm)?)
            },
            &x,
            GRAD_EPS,
        )
    })
}

// ---------------------------------------------------------------------------
// Distillation algebra.

/// Dense reference for the similarity-preserving loss, computed with
/// plain loops: flatten each sequence, pad to the side's widest row,
/// take the batch Gram matrix, L2-normalize its rows, and average the
/// squared Frobenius gap over B^2.
fn dense_spkd(teacher: &[Tensor], student: &[Tensor]) -> f64 {
    fn flat_rows(seqs: &[Tensor]) -> Vec<Vec<f64>> {
        let widest = seqs.iter().map(|t| t.numel()).max().unwrap_or(0);
        seqs.iter()
            .map(|t| {
                let mut row = t.data().to_vec();
                row.resize(widest, 0.0);
                row
            })
            .collect()
    }
    fn normalized_gram(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let b = rows.len();
        let mut g = vec![vec![0.0; b]; b];
        for i in 0..b {
            for j in 0..b {
                g[i][j] = rows[i].iter().zip(&rows[j]).map(|(a, c)| a * c).sum();
            }
        }
        for row in g.iter_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        g
    }
    let gt = normalized_gram(&flat_rows(teacher));
    let gs = normalized_gram(&flat_rows(student));
    let b = teacher.len();
    let mut sum = 0.0;
    for i in 0..b {
        for j in 0..b {
            sum += (gt[i][j] - gs[i][j]).powi(2);
        }
    }
    sum / (b * b) as f64
}

/// Random teacher/student batch with per-sequence lengths and
/// mismatched feature widths.
fn spkd_batch(seed: u64, b: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = Vec::with_capacity(b);
    let mut student = Vec::with_capacity(b);
    for _ in 0..b {
        let rows = rng.gen_range(1..=3);
        teacher.push(random_tensor(&mut rng, rows, 3));
        student.push(random_tensor(&mut rng, rows, 5));
    }
    (teacher, student)
}

fn spkd_value(teacher: &[Tensor], student: &[Tensor]) -> Result<f64> {
    let mut tape = GradTape::new();
    let t: Vec<Var> = teacher.iter().map(|x| tape.constant(x)).collect::<Result<_>>()?;
    let s: Vec<Var> = student.iter().map(|x| tape.constant(x)).collect::<Result<_>>()?;
    Ok(sp_kd_loss(&mut tape, &t, &s)?.value)
}

pub fn check_spkd_dense_reference() -> CheckResult {
    measured("spkd-dense-reference", 1e-10, || {
        let mut worst = 0.0_f64;
        for (i, b) in [2usize, 4, 8].into_iter().enumerate() {
            for seed in 0..5u64 {
                let (teacher, student) = spkd_batch(seed * 13 + i as u64, b);
                let got = spkd_value(&teacher, &student)?;
                worst = worst.max((got - dense_spkd(&teacher, &student)).abs());
            }
        }
        Ok(worst)
    })
}

pub fn check_spkd_hand_case() -> CheckResult {
    measured("spkd-hand-case", 1e-12, || {
        // Teacher rows I2, student rows all-ones: loss (2 - sqrt 2)/2.
        let teacher = vec![
            Tensor::new(1, 2, vec![1.0, 0.0])?,
            Tensor::new(1, 2, vec![0.0, 1.0])?,
        ];
        let student = vec![
            Tensor::new(1, 2, vec![1.0, 1.0])?,
            Tensor::new(1, 2, vec![1.0, 1.0])?,
        ];
        let got = spkd_value(&teacher, &student)?;
        Ok((got - (2.0 - 2.0_f64.sqrt()) / 2.0).abs())
    })
}

pub fn check_spkd_scale_invariance() -> CheckResult {
    measured("spkd-scale-invariance", 1e-10, || {
        let (teacher, student) = spkd_batch(3, 4);
        let base = spkd_value(&teacher, &student)?;
        let mut worst = 0.0_f64;
        for c in [0.1, 3.0] {
            let scaled: Vec<Tensor> = student
                .iter()
                .map(|t| {
                    let data = t.data().iter().map(|v| c * v).collect();
                    Tensor::new(t.rows(), t.cols(), data)
                })
                .collect::<Result<_>>()?;
            worst = worst.max((spkd_value(&teacher, &scaled)? - base).abs());
        }
        Ok(worst)
    })
}

/// Gram-Schmidt a seeded random square matrix into an orthogonal one.
fn random_orthogonal(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            cols.push(v);
        }
    }
    // cols[k] is the k-th column; return as row-major R with R[i][j] = cols[j][i].
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

pub fn check_spkd_rotation_invariance() -> CheckResult {
    measured("spkd-rotation-invariance", 1e-9, || {
        // Single-row sequences so the flattened features are the rows
        // themselves; rotate them by an orthogonal matrix.
        let w = 4usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let teacher: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, 1, 3)).collect();
        let student: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, 1, w)).collect();
        let base = spkd_value(&teacher, &student)?;
        let r = random_orthogonal(17, w);
        let rotated: Vec<Tensor> = student
            .iter()
            .map(|t| {
                let row = t.data();
                let data: Vec<f64> = (0..w)
                    .map(|j| (0..w).map(|i| row[i] * r[i][j]).sum())
                    .collect();
                Tensor::new(1, w, data)
            })
            .collect::<Result<_>>()?;
        Ok((spkd_value(&teacher, &rotated)? - base).abs())
    })
}

pub fn check_spkd_permutation_invariance() -> CheckResult {
    measured("spkd-permutation-invariance", 1e-12, || {
        let (teacher, student) = spkd_batch(29, 4);
        let base = spkd_value(&teacher, &student)?;
        let perm = [2usize, 0, 3, 1];
        let pt: Vec<Tensor> = perm.iter().map(|&i| teacher[i].clone()).collect();
        let ps: Vec<Tensor> = perm.iter().map(|&i| student[i].clone()).collect();
        Ok((spkd_value(&pt, &ps)? - base).abs())
    })
}

pub fn check_spkd_pair_bound() -> CheckResult {
    measured("spkd-pair-bound", 1e-12, || {
        // Normalized Gram rows are unit vectors, so the squared
        // Frobenius gap is at most 4B and the loss at most 4/B.
        let mut worst = 0.0_f64;
        for (i, b) in [2usize, 4, 8].into_iter().enumerate() {
            for seed in 0..5u64 {
                let (teacher, student) = spkd_batch(seed * 7 + 100 + i as u64, b);
                let loss = spkd_value(&teacher, &student)?;
                worst = worst.max(loss - 4.0 / b as f64);
            }
        }
        Ok(worst.max(0.0))
    })
}

pub fn check_spkd_teacher_grad_zero() -> CheckResult {
    measured("spkd-teacher-grad-zero", 0.0, || {
        let (teacher, student) = spkd_batch(31, 3);
        let mut tape = GradTape::new();
        let t: Vec<Var> = teacher.iter().map(|x| tape.leaf(x)).collect::<Result<_>>()?;
        let s: Vec<Var> = student.iter().map(|x| tape.leaf(x)).collect::<Result<_>>()?;
        let loss = sp_kd_loss(&mut tape, &t, &s)?;
        let grads = tape.backward(node_of(loss)?)?;
        let mut worst = 0.0_f64;
        for &tv in &t {
            for g in grads.get_or_zeros(tv) {
                worst = worst.max(g.abs());
            }
        }
        // The student side must actually carry gradient.
        let any_student: f64 = s
            .iter()
            .flat_map(|&sv| grads.get_or_zeros(sv))
            .map(|g| g.abs())
            .sum();
        if any_student == 0.0 {
            return Err(Error::Domain("student gradient vanished entirely".into()));
        }
        Ok(worst)
    })
}

pub fn check_spkd_student_gradient() -> CheckResult {
    measured("spkd-student-gradient", GRAD_TOL, || {
        let b = 3usize;
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let teacher: Vec<Tensor> = (0..b).map(|_| random_tensor(&mut rng, 2, 3)).collect();
        let x = random_tensor(&mut rng, 2 * b, 4); // stacked student
        grad_check(
            |tape, xv| {
                let t: Vec<Var> =
                    teacher.iter().map(|m| tape.constant(m)).collect::<Result<_>>()?;
                let s: Vec<Var> = (0..b)
                    .map(|i| tape.slice_rows(xv, 2 * i, 2 * i + 2))
                    .collect::<Result<_>>()?;
                node_of(sp_kd_loss(tape, &t, &s)?)
            },
            &x,
            GRAD_EPS,
        )
    })
}

pub fn check_mse_ed_reference() -> CheckResult {
    measured("mse-ed-reference", 1e-12, || {
        // Teacher [1,2], student [2,4]: mean squared gap (1 + 4)/2.
        let teacher = vec![Tensor::new(1, 2, vec![1.0, 2.0])?];
        let student = vec![Tensor::new(1, 2, vec![2.0, 4.0])?];
        let mut tape = GradTape::new();
        let t = vec![tape.leaf(&teacher[0])?];
        let s = vec![tape.leaf(&student[0])?];
        let loss = mse_ed_loss(&mut tape, &t, &s)?;
        let gap = (loss.value - 2.5).abs();
        // Teacher stays out of the gradient here too.
        let grads = tape.backward(node_of(loss)?)?;
        let teacher_grad: f64 = grads.get_or_zeros(t[0]).iter().map(|g| g.abs()).sum();
        Ok(gap.max(teacher_grad))
    })
}

pub fn check_mse_ed_gradient() -> CheckResult {
    measured("mse-ed-gradient", GRAD_TOL, || {
        let b = 2usize;
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let teacher: Vec<Tensor> = (0..b).map(|_| random_tensor(&mut rng, 2, 3)).collect();
        let x = random_tensor(&mut rng, 2 * b, 3);
        grad_check(
            |tape, xv| {
                let t: Vec<Var> =
                    teacher.iter().map(|m| tape.constant(m)).collect::<Result<_>>()?;
                let s: Vec<Var> = (0..b)
                    .map(|i| tape.slice_rows(xv, 2 * i, 2 * i + 2))
                    .collect::<Result<_>>()?;
                node_of(mse_ed_loss(tape, &t, &s)?)
            },
            &x,
            GRAD_EPS,
        )
    })
}

// ---------------------------------------------------------------------------
// Blocking geometry.

pub fn check_block_count_coverage() -> CheckResult {
    measured("block-count-coverage", 0.0, || {
        let specs = [(20usize, 10usize, 0usize), (40, 16, 16), (7, 7, 0), (5, 2, 3)];
        for (block, hop, la) in specs {
            let spec = BlockSpec { block, hop, look_ahead: la, frame_period_ms: 10.0 };
            for frames in 1..=200usize {
                let blocks = segment_blocks(frames, &spec)?;
                let expect = if frames <= block {
                    1
                } else {
                    (frames - block).div_ceil(hop) + 1
                };
                if blocks.len() != expect {
                    return Err(Error::Domain(format!(
                        "T={frames} block={block} hop={hop}: {} blocks, expected {expect}",
                        blocks.len()
                    )));
                }
                if blocks[0].start != 0 || blocks.last().expect("non-empty").end != frames {
                    return Err(Error::Domain(format!(
                        "T={frames} block={block} hop={hop}: coverage broken"
                    )));
                }
                for (i, b) in blocks.iter().enumerate() {
                    if b.start != i * hop || b.end - b.start + b.pad != block {
                        return Err(Error::Domain(format!(
                            "T={frames} block={block} hop={hop}: bad window {i}"
                        )));
                    }
                }
            }
        }
        Ok(0.0)
    })
}

pub fn check_delay_table() -> CheckResult {
    measured("delay-table", 0.0, || {
        let mut worst = 0.0_f64;
        for (block, expect) in [(20usize, 800.0), (40, 1600.0), (60, 2400.0)] {
            let spec = BlockSpec { block, hop: block / 2, look_ahead: 0, frame_period_ms: 10.0 };
            worst = worst.max((algorithmic_delay_ms(&spec, 4) - expect).abs());
        }
        Ok(worst)
    })
}

/// Every property, in a stable order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_ctc_oracle(),
        check_ctc_normalization(),
        check_rnnt_oracle(),
        check_ctc_gradient(),
        check_rnnt_gradient(),
        check_attention_ce_gradient(),
        check_mlm_gradient(),
        check_offline_composite_gradient(),
        check_spkd_dense_reference(),
        check_spkd_hand_case(),
        check_spkd_scale_invariance(),
        check_spkd_rotation_invariance(),
        check_spkd_permutation_invariance(),
        check_spkd_pair_bound(),
        check_spkd_teacher_grad_zero(),
        check_spkd_student_gradient(),
        check_mse_ed_reference(),
        check_mse_ed_gradient(),
        check_block_count_coverage(),
        check_delay_table(),
    ]
}
