//! Self-verification suites behind `dcscr check`.
//!
//! * `oracle`: ADMM against the exact KKT solve, KKT against a long projected
//!   gradient run, Cholesky reconstruction and solves.
//! * `gradients`: analytic gradients against central finite differences.
//! * `invariants`: translation, permutation, symmetry and determinism
//!   properties of the solvers and the feature pipeline.
//!
//! Every check is seeded, so a suite's report is reproducible bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cscr::{solve_pair, Hyperparams, PairLabel};
use crate::features::{gap, nonlocal_attention, softmax_xent_raw, AttentionParams, FeatureMap};
use crate::numkernel::{
    cholesky_factor, kkt_qp_solve, max_abs_diff, norm_sq, qp_objective, sum, Matrix,
};
use crate::par::Exec;
use crate::training::{contrastive_loss, loss_grad_embedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Gradients,
    Invariants,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(Suite::Oracle),
            "gradients" => Ok(Suite::Gradients),
            "invariants" => Ok(Suite::Invariants),
            other => Err(format!("unknown suite `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

pub fn run_suite(suite: Suite, exec: Exec) -> Vec<CheckOutcome> {
    match suite {
        Suite::Oracle => vec![
            admm_matches_kkt(exec),
            kkt_matches_projected_gradient(),
            kkt_is_feasible_and_optimal(exec),
            cholesky_round_trips(exec),
        ],
        Suite::Gradients => vec![xent_gradients(exec), embedding_gradients(exec)],
        Suite::Invariants => vec![
            translation_invariance(exec),
            permutation_equivariance(exec),
            swap_symmetry(exec),
            duplicate_columns(exec),
            solver_determinism(exec),
            pooling_and_attention_permutation(exec),
        ],
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn instance_rng(base: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(i as u64);
    rng
}

/// `|a - b| <= tol * max(|b|, 1e-12)`
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-12)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm_sq(a).sqrt().max(norm_sq(b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        norm_sq(&diff).sqrt() / scale
    }
}

/// Hyperparameters drawn from the recommended ranges: `mu` in
/// `[0.0003, 0.03]`, `lambda` in `[0.01, 0.3]`.
pub fn recommended_hyperparams(rng: &mut ChaCha8Rng) -> Hyperparams {
    Hyperparams {
        mu1: rng.random_range(0.0003..=0.03),
        mu2: rng.random_range(0.0003..=0.03),
        lambda1: rng.random_range(0.01..=0.3),
        lambda2: rng.random_range(0.01..=0.3),
        ..Hyperparams::default()
    }
}

pub const ORACLE_INSTANCES: usize = 200;

fn admm_matches_kkt(exec: Exec) -> CheckOutcome {
    let results = exec.map_range(ORACLE_INSTANCES, |i| {
        let mut rng = instance_rng(0xA11CE, i);
        let d = rng.random_range(1..=8);
        let m = rng.random_range(1..=6);
        let n = rng.random_range(1..=6);
        let x = gaussian_matrix(d, m, &mut rng);
        let y = gaussian_matrix(d, n, &mut rng);
        let h = recommended_hyperparams(&mut rng);
        let label = if rng.random_bool(0.5) {
            PairLabel::Same
        } else {
            PairLabel::Different
        };
        let sol = solve_pair(&x, &y, label, &h).map_err(|e| e.to_string())?;
        let kkt =
            kkt_qp_solve(&x, &y, h.mu(label), h.lambda1, h.lambda2).map_err(|e| e.to_string())?;
        let coef = max_abs_diff(&sol.alpha, &kkt.alpha).max(max_abs_diff(&sol.beta, &kkt.beta));
        let feasible = !sol.converged
            || (sol.constraint_residuals.0.abs() <= h.tol_constraint
                && sol.constraint_residuals.1.abs() <= h.tol_constraint);
        Ok::<_, String>((
            coef,
            rel_close(sol.distance, kkt.distance, 1e-5),
            sol.converged,
            feasible,
        ))
    });
    let mut worst = 0.0_f64;
    let mut failures = 0;
    let mut unconverged = 0;
    for r in &results {
        match r {
            Ok((coef, dist_ok, converged, feasible)) => {
                worst = worst.max(*coef);
                if *coef > 1e-5 || !dist_ok || !feasible {
                    failures += 1;
                }
                if !converged {
                    unconverged += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    outcome(
        "admm_matches_kkt",
        failures == 0,
        format!(
            "{ORACLE_INSTANCES} instances, worst coefficient gap {worst:.2e}, {failures} failures, {unconverged} hit max_iters"
        ),
    )
}

/// Minimizes the pair objective by gradient steps followed by projection onto
/// `{Σα = 1, Σβ = 1}`.
pub fn projected_gradient(
    x: &Matrix,
    y: &Matrix,
    mu: f64,
    l1: f64,
    l2: f64,
    iters: usize,
    step: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (x.cols(), y.cols());
    let mut a = vec![1.0 / m as f64; m];
    let mut b = vec![1.0 / n as f64; n];
    let project = |v: &mut [f64]| {
        let shift = (sum(v) - 1.0) / v.len() as f64;
        v.iter_mut().for_each(|e| *e -= shift);
    };
    for _ in 0..iters {
        let vx = x.matvec(&a).expect("dims");
        let vy = y.matvec(&b).expect("dims");
        let r: Vec<f64> = vx.iter().zip(&vy).map(|(p, q)| p - q).collect();
        let ga = x.tr_matvec(&r).expect("dims");
        let gb = y.tr_matvec(&r).expect("dims");
        for k in 0..m {
            a[k] -= step * (2.0 * mu * ga[k] + 2.0 * l1 * a[k]);
        }
        for k in 0..n {
            b[k] -= step * (-2.0 * mu * gb[k] + 2.0 * l2 * b[k]);
        }
        project(&mut a);
        project(&mut b);
    }
    (a, b)
}

fn kkt_matches_projected_gradient() -> CheckOutcome {
    let mut rng = instance_rng(0xB0B, 0);
    let x = gaussian_matrix(4, 3, &mut rng);
    let y = gaussian_matrix(4, 3, &mut rng);
    let h = Hyperparams::default();
    let Ok(kkt) = kkt_qp_solve(&x, &y, h.mu1, h.lambda1, h.lambda2) else {
        return outcome(
            "kkt_matches_projected_gradient",
            false,
            "KKT solve failed".into(),
        );
    };
    let (a, b) = projected_gradient(&x, &y, h.mu1, h.lambda1, h.lambda2, 100_000, 1e-3);
    let f_kkt = qp_objective(&x, &y, h.mu1, h.lambda1, h.lambda2, &kkt.alpha, &kkt.beta)
        .unwrap_or(f64::NAN);
    let f_pg = qp_objective(&x, &y, h.mu1, h.lambda1, h.lambda2, &a, &b).unwrap_or(f64::NAN);
    outcome(
        "kkt_matches_projected_gradient",
        rel_close(f_kkt, f_pg, 1e-5),
        format!("objective kkt {f_kkt:.12} vs projected gradient {f_pg:.12}"),
    )
}

fn kkt_is_feasible_and_optimal(exec: Exec) -> CheckOutcome {
    let results = exec.map_range(100, |i| {
        let mut rng = instance_rng(0xFEA5, i);
        let d = rng.random_range(1..=8);
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = gaussian_matrix(d, m, &mut rng);
        let y = gaussian_matrix(d, n, &mut rng);
        let h = recommended_hyperparams(&mut rng);
        let Ok(s) = kkt_qp_solve(&x, &y, h.mu1, h.lambda1, h.lambda2) else {
            return false;
        };
        if (sum(&s.alpha) - 1.0).abs() > 1e-10 || (sum(&s.beta) - 1.0).abs() > 1e-10 {
            return false;
        }
        let f0 = qp_objective(&x, &y, h.mu1, h.lambda1, h.lambda2, &s.alpha, &s.beta).unwrap();
        (0..20).all(|_| {
            // zero-sum direction of norm 1e-3
            let mut da: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut db: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (ma, mb) = (sum(&da) / m as f64, sum(&db) / n as f64);
            da.iter_mut().for_each(|v| *v -= ma);
            db.iter_mut().for_each(|v| *v -= mb);
            let norm = (norm_sq(&da) + norm_sq(&db)).sqrt();
            if norm == 0.0 {
                return true;
            }
            let a: Vec<f64> = s
                .alpha
                .iter()
                .zip(&da)
                .map(|(v, d)| v + 1e-3 * d / norm)
                .collect();
            let b: Vec<f64> = s
                .beta
                .iter()
                .zip(&db)
                .map(|(v, d)| v + 1e-3 * d / norm)
                .collect();
            qp_objective(&x, &y, h.mu1, h.lambda1, h.lambda2, &a, &b).unwrap() >= f0
        })
    });
    let bad = results.iter().filter(|ok| !**ok).count();
    outcome(
        "kkt_feasible_and_optimal",
        bad == 0,
        format!("100 instances x 20 feasible perturbations, {bad} violations"),
    )
}

fn cholesky_round_trips(exec: Exec) -> CheckOutcome {
    let results = exec.map_range(50, |i| {
        let n = i + 1;
        let mut rng = instance_rng(0xC401, i);
        let m = gaussian_matrix(n, n, &mut rng);
        let mut a = m.tr_matmul(&m).expect("square");
        a.add_scaled(n as f64, &Matrix::identity(n))
            .expect("square");
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b = a.matvec(&x).expect("dims");
        let Ok(f) = cholesky_factor(&a) else {
            return f64::INFINITY;
        };
        let got = f.solve_vec(&b).expect("dims");
        let recon = f.reconstruct().max_abs_diff(&a) / a.max_abs();
        rel_error(&got, &x).max(recon)
    });
    let worst = results.iter().copied().fold(0.0, f64::max);
    outcome(
        "cholesky_round_trips",
        worst <= 1e-9,
        format!("sizes 1..=50, worst relative error {worst:.2e}"),
    )
}

/// Central difference of `f` at every coordinate of `x`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + step;
            let up = f(&probe);
            probe[k] = orig - step;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRADIENT_INSTANCES: usize = 100;

fn xent_gradients(exec: Exec) -> CheckOutcome {
    let errors = exec.map_range(GRADIENT_INSTANCES, |i| {
        let mut rng = instance_rng(0x9E7, i);
        let k = rng.random_range(2..=6);
        let dim = rng.random_range(1..=6);
        let head = gaussian_matrix(k, dim, &mut rng);
        let bias: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let label = rng.random_range(0..k);
        let out = softmax_xent_raw(&z, label, &head, &bias).expect("valid instance");

        let fd_z = central_difference(&z, FD_STEP, |zz| {
            softmax_xent_raw(zz, label, &head, &bias).unwrap().loss
        });
        let fd_b = central_difference(&bias, FD_STEP, |bb| {
            softmax_xent_raw(&z, label, &head, bb).unwrap().loss
        });
        let fd_h = central_difference(head.as_slice(), FD_STEP, |hh| {
            let hm = Matrix::new(k, dim, hh.to_vec()).unwrap();
            softmax_xent_raw(&z, label, &hm, &bias).unwrap().loss
        });
        rel_error(&out.grad_input, &fd_z)
            .max(rel_error(&out.grad_bias, &fd_b))
            .max(rel_error(out.grad_head.as_slice(), &fd_h))
    });
    let worst = errors.iter().copied().fold(0.0, f64::max);
    outcome(
        "softmax_xent_gradients",
        worst <= FD_TOL,
        format!("{GRADIENT_INSTANCES} instances, worst relative error {worst:.2e}"),
    )
}

/// Regime of a generated embedding-gradient instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradRegime {
    Same,
    DifferentActive,
    DifferentInactive,
}

pub fn grad_regime(i: usize) -> GradRegime {
    match i % 3 {
        0 => GradRegime::Same,
        1 => GradRegime::DifferentActive,
        _ => GradRegime::DifferentInactive,
    }
}

fn embedding_gradients(exec: Exec) -> CheckOutcome {
    let errors = exec.map_range(GRADIENT_INSTANCES, |i| {
        let mut rng = instance_rng(0xE3B, i);
        let regime = grad_regime(i);
        let c = rng.random_range(1..=6);
        let e = rng.random_range(1..=6);
        let (m, n) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let px = gaussian_matrix(c, m, &mut rng);
        let py = gaussian_matrix(c, n, &mut rng);
        let w = gaussian_matrix(e, c, &mut rng);
        let label = if regime == GradRegime::Same {
            PairLabel::Same
        } else {
            PairLabel::Different
        };
        let mut h = recommended_hyperparams(&mut rng);
        let x = w.matmul(&px).unwrap();
        let y = w.matmul(&py).unwrap();
        let sol = solve_pair(&x, &y, label, &h).expect("solve");
        // keep the margin well away from d so the hinge regime is stable
        h.margin = match regime {
            GradRegime::DifferentActive => 2.0 * sol.distance + 1.0,
            GradRegime::DifferentInactive => 0.5 * sol.distance,
            GradRegime::Same => h.margin,
        };
        let g = loss_grad_embedding(&px, &py, &w, label, &sol, &h).expect("gradient");
        let fd = central_difference(w.as_slice(), FD_STEP, |ww| {
            let wm = Matrix::new(e, c, ww.to_vec()).unwrap();
            let x = wm.matmul(&px).unwrap();
            let y = wm.matmul(&py).unwrap();
            contrastive_loss(&x, &y, label, &sol, &h).unwrap()
        });
        let err = rel_error(g.as_slice(), &fd);
        let nonzero = norm_sq(g.as_slice()) > 0.0;
        let regime_ok = match regime {
            GradRegime::DifferentInactive => !nonzero,
            _ => nonzero || sol.distance == 0.0,
        };
        if regime_ok {
            err
        } else {
            f64::INFINITY
        }
    });
    let worst = errors.iter().copied().fold(0.0, f64::max);
    outcome(
        "embedding_gradients",
        worst <= FD_TOL,
        format!("{GRADIENT_INSTANCES} instances over both labels and hinge regimes, worst relative error {worst:.2e}"),
    )
}

struct PairInstance {
    x: Matrix,
    y: Matrix,
    h: Hyperparams,
    label: PairLabel,
}

fn pair_instance(base: u64, i: usize) -> (PairInstance, ChaCha8Rng) {
    let mut rng = instance_rng(base, i);
    let d = rng.random_range(2..=8);
    let (m, n) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let x = gaussian_matrix(d, m, &mut rng);
    let y = gaussian_matrix(d, n, &mut rng);
    let h = recommended_hyperparams(&mut rng);
    let label = if i.is_multiple_of(2) {
        PairLabel::Same
    } else {
        PairLabel::Different
    };
    (PairInstance { x, y, h, label }, rng)
}

const INVARIANT_INSTANCES: usize = 50;

fn summarize(name: &'static str, worst: f64, tol: f64, what: &str) -> CheckOutcome {
    outcome(
        name,
        worst <= tol,
        format!("{INVARIANT_INSTANCES} instances, worst {what} {worst:.2e} (tolerance {tol:.0e})"),
    )
}

fn translation_invariance(exec: Exec) -> CheckOutcome {
    let errs = exec.map_range(INVARIANT_INSTANCES, |i| {
        let (p, mut rng) = pair_instance(0x7EA, i);
        let t: Vec<f64> = (0..p.x.rows())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let shift = |a: &Matrix| Matrix::from_fn(a.rows(), a.cols(), |r, c| a[(r, c)] + t[r]);
        let base = solve_pair(&p.x, &p.y, p.label, &p.h).expect("solve");
        let moved = solve_pair(&shift(&p.x), &shift(&p.y), p.label, &p.h).expect("solve");
        let kb = kkt_qp_solve(&p.x, &p.y, p.h.mu(p.label), p.h.lambda1, p.h.lambda2).expect("kkt");
        let km = kkt_qp_solve(
            &shift(&p.x),
            &shift(&p.y),
            p.h.mu(p.label),
            p.h.lambda1,
            p.h.lambda2,
        )
        .expect("kkt");
        let admm = (moved.distance - base.distance).abs() / base.distance.max(1e-12) / 1e-8;
        let kkt = (km.distance - kb.distance).abs() / kb.distance.max(1e-12) / 1e-9;
        let kkt_coef =
            max_abs_diff(&km.alpha, &kb.alpha).max(max_abs_diff(&km.beta, &kb.beta)) / 1e-9;
        admm.max(kkt).max(kkt_coef)
    });
    // errors are scaled by their tolerances: ADMM 1e-8, KKT 1e-9
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        "translation_invariance",
        worst <= 1.0,
        format!("{INVARIANT_INSTANCES} instances, worst error / tolerance {worst:.3}"),
    )
}

fn permutation_equivariance(exec: Exec) -> CheckOutcome {
    let errs = exec.map_range(INVARIANT_INSTANCES, |i| {
        let (p, mut rng) = pair_instance(0x9E4, i);
        let mut perm: Vec<usize> = (0..p.x.cols()).collect();
        perm.shuffle(&mut rng);
        let xp = p.x.select_columns(&perm);
        let base = solve_pair(&p.x, &p.y, p.label, &p.h).expect("solve");
        let moved = solve_pair(&xp, &p.y, p.label, &p.h).expect("solve");
        let permuted: Vec<f64> = perm.iter().map(|&k| base.alpha[k]).collect();
        let coef = max_abs_diff(&moved.alpha, &permuted);
        let dist = (moved.distance - base.distance).abs() / base.distance.max(1e-12);
        coef.max(dist)
    });
    summarize(
        "permutation_equivariance",
        errs.iter().copied().fold(0.0, f64::max),
        1e-8,
        "coefficient / relative distance error",
    )
}

fn swap_symmetry(exec: Exec) -> CheckOutcome {
    let errs = exec.map_range(INVARIANT_INSTANCES, |i| {
        let (mut p, _) = pair_instance(0x5A4, i);
        p.h.lambda2 = p.h.lambda1;
        let xy = solve_pair(&p.x, &p.y, p.label, &p.h).expect("solve");
        let yx = solve_pair(&p.y, &p.x, p.label, &p.h).expect("solve");
        let dist = (xy.distance - yx.distance).abs() / xy.distance.max(1e-12) / 1e-8;
        let coef = max_abs_diff(&xy.alpha, &yx.beta).max(max_abs_diff(&xy.beta, &yx.alpha)) / 1e-6;
        dist.max(coef)
    });
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        "swap_symmetry",
        worst <= 1.0,
        format!("{INVARIANT_INSTANCES} instances with lambda1 = lambda2, worst error / tolerance {worst:.3}"),
    )
}

fn duplicate_columns(exec: Exec) -> CheckOutcome {
    let errs = exec.map_range(INVARIANT_INSTANCES, |i| {
        let (p, mut rng) = pair_instance(0xD0B, i);
        let src = rng.random_range(0..p.x.cols());
        let mut idx: Vec<usize> = (0..p.x.cols()).collect();
        idx.push(src);
        let x = p.x.select_columns(&idx);
        let s = solve_pair(&x, &p.y, p.label, &p.h).expect("solve");
        (s.alpha[src] - s.alpha[x.cols() - 1]).abs()
    });
    summarize(
        "duplicate_column_weights",
        errs.iter().copied().fold(0.0, f64::max),
        1e-6,
        "weight gap",
    )
}

fn solver_determinism(exec: Exec) -> CheckOutcome {
    let same = exec.map_range(INVARIANT_INSTANCES, |i| {
        let (p, _) = pair_instance(0xDE7, i);
        let a = solve_pair(&p.x, &p.y, p.label, &p.h).expect("solve");
        let b = solve_pair(&p.x, &p.y, p.label, &p.h).expect("solve");
        a.alpha
            .iter()
            .zip(&b.alpha)
            .all(|(u, v)| u.to_bits() == v.to_bits())
            && a.beta
                .iter()
                .zip(&b.beta)
                .all(|(u, v)| u.to_bits() == v.to_bits())
            && a.distance.to_bits() == b.distance.to_bits()
            && a.iterations == b.iterations
    });
    let bad = same.iter().filter(|s| !**s).count();
    outcome(
        "solver_determinism",
        bad == 0,
        format!("{INVARIANT_INSTANCES} repeated solves, {bad} not bit-identical"),
    )
}

fn pooling_and_attention_permutation(exec: Exec) -> CheckOutcome {
    let ok = exec.map_range(INVARIANT_INSTANCES, |i| {
        let mut rng = instance_rng(0x6A9, i);
        let (h, w, c) = (
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=6),
        );
        let data: Vec<f64> = (0..h * w * c)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let map = FeatureMap::new(h, w, c, data).unwrap();
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let shuffled = map.permute_positions(&perm).unwrap();
        let gap_ok = gap(&map) == gap(&shuffled);

        let mut params = AttentionParams::identity_init(c, i as u64);
        params.output = gaussian_matrix(c, params.query.rows(), &mut rng);
        let out = nonlocal_attention(&map, &params).unwrap();
        let out_shuffled = nonlocal_attention(&shuffled, &params).unwrap();
        let shape_ok = (out.height(), out.width(), out.channels()) == (h, w, c);
        gap_ok && shape_ok && out.permute_positions(&perm).unwrap() == out_shuffled
    });
    let bad = ok.iter().filter(|v| !**v).count();
    outcome(
        "gap_and_attention_permutation",
        bad == 0,
        format!("{INVARIANT_INSTANCES} random maps, {bad} not exactly permutation-consistent"),
    )
}
