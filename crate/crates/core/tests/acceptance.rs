//! Acceptance gate. Every criterion prints one PASS/FAIL line; the test fails
//! if any criterion fails. Oracles (finite differences, transformed inputs)
//! live here rather than in the library.

use std::time::{Duration, Instant};

use dcscr::features::{gap, nonlocal_attention, softmax_xent_raw, AttentionParams, FeatureMap};
use dcscr::harness::{
    classify_datasets, gen_synthetic, verification_metrics, verify_pairs_file, Dataset, PairsFile,
    SynthConfig,
};
use dcscr::numkernel::kkt_qp_solve;
use dcscr::training::{
    contrastive_loss, loss_grad_embedding, pretrain_level1, train_level2, TrainConfig,
};
use dcscr::{solve_pair, Exec, Hyperparams, Matrix, Model, ModelConfig, PairLabel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Report {
    passed: bool,
    detail: String,
    /// Bit patterns of every number the criterion produced.
    fingerprint: Vec<u64>,
}

fn rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gauss(r))
}

fn random_hyperparams(r: &mut ChaCha8Rng) -> Hyperparams {
    Hyperparams {
        mu1: r.random_range(0.0003..=0.03),
        mu2: r.random_range(0.0003..=0.03),
        lambda1: r.random_range(0.01..=0.3),
        lambda2: r.random_range(0.01..=0.3),
        ..Hyperparams::default()
    }
}

fn random_label(r: &mut ChaCha8Rng) -> PairLabel {
    if r.random_bool(0.5) {
        PairLabel::Same
    } else {
        PairLabel::Different
    }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn bits(v: &[f64]) -> impl Iterator<Item = u64> + '_ {
    v.iter().map(|x| x.to_bits())
}

fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

// 1 and 2 share the oracle sweep.
fn oracle_sweep(exec: Exec) -> (Report, Report) {
    let start = Instant::now();
    let results = exec.map_range(200, |i| {
        let mut r = rng(1001, i);
        let d = r.random_range(1..=8);
        let (m, n) = (r.random_range(1..=6), r.random_range(1..=6));
        let x = random_matrix(d, m, &mut r);
        let y = random_matrix(d, n, &mut r);
        let h = random_hyperparams(&mut r);
        let label = random_label(&mut r);
        let sol = solve_pair(&x, &y, label, &h).expect("solve");
        let kkt = kkt_qp_solve(&x, &y, h.mu(label), h.lambda1, h.lambda2).expect("kkt");
        (sol, kkt)
    });
    let elapsed = start.elapsed();

    let mut worst_coef = 0.0_f64;
    let mut worst_dist = 0.0_f64;
    let mut worst_residual = 0.0_f64;
    let mut converged = 0;
    let mut fingerprint = Vec::new();
    for (sol, kkt) in &results {
        worst_coef = worst_coef
            .max(max_gap(&sol.alpha, &kkt.alpha))
            .max(max_gap(&sol.beta, &kkt.beta));
        worst_dist =
            worst_dist.max((sol.distance - kkt.distance).abs() / kkt.distance.abs().max(1e-300));
        if sol.converged {
            converged += 1;
            let recomputed = (sum(&sol.alpha) - 1.0)
                .abs()
                .max((sum(&sol.beta) - 1.0).abs());
            let reported = sol
                .constraint_residuals
                .0
                .abs()
                .max(sol.constraint_residuals.1.abs());
            worst_residual = worst_residual.max(recomputed).max(reported);
        }
        fingerprint.extend(bits(&sol.alpha));
        fingerprint.extend(bits(&sol.beta));
        fingerprint.push(sol.distance.to_bits());
        fingerprint.push(kkt.distance.to_bits());
    }
    let c1 = Report {
        passed: worst_coef <= 1e-5 && worst_dist <= 1e-5 && elapsed < Duration::from_secs(5),
        detail: format!(
            "200 instances, max coefficient gap {worst_coef:.2e}, max relative distance gap {worst_dist:.2e}, {elapsed:.2?}"
        ),
        fingerprint: fingerprint.clone(),
    };
    let c2 = Report {
        passed: converged > 0 && worst_residual <= 1e-8,
        detail: format!("{converged}/200 converged, max |sum - 1| {worst_residual:.2e}"),
        fingerprint,
    };
    (c1, c2)
}

fn central_difference(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let step = 1e-5;
    (0..x.len())
        .map(|k| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[k] += step;
            down[k] -= step;
            (f(&up) - f(&down)) / (2.0 * step)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = sum(&analytic.iter().map(|a| a * a).collect::<Vec<_>>())
        .sqrt()
        .max(sum(&numeric.iter().map(|a| a * a).collect::<Vec<_>>()).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn gradient_checks(exec: Exec) -> Report {
    let xent = exec.map_range(100, |i| {
        let mut r = rng(3003, i);
        let (k, dim) = (r.random_range(2..=6), r.random_range(1..=8));
        let head = random_matrix(k, dim, &mut r);
        let bias: Vec<f64> = (0..k).map(|_| gauss(&mut r)).collect();
        let z: Vec<f64> = (0..dim).map(|_| gauss(&mut r)).collect();
        let label = r.random_range(0..k);
        let out = softmax_xent_raw(&z, label, &head, &bias).unwrap();
        let loss = |z: &[f64], head: &Matrix, bias: &[f64]| {
            softmax_xent_raw(z, label, head, bias).unwrap().loss
        };
        let nz = central_difference(&z, |v| loss(v, &head, &bias));
        let nb = central_difference(&bias, |v| loss(&z, &head, v));
        let nh = central_difference(head.as_slice(), |v| {
            loss(&z, &Matrix::new(k, dim, v.to_vec()).unwrap(), &bias)
        });
        relative_error(&out.grad_input, &nz)
            .max(relative_error(&out.grad_bias, &nb))
            .max(relative_error(out.grad_head.as_slice(), &nh))
    });

    // instance i covers: 0 same pair, 1 different pair inside the margin,
    // 2 different pair beyond the margin
    let contrastive = exec.map_range(100, |i| {
        let mut r = rng(3004, i);
        let (c, e) = (r.random_range(1..=6), r.random_range(1..=6));
        let (m, n) = (r.random_range(1..=5), r.random_range(1..=5));
        let px = random_matrix(c, m, &mut r);
        let py = random_matrix(c, n, &mut r);
        let w = random_matrix(e, c, &mut r);
        let mut h = random_hyperparams(&mut r);
        let label = if i % 3 == 0 {
            PairLabel::Same
        } else {
            PairLabel::Different
        };
        let sol = solve_pair(&w.matmul(&px).unwrap(), &w.matmul(&py).unwrap(), label, &h).unwrap();
        match i % 3 {
            1 => h.margin = 2.0 * sol.distance + 1.0,
            2 => h.margin = 0.5 * sol.distance,
            _ => {}
        }
        let g = loss_grad_embedding(&px, &py, &w, label, &sol, &h).unwrap();
        let numeric = central_difference(w.as_slice(), |v| {
            let w = Matrix::new(e, c, v.to_vec()).unwrap();
            contrastive_loss(
                &w.matmul(&px).unwrap(),
                &w.matmul(&py).unwrap(),
                label,
                &sol,
                &h,
            )
            .unwrap()
        });
        let inactive_is_zero = i % 3 != 2 || g.as_slice().iter().all(|&v| v == 0.0);
        let active_is_nonzero = i % 3 == 2 || g.as_slice().iter().any(|&v| v != 0.0);
        if inactive_is_zero && active_is_nonzero {
            relative_error(g.as_slice(), &numeric)
        } else {
            f64::INFINITY
        }
    });
    let wx = xent.iter().copied().fold(0.0, f64::max);
    let wc = contrastive.iter().copied().fold(0.0, f64::max);
    Report {
        passed: wx <= 1e-4 && wc <= 1e-4,
        detail: format!(
            "softmax_xent worst {wx:.2e}, loss_grad_embedding worst {wc:.2e} (100 instances each)"
        ),
        fingerprint: xent
            .iter()
            .chain(&contrastive)
            .map(|v| v.to_bits())
            .collect(),
    }
}

struct Instance {
    x: Matrix,
    y: Matrix,
    h: Hyperparams,
    label: PairLabel,
    r: ChaCha8Rng,
}

fn instance(seed: u64, i: usize) -> Instance {
    let mut r = rng(seed, i);
    let d = r.random_range(2..=8);
    let (m, n) = (r.random_range(2..=6), r.random_range(2..=6));
    let x = random_matrix(d, m, &mut r);
    let y = random_matrix(d, n, &mut r);
    let h = random_hyperparams(&mut r);
    let label = random_label(&mut r);
    Instance { x, y, h, label, r }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn invariance(exec: Exec) -> Report {
    const N: usize = 100;
    // (translation, permutation coefficient, permutation distance, symmetry, duplicate)
    let rows = exec.map_range(N, |i| {
        let mut t = instance(4004, i);
        let base = solve_pair(&t.x, &t.y, t.label, &t.h).unwrap();

        let shift: Vec<f64> = (0..t.x.rows()).map(|_| 3.0 * gauss(&mut t.r)).collect();
        let moved = |a: &Matrix| Matrix::from_fn(a.rows(), a.cols(), |r, c| a[(r, c)] + shift[r]);
        let translated = solve_pair(&moved(&t.x), &moved(&t.y), t.label, &t.h).unwrap();

        let mut perm: Vec<usize> = (0..t.x.cols()).collect();
        perm.shuffle(&mut t.r);
        let permuted = solve_pair(&t.x.select_columns(&perm), &t.y, t.label, &t.h).unwrap();
        let expected: Vec<f64> = perm.iter().map(|&k| base.alpha[k]).collect();

        let hs = Hyperparams {
            lambda2: t.h.lambda1,
            ..t.h
        };
        let xy = solve_pair(&t.x, &t.y, t.label, &hs).unwrap();
        let yx = solve_pair(&t.y, &t.x, t.label, &hs).unwrap();

        let src = t.r.random_range(0..t.x.cols());
        let mut cols: Vec<usize> = (0..t.x.cols()).collect();
        cols.push(src);
        let dup = solve_pair(&t.x.select_columns(&cols), &t.y, t.label, &t.h).unwrap();

        [
            relative(translated.distance, base.distance),
            max_gap(&permuted.alpha, &expected),
            relative(permuted.distance, base.distance),
            relative(yx.distance, xy.distance),
            (dup.alpha[src] - dup.alpha[t.x.cols()]).abs(),
        ]
    });
    let worst = |k: usize| rows.iter().map(|r| r[k]).fold(0.0, f64::max);
    let tolerances = [1e-8, 1e-8, 1e-8, 1e-8, 1e-6];
    let solver_ok = (0..5).all(|k| worst(k) <= tolerances[k]);

    let exact = exec.map_range(N, |i| {
        let mut r = rng(4005, i);
        let (h, w, c) = (
            r.random_range(1..=4),
            r.random_range(1..=4),
            r.random_range(1..=8),
        );
        let map =
            FeatureMap::new(h, w, c, (0..h * w * c).map(|_| gauss(&mut r)).collect()).unwrap();
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut r);
        let shuffled = map.permute_positions(&perm).unwrap();
        let mut params = AttentionParams::identity_init(c, i as u64);
        params.output = random_matrix(c, params.query.rows(), &mut r);
        let a = nonlocal_attention(&map, &params).unwrap();
        let b = nonlocal_attention(&shuffled, &params).unwrap();
        gap(&map) == gap(&shuffled)
            && a.permute_positions(&perm).unwrap() == b
            && gap(&a) == gap(&b)
    });
    let exact_ok = exact.iter().all(|&ok| ok);

    Report {
        passed: solver_ok && exact_ok,
        detail: format!(
            "{N} instances: translation {:.1e}, permutation alpha {:.1e} distance {:.1e}, swap symmetry {:.1e}, duplicate columns {:.1e}; GAP/attention exact: {exact_ok}",
            worst(0),
            worst(1),
            worst(2),
            worst(3),
            worst(4)
        ),
        fingerprint: rows.iter().flatten().map(|v| v.to_bits()).collect(),
    }
}

fn trivial_metric() -> Report {
    let h = Hyperparams::default();
    let a = Matrix::column_vector(&[0.0, 0.0]);
    let b = Matrix::column_vector(&[3.0, 4.0]);
    let singleton = [PairLabel::Same, PairLabel::Different]
        .map(|l| solve_pair(&a, &b, l, &h).unwrap().distance);

    let mut r = rng(5005, 0);
    let mut coincident = Vec::new();
    for _ in 0..20 {
        let (d, m) = (r.random_range(1..=8), r.random_range(1..=6));
        let x = random_matrix(d, m, &mut r);
        let hs = Hyperparams {
            lambda2: h.lambda1,
            ..h
        };
        coincident.push(
            solve_pair(&x, &x, random_label(&mut r), &hs)
                .unwrap()
                .distance,
        );
        coincident.push(
            solve_pair(&x, &x, random_label(&mut r), &h)
                .unwrap()
                .distance,
        );
    }
    let worst = coincident.iter().copied().fold(0.0, f64::max);
    Report {
        passed: singleton == [25.0, 25.0] && worst <= 1e-8,
        detail: format!("singletons {singleton:?}, worst coincident distance {worst:.1e}"),
        fingerprint: singleton
            .iter()
            .chain(&coincident)
            .map(|v| v.to_bits())
            .collect(),
    }
}

fn end_to_end_classification(exec: Exec) -> Report {
    let start = Instant::now();
    let data = gen_synthetic(&SynthConfig {
        classes: 5,
        sets_per_class: 4,
        frames_per_set: 20,
        dim: 16,
        separation: 10.0,
        noise: 0.3,
        seed: 6006,
    })
    .unwrap();
    let (gallery, probes) = data.split_gallery_probe();
    let model = Model::with_classes(
        ModelConfig::new(16, 5).with_grid(2, 2).with_seed(6),
        data.class_names(),
    )
    .unwrap();
    let result = classify_datasets(
        &gallery,
        &probes,
        Some(&model),
        &Hyperparams::default(),
        PairLabel::Same,
        exec,
    )
    .unwrap();
    let elapsed = start.elapsed();
    Report {
        passed: gallery.sets.len() == 5
            && result.total == 15
            && result.accuracy == 1.0
            && elapsed < Duration::from_secs(30),
        detail: format!(
            "{}/{} probes correct, {elapsed:.2?}",
            result.correct, result.total
        ),
        fingerprint: result
            .probes
            .iter()
            .flat_map(|p| p.class_distances.iter().map(|(_, d)| d.to_bits()))
            .collect(),
    }
}

fn split_train_eval(data: &Dataset, per_class: usize, train: usize) -> (Dataset, Dataset, Dataset) {
    let (t, e): (Vec<_>, Vec<_>) = data
        .sets
        .iter()
        .enumerate()
        .partition(|(i, _)| i % per_class < train);
    let t = data.with_sets(t.into_iter().map(|(_, s)| s.clone()).collect());
    let (gallery, probes) = data
        .with_sets(e.into_iter().map(|(_, s)| s.clone()).collect())
        .split_gallery_probe();
    (t, gallery, probes)
}

fn training_efficacy(exec: Exec) -> Report {
    // per class: 10 training sets, 1 gallery set, 9 probes
    let per_class = 20;
    let data = gen_synthetic(&SynthConfig {
        classes: 4,
        sets_per_class: per_class,
        frames_per_set: 10,
        dim: 32,
        separation: 2.0,
        noise: 1.0,
        seed: 1,
    })
    .unwrap();
    let (train, gallery, probes) = split_train_eval(&data, per_class, 10);
    let model = Model::with_classes(
        ModelConfig::new(32, 4).with_grid(1, 1).with_seed(3),
        data.class_names(),
    )
    .unwrap();
    let h = Hyperparams::default();
    let config = TrainConfig {
        epochs_level1: 30,
        epochs_level2: 30,
        ..TrainConfig::default()
    };
    let accuracy = |m: &Model| {
        classify_datasets(&gallery, &probes, Some(m), &h, PairLabel::Same, exec)
            .unwrap()
            .accuracy
    };

    let before = accuracy(&model);
    let (pretrained, level1) = pretrain_level1(&train, &model, &config, exec).unwrap();
    let (trained, level2) = train_level2(&train, &pretrained, &config, &h, exec).unwrap();
    let after = accuracy(&trained);
    let (first, last) = (level2.first_loss().unwrap(), level2.last_loss().unwrap());

    let mut fingerprint: Vec<u64> = level1
        .records
        .iter()
        .chain(&level2.records)
        .map(|r| r.mean_loss.to_bits())
        .collect();
    fingerprint.extend(bits(trained.embedding.as_slice()));
    fingerprint.extend([before.to_bits(), after.to_bits()]);
    Report {
        passed: level2.records.len() == 30 && last < first && after >= before,
        detail: format!(
            "contrastive loss {first:.6} -> {last:.6}, accuracy {before:.3} -> {after:.3}"
        ),
        fingerprint,
    }
}

fn verification(exec: Exec) -> Report {
    let data = gen_synthetic(&SynthConfig {
        classes: 4,
        sets_per_class: 4,
        frames_per_set: 10,
        dim: 16,
        separation: 10.0,
        noise: 0.3,
        seed: 8008,
    })
    .unwrap();
    let pairs = PairsFile::all_pairs(&data);
    let model = Model::with_classes(
        ModelConfig::new(16, 4).with_grid(2, 2).with_seed(8),
        data.class_names(),
    )
    .unwrap();
    let separable = verify_pairs_file(
        &pairs,
        Some(&model),
        &Hyperparams::default(),
        &[0.5, 1.0, 2.0],
        PairLabel::Different,
        exec,
    )
    .unwrap();

    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.same).collect();
    let constant = verification_metrics(&vec![1.25; same.len()], &same, &[1.0]).unwrap();

    let endpoints = |roc: &[dcscr::harness::RocPoint]| {
        let (f, l) = (roc.first().unwrap(), roc.last().unwrap());
        (f.fpr, f.tpr) == (0.0, 0.0) && (l.fpr, l.tpr) == (1.0, 1.0)
    };
    let ok = separable.auc >= 0.99
        && (constant.auc - 0.5).abs() <= 1e-12
        && endpoints(&separable.roc)
        && endpoints(&constant.roc);
    let mut fingerprint: Vec<u64> = bits(&separable.distances).collect();
    fingerprint.extend([separable.auc.to_bits(), constant.auc.to_bits()]);
    Report {
        passed: ok,
        detail: format!(
            "{} pairs, separable AUC {:.6}, constant-score AUC {}, endpoints exact: {}",
            same.len(),
            separable.auc,
            constant.auc,
            endpoints(&separable.roc) && endpoints(&constant.roc)
        ),
        fingerprint,
    }
}

fn criteria_1_to_8(exec: Exec) -> Vec<Report> {
    let (c1, c2) = oracle_sweep(exec);
    vec![
        c1,
        c2,
        gradient_checks(exec),
        invariance(exec),
        trivial_metric(),
        end_to_end_classification(exec),
        training_efficacy(exec),
        verification(exec),
    ]
}

#[test]
fn acceptance_criteria() {
    let names = [
        "ADMM matches the KKT oracle",
        "constraint satisfaction",
        "gradient correctness",
        "invariance suite",
        "trivial metric correctness",
        "end-to-end synthetic classification",
        "training efficacy",
        "verification metrics",
        "determinism",
    ];
    let first = criteria_1_to_8(Exec::default());
    let second = criteria_1_to_8(Exec::default());
    let sequential = criteria_1_to_8(Exec::Sequential);
    let same_bits =
        |a: &[Report], b: &[Report]| a.iter().zip(b).all(|(x, y)| x.fingerprint == y.fingerprint);
    let deterministic = same_bits(&first, &second) && same_bits(&first, &sequential);

    let mut passed = Vec::new();
    for (i, r) in first.iter().enumerate() {
        println!(
            "criterion {} ({}): {} | {}",
            i + 1,
            names[i],
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
        passed.push(r.passed);
    }
    println!(
        "criterion 9 ({}): {} | repeated runs and sequential vs parallel bit-identical: {deterministic}",
        names[8],
        if deterministic { "PASS" } else { "FAIL" }
    );
    passed.push(deterministic);

    let failed: Vec<usize> = passed
        .iter()
        .enumerate()
        .filter(|(_, p)| !**p)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
