//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! and prints one PASS/FAIL line per criterion; the process exits non-zero if
//! any criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcrec::config::{Ablation, TrainConfig};
use dcrec::conformity::{kl_with_targets, mix_and_transform, transform_on_tape};
use dcrec::dataio::{leave_one_out, prepare, synthesize, SplitDataset, SyntheticSpec, UserSequence};
use dcrec::evaluation::{export_embeddings, rank_metrics, EmbeddingView, CUTOFFS};
use dcrec::graph_encoder::{perturbed_operator_rows, propagate_values};
use dcrec::graphs::{
    build_cointeraction_graph, build_transition_graph, normalize, perturb_for_user, PerturbationView, SparseGraph,
};
use dcrec::model::{draw_samples, forward_batch, init_model_params, ForwardOptions, Graphs, Sample};
use dcrec::params::ParamStore;
use dcrec::tape::{Mat, Tape};
use dcrec::theory::run_checks;
use dcrec::trainer::{restore, train};

// tolerances and budgets
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const FD_STEP: f64 = 1e-6;
const MEAN_OMEGA_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-12;
const DETERMINISM_TOL: f64 = 1e-6;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_WINS_NEEDED: usize = 2;

type Outcome = Result<(bool, String), String>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 theory harness", theory_harness),
        ("3 conformity contract", conformity_contract),
        ("4 graph oracles", graph_oracles),
        ("5 metric oracles", metric_oracles),
        ("6 desk-scale debiasing direction", desk_direction),
        ("7 ablation machinery", ablation_machinery),
        ("8 determinism", determinism),
    ];
    let only: Option<String> = std::env::var("DCREC_ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, check) in criteria {
        if let Some(o) = &only {
            if !o.split(',').any(|k| name.starts_with(k.trim())) {
                continue;
            }
        }
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- fixtures

fn tiny_split() -> SplitDataset {
    let raw: Vec<Vec<usize>> = vec![
        vec![1, 2, 3, 4, 5, 6],
        vec![2, 3, 4, 1, 6],
        vec![4, 5, 6, 2, 3, 1],
        vec![6, 1, 2, 5, 3],
        vec![3, 4, 5, 6, 1, 2],
    ];
    let seqs: Vec<UserSequence> = raw.into_iter().enumerate().map(|(u, s)| UserSequence::new(u, s, 6)).collect();
    leave_one_out(&seqs, 6, 3)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        embed_dim: 4,
        heads: 2,
        transformer_layers: 1,
        gnn_layers: 1,
        ffn_hidden: 8,
        t_max: 4,
        dropout: 0.0,
        lambda1: 0.3,
        lambda2: 0.2,
        top_k: 3,
        ..TrainConfig::default()
    }
}

fn batch_total(config: &TrainConfig, graphs: &Graphs, params: &ParamStore, samples: &[Sample<'_>], options: ForwardOptions) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out = forward_batch(&mut tape, &bound, config, graphs, samples, &mut rng, options).expect("forward");
    tape.scalar_value(out.total)
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let split = tiny_split();
    let config = tiny_config();
    let graphs = Graphs::build(&split, config.top_k).map_err(err)?;
    // larger-than-default weights so every term has a visible gradient
    let mut params = init_model_params(&config, split.catalog_size, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (_, m) in params.iter_mut() {
        m.mapv_inplace(|v| v * 10.0 + rng.random_range(-0.05..0.05));
    }
    if let Some(e) = params.get_mut(dcrec::seq_encoder::ITEM_EMBEDDINGS) {
        e.row_mut(0).fill(0.0);
    }
    let mut srng = ChaCha8Rng::seed_from_u64(0);
    let samples = draw_samples(&split, true, &mut srng);
    let options = ForwardOptions::default();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut prng = ChaCha8Rng::seed_from_u64(99);
    let out = forward_batch(&mut tape, &bound, &config, &graphs, &samples, &mut prng, options).map_err(err)?;
    let grads = tape.backward(out.total);
    let analytic = bound.collect_grads(&grads, &params);

    let mut worst = (String::new(), 0.0f64);
    let mut tensors = 0;
    for (name, value) in params.iter() {
        let mut numeric = Mat::zeros(value.dim());
        for idx in 0..value.len() {
            let (r, c) = (idx / value.ncols(), idx % value.ncols());
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[[r, c]] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[[r, c]] -= FD_STEP;
            let fp = batch_total(&config, &graphs, &plus, &samples, options);
            let fm = batch_total(&config, &graphs, &minus, &samples, options);
            numeric[[r, c]] = (fp - fm) / (2.0 * FD_STEP);
        }
        let a = analytic.get(name).ok_or_else(|| format!("no gradient for {name}"))?;
        let diff = (a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        if rel > worst.1 {
            worst = (name.to_string(), rel);
        }
        tensors += 1;
    }
    let elapsed = start.elapsed();
    let ok = worst.1 < GRAD_REL_TOL && elapsed < GRAD_BUDGET;
    Ok((ok, format!("{tensors} tensors, worst relative error {:.2e} ({}), {:.1}s", worst.1, worst.0, elapsed.as_secs_f64())))
}

// ---------------------------------------------------------------- 2

fn theory_harness() -> Outcome {
    let summary = run_checks(0.4, 7).map_err(err)?;
    let failing: Vec<String> = summary.checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let detail = if failing.is_empty() {
        format!("{} checks passed", summary.checks.len())
    } else {
        format!("failing: {}", failing.join("; "))
    };
    Ok((summary.passed(), detail))
}

// ---------------------------------------------------------------- 3

fn conformity_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mu_c = 0.5;
    let mut worst_mean = 0.0f64;
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.random_range(256..600);
        let raw: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let weights = mix_and_transform(&raw, mu_c).map_err(err)?;
        let mean = weights.iter().map(|w| w.0).sum::<f64>() / n as f64;
        worst_mean = worst_mean.max((mean - mu_c).abs());
        let mut order: Vec<usize> = (0..n).collect();
        let m = |i: usize| (raw[i][0] + raw[i][1] + raw[i][2]) / 3.0;
        order.sort_by(|&a, &b| m(a).total_cmp(&m(b)));
        monotone &= order.windows(2).all(|w| weights[w[0]].0 <= weights[w[1]].0);
        monotone &= weights.iter().all(|&(w, p)| (p - (1.0 - w).clamp(0.0, 1.0)).abs() == 0.0);
    }
    // on-tape path with an explicit ω column
    let mut tape = Tape::new();
    let col = Array2::from_shape_fn((300, 1), |(i, _)| ((i * 37) % 101) as f64 / 50.0 - 1.0);
    let leaf = tape.leaf(col);
    let (omega, _) = transform_on_tape(&mut tape, leaf, mu_c);
    let omegas: Vec<f64> = tape.value(omega).iter().copied().collect();
    let tape_mean = omegas.iter().sum::<f64>() / omegas.len() as f64;
    worst_mean = worst_mean.max((tape_mean - mu_c).abs());
    let kl = kl_with_targets(&omegas, &omegas);
    let ok = worst_mean < MEAN_OMEGA_TOL && monotone && kl == 0.0;
    Ok((ok, format!("max |mean ω − μ_c| {worst_mean:.2e}, monotone {monotone}, KL(φ=ω) {kl}")))
}

// ---------------------------------------------------------------- 4

struct Instance {
    nodes: usize,
    sequences: Vec<Vec<usize>>,
    k: usize,
    base: Mat,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let items = rng.random_range(5..=49);
    let users = rng.random_range(3..=25);
    let sequences = (0..users)
        .map(|_| {
            let len = rng.random_range(2..=12);
            (0..len).map(|_| rng.random_range(1..=items)).collect()
        })
        .collect();
    let d = rng.random_range(2..=6);
    let mut base = Mat::from_shape_fn((items + 1, d), |_| rng.random_range(-1.0..1.0));
    base.row_mut(0).fill(0.0);
    Instance { nodes: items + 1, sequences, k: rng.random_range(1..=6), base }
}

fn dense_transition(seqs: &[Vec<usize>], n: usize) -> Mat {
    let mut a = Mat::zeros((n, n));
    for s in seqs {
        let mut seen = BTreeSet::new();
        for w in s.windows(2) {
            if w[0] != w[1] {
                seen.insert((w[0].min(w[1]), w[0].max(w[1])));
            }
        }
        for (i, j) in seen {
            a[[i, j]] += 1.0;
            a[[j, i]] += 1.0;
        }
    }
    a
}

fn dense_cointeraction(seqs: &[Vec<usize>], n: usize, k: usize) -> Mat {
    let mut r = Mat::zeros((seqs.len(), n));
    for (u, s) in seqs.iter().enumerate() {
        for &i in s {
            r[[u, i]] = 1.0;
        }
    }
    let mut c = r.t().dot(&r);
    for i in 0..n {
        c[[i, i]] = 0.0;
    }
    let mut keep = Mat::zeros((n, n));
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| c[[i, j]] > 0.0).collect();
        cand.sort_by(|&a, &b| c[[i, b]].total_cmp(&c[[i, a]]).then(a.cmp(&b)));
        for &j in cand.iter().take(k) {
            keep[[i, j]] = c[[i, j]];
            keep[[j, i]] = c[[i, j]];
        }
    }
    keep
}

fn dense_normalize(a: &Mat) -> Mat {
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Mat::from_shape_fn(a.dim(), |(i, j)| {
        if deg[i] > 0.0 && deg[j] > 0.0 {
            a[[i, j]] / (deg[i].sqrt() * deg[j].sqrt())
        } else {
            0.0
        }
    })
}

fn layer_mean_operator(norm: &Mat, layers: usize) -> Mat {
    let n = norm.nrows();
    let mut power = Mat::eye(n);
    let mut acc = Mat::eye(n);
    for _ in 0..layers {
        power = power.dot(norm);
        acc = acc + &power;
    }
    acc / (layers + 1) as f64
}

fn max_gap(a: &Mat, b: &Mat) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dense_of(g: &SparseGraph) -> Mat {
    g.adjacency().to_dense()
}

fn graph_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 5];
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        let slices = || inst.sequences.iter().map(|s| s.as_slice());
        let t = build_transition_graph(slices(), inst.nodes).map_err(err)?;
        let t_dense = dense_transition(&inst.sequences, inst.nodes);
        worst[0] = worst[0].max(max_gap(&dense_of(&t), &t_dense));

        let c = build_cointeraction_graph(slices(), inst.nodes, inst.k).map_err(err)?;
        worst[1] = worst[1].max(max_gap(&dense_of(&c), &dense_cointeraction(&inst.sequences, inst.nodes, inst.k)));

        let tn = normalize(&t).map_err(err)?;
        let cn = normalize(&c).map_err(err)?;
        worst[2] = worst[2]
            .max(max_gap(&dense_of(&tn), &dense_normalize(&t_dense)))
            .max(max_gap(&dense_of(&cn), &dense_normalize(&dense_of(&c))));

        // perturbation: drop one user's transitions
        let user = rng.random_range(0..inst.sequences.len());
        let others: Vec<Vec<usize>> =
            inst.sequences.iter().enumerate().filter(|(u, _)| *u != user).map(|(_, s)| s.clone()).collect();
        let expect = dense_normalize(&dense_transition(&others, inst.nodes));
        let pert = perturb_for_user(&t, user, &inst.sequences[user]).map_err(err)?;
        let view = PerturbationView::new(&t, &inst.sequences[user]).map_err(err)?;
        let mut view_dense = Mat::zeros((inst.nodes, inst.nodes));
        for i in 0..inst.nodes {
            for (j, w) in view.normalized_row(i) {
                view_dense[[i, j]] = w;
            }
        }
        let all: Vec<usize> = (0..inst.nodes).collect();
        let op_rows = perturbed_operator_rows(&view, &all, 2);
        let mut op_dense = Mat::zeros((inst.nodes, inst.nodes));
        for (i, row) in op_rows.iter().enumerate() {
            for &(j, w) in row {
                op_dense[[i, j]] += w;
            }
        }
        worst[3] = worst[3]
            .max(max_gap(&dense_of(&pert.normalized), &expect))
            .max(max_gap(&view_dense, &expect))
            .max(max_gap(&op_dense, &layer_mean_operator(&expect, 2)));

        // two-layer propagation on both graphs
        for (g, dense) in [(&tn, dense_of(&tn)), (&cn, dense_of(&cn))] {
            let got = propagate_values(g, &inst.base, 2).map_err(err)?;
            let expect = layer_mean_operator(&dense, 2).dot(&inst.base);
            worst[4] = worst[4].max(max_gap(&got.final_embeddings, &expect));
        }
    }
    let names = ["transition", "co-interaction", "normalization", "perturbation", "propagation"];
    let ok = worst.iter().all(|&w| w <= ORACLE_TOL);
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((ok, format!("50 instances; max gaps: {detail}")))
}

// ---------------------------------------------------------------- 5

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (users, items) = (200, 100);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for round in 0..50 {
        // coarse scores in half the rounds so ties occur
        let coarse = round % 2 == 0;
        let scores = Mat::from_shape_fn((users, items), |_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if coarse {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        });
        let targets: Vec<usize> = (0..users).map(|_| rng.random_range(1..=items)).collect();
        let got = rank_metrics(&scores, &targets, &CUTOFFS).map_err(err)?;
        let oracle_ranks: Vec<usize> = (0..users)
            .map(|u| {
                let mut order: Vec<usize> = (0..items).collect();
                order.sort_by(|&a, &b| scores[[u, b]].total_cmp(&scores[[u, a]]).then(a.cmp(&b)));
                order.iter().position(|&j| j == targets[u] - 1).unwrap() + 1
            })
            .collect();
        for &k in &CUTOFFS {
            let hr = oracle_ranks.iter().filter(|&&r| r <= k).count() as f64 / users as f64;
            let ndcg =
                oracle_ranks.iter().map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }).sum::<f64>() / users as f64;
            worst = worst.max((got.hr_at(k) - hr).abs()).max((got.ndcg_at(k) - ndcg).abs());
        }
        monotone &= got.hr_at(1) <= got.hr_at(5) && got.hr_at(5) <= got.hr_at(10);
        monotone &= got.ndcg_at(5) <= got.ndcg_at(10);
    }
    let ok = worst <= METRIC_TOL && monotone;
    Ok((ok, format!("50 matrices 200×100; max gap {worst:.1e}; monotone {monotone}")))
}

// ---------------------------------------------------------------- 6

/// Settings for the desk experiment: default architecture with a
/// shorter schedule and smaller batches so six runs fit the time budget on
/// one CPU core. λ₁ sits at the top of its search grid; at 1e-3 the
/// contrastive terms are too small for the ablation to matter.
fn desk_config(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig { batch_size: 64, max_epochs: 12, patience: 3, lambda1: 1e-2, seed, ablation, ..TrainConfig::default() }
}

fn desk_direction() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        user_count: 2000,
        item_count: 1000,
        mean_length: 12,
        conformity_fraction: 0.5,
        popularity_exponent: 1.1,
        seed: 42,
    };
    let log = synthesize(&spec).map_err(err)?;
    let base = desk_config(0, Ablation::None);
    let split = prepare(&log.log, base.t_max, base.min_length).map_err(err)?;
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in DESK_SEEDS {
        let mut ndcg = [0.0; 2];
        for (slot, ablation) in [Ablation::None, Ablation::AdaptiveCl].into_iter().enumerate() {
            let outcome = train(&desk_config(seed, ablation), &split, &log.log.id_map, None).map_err(err)?;
            ndcg[slot] = outcome.test.groups_metrics(&[1, 2], &[10]).ndcg_at(10);
        }
        if ndcg[0] >= ndcg[1] {
            wins += 1;
        }
        parts.push(format!("seed {seed}: full {:.4} vs w/o Adaptive-CL {:.4}", ndcg[0], ndcg[1]));
    }
    let elapsed = start.elapsed();
    let ok = wins >= DESK_WINS_NEEDED && elapsed < DESK_BUDGET;
    Ok((ok, format!("NDCG@10 on groups 1-2; {}; full wins {wins}/3; {:.0}s", parts.join("; "), elapsed.as_secs_f64())))
}

// ---------------------------------------------------------------- 7

struct BatchResult {
    parts: [f64; 5],
    grads: ParamStore,
}

fn run_batch(config: &TrainConfig, graphs: &Graphs, params: &ParamStore, samples: &[Sample<'_>], options: ForwardOptions) -> Result<BatchResult, String> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = forward_batch(&mut tape, &bound, config, graphs, samples, &mut rng, options).map_err(err)?;
    let grads = tape.backward(out.total);
    let b = out.bundle;
    Ok(BatchResult { parts: [b.l_rec, b.l_u, b.l_v, b.l_w, b.total], grads: bound.collect_grads(&grads, params) })
}

fn same_grads(a: &ParamStore, b: &ParamStore) -> bool {
    a.iter().all(|(name, m)| b.get(name).is_some_and(|o| o == m))
}

fn ablation_machinery() -> Outcome {
    let split = tiny_split();
    let config = TrainConfig { t_max: 6, ..tiny_config() };
    let graphs = Graphs::build(&split, config.top_k).map_err(err)?;
    let params = init_model_params(&config, split.catalog_size, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = draw_samples(&split, false, &mut rng);
    let with = |ablation: Ablation, options: ForwardOptions| {
        run_batch(&TrainConfig { ablation, ..config.clone() }, &graphs, &params, &samples, options)
    };
    let full = with(Ablation::None, ForwardOptions::default())?;
    let [rec, lu, lv, lw, _] = full.parts;
    let mut problems = Vec::new();

    let cl = with(Ablation::Cl, ForwardOptions::default())?;
    if !(cl.parts[1] == 0.0 && cl.parts[2] == 0.0 && cl.parts[0] == rec && cl.parts[3] == lw) {
        problems.push(format!("cl {:?}", cl.parts));
    }
    let t = with(Ablation::TCl, ForwardOptions::default())?;
    if !(t.parts[1] == 0.0 && t.parts[2] == lv && t.parts[0] == rec && t.parts[3] == lw) {
        problems.push(format!("t-cl {:?}", t.parts));
    }
    let c = with(Ablation::CCl, ForwardOptions::default())?;
    if !(c.parts[2] == 0.0 && c.parts[1] == lu && c.parts[0] == rec && c.parts[3] == lw) {
        problems.push(format!("c-cl {:?}", c.parts));
    }
    let adaptive = with(Ablation::AdaptiveCl, ForwardOptions::default())?;
    let pinned = with(Ablation::None, ForwardOptions { weight_override: Some(0.5), ..ForwardOptions::default() })?;
    let bits = |x: &[f64; 5]| x.map(f64::to_bits);
    if bits(&adaptive.parts) != bits(&pinned.parts) || !same_grads(&adaptive.grads, &pinned.grads) {
        problems.push(format!("adaptive-cl {:?} vs pinned {:?}", adaptive.parts, pinned.parts));
    }
    if adaptive.parts[1] == lu || adaptive.parts[2] == lv {
        problems.push("adaptive-cl did not change the contrastive terms".into());
    }
    let ok = problems.is_empty() && lu > 0.0 && lv > 0.0;
    let detail = if ok {
        format!("full L_u {lu:.6} L_v {lv:.6}; cl/t-cl/c-cl zero the right terms; adaptive-cl bit-identical to ω=ψ=0.5")
    } else {
        problems.join("; ")
    };
    Ok((ok, detail))
}

// ---------------------------------------------------------------- 8

fn small_corpus() -> Result<(SplitDataset, dcrec::dataio::IdMap), String> {
    let spec = SyntheticSpec {
        user_count: 150,
        item_count: 80,
        mean_length: 8,
        conformity_fraction: 0.5,
        popularity_exponent: 1.1,
        seed: 9,
    };
    let log = synthesize(&spec).map_err(err)?;
    let split = prepare(&log.log, 20, 3).map_err(err)?;
    Ok((split, log.log.id_map))
}

fn run_exports(config: &TrainConfig, split: &SplitDataset, ids: &dcrec::dataio::IdMap) -> Result<(f64, Vec<Vec<u8>>), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let outcome = train(config, split, ids, Some(dir.path())).map_err(err)?;
    let mut files = Vec::new();
    for name in [dcrec::trainer::CHECKPOINT, dcrec::trainer::LOSS_LOG, "conformity_epoch_1.csv"] {
        files.push(std::fs::read(dir.path().join(name)).map_err(|e| format!("{name}: {e}"))?);
    }
    let snapshot = restore(&outcome.checkpoint, split).map_err(err)?;
    for view in [EmbeddingView::HTable, EmbeddingView::X, EmbeddingView::Z, EmbeddingView::Fused] {
        files.push(export_embeddings(&snapshot, view, &ids.items).map_err(err)?.into_bytes());
    }
    let theory = tempfile::tempdir().map_err(err)?;
    let summary = run_checks(0.4, 7).map_err(err)?;
    let weights = dcrec::theory::sample_weights(2000, 0.5, 0.1, 7).map_err(err)?;
    let scaling = dcrec::theory::scaling_distribution_check(&weights, 0.5, 0.1, 0.4).map_err(err)?;
    dcrec::theory::write_outputs(theory.path(), &summary, &scaling).map_err(err)?;
    for name in ["curves.csv", "bands.csv", "theory_summary.json"] {
        files.push(std::fs::read(theory.path().join(name)).map_err(|e| format!("{name}: {e}"))?);
    }
    Ok((outcome.epochs[0].mean_total, files))
}

fn determinism() -> Outcome {
    let (split, ids) = small_corpus()?;
    let config = TrainConfig {
        embed_dim: 16,
        ffn_hidden: 32,
        t_max: 20,
        batch_size: 32,
        max_epochs: 2,
        diagnostics: true,
        seed: 5,
        ..TrainConfig::default()
    };
    let (loss_a, files_a) = run_exports(&config, &split, &ids)?;
    let (loss_b, files_b) = run_exports(&config, &split, &ids)?;
    // a different seed must actually change something
    let (loss_c, _) = run_exports(&TrainConfig { seed: 6, ..config.clone() }, &split, &ids)?;
    let stable = files_a == files_b;
    let ok = (loss_a - loss_b).abs() <= DETERMINISM_TOL && stable && loss_a != loss_c;
    Ok((ok, format!("epoch-1 loss {loss_a:.9} vs {loss_b:.9}; {} artifacts byte-stable {stable}", files_a.len())))
}
