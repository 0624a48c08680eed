//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails. Accepts an optional name filter.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use hiccap::autograd::Matrix;
use hiccap::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use hiccap::data_model::{Dims, Modality, ModalitySet};
use hiccap::encoders::{EncodedSequence, EncoderConfig};
use hiccap::gradcheck::check_gradients;
use hiccap::hca::{attention_pool, cross_attention, hca_head, HcaConfig, Fusion};
use hiccap::heads::nce_loss;
use hiccap::metrics::{average_precision, cohens_kappa, f1, macro_f1};
use hiccap::model::{ClipTensors, HiccapModel, ModelConfig, Task};
use hiccap::optim::OptimizerConfig;
use hiccap::params::{Initializer, ParamStore};
use hiccap::pretrain::{corrupt_batch, plan_corruption, run_pretraining, Objective, PretrainConfig};
use hiccap::rng::Stream;
use hiccap::synth::{generate_records, SynthSpec};
use hiccap::train_eval::{evaluate, finetune, mask_probe, predict, ClipSet, TrainConfig};

// ---- pinned tolerances and budgets ----
const GRAD_STEP: f64 = 1e-5;
const GRAD_MAX_REL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_INSTANCES: usize = 1000;
const ORACLE_TOL: f64 = 1e-9;
const NCE_N1_TOL: f64 = 1e-9;
const NCE_N2: f64 = 0.313262;
const NCE_N2_TOL: f64 = 1e-6;
const CORRUPTION_SAMPLES: usize = 10_000;
const REPLACEMENT_RATE: (f64, f64) = (0.48, 0.52);
const MODALITY_UNIFORM_TOL: f64 = 0.02;
const STRUCT_TOL: f64 = 1e-6;
const OVERFIT_STEPS: usize = 200;
const OVERFIT_BUDGET: Duration = Duration::from_secs(60);
const LEARN_MIN_MACRO_F1: f64 = 0.90;
const LEARN_MAX_EPOCHS: usize = 50;
const LEARN_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_GAP: f64 = 0.02;
const PRETRAIN_GAIN: f64 = 0.02;
const PRETRAIN_TIE: f64 = 0.01;
const MASK_MIN_DROP: f64 = 0.25;
const MASK_MAX_CHANGE: f64 = 0.05;
const TRACE_TOL: f64 = 1e-6;
const SEEDS: [u64; 3] = [0, 1, 2];

/// Width used by the desk-scale runs.
const D_MODEL: usize = 16;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn model_config(dims: Dims, d: usize, modalities: ModalitySet) -> ModelConfig {
    ModelConfig {
        dims,
        encoder: EncoderConfig {
            d_model: d,
            ..Default::default()
        },
        modalities,
        ..Default::default()
    }
}

struct Planted {
    train: ClipSet,
    val: ClipSet,
    test: ClipSet,
    dims: Dims,
}

fn planted(spec: &SynthSpec) -> Planted {
    let recs = generate_records(spec).expect("synthetic data");
    let all = ClipSet::from_records(&recs);
    let n = all.len();
    let (tr, va) = (n * 2 / 3, n * 5 / 6);
    let idx = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    Planted {
        train: all.subset(&idx(0, tr)),
        val: all.subset(&idx(tr, va)),
        test: all.subset(&idx(va, n)),
        dims: spec.dims,
    }
}

fn tiny_batch(dims: Dims, n: usize, seed: u64) -> Vec<ClipTensors> {
    let mut rng = Stream::new(seed, "acceptance/tiny");
    (0..n)
        .map(|_| {
            let seqs = Modality::ALL.map(|m| {
                let t = 2 + rng.index(4);
                Some(Matrix::from_shape_fn((t, dims.get(m)), |_| rng.normal()))
            });
            ClipTensors { seqs }
        })
        .collect()
}

// ---- criteria ----

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let dims = Dims { text: 5, audio: 4, video: 3 };
    let model = HiccapModel::new(model_config(dims, 8, ModalitySet::ALL), 11).map_err(|e| e.to_string())?;
    let clips = tiny_batch(dims, 4, 3);
    let refs: Vec<&ClipTensors> = clips.iter().collect();
    let gold = vec![vec![1, 0, 1, 0], vec![0, 0, 1, 1], vec![1, 1, 0, 0], vec![0, 1, 0, 1]];
    let matching = [[true, true, true], [false, false, true], [false, true, false], [true, false, false]];
    let rows = [0usize, 1, 2, 3];
    let checks = [
        (
            "fine-tuning",
            check_gradients(&model.store, GRAD_STEP, |g| {
                let reps = model.represent(g, &refs)?;
                Ok(model.finetune_loss(g, &reps, Task::Multitask, &gold)?.0)
            }),
        ),
        (
            "matching",
            check_gradients(&model.store, GRAD_STEP, |g| {
                let reps = model.represent(g, &refs)?;
                Ok(model.matching_loss(g, &reps, &matching)?.0)
            }),
        ),
        (
            "contrastive",
            check_gradients(&model.store, GRAD_STEP, |g| {
                let reps = model.represent(g, &refs)?;
                Ok(model.contrastive_loss(g, &reps, &rows)?.0)
            }),
        ),
    ];
    let mut parts = Vec::new();
    for (name, r) in checks {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        ensure(r.max_rel_error <= GRAD_MAX_REL, || {
            format!(
                "{name}: max rel error {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
                r.max_rel_error, r.worst, r.analytic, r.numeric
            )
        })?;
        parts.push(format!("{name} {:.2e} over {} entries", r.max_rel_error, r.entries));
    }
    let took = start.elapsed();
    ensure(took < GRAD_BUDGET, || format!("took {took:?}"))?;
    Ok(parts.join(", "))
}

fn brute_nce(u: &Matrix, v: &Matrix, tau: f64) -> f64 {
    let n = u.nrows();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..u.ncols()).map(|k| u[[i, k]] * v[[j, k]]).sum::<f64>() / tau;
            den += s.exp();
            if i == j {
                num += s.exp();
            }
        }
    }
    -(num / den).ln()
}

fn brute_f1(p: &[bool], g: &[bool]) -> Option<f64> {
    let tp = p.iter().zip(g).filter(|(a, b)| **a && **b).count() as f64;
    let pp = p.iter().filter(|a| **a).count() as f64;
    let gp = g.iter().filter(|a| **a).count() as f64;
    if pp == 0.0 && gp == 0.0 {
        return None;
    }
    let precision = if pp == 0.0 { 0.0 } else { tp / pp };
    let recall = if gp == 0.0 { 0.0 } else { tp / gp };
    Some(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

fn brute_ap(s: &[f64], g: &[bool]) -> Option<f64> {
    let rank = |i: usize| 1 + (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
    let pos: Vec<usize> = (0..s.len()).filter(|&i| g[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let sum: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            pos.iter().filter(|&&j| rank(j) <= r).count() as f64 / r as f64
        })
        .sum();
    Some(sum / pos.len() as f64)
}

fn brute_kappa(a: &[u8], b: &[u8]) -> Option<f64> {
    let n = a.len() as f64;
    let mut table = [[0.0f64; 3]; 3];
    for (x, y) in a.iter().zip(b) {
        table[*x as usize][*y as usize] += 1.0;
    }
    let po: f64 = (0..3).map(|k| table[k][k]).sum::<f64>() / n;
    let pe: f64 = (0..3)
        .map(|k| (table[k].iter().sum::<f64>() / n) * ((0..3).map(|r| table[r][k]).sum::<f64>() / n))
        .sum();
    if (1.0 - pe).abs() < 1e-12 {
        return (po == 1.0).then_some(1.0);
    }
    Some((po - pe) / (1.0 - pe))
}

fn formula_oracles() -> Outcome {
    let mut rng = Stream::new(7, "acceptance/oracles");
    let close = |a: f64, b: f64| (a - b).abs() <= ORACLE_TOL * (1.0 + b.abs());
    for i in 0..ORACLE_INSTANCES {
        let n = 1 + rng.index(6);
        let d = 1 + rng.index(4);
        let unit = |rng: &mut Stream| {
            let mut m = Matrix::from_shape_fn((n, d), |_| rng.normal());
            for mut row in m.rows_mut() {
                let norm = row.dot(&row).sqrt().max(1e-12);
                row /= norm;
            }
            m
        };
        let u = unit(&mut rng);
        let v = unit(&mut rng);
        let tau = rng.uniform_range(0.1, 2.0);
        let got = nce_loss(&u, &v, tau).map_err(|e| e.to_string())?;
        ensure(close(got, brute_nce(&u, &v, tau)), || format!("nce instance {i}: {got}"))?;

        let len = 1 + rng.index(12);
        let preds: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.4)).collect();
        let golds: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.4)).collect();
        match (f1(&preds, &golds, true), brute_f1(&preds, &golds)) {
            (Ok(a), Some(b)) => ensure(close(a, b), || format!("f1 instance {i}: {a} vs {b}"))?,
            (Err(_), None) => {}
            (a, b) => return Err(format!("f1 instance {i}: {a:?} vs {b:?}")),
        }

        let cats: Vec<(Vec<bool>, Vec<bool>)> = (0..4)
            .map(|_| {
                let p: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.5)).collect();
                let mut g: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.5)).collect();
                g[0] = true;
                (p, g)
            })
            .collect();
        let refs: Vec<(&[bool], &[bool])> = cats.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
        let want = cats.iter().map(|(p, g)| brute_f1(p, g).expect("gold positive")).sum::<f64>() / 4.0;
        let got = macro_f1(&refs).map_err(|e| e.to_string())?;
        ensure(close(got, want), || format!("macro f1 instance {i}: {got} vs {want}"))?;

        let scores: Vec<f64> = (0..len).map(|_| (rng.index(5) as f64) / 4.0).collect();
        match (average_precision(&scores, &golds), brute_ap(&scores, &golds)) {
            (Ok(a), Some(b)) => ensure(close(a, b), || format!("AP instance {i}: {a} vs {b}"))?,
            (Err(_), None) => {}
            (a, b) => return Err(format!("AP instance {i}: {a:?} vs {b:?}")),
        }

        let ra: Vec<u8> = (0..len).map(|_| rng.index(3) as u8).collect();
        let rb: Vec<u8> = (0..len).map(|_| if rng.bernoulli(0.6) { ra[0] } else { rng.index(3) as u8 }).collect();
        match (cohens_kappa(&ra, &rb), brute_kappa(&ra, &rb)) {
            (Ok(a), Some(b)) => ensure(close(a.kappa, b), || format!("kappa instance {i}: {} vs {b}", a.kappa))?,
            (Err(_), None) => {}
            (a, b) => return Err(format!("kappa instance {i}: {a:?} vs {b:?}")),
        }
    }
    let one = Matrix::from_shape_vec((1, 2), vec![0.6, 0.8]).expect("shape");
    let n1 = nce_loss(&one, &one, 0.07).map_err(|e| e.to_string())?;
    ensure(n1.abs() <= NCE_N1_TOL, || format!("N=1 NCE = {n1}"))?;
    let eye = Matrix::eye(2);
    let n2 = nce_loss(&eye, &eye, 1.0).map_err(|e| e.to_string())?;
    ensure((n2 - NCE_N2).abs() <= NCE_N2_TOL, || format!("N=2 NCE = {n2}"))?;
    Ok(format!("{ORACLE_INSTANCES} instances x 5 formulas, N=1 {n1:.1e}, N=2 {n2:.6}"))
}

fn corruption_statistics() -> Outcome {
    let dims = Dims { text: 2, audio: 2, video: 2 };
    let batch = 16;
    let clips = tiny_batch(dims, batch, 1);
    let refs: Vec<&ClipTensors> = clips.iter().collect();
    let mut replaced = 0usize;
    let mut per_modality = [0usize; 3];
    let mut total = 0usize;
    let legal = [[true; 3], [false, false, true], [false, true, false], [true, false, false]];
    for b in 0..CORRUPTION_SAMPLES / batch {
        let mut rng = Stream::indexed(5, "corruption", b as u64);
        let out = corrupt_batch(&refs, 0.5, &mut rng);
        for (i, (r, label)) in out.replaced.iter().zip(&out.labels).enumerate() {
            total += 1;
            ensure(legal.contains(label), || format!("illegal label pattern {label:?}"))?;
            if let Some((m, donor)) = r {
                replaced += 1;
                per_modality[m.index()] += 1;
                ensure(*donor != i, || "sample replaced from itself".into())?;
                if *m == Modality::Video {
                    ensure(*label == [false, false, true], || format!("video replaced gave {label:?}"))?;
                }
            } else {
                ensure(*label == [true; 3], || "uncorrupted sample not aligned".into())?;
            }
        }
    }
    // a plan for the same stream must agree with the batch
    let plan = plan_corruption(batch, 0.5, &mut Stream::indexed(5, "corruption", 0));
    let again = corrupt_batch(&refs, 0.5, &mut Stream::indexed(5, "corruption", 0));
    ensure(plan == again.replaced, || "plan and batch disagree".into())?;
    let rate = replaced as f64 / total as f64;
    ensure(rate >= REPLACEMENT_RATE.0 && rate <= REPLACEMENT_RATE.1, || format!("replacement rate {rate}"))?;
    let shares: Vec<f64> = per_modality.iter().map(|&c| c as f64 / replaced as f64).collect();
    for s in &shares {
        ensure((s - 1.0 / 3.0).abs() <= MODALITY_UNIFORM_TOL, || format!("modality shares {shares:?}"))?;
    }
    Ok(format!("{total} samples, rate {rate:.4}, shares t/a/v {:.3}/{:.3}/{:.3}", shares[0], shares[1], shares[2]))
}

fn structural_invariants() -> Outcome {
    let d = 8;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(4);
    let fusion = Fusion::new(
        &mut store,
        &mut init,
        ModalitySet::ALL,
        Default::default(),
        d,
        &HcaConfig::default(),
    );
    let mut rng = Stream::new(9, "acceptance/structure");
    let mut rand = |t: usize| Matrix::from_shape_fn((t, d), |_| rng.normal() * 2.0);
    let enc = |m: Modality, data: &Matrix| EncodedSequence {
        modality: m,
        data: data.clone(),
    };
    let mut checked = 0;
    for trial in 0..20 {
        let (tq, t1, t2) = (1 + trial % 5, 1 + (trial * 3) % 7, 2 + trial % 4);
        let q = rand(tq);
        let c1 = rand(t1);
        let c2 = rand(t2);
        let head = fusion.heads[0].as_ref().ok_or("no text head")?;
        let att = cross_attention(&store, &head.stages[0], &q, &c1).map_err(|e| e.to_string())?;
        for w in &att.weights {
            for row in w.rows() {
                ensure((row.sum() - 1.0).abs() <= STRUCT_TOL, || format!("attention row sums to {}", row.sum()))?;
            }
        }
        let out = hca_head(&store, head, &enc(Modality::Text, &q), &enc(Modality::Audio, &c1), &enc(Modality::Video, &c2))
            .map_err(|e| e.to_string())?;
        // permuting context timesteps changes nothing
        let rev = |m: &Matrix| {
            let idx: Vec<usize> = (0..m.nrows()).rev().collect();
            m.select(ndarray::Axis(0), &idx)
        };
        let out_ctx = hca_head(
            &store,
            head,
            &enc(Modality::Text, &q),
            &enc(Modality::Audio, &rev(&c1)),
            &enc(Modality::Video, &rev(&c2)),
        )
        .map_err(|e| e.to_string())?;
        let diff = (&out - &out_ctx).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        ensure(diff <= STRUCT_TOL, || format!("context permutation changed output by {diff}"))?;
        // permuting query timesteps permutes output rows
        let out_q = hca_head(&store, head, &enc(Modality::Text, &rev(&q)), &enc(Modality::Audio, &c1), &enc(Modality::Video, &c2))
            .map_err(|e| e.to_string())?;
        let diff = (&rev(&out) - &out_q).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        ensure(diff <= STRUCT_TOL, || format!("query permutation not equivariant by {diff}"))?;
        // pooled vector is a convex combination of the rows
        let pool = fusion.pools[0].as_ref().ok_or("no text pool")?;
        let p = attention_pool(&store, pool, &out).map_err(|e| e.to_string())?;
        ensure(p.weights.iter().all(|&w| w >= 0.0), || "negative pool weight".into())?;
        ensure((p.weights.iter().sum::<f64>() - 1.0).abs() <= STRUCT_TOL, || "pool weights do not sum to 1".into())?;
        for k in 0..d {
            let col = out.column(k);
            let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let combo: f64 = p.weights.iter().zip(col.iter()).map(|(w, x)| w * x).sum();
            ensure(
                p.vector[k] >= lo - STRUCT_TOL && p.vector[k] <= hi + STRUCT_TOL && (combo - p.vector[k]).abs() <= STRUCT_TOL,
                || format!("pooled coordinate {k} outside the convex hull"),
            )?;
        }
        checked += 1;
    }
    // probability heads
    let dims = Dims { text: 3, audio: 3, video: 3 };
    let model = HiccapModel::new(model_config(dims, 8, ModalitySet::ALL), 2).map_err(|e| e.to_string())?;
    let set = ClipSet {
        ids: (0..6).map(|i| format!("c{i}")).collect(),
        clips: tiny_batch(dims, 6, 8),
        labels: vec![None; 6],
    };
    for task in [Task::Binary, Task::Multitask] {
        let p = predict(&model, &set, task).map_err(|e| e.to_string())?;
        for heads in &p.probs {
            for h in heads {
                ensure(
                    (h[0] + h[1] - 1.0).abs() <= STRUCT_TOL && h.iter().all(|x| (0.0..=1.0).contains(x)),
                    || format!("head probabilities {h:?}"),
                )?;
            }
        }
    }
    Ok(format!("{checked} random attention/HCA/pool cases, binary and multi-task heads"))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        n_clips: 8,
        ..SynthSpec::default()
    };
    let set = ClipSet::from_records(&generate_records(&spec).map_err(|e| e.to_string())?);
    let model = HiccapModel::new(model_config(spec.dims, D_MODEL, ModalitySet::ALL), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        optimizer: OptimizerConfig {
            lr: 1e-2,
            batch_size: 8,
            epochs: OVERFIT_STEPS,
            ..Default::default()
        },
        max_steps: Some(OVERFIT_STEPS),
        ..Default::default()
    };
    let r = finetune(model, &set, &set, Task::Binary, &cfg).map_err(|e| e.to_string())?;
    let report = evaluate(&r.model, &set, Task::Binary).map_err(|e| e.to_string())?;
    let f1 = report.f1_of("binary").ok_or("binary F1 undefined")?;
    let took = start.elapsed();
    ensure(r.step_losses.len() <= OVERFIT_STEPS, || "too many steps".into())?;
    ensure(f1 == 1.0, || format!("train F1 {f1} after {} steps", r.step_losses.len()))?;
    ensure(took < OVERFIT_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("train F1 1.0 after {} steps, {:.1?}", r.step_losses.len(), took))
}

fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..Default::default()
    }
}

fn train_planted(data: &Planted, modalities: ModalitySet, seed: u64) -> Result<HiccapModel, String> {
    let model = HiccapModel::new(model_config(data.dims, D_MODEL, modalities), seed).map_err(|e| e.to_string())?;
    finetune(model, &data.train, &data.val, Task::Multitask, &default_train_config(seed))
        .map(|r| r.model)
        .map_err(|e| e.to_string())
}

fn macro_of(model: &HiccapModel, set: &ClipSet) -> Result<f64, String> {
    evaluate(model, set, Task::Multitask)
        .map_err(|e| e.to_string())?
        .macro_f1
        .ok_or_else(|| "macro F1 undefined".to_string())
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let data = planted(&SynthSpec::default());
    ensure(
        (data.train.len(), data.val.len(), data.test.len()) == (512, 128, 128),
        || "unexpected split sizes".into(),
    )?;
    let cfg = default_train_config(0);
    ensure(cfg.optimizer.epochs <= LEARN_MAX_EPOCHS, || "epoch budget exceeded".into())?;
    let model = train_planted(&data, ModalitySet::ALL, 0)?;
    let m = macro_of(&model, &data.test)?;
    let took = start.elapsed();
    ensure(m >= LEARN_MIN_MACRO_F1, || format!("test macro-F1 {m:.4}"))?;
    ensure(took < LEARN_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("test macro-F1 {m:.4} after {} epochs, {:.1?}", cfg.optimizer.epochs, took))
}

fn ablation() -> Outcome {
    let subsets = ["tav", "ta", "tv", "av", "t", "a", "v"];
    let mut means = BTreeMap::new();
    for s in subsets {
        let mask = ModalitySet::parse(s).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for seed in SEEDS {
            let data = planted(&SynthSpec {
                seed,
                ..SynthSpec::default()
            });
            let model = train_planted(&data, mask, seed)?;
            sum += macro_of(&model, &data.test)?;
        }
        means.insert(s, sum / SEEDS.len() as f64);
    }
    let tri = means["tav"];
    let bi = ["ta", "tv", "av"].iter().map(|k| means[k]).fold(f64::MIN, f64::max);
    let uni = ["t", "a", "v"].iter().map(|k| means[k]).fold(f64::MIN, f64::max);
    let table = means.iter().map(|(k, v)| format!("{k}={v:.3}")).collect::<Vec<_>>().join(" ");
    ensure(tri - bi >= ABLATION_GAP && bi - uni >= ABLATION_GAP, || {
        format!("trimodal {tri:.4}, best bimodal {bi:.4}, best unimodal {uni:.4} ({table})")
    })?;
    Ok(format!("trimodal {tri:.4} > bimodal {bi:.4} > unimodal {uni:.4} ({table})"))
}

/// Pretraining uses the unlabeled training split; fine-tuning sees the
/// first 10% of its labels.
fn pretraining_benefit() -> Outcome {
    const PRETRAIN_EPOCHS: usize = 50;
    const FINETUNE_EPOCHS: usize = 60;
    const LR: f64 = 1e-3;
    let arms = [None, Some(Objective::Hybrid), Some(Objective::Matching), Some(Objective::Contrastive)];
    let mut sums = [0.0f64; 4];
    for seed in SEEDS {
        let data = planted(&SynthSpec {
            seed,
            ..SynthSpec::redundant()
        });
        let budget: Vec<usize> = (0..data.train.len() / 10).collect();
        let labeled = data.train.subset(&budget);
        for (k, arm) in arms.iter().enumerate() {
            let mut model =
                HiccapModel::new(model_config(data.dims, D_MODEL, ModalitySet::ALL), seed).map_err(|e| e.to_string())?;
            if let Some(objective) = arm {
                let cfg = PretrainConfig {
                    objective: *objective,
                    optimizer: OptimizerConfig {
                        lr: LR,
                        epochs: PRETRAIN_EPOCHS,
                        ..Default::default()
                    },
                    seed,
                    ..Default::default()
                };
                model = run_pretraining(model, &data.train.clips, &data.val.clips, &cfg)
                    .map_err(|e| e.to_string())?
                    .model;
            }
            let cfg = TrainConfig {
                optimizer: OptimizerConfig {
                    lr: LR,
                    epochs: FINETUNE_EPOCHS,
                    ..Default::default()
                },
                seed,
                ..Default::default()
            };
            let tuned = finetune(model, &labeled, &data.val, Task::Multitask, &cfg).map_err(|e| e.to_string())?;
            sums[k] += macro_of(&tuned.model, &data.test)?;
        }
    }
    let [scratch, hybrid, matching, contrastive] = sums.map(|s| s / SEEDS.len() as f64);
    let line = format!("scratch {scratch:.4}, hybrid {hybrid:.4}, matching {matching:.4}, contrastive {contrastive:.4}");
    ensure(hybrid - scratch >= PRETRAIN_GAIN, || line.clone())?;
    ensure(hybrid >= matching - PRETRAIN_TIE && hybrid >= contrastive - PRETRAIN_TIE, || line.clone())?;
    Ok(line)
}

fn masking_probe() -> Outcome {
    let data = planted(&SynthSpec::default());
    let model = train_planted(&data, ModalitySet::ALL, 0)?;
    let base = evaluate(&model, &data.test, Task::Multitask).map_err(|e| e.to_string())?;
    let f1_of = |r: &hiccap::train_eval::MetricsReport, name: &str| r.f1_of(name).unwrap_or(0.0);
    let spec = SynthSpec::default();
    let mut lines = Vec::new();
    let mut probes: BTreeMap<String, hiccap::train_eval::MetricsReport> = BTreeMap::new();
    for plan in &spec.signals {
        let name = plan.category.name();
        let planted_set = ModalitySet::of(&plan.placements.iter().map(|p| p.modality).collect::<Vec<_>>());
        let key = planted_set.to_string();
        if !probes.contains_key(&key) {
            probes.insert(key.clone(), mask_probe(&model, &data.test, Task::Multitask, planted_set).map_err(|e| e.to_string())?);
        }
        let drop = f1_of(&base, name) - f1_of(&probes[&key], name);
        ensure(drop >= MASK_MIN_DROP, || format!("{name}: masking {key} dropped F1 by {drop:.4}"))?;
        let mut worst: f64 = 0.0;
        for m in Modality::ALL.into_iter().filter(|m| !planted_set.contains(*m)) {
            let mask = ModalitySet::of(&[m]);
            let key = mask.to_string();
            if !probes.contains_key(&key) {
                probes.insert(key.clone(), mask_probe(&model, &data.test, Task::Multitask, mask).map_err(|e| e.to_string())?);
            }
            let change = (f1_of(&base, name) - f1_of(&probes[&key], name)).abs();
            ensure(change <= MASK_MAX_CHANGE, || format!("{name}: masking {key} changed F1 by {change:.4}"))?;
            worst = worst.max(change);
        }
        lines.push(format!("{name} drop {drop:.3} / max irrelevant {worst:.3}"));
    }
    Ok(lines.join(", "))
}

fn determinism_and_persistence() -> Outcome {
    let spec = SynthSpec {
        n_clips: 48,
        ..SynthSpec::default()
    };
    let data = planted(&spec);
    let run = || -> Result<hiccap::train_eval::FinetuneResult, String> {
        let model = HiccapModel::new(model_config(spec.dims, D_MODEL, ModalitySet::ALL), 3).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            optimizer: OptimizerConfig {
                epochs: 3,
                batch_size: 8,
                lr: 1e-3,
                ..Default::default()
            },
            seed: 3,
            ..Default::default()
        };
        finetune(model, &data.train, &data.val, Task::Multitask, &cfg).map_err(|e| e.to_string())
    };
    let a = run()?;
    let b = run()?;
    ensure(a.step_losses.len() == b.step_losses.len(), || "trace lengths differ".into())?;
    let max_diff = a
        .step_losses
        .iter()
        .zip(&b.step_losses)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    ensure(max_diff <= TRACE_TOL, || format!("loss traces differ by {max_diff}"))?;
    let pre = run_pretraining(
        a.model.clone(),
        &data.train.clips,
        &data.val.clips,
        &PretrainConfig {
            optimizer: OptimizerConfig {
                epochs: 1,
                batch_size: 8,
                ..Default::default()
            },
            ..Default::default()
        },
    );
    let pre2 = run_pretraining(
        a.model.clone(),
        &data.train.clips,
        &data.val.clips,
        &PretrainConfig {
            optimizer: OptimizerConfig {
                epochs: 1,
                batch_size: 8,
                ..Default::default()
            },
            ..Default::default()
        },
    );
    let (pre, pre2) = (pre.map_err(|e| e.to_string())?, pre2.map_err(|e| e.to_string())?);
    ensure(pre.history == pre2.history, || "pretraining traces differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.hckp");
    let meta = CheckpointMeta::new(&a.model, 3, Some(Task::Multitask));
    save_checkpoint(&path, &a.model, Some(&a.optimizer), &meta).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let before = evaluate(&a.model, &data.test, Task::Multitask).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded.model, &data.test, Task::Multitask).map_err(|e| e.to_string())?;
    ensure(before == after, || "metrics changed after checkpoint round trip".into())?;
    Ok(format!(
        "{} fine-tuning steps identical (max diff {max_diff:.1e}), checkpoint metrics identical",
        a.step_losses.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient_integrity", gradient_integrity),
        ("formula_oracles", formula_oracles),
        ("corruption_statistics", corruption_statistics),
        ("structural_invariants", structural_invariants),
        ("overfit", overfit),
        ("learnability", learnability),
        ("ablation_direction", ablation),
        ("pretraining_benefit", pretraining_benefit),
        ("masking_probe", masking_probe),
        ("determinism_and_persistence", determinism_and_persistence),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in criteria {
            println!("{name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({took:.1?}): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("[FAIL] {name} ({took:.1?}): {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
