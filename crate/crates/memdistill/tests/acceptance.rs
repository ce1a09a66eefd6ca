//! Acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line before asserting. The tests take a
//! shared lock so timings are not distorted by each other.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use memdistill::artifact;
use memdistill::checkpoint::{self, Checkpoint};
use memdistill::datasets::{self, DatasetConfig};
use memdistill::experiments;
use memdistill_core::bptt::{meta_gradient, unroll_inner, InnerData, InnerOptConfig, MomentumMode};
use memdistill_core::continual::{make_stream, reservoir_insert, run_online_baseline, ClConfig, StreamKind};
use memdistill_core::data::{toy_gaussian, LabeledDataset};
use memdistill_core::distill::{distill, DistillConfig, Distiller, OuterOptConfig};
use memdistill_core::eval::{dense_train_set, mean_std, random_coreset, select_num_bases, EvalProtocol};
use memdistill_core::gradcheck::{finite_diff_oracle, max_relative_error};
use memdistill_core::memory::{
    classical_embed, coefficient_similarity, expand_bases, one_hot_queries, plan_budget, plan_budget_floats,
    plan_classical, recall, recall_coefficients, AddressingSet, Parameterization, Query,
};
use memdistill_core::models::{init_params, model_forward, ModelInput, ModelSpec};
use memdistill_core::rng::stream;
use memdistill_core::{Error, Tape, Tensor, Var};
use rand::Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

// Written to /dev/stdout so the line survives libtest's output capture.
fn verdict(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {}: {} {}\n", n, if pass { "PASS" } else { "FAIL" }, detail);
    match std::fs::OpenOptions::new().append(true).open("/dev/stdout") {
        Ok(mut out) => out.write_all(line.as_bytes()).unwrap(),
        Err(_) => print!("{}", line),
    }
    assert!(pass, "criterion {} failed: {}", n, detail);
}

fn uniform(shape: &[usize], rng: &mut memdistill_core::rng::StreamRng, scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.random_range(-1.0..1.0))
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

// ---------------------------------------------------------------- 1

struct TinyInstance {
    spec: ModelSpec,
    theta0: Vec<Tensor>,
    real: Tensor,
    real_labels: Vec<usize>,
    bases: Tensor,
    addr: Tensor,
}

impl TinyInstance {
    /// Linear model on d=4 (1x2x2), C=2, K=2, r=2, real batch of 8.
    fn new(seed: u64) -> Self {
        let mut rng = stream(seed, "acceptance-tiny", 0);
        let spec = ModelSpec::linear([1, 2, 2], 2);
        TinyInstance {
            theta0: init_params(&spec, seed).unwrap().tensors,
            spec,
            real: uniform(&[8, 1, 2, 2], &mut rng, 1.0),
            real_labels: (0..8).map(|i| i % 2).collect(),
            bases: uniform(&[2, 4], &mut rng, 1.0),
            addr: uniform(&[2, 2, 2], &mut rng, 1.0),
        }
    }

    fn cfg(mode: MomentumMode) -> InnerOptConfig {
        InnerOptConfig {
            steps: 5,
            lr: 0.5,
            momentum: 0.9,
            batch_size: None,
            mode,
        }
    }

    /// Outer loss and meta-gradient `[dJ/dB, dJ/dA]` from the tape.
    fn tape_gradient(&self, cfg: &InnerOptConfig) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let b = tape.variable(self.bases.clone());
        let a = tape.variable(self.addr.clone());
        let q = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let coeffs = recall_coefficients(&mut tape, a, q).unwrap();
        let bases = expand_bases(&mut tape, b, [1, 2, 2], 1).unwrap();
        let theta0: Vec<Var> = self.theta0.iter().map(|t| tape.constant(t.clone())).collect();
        let data = InnerData {
            input: ModelInput::Factored { coeffs, bases },
            labels: vec![0, 0, 1, 1],
        };
        let u = unroll_inner(&mut tape, &self.spec, &theta0, &data, cfg, &mut stream(0, "inner", 0)).unwrap();
        let real = tape.constant(self.real.clone());
        let logits = model_forward(&mut tape, &self.spec, &u.theta, ModelInput::Images(real)).unwrap();
        let j = tape.softmax_cross_entropy(logits, &self.real_labels).unwrap();
        let g = meta_gradient(&mut tape, j, &[b, a]).unwrap();
        (tape.value(j).item(), g)
    }

    /// The same objective in plain arithmetic. `frozen` replaces the
    /// momentum history of step t by `frozen[t - 2]`: the surrogate whose
    /// gradient the forward-only mode returns.
    fn reference(&self, bases: &[f64], addr: &[f64], cfg: &InnerOptConfig, frozen: Option<&[Vec<f64>]>) -> (f64, Vec<Vec<f64>>) {
        let beta = if cfg.mode == MomentumMode::None { 0.0 } else { cfg.momentum };
        let mut synth = Vec::new();
        for q in 0..2 {
            for i in 0..2 {
                let mut x = [0.0; 4];
                for k in 0..2 {
                    for p in 0..4 {
                        x[p] += addr[(i * 2 + q) * 2 + k] * bases[k * 4 + p];
                    }
                }
                synth.push((x, q));
            }
        }
        let loss_grad = |theta: &[f64], rows: &[([f64; 4], usize)]| {
            let n = rows.len() as f64;
            let mut g = vec![0.0; 10];
            let mut loss = 0.0;
            for (x, y) in rows {
                let mut z = [theta[8], theta[9]];
                for a in 0..4 {
                    z[0] += x[a] * theta[a * 2];
                    z[1] += x[a] * theta[a * 2 + 1];
                }
                let m = z[0].max(z[1]);
                let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
                loss += (lse - z[*y]) / n;
                for c in 0..2 {
                    let d = ((z[c] - lse).exp() - if c == *y { 1.0 } else { 0.0 }) / n;
                    for a in 0..4 {
                        g[a * 2 + c] += x[a] * d;
                    }
                    g[8 + c] += d;
                }
            }
            (loss, g)
        };
        let mut theta: Vec<f64> = self.theta0.iter().flat_map(|t| t.data().to_vec()).collect();
        let mut m = vec![0.0; 10];
        let mut history = Vec::new();
        for t in 1..=cfg.steps {
            let g = loss_grad(&theta, &synth).1;
            let prev = match (t, frozen) {
                (1, _) => vec![0.0; 10],
                (_, Some(h)) => h[t - 2].clone(),
                (_, None) => m.clone(),
            };
            m = prev.iter().zip(&g).map(|(p, gi)| beta * p + gi).collect();
            for (th, mi) in theta.iter_mut().zip(&m) {
                *th -= cfg.lr * mi;
            }
            history.push(m.clone());
        }
        let real: Vec<([f64; 4], usize)> = (0..8)
            .map(|i| {
                let r = &self.real.data()[i * 4..i * 4 + 4];
                ([r[0], r[1], r[2], r[3]], self.real_labels[i])
            })
            .collect();
        (loss_grad(&theta, &real).0, history)
    }
}

#[test]
fn criterion_01_meta_gradient_matches_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut forward_gap: f64 = 0.0;
    for seed in [1, 2, 3] {
        let tiny = TinyInstance::new(seed);
        for mode in [MomentumMode::None, MomentumMode::ForwardOnly, MomentumMode::Full] {
            let cfg = TinyInstance::cfg(mode);
            let (j, g) = tiny.tape_gradient(&cfg);
            let (j_ref, history) = tiny.reference(tiny.bases.data(), tiny.addr.data(), &cfg, None);
            forward_gap = forward_gap.max((j - j_ref).abs());
            let frozen = (mode == MomentumMode::ForwardOnly).then_some(history.as_slice());
            let fd_b = finite_diff_oracle(
                |x| Ok(tiny.reference(x, tiny.addr.data(), &cfg, frozen).0),
                tiny.bases.data(),
                1e-4,
            )
            .unwrap();
            let fd_a = finite_diff_oracle(
                |x| Ok(tiny.reference(tiny.bases.data(), x, &cfg, frozen).0),
                tiny.addr.data(),
                1e-4,
            )
            .unwrap();
            let err = max_relative_error(g[0].data(), &fd_b, 1e-6).max(max_relative_error(g[1].data(), &fd_a, 1e-6));
            worst = worst.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        worst <= 1e-3 && forward_gap < 1e-12 && secs < 10.0,
        format!(
            "max relative error {:.2e} over 3 instances x 3 modes (need <= 1e-3), tape vs reference loss gap {:.1e}, {:.2} s",
            worst, forward_gap, secs
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_classical_embedding_recalls_inputs_exactly() {
    let _g = serial();
    let mut rng = stream(2, "acceptance-classical", 0);
    let fixtures = [(2usize, 1usize, [1usize, 4, 4]), (3, 3, [3, 5, 2]), (5, 4, [1, 7, 7])];
    let mut ok = true;
    for &(classes, per_class, shape) in &fixtures {
        let images: Vec<Vec<Tensor>> = (0..classes)
            .map(|_| (0..per_class).map(|_| uniform(&shape, &mut rng, 10.0)).collect())
            .collect();
        let (bank, addressing) = classical_embed(&images).unwrap();
        for (c, imgs) in images.iter().enumerate() {
            let back = recall(&bank, &addressing, &Query::one_hot(c, classes)).unwrap();
            ok &= back.len() == per_class;
            for (x, y) in imgs.iter().zip(&back) {
                ok &= x.shape() == y.shape();
                ok &= x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    verdict(2, ok, format!("{} fixtures recalled bit for bit", fixtures.len()));
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_budget_plans_are_tight() {
    let _g = serial();
    let mut rng = stream(3, "acceptance-budget", 0);
    let mut ok = true;
    let mut feasible = 0;
    for _ in 0..50 {
        let s = rng.random_range(1..=2usize);
        let channels = if rng.random_bool(0.5) { 1 } else { 3 };
        let h = s * rng.random_range(1..=16usize);
        let w = s * rng.random_range(1..=16usize);
        let shape = [channels, h, w];
        let d = (channels * h * w) as u64;
        let n = rng.random_range(1..=50usize);
        let c = rng.random_range(2..=100usize);
        let d_y = c + rng.random_range(0..=4usize);
        let k = rng.random_range(1..=64usize);
        let budget = n as u64 * c as u64 * d;
        let base = k as u64 * d / (s * s) as u64;
        let per = (d_y * k) as u64;
        match plan_budget(n, c, shape, d_y, k, s) {
            Ok(p) => {
                feasible += 1;
                let r = p.r as u64;
                ok &= p.r >= 1 && base + r * per <= budget && base + (r + 1) * per > budget;
                ok &= p.total_floats == base + r * per && p.base_floats == base;
            }
            Err(Error::Budget { .. }) => ok &= base + per > budget,
            Err(e) => panic!("{}", e),
        }
    }
    verdict(3, ok, format!("50 random tuples ({} feasible), r maximal in every plan", feasible));
}

// ---------------------------------------------------------------- 4, 5

fn toy_split() -> (LabeledDataset, LabeledDataset) {
    toy_gaussian(4, 16, 200, 6.0, 0).unwrap().split(0.5, 0).unwrap()
}

fn toy_config(train: &LabeledDataset, steps: usize, mode: MomentumMode, seed: u64) -> DistillConfig {
    let shape = train.image_shape();
    DistillConfig {
        model: ModelSpec::linear(shape, 4),
        inner: InnerOptConfig {
            steps,
            lr: 0.01,
            mode,
            ..InnerOptConfig::default()
        },
        outer: OuterOptConfig {
            iterations: 500,
            ..OuterOptConfig::default()
        },
        plan: plan_budget(1, 4, shape, 4, 2, 1).unwrap(),
        parameterization: Parameterization::Addressed,
        augment: None,
        seed,
    }
}

fn toy_accuracy(steps: usize, mode: MomentumMode) -> (f64, f64) {
    let (train, test) = toy_split();
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = toy_config(&train, steps, mode, seed);
            let (art, _) = distill(&train, &cfg).unwrap();
            experiments::retrain_eval(&art, &cfg.model, &EvalProtocol::default(), &test).unwrap().mean
        })
        .collect();
    mean_std(&accs)
}

#[test]
fn criterion_04_momentum_improves_distillation() {
    let _g = serial();
    let start = Instant::now();
    let (full, full_sd) = toy_accuracy(50, MomentumMode::Full);
    let (none, none_sd) = toy_accuracy(50, MomentumMode::None);
    let (fwd, _) = toy_accuracy(50, MomentumMode::ForwardOnly);
    let margin = full - none;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        margin >= 0.02 && secs < 600.0,
        format!(
            "full {}% (sd {}) vs none {}% (sd {}): margin {} points (need >= 2); forward-only {}%; {:.0} s",
            pts(full),
            pts(full_sd),
            pts(none),
            pts(none_sd),
            pts(margin),
            pts(fwd),
            secs
        ),
    );
}

#[test]
fn criterion_05_longer_unrolls_help() {
    let _g = serial();
    let a1 = toy_accuracy(1, MomentumMode::Full).0;
    let a10 = toy_accuracy(10, MomentumMode::Full).0;
    let a100 = toy_accuracy(100, MomentumMode::Full).0;
    verdict(
        5,
        a100 >= a10 && a10 >= a1 && a100 - a1 >= 0.05,
        format!(
            "T=1 {}%, T=10 {}%, T=100 {}%: T=100 minus T=1 is {} points (need >= 5)",
            pts(a1),
            pts(a10),
            pts(a100),
            pts(a100 - a1)
        ),
    );
}

// ---------------------------------------------------------------- 6, 7

fn mnist_subset() -> (LabeledDataset, LabeledDataset) {
    let cfg = DatasetConfig {
        name: "mnist5k".into(),
        data_dir: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k"),
        subset: Some(1000),
        ..DatasetConfig::default()
    };
    datasets::load(&cfg).unwrap()
}

/// Linear model, T=100, 2000 outer iterations at learning rate 10.
fn mnist_config(train: &LabeledDataset, parameterization: Parameterization, k: usize, s: usize, seed: u64) -> DistillConfig {
    let shape = train.image_shape();
    let budget = (10 * shape.iter().product::<usize>()) as u64;
    let plan = match parameterization {
        Parameterization::Addressed => plan_budget_floats(budget, shape, 10, k, s).unwrap(),
        Parameterization::Classical => plan_classical(budget, 10, shape, s).unwrap(),
    };
    DistillConfig {
        model: ModelSpec::linear(shape, 10),
        inner: InnerOptConfig {
            steps: 100,
            lr: 0.01,
            mode: MomentumMode::Full,
            ..InnerOptConfig::default()
        },
        outer: OuterOptConfig {
            lr: 10.0,
            iterations: 2000,
            ..OuterOptConfig::default()
        },
        plan,
        parameterization,
        augment: None,
        seed,
    }
}

#[test]
fn criterion_06_distillation_beats_random_coreset() {
    let _g = serial();
    let start = Instant::now();
    let (train, test) = mnist_subset();
    let protocol = EvalProtocol::default();
    let base = mnist_config(&train, Parameterization::Addressed, 16, 2, 0);
    let budget = base.plan.budget_floats;
    let sel = select_num_bases(&[4, 8, 16], &train, 0, &base, budget, &protocol).unwrap();
    let k = sel.best_k;
    let (fit, _) = train.split(0.1, 0).unwrap();
    let mut distilled = vec![experiments::retrain_eval(&sel.artifact, &base.model, &protocol, &test).unwrap().mean];
    for seed in 1..5 {
        let cfg = mnist_config(&train, Parameterization::Addressed, k, 2, seed);
        let (art, _) = distill(&fit, &cfg).unwrap();
        distilled.push(experiments::retrain_eval(&art, &cfg.model, &protocol, &test).unwrap().mean);
    }
    let coreset: Vec<f64> = (0..5)
        .map(|seed| {
            let core = random_coreset(&train, 1, seed).unwrap();
            experiments::retrain_on(&base.model, &dense_train_set(&core), &protocol, &test).unwrap().mean
        })
        .collect();
    let (d, d_sd) = mean_std(&distilled);
    let (c, c_sd) = mean_std(&coreset);
    let scores: Vec<String> = sel
        .scores
        .iter()
        .map(|(k, s)| format!("K={}:{}", k, s.map_or("n/a".into(), pts)))
        .collect();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        d - c >= 0.05 && secs < 1800.0,
        format!(
            "distilled {}% (sd {}, K={} from [{}], r={}) vs coreset {}% (sd {}): margin {} points (need >= 5); {:.0} s",
            pts(d),
            pts(d_sd),
            k,
            scores.join(" "),
            sel.artifact.addressing.count(),
            pts(c),
            pts(c_sd),
            pts(d - c),
            secs
        ),
    );
}

#[test]
fn criterion_07_downsampling_helps_classical_memories() {
    let _g = serial();
    let start = Instant::now();
    let (train, test) = mnist_subset();
    let protocol = EvalProtocol::default();
    let run = |s: usize| -> Vec<f64> {
        (0..5)
            .map(|seed| {
                let cfg = mnist_config(&train, Parameterization::Classical, 0, s, seed);
                let (art, _) = distill(&train, &cfg).unwrap();
                experiments::retrain_eval(&art, &cfg.model, &protocol, &test).unwrap().mean
            })
            .collect()
    };
    let (a1, sd1) = mean_std(&run(1));
    let (a2, sd2) = mean_std(&run(2));
    verdict(
        7,
        a2 >= a1,
        format!(
            "classical s=2 {}% (sd {}, 4 images per class) vs s=1 {}% (sd {}, 1 per class): difference {} points (need >= 0); {:.0} s",
            pts(a2),
            pts(sd2),
            pts(a1),
            pts(sd1),
            pts(a2 - a1),
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_compress_then_recall_beats_online() {
    let _g = serial();
    let start = Instant::now();
    let cfg = DatasetConfig {
        name: "mnist5k".into(),
        data_dir: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k"),
        ..DatasetConfig::default()
    };
    let (train, test) = datasets::load(&cfg).unwrap();
    let shape = train.image_shape();
    let d: usize = shape.iter().product();
    let (tasks, capacity_samples) = (5, 200);
    let capacity = (capacity_samples * d) as u64;
    let spec = ModelSpec::mlp(shape, 10).with_hidden(256);
    let (k, s) = (20, 2);
    let plan = plan_budget_floats(capacity / tasks as u64, shape, 10, k, s).unwrap();
    let cl = ClConfig {
        distill: DistillConfig {
            model: spec.clone(),
            inner: InnerOptConfig {
                steps: 20,
                lr: 0.05,
                ..InnerOptConfig::default()
            },
            outer: OuterOptConfig {
                lr: 10.0,
                ..OuterOptConfig::default()
            },
            plan,
            parameterization: Parameterization::Addressed,
            augment: None,
            seed: 0,
        },
        num_bases: k,
        steps_per_minibatch: 1,
        final_iterations: 300,
        eval: EvalProtocol::default(),
    };
    let stream_ = || make_stream(StreamKind::Permutations, tasks, 1000, 0, &train, &test).unwrap();
    let ours = experiments::run_compress_then_recall(&mut stream_(), capacity, &cl).unwrap();
    let online = run_online_baseline(&mut stream_(), &spec, 0.01, 0.9, 0).unwrap();
    let within = ours.stored_floats.iter().all(|&f| f <= capacity);
    let per = |r: &memdistill_core::continual::ClResult| r.accuracies.iter().map(|a| pts(*a)).collect::<Vec<_>>().join(" ");
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        ours.ra - online.ra >= 0.10 && within && secs < 1800.0,
        format!(
            "compress-then-recall RA {}% [{}] vs online RA {}% [{}]: margin {} points (need >= 10); storage within {} floats: {}; {:.0} s",
            pts(ours.ra),
            per(&ours),
            pts(online.ra),
            per(&online),
            pts(ours.ra - online.ra),
            capacity,
            within,
            secs
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_forward_only_keeps_the_forward_pass() {
    let _g = serial();
    let mut rng = stream(9, "acceptance-forward", 0);
    let mut identical = 0;
    for trial in 0..10u64 {
        let classes = rng.random_range(2..=4usize);
        let shape = [1, rng.random_range(2..=4usize), 3];
        let spec = if trial % 2 == 0 {
            ModelSpec::linear(shape, classes)
        } else {
            ModelSpec::mlp(shape, classes).with_hidden(8)
        };
        let n = rng.random_range(4..=12usize);
        let images = uniform(&[n, shape[0], shape[1], shape[2]], &mut rng, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let steps = rng.random_range(1..=15usize);
        let lr = rng.random_range(0.01..0.5);
        let momentum = rng.random_range(0.0..0.95);
        let batch_size = if trial % 3 == 0 { Some(n / 2) } else { None };
        let theta0 = init_params(&spec, trial).unwrap();
        let run = |mode| -> Vec<u64> {
            let mut tape = Tape::new();
            let x = tape.variable(images.clone());
            let theta: Vec<Var> = theta0.to_tape_const(&mut tape);
            let cfg = InnerOptConfig {
                steps,
                lr,
                momentum,
                batch_size,
                mode,
            };
            let data = InnerData {
                input: ModelInput::Images(x),
                labels: labels.clone(),
            };
            let u = unroll_inner(&mut tape, &spec, &theta, &data, &cfg, &mut stream(trial, "inner", 0)).unwrap();
            u.theta.iter().flat_map(|&v| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
        };
        if run(MomentumMode::Full) == run(MomentumMode::ForwardOnly) {
            identical += 1;
        }
    }
    verdict(9, identical == 10, format!("{}/10 random unrolls give bit-identical final parameters", identical));
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_similarity_matrix_sanity() {
    let _g = serial();
    let mut rng = stream(10, "acceptance-similarity", 0);
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let classes = rng.random_range(2..=10usize);
        let (r, k) = (rng.random_range(1..=6usize), rng.random_range(2..=12usize));
        let addressing = AddressingSet::random(r, classes, k, &mut rng).unwrap();
        let sim = coefficient_similarity(&addressing, &one_hot_queries(&(0..classes).collect::<Vec<_>>(), classes)).unwrap();
        // recomputed from the matrices one class at a time
        let avg: Vec<Vec<f64>> = (0..classes)
            .map(|c| {
                (0..k)
                    .map(|j| (0..r).map(|i| addressing.matrix(i).data()[c * k + j]).sum::<f64>() / r as f64)
                    .collect()
            })
            .collect();
        for a in 0..classes {
            ok &= sim.data()[a * classes + a] == 1.0;
            for b in 0..classes {
                let (x, y) = (&avg[a], &avg[b]);
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                let v = sim.data()[a * classes + b];
                ok &= (v - sim.data()[b * classes + a]).abs() <= 1e-12;
                if a != b {
                    worst = worst.max((v - dot / (nx * ny)).abs());
                }
            }
        }
    }
    verdict(
        10,
        ok && worst < 1e-12,
        format!("3 random memories: unit diagonal, symmetric, max deviation from recomputation {:.1e}", worst),
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_reservoir_survival_is_uniform() {
    let _g = serial();
    let (capacity, n, repeats) = (10usize, 50u64, 1000);
    let tracked = [1u64, 5, 10, 11, 25, 50];
    let mut survived = vec![0usize; tracked.len()];
    let mut early = 0usize;
    for rep in 0..repeats {
        let mut rng = stream(11, "acceptance-reservoir", rep);
        let mut slots: Vec<u64> = Vec::new();
        for item in 1..=n {
            reservoir_insert(&mut slots, capacity, item, item, &mut rng).unwrap();
            if item == 20 && slots.contains(&1) {
                early += 1;
            }
        }
        for (hits, t) in survived.iter_mut().zip(&tracked) {
            *hits += slots.contains(t) as usize;
        }
    }
    let check = |hits: usize, seen: u64| {
        let p = capacity as f64 / seen as f64;
        let sigma = (p * (1.0 - p) / repeats as f64).sqrt();
        let freq = hits as f64 / repeats as f64;
        ((freq - p).abs() <= 3.0 * sigma, freq, p)
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (hits, t) in survived.iter().zip(&tracked) {
        let (pass, freq, _) = check(*hits, n);
        ok &= pass;
        parts.push(format!("item {}: {:.3}", t, freq));
    }
    let (pass, freq, p) = check(early, 20);
    ok &= pass;
    verdict(
        11,
        ok,
        format!(
            "survival after {} items (expected {:.3}): {}; item 1 after 20 items {:.3} (expected {:.3})",
            n,
            capacity as f64 / n as f64,
            parts.join(", "),
            freq,
            p
        ),
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_persistence_is_bit_exact() {
    let _g = serial();
    let train = toy_gaussian(4, 16, 30, 6.0, 12).unwrap();
    let shape = train.image_shape();
    let cfg = DistillConfig {
        model: ModelSpec::mlp(shape, 4).with_hidden(16),
        inner: InnerOptConfig {
            steps: 10,
            ..InnerOptConfig::default()
        },
        outer: OuterOptConfig {
            iterations: 40,
            batch_size: 32,
            ..OuterOptConfig::default()
        },
        plan: plan_budget(2, 4, shape, 4, 4, 2).unwrap(),
        parameterization: Parameterization::Addressed,
        augment: None,
        seed: 12,
    };
    let mut straight = Distiller::new(cfg.clone(), 4).unwrap();
    straight.run_until(&train, 40).unwrap();
    let art = straight.artifact("toy", train.fingerprint()).unwrap();
    let bytes = artifact::to_bytes(&art).unwrap();
    let back = artifact::from_bytes(&bytes).unwrap();
    let ddam_ok = back == art && artifact::to_bytes(&back).unwrap() == bytes;

    let mut first = Distiller::new(cfg, 4).unwrap();
    first.run_until(&train, 17).unwrap();
    let ck = Checkpoint {
        config: first.config().clone(),
        num_classes: 4,
        state: first.state().clone(),
    };
    let ck = checkpoint::from_bytes(&checkpoint::to_bytes(&ck).unwrap()).unwrap();
    let mut resumed = Distiller::resume(ck.config, ck.num_classes, ck.state).unwrap();
    resumed.run_until(&train, 40).unwrap();
    let resume_ok = resumed.state() == straight.state()
        && artifact::to_bytes(&resumed.artifact("toy", train.fingerprint()).unwrap()).unwrap() == bytes;
    verdict(
        12,
        ddam_ok && resume_ok,
        format!(
            "DDAM round trip identical: {}; resume at 17 of 40 iterations identical to the straight run: {}",
            ddam_ok, resume_ok
        ),
    );
}
