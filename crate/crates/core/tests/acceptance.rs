//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=1,4` runs a subset.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;

use fewshot::data::{resize_bilinear, rotate90, split_classes, synth_dataset, Dataset, Split, SynthParams};
use fewshot::episode::{sample_episode, EpisodeSpec};
use fewshot::eval::{confidence_interval, meta_test, outlier_probe};
use fewshot::graph::{Graph, OpKind};
use fewshot::model::{
    classify, network, AggregationMode, Architecture, Embedding, FewShotModel, ForwardOptions, ModelParams,
    TaskDropoutMask,
};
use fewshot::rng::{stream, substream, Rng, Stream};
use fewshot::train::{meta_train, TrainConfig};
use fewshot::Tensor;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn synth(
    classes: usize,
    per_class: usize,
    size: usize,
    outliers: f64,
    seed: u64,
    split: (usize, usize, usize),
) -> Dataset {
    let raw = synth_dataset(&SynthParams {
        num_classes: classes,
        per_class,
        image_size: size,
        noise_sd: 0.1,
        outlier_rate: outliers,
        seed,
    })
    .unwrap();
    split_classes(raw, split, &mut stream(seed, Stream::Split)).unwrap()
}

fn model(arch: Architecture, seed: u64) -> FewShotModel {
    FewShotModel::new(
        ModelParams::init(arch, &mut stream(seed, Stream::Init)).unwrap(),
        ForwardOptions::default(),
    )
}

fn tiny_arch(size: usize, m_max: usize, filters: usize) -> Architecture {
    let mut arch = Architecture::standard(1, size, false, m_max);
    arch.embed_filters = filters;
    arch.attention_filters = 2;
    arch
}

/// Every parameter gradient of the episode loss against central
/// differences, on 20 random 2-way 2-shot models with 3×3 embeddings.
///
/// A coordinate whose ±h perturbation flips a ReLU sign or a max-pool
/// winner straddles a kink, where the difference quotient does not
/// estimate the derivative; such coordinates are counted and skipped, and
/// at least 95% of all coordinates must be checked.
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (h, floor) = (1e-4, 1e-6);
    let mut worst: f64 = 0.0;
    let (mut checked, mut kinked) = (0usize, 0usize);
    for cfg in 0..20u64 {
        let mut r = substream(cfg, Stream::Dump, 1);
        let ds = synth(3, 4, 24, 0.0, cfg, (3, 0, 0));
        let spec = EpisodeSpec::new(2, 2, 1 + (cfg as usize % 2), Split::Train);
        let ep = sample_episode(&ds, &spec, &mut r).unwrap();
        let mut m = model(tiny_arch(24, 2, 3 + cfg as usize % 2), cfg);
        // Random, non-trivial BN affine parameters and biases.
        for t in m.params.tensors_mut() {
            if t.ndim() == 1 {
                for v in t.data_mut() {
                    *v += 0.3 * r.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let mask =
            (cfg % 2 == 1).then(|| TaskDropoutMask::sample(&mut r, 0.7, m.arch().embed_filters).unwrap());
        let shuffle = substream(cfg, Stream::TrainShuffle, 0);
        let (_, grads) = m
            .loss_and_grads(&ep, mask.as_ref(), &mut shuffle.clone())
            .unwrap();
        let forward = |m: &FewShotModel| {
            let mut g = Graph::new();
            let pv = m.params.register(&mut g, false);
            let out = network::episode_forward(
                &mut g,
                &pv,
                m.arch(),
                m.options,
                &ep,
                mask.as_ref(),
                &mut shuffle.clone(),
            )
            .unwrap();
            (g.value(out.loss).item().unwrap(), g.branch_pattern())
        };
        let (_, base) = forward(&m);
        for (i, grad) in grads.iter().enumerate() {
            for j in 0..grad.numel() {
                let mut plus = m.clone();
                plus.params.tensors_mut()[i].data_mut()[j] += h;
                let mut minus = m.clone();
                minus.params.tensors_mut()[i].data_mut()[j] -= h;
                let ((lp, pp), (lm, pm)) = (forward(&plus), forward(&minus));
                if pp != base || pm != base {
                    kinked += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * h);
                let a = grad.data()[j];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let coverage = checked as f64 / (checked + kinked) as f64;
    check(
        worst < 1e-4 && coverage >= 0.95 && secs < 120.0,
        format!(
            "20 configs, {checked} gradients checked, {kinked} straddling a kink skipped, max rel err {worst:.2e}, {secs:.1}s"
        ),
    )
}

/// Zeroed attention head reduces to class means and to the mean baseline.
fn protonets_reduction() -> Outcome {
    let start = Instant::now();
    let ds = synth(12, 12, 28, 0.0, 11, (6, 0, 6));
    let mut attn = model(Architecture::standard(1, 28, false, 5), 11);
    attn.params.zero_attention_fc();
    let mut r = stream(11, Stream::Dump);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let ep = sample_episode(&ds, &EpisodeSpec::new(5, 5, 1, Split::Test), &mut r).unwrap();
        let embs = attn.embeddings(&ep.support, &ep.support_labels, None).unwrap();
        for class in embs.chunks_exact(5) {
            let rep = attn.aggregate_kshot(class).unwrap().maps;
            for (i, v) in rep.data().iter().enumerate() {
                let mean = class.iter().map(|e| e.maps.data()[i]).sum::<f64>() / 5.0;
                worst = worst.max((v - mean).abs());
            }
        }
    }
    let mut baseline = attn.clone();
    baseline.options.mode = AggregationMode::Mean;
    let spec = EpisodeSpec::new(5, 5, 5, Split::Test);
    let a = meta_test(&attn, &ds, &spec, 15, 3, 3).unwrap();
    let b = meta_test(&baseline, &ds, &spec, 15, 3, 3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && a == b && secs < 60.0,
        format!(
            "max |rep - mean| {worst:.1e}, reports identical: {}, {secs:.1}s",
            a == b
        ),
    )
}

/// K-shot weights and classify outputs are distributions.
fn normalization_suite() -> Outcome {
    let mut r = stream(21, Stream::Dump);
    let mut calls = 0;
    let mut worst: f64 = 0.0;
    let mut min_weight = f64::INFINITY;
    for trial in 0..1000u64 {
        let mut m = model(tiny_arch(24, 5, 4), trial % 10);
        if trial % 3 == 0 {
            for v in m.params.fc_weight.data_mut() {
                *v *= 10.0;
            }
        }
        let k = 1 + (trial as usize % 5);
        let embs: Vec<Embedding> = (0..k)
            .map(|i| Embedding {
                maps: randn(&[4, 3, 3], &mut r),
                class_id: 0,
                example_id: i,
            })
            .collect();
        let refs: Vec<&Embedding> = embs.iter().collect();
        let stacks: Vec<_> = (0..4)
            .map(|c| fewshot::model::ChannelStack::gather(&refs, c).unwrap())
            .collect();
        for w in m.attention_weights(&stacks, true).unwrap() {
            worst = worst.max((w.w.iter().sum::<f64>() - 1.0).abs());
            min_weight = min_weight.min(w.w.iter().copied().fold(f64::INFINITY, f64::min));
        }
        calls += 1;

        let ways = 2 + (trial as usize % 9);
        let scale = [0.1, 1.0, 10.0][trial as usize % 3];
        let reps: Vec<Tensor> = (0..ways).map(|_| randn(&[6], &mut r)).collect();
        let mut q = randn(&[6], &mut r);
        q.data_mut().iter_mut().for_each(|v| *v *= scale);
        let p = classify(&q, &reps).unwrap();
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        calls += 1;
    }
    check(
        worst <= 1e-9 && min_weight > 0.0,
        format!("{calls} calls, max |sum - 1| {worst:.1e}, min weight {min_weight:.2e}"),
    )
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn run_op(
    inputs: &[Tensor],
    op: impl Fn(&mut Graph, &[fewshot::graph::Var]) -> fewshot::graph::Var,
) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars);
    g.value(out).data().to_vec()
}

/// Each layer against a brute-force oracle on 100 random instances.
fn layer_oracles() -> Outcome {
    let mut r = stream(31, Stream::Dump);
    let mut worst = [0.0f64; 6];
    for _ in 0..100 {
        let dim = |r: &mut Rng, lo: usize, hi: usize| r.random_range(lo..=hi);

        // conv2d: direct sliding window.
        let (n, cin, cout, h, w) = (
            dim(&mut r, 1, 3),
            dim(&mut r, 1, 4),
            dim(&mut r, 1, 4),
            dim(&mut r, 1, 8),
            dim(&mut r, 1, 8),
        );
        let (x, k, b) = (
            randn(&[n, cin, h, w], &mut r),
            randn(&[cout, cin, 3, 3], &mut r),
            randn(&[cout], &mut r),
        );
        let got = run_op(&[x.clone(), k.clone(), b.clone()], |g, v| {
            g.conv2d(v[0], v[1], v[2]).unwrap()
        });
        let mut want = Vec::new();
        for ni in 0..n {
            for o in 0..cout {
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for di in -1..=1isize {
                                for dj in -1..=1isize {
                                    let (si, sj) = (i + di, j + dj);
                                    if (0..h as isize).contains(&si) && (0..w as isize).contains(&sj) {
                                        let xv =
                                            x.data()[((ni * cin + c) * h + si as usize) * w + sj as usize];
                                        let kv = k.data()
                                            [((o * cin + c) * 3 + (di + 1) as usize) * 3 + (dj + 1) as usize];
                                        acc += xv * kv;
                                    }
                                }
                            }
                        }
                        want.push(acc);
                    }
                }
            }
        }
        worst[0] = worst[0].max(rel(&got, &want));

        // linear: triple loop.
        let (rows, fin, fout) = (dim(&mut r, 1, 6), dim(&mut r, 1, 9), dim(&mut r, 1, 6));
        let (x, wt, b) = (
            randn(&[rows, fin], &mut r),
            randn(&[fout, fin], &mut r),
            randn(&[fout], &mut r),
        );
        let got = run_op(&[x.clone(), wt.clone(), b.clone()], |g, v| {
            g.linear(v[0], v[1], v[2]).unwrap()
        });
        let mut want = Vec::new();
        for i in 0..rows {
            for o in 0..fout {
                let mut acc = b.data()[o];
                for f in 0..fin {
                    acc += x.data()[i * fin + f] * wt.data()[o * fin + f];
                }
                want.push(acc);
            }
        }
        worst[1] = worst[1].max(rel(&got, &want));

        // maxpool2: window max with floor.
        let (n, c, h, w) = (
            dim(&mut r, 1, 3),
            dim(&mut r, 1, 3),
            dim(&mut r, 2, 9),
            dim(&mut r, 2, 9),
        );
        let x = randn(&[n, c, h, w], &mut r);
        let got = run_op(std::slice::from_ref(&x), |g, v| g.maxpool2(v[0]).unwrap());
        let mut want = Vec::new();
        for p in 0..n * c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let at = |a: usize, b: usize| x.data()[p * h * w + (2 * i + a) * w + 2 * j + b];
                    want.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                }
            }
        }
        worst[2] = worst[2].max(rel(&got, &want));

        // batchnorm: two-pass mean and population variance per channel.
        let (n, c, hw) = (dim(&mut r, 2, 6), dim(&mut r, 1, 4), dim(&mut r, 1, 5));
        let x = randn(&[n, c, hw, hw], &mut r);
        let (gamma, beta) = (randn(&[c], &mut r), randn(&[c], &mut r));
        let got = run_op(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batchnorm(v[0], v[1], v[2], 1e-5).unwrap()
        });
        let plane = hw * hw;
        let mut want = vec![0.0; x.numel()];
        for ch in 0..c {
            let idx: Vec<usize> = (0..n)
                .flat_map(|ni| (0..plane).map(move |p| (ni * c + ch) * plane + p))
                .collect();
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / idx.len() as f64;
            let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                want[i] = gamma.data()[ch] * (x.data()[i] - mean) / (var + 1e-5).sqrt() + beta.data()[ch];
            }
        }
        worst[3] = worst[3].max(rel(&got, &want));

        // resize: per-pixel evaluation of the half-pixel-centre formula.
        let (c, h, w, oh, ow) = (
            dim(&mut r, 1, 3),
            dim(&mut r, 1, 9),
            dim(&mut r, 1, 9),
            dim(&mut r, 1, 12),
            dim(&mut r, 1, 12),
        );
        let img = Tensor::from_fn(&[c, h, w], |_| r.random::<f64>());
        let got = resize_bilinear(&img, oh, ow).unwrap();
        let mut want = Vec::new();
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let sy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
                        .max(0.0)
                        .min((h - 1) as f64);
                    let sx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
                        .max(0.0)
                        .min((w - 1) as f64);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let p = |y: usize, x: usize| img.data()[(ch * h + y) * w + x];
                    want.push(
                        p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                            + p(y0, x1) * (1.0 - fy) * fx
                            + p(y1, x0) * fy * (1.0 - fx)
                            + p(y1, x1) * fy * fx,
                    );
                }
            }
        }
        worst[4] = worst[4].max(rel(got.data(), &want));

        // rotation: transpose, then reverse the row order.
        let (c, s) = (dim(&mut r, 1, 3), dim(&mut r, 1, 9));
        let img = Tensor::from_fn(&[c, s, s], |_| r.random::<f64>());
        let got = rotate90(&img).unwrap();
        let mut want = Vec::new();
        for ch in 0..c {
            let grid: Vec<Vec<f64>> = (0..s)
                .map(|y| (0..s).map(|x| img.data()[(ch * s + y) * s + x]).collect())
                .collect();
            let mut t: Vec<Vec<f64>> = (0..s).map(|i| (0..s).map(|j| grid[j][i]).collect()).collect();
            t.reverse();
            want.extend(t.into_iter().flatten());
        }
        worst[5] = worst[5].max(rel(got.data(), &want));
    }
    let names = ["conv2d", "linear", "maxpool2", "batchnorm", "resize", "rotation"];
    let detail = names
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        worst.iter().all(|&w| w < 1e-10),
        format!("100 instances each: {detail}"),
    )
}

fn desk_spec(queries: usize) -> EpisodeSpec {
    EpisodeSpec::new(5, 1, queries, Split::Train)
}

/// 20/5/5 synthetic classes, 5-way 1-shot, 2,000 training episodes.
fn desk_scale_learning(trained: &mut Option<FewShotModel>) -> Outcome {
    let start = Instant::now();
    let ds = synth(30, 20, 28, 0.0, 0, (20, 5, 5));
    let cfg = TrainConfig::new(desk_spec(5), 2000, 0);
    let outcome = meta_train(model(Architecture::standard(1, 28, false, 5), 0), &ds, &cfg).unwrap();
    let report = meta_test(
        &outcome.best,
        &ds,
        &desk_spec(5).with_split(Split::Test),
        100,
        0,
        10,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    *trained = Some(outcome.best);
    check(
        report.mean >= 0.60
            && report.per_seed.len() == 10
            && report.best >= report.average
            && report.average >= report.worst
            && secs < 900.0,
        format!(
            "mean {:.4} +- {:.4} (best {:.4}, average {:.4}, worst {:.4}), validation {:.3} -> {:.3}, {secs:.0}s",
            report.mean,
            report.half_width,
            report.best,
            report.average,
            report.worst,
            outcome.initial_val.unwrap_or(f64::NAN),
            outcome.best_val.unwrap_or(f64::NAN),
        ),
    )
}

/// keep = 0.5 against keep = 1.0 on outlier-planted data, 5 training
/// seeds, identical test tasks.
fn dropout_ablation() -> Outcome {
    let ds = synth(30, 20, 28, 0.15, 0, (20, 5, 5));
    let mut acc = [0.0; 2];
    for seed in 0..5u64 {
        for (slot, keep) in [0.5, 1.0].into_iter().enumerate() {
            let mut cfg = TrainConfig::new(desk_spec(5), 400, seed);
            cfg.keep = keep;
            cfg.val_tasks = 0;
            let m = meta_train(model(Architecture::standard(1, 28, false, 5), seed), &ds, &cfg)
                .unwrap()
                .model;
            acc[slot] += meta_test(&m, &ds, &desk_spec(5).with_split(Split::Test), 300, 1000, 1)
                .unwrap()
                .mean
                / 5.0;
        }
    }
    check(
        acc[0] >= acc[1] - 0.01,
        format!(
            "keep 0.5: {:.4}, keep 1.0: {:.4} (5 seeds, 400 episodes each)",
            acc[0], acc[1]
        ),
    )
}

/// Trained 5-shot aggregation stays closer to the clean centroid than the
/// plain mean when one support example per class is an intruder.
fn outlier_robustness() -> Outcome {
    let ds = synth(30, 20, 28, 0.2, 3, (20, 5, 5));
    let mut cfg = TrainConfig::new(EpisodeSpec::new(5, 5, 5, Split::Train), 2000, 3);
    cfg.val_tasks = 0;
    let m = meta_train(model(Architecture::standard(1, 28, false, 5), 3), &ds, &cfg)
        .unwrap()
        .model;
    let probe = outlier_probe(&m, &ds, Split::Test, 5, 5, 100, &mut stream(3, Stream::Dump)).unwrap();
    check(
        probe.representative <= probe.plain_mean,
        format!(
            "trained 2,000 episodes; mean distance to clean centroid over 100 probe episodes: representative {:.4}, plain mean {:.4}",
            probe.representative, probe.plain_mean
        ),
    )
}

/// Learning-rate schedule, meta-batch size, dropout-free meta-test and the
/// interval formula.
fn protocol_fidelity(trained: Option<&FewShotModel>) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let schedule = TrainConfig::new(desk_spec(5), 1, 0).schedule();
    let lrs = (
        schedule.lr_at(20_000),
        schedule.lr_at(40_000),
        schedule.lr_at(19_999),
    );
    ok &= lrs == (0.0005, 0.00025, 0.001);
    notes.push(format!("lr {:?}", lrs));

    let ds = synth(8, 6, 12, 0.0, 5, (8, 0, 0));
    let m = model(tiny_arch(12, 5, 4), 5);
    let mut cfg = TrainConfig::new(EpisodeSpec::new(5, 1, 1, Split::Train), 12, 5);
    cfg.val_tasks = 0;
    let out = meta_train(m.clone(), &ds, &cfg).unwrap();
    let sizes: Vec<usize> = out.steps.iter().map(|s| s.episodes).collect();
    ok &= sizes == [4, 4, 4] && out.adam.t == 3;
    notes.push(format!("steps {sizes:?}"));

    // Positive control: a training forward does record dropout.
    let ep = sample_episode(&ds, &cfg.spec, &mut stream(5, Stream::Dump)).unwrap();
    let mask = TaskDropoutMask::sample(&mut stream(5, Stream::DropoutMasks), 0.5, 4).unwrap();
    let mut g = Graph::new();
    let pv = m.params.register(&mut g, true);
    network::episode_forward(
        &mut g,
        &pv,
        m.arch(),
        m.options,
        &ep,
        Some(&mask),
        &mut stream(5, Stream::Dump),
    )
    .unwrap();
    let train_drops = g.count(OpKind::Dropout);
    let test_drops = match trained {
        Some(t) => {
            let test = synth(30, 20, 28, 0.0, 0, (20, 5, 5));
            meta_test(t, &test, &desk_spec(5).with_split(Split::Test), 20, 0, 2)
                .unwrap()
                .dropout_ops
        }
        None => {
            meta_test(
                &out.model,
                &ds,
                &EpisodeSpec::new(5, 1, 1, Split::Train),
                20,
                0,
                2,
            )
            .unwrap()
            .dropout_ops
        }
    };
    ok &= train_drops == 4 && test_drops == 0;
    notes.push(format!("dropout ops train {train_drops}, meta-test {test_drops}"));

    let (m01, h01) = confidence_interval(&[0.0, 1.0]).unwrap();
    let hand = 1.96 * (0.5f64).sqrt() / (2.0f64).sqrt();
    let flat = confidence_interval(&[0.8; 600]).unwrap();
    ok &= m01 == 0.5 && h01 == hand && (h01 - 0.98).abs() < 1e-12 && flat == (0.8, 0.0);
    notes.push(format!("ci {{0,1}} = {m01} +- {h01:.6}, 600 x 0.8 = {flat:?}"));
    check(ok, notes.join("; "))
}

fn cli_run(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_fewshot"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Two train + eval runs of the binary give byte-identical artifacts.
fn determinism() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "ways = 3\nqueries = 3\nimage_size = 16\nsynth_classes = 12\nsynth_per_class = 8\nsplit = 6,3,3\n\
         episodes = 40\nval_every = 20\nval_tasks = 10\neval_seeds = 3\neval_tasks = 20\nkeep = 0.5\nseed = 9\n",
    )
    .unwrap();
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let cfg = cfg.to_str().unwrap();
        cli_run(dir.path(), &["--quiet", "--out-dir", name, "train", cfg]);
        let ckpt = format!("{name}/best.bin");
        cli_run(dir.path(), &["--quiet", "--out-dir", name, "eval", &ckpt, cfg]);
        let read = |f: &str| fs::read(dir.path().join(name).join(f)).unwrap();
        artifacts.push([
            read("train_log.tsv"),
            read("eval_report.txt"),
            read("eval_seeds.tsv"),
            read("best.bin"),
        ]);
    }
    let same = artifacts[0] == artifacts[1];
    check(
        same,
        format!("train_log, eval_report, eval_seeds and best.bin identical: {same}"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    std::panic::set_hook(Box::new(|info| eprintln!("{info}")));

    let mut trained = None;
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n} ({name}): PASS - {d} [{took:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {d} [{took:.1}s]");
            }
        }
    };
    run(1, "gradient suite", &mut gradient_suite);
    run(2, "mean-aggregation reduction", &mut protonets_reduction);
    run(3, "normalization", &mut normalization_suite);
    run(4, "layer oracles", &mut layer_oracles);
    run(5, "desk-scale learning", &mut || {
        desk_scale_learning(&mut trained)
    });
    run(6, "dropout ablation", &mut dropout_ablation);
    run(7, "outlier robustness", &mut outlier_robustness);
    run(8, "protocol fidelity", &mut || {
        protocol_fidelity(trained.as_ref())
    });
    run(9, "determinism", &mut determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
