//! End-to-end acceptance suite. Each criterion prints one pass/fail line;
//! oracles here are written independently of the library internals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sne::arch::{build_model, tiny_spec, vgg_spec, resnet_spec, LayerSummary, LayerTrace, ModelInstance, NetKind};
use sne::autodiff::{grad_check, SpikeMode, Tape};
use sne::data::{add_gaussian_noise, synth_blobs, ImageDataset, NoiseSpec};
use sne::energy::{count_macs, ledger_from_trace, merge_ledgers, EnergyLedger, LayerEnergy};
use sne::ensemble::{desk_ensemble, evaluate, train_ensemble, ActivationPolicy, EnsembleModel};
use sne::optim::OptimizerConfig;
use sne::partition::{
    agglomerative_partition, balanced_kmeans_partition, fixed_partition, kmeans_partition,
    validate_partition, FeatureMatrix, FixedMode,
};
use sne::snn::{lif_step, LifParams};
use sne::teacher::{finetune_teacher, train_teacher};
use sne::Tensor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

fn check(id: u32, name: &str, body: impl FnOnce()) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    match outcome {
        Ok(()) => println!("criterion {:2} ({}): pass", id, name),
        Err(e) => {
            println!("criterion {:2} ({}): FAIL", id, name);
            std::panic::resume_unwind(e);
        }
    }
}

/// One synthetic draw with shared class centers, split into disjoint
/// train/test halves.
fn desk_splits(per_class: usize, seed: u64) -> (ImageDataset, ImageDataset) {
    let full = synth_blobs(3, per_class * 2, &[3, 8, 8], 6.0, seed).unwrap();
    let pick = |offset: usize, split: &str| {
        let idx: Vec<usize> = (offset..full.len()).step_by(2).collect();
        let (images, labels) = full.batch(&idx);
        ImageDataset { images, labels, classes: full.classes, split: split.into() }
    };
    (pick(0, "train"), pick(1, "test"))
}

fn trained_teacher(feature_dim: usize, data: &ImageDataset, seed: u64) -> ModelInstance {
    let spec = tiny_spec(NetKind::Ann, [3, 8, 8], 3, feature_dim, true);
    let mut model = build_model(&spec, seed).unwrap();
    train_teacher(&mut model, data, 20, 8, &OptimizerConfig::adam(5e-3), seed + 1).unwrap();
    model
}

#[test]
fn criterion_01_static_counts() {
    check(1, "static parameter and mac counts", || {
        let within = |x: u64, target: f64, tol: f64| {
            let rel = (x as f64 - target).abs() / target;
            assert!(rel < tol, "count {} vs target {} (rel {:.4})", x, target, rel);
        };
        within(vgg_spec(19, false, NetKind::Ann).unwrap().param_count().unwrap(), 20.0e6, 0.02);
        within(vgg_spec(11, false, NetKind::Ann).unwrap().param_count().unwrap(), 9.3e6, 0.02);
        within(resnet_spec(18, 64, NetKind::Ann).unwrap().param_count().unwrap(), 11.3e6, 0.02);
        let macs = |spec: &sne::arch::ArchSpec| -> u64 {
            count_macs(spec).unwrap().iter().map(|(_, m)| m).sum()
        };
        within(macs(&resnet_spec(18, 64, NetKind::Ann).unwrap()), 555.0e6, 0.05);
        within(macs(&vgg_spec(19, false, NetKind::Ann).unwrap()), 398.0e6, 0.05);
    });
}

#[test]
fn criterion_02_gradcheck() {
    check(2, "soft-forward gradients vs central differences", || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-5;
        // dense head: matmul + bias + cross-entropy
        let pts = vec![
            Tensor::uniform(&[4, 3], 1.0, &mut rng),
            Tensor::uniform(&[3, 3], 1.0, &mut rng),
            Tensor::uniform(&[3], 1.0, &mut rng),
        ];
        let err = grad_check(
            |t: &mut Tape, v: &[sne::autodiff::Var]| {
                let z = t.matmul(v[0], v[1]).unwrap();
                let z = t.add_row(z, v[2]).unwrap();
                t.ce_loss(z, &[0, 2, 1, 0]).unwrap()
            },
            &pts,
            h,
        );
        assert!(err < 1e-4, "dense graph grad error {}", err);

        // conv + bias + batch norm + relu + pool + gap
        let pts = vec![
            Tensor::uniform(&[2, 2, 6, 6], 1.0, &mut rng),
            Tensor::uniform(&[3, 2, 3, 3], 0.5, &mut rng),
            Tensor::uniform(&[3], 0.5, &mut rng),
            {
                let mut gamma = Tensor::uniform(&[3], 0.5, &mut rng);
                gamma.data.iter_mut().for_each(|x| *x += 1.0);
                gamma
            },
            Tensor::uniform(&[3], 0.5, &mut rng),
        ];
        let err = grad_check(
            |t: &mut Tape, v: &[sne::autodiff::Var]| {
                let z = t.conv2d(v[0], v[1], 1, 1).unwrap();
                let z = t.add_channel_bias(z, v[2]).unwrap();
                let (z, _) = t.batch_norm(z, v[3], v[4], None, 1e-5).unwrap();
                let z = t.relu(z);
                let z = t.maxpool2d(z, 2, 2).unwrap();
                let z = t.global_avg_pool(z).unwrap();
                t.sum(z)
            },
            &pts,
            h,
        );
        assert!(err < 1e-4, "conv graph grad error {}", err);

        // three-step LIF chain in soft mode
        let lif = LifParams::default();
        let pts = vec![
            Tensor::uniform(&[2, 4], 1.0, &mut rng),
            Tensor::uniform(&[4, 4], 1.0, &mut rng),
            Tensor::uniform(&[2, 4], 0.5, &mut rng),
        ];
        let err = grad_check(
            |t: &mut Tape, v: &[sne::autodiff::Var]| {
                let drive = t.matmul(v[0], v[1]).unwrap();
                let mut state = v[2];
                let mut total = None;
                for _ in 0..3 {
                    let (s, next) = lif_step(t, state, drive, &lif, SpikeMode::Soft).unwrap();
                    state = next;
                    let part = t.sum(s);
                    total = Some(match total {
                        None => part,
                        Some(acc) => t.add(acc, part).unwrap(),
                    });
                }
                total.unwrap()
            },
            &pts,
            h,
        );
        assert!(err < 1e-4, "lif chain grad error {}", err);
    });
}

#[test]
fn criterion_03_lif_traces() {
    check(3, "hand-computed lif traces", || {
        let lif = LifParams::default(); // tau 2, v_th 1, v_reset 0
        // charge and fire every step: H = 0 + (2.5 - 0)/2 = 1.25 > 1, reset to 0
        let (spikes, volts) = run2(2.5, 0.0, 3, &lif);
        assert_eq!(spikes, vec![1.0, 1.0, 1.0]);
        for v in volts {
            assert!((v - 0.0).abs() < 1e-6);
        }
        // pure leak from V = 1: 1 -> 0.5 -> 0.25 -> 0.125, never fires
        let (spikes, volts) = run2(0.0, 1.0, 3, &lif);
        assert_eq!(spikes, vec![0.0, 0.0, 0.0]);
        for (v, want) in volts.iter().zip([0.5, 0.25, 0.125]) {
            assert!((v - want).abs() < 1e-6, "{} vs {}", v, want);
        }
        // subthreshold charging toward x = 0.5: H = 0.25, 0.375, 0.4375
        let (spikes, volts) = run2(0.5, 0.0, 3, &lif);
        assert_eq!(spikes, vec![0.0, 0.0, 0.0]);
        for (v, want) in volts.iter().zip([0.25, 0.375, 0.4375]) {
            assert!((v - want).abs() < 1e-6, "{} vs {}", v, want);
        }
    });
}

fn run2(drive: f64, v0: f64, steps: usize, lif: &LifParams) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1], vec![drive]).unwrap());
    let mut state = tape.leaf(Tensor::new(vec![1, 1], vec![v0]).unwrap());
    let mut spikes = Vec::new();
    let mut volts = Vec::new();
    for _ in 0..steps {
        let (s, next) = lif_step(&mut tape, state, x, lif, SpikeMode::Hard).unwrap();
        spikes.push(tape.value(s).data[0]);
        volts.push(tape.value(next).data[0]);
        state = next;
    }
    (spikes, volts)
}

#[test]
fn criterion_04_disentanglement_optimum() {
    check(4, "cluster distance reaches the geometric optimum", || {
        // N = 2: antiparallel halves, optimum distance 2
        let (train, _) = desk_splits(16, 900);
        let mut teacher = trained_teacher(8, &train, 901);
        let hist =
            finetune_teacher(&mut teacher, &train, 2, -2.0, 40, 8, &OptimizerConfig::adam(5e-3), 902)
                .unwrap();
        let d2 = hist.last().unwrap().cluster_distance;
        assert!((d2 - 2.0).abs() < 0.05, "N=2 distance {}", d2);

        // N = 4: regular tetrahedron, optimum sqrt(8/3)
        let mut teacher = trained_teacher(32, &train, 903);
        let hist = finetune_teacher(
            &mut teacher,
            &train,
            4,
            -2.0,
            20,
            8,
            &OptimizerConfig::adam(1e-2),
            904,
        )
        .unwrap();
        let d4 = hist.last().unwrap().cluster_distance;
        let want = (8.0f64 / 3.0).sqrt();
        assert!((d4 - want).abs() < 0.05, "N=4 distance {} vs {}", d4, want);
    });
}

// --- independent partition oracles -------------------------------------

fn canonical(subsets: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = subsets
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut s = s.clone();
            s.sort_unstable();
            s
        })
        .collect();
    out.sort();
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn objective(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let m = points[0].len();
    let mut cents = vec![vec![0.0; m]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (c, x) in cents[a].iter_mut().zip(p) {
            *c += x;
        }
    }
    for (c, &n) in cents.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &cents[a])).sum()
}

/// Minimum k-means objective over every surjective assignment.
fn exhaustive_best_objective(points: &[Vec<f64>], k: usize) -> f64 {
    let d = points.len();
    let mut assign = vec![0usize; d];
    let mut best = f64::INFINITY;
    loop {
        let mut present = vec![false; k];
        assign.iter().for_each(|&a| present[a] = true);
        if present.iter().all(|&p| p) {
            best = best.min(objective(points, &assign, k));
        }
        let mut pos = 0;
        loop {
            if pos == d {
                return best;
            }
            assign[pos] += 1;
            if assign[pos] < k {
                break;
            }
            assign[pos] = 0;
            pos += 1;
        }
    }
}

/// Complete-linkage merging over cosine distance, recomputed from scratch
/// at every step; ties merge the lowest-indexed pair.
fn naive_complete_linkage(features: &FeatureMatrix, n: usize) -> Vec<Vec<usize>> {
    let points = features.normalized_columns();
    let d = points.len();
    let mut base = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let dot: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum();
                base[i][j] = 1.0 - dot;
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    while clusters.len() > n {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let mut link = f64::NEG_INFINITY;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        link = link.max(base[a][b]);
                    }
                }
                if best.map_or(true, |(_, _, bd)| link < bd) {
                    best = Some((i, j, link));
                }
            }
        }
        let (i, j, _) = best.unwrap();
        let moved = clusters.remove(j);
        clusters[i].extend(moved);
        clusters[i].sort_unstable();
    }
    clusters
}

/// Columns aligned to planted directions plus noise; separable instances
/// where the global clustering optimum is unambiguous.
fn planted(m: usize, groups: &[usize], noise: f64, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = groups.iter().max().unwrap() + 1;
    let dirs: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();
    let d = groups.len();
    let mut data = vec![0.0; m * d];
    for (j, &g) in groups.iter().enumerate() {
        for i in 0..m {
            data[i * d + j] = dirs[g][i] + noise * rng.gen_range(-1.0..1.0);
        }
    }
    FeatureMatrix::new(Tensor::new(vec![m, d], data).unwrap()).unwrap()
}

#[test]
fn criterion_05_partition_correctness() {
    check(5, "partition schemes valid and oracle-exact", || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // validity over 50 random matrices, all four schemes
        for i in 0..50u64 {
            let m = rng.gen_range(6..14);
            let d = rng.gen_range(4..13);
            let n = rng.gen_range(2..=4.min(d));
            let f = FeatureMatrix::new(Tensor::uniform(&[m, d], 1.0, &mut rng)).unwrap();
            let plans = [
                fixed_partition(d, n, FixedMode::Random { seed: i }).unwrap(),
                kmeans_partition(&f, n, i).unwrap(),
                balanced_kmeans_partition(&f, n, i).unwrap(),
                agglomerative_partition(&f, n).unwrap(),
            ];
            for plan in &plans {
                validate_partition(plan, d).unwrap();
            }
            let sizes: Vec<usize> = plans[2].subsets.iter().map(|s| s.len()).collect();
            let (mx, mn) = (sizes.iter().max().unwrap(), sizes.iter().min().unwrap());
            assert!(mx - mn <= 1, "balanced sizes {:?}", sizes);
        }
        // oracle exactness for D <= 8
        for seed in 0..10u64 {
            let groups: &[usize] = if seed % 2 == 0 { &[0, 1, 0, 1, 0, 1] } else { &[0, 0, 1, 1, 2, 2, 0, 1] };
            let n = groups.iter().max().unwrap() + 1;
            let f = planted(10, groups, 0.1, 1000 + seed);
            let d = groups.len();

            let plan = kmeans_partition(&f, n, seed).unwrap();
            let points = f.normalized_columns();
            let mut assign = vec![0usize; d];
            for (ci, s) in plan.subsets.iter().enumerate() {
                for &j in s {
                    assign[j] = ci;
                }
            }
            let got = objective(&points, &assign, n);
            let best = exhaustive_best_objective(&points, n);
            assert!((got - best).abs() < 1e-9, "kmeans {} vs oracle {}", got, best);

            let plan = agglomerative_partition(&f, n).unwrap();
            let oracle = naive_complete_linkage(&f, n);
            assert_eq!(canonical(&plan.subsets), canonical(&oracle));
        }
    });
}

#[test]
fn criterion_06_kd_benefit() {
    check(6, "kd-weighted student at least matches the baseline", || {
        let run = |alpha: f64, seed: u64| -> f64 {
            let (train, test) = desk_splits(16, seed);
            let mut teacher = trained_teacher(8, &train, seed + 1);
            let mut model = desk_ensemble(1, 8, 3, [3, 8, 8], 4, alpha, seed + 2).unwrap();
            train_ensemble(
                &mut model,
                &mut teacher,
                &train,
                &ActivationPolicy::All,
                20,
                8,
                &OptimizerConfig::adam(1e-2),
                seed + 3,
            )
            .unwrap();
            evaluate(&mut model, &test, &ActivationPolicy::All, 1, 8, seed + 4)
                .unwrap()
                .accuracy
        };
        let seeds = [210u64, 220, 230];
        let with_kd: f64 = seeds.iter().map(|&s| run(2.0, s)).sum::<f64>() / 3.0;
        let without: f64 = seeds.iter().map(|&s| run(0.0, s)).sum::<f64>() / 3.0;
        assert!(
            with_kd + 1e-12 >= without,
            "alpha=2 mean {} below alpha=0 mean {}",
            with_kd,
            without
        );
    });
}

/// Trained 4-student desk ensemble shared by the dropout and noise
/// criteria; training once keeps the suite inside its time budget.
fn trained_four_student() -> &'static (EnsembleModel, ImageDataset) {
    static CELL: OnceLock<(EnsembleModel, ImageDataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train, test) = desk_splits(16, 300);
        let mut teacher = trained_teacher(8, &train, 301);
        let mut model = desk_ensemble(4, 8, 3, [3, 8, 8], 4, 2.0, 302).unwrap();
        train_ensemble(
            &mut model,
            &mut teacher,
            &train,
            &ActivationPolicy::All,
            20,
            8,
            &OptimizerConfig::adam(1e-2),
            303,
        )
        .unwrap();
        (model, test)
    })
}

#[test]
fn criterion_07_dropout_tradeoff() {
    check(7, "dropout trade-off shape", || {
        let (model, test) = trained_four_student();
        let mut model = model.clone();
        let n = model.students.len();
        let mut accs = Vec::new();
        let mut sems = Vec::new();
        let mut acs = Vec::new();
        for k in (1..=n).rev() {
            let res = evaluate(
                &mut model,
                test,
                &ActivationPolicy::StochasticEval { k },
                10,
                8,
                304,
            )
            .unwrap();
            accs.push(res.accuracy);
            sems.push(res.sem);
            acs.push(res.ledger.total_ac_ops());
        }
        // K = N is bitwise identical to the all-active evaluation
        let full = evaluate(&mut model, test, &ActivationPolicy::All, 10, 8, 304).unwrap();
        assert_eq!(full.accuracy.to_bits(), accs[0].to_bits());
        assert_eq!(full.ledger, {
            let res = evaluate(
                &mut model,
                test,
                &ActivationPolicy::StochasticEval { k: n },
                10,
                8,
                304,
            )
            .unwrap();
            res.ledger
        });
        for w in acs.windows(2) {
            assert!(w[1] < w[0], "ac ops not strictly decreasing: {:?}", acs);
        }
        for i in 1..accs.len() {
            assert!(
                accs[i] <= accs[i - 1] + sems[i] + sems[i - 1] + 1e-12,
                "accuracy increased from K={} to K={}: {:?} (sem {:?})",
                n - i + 1,
                n - i,
                accs,
                sems
            );
        }
    });
}

#[test]
fn criterion_08_energy_oracle() {
    check(8, "rate-based ac counts equal event enumeration", || {
        // two dense layers: 4 -> 3 (analog pixels) then 3 -> 2 (spikes)
        let summaries = vec![
            LayerSummary { label: "fc0".into(), macs_per_sample: 12, params: 15, out_neurons: 3 },
            LayerSummary { label: "fc1".into(), macs_per_sample: 6, params: 8, out_neurons: 2 },
        ];
        let t_steps = 4;
        let rows = 8; // T * B with B = 2
        // prescribed 0/1 spike matrix feeding fc1: rows x 3
        let spikes: Vec<f64> = vec![
            1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(spikes.len(), rows * 3);
        let count: f64 = spikes.iter().sum();
        let trace = vec![
            LayerTrace {
                label: "fc0".into(),
                mean_input_rate: 0.63,
                rows,
                input_numel: rows * 4,
                analog_input: true,
            },
            LayerTrace {
                label: "fc1".into(),
                mean_input_rate: count / (rows * 3) as f64,
                rows,
                input_numel: rows * 3,
                analog_input: false,
            },
        ];
        let ledger = ledger_from_trace(&summaries, &trace, t_steps).unwrap();
        // event-by-event: every input spike fans out to the 2 outputs
        let mut event_acs = 0u64;
        for s in &spikes {
            if *s > 0.5 {
                event_acs += 2;
            }
        }
        assert_eq!(ledger.layers[1].ac_ops, event_acs);
        assert_eq!(ledger.layers[1].spike_count, count as u64);
        assert_eq!(ledger.layers[0].mac_ops, 12 * rows as u64);
        assert_eq!(ledger.layers[0].ac_ops, 0);
        assert_eq!(ledger.input_layer_macs, 12 * rows as u64);

        // zero spikes cost nothing
        let mut quiet = trace.clone();
        quiet[1].mean_input_rate = 0.0;
        let silent = ledger_from_trace(&summaries, &quiet, t_steps).unwrap();
        assert_eq!(silent.layers[1].ac_ops, 0);
        assert_eq!(silent.total_ac_ops(), 0);

        // per-student additivity
        let merged = merge_ledgers(&[ledger.clone(), ledger.clone(), silent.clone()]).unwrap();
        assert_eq!(merged.total_ac_ops(), 2 * ledger.total_ac_ops());
        assert_eq!(merged.total_mac_ops(), 2 * ledger.total_mac_ops() + silent.total_mac_ops());
        let zipped: Vec<(&LayerEnergy, &LayerEnergy)> =
            merged.layers.iter().zip(&ledger.layers).collect();
        for (m, l) in zipped {
            assert_eq!(m.ac_ops, 2 * l.ac_ops);
        }
        let _: &EnergyLedger = &merged;
    });
}

#[test]
fn criterion_09_noise_protocol() {
    check(9, "gaussian noise protocol", || {
        let (model, test) = trained_four_student();
        let mut model = model.clone();

        // sigma = 0 is the identity, bitwise
        let mut rng = sne::rng::substream(400, "noise");
        let clean = add_gaussian_noise(test, &NoiseSpec { sigma: 0.0, seed: 400 }, &mut rng, false)
            .unwrap();
        assert_eq!(clean.images.data, test.images.data);
        let a = evaluate(&mut model, test, &ActivationPolicy::All, 1, 8, 401).unwrap();
        let b = evaluate(&mut model, &clean, &ActivationPolicy::All, 1, 8, 401).unwrap();
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());

        // empirical sd within 2% of sigma over > 10k pixels
        let big = synth_blobs(3, 32, &[3, 8, 8], 6.0, 402).unwrap();
        assert!(big.images.len() >= 10_000);
        let sigma = 0.05;
        let mut rng = sne::rng::substream(403, "noise");
        let noisy =
            add_gaussian_noise(&big, &NoiseSpec { sigma, seed: 403 }, &mut rng, false).unwrap();
        let diffs: Vec<f64> = noisy
            .images
            .data
            .iter()
            .zip(&big.images.data)
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
            / (diffs.len() - 1) as f64)
            .sqrt();
        assert!((sd - sigma).abs() / sigma < 0.02, "sd {} vs sigma {}", sd, sigma);

        // accuracy non-increasing across the grid, 10 repeats per cell
        let sigmas = [0.0, 0.01, 0.03, 0.05, 0.07];
        let mut cells: Vec<(f64, f64)> = Vec::new();
        for (si, &s) in sigmas.iter().enumerate() {
            let mut accs = Vec::with_capacity(10);
            for r in 0..10 {
                let mut rng = sne::rng::substream(404, &format!("noise{}-{}", si, r));
                let noisy =
                    add_gaussian_noise(test, &NoiseSpec { sigma: s, seed: 404 }, &mut rng, false)
                        .unwrap();
                let res =
                    evaluate(&mut model, &noisy, &ActivationPolicy::All, 1, 8, 405).unwrap();
                accs.push(res.accuracy);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var =
                accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64;
            cells.push((mean, (var / accs.len() as f64).sqrt()));
        }
        for w in cells.windows(2) {
            let (prev, prev_sem) = w[0];
            let (next, next_sem) = w[1];
            assert!(
                next <= prev + prev_sem + next_sem + 1e-12,
                "accuracy rose with noise: {:?}",
                cells
            );
        }
    });
}

#[test]
fn criterion_10_determinism() {
    check(10, "bitwise replay of a full pipeline", || {
        let run = || {
            let (train, test) = desk_splits(16, 500);
            let spec = tiny_spec(NetKind::Ann, [3, 8, 8], 3, 8, true);
            let mut teacher = build_model(&spec, 501).unwrap();
            let thist =
                train_teacher(&mut teacher, &train, 5, 8, &OptimizerConfig::adam(5e-3), 502)
                    .unwrap();
            let mut model = desk_ensemble(2, 8, 3, [3, 8, 8], 4, 2.0, 503).unwrap();
            let ehist = train_ensemble(
                &mut model,
                &mut teacher,
                &train,
                &ActivationPolicy::All,
                3,
                8,
                &OptimizerConfig::adam(1e-2),
                504,
            )
            .unwrap();
            let eval = evaluate(&mut model, &test, &ActivationPolicy::All, 2, 8, 505).unwrap();
            (thist, ehist, eval, model.head_w.data.clone())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert!(a.3.iter().zip(&b.3).all(|(x, y)| x.to_bits() == y.to_bits()));
    });
}
