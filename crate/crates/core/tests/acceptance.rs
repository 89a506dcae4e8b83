//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line;
//! they run one after another inside a single test so that the timed ones
//! do not compete for the CPU.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use bbtrain_core::checkpoint::{decode, encode};
use bbtrain_core::data::{generate, Batcher, Generator};
use bbtrain_core::experiment::{run_training, CHECKPOINT_FILE, METRICS_FILE};
use bbtrain_core::hybridnet::{Activation, HybridSetup, Layer, LayerSpec, NetworkSpec, SurrogateInit};
use bbtrain_core::numlin::{Matrix, RngStream};
use bbtrain_core::photonics::{
    mrr_func, slm_matrix, transfer_matrix, BlackBoxLayer, BlockVariant, LayerKind, MeshLayout, MonarchShape, MRR_A,
    MRR_R,
};
use bbtrain_core::surrogate::{init_oracle, ipsi_update, transpose_probe, ProbeMode};
use bbtrain_core::zograd::{estimate_gradient, ZoConfig};
use bbtrain_core::{Network, RunConfig, Tensor, Trainer};
use common::*;
use nalgebra::DMatrix;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn matvec_layer(a: &Matrix) -> BlackBoxLayer {
    BlackBoxLayer::new(LayerKind::Matvec, a.cols(), a.rows())
        .unwrap()
        .with_params(a.as_slice().to_vec())
        .unwrap()
}

fn low_rank(d_out: usize, d_inp: usize, r: usize, s: &mut RngStream) -> Matrix {
    Matrix::from_vec(d_out, r, s.normal_vec(d_out * r)).matmul(&Matrix::from_vec(r, d_inp, s.normal_vec(r * d_inp)))
}

/// Least-squares slope of ln(err) against ln(budget).
fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let n: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    n / b.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn psi_exactness() -> Outcome {
    let started = Instant::now();
    let mut s = RngStream::new(1, "acceptance/psi");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let r = 1 + s.below(8);
        let d_out = r + s.below(65 - r);
        let d_inp = r + s.below(65 - r);
        let a0 = low_rank(d_out, d_inp, r, &mut s);
        let a1 = low_rank(d_out, d_inp, r, &mut s);
        let layer = matvec_layer(&a0);
        let sm = init_oracle(&layer, r).map_err(|e| e.to_string())?;
        let sm1 = ipsi_update(&sm, &layer, a0.as_slice(), a1.as_slice(), ProbeMode::Exact, &mut s)
            .map_err(|e| e.to_string())?;
        worst = worst.max(sm1.to_dense().sub(&a1).frobenius_norm());
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= 1e-8 && secs < 5.0,
        format!("max Frobenius error {worst:.2e} over 50 pairs (<= 1e-8), {secs:.2} s (< 5 s)"),
    )
}

fn transpose_probe_unbiased() -> Outcome {
    let (d_out, d_inp, r) = (12, 16, 4);
    let mut s = RngStream::new(2, "acceptance/probe");
    let a0 = Matrix::from_vec(d_out, d_inp, s.normal_vec(d_out * d_inp));
    let a1 = Matrix::from_vec(d_out, d_inp, s.normal_vec(d_out * d_inp));
    let layer = matvec_layer(&a0);
    let u = init_oracle(&layer, r).unwrap().u().clone();
    let truth = (to_na(&a1) - to_na(&a0)).transpose() * to_na(&u);
    let (w0, w1) = (a0.as_slice(), a1.as_slice());
    let predicted = |m: usize| ((d_inp as f64 + 1.0) / m as f64).sqrt() * truth.norm();

    let est = transpose_probe(&layer, w0, w1, &u, ProbeMode::Stochastic(10_000), &mut s).unwrap();
    let err = (to_na(&est) - &truth).norm();
    let se = predicted(10_000);

    let mut points = Vec::new();
    for m in [100usize, 1000, 10_000] {
        let mut e2 = 0.0;
        for _ in 0..10 {
            let e = transpose_probe(&layer, w0, w1, &u, ProbeMode::Stochastic(m), &mut s).unwrap();
            e2 += (to_na(&e) - &truth).norm_squared();
        }
        points.push((m as f64, (e2 / 10.0).sqrt() / truth.norm()));
    }
    let slope = ols_slope(&points);
    check(
        err <= 3.0 * se && (-0.6..=-0.4).contains(&slope),
        format!(
            "10^4-probe error {err:.4} vs 3 x predicted {:.4}; log-log slope {slope:.3} (-0.5 +/- 0.1)",
            3.0 * se
        ),
    )
}

fn zo_estimator() -> Outcome {
    let started = Instant::now();
    let mut layer = BlackBoxLayer::new(LayerKind::Matvec, 8, 8).unwrap();
    layer.init_params(&mut RngStream::new(3, "bb-init"));
    let mut s = RngStream::new(3, "acceptance/zo");
    let x = s.normal_vec(8);
    let v = s.normal_vec(8);
    let truth: Vec<f64> = (0..64).map(|k| v[k / 8] * x[k % 8]).collect();
    let w = layer.params().to_vec();
    let estimate = |m: usize, s: &mut RngStream| {
        let cfg = ZoConfig::new(1e-2, m).unwrap();
        estimate_gradient(&layer, &w, &x, &v, &cfg, s).unwrap().g
    };

    let single = rel(&estimate(10_000, &mut s), &truth);
    let mut mean = vec![0.0; 64];
    for _ in 0..10 {
        let g = estimate(10_000, &mut s);
        mean.iter_mut().zip(&g).for_each(|(m, g)| *m += g / 10.0);
    }
    let mean_err = rel(&mean, &truth);
    let mean_bound = 3.0 * (65.0f64 / 100_000.0).sqrt();

    let mut points = Vec::new();
    for m in [100usize, 1000, 10_000] {
        let e2: f64 = (0..10).map(|_| rel(&estimate(m, &mut s), &truth).powi(2)).sum();
        points.push((m as f64, (e2 / 10.0).sqrt()));
    }
    let slope = ols_slope(&points);
    let secs = started.elapsed().as_secs_f64();
    check(
        single <= 0.15 && mean_err <= mean_bound && (-0.6..=-0.4).contains(&slope) && secs < 10.0,
        format!(
            "M=10^4 relative error {single:.4} (<= 0.15); mean of 10 estimates {mean_err:.4} (<= {mean_bound:.4}); \
             slope {slope:.3}; {secs:.2} s (< 10 s)"
        ),
    )
}

fn digital_twin() -> Outcome {
    let (hybrid, digital) = twin_pair(64, 1.0, 4);
    let cfg = train_config(0.0, 10, 10, 64, 16, 4);
    let mut th = Trainer::new(hybrid, cfg.clone()).unwrap();
    let mut td = Trainer::new(digital, cfg).unwrap();
    let data = generate(Generator::Spirals, 1000, 0.1, &mut RngStream::new(4, "data")).unwrap();
    let mut batcher = Batcher::new(data.len(), RngStream::new(4, "batches"));
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let batch = data.subset(&batcher.next_batch(16));
        let rh = th.train_step(&batch).unwrap();
        let rd = td.train_step(&batch).unwrap();
        worst = worst.max((rh.loss - rd.loss).abs());
        worst = worst.max(max_abs_diff(&digital_params(th.net_mut()), &digital_params(td.net_mut())));
    }
    check(worst <= 1e-8, format!("max elementwise deviation over 100 steps {worst:.2e} (<= 1e-8)"))
}

fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut nets = 0;
    for (widths, act) in [
        (vec![2, 16, 16, 2], Activation::Gelu),
        (vec![2, 16, 16, 2], Activation::Relu),
        (vec![3, 10, 10, 10, 4], Activation::Gelu),
        (vec![5, 20, 3], Activation::Relu),
    ] {
        for seed in 0..5 {
            let mut layers = mlp(&widths, act, seed).layers().to_vec();
            layers.insert(1, Layer::Scale(0.9, None));
            let mut net = Network::new(layers);
            let params = net.digital_param_count();
            if params > 1000 {
                return Err(format!("test net has {params} parameters"));
            }
            let mut s = RngStream::new(seed, "acceptance/fd");
            let b = 6;
            let x = Matrix::from_vec(b, widths[0], s.normal_vec(b * widths[0]));
            let classes = *widths.last().unwrap();
            let y: Vec<usize> = (0..b).map(|i| i % classes).collect();
            worst = worst.max(fd_check(&mut net, &x, &y, 1e-3, 1e-6));
            nets += 1;
        }
    }
    check(
        worst <= 1e-6,
        format!("max relative deviation {worst:.2e} over {nets} nets (<= 1e-6; |g| < 1e-6 compared absolutely)"),
    )
}

fn photonic_suite() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut s = RngStream::new(6, "acceptance/photonics");
    let mut unitarity: f64 = 0.0;
    for variant in [BlockVariant::Mzi, BlockVariant::Mzi3] {
        for n in 1..=16 {
            let w: Vec<f64> = (0..n * n).map(|_| s.uniform(-std::f64::consts::PI, std::f64::consts::PI)).collect();
            let t = transfer_matrix(&MeshLayout::clements(n), variant, &w);
            let tt = t.matmul(&t.adjoint());
            let mut d2 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let id = if i == j { 1.0 } else { 0.0 };
                    d2 += (tt[(i, j)] - id).norm_sqr();
                }
            }
            unitarity = unitarity.max(d2.sqrt());
        }
    }
    ok &= unitarity <= 1e-10;
    notes.push(format!("unitarity {unitarity:.1e}"));

    let range_ok = (0..10_000).all(|k| {
        let w = -2.0 * std::f64::consts::PI + 4.0 * std::f64::consts::PI * k as f64 / 9_999.0;
        (-1.0..=1.0).contains(&mrr_func(w, MRR_A, MRR_R))
    });
    ok &= range_ok;
    notes.push(format!("mrr range {}", if range_ok { "ok" } else { "violated" }));

    let mut slm_ok = true;
    for (d_inp, d_out) in [(4, 4), (64, 64), (7, 3)] {
        let w: Vec<f64> = (0..d_inp * d_out).map(|_| s.uniform(-10.0, 10.0)).collect();
        let m = slm_matrix(&w, d_out, d_inp).unwrap();
        slm_ok &= m.max_abs() <= 1.0 / (d_inp as f64).sqrt() + 1e-15;
    }
    ok &= slm_ok;
    notes.push(format!("slm bound {}", if slm_ok { "ok" } else { "violated" }));

    let kinds = [
        LayerKind::Matvec,
        LayerKind::Mrr { a: MRR_A, r_c: MRR_R },
        LayerKind::Slm,
        LayerKind::Monarch,
        LayerKind::Mzi,
        LayerKind::Mzi3,
    ];
    let mut linearity: f64 = 0.0;
    for kind in kinds {
        for (d_inp, d_out) in [(4, 4), (16, 8), (2, 32), (64, 64)] {
            let mut l = BlackBoxLayer::new(kind, d_inp, d_out).unwrap();
            l.init_params(&mut s);
            let x = s.normal_vec(d_inp);
            let z = s.normal_vec(d_inp);
            let (a, b) = (s.normal(), s.normal());
            let combo: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
            let lhs = l.forward(&combo).unwrap();
            let (fx, fz) = (l.forward(&x).unwrap(), l.forward(&z).unwrap());
            let rhs: Vec<f64> = fx.iter().zip(&fz).map(|(p, q)| a * p + b * q).collect();
            linearity = linearity.max(rel(&lhs, &rhs));
        }
    }
    ok &= linearity <= 1e-10;
    notes.push(format!("linearity {linearity:.1e}"));

    let mut counts_ok = true;
    for d_inp in 2..=64usize {
        for d_out in 2..=64usize {
            let n = d_inp.max(d_out);
            let count = |k| BlackBoxLayer::param_count_for(k, d_inp, d_out).ok();
            counts_ok &= count(LayerKind::Matvec) == Some(d_inp * d_out);
            counts_ok &= count(LayerKind::Slm) == Some(d_inp * d_out);
            counts_ok &= count(LayerKind::Mrr { a: MRR_A, r_c: MRR_R }) == Some(d_inp * d_out);
            counts_ok &= count(LayerKind::Mzi) == Some(n * n);
            counts_ok &= count(LayerKind::Mzi3) == Some(n * n);
            counts_ok &= MeshLayout::clements(n).block_coords().len() * 2 + n == n * n;
            if d_inp.is_power_of_two() && d_out.is_power_of_two() {
                let sh = MonarchShape::new(d_inp, d_out).unwrap();
                counts_ok &= count(LayerKind::Monarch)
                    == Some(sh.b_r * sh.n_r_out * sh.n_r_inp + sh.b_l * sh.n_l_out * sh.n_l_inp);
            }
        }
    }
    ok &= counts_ok;
    notes.push(format!("parameter counts {}", if counts_ok { "ok" } else { "wrong" }));
    check(ok, notes.join("; "))
}

fn query_accounting() -> Outcome {
    let (b, m_bb, m_sm, r) = (8usize, 10usize, 20usize, 3usize);
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Dense { inp: 2, out: 16, bias: true },
            LayerSpec::Gelu,
            LayerSpec::Blackbox { inp: 16, out: 16 },
            LayerSpec::Gelu,
            LayerSpec::Dense { inp: 16, out: 2, bias: true },
        ],
    };
    let setup = HybridSetup {
        kind: LayerKind::Slm,
        rank: r,
        init: SurrogateInit::Oracle,
        oversample: 5,
        sketch_probes: m_sm,
        scale_init: None,
    };
    let net = Network::hybrid(&spec, &setup, &mut RngStream::new(7, "init")).unwrap();
    let mut t = Trainer::new(net, train_config(0.01, m_bb, m_sm, r, b, 7)).unwrap();
    let data = generate(Generator::Spirals, 400, 0.1, &mut RngStream::new(7, "data")).unwrap();
    let mut batcher = Batcher::new(data.len(), RngStream::new(7, "batches"));
    let mut bad = Vec::new();
    for step in 1..=100 {
        let rep = t.train_step(&data.subset(&batcher.next_batch(b))).unwrap();
        let q = rep.step_queries;
        if q.psi != (2 * r + 2 * m_sm) as u64 || q.zo != (b * (m_bb + 1)) as u64 || q.forward != b as u64 {
            bad.push(format!("step {step}: {q:?}"));
        }
        if rep.queries.total() != t.net().query_count() {
            bad.push(format!("step {step}: ledger {} vs counter {}", rep.queries.total(), t.net().query_count()));
        }
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "100 steps: psi {} = 2r+2M, zo {} = b(M+1), forward {} per step; ledger equals device counter",
                2 * r + 2 * m_sm,
                b * (m_bb + 1),
                b
            )
        } else {
            bad.join("; ")
        },
    )
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> RunConfig {
    RunConfig::from_path(&configs_dir().join(name)).unwrap()
}

fn train_accuracy(cfg: &RunConfig, dir: &Path) -> f64 {
    let text = cfg.to_toml();
    run_training(cfg, &text, dir, &configs_dir(), true).unwrap().summary.test_accuracy
}

fn with_budget(mut cfg: RunConfig, rank: usize, m: usize, seed: u64) -> RunConfig {
    cfg.train.rank = rank;
    cfg.train.m_bb = m;
    cfg.train.m_sm = m;
    cfg.train.seed = seed;
    cfg
}

fn end_to_end_trend() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name);

    // (i) digital reference under the same schedule, and the longer
    // 2000-step reference run.
    let digital = shipped("spirals-digital.toml");
    let a_star = train_accuracy(&digital, &dir("digital"));
    let mut long = digital.clone();
    long.train.steps = 2000;
    long.train.batch = 32;
    let a_long = train_accuracy(&long, &dir("digital-long"));
    let part1 = a_star >= 0.95 && a_long >= 0.95;

    // (ii) matvec at r = 16, M = 1000 over five seeds.
    let matvec = shipped("spirals-matvec.toml");
    let accs: Vec<f64> = (0..5)
        .map(|seed| train_accuracy(&with_budget(matvec.clone(), 16, 1000, seed), &dir(&format!("matvec-{seed}"))))
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let part2 = mean >= a_star - 0.05;

    // (iii) rich versus starved budget per kind.
    let mut part3 = true;
    let mut kinds = Vec::new();
    for (name, file) in [("matvec", "spirals-matvec.toml"), ("mrr", "spirals-mrr.toml"), ("slm", "spirals-slm.toml")] {
        let base = shipped(file);
        let rich = if name == "matvec" {
            accs[0]
        } else {
            train_accuracy(&with_budget(base.clone(), 16, 1000, 0), &dir(&format!("{name}-rich")))
        };
        let starved = train_accuracy(&with_budget(base, 1, 1, 0), &dir(&format!("{name}-starved")));
        part3 &= rich >= starved;
        kinds.push(format!("{name} {rich:.3} vs {starved:.3}"));
    }
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    check(
        part1 && part2 && part3 && minutes < 30.0,
        format!(
            "(i) A* = {a_star:.3}, 2000-step digital {a_long:.3} (>= 0.95); \
             (ii) matvec r=16 M=1000 mean {mean:.3} over seeds {accs:.3?} (>= {:.3}); \
             (iii) (r=16,M=1000) vs (r=1,M=1): {}; {minutes:.1} min (< 30)",
            a_star - 0.05,
            kinds.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = shipped("smoke.toml");
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs_dir().join("smoke.toml")).unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let d = tmp.path().join(run);
        run_training(&cfg, &text, &d, &configs_dir(), false).unwrap();
        files.push((
            std::fs::read(d.join(METRICS_FILE)).unwrap(),
            std::fs::read(d.join(CHECKPOINT_FILE)).unwrap(),
        ));
    }
    check(
        files[0] == files[1],
        format!(
            "metrics.csv ({} bytes) and checkpoint.bin ({} bytes) identical across two runs",
            files[0].0.len(),
            files[0].1.len()
        ),
    )
}

fn checkpoint_format() -> Outcome {
    let mut s = RngStream::new(10, "acceptance/checkpoint");
    let mut round_trips = 0;
    let mut fuzz_failures = 0;
    for _ in 0..1000 {
        let tensors: Vec<Tensor> = (0..1 + s.below(4))
            .map(|k| {
                let dims: Vec<usize> = (0..s.below(4)).map(|_| 1 + s.below(4)).collect();
                let len = dims.iter().product();
                let data = (0..len).map(|_| f64::from_bits(s.below(usize::MAX) as u64)).collect();
                Tensor::new(format!("t{k}"), dims, data)
            })
            .collect();
        let bytes = encode(&tensors).unwrap();
        let back = decode(&bytes).unwrap();
        if back.len() == tensors.len() && back.iter().zip(&tensors).all(|(a, b)| a.bit_eq(b)) {
            round_trips += 1;
        }
        let cut = s.below(bytes.len());
        fuzz_failures += decode(&bytes[..cut]).is_ok() as usize;
        let mut magic = bytes.clone();
        magic[s.below(4)] ^= 0x20;
        fuzz_failures += decode(&magic).is_ok() as usize;
        let mut flipped = bytes.clone();
        let i = s.below(flipped.len());
        flipped[i] ^= 1 << s.below(8);
        if let Ok(t) = decode(&flipped) {
            // A successful decode must account for every byte.
            fuzz_failures += (encode(&t).unwrap() != flipped) as usize;
        }
    }
    check(
        round_trips == 1000 && fuzz_failures == 0,
        format!("{round_trips}/1000 bit-exact round trips; {fuzz_failures} corrupted inputs yielded partial state"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("surrogate update exactness", psi_exactness),
        ("transpose probe unbiasedness", transpose_probe_unbiased),
        ("zeroth-order estimator", zo_estimator),
        ("digital twin equivalence", digital_twin),
        ("gradient checks", gradient_checks),
        ("photonic layer suite", photonic_suite),
        ("query accounting", query_accounting),
        ("end-to-end trend", end_to_end_trend),
        ("determinism", determinism),
        ("checkpoint format", checkpoint_format),
    ];
    let mut failed = Vec::new();
    for (i, (title, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match &outcome {
            Ok(detail) => println!("criterion {:>2} PASS {title}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL {title}: {detail} [{secs:.1} s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
