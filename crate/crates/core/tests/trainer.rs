mod common;

use bbtrain_core::data::{generate, Batcher, Dataset, Generator};
use bbtrain_core::hybridnet::{HybridSetup, LayerSpec, NetworkSpec, SurrogateInit};
use bbtrain_core::photonics::LayerKind;
use bbtrain_core::surrogate::{ipsi_query_cost, ProbeMode};
use bbtrain_core::trainer::{measure_sm_error, MetricsRow};
use bbtrain_core::{Network, RngStream, Trainer};
use common::*;

fn spirals(n: usize, seed: u64) -> Dataset {
    generate(Generator::Spirals, n, 0.1, &mut RngStream::new(seed, "data")).unwrap()
}

fn small_spec(h: usize) -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::Dense { inp: 2, out: h, bias: true },
            LayerSpec::Gelu,
            LayerSpec::Blackbox { inp: h, out: h },
            LayerSpec::Gelu,
            LayerSpec::Dense { inp: h, out: 2, bias: true },
        ],
    }
}

fn hybrid_net(kind: LayerKind, h: usize, rank: usize, seed: u64) -> Network {
    let setup = HybridSetup {
        kind,
        rank,
        init: SurrogateInit::Oracle,
        oversample: 5,
        sketch_probes: 10,
        scale_init: None,
    };
    Network::hybrid(&small_spec(h), &setup, &mut RngStream::new(seed, "init")).unwrap()
}

#[test]
fn frozen_black_box_follows_digital_trajectory() {
    let (hybrid, digital) = twin_pair(16, 0.9, 11);
    let cfg = train_config(0.0, 5, 7, 16, 16, 11);
    let mut th = Trainer::new(hybrid, cfg.clone()).unwrap();
    let mut td = Trainer::new(digital, cfg).unwrap();
    let w0 = th.net().hybrid_nodes().next().unwrap().layer.params().to_vec();
    let sm0 = th.net().hybrid_nodes().next().unwrap().sm.to_dense();
    let data = spirals(400, 11);
    let mut batcher = Batcher::new(data.len(), RngStream::new(11, "batches"));
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let batch = data.subset(&batcher.next_batch(16));
        let rh = th.train_step(&batch).unwrap();
        let rd = td.train_step(&batch).unwrap();
        worst = worst.max((rh.loss - rd.loss).abs());
        let ph = digital_params(th.net_mut());
        let pd = digital_params(td.net_mut());
        worst = worst.max(max_abs_diff(&ph, &pd));
        assert_eq!(rh.step_queries.zo + rh.step_queries.psi, 0);
    }
    assert!(worst <= 1e-8, "{worst}");
    let node = th.net().hybrid_nodes().next().unwrap();
    assert_eq!(node.layer.params(), &w0[..]);
    assert!(node.sm.to_dense().sub(&sm0).max_abs() <= 1e-10);
}

#[test]
fn every_query_is_booked() {
    let (b, m_bb, m_sm, r) = (8, 6, 9, 3);
    let net = hybrid_net(LayerKind::Matvec, 8, r, 12);
    let mut cfg = train_config(0.01, m_bb, m_sm, r, b, 12);
    cfg.sm_error_every = 25;
    let mut t = Trainer::new(net, cfg).unwrap();
    let init = t.ledger().init;
    assert_eq!(init, 8);
    assert_eq!(t.net().query_count(), init);
    let data = spirals(200, 12);
    let mut batcher = Batcher::new(data.len(), RngStream::new(12, "batches"));
    for step in 1..=100u64 {
        let rep = t.train_step(&data.subset(&batcher.next_batch(b))).unwrap();
        let q = rep.step_queries;
        assert_eq!(q.forward, b as u64);
        assert_eq!(q.zo, (b * (m_bb + 1)) as u64);
        assert_eq!(q.psi, ipsi_query_cost(r, m_sm));
        assert_eq!(q.psi, (2 * r + 2 * m_sm) as u64);
        assert_eq!(q.diagnostic, if step % 25 == 0 { 8 } else { 0 });
        assert_eq!(rep.queries.total(), t.net().query_count());
    }
    t.evaluate(&data).unwrap();
    let l = t.ledger();
    assert_eq!(l.eval, 200);
    assert_eq!(l.training(), l.forward + l.zo + l.psi);
    assert_eq!(l.total(), t.net().query_count());
    assert_eq!(l.training(), 100 * (b + b * (m_bb + 1) + 2 * r + 2 * m_sm) as u64);
}

fn run_rows(kind: LayerKind, seed: u64) -> (Vec<String>, Vec<Vec<u64>>) {
    let net = hybrid_net(kind, 8, 2, seed);
    let mut cfg = train_config(0.01, 4, 4, 2, 8, seed);
    cfg.steps = 30;
    cfg.eval_every = 10;
    let data = spirals(200, seed);
    let (train, test) = data.split(0.25, &mut RngStream::new(seed, "data").substream("split")).unwrap();
    let mut t = Trainer::new(net, cfg).unwrap();
    let mut rows = Vec::new();
    t.run(&train, &test, |r: &MetricsRow| {
        rows.push(format!("{r:?}"));
        Ok(())
    })
    .unwrap();
    let bits = t
        .net()
        .tensors()
        .iter()
        .map(|x| x.data.iter().map(|v| v.to_bits()).collect())
        .collect();
    (rows, bits)
}

#[test]
fn same_seed_same_run() {
    for kind in [LayerKind::Matvec, LayerKind::Slm, LayerKind::Mzi] {
        let a = run_rows(kind, 5);
        let b = run_rows(kind, 5);
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 30 + 3);
        assert_ne!(a, run_rows(kind, 6));
    }
}

#[test]
fn surrogate_updates_beat_a_stale_surrogate() {
    // Full-rank surrogate on an 8×8 matvec layer, 100 steps at M_sm = 1000.
    let net = hybrid_net(LayerKind::Matvec, 8, 8, 13);
    let stale = net.hybrid_nodes().next().unwrap().sm.clone();
    let mut cfg = train_config(0.05, 20, 1000, 8, 16, 13);
    cfg.eta = 0.1;
    let mut t = Trainer::new(net, cfg).unwrap();
    let data = spirals(400, 13);
    let mut batcher = Batcher::new(data.len(), RngStream::new(13, "batches"));
    for _ in 0..100 {
        t.train_step(&data.subset(&batcher.next_batch(16))).unwrap();
    }
    let node = t.net().hybrid_nodes().next().unwrap();
    let tracked = measure_sm_error(&node.layer, &node.sm).unwrap();
    let skipped = measure_sm_error(&node.layer, &stale).unwrap();
    assert!(tracked < skipped, "tracked {tracked} vs stale {skipped}");
}

#[test]
fn exact_probe_mode_keeps_full_rank_surrogate_exact() {
    let net = hybrid_net(LayerKind::Slm, 6, 6, 14);
    let cfg = train_config(0.05, 5, 3, 6, 8, 14);
    let mut t = Trainer::new(net, cfg).unwrap().with_probe_mode(ProbeMode::Exact);
    let data = spirals(100, 14);
    let mut batcher = Batcher::new(data.len(), RngStream::new(14, "batches"));
    for _ in 0..20 {
        t.train_step(&data.subset(&batcher.next_batch(8))).unwrap();
    }
    assert!(t.sm_error().unwrap().unwrap() <= 1e-8);
}
