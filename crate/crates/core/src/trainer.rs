//! The hybrid training loop.
//!
//! One step: forward through the real layers, loss, backward through the
//! surrogates, SGD on digital parameters, a zeroth-order update of every
//! black-box layer, and an I-PSI realignment of its surrogate from the
//! parameters before and after that update.

use std::time::Instant;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::hybridnet::{accuracy, loss, loss_and_grad, LayerGrad, Network};
use crate::numlin::RngStream;
use crate::photonics::BlackBoxLayer;
use crate::surrogate::{ipsi_update, ProbeMode, SurrogateModel};
use crate::zograd::estimate_batch;

/// Oracle queries by purpose. Only `forward`, `zo` and `psi` count toward
/// the training budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryLedger {
    pub forward: u64,
    pub zo: u64,
    pub psi: u64,
    pub init: u64,
    pub eval: u64,
    pub diagnostic: u64,
}

impl QueryLedger {
    pub fn training(&self) -> u64 {
        self.forward + self.zo + self.psi
    }

    pub fn total(&self) -> u64 {
        self.training() + self.init + self.eval + self.diagnostic
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub sm_rel_err: Option<f64>,
    /// Cumulative queries after this step.
    pub queries: QueryLedger,
    /// Queries made during this step, by purpose.
    pub step_queries: QueryLedger,
    pub wall_ms: f64,
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    /// Empty when not measured.
    pub sm_rel_err: Option<f64>,
    pub q_forward: u64,
    pub q_zo: u64,
    pub q_psi: u64,
    pub q_total: u64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "phase",
    "loss",
    "accuracy",
    "sm_rel_err",
    "q_forward",
    "q_zo",
    "q_psi",
    "q_total",
    "wall_ms",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub queries: QueryLedger,
}

/// `‖A − USVᵀ‖_F / ‖A‖_F` from a full reconstruction (`d_inp` queries).
pub fn measure_sm_error(layer: &BlackBoxLayer, sm: &SurrogateModel) -> Result<f64> {
    let a = layer.materialize()?;
    let norm = a.frobenius_norm();
    let err = a.sub(&sm.to_dense()).frobenius_norm();
    Ok(if norm == 0.0 { err } else { err / norm })
}

pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    zo_streams: Vec<RngStream>,
    psi_streams: Vec<RngStream>,
    probe_mode: ProbeMode,
    ledger: QueryLedger,
    step: u64,
}

impl Trainer {
    /// Queries already made on the network (surrogate initialization) are
    /// booked as `init`.
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nodes = net.hybrid_nodes().count();
        let zo = RngStream::new(cfg.seed, "zo");
        let psi = RngStream::new(cfg.seed, "psi");
        let ledger = QueryLedger {
            init: net.query_count(),
            ..QueryLedger::default()
        };
        Ok(Self {
            probe_mode: ProbeMode::Stochastic(cfg.m_sm),
            zo_streams: (0..nodes).map(|k| zo.substream(&k.to_string())).collect(),
            psi_streams: (0..nodes).map(|k| psi.substream(&k.to_string())).collect(),
            cfg,
            net,
            ledger,
            step: 0,
        })
    }

    /// Replaces the stochastic transpose probe, e.g. with the exact mode
    /// for verification runs.
    pub fn with_probe_mode(mut self, mode: ProbeMode) -> Self {
        self.probe_mode = mode;
        self
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_net(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> QueryLedger {
        self.ledger
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn train_step(&mut self, batch: &Dataset) -> Result<StepReport> {
        let started = Instant::now();
        let step = self.step + 1;
        let before = self.ledger;

        let q0 = self.net.query_count();
        let logits = self.net.forward(&batch.features)?;
        self.ledger.forward += self.net.query_count() - q0;

        let (loss, dlogits) = loss_and_grad(&logits, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let acc = accuracy(&logits, &batch.labels);
        let grads = self.net.backward_from(dlogits)?;
        self.net.sgd_step(&grads, self.cfg.eta);

        if self.cfg.eta_bb > 0.0 {
            let zo_cfg = self.cfg.zo();
            let b = batch.len() as f64;
            let hybrid_grads = grads.layers.iter().filter_map(|g| match g {
                LayerGrad::Hybrid { error, input, .. } => Some((error, input)),
                _ => None,
            });
            let nodes = self.net.hybrid_nodes_mut();
            for (k, (node, (error, input))) in nodes.zip(hybrid_grads).enumerate() {
                let w0 = node.layer.params().to_vec();
                // Backward rows carry the 1/b of the mean loss; the
                // estimator averages over rows, so undo it once.
                let est = estimate_batch(&node.layer, &w0, input, &error.scaled(b), &zo_cfg, &mut self.zo_streams[k])?;
                self.ledger.zo += est.queries_used;

                let w1: Vec<f64> = w0.iter().zip(&est.g).map(|(w, g)| w - self.cfg.eta_bb * g).collect();
                let q = node.layer.query_count();
                node.sm = ipsi_update(&node.sm, &node.layer, &w0, &w1, self.probe_mode, &mut self.psi_streams[k])?;
                self.ledger.psi += node.layer.query_count() - q;
                node.layer.set_params(w1)?;
            }
        }

        let sm_rel_err = if self.cfg.sm_error_every > 0 && step % self.cfg.sm_error_every == 0 {
            self.sm_error()?
        } else {
            None
        };

        self.step = step;
        Ok(StepReport {
            step,
            loss,
            accuracy: acc,
            sm_rel_err,
            queries: self.ledger,
            step_queries: QueryLedger {
                forward: self.ledger.forward - before.forward,
                zo: self.ledger.zo - before.zo,
                psi: self.ledger.psi - before.psi,
                init: 0,
                eval: 0,
                diagnostic: self.ledger.diagnostic - before.diagnostic,
            },
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Largest relative surrogate error over the hybrid nodes, booked as
    /// diagnostic queries. `None` for a digital network.
    pub fn sm_error(&mut self) -> Result<Option<f64>> {
        let q = self.net.query_count();
        let mut worst: Option<f64> = None;
        for node in self.net.hybrid_nodes() {
            let e = measure_sm_error(&node.layer, &node.sm)?;
            worst = Some(worst.map_or(e, |w| w.max(e)));
        }
        self.ledger.diagnostic += self.net.query_count() - q;
        Ok(worst)
    }

    /// Loss and accuracy on `ds`, booked as evaluation queries.
    pub fn evaluate(&mut self, ds: &Dataset) -> Result<(f64, f64)> {
        if ds.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let q = self.net.query_count();
        let logits = self.net.predict(&ds.features)?;
        self.ledger.eval += self.net.query_count() - q;
        Ok((loss(&logits, &ds.labels)?, accuracy(&logits, &ds.labels)))
    }

    /// Runs the configured number of steps. `emit` receives one row per step
    /// and one per evaluation; evaluations happen every `eval_every` steps
    /// and after the last step.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut emit: impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<RunSummary> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let mut batcher = Batcher::new(train.len(), RngStream::new(self.cfg.seed, "data").substream("batches"));
        let record = self.cfg.record_wall_time;
        let wall = |ms: f64| if record { ms } else { 0.0 };
        let mut last_loss = f64::NAN;
        let mut eval = (f64::NAN, f64::NAN);
        while self.step < self.cfg.steps {
            let idx = batcher.next_batch(self.cfg.batch);
            let report = self.train_step(&train.subset(&idx))?;
            last_loss = report.loss;
            emit(&row(&report, "train", report.loss, report.accuracy, wall(report.wall_ms)))?;

            let every = self.cfg.eval_every;
            if (every > 0 && report.step % every == 0) || report.step == self.cfg.steps {
                let started = Instant::now();
                eval = self.evaluate(test)?;
                let ms = started.elapsed().as_secs_f64() * 1e3;
                emit(&row(&report, "eval", eval.0, eval.1, wall(ms)))?;
            }
        }
        Ok(RunSummary {
            steps: self.step,
            final_loss: last_loss,
            test_loss: eval.0,
            test_accuracy: eval.1,
            queries: self.ledger,
        })
    }
}

fn row(report: &StepReport, phase: &'static str, loss: f64, accuracy: f64, wall_ms: f64) -> MetricsRow {
    let q = report.queries;
    MetricsRow {
        step: report.step,
        phase,
        loss,
        accuracy,
        sm_rel_err: if phase == "train" { report.sm_rel_err } else { None },
        q_forward: q.forward,
        q_zo: q.zo,
        q_psi: q.psi,
        q_total: q.training(),
        wall_ms,
    }
}
