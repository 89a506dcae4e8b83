//! Run directories, rank × budget sweeps and estimator diagnostics.
//!
//! A run directory holds `config.toml` (the input verbatim), `resolved.toml`
//! (every default spelled out), `metrics.csv` and `checkpoint.bin`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::checkpoint::checkpoint_write;
use crate::config::{ProbeConfig, RunConfig};
use crate::data::{generate, load_csv, Dataset};
use crate::error::{Error, Result};
use crate::hybridnet::Network;
use crate::numlin::{qr_thin, Matrix, RngStream};
use crate::photonics::{BlackBoxLayer, LayerKind};
use crate::surrogate::{ipsi_update, transpose_probe, ProbeMode, SurrogateModel};
use crate::trainer::{MetricsRow, RunSummary, Trainer};
use crate::zograd::{estimate_gradient, ZoConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const RESOLVED_FILE: &str = "resolved.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.bin";

/// Creates `dir`, or empties it when `force` is set. A non-empty directory
/// without `force` is refused.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::RunDirNotEmpty(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Train/test split described by the data block.
pub fn load_data(cfg: &RunConfig, base: &Path) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let stream = RngStream::new(d.seed, "data");
    let ds = match (&d.generator, &d.path) {
        (Some(g), _) => generate(*g, d.n, d.noise, &mut stream.clone())?,
        (None, Some(p)) => load_csv(&base.join(p))?,
        (None, None) => return Err(Error::Config("data: one of generator or path is required".into())),
    };
    let (inp, out) = cfg.network.validate()?;
    if ds.dim() != inp {
        return Err(Error::Config(format!(
            "dataset has {} features but the network expects {inp}",
            ds.dim()
        )));
    }
    if ds.classes > out {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network outputs {out}",
            ds.classes
        )));
    }
    ds.split(d.test_fraction, &mut stream.substream("split"))
}

/// Network initialized from the training seed.
pub fn build_network(cfg: &RunConfig) -> Result<Network> {
    let mut init = RngStream::new(cfg.train.seed, "init");
    match cfg.hybrid_setup()? {
        Some(setup) if cfg.network.blackbox_count() > 0 => Network::hybrid(&cfg.network, &setup, &mut init),
        _ => Network::digital(&cfg.network, &mut init),
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Trains one configuration into `dir`. Relative data paths resolve
/// against `base`. On a non-finite loss the current parameters are dumped
/// to `diagnostic.bin` before the error is returned.
pub fn run_training(cfg: &RunConfig, config_text: &str, dir: &Path, base: &Path, force: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_data(cfg, base)?;
    prepare_run_dir(dir, force)?;
    write_file(&dir.join(CONFIG_FILE), config_text)?;
    write_file(&dir.join(RESOLVED_FILE), &cfg.resolved().to_toml())?;

    let net = build_network(cfg)?;
    let mut trainer = Trainer::new(net, cfg.train.clone())?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer = csv::Writer::from_path(&metrics_path).map_err(|e| csv_err(&metrics_path, e))?;
    let result = trainer.run(&train, &test, |row: &MetricsRow| {
        writer.serialize(row).map_err(|e| csv_err(&metrics_path, e))
    });
    writer
        .flush()
        .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
    let summary = match result {
        Ok(s) => s,
        Err(e) => {
            if matches!(e, Error::NonFiniteLoss { .. }) {
                checkpoint_write(&dir.join(DIAGNOSTIC_FILE), &trainer.net().tensors())?;
            }
            return Err(e);
        }
    };
    checkpoint_write(&dir.join(CHECKPOINT_FILE), &trainer.net().tensors())?;
    log::info!(
        "{}: test accuracy {:.4}, {} training queries",
        dir.display(),
        summary.test_accuracy,
        summary.queries.training()
    );
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        summary,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepGrid {
    pub ranks: Vec<usize>,
    /// Each budget sets both `m_bb` and `m_sm`.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.budgets.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep grid needs at least one rank, budget and seed".into()));
        }
        if self.ranks.contains(&0) || self.budgets.contains(&0) {
            return Err(Error::Config("sweep ranks and budgets must be positive".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, usize, u64)> {
        let mut out = Vec::new();
        for &r in &self.ranks {
            for &m in &self.budgets {
                for &s in &self.seeds {
                    out.push((r, m, s));
                }
            }
        }
        out
    }
}

pub fn cell_dir_name(rank: usize, budget: usize, seed: u64) -> String {
    format!("r{rank}_m{budget}_s{seed}")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub rank: usize,
    pub budget: usize,
    pub seed: u64,
    pub status: String,
    pub test_accuracy: Option<f64>,
    pub q_total: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub rank: usize,
    pub budget: usize,
    pub runs: usize,
    pub failed: usize,
    pub acc_mean: Option<f64>,
    pub acc_min: Option<f64>,
    pub acc_max: Option<f64>,
    pub q_total_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub cells: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
    /// Mean accuracy at (largest rank, largest budget) is at least that at
    /// (smallest rank, smallest budget). `None` if either cell failed entirely.
    pub monotone: Option<bool>,
}

/// Runs every (rank, budget, seed) cell of `grid` on up to `jobs` threads.
/// A failing cell is recorded and the sweep continues; `aggregate.csv` and
/// `cells.csv` are written once all cells have finished.
pub fn run_sweep(base_cfg: &RunConfig, grid: &SweepGrid, out: &Path, base: &Path, jobs: usize, force: bool) -> Result<SweepOutcome> {
    grid.validate()?;
    base_cfg.validate()?;
    prepare_run_dir(out, force)?;
    let cells = grid.cells();
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let jobs = jobs.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(rank, budget, seed)) = cells.get(i) else {
                    break;
                };
                let res = run_cell(base_cfg, rank, budget, seed, out, base);
                let (status, acc, q) = match res {
                    Ok(s) => ("ok".to_string(), Some(s.test_accuracy), Some(s.queries.training())),
                    Err(e) => {
                        log::warn!("sweep cell {} failed: {e}", cell_dir_name(rank, budget, seed));
                        (format!("failed: {e}"), None, None)
                    }
                };
                results.lock().expect("no panics while holding the lock")[i] = Some(CellResult {
                    rank,
                    budget,
                    seed,
                    status,
                    test_accuracy: acc,
                    q_total: q,
                });
            });
        }
    });
    let cells: Vec<CellResult> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();
    let aggregate = aggregate(grid, &cells);
    let monotone = monotone_flag(grid, &aggregate);

    write_csv_rows(&out.join("cells.csv"), &cells)?;
    write_csv_rows(&out.join("aggregate.csv"), &aggregate)?;
    let flag = match monotone {
        Some(true) => "true",
        Some(false) => "false",
        None => "unknown",
    };
    write_file(&out.join("summary.txt"), &format!("monotone = {flag}\n"))?;
    Ok(SweepOutcome {
        cells,
        aggregate,
        monotone,
    })
}

fn run_cell(base_cfg: &RunConfig, rank: usize, budget: usize, seed: u64, out: &Path, base: &Path) -> Result<RunSummary> {
    let mut cfg = base_cfg.clone();
    cfg.name = format!("{}-{}", base_cfg.name, cell_dir_name(rank, budget, seed));
    cfg.output = None;
    cfg.train.rank = rank;
    cfg.train.m_bb = budget;
    cfg.train.m_sm = budget;
    cfg.train.seed = seed;
    let text = cfg.to_toml();
    run_training(&cfg, &text, &out.join(cell_dir_name(rank, budget, seed)), base, false).map(|o| o.summary)
}

fn aggregate(grid: &SweepGrid, cells: &[CellResult]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &rank in &grid.ranks {
        for &budget in &grid.budgets {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.rank == rank && c.budget == budget).collect();
            let accs: Vec<f64> = group.iter().filter_map(|c| c.test_accuracy).collect();
            let qs: Vec<f64> = group.iter().filter_map(|c| c.q_total.map(|q| q as f64)).collect();
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            rows.push(AggregateRow {
                rank,
                budget,
                runs: group.len(),
                failed: group.len() - accs.len(),
                acc_mean: mean(&accs),
                acc_min: accs.iter().copied().reduce(f64::min),
                acc_max: accs.iter().copied().reduce(f64::max),
                q_total_mean: mean(&qs),
            });
        }
    }
    rows
}

fn monotone_flag(grid: &SweepGrid, rows: &[AggregateRow]) -> Option<bool> {
    let lo = (*grid.ranks.iter().min()?, *grid.budgets.iter().min()?);
    let hi = (*grid.ranks.iter().max()?, *grid.budgets.iter().max()?);
    let find = |(r, m): (usize, usize)| rows.iter().find(|a| a.rank == r && a.budget == m)?.acc_mean;
    Some(find(hi)? >= find(lo)?)
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One line of `probe.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub study: &'static str,
    pub m: Option<usize>,
    pub trials: Option<usize>,
    /// Root-mean-square relative error over the trials.
    pub rel_err: Option<f64>,
    pub cosine: Option<f64>,
    /// `√((d + 1)/M)`, the exact RMS relative error of a Gaussian estimator.
    pub predicted_rel_err: Option<f64>,
    pub slope: Option<f64>,
}

impl ProbeRow {
    fn point(study: &'static str, m: usize, trials: usize, rel_err: f64, cosine: f64, predicted: f64) -> Self {
        Self {
            study,
            m: Some(m),
            trials: Some(trials),
            rel_err: Some(rel_err),
            cosine: Some(cosine),
            predicted_rel_err: Some(predicted),
            slope: None,
        }
    }

    fn fit(study: &'static str, slope: f64) -> Self {
        Self {
            study,
            m: None,
            trials: None,
            rel_err: None,
            cosine: None,
            predicted_rel_err: None,
            slope: Some(slope),
        }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn rel_err_and_cosine(est: &[f64], truth: &[f64]) -> (f64, f64) {
    let diff: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let nt = crate::numlin::norm2(truth);
    let ne = crate::numlin::norm2(est);
    let cos = if ne == 0.0 || nt == 0.0 {
        0.0
    } else {
        crate::numlin::dot(est, truth) / (ne * nt)
    };
    (diff / nt, cos)
}

fn random_matvec(d_inp: usize, d_out: usize, stream: &mut RngStream) -> Result<BlackBoxLayer> {
    let mut l = BlackBoxLayer::new(LayerKind::Matvec, d_inp, d_out)?;
    l.init_params(stream);
    Ok(l)
}

/// Estimator-quality study on a matvec layer, whose parameter gradient and
/// transpose are known in closed form.
pub fn run_probe(pc: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    pc.validate()?;
    let mut rows = Vec::new();
    let mut data = RngStream::new(pc.seed, "data");
    let layer = random_matvec(pc.d_inp, pc.d_out, &mut RngStream::new(pc.seed, "bb-init"))?;
    let x = data.normal_vec(pc.d_inp);
    let v = data.normal_vec(pc.d_out);
    // ∂⟨A x, v⟩/∂A = v xᵀ, row-major like the parameters.
    let truth: Vec<f64> = v.iter().flat_map(|vi| x.iter().map(move |xj| vi * xj)).collect();
    let d_bb = layer.d_bb() as f64;

    let mut zo = RngStream::new(pc.seed, "zo");
    let mut points = Vec::new();
    for &m in &pc.m_bb_grid {
        let cfg = ZoConfig::new(pc.mu, m)?;
        let (mut se, mut cs) = (0.0, 0.0);
        for _ in 0..pc.trials {
            let est = estimate_gradient(&layer, layer.params(), &x, &v, &cfg, &mut zo)?;
            let (e, c) = rel_err_and_cosine(&est.g, &truth);
            se += e * e;
            cs += c;
        }
        let rms = (se / pc.trials as f64).sqrt();
        points.push((m as f64, rms));
        rows.push(ProbeRow::point("zo", m, pc.trials, rms, cs / pc.trials as f64, ((d_bb + 1.0) / m as f64).sqrt()));
    }
    rows.push(ProbeRow::fit("zo-fit", log_log_slope(&points)));

    let zero = estimate_gradient(&layer, layer.params(), &x, &vec![0.0; pc.d_out], &ZoConfig::new(pc.mu, pc.m_bb_grid[0])?, &mut zo)?;
    rows.push(ProbeRow {
        study: "zo-zero-error",
        m: Some(pc.m_bb_grid[0]),
        trials: Some(1),
        rel_err: Some(crate::numlin::norm2(&zero.g)),
        cosine: None,
        predicted_rel_err: Some(0.0),
        slope: None,
    });

    // Transpose probe between two random settings against an orthonormal basis.
    let mut init = RngStream::new(pc.seed, "bb-init").substream("probe");
    let w0 = random_matvec(pc.d_inp, pc.d_out, &mut init)?.params().to_vec();
    let w1 = random_matvec(pc.d_inp, pc.d_out, &mut init)?.params().to_vec();
    let (u, _) = qr_thin(&Matrix::from_vec(pc.d_out, pc.rank, data.normal_vec(pc.d_out * pc.rank)));
    let delta = Matrix::from_vec(pc.d_out, pc.d_inp, w1.iter().zip(&w0).map(|(a, b)| a - b).collect());
    let exact = delta.t_matmul(&u);
    let mut psi = RngStream::new(pc.seed, "psi");
    let mut points = Vec::new();
    for &m in &pc.m_sm_grid {
        let (mut se, mut cs) = (0.0, 0.0);
        for _ in 0..pc.trials {
            let est = transpose_probe(&layer, &w0, &w1, &u, ProbeMode::Stochastic(m), &mut psi)?;
            let (e, c) = rel_err_and_cosine(est.as_slice(), exact.as_slice());
            se += e * e;
            cs += c;
        }
        let rms = (se / pc.trials as f64).sqrt();
        points.push((m as f64, rms));
        rows.push(ProbeRow::point(
            "transpose",
            m,
            pc.trials,
            rms,
            cs / pc.trials as f64,
            ((pc.d_inp as f64 + 1.0) / m as f64).sqrt(),
        ));
    }
    rows.push(ProbeRow::fit("transpose-fit", log_log_slope(&points)));
    let est = transpose_probe(&layer, &w0, &w1, &u, ProbeMode::Exact, &mut psi)?;
    let (e, c) = rel_err_and_cosine(est.as_slice(), exact.as_slice());
    rows.push(ProbeRow {
        study: "transpose-exact",
        m: None,
        trials: Some(1),
        rel_err: Some(e),
        cosine: Some(c),
        predicted_rel_err: Some(0.0),
        slope: None,
    });
    Ok(rows)
}

pub fn write_probe_csv(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    write_csv_rows(path, rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsiTestConfig {
    pub d_inp: usize,
    pub d_out: usize,
    pub rank: usize,
    /// Random (A₀, A₁) pairs for the exactness check.
    pub pairs: usize,
    /// Drift steps for the tracking check.
    pub steps: usize,
    /// Relative size of each drift step.
    pub drift: f64,
    pub m_sm: usize,
    pub seed: u64,
}

impl Default for PsiTestConfig {
    fn default() -> Self {
        Self {
            d_inp: 32,
            d_out: 32,
            rank: 4,
            pairs: 50,
            steps: 100,
            drift: 0.02,
            m_sm: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingRow {
    pub step: usize,
    /// Relative error of the updated surrogate.
    pub tracked_err: f64,
    /// Relative error of the initial surrogate left unchanged.
    pub stale_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsiTestReport {
    /// Largest `‖USVᵀ − A₁‖_F` over the exactness pairs.
    pub max_exact_err: f64,
    pub max_orthonormality_defect: f64,
    /// Queries spent by one stochastic update, and the `2r + 2M` prediction.
    pub update_queries: u64,
    pub predicted_queries: u64,
    pub tracking: Vec<TrackingRow>,
}

/// Random `d_out × d_inp` matrix of rank `r`.
pub fn random_low_rank(d_out: usize, d_inp: usize, r: usize, stream: &mut RngStream) -> Matrix {
    let a = Matrix::from_vec(d_out, r, stream.normal_vec(d_out * r));
    let b = Matrix::from_vec(r, d_inp, stream.normal_vec(r * d_inp));
    a.matmul(&b)
}

fn matvec_with(a: &Matrix) -> Result<BlackBoxLayer> {
    BlackBoxLayer::new(LayerKind::Matvec, a.cols(), a.rows())?.with_params(a.as_slice().to_vec())
}

/// Exactness on random low-rank pairs plus tracking of a slowly drifting
/// low-rank matrix with stochastic transpose probes.
pub fn run_psi_test(pc: &PsiTestConfig) -> Result<PsiTestReport> {
    if pc.rank == 0 || pc.rank > pc.d_inp.min(pc.d_out) {
        return Err(Error::Config(format!("psi-test rank must lie in 1..={}", pc.d_inp.min(pc.d_out))));
    }
    if pc.m_sm == 0 {
        return Err(Error::Config("psi-test m_sm must be at least 1".into()));
    }
    let mut data = RngStream::new(pc.seed, "data");
    let mut psi = RngStream::new(pc.seed, "psi");
    let (mut max_err, mut max_defect) = (0.0f64, 0.0f64);
    for _ in 0..pc.pairs {
        let a0 = random_low_rank(pc.d_out, pc.d_inp, pc.rank, &mut data);
        let a1 = random_low_rank(pc.d_out, pc.d_inp, pc.rank, &mut data);
        let layer = matvec_with(&a0)?;
        let sm = crate::surrogate::init_oracle(&layer, pc.rank)?;
        let next = ipsi_update(&sm, &layer, a0.as_slice(), a1.as_slice(), ProbeMode::Exact, &mut psi)?;
        max_err = max_err.max(next.to_dense().sub(&a1).frobenius_norm());
        max_defect = max_defect.max(next.orthonormality_defect());
    }

    let a0 = random_low_rank(pc.d_out, pc.d_inp, pc.rank, &mut data);
    let mut layer = matvec_with(&a0)?;
    let initial = crate::surrogate::init_oracle(&layer, pc.rank)?;
    let mut sm: SurrogateModel = initial.clone();
    let mut current = a0;
    let mut tracking = Vec::with_capacity(pc.steps);
    let mut update_queries = 0;
    for step in 1..=pc.steps {
        let dir = random_low_rank(pc.d_out, pc.d_inp, pc.rank, &mut data);
        let step_size = pc.drift * current.frobenius_norm() / dir.frobenius_norm();
        let next = current.add(&dir.scaled(step_size));
        let before = layer.query_count();
        sm = ipsi_update(&sm, &layer, current.as_slice(), next.as_slice(), ProbeMode::Stochastic(pc.m_sm), &mut psi)?;
        update_queries = layer.query_count() - before;
        layer.set_params(next.as_slice().to_vec())?;
        let norm = next.frobenius_norm();
        tracking.push(TrackingRow {
            step,
            tracked_err: sm.to_dense().sub(&next).frobenius_norm() / norm,
            stale_err: initial.to_dense().sub(&next).frobenius_norm() / norm,
        });
        current = next;
    }
    Ok(PsiTestReport {
        max_exact_err: max_err,
        max_orthonormality_defect: max_defect,
        update_queries,
        predicted_queries: crate::surrogate::ipsi_query_cost(pc.rank, pc.m_sm),
        tracking,
    })
}

pub fn write_tracking_csv(path: &Path, rows: &[TrackingRow]) -> Result<()> {
    write_csv_rows(path, rows)
}
