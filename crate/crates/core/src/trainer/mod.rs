//! Toy multimodal training with geometry-gradient injection.
//!
//! Each modality has an MLP encoder `phi_m` and a bias-free linear head `W_m`
//! reading the raw embedding; the task loss is `sum_m CE(W_m z^m, y)`. A fusion
//! head reads the concatenated raw embeddings and is trained on its own CE.
//! The geometry losses act on the normalized embeddings. Per step and per
//! modality the encoder receives
//! `theta_m <- theta_m - eta (g_task + g_geom)` where `g_geom` mixes
//! `g_disp = grad L_disp^m` and `g_inter = grad L_inter` with Pareto or fixed
//! weights. Heads and the fusion head take plain gradient steps on their CE.

pub mod data;
pub mod gap;
pub mod robustness;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ce_loss_and_grad, predict, Activation, Encoder, EncoderSpec};
use crate::diagnostics::{geometry_report, GeometryReport, ReportOptions};
use crate::error::{DagrError, Result};
use crate::geom::{normalize_batch, EmbeddingBatch, ModalityBatchSet, DEFAULT_NORM_EPS};
use crate::losses::{anchoring_loss, chain_through_normalization, dispersive_loss_rbf, AnchorConfig};
use crate::pareto::{geometry_gradient, FlatGradient, Weighting};
use crate::rng::SplitMix64;

pub use data::{generate_dataset, Dataset, Split, SyntheticDataConfig};

/// Whether the fused head's CE also flows into the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaskGradMode {
    /// Encoders see only their own unimodal CE.
    #[default]
    Decoupled,
    /// Encoders additionally receive the fused CE gradient.
    FusedGrad,
}

impl std::str::FromStr for TaskGradMode {
    type Err = DagrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(Self::Decoupled),
            "fused-grad" => Ok(Self::FusedGrad),
            other => Err(DagrError::Range {
                key: "task_grad".into(),
                reason: format!("unknown mode {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub lr: f64,
    /// When false no geometry gradient is injected (the no-regularizer baseline).
    pub dagr: bool,
    pub use_pareto: bool,
    pub beta: f64,
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub tau: f64,
    pub t: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_dim: usize,
    pub seed: u64,
    /// Geometry report every this many epochs (0 disables per-epoch reports).
    pub diag_every: usize,
    pub task_grad: TaskGradMode,
    /// If set, start from a rank-one encoder output and heads aligned with it,
    /// perturbed by Gaussian noise of this scale.
    pub collapse_init: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 0.05,
            dagr: true,
            use_pareto: true,
            beta: crate::pareto::DEFAULT_BETA,
            lambda_intra: 0.1,
            lambda_inter: 0.1,
            tau: crate::losses::DEFAULT_TAU,
            t: crate::losses::DEFAULT_T,
            hidden: vec![32],
            activation: Activation::Tanh,
            embed_dim: 8,
            seed: 0,
            diag_every: 1,
            task_grad: TaskGradMode::Decoupled,
            collapse_init: None,
        }
    }
}

fn range(key: &str, reason: impl Into<String>) -> DagrError {
    DagrError::Range {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(range("lr", "must be > 0"));
        }
        if self.epochs < 1 {
            return Err(range("epochs", "must be >= 1"));
        }
        if self.batch_size == 1 {
            return Err(range("batch_size", "must be >= 2 (or 0 for full batch)"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(range("beta", "must lie in [0, 1]"));
        }
        for (k, v) in [("lambda_intra", self.lambda_intra), ("lambda_inter", self.lambda_inter)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(range(k, "must be finite and >= 0"));
            }
        }
        if !(self.tau >= 0.0) {
            return Err(range("tau", "must be >= 0"));
        }
        if !(self.t > 0.0) {
            return Err(range("t", "must be > 0"));
        }
        if self.embed_dim < 1 {
            return Err(range("embed_dim", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(range("hidden", "widths must be >= 1"));
        }
        if let Some(j) = self.collapse_init {
            if !(j >= 0.0) {
                return Err(range("collapse_init", "must be >= 0"));
            }
        }
        Ok(())
    }

    /// How the two geometry gradients are combined (meaningful when `dagr`).
    pub fn weighting(&self) -> Weighting {
        if self.use_pareto {
            Weighting::Pareto { beta: self.beta }
        } else {
            Weighting::Fixed {
                lambda_intra: self.lambda_intra,
                lambda_inter: self.lambda_inter,
            }
        }
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoders: Vec<Encoder>,
    /// `K x d` per modality.
    pub heads: Vec<DMatrix<f64>>,
    /// `K x (M d)`.
    pub fusion: DMatrix<f64>,
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> DMatrix<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

impl Model {
    /// PRNG streams: `10 + m` encoder seeds, `20 + m` heads, 30 fusion,
    /// `50 + m` collapse perturbation.
    pub fn init(input_dims: &[usize], classes: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut encoders = Vec::with_capacity(input_dims.len());
        let mut heads = Vec::with_capacity(input_dims.len());
        for (m, &p) in input_dims.iter().enumerate() {
            let mut widths = vec![p];
            widths.extend(&cfg.hidden);
            widths.push(d);
            let seed = SplitMix64::derive(cfg.seed, 10 + m as u64).next_u64();
            let spec = EncoderSpec::uniform(widths, cfg.activation, seed)?;
            encoders.push(Encoder::init(spec, format!("enc{m}"))?);
            heads.push(uniform_matrix(
                classes,
                d,
                &mut SplitMix64::derive(cfg.seed, 20 + m as u64),
            ));
        }
        let fusion = uniform_matrix(
            classes,
            d * input_dims.len(),
            &mut SplitMix64::derive(cfg.seed, 30),
        );
        let mut model = Self {
            encoders,
            heads,
            fusion,
        };
        if let Some(jitter) = cfg.collapse_init {
            model.collapse(jitter, cfg.seed);
        }
        Ok(model)
    }

    /// Makes every encoder output (and every head row) a multiple of `e1`,
    /// then adds noise of scale `jitter`.
    fn collapse(&mut self, jitter: f64, seed: u64) {
        for (m, (enc, head)) in self.encoders.iter_mut().zip(&mut self.heads).enumerate() {
            let mut rng = SplitMix64::derive(seed, 50 + m as u64);
            let last = enc.layers.last_mut().expect("at least one layer");
            for i in 1..last.weight.nrows() {
                for j in 0..last.weight.ncols() {
                    last.weight[(i, j)] = jitter * rng.normal();
                }
                last.bias[i] = jitter * rng.normal();
            }
            for k in 0..head.nrows() {
                for j in 1..head.ncols() {
                    head[(k, j)] = jitter * rng.normal();
                }
            }
        }
    }

    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.heads[0].ncols()
    }

    /// Raw encoder outputs per modality.
    pub fn embed(&self, split: &Split) -> Result<Vec<DMatrix<f64>>> {
        self.encoders
            .iter()
            .zip(&split.inputs)
            .map(|(e, x)| e.apply(x))
            .collect()
    }

    /// Unimodal and fused accuracy given (possibly corrupted) embeddings.
    pub fn accuracy_from_embeddings(&self, z: &[DMatrix<f64>], labels: &[usize]) -> Accuracies {
        let acc = |pred: Vec<usize>| {
            pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
        };
        let unimodal = self
            .heads
            .iter()
            .zip(z)
            .map(|(w, zm)| acc(predict(w, zm)))
            .collect();
        let fused = acc(predict(&self.fusion, &concat(z)));
        Accuracies { unimodal, fused }
    }
}

fn concat(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        out.view_mut((0, off), (rows, b.ncols())).copy_from(b);
        off += b.ncols();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub unimodal: Vec<f64>,
    pub fused: f64,
}

/// Argmax accuracy of every unimodal head and the fused head on `split`.
pub fn evaluate(split: &Split, model: &Model) -> Result<Accuracies> {
    let z = model.embed(split)?;
    Ok(model.accuracy_from_embeddings(&z, &split.labels))
}

/// Everything that went into one modality's encoder update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityTrace {
    pub g_task: FlatGradient,
    pub g_disp: FlatGradient,
    pub g_inter: FlatGradient,
    pub g_geom: FlatGradient,
    /// `None` for the baseline (no injection).
    pub alpha: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub epoch: usize,
    pub step: usize,
    pub modalities: Vec<ModalityTrace>,
    /// Gradient the fusion head was updated with.
    pub fusion_applied: Vec<f64>,
    /// Gradient of the fused CE alone with respect to the fusion head.
    pub fusion_task: Vec<f64>,
}

/// Scalar outputs of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub fused_loss: f64,
    pub disp_loss: Vec<f64>,
    pub inter_loss: f64,
    pub alpha: Vec<Option<f64>>,
}

/// One DAGR update on `batch`; returns losses at the pre-update point.
pub fn train_step(
    model: &mut Model,
    batch: &Split,
    cfg: &TrainConfig,
    trace: Option<&mut StepTrace>,
) -> Result<StepStats> {
    let m_count = model.modalities();
    let labels = &batch.labels;
    let mut raw = Vec::with_capacity(m_count);
    let mut tapes = Vec::with_capacity(m_count);
    let mut unit = Vec::with_capacity(m_count);
    for (enc, x) in model.encoders.iter().zip(&batch.inputs) {
        let (z, tape) = enc.forward(x)?;
        unit.push(normalize_batch(&z, DEFAULT_NORM_EPS)?.batch);
        raw.push(z);
        tapes.push(tape);
    }
    let raw_mats: Vec<DMatrix<f64>> = raw.iter().map(|z| z.data().clone()).collect();
    let fused = ce_loss_and_grad(&model.fusion, &concat(&raw_mats), labels)?;

    let set = ModalityBatchSet::unlabeled(unit)?;
    let inter = if m_count >= 2 {
        Some(anchoring_loss(&set, AnchorConfig::new(cfg.tau)?)?)
    } else {
        None
    };
    let d = model.embed_dim();
    let weighting = cfg.weighting();
    let mut stats = StepStats {
        task_loss: 0.0,
        fused_loss: fused.value,
        disp_loss: Vec::with_capacity(m_count),
        inter_loss: inter.as_ref().map_or(0.0, |l| l.value),
        alpha: Vec::with_capacity(m_count),
    };
    let mut traces = Vec::new();
    for m in 0..m_count {
        let ce = ce_loss_and_grad(&model.heads[m], raw[m].data(), labels)?;
        stats.task_loss += ce.value;
        let mut task_up = ce.grad_z.clone();
        if cfg.task_grad == TaskGradMode::FusedGrad {
            task_up += fused.grad_z.columns(m * d, d);
        }
        let disp = dispersive_loss_rbf(&set.batches[m], cfg.t)?;
        stats.disp_loss.push(disp.value);
        let disp_up = chain_through_normalization(&raw[m], &disp.grads[0], DEFAULT_NORM_EPS)?;
        let inter_up = match &inter {
            Some(l) => chain_through_normalization(&raw[m], &l.grads[m], DEFAULT_NORM_EPS)?,
            None => DMatrix::zeros(raw[m].rows(), d),
        };
        let mut grads = tapes[m].backward_many(&[&task_up, &disp_up, &inter_up])?.into_iter();
        let (g_task, g_disp, g_inter) = (
            grads.next().expect("task"),
            grads.next().expect("disp"),
            grads.next().expect("inter"),
        );
        let (g_geom, alpha, degenerate) = if cfg.dagr {
            let dec = geometry_gradient(&g_inter, &g_disp, weighting)?;
            let alpha = matches!(weighting, Weighting::Pareto { .. }).then_some(dec.alpha_star);
            (dec.g_geom, alpha, dec.degenerate)
        } else {
            (FlatGradient::zeros(g_task.group.clone(), g_task.len()), None, false)
        };
        stats.alpha.push(alpha);
        let update = g_task.add(&g_geom);
        model.encoders[m].apply_step(&update, cfg.lr)?;
        model.heads[m] -= &ce.grad_w * cfg.lr;
        if trace.is_some() {
            traces.push(ModalityTrace {
                g_task,
                g_disp,
                g_inter,
                g_geom,
                alpha,
                degenerate,
            });
        }
    }
    // geometry losses do not depend on the fusion head: it sees its CE only
    let fusion_update = fused.grad_w.clone();
    model.fusion -= &fusion_update * cfg.lr;
    if let Some(t) = trace {
        t.modalities = traces;
        t.fusion_applied = fusion_update.as_slice().to_vec();
        t.fusion_task = fused.grad_w.as_slice().to_vec();
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over steps of `sum_m CE_m`.
    pub task_loss: f64,
    pub fused_loss: f64,
    pub disp_loss: Vec<f64>,
    pub inter_loss: f64,
    /// Test-split accuracies after the epoch.
    pub unimodal_acc: Vec<f64>,
    pub fused_acc: f64,
    /// Mean Pareto weight per modality over the epoch (empty without Pareto).
    pub alpha_mean: Vec<f64>,
    pub geometry: Option<GeometryReport>,
}

/// Irreducible-gap estimate and the raw objective values behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub delta_hat: f64,
    /// Non-anchoring objective of the tied run, plus the penalty term when
    /// the tie is a penalty.
    pub tied_objective: f64,
    pub free_objective: f64,
    /// Cross-modal excess drift left in the tied run.
    pub tied_residual_drift: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub data_config: SyntheticDataConfig,
    pub epochs: Vec<EpochRecord>,
    /// `alpha_series[m][step]` for Pareto runs.
    pub alpha_series: Vec<Vec<f64>>,
    pub final_accuracy: Accuracies,
    pub final_geometry: GeometryReport,
    pub delta_hat: Option<GapEstimate>,
}

impl RunReport {
    /// Per-epoch CSV: losses, accuracies and (where sampled) geometry.
    pub fn write_epoch_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.final_accuracy.unimodal.len();
        let mut header = String::from("epoch,task_loss,fused_loss");
        for k in 0..m {
            header.push_str(&format!(",disp_loss_m{k}"));
        }
        header.push_str(",inter_loss");
        for k in 0..m {
            header.push_str(&format!(",acc_m{k}"));
        }
        header.push_str(",fused_acc");
        for k in 0..m {
            header.push_str(&format!(",eff_rank_m{k}"));
        }
        header.push_str(",excess_drift,delta_mu,ks_distance");
        writeln!(w, "{header}")?;
        for e in &self.epochs {
            let mut line = format!("{},{:e},{:e}", e.epoch, e.task_loss, e.fused_loss);
            for v in &e.disp_loss {
                line.push_str(&format!(",{v:e}"));
            }
            line.push_str(&format!(",{:e}", e.inter_loss));
            for v in &e.unimodal_acc {
                line.push_str(&format!(",{v:e}"));
            }
            line.push_str(&format!(",{:e}", e.fused_acc));
            match &e.geometry {
                Some(g) => {
                    for v in &g.effective_rank {
                        line.push_str(&format!(",{v:e}"));
                    }
                    line.push_str(&format!(",{:e},{:e},{:e}", g.excess_drift, g.delta_mu, g.ks_distance));
                }
                None => line.push_str(&",".repeat(m + 3)),
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Normalized test-split embeddings captured after an epoch (0 = at init).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSnapshot {
    pub epoch: usize,
    pub set: ModalityBatchSet,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    /// Record a [`StepTrace`] for every step.
    pub trace: bool,
    pub dump_epochs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
    pub trace: Vec<StepTrace>,
    pub dumps: Vec<EmbeddingSnapshot>,
}

/// Normalized embeddings of `split` as a labelled set.
pub fn embedding_set(model: &Model, split: &Split) -> Result<ModalityBatchSet> {
    let batches = model
        .embed(split)?
        .into_iter()
        .map(|z| EmbeddingBatch::new(z)?.normalized())
        .collect::<Result<Vec<_>>>()?;
    ModalityBatchSet::new(batches, split.labels.clone())
}

fn report_options(cfg: &TrainConfig) -> ReportOptions {
    ReportOptions {
        tau: cfg.tau,
        t: cfg.t,
        ..ReportOptions::default()
    }
}

/// Minibatch index lists for one epoch; trailing batches with fewer than two
/// samples are dropped because the dispersive loss needs pairs.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size == 0 || batch_size >= n {
        return vec![order];
    }
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    train_with(data, cfg, &TrainOptions::default()).map(|o| o.report)
}

pub fn train_with(data: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let model = Model::init(&data.input_dims(), data.classes(), cfg)?;
    train_from(data, cfg, opts, model)
}

/// Trains an explicitly supplied model (used for hand-checked steps).
pub fn train_from(
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut model: Model,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(DagrError::BatchTooSmall(data.train.len()));
    }
    let m_count = model.modalities();
    let mut shuffle_rng = SplitMix64::derive(cfg.seed, 40);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut alpha_series = vec![Vec::new(); m_count];
    let mut trace = Vec::new();
    let mut dumps = Vec::new();
    if opts.dump_epochs.contains(&0) {
        dumps.push(EmbeddingSnapshot {
            epoch: 0,
            set: embedding_set(&model, &data.test)?,
        });
    }
    let mut global_step = 0;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(data.train.len(), cfg.batch_size, &mut shuffle_rng);
        let steps = batches.len() as f64;
        let mut task = 0.0;
        let mut fused = 0.0;
        let mut disp = vec![0.0; m_count];
        let mut inter = 0.0;
        let mut alpha_sum = vec![0.0; m_count];
        let mut alpha_seen = false;
        for idx in &batches {
            let batch = data.train.select(idx);
            let mut st = StepTrace {
                epoch,
                step: global_step,
                modalities: Vec::new(),
                fusion_applied: Vec::new(),
                fusion_task: Vec::new(),
            };
            let stats = train_step(&mut model, &batch, cfg, opts.trace.then_some(&mut st))?;
            if opts.trace {
                trace.push(st);
            }
            task += stats.task_loss / steps;
            fused += stats.fused_loss / steps;
            inter += stats.inter_loss / steps;
            for m in 0..m_count {
                disp[m] += stats.disp_loss[m] / steps;
                if let Some(a) = stats.alpha[m] {
                    alpha_seen = true;
                    alpha_sum[m] += a / steps;
                    alpha_series[m].push(a);
                }
            }
            global_step += 1;
        }
        let acc = evaluate(&data.test, &model)?;
        let geometry = if cfg.diag_every > 0 && epoch % cfg.diag_every == 0 {
            Some(geometry_report(&embedding_set(&model, &data.test)?, &report_options(cfg))?)
        } else {
            None
        };
        if opts.dump_epochs.contains(&epoch) {
            dumps.push(EmbeddingSnapshot {
                epoch,
                set: embedding_set(&model, &data.test)?,
            });
        }
        log::debug!(
            "epoch {epoch}: task {task:.4} fused acc {:.3} unimodal {:?}",
            acc.fused,
            acc.unimodal
        );
        epochs.push(EpochRecord {
            epoch,
            task_loss: task,
            fused_loss: fused,
            disp_loss: disp,
            inter_loss: inter,
            unimodal_acc: acc.unimodal,
            fused_acc: acc.fused,
            alpha_mean: if alpha_seen { alpha_sum } else { Vec::new() },
            geometry,
        });
    }
    if alpha_series.iter().all(|s| s.is_empty()) {
        alpha_series.clear();
    }
    let final_accuracy = evaluate(&data.test, &model)?;
    let final_geometry = geometry_report(&embedding_set(&model, &data.test)?, &report_options(cfg))?;
    Ok(TrainOutcome {
        report: RunReport {
            seed: cfg.seed,
            config: cfg.clone(),
            data_config: data.config.clone(),
            epochs,
            alpha_series,
            final_accuracy,
            final_geometry,
            delta_hat: None,
        },
        model,
        trace,
        dumps,
    })
}

/// One `(dataset, config)` cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub data: SyntheticDataConfig,
    pub train: TrainConfig,
}

/// Runs independent cells in parallel; results keep input order.
pub fn run_sweep(cells: &[SweepCell]) -> Vec<Result<RunReport>> {
    cells
        .par_iter()
        .map(|c| generate_dataset(&c.data).and_then(|d| train(&d, &c.train)))
        .collect()
}
