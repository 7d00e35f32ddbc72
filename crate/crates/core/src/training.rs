//! Losses, optimizers and the three-stage training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ttt_omics_autodiff::{Tape, Var};

use crate::model::{mask_seed, CellInput, FusionModel, Stage};
use crate::params::{Grads, ParamStore, Session};
use crate::{CoreError, Result};

/// Probabilities are clamped to this before the log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub label_fraction: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a lower training loss.
    pub patience: usize,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            alpha: 0.5,
            beta: 0.5,
            label_fraction: 0.3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if stage == Stage::Pretrain && !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return bad("alpha and beta must be non-negative with a positive sum".into());
        }
        if stage != Stage::Pretrain && !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction must be in (0, 1], got {}", self.label_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam needs beta1, beta2 in [0, 1) and a positive epsilon".into());
        }
        Ok(())
    }
}

fn mse_values(x: &[f64], d: &[f64]) -> Result<f64> {
    if x.len() != d.len() || x.is_empty() {
        return Err(CoreError::contract(
            "loss_pretrain",
            format!("lengths {} and {} differ or are empty", x.len(), d.len()),
        ));
    }
    Ok(x.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `α·MSE(x_rna, d_rna) + β·MSE(x_adt, d_adt)`.
pub fn loss_pretrain(x_rna: &[f64], d_rna: &[f64], x_adt: &[f64], d_adt: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    Ok(alpha * mse_values(x_rna, d_rna)? + beta * mse_values(x_adt, d_adt)?)
}

/// Mean of `−ln max(p[true], ε)` over rows.
pub fn loss_classification(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    if labels.len() != probs.len() || labels.is_empty() {
        return Err(CoreError::contract("loss_classification", "one probability row per label"));
    }
    let mut total = 0.0;
    for (&y, row) in labels.iter().zip(probs) {
        if row.len() < 2 || y >= row.len() {
            return Err(CoreError::contract("loss_classification", format!("label {y} with {} classes", row.len())));
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CoreError::contract("loss_classification", "probability outside [0, 1]"));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(CoreError::contract("loss_classification", "probabilities do not sum to 1"));
        }
        total -= row[y].max(PROB_EPS).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Mean squared error between an `n×1` reconstruction and its target.
pub fn mse(tape: &mut Tape, recon: Var, target: &[f64]) -> Result<Var> {
    let t = tape.constant_from(tape.shape(recon).dims(), target.to_vec())?;
    let diff = tape.sub(recon, t)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

/// Paired data in each model's input feature order.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub rna: Vec<Vec<f64>>,
    pub adt: Option<Vec<Vec<f64>>>,
    /// Class index per cell, with `class_names` listing the classes.
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl TrainingData {
    pub fn n_cells(&self) -> usize {
        self.rna.len()
    }

    pub fn cell(&self, i: usize) -> CellInput<'_> {
        CellInput {
            rna: &self.rna[i],
            adt: self.adt.as_ref().map(|a| a[i].as_slice()),
        }
    }
}

/// Labelled subset used for fine-tuning; the remaining cells form the
/// evaluation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Per class, `max(1, round(fraction · size))` cells drawn under `seed`.
pub fn split_labels(labels: &[usize], fraction: f64, seed: u64) -> Result<LabelSet> {
    if labels.is_empty() {
        return Err(CoreError::contract("split_labels", "no labels"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::contract("split_labels", format!("fraction {fraction} outside (0, 1]")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; labels.len()];
    for m in &mut members {
        if m.is_empty() {
            continue;
        }
        m.shuffle(&mut rng);
        let take = ((fraction * m.len() as f64).round() as usize).clamp(1, m.len());
        m[..take].iter().for_each(|&i| in_train[i] = true);
    }
    let (train, eval) = (0..labels.len()).partition(|&i| in_train[i]);
    Ok(LabelSet { train, eval })
}

/// Adam or SGD state over a whole [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, cfg: &StageConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply `grads`, skipping parameters for which `frozen` is true.
    /// Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, frozen: &dyn Fn(&str) -> bool) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFiniteGradient(store.name(id).to_owned()));
            }
        }
        while self.m.len() < store.len() {
            let n = store.value(crate::params::ParamId(self.m.len())).len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            if frozen(store.name(id)) {
                continue;
            }
            let p = store.value_mut(id);
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(g).for_each(|(p, g)| *p -= self.lr * g),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Loss of one cell and the gradients of every parameter it touched.
pub fn cell_loss_and_grads(
    model: &FusionModel,
    cell: CellInput,
    label: Option<usize>,
    stage: Stage,
    mask_seed: u64,
    cfg: &StageConfig,
) -> Result<(f64, Grads)> {
    let mut s = Session::new(&model.store);
    let root = cell_loss(model, &mut s, cell, label, stage, mask_seed, cfg)?;
    let loss = s.tape.value(root)[0];
    Ok((loss, s.gradients(root)?))
}

/// Records one cell's stage loss on `s` and returns the scalar node.
pub fn cell_loss(
    model: &FusionModel,
    s: &mut Session,
    cell: CellInput,
    label: Option<usize>,
    stage: Stage,
    mask_seed: u64,
    cfg: &StageConfig,
) -> Result<Var> {
    let f = model.forward_cell(s, cell, stage, mask_seed)?;
    match stage {
        Stage::Pretrain => {
            let (r_rna, x_rna) = f.recon_rna.expect("stage 1 reconstructs RNA");
            let (r_adt, x_adt) = f.recon_adt.expect("stage 1 reconstructs ADT");
            let l_rna = mse(&mut s.tape, r_rna, &x_rna)?;
            let l_adt = mse(&mut s.tape, r_adt, &x_adt)?;
            let a = s.tape.scale(l_rna, cfg.alpha)?;
            let b = s.tape.scale(l_adt, cfg.beta)?;
            Ok(s.tape.add(a, b)?)
        }
        Stage::Finetune | Stage::Transfer => {
            let y = label.ok_or_else(|| CoreError::contract("cell_loss", "classification needs a label"))?;
            let emb = f.embedding.expect("stages 2 and 3 embed");
            let probs = model.classify(s, emb)?;
            Ok(s.tape.nll(probs, &[y], PROB_EPS)?)
        }
    }
}

/// Mean loss and gradient over `cells`. Gradients are summed in the
/// given order so results do not depend on thread scheduling.
pub fn batch_loss_and_grads(
    model: &FusionModel,
    data: &TrainingData,
    cells: &[usize],
    stage: Stage,
    epoch: usize,
    cfg: &StageConfig,
) -> Result<(f64, Grads)> {
    let per_cell: Vec<Result<(f64, Grads)>> = cells
        .par_iter()
        .map(|&i| {
            let label = data.labels.as_ref().map(|l| l[i]);
            cell_loss_and_grads(model, data.cell(i), label, stage, mask_seed(cfg.seed, epoch, i), cfg)
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Grads::empty(model.store.len());
    for r in per_cell {
        let (l, g) = r?;
        total += l;
        grads.accumulate(&g);
    }
    let n = cells.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
}

fn check_prerequisites(model: &FusionModel, data: &TrainingData, stage: Stage) -> Result<()> {
    if data.n_cells() == 0 {
        return Err(CoreError::Config("no cells to train on".into()));
    }
    match stage {
        Stage::Pretrain => {
            if data.adt.is_none() {
                return Err(CoreError::Config("stage 1 needs paired RNA and ADT data".into()));
            }
        }
        Stage::Finetune => {
            if data.adt.is_none() || data.labels.is_none() {
                return Err(CoreError::Config("stage 2 needs paired data and labels".into()));
            }
            if model.stage.is_none() {
                return Err(CoreError::Config("stage 2 needs a stage-1 checkpoint".into()));
            }
        }
        Stage::Transfer => {
            if data.labels.is_none() {
                return Err(CoreError::Config("stage 3 needs labels".into()));
            }
            if model.stage < Some(Stage::Finetune) {
                return Err(CoreError::Config(format!(
                    "stage 3 needs a stage-2 checkpoint, got {}",
                    model.stage.map_or("an untrained model".into(), |s| format!("stage {s}"))
                )));
            }
        }
    }
    Ok(())
}

/// Train `model` for one stage and return the per-epoch mean loss.
pub fn run_stage(model: &mut FusionModel, data: &TrainingData, stage: Stage, cfg: &StageConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate(stage)?;
    check_prerequisites(model, data, stage)?;
    let mut cells: Vec<usize> = if stage == Stage::Pretrain {
        (0..data.n_cells()).collect()
    } else {
        model.ensure_head(&data.class_names)?;
        let labels = data.labels.as_ref().expect("checked above");
        split_labels(labels, cfg.label_fraction, cfg.seed)?.train
    };
    let mut trace = Vec::new();
    if model.stage < Some(stage) {
        model.stage = Some(stage);
    }
    if cfg.epochs == 0 {
        return Ok(trace);
    }
    let learn_eta = model.config.learn_eta;
    let frozen = move |name: &str| !learn_eta && name.ends_with("ttt.log_eta");
    let mut opt = Optimizer::new(&model.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        cells.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in cells.chunks(cfg.batch_size) {
            let (loss, grads) = batch_loss_and_grads(model, data, batch, stage, epoch, cfg)?;
            total += loss * batch.len() as f64;
            opt.step(&mut model.store, &grads, &frozen)?;
        }
        let loss = total / cells.len() as f64;
        log::info!("stage {stage} epoch {epoch}: loss {loss:.6}");
        trace.push(EpochLoss { epoch, stage, loss });
        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("stage {stage}: no improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    Ok(trace)
}

/// Cell embeddings for every cell, in cell order.
pub fn embed_all(model: &FusionModel, data: &TrainingData, stage: Stage) -> Result<Vec<Vec<f64>>> {
    (0..data.n_cells())
        .into_par_iter()
        .map(|i| model.embed_cell(data.cell(i), stage))
        .collect()
}

/// `epoch,stage,loss` rows.
pub fn write_loss_csv(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,stage,loss\n");
    for e in trace {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.stage, e.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CoreError::io(path, e))
}
