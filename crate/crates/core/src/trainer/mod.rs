//! Mini-batch training: triple sampling, Adam, centroid refresh, early
//! stopping and checkpoints.
//!
//! Randomness is drawn from independent ChaCha streams keyed by
//! `(seed, epoch, view)`, so resuming from an epoch boundary needs no RNG
//! state and a model without the I&U branch consumes exactly the I&F
//! stream of the full model.

mod checkpoint;
mod config;

pub use checkpoint::Checkpoint;
pub use config::{ModelKind, TrainConfig, CONFIG_KEYS};

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{holdout_per_user, Edge, InteractionDataset, UserItems};
use crate::error::{Error, Result};
use crate::evaluation::{rank_users, recall_at_n};
use crate::macrofm::CentroidSet;
use crate::objective::{total_loss, GradientBuffer, LossBreakdown, ObjectiveInputs, StepBatch, Triple};
use crate::propagation::{propagate, LayerStack, View, ViewEmbeddings};
use crate::sparse::{Matrix, NormalizedAdjacency};

/// Rejection attempts before a negative that may be a positive is accepted.
pub const NEGATIVE_ATTEMPTS: usize = 100;

const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn init_stream(seed: u64, view: View) -> ChaCha8Rng {
    stream(seed, 1 + view.tag() as u64)
}

fn epoch_stream(seed: u64, epoch: usize, view: View) -> ChaCha8Rng {
    stream(seed, 16 + 2 * epoch as u64 + view.tag() as u64)
}

fn centroid_seed(seed: u64, epoch: usize, view: View) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (((epoch as u64) << 2) | (2 * view.tag() as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub view: View,
    pub triples: Vec<Triple>,
}

/// Draws `batch_size` triples: positives uniformly from `edges`, negatives
/// uniformly from the catalog with rejection against `positives`.
pub fn sample_triplets<R: Rng + ?Sized>(
    edges: &[Edge],
    positives: &UserItems,
    num_items: usize,
    view: View,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    if edges.is_empty() {
        return Err(Error::InvalidArgument(format!("no {view} train edges to sample from")));
    }
    if num_items == 0 {
        return Err(Error::InvalidArgument("empty item catalog".into()));
    }
    let mut forced = 0usize;
    let triples = (0..batch_size)
        .map(|_| {
            let (u, i) = edges[rng.random_range(0..edges.len())];
            let mut j = 0;
            let mut found = false;
            for _ in 0..NEGATIVE_ATTEMPTS {
                j = rng.random_range(0..num_items as u32);
                if !positives.contains(u as usize, j) {
                    found = true;
                    break;
                }
            }
            if !found {
                forced += 1;
            }
            (u as usize, i as usize, j as usize)
        })
        .collect();
    if forced > 0 {
        log::warn!("{forced} {view} negative(s) accepted after {NEGATIVE_ATTEMPTS} rejected draws");
    }
    Ok(TripletBatch { view, triples })
}

/// Trainable tables of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub if_emb: ViewEmbeddings,
    pub iu_emb: Option<ViewEmbeddings>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Matrix,
    pub v: Matrix,
}

/// Moments per parameter table, in the order the tables are passed to
/// [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: shapes.iter().map(|&s| AdamMoments { m: Matrix::zeros(s), v: Matrix::zeros(s) }).collect(),
        }
    }
}

/// One bias-corrected Adam update of every table.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[&Matrix], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::Dimension("parameter, gradient and moment counts differ".into()));
    }
    for ((p, g), mo) in params.iter().zip(grads).zip(&state.moments) {
        if p.dim() != g.dim() || p.dim() != mo.m.dim() {
            return Err(Error::Dimension(format!("parameter {:?} vs gradient {:?}", p.dim(), g.dim())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "gradient" });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), mo) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        ndarray::Zip::from(&mut **p).and(*g).and(&mut mo.m).and(&mut mo.v).for_each(|p, &g, m, v| {
            let g = g + weight_decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    }
    Ok(())
}

/// Train graph of one view with its positive lookup.
struct ViewGraph {
    edges: Vec<Edge>,
    positives: UserItems,
    adj: NormalizedAdjacency,
}

impl ViewGraph {
    fn new(edges: Vec<Edge>, m: usize, n: usize) -> Result<Self> {
        let adj = NormalizedAdjacency::from_edges(&edges, m, n)?;
        Ok(Self { positives: UserItems::from_edges(m, &edges), edges, adj })
    }
}

fn union_edges(a: &[Edge], b: &[Edge]) -> Vec<Edge> {
    let mut all: Vec<Edge> = a.iter().chain(b).copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Edges the scoring view is built on at inference.
fn scoring_edges(model: ModelKind, dataset: &InteractionDataset) -> Vec<Edge> {
    match model {
        ModelKind::LightGcn => union_edges(&dataset.train_if, &dataset.train_iu),
        ModelKind::Frgcf | ModelKind::LightGcnIf => dataset.train_if.clone(),
    }
}

/// Propagates `if_emb` over the full train graph of the scoring view.
pub fn scoring_stack(config: &TrainConfig, if_emb: &ViewEmbeddings, dataset: &InteractionDataset) -> Result<LayerStack> {
    if if_emb.num_users != dataset.num_users || if_emb.num_items != dataset.num_items {
        return Err(Error::Dimension("embedding table does not match dataset".into()));
    }
    let adj = NormalizedAdjacency::from_edges(&scoring_edges(config.model, dataset), dataset.num_users, dataset.num_items)?;
    propagate(if_emb, &adj, config.hp.layers, config.layer_combination)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One structured log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub kind: RecordKind,
    /// 1-based epoch the record belongs to.
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_metric: Option<f64>,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub struct Trainer<'a> {
    dataset: &'a InteractionDataset,
    config: TrainConfig,
    if_graph: ViewGraph,
    iu_graph: Option<ViewGraph>,
    validation: Option<(UserItems, Vec<usize>)>,
    val_masks: Vec<UserItems>,
    state: Checkpoint,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a InteractionDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (m, n, d) = (dataset.num_users, dataset.num_items, config.hp.dim);
        let if_emb = ViewEmbeddings::xavier(View::If, m, n, d, &mut init_stream(config.seed, View::If));
        let iu_emb = config
            .model
            .uses_iu_view()
            .then(|| ViewEmbeddings::xavier(View::Iu, m, n, d, &mut init_stream(config.seed, View::Iu)));
        let params = ModelParams { if_emb, iu_emb };
        let shapes: Vec<_> = std::iter::once(&params.if_emb).chain(&params.iu_emb).map(|e| e.base.dim()).collect();
        let state = Checkpoint {
            config_hash: config.hash(),
            dataset_hash: dataset.content_hash(),
            config: config.clone(),
            epoch: 0,
            best_epoch: 0,
            best_metric: f64::NEG_INFINITY,
            stale_evals: 0,
            finished: false,
            validation_history: Vec::new(),
            best: params.clone(),
            params,
            adam: AdamState::new(&shapes),
            centroids: None,
        };
        Self::with_state(dataset, config, state)
    }

    /// Continues from a checkpoint. The budget (`max_epochs`, `patience`)
    /// may differ from the original run; nothing else may.
    pub fn resume(dataset: &'a InteractionDataset, config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        checkpoint.check_dataset(dataset)?;
        if checkpoint.config_hash != config.hash() {
            return Err(Error::HashMismatch { expected: checkpoint.config_hash.clone(), found: config.hash() });
        }
        let mut state = checkpoint;
        state.config = config.clone();
        state.finished = state.epoch >= config.max_epochs || state.stale_evals >= config.patience;
        Self::with_state(dataset, config, state)
    }

    fn with_state(dataset: &'a InteractionDataset, config: TrainConfig, state: Checkpoint) -> Result<Self> {
        let (m, n) = (dataset.num_users, dataset.num_items);
        if dataset.train_if.is_empty() {
            return Err(Error::InvalidArgument("no I&F train edges".into()));
        }
        let (fit_if, held) = if config.validation_fraction > 0.0 {
            holdout_per_user(&dataset.train_if, config.validation_fraction, &mut ChaCha8Rng::seed_from_u64(config.seed ^ VALIDATION_STREAM))
        } else {
            (dataset.train_if.clone(), Vec::new())
        };
        let validation = (!held.is_empty()).then(|| {
            let mut users: Vec<usize> = held.iter().map(|&(u, _)| u as usize).collect();
            users.dedup();
            (UserItems::from_edges(m, &held), users)
        });
        if validation.is_none() {
            log::warn!("no validation edges; early stopping disabled");
        }
        let val_masks = vec![UserItems::from_edges(m, &fit_if), UserItems::from_edges(m, &dataset.train_iu)];
        let (if_graph, iu_graph) = match config.model {
            ModelKind::Frgcf => (ViewGraph::new(fit_if, m, n)?, Some(ViewGraph::new(dataset.train_iu.clone(), m, n)?)),
            ModelKind::LightGcn => (ViewGraph::new(union_edges(&fit_if, &dataset.train_iu), m, n)?, None),
            ModelKind::LightGcnIf => (ViewGraph::new(fit_if, m, n)?, None),
        };
        if state.params.iu_emb.is_some() != iu_graph.is_some() {
            return Err(Error::Config("checkpoint tables do not match the model kind".into()));
        }
        Ok(Self { dataset, config, if_graph, iu_graph, validation, val_masks, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.if_graph.edges.len().div_ceil(self.config.batch_size)
    }

    /// Validation Recall@n of the current I&F table on the training graph.
    pub fn validation_recall(&self) -> Result<Option<f64>> {
        let Some((relevant, users)) = &self.validation else {
            return Ok(None);
        };
        let m = self.dataset.num_users;
        let stack = propagate(&self.state.params.if_emb, &self.if_graph.adj, self.config.hp.layers, self.config.layer_combination)?;
        let u = stack.combined.slice(s![..m, ..]).to_owned();
        let i = stack.combined.slice(s![m.., ..]).to_owned();
        let masks: Vec<&UserItems> = self.val_masks.iter().collect();
        let results = rank_users(&u, &i, users, &masks, self.config.eval_n)?;
        Ok(Some(recall_at_n(&results, relevant, self.config.eval_n)))
    }

    /// Runs one epoch, evaluating when due.
    pub fn run_epoch(&mut self, observer: &mut dyn FnMut(&LogRecord)) -> Result<LogRecord> {
        if self.state.finished {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let cfg = self.config.clone();
        let hp = &cfg.hp;
        let epoch = self.state.epoch;
        let n = self.dataset.num_items;

        self.state.centroids = if hp.lambda_macro > 0.0 {
            let iu = self.state.params.iu_emb.as_ref().expect("macro term implies the I&U table");
            Some((
                CentroidSet::fit(&self.state.params.if_emb, hp.centroids, centroid_seed(cfg.seed, epoch, View::If), cfg.kmeans_iters)?,
                CentroidSet::fit(iu, hp.centroids, centroid_seed(cfg.seed, epoch, View::Iu), cfg.kmeans_iters)?,
            ))
        } else {
            None
        };

        let mut rng_if = epoch_stream(cfg.seed, epoch, View::If);
        let mut rng_iu = epoch_stream(cfg.seed, epoch, View::Iu);
        let steps = self.steps_per_epoch();
        let mut sum = LossBreakdown::default();
        for step in 0..steps {
            let if_batch = sample_triplets(&self.if_graph.edges, &self.if_graph.positives, n, View::If, cfg.batch_size, &mut rng_if)?;
            let iu_batch = match &self.iu_graph {
                Some(g) if !g.edges.is_empty() => sample_triplets(&g.edges, &g.positives, n, View::Iu, cfg.batch_size, &mut rng_iu)?.triples,
                _ => Vec::new(),
            };
            let (users, items) = if hp.uses_ssl() { batch_nodes(&if_batch.triples, &iu_batch) } else { (Vec::new(), Vec::new()) };
            let params = &self.state.params;
            let inputs = ObjectiveInputs {
                if_emb: &params.if_emb,
                a_if: &self.if_graph.adj,
                iu: params.iu_emb.as_ref().zip(self.iu_graph.as_ref().map(|g| &g.adj)),
                centroids: self.state.centroids.as_ref().map(|(a, b)| (a, b)),
                combination: cfg.layer_combination,
            };
            let batch = StepBatch { if_triples: &if_batch.triples, iu_triples: &iu_batch, users: &users, items: &items };
            let (loss, grads) = total_loss(&inputs, &batch, hp).inspect_err(|e| {
                log::error!(
                    "epoch {} step {step}: {e}; |E_IF| = {:.6e}, |E_IU| = {:.6e}",
                    epoch + 1,
                    frobenius(&params.if_emb.base),
                    params.iu_emb.as_ref().map_or(0.0, |e| frobenius(&e.base))
                );
            })?;
            self.apply_gradients(grads)?;
            add_into(&mut sum, &loss);
            let global = self.state.adam.step;
            if cfg.log_every > 0 && global.is_multiple_of(cfg.log_every as u64) {
                observer(&LogRecord { kind: RecordKind::Step, epoch: epoch + 1, step: global, loss, validation_recall: None, best_metric: None });
            }
        }
        let mean = scale(&sum, 1.0 / steps as f64);
        self.state.epoch += 1;
        let done_epochs = self.state.epoch;

        let mut validation_recall = None;
        if done_epochs.is_multiple_of(cfg.eval_every) || done_epochs >= cfg.max_epochs {
            validation_recall = self.validation_recall()?;
            match validation_recall {
                Some(r) => {
                    self.state.validation_history.push(r);
                    if r > self.state.best_metric {
                        self.state.best_metric = r;
                        self.state.best_epoch = done_epochs;
                        self.state.best = self.state.params.clone();
                        self.state.stale_evals = 0;
                    } else {
                        self.state.stale_evals += 1;
                    }
                }
                None => {
                    self.state.best_epoch = done_epochs;
                    self.state.best = self.state.params.clone();
                }
            }
        }
        self.state.finished = done_epochs >= cfg.max_epochs || self.state.stale_evals >= cfg.patience;
        let record = LogRecord {
            kind: RecordKind::Epoch,
            epoch: done_epochs,
            step: self.state.adam.step,
            loss: mean,
            validation_recall,
            best_metric: self.state.best_metric.is_finite().then_some(self.state.best_metric),
        };
        observer(&record);
        Ok(record)
    }

    fn apply_gradients(&mut self, grads: GradientBuffer) -> Result<()> {
        let params = &mut self.state.params;
        let mut tables: Vec<&mut Matrix> = vec![&mut params.if_emb.base];
        let mut gs: Vec<&Matrix> = vec![&grads.g_if];
        if let (Some(iu), Some(g)) = (params.iu_emb.as_mut(), grads.g_iu.as_ref()) {
            tables.push(&mut iu.base);
            gs.push(g);
        }
        adam_step(&mut tables, &gs, &mut self.state.adam, self.config.lr, self.config.weight_decay)
    }

    /// Trains until the budget or patience runs out.
    pub fn run(&mut self, observer: &mut dyn FnMut(&LogRecord)) -> Result<()> {
        while !self.state.finished {
            self.run_epoch(observer)?;
        }
        Ok(())
    }
}

/// Sorted unique users, and items (positives and negatives), of both batches.
pub fn batch_nodes(if_triples: &[Triple], iu_triples: &[Triple]) -> (Vec<usize>, Vec<usize>) {
    let mut users = Vec::with_capacity(if_triples.len() + iu_triples.len());
    let mut items = Vec::with_capacity(2 * users.capacity());
    for &(u, i, j) in if_triples.iter().chain(iu_triples) {
        users.push(u);
        items.push(i);
        items.push(j);
    }
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    (users, items)
}

fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn add_into(acc: &mut LossBreakdown, x: &LossBreakdown) {
    acc.bpr_if += x.bpr_if;
    acc.bpr_iu += x.bpr_iu;
    acc.frcl += x.frcl;
    acc.macro_term += x.macro_term;
    acc.dis += x.dis;
    acc.total += x.total;
}

fn scale(x: &LossBreakdown, by: f64) -> LossBreakdown {
    LossBreakdown {
        bpr_if: x.bpr_if * by,
        bpr_iu: x.bpr_iu * by,
        frcl: x.frcl * by,
        macro_term: x.macro_term * by,
        dis: x.dis * by,
        total: x.total * by,
    }
}

/// Trains from scratch and returns the final checkpoint.
pub fn fit(dataset: &InteractionDataset, config: TrainConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(dataset, config)?;
    trainer.run(&mut |_| {})?;
    Ok(trainer.into_checkpoint())
}
