//! Fitting query/item embeddings to observed scores.
//!
//! Minimizes the squared error over the observed entries of the sparse
//! score matrix, `sum_{(q,i) observed} (G_qi - u_q . v_i)^2`, in one of two
//! parameterizations:
//!
//! - transductive: `U` and `V` are free parameters (optionally initialized
//!   from base embeddings);
//! - inductive: `U = tower_q(base_q)`, `V = tower_i(base_i)` with shallow
//!   skip-connected MLP towers over frozen base embeddings, which also
//!   generalizes to rows never observed in training.
//!
//! Training is single-threaded and bitwise deterministic for a fixed seed.

pub mod mlp;
pub mod optim;

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::matrix::{EmbeddingMatrix, EmbeddingRole};
use crate::rng;
use crate::sparse::SparseScoreMatrix;
use mlp::{MlpGrads, MlpTowerParams};
use optim::{OptimState, Optimizer, OptimizerKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct MfHyperparams {
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Wall-clock training cap, checked between epochs.
    pub max_wall_seconds: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Gradient-computation workers. 1 (the default) is bitwise
    /// deterministic; larger values shard each minibatch and reduce in a
    /// fixed shard order, so results may differ from single-threaded runs
    /// in the last bits but not between identical parallel runs.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl MfHyperparams {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            learning_rate: 0.001,
            epochs: 20,
            batch_size: 256,
            seed: 0,
            max_wall_seconds: None,
            optimizer: OptimizerKind::default_adamw(),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidSpec("dim must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidSpec(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidSpec("workers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MfKind {
    Transductive,
    Inductive,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MfTowers {
    pub query: MlpTowerParams,
    pub item: MlpTowerParams,
}

/// A trained factorization model.
///
/// `u`/`v` are the materialized train-query and item embeddings. For the
/// inductive kind, they are a deterministic function of the towers and the
/// retained frozen base embeddings.
#[derive(Clone, Debug)]
pub struct MfModel {
    pub kind: MfKind,
    pub u: EmbeddingMatrix,
    pub v: EmbeddingMatrix,
    pub towers: Option<MfTowers>,
    pub base_query_embs: Option<EmbeddingMatrix>,
    pub base_item_embs: Option<EmbeddingMatrix>,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_seconds: f64,
}

fn gradient_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::BackendFailure(format!("thread pool: {e}")))
}

/// Per-shard sparse gradient accumulator for the parallel trainer.
#[derive(Default)]
struct ShardGrads {
    u: Vec<(usize, Vec<f64>)>,
    v: Vec<(usize, Vec<f64>)>,
    u_index: std::collections::HashMap<usize, usize>,
    v_index: std::collections::HashMap<usize, usize>,
}

impl ShardGrads {
    fn add_row(&mut self, is_u: bool, row: usize, d: usize, r: f64, other: &[f64]) {
        let (rows, index) = if is_u {
            (&mut self.u, &mut self.u_index)
        } else {
            (&mut self.v, &mut self.v_index)
        };
        let slot = *index.entry(row).or_insert_with(|| {
            rows.push((row, vec![0.0; d]));
            rows.len() - 1
        });
        for (g, &o) in rows[slot].1.iter_mut().zip(other) {
            *g += r * o;
        }
    }

    /// Rows sorted by id so the merge order never depends on hashing.
    fn sorted(mut self) -> Self {
        self.u.sort_unstable_by_key(|(row, _)| *row);
        self.v.sort_unstable_by_key(|(row, _)| *row);
        self
    }
}

/// Squared error restricted to the observed entries.
pub fn mf_loss(g: &SparseScoreMatrix, u: &EmbeddingMatrix, v: &EmbeddingMatrix) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch(format!(
            "u dim {} != v dim {}",
            u.dim(),
            v.dim()
        )));
    }
    if u.rows() != g.n_queries() || v.rows() != g.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "embedding rows ({}, {}) do not match matrix shape ({}, {})",
            u.rows(),
            v.rows(),
            g.n_queries(),
            g.n_items()
        )));
    }
    Ok(loss_raw(g, u.data(), v.data(), u.dim()))
}

fn loss_raw(g: &SparseScoreMatrix, u: &[f64], v: &[f64], d: usize) -> f64 {
    g.entries()
        .iter()
        .map(|e| {
            let pred = dot(
                &u[e.query.0 * d..(e.query.0 + 1) * d],
                &v[e.item.0 * d..(e.item.0 + 1) * d],
            );
            let r = e.score - pred;
            r * r
        })
        .sum()
}

/// Train free `U`, `V` on the observed entries.
///
/// Minibatch gradient descent over a seeded shuffle of the entries; the
/// parameters achieving the lowest end-of-epoch loss are returned, so the
/// final loss never exceeds the initial one.
pub fn train_transductive(
    g: &SparseScoreMatrix,
    init_u: &EmbeddingMatrix,
    init_v: &EmbeddingMatrix,
    h: &MfHyperparams,
) -> Result<(MfModel, TrainSummary)> {
    h.validate()?;
    if init_u.dim() != h.dim || init_v.dim() != h.dim {
        return Err(Error::DimensionMismatch(format!(
            "init dims ({}, {}) do not match configured dim {}",
            init_u.dim(),
            init_v.dim(),
            h.dim
        )));
    }
    if init_u.rows() != g.n_queries() || init_v.rows() != g.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "init rows ({}, {}) do not match matrix shape ({}, {})",
            init_u.rows(),
            init_v.rows(),
            g.n_queries(),
            g.n_items()
        )));
    }

    let d = h.dim;
    let start = Instant::now();
    let mut u = init_u.data().to_vec();
    let mut v = init_v.data().to_vec();
    let opt = Optimizer {
        kind: h.optimizer,
        lr: h.learning_rate,
    };
    let mut u_state = OptimState::new(u.len());
    let mut v_state = OptimState::new(v.len());

    let initial_loss = loss_raw(g, &u, &v, d);
    let mut best_loss = initial_loss;
    let mut best = (u.clone(), v.clone());

    let mut grad_u = vec![0.0; u.len()];
    let mut grad_v = vec![0.0; v.len()];
    let mut order: Vec<usize> = (0..g.nnz()).collect();
    let mut shuffle_rng = rng::stream(rng::derive_seed(h.seed, "mf-trns-shuffle"));
    let entries = g.entries();
    let mut epochs_run = 0;
    let pool = gradient_pool(h.workers)?;

    for epoch in 0..h.epochs {
        if let Some(cap) = h.max_wall_seconds {
            if start.elapsed().as_secs_f64() > cap {
                break;
            }
        }
        rng::shuffle(&mut shuffle_rng, &mut order);
        for batch in order.chunks(h.batch_size) {
            let scale = 2.0 / batch.len() as f64;
            let mut touched_u: Vec<usize> = Vec::with_capacity(batch.len());
            let mut touched_v: Vec<usize> = Vec::with_capacity(batch.len());
            match &pool {
                None => {
                    for &idx in batch {
                        let e = &entries[idx];
                        let (q, i) = (e.query.0, e.item.0);
                        let pred = dot(&u[q * d..(q + 1) * d], &v[i * d..(i + 1) * d]);
                        let r = scale * (pred - e.score);
                        for c in 0..d {
                            grad_u[q * d + c] += r * v[i * d + c];
                            grad_v[i * d + c] += r * u[q * d + c];
                        }
                        touched_u.push(q);
                        touched_v.push(i);
                    }
                }
                Some(pool) => {
                    // shard the batch; each worker accumulates local sparse
                    // gradients, merged here in fixed shard order
                    let chunk = batch.len().div_ceil(h.workers);
                    let u_ref: &[f64] = &u;
                    let v_ref: &[f64] = &v;
                    let shards: Vec<ShardGrads> = pool.install(|| {
                        batch
                            .par_chunks(chunk)
                            .map(|shard| {
                                let mut local = ShardGrads::default();
                                for &idx in shard {
                                    let e = &entries[idx];
                                    let (q, i) = (e.query.0, e.item.0);
                                    let pred =
                                        dot(&u_ref[q * d..(q + 1) * d], &v_ref[i * d..(i + 1) * d]);
                                    let r = scale * (pred - e.score);
                                    local.add_row(true, q, d, r, &v_ref[i * d..(i + 1) * d]);
                                    local.add_row(false, i, d, r, &u_ref[q * d..(q + 1) * d]);
                                }
                                local.sorted()
                            })
                            .collect()
                    });
                    for shard in shards {
                        for (q, g_row) in shard.u {
                            for (c, gv) in g_row.into_iter().enumerate() {
                                grad_u[q * d + c] += gv;
                            }
                            touched_u.push(q);
                        }
                        for (i, g_row) in shard.v {
                            for (c, gv) in g_row.into_iter().enumerate() {
                                grad_v[i * d + c] += gv;
                            }
                            touched_v.push(i);
                        }
                    }
                }
            }
            touched_u.sort_unstable();
            touched_u.dedup();
            touched_v.sort_unstable();
            touched_v.dedup();
            opt.step_rows(&mut u_state, &mut u, &grad_u, &touched_u, d);
            opt.step_rows(&mut v_state, &mut v, &grad_v, &touched_v, d);
            for &q in &touched_u {
                grad_u[q * d..(q + 1) * d].fill(0.0);
            }
            for &i in &touched_v {
                grad_v[i * d..(i + 1) * d].fill(0.0);
            }
        }
        epochs_run = epoch + 1;
        let loss = loss_raw(g, &u, &v, d);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if loss < best_loss {
            best_loss = loss;
            best = (u.clone(), v.clone());
        }
    }

    let (bu, bv) = best;
    let model = MfModel {
        kind: MfKind::Transductive,
        u: EmbeddingMatrix::new(g.n_queries(), d, EmbeddingRole::Query, bu)?,
        v: EmbeddingMatrix::new(g.n_items(), d, EmbeddingRole::Item, bv)?,
        towers: None,
        base_query_embs: None,
        base_item_embs: None,
    };
    Ok((
        model,
        TrainSummary {
            epochs_run,
            initial_loss,
            final_loss: best_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Train skip-connected MLP towers over frozen base embeddings.
pub fn train_inductive(
    g: &SparseScoreMatrix,
    base_q: &EmbeddingMatrix,
    base_i: &EmbeddingMatrix,
    h: &MfHyperparams,
) -> Result<(MfModel, TrainSummary)> {
    h.validate()?;
    if base_q.dim() != base_i.dim() || base_q.dim() != h.dim {
        return Err(Error::DimensionMismatch(format!(
            "base dims ({}, {}) must both equal configured dim {}",
            base_q.dim(),
            base_i.dim(),
            h.dim
        )));
    }
    if base_q.rows() != g.n_queries() || base_i.rows() != g.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "base rows ({}, {}) do not match matrix shape ({}, {})",
            base_q.rows(),
            base_i.rows(),
            g.n_queries(),
            g.n_items()
        )));
    }

    let d = h.dim;
    let start = Instant::now();
    let mut init_rng = rng::stream(rng::derive_seed(h.seed, "mf-ind-init"));
    let mut tower_q = MlpTowerParams::init(d, &mut init_rng)?;
    let mut tower_i = MlpTowerParams::init(d, &mut init_rng)?;

    let opt = Optimizer {
        kind: h.optimizer,
        lr: h.learning_rate,
    };
    let mut states = TowerStates::new(d);

    let eval_loss = |tq: &MlpTowerParams, ti: &MlpTowerParams| -> Result<f64> {
        let mut total = 0.0;
        for e in g.entries() {
            let uq = tq.forward(base_q.row(e.query.0))?;
            let vi = ti.forward(base_i.row(e.item.0))?;
            let r = e.score - dot(&uq, &vi);
            total += r * r;
        }
        Ok(total)
    };

    let initial_loss = eval_loss(&tower_q, &tower_i)?;
    let mut best_loss = initial_loss;
    let mut best = (tower_q.clone(), tower_i.clone());

    let entries = g.entries();
    let mut order: Vec<usize> = (0..g.nnz()).collect();
    let mut shuffle_rng = rng::stream(rng::derive_seed(h.seed, "mf-ind-shuffle"));
    let mut epochs_run = 0;
    let pool = gradient_pool(h.workers)?;

    let entry_grads = |tq: &MlpTowerParams,
                       ti: &MlpTowerParams,
                       idx: usize,
                       scale: f64|
     -> Result<(MlpGrads, MlpGrads)> {
        let e = &entries[idx];
        let xq = base_q.row(e.query.0);
        let xi = base_i.row(e.item.0);
        let (uq, cache_q) = tq.forward_cached(xq)?;
        let (vi, cache_i) = ti.forward_cached(xi)?;
        let r = scale * (dot(&uq, &vi) - e.score);
        let grad_u: Vec<f64> = vi.iter().map(|&c| r * c).collect();
        let grad_v: Vec<f64> = uq.iter().map(|&c| r * c).collect();
        let (gq, _) = tq.backward(xq, &cache_q, &grad_u);
        let (gi, _) = ti.backward(xi, &cache_i, &grad_v);
        Ok((gq, gi))
    };

    for epoch in 0..h.epochs {
        if let Some(cap) = h.max_wall_seconds {
            if start.elapsed().as_secs_f64() > cap {
                break;
            }
        }
        rng::shuffle(&mut shuffle_rng, &mut order);
        for batch in order.chunks(h.batch_size) {
            let scale = 2.0 / batch.len() as f64;
            let mut gq = MlpGrads::zeros(d);
            let mut gi = MlpGrads::zeros(d);
            match &pool {
                None => {
                    for &idx in batch {
                        let (one_q, one_i) = entry_grads(&tower_q, &tower_i, idx, scale)?;
                        gq.add(&one_q);
                        gi.add(&one_i);
                    }
                }
                Some(pool) => {
                    let chunk = batch.len().div_ceil(h.workers);
                    let tq = &tower_q;
                    let ti = &tower_i;
                    let shards: Vec<(MlpGrads, MlpGrads)> = pool.install(|| {
                        batch
                            .par_chunks(chunk)
                            .map(|shard| {
                                let mut sq = MlpGrads::zeros(d);
                                let mut si = MlpGrads::zeros(d);
                                for &idx in shard {
                                    let (one_q, one_i) = entry_grads(tq, ti, idx, scale)?;
                                    sq.add(&one_q);
                                    si.add(&one_i);
                                }
                                Ok((sq, si))
                            })
                            .collect::<Result<Vec<_>>>()
                    })?;
                    for (sq, si) in shards {
                        gq.add(&sq);
                        gi.add(&si);
                    }
                }
            }
            states.step(&opt, &mut tower_q, &gq, &mut tower_i, &gi);
        }
        epochs_run = epoch + 1;
        let loss = eval_loss(&tower_q, &tower_i)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if loss < best_loss {
            best_loss = loss;
            best = (tower_q.clone(), tower_i.clone());
        }
    }

    let (bq, bi) = best;
    let u = apply_tower(&bq, base_q, EmbeddingRole::Query)?;
    let v = apply_tower(&bi, base_i, EmbeddingRole::Item)?;
    let model = MfModel {
        kind: MfKind::Inductive,
        u,
        v,
        towers: Some(MfTowers {
            query: bq,
            item: bi,
        }),
        base_query_embs: Some(base_q.clone()),
        base_item_embs: Some(base_i.clone()),
    };
    Ok((
        model,
        TrainSummary {
            epochs_run,
            initial_loss,
            final_loss: best_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

struct TowerStates {
    q: [OptimState; 4],
    q_skip: OptimState,
    i: [OptimState; 4],
    i_skip: OptimState,
}

impl TowerStates {
    fn new(d: usize) -> Self {
        let h = 2 * d;
        let mk = || {
            [
                OptimState::new(d * h),
                OptimState::new(h),
                OptimState::new(h * d),
                OptimState::new(d),
            ]
        };
        Self {
            q: mk(),
            q_skip: OptimState::new(1),
            i: mk(),
            i_skip: OptimState::new(1),
        }
    }

    fn step(
        &mut self,
        opt: &Optimizer,
        tq: &mut MlpTowerParams,
        gq: &MlpGrads,
        ti: &mut MlpTowerParams,
        gi: &MlpGrads,
    ) {
        opt.step_dense(&mut self.q[0], &mut tq.w1, &gq.w1);
        opt.step_dense(&mut self.q[1], &mut tq.b1, &gq.b1);
        opt.step_dense(&mut self.q[2], &mut tq.w2, &gq.w2);
        opt.step_dense(&mut self.q[3], &mut tq.b2, &gq.b2);
        let mut skip = [tq.w_skip];
        opt.step_dense(&mut self.q_skip, &mut skip, &[gq.w_skip]);
        tq.w_skip = skip[0];

        opt.step_dense(&mut self.i[0], &mut ti.w1, &gi.w1);
        opt.step_dense(&mut self.i[1], &mut ti.b1, &gi.b1);
        opt.step_dense(&mut self.i[2], &mut ti.w2, &gi.w2);
        opt.step_dense(&mut self.i[3], &mut ti.b2, &gi.b2);
        let mut skip = [ti.w_skip];
        opt.step_dense(&mut self.i_skip, &mut skip, &[gi.w_skip]);
        ti.w_skip = skip[0];
    }
}

fn apply_tower(
    tower: &MlpTowerParams,
    base: &EmbeddingMatrix,
    role: EmbeddingRole,
) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(base.rows() * base.dim());
    for row in base.iter_rows() {
        data.extend(tower.forward(row)?);
    }
    EmbeddingMatrix::new(base.rows(), base.dim(), role, data)
}

/// Item embeddings used for retrieval: stored `V` for transductive models,
/// the item tower applied to every base item embedding for inductive ones.
pub fn embed_items(model: &MfModel) -> Result<EmbeddingMatrix> {
    match model.kind {
        MfKind::Transductive => Ok(model.v.clone()),
        MfKind::Inductive => {
            let towers = model
                .towers
                .as_ref()
                .ok_or_else(|| Error::InvalidSpec("inductive model lacks towers".into()))?;
            let base = model.base_item_embs.as_ref().ok_or_else(|| {
                Error::InvalidSpec("inductive model lacks base embeddings".into())
            })?;
            apply_tower(&towers.item, base, EmbeddingRole::Item)
        }
    }
}

/// Query embedding for an arbitrary (possibly unseen) base query embedding.
/// Only defined for inductive models; transductive models have no mapping
/// for rows outside the train set.
pub fn embed_query(model: &MfModel, base_query: &[f64]) -> Result<Vec<f64>> {
    let towers = model
        .towers
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("query embedding requires an inductive model".into()))?;
    towers.query.forward(base_query)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: MfKind,
    dim: usize,
    towers: Option<MfTowers>,
}

impl MfModel {
    /// Write the model as a directory: `model.json` plus embedding files
    /// (`u.emb`, `v.emb`, and base embeddings for inductive models).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = ModelMeta {
            kind: self.kind,
            dim: self.v.dim(),
            towers: self.towers.clone(),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Format(format!("encode model meta: {e}")))?;
        std::fs::write(dir.join("model.json"), json)?;
        self.u.save(&dir.join("u.emb"))?;
        self.v.save(&dir.join("v.emb"))?;
        if let Some(b) = &self.base_query_embs {
            b.save(&dir.join("base_q.emb"))?;
        }
        if let Some(b) = &self.base_item_embs {
            b.save(&dir.join("base_i.emb"))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)
                .map_err(|e| Error::Format(format!("decode model meta: {e}")))?;
        if let Some(t) = &meta.towers {
            t.query.validate()?;
            t.item.validate()?;
        }
        let u = EmbeddingMatrix::load(&dir.join("u.emb"))?;
        let v = EmbeddingMatrix::load(&dir.join("v.emb"))?;
        let base_query_embs = match meta.kind {
            MfKind::Inductive => Some(EmbeddingMatrix::load(&dir.join("base_q.emb"))?),
            MfKind::Transductive => None,
        };
        let base_item_embs = match meta.kind {
            MfKind::Inductive => Some(EmbeddingMatrix::load(&dir.join("base_i.emb"))?),
            MfKind::Transductive => None,
        };
        if u.dim() != meta.dim || v.dim() != meta.dim {
            return Err(Error::Format(
                "model dim inconsistent with embeddings".into(),
            ));
        }
        Ok(Self {
            kind: meta.kind,
            u,
            v,
            towers: meta.towers,
            base_query_embs,
            base_item_embs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{ItemId, QueryId};
    use crate::sparse::ScoreEntry;
    use tempfile::tempdir;

    fn full_low_rank(nq: usize, ni: usize, rank: usize, seed: u64) -> (SparseScoreMatrix, f64) {
        let mut r = rng::stream(seed);
        let uq = rng::normal_vec(&mut r, nq * rank);
        let vi = rng::normal_vec(&mut r, ni * rank);
        let mut entries = Vec::with_capacity(nq * ni);
        let mut frob = 0.0;
        for q in 0..nq {
            for i in 0..ni {
                let s = dot(&uq[q * rank..(q + 1) * rank], &vi[i * rank..(i + 1) * rank]);
                frob += s * s;
                entries.push(ScoreEntry {
                    query: QueryId(q),
                    item: ItemId(i),
                    score: s,
                });
            }
        }
        (
            SparseScoreMatrix::new(nq, ni, entries).unwrap(),
            frob.sqrt(),
        )
    }

    fn random_embs(
        rows: usize,
        dim: usize,
        role: EmbeddingRole,
        std: f64,
        seed: u64,
    ) -> EmbeddingMatrix {
        let mut r = rng::stream(seed);
        EmbeddingMatrix::random_normal(rows, dim, role, std, &mut r).unwrap()
    }

    #[test]
    fn loss_is_zero_for_exact_factorization() {
        let u = random_embs(4, 3, EmbeddingRole::Query, 1.0, 1);
        let v = random_embs(5, 3, EmbeddingRole::Item, 1.0, 2);
        let entries: Vec<ScoreEntry> = (0..4)
            .flat_map(|q| {
                let u = &u;
                let v = &v;
                (0..5).map(move |i| ScoreEntry {
                    query: QueryId(q),
                    item: ItemId(i),
                    score: dot(u.row(q), v.row(i)),
                })
            })
            .collect();
        let g = SparseScoreMatrix::new(4, 5, entries).unwrap();
        assert!(mf_loss(&g, &u, &v).unwrap() < 1e-24);
    }

    #[test]
    fn loss_of_single_entry() {
        let u = EmbeddingMatrix::new(1, 2, EmbeddingRole::Query, vec![1.0, 0.0]).unwrap();
        let v = EmbeddingMatrix::new(1, 2, EmbeddingRole::Item, vec![1.0, 0.0]).unwrap();
        let g = SparseScoreMatrix::new(
            1,
            1,
            vec![ScoreEntry {
                query: QueryId(0),
                item: ItemId(0),
                score: 3.0,
            }],
        )
        .unwrap();
        // prediction is 1, target 3, squared error 4
        assert_eq!(mf_loss(&g, &u, &v).unwrap(), 4.0);
    }

    #[test]
    fn loss_matches_scalar_reference_loop() {
        let mut r = rng::stream(33);
        let u = random_embs(5, 4, EmbeddingRole::Query, 1.0, 10);
        let v = random_embs(6, 4, EmbeddingRole::Item, 1.0, 11);
        let mut entries = Vec::new();
        for _ in 0..10 {
            loop {
                let q = rng::uniform_usize(&mut r, 5);
                let i = rng::uniform_usize(&mut r, 6);
                if !entries
                    .iter()
                    .any(|e: &ScoreEntry| e.query.0 == q && e.item.0 == i)
                {
                    entries.push(ScoreEntry {
                        query: QueryId(q),
                        item: ItemId(i),
                        score: rng::normal(&mut r),
                    });
                    break;
                }
            }
        }
        let g = SparseScoreMatrix::new(5, 6, entries.clone()).unwrap();
        let mut reference = 0.0;
        for e in &entries {
            let mut pred = 0.0;
            for c in 0..4 {
                pred += u.row(e.query.0)[c] * v.row(e.item.0)[c];
            }
            reference += (e.score - pred) * (e.score - pred);
        }
        let got = mf_loss(&g, &u, &v).unwrap();
        assert!(((got - reference) / reference.max(1e-300)).abs() < 1e-12);
    }

    #[test]
    fn transductive_zero_lr_keeps_parameters() {
        let (g, _) = full_low_rank(6, 8, 2, 5);
        let u0 = random_embs(6, 4, EmbeddingRole::Query, 0.1, 20);
        let v0 = random_embs(8, 4, EmbeddingRole::Item, 0.1, 21);
        let mut h = MfHyperparams::new(4);
        h.learning_rate = 0.0;
        h.epochs = 3;
        let (model, summary) = train_transductive(&g, &u0, &v0, &h).unwrap();
        assert_eq!(model.u, u0.clone());
        assert_eq!(model.v, v0.clone().with_role(EmbeddingRole::Item));
        assert_eq!(summary.initial_loss, summary.final_loss);
    }

    #[test]
    fn transductive_training_reduces_loss_deterministically() {
        let (g, _) = full_low_rank(10, 12, 3, 6);
        let u0 = random_embs(10, 6, EmbeddingRole::Query, 0.1, 30);
        let v0 = random_embs(12, 6, EmbeddingRole::Item, 0.1, 31);
        let mut h = MfHyperparams::new(6);
        h.learning_rate = 0.01;
        h.epochs = 50;
        h.seed = 3;
        let (m1, s1) = train_transductive(&g, &u0, &v0, &h).unwrap();
        let (m2, s2) = train_transductive(&g, &u0, &v0, &h).unwrap();
        assert!(s1.final_loss < 0.5 * s1.initial_loss, "{s1:?}");
        assert_eq!(m1.u, m2.u);
        assert_eq!(m1.v, m2.v);
        assert_eq!(s1.final_loss, s2.final_loss);
    }

    #[test]
    fn transductive_recovers_low_rank_matrix() {
        let (g, frob) = full_low_rank(20, 25, 3, 7);
        let u0 = random_embs(20, 6, EmbeddingRole::Query, 0.1, 40);
        let v0 = random_embs(25, 6, EmbeddingRole::Item, 0.1, 41);
        let mut h = MfHyperparams::new(6);
        h.learning_rate = 0.01;
        h.epochs = 400;
        h.batch_size = 128;
        let (_, summary) = train_transductive(&g, &u0, &v0, &h).unwrap();
        let rel = summary.final_loss.sqrt() / frob;
        assert!(rel < 1e-2, "relative reconstruction error {rel}");
    }

    #[test]
    fn parallel_gradients_match_sequential_within_rounding() {
        let (g, _) = full_low_rank(12, 14, 3, 61);
        let u0 = random_embs(12, 5, EmbeddingRole::Query, 0.1, 62);
        let v0 = random_embs(14, 5, EmbeddingRole::Item, 0.1, 63);
        let mut h = MfHyperparams::new(5);
        h.learning_rate = 0.01;
        h.epochs = 15;
        h.batch_size = 32;
        let (seq, _) = train_transductive(&g, &u0, &v0, &h).unwrap();
        h.workers = 4;
        let (par1, s1) = train_transductive(&g, &u0, &v0, &h).unwrap();
        let (par2, s2) = train_transductive(&g, &u0, &v0, &h).unwrap();
        // parallel runs agree with each other exactly
        assert_eq!(par1.v, par2.v);
        assert_eq!(s1.final_loss, s2.final_loss);
        // and with the sequential path up to reduction-order rounding
        for (a, b) in seq.v.data().iter().zip(par1.v.data()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }

        let base_q = random_embs(12, 5, EmbeddingRole::Query, 1.0, 64);
        let base_i = random_embs(14, 5, EmbeddingRole::Item, 1.0, 65);
        let mut h = MfHyperparams::new(5);
        h.learning_rate = 0.01;
        h.epochs = 5;
        h.batch_size = 32;
        let (seq, _) = train_inductive(&g, &base_q, &base_i, &h).unwrap();
        h.workers = 3;
        let (par, _) = train_inductive(&g, &base_q, &base_i, &h).unwrap();
        for (a, b) in seq.v.data().iter().zip(par.v.data()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn wall_clock_cap_stops_training() {
        let (g, _) = full_low_rank(10, 10, 2, 8);
        let u0 = random_embs(10, 4, EmbeddingRole::Query, 0.1, 50);
        let v0 = random_embs(10, 4, EmbeddingRole::Item, 0.1, 51);
        let mut h = MfHyperparams::new(4);
        h.epochs = 1_000_000;
        h.max_wall_seconds = Some(0.2);
        let (_, summary) = train_transductive(&g, &u0, &v0, &h).unwrap();
        assert!(summary.epochs_run < 1_000_000);
        assert!(summary.wall_seconds < 30.0);
    }

    #[test]
    fn inductive_realizable_target_trains_down() {
        // generate scores from a fixed random tower pair so the target is
        // exactly realizable
        let d = 6;
        let base_q = random_embs(15, d, EmbeddingRole::Query, 1.0, 60);
        let base_i = random_embs(18, d, EmbeddingRole::Item, 1.0, 61);
        let mut tower_rng = rng::stream(999);
        let mut gen_q = MlpTowerParams::init(d, &mut tower_rng).unwrap();
        let mut gen_i = MlpTowerParams::init(d, &mut tower_rng).unwrap();
        // open the generators' inner branches a bit so the map is not identity
        gen_q.w_skip = -1.0;
        gen_i.w_skip = -1.0;
        let mut entries = Vec::new();
        for q in 0..15 {
            for i in 0..18 {
                let s = dot(
                    &gen_q.forward(base_q.row(q)).unwrap(),
                    &gen_i.forward(base_i.row(i)).unwrap(),
                );
                entries.push(ScoreEntry {
                    query: QueryId(q),
                    item: ItemId(i),
                    score: s,
                });
            }
        }
        let g = SparseScoreMatrix::new(15, 18, entries).unwrap();
        let mut h = MfHyperparams::new(d);
        h.learning_rate = 0.01;
        h.epochs = 400;
        h.batch_size = 32;
        let (model, summary) = train_inductive(&g, &base_q, &base_i, &h).unwrap();
        assert!(
            summary.final_loss <= 1e-2 * summary.initial_loss,
            "{summary:?}"
        );
        assert_eq!(model.kind, MfKind::Inductive);
        // materialized v equals tower applied to base rows
        let towers = model.towers.as_ref().unwrap();
        for i in 0..18 {
            let direct = towers.item.forward(base_i.row(i)).unwrap();
            assert_eq!(model.v.row(i), direct.as_slice());
        }
    }

    #[test]
    fn inductive_zero_epochs_stays_near_base() {
        let d = 8;
        let base_q = random_embs(5, d, EmbeddingRole::Query, 1.0, 70);
        let base_i = random_embs(6, d, EmbeddingRole::Item, 1.0, 71);
        let g = SparseScoreMatrix::new(
            5,
            6,
            vec![ScoreEntry {
                query: QueryId(0),
                item: ItemId(0),
                score: 1.0,
            }],
        )
        .unwrap();
        let mut h = MfHyperparams::new(d);
        h.epochs = 0;
        let (model, _) = train_inductive(&g, &base_q, &base_i, &h).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for q in 0..5 {
            for i in 0..6 {
                let base = dot(base_q.row(q), base_i.row(i));
                let mapped = dot(model.u.row(q), model.v.row(i));
                num += (mapped - base) * (mapped - base);
                den += base * base;
            }
        }
        assert!(
            (num / den).sqrt() < 0.02,
            "perturbation {}",
            (num / den).sqrt()
        );
    }

    #[test]
    fn embed_items_transductive_is_stored_v() {
        let (g, _) = full_low_rank(5, 6, 2, 9);
        let u0 = random_embs(5, 4, EmbeddingRole::Query, 0.1, 80);
        let v0 = random_embs(6, 4, EmbeddingRole::Item, 0.1, 81);
        let mut h = MfHyperparams::new(4);
        h.epochs = 2;
        let (model, _) = train_transductive(&g, &u0, &v0, &h).unwrap();
        assert_eq!(embed_items(&model).unwrap(), model.v);
    }

    #[test]
    fn embed_items_inductive_matches_per_row_forward() {
        let d = 5;
        let base_q = random_embs(4, d, EmbeddingRole::Query, 1.0, 90);
        let base_i = random_embs(7, d, EmbeddingRole::Item, 1.0, 91);
        let g = SparseScoreMatrix::new(
            4,
            7,
            vec![ScoreEntry {
                query: QueryId(1),
                item: ItemId(2),
                score: 0.5,
            }],
        )
        .unwrap();
        let mut h = MfHyperparams::new(d);
        h.epochs = 3;
        let (model, _) = train_inductive(&g, &base_q, &base_i, &h).unwrap();
        let v = embed_items(&model).unwrap();
        let towers = model.towers.as_ref().unwrap();
        for i in 0..7 {
            assert_eq!(
                v.row(i),
                towers.item.forward(base_i.row(i)).unwrap().as_slice()
            );
        }
        // query embedding for an unseen vector goes through the query tower
        let unseen = vec![0.3; d];
        assert_eq!(
            embed_query(&model, &unseen).unwrap(),
            towers.query.forward(&unseen).unwrap()
        );
    }

    #[test]
    fn model_dir_round_trip() {
        let d = 4;
        let base_q = random_embs(3, d, EmbeddingRole::Query, 1.0, 100);
        let base_i = random_embs(5, d, EmbeddingRole::Item, 1.0, 101);
        let g = SparseScoreMatrix::new(
            3,
            5,
            vec![ScoreEntry {
                query: QueryId(0),
                item: ItemId(4),
                score: -0.5,
            }],
        )
        .unwrap();
        let mut h = MfHyperparams::new(d);
        h.epochs = 2;
        let (model, _) = train_inductive(&g, &base_q, &base_i, &h).unwrap();
        let dir = tempdir().unwrap();
        model.save_dir(dir.path()).unwrap();
        let back = MfModel::load_dir(dir.path()).unwrap();
        assert_eq!(back.kind, MfKind::Inductive);
        assert_eq!(back.u, model.u);
        assert_eq!(back.v, model.v);
        assert_eq!(back.towers, model.towers);
    }

    #[test]
    fn dimension_mismatches_rejected() {
        let (g, _) = full_low_rank(4, 5, 2, 12);
        let u0 = random_embs(4, 3, EmbeddingRole::Query, 0.1, 110);
        let v0 = random_embs(5, 4, EmbeddingRole::Item, 0.1, 111);
        let h = MfHyperparams::new(3);
        assert!(train_transductive(&g, &u0, &v0, &h).is_err());
        let wrong_rows = random_embs(3, 3, EmbeddingRole::Query, 0.1, 112);
        let v0 = random_embs(5, 3, EmbeddingRole::Item, 0.1, 113);
        assert!(train_transductive(&g, &wrong_rows, &v0, &h).is_err());
        assert!(mf_loss(&g, &wrong_rows, &v0).is_err());
    }
}
