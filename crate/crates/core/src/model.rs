//! Matrix-factorization backbone with cosine scoring.
//!
//! Scores are cosine similarities between user and item embedding rows, so
//! every score lies in [-1, 1]. Rows with zero norm score 0 instead of NaN.
//! Updates go through Adam with decoupled weight decay, applied only to the
//! rows a batch actually touched.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng;

pub const DEFAULT_DIM: usize = 64;
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite gradient for {param} row {row}")]
    NonFiniteGradient { param: &'static str, row: u32 },
    #[error("gradient row length {got} does not match embedding dim {dim}")]
    DimensionMismatch { got: usize, dim: usize },
    #[error("embedding matrix size mismatch: expected {expected} values, got {got}")]
    BadShape { expected: usize, got: usize },
}

/// User and item embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    num_users: usize,
    num_items: usize,
    dim: usize,
    user_emb: Vec<f64>,
    item_emb: Vec<f64>,
}

impl FactorModel {
    /// Seeded normal(0, 0.1) initialization.
    pub fn init(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Self {
        assert!(num_users >= 1 && num_items >= 1 && dim >= 1);
        let mut r = rng::stream(seed, &[rng::label::MODEL_INIT]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let user_emb = (0..num_users * dim).map(|_| normal.sample(&mut r)).collect();
        let item_emb = (0..num_items * dim).map(|_| normal.sample(&mut r)).collect();
        Self {
            num_users,
            num_items,
            dim,
            user_emb,
            item_emb,
        }
    }

    pub fn from_parts(
        num_users: usize,
        num_items: usize,
        dim: usize,
        user_emb: Vec<f64>,
        item_emb: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if user_emb.len() != num_users * dim {
            return Err(ModelError::BadShape {
                expected: num_users * dim,
                got: user_emb.len(),
            });
        }
        if item_emb.len() != num_items * dim {
            return Err(ModelError::BadShape {
                expected: num_items * dim,
                got: item_emb.len(),
            });
        }
        Ok(Self {
            num_users,
            num_items,
            dim,
            user_emb,
            item_emb,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_row(&self, u: u32) -> &[f64] {
        let d = self.dim;
        &self.user_emb[u as usize * d..(u as usize + 1) * d]
    }

    pub fn item_row(&self, i: u32) -> &[f64] {
        let d = self.dim;
        &self.item_emb[i as usize * d..(i as usize + 1) * d]
    }

    pub fn user_matrix(&self) -> &[f64] {
        &self.user_emb
    }

    pub fn item_matrix(&self) -> &[f64] {
        &self.item_emb
    }

    fn user_row_mut(&mut self, u: u32) -> &mut [f64] {
        let d = self.dim;
        &mut self.user_emb[u as usize * d..(u as usize + 1) * d]
    }

    fn item_row_mut(&mut self, i: u32) -> &mut [f64] {
        let d = self.dim;
        &mut self.item_emb[i as usize * d..(i as usize + 1) * d]
    }

    /// Cosine score for one (user, item) pair, in [-1, 1].
    pub fn score(&self, u: u32, i: u32) -> f64 {
        cosine(self.user_row(u), self.item_row(i))
    }

    /// Scores for a list of items, elementwise equal to [`Self::score`].
    pub fn score_block(&self, u: u32, items: &[u32]) -> Vec<f64> {
        let user = self.user_row(u);
        items.iter().map(|&i| cosine(user, self.item_row(i))).collect()
    }

    /// Scores for every item, written into `out`.
    pub fn score_all(&self, u: u32, out: &mut Vec<f64>) {
        let user = self.user_row(u);
        out.clear();
        out.reserve(self.num_items);
        for i in 0..self.num_items as u32 {
            out.push(cosine(user, self.item_row(i)));
        }
    }
}

/// Cosine similarity; zero if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Gradient of `upstream * cosine(a, b)` with respect to both rows, with the
/// normalization terms included. Zero-norm rows get zero gradient, matching
/// the constant-zero score rule.
pub fn cosine_grad(a: &[f64], b: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let d = a.len();
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for k in 0..d {
        dot += a[k] * b[k];
        na2 += a[k] * a[k];
        nb2 += b[k] * b[k];
    }
    if na2 == 0.0 || nb2 == 0.0 {
        return (vec![0.0; d], vec![0.0; d]);
    }
    let na = na2.sqrt();
    let nb = nb2.sqrt();
    let s = dot / (na * nb);
    let mut da = vec![0.0; d];
    let mut db = vec![0.0; d];
    for k in 0..d {
        da[k] = upstream * (b[k] / (na * nb) - s * a[k] / na2);
        db[k] = upstream * (a[k] / (na * nb) - s * b[k] / nb2);
    }
    (da, db)
}

/// Gradients accumulated for the embedding rows one batch touched.
#[derive(Debug, Default, Clone)]
pub struct SparseGrads {
    user: HashMap<u32, Vec<f64>>,
    item: HashMap<u32, Vec<f64>>,
}

impl SparseGrads {
    pub fn add_user(&mut self, row: u32, grad: &[f64]) {
        accumulate(&mut self.user, row, grad);
    }

    pub fn add_item(&mut self, row: u32, grad: &[f64]) {
        accumulate(&mut self.item, row, grad);
    }

    pub fn is_empty(&self) -> bool {
        self.user.is_empty() && self.item.is_empty()
    }

    fn sorted_rows(map: &HashMap<u32, Vec<f64>>) -> Vec<u32> {
        let mut rows: Vec<u32> = map.keys().copied().collect();
        rows.sort_unstable();
        rows
    }
}

fn accumulate(map: &mut HashMap<u32, Vec<f64>>, row: u32, grad: &[f64]) {
    match map.get_mut(&row) {
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
        }
        None => {
            map.insert(row, grad.to_vec());
        }
    }
}

/// Adam moments for both embedding matrices plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m_user: Vec<f64>,
    v_user: Vec<f64>,
    m_item: Vec<f64>,
    v_item: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &FactorModel, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_user: vec![0.0; model.user_emb.len()],
            v_user: vec![0.0; model.user_emb.len()],
            m_item: vec![0.0; model.item_emb.len()],
            v_item: vec![0.0; model.item_emb.len()],
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        learning_rate: f64,
        weight_decay: f64,
        step: u64,
        m_user: Vec<f64>,
        v_user: Vec<f64>,
        m_item: Vec<f64>,
        v_item: Vec<f64>,
    ) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m_user,
            v_user,
            m_item,
            v_item,
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        (&self.m_user, &self.v_user, &self.m_item, &self.v_item)
    }
}

/// One Adam step over the rows present in `grads`.
///
/// Weight decay is decoupled: it scales the pre-update parameter and applies
/// only to touched rows, like the gradient itself.
pub fn apply_gradients(
    model: &mut FactorModel,
    state: &mut AdamState,
    grads: &SparseGrads,
) -> Result<(), ModelError> {
    let dim = model.dim;
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);

    for row in SparseGrads::sorted_rows(&grads.user) {
        let g = &grads.user[&row];
        if g.len() != dim {
            return Err(ModelError::DimensionMismatch { got: g.len(), dim });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteGradient {
                param: "user_embeddings",
                row,
            });
        }
        let base = row as usize * dim;
        adam_row(
            model.user_row_mut(row),
            &mut state.m_user[base..base + dim],
            &mut state.v_user[base..base + dim],
            g,
            state.learning_rate,
            state.weight_decay,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
    }
    for row in SparseGrads::sorted_rows(&grads.item) {
        let g = &grads.item[&row];
        if g.len() != dim {
            return Err(ModelError::DimensionMismatch { got: g.len(), dim });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteGradient {
                param: "item_embeddings",
                row,
            });
        }
        let base = row as usize * dim;
        adam_row(
            model.item_row_mut(row),
            &mut state.m_item[base..base + dim],
            &mut state.v_item[base..base + dim],
            g,
            state.learning_rate,
            state.weight_decay,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_row(
    param: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: &[f64],
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for k in 0..param.len() {
        m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
        v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        let old = param[k];
        param[k] = old - lr * (m_hat / (v_hat.sqrt() + eps) + wd * old);
    }
}
