//! Trainable adapter machinery: the task-shared LoRA, the multi-head LoRA
//! experts, per-task routers with freeze semantics, and the sparse
//! mixture-of-experts combination.
//!
//! Forward operations are generic over [`Ctx`], so the same definitions
//! serve plain inference and gradient computation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Ctx;
use crate::linalg::Rng;
use crate::params::{ParamId, ParamStore};

/// Encoder branch an adapter is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Image,
    Text,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Image => "image",
            Branch::Text => "text",
        }
    }
}

/// Rank-r LoRA pair: down-projection `A` (r x d) and up-projection `B`
/// (d x r). `B` starts at zero so a fresh adapter is an exact no-op.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        rank: usize,
        rng: &mut Rng,
    ) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let a = store.add(format!("{name}.a"), rng.gaussian_matrix(rank, d, scale));
        let b = store.add(
            format!("{name}.b"),
            crate::linalg::Matrix::zeros(d, rank),
        );
        LoraAdapter { a, b, rank }
    }
}

/// `B (A e)`.
pub fn lora_forward<'a, C: Ctx<'a>>(ctx: &mut C, adapter: &LoraAdapter, e: &C::V) -> C::V {
    let down = ctx.param_matvec(adapter.a, e);
    ctx.param_matvec(adapter.b, &down)
}

/// One expert: a shared down-projection `A`, `M` up-projections `B_i`, and
/// a linear head gate (no bias) blending the heads by softmax.
#[derive(Debug, Clone)]
pub struct MultiHeadExpert {
    pub a: ParamId,
    pub heads: Vec<ParamId>,
    pub gate: ParamId,
}

impl MultiHeadExpert {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        rank: usize,
        n_heads: usize,
        rng: &mut Rng,
    ) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let a = store.add(format!("{name}.a"), rng.gaussian_matrix(rank, d, scale));
        let gate = store.add(
            format!("{name}.gate"),
            rng.gaussian_matrix(n_heads, d, scale),
        );
        let heads = (0..n_heads)
            .map(|i| {
                store.add(
                    format!("{name}.b{i}"),
                    crate::linalg::Matrix::zeros(d, rank),
                )
            })
            .collect();
        MultiHeadExpert { a, heads, gate }
    }
}

/// `sum_i b_i * B_i A e`, with `b = softmax(gate e)`.
pub fn expert_forward<'a, C: Ctx<'a>>(ctx: &mut C, ex: &MultiHeadExpert, e: &C::V) -> C::V {
    let logits = ctx.param_matvec(ex.gate, e);
    let b = ctx.softmax(&logits);
    let down = ctx.param_matvec(ex.a, e);
    let mut out: Option<C::V> = None;
    for (i, head) in ex.heads.iter().enumerate() {
        let up = ctx.param_matvec(*head, &down);
        let bi = ctx.get(&b, i);
        let term = ctx.scale(&up, bi);
        out = Some(match out {
            Some(acc) => ctx.add(&acc, &term),
            None => term,
        });
    }
    out.expect("expert has at least one head")
}

/// Per-task linear router (no bias) over the expert pool.
#[derive(Debug, Clone)]
pub struct TaskRouter {
    pub weights: ParamId,
    pub task_id: usize,
}

impl TaskRouter {
    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.is_frozen(self.weights)
    }
}

/// `topk_mask(softmax(router e), k)`. Retained entries keep their softmax
/// values; nothing is renormalized.
pub fn route<'a, C: Ctx<'a>>(ctx: &mut C, router: &TaskRouter, e: &C::V, k: usize) -> C::V {
    let logits = ctx.param_matvec(router.weights, e);
    let w = ctx.softmax(&logits);
    ctx.topk_mask(&w, k)
}

/// Expert pool plus router stack at one injection site (branch, layer).
#[derive(Debug, Clone)]
pub struct MoeSite {
    pub branch: Branch,
    pub layer: usize,
    pub experts: Vec<MultiHeadExpert>,
    pub routers: Vec<TaskRouter>,
}

/// Mixture-of-experts adapter state across all injection sites.
///
/// Experts are shared by every task; routers grow by one per task and are
/// frozen once their task finishes training.
#[derive(Debug, Clone)]
pub struct MoEAdapterState {
    pub sites: Vec<MoeSite>,
    pub n_experts: usize,
    pub n_heads: usize,
    pub rank: usize,
    pub k: usize,
    pub d: usize,
}

impl MoEAdapterState {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        sites: &[(Branch, usize)],
        d: usize,
        n_experts: usize,
        n_heads: usize,
        rank: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k == 0 || k > n_experts {
            return Err(Error::invalid_arg(format!(
                "k={k} out of range for {n_experts} experts"
            )));
        }
        if n_heads == 0 {
            return Err(Error::invalid_arg("expert needs at least one head"));
        }
        let sites = sites
            .iter()
            .map(|&(branch, layer)| {
                let experts = (0..n_experts)
                    .map(|i| {
                        let name = format!("abfa.{}.l{layer}.e{i}", branch.tag());
                        MultiHeadExpert::build(store, &name, d, rank, n_heads, rng)
                    })
                    .collect();
                MoeSite {
                    branch,
                    layer,
                    experts,
                    routers: Vec::new(),
                }
            })
            .collect();
        Ok(MoEAdapterState {
            sites,
            n_experts,
            n_heads,
            rank,
            k,
            d,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.sites.first().map_or(0, |s| s.routers.len())
    }

    pub fn site(&self, branch: Branch, layer: usize) -> Option<&MoeSite> {
        self.sites
            .iter()
            .find(|s| s.branch == branch && s.layer == layer)
    }

    /// Appends a fresh unfrozen router for the next task at every site.
    /// Rejected while any prior router is still unfrozen.
    pub fn expand_router(&mut self, store: &mut ParamStore, seed: u64) -> Result<usize> {
        for site in &self.sites {
            if let Some(r) = site.routers.iter().find(|r| !r.is_frozen(store)) {
                return Err(Error::protocol(format!(
                    "cannot expand: router for task {} is not frozen",
                    r.task_id
                )));
            }
        }
        let task_id = self.n_tasks();
        let scale = 1.0 / (self.d as f64).sqrt();
        for (si, site) in self.sites.iter_mut().enumerate() {
            let mut rng = Rng::stream(seed, si as u64);
            let weights = store.add(
                format!("abfa.{}.l{}.router{task_id}", site.branch.tag(), site.layer),
                rng.gaussian_matrix(self.n_experts, self.d, scale),
            );
            site.routers.push(TaskRouter { weights, task_id });
        }
        Ok(task_id)
    }

    /// Freezes the task's router at every site.
    pub fn freeze_router(&mut self, store: &mut ParamStore, task_id: usize) -> Result<()> {
        if task_id >= self.n_tasks() {
            return Err(Error::protocol(format!("no router for task {task_id}")));
        }
        for site in &self.sites {
            let router = &site.routers[task_id];
            if router.is_frozen(store) {
                return Err(Error::protocol(format!(
                    "router for task {task_id} is already frozen"
                )));
            }
        }
        for site in &self.sites {
            store.freeze(site.routers[task_id].weights);
        }
        Ok(())
    }

    /// Freezes every expert parameter (strict no-forgetting regression mode).
    pub fn freeze_experts(&self, store: &mut ParamStore) {
        for site in &self.sites {
            for ex in &site.experts {
                store.freeze(ex.a);
                store.freeze(ex.gate);
                for &h in &ex.heads {
                    store.freeze(h);
                }
            }
        }
    }

    pub fn expert_param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for site in &self.sites {
            for ex in &site.experts {
                out.push(ex.a);
                out.push(ex.gate);
                out.extend_from_slice(&ex.heads);
            }
        }
        out
    }

    pub fn router_param_ids(&self, task_id: usize) -> Vec<ParamId> {
        self.sites
            .iter()
            .filter_map(|s| s.routers.get(task_id).map(|r| r.weights))
            .collect()
    }
}

/// Sparse MoE combination at one site: only the top-k gated experts are
/// evaluated; everything else contributes no work at all.
pub fn moe_forward<'a, C: Ctx<'a>>(
    ctx: &mut C,
    state: &MoEAdapterState,
    site: &MoeSite,
    task_id: usize,
    e: &C::V,
) -> Result<C::V> {
    let router = site
        .routers
        .get(task_id)
        .ok_or_else(|| Error::protocol(format!("no router for task {task_id}")))?;
    let gates = route(ctx, router, e, state.k);
    let active = ctx.nonzero_indices(&gates);
    let mut out: Option<C::V> = None;
    for j in active {
        let y = expert_forward(ctx, &site.experts[j], e);
        let wj = ctx.get(&gates, j);
        let term = ctx.scale(&y, wj);
        out = Some(match out {
            Some(acc) => ctx.add(&acc, &term),
            None => term,
        });
    }
    Ok(match out {
        Some(v) => v,
        None => {
            let dim = ctx.vector_value(e).dim();
            ctx.input(&crate::linalg::Vector::zeros(dim))
        }
    })
}

/// Task-shared LoRA adapters, one per injection site.
#[derive(Debug, Clone)]
pub struct AffaState {
    pub sites: Vec<(Branch, usize, LoraAdapter)>,
    pub rank: usize,
    pub d: usize,
}

impl AffaState {
    pub fn build(
        store: &mut ParamStore,
        sites: &[(Branch, usize)],
        d: usize,
        rank: usize,
        rng: &mut Rng,
    ) -> Self {
        let sites = sites
            .iter()
            .map(|&(branch, layer)| {
                let name = format!("affa.{}.l{layer}", branch.tag());
                (branch, layer, LoraAdapter::build(store, &name, d, rank, rng))
            })
            .collect();
        AffaState { sites, rank, d }
    }

    pub fn site(&self, branch: Branch, layer: usize) -> Option<&LoraAdapter> {
        self.sites
            .iter()
            .find(|(b, l, _)| *b == branch && *l == layer)
            .map(|(_, _, a)| a)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.sites
            .iter()
            .flat_map(|(_, _, a)| [a.a, a.b])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PlainCtx;
    use crate::linalg::{matmul, Matrix, Vector};

    fn plain_lora(store: &ParamStore, ad: &LoraAdapter, e: &Vector) -> Vector {
        let mut ctx = PlainCtx::new(store);
        let ein = ctx.input(e);
        lora_forward(&mut ctx, ad, &ein)
    }

    #[test]
    fn lora_zero_b_is_zero_and_identity_factorization() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let ad = LoraAdapter::build(&mut store, "t", 4, 2, &mut rng);
        let e = rng.gaussian_vector(4, 1.0);
        let out = plain_lora(&store, &ad, &e);
        assert!(out.data.iter().all(|&v| v == 0.0));

        // r = d with A = B = I reproduces the input.
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::identity(3));
        let b = store.add("b", Matrix::identity(3));
        let ad = LoraAdapter { a, b, rank: 3 };
        let e = Vector::from_slice(&[1.0, -2.0, 3.0]);
        assert_eq!(plain_lora(&store, &ad, &e).data, e.data);
    }

    #[test]
    fn lora_matches_dense_product_oracle() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let ad = LoraAdapter::build(&mut store, "t", 4, 2, &mut rng);
        store
            .update(ad.b, |m| *m = Rng::new(3).gaussian_matrix(4, 2, 1.0))
            .unwrap();
        let e = rng.gaussian_vector(4, 1.0);
        let got = plain_lora(&store, &ad, &e);
        let dense = matmul(store.value(ad.b), store.value(ad.a)).unwrap();
        let want = dense.matvec(&e).unwrap();
        for (g, w) in got.data.iter().zip(want.data.iter()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_head_expert_reduces_to_lora() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let ex = MultiHeadExpert::build(&mut store, "e", 4, 2, 1, &mut rng);
        store
            .update(ex.heads[0], |m| *m = Rng::new(5).gaussian_matrix(4, 2, 1.0))
            .unwrap();
        let e = rng.gaussian_vector(4, 1.0);
        let mut ctx = PlainCtx::new(&store);
        let ein = ctx.input(&e);
        let got = expert_forward(&mut ctx, &ex, &ein);
        let ad = LoraAdapter {
            a: ex.a,
            b: ex.heads[0],
            rank: 2,
        };
        let want = plain_lora(&store, &ad, &e);
        for (g, w) in got.data.iter().zip(want.data.iter()) {
            assert!((g - w).abs() <= 1e-15);
        }
    }

    #[test]
    fn saturated_head_gate_selects_single_head() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(6);
        let d = 4;
        let ex = MultiHeadExpert::build(&mut store, "e", d, 2, 2, &mut rng);
        store
            .update(ex.heads[0], |m| *m = Rng::new(7).gaussian_matrix(d, 2, 1.0))
            .unwrap();
        store
            .update(ex.heads[1], |m| *m = Rng::new(8).gaussian_matrix(d, 2, 1.0))
            .unwrap();
        // Gate logits (-50, +50) on the probe input drive b to one-hot on
        // head 1.
        let e = Vector::from_slice(&[1.0, 0.0, 0.0, 0.0]);
        store
            .update(ex.gate, |m| {
                *m = Matrix::zeros(2, d);
                m.set(0, 0, -50.0);
                m.set(1, 0, 50.0);
            })
            .unwrap();
        let mut ctx = PlainCtx::new(&store);
        let ein = ctx.input(&e);
        let got = expert_forward(&mut ctx, &ex, &ein);
        let ad = LoraAdapter {
            a: ex.a,
            b: ex.heads[1],
            rank: 2,
        };
        let want = plain_lora(&store, &ad, &e);
        for (g, w) in got.data.iter().zip(want.data.iter()) {
            assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn all_zero_heads_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(12);
        let ex = MultiHeadExpert::build(&mut store, "e", 4, 2, 3, &mut rng);
        let e = rng.gaussian_vector(4, 1.0);
        let mut ctx = PlainCtx::new(&store);
        let ein = ctx.input(&e);
        let got = expert_forward(&mut ctx, &ex, &ein);
        assert!(got.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn route_masks_without_renormalizing() {
        let mut store = ParamStore::new();
        let d = 3;
        // Router weights chosen so logits = [1, 2, 3] for e = [1, 0, 0].
        let mut w = Matrix::zeros(3, d);
        w.set(0, 0, 1.0);
        w.set(1, 0, 2.0);
        w.set(2, 0, 3.0);
        let weights = store.add("r", w);
        let router = TaskRouter { weights, task_id: 0 };
        let e = Vector::from_slice(&[1.0, 0.0, 0.0]);
        let mut ctx = PlainCtx::new(&store);
        let ein = ctx.input(&e);
        let got = route(&mut ctx, &router, &ein, 2);
        let expect = [0.0, 0.244_728_471_05, 0.665_240_955_77];
        for (g, w) in got.data.iter().zip(expect.iter()) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
        // k = dim keeps the full softmax, summing to one.
        let mut ctx = PlainCtx::new(&store);
        let ein = ctx.input(&e);
        let full = route(&mut ctx, &router, &ein, 3);
        let sum: f64 = full.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // k = 1 keeps exactly the max softmax entry.
        let mut ctx = PlainCtx::new(&store);
        let ein = ctx.input(&e);
        let one = route(&mut ctx, &router, &ein, 1);
        assert_eq!(one.data.iter().filter(|v| **v != 0.0).count(), 1);
        assert!((one.data[2] - 0.665_240_955_77).abs() < 1e-5);
    }

    fn tiny_moe(seed: u64) -> (ParamStore, MoEAdapterState) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut state =
            MoEAdapterState::build(&mut store, &[(Branch::Image, 0)], 4, 3, 2, 2, 2, &mut rng)
                .unwrap();
        let t = state.expand_router(&mut store, seed + 1).unwrap();
        assert_eq!(t, 0);
        let mut vrng = Rng::new(seed + 2);
        for site in &state.sites {
            for ex in &site.experts {
                for &h in &ex.heads {
                    store
                        .update(h, |m| *m = vrng.gaussian_matrix(4, 2, 1.0))
                        .unwrap();
                }
            }
        }
        (store, state)
    }

    #[test]
    fn moe_forward_matches_dense_masked_sum() {
        let (store, state) = tiny_moe(10);
        let site = &state.sites[0];
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let e = rng.gaussian_vector(4, 1.0);
            let mut ctx = PlainCtx::new(&store);
            let ein = ctx.input(&e);
            let got = moe_forward(&mut ctx, &state, site, 0, &ein).unwrap();

            // Dense oracle: evaluate every expert, weight by the masked gate.
            let mut ctx2 = PlainCtx::new(&store);
            let ein2 = ctx2.input(&e);
            let gates = route(&mut ctx2, &site.routers[0], &ein2, state.k);
            let mut want = Vector::zeros(4);
            for (j, ex) in site.experts.iter().enumerate() {
                let y = expert_forward(&mut ctx2, ex, &ein2);
                for (w, yv) in want.data.iter_mut().zip(y.data.iter()) {
                    *w += gates.data[j] * yv;
                }
            }
            for (g, w) in got.data.iter().zip(want.data.iter()) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn moe_unknown_task_errors() {
        let (store, state) = tiny_moe(15);
        let site = &state.sites[0];
        let mut ctx = PlainCtx::new(&store);
        let e = ctx.input(&Vector::from_slice(&[1.0, 0.0, 0.0, 0.0]));
        assert!(moe_forward(&mut ctx, &state, site, 3, &e).is_err());
    }

    #[test]
    fn expand_requires_frozen_priors_and_freeze_is_final() {
        let (mut store, mut state) = tiny_moe(20);
        // Router 0 is unfrozen: a second expansion must fail.
        assert!(state.expand_router(&mut store, 21).is_err());
        state.freeze_router(&mut store, 0).unwrap();
        // Double freeze and unknown ids are contract errors.
        assert!(state.freeze_router(&mut store, 0).is_err());
        assert!(state.freeze_router(&mut store, 5).is_err());
        // Frozen router rejects updates.
        let w = state.sites[0].routers[0].weights;
        assert!(store.update(w, |_| {}).is_err());
        // Expansion now succeeds and adds one router per injection site.
        let before: Vec<usize> = state.sites.iter().map(|s| s.routers.len()).collect();
        let t = state.expand_router(&mut store, 22).unwrap();
        assert_eq!(t, 1);
        for (site, b) in state.sites.iter().zip(before) {
            assert_eq!(site.routers.len(), b + 1);
        }
    }

    #[test]
    fn expand_same_seed_same_state_is_deterministic() {
        let (mut store_a, mut a) = tiny_moe(30);
        let (mut store_b, mut b) = tiny_moe(30);
        a.freeze_router(&mut store_a, 0).unwrap();
        b.freeze_router(&mut store_b, 0).unwrap();
        a.expand_router(&mut store_a, 77).unwrap();
        b.expand_router(&mut store_b, 77).unwrap();
        let wa = store_a.value(a.sites[0].routers[1].weights);
        let wb = store_b.value(b.sites[0].routers[1].weights);
        assert_eq!(wa.data, wb.data);
    }
}
