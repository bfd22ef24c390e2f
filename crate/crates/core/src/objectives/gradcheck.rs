//! Central finite-difference verification of the analytic gradients.

use serde::Serialize;

use crate::adapters::{AffaState, Branch, MoEAdapterState};
use crate::backbone::{build_encoder, encode_image, encode_text, AdapterSet, EncoderPath, FrozenDualEncoder};
use crate::error::Result;
use crate::graph::{Ctx, GradCtx, PlainCtx};
use crate::linalg::Rng;
use crate::objectives::loss::{ce_loss_graph, supcon_loss_graph, Batch};
use crate::params::{ParamId, ParamStore};

/// Which loss a probe runs through.
#[derive(Debug, Clone)]
pub enum ProbeLoss {
    /// Contrastive loss on the shared-adapter path.
    SupConAffa { tau: f64 },
    /// Cross-entropy on the expert-mixture path for one task.
    CeAbfa {
        task_id: usize,
        tau_ce: f64,
        classes: Vec<usize>,
    },
}

/// Builds the probe loss for a batch under any context.
pub fn probe_loss<'a, C: Ctx<'a>>(
    ctx: &mut C,
    enc: &'a FrozenDualEncoder,
    adapters: &AdapterSet,
    batch: &Batch,
    loss: &ProbeLoss,
) -> Result<C::S> {
    batch.validate()?;
    match loss {
        ProbeLoss::SupConAffa { tau } => {
            let mut visual = Vec::with_capacity(batch.images.len());
            let mut text = Vec::with_capacity(batch.images.len());
            for (x, &label) in batch.images.iter().zip(&batch.labels) {
                visual.push(encode_image(ctx, enc, adapters, x, EncoderPath::Affa)?);
                text.push(encode_text(ctx, enc, adapters, label, EncoderPath::Affa)?);
            }
            Ok(supcon_loss_graph(ctx, &visual, &text, &batch.labels, *tau))
        }
        ProbeLoss::CeAbfa {
            task_id,
            tau_ce,
            classes,
        } => {
            let path = EncoderPath::Abfa(*task_id);
            let text: Vec<C::V> = classes
                .iter()
                .map(|&c| encode_text(ctx, enc, adapters, c, path))
                .collect::<Result<_>>()?;
            let mut terms = Vec::with_capacity(batch.images.len());
            for (x, &label) in batch.images.iter().zip(&batch.labels) {
                let v = encode_image(ctx, enc, adapters, x, path)?;
                let idx = classes
                    .iter()
                    .position(|&c| c == label)
                    .ok_or_else(|| crate::error::Error::invalid_arg("label not in class set"))?;
                terms.push(ce_loss_graph(ctx, &v, &text, idx, *tau_ce));
            }
            let total = ctx.s_sum(&terms);
            Ok(ctx.s_scale(total, 1.0 / batch.images.len() as f64))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Entries abandoned because every tried step flipped a top-k set.
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub groups: Vec<GradCheckGroup>,
    pub all_pass: bool,
}

impl GradCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub step: f64,
    pub tol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-3,
            tol: 1e-4,
        }
    }
}

/// Compares analytic gradients against central finite differences for every
/// unfrozen parameter reachable from the probe losses.
///
/// The top-k gate is piecewise constant: a probe whose perturbation flips
/// an active-expert set straddles a discontinuity, so the step is shrunk
/// and retried; if the flip persists the entry is skipped and counted.
pub fn gradcheck(
    store: &mut ParamStore,
    enc: &FrozenDualEncoder,
    affa: &AffaState,
    abfa: &MoEAdapterState,
    batch: &Batch,
    losses: &[ProbeLoss],
    settings: GradCheckSettings,
) -> Result<GradCheckReport> {
    let mut groups: Vec<GradCheckGroup> = Vec::new();

    for loss in losses {
        // Analytic pass.
        let (tape, base_sets) = {
            let adapters = AdapterSet::new(affa, abfa);
            let mut ctx = GradCtx::new(store);
            let root = probe_loss(&mut ctx, enc, &adapters, batch, loss)?;
            let tape = ctx.backward(root);
            let mut plain = PlainCtx::new(store);
            probe_loss(&mut plain, enc, &AdapterSet::new(affa, abfa), batch, loss)?;
            (tape, plain.topk_log)
        };

        let touched: Vec<(ParamId, usize)> = tape
            .iter()
            .map(|(pid, g)| (pid, g.data.len()))
            .collect();

        for (pid, n_entries) in touched {
            let name = store.name(pid).to_string();
            let mut max_rel = 0.0_f64;
            let mut checked = 0usize;
            let mut skipped = 0usize;
            for e in 0..n_entries {
                let analytic = tape.get(pid).unwrap().data[e];
                match central_difference(
                    store, enc, affa, abfa, batch, loss, &base_sets, pid, e, settings.step,
                )? {
                    Some(fd) => {
                        let denom = analytic.abs().max(fd.abs()).max(1e-6);
                        max_rel = max_rel.max((analytic - fd).abs() / denom);
                        checked += 1;
                    }
                    None => skipped += 1,
                }
            }
            groups.push(GradCheckGroup {
                pass: max_rel <= settings.tol,
                name,
                max_rel_err: max_rel,
                checked,
                skipped,
            });
        }
    }

    groups.sort_by(|a, b| a.name.cmp(&b.name));
    let all_pass = groups.iter().all(|g| g.pass);
    Ok(GradCheckReport {
        step: settings.step,
        tol: settings.tol,
        groups,
        all_pass,
    })
}

#[allow(clippy::too_many_arguments)]
fn central_difference(
    store: &mut ParamStore,
    enc: &FrozenDualEncoder,
    affa: &AffaState,
    abfa: &MoEAdapterState,
    batch: &Batch,
    loss: &ProbeLoss,
    base_sets: &[Vec<usize>],
    pid: ParamId,
    entry: usize,
    step: f64,
) -> Result<Option<f64>> {
    let mut h = step;
    for _ in 0..4 {
        let old = store.perturb(pid, entry, h);
        let (fp, sets_p) = eval_plain(store, enc, affa, abfa, batch, loss)?;
        store.set_entry(pid, entry, old - h);
        let (fm, sets_m) = eval_plain(store, enc, affa, abfa, batch, loss)?;
        store.set_entry(pid, entry, old);
        if sets_p == *base_sets && sets_m == *base_sets {
            return Ok(Some((fp - fm) / (2.0 * h)));
        }
        h *= 0.1;
    }
    Ok(None)
}

fn eval_plain(
    store: &ParamStore,
    enc: &FrozenDualEncoder,
    affa: &AffaState,
    abfa: &MoEAdapterState,
    batch: &Batch,
    loss: &ProbeLoss,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let mut ctx = PlainCtx::new(store);
    let v = probe_loss(&mut ctx, enc, &AdapterSet::new(affa, abfa), batch, loss)?;
    Ok((v, ctx.topk_log))
}

/// The default tiny probe model: d_in=6, d=8, one layer, 3 experts with 2
/// heads each, k=2, rank 2, 3 classes, batch of 4. All trainable tensors
/// are randomized so no gradient is structurally zero, and task 0's router
/// is frozen so the check exercises the frozen-exclusion contract.
pub struct GradCheckFixture {
    pub store: ParamStore,
    pub enc: FrozenDualEncoder,
    pub affa: AffaState,
    pub abfa: MoEAdapterState,
    pub batch: Batch,
    pub losses: Vec<ProbeLoss>,
}

pub fn default_fixture(seed: u64) -> GradCheckFixture {
    let d_in = 6;
    let d = 8;
    let layers = 1;
    let n_classes = 3;
    let enc = build_encoder(d_in, d, layers, n_classes, seed).expect("encoder dims");
    let mut store = ParamStore::new();
    let mut rng = Rng::stream(seed, 10);
    let affa_sites = [(Branch::Image, layers - 1), (Branch::Text, layers - 1)];
    let abfa_sites: Vec<(Branch, usize)> = [Branch::Image, Branch::Text]
        .into_iter()
        .flat_map(|b| (0..layers).map(move |l| (b, l)))
        .collect();
    let affa = AffaState::build(&mut store, &affa_sites, d, 2, &mut rng);
    let mut abfa =
        MoEAdapterState::build(&mut store, &abfa_sites, d, 3, 2, 2, 2, &mut rng).unwrap();
    abfa.expand_router(&mut store, seed ^ 0x5eed).unwrap();
    abfa.freeze_router(&mut store, 0).unwrap();
    abfa.expand_router(&mut store, seed ^ 0xf00d).unwrap();

    // Randomize every unfrozen tensor so gradients are informative.
    let mut vrng = Rng::stream(seed, 11);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let (r, c) = {
            let m = store.value(id);
            (m.rows, m.cols)
        };
        let fresh = vrng.gaussian_matrix(r, c, 0.4);
        store.update(id, |m| *m = fresh.clone()).unwrap();
    }

    let mut brng = Rng::stream(seed, 12);
    let n = 4;
    let batch = Batch {
        images: (0..n).map(|_| brng.gaussian_vector(d_in, 1.0)).collect(),
        labels: (0..n).map(|i| i % n_classes).collect(),
        task_id: 1,
    };
    let losses = vec![
        ProbeLoss::SupConAffa { tau: 1.0 },
        ProbeLoss::CeAbfa {
            task_id: 1,
            tau_ce: 1.0,
            classes: (0..n_classes).collect(),
        },
    ];
    GradCheckFixture {
        store,
        enc,
        affa,
        abfa,
        batch,
        losses,
    }
}

/// Runs the checker on the default fixture.
pub fn run_default(seed: u64, settings: GradCheckSettings) -> Result<GradCheckReport> {
    let mut fx = default_fixture(seed);
    gradcheck(
        &mut fx.store,
        &fx.enc,
        &fx.affa,
        &fx.abfa,
        &fx.batch,
        &fx.losses,
        settings,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fixture_passes_at_1e4() {
        let report = run_default(2024, GradCheckSettings::default()).unwrap();
        assert!(
            report.all_pass,
            "failing groups: {:?}",
            report
                .groups
                .iter()
                .filter(|g| !g.pass)
                .collect::<Vec<_>>()
        );
        // Every parameter family must be represented.
        for needle in ["affa.", ".e0.", ".gate", ".b0", ".b1", "router1"] {
            assert!(
                report.groups.iter().any(|g| g.name.contains(needle)),
                "missing group {needle}"
            );
        }
    }

    #[test]
    fn frozen_router_is_absent_from_report() {
        let report = run_default(2024, GradCheckSettings::default()).unwrap();
        assert!(
            !report.groups.iter().any(|g| g.name.contains("router0")),
            "frozen router leaked into the report"
        );
    }

    #[test]
    fn linear_probe_is_exact_to_1e10() {
        // A purely linear function of the parameter: loss = sum(W x).
        use crate::graph::GradCtx;
        use crate::linalg::Vector;
        let mut store = ParamStore::new();
        let pid = store.add("w", Rng::new(1).gaussian_matrix(3, 3, 1.0));
        let x = Rng::new(2).gaussian_vector(3, 1.0);
        let ones = Vector::from_slice(&[1.0, 1.0, 1.0]);

        let tape = {
            let mut ctx = GradCtx::new(&store);
            let xin = ctx.input(&x);
            let y = ctx.param_matvec(pid, &xin);
            let o = ctx.input(&ones);
            let root = ctx.dot(&y, &o);
            ctx.backward(root)
        };
        let eval = |store: &ParamStore| {
            let mut ctx = PlainCtx::new(store);
            let xin = ctx.input(&x);
            let y = ctx.param_matvec(pid, &xin);
            let o = ctx.input(&ones);
            ctx.dot(&y, &o)
        };
        let h = 1e-3;
        for e in 0..9 {
            let old = store.perturb(pid, e, h);
            let fp = eval(&store);
            store.set_entry(pid, e, old - h);
            let fm = eval(&store);
            store.set_entry(pid, e, old);
            let fd = (fp - fm) / (2.0 * h);
            let ga = tape.get(pid).unwrap().data[e];
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-10);
            assert!(rel <= 1e-10, "entry {e}: {ga} vs {fd}");
        }
    }
}
