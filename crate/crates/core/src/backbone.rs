//! Frozen surrogate dual encoder with adapter injection points.
//!
//! Stands in for a pretrained dual encoder at desk scale: an image branch
//! (seeded linear projection followed by residual FFN blocks) and a text
//! branch (seeded class-embedding table followed by residual FFN blocks).
//! Adapters inject additively at the FFN of each block:
//!
//! `h_l = h_{l-1} + FFN_l(h_{l-1}) + adapter_l(h_{l-1})`
//!
//! so a zero-initialized adapter leaves the frozen path bit-identical.
//! Outputs are unit-normalized.

use crate::adapters::{lora_forward, moe_forward, AffaState, Branch, MoEAdapterState};
use crate::error::{Error, Result};
use crate::graph::Ctx;
use crate::linalg::{Matrix, Rng, Vector};

/// One residual feedforward block: `W2 gelu(W1 x)` with hidden width `4d`.
#[derive(Debug, Clone)]
pub struct FfnBlock {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Which computation path an encoding runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderPath {
    /// Backbone only, no adapters.
    Frozen,
    /// Backbone plus the task-shared LoRA.
    Affa,
    /// Backbone plus the expert mixture gated by the given task's router.
    Abfa(usize),
}

/// Frozen, seeded dual encoder. All weights are immutable after
/// construction; identical seeds reproduce identical weights bit for bit.
#[derive(Debug, Clone)]
pub struct FrozenDualEncoder {
    pub d_in: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_classes_max: usize,
    pub seed: u64,
    image_proj: Matrix,
    image_blocks: Vec<FfnBlock>,
    text_table: Matrix,
    text_blocks: Vec<FfnBlock>,
}

fn build_blocks(n_layers: usize, d: usize, rng: &mut Rng) -> Vec<FfnBlock> {
    (0..n_layers)
        .map(|_| {
            let hidden = 4 * d;
            FfnBlock {
                w1: rng.gaussian_matrix(hidden, d, 1.0 / (d as f64).sqrt()),
                w2: rng.gaussian_matrix(d, hidden, 1.0 / (hidden as f64).sqrt()),
            }
        })
        .collect()
}

/// Builds the encoder with i.i.d. Gaussian(0, 1/sqrt(fan_in)) weights from
/// per-component streams of the seed.
pub fn build_encoder(
    d_in: usize,
    d: usize,
    n_layers: usize,
    n_classes_max: usize,
    seed: u64,
) -> Result<FrozenDualEncoder> {
    if d_in == 0 || d == 0 || n_classes_max == 0 {
        return Err(Error::invalid_arg(
            "encoder dims d_in, d, n_classes_max must be >= 1",
        ));
    }
    let image_proj = Rng::stream(seed, 0).gaussian_matrix(d, d_in, 1.0 / (d_in as f64).sqrt());
    let image_blocks = build_blocks(n_layers, d, &mut Rng::stream(seed, 1));
    let text_table =
        Rng::stream(seed, 2).gaussian_matrix(n_classes_max, d, 1.0 / (d as f64).sqrt());
    let text_blocks = build_blocks(n_layers, d, &mut Rng::stream(seed, 3));
    Ok(FrozenDualEncoder {
        d_in,
        d,
        n_layers,
        n_classes_max,
        seed,
        image_proj,
        image_blocks,
        text_table,
        text_blocks,
    })
}

impl FrozenDualEncoder {
    /// CRC32 over all frozen weight bytes; used to assert that training
    /// never touches the backbone.
    pub fn weights_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut feed = |m: &Matrix| {
            for v in &m.data {
                h.update(&v.to_le_bytes());
            }
        };
        feed(&self.image_proj);
        for b in &self.image_blocks {
            feed(&b.w1);
            feed(&b.w2);
        }
        feed(&self.text_table);
        for b in &self.text_blocks {
            feed(&b.w1);
            feed(&b.w2);
        }
        h.finalize()
    }
}

/// Adapter states consulted during encoding. Paths that do not use a module
/// may leave it `None`.
#[derive(Clone, Copy)]
pub struct AdapterSet<'m> {
    pub affa: Option<&'m AffaState>,
    pub abfa: Option<&'m MoEAdapterState>,
}

impl<'m> AdapterSet<'m> {
    pub fn none() -> Self {
        AdapterSet {
            affa: None,
            abfa: None,
        }
    }

    pub fn new(affa: &'m AffaState, abfa: &'m MoEAdapterState) -> Self {
        AdapterSet {
            affa: Some(affa),
            abfa: Some(abfa),
        }
    }
}

fn check_path(path: EncoderPath, adapters: &AdapterSet) -> Result<()> {
    match path {
        EncoderPath::Frozen => Ok(()),
        EncoderPath::Affa => {
            if adapters.affa.is_none() {
                return Err(Error::protocol("Affa path without an AFFA state"));
            }
            Ok(())
        }
        EncoderPath::Abfa(task_id) => {
            let abfa = adapters
                .abfa
                .ok_or_else(|| Error::protocol("Abfa path without a MoE state"))?;
            if task_id >= abfa.n_tasks() {
                return Err(Error::protocol(format!(
                    "Abfa path for untrained task {task_id} ({} routers)",
                    abfa.n_tasks()
                )));
            }
            Ok(())
        }
    }
}

fn run_branch<'a, C: Ctx<'a>>(
    ctx: &mut C,
    blocks: &'a [FfnBlock],
    branch: Branch,
    path: EncoderPath,
    adapters: &AdapterSet,
    h0: C::V,
) -> Result<C::V> {
    let mut h = h0;
    for (l, block) in blocks.iter().enumerate() {
        let pre = ctx.const_matvec(&block.w1, &h);
        let act = ctx.gelu(&pre);
        let ffn = ctx.const_matvec(&block.w2, &act);
        let mut next = ctx.add(&h, &ffn);
        match path {
            EncoderPath::Frozen => {}
            EncoderPath::Affa => {
                if let Some(ad) = adapters.affa.and_then(|a| a.site(branch, l)) {
                    let inj = lora_forward(ctx, ad, &h);
                    next = ctx.add(&next, &inj);
                }
            }
            EncoderPath::Abfa(task_id) => {
                let abfa = adapters.abfa.expect("checked");
                if let Some(site) = abfa.site(branch, l) {
                    let inj = moe_forward(ctx, abfa, site, task_id, &h)?;
                    next = ctx.add(&next, &inj);
                }
            }
        }
        h = next;
    }
    Ok(ctx.normalize(&h))
}

/// Encodes an input vector through the image branch. Returns a unit-norm
/// feature.
pub fn encode_image<'a, C: Ctx<'a>>(
    ctx: &mut C,
    enc: &'a FrozenDualEncoder,
    adapters: &AdapterSet,
    x: &Vector,
    path: EncoderPath,
) -> Result<C::V> {
    if x.dim() != enc.d_in {
        return Err(Error::DimMismatch {
            op: "encode_image",
            expected: enc.d_in,
            got: x.dim(),
        });
    }
    check_path(path, adapters)?;
    let xin = ctx.input(x);
    let h0 = ctx.const_matvec(&enc.image_proj, &xin);
    run_branch(ctx, &enc.image_blocks, Branch::Image, path, adapters, h0)
}

/// Encodes a class id through the text branch. Returns a unit-norm feature.
pub fn encode_text<'a, C: Ctx<'a>>(
    ctx: &mut C,
    enc: &'a FrozenDualEncoder,
    adapters: &AdapterSet,
    class_id: usize,
    path: EncoderPath,
) -> Result<C::V> {
    if class_id >= enc.n_classes_max {
        return Err(Error::invalid_arg(format!(
            "class_id {class_id} out of range ({} classes)",
            enc.n_classes_max
        )));
    }
    check_path(path, adapters)?;
    let row = enc.text_table.row(class_id);
    let h0 = ctx.input(&row);
    run_branch(ctx, &enc.text_blocks, Branch::Text, path, adapters, h0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PlainCtx;
    use crate::params::ParamStore;

    fn frozen_image(enc: &FrozenDualEncoder, store: &ParamStore, x: &Vector) -> Vector {
        let mut ctx = PlainCtx::new(store);
        encode_image(&mut ctx, enc, &AdapterSet::none(), x, EncoderPath::Frozen).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_encoder(6, 4, 2, 10, 123).unwrap();
        let b = build_encoder(6, 4, 2, 10, 123).unwrap();
        assert_eq!(a.weights_checksum(), b.weights_checksum());
        let c = build_encoder(6, 4, 2, 10, 124).unwrap();
        assert_ne!(a.weights_checksum(), c.weights_checksum());
        assert!(build_encoder(0, 4, 2, 10, 1).is_err());
    }

    #[test]
    fn zero_layer_stack_is_projection_plus_normalize() {
        let enc = build_encoder(6, 4, 0, 10, 5).unwrap();
        let store = ParamStore::new();
        let x = Rng::new(9).gaussian_vector(6, 1.0);
        let got = frozen_image(&enc, &store, &x);
        let want = crate::linalg::normalize(&enc.image_proj.matvec(&x).unwrap()).unwrap();
        assert_eq!(got.data, want.data);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let enc = build_encoder(6, 4, 3, 10, 5).unwrap();
        let store = ParamStore::new();
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let x = rng.gaussian_vector(6, 1.5);
            let f = frozen_image(&enc, &store, &x);
            assert!((f.norm() - 1.0).abs() <= 1e-12);
        }
        let mut ctx = PlainCtx::new(&store);
        let t = encode_text(&mut ctx, &enc, &AdapterSet::none(), 3, EncoderPath::Frozen).unwrap();
        assert!((t.norm() - 1.0).abs() <= 1e-12);
        assert!(
            encode_text(&mut ctx, &enc, &AdapterSet::none(), 10, EncoderPath::Frozen).is_err()
        );
    }

    #[test]
    fn zero_adapters_reproduce_frozen_path_bit_exact() {
        let d_in = 6;
        let d = 4;
        let layers = 2;
        let enc = build_encoder(d_in, d, layers, 10, 42).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let affa_sites = [(Branch::Image, layers - 1), (Branch::Text, layers - 1)];
        let abfa_sites: Vec<(Branch, usize)> = [Branch::Image, Branch::Text]
            .into_iter()
            .flat_map(|b| (0..layers).map(move |l| (b, l)))
            .collect();
        let affa = AffaState::build(&mut store, &affa_sites, d, 2, &mut rng);
        let mut abfa =
            MoEAdapterState::build(&mut store, &abfa_sites, d, 3, 2, 2, 2, &mut rng).unwrap();
        abfa.expand_router(&mut store, 7).unwrap();
        let set = AdapterSet::new(&affa, &abfa);

        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let x = rng.gaussian_vector(d_in, 1.0);
            let frozen = frozen_image(&enc, &store, &x);
            for path in [EncoderPath::Affa, EncoderPath::Abfa(0)] {
                let mut ctx = PlainCtx::new(&store);
                let out = encode_image(&mut ctx, &enc, &set, &x, path).unwrap();
                assert_eq!(out.data, frozen.data, "path {path:?}");
            }
        }
        for class in 0..5 {
            let mut ctx = PlainCtx::new(&store);
            let frozen =
                encode_text(&mut ctx, &enc, &AdapterSet::none(), class, EncoderPath::Frozen)
                    .unwrap();
            for path in [EncoderPath::Affa, EncoderPath::Abfa(0)] {
                let mut ctx = PlainCtx::new(&store);
                let out = encode_text(&mut ctx, &enc, &set, class, path).unwrap();
                assert_eq!(out.data, frozen.data, "path {path:?}");
            }
        }
    }

    #[test]
    fn abfa_path_requires_trained_router() {
        let enc = build_encoder(6, 4, 1, 10, 42).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let abfa =
            MoEAdapterState::build(&mut store, &[(Branch::Image, 0)], 4, 3, 2, 2, 2, &mut rng)
                .unwrap();
        let affa = AffaState::build(&mut store, &[], 4, 2, &mut rng);
        let set = AdapterSet::new(&affa, &abfa);
        let x = Vector::zeros(6);
        let mut ctx = PlainCtx::new(&store);
        let err = encode_image(&mut ctx, &enc, &set, &x, EncoderPath::Abfa(0));
        assert!(err.is_err());
    }

    #[test]
    fn frozen_text_features_are_deterministic_and_distinct() {
        let enc = build_encoder(6, 8, 2, 10, 77).unwrap();
        let store = ParamStore::new();
        let mut ctx = PlainCtx::new(&store);
        let a = encode_text(&mut ctx, &enc, &AdapterSet::none(), 2, EncoderPath::Frozen).unwrap();
        let b = encode_text(&mut ctx, &enc, &AdapterSet::none(), 2, EncoderPath::Frozen).unwrap();
        assert_eq!(a.data, b.data);
        // Distinct classes are not parallel under this fixture seed.
        let c = encode_text(&mut ctx, &enc, &AdapterSet::none(), 3, EncoderPath::Frozen).unwrap();
        let cos = crate::linalg::cosine(&a, &c).unwrap();
        assert!(cos < 1.0 - 1e-9, "cos {cos}");
    }
}
