//! Full model: frozen ViT backbone + adapter plan + parameter store.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ila::{
    self, AdapterKind, AdapterPlan, BnUpdates, IlaConfig, IlaVariant,
};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{self, TokenSeq, ViTConfig};

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Train mode: BatchNorm uses batch statistics and reports updates.
    pub training: bool,
    pub capture_attention: bool,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Parameter leaves of this tape, for gradient accumulation.
    pub bound: Bound,
    /// Per-layer attention probabilities `[B, heads, S_l, S_l]` when captured.
    pub attention: Vec<Tensor>,
    /// Sequence length after embedding and after each block (adapters
    /// included), length `depth + 1`.
    pub seq_lens: Vec<usize>,
    pub bn_updates: BnUpdates,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub vit: ViTConfig,
    pub ila: IlaConfig,
    pub plan: AdapterPlan,
    pub store: ParamStore,
}

impl Model {
    /// Validate configs, resolve the adapter plan, and initialize all
    /// parameters from the `init` stream of `seed`.
    pub fn build(vit_cfg: ViTConfig, ila_cfg: IlaConfig, seed: u64) -> Result<Model> {
        let plan = ila::build_adapter_plan(&vit_cfg, &ila_cfg)?;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, "init");
        vit::init_backbone(&mut store, &vit_cfg, &mut rng);
        ila::init_adapters(&mut store, &vit_cfg, &ila_cfg, &plan, &mut rng);
        Ok(Model {
            vit: vit_cfg,
            ila: ila_cfg,
            plan,
            store,
        })
    }

    /// Backbone tensors: frozen for every variant (the PE setting).
    pub fn frozen_parameter_set(&self) -> Vec<String> {
        self.store.frozen_names()
    }

    pub fn trainable_parameter_set(&self) -> Vec<String> {
        self.store.trainable_names()
    }

    /// One forward pass over `images` `[B, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let bound = self.store.bind(g);
        let imgs = g.constant(images);
        let mut attention = Vec::new();
        let mut bn_updates = BnUpdates::new();
        let mut seq = vit::patchify_embed(g, &bound, &self.vit, imgs)?;
        let mut seq_lens = Vec::with_capacity(self.vit.depth + 1);
        seq_lens.push(seq.seq_len(g));
        let intra = self.ila.variant == IlaVariant::IlaPlusPlus;
        let mut ds_index = 0usize;
        for layer in 0..self.vit.depth {
            let cap = opts.capture_attention.then_some(&mut attention);
            seq = vit::mhsa_forward(g, &bound, &self.vit, layer, seq, cap)?;
            if intra {
                let v = ila::intra_adapter_forward(
                    g,
                    &bound,
                    &format!("intra.{}.attn", layer + 1),
                    seq.var,
                )?;
                seq = TokenSeq { var: v, ..seq };
            }
            seq = vit::pwffn_forward(g, &bound, &self.vit, layer, seq)?;
            if intra {
                let v = ila::intra_adapter_forward(
                    g,
                    &bound,
                    &format!("intra.{}.mlp", layer + 1),
                    seq.var,
                )?;
                seq = TokenSeq { var: v, ..seq };
            }
            // adapter hooks at group boundaries and ILA+ sites
            for p in &self.plan.placements {
                if p.after_layer != layer + 1 {
                    continue;
                }
                match p.kind {
                    AdapterKind::Downsampling => {
                        seq = ila::ila_forward(
                            g,
                            &bound,
                            &self.store,
                            &format!("ila.{ds_index}"),
                            &self.ila,
                            seq,
                            opts.training,
                            &mut bn_updates,
                        )?;
                        ds_index += 1;
                    }
                    AdapterKind::Plain => {
                        seq = ila::plain_ila_forward(
                            g,
                            &bound,
                            &self.store,
                            &format!("plain.{}", p.after_layer),
                            &self.ila,
                            seq,
                            opts.training,
                            &mut bn_updates,
                        )?;
                    }
                    AdapterKind::IntraLayer => {} // handled inside the block
                }
            }
            seq.validate(g)?;
            seq_lens.push(seq.seq_len(g));
        }
        let logits = vit::classify_head(g, &bound, &self.vit, seq)?;
        Ok(ForwardOutput {
            logits,
            bound,
            attention,
            seq_lens,
            bn_updates,
        })
    }
}
