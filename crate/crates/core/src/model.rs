//! A compact pre-norm ViT whose attention key path is pluggable.

use serde::{Deserialize, Serialize};

use crate::attention::{mhsa_forward, AttentionParams, GammaInit, KeyVariantSpec, WEIGHT_INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub variant: KeyVariantSpec,
    #[serde(default)]
    pub gamma_init: GammaInit,
}

impl ModelConfig {
    /// ViT-S/16 at 224×224, 1000 classes.
    pub fn vit_s16(variant: KeyVariantSpec) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_dim: 1536,
            num_classes: 1000,
            variant,
            gamma_init: GammaInit::Ones,
        }
    }

    /// ViT-B/16 at 224×224, 1000 classes.
    pub fn vit_b16(variant: KeyVariantSpec) -> Self {
        Self {
            dim: 768,
            heads: 12,
            mlp_dim: 3072,
            ..Self::vit_s16(variant)
        }
    }

    /// Smoke-training model: 16×16 grayscale images, patch 4, dim 64, depth 2.
    pub fn tiny(variant: KeyVariantSpec) -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_dim: 128,
            num_classes: 4,
            variant,
            gamma_init: GammaInit::Ones,
        }
    }

    /// Gradient-check model: 8×8 images, patch 4 (N = 5), dim 8, depth 1.
    pub fn gradcheck(variant: KeyVariantSpec) -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_dim: 16,
            num_classes: 3,
            variant,
            gamma_init: GammaInit::Ones,
        }
    }

    pub fn preset(name: &str, variant: KeyVariantSpec) -> Result<Self> {
        match name {
            "vit-s16" => Ok(Self::vit_s16(variant)),
            "vit-b16" => Ok(Self::vit_b16(variant)),
            "tiny" => Ok(Self::tiny(variant)),
            "gradcheck" => Ok(Self::gradcheck(variant)),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected vit-s16, vit-b16, tiny or gradcheck)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count including the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: (ParamId, ParamId),
    pub attn: AttentionParams,
    pub norm2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

/// Parameter handles of a ViT; the values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct VitLayout {
    pub config: ModelConfig,
    pub patch: (ParamId, ParamId),
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct VitModel<T> {
    pub layout: VitLayout,
    pub store: ParamStore<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, num_classes]`
    pub logits: Var,
    /// Per layer, `[B, heads, N, N]`.
    pub attentions: Vec<Var>,
}

fn register_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_out: usize,
    fan_in: usize,
) -> Result<(ParamId, ParamId)> {
    let w = store.register(
        format!("{name}.weight"),
        &[fan_out, fan_in],
        ParamKind::Weight,
        Init::TruncatedNormal {
            std: WEIGHT_INIT_STD,
        },
    )?;
    let b = store.register(
        format!("{name}.bias"),
        &[fan_out],
        ParamKind::Bias,
        Init::Zeros,
    )?;
    Ok((w, b))
}

fn register_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    dim: usize,
) -> Result<(ParamId, ParamId)> {
    let g = store.register(
        format!("{name}.gain"),
        &[dim],
        ParamKind::Gain,
        Init::Constant(1.0),
    )?;
    let b = store.register(format!("{name}.bias"), &[dim], ParamKind::Bias, Init::Zeros)?;
    Ok((g, b))
}

impl VitLayout {
    /// Registers every parameter of the model into `store` (zero-filled).
    pub fn register<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.dim, config.tokens());
        let patch = register_linear(store, "patch_embed", d, config.patch_dim())?;
        let cls_token = store.register(
            "cls_token",
            &[1, 1, d],
            ParamKind::Embedding,
            Init::TruncatedNormal {
                std: WEIGHT_INIT_STD,
            },
        )?;
        let pos_embed = store.register("pos_embed", &[n, d], ParamKind::Embedding, Init::Zeros)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            let norm1 = register_norm(store, &format!("{p}.norm1"), d)?;
            let attn = AttentionParams::register(
                store,
                &format!("{p}.attn"),
                d,
                n,
                config.variant,
                config.gamma_init,
            )?;
            let norm2 = register_norm(store, &format!("{p}.norm2"), d)?;
            let fc1 = register_linear(store, &format!("{p}.mlp.fc1"), config.mlp_dim, d)?;
            let fc2 = register_linear(store, &format!("{p}.mlp.fc2"), d, config.mlp_dim)?;
            blocks.push(Block {
                norm1,
                attn,
                norm2,
                fc1,
                fc2,
            });
        }
        let norm = register_norm(store, "norm", d)?;
        let head = register_linear(store, "head", config.num_classes, d)?;
        Ok(Self {
            config: config.clone(),
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    /// Patchify, project, prepend the class token and add positions:
    /// `[B, C, S, S] → [B, N, D]`. Patch pixels are flattened in
    /// `(row-in-patch, column-in-patch, channel)` order.
    pub fn patch_embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<Var> {
        let c = &self.config;
        let (s, p, ch) = (c.image_size, c.patch_size, c.channels);
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [ch, s, s] {
            return Err(Error::shape("patch_embed", shape, &[ch, s, s]));
        }
        let b = shape[0];
        let gs = c.grid();
        let x = g.constant(images.clone());
        let x = g.reshape(x, &[b, ch, gs, p, gs, p])?;
        let x = g.permute(x, &[0, 2, 4, 3, 5, 1])?;
        let x = g.reshape(x, &[b, gs * gs, c.patch_dim()])?;
        let (w, bias) = (g.param(store, self.patch.0), g.param(store, self.patch.1));
        let tokens = g.linear(x, w, Some(bias))?;
        let cls = g.param(store, self.cls_token);
        let cls = g.broadcast_to(cls, &[b, 1, c.dim])?;
        let x = g.concat(&[cls, tokens], 1)?;
        let pos = g.param(store, self.pos_embed);
        g.add(x, pos)
    }

    /// Pre-norm residual block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
    /// Returns the output and the block's attention matrix.
    pub fn block_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        block: &Block,
    ) -> Result<(Var, Var)> {
        let (g1, b1) = (g.param(store, block.norm1.0), g.param(store, block.norm1.1));
        let h = g.layer_norm(x, g1, b1)?;
        let attn = mhsa_forward(g, store, h, &block.attn, self.config.heads)?;
        let x = g.add(x, attn.out)?;
        let (g2, b2) = (g.param(store, block.norm2.0), g.param(store, block.norm2.1));
        let h = g.layer_norm(x, g2, b2)?;
        let (w1, c1) = (g.param(store, block.fc1.0), g.param(store, block.fc1.1));
        let h = g.linear(h, w1, Some(c1))?;
        let h = g.gelu(h);
        let (w2, c2) = (g.param(store, block.fc2.0), g.param(store, block.fc2.1));
        let h = g.linear(h, w2, Some(c2))?;
        Ok((g.add(x, h)?, attn.attn))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<ForwardOutput> {
        let mut x = self.patch_embed(g, store, images)?;
        let mut attentions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = self.block_forward(g, store, x, block)?;
            x = y;
            attentions.push(a);
        }
        let (ng, nb) = (g.param(store, self.norm.0), g.param(store, self.norm.1));
        let x = g.layer_norm(x, ng, nb)?;
        let b = g.shape(x)[0];
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, self.config.dim])?;
        let (hw, hb) = (g.param(store, self.head.0), g.param(store, self.head.1));
        let logits = g.linear(cls, hw, Some(hb))?;
        Ok(ForwardOutput { logits, attentions })
    }
}

impl<T: Scalar> VitModel<T> {
    /// Builds the model with every parameter registered and zero-filled.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = VitLayout::register(config, &mut store)?;
        Ok(Self { layout, store })
    }

    /// Builds and initializes the model from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.store.initialize(&mut Rng::seed(seed));
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<ForwardOutput> {
        self.layout.forward(g, &self.store, images)
    }

    /// Logits without keeping a graph around.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images)?;
        Ok(g.value(out.logits).clone())
    }

    /// Test hook: zero every query projection so that all attention maps are
    /// uniform regardless of the key path.
    pub fn zero_queries(&mut self) {
        for b in &self.layout.blocks {
            for id in [b.attn.w_q, b.attn.b_q] {
                let shape = self.store.get(id).shape().to_vec();
                *self.store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> VitModel<U> {
        VitModel {
            layout: self.layout.clone(),
            store: self.store.cast(),
        }
    }
}
