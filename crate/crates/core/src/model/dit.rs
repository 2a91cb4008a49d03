//! Toy joint text–image diffusion transformer.
//!
//! The token sequence is `[text | noisy image | context image]`. Double-stream
//! blocks apply separate projection stacks to the text rows and to the image
//! rows (noisy + context) but attend jointly over everything; single-stream
//! blocks share one stack across the whole sequence. The model predicts the
//! injected noise for the noisy-image rows.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};

use super::attention::{mha_backward, mha_forward, ScoreGradient};
use super::config::ModelConfig;
use super::layers::{
    gaussian, grid_position_embedding, layer_norm, layer_norm_backward, patchify,
    sequence_position_embedding, silu, silu_backward, timestep_embedding, unpatchify, LinearGrad,
    LnCache, LoraGrad, Linear,
};
use super::schedule::DiffusionSchedule;
use super::tokenizer::TokenizedPrompt;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lora::{route_expert, BlockKind, Branch, LoraAdapters, LoraExpert, Proj, SiteId, SiteSelection};

/// The projection stack of one stream inside a block.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl StreamWeights {
    fn init(seed: u64, prefix: &str, config: &ModelConfig) -> Self {
        let (d, hd) = (config.dim, config.hidden_dim());
        let lin = |p: &str, i, o| Linear::init(seed, &format!("{prefix}.{p}"), i, o);
        Self {
            q: lin("q", d, d),
            k: lin("k", d, d),
            v: lin("v", d, d),
            o: lin("o", d, d),
            ff1: lin("ff1", d, hd),
            ff2: lin("ff2", hd, d),
        }
    }

    pub fn get(&self, proj: Proj) -> &Linear {
        match proj {
            Proj::Q => &self.q,
            Proj::K => &self.k,
            Proj::V => &self.v,
            Proj::O => &self.o,
            Proj::Ff1 => &self.ff1,
            Proj::Ff2 => &self.ff2,
        }
    }

    pub fn get_mut(&mut self, proj: Proj) -> &mut Linear {
        match proj {
            Proj::Q => &mut self.q,
            Proj::K => &mut self.k,
            Proj::V => &mut self.v,
            Proj::O => &mut self.o,
            Proj::Ff1 => &mut self.ff1,
            Proj::Ff2 => &mut self.ff2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub index: usize,
    /// Double blocks hold `[Txt, Img]`; single blocks hold `[Joint]`.
    pub streams: Vec<(Branch, StreamWeights)>,
}

impl Block {
    fn site(&self, branch: Branch, proj: Proj) -> SiteId {
        SiteId {
            kind: self.kind,
            index: self.index,
            branch,
            proj,
        }
    }
}

/// Frozen backbone parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub text_embed: Array2<f64>,
    /// Row 0 tags noisy-image tokens, row 1 context tokens.
    pub type_embed: Array2<f64>,
    pub time_in: Linear,
    pub time_out: Linear,
    pub blocks: Vec<Block>,
    pub final_layer: Linear,
}

impl Backbone {
    pub fn init(config: &ModelConfig) -> Self {
        let seed = config.seed;
        let (d, pd) = (config.dim, config.patch_dim());
        let mut blocks = Vec::with_capacity(config.num_layers());
        for index in 0..config.double_blocks {
            blocks.push(Block {
                kind: BlockKind::Double,
                index,
                streams: vec![
                    (
                        Branch::Txt,
                        StreamWeights::init(seed, &format!("double.{index}.txt"), config),
                    ),
                    (
                        Branch::Img,
                        StreamWeights::init(seed, &format!("double.{index}.img"), config),
                    ),
                ],
            });
        }
        for index in 0..config.single_blocks {
            blocks.push(Block {
                kind: BlockKind::Single,
                index,
                streams: vec![(
                    Branch::Joint,
                    StreamWeights::init(seed, &format!("single.{index}"), config),
                )],
            });
        }
        Self {
            patch_embed: Linear::init(seed, "patch_embed", pd, d),
            text_embed: gaussian(seed, "text_embed", (config.vocab, d), 1.0),
            type_embed: gaussian(seed, "type_embed", (2, d), 1.0),
            time_in: Linear::init(seed, "time_in", d, d),
            time_out: Linear::init(seed, "time_out", d, d),
            blocks,
            final_layer: Linear::init(seed, "final_layer", d, pd),
        }
    }
}

/// Context image patches plus the tokenized prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub context: Array2<f64>,
    pub text_ids: Vec<usize>,
    pub style_positions: Vec<usize>,
    pub grid: (usize, usize),
}

/// Row layout of the joint sequence `[text | noisy | context]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub text: usize,
    pub image: usize,
    pub context: usize,
}

impl SeqLayout {
    pub fn len(&self) -> usize {
        self.text + self.image + self.context
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_rows(&self) -> Range<usize> {
        0..self.text
    }

    pub fn image_rows(&self) -> Range<usize> {
        self.text..self.text + self.image
    }

    pub fn img_stream_rows(&self) -> Range<usize> {
        self.text..self.len()
    }
}

/// Embedded joint sequence fed to the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub layout: SeqLayout,
    pub style_token_indices: Vec<usize>,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn image_tokens(&self) -> ndarray::ArrayView2<'_, f64> {
        self.tokens.slice(s![self.layout.image_rows(), ..])
    }

    pub fn text_tokens(&self) -> ndarray::ArrayView2<'_, f64> {
        self.tokens.slice(s![self.layout.text_rows(), ..])
    }
}

/// Post-softmax scores of one attention layer, `H × N × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub kind: BlockKind,
    pub layout: SeqLayout,
    pub scores: Array3<f64>,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.scores.dim().0
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ln2: LnCache,
    f1: Array2<f64>,
    act: Array2<f64>,
    lora_u: BTreeMap<(Proj, usize), Array2<f64>>,
}

/// Activations kept from a forward pass for [`DiffusionTransformer::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    pub style_id: usize,
    pub layout: SeqLayout,
    pub grid: (usize, usize),
    pub records: Vec<AttentionRecord>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

/// Loss gradient with respect to the aggregated style attention map, routed
/// back onto the raw scores of the layers it was averaged over.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradient {
    pub layers: Vec<usize>,
    pub style_positions: Vec<usize>,
    /// `∂L/∂M̂` per image cell, row-major over the token grid.
    pub map_grad: Vec<f64>,
}

struct InjectedScoreGrad<'a> {
    rows: Range<usize>,
    cols: &'a [usize],
    /// Already divided by |L|·H·|K_s|.
    per_row: Vec<f64>,
}

impl ScoreGradient for InjectedScoreGrad<'_> {
    fn add(&self, _head: usize, d_probs: &mut Array2<f64>) {
        for (r, g) in self.rows.clone().zip(&self.per_row) {
            for &c in self.cols {
                d_probs[[r, c]] += g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub lora: BTreeMap<SiteId, LoraGrad>,
    pub base: BTreeMap<SiteId, LinearGrad>,
}

impl Gradients {
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (site, g) in &other.lora {
            match self.lora.get_mut(site) {
                Some(acc) => {
                    acc.a.scaled_add(scale, &g.a);
                    acc.b.scaled_add(scale, &g.b);
                }
                None => {
                    self.lora.insert(
                        *site,
                        LoraGrad {
                            a: &g.a * scale,
                            b: &g.b * scale,
                        },
                    );
                }
            }
        }
        for (site, g) in &other.base {
            match self.base.get_mut(site) {
                Some(acc) => {
                    acc.weight.scaled_add(scale, &g.weight);
                    acc.bias.scaled_add(scale, &g.bias);
                }
                None => {
                    self.base.insert(
                        *site,
                        LinearGrad {
                            weight: &g.weight * scale,
                            bias: &g.bias * scale,
                        },
                    );
                }
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        let l: f64 = self
            .lora
            .values()
            .map(|g| g.a.iter().chain(g.b.iter()).map(|v| v * v).sum::<f64>())
            .sum();
        let b: f64 = self
            .base
            .values()
            .map(|g| g.weight.iter().chain(g.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum();
        l + b
    }

    pub fn all_finite(&self) -> bool {
        self.lora
            .values()
            .all(|g| g.a.iter().chain(g.b.iter()).all(|v| v.is_finite()))
            && self
                .base
                .values()
                .all(|g| g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub eps_hat: Array3<f64>,
    pub records: Vec<AttentionRecord>,
}

/// Backbone, schedule, and (optionally) the per-style experts.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTransformer {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub schedule: DiffusionSchedule,
    pub adapters: Option<LoraAdapters>,
    /// Lets the attention projections of the backbone receive gradients.
    pub train_backbone_attention: bool,
}

fn image_to_signed(img: &Image) -> Array3<f64> {
    let (h, w, c) = img.shape();
    Array3::from_shape_vec((h, w, c), img.data().iter().map(|v| v * 2.0 - 1.0).collect())
        .expect("shape matches buffer")
}

pub fn signed_to_image(x: &Array3<f64>) -> Image {
    let (h, w, c) = x.dim();
    Image::new(
        h,
        w,
        c,
        x.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
    )
    .expect("shape matches buffer")
}

/// Maps an image in `[0, 1]` to the model's `[-1, 1]` signal space.
pub fn image_to_latent(img: &Image) -> Array3<f64> {
    image_to_signed(img)
}

impl DiffusionTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schedule = DiffusionSchedule::cosine(config.timesteps)?;
        Ok(Self {
            backbone: Backbone::init(&config),
            config,
            schedule,
            adapters: None,
            train_backbone_attention: false,
        })
    }

    /// Attaches `experts` zero-initialized LoRA experts to the selected sites.
    pub fn attach_experts(
        &mut self,
        experts: usize,
        rank: usize,
        gamma: f64,
        selection: SiteSelection,
        seed: u64,
    ) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::AlreadyAttached);
        }
        if experts != self.config.styles {
            return Err(Error::Config(format!(
                "expert count {experts} differs from the model's {} styles",
                self.config.styles
            )));
        }
        self.adapters = Some(LoraAdapters::new(
            &self.config,
            experts,
            rank,
            gamma,
            selection,
            seed,
        )?);
        Ok(())
    }

    pub fn conditioning(&self, context: &Image, prompt: &TokenizedPrompt) -> Result<Conditioning> {
        let p = self.config.patch;
        let (h, w, c) = context.shape();
        if h % p != 0 || w % p != 0 || c != self.config.channels {
            return Err(Error::Shape(format!(
                "context {h}x{w}x{c} incompatible with patch {p} and {} channels",
                self.config.channels
            )));
        }
        if prompt.ids.iter().any(|&id| id >= self.config.vocab) {
            return Err(Error::InvalidInput("token id outside vocabulary".into()));
        }
        if prompt.style_positions.iter().any(|&i| i >= prompt.ids.len()) {
            return Err(Error::InvalidInput("style position outside prompt".into()));
        }
        Ok(Conditioning {
            context: patchify(&image_to_signed(context), p),
            text_ids: prompt.ids.clone(),
            style_positions: prompt.style_positions.clone(),
            grid: (h / p, w / p),
        })
    }

    fn active_expert(&self, style_id: usize) -> Result<Option<&LoraExpert>> {
        route_expert(style_id, self.config.styles)?;
        match &self.adapters {
            Some(a) => Ok(Some(a.expert(style_id)?)),
            None => Ok(None),
        }
    }

    fn lora_scale(&self) -> f64 {
        self.adapters.as_ref().map_or(0.0, |a| a.scale())
    }

    pub fn embed(&self, cond: &Conditioning, x_t: &Array3<f64>, t: usize) -> Result<TokenSequence> {
        let p = self.config.patch;
        let (h, w, c) = x_t.dim();
        if (h / p, w / p) != cond.grid || h % p != 0 || w % p != 0 || c != self.config.channels {
            return Err(Error::Shape(format!(
                "x_t {h}x{w}x{c} does not match conditioning grid {:?}",
                cond.grid
            )));
        }
        self.schedule.alpha_bar(t)?;
        let bb = &self.backbone;
        let d = self.config.dim;
        let layout = SeqLayout {
            text: cond.text_ids.len(),
            image: cond.grid.0 * cond.grid.1,
            context: cond.context.nrows(),
        };
        let pos = grid_position_embedding(cond.grid, d);

        let te = timestep_embedding(t, d).insert_axis(Axis(0));
        let (th, _) = bb.time_in.forward(te.view(), None);
        let (temb, _) = bb.time_out.forward(silu(&th).view(), None);

        let mut tokens = Array2::zeros((layout.len(), d));
        let txt_pos = sequence_position_embedding(layout.text, d);
        for (i, &id) in cond.text_ids.iter().enumerate() {
            let mut row = tokens.row_mut(i);
            row.assign(&bb.text_embed.row(id));
            row += &txt_pos.row(i);
        }
        let (img, _) = bb.patch_embed.forward(patchify(x_t, p).view(), None);
        let mut img_rows = tokens.slice_mut(s![layout.image_rows(), ..]);
        img_rows.assign(&img);
        img_rows += &pos;
        img_rows += &bb.type_embed.row(0);
        img_rows += &temb.row(0);
        let (ctx, _) = bb.patch_embed.forward(cond.context.view(), None);
        let mut ctx_rows = tokens.slice_mut(s![layout.img_stream_rows().start + layout.image.., ..]);
        ctx_rows.assign(&ctx);
        ctx_rows += &pos;
        ctx_rows += &bb.type_embed.row(1);
        Ok(TokenSequence {
            tokens,
            layout,
            style_token_indices: cond.style_positions.clone(),
            grid: cond.grid,
        })
    }

    fn groups(block: &Block, layout: &SeqLayout) -> Vec<Range<usize>> {
        match block.kind {
            BlockKind::Double => vec![layout.text_rows(), layout.img_stream_rows()],
            BlockKind::Single => vec![0..layout.len()],
        }
    }

    fn group_forward(
        block: &Block,
        proj: Proj,
        groups: &[Range<usize>],
        x: &Array2<f64>,
        expert: Option<&LoraExpert>,
        scale: f64,
        cache: Option<&mut BTreeMap<(Proj, usize), Array2<f64>>>,
    ) -> Array2<f64> {
        let d_out = block.streams[0].1.get(proj).d_out();
        let mut y = Array2::zeros((x.nrows(), d_out));
        let mut us = Vec::new();
        for (gi, (rows, (branch, sw))) in groups.iter().zip(&block.streams).enumerate() {
            let lora = expert
                .and_then(|e| e.pair(&block.site(*branch, proj)))
                .map(|p| (p, scale));
            let (yg, u) = sw.get(proj).forward(x.slice(s![rows.clone(), ..]), lora);
            y.slice_mut(s![rows.clone(), ..]).assign(&yg);
            if let Some(u) = u {
                us.push(((proj, gi), u));
            }
        }
        if let Some(c) = cache {
            c.extend(us);
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn group_backward(
        &self,
        block: &Block,
        proj: Proj,
        groups: &[Range<usize>],
        x: &Array2<f64>,
        dy: &Array2<f64>,
        cache: &BlockCache,
        expert: Option<&LoraExpert>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let scale = self.lora_scale();
        let mut dx = Array2::zeros(x.dim());
        for (gi, (rows, (branch, sw))) in groups.iter().zip(&block.streams).enumerate() {
            let site = block.site(*branch, proj);
            let pair = expert.and_then(|e| e.pair(&site));
            let lora_grad = pair.map(|p| {
                grads
                    .lora
                    .entry(site)
                    .or_insert_with(|| LoraGrad::zeros_like(p)) as *mut LoraGrad
            });
            let lin = sw.get(proj);
            let base_grad = (self.train_backbone_attention && proj.is_attention()).then(|| {
                grads.base.entry(site).or_insert_with(|| LinearGrad {
                    weight: Array2::zeros(lin.weight.dim()),
                    bias: Array1::zeros(lin.bias.len()),
                }) as *mut LinearGrad
            });
            // SAFETY: the two pointers target different maps of `grads`, and no
            // other reference into either map is alive while they are used.
            let dxg = lin.backward(
                x.slice(s![rows.clone(), ..]),
                cache.lora_u.get(&(proj, gi)),
                dy.slice(s![rows.clone(), ..]),
                pair.map(|p| (p, scale)),
                lora_grad.map(|p| unsafe { &mut *p }),
                base_grad.map(|p| unsafe { &mut *p }),
            );
            dx.slice_mut(s![rows.clone(), ..]).assign(&dxg);
        }
        dx
    }

    fn block_forward(
        &self,
        block: &Block,
        x: &Array2<f64>,
        layout: &SeqLayout,
        expert: Option<&LoraExpert>,
        keep: bool,
    ) -> (Array2<f64>, Array3<f64>, Option<BlockCache>) {
        let groups = Self::groups(block, layout);
        let scale = self.lora_scale();
        let mut lora_u = BTreeMap::new();
        let mut fwd = |proj, input: &Array2<f64>| {
            Self::group_forward(block, proj, &groups, input, expert, scale, keep.then_some(&mut lora_u))
        };
        let ln1 = layer_norm(x);
        let q = fwd(Proj::Q, &ln1.y);
        let k = fwd(Proj::K, &ln1.y);
        let v = fwd(Proj::V, &ln1.y);
        let (attn, probs) = mha_forward(&q, &k, &v, self.config.heads);
        let mut x1 = x + &fwd(Proj::O, &attn);
        let ln2 = layer_norm(&x1);
        let f1 = fwd(Proj::Ff1, &ln2.y);
        let act = silu(&f1);
        x1 += &fwd(Proj::Ff2, &act);
        let cache = keep.then(|| BlockCache {
            ln1,
            q,
            k,
            v,
            attn,
            ln2,
            f1,
            act,
            lora_u,
        });
        (x1, probs, cache)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        block: &Block,
        cache: &BlockCache,
        probs: &Array3<f64>,
        layout: &SeqLayout,
        dout: &Array2<f64>,
        expert: Option<&LoraExpert>,
        inject: Option<&dyn ScoreGradient>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let groups = Self::groups(block, layout);
        let back = |proj, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Gradients| {
            self.group_backward(block, proj, &groups, x, dy, cache, expert, grads)
        };
        let d_act = back(Proj::Ff2, &cache.act, dout, grads);
        let d_f1 = silu_backward(&cache.f1, &d_act);
        let d_ln2 = back(Proj::Ff1, &cache.ln2.y, &d_f1, grads);
        let dx1 = dout + &layer_norm_backward(&cache.ln2, &d_ln2);
        let d_attn = back(Proj::O, &cache.attn, &dx1, grads);
        let (dq, dk, dv) = mha_backward(
            &cache.q,
            &cache.k,
            &cache.v,
            probs,
            &d_attn,
            self.config.heads,
            inject,
        );
        let mut d_ln1 = back(Proj::Q, &cache.ln1.y, &dq, grads);
        d_ln1 += &back(Proj::K, &cache.ln1.y, &dk, grads);
        d_ln1 += &back(Proj::V, &cache.ln1.y, &dv, grads);
        dx1 + layer_norm_backward(&cache.ln1, &d_ln1)
    }

    fn run(
        &self,
        cond: &Conditioning,
        x_t: &Array3<f64>,
        t: usize,
        style_id: usize,
        keep: bool,
        capture: bool,
    ) -> Result<(Array3<f64>, Vec<AttentionRecord>, Option<Tape>)> {
        let expert = self.active_expert(style_id)?;
        let seq = self.embed(cond, x_t, t)?;
        let layout = seq.layout;
        let mut x = seq.tokens;
        let mut records = Vec::new();
        let mut caches = Vec::new();
        for (layer, block) in self.backbone.blocks.iter().enumerate() {
            let (next, probs, cache) = self.block_forward(block, &x, &layout, expert, keep);
            x = next;
            if keep || capture {
                records.push(AttentionRecord {
                    layer,
                    kind: block.kind,
                    layout,
                    scores: probs,
                });
            }
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        let img = x.slice(s![layout.image_rows(), ..]).to_owned();
        let final_ln = layer_norm(&img);
        let (out, _) = self.backbone.final_layer.forward(final_ln.y.view(), None);
        let eps_hat = unpatchify(&out, cond.grid, self.config.patch, self.config.channels);
        if keep {
            let tape = Tape {
                style_id,
                layout,
                grid: cond.grid,
                records,
                blocks: caches,
                final_ln,
            };
            Ok((eps_hat, Vec::new(), Some(tape)))
        } else {
            Ok((eps_hat, records, None))
        }
    }

    /// Predicts the noise in `x_t`. With `capture`, returns every layer's attention scores.
    pub fn forward(
        &self,
        cond: &Conditioning,
        x_t: &Array3<f64>,
        t: usize,
        style_id: usize,
        capture: bool,
    ) -> Result<ForwardOutput> {
        let (eps_hat, records, _) = self.run(cond, x_t, t, style_id, false, capture)?;
        Ok(ForwardOutput { eps_hat, records })
    }

    /// Forward pass that keeps activations for [`Self::backward`]; scores are in `tape.records`.
    pub fn forward_tape(
        &self,
        cond: &Conditioning,
        x_t: &Array3<f64>,
        t: usize,
        style_id: usize,
    ) -> Result<(Array3<f64>, Tape)> {
        let (eps_hat, _, tape) = self.run(cond, x_t, t, style_id, true, true)?;
        Ok((eps_hat, tape.expect("tape kept")))
    }

    /// Gradients of the active expert (and unfrozen backbone attention, if enabled)
    /// given `∂L/∂ε̂` and an optional gradient on the aggregated style attention map.
    pub fn backward(
        &self,
        tape: &Tape,
        d_eps: &Array3<f64>,
        attn_grad: Option<&AttentionGradient>,
    ) -> Result<Gradients> {
        let expert = self.active_expert(tape.style_id)?;
        let layout = tape.layout;
        let p = self.config.patch;
        let d_out = patchify(d_eps, p);
        if d_out.nrows() != layout.image {
            return Err(Error::Shape("eps gradient does not match the tape".into()));
        }
        let inject = match attn_grad {
            Some(g) => {
                if g.map_grad.len() != layout.image {
                    return Err(Error::Shape(format!(
                        "attention gradient has {} cells, expected {}",
                        g.map_grad.len(),
                        layout.image
                    )));
                }
                if g.style_positions.is_empty() || g.layers.is_empty() {
                    return Err(Error::InvalidInput(
                        "attention gradient needs layers and style positions".into(),
                    ));
                }
                if g.style_positions.iter().any(|&c| c >= layout.text) {
                    return Err(Error::InvalidInput("style position outside text rows".into()));
                }
                if g.layers.iter().any(|&l| l >= tape.records.len()) {
                    return Err(Error::InvalidInput("supervision layer out of range".into()));
                }
                let norm = (g.layers.len() * self.config.heads * g.style_positions.len()) as f64;
                Some((
                    g,
                    InjectedScoreGrad {
                        rows: layout.image_rows(),
                        cols: &g.style_positions,
                        per_row: g.map_grad.iter().map(|v| v / norm).collect(),
                    },
                ))
            }
            None => None,
        };

        let mut grads = Gradients::default();
        let d_ln = self.backbone.final_layer.backward(
            tape.final_ln.y.view(),
            None,
            d_out.view(),
            None,
            None,
            None,
        );
        let mut dx = Array2::zeros((layout.len(), self.config.dim));
        dx.slice_mut(s![layout.image_rows(), ..])
            .assign(&layer_norm_backward(&tape.final_ln, &d_ln));
        for (layer, block) in self.backbone.blocks.iter().enumerate().rev() {
            let inj = inject
                .as_ref()
                .filter(|(g, _)| g.layers.contains(&layer))
                .map(|(_, i)| i as &dyn ScoreGradient);
            dx = self.block_backward(
                block,
                &tape.blocks[layer],
                &tape.records[layer].scores,
                &layout,
                &dx,
                expert,
                inj,
                &mut grads,
            );
        }
        Ok(grads)
    }

    /// Every parameter tensor, keyed by its checkpoint name.
    pub fn named_params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        let bb = &self.backbone;
        fn lin<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, name: &str, l: &'a Linear) {
            out.push((format!("backbone/{name}.weight"), l.weight.view().into_dyn()));
            out.push((format!("backbone/{name}.bias"), l.bias.view().into_dyn()));
        }
        lin(&mut out, "patch_embed", &bb.patch_embed);
        out.push(("backbone/text_embed".into(), bb.text_embed.view().into_dyn()));
        out.push(("backbone/type_embed".into(), bb.type_embed.view().into_dyn()));
        lin(&mut out, "time_in", &bb.time_in);
        lin(&mut out, "time_out", &bb.time_out);
        for block in &bb.blocks {
            for (branch, sw) in &block.streams {
                for proj in Proj::ALL {
                    lin(&mut out, &block.site(*branch, proj).to_string(), sw.get(proj));
                }
            }
        }
        lin(&mut out, "final_layer", &bb.final_layer);
        if let Some(ad) = &self.adapters {
            for e in &ad.experts {
                for (site, pair) in &e.pairs {
                    out.push((format!("expert/{}/{site}/A", e.style_id), pair.a.view().into_dyn()));
                    out.push((format!("expert/{}/{site}/B", e.style_id), pair.b.view().into_dyn()));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        let bb = &mut self.backbone;
        fn lin<'a>(out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>, name: &str, l: &'a mut Linear) {
            out.push((format!("backbone/{name}.weight"), l.weight.view_mut().into_dyn()));
            out.push((format!("backbone/{name}.bias"), l.bias.view_mut().into_dyn()));
        }
        lin(&mut out, "patch_embed", &mut bb.patch_embed);
        out.push(("backbone/text_embed".into(), bb.text_embed.view_mut().into_dyn()));
        out.push(("backbone/type_embed".into(), bb.type_embed.view_mut().into_dyn()));
        lin(&mut out, "time_in", &mut bb.time_in);
        lin(&mut out, "time_out", &mut bb.time_out);
        for block in &mut bb.blocks {
            let (kind, index) = (block.kind, block.index);
            for (branch, sw) in &mut block.streams {
                let branch = *branch;
                let StreamWeights { q, k, v, o, ff1, ff2 } = sw;
                for (proj, l) in [
                    (Proj::Q, q),
                    (Proj::K, k),
                    (Proj::V, v),
                    (Proj::O, o),
                    (Proj::Ff1, ff1),
                    (Proj::Ff2, ff2),
                ] {
                    let site = SiteId {
                        kind,
                        index,
                        branch,
                        proj,
                    };
                    lin(&mut out, &site.to_string(), l);
                }
            }
        }
        lin(&mut out, "final_layer", &mut bb.final_layer);
        if let Some(ad) = &mut self.adapters {
            for e in &mut ad.experts {
                let sid = e.style_id;
                for (site, pair) in &mut e.pairs {
                    out.push((format!("expert/{sid}/{site}/A"), pair.a.view_mut().into_dyn()));
                    out.push((format!("expert/{sid}/{site}/B"), pair.b.view_mut().into_dyn()));
                }
            }
        }
        out
    }

    pub fn site_linear(&self, site: &SiteId) -> Option<&Linear> {
        let layer = match site.kind {
            BlockKind::Double => site.index,
            BlockKind::Single => self.config.double_blocks + site.index,
        };
        let block = self.backbone.blocks.get(layer)?;
        if block.kind != site.kind {
            return None;
        }
        block
            .streams
            .iter()
            .find(|(b, _)| *b == site.branch)
            .map(|(_, sw)| sw.get(site.proj))
    }

    pub fn site_linear_mut(&mut self, site: &SiteId) -> Option<&mut Linear> {
        let layer = match site.kind {
            BlockKind::Double => site.index,
            BlockKind::Single => self.config.double_blocks + site.index,
        };
        let block = self.backbone.blocks.get_mut(layer)?;
        if block.kind != site.kind {
            return None;
        }
        block
            .streams
            .iter_mut()
            .find(|(b, _)| *b == site.branch)
            .map(|(_, sw)| sw.get_mut(site.proj))
    }
}
