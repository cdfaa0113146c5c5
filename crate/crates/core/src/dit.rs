//! A miniature FLUX-style hybrid diffusion transformer.
//!
//! The image is cut into patches that form the image stream `x`; prompt
//! tokens form the text stream `c`. The first `n_double` blocks keep separate
//! projections and FFNs per stream and only mix in joint attention. The
//! remaining `n_single` blocks run on the concatenation `[c; x]` with shared
//! weights. Every block is modulated by the global embedding `y`
//! (timestep + pooled prompt) through six AdaLN vectors per stream:
//! shift/scale/gate for attention and for the FFN. The modulation projection
//! is zero-initialized, so an untrained block is the identity.
//!
//! The block internals are a standard DiT reconstruction; only the
//! double/single taxonomy and the AdaLN conditioning are prescribed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::mob::{self, MobGroupSpec, WindowTrace};
use crate::moe::{self, MoeConfig, MoeTrace};
use crate::params::{Ctx, Params};
use crate::rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub text_len: usize,
    pub vocab: usize,
    /// Width of the global embedding. `None` means `hidden`; a smaller value
    /// is AdaLN compression, each block then up-projects from it.
    pub adaln_dim: Option<usize>,
    pub pos_embed: bool,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 2,
            channels: 3,
            hidden: 64,
            n_double: 4,
            n_single: 8,
            heads: 4,
            ffn_ratio: 4,
            text_len: 8,
            vocab: 32,
            adaln_dim: None,
            pos_embed: true,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(config("ffn_ratio must be positive"));
        }
        if self.hidden % 2 != 0 {
            return Err(config("hidden must be even for the timestep embedding"));
        }
        if self.adaln_dim == Some(0) || self.text_len == 0 || self.vocab == 0 || self.channels == 0 {
            return Err(config("adaln_dim, text_len, vocab and channels must be positive"));
        }
        Ok(())
    }

    pub fn adaln(&self) -> usize {
        self.adaln_dim.unwrap_or(self.hidden)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn img_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn n_blocks(&self) -> usize {
        self.n_double + self.n_single
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_ratio * self.hidden
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn block_kind(&self, l: usize) -> BlockKind {
        if l < self.n_double {
            BlockKind::Double
        } else {
            BlockKind::Single
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Double,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Image,
    Text,
    Joint,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Image => "img",
            Stream::Text => "txt",
            Stream::Joint => "joint",
        }
    }
}

pub fn block_prefix(l: usize) -> String {
    format!("block.{l:02}")
}

fn stream_prefix(l: usize, stream: Stream) -> String {
    match stream {
        Stream::Joint => block_prefix(l),
        s => format!("{}.{}", block_prefix(l), s.tag()),
    }
}

/// One FFN position in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FfnSlot {
    pub block: usize,
    pub stream: Stream,
}

impl FfnSlot {
    pub fn prefix(&self) -> String {
        format!("{}.ffn", stream_prefix(self.block, self.stream))
    }
}

impl fmt::Display for FfnSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FfnKind {
    Dense,
    Moe(MoeConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnEntry {
    pub slot: FfnSlot,
    pub kind: FfnKind,
}

/// Which FFNs are dense or MoE and which blocks form MoB groups.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub ffn: Vec<FfnEntry>,
    pub groups: Vec<MobGroupSpec>,
}

impl Layout {
    pub fn kind(&self, slot: &FfnSlot) -> Option<&FfnKind> {
        self.ffn.iter().find(|e| e.slot == *slot).map(|e| &e.kind)
    }

    pub fn set_kind(&mut self, slot: FfnSlot, kind: FfnKind) {
        match self.ffn.iter_mut().find(|e| e.slot == slot) {
            Some(e) => e.kind = kind,
            None => self.ffn.push(FfnEntry { slot, kind }),
        }
    }

    pub fn has_moe(&self) -> bool {
        self.ffn.iter().any(|e| matches!(e.kind, FfnKind::Moe(_)))
    }

    pub fn moe_slots(&self) -> Vec<(FfnSlot, MoeConfig)> {
        self.ffn
            .iter()
            .filter_map(|e| match &e.kind {
                FfnKind::Moe(c) => Some((e.slot, c.clone())),
                FfnKind::Dense => None,
            })
            .collect()
    }

    /// Group containing block `l`, if any.
    pub fn group_of(&self, l: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(l))
    }
}

/// Knobs for one forward evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Override the number of active normal experts in every MoE layer
    /// (dynamic Top-K). `Some(0)` runs shared experts only.
    pub topk: Option<usize>,
}

/// Activations of a running forward pass between blocks.
#[derive(Debug, Clone, Copy)]
pub enum StreamState {
    Dual { x: Var, c: Var },
    Joint { xc: Var },
}

/// Result of [`DitModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Predicted velocity, latent shaped `[C, H, W]`.
    pub velocity: Var,
    /// Image tokens entering the first block.
    pub embed: Var,
    /// Image-stream features after each block; `None` for blocks a MoB
    /// router skipped.
    pub taps: Vec<Option<Var>>,
    /// Image-stream output of each MoB group.
    pub group_taps: Vec<Var>,
    pub moe: Vec<MoeTrace>,
    pub windows: Vec<WindowTrace>,
}

impl ForwardOutput {
    /// Every discrete routing choice of the pass: selected experts per
    /// token of each MoE layer, then each MoB window start.
    pub fn routing_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for t in &self.moe {
            for sel in &t.selected {
                sig.extend_from_slice(sel);
                sig.push(usize::MAX);
            }
        }
        sig.extend(self.windows.iter().map(|w| w.decision.start));
        sig
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitModel {
    pub config: DitConfig,
    pub layout: Layout,
    pub params: Params,
}

impl DitModel {
    /// A dense model with fresh weights.
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let da = config.adaln();
        let rh = config.ffn_width();
        let mut params = Params::new();
        let init = |params: &mut Params, name: String, shape: &[usize], std: f64| {
            let t = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                rng::randn(&mut rng::stream(seed, &[rng::tag(&name)]), shape, std)
            };
            params.insert(name, t);
        };
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);

        init(&mut params, "embed.patch.w".into(), &[config.patch_dim(), h], inv(config.patch_dim()));
        init(&mut params, "embed.patch.b".into(), &[h], 0.0);
        if config.pos_embed {
            init(&mut params, "embed.pos".into(), &[config.img_tokens(), h], 0.1);
        }
        init(&mut params, "embed.tok".into(), &[config.vocab, h], 0.5);
        init(&mut params, "cond.time.w1".into(), &[h, da], inv(h));
        init(&mut params, "cond.time.b1".into(), &[da], 0.0);
        init(&mut params, "cond.time.w2".into(), &[da, da], inv(da));
        init(&mut params, "cond.time.b2".into(), &[da], 0.0);
        init(&mut params, "cond.text.w".into(), &[h, da], inv(h));
        init(&mut params, "cond.text.b".into(), &[da], 0.0);

        let mut layout = Layout::default();
        for l in 0..config.n_blocks() {
            let streams: &[Stream] = match config.block_kind(l) {
                BlockKind::Double => &[Stream::Image, Stream::Text],
                BlockKind::Single => &[Stream::Joint],
            };
            for &s in streams {
                let p = stream_prefix(l, s);
                init(&mut params, format!("{p}.mod.w"), &[da, 6 * h], 0.0);
                init(&mut params, format!("{p}.mod.b"), &[6 * h], 0.0);
                init(&mut params, format!("{p}.qkv.w"), &[h, 3 * h], inv(h));
                init(&mut params, format!("{p}.qkv.b"), &[3 * h], 0.0);
                init(&mut params, format!("{p}.proj.w"), &[h, h], inv(h));
                init(&mut params, format!("{p}.proj.b"), &[h], 0.0);
                let slot = FfnSlot { block: l, stream: s };
                let f = slot.prefix();
                init(&mut params, format!("{f}.w1"), &[h, rh], inv(h));
                init(&mut params, format!("{f}.b1"), &[rh], 0.0);
                init(&mut params, format!("{f}.w2"), &[rh, h], inv(rh));
                init(&mut params, format!("{f}.b2"), &[h], 0.0);
                layout.ffn.push(FfnEntry {
                    slot,
                    kind: FfnKind::Dense,
                });
            }
        }
        init(&mut params, "final.mod.w".into(), &[da, 2 * h], 0.0);
        init(&mut params, "final.mod.b".into(), &[2 * h], 0.0);
        init(&mut params, "final.head.w".into(), &[h, config.patch_dim()], inv(h));
        init(&mut params, "final.head.b".into(), &[config.patch_dim()], 0.0);

        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn block_streams(&self, l: usize) -> &'static [Stream] {
        match self.config.block_kind(l) {
            BlockKind::Double => &[Stream::Image, Stream::Text],
            BlockKind::Single => &[Stream::Joint],
        }
    }

    pub fn ffn_slots(&self, l: usize) -> Vec<FfnSlot> {
        self.block_streams(l)
            .iter()
            .map(|&stream| FfnSlot { block: l, stream })
            .collect()
    }

    /// Checks the input contract of [`DitModel::forward`].
    pub fn check_inputs(&self, x_t: &Tensor, prompt: &[usize], t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(contract(format!("timestep {t} outside [0, 1]")));
        }
        if x_t.shape() != self.config.latent_shape() {
            return Err(Error::Shape {
                op: "model_forward",
                lhs: x_t.shape().to_vec(),
                rhs: self.config.latent_shape().to_vec(),
            });
        }
        if prompt.len() != self.config.text_len {
            return Err(contract(format!(
                "prompt has {} tokens, model expects {}",
                prompt.len(),
                self.config.text_len
            )));
        }
        if let Some(&tok) = prompt.iter().find(|&&tok| tok >= self.config.vocab) {
            return Err(contract(format!("token {tok} outside vocabulary")));
        }
        Ok(())
    }

    /// Full forward pass; `x_t` is the noisy latent `[C, H, W]`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x_t: &Tensor,
        prompt: &[usize],
        t: f64,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.check_inputs(x_t, prompt, t)?;
        let cfg = &self.config;
        let y = self.global_embedding(ctx, t, prompt)?;
        let x = self.embed_image(ctx, x_t)?;
        let c = self.embed_text(ctx, prompt)?;

        let mut out = ForwardOutput {
            velocity: x,
            embed: x,
            taps: vec![None; cfg.n_blocks()],
            group_taps: Vec::new(),
            moe: Vec::new(),
            windows: Vec::new(),
        };
        let mut state = StreamState::Dual { x, c };
        let mut l = 0;
        while l < cfg.n_blocks() {
            if l == cfg.n_double {
                state = self.join_streams(ctx, state)?;
            }
            if let Some(g) = self.layout.groups.iter().position(|g| g.start == l) {
                let spec = self.layout.groups[g].clone();
                state = mob::mob_forward(ctx, self, g, &spec, state, y, opts, &mut out)?;
                l = spec.start + spec.len;
            } else {
                state = self.apply_block(ctx, l, state, y, opts, &mut out.moe)?;
                out.taps[l] = Some(self.image_features(ctx, state)?);
                l += 1;
            }
        }
        let x_img = self.image_features(ctx, state)?;
        out.velocity = self.output_head(ctx, x_img, y)?;
        Ok(out)
    }

    /// Velocity prediction without gradients.
    pub fn predict(&self, x_t: &Tensor, prompt: &[usize], t: f64, opts: ForwardOptions) -> Result<Tensor> {
        let mut ctx = Ctx::eval(&self.params);
        let out = self.forward(&mut ctx, x_t, prompt, t, opts)?;
        Ok(ctx.value(out.velocity).clone())
    }

    /// Global AdaLN embedding `y` `[1 × adaln_dim]` from the timestep and
    /// the mean prompt-token embedding.
    pub fn global_embedding(&self, ctx: &mut Ctx, t: f64, prompt: &[usize]) -> Result<Var> {
        let feats = ctx.constant(timestep_features(t, self.config.hidden));
        let w1 = ctx.p("cond.time.w1")?;
        let b1 = ctx.p("cond.time.b1")?;
        let w2 = ctx.p("cond.time.w2")?;
        let b2 = ctx.p("cond.time.b2")?;
        let h1 = ctx.tape.linear(feats, w1, Some(b1))?;
        let h1 = ctx.tape.silu(h1)?;
        let time = ctx.tape.linear(h1, w2, Some(b2))?;

        let tokens = self.embed_text(ctx, prompt)?;
        let pooled = ctx.tape.mean_rows(tokens)?;
        let tw = ctx.p("cond.text.w")?;
        let tb = ctx.p("cond.text.b")?;
        let text = ctx.tape.linear(pooled, tw, Some(tb))?;
        ctx.tape.add(time, text)
    }

    fn embed_text(&self, ctx: &mut Ctx, prompt: &[usize]) -> Result<Var> {
        let table = ctx.p("embed.tok")?;
        ctx.tape.gather_rows(table, prompt)
    }

    fn embed_image(&self, ctx: &mut Ctx, x_t: &Tensor) -> Result<Var> {
        let patches = ctx.constant(patchify(&self.config, x_t)?);
        let w = ctx.p("embed.patch.w")?;
        let b = ctx.p("embed.patch.b")?;
        let x = ctx.tape.linear(patches, w, Some(b))?;
        if self.config.pos_embed {
            let pos = ctx.p("embed.pos")?;
            ctx.tape.add(x, pos)
        } else {
            Ok(x)
        }
    }

    /// `[c; x]` concatenation entering the single-stream blocks.
    pub fn join_streams(&self, ctx: &mut Ctx, state: StreamState) -> Result<StreamState> {
        match state {
            StreamState::Dual { x, c } => Ok(StreamState::Joint {
                xc: ctx.tape.concat_rows(&[c, x])?,
            }),
            joint => Ok(joint),
        }
    }

    /// Image-stream features of a state (the image rows of a joint state).
    pub fn image_features(&self, ctx: &mut Ctx, state: StreamState) -> Result<Var> {
        match state {
            StreamState::Dual { x, .. } => Ok(x),
            StreamState::Joint { xc } => {
                ctx.tape
                    .slice_rows(xc, self.config.text_len, self.config.img_tokens())
            }
        }
    }

    /// Text-stream features of a state.
    pub fn text_features(&self, ctx: &mut Ctx, state: StreamState) -> Result<Var> {
        match state {
            StreamState::Dual { c, .. } => Ok(c),
            StreamState::Joint { xc } => ctx.tape.slice_rows(xc, 0, self.config.text_len),
        }
    }

    /// Runs block `l` on `state`, joining the streams first when a single
    /// block receives a dual state.
    pub fn apply_block(
        &self,
        ctx: &mut Ctx,
        l: usize,
        state: StreamState,
        y: Var,
        opts: ForwardOptions,
        traces: &mut Vec<MoeTrace>,
    ) -> Result<StreamState> {
        match (self.config.block_kind(l), state) {
            (BlockKind::Double, StreamState::Dual { x, c }) => {
                let (x, c) = self.double_block_forward(ctx, l, x, c, y, opts, traces)?;
                Ok(StreamState::Dual { x, c })
            }
            (BlockKind::Single, state) => {
                let xc = match state {
                    StreamState::Joint { xc } => xc,
                    StreamState::Dual { x, c } => ctx.tape.concat_rows(&[c, x])?,
                };
                Ok(StreamState::Joint {
                    xc: self.single_block_forward(ctx, l, xc, y, opts, traces)?,
                })
            }
            (BlockKind::Double, StreamState::Joint { .. }) => Err(contract(format!(
                "double block {l} cannot run after the streams were joined"
            ))),
        }
    }

    fn modulation(&self, ctx: &mut Ctx, prefix: &str, y: Var, chunks: usize) -> Result<Vec<Var>> {
        let w = ctx.p(&format!("{prefix}.mod.w"))?;
        let b = ctx.p(&format!("{prefix}.mod.b"))?;
        let (rows, _) = ctx.value(w).dims2();
        if ctx.value(y).numel() != rows {
            return Err(config(format!(
                "{prefix}: global embedding has width {}, modulation expects {rows}",
                ctx.value(y).numel()
            )));
        }
        let ys = ctx.tape.silu(y)?;
        let m = ctx.tape.linear(ys, w, Some(b))?;
        let h = self.config.hidden;
        (0..chunks).map(|i| ctx.tape.slice_cols(m, i * h, h)).collect()
    }

    fn qkv(&self, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<[Var; 3]> {
        let w = ctx.p(&format!("{prefix}.qkv.w"))?;
        let b = ctx.p(&format!("{prefix}.qkv.b"))?;
        let qkv = ctx.tape.linear(x, w, Some(b))?;
        let h = self.config.hidden;
        Ok([
            ctx.tape.slice_cols(qkv, 0, h)?,
            ctx.tape.slice_cols(qkv, h, h)?,
            ctx.tape.slice_cols(qkv, 2 * h, h)?,
        ])
    }

    fn attention(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var) -> Result<Var> {
        let heads = self.config.heads;
        let hd = self.config.hidden / heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = ctx.tape.slice_cols(q, i * hd, hd)?;
            let kh = ctx.tape.slice_cols(k, i * hd, hd)?;
            let vh = ctx.tape.slice_cols(v, i * hd, hd)?;
            let kt = ctx.tape.transpose(kh)?;
            let s = ctx.tape.matmul(qh, kt)?;
            let s = ctx.tape.scale(s, scale)?;
            let p = ctx.tape.softmax_lastdim(s)?;
            outs.push(ctx.tape.matmul(p, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            ctx.tape.concat_cols(&outs)
        }
    }

    fn proj(&self, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.p(&format!("{prefix}.proj.w"))?;
        let b = ctx.p(&format!("{prefix}.proj.b"))?;
        ctx.tape.linear(x, w, Some(b))
    }

    /// FFN at `slot`, dense or MoE according to the layout.
    pub fn ffn(
        &self,
        ctx: &mut Ctx,
        slot: FfnSlot,
        x: Var,
        opts: ForwardOptions,
        traces: &mut Vec<MoeTrace>,
    ) -> Result<Var> {
        match self.layout.kind(&slot) {
            Some(FfnKind::Dense) | None => moe::mlp(ctx, &slot.prefix(), x, true),
            Some(FfnKind::Moe(cfg)) => {
                let k = opts.topk.unwrap_or(cfg.top_k);
                let trace = moe::moe_forward(ctx, slot, x, cfg, k)?;
                let y = trace.output;
                traces.push(trace);
                Ok(y)
            }
        }
    }

    /// Double-stream block: per-stream modulation, projections and FFNs,
    /// joint attention over `[c; x]`.
    #[allow(clippy::too_many_arguments)]
    pub fn double_block_forward(
        &self,
        ctx: &mut Ctx,
        l: usize,
        x: Var,
        c: Var,
        y: Var,
        opts: ForwardOptions,
        traces: &mut Vec<MoeTrace>,
    ) -> Result<(Var, Var)> {
        let pi = stream_prefix(l, Stream::Image);
        let pt = stream_prefix(l, Stream::Text);
        let mx = self.modulation(ctx, &pi, y, 6)?;
        let mc = self.modulation(ctx, &pt, y, 6)?;
        let n_txt = ctx.value(c).dims2().0;
        let n_img = ctx.value(x).dims2().0;

        let xn = ctx.tape.layer_norm(x)?;
        let xn = ctx.tape.modulate(xn, mx[0], mx[1])?;
        let cn = ctx.tape.layer_norm(c)?;
        let cn = ctx.tape.modulate(cn, mc[0], mc[1])?;
        let [qx, kx, vx] = self.qkv(ctx, &pi, xn)?;
        let [qc, kc, vc] = self.qkv(ctx, &pt, cn)?;
        let q = ctx.tape.concat_rows(&[qc, qx])?;
        let k = ctx.tape.concat_rows(&[kc, kx])?;
        let v = ctx.tape.concat_rows(&[vc, vx])?;
        let att = self.attention(ctx, q, k, v)?;
        let att_c = ctx.tape.slice_rows(att, 0, n_txt)?;
        let att_x = ctx.tape.slice_rows(att, n_txt, n_img)?;
        let dx = self.proj(ctx, &pi, att_x)?;
        let dc = self.proj(ctx, &pt, att_c)?;
        let x = ctx.tape.gated_residual(x, mx[2], dx)?;
        let c = ctx.tape.gated_residual(c, mc[2], dc)?;

        let xn = ctx.tape.layer_norm(x)?;
        let xn = ctx.tape.modulate(xn, mx[3], mx[4])?;
        let fx = self.ffn(ctx, FfnSlot { block: l, stream: Stream::Image }, xn, opts, traces)?;
        let x = ctx.tape.gated_residual(x, mx[5], fx)?;
        let cn = ctx.tape.layer_norm(c)?;
        let cn = ctx.tape.modulate(cn, mc[3], mc[4])?;
        let fc = self.ffn(ctx, FfnSlot { block: l, stream: Stream::Text }, cn, opts, traces)?;
        let c = ctx.tape.gated_residual(c, mc[5], fc)?;
        Ok((x, c))
    }

    /// Single-stream block over the concatenated tokens: one shared
    /// attention and one shared FFN.
    pub fn single_block_forward(
        &self,
        ctx: &mut Ctx,
        l: usize,
        xc: Var,
        y: Var,
        opts: ForwardOptions,
        traces: &mut Vec<MoeTrace>,
    ) -> Result<Var> {
        let p = stream_prefix(l, Stream::Joint);
        let m = self.modulation(ctx, &p, y, 6)?;
        let hn = ctx.tape.layer_norm(xc)?;
        let hn = ctx.tape.modulate(hn, m[0], m[1])?;
        let [q, k, v] = self.qkv(ctx, &p, hn)?;
        let att = self.attention(ctx, q, k, v)?;
        let d = self.proj(ctx, &p, att)?;
        let xc = ctx.tape.gated_residual(xc, m[2], d)?;
        let hn = ctx.tape.layer_norm(xc)?;
        let hn = ctx.tape.modulate(hn, m[3], m[4])?;
        let f = self.ffn(ctx, FfnSlot { block: l, stream: Stream::Joint }, hn, opts, traces)?;
        ctx.tape.gated_residual(xc, m[5], f)
    }

    fn output_head(&self, ctx: &mut Ctx, x: Var, y: Var) -> Result<Var> {
        let m = self.modulation(ctx, "final", y, 2)?;
        let xn = ctx.tape.layer_norm(x)?;
        let xn = ctx.tape.modulate(xn, m[0], m[1])?;
        let w = ctx.p("final.head.w")?;
        let b = ctx.p("final.head.b")?;
        let tokens = ctx.tape.linear(xn, w, Some(b))?;
        let idx = unpatchify_index(&self.config);
        ctx.tape.take(tokens, &idx, &self.config.latent_shape())
    }
}

/// Sinusoidal timestep features `[1 × dim]`, timestep scaled by 1000.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        let arg = 1000.0 * t * freq;
        data[i] = libm::cos(arg);
        data[half + i] = libm::sin(arg);
    }
    Tensor::matrix(1, dim, data).expect("row vector")
}

/// `[C, H, W]` image to `[tokens × p·p·C]` patches in raster order; each
/// patch vector is ordered `(channel, dy, dx)`.
pub fn patchify(cfg: &DitConfig, image: &Tensor) -> Result<Tensor> {
    if image.shape() != cfg.latent_shape() {
        return Err(Error::Shape {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: cfg.latent_shape().to_vec(),
        });
    }
    let idx = unpatchify_index(cfg);
    let mut out = vec![0.0; image.numel()];
    for (pixel, &src) in idx.iter().enumerate() {
        out[src] = image.data()[pixel];
    }
    Tensor::matrix(cfg.img_tokens(), cfg.patch_dim(), out)
}

/// For each latent element (in `[C, H, W]` order), its flat position in the
/// patch-token matrix.
pub fn unpatchify_index(cfg: &DitConfig) -> Vec<usize> {
    let (p, s, ch) = (cfg.patch_size, cfg.image_size, cfg.channels);
    let grid = cfg.grid();
    let pd = cfg.patch_dim();
    let mut idx = Vec::with_capacity(ch * s * s);
    for c in 0..ch {
        for row in 0..s {
            for col in 0..s {
                let token = (row / p) * grid + col / p;
                let feat = c * p * p + (row % p) * p + col % p;
                idx.push(token * pd + feat);
            }
        }
    }
    idx
}
