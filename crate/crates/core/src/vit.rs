//! The vision transformer: canvas symbols are embedded per pixel, grouped
//! into `p x p` patches and linearly projected to tokens; a learned task token
//! is prepended; pre-norm transformer blocks with optional 2D rotary
//! positions and background key masking follow; a linear head maps every
//! patch token back to `p * p` twelve-way pixel logits.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Canvas, ProbField, BG, NUM_SYMBOLS};
use crate::nn::attention::{attention_backward, attention_forward, AttentionCache, RopeTable, MASK_OFFSET, ROPE_BASE};
use crate::nn::ops::{
    apply_mask, cross_entropy_masked_raw, dropout_mask, embedding_backward, embedding_forward, gelu, gelu_grad,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, LayerNormCache,
};
use crate::nn::params::{truncated_normal, INIT_STD};
use crate::nn::{adam_step, AdamState, NnError, ParamId, ParamStore, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("task index {index} out of range ({count} task embeddings)")]
    TaskIndexOutOfRange { index: usize, count: usize },
    #[error("canvas is {found}x{found}, model expects {expected}x{expected}")]
    CanvasSize { expected: usize, found: usize },
    #[error("parameter `{0}` missing or misshapen")]
    MissingParameter(String),
    #[error("every sample in the batch had an empty loss mask")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    #[default]
    Rope2d,
    Abs2d,
    Rope1d,
    Abs1d,
    None,
}

/// Which canvas cells contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Cells where the input canvas is not background.
    InputForeground,
    /// Cells where either the input or the target is not background.
    InputOrTarget,
    /// Every cell.
    #[default]
    Full,
}

impl LossMask {
    pub fn cells(self, input: &Canvas, target: &Canvas) -> Vec<bool> {
        match self {
            LossMask::InputForeground => input.foreground_mask(),
            LossMask::InputOrTarget => {
                input.cells().iter().zip(target.cells()).map(|(&a, &b)| a != BG || b != BG).collect()
            }
            LossMask::Full => vec![true; input.cells().len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Dropout on the MLP hidden activations.
    pub mlp_dropout: f32,
    /// Dropout on the attention output projection.
    pub attn_dropout: f32,
    pub patch_size: usize,
    pub canvas_size: usize,
    pub num_symbols: usize,
    pub pixel_embed_dim: usize,
    pub num_task_embeddings: usize,
    pub positional_mode: PositionalMode,
    /// Mask all-background patches as attention keys.
    pub key_masking: bool,
    pub rope_base: f32,
    pub ln_eps: f32,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig::paper(512, 10, 8)
    }
}

impl VitConfig {
    /// The 64x64-canvas, 2x2-patch configurations (6M/18M/66M at
    /// 384/5/8, 512/10/8, 768/20/12), with one task token per ARC-1 training task.
    pub fn paper(hidden_dim: usize, depth: usize, heads: usize) -> VitConfig {
        VitConfig {
            hidden_dim,
            depth,
            heads,
            mlp_hidden: 512,
            mlp_dropout: 0.1,
            attn_dropout: 0.1,
            patch_size: 2,
            canvas_size: 64,
            num_symbols: NUM_SYMBOLS,
            pixel_embed_dim: hidden_dim,
            num_task_embeddings: 400,
            positional_mode: PositionalMode::Rope2d,
            key_masking: true,
            rope_base: ROPE_BASE,
            ln_eps: 1e-5,
        }
    }

    /// A small model for CPU-scale experiments.
    pub fn tiny(canvas_size: usize, hidden_dim: usize, depth: usize, heads: usize) -> VitConfig {
        VitConfig {
            hidden_dim,
            depth,
            heads,
            mlp_hidden: 2 * hidden_dim,
            mlp_dropout: 0.0,
            attn_dropout: 0.0,
            patch_size: 2,
            canvas_size,
            num_symbols: NUM_SYMBOLS,
            pixel_embed_dim: 16,
            num_task_embeddings: 1,
            positional_mode: PositionalMode::Rope2d,
            key_masking: true,
            rope_base: ROPE_BASE,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.num_symbols != NUM_SYMBOLS {
            return err(format!("num_symbols must be {NUM_SYMBOLS}"));
        }
        if self.patch_size == 0 || self.canvas_size == 0 || self.canvas_size % self.patch_size != 0 {
            return err(format!("canvas {} not divisible by patch {}", self.canvas_size, self.patch_size));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return err(format!("hidden {} not divisible by {} heads", self.hidden_dim, self.heads));
        }
        let hd = self.head_dim();
        match self.positional_mode {
            PositionalMode::Rope2d if hd % 4 != 0 => return err(format!("rope2d needs head dim divisible by 4, got {hd}")),
            PositionalMode::Rope1d if hd % 2 != 0 => return err(format!("rope1d needs an even head dim, got {hd}")),
            PositionalMode::Abs2d if self.hidden_dim % 2 != 0 => return err("abs2d needs an even hidden dim".into()),
            _ => {}
        }
        if self.depth == 0 || self.mlp_hidden == 0 || self.pixel_embed_dim == 0 || self.num_task_embeddings == 0 {
            return err("depth, mlp_hidden, pixel_embed_dim and num_task_embeddings must be positive".into());
        }
        for (name, rate) in [("mlp_dropout", self.mlp_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return err(format!("{name} must be in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Patches per canvas side.
    pub fn grid_side(&self) -> usize {
        self.canvas_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn patch_in(&self) -> usize {
        self.patch_size * self.patch_size * self.pixel_embed_dim
    }

    fn patch_out(&self) -> usize {
        self.patch_size * self.patch_size * NUM_SYMBOLS
    }
}

/// Exact number of scalar parameters of a model with this configuration.
pub fn count_params(c: &VitConfig) -> usize {
    let h = c.hidden_dim;
    let pos = match c.positional_mode {
        PositionalMode::Abs2d => 2 * c.grid_side() * (h / 2),
        PositionalMode::Abs1d => c.num_patches() * h,
        _ => 0,
    };
    let block = 4 * h + (h * 3 * h + 3 * h) + (h * h + h) + (h * c.mlp_hidden + c.mlp_hidden) + (c.mlp_hidden * h + h);
    NUM_SYMBOLS * c.pixel_embed_dim
        + c.patch_in() * h
        + h
        + c.num_task_embeddings * h
        + pos
        + c.depth * block
        + 2 * h
        + h * c.patch_out()
        + c.patch_out()
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    pixel_embed: ParamId,
    patch_proj: (ParamId, ParamId),
    task_embed: ParamId,
    pos: Option<(ParamId, Option<ParamId>)>,
    blocks: Vec<BlockIds>,
    final_ln: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

/// Expected parameter names and shapes, in registration order.
fn parameter_specs(c: &VitConfig) -> Vec<(String, Vec<usize>)> {
    let h = c.hidden_dim;
    let mut v = vec![
        ("pixel_embed".to_string(), vec![NUM_SYMBOLS, c.pixel_embed_dim]),
        ("patch_proj.weight".to_string(), vec![c.patch_in(), h]),
        ("patch_proj.bias".to_string(), vec![h]),
        ("task_embed".to_string(), vec![c.num_task_embeddings, h]),
    ];
    match c.positional_mode {
        PositionalMode::Abs2d => {
            v.push(("pos_embed.col".into(), vec![c.grid_side(), h / 2]));
            v.push(("pos_embed.row".into(), vec![c.grid_side(), h / 2]));
        }
        PositionalMode::Abs1d => v.push(("pos_embed".into(), vec![c.num_patches(), h])),
        _ => {}
    }
    for b in 0..c.depth {
        let p = |s: &str| format!("blocks.{b}.{s}");
        v.push((p("ln1.weight"), vec![h]));
        v.push((p("ln1.bias"), vec![h]));
        v.push((p("attn.qkv.weight"), vec![h, 3 * h]));
        v.push((p("attn.qkv.bias"), vec![3 * h]));
        v.push((p("attn.proj.weight"), vec![h, h]));
        v.push((p("attn.proj.bias"), vec![h]));
        v.push((p("ln2.weight"), vec![h]));
        v.push((p("ln2.bias"), vec![h]));
        v.push((p("mlp.fc1.weight"), vec![h, c.mlp_hidden]));
        v.push((p("mlp.fc1.bias"), vec![c.mlp_hidden]));
        v.push((p("mlp.fc2.weight"), vec![c.mlp_hidden, h]));
        v.push((p("mlp.fc2.bias"), vec![h]));
    }
    v.push(("final_ln.weight".into(), vec![h]));
    v.push(("final_ln.bias".into(), vec![h]));
    v.push(("head.weight".into(), vec![h, c.patch_out()]));
    v.push(("head.bias".into(), vec![c.patch_out()]));
    v
}

impl Layout {
    fn resolve(c: &VitConfig, ps: &ParamStore) -> Result<Layout, ModelError> {
        for (name, shape) in parameter_specs(c) {
            let id = ps.id(&name).ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if ps.param(id).value.shape() != shape.as_slice() {
                return Err(ModelError::MissingParameter(name));
            }
        }
        let id = |n: &str| ps.id(n).expect("checked above");
        let pair = |n: &str| (id(&format!("{n}.weight")), id(&format!("{n}.bias")));
        let pos = match c.positional_mode {
            PositionalMode::Abs2d => Some((id("pos_embed.col"), Some(id("pos_embed.row")))),
            PositionalMode::Abs1d => Some((id("pos_embed"), None)),
            _ => None,
        };
        let blocks = (0..c.depth)
            .map(|b| BlockIds {
                ln1: pair(&format!("blocks.{b}.ln1")),
                qkv: pair(&format!("blocks.{b}.attn.qkv")),
                proj: pair(&format!("blocks.{b}.attn.proj")),
                ln2: pair(&format!("blocks.{b}.ln2")),
                fc1: pair(&format!("blocks.{b}.mlp.fc1")),
                fc2: pair(&format!("blocks.{b}.mlp.fc2")),
            })
            .collect();
        Ok(Layout {
            pixel_embed: id("pixel_embed"),
            patch_proj: pair("patch_proj"),
            task_embed: id("task_embed"),
            pos,
            blocks,
            final_ln: pair("final_ln"),
            head: pair("head"),
        })
    }
}

/// Patch tokens of one canvas.
#[derive(Debug, Clone)]
pub struct TokenizedCanvas {
    /// `[num_patches, hidden]`, after projection (no position or task token).
    pub tokens: Tensor,
    /// Patch `(row, col)` of every token.
    pub coords: Vec<(usize, usize)>,
    /// True where all pixels of the patch are background.
    pub patch_bg_mask: Vec<bool>,
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Vec<f32>,
    attn: AttentionCache,
    attn_out: Vec<f32>,
    drop_attn: Option<Vec<f32>>,
    ln2: LayerNormCache,
    b: Vec<f32>,
    pre_act: Vec<f32>,
    act: Vec<f32>,
    drop_mlp: Option<Vec<f32>>,
}

/// Saved activations of one forward pass.
pub struct ForwardCache {
    task_index: usize,
    symbol_ids: Vec<usize>,
    embedded: Vec<f32>,
    masked_keys: Vec<bool>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    final_out: Vec<f32>,
}

impl ForwardCache {
    /// Rotated queries/keys and softmax weights of block `layer`.
    pub fn attention(&self, layer: usize) -> Option<&AttentionCache> {
        self.blocks.get(layer).map(|b| &b.attn)
    }

    pub fn masked_keys(&self) -> &[bool] {
        &self.masked_keys
    }
}

#[derive(Debug, Clone)]
pub struct VitModel {
    config: VitConfig,
    params: ParamStore,
    layout: Layout,
    rope: Option<RopeTable>,
}

impl VitModel {
    /// Random initialization: truncated normal (std 0.02) for weights and
    /// tables, zeros for biases, ones for layer-norm scales.
    pub fn new<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<VitModel, ModelError> {
        config.validate()?;
        let mut ps = ParamStore::new();
        for (name, shape) in parameter_specs(&config) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.contains("ln") && name.ends_with(".weight") {
                Tensor::from_vec(&shape, vec![1.0; shape.iter().product()])?
            } else {
                truncated_normal(rng, &shape, INIT_STD)
            };
            ps.add(name, t)?;
        }
        VitModel::from_params(config, ps)
    }

    pub fn from_params(config: VitConfig, params: ParamStore) -> Result<VitModel, ModelError> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        if params.len() != parameter_specs(&config).len() {
            return Err(ModelError::Config("unexpected extra parameters".into()));
        }
        let rope = build_rope(&config)?;
        Ok(VitModel { config, params, layout, rope })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Task embedding table `[num_task_embeddings, hidden]`.
    pub fn task_embeddings(&self) -> &Tensor {
        &self.params.param(self.layout.task_embed).value
    }

    pub fn task_embed_id(&self) -> ParamId {
        self.layout.task_embed
    }

    /// Swaps in a freshly initialized task table with `count` rows.
    pub fn reset_task_embeddings<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) {
        let t = truncated_normal(rng, &[count, self.config.hidden_dim], INIT_STD);
        self.params.replace(self.layout.task_embed, t);
        self.config.num_task_embeddings = count;
    }

    fn check_canvas(&self, c: &Canvas) -> Result<(), ModelError> {
        if c.size() != self.config.canvas_size {
            return Err(ModelError::CanvasSize { expected: self.config.canvas_size, found: c.size() });
        }
        Ok(())
    }

    fn symbol_ids(&self, c: &Canvas) -> (Vec<usize>, Vec<bool>) {
        let p = self.config.patch_size;
        let g = self.config.grid_side();
        let mut ids = Vec::with_capacity(c.size() * c.size());
        let mut bg = Vec::with_capacity(g * g);
        for pr in 0..g {
            for pc in 0..g {
                let mut all_bg = true;
                for dy in 0..p {
                    for dx in 0..p {
                        let s = c.get(pr * p + dy, pc * p + dx);
                        all_bg &= s == BG;
                        ids.push(s as usize);
                    }
                }
                bg.push(all_bg);
            }
        }
        (ids, bg)
    }

    /// Embeds pixels, concatenates each patch's embeddings in row-major
    /// order and projects to the hidden width.
    pub fn tokenize(&self, c: &Canvas) -> Result<TokenizedCanvas, ModelError> {
        self.check_canvas(c)?;
        let cfg = &self.config;
        let (ids, bg) = self.symbol_ids(c);
        let emb = embedding_forward(self.params.value(self.layout.pixel_embed), cfg.pixel_embed_dim, &ids);
        let n = cfg.num_patches();
        let (w, b) = self.layout.patch_proj;
        let tokens = linear_forward(&emb, self.params.value(w), Some(self.params.value(b)), n, cfg.patch_in(), cfg.hidden_dim);
        let g = cfg.grid_side();
        Ok(TokenizedCanvas {
            tokens: Tensor::from_vec(&[n, cfg.hidden_dim], tokens)?,
            coords: (0..n).map(|i| (i / g, i % g)).collect(),
            patch_bg_mask: bg,
        })
    }

    /// Inference-mode forward: `[S, S, 12]` logits.
    pub fn forward(&self, c: &Canvas, task_index: usize) -> Result<Tensor, ModelError> {
        let (logits, _) = self.run(c, task_index, None, false)?;
        Ok(logits)
    }

    /// Forward pass keeping activations; dropout is active when `rng` is given.
    pub fn forward_cached(
        &self,
        c: &Canvas,
        task_index: usize,
        rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<(Tensor, ForwardCache), ModelError> {
        let (logits, cache) = self.run(c, task_index, rng, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    pub fn predict_probs(&self, c: &Canvas, task_index: usize) -> Result<ProbField, ModelError> {
        let logits = self.forward(c, task_index)?;
        Ok(ProbField::from_logits(self.config.canvas_size, logits.data()))
    }

    fn run(
        &self,
        c: &Canvas,
        task_index: usize,
        mut rng: Option<&mut (dyn RngCore + '_)>,
        keep: bool,
    ) -> Result<(Tensor, Option<ForwardCache>), ModelError> {
        self.check_canvas(c)?;
        let cfg = &self.config;
        if task_index >= cfg.num_task_embeddings {
            return Err(ModelError::TaskIndexOutOfRange { index: task_index, count: cfg.num_task_embeddings });
        }
        let ps = &self.params;
        let (h, n) = (cfg.hidden_dim, cfg.num_patches());
        let t = n + 1;
        let (ids, bg) = self.symbol_ids(c);
        let embedded = embedding_forward(ps.value(self.layout.pixel_embed), cfg.pixel_embed_dim, &ids);
        let (pw, pb) = self.layout.patch_proj;
        let patches = linear_forward(&embedded, ps.value(pw), Some(ps.value(pb)), n, cfg.patch_in(), h);

        let mut x = Vec::with_capacity(t * h);
        x.extend_from_slice(&ps.value(self.layout.task_embed)[task_index * h..(task_index + 1) * h]);
        x.extend_from_slice(&patches);
        self.add_absolute_positions(&mut x[h..]);

        let mut masked_keys = Vec::with_capacity(t);
        masked_keys.push(false);
        masked_keys.extend(bg.iter().map(|&b| b && cfg.key_masking));

        let mut caches = Vec::with_capacity(if keep { cfg.depth } else { 0 });
        for blk in &self.layout.blocks {
            let x_in = x;
            let (a, ln1) = layer_norm_forward(&x_in, ps.value(blk.ln1.0), ps.value(blk.ln1.1), h, cfg.ln_eps);
            let qkv = linear_forward(&a, ps.value(blk.qkv.0), Some(ps.value(blk.qkv.1)), t, h, 3 * h);
            let (q, k, v) = split_qkv(&qkv, t, h);
            let (attn_out, attn) = attention_forward(q, k, v, t, h, cfg.heads, &masked_keys, self.rope.as_ref());
            let mut o = linear_forward(&attn_out, ps.value(blk.proj.0), Some(ps.value(blk.proj.1)), t, h, h);
            let drop_attn = match rng.as_deref_mut() {
                Some(r) => dropout_mask(r, o.len(), cfg.attn_dropout, true),
                None => None,
            };
            apply_mask(&mut o, drop_attn.as_ref());
            let x_mid: Vec<f32> = x_in.iter().zip(&o).map(|(a, b)| a + b).collect();

            let (b, ln2) = layer_norm_forward(&x_mid, ps.value(blk.ln2.0), ps.value(blk.ln2.1), h, cfg.ln_eps);
            let pre_act = linear_forward(&b, ps.value(blk.fc1.0), Some(ps.value(blk.fc1.1)), t, h, cfg.mlp_hidden);
            let mut act: Vec<f32> = pre_act.iter().map(|&v| gelu(v)).collect();
            let drop_mlp = match rng.as_deref_mut() {
                Some(r) => dropout_mask(r, act.len(), cfg.mlp_dropout, true),
                None => None,
            };
            apply_mask(&mut act, drop_mlp.as_ref());
            let m = linear_forward(&act, ps.value(blk.fc2.0), Some(ps.value(blk.fc2.1)), t, cfg.mlp_hidden, h);
            x = x_mid.iter().zip(&m).map(|(a, b)| a + b).collect();
            if keep {
                caches.push(BlockCache {
                    ln1,
                    a,
                    attn,
                    attn_out,
                    drop_attn,
                    ln2,
                    b,
                    pre_act,
                    act,
                    drop_mlp,
                });
            }
        }
        let (fo, final_ln) = layer_norm_forward(&x, ps.value(self.layout.final_ln.0), ps.value(self.layout.final_ln.1), h, cfg.ln_eps);
        let (hw, hb) = self.layout.head;
        let per_patch = linear_forward(&fo[h..], ps.value(hw), Some(ps.value(hb)), n, h, cfg.patch_out());
        let logits = self.scatter_to_pixels(&per_patch);
        let cache = keep.then(|| ForwardCache {
            task_index,
            symbol_ids: ids,
            embedded,
            masked_keys,
            blocks: caches,
            final_ln,
            final_out: fo,
        });
        let s = cfg.canvas_size;
        Ok((Tensor::from_vec(&[s, s, NUM_SYMBOLS], logits)?, cache))
    }

    fn add_absolute_positions(&self, patches: &mut [f32]) {
        let cfg = &self.config;
        let h = cfg.hidden_dim;
        let g = cfg.grid_side();
        match self.layout.pos {
            Some((col, Some(row))) => {
                let (ct, rt) = (self.params.value(col), self.params.value(row));
                let half = h / 2;
                for (i, tok) in patches.chunks_mut(h).enumerate() {
                    let (pr, pc) = (i / g, i % g);
                    for j in 0..half {
                        tok[j] += ct[pc * half + j];
                        tok[half + j] += rt[pr * half + j];
                    }
                }
            }
            Some((table, None)) => {
                for (v, &p) in patches.iter_mut().zip(self.params.value(table)) {
                    *v += p;
                }
            }
            None => {}
        }
    }

    /// Per-patch `[n, p*p*12]` head outputs to row-major `[S*S, 12]` pixels.
    fn scatter_to_pixels(&self, per_patch: &[f32]) -> Vec<f32> {
        let (p, g, s) = (self.config.patch_size, self.config.grid_side(), self.config.canvas_size);
        let mut out = vec![0.0; s * s * NUM_SYMBOLS];
        for (i, patch) in per_patch.chunks(p * p * NUM_SYMBOLS).enumerate() {
            let (pr, pc) = (i / g, i % g);
            for dy in 0..p {
                for dx in 0..p {
                    let pix = (pr * p + dy) * s + pc * p + dx;
                    let src = (dy * p + dx) * NUM_SYMBOLS;
                    out[pix * NUM_SYMBOLS..(pix + 1) * NUM_SYMBOLS].copy_from_slice(&patch[src..src + NUM_SYMBOLS]);
                }
            }
        }
        out
    }

    fn gather_from_pixels(&self, pixels: &[f32]) -> Vec<f32> {
        let (p, g, s) = (self.config.patch_size, self.config.grid_side(), self.config.canvas_size);
        let mut out = vec![0.0; g * g * p * p * NUM_SYMBOLS];
        for (i, patch) in out.chunks_mut(p * p * NUM_SYMBOLS).enumerate() {
            let (pr, pc) = (i / g, i % g);
            for dy in 0..p {
                for dx in 0..p {
                    let pix = (pr * p + dy) * s + pc * p + dx;
                    let dst = (dy * p + dx) * NUM_SYMBOLS;
                    patch[dst..dst + NUM_SYMBOLS].copy_from_slice(&pixels[pix * NUM_SYMBOLS..(pix + 1) * NUM_SYMBOLS]);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients for upstream pixel-logit gradients
    /// `dlogits` (`[S*S, 12]`).
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &[f32]) {
        let cfg = self.config.clone();
        let (h, n) = (cfg.hidden_dim, cfg.num_patches());
        let t = n + 1;
        let rope = self.rope.clone();
        let d_patch = self.gather_from_pixels(dlogits);
        let ps = &mut self.params;
        let l = &self.layout;

        let (hw, hb) = l.head;
        let mut d_final = vec![0.0; t * h];
        {
            let w = ps.value(hw).to_vec();
            let (gw, gb) = grads2(ps, hw, hb);
            let dx = linear_backward(&cache.final_out[h..], &w, &d_patch, n, h, cfg.patch_out(), gw, Some(gb));
            d_final[h..].copy_from_slice(&dx);
        }
        let mut dx = {
            let gamma = ps.value(l.final_ln.0).to_vec();
            let (gg, gb) = grads2(ps, l.final_ln.0, l.final_ln.1);
            layer_norm_backward(&cache.final_ln, &gamma, &d_final, h, gg, gb)
        };

        for (blk, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch.
            let mut d_act = {
                let w = ps.value(blk.fc2.0).to_vec();
                let (gw, gb) = grads2(ps, blk.fc2.0, blk.fc2.1);
                linear_backward(&bc.act, &w, &dx, t, cfg.mlp_hidden, h, gw, Some(gb))
            };
            apply_mask(&mut d_act, bc.drop_mlp.as_ref());
            for (g, &z) in d_act.iter_mut().zip(&bc.pre_act) {
                *g *= gelu_grad(z);
            }
            let d_b = {
                let w = ps.value(blk.fc1.0).to_vec();
                let (gw, gb) = grads2(ps, blk.fc1.0, blk.fc1.1);
                linear_backward(&bc.b, &w, &d_act, t, h, cfg.mlp_hidden, gw, Some(gb))
            };
            let d_mid_ln = {
                let gamma = ps.value(blk.ln2.0).to_vec();
                let (gg, gb) = grads2(ps, blk.ln2.0, blk.ln2.1);
                layer_norm_backward(&bc.ln2, &gamma, &d_b, h, gg, gb)
            };
            let d_mid: Vec<f32> = dx.iter().zip(&d_mid_ln).map(|(a, b)| a + b).collect();

            // Attention branch.
            let mut d_o = d_mid.clone();
            apply_mask(&mut d_o, bc.drop_attn.as_ref());
            let d_attn = {
                let w = ps.value(blk.proj.0).to_vec();
                let (gw, gb) = grads2(ps, blk.proj.0, blk.proj.1);
                linear_backward(&bc.attn_out, &w, &d_o, t, h, h, gw, Some(gb))
            };
            let (dq, dk, dv) = attention_backward(&bc.attn, &d_attn, rope.as_ref());
            let dqkv = join_qkv(&dq, &dk, &dv, t, h);
            let d_a = {
                let w = ps.value(blk.qkv.0).to_vec();
                let (gw, gb) = grads2(ps, blk.qkv.0, blk.qkv.1);
                linear_backward(&bc.a, &w, &dqkv, t, h, 3 * h, gw, Some(gb))
            };
            let d_in_ln = {
                let gamma = ps.value(blk.ln1.0).to_vec();
                let (gg, gb) = grads2(ps, blk.ln1.0, blk.ln1.1);
                layer_norm_backward(&bc.ln1, &gamma, &d_a, h, gg, gb)
            };
            dx = d_mid.iter().zip(&d_in_ln).map(|(a, b)| a + b).collect();
        }

        let ti = cache.task_index;
        for (g, &d) in ps.grad_mut(l.task_embed)[ti * h..(ti + 1) * h].iter_mut().zip(&dx[..h]) {
            *g += d;
        }
        let d_patches = &dx[h..];
        let g = cfg.grid_side();
        match l.pos {
            Some((col, Some(row))) => {
                let half = h / 2;
                for (i, tok) in d_patches.chunks(h).enumerate() {
                    let (pr, pc) = (i / g, i % g);
                    for (gv, &d) in ps.grad_mut(col)[pc * half..(pc + 1) * half].iter_mut().zip(&tok[..half]) {
                        *gv += d;
                    }
                    for (gv, &d) in ps.grad_mut(row)[pr * half..(pr + 1) * half].iter_mut().zip(&tok[half..]) {
                        *gv += d;
                    }
                }
            }
            Some((table, None)) => {
                for (gv, &d) in ps.grad_mut(table).iter_mut().zip(d_patches) {
                    *gv += d;
                }
            }
            None => {}
        }
        let (pw, pb) = l.patch_proj;
        let d_emb = {
            let w = ps.value(pw).to_vec();
            let (gw, gb) = grads2(ps, pw, pb);
            linear_backward(&cache.embedded, &w, d_patches, n, cfg.patch_in(), h, gw, Some(gb))
        };
        embedding_backward(ps.grad_mut(l.pixel_embed), cfg.pixel_embed_dim, &cache.symbol_ids, &d_emb);
    }

    /// Head-averaged attention of block `layer` from the patch holding pixel
    /// `(row, col)`: `(pre-softmax logits, softmax weights)`, each expanded to
    /// an `S x S` pixel map. The task-token key is left out.
    pub fn attention_probe(
        &self,
        c: &Canvas,
        task_index: usize,
        layer: usize,
        row: usize,
        col: usize,
    ) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
        let cfg = &self.config;
        if layer >= cfg.depth || row >= cfg.canvas_size || col >= cfg.canvas_size {
            return Err(ModelError::Config(format!(
                "probe ({layer}, {row}, {col}) outside depth {} / canvas {}",
                cfg.depth, cfg.canvas_size
            )));
        }
        let (_, cache) = self.forward_cached(c, task_index, None)?;
        let attn = cache.attention(layer).expect("layer in range");
        let (h, heads, p, g) = (cfg.hidden_dim, cfg.heads, cfg.patch_size, cfg.grid_side());
        let dh = cfg.head_dim();
        let t = cfg.num_patches() + 1;
        let query = 1 + (row / p) * g + col / p;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut logits = vec![0.0f32; cfg.num_patches()];
        let mut probs = vec![0.0f32; cfg.num_patches()];
        for hd in 0..heads {
            let q = &attn.q[query * h + hd * dh..query * h + (hd + 1) * dh];
            for key in 1..t {
                let k = &attn.k[key * h + hd * dh..key * h + (hd + 1) * dh];
                let mut s: f32 = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                if cache.masked_keys[key] {
                    s += MASK_OFFSET;
                }
                logits[key - 1] += s / heads as f32;
                probs[key - 1] += attn.probs[hd * t * t + query * t + key] / heads as f32;
            }
        }
        let expand = |v: &[f32]| {
            let s = cfg.canvas_size;
            (0..s * s).map(|i| v[(i / s / p) * g + (i % s) / p]).collect::<Vec<f32>>()
        };
        Ok((expand(&logits), expand(&probs)))
    }
}

fn build_rope(cfg: &VitConfig) -> Result<Option<RopeTable>, ModelError> {
    let g = cfg.grid_side();
    let n = cfg.num_patches();
    Ok(match cfg.positional_mode {
        PositionalMode::Rope2d => {
            let coords: Vec<_> = std::iter::once(None).chain((0..n).map(|i| Some((i / g, i % g)))).collect();
            Some(RopeTable::new_2d(cfg.head_dim(), &coords, cfg.rope_base)?)
        }
        PositionalMode::Rope1d => {
            let pos: Vec<_> = std::iter::once(None).chain((0..n).map(Some)).collect();
            Some(RopeTable::new_1d(cfg.head_dim(), &pos, cfg.rope_base)?)
        }
        _ => None,
    })
}

fn grads2(ps: &mut ParamStore, a: ParamId, b: ParamId) -> (&mut [f32], &mut [f32]) {
    assert!(a.0 < b.0);
    let (lo, hi) = ps.params_mut().split_at_mut(b.0);
    (lo[a.0].grad.data_mut(), hi[0].grad.data_mut())
}

fn split_qkv(qkv: &[f32], t: usize, h: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut q = Vec::with_capacity(t * h);
    let mut k = Vec::with_capacity(t * h);
    let mut v = Vec::with_capacity(t * h);
    for row in qkv.chunks(3 * h) {
        q.extend_from_slice(&row[..h]);
        k.extend_from_slice(&row[h..2 * h]);
        v.extend_from_slice(&row[2 * h..]);
    }
    (q, k, v)
}

fn join_qkv(q: &[f32], k: &[f32], v: &[f32], t: usize, h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * 3 * h);
    for i in 0..t {
        out.extend_from_slice(&q[i * h..(i + 1) * h]);
        out.extend_from_slice(&k[i * h..(i + 1) * h]);
        out.extend_from_slice(&v[i * h..(i + 1) * h]);
    }
    out
}

/// One supervised example: input canvas, aligned target canvas, task row.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input: Canvas,
    pub target: Canvas,
    pub task_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean masked cross-entropy over the samples that had a non-empty mask.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Zeroes gradients, then accumulates the gradient of the batch-mean loss.
pub fn loss_and_grads(
    model: &mut VitModel,
    batch: &[TrainingSample],
    mask: LossMask,
    mut rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<StepOutcome, ModelError> {
    model.params_mut().zero_grads();
    let mut total = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for s in batch {
        let cells = mask.cells(&s.input, &s.target);
        let (logits, cache) = model.forward_cached(&s.input, s.task_index, rng.as_deref_mut())?;
        match cross_entropy_masked_raw(logits.data(), NUM_SYMBOLS, s.target.cells(), &cells) {
            Ok((loss, dlogits)) => {
                total += loss;
                used += 1;
                model.backward(&cache, &dlogits);
            }
            Err(NnError::EmptyMask) => {
                log::debug!("skipping sample with an empty loss mask");
                skipped += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if used == 0 {
        return Err(ModelError::EmptyBatch);
    }
    model.params_mut().scale_grads(1.0 / used as f32);
    Ok(StepOutcome { loss: total / used as f64, used, skipped })
}

/// Forward, backward and one Adam update on a batch.
pub fn training_step(
    model: &mut VitModel,
    adam: &mut AdamState,
    batch: &[TrainingSample],
    lr: f32,
    mask: LossMask,
    rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<StepOutcome, ModelError> {
    let out = loss_and_grads(model, batch, mask, rng)?;
    adam_step(model.params_mut(), adam, lr);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Grid;
    use crate::geometry::{place_input, ViewTransform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VitConfig {
        let mut c = VitConfig::tiny(8, 16, 2, 2);
        c.num_task_embeddings = 3;
        c
    }

    #[test]
    fn counts_match_allocation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [PositionalMode::Rope2d, PositionalMode::Abs2d, PositionalMode::Rope1d, PositionalMode::Abs1d, PositionalMode::None] {
            let cfg = VitConfig { positional_mode: mode, ..tiny() };
            let m = VitModel::new(cfg.clone(), &mut rng).unwrap();
            assert_eq!(m.num_params(), count_params(&cfg), "{mode:?}");
        }
    }

    #[test]
    fn output_shape_and_task_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = VitModel::new(tiny(), &mut rng).unwrap();
        let c = Canvas::new(8);
        assert_eq!(m.forward(&c, 2).unwrap().shape(), &[8, 8, 12]);
        assert!(matches!(m.forward(&c, 3), Err(ModelError::TaskIndexOutOfRange { .. })));
        assert!(matches!(m.forward(&Canvas::new(6), 0), Err(ModelError::CanvasSize { .. })));
    }

    #[test]
    fn tokenize_masks_background_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = VitModel::new(tiny(), &mut rng).unwrap();
        let tok = m.tokenize(&Canvas::new(8)).unwrap();
        assert_eq!(tok.tokens.shape(), &[16, 16]);
        assert!(tok.patch_bg_mask.iter().all(|&b| b));
        let g = Grid::from_rows(&[[1u8]]).unwrap();
        let v = ViewTransform { offset: (3, 3), ..ViewTransform::identity() };
        let tok = m.tokenize(&place_input(&g, &v, 8).unwrap()).unwrap();
        assert_eq!(tok.patch_bg_mask.iter().filter(|&&b| !b).count(), 1);
        assert!(!tok.patch_bg_mask[5]);
        assert_eq!(tok.coords[5], (1, 1));
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.hidden_dim = 24;
        c.heads = 4; // head dim 6, not a multiple of 4
        assert!(c.validate().is_err());
        c.positional_mode = PositionalMode::Rope1d;
        assert!(c.validate().is_ok());
        let mut c = tiny();
        c.canvas_size = 9;
        assert!(c.validate().is_err());
    }
}
