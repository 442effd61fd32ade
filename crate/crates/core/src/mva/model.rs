use super::params::{Bound, ParamStore};
use super::{LossScope, ModelConfig, MvaError};
use crate::embedding::{embed_patches, patchify, positional, EmbedWeights, PositionalEmbedding, TokenGrid};
use crate::numerics::{Graph, NodeId, Real, Tensor};
use crate::rero::{importance_map, select_with_order, subsample_visible, MetricKind, ReRoMask, SelectionOrder, VisibleSet};

const LN_EPS: f64 = 1e-6;
const TARGET_EPS: f64 = 1e-6;

fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: NodeId) -> Result<NodeId, MvaError> {
    let y = g.matmul(x, p.id(&format!("{name}.w"))?)?;
    Ok(g.add_bias(y, p.id(&format!("{name}.b"))?)?)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: NodeId) -> Result<NodeId, MvaError> {
    let (gamma, beta) = (p.id(&format!("{name}.g"))?, p.id(&format!("{name}.b"))?);
    Ok(g.layer_norm(x, gamma, beta, T::from_f64_lossy(LN_EPS))?)
}

fn block<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: NodeId, heads: usize) -> Result<NodeId, MvaError> {
    let h = norm(g, p, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, p, &format!("{prefix}.attn.q"), h)?;
    let k = g.matmul(h, p.id(&format!("{prefix}.attn.k.w"))?)?;
    let v = linear(g, p, &format!("{prefix}.attn.v"), h)?;
    let a = g.attention(q, k, v, heads)?;
    let a = linear(g, p, &format!("{prefix}.attn.proj"), a)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, p, &format!("{prefix}.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{prefix}.fc2"), h)?;
    Ok(g.add(x, h)?)
}

fn stack<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, depth: usize, heads: usize, mut x: NodeId) -> Result<NodeId, MvaError> {
    for l in 0..depth {
        x = block(g, p, &format!("{prefix}.{l}"), x, heads)?;
    }
    if depth > 0 {
        x = norm(g, p, &format!("{prefix}.norm"), x)?;
    }
    Ok(x)
}

/// Pre-norm transformer over the given token rows only. With depth 0 the
/// tokens pass through unchanged.
pub fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, tokens: NodeId) -> Result<NodeId, MvaError> {
    if g.value(tokens).rows() == 0 {
        return Err(MvaError::EmptyVisible);
    }
    stack(g, p, "enc", cfg.enc_depth, cfg.enc_heads, tokens)
}

/// Placement of encoder latents and mask tokens in the decoder sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayout {
    pub visible: usize,
    pub masked: usize,
    /// For each selected slot in ascending slot order, its row in
    /// `[latents; mask tokens]`.
    pub order: Vec<usize>,
    /// Decoder rows that hold hidden slots.
    pub masked_rows: Vec<usize>,
}

impl DecoderLayout {
    /// `selected` ascending; `visible` ascending and contained in it.
    pub fn new(selected: &[usize], visible: &[usize]) -> Result<Self, MvaError> {
        if visible.is_empty() {
            return Err(MvaError::EmptyVisible);
        }
        let mut order = Vec::with_capacity(selected.len());
        let mut masked_rows = Vec::new();
        let (mut vi, mut mi) = (0, 0);
        for (row, &slot) in selected.iter().enumerate() {
            if vi < visible.len() && visible[vi] == slot {
                order.push(vi);
                vi += 1;
            } else {
                order.push(visible.len() + mi);
                masked_rows.push(row);
                mi += 1;
            }
        }
        if vi != visible.len() {
            return Err(MvaError::Slots(format!("visible slot {} is not selected", visible[vi])));
        }
        Ok(Self { visible: visible.len(), masked: mi, order, masked_rows })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Pixel predictions for every selected slot, `|selected| x patch_dim`.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    latents: NodeId,
    layout: &DecoderLayout,
    positions: NodeId,
) -> Result<NodeId, MvaError> {
    if g.value(latents).rows() != layout.visible {
        return Err(MvaError::Slots(format!("{} latents for {} visible slots", g.value(latents).rows(), layout.visible)));
    }
    if g.value(positions).rows() != layout.len() {
        return Err(MvaError::Slots(format!("{} positions for {} slots", g.value(positions).rows(), layout.len())));
    }
    let mut y = linear(g, p, "dec.embed", latents)?;
    if layout.masked > 0 {
        let m = g.gather_rows(p.id("mask_token")?, &vec![0; layout.masked])?;
        y = g.concat_rows(y, m)?;
    }
    let y = g.gather_rows(y, &layout.order)?;
    let y = g.add(y, positions)?;
    let y = stack(g, p, "dec", cfg.dec_depth, cfg.dec_heads, y)?;
    linear(g, p, "head", y)
}

/// Mean squared error over the counted rows of `pred`; `target` holds
/// exactly those rows.
pub fn rero_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, target: NodeId, counted: Option<&[usize]>) -> Result<NodeId, MvaError> {
    let pred = match counted {
        Some([]) => return Err(MvaError::EmptyScope(LossScope::MaskedOnly)),
        Some(rows) => g.gather_rows(pred, rows)?,
        None => pred,
    };
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// Patch rows for `slots`, optionally standardised per row.
pub fn target_patches<T: Real>(patches: &Tensor<T>, slots: &[usize], normalize: bool) -> Result<Tensor<T>, MvaError> {
    let mut t = patches.gather_rows(slots)?;
    if normalize {
        let c = t.cols();
        let n = c as f64;
        for row in t.data_mut().chunks_mut(c) {
            let mean = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
            let var = row.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + TARGET_EPS).sqrt();
            for v in row.iter_mut() {
                *v = T::from_f64_lossy((v.to_f64_lossy() - mean) * inv);
            }
        }
    }
    Ok(t)
}

/// Fixed positional tables for the encoder and decoder widths.
#[derive(Clone, Debug)]
pub struct PositionTables<T> {
    pub enc: PositionalEmbedding<T>,
    pub dec: PositionalEmbedding<T>,
}

impl<T: Real> PositionTables<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { enc: positional(cfg.tau, cfg.j(), cfg.enc_dim), dec: positional(cfg.tau, cfg.j(), cfg.dec_dim) }
    }
}

/// Token selection settings shared by pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSettings {
    pub rho_pre: f64,
    pub rho_post: f64,
    pub metric: MetricKind,
    pub order: SelectionOrder,
    pub allow_ratio_override: bool,
    pub scope: LossScope,
    pub normalize_target: bool,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            rho_pre: 0.3,
            rho_post: 1.0 / 3.0,
            metric: MetricKind::L2,
            order: SelectionOrder::Descending,
            allow_ratio_override: false,
            scope: LossScope::AllRero,
            normalize_target: true,
        }
    }
}

/// Everything a pre-training forward pass needs besides parameters.
#[derive(Clone, Debug)]
pub struct PretrainSample<T> {
    /// Rows in ascending slot order.
    pub visible_patches: Tensor<T>,
    pub enc_pos: Tensor<T>,
    pub layout: DecoderLayout,
    pub dec_pos: Tensor<T>,
    pub target: Tensor<T>,
    pub counted: Option<Vec<usize>>,
    pub mask: ReRoMask,
    pub visible: VisibleSet,
}

fn check_frames<T: Real>(cfg: &ModelConfig, frames: &Tensor<T>) -> Result<(), MvaError> {
    let expected = [cfg.frames(), cfg.channels, cfg.height, cfg.width];
    if frames.shape() != expected {
        return Err(MvaError::Config(format!("frames {:?}, model expects {expected:?}", frames.shape())));
    }
    Ok(())
}

fn select<T: Real>(
    cfg: &ModelConfig,
    patches: &Tensor<T>,
    embed: &EmbedWeights<T>,
    rho: f64,
    metric: MetricKind,
    order: SelectionOrder,
) -> Result<ReRoMask, MvaError> {
    let tokens = embed_patches(patches, embed)?;
    let grid = TokenGrid::from_matrix(&tokens, cfg.tau, cfg.patch, cfg.height, cfg.width)?;
    let imp = importance_map(&grid, metric)?;
    Ok(select_with_order(&imp, rho, order)?)
}

/// Scores and selects tokens of a normalised clip, then samples the
/// visible subset with `seed`.
pub fn prepare_pretrain<T: Real>(
    cfg: &ModelConfig,
    frames: &Tensor<T>,
    embed: &EmbedWeights<T>,
    tables: &PositionTables<T>,
    settings: &MaskSettings,
    seed: u64,
) -> Result<PretrainSample<T>, MvaError> {
    check_frames(cfg, frames)?;
    let patches = patchify(frames, cfg.patch)?;
    let mask = select(cfg, &patches, embed, settings.rho_pre, settings.metric, settings.order)?;
    let visible = subsample_visible(&mask, settings.rho_post, seed, settings.allow_ratio_override)?;
    let selected = mask.sorted_indices();
    let mut visible_slots = visible.indices.clone();
    visible_slots.sort_unstable();
    let layout = DecoderLayout::new(&selected, &visible_slots)?;
    let counted = match settings.scope {
        LossScope::AllRero => None,
        LossScope::MaskedOnly if layout.masked_rows.is_empty() => return Err(MvaError::EmptyScope(LossScope::MaskedOnly)),
        LossScope::MaskedOnly => Some(layout.masked_rows.clone()),
    };
    let target_slots: Vec<usize> = match &counted {
        None => selected.clone(),
        Some(rows) => rows.iter().map(|&r| selected[r]).collect(),
    };
    Ok(PretrainSample {
        visible_patches: patches.gather_rows(&visible_slots)?,
        enc_pos: tables.enc.rows_for(&visible_slots)?,
        dec_pos: tables.dec.rows_for(&selected)?,
        target: target_patches(&patches, &target_slots, settings.normalize_target)?,
        layout,
        counted,
        mask,
        visible,
    })
}

/// Embeds the visible patches and returns the reconstruction loss node.
pub fn pretrain_loss<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, s: &PretrainSample<T>) -> Result<NodeId, MvaError> {
    let x = g.constant(s.visible_patches.clone());
    let x = linear(g, p, "embed", x)?;
    let pos = g.constant(s.enc_pos.clone());
    let x = g.add(x, pos)?;
    let latents = encode(g, p, cfg, x)?;
    let dec_pos = g.constant(s.dec_pos.clone());
    let pred = decode(g, p, cfg, latents, &s.layout, dec_pos)?;
    let target = g.constant(s.target.clone());
    rero_loss(g, pred, target, s.counted.as_deref())
}

#[derive(Clone, Debug)]
pub struct FinetuneSample<T> {
    pub patches: Tensor<T>,
    pub pos: Tensor<T>,
    pub label: usize,
    pub mask: ReRoMask,
}

/// Selected patches (ascending slot order) of a normalised clip.
pub fn prepare_finetune<T: Real>(
    cfg: &ModelConfig,
    frames: &Tensor<T>,
    embed: &EmbedWeights<T>,
    tables: &PositionTables<T>,
    rho_pre: f64,
    metric: MetricKind,
    order: SelectionOrder,
    label: usize,
) -> Result<FinetuneSample<T>, MvaError> {
    check_frames(cfg, frames)?;
    if label >= cfg.num_classes {
        return Err(MvaError::Config(format!("label {label} with {} classes", cfg.num_classes)));
    }
    let patches = patchify(frames, cfg.patch)?;
    let mask = select(cfg, &patches, embed, rho_pre, metric, order)?;
    let slots = mask.sorted_indices();
    Ok(FinetuneSample { patches: patches.gather_rows(&slots)?, pos: tables.enc.rows_for(&slots)?, label, mask })
}

/// Class logits node, `1 x num_classes`.
pub fn classify<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, s: &FinetuneSample<T>) -> Result<NodeId, MvaError> {
    let x = g.constant(s.patches.clone());
    let x = linear(g, p, "embed", x)?;
    let pos = g.constant(s.pos.clone());
    let x = g.add(x, pos)?;
    let h = encode(g, p, cfg, x)?;
    let pooled = g.mean_rows(h)?;
    linear(g, p, "cls", pooled)
}

/// Cross-entropy loss node and logits node.
pub fn finetune_loss<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, s: &FinetuneSample<T>) -> Result<(NodeId, NodeId), MvaError> {
    let logits = classify(g, p, cfg, s)?;
    Ok((g.cross_entropy(logits, &[s.label])?, logits))
}

/// Predicted class of one sample.
pub fn predict<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, s: &FinetuneSample<T>) -> Result<usize, MvaError> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let logits = classify(&mut g, &p, cfg, s)?;
    let row = g.value(logits).data();
    Ok((0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
}
