//! Analytic FLOPs and activation-memory accounting for masked video
//! autoencoders at ViT-S/B/L scale.
//!
//! A FLOP is half a multiply-accumulate. Published GFLOPs for these models
//! are usually MAC counts, so reports carry both.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Operations the FLOP counts leave out.
pub const EXCLUDED_OPS: &[&str] = &[
    "layer norm",
    "softmax",
    "GELU",
    "bias adds",
    "residual adds",
    "positional embedding adds",
    "attention scaling",
    "importance scoring and top-k",
];

/// Assumptions behind the decoder shapes and input geometry.
pub const ASSUMPTIONS: &[&str] = &[
    "decoder: 4 blocks at half the encoder width, mlp ratio 4",
    "input 16x224x224x3, tube 2x16x16, tau 8, J 196",
    "all tokens are tube-embedded in both methods",
    "memory counts stored activations only; parameters, optimizer state and runtime overheads excluded",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transformer {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub tube: usize,
}

impl Geometry {
    pub const fn standard() -> Self {
        Self { frames: 16, height: 224, width: 224, channels: 3, patch: 16, tube: 2 }
    }

    pub fn tau(&self) -> usize {
        self.frames / self.tube
    }

    pub fn j(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        self.tau() * self.j()
    }

    pub fn patch_dim(&self) -> usize {
        self.tube * self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: &'static str,
    pub encoder: Transformer,
    pub decoder: Transformer,
    pub geometry: Geometry,
    pub num_classes: usize,
}

impl ArchSpec {
    const fn vit(name: &'static str, depth: usize, dim: usize, heads: usize, dec_heads: usize) -> Self {
        Self {
            name,
            encoder: Transformer { depth, dim, heads, mlp_ratio: 4 },
            decoder: Transformer { depth: 4, dim: dim / 2, heads: dec_heads, mlp_ratio: 4 },
            geometry: Geometry::standard(),
            num_classes: 400,
        }
    }

    pub const fn vit_s() -> Self {
        Self::vit("vit-s", 12, 384, 6, 3)
    }

    pub const fn vit_b() -> Self {
        Self::vit("vit-b", 12, 768, 12, 6)
    }

    pub const fn vit_l() -> Self {
        Self::vit("vit-l", 24, 1024, 16, 8)
    }

    pub fn all() -> [Self; 3] {
        [Self::vit_s(), Self::vit_b(), Self::vit_l()]
    }
}

impl FromStr for ArchSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vit-s" | "s" => Ok(Self::vit_s()),
            "vit-b" | "b" => Ok(Self::vit_b()),
            "vit-l" | "l" => Ok(Self::vit_l()),
            other => Err(format!("unknown arch '{other}' (expected vit-s, vit-b or vit-l)")),
        }
    }
}

/// FLOPs of one pre-norm transformer block over `n` tokens.
pub fn block_flops(n: usize, d: usize, _heads: usize, mlp_ratio: usize) -> u128 {
    let (n, d, r) = (n as u128, d as u128, mlp_ratio as u128);
    let qkv = 2 * 3 * n * d * d;
    let attn = 2 * 2 * n * n * d;
    let proj = 2 * n * d * d;
    let mlp = 2 * 2 * r * n * d * d;
    qkv + attn + proj + mlp
}

fn stack_flops(t: &Transformer, n: usize) -> u128 {
    t.depth as u128 * block_flops(n, t.dim, t.heads, t.mlp_ratio)
}

fn linear_flops(n: usize, din: usize, dout: usize) -> u128 {
    2 * n as u128 * din as u128 * dout as u128
}

/// Token count for a fraction of the grid, rounded half up.
pub fn token_count(total: usize, frac: f64) -> usize {
    crate::rero::round_half_up(total as f64 * frac).max(1)
}

/// Pre-training FLOPs per clip: embed every token, encode the visible
/// fraction, decode the decoder fraction and predict its pixels.
pub fn pretrain_flops(arch: &ArchSpec, visible_frac: f64, decoder_frac: f64) -> u128 {
    let g = &arch.geometry;
    let total = g.tokens();
    let nv = token_count(total, visible_frac);
    let nd = token_count(total, decoder_frac);
    linear_flops(total, g.patch_dim(), arch.encoder.dim)
        + stack_flops(&arch.encoder, nv)
        + linear_flops(nv, arch.encoder.dim, arch.decoder.dim)
        + stack_flops(&arch.decoder, nd)
        + linear_flops(nd, arch.decoder.dim, g.patch_dim())
}

/// Fine-tuning (inference-shaped) FLOPs per clip with a token fraction.
pub fn finetune_flops(arch: &ArchSpec, token_frac: f64) -> u128 {
    let g = &arch.geometry;
    let total = g.tokens();
    let n = token_count(total, token_frac);
    linear_flops(total, g.patch_dim(), arch.encoder.dim)
        + stack_flops(&arch.encoder, n)
        + linear_flops(1, arch.encoder.dim, arch.num_classes)
}

fn block_activations(t: &Transformer, n: usize) -> u128 {
    let (n, d, h, r) = (n as u128, t.dim as u128, t.heads as u128, t.mlp_ratio as u128);
    // two norm inputs, q, k, v, attention output, projection and MLP inputs
    8 * n * d + h * n * n + 2 * r * n * d
}

/// Bytes of activations retained for backward during one pre-training step.
pub fn activation_memory(arch: &ArchSpec, batch: usize, visible_frac: f64, decoder_frac: f64, bytes_per_scalar: usize) -> u128 {
    let g = &arch.geometry;
    let total = g.tokens();
    let nv = token_count(total, visible_frac);
    let nd = token_count(total, decoder_frac);
    let embed = total as u128 * g.patch_dim() as u128;
    let enc = arch.encoder.depth as u128 * block_activations(&arch.encoder, nv);
    let dec = arch.decoder.depth as u128 * block_activations(&arch.decoder, nd);
    let head = nd as u128 * (arch.decoder.dim + g.patch_dim()) as u128;
    let bridge = nv as u128 * arch.encoder.dim as u128;
    batch as u128 * bytes_per_scalar as u128 * (embed + bridge + enc + dec + head)
}

/// Parameter count of the pre-training model, reported apart from activations.
/// Attention carries query, value and output biases but no key bias.
pub fn parameter_count(arch: &ArchSpec) -> u128 {
    let stack = |t: &Transformer| {
        let (d, r) = (t.dim as u128, t.mlp_ratio as u128);
        let block = 4 * d * d + 3 * d + 2 * r * d * d + r * d + d + 4 * d;
        let final_norm = if t.depth > 0 { 2 * d } else { 0 };
        t.depth as u128 * block + final_norm
    };
    let g = &arch.geometry;
    let (e, dd, p) = (arch.encoder.dim as u128, arch.decoder.dim as u128, g.patch_dim() as u128);
    p * e + e + stack(&arch.encoder) + e * dd + dd + dd + stack(&arch.decoder) + dd * p + p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub method: String,
    pub phase: Phase,
    pub flops: u128,
    pub activation_bytes: Option<u128>,
    pub reduction_pct: Option<f64>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn gmacs(&self) -> f64 {
        self.flops as f64 / 2e9
    }

    /// Percent saved relative to `baseline`.
    pub fn reduction_vs(&self, baseline: &CostReport) -> f64 {
        reduction_pct(self.flops, baseline.flops)
    }
}

pub fn reduction_pct(cost: u128, baseline: u128) -> f64 {
    100.0 * (1.0 - cost as f64 / baseline as f64)
}

/// Pre-training cost report; `decoder_frac = 1` is a full-grid decoder.
pub fn mva_flops(arch: &ArchSpec, visible_frac: f64, decoder_frac: f64) -> CostReport {
    CostReport {
        arch: arch.name.into(),
        method: if decoder_frac < 1.0 { "everest" } else { "videomae" }.into(),
        phase: Phase::Pretrain,
        flops: pretrain_flops(arch, visible_frac, decoder_frac),
        activation_bytes: None,
        reduction_pct: None,
    }
}

/// Settings for a side-by-side comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub visible_frac: f64,
    pub rho_pre: f64,
    pub rho_pre_ft: f64,
    pub batch: usize,
    pub bytes_per_scalar: usize,
}

impl Default for Comparison {
    fn default() -> Self {
        Self { visible_frac: 0.1, rho_pre: 0.3, rho_pre_ft: 0.6, batch: 256, bytes_per_scalar: 4 }
    }
}

/// Baseline and reduced rows for both phases of one arch.
pub fn compare(arch: &ArchSpec, cmp: &Comparison) -> Vec<CostReport> {
    let mem = |dec| Some(activation_memory(arch, cmp.batch, cmp.visible_frac, dec, cmp.bytes_per_scalar));
    let base_pt = pretrain_flops(arch, cmp.visible_frac, 1.0);
    let ours_pt = pretrain_flops(arch, cmp.visible_frac, cmp.rho_pre);
    let base_ft = finetune_flops(arch, 1.0);
    let ours_ft = finetune_flops(arch, cmp.rho_pre_ft);
    let row = |method: &str, phase, flops, activation_bytes, reduction_pct| CostReport {
        arch: arch.name.into(),
        method: method.into(),
        phase,
        flops,
        activation_bytes,
        reduction_pct,
    };
    vec![
        row("videomae", Phase::Pretrain, base_pt, mem(1.0), None),
        row("everest", Phase::Pretrain, ours_pt, mem(cmp.rho_pre), Some(reduction_pct(ours_pt, base_pt))),
        row("videomae", Phase::Finetune, base_ft, None, None),
        row("everest", Phase::Finetune, ours_ft, None, Some(reduction_pct(ours_ft, base_ft))),
    ]
}

pub fn to_csv(rows: &[CostReport]) -> String {
    let mut out = String::from("arch,method,phase,flops,reduction_pct,activation_bytes\n");
    for r in rows {
        let red = r.reduction_pct.map(|p| format!("{p:.2}")).unwrap_or_default();
        let mem = r.activation_bytes.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{red},{mem}", r.arch, r.method, r.phase.as_str(), r.flops);
    }
    out
}

pub fn to_table(rows: &[CostReport]) -> String {
    let mut out = format!(
        "{:<6} {:<9} {:<9} {:>10} {:>10} {:>10} {:>12}\n",
        "arch", "method", "phase", "GFLOPs", "GMACs", "reduction", "act. GiB"
    );
    for r in rows {
        let red = r.reduction_pct.map(|p| format!("{p:.1}%")).unwrap_or_else(|| "-".into());
        let mem = r.activation_bytes.map(|b| format!("{:.1}", b as f64 / (1u64 << 30) as f64)).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<6} {:<9} {:<9} {:>10.1} {:>10.1} {:>10} {:>12}",
            r.arch,
            r.method,
            r.phase.as_str(),
            r.gflops(),
            r.gmacs(),
            red,
            mem
        );
    }
    out.push_str("excluded: ");
    out.push_str(&EXCLUDED_OPS.join(", "));
    out.push('\n');
    for a in ASSUMPTIONS {
        let _ = writeln!(out, "assumes: {a}");
    }
    out
}
