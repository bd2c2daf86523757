//! Analytic parameter and FLOP accounting for CRC layers and whole RecNets.
//!
//! FLOPs follow the multiply-accumulate convention: one multiply-add is one
//! FLOP. A CRC layer costs `H·W·(k_x²·C_in + k_h²·C_out)·C_out/d` for its two
//! convolutions plus `2·H·W·C_out` for the additions of the recurrence. Batch
//! norm is charged one FLOP per output element; ReLU and pooling are free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::crc::CrcSpec;
use crate::model::RecNetConfig;

/// Which scalars count as parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Convolution and classifier weights only.
    FormulaOnly,
    /// Weights plus batch-norm scale and shift.
    WithBn,
    /// Everything trainable: weights, batch norm and biases.
    #[default]
    WithBnAndBias,
}

impl Convention {
    pub const ALL: [Convention; 3] = [Convention::FormulaOnly, Convention::WithBn, Convention::WithBnAndBias];

    pub fn name(self) -> &'static str {
        match self {
            Convention::FormulaOnly => "formula-only",
            Convention::WithBn => "with-bn",
            Convention::WithBnAndBias => "with-bn-and-bias",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn bn(self, channels: usize) -> usize {
        if self == Convention::FormulaOnly {
            0
        } else {
            2 * channels
        }
    }

    fn bias(self, n: usize) -> usize {
        if self == Convention::WithBnAndBias {
            n
        } else {
            0
        }
    }
}

pub fn crc_params(spec: &CrcSpec, convention: Convention) -> usize {
    let bn = match convention {
        Convention::FormulaOnly => 0,
        _ => spec.variant.bn_params(spec.s_out, spec.d),
    };
    let bias = if spec.variant.has_bias() {
        convention.bias(spec.s_out)
    } else {
        0
    };
    spec.conv_params() + bn + bias
}

/// A plain `k×k` convolution from `c_in` to `c_out` channels, without bias.
pub fn dense_conv_params(c_in: usize, c_out: usize, k: usize) -> u64 {
    (c_in * c_out * k * k) as u64
}

/// `H·W·(k_x²·C_in + k_h²·C_out)·C_out/d + 2·H·W·C_out`, computed per segment
/// so the division is exact.
pub fn crc_flops(spec: &CrcSpec, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let per_segment = (spec.k_x * spec.k_x * spec.s_in + spec.k_h * spec.k_h * spec.s_out) as u64;
    hw * spec.d as u64 * spec.s_out as u64 * per_segment + 2 * hw * spec.c_out() as u64
}

/// Per-layer row of the architecture table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLedgerRow {
    pub layer: String,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub rows: Vec<LayerLedgerRow>,
    pub convention: Convention,
}

impl Ledger {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,out_channels,out_h,out_w,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer, r.out_channels, r.out_h, r.out_w, r.params, r.flops
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<name_w$}  {:>8}  {:>9}  {:>12}  {:>15}\n",
            "layer", "channels", "size", "params", "flops"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<name_w$}  {:>8}  {:>9}  {:>12}  {:>15}",
                r.layer,
                r.out_channels,
                format!("{}x{}", r.out_h, r.out_w),
                r.params,
                r.flops
            );
        }
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>8}  {:>9}  {:>12}  {:>15}",
            "total",
            "",
            "",
            self.total_params(),
            self.total_flops()
        );
        s
    }
}

/// `RecNet-<depth>-<width>` with depth `2·(d1+d2+d3)` and width `e·max(S_i·d_i)`.
pub fn acronym(cfg: &RecNetConfig) -> String {
    let depth = 2 * (cfg.d1 + cfg.d2 + cfg.d3);
    let width = cfg.e * cfg.stages().iter().map(|(s, d)| s * d).max().unwrap_or(0);
    format!("RecNet-{depth}-{width}")
}

/// Rows in the order of the architecture table.
pub fn ledger(cfg: &RecNetConfig, convention: Convention) -> Ledger {
    let mut rows = Vec::new();
    let mut size = cfg.input_size;
    let stem_c = cfg.stem_channels();
    let plane = (size * size) as u64;
    rows.push(LayerLedgerRow {
        layer: "conv3x3+bn+relu".into(),
        out_channels: stem_c,
        out_h: size,
        out_w: size,
        params: (9 * cfg.input_channels * stem_c + convention.bn(stem_c)) as u64,
        flops: plane * (9 * cfg.input_channels * stem_c + stem_c) as u64,
    });
    for (m, (spec, tb_out)) in cfg.module_plan().into_iter().enumerate() {
        let (stage, pos) = (m / 2 + 1, m % 2 + 1);
        let plane = (size * size) as u64;
        rows.push(LayerLedgerRow {
            layer: format!("crc{stage}_{pos}"),
            out_channels: spec.c_out(),
            out_h: size,
            out_w: size,
            params: crc_params(&spec, convention) as u64,
            flops: crc_flops(&spec, size, size),
        });
        rows.push(LayerLedgerRow {
            layer: format!("tb{stage}_{pos}"),
            out_channels: tb_out,
            out_h: size,
            out_w: size,
            params: (spec.c_out() * tb_out + convention.bn(tb_out)) as u64,
            flops: plane * (spec.c_out() * tb_out + tb_out) as u64,
        });
        if m == 1 || m == 3 {
            size /= 2;
            rows.push(LayerLedgerRow {
                layer: format!("maxpool{stage}"),
                out_channels: tb_out,
                out_h: size,
                out_w: size,
                params: 0,
                flops: 0,
            });
        }
    }
    let f = cfg.feature_channels();
    rows.push(LayerLedgerRow {
        layer: "avgpool".into(),
        out_channels: f,
        out_h: 1,
        out_w: 1,
        params: 0,
        flops: 0,
    });
    rows.push(LayerLedgerRow {
        layer: "linear".into(),
        out_channels: cfg.n_classes,
        out_h: 1,
        out_w: 1,
        params: (f * cfg.n_classes + convention.bias(cfg.n_classes)) as u64,
        flops: (f * cfg.n_classes) as u64,
    });
    Ledger { rows, convention }
}

pub fn param_count(cfg: &RecNetConfig, convention: Convention) -> u64 {
    ledger(cfg, convention).total_params()
}

pub fn flop_count(cfg: &RecNetConfig) -> u64 {
    ledger(cfg, Convention::default()).total_flops()
}
