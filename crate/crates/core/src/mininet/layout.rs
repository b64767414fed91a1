//! Tensor naming and definition order shared by models and checkpoints.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamKind::ConvWeight => "conv.weight",
            ParamKind::ConvBias => "conv.bias",
            ParamKind::BnGamma => "bn.gamma",
            ParamKind::BnBeta => "bn.beta",
            ParamKind::FcWeight => "fc.weight",
            ParamKind::FcBias => "fc.bias",
        };
        f.write_str(s)
    }
}

/// Stage (1-based; the head is `stages + 1`) and kind of a learnable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub stage: usize,
    pub kind: ParamKind,
}

/// Role of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param(ParamMeta),
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

/// Names of the tensors belonging to one conv-BN-ReLU block.
#[derive(Clone, Debug)]
pub(crate) struct BlockNames {
    pub stage: usize,
    pub conv_weight: String,
    pub conv_bias: String,
    pub bn_gamma: String,
    pub bn_beta: String,
    pub bn_layer: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub last_in_stage: bool,
}

pub const FC_WEIGHT: &str = "head.fc.weight";
pub const FC_BIAS: &str = "head.fc.bias";

pub(crate) fn blocks(config: &ModelConfig) -> Vec<BlockNames> {
    let mut out = Vec::new();
    let mut cin = config.in_channels;
    for s in 1..=config.stages {
        let cout = config.stage_channels(s);
        for b in 0..config.blocks_per_stage {
            let prefix = format!("s{s}.b{b}");
            out.push(BlockNames {
                stage: s,
                conv_weight: format!("{prefix}.conv.weight"),
                conv_bias: format!("{prefix}.conv.bias"),
                bn_gamma: format!("{prefix}.bn.gamma"),
                bn_beta: format!("{prefix}.bn.beta"),
                bn_layer: format!("{prefix}.bn"),
                in_channels: cin,
                out_channels: cout,
                last_in_stage: b + 1 == config.blocks_per_stage,
            });
            cin = cout;
        }
    }
    out
}

/// Every stored tensor in definition order: shallow blocks first, head last.
pub fn tensor_layout(config: &ModelConfig) -> Vec<TensorSlot> {
    let mut slots = Vec::new();
    let param = |name: &str, shape: Vec<usize>, stage, kind| TensorSlot {
        name: name.to_string(),
        shape,
        role: TensorRole::Param(ParamMeta { stage, kind }),
    };
    for blk in blocks(config) {
        let (i, o, s) = (blk.in_channels, blk.out_channels, blk.stage);
        slots.push(param(&blk.conv_weight, vec![o, i, 3, 3], s, ParamKind::ConvWeight));
        slots.push(param(&blk.conv_bias, vec![o], s, ParamKind::ConvBias));
        slots.push(param(&blk.bn_gamma, vec![o], s, ParamKind::BnGamma));
        slots.push(param(&blk.bn_beta, vec![o], s, ParamKind::BnBeta));
        slots.push(TensorSlot {
            name: format!("{}.running_mean", blk.bn_layer),
            shape: vec![o],
            role: TensorRole::RunningMean,
        });
        slots.push(TensorSlot {
            name: format!("{}.running_var", blk.bn_layer),
            shape: vec![o],
            role: TensorRole::RunningVar,
        });
    }
    let last = config.stage_channels(config.stages);
    let head = config.head_stage();
    slots.push(param(FC_WEIGHT, vec![config.num_classes, last], head, ParamKind::FcWeight));
    slots.push(param(FC_BIAS, vec![config.num_classes], head, ParamKind::FcBias));
    slots
}

/// Recovers stage and kind from a learnable parameter name such as
/// `s3.b0.bn.gamma` or `head.fc.weight` (which lands on `head_stage`).
pub fn parse_param_name(name: &str, head_stage: usize) -> Result<ParamMeta> {
    let bad = || Error::Classification(name.to_string());
    if let Some(rest) = name.strip_prefix("head.") {
        let kind = match rest {
            "fc.weight" => ParamKind::FcWeight,
            "fc.bias" => ParamKind::FcBias,
            _ => return Err(bad()),
        };
        return Ok(ParamMeta { stage: head_stage, kind });
    }
    let mut parts = name.splitn(3, '.');
    let stage = parts
        .next()
        .and_then(|p| p.strip_prefix('s'))
        .and_then(|p| p.parse::<usize>().ok())
        .filter(|&s| s >= 1 && s < head_stage)
        .ok_or_else(bad)?;
    parts
        .next()
        .and_then(|p| p.strip_prefix('b'))
        .and_then(|p| p.parse::<usize>().ok())
        .ok_or_else(bad)?;
    let kind = match parts.next().ok_or_else(bad)? {
        "conv.weight" => ParamKind::ConvWeight,
        "conv.bias" => ParamKind::ConvBias,
        "bn.gamma" => ParamKind::BnGamma,
        "bn.beta" => ParamKind::BnBeta,
        _ => return Err(bad()),
    };
    Ok(ParamMeta { stage, kind })
}
