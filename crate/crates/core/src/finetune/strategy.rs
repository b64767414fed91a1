//! Fine-tuning recipes and the freeze plans they induce.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mininet::{Model, ParamKind};

/// The three-way parameter partition: convolution, batch-norm affine, and
/// fully-connected head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Cnn,
    Bn,
    Fc,
}

impl From<ParamKind> for ParamGroup {
    fn from(kind: ParamKind) -> Self {
        match kind {
            ParamKind::ConvWeight | ParamKind::ConvBias => ParamGroup::Cnn,
            ParamKind::BnGamma | ParamKind::BnBeta => ParamGroup::Bn,
            ParamKind::FcWeight | ParamKind::FcBias => ParamGroup::Fc,
        }
    }
}

pub fn classify_params(model: &Model) -> IndexMap<String, ParamGroup> {
    model
        .param_meta()
        .iter()
        .map(|(name, meta)| (name.clone(), ParamGroup::from(meta.kind)))
        .collect()
}

/// Classifies a bare parameter name for a model with `stages` stages.
pub fn classify_name(name: &str, stages: usize) -> Result<ParamGroup> {
    crate::mininet::parse_param_name(name, stages + 1).map(|m| m.kind.into())
}

pub const LR_SCRATCH: f32 = 0.001;
pub const LR_FC_ONLY: f32 = 0.001;
pub const LR_CNN_FC: f32 = 0.0001;
pub const LR_BN_FC: f32 = 0.01;
pub const LR_ALL_UNIFORM: f32 = 0.0001;
pub const LR_DIFF_BN: f32 = 0.01;
pub const LR_DIFF_FC: f32 = 0.001;
pub const LR_DIFF_CNN: f32 = 0.0001;
pub const LR_PARTIAL_BN: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Fresh initialization, everything trainable.
    Scratch,
    FcOnly,
    CnnFc,
    BnFc,
    AllUniform,
    DifferentialLr,
    /// BN layers of the listed 1-based stages, plus the head.
    PartialBn(BTreeSet<usize>),
}

/// Learning rate per group; `None` means the group is frozen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrTable {
    pub cnn: Option<f32>,
    pub bn: Option<f32>,
    pub fc: Option<f32>,
}

impl LrTable {
    pub fn get(&self, group: ParamGroup) -> Option<f32> {
        match group {
            ParamGroup::Cnn => self.cnn,
            ParamGroup::Bn => self.bn,
            ParamGroup::Fc => self.fc,
        }
    }
}

impl Strategy {
    pub fn lr_table(&self) -> LrTable {
        let t = |cnn, bn, fc| LrTable { cnn, bn, fc };
        match self {
            Strategy::Scratch => t(Some(LR_SCRATCH), Some(LR_SCRATCH), Some(LR_SCRATCH)),
            Strategy::FcOnly => t(None, None, Some(LR_FC_ONLY)),
            Strategy::CnnFc => t(Some(LR_CNN_FC), None, Some(LR_CNN_FC)),
            Strategy::BnFc => t(None, Some(LR_BN_FC), Some(LR_BN_FC)),
            Strategy::AllUniform => t(Some(LR_ALL_UNIFORM), Some(LR_ALL_UNIFORM), Some(LR_ALL_UNIFORM)),
            Strategy::DifferentialLr => t(Some(LR_DIFF_CNN), Some(LR_DIFF_BN), Some(LR_DIFF_FC)),
            Strategy::PartialBn(_) => t(None, Some(LR_PARTIAL_BN), Some(LR_PARTIAL_BN)),
        }
    }

    /// Whether the strategy starts from transferred weights.
    pub fn transfers(&self) -> bool {
        !matches!(self, Strategy::Scratch)
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        if let Strategy::PartialBn(set) = self {
            if set.is_empty() {
                return Err(Error::Config("partial-bn needs at least one stage".into()));
            }
            if let Some(&bad) = set.iter().find(|&&s| s == 0 || s > stages) {
                return Err(Error::StageRange { stage: bad, stages });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Scratch => f.write_str("scratch"),
            Strategy::FcOnly => f.write_str("fc"),
            Strategy::CnnFc => f.write_str("cnn-fc"),
            Strategy::BnFc => f.write_str("bn-fc"),
            Strategy::AllUniform => f.write_str("all-uniform"),
            Strategy::DifferentialLr => f.write_str("diff-lr"),
            Strategy::PartialBn(set) => {
                let stages: Vec<String> = set.iter().map(usize::to_string).collect();
                write!(f, "partial-bn={}", stages.join(","))
            }
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "scratch" => Strategy::Scratch,
            "fc" => Strategy::FcOnly,
            "cnn-fc" => Strategy::CnnFc,
            "bn-fc" => Strategy::BnFc,
            "all-uniform" => Strategy::AllUniform,
            "diff-lr" => Strategy::DifferentialLr,
            other => {
                let list = other
                    .strip_prefix("partial-bn=")
                    .ok_or_else(|| Error::Config(format!("unknown strategy `{other}`")))?;
                let set = list
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<BTreeSet<_>, _>>()
                    .map_err(|_| Error::Config(format!("bad stage list in `{other}`")))?;
                if set.is_empty() || set.contains(&0) {
                    return Err(Error::Config(format!("bad stage list in `{other}`")));
                }
                Strategy::PartialBn(set)
            }
        })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-parameter trainability and learning rate, plus per-BN-layer
/// running-statistic policy.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezePlan {
    pub trainable: IndexMap<String, bool>,
    /// Exactly 0 for frozen parameters.
    pub lr: IndexMap<String, f32>,
    /// Keyed by BN layer name (`s2.b0.bn`). A layer with `false` normalizes
    /// by its running statistics during training and never updates them.
    pub bn_update_running: IndexMap<String, bool>,
}

impl FreezePlan {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str())
    }

    /// Lets frozen BN layers re-estimate batch statistics on the target data
    /// (their gamma/beta stay frozen).
    pub fn with_frozen_bn_adaptation(mut self) -> Self {
        for v in self.bn_update_running.values_mut() {
            *v = true;
        }
        self
    }
}

pub fn build_freeze_plan(strategy: &Strategy, model: &Model) -> Result<FreezePlan> {
    strategy.validate(model.config().stages)?;
    let table = strategy.lr_table();
    let mut trainable = IndexMap::new();
    let mut lr = IndexMap::new();
    let mut bn_update_running = IndexMap::new();
    for (name, meta) in model.param_meta() {
        let group = ParamGroup::from(meta.kind);
        let mut rate = table.get(group);
        if let (Strategy::PartialBn(stages), ParamGroup::Bn) = (strategy, group) {
            if !stages.contains(&meta.stage) {
                rate = None;
            }
        }
        trainable.insert(name.clone(), rate.is_some());
        lr.insert(name.clone(), rate.unwrap_or(0.0));
        if let Some(layer) = Model::bn_layer_of(name) {
            let entry = bn_update_running.entry(layer.to_string()).or_insert(true);
            *entry &= rate.is_some();
        }
    }
    Ok(FreezePlan { trainable, lr, bn_update_running })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mininet::ModelConfig;

    fn model() -> Model {
        Model::build(ModelConfig { input_size: 16, base_channels: 4, ..ModelConfig::default() }).unwrap()
    }

    #[test]
    fn classification_by_construction() {
        let groups = classify_params(&model());
        assert_eq!(groups["s1.b0.conv.weight"], ParamGroup::Cnn);
        assert_eq!(groups["s4.b0.bn.gamma"], ParamGroup::Bn);
        assert_eq!(groups["head.fc.bias"], ParamGroup::Fc);
        assert_eq!(classify_name("s2.b0.conv.bias", 4).unwrap(), ParamGroup::Cnn);
        assert!(matches!(classify_name("s2.b0.attn.weight", 4), Err(Error::Classification(_))));
    }

    #[test]
    fn differential_rates() {
        let plan = build_freeze_plan(&Strategy::DifferentialLr, &model()).unwrap();
        assert_eq!(plan.lr["s2.b0.bn.gamma"], 0.01);
        assert_eq!(plan.lr["head.fc.weight"], 0.001);
        assert_eq!(plan.lr["s2.b0.conv.weight"], 0.0001);
        assert!(plan.trainable.values().all(|&t| t));
    }

    #[test]
    fn fc_only_freezes_cnn_and_bn() {
        let m = model();
        let plan = build_freeze_plan(&Strategy::FcOnly, &m).unwrap();
        for (name, group) in classify_params(&m) {
            assert_eq!(plan.trainable[&name], group == ParamGroup::Fc, "{name}");
            if group != ParamGroup::Fc {
                assert_eq!(plan.lr[&name], 0.0);
            }
        }
        assert!(plan.bn_update_running.values().all(|&u| !u));
        let adapted = plan.with_frozen_bn_adaptation();
        assert!(adapted.bn_update_running.values().all(|&u| u));
    }

    #[test]
    fn partial_bn_selects_stages() {
        let m = model();
        let plan = build_freeze_plan(&"partial-bn=4".parse().unwrap(), &m).unwrap();
        let names: Vec<&str> = plan.trainable_names().collect();
        assert_eq!(names, ["s4.b0.bn.gamma", "s4.b0.bn.beta", "head.fc.weight", "head.fc.bias"]);
        assert_eq!(plan.bn_update_running["s4.b0.bn"], true);
        assert_eq!(plan.bn_update_running["s3.b0.bn"], false);
        assert!(matches!(
            build_freeze_plan(&"partial-bn=5".parse().unwrap(), &m),
            Err(Error::StageRange { stage: 5, stages: 4 })
        ));
    }

    #[test]
    fn partial_bn_over_all_stages_matches_bn_fc() {
        let m = model();
        let all = build_freeze_plan(&"partial-bn=1,2,3,4".parse().unwrap(), &m).unwrap();
        let bnfc = build_freeze_plan(&Strategy::BnFc, &m).unwrap();
        assert_eq!(all.trainable, bnfc.trainable);
        assert_eq!(all.bn_update_running, bnfc.bn_update_running);
    }

    #[test]
    fn frozen_params_have_zero_rate() {
        let m = model();
        for s in ["scratch", "fc", "cnn-fc", "bn-fc", "all-uniform", "diff-lr", "partial-bn=2,3"] {
            let plan = build_freeze_plan(&s.parse().unwrap(), &m).unwrap();
            for (name, &t) in &plan.trainable {
                assert_eq!(t, plan.lr[name] > 0.0, "{s} {name}");
                if let Some(layer) = Model::bn_layer_of(name) {
                    assert_eq!(plan.bn_update_running[layer], t);
                }
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in ["scratch", "fc", "cnn-fc", "bn-fc", "all-uniform", "diff-lr", "partial-bn=3,4"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert_eq!("partial-bn=4,3".parse::<Strategy>().unwrap().to_string(), "partial-bn=3,4");
        for bad in ["bn", "partial-bn=", "partial-bn=0", "partial-bn=a", "FC"] {
            assert!(bad.parse::<Strategy>().is_err(), "{bad}");
        }
    }
}
