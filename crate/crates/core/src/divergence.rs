//! Per-layer Gaussian fits and closed-form KL divergence between checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::mininet::{tensor_layout, Checkpoint, ParamKind, TensorRole};

/// Variances below this are floored and flagged degenerate.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mu: f64,
    pub sigma2: f64,
    pub n: usize,
    pub degenerate: bool,
}

/// Mean and population variance, accumulated in f64.
pub fn fit_gaussian(values: &[f32]) -> Result<GaussianSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput("fit_gaussian"));
    }
    let n = values.len() as f64;
    let mu = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n;
    let degenerate = var < VARIANCE_FLOOR;
    Ok(GaussianSummary {
        mu,
        sigma2: if degenerate { VARIANCE_FLOOR } else { var },
        n: values.len(),
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KlMode {
    /// `KL(A || B)` of two univariate Gaussians.
    #[default]
    #[serde(rename = "standard")]
    Standard,
    /// The standard value plus 1/2: the closed form without its constant term.
    #[serde(rename = "paper")]
    PaperVerbatim,
}

impl fmt::Display for KlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlMode::Standard => "standard",
            KlMode::PaperVerbatim => "paper",
        })
    }
}

impl FromStr for KlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(KlMode::Standard),
            "paper" => Ok(KlMode::PaperVerbatim),
            _ => Err(Error::Config(format!("unknown divergence mode `{s}` (expected standard or paper)"))),
        }
    }
}

/// `ln(σ_B/σ_A) + (σ_A² + (μ_A − μ_B)²) / (2σ_B²) − 1/2`, clamped at 0
/// against round-off; [`KlMode::PaperVerbatim`] adds exactly 0.5.
pub fn kl_divergence(a: &GaussianSummary, b: &GaussianSummary, mode: KlMode) -> Result<f64> {
    for (side, g) in [("a", a), ("b", b)] {
        if !g.mu.is_finite() || !g.sigma2.is_finite() {
            return Err(Error::Numeric {
                context: "kl_divergence".into(),
                reason: format!("non-finite summary {side}: mu={} sigma2={}", g.mu, g.sigma2),
            });
        }
        if g.sigma2 <= 0.0 {
            return Err(Error::Numeric {
                context: "kl_divergence".into(),
                reason: format!("summary {side} has non-positive variance {}", g.sigma2),
            });
        }
    }
    let d = a.mu - b.mu;
    let kl = 0.5 * (b.sigma2 / a.sigma2).ln() + (a.sigma2 + d * d) / (2.0 * b.sigma2) - 0.5;
    if !kl.is_finite() {
        return Err(Error::Numeric { context: "kl_divergence".into(), reason: format!("result {kl}") });
    }
    let kl = kl.max(0.0);
    Ok(match mode {
        KlMode::Standard => kl,
        KlMode::PaperVerbatim => kl + 0.5,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DivGroup {
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "bn-weight")]
    BnWeight,
    #[serde(rename = "bn-bias")]
    BnBias,
    #[serde(rename = "fc")]
    Fc,
}

impl DivGroup {
    pub const ALL: [DivGroup; 4] = [DivGroup::Cnn, DivGroup::BnWeight, DivGroup::BnBias, DivGroup::Fc];

    /// Profiled kinds only: conv and FC biases have no group.
    pub fn of(kind: ParamKind) -> Option<Self> {
        match kind {
            ParamKind::ConvWeight => Some(DivGroup::Cnn),
            ParamKind::BnGamma => Some(DivGroup::BnWeight),
            ParamKind::BnBeta => Some(DivGroup::BnBias),
            ParamKind::FcWeight => Some(DivGroup::Fc),
            ParamKind::ConvBias | ParamKind::FcBias => None,
        }
    }

    pub fn is_bn(self) -> bool {
        matches!(self, DivGroup::BnWeight | DivGroup::BnBias)
    }
}

impl fmt::Display for DivGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivGroup::Cnn => "cnn",
            DivGroup::BnWeight => "bn-weight",
            DivGroup::BnBias => "bn-bias",
            DivGroup::Fc => "fc",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GroupFilter {
    #[default]
    All,
    Bn,
    Only(DivGroup),
}

impl GroupFilter {
    pub fn accepts(self, group: DivGroup) -> bool {
        match self {
            GroupFilter::All => true,
            GroupFilter::Bn => group.is_bn(),
            GroupFilter::Only(g) => g == group,
        }
    }
}

impl FromStr for GroupFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => GroupFilter::All,
            "bn" => GroupFilter::Bn,
            "cnn" => GroupFilter::Only(DivGroup::Cnn),
            "bn-weight" => GroupFilter::Only(DivGroup::BnWeight),
            "bn-bias" => GroupFilter::Only(DivGroup::BnBias),
            "fc" => GroupFilter::Only(DivGroup::Fc),
            _ => {
                return Err(Error::Config(format!(
                    "unknown group `{s}` (expected all, bn, cnn, bn-weight, bn-bias or fc)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceRow {
    pub layer_name: String,
    pub stage: usize,
    pub group: DivGroup,
    pub mode: KlMode,
    pub kl: f64,
    /// Either side was floored.
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceProfile {
    pub checkpoint_a: String,
    pub checkpoint_b: String,
    pub rows: Vec<DivergenceRow>,
}

fn mismatch(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut names = Vec::new();
    for (name, t) in &a.tensors {
        match b.tensors.get(name) {
            Some(u) if u.shape() == t.shape() => {}
            _ => names.push(name.clone()),
        }
    }
    names.extend(b.tensors.keys().filter(|n| !a.tensors.contains_key(*n)).cloned());
    if names.is_empty() && !a.tensors.keys().eq(b.tensors.keys()) {
        names.push("<tensor order>".into());
    }
    names
}

/// One row per profiled tensor in model definition order. `B` is the
/// reference distribution: rows hold `KL(a || b)`.
pub fn layer_divergence_profile(
    a: &Checkpoint,
    b: &Checkpoint,
    filter: GroupFilter,
    mode: KlMode,
) -> Result<DivergenceProfile> {
    let diff = mismatch(a, b);
    if !diff.is_empty() {
        return Err(Error::Comparison(diff));
    }
    let mut rows = Vec::new();
    for slot in tensor_layout(&a.config) {
        let TensorRole::Param(meta) = slot.role else { continue };
        let Some(group) = DivGroup::of(meta.kind) else { continue };
        if !filter.accepts(group) {
            continue;
        }
        let (Some(ta), Some(tb)) = (a.tensors.get(&slot.name), b.tensors.get(&slot.name)) else {
            return Err(Error::Comparison(vec![slot.name]));
        };
        let (ga, gb) = (fit_gaussian(ta.data())?, fit_gaussian(tb.data())?);
        rows.push(DivergenceRow {
            kl: kl_divergence(&ga, &gb, mode)?,
            layer_name: slot.name,
            stage: meta.stage,
            group,
            mode,
            degenerate: ga.degenerate || gb.degenerate,
        });
    }
    Ok(DivergenceProfile { checkpoint_a: String::new(), checkpoint_b: String::new(), rows })
}

impl DivergenceProfile {
    pub fn with_labels(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.checkpoint_a = a.into();
        self.checkpoint_b = b.into();
        self
    }

    pub fn group_rows(&self, group: DivGroup) -> impl Iterator<Item = &DivergenceRow> {
        self.rows.iter().filter(move |r| r.group == group)
    }

    pub fn mean_kl(&self, accept: impl Fn(DivGroup) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| accept(r.group)).map(|r| r.kl).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Spearman correlation between conv depth index and CNN-weight KL.
    pub fn cnn_depth_correlation(&self) -> Option<f64> {
        let kl: Vec<f64> = self.group_rows(DivGroup::Cnn).map(|r| r.kl).collect();
        let depth: Vec<f64> = (0..kl.len()).map(|i| i as f64).collect();
        spearman(&depth, &kl)
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation with average ranks for ties. `None` when fewer than two
/// points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!("unknown report format `{s}` (expected csv or json)"))),
        }
    }
}

pub const REPORT_HEADER: [&str; 6] = ["layer_name", "stage", "group", "mode", "kl", "degenerate"];

pub fn divergence_csv(profile: &DivergenceProfile) -> Result<Vec<u8>> {
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in &profile.rows {
        w.write_record([
            r.layer_name.clone(),
            r.stage.to_string(),
            r.group.to_string(),
            r.mode.to_string(),
            r.kl.to_string(),
            r.degenerate.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

pub fn emit_divergence_report(profile: &DivergenceProfile, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Csv => divergence_csv(profile)?,
        ReportFormat::Json => {
            let mut b = serde_json::to_vec_pretty(profile)?;
            b.push(b'\n');
            b
        }
    };
    write_atomic(path, &bytes)
}

pub fn read_divergence_json(path: &Path) -> Result<DivergenceProfile> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}
