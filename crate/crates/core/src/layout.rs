//! Pipeline × expert/data parallel layout planning.
//!
//! Each pipeline stage owns a contiguous block of layers and `width` local
//! ranks. For MoE layers the local ranks form the expert-parallel group (each
//! owns a contiguous slice of routed experts); for everything else they form
//! the data-parallel group and hold full replicas.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{ParamKind, ParamName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// Leading layers that use a dense MLP; the rest are MoE.
    pub num_dense_layers: usize,
    pub num_routed_experts: usize,
    pub has_shared_expert: bool,
}

impl ModelConfig {
    /// 61 layers, 3 dense, 256 routed experts plus a shared expert.
    pub fn reference_scale() -> Self {
        ModelConfig {
            num_layers: 61,
            num_dense_layers: 3,
            num_routed_experts: 256,
            has_shared_expert: true,
        }
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        layer >= self.num_dense_layers && layer < self.num_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub pp: usize,
    /// Ranks per stage; both the expert-parallel and data-parallel degree.
    pub width: usize,
}

impl ParallelConfig {
    pub fn total_ranks(&self) -> usize {
        self.pp * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankId {
    pub stage: usize,
    pub local: usize,
}

impl RankId {
    pub fn new(stage: usize, local: usize) -> Self {
        RankId { stage, local }
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.stage, self.local)
    }
}

/// Half-open index range `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutPlan {
    #[serde(flatten)]
    pub parallel: ParallelConfig,
    pub model: ModelConfig,
    pub stage_layers: Vec<Span>,
    pub expert_ranges: Vec<Span>,
    pub embedding_stage: usize,
    pub head_stage: usize,
    pub moe_stages: Vec<usize>,
}

/// Splits `n` items into `parts` contiguous blocks whose sizes differ by at
/// most one, larger blocks first.
fn balanced_split(n: usize, parts: usize) -> Vec<Span> {
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let span = Span::new(start, start + len);
            start += len;
            span
        })
        .collect()
}

pub fn plan_layout(model: ModelConfig, parallel: ParallelConfig) -> Result<LayoutPlan> {
    if parallel.pp == 0 || parallel.width == 0 {
        return Err(Error::InfeasibleLayout(
            "pp and width must be positive".into(),
        ));
    }
    if model.num_layers == 0 || model.num_routed_experts == 0 {
        return Err(Error::InfeasibleLayout(
            "model needs at least one layer and one routed expert".into(),
        ));
    }
    if model.num_dense_layers > model.num_layers {
        return Err(Error::InfeasibleLayout(format!(
            "{} dense layers exceed {} total layers",
            model.num_dense_layers, model.num_layers
        )));
    }
    if model.num_layers < parallel.pp {
        return Err(Error::InfeasibleLayout(format!(
            "{} layers cannot fill {} pipeline stages",
            model.num_layers, parallel.pp
        )));
    }
    if !model.num_routed_experts.is_multiple_of(parallel.width) {
        return Err(Error::InfeasibleLayout(format!(
            "{} routed experts do not divide evenly over width {}",
            model.num_routed_experts, parallel.width
        )));
    }

    let stage_layers = balanced_split(model.num_layers, parallel.pp);
    let expert_ranges = balanced_split(model.num_routed_experts, parallel.width);
    let moe_stages = moe_stages_of(&stage_layers, &model);
    Ok(LayoutPlan {
        parallel,
        model,
        stage_layers,
        expert_ranges,
        embedding_stage: 0,
        head_stage: parallel.pp - 1,
        moe_stages,
    })
}

fn moe_stages_of(stage_layers: &[Span], model: &ModelConfig) -> Vec<usize> {
    stage_layers
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.end > model.num_dense_layers && s.start < model.num_layers && !s.is_empty()
        })
        .map(|(i, _)| i)
        .collect()
}

impl LayoutPlan {
    pub fn total_ranks(&self) -> usize {
        self.parallel.total_ranks()
    }

    /// All ranks in (stage, local) order.
    pub fn ranks(&self) -> impl Iterator<Item = RankId> + '_ {
        (0..self.parallel.pp)
            .flat_map(move |s| (0..self.parallel.width).map(move |l| RankId::new(s, l)))
    }

    pub fn stage_ranks(&self, stage: usize) -> impl Iterator<Item = RankId> {
        (0..self.parallel.width).map(move |l| RankId::new(stage, l))
    }

    pub fn stage_of_layer(&self, layer: usize) -> Option<usize> {
        self.stage_layers.iter().position(|s| s.contains(layer))
    }

    pub fn expert_owner(&self, expert: usize) -> Option<usize> {
        self.expert_ranges.iter().position(|r| r.contains(expert))
    }

    pub fn is_moe_stage(&self, stage: usize) -> bool {
        self.moe_stages.binary_search(&stage).is_ok()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a plan and rejects it unless it validates cleanly.
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: LayoutPlan = serde_json::from_str(text)?;
        let report = validate_layout(&plan);
        if !report.is_valid() {
            return Err(Error::InvalidPlan(report.to_string()));
        }
        Ok(plan)
    }
}

/// Ranks that hold `name` under `plan`. Empty for unlayered names the plan
/// has no home for.
pub fn assign_param(name: &ParamName, plan: &LayoutPlan) -> Result<BTreeSet<RankId>> {
    let last = plan.head_stage;
    let layer_stage = |layer: usize| {
        plan.stage_of_layer(layer).ok_or(Error::UnknownLayer {
            layer,
            num_layers: plan.model.num_layers,
        })
    };
    let owners = match (name.kind, name.layer) {
        (ParamKind::Embedding, _) => plan.stage_ranks(plan.embedding_stage).collect(),
        (ParamKind::OutputHead, _) | (ParamKind::Norm, None) => plan.stage_ranks(last).collect(),
        (ParamKind::Other, None) => BTreeSet::new(),
        (ParamKind::RoutedExpert(e), Some(layer)) => {
            let stage = layer_stage(layer)?;
            let local = plan.expert_owner(e).ok_or(Error::UnknownExpert {
                expert: e,
                num_experts: plan.model.num_routed_experts,
            })?;
            BTreeSet::from([RankId::new(stage, local)])
        }
        (_, Some(layer)) => plan.stage_ranks(layer_stage(layer)?).collect(),
        (_, None) => BTreeSet::new(),
    };
    Ok(owners)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    StageCount {
        expected: usize,
        found: usize,
    },
    ExpertRangeCount {
        expected: usize,
        found: usize,
    },
    LayerGap {
        stage: usize,
        expected_start: usize,
        found_start: usize,
    },
    LayerOverlap {
        stage: usize,
        expected_start: usize,
        found_start: usize,
    },
    EmptyStage {
        stage: usize,
    },
    LayerCoverage {
        covered_to: usize,
        num_layers: usize,
    },
    StageImbalance {
        smallest: usize,
        largest: usize,
    },
    ExpertOverlap {
        first: usize,
        second: usize,
    },
    ExpertGap {
        local: usize,
        expected_start: usize,
        found_start: usize,
    },
    ExpertCoverage {
        covered_to: usize,
        num_experts: usize,
    },
    EmbeddingStage {
        found: usize,
    },
    HeadStage {
        expected: usize,
        found: usize,
    },
    MoeStages {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StageCount { expected, found } => {
                write!(f, "plan has {found} stage ranges, expected {expected}")
            }
            Violation::ExpertRangeCount { expected, found } => {
                write!(f, "plan has {found} expert ranges, expected {expected}")
            }
            Violation::LayerGap { stage, expected_start, found_start } => write!(
                f,
                "stage {stage}: layers {expected_start}..{found_start} are not assigned"
            ),
            Violation::LayerOverlap { stage, expected_start, found_start } => write!(
                f,
                "stage {stage}: starts at layer {found_start}, overlapping the previous stage (expected {expected_start})"
            ),
            Violation::EmptyStage { stage } => write!(f, "stage {stage}: no layers"),
            Violation::LayerCoverage { covered_to, num_layers } => write!(
                f,
                "layers {covered_to}..{num_layers} are not covered by any stage"
            ),
            Violation::StageImbalance { smallest, largest } => write!(
                f,
                "stage sizes range from {smallest} to {largest} layers"
            ),
            Violation::ExpertOverlap { first, second } => write!(
                f,
                "local ranks {first} and {second} have overlapping expert ranges"
            ),
            Violation::ExpertGap { local, expected_start, found_start } => write!(
                f,
                "local rank {local}: experts {expected_start}..{found_start} are not assigned"
            ),
            Violation::ExpertCoverage { covered_to, num_experts } => write!(
                f,
                "experts {covered_to}..{num_experts} are not covered by any rank"
            ),
            Violation::EmbeddingStage { found } => {
                write!(f, "embedding on stage {found}, expected 0")
            }
            Violation::HeadStage { expected, found } => {
                write!(f, "head on stage {found}, expected {expected}")
            }
            Violation::MoeStages { expected, found } => {
                write!(f, "moe_stages {found:?}, expected {expected:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("plan is valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Walks `spans` in order and reports gaps, overlaps and short coverage.
fn check_spans(
    spans: &[Span],
    total: usize,
    on_gap: impl Fn(usize, usize, usize) -> Violation,
    on_overlap: impl Fn(usize, usize, usize) -> Violation,
    on_short: impl Fn(usize) -> Violation,
    out: &mut Vec<Violation>,
) {
    let mut cursor = 0;
    for (i, span) in spans.iter().enumerate() {
        if span.start > cursor {
            out.push(on_gap(i, cursor, span.start));
        } else if span.start < cursor {
            out.push(on_overlap(i, cursor, span.start));
        }
        cursor = cursor.max(span.end);
    }
    if cursor < total {
        out.push(on_short(cursor));
    }
}

pub fn validate_layout(plan: &LayoutPlan) -> ValidationReport {
    let mut v = Vec::new();
    let pp = plan.parallel.pp;
    let width = plan.parallel.width;
    let model = &plan.model;

    if plan.stage_layers.len() != pp {
        v.push(Violation::StageCount {
            expected: pp,
            found: plan.stage_layers.len(),
        });
    }
    if plan.expert_ranges.len() != width {
        v.push(Violation::ExpertRangeCount {
            expected: width,
            found: plan.expert_ranges.len(),
        });
    }

    for (stage, span) in plan.stage_layers.iter().enumerate() {
        if span.is_empty() {
            v.push(Violation::EmptyStage { stage });
        }
    }
    check_spans(
        &plan.stage_layers,
        model.num_layers,
        |stage, expected_start, found_start| Violation::LayerGap {
            stage,
            expected_start,
            found_start,
        },
        |stage, expected_start, found_start| Violation::LayerOverlap {
            stage,
            expected_start,
            found_start,
        },
        |covered_to| Violation::LayerCoverage {
            covered_to,
            num_layers: model.num_layers,
        },
        &mut v,
    );
    let sizes = plan.stage_layers.iter().map(Span::len);
    if let (Some(smallest), Some(largest)) = (sizes.clone().min(), sizes.max()) {
        if largest - smallest > 1 {
            v.push(Violation::StageImbalance { smallest, largest });
        }
    }

    check_spans(
        &plan.expert_ranges,
        model.num_routed_experts,
        |local, expected_start, found_start| Violation::ExpertGap {
            local,
            expected_start,
            found_start,
        },
        |local, _, _| {
            // the earlier rank whose range reaches into this one
            let start = plan.expert_ranges[local].start;
            let first = plan.expert_ranges[..local]
                .iter()
                .rposition(|r| r.end > start)
                .unwrap_or(local.saturating_sub(1));
            Violation::ExpertOverlap {
                first,
                second: local,
            }
        },
        |covered_to| Violation::ExpertCoverage {
            covered_to,
            num_experts: model.num_routed_experts,
        },
        &mut v,
    );

    if plan.embedding_stage != 0 {
        v.push(Violation::EmbeddingStage {
            found: plan.embedding_stage,
        });
    }
    if plan.head_stage + 1 != pp {
        v.push(Violation::HeadStage {
            expected: pp.saturating_sub(1),
            found: plan.head_stage,
        });
    }
    let expected_moe = moe_stages_of(&plan.stage_layers, model);
    if plan.moe_stages != expected_moe {
        v.push(Violation::MoeStages {
            expected: expected_moe,
            found: plan.moe_stages.clone(),
        });
    }
    ValidationReport { violations: v }
}
