//! Lockstep simulation of per-rank collective programs.
//!
//! A collective is a rendezvous: the k-th call a rank issues on a group
//! matches the k-th call of every other member, and nobody leaves until all
//! members have arrived. No data moves; only arrival order matters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutPlan, RankId};

pub const DENSE_GROUP: &str = "dense_optimizer";
pub const MOE_GROUP: &str = "moe_optimizer";
pub const DENSE_ALLREDUCE: &str = "dense_grad_allreduce";
pub const MOE_ALLREDUCE: &str = "moe_grad_allreduce";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessGroup {
    pub name: String,
    pub members: BTreeSet<RankId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Real,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveCall {
    pub group: String,
    pub op_tag: String,
    pub payload: Payload,
}

impl CollectiveCall {
    pub fn new(group: &str, op_tag: &str, payload: Payload) -> Self {
        CollectiveCall {
            group: group.to_string(),
            op_tag: op_tag.to_string(),
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankProgram {
    pub rank: RankId,
    pub calls: Vec<CollectiveCall>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Completed,
    Deadlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockedSite {
    pub call_index: usize,
    pub group: String,
}

/// A group collective that some members reached and others never will.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StuckCollective {
    pub group: String,
    /// Per-group sequence number of the stuck collective.
    pub index: usize,
    pub op_tag: String,
    pub arrived: Vec<RankId>,
    /// Members whose programs ended without reaching this collective.
    pub never_arrives: Vec<RankId>,
    /// Members blocked in a different collective.
    pub blocked_elsewhere: Vec<RankId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub verdict: Verdict,
    #[serde(with = "blocked_serde")]
    pub blocked: BTreeMap<RankId, BlockedSite>,
    pub steps: usize,
    pub stuck: Vec<StuckCollective>,
}

mod blocked_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        stage: usize,
        local: usize,
        call_index: usize,
        group: String,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<RankId, BlockedSite>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(r, site)| Entry {
                stage: r.stage,
                local: r.local,
                call_index: site.call_index,
                group: site.group.clone(),
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<RankId, BlockedSite>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| {
                (
                    RankId::new(e.stage, e.local),
                    BlockedSite {
                        call_index: e.call_index,
                        group: e.group,
                    },
                )
            })
            .collect())
    }
}

impl SimOutcome {
    pub fn is_completed(&self) -> bool {
        self.verdict == Verdict::Completed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepProgram {
    pub groups: Vec<ProcessGroup>,
    pub programs: Vec<RankProgram>,
}

/// One optimizer step: a dense all-reduce on every rank, then an MoE
/// all-reduce on ranks of MoE stages. With `stub_enabled`, ranks on
/// dense-only stages join the MoE collective with an empty payload.
pub fn build_step_program(plan: &LayoutPlan, stub_enabled: bool) -> StepProgram {
    let all: BTreeSet<RankId> = plan.ranks().collect();
    let groups = vec![
        ProcessGroup {
            name: DENSE_GROUP.into(),
            members: all.clone(),
        },
        ProcessGroup {
            name: MOE_GROUP.into(),
            members: all,
        },
    ];
    let programs = plan
        .ranks()
        .map(|rank| {
            let mut calls = vec![CollectiveCall::new(
                DENSE_GROUP,
                DENSE_ALLREDUCE,
                Payload::Real,
            )];
            if plan.is_moe_stage(rank.stage) {
                calls.push(CollectiveCall::new(MOE_GROUP, MOE_ALLREDUCE, Payload::Real));
            } else if stub_enabled {
                calls.push(CollectiveCall::new(
                    MOE_GROUP,
                    MOE_ALLREDUCE,
                    Payload::Empty,
                ));
            }
            RankProgram { rank, calls }
        })
        .collect();
    StepProgram { groups, programs }
}

struct RankState<'a> {
    calls: &'a [CollectiveCall],
    pc: usize,
    /// Group index and per-group sequence number of the pending call.
    waiting: Option<(usize, usize)>,
    issued: Vec<usize>,
}

impl RankState<'_> {
    fn finished(&self) -> bool {
        self.pc == self.calls.len() && self.waiting.is_none()
    }
}

pub fn simulate(groups: &[ProcessGroup], programs: &[RankProgram]) -> Result<SimOutcome> {
    let mut group_index = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        if g.members.is_empty() {
            return Err(Error::InvalidProgram(format!(
                "group `{}` has no members",
                g.name
            )));
        }
        if group_index.insert(g.name.as_str(), i).is_some() {
            return Err(Error::InvalidProgram(format!(
                "group `{}` declared twice",
                g.name
            )));
        }
    }

    let mut states: BTreeMap<RankId, RankState> = BTreeMap::new();
    for p in programs {
        for c in &p.calls {
            let gi = *group_index.get(c.group.as_str()).ok_or_else(|| {
                Error::InvalidProgram(format!(
                    "rank {} calls undeclared group `{}`",
                    p.rank, c.group
                ))
            })?;
            if !groups[gi].members.contains(&p.rank) {
                return Err(Error::InvalidProgram(format!(
                    "rank {} is not a member of `{}`",
                    p.rank, c.group
                )));
            }
            if c.op_tag.is_empty() {
                return Err(Error::InvalidProgram(format!(
                    "rank {} issues an empty op tag",
                    p.rank
                )));
            }
        }
        let state = RankState {
            calls: &p.calls,
            pc: 0,
            waiting: None,
            issued: vec![0; groups.len()],
        };
        if states.insert(p.rank, state).is_some() {
            return Err(Error::InvalidProgram(format!(
                "rank {} has two programs",
                p.rank
            )));
        }
    }
    // members without a program behave like finished ranks
    for g in groups {
        for &m in &g.members {
            states.entry(m).or_insert_with(|| RankState {
                calls: &[],
                pc: 0,
                waiting: None,
                issued: vec![0; groups.len()],
            });
        }
    }

    let mut completed = vec![0usize; groups.len()];
    let mut steps = 0;
    loop {
        let mut progressed = false;
        // issue phase, round-robin in (stage, local) order
        for state in states.values_mut() {
            if state.waiting.is_none() && state.pc < state.calls.len() {
                let gi = group_index[state.calls[state.pc].group.as_str()];
                state.waiting = Some((gi, state.issued[gi]));
                state.issued[gi] += 1;
                progressed = true;
            }
        }
        // match phase
        for (gi, group) in groups.iter().enumerate() {
            let seq = completed[gi];
            let all_here = group
                .members
                .iter()
                .all(|m| states[m].waiting == Some((gi, seq)));
            if !all_here {
                continue;
            }
            let tags: BTreeSet<&str> = group
                .members
                .iter()
                .map(|m| {
                    let s = &states[m];
                    s.calls[s.pc].op_tag.as_str()
                })
                .collect();
            if tags.len() > 1 {
                return Err(Error::CollectiveMismatch {
                    group: group.name.clone(),
                    index: seq,
                    tags: tags.into_iter().map(str::to_string).collect(),
                });
            }
            for m in &group.members {
                let s = states.get_mut(m).expect("member state");
                s.waiting = None;
                s.pc += 1;
            }
            completed[gi] += 1;
            steps += 1;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }

    if states.values().all(RankState::finished) {
        return Ok(SimOutcome {
            verdict: Verdict::Completed,
            blocked: BTreeMap::new(),
            steps,
            stuck: Vec::new(),
        });
    }

    let blocked: BTreeMap<RankId, BlockedSite> = states
        .iter()
        .filter_map(|(rank, s)| {
            s.waiting.map(|(gi, _)| {
                (
                    *rank,
                    BlockedSite {
                        call_index: s.pc,
                        group: groups[gi].name.clone(),
                    },
                )
            })
        })
        .collect();

    let stuck = groups
        .iter()
        .enumerate()
        .filter_map(|(gi, group)| {
            let seq = completed[gi];
            let mut arrived = Vec::new();
            let mut never = Vec::new();
            let mut elsewhere = Vec::new();
            for m in &group.members {
                let s = &states[m];
                match s.waiting {
                    Some(w) if w == (gi, seq) => arrived.push(*m),
                    Some(_) => elsewhere.push(*m),
                    None => never.push(*m),
                }
            }
            let first = arrived.first()?;
            let s = &states[first];
            Some(StuckCollective {
                group: group.name.clone(),
                index: seq,
                op_tag: s.calls[s.pc].op_tag.clone(),
                arrived,
                never_arrives: never,
                blocked_elsewhere: elsewhere,
            })
        })
        .collect();

    Ok(SimOutcome {
        verdict: Verdict::Deadlock,
        blocked,
        steps,
        stuck,
    })
}

fn rank_list(ranks: &[RankId]) -> String {
    ranks
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Human-readable summary of an outcome.
pub fn explain(outcome: &SimOutcome) -> String {
    match outcome.verdict {
        Verdict::Completed => format!("completed; {} collectives matched", outcome.steps),
        Verdict::Deadlock => {
            let mut out = format!(
                "deadlock; {} collectives matched, {} ranks blocked\n",
                outcome.steps,
                outcome.blocked.len()
            );
            for s in &outcome.stuck {
                let missing = s.never_arrives.len() + s.blocked_elsewhere.len();
                let _ = writeln!(
                    out,
                    "group {} collective #{} ({}): {} arrived, {} missing",
                    s.group,
                    s.index,
                    s.op_tag,
                    s.arrived.len(),
                    missing
                );
                if !s.never_arrives.is_empty() {
                    let _ = writeln!(out, "  never arrives: {}", rank_list(&s.never_arrives));
                }
                if !s.blocked_elsewhere.is_empty() {
                    let _ = writeln!(
                        out,
                        "  blocked elsewhere: {}",
                        rank_list(&s.blocked_elsewhere)
                    );
                }
            }
            out.truncate(out.trim_end().len());
            out
        }
    }
}

impl fmt::Display for SimOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&explain(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{plan_layout, ModelConfig, ParallelConfig};
    use proptest::prelude::*;

    fn reference_plan() -> LayoutPlan {
        plan_layout(
            ModelConfig::reference_scale(),
            ParallelConfig { pp: 31, width: 8 },
        )
        .unwrap()
    }

    #[test]
    fn program_shapes() {
        let plan = reference_plan();
        let off = build_step_program(&plan, false);
        for p in &off.programs {
            assert_eq!(p.calls.len(), if p.rank.stage == 0 { 1 } else { 2 });
        }
        let on = build_step_program(&plan, true);
        for p in &on.programs {
            assert_eq!(p.calls.len(), 2);
            let expected = if p.rank.stage == 0 {
                Payload::Empty
            } else {
                Payload::Real
            };
            assert_eq!(p.calls[1].payload, expected);
        }
    }

    #[test]
    fn single_rank_moe() {
        let model = ModelConfig {
            num_layers: 2,
            num_dense_layers: 1,
            num_routed_experts: 2,
            has_shared_expert: false,
        };
        let plan = plan_layout(model, ParallelConfig { pp: 1, width: 1 }).unwrap();
        let step = build_step_program(&plan, false);
        assert_eq!(step.programs.len(), 1);
        assert_eq!(step.programs[0].calls.len(), 2);
        let out = simulate(&step.groups, &step.programs).unwrap();
        assert_eq!((out.verdict, out.steps), (Verdict::Completed, 2));
    }

    #[test]
    fn reference_deadlock_and_fix() {
        let plan = reference_plan();
        let step = build_step_program(&plan, false);
        let out = simulate(&step.groups, &step.programs).unwrap();
        assert_eq!(out.verdict, Verdict::Deadlock);
        assert_eq!(out.blocked.len(), 240);
        assert!(out
            .blocked
            .values()
            .all(|s| s.group == MOE_GROUP && s.call_index == 1));
        assert!(out.blocked.keys().all(|r| r.stage != 0));
        assert_eq!(out.steps, 1);
        assert_eq!(out.stuck.len(), 1);
        assert_eq!(
            out.stuck[0].never_arrives,
            plan.stage_ranks(0).collect::<Vec<_>>()
        );

        let report = explain(&out);
        assert!(report.contains("group moe_optimizer"));
        assert!(report
            .contains("never arrives: (0, 0) (0, 1) (0, 2) (0, 3) (0, 4) (0, 5) (0, 6) (0, 7)"));

        let fixed = build_step_program(&plan, true);
        let out = simulate(&fixed.groups, &fixed.programs).unwrap();
        assert_eq!((out.verdict, out.steps), (Verdict::Completed, 2));
        assert_eq!(explain(&out), "completed; 2 collectives matched");
    }

    #[test]
    fn cyclic_wait() {
        let a = RankId::new(0, 0);
        let b = RankId::new(0, 1);
        let members = BTreeSet::from([a, b]);
        let groups = vec![
            ProcessGroup {
                name: "g1".into(),
                members: members.clone(),
            },
            ProcessGroup {
                name: "g2".into(),
                members,
            },
        ];
        let call = |g: &str| CollectiveCall::new(g, "x", Payload::Real);
        let programs = vec![
            RankProgram {
                rank: a,
                calls: vec![call("g1"), call("g2")],
            },
            RankProgram {
                rank: b,
                calls: vec![call("g2"), call("g1")],
            },
        ];
        let out = simulate(&groups, &programs).unwrap();
        assert_eq!(out.verdict, Verdict::Deadlock);
        assert_eq!(out.blocked.len(), 2);
        assert!(out.blocked.values().all(|s| s.call_index == 0));
        assert_eq!(out.blocked[&a].group, "g1");
        assert_eq!(out.blocked[&b].group, "g2");
    }

    #[test]
    fn mismatched_tags() {
        let a = RankId::new(0, 0);
        let b = RankId::new(1, 0);
        let groups = vec![ProcessGroup {
            name: "g".into(),
            members: BTreeSet::from([a, b]),
        }];
        let programs = vec![
            RankProgram {
                rank: a,
                calls: vec![CollectiveCall::new("g", "allreduce", Payload::Real)],
            },
            RankProgram {
                rank: b,
                calls: vec![CollectiveCall::new("g", "broadcast", Payload::Real)],
            },
        ];
        match simulate(&groups, &programs) {
            Err(Error::CollectiveMismatch { group, index, tags }) => {
                assert_eq!((group.as_str(), index), ("g", 0));
                assert_eq!(tags, vec!["allreduce", "broadcast"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_programs() {
        let out = simulate(&[], &[]).unwrap();
        assert_eq!(explain(&out), "completed; 0 collectives matched");
    }

    #[test]
    fn undeclared_group() {
        let programs = vec![RankProgram {
            rank: RankId::new(0, 0),
            calls: vec![CollectiveCall::new("ghost", "x", Payload::Real)],
        }];
        assert!(matches!(
            simulate(&[], &programs),
            Err(Error::InvalidProgram(_))
        ));
    }

    #[test]
    fn multi_step_programs() {
        let plan = plan_layout(
            ModelConfig {
                num_layers: 4,
                num_dense_layers: 1,
                num_routed_experts: 2,
                has_shared_expert: true,
            },
            ParallelConfig { pp: 2, width: 2 },
        )
        .unwrap();
        let mut step = build_step_program(&plan, true);
        for p in &mut step.programs {
            let once = p.calls.clone();
            p.calls.extend(once.iter().cloned());
            p.calls.extend(once);
        }
        let out = simulate(&step.groups, &step.programs).unwrap();
        assert_eq!((out.verdict, out.steps), (Verdict::Completed, 6));
    }

    fn plan_strategy() -> impl Strategy<Value = LayoutPlan> {
        (1usize..6, 1usize..4, 0usize..4, 0usize..8).prop_map(|(pp, width, extra, dense)| {
            let num_layers = pp + extra;
            plan_layout(
                ModelConfig {
                    num_layers,
                    num_dense_layers: dense.min(num_layers),
                    num_routed_experts: width,
                    has_shared_expert: true,
                },
                ParallelConfig { pp, width },
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn stub_always_completes(plan in plan_strategy()) {
            let step = build_step_program(&plan, true);
            let out = simulate(&step.groups, &step.programs).unwrap();
            prop_assert!(out.is_completed());
            prop_assert!(out.blocked.is_empty());
        }

        #[test]
        fn missing_stub_deadlocks_partial_moe(plan in plan_strategy()) {
            let step = build_step_program(&plan, false);
            let out = simulate(&step.groups, &step.programs).unwrap();
            let partial = !plan.moe_stages.is_empty() && plan.moe_stages.len() < plan.parallel.pp;
            if partial {
                prop_assert_eq!(out.verdict, Verdict::Deadlock);
                prop_assert!(!out.blocked.is_empty());
            } else {
                prop_assert!(out.is_completed());
            }
            // deterministic
            prop_assert_eq!(&out, &simulate(&step.groups, &step.programs).unwrap());
        }

        #[test]
        fn payload_does_not_affect_verdict(plan in plan_strategy(), stub in any::<bool>()) {
            let step = build_step_program(&plan, stub);
            let emptied: Vec<RankProgram> = step.programs.iter().cloned().map(|mut p| {
                for c in &mut p.calls { c.payload = Payload::Empty; }
                p
            }).collect();
            let a = simulate(&step.groups, &step.programs).unwrap();
            let b = simulate(&step.groups, &emptied).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
