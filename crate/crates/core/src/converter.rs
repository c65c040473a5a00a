//! Release checkpoint <-> per-rank trainer shards.
//!
//! Forward: cast to BF16, group by layer, rename into the trainer scheme and
//! split by owning rank. Reverse: load shards, verify replicas agree, rename
//! back and cast to the requested dtype.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{assign_param, validate_layout, LayoutPlan, RankId};
use crate::tensor_store::{
    parse_param_name, read_checkpoint, write_atomic, write_checkpoint, Dtype, FlatCheckpoint,
    ParamKind, TensorSpec,
};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Release prefix -> trainer prefix. Names matching none of these get
/// [`TRAINER_EXTRA_PREFIX`] prepended, which keeps the mapping a bijection.
const RENAMES: [(&str, &str); 4] = [
    ("model.layers.", "decoder.layers."),
    ("model.embed_tokens.", "embedding.word_embeddings."),
    ("model.norm.", "decoder.final_layernorm."),
    ("lm_head.", "output_layer."),
];
const TRAINER_EXTRA_PREFIX: &str = "extra.";

pub fn rename_to_trainer(release: &str) -> String {
    for (from, to) in RENAMES {
        if let Some(rest) = release.strip_prefix(from) {
            return format!("{to}{rest}");
        }
    }
    format!("{TRAINER_EXTRA_PREFIX}{release}")
}

pub fn rename_to_release(trainer: &str) -> Result<String> {
    for (from, to) in RENAMES {
        if let Some(rest) = trainer.strip_prefix(to) {
            return Ok(format!("{from}{rest}"));
        }
    }
    if let Some(rest) = trainer.strip_prefix(TRAINER_EXTRA_PREFIX) {
        if RENAMES.iter().all(|(from, _)| !rest.starts_with(from)) {
            return Ok(rest.to_string());
        }
    }
    Err(Error::UnknownTrainerName(trainer.to_string()))
}

pub fn shard_file_name(rank: RankId) -> String {
    format!("shard_s{}_l{}.adnk", rank.stage, rank.local)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayeredModel {
    /// Tensors without a layer index, other than the final norm and head.
    pub pre_layers: Vec<TensorSpec>,
    pub layers: Vec<Vec<TensorSpec>>,
    /// Final norm and output head.
    pub post_layers: Vec<TensorSpec>,
}

impl LayeredModel {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tensor_count(&self) -> usize {
        self.pre_layers.len()
            + self.post_layers.len()
            + self.layers.iter().map(Vec::len).sum::<usize>()
    }
}

/// Buckets tensors by layer. Within each bucket tensors are in name order.
pub fn group_tensors(tensors: impl IntoIterator<Item = TensorSpec>) -> Result<LayeredModel> {
    let mut pre = BTreeMap::new();
    let mut post = BTreeMap::new();
    let mut layers: BTreeMap<usize, BTreeMap<String, TensorSpec>> = BTreeMap::new();

    for t in tensors {
        let name = parse_param_name(t.name());
        let bucket = match (name.layer, name.kind) {
            (Some(layer), _) => layers.entry(layer).or_default(),
            (None, ParamKind::Norm | ParamKind::OutputHead) => &mut post,
            (None, _) => &mut pre,
        };
        if bucket.contains_key(t.name()) {
            return Err(Error::DuplicateParam {
                layer: name.layer,
                name: name.raw,
            });
        }
        bucket.insert(t.name().to_string(), t);
    }

    let count = layers.keys().next_back().map_or(0, |&max| max + 1);
    let missing: Vec<usize> = (0..count).filter(|i| !layers.contains_key(i)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingLayer { missing });
    }
    Ok(LayeredModel {
        pre_layers: pre.into_values().collect(),
        layers: layers
            .into_values()
            .map(|g| g.into_values().collect())
            .collect(),
        post_layers: post.into_values().collect(),
    })
}

pub fn group_by_layers(c: &FlatCheckpoint) -> Result<LayeredModel> {
    group_tensors(c.tensors().iter().cloned())
}

/// Index entry for one rank's shard file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub stage: usize,
    pub local: usize,
    pub file: String,
    /// Trainer-scheme names, in file order.
    pub params: Vec<String>,
}

impl ShardEntry {
    pub fn rank(&self) -> RankId {
        RankId::new(self.stage, self.local)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan: LayoutPlan,
    pub shards: Vec<ShardEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardSet {
    pub plan: LayoutPlan,
    pub shards: BTreeMap<RankId, FlatCheckpoint>,
}

/// Rejects checkpoints whose structure disagrees with the plan's model.
fn check_against_model(layered: &LayeredModel, plan: &LayoutPlan) -> Result<()> {
    let model = &plan.model;
    if layered.num_layers() != model.num_layers {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} layers, plan expects {}",
            layered.num_layers(),
            model.num_layers
        )));
    }
    for (layer, group) in layered.layers.iter().enumerate() {
        for t in group {
            let name = parse_param_name(t.name());
            let expert_kind = matches!(
                name.kind,
                ParamKind::RoutedExpert(_) | ParamKind::SharedExpert
            );
            if expert_kind && !model.is_moe_layer(layer) {
                return Err(Error::ConfigMismatch(format!(
                    "`{}` is an expert parameter in dense layer {layer}",
                    t.name()
                )));
            }
            if name.kind == ParamKind::SharedExpert && !model.has_shared_expert {
                return Err(Error::ConfigMismatch(format!(
                    "`{}` is a shared expert but the model has none",
                    t.name()
                )));
            }
        }
    }
    Ok(())
}

pub fn shard(c: &FlatCheckpoint, plan: &LayoutPlan) -> Result<ShardSet> {
    let report = validate_layout(plan);
    if !report.is_valid() {
        return Err(Error::InvalidPlan(report.to_string()));
    }
    let bf16 = c.cast(Dtype::Bf16)?;
    let layered = group_by_layers(&bf16)?;
    check_against_model(&layered, plan)?;

    let mut buckets: BTreeMap<RankId, Vec<TensorSpec>> =
        plan.ranks().map(|r| (r, Vec::new())).collect();
    for t in bf16.into_tensors() {
        let owners = assign_param(&parse_param_name(t.name()), plan)?;
        if owners.is_empty() {
            return Err(Error::OrphanParam(t.name().to_string()));
        }
        let trainer_name = rename_to_trainer(t.name());
        for rank in owners {
            buckets
                .get_mut(&rank)
                .expect("owners come from the plan")
                .push(t.clone().with_name(trainer_name.clone()));
        }
    }

    let shards = buckets
        .into_par_iter()
        .map(|(rank, tensors)| {
            let mut meta = BTreeMap::new();
            meta.insert("stage".to_string(), rank.stage.to_string());
            meta.insert("local".to_string(), rank.local.to_string());
            FlatCheckpoint::from_tensors(tensors, meta).map(|c| (rank, c))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(ShardSet {
        plan: plan.clone(),
        shards,
    })
}

impl ShardSet {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            plan: self.plan.clone(),
            shards: self
                .shards
                .iter()
                .map(|(rank, c)| ShardEntry {
                    stage: rank.stage,
                    local: rank.local,
                    file: shard_file_name(*rank),
                    params: c.names().map(str::to_string).collect(),
                })
                .collect(),
        }
    }

    /// Writes every shard plus `manifest.json` into `dir`. The manifest is
    /// written last so a partial run never looks complete.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.shards
            .par_iter()
            .try_for_each(|(rank, c)| write_checkpoint(c, dir.join(shard_file_name(*rank))))?;
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest)
    }

    /// Loads a shard set from a manifest path or the directory holding it.
    pub fn read(path: impl AsRef<Path>) -> Result<ShardSet> {
        let path = path.as_ref();
        let manifest_path: PathBuf = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;

        let shards = manifest
            .shards
            .par_iter()
            .map(|entry| {
                let file = dir.join(&entry.file);
                if !file.exists() {
                    return Err(Error::IncompleteShardSet(format!(
                        "shard file {} for rank {} is missing",
                        file.display(),
                        entry.rank()
                    )));
                }
                let c = read_checkpoint(&file)?;
                if !c.names().eq(entry.params.iter().map(String::as_str)) {
                    return Err(Error::IncompleteShardSet(format!(
                        "{} does not hold the parameters listed in the manifest",
                        file.display()
                    )));
                }
                Ok((entry.rank(), c))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut by_rank = BTreeMap::new();
        for (rank, c) in shards {
            if by_rank.insert(rank, c).is_some() {
                return Err(Error::Format(format!(
                    "rank {rank} listed twice in manifest"
                )));
            }
        }
        Ok(ShardSet {
            plan: manifest.plan,
            shards: by_rank,
        })
    }
}

/// Reassembles the release checkpoint. Replicated parameters are taken from
/// the lowest-ordered owner after checking every replica is byte-identical.
pub fn merge(set: &ShardSet, target: Dtype) -> Result<FlatCheckpoint> {
    let expected: BTreeSet<RankId> = set.plan.ranks().collect();
    let present: BTreeSet<RankId> = set.shards.keys().copied().collect();
    if let Some(missing) = expected.difference(&present).next() {
        return Err(Error::IncompleteShardSet(format!(
            "no shard for rank {missing} ({} of {} present)",
            present.len(),
            expected.len()
        )));
    }
    if let Some(extra) = present.difference(&expected).next() {
        return Err(Error::ConfigMismatch(format!(
            "shard for rank {extra} is outside the plan"
        )));
    }

    let mut merged: BTreeMap<String, (RankId, &TensorSpec)> = BTreeMap::new();
    for (rank, shard) in &set.shards {
        for t in shard.tensors() {
            let release = rename_to_release(t.name())?;
            match merged.get(&release) {
                Some((first, kept)) => {
                    if kept.dtype() != t.dtype()
                        || kept.shape() != t.shape()
                        || kept.data() != t.data()
                    {
                        return Err(Error::ReplicaMismatch {
                            param: release,
                            first: *first,
                            second: *rank,
                        });
                    }
                }
                None => {
                    merged.insert(release, (*rank, t));
                }
            }
        }
    }

    let tensors = merged
        .into_par_iter()
        .map(|(name, (_, t))| crate::tensor_store::cast_tensor(&t.clone().with_name(name), target))
        .collect::<Result<Vec<_>>>()?;
    FlatCheckpoint::from_tensors(tensors, BTreeMap::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{plan_layout, ModelConfig, ParallelConfig};
    use crate::synthetic::synthetic_checkpoint;
    use proptest::prelude::*;

    fn small_model() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            num_dense_layers: 1,
            num_routed_experts: 4,
            has_shared_expert: true,
        }
    }

    #[test]
    fn rename_is_bijective_on_examples() {
        for s in [
            "model.layers.0.self_attn.q_proj.weight",
            "model.embed_tokens.weight",
            "model.norm.weight",
            "lm_head.weight",
            "rotary.inv_freq",
            "extra.model.layers.1",
            "decoder.layers.3.x",
        ] {
            assert_eq!(rename_to_release(&rename_to_trainer(s)).unwrap(), s);
        }
        assert_eq!(
            rename_to_trainer("model.layers.5.mlp.experts.224.down_proj.weight"),
            "decoder.layers.5.mlp.experts.224.down_proj.weight"
        );
        assert!(rename_to_release("model.layers.0.x").is_err());
        assert!(rename_to_release("extra.lm_head.weight").is_err());
    }

    #[test]
    fn two_layer_grouping() {
        let model = ModelConfig {
            num_layers: 2,
            num_dense_layers: 2,
            num_routed_experts: 1,
            has_shared_expert: false,
        };
        let c = synthetic_checkpoint(&model, Dtype::Bf16, 1);
        let layered = group_by_layers(&c).unwrap();
        assert_eq!(layered.num_layers(), 2);
        assert_eq!(layered.tensor_count(), c.len());
        assert_eq!(layered.pre_layers[0].name(), "model.embed_tokens.weight");
        let post: Vec<_> = layered.post_layers.iter().map(|t| t.name()).collect();
        assert_eq!(post, ["lm_head.weight", "model.norm.weight"]);
    }

    #[test]
    fn gap_in_layers() {
        let t = TensorSpec::new(
            "model.layers.3.self_attn.q_proj.weight",
            Dtype::Fp8E4M3,
            vec![1],
            vec![0],
        )
        .unwrap();
        let c = FlatCheckpoint::from_tensors([t], BTreeMap::new()).unwrap();
        match group_by_layers(&c) {
            Err(Error::MissingLayer { missing }) => assert_eq!(missing, vec![0, 1, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_in_group() {
        let t = TensorSpec::new(
            "model.layers.0.self_attn.q",
            Dtype::Fp8E4M3,
            vec![1],
            vec![0],
        )
        .unwrap();
        let err = group_tensors([t.clone(), t]).unwrap_err();
        assert!(matches!(err, Error::DuplicateParam { layer: Some(0), .. }));
    }

    #[test]
    fn single_rank_shard_is_whole_checkpoint() {
        let model = small_model();
        let plan = plan_layout(model, ParallelConfig { pp: 1, width: 1 }).unwrap();
        let c = synthetic_checkpoint(&model, Dtype::Fp8E4M3, 3);
        let set = shard(&c, &plan).unwrap();
        assert_eq!(set.shards.len(), 1);
        let only = &set.shards[&RankId::new(0, 0)];
        assert_eq!(only.len(), c.len());
        assert!(only.tensors().iter().all(|t| t.dtype() == Dtype::Bf16));
        assert_eq!(merge(&set, Dtype::Fp8E4M3).unwrap().tensors(), c.tensors());
    }

    #[test]
    fn orphan_and_mismatch() {
        let model = small_model();
        let plan = plan_layout(model, ParallelConfig { pp: 2, width: 2 }).unwrap();
        let mut c = synthetic_checkpoint(&model, Dtype::Bf16, 3);
        c.insert(TensorSpec::new("rotary.inv_freq", Dtype::Fp32, vec![1], vec![0; 4]).unwrap())
            .unwrap();
        assert!(matches!(shard(&c, &plan), Err(Error::OrphanParam(n)) if n == "rotary.inv_freq"));

        let other = ModelConfig {
            num_layers: 5,
            ..model
        };
        let c = synthetic_checkpoint(&other, Dtype::Bf16, 3);
        assert!(matches!(shard(&c, &plan), Err(Error::ConfigMismatch(_))));

        let dense_model = ModelConfig {
            num_dense_layers: 4,
            ..model
        };
        let dense_plan = plan_layout(dense_model, ParallelConfig { pp: 2, width: 2 }).unwrap();
        let c = synthetic_checkpoint(&model, Dtype::Bf16, 3);
        assert!(matches!(
            shard(&c, &dense_plan),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn perturbed_replica_detected() {
        let model = small_model();
        let plan = plan_layout(model, ParallelConfig { pp: 2, width: 2 }).unwrap();
        let c = synthetic_checkpoint(&model, Dtype::Fp8E4M3, 9);
        let mut set = shard(&c, &plan).unwrap();
        let victim = set.shards.get_mut(&RankId::new(0, 1)).unwrap();
        let t = victim
            .get_mut("decoder.layers.0.self_attn.q_proj.weight")
            .unwrap();
        t.data_mut()[0] ^= 0x01;
        match merge(&set, Dtype::Bf16) {
            Err(Error::ReplicaMismatch {
                param,
                first,
                second,
            }) => {
                assert_eq!(param, "model.layers.0.self_attn.q_proj.weight");
                assert_eq!((first, second), (RankId::new(0, 0), RankId::new(0, 1)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_shard_detected() {
        let model = small_model();
        let plan = plan_layout(model, ParallelConfig { pp: 2, width: 2 }).unwrap();
        let c = synthetic_checkpoint(&model, Dtype::Fp8E4M3, 9);
        let mut set = shard(&c, &plan).unwrap();
        set.shards.remove(&RankId::new(1, 1));
        assert!(matches!(
            merge(&set, Dtype::Bf16),
            Err(Error::IncompleteShardSet(_))
        ));
    }

    #[test]
    fn expert_shard_contents() {
        let model = ModelConfig {
            num_layers: 4,
            num_dense_layers: 1,
            num_routed_experts: 8,
            has_shared_expert: true,
        };
        let plan = plan_layout(model, ParallelConfig { pp: 2, width: 4 }).unwrap();
        let c = synthetic_checkpoint(&model, Dtype::Fp8E4M3, 5);
        let set = shard(&c, &plan).unwrap();
        // stage 1 holds layers 2..4, rank 3 owns experts 6 and 7
        let experts: BTreeSet<usize> = set.shards[&RankId::new(1, 3)]
            .names()
            .filter_map(|n| parse_param_name(&rename_to_release(n).unwrap()).expert())
            .collect();
        assert_eq!(experts, BTreeSet::from([6, 7]));
    }

    #[test]
    fn directory_round_trip() {
        let model = small_model();
        let plan = plan_layout(model, ParallelConfig { pp: 2, width: 2 }).unwrap();
        let c = synthetic_checkpoint(&model, Dtype::Fp8E4M3, 2);
        let set = shard(&c, &plan).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write_to_dir(dir.path()).unwrap();
        assert!(dir.path().join("shard_s1_l1.adnk").exists());
        let back = ShardSet::read(dir.path()).unwrap();
        assert_eq!(back, set);

        fs::remove_file(dir.path().join("shard_s0_l1.adnk")).unwrap();
        assert!(matches!(
            ShardSet::read(dir.path()),
            Err(Error::IncompleteShardSet(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn trainer_rename_round_trips(s in "[a-z_.0-9]{0,30}") {
            prop_assert_eq!(rename_to_release(&rename_to_trainer(&s)).unwrap(), s);
        }

        #[test]
        fn shard_merge_round_trip(
            pp in 1usize..4, width in 1usize..4, extra in 0usize..3,
            dense in 0usize..3, per_rank in 1usize..3, seed in any::<u64>(),
        ) {
            let model = ModelConfig {
                num_layers: pp + extra,
                num_dense_layers: dense.min(pp + extra),
                num_routed_experts: width * per_rank,
                has_shared_expert: seed % 2 == 0,
            };
            let plan = plan_layout(model, ParallelConfig { pp, width }).unwrap();
            let c = synthetic_checkpoint(&model, Dtype::Fp8E4M3, seed);
            let set = shard(&c, &plan).unwrap();
            prop_assert_eq!(merge(&set, Dtype::Bf16).unwrap(), c.cast(Dtype::Bf16).unwrap());
            prop_assert_eq!(merge(&set, Dtype::Fp8E4M3).unwrap(), c.clone());
        }
    }
}
