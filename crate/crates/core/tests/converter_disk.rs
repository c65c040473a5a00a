use std::fs;

use moeforge::converter::{merge, shard, Manifest, ShardSet};
use moeforge::layout::{plan_layout, ModelConfig, ParallelConfig};
use moeforge::synthetic::synthetic_checkpoint;
use moeforge::tensor_store::{read_checkpoint, write_checkpoint, Dtype};
use moeforge::Error;

fn model() -> ModelConfig {
    ModelConfig {
        num_layers: 5,
        num_dense_layers: 2,
        num_routed_experts: 6,
        has_shared_expert: true,
    }
}

#[test]
fn shard_files_carry_owned_params_only() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_layout(model(), ParallelConfig { pp: 2, width: 3 }).unwrap();
    let c = synthetic_checkpoint(&model(), Dtype::Fp8E4M3, 1);
    shard(&c, &plan).unwrap().write_to_dir(dir.path()).unwrap();

    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.shards.len(), 6);
    for entry in &manifest.shards {
        let s = read_checkpoint(dir.path().join(&entry.file)).unwrap();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(
            names,
            entry.params.iter().map(String::as_str).collect::<Vec<_>>()
        );
        assert!(s.tensors().iter().all(|t| t.dtype() == Dtype::Bf16));
        for n in names {
            assert!(!n.starts_with("model."), "{n} kept its release name");
        }
    }

    let set = ShardSet::read(dir.path()).unwrap();
    let back = merge(&set, Dtype::Fp8E4M3).unwrap();
    assert_eq!(back, c);
}

#[test]
fn tampered_shard_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_layout(model(), ParallelConfig { pp: 2, width: 3 }).unwrap();
    let c = synthetic_checkpoint(&model(), Dtype::Bf16, 2);
    shard(&c, &plan).unwrap().write_to_dir(dir.path()).unwrap();

    // replicated attention weights on stage 0 must agree across locals
    let path = dir.path().join("shard_s0_l1.adnk");
    let mut s = read_checkpoint(&path).unwrap();
    let name = s
        .names()
        .find(|n| n.contains("self_attn"))
        .unwrap()
        .to_string();
    s.get_mut(&name).unwrap().data_mut()[0] ^= 1;
    write_checkpoint(&s, &path).unwrap();

    let set = ShardSet::read(dir.path()).unwrap();
    assert!(matches!(
        merge(&set, Dtype::Bf16),
        Err(Error::ReplicaMismatch { .. })
    ));
}
