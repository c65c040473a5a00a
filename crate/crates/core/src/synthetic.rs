//! Deterministic synthetic release checkpoints with the full name set and
//! tiny 2x2 payloads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layout::ModelConfig;
use crate::tensor_store::{
    cast_tensor, param_name, Dtype, FlatCheckpoint, ParamKind, ParamName, TensorSpec,
};

const SHAPE: [usize; 2] = [2, 2];
const PROJ: [&str; 3] = ["gate_proj.weight", "up_proj.weight", "down_proj.weight"];

/// Every parameter name a release checkpoint of `model` carries.
pub fn parameter_names(model: &ModelConfig) -> Vec<ParamName> {
    let mut names = vec![
        param_name(None, ParamKind::Embedding, "weight"),
        param_name(None, ParamKind::Norm, "weight"),
        param_name(None, ParamKind::OutputHead, "weight"),
    ];
    for layer in 0..model.num_layers {
        let l = Some(layer);
        names.push(param_name(l, ParamKind::Norm, "input_layernorm.weight"));
        names.push(param_name(
            l,
            ParamKind::Norm,
            "post_attention_layernorm.weight",
        ));
        for leaf in [
            "q_proj.weight",
            "kv_a_proj_with_mqa.weight",
            "o_proj.weight",
        ] {
            names.push(param_name(l, ParamKind::Attention, leaf));
        }
        if model.is_moe_layer(layer) {
            names.push(param_name(l, ParamKind::DenseMlp, "gate.weight"));
            if model.has_shared_expert {
                for leaf in PROJ {
                    names.push(param_name(l, ParamKind::SharedExpert, leaf));
                }
            }
            for e in 0..model.num_routed_experts {
                for leaf in PROJ {
                    names.push(param_name(l, ParamKind::RoutedExpert(e), leaf));
                }
            }
        } else {
            for leaf in PROJ {
                names.push(param_name(l, ParamKind::DenseMlp, leaf));
            }
        }
    }
    names
}

/// Random NaN-free FP8 payloads, cast to `dtype`. The same seed always
/// yields the same checkpoint.
pub fn synthetic_checkpoint(model: &ModelConfig, dtype: Dtype, seed: u64) -> FlatCheckpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = SHAPE.iter().product();
    let tensors = parameter_names(model).into_iter().map(|name| {
        let data = (0..numel)
            .map(|_| {
                // skip the two NaN codes
                let b: u8 = rng.gen_range(0..254);
                if b >= 0x7F {
                    b + 1
                } else {
                    b
                }
            })
            .collect();
        let t = TensorSpec::new(name.raw, Dtype::Fp8E4M3, SHAPE.to_vec(), data)
            .expect("shape matches payload");
        cast_tensor(&t, dtype).expect("NaN-free FP8 casts to any dtype")
    });
    FlatCheckpoint::from_tensors(tensors, BTreeMap::new()).expect("generated names are unique")
}
