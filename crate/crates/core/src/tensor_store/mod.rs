//! Bit-exact tensor storage: FP8/BF16/FP32 codecs, parameter names and the
//! checkpoint container.

mod container;
pub mod names;
pub mod numerics;

pub use container::{
    cast_tensor, read_checkpoint, write_atomic, write_checkpoint, Dtype, FlatCheckpoint,
    TensorSpec, MAGIC, PAYLOAD_ALIGN, VERSION,
};
pub use names::{format_param_name, param_name, parse_param_name, ParamKind, ParamName};
pub use numerics::{
    accumulate, decode_bf16, decode_fp8, encode_bf16, encode_fp8, is_fp8_nan, round_to_bf16,
    AccumulateMode, Bf16,
};
