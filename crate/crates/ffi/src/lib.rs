//! C ABI over `moeforge`.
//!
//! Every fallible call returns an [`MfStatus`]; on failure the message is
//! available from [`mf_last_error`] on the same thread. Handles are opaque
//! and owned by the caller until passed to their `_free` function. Strings
//! returned through `char **` out-parameters must be released with
//! [`mf_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use moeforge::collective::{build_step_program, explain, simulate, SimOutcome};
use moeforge::converter::{merge, shard, ShardSet};
use moeforge::layout::{plan_layout, LayoutPlan, ModelConfig, ParallelConfig};
use moeforge::metrics::{auc, binary_metrics, cost_per_million, ConfusionCounts};
use moeforge::multitask::{instance_weight, task_weights, WeightingConfig};
use moeforge::tensor_store::{
    decode_bf16, decode_fp8, encode_bf16, encode_fp8, read_checkpoint, write_checkpoint, Dtype,
    FlatCheckpoint,
};
use moeforge::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Invalid = 3,
    Format = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfDtype {
    Fp8E4m3 = 0,
    Bf16 = 1,
    Fp32 = 2,
}

impl From<MfDtype> for Dtype {
    fn from(d: MfDtype) -> Self {
        match d {
            MfDtype::Fp8E4m3 => Dtype::Fp8E4M3,
            MfDtype::Bf16 => Dtype::Bf16,
            MfDtype::Fp32 => Dtype::Fp32,
        }
    }
}

/// A layout plan.
pub struct MfPlan(LayoutPlan);

/// An in-memory flat checkpoint.
pub struct MfCheckpoint(FlatCheckpoint);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MfSimSummary {
    pub completed: bool,
    pub steps: usize,
    pub blocked_ranks: usize,
    pub never_arrives: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MfBinaryMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub pos_acc: f64,
    pub pos_prec: f64,
    pub neg_acc: f64,
    pub neg_prec: f64,
    pub pos_f1: f64,
    pub neg_f1: f64,
    pub defect_rate: f64,
    pub model_defect_rate: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(MfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => MfStatus::Io,
            Error::Format(_) | Error::CorruptFile(_) | Error::Json(_) => MfStatus::Format,
            _ => MfStatus::Invalid,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MfStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside moeforge");
            MfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(MfStatus::Format, "string contains NUL".into()))?;
    put(out, c.into_raw(), "out")
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or "" after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn mf_fp8_decode(code: u8) -> f32 {
    decode_fp8(code)
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_fp8_encode(value: f32, out: *mut u8) -> MfStatus {
    guard(|| put(out, encode_fp8(value)?, "out"))
}

#[no_mangle]
pub extern "C" fn mf_bf16_encode(value: f32) -> u16 {
    encode_bf16(value)
}

#[no_mangle]
pub extern "C" fn mf_bf16_decode(bits: u16) -> f32 {
    decode_bf16(bits)
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_plan_new(
    num_layers: usize,
    num_dense_layers: usize,
    num_routed_experts: usize,
    has_shared_expert: bool,
    pp: usize,
    width: usize,
    out: *mut *mut MfPlan,
) -> MfStatus {
    guard(|| {
        let model = ModelConfig {
            num_layers,
            num_dense_layers,
            num_routed_experts,
            has_shared_expert,
        };
        let plan = plan_layout(model, ParallelConfig { pp, width })?;
        put(out, Box::into_raw(Box::new(MfPlan(plan))), "out")
    })
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_plan_from_json(json: *const c_char, out: *mut *mut MfPlan) -> MfStatus {
    guard(|| {
        let plan = LayoutPlan::from_json(str_arg(json, "json")?)?;
        put(out, Box::into_raw(Box::new(MfPlan(plan))), "out")
    })
}

/// # Safety
/// `plan` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_plan_to_json(plan: *const MfPlan, out: *mut *mut c_char) -> MfStatus {
    guard(|| put_string(out, ref_arg(plan, "plan")?.0.to_json()?))
}

/// Total rank count, or 0 for a null handle.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_plan_total_ranks(plan: *const MfPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.total_ranks())
}

/// # Safety
/// `plan` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_plan_free(plan: *mut MfPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

unsafe fn run_step(plan: *const MfPlan, stub: bool) -> Result<SimOutcome, Fail> {
    let step = build_step_program(&ref_arg(plan, "plan")?.0, stub);
    Ok(simulate(&step.groups, &step.programs)?)
}

/// Simulates one optimizer step. A deadlock is reported through the summary,
/// not the status.
///
/// # Safety
/// `plan` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_plan_simulate(
    plan: *const MfPlan,
    stub: bool,
    out: *mut MfSimSummary,
) -> MfStatus {
    guard(|| {
        let o = run_step(plan, stub)?;
        let summary = MfSimSummary {
            completed: o.is_completed(),
            steps: o.steps,
            blocked_ranks: o.blocked.len(),
            never_arrives: o.stuck.iter().map(|s| s.never_arrives.len()).sum(),
        };
        put(out, summary, "out")
    })
}

/// Human-readable simulation report.
///
/// # Safety
/// `plan` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_plan_explain(
    plan: *const MfPlan,
    stub: bool,
    out: *mut *mut c_char,
) -> MfStatus {
    guard(|| put_string(out, explain(&run_step(plan, stub)?)))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_checkpoint_read(
    path: *const c_char,
    out: *mut *mut MfCheckpoint,
) -> MfStatus {
    guard(|| {
        let c = read_checkpoint(str_arg(path, "path")?)?;
        put(out, Box::into_raw(Box::new(MfCheckpoint(c))), "out")
    })
}

/// # Safety
/// `ckpt` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mf_checkpoint_write(
    ckpt: *const MfCheckpoint,
    path: *const c_char,
) -> MfStatus {
    guard(|| {
        let c = ref_arg(ckpt, "ckpt")?;
        Ok(write_checkpoint(&c.0, str_arg(path, "path")?)?)
    })
}

/// # Safety
/// `ckpt` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_checkpoint_cast(
    ckpt: *const MfCheckpoint,
    dtype: MfDtype,
    out: *mut *mut MfCheckpoint,
) -> MfStatus {
    guard(|| {
        let c = ref_arg(ckpt, "ckpt")?.0.cast(dtype.into())?;
        put(out, Box::into_raw(Box::new(MfCheckpoint(c))), "out")
    })
}

/// Number of tensors, or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_checkpoint_len(ckpt: *const MfCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `a` and `b` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn mf_checkpoint_equal(
    a: *const MfCheckpoint,
    b: *const MfCheckpoint,
) -> bool {
    match (a.as_ref(), b.as_ref()) {
        (Some(a), Some(b)) => a.0 == b.0,
        _ => false,
    }
}

/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_checkpoint_free(ckpt: *mut MfCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Shards `ckpt` per `plan` and writes the shard files and manifest to `dir`.
///
/// # Safety
/// Handles must be live and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mf_shard_to_dir(
    ckpt: *const MfCheckpoint,
    plan: *const MfPlan,
    dir: *const c_char,
) -> MfStatus {
    guard(|| {
        let set = shard(&ref_arg(ckpt, "ckpt")?.0, &ref_arg(plan, "plan")?.0)?;
        Ok(set.write_to_dir(PathBuf::from(str_arg(dir, "dir")?))?)
    })
}

/// Reads a shard directory (or its manifest) and merges it to `dtype`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_merge_from_dir(
    dir: *const c_char,
    dtype: MfDtype,
    out: *mut *mut MfCheckpoint,
) -> MfStatus {
    guard(|| {
        let set = ShardSet::read(str_arg(dir, "dir")?)?;
        let c = merge(&set, dtype.into())?;
        put(out, Box::into_raw(Box::new(MfCheckpoint(c))), "out")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_instance_weight(
    delta: f64,
    beta: f64,
    w_min: f64,
    w_max: f64,
    out: *mut f64,
) -> MfStatus {
    guard(|| {
        let cfg = WeightingConfig {
            beta,
            w_min,
            w_max,
            ..WeightingConfig::default()
        };
        cfg.validate()?;
        put(out, instance_weight(delta, &cfg), "out")
    })
}

/// Task weights for `n` tasks; `out[i]` pairs with `metrics[i]`.
///
/// # Safety
/// `metrics` must hold `n` readable values and `out` `n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn mf_task_weights(
    metrics: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> MfStatus {
    guard(|| {
        let m = slice_arg(metrics, n, "metrics")?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        // zero-padded keys keep input order
        let map: BTreeMap<String, f64> = m
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{i:020}"), *v))
            .collect();
        let w = task_weights(&map, alpha)?;
        for (i, v) in w.into_values().enumerate() {
            out.add(i).write(v);
        }
        Ok(())
    })
}

/// Unrounded metrics in percent from confusion counts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_binary_metrics(
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
    out: *mut MfBinaryMetrics,
) -> MfStatus {
    guard(|| {
        let m = binary_metrics(&ConfusionCounts { tp, fp, tn, fn_ })?;
        let r = MfBinaryMetrics {
            acc: m.acc,
            bacc: m.bacc,
            pos_acc: m.pos_acc,
            pos_prec: m.pos_prec,
            neg_acc: m.neg_acc,
            neg_prec: m.neg_prec,
            pos_f1: m.pos_f1,
            neg_f1: m.neg_f1,
            defect_rate: m.defect_rate,
            model_defect_rate: m.model_defect_rate,
        };
        put(out, r, "out")
    })
}

/// ROC AUC in [0, 1] of `n` scores with their positive-class flags.
///
/// # Safety
/// `scores` and `positive` must hold `n` readable values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_auc(
    scores: *const f64,
    positive: *const bool,
    n: usize,
    out: *mut f64,
) -> MfStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let p = slice_arg(positive, n, "positive")?;
        let pairs: Vec<(f64, bool)> = s.iter().copied().zip(p.iter().copied()).collect();
        put(out, auc(&pairs)?, "out")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_cost_per_million(
    gpu_cost_per_second: f64,
    tokens_per_second: f64,
    out: *mut f64,
) -> MfStatus {
    guard(|| {
        put(
            out,
            cost_per_million(gpu_cost_per_second, tokens_per_second)?,
            "out",
        )
    })
}
