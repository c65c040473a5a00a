//! Release-format parameter names.
//!
//! ```text
//! model.embed_tokens.<leaf>                     embedding
//! model.norm.<leaf>                             final norm
//! lm_head.<leaf>                                output head
//! model.layers.<i>.self_attn.<leaf>             attention
//! model.layers.<i>.mlp.experts.<e>.<leaf>       routed expert
//! model.layers.<i>.mlp.shared_experts.<leaf>    shared expert
//! model.layers.<i>.mlp.<leaf>                   dense mlp (router gate included)
//! model.layers.<i>.<leaf containing "norm">     layer norm
//! ```
//!
//! Anything else parses as [`ParamKind::Other`]. Parsing is total and
//! `format_param_name(&parse_param_name(s)) == s` for every string.

use std::fmt;

const EMBED_PREFIX: &str = "model.embed_tokens.";
const FINAL_NORM_PREFIX: &str = "model.norm.";
const HEAD_PREFIX: &str = "lm_head.";
const LAYER_PREFIX: &str = "model.layers.";
const ATTN_PREFIX: &str = "self_attn.";
const MLP_PREFIX: &str = "mlp.";
const EXPERTS_PREFIX: &str = "experts.";
const SHARED_PREFIX: &str = "shared_experts.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Embedding,
    Attention,
    DenseMlp,
    RoutedExpert(usize),
    SharedExpert,
    Norm,
    OutputHead,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamName {
    pub raw: String,
    pub layer: Option<usize>,
    pub kind: ParamKind,
    /// Remainder of the name after the kind-specific prefix.
    pub leaf: String,
}

impl ParamName {
    pub fn expert(&self) -> Option<usize> {
        match self.kind {
            ParamKind::RoutedExpert(e) => Some(e),
            _ => None,
        }
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Parses a canonical decimal index (no sign, no leading zeros) terminated
/// by a dot. Returns the index and the text after the dot.
fn split_index(s: &str) -> Option<(usize, &str)> {
    let (digits, rest) = s.split_once('.')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    Some((digits.parse().ok()?, rest))
}

pub fn parse_param_name(s: &str) -> ParamName {
    let make = |layer, kind, leaf: &str| ParamName {
        raw: s.to_string(),
        layer,
        kind,
        leaf: leaf.to_string(),
    };

    if let Some(leaf) = s.strip_prefix(EMBED_PREFIX) {
        return make(None, ParamKind::Embedding, leaf);
    }
    if let Some(leaf) = s.strip_prefix(FINAL_NORM_PREFIX) {
        return make(None, ParamKind::Norm, leaf);
    }
    if let Some(leaf) = s.strip_prefix(HEAD_PREFIX) {
        return make(None, ParamKind::OutputHead, leaf);
    }
    let Some((layer, rest)) = s.strip_prefix(LAYER_PREFIX).and_then(split_index) else {
        return make(None, ParamKind::Other, s);
    };
    let layer = Some(layer);

    if let Some(leaf) = rest.strip_prefix(ATTN_PREFIX) {
        return make(layer, ParamKind::Attention, leaf);
    }
    if let Some(mlp) = rest.strip_prefix(MLP_PREFIX) {
        if let Some(leaf) = mlp.strip_prefix(SHARED_PREFIX) {
            return make(layer, ParamKind::SharedExpert, leaf);
        }
        if let Some((expert, leaf)) = mlp.strip_prefix(EXPERTS_PREFIX).and_then(split_index) {
            if !leaf.is_empty() {
                return make(layer, ParamKind::RoutedExpert(expert), leaf);
            }
        }
        return make(layer, ParamKind::DenseMlp, mlp);
    }
    if rest.contains("norm") {
        return make(layer, ParamKind::Norm, rest);
    }
    make(layer, ParamKind::Other, rest)
}

/// Rebuilds the release name from `layer`, `kind` and `leaf`, ignoring `raw`.
///
/// Layered kinds without a layer index fall back to index 0.
pub fn format_param_name(name: &ParamName) -> String {
    let leaf = &name.leaf;
    let layer = name.layer.unwrap_or(0);
    match (name.kind, name.layer) {
        (ParamKind::Embedding, _) => format!("{EMBED_PREFIX}{leaf}"),
        (ParamKind::OutputHead, _) => format!("{HEAD_PREFIX}{leaf}"),
        (ParamKind::Norm, None) => format!("{FINAL_NORM_PREFIX}{leaf}"),
        (ParamKind::Other, None) => leaf.clone(),
        (ParamKind::Attention, _) => format!("{LAYER_PREFIX}{layer}.{ATTN_PREFIX}{leaf}"),
        (ParamKind::DenseMlp, _) => format!("{LAYER_PREFIX}{layer}.{MLP_PREFIX}{leaf}"),
        (ParamKind::SharedExpert, _) => {
            format!("{LAYER_PREFIX}{layer}.{MLP_PREFIX}{SHARED_PREFIX}{leaf}")
        }
        (ParamKind::RoutedExpert(e), _) => {
            format!("{LAYER_PREFIX}{layer}.{MLP_PREFIX}{EXPERTS_PREFIX}{e}.{leaf}")
        }
        (ParamKind::Norm, Some(_)) | (ParamKind::Other, Some(_)) => {
            format!("{LAYER_PREFIX}{layer}.{leaf}")
        }
    }
}

/// Builds a parsed name from its components.
pub fn param_name(layer: Option<usize>, kind: ParamKind, leaf: &str) -> ParamName {
    let mut name = ParamName {
        raw: String::new(),
        layer,
        kind,
        leaf: leaf.to_string(),
    };
    name.raw = format_param_name(&name);
    name
}
