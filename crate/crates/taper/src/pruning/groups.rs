//! Coupling groups: sets of matrix slices that must share one column mask
//! for the network to stay shape-consistent.
//!
//! Four kinds of groups cover the whole encoder:
//!
//! * `Hidden` - one global group over the residual-stream width. Scored by
//!   the matrices that write into the residual stream (embedding table
//!   columns, every W_O and W_out column side); everything else that touches
//!   the hidden dimension follows the mask (input-side rows of W_Q/W_K/W_V/
//!   W_in, layernorm scales and shifts, biases, position embeddings, the
//!   MLM transform on both sides, and the projection rows).
//! * `QueryKey` - per layer and per head, the matching column blocks of W_Q
//!   and W_K share a mask so dot products stay aligned.
//! * `ValueOutput` - per layer and per head, W_V columns with the matching
//!   W_O rows.
//! * `FfnInner` - per layer, W_in columns with the matching W_out rows.
//!
//! Attention groups are split per head so that every head keeps the same
//! width and a pruned model compacts into rectangular matrices.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Hidden,
    QueryKey,
    ValueOutput,
    FfnInner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupId {
    Hidden,
    QueryKey { layer: usize, head: usize },
    ValueOutput { layer: usize, head: usize },
    FfnInner { layer: usize },
}

impl GroupId {
    pub fn kind(&self) -> GroupKind {
        match self {
            GroupId::Hidden => GroupKind::Hidden,
            GroupId::QueryKey { .. } => GroupKind::QueryKey,
            GroupId::ValueOutput { .. } => GroupKind::ValueOutput,
            GroupId::FfnInner { .. } => GroupKind::FfnInner,
        }
    }

    /// Stable name used for checkpoint tensors ("mask.<name>").
    pub fn name(&self) -> String {
        match self {
            GroupId::Hidden => "hidden".to_string(),
            GroupId::QueryKey { layer, head } => format!("qk.{}.{}", layer, head),
            GroupId::ValueOutput { layer, head } => format!("vo.{}.{}", layer, head),
            GroupId::FfnInner { layer } => format!("ffn.{}", layer),
        }
    }

    pub fn parse(name: &str) -> Option<GroupId> {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["hidden"] => Some(GroupId::Hidden),
            ["qk", l, h] => Some(GroupId::QueryKey {
                layer: l.parse().ok()?,
                head: h.parse().ok()?,
            }),
            ["vo", l, h] => Some(GroupId::ValueOutput {
                layer: l.parse().ok()?,
                head: h.parse().ok()?,
            }),
            ["ffn", l] => Some(GroupId::FfnInner { layer: l.parse().ok()? }),
            _ => None,
        }
    }
}

/// Which dimension of a tensor a mask runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    /// Mask entry i covers column (offset + i); for 1-D tensors, entry
    /// (offset + i).
    Columns,
    /// Mask entry i covers row (offset + i).
    Rows,
}

#[derive(Debug, Clone)]
pub struct GroupMember {
    pub tensor: String,
    pub axis: MaskAxis,
    pub offset: usize,
}

impl GroupMember {
    fn cols(tensor: impl Into<String>, offset: usize) -> GroupMember {
        GroupMember { tensor: tensor.into(), axis: MaskAxis::Columns, offset }
    }

    fn rows(tensor: impl Into<String>, offset: usize) -> GroupMember {
        GroupMember { tensor: tensor.into(), axis: MaskAxis::Rows, offset }
    }
}

#[derive(Debug, Clone)]
pub struct CouplingGroup {
    pub id: GroupId,
    pub width: usize,
    /// Slices whose importance is aggregated to rank this group's columns.
    pub scored: Vec<GroupMember>,
    /// Slices that are zeroed with the mask but not scored.
    pub followers: Vec<GroupMember>,
}

/// Names of the trainable projections; resolved against a `ProjectionSet`
/// rather than the model parameter table.
pub const PROJ_HIDN: &str = "proj.w_hidn";
pub const PROJ_EMB: &str = "proj.w_emb";

/// The full group table for a configuration.
pub fn coupling_groups(cfg: &ModelConfig) -> Vec<CouplingGroup> {
    let d = cfg.hidden_dim;
    let qk = cfg.qk_head_dim();
    let vo = cfg.vo_head_dim();
    let mut groups = Vec::new();

    let mut hidden_scored = vec![GroupMember::cols("embed.tok", 0)];
    let mut hidden_followers = vec![
        GroupMember::cols("embed.pos", 0),
        GroupMember::cols("embed.ln.gamma", 0),
        GroupMember::cols("embed.ln.beta", 0),
        GroupMember::rows("head.w_mlm", 0),
        GroupMember::cols("head.w_mlm", 0),
        GroupMember::cols("head.b_mlm", 0),
        GroupMember::cols("head.ln.gamma", 0),
        GroupMember::cols("head.ln.beta", 0),
        GroupMember::rows(PROJ_HIDN, 0),
        GroupMember::rows(PROJ_EMB, 0),
    ];

    for k in 0..cfg.num_layers {
        let p = format!("layer.{}", k);
        hidden_scored.push(GroupMember::cols(format!("{}.attn.w_o", p), 0));
        hidden_scored.push(GroupMember::cols(format!("{}.ffn.w_out", p), 0));
        hidden_followers.extend([
            GroupMember::rows(format!("{}.attn.w_q", p), 0),
            GroupMember::rows(format!("{}.attn.w_k", p), 0),
            GroupMember::rows(format!("{}.attn.w_v", p), 0),
            GroupMember::cols(format!("{}.attn.b_o", p), 0),
            GroupMember::cols(format!("{}.ln_attn.gamma", p), 0),
            GroupMember::cols(format!("{}.ln_attn.beta", p), 0),
            GroupMember::rows(format!("{}.ffn.w_in", p), 0),
            GroupMember::cols(format!("{}.ffn.b_out", p), 0),
            GroupMember::cols(format!("{}.ln_ffn.gamma", p), 0),
            GroupMember::cols(format!("{}.ln_ffn.beta", p), 0),
        ]);

        for h in 0..cfg.num_heads {
            groups.push(CouplingGroup {
                id: GroupId::QueryKey { layer: k, head: h },
                width: qk,
                scored: vec![
                    GroupMember::cols(format!("{}.attn.w_q", p), h * qk),
                    GroupMember::cols(format!("{}.attn.w_k", p), h * qk),
                ],
                followers: vec![
                    GroupMember::cols(format!("{}.attn.b_q", p), h * qk),
                    GroupMember::cols(format!("{}.attn.b_k", p), h * qk),
                ],
            });
            groups.push(CouplingGroup {
                id: GroupId::ValueOutput { layer: k, head: h },
                width: vo,
                scored: vec![
                    GroupMember::cols(format!("{}.attn.w_v", p), h * vo),
                    GroupMember::rows(format!("{}.attn.w_o", p), h * vo),
                ],
                followers: vec![GroupMember::cols(format!("{}.attn.b_v", p), h * vo)],
            });
        }

        groups.push(CouplingGroup {
            id: GroupId::FfnInner { layer: k },
            width: cfg.ffn_dim,
            scored: vec![
                GroupMember::cols(format!("{}.ffn.w_in", p), 0),
                GroupMember::rows(format!("{}.ffn.w_out", p), 0),
            ],
            followers: vec![GroupMember::cols(format!("{}.ffn.b_in", p), 0)],
        });
    }

    groups.push(CouplingGroup {
        id: GroupId::Hidden,
        width: d,
        scored: hidden_scored,
        followers: hidden_followers,
    });
    groups.sort_by_key(|g| g.id);
    groups
}

/// Names of all tensors whose importance is tracked (the scored members).
pub fn scored_tensor_names(groups: &[CouplingGroup]) -> Vec<String> {
    let mut names: Vec<String> =
        groups.iter().flat_map(|g| g.scored.iter().map(|m| m.tensor.clone())).collect();
    names.sort();
    names.dedup();
    names
}
