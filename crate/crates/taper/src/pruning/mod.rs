//! The pruning engine: importance scoring with EMA smoothing, column
//! aggregation, scheduled top-k masking over coupling groups, mask
//! application (including optimizer moments), and physical compaction of a
//! masked model into a genuinely narrower one.

mod groups;
mod importance;
mod schedule;

pub use groups::{
    coupling_groups, scored_tensor_names, CouplingGroup, GroupId, GroupKind, GroupMember,
    MaskAxis, PROJ_EMB, PROJ_HIDN,
};
pub use importance::{
    alternative_scores, column_importance, ema_update, row_importance, sensitivity_scores,
    ImportanceState, ScorerKind,
};
pub use schedule::{schedule_fraction, SparsitySchedule};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::ProjectionSet;
use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::Tensor;

/// Per-group binary column masks (stored as 0.0/1.0 vectors so they
/// serialize as ordinary tensors).
#[derive(Debug, Clone)]
pub struct MaskSet {
    masks: BTreeMap<GroupId, Vec<f64>>,
}

impl MaskSet {
    pub fn all_ones(groups: &[CouplingGroup]) -> MaskSet {
        MaskSet {
            masks: groups.iter().map(|g| (g.id, vec![1.0; g.width])).collect(),
        }
    }

    pub fn from_parts(masks: BTreeMap<GroupId, Vec<f64>>) -> MaskSet {
        MaskSet { masks }
    }

    pub fn mask(&self, id: GroupId) -> &[f64] {
        self.masks.get(&id).unwrap_or_else(|| panic!("no mask for group {:?}", id))
    }

    pub fn kept(&self, id: GroupId) -> usize {
        self.mask(id).iter().filter(|&&m| m != 0.0).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, &Vec<f64>)> {
        self.masks.iter()
    }

    /// Indices of kept columns for a group, ascending.
    pub fn kept_indices(&self, id: GroupId) -> Vec<usize> {
        self.mask(id)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m != 0.0).then_some(i))
            .collect()
    }
}

/// Number of columns kept at fraction `r` of an original width.
pub fn kept_count(r: f64, width: usize) -> usize {
    ((r * width as f64).ceil() as usize).clamp(1, width)
}

/// Aggregate the smoothed per-parameter scores into one importance vector
/// per group: the sum over scored members of the L1 column (or row) norms of
/// the member's slice.
pub fn group_scores(
    state: &ImportanceState,
    groups: &[CouplingGroup],
) -> BTreeMap<GroupId, Vec<f64>> {
    let mut out = BTreeMap::new();
    for group in groups {
        let mut acc = vec![0.0; group.width];
        for member in &group.scored {
            let shape = state.shape(&member.tensor);
            assert_eq!(shape.len(), 2, "scored member {} must be 2-D", member.tensor);
            let (rows, cols) = (shape[0], shape[1]);
            let scores = state.effective_scores(&member.tensor);
            let per_axis = match member.axis {
                MaskAxis::Columns => column_importance(&scores, rows, cols),
                MaskAxis::Rows => row_importance(&scores, rows, cols),
            };
            for i in 0..group.width {
                acc[i] += per_axis[member.offset + i];
            }
        }
        out.insert(group.id, acc);
    }
    out
}

/// Kept fraction per group at step `t`.
pub fn fractions_at(
    schedule: &SparsitySchedule,
    t: usize,
    groups: &[CouplingGroup],
) -> BTreeMap<GroupId, f64> {
    groups.iter().map(|g| (g.id, schedule.fraction_at(t, g.id.kind()))).collect()
}

/// Final kept fraction per group (schedule exhausted).
pub fn final_fractions(
    schedule: &SparsitySchedule,
    groups: &[CouplingGroup],
) -> BTreeMap<GroupId, f64> {
    groups.iter().map(|g| (g.id, schedule.final_fraction)).collect()
}

/// Build the per-group masks: keep exactly `ceil(r * width)` columns with
/// the highest group importance, ties broken toward the lower column index.
/// With `previous` set (monotone mode), already-pruned columns are never
/// revived.
pub fn build_masks(
    state: &ImportanceState,
    fractions: &BTreeMap<GroupId, f64>,
    groups: &[CouplingGroup],
    previous: Option<&MaskSet>,
) -> MaskSet {
    let scores = group_scores(state, groups);
    let mut masks = BTreeMap::new();
    for group in groups {
        assert!(group.width > 0, "empty coupling group {:?}", group.id);
        let r = *fractions.get(&group.id).unwrap_or_else(|| panic!("no fraction for {:?}", group.id));
        assert!(r > 0.0 && r <= 1.0, "fraction {} outside (0, 1]", r);
        let keep = kept_count(r, group.width);
        let n = &scores[&group.id];
        let mut order: Vec<usize> = (0..group.width).collect();
        match previous {
            Some(prev) => {
                let alive = prev.mask(group.id);
                order.sort_by(|&a, &b| {
                    let alive_a = alive[a] != 0.0;
                    let alive_b = alive[b] != 0.0;
                    alive_b
                        .cmp(&alive_a)
                        .then_with(|| n[b].total_cmp(&n[a]))
                        .then_with(|| a.cmp(&b))
                });
            }
            None => {
                order.sort_by(|&a, &b| n[b].total_cmp(&n[a]).then_with(|| a.cmp(&b)));
            }
        }
        let mut mask = vec![0.0; group.width];
        for &idx in order.iter().take(keep) {
            mask[idx] = 1.0;
        }
        masks.insert(group.id, mask);
    }
    MaskSet { masks }
}

fn zero_masked_in_buffer(
    data: &mut [f64],
    shape: &[usize],
    axis: MaskAxis,
    offset: usize,
    mask: &[f64],
) {
    match (shape.len(), axis) {
        (1, MaskAxis::Columns) => {
            for (i, &m) in mask.iter().enumerate() {
                if m == 0.0 {
                    data[offset + i] = 0.0;
                }
            }
        }
        (2, MaskAxis::Columns) => {
            let (rows, cols) = (shape[0], shape[1]);
            for r in 0..rows {
                for (i, &m) in mask.iter().enumerate() {
                    if m == 0.0 {
                        data[r * cols + offset + i] = 0.0;
                    }
                }
            }
        }
        (2, MaskAxis::Rows) => {
            let cols = shape[1];
            for (i, &m) in mask.iter().enumerate() {
                if m == 0.0 {
                    data[(offset + i) * cols..(offset + i + 1) * cols].fill(0.0);
                }
            }
        }
        _ => panic!("unsupported mask target: shape {:?}, axis {:?}", shape, axis),
    }
}

fn resolve<'a>(
    model: &'a TransformerModel,
    projections: Option<&'a ProjectionSet>,
    name: &str,
) -> Option<&'a Tensor> {
    match name {
        PROJ_HIDN => projections.map(|p| &p.w_hidn),
        PROJ_EMB => projections.map(|p| &p.w_emb),
        _ => Some(model.param(name)),
    }
}

/// Zero every masked column/row of every member and follower tensor, and
/// refresh the model's live-width counters. Applying the same mask twice is
/// a no-op; all-ones masks leave the model bit-identical.
pub fn apply_masks(
    model: &mut TransformerModel,
    projections: Option<&ProjectionSet>,
    masks: &MaskSet,
    groups: &[CouplingGroup],
) {
    for group in groups {
        let mask = masks.mask(group.id);
        assert_eq!(mask.len(), group.width, "mask width mismatch for {:?}", group.id);
        for member in group.scored.iter().chain(group.followers.iter()) {
            let Some(tensor) = resolve(model, projections, &member.tensor) else {
                continue;
            };
            let shape = tensor.shape();
            tensor.apply(|data| {
                zero_masked_in_buffer(data, &shape, member.axis, member.offset, mask);
            });
        }
    }
    refresh_live_widths(model, masks);
}

/// Recompute hidden/qk live counters from the masks.
pub fn refresh_live_widths(model: &mut TransformerModel, masks: &MaskSet) {
    model.hidden_live = masks.kept(GroupId::Hidden);
    for layer in 0..model.config.num_layers {
        let counts: Vec<usize> = (0..model.config.num_heads)
            .map(|head| masks.kept(GroupId::QueryKey { layer, head }))
            .collect();
        for &c in &counts {
            assert_eq!(c, counts[0], "uneven query/key head widths in layer {}", layer);
        }
        model.qk_live[layer] = counts[0];
    }
}

/// Zero masked slots in auxiliary per-tensor buffers (optimizer moments).
/// Buffers missing from the map are skipped.
pub fn zero_masked_in_named_buffers(
    buffers: &mut BTreeMap<String, Vec<f64>>,
    shapes: &BTreeMap<String, Vec<usize>>,
    masks: &MaskSet,
    groups: &[CouplingGroup],
) {
    for group in groups {
        let mask = masks.mask(group.id);
        for member in group.scored.iter().chain(group.followers.iter()) {
            if let Some(buf) = buffers.get_mut(&member.tensor) {
                let shape = &shapes[&member.tensor];
                zero_masked_in_buffer(buf, shape, member.axis, member.offset, mask);
            }
        }
    }
}

fn gather_2d(data: &[f64], cols: usize, row_keep: &[usize], col_keep: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(row_keep.len() * col_keep.len());
    for &r in row_keep {
        for &c in col_keep {
            out.push(data[r * cols + c]);
        }
    }
    out
}

fn gather_1d(data: &[f64], keep: &[usize]) -> Vec<f64> {
    keep.iter().map(|&i| data[i]).collect()
}

/// Physically delete masked columns and rows, producing a dense model whose
/// forward outputs match the masked model exactly. Fails with an integrity
/// error if any masked position holds a nonzero value.
pub fn compact_model(
    model: &TransformerModel,
    masks: &MaskSet,
    groups: &[CouplingGroup],
) -> Result<TransformerModel> {
    // Integrity: masked positions must be exactly zero.
    for group in groups {
        let mask = masks.mask(group.id);
        for member in group.scored.iter().chain(group.followers.iter()) {
            if member.tensor.starts_with("proj.") {
                continue;
            }
            let tensor = model.param(&member.tensor);
            let shape = tensor.shape();
            let data = tensor.to_vec();
            let check = |v: f64, pos: String| -> Result<()> {
                if v != 0.0 {
                    return Err(Error::Checkpoint(format!(
                        "nonzero value {} in masked position {} of {}",
                        v, pos, member.tensor
                    )));
                }
                Ok(())
            };
            match (shape.len(), member.axis) {
                (1, MaskAxis::Columns) => {
                    for (i, &m) in mask.iter().enumerate() {
                        if m == 0.0 {
                            check(data[member.offset + i], format!("{}", member.offset + i))?;
                        }
                    }
                }
                (2, MaskAxis::Columns) => {
                    for r in 0..shape[0] {
                        for (i, &m) in mask.iter().enumerate() {
                            if m == 0.0 {
                                check(
                                    data[r * shape[1] + member.offset + i],
                                    format!("({},{})", r, member.offset + i),
                                )?;
                            }
                        }
                    }
                }
                (2, MaskAxis::Rows) => {
                    for (i, &m) in mask.iter().enumerate() {
                        if m == 0.0 {
                            for c in 0..shape[1] {
                                check(
                                    data[(member.offset + i) * shape[1] + c],
                                    format!("({},{})", member.offset + i, c),
                                )?;
                            }
                        }
                    }
                }
                _ => unreachable!("masked tensors are 1-D or 2-D"),
            }
        }
    }

    let cfg = &model.config;
    let hidden_keep = masks.kept_indices(GroupId::Hidden);
    let qk_dim = cfg.qk_head_dim();
    let vo_dim = cfg.vo_head_dim();

    // Per-layer column index maps over the full (head-concatenated) width.
    let head_map = |layer: usize, per_head: usize, make: &dyn Fn(usize) -> GroupId| -> Result<Vec<usize>> {
        let mut cols = Vec::new();
        let mut per_head_count = None;
        for h in 0..cfg.num_heads {
            let kept = masks.kept_indices(make(h));
            match per_head_count {
                None => per_head_count = Some(kept.len()),
                Some(c) if c != kept.len() => {
                    return Err(Error::Checkpoint(format!(
                        "uneven head widths in layer {}: {} vs {}",
                        layer,
                        c,
                        kept.len()
                    )))
                }
                _ => {}
            }
            cols.extend(kept.iter().map(|&i| h * per_head + i));
        }
        Ok(cols)
    };

    let mut qk_cols = Vec::with_capacity(cfg.num_layers);
    let mut vo_cols = Vec::with_capacity(cfg.num_layers);
    let mut ffn_keep = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        qk_cols.push(head_map(layer, qk_dim, &|head| GroupId::QueryKey { layer, head })?);
        vo_cols.push(head_map(layer, vo_dim, &|head| GroupId::ValueOutput { layer, head })?);
        ffn_keep.push(masks.kept_indices(GroupId::FfnInner { layer }));
    }
    let ffn_width = ffn_keep[0].len();
    for (k, f) in ffn_keep.iter().enumerate() {
        if f.len() != ffn_width {
            return Err(Error::Checkpoint(format!(
                "uneven ffn widths: layer {} keeps {}, layer 0 keeps {}",
                k,
                f.len(),
                ffn_width
            )));
        }
    }

    let mut new_cfg = cfg.clone();
    new_cfg.hidden_dim = hidden_keep.len();
    new_cfg.ffn_dim = ffn_width;
    new_cfg.qk_head_dim = Some(qk_cols[0].len() / cfg.num_heads);
    new_cfg.vo_head_dim = Some(vo_cols[0].len() / cfg.num_heads);

    let all: Vec<usize> = (0..cfg.vocab_size).collect();
    let all_pos: Vec<usize> = (0..cfg.max_seq_len).collect();
    let grab_2d = |name: &str, rows: &[usize], cols_keep: &[usize]| -> Tensor {
        let t = model.param(name);
        let cols = t.shape()[1];
        Tensor::param(&[rows.len(), cols_keep.len()], gather_2d(&t.to_vec(), cols, rows, cols_keep))
    };
    let grab_1d = |name: &str, keep: &[usize]| -> Tensor {
        Tensor::param(&[keep.len()], gather_1d(&model.param(name).to_vec(), keep))
    };

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    tensors.insert("embed.tok".into(), grab_2d("embed.tok", &all, &hidden_keep));
    tensors.insert("embed.pos".into(), grab_2d("embed.pos", &all_pos, &hidden_keep));
    tensors.insert("embed.ln.gamma".into(), grab_1d("embed.ln.gamma", &hidden_keep));
    tensors.insert("embed.ln.beta".into(), grab_1d("embed.ln.beta", &hidden_keep));
    for k in 0..cfg.num_layers {
        let p = format!("layer.{}", k);
        tensors.insert(
            format!("{}.attn.w_q", p),
            grab_2d(&format!("{}.attn.w_q", p), &hidden_keep, &qk_cols[k]),
        );
        tensors.insert(format!("{}.attn.b_q", p), grab_1d(&format!("{}.attn.b_q", p), &qk_cols[k]));
        tensors.insert(
            format!("{}.attn.w_k", p),
            grab_2d(&format!("{}.attn.w_k", p), &hidden_keep, &qk_cols[k]),
        );
        tensors.insert(format!("{}.attn.b_k", p), grab_1d(&format!("{}.attn.b_k", p), &qk_cols[k]));
        tensors.insert(
            format!("{}.attn.w_v", p),
            grab_2d(&format!("{}.attn.w_v", p), &hidden_keep, &vo_cols[k]),
        );
        tensors.insert(format!("{}.attn.b_v", p), grab_1d(&format!("{}.attn.b_v", p), &vo_cols[k]));
        tensors.insert(
            format!("{}.attn.w_o", p),
            grab_2d(&format!("{}.attn.w_o", p), &vo_cols[k], &hidden_keep),
        );
        tensors.insert(format!("{}.attn.b_o", p), grab_1d(&format!("{}.attn.b_o", p), &hidden_keep));
        tensors.insert(
            format!("{}.ln_attn.gamma", p),
            grab_1d(&format!("{}.ln_attn.gamma", p), &hidden_keep),
        );
        tensors.insert(
            format!("{}.ln_attn.beta", p),
            grab_1d(&format!("{}.ln_attn.beta", p), &hidden_keep),
        );
        tensors.insert(
            format!("{}.ffn.w_in", p),
            grab_2d(&format!("{}.ffn.w_in", p), &hidden_keep, &ffn_keep[k]),
        );
        tensors.insert(format!("{}.ffn.b_in", p), grab_1d(&format!("{}.ffn.b_in", p), &ffn_keep[k]));
        tensors.insert(
            format!("{}.ffn.w_out", p),
            grab_2d(&format!("{}.ffn.w_out", p), &ffn_keep[k], &hidden_keep),
        );
        tensors.insert(format!("{}.ffn.b_out", p), grab_1d(&format!("{}.ffn.b_out", p), &hidden_keep));
        tensors.insert(
            format!("{}.ln_ffn.gamma", p),
            grab_1d(&format!("{}.ln_ffn.gamma", p), &hidden_keep),
        );
        tensors.insert(
            format!("{}.ln_ffn.beta", p),
            grab_1d(&format!("{}.ln_ffn.beta", p), &hidden_keep),
        );
    }
    tensors.insert("head.w_mlm".into(), grab_2d("head.w_mlm", &hidden_keep, &hidden_keep));
    tensors.insert("head.b_mlm".into(), grab_1d("head.b_mlm", &hidden_keep));
    tensors.insert("head.ln.gamma".into(), grab_1d("head.ln.gamma", &hidden_keep));
    tensors.insert("head.ln.beta".into(), grab_1d("head.ln.beta", &hidden_keep));
    tensors.insert(
        "head.b_vocab".into(),
        Tensor::param(&[cfg.vocab_size], model.param("head.b_vocab").to_vec()),
    );

    TransformerModel::from_tensors(new_cfg, tensors)
}

/// Convenience: the group table for a model's configuration.
pub fn groups_for(cfg: &ModelConfig) -> Vec<CouplingGroup> {
    coupling_groups(cfg)
}
