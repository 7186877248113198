//! Instance-level edits on a lifted field: removal, rigid relocation,
//! recoloring and asset insertion. Every edit returns a sparse field, since
//! the one-primitive-per-pixel correspondence no longer holds.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{GaussianField, GaussianPrimitive, SceneError, SegmentationField};

const RIGID_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EditError {
    #[error("unknown instance id {0}")]
    UnknownInstance(i32),
    #[error("instance {0} has no Gaussians")]
    EmptyInstance(i32),
    #[error("transform is not rigid: {0}")]
    NotRigid(String),
    #[error("recolor needs at least 3 attribute channels, field has {0}")]
    NoColor(usize),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EditOp {
    Remove { ins_id: i32 },
    /// Row-major 4x4 rigid transform.
    Relocate { ins_id: i32, transform: [[f64; 4]; 4] },
    Recolor { ins_id: i32, color: [f64; 3] },
}

impl EditOp {
    pub fn ins_id(&self) -> i32 {
        match self {
            EditOp::Remove { ins_id } | EditOp::Relocate { ins_id, .. } | EditOp::Recolor { ins_id, .. } => *ins_id,
        }
    }
}

/// Ordered list of edits, as read from a plan file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub ops: Vec<EditOp>,
}

fn members(seg: &SegmentationField, ins_id: i32) -> Result<&[usize], EditError> {
    seg.ins_sets
        .get(&ins_id)
        .map(Vec::as_slice)
        .ok_or(EditError::UnknownInstance(ins_id))
}

fn member_mask(field: &GaussianField, seg: &SegmentationField, ins_id: i32) -> Result<Vec<bool>, EditError> {
    let mut mask = vec![false; field.len()];
    for &g in members(seg, ins_id)? {
        if let Some(m) = mask.get_mut(g) {
            *m = true;
        }
    }
    Ok(mask)
}

/// Field without the Gaussians of instance `ins_id`.
pub fn remove_instance(field: &GaussianField, seg: &SegmentationField, ins_id: i32) -> Result<GaussianField, EditError> {
    let mask = member_mask(field, seg, ins_id)?;
    let prims = field
        .prims()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(p, _)| p.clone())
        .collect();
    Ok(GaussianField::sparse(field.attr_dim(), prims)?)
}

/// Splits a rigid 4x4 transform into rotation and translation.
pub fn rigid_parts(t: &Matrix4<f64>) -> Result<(Matrix3<f64>, Vector3<f64>), EditError> {
    if !t.iter().all(|v| v.is_finite()) {
        return Err(EditError::NotRigid("non-finite entries".into()));
    }
    let r: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > RIGID_TOL {
        return Err(EditError::NotRigid(format!("rotation orthonormality error {err:e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > RIGID_TOL {
        return Err(EditError::NotRigid(format!("determinant {det}")));
    }
    let row = t.row(3);
    if row[0] != 0.0 || row[1] != 0.0 || row[2] != 0.0 || row[3] != 1.0 {
        return Err(EditError::NotRigid("bottom row is not (0, 0, 0, 1)".into()));
    }
    Ok((r, t.fixed_view::<3, 1>(0, 3).into_owned()))
}

/// Applies `t` to the members of `ins_id`: means are transformed and
/// orientations pre-multiplied by the rotation; scale and opacity are kept.
pub fn relocate_instance(field: &GaussianField, seg: &SegmentationField, ins_id: i32, t: &Matrix4<f64>) -> Result<GaussianField, EditError> {
    let (r, trans) = rigid_parts(t)?;
    let mask = member_mask(field, seg, ins_id)?;
    if *t == Matrix4::identity() {
        return Ok(GaussianField::sparse(field.attr_dim(), field.prims().to_vec())?);
    }
    let q_t = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let prims = field
        .prims()
        .iter()
        .zip(&mask)
        .map(|(p, &m)| {
            if !m {
                return p.clone();
            }
            let mu = r * Vector3::from(p.mean) + trans;
            let [w, x, y, z] = p.rotation;
            let q = q_t.into_inner() * Quaternion::new(w, x, y, z);
            GaussianPrimitive {
                mean: [mu.x, mu.y, mu.z],
                rotation: [q.w, q.i, q.j, q.k],
                ..p.clone()
            }
        })
        .collect();
    Ok(GaussianField::sparse(field.attr_dim(), prims)?)
}

/// Sets the first three attribute channels of every member to `rgb`.
pub fn recolor_instance(field: &GaussianField, seg: &SegmentationField, ins_id: i32, rgb: [f64; 3]) -> Result<GaussianField, EditError> {
    if field.attr_dim() < 3 {
        return Err(EditError::NoColor(field.attr_dim()));
    }
    let mask = member_mask(field, seg, ins_id)?;
    if !mask.iter().any(|&m| m) {
        return Err(EditError::EmptyInstance(ins_id));
    }
    let prims = field
        .prims()
        .iter()
        .zip(&mask)
        .map(|(p, &m)| {
            let mut p = p.clone();
            if m {
                p.attr[..3].copy_from_slice(&rgb);
            }
            p
        })
        .collect();
    Ok(GaussianField::sparse(field.attr_dim(), prims)?)
}

/// Appends external Gaussians (e.g. a replacement asset).
pub fn append_assets(field: &GaussianField, assets: &[GaussianPrimitive]) -> Result<GaussianField, EditError> {
    let mut prims = field.prims().to_vec();
    prims.extend_from_slice(assets);
    Ok(GaussianField::sparse(field.attr_dim(), prims)?)
}

/// Segmentation with indices renumbered after dropping the Gaussians where
/// `removed` is set.
fn compact_segmentation(seg: &SegmentationField, removed: &[bool]) -> SegmentationField {
    let mut new_index = vec![None; removed.len()];
    let mut next = 0;
    for (g, &r) in removed.iter().enumerate() {
        if !r {
            new_index[g] = Some(next);
            next += 1;
        }
    }
    let remap = |sets: &BTreeMap<i32, Vec<usize>>| -> BTreeMap<i32, Vec<usize>> {
        sets.iter()
            .map(|(&k, v)| (k, v.iter().filter_map(|&g| new_index.get(g).copied().flatten()).collect::<Vec<_>>()))
            .filter(|(_, v)| !v.is_empty())
            .collect()
    };
    SegmentationField {
        sem_sets: remap(&seg.sem_sets),
        ins_sets: remap(&seg.ins_sets),
        pano_stuff: remap(&seg.pano_stuff),
        pano_things: remap(&seg.pano_things),
        text: seg.text.as_ref().and_then(|t| {
            let members: Vec<usize> = t.members.iter().filter_map(|&g| new_index.get(g).copied().flatten()).collect();
            (!members.is_empty()).then_some(crate::scene::TextSegment { ins_id: t.ins_id, members })
        }),
    }
}

/// Applies the plan's operations in order, keeping the segmentation in
/// step with removals so later operations address the right Gaussians.
pub fn apply_plan(field: &GaussianField, seg: &SegmentationField, plan: &EditPlan) -> Result<(GaussianField, SegmentationField), EditError> {
    let mut field = GaussianField::sparse(field.attr_dim(), field.prims().to_vec())?;
    let mut seg = seg.clone();
    for op in &plan.ops {
        match op {
            EditOp::Remove { ins_id } => {
                let removed = member_mask(&field, &seg, *ins_id)?;
                field = remove_instance(&field, &seg, *ins_id)?;
                seg = compact_segmentation(&seg, &removed);
            }
            EditOp::Relocate { ins_id, transform } => {
                let t = Matrix4::from_fn(|r, c| transform[r][c]);
                field = relocate_instance(&field, &seg, *ins_id, &t)?;
            }
            EditOp::Recolor { ins_id, color } => {
                field = recolor_instance(&field, &seg, *ins_id, *color)?;
            }
        }
    }
    Ok((field, seg))
}
