//! Reconstruction losses. Graph versions feed training; the `_value`
//! helpers evaluate the same formulas on plain tensors.

use crate::diffengine::{Graph, NodeId, Tensor};
use crate::{Error, Result};

fn same_shape(g: &Graph, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(op, &[g.value(a).shape(), g.value(b).shape()]));
    }
    Ok(())
}

/// mean |(pred − target) ⊙ mask| over all elements of `pred`.
pub fn loss_face_node(g: &mut Graph, pred: NodeId, target: NodeId, mask: NodeId) -> Result<NodeId> {
    same_shape(g, "loss_face", pred, target)?;
    let d = g.sub(pred, target)?;
    let d = g.mul_channel(d, mask)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// mean |pred_mask − mask|.
pub fn loss_mask_node(g: &mut Graph, pred_mask: NodeId, mask: NodeId) -> Result<NodeId> {
    same_shape(g, "loss_mask", pred_mask, mask)?;
    let d = g.sub(pred_mask, mask)?;
    let a = g.abs(d)?;
    g.mean(a)
}

pub fn loss_rec_node(
    g: &mut Graph,
    pred_face: NodeId,
    pred_mask: NodeId,
    target: NodeId,
    mask: NodeId,
) -> Result<NodeId> {
    let f = loss_face_node(g, pred_face, target, mask)?;
    let m = loss_mask_node(g, pred_mask, mask)?;
    g.add(f, m)
}

pub fn loss_face(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let (p, t, m) = (g.constant(pred.clone()), g.constant(target.clone()), g.constant(mask.clone()));
    let l = loss_face_node(&mut g, p, t, m)?;
    g.value(l).item()
}

pub fn loss_mask(pred_mask: &Tensor, mask: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let (p, m) = (g.constant(pred_mask.clone()), g.constant(mask.clone()));
    let l = loss_mask_node(&mut g, p, m)?;
    g.value(l).item()
}

pub fn loss_rec(pred_face: &Tensor, pred_mask: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f32> {
    Ok(loss_face(pred_face, target, mask)? + loss_mask(pred_mask, mask)?)
}
