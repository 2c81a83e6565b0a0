//! Distillation and supervised contrastive objectives.

use candle_core::{DType, Device, Tensor, D};

use super::heads::{l2_normalize, Projected};
use crate::error::{Error, Result};

/// Per-row `KL(teacher || student)` over the last dimension.
fn kl_rows(student: &Projected, teacher: &Projected) -> Result<Tensor> {
    if student.probs.dims() != teacher.probs.dims() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.probs.dims(),
            teacher.probs.dims()
        )));
    }
    let diff = (&teacher.log_probs - &student.log_probs)?;
    Ok((&teacher.probs * diff)?.sum(D::Minus1)?)
}

/// `KL(z_t || z_s)` averaged over every leading position: cross-entropy of
/// the detached teacher against the student minus the teacher entropy.
pub fn mcd_loss(z_s: &Projected, z_t: &Projected) -> Result<Tensor> {
    Ok(kl_rows(z_s, &z_t.detach())?.mean_all()?)
}

/// Mean over all (student view, teacher view) pairs, skipping the pairs where
/// a student global view meets the teacher's copy of the same view. Student
/// views are ordered globals first, then locals.
pub fn cls_distill_loss(student: &[Projected], teacher: &[Projected]) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (i, s) in student.iter().enumerate() {
        for (j, t) in teacher.iter().enumerate() {
            if i == j {
                continue;
            }
            terms.push(mcd_loss(s, t)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Config(
            "cls distillation needs at least two views".into(),
        ));
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// Mean KL over masked positions. `mask` is `[B, N]` with 1 at masked
/// positions; an empty mask gives 0.
pub fn patch_distill_loss(student: &Projected, teacher: &Projected, mask: &Tensor) -> Result<Tensor> {
    let kl = kl_rows(student, &teacher.detach())?;
    if kl.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "patch KL {:?} vs mask {:?}",
            kl.dims(),
            mask.dims()
        )));
    }
    let count = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Ok(Tensor::zeros((), kl.dtype(), kl.device())?);
    }
    Ok(((kl * mask)?.sum_all()? / count)?)
}

/// Supervised contrastive loss with same-group samples as positives.
///
/// For anchor `i` with positives `P(i)` and all other samples `A(i)`:
/// `-1/|P(i)| * sum_p log(exp(s_ip / tau) / sum_a exp(s_ia / tau))` on
/// L2-normalized embeddings, averaged over anchors that have a positive.
/// A batch with a single group (no negatives) or with no positive pairs
/// returns 0.
pub fn antibody_contrastive_loss(embeddings: &Tensor, group_ids: &[usize], temperature: f64) -> Result<Tensor> {
    let (b, _) = embeddings.dims2()?;
    if group_ids.len() != b {
        return Err(Error::Shape(format!(
            "{} group ids for {b} embeddings",
            group_ids.len()
        )));
    }
    let zero = || -> Result<Tensor> { Ok(Tensor::zeros((), embeddings.dtype(), embeddings.device())?) };
    let first = group_ids.first().copied();
    if group_ids.iter().all(|&g| Some(g) == first) {
        log::warn!("contrastive batch has a single group; loss is 0");
        return zero();
    }
    let mut pos = vec![0f64; b * b];
    let mut off_diag = vec![0f64; b * b];
    let mut anchors = 0usize;
    let mut row_weight = vec![0f64; b];
    for i in 0..b {
        let mut n_pos = 0;
        for j in 0..b {
            if i != j {
                off_diag[i * b + j] = 1.0;
                if group_ids[i] == group_ids[j] {
                    pos[i * b + j] = 1.0;
                    n_pos += 1;
                }
            }
        }
        if n_pos > 0 {
            anchors += 1;
            row_weight[i] = 1.0 / n_pos as f64;
        }
    }
    if anchors == 0 {
        log::warn!("contrastive batch has no positive pairs; loss is 0");
        return zero();
    }
    let dev = embeddings.device();
    let dtype = embeddings.dtype();
    let to_t = |v: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?.to_device(dev)?)
    };
    let pos = to_t(pos, (b, b))?;
    let off_diag = to_t(off_diag, (b, b))?;
    let row_weight = to_t(row_weight, (b, 1))?;

    let z = l2_normalize(embeddings)?;
    let sim = (z.matmul(&z.t()?)? / temperature)?;
    // self-similarity pushed far below every other logit
    let sim = ((sim * &off_diag)? + (off_diag.affine(1e4, -1e4))?)?;
    let log_prob = candle_nn::ops::log_softmax(&sim, D::Minus1)?;
    let per_anchor = (log_prob * pos)?.broadcast_mul(&row_weight)?.sum_all()?;
    Ok((per_anchor.neg()? / anchors as f64)?)
}
