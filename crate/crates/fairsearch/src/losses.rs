//! Loss functions: cross-entropy lives on the tape
//! ([`Tape::cross_entropy`](crate::tensor::Tape::cross_entropy)); this module
//! adds the zero-one polarization loss, the redundancy-reduction
//! (cross-correlation) loss, and the combined architecture loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{ArchParams, Gating};
use crate::tensor::{sigmoid, Element, Tape, Tensor, Var};

/// Loss weighting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the zero-one loss in the architecture objective, active
    /// after warm-up in sigmoid-gated modes.
    pub lambda_zero_one: f64,
    /// Off-diagonal weight of the redundancy-reduction loss.
    pub lambda_bt: f64,
    pub zero_one_warmup_epochs: usize,
    /// Subtract per-column batch means before computing the
    /// cross-correlation matrix.
    pub bt_mean_center: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_zero_one: 1.0,
            lambda_bt: 5e-3,
            zero_one_warmup_epochs: 10,
            bt_mean_center: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_zero_one < 0.0 || self.lambda_bt < 0.0 {
            return Err(Error::InvalidArg(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Zero-one loss over one edge's attention values:
/// `-(1/N) * sum_i |sigmoid(alpha_i) - 0.5|`, in `[-0.5, 0]`.
pub fn zero_one_loss(alpha_edge_values: &[f64]) -> f64 {
    assert!(!alpha_edge_values.is_empty(), "zero_one_loss of empty edge");
    let n = alpha_edge_values.len() as f64;
    -alpha_edge_values
        .iter()
        .map(|&a| (sigmoid(a) - 0.5).abs())
        .sum::<f64>()
        / n
}

/// Mean zero-one loss over all edges of both alpha matrices.
pub fn mean_zero_one_loss(arch: &ArchParams) -> f64 {
    let k = arch.num_ops();
    let mut acc = 0.0;
    let mut edges = 0;
    for matrix in [&arch.alpha_normal, &arch.alpha_reduce] {
        for row in matrix.chunks(k) {
            acc += zero_one_loss(row);
            edges += 1;
        }
    }
    acc / edges as f64
}

/// Tape version of the zero-one loss, averaged over all entries of the given
/// alpha matrices (equal to the mean-over-edges of the per-edge loss).
pub fn zero_one_loss_on_tape<T: Element>(tape: &mut Tape<T>, alphas: &[Var]) -> Result<Var> {
    if alphas.is_empty() {
        return Err(Error::InvalidArg("zero_one_loss: no alpha matrices".into()));
    }
    let mut per_matrix = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let s = tape.sigmoid(a);
        let centered = tape.add_scalar(s, T::from_f64(-0.5));
        let mag = tape.abs(centered);
        let mean = tape.mean_all(mag);
        per_matrix.push(tape.neg(mean));
    }
    let mut acc = per_matrix[0];
    for &m in &per_matrix[1..] {
        acc = tape.add(acc, m)?;
    }
    Ok(tape.scale(acc, T::from_f64(1.0 / alphas.len() as f64)))
}

/// Whether the zero-one term is active for this epoch and gating mode.
pub fn zero_one_active(cfg: &LossConfig, epoch: usize, gating: Gating) -> bool {
    gating == Gating::Sigmoid && epoch >= cfg.zero_one_warmup_epochs && cfg.lambda_zero_one > 0.0
}

/// Combined architecture loss: `val_loss + lambda * mean zero-one loss` when
/// the zero-one term is active, `val_loss` otherwise.
pub fn total_arch_loss(
    val_loss: f64,
    arch: &ArchParams,
    cfg: &LossConfig,
    epoch: usize,
    gating: Gating,
) -> f64 {
    if zero_one_active(cfg, epoch, gating) {
        val_loss + cfg.lambda_zero_one * mean_zero_one_loss(arch)
    } else {
        val_loss
    }
}

/// Tape version of [`total_arch_loss`].
pub fn total_arch_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    val_loss: Var,
    alphas: &[Var],
    cfg: &LossConfig,
    epoch: usize,
    gating: Gating,
) -> Result<Var> {
    if !zero_one_active(cfg, epoch, gating) {
        return Ok(val_loss);
    }
    let zo = zero_one_loss_on_tape(tape, alphas)?;
    let scaled = tape.scale(zo, T::from_f64(cfg.lambda_zero_one));
    tape.add(val_loss, scaled)
}

/// Cross-correlation matrix of two embedding batches `[B,D]`:
/// `C_ij = sum_b zA_bi zB_bj / (||zA_.i|| ||zB_.j||)`, optionally after
/// per-column mean centering. Errors on a zero-norm column, naming the
/// dimension.
pub fn cross_correlation<T: Element>(
    tape: &mut Tape<T>,
    za: Var,
    zb: Var,
    mean_center: bool,
) -> Result<Var> {
    let sa = tape.shape(za).to_vec();
    let sb = tape.shape(zb).to_vec();
    if sa.len() != 2 || sa != sb {
        return Err(Error::ShapeMismatch(format!(
            "cross_correlation: embeddings {sa:?} vs {sb:?}"
        )));
    }
    if sa[0] < 2 {
        return Err(Error::InvalidArg(format!(
            "cross_correlation: batch of {} < 2",
            sa[0]
        )));
    }
    let (za, zb) = if mean_center {
        let ma = tape.mean_axis0(za)?;
        let mb = tape.mean_axis0(zb)?;
        (
            tape.sub_row_broadcast(za, ma)?,
            tape.sub_row_broadcast(zb, mb)?,
        )
    } else {
        (za, zb)
    };
    let mut norms = Vec::with_capacity(2);
    for (side, z) in [("zA", za), ("zB", zb)] {
        let sq = tape.square(z);
        let col_sq = tape.sum_axis0(sq)?;
        if let Some(i) = tape.data(col_sq).iter().position(|&v| v == T::ZERO) {
            return Err(Error::Numeric(format!(
                "cross_correlation: zero-norm column {i} in {side}"
            )));
        }
        norms.push(tape.sqrt(col_sq)?);
    }
    let numer = tape.matmul_ta(za, zb)?;
    let denom = tape.outer(norms[0], norms[1])?;
    tape.div(numer, denom)
}

/// Redundancy-reduction loss on a square cross-correlation matrix:
/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow_twins_loss<T: Element>(tape: &mut Tape<T>, c: Var, lambda_bt: f64) -> Result<Var> {
    let s = tape.shape(c).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::ShapeMismatch(format!(
            "barlow_twins_loss: expected square matrix, got {s:?}"
        )));
    }
    let d = s[0];
    let identity = tape.leaf(Tensor::<T>::eye(d), false);
    let mut weights = Tensor::<T>::full(vec![d, d], T::from_f64(lambda_bt));
    for i in 0..d {
        weights.data_mut()[i * d + i] = T::ONE;
    }
    let mask = tape.leaf(weights, false);
    let diff = tape.sub(c, identity)?;
    let sq = tape.square(diff);
    let weighted = tape.mul(sq, mask)?;
    Ok(tape.sum_all(weighted))
}

/// Convenience composition: embeddings to scalar loss.
pub fn barlow_twins_from_embeddings<T: Element>(
    tape: &mut Tape<T>,
    za: Var,
    zb: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let c = cross_correlation(tape, za, zb, cfg.bt_mean_center)?;
    barlow_twins_loss(tape, c, cfg.lambda_bt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_one_loss_is_zero_at_origin() {
        assert_eq!(zero_one_loss(&[0.0; 8]), 0.0);
    }

    #[test]
    fn zero_one_loss_approaches_lower_bound_when_polarized() {
        let polarized = [50.0, -50.0, 50.0, -50.0];
        let v = zero_one_loss(&polarized);
        assert!((v - (-0.5)).abs() < 1e-8, "got {v}");
    }

    #[test]
    fn zero_one_loss_direct_example() {
        // sigma(alpha) = (0.9, 0.5) -> -(0.4 + 0)/2 = -0.2
        let a = (0.9f64 / 0.1f64).ln(); // logit of 0.9
        let v = zero_one_loss(&[a, 0.0]);
        assert!((v - (-0.2)).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn total_arch_loss_inactive_cases() {
        let arch = ArchParams::zeros(&crate::search_space::OperationKind::ALL).unwrap();
        let cfg = LossConfig {
            lambda_zero_one: 0.0,
            ..Default::default()
        };
        assert_eq!(total_arch_loss(2.0, &arch, &cfg, 20, Gating::Sigmoid), 2.0);
        let cfg = LossConfig::default();
        // Softmax gating: rule applies to sigmoid modes only.
        assert_eq!(total_arch_loss(2.0, &arch, &cfg, 20, Gating::Softmax), 2.0);
        // Sigmoid gating but all alpha zero: the zero-one term is 0.
        assert_eq!(total_arch_loss(2.0, &arch, &cfg, 20, Gating::Sigmoid), 2.0);
        // During warm-up the term is off regardless.
        assert_eq!(total_arch_loss(2.0, &arch, &cfg, 5, Gating::Sigmoid), 2.0);
    }

    #[test]
    fn tape_zero_one_matches_plain_version() {
        let mut arch = ArchParams::zeros(&crate::search_space::OperationKind::ALL).unwrap();
        for (i, v) in arch.alpha_normal.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() * 2.0;
        }
        for (i, v) in arch.alpha_reduce.iter_mut().enumerate() {
            *v = (i as f64 * 0.53).cos() * 1.5;
        }
        let plain = mean_zero_one_loss(&arch);
        let mut tape = Tape::<f64>::new();
        let n = tape.leaf(arch.matrix_tensor(crate::search_space::CellKind::Normal), false);
        let r = tape.leaf(arch.matrix_tensor(crate::search_space::CellKind::Reduce), false);
        let v = zero_one_loss_on_tape(&mut tape, &[n, r]).unwrap();
        assert!((tape.scalar_value(v) - plain).abs() < 1e-12);
    }
}
