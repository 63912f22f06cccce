//! Fast gradient method on embedded inputs.
//!
//! The perturbation is applied to the looked-up embeddings on a second tape,
//! never written into the table, so nothing has to be undone afterwards.

use serde::{Deserialize, Serialize};

use crate::nn::{Grads, Matrix, NnError, NodeId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgmConfig {
    pub enabled: bool,
    pub epsilon: f64,
    #[serde(default = "yes")]
    pub apply_every_step: bool,
}

fn yes() -> bool {
    true
}

impl Default for FgmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: 1.0,
            apply_every_step: true,
        }
    }
}

impl FgmConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(NnError::InvalidConfig("fgm.epsilon must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Whether update number `step` (0-based) gets an adversarial pass.
    pub fn active_at(&self, step: usize) -> bool {
        self.enabled && self.epsilon > 0.0 && (self.apply_every_step || step % 2 == 0)
    }
}

/// `r = epsilon * g / ||g||_2` over the whole matrix; zero when `g` is zero.
pub fn perturbation(g: &Matrix, epsilon: f64) -> Result<Matrix, NnError> {
    if !g.is_finite() {
        return Err(NnError::NonFiniteGradient);
    }
    let n = g.norm();
    if n == 0.0 {
        return Ok(Matrix::zeros(g.rows(), g.cols()));
    }
    Ok(g.map(|x| epsilon * x / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgmReport {
    pub clean_loss: f64,
    pub adversarial_loss: Option<f64>,
    /// `||r||_2` per embedded sequence.
    pub perturbation_norms: Vec<f64>,
}

impl FgmReport {
    pub fn loss(&self) -> f64 {
        self.clean_loss + self.adversarial_loss.unwrap_or(0.0)
    }
}

/// Runs the clean forward/backward of `loss_fn` and, when `fgm` is active,
/// a second pass with every embedded sequence shifted by its own `r`. Both
/// passes use the same dropout seed and both add their parameter gradients
/// into `grads`. With `fgm` inactive this is exactly one clean pass.
pub fn adversarial_step<F>(
    store: &ParamStore,
    grads: &mut Grads,
    fgm: Option<&FgmConfig>,
    dropout: f64,
    seed: u64,
    loss_fn: F,
) -> Result<FgmReport, NnError>
where
    F: Fn(&mut Tape) -> Result<NodeId, NnError>,
{
    let mut tape = Tape::training(store, dropout, seed);
    let loss = loss_fn(&mut tape)?;
    tape.backward(loss)?;
    tape.accumulate_into(grads)?;
    let clean_loss = tape.value(loss).item();
    let Some(cfg) = fgm.filter(|c| c.enabled && c.epsilon > 0.0) else {
        return Ok(FgmReport {
            clean_loss,
            adversarial_loss: None,
            perturbation_norms: Vec::new(),
        });
    };
    let rs = tape
        .embedding_gradients()?
        .iter()
        .map(|g| perturbation(g, cfg.epsilon))
        .collect::<Result<Vec<_>, _>>()?;
    let perturbation_norms = rs.iter().map(Matrix::norm).collect();
    drop(tape);
    let mut adv = Tape::training(store, dropout, seed).with_perturbations(rs);
    let adv_loss = loss_fn(&mut adv)?;
    adv.backward(adv_loss)?;
    adv.accumulate_into(grads)?;
    Ok(FgmReport {
        clean_loss,
        adversarial_loss: Some(adv.value(adv_loss).item()),
        perturbation_norms,
    })
}
