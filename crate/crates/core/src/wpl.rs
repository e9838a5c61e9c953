//! Weight plasticity loss assembly.
//!
//! The loss is the task loss plus a weak L2 prior on all trainable
//! parameters plus a Fisher-weighted quadratic penalty pulling shared
//! parameters toward the anchor snapshot taken when the previous model
//! finished training:
//!
//! `L = L_task + (lambda/2)(|theta_s|^2 + |theta_2|^2)
//!    + (alpha/2) sum_i F_i (theta_s_i - anchor_i)^2`
//!
//! The penalty coefficient `alpha` follows a warm-up-then-decay schedule so
//! that shared weights can move off their random initialization before being
//! anchored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fisher::FisherState;
use crate::graph::{Graph, GraphError, NodeId, NodeValues};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum WplError {
    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("alpha must be nonnegative, got {0}")]
    NegativeAlpha(f64),
    #[error("prior variance must be positive, got {0}")]
    BadSigma2(f64),
    #[error("anchor does not cover shared parameter `{0}`")]
    AnchorGap(ParamId),
    #[error("shared parameter `{id}` has shape {node:?}, anchor holds {anchor:?}")]
    ShapeMismatch {
        id: ParamId,
        node: Vec<usize>,
        anchor: Vec<usize>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Piecewise-constant schedule for the anchor penalty coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSchedule {
    /// Same coefficient at every post-warm-up epoch.
    Constant { alpha0: f64 },
    /// `alpha0` until `step_offset` epochs past warm-up, then `alpha0 * factor`.
    StepDecay {
        alpha0: f64,
        step_offset: u64,
        factor: f64,
    },
}

impl AlphaSchedule {
    /// Step decay by 10x at the halfway point of the post-warm-up budget.
    pub fn step_halfway(alpha0: f64, post_warmup_epochs: u64) -> Self {
        AlphaSchedule::StepDecay {
            alpha0,
            step_offset: post_warmup_epochs / 2,
            factor: 0.1,
        }
    }

    fn value(&self, offset: u64) -> f64 {
        match *self {
            AlphaSchedule::Constant { alpha0 } => alpha0,
            AlphaSchedule::StepDecay {
                alpha0,
                step_offset,
                factor,
            } => {
                if offset < step_offset {
                    alpha0
                } else {
                    alpha0 * factor
                }
            }
        }
    }

    fn validate(&self) -> Result<(), WplError> {
        let (alpha0, factor) = match *self {
            AlphaSchedule::Constant { alpha0 } => (alpha0, 1.0),
            AlphaSchedule::StepDecay { alpha0, factor, .. } => (alpha0, factor),
        };
        if alpha0 < 0.0 || factor < 0.0 {
            return Err(WplError::NegativeAlpha(alpha0.min(factor)));
        }
        Ok(())
    }
}

/// Configuration of the plasticity loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WplConfig {
    /// L2 prior weight.
    pub lambda: f64,
    /// Anchor penalty schedule, evaluated past warm-up.
    pub alpha: AlphaSchedule,
    /// Epochs with the penalty disabled entirely.
    pub warmup_epochs: u64,
    /// Prior variance of the Gaussian parameter prior. Only the Laplace
    /// oracles consume it; it is carried here because it is part of the
    /// statistical model the loss is derived from.
    pub sigma2: f64,
}

impl Default for WplConfig {
    fn default() -> Self {
        WplConfig {
            lambda: 1e-4,
            alpha: AlphaSchedule::Constant { alpha0: 1.0 },
            warmup_epochs: 0,
            sigma2: 1.0,
        }
    }
}

impl WplConfig {
    pub fn validate(&self) -> Result<(), WplError> {
        if self.lambda < 0.0 {
            return Err(WplError::NegativeLambda(self.lambda));
        }
        if self.sigma2 <= 0.0 {
            return Err(WplError::BadSigma2(self.sigma2));
        }
        self.alpha.validate()
    }
}

/// Penalty coefficient at `epoch`: zero during warm-up, the schedule value
/// afterwards.
pub fn alpha_at(cfg: &WplConfig, epoch: u64) -> f64 {
    if epoch < cfg.warmup_epochs {
        0.0
    } else {
        cfg.alpha.value(epoch - cfg.warmup_epochs)
    }
}

/// Graph nodes of an assembled plasticity loss.
#[derive(Debug, Clone)]
pub struct WplTerms {
    pub total: NodeId,
    pub task: NodeId,
    pub l2: NodeId,
    /// Absent when the penalty coefficient is zero; the term is then exactly
    /// zero and the graph is identical to a penalty-free one.
    pub anchor: Option<NodeId>,
    pub alpha: f64,
}

/// Term-by-term values of one loss evaluation. `total` is the exact
/// floating-point sum `task_loss + l2_term + anchor_term`, in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WplBreakdown {
    pub task_loss: f64,
    pub l2_term: f64,
    pub anchor_term: f64,
    pub total: f64,
}

impl WplTerms {
    pub fn breakdown(&self, values: &NodeValues<f64>) -> WplBreakdown {
        WplBreakdown {
            task_loss: values.scalar(self.task),
            l2_term: values.scalar(self.l2),
            anchor_term: self.anchor.map(|n| values.scalar(n)).unwrap_or(0.0),
            total: values.scalar(self.total),
        }
    }
}

/// Extend a graph holding `task_loss` with the L2 and anchor terms.
///
/// `theta_2` are the current model's private parameters, `theta_s` the
/// parameters it shares with previously trained models. The gradient of the
/// result with respect to a shared parameter is
/// `dL_task/dtheta_s + lambda * theta_s + alpha * F . (theta_s - anchor)`.
pub fn attach_wpl_loss<S: Scalar>(
    graph: &mut Graph<S>,
    task_loss: NodeId,
    theta_2: &[(ParamId, NodeId)],
    theta_s: &[(ParamId, NodeId)],
    fisher: &FisherState<S>,
    cfg: &WplConfig,
    epoch: u64,
) -> Result<WplTerms, WplError> {
    cfg.validate()?;
    let alpha = alpha_at(cfg, epoch);

    // L2 over shared then private parameters, scaled once by lambda/2.
    let mut sum = None;
    for (_, node) in theta_s.iter().chain(theta_2.iter()) {
        let sq = graph.sum_squares(*node)?;
        sum = Some(match sum {
            None => sq,
            Some(acc) => graph.scalar_add(acc, sq)?,
        });
    }
    let half_lambda = S::from_f64(cfg.lambda / 2.0);
    let l2 = match sum {
        Some(acc) => graph.scalar_scale(acc, half_lambda)?,
        None => {
            let zero = graph.input("wpl/zero", vec![1]);
            graph.scalar_scale(zero, S::zero())?
        }
    };

    let anchor = if alpha > 0.0 && !theta_s.is_empty() {
        let mut acc = None;
        for (id, node) in theta_s {
            let center = fisher
                .anchor()
                .get(id)
                .ok_or_else(|| WplError::AnchorGap(id.clone()))?;
            let node_shape = graph.shape(*node).to_vec();
            if center.shape() != node_shape.as_slice() {
                return Err(WplError::ShapeMismatch {
                    id: id.clone(),
                    node: node_shape,
                    anchor: center.shape().to_vec(),
                });
            }
            let weights = match fisher.estimate(id) {
                Some(f) => f.clone(),
                None => Tensor::zeros(node_shape),
            };
            let term = graph.weighted_squared_diff(*node, weights, center.clone())?;
            acc = Some(match acc {
                None => term,
                Some(prev) => graph.scalar_add(prev, term)?,
            });
        }
        let scaled = graph.scalar_scale(acc.expect("theta_s nonempty"), S::from_f64(alpha / 2.0))?;
        Some(scaled)
    } else {
        None
    };

    let mut total = graph.scalar_add(task_loss, l2)?;
    if let Some(anchor_node) = anchor {
        total = graph.scalar_add(total, anchor_node)?;
    }

    Ok(WplTerms {
        total,
        task: task_loss,
        l2,
        anchor,
        alpha,
    })
}
