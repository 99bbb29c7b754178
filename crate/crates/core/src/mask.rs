//! Partitioning model parameters into forgetting and fit hypotheses, and the
//! per-hypothesis interventions (re-initialization, freezing).

use crate::error::{Error, Result};
use crate::nn::{LayeredModel, ParamId};
use crate::optim::SgdState;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// How the layer threshold assigns parameters to hypotheses.
///
/// - `Seal`: layers below the threshold form the forgetting hypothesis
///   (they ascend during the forgetting window).
/// - `Llf`: layers at or above the threshold, including the classifier head,
///   form the forgetting hypothesis (they are re-initialized each
///   generation).
/// - `Reverse`: the seal partition with the two sets swapped, so the later
///   layers ascend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Seal,
    Llf,
    Reverse,
}

/// A disjoint, exhaustive split of parameter identities.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisMask {
    pub threshold: usize,
    pub scheme: Scheme,
    pub forget_set: BTreeSet<ParamId>,
    pub fit_set: BTreeSet<ParamId>,
}

impl HypothesisMask {
    pub fn is_forget(&self, id: ParamId) -> bool {
        self.forget_set.contains(&id)
    }
}

/// Split a model at layer threshold `threshold` under `scheme`.
pub fn split(model: &LayeredModel, threshold: usize, scheme: Scheme) -> Result<HypothesisMask> {
    let depth = model.layers.len();
    if threshold == 0 || threshold >= depth {
        return Err(Error::Config(format!(
            "layer threshold must satisfy 0 < L < {depth}, got {threshold}"
        )));
    }
    let mut forget_set = BTreeSet::new();
    let mut fit_set = BTreeSet::new();
    for id in model.param_ids() {
        let early = id.layer < threshold;
        let forgets = match scheme {
            Scheme::Seal => early,
            Scheme::Llf | Scheme::Reverse => !early,
        };
        if forgets {
            forget_set.insert(id);
        } else {
            fit_set.insert(id);
        }
    }
    Ok(HypothesisMask {
        threshold,
        scheme,
        forget_set,
        fit_set,
    })
}

/// Default layer threshold: half the model depth, mirroring a split at the
/// last half of the network.
pub fn default_threshold(model: &LayeredModel) -> usize {
    (model.layers.len() / 2).max(1)
}

/// Redraw the selected parameters from their layers' initialization
/// distributions. Unselected parameters are bitwise untouched; momentum
/// buffers of the selected parameters are zeroed when an optimizer state is
/// supplied.
pub fn reinitialize(
    model: &mut LayeredModel,
    selector: &BTreeSet<ParamId>,
    seed: u64,
    sgd: Option<&mut SgdState>,
) -> Result<()> {
    for &id in selector {
        model.reinit_param(id, seed)?;
    }
    if let Some(state) = sgd {
        state.zero_buffers(selector.iter());
    }
    Ok(())
}

/// Mark the selected parameters frozen or unfrozen. Frozen parameters
/// receive no optimizer updates until unfrozen.
pub fn set_frozen(model: &mut LayeredModel, selector: &BTreeSet<ParamId>, frozen: bool) -> Result<()> {
    for &id in selector {
        model.param_mut(id)?.frozen = frozen;
    }
    Ok(())
}

/// Mask summary for manifests: scheme, threshold, scalar counts per side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskSummary {
    pub scheme: Scheme,
    pub threshold: usize,
    pub forget_params: usize,
    pub fit_params: usize,
}

impl MaskSummary {
    pub fn of(model: &LayeredModel, mask: &HypothesisMask) -> Self {
        let count = |set: &BTreeSet<ParamId>| {
            set.iter()
                .map(|&id| model.param(id).map(|p| p.value.numel()).unwrap_or(0))
                .sum()
        };
        MaskSummary {
            scheme: mask.scheme,
            threshold: mask.threshold,
            forget_params: count(&mask.forget_set),
            fit_params: count(&mask.fit_set),
        }
    }
}
