//! Diagonal Fisher information over shared parameters.
//!
//! The estimate is the elementwise square of loss gradients, blended across
//! time with a momentum coefficient and flushed to zero on a fixed epoch
//! period so that stale contributions from early training fade out. The
//! state also carries the anchor snapshot the plasticity penalty pulls
//! toward.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::graph::GradientMap;
use crate::params::{self, ParamId, Provenance, Snapshot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magic bytes opening a serialized Fisher state.
pub const FISHER_MAGIC: &[u8; 8] = b"WPLFISHR";
/// Current Fisher format version.
pub const FISHER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error("momentum coefficient {0} is outside [0, 1]")]
    BadEta(f64),
    #[error("flush period must be positive")]
    ZeroFlushPeriod,
    #[error("fresh estimate for `{id}` has shape {fresh:?}, state holds {state:?}")]
    ShapeMismatch {
        id: ParamId,
        state: Vec<usize>,
        fresh: Vec<usize>,
    },
    #[error("anchor does not cover `{0}`")]
    AnchorGap(ParamId),
    #[error("gradient for `{0}` is non-finite")]
    NonFinite(ParamId),
    #[error("bad magic bytes in `{0}`: not a Fisher state file")]
    BadMagic(String),
    #[error("unsupported Fisher state version {0}")]
    BadVersion(u32),
    #[error(transparent)]
    Store(#[from] params::StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Elementwise square of each gradient tensor — the single-batch Fisher
/// contribution.
pub fn fisher_from_gradients<S: Scalar>(
    grads: &GradientMap<S>,
) -> Result<BTreeMap<ParamId, Tensor<S>>, FisherError> {
    let mut out = BTreeMap::new();
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(FisherError::NonFinite(id.clone()));
        }
        out.insert(id.clone(), g.map(|v| v * v));
    }
    Ok(out)
}

/// Diagonal Fisher estimate plus the anchor snapshot.
#[derive(Debug, Clone)]
pub struct FisherState<S> {
    estimates: BTreeMap<ParamId, Tensor<S>>,
    anchor: Snapshot<S>,
    eta: S,
    flush_period: u64,
    last_flush_epoch: i64,
}

impl<S: Scalar> FisherState<S> {
    /// Fresh state with an empty estimate map.
    ///
    /// `last_flush_epoch` anchors the flush schedule; passing
    /// `first_epoch - flush_period` makes the first eligible epoch flush.
    pub fn new(
        anchor: Snapshot<S>,
        eta: S,
        flush_period: u64,
        last_flush_epoch: i64,
    ) -> Result<Self, FisherError> {
        if eta < S::zero() || eta > S::one() {
            return Err(FisherError::BadEta(eta.to_f64().unwrap_or(f64::NAN)));
        }
        if flush_period == 0 {
            return Err(FisherError::ZeroFlushPeriod);
        }
        Ok(FisherState {
            estimates: BTreeMap::new(),
            anchor,
            eta,
            flush_period,
            last_flush_epoch,
        })
    }

    /// Single-shot state: estimates set directly, momentum bypassed.
    pub fn from_estimates(
        anchor: Snapshot<S>,
        estimates: BTreeMap<ParamId, Tensor<S>>,
    ) -> Result<Self, FisherError> {
        let mut state = FisherState::new(anchor, S::one(), u64::MAX, 0)?;
        for (id, value) in estimates {
            if !state.anchor.contains(&id) {
                return Err(FisherError::AnchorGap(id));
            }
            state.estimates.insert(id, value);
        }
        Ok(state)
    }

    pub fn estimate(&self, id: &ParamId) -> Option<&Tensor<S>> {
        self.estimates.get(id)
    }

    pub fn estimates(&self) -> &BTreeMap<ParamId, Tensor<S>> {
        &self.estimates
    }

    pub fn anchor(&self) -> &Snapshot<S> {
        &self.anchor
    }

    pub fn eta(&self) -> S {
        self.eta
    }

    pub fn flush_period(&self) -> u64 {
        self.flush_period
    }

    pub fn last_flush_epoch(&self) -> i64 {
        self.last_flush_epoch
    }

    /// `F <- (1 - eta) F + eta fresh`, elementwise. Parameters absent from
    /// `fresh` keep their current estimate; parameters absent from the state
    /// start from zero.
    pub fn momentum_update(
        &mut self,
        fresh: &BTreeMap<ParamId, Tensor<S>>,
    ) -> Result<(), FisherError> {
        let one_minus = S::one() - self.eta;
        for (id, incoming) in fresh {
            if !self.anchor.contains(id) {
                return Err(FisherError::AnchorGap(id.clone()));
            }
            match self.estimates.get_mut(id) {
                Some(current) => {
                    if current.shape() != incoming.shape() {
                        return Err(FisherError::ShapeMismatch {
                            id: id.clone(),
                            state: current.shape().to_vec(),
                            fresh: incoming.shape().to_vec(),
                        });
                    }
                    let eta = self.eta;
                    *current = current
                        .zip_map(incoming, |old, new| one_minus * old + eta * new)
                        .expect("shapes checked");
                }
                None => {
                    let eta = self.eta;
                    self.estimates.insert(id.clone(), incoming.map(|v| eta * v));
                }
            }
        }
        Ok(())
    }

    /// Zero the buffer if at least `flush_period` epochs passed since the
    /// last flush. Returns whether a flush fired.
    pub fn maybe_flush(&mut self, epoch: u64) -> bool {
        let epoch = epoch as i64;
        debug_assert!(epoch >= self.last_flush_epoch, "epochs must not rewind");
        if epoch - self.last_flush_epoch >= self.flush_period as i64 {
            for value in self.estimates.values_mut() {
                *value = Tensor::zeros(value.shape().to_vec());
            }
            self.last_flush_epoch = epoch;
            true
        } else {
            false
        }
    }

    /// Replace the anchor snapshot; the estimates are unchanged.
    pub fn set_anchor(&mut self, snapshot: Snapshot<S>) -> Result<(), FisherError> {
        for id in self.estimates.keys() {
            if !snapshot.contains(id) {
                return Err(FisherError::AnchorGap(id.clone()));
            }
        }
        self.anchor = snapshot;
        Ok(())
    }
}

impl FisherState<f64> {
    /// Serialize: magic, version, eta `f64` LE, flush period `u64` LE, last
    /// flush epoch `i64` LE, then counted parameter-record sections for the
    /// estimates and the anchor (record layout shared with the parameter
    /// store).
    pub fn write_to(&self, writer: &mut impl Write) -> Result<(), FisherError> {
        writer.write_all(FISHER_MAGIC)?;
        writer.write_all(&FISHER_VERSION.to_le_bytes())?;
        writer.write_all(&self.eta.to_le_bytes())?;
        writer.write_all(&self.flush_period.to_le_bytes())?;
        writer.write_all(&self.last_flush_epoch.to_le_bytes())?;
        writer.write_all(&(self.estimates.len() as u64).to_le_bytes())?;
        for (id, tensor) in &self.estimates {
            params::write_record(writer, id, tensor)?;
        }
        let model = self.anchor.provenance().model.as_bytes();
        writer.write_all(&(model.len() as u64).to_le_bytes())?;
        writer.write_all(model)?;
        writer.write_all(&self.anchor.provenance().epoch.to_le_bytes())?;
        writer.write_all(&(self.anchor.len() as u64).to_le_bytes())?;
        for (id, tensor) in self.anchor.iter() {
            params::write_record(writer, id, tensor)?;
        }
        Ok(())
    }

    pub fn read_from(reader: &mut impl Read, origin: &str) -> Result<Self, FisherError> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != FISHER_MAGIC {
            return Err(FisherError::BadMagic(origin.to_owned()));
        }
        let version = read_u32(reader)?;
        if version != FISHER_VERSION {
            return Err(FisherError::BadVersion(version));
        }
        let eta = f64::from_le_bytes(read_array(reader)?);
        let flush_period = u64::from_le_bytes(read_array(reader)?);
        let last_flush_epoch = i64::from_le_bytes(read_array(reader)?);
        let n_estimates = u64::from_le_bytes(read_array(reader)?) as usize;
        let mut estimates = BTreeMap::new();
        for _ in 0..n_estimates {
            let (id, tensor) = params::read_record(reader)?.ok_or_else(|| {
                FisherError::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "truncated estimate records",
                ))
            })?;
            estimates.insert(id, tensor);
        }
        let model_len = u64::from_le_bytes(read_array(reader)?) as usize;
        let mut model_bytes = vec![0u8; model_len];
        reader.read_exact(&mut model_bytes)?;
        let model = String::from_utf8(model_bytes).map_err(|_| {
            FisherError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "provenance model is not UTF-8",
            ))
        })?;
        let epoch = u64::from_le_bytes(read_array(reader)?);
        let n_anchor = u64::from_le_bytes(read_array(reader)?) as usize;
        let mut anchor_store = params::ParameterStore::new();
        for _ in 0..n_anchor {
            let (id, tensor) = params::read_record(reader)?.ok_or_else(|| {
                FisherError::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "truncated anchor records",
                ))
            })?;
            anchor_store.insert(id, tensor)?;
        }
        let anchor = anchor_store.snapshot_all(Provenance { model, epoch });
        let mut state = FisherState::new(anchor, eta, flush_period, last_flush_epoch)?;
        for (id, value) in estimates {
            if !state.anchor.contains(&id) {
                return Err(FisherError::AnchorGap(id));
            }
            state.estimates.insert(id, value);
        }
        Ok(state)
    }
}

fn read_u32(reader: &mut impl Read) -> Result<u32, FisherError> {
    Ok(u32::from_le_bytes(read_array(reader)?))
}

fn read_array<const N: usize>(reader: &mut impl Read) -> Result<[u8; N], FisherError> {
    let mut buf = [0u8; N];
    reader.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterStore;

    fn pid(s: &str) -> ParamId {
        ParamId::from(s)
    }

    fn anchor_for(values: &[(&str, Vec<f64>)]) -> Snapshot<f64> {
        let mut store = ParameterStore::new();
        for (id, data) in values {
            store.insert(*id, Tensor::vector(data.clone())).unwrap();
        }
        store.snapshot_all(Provenance {
            model: "a".into(),
            epoch: 0,
        })
    }

    #[test]
    fn squares_gradients_elementwise() {
        let mut grads = GradientMap::new();
        grads.insert(pid("w"), Tensor::vector(vec![2.0, -3.0]));
        let f = fisher_from_gradients(&grads).unwrap();
        assert_eq!(f[&pid("w")].data(), &[4.0, 9.0]);
    }

    #[test]
    fn zero_gradient_contributes_zero() {
        let mut grads = GradientMap::new();
        grads.insert(pid("w"), Tensor::vector(vec![0.0, 0.0]));
        let f = fisher_from_gradients(&grads).unwrap();
        assert_eq!(f[&pid("w")].data(), &[0.0, 0.0]);
    }

    #[test]
    fn momentum_recurrence_is_exact() {
        // F0 = 0, fresh = 4, eta = 0.9 -> F1 = 3.6.
        let anchor = anchor_for(&[("w", vec![0.0])]);
        let mut state = FisherState::new(anchor, 0.9, 3, 0).unwrap();
        let mut fresh = BTreeMap::new();
        fresh.insert(pid("w"), Tensor::vector(vec![4.0]));
        state.momentum_update(&fresh).unwrap();
        assert_eq!(state.estimate(&pid("w")).unwrap().data()[0], 0.9 * 4.0);
    }

    #[test]
    fn eta_zero_keeps_state_eta_one_replaces() {
        let anchor = anchor_for(&[("w", vec![0.0])]);
        let mut fresh = BTreeMap::new();
        fresh.insert(pid("w"), Tensor::vector(vec![7.0]));

        let mut hold = FisherState::new(anchor.clone(), 0.0, 3, 0).unwrap();
        hold.momentum_update(&fresh).unwrap();
        hold.momentum_update(&fresh).unwrap();
        assert_eq!(hold.estimate(&pid("w")).unwrap().data()[0], 0.0);

        let mut replace = FisherState::new(anchor, 1.0, 3, 0).unwrap();
        let mut seed = BTreeMap::new();
        seed.insert(pid("w"), Tensor::vector(vec![5.0]));
        replace.momentum_update(&seed).unwrap();
        replace.momentum_update(&fresh).unwrap();
        assert_eq!(replace.estimate(&pid("w")).unwrap().data()[0], 7.0);
    }

    #[test]
    fn absent_params_keep_their_estimate() {
        let anchor = anchor_for(&[("w", vec![0.0]), ("v", vec![0.0])]);
        let mut state = FisherState::new(anchor, 0.5, 3, 0).unwrap();
        let mut fresh = BTreeMap::new();
        fresh.insert(pid("w"), Tensor::vector(vec![2.0]));
        fresh.insert(pid("v"), Tensor::vector(vec![4.0]));
        state.momentum_update(&fresh).unwrap();
        let mut only_w = BTreeMap::new();
        only_w.insert(pid("w"), Tensor::vector(vec![2.0]));
        state.momentum_update(&only_w).unwrap();
        assert_eq!(state.estimate(&pid("v")).unwrap().data()[0], 2.0);
        assert_eq!(state.estimate(&pid("w")).unwrap().data()[0], 1.5);
    }

    #[test]
    fn flush_fires_on_schedule() {
        let anchor = anchor_for(&[("w", vec![0.0])]);
        let mut state = FisherState::new(anchor, 0.9, 3, 0).unwrap();
        let mut fresh = BTreeMap::new();
        fresh.insert(pid("w"), Tensor::vector(vec![4.0]));
        state.momentum_update(&fresh).unwrap();

        assert!(!state.maybe_flush(2));
        assert_eq!(state.estimate(&pid("w")).unwrap().data()[0], 3.6);
        assert!(state.maybe_flush(3));
        assert_eq!(state.estimate(&pid("w")).unwrap().data()[0], 0.0);
        // Second call in the same epoch is a no-op.
        assert!(!state.maybe_flush(3));
        assert_eq!(state.last_flush_epoch(), 3);
    }

    #[test]
    fn set_anchor_requires_coverage_and_is_idempotent() {
        let anchor = anchor_for(&[("w", vec![1.0])]);
        let mut state = FisherState::new(anchor.clone(), 0.9, 3, 0).unwrap();
        let mut fresh = BTreeMap::new();
        fresh.insert(pid("w"), Tensor::vector(vec![4.0]));
        state.momentum_update(&fresh).unwrap();

        let gap = anchor_for(&[("v", vec![1.0])]);
        assert!(matches!(
            state.set_anchor(gap).unwrap_err(),
            FisherError::AnchorGap(_)
        ));

        let replacement = anchor_for(&[("w", vec![2.0])]);
        state.set_anchor(replacement.clone()).unwrap();
        let before = state.estimate(&pid("w")).unwrap().clone();
        state.set_anchor(replacement).unwrap();
        assert_eq!(state.estimate(&pid("w")).unwrap(), &before);
    }

    #[test]
    fn serialization_roundtrip_is_bit_exact() {
        let anchor = anchor_for(&[("w", vec![1.5, -2.5]), ("v", vec![0.25])]);
        let mut state = FisherState::new(anchor, 0.9, 3, -3).unwrap();
        let mut fresh = BTreeMap::new();
        fresh.insert(pid("w"), Tensor::vector(vec![0.1, 0.2]));
        state.momentum_update(&fresh).unwrap();

        let mut bytes = Vec::new();
        state.write_to(&mut bytes).unwrap();
        let restored = FisherState::read_from(&mut bytes.as_slice(), "mem").unwrap();
        let mut again = Vec::new();
        restored.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(restored.eta(), state.eta());
        assert_eq!(restored.last_flush_epoch(), state.last_flush_epoch());
        assert_eq!(
            restored.estimate(&pid("w")).unwrap().data(),
            state.estimate(&pid("w")).unwrap().data()
        );
    }
}
