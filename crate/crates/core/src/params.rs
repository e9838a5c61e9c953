//! Registry of named parameter tensors with per-model ownership tags.
//!
//! A parameter is *shared* between two models exactly when both models'
//! membership sets contain its id; sharing is by identity, not by value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magic bytes opening a serialized parameter store.
pub const STORE_MAGIC: &[u8; 8] = b"WPLSTORE";
/// Current store format version.
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown parameter id `{0}`")]
    UnknownParam(ParamId),
    #[error("duplicate parameter id `{0}`")]
    DuplicateParam(ParamId),
    #[error("model `{0}` is already registered")]
    DuplicateModel(String),
    #[error("model `{0}` is not registered")]
    UnknownModel(String),
    #[error("membership set for model `{0}` must be nonempty")]
    EmptyMembership(String),
    #[error("shape mismatch for `{id}`: stored {stored:?}, provided {provided:?}")]
    ShapeMismatch {
        id: ParamId,
        stored: Vec<usize>,
        provided: Vec<usize>,
    },
    #[error("bad magic bytes in `{0}`: not a parameter store file")]
    BadMagic(String),
    #[error("unsupported store version {0}")]
    BadVersion(u32),
    #[error("corrupt store file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Identifier of one parameter tensor, unique within a store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(String);

impl ParamId {
    pub fn new(id: impl Into<String>) -> Self {
        ParamId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        ParamId(s.to_owned())
    }
}

impl From<String> for ParamId {
    fn from(s: String) -> Self {
        ParamId(s)
    }
}

/// Where a snapshot came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub model: String,
    pub epoch: u64,
}

/// Immutable copy of a set of parameters, frozen at a point in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<S> {
    values: BTreeMap<ParamId, Tensor<S>>,
    provenance: Provenance,
}

impl<S: Scalar> Snapshot<S> {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor<S>> {
        self.values.get(id)
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.values.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<S>)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

/// Named parameter tensors plus per-model membership sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore<S> {
    values: BTreeMap<ParamId, Tensor<S>>,
    memberships: BTreeMap<String, BTreeSet<ParamId>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            values: BTreeMap::new(),
            memberships: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<ParamId>, value: Tensor<S>) -> Result<(), StoreError> {
        let id = id.into();
        if self.values.contains_key(&id) {
            return Err(StoreError::DuplicateParam(id));
        }
        self.values.insert(id, value);
        Ok(())
    }

    pub fn get(&self, id: &ParamId) -> Result<&Tensor<S>, StoreError> {
        self.values
            .get(id)
            .ok_or_else(|| StoreError::UnknownParam(id.clone()))
    }

    /// Overwrite the value of an existing parameter; the shape must match.
    pub fn set(&mut self, id: &ParamId, value: Tensor<S>) -> Result<(), StoreError> {
        let slot = self
            .values
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownParam(id.clone()))?;
        if slot.shape() != value.shape() {
            return Err(StoreError::ShapeMismatch {
                id: id.clone(),
                stored: slot.shape().to_vec(),
                provided: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// In-place update of one parameter (the SGD hot path).
    pub fn update(
        &mut self,
        id: &ParamId,
        f: impl FnOnce(&mut Tensor<S>),
    ) -> Result<(), StoreError> {
        let slot = self
            .values
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownParam(id.clone()))?;
        f(slot);
        Ok(())
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.values.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<S>)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Tag `param_ids` as belonging to `model_id` and return the membership set.
    pub fn register_model(
        &mut self,
        model_id: &str,
        param_ids: &[ParamId],
    ) -> Result<BTreeSet<ParamId>, StoreError> {
        if self.memberships.contains_key(model_id) {
            return Err(StoreError::DuplicateModel(model_id.to_owned()));
        }
        if param_ids.is_empty() {
            return Err(StoreError::EmptyMembership(model_id.to_owned()));
        }
        for id in param_ids {
            if !self.values.contains_key(id) {
                return Err(StoreError::UnknownParam(id.clone()));
            }
        }
        let set: BTreeSet<ParamId> = param_ids.iter().cloned().collect();
        self.memberships.insert(model_id.to_owned(), set.clone());
        Ok(set)
    }

    pub fn membership(&self, model_id: &str) -> Result<&BTreeSet<ParamId>, StoreError> {
        self.memberships
            .get(model_id)
            .ok_or_else(|| StoreError::UnknownModel(model_id.to_owned()))
    }

    /// Parameters used by both models.
    pub fn shared(&self, model_a: &str, model_b: &str) -> Result<BTreeSet<ParamId>, StoreError> {
        let a = self.membership(model_a)?;
        let b = self.membership(model_b)?;
        Ok(a.intersection(b).cloned().collect())
    }

    /// Parameters of `model` not used by `other`.
    pub fn private(&self, model: &str, other: &str) -> Result<BTreeSet<ParamId>, StoreError> {
        let a = self.membership(model)?;
        let b = self.membership(other)?;
        Ok(a.difference(b).cloned().collect())
    }

    /// Deep frozen copy of the named parameters.
    pub fn take_snapshot(
        &self,
        param_ids: &[ParamId],
        provenance: Provenance,
    ) -> Result<Snapshot<S>, StoreError> {
        let mut values = BTreeMap::new();
        for id in param_ids {
            let value = self.get(id)?;
            values.insert(id.clone(), value.clone());
        }
        Ok(Snapshot { values, provenance })
    }

    /// Snapshot of every parameter in the store.
    pub fn snapshot_all(&self, provenance: Provenance) -> Snapshot<S> {
        Snapshot {
            values: self.values.clone(),
            provenance,
        }
    }
}

impl ParameterStore<f64> {
    /// Serialize parameter values (not membership tags) to `writer`.
    ///
    /// Layout: magic `WPLSTORE`, version `u32` LE, then one record per
    /// parameter in id order: id length `u64` LE, id bytes, rank `u64` LE,
    /// dims `u64` LE each, data `f64` LE each.
    pub fn write_to(&self, writer: &mut impl Write) -> Result<(), StoreError> {
        writer.write_all(STORE_MAGIC)?;
        writer.write_all(&STORE_VERSION.to_le_bytes())?;
        for (id, tensor) in &self.values {
            write_record(writer, id, tensor)?;
        }
        Ok(())
    }

    /// Parse a store serialized by [`ParameterStore::write_to`]. Membership
    /// tags are not part of the format and come back empty.
    pub fn read_from(reader: &mut impl Read, origin: &str) -> Result<Self, StoreError> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(StoreError::BadMagic(origin.to_owned()));
        }
        let mut version = [0u8; 4];
        reader.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != STORE_VERSION {
            return Err(StoreError::BadVersion(version));
        }
        let mut store = ParameterStore::new();
        while let Some((id, tensor)) = read_record(reader)? {
            store.insert(id, tensor)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file, &path.display().to_string())
    }
}

pub(crate) fn write_record(
    writer: &mut impl Write,
    id: &ParamId,
    tensor: &Tensor<f64>,
) -> Result<(), StoreError> {
    let id_bytes = id.as_str().as_bytes();
    writer.write_all(&(id_bytes.len() as u64).to_le_bytes())?;
    writer.write_all(id_bytes)?;
    writer.write_all(&(tensor.rank() as u64).to_le_bytes())?;
    for &dim in tensor.shape() {
        writer.write_all(&(dim as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read one parameter record; `None` at a clean end of stream.
pub(crate) fn read_record(
    reader: &mut impl Read,
) -> Result<Option<(ParamId, Tensor<f64>)>, StoreError> {
    let mut len = [0u8; 8];
    match reader.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let id_len = u64::from_le_bytes(len) as usize;
    let mut id_bytes = vec![0u8; id_len];
    reader.read_exact(&mut id_bytes)?;
    let id = String::from_utf8(id_bytes)
        .map_err(|_| StoreError::Corrupt("parameter id is not UTF-8".into()))?;
    let mut rank = [0u8; 8];
    reader.read_exact(&mut rank)?;
    let rank = u64::from_le_bytes(rank) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        reader.read_exact(&mut dim)?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = [0u8; 8];
        reader.read_exact(&mut v)?;
        data.push(f64::from_le_bytes(v));
    }
    let tensor =
        Tensor::new(shape, data).map_err(|e| StoreError::Corrupt(format!("bad record: {e}")))?;
    Ok(Some((ParamId::new(id), tensor)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(s: &str) -> ParamId {
        ParamId::from(s)
    }

    fn demo_store() -> ParameterStore<f64> {
        let mut store = ParameterStore::new();
        store.insert("w1", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.insert("w2", Tensor::vector(vec![3.0])).unwrap();
        store
            .insert("w3", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn shared_and_private_partition() {
        let mut store = demo_store();
        store
            .register_model("a", &[pid("w1"), pid("w2")])
            .unwrap();
        store
            .register_model("b", &[pid("w1"), pid("w2"), pid("w3")])
            .unwrap();
        let shared = store.shared("a", "b").unwrap();
        assert_eq!(shared, [pid("w1"), pid("w2")].into_iter().collect());
        let private_b = store.private("b", "a").unwrap();
        assert_eq!(private_b, [pid("w3")].into_iter().collect());
        assert!(store.private("a", "b").unwrap().is_empty());
    }

    #[test]
    fn shared_is_symmetric() {
        let mut store = demo_store();
        store.register_model("a", &[pid("w1"), pid("w2")]).unwrap();
        store.register_model("b", &[pid("w2"), pid("w3")]).unwrap();
        assert_eq!(
            store.shared("a", "b").unwrap(),
            store.shared("b", "a").unwrap()
        );
    }

    #[test]
    fn disjoint_models_share_nothing() {
        let mut store = demo_store();
        store.register_model("a", &[pid("w1")]).unwrap();
        store.register_model("b", &[pid("w3")]).unwrap();
        assert!(store.shared("a", "b").unwrap().is_empty());
    }

    #[test]
    fn register_rejects_unknown_param_and_duplicate_model() {
        let mut store = demo_store();
        let err = store.register_model("a", &[pid("nope")]).unwrap_err();
        assert!(matches!(err, StoreError::UnknownParam(_)));
        store.register_model("a", &[pid("w1")]).unwrap();
        let err = store.register_model("a", &[pid("w2")]).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateModel(_)));
    }

    #[test]
    fn growing_shared_prefixes() {
        // Variants of b sharing ever-larger prefixes of a's parameters.
        let mut store = ParameterStore::<f64>::new();
        let ids: Vec<ParamId> = (0..4).map(|i| pid(&format!("l{i}"))).collect();
        for id in &ids {
            store.insert(id.clone(), Tensor::scalar(0.0)).unwrap();
        }
        store.insert("b_extra", Tensor::scalar(0.0)).unwrap();
        store.register_model("a", &ids).unwrap();
        let mut prev = 0;
        for c in 1..=4usize {
            let mut member: Vec<ParamId> = ids[..c].to_vec();
            member.push(pid("b_extra"));
            let name = format!("b{c}");
            store.register_model(&name, &member).unwrap();
            let shared = store.shared("a", &name).unwrap();
            assert_eq!(shared.len(), c);
            assert!(shared.len() > prev);
            prev = shared.len();
        }
    }

    #[test]
    fn snapshot_is_isolated_from_mutation() {
        let mut store = demo_store();
        let snap = store
            .take_snapshot(
                &[pid("w1")],
                Provenance {
                    model: "a".into(),
                    epoch: 0,
                },
            )
            .unwrap();
        store
            .set(&pid("w1"), Tensor::vector(vec![9.0, 9.0]))
            .unwrap();
        assert_eq!(snap.get(&pid("w1")).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(store.get(&pid("w1")).unwrap().data(), &[9.0, 9.0]);
    }

    #[test]
    fn snapshot_matches_live_values_bit_exactly() {
        let store = demo_store();
        let snap = store.snapshot_all(Provenance {
            model: "a".into(),
            epoch: 3,
        });
        for (id, live) in store.iter() {
            let frozen = snap.get(id).unwrap();
            for (a, b) in live.data().iter().zip(frozen.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = demo_store();
        let err = store
            .set(&pid("w1"), Tensor::vector(vec![1.0, 2.0, 3.0]))
            .unwrap_err();
        assert!(matches!(err, StoreError::ShapeMismatch { .. }));
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let store = demo_store();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let restored = ParameterStore::read_from(&mut bytes.as_slice(), "mem").unwrap();
        assert_eq!(restored.len(), store.len());
        for (id, tensor) in store.iter() {
            let r = restored.get(id).unwrap();
            assert_eq!(r.shape(), tensor.shape());
            for (a, b) in tensor.data().iter().zip(r.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Second serialization produces identical bytes.
        let mut again = Vec::new();
        restored.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn load_rejects_bad_magic() {
        let bytes = b"NOTSTORE\x01\x00\x00\x00".to_vec();
        let err = ParameterStore::read_from(&mut bytes.as_slice(), "mem").unwrap_err();
        assert!(matches!(err, StoreError::BadMagic(_)));
    }
}
