//! Flat parameter storage.
//!
//! Every model keeps its tensors in one contiguous buffer described by a
//! [`ParamLayout`]. Layers hold [`ParamId`]s and borrow views on demand, so
//! gradients, optimizer moments and EMA copies are just more buffers with the
//! same layout.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, NdFloat};
use num_traits::FromPrimitive;
use sha2::{Digest, Sha256};

/// Floating point element used by every model in the crate.
pub trait Real: NdFloat + FromPrimitive + Default + Display + Debug + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;

    fn num(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap()
    }
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Whether an entry is learned or a running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub kind: EntryKind,
}

impl ParamEntry {
    /// Matrices get decoupled weight decay; vectors (biases, norms) do not.
    pub fn decays(&self) -> bool {
        self.kind == EntryKind::Weight && self.shape.len() >= 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: ParamLayout,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.layout.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.entries.is_empty()
    }

    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name.into(), shape, EntryKind::Weight)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name.into(), shape, EntryKind::Buffer)
    }

    fn push(&mut self, name: String, shape: &[usize], kind: EntryKind) -> ParamId {
        assert!(
            !self.layout.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let len = shape.iter().product();
        let idx = self.layout.entries.len();
        self.layout.entries.push(ParamEntry {
            name: name.clone(),
            shape: shape.to_vec(),
            offset: self.layout.total,
            len,
            kind,
        });
        self.layout.by_name.insert(name, idx);
        self.layout.total += len;
        ParamId(idx)
    }

    pub fn finish(self) -> Arc<ParamLayout> {
        Arc::new(self.layout)
    }
}

/// A buffer of values laid out according to a shared [`ParamLayout`],
/// plus a per-entry trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    layout: Arc<ParamLayout>,
    data: Vec<F>,
    trainable: Vec<bool>,
}

impl<F: Real> Params<F> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let trainable = layout
            .entries
            .iter()
            .map(|e| e.kind == EntryKind::Weight)
            .collect();
        Self {
            data: vec![F::zero(); layout.total],
            layout,
            trainable,
        }
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<F>) -> Self {
        assert_eq!(layout.total, data.len(), "buffer length does not match layout");
        let mut p = Self::zeros(layout);
        p.data = data;
        p
    }

    /// Same layout and trainable flags, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            data: vec![F::zero(); self.data.len()],
            trainable: self.trainable.clone(),
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn slice(&self, id: ParamId) -> &[F] {
        let e = &self.layout.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [F] {
        let e = &self.layout.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(self.slice(id))
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, F> {
        let shape = self.shape2(id);
        ArrayView2::from_shape(shape, self.slice(id)).unwrap()
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let shape = self.shape2(id);
        ArrayViewMut2::from_shape(shape, self.slice_mut(id)).unwrap()
    }

    fn shape2(&self, id: ParamId) -> (usize, usize) {
        let s = &self.layout.entries[id.0].shape;
        match s.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => panic!("entry {} is not a matrix", self.layout.entries[id.0].name),
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn trainable_flags(&self) -> &[bool] {
        &self.trainable
    }

    /// Buffers can never be marked trainable.
    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on && self.layout.entries[id.0].kind == EntryKind::Weight;
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for i in 0..self.trainable.len() {
            self.set_trainable(ParamId(i), on);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.layout.entries.len()).map(ParamId)
    }

    /// Element-wise conversion to another precision, keeping flags.
    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| G::num(x.as_f64())).collect(),
            trainable: self.trainable.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Raw little-endian bytes of one entry.
    pub fn entry_bytes(&self, id: ParamId) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.slice(id).len() * F::BYTES);
        for &x in self.slice(id) {
            x.write_le(&mut out);
        }
        out
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (i, e) in self.layout.entries.iter().enumerate() {
            h.update(e.name.as_bytes());
            for d in &e.shape {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(self.entry_bytes(ParamId(i)));
        }
        hex::encode(h.finalize())
    }

    /// True when both buffers hold bitwise identical values for `id`.
    pub fn entry_bits_eq(&self, other: &Params<F>, id: ParamId) -> bool {
        self.entry_bytes(id) == other.entry_bytes(id)
    }
}
