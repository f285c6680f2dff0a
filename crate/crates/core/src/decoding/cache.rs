use crate::error::{ArpgError, Result};
use crate::numcore::Scalar;

/// Append-only key/value store for a batch of sequences decoded in lockstep.
///
/// Holds one key and one value buffer per slot: a slot for every Pass-1
/// layer (self-attention history) plus the Pass-2 source(s). Each buffer is
/// preallocated for `capacity` rows per sequence. Rows are first staged past
/// the committed length, then committed together once every slot has them.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    slots: usize,
    batch: usize,
    width: usize,
    capacity: usize,
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(slots: usize, batch: usize, width: usize, capacity: usize) -> Self {
        let n = batch * capacity * width;
        KvCache {
            slots,
            batch,
            width,
            capacity,
            len: 0,
            keys: (0..slots).map(|_| vec![T::zero(); n]).collect(),
            values: (0..slots).map(|_| vec![T::zero(); n]).collect(),
        }
    }

    /// Committed rows per sequence (condition plus decoded tokens).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Scalars held across all slots, keys and values, for the whole batch.
    pub fn scalar_count(&self) -> usize {
        2 * self.slots * self.batch * self.capacity * self.width
    }

    pub fn check_room(&self, rows: usize) -> Result<()> {
        if self.len + rows > self.capacity {
            return Err(ArpgError::Contract(format!(
                "cache overflow: {} + {rows} rows exceeds capacity {}",
                self.len, self.capacity
            )));
        }
        Ok(())
    }

    /// Writes `rows` new rows per sequence into `slot` just past the
    /// committed length. `k`/`v` are `[batch·rows × width]`, batch-major.
    pub fn stage(&mut self, slot: usize, k: &[T], v: &[T], rows: usize) -> Result<()> {
        self.check_room(rows)?;
        let w = self.width;
        if slot >= self.slots || k.len() != self.batch * rows * w || v.len() != k.len() {
            return Err(ArpgError::Dimension(format!(
                "stage of {} key scalars into slot {slot} for {} sequences × {rows} rows × {w}",
                k.len(),
                self.batch
            )));
        }
        for b in 0..self.batch {
            let dst = (b * self.capacity + self.len) * w;
            let src = b * rows * w;
            self.keys[slot][dst..dst + rows * w].copy_from_slice(&k[src..src + rows * w]);
            self.values[slot][dst..dst + rows * w].copy_from_slice(&v[src..src + rows * w]);
        }
        Ok(())
    }

    /// Makes `rows` staged rows part of the history.
    pub fn commit(&mut self, rows: usize) -> Result<()> {
        self.check_room(rows)?;
        self.len += rows;
        Ok(())
    }

    /// Stages and commits the same rows into every slot.
    pub fn append(&mut self, per_slot: &[(Vec<T>, Vec<T>)], rows: usize) -> Result<()> {
        if per_slot.len() != self.slots {
            return Err(ArpgError::Dimension(format!(
                "{} slot updates for {} slots",
                per_slot.len(),
                self.slots
            )));
        }
        for (s, (k, v)) in per_slot.iter().enumerate() {
            self.stage(s, k, v, rows)?;
        }
        self.commit(rows)
    }

    /// First `rows` key rows of sequence `b` in `slot` (may include staged rows).
    pub fn keys(&self, slot: usize, b: usize, rows: usize) -> &[T] {
        let start = b * self.capacity * self.width;
        &self.keys[slot][start..start + rows * self.width]
    }

    pub fn values(&self, slot: usize, b: usize, rows: usize) -> &[T] {
        let start = b * self.capacity * self.width;
        &self.values[slot][start..start + rows * self.width]
    }
}
