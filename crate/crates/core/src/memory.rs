//! Accounting of live tensor-buffer bytes.
//!
//! Every tensor buffer is allocated through [`Buffer`], which reports its
//! exact byte size to a per-thread ledger. A [`MemoryScope`] captures the
//! high-water mark of live bytes above the level at which it was opened and
//! can optionally impose a cap; exceeding the cap unwinds with an
//! [`OutOfMemory`] payload that callers may catch.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

use crate::Scalar;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LIMIT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Panic payload raised when an allocation would exceed the active cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutOfMemory {
    pub requested: usize,
    pub live: usize,
    pub limit: usize,
}

/// Bytes currently held by live tensor buffers on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

fn acquire(bytes: usize) {
    let live = LIVE.with(Cell::get);
    if let Some(limit) = LIMIT.with(Cell::get) {
        if live + bytes > limit {
            std::panic::panic_any(OutOfMemory {
                requested: bytes,
                live,
                limit,
            });
        }
    }
    let now = live + bytes;
    LIVE.with(|l| l.set(now));
    PEAK.with(|p| {
        if now > p.get() {
            p.set(now)
        }
    });
}

fn release(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// A measurement window over tensor allocations on the current thread.
///
/// Scopes nest; the outer peak absorbs the inner one when the inner scope
/// is dropped.
#[derive(Debug)]
pub struct MemoryScope {
    baseline: usize,
    outer_peak: usize,
    outer_limit: Option<usize>,
}

impl MemoryScope {
    pub fn new() -> Self {
        let baseline = live_bytes();
        let outer_peak = PEAK.with(|p| p.replace(baseline));
        let outer_limit = LIMIT.with(Cell::get);
        MemoryScope {
            baseline,
            outer_peak,
            outer_limit,
        }
    }

    /// Opens a scope in which at most `bytes` more may be live than at entry.
    pub fn with_limit(bytes: usize) -> Self {
        let scope = Self::new();
        let cap = scope.baseline.saturating_add(bytes);
        let cap = scope.outer_limit.map_or(cap, |outer| outer.min(cap));
        LIMIT.with(|l| l.set(Some(cap)));
        scope
    }

    /// High-water mark of live bytes above the scope's baseline.
    pub fn peak_bytes(&self) -> usize {
        PEAK.with(Cell::get).saturating_sub(self.baseline)
    }

    pub fn baseline(&self) -> usize {
        self.baseline
    }
}

impl Default for MemoryScope {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for MemoryScope {
    fn drop(&mut self) {
        let inner = PEAK.with(Cell::get);
        PEAK.with(|p| p.set(self.outer_peak.max(inner)));
        LIMIT.with(|l| l.set(self.outer_limit));
    }
}

/// Heap storage for tensor elements, registered with the byte ledger.
#[derive(Debug)]
pub struct Buffer<T: Scalar> {
    data: Vec<T>,
}

impl<T: Scalar> Buffer<T> {
    pub fn zeros(len: usize) -> Self {
        acquire(len * T::BYTES);
        Buffer {
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(mut data: Vec<T>) -> Self {
        data.shrink_to_fit();
        acquire(data.len() * T::BYTES);
        Buffer { data }
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * T::BYTES
    }

    pub fn into_vec(mut self) -> Vec<T> {
        release(self.bytes());
        std::mem::take(&mut self.data)
    }
}

impl<T: Scalar> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        acquire(self.bytes());
        Buffer {
            data: self.data.clone(),
        }
    }
}

impl<T: Scalar> Drop for Buffer<T> {
    fn drop(&mut self) {
        release(self.bytes());
    }
}

impl<T: Scalar> Deref for Buffer<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T: Scalar> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Scalar> PartialEq for Buffer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_allocation_is_counted_exactly() {
        let scope = MemoryScope::new();
        let b = Buffer::<f32>::zeros(1000);
        assert_eq!(scope.peak_bytes(), 4000);
        drop(b);
        assert_eq!(scope.peak_bytes(), 4000);
        let c = Buffer::<f64>::zeros(10);
        assert_eq!(scope.peak_bytes(), 4000);
        drop(c);
    }

    #[test]
    fn peak_resets_per_scope_and_propagates_outward() {
        let outer = MemoryScope::new();
        {
            let inner = MemoryScope::new();
            let _b = Buffer::<f32>::zeros(256);
            assert_eq!(inner.peak_bytes(), 1024);
        }
        assert_eq!(outer.peak_bytes(), 1024);
        let inner2 = MemoryScope::new();
        assert_eq!(inner2.peak_bytes(), 0);
    }

    #[test]
    fn into_vec_releases() {
        let before = live_bytes();
        let b = Buffer::<f32>::from_vec(vec![1.0; 8]);
        assert_eq!(live_bytes(), before + 32);
        let v = b.into_vec();
        assert_eq!(v.len(), 8);
        assert_eq!(live_bytes(), before);
    }

    #[test]
    fn limit_unwinds_with_payload() {
        let scope = MemoryScope::with_limit(100);
        let r = std::panic::catch_unwind(|| Buffer::<f32>::zeros(64));
        let err = r.expect_err("allocation should exceed the cap");
        let oom = err.downcast_ref::<OutOfMemory>().expect("payload");
        assert_eq!(oom.requested, 256);
        drop(scope);
        // cap lifted
        let _ok = Buffer::<f32>::zeros(64);
    }
}
