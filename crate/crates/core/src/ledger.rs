//! Allocation ledger: every numeric buffer is acquired through it.
//!
//! Counters are per category and updated atomically, so worker threads can
//! share one ledger. Two high-water marks are kept: the run peak, which never
//! decreases, and a window peak that [`AllocationLedger::begin_window`] resets
//! to the current level (used for per-step snapshots).

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Weights,
    Grads,
    OptState,
    Activation,
    Transient,
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Weights,
        Category::Grads,
        Category::OptState,
        Category::Activation,
        Category::Transient,
        Category::Other,
    ];

    const fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Weights => "weights",
            Category::Grads => "grads",
            Category::OptState => "optstate",
            Category::Activation => "activation",
            Category::Transient => "transient",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error(
        "simulated out-of-memory: {category} request of {requested} bytes with {current} in use exceeds budget {budget}"
    )]
    SimulatedOom { category: Category, requested: u64, current: u64, budget: u64 },
    #[error("allocation released twice")]
    DoubleRelease,
    #[error("allocation belongs to a different ledger")]
    ForeignAllocation,
}

/// Byte counts keyed by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryBytes {
    pub weights: u64,
    pub grads: u64,
    pub optstate: u64,
    pub activation: u64,
    pub transient: u64,
    pub other: u64,
}

impl CategoryBytes {
    pub fn get(&self, c: Category) -> u64 {
        match c {
            Category::Weights => self.weights,
            Category::Grads => self.grads,
            Category::OptState => self.optstate,
            Category::Activation => self.activation,
            Category::Transient => self.transient,
            Category::Other => self.other,
        }
    }

    pub fn set(&mut self, c: Category, v: u64) {
        match c {
            Category::Weights => self.weights = v,
            Category::Grads => self.grads = v,
            Category::OptState => self.optstate = v,
            Category::Activation => self.activation = v,
            Category::Transient => self.transient = v,
            Category::Other => self.other = v,
        }
    }

    pub fn sum(&self) -> u64 {
        Category::ALL.iter().map(|&c| self.get(c)).sum()
    }

    /// Element-wise maximum.
    pub fn max(&self, other: &CategoryBytes) -> CategoryBytes {
        let mut out = CategoryBytes::default();
        for c in Category::ALL {
            out.set(c, self.get(c).max(other.get(c)));
        }
        out
    }
}

/// Per-category peaks plus the peak of the simultaneous total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakBytes {
    #[serde(flatten)]
    pub by_category: CategoryBytes,
    pub total: u64,
}

impl PeakBytes {
    pub fn get(&self, c: Category) -> u64 {
        self.by_category.get(c)
    }

    pub fn max(&self, other: &PeakBytes) -> PeakBytes {
        PeakBytes { by_category: self.by_category.max(&other.by_category), total: self.total.max(other.total) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub current: CategoryBytes,
    pub current_total: u64,
    pub run_peak: PeakBytes,
    pub window_peak: PeakBytes,
}

const N: usize = Category::ALL.len();

#[derive(Default)]
struct Counters {
    by_category: [AtomicU64; N],
    total: AtomicU64,
}

impl Counters {
    fn load(&self) -> PeakBytes {
        let mut by_category = CategoryBytes::default();
        for c in Category::ALL {
            by_category.set(c, self.by_category[c.index()].load(Ordering::SeqCst));
        }
        PeakBytes { by_category, total: self.total.load(Ordering::SeqCst) }
    }
}

struct Inner {
    id: u64,
    budget: Option<u64>,
    current: Counters,
    run_peak: Counters,
    window_peak: Counters,
}

static NEXT_LEDGER_ID: AtomicU64 = AtomicU64::new(1);

/// Shared handle; clones refer to the same counters.
#[derive(Clone)]
pub struct AllocationLedger {
    inner: Arc<Inner>,
}

impl fmt::Debug for AllocationLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AllocationLedger")
            .field("id", &self.inner.id)
            .field("budget", &self.inner.budget)
            .field("current_total", &self.current_total())
            .finish()
    }
}

impl Default for AllocationLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::build(None)
    }

    pub fn with_budget(budget: u64) -> Self {
        Self::build(Some(budget))
    }

    pub fn with_optional_budget(budget: Option<u64>) -> Self {
        Self::build(budget)
    }

    fn build(budget: Option<u64>) -> Self {
        Self {
            inner: Arc::new(Inner {
                id: NEXT_LEDGER_ID.fetch_add(1, Ordering::Relaxed),
                budget,
                current: Counters::default(),
                run_peak: Counters::default(),
                window_peak: Counters::default(),
            }),
        }
    }

    pub fn budget(&self) -> Option<u64> {
        self.inner.budget
    }

    /// Records `bytes` under `category`. Fails without changing any counter if
    /// the total would exceed the simulated budget.
    pub fn acquire(&self, category: Category, bytes: u64) -> Result<Allocation, LedgerError> {
        let inner = &*self.inner;
        let total = &inner.current.total;
        let mut seen = total.load(Ordering::SeqCst);
        let new_total = loop {
            let next = seen.saturating_add(bytes);
            if let Some(budget) = inner.budget {
                if next > budget {
                    return Err(LedgerError::SimulatedOom { category, requested: bytes, current: seen, budget });
                }
            }
            match total.compare_exchange_weak(seen, next, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => break next,
                Err(actual) => seen = actual,
            }
        };
        let i = category.index();
        let cat_now = inner.current.by_category[i].fetch_add(bytes, Ordering::SeqCst) + bytes;
        for peaks in [&inner.run_peak, &inner.window_peak] {
            peaks.by_category[i].fetch_max(cat_now, Ordering::SeqCst);
            peaks.total.fetch_max(new_total, Ordering::SeqCst);
        }
        Ok(Allocation { ledger: self.clone(), category, bytes, released: false })
    }

    /// Releases an allocation. Releasing twice, or through another ledger,
    /// is a logic error.
    pub fn release(&self, allocation: &mut Allocation) -> Result<(), LedgerError> {
        if allocation.ledger.inner.id != self.inner.id {
            return Err(LedgerError::ForeignAllocation);
        }
        if allocation.released {
            return Err(LedgerError::DoubleRelease);
        }
        allocation.released = true;
        self.inner.current.by_category[allocation.category.index()].fetch_sub(allocation.bytes, Ordering::SeqCst);
        self.inner.current.total.fetch_sub(allocation.bytes, Ordering::SeqCst);
        Ok(())
    }

    /// Zero-initialised buffer of `len` elements of `T`.
    pub fn alloc_zeroed<T: Copy + Default>(
        &self,
        category: Category,
        len: usize,
    ) -> Result<TrackedVec<T>, LedgerError> {
        let allocation = self.acquire(category, (len * std::mem::size_of::<T>()) as u64)?;
        Ok(TrackedVec { data: vec![T::default(); len], allocation })
    }

    /// Tracked copy of `src`.
    pub fn alloc_copy<T: Copy>(&self, category: Category, src: &[T]) -> Result<TrackedVec<T>, LedgerError> {
        let allocation = self.acquire(category, std::mem::size_of_val(src) as u64)?;
        Ok(TrackedVec { data: src.to_vec(), allocation })
    }

    pub fn current(&self, category: Category) -> u64 {
        self.inner.current.by_category[category.index()].load(Ordering::SeqCst)
    }

    pub fn current_total(&self) -> u64 {
        self.inner.current.total.load(Ordering::SeqCst)
    }

    pub fn peak(&self, category: Category) -> u64 {
        self.inner.run_peak.by_category[category.index()].load(Ordering::SeqCst)
    }

    pub fn peak_total(&self) -> u64 {
        self.inner.run_peak.total.load(Ordering::SeqCst)
    }

    pub fn run_peaks(&self) -> PeakBytes {
        self.inner.run_peak.load()
    }

    pub fn window_peaks(&self) -> PeakBytes {
        self.inner.window_peak.load()
    }

    /// Restarts the window high-water marks at the current levels.
    pub fn begin_window(&self) {
        let inner = &*self.inner;
        for c in Category::ALL {
            let i = c.index();
            let now = inner.current.by_category[i].load(Ordering::SeqCst);
            inner.window_peak.by_category[i].store(now, Ordering::SeqCst);
        }
        let now = inner.current.total.load(Ordering::SeqCst);
        inner.window_peak.total.store(now, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let current = self.inner.current.load();
        LedgerSnapshot {
            current: current.by_category,
            current_total: current.total,
            run_peak: self.run_peaks(),
            window_peak: self.window_peaks(),
        }
    }
}

/// Token for bytes held in a ledger. Released on drop if not released
/// explicitly.
pub struct Allocation {
    ledger: AllocationLedger,
    category: Category,
    bytes: u64,
    released: bool,
}

impl Allocation {
    pub fn category(&self) -> Category {
        self.category
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn is_released(&self) -> bool {
        self.released
    }
}

impl fmt::Debug for Allocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Allocation")
            .field("category", &self.category)
            .field("bytes", &self.bytes)
            .field("released", &self.released)
            .finish()
    }
}

impl Drop for Allocation {
    fn drop(&mut self) {
        if !self.released {
            let ledger = self.ledger.clone();
            let _ = ledger.release(self);
        }
    }
}

/// A `Vec<T>` whose bytes are accounted in a ledger for its whole lifetime.
pub struct TrackedVec<T> {
    data: Vec<T>,
    allocation: Allocation,
}

impl<T: Copy> TrackedVec<T> {
    pub fn category(&self) -> Category {
        self.allocation.category
    }

    pub fn bytes(&self) -> u64 {
        self.allocation.bytes
    }

    pub fn ledger(&self) -> &AllocationLedger {
        &self.allocation.ledger
    }

    /// Copy accounted under `category` in the same ledger.
    pub fn try_clone_as(&self, category: Category) -> Result<TrackedVec<T>, LedgerError> {
        self.allocation.ledger.alloc_copy(category, &self.data)
    }

    pub fn try_clone(&self) -> Result<TrackedVec<T>, LedgerError> {
        self.try_clone_as(self.allocation.category)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T> Deref for TrackedVec<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for TrackedVec<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: fmt::Debug> fmt::Debug for TrackedVec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrackedVec").field("len", &self.data.len()).field("allocation", &self.allocation).finish()
    }
}
