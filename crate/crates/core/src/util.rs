//! Small shared helpers: a stable 64-bit hash, a counting semaphore, and an
//! order-preserving bounded parallel map.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

/// FNV-1a over bytes. Used for request fingerprints and seed derivation, so
/// it must stay stable across builds and platforms.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x100_0000_01b3;
    let mut hash = OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// Counting semaphore; `std` has none and the in-flight bound is tiny.
pub struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.sem.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.sem.available.notify_one();
    }
}

/// Applies `f` to every item on up to `workers` threads, returning results in
/// input order. Falls back to a plain loop for a single worker.
pub fn parallel_map<T, U, F>(items: Vec<T>, workers: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(usize, T) -> U + Sync,
{
    let n = items.len();
    let workers = workers.max(1).min(n.max(1));
    if workers <= 1 || n <= 1 {
        return items
            .into_iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }

    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<U>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let item = slots[i]
                    .lock()
                    .expect("slot poisoned")
                    .take()
                    .expect("item taken once");
                let out = f(i, item);
                *results[i].lock().expect("result poisoned") = Some(out);
            });
        }
    });

    results
        .into_iter()
        .map(|m| m.into_inner().expect("result poisoned").expect("result set"))
        .collect()
}

/// Derives a child seed from a parent seed and a textual scope, stably.
pub fn derive_seed(parent: u64, scope: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(scope.len() + 16);
    bytes.extend_from_slice(&parent.to_le_bytes());
    bytes.extend_from_slice(scope.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a_64(&bytes)
}
