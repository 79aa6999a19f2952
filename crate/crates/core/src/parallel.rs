//! Bounded concurrency helpers shared by the ingestion, extraction and
//! captioning stages.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Condvar, Mutex};

/// A counting semaphore. Permits are released when the guard drops.
#[derive(Debug)]
pub struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        assert!(permits > 0, "semaphore needs at least one permit");
        Self {
            available: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphorePermit<'_> {
        let mut available = self.available.lock().expect("semaphore poisoned");
        while *available == 0 {
            available = self.cv.wait(available).expect("semaphore poisoned");
        }
        *available -= 1;
        SemaphorePermit { sem: self }
    }
}

pub struct SemaphorePermit<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphorePermit<'_> {
    fn drop(&mut self) {
        *self.sem.available.lock().expect("semaphore poisoned") += 1;
        self.sem.cv.notify_one();
    }
}

/// Maps `f` over `items` on at most `workers` threads and hands results to
/// `sink` strictly in input order.
///
/// When `sink` returns an error, no new items are started; in-flight items
/// finish and are discarded, and the error is returned.
pub fn ordered_map<T, R, E, F, S>(items: &[T], workers: usize, f: F, mut sink: S) -> Result<(), E>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
    S: FnMut(usize, R) -> Result<(), E>,
{
    if items.is_empty() {
        return Ok(());
    }
    let workers = workers.clamp(1, items.len());
    if workers == 1 {
        for (i, item) in items.iter().enumerate() {
            sink(i, f(i, item))?;
        }
        return Ok(());
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, R)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, f) = (&next, &stop, &f);
            scope.spawn(move || loop {
                if stop.load(Ordering::Acquire) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::AcqRel);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(i, &items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, R> = BTreeMap::new();
        let mut emit = 0usize;
        let mut result = Ok(());
        for (i, r) in rx {
            if result.is_err() {
                continue;
            }
            pending.insert(i, r);
            while let Some(r) = pending.remove(&emit) {
                if let Err(e) = sink(emit, r) {
                    stop.store(true, Ordering::Release);
                    result = Err(e);
                    break;
                }
                emit += 1;
            }
        }
        result
    })
}
