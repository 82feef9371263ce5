//! A bounded worker pool that hands results back in input order.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

/// Applies `f` to every item on up to `workers` threads and passes each
/// result to `sink` in input order, as soon as all earlier results are in.
///
/// Once `cancel` is set no new items are started; items already running
/// finish and are still delivered (in order, skipping the ones never run).
/// Returns the number of items processed.
pub fn ordered_map<T, R, F, S>(
    items: &[T],
    workers: usize,
    cancel: Option<&AtomicBool>,
    f: F,
    mut sink: S,
) -> usize
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
    S: FnMut(usize, R),
{
    let workers = workers.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let cancelled = || cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    let mut processed = 0;
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, R)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            scope.spawn(move || loop {
                if cancelled() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(i, &items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        for (i, r) in rx {
            processed += 1;
            pending.insert(i, r);
            while let Some(r) = pending.remove(&cursor) {
                sink(cursor, r);
                cursor += 1;
            }
        }
        // Gaps only exist after cancellation.
        for (i, r) in pending {
            sink(i, r);
        }
    });
    processed
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn preserves_input_order() {
        let items: Vec<u64> = (0..50).collect();
        let mut out = Vec::new();
        let n = ordered_map(
            &items,
            4,
            None,
            |_, &x| {
                std::thread::sleep(Duration::from_micros((50 - x) * 20));
                x * 2
            },
            |i, r| out.push((i, r)),
        );
        assert_eq!(n, 50);
        assert_eq!(out, items.iter().map(|&x| (x as usize, x * 2)).collect::<Vec<_>>());
    }

    #[test]
    fn cancellation_stops_new_work() {
        let items: Vec<u32> = (0..1000).collect();
        let flag = AtomicBool::new(false);
        let mut seen = Vec::new();
        let n = ordered_map(
            &items,
            2,
            Some(&flag),
            |i, _| {
                if i == 5 {
                    flag.store(true, Ordering::SeqCst);
                }
                i
            },
            |i, _| seen.push(i),
        );
        assert!(n < 1000);
        assert_eq!(seen.len(), n);
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_input() {
        let items: Vec<u8> = Vec::new();
        assert_eq!(ordered_map(&items, 8, None, |_, _| (), |_, _| ()), 0);
    }
}
