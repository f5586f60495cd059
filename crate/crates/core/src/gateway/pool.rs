use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

/// Run `work(i)` for every `i < n` on at most `max_parallel` scoped threads,
/// handing each result to `sink(i, result)` as soon as it is ready.
///
/// Items are claimed in increasing index order.
pub fn for_each_bounded<T, W, S>(n: usize, max_parallel: usize, work: W, sink: S)
where
    T: Send,
    W: Fn(usize) -> T + Sync,
    S: Fn(usize, T) + Sync,
{
    let workers = max_parallel.max(1).min(n);
    if workers <= 1 {
        for i in 0..n {
            sink(i, work(i));
        }
        return;
    }
    let next = AtomicUsize::new(0);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                sink(i, work(i));
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;
    use std::time::Duration;

    #[test]
    fn visits_every_index_once() {
        let seen = Mutex::new(vec![0u32; 50]);
        for_each_bounded(50, 7, |i| i * 2, |i, v| {
            assert_eq!(v, i * 2);
            seen.lock().unwrap()[i] += 1;
        });
        assert!(seen.into_inner().unwrap().iter().all(|&c| c == 1));
    }

    #[test]
    fn concurrency_is_bounded() {
        let current = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        for_each_bounded(
            20,
            4,
            |_| {
                let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                thread::sleep(Duration::from_millis(5));
                current.fetch_sub(1, Ordering::SeqCst);
            },
            |_, _| {},
        );
        assert!(peak.load(Ordering::SeqCst) <= 4);
    }

    #[test]
    fn empty_input() {
        for_each_bounded(0, 3, |_| unreachable!(), |_, _: ()| unreachable!());
    }
}
