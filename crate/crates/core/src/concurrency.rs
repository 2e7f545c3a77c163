use rayon::prelude::*;

/// Default number of provider calls allowed in flight at once.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// Maps `f` over `items` with at most `max_in_flight` concurrent calls.
/// Output order always matches input order.
pub fn bounded_map<T, R, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let threads = max_in_flight.max(1);
    if threads == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(err) => {
            tracing::warn!(%err, "thread pool unavailable, running sequentially");
            items.iter().map(f).collect()
        }
    }
}
