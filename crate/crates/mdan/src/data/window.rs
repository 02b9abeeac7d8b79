//! Sliding-window extraction over per-unit sensor series.

use ndarray::{s, Array2};

/// Number of windows a series of length `len` yields; 0 when too short.
pub fn window_count(len: usize, window: usize, step: usize) -> usize {
    assert!(window >= 1 && step >= 1);
    if len < window {
        0
    } else {
        (len - window) / step + 1
    }
}

/// Contiguous slices `[t, t+window)` advanced by `step` over a series laid
/// out as time steps x sensors; each window comes back as sensors x time.
pub fn make_windows(series: &Array2<f64>, window: usize, step: usize) -> Vec<Array2<f64>> {
    let len = series.nrows();
    let n = window_count(len, window, step);
    (0..n)
        .map(|i| {
            let t = i * step;
            series.slice(s![t..t + window, ..]).t().to_owned()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counting_formula() {
        assert_eq!(window_count(100, 30, 1), 71);
        assert_eq!(window_count(30, 30, 1), 1);
        assert_eq!(window_count(29, 30, 1), 0);
        assert_eq!(window_count(13312, 5120, 4096), 3);
        assert_eq!(window_count(5120, 5120, 4096), 1);
    }

    #[test]
    fn windows_are_contiguous_slices() {
        let series = Array2::from_shape_fn((10, 2), |(t, c)| (t * 10 + c) as f64);
        let ws = make_windows(&series, 4, 3);
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0].dim(), (2, 4));
        // second window starts at t=3
        assert_eq!(ws[1][(0, 0)], 30.0);
        assert_eq!(ws[1][(1, 3)], 61.0);
    }

    proptest! {
        #[test]
        fn count_matches_closed_form(len in 0usize..400, window in 1usize..50, step in 1usize..10) {
            let series = Array2::zeros((len, 3));
            let ws = make_windows(&series, window, step);
            prop_assert_eq!(ws.len(), window_count(len, window, step));
        }
    }
}
