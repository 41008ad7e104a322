//! Windowing and decimation of raw label-aligned streams.

/// A window cut from a stream: `[start, start + length)` plus its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub label: usize,
}

/// Most frequent label; ties go to the smallest label id.
pub fn majority_label(labels: &[usize]) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (label, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    best.map(|(l, _)| l)
}

/// Cut windows of `length` samples every `stride` samples. Trailing partial
/// windows are dropped.
pub fn window_segment(labels: &[usize], length: usize, stride: usize) -> Vec<Segment> {
    assert!(stride >= 1, "stride must be >= 1");
    if length == 0 || length > labels.len() {
        log::info!(
            "stream of {} samples is shorter than window length {length}; no windows cut",
            labels.len()
        );
        return Vec::new();
    }
    (0..=labels.len() - length)
        .step_by(stride)
        .map(|start| Segment {
            start,
            label: majority_label(&labels[start..start + length]).expect("non-empty window"),
        })
        .collect()
}

/// Keep every `factor`-th sample, starting at the first. The result has
/// `ceil(len / factor)` samples.
pub fn decimate(samples: &[f64], factor: usize) -> Vec<f64> {
    assert!(factor >= 1, "decimation factor must be >= 1");
    samples.iter().step_by(factor).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tiling_when_stride_equals_length() {
        let labels = vec![1; 23];
        let w = window_segment(&labels, 5, 5);
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|s| s.label == 1));
        assert_eq!(w[3].start, 15);
    }

    #[test]
    fn majority_of_mixed_window() {
        let mut labels = vec![2; 6];
        labels.extend([7; 4]);
        assert_eq!(window_segment(&labels, 10, 10)[0].label, 2);
        assert_eq!(majority_label(&[3, 1, 1, 3]), Some(1));
    }

    #[test]
    fn too_long_window_yields_nothing() {
        assert!(window_segment(&[0; 4], 5, 1).is_empty());
    }

    #[test]
    fn decimation_examples() {
        let x: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(decimate(&x, 1), x);
        assert_eq!(decimate(&x, 10).len(), 10);
        assert_eq!(decimate(&[0.0, 1.0, 2.0, 3.0, 4.0], 2), vec![0.0, 2.0, 4.0]);
    }

    proptest! {
        #[test]
        fn decimated_length_is_ceiling(len in 0usize..200, factor in 1usize..12) {
            let x: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let d = decimate(&x, factor);
            prop_assert_eq!(d.len(), len.div_ceil(factor));
            for (j, v) in d.iter().enumerate() {
                prop_assert_eq!(*v, (j * factor) as f64);
            }
        }

        #[test]
        fn window_count_matches_formula(len in 1usize..300, length in 1usize..50, stride in 1usize..20) {
            let w = window_segment(&vec![0; len], length, stride);
            let expected = if length > len { 0 } else { (len - length) / stride + 1 };
            prop_assert_eq!(w.len(), expected);
        }
    }
}
