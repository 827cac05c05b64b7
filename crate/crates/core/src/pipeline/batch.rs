use std::ops::Range;

/// Greedy partition of a stream of subcloud sizes into consecutive batches:
/// a batch grows until the next subcloud would push it over `limit` points.
/// A subcloud larger than `limit` forms a batch of its own.
pub fn stack_batches(sizes: &[usize], limit: usize) -> Vec<Range<usize>> {
    let limit = limit.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    let mut total = 0;
    for (i, &n) in sizes.iter().enumerate() {
        if i > start && total + n > limit {
            out.push(start..i);
            start = i;
            total = 0;
        }
        total += n;
    }
    if start < sizes.len() {
        out.push(start..sizes.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn examples() {
        assert_eq!(stack_batches(&[100, 100, 100], 250), vec![0..2, 2..3]);
        assert_eq!(stack_batches(&[900], 250), vec![0..1]);
        assert_eq!(stack_batches(&[10, 900, 10], 250), vec![0..1, 1..2, 2..3]);
        assert!(stack_batches(&[], 10).is_empty());
    }

    proptest! {
        #[test]
        fn batches_reassemble_the_stream(sizes in prop::collection::vec(1usize..500, 0..60), limit in 1usize..1500) {
            let batches = stack_batches(&sizes, limit);
            let flat: Vec<usize> = batches.iter().flat_map(|r| r.clone()).collect();
            prop_assert_eq!(flat, (0..sizes.len()).collect::<Vec<_>>());
            for r in &batches {
                let total: usize = sizes[r.clone()].iter().sum();
                prop_assert!(total <= limit || r.len() == 1);
                if r.end < sizes.len() {
                    // greedy: the next subcloud would not have fit
                    prop_assert!(total + sizes[r.end] > limit);
                }
            }
        }
    }
}
