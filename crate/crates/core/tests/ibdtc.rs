mod common;

use comptrack_core::ibdtc::{compress, AttentionWeights, FusionMode, SvdRowScaling};
use common::{masking_gap, masking_pairs, planted_rank, rng, uniform};

#[test]
fn masked_padding_matches_sliced_queries() {
    for (k, l) in masking_pairs() {
        let gap = masking_gap(k, l, (k * 100 + l) as u64);
        assert!(gap <= 1e-6, "K {k} L {l}: {gap}");
    }
}

#[test]
fn compression_of_low_rank_tokens_uses_few_queries() {
    let x = planted_rank(3, 120, 16, 3, 1e-4);
    let mut g = rng(9);
    let (pool, wq, wk, wv) = (uniform(32, 16, &mut g), uniform(16, 16, &mut g), uniform(16, 16, &mut g), uniform(16, 16, &mut g));
    let w = AttentionWeights { pool: &pool, fuse: None, wq: &wq, wk: &wk, wv: &wv };
    let r = compress(&x, &w, 0.99, FusionMode::Addition, SvdRowScaling::Unit).unwrap();
    assert_eq!(r.k, 3);
    assert_eq!(r.proxy.shape(), (3, 16));
    assert_eq!(r.mask.iter().filter(|&&m| m).count(), 3);
    assert!(r.mask[..3].iter().all(|&m| m));
    assert_eq!(r.active_queries.max_abs_diff(&pool.slice_rows(0, 3).add(&r.q_svd).unwrap()), 0.0);
}
