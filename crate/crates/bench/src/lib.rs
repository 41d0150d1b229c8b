//! Fixtures shared by the benchmarks.

use comptrack_core::bev::{pillarize_raw, RawPillars};
use comptrack_core::ibdtc::Compression;
use comptrack_core::scene::{crop_search_region, generate_sequence};
use comptrack_core::{Config, DenseMatrix, Model};

/// A freshly initialized benchmark-scale model with one template/search pair from a generated scene.
pub struct PairFixture {
    pub model: Model,
    pub template: RawPillars,
    pub search: RawPillars,
}

pub fn pair_fixture(compression: Compression) -> PairFixture {
    let cfg = Config::benchmark().with_compression(compression);
    let model = Model::new(cfg.model.clone()).expect("benchmark config is valid");
    let seq = generate_sequence(&cfg.data.scene(cfg.data.test_seed, cfg.model.class)).expect("scene");
    let template = model.template_pillars(&seq.frames[0], &seq.gt_boxes[0]);
    let crop = crop_search_region(&seq.frames[1], &seq.gt_boxes[0], cfg.model.class);
    let search = pillarize_raw(&crop, &cfg.model.geometry());
    PairFixture { model, template, search }
}

/// Deterministic `n × c` token matrix with entries in `[-1, 1)`.
pub fn token_matrix(n: usize, c: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, c, |i, j| (((i * 7919 + j * 104_729) % 2000) as f64) / 1000.0 - 1.0)
}
