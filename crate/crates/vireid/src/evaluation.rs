//! Cross-modality retrieval evaluation: cosine-distance ranking, CMC and
//! mAP with per-query validity masking (camera rule), and the protocol
//! runner that averages over seeded gallery-sampling trials.
//!
//! Rank positions are counted over valid gallery entries only; a query with
//! no valid correct match is dropped from the averages and counted in the
//! report. Distance is `1 − cosine` everywhere; no re-ranking.

use crate::dataset::{protocol_split, LoadedDataset, ProtocolSpec, SearchMode};
use crate::error::{Error, Result};
use crate::losses::similarity_clamped;
use crate::model::Model;
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

/// CMC curves are reported up to this rank (padded when the gallery is
/// smaller; ranks 1, 10 and 20 are the headline entries).
pub const MAX_RANK: usize = 20;

/// Per query, gallery indices sorted by descending cosine similarity;
/// ties broken by ascending gallery index.
pub fn rank_gallery(query_feats: &Array2<f64>, gallery_feats: &Array2<f64>) -> Result<Vec<Vec<usize>>> {
    if gallery_feats.nrows() == 0 {
        return Err(Error::Protocol("empty gallery".into()));
    }
    if query_feats.ncols() != gallery_feats.ncols() {
        return Err(Error::Input(format!(
            "query features are {}-dim, gallery {}-dim",
            query_feats.ncols(),
            gallery_feats.ncols()
        )));
    }
    let mut out = Vec::with_capacity(query_feats.nrows());
    for q in query_feats.rows() {
        let sims: Vec<f64> = gallery_feats
            .rows()
            .into_iter()
            .map(|g| similarity_clamped(q, g).0)
            .collect();
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| {
            sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        out.push(order);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmcResult {
    /// `curve[r]` = fraction of evaluated queries whose first valid correct
    /// match occurs at rank ≤ r+1. Length [`MAX_RANK`].
    pub curve: Vec<f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

fn check_metric_inputs(
    ranking: &[Vec<usize>],
    query_ids: &[usize],
    gallery_ids: &[usize],
    validity: &Array2<bool>,
) -> Result<()> {
    if ranking.len() != query_ids.len() {
        return Err(Error::Input("ranking and query id counts differ".into()));
    }
    if validity.dim() != (query_ids.len(), gallery_ids.len()) {
        return Err(Error::Input(format!(
            "validity mask is {:?}, expected ({}, {})",
            validity.dim(),
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    Ok(())
}

/// Cumulative matching characteristics over valid entries.
pub fn cmc_curve(
    ranking: &[Vec<usize>],
    query_ids: &[usize],
    gallery_ids: &[usize],
    validity: &Array2<bool>,
) -> Result<CmcResult> {
    check_metric_inputs(ranking, query_ids, gallery_ids, validity)?;
    let mut hits_at = vec![0usize; MAX_RANK];
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (q, order) in ranking.iter().enumerate() {
        let mut valid_rank = 0usize;
        let mut first_hit: Option<usize> = None;
        for &g in order {
            if !validity[[q, g]] {
                continue;
            }
            valid_rank += 1;
            if gallery_ids[g] == query_ids[q] {
                first_hit = Some(valid_rank);
                break;
            }
        }
        match first_hit {
            Some(rank) => {
                evaluated += 1;
                if rank <= MAX_RANK {
                    hits_at[rank - 1] += 1;
                }
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Protocol("no query has a valid correct match".into()));
    }
    let mut curve = Vec::with_capacity(MAX_RANK);
    let mut cum = 0usize;
    for r in 0..MAX_RANK {
        cum += hits_at[r];
        curve.push(cum as f64 / evaluated as f64);
    }
    Ok(CmcResult { curve, evaluated_queries: evaluated, skipped_queries: skipped })
}

/// Mean average precision over queries with at least one valid match.
pub fn mean_average_precision(
    ranking: &[Vec<usize>],
    query_ids: &[usize],
    gallery_ids: &[usize],
    validity: &Array2<bool>,
) -> Result<MapResult> {
    check_metric_inputs(ranking, query_ids, gallery_ids, validity)?;
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (q, order) in ranking.iter().enumerate() {
        let mut valid_rank = 0usize;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for &g in order {
            if !validity[[q, g]] {
                continue;
            }
            valid_rank += 1;
            if gallery_ids[g] == query_ids[q] {
                hits += 1;
                precision_sum += hits as f64 / valid_rank as f64;
            }
        }
        if hits == 0 {
            skipped += 1;
        } else {
            evaluated += 1;
            ap_sum += precision_sum / hits as f64;
        }
    }
    if evaluated == 0 {
        return Err(Error::Protocol("no query has a valid correct match".into()));
    }
    Ok(MapResult { map: ap_sum / evaluated as f64, evaluated_queries: evaluated, skipped_queries: skipped })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial_seed: u64,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_gallery: usize,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
    pub excluded_identities: Vec<usize>,
}

/// Averaged retrieval metrics plus the per-trial breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: ProtocolSpec,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub num_trials: usize,
    pub trials: Vec<TrialReport>,
}

impl RetrievalReport {
    /// CMC at 1-based rank `k`, saturated at the last computed rank.
    pub fn rank_k(&self, k: usize) -> f64 {
        let idx = k.clamp(1, self.cmc.len()) - 1;
        self.cmc[idx]
    }

    /// One tab-separated row: protocol, R1, R10, R20, mAP.
    pub fn flat_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            match self.protocol.search_mode {
                SearchMode::All => "all",
                SearchMode::Indoor => "indoor",
            },
            match self.protocol.gallery_mode {
                crate::dataset::GalleryMode::SingleShot => "single-shot",
                crate::dataset::GalleryMode::MultiShot => "multi-shot",
            },
            match self.protocol.direction {
                crate::dataset::Direction::InfraredToVisible => "ir->vis",
                crate::dataset::Direction::VisibleToInfrared => "vis->ir",
            },
            self.rank_k(1),
            self.rank_k(10),
            self.rank_k(20),
            self.map,
        )
    }

    pub const FLAT_HEADER: &'static str = "search\tgallery\tdirection\tR1\tR10\tR20\tmAP";
}

/// Encode the pixel payloads of `indices` with the dual-stream encoder,
/// stems chosen by each record's modality. Chunked to bound memory.
pub fn encode_records(model: &Model, dataset: &LoadedDataset, indices: &[usize]) -> Result<Array2<f64>> {
    let d = model.config.feature_dim;
    let mut out = Array2::<f64>::zeros((indices.len(), d));
    let (c, h, w) = match dataset.images.first() {
        Some(img) => img.dim(),
        None => return Err(Error::Data("dataset has no images".into())),
    };
    for (chunk_start, chunk) in indices.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
        let mut images = Array4::<f64>::zeros((chunk.len(), c, h, w));
        let mut mask = Vec::with_capacity(chunk.len());
        for (row, &idx) in chunk.iter().enumerate() {
            images.index_axis_mut(Axis(0), row).assign(&dataset.images[idx]);
            mask.push(dataset.manifest.records[idx].modality);
        }
        let feats = model.encoder.encode_eval(&images, &mask)?;
        for row in 0..chunk.len() {
            out.row_mut(chunk_start + row).assign(&feats.row(row));
        }
    }
    Ok(out)
}

fn validity_mask(
    dataset: &LoadedDataset,
    query_indices: &[usize],
    gallery_indices: &[usize],
    search_mode: SearchMode,
) -> Array2<bool> {
    let records = &dataset.manifest.records;
    Array2::from_shape_fn((query_indices.len(), gallery_indices.len()), |(qi, gi)| {
        let q = &records[query_indices[qi]];
        let g = &records[gallery_indices[gi]];
        match search_mode {
            // community camera rule: a gallery image of the query's identity
            // taken by the query's camera is not a valid match
            SearchMode::All => !(q.identity == g.identity && q.camera_id == g.camera_id),
            SearchMode::Indoor => true,
        }
    })
}

/// Run `num_trials` seeded gallery samplings and average CMC/mAP.
/// Trial `t` uses `protocol.trial_seed + t`.
pub fn evaluate(
    model: &Model,
    dataset: &LoadedDataset,
    protocol: &ProtocolSpec,
    num_trials: usize,
) -> Result<RetrievalReport> {
    if num_trials == 0 {
        return Err(Error::Config("num_trials must be at least 1".into()));
    }
    // every test image is encoded exactly once, then indexed per trial
    let all_indices: Vec<usize> = (0..dataset.len()).collect();
    let all_feats = encode_records(model, dataset, &all_indices)?;

    let mut trials = Vec::with_capacity(num_trials);
    let mut cmc_acc = vec![0.0; MAX_RANK];
    let mut map_acc = 0.0;
    let mut num_queries = 0;
    let mut num_gallery = 0;
    for t in 0..num_trials {
        let trial_protocol = ProtocolSpec { trial_seed: protocol.trial_seed + t as u64, ..*protocol };
        let split = protocol_split(&dataset.manifest, &trial_protocol)?;
        let take = |indices: &[usize]| -> Array2<f64> {
            let mut m = Array2::zeros((indices.len(), all_feats.ncols()));
            for (row, &idx) in indices.iter().enumerate() {
                m.row_mut(row).assign(&all_feats.row(idx));
            }
            m
        };
        let q_feats = take(&split.query_indices);
        let g_feats = take(&split.gallery_indices);
        let query_ids: Vec<usize> =
            split.query_indices.iter().map(|&i| dataset.manifest.records[i].identity).collect();
        let gallery_ids: Vec<usize> =
            split.gallery_indices.iter().map(|&i| dataset.manifest.records[i].identity).collect();
        let validity =
            validity_mask(dataset, &split.query_indices, &split.gallery_indices, protocol.search_mode);
        let ranking = rank_gallery(&q_feats, &g_feats)?;
        let cmc = cmc_curve(&ranking, &query_ids, &gallery_ids, &validity)?;
        let map = mean_average_precision(&ranking, &query_ids, &gallery_ids, &validity)?;
        for (acc, v) in cmc_acc.iter_mut().zip(&cmc.curve) {
            *acc += v;
        }
        map_acc += map.map;
        num_queries = split.query_indices.len();
        num_gallery = split.gallery_indices.len();
        trials.push(TrialReport {
            trial_seed: trial_protocol.trial_seed,
            cmc: cmc.curve,
            map: map.map,
            num_gallery,
            evaluated_queries: cmc.evaluated_queries,
            skipped_queries: cmc.skipped_queries,
            excluded_identities: split.excluded_identities,
        });
    }
    Ok(RetrievalReport {
        protocol: *protocol,
        cmc: cmc_acc.iter().map(|v| v / num_trials as f64).collect(),
        map: map_acc / num_trials as f64,
        num_queries,
        num_gallery,
        num_trials,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_valid(q: usize, g: usize) -> Array2<bool> {
        Array2::from_elem((q, g), true)
    }

    #[test]
    fn ranking_self_match_first_and_tie_rule() {
        let q = arr2(&[[1.0, 0.0]]);
        let g = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(rank_gallery(&q, &g).unwrap(), vec![vec![0, 1]]);

        // all-equal similarities: tie-break gives the identity permutation
        let g_eq = arr2(&[[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]]);
        let q2 = arr2(&[[3.0, 3.0]]);
        assert_eq!(rank_gallery(&q2, &g_eq).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn ranking_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Array2::from_shape_fn((5, 7), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((20, 7), |_| rng.random_range(-1.0..1.0));
        let got = rank_gallery(&q, &g).unwrap();
        for (qi, row) in q.rows().into_iter().enumerate() {
            // naive pairwise similarity + stable sort on (-sim, index)
            let mut sims: Vec<(usize, f64)> = g
                .rows()
                .into_iter()
                .enumerate()
                .map(|(gi, gr)| {
                    let dot = row.dot(&gr);
                    let s = dot / (row.dot(&row).sqrt() * gr.dot(&gr).sqrt());
                    (gi, s)
                })
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expect: Vec<usize> = sims.into_iter().map(|(i, _)| i).collect();
            assert_eq!(got[qi], expect);
        }
    }

    #[test]
    fn ranking_empty_gallery_is_protocol_error() {
        let q = arr2(&[[1.0, 0.0]]);
        let g = Array2::<f64>::zeros((0, 2));
        assert!(matches!(rank_gallery(&q, &g), Err(Error::Protocol(_))));
    }

    #[test]
    fn cmc_first_match_at_rank_two() {
        let ranking = vec![vec![0, 1, 2]];
        let query_ids = [7];
        let gallery_ids = [9, 7, 7]; // rank 1 misses, rank 2 hits
        let out = cmc_curve(&ranking, &query_ids, &gallery_ids, &all_valid(1, 3)).unwrap();
        assert_eq!(out.curve[0], 0.0);
        assert!(out.curve[1..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cmc_perfect_ranking() {
        let ranking = vec![vec![0, 1], vec![1, 0]];
        let out = cmc_curve(&ranking, &[1, 2], &[1, 2], &all_valid(2, 2)).unwrap();
        assert_eq!(out.curve[0], 1.0);
    }

    #[test]
    fn cmc_and_map_match_exhaustive_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let q_n = rng.random_range(3..20);
            let g_n = rng.random_range(5..50);
            let query_ids: Vec<usize> = (0..q_n).map(|_| rng.random_range(0..6)).collect();
            let gallery_ids: Vec<usize> = (0..g_n).map(|_| rng.random_range(0..6)).collect();
            let validity =
                Array2::from_shape_fn((q_n, g_n), |_| rng.random_range(0..4) != 0);
            let ranking: Vec<Vec<usize>> = (0..q_n)
                .map(|_| {
                    let mut order: Vec<usize> = (0..g_n).collect();
                    for i in (1..order.len()).rev() {
                        let j = rng.random_range(0..=i);
                        order.swap(i, j);
                    }
                    order
                })
                .collect();

            let cmc = cmc_curve(&ranking, &query_ids, &gallery_ids, &validity);
            let map = mean_average_precision(&ranking, &query_ids, &gallery_ids, &validity);

            // brute-force first-hit scan and AP accumulation
            let mut first_hits = Vec::new();
            let mut aps = Vec::new();
            for qi in 0..q_n {
                let mut rank = 0;
                let mut first = None;
                let mut hits = 0;
                let mut psum = 0.0;
                for &gi in &ranking[qi] {
                    if !validity[[qi, gi]] {
                        continue;
                    }
                    rank += 1;
                    if gallery_ids[gi] == query_ids[qi] {
                        if first.is_none() {
                            first = Some(rank);
                        }
                        hits += 1;
                        psum += hits as f64 / rank as f64;
                    }
                }
                if let Some(f) = first {
                    first_hits.push(f);
                    aps.push(psum / hits as f64);
                }
            }
            if first_hits.is_empty() {
                assert!(cmc.is_err() && map.is_err());
                continue;
            }
            let cmc = cmc.unwrap();
            let map = map.unwrap();
            for r in 0..MAX_RANK {
                let expect =
                    first_hits.iter().filter(|&&f| f <= r + 1).count() as f64 / first_hits.len() as f64;
                assert!((cmc.curve[r] - expect).abs() < 1e-12);
            }
            let expect_map = aps.iter().sum::<f64>() / aps.len() as f64;
            assert!((map.map - expect_map).abs() < 1e-12);
        }
    }

    #[test]
    fn map_hand_cases() {
        // matches at ranks 1 and 3: AP = (1/1 + 2/3) / 2
        let ranking = vec![vec![0, 1, 2, 3]];
        let out =
            mean_average_precision(&ranking, &[5], &[5, 1, 5, 2], &all_valid(1, 4)).unwrap();
        assert!((out.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        // all correct matches ranked first
        let out2 = mean_average_precision(&ranking, &[5], &[5, 5, 1, 2], &all_valid(1, 4)).unwrap();
        assert!((out2.map - 1.0).abs() < 1e-12);

        // single correct match at rank k -> AP = 1/k
        for k in 1..=4usize {
            let mut gallery_ids = vec![9; 4];
            gallery_ids[k - 1] = 5;
            let out =
                mean_average_precision(&ranking, &[5], &gallery_ids, &all_valid(1, 4)).unwrap();
            assert!((out.map - 1.0 / k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_entries_are_skipped_when_counting_ranks() {
        // gallery 0 is the same-camera copy: excluded; hit moves to rank 1
        let ranking = vec![vec![0, 1, 2]];
        let mut validity = all_valid(1, 3);
        validity[[0, 0]] = false;
        let out = cmc_curve(&ranking, &[5], &[5, 5, 1], &validity).unwrap();
        assert_eq!(out.curve[0], 1.0);
        let ap = mean_average_precision(&ranking, &[5], &[5, 5, 1], &validity).unwrap();
        assert!((ap.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn query_without_valid_match_is_dropped_and_counted() {
        let ranking = vec![vec![0, 1], vec![0, 1]];
        let mut validity = all_valid(2, 2);
        validity[[1, 0]] = false;
        validity[[1, 1]] = false;
        let out = cmc_curve(&ranking, &[1, 1], &[1, 2], &validity).unwrap();
        assert_eq!(out.evaluated_queries, 1);
        assert_eq!(out.skipped_queries, 1);
    }

    #[test]
    fn cmc_is_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q_n = rng.random_range(2..10);
            let g_n = rng.random_range(3..30);
            let query_ids: Vec<usize> = (0..q_n).map(|_| rng.random_range(0..3)).collect();
            let gallery_ids: Vec<usize> = (0..g_n).map(|_| rng.random_range(0..3)).collect();
            let ranking: Vec<Vec<usize>> = (0..q_n).map(|_| (0..g_n).collect()).collect();
            if let Ok(out) = cmc_curve(&ranking, &query_ids, &gallery_ids, &all_valid(q_n, g_n)) {
                for r in 1..MAX_RANK {
                    assert!(out.curve[r] >= out.curve[r - 1]);
                }
                assert!(out.curve[MAX_RANK - 1] <= 1.0);
                // with every query evaluated, AP ≤ 1 implies mAP ≤ cmc tail
                let map =
                    mean_average_precision(&ranking, &query_ids, &gallery_ids, &all_valid(q_n, g_n))
                        .unwrap();
                if out.skipped_queries == 0 {
                    assert!(map.map <= out.curve[MAX_RANK - 1] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_hot_identity_features_retrieve_perfectly() {
        // separable oracle features: query i and its gallery entry share a basis vector
        let ids = [3usize, 1, 4, 0, 2];
        let q = Array2::from_shape_fn((5, 5), |(i, j)| if ids[i] == j { 1.0 } else { 0.0 });
        let g = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let gallery_ids = [0usize, 1, 2, 3, 4];
        let ranking = rank_gallery(&q, &g).unwrap();
        let cmc = cmc_curve(&ranking, &ids, &gallery_ids, &all_valid(5, 5)).unwrap();
        let map = mean_average_precision(&ranking, &ids, &gallery_ids, &all_valid(5, 5)).unwrap();
        assert_eq!(cmc.curve[0], 1.0);
        assert_eq!(map.map, 1.0);
    }

    #[test]
    fn trial_average_equals_mean_of_single_trials() {
        use crate::dataset::{generate_synthetic, Direction, GalleryMode, SyntheticSpec};
        use crate::fusion::FusionDirection;
        use crate::model::{AblationMode, Model, ModelConfig};

        let manifest = generate_synthetic(&SyntheticSpec {
            num_identities: 4,
            images_per_id_per_modality: 3,
            image_shape: (8, 6, 3),
            seed: 31,
            noise_sigma: 0.1,
            split: crate::dataset::Split::Test,
        })
        .unwrap();
        let dataset = LoadedDataset::load(manifest, None).unwrap();
        let model = Model::init(
            ModelConfig {
                feature_dim: 8,
                token_dim: 8,
                prompt_tokens: 2,
                stem_channels: [4, 4],
                trunk_channels: [6, 6],
                image_channels: 3,
                num_identities: 4,
            },
            AblationMode::Baseline,
            FusionDirection::VisibleQuery,
            17,
        )
        .unwrap();
        let protocol = ProtocolSpec {
            search_mode: SearchMode::All,
            gallery_mode: GalleryMode::MultiShot,
            direction: Direction::InfraredToVisible,
            trial_seed: 90,
        };
        let averaged = evaluate(&model, &dataset, &protocol, 10).unwrap();
        let mut map_sum = 0.0;
        let mut cmc_sum = vec![0.0; MAX_RANK];
        for t in 0..10u64 {
            let single = evaluate(
                &model,
                &dataset,
                &ProtocolSpec { trial_seed: protocol.trial_seed + t, ..protocol },
                1,
            )
            .unwrap();
            map_sum += single.map;
            for (acc, v) in cmc_sum.iter_mut().zip(&single.cmc) {
                *acc += v;
            }
        }
        assert!((averaged.map - map_sum / 10.0).abs() < 1e-12);
        for (a, s) in averaged.cmc.iter().zip(&cmc_sum) {
            assert!((a - s / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_scaling_leaves_ranking_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((9, 5), |_| rng.random_range(-1.0..1.0));
        let base = rank_gallery(&q, &g).unwrap();
        let scaled = rank_gallery(&q.mapv(|v| v * 37.5), &g.mapv(|v| v * 0.004)).unwrap();
        assert_eq!(base, scaled);
    }
}
