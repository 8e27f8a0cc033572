//! Relevance-graded ranking metrics: DCG, nDCG, AP and mAP in both retrieval directions.
//!
//! DCG sums over the whole ranked list; zero-relevance positions add nothing,
//! so this equals the sum restricted to the relevant items. AP uses binary
//! relevance: a candidate counts as relevant only when its relevance is exactly 1.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{embed_all, ModelParams};
use crate::semantics::{relevance_with, EmptyJaccard, SemanticProfile};

/// Candidates of one anchor, ordered by descending similarity (ties by index).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub anchor: usize,
    pub candidates: Vec<usize>,
    /// Relevance of each candidate, in rank order.
    pub relevances: Vec<f64>,
}

impl RankedList {
    pub fn new(anchor: usize, similarities: &[f64], relevances: &[f64]) -> Result<Self> {
        if similarities.len() != relevances.len() {
            return Err(Error::invalid("similarity and relevance lists differ in length"));
        }
        let candidates = rank_by_similarity(similarities);
        let relevances = candidates.iter().map(|&j| relevances[j]).collect();
        Ok(Self { anchor, candidates, relevances })
    }
}

/// Indices sorted by descending similarity; equal similarities keep index order.
pub fn rank_by_similarity(similarities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]));
    order
}

/// `sum_{k=1..n_r} rel_k / log2(k + 1)`.
pub fn dcg(relevances: &[f64], n_r: usize) -> f64 {
    relevances
        .iter()
        .take(n_r)
        .enumerate()
        .map(|(k, &r)| r / ((k + 2) as f64).log2())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ndcg {
    pub value: f64,
    /// Set when no candidate has positive relevance; `value` is then 0.
    pub undefined: bool,
}

pub fn ndcg(relevances_in_rank_order: &[f64]) -> Ndcg {
    let mut ideal = relevances_in_rank_order.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let n = ideal.len();
    let idcg = dcg(&ideal, n);
    if idcg <= 0.0 {
        return Ndcg { value: 0.0, undefined: true };
    }
    Ndcg { value: dcg(relevances_in_rank_order, n) / idcg, undefined: false }
}

/// Average precision under binary relevance (`rel == 1`). `None` when no
/// candidate is fully relevant.
pub fn average_precision(relevances_in_rank_order: &[f64]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevances_in_rank_order.iter().enumerate() {
        if r == 1.0 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Table layout: one column per direction plus their mean, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndcg_t2v: f64,
    pub ndcg_v2t: f64,
    pub ndcg_avg: f64,
    pub map_t2v: Option<f64>,
    pub map_v2t: Option<f64>,
    pub map_avg: Option<f64>,
}

impl MetricsReport {
    fn from_directions(ndcg_t2v: f64, ndcg_v2t: f64, map_t2v: Option<f64>, map_v2t: Option<f64>) -> Self {
        let map_avg = match (map_t2v, map_v2t) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            _ => None,
        };
        Self { ndcg_t2v, ndcg_v2t, ndcg_avg: 0.5 * (ndcg_t2v + ndcg_v2t), map_t2v, map_v2t, map_avg }
    }

    /// The same numbers with the two direction columns exchanged.
    pub fn swapped(&self) -> Self {
        Self::from_directions(self.ndcg_v2t, self.ndcg_t2v, self.map_v2t, self.map_t2v)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "t2v", "v2t", "avg"])?;
        w.write_record(["nDCG", &fmt_pct(Some(self.ndcg_t2v)), &fmt_pct(Some(self.ndcg_v2t)), &fmt_pct(Some(self.ndcg_avg))])?;
        w.write_record(["mAP", &fmt_pct(self.map_t2v), &fmt_pct(self.map_v2t), &fmt_pct(self.map_avg)])?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub(crate) fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "NA".to_string(),
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "nDCG t2v {:.2} v2t {:.2} avg {:.2} | mAP t2v {} v2t {} avg {}",
            self.ndcg_t2v,
            self.ndcg_v2t,
            self.ndcg_avg,
            fmt_pct(self.map_t2v),
            fmt_pct(self.map_v2t),
            fmt_pct(self.map_avg)
        )
    }
}

struct DirectionMeans {
    ndcg: f64,
    map: Option<f64>,
}

fn direction_means(sim: &Matrix, rel: &Matrix) -> Result<DirectionMeans> {
    let mut ndcg_sum = 0.0;
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for i in 0..sim.rows() {
        let list = RankedList::new(i, sim.row(i), rel.row(i))?;
        ndcg_sum += ndcg(&list.relevances).value;
        if let Some(ap) = average_precision(&list.relevances) {
            ap_sum += ap;
            ap_count += 1;
        }
    }
    Ok(DirectionMeans {
        ndcg: 100.0 * ndcg_sum / sim.rows() as f64,
        map: (ap_count > 0).then(|| 100.0 * ap_sum / ap_count as f64),
    })
}

/// Metrics from a video-by-caption similarity matrix and the matching relevance matrix.
pub fn evaluate_similarity(sim: &Matrix, rel: &Matrix) -> Result<MetricsReport> {
    if sim.shape() != rel.shape() {
        return Err(Error::invalid("similarity and relevance shapes differ"));
    }
    if sim.rows() == 0 || sim.cols() == 0 {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let v2t = direction_means(sim, rel)?;
    let t2v = direction_means(&sim.transpose(), &rel.transpose())?;
    Ok(MetricsReport::from_directions(t2v.ndcg, v2t.ndcg, t2v.map, v2t.map))
}

/// Similarity and relevance between every video of `split` and every caption of those videos.
pub fn split_matrices(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    video_profiles: &[SemanticProfile],
    empty: EmptyJaccard,
) -> Result<(Matrix, Matrix)> {
    let videos = dataset.split(split);
    if videos.is_empty() {
        return Err(Error::invalid(format!("split '{split}' is empty")));
    }
    let captions: Vec<usize> = videos.iter().flat_map(|&v| dataset.videos()[v].captions.iter().copied()).collect();
    let ev = embed_all(&dataset.video_matrix(videos), &params.w_video)?;
    let ec = embed_all(&dataset.caption_matrix(&captions), &params.w_text)?;
    let mut sim = Matrix::zeros(videos.len(), captions.len());
    let mut rel = Matrix::zeros(videos.len(), captions.len());
    for (i, &v) in videos.iter().enumerate() {
        let a = ev.row(i);
        for (j, &c) in captions.iter().enumerate() {
            let s: f64 = a.iter().zip(ec.row(j)).map(|(x, y)| x * y).sum();
            sim.set(i, j, s.clamp(-1.0, 1.0));
            rel.set(i, j, relevance_with(&video_profiles[v], &dataset.captions()[c].annotation.profile, empty).value());
        }
    }
    Ok((sim, rel))
}

/// Ranks every caption of the split for each of its videos and vice versa.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    video_profiles: &[SemanticProfile],
    empty: EmptyJaccard,
) -> Result<MetricsReport> {
    let (sim, rel) = split_matrices(params, dataset, split, video_profiles, empty)?;
    evaluate_similarity(&sim, &rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    fn scalar_dcg(r: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 1..=r.len() {
            total += r[k - 1] / ((k + 1) as f64).ln() * std::f64::consts::LN_2;
        }
        total
    }

    fn scalar_ap(r: &[f64]) -> Option<f64> {
        let n_r = r.iter().filter(|&&x| x == 1.0).count();
        if n_r == 0 {
            return None;
        }
        let mut total = 0.0;
        for k in 1..=r.len() {
            if r[k - 1] == 1.0 {
                let p_at_k = r[..k].iter().filter(|&&x| x == 1.0).count() as f64 / k as f64;
                total += p_at_k;
            }
        }
        Some(total / n_r as f64)
    }

    #[test]
    fn dcg_examples() {
        assert_eq!(dcg(&[1.0], 1), 1.0);
        assert!((dcg(&[0.0, 1.0], 2) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((dcg(&[0.0, 1.0], 2) - 0.6309).abs() < 1e-4);
        assert_eq!(dcg(&[0.0, 0.0, 0.0], 3), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&[1.0, 0.5, 0.5, 0.25, 0.0]).value, 1.0);
        assert!((ndcg(&[0.0, 1.0]).value - 0.6309).abs() < 1e-4);
        let flat = ndcg(&[0.0, 0.0]);
        assert!(flat.undefined);
        assert_eq!(flat.value, 0.0);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[1.0, 1.0, 0.0, 0.5]), Some(1.0));
        assert_eq!(average_precision(&[0.0, 1.0, 0.5, 1.0]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.0]), None);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_by_similarity(&[0.2, 0.9, 0.2, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn report_avg_and_swap() {
        let r = MetricsReport::from_directions(40.0, 60.0, Some(10.0), None);
        assert_eq!(r.ndcg_avg, 50.0);
        assert_eq!(r.map_avg, None);
        let s = r.swapped();
        assert_eq!((s.ndcg_t2v, s.ndcg_v2t), (60.0, 40.0));
        assert_eq!((s.map_t2v, s.map_v2t), (None, Some(10.0)));
    }

    #[test]
    fn single_pair_is_perfect() {
        let one = Matrix::from_vec(1, 1, vec![0.3]).unwrap();
        let rel = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let r = evaluate_similarity(&one, &rel).unwrap();
        assert_eq!((r.ndcg_t2v, r.ndcg_v2t, r.map_avg), (100.0, 100.0, Some(100.0)));
    }

    #[test]
    fn oracle_ranking_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let levels = [0.0, 1.0 / 6.0, 0.5, 1.0];
        let rel_rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..9).map(|_| levels[rng.random_range(0..4)]).collect()).collect();
        let rel = Matrix::from_rows(&rel_rows).unwrap();
        // A single similarity matrix ranks both directions by relevance when sim == rel.
        let r = evaluate_similarity(&rel, &rel).unwrap();
        assert!((r.ndcg_v2t - 100.0).abs() < 1e-9);
        assert!((r.ndcg_t2v - 100.0).abs() < 1e-9);
        assert!(evaluate_similarity(&Matrix::zeros(0, 0), &Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn random_split_matches_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10;
        let sim_rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rel_rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| [0.0, 0.25, 0.5, 1.0][rng.random_range(0..4)]).collect()).collect();
        let sim = Matrix::from_rows(&sim_rows).unwrap();
        let rel = Matrix::from_rows(&rel_rows).unwrap();
        let report = evaluate_similarity(&sim, &rel).unwrap();

        let mut nd = 0.0;
        let mut ap = Vec::new();
        for i in 0..n {
            // selection-sort style ranking as an independent path
            let mut used = vec![false; n];
            let mut ranked = Vec::new();
            for _ in 0..n {
                let mut best = None;
                for j in 0..n {
                    if !used[j] && best.is_none_or(|b: usize| sim_rows[i][j] > sim_rows[i][b]) {
                        best = Some(j);
                    }
                }
                used[best.unwrap()] = true;
                ranked.push(rel_rows[i][best.unwrap()]);
            }
            let mut ideal = ranked.clone();
            ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
            nd += scalar_dcg(&ranked) / scalar_dcg(&ideal);
            if let Some(v) = scalar_ap(&ranked) {
                ap.push(v);
            }
        }
        assert!((report.ndcg_v2t - 100.0 * nd / n as f64).abs() < 1e-9);
        let map = 100.0 * ap.iter().sum::<f64>() / ap.len() as f64;
        assert!((report.map_v2t.unwrap() - map).abs() < 1e-9);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport::from_directions(40.0, 60.0, None, None);
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "metric,t2v,v2t,avg\nnDCG,40.0000,60.0000,50.0000\nmAP,NA,NA,NA\n"
        );
    }

    fn rel_list() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![Just(0.0), Just(0.25), Just(0.5), Just(1.0), 0.0f64..=1.0], 1..=6)
    }

    proptest! {
        #[test]
        fn ndcg_matches_permutation_brute_force(r in rel_list()) {
            let best = permutations(&r).iter().map(|p| scalar_dcg(p)).fold(0.0, f64::max);
            let got = ndcg(&r);
            if best > 0.0 {
                prop_assert!((got.value - scalar_dcg(&r) / best).abs() < 1e-10);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&got.value));
            } else {
                prop_assert!(got.undefined);
            }
        }

        #[test]
        fn ap_matches_scalar_loop(r in rel_list()) {
            match (average_precision(&r), scalar_ap(&r)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-10),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn sorted_is_perfect_and_swap_helps(r in rel_list(), k in 0usize..5) {
            let mut sorted = r.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] > 0.0 {
                prop_assert_eq!(ndcg(&sorted).value, 1.0);
            }
            if k + 1 < r.len() && r[k + 1] > r[k] {
                let mut swapped = r.clone();
                swapped.swap(k, k + 1);
                prop_assert!(ndcg(&swapped).value > ndcg(&r).value);
            }
        }

        #[test]
        fn irrelevant_tail_changes_nothing(r in rel_list()) {
            let mut longer = r.clone();
            longer.push(0.0);
            prop_assert_eq!(ndcg(&longer).value, ndcg(&r).value);
            prop_assert_eq!(average_precision(&longer), average_precision(&r));
        }

        #[test]
        fn ap_is_one_iff_front_loaded(bits in proptest::collection::vec(any::<bool>(), 1..=6)) {
            let r: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let n_r = bits.iter().filter(|&&b| b).count();
            let front = bits[..n_r].iter().all(|&b| b);
            if n_r > 0 {
                prop_assert_eq!(average_precision(&r) == Some(1.0), front);
            }
        }
    }
}
