//! Cross-modal retrieval: cosine ranking with stable tie order and the
//! corpus metrics reported in the alignment evaluation.

use super::EvalError;
use std::collections::{BTreeMap, BTreeSet};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidate ids by descending cosine to the query; equal similarities
/// keep the index's candidate order (stable ties). Embeddings are assumed
/// unit-norm so cosine reduces to the dot product.
pub fn retrieval_rank(query: &[f64], index: &[(String, Vec<f64>)]) -> Vec<String> {
    let mut order: Vec<usize> = (0..index.len()).collect();
    let sims: Vec<f64> = index.iter().map(|(_, emb)| dot(query, emb)).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).expect("finite similarity"));
    order.into_iter().map(|i| index[i].0.clone()).collect()
}

/// 1 iff the true id appears in the first `k` ranked results.
pub fn recall_at_k(ranked: &[String], true_id: &str, k: usize) -> Result<f64, EvalError> {
    if !ranked.iter().any(|r| r == true_id) {
        return Err(EvalError::UnknownCandidate(true_id.to_string()));
    }
    Ok(if ranked.iter().take(k).any(|r| r == true_id) { 1.0 } else { 0.0 })
}

/// 1 iff every one of the first `n` results shares the query's category.
pub fn precision_at_n(
    ranked: &[String],
    categories: &BTreeMap<String, String>,
    query_category: &str,
    n: usize,
) -> Result<f64, EvalError> {
    if n > ranked.len() {
        return Err(EvalError::CutoffTooLarge { n, corpus: ranked.len() });
    }
    for id in ranked.iter().take(n) {
        match categories.get(id) {
            None => return Err(EvalError::MissingCategory(id.clone())),
            Some(cat) if cat != query_category => return Ok(0.0),
            Some(_) => {}
        }
    }
    Ok(1.0)
}

/// Average precision over the full ranking: mean over relevant ranks r of
/// (relevant found in the top r)/r. `None` when nothing is relevant.
pub fn average_precision(ranked: &[String], relevant: &BTreeSet<String>) -> Option<f64> {
    let total_relevant = ranked.iter().filter(|id| relevant.contains(*id)).count();
    if total_relevant == 0 {
        return None;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Mean AP over queries; queries with zero relevant items are excluded
/// from the mean but counted so reports can surface them.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MapReport {
    pub map: f64,
    pub included: usize,
    pub excluded: usize,
}

pub fn mean_average_precision(
    queries: &[(Vec<String>, BTreeSet<String>)],
) -> Result<MapReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyInput("mean_average_precision"));
    }
    let mut sum = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for (ranked, relevant) in queries {
        match average_precision(ranked, relevant) {
            Some(ap) => {
                sum += ap;
                included += 1;
            }
            None => excluded += 1,
        }
    }
    if included == 0 {
        return Err(EvalError::EmptyInput("no query had a relevant item"));
    }
    Ok(MapReport { map: sum / included as f64, included, excluded })
}

/// Max over slice embeddings of cosine(text, slice); unit norms assumed.
pub fn slice_max_similarity(slices: &[Vec<f64>], text: &[f64]) -> Result<f64, EvalError> {
    if slices.is_empty() {
        return Err(EvalError::EmptyInput("slice_max_similarity"));
    }
    Ok(slices
        .iter()
        .map(|s| dot(s, text))
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn named(embs: Vec<Vec<f64>>) -> Vec<(String, Vec<f64>)> {
        embs.into_iter().enumerate().map(|(i, e)| (format!("c{i}"), unit(e))).collect()
    }

    #[test]
    fn exact_match_ranks_first() {
        let index = named(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let q = index[1].1.clone();
        assert_eq!(retrieval_rank(&q, &index)[0], "c1");
    }

    #[test]
    fn ranks_follow_cosine_and_ties_keep_index_order() {
        let index = vec![
            ("a".to_string(), unit(vec![0.9, (1.0f64 - 0.81).sqrt()])),
            ("b".to_string(), unit(vec![0.1, (1.0f64 - 0.01).sqrt()])),
            ("c".to_string(), unit(vec![0.5, (1.0f64 - 0.25).sqrt()])),
        ];
        let q = vec![1.0, 0.0];
        assert_eq!(retrieval_rank(&q, &index), vec!["a", "c", "b"]);

        let tied = vec![
            ("z-late".to_string(), vec![1.0, 0.0]),
            ("a-early".to_string(), vec![1.0, 0.0]),
        ];
        assert_eq!(retrieval_rank(&q, &tied), vec!["z-late", "a-early"]);
    }

    #[test]
    fn agreement_with_brute_force_sort() {
        let mut rng = stream_rng(11, "retrieval-oracle", &[]);
        let index: Vec<(String, Vec<f64>)> = (0..100)
            .map(|i| {
                let e: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (format!("c{i:03}"), unit(e))
            })
            .collect();
        let q = unit((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let got = retrieval_rank(&q, &index);
        let mut want: Vec<(f64, usize)> =
            index.iter().enumerate().map(|(i, (_, e))| (dot(&q, e), i)).collect();
        want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want_ids: Vec<String> = want.into_iter().map(|(_, i)| index[i].0.clone()).collect();
        assert_eq!(got, want_ids);
    }

    #[test]
    fn recall_indicator() {
        let ranked: Vec<String> = (0..12).map(|i| format!("c{i}")).collect();
        assert_eq!(recall_at_k(&ranked, "c0", 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, "c10", 10).unwrap(), 0.0);
        assert!(matches!(
            recall_at_k(&ranked, "missing", 5),
            Err(EvalError::UnknownCandidate(_))
        ));
    }

    #[test]
    fn precision_all_match_rule() {
        let ranked: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let mut cats = BTreeMap::new();
        cats.insert("x".to_string(), "A".to_string());
        cats.insert("y".to_string(), "A".to_string());
        cats.insert("z".to_string(), "A".to_string());
        assert_eq!(precision_at_n(&ranked, &cats, "A", 3).unwrap(), 1.0);
        cats.insert("y".to_string(), "B".to_string());
        assert_eq!(precision_at_n(&ranked, &cats, "A", 3).unwrap(), 0.0);
        assert!(matches!(
            precision_at_n(&ranked, &cats, "A", 4),
            Err(EvalError::CutoffTooLarge { n: 4, corpus: 3 })
        ));
    }

    #[test]
    fn ap_hand_cases() {
        let ranked: Vec<String> = ["r1", "n1", "r2", "n2"].iter().map(|s| s.to_string()).collect();
        let relevant: BTreeSet<String> = ["r1", "r2"].iter().map(|s| s.to_string()).collect();
        let ap = average_precision(&ranked, &relevant).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);

        let first: BTreeSet<String> = ["r1"].iter().map(|s| s.to_string()).collect();
        assert_eq!(average_precision(&ranked, &first).unwrap(), 1.0);
        assert_eq!(average_precision(&ranked, &BTreeSet::new()), None);
    }

    #[test]
    fn map_counts_excluded_queries() {
        let ranked: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let rel_a: BTreeSet<String> = ["a"].iter().map(|s| s.to_string()).collect();
        let report = mean_average_precision(&[
            (ranked.clone(), rel_a),
            (ranked, BTreeSet::new()),
        ])
        .unwrap();
        assert_eq!(report, MapReport { map: 1.0, included: 1, excluded: 1 });
    }

    #[test]
    fn slice_max_rules() {
        let text = unit(vec![1.0, 1.0]);
        let lone = vec![unit(vec![0.0, 1.0])];
        let direct = dot(&lone[0], &text);
        assert_eq!(slice_max_similarity(&lone, &text).unwrap(), direct);

        let mut slices = lone.clone();
        slices.push(text.clone());
        assert!((slice_max_similarity(&slices, &text).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = stream_rng(12, "slice-oracle", &[]);
        let many: Vec<Vec<f64>> = (0..100)
            .map(|_| unit((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let want = many.iter().map(|s| dot(s, &text)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(slice_max_similarity(&many, &text).unwrap(), want);
    }
}
