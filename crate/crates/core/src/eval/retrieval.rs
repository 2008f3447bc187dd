use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rank_by, Descriptors, EvalReport};
use crate::ranking::{exact_ap, RankedList};
use crate::{Error, Result};

/// Which non-matching items enter a query's database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPolicy {
    /// Only patches from other sequences.
    OutOfSequenceOnly,
    /// Only patches from the query's own sequence.
    InSequenceOnly,
    All,
}

/// Queries and per-query databases over rows of a descriptor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalProtocol {
    policy: DistractorPolicy,
    queries: Vec<usize>,
    databases: Vec<Vec<usize>>,
    groups: Vec<usize>,
}

impl RetrievalProtocol {
    /// `groups[r]` and `sequences[r]` label row `r`. Every other row of the
    /// query's group is a match; distractors are filtered by `policy`.
    pub fn new(groups: &[usize], sequences: &[usize], queries: &[usize], policy: DistractorPolicy) -> Result<Self> {
        if groups.len() != sequences.len() {
            return Err(Error::Shape("group and sequence labels differ in length".into()));
        }
        let mut databases = Vec::with_capacity(queries.len());
        for &q in queries {
            if q >= groups.len() {
                return Err(Error::Range(format!("query row {q} out of range")));
            }
            let db: Vec<usize> = (0..groups.len())
                .filter(|&r| {
                    if r == q {
                        return false;
                    }
                    if groups[r] == groups[q] {
                        return true;
                    }
                    let same_seq = sequences[r] == sequences[q];
                    match policy {
                        DistractorPolicy::OutOfSequenceOnly => !same_seq,
                        DistractorPolicy::InSequenceOnly => same_seq,
                        DistractorPolicy::All => true,
                    }
                })
                .collect();
            if !db.iter().any(|&r| groups[r] == groups[q]) {
                return Err(Error::Precondition(format!("query row {q} has no match in its database")));
            }
            databases.push(db);
        }
        Ok(Self {
            policy,
            queries: queries.to_vec(),
            databases,
            groups: groups.to_vec(),
        })
    }

    /// Uses every row that has at least one other row in its group as a query.
    pub fn all_queries(groups: &[usize], sequences: &[usize], policy: DistractorPolicy) -> Result<Self> {
        let mut count = std::collections::HashMap::new();
        for &g in groups {
            *count.entry(g).or_insert(0usize) += 1;
        }
        let queries: Vec<usize> = (0..groups.len()).filter(|&r| count[&groups[r]] >= 2).collect();
        if queries.is_empty() {
            return Err(Error::Precondition("no row has a match".into()));
        }
        Self::new(groups, sequences, &queries, policy)
    }

    pub fn policy(&self) -> DistractorPolicy {
        self.policy
    }

    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    pub fn database(&self, k: usize) -> &[usize] {
        &self.databases[k]
    }
}

pub fn retrieval_map(protocol: &RetrievalProtocol, desc: &Descriptors) -> Result<EvalReport> {
    if protocol.groups.len() != desc.len() {
        return Err(Error::Shape(format!("protocol covers {} rows, descriptors have {}", protocol.groups.len(), desc.len())));
    }
    let aps = protocol
        .queries
        .par_iter()
        .zip(&protocol.databases)
        .map(|(&q, db)| {
            let d: Vec<f64> = db.iter().map(|&r| desc.distance(q, r)).collect();
            let flags = rank_by(&d).into_iter().map(|k| protocol.groups[db[k]] == protocol.groups[q]).collect();
            exact_ap(&RankedList::new(flags)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let mut report = EvalReport::new("retrieval");
    report.set("map", map);
    report.set("queries", aps.len() as f64);
    report.per_query_ap = aps;
    report.config = serde_json::json!({ "distractor_policy": protocol.policy });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicated_groups_are_perfect() {
        let d = Descriptors::euclidean(array![[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
        let p = RetrievalProtocol::all_queries(&[0, 0, 1, 1], &[0, 0, 0, 0], DistractorPolicy::All).unwrap();
        assert_eq!(retrieval_map(&p, &d).unwrap().metric("map"), Some(1.0));
    }

    #[test]
    fn policies_filter_distractors() {
        let groups = [0, 0, 1, 2];
        let seqs = [0, 0, 0, 1];
        let p = RetrievalProtocol::new(&groups, &seqs, &[0], DistractorPolicy::InSequenceOnly).unwrap();
        assert_eq!(p.database(0), &[1, 2]);
        let p = RetrievalProtocol::new(&groups, &seqs, &[0], DistractorPolicy::OutOfSequenceOnly).unwrap();
        assert_eq!(p.database(0), &[1, 3]);
        assert!(RetrievalProtocol::new(&groups, &seqs, &[2], DistractorPolicy::All).is_err());
    }

    /// Expected AP of 2 relevant items among 10 under a uniformly random
    /// order: average over all 45 position pairs.
    fn random_order_expectation() -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for a in 0..10 {
            for b in a + 1..10 {
                total += (1.0 / (a + 1) as f64 + 2.0 / (b + 1) as f64) / 2.0;
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn random_embeddings_match_random_ranking_expectation() {
        // One query group of 3 (query + 2 matches) plus 8 singleton distractors.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let groups: Vec<usize> = [0, 0, 0].into_iter().chain(1..9).collect();
        let seqs = vec![0; groups.len()];
        let p = RetrievalProtocol::new(&groups, &seqs, &[0], DistractorPolicy::All).unwrap();
        let trials = 4000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let d = Descriptors::euclidean(Array2::from_shape_fn((11, 4), |_| rng.random_range(-1.0..1.0)));
            sum += retrieval_map(&p, &d).unwrap().metric("map").unwrap();
        }
        let expect = random_order_expectation();
        assert!((sum / trials as f64 - expect).abs() < 0.015, "{} vs {expect}", sum / trials as f64);
    }

    #[test]
    fn in_sequence_distractors_are_harder() {
        // Two sequences; hard distractors sit next to the query inside its sequence.
        let d = Descriptors::euclidean(array![[0.0, 0.0], [0.3, 0.0], [0.2, 0.1], [0.1, 0.25], [5.0, 5.0], [5.0, 6.0]]);
        let groups = [0, 0, 1, 2, 3, 4];
        let seqs = [0, 0, 0, 0, 1, 1];
        let map = |policy| {
            let p = RetrievalProtocol::new(&groups, &seqs, &[0, 1], policy).unwrap();
            retrieval_map(&p, &d).unwrap().metric("map").unwrap()
        };
        let (inside, outside) = (map(DistractorPolicy::InSequenceOnly), map(DistractorPolicy::OutOfSequenceOnly));
        assert!(inside < outside);
        assert_eq!(outside, 1.0);
    }
}
