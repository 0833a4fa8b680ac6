//! Ranking, top-percentile selection, and the baseline selectors.
//!
//! Everything here is pure over immutable inputs. The ordering contract is a
//! deterministic total order: descending by key, ties broken by ascending
//! entry id, so shuffling the input changes nothing and reruns are
//! byte-identical.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::scoring::{Rational, ScoreCard};

/// Ranking key over a scored card. `MeanIt` is the joint image+text
/// baseline, the plain mean of the two unimodal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    Composite,
    SI,
    ST,
    MeanIt,
}

impl RankKey {
    pub fn extract(self, card: &ScoreCard) -> Rational {
        match self {
            RankKey::Composite => card.composite,
            RankKey::SI => card.s_i,
            RankKey::ST => card.s_t,
            RankKey::MeanIt => (card.s_i + card.s_t) / Rational::from_int(2),
        }
    }
}

/// Selection strategy. `Scale` ranks on the full composite score; the
/// others are the baselines it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Scale,
    Random,
    Iqa,
    Tqa,
    Itqa,
    EmbedSim,
}

impl Strategy {
    /// The ranking key for key-based strategies; None for random/embedding.
    pub fn rank_key(self) -> Option<RankKey> {
        match self {
            Strategy::Scale => Some(RankKey::Composite),
            Strategy::Iqa => Some(RankKey::SI),
            Strategy::Tqa => Some(RankKey::ST),
            Strategy::Itqa => Some(RankKey::MeanIt),
            Strategy::Random | Strategy::EmbedSim => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Scale => "scale",
            Strategy::Random => "random",
            Strategy::Iqa => "iqa",
            Strategy::Tqa => "tqa",
            Strategy::Itqa => "itqa",
            Strategy::EmbedSim => "embed_sim",
        }
    }
}

/// Image/text embedding vectors for one entry, used by the similarity
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPair {
    pub entry_id: String,
    pub image_vec: Vec<f64>,
    pub text_vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("percentile must lie in (0, 1], got {0}")]
    BadPercentile(f64),
    #[error("nothing to select from")]
    EmptyInput,
    #[error("vectors must have the same nonzero dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding for entry {0} is invalid: {1}")]
    BadEmbedding(String, String),
}

/// Ordered ids with their keys, plus the count of adjacent equal-key pairs
/// that were settled by the id tie-break.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking<K> {
    pub ordered: Vec<(String, K)>,
    pub tie_break_events: u64,
}

fn rank_by<K: Clone + PartialOrd>(mut items: Vec<(String, K)>) -> Ranking<K> {
    items.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("ranking keys are totally ordered")
            .then_with(|| a.0.cmp(&b.0))
    });
    let tie_break_events = items
        .windows(2)
        .filter(|pair| pair[0].1 == pair[1].1)
        .count() as u64;
    Ranking { ordered: items, tie_break_events }
}

/// Stable descending sort of cards by the chosen key; ties broken by
/// ascending entry id.
pub fn rank(cards: &[ScoreCard], key: RankKey) -> Ranking<Rational> {
    rank_by(
        cards
            .iter()
            .map(|card| (card.entry_id.clone(), key.extract(card)))
            .collect(),
    )
}

/// Number of entries a fraction `p` of `n` selects: ceil(p * n), computed
/// exactly. Never zero for p > 0 and n > 0.
pub fn selection_count(n: usize, p: Rational) -> usize {
    let numer = p.numer() as i128 * n as i128;
    let denom = p.denom() as i128;
    ((numer + denom - 1) / denom) as usize
}

fn validate_percentile(p: Rational) -> Result<(), SelectionError> {
    if p <= Rational::zero() || p > Rational::one() {
        return Err(SelectionError::BadPercentile(p.to_f64()));
    }
    Ok(())
}

/// Outcome of one selection run: the ordered selected ids plus the strategy,
/// its parameters, and the tie-break trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub params: BTreeMap<String, Value>,
    pub selected_ids: Vec<String>,
    pub cutoff_score: Option<Rational>,
    pub tie_break_events: u64,
}

/// Takes the first ceil(p*N) ids from a ranking.
pub fn select_top(
    ranking: &Ranking<Rational>,
    p: Rational,
    strategy: Strategy,
) -> Result<SelectionResult, SelectionError> {
    validate_percentile(p)?;
    if ranking.ordered.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    let count = selection_count(ranking.ordered.len(), p);
    let selected = &ranking.ordered[..count];
    let mut params = BTreeMap::new();
    params.insert("percentile".to_string(), Value::String(p.to_string()));
    Ok(SelectionResult {
        strategy,
        params,
        selected_ids: selected.iter().map(|(id, _)| id.clone()).collect(),
        cutoff_score: selected.last().map(|(_, key)| *key),
        tie_break_events: ranking.tie_break_events,
    })
}

/// Ranks cards by a key-based strategy and selects the top fraction.
pub fn select_by_key(
    cards: &[ScoreCard],
    key: RankKey,
    p: Rational,
    strategy: Strategy,
) -> Result<SelectionResult, SelectionError> {
    if cards.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    select_top(&rank(cards, key), p, strategy)
}

/// Uniform sample without replacement of ceil(p*N) ids, deterministic for a
/// given seed. The selected ids are reported in ascending id order.
pub fn select_random(
    ids: &[String],
    p: Rational,
    seed: u64,
) -> Result<SelectionResult, SelectionError> {
    validate_percentile(p)?;
    if ids.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let count = selection_count(sorted.len(), p);

    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, sorted.len(), count);
    let mut selected_ids: Vec<String> =
        chosen.iter().map(|i| sorted[i].clone()).collect();
    selected_ids.sort();

    let mut params = BTreeMap::new();
    params.insert("percentile".to_string(), Value::String(p.to_string()));
    params.insert("seed".to_string(), Value::from(seed));
    Ok(SelectionResult {
        strategy: Strategy::Random,
        params,
        selected_ids,
        cutoff_score: None,
        tie_break_events: 0,
    })
}

/// Cosine similarity `u . v / (|u| |v|)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SelectionError> {
    if u.len() != v.len() || u.is_empty() {
        return Err(SelectionError::DimensionMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0;
    let mut norm_u = 0.0;
    let mut norm_v = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        norm_u += a * a;
        norm_v += b * b;
    }
    if norm_u == 0.0 || norm_v == 0.0 {
        return Err(SelectionError::ZeroVector);
    }
    Ok(dot / (norm_u.sqrt() * norm_v.sqrt()))
}

/// Ranks by descending image-text cosine similarity and selects the top
/// fraction. Candidates must come with valid embeddings; filtering out the
/// ones that lack embeddings (and counting them) is the caller's job.
pub fn select_embed_sim(
    pairs: &[EmbeddingPair],
    p: Rational,
) -> Result<SelectionResult, SelectionError> {
    validate_percentile(p)?;
    if pairs.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    let mut keyed = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let sim = cosine_similarity(&pair.image_vec, &pair.text_vec)
            .map_err(|e| SelectionError::BadEmbedding(pair.entry_id.clone(), e.to_string()))?;
        keyed.push((pair.entry_id.clone(), OrderedF64(sim)));
    }
    let ranking = rank_by(keyed);
    let count = selection_count(ranking.ordered.len(), p);
    let selected = &ranking.ordered[..count];
    let mut params = BTreeMap::new();
    params.insert("percentile".to_string(), Value::String(p.to_string()));
    Ok(SelectionResult {
        strategy: Strategy::EmbedSim,
        params,
        selected_ids: selected.iter().map(|(id, _)| id.clone()).collect(),
        cutoff_score: None,
        tie_break_events: ranking.tie_break_events,
    })
}

/// Total-ordered f64 wrapper for ranking similarity scores.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedF64(f64);

impl PartialOrd for OrderedF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.0.total_cmp(&other.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating::{ImageScores, MultimodalScores, TextScores};
    use crate::scoring::{build_scorecard, Weights};
    use crate::taxonomy::{SubTask, TaskLabel};
    use std::collections::BTreeSet;

    fn card_with(entry_id: &str, text: (u8, u8, u8), image: (u8, u8), mm: (u8, u8, u8)) -> ScoreCard {
        build_scorecard(
            entry_id,
            Some(TextScores { info: text.0, cpxt: text.1, cplt: text.2 }),
            Some(ImageScores { blur: image.0, noise: image.1 }),
            Some(MultimodalScores { clr: mm.0, rel: mm.1, tr: mm.2 }),
            Some(TaskLabel::from_sub_task(SubTask::ImageScene)),
            Weights::default(),
            BTreeSet::new(),
        )
        .unwrap()
    }

    #[test]
    fn rank_sorts_descending_by_composite() {
        // A: 5, B: 2.6 (0.2*3+0.2*4+0.6*2), C: 4
        let cards = vec![
            card_with("B", (4, 4, 4), (3, 3), (2, 2, 2)),
            card_with("A", (5, 5, 5), (5, 5), (5, 5, 5)),
            card_with("C", (4, 4, 4), (4, 4), (4, 4, 4)),
        ];
        let ranking = rank(&cards, RankKey::Composite);
        let ids: Vec<&str> = ranking.ordered.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["A", "C", "B"]);
        assert_eq!(ranking.ordered[2].1, Rational::new(13, 5));
    }

    #[test]
    fn equal_keys_fall_back_to_id_order() {
        let cards = vec![
            card_with("C", (4, 4, 4), (4, 4), (4, 4, 4)),
            card_with("A", (4, 4, 4), (4, 4), (4, 4, 4)),
            card_with("B", (4, 4, 4), (4, 4), (4, 4, 4)),
        ];
        let ranking = rank(&cards, RankKey::Composite);
        let ids: Vec<&str> = ranking.ordered.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["A", "B", "C"]);
        assert_eq!(ranking.tie_break_events, 2);
    }

    #[test]
    fn mean_it_key_orders_by_unimodal_mean() {
        // A: s_i=4, s_t=2 -> 3; B: s_i=3, s_t=5 -> 4.
        let cards = vec![
            card_with("A", (2, 2, 2), (4, 4), (0, 0, 0)),
            card_with("B", (5, 5, 5), (3, 3), (0, 0, 0)),
        ];
        let ranking = rank(&cards, RankKey::MeanIt);
        let ids: Vec<&str> = ranking.ordered.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["B", "A"]);
        assert_eq!(ranking.ordered[0].1, Rational::from_int(4));
        assert_eq!(ranking.ordered[1].1, Rational::from_int(3));
    }

    #[test]
    fn selection_count_is_ceil() {
        let ten_percent = Rational::new(1, 10);
        assert_eq!(selection_count(100, ten_percent), 10);
        assert_eq!(selection_count(7, ten_percent), 1);
        assert_eq!(selection_count(5, Rational::one()), 5);
        assert_eq!(selection_count(11, ten_percent), 2);
    }

    #[test]
    fn select_top_takes_prefix_and_cutoff() {
        let cards: Vec<ScoreCard> = (0..10)
            .map(|i| card_with(&format!("e{i}"), (i as u8 % 6, 0, 0), (0, 0), (0, 0, 0)))
            .collect();
        let result = select_by_key(&cards, RankKey::Composite, Rational::new(1, 10), Strategy::Scale)
            .unwrap();
        assert_eq!(result.selected_ids.len(), 1);
        assert_eq!(result.selected_ids[0], "e5");
        assert_eq!(result.cutoff_score, Some(Rational::new(1, 3)));
    }

    #[test]
    fn bad_percentile_is_rejected() {
        let ranking = Ranking { ordered: vec![("a".to_string(), Rational::one())], tie_break_events: 0 };
        assert!(select_top(&ranking, Rational::zero(), Strategy::Scale).is_err());
        assert!(select_top(&ranking, Rational::new(11, 10), Strategy::Scale).is_err());
        assert!(select_top(&ranking, Rational::new(-1, 10), Strategy::Scale).is_err());
    }

    #[test]
    fn random_selection_is_seed_deterministic() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let p = Rational::new(3, 10);
        let first = select_random(&ids, p, 42).unwrap();
        let second = select_random(&ids, p, 42).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.selected_ids.len(), 3);

        let all = select_random(&ids, Rational::one(), 7).unwrap();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(all.selected_ids, sorted);
    }

    #[test]
    fn random_selection_covers_everything_across_seeds() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let p = Rational::new(3, 10);
        let mut seen = BTreeSet::new();
        for seed in 0..200 {
            let result = select_random(&ids, p, seed).unwrap();
            seen.extend(result.selected_ids);
        }
        assert_eq!(seen.len(), ids.len());
    }

    #[test]
    fn cosine_hand_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // |u| = |v| = 3, dot = 8.
        assert_eq!(
            cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(),
            8.0 / 9.0
        );
    }

    #[test]
    fn cosine_contract_violations() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(SelectionError::DimensionMismatch(1, 2))
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(SelectionError::ZeroVector)
        ));
        assert!(cosine_similarity(&[], &[]).is_err());
    }

    #[test]
    fn embed_sim_ranks_by_similarity() {
        // sims: A ~0.9.., B 0, C ~0.707
        let pairs = vec![
            EmbeddingPair { entry_id: "B".into(), image_vec: vec![1.0, 0.0], text_vec: vec![0.0, 1.0] },
            EmbeddingPair { entry_id: "A".into(), image_vec: vec![1.0, 2.0, 2.0], text_vec: vec![2.0, 1.0, 2.0] },
            EmbeddingPair { entry_id: "C".into(), image_vec: vec![1.0, 0.0], text_vec: vec![1.0, 1.0] },
        ];
        let result = select_embed_sim(&pairs, Rational::new(1, 3)).unwrap();
        assert_eq!(result.selected_ids, ["A"]);

        let all_equal = vec![
            EmbeddingPair { entry_id: "z".into(), image_vec: vec![1.0], text_vec: vec![1.0] },
            EmbeddingPair { entry_id: "a".into(), image_vec: vec![2.0], text_vec: vec![2.0] },
            EmbeddingPair { entry_id: "m".into(), image_vec: vec![3.0], text_vec: vec![3.0] },
        ];
        let result = select_embed_sim(&all_equal, Rational::new(2, 3)).unwrap();
        assert_eq!(result.selected_ids, ["a", "m"]);
        assert_eq!(result.tie_break_events, 2);
    }

    #[test]
    fn shuffling_input_does_not_change_selection() {
        use rand::seq::SliceRandom;
        let mut cards: Vec<ScoreCard> = (0..30)
            .map(|i| {
                card_with(
                    &format!("e{i:02}"),
                    (i as u8 % 6, (i / 2) as u8 % 6, 3),
                    ((i / 3) as u8 % 6, 2),
                    (i as u8 % 6, 4, (i / 4) as u8 % 6),
                )
            })
            .collect();
        let p = Rational::new(3, 10);
        let baseline = select_by_key(&cards, RankKey::Composite, p, Strategy::Scale).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        for _ in 0..5 {
            cards.shuffle(&mut rng);
            let shuffled = select_by_key(&cards, RankKey::Composite, p, Strategy::Scale).unwrap();
            assert_eq!(shuffled, baseline);
        }
    }

    #[test]
    fn selected_keys_dominate_unselected() {
        let cards: Vec<ScoreCard> = (0..37)
            .map(|i| {
                card_with(
                    &format!("e{i:02}"),
                    ((i * 7) as u8 % 6, (i * 3) as u8 % 6, (i * 5) as u8 % 6),
                    ((i * 2) as u8 % 6, (i * 11) as u8 % 6),
                    ((i * 13) as u8 % 6, i as u8 % 6, (i * 4) as u8 % 6),
                )
            })
            .collect();
        let p = Rational::new(1, 4);
        let result = select_by_key(&cards, RankKey::Composite, p, Strategy::Scale).unwrap();
        let selected: BTreeSet<&String> = result.selected_ids.iter().collect();
        let min_selected = cards
            .iter()
            .filter(|c| selected.contains(&c.entry_id))
            .map(|c| c.composite)
            .min()
            .unwrap();
        let max_unselected = cards
            .iter()
            .filter(|c| !selected.contains(&c.entry_id))
            .map(|c| c.composite)
            .max()
            .unwrap();
        assert!(min_selected >= max_unselected);
    }
}
