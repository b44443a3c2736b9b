//! All-rank top-N evaluation.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, UserItems};
use crate::error::{Error, Result};
use crate::propagation::LayerStack;
use crate::sparse::Matrix;

/// Headline cutoff.
pub const DEFAULT_N: usize = 20;

const USER_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub user: usize,
    pub ranked_items: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Which train edges are masked before ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    #[default]
    BothViews,
    IfOnly,
    Nothing,
}

impl FromStr for ExclusionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" | "both_views" => Ok(Self::BothViews),
            "if" | "if_only" => Ok(Self::IfOnly),
            "none" | "nothing" => Ok(Self::Nothing),
            _ => Err(Error::Config(format!("unknown exclusion policy {s:?} (both|if|none)"))),
        }
    }
}

/// Which test edges count as relevant for the headline numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    #[default]
    If,
    Iu,
    All,
}

impl FromStr for Relevance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "if" => Ok(Self::If),
            "iu" => Ok(Self::Iu),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown relevance {s:?} (if|iu|all)"))),
        }
    }
}

impl fmt::Display for Relevance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::If => "if",
            Self::Iu => "iu",
            Self::All => "all",
        })
    }
}

/// Score order: higher first, then lower item index.
fn ranking_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn top_n(scores: impl Iterator<Item = (f64, u32)>, n: usize) -> (Vec<u32>, Vec<f64>) {
    let mut cands: Vec<(f64, u32)> = scores.collect();
    if n < cands.len() {
        cands.select_nth_unstable_by(n, ranking_order);
        cands.truncate(n);
    }
    cands.sort_unstable_by(ranking_order);
    cands.into_iter().map(|(s, i)| (i, s)).unzip()
}

/// Ranks every item for each of `users` by `user_rows · item_rowsᵀ`,
/// masking items found in any of `exclude`.
pub fn rank_users(
    user_rows: &Matrix,
    item_rows: &Matrix,
    users: &[usize],
    exclude: &[&UserItems],
    n: usize,
) -> Result<Vec<RankingResult>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cutoff n must be >= 1".into()));
    }
    if user_rows.ncols() != item_rows.ncols() {
        return Err(Error::Dimension("user and item widths differ".into()));
    }
    if let Some(&u) = users.iter().find(|&&u| u >= user_rows.nrows()) {
        return Err(Error::OutOfRange(format!("user {u} of {}", user_rows.nrows())));
    }
    let num_items = item_rows.nrows();
    let blocks: Vec<&[usize]> = users.chunks(USER_BLOCK).collect();
    let per_block: Vec<Vec<RankingResult>> = blocks
        .par_iter()
        .map(|block| {
            let u = user_rows.select(Axis(0), block);
            let scores = u.dot(&item_rows.t());
            block
                .iter()
                .zip(scores.axis_iter(Axis(0)))
                .map(|(&user, row)| {
                    let masked = |i: u32| exclude.iter().any(|e| user < e.num_users() && e.contains(user, i));
                    let iter = (0..num_items as u32).filter(|&i| !masked(i)).map(|i| (row[i as usize], i));
                    let (ranked_items, scores) = top_n(iter, n);
                    RankingResult { user, ranked_items, scores }
                })
                .collect()
        })
        .collect();
    let results: Vec<RankingResult> = per_block.into_iter().flatten().collect();
    let short = results.iter().filter(|r| r.ranked_items.len() < n).count();
    if short > 0 {
        log::warn!("{short} user(s) have fewer than {n} unmasked items; returning all of them");
    }
    Ok(results)
}

/// Users with at least one test edge in either view, ascending.
pub fn test_users(dataset: &InteractionDataset) -> Vec<usize> {
    let mut users: Vec<usize> = dataset.test_if.iter().chain(&dataset.test_iu).map(|&(u, _)| u as usize).collect();
    users.sort_unstable();
    users.dedup();
    users
}

/// Ranks all items for every test user using the combined representation.
pub fn rank_all(
    stack: &LayerStack,
    dataset: &InteractionDataset,
    n: usize,
    exclude: ExclusionPolicy,
) -> Result<Vec<RankingResult>> {
    rank_for(stack, dataset, &test_users(dataset), n, exclude)
}

/// Like [`rank_all`] for an explicit list of dense user ids.
pub fn rank_for(
    stack: &LayerStack,
    dataset: &InteractionDataset,
    users: &[usize],
    n: usize,
    exclude: ExclusionPolicy,
) -> Result<Vec<RankingResult>> {
    let m = stack.num_users;
    if m != dataset.num_users || stack.num_items() != dataset.num_items {
        return Err(Error::Dimension(format!(
            "embeddings cover {m}x{} but dataset has {}x{}",
            stack.num_items(),
            dataset.num_users,
            dataset.num_items
        )));
    }
    let users_m = stack.combined.slice(s![..m, ..]).to_owned();
    let items_m = stack.combined.slice(s![m.., ..]).to_owned();
    let train_if = UserItems::from_edges(m, &dataset.train_if);
    let train_iu = UserItems::from_edges(m, &dataset.train_iu);
    let masks: Vec<&UserItems> = match exclude {
        ExclusionPolicy::BothViews => vec![&train_if, &train_iu],
        ExclusionPolicy::IfOnly => vec![&train_if],
        ExclusionPolicy::Nothing => vec![],
    };
    rank_users(&users_m, &items_m, users, &masks, n)
}

fn hits<'a>(result: &'a RankingResult, relevant: &'a UserItems, n: usize) -> impl Iterator<Item = usize> + 'a {
    let rel_user = result.user;
    result
        .ranked_items
        .iter()
        .take(n)
        .enumerate()
        .filter(move |&(_, &i)| relevant.contains(rel_user, i))
        .map(|(r, _)| r)
}

fn relevant_count(relevant: &UserItems, user: usize) -> usize {
    if user < relevant.num_users() {
        relevant.items_of(user).len()
    } else {
        0
    }
}

/// Mean of `f` over users with a nonempty relevant set; `None` when there
/// are no such users.
fn mean_over_relevant(results: &[RankingResult], relevant: &UserItems, f: impl Fn(&RankingResult, usize) -> f64) -> Option<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for r in results {
        let k = relevant_count(relevant, r.user);
        if k > 0 {
            total += f(r, k);
            count += 1;
        }
    }
    (count > 0).then(|| (total / count as f64, count))
}

fn recall_of(results: &[RankingResult], relevant: &UserItems, n: usize) -> Option<(f64, usize)> {
    mean_over_relevant(results, relevant, |r, k| hits(r, relevant, n).count() as f64 / k as f64)
}

fn ndcg_of(results: &[RankingResult], relevant: &UserItems, n: usize) -> Option<(f64, usize)> {
    mean_over_relevant(results, relevant, |r, k| {
        let dcg: f64 = hits(r, relevant, n).map(|rank| 1.0 / ((rank + 2) as f64).log2()).sum();
        let idcg: f64 = (0..n.min(k)).map(|rank| 1.0 / ((rank + 2) as f64).log2()).sum();
        dcg / idcg
    })
}

/// Recall@n; 0 when no user has a relevant item.
pub fn recall_at_n(results: &[RankingResult], relevant: &UserItems, n: usize) -> f64 {
    recall_of(results, relevant, n).map_or(0.0, |(v, _)| v)
}

/// Binary-relevance NDCG@n; 0 when no user has a relevant item.
pub fn ndcg_at_n(results: &[RankingResult], relevant: &UserItems, n: usize) -> f64 {
    ndcg_of(results, relevant, n).map_or(0.0, |(v, _)| v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall_at_n: f64,
    pub ndcg_at_n: f64,
    pub num_users: usize,
}

fn class_metrics(results: &[RankingResult], relevant: &UserItems, n: usize) -> Option<ClassMetrics> {
    let (recall_at_n, num_users) = recall_of(results, relevant, n)?;
    let (ndcg_at_n, _) = ndcg_of(results, relevant, n)?;
    Some(ClassMetrics { recall_at_n, ndcg_at_n, num_users })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub relevant: Relevance,
    pub recall_at_n: f64,
    pub ndcg_at_n: f64,
    pub num_evaluated_users: usize,
    /// Against I&F test edges (higher is better). `None` if that class has
    /// no test edges.
    pub fascinated: Option<ClassMetrics>,
    /// Against I&U test edges (lower is better).
    pub unfascinated: Option<ClassMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "n,relevant,recall_at_n,ndcg_at_n,num_evaluated_users,fascinated_recall,fascinated_ndcg,unfascinated_recall,unfascinated_ndcg"
    }

    pub fn csv_row(&self) -> String {
        let opt = |c: Option<ClassMetrics>, f: fn(ClassMetrics) -> f64| c.map(|c| f(c).to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n,
            self.relevant,
            self.recall_at_n,
            self.ndcg_at_n,
            self.num_evaluated_users,
            opt(self.fascinated, |c| c.recall_at_n),
            opt(self.fascinated, |c| c.ndcg_at_n),
            opt(self.unfascinated, |c| c.recall_at_n),
            opt(self.unfascinated, |c| c.ndcg_at_n),
        )
    }
}

/// Fascinated and unfascinated metrics on the same rankings.
pub fn feedback_breakdown(results: &[RankingResult], dataset: &InteractionDataset, n: usize, headline: Relevance) -> MetricsReport {
    let m = dataset.num_users;
    let test_if = UserItems::from_edges(m, &dataset.test_if);
    let test_iu = UserItems::from_edges(m, &dataset.test_iu);
    let fascinated = class_metrics(results, &test_if, n);
    let unfascinated = class_metrics(results, &test_iu, n);
    let main = match headline {
        Relevance::If => fascinated,
        Relevance::Iu => unfascinated,
        Relevance::All => {
            let all = UserItems::from_edges(m, dataset.test_if.iter().chain(&dataset.test_iu));
            class_metrics(results, &all, n)
        }
    };
    if fascinated.is_none() {
        log::warn!("no fascinated test edges; class reported absent");
    }
    if unfascinated.is_none() {
        log::warn!("no unfascinated test edges; class reported absent");
    }
    MetricsReport {
        n,
        relevant: headline,
        recall_at_n: main.map_or(0.0, |c| c.recall_at_n),
        ndcg_at_n: main.map_or(0.0, |c| c.ndcg_at_n),
        num_evaluated_users: main.map_or(0, |c| c.num_users),
        fascinated,
        unfascinated,
    }
}

/// `rank_all` followed by `feedback_breakdown`.
pub fn evaluate(
    stack: &LayerStack,
    dataset: &InteractionDataset,
    n: usize,
    exclude: ExclusionPolicy,
    headline: Relevance,
) -> Result<MetricsReport> {
    let results = rank_all(stack, dataset, n, exclude)?;
    Ok(feedback_breakdown(&results, dataset, n, headline))
}
