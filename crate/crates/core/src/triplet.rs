//! Triplet construction and the triplet margin loss.
//!
//! Miners are generic over the reference type `R` (anything ordered, e.g. an
//! [`UtteranceRef`] or a batch index) and the label type `L`. Output order is
//! always derived from the reference order, so results are reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TripletError {
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("pool needs two labels and a label with two members")]
    InsufficientDiversity,
    #[error("margin must be strictly positive, got {0}")]
    BadMargin(f64),
    #[error("unknown distance `{0}`")]
    UnknownDistance(String),
    #[error("unknown sampling strategy `{0}`")]
    UnknownStrategy(String),
}

pub type Result<T, E = TripletError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    CosineDistance,
}

impl FromStr for Distance {
    type Err = TripletError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" | "cosine-distance" => Ok(Distance::CosineDistance),
            other => Err(TripletError::UnknownDistance(other.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    WeightedRandom,
    #[default]
    BatchAll,
    BatchHard,
}

impl FromStr for SamplingStrategy {
    type Err = TripletError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-random" => Ok(SamplingStrategy::WeightedRandom),
            "batch-all" => Ok(SamplingStrategy::BatchAll),
            "batch-hard" => Ok(SamplingStrategy::BatchHard),
            other => Err(TripletError::UnknownStrategy(other.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletLossConfig {
    pub margin: f64,
    pub distance: Distance,
}

impl TripletLossConfig {
    pub fn new(margin: f64, distance: Distance) -> Result<Self> {
        if margin > 0.0 && margin.is_finite() {
            Ok(Self { margin, distance })
        } else {
            Err(TripletError::BadMargin(margin))
        }
    }
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            distance: Distance::Euclidean,
        }
    }
}

/// Reference to an utterance: dialog id plus position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UtteranceRef {
    pub dialog_id: String,
    pub index: usize,
}

impl fmt::Display for UtteranceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.dialog_id, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet<R> {
    pub anchor: R,
    pub positive: R,
    pub negative: R,
}

impl<R> Triplet<R> {
    pub fn map<S>(self, mut f: impl FnMut(R) -> S) -> Triplet<S> {
        Triplet {
            anchor: f(self.anchor),
            positive: f(self.positive),
            negative: f(self.negative),
        }
    }
}

fn check_dims(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<()> {
    if x.len() == y.len() {
        Ok(())
    } else {
        Err(TripletError::DimMismatch(x.len(), y.len()))
    }
}

pub fn distance(x: ArrayView1<f64>, y: ArrayView1<f64>, kind: Distance) -> Result<f64> {
    check_dims(x, y)?;
    match kind {
        Distance::Euclidean => Ok((&x - &y).mapv(|v| v * v).sum().sqrt()),
        Distance::CosineDistance => {
            let nx = x.dot(&x).sqrt();
            let ny = y.dot(&y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(TripletError::ZeroVector);
            }
            Ok((1.0 - x.dot(&y) / (nx * ny)).max(0.0))
        }
    }
}

/// Gradient of `distance(x, y)` with respect to `x`. At coincident points
/// the Euclidean subgradient 0 is used.
fn distance_grad_x(x: ArrayView1<f64>, y: ArrayView1<f64>, kind: Distance) -> Result<Array1<f64>> {
    match kind {
        Distance::Euclidean => {
            let diff = &x - &y;
            let d = diff.dot(&diff).sqrt();
            if d == 0.0 {
                Ok(Array1::zeros(x.len()))
            } else {
                Ok(diff / d)
            }
        }
        Distance::CosineDistance => {
            let nx = x.dot(&x).sqrt();
            let ny = y.dot(&y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(TripletError::ZeroVector);
            }
            let cos = x.dot(&y) / (nx * ny);
            Ok(-(&y / (nx * ny) - &x * (cos / (nx * nx))))
        }
    }
}

/// `max(d(a, p) - d(a, n) + margin, 0)`.
pub fn triplet_loss(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negative: ArrayView1<f64>,
    cfg: &TripletLossConfig,
) -> Result<f64> {
    check_dims(anchor, positive)?;
    check_dims(anchor, negative)?;
    let d_ap = distance(anchor, positive, cfg.distance)?;
    let d_an = distance(anchor, negative, cfg.distance)?;
    Ok((d_ap - d_an + cfg.margin).max(0.0))
}

/// Loss plus its gradients with respect to anchor, positive and negative.
#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub loss: f64,
    pub anchor: Array1<f64>,
    pub positive: Array1<f64>,
    pub negative: Array1<f64>,
}

impl TripletGrad {
    pub fn is_active(&self) -> bool {
        self.loss > 0.0
    }
}

pub fn triplet_loss_grad(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negative: ArrayView1<f64>,
    cfg: &TripletLossConfig,
) -> Result<TripletGrad> {
    let loss = triplet_loss(anchor, positive, negative, cfg)?;
    let dim = anchor.len();
    if loss <= 0.0 {
        return Ok(TripletGrad {
            loss,
            anchor: Array1::zeros(dim),
            positive: Array1::zeros(dim),
            negative: Array1::zeros(dim),
        });
    }
    // d(a,p) is symmetric, so d/dp d(a,p) = grad_x d(p, a)
    let ga_p = distance_grad_x(anchor, positive, cfg.distance)?;
    let gp = distance_grad_x(positive, anchor, cfg.distance)?;
    let ga_n = distance_grad_x(anchor, negative, cfg.distance)?;
    let gn = distance_grad_x(negative, anchor, cfg.distance)?;
    Ok(TripletGrad {
        loss,
        anchor: ga_p - ga_n,
        positive: gp,
        negative: -gn,
    })
}

/// Mean triplet loss over the active triplets of a batch of row vectors,
/// with the gradient w.r.t. every row.
#[derive(Debug, Clone)]
pub struct BatchTripletLoss {
    pub loss: f64,
    pub n_active: usize,
    pub n_total: usize,
    pub grad: Array2<f64>,
}

pub fn batch_triplet_loss(
    rows: &Array2<f64>,
    triplets: &[Triplet<usize>],
    cfg: &TripletLossConfig,
) -> Result<BatchTripletLoss> {
    let n = rows.nrows();
    let mut dist = Array2::from_elem((n, n), f64::NAN);
    let pair = |i: usize, j: usize, dist: &mut Array2<f64>| -> Result<f64> {
        if dist[[i, j]].is_nan() {
            let d = distance(rows.row(i), rows.row(j), cfg.distance)?;
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
        Ok(dist[[i, j]])
    };
    // coefficient of d(i, j) in the summed loss, stored with i < j
    let mut coef: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut total = 0.0;
    let mut n_active = 0;
    for t in triplets {
        let d_ap = pair(t.anchor, t.positive, &mut dist)?;
        let d_an = pair(t.anchor, t.negative, &mut dist)?;
        let l = d_ap - d_an + cfg.margin;
        if l > 0.0 {
            total += l;
            n_active += 1;
            let key = |a: usize, b: usize| (a.min(b), a.max(b));
            *coef.entry(key(t.anchor, t.positive)).or_default() += 1.0;
            *coef.entry(key(t.anchor, t.negative)).or_default() -= 1.0;
        }
    }
    let mut grad = Array2::zeros(rows.raw_dim());
    if n_active > 0 {
        let scale = 1.0 / n_active as f64;
        for ((i, j), c) in coef {
            if c == 0.0 {
                continue;
            }
            let gi = distance_grad_x(rows.row(i), rows.row(j), cfg.distance)?;
            let gj = distance_grad_x(rows.row(j), rows.row(i), cfg.distance)?;
            grad.row_mut(i).scaled_add(c * scale, &gi);
            grad.row_mut(j).scaled_add(c * scale, &gj);
        }
    }
    Ok(BatchTripletLoss {
        loss: if n_active > 0 { total / n_active as f64 } else { 0.0 },
        n_active,
        n_total: triplets.len(),
        grad,
    })
}

/// Checks the label constraints of a triplet.
pub fn is_valid_triplet<R: PartialEq, L: PartialEq>(t: &Triplet<R>, label: impl Fn(&R) -> L) -> bool {
    t.anchor != t.positive
        && label(&t.anchor) == label(&t.positive)
        && label(&t.anchor) != label(&t.negative)
}

fn sorted_pool<R: Ord + Clone, L: Clone>(pool: &[(R, L)]) -> Vec<(R, L)> {
    let mut v = pool.to_vec();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

fn has_diversity<L: Ord>(pool_labels: impl Iterator<Item = L>) -> bool {
    let mut counts: BTreeMap<L, usize> = BTreeMap::new();
    for l in pool_labels {
        *counts.entry(l).or_default() += 1;
    }
    counts.len() >= 2 && counts.values().any(|&c| c >= 2)
}

/// Draws `count` random triplets. Anchors are drawn item-wise with
/// probability proportional to `weights[label]`, so inverse-frequency
/// weights give every eligible class the same expected share. Positives and
/// negatives are uniform among valid candidates.
pub fn sample_triplets<R, L, G>(
    pool: &[(R, L)],
    count: usize,
    weights: &BTreeMap<L, f64>,
    rng: &mut G,
) -> Result<Vec<Triplet<R>>>
where
    R: Ord + Clone,
    L: Ord + Clone,
    G: Rng + ?Sized,
{
    let pool = sorted_pool(pool);
    if !has_diversity(pool.iter().map(|(_, l)| l)) {
        return Err(TripletError::InsufficientDiversity);
    }
    let mut members: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, (_, l)) in pool.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let item_weights: Vec<f64> = pool
        .iter()
        .map(|(_, l)| {
            if members[l].len() >= 2 {
                weights.get(l).copied().unwrap_or(0.0).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let anchors = WeightedIndex::new(&item_weights).map_err(|_| TripletError::InsufficientDiversity)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = anchors.sample(rng);
        let label = &pool[a].1;
        let same = &members[label];
        let anchor_pos = same.binary_search(&a).expect("anchor belongs to its class");
        let mut k = rng.random_range(0..same.len() - 1);
        if k >= anchor_pos {
            k += 1;
        }
        let p = same[k];
        let n_other = pool.len() - same.len();
        let mut k = rng.random_range(0..n_other);
        let mut negative = 0;
        for (i, (_, l)) in pool.iter().enumerate() {
            if l != label {
                if k == 0 {
                    negative = i;
                    break;
                }
                k -= 1;
            }
        }
        out.push(Triplet {
            anchor: pool[a].0.clone(),
            positive: pool[p].0.clone(),
            negative: pool[negative].0.clone(),
        });
    }
    Ok(out)
}

/// Every valid triplet of the batch, in lexicographic reference order.
pub fn batch_all_triplets<R, L>(batch: &[(R, L)]) -> Vec<Triplet<R>>
where
    R: Ord + Clone,
    L: PartialEq + Clone,
{
    let pool = sorted_pool(batch);
    let mut out = Vec::new();
    for (ai, (a, la)) in pool.iter().enumerate() {
        for (pi, (p, lp)) in pool.iter().enumerate() {
            if pi == ai || lp != la {
                continue;
            }
            for (n, ln) in &pool {
                if ln != la {
                    out.push(Triplet {
                        anchor: a.clone(),
                        positive: p.clone(),
                        negative: n.clone(),
                    });
                }
            }
        }
    }
    out
}

/// One triplet per anchor that has a positive: the farthest same-label item
/// and the nearest other-label item. Ties go to the lowest reference.
pub fn batch_hard_triplets<R, L>(
    batch: &[(R, L, ArrayView1<f64>)],
    cfg: &TripletLossConfig,
) -> Result<Vec<Triplet<R>>>
where
    R: Ord + Clone,
    L: Ord + Clone,
{
    let mut pool: Vec<&(R, L, ArrayView1<f64>)> = batch.iter().collect();
    pool.sort_by(|a, b| a.0.cmp(&b.0));
    let n_labels = {
        let mut ls: Vec<&L> = pool.iter().map(|e| &e.1).collect();
        ls.sort();
        ls.dedup();
        ls.len()
    };
    if n_labels < 2 {
        return Err(TripletError::InsufficientDiversity);
    }
    let mut out = Vec::new();
    for (ai, (a, la, va)) in pool.iter().map(|e| (&e.0, &e.1, &e.2)).enumerate() {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut nearest_neg: Option<(usize, f64)> = None;
        for (j, (_, l, v)) in pool.iter().map(|e| (&e.0, &e.1, &e.2)).enumerate() {
            if j == ai {
                continue;
            }
            let d = distance(va.view(), v.view(), cfg.distance)?;
            if l == la {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if nearest_neg.is_none_or(|(_, best)| d < best) {
                nearest_neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (hardest_pos, nearest_neg) {
            out.push(Triplet {
                anchor: a.clone(),
                positive: pool[p].0.clone(),
                negative: pool[n].0.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(margin: f64) -> TripletLossConfig {
        TripletLossConfig::new(margin, Distance::Euclidean).unwrap()
    }

    #[test]
    fn distance_cases() {
        let d = distance(array![0.0, 0.0].view(), array![3.0, 4.0].view(), Distance::Euclidean).unwrap();
        assert_eq!(d, 5.0);
        let x = array![0.3, -1.2, 2.0];
        assert!(distance(x.view(), x.view(), Distance::CosineDistance).unwrap().abs() < 1e-15);
        let d = distance(array![1.0, 0.0].view(), array![0.0, 1.0].view(), Distance::CosineDistance).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert_eq!(
            distance(array![0.0, 0.0].view(), array![1.0, 0.0].view(), Distance::CosineDistance),
            Err(TripletError::ZeroVector)
        );
        assert_eq!(
            distance(array![0.0].view(), array![1.0, 0.0].view(), Distance::Euclidean),
            Err(TripletError::DimMismatch(1, 2))
        );
    }

    #[test]
    fn loss_cases() {
        // anchor at origin, positive at distance 0.2, negative at 1.0
        let a = array![0.0, 0.0];
        let p = array![0.2, 0.0];
        let n = array![0.0, 1.0];
        assert_eq!(triplet_loss(a.view(), p.view(), n.view(), &cfg(0.5)).unwrap(), 0.0);
        assert_eq!(triplet_loss(a.view(), a.view(), a.view(), &cfg(0.5)).unwrap(), 0.5);
        let p = array![1.0, 0.0];
        let n = array![0.0, 0.2];
        let l = triplet_loss(a.view(), p.view(), n.view(), &cfg(0.5)).unwrap();
        assert!((l - 1.3).abs() < 1e-12);
    }

    #[test]
    fn margin_must_be_positive() {
        assert!(TripletLossConfig::new(0.0, Distance::Euclidean).is_err());
        assert!(TripletLossConfig::new(-1.0, Distance::Euclidean).is_err());
        assert!(TripletLossConfig::new(f64::NAN, Distance::Euclidean).is_err());
    }

    #[test]
    fn cosine_gradient_matches_fd() {
        let c = TripletLossConfig::new(1.5, Distance::CosineDistance).unwrap();
        let a = array![0.4, -0.3, 1.1];
        let p = array![-0.5, 0.9, 0.2];
        let n = array![0.5, -0.2, 1.0];
        let g = triplet_loss_grad(a.view(), p.view(), n.view(), &c).unwrap();
        assert!(g.is_active());
        for (which, analytic) in [(0, &g.anchor), (1, &g.positive), (2, &g.negative)] {
            for j in 0..3 {
                let eval = |delta: f64| {
                    let mut v = [a.clone(), p.clone(), n.clone()];
                    v[which][j] += delta;
                    triplet_loss(v[0].view(), v[1].view(), v[2].view(), &c).unwrap()
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                assert!((fd - analytic[j]).abs() < 1e-7, "input {which} coord {j}");
            }
        }
    }

    #[test]
    fn sample_only_valid_configuration() {
        let pool = vec![(0usize, 'A'), (1, 'A'), (2, 'B')];
        let w = BTreeMap::from([('A', 0.5), ('B', 0.5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ts = sample_triplets(&pool, 50, &w, &mut rng).unwrap();
        assert_eq!(ts.len(), 50);
        for t in ts {
            assert!(t.anchor < 2 && t.positive < 2 && t.anchor != t.positive);
            assert_eq!(t.negative, 2);
        }
    }

    #[test]
    fn sample_needs_diversity() {
        let pool = vec![(0usize, 'A'), (1, 'A')];
        let w = BTreeMap::from([('A', 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_triplets(&pool, 1, &w, &mut rng),
            Err(TripletError::InsufficientDiversity)
        );
        let pool = vec![(0usize, 'A'), (1, 'B')];
        assert_eq!(
            sample_triplets(&pool, 1, &w, &mut rng),
            Err(TripletError::InsufficientDiversity)
        );
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let pool: Vec<(usize, u8)> = (0..30).map(|i| (i, (i % 4) as u8)).collect();
        let w: BTreeMap<u8, f64> = (0..4).map(|l| (l, 0.25)).collect();
        let a = sample_triplets(&pool, 100, &w, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_triplets(&pool, 100, &w, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let labels = |r: &usize| pool[*r].1;
        assert!(a.iter().all(|t| is_valid_triplet(t, labels)));
    }

    #[test]
    fn positive_is_uniform_over_others() {
        let pool = vec![(0usize, 'A'), (1, 'A'), (2, 'A'), (3, 'B')];
        let w = BTreeMap::from([('A', 1.0), ('B', 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ts = sample_triplets(&pool, 30_000, &w, &mut rng).unwrap();
        let mut pair_counts = BTreeMap::new();
        for t in &ts {
            *pair_counts.entry((t.anchor, t.positive)).or_insert(0usize) += 1;
        }
        assert_eq!(pair_counts.len(), 6);
        for &c in pair_counts.values() {
            assert!((c as f64 / 30_000.0 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn batch_all_small_cases() {
        let ts = batch_all_triplets(&[("a1", 'A'), ("a2", 'A'), ("b", 'B')]);
        assert_eq!(
            ts,
            vec![
                Triplet { anchor: "a1", positive: "a2", negative: "b" },
                Triplet { anchor: "a2", positive: "a1", negative: "b" },
            ]
        );
        assert!(batch_all_triplets(&[(0, 'A'), (1, 'A'), (2, 'A')]).is_empty());
        let ts = batch_all_triplets(&[(0, 'A'), (1, 'A'), (2, 'B'), (3, 'B')]);
        // per anchor class: 2 ordered pairs x 2 negatives = 4; 8 over both
        assert_eq!(ts.len(), 8);
    }

    #[test]
    fn batch_hard_picks_extremes() {
        let c = cfg(1.0);
        let pts = [array![0.0, 0.0], array![0.1, 0.0], array![0.9, 0.0], array![0.0, 0.3], array![0.0, 0.2]];
        let batch: Vec<(usize, char, ArrayView1<f64>)> = vec![
            (0, 'A', pts[0].view()),
            (1, 'A', pts[1].view()),
            (2, 'A', pts[2].view()),
            (3, 'B', pts[3].view()),
            (4, 'B', pts[4].view()),
        ];
        let ts = batch_hard_triplets(&batch, &c).unwrap();
        assert_eq!(ts[0], Triplet { anchor: 0, positive: 2, negative: 4 });
    }

    #[test]
    fn batch_hard_tie_breaks_low() {
        let c = cfg(1.0);
        let pts = [array![0.0, 0.0], array![1.0, 0.0], array![-1.0, 0.0], array![0.0, 2.0], array![0.0, -2.0]];
        let batch: Vec<(usize, char, ArrayView1<f64>)> = vec![
            (0, 'A', pts[0].view()),
            (1, 'A', pts[1].view()),
            (2, 'A', pts[2].view()),
            (3, 'B', pts[3].view()),
            (4, 'B', pts[4].view()),
        ];
        let ts = batch_hard_triplets(&batch, &c).unwrap();
        assert_eq!(ts[0], Triplet { anchor: 0, positive: 1, negative: 3 });
        let single: Vec<(usize, char, ArrayView1<f64>)> = vec![(0, 'A', pts[0].view()), (1, 'A', pts[1].view())];
        assert_eq!(batch_hard_triplets(&single, &c), Err(TripletError::InsufficientDiversity));
    }

    #[test]
    fn batch_loss_matches_per_triplet_sum() {
        let rows = array![[0.0, 0.0], [1.0, 0.2], [0.1, 0.3], [2.0, -1.0], [0.4, 0.4]];
        let ts = vec![
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 1, positive: 0, negative: 4 },
            Triplet { anchor: 0, positive: 3, negative: 4 },
            Triplet { anchor: 2, positive: 4, negative: 3 },
        ];
        let c = cfg(0.5);
        let b = batch_triplet_loss(&rows, &ts, &c).unwrap();
        let mut expected = Array2::zeros(rows.raw_dim());
        let mut total = 0.0;
        let mut active = 0;
        for t in &ts {
            let g = triplet_loss_grad(rows.row(t.anchor), rows.row(t.positive), rows.row(t.negative), &c).unwrap();
            if g.is_active() {
                active += 1;
                total += g.loss;
                let mut r = expected.row_mut(t.anchor);
                r += &g.anchor;
                let mut r = expected.row_mut(t.positive);
                r += &g.positive;
                let mut r = expected.row_mut(t.negative);
                r += &g.negative;
            }
        }
        assert_eq!(b.n_active, active);
        assert_eq!(b.n_total, 4);
        assert!((b.loss - total / active as f64).abs() < 1e-12);
        let expected = expected / active as f64;
        assert!((&b.grad - &expected).iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_zero_past_margin(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            p in prop::collection::vec(-3.0f64..3.0, 3),
            n in prop::collection::vec(-3.0f64..3.0, 3),
            margin in 0.01f64..2.0,
        ) {
            let (a, p, n) = (Array1::from(a), Array1::from(p), Array1::from(n));
            let c = cfg(margin);
            let l = triplet_loss(a.view(), p.view(), n.view(), &c).unwrap();
            prop_assert!(l >= 0.0);
            let d_ap = distance(a.view(), p.view(), Distance::Euclidean).unwrap();
            let d_an = distance(a.view(), n.view(), Distance::Euclidean).unwrap();
            if d_an >= d_ap + margin {
                prop_assert_eq!(l, 0.0);
            }
        }

        #[test]
        fn pushing_negative_away_never_increases_loss(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            p in prop::collection::vec(-3.0f64..3.0, 4),
            n in prop::collection::vec(-3.0f64..3.0, 4),
            scale in 1.0f64..5.0,
        ) {
            let (a, p, n) = (Array1::from(a), Array1::from(p), Array1::from(n));
            let far = &a + &((&n - &a) * scale);
            let c = cfg(1.0);
            let near_loss = triplet_loss(a.view(), p.view(), n.view(), &c).unwrap();
            let far_loss = triplet_loss(a.view(), p.view(), far.view(), &c).unwrap();
            prop_assert!(far_loss <= near_loss + 1e-12);
        }

        #[test]
        fn miners_emit_valid_triplets(labels in prop::collection::vec(0u8..3, 2..9), seed in 0u64..1000) {
            let pool: Vec<(usize, u8)> = labels.iter().copied().enumerate().collect();
            let label = |r: &usize| labels[*r];
            for t in batch_all_triplets(&pool) {
                prop_assert!(is_valid_triplet(&t, label));
            }
            let w: BTreeMap<u8, f64> = (0..3).map(|l| (l, 1.0)).collect();
            if let Ok(ts) = sample_triplets(&pool, 20, &w, &mut ChaCha8Rng::seed_from_u64(seed)) {
                for t in ts {
                    prop_assert!(is_valid_triplet(&t, label));
                }
            }
            let pts: Vec<Array1<f64>> = (0..labels.len()).map(|i| array![i as f64, (i * i) as f64 * 0.1]).collect();
            let batch: Vec<(usize, u8, ArrayView1<f64>)> = pool.iter().map(|&(r, l)| (r, l, pts[r].view())).collect();
            if let Ok(ts) = batch_hard_triplets(&batch, &cfg(1.0)) {
                for t in ts {
                    prop_assert!(is_valid_triplet(&t, label));
                }
            }
        }
    }
}
