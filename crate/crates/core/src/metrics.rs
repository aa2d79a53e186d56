//! Mean AUC, Dice and the exact nearest-neighbor embedding analysis.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{input_err, Error, Result};

/// Scores and binary labels, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
}

impl PredictionSet {
    pub fn new(scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(input_err!("{} score rows but {} label rows", scores.len(), labels.len()));
        }
        let c = scores.first().map_or(0, Vec::len);
        for (s, l) in scores.iter().zip(&labels) {
            if s.len() != c || l.len() != c {
                return Err(input_err!("ragged prediction set"));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(input_err!("labels must be 0 or 1"));
            }
        }
        Ok(Self { scores, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    fn column(&self, c: usize) -> (Vec<f64>, Vec<u8>) {
        (
            self.scores.iter().map(|r| r[c]).collect(),
            self.labels.iter().map(|r| r[c]).collect(),
        )
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half (midrank formula). `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(input_err!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(input_err!("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

pub fn per_class_auc(pred: &PredictionSet) -> Result<Vec<Option<f64>>> {
    (0..pred.num_classes())
        .map(|c| {
            let (s, l) = pred.column(c);
            roc_auc(&s, &l)
        })
        .collect()
}

/// Unweighted mean over the classes whose AUC is defined.
pub fn mean_auc(pred: &PredictionSet) -> Result<f64> {
    let defined: Vec<f64> = per_class_auc(pred)?.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::Eval("no class has both positives and negatives".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(input_err!("mask sizes differ: {} vs {}", pred.len(), gt.len()));
    }
    let a = pred.iter().filter(|&&v| v).count();
    let b = gt.iter().filter(|&&v| v).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Dice of `sigmoid(logits) >= 0.5` against a `{0, 1}` mask.
pub fn dice_from_logits(logits: &[f64], gt: &[f64]) -> Result<f64> {
    let p: Vec<bool> = logits.iter().map(|&z| z >= 0.0).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v >= 0.5).collect();
    dice(&p, &g)
}

/// k nearest reference points per query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
    /// Mean AUC of using the nearest neighbor's label vector as scores.
    pub nn_label_mauc: Option<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact Euclidean k-NN; ties in distance go to the lower reference index.
pub fn knn(reference: &[Vec<f64>], queries: &[Vec<f64>], k: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    if k == 0 || k > reference.len() {
        return Err(input_err!("k = {k} must lie in 1..={}", reference.len()));
    }
    let dim = reference[0].len();
    if reference.iter().chain(queries).any(|v| v.len() != dim) {
        return Err(input_err!("feature dimensions differ"));
    }
    let mut indices = Vec::with_capacity(queries.len());
    let mut distances = Vec::with_capacity(queries.len());
    for q in queries {
        let mut d: Vec<(f64, usize)> = reference.iter().enumerate().map(|(i, r)| (sq_dist(q, r), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
        }
        d.sort_by(cmp);
        indices.push(d.iter().map(|x| x.1).collect());
        distances.push(d.iter().map(|x| x.0.sqrt()).collect());
    }
    Ok((indices, distances))
}

pub fn nn_analysis(
    train_features: &[Vec<f64>],
    train_labels: &[Vec<u8>],
    test_features: &[Vec<f64>],
    test_labels: &[Vec<u8>],
    k: usize,
) -> Result<NeighborReport> {
    if train_features.len() != train_labels.len() || test_features.len() != test_labels.len() {
        return Err(input_err!("feature and label counts differ"));
    }
    let (indices, distances) = knn(train_features, test_features, k)?;
    let scores: Vec<Vec<f64>> = indices
        .iter()
        .map(|ix| train_labels[ix[0]].iter().map(|&v| f64::from(v)).collect())
        .collect();
    let pred = PredictionSet::new(scores, test_labels.to_vec())?;
    let nn_label_mauc = match mean_auc(&pred) {
        Ok(v) => Some(v),
        Err(Error::Eval(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(NeighborReport {
        k,
        indices,
        distances,
        nn_label_mauc,
    })
}

/// Grid with one row per query: the query image followed by its neighbors.
pub fn neighbor_montage(
    queries: &[&Image],
    reference: &[Image],
    report: &NeighborReport,
    path: impl AsRef<Path>,
) -> Result<()> {
    let first = queries.first().ok_or_else(|| input_err!("no queries"))?;
    let (h, w) = (first.height, first.width);
    let gap = 2;
    let cols = report.k + 1;
    let mut canvas = Image::zeros(1, queries.len() * (h + gap), cols * (w + gap));
    canvas.data.fill(1.0);
    for (row, q) in queries.iter().enumerate() {
        let ix = report.indices.get(row).ok_or_else(|| input_err!("report has fewer rows than queries"))?;
        let tiles = std::iter::once(*q).chain(ix.iter().map(|&i| &reference[i]));
        for (col, tile) in tiles.enumerate() {
            if (tile.height, tile.width) != (h, w) {
                return Err(input_err!("montage tiles differ in size"));
            }
            for y in 0..h {
                for x in 0..w {
                    canvas.set(0, row * (h + gap) + y, col * (w + gap) + x, tile.at(0, y, x));
                }
            }
        }
    }
    canvas.save_gray_png(path)
}

/// Orders `Option<f64>` AUCs with undefined values first.
pub fn cmp_auc(a: &Option<f64>, b: &Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(y),
        (None, None) => Ordering::Equal,
        (None, _) => Ordering::Less,
        (_, None) => Ordering::Greater,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += match s[i].partial_cmp(&s[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_worked_example() {
        let a = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap().unwrap();
        assert_eq!(a, 0.75);
        assert_eq!(brute_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), 0.75);
    }

    #[test]
    fn auc_edge_conventions() {
        assert_eq!(roc_auc(&[0.0, 1.0], &[0, 1]).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), Some(0.5));
        assert_eq!(roc_auc(&[0.3, 0.4], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn mean_auc_exclusion_and_duplication() {
        let p = PredictionSet::new(
            vec![vec![0.1, 0.5], vec![0.9, 0.2], vec![0.4, 0.3]],
            vec![vec![0, 1], vec![1, 1], vec![0, 1]],
        )
        .unwrap();
        assert_eq!(mean_auc(&p).unwrap(), 1.0);
        let dup = PredictionSet::new(
            p.scores.iter().map(|r| vec![r[0]; 3]).collect(),
            p.labels.iter().map(|r| vec![r[0]; 3]).collect(),
        )
        .unwrap();
        assert_eq!(mean_auc(&dup).unwrap(), 1.0);
        let none = PredictionSet::new(vec![vec![0.1], vec![0.2]], vec![vec![1], vec![1]]).unwrap();
        assert_eq!(mean_auc(&none).unwrap_err().kind(), "eval");
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.random()]).collect();
        let labels: Vec<Vec<u8>> = (0..1000).map(|i| vec![(i % 2) as u8]).collect();
        let m = mean_auc(&PredictionSet::new(scores, labels).unwrap()).unwrap();
        assert!((m - 0.5).abs() <= 0.05, "{m}");
    }

    #[test]
    fn dice_examples() {
        let t = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
        assert_eq!(dice(&t(&[1, 1, 0]), &t(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(dice(&t(&[1, 0]), &t(&[0, 1])).unwrap(), 0.0);
        assert_eq!(dice(&t(&[1, 1, 1, 1, 0, 0]), &t(&[0, 0, 1, 1, 1, 1])).unwrap(), 0.5);
        assert_eq!(dice(&t(&[0, 0]), &t(&[0, 0])).unwrap(), 1.0);
        assert!(dice(&t(&[0]), &t(&[0, 0])).is_err());
    }

    #[test]
    fn knn_obvious_and_boundary() {
        let r = vec![vec![0.0], vec![10.0]];
        let (ix, d) = knn(&r, &[vec![1.0]], 1).unwrap();
        assert_eq!(ix, vec![vec![0]]);
        assert_eq!(d, vec![vec![1.0]]);
        let (ix, d) = knn(&r, &[vec![7.0]], 2).unwrap();
        assert_eq!(ix, vec![vec![1, 0]]);
        assert_eq!(d, vec![vec![3.0, 7.0]]);
        assert!(knn(&r, &[vec![7.0]], 3).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let qs: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let (ix, d) = knn(&pts, &qs, 5).unwrap();
        for (qi, q) in qs.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..5].iter().map(|x| x.1).collect();
            assert_eq!(ix[qi], want);
            assert!(d[qi].windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn nn_analysis_uses_nearest_label() {
        let train = vec![vec![0.0], vec![10.0]];
        let rep = nn_analysis(&train, &[vec![0], vec![1]], &[vec![1.0], vec![9.0]], &[vec![0], vec![1]], 1).unwrap();
        assert_eq!(rep.nn_label_mauc, Some(1.0));
    }

    #[test]
    fn montage_writes_a_grid() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| Image::from_vec(1, 4, 4, vec![i as f32 / 3.0; 16]).unwrap()).collect();
        let rep = NeighborReport {
            k: 2,
            indices: vec![vec![1, 2]],
            distances: vec![vec![0.0, 1.0]],
            nn_label_mauc: None,
        };
        let p = dir.path().join("m.png");
        neighbor_montage(&[&imgs[0]], &imgs, &rep, &p).unwrap();
        let m = Image::load_gray(&p).unwrap();
        assert_eq!((m.height, m.width), (6, 18));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_and_is_rank_invariant(
            rows in prop::collection::vec((0u8..8, 0u8..2), 2..60)
        ) {
            let s: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
            let l: Vec<u8> = rows.iter().map(|r| r.1).collect();
            if let Some(a) = roc_auc(&s, &l).unwrap() {
                prop_assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
                let t: Vec<f64> = s.iter().map(|v| (v * 3.0 + 1.0).exp()).collect();
                prop_assert_eq!(roc_auc(&t, &l).unwrap(), Some(a));
                let rev: Vec<f64> = s.iter().map(|v| -v).collect();
                prop_assert!((roc_auc(&rev, &l).unwrap().unwrap() - (1.0 - a)).abs() < 1e-12);
            }
        }

        #[test]
        fn dice_is_symmetric(a in prop::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<bool> = a.iter().map(|_| rng.random()).collect();
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            if a.iter().any(|&v| v) {
                prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
            }
        }
    }
}
