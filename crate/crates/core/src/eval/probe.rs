//! Linear probe: one affine layer with a sigmoid per tag, trained with
//! binary cross-entropy on frozen embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{pr_auc, roc_auc};
use crate::diffcore::{adam_step, AdamState, Tensor};
use crate::error::{MartError, Result};

/// Disjoint index sets over the embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeSplit {
    /// Seeded shuffle into 60% train, 20% validation, 20% test.
    pub fn random(n: usize, seed: u64) -> Result<Self> {
        if n < 3 {
            return Err(MartError::Config(format!("a probe split needs at least 3 rows, got {n}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (n / 5).max(1);
        let n_valid = (n / 5).max(1);
        let test = idx.split_off(n - n_test);
        let valid = idx.split_off(idx.len() - n_valid);
        Ok(ProbeSplit { train: idx, valid, test })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, part) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            if part.is_empty() {
                return Err(MartError::Config(format!("{name} split is empty")));
            }
            for &i in part {
                if i >= n {
                    return Err(MartError::Config(format!("{name} split index {i} out of range for {n} rows")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(MartError::Config(format!("row {i} appears in more than one split")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a validation ROC-AUC improvement before stopping.
    pub patience: usize,
    pub minibatch: usize,
    /// Seeds the minibatch order.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-3,
            max_epochs: 300,
            patience: 10,
            minibatch: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Macro averages over the tags scored on the test split.
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub valid_roc_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub tags_scored: Vec<String>,
    pub tags_excluded: Vec<String>,
}

/// Multi-hot label matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TagMatrix {
    pub names: Vec<String>,
    /// `rows[i][t]` is whether row `i` carries tag `t`.
    pub rows: Vec<Vec<bool>>,
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[&[f32]]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, &v) in mean.iter_mut().zip(*r) {
                *m += f64::from(v) / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, &v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (f64::from(v) - m).powi(2) / n;
            }
        }
        let scale = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, r: &[f32]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (f64::from(v) - m) * s)
            .collect()
    }
}

fn logits(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let t = b.len();
    x.iter()
        .map(|r| {
            (0..t)
                .map(|j| b.data()[j] + r.iter().enumerate().map(|(k, v)| v * w.data()[k * t + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Macro ROC-AUC and PR-AUC over tags with both classes present.
fn macro_scores(scores: &[Vec<f64>], labels: &[&[bool]], names: &[String]) -> Result<(f64, f64, Vec<String>, Vec<String>)> {
    let (mut roc, mut pr) = (0.0, 0.0);
    let (mut used, mut excluded) = (Vec::new(), Vec::new());
    for (t, name) in names.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[t]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[t]).collect();
        match roc_auc(&s, &l) {
            Ok(a) => {
                roc += a;
                pr += pr_auc(&s, &l)?;
                used.push(name.clone());
            }
            Err(MartError::UndefinedMetric(_)) => excluded.push(name.clone()),
            Err(e) => return Err(e),
        }
    }
    if used.is_empty() {
        return Err(MartError::UndefinedMetric("no tag has both classes in the split".into()));
    }
    let k = used.len() as f64;
    Ok((roc / k, pr / k, used, excluded))
}

/// Trains the probe on `split.train`, early-stops on validation ROC-AUC and
/// reports macro metrics on `split.test` for the best epoch.
pub fn linear_probe(x: &[&[f32]], tags: &TagMatrix, split: &ProbeSplit, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let n = x.len();
    let t = tags.names.len();
    if t < 2 {
        return Err(MartError::Config(format!("the probe needs at least 2 tags, got {t}")));
    }
    if tags.rows.len() != n || tags.rows.iter().any(|r| r.len() != t) {
        return Err(MartError::dim("tag matrix does not match the embedding rows"));
    }
    let d = x.first().map_or(0, |r| r.len());
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(MartError::dim("embedding rows must share a positive width"));
    }
    if x.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(MartError::Numeric("non-finite embedding".into()));
    }
    split.validate(n)?;
    let train_rows: Vec<&[f32]> = split.train.iter().map(|&i| x[i]).collect();
    let std = Standardizer::fit(&train_rows);
    let feats = |ix: &[usize]| -> Vec<Vec<f64>> { ix.iter().map(|&i| std.apply(x[i])).collect() };
    let labs = |ix: &[usize]| -> Vec<&[bool]> { ix.iter().map(|&i| tags.rows[i].as_slice()).collect() };
    let (xtr, xva, xte) = (feats(&split.train), feats(&split.valid), feats(&split.test));
    let (ytr, yva, yte) = (labs(&split.train), labs(&split.valid), labs(&split.test));

    let mut w = Tensor::<f64>::zeros(vec![d, t]);
    let mut b = Tensor::<f64>::zeros(vec![t]);
    let mut adam = AdamState::<f64>::new(cfg.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (f64::NEG_INFINITY, 0usize, w.clone(), b.clone());
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let xb: Vec<Vec<f64>> = chunk.iter().map(|&i| xtr[i].clone()).collect();
            let z = logits(&xb, &w, &b);
            let scale = 1.0 / (chunk.len() * t) as f64;
            let mut gw = Tensor::<f64>::zeros(vec![d, t]);
            let mut gb = Tensor::<f64>::zeros(vec![t]);
            for (r, &i) in chunk.iter().enumerate() {
                for j in 0..t {
                    let p = 1.0 / (1.0 + (-z[r][j]).exp());
                    let e = (p - f64::from(u8::from(ytr[i][j]))) * scale;
                    gb.data_mut()[j] += e;
                    for k in 0..d {
                        gw.data_mut()[k * t + j] += xb[r][k] * e;
                    }
                }
            }
            adam_step(&mut [&mut w, &mut b], &[&gw, &gb], &mut adam)?;
        }
        epochs_run = epoch;
        let (v, ..) = macro_scores(&logits(&xva, &w, &b), &yva, &tags.names)?;
        if v > best.0 {
            best = (v, epoch, w.clone(), b.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (valid_roc, best_epoch, w, b) = best;
    let (roc, pr, used, excluded) = macro_scores(&logits(&xte, &w, &b), &yte, &tags.names)?;
    for tag in &excluded {
        log::warn!("tag {tag:?} lacks positives or negatives in the test split; excluded from the macro average");
    }
    Ok(ProbeReport {
        roc_auc: roc,
        pr_auc: pr,
        valid_roc_auc: valid_roc,
        best_epoch,
        epochs_run,
        tags_scored: used,
        tags_excluded: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_tags(labels: &[usize]) -> TagMatrix {
        TagMatrix {
            names: vec!["a".into(), "b".into()],
            rows: labels.iter().map(|&c| vec![c == 0, c == 1]).collect(),
        }
    }

    fn run(x: &[Vec<f32>], tags: &TagMatrix, seed: u64) -> ProbeReport {
        let refs: Vec<&[f32]> = x.iter().map(Vec::as_slice).collect();
        let split = ProbeSplit::random(x.len(), seed).unwrap();
        linear_probe(&refs, tags, &split, &ProbeConfig { seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let x: Vec<Vec<f32>> = labels
            .iter()
            .map(|&c| {
                (0..16)
                    .map(|k| {
                        let centre = if k == c { 3.0 } else { 0.0 };
                        let noise: f32 = StandardNormal.sample(&mut rng);
                        centre + noise * 0.5
                    })
                    .collect()
            })
            .collect();
        let r = run(&x, &two_tags(&labels), 0);
        assert!(r.roc_auc >= 0.99, "{r:?}");
        assert!(r.pr_auc >= 0.95);
    }

    #[test]
    fn random_embeddings_are_chance() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
            labels.shuffle(&mut rng);
            let x: Vec<Vec<f32>> = (0..200)
                .map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            total += run(&x, &two_tags(&labels), seed).roc_auc;
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() <= 0.05, "mean ROC-AUC {mean}");
    }

    #[test]
    fn constant_embeddings_tie() {
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let x = vec![vec![0.25f32; 4]; 30];
        assert_eq!(run(&x, &two_tags(&labels), 3).roc_auc, 0.5);
    }

    #[test]
    fn absent_tags_excluded() {
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let mut tags = two_tags(&labels);
        tags.names.push("never".into());
        for r in &mut tags.rows {
            r.push(false);
        }
        let x: Vec<Vec<f32>> = labels.iter().map(|&c| vec![c as f32, 1.0]).collect();
        let r = run(&x, &tags, 0);
        assert_eq!(r.tags_excluded, ["never"]);
        assert_eq!(r.tags_scored.len(), 2);
    }

    #[test]
    fn bad_inputs() {
        let x = [[0.0f32; 2]; 4];
        let refs: Vec<&[f32]> = x.iter().map(|r| r.as_slice()).collect();
        let tags = two_tags(&[0, 1, 0, 1]);
        let overlap = ProbeSplit { train: vec![0, 1], valid: vec![1], test: vec![2] };
        assert!(matches!(
            linear_probe(&refs, &tags, &overlap, &ProbeConfig::default()),
            Err(MartError::Config(_))
        ));
        let one = TagMatrix { names: vec!["a".into()], rows: vec![vec![true]; 4] };
        let split = ProbeSplit::random(4, 0).unwrap();
        assert!(linear_probe(&refs, &one, &split, &ProbeConfig::default()).is_err());
        assert!(ProbeSplit::random(2, 0).is_err());
    }
}
