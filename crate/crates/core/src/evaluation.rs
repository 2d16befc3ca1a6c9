//! Confusion matrices, binary metrics, ROC/AUC, exact binomial intervals and
//! k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::beta::beta_reg;

use crate::data::{Dataset, MALIGNANT_CLASS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::training::{predict_dataset, train_with, EpochRecord, TrainConfig, TrainHistory};

/// `p_malignant` at or above this is a malignant call.
pub const BINARY_THRESHOLD: f64 = 0.5;

/// Counts indexed `[actual][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, actual: usize, predicted: usize) -> usize {
        self.counts[actual * self.k + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.chunks(self.k).map(|r| r.iter().sum()).collect()
    }

    /// `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }
}

pub fn confusion(preds: &[usize], actual: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != actual.len() {
        return Err(Error::dim(format!(
            "{} predictions vs {} labels",
            preds.len(),
            actual.len()
        )));
    }
    let mut counts = vec![0; k * k];
    for (&p, &a) in preds.iter().zip(actual) {
        if p >= k || a >= k {
            return Err(Error::contract(format!("label pair ({a}, {p}) outside 0..{k}")));
        }
        counts[a * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BinaryCounts {
    pub fn from_calls(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// A rate and its exact 95% interval; `None` when the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub successes: usize,
    pub trials: usize,
    pub ci: (f64, f64),
}

impl Rate {
    fn of(successes: usize, trials: usize) -> Option<Self> {
        if trials == 0 {
            return None;
        }
        let ci = clopper_pearson(successes, trials, 0.95).expect("valid counts");
        Some(Self {
            value: successes as f64 / trials as f64,
            successes,
            trials,
            ci,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: Option<Rate>,
    pub sensitivity: Option<Rate>,
    pub specificity: Option<Rate>,
    pub ppv: Option<Rate>,
    pub npv: Option<Rate>,
}

pub fn binary_metrics(c: BinaryCounts) -> BinaryMetrics {
    BinaryMetrics {
        accuracy: Rate::of(c.tp + c.tn, c.total()),
        sensitivity: Rate::of(c.tp, c.tp + c.fn_),
        specificity: Rate::of(c.tn, c.tn + c.fp),
        ppv: Rate::of(c.tp, c.tp + c.fp),
        npv: Rate::of(c.tn, c.tn + c.fn_),
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `(p_benign, p_malignant)` from four class probabilities ordered
/// NE, EP, EH, EA.
pub fn aggregate_binary(probs: &[f64]) -> Result<(f64, f64)> {
    if probs.len() != 4 {
        return Err(Error::dim(format!("expected 4 class probabilities, got {}", probs.len())));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("class probabilities sum to {total}")));
    }
    let malignant = probs[MALIGNANT_CLASS];
    let benign: f64 = probs.iter().enumerate().filter(|(i, _)| *i != MALIGNANT_CLASS).map(|(_, p)| p).sum();
    Ok((benign, malignant))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive. The first point uses +inf.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("ROC needs both positive and negative labels"));
    }
    Ok((pos, neg))
}

/// ROC points from (0,0) at threshold +inf through each distinct score in
/// descending order, ending at (1,1).
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under [`roc`]. Tied scores form diagonal segments, so
/// this equals P(s⁺ > s⁻) + ½·P(s⁺ = s⁻).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = roc(scores, labels)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

/// Inverse of the regularized incomplete beta function in `x` by bisection.
fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact (Clopper-Pearson) two-sided interval for `k` successes in `n`
/// trials at confidence `conf`.
pub fn clopper_pearson(k: usize, n: usize, conf: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::contract(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    if !(conf > 0.0 && conf < 1.0) {
        return Err(Error::contract(format!("confidence must be in (0, 1), got {conf}")));
    }
    let alpha = 1.0 - conf;
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, kf, nf - kf + 1.0)
    };
    let hi = if k == n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, kf + 1.0, nf - kf)
    };
    Ok((lo, hi))
}

/// Seeded shuffle of `0..n` split into `k` folds; the first `n % k` folds
/// hold one extra index.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::contract(format!("k-fold needs 2 <= k <= n, got k={k}, n={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Like [`kfold`] but deals each class's shuffled members round-robin, so
/// every fold gets a near-equal share of every class.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if k < 2 || n < k {
        return Err(Error::contract(format!("k-fold needs 2 <= k <= n, got k={k}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut dealt = Vec::with_capacity(n);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        dealt.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (j, i) in dealt.into_iter().enumerate() {
        folds[j % k].push(i);
    }
    Ok(folds)
}

/// Four-class and benign/malignant results on one labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<Rate>,
    pub binary_counts: BinaryCounts,
    pub binary: BinaryMetrics,
    /// `None` if only one of benign/malignant is present.
    pub auc: Option<f64>,
    pub roc: Option<Vec<RocPoint>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Score class-probability rows against labels (NE, EP, EH, EA order).
pub fn evaluate_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<Evaluation> {
    let k = probs.first().map_or(4, Vec::len);
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let confusion = confusion(&preds, labels, k)?;
    let accuracy = Rate::of(confusion.trace(), confusion.total());
    let p_malignant = probs
        .iter()
        .map(|p| aggregate_binary(p).map(|(_, m)| m))
        .collect::<Result<Vec<_>>>()?;
    let called: Vec<bool> = p_malignant.iter().map(|&p| p >= BINARY_THRESHOLD).collect();
    let truth: Vec<bool> = labels.iter().map(|&l| l == MALIGNANT_CLASS).collect();
    let binary_counts = BinaryCounts::from_calls(&called, &truth);
    let both = truth.iter().any(|&t| t) && truth.iter().any(|&t| !t);
    let (auc, roc) = if both {
        (Some(auc(&p_malignant, &truth)?), Some(roc(&p_malignant, &truth)?))
    } else {
        (None, None)
    };
    Ok(Evaluation {
        confusion,
        accuracy,
        binary_counts,
        binary: binary_metrics(binary_counts),
        auc,
        roc,
    })
}

pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<(Evaluation, Vec<Vec<f64>>)> {
    let probs = predict_dataset(model, dataset, batch_size)?;
    Ok((evaluate_probs(&probs, &dataset.labels())?, probs))
}

pub const METRICS_HEADER: &str = "fold,task,accuracy,sensitivity,specificity,ppv,npv,auc,ci_lo,ci_hi";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// The two metric rows (`fourclass`, `binary`) for one evaluation. Columns
/// that do not apply to the four-class task hold `na`; the interval is the
/// accuracy's.
pub fn metric_rows(label: &str, e: &Evaluation) -> [String; 2] {
    let acc_ci = |r: Option<Rate>| match r {
        Some(r) => format!("{:.6},{:.6}", r.ci.0, r.ci.1),
        None => "undefined,undefined".into(),
    };
    let v = |r: Option<Rate>| fmt_opt(r.map(|r| r.value));
    let four = format!(
        "{label},fourclass,{},na,na,na,na,na,{}",
        v(e.accuracy),
        acc_ci(e.accuracy)
    );
    let b = &e.binary;
    let bin = format!(
        "{label},binary,{},{},{},{},{},{},{}",
        v(b.accuracy),
        v(b.sensitivity),
        v(b.specificity),
        v(b.ppv),
        v(b.npv),
        fmt_opt(e.auc),
        acc_ci(b.accuracy)
    );
    [four, bin]
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        let t = if p.threshold.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.9}", p.threshold)
        };
        s.push_str(&format!("{t},{:.6},{:.6}\n", p.fpr, p.tpr));
    }
    s
}

/// Mean and sample standard deviation; `None` when undefined.
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub evaluation: Evaluation,
    pub probs: Vec<Vec<f64>>,
    pub history: TrainHistory,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub stratified: bool,
    /// Folds trained at the same time.
    pub jobs: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 42,
            stratified: false,
            jobs: 1,
        }
    }
}

/// Independent seed for stream `i` of `seed`.
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CvReport {
    /// Per-fold rows, then `mean` and `sd` rows for each task.
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for f in &self.folds {
            for row in metric_rows(&(f.fold + 1).to_string(), &f.evaluation) {
                s.push_str(&row);
                s.push('\n');
            }
        }
        type Pick = fn(&Evaluation) -> Option<f64>;
        let four: [Option<Pick>; 6] = [Some(|e| e.accuracy.map(|r| r.value)), None, None, None, None, None];
        let bin: [Option<Pick>; 6] = [
            Some(|e| e.binary.accuracy.map(|r| r.value)),
            Some(|e| e.binary.sensitivity.map(|r| r.value)),
            Some(|e| e.binary.specificity.map(|r| r.value)),
            Some(|e| e.binary.ppv.map(|r| r.value)),
            Some(|e| e.binary.npv.map(|r| r.value)),
            Some(|e| e.auc),
        ];
        for (stat, pick_sd) in [("mean", false), ("sd", true)] {
            for (task, cols) in [("fourclass", &four), ("binary", &bin)] {
                let cells: Vec<String> = cols
                    .iter()
                    .map(|c| match c {
                        None => "na".into(),
                        Some(f) => {
                            let vals: Vec<f64> = self.folds.iter().filter_map(|fr| f(&fr.evaluation)).collect();
                            let (m, sd) = mean_sd(&vals);
                            fmt_opt(if pick_sd { sd } else { m })
                        }
                    })
                    .collect();
                s.push_str(&format!("{stat},{task},{},na,na\n", cells.join(",")));
            }
        }
        s
    }

    /// Pooled out-of-fold predictions, in dataset order.
    pub fn pooled_probs(&self, n: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); n];
        for f in &self.folds {
            for (&i, p) in f.test_indices.iter().zip(&f.probs) {
                out[i] = p.clone();
            }
        }
        out
    }
}

/// Train a fresh model on all folds but one and evaluate on the held-out
/// fold, for every fold. Fold `i` uses seeds derived from `opts.seed` and `i`,
/// so the report does not depend on `opts.jobs`.
pub fn cross_validate(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    opts: CvOptions,
    on_epoch: impl Fn(usize, &EpochRecord) + Sync,
) -> Result<CvReport> {
    model_config.validate()?;
    train_config.validate()?;
    let counts = dataset.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {} has no images", dataset.class_names[c])));
    }
    let labels = dataset.labels();
    let folds = if opts.stratified {
        stratified_kfold(&labels, opts.folds, opts.seed)?
    } else {
        kfold(dataset.len(), opts.folds, opts.seed)?
    };

    let run_fold = |f: usize| -> Result<FoldResult> {
        let test = folds[f].clone();
        let mut train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        train_idx.sort_unstable();
        let train_set = dataset.subset(&train_idx);
        let test_set = dataset.subset(&test);
        let mut warnings = Vec::new();
        for (c, &n) in train_set.class_counts().iter().enumerate() {
            if n == 0 {
                warnings.push(format!("fold {}: class {} absent from training split", f + 1, dataset.class_names[c]));
            }
        }
        let mcfg = ModelConfig {
            seed: derive_seed(opts.seed, 2 * f as u64),
            ..model_config.clone()
        };
        let tcfg = TrainConfig {
            seed: derive_seed(opts.seed, 2 * f as u64 + 1),
            ..train_config.clone()
        };
        let mut model = Model::build(&mcfg)?;
        let history = train_with(&mut model, &train_set, &tcfg, |r| on_epoch(f, r))?;
        let (evaluation, probs) = evaluate(&model, &test_set, tcfg.batch_size)?;
        Ok(FoldResult {
            fold: f,
            test_indices: test,
            evaluation,
            probs,
            history,
            warnings,
        })
    };

    let jobs = opts.jobs.max(1);
    let results: Vec<Result<FoldResult>> = if jobs == 1 {
        (0..folds.len()).map(run_fold).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..folds.len()).into_par_iter().map(run_fold).collect())
    };
    Ok(CvReport {
        folds: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}
