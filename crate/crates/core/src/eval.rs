//! AUC, per-user GAUC, inference latency, and multi-seed aggregation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// ROC-AUC with tie credit 0.5. Returns `None` when the labels contain a
/// single class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("auc: empty input"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc: NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    // Twice the pairwise credit, kept integral so the result is exact.
    let mut doubled: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let pos = group.iter().filter(|&&k| labels[k]).count() as u64;
        let neg = group.len() as u64 - pos;
        doubled += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        start = end;
    }
    Ok(Some(doubled as f64 / (2 * positives * negatives) as f64))
}

/// One scored test interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub user_id: String,
    pub item_id: String,
    pub score: f64,
    pub label: bool,
}

/// Treatment of users whose records are single-class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UndefinedUsers {
    /// Drop them from numerator and denominator.
    #[default]
    Exclude,
    /// Count them with AUC 0.
    ZeroScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserAuc {
    pub user_id: String,
    pub auc: Option<f64>,
    pub records: usize,
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaucReport {
    pub gauc: f64,
    pub users: Vec<UserAuc>,
    pub excluded_users: usize,
    pub undefined_users: UndefinedUsers,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Record-count-weighted mean of per-user AUC.
pub fn gauc(records: &[ScoredRecord], undefined: UndefinedUsers) -> Result<GaucReport> {
    if records.is_empty() {
        return Err(Error::invalid("gauc: no records"));
    }
    let mut by_user: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in records {
        let e = by_user.entry(&r.user_id).or_default();
        e.0.push(r.score);
        e.1.push(r.label);
    }
    let mut users = Vec::with_capacity(by_user.len());
    let (mut num, mut den) = (0.0, 0.0);
    let mut excluded = 0;
    for (user, (scores, labels)) in by_user {
        let a = auc(&scores, &labels)?;
        let weight = scores.len() as f64;
        let included = match (a, undefined) {
            (Some(v), _) => {
                num += weight * v;
                true
            }
            (None, UndefinedUsers::ZeroScore) => true,
            (None, UndefinedUsers::Exclude) => {
                excluded += 1;
                false
            }
        };
        if included {
            den += weight;
        }
        users.push(UserAuc {
            user_id: user.to_string(),
            auc: a,
            records: scores.len(),
            included,
        });
    }
    if den == 0.0 {
        return Err(Error::invalid(
            "gauc: every user has single-class labels; GAUC is undefined",
        ));
    }
    Ok(GaucReport {
        gauc: num / den,
        users,
        excluded_users: excluded,
        undefined_users: undefined,
        seed: None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareDescriptor {
    pub cpu: String,
    pub threads: usize,
    pub os: String,
    pub arch: String,
}

impl HardwareDescriptor {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Median wall-clock milliseconds per interaction.
    pub ms_per_interaction: f64,
    pub samples_ms: Vec<f64>,
    pub interactions: usize,
    pub warmup: usize,
    pub hardware: HardwareDescriptor,
}

/// Times `run` (which processes `interactions` interactions) `repetitions`
/// times after `warmup` untimed calls and reports the median per-interaction
/// cost.
pub fn measure_latency<F>(interactions: usize, warmup: usize, repetitions: usize, mut run: F) -> Result<LatencyReport>
where
    F: FnMut() -> Result<()>,
{
    if repetitions < 3 {
        return Err(Error::invalid("latency needs at least 3 repetitions"));
    }
    if interactions == 0 {
        return Err(Error::invalid("latency needs at least one interaction"));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3 / interactions as f64);
    }
    Ok(LatencyReport {
        ms_per_interaction: median(&samples),
        samples_ms: samples,
        interactions,
        warmup,
        hardware: HardwareDescriptor::detect(),
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Formats a fraction pair as percentages, e.g. `52.39 ± 0.01`.
pub fn format_percent(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub gauc: f64,
    pub excluded_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub dataset: String,
    pub method: String,
    pub model: String,
    pub enhancement: String,
    /// Named content hashes (config, prompt pack, checkpoints, ...).
    pub hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    #[serde(flatten)]
    pub header: ReportHeader,
    pub seeds: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    pub undefined_users: UndefinedUsers,
    pub latency: Option<LatencyReport>,
}

impl ExperimentReport {
    pub fn formatted(&self) -> String {
        format_percent(self.mean, self.std)
    }

    /// One table row: dataset, method, model, enhancement, GAUC, latency.
    pub fn row(&self) -> String {
        let latency = self
            .latency
            .as_ref()
            .map_or("-".to_string(), |l| format!("{:.3} ms", l.ms_per_interaction));
        format!(
            "{:<12} {:<10} {:<28} {:<6} {:>15} {:>12}",
            self.header.dataset,
            self.header.method,
            self.header.model,
            self.header.enhancement,
            self.formatted(),
            latency
        )
    }
}

pub fn render_table(reports: &[ExperimentReport]) -> String {
    let mut out = format!(
        "{:<12} {:<10} {:<28} {:<6} {:>15} {:>12}\n",
        "dataset", "method", "model", "enh", "GAUC (%)", "latency"
    );
    for r in reports {
        out.push_str(&r.row());
        out.push('\n');
    }
    out
}

pub fn aggregate_report(
    header: ReportHeader,
    per_seed: &[GaucReport],
    latency: Option<LatencyReport>,
) -> Result<ExperimentReport> {
    if per_seed.is_empty() {
        return Err(Error::invalid("aggregate_report needs at least one seed"));
    }
    let seeds: Vec<SeedResult> = per_seed
        .iter()
        .enumerate()
        .map(|(k, r)| SeedResult {
            seed: r.seed.unwrap_or(k as u64),
            gauc: r.gauc,
            excluded_users: r.excluded_users,
        })
        .collect();
    let (mean, std) = mean_std(&seeds.iter().map(|s| s.gauc).collect::<Vec<_>>());
    Ok(ExperimentReport {
        header,
        seeds,
        mean,
        std,
        undefined_users: per_seed[0].undefined_users,
        latency,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(user: &str, score: f64, label: bool) -> ScoredRecord {
        ScoredRecord {
            user_id: user.into(),
            item_id: String::new(),
            score,
            label,
        }
    }

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.9, 0.1], &[true, true]).unwrap(), None);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), Some(0.5));
        assert!(auc(&[0.5], &[true, false]).is_err());
        assert!(auc(&[f64::NAN, 0.1], &[true, false]).is_err());
    }

    #[test]
    fn gauc_hand_example() {
        let recs = [
            rec("A", 0.9, true),
            rec("A", 0.1, false),
            rec("B", 0.1, true),
            rec("B", 0.9, false),
        ];
        let r = gauc(&recs, UndefinedUsers::Exclude).unwrap();
        assert_eq!(r.gauc, 0.5);
        assert_eq!(r.users.len(), 2);
    }

    #[test]
    fn single_user_gauc_is_its_auc() {
        let recs = [rec("A", 0.2, true), rec("A", 0.3, false), rec("A", 0.1, false)];
        let r = gauc(&recs, UndefinedUsers::Exclude).unwrap();
        assert_eq!(r.gauc, 0.5);
    }

    #[test]
    fn undefined_users_policy() {
        let recs = [
            rec("A", 0.9, true),
            rec("A", 0.1, false),
            rec("B", 0.5, true),
            rec("B", 0.4, true),
        ];
        let ex = gauc(&recs, UndefinedUsers::Exclude).unwrap();
        assert_eq!((ex.gauc, ex.excluded_users), (1.0, 1));
        let zero = gauc(&recs, UndefinedUsers::ZeroScore).unwrap();
        assert_eq!((zero.gauc, zero.excluded_users), (0.5, 0));
        assert!(gauc(&[], UndefinedUsers::Exclude).is_err());
        assert!(gauc(&recs[2..], UndefinedUsers::Exclude).is_err());
    }

    #[test]
    fn aggregation_arithmetic() {
        let mk = |g: f64, seed| GaucReport {
            gauc: g,
            users: vec![],
            excluded_users: 0,
            undefined_users: UndefinedUsers::Exclude,
            seed: Some(seed),
        };
        let header = ReportHeader {
            dataset: "d".into(),
            method: "m".into(),
            model: "x".into(),
            enhancement: "none".into(),
            hashes: BTreeMap::new(),
            notes: vec![],
        };
        let one = aggregate_report(header.clone(), &[mk(0.5239, 1)], None).unwrap();
        assert_eq!(one.std, 0.0);
        let two = aggregate_report(header.clone(), &[mk(0.52, 1), mk(0.54, 2)], None).unwrap();
        assert_eq!(format!("{:.2}", two.mean * 100.0), "53.00");
        assert_eq!(format!("{:.2}", two.std * 100.0), "1.41");
        assert_eq!(format_percent(0.5239, 0.0001), "52.39 ± 0.01");
        assert!(aggregate_report(header, &[], None).is_err());
    }

    #[test]
    fn latency_of_a_constant_delay() {
        let delay = std::time::Duration::from_millis(4);
        let r = measure_latency(2, 1, 5, || {
            std::thread::sleep(delay);
            Ok(())
        })
        .unwrap();
        assert!(r.ms_per_interaction >= 2.0 && r.ms_per_interaction < 3.5, "{r:?}");
        assert!(measure_latency(1, 0, 2, || Ok(())).is_err());
    }

    fn instance() -> impl Strategy<Value = Vec<(u8, u8, bool)>> {
        prop::collection::vec((0u8..20, 0u8..8, any::<bool>()), 1..200)
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(v in prop::collection::vec((0u8..10, any::<bool>()), 1..200)) {
            let scores: Vec<f64> = v.iter().map(|x| x.0 as f64 / 10.0).collect();
            let labels: Vec<bool> = v.iter().map(|x| x.1).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), oracle::pairwise_auc(&scores, &labels));
        }

        #[test]
        fn gauc_is_invariant_to_record_order(v in instance(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let recs: Vec<_> = v.iter().map(|&(u, s, l)| rec(&u.to_string(), s as f64, l)).collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut crate::util::sub_rng(seed, "t"));
            let a = gauc(&recs, UndefinedUsers::Exclude).ok().map(|r| r.gauc);
            let b = gauc(&shuffled, UndefinedUsers::Exclude).ok().map(|r| r.gauc);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gauc_is_invariant_to_per_user_monotone_transforms(v in instance()) {
            let recs: Vec<_> = v.iter().map(|&(u, s, l)| rec(&u.to_string(), s as f64, l)).collect();
            let moved: Vec<_> = recs
                .iter()
                .map(|r| {
                    let k: f64 = r.user_id.parse().unwrap();
                    ScoredRecord { score: (r.score * (k + 1.0)).exp() - k, ..r.clone() }
                })
                .collect();
            let a = gauc(&recs, UndefinedUsers::Exclude).ok().map(|r| r.gauc);
            let b = gauc(&moved, UndefinedUsers::Exclude).ok().map(|r| r.gauc);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn equal_user_aucs_give_that_value(weights in prop::collection::vec(1usize..6, 1..10)) {
            let mut recs = Vec::new();
            for (u, w) in weights.iter().enumerate() {
                // One positive above w negatives: AUC 1 for every user.
                recs.push(rec(&u.to_string(), 1.0, true));
                for _ in 0..*w {
                    recs.push(rec(&u.to_string(), 0.0, false));
                }
            }
            prop_assert_eq!(gauc(&recs, UndefinedUsers::Exclude).unwrap().gauc, 1.0);
        }
    }
}
