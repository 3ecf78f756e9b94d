//! Group comparisons: one-way ANOVA across sexism levels and per-channel
//! band-power contrasts with significance marking.

pub mod special;
pub mod topomap;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use special::{beta_inc, f_sf, ln_gamma, normal_cdf, normal_pdf, t_two_sided};
pub use topomap::emit_topomap;

use crate::types::{BandName, ChannelLayout, N_CHANNELS};

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} groups/observations, got {got}")]
    InsufficientN { need: usize, got: usize },
    #[error("all groups have zero variance and identical means")]
    DegenerateGroups,
    #[error("row has {got} values, expected {expected} (16 channels x 5 bands)")]
    SchemaMismatch { expected: usize, got: usize },
}

/// Count, mean, sample sd (missing below two values), min and max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    pub min: f64,
    pub max: f64,
}

/// Summary of a non-empty series. Panics on empty input.
pub fn summary(x: &[f64]) -> Summary {
    summarize(x).expect("summary of an empty series")
}

pub fn summarize(x: &[f64]) -> Option<Summary> {
    if x.is_empty() {
        return None;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.len() >= 2)
        .then(|| (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(Summary { count: x.len(), mean, sd, min, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub metric: String,
    pub group_stats: Vec<GroupStats>,
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
}

/// Classic one-way ANOVA, `F = MS_between / MS_within`.
pub fn one_way_anova<S: AsRef<[f64]>>(groups: &[S]) -> Result<AnovaResult, StatsError> {
    let names: Vec<String> = (0..groups.len()).map(|i| format!("g{i}")).collect();
    one_way_anova_named("", &names, groups)
}

pub fn one_way_anova_named<S: AsRef<[f64]>>(
    metric: &str,
    names: &[String],
    groups: &[S],
) -> Result<AnovaResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::InsufficientN { need: 2, got: groups.len() });
    }
    if let Some(g) = groups.iter().find(|g| g.as_ref().len() < 2) {
        return Err(StatsError::InsufficientN { need: 2, got: g.as_ref().len() });
    }
    let k = groups.len();
    let n_total: usize = groups.iter().map(|g| g.as_ref().len()).sum();
    let grand = groups.iter().flat_map(|g| g.as_ref().iter()).sum::<f64>() / n_total as f64;

    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    let mut group_stats = Vec::with_capacity(k);
    for (g, name) in groups.iter().zip(names) {
        let s = summary(g.as_ref());
        ss_between += s.count as f64 * (s.mean - grand).powi(2);
        ss_within += g.as_ref().iter().map(|v| (v - s.mean).powi(2)).sum::<f64>();
        group_stats.push(GroupStats {
            name: name.clone(),
            n: s.count,
            mean: s.mean,
            sd: s.sd.unwrap_or(0.0),
        });
    }
    let df_between = k - 1;
    let df_within = n_total - k;
    // Round-off floor: sums of squares below this relative size are zero.
    let scale = groups
        .iter()
        .flat_map(|g| g.as_ref().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let eps = 1e-24 * scale;
    let (ss_between, ss_within) = (
        if ss_between <= eps { 0.0 } else { ss_between },
        if ss_within <= eps { 0.0 } else { ss_within },
    );
    if ss_between == 0.0 && ss_within == 0.0 {
        return Err(StatsError::DegenerateGroups);
    }
    let f = if ss_within == 0.0 {
        f64::INFINITY
    } else {
        (ss_between / df_between as f64) / (ss_within / df_within as f64)
    };
    let p = f_sf(f, df_between as f64, df_within as f64);
    Ok(AnovaResult { metric: metric.to_string(), group_stats, f, df_between, df_within, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch's unequal-variance t-test of `mean(b) - mean(a)`, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    let n = a.len().min(b.len());
    if n < 2 {
        return Err(StatsError::InsufficientN { need: 2, got: n });
    }
    let sa = summary(a);
    let sb = summary(b);
    let va = sa.sd.unwrap().powi(2) / sa.count as f64;
    let vb = sb.sd.unwrap().powi(2) / sb.count as f64;
    let diff = sb.mean - sa.mean;
    let se2 = va + vb;
    if se2 == 0.0 {
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        let p = if diff == 0.0 { 1.0 } else { 0.0 };
        return Ok(TTest { t, df: (sa.count + sb.count - 2) as f64, p });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2
        / (va * va / (sa.count - 1) as f64 + vb * vb / (sb.count - 1) as f64);
    Ok(TTest { t, df, p: t_two_sided(t, df) })
}

/// Pooled-variance two-sample t statistic (equal variances).
pub fn pooled_t(a: &[f64], b: &[f64]) -> f64 {
    let sa = summary(a);
    let sb = summary(b);
    let (na, nb) = (sa.count as f64, sb.count as f64);
    let sp2 = ((na - 1.0) * sa.sd.unwrap().powi(2) + (nb - 1.0) * sb.sd.unwrap().powi(2))
        / (na + nb - 2.0);
    (sb.mean - sa.mean) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt()
}

/// Benjamini-Hochberg adjusted p-values, in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adj[i] = running.min(1.0);
    }
    adj
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelContrast {
    pub channel: String,
    pub band: BandName,
    pub mean_a: f64,
    pub mean_b: f64,
    pub diff: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

pub const CONTRAST_WIDTH: usize = N_CHANNELS * 5;

/// Welch t-test per (channel, band). Rows are 80 band powers, channel-major
/// (`channel * 5 + band`). With `fdr` set, significance uses BH-adjusted p.
pub fn channel_band_contrast(
    features_a: &[Vec<f64>],
    features_b: &[Vec<f64>],
    layout: &ChannelLayout,
    fdr: bool,
) -> Result<Vec<ChannelContrast>, StatsError> {
    for row in features_a.iter().chain(features_b) {
        if row.len() != CONTRAST_WIDTH {
            return Err(StatsError::SchemaMismatch { expected: CONTRAST_WIDTH, got: row.len() });
        }
    }
    let n = features_a.len().min(features_b.len());
    if n < 2 {
        return Err(StatsError::InsufficientN { need: 2, got: n });
    }
    let mut out = Vec::with_capacity(CONTRAST_WIDTH);
    for (ch, name) in layout.names().iter().enumerate() {
        for band in BandName::ALL {
            let col = ch * 5 + band.index();
            let a: Vec<f64> = features_a.iter().map(|r| r[col]).collect();
            let b: Vec<f64> = features_b.iter().map(|r| r[col]).collect();
            let tt = welch_t_test(&a, &b)?;
            let (ma, mb) = (summary(&a).mean, summary(&b).mean);
            out.push(ChannelContrast {
                channel: name.clone(),
                band,
                mean_a: ma,
                mean_b: mb,
                diff: mb - ma,
                t: tt.t,
                df: tt.df,
                p: tt.p,
                significant: tt.p < ALPHA,
            });
        }
    }
    if fdr {
        let adj = benjamini_hochberg(&out.iter().map(|c| c.p).collect::<Vec<_>>());
        for (c, q) in out.iter_mut().zip(adj) {
            c.significant = q < ALPHA;
        }
    }
    Ok(out)
}

/// Results table: one row per ANOVA metric.
pub fn write_anova_csv<W: Write>(w: W, results: &[AnovaResult]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["metric", "groups", "means", "sds", "ns", "F", "df_between", "df_within", "p", "significant"])?;
    for r in results {
        let join = |f: &dyn Fn(&GroupStats) -> String| {
            r.group_stats.iter().map(f).collect::<Vec<_>>().join(";")
        };
        wtr.write_record([
            r.metric.clone(),
            join(&|g| g.name.clone()),
            join(&|g| g.mean.to_string()),
            join(&|g| g.sd.to_string()),
            join(&|g| g.n.to_string()),
            r.f.to_string(),
            r.df_between.to_string(),
            r.df_within.to_string(),
            r.p.to_string(),
            (r.p < ALPHA).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_contrast_csv<W: Write>(w: W, contrasts: &[ChannelContrast]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["channel", "band", "mean_a", "mean_b", "diff", "t", "df", "p", "significant"])?;
    for c in contrasts {
        wtr.write_record([
            c.channel.clone(),
            c.band.to_string(),
            c.mean_a.to_string(),
            c.mean_b.to_string(),
            c.diff.to_string(),
            c.t.to_string(),
            c.df.to_string(),
            c.p.to_string(),
            c.significant.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anova_hand_example() {
        let r = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0]]).unwrap();
        assert!((r.f - 3.0).abs() < 1e-12);
        assert_eq!((r.df_between, r.df_within), (2, 6));
        assert!((r.p - 0.125).abs() < 1e-10);
    }

    #[test]
    fn anova_identical_groups() {
        let g = vec![1.0, 4.0, 2.5, 7.0];
        let r = one_way_anova(&[g.clone(), g.clone(), g]).unwrap();
        assert_eq!(r.f, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn anova_errors() {
        assert_eq!(
            one_way_anova(&[vec![2.0, 2.0], vec![2.0, 2.0]]),
            Err(StatsError::DegenerateGroups)
        );
        assert!(matches!(one_way_anova(&[vec![1.0, 2.0]]), Err(StatsError::InsufficientN { .. })));
        assert!(matches!(
            one_way_anova(&[vec![1.0, 2.0], vec![3.0]]),
            Err(StatsError::InsufficientN { .. })
        ));
    }

    #[test]
    fn welch_reference() {
        // independent reference: t = 1.7572076218714663, p = 0.09809816432340052, df = 15.9158...
        let a = [0.31, -1.2, 0.77, 1.54, -0.41, 0.05, 2.2, -0.9, 0.66, -0.13];
        let b = [1.1, 0.4, 2.3, 0.9, 1.7, -0.2, 1.35, 0.8];
        let r = welch_t_test(&a, &b).unwrap();
        assert!((r.t - 1.7572076218714663).abs() < 1e-6);
        assert!((r.p - 0.09809816432340052).abs() < 1e-6);
        assert!((r.df - 15.91583796870974).abs() < 1e-6);
    }

    #[test]
    fn bh_adjustment() {
        let adj = benjamini_hochberg(&[0.01, 0.04, 0.03, 0.5]);
        assert!((adj[0] - 0.04).abs() < 1e-12);
        assert!((adj[2] - 0.053_333_333_333_333_33).abs() < 1e-12);
        assert!((adj[1] - 0.053_333_333_333_333_33).abs() < 1e-12);
        assert!((adj[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn contrast_of_identical_sides() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..80).map(|j| ((i * 37 + j * 11) % 17) as f64).collect())
            .collect();
        let c = channel_band_contrast(&rows, &rows, &ChannelLayout::standard_16(), false).unwrap();
        assert_eq!(c.len(), 80);
        assert!(c.iter().all(|x| x.diff == 0.0 && !x.significant));
    }

    fn groups_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 2..12), 2..5)
    }

    proptest! {
        #[test]
        fn anova_shift_and_scale_invariant(groups in groups_strategy(), shift in -100.0..100.0f64, c in 0.1..10.0f64) {
            prop_assume!(one_way_anova(&groups).is_ok());
            let base = one_way_anova(&groups).unwrap();
            prop_assume!(base.f.is_finite() && base.f > 1e-6);
            let moved: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| c * v + shift).collect()).collect();
            let r = one_way_anova(&moved).unwrap();
            prop_assert!((r.f - base.f).abs() <= 1e-7 * base.f.max(1.0));
            prop_assert!((r.p - base.p).abs() <= 1e-7);
        }

        #[test]
        fn two_group_f_is_squared_pooled_t(a in prop::collection::vec(-10.0..10.0f64, 2..20), b in prop::collection::vec(-10.0..10.0f64, 2..20)) {
            let r = one_way_anova(&[a.clone(), b.clone()]);
            prop_assume!(r.is_ok());
            let f = r.unwrap().f;
            prop_assume!(f.is_finite());
            let t = pooled_t(&a, &b);
            prop_assert!((f - t * t).abs() <= 1e-9 * f.max(1.0));
        }

        #[test]
        fn contrast_is_antisymmetric(seed in 0u64..1000) {
            let gen = |k: u64| -> Vec<Vec<f64>> {
                (0..6).map(|i| (0..80).map(|j| (((seed + k) * 2654435761 + i * 97 + j as u64 * 13) % 1009) as f64 / 10.0).collect()).collect()
            };
            let (a, b) = (gen(1), gen(2));
            let layout = ChannelLayout::standard_16();
            let ab = channel_band_contrast(&a, &b, &layout, false).unwrap();
            let ba = channel_band_contrast(&b, &a, &layout, false).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert_eq!(x.diff, -y.diff);
                prop_assert_eq!(x.t, -y.t);
                prop_assert_eq!(x.p, y.p);
            }
        }
    }
}
