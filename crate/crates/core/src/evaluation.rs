//! Top-K accuracy over retrieval results, overall and per world.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::MentionRecord;
use crate::error::{Error, Result};
use crate::pooling::PoolingKind;
use crate::retrieval::{Metric, RetrievalResult};

pub const DEFAULT_K_GRID: [usize; 5] = [1, 10, 25, 50, 64];

/// Fraction of mentions whose gold entity is among the first `k` candidates.
/// A result shorter than `k` is accepted only when it ranks the whole world.
pub fn accuracy_at_k(results: &[RetrievalResult], gold: &HashMap<String, String>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Evaluation("no retrieval results".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let g = gold
            .get(&r.mention_id)
            .ok_or_else(|| Error::Evaluation(format!("mention {} has no gold entity", r.mention_id)))?;
        if r.candidates.len() < k && !r.exhaustive {
            return Err(Error::Evaluation(format!(
                "mention {}: {} candidates for K={k}",
                r.mention_id,
                r.candidates.len()
            )));
        }
        if r.candidates.iter().take(k).any(|c| &c.entity_id == g) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldAccuracy {
    pub world: String,
    pub mentions: usize,
    pub accuracy: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSettings {
    pub metric: Metric,
    pub pooling: PoolingKind,
    pub use_entity_type: bool,
    pub k_grid: Vec<usize>,
}

impl ReportSettings {
    pub fn new(metric: Metric, pooling: PoolingKind, use_entity_type: bool) -> Self {
        ReportSettings {
            metric,
            pooling,
            use_entity_type,
            k_grid: DEFAULT_K_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub settings: ReportSettings,
    pub mention_count: usize,
    /// Gold-in-top-K rate over all mentions.
    pub micro: BTreeMap<usize, f64>,
    /// Mean of per-world rates.
    pub macro_avg: BTreeMap<usize, f64>,
    pub worlds: Vec<WorldAccuracy>,
}

/// Aggregates results for mentions drawn from `mentions`.
pub fn build_report(results: &[RetrievalResult], mentions: &[MentionRecord], settings: ReportSettings) -> Result<EvalReport> {
    let mut k_grid = settings.k_grid.clone();
    k_grid.sort_unstable();
    k_grid.dedup();
    if k_grid.is_empty() || k_grid[0] == 0 {
        return Err(Error::Evaluation("K grid must hold positive values".into()));
    }
    let by_id: HashMap<&str, &MentionRecord> = mentions.iter().map(|m| (m.mention_id.as_str(), m)).collect();
    let gold: HashMap<String, String> = mentions
        .iter()
        .map(|m| (m.mention_id.clone(), m.gold_entity_id.clone()))
        .collect();
    let mut per_world: BTreeMap<&str, Vec<RetrievalResult>> = BTreeMap::new();
    for r in results {
        let m = by_id
            .get(r.mention_id.as_str())
            .ok_or_else(|| Error::Evaluation(format!("result for unknown mention {}", r.mention_id)))?;
        per_world.entry(m.world.as_str()).or_default().push(r.clone());
    }
    let mut micro = BTreeMap::new();
    let mut macro_avg = BTreeMap::new();
    let mut worlds = Vec::new();
    for &k in &k_grid {
        micro.insert(k, accuracy_at_k(results, &gold, k)?);
    }
    for (world, rs) in &per_world {
        let mut accuracy = BTreeMap::new();
        for &k in &k_grid {
            accuracy.insert(k, accuracy_at_k(rs, &gold, k)?);
        }
        worlds.push(WorldAccuracy {
            world: world.to_string(),
            mentions: rs.len(),
            accuracy,
        });
    }
    for &k in &k_grid {
        let mean = worlds.iter().map(|w| w.accuracy[&k]).sum::<f64>() / worlds.len() as f64;
        macro_avg.insert(k, mean);
    }
    Ok(EvalReport {
        settings: ReportSettings { k_grid, ..settings },
        mention_count: results.len(),
        micro,
        macro_avg,
        worlds,
    })
}

impl EvalReport {
    /// Line-delimited `key<TAB>value` pairs.
    pub fn to_key_values(&self) -> String {
        let s = &self.settings;
        let mut out = String::new();
        let _ = writeln!(out, "metric\t{}", s.metric);
        let _ = writeln!(out, "pooling\t{}", s.pooling);
        let _ = writeln!(out, "use_entity_type\t{}", s.use_entity_type);
        let _ = writeln!(out, "mentions\t{}", self.mention_count);
        for (k, a) in &self.micro {
            let _ = writeln!(out, "micro@{k}\t{a:.6}");
        }
        for (k, a) in &self.macro_avg {
            let _ = writeln!(out, "macro@{k}\t{a:.6}");
        }
        for w in &self.worlds {
            let _ = writeln!(out, "world.{}.mentions\t{}", w.world, w.mentions);
            for (k, a) in &w.accuracy {
                let _ = writeln!(out, "world.{}@{k}\t{a:.6}", w.world);
            }
        }
        out
    }

    /// `K<TAB>accuracy` rows of the micro curve, sorted by K.
    pub fn curve_tsv(&self) -> String {
        let mut out = String::from("K\taccuracy\n");
        for (k, a) in &self.micro {
            let _ = writeln!(out, "{k}\t{a:.6}");
        }
        out
    }

    pub fn render_table(&self) -> String {
        let s = &self.settings;
        let mut out = format!(
            "metric={} pooling={} entity_types={} mentions={}\n",
            s.metric,
            s.pooling,
            if s.use_entity_type { "on" } else { "off" },
            self.mention_count
        );
        let width = self.worlds.iter().map(|w| w.world.len()).chain([7]).max().unwrap_or(7);
        let _ = write!(out, "{:width$}  {:>8}", "world", "mentions");
        for k in self.micro.keys() {
            let _ = write!(out, "  {:>7}", format!("@{k}"));
        }
        out.push('\n');
        let mut row = |name: &str, n: String, acc: &BTreeMap<usize, f64>| {
            let _ = write!(out, "{name:width$}  {n:>8}");
            for a in acc.values() {
                let _ = write!(out, "  {:>7.4}", a);
            }
            out.push('\n');
        };
        for w in &self.worlds {
            row(&w.world, w.mentions.to_string(), &w.accuracy);
        }
        row("macro", String::new(), &self.macro_avg);
        row("micro", self.mention_count.to_string(), &self.micro);
        out
    }

    /// Writes `<prefix>.report`, `<prefix>.curve.tsv` and `<prefix>.txt`.
    pub fn write(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref().to_string_lossy().into_owned();
        for (ext, body) in [
            ("report", self.to_key_values()),
            ("curve.tsv", self.curve_tsv()),
            ("txt", self.render_table()),
        ] {
            let path = format!("{prefix}.{ext}");
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityType;
    use crate::retrieval::Candidate;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result(mention: &str, ids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            mention_id: mention.into(),
            candidates: ids
                .iter()
                .map(|id| Candidate {
                    entity_id: id.to_string(),
                    score: 0.0,
                })
                .collect(),
            exhaustive: false,
        }
    }

    fn mention(id: &str, gold: &str, world: &str) -> MentionRecord {
        MentionRecord {
            mention_id: id.into(),
            context_document_id: "d".into(),
            start_index: 0,
            end_index: 0,
            gold_entity_id: gold.into(),
            world: world.into(),
            entity_type: EntityType::unknown(),
        }
    }

    fn gold(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn counts_hits() {
        let rs = [result("m1", &["a", "x", "y"]), result("m2", &["x", "y", "b"])];
        let g = gold(&[("m1", "a"), ("m2", "b")]);
        assert_eq!(accuracy_at_k(&rs, &g, 1).unwrap(), 0.5);
        assert_eq!(accuracy_at_k(&rs, &g, 3).unwrap(), 1.0);
        let none = [result("m1", &["x"]), result("m2", &["y"])];
        assert_eq!(accuracy_at_k(&none, &g, 1).unwrap(), 0.0);
    }

    #[test]
    fn rejects_missing_gold_and_short_lists() {
        let rs = [result("m1", &["a"])];
        assert!(accuracy_at_k(&rs, &gold(&[]), 1).is_err());
        assert!(accuracy_at_k(&rs, &gold(&[("m1", "a")]), 2).is_err());
        let mut full = rs[0].clone();
        full.exhaustive = true;
        assert_eq!(accuracy_at_k(&[full], &gold(&[("m1", "a")]), 64).unwrap(), 1.0);
    }

    #[test]
    fn planted_ranks_match_direct_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut results = Vec::new();
        let mut g = HashMap::new();
        let mut ranks = Vec::new();
        for i in 0..100 {
            let rank = rng.random_range(1..=70usize);
            let mut ids: Vec<String> = (0..64).map(|j| format!("n{i}_{j}")).collect();
            if rank <= 64 {
                ids[rank - 1] = format!("gold{i}");
            }
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            results.push(result(&format!("m{i}"), &refs));
            g.insert(format!("m{i}"), format!("gold{i}"));
            ranks.push(rank);
        }
        for k in [1, 5, 10, 25, 50, 64] {
            let expected = ranks.iter().filter(|&&r| r <= k).count() as f64 / 100.0;
            assert_eq!(accuracy_at_k(&results, &g, k).unwrap(), expected);
        }
    }

    #[test]
    fn perfect_world_reports_ones() {
        let ms = [mention("m1", "a", "w"), mention("m2", "b", "w")];
        let rs: Vec<_> = ["a", "b"].iter().enumerate().map(|(i, g)| {
            let mut r = result(&format!("m{}", i + 1), &[g, "z"]);
            r.exhaustive = true;
            r
        }).collect();
        let report = build_report(&rs, &ms, ReportSettings::new(Metric::Dot, PoolingKind::Cls, false)).unwrap();
        assert!(report.micro.values().all(|&a| a == 1.0));
        assert_eq!(report.micro.keys().copied().collect::<Vec<_>>(), DEFAULT_K_GRID);
        assert!(report.curve_tsv().starts_with("K\taccuracy\n1\t1.000000\n"));
    }

    #[test]
    fn macro_and_micro_differ_by_weighting() {
        let ms = [mention("m1", "a", "big"), mention("m2", "b", "big"), mention("m3", "c", "big"), mention("m4", "d", "small")];
        let rs = [
            result("m1", &["a", "x"]),
            result("m2", &["b", "x"]),
            result("m3", &["c", "x"]),
            result("m4", &["x", "d"]),
        ];
        let settings = ReportSettings {
            k_grid: vec![2, 1],
            ..ReportSettings::new(Metric::Cosine, PoolingKind::Avg, true)
        };
        let report = build_report(&rs, &ms, settings).unwrap();
        assert_eq!(report.micro[&1], 0.75);
        assert_eq!(report.macro_avg[&1], 0.5);
        let g: HashMap<String, String> = ms.iter().map(|m| (m.mention_id.clone(), m.gold_entity_id.clone())).collect();
        assert_eq!(report.micro[&1], accuracy_at_k(&rs, &g, 1).unwrap());
        let mean = report.worlds.iter().map(|w| w.accuracy[&1]).sum::<f64>() / 2.0;
        assert_eq!(report.macro_avg[&1], mean);
        let kv = report.to_key_values();
        assert!(kv.contains("world.small@1\t0.000000"));
        assert!(kv.contains("macro@2\t1.000000"));
        assert!(report.render_table().contains("micro"));
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path().join("r")).unwrap();
        assert!(dir.path().join("r.curve.tsv").exists());
    }

    #[test]
    fn unknown_mentions_are_rejected() {
        let err = build_report(&[result("zz", &["a"])], &[mention("m1", "a", "w")], ReportSettings::new(Metric::Dot, PoolingKind::Cls, false));
        assert!(err.is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_order_invariant(ranks in proptest::collection::vec(1usize..12, 1..40), seed in any::<u64>()) {
            let ms: Vec<_> = ranks.iter().enumerate().map(|(i, _)| mention(&format!("m{i}"), &format!("g{i}"), if i % 2 == 0 { "a" } else { "b" })).collect();
            let mut rs: Vec<_> = ranks.iter().enumerate().map(|(i, &r)| {
                let mut ids: Vec<String> = (0..10).map(|j| format!("x{j}")).collect();
                if r <= 10 { ids[r - 1] = format!("g{i}"); }
                let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                result(&format!("m{i}"), &refs)
            }).collect();
            let settings = ReportSettings { k_grid: (1..=10).collect(), ..ReportSettings::new(Metric::Dot, PoolingKind::Cls, false) };
            let a = build_report(&rs, &ms, settings.clone()).unwrap();
            let accs: Vec<f64> = a.micro.values().copied().collect();
            prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(accs.iter().all(|&x| (0.0..=1.0).contains(&x)));
            rs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = build_report(&rs, &ms, settings).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
