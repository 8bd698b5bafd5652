//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use candgen::bpe::{train_bpe, Special, Vocabulary};
use candgen::corpus::{Corpus, EntityRecord, EntityType, MentionRecord, TypeScheme, DEFAULT_TYPE_LABELS};
use candgen::encoder::{EncoderConfig, HiddenStates};
use candgen::pipeline::{run_experiment, run_pipeline, ExperimentGrid, PipelineConfig};
use candgen::pooling::{reduce, PoolingKind};
use candgen::retrieval::{EmbeddingIndex, Metric};
use candgen::synthetic::{synthetic_corpus, SyntheticConfig, TOY_MENTION_SET};
use candgen::template::{build_entity_sequence, build_mention_sequence, Role, TemplateConfig};
use candgen::train::{build_training_pairs, gradient_check, inbatch_loss, BiEncoder, BiEncoderConfig, Freeze, ScoreMatrix};

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let toy = synthetic_corpus(&SyntheticConfig::default()).unwrap();
    let texts: Vec<String> = toy
        .corpus
        .world("toy")
        .unwrap()
        .entities()
        .iter()
        .flat_map(|e| [e.title.clone(), e.description.clone()])
        .collect();
    let vocab = train_bpe(&texts, 70, &TypeScheme::default()).unwrap();
    let encoder = EncoderConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        max_len: 6,
        vocab_size: vocab.len(),
        dropout: 0.0,
        seed: 0,
    };
    let mut worst = (0.0f64, String::new());
    for kind in PoolingKind::ALL {
        let model = BiEncoder::new(BiEncoderConfig::new(encoder, kind, false)).unwrap();
        let mentions = &toy.corpus.mentions(TOY_MENTION_SET).unwrap()[..2];
        let batch = build_training_pairs(&toy.corpus, mentions, &vocab, &model.config.template).unwrap();
        let report = gradient_check(&model, &batch, Freeze::None, 1e-3).unwrap();
        let w = report.worst().unwrap();
        if w.max_relative_error >= worst.0 {
            worst = (w.max_relative_error, format!("{kind} {}.{}", w.encoder, w.tensor));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        worst.0 < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {:.3e} at {} in {elapsed:.1?}", worst.0, worst.1),
    );
}

/// Independent scoring and full sort by (better score, smaller id).
fn oracle_ranking(rows: &Array2<f64>, ids: &[String], q: &Array1<f64>, metric: Metric) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = rows
        .outer_iter()
        .zip(ids)
        .map(|(r, id)| {
            let dot: f64 = r.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            let s = match metric {
                Metric::Dot => dot,
                Metric::Cosine => {
                    let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
                    dot / (nr * nq)
                }
                Metric::Euclidean => -r.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            };
            (s, id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.clone()).collect()
}

#[test]
fn criterion_2_retrieval_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..20 {
        let mut ids: Vec<String> = (0..1000).map(|i| format!("ent{i:05}")).collect();
        ids.shuffle(&mut rng);
        let mut rows = Array2::from_shape_fn((1000, 16), |_| rng.random::<f64>() * 2.0 - 1.0);
        for _ in 0..100 {
            let (src, dst) = (rng.random_range(0..1000), rng.random_range(0..1000));
            let copy = rows.row(src).to_owned();
            rows.row_mut(dst).assign(&copy);
        }
        let index = EmbeddingIndex::new(ids.clone(), rows.clone(), Metric::Dot, PoolingKind::Cls, "w").unwrap();
        let q = if rng.random_bool(0.5) {
            rows.row(rng.random_range(0..1000)).to_owned()
        } else {
            Array1::from_shape_fn(16, |_| rng.random::<f64>() * 2.0 - 1.0)
        };
        for metric in Metric::ALL {
            let got: Vec<String> = index.top_k(q.view(), 50, metric).unwrap().into_iter().map(|c| c.entity_id).collect();
            let expected = oracle_ranking(&rows, &ids, &q, metric);
            if got[..] != expected[..50] {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} mismatching lists of 60 in {elapsed:.1?}"),
    );
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

#[test]
fn criterion_3_metric_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 300;
    let ids: Vec<String> = (0..n).map(|i| format!("e{i:04}")).collect();
    let mut rows = Array2::zeros((n, 16));
    for mut r in rows.outer_iter_mut() {
        r.assign(&unit(Array1::from_shape_fn(16, |_| rng.random::<f64>() * 2.0 - 1.0)));
    }
    let index = EmbeddingIndex::new(ids, rows, Metric::Dot, PoolingKind::Cls, "w").unwrap();
    let mut disagreements = 0;
    for _ in 0..100 {
        let q = unit(Array1::from_shape_fn(16, |_| rng.random::<f64>() * 2.0 - 1.0));
        let lists: Vec<Vec<String>> = Metric::ALL
            .iter()
            .map(|&m| index.top_k(q.view(), n, m).unwrap().into_iter().map(|c| c.entity_id).collect())
            .collect();
        if lists[0] != lists[1] || lists[0] != lists[2] {
            disagreements += 1;
        }
    }
    verdict(3, disagreements == 0, format!("{disagreements} of 100 queries disagree"));
}

#[test]
fn criterion_4_pooling_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rows = rng.random_range(4..20);
        let len = rng.random_range(3..=rows);
        let dim = rng.random_range(1..12);
        let states = Array2::from_shape_fn((rows, dim), |_| rng.random::<f64>() * 4.0 - 2.0);
        let h = HiddenStates::new(states, len).unwrap();
        let m = rng.random_range(1..=len);
        let mut specials: Vec<usize> = (0..len).collect();
        specials.shuffle(&mut rng);
        specials.truncate(m);
        specials.sort_unstable();
        let get = |k, sp: &[usize]| reduce(&h, sp, k, sp.len().max(1)).unwrap().values;
        let avg = get(PoolingKind::Avg, &specials);
        let sum = get(PoolingKind::Sum, &specials);
        let avg_sp = get(PoolingKind::AvgSpecial, &specials);
        let sum_sp = get(PoolingKind::SumSpecial, &specials);
        worst = worst.max((&avg - &(&sum / len as f64)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        worst = worst.max((&sum_sp - &(&avg_sp * m as f64)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        let all: Vec<usize> = (0..len).collect();
        let all_avg_sp = get(PoolingKind::AvgSpecial, &all);
        worst = worst.max((&avg - &all_avg_sp).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    verdict(4, worst <= 1e-12, format!("largest deviation {worst:.3e} over 100 cases"));
}

#[test]
fn criterion_5_loss_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let single = inbatch_loss(&ScoreMatrix(Array2::from_elem((1, 1), 3.7))).unwrap().0;
    let uniform = inbatch_loss(&ScoreMatrix(Array2::from_elem((2, 2), -1.25))).unwrap().0;
    let mut shift_err = 0.0f64;
    let mut row_sum_err = 0.0f64;
    for _ in 0..50 {
        let b = rng.random_range(2..10);
        let s = Array2::from_shape_fn((b, b), |_| rng.random::<f64>() * 10.0 - 5.0);
        let (loss, grad) = inbatch_loss(&ScoreMatrix(s.clone())).unwrap();
        let mut shifted = s.clone();
        let row = rng.random_range(0..b);
        let c = rng.random::<f64>() * 100.0 - 50.0;
        shifted.row_mut(row).mapv_inplace(|v| v + c);
        let (loss2, _) = inbatch_loss(&ScoreMatrix(shifted)).unwrap();
        shift_err = shift_err.max((loss - loss2).abs());
        for r in grad.outer_iter() {
            row_sum_err = row_sum_err.max(r.sum().abs());
        }
    }
    let pass = single == 0.0
        && (uniform - std::f64::consts::LN_2).abs() <= 1e-12
        && shift_err <= 1e-10
        && row_sum_err <= 1e-12;
    verdict(
        5,
        pass,
        format!(
            "B=1 loss {single}, uniform |loss - ln 2| {:.1e}, shift {shift_err:.1e}, row sums {row_sum_err:.1e}",
            (uniform - std::f64::consts::LN_2).abs()
        ),
    );
}

#[test]
fn criterion_6_overfit_sanity() {
    let start = Instant::now();
    let toy = synthetic_corpus(&SyntheticConfig::default()).unwrap();
    let cfg = PipelineConfig::toy();
    assert_eq!((cfg.encoder.hidden, cfg.encoder.layers, cfg.encoder.max_len, cfg.train.epochs), (64, 2, 32, 30));
    let run = run_pipeline(&toy.corpus, TOY_MENTION_SET, TOY_MENTION_SET, &cfg).unwrap();
    let micro = &run.evaluation.report.micro;
    let curve: Vec<f64> = micro.values().copied().collect();
    let monotone = curve.windows(2).all(|w| w[0] <= w[1]);
    let elapsed = start.elapsed();
    verdict(
        6,
        micro[&1] >= 0.9 && micro[&5] == 1.0 && monotone && elapsed < Duration::from_secs(300),
        format!("acc@1 {:.3} acc@5 {:.3} curve {curve:?} in {elapsed:.1?}", micro[&1], micro[&5]),
    );
}

#[test]
fn criterion_7_ablation_harness() {
    let toy = synthetic_corpus(&SyntheticConfig::default()).unwrap();
    let grid = ExperimentGrid::default();
    let mut sums: BTreeMap<(PoolingKind, bool, Metric, usize), f64> = BTreeMap::new();
    let mut rows = 0;
    let mut shape_ok = true;
    for seed in 0..5 {
        let cfg = PipelineConfig { seed, ..PipelineConfig::toy() };
        let table = run_experiment(&toy.corpus, Some(&toy.types), TOY_MENTION_SET, TOY_MENTION_SET, &grid, &cfg).unwrap();
        rows = table.rows.len();
        shape_ok &= table.to_tsv().lines().count() == 37;
        for r in &table.rows {
            for (&k, &a) in &r.report.micro {
                *sums.entry((r.pooling, r.entity_types, r.metric, k)).or_default() += a / 5.0;
            }
        }
    }
    let mut violations = Vec::new();
    for (&(pooling, types, metric, k), &euclid) in &sums {
        if metric != Metric::Euclidean {
            continue;
        }
        let dot = sums[&(pooling, types, Metric::Dot, k)];
        if euclid > dot {
            violations.push(format!("{pooling}/types={types}/@{k}: euclidean {euclid:.3} > dot {dot:.3}"));
        }
    }
    verdict(
        7,
        rows == 36 && shape_ok && violations.is_empty(),
        format!("{rows} rows; euclidean above dot in {} cells {violations:?}", violations.len()),
    );
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..9);
    (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
}

#[test]
fn criterion_8_template_conformance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scheme = TypeScheme::default();
    let texts: Vec<String> = (0..400)
        .map(|_| (0..12).map(|_| random_word(&mut rng)).collect::<Vec<_>>().join(" "))
        .collect();
    let vocab: Vocabulary = train_bpe(&texts, 600, &scheme).unwrap();
    let (ms, me, ent) = (
        vocab.special(Special::MentionStart),
        vocab.special(Special::MentionEnd),
        vocab.special(Special::Ent),
    );
    let mut failures = Vec::new();
    for i in 0..1000 {
        let typed = rng.random_bool(0.5);
        let max_len = rng.random_range(12..48);
        let cfg = TemplateConfig::new(max_len, typed);
        let label = if rng.random_bool(0.2) {
            EntityType::unknown()
        } else {
            scheme.parse(DEFAULT_TYPE_LABELS[rng.random_range(0..DEFAULT_TYPE_LABELS.len())]).unwrap()
        };
        let n_words = rng.random_range(1..60);
        let words: Vec<String> = (0..n_words).map(|_| random_word(&mut rng)).collect();
        let start = rng.random_range(0..n_words);
        let end = (start + rng.random_range(0..3)).min(n_words - 1);
        let mention = MentionRecord {
            mention_id: format!("m{i}"),
            context_document_id: "d".into(),
            start_index: start,
            end_index: end,
            gold_entity_id: "e".into(),
            world: "w".into(),
            entity_type: label.clone(),
        };
        let entity = EntityRecord {
            entity_id: "e".into(),
            title: (0..rng.random_range(1..4)).map(|_| random_word(&mut rng)).collect::<Vec<_>>().join(" "),
            description: (0..rng.random_range(0..80)).map(|_| random_word(&mut rng)).collect::<Vec<_>>().join(" "),
            world: "w".into(),
            entity_type: label.clone(),
        };
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let m = build_mention_sequence(&mention, &refs, &vocab, &cfg).unwrap();
        let e = build_entity_sequence(&entity, &vocab, &cfg).unwrap();
        let count = |ids: &[u32], t: u32| ids.iter().filter(|&&x| x == t).count();
        let surface = vocab.encode_words(&refs[start..=end]).len();
        let mention_need = vocab.encode_words(&refs).len() + cfg.special_count(candgen::template::Side::Mention)
            + if typed { surface } else { 0 };
        let entity_need = vocab.encode_words(&entity.title.split_whitespace().collect::<Vec<_>>()).len()
            + vocab.encode_words(&entity.description.split_whitespace().collect::<Vec<_>>()).len()
            + cfg.special_count(candgen::template::Side::Entity);
        let mut ok = count(m.real_ids(), ms) == 1 && count(m.real_ids(), me) == 1 && count(e.real_ids(), ent) == 1;
        ok &= m.ids.len() == max_len && e.ids.len() == max_len;
        ok &= mention_need <= max_len || m.len == max_len;
        ok &= entity_need <= max_len || e.len == max_len;
        if typed {
            let ty = vocab.type_token_id(&label);
            ok &= m.ids[1] == ty && e.ids[1] == ty;
            ok &= m.special_positions.iter().any(|&(r, p)| r == Role::EntityType && p == 1);
        }
        if !ok {
            failures.push(i);
        }
    }
    verdict(8, failures.is_empty(), format!("{} of 1000 samples non-conforming {failures:?}", failures.len()));
}

fn model_bytes(model: &BiEncoder) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.iter().flat_map(|p| std::fs::read(p).unwrap()).collect()
}

fn index_bytes(index: &EmbeddingIndex) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("i");
    index.save(&prefix).unwrap();
    ["ids", "bin", "meta"]
        .iter()
        .flat_map(|ext| std::fs::read(dir.path().join(format!("i.{ext}"))).unwrap())
        .collect()
}

#[test]
fn criterion_9_determinism() {
    let toy = synthetic_corpus(&SyntheticConfig::default()).unwrap();
    let mut typed: Corpus = toy.corpus.clone();
    typed.apply_type_annotations(&toy.types);
    let cfg = PipelineConfig {
        pooling: PoolingKind::ConcSpecial,
        use_entity_type: true,
        seed: 9,
        ..PipelineConfig::toy()
    };
    let run_in = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pipeline(&typed, TOY_MENTION_SET, TOY_MENTION_SET, &cfg).unwrap())
    };
    let a = run_in(1);
    let b = run_in(4);
    let same_model = model_bytes(&a.model) == model_bytes(&b.model);
    let same_index = a.evaluation.indices.len() == b.evaluation.indices.len()
        && a.evaluation
            .indices
            .iter()
            .zip(&b.evaluation.indices)
            .all(|((_, x), (_, y))| index_bytes(x) == index_bytes(y));
    let same_report = a.evaluation.report.to_key_values() == b.evaluation.report.to_key_values()
        && a.evaluation.report.curve_tsv() == b.evaluation.report.curve_tsv();
    let same_log = a.log.to_tsv() == b.log.to_tsv();
    verdict(
        9,
        same_model && same_index && same_report && same_log,
        format!("checkpoint {same_model}, index {same_index}, report {same_report}, log {same_log} (1 vs 4 threads)"),
    );
}
