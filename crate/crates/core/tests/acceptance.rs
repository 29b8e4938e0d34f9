//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any failure.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use confdyn::confidence::{self, Metric, ScoreConfig, ScoreTable};
use confdyn::dynamics::{self, DynamicsConfig, PairCase, SamplePoint};
use confdyn::records::{BeamSet, DropoutSet, GenerationRecord};
use confdyn::stats::{self, AnovaHypothesis};
use confdyn::synth::{generate, DriftModel, SynthSpec};
use confdyn::textsim::{self, QualityMetric};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let config = ScoreConfig::default();
    let mut rng = rng(2024);
    let mut worst = 0.0f64;
    for m in Metric::ALL {
        for i in 0..25 {
            let r = random_record(&mut rng, i);
            let got = config.compute(m, &r).map_err(|e| format!("{m}: {e}"))?;
            let want = oracle_metric(m.name(), &r);
            ensure(rel_close(got, want, 1e-9), format!("{m} record {i}: {got} vs {want}"))?;
            worst = worst.max((got - want).abs() / want.abs().max(1e-300));
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(5), format!("took {took:?}"))?;
    Ok(format!("12 metrics x 25 records, worst rel err {worst:.1e}, {took:.2?}"))
}

fn single_dropout(r: &GenerationRecord, i: usize) -> DropoutSet {
    let d = r.dropout.as_ref().unwrap();
    DropoutSet {
        samples: vec![d.samples[i].clone()],
        aligned_distributions: d.aligned_distributions.as_ref().map(|a| vec![a[i].clone()]),
    }
}

fn reductions() -> Check {
    let mut rng = rng(55);
    for i in 0..50 {
        let r = random_record(&mut rng, i);
        let d = single_dropout(&r, 0);
        let s = &d.samples[0];
        ensure(
            confidence::do_ent(&d).unwrap() == confidence::avg_tok_ent(s).unwrap(),
            format!("do_ent at one sample, record {i}"),
        )?;
        let top = r.beams.as_ref().unwrap().beams[0].clone();
        let one = BeamSet::from(vec![top.clone()]);
        ensure(
            confidence::bs_imp_wt(&one).unwrap() == -confidence::avg_tok_prob(&top).unwrap(),
            format!("bs_imp_wt at one beam, record {i}"),
        )?;
        let mut same = r.dropout.clone().unwrap();
        let n = same.samples.len();
        same.samples = vec![same.samples[0].clone(); n];
        if let Some(a) = same.aligned_distributions.as_mut() {
            *a = vec![a[0].clone(); n];
        }
        ensure(confidence::do_bleu_var(&same).unwrap() == 0.0, format!("do_bleu_var, record {i}"))?;
        ensure(
            confidence::do_kl_div(&same, r.hypothesis.len()).unwrap() == 0.0,
            format!("do_kl_div, record {i}"),
        )?;
    }
    Ok("50 records, all four identities exact".into())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn spearman() -> Check {
    let x: Vec<f64> = (0..8).map(|i| i as f64 * 1.5 - 2.0).collect();
    let perms = permutations(8);
    let mut worst = 0.0f64;
    for p in &perms {
        let y: Vec<f64> = p.iter().map(|&i| (i as f64).powi(3)).collect();
        let err = (stats::spearman_rho(&x, &y).unwrap() - spearman_oracle(&x, &y)).abs();
        worst = worst.max(err);
    }
    ensure(worst <= 1e-12, format!("distinct orderings worst {worst:e}"))?;
    let mut rng = rng(8);
    let mut tied = 0;
    while tied < 100 {
        let n = rng.random_range(3..=25);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let Ok(rho) = stats::spearman_rho(&x, &y) else { continue };
        let err = (rho - spearman_oracle(&x, &y)).abs();
        ensure(err <= 1e-12, format!("tied case {tied}: err {err:e}"))?;
        worst = worst.max(err);
        tied += 1;
    }
    Ok(format!("{} orderings + 100 tied cases, worst abs err {worst:.1e}", perms.len()))
}

fn auroc() -> Check {
    let mut rng = rng(31);
    let mut cases = 0;
    let mut worst = 0.0f64;
    while cases < 200 {
        let n = rng.random_range(2..=30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
            continue;
        }
        let err = (stats::auroc(&scores, &labels).unwrap() - auroc_oracle(&scores, &labels)).abs();
        ensure(err <= 1e-12, format!("case {cases}: err {err:e}"))?;
        worst = worst.max(err);
        cases += 1;
    }
    ensure(stats::auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap() == 1.0, "perfect != 1")?;
    ensure(stats::auroc(&[0.5; 4], &[true, false, true, false]).unwrap() == 0.5, "constant != 0.5")?;
    ensure(stats::auroc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap() == 0.75, "example != 0.75")?;
    Ok(format!("200 random cases, worst abs err {worst:.1e}; 1.0 / 0.5 / 0.75 exact"))
}

fn anova_holm() -> Check {
    let cases: Vec<AnovaCase> = load_json("anova.json");
    ensure(cases.len() == 20, "fixture size")?;
    let mut worst = 0.0f64;
    for (i, c) in cases.iter().enumerate() {
        let r = stats::one_way_anova(&c.groups).map_err(|e| e.to_string())?;
        let ef = (r.f_statistic - c.f).abs() / c.f.abs().max(1.0);
        let ep = (r.p_value - c.p).abs();
        ensure(ef <= 1e-6 && ep <= 1e-6, format!("case {i}: F err {ef:e}, p err {ep:e}"))?;
        worst = worst.max(ef).max(ep);
    }
    let mut rng = rng(77);
    let alphas = [0.0005, 0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.9];
    for trial in 0..100 {
        let family: Vec<AnovaHypothesis> = (0..8)
            .map(|h| AnovaHypothesis {
                label: format!("h{h}"),
                groups: (0..3)
                    .map(|g| {
                        let shift = g as f64 * rng.random_range(0.0..0.6);
                        (0..6).map(|_| rng.random_range(0.0..1.0) + shift).collect()
                    })
                    .collect(),
            })
            .collect();
        let mut previous = vec![false; family.len()];
        for a in alphas {
            let now: Vec<bool> = stats::anova_holm(&family, a)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|r| r.rejected)
                .collect();
            ensure(
                previous.iter().zip(&now).all(|(b, n)| !b || *n),
                format!("trial {trial}: rejection withdrawn at alpha {a}"),
            )?;
            previous = now;
        }
    }
    Ok(format!("20 cases worst err {worst:.1e}; Holm monotone over 100 families x {} alphas", alphas.len()))
}

fn validated(spec: &SynthSpec) -> (Vec<GenerationRecord>, confdyn::synth::SynthTruth) {
    let out = generate(spec).unwrap();
    let mut records = out.records;
    for r in &mut records {
        r.validate(spec.n_dropout).unwrap();
    }
    (records, out.truth)
}

fn two_tables(records: &[GenerationRecord]) -> (ScoreTable, ScoreTable) {
    let config = ScoreConfig {
        metrics: vec![Metric::AvgTokProb],
        qualities: vec![QualityMetric::TokenF1],
        ..ScoreConfig::default()
    };
    let mut by: BTreeMap<_, _> = ScoreTable::build(records, &config).by_checkpoint();
    let (_, a) = by.pop_first().unwrap();
    let (_, b) = by.pop_first().unwrap();
    (a, b)
}

fn planted_truth() -> Check {
    let start = Instant::now();
    let spec = SynthSpec {
        n_samples: 1000,
        drift: DriftModel::UniformLogprobInflation { epsilon: 0.1 },
        ..SynthSpec::default()
    };
    let (records, truth) = validated(&spec);
    let truth = &truth.transitions[0];
    let (from, to) = two_tables(&records);
    let (report, _) = dynamics::dynamics_report(
        &from,
        &to,
        Metric::AvgTokProb,
        QualityMetric::TokenF1,
        &DynamicsConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let q = &report.quadrants;
    let over = q.proportions[1];
    let want = truth.negative_quality_fraction();
    let took = start.elapsed();
    ensure(over == want, format!("overconfident {over} vs truth {want}"))?;
    ensure(q.overconfident > q.underconfident, format!("II {} vs IV {}", q.overconfident, q.underconfident))?;
    ensure(took < Duration::from_secs(30), format!("took {took:?}"))?;
    Ok(format!(
        "overconfident {over} == truth {want}; II {} > IV {}; {took:.2?}",
        q.overconfident, q.underconfident
    ))
}

fn pt(id: &str, q0: f64, c0: f64, q1: f64, c1: f64) -> SamplePoint {
    SamplePoint {
        sample_id: id.into(),
        quality_from: q0,
        confidence_from: c0,
        quality_to: q1,
        confidence_to: c1,
    }
}

fn pair_cases() -> Check {
    // Eligible at the start: AB, AC, AD, BC. Later AB flips confidence only,
    // AD flips quality only, AC and BC keep both.
    let pts = vec![
        pt("A", 0.1, 0.1, 0.1, 0.5),
        pt("B", 0.3, 0.3, 0.3, 0.3),
        pt("C", 0.5, 0.5, 0.7, 0.6),
        pt("D", 0.7, 0.2, 0.05, 0.7),
    ];
    let s = dynamics::pair_case_proportions(&pts, None, 0).map_err(|e| e.to_string())?;
    ensure(s.eligible_pairs == 4, format!("eligible {}", s.eligible_pairs))?;
    ensure(s.proportion(PairCase::QualSameConfFlips) == 0.25, "case 1 != 1/4")?;
    ensure(s.proportion(PairCase::QualFlipsConfSame) == 0.25, "case 2 != 1/4")?;

    let spec = SynthSpec {
        n_samples: 200,
        drift: DriftModel::None,
        rng_seed: 3,
        ..SynthSpec::default()
    };
    let (records, _) = validated(&spec);
    let (from, to) = two_tables(&records);
    let (report, _) = dynamics::dynamics_report(
        &from,
        &to,
        Metric::AvgTokProb,
        QualityMetric::TokenF1,
        &DynamicsConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let pc = report.pair_cases.ok_or("no pair cases")?;
    let (c1, c2) = (pc.count(PairCase::QualSameConfFlips), pc.count(PairCase::QualFlipsConfSame));
    ensure(c1 > c2, format!("case 1 {c1} vs case 2 {c2}"))?;
    Ok(format!("fixture 1/4 and 1/4 exact; frozen corpus case 1 {c1} > case 2 {c2}"))
}

fn quality_metrics() -> Check {
    let cases: Vec<TextCase> = load_json("text_metrics.json");
    ensure(cases.len() == 50, "fixture size")?;
    let mut worst = 0.0f64;
    for c in &cases {
        let e1 = (textsim::chrf_plus(&c.hyp, &c.refs).value - c.chrf_plus).abs();
        let e2 = (textsim::sentence_bleu(&c.hyp, &c.refs[0]).value - c.bleu_first_ref).abs();
        ensure(e1 <= 1e-4 && e2 <= 1e-4, format!("{:?}: chrF err {e1:e}, BLEU err {e2:e}", c.hyp))?;
        worst = worst.max(e1).max(e2);
    }
    let refs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let hand = [
        (textsim::token_f1("the cat sat", &refs(&["the cat sat"])).value, 1.0),
        (textsim::token_f1("the cat sat", &refs(&["the cat is here"])).value, 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5)),
        (textsim::token_f1("a b", &refs(&["c d"])).value, 0.0),
        (textsim::token_f1("x", &refs(&["y", "x"])).value, 1.0),
        (textsim::exact_match("  Paris ", &refs(&["paris"])).value, 1.0),
        (textsim::exact_match("Paris.", &refs(&["paris"])).value, 0.0),
        (textsim::exact_match("new  york", &refs(&["boston", "New York"])).value, 1.0),
    ];
    for (i, (got, want)) in hand.iter().enumerate() {
        ensure(got == want, format!("hand value {i}: {got} vs {want}"))?;
    }
    Ok(format!("50 fixtures worst err {worst:.1e}; {} F1/EM hand values exact", hand.len()))
}

fn confdyn(args: &[&str]) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_confdyn"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(o.stdout)
}

fn pipeline(work: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let w = |rel: &str| work.join(rel).to_str().unwrap().to_string();
    let input = w("syn/records.jsonl");
    confdyn(&["synth", "--out", &w("syn"), "--n-samples", "40", "--n-epochs", "2", "--seeds", "0,1", "--drift", "uniform_logprob_inflation", "--seed", "9"])?;
    let validate = confdyn(&["validate", "--input", &input])?;
    confdyn(&["score", "--input", &input, "--out", &w("score")])?;
    confdyn(&["correlate", "--input", &input, "--out", &w("correlate"), "--anova", "epoch"])?;
    confdyn(&["dynamics", "--input", &input, "--out", &w("dynamics"), "--adjacent", "--per-sample-dump", "--format", "json"])?;
    confdyn(&["detect", "--input", &input, "--out", &w("detect")])?;
    let mut files = BTreeMap::new();
    files.insert("validate.stdout".to_string(), validate);
    let mut stack = vec![work.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(work).unwrap().display().to_string();
                files.insert(rel, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = root.path().join("work");
    let mut runs = Vec::new();
    for i in 0..2 {
        if work.exists() {
            fs::remove_dir_all(&work).map_err(|e| e.to_string())?;
        }
        fs::create_dir_all(&work).map_err(|e| e.to_string())?;
        runs.push(pipeline(&work)?);
        fs::rename(&work, root.path().join(format!("run{i}"))).map_err(|e| e.to_string())?;
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.keys().eq(b.keys()), "different file sets")?;
    for (name, bytes) in a {
        ensure(&b[name] == bytes, format!("{name} differs"))?;
    }
    Ok(format!("{} output files byte-identical across two runs", a.len()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 9] = [
        ("metric formula oracles", metric_oracles),
        ("metric reductions", reductions),
        ("spearman rank oracle", spearman),
        ("auroc pair oracle", auroc),
        ("anova and holm", anova_holm),
        ("dynamics planted truth", planted_truth),
        ("pair-case decomposition", pair_cases),
        ("quality metrics", quality_metrics),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

