//! Acceptance suite: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Runs without the libtest harness so the lines are always shown.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use common::attention::{compare_with_oracle, instance};
use common::{dot, max_abs_diff, model_grad_error, random_tensor};
use posbench::attention::{relative_attention, scaled_dot_attention};
use posbench::data::synth::{self, Profile, SynthSpec};
use posbench::data::InteractionDataset;
use posbench::encodings::{rope_rotate_at, rotatory_values, EncodingSpec, Variant};
use posbench::metrics::{is_hit, ndcg_single, rank_of, EvalResult};
use posbench::model::{build_sequence, train, Model, ModelConfig, SequenceRow};
use posbench::numeric::{Graph, Rng, Tensor};
use posbench::stability::{
    aggregate, confidence_interval, recommend_encoding, summary_tsv, sweep, SweepSummary, DEFAULT_THRESHOLD,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 ------------------------------------------------------------------------

fn tiny_rows(model: &Model, rng: &mut Rng) -> Vec<SequenceRow> {
    (0..3)
        .map(|_| {
            let len = 2 + rng.below(5);
            let mut items: Vec<usize> = (0..model.num_items).collect();
            rng.shuffle(&mut items);
            let history = &items[..len];
            let exclude: HashSet<usize> = history.iter().copied().collect();
            build_sequence(history, model.config.max_len, &exclude, model.num_items, rng).unwrap()
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let variants = [
        Variant::Learnt,
        Variant::LearntCon,
        Variant::AbsCon,
        Variant::Rotatory,
        Variant::RotatoryCon,
        Variant::Rmha4,
        Variant::None,
    ];
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for variant in variants {
        for seed in 0..5 {
            let cfg = ModelConfig {
                dim: 8,
                ff_hidden: 12,
                blocks: 2,
                heads: 2,
                dropout: 0.0,
                max_len: 5,
                encoding: EncodingSpec::new(variant),
                ..ModelConfig::default()
            };
            let mut rng = Rng::new(seed, 11);
            let model = Model::new(cfg, 12, None, &mut rng).unwrap();
            let rows = tiny_rows(&model, &mut rng);
            let (err, name) = model_grad_error(&model, &rows);
            worst = worst.max(err);
            if err >= 1e-4 {
                failures.push(format!("{variant}/seed {seed}/{name}: {err:.2e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} variants x 5 instances, full-model loss, max rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 120s){}",
            variants.len(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn rope_offset_identity() -> Outcome {
    let mut rng = Rng::new(2, 0);
    let mut worst: f64 = 0.0;
    for dh in [4usize, 8, 16] {
        for _ in 0..100 {
            let q: Vec<f64> = (0..dh).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let k: Vec<f64> = (0..dh).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let m = rng.below(200) as f64;
            let n = rng.below(200) as f64;
            let lhs = dot(&rope_rotate_at(&q, m, 10000.0), &rope_rotate_at(&k, n, 10000.0));
            let rhs = dot(&rope_rotate_at(&q, m - n, 10000.0), &k);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    check(worst <= 1e-10, format!("300 cases, d_h in {{4,8,16}}, max |diff| {worst:.2e} (<= 1e-10)"))
}

// 3 ------------------------------------------------------------------------

fn rotatory_pair_norm() -> Outcome {
    let mut rng = Rng::new(3, 0);
    let mut worst: f64 = 0.0;
    for len in [1usize, 35, 75] {
        for d in [4usize, 90] {
            let e = Tensor::from_fn(&[len, d / 2], |_| rng.uniform_in(-50.0, 50.0));
            let t = rotatory_values(&e).unwrap();
            for pair in t.data().chunks(2) {
                worst = worst.max((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("L in {{1,35,75}}, d in {{4,90}}, max |norm^2 - 1| {worst:.2e} (<= 1e-12)"))
}

// 4 ------------------------------------------------------------------------

fn relative_attention_oracle() -> Outcome {
    let clip = 4;
    let mut worst_rel: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    for (len, dh) in [(5usize, 6usize), (8, 4)] {
        for seed in 0..3 {
            let inst = instance(2, 2, len, dh, seed);
            let mut rng = Rng::new(seed, 4);
            let ak = random_tensor(&[2 * clip + 1, dh], &mut rng, 1.0);
            let av = random_tensor(&[2 * clip + 1, dh], &mut rng, 1.0);
            worst_rel = worst_rel.max(compare_with_oracle(&inst, Some(&ak), Some(&av), clip));
            worst_rel = worst_rel.max(compare_with_oracle(&inst, Some(&ak), None, clip));

            let mut g = Graph::new();
            let q = g.constant(inst.q.clone());
            let k = g.constant(inst.k.clone());
            let v = g.constant(inst.v.clone());
            let mask = inst.mask.expand(2);
            let zk = g.constant(Tensor::zeros(&[2 * clip + 1, dh]));
            let zv = g.constant(Tensor::zeros(&[2 * clip + 1, dh]));
            let rel = relative_attention(&mut g, q, k, v, zk, Some(zv), clip, &mask).unwrap();
            let plain = scaled_dot_attention(&mut g, q, k, v, &mask).unwrap();
            worst_zero = worst_zero.max(max_abs_diff(g.value(rel), g.value(plain)));
        }
    }
    check(
        worst_rel <= 1e-10 && worst_zero <= 1e-12,
        format!("5x6 and 8x4: oracle diff {worst_rel:.2e} (<= 1e-10), zero tables vs plain {worst_zero:.2e} (<= 1e-12)"),
    )
}

// 5 ------------------------------------------------------------------------

fn ci_reproduction() -> Outcome {
    let (ci, len) = confidence_interval(56.0, 0.96, 9);
    let (_, len2) = confidence_interval(50.0, 4.17, 5);
    // the same row rebuilt from nine per-seed values
    let a = 0.96;
    let hits = [-a, a, -a, a, -a, a, -a, a, 0.0].map(|x| (56.0 + x) / 100.0);
    let results = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| posbench::stability::SeedResult {
            seed: k as u64,
            hit_at_10: h,
            ndcg: h / 2.0,
            best_epoch: 1,
        })
        .collect();
    let s = aggregate(&ModelConfig::default(), results).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() <= 0.01 + 1e-9;
    check(
        close(ci.0, 55.37) && close(ci.1, 56.63) && close(len, 1.26) && close(len2, 7.32) && s.ci == ci && s.ci_length == len,
        format!(
            "(56.00, 0.96, 9) -> [{:.2}, {:.2}] length {len:.2}; (4.17, 5) -> length {len2:.2}; from seeds [{:.2}, {:.2}]",
            ci.0, ci.1, s.ci.0, s.ci.1
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn density_reproduction() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, users, items, rows, expect) in
        [("Beauty", 52_204, 57_289, 394_908, 1.320e-4), ("Submen2", 10_000, 45_129, 74_391, 1.648e-4)]
    {
        let ds = synth::generate(&SynthSpec::new(Profile::Random, users, items, 6).with_rows(rows)).unwrap();
        let s = ds.stats();
        let rel = (s.density / expect - 1.0).abs();
        ok &= rel < 0.005 && (s.users, s.items, s.interactions) == (users, items, rows);
        parts.push(format!("{name} {:.3e} (target {expect:.3e}, off {:.3}%)", s.density, 100.0 * rel));
    }
    check(ok, parts.join("; "))
}

// 7 ------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    // every placement of the truth among 11 fixed negatives, with ties
    let negatives = [0.9, 0.8, 0.8, 0.7, 0.6, 0.5, 0.5, 0.4, 0.3, 0.2, 0.1];
    let truths = [1.0, 0.9, 0.85, 0.8, 0.75, 0.5, 0.45, 0.35, 0.25, 0.15, 0.05, 0.0];
    let mut ranks = Vec::new();
    let mut mismatches = 0;
    for &t in &truths {
        let mut all: Vec<(f64, bool)> = negatives.iter().map(|&s| (s, false)).collect();
        all.push((t, true));
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let brute = 1 + all.iter().position(|x| x.1).unwrap();
        let r = rank_of(t, &negatives);
        mismatches += usize::from(r != brute);
        let brute_hit = f64::from(u8::from(brute <= 10));
        let brute_ndcg = if brute <= 10 { 1.0 / ((brute + 1) as f64).log2() } else { 0.0 };
        mismatches += usize::from(f64::from(u8::from(is_hit(r))) != brute_hit || ndcg_single(r) != brute_ndcg);
        ranks.push(r);
    }
    let result = EvalResult::from_ranks(ranks.clone(), 12, 0).unwrap();
    let hits = ranks.iter().filter(|&&r| r <= 10).count() as f64 / ranks.len() as f64;
    check(
        mismatches == 0 && ndcg_single(3) == 0.5 && result.hit_at_10 == hits,
        format!("12 candidates, {} truth placements, {mismatches} mismatches; ndcg_single(3) = {}", truths.len(), ndcg_single(3)),
    )
}

// 8 ------------------------------------------------------------------------

fn memorizable() -> InteractionDataset {
    synth::generate(&SynthSpec::new(Profile::Memorizable, 200, 50, 7).with_lengths(8, 20)).unwrap()
}

fn memorizable_config(variant: Variant, epochs: usize) -> ModelConfig {
    ModelConfig {
        dim: 32,
        ff_hidden: 64,
        blocks: 2,
        heads: 1,
        dropout: 0.1,
        max_len: 20,
        lr: 5e-3,
        epochs,
        batch_size: 64,
        encoding: EncodingSpec::new(variant),
        ..ModelConfig::default()
    }
}

fn training_sanity() -> Outcome {
    let start = Instant::now();
    let out = train(&memorizable_config(Variant::Learnt, 40), &memorizable()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(
        out.test.hit_at_10 >= 0.95 && secs < 300.0,
        format!(
            "Learnt, 200 users / 50 items, 40 epochs: test Hit@10 {:.3} (>= 0.95) at best epoch {}, {secs:.1}s (< 300s)",
            out.test.hit_at_10, out.best_epoch
        ),
    )
}

// 9 ------------------------------------------------------------------------

const SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

fn positional() -> InteractionDataset {
    synth::generate(&SynthSpec::new(Profile::Positional, 600, 60, 7).with_lengths(12, 18)).unwrap()
}

fn positional_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        dim: 16,
        ff_hidden: 32,
        blocks: 2,
        heads: 1,
        dropout: 0.1,
        max_len: 18,
        lr: 5e-3,
        epochs: 60,
        batch_size: 64,
        encoding: EncodingSpec::new(variant),
        ..ModelConfig::default()
    }
}

fn pooled_margin(a: &SweepSummary, b: &SweepSummary) -> f64 {
    let se = (a.hit_dev.powi(2) / a.runs as f64 + b.hit_dev.powi(2) / b.runs as f64).sqrt();
    2.0 * se
}

fn directional_property() -> Outcome {
    let start = Instant::now();
    let ds = positional();
    let run = |v| sweep(&positional_config(v), &ds, &SEEDS, 1, None, None).unwrap().summary;
    let none = run(Variant::None);
    let mut ok = true;
    let mut parts = vec![format!("None {:.2} +- {:.2}", none.hit_mean, none.hit_dev)];
    for v in [Variant::Rmha4, Variant::RotatoryCon] {
        let s = run(v);
        let margin = pooled_margin(&s, &none);
        let pass = s.hit_mean - none.hit_mean > margin;
        ok &= pass;
        parts.push(format!(
            "{v} {:.2} +- {:.2} (gain {:.2} vs 2 SE {:.2}: {})",
            s.hit_mean,
            s.hit_dev,
            s.hit_mean - none.hit_mean,
            margin,
            if pass { "ok" } else { "not significant" }
        ));
    }
    parts.push(format!("{:.0}s", start.elapsed().as_secs_f64()));
    check(ok, parts.join("; "))
}

// 10 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let ds = memorizable();
    let cfg = memorizable_config(Variant::RotatoryCon, 4);
    let a = train(&cfg, &ds).unwrap().history.to_tsv();
    let b = train(&cfg, &ds).unwrap().history.to_tsv();

    let dir = tempfile::tempdir().unwrap();
    let full_ledger = dir.path().join("full.jsonl");
    let seeds = [1, 2, 3];
    let full = sweep(&cfg, &ds, &seeds, 1, Some(&full_ledger), None).unwrap();
    // interrupted after the first seed, mid-way through writing the second
    let text = std::fs::read_to_string(&full_ledger).unwrap();
    let cut = dir.path().join("cut.jsonl");
    let first = text.lines().next().unwrap();
    std::fs::write(&cut, format!("{first}\n{}", &text.lines().nth(1).unwrap()[..20])).unwrap();
    let resumed = sweep(&cfg, &ds, &seeds, 1, Some(&cut), None).unwrap();
    let same_summary = summary_tsv(&[full.summary.clone()]) == summary_tsv(&[resumed.summary.clone()])
        && full.summary.results == resumed.summary.results;
    check(
        a == b && same_summary && resumed.resumed.len() == 1,
        format!(
            "history TSV identical: {}; resumed sweep ({} seed from ledger) matches uninterrupted: {same_summary}",
            a == b,
            resumed.resumed.len()
        ),
    )
}

// 11 -----------------------------------------------------------------------

fn decision_tree() -> Outcome {
    // a tiny noisy log: few test users, so Hit@10 swings between seeds
    let noisy = synth::generate(&SynthSpec::new(Profile::Random, 40, 30, 5).with_rows(320)).unwrap();
    let noisy_cfg = ModelConfig {
        dim: 16,
        ff_hidden: 32,
        blocks: 1,
        max_len: 10,
        epochs: 5,
        batch_size: 16,
        ..memorizable_config(Variant::None, 5)
    };
    let high = sweep(&noisy_cfg, &noisy, &SEEDS, 1, None, None).unwrap().summary;
    // a learnable log: every seed converges to nearly the same score
    let low = sweep(&memorizable_config(Variant::None, 20), &memorizable(), &SEEDS, 1, None, None).unwrap().summary;
    let rec_high = recommend_encoding(&high, DEFAULT_THRESHOLD).unwrap();
    let rec_low = recommend_encoding(&low, DEFAULT_THRESHOLD).unwrap();
    check(
        rec_high.variant == Variant::Rmha4 && rec_low.variant == Variant::RotatoryCon,
        format!("noisy baseline -> {rec_high}; memorizable baseline -> {rec_low}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", gradient_suite),
        ("RoPE relative-offset identity", rope_offset_identity),
        ("rotatory pair norm", rotatory_pair_norm),
        ("relative attention oracle", relative_attention_oracle),
        ("confidence interval reproduction", ci_reproduction),
        ("density reproduction", density_reproduction),
        ("metric oracles", metric_oracles),
        ("training sanity", training_sanity),
        ("directional encoding property", directional_property),
        ("determinism", determinism),
        ("decision tree", decision_tree),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let n = k + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} ({name}): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
