//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use htp_cli::{inspect_text, Cli, InspectArgs};
use htp_core::eval::{area_mask, echo_duplicate, ndcg_at_k, EchoArea, Ranked, RankingResult};
use htp_core::model::{
    embed_mean, forward, init_weights, stochastic_error, ForwardOptions, LayerRange, ModelConfig,
};
use htp_core::partition::{augment, build_partition, segment_sentences, AugmentedSequence};
use htp_core::rewire::{
    embed_document, f_global, f_local, prepare_document, DocumentConfig, Grouping, Method, Readout,
    RewirePlan,
};
use htp_core::sensitivity::{
    bound_sweep, build_mixing, estimate_lipschitz, left_drift_limit, path_sum_bruteforce,
    MixingSystem, NormScope, SweepConfig,
};
use htp_core::{seed, tokens, Execution};
use htp_verify::{
    brute_ndcg, expected_copy_positions, random_bytes, random_stochastic, random_text,
};
use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:?}, limit {limit:?}")
    })
}

/// Lower-triangular, unit-row-sum structure of traces, M and A on random models.
fn mixing_structure() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for model in 0..50u64 {
        let layers = rng.random_range(1..=4);
        let n = rng.random_range(2..=8);
        let d = *[4usize, 8].choose(&mut rng).unwrap();
        let cfg = ModelConfig {
            num_layers: layers,
            hidden_dim: d,
            mlp_hidden: 2 * d,
            max_seq_len: 16,
            seed: model,
            tp_layer_range: None,
            exit_layer: layers,
            ..ModelConfig::default()
        };
        let w = init_weights(&cfg).map_err(|e| e.to_string())?;
        let w = w
            .map_layers(|_, l| {
                let mut l = l.clone();
                l.query *= 40.0;
                l.key *= 40.0;
                l
            })
            .map_err(|e| e.to_string())?;
        let out = forward(&w, &random_bytes(&mut rng, n), ForwardOptions::capture())
            .map_err(|e| e.to_string())?;
        let trace = out.trace.unwrap();
        let profile =
            estimate_lipschitz(&w, NormScope::Local(&out.hidden)).map_err(|e| e.to_string())?;
        let mix = build_mixing(&trace, &profile).map_err(|e| e.to_string())?;
        for m in trace
            .layers
            .iter()
            .chain(&mix.m)
            .chain(std::iter::once(&mix.a))
        {
            worst = worst.max(stochastic_error(m));
        }
    }
    ensure(worst <= 1e-9, || format!("structure error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "50 models, worst deviation {worst:.1e}, {:?}",
        start.elapsed()
    ))
}

/// Brute-force path sums against the scaled product entry.
fn path_sum() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for _draw in 0..20 {
        for n in 1..=5 {
            for layers in 1..=3 {
                let attn: Vec<_> = (0..layers)
                    .map(|_| random_stochastic(n, &mut rng))
                    .collect();
                let betas: Vec<f64> = (0..layers).map(|_| rng.random_range(0.05..4.0)).collect();
                let mix = MixingSystem::from_layers(n, &attn, &betas).map_err(|e| e.to_string())?;
                for j in 0..n {
                    for i in 0..n {
                        let brute = path_sum_bruteforce(&mix, j, i).map_err(|e| e.to_string())?;
                        let want = mix.r_product() * mix.a[(j, i)];
                        worst = worst.max((brute - want).abs());
                        checked += 1;
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{checked} entries, max error {worst:.1e}"))
}

/// Frozen-attention Jacobian norms against both bounds on 100 seeds.
fn jacobian_bounds() -> Outcome {
    let start = Instant::now();
    let cfg = SweepConfig {
        num_layers: 3,
        hidden_dim: 8,
        seq_len: 8,
        seeds: (0..100)
            .map(|i| seed::derive_indexed(0, seed::EXPERIMENT, i))
            .collect(),
        ..SweepConfig::default()
    };
    let reports = bound_sweep(&cfg, Execution::Parallel).map_err(|e| e.to_string())?;
    let violations: usize = reports.iter().map(|r| r.report.violations(1e-6)).sum();
    let frozen = reports.iter().all(|r| r.report.frozen);
    let max_ratio = reports
        .iter()
        .map(|r| r.report.max_slack())
        .fold(0.0, f64::max);
    ensure(frozen, || "a report was not frozen".into())?;
    ensure(violations == 0, || format!("{violations} violations"))?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{} seeds, 0 violations, max measured/bound {max_ratio:.3e}, {:?}",
        reports.len(),
        start.elapsed()
    ))
}

/// Uniform causal attention: last-row decay and first-column growth.
fn left_drift() -> Outcome {
    let start = Instant::now();
    let n = 8;
    let curve = left_drift_limit(n, 64, 1.0).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for i in 1..n {
        let rises = curve.last_row_increases(i);
        if !rises.is_empty() {
            problems.push(format!("A[n,{}] rises after L in {rises:?}", i + 1));
        }
    }
    let last = curve.points.last().unwrap();
    let tail = last.last_row[1..].iter().copied().fold(0.0, f64::max);
    if tail >= 1e-3 {
        problems.push(format!("max A[n,i>1] at L=64 is {tail:e}"));
    }
    let drops = curve.column_sum_decreases(0);
    if !drops.is_empty() {
        problems.push(format!("first column sum drops after L in {drops:?}"));
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    let summary = format!(
        "A[n,n] decreasing: {}; max A[n,i>1] at L=64: {tail:.2e}; column-1 sum at L=64: {:.6}",
        curve.last_row_increases(n - 1).is_empty(),
        last.column_sums[0]
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join("; ")))
    }
}

/// Marker-matrix checks of the local and global copy maps.
fn rewiring_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut saw_single_block = false;
    let mut saw_single_sentence = false;
    for case in 0..20 {
        let sentences = match case {
            0 => 1,
            _ => rng.random_range(1..=10),
        };
        let k = match case {
            1 => 100,
            _ => rng.random_range(1..=4),
        };
        let text = random_text(&mut rng, sentences);
        let spans = segment_sentences(&text).map_err(|e| e.to_string())?;
        let plan = build_partition(&spans, k).map_err(|e| e.to_string())?;
        let prefix: Vec<u32> = std::iter::once(tokens::BOS)
            .chain(random_bytes(&mut rng, case % 4))
            .collect();
        let seq =
            augment(&plan, &tokens::encode(&text), &prefix, 1 << 20).map_err(|e| e.to_string())?;
        let m = plan.num_blocks();
        saw_single_block |= m == 1;
        saw_single_sentence |= spans.len() == 1;

        let dim = 3;
        let markers = DMatrix::from_fn(seq.len(), dim, |r, c| (r * 1000 + c) as f64 + 0.25);
        let rp = RewirePlan::new(Some(&seq), Method::Htp, LayerRange::new(1, 1), 0)
            .map_err(|e| e.to_string())?;
        let local = f_local(&markers, &rp).map_err(|e| e.to_string())?;
        let global = f_global(&local, &rp).map_err(|e| e.to_string())?;

        // Positions derived from the block boundaries alone.
        let p = prefix.len();
        let mut expect_local = markers.clone();
        let copies = expected_copy_positions(p, &plan.boundaries);
        for &(pst, end) in &copies {
            expect_local.row_mut(pst).copy_from(&markers.row(end));
        }
        let mut expect_global = expect_local.clone();
        for (b, &(pst, _)) in copies.iter().enumerate() {
            expect_global
                .row_mut(p + b)
                .copy_from(&expect_local.row(pst));
        }
        ensure(local == expect_local, || {
            format!("case {case}: f_local mismatch")
        })?;
        ensure(global == expect_global, || {
            format!("case {case}: f_global mismatch")
        })?;

        if m == 1 {
            let single =
                AugmentedSequence::single_summary(&tokens::encode(&text), &prefix, 1 << 20)
                    .map_err(|e| e.to_string())?;
            let tp = RewirePlan::new(Some(&single), Method::TpSingle, LayerRange::new(1, 1), 0)
                .map_err(|e| e.to_string())?;
            let mk = DMatrix::from_fn(single.len(), dim, |r, c| (r * 1000 + c) as f64);
            let out = f_global(&f_local(&mk, &tp).map_err(|e| e.to_string())?, &tp)
                .map_err(|e| e.to_string())?;
            let mut want = mk.clone();
            want.row_mut(p).copy_from(&mk.row(single.len() - 1));
            ensure(out == want, || {
                format!("case {case}: single-summary copy mismatch")
            })?;
        }
    }
    ensure(saw_single_block && saw_single_sentence, || {
        "edge cases not covered".into()
    })?;
    Ok("20 partitions, copied and untouched rows bit-equal".into())
}

fn golden_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn as_usizes(v: &Value) -> Vec<usize> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as usize)
        .collect()
}

/// Augmented layouts against independently generated references.
fn layout_conformance() -> Outcome {
    let mut cases = 0;
    let mut arguana_nine = false;
    for name in ["arguana", "three", "single", "twelve"] {
        let raw = std::fs::read_to_string(golden_dir().join(format!("{name}.json")))
            .map_err(|e| format!("{name}: {e}"))?;
        let golden: Vec<Value> = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
        for g in &golden {
            let text = g["text"].as_str().unwrap();
            let instruction = g["instruction"].as_str().unwrap();
            let k = g["K"].as_u64().unwrap() as usize;
            let tag = format!("{name} K={k}");
            let trimmed = text.trim();
            let spans = segment_sentences(trimmed).map_err(|e| e.to_string())?;
            let plan = build_partition(&spans, k).map_err(|e| e.to_string())?;
            let mut prefix = vec![tokens::BOS];
            prefix.extend(tokens::encode(instruction));
            let body = tokens::encode(trimmed);
            let seq = augment(&plan, &body, &prefix, 1 << 20).map_err(|e| e.to_string())?;
            let m = seq.num_blocks();

            ensure(
                spans.len() == g["sentences"].as_u64().unwrap() as usize,
                || format!("{tag}: sentences"),
            )?;
            ensure(m == g["M"].as_u64().unwrap() as usize, || {
                format!("{tag}: M")
            })?;
            ensure(seq.len() == prefix.len() + body.len() + 2 * m, || {
                format!("{tag}: length formula")
            })?;
            ensure(seq.len() == g["length"].as_u64().unwrap() as usize, || {
                format!("{tag}: length")
            })?;
            ensure(plan.boundaries == as_usizes(&g["boundaries"]), || {
                format!("{tag}: boundaries")
            })?;
            ensure(
                seq.bpst_positions == as_usizes(&g["bpst_positions"]),
                || format!("{tag}: B-PST"),
            )?;
            ensure(seq.pst_positions == as_usizes(&g["pst_positions"]), || {
                format!("{tag}: PST")
            })?;
            ensure(
                seq.block_end_positions == as_usizes(&g["block_end_positions"]),
                || format!("{tag}: ends"),
            )?;
            ensure(
                seq.text_positions == as_usizes(&g["text_positions"]),
                || format!("{tag}: text"),
            )?;
            let ids: Vec<u32> = as_usizes(&g["ids"]).into_iter().map(|x| x as u32).collect();
            ensure(seq.ids == ids, || format!("{tag}: ids"))?;
            // Ordering: prefix, all B-PST, then PST_m immediately before block m.
            ensure(
                seq.bpst_positions
                    .iter()
                    .enumerate()
                    .all(|(b, &q)| q == prefix.len() + b),
                || format!("{tag}: B-PST block not contiguous after prefix"),
            )?;
            ensure(seq.pst_positions.windows(2).all(|w| w[0] < w[1]), || {
                format!("{tag}: PST order")
            })?;

            let inspect = InspectArgs {
                text: None,
                input: None,
                k: Some(k),
                every_n: None,
                matched_tokens: false,
                instruction: Some(instruction.to_string()).filter(|s| !s.is_empty()),
            };
            let report = inspect_text(&inspect, text).map_err(|e| e.to_string())?;
            ensure(report.layout.pst_positions == seq.pst_positions, || {
                format!("{tag}: inspect")
            })?;

            arguana_nine |= name == "arguana" && k == 1 && m == 9 && seq.bpst_positions.len() == 9;
            cases += 1;
        }
    }
    ensure(arguana_nine, || {
        "9-sentence document did not give 9 PST / 9 B-PST".into()
    })?;
    Ok(format!(
        "{cases} golden layouts, K in {{1,2,4,8}}, 9-block document included"
    ))
}

/// Full second-to-first masking reduces echo to a single pass.
fn echo_reduction() -> Outcome {
    let cfg = ModelConfig {
        max_seq_len: 128,
        ..ModelConfig::small()
    };
    let w = init_weights(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst_masked = 0.0_f64;
    let mut least_unmasked = f64::INFINITY;
    for _ in 0..20 {
        let n = rng.random_range(2..=30);
        let ids = random_bytes(&mut rng, n);
        let echo = echo_duplicate(&ids, cfg.max_seq_len).map_err(|e| e.to_string())?;
        let mask = area_mask(n, EchoArea::B);
        let masked = forward(
            &w,
            &echo.ids,
            ForwardOptions {
                region_mask: Some(&mask),
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?
        .hidden;
        let unmasked = forward(&w, &echo.ids, ForwardOptions::default())
            .map_err(|e| e.to_string())?
            .hidden;
        let single = forward(&w, &ids, ForwardOptions::default())
            .map_err(|e| e.to_string())?
            .hidden;
        for layer in 0..=cfg.num_layers {
            let diff = (masked.pre[layer].rows(n, n) - &single.pre[layer]).amax();
            worst_masked = worst_masked.max(diff);
        }
        worst_masked = worst_masked.max((masked.output.rows(n, n) - &single.output).amax());
        least_unmasked = least_unmasked.min((unmasked.output.rows(n, n) - &single.output).amax());
    }
    ensure(worst_masked <= 1e-6, || {
        format!("masked echo deviates by {worst_masked:e}")
    })?;
    ensure(least_unmasked > 1e-6, || {
        format!("unmasked echo only differs by {least_unmasked:e}")
    })?;
    Ok(format!(
        "20 inputs, masked max diff {worst_masked:.1e}, unmasked min diff {least_unmasked:.1e}"
    ))
}

/// Whole-document HTP blocks share TP's source; vanilla-mean is a plain mean.
fn reduction_identities() -> Outcome {
    let w = init_weights(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for doc in 0..10 {
        let count = rng.random_range(1..=6);
        let text = random_text(&mut rng, count);
        let sentences = segment_sentences(&text).map_err(|e| e.to_string())?.len();
        let htp = DocumentConfig {
            grouping: Grouping::Sentences(sentences + rng.random_range(0..3)),
            ..DocumentConfig::new(Method::Htp, Readout::Mean, &w)
        };
        let tp = DocumentConfig::new(Method::TpSingle, Readout::Mean, &w);
        let max = w.config().max_seq_len;
        let hd = prepare_document(&text, &htp, max).map_err(|e| e.to_string())?;
        let td = prepare_document(&text, &tp, max).map_err(|e| e.to_string())?;
        let hp = hd.plan(&htp, &w).map_err(|e| e.to_string())?.unwrap();
        let tpp = td.plan(&tp, &w).map_err(|e| e.to_string())?.unwrap();
        let (hl, tl) = (hp.local_copies(), tpp.local_copies());
        ensure(hl.len() == 1 && tl.len() == 1, || {
            format!("doc {doc}: expected one block")
        })?;
        let h_src = hd.sequence.as_ref().unwrap().token_index(hl[0].1);
        let t_src = td.sequence.as_ref().unwrap().token_index(tl[0].1);
        let last = tokens::encode(text.trim()).len() - 1;
        ensure(h_src == Some(last) && t_src == Some(last), || {
            format!("doc {doc}: sources {h_src:?} / {t_src:?}, expected {last}")
        })?;

        let van = DocumentConfig::new(Method::Vanilla, Readout::Mean, &w);
        let e = embed_document(&w, &text, &van).map_err(|e| e.to_string())?;
        let ids = tokens::encode_with_bos(text.trim());
        let h = forward(&w, &ids, ForwardOptions::default())
            .map_err(|e| e.to_string())?
            .hidden;
        let all: Vec<usize> = (0..ids.len()).collect();
        let plain = embed_mean(&h, van.exit_layer, &all, false).map_err(|e| e.to_string())?;
        ensure(e == plain, || {
            format!("doc {doc}: vanilla-mean not bit-equal")
        })?;
    }
    Ok("10 documents, shared source index, vanilla-mean bit-exact".into())
}

/// NDCG against a brute-force evaluation of the formula.
fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0_f64;
    let mut compared = 0;
    for _ in 0..100 {
        let docs = rng.random_range(1..=25);
        let mut order: Vec<String> = (0..docs).map(|i| format!("d{i:02}")).collect();
        order.shuffle(&mut rng);
        let mut grades = HashMap::new();
        for id in &order {
            if rng.random_bool(0.6) {
                grades.insert(id.clone(), rng.random_range(0..4u32));
            }
        }
        let ranking = RankingResult {
            ranked: order
                .iter()
                .map(|id| Ranked {
                    id: id.clone(),
                    score: 0.0,
                })
                .collect(),
        };
        let got = ndcg_at_k(&ranking, &grades, 10);
        let want = brute_ndcg(&order, &grades, 10);
        match (got, want) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                compared += 1;
            }
            (None, None) => {}
            _ => return Err(format!("defined-ness differs: {got:?} vs {want:?}")),
        }
        if !grades.values().any(|&g| g > 0) {
            continue;
        }
        let mut ideal: Vec<String> = grades.keys().cloned().collect();
        ideal.sort_by(|a, b| grades[b].cmp(&grades[a]).then(a.cmp(b)));
        let ideal = RankingResult {
            ranked: ideal
                .into_iter()
                .map(|id| Ranked { id, score: 0.0 })
                .collect(),
        };
        let v = ndcg_at_k(&ideal, &grades, 10);
        ensure(v == Some(1.0), || format!("ideal ranking scored {v:?}"))?;
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!(
        "{compared} rankings compared, max error {worst:.1e}"
    ))
}

/// Byte-identical `embed` output under a fixed config, different under a new seed.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let docs = dir.path().join("docs.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let lines: Vec<String> = (0..20)
        .map(|i| {
            let count = rng.random_range(1..=5);
            let text = random_text(&mut rng, count);
            serde_json::json!({"id": format!("doc{i}"), "text": text}).to_string()
        })
        .collect();
    std::fs::write(&docs, lines.join("\n") + "\n").map_err(|e| e.to_string())?;
    let run = |out: &str, seed: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(out);
        let argv = [
            "htp".as_ref(),
            "embed".as_ref(),
            "--method".as_ref(),
            "htp".as_ref(),
            "--seed".as_ref(),
            seed.as_ref(),
            "--input".as_ref(),
            docs.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ];
        let cli = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
        htp_cli::run(&cli, Execution::Parallel).map_err(|e| e.to_string())?;
        let manifest = htp_cli::manifest_path(&out);
        Ok((
            std::fs::read(&out).map_err(|e| e.to_string())?,
            std::fs::read(manifest).map_err(|e| e.to_string())?,
        ))
    };
    let (a, ma) = run("a.bin", "7")?;
    let (b, mb) = run("b.bin", "7")?;
    let (c, _) = run("c.bin", "8")?;
    ensure(a == b, || {
        "identical configs gave different embeddings".into()
    })?;
    ensure(ma == mb, || {
        "identical configs gave different manifests".into()
    })?;
    ensure(a != c, || {
        "changing the seed did not change the output".into()
    })?;
    Ok(format!(
        "20 documents, {} bytes, identical twice, seed-sensitive",
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("mixing structure", mixing_structure),
        ("path-sum expansion", path_sum),
        ("jacobian bounds", jacobian_bounds),
        ("left-drifting regime", left_drift),
        ("rewiring exactness", rewiring_exactness),
        ("layout conformance", layout_conformance),
        ("echo reduction", echo_reduction),
        ("reduction identities", reduction_identities),
        ("metric oracle", metric_oracle),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("acceptance {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
