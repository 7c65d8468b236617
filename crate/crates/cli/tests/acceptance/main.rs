//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits non-zero if any check fails.

mod naive;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use massrank_core::io::{load_table, ConditionalTable, PairScores};
use massrank_core::marginal::estimate_marginal;
use massrank_core::metrics::{
    color_bias_stats, pairwise_ranking_accuracy, pareto_frontier, retrieval_metrics, winoground_breakdown,
    winoground_scores, ColorSample, FoilSample, Gender, MixedPolicy, ParetoPoint, RetrievalCandidate,
    RetrievalDataset, RetrievalQuery, TagFilter, TwoStage, WinogroundSample,
};
use massrank_core::oracle::{make_biased_family, BiasedFamilySpec, RandomModelSpec, ToyModel};
use massrank_core::retrieval::{rank, Direction, ScoreMatrix};
use massrank_core::scoring::{default_pairs, score_pairs, ScoringConfig, Similarity};
use massrank_core::similarity::decompose_loglik;
use massrank_core::{Error, ItemId, MarginalMethod, TlMode, TokenSequence};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn id(s: impl Into<String>) -> ItemId {
    ItemId::new(s).unwrap()
}

fn sampled_captions(m: &ToyModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ItemId, TokenSequence)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..n {
        let img = &m.images()[rng.random_range(0..m.images().len())];
        let t = m.sample_text(img, rng).unwrap();
        if seen.insert(t.tokens().to_vec()) {
            out.push((id(format!("cap{}", out.len())), t));
        }
    }
    out
}

fn random_spec(i: u64, rng: &mut ChaCha8Rng) -> RandomModelSpec {
    if i == 0 {
        return RandomModelSpec { images: 6, vocab: 12, max_len: 5, seed: 0 };
    }
    RandomModelSpec {
        images: rng.random_range(1..=6),
        vocab: rng.random_range(2..=12),
        max_len: rng.random_range(1..=5),
        seed: i,
    }
}

fn oracle_pmi() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for i in 0..100 {
        let m = ToyModel::random(random_spec(i, &mut rng)).unwrap();
        let caps = sampled_captions(&m, 30, &mut rng);
        let table = m.export_tables(&caps).unwrap();
        let pairs = default_pairs(&table, Similarity::Mass);
        let scores = score_pairs(&table, &pairs, &ScoringConfig::new(Similarity::Mass)).unwrap();
        for (cid, text) in &caps {
            for img in m.images() {
                let err = (scores.get(img, cid).unwrap() - m.exact_pmi(img, text).unwrap()).abs();
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-12 && elapsed < Duration::from_secs(10),
        format!("100 models, {checked} pairs, max |err| {worst:.3e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut n) = (0.0f64, 0usize);
    for i in 0..100 {
        let m = ToyModel::random(random_spec(i + 1000, &mut rng)).unwrap();
        for _ in 0..100 {
            let img = m.images()[rng.random_range(0..m.images().len())].clone();
            let src = &m.images()[rng.random_range(0..m.images().len())];
            let text = m.sample_text(src, &mut rng).unwrap();
            let cond = m.exact_conditional(&img, &text).unwrap();
            let marg = m.exact_marginal(&text).unwrap();
            let d = decompose_loglik(&cond, &marg).unwrap();
            let total: f64 = cond.values().iter().sum();
            worst = worst.max((d.linguistic + d.association - total).abs());
            n += 1;
        }
    }
    outcome(worst < 1e-12, format!("{n} pairs, max |err| {worst:.3e}"))
}

fn biased_family() -> Outcome {
    let family = make_biased_family(BiasedFamilySpec { prior_strength: 0.9, n_instances: 100, seed: 3 }).unwrap();
    let mut table = ConditionalTable::new();
    for inst in &family {
        table.merge(&inst.model.export_tables(&inst.captions).unwrap()).unwrap();
    }
    let foils: Vec<FoilSample> = family.iter().map(|i| i.foil.clone()).collect();
    let pairs: Vec<(ItemId, ItemId)> = foils
        .iter()
        .flat_map(|f| [(f.image.clone(), f.caption_true.clone()), (f.image.clone(), f.caption_foil.clone())])
        .collect();
    let accuracy = |sim| {
        let mut cfg = ScoringConfig::new(sim);
        cfg.tl_mode = TlMode::ProbMean;
        let s = score_pairs(&table, &pairs, &cfg).unwrap();
        pairwise_ranking_accuracy(&s, &foils, None).unwrap()
    };
    let (mass, tl) = (accuracy(Similarity::Mass), accuracy(Similarity::Tl));
    outcome(mass == 1.0 && tl == 0.0, format!("100 instances, MASS {mass}, TL {tl}"))
}

/// Six images whose first-token distributions differ; later rows are shared.
fn mc_model() -> ToyModel {
    let vocab: Vec<String> = ["a", "b", "</s>"].iter().map(|s| s.to_string()).collect();
    let images: Vec<ItemId> = (0..6).map(|i| id(format!("img{i}"))).collect();
    let normalize = |w: [f64; 3]| {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let shared = |prefix: &[&str]| -> (Vec<String>, Vec<f64>) {
        let w = match prefix {
            ["a"] => [5.0, 2.0, 1.0],
            ["b"] => [1.0, 3.0, 2.0],
            ["a", "a"] => [1.0, 1.0, 6.0],
            ["a", "b"] => [2.0, 1.0, 3.0],
            ["b", "a"] => [4.0, 1.0, 2.0],
            _ => [1.0, 2.0, 5.0],
        };
        (prefix.iter().map(|s| s.to_string()).collect(), normalize(w))
    };
    let rows = (0..6)
        .map(|i| {
            let f = i as f64;
            let mut r = vec![(Vec::new(), normalize([1.0 + 2.0 * f, 8.0 - f, 1.0 + 0.5 * f]))];
            for p in [&["a"][..], &["b"], &["a", "a"], &["a", "b"], &["b", "a"], &["b", "b"]] {
                r.push(shared(p));
            }
            r
        })
        .collect();
    ToyModel::new(vocab, "</s>", images, None, 3, rows).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn monte_carlo() -> Outcome {
    let m = mc_model();
    let caps = m.all_captions().unwrap();
    let table = m.export_tables(&caps).unwrap();
    let exact: Vec<Vec<f64>> = caps.iter().map(|(_, t)| m.exact_marginal(t).unwrap().into_values()).collect();
    let mut medians = Vec::new();
    let mut jensen_worst = 0.0f64;
    for n in [10, 100, 1000, 10000] {
        let mut errs = Vec::new();
        for seed in 0..50u64 {
            let (mut sum, mut count) = (0.0, 0usize);
            for ((cid, _), ex) in caps.iter().zip(&exact) {
                let lme = estimate_marginal(&table, cid, MarginalMethod::McLogMeanExp, n, seed).unwrap();
                let avg = estimate_marginal(&table, cid, MarginalMethod::McAvgLog, n, seed).unwrap();
                for ((l, a), e) in lme.logp.values().iter().zip(avg.logp.values()).zip(ex) {
                    jensen_worst = jensen_worst.max(a - l);
                    sum += (l - e).abs();
                    count += 1;
                }
            }
            errs.push(sum / count as f64);
        }
        medians.push(median(errs));
    }
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let jensen = jensen_worst <= 1e-12;
    outcome(
        decreasing && jensen,
        format!(
            "median error {} for N=10..10000, max(avg-log - log-mean-exp) {jensen_worst:.3e}",
            medians.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" > ")
        ),
    )
}

const GENDERS: [Gender; 5] = [Gender::Masculine, Gender::Feminine, Gender::Both, Gender::Neutral, Gender::Unknown];

struct World {
    ds: RetrievalDataset,
    first: ScoreMatrix,
    second: ScoreMatrix,
    pairs: PairScores,
    wino: Vec<WinogroundSample>,
    foils: Vec<FoilSample>,
    colors: Vec<(ItemId, String, ItemId, ItemId)>,
    shortlist: usize,
}

fn grid(rng: &mut ChaCha8Rng, steps: i32) -> f64 {
    rng.random_range(-2 * steps..=2 * steps) as f64 / steps as f64
}

/// Random images x texts with scores on a dyadic grid and manifests over them.
fn random_world(rng: &mut ChaCha8Rng, steps: i32) -> World {
    let ni = rng.random_range(2..=7);
    let nt = rng.random_range(2..=7);
    let images: Vec<ItemId> = (0..ni).map(|i| id(format!("i{i}"))).collect();
    let texts: Vec<ItemId> = (0..nt).map(|i| id(format!("t{i}"))).collect();
    let direction = if rng.random_bool(0.5) { Direction::TextToImage } else { Direction::ImageToText };
    let (qs, cs) = match direction {
        Direction::TextToImage => (texts.clone(), images.clone()),
        Direction::ImageToText => (images.clone(), texts.clone()),
    };
    let matrix = |rng: &mut ChaCha8Rng| {
        let rows: Vec<Vec<f64>> = qs.iter().map(|_| cs.iter().map(|_| grid(rng, steps)).collect()).collect();
        ScoreMatrix::from_rows(direction, qs.clone(), cs.clone(), &rows).unwrap()
    };
    let first = matrix(rng);
    let second = matrix(rng);
    let mut pairs = PairScores::new();
    for i in &images {
        for t in &texts {
            pairs.insert(i.clone(), t.clone(), grid(rng, steps)).unwrap();
        }
    }
    let ds = RetrievalDataset {
        direction,
        queries: qs
            .iter()
            .map(|q| {
                let mut gold: BTreeSet<ItemId> = cs.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
                if gold.is_empty() {
                    gold.insert(cs[rng.random_range(0..cs.len())].clone());
                }
                RetrievalQuery { id: q.clone(), gold, gender: Gender::Unknown }
            })
            .collect(),
        candidates: cs
            .iter()
            .map(|c| RetrievalCandidate { id: c.clone(), gender: GENDERS[rng.random_range(0..GENDERS.len())] })
            .collect(),
    };
    let tags = ["Object", "Relation", "Both"];
    let wino = (0..rng.random_range(1..8))
        .map(|k| {
            let mut ii = images.clone();
            ii.shuffle(rng);
            let mut tt = texts.clone();
            tt.shuffle(rng);
            let tagset: BTreeSet<String> = tags.iter().filter(|_| rng.random_bool(0.3)).map(|s| s.to_string()).collect();
            WinogroundSample::new(Some(k.to_string()), ii[0].clone(), ii[1].clone(), tt[0].clone(), tt[1].clone(), tagset)
                .unwrap()
        })
        .collect();
    let cats = ["color", "count", "language-prior"];
    let foils = (0..rng.random_range(1..8))
        .map(|_| {
            let mut tt = texts.clone();
            tt.shuffle(rng);
            let img = images[rng.random_range(0..ni)].clone();
            FoilSample::new(img, tt[0].clone(), tt[1].clone(), cats[rng.random_range(0..cats.len())]).unwrap()
        })
        .collect();
    let fruits = ["apple", "banana", "lemon"];
    let colors = (0..rng.random_range(1..10))
        .map(|_| {
            let mut tt = texts.clone();
            tt.shuffle(rng);
            (
                images[rng.random_range(0..ni)].clone(),
                fruits[rng.random_range(0..fruits.len())].to_string(),
                tt[0].clone(),
                tt[1].clone(),
            )
        })
        .collect();
    let shortlist = rng.random_range(1..=cs.len());
    World { ds, first, second, pairs, wino, foils, colors, shortlist }
}

fn color_samples(w: &World, s: &PairScores) -> Vec<ColorSample> {
    w.colors
        .iter()
        .map(|(img, fruit, t, a)| ColorSample {
            image: img.clone(),
            fruit_type: fruit.clone(),
            score_true: s.get(img, t).unwrap(),
            score_adv: s.get(img, a).unwrap(),
        })
        .collect()
}

fn naive_scores(m: &ScoreMatrix) -> naive::Scores {
    let mut out = BTreeMap::new();
    for q in m.queries() {
        for c in m.candidates() {
            let k = match m.direction() {
                Direction::TextToImage => (c.clone(), q.clone()),
                Direction::ImageToText => (q.clone(), c.clone()),
            };
            out.insert(k, m.get(q, c).unwrap());
        }
    }
    out
}

fn check_world(w: &World) -> Result<(), String> {
    let fail = |what: &str| Err(what.to_string());
    let ks: Vec<usize> = (1..=w.ds.candidates.len() + 1).collect();
    let first = naive_scores(&w.first);
    let second = naive_scores(&w.second);
    let mut points = Vec::new();
    for policy in [MixedPolicy::Both, MixedPolicy::Neither] {
        for two_stage in [false, true] {
            let (ranked, got, label) = if two_stage {
                let ks_two: Vec<usize> = ks.iter().copied().filter(|&k| k <= w.shortlist).collect();
                let got = retrieval_metrics(
                    &w.second,
                    &w.ds,
                    &ks_two,
                    policy,
                    Some(TwoStage { first: &w.first, shortlist: w.shortlist }),
                )
                .map_err(|e| e.to_string())?;
                (naive::rankings(&second, &w.ds, Some((&first, w.shortlist))), got, "two")
            } else {
                let got = retrieval_metrics(&w.first, &w.ds, &ks, policy, None).map_err(|e| e.to_string())?;
                (naive::rankings(&first, &w.ds, None), got, "one")
            };
            for r in &got {
                if r.recall != naive::recall(&w.ds, &ranked, r.k) {
                    return fail("recall");
                }
                if r.bias != naive::bias(&w.ds, &ranked, r.k, policy, false) {
                    return fail("bias");
                }
                if r.abs_bias != naive::bias(&w.ds, &ranked, r.k, policy, true) {
                    return fail("absolute bias");
                }
                points.push(ParetoPoint::new(format!("{label}-{policy:?}-{}", r.k), r.recall, r.bias).unwrap());
            }
        }
    }
    let mut scores = BTreeMap::new();
    for (i, t, v) in w.pairs.iter() {
        scores.insert((i.clone(), t.clone()), v);
    }
    let wg = winoground_breakdown(&w.pairs, &w.wino).map_err(|e| e.to_string())?;
    let wg_naive = naive::winoground(&scores, &w.wino);
    let wg_got: BTreeMap<String, (f64, f64, f64, usize)> =
        wg.into_iter().map(|(k, s)| (k, (s.text, s.image, s.group, s.n))).collect();
    if wg_got != wg_naive {
        return fail("winoground");
    }
    for cat in [None, Some("color"), Some("count"), Some("language-prior")] {
        let got = match pairwise_ranking_accuracy(&w.pairs, &w.foils, cat) {
            Ok(v) => Some(v),
            Err(Error::EmptyDataset(_)) => None,
            Err(e) => return Err(e.to_string()),
        };
        if got != naive::pairwise(&scores, &w.foils, cat) {
            return fail("pairwise accuracy");
        }
    }
    let samples = color_samples(w, &w.pairs);
    let stats = color_bias_stats(&samples).map_err(|e| e.to_string())?;
    let (sr, tr, means) = naive::color(&samples);
    if stats.biased_sample_ratio != sr || stats.biased_type_ratio != tr || stats.per_type_mean != means {
        return fail("color stats");
    }
    let mut front: Vec<(String, f64, f64)> = pareto_frontier(&points)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| (p.label, p.recall, p.bias))
        .collect();
    front.sort_by(|a, b| a.0.cmp(&b.0));
    if front != naive::pareto(&points) {
        return fail("pareto frontier");
    }
    Ok(())
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let w = random_world(&mut rng, 8);
        if let Err(what) = check_world(&w) {
            return outcome(false, format!("dataset {i}: {what} differs from reference"));
        }
    }
    let elapsed = start.elapsed();
    outcome(elapsed < Duration::from_secs(60), format!("1000 datasets, {:.2}s", elapsed.as_secs_f64()))
}

fn chance_level() -> Outcome {
    let n = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (i0, i1, c0, c1) = (id("i0"), id("i1"), id("c0"), id("c1"));
    let mut text = 0usize;
    let mut image = 0usize;
    let mut group = 0usize;
    let samples = [WinogroundSample::new(None, i0.clone(), i1.clone(), c0.clone(), c1.clone(), BTreeSet::new()).unwrap()];
    for _ in 0..n {
        let mut s = PairScores::new();
        for (i, c) in [(&i0, &c0), (&i0, &c1), (&i1, &c0), (&i1, &c1)] {
            s.insert(i.clone(), c.clone(), rng.random::<f64>()).unwrap();
        }
        let r = winoground_scores(&s, &samples, &TagFilter::All).unwrap();
        text += (r.text == 1.0) as usize;
        image += (r.image == 1.0) as usize;
        group += (r.group == 1.0) as usize;
    }
    let within = |hits: usize, p: f64| {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        ((hits as f64 / n as f64) - p).abs() <= 3.0 * sigma
    };
    let nf = n as f64;
    outcome(
        within(text, 0.25) && within(image, 0.25) && within(group, 1.0 / 6.0),
        format!("text {:.4}, image {:.4}, group {:.4} over {n} samples", text as f64 / nf, image as f64 / nf, group as f64 / nf),
    )
}

fn all_rankings(m: &ScoreMatrix) -> Vec<Vec<ItemId>> {
    m.queries()
        .iter()
        .map(|q| rank(m, q, m.candidates().len()).unwrap().ids().cloned().collect())
        .collect()
}

/// Every metric value of a world, as (name, value) pairs.
fn metric_values(w: &World, affine: bool) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let ks: Vec<usize> = (1..=w.ds.candidates.len()).collect();
    let mut points = Vec::new();
    for policy in [MixedPolicy::Both, MixedPolicy::Neither] {
        let one = retrieval_metrics(&w.first, &w.ds, &ks, policy, None).unwrap();
        let ks_two: Vec<usize> = ks.iter().copied().filter(|&k| k <= w.shortlist).collect();
        let two =
            retrieval_metrics(&w.second, &w.ds, &ks_two, policy, Some(TwoStage { first: &w.first, shortlist: w.shortlist }))
                .unwrap();
        for (tag, rs) in [("one", one), ("two", two)] {
            for r in rs {
                out.push((format!("{tag}/{policy:?}/recall@{}", r.k), r.recall));
                out.push((format!("{tag}/{policy:?}/bias@{}", r.k), r.bias));
                out.push((format!("{tag}/{policy:?}/abs_bias@{}", r.k), r.abs_bias));
                points.push(ParetoPoint::new(format!("{tag}-{policy:?}-{}", r.k), r.recall, r.bias).unwrap());
            }
        }
    }
    for (k, s) in winoground_breakdown(&w.pairs, &w.wino).unwrap() {
        out.extend([(format!("{k}/text"), s.text), (format!("{k}/image"), s.image), (format!("{k}/group"), s.group)]);
    }
    out.push(("pairwise".into(), pairwise_ranking_accuracy(&w.pairs, &w.foils, None).unwrap()));
    let stats = color_bias_stats(&color_samples(w, &w.pairs)).unwrap();
    out.push(("biased_sample_ratio".into(), stats.biased_sample_ratio));
    if affine {
        out.push(("biased_type_ratio".into(), stats.biased_type_ratio));
    }
    for p in pareto_frontier(&points).unwrap() {
        out.push((format!("pareto/{}", p.label), p.recall));
    }
    out
}

fn argsort_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let transforms: [(&str, fn(f64) -> f64, bool); 2] = [("2x+1", |x| 2.0 * x + 1.0, true), ("tanh", f64::tanh, false)];
    for i in 0..100 {
        let w = random_world(&mut rng, 1024);
        for (name, f, affine) in transforms {
            let t = World {
                ds: w.ds.clone(),
                first: w.first.map(f),
                second: w.second.map(f),
                pairs: w.pairs.map(f),
                wino: w.wino.clone(),
                foils: w.foils.clone(),
                colors: w.colors.clone(),
                shortlist: w.shortlist,
            };
            if all_rankings(&w.first) != all_rankings(&t.first) || all_rankings(&w.second) != all_rankings(&t.second) {
                return outcome(false, format!("matrix {i}: ranking changed under {name}"));
            }
            if metric_values(&w, affine) != metric_values(&t, affine) {
                return outcome(false, format!("matrix {i}: metric changed under {name}"));
            }
        }
    }
    outcome(true, "100 matrices, transforms 2x+1 and tanh")
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_massrank")
}

/// Runs `args` in `dir`; returns stdout, or the failure description.
fn run(dir: &Path, jobs: usize, args: &[&str], stdin: Option<&str>) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).arg("--jobs").arg(jobs.to_string()).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("MASSRANK_")) {
        cmd.env_remove(k);
    }
    cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = cmd.spawn().map_err(|e| e.to_string())?;
    {
        use std::io::Write;
        let mut input = child.stdin.take().unwrap();
        input.write_all(stdin.unwrap_or("").as_bytes()).map_err(|e| e.to_string())?;
    }
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn write_manifests(dir: &Path) {
    let table = load_table(dir.join("t.jsonl")).unwrap();
    let images: Vec<String> = table.images().into_iter().filter(|i| !i.is_null()).map(|i| i.to_string()).collect();
    let texts: Vec<String> = table.texts().map(|t| t.to_string()).collect();
    let genders = ["masculine", "feminine", "both", "neutral"];
    let queries: Vec<serde_json::Value> = texts
        .iter()
        .enumerate()
        .map(|(k, t)| serde_json::json!({"id": t, "gold": [images[k % images.len()]]}))
        .collect();
    let candidates: Vec<serde_json::Value> = images
        .iter()
        .enumerate()
        .map(|(k, i)| serde_json::json!({"id": i, "gender": genders[k % genders.len()]}))
        .collect();
    let retrieval = serde_json::json!({"direction": "text-to-image", "queries": queries, "candidates": candidates});
    std::fs::write(dir.join("retrieval.json"), retrieval.to_string()).unwrap();
    let mut wino = String::new();
    let mut foil = String::new();
    let mut color = String::new();
    for k in 0..texts.len() - 1 {
        let (i0, i1) = (&images[k % images.len()], &images[(k + 1) % images.len()]);
        let (c0, c1) = (&texts[k], &texts[k + 1]);
        let (cat, fruit) = (["color", "count"][k % 2], ["apple", "lemon"][k % 2]);
        wino += &format!("{}\n", serde_json::json!({"id": k.to_string(), "i0": i0, "i1": i1, "c0": c0, "c1": c1, "tags": if k % 2 == 0 { vec!["Object"] } else { vec![] }}));
        foil += &format!("{}\n", serde_json::json!({"image": i0, "caption_true": c0, "caption_foil": c1, "category": cat}));
        color += &format!("{}\n", serde_json::json!({"image": i0, "fruit_type": fruit, "caption_true": c0, "caption_adv": c1}));
    }
    std::fs::write(dir.join("wino.jsonl"), wino).unwrap();
    std::fs::write(dir.join("foil.jsonl"), foil).unwrap();
    std::fs::write(dir.join("color.jsonl"), color).unwrap();
}

/// Runs every subcommand in a fresh directory and returns all produced bytes.
fn cli_run(jobs: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mut stdout = BTreeMap::new();
    let mut step = |name: &str, args: &[&str], stdin: Option<&str>| -> Result<(), String> {
        stdout.insert(format!("stdout:{name}"), run(dir, jobs, args, stdin)?);
        Ok(())
    };
    step("gen", &["oracle", "gen", "--images", "4", "--vocab", "5", "--max-len", "3", "--seed", "11", "--out", "model.json"], None)?;
    step("export", &["oracle", "export", "--model", "model.json", "--out", "t.jsonl"], None)?;
    step("family", &["oracle", "family", "--strength", "0.9", "--n", "20", "--seed", "4", "--out", "fam"], None)?;
    write_manifests(dir);
    let scorings: [(&str, &[&str]); 9] = [
        ("itc", &["--similarity", "itc"]),
        ("itm", &["--similarity", "itm"]),
        ("tl", &["--similarity", "tl"]),
        ("tl-log", &["--similarity", "tl", "--tl-mode", "logprob-mean"]),
        ("mass", &["--similarity", "mass"]),
        ("mass-avg", &["--similarity", "mass", "--marginal", "mc-avg-log", "--mc-n", "3", "--seed", "9"]),
        ("mass-lme", &["--similarity", "mass", "--marginal", "mc-log-mean-exp", "--mc-n", "50", "--seed", "9"]),
        ("fam-mass", &["--similarity", "mass", "--table", "fam/table.jsonl"]),
        ("fam-tl", &["--similarity", "tl", "--table", "fam/table.jsonl"]),
    ];
    for (name, flags) in scorings {
        let out = format!("{name}.scores.jsonl");
        let mut args = vec!["score", "--out", &out];
        if !flags.contains(&"--table") {
            args.extend(["--table", "t.jsonl"]);
        }
        args.extend(flags);
        step(name, &args, None)?;
    }
    let evals: [(&str, &[&str]); 8] = [
        ("r-itc", &["--metric", "retrieval", "--scores", "itc.scores.jsonl", "--manifest", "retrieval.json", "--k", "1,2,3"]),
        ("r-mass", &["--metric", "retrieval", "--scores", "mass.scores.jsonl", "--manifest", "retrieval.json", "--absolute-bias"]),
        ("r-two", &["--metric", "retrieval", "--scores", "mass.scores.jsonl", "--first-stage", "itc.scores.jsonl", "--shortlist", "3", "--k", "1,2", "--manifest", "retrieval.json"]),
        ("wino", &["--metric", "winoground", "--scores", "mass-lme.scores.jsonl", "--manifest", "wino.jsonl"]),
        ("foil", &["--metric", "foil", "--scores", "tl.scores.jsonl", "--manifest", "foil.jsonl"]),
        ("color", &["--metric", "color", "--scores", "itm.scores.jsonl", "--manifest", "color.jsonl"]),
        ("fam-mass", &["--metric", "foil", "--scores", "fam-mass.scores.jsonl", "--manifest", "fam/foil.jsonl"]),
        ("fam-tl", &["--metric", "foil", "--scores", "fam-tl.scores.jsonl", "--manifest", "fam/foil.jsonl"]),
    ];
    for (name, flags) in evals {
        let out = format!("{name}.results.json");
        let mut args = vec!["eval", "--out", &out];
        args.extend(flags);
        step(&format!("eval-{name}"), &args, None)?;
    }
    step(
        "pareto",
        &["pareto", "--input", "r-itc.results.json", "--input", "r-mass.results.json", "--input", "r-two.results.json", "--k", "1", "--out", "pareto.csv"],
        None,
    )?;
    let adapter = format!("stdio:{} echo-adapter --table t.jsonl", bin());
    step("probe", &["probe", "--adapter", &adapter], None)?;
    step(
        "echo-adapter",
        &["echo-adapter", "--table", "t.jsonl"],
        Some("{\"op\":\"identity\"}\n{\"op\":\"token_logprobs\",\"items\":[{\"image\":\"img0\",\"text\":\"cap0\"},{\"image\":\"x.jpg\",\"text\":\"a red apple\"}]}\n"),
    )?;
    step("classify", &["lexicon", "classify"], Some("A man and his dog\nTwo girls\nA cat\nShe and her brother\n"))?;
    step("neutralize", &["lexicon", "neutralize", "--caption", "The policeman's WIFE waves at him"], None)?;

    let mut files = stdout;
    collect(dir, dir, &mut files);
    Ok(files)
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

fn determinism() -> Outcome {
    let runs: Result<Vec<_>, String> = [1, 4, 8].into_iter().map(cli_run).collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("command failed: {e}")),
    };
    let base = &runs[0];
    for (jobs, r) in [4, 8].iter().zip(&runs[1..]) {
        let keys: BTreeSet<&String> = base.keys().chain(r.keys()).collect();
        for k in keys {
            if base.get(k) != r.get(k) {
                return outcome(false, format!("`{k}` differs between --jobs 1 and --jobs {jobs}"));
            }
        }
    }
    outcome(true, format!("{} outputs identical across --jobs 1, 4, 8", base.len()))
}

fn malformed_fixtures() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/malformed");
    let cases = std::fs::read_to_string(dir.join("cases.tsv")).unwrap();
    let mut n = 0;
    for line in cases.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        n += 1;
        match load_table(dir.join(f[0])) {
            Err(Error::Table { kind, .. }) if kind.as_str() == f[1] => {}
            Err(e) => return outcome(false, format!("{}: expected {}, got {e}", f[0], f[1])),
            Ok(_) => return outcome(false, format!("{} was accepted", f[0])),
        }
    }
    outcome(n == 20, format!("{n} fixtures rejected with the documented error class"))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("oracle PMI equivalence", oracle_pmi),
        ("log-likelihood decomposition", decomposition),
        ("language-prior foil family", biased_family),
        ("Monte-Carlo marginal convergence", monte_carlo),
        ("metric reference equivalence", metric_oracles),
        ("Winoground chance level", chance_level),
        ("monotone transform invariance", argsort_invariance),
        ("CLI determinism across --jobs", determinism),
        ("malformed table rejection", malformed_fixtures),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} of {} checks failed", checks.len());
        std::process::exit(1);
    }
}
