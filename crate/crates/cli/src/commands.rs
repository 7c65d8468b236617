use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use massrank_core::adapter::{AdapterClient, AdapterItem, ClientConfig, EchoAdapter};
use massrank_core::io::{
    atomic_write, file_digest, load_color_manifest, load_foil_manifest, load_pairs,
    load_retrieval_manifest, load_scores, load_table, load_winoground_manifest,
    render_foil_manifest, save_scores, save_table, write_with_digest, ConditionalTable,
    Provenance, ResultsDoc,
};
use massrank_core::lexicon::{classify_caption, neutralize_caption, GenderLexicon};
use massrank_core::metrics::{
    color_bias_stats, pairwise_ranking_accuracy, pareto_frontier, retrieval_metrics,
    winoground_breakdown, ColorSample, Gender, ParetoPoint, TwoStage,
};
use massrank_core::oracle::{make_biased_family, BiasedFamilySpec, RandomModelSpec, ToyModel};
use massrank_core::retrieval::{PairLookup, ScoreMatrix, DEFAULT_SHORTLIST};
use massrank_core::scoring::{default_pairs, score_pairs, ScoringConfig, Similarity};
use massrank_core::{Error, ItemId, MarginalMethod, TlMode};
use serde_json::json;

use crate::args::{
    EvalArgs, FileConfig, LexiconArgs, LexiconCommand, MetricArg, OracleCommand, ParetoArgs,
    ProbeArgs, ScoreArgs, DEFAULT_K,
};
use crate::Failure;

type CmdResult = std::result::Result<(), Failure>;

fn digest_of(path: &Path) -> Result<String, Failure> {
    Ok(format!("sha256:{}", file_digest(path)?))
}

/// Sidecar holding the provenance of a score file.
pub fn prov_path(scores: &Path) -> PathBuf {
    let mut name = scores.file_name().unwrap_or_default().to_os_string();
    name.push(".prov.json");
    scores.with_file_name(name)
}

pub fn score(args: ScoreArgs, cfg: &FileConfig) -> CmdResult {
    let f = &args.scoring;
    let similarity: Similarity = f
        .similarity
        .or(cfg.similarity)
        .ok_or_else(|| Failure::Usage("--similarity is required".into()))?
        .into();
    let marginal: MarginalMethod = f.marginal.or(cfg.marginal).map(Into::into).unwrap_or(MarginalMethod::NullImage);
    let config = ScoringConfig {
        similarity,
        tl_mode: f.tl_mode.or(cfg.tl_mode).map(Into::into).unwrap_or(TlMode::ProbMean),
        marginal,
        mc_n: f.mc_n.or(cfg.mc_n),
        seed: f.seed.or(cfg.seed).unwrap_or(0),
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let table = load_table(&args.table)?;
    let pairs = match &args.pairs {
        Some(p) => load_pairs(p)?,
        None => default_pairs(&table, similarity),
    };
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs to score".into()).into());
    }
    let scores = score_pairs(&table, &pairs, &config)?;

    let mut prov = Provenance {
        similarity: Some(similarity.as_str().into()),
        ..Provenance::default()
    };
    if similarity == Similarity::Tl {
        prov.tl_mode = Some(config.tl_mode.as_str().into());
    }
    if similarity == Similarity::Mass {
        prov.marginal = Some(marginal.as_str().into());
        if marginal.is_monte_carlo() {
            prov.mc_n = config.mc_n;
            prov.seeds = vec![config.seed];
        }
    }
    prov.inputs.insert("table".into(), digest_of(&args.table)?);
    if let Some(p) = &args.pairs {
        prov.inputs.insert("pairs".into(), digest_of(p)?);
    }
    save_scores(&scores, &args.out)?;
    let mut body = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    body.push('\n');
    atomic_write(&prov_path(&args.out), body.as_bytes())?;
    Ok(())
}

fn score_provenance(scores: &Path) -> Result<Provenance, Failure> {
    let p = prov_path(scores);
    if !p.exists() {
        return Ok(Provenance::default());
    }
    let body = std::fs::read_to_string(&p).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&body).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))
}

fn put_scores(doc: &mut ResultsDoc, key: &str, s: &massrank_core::metrics::WinogroundScores) {
    let prefix = if key == "all" { String::new() } else { format!("{key}/") };
    doc.metrics.insert(format!("{prefix}text"), s.text);
    doc.metrics.insert(format!("{prefix}image"), s.image);
    doc.metrics.insert(format!("{prefix}group"), s.group);
    doc.counts.insert(format!("{prefix}n"), s.n);
}

pub fn eval(args: EvalArgs, cfg: &FileConfig) -> CmdResult {
    let scores = load_scores(&args.scores)?;
    let mut doc = ResultsDoc {
        provenance: score_provenance(&args.scores)?,
        ..ResultsDoc::default()
    };
    let prov = &mut doc.provenance;
    prov.inputs.insert("scores".into(), digest_of(&args.scores)?);
    prov.inputs.insert("manifest".into(), digest_of(&args.manifest)?);

    match args.metric {
        MetricArg::Retrieval => {
            let ks = args.k.clone().or_else(|| cfg.k.clone()).unwrap_or_else(|| DEFAULT_K.to_vec());
            if ks.is_empty() || ks.contains(&0) {
                return Err(Failure::Usage("--k needs positive cutoffs".into()));
            }
            let absolute = args.absolute_bias.or(cfg.absolute_bias).unwrap_or(false);
            let policy = args.mixed_policy.or(cfg.mixed_policy).map(Into::into).unwrap_or_default();
            let ds = load_retrieval_manifest(&args.manifest)?;
            let second = ScoreMatrix::from_pairs(&scores, ds.direction);
            let first = match &args.first_stage {
                Some(p) => {
                    prov.inputs.insert("first_stage".into(), digest_of(p)?);
                    Some(ScoreMatrix::from_pairs(&load_scores(p)?, ds.direction))
                }
                None => None,
            };
            let shortlist = args.shortlist.or(cfg.shortlist).unwrap_or(DEFAULT_SHORTLIST);
            if shortlist == 0 {
                return Err(Failure::Usage("--shortlist must be positive".into()));
            }
            let two_stage = first.as_ref().map(|f| TwoStage { first: f, shortlist });
            if two_stage.is_some() {
                prov.shortlist = Some(shortlist);
            }
            prov.k = ks.clone();
            prov.settings.insert("direction".into(), format!("{:?}", ds.direction).to_lowercase());
            prov.settings.insert("absolute_bias".into(), absolute.to_string());
            prov.settings.insert(
                "mixed_policy".into(),
                match policy {
                    massrank_core::metrics::MixedPolicy::Both => "both",
                    massrank_core::metrics::MixedPolicy::Neither => "neither",
                }
                .into(),
            );
            for m in retrieval_metrics(&second, &ds, &ks, policy, two_stage)? {
                doc.metrics.insert(format!("recall@{}", m.k), m.recall);
                doc.metrics.insert(format!("bias@{}", m.k), if absolute { m.abs_bias } else { m.bias });
            }
            doc.counts.insert("queries".into(), ds.queries.len());
            doc.counts.insert("candidates".into(), ds.candidates.len());
        }
        MetricArg::Winoground => {
            let samples = load_winoground_manifest(&args.manifest)?;
            for (key, s) in winoground_breakdown(&scores, &samples)? {
                put_scores(&mut doc, &key, &s);
            }
        }
        MetricArg::Foil => {
            let foils = load_foil_manifest(&args.manifest)?;
            doc.metrics.insert("accuracy".into(), pairwise_ranking_accuracy(&scores, &foils, None)?);
            doc.counts.insert("n".into(), foils.len());
            let cats: std::collections::BTreeSet<&str> = foils.iter().map(|f| f.category.as_str()).collect();
            for c in cats {
                doc.metrics.insert(format!("accuracy/{c}"), pairwise_ranking_accuracy(&scores, &foils, Some(c))?);
                doc.counts.insert(format!("n/{c}"), foils.iter().filter(|f| f.category == c).count());
            }
        }
        MetricArg::Color => {
            let entries = load_color_manifest(&args.manifest)?;
            let samples = entries
                .iter()
                .map(|e| {
                    let get = |t: &ItemId| {
                        scores
                            .pair_score(&e.image, t)
                            .ok_or_else(|| Error::MissingEntry(format!("no score for ({}, {t})", e.image)))
                    };
                    Ok(ColorSample {
                        image: e.image.clone(),
                        fruit_type: e.fruit_type.clone(),
                        score_true: get(&e.caption_true)?,
                        score_adv: get(&e.caption_adv)?,
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let stats = color_bias_stats(&samples)?;
            doc.metrics.insert("biased_sample_ratio".into(), stats.biased_sample_ratio);
            doc.metrics.insert("biased_type_ratio".into(), stats.biased_type_ratio);
            for (t, m) in &stats.per_type_mean {
                doc.metrics.insert(format!("mean_diff/{t}"), *m);
            }
            doc.counts.insert("n".into(), samples.len());
        }
    }
    doc.save(&args.out)?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn pareto(args: ParetoArgs, cfg: &FileConfig) -> CmdResult {
    let k = args
        .k
        .or_else(|| cfg.k.as_ref().and_then(|ks| ks.first().copied()))
        .unwrap_or(1);
    let mut points = Vec::new();
    for path in &args.inputs {
        let doc = ResultsDoc::load(path)?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let get = |name: String| {
            doc.metrics.get(&name).copied().ok_or_else(|| {
                Failure::Validation(Error::MissingEntry(format!("{} has no `{name}`", path.display())))
            })
        };
        points.push(ParetoPoint::new(label, get(format!("recall@{k}"))?, get(format!("bias@{k}"))?)?);
    }
    let front = pareto_frontier(&points)?;
    let on_front: std::collections::HashSet<&str> = front.iter().map(|p| p.label.as_str()).collect();
    let mut labels = std::collections::HashSet::new();
    let mut out = String::from("label,recall,bias,frontier\n");
    for p in points.iter().filter(|p| labels.insert(p.label.clone())) {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&p.label),
            massrank_core::io::fmt_f64(p.recall),
            massrank_core::io::fmt_f64(p.bias),
            on_front.contains(p.label.as_str())
        ));
    }
    write_with_digest(&args.out, out.as_bytes())?;
    Ok(())
}

fn model_json_bytes(m: &ToyModel) -> Vec<u8> {
    m.to_json().into_bytes()
}

pub fn oracle(cmd: OracleCommand, cfg: &FileConfig) -> CmdResult {
    match cmd {
        OracleCommand::Gen { images, vocab, max_len, seed, out } => {
            let spec = RandomModelSpec {
                images,
                vocab,
                max_len,
                seed: seed.or(cfg.seed).unwrap_or(0),
            };
            let model = ToyModel::random(spec)?;
            write_with_digest(&out, &model_json_bytes(&model))?;
        }
        OracleCommand::Export { model, out } => {
            let m = ToyModel::load(&model)?;
            let table = m.export_tables(&m.all_captions()?)?;
            save_table(&table, &out)?;
        }
        OracleCommand::Family { strength, n, seed, out } => {
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let family = make_biased_family(BiasedFamilySpec {
                prior_strength: strength,
                n_instances: n,
                seed,
            })?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Other(format!("{}: {e}", out.display())))?;
            let mut table = ConditionalTable::new();
            let mut instances = Vec::new();
            for inst in &family {
                table.merge(&inst.model.export_tables(&inst.captions)?)?;
                let f = &inst.foil;
                let text = |id: &ItemId| inst.captions.iter().find(|(c, _)| c == id).map(|(_, t)| t.clone());
                let (t_true, t_foil) = (text(&f.caption_true).expect("caption"), text(&f.caption_foil).expect("caption"));
                let tl = |t| -> Result<f64, Error> {
                    Ok(massrank_core::similarity::tl_score(&inst.model.exact_conditional(&f.image, t)?, TlMode::ProbMean)?.value)
                };
                instances.push(json!({
                    "image": f.image,
                    "caption_true": f.caption_true,
                    "caption_foil": f.caption_foil,
                    "tl_prob_mean": {"true": tl(&t_true)?, "foil": tl(&t_foil)?},
                    "pmi": {
                        "true": inst.model.exact_pmi(&f.image, &t_true)?,
                        "foil": inst.model.exact_pmi(&f.image, &t_foil)?,
                    },
                    "expected": {"tl_prefers": "foil", "mass_prefers": "true"},
                }));
            }
            let foils: Vec<_> = family.iter().map(|i| i.foil.clone()).collect();
            save_table(&table, out.join("table.jsonl"))?;
            write_with_digest(&out.join("foil.jsonl"), render_foil_manifest(&foils).as_bytes())?;
            let meta = json!({
                "prior_strength": strength,
                "n_instances": n,
                "seed": seed,
                "instances": instances,
            });
            let mut body = serde_json::to_string_pretty(&meta).expect("metadata serializes");
            body.push('\n');
            write_with_digest(&out.join("family.json"), body.as_bytes())?;
        }
    }
    Ok(())
}

pub fn probe(args: ProbeArgs, cfg: &FileConfig) -> CmdResult {
    let endpoint = args
        .adapter
        .or_else(|| cfg.adapter.clone())
        .ok_or_else(|| Failure::Usage("--adapter is required".into()))?;
    if !(args.timeout_secs > 0.0 && args.timeout_secs.is_finite()) {
        return Err(Failure::Usage("--timeout-secs must be positive".into()));
    }
    let config = ClientConfig {
        max_retries: args.retries,
        timeout: Duration::from_secs_f64(args.timeout_secs),
        ..ClientConfig::default()
    };
    let client = AdapterClient::connect(&endpoint, config).map_err(|e| Failure::Usage(e.to_string()))?;
    let canary = vec![
        AdapterItem::new("null", "a photo of a dog"),
        AdapterItem::new(args.image.clone(), "a photo of a dog"),
    ];
    let report = (|| -> Result<String, Error> {
        let digest = client.identity_digest()?;
        let first = client.request(&canary)?;
        let again = client.request(&canary)?;
        if first != again {
            return Err(Error::AdapterProtocol {
                detail: "identical requests produced different responses".into(),
                raw: String::new(),
            });
        }
        if first[0].tokens != first[1].tokens {
            return Err(Error::AdapterProtocol {
                detail: "same text tokenized differently for the null and the real image".into(),
                raw: String::new(),
            });
        }
        Ok(digest)
    })();
    match report {
        Ok(digest) => {
            println!("PASS {endpoint}");
            println!("identity {digest}");
            Ok(())
        }
        Err(e) => {
            println!("FAIL {endpoint}: {e}");
            Err(e.into())
        }
    }
}

fn captions(args: &LexiconArgs) -> Result<Vec<String>, Failure> {
    if !args.caption.is_empty() {
        return Ok(args.caption.clone());
    }
    std::io::stdin()
        .lock()
        .lines()
        .map(|l| l.map_err(|e| Failure::Other(format!("stdin: {e}"))))
        .collect()
}

pub fn lexicon(cmd: LexiconCommand) -> CmdResult {
    let (args, classify) = match &cmd {
        LexiconCommand::Classify(a) => (a, true),
        LexiconCommand::Neutralize(a) => (a, false),
    };
    let lex = match &args.lexicon {
        Some(p) => GenderLexicon::load(p)?,
        None => GenderLexicon::default_reconstruction(),
    };
    let mut out = std::io::stdout().lock();
    for c in captions(args)? {
        let line = if classify {
            match classify_caption(&c, &lex) {
                Gender::Masculine => "masculine",
                Gender::Feminine => "feminine",
                Gender::Both => "both",
                Gender::Neutral | Gender::Unknown => "neutral",
            }
            .to_owned()
        } else {
            neutralize_caption(&c, &lex)
        };
        writeln!(out, "{line}").map_err(|e| Failure::Other(format!("stdout: {e}")))?;
    }
    Ok(())
}

pub fn echo_adapter(table: Option<PathBuf>) -> CmdResult {
    let table = table.map(load_table).transpose()?;
    let echo = EchoAdapter::new(table);
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Failure::Other(format!("stdin: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(out, "{}", echo.handle(&line))
            .and_then(|_| out.flush())
            .map_err(|e| Failure::Other(format!("stdout: {e}")))?;
    }
    Ok(())
}
