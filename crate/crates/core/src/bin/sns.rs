use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sns_core::backends::{inspect_cassette, Client};
use sns_core::capmetrics::evaluate_caption_run;
use sns_core::config::{require_path, RunConfig};
use sns_core::datagen::{
    balance_answers, expand_templates, filter_scene_overlap, generate_scene_captions, load_templates, mix_dataset,
    qc_aggregate, qc_sample, shipped_templates, DatasetSample, QcManifest, SampleKind, VideoAnnotation,
};
use sns_core::directqa::{gap_report, run_direct};
use sns_core::ingest::{load_caption_corpus, load_question_set, save_caption_corpus};
use sns_core::records::{read_records, write_records, write_text};
use sns_core::report::{accuracy_csv, accuracy_markdown, gap_csv, gap_markdown, metrics_markdown};
use sns_core::run::{
    ablate_proxy, ablate_seglen, client_for, fill_caption_candidates, load_manifest, write_outcomes,
    write_sns_outputs, Mode, RunManifest,
};
use sns_core::sns::{load_narratives, run_sns, score_mcq, substitute_narratives, EvalOutcome};
use sns_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sns", version, about = "Spatial narrative evaluation harness")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serve every backend call from cassettes (default).
    #[arg(long, global = true, conflicts_with_all = ["record", "live"])]
    replay: bool,
    /// Call endpoints and append exchanges to the cassettes.
    #[arg(long, global = true, conflicts_with = "live")]
    record: bool,
    /// Call endpoints without cassettes.
    #[arg(long, global = true)]
    live: bool,
    /// Output directory; overrides `paths.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Worker threads; overrides `parallel`.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Narrate each video, then answer its questions through the proxy.
    SnsRun {
        /// Score against these narratives instead of generating them.
        #[arg(long)]
        narratives: Option<PathBuf>,
    },
    /// Ask the VLM each question directly with uniformly sampled frames.
    DirectRun,
    /// Score camera-motion captions against references.
    CaptionEval,
    /// Training-corpus construction.
    Datagen {
        #[command(subcommand)]
        cmd: DatagenCmd,
    },
    /// Narrative score at several segment lengths.
    AblateSeglen {
        /// Comma-separated lengths; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Narrative score with each configured proxy over one narratives file.
    AblateProxy {
        #[arg(long)]
        narratives: Option<PathBuf>,
    },
    /// Tables from finished runs, including the direct-versus-narrative gap.
    Report {
        /// Directory of a narrative-score run.
        #[arg(long)]
        sns: PathBuf,
        /// Directory of a direct run on the same questions.
        #[arg(long)]
        direct: Option<PathBuf>,
        /// Row label.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Cassette utilities.
    Cassette {
        #[command(subcommand)]
        cmd: CassetteCmd,
    },
}

#[derive(Subcommand)]
enum DatagenCmd {
    /// Generate camera-free scene captions and write annotations.
    Captions,
    /// Expand, filter, balance and mix the training corpus.
    Build,
    /// Pass rates of a marked QC manifest.
    QcAggregate { manifest: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum RecordTarget {
    Sns,
    Direct,
    Captions,
}

#[derive(Subcommand)]
enum CassetteCmd {
    /// Run a pipeline against live endpoints, recording every exchange.
    Record {
        #[arg(value_enum)]
        target: RecordTarget,
    },
    /// List the entries of a cassette file.
    Inspect { path: PathBuf },
}

struct Ctx {
    cfg: RunConfig,
    snapshot: serde_json::Value,
    mode: Mode,
    workdir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli, mode: Mode) -> Result<Self> {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
        let (mut cfg, snapshot) = RunConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(p) = cli.parallel {
            cfg.parallel = p;
        }
        let workdir = cli
            .workdir
            .clone()
            .or_else(|| cfg.paths.workdir.clone())
            .unwrap_or_else(|| PathBuf::from("sns-out"));
        if cfg.parallel > 0 {
            // fails only if a pool already exists, which is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallel).build_global();
        }
        Ok(Self {
            cfg,
            snapshot,
            mode,
            workdir,
        })
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, self.mode, self.cfg.seed, self.snapshot.clone())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mode = if cli.record {
        Mode::Record
    } else if cli.live {
        Mode::Live
    } else {
        Mode::Replay
    };
    match &cli.cmd {
        Cmd::Cassette {
            cmd: CassetteCmd::Inspect { path },
        } => {
            for line in inspect_cassette(path)? {
                println!("{line}");
            }
            Ok(())
        }
        Cmd::Cassette {
            cmd: CassetteCmd::Record { target },
        } => {
            let ctx = Ctx::new(cli, Mode::Record)?;
            match target {
                RecordTarget::Sns => sns_run(&ctx, None),
                RecordTarget::Direct => direct_run(&ctx),
                RecordTarget::Captions => caption_eval(&ctx),
            }
        }
        Cmd::Datagen {
            cmd: DatagenCmd::QcAggregate { manifest },
        } => qc_report(manifest),
        Cmd::Report { sns, direct, label } => report(sns, direct.as_deref(), label, cli.workdir.as_deref()),
        cmd => {
            let ctx = Ctx::new(cli, mode)?;
            match cmd {
                Cmd::SnsRun { narratives } => sns_run(&ctx, narratives.as_deref()),
                Cmd::DirectRun => direct_run(&ctx),
                Cmd::CaptionEval => caption_eval(&ctx),
                Cmd::Datagen {
                    cmd: DatagenCmd::Captions,
                } => datagen_captions(&ctx),
                Cmd::Datagen { cmd: DatagenCmd::Build } => datagen_build(&ctx),
                Cmd::AblateSeglen { lengths } => seglen(&ctx, lengths),
                Cmd::AblateProxy { narratives } => proxy_ablation(&ctx, narratives.as_deref()),
                _ => unreachable!("handled above"),
            }
        }
    }
}

fn sns_run(ctx: &Ctx, narratives: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let questions = load_question_set(&require_path("paths.questions", &cfg.paths.questions)?)?;
    let proxy = client_for(&cfg.proxy, ctx.mode, "proxy")?;
    let label = cfg.vlm.model.clone();
    let out = &ctx.workdir;
    let mut manifest = ctx.manifest("sns-run");
    let accuracy = match narratives.map(Path::to_path_buf).or_else(|| cfg.paths.narratives.clone()) {
        Some(path) => {
            let store = load_narratives(&require_path("narratives", &Some(path))?)?;
            let (outcomes, audit, acc) = substitute_narratives(&questions, &store, &cfg.sns_config(), &proxy)?;
            write_records(&out.join("audit.jsonl"), &audit)?;
            write_outcomes(out, &label, &outcomes)?;
            acc
        }
        None => {
            let entries = load_manifest(&require_path("paths.manifest", &cfg.paths.manifest)?)?;
            let vlm = client_for(&cfg.vlm, ctx.mode, "vlm")?;
            let run = run_sns(&entries, &questions, &cfg.sns_config(), &vlm, &proxy, out)?;
            write_sns_outputs(out, &label, &run)?;
            manifest = manifest.with_cassette("vlm", &vlm)?;
            run.accuracy
        }
    };
    manifest.with_cassette("proxy", &proxy)?.write(out)?;
    print!("{}", accuracy_markdown(&[(label, &accuracy)]));
    Ok(())
}

fn direct_run(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let questions = load_question_set(&require_path("paths.questions", &cfg.paths.questions)?)?;
    let entries = load_manifest(&require_path("paths.manifest", &cfg.paths.manifest)?)?;
    let vlm = client_for(&cfg.vlm, ctx.mode, "vlm")?;
    let out = &ctx.workdir;
    let run = run_direct(&entries, &questions, &cfg.direct_config(), &vlm, out)?;
    write_records(&out.join("audit.jsonl"), &run.audit)?;
    write_records(&out.join("nq_outcomes.jsonl"), &run.nq)?;
    let label = cfg.vlm.model.clone();
    let mut summary = String::new();
    if !run.mcq.is_empty() {
        write_outcomes(out, &label, &run.mcq)?;
        if let Some(acc) = &run.accuracy {
            summary.push_str(&accuracy_markdown(&[(label.clone(), acc)]));
        }
    }
    if let Some(nq) = run.nq_overall {
        let mut lines = String::from("category,score\n");
        for (cat, s) in &run.nq_scores {
            lines.push_str(&format!("{},{s:.1}\n", cat.as_str()));
        }
        lines.push_str(&format!("overall,{nq:.1}\n"));
        write_text(&out.join("nq_scores.csv"), &lines)?;
        summary.push_str(&format!("\nNumerical questions: {nq:.1} ({} items)\n", run.nq.len()));
    }
    ctx.manifest("direct-run").with_cassette("vlm", &vlm)?.write(out)?;
    print!("{summary}");
    Ok(())
}

fn caption_eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let corpus = load_caption_corpus(&require_path("paths.captions", &cfg.paths.captions)?)?;
    let out = &ctx.workdir;
    let mut manifest = ctx.manifest("caption-eval");
    let corpus = if corpus.iter().any(|p| p.candidate_caption.is_none()) {
        let entries = load_manifest(&require_path("paths.manifest", &cfg.paths.manifest)?)?;
        let vlm = client_for(&cfg.vlm, ctx.mode, "vlm")?;
        let filled = fill_caption_candidates(&corpus, &entries, &cfg.sns_config(), &vlm, out)?;
        manifest = manifest.with_cassette("vlm", &vlm)?;
        filled
    } else {
        corpus
    };
    let (report, per_pair) = evaluate_caption_run(&corpus, &cfg.metrics)?;
    save_caption_corpus(&out.join("captions.jsonl"), &corpus)?;
    write_records(&out.join("pair_scores.jsonl"), &per_pair)?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    let md = metrics_markdown(&cfg.vlm.model, &report);
    write_text(&out.join("metrics.md"), &md)?;
    manifest.write(out)?;
    print!("{md}");
    Ok(())
}

fn seglen(ctx: &Ctx, lengths: &[usize]) -> Result<()> {
    let cfg = &ctx.cfg;
    let lengths = if lengths.is_empty() { cfg.ablation.segment_lengths.clone() } else { lengths.to_vec() };
    if lengths.contains(&0) {
        return Err(Error::Config("segment lengths must be positive".into()));
    }
    let questions = load_question_set(&require_path("paths.questions", &cfg.paths.questions)?)?;
    let entries = load_manifest(&require_path("paths.manifest", &cfg.paths.manifest)?)?;
    let vlm = client_for(&cfg.vlm, ctx.mode, "vlm")?;
    let proxy = client_for(&cfg.proxy, ctx.mode, "proxy")?;
    let out = &ctx.workdir;
    let (table, err) = ablate_seglen(&entries, &questions, &cfg.sns_config(), &lengths, &vlm, &proxy, out);
    write_text(&out.join("ablation.md"), &table.to_markdown())?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    ctx.manifest("ablate-seglen")
        .with_cassette("vlm", &vlm)?
        .with_cassette("proxy", &proxy)?
        .write(out)?;
    print!("{}", table.to_markdown());
    err.map_or(Ok(()), Err)
}

fn proxy_ablation(ctx: &Ctx, narratives: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let path = narratives.map(Path::to_path_buf).or_else(|| cfg.paths.narratives.clone());
    let store = load_narratives(&require_path("narratives", &path)?)?;
    let questions = load_question_set(&require_path("paths.questions", &cfg.paths.questions)?)?;
    if cfg.proxies.is_empty() {
        return Err(Error::Config("no [[proxies]] configured".into()));
    }
    let clients = cfg
        .proxies
        .iter()
        .map(|p| Ok((p.name.clone(), client_for(&p.backend, ctx.mode, &p.name)?)))
        .collect::<Result<Vec<(String, Client)>>>()?;
    let out = &ctx.workdir;
    let (table, err) = ablate_proxy(&questions, &store, &cfg.sns_config(), &clients, out);
    write_text(&out.join("ablation.md"), &table.to_markdown())?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    let mut manifest = ctx.manifest("ablate-proxy");
    for (name, c) in &clients {
        manifest = manifest.with_cassette(name, c)?;
    }
    manifest.write(out)?;
    print!("{}", table.to_markdown());
    err.map_or(Ok(()), Err)
}

fn load_outcomes(dir: &Path) -> Result<Vec<EvalOutcome>> {
    Ok(read_records::<EvalOutcome>(&dir.join("outcomes.jsonl"))?
        .into_iter()
        .map(|(_, o)| o)
        .collect())
}

fn report(sns: &Path, direct: Option<&Path>, label: &str, workdir: Option<&Path>) -> Result<()> {
    let out = workdir.unwrap_or(sns);
    let sns_acc = score_mcq(&load_outcomes(sns)?)?;
    let mut md = accuracy_markdown(&[(format!("{label} (narrative)"), &sns_acc)]);
    let mut csv = accuracy_csv(&[(format!("{label} (narrative)"), &sns_acc)]);
    if let Some(direct) = direct {
        let direct_acc = score_mcq(&load_outcomes(direct)?)?;
        let rows = vec![(label.to_owned(), gap_report(&direct_acc, &sns_acc)?)];
        md = accuracy_markdown(&[
            (format!("{label} (direct)"), &direct_acc),
            (format!("{label} (narrative)"), &sns_acc),
        ]);
        csv = accuracy_csv(&[
            (format!("{label} (direct)"), &direct_acc),
            (format!("{label} (narrative)"), &sns_acc),
        ]);
        let gap = gap_markdown(&rows);
        write_text(&out.join("gap.md"), &gap)?;
        write_text(&out.join("gap.csv"), &gap_csv(&rows))?;
        md.push('\n');
        md.push_str(&gap);
    }
    write_text(&out.join("report.md"), &md)?;
    write_text(&out.join("report.csv"), &csv)?;
    print!("{md}");
    Ok(())
}

fn datagen_captions(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let entries = load_manifest(&require_path("paths.manifest", &cfg.paths.manifest)?)?;
    let corpus = load_caption_corpus(&require_path("paths.captions", &cfg.paths.captions)?)?;
    let vlm = client_for(&cfg.vlm, ctx.mode, "vlm")?;
    let wanted: BTreeSet<&str> = corpus.iter().map(|p| p.video_id.as_str()).collect();
    let selected: Vec<_> = entries.iter().filter(|e| wanted.contains(e.video_id.as_str())).cloned().collect();
    let out = &ctx.workdir;
    let captions = generate_scene_captions(&selected, cfg.datagen.caption_frames, &cfg.decoder, &vlm, out)?;
    let mut annotations = Vec::with_capacity(captions.len());
    for (video_id, scene_caption) in captions {
        let entry = selected.iter().find(|e| e.video_id == video_id).expect("selected entry");
        let pair = corpus.iter().find(|p| p.video_id == video_id).expect("corpus entry");
        let a = VideoAnnotation {
            video_id,
            scene_id: entry.scene_id.clone(),
            scene_caption,
            camera_caption: pair.reference_camera_caption.clone(),
            media: Some(entry.path.to_string_lossy().into_owned()),
        };
        if let Err(e) = a.validate() {
            log::warn!("skipping annotation: {e}");
            continue;
        }
        annotations.push(a);
    }
    write_records(&out.join("annotations.jsonl"), &annotations)?;
    ctx.manifest("datagen-captions").with_cassette("vlm", &vlm)?.write(out)?;
    println!("{} annotations written", annotations.len());
    Ok(())
}

fn datagen_build(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let d = &cfg.datagen;
    let annotations: Vec<VideoAnnotation> = read_records(&require_path("datagen.annotations", &d.annotations)?)?
        .into_iter()
        .map(|(_, a)| a)
        .collect();
    let templates = match &d.templates {
        Some(p) => load_templates(p)?,
        None => shipped_templates(),
    };
    let benchmark: BTreeSet<String> = match &d.benchmark_scenes {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        None => BTreeSet::new(),
    };
    let seed = cfg.seed;
    let narrative = expand_templates(&annotations, &templates, d.target_count, seed)?;
    let (narrative, mut removed) = filter_scene_overlap(narrative, &benchmark);
    let mut qa_sources = Vec::new();
    for src in &d.qa_sources {
        let samples: Vec<DatasetSample> = read_records(&src.path)?.into_iter().map(|(_, s)| s).collect();
        let (kept, gone) = filter_scene_overlap(samples, &benchmark);
        removed.extend(gone);
        qa_sources.push((balance_answers(kept, d.max_share, seed), src.kind));
    }
    let dataset = mix_dataset(narrative, qa_sources, seed);
    for s in &dataset {
        s.validate()?;
    }
    let out = &ctx.workdir;
    write_records(&out.join("dataset.jsonl"), &dataset)?;
    write_records(&out.join("removed.jsonl"), &removed)?;
    let narrative_only: Vec<DatasetSample> =
        dataset.iter().filter(|s| s.kind == SampleKind::Narrative).cloned().collect();
    let n = d.qc_samples.min(narrative_only.len());
    let qc = qc_sample(&narrative_only, n, seed)?;
    write_text(&out.join("qc_manifest.json"), &(serde_json::to_string_pretty(&qc)? + "\n"))?;
    ctx.manifest("datagen-build").write(out)?;
    println!(
        "{} samples written ({} removed for benchmark scenes); {} sampled for QC",
        dataset.len(),
        removed.len(),
        n
    );
    Ok(())
}

fn qc_report(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let manifest: QcManifest = serde_json::from_str(&text)?;
    let r = qc_aggregate(&manifest)?;
    println!("samples: {}", r.n);
    println!("semantic_fidelity: {}%", r.semantic_fidelity);
    println!("motion_consistency: {}%", r.motion_consistency);
    println!("both: {}%", r.both);
    Ok(())
}
