//! Subcommand implementations. Everything printed to stdout is deterministic
//! for a fixed seed; paths and progress go to the log on stderr.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reftrack_core::dataio::{load_dataset, load_results, synth_generate, write_results, DataError};
use reftrack_core::gspo::demo::{run_demo, DemoConfig};
use reftrack_core::gspo::GspoError;
use reftrack_core::metrics::{evaluate, evaluate_expression_set, HEADLINE_NAMES};
use reftrack_core::perception::{
    DetectorBackend, OracleBackend, ParserBackend, RemoteBackend, RemoteConfig,
};
use reftrack_core::rewards::{approximate_length, composite_reward, RewardInput};
use reftrack_core::tracker::run_sequence;
use reftrack_core::{
    parse_answer, Aggregation, AdvantageMode, BBox, ExpressionAnnotation, ImageDims, MetricReport, PerturbationConfig,
    Sequence, SynthConfig, TrackerConfig, TrackingResult,
};
use serde::{Deserialize, Serialize};

use crate::args::{
    AggregationArg, BackendKind, Command, EvalArgs, GspoDemoArgs, Globals, ParseArgs, RewardArgs, SynthArgs, TrackArgs,
};
use crate::CliError;

pub fn run(g: &Globals, command: Command) -> Result<(), CliError> {
    match command {
        Command::Track(a) => track(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Reward(a) => reward(a),
        Command::GspoDemo(a) => gspo_demo(g, a),
        Command::Synth(a) => synth(g, a),
        Command::Parse(a) => parse(a),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn load(root: &Path) -> Result<Vec<Sequence>, CliError> {
    load_dataset(root).map_err(input_err)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable report");
    s.push('\n');
    s
}

fn tracker_config(a: &TrackArgs) -> Result<TrackerConfig, CliError> {
    let d = TrackerConfig::default();
    let cfg = TrackerConfig {
        tau_iou: a.tau_iou.unwrap_or(d.tau_iou),
        delta_max: a.delta_max.unwrap_or(d.delta_max),
        emit_temporary: a.emit_temporary.unwrap_or(d.emit_temporary),
        min_hits: a.min_hits.unwrap_or(d.min_hits),
        noise: d.noise,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn matches_filter(expr: &ExpressionAnnotation, filter: Option<&str>) -> bool {
    filter.map_or(true, |f| expr.expression.contains(f) || expr.slug().contains(f))
}

fn track(g: &Globals, a: TrackArgs) -> Result<(), CliError> {
    let dataset = required(a.dataset.clone(), "dataset")?;
    let backend = a.backend.unwrap_or(BackendKind::Oracle);
    let cfg = tracker_config(&a)?;
    let max_failure_rate = a.max_failure_rate.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&max_failure_rate) {
        return Err(CliError::Usage("--max-failure-rate must lie in [0, 1]".into()));
    }
    let perturbation = PerturbationConfig {
        jitter_sigma: a.jitter_sigma.unwrap_or(0.0),
        scale_sigma: a.scale_sigma.unwrap_or(0.0),
        p_miss: a.p_miss.unwrap_or(0.0),
        fp_rate: a.fp_rate.unwrap_or(0.0),
        seed: 0,
    };
    perturbation.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let remote = match backend {
        BackendKind::Remote => {
            let endpoint = a
                .endpoint
                .clone()
                .ok_or_else(|| CliError::Usage("remote backend needs --endpoint or REFTRACK_ENDPOINT".into()))?;
            let mut rc = RemoteConfig::new(endpoint);
            if let Some(ms) = a.timeout_ms {
                rc.timeout = Duration::from_millis(ms);
            }
            if let Some(r) = a.retries {
                rc.retries = r;
            }
            Some(rc)
        }
        _ => None,
    };
    let cache_dir = match backend {
        BackendKind::Parser => Some(required(a.cache_dir.clone(), "cache-dir")?),
        _ => None,
    };

    let sequences = load(&dataset)?;
    // one seed per expression, drawn in dataset order so a filter does not
    // change the noise seen by the remaining expressions
    let mut seeds = ChaCha8Rng::seed_from_u64(g.seed);
    let mut table = String::new();
    let _ = writeln!(table, "{:<16} {:<32} {:>6} {:>6} {:>4} {:>6}", "sequence", "expression", "frames", "boxes", "ids", "failed");
    let mut over_budget = Vec::new();
    let mut tracked = 0usize;
    for seq in &sequences {
        for expr in &seq.expressions {
            let expr_seed: u64 = seeds.random();
            if !matches_filter(expr, a.expression.as_deref()) {
                continue;
            }
            let slug = expr.slug();
            let mut backend: Box<dyn DetectorBackend> = match backend {
                BackendKind::Oracle => {
                    let p = PerturbationConfig { seed: expr_seed, ..perturbation };
                    Box::new(
                        OracleBackend::new(seq.gt.clone(), expr.clone(), seq.manifest.dims, p)
                            .map_err(|e| CliError::Usage(e.to_string()))?,
                    )
                }
                BackendKind::Parser => {
                    let dir = cache_dir.as_ref().expect("checked above").join(&seq.manifest.name).join(&slug);
                    Box::new(ParserBackend::new(dir))
                }
                BackendKind::Remote => {
                    let rc = remote.clone().expect("checked above");
                    Box::new(RemoteBackend::new(rc, seq.manifest.dims))
                }
            };
            log::info!("tracking {} / {}", seq.manifest.name, expr.expression);
            let result = run_sequence(backend.as_mut(), &seq.manifest, &expr.expression, &cfg)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let path = g.output_dir.join(&seq.manifest.name).join(format!("{slug}.txt"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            write_results(&result, &path).map_err(|e| CliError::Runtime(e.to_string()))?;
            let failed = result.warnings.len();
            let _ = writeln!(
                table,
                "{:<16} {:<32} {:>6} {:>6} {:>4} {:>6}",
                seq.manifest.name,
                slug,
                result.frame_count,
                result.num_boxes(),
                result.ids().len(),
                failed
            );
            let rate = failed as f64 / f64::from(result.frame_count.max(1));
            if rate > max_failure_rate {
                over_budget.push(format!("{}/{slug} ({failed} of {} frames)", seq.manifest.name, result.frame_count));
            }
            tracked += 1;
        }
    }
    print!("{table}");
    println!("{tracked} expression(s) tracked");
    if tracked == 0 {
        return Err(CliError::Input("no expression matched".into()));
    }
    if !over_budget.is_empty() {
        return Err(CliError::Runtime(format!("backend failure rate above tolerance: {}", over_budget.join(", "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct ExpressionScore {
    sequence: String,
    expression: String,
    slug: String,
    missing: bool,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Serialize)]
struct EvalReport {
    aggregation: Aggregation,
    pairs: usize,
    missing: usize,
    overall: MetricReport,
    per_expression: Vec<ExpressionScore>,
}

fn metric_row(label: &str, r: &MetricReport) -> String {
    let mut row = format!("{label:<40}");
    for v in r.headline() {
        let _ = write!(row, " {:>7.2}", 100.0 * v);
    }
    row
}

fn eval(g: &Globals, a: EvalArgs) -> Result<(), CliError> {
    let predictions = required(a.predictions, "predictions")?;
    let dataset = required(a.dataset, "dataset")?;
    let aggregation = match a.aggregation.unwrap_or(AggregationArg::Micro) {
        AggregationArg::Micro => Aggregation::Micro,
        AggregationArg::Macro => Aggregation::Macro,
    };
    if !predictions.is_dir() {
        return Err(CliError::Input(format!("{}: not a directory", predictions.display())));
    }
    let sequences = load(&dataset)?;
    let mut items = Vec::new();
    let mut labels = Vec::new();
    let mut missing = 0usize;
    for seq in &sequences {
        for expr in &seq.expressions {
            let slug = expr.slug();
            let path = predictions.join(&seq.manifest.name).join(format!("{slug}.txt"));
            let is_missing = !path.is_file();
            let pred = if is_missing {
                log::warn!("{}: missing, scored as empty", path.display());
                missing += 1;
                TrackingResult::new(&seq.manifest.name, seq.manifest.frame_count, seq.manifest.dims)
            } else {
                load_results(&path, &seq.manifest).map_err(input_err)?
            };
            let gt = seq.gt.for_expression(expr, &seq.manifest);
            labels.push((seq.manifest.name.clone(), expr.expression.clone(), slug.clone(), is_missing));
            items.push((format!("{}/{slug}", seq.manifest.name), pred, gt));
        }
    }
    if missing == items.len() {
        return Err(CliError::Input(format!("no prediction files found under {}", predictions.display())));
    }
    let overall = evaluate_expression_set(&items, aggregation).map_err(input_err)?;

    let mut per_expression = Vec::with_capacity(items.len());
    for ((label, pred, gt), (sequence, expression, slug, is_missing)) in items.iter().zip(labels) {
        let report = evaluate(pred, gt).map_err(|e| CliError::Input(format!("{label}: {e}")))?;
        per_expression.push(ExpressionScore { sequence, expression, slug, missing: is_missing, report });
    }

    let mut header = format!("{:<40}", "scope");
    for name in HEADLINE_NAMES {
        let _ = write!(header, " {name:>7}");
    }
    println!("{header}");
    if a.per_expression.unwrap_or(false) {
        for s in &per_expression {
            println!("{}", metric_row(&format!("{}/{}", s.sequence, s.slug), &s.report));
        }
    }
    let agg = match aggregation {
        Aggregation::Micro => "micro",
        Aggregation::Macro => "macro",
    };
    println!("{}", metric_row(&format!("all ({agg}, {} pairs)", items.len()), &overall));
    if missing > 0 {
        println!("{missing} prediction file(s) missing, scored as empty");
    }
    let report = EvalReport { aggregation, pairs: items.len(), missing, overall, per_expression };
    write_file(&g.output_dir.join("eval.json"), &to_json(&report))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompletionRecord {
    sequence: Option<String>,
    frame: u32,
    completion: String,
    expression: Option<String>,
    length: Option<u32>,
    model_width: Option<u32>,
    model_height: Option<u32>,
}

#[derive(Serialize)]
struct RewardLine<'a> {
    line: usize,
    sequence: &'a str,
    frame: u32,
    #[serde(flatten)]
    breakdown: reftrack_core::rewards::RewardBreakdown,
}

fn reward(a: RewardArgs) -> Result<(), CliError> {
    let completions = required(a.completions, "completions")?;
    let dataset = required(a.dataset, "dataset")?;
    let phase = a.phase.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&phase) {
        return Err(CliError::Usage("--phase must lie in [0, 1]".into()));
    }
    let mut params = a.params.unwrap_or_default();
    if let Some(t) = a.tau_match {
        params.tau_match = t;
    }
    if let Some(s) = a.phase_switch {
        params.phase_switch = s;
    }
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let sequences = load(&dataset)?;
    let file = fs::File::open(&completions).map_err(|e| CliError::Input(format!("{}: {e}", completions.display())))?;

    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(input_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| CliError::Input(format!("{}:{line_no}: {m}", completions.display()));
        let rec: CompletionRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let seq = match &rec.sequence {
            Some(name) => sequences.iter().find(|s| &s.manifest.name == name),
            None if sequences.len() == 1 => sequences.first(),
            None => return Err(bad("\"sequence\" is required for a multi-sequence dataset".into())),
        }
        .ok_or_else(|| bad(format!("unknown sequence {:?}", rec.sequence)))?;
        if rec.frame == 0 || rec.frame > seq.manifest.frame_count {
            return Err(bad(format!("frame {} outside 1..={}", rec.frame, seq.manifest.frame_count)));
        }
        let gts: Vec<BBox> = match &rec.expression {
            Some(text) => {
                let expr = seq
                    .expressions
                    .iter()
                    .find(|e| &e.expression == text || &e.slug() == text)
                    .ok_or_else(|| bad(format!("unknown expression {text:?}")))?;
                seq.gt.boxes_at(rec.frame).filter(|(id, _)| expr.covers(*id, rec.frame)).map(|(_, b)| b).collect()
            }
            None => seq.gt.boxes_at(rec.frame).map(|(_, b)| b).collect(),
        };
        let det_dims = match (rec.model_width, rec.model_height) {
            (None, None) => seq.manifest.dims,
            (Some(w), Some(h)) => ImageDims::new(w, h).map_err(|e| bad(e.to_string()))?,
            _ => return Err(bad("model_width and model_height go together".into())),
        };
        let input = RewardInput {
            completion: &rec.completion,
            length: rec.length.unwrap_or_else(|| approximate_length(&rec.completion)),
            gts: &gts,
            det_dims,
            gt_dims: seq.manifest.dims,
            phase,
        };
        let out = RewardLine {
            line: line_no,
            sequence: &seq.manifest.name,
            frame: rec.frame,
            breakdown: composite_reward(&input, &params),
        };
        println!("{}", serde_json::to_string(&out).expect("serialisable breakdown"));
    }
    Ok(())
}

fn gspo_demo(g: &Globals, a: GspoDemoArgs) -> Result<(), CliError> {
    let mut cfg = DemoConfig { seed: g.seed, ..DemoConfig::default() };
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => { $( if let Some(v) = a.$src { cfg.$($dst).+ = v; } )* };
    }
    set!(group_size => gspo.group_size, epsilon => gspo.epsilon, beta_kl => gspo.beta_kl, scale_max => gspo.scale_max,
        steps => steps, vocab => vocab, max_len => max_len, learning_rate => learning_rate,
        inner_steps => inner_steps, inject_sigma => inject_sigma, gradient_checks => gradient_checks);
    if a.no_cas.unwrap_or(false) {
        cfg.gspo.advantage = AdvantageMode::Standardized;
    }
    let report = run_demo(&cfg).map_err(|e| match e {
        GspoError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;

    println!("{:>5} {:>12} {:>12} {:>10} {:>12} {:>12}", "step", "mean_reward", "objective", "ratio", "max|A|", "kl");
    for s in &report.steps {
        println!(
            "{:>5} {:>12.6} {:>12.6} {:>10.6} {:>12.4e} {:>12.4e}",
            s.step, s.mean_reward, s.objective, s.mean_ratio, s.max_abs_advantage, s.kl
        );
    }
    println!(
        "expected reward {:.6} -> {:.6}",
        report.initial_expected_reward, report.final_expected_reward
    );
    let p = &report.probe;
    println!(
        "probe sigma {:.1e}: standardized max|A| {:.4} (gain {:.3e}), clipped max|A| {:.3e} (gain {:.3e})",
        p.sigma, p.standardized_max_abs, p.standardized_gain, p.cas_max_abs, p.cas_gain
    );
    println!(
        "gradient check: {} instances, {} rejected near the clip boundary, max relative error {:.3e}",
        report.gradient.instances, report.gradient.rejected_near_kink, report.gradient.max_relative_error
    );
    for c in &report.checks {
        println!("[{}] {}", if c.passed { "ok" } else { "FAIL" }, c.name);
    }
    write_file(&g.output_dir.join("gspo_demo.json"), &to_json(&report))?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn synth(g: &Globals, a: SynthArgs) -> Result<(), CliError> {
    let d = SynthConfig::default();
    let name = a.name.unwrap_or(d.name);
    let dims = ImageDims::new(a.width.unwrap_or(d.dims.width()), a.height.unwrap_or(d.dims.height()))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = SynthConfig {
        n_targets: a.targets.unwrap_or(d.n_targets),
        n_frames: a.frames.unwrap_or(d.n_frames),
        dims,
        speed: (a.speed_min.unwrap_or(d.speed.0), a.speed_max.unwrap_or(d.speed.1)),
        size: (a.size_min.unwrap_or(d.size.0), a.size_max.unwrap_or(d.size.1)),
        seed: g.seed,
        name,
    };
    let dest: PathBuf = a.dest.unwrap_or_else(|| g.output_dir.join(&cfg.name));
    let seq = synth_generate(&cfg, &dest).map_err(|e| match e {
        DataError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    log::info!("sequence written to {}", dest.display());
    println!(
        "{}: {} frames at {}x{}, {} targets, {} expression(s), {} ground-truth boxes",
        seq.manifest.name,
        seq.manifest.frame_count,
        dims.width(),
        dims.height(),
        cfg.n_targets,
        seq.expressions.len(),
        seq.gt.records.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ParseLine {
    line: usize,
    has_think: bool,
    has_answer: bool,
    well_ordered: bool,
    answer_is_pure: bool,
    boxes: Vec<[f64; 4]>,
    dropped: usize,
    format_reward: f64,
}

fn parse(a: ParseArgs) -> Result<(), CliError> {
    let path = required(a.file, "file")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let completions: Vec<(usize, String)> = if a.whole.unwrap_or(false) {
        vec![(1, text)]
    } else {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let completion = if jsonl {
                completion_from_json(line).map_err(|m| CliError::Input(format!("{}:{}: {m}", path.display(), n + 1)))?
            } else {
                line.to_string()
            };
            out.push((n + 1, completion));
        }
        out
    };
    for (line, c) in completions {
        let p = parse_answer(&c);
        let out = ParseLine {
            line,
            has_think: p.has_think,
            has_answer: p.has_answer,
            well_ordered: p.well_ordered,
            answer_is_pure: p.answer_is_pure,
            boxes: p.boxes.iter().map(BBox::to_array).collect(),
            dropped: p.dropped,
            format_reward: reftrack_core::rewards::format_reward(&p),
        };
        println!("{}", serde_json::to_string(&out).expect("serialisable diagnostics"));
    }
    Ok(())
}

fn completion_from_json(line: &str) -> Result<String, String> {
    match serde_json::from_str::<serde_json::Value>(line).map_err(|e| e.to_string())? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Object(mut m) => match m.remove("completion") {
            Some(serde_json::Value::String(s)) => Ok(s),
            _ => Err("object without a string \"completion\" field".into()),
        },
        _ => Err("expected a string or an object".into()),
    }
}
