use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::ArgMatches;
use cldtrack_core::bag::{build_bag, save_bag, load_bag, DictKind, Dictionaries, Dictionary, EntryKind, MapLexicon};
use cldtrack_core::config::{ClientMode, RunConfig};
use cldtrack_core::container::write_atomic;
use cldtrack_core::encoders::{GenerativeClient, MockTransport, StubBackend, Transport};
use cldtrack_core::eval::{
    format_boxes, load_sequence, read_boxes, write_sequence, EvaluationReport, MetricReport, SessionTracker, Tracker,
};
use cldtrack_core::exec::Exec;
use cldtrack_core::fusion::{TrackerModel, TrackingSession};
use cldtrack_core::synthetic::{run_demo, LANGUAGE};
use cldtrack_core::train::{run_grad_check, write_trace_csv};
use cldtrack_core::{BBox, Error};

use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(name: &str, m: &ArgMatches, cfg: &RunConfig) -> Result<()> {
    let exec = if m.get_flag("sequential") {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match name {
        "build-bag" => build_bag_cmd(m, cfg, exec),
        "track" => track(m, cfg, exec),
        "eval" => eval(m, exec),
        "demo-synthetic" => demo(m, cfg, exec),
        "grad-check" => grad_check(m, cfg, exec),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn path<'a>(m: &'a ArgMatches, id: &str) -> &'a PathBuf {
    m.get_one::<PathBuf>(id).expect("required by clap")
}

/// A required input path that must exist.
fn input<'a>(m: &'a ArgMatches, id: &str) -> Result<&'a PathBuf> {
    let p = path(m, id);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Usage(format!("--{id}: {} not found", p.display())))
    }
}

fn parse_bbox(text: &str) -> Result<BBox> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--bbox `{text}`: {e}")))?;
    if v.len() != 4 {
        return Err(CliError::Usage(format!("--bbox `{text}`: expected x,y,w,h")));
    }
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| CliError::Usage(format!("--bbox: {e}")))
}

fn transport(cfg: &RunConfig) -> Result<Arc<dyn Transport>> {
    match cfg.client.mode {
        ClientMode::Mock if cfg.client.canned_dir.is_empty() => Ok(Arc::new(MockTransport::default())),
        ClientMode::Mock => Ok(Arc::new(MockTransport::with_dir(&cfg.client.canned_dir))),
        #[cfg(feature = "live-client")]
        ClientMode::Live => {
            if cfg.client.endpoint.is_empty() {
                return Err(CliError::Usage("client.endpoint is required in live mode".into()));
            }
            Ok(Arc::new(cldtrack_core::encoders::HttpTransport::new(&cfg.client.endpoint)))
        }
        #[cfg(not(feature = "live-client"))]
        ClientMode::Live => Err(CliError::Usage(
            "client.mode = \"live\" needs a build with the live-client feature".into(),
        )),
    }
}

fn build_bag_cmd(m: &ArgMatches, cfg: &RunConfig, exec: Exec) -> Result<()> {
    let frame_path = input(m, "frame")?;
    let bbox = parse_bbox(m.get_one::<String>("bbox").expect("required by clap"))?;
    let class_path = input(m, "class-dict")?;
    let attr_path = input(m, "attribute-dict")?;
    let lex_path = input(m, "lexicon")?;
    let exclusions = match m.get_one::<PathBuf>("exclusions") {
        Some(_) => std::fs::read_to_string(input(m, "exclusions")?)
            .map_err(Error::from)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => Vec::new(),
    };

    let backend = StubBackend::new(cfg.stub_config()?)?;
    let frame = cldtrack_core::image::ImagePatch::load_png(frame_path)?.with_bbox(bbox)?;
    let class = Dictionary::encode(
        DictKind::Class,
        cldtrack_core::bag::parse_dictionary_lines(&std::fs::read_to_string(class_path).map_err(Error::from)?),
        &backend,
        exec,
    )?;
    let attribute = Dictionary::encode(
        DictKind::Attribute,
        cldtrack_core::bag::parse_dictionary_lines(&std::fs::read_to_string(attr_path).map_err(Error::from)?),
        &backend,
        exec,
    )?;
    let lex = MapLexicon::load(lex_path)?;
    let client = GenerativeClient::new(cfg.client_config(), transport(cfg)?);
    let out = build_bag(
        &frame,
        Dictionaries {
            class: &class,
            attribute: &attribute,
        },
        &client,
        &lex,
        &backend,
        &cfg.bag_config(),
        &exclusions,
    )?;
    save_bag(path(m, "out"), &out.bag)?;

    for kind in EntryKind::ALL {
        println!("{:<17} {}", kind.as_str(), out.bag.count(kind));
    }
    println!("discarded {} (regenerated {}, excluded {})", out.discarded.len(), out.regenerated, out.excluded);
    for d in &out.discarded {
        println!("  - {} {:.4} {:?}", d.kind.as_str(), d.similarity, d.text);
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

fn track(m: &ArgMatches, cfg: &RunConfig, exec: Exec) -> Result<()> {
    let seq = load_sequence(input(m, "sequence")?)?;
    let bag = load_bag(input(m, "bag")?)?;
    let model = TrackerModel::load(input(m, "model")?)?;
    if seq.frames.len() != seq.len() {
        return Err(Error::Data(format!("sequence `{}` has no frames", seq.name)).into());
    }
    let init = seq.boxes[0].ok_or_else(|| Error::Data("no target on the first frame".into()))?;
    let backend = StubBackend::new(cfg.stub_config()?)?;
    let session = TrackingSession::new(&model, &backend, cfg.session_config()?)?.with_exec(exec);
    let mut tracker = SessionTracker { session, bag: &bag };

    let mut preds = Vec::with_capacity(seq.len());
    let frame_err = |i: usize, e: Error| Error::Frame {
        frame: i + 1,
        source: Box::new(e),
    };
    tracker.init(&seq.load_frame(0)?, init).map_err(|e| frame_err(0, e))?;
    preds.push(Some(init));
    for i in 1..seq.len() {
        let frame = seq.load_frame(i)?;
        preds.push(Some(tracker.track(&frame).map_err(|e| frame_err(i, e))?));
    }
    write_atomic(path(m, "out"), format_boxes(&preds).as_bytes())?;
    println!("tracked {} frames of `{}`", preds.len(), seq.name);
    Ok(())
}

fn eval(m: &ArgMatches, exec: Exec) -> Result<()> {
    let seqs: Vec<&PathBuf> = m.get_many::<PathBuf>("sequence").expect("required by clap").collect();
    let preds: Vec<&PathBuf> = m.get_many::<PathBuf>("predictions").expect("required by clap").collect();
    if seqs.len() != preds.len() {
        return Err(CliError::Usage(format!(
            "{} --sequence but {} --predictions",
            seqs.len(),
            preds.len()
        )));
    }
    for (flag, list) in [("sequence", &seqs), ("predictions", &preds)] {
        if let Some(p) = list.iter().find(|p| !p.exists()) {
            return Err(CliError::Usage(format!("--{flag}: {} not found", p.display())));
        }
    }
    let pairs: Vec<(&PathBuf, &PathBuf)> = seqs.into_iter().zip(preds).collect();
    let reports = exec.try_map(&pairs, |(s, p)| -> cldtrack_core::Result<MetricReport> {
        let d = load_sequence(s)?;
        let pred = read_boxes(p)?;
        MetricReport::from_predictions(&d, &pred)
    })?;
    let report = EvaluationReport::new(reports)?;
    let out = path(m, "out");
    std::fs::create_dir_all(out).map_err(Error::from)?;
    report.write(&out.join("report.csv"), &out.join("report.json"))?;
    print_metrics("ALL", &report.overall);
    Ok(())
}

fn print_metrics(name: &str, m: &cldtrack_core::eval::Metrics) {
    println!(
        "{name}: frames={} S={:.4} P={:.4} NP={:.4} AO={:.4} SR_050={:.4} SR_075={:.4}",
        m.frames, m.s, m.p, m.np, m.ao, m.sr_050, m.sr_075
    );
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(p, text.as_bytes())?)
}

fn demo(m: &ArgMatches, cfg: &RunConfig, exec: Exec) -> Result<()> {
    let out = path(m, "out");
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let d = run_demo(cfg, exec)?;

    let boxes: Vec<Option<BBox>> = d.sequence.boxes.iter().copied().map(Some).collect();
    write_sequence(&out.join("sequence"), &d.sequence.frames, &boxes, Some(LANGUAGE), &BTreeMap::new())?;
    save_bag(&out.join("bag.json"), &d.bag)?;
    d.model.save(&out.join("model.json"))?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;
    write_text(&out.join("predictions.txt"), &format_boxes(&d.predictions))?;
    EvaluationReport::new(vec![d.report.clone()])?.write(&out.join("report.csv"), &out.join("report.json"))?;
    if let Some(t) = &d.training {
        let f = File::create(out.join("loss_trace.csv")).map_err(Error::from)?;
        write_trace_csv(&t.trace, BufWriter::new(f))?;
        println!(
            "training: {} steps, loss {:.6} -> {:.6} (ratio {:.4})",
            t.trace.len(),
            t.initial.total,
            t.final_loss.total,
            t.final_loss.total / t.initial.total
        );
    } else {
        println!("training: skipped");
    }
    print_metrics("synthetic", &d.report.metrics);
    println!("mean IoU over tracked frames: {:.4}", d.mean_iou);
    println!("elapsed: {:.1}s", d.elapsed.as_secs_f64());

    let checks = d.checks(&cfg.synthetic);
    for (name, ok, detail) in &checks {
        println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Acceptance(failed.join(", ")))
    }
}

fn grad_check(m: &ArgMatches, cfg: &RunConfig, exec: Exec) -> Result<()> {
    let mut gc = cfg.gradcheck_config();
    gc.corrupt_gradient = m.get_flag("corrupt-gradient");
    let report = run_grad_check(&gc, &cfg.loss, exec)?;
    for p in &report.points {
        println!(
            "point {}: {} params, max rel error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
            p.point, p.num_params, p.max_rel_error, p.worst_param, p.analytic, p.numeric
        );
    }
    println!("max rel error {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance);
    if let Some(p) = m.get_one::<PathBuf>("out") {
        let mut text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        text.push('\n');
        write_text(p, &text)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error, report.tolerance
        )))
    }
}
