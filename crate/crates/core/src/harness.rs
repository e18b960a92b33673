//! Experiments driven by a [`RunSpec`]: data preparation, per-method
//! training, CSV/SVG persistence and summaries.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cf::CFConfig;
use crate::config::{Backbone, Generator, Method, RunSpec};
use crate::data::{gen_gaussian_clusters, gen_pattern_images, inject_label_noise, randomize_labels, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{avg_last_k, max_of, min_of, parse_csv, to_csv, Field, MetricsRecord};
use crate::model::{ArchConfig, LayerSpec, Model};
use crate::seed::{stream_seed, Stream};
use crate::trainer::{extract_features, train_run, TrainConfig};

/// Replace `path` in one step so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Clean training and validation sets for the spec.
pub fn load_data(spec: &RunSpec) -> Result<(Dataset, Dataset)> {
    let d = &spec.data;
    match d.generator {
        Generator::Csv => {
            let (Some(tp), Some(vp)) = (&d.path, &d.val_path) else {
                return Err(Error::Config("csv data needs data.path and data.val_path".into()));
            };
            let train = Dataset::from_csv(tp, Some(d.classes))?;
            let val = Dataset::from_csv(vp, Some(d.classes))?;
            Ok((train, val))
        }
        Generator::Gaussian | Generator::Patterns => {
            let n = d.n_train + d.n_val;
            let full = if d.generator == Generator::Gaussian {
                gen_gaussian_clusters(d.classes, d.dim, n, d.sep, d.seed)?
            } else {
                gen_pattern_images(d.classes, d.hw, n, d.seed)?
            };
            let train = full.subset(&(0..d.n_train).collect::<Vec<_>>())?;
            let val = full.subset(&(d.n_train..n).collect::<Vec<_>>())?;
            Ok((train, val))
        }
    }
}

/// Label corruption configured for the training split.
pub fn corrupt(train: &Dataset, spec: &RunSpec, randomize: bool) -> Result<Dataset> {
    let seed = stream_seed(spec.data.seed, Stream::Data);
    if randomize {
        Ok(randomize_labels(train, seed))
    } else if spec.data.noise_rate > 0.0 {
        inject_label_noise(train, spec.data.noise_rate, seed)
    } else {
        Ok(train.clone())
    }
}

pub fn arch_config(
    spec: &RunSpec,
    input_shape: &[usize],
    classes: usize,
    desc_channel: usize,
    dropout: f64,
    seed: u64,
) -> Result<ArchConfig> {
    let init = stream_seed(seed, Stream::Init);
    let mut arch = match &spec.arch.backbone {
        Backbone::Mlp(widths) => {
            let dim: usize = input_shape.iter().product();
            let mut a = ArchConfig::mlp(dim, widths, classes, desc_channel, init);
            if input_shape.len() > 1 {
                a.backbone.insert(0, LayerSpec::flatten());
                a.input_shape = input_shape.to_vec();
            }
            a
        }
        Backbone::Cnn { channels, features } => match input_shape {
            [c, h, w] if h == w => ArchConfig::cnn(*c, *h, channels, *features, classes, desc_channel, init),
            _ => {
                return Err(Error::Config(format!(
                    "arch.backbone cnn needs square [c,h,w] inputs, data has {input_shape:?}"
                )))
            }
        },
    };
    if !spec.arch.task_head.is_empty() {
        let LayerSpec { kind, .. } = arch.task_head[0];
        let crate::model::LayerKind::Dense { inputs, .. } = kind else {
            unreachable!("builders emit a dense task head")
        };
        let mut head = Vec::new();
        let mut width = inputs;
        for &h in &spec.arch.task_head {
            head.push(LayerSpec::dense(width, h));
            head.push(LayerSpec::relu());
            width = h;
        }
        head.push(LayerSpec::dense(width, classes));
        arch.task_head = head;
    }
    Ok(arch.with_dropout(dropout))
}

/// Training config for `method`; `None` runs the spec exactly as configured.
pub fn method_config(spec: &RunSpec, method: Option<Method>, seed: u64, n_train: usize) -> TrainConfig {
    let mut cfg = spec.train_config(seed, n_train);
    let steps = cfg.steps_per_epoch(n_train);
    let r = &mut cfg.regularizers;
    match method {
        None => {}
        Some(Method::Baseline) => r.cf = None,
        Some(Method::Cf) => r.cf = Some(spec.cf.resolve(steps)),
        Some(Method::WeightDecay) => {
            r.cf = None;
            r.weight_decay = spec.compare.weight_decay;
        }
        Some(Method::LabelSmoothing) => {
            r.cf = None;
            r.label_smoothing = spec.compare.label_smoothing;
        }
        Some(Method::Dropout) => {
            r.cf = None;
            r.dropout = spec.compare.dropout;
        }
    }
    cfg
}

/// Builds the model for `cfg` and trains it.
pub fn train_with(
    spec: &RunSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(Model, Vec<MetricsRecord>)> {
    let desc = cfg
        .regularizers
        .cf
        .map_or(spec.cf.config.desc_channel, |c| c.desc_channel);
    let arch = arch_config(
        spec,
        train.sample_shape(),
        train.num_classes,
        desc,
        cfg.regularizers.dropout,
        cfg.seed,
    )?;
    let mut model = Model::build(arch)?;
    let records = train_run(&mut model, train, val, cfg)?;
    Ok((model, records))
}

/// Per-field aggregates of one or more runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub label: String,
    pub runs: usize,
    /// `(mean, std)` pairs in [`SUMMARY_COLUMNS`] order.
    pub stats: Vec<(f64, f64)>,
}

pub const SUMMARY_COLUMNS: [&str; 6] = [
    "min_val_loss",
    "max_val_top1",
    "max_val_top5",
    "avg10_val_loss",
    "avg10_val_top1",
    "avg10_val_top5",
];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(label: &str, runs: &[Vec<MetricsRecord>]) -> Result<Summary> {
    if runs.is_empty() || runs.iter().any(|r| r.is_empty()) {
        return Err(Error::Contract(format!("summary of {label:?} has an empty run")));
    }
    let per_run = |f: &dyn Fn(&[MetricsRecord]) -> Result<f64>| -> Result<(f64, f64)> {
        let xs = runs.iter().map(|r| f(r)).collect::<Result<Vec<_>>>()?;
        Ok(mean_std(&xs))
    };
    let stats = vec![
        per_run(&|r| Ok(min_of(r, Field::ValLoss)))?,
        per_run(&|r| Ok(max_of(r, Field::ValTop1)))?,
        per_run(&|r| Ok(max_of(r, Field::ValTop5)))?,
        per_run(&|r| avg_last_k(r, 10, Field::ValLoss))?,
        per_run(&|r| avg_last_k(r, 10, Field::ValTop1))?,
        per_run(&|r| avg_last_k(r, 10, Field::ValTop5))?,
    ];
    Ok(Summary {
        label: label.to_string(),
        runs: runs.len(),
        stats,
    })
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let mut s = String::from("method,runs");
    for c in SUMMARY_COLUMNS {
        let _ = write!(s, ",{c}_mean,{c}_std");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.label, r.runs);
        for (m, sd) in &r.stats {
            let _ = write!(s, ",{m:.6},{sd:.6}");
        }
        s.push('\n');
    }
    s
}

fn summary_line(r: &Summary) -> String {
    let parts: Vec<String> = SUMMARY_COLUMNS
        .iter()
        .zip(&r.stats)
        .map(|(c, (m, sd))| format!("{c} {m:.4} ± {sd:.4}"))
        .collect();
    format!("{} ({} runs): {}", r.label, r.runs, parts.join(", "))
}

/// Files written by an experiment and a human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

struct Writer<'a> {
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, contents.as_bytes())?;
        self.files.push(path.clone());
        Ok(path)
    }
}

fn writer(out: &Path) -> Result<Writer<'_>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(Writer {
        out,
        files: Vec::new(),
    })
}

/// Trains `(method, seed)` jobs in parallel; results keep job order.
fn run_jobs(
    spec: &RunSpec,
    jobs: &[(Option<Method>, u64)],
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<Vec<MetricsRecord>>> {
    jobs.par_iter()
        .map(|&(method, seed)| {
            let cfg = method_config(spec, method, seed, train.len());
            train_with(spec, &cfg, train, val).map(|(_, r)| r)
        })
        .collect()
}

/// One CSV per seed plus a summary across seeds.
pub fn run_train(spec: &RunSpec, out: &Path) -> Result<Report> {
    let (train, val) = load_data(spec)?;
    let train = corrupt(&train, spec, spec.data.randomize_labels)?;
    let jobs: Vec<_> = spec.seeds.iter().map(|&s| (None, s)).collect();
    let runs = run_jobs(spec, &jobs, &train, &val)?;

    let mut w = writer(out)?;
    let mut series = Vec::new();
    for (&seed, recs) in spec.seeds.iter().zip(&runs) {
        let name = format!("seed{seed}");
        w.put(&format!("{name}.csv"), &to_csv(recs))?;
        series.push((name, recs.clone()));
    }
    let label = if spec.cf.enabled { "cf" } else { "baseline" };
    let summary = summarize(label, &runs)?;
    w.put("summary.csv", &summary_csv(std::slice::from_ref(&summary)))?;
    w.put("val_loss.svg", &render_svg(&series, Field::ValLoss)?)?;
    Ok(Report {
        files: w.files,
        summary: summary_line(&summary),
    })
}

/// Every method in `compare.methods` over every seed.
pub fn run_compare(spec: &RunSpec, out: &Path) -> Result<Report> {
    let (train, val) = load_data(spec)?;
    let train = corrupt(&train, spec, spec.data.randomize_labels)?;
    let methods = &spec.compare.methods;
    let jobs: Vec<_> = methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (Some(m), s)))
        .collect();
    let runs = run_jobs(spec, &jobs, &train, &val)?;

    let mut w = writer(out)?;
    let mut series = Vec::new();
    for (&(m, seed), recs) in jobs.iter().zip(&runs) {
        let name = format!("{}_seed{seed}", m.expect("compare jobs name a method"));
        w.put(&format!("{name}.csv"), &to_csv(recs))?;
        series.push((name, recs.clone()));
    }
    let per = spec.seeds.len();
    let summaries = methods
        .iter()
        .zip(runs.chunks(per))
        .map(|(m, rs)| summarize(m.name(), rs))
        .collect::<Result<Vec<_>>>()?;
    w.put("summary.csv", &summary_csv(&summaries))?;
    w.put("val_loss.svg", &render_svg(&series, Field::ValLoss)?)?;
    Ok(Report {
        files: w.files,
        summary: summaries.iter().map(summary_line).collect::<Vec<_>>().join("\n"),
    })
}

/// Random-label and clean-label curves per method, emitted side by side.
pub fn run_memtest(spec: &RunSpec, out: &Path) -> Result<Report> {
    let (clean, val) = load_data(spec)?;
    let random = corrupt(&clean, spec, true)?;
    let methods = &spec.compare.methods;
    let jobs: Vec<_> = methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (Some(m), s)))
        .collect();
    let random_runs = run_jobs(spec, &jobs, &random, &val)?;
    let clean_runs = run_jobs(spec, &jobs, &clean, &val)?;

    let mut w = writer(out)?;
    let mut table = String::from(
        "method,seed,epoch,random_train_loss,random_train_top1,clean_train_loss,clean_val_loss,clean_val_top1\n",
    );
    let (mut mem_series, mut val_series) = (Vec::new(), Vec::new());
    let mut lines = Vec::new();
    for ((&(m, seed), rr), cr) in jobs.iter().zip(&random_runs).zip(&clean_runs) {
        let m = m.expect("memtest jobs name a method");
        for (a, b) in rr.iter().zip(cr) {
            let _ = writeln!(
                table,
                "{m},{seed},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                a.epoch, a.train_loss, a.train_top1, b.train_loss, b.val_loss, b.val_top1
            );
        }
        w.put(&format!("random_{m}_seed{seed}.csv"), &to_csv(rr))?;
        w.put(&format!("clean_{m}_seed{seed}.csv"), &to_csv(cr))?;
        mem_series.push((format!("random_{m}_seed{seed}"), rr.clone()));
        val_series.push((format!("clean_{m}_seed{seed}"), cr.clone()));
        lines.push(format!(
            "{m} seed {seed}: random-label max train_top1 {:.4}, clean min val_loss {:.4}",
            max_of(rr, Field::TrainTop1),
            min_of(cr, Field::ValLoss)
        ));
    }
    w.put("memtest.csv", &table)?;
    w.put("memtest_train_top1.svg", &render_svg(&mem_series, Field::TrainTop1)?)?;
    w.put("memtest_val_loss.svg", &render_svg(&val_series, Field::ValLoss)?)?;
    Ok(Report {
        files: w.files,
        summary: lines.join("\n"),
    })
}

/// One sweep configuration: which knob was varied and the resulting CF config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub param: &'static str,
    pub value: f64,
    /// `None` for the baseline row.
    pub cf: Option<CFConfig>,
}

/// Grid points varied one at a time around the spec's CF config, baseline first.
pub fn sweep_points(spec: &RunSpec, steps_per_epoch: u64) -> Result<Vec<SweepPoint>> {
    let g = &spec.sweep;
    if g.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let base = spec.cf.resolve(steps_per_epoch);
    let mut pts = Vec::new();
    if g.baseline {
        pts.push(SweepPoint {
            param: "baseline",
            value: 0.0,
            cf: None,
        });
    }
    let mut add = |param: &'static str, value: f64, cf: CFConfig| -> Result<()> {
        cf.validate()
            .map_err(|e| Error::Config(format!("sweep.{param} = {value}: {e}")))?;
        pts.push(SweepPoint {
            param,
            value,
            cf: Some(cf),
        });
        Ok(())
    };
    for &v in &g.p {
        add("p", v, CFConfig { p: v, ..base })?;
    }
    for &v in &g.weight {
        add("weight", v, CFConfig { weight: v, ..base })?;
    }
    for &v in &g.history_len {
        add("history_len", v as f64, CFConfig { history_len: v, ..base })?;
    }
    for &v in &g.desc_channel {
        add("desc_channel", v as f64, CFConfig { desc_channel: v, ..base })?;
    }
    for &v in &g.warm_up {
        add("warm_up", v as f64, CFConfig { warm_up: v, ..base })?;
    }
    Ok(pts)
}

pub const SWEEP_HEADER: &str =
    "param,value,p,weight,history_len,desc_channel,warm_up,seed,top1_acc,validate_loss,avg_val_loss_last10";

/// Long-form sweep table, one row per (grid point, seed). Identical
/// configurations are trained once and shared between rows.
pub fn run_sweep(spec: &RunSpec, out: &Path) -> Result<Report> {
    let (train, val) = load_data(spec)?;
    let train = corrupt(&train, spec, spec.data.randomize_labels)?;
    let base_cfg = spec.train_config(0, train.len());
    let pts = sweep_points(spec, base_cfg.steps_per_epoch(train.len()))?;

    let mut unique: Vec<(Option<CFConfig>, u64)> = Vec::new();
    for pt in &pts {
        for &seed in &spec.seeds {
            if !unique.contains(&(pt.cf, seed)) {
                unique.push((pt.cf, seed));
            }
        }
    }
    let results: Vec<Vec<MetricsRecord>> = unique
        .par_iter()
        .map(|&(cf, seed)| {
            let mut cfg = spec.train_config(seed, train.len());
            cfg.regularizers.cf = cf;
            train_with(spec, &cfg, &train, &val).map(|(_, r)| r)
        })
        .collect::<Result<_>>()?;

    let mut table = format!("{SWEEP_HEADER}\n");
    for pt in &pts {
        for &seed in &spec.seeds {
            let i = unique.iter().position(|u| *u == (pt.cf, seed)).expect("every row was scheduled");
            let recs = &results[i];
            let (p, w, h, d, wu) = match pt.cf {
                Some(c) => (
                    c.p.to_string(),
                    c.weight.to_string(),
                    c.history_len.to_string(),
                    c.desc_channel.to_string(),
                    c.warm_up.to_string(),
                ),
                None => Default::default(),
            };
            let _ = writeln!(
                table,
                "{},{},{p},{w},{h},{d},{wu},{seed},{:.6},{:.6},{:.6}",
                pt.param,
                pt.value,
                max_of(recs, Field::ValTop1),
                min_of(recs, Field::ValLoss),
                avg_last_k(recs, 10, Field::ValLoss)?
            );
        }
    }
    let mut w = writer(out)?;
    w.put("sweep.csv", &table)?;
    Ok(Report {
        files: w.files,
        summary: format!(
            "sweep: {} grid points x {} seeds, {} distinct runs",
            pts.len(),
            spec.seeds.len(),
            unique.len()
        ),
    })
}

/// Trains the configured method on the first seed and writes eval-mode
/// features of the training and validation sets.
pub fn run_export(spec: &RunSpec, out: &Path) -> Result<Report> {
    let (train, val) = load_data(spec)?;
    let train = corrupt(&train, spec, spec.data.randomize_labels)?;
    let cfg = method_config(spec, None, spec.seeds[0], train.len());
    let (model, _) = train_with(spec, &cfg, &train, &val)?;
    let mut w = writer(out)?;
    w.put("features_train.csv", &features_csv(&model, &train)?)?;
    w.put("features_val.csv", &features_csv(&model, &val)?)?;
    Ok(Report {
        files: w.files,
        summary: format!("exported {} + {} feature rows of width {}", train.len(), val.len(), model.feature_width()),
    })
}

/// `label,f0,..` rows of eval-mode backbone features.
pub fn features_csv(model: &Model, ds: &Dataset) -> Result<String> {
    let feats = extract_features(model, ds)?;
    let width = feats.row_len();
    let mut s = String::from("label");
    for j in 0..width {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (i, label) in ds.labels.iter().enumerate() {
        let _ = write!(s, "{label}");
        for v in feats.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_features(model: &Model, ds: &Dataset, out: &Path) -> Result<()> {
    write_atomic(out, features_csv(model, ds)?.as_bytes())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line chart of `field` against epoch, one polyline per series.
pub fn render_svg(series: &[(String, Vec<MetricsRecord>)], field: Field) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Contract("plot needs at least one series".into()));
    }
    if let Some((name, _)) = series.iter().find(|(_, r)| r.is_empty()) {
        return Err(Error::Contract(format!("series {name:?} has no records")));
    }
    let all = series.iter().flat_map(|(_, r)| r.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in all {
        let (x, y) = (r.epoch as f64, r.get(field));
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }

    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 190.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            left - 6.0,
            sy(yv) + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#,
            sx(xv),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        field.name()
    );
    for (i, (name, recs)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = recs
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.epoch as f64), sy(r.get(field))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Plots `field` from metric CSVs, labelled by file stem. Nothing is
/// written if any input is unreadable or empty.
pub fn emit_plot(csvs: &[PathBuf], field: &str, out: &Path) -> Result<()> {
    let field: Field = field.parse()?;
    let mut series = Vec::new();
    for path in csvs {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let recs = parse_csv(&text, path)?;
        if recs.is_empty() {
            return Err(Error::Parse {
                path: path.clone(),
                message: "no metric rows".into(),
            });
        }
        let stem = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        series.push((stem, recs));
    }
    let svg = render_svg(&series, field)?;
    write_atomic(out, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, v: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            train_loss: v,
            train_top1: 0.5,
            val_loss: v,
            val_top1: 0.5,
            val_top5: 1.0,
            disc_loss: 0.0,
            cf_penalty: 0.0,
        }
    }

    #[test]
    fn duplicate_runs_have_zero_std() {
        let run: Vec<_> = (0..12).map(|e| rec(e, 1.0 / (e + 1) as f64)).collect();
        let s = summarize("x", &[run.clone(), run.clone(), run]).unwrap();
        assert_eq!(s.runs, 3);
        assert!(s.stats.iter().all(|&(_, sd)| sd == 0.0));
        assert!((s.stats[0].0 - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let a: Vec<_> = (0..5).map(|e| rec(e, e as f64)).collect();
        let b: Vec<_> = (0..5).map(|e| rec(e, 2.0 * e as f64)).collect();
        let svg = render_svg(&[("a".into(), a.clone()), ("b".into(), b.clone())], Field::ValLoss).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">val_loss<"));
        assert_eq!(svg, render_svg(&[("a".into(), a), ("b".into(), b)], Field::ValLoss).unwrap());
        assert!(render_svg(&[("e".into(), vec![])], Field::ValLoss).is_err());
    }

    #[test]
    fn emit_plot_rejects_bad_input_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        let empty = dir.path().join("empty.csv");
        std::fs::write(&good, to_csv(&[rec(0, 1.0), rec(1, 0.5)])).unwrap();
        std::fs::write(&empty, to_csv(&[])).unwrap();
        let out = dir.path().join("plot.svg");
        assert!(emit_plot(&[good.clone(), empty], "val_loss", &out).is_err());
        assert!(!out.exists());
        assert!(emit_plot(std::slice::from_ref(&good), "accuracy", &out).is_err());
        assert!(!out.exists());
        emit_plot(&[good], "val_loss", &out).unwrap();
        assert!(std::fs::read_to_string(&out).unwrap().contains(">good<"));
    }

    #[test]
    fn sweep_grid_varies_one_knob_at_a_time() {
        let spec = RunSpec::parse("run.kind = sweep\ncf.enabled = true\nsweep.p = 0.2,0.5,0.8\nsweep.baseline = true").unwrap();
        let pts = sweep_points(&spec, 16).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts[0].cf.is_none());
        let ps: Vec<f64> = pts[1..].iter().map(|p| p.cf.unwrap().p).collect();
        assert_eq!(ps, [0.2, 0.5, 0.8]);
        assert!(pts[1..].iter().all(|p| p.cf.unwrap().weight == 0.1));
        let empty = RunSpec::default();
        assert!(sweep_points(&empty, 16).is_err());
    }

    #[test]
    fn mlp_on_images_flattens_first() {
        let spec = RunSpec::default();
        let arch = arch_config(&spec, &[1, 4, 4], 3, 8, 0.0, 0).unwrap();
        assert!(Model::build(arch).is_ok());
        let cnn = RunSpec::parse("arch.backbone = cnn 4,8 16\narch.task_head = 12").unwrap();
        let arch = arch_config(&cnn, &[1, 8, 8], 3, 8, 0.5, 0).unwrap();
        let m = Model::build(arch).unwrap();
        assert_eq!(m.feature_width(), 16);
        assert!(arch_config(&cnn, &[16], 3, 8, 0.0, 0).is_err());
    }
}
