use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use vitseg::diagnostics::{
    hoyer_map, measure_heads, measure_layers, read_ranking, write_ranking, DiscriminabilityReport, HeadAucTable,
    PatchLabels,
};
use vitseg::engine::{forward, TapRequest};
use vitseg::imaging::Image;
use vitseg::segmentation::{slide_segment, ClassMap, ConfusionCounts, EvalMetrics, SlideConfig};
use vitseg::strategies::{ModelProfile, StrategyConfig};
use vitseg::weights::{TextEmbeddings, VitWeights};

use crate::io::{
    choose, load_image, load_labels, read_class_names, read_samples, resize_nearest, save_labels, sha256_file,
    CliError, CliResult, Sample,
};
use crate::{AnalyzeArgs, Cli, Command, EvalArgs, HeadArgs, HoyerArgs, RankExportArgs, SegmentArgs};

#[derive(Serialize)]
struct InputFile {
    path: PathBuf,
    sha256: String,
}

/// Record of one invocation, written next to its outputs.
#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    version: &'static str,
    config: Option<serde_json::Value>,
    inputs: Vec<InputFile>,
    seed: u64,
    threads: usize,
    samples: Vec<Sample>,
    outputs: Vec<PathBuf>,
    wall_time_s: f64,
}

struct Run<'a> {
    cli: &'a Cli,
    started: Instant,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn new(cli: &'a Cli, subcommand: &'static str) -> Self {
        Self {
            cli,
            started: Instant::now(),
            manifest: RunManifest {
                subcommand,
                version: env!("CARGO_PKG_VERSION"),
                config: None,
                inputs: Vec::new(),
                seed: cli.seed,
                threads: rayon::current_num_threads(),
                samples: Vec::new(),
                outputs: Vec::new(),
                wall_time_s: 0.0,
            },
        }
    }

    fn record_input(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(InputFile {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    fn weights(&mut self) -> CliResult<VitWeights> {
        let path = self
            .cli
            .weights
            .clone()
            .ok_or_else(|| CliError::Config("--weights is required".into()))?;
        let w = VitWeights::load(&path)?;
        self.record_input(&path)?;
        Ok(w)
    }

    fn text(&mut self, required: bool, projection_dim: Option<usize>) -> CliResult<Option<TextEmbeddings>> {
        let Some(path) = self.cli.text.clone() else {
            return if required {
                Err(CliError::Config("--text is required".into()))
            } else {
                Ok(None)
            };
        };
        let t = TextEmbeddings::load(&path)?;
        if let Some(d) = projection_dim {
            t.ensure_dim(d)?;
        }
        self.record_input(&path)?;
        Ok(Some(t))
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.cli.out_dir.join(name)
    }

    fn output(&mut self, path: PathBuf) {
        self.manifest.outputs.push(path);
    }

    fn finish(mut self) -> CliResult<()> {
        if let Some(missing) = self.manifest.outputs.iter().find(|p| !p.exists()) {
            return Err(CliError::Data(format!("expected output {} was not written", missing.display())));
        }
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        let path = self.out_path("run_manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Data(e.to_string()))?;
        write_file(&path, &json)
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::io::data_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| crate::io::data_err(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // a second initialisation only happens in-process (tests) and is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| crate::io::data_err(&cli.out_dir, e))?;
    match &cli.command {
        Command::AnalyzeLayers(a) => analyze_layers(cli, a),
        Command::AnalyzeHeads(a) => analyze_heads(cli, a),
        Command::Hoyer(a) => hoyer(cli, a),
        Command::Segment(a) => segment(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::RankExport(a) => rank_export(cli, a),
    }
}

fn labelled_samples(run: &mut Run, args: &AnalyzeArgs) -> CliResult<Vec<Sample>> {
    let all = read_samples(&args.samples)?;
    let chosen = choose(all, args.limit, run.cli.seed);
    if let Some(s) = chosen.iter().find(|s| s.label.is_none()) {
        return Err(CliError::Data(format!("{} has no label map", s.image.display())));
    }
    run.manifest.samples = chosen.clone();
    Ok(chosen)
}

/// Square-resized image and grid-aligned patch labels.
fn prepare(sample: &Sample, size: usize, patch: usize, ignore: u32) -> CliResult<(Image, PatchLabels)> {
    let img = load_image(&sample.image)?.resize(size, size);
    let label_path = sample.label.as_ref().expect("checked by labelled_samples");
    let gt = resize_nearest(&load_labels(label_path)?, size, size);
    Ok((img, PatchLabels::from_pixels(&gt, patch, ignore)?))
}

fn analysis_size(args_size: Option<usize>, w: &VitWeights) -> CliResult<usize> {
    let size = args_size.unwrap_or(w.config.image_size);
    if size == 0 || !size.is_multiple_of(w.config.patch_size) {
        return Err(CliError::Config(format!(
            "--size {size} must be a positive multiple of the patch size {}",
            w.config.patch_size
        )));
    }
    Ok(size)
}

fn analyze_layers(cli: &Cli, args: &AnalyzeArgs) -> CliResult<()> {
    let mut run = Run::new(cli, "analyze-layers");
    let w = run.weights()?;
    let text = run.text(false, Some(w.config.projection_dim))?;
    let size = analysis_size(args.size, &w)?;
    let samples = labelled_samples(&mut run, args)?;
    let sweeps = samples
        .par_iter()
        .map(|s| {
            let (img, labels) = prepare(s, size, w.config.patch_size, args.ignore)?;
            Ok(measure_layers(&img, &labels, &w, text.as_ref())?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = DiscriminabilityReport::from_layer_sweeps(&sweeps);
    let mut csv = String::from("layer,auc,alignment\n");
    for (l, auc, align) in &report.layers {
        writeln!(csv, "{l},{},{}", fmt_opt(*auc), fmt_opt(*align)).unwrap();
    }
    let out = run.out_path("layer_auc.csv");
    write_file(&out, &csv)?;
    run.output(out);
    run.finish()
}

fn analyze_heads(cli: &Cli, args: &HeadArgs) -> CliResult<()> {
    let mut run = Run::new(cli, "analyze-heads");
    let w = run.weights()?;
    let size = analysis_size(args.common.size, &w)?;
    let strategy = StrategyConfig::load_with(cli.config.as_deref(), None)?;
    let criterion = if args.no_atr { None } else { Some(strategy.atr.criterion()) };
    if let Some(c) = criterion {
        c.validate()?;
    }
    run.manifest.config = Some(serde_json::json!({ "atr": criterion.map(|c| format!("{c:?}")) }));
    let samples = labelled_samples(&mut run, &args.common)?;
    let per_image = samples
        .par_iter()
        .map(|s| {
            let (img, labels) = prepare(s, size, w.config.patch_size, args.common.ignore)?;
            Ok(measure_heads(&img, &labels, &w, criterion)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut table = HeadAucTable::default();
    for (s, m) in samples.iter().zip(&per_image) {
        table.add(&s.dataset, m);
    }
    let mut csv = String::from("layer,head,dataset,auc\n");
    for ((id, ds), auc) in table.dataset_means() {
        writeln!(csv, "{},{},{ds},{auc:.6}", id.layer, id.head).unwrap();
    }
    let auc_path = run.out_path("head_auc.csv");
    write_file(&auc_path, &csv)?;
    run.output(auc_path);
    let ranking = table.ranking();
    if ranking.is_empty() {
        return Err(CliError::Data("no sample produced a defined head AUC".into()));
    }
    let rank_path = run.out_path("head_ranking.csv");
    write_ranking(&rank_path, &ranking)?;
    run.output(rank_path);
    run.finish()
}

fn hoyer(cli: &Cli, args: &HoyerArgs) -> CliResult<()> {
    let mut run = Run::new(cli, "hoyer");
    let w = run.weights()?;
    let size = analysis_size(args.size, &w)?;
    let img = load_image(&args.image)?.resize(size, size);
    run.record_input(&args.image)?;
    let l = w.config.layers;
    let out = forward(&img, &w, &StrategyConfig::default(), &TapRequest::all_layers(l))?;
    let mut csv = String::from("layer,row,col,score\n");
    for (layer, seq) in &out.tap.sequences {
        let gw = seq.grid.1;
        for (i, s) in hoyer_map(seq).iter().enumerate() {
            writeln!(csv, "{layer},{},{},{s:.6}", i / gw, i % gw).unwrap();
        }
    }
    let path = run.out_path("hoyer_map.csv");
    write_file(&path, &csv)?;
    run.output(path);
    run.finish()
}

fn strategy_for(cli: &Cli, profile: Option<&str>, variant: Option<&str>) -> CliResult<StrategyConfig> {
    let profile = profile.map(str::parse::<ModelProfile>).transpose()?;
    let mut s = StrategyConfig::load_with(cli.config.as_deref(), profile)?;
    if let Some(v) = variant {
        s.variant = v.parse()?;
    }
    s.resolve_heads()?;
    Ok(s)
}

fn segment(cli: &Cli, args: &SegmentArgs) -> CliResult<()> {
    let mut run = Run::new(cli, "segment");
    let w = run.weights()?;
    let text = run.text(true, Some(w.config.projection_dim))?.expect("required");
    let strategy = strategy_for(cli, args.profile.as_deref(), args.variant.as_deref())?;
    strategy.validate(&w.config)?;
    run.manifest.config = Some(serde_json::to_value(&strategy).map_err(|e| CliError::Data(e.to_string()))?);
    let slide = SlideConfig {
        short_side: args.short_side,
        crop: args.crop,
        stride: args.stride,
    };
    slide.validate(w.config.patch_size)?;

    if let Some(image) = &args.image {
        let img = load_image(image)?;
        run.record_input(image)?;
        let map = slide_segment(&img, &w, &strategy, &text, &slide)?;
        let out = args.out.clone().unwrap_or_else(|| run.out_path(&format!("{}.png", stem(image))));
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| crate::io::data_err(dir, e))?;
        }
        save_labels(&out, &map)?;
        run.output(out);
        return run.finish();
    }

    let list = args.samples.as_ref().expect("clap enforces image or samples");
    let samples = choose(read_samples(list)?, args.limit, cli.seed);
    let mut stems = BTreeMap::new();
    for s in &samples {
        if let Some(prev) = stems.insert(stem(&s.image), &s.image) {
            return Err(CliError::Data(format!(
                "{} and {} would write the same prediction file",
                prev.display(),
                s.image.display()
            )));
        }
    }
    run.manifest.samples = samples.clone();
    let pred_dir = run.out_path("pred");
    std::fs::create_dir_all(&pred_dir).map_err(|e| crate::io::data_err(&pred_dir, e))?;
    let k = text.num_classes();
    let results = samples
        .par_iter()
        .map(|s| {
            let map = slide_segment(&load_image(&s.image)?, &w, &strategy, &text, &slide)?;
            let out = pred_dir.join(format!("{}.png", stem(&s.image)));
            save_labels(&out, &map)?;
            let counts = match &s.label {
                Some(l) => {
                    let mut c = ConfusionCounts::new(k);
                    c.accumulate(&map, &load_labels(l)?, args.ignore)?;
                    Some(c)
                }
                None => None,
            };
            Ok((out, counts))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut total: Option<ConfusionCounts> = None;
    for (out, counts) in results {
        run.output(out);
        if let Some(c) = counts {
            match &mut total {
                Some(t) => t.merge(&c)?,
                None => total = Some(c),
            }
        }
    }
    if let Some(t) = total {
        let path = run.out_path("metrics.csv");
        write_file(&path, &metrics_csv(&t.metrics()?, &text.class_names))?;
        run.output(path);
    }
    run.finish()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn metrics_csv(m: &EvalMetrics, names: &[String]) -> String {
    let mut csv = String::from("class_name,intersection,union,iou\n");
    for (name, c) in names.iter().zip(&m.per_class) {
        writeln!(csv, "{name},{},{},{}", c.intersection, c.union, fmt_opt(c.iou)).unwrap();
    }
    writeln!(csv, "mIoU,,,{:.6}", m.miou).unwrap();
    csv
}

fn eval(cli: &Cli, args: &EvalArgs) -> CliResult<()> {
    let mut run = Run::new(cli, "eval");
    let names = match (&args.classes, &cli.text) {
        (Some(p), _) => read_class_names(p)?,
        (None, Some(_)) => run.text(true, None)?.expect("required").class_names,
        (None, None) => return Err(CliError::Config("eval needs --classes or --text".into())),
    };
    let mut preds: Vec<PathBuf> = std::fs::read_dir(&args.pred_dir)
        .map_err(|e| crate::io::data_err(&args.pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    preds.sort();
    if preds.is_empty() {
        return Err(CliError::Data(format!("{} holds no .png predictions", args.pred_dir.display())));
    }
    let k = names.len();
    let counts = preds
        .par_iter()
        .map(|p| {
            let gt_path = args.gt_dir.join(p.file_name().expect("listed file"));
            let pred: ClassMap = load_labels(p)?;
            let gt = load_labels(&gt_path)?;
            let mut c = ConfusionCounts::new(k);
            c.accumulate(&pred, &gt, args.ignore)?;
            Ok(c)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut total = ConfusionCounts::new(k);
    for c in &counts {
        total.merge(c)?;
    }
    run.manifest.samples = preds
        .iter()
        .map(|p| Sample {
            image: p.clone(),
            label: Some(args.gt_dir.join(p.file_name().expect("listed file"))),
            dataset: "default".into(),
        })
        .collect();
    let out = args.out.clone().unwrap_or_else(|| run.out_path("metrics.csv"));
    write_file(&out, &metrics_csv(&total.metrics()?, &names))?;
    run.output(out);
    run.finish()
}

fn rank_export(cli: &Cli, args: &RankExportArgs) -> CliResult<()> {
    let mut run = Run::new(cli, "rank-export");
    let profile: ModelProfile = args.profile.parse()?;
    let ranking = read_ranking(&args.ranking)?;
    run.record_input(&args.ranking)?;
    if args.top_k == 0 || args.top_k > ranking.len() {
        return Err(CliError::Config(format!(
            "--top-k {} outside 1..={}",
            args.top_k,
            ranking.len()
        )));
    }
    let heads: Vec<String> = ranking[..args.top_k]
        .iter()
        .map(|s| format!("[{}, {}]", s.id.layer, s.id.head))
        .collect();
    let profile_name = serde_json::to_value(profile).expect("enum").as_str().expect("string").to_string();
    let toml = format!(
        "profile = \"{profile_name}\"\n\n[she]\nenabled = true\nheads = [{}]\n",
        heads.join(", ")
    );
    // round-trip through the loader so a malformed export cannot be written
    let parsed = StrategyConfig::from_toml_str(&toml)?;
    run.manifest.config = Some(serde_json::to_value(&parsed).map_err(|e| CliError::Data(e.to_string()))?);
    let out = args.out.clone().unwrap_or_else(|| run.out_path("she_heads.toml"));
    write_file(&out, &toml)?;
    run.output(out);
    run.finish()
}
