//! Experiment driver for the dual pose-graph localization backend.
//!
//! Subcommands: `simulate` writes seeded sensor streams, `run` replays
//! streams through the localization pipeline, `ablate` sweeps dual/single
//! variants over seeds, `plot-data` exports XY series for plotting, and
//! `dump-graph` prints the final factor graph in the text format.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gateloc_core::dual::DualGraphConfig;
use gateloc_core::eval::{config_hash, infer_lap_stamps, percentile_nearest_rank};
use gateloc_core::geometry::{Pose, Vec3};
use gateloc_core::io;
use gateloc_core::pipeline::{replay_localization, summarize_run, ReplayOutput};
use gateloc_core::sim::{simulate, thin_detections_by_distance, DetectionFrame};
use rayon::prelude::*;

use config::{parse_seeds, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "gateloc",
    version,
    about = "Dual pose-graph localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys, e.g. `-s dual.d_main=1.0`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `track.shape`.
    #[arg(long)]
    track: Option<String>,
    /// Shorthand for `dual.d_main`.
    #[arg(long)]
    d_main: Option<f64>,
    /// Shorthand for `dual.d_temp`.
    #[arg(long)]
    d_temp: Option<f64>,
    /// Shorthand for `dual.single_graph = true`.
    #[arg(long)]
    single_graph: bool,
    /// Shorthand for `seeds`.
    #[arg(long)]
    seeds: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(track) = &self.track {
            config.set("track.shape", track)?;
        }
        if let Some(v) = self.d_main {
            config.set("dual.d_main", &v.to_string())?;
        }
        if let Some(v) = self.d_temp {
            config.set("dual.d_temp", &v.to_string())?;
        }
        if self.single_graph {
            config.set("dual.single_graph", "true")?;
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = parse_seeds(seeds)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("expected KEY=VALUE, got {kv:?}")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded sensor streams for one or more seeds.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; one `seed-<n>` subdirectory per seed.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Replay odometry and detection streams through the localization
    /// pipeline.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        odometry: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gates: PathBuf,
        /// Optional ground truth (TUM) for ATE.
        #[arg(long)]
        groundtruth: Option<PathBuf>,
        /// Thin detection frames to this minimum travel spacing, m.
        #[arg(long)]
        det_thin: Option<f64>,
        #[arg(long, default_value = "run-out")]
        out: PathBuf,
    },
    /// Sweep dual/single variants over seeds and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variants: `dual:<d_main>:<d_temp>` or
        /// `single:<d_main>`.
        #[arg(long)]
        grid: String,
        /// Thin detection frames to this minimum travel spacing, m.
        #[arg(long)]
        det_thin: Option<f64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Export XY series and gate rectangles from a run directory as CSV.
    PlotData {
        /// Directory holding corrected.tum / raw.tum and optionally
        /// groundtruth.tum / gates.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay streams and print the final main graph in the text format.
    DumpGraph {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        odometry: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gates: PathBuf,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Input(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config.build()?, &out),
        Command::Run {
            config,
            odometry,
            detections,
            gates,
            groundtruth,
            det_thin,
            out,
        } => cmd_run(
            &config.build()?,
            &odometry,
            &detections,
            &gates,
            groundtruth.as_deref(),
            det_thin,
            &out,
        ),
        Command::Ablate {
            config,
            grid,
            det_thin,
            jobs,
            out,
        } => cmd_ablate(&config.build()?, &grid, det_thin, jobs, &out),
        Command::PlotData { run, out } => cmd_plot_data(&run, &out),
        Command::DumpGraph {
            config,
            odometry,
            detections,
            gates,
            out,
        } => cmd_dump_graph(
            &config.build()?,
            &odometry,
            &detections,
            &gates,
            out.as_deref(),
        ),
    }
}

fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    for &seed in &config.seeds {
        let run = simulate(&config.track, &config.noise, seed);
        let files = io::sim_run_to_files(&run);
        let dir = out.join(format!("seed-{seed}"));
        write_file(&dir.join("odometry.jsonl"), &files.odometry_jsonl)?;
        write_file(&dir.join("detections.jsonl"), &files.detections_jsonl)?;
        write_file(&dir.join("gates.json"), &files.gates_json)?;
        write_file(&dir.join("groundtruth.tum"), &files.ground_truth_tum)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

struct LoadedStreams {
    odometry: Vec<(f64, Pose)>,
    detections: Vec<DetectionFrame>,
    gates: Vec<gateloc_core::sim::Gate>,
}

fn load_streams(
    odometry: &Path,
    detections: &Path,
    gates: &Path,
) -> Result<LoadedStreams, CliError> {
    let odometry = io::read_odometry_jsonl(&read_file(odometry)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", odometry.display())))?;
    let detections = io::read_detections_jsonl(&read_file(detections)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", detections.display())))?;
    let gates = io::read_gates_json(&read_file(gates)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", gates.display())))?;
    for w in odometry.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(CliError::Input(format!(
                "odometry stamps not strictly increasing at t={}",
                w[1].0
            )));
        }
    }
    Ok(LoadedStreams {
        odometry,
        detections,
        gates,
    })
}

fn replay(
    streams: &LoadedStreams,
    dual: DualGraphConfig,
    det_thin: Option<f64>,
) -> Result<(ReplayOutput, Vec<DetectionFrame>), CliError> {
    let detections = match det_thin {
        Some(d) => thin_detections_by_distance(&streams.detections, &streams.odometry, d),
        None => streams.detections.clone(),
    };
    let map = io::gates_to_landmark_map(&streams.gates);
    let out = replay_localization(&streams.odometry, &detections, &map, dual)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((out, detections))
}

fn cmd_run(
    config: &ExperimentConfig,
    odometry: &Path,
    detections: &Path,
    gates: &Path,
    groundtruth: Option<&Path>,
    det_thin: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let streams = load_streams(odometry, detections, gates)?;
    let gt = match groundtruth {
        Some(p) => Some(
            io::read_tum(&read_file(p)?)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let (output, _) = replay(&streams, config.dual.clone(), det_thin)?;

    // lap boundaries from ground truth when present, else from the
    // corrected trajectory
    let lap_stamps = match &gt {
        Some(gt) => infer_lap_stamps(gt),
        None => infer_lap_stamps(&output.corrected),
    };
    let gate_positions: Vec<Vec3> = streams.gates.iter().map(|g| g.pose.translation).collect();
    let half_sample = 0.5 / config.track.sample_rate.max(1.0);
    let metrics = summarize_run(
        &output,
        gt.as_deref(),
        &gate_positions,
        Some(&lap_stamps),
        config.noise.det_range,
        half_sample,
        config_hash(&config.canonical()),
        config.seeds.first().copied().unwrap_or(0),
    );

    write_file(
        &out.join("corrected.tum"),
        &io::write_tum(&output.corrected),
    )?;
    write_file(&out.join("raw.tum"), &io::write_tum(&output.raw))?;
    let mut diag = String::new();
    for d in &output.diagnostics {
        diag.push_str(&serde_json::to_string(d).expect("diagnostics serialize"));
        diag.push('\n');
    }
    write_file(&out.join("diagnostics.jsonl"), &diag)?;
    write_file(
        &out.join("metrics.json"),
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&metrics).expect("metrics serialize")
        ),
    )?;
    write_file(
        &out.join("main_graph.txt"),
        &io::dump_graph(&output.main_graph),
    )?;
    println!(
        "keyframes {} | edges {} | accepted {}{}",
        output.keyframes,
        output.main_graph.num_edges(),
        output.accepted_detections,
        match (metrics.ate_trans, metrics.raw_ate_trans) {
            (Some(c), Some(r)) => format!(" | ATE corrected {c:.3} m raw {r:.3} m"),
            _ => String::new(),
        }
    );
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Variant {
    single: bool,
    d_main: f64,
    d_temp: Option<f64>,
}

impl Variant {
    fn label(&self) -> String {
        if self.single {
            format!("single:{}", self.d_main)
        } else {
            format!("dual:{}:{}", self.d_main, self.d_temp.unwrap_or(0.0))
        }
    }
}

fn parse_grid(grid: &str) -> Result<Vec<Variant>, CliError> {
    let mut variants = Vec::new();
    for item in grid.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let fields: Vec<&str> = item.split(':').collect();
        let parse = |s: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|e| CliError::Config(format!("bad threshold {s:?}: {e}")))
        };
        match fields.as_slice() {
            ["dual", dm, dt] => variants.push(Variant {
                single: false,
                d_main: parse(dm)?,
                d_temp: Some(parse(dt)?),
            }),
            ["single", dm] => variants.push(Variant {
                single: true,
                d_main: parse(dm)?,
                d_temp: None,
            }),
            _ => {
                return Err(CliError::Config(format!(
                    "bad grid item {item:?}; expected dual:<d_main>:<d_temp> or single:<d_main>"
                )))
            }
        }
    }
    if variants.is_empty() {
        return Err(CliError::Config("ablation grid is empty".into()));
    }
    Ok(variants)
}

struct AblationRow {
    variant: Variant,
    seed: u64,
    ate: f64,
    raw_ate: f64,
    nodes: usize,
    edges: usize,
    opt_p95_ms: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_ablate(
    config: &ExperimentConfig,
    grid: &str,
    det_thin: Option<f64>,
    jobs: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let variants = parse_grid(grid)?;
    if let Some(j) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .ok();
    }
    let tasks: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|v| config.seeds.iter().map(move |s| (*v, *s)))
        .collect();

    let results: Vec<Result<AblationRow, (Variant, u64, String)>> = tasks
        .par_iter()
        .map(|&(variant, seed)| {
            let run = simulate(&config.track, &config.noise, seed);
            let detections = match det_thin {
                Some(d) => thin_detections_by_distance(&run.detections, &run.odometry, d),
                None => run.detections.clone(),
            };
            let mut dual = config.dual.clone();
            dual.single_graph_mode = variant.single;
            dual.d_main = variant.d_main;
            if let Some(dt) = variant.d_temp {
                dual.d_temp = dt;
            } else {
                dual.d_temp = variant.d_main.min(dual.d_temp);
            }
            let map = io::gates_to_landmark_map(&run.gates);
            let output = replay_localization(&run.odometry, &detections, &map, dual)
                .map_err(|e| (variant, seed, e.to_string()))?;
            let ate = gateloc_core::eval::ate(&output.corrected, &run.ground_truth, 0.02)
                .map_err(|e| (variant, seed, e.to_string()))?;
            let raw_ate = gateloc_core::eval::ate(&output.raw, &run.ground_truth, 0.02)
                .map_err(|e| (variant, seed, e.to_string()))?;
            // total optimizer work per keyframe: main-graph solve plus the
            // temporary-graph compression for dual variants
            let times: Vec<f64> = output
                .diagnostics
                .iter()
                .map(|d| d.opt_wall_ms + d.compress_wall_ms)
                .collect();
            Ok(AblationRow {
                variant,
                seed,
                ate: ate.trans_rmse,
                raw_ate: raw_ate.trans_rmse,
                nodes: output.main_graph.num_nodes(),
                edges: output.main_graph.num_edges(),
                opt_p95_ms: percentile_nearest_rank(&times, 95.0),
            })
        })
        .collect();

    let mut detail =
        String::from("graph,d_main,d_temp,seed,ate_m,raw_ate_m,nodes,edges,opt_p95_ms\n");
    let mut rows: Vec<&AblationRow> = Vec::new();
    let mut failures = Vec::new();
    for r in &results {
        match r {
            Ok(row) => rows.push(row),
            Err((v, s, msg)) => failures.push(format!("{} seed {s}: {msg}", v.label())),
        }
    }
    // deterministic output order regardless of worker scheduling
    rows.sort_by(|a, b| {
        (a.variant.single, a.variant.d_main, a.variant.d_temp, a.seed)
            .partial_cmp(&(b.variant.single, b.variant.d_main, b.variant.d_temp, b.seed))
            .unwrap()
    });
    for r in &rows {
        detail.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            if r.variant.single { "single" } else { "dual" },
            r.variant.d_main,
            r.variant
                .d_temp
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".into()),
            r.seed,
            r.ate,
            r.raw_ate,
            r.nodes,
            r.edges,
            r.opt_p95_ms
        ));
    }

    let mut summary = String::from("graph,d_main,d_temp,ate_m,nodes,edges,opt_p95_ms\n");
    for v in &variants {
        let of_variant: Vec<&&AblationRow> = rows
            .iter()
            .filter(|r| {
                r.variant.single == v.single
                    && r.variant.d_main == v.d_main
                    && r.variant.d_temp == v.d_temp
            })
            .collect();
        if of_variant.is_empty() {
            continue;
        }
        let mut ates: Vec<f64> = of_variant.iter().map(|r| r.ate).collect();
        let mut nodes: Vec<f64> = of_variant.iter().map(|r| r.nodes as f64).collect();
        let mut edges: Vec<f64> = of_variant.iter().map(|r| r.edges as f64).collect();
        let mut p95: Vec<f64> = of_variant.iter().map(|r| r.opt_p95_ms).collect();
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            if v.single { "single" } else { "dual" },
            v.d_main,
            v.d_temp
                .map(|x| x.to_string())
                .unwrap_or_else(|| "-".into()),
            median(&mut ates),
            median(&mut nodes).round() as i64,
            median(&mut edges).round() as i64,
            median(&mut p95)
        ));
    }

    write_file(&out.join("ablation.csv"), &summary)?;
    write_file(&out.join("ablation_detail.csv"), &detail)?;
    println!("{summary}");
    if !failures.is_empty() {
        eprintln!("{} run(s) failed:", failures.len());
        for f in &failures {
            eprintln!("  {f}");
        }
        return Err(CliError::Runtime("some ablation runs failed".into()));
    }
    Ok(())
}

/// Half-width of the gate rectangle emitted for plots, m.
const GATE_HALF_WIDTH: f64 = 0.75;

fn xy_csv(traj: &[(f64, Pose)]) -> String {
    let mut s = String::from("t,x,y\n");
    for (t, p) in traj {
        s.push_str(&format!("{},{},{}\n", t, p.translation.x, p.translation.y));
    }
    s
}

fn cmd_plot_data(run: &Path, out: &Path) -> Result<(), CliError> {
    let corrected_path = run.join("corrected.tum");
    let raw_path = run.join("raw.tum");
    if !corrected_path.exists() || !raw_path.exists() {
        return Err(CliError::Input(format!(
            "{} does not look like a run directory (corrected.tum / raw.tum missing)",
            run.display()
        )));
    }
    let corrected =
        io::read_tum(&read_file(&corrected_path)?).map_err(|e| CliError::Input(e.to_string()))?;
    let raw = io::read_tum(&read_file(&raw_path)?).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&out.join("xy_corrected.csv"), &xy_csv(&corrected))?;
    write_file(&out.join("xy_raw.csv"), &xy_csv(&raw))?;

    let gt_path = run.join("groundtruth.tum");
    if gt_path.exists() {
        let gt = io::read_tum(&read_file(&gt_path)?).map_err(|e| CliError::Input(e.to_string()))?;
        write_file(&out.join("xy_gt.csv"), &xy_csv(&gt))?;
    }

    let gates_path = run.join("gates.json");
    if gates_path.exists() {
        let gates = io::read_gates_json(&read_file(&gates_path)?)
            .map_err(|e| CliError::Input(e.to_string()))?;
        let mut s = String::from("id,x,y,yaw,x1,y1,x2,y2\n");
        for g in &gates {
            let yaw = gateloc_core::assoc::yaw_of(&g.pose.rotation);
            let side = g.pose.rotation.rotate(&Vec3::y()) * GATE_HALF_WIDTH;
            let c = g.pose.translation;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                g.id,
                c.x,
                c.y,
                yaw,
                c.x - side.x,
                c.y - side.y,
                c.x + side.x,
                c.y + side.y
            ));
        }
        write_file(&out.join("gates.csv"), &s)?;
    }
    Ok(())
}

fn cmd_dump_graph(
    config: &ExperimentConfig,
    odometry: &Path,
    detections: &Path,
    gates: &Path,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let streams = load_streams(odometry, detections, gates)?;
    let (output, _) = replay(&streams, config.dual.clone(), None)?;
    let text = io::dump_graph(&output.main_graph);
    match out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}
