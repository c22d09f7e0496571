//! Command-line front end. Every subcommand loads its inputs, calls the
//! library once per stage and writes the results in the documented formats.
//! Errors are printed as `error[<category>]: <message>` on stderr; usage
//! errors exit with 2 and all other failures with 1. The worker-thread count
//! comes from `RAYON_NUM_THREADS`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use agentseg::analytics::{self, GridSpec};
use agentseg::em::{EStepVariant, EmConfig};
use agentseg::hmm::{self, BaumWelchConfig, SegmentConfig};
use agentseg::io::{self, ModelFile, ReportRow};
use agentseg::metrics::{self, AgentHmmMethod, ErrorCriterion, FixedSegmentation, RdpMethod};
use agentseg::rdp;
use agentseg::synth::{self, Rejection, SampleSpec, SwitchingSpec};
use agentseg::{Error, Result, Segmentation};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agentseg", version, about = "Pedestrian agent models and trajectory segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the agent mixture and the label HMM; writes a model file.
    Fit(FitArgs),
    /// Segment trajectories with a fitted model.
    Segment(SegmentArgs),
    /// Score segmentations against ground truth, optionally with cross-validation.
    Evaluate(EvaluateArgs),
    /// Shape-based segmentation with RDP.
    Rdp(RdpArgs),
    /// Transition tables, transition graph, occurrence and density grids.
    Analyze(AnalyzeArgs),
    /// Sample trajectories from agents.
    Synth(SynthArgs),
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Clone)]
struct EmArgs {
    #[arg(long, value_parser = positive)]
    agents: usize,
    #[arg(long, default_value = "imda")]
    variant: EStepVariant,
    /// Largest padding length enumerated at either end.
    #[arg(long, default_value_t = 20)]
    tmax: usize,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EmArgs {
    fn config(&self) -> EmConfig {
        EmConfig::new(self.agents)
            .with_variant(self.variant)
            .with_t_cap(self.tmax)
            .with_max_iters(self.max_iters)
            .with_seed(self.seed)
    }
}

#[derive(Args, Clone)]
struct WindowArgs {
    /// Points per HMM window.
    #[arg(long, default_value_t = 3, value_parser = positive)]
    window: usize,
    /// Windows advance by one point instead of a full window.
    #[arg(long)]
    overlap: bool,
}

impl WindowArgs {
    fn config(&self) -> SegmentConfig {
        SegmentConfig {
            window_len: self.window,
            overlap: self.overlap,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Trajectory CSV.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    em: EmArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, default_value_t = 100)]
    bw_iters: usize,
    /// Model JSON to write.
    #[arg(long)]
    output: PathBuf,
    /// Log-likelihood trace CSV to write.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
    /// Segmentation CSV to write.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trajectory CSV.
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Segmentation CSV to score; required unless --method trains one.
    #[arg(long)]
    segmentation: Option<PathBuf>,
    /// `given` scores --segmentation; `rdp` or an E-step variant trains per fold.
    #[arg(long, default_value = "given")]
    method: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Label for the setting column of the report.
    #[arg(long)]
    setting: Option<String>,
    /// Agent count when --method is an E-step variant.
    #[arg(long, default_value_t = 10, value_parser = positive)]
    agents: usize,
    #[arg(long, default_value_t = 20)]
    tmax: usize,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, default_value = "step")]
    criterion: ErrorCriterion,
    /// Text report; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Full fold-level report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RdpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, conflicts_with = "select_grid")]
    epsilon: Option<f64>,
    /// Choose epsilon on the grid by minimum error against --truth.
    #[arg(long, requires = "truth")]
    select_grid: bool,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "step")]
    criterion: ErrorCriterion,
    #[arg(long, default_value_t = 10.0)]
    grid_min: f64,
    #[arg(long, default_value_t = 300.0)]
    grid_max: f64,
    #[arg(long, default_value_t = 30)]
    grid_count: usize,
    #[arg(long)]
    output: PathBuf,
    /// Per-epsilon scores CSV when selecting on the grid.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Model JSON whose HMM supplies the transition matrix.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Transition matrix CSV; overrides the model's HMM.
    #[arg(long)]
    transitions: Option<PathBuf>,
    /// Segmentation CSV, enables occurrence and density grids.
    #[arg(long, requires = "input")]
    segmentation: Option<PathBuf>,
    /// Trajectory CSV matching --segmentation.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value_t = 10)]
    rows: usize,
    #[arg(long, default_value_t = 10)]
    cols: usize,
    #[arg(long, default_value_t = 1920.0)]
    width: f64,
    #[arg(long, default_value_t = 1080.0)]
    height: f64,
    /// KDE bandwidth in pixels; Scott's rule when absent.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Model JSON or bare mixture JSON with the agents to sample.
    #[arg(long)]
    agents_file: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Each trajectory switches between agents; writes ground truth.
    #[arg(long)]
    switching: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    min_len: usize,
    #[arg(long, default_value_t = 60)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    max_switches: usize,
    #[arg(long, default_value_t = 10)]
    min_gap: usize,
    /// Redraw until the end state lies within this many sigmas of the goal.
    #[arg(long)]
    reject_sigma: Option<f64>,
    #[arg(long, default_value = "t")]
    prefix: String,
    #[arg(long)]
    output: PathBuf,
    /// Ground-truth CSV (switching mode).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// True labels as a segmentation CSV (switching mode).
    #[arg(long)]
    labels: Option<PathBuf>,
}

fn fit(a: FitArgs) -> Result<()> {
    let trajs = io::load_trajectories(&a.input)?;
    let em_cfg = a.em.config();
    let seg_cfg = a.window.config();
    let bw_cfg = BaumWelchConfig {
        max_iters: a.bw_iters,
        ..BaumWelchConfig::default()
    };
    let (fit, bw) = metrics::train_pipeline(&trajs, &em_cfg, &bw_cfg, &seg_cfg)?;
    let mut file = ModelFile::new(em_cfg, fit.model);
    file.hmm = Some(bw.hmm);
    file.segment = Some(seg_cfg);
    io::save_model(&a.output, &file)?;
    if let Some(path) = &a.trace {
        io::write_trace(io::create(path)?, a.em.variant, &fit.trace)?;
    }
    eprintln!(
        "fitted {} agents in {} iterations (converged: {}), final log-likelihood {}",
        file.mixture.num_agents(),
        fit.iterations,
        fit.converged,
        fit.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let file = io::load_model(&a.model)?;
    let hmm_model = file
        .hmm
        .as_ref()
        .ok_or_else(|| Error::InvalidModel("model file has no HMM".into()))?;
    let trajs = io::load_trajectories(&a.input)?;
    let segs = hmm::segment_corpus(&trajs, &file.mixture, hmm_model, &file.em_config, &a.window.config())?;
    io::save_segmentations(&a.output, &segs)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let trajs = io::load_trajectories(&a.input)?;
    let truths = io::load_ground_truth(&a.truth, &trajs)?;
    let (report, default_setting) = match a.method.as_str() {
        "given" => {
            let path = a.segmentation.as_ref().ok_or_else(|| {
                Error::InvalidConfig("--segmentation is required with --method given".into())
            })?;
            let segs = io::load_segmentations(path)?;
            let method = FixedSegmentation::new("given", &segs, None);
            (metrics::cross_validate(&method, &trajs, &truths, a.folds, a.seed)?, "-".to_string())
        }
        "rdp" => {
            let method = RdpMethod {
                grid: rdp::default_grid(),
                criterion: a.criterion,
            };
            let cv = metrics::cross_validate(&method, &trajs, &truths, a.folds, a.seed)?;
            let eps = cv.parameter.as_ref().map_or("-".into(), |p| format!("eps={:.1}", p.mean));
            (cv, eps)
        }
        other => {
            let variant: EStepVariant = other.parse()?;
            let method = AgentHmmMethod {
                em: EmConfig::new(a.agents)
                    .with_variant(variant)
                    .with_t_cap(a.tmax)
                    .with_max_iters(a.max_iters)
                    .with_seed(a.seed),
                baum_welch: BaumWelchConfig::default(),
                segment: a.window.config(),
            };
            (metrics::cross_validate(&method, &trajs, &truths, a.folds, a.seed)?, format!("M={}", a.agents))
        }
    };
    for f in report.folds.iter().filter(|f| f.failure.is_some()) {
        eprintln!("fold {} failed: {}", f.fold, f.failure.as_deref().unwrap_or(""));
    }
    let row = ReportRow::from_cv(&report, a.setting.unwrap_or(default_setting));
    let text = io::render_report(&[row]);
    match &a.output {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    if let Some(path) = &a.json {
        io::write_json(io::create(path)?, &report)?;
    }
    Ok(())
}

fn rdp_cmd(a: RdpArgs) -> Result<()> {
    let trajs = io::load_trajectories(&a.input)?;
    let epsilon = if a.select_grid {
        let truth = a.truth.as_ref().expect("clap enforces --truth");
        let truths = io::load_ground_truth(truth, &trajs)?;
        let grid = rdp::log_grid(a.grid_min, a.grid_max, a.grid_count)?;
        let (best, scores) = rdp::select_epsilon(&trajs, &truths, &grid, a.criterion)?;
        if let Some(path) = &a.scores {
            io::write_epsilon_scores(io::create(path)?, &scores)?;
        }
        eprintln!("selected epsilon {best}");
        best
    } else {
        a.epsilon
            .ok_or_else(|| Error::InvalidConfig("pass --epsilon or --select-grid".into()))?
    };
    let params = rdp::RdpParams::new(epsilon)?;
    let segs: Vec<Segmentation> = trajs
        .iter()
        .map(|t| Segmentation::from_split_mask(t.id(), rdp::rdp_simplify(t, &params)))
        .collect();
    io::save_segmentations(&a.output, &segs)
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let out = |name: &str| -> PathBuf { a.out_dir.join(name) };
    let model = a.model.as_deref().map(io::load_model).transpose()?;
    let transitions = match (&a.transitions, &model) {
        (Some(path), _) => Some(io::read_matrix(io::open(path)?)?),
        (None, Some(m)) => m.hmm.as_ref().map(|h| h.transition.clone()),
        (None, None) => None,
    };
    if let Some(t) = &transitions {
        io::write_matrix(io::create(&out("transitions.csv"))?, t)?;
        let norm = analytics::normalize_transitions(t)?;
        io::write_matrix(io::create(&out("transitions_normalized.csv"))?, &norm.matrix)?;
        for r in &norm.empty_rows {
            eprintln!("agent {r} has no transitions to other agents");
        }
        let edges = analytics::transition_graph(&norm.matrix, a.threshold)?;
        io::write_edges(io::create(&out("graph.csv"))?, &edges)?;
    }
    if let (Some(seg_path), Some(input)) = (&a.segmentation, &a.input) {
        let spec = GridSpec {
            rows: a.rows,
            cols: a.cols,
            width: a.width,
            height: a.height,
        };
        let trajs = io::load_trajectories(input)?;
        let segs = io::load_segmentations(seg_path)?;
        let grid = analytics::occurrence_map(&segs, &trajs, &spec)?;
        io::write_matrix(io::create(&out("occurrence.csv"))?, &grid.counts)?;
        let counts: Vec<Vec<f64>> = grid
            .counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64).collect())
            .collect();
        analytics::save_png(&counts, &out("occurrence.png"))?;
        let num_agents = match &model {
            Some(m) => m.mixture.num_agents(),
            None => segs.iter().flat_map(|s| s.labels.iter()).max().map_or(0, |m| m + 1),
        };
        for agent in 0..num_agents {
            let points = analytics::agent_points(&segs, &trajs, agent)?;
            if points.is_empty() {
                eprintln!("agent {agent} has no labelled points; density skipped");
                continue;
            }
            let d = analytics::density_map(&points, &spec, a.bandwidth)?;
            io::write_matrix(io::create(&out(&format!("density_{agent}.csv")))?, &d.values)?;
            analytics::save_png(&d.values, &out(&format!("density_{agent}.png")))?;
        }
    }
    if transitions.is_none() && a.segmentation.is_none() {
        return Err(Error::InvalidConfig(
            "nothing to analyze: pass --model, --transitions or --segmentation".into(),
        ));
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mixture = io::load_mixture(&a.agents_file)?;
    if a.switching {
        let spec = SwitchingSpec {
            min_len: a.min_len,
            max_len: a.max_len,
            max_switches: a.max_switches,
            min_gap: a.min_gap,
        };
        let samples = synth::sample_switching_corpus(&mixture, a.count, &spec, &a.prefix, a.seed)?;
        let trajs: Vec<_> = samples.iter().map(|s| s.trajectory.clone()).collect();
        io::save_trajectories(&a.output, &trajs)?;
        if let Some(path) = &a.truth {
            let masks: Vec<Vec<bool>> = samples.iter().map(|s| s.ground_truth.clone()).collect();
            io::write_ground_truth(io::create(path)?, &trajs, &masks)?;
        }
        if let Some(path) = &a.labels {
            let segs: Vec<Segmentation> = samples
                .iter()
                .map(|s| Segmentation::from_labels(s.trajectory.id(), s.labels.clone()))
                .collect();
            io::save_segmentations(path, &segs)?;
        }
    } else {
        if a.truth.is_some() || a.labels.is_some() {
            return Err(Error::InvalidConfig("--truth and --labels need --switching".into()));
        }
        let spec = SampleSpec {
            min_len: a.min_len,
            max_len: a.max_len,
            rejection: a.reject_sigma.map(|k| Rejection {
                k_sigma: k,
                ..Rejection::default()
            }),
        };
        let samples = synth::sample_corpus(&mixture, a.count, &spec, &a.prefix, a.seed)?;
        let rejected = samples.iter().filter(|s| !s.accepted).count();
        if rejected > 0 {
            eprintln!("{rejected} trajectories exhausted their rejection attempts");
        }
        let trajs: Vec<_> = samples.into_iter().map(|s| s.trajectory).collect();
        io::save_trajectories(&a.output, &trajs)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Segment(a) => segment(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Rdp(a) => rdp_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[usage]: {}", e.to_string().trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
