use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use oedct::config::{PolicyName, RunConfig};
use oedct::design::{run_basic, ChosenDesign, DesignProblem};
use oedct::gauss::{GaussianBelief, PrecisionTracking};
use oedct::io::{self, Manifest};
use oedct::likelihood::{rebuild_posterior, LikelihoodState};
use oedct::simulation::{run_error_study, run_hyper_study, ErrorRow, PolicySpec};
use oedct::targets::{Criterion, RoiMask};
use oedct::Error;

use crate::{Command, Common};

/// Failure of a command, with its exit status.
pub enum CliError {
    Core(Error),
    Bind(String, std::io::Error),
    Serve(std::io::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::InvalidConfig { .. } | Error::InadmissibleDesign { .. } | Error::Parse(_) | Error::EmptyRoi => 2,
                Error::Io(_) | Error::SessionStopped | Error::NoPendingDesign => 1,
                _ => 3,
            },
            CliError::Bind(..) => 4,
            CliError::Serve(_) => 1,
        }
    }

    /// One-line machine-readable description for standard error.
    pub fn json_line(&self) -> String {
        let v = match self {
            CliError::Core(e) => {
                let field = match e {
                    Error::InvalidConfig { field, .. } => Some(field.clone()),
                    _ => None,
                };
                serde_json::json!({"code": e.code(), "message": e.to_string(), "field": field})
            }
            CliError::Bind(addr, e) => serde_json::json!({"code": "BindFailure", "message": format!("cannot bind {addr}: {e}"), "field": null}),
            CliError::Serve(e) => serde_json::json!({"code": "Io", "message": e.to_string(), "field": null}),
        };
        v.to_string()
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Design { common, maps } => {
            let ctx = Context::load(&common, "design")?;
            design(&ctx, maps)
        }
        Command::Study {
            common,
            replications,
            sequences,
            policies,
        } => {
            let mut ctx = Context::load(&common, "study")?;
            if let Some(r) = replications {
                ctx.config.study.replications = r;
            }
            if let Some(s) = sequences {
                ctx.config.study.random_sequences = s;
            }
            if let Some(p) = policies {
                ctx.config.study.policies = p
                    .iter()
                    .map(|s| parse_policy(s))
                    .collect::<Result<_, _>>()?;
            }
            ctx.write_preamble()?;
            study(&ctx)
        }
        Command::Estimate {
            common,
            simulate,
            data,
            compare,
            replications,
        } => {
            let mut ctx = Context::load(&common, "estimate")?;
            if let Some(r) = replications {
                ctx.config.estimate.replications = r;
            }
            ctx.write_preamble()?;
            match (simulate, data) {
                (true, _) => estimate_simulated(&ctx, compare),
                (false, Some(dir)) => estimate_from_data(&ctx, &dir, compare),
                (false, None) => Err(Error::config("--data", "give --simulate or --data").into()),
            }
        }
        Command::Serve { config, bind, threads } => {
            set_threads(threads)?;
            let default = config.as_deref().map(RunConfig::from_path).transpose()?;
            serve(default, &bind)
        }
    }
}

fn parse_policy(s: &str) -> Result<PolicyName, Error> {
    match s.trim().to_ascii_lowercase().as_str() {
        "a" => Ok(PolicyName::A),
        "d" => Ok(PolicyName::D),
        "random" => Ok(PolicyName::Random),
        other => Err(Error::config("--policies", format!("unknown policy {other:?}; expected A, D or random"))),
    }
}

fn set_threads(threads: Option<usize>) -> CliResult {
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::config("--threads", "must be positive").into());
        }
        // Fails only when a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    Ok(())
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    command: &'static str,
    threads: Option<usize>,
}

impl Context {
    fn load(common: &Common, command: &'static str) -> CliResult<Self> {
        let mut config = RunConfig::from_path(&common.config)?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        if let Some(c) = common.criterion {
            config.criterion = c;
        }
        if let Some(k) = common.rounds {
            config.rounds = k;
        }
        config.inline_regions()?;
        set_threads(common.threads)?;
        let out = common
            .out
            .clone()
            .or_else(|| config.output.as_ref().map(|o| config.base_dir.join(o)))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            config,
            out,
            command,
            threads: common.threads,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Output directory with the effective config, version stamp and
    /// manifest.
    fn write_preamble(&self) -> CliResult {
        fs::create_dir_all(&self.out)?;
        let json = self.config.to_json_pretty();
        fs::write(self.path("config.json"), format!("{json}\n"))?;
        fs::write(self.path("VERSION"), format!("oedct {}\n", io::VERSION))?;
        let mut m = Manifest::new(self.command, &json, self.config.seed);
        m.threads = self.threads;
        m.seeds = vec![("study".into(), self.config.seed)];
        m.save(&self.path("manifest.json"))?;
        Ok(())
    }

    fn create(&self, name: &str) -> CliResult<BufWriter<File>> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(File::create(p)?))
    }
}

fn design(ctx: &Context, maps: bool) -> CliResult {
    let cfg = &ctx.config;
    let problem = cfg.problem()?;
    let prior = cfg.prior_belief()?;
    let roi = cfg.roi_mask(&problem.grid)?;
    ctx.write_preamble()?;
    fs::create_dir_all(ctx.path("landscapes"))?;
    let mut write_err = None;
    let run = run_basic(&problem, &prior, &roi, cfg.criterion, cfg.rounds, |k, outcome| {
        if write_err.is_some() {
            return;
        }
        let res = ctx
            .create(&format!("landscapes/round_{:02}.csv", k + 1))
            .and_then(|w| outcome.landscape.write_csv(w).map_err(CliError::from));
        if let Err(e) = res {
            write_err = Some(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let chosen: Vec<ChosenDesign> = run
        .rounds
        .iter()
        .map(|r| ChosenDesign {
            point: r.point,
            value: r.value,
            m_active: r.m_active,
        })
        .collect();
    io::write_designs_csv(&run.points(), ctx.create("P.csv")?)?;
    io::write_targets_csv(cfg.criterion, &chosen, ctx.create("targets.csv")?)?;
    if maps {
        io::save_pgm(&problem.grid, &run.belief.std_map(), &ctx.path("std.pgm"))?;
    }
    Ok(())
}

fn optimal_points(problem: &DesignProblem, prior: &GaussianBelief, roi: &RoiMask, criterion: Criterion, rounds: usize) -> CliResult<Vec<oedct::geometry::DesignPoint>> {
    Ok(run_basic(problem, prior, roi, criterion, rounds, |_, _| {})?.points())
}

fn study(ctx: &Context) -> CliResult {
    let cfg = &ctx.config;
    let problem = cfg.problem()?;
    let prior = cfg.prior_belief()?;
    let roi = cfg.roi_mask(&problem.grid)?;
    let coarse = match &cfg.study.coarse {
        Some(c) => {
            let p = cfg.problem_at(c.n, c.detectors)?;
            let prior = cfg.prior_belief_at(&p.grid)?;
            let roi = cfg.roi_mask(&p.grid)?;
            Some((p, prior, roi))
        }
        None => None,
    };
    let mut policies = Vec::new();
    for name in &cfg.study.policies {
        let criterion = match name {
            PolicyName::A => Criterion::A,
            PolicyName::D => Criterion::D,
            PolicyName::Random => {
                policies.push(PolicySpec::Random { name: "random".into() });
                continue;
            }
        };
        let points = optimal_points(&problem, &prior, &roi, criterion, cfg.rounds)?;
        policies.push(PolicySpec::Fixed {
            name: criterion.to_string(),
            points,
        });
        if let Some((cp, cprior, croi)) = &coarse {
            let points = optimal_points(cp, cprior, croi, criterion, cfg.rounds)?;
            policies.push(PolicySpec::Fixed {
                name: format!("{criterion}_coarse"),
                points,
            });
        }
    }
    for p in &policies {
        if let PolicySpec::Fixed { name, points } = p {
            io::write_designs_csv(points, ctx.create(&format!("P_{name}.csv"))?)?;
        }
    }
    let rows = run_error_study(&problem, &prior, &cfg.sampler()?, &roi, &policies, &cfg.study_settings())?;
    io::write_error_table(&rows, ctx.create("errors.csv")?)?;
    Ok(())
}

fn estimate_simulated(ctx: &Context, compare: bool) -> CliResult {
    let cfg = &ctx.config;
    let problem = cfg.problem()?;
    let roi = cfg.roi_mask(&problem.grid)?;
    let mut settings = cfg.hyper_study_settings();
    settings.keep_maps = usize::from(compare);
    let study = run_hyper_study(&problem, cfg.prior.gamma, cfg.prior.mean, &roi, cfg.criterion, &settings)?;
    let first = study
        .replications
        .first()
        .ok_or_else(|| Error::config("estimate.replications", "must be at least 1"))?;
    io::write_hyper_trace(&first.trace, ctx.create("hyper_trace.csv")?)?;

    let mut w = vec!["replication,ell_true,k,ell".to_string()];
    for (r, rep) in study.replications.iter().enumerate() {
        for (k, ell) in rep.trace.iter().enumerate() {
            w.push(format!("{r},{},{},{ell}", rep.ell_true, k + 1));
        }
    }
    fs::write(ctx.path("hyper_traces.csv"), w.join("\n") + "\n")?;
    io::write_hyper_summary(&study.summary(), ctx.create("hyper_summary.csv")?)?;

    let mut rows = Vec::new();
    for (name, estimated) in [("estimated", true), ("fixed", false)] {
        for k in 0..first.errors_estimated.len() {
            let v: Vec<f64> = study
                .replications
                .iter()
                .map(|r| if estimated { r.errors_estimated[k] } else { r.errors_fixed[k] })
                .collect();
            let (mean_error, std_error) = mean_std(&v);
            rows.push(ErrorRow {
                policy: name.into(),
                k,
                mean_error,
                std_error,
            });
        }
    }
    io::write_error_table(&rows, ctx.create("errors.csv")?)?;

    if let Some(maps) = &first.maps {
        let grid = problem.grid;
        io::save_pgm(&grid, &maps.truth, &ctx.path("truth.pgm"))?;
        io::save_pgm(&grid, &maps.estimated, &ctx.path("recon_estimated.pgm"))?;
        io::save_pgm(&grid, &maps.fixed, &ctx.path("recon_fixed.pgm"))?;
        write_columns(ctx, "reconstructions.csv", &[("truth", &maps.truth), ("estimated", &maps.estimated), ("fixed", &maps.fixed)])?;
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn write_columns(ctx: &Context, name: &str, cols: &[(&str, &[f64])]) -> CliResult {
    let mut lines = vec![std::iter::once("pixel").chain(cols.iter().map(|c| c.0)).collect::<Vec<_>>().join(",")];
    let n = cols.first().map_or(0, |c| c.1.len());
    for i in 0..n {
        let mut line = i.to_string();
        for (_, v) in cols {
            line.push(',');
            line.push_str(&v[i].to_string());
        }
        lines.push(line);
    }
    fs::write(ctx.path(name), lines.join("\n") + "\n")?;
    Ok(())
}

fn read_vector(path: &Path) -> CliResult<DVector<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {t:?}: {e}", path.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(values))
}

/// Correlation length from measured data of a fixed design list.
fn estimate_from_data(ctx: &Context, dir: &Path, compare: bool) -> CliResult {
    let cfg = &ctx.config;
    let problem = cfg.problem()?;
    let hp0 = cfg.hyper_params()?;
    let p_file = File::open(dir.join("P.csv")).map_err(|e| Error::Parse(format!("{}: {e}", dir.join("P.csv").display())))?;
    let points = io::read_designs_csv(p_file)?;
    let x0 = DVector::from_element(problem.grid.pixel_count(), cfg.prior.mean);
    let mut state = LikelihoodState::new(problem.grid, cfg.prior.gamma);
    let (mut ops, mut noises, mut data, mut trace) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, p) in points.iter().enumerate() {
        let op = problem.operator(*p)?;
        let y = read_vector(&dir.join(format!("y_{:02}.csv", k + 1)))?;
        if y.len() != op.m_active() {
            return Err(Error::DimensionMismatch {
                what: "measurement vector",
                expected: op.m_active(),
                found: y.len(),
            }
            .into());
        }
        let noise = problem.noise_for(&op);
        state.push(&op, noise.clone(), &y, &x0)?;
        let ell = state.estimate(trace.last().copied(), &cfg.estimate.estimator)?;
        trace.push(ell);
        ops.push(op);
        noises.push(noise);
        data.push(y);
    }
    io::write_hyper_trace(&trace, ctx.create("hyper_trace.csv")?)?;
    let ell = trace.last().copied().unwrap_or(hp0.corr_length);
    let est = rebuild_posterior(&problem.grid, &hp0.with_corr_length(ell), &x0, &ops, &noises, &data, PrecisionTracking::Skip)?;
    let est_mean: Vec<f64> = est.mean().iter().copied().collect();
    io::save_pgm(&problem.grid, &est_mean, &ctx.path("recon_estimated.pgm"))?;
    let mut cols = vec![("estimated", est_mean.clone())];
    if compare {
        let fixed = rebuild_posterior(&problem.grid, &hp0, &x0, &ops, &noises, &data, PrecisionTracking::Skip)?;
        let fixed_mean: Vec<f64> = fixed.mean().iter().copied().collect();
        io::save_pgm(&problem.grid, &fixed_mean, &ctx.path("recon_fixed.pgm"))?;
        cols.push(("fixed", fixed_mean));
    }
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(n, v)| (*n, v.as_slice())).collect();
    write_columns(ctx, "reconstructions.csv", &refs)?;
    Ok(())
}

fn serve(default: Option<RunConfig>, bind: &str) -> CliResult {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::Serve)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| CliError::Bind(bind.to_string(), e))?;
        let addr = listener.local_addr().map_err(CliError::Serve)?;
        eprintln!("{}", serde_json::json!({"listening": addr.to_string()}));
        oedct_service::serve(listener, oedct_service::AppState::new(default))
            .await
            .map_err(CliError::Serve)
    })
}
