//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;

use cleave_core::analysis::AnalysisDoc;
use cleave_core::attribution::{render_report, Attributor};
use cleave_core::bytes::AbsPath;
use cleave_core::effects::init_state;
use cleave_core::emit::{self, MaterializeOptions};
use cleave_core::placement::{self, FsMetadataSource, PlacementPlan, PlanOptions};
use cleave_core::policy::parse_policy;
use cleave_core::trace::{open_reader, TraceFormat};

pub enum CliError {
    /// Bad input: exit 1.
    Input(anyhow::Error),
    /// A pipeline invariant broke: exit 2.
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Input(e)
    }
}

pub struct AnalyzeArgs {
    pub traces: Vec<PathBuf>,
    pub format: String,
    pub root_cwd: String,
    pub root_exe: String,
    pub out: PathBuf,
    pub report: Option<PathBuf>,
    pub strict: bool,
}

pub fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let format: TraceFormat = args
        .format
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))?;
    let g0 = init_state(
        args.root_cwd.as_bytes(),
        args.root_exe.as_bytes(),
        BTreeMap::new(),
    )
    .context("initial state")?;

    let mut attributor = Attributor::new(g0);
    let mut first = true;
    let mut events: u64 = 0;
    for path in &args.traces {
        if !first {
            attributor.next_log();
        }
        first = false;
        let mut reader =
            open_reader(path, format, args.strict).map_err(|e| anyhow::anyhow!("{e}"))?;
        for ev in &mut reader {
            let ev = ev.map_err(|e| anyhow::anyhow!("{e}"))?;
            attributor.feed(&ev);
            events += 1;
        }
        log::info!(
            "{}: {} events ({} noise, {} malformed)",
            path.display(),
            reader.stats.events,
            reader.stats.noise_lines,
            reader.stats.malformed_lines
        );
    }
    let attribution = attributor.finish();

    let report = render_report(&attribution);
    let doc = AnalysisDoc::new(
        AbsPath::new(args.root_cwd.as_bytes()).expect("validated above"),
        AbsPath::new(args.root_exe.as_bytes()).expect("validated above"),
        attribution,
    );
    let out =
        fs::File::create(&args.out).with_context(|| format!("create {}", args.out.display()))?;
    doc.write(out).map_err(|e| anyhow::anyhow!("{e}"))?;

    match &args.report {
        Some(p) if p.as_os_str() == "-" => print!("{report}"),
        Some(p) => fs::write(p, &report).with_context(|| format!("write {}", p.display()))?,
        None => print!("{report}"),
    }
    eprintln!(
        "analyze: {events} events from {} trace(s) in {:.2}s -> {}",
        args.traces.len(),
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

pub struct PartitionArgs {
    pub analysis: PathBuf,
    pub policy: PathBuf,
    pub source_root: PathBuf,
    pub out: PathBuf,
    pub strict_missing: bool,
}

pub fn partition(args: PartitionArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (plan, summary) = compute_plan(
        &args.analysis,
        &args.policy,
        &args.source_root,
        args.strict_missing,
    )?;
    let mut out =
        fs::File::create(&args.out).with_context(|| format!("create {}", args.out.display()))?;
    serde_json::to_writer_pretty(&mut out, &plan).context("serialize plan")?;
    out.write_all(b"\n").context("write plan")?;
    print!("{summary}");
    eprintln!(
        "partition: plan written to {} in {:.2}s",
        args.out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn compute_plan(
    analysis_path: &Path,
    policy_path: &Path,
    source_root: &Path,
    strict_missing: bool,
) -> Result<(PlacementPlan, String), CliError> {
    let doc = AnalysisDoc::read(
        fs::File::open(analysis_path)
            .with_context(|| format!("open {}", analysis_path.display()))?,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let policy_text = fs::read_to_string(policy_path)
        .with_context(|| format!("open {}", policy_path.display()))?;
    let policy = parse_policy(&policy_text).map_err(|e| anyhow::anyhow!("{e}"))?;

    let exes = doc.attribution.executables();
    let pm = cleave_core::partition::partition(&exes, &doc.attribution.call_graph, &policy)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (a, b) in &pm.unsatisfied {
        log::warn!("positive constraint ({a}, {b}) unsatisfiable under the negative constraints");
    }

    let meta = FsMetadataSource::new(source_root);
    let opts = PlanOptions { strict_missing };
    let plan = placement::plan_placement(&pm, &doc.attribution, &meta, &opts)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    // per-container resource counts plus the size of the largest read set,
    // reported as information only
    let acc = placement::summarize_access(&pm, &doc.attribution)
        .map_err(|e| CliError::Internal(anyhow::anyhow!("{e}")))?;
    let mut per_reads: BTreeMap<usize, usize> = BTreeMap::new();
    let mut per_writes: BTreeMap<usize, usize> = BTreeMap::new();
    for a in acc.values() {
        for c in &a.readers {
            *per_reads.entry(*c).or_default() += 1;
        }
        for c in &a.writers {
            *per_writes.entry(*c).or_default() += 1;
        }
    }
    use std::fmt::Write as _;
    let mut summary = String::new();
    writeln!(summary, "containers: {}", plan.containers.len()).unwrap();
    for (i, c) in plan.containers.iter().enumerate() {
        writeln!(
            summary,
            "  {}: {} executable(s), reads={}, writes={}, files={}, volumes={}, stubs={}",
            c.name,
            c.executables.len(),
            per_reads.get(&i).copied().unwrap_or(0),
            per_writes.get(&i).copied().unwrap_or(0),
            c.files.len(),
            c.volumes.len(),
            c.stubs.len()
        )
        .unwrap();
    }
    let max_reads = per_reads.values().copied().max().unwrap_or(0);
    writeln!(summary, "max container read-set size: {max_reads}").unwrap();
    if plan.shared_network {
        writeln!(summary, "network namespace: shared (matched socket addresses)").unwrap();
    }
    for (a, b) in &pm.unsatisfied {
        writeln!(summary, "warning: cannot co-locate {a} and {b}").unwrap();
    }
    Ok((plan, summary))
}

pub struct BuildArgs {
    pub plan: Option<PathBuf>,
    pub analysis: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub source_root: PathBuf,
    pub out: PathBuf,
    pub force: bool,
    pub strict_missing: bool,
    pub stub_binary: Option<PathBuf>,
    pub server_binary: Option<PathBuf>,
}

pub fn build(args: BuildArgs) -> Result<(), CliError> {
    if args.out.exists() {
        let occupied = fs::read_dir(&args.out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied && !args.force {
            return Err(anyhow::anyhow!(
                "output directory {} is not empty (use --force to overwrite)",
                args.out.display()
            )
            .into());
        }
    }
    let analysis_started = Instant::now();
    let plan: PlacementPlan = match &args.plan {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("open {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parse {}", p.display()))?
        }
        None => {
            let analysis = args
                .analysis
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--analysis required when --plan is omitted"))?;
            let policy = args
                .policy
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--policy required when --plan is omitted"))?;
            compute_plan(analysis, policy, &args.source_root, args.strict_missing)?.0
        }
    };
    let analysis_secs = analysis_started.elapsed().as_secs_f64();

    let build_started = Instant::now();
    let opts = MaterializeOptions {
        stub_binary: resolve_helper(args.stub_binary.clone(), "rpe-stub", &plan),
        server_binary: resolve_helper(args.server_binary.clone(), "rpe-server", &plan),
    };
    emit::materialize(&plan, &args.source_root, &args.out, &opts)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let report =
        emit::size_report(&args.source_root, &args.out).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut json = serde_json::to_vec_pretty(&report).context("serialize size report")?;
    json.push(b'\n');
    fs::write(args.out.join("size-report.json"), json).context("write size report")?;
    print!("{}", report.render_text());
    eprintln!(
        "build: analysis/plan {:.2}s, materialize {:.2}s -> {}",
        analysis_secs,
        build_started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

/// Helper binaries default to siblings of the cleave executable (cargo
/// puts all workspace binaries in one directory).
fn resolve_helper(explicit: Option<PathBuf>, name: &str, plan: &PlacementPlan) -> Option<PathBuf> {
    if explicit.is_some() {
        return explicit;
    }
    let needed = match name {
        "rpe-stub" => plan.containers.iter().any(|c| !c.stubs.is_empty()),
        _ => plan.containers.iter().any(|c| c.serves_rpe),
    };
    if !needed {
        return None;
    }
    let sibling = std::env::current_exe()
        .ok()?
        .parent()?
        .join(name);
    sibling.exists().then_some(sibling)
}
