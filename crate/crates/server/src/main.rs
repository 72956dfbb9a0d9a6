use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use care_core::analytics::compute_metrics;
use care_core::model::{Document, DocumentId, LabelSetId, Role, Study, UserId};
use care_core::{hash_password, peppered};
use care_server::config::{ConfigOverrides, ServerConfig};
use care_server::export::{self, ExportOptions, Requester, Scope};
use care_server::server::{self, Instance};
use care_server::{csv_out, pdf};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;

#[derive(Parser)]
#[command(name = "care", version, about = "Collaborative annotation server and admin tools")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true, env = "CARE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "CARE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "CARE_LISTEN_ADDR")]
    listen_addr: Option<SocketAddr>,
    #[arg(long, global = true, env = "CARE_BROKER_TOKEN", hide_env_values = true)]
    broker_token: Option<String>,
    #[arg(long, global = true, env = "CARE_SESSION_SECRET", hide_env_values = true)]
    session_secret: Option<String>,
    #[arg(long, global = true, env = "CARE_CONSENT_TEXT_PATH")]
    consent_text_path: Option<PathBuf>,
    #[arg(long, global = true, env = "CARE_ASSIST_TIMEOUT_SECS")]
    assist_timeout_secs: Option<u64>,
    #[arg(long, global = true, env = "CARE_BEHAVIOR_LOGGING_DEFAULT")]
    behavior_logging_default: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the server: /ws for clients, /broker for workers, /healthz.
    Serve,
    /// Register a user. Prints the new user id.
    UserAdd(UserAdd),
    /// Import a PDF. Prints its document id.
    DocImport(DocImport),
    /// Create a study. Prints the new study id.
    StudyCreate(StudyCreate),
    /// Write an export bundle.
    Export(ExportCmd),
    /// Load an export bundle into the data directory.
    Import { file: PathBuf },
    /// Compute reading metrics from an export bundle.
    Analyze(Analyze),
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Admin,
    User,
}

#[derive(Args)]
struct UserAdd {
    #[arg(long)]
    username: String,
    #[arg(long, default_value = "")]
    email: String,
    #[arg(long, value_enum, default_value = "user")]
    role: RoleArg,
    /// Password; read from stdin when absent.
    #[arg(long, env = "CARE_PASSWORD", hide_env_values = true)]
    password: Option<String>,
    /// Accept the consent and licensing text shown on registration.
    #[arg(long)]
    accept_consent: bool,
    #[arg(long, conflicts_with = "no_behavior_optin")]
    behavior_optin: bool,
    #[arg(long)]
    no_behavior_optin: bool,
}

#[derive(Args)]
struct DocImport {
    file: PathBuf,
    /// Defaults to the file stem.
    #[arg(long)]
    title: Option<String>,
    /// Username of the uploader; defaults to the first admin.
    #[arg(long)]
    uploader: Option<String>,
}

#[derive(Args)]
struct StudyCreate {
    #[arg(long)]
    name: String,
    #[arg(long)]
    labelset: String,
    #[arg(long = "document", required = true)]
    documents: Vec<String>,
    /// Participant usernames.
    #[arg(long = "participant")]
    participants: Vec<String>,
    #[arg(long)]
    time_limit_mins: Option<u64>,
    /// Username of the creator; defaults to the first admin.
    #[arg(long)]
    created_by: Option<String>,
}

#[derive(Args)]
#[group(id = "scope", required = true, multiple = false)]
struct ScopeArgs {
    #[arg(long, group = "scope")]
    all: bool,
    #[arg(long, group = "scope")]
    document: Option<String>,
    /// User id or username.
    #[arg(long, group = "scope")]
    user: Option<String>,
}

#[derive(Args)]
struct ExportCmd {
    #[command(flatten)]
    scope: ScopeArgs,
    #[arg(long)]
    include_pdf: bool,
    /// Keep real usernames and emails.
    #[arg(long)]
    identify: bool,
    /// Output file, `-` for stdout.
    #[arg(default_value = "-")]
    out: PathBuf,
}

#[derive(Args)]
struct Analyze {
    file: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Metrics JSON destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV per metric into this directory.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
}

/// Failure with a stable machine-readable code.
struct Failure {
    code: &'static str,
    error: anyhow::Error,
}

fn fail(code: &'static str, error: impl Into<anyhow::Error>) -> Failure {
    Failure { code, error: error.into() }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: "error", error }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.code, "message": format!("{:#}", f.error) });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let g = cli.global;
    let overrides = ConfigOverrides {
        listen_addr: g.listen_addr,
        data_dir: g.data_dir,
        broker_token: g.broker_token,
        session_secret: g.session_secret,
        consent_text_path: g.consent_text_path,
        assist_timeout_secs: g.assist_timeout_secs,
        behavior_logging_default: g.behavior_logging_default,
    };
    if let Command::Analyze(a) = cli.command {
        return analyze(a);
    }
    let cfg = ServerConfig::load(g.config.as_deref(), overrides).map_err(|e| fail("config", e))?;
    match cli.command {
        Command::Serve => serve(cfg),
        Command::UserAdd(a) => user_add(&cfg, a),
        Command::DocImport(a) => doc_import(&cfg, a),
        Command::StudyCreate(a) => study_create(&cfg, a),
        Command::Export(a) => export_cmd(&cfg, a),
        Command::Import { file } => import_cmd(&cfg, &file),
        Command::Analyze(_) => unreachable!(),
    }
}

fn serve(cfg: ServerConfig) -> CmdResult {
    cfg.validate_serve().map_err(|e| fail("config", e))?;
    tracing_subscriber::fmt().with_writer(io::stderr).init();
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(server::serve(
        cfg,
        |addr| {
            // the first stdout line announces the bound address
            println!("listening on {addr}");
            let _ = io::stdout().flush();
            tracing::info!(%addr, "serving");
        },
        server::shutdown_signal(),
    ))
    .map_err(|e| fail("serve", e))
}

fn open(cfg: &ServerConfig) -> Result<Instance, Failure> {
    Instance::open(cfg).map_err(|e| fail("data-dir", e))
}

fn random_salt() -> String {
    let mut b = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut b);
    hex::encode(b)
}

fn user_add(cfg: &ServerConfig, a: UserAdd) -> CmdResult {
    let consent = cfg.consent_text().map_err(|e| fail("config", e))?;
    eprintln!("{consent}");
    if !a.accept_consent {
        return Err(fail("consent-required", anyhow::anyhow!("registration requires --accept-consent")));
    }
    let password = match a.password {
        Some(p) => p,
        None => {
            let mut line = String::new();
            io::stdin().lock().read_line(&mut line).context("reading password from stdin")?;
            line.trim_end_matches(['\r', '\n']).to_string()
        }
    };
    if password.is_empty() {
        return Err(fail("invalid-argument", anyhow::anyhow!("password must not be empty")));
    }
    let optin = if a.behavior_optin {
        true
    } else if a.no_behavior_optin {
        false
    } else {
        cfg.behavior_logging_default
    };
    let role = match a.role {
        RoleArg::Admin => Role::Admin,
        RoleArg::User => Role::User,
    };
    let mut inst = open(cfg)?;
    let credential = hash_password(&random_salt(), &peppered(&cfg.session_secret, &password));
    let id = inst
        .engine
        .register_user(&a.username, &a.email, role, optin, credential, server::now())
        .map_err(|e| fail("rejected", anyhow::anyhow!("{e}")))?;
    println!("{id}");
    Ok(())
}

fn resolve_user(inst: &Instance, name_or_id: Option<&str>) -> Result<UserId, Failure> {
    let state = inst.engine.state();
    let found = match name_or_id {
        Some(n) => state.user_by_name(n).or_else(|| state.user(&UserId::new(n))),
        None => state.users().find(|u| u.is_admin()),
    };
    found.map(|u| u.user_id.clone()).ok_or_else(|| {
        let what = name_or_id.map_or_else(|| "no admin user exists".to_string(), |n| format!("unknown user {n}"));
        fail("unknown-user", anyhow::anyhow!(what))
    })
}

fn doc_import(cfg: &ServerConfig, a: DocImport) -> CmdResult {
    let bytes = fs::read(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let extracted = pdf::extract(&bytes).map_err(|e| fail("corrupt-pdf", e))?;
    let mut inst = open(cfg)?;
    let uploader = resolve_user(&inst, a.uploader.as_deref())?;
    let existing = DocumentId::new(extracted.content_hash.clone());
    if inst.engine.state().document(&existing).is_some() {
        // same bytes, same document
        eprintln!("{}", serde_json::json!({ "notice": "already-imported", "documentId": existing }));
        println!("{existing}");
        return Ok(());
    }
    let title = a.title.unwrap_or_else(|| a.file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    if extracted.text_layer_empty() {
        eprintln!("{}", serde_json::json!({ "warning": "text-layer-empty", "file": a.file.display().to_string() }));
    }
    inst.dir.put_blob(&extracted.content_hash, &bytes).map_err(|e| fail("storage-failure", e))?;
    let doc = Document {
        document_id: DocumentId::new(extracted.content_hash.clone()),
        title,
        page_count: extracted.pages.len(),
        text_layer: extracted.pages,
        uploaded_by: uploader,
        uploaded_at: server::now(),
    };
    let id = inst.engine.import_document(doc).map_err(|e| fail("rejected", anyhow::anyhow!("{e}")))?;
    println!("{id}");
    Ok(())
}

fn study_create(cfg: &ServerConfig, a: StudyCreate) -> CmdResult {
    let mut inst = open(cfg)?;
    let created_by = resolve_user(&inst, a.created_by.as_deref())?;
    let participant_ids =
        a.participants.iter().map(|p| resolve_user(&inst, Some(p))).collect::<Result<Vec<_>, _>>()?;
    let study = Study {
        study_id: inst.engine.state().next_study_id(),
        name: a.name,
        document_ids: a.documents.into_iter().map(DocumentId::new).collect(),
        participant_ids,
        labelset_id: LabelSetId::new(a.labelset),
        time_limit: a.time_limit_mins.map(|m| m * 60_000),
        created_by,
    };
    let id = study.study_id.clone();
    inst.engine.create_study(study).map_err(|e| fail("rejected", anyhow::anyhow!("{e}")))?;
    println!("{id}");
    Ok(())
}

fn write_out(path: &Path, text: &str) -> anyhow::Result<()> {
    if path == Path::new("-") {
        io::stdout().write_all(text.as_bytes())?;
    } else {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn export_cmd(cfg: &ServerConfig, a: ExportCmd) -> CmdResult {
    let inst = open(cfg)?;
    let scope = if a.scope.all {
        Scope::All
    } else if let Some(d) = a.scope.document {
        Scope::Document(DocumentId::new(d))
    } else {
        let u = a.scope.user.expect("clap enforces one scope");
        Scope::User(resolve_user(&inst, Some(&u))?)
    };
    let options = ExportOptions { include_pdf: a.include_pdf, identify: a.identify };
    let bundle = export::export(
        inst.engine.state(),
        &scope,
        &Requester::Operator,
        &options,
        |id| inst.dir.blob(id.as_str()).ok().flatten(),
        server::now(),
    )
    .map_err(|e| fail(e.code(), e))?;
    write_out(&a.out, &export::to_json(&bundle))?;
    Ok(())
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

fn import_cmd(cfg: &ServerConfig, file: &Path) -> CmdResult {
    let text = read_input(file)?;
    let bundle = export::from_json(&text).map_err(|e| fail("malformed-bundle", e))?;
    let mut inst = open(cfg)?;
    let (records, report) = export::plan_import(inst.engine.state(), &bundle).map_err(|e| fail(e.code(), e))?;
    for (id, bytes) in export::bundled_pdfs(&bundle) {
        inst.dir.put_blob(id.as_str(), &bytes).map_err(|e| fail("storage-failure", e))?;
    }
    for r in records {
        inst.engine.commit(r).map_err(|e| fail("storage-failure", anyhow::anyhow!("{e}")))?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn analyze(a: Analyze) -> CmdResult {
    if a.bins == 0 {
        return Err(fail("invalid-argument", anyhow::anyhow!("--bins must be positive")));
    }
    let text = read_input(&a.file)?;
    let bundle = export::from_json(&text).map_err(|e| fail("malformed-bundle", e))?;
    let metrics = compute_metrics(&bundle.behavior_events, a.bins);
    let mut json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    json.push('\n');
    match &a.out {
        Some(p) => write_out(p, &json)?,
        None => write_out(Path::new("-"), &json)?,
    }
    if let Some(dir) = &a.csv_dir {
        csv_out::write_all(dir, &metrics).map_err(|e| fail("io", e))?;
    }
    Ok(())
}
