//! Operator command line for the access control node: bootstrap it, run
//! it, talk to it, load it, and verify what it wrote.
//!
//! Every command speaks the same request envelopes the gateway socket
//! does. With `--socket` the command talks to a running node; with
//! `--data-dir` it opens the node in-process for the duration of the
//! command. Results go to stdout as JSON. Exit status is 0 for any
//! served request (a Deny decision is a result, not an error), 1 for
//! domain errors, and 2 for usage errors.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use abacus_core::bench;
use abacus_core::crypto::OrgKeypair;
use abacus_core::ledger::{verify_store, FileBlockStore, VerifyOutcome};
use abacus_core::ordering::{run_scenario, Scenario};
use abacus_core::service::{
    policy_approval_digest, serve_unix, verify_governance, EndorsementConfig, NodeConfig,
    OrdererConfig, OrdererMode, OrgConfig, Service,
};

#[derive(Parser)]
#[command(
    name = "abacus",
    version,
    about = "Attribute-based access control over a tamper-evident ledger"
)]
struct Cli {
    /// Gateway socket of a running node
    #[arg(long, global = true, env = "ABACUS_SOCKET")]
    socket: Option<PathBuf>,
    /// Node data directory, operated in-process
    #[arg(long, global = true, env = "ABACUS_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Client identity presented to the service
    #[arg(long, global = true, default_value = "cli")]
    client: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a data directory with a generated configuration
    Bootstrap {
        /// Number of organizations to generate keys for
        #[arg(long, default_value_t = 3)]
        orgs: usize,
        /// Distinct approvals required for a policy write
        #[arg(long, default_value_t = 2)]
        threshold: usize,
        /// Ordering mode: solo or raft
        #[arg(long, default_value = "solo")]
        orderer: String,
        #[arg(long, default_value_t = 3)]
        cluster_size: u32,
        /// Overwrite an existing configuration
        #[arg(long)]
        force: bool,
    },
    /// Run the node and its gateway until killed
    Serve {
        /// Socket path; defaults to <data-dir>/node.sock
        #[arg(long)]
        socket_path: Option<PathBuf>,
    },
    /// Record (upsert) a subject or resource attribute document
    Record {
        /// "subject" or "resource"
        #[arg(long)]
        kind: String,
        /// Path to the attribute document
        #[arg(long)]
        file: PathBuf,
    },
    /// Submit a policy document with organization approvals
    Propose {
        /// Path to the policy document
        #[arg(long)]
        file: PathBuf,
        /// Pre-computed approval, as org=hexsig; repeatable
        #[arg(long = "approval")]
        approvals: Vec<String>,
        /// Comma-separated org ids to sign for, using secrets from the
        /// node configuration
        #[arg(long)]
        sign_with: Option<String>,
        /// Configuration holding signing secrets; defaults to
        /// <data-dir>/config.json
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate an access request and record the decision
    Check {
        #[arg(long)]
        subject: String,
        #[arg(long)]
        resource: String,
        /// Decision clock, ISO-8601; defaults to now
        #[arg(long)]
        clock: Option<String>,
        #[arg(long)]
        request_id: Option<String>,
    },
    /// List every decision recorded against a resource
    Audit {
        #[arg(long)]
        resource: String,
    },
    /// Read one key from current state
    Query {
        #[arg(long)]
        key: String,
    },
    /// Reconstruct a key's write history from the chain
    History {
        #[arg(long)]
        key: String,
    },
    /// Dump current state with versions
    Export,
    /// Node heights and configuration summary
    Status,
    /// Re-hash the chain offline; exits 1 if corruption is found
    Verify {
        /// Also re-verify endorsement and approval signatures
        #[arg(long)]
        governance: bool,
    },
    /// Generate an organization keypair
    Keygen {
        #[arg(long)]
        org_id: String,
    },
    /// Sign a policy document for use as an approval
    SignPolicy {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        org: String,
        /// Signing seed as hex; read from the configuration when absent
        #[arg(long)]
        secret: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Load measurement against a fresh in-memory node
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Run a replicated-ordering fault scenario deterministically
    Sim {
        /// Scenario description file
        #[arg(long)]
        scenario: PathBuf,
        /// Write the event trace as JSON lines to this file
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct BenchNodeArgs {
    #[arg(long, default_value = "solo")]
    orderer: String,
    #[arg(long, default_value_t = 3)]
    cluster_size: u32,
    #[arg(long, default_value_t = 3)]
    orgs: usize,
    #[arg(long, default_value_t = 2)]
    threshold: usize,
    #[arg(long, default_value_t = 500)]
    batch_max_count: usize,
    #[arg(long, default_value_t = 250)]
    batch_timeout_ms: u64,
    #[arg(long, default_value_t = 20)]
    policies: usize,
    #[arg(long, default_value_t = 200)]
    subjects: usize,
    #[arg(long, default_value_t = 200)]
    objects: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long, default_value = "check_access")]
    workload: String,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// One workload at one send rate
    Run {
        #[command(flatten)]
        node: BenchNodeArgs,
        #[arg(long, default_value_t = 1000)]
        transactions: usize,
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
    },
    /// The same workload across a ladder of send rates; prints CSV
    Sweep {
        #[command(flatten)]
        node: BenchNodeArgs,
        /// Comma-separated send rates in tx/s
        #[arg(long, default_value = "50,100,200,300,400")]
        rates: String,
        /// Transactions per sweep point
        #[arg(long, default_value_t = 1000)]
        transactions: usize,
        /// Emit JSON instead of CSV
        #[arg(long)]
        json: bool,
    },
}

/// A structured failure from the service or the protocol, printed as
/// JSON on stderr.
#[derive(Debug)]
struct DomainError {
    code: String,
    message: String,
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for DomainError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let (code, message) = match e.downcast_ref::<DomainError>() {
                Some(d) => (d.code.clone(), d.message.clone()),
                None => ("CLI".to_string(), format!("{e:#}")),
            };
            eprintln!("{}", json!({"code": code, "message": message}));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Bootstrap { orgs, threshold, orderer, cluster_size, force } => {
            bootstrap(&cli, *orgs, *threshold, orderer, *cluster_size, *force)
        }
        Command::Serve { socket_path } => serve(&cli, socket_path.clone()),
        Command::Record { kind, file } => {
            let document = read_json(file)?;
            let result = connect(&cli)?
                .request(&cli.client, "record_attributes", json!({"kind": kind, "document": document}), None)?;
            emit(&result)
        }
        Command::Propose { file, approvals, sign_with, config } => {
            let document = read_json(file)?;
            let approvals = collect_approvals(&cli, &document, approvals, sign_with.as_deref(), config)?;
            let result = connect(&cli)?.request(
                &cli.client,
                "propose_policy",
                json!({"document": document, "approvals": approvals}),
                None,
            )?;
            emit(&result)
        }
        Command::Check { subject, resource, clock, request_id } => {
            let mut params = json!({"subjectID": subject, "resourceID": resource});
            if let Some(clock) = clock {
                params["clock"] = json!(clock);
            }
            let result =
                connect(&cli)?.request(&cli.client, "check_access", params, request_id.clone())?;
            emit(&result)
        }
        Command::Audit { resource } => {
            let result =
                connect(&cli)?.request(&cli.client, "query_audit", json!({"resourceID": resource}), None)?;
            emit(&result)
        }
        Command::Query { key } => {
            let result = connect(&cli)?.request(&cli.client, "query_data", json!({"key": key}), None)?;
            emit(&result)
        }
        Command::History { key } => {
            let result =
                connect(&cli)?.request(&cli.client, "query_history", json!({"key": key}), None)?;
            emit(&result)
        }
        Command::Export => {
            let result = connect(&cli)?.request(&cli.client, "state_export", json!({}), None)?;
            emit(&result)
        }
        Command::Status => {
            let result = connect(&cli)?.request(&cli.client, "status", json!({}), None)?;
            emit(&result)
        }
        Command::Verify { governance } => verify(&cli, *governance),
        Command::Keygen { org_id } => {
            let key = OrgKeypair::generate(org_id);
            emit(&json!({
                "org_id": org_id,
                "public_key": key.public_hex(),
                "secret_key": key.secret_hex(),
            }))
        }
        Command::SignPolicy { file, org, secret, config } => {
            let document = read_json(file)?;
            let key = signing_key(&cli, org, secret.as_deref(), config)?;
            let signature = key.sign(&policy_approval_digest(&document));
            emit(&json!({"org_id": org, "signature": hex::encode(signature)}))
        }
        Command::Bench { command } => run_bench(command),
        Command::Sim { scenario, trace } => sim(scenario, trace.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

enum Conn {
    Embedded(Box<Service>),
    Socket(BufReader<UnixStream>, UnixStream),
}

fn connect(cli: &Cli) -> anyhow::Result<Conn> {
    if let Some(socket) = &cli.socket {
        let stream = UnixStream::connect(socket)
            .with_context(|| format!("cannot connect to {}", socket.display()))?;
        let reader = BufReader::new(stream.try_clone()?);
        return Ok(Conn::Socket(reader, stream));
    }
    if let Some(dir) = &cli.data_dir {
        let config = NodeConfig::load(&dir.join("config.json")).map_err(service_err)?;
        let service = Service::open(dir, config).map_err(service_err)?;
        return Ok(Conn::Embedded(Box::new(service)));
    }
    bail!("pass --socket PATH or --data-dir DIR (or set ABACUS_SOCKET / ABACUS_DATA_DIR)")
}

impl Conn {
    /// Send one request envelope and return its `result`, or a
    /// [`DomainError`] carrying the service's error code.
    fn request(
        &mut self,
        client: &str,
        op: &str,
        params: Value,
        request_id: Option<String>,
    ) -> anyhow::Result<Value> {
        let envelope = json!({
            "request_id": request_id.unwrap_or_else(fresh_id),
            "client_id": client,
            "op": op,
            "params": params,
        });
        let response = match self {
            Conn::Embedded(service) => service.handle(&envelope),
            Conn::Socket(reader, writer) => {
                writeln!(writer, "{envelope}")?;
                writer.flush()?;
                let mut line = String::new();
                if reader.read_line(&mut line)? == 0 {
                    bail!("gateway closed the connection");
                }
                serde_json::from_str(&line).context("gateway sent a malformed response")?
            }
        };
        match response.get("status").and_then(Value::as_str) {
            Some("ok") => Ok(response.get("result").cloned().unwrap_or(Value::Null)),
            _ => {
                let code = response["error"]["code"].as_str().unwrap_or("UNKNOWN").to_string();
                let message = response["error"]["message"].as_str().unwrap_or("").to_string();
                Err(anyhow!(DomainError { code, message }))
            }
        }
    }
}

fn service_err(e: abacus_core::service::ServiceError) -> anyhow::Error {
    anyhow!(DomainError { code: e.code().to_string(), message: e.to_string() })
}

fn fresh_id() -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after epoch").as_nanos();
    format!("{:032x}", nanos ^ ((std::process::id() as u128) << 96))
}

fn emit(value: &Value) -> anyhow::Result<ExitCode> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(ExitCode::SUCCESS)
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))
}

fn require_data_dir(cli: &Cli) -> anyhow::Result<&Path> {
    cli.data_dir.as_deref().ok_or_else(|| anyhow!("this command needs --data-dir"))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn parse_orderer(name: &str) -> anyhow::Result<OrdererMode> {
    match name {
        "solo" => Ok(OrdererMode::Solo),
        "raft" => Ok(OrdererMode::Raft),
        other => bail!("unknown orderer '{other}'; use solo or raft"),
    }
}

fn bootstrap(
    cli: &Cli,
    orgs: usize,
    threshold: usize,
    orderer: &str,
    cluster_size: u32,
    force: bool,
) -> anyhow::Result<ExitCode> {
    let dir = require_data_dir(cli)?;
    std::fs::create_dir_all(dir)?;
    let config_path = dir.join("config.json");
    if config_path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", config_path.display());
    }
    let keys: Vec<OrgKeypair> = (1..=orgs).map(|i| OrgKeypair::generate(&format!("org{i}"))).collect();
    let config = NodeConfig {
        orderer: OrdererConfig {
            mode: parse_orderer(orderer)?,
            cluster_size,
            ..OrdererConfig::default()
        },
        endorsement: EndorsementConfig { threshold },
        orgs: keys
            .iter()
            .map(|k| OrgConfig {
                org_id: k.org_id.clone(),
                public_key: k.public_hex(),
                secret_key: Some(k.secret_hex()),
            })
            .collect(),
        audit_clients: Vec::new(),
        commit_timeout_ms: 10_000,
    };
    config.validate().map_err(service_err)?;
    config.save(&config_path).map_err(service_err)?;
    emit(&json!({
        "data_dir": dir.display().to_string(),
        "config": config_path.display().to_string(),
        "organizations": keys.iter().map(|k| k.org_id.clone()).collect::<Vec<_>>(),
        "threshold": threshold,
        "orderer": orderer,
    }))
}

fn serve(cli: &Cli, socket_path: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let dir = require_data_dir(cli)?;
    let config = NodeConfig::load(&dir.join("config.json")).map_err(service_err)?;
    let service = Service::open(dir, config).map_err(service_err)?;
    let socket = socket_path.unwrap_or_else(|| dir.join("node.sock"));
    let _server = serve_unix(std::sync::Arc::new(service), &socket)?;
    eprintln!("listening on {}", socket.display());
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn collect_approvals(
    cli: &Cli,
    document: &Value,
    explicit: &[String],
    sign_with: Option<&str>,
    config_path: &Option<PathBuf>,
) -> anyhow::Result<Vec<Value>> {
    let mut approvals = Vec::new();
    for entry in explicit {
        let (org, sig) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("--approval takes org=hexsig, got '{entry}'"))?;
        approvals.push(json!({"org_id": org, "signature": sig}));
    }
    if let Some(orgs) = sign_with {
        let digest = policy_approval_digest(document);
        for org in orgs.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let key = signing_key(cli, org, None, config_path)?;
            approvals.push(json!({"org_id": org, "signature": hex::encode(key.sign(&digest))}));
        }
    }
    if approvals.is_empty() {
        bail!("a policy needs approvals; pass --approval org=hexsig or --sign-with orgs");
    }
    Ok(approvals)
}

/// Resolve an organization's signing key from an explicit seed or the
/// node configuration.
fn signing_key(
    cli: &Cli,
    org: &str,
    secret: Option<&str>,
    config_path: &Option<PathBuf>,
) -> anyhow::Result<OrgKeypair> {
    if let Some(secret) = secret {
        return OrgKeypair::from_secret_hex(org, secret)
            .map_err(|_| anyhow!("malformed secret for '{org}'"));
    }
    let path = match config_path {
        Some(path) => path.clone(),
        None => require_data_dir(cli)
            .context("signing needs --secret, --config, or --data-dir")?
            .join("config.json"),
    };
    let config = NodeConfig::load(&path).map_err(service_err)?;
    let entry = config
        .orgs
        .iter()
        .find(|o| o.org_id == org)
        .ok_or_else(|| anyhow!("organization '{org}' is not in {}", path.display()))?;
    let secret = entry
        .secret_key
        .as_deref()
        .ok_or_else(|| anyhow!("{} holds no secret for '{org}'", path.display()))?;
    OrgKeypair::from_secret_hex(org, secret).map_err(|_| anyhow!("malformed secret for '{org}'"))
}

fn verify(cli: &Cli, governance: bool) -> anyhow::Result<ExitCode> {
    let dir = require_data_dir(cli)?;
    let store = FileBlockStore::open(&dir.join("blocks")).map_err(service_err_ledger)?;
    let outcome = verify_store(&store);
    match outcome {
        VerifyOutcome::Intact { blocks } => {
            let mut result = json!({"status": "intact", "blocks": blocks});
            if governance {
                let config = NodeConfig::load(&dir.join("config.json")).map_err(service_err)?;
                let report = verify_governance(&store, &config.orgs, config.endorsement.threshold)
                    .map_err(service_err)?;
                result["governance"] = json!({
                    "transactions": report.transactions,
                    "policy_transactions": report.policy_transactions,
                });
            }
            emit(&result)
        }
        VerifyOutcome::Corrupt { height, reason } => {
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "status": "corrupt",
                    "height": height,
                    "reason": reason,
                }))?
            );
            Ok(ExitCode::from(1))
        }
    }
}

fn service_err_ledger(e: abacus_core::ledger::LedgerError) -> anyhow::Error {
    anyhow!(DomainError { code: "STORAGE_FAILURE".into(), message: e.to_string() })
}

fn run_bench(command: &BenchCommand) -> anyhow::Result<ExitCode> {
    let build = |node: &BenchNodeArgs| -> anyhow::Result<(NodeConfig, Vec<OrgKeypair>)> {
        let (mut config, keys) = NodeConfig::dev(node.orgs, node.threshold);
        config.orderer.mode = parse_orderer(&node.orderer)?;
        config.orderer.cluster_size = node.cluster_size;
        config.orderer.batch_max_count = node.batch_max_count;
        config.orderer.batch_timeout_ms = node.batch_timeout_ms;
        config.commit_timeout_ms = 60_000;
        Ok((config, keys))
    };
    let workload_kind = |name: &str| {
        bench::WorkloadKind::parse(name)
            .ok_or_else(|| anyhow!("unknown workload '{name}'; use check_access or record_attributes"))
    };
    match command {
        BenchCommand::Run { node, transactions, rate } => {
            let (config, keys) = build(node)?;
            let fixture = bench::generate_fixture(node.policies, node.subjects, node.objects, node.seed);
            let service = Service::open_in_memory(config).map_err(service_err)?;
            bench::load_fixture(&service, &fixture, &keys).map_err(service_err)?;
            let workload = bench::Workload::new(
                workload_kind(&node.workload)?,
                *transactions,
                *rate,
                node.clients,
                node.seed,
            );
            let report = bench::run_workload(&service, &fixture, &workload).map_err(service_err)?;
            service.shutdown();
            let mut result = report.to_json();
            result["workload"] = json!(node.workload);
            result["orderer"] = json!(node.orderer);
            emit(&result)
        }
        BenchCommand::Sweep { node, rates, transactions, json: as_json } => {
            let rates: Vec<f64> = rates
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow!("bad rate '{s}'")))
                .collect::<Result<_, _>>()?;
            let (config, keys) = build(node)?;
            let fixture = bench::generate_fixture(node.policies, node.subjects, node.objects, node.seed);
            let template = bench::Workload::new(
                workload_kind(&node.workload)?,
                *transactions,
                rates.first().copied().unwrap_or(100.0),
                node.clients,
                node.seed,
            );
            let points =
                bench::run_sweep(&config, &keys, &fixture, &template, &rates).map_err(service_err)?;
            if *as_json {
                let out: Vec<Value> = points
                    .iter()
                    .map(|p| {
                        let mut v = p.report.to_json();
                        v["rate_tps"] = json!(p.rate_tps);
                        v
                    })
                    .collect();
                emit(&json!(out))
            } else {
                print!("{}", bench::sweep_csv(&points));
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}

fn sim(scenario_path: &Path, trace: Option<&Path>) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(scenario_path)
        .with_context(|| format!("cannot read {}", scenario_path.display()))?;
    let scenario = Scenario::from_json(&text)
        .map_err(|e| anyhow!(DomainError { code: "BAD_SCENARIO".into(), message: e.to_string() }))?;
    let report = run_scenario(&scenario)
        .map_err(|e| anyhow!(DomainError { code: "SAFETY_VIOLATION".into(), message: e.to_string() }))?;
    if let Some(path) = trace {
        std::fs::write(path, report.trace_jsonl())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    emit(&json!({
        "committed": report.committed.len(),
        "submissions": report.submissions,
        "leaders_elected": report.leaders_elected,
        "all_submissions_committed": report.all_submissions_committed(),
    }))
}
