use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fedsilo_agent::{Agent, AgentConfig};
use fedsilo_client::Client;
use fedsilo_core::api::{
    CreateAccountRequest, DataDistributionRequest, DeviceType, EndpointRecord, ExperimentRecord,
    LabelHistogram,
};
use fedsilo_core::data::{equal_partition, synthetic_digits};
use fedsilo_core::idx::{encode_images, encode_labels, parse_images, parse_labels};
use fedsilo_core::DataLoaderSpec;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::profile::{self, Profile, DEFAULT_SERVER};
use crate::template::{commented_template, parse_config};
use crate::{
    AccountCommand, AgentCommand, Cli, Command, DataCommand, Device, EndpointsCommand, ExpCommand,
    FedCommand, ServeArgs, TlsMode,
};

struct Ctx {
    profile_path: PathBuf,
    profile: Profile,
    server: String,
    json: bool,
}

impl Ctx {
    fn client(&self) -> Client {
        Client::new(&self.server, self.profile.token.clone())
    }

    fn authed(&self) -> CliResult<Client> {
        if self.profile.token.is_none() {
            return Err(CliError::Validation(format!(
                "not logged in; run `fedsilo login` (profile {})",
                self.profile_path.display()
            )));
        }
        Ok(self.client())
    }

    fn fed(&self, explicit: Option<String>) -> CliResult<String> {
        explicit
            .or_else(|| self.profile.default_federation_id.clone())
            .ok_or_else(|| {
                CliError::Validation("no federation given; pass --fed or run `fedsilo fed use <id>`".into())
            })
    }

    fn save_profile(&self) -> CliResult<()> {
        self.profile.save(&self.profile_path)
    }

    /// Prints `value` as JSON with --json, otherwise runs `human`.
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce()) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
        } else {
            human();
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let profile_path = cli.profile.clone().unwrap_or_else(profile::default_path);
    let profile = Profile::load(&profile_path)?;
    let server = cli
        .server
        .clone()
        .or_else(|| profile.server_url.clone())
        .unwrap_or_else(|| DEFAULT_SERVER.to_string());
    let mut ctx = Ctx {
        profile_path,
        profile,
        server,
        json: cli.json,
    };
    match cli.command {
        Command::Serve(args) => serve(args),
        Command::Account { command } => account(&ctx, command),
        Command::Login { email, password } => login(&mut ctx, &email, password),
        Command::Logout => logout(&mut ctx),
        Command::Whoami => {
            let me = ctx.authed()?.whoami()?;
            ctx.emit(&me, || {
                println!("{} <{}> ({})", me.account.display_name, me.account.email, me.account.account_id);
                for f in &me.federations {
                    let role = if f.admin_id == me.account.account_id { "admin" } else { "member" };
                    println!("  federation {} {:?} ({role})", f.federation_id, f.name);
                }
                for f in &me.invitations {
                    println!("  invitation {} {:?}", f.federation_id, f.name);
                }
            });
            Ok(())
        }
        Command::Fed { command } => fed(&mut ctx, command),
        Command::Exp { command } => exp(&ctx, command),
        Command::Endpoints { command } => endpoints(&ctx, command),
        Command::Agent { command } => agent(&ctx, command),
        Command::Data { command } => data(&ctx, command),
    }
}

fn read_password(given: Option<String>) -> CliResult<String> {
    if let Some(p) = given {
        return Ok(p);
    }
    eprint!("password: ");
    let _ = std::io::stderr().flush();
    let mut line = String::new();
    std::io::stdin()
        .lock()
        .read_line(&mut line)
        .map_err(|e| CliError::Io(format!("stdin: {e}")))?;
    let p = line.trim_end_matches(['\r', '\n']).to_string();
    if p.is_empty() {
        return Err(CliError::Validation("no password given".into()));
    }
    Ok(p)
}

// ------------------------------------------------------------------ serve

fn serve(args: ServeArgs) -> CliResult<()> {
    if args.tls_mode == TlsMode::None && !args.bind.is_loopback() {
        return Err(CliError::Validation(format!(
            "refusing plain HTTP on {}; terminate TLS at a reverse proxy and pass --tls-mode proxy",
            args.bind
        )));
    }
    if !(args.heartbeat_interval.is_finite() && args.heartbeat_interval > 0.0) {
        return Err(CliError::Validation("--heartbeat-interval must be positive".into()));
    }
    if args.token_ttl_hours <= 0 {
        return Err(CliError::Validation("--token-ttl-hours must be positive".into()));
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(format!("runtime: {e}")))?;
    runtime.block_on(async move {
        let mut config = fedsilo_server::ServerConfig::new(&args.data_dir);
        config.heartbeat_interval_s = args.heartbeat_interval;
        config.token_ttl = chrono::Duration::hours(args.token_ttl_hours);
        config.static_dir = args.static_dir.clone();
        let state = fedsilo_server::build(&config, Arc::new(fedsilo_server::SystemClock))
            .map_err(|e| CliError::io(&args.data_dir, e))?;
        let listener = tokio::net::TcpListener::bind(args.addr())
            .await
            .map_err(|e| CliError::Io(format!("bind {}: {e}", args.addr())))?;
        let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        fedsilo_server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Io(format!("server: {e}")))
    })
}

// ------------------------------------------------------- accounts, login

fn account(ctx: &Ctx, command: AccountCommand) -> CliResult<()> {
    let AccountCommand::Create { email, name, password } = command;
    let password = read_password(password)?;
    let account = ctx.client().create_account(&CreateAccountRequest {
        display_name: name,
        email,
        password,
    })?;
    ctx.emit(&account, || println!("created account {} <{}>", account.account_id, account.email));
    Ok(())
}

fn login(ctx: &mut Ctx, email: &str, password: Option<String>) -> CliResult<()> {
    let password = read_password(password)?;
    let token = Client::new(&ctx.server, None).login(email, &password)?;
    ctx.profile.server_url = Some(ctx.server.clone());
    ctx.profile.token = Some(token.token.clone());
    ctx.save_profile()?;
    let shown = serde_json::json!({
        "account_id": token.account_id,
        "expires_at": token.expires_at,
        "profile": ctx.profile_path,
    });
    ctx.emit(&shown, || {
        println!("logged in as {}; token saved to {}", token.account_id, ctx.profile_path.display())
    });
    Ok(())
}

fn logout(ctx: &mut Ctx) -> CliResult<()> {
    if let Err(e) = ctx.authed()?.logout() {
        if !e.is_auth() {
            return Err(e.into());
        }
    }
    ctx.profile.token = None;
    ctx.save_profile()?;
    ctx.emit(&serde_json::json!({"logged_out": true}), || println!("logged out"));
    Ok(())
}

// ------------------------------------------------------------ federations

fn fed(ctx: &mut Ctx, command: FedCommand) -> CliResult<()> {
    let client = ctx.authed()?;
    match command {
        FedCommand::Create { name } => {
            let fed = client.create_federation(&name)?;
            ctx.profile.default_federation_id = Some(fed.federation_id.clone());
            ctx.save_profile()?;
            ctx.emit(&fed, || println!("created federation {} {:?} (now the default)", fed.federation_id, fed.name));
        }
        FedCommand::List => {
            let feds = client.federations()?;
            ctx.emit(&feds, || {
                for f in &feds {
                    let mark = if ctx.profile.default_federation_id.as_deref() == Some(&f.federation_id) { "*" } else { " " };
                    println!("{mark} {} {:?} ({} members)", f.federation_id, f.name, f.members.len());
                }
            });
        }
        FedCommand::Use { federation_id } => {
            let fed = client.federation(&federation_id)?;
            ctx.profile.default_federation_id = Some(fed.federation_id.clone());
            ctx.save_profile()?;
            ctx.emit(&fed, || println!("default federation is now {} {:?}", fed.federation_id, fed.name));
        }
        FedCommand::Invite { email, fed } => {
            let m = client.invite(&ctx.fed(fed)?, &email)?;
            ctx.emit(&m, || println!("invited {email} ({})", m.account_id));
        }
        FedCommand::Accept { federation_id } => {
            let m = client.accept(&federation_id)?;
            if ctx.profile.default_federation_id.is_none() {
                ctx.profile.default_federation_id = Some(federation_id.clone());
                ctx.save_profile()?;
            }
            ctx.emit(&m, || println!("joined federation {federation_id}"));
        }
        FedCommand::Members { fed } => {
            let f = client.federation(&ctx.fed(fed)?)?;
            ctx.emit(&f.members, || {
                for m in &f.members {
                    println!(
                        "{} {:<8} {:<8} {} {}",
                        m.account_id,
                        format!("{:?}", m.role).to_lowercase(),
                        format!("{:?}", m.status).to_lowercase(),
                        m.display_name.as_deref().unwrap_or(""),
                        m.email.as_deref().map(|e| format!("<{e}>")).unwrap_or_default()
                    );
                }
            });
        }
        FedCommand::Remove { account_id, fed } => {
            client.remove_member(&ctx.fed(fed)?, &account_id)?;
            ctx.emit(&serde_json::json!({"removed": account_id}), || println!("removed {account_id}"));
        }
        FedCommand::DataDistribution { roster, classes, fed } => {
            let fed = ctx.fed(fed)?;
            let spec = classes.map(|c| fedsilo_core::ModelSpec::logistic(1, c));
            let hist = client.data_distribution(&fed, &DataDistributionRequest { roster, model_spec: spec })?;
            ctx.emit(&hist, || print_histograms(&hist));
        }
    }
    Ok(())
}

fn print_histograms(hist: &std::collections::BTreeMap<String, LabelHistogram>) {
    for (endpoint, h) in hist {
        let total: u64 = h.counts.iter().sum();
        let warn = if h.empty { "  (warning: empty dataset)" } else { "" };
        println!("{endpoint}: total {total} {:?}{warn}", h.counts);
    }
}

// ------------------------------------------------------------ experiments

fn exp(ctx: &Ctx, command: ExpCommand) -> CliResult<()> {
    if let ExpCommand::Launch { print_template: true, roster, .. } = &command {
        let fed = ctx.profile.default_federation_id.clone().unwrap_or_else(|| "<federation-id>".into());
        let roster = if roster.is_empty() {
            (1..=5).map(|i| format!("<endpoint-id-{i}>")).collect()
        } else {
            roster.clone()
        };
        print!("{}", commented_template(&fed, roster));
        return Ok(());
    }
    let client = ctx.authed()?;
    match command {
        ExpCommand::Launch { file, .. } => {
            let path = file.expect("clap requires --file without --print-template");
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let config = parse_config(&text).map_err(|errors| {
                CliError::Validation(format!(
                    "{} is not a valid experiment config:\n{}",
                    path.display(),
                    errors.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n")
                ))
            })?;
            let record = client.launch(&config)?;
            let id = record.config.experiment_id.clone();
            ctx.emit(&record, || println!("{id}"));
        }
        ExpCommand::List { fed } => {
            let list = client.experiments(&ctx.fed(fed)?)?;
            ctx.emit(&list, || {
                for e in &list {
                    println!(
                        "{} {:<9} {:<10} {}/{} rounds  {}",
                        e.experiment_id,
                        format!("{:?}", e.status).to_lowercase(),
                        e.algorithm,
                        e.rounds_completed,
                        e.rounds,
                        e.name
                    );
                }
            });
        }
        ExpCommand::Status { experiment_id } => {
            let record = client.experiment(&experiment_id)?;
            ctx.emit(&record, || print_status(&record));
        }
        ExpCommand::Logs { experiment_id, follow, from } => {
            let mut next = from;
            loop {
                let wait = if follow { Duration::from_secs(25) } else { Duration::ZERO };
                let resp = client.logs(&experiment_id, next, wait)?;
                for line in &resp.lines {
                    if ctx.json {
                        println!("{}", serde_json::to_string(line).expect("log line serializes"));
                    } else {
                        println!("{} {}", line.at.format("%Y-%m-%dT%H:%M:%S%.3fZ"), line.text);
                    }
                }
                let _ = std::io::stdout().flush();
                next = resp.next_line;
                if !follow || (resp.status.is_terminal() && resp.lines.is_empty()) {
                    break;
                }
            }
        }
        ExpCommand::Report { experiment_id, csv, output } => {
            let text = if csv {
                client.report_csv(&experiment_id)?
            } else {
                let report = client.report(&experiment_id)?;
                if output.is_none() && !ctx.json {
                    print!("{}", report.to_csv());
                    return Ok(());
                }
                serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
            };
            match output {
                Some(path) => {
                    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
                    eprintln!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
        }
        ExpCommand::Compare { experiment_ids, output } => {
            let report = client.compare(&experiment_ids)?;
            let csv = report.to_csv();
            match output {
                Some(prefix) => {
                    let json_path = with_suffix(&prefix, "json");
                    let csv_path = with_suffix(&prefix, "csv");
                    let json = serde_json::to_string_pretty(&report).expect("comparison serializes");
                    std::fs::write(&json_path, json + "\n").map_err(|e| CliError::io(&json_path, e))?;
                    std::fs::write(&csv_path, &csv).map_err(|e| CliError::io(&csv_path, e))?;
                    ctx.emit(&serde_json::json!({"json": json_path, "csv": csv_path}), || {
                        println!("wrote {} and {}", json_path.display(), csv_path.display())
                    });
                }
                None => ctx.emit(&report, || print!("{csv}")),
            }
        }
        ExpCommand::Cancel { experiment_id } => {
            let record = client.cancel(&experiment_id)?;
            ctx.emit(&record, || println!("cancelled {experiment_id}"));
        }
    }
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn print_status(r: &ExperimentRecord) {
    let c = &r.config;
    println!(
        "{} {:?}: {} {} rounds, status {:?}",
        c.experiment_id, c.name, c.algorithm, c.rounds, r.status
    );
    if let Some(f) = &r.failure {
        println!("failure: {f}");
    }
    for round in &r.rounds {
        let acc = round
            .global_val_accuracy
            .map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let walls: Vec<String> = round
            .per_client
            .iter()
            .map(|(id, e)| format!("{id}={}", e.wall_seconds.map_or("-".into(), |w| format!("{w:.1}s"))))
            .collect();
        println!(
            "round {:>3}  acc {acc}  lr {:.6}  {}",
            round.round,
            round.client_lr_used,
            walls.join(" ")
        );
    }
    if let Some(m) = &r.final_model {
        println!("final model {}", m.sha256);
    }
}

// -------------------------------------------------------------- endpoints

fn print_endpoints(list: &[EndpointRecord]) {
    for e in list {
        let res = e
            .resources
            .as_ref()
            .map(|m| {
                format!(
                    "cpu {:>5.1}%  mem {:>6} MiB / {:>6} MiB  net tx {:.0} B/s rx {:.0} B/s",
                    m.cpu_percent,
                    m.mem_used_bytes / (1 << 20),
                    m.mem_total_bytes / (1 << 20),
                    m.net_tx_bytes_per_s,
                    m.net_rx_bytes_per_s
                )
            })
            .unwrap_or_default();
        println!(
            "{} {:<16} {:<4} {:<8} {res}",
            e.endpoint_id,
            e.name,
            format!("{:?}", e.device_type).to_lowercase(),
            format!("{:?}", e.status).to_lowercase()
        );
    }
}

fn endpoints(ctx: &Ctx, command: EndpointsCommand) -> CliResult<()> {
    let client = ctx.authed()?;
    match command {
        EndpointsCommand::List { fed } => {
            let list = client.endpoints(&ctx.fed(fed)?)?;
            ctx.emit(&list, || print_endpoints(&list));
        }
        EndpointsCommand::Watch { fed, interval, count } => {
            if !(interval.is_finite() && interval > 0.0) {
                return Err(CliError::Validation("--interval must be positive".into()));
            }
            let fed = ctx.fed(fed)?;
            let mut n = 0;
            loop {
                let list = client.endpoints(&fed)?;
                if ctx.json {
                    println!("{}", serde_json::to_string(&list).expect("endpoints serialize"));
                } else {
                    println!("-- {}", chrono::Utc::now().format("%H:%M:%S"));
                    print_endpoints(&list);
                }
                let _ = std::io::stdout().flush();
                n += 1;
                if count.is_some_and(|c| n >= c) {
                    break;
                }
                std::thread::sleep(Duration::from_secs_f64(interval));
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ agent

fn load_data_spec(path: &Path) -> CliResult<DataLoaderSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut spec: DataLoaderSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        let dir = std::fs::canonicalize(dir).map_err(|e| CliError::io(dir, e))?;
        spec.resolve_paths(&dir);
    }
    Ok(spec)
}

fn agent(ctx: &Ctx, command: AgentCommand) -> CliResult<()> {
    match command {
        AgentCommand::Register { name, device, fed, config, data } => {
            let client = ctx.authed()?;
            let fed = ctx.fed(fed)?;
            let data = data.map(|p| load_data_spec(&p)).transpose()?;
            let mut existing = if config.exists() {
                Some(AgentConfig::load(&config)?)
            } else {
                None
            };
            let device = match device {
                Device::Cpu => DeviceType::Cpu,
                Device::Gpu => DeviceType::Gpu,
            };
            let resp = client.register_endpoint(&fed, &name, device)?;
            let mut cfg = AgentConfig::new(&ctx.server, &resp.endpoint.endpoint_id, &resp.agent_token);
            if let Some(old) = existing.take() {
                cfg.data = old.data;
                cfg.local_privacy = old.local_privacy;
                cfg.heartbeat_interval_s = old.heartbeat_interval_s;
                cfg.poll_wait_s = old.poll_wait_s;
                cfg.throttle_s = old.throttle_s;
            }
            cfg.federation_id = Some(fed);
            cfg.name = Some(name);
            if data.is_some() {
                cfg.data = data;
            }
            cfg.save(&config)?;
            let shown = serde_json::json!({"endpoint": resp.endpoint, "config": config});
            ctx.emit(&shown, || {
                println!(
                    "registered endpoint {} ({}); agent config written to {}",
                    resp.endpoint.endpoint_id,
                    resp.endpoint.name,
                    config.display()
                )
            });
            Ok(())
        }
        AgentCommand::Run { config } => {
            let cfg = AgentConfig::load(&config)?;
            let agent = Agent::from_config(cfg)?;
            let stop = agent.stop_handle();
            std::thread::spawn(move || {
                if let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() {
                    rt.block_on(async {
                        let _ = tokio::signal::ctrl_c().await;
                    });
                    stop.stop();
                }
            });
            let summary = agent.run()?;
            eprintln!(
                "agent stopped: {} tasks completed, {} results dropped",
                summary.tasks_completed, summary.results_dropped
            );
            Ok(())
        }
    }
}

// ------------------------------------------------------------------- data

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes shard k of (pixels, labels) under `out/shard-k` with a data.json.
fn write_shards(out: &Path, pixels: &[u8], labels: &[u8], side: (usize, usize), shards: usize) -> CliResult<Vec<PathBuf>> {
    let row = side.0 * side.1;
    let mut specs = Vec::new();
    for (k, range) in equal_partition(labels.len(), shards).into_iter().enumerate() {
        let dir = out.join(format!("shard-{}", k + 1));
        write_file(
            &dir.join("images.idx"),
            &encode_images(side.0, side.1, &pixels[range.start * row..range.end * row]),
        )?;
        write_file(&dir.join("labels.idx"), &encode_labels(&labels[range.clone()]))?;
        let spec = DataLoaderSpec::mnist_idx("images.idx", "labels.idx");
        let spec_path = dir.join("data.json");
        write_file(&spec_path, serde_json::to_string_pretty(&spec).expect("spec serializes").as_bytes())?;
        specs.push(spec_path);
    }
    Ok(specs)
}

fn data(ctx: &Ctx, command: DataCommand) -> CliResult<()> {
    match command {
        DataCommand::Synth { count, seed, out, shards } => {
            if count == 0 {
                return Err(CliError::Validation("--count must be positive".into()));
            }
            if shards == Some(0) {
                return Err(CliError::Validation("--shards must be positive".into()));
            }
            let (pixels, labels) = synthetic_digits(count, seed);
            write_file(&out.join("train-images.idx"), &encode_images(28, 28, &pixels))?;
            write_file(&out.join("train-labels.idx"), &encode_labels(&labels))?;
            let specs = match shards {
                Some(k) => write_shards(&out, &pixels, &labels, (28, 28), k)?,
                None => Vec::new(),
            };
            ctx.emit(&serde_json::json!({"out": out, "count": count, "shards": specs}), || {
                println!("wrote {count} samples to {}", out.display());
                for s in &specs {
                    println!("  {}", s.display());
                }
            });
        }
        DataCommand::Partition { images, labels, shards, out } => {
            if shards == 0 {
                return Err(CliError::Validation("--shards must be positive".into()));
            }
            let img_bytes = std::fs::read(&images).map_err(|e| CliError::io(&images, e))?;
            let lbl_bytes = std::fs::read(&labels).map_err(|e| CliError::io(&labels, e))?;
            let imgs = parse_images(&img_bytes).map_err(|e| CliError::io(&images, e))?;
            let lbls = parse_labels(&lbl_bytes).map_err(|e| CliError::io(&labels, e))?;
            if imgs.count != lbls.len() {
                return Err(CliError::Io(format!(
                    "{} images but {} labels",
                    imgs.count,
                    lbls.len()
                )));
            }
            let specs = write_shards(&out, &imgs.pixels, &lbls, (imgs.rows, imgs.cols), shards)?;
            ctx.emit(&serde_json::json!({"shards": specs}), || {
                for s in &specs {
                    println!("{}", s.display());
                }
            });
        }
    }
    Ok(())
}
