use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand, ValueEnum};

use vfpga_core::bench::micro::{self, PCIE_SWEEP};
use vfpga_core::bench::{self, Attack, ConfigError, RunError, ScenarioConfig, UnixConnector};
use vfpga_core::bitstream::{encode_bitfile_with_image, BitfileTarget, KernelDescriptor, KernelKind};
use vfpga_core::device::DeviceConfig;
use vfpga_core::vmm::server::VmmServer;
use vfpga_core::vmm::{replay, ReplayError, Vmm};

/// Failure categories, one exit code each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Other = 1,
    Config = 2,
    Deadlock = 3,
    AttackFailed = 4,
    ReplayMismatch = 5,
}

struct Failure {
    category: Category,
    message: String,
}

impl Failure {
    fn new(category: Category, message: impl fmt::Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new(Category::Config, e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let category = match e {
            RunError::Config(_) | RunError::ConfigMismatch { .. } => Category::Config,
            RunError::DeadlockDetected { .. } => Category::Deadlock,
            _ => Category::Other,
        };
        Self::new(category, e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Self::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Micro {
    Pcie,
    Membw,
    Freq,
}

#[derive(Parser)]
#[command(name = "vfpga", version, about = "Shared-FPGA virtualization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its overhead breakdown.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Write the broker trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        guard: Option<Switch>,
        /// Drive a broker started with `serve` instead of an in-process one.
        #[arg(long, value_name = "SOCKET")]
        connect: Option<PathBuf>,
    },
    /// Host a broker on a Unix socket until killed.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        socket: PathBuf,
        #[arg(long, value_enum)]
        guard: Option<Switch>,
    },
    /// Measure one device characteristic.
    Microbench {
        #[arg(value_enum)]
        which: Micro,
        /// Scenario file whose device section is used; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Items streamed by the membw kernel.
        #[arg(long, default_value_t = 1 << 20)]
        items: u64,
    },
    /// Run an isolation attack between two tenants.
    Attack {
        /// cross_reprogram, cross_read, hw_corrupt or all.
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to one guard setting; both are run otherwise.
        #[arg(long, value_enum)]
        guard: Option<Switch>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build a partial bitfile for one region.
    Compile {
        /// vec_add, matmul, sobel or rogue_writer.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        cycles_per_item: Option<u32>,
        #[arg(long, default_value_t = DeviceConfig::default().device_id)]
        device_id: u32,
        #[arg(long, default_value_t = DeviceConfig::default().shell_id)]
        shell_id: u32,
        #[arg(long, default_value_t = 0)]
        prr: u8,
        /// Configuration image size; accepts K/M/G suffixes.
        #[arg(long, default_value = "1M")]
        image_size: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a trace and compare memory digest and final time.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum)]
        guard: Option<Switch>,
    },
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Failure::new(Category::Other, format!("{}: {e}", path.display())))
}

fn read_in(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::new(Category::Other, format!("{}: {e}", path.display())))
}

fn scenario(path: &Path, seed: Option<u64>, guard: Option<Switch>) -> Result<ScenarioConfig> {
    let mut c = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    if let Some(g) = guard {
        c.device.range_guard = g.on();
    }
    Ok(c)
}

fn platform(path: Option<&Path>, guard: Option<Switch>) -> Result<ScenarioConfig> {
    let mut c = match path {
        Some(p) => ScenarioConfig::load_platform(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(g) = guard {
        c.device.range_guard = g.on();
    }
    Ok(c)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            trace,
            report,
            seed,
            guard,
            connect,
        } => {
            let c = scenario(&config, seed, guard)?;
            let out = match connect {
                Some(sock) => bench::run_with(&c, &mut UnixConnector(sock))?,
                None => bench::run(&c)?,
            };
            if let Some(t) = trace {
                write_out(&t, &out.trace)?;
            }
            let text = out.report.to_toml();
            match report {
                Some(r) => write_out(&r, &text)?,
                None => print!("{text}"),
            }
            let failed: usize = out.report.vm.iter().map(|v| v.errors.len()).sum();
            if failed > 0 {
                eprintln!("{failed} script operation(s) were refused; see the report");
            }
        }
        Command::Serve {
            config,
            socket,
            guard,
        } => {
            let c = platform(Some(&config), guard)?;
            let vmm = Vmm::new(c.device, c.vmm).map_err(|e| Failure::new(Category::Config, e))?;
            let server = VmmServer::bind(Arc::new(Mutex::new(vmm)), &socket)
                .map_err(|e| Failure::new(Category::Other, format!("{}: {e}", socket.display())))?;
            eprintln!("serving on {}", socket.display());
            server.wait();
        }
        Command::Microbench {
            which,
            config,
            items,
        } => {
            let d = platform(config.as_deref(), None)?.device;
            let cfg = |e| Failure::new(Category::Config, e);
            match which {
                Micro::Pcie => {
                    println!("configured_bytes_per_sec = {:.6e}", d.cost.dma_bandwidth);
                    for p in micro::pcie(&d, &PCIE_SWEEP).map_err(cfg)? {
                        println!(
                            "bytes = {:>10}  seconds = {:.9}  bytes_per_sec = {:.6e}  fraction = {:.6}",
                            p.bytes,
                            p.seconds,
                            p.rate,
                            p.rate / d.cost.dma_bandwidth
                        );
                    }
                }
                Micro::Membw => {
                    let rate = micro::membw(&d, items).map_err(cfg)?;
                    println!("items = {items}");
                    println!("bytes_per_sec = {rate:.6e}");
                }
                Micro::Freq => {
                    for (prr, hz) in micro::freq(&d).map_err(cfg)?.iter().enumerate() {
                        println!("prr = {prr}  mhz = {:.3}", hz / 1e6);
                    }
                }
            }
        }
        Command::Attack {
            scenario,
            config,
            guard,
            report,
        } => {
            let attacks = if scenario == "all" {
                Attack::ALL.to_vec()
            } else {
                vec![Attack::from_name(&scenario).ok_or_else(|| {
                    Failure::new(Category::Config, format!("unknown attack {scenario:?}"))
                })?]
            };
            let guards = match guard {
                Some(g) => vec![g.on()],
                None => vec![false, true],
            };
            let d = platform(config.as_deref(), None)?.device;
            let mut text = String::new();
            let mut all_passed = true;
            for a in attacks {
                for &g in &guards {
                    let v = bench::attack(&d, a, g).map_err(|e| Failure::new(Category::Config, e))?;
                    all_passed &= v.passed;
                    text.push_str(&format!(
                        "attack = {}  guard = {}  verdict = {}\n  expected: {}\n  observed: {}\n",
                        a.name(),
                        if g { "on" } else { "off" },
                        if v.passed { "pass" } else { "FAIL" },
                        v.expected,
                        v.observed
                    ));
                }
            }
            match report {
                Some(r) => write_out(&r, &text)?,
                None => print!("{text}"),
            }
            if !all_passed {
                return Err(Failure::new(Category::AttackFailed, "an attack did not behave as expected"));
            }
        }
        Command::Compile {
            kind,
            cycles_per_item,
            device_id,
            shell_id,
            prr,
            image_size,
            out,
        } => {
            let k = KernelKind::from_name(&kind)
                .ok_or_else(|| Failure::new(Category::Config, format!("unknown kernel kind {kind:?}")))?;
            let image = bench::script::parse_size(&image_size)
                .and_then(|v| usize::try_from(v).ok())
                .ok_or_else(|| Failure::new(Category::Config, format!("bad image size {image_size:?}")))?;
            let mut d = KernelDescriptor::new(k);
            if let Some(c) = cycles_per_item {
                d = d.with_cycles_per_item(c);
            }
            let bytes = encode_bitfile_with_image(&d, BitfileTarget::new(device_id, shell_id, prr), image)
                .map_err(|e| Failure::new(Category::Config, e))?;
            fs::write(&out, &bytes)
                .map_err(|e| Failure::new(Category::Other, format!("{}: {e}", out.display())))?;
            eprintln!("wrote {} bytes to {}", bytes.len(), out.display());
        }
        Command::Replay {
            config,
            trace,
            guard,
        } => {
            let c = platform(Some(&config), guard)?;
            let text = read_in(&trace)?;
            let r = replay(&text, c.device, c.vmm).map_err(|e| match e {
                ReplayError::Config(_) | ReplayError::ConfigMismatch { .. } => {
                    Failure::new(Category::Config, e)
                }
                ReplayError::Diverged { .. } => Failure::new(Category::ReplayMismatch, e),
                _ => Failure::new(Category::Other, e),
            })?;
            println!("digest = \"{}\"", r.digest);
            println!("expected_digest = \"{}\"", r.expected_digest);
            println!("final_time_ns = {}", r.final_time);
            println!("expected_time_ns = {}", r.expected_time);
            println!("trace_identical = {}", r.trace_identical);
            if !r.matches() {
                return Err(Failure::new(Category::ReplayMismatch, "replay does not reproduce the trace"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.category as u8)
        }
    }
}
