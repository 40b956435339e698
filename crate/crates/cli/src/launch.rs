//! Multi-process runs: the launcher re-executes this binary once per
//! worker with the rank, size, and host list in the environment.

use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, ExitStatus};

use anyhow::{Context, Result};
use corticarc_core::transport::{ENV_HOSTS, ENV_RANK, ENV_SIZE};

/// True when this process was started as one worker of a group.
pub fn is_worker() -> bool {
    std::env::var_os(ENV_RANK).is_some()
}

/// Loopback addresses with ports free at the time of the call.
fn free_loopback_hosts(n: usize) -> Result<Vec<String>> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<_, _>>()
        .context("reserving loopback ports")?;
    listeners
        .iter()
        .map(|l| Ok(l.local_addr()?.to_string()))
        .collect()
}

/// Starts `workers` copies of `corticarc run --config <config>` and waits
/// for all of them. Returns the exit statuses by rank.
pub fn run_group(config: &Path, workers: usize) -> Result<Vec<ExitStatus>> {
    let exe = std::env::current_exe().context("locating the corticarc binary")?;
    let hosts = free_loopback_hosts(workers)?.join(",");
    let mut children = Vec::with_capacity(workers);
    for rank in 0..workers {
        let child = Command::new(&exe)
            .arg("run")
            .arg("--config")
            .arg(config)
            .env(ENV_RANK, rank.to_string())
            .env(ENV_SIZE, workers.to_string())
            .env(ENV_HOSTS, &hosts)
            .spawn()
            .with_context(|| format!("starting worker {rank}"))?;
        children.push(child);
    }
    children
        .into_iter()
        .enumerate()
        .map(|(rank, mut c)| c.wait().with_context(|| format!("waiting for worker {rank}")))
        .collect()
}
