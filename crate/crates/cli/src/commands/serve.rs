use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use sgxp_review::ReviewStore;

use crate::error::{invalid, runtime, CliResult};

/// Serves a review store over HTTP until interrupted.
#[derive(clap::Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// A `seg-predict` output directory.
    #[arg(long)]
    pub store: PathBuf,
}

pub fn run(args: &ServeArgs) -> CliResult<()> {
    if !args.store.is_dir() {
        return Err(invalid(format!("store directory {} does not exist", args.store.display())));
    }
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| runtime(e.to_string()))?;
    let addr = SocketAddr::new(args.host, args.port);
    rt.block_on(sgxp_review::serve(addr, ReviewStore::open(&args.store)))
        .map_err(|e| runtime(format!("serve on {addr}: {e}")))
}
