use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use trialmatch_core::assessment::PriceSheet;
use trialmatch_core::corpus::{load_corpus, CorpusFormat};
use trialmatch_service::{DefaultBackends, Service, ServiceConfig};

use crate::{criteria_from, parse_format, EmbeddingArgs};

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, env = "TRIALMATCH_DATA_DIR")]
    data_dir: PathBuf,
    /// 0 picks a free port; the bound address is printed on startup.
    #[arg(long, env = "TRIALMATCH_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "TRIALMATCH_BIND", default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    /// Corpus to match against; runs are refused without one.
    #[arg(long, env = "TRIALMATCH_CORPUS")]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "jsonl", value_parser = parse_format)]
    format: CorpusFormat,
    #[arg(long, env = "TRIALMATCH_CRITERIA")]
    criteria: Option<PathBuf>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long, default_value_t = 128_000)]
    context_limit: usize,
    #[command(flatten)]
    embedding: EmbeddingArgs,
}

pub fn run(args: ServeArgs) -> Result<()> {
    let criteria = criteria_from(args.criteria.as_deref())?;
    let corpus = match &args.corpus {
        Some(p) => Some(load_corpus(p, args.format).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut backends = DefaultBackends::new(criteria.clone());
    backends.remote_context_limit = args.context_limit;
    if let Some(p) = &args.prices {
        backends.prices = PriceSheet::load(p).map_err(anyhow::Error::msg)?;
    }
    let mut config = ServiceConfig::new(&args.data_dir, corpus, criteria);
    config.backends = Arc::new(backends);
    config.embedder = Arc::from(args.embedding.embedder()?);
    config.index_config = args.embedding.index_config();
    config.workers = args.workers.max(1);
    let service = Service::open(config).with_context(|| format!("opening data directory {}", args.data_dir.display()))?;

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(SocketAddr::new(args.bind, args.port))
            .await
            .with_context(|| format!("binding {}:{}", args.bind, args.port))?;
        println!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        service.serve(listener, shutdown).await?;
        Ok(())
    })
}
