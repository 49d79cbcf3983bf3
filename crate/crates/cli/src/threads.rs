//! Worker-pool sizing from `LOKI_THREADS`.

use crate::failure::usage;

pub const ENV: &str = "LOKI_THREADS";

pub fn configure() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{ENV} must be a positive integer, got {raw:?}")))?;
    install(n)
}

#[cfg(feature = "parallel")]
fn install(n: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    log::debug!("worker pool: {n} threads");
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn install(n: usize) -> anyhow::Result<()> {
    log::warn!("{ENV}={n} ignored: built without the `parallel` feature");
    Ok(())
}

pub fn current() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
