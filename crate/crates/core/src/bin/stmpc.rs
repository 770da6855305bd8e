fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("STMPC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("STMPC_THREADS ignored: {e}");
        }
    }
    std::process::exit(stmpc::cli::main_with_args(std::env::args_os()));
}
