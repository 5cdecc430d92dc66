use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = hetfl::cli::run_cli(std::env::args_os(), &mut out);
    let _ = out.flush();
    std::process::exit(code);
}
