use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    // KINALIGN_LOG sets verbosity (error, warn, info, debug).
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("KINALIGN_LOG", "warn"))
        .format(|buf, record| {
            let rec = serde_json::json!({
                "level": record.level().to_string().to_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{rec}")
        })
        .init();
    kinalign_cli::main_with_args(std::env::args_os())
}
