use std::process::ExitCode;

use deskmt_cli::commands::{parse_from, run};
use deskmt_cli::error::Category;
use deskmt_cli::logging;

fn main() -> ExitCode {
    let cli = match parse_from(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Category::Usage.exit_code() } else { 0 };
            e.print().ok();
            return ExitCode::from(code as u8);
        }
    };
    logging::init(&cli.log_level);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deskmt: {e}");
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
