use clap::error::ErrorKind;
use clap::Parser;

use specdec_cli::{run, Cli, CliError};

// Exit codes: 0 success/pass, 1 usage error, 2 data error, 3 certification
// failure.
fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::CertifyFailed) => {
            std::process::exit(3);
        }
    }
}
