use std::process::ExitCode;

fn main() -> ExitCode {
    match nsbiot::scenarios::cli_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
