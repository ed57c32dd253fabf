use clap::Parser;
use tempo_cli::commands::{run, Cli};
use tempo_cli::CliError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            fail(CliError::usage(first))
        }
    };
    if let Err(e) = run(cli) {
        fail(e)
    }
}

fn fail(e: CliError) -> ! {
    eprintln!("{}", e.to_json_line());
    std::process::exit(e.kind.exit_code())
}
