use clap::Parser;

fn main() {
    let cli = nrc_cli::Cli::parse();
    if let Err(e) = nrc_cli::execute(&cli) {
        eprintln!("error: {e}");
        if let nrc_cli::CliError::BadInputs { failures } = &e {
            for f in failures {
                eprintln!("  {f}");
            }
        }
        std::process::exit(e.exit_code());
    }
}
