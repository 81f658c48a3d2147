use clap::Parser;

fn main() {
    let cli = tripcorr_cli::Cli::parse();
    let result = tripcorr_cli::run(&cli, &mut std::io::stdout().lock());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(tripcorr_cli::exit_code(&result));
}
