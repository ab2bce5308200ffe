use clap::Parser;
use krylov_eb_cli::{exit_status, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = run(&cli);
    if let Ok(files) = &result {
        for f in files {
            println!("{}", f.display());
        }
    }
    std::process::exit(exit_status(&result));
}
