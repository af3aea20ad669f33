use clap::Parser;

use dimlab_cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(&cli.command, cli.threads) {
        Ok(m) => {
            let dir = m.output_paths.first().and_then(|a| a.path.parent().map(|p| p.display().to_string()));
            eprintln!("{} finished in {:.1}s -> {}", m.command, m.wall_time, dir.unwrap_or_default());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
