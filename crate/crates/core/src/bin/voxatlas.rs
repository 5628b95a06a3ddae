use clap::Parser;
use voxatlas::cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(out) => {
            println!("{}", out.summary.trim_end());
            if let Some(m) = out.manifest {
                println!("manifest: {}", m.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
