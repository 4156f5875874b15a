use clap::Parser;
use trinet_cli::{run, Category, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            // argument errors are configuration errors
            eprintln!("error[{}]: {}", Category::Config.name(), e.to_string().trim_end().replace('\n', " "));
            std::process::exit(Category::Config.exit_code());
        }
        Err(e) => e.exit(),
    };
    if let Err(e) = run(&cli) {
        eprintln!("{e}");
        std::process::exit(e.category.exit_code());
    }
}
