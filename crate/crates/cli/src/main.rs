use clap::Parser;
use gridprompt_cli::commands::{run, Cli};

fn fail(code: &str, message: &str, status: i32) -> ! {
    let line = serde_json::json!({ "code": code, "message": message });
    eprintln!("error: {line}");
    std::process::exit(status);
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // --help and --version land here too and print as usual.
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            fail("usage", first, 2)
        }
    };
    if let Err(e) = run(cli) {
        fail(e.code(), &e.to_string(), 1);
    }
}
