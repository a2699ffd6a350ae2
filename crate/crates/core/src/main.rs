use std::collections::BTreeMap;
use std::process::ExitCode;

use nsroot::cli::{self, Context, TOOL_FAILURE};

fn main() -> ExitCode {
    let argv: Vec<String> = match std::env::args_os().map(|a| a.into_string()).collect() {
        Ok(argv) => argv,
        Err(bad) => {
            eprintln!("nsroot: argument is not valid UTF-8: {bad:?}");
            return ExitCode::from(TOOL_FAILURE as u8);
        }
    };
    // Variables that are not valid UTF-8 cannot be represented and are dropped.
    let env: BTreeMap<String, String> = std::env::vars_os()
        .filter_map(|(k, v)| Some((k.into_string().ok()?, v.into_string().ok()?)))
        .collect();
    let cwd = std::env::current_dir().unwrap_or_else(|_| "/".into());

    let code = cli::run(
        argv,
        Context {
            env,
            cwd,
            stdout: &mut std::io::stdout(),
            stderr: &mut std::io::stderr(),
        },
    );
    ExitCode::from(code.clamp(0, 255) as u8)
}
