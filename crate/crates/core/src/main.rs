use std::io;
use std::process::ExitCode;

use tqn::cli::{run, SEED_ENV};

fn main() -> ExitCode {
    let env_seed = std::env::var(SEED_ENV).ok();
    let code = run(
        std::env::args_os(),
        env_seed.as_deref(),
        &mut io::stdout(),
        &mut io::stderr(),
    );
    ExitCode::from(code as u8)
}
