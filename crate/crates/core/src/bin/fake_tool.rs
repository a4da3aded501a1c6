use std::io::{self, BufReader};
use std::process::ExitCode;

use pentrail_core::sim::{run_fake_tool, FakeToolArgs};

fn main() -> ExitCode {
    let args = match FakeToolArgs::parse(std::env::args().skip(1)) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("pentrail-fake-tool: {e}");
            return ExitCode::from(2);
        }
    };
    let mut input = BufReader::new(io::stdin());
    let code = run_fake_tool(&args, &mut input, &mut io::stdout());
    ExitCode::from(code.clamp(0, 255) as u8)
}
