use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use regex::Regex;

use super::{FakeTool, ScenarioPack, UNMATCHED};
use crate::aci::ToolMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FakeToolArgs {
    pub pack_dir: PathBuf,
    pub tool: String,
    pub argv: Vec<String>,
}

impl FakeToolArgs {
    /// `--pack <dir> --tool <name> [--] args...`
    pub fn parse(args: impl IntoIterator<Item = String>) -> Result<Self, String> {
        let mut it = args.into_iter();
        let (mut pack, mut tool) = (None, None);
        let mut argv = Vec::new();
        while let Some(a) = it.next() {
            match a.as_str() {
                "--pack" => pack = it.next(),
                "--tool" => tool = it.next(),
                "--" => {
                    argv.extend(it.by_ref());
                    break;
                }
                _ => argv.push(a),
            }
        }
        Ok(Self {
            pack_dir: pack.ok_or("missing --pack")?.into(),
            tool: tool.ok_or("missing --tool")?,
            argv,
        })
    }
}

fn output_of(pack: &ScenarioPack, inline: &str, file: &Option<String>) -> String {
    match file {
        Some(f) => std::fs::read_to_string(pack.dir.join(f)).unwrap_or_else(|e| format!("fake tool: {f}: {e}\n")),
        None => inline.to_string(),
    }
}

fn with_newline(mut s: String) -> String {
    if !s.is_empty() && !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn matches(pattern: &str, text: &str) -> bool {
    Regex::new(pattern).is_ok_and(|re| re.is_match(text))
}

/// Serves one invocation of a pack's fake tool. Returns the exit code.
pub fn run_fake_tool(args: &FakeToolArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> i32 {
    let pack = match ScenarioPack::load(&args.pack_dir) {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(out, "fake tool: {e}");
            return 2;
        }
    };
    let Some(tool) = pack.tool(&args.tool) else {
        let _ = writeln!(out, "{UNMATCHED}: no tool {} in pack {}", args.tool, pack.name());
        return 1;
    };
    match tool.mode {
        ToolMode::Static => serve_static(&pack, tool, &args.argv, out),
        ToolMode::Interactive => serve_interactive(&pack, tool, input, out),
    }
}

fn serve_static(pack: &ScenarioPack, tool: &FakeTool, argv: &[String], out: &mut dyn Write) -> i32 {
    let joined = argv.join(" ");
    let Some(case) = tool.cases.iter().find(|c| matches(&c.argv, &joined)) else {
        let _ = writeln!(out, "{UNMATCHED}: {} {joined}", tool.name);
        return 1;
    };
    thread::sleep(Duration::from_millis(case.delay_ms));
    let _ = out.write_all(with_newline(output_of(pack, &case.output, &case.output_file)).as_bytes());
    let _ = out.flush();
    case.exit_code
}

fn serve_interactive(pack: &ScenarioPack, tool: &FakeTool, input: &mut dyn BufRead, out: &mut dyn Write) -> i32 {
    let mut prompt = tool.prompt.clone();
    let _ = write!(out, "{}{prompt}", with_newline(tool.banner.clone()));
    let _ = out.flush();
    let mut line = String::new();
    loop {
        line.clear();
        match input.read_line(&mut line) {
            Ok(0) | Err(_) => return 0,
            Ok(_) => {}
        }
        let sent = line.trim_end_matches(['\r', '\n']);
        match tool.lines.iter().find(|c| matches(&c.input, sent)) {
            Some(case) => {
                thread::sleep(Duration::from_millis(case.delay_ms));
                let _ = out.write_all(with_newline(output_of(pack, &case.output, &case.output_file)).as_bytes());
                if case.exit {
                    let _ = out.flush();
                    return 0;
                }
                if let Some(p) = &case.prompt {
                    prompt = p.clone();
                }
            }
            None => {
                let _ = writeln!(out, "{UNMATCHED}: {sent}");
            }
        }
        let _ = write!(out, "{prompt}");
        let _ = out.flush();
    }
}
