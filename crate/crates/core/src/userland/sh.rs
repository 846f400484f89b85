//! `sh [script]`: a minimal shell.
//!
//! Reads lines from the console (or a script file), runs `/<cmd>` in a
//! forked child and waits for it unless the line ends in `&`. `cd` and
//! `exit` are builtins; `#` starts a comment. A script stops at the first
//! command that fails and the shell exits 1.

use crate::kernel::Cpu;
use crate::mem::Fault;
use crate::proc::*;

use super::rt::{self, R, V0};

const IN: usize = V0;
const SCRIPT: usize = V0 + 1;
const LBLEN: usize = V0 + 2;
const FG: usize = V0 + 3;
const BG: usize = V0 + 4;

const LINEBUF: u64 = rt::HEAP;
const LINECAP: u64 = 0x800;
const CMD: u64 = rt::HEAP + 0x800;
const STATUS: u64 = rt::HEAP + 0xC00;

const PROMPT: u64 = 2;
const FILL: u64 = 3;
const LINE: u64 = 4;

/// The command line saved across fork: (argv, background).
fn parse(line: &str) -> (Vec<String>, bool) {
    let line = line.split('#').next().unwrap_or("");
    let mut words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
    let mut bg = false;
    if let Some(last) = words.last_mut() {
        if last == "&" {
            words.pop();
            bg = true;
        } else if let Some(s) = last.strip_suffix('&') {
            *last = s.to_string();
            bg = true;
        }
    }
    (words, bg)
}

fn saved_cmd(cpu: &Cpu) -> Result<(Vec<String>, bool), Fault> {
    Ok(parse(&cpu.ld_str(CMD, 0x3FF)?))
}

fn fail(cpu: &mut Cpu, msg: &str) -> R {
    if rt::var(cpu, SCRIPT)? != 0 {
        cpu.goto(20);
    } else {
        cpu.goto(PROMPT);
    }
    rt::print(cpu, 2, msg)
}

pub fn run(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            match rt::arg(cpu, 1)? {
                Some(path) => {
                    rt::set(cpu, SCRIPT, 1)?;
                    cpu.goto(1);
                    rt::open(cpu, &path, O_RDONLY)
                }
                None => rt::jump(cpu, PROMPT),
            }
        }
        1 => {
            let fd = cpu.ret();
            if fd < 0 {
                cpu.goto(20);
                return rt::print(cpu, 2, "sh: cannot open script\n");
            }
            rt::set(cpu, IN, fd as u64)?;
            rt::jump(cpu, FILL)
        }
        PROMPT => {
            cpu.goto(FILL);
            if rt::var(cpu, SCRIPT)? != 0 || has_line(cpu)? {
                return rt::jump(cpu, FILL);
            }
            rt::print(cpu, 1, "$ ")
        }
        FILL => {
            if has_line(cpu)? {
                return rt::jump(cpu, LINE);
            }
            let len = rt::var(cpu, LBLEN)?;
            cpu.goto(5);
            Ok(cpu.sys(SYS_READ, &[rt::var(cpu, IN)?, LINEBUF + len, LINECAP - len]))
        }
        5 => {
            let n = cpu.ret();
            let len = rt::var(cpu, LBLEN)?;
            if n <= 0 {
                if len == 0 {
                    return rt::exit(cpu, 0);
                }
                cpu.st(LINEBUF + len, b"\n")?;
                rt::set(cpu, LBLEN, len + 1)?;
            } else {
                rt::set(cpu, LBLEN, len + n as u64)?;
            }
            rt::jump(cpu, FILL)
        }
        LINE => {
            let len = rt::var(cpu, LBLEN)?;
            let buf = cpu.ld(LINEBUF, len as usize)?;
            let nl = buf.iter().position(|&c| c == b'\n').unwrap_or(buf.len().saturating_sub(1));
            let line = String::from_utf8_lossy(&buf[..nl]).into_owned();
            let rest = &buf[nl + 1..];
            cpu.st(LINEBUF, rest)?;
            rt::set(cpu, LBLEN, rest.len() as u64)?;
            let (words, _) = parse(&line);
            match words.first().map(String::as_str) {
                None => rt::jump(cpu, PROMPT),
                Some("cd") => {
                    let dir = words.get(1).cloned().unwrap_or_else(|| "/".into());
                    cpu.goto(6);
                    rt::path_call(cpu, SYS_CHDIR, &dir, &[])
                }
                Some("exit") => {
                    let code = words.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
                    rt::exit(cpu, code)
                }
                Some(_) => {
                    rt::put_str(cpu, CMD, &line[..line.len().min(0x3FF)])?;
                    cpu.goto(7);
                    Ok(cpu.sys(SYS_FORK, &[]))
                }
            }
        }
        6 => {
            if cpu.ret() < 0 {
                return fail(cpu, "sh: cd: no such directory\n");
            }
            rt::jump(cpu, PROMPT)
        }
        7 => {
            let pid = cpu.ret();
            let (words, bg) = saved_cmd(cpu)?;
            if pid == 0 {
                let cmd = &words[0];
                let path = if cmd.starts_with('/') { cmd.clone() } else { format!("/{cmd}") };
                cpu.goto(8);
                return rt::exec(cpu, &path, &words);
            }
            if pid < 0 {
                return fail(cpu, "sh: fork failed\n");
            }
            if bg {
                rt::set(cpu, BG, rt::var(cpu, BG)? + 1)?;
                cpu.goto(PROMPT);
                return rt::print(cpu, 1, &format!("[{pid}]\n"));
            }
            rt::set(cpu, FG, pid as u64)?;
            rt::jump(cpu, 9)
        }
        8 => {
            // Only reached when exec failed.
            let (words, _) = saved_cmd(cpu)?;
            cpu.goto(10);
            rt::print(cpu, 2, &format!("sh: {}: not found\n", words[0]))
        }
        10 => rt::exit(cpu, 127),
        9 => {
            cpu.goto(11);
            Ok(cpu.sys(SYS_WAIT, &[STATUS]))
        }
        11 => {
            let r = cpu.ret();
            if r < 0 {
                return rt::jump(cpu, PROMPT);
            }
            if r as u64 != rt::var(cpu, FG)? {
                return rt::jump(cpu, 9);
            }
            let status = cpu.ld32(STATUS)? as i32;
            if status != 0 && rt::var(cpu, SCRIPT)? != 0 {
                return rt::jump(cpu, 20);
            }
            rt::jump(cpu, PROMPT)
        }
        20 => rt::exit(cpu, 1),
        _ => rt::exit(cpu, 99),
    }
}

fn has_line(cpu: &Cpu) -> Result<bool, Fault> {
    let len = rt::var(cpu, LBLEN)?;
    Ok(cpu.ld(LINEBUF, len as usize)?.contains(&b'\n'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_lines() {
        assert_eq!(parse("ls / # list"), (vec!["ls".to_string(), "/".to_string()], false));
        assert_eq!(parse("tone 440 1 &"), (vec!["tone".into(), "440".into(), "1".into()], true));
        assert_eq!(parse("sysmon&"), (vec!["sysmon".into()], true));
        assert_eq!(parse("   # only a comment").0.len(), 0);
    }
}
