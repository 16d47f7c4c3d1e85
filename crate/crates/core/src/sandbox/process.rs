use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{ExecResult, KILLED_EXIT_CODE};

/// Runs `cmd` to completion or until `timeout`, capturing all output.
pub fn run_with_timeout(mut cmd: Command, stdin: Option<&[u8]>, timeout: Duration) -> std::io::Result<ExecResult> {
    let start = Instant::now();
    cmd.stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let mut child = cmd.spawn()?;
    if let (Some(bytes), Some(mut pipe)) = (stdin, child.stdin.take()) {
        pipe.write_all(bytes)?;
    }
    let mut out_pipe = child.stdout.take().expect("piped stdout");
    let mut err_pipe = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            timed_out = true;
            break None;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
    let exit_code = match status {
        Some(s) => s.code().unwrap_or(KILLED_EXIT_CODE),
        None => KILLED_EXIT_CODE,
    };
    Ok(ExecResult { exit_code, stdout, stderr, duration: start.elapsed().as_secs_f64(), timed_out })
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    #[test]
    fn captures_and_times_out() {
        let mut c = Command::new("sh");
        c.args(["-c", "echo hi; echo err >&2; exit 3"]);
        let r = run_with_timeout(c, None, Duration::from_secs(10)).unwrap();
        assert_eq!((r.exit_code, r.stdout.as_str(), r.stderr.as_str(), r.timed_out), (3, "hi\n", "err\n", false));

        let mut c = Command::new("sleep");
        c.arg("10");
        let r = run_with_timeout(c, None, Duration::from_millis(200)).unwrap();
        assert!(r.timed_out);
        assert_eq!(r.exit_code, KILLED_EXIT_CODE);
        assert!(r.duration < 5.0);
    }

    #[test]
    fn feeds_stdin() {
        let r = run_with_timeout(Command::new("cat"), Some(b"abc"), Duration::from_secs(10)).unwrap();
        assert_eq!(r.stdout, "abc");
    }
}
