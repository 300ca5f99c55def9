//! Client side of `concept-runner/1`: drives an external runner process.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::ltns;
use crate::tensor::Tensor;

use super::protocol::{load_reply_tensor, Handshake, Reply, Request, RequestKind, PROTOCOL};
use super::{check_layers, GradOutcome, LayerActivations, ModelRunner, RunnerError, RunnerInfo};

/// Environment variable holding the runner command line.
pub const RUNNER_CMD_ENV: &str = "CONCEPT_RUNNER_CMD";

const STDERR_KEEP: usize = 64 * 1024;

#[derive(Clone, Debug)]
pub struct SubprocessOptions {
    pub handshake_timeout: Duration,
    /// Where request images and replies are exchanged. A private directory
    /// under the system temp dir is used (and removed on drop) when unset.
    pub work_dir: Option<PathBuf>,
}

impl Default for SubprocessOptions {
    fn default() -> Self {
        Self { handshake_timeout: Duration::from_secs(30), work_dir: None }
    }
}

pub struct SubprocessRunner {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
    info: RunnerInfo,
    work_dir: PathBuf,
    owns_work_dir: bool,
    seq: usize,
}

impl SubprocessRunner {
    /// Starts `cmd` through `sh -c` and waits for its handshake.
    pub fn spawn(cmd: &str, opts: SubprocessOptions) -> Result<Self, RunnerError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| RunnerError::Spawn { cmd: cmd.to_string(), source })?;

        let stdout = child.stdout.take().expect("piped stdout");
        let stderr_pipe = child.stderr.take().expect("piped stderr");
        let stdin = child.stdin.take();

        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut reader = BufReader::new(stderr_pipe);
            let mut buf = [0u8; 4096];
            while let Ok(n) = reader.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().expect("stderr lock");
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
                if s.len() > STDERR_KEEP {
                    let cut = s.len() - STDERR_KEEP;
                    let cut = (cut..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(s.len());
                    s.drain(..cut);
                }
            }
        });

        let (work_dir, owns_work_dir) = match opts.work_dir {
            Some(d) => (d, false),
            None => {
                static NEXT: AtomicUsize = AtomicUsize::new(0);
                let d = std::env::temp_dir().join(format!(
                    "conex-runner-{}-{}",
                    std::process::id(),
                    NEXT.fetch_add(1, Ordering::Relaxed)
                ));
                (d, true)
            }
        };
        std::fs::create_dir_all(&work_dir)?;

        let mut runner = Self {
            child,
            stdin,
            lines,
            stderr,
            info: RunnerInfo { layers: vec![], n_k: 0, input_normalization: None },
            work_dir,
            owns_work_dir,
            seq: 0,
        };
        let line = match runner.lines.recv_timeout(opts.handshake_timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(RunnerError::Io(e)),
            Err(RecvTimeoutError::Timeout) => return Err(RunnerError::HandshakeTimeout(opts.handshake_timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(runner.exited()),
        };
        let hs = parse_handshake(&line)?;
        runner.info = hs.into_info();
        Ok(runner)
    }

    pub fn work_dir(&self) -> &Path {
        &self.work_dir
    }

    fn stderr_text(&self) -> String {
        self.stderr.lock().map(|s| s.clone()).unwrap_or_default()
    }

    fn exited(&mut self) -> RunnerError {
        // Give the process a moment to finish so the status is known.
        let mut status = None;
        for _ in 0..50 {
            if let Ok(Some(s)) = self.child.try_wait() {
                status = Some(s);
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
        // Let the stderr thread drain.
        thread::sleep(Duration::from_millis(20));
        RunnerError::Exited {
            status: status.map_or_else(|| "still running, stdout closed".to_string(), |s| s.to_string()),
            stderr: self.stderr_text(),
        }
    }

    fn round_trip(
        &mut self,
        kind: RequestKind,
        images: &[Tensor<f32>],
        layers: &[String],
    ) -> Result<Reply, RunnerError> {
        if images.is_empty() {
            return Err(RunnerError::InvalidInput("request has no images".into()));
        }
        let seq = self.seq;
        self.seq += 1;
        let req_dir = self.work_dir.join(format!("req{seq}"));
        let in_dir = req_dir.join("in");
        std::fs::create_dir_all(&in_dir)?;
        let mut paths = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let p = in_dir.join(format!("{i}.ltns"));
            ltns::save(img, &p).map_err(|source| RunnerError::Tensor { path: p.clone(), source })?;
            paths.push(p);
        }
        let req = Request { kind, images: paths, layers: layers.to_vec(), out_dir: req_dir.join("out") };
        let line = serde_json::to_string(&req).map_err(|e| RunnerError::InvalidInput(e.to_string()))?;

        let write =
            self.stdin.as_mut().ok_or_else(|| RunnerError::InvalidInput("runner stdin closed".into())).and_then(|s| {
                writeln!(s, "{line}")?;
                s.flush()?;
                Ok(())
            });
        if write.is_err() {
            return Err(self.exited());
        }

        let reply_line = match self.lines.recv() {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(RunnerError::Io(e)),
            Err(_) => return Err(self.exited()),
        };
        let reply: Reply = serde_json::from_str(&reply_line)
            .map_err(|e| RunnerError::MalformedReply(format!("{e}: {reply_line:?}")))?;
        if !reply.ok {
            return Err(RunnerError::Remote {
                message: reply.error.unwrap_or_else(|| "unspecified".into()),
                stderr: self.stderr_text(),
            });
        }
        Ok(reply)
    }
}

pub(crate) fn parse_handshake(line: &str) -> Result<Handshake, RunnerError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| RunnerError::MalformedReply(format!("handshake: {e}: {line:?}")))?;
    let protocol = value
        .get("protocol")
        .and_then(|p| p.as_str())
        .ok_or_else(|| RunnerError::MalformedReply(format!("handshake lacks protocol: {line:?}")))?;
    if protocol != PROTOCOL {
        return Err(RunnerError::VersionMismatch { got: protocol.to_string(), expected: PROTOCOL.to_string() });
    }
    serde_json::from_value(value).map_err(|e| RunnerError::MalformedReply(format!("handshake: {e}")))
}

impl ModelRunner for SubprocessRunner {
    fn info(&self) -> &RunnerInfo {
        &self.info
    }

    fn activations(&mut self, images: &[Tensor<f32>], layers: &[String]) -> Result<Vec<LayerActivations>, RunnerError> {
        check_layers(layers, &self.info.layers)?;
        let reply = self.round_trip(RequestKind::Activations, images, layers)?;
        (0..images.len())
            .map(|i| layers.iter().map(|l| Ok((l.clone(), load_reply_tensor(&reply, &format!("{i}/{l}"))?))).collect())
            .collect()
    }

    fn logits(&mut self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, RunnerError> {
        let reply = self.round_trip(RequestKind::Logits, images, &[])?;
        (0..images.len()).map(|i| Ok(load_reply_tensor(&reply, &format!("{i}/logits"))?.into_data())).collect()
    }

    fn grad_g(&mut self, images: &[Tensor<f32>]) -> Result<Vec<GradOutcome>, RunnerError> {
        let reply = self.round_trip(RequestKind::GradG, images, &[])?;
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let g = load_reply_tensor(&reply, &format!("{i}/g"))?;
                let g = match g.data() {
                    [g] => *g,
                    _ => return Err(RunnerError::MalformedReply(format!("{i}/g must hold one value"))),
                };
                if g == 0.0 {
                    return Ok(GradOutcome::Undefined);
                }
                let grad = load_reply_tensor(&reply, &format!("{i}/grad"))?;
                if grad.shape() != img.shape() {
                    return Err(RunnerError::MalformedReply(format!(
                        "gradient shape {:?} differs from image {:?}",
                        grad.shape(),
                        img.shape()
                    )));
                }
                Ok(GradOutcome::Gradient { g, grad })
            })
            .collect()
    }
}

impl Drop for SubprocessRunner {
    fn drop(&mut self) {
        // Closing stdin is the shutdown signal; kill if the runner lingers.
        drop(self.stdin.take());
        let mut done = false;
        for _ in 0..50 {
            if matches!(self.child.try_wait(), Ok(Some(_))) {
                done = true;
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
        if !done {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
        if self.owns_work_dir {
            let _ = std::fs::remove_dir_all(&self.work_dir);
        }
    }
}
