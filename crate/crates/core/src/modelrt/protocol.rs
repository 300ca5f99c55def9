//! `concept-runner/1`: line-delimited JSON over stdio, tensors as LTNS files.
//!
//! The runner prints one handshake line at startup, then answers every
//! request line with exactly one reply line, in order. Reply tensor names:
//!
//! | kind          | names                         |
//! |---------------|-------------------------------|
//! | `activations` | `"<i>/<layer>"`               |
//! | `logits`      | `"<i>/logits"` (shape `[n_k]`) |
//! | `grad_g`      | `"<i>/g"` (shape `[1]`), `"<i>/grad"` |
//!
//! where `<i>` is the image position in the request. A `g` of zero marks an
//! undefined gradient; `"<i>/grad"` is then omitted.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ltns;
use crate::tensor::Tensor;

use super::{check_layers, GradOutcome, InputNormalization, LayerActivations, ModelRunner, RunnerError, RunnerInfo};

pub const PROTOCOL: &str = "concept-runner/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub layers: Vec<String>,
    pub n_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_normalization: Option<InputNormalization>,
}

impl Handshake {
    pub fn from_info(info: &RunnerInfo) -> Self {
        Self {
            protocol: PROTOCOL.to_string(),
            layers: info.layers.clone(),
            n_k: info.n_k,
            input_normalization: info.input_normalization.clone(),
        }
    }

    pub fn into_info(self) -> RunnerInfo {
        RunnerInfo { layers: self.layers, n_k: self.n_k, input_normalization: self.input_normalization }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Activations,
    Logits,
    GradG,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub kind: RequestKind,
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub layers: Vec<String>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Reply {
    pub fn success(tensors: BTreeMap<String, PathBuf>) -> Self {
        Self { ok: true, tensors, error: None }
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        Self { ok: false, tensors: BTreeMap::new(), error: Some(msg.into()) }
    }
}

/// Serves `runner` over a line protocol until `input` reaches EOF.
///
/// Request failures are answered with `{"ok":false}`; the loop keeps going.
pub fn serve<R: ModelRunner + ?Sized>(
    runner: &mut R,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    let hs = serde_json::to_string(&Handshake::from_info(runner.info()))?;
    writeln!(output, "{hs}")?;
    output.flush()?;

    for (seq, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle(runner, &req, seq).unwrap_or_else(|e| Reply::failure(e.to_string())),
            Err(e) => Reply::failure(format!("malformed request: {e}")),
        };
        writeln!(output, "{}", serde_json::to_string(&reply)?)?;
        output.flush()?;
    }
    Ok(())
}

fn handle<R: ModelRunner + ?Sized>(runner: &mut R, req: &Request, seq: usize) -> Result<Reply, RunnerError> {
    if req.images.is_empty() {
        return Err(RunnerError::InvalidInput("request has no images".into()));
    }
    let images = req
        .images
        .iter()
        .map(|p| ltns::load(p).map_err(|source| RunnerError::Tensor { path: p.clone(), source }))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(&req.out_dir)?;

    let mut tensors = BTreeMap::new();
    let mut put = |name: String, t: &Tensor<f32>| -> Result<(), RunnerError> {
        let file = req.out_dir.join(format!("r{seq}_{}.ltns", name.replace('/', "_")));
        ltns::save(t, &file).map_err(|source| RunnerError::Tensor { path: file.clone(), source })?;
        tensors.insert(name, file);
        Ok(())
    };

    match req.kind {
        RequestKind::Activations => {
            for (i, layers) in runner.activations(&images, &req.layers)?.into_iter().enumerate() {
                for (id, t) in layers {
                    put(format!("{i}/{id}"), &t)?;
                }
            }
        }
        RequestKind::Logits => {
            for (i, y) in runner.logits(&images)?.into_iter().enumerate() {
                let n = y.len();
                put(format!("{i}/logits"), &vec_tensor(y, n)?)?;
            }
        }
        RequestKind::GradG => {
            for (i, out) in runner.grad_g(&images)?.into_iter().enumerate() {
                match out {
                    GradOutcome::Gradient { g, grad } => {
                        put(format!("{i}/g"), &vec_tensor(vec![g], 1)?)?;
                        put(format!("{i}/grad"), &grad)?;
                    }
                    GradOutcome::Undefined => put(format!("{i}/g"), &vec_tensor(vec![0.0], 1)?)?,
                }
            }
        }
    }
    Ok(Reply::success(tensors))
}

fn vec_tensor(v: Vec<f32>, n: usize) -> Result<Tensor<f32>, RunnerError> {
    Tensor::new(vec![n], v).map_err(|e| RunnerError::InvalidInput(e.to_string()))
}

pub(crate) fn load_reply_tensor(reply: &Reply, name: &str) -> Result<Tensor<f32>, RunnerError> {
    let path =
        reply.tensors.get(name).ok_or_else(|| RunnerError::MalformedReply(format!("reply lacks tensor {name:?}")))?;
    load_path(path)
}

fn load_path(path: &Path) -> Result<Tensor<f32>, RunnerError> {
    ltns::load(path).map_err(|source| RunnerError::Tensor { path: path.to_path_buf(), source })
}

/// Test runner that hands every request image back unchanged: as each
/// requested activation layer, and as the input gradient with `g = 1`.
pub struct EchoRunner {
    info: RunnerInfo,
}

impl EchoRunner {
    pub fn new(layers: Vec<String>, n_k: usize) -> Self {
        Self { info: RunnerInfo { layers, n_k, input_normalization: None } }
    }
}

impl ModelRunner for EchoRunner {
    fn info(&self) -> &RunnerInfo {
        &self.info
    }

    fn activations(&mut self, images: &[Tensor<f32>], layers: &[String]) -> Result<Vec<LayerActivations>, RunnerError> {
        check_layers(layers, &self.info.layers)?;
        Ok(images.iter().map(|x| layers.iter().map(|l| (l.clone(), x.clone())).collect()).collect())
    }

    fn logits(&mut self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, RunnerError> {
        Ok(images.iter().map(|_| vec![0.0; self.info.n_k]).collect())
    }

    fn grad_g(&mut self, images: &[Tensor<f32>]) -> Result<Vec<GradOutcome>, RunnerError> {
        Ok(images.iter().map(|x| GradOutcome::Gradient { g: 1.0, grad: x.clone() }).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelrt::ToyRunner;

    #[test]
    fn wire_formats() {
        let req = Request {
            kind: RequestKind::GradG,
            images: vec!["a.ltns".into()],
            layers: vec![],
            out_dir: "/tmp/x".into(),
        };
        let s = serde_json::to_string(&req).unwrap();
        assert_eq!(s, r#"{"kind":"grad_g","images":["a.ltns"],"layers":[],"out_dir":"/tmp/x"}"#);
        let r: Request = serde_json::from_str(r#"{"kind":"logits","images":["b"],"out_dir":"o"}"#).unwrap();
        assert!(r.layers.is_empty());
        assert_eq!(serde_json::to_string(&Reply::failure("boom")).unwrap(), r#"{"ok":false,"error":"boom"}"#);
        let hs = Handshake::from_info(ToyRunner::new(3).unwrap().info());
        assert_eq!(
            serde_json::to_string(&hs).unwrap(),
            r#"{"protocol":"concept-runner/1","layers":["a1","a2"],"n_k":3}"#
        );
    }

    #[test]
    fn serve_answers_each_line_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32 / 11.0).collect()).unwrap();
        let img_path = dir.path().join("img.ltns");
        ltns::save(&img, &img_path).unwrap();
        let out_dir = dir.path().join("out");
        let mk = |kind, layers: &[&str]| {
            serde_json::to_string(&Request {
                kind,
                images: vec![img_path.clone(), img_path.clone()],
                layers: layers.iter().map(|s| s.to_string()).collect(),
                out_dir: out_dir.clone(),
            })
            .unwrap()
        };
        let input = [
            mk(RequestKind::Activations, &["a2", "a1"]),
            "not json".to_string(),
            mk(RequestKind::Activations, &["zz"]),
            mk(RequestKind::GradG, &[]),
            mk(RequestKind::Logits, &[]),
        ]
        .join("\n");

        let mut runner = ToyRunner::new(3).unwrap();
        let mut out = Vec::new();
        serve(&mut runner, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 6);
        let hs: Handshake = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(hs.protocol, PROTOCOL);

        let acts: Reply = serde_json::from_str(lines[1]).unwrap();
        assert!(acts.ok);
        assert_eq!(acts.tensors.keys().collect::<Vec<_>>(), ["0/a1", "0/a2", "1/a1", "1/a2"]);
        let a1 = load_reply_tensor(&acts, "1/a1").unwrap();
        assert_eq!(a1, runner.model().forward(&img).unwrap().a1);

        let bad: Reply = serde_json::from_str(lines[2]).unwrap();
        assert!(!bad.ok && bad.error.unwrap().contains("malformed"));
        let unknown: Reply = serde_json::from_str(lines[3]).unwrap();
        assert!(!unknown.ok && unknown.error.unwrap().contains("zz"));

        let grad: Reply = serde_json::from_str(lines[4]).unwrap();
        let (g, want) = runner.model().g_and_grad(&img).unwrap();
        assert_eq!(load_reply_tensor(&grad, "0/g").unwrap().data(), &[g]);
        assert_eq!(load_reply_tensor(&grad, "0/grad").unwrap(), want.unwrap());

        let logits: Reply = serde_json::from_str(lines[5]).unwrap();
        assert_eq!(load_reply_tensor(&logits, "1/logits").unwrap().shape(), &[3]);
    }
}
