//! Frozen image enhancers standing in for a generative refiner.
//!
//! `External` runs a user command as `<command> <in.png> <out.png>` inside a
//! working directory; the engine writes `in_<uuid>.png`, reads back
//! `out_<uuid>.png`, and removes both on success.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::features::{binomial_5x5, Plane};
use crate::image::Image;
use crate::io::{read_png, write_png};

pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq)]
pub enum EnhancerSpec {
    Identity,
    /// `clamp(R + strength (R - blur(R)), 0, 1)`.
    Unsharp { strength: f64 },
    External {
        /// Program followed by optional fixed arguments, whitespace separated.
        command: String,
        workdir: PathBuf,
        timeout: Duration,
    },
}

impl Default for EnhancerSpec {
    fn default() -> Self {
        Self::Unsharp { strength: 1.0 }
    }
}

impl EnhancerSpec {
    /// Parses `identity`, `unsharp`, `unsharp:<strength>` or `external:<command>`.
    pub fn parse(text: &str, workdir: &Path) -> Result<Self> {
        let text = text.trim();
        if text == "identity" {
            Ok(Self::Identity)
        } else if text == "unsharp" {
            Ok(Self::default())
        } else if let Some(s) = text.strip_prefix("unsharp:") {
            let strength: f64 = s
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad unsharp strength {s:?}")))?;
            if !(strength >= 0.0 && strength.is_finite()) {
                return Err(Error::InvalidArgument("unsharp strength must be >= 0".into()));
            }
            Ok(Self::Unsharp { strength })
        } else if let Some(cmd) = text.strip_prefix("external:") {
            if cmd.trim().is_empty() {
                return Err(Error::InvalidArgument("external enhancer needs a command".into()));
            }
            Ok(Self::External {
                command: cmd.trim().to_string(),
                workdir: workdir.to_path_buf(),
                timeout: DEFAULT_EXTERNAL_TIMEOUT,
            })
        } else {
            Err(Error::InvalidArgument(format!("unknown enhancer {text:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }
}

/// An enhancer instance. External invocations through one instance run one
/// at a time.
#[derive(Debug)]
pub struct Enhancer {
    spec: EnhancerSpec,
    external_lock: Mutex<()>,
}

impl Enhancer {
    pub fn new(spec: EnhancerSpec) -> Self {
        Self {
            spec,
            external_lock: Mutex::new(()),
        }
    }

    pub fn spec(&self) -> &EnhancerSpec {
        &self.spec
    }

    pub fn enhance(&self, image: &Image) -> Result<Image> {
        match &self.spec {
            EnhancerSpec::External {
                command,
                workdir,
                timeout,
            } => {
                let _guard = self.external_lock.lock().unwrap_or_else(|p| p.into_inner());
                run_external(image, command, workdir, *timeout)
            }
            other => enhance(image, other),
        }
    }
}

/// Applies an enhancer to an RGB image; output has the input's resolution.
pub fn enhance(image: &Image, spec: &EnhancerSpec) -> Result<Image> {
    if image.channels != 3 {
        return Err(Error::Shape("enhancers operate on RGB images".into()));
    }
    match spec {
        EnhancerSpec::Identity => Ok(image.clone()),
        EnhancerSpec::Unsharp { strength } => Ok(unsharp_unclamped(image, *strength).clamp01()),
        EnhancerSpec::External {
            command,
            workdir,
            timeout,
        } => run_external(image, command, workdir, *timeout),
    }
}

pub(crate) fn unsharp_unclamped(image: &Image, strength: f64) -> Image {
    let blur = binomial_5x5();
    let mut out = image.clone();
    for c in 0..3 {
        let p = Plane::from_channel(image, c);
        let b = p.correlate(&blur, 5);
        for (i, (&v, &bv)) in p.data.iter().zip(&b.data).enumerate() {
            out.data[i * 3 + c] = v + strength * (v - bv);
        }
    }
    out
}

fn run_external(image: &Image, command: &str, workdir: &Path, timeout: Duration) -> Result<Image> {
    let id = uuid::Uuid::new_v4();
    let input = workdir.join(format!("in_{id}.png"));
    let output = workdir.join(format!("out_{id}.png"));
    std::fs::create_dir_all(workdir).map_err(|e| Error::Enhancer(format!("{}: {e}", workdir.display())))?;
    write_png(&input, image).map_err(|e| Error::Enhancer(format!("writing enhancer input: {e}")))?;

    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| Error::Enhancer("empty enhancer command".into()))?;
    let mut child = Command::new(program)
        .args(parts)
        .arg(&input)
        .arg(&output)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Enhancer(format!("failed to start {program:?}: {e}")))?;

    let drain = |pipe: Option<Box<dyn Read + Send>>| {
        std::thread::spawn(move || {
            let mut s = String::new();
            if let Some(mut p) = pipe {
                let _ = p.read_to_string(&mut s);
            }
            s
        })
    };
    let out_reader = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let err_reader = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Enhancer(format!(
                    "{program:?} timed out after {:.1} s",
                    timeout.as_secs_f64()
                )));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(Error::Enhancer(format!("waiting for {program:?}: {e}"))),
        }
    };
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(Error::Enhancer(format!(
            "{program:?} exited with {status}; stderr: {}; stdout: {}",
            stderr.trim(),
            stdout.trim()
        )));
    }
    let result = read_png(&output).map_err(|e| Error::Enhancer(format!("reading enhancer output: {e}")))?;
    if result.width != image.width || result.height != image.height {
        return Err(Error::Enhancer(format!(
            "enhancer returned {}x{}, expected {}x{}",
            result.width, result.height, image.width, image.height
        )));
    }
    let _ = std::fs::remove_file(&input);
    let _ = std::fs::remove_file(&output);
    Ok(result)
}
