//! HTTP/JSON client for an external model server.
//!
//! Tensors travel as base64 of little-endian `f32` with an explicit shape; masks as
//! row-major run-length encodings. Endpoints:
//!
//! | method | path               | request                         | response                                   |
//! |--------|--------------------|---------------------------------|--------------------------------------------|
//! | GET    | `/v1/descriptor`   |                                 | [`ProviderDescriptor`]                     |
//! | POST   | `/v1/embed_window` | `{image, windows: [rect, ..]}`  | `{embeddings: [n, dim]}`                   |
//! | POST   | `/v1/embed_image`  | `{image}`                       | `{class_token: [dim], patch_tokens: [r, c, dim]}` |
//! | POST   | `/v1/embed_text`   | `{templates: [str, ..]}`        | `{embeddings: [n, dim]}`                   |
//! | POST   | `/v1/segment`      | `{image}`                       | `{masks: [RleMask, ..]}`                   |
//!
//! Failures come back as a non-2xx status with `{"error": "..."}`.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{check_window, Embedding, ImageEmbeddings, ImageEncoder, ProviderDescriptor, Segmenter, TextEncoder};
use crate::decompose::{BinaryMask, PatchGrid, WindowSpec};
use crate::error::{contract, Error, Result};
use crate::image::ImageTensor;

const MAX_BODY_BYTES: u64 = 1 << 30;

/// A dense `f32` tensor on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Base64 of the little-endian `f32` values, row-major.
    pub data: String,
}

impl WireTensor {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape,
            dtype: "float32".into(),
            data: B64.encode(bytes),
        }
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        if self.dtype != "float32" {
            return Err(contract!("unsupported tensor dtype {:?}", self.dtype));
        }
        let bytes = B64.decode(&self.data).map_err(|e| contract!("tensor data is not base64: {e}"))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(contract!("tensor of shape {:?} carries {} bytes", self.shape, bytes.len()));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn from_image(image: &ImageTensor) -> Self {
        Self::from_f32(vec![image.height(), image.width(), 3], image.data())
    }

    pub fn to_image(&self) -> Result<ImageTensor> {
        match self.shape.as_slice() {
            &[h, w, 3] => ImageTensor::new(h, w, self.to_f32()?),
            other => Err(contract!("image tensor must have shape [h, w, 3], got {other:?}")),
        }
    }
}

/// Run-length encoded binary mask. Runs alternate starting with unset cells, row-major;
/// the first run may be empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &bit in mask.data() {
            if bit != current {
                counts.push(run);
                current = bit;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            height: mask.height(),
            width: mask.width(),
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.counts.iter().sum();
        if total != (self.height * self.width) as u64 {
            return Err(contract!(
                "RLE runs sum to {total}, mask is {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for (i, &run) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        BinaryMask::new(self.height, self.width, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl From<&WindowSpec> for WireRect {
    fn from(w: &WindowSpec) -> Self {
        Self {
            row0: w.row0,
            col0: w.col0,
            rows: w.rows,
            cols: w.cols,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRequest {
    pub image: WireTensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowRequest {
    pub image: WireTensor,
    pub windows: Vec<WireRect>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextRequest {
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingsResponse {
    pub embeddings: WireTensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageResponse {
    pub class_token: WireTensor,
    pub patch_tokens: WireTensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub masks: Vec<RleMask>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Retry and timeout policy of a [`WireClient`].
#[derive(Clone, Debug)]
pub struct WireOptions {
    pub timeout: Duration,
    /// Total attempts per call, including the first.
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for WireOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

/// Blocking client for the model server. Safe to share across threads; each call is an
/// independent request.
#[derive(Debug)]
pub struct WireClient {
    base: String,
    agent: ureq::Agent,
    options: WireOptions,
    descriptor: ProviderDescriptor,
}

impl WireClient {
    /// Connects and fetches the server's descriptor.
    pub fn connect(base_url: &str, options: WireOptions) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(options.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut client = Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            options,
            descriptor: ProviderDescriptor {
                name: String::new(),
                dim: 0,
                patch_size: 0,
                deterministic: false,
            },
        };
        let descriptor: ProviderDescriptor = client.call("/v1/descriptor", None::<&()>)?;
        descriptor.validate()?;
        client.descriptor = descriptor;
        Ok(client)
    }

    fn call<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<T> {
        let url = format!("{}{}", self.base, path);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = match body {
                Some(b) => self.agent.post(&url).send_json(b),
                None => self.agent.get(&url).call(),
            };
            let (message, status, retryable) = match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .with_config()
                            .limit(MAX_BODY_BYTES)
                            .read_json::<T>()
                            .map_err(|e| contract!("unreadable response from {path}: {e}"));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    let message = serde_json::from_str::<ErrorResponse>(&text).map(|e| e.error).unwrap_or(text);
                    (message, Some(status), matches!(status, 429 | 502 | 503 | 504))
                }
                Err(e) => (e.to_string(), None, true),
            };
            if !retryable || attempt >= self.options.attempts {
                return Err(Error::Transport {
                    message: format!("{path}: {message}"),
                    status,
                    retryable,
                    attempts: attempt,
                });
            }
            log::warn!("{path} failed ({message}), retrying");
            thread::sleep(self.options.backoff * 2u32.pow(attempt - 1));
        }
    }

    fn embeddings(&self, tensor: &WireTensor, n: usize) -> Result<Vec<Embedding>> {
        let dim = self.descriptor.dim;
        if tensor.shape.iter().product::<usize>() != n * dim || tensor.shape.last() != Some(&dim) {
            return Err(contract!("expected {n} embeddings of dim {dim}, got shape {:?}", tensor.shape));
        }
        let values = tensor.to_f32()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract!("server returned non-finite embedding values"));
        }
        values.chunks_exact(dim).map(|c| Embedding::normalized(c.to_vec())).collect()
    }
}

impl ImageEncoder for WireClient {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn embed_window(&self, image: &ImageTensor, window: &WindowSpec) -> Result<Embedding> {
        Ok(self.embed_windows(image, std::slice::from_ref(window))?.remove(0))
    }

    fn embed_windows(&self, image: &ImageTensor, windows: &[WindowSpec]) -> Result<Vec<Embedding>> {
        for w in windows {
            check_window(image, w, self.descriptor.patch_size)?;
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let req = WindowRequest {
            image: WireTensor::from_image(image),
            windows: windows.iter().map(WireRect::from).collect(),
        };
        let resp: EmbeddingsResponse = self.call("/v1/embed_window", Some(&req))?;
        self.embeddings(&resp.embeddings, windows.len())
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<ImageEmbeddings> {
        let grid = PatchGrid::for_image(image, self.descriptor.patch_size)?;
        let req = ImageRequest { image: WireTensor::from_image(image) };
        let resp: ImageResponse = self.call("/v1/embed_image", Some(&req))?;
        if resp.patch_tokens.shape != [grid.rows, grid.cols, self.descriptor.dim] {
            return Err(contract!(
                "patch tokens of shape {:?}, expected [{}, {}, {}]",
                resp.patch_tokens.shape,
                grid.rows,
                grid.cols,
                self.descriptor.dim
            ));
        }
        Ok(ImageEmbeddings {
            class_token: self.embeddings(&resp.class_token, 1)?.remove(0),
            rows: grid.rows,
            cols: grid.cols,
            patch_tokens: self.embeddings(&resp.patch_tokens, grid.rows * grid.cols)?,
        })
    }
}

impl TextEncoder for WireClient {
    fn embed_templates(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let resp: EmbeddingsResponse = self.call("/v1/embed_text", Some(&TextRequest { templates: texts.to_vec() }))?;
        self.embeddings(&resp.embeddings, texts.len())
    }
}

impl Segmenter for WireClient {
    fn segment(&self, image: &ImageTensor) -> Result<Vec<BinaryMask>> {
        let resp: SegmentResponse = self.call("/v1/segment", Some(&ImageRequest { image: WireTensor::from_image(image) }))?;
        resp.masks
            .iter()
            .map(|m| {
                if m.height != image.height() || m.width != image.width() {
                    return Err(contract!("mask is {}x{}, image {}x{}", m.height, m.width, image.height(), image.width()));
                }
                m.decode()
            })
            .collect()
    }
}
