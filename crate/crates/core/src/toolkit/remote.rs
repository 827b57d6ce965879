//! HTTP client for tools served over the wire protocol.
//!
//! | endpoint        | request                                   | response                          |
//! |-----------------|-------------------------------------------|-----------------------------------|
//! | `POST /segment` | `{study_id, image, organ}`                | `{mask, confidence}`              |
//! | `POST /classify`| `{study_id, image}`                       | `{labels: [{name, score}]}`       |
//! | `POST /ground`  | `{study_id, image, finding}`              | `{boxes: [[x0,y0,x1,y1]], confidence}` |
//! | `POST /vqa`     | `{study_id, image, question}`             | `{answer, confidence}`            |
//! | `POST /report`  | `{study_id, image, prior_image?}`         | `{findings_text, confidence}`     |
//! | `POST /embed`   | `{study_id, image}`                       | `{vector}`                        |
//! | `GET /health`   |                                           | `{status: "ok"}`                  |
//!
//! Images and masks travel as base64-encoded 8-bit grayscale PNG. Non-2xx
//! responses carry `{error}`.

use std::io::Cursor;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{GrayImage, ImageFormat};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    Capability, ImageSlot, LabelScore, Payload, Provenance, Tool, ToolCard, ToolError, ToolOutput, ToolRequest,
    ToolSource,
};
use crate::model::{BBox, Confidence, FindingLabel, Mask};
use crate::phantom::CaseStudy;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub fn encode_png(image: &GrayImage) -> String {
    let mut buf = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .expect("in-memory PNG encoding");
    B64.encode(buf)
}

pub fn decode_png(data: &str) -> Result<GrayImage, String> {
    let bytes = B64.decode(data.trim()).map_err(|e| format!("base64: {e}"))?;
    image::load_from_memory(&bytes)
        .map(|img| img.to_luma8())
        .map_err(|e| format!("image: {e}"))
}

pub fn mask_to_png(mask: &Mask) -> String {
    let img = GrayImage::from_fn(mask.width(), mask.height(), |x, y| image::Luma([if mask.get(y, x) { 255 } else { 0 }]));
    encode_png(&img)
}

pub fn png_to_mask(data: &str) -> Result<Mask, String> {
    let img = decode_png(data)?;
    Mask::from_bits(img.width(), img.height(), img.pixels().map(|p| p[0] > 127).collect()).map_err(|e| e.to_string())
}

/// A JSON-over-HTTP endpoint with a fixed time budget per request.
#[derive(Clone)]
pub(crate) struct HttpEndpoint {
    base_url: String,
    agent: ureq::Agent,
    timeout: Duration,
}

pub(crate) enum HttpFailure {
    Status(u16, String),
    Transport(String),
}

impl HttpEndpoint {
    pub(crate) fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            timeout,
        }
    }

    fn finish(&self, result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<String, HttpFailure> {
        let mut resp = result.map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| self.transport(e))?;
        if (200..300).contains(&status) {
            Ok(body)
        } else {
            Err(HttpFailure::Status(status, body))
        }
    }

    fn transport(&self, e: ureq::Error) -> HttpFailure {
        HttpFailure::Transport(format!("{e} (budget {} ms)", self.timeout.as_millis()))
    }

    pub(crate) fn post(&self, path: &str, body: &Value) -> Result<String, HttpFailure> {
        let url = format!("{}{path}", self.base_url);
        let bytes = serde_json::to_vec(body).expect("json values serialize");
        let result = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(&bytes[..]);
        self.finish(result)
    }

    pub(crate) fn get(&self, path: &str) -> Result<String, HttpFailure> {
        let url = format!("{}{path}", self.base_url);
        self.finish(self.agent.get(&url).call())
    }
}

/// Any transport failure, including refused connections, surfaces as a
/// timeout: the caller only learns that no answer arrived within budget.
fn http_error(tool_id: &str, failure: HttpFailure) -> ToolError {
    match failure {
        HttpFailure::Status(status, body) => ToolError::RemoteError { status, body },
        HttpFailure::Transport(detail) => ToolError::Timeout {
            tool_id: tool_id.to_string(),
            detail,
        },
    }
}

pub struct RemoteTool {
    card: ToolCard,
    endpoint: HttpEndpoint,
}

#[derive(Deserialize)]
struct SegmentResp {
    mask: String,
    confidence: f64,
}

#[derive(Deserialize)]
struct LabelEntry {
    name: String,
    score: f64,
}

#[derive(Deserialize)]
struct ClassifyResp {
    labels: Vec<LabelEntry>,
    #[serde(default)]
    confidence: Option<f64>,
}

#[derive(Deserialize)]
struct GroundResp {
    boxes: Vec<[u32; 4]>,
    confidence: f64,
}

#[derive(Deserialize)]
struct VqaResp {
    answer: String,
    confidence: f64,
}

#[derive(Deserialize)]
struct ReportResp {
    findings_text: String,
    confidence: f64,
}

#[derive(Deserialize)]
struct HealthResp {
    status: String,
}

impl RemoteTool {
    /// Only the model-backed capabilities travel over the wire.
    pub fn new(
        tool_id: impl Into<String>,
        capability: Capability,
        base_url: &str,
        cost_hint: u32,
        timeout: Duration,
    ) -> Result<Self, ToolError> {
        let tool_id = tool_id.into();
        if !matches!(
            capability,
            Capability::Segment | Capability::Classify | Capability::Ground | Capability::Vqa | Capability::Report
        ) {
            return Err(ToolError::SchemaMismatch {
                tool_id,
                detail: format!("{capability} has no wire endpoint"),
                raw: String::new(),
            });
        }
        Ok(Self {
            card: ToolCard::new(tool_id, capability, cost_hint, ToolSource::RemoteHttp),
            endpoint: HttpEndpoint::new(base_url, timeout),
        })
    }

    /// `GET /health` against a server root.
    pub fn health(base_url: &str, timeout: Duration) -> Result<(), ToolError> {
        let ep = HttpEndpoint::new(base_url, timeout);
        let body = ep.get("/health").map_err(|f| http_error("health", f))?;
        match serde_json::from_str::<HealthResp>(&body) {
            Ok(h) if h.status == "ok" => Ok(()),
            _ => Err(ToolError::SchemaMismatch {
                tool_id: "health".into(),
                detail: "expected {\"status\":\"ok\"}".into(),
                raw: body,
            }),
        }
    }

    fn parse<T: for<'de> Deserialize<'de>>(&self, raw: &str) -> Result<T, ToolError> {
        serde_json::from_str(raw).map_err(|e| self.schema(e.to_string(), raw))
    }

    fn schema(&self, detail: String, raw: &str) -> ToolError {
        ToolError::SchemaMismatch {
            tool_id: self.card.tool_id.clone(),
            detail,
            raw: raw.to_string(),
        }
    }

    fn confidence(&self, v: f64, raw: &str) -> Result<Confidence, ToolError> {
        Confidence::new(v).map_err(|e| self.schema(e.to_string(), raw))
    }

    fn image(&self, case: &CaseStudy, slot: ImageSlot) -> Result<String, ToolError> {
        match slot {
            ImageSlot::Current => Ok(encode_png(&case.current_pixels)),
            ImageSlot::Prior => case
                .prior_pixels
                .as_ref()
                .map(|p| encode_png(p))
                .ok_or_else(|| self.schema("study has no prior image".into(), "")),
        }
    }

    fn call(&self, request: &ToolRequest, case: &CaseStudy) -> Result<(Payload, Confidence), ToolError> {
        let id = case.id();
        let (path, body) = match request {
            ToolRequest::Segment { target, slot } => (
                "/segment",
                json!({"study_id": id, "image": self.image(case, *slot)?, "organ": target.name()}),
            ),
            ToolRequest::Classify { slot } => ("/classify", json!({"study_id": id, "image": self.image(case, *slot)?})),
            ToolRequest::Ground { finding, slot } => (
                "/ground",
                json!({"study_id": id, "image": self.image(case, *slot)?, "finding": finding.as_snake()}),
            ),
            ToolRequest::Vqa { question } => (
                "/vqa",
                json!({"study_id": id, "image": self.image(case, ImageSlot::Current)?, "question": question}),
            ),
            ToolRequest::Report => {
                let mut body = json!({"study_id": id, "image": self.image(case, ImageSlot::Current)?});
                if let Some(prior) = &case.prior_pixels {
                    body["prior_image"] = Value::String(encode_png(prior));
                }
                ("/report", body)
            }
            other => return Err(self.schema(format!("cannot send `{}` over the wire", other.describe()), "")),
        };
        let raw = self
            .endpoint
            .post(path, &body)
            .map_err(|f| http_error(&self.card.tool_id, f))?;
        match request {
            ToolRequest::Segment { .. } => {
                let r: SegmentResp = self.parse(&raw)?;
                let mask = png_to_mask(&r.mask).map_err(|e| self.schema(e, &raw))?;
                let (w, h) = (case.current_pixels.width(), case.current_pixels.height());
                if (mask.width(), mask.height()) != (w, h) {
                    return Err(self.schema(format!("mask is {}x{}, image is {w}x{h}", mask.width(), mask.height()), &raw));
                }
                Ok((Payload::Mask(mask), self.confidence(r.confidence, &raw)?))
            }
            ToolRequest::Classify { .. } => {
                let r: ClassifyResp = self.parse(&raw)?;
                let mut scores = Vec::with_capacity(r.labels.len());
                for entry in r.labels {
                    let label: FindingLabel = entry.name.parse().map_err(|e: crate::model::ModelError| self.schema(e.to_string(), &raw))?;
                    if !(0.0..=1.0).contains(&entry.score) {
                        return Err(self.schema(format!("score {} for {label} outside [0,1]", entry.score), &raw));
                    }
                    scores.push(LabelScore {
                        label,
                        score: entry.score,
                    });
                }
                // Without an explicit confidence, the least decisive label sets it.
                let conf = r.confidence.unwrap_or_else(|| {
                    scores
                        .iter()
                        .map(|s| s.score.max(1.0 - s.score))
                        .fold(1.0, f64::min)
                });
                Ok((Payload::Labels(scores), self.confidence(conf, &raw)?))
            }
            ToolRequest::Ground { .. } => {
                let r: GroundResp = self.parse(&raw)?;
                let boxes = r
                    .boxes
                    .iter()
                    .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| self.schema(e.to_string(), &raw))?;
                Ok((Payload::Boxes(boxes), self.confidence(r.confidence, &raw)?))
            }
            ToolRequest::Vqa { .. } => {
                let r: VqaResp = self.parse(&raw)?;
                Ok((Payload::Text(r.answer), self.confidence(r.confidence, &raw)?))
            }
            ToolRequest::Report => {
                let r: ReportResp = self.parse(&raw)?;
                Ok((Payload::Text(r.findings_text), self.confidence(r.confidence, &raw)?))
            }
            _ => unreachable!("rejected before the request was sent"),
        }
    }
}

impl Tool for RemoteTool {
    fn card(&self) -> &ToolCard {
        &self.card
    }

    fn invoke(&self, request: &ToolRequest, case: &CaseStudy) -> Result<ToolOutput, ToolError> {
        let start = Instant::now();
        let (payload, confidence) = self.call(request, case)?;
        Ok(ToolOutput {
            tool_id: self.card.tool_id.clone(),
            payload,
            confidence,
            latency_ms: start.elapsed().as_millis() as u64,
            provenance: Provenance::Remote,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    use super::*;
    use crate::phantom::{generate_study, Organ, PhantomParams};
    use crate::toolkit::SegmentTarget;

    /// Serves one canned response per connection and reports each request
    /// body back through the channel.
    pub(crate) fn fake_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                let _ = tx.send((request_line.trim().to_string(), String::from_utf8(buf).unwrap()));
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    fn case() -> CaseStudy {
        generate_study(&PhantomParams {
            image_size: (96, 80),
            ..PhantomParams::default()
        })
        .unwrap()
        .to_case()
    }

    fn seg_request() -> ToolRequest {
        ToolRequest::Segment {
            target: SegmentTarget::Organ(Organ::Heart),
            slot: ImageSlot::Current,
        }
    }

    #[test]
    fn segment_round_trip() {
        let case = case();
        let heart = case.truth.as_ref().unwrap().masks.heart.clone();
        let body = json!({"mask": mask_to_png(&heart), "confidence": 0.95}).to_string();
        let (url, rx) = fake_server(vec![(200, body)]);
        let tool = RemoteTool::new("seg", Capability::Segment, &url, 1, DEFAULT_TIMEOUT).unwrap();
        let out = tool.invoke(&seg_request(), &case).unwrap();
        assert_eq!(out.payload, Payload::Mask(heart));
        assert_eq!(out.provenance, Provenance::Remote);
        let (line, sent) = rx.recv().unwrap();
        assert!(line.starts_with("POST /segment"));
        let sent: Value = serde_json::from_str(&sent).unwrap();
        assert_eq!(sent["organ"], "heart");
        assert_eq!(sent["study_id"], case.id());
        assert_eq!(decode_png(sent["image"].as_str().unwrap()).unwrap(), *case.current_pixels);
    }

    #[test]
    fn server_error_is_remote_error() {
        let (url, _rx) = fake_server(vec![(500, r#"{"error":"boom"}"#.into())]);
        let tool = RemoteTool::new("seg", Capability::Segment, &url, 1, DEFAULT_TIMEOUT).unwrap();
        assert_eq!(
            tool.invoke(&seg_request(), &case()),
            Err(ToolError::RemoteError {
                status: 500,
                body: r#"{"error":"boom"}"#.into()
            })
        );
    }

    #[test]
    fn malformed_payload_keeps_raw_body() {
        let (url, _rx) = fake_server(vec![(200, r#"{"maks": 1}"#.into())]);
        let tool = RemoteTool::new("seg", Capability::Segment, &url, 1, DEFAULT_TIMEOUT).unwrap();
        match tool.invoke(&seg_request(), &case()) {
            Err(ToolError::SchemaMismatch { raw, .. }) => assert_eq!(raw, r#"{"maks": 1}"#),
            other => panic!("expected schema mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_host_times_out() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let tool = RemoteTool::new("seg", Capability::Segment, &format!("http://127.0.0.1:{port}"), 1, Duration::from_millis(300))
            .unwrap();
        assert!(matches!(tool.invoke(&seg_request(), &case()), Err(ToolError::Timeout { .. })));
    }

    #[test]
    fn silent_server_times_out_within_budget() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let conn = listener.accept();
            thread::sleep(Duration::from_millis(800));
            drop(conn);
        });
        let tool = RemoteTool::new("seg", Capability::Segment, &url, 1, Duration::from_millis(200)).unwrap();
        let start = Instant::now();
        assert!(matches!(tool.invoke(&seg_request(), &case()), Err(ToolError::Timeout { .. })));
        assert!(start.elapsed() < Duration::from_millis(700));
        handle.join().unwrap();
    }

    #[test]
    fn classify_ground_vqa_report_parse() {
        let responses = vec![
            (200, r#"{"labels":[{"name":"Cardiomegaly","score":0.8},{"name":"pleural effusion","score":0.3}]}"#.to_string()),
            (200, r#"{"boxes":[[1,2,10,20]],"confidence":0.7}"#.to_string()),
            (200, r#"{"answer":"Yes.","confidence":0.6}"#.to_string()),
            (200, r#"{"findings_text":"No pneumothorax.","confidence":0.9}"#.to_string()),
            (200, r#"{"status":"ok"}"#.to_string()),
        ];
        let (url, rx) = fake_server(responses);
        let case = case();
        let t = |cap| RemoteTool::new("r", cap, &url, 1, DEFAULT_TIMEOUT).unwrap();
        let out = t(Capability::Classify)
            .invoke(&ToolRequest::Classify { slot: ImageSlot::Current }, &case)
            .unwrap();
        assert_eq!(out.score(FindingLabel::Cardiomegaly), Some(0.8));
        assert!((out.confidence.get() - 0.7).abs() < 1e-12);
        let out = t(Capability::Ground)
            .invoke(
                &ToolRequest::Ground {
                    finding: FindingLabel::PleuralEffusion,
                    slot: ImageSlot::Current,
                },
                &case,
            )
            .unwrap();
        assert_eq!(out.payload, Payload::Boxes(vec![BBox::new(1, 2, 10, 20).unwrap()]));
        let out = t(Capability::Vqa)
            .invoke(&ToolRequest::Vqa { question: "Is there X?".into() }, &case)
            .unwrap();
        assert_eq!(out.payload, Payload::Text("Yes.".into()));
        let out = t(Capability::Report).invoke(&ToolRequest::Report, &case).unwrap();
        assert_eq!(out.payload, Payload::Text("No pneumothorax.".into()));
        RemoteTool::health(&url, DEFAULT_TIMEOUT).unwrap();
        let paths: Vec<String> = rx.try_iter().map(|(l, _)| l).collect();
        assert_eq!(paths.len(), 5);
        assert!(paths[4].starts_with("GET /health"));
    }

    #[test]
    fn measure_has_no_wire_endpoint() {
        assert!(RemoteTool::new("m", Capability::Measure, "http://x", 1, DEFAULT_TIMEOUT).is_err());
    }
}
