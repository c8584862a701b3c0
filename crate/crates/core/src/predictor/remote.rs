//! HTTP client for a predictor served over the JSON wire protocol:
//! `POST /predict`, `POST /predict_batch`, `GET /info`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{check_mask, ClassProbability, MaskPattern, Predictor, PredictorError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorInfo {
    pub name: String,
    pub max_tokens: usize,
    pub deterministic: bool,
}

#[derive(Debug, Serialize)]
struct PredictRequest<'a> {
    tokens: &'a [String],
    mask: Vec<u8>,
    mask_token: &'a str,
}

#[derive(Debug, Deserialize)]
struct PredictReply {
    p_positive: f64,
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub max_in_flight: usize,
    pub batch_size: usize,
    pub timeout: Duration,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self { max_in_flight: 4, batch_size: 256, timeout: Duration::from_secs(60) }
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut count = self.count.lock().unwrap();
        while *count >= self.limit {
            count = self.freed.wait(count).unwrap();
        }
        *count += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemotePredictor {
    base_url: String,
    client: Client,
    info: PredictorInfo,
    options: RemoteOptions,
    in_flight: InFlight,
}

impl RemotePredictor {
    /// Connects and fetches `/info`; fails with `PredictorUnavailable` when
    /// the server cannot be reached.
    pub fn connect(base_url: &str, options: RemoteOptions) -> Result<Self, PredictorError> {
        let client = Client::builder()
            .timeout(options.timeout)
            .build()
            .map_err(|e| PredictorError::PredictorUnavailable(e.to_string()))?;
        let base_url = base_url.trim_end_matches('/').to_string();
        let response = client
            .get(format!("{base_url}/info"))
            .send()
            .map_err(|e| PredictorError::PredictorUnavailable(format!("{base_url}: {e}")))?;
        let info: PredictorInfo = decode(response)?;
        let in_flight =
            InFlight { count: Mutex::new(0), freed: Condvar::new(), limit: options.max_in_flight.max(1) };
        Ok(Self { base_url, client, info, options, in_flight })
    }

    pub fn info(&self) -> &PredictorInfo {
        &self.info
    }

    fn post<T: Serialize + ?Sized, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &T,
    ) -> Result<R, PredictorError> {
        let _slot = self.in_flight.acquire();
        let response = self
            .client
            .post(format!("{}{path}", self.base_url))
            .json(body)
            .send()
            .map_err(|e| PredictorError::PredictorUnavailable(e.to_string()))?;
        decode(response)
    }
}

fn decode<R: for<'de> Deserialize<'de>>(response: reqwest::blocking::Response) -> Result<R, PredictorError> {
    let status = response.status();
    if status == StatusCode::SERVICE_UNAVAILABLE {
        return Err(PredictorError::PredictorUnavailable(format!("server replied {status}")));
    }
    if !status.is_success() {
        let body = response.text().unwrap_or_default();
        return Err(PredictorError::ProtocolError(format!("server replied {status}: {body}")));
    }
    let bytes = response.bytes().map_err(|e| PredictorError::ProtocolError(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| PredictorError::ProtocolError(format!("malformed reply: {e}")))
}

impl Predictor for RemotePredictor {
    fn name(&self) -> &str {
        &self.info.name
    }

    fn predict(
        &self,
        tokens: &[String],
        mask: &MaskPattern,
        mask_token: &str,
    ) -> Result<ClassProbability, PredictorError> {
        check_mask(tokens, mask)?;
        let request = PredictRequest { tokens, mask: mask.to_wire(), mask_token };
        let reply: PredictReply = self.post("/predict", &request)?;
        ClassProbability::new(reply.p_positive)
    }

    fn predict_batch(
        &self,
        tokens: &[String],
        masks: &[MaskPattern],
        mask_token: &str,
    ) -> Result<Vec<ClassProbability>, PredictorError> {
        let mut out = Vec::with_capacity(masks.len());
        for chunk in masks.chunks(self.options.batch_size.max(1)) {
            let requests = chunk
                .iter()
                .map(|mask| {
                    check_mask(tokens, mask)?;
                    Ok(PredictRequest { tokens, mask: mask.to_wire(), mask_token })
                })
                .collect::<Result<Vec<_>, PredictorError>>()?;
            let replies: Vec<PredictReply> = self.post("/predict_batch", &requests)?;
            if replies.len() != requests.len() {
                return Err(PredictorError::ProtocolError(format!(
                    "batch reply has {} entries for {} requests",
                    replies.len(),
                    requests.len()
                )));
            }
            for reply in replies {
                out.push(ClassProbability::new(reply.p_positive)?);
            }
        }
        Ok(out)
    }
}
