//! Headless client against a live server on an ephemeral port.

use std::time::Duration;

use futures::StreamExt;
use reqwest::StatusCode;
use ringflow_service::{router, AppState, ServiceOptions, SessionConfig, TelemetryMessage, TickTelemetry};
use serde_json::{json, Value};

struct Server {
    base: String,
    http: reqwest::Client,
}

impl Server {
    async fn spawn(options: ServiceOptions) -> Self {
        let state = AppState::new(SessionConfig::default(), options);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
        Self {
            base: format!("http://{addr}"),
            http: reqwest::Client::new(),
        }
    }

    async fn default() -> Self {
        Self::spawn(ServiceOptions::default()).await
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn ok(&self, path: &str, body: Value) -> Value {
        let (status, v) = self.post(path, body).await;
        assert_eq!(status, StatusCode::OK, "{path}: {v}");
        v
    }

    async fn step(&self, ticks: u64) {
        self.ok("/session/step", json!({ "ticks": ticks })).await;
    }

    async fn subscribe(&self) -> Subscriber {
        let r = self.http.get(format!("{}/telemetry", self.base)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        Subscriber {
            body: Box::pin(r.bytes_stream()),
            buf: String::new(),
        }
    }
}

struct Subscriber {
    body: std::pin::Pin<Box<dyn futures::Stream<Item = reqwest::Result<bytes::Bytes>> + Send>>,
    buf: String,
}

impl Subscriber {
    /// Next telemetry message, skipping keep-alive comments.
    async fn next(&mut self) -> TelemetryMessage {
        loop {
            if let Some(end) = self.buf.find("\n\n") {
                let event: String = self.buf.drain(..end + 2).collect();
                let data: String = event
                    .lines()
                    .filter_map(|l| l.strip_prefix("data:"))
                    .map(str::trim_start)
                    .collect();
                if data.is_empty() {
                    continue;
                }
                return serde_json::from_str(&data).unwrap();
            }
            let chunk = tokio::time::timeout(Duration::from_secs(10), self.body.next())
                .await
                .expect("telemetry stalled")
                .expect("telemetry closed")
                .unwrap();
            self.buf.push_str(std::str::from_utf8(&chunk).unwrap());
        }
    }

    async fn next_tick(&mut self) -> TickTelemetry {
        loop {
            if let Some(t) = self.next().await.tick() {
                return t.clone();
            }
        }
    }

    async fn ticks_through(&mut self, last: u64) -> Vec<TickTelemetry> {
        let mut out = Vec::new();
        loop {
            let t = self.next_tick().await;
            let done = t.tick >= last;
            out.push(t);
            if done {
                return out;
            }
        }
    }
}

fn sweep_values() -> Vec<f64> {
    (0..60).map(|i| 1.0 - 0.5 * (1.0 - (2.0 * i as f64 / 59.0 - 1.0).abs())).collect()
}

/// Slider sweep driven through the service; counts come from telemetry only.
async fn sweep_through_service(mode: &str) -> (usize, usize) {
    let srv = Server::default().await;
    let mut sub = srv.subscribe().await;
    srv.ok("/session/start", json!({ "mode": mode, "clock": "manual" })).await;
    srv.step(24).await;
    let mut visible = Vec::new();
    for v in sweep_values() {
        let ack = srv.ok("/control", json!({ "type": "set_denoise", "value": v })).await;
        visible.push(ack["visible_tick"].as_u64().unwrap());
        srv.step(1).await;
    }
    assert_eq!(visible, (24..84).collect::<Vec<u64>>());
    let records = sub.ticks_through(83).await;
    let ticks: Vec<u64> = records.iter().map(|r| r.tick).collect();
    assert_eq!(ticks, (0..84).collect::<Vec<u64>>(), "ordered, no gaps, no duplicates");
    for (r, v) in records[24..].iter().zip(sweep_values()) {
        assert_eq!(r.denoise, v);
        assert_eq!(r.controls.len(), 1);
        assert_eq!(r.controls[0].visible_tick, r.tick);
    }
    let completions = records[24..].iter().map(|r| r.completions.len()).sum();
    (completions, records.len() - 24)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sweep_counts_per_slot() {
    assert_eq!(sweep_through_service("per-slot").await, (60, 60));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sweep_counts_global_reset() {
    assert_eq!(sweep_through_service("global-reset").await, (1, 60));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ack_matches_first_reflecting_tick_under_real_clock() {
    let srv = Server::default().await;
    let mut sub = srv.subscribe().await;
    srv.ok("/session/start", json!({ "tick_rate": 100.0 })).await;
    let mut seen = sub.ticks_through(20).await;
    let ack = srv.ok("/control", json!({ "type": "set_denoise", "value": 0.5 })).await;
    assert_eq!(ack["control"], "set_denoise");
    let k = ack["visible_tick"].as_u64().unwrap();
    seen.extend(sub.ticks_through(k + 8).await);
    srv.ok("/session/stop", json!(null)).await;

    assert!(seen.windows(2).all(|w| w[1].tick == w[0].tick + 1));
    let first_new = seen.iter().find(|r| r.denoise == 0.5).unwrap();
    assert_eq!(first_new.tick, k);
    assert_eq!(first_new.controls[0].visible_tick, k);
    assert_eq!(seen[k as usize - 1].denoise, 1.0);
    // Per-slot drain: the first slot admitted with the new value completes S ticks later.
    let effect = seen
        .iter()
        .find(|r| r.completions.iter().any(|c| c.rms_vs_reference.is_some_and(|x| x > 0.0)))
        .unwrap();
    assert_eq!(effect.tick, k + 8);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shared_curve_reaches_next_completion() {
    let srv = Server::default().await;
    let mut sub = srv.subscribe().await;
    srv.ok("/session/start", json!({ "clock": "manual" })).await;
    let patch = json!({ "type": "update_request", "patch": { "solver": "sde", "source": { "kind": "pattern", "key": 50 } } });
    srv.ok("/control", patch).await;
    srv.step(24).await;
    let ack = srv
        .ok("/control", json!({ "type": "set_shared_curve", "name": "sde_denoise_curve", "curve": { "kind": "constant", "value": 0.5 } }))
        .await;
    let k = ack["visible_tick"].as_u64().unwrap();
    srv.step(1).await;
    let records = sub.ticks_through(k).await;
    let last = records.last().unwrap();
    assert_eq!(last.tick, k);
    assert!(last.completions[0].rms_vs_reference.unwrap() > 0.0);
    assert_ne!(last.registry_digest, records[records.len() - 2].registry_digest);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_and_out_of_range_controls_change_nothing() {
    let srv = Server::default().await;
    srv.ok("/session/start", json!({ "clock": "manual" })).await;
    srv.step(10).await;
    let (_, before) = srv.get("/session").await;

    let (status, err) = srv
        .post("/control", json!({ "type": "set_shared_curve", "nmae": "guidance_curve", "curve": { "kind": "constant", "value": 2.0 } }))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "schema");
    let (status, _) = srv
        .post("/control", json!({ "type": "set_shared_curve", "name": "guidance", "curve": { "kind": "constant", "value": 2.0 } }))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, err) = srv.post("/control", json!({ "type": "set_denoise", "value": 1.5 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "rejected");
    let (status, _) = srv
        .post("/control", json!({ "type": "set_shared_curve", "name": "x0_target_strength", "curve": { "kind": "constant", "value": 0.5 } }))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, after) = srv.get("/session").await;
    assert_eq!(before, after);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn lifecycle_errors_and_retained_telemetry() {
    let srv = Server::default().await;
    assert_eq!(srv.post("/session/stop", json!(null)).await.0, StatusCode::CONFLICT);
    assert_eq!(srv.get("/session").await.0, StatusCode::CONFLICT);
    assert_eq!(srv.post("/control", json!({ "type": "set_denoise", "value": 0.5 })).await.0, StatusCode::CONFLICT);
    let (status, err) = srv.post("/session/start", json!({ "dpeth": 4 })).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("schema")));

    let info = srv.ok("/session/start", json!({ "tick_rate": 200.0 })).await;
    assert_eq!(info["running"], true);
    assert_eq!(info["receptive_field"], 15);
    assert_eq!(srv.post("/session/start", json!({})).await.0, StatusCode::CONFLICT);
    let (status, err) = srv.post("/session/step", json!({ "ticks": 1 })).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("rejected")));

    tokio::time::sleep(Duration::from_millis(100)).await;
    let (_, snap) = srv.get("/session").await;
    assert!(snap["snapshot"]["slots"].as_array().unwrap().iter().any(|s| !s.is_null()));
    let stopped = srv.ok("/session/stop", json!(null)).await;
    assert_eq!(stopped["running"], false);
    let last = stopped["last_tick"].as_u64().unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;
    let (_, recent) = srv.get("/telemetry/recent").await;
    let records = recent["records"].as_array().unwrap();
    assert_eq!(records.last().unwrap()["tick"].as_u64(), Some(last));
    assert_eq!(records.len() as u64, last + 1);
    let (_, since) = srv.get(&format!("/telemetry/recent?since={last}")).await;
    assert_eq!(since["records"].as_array().unwrap().len(), 1);
}

fn strip_session(records: &Value) -> Vec<Value> {
    records["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.as_object_mut().unwrap().remove("session");
            r
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_with_same_seed_replays_telemetry() {
    let srv = Server::default().await;
    srv.ok("/session/start", json!({ "clock": "manual", "seed": 77 })).await;
    srv.step(40).await;
    let first = strip_session(&srv.get("/telemetry/recent").await.1);
    srv.ok("/session/stop", json!(null)).await;

    srv.ok("/session/start", json!({ "tick_rate": 400.0, "seed": 77 })).await;
    loop {
        let (_, info) = srv.get("/session").await;
        if info["last_tick"].as_u64().is_some_and(|t| t >= 39) {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    srv.ok("/session/stop", json!(null)).await;
    let second = strip_session(&srv.get("/telemetry/recent").await.1);
    assert_eq!(first.len(), 40);
    assert_eq!(first[..], second[..40]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pcm_latest_serves_windowed_decode() {
    let srv = Server::default().await;
    srv.ok("/session/start", json!({ "clock": "manual" })).await;
    srv.step(5).await;
    assert_eq!(srv.get("/pcm/latest").await.0, StatusCode::NOT_FOUND);
    srv.step(5).await;

    let fetch = |q: &'static str| {
        let url = format!("{}/pcm/latest{q}", srv.base);
        let http = srv.http.clone();
        async move {
            let r = http.get(url).send().await.unwrap();
            assert_eq!(r.status(), StatusCode::OK);
            let header: Value = serde_json::from_str(r.headers()["x-pcm-header"].to_str().unwrap()).unwrap();
            let tick: u64 = r.headers()["x-pcm-tick"].to_str().unwrap().parse().unwrap();
            let bytes = r.bytes().await.unwrap();
            let samples: Vec<i16> = bytes.chunks(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
            (header, tick, samples)
        }
    };
    let (header, tick, full) = fetch("").await;
    assert_eq!(tick, 9);
    assert_eq!(header, json!({ "hop": 64, "start_frame": 0, "frame_count": 96 }));
    assert_eq!(full.len(), 96 * 64);
    assert!(full.iter().any(|s| *s != 0));
    let (header, _, window) = fetch("?start=40&frames=10").await;
    assert_eq!(header["start_frame"], 40);
    assert_eq!(window[..], full[40 * 64..50 * 64]);
    assert_eq!(srv.get("/pcm/latest?start=90&frames=10").await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_subscriber_gets_heartbeats() {
    let srv = Server::spawn(ServiceOptions {
        heartbeat: Duration::from_millis(50),
        ..ServiceOptions::default()
    })
    .await;
    let mut sub = srv.subscribe().await;
    for _ in 0..2 {
        let m = serde_json::to_value(sub.next().await).unwrap();
        assert_eq!(m["kind"], "heartbeat");
        assert_eq!(m["running"], false);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slow_subscriber_is_told_how_much_it_missed() {
    let srv = Server::spawn(ServiceOptions {
        subscriber_backlog: 4,
        ..ServiceOptions::default()
    })
    .await;
    let mut sub = srv.subscribe().await;
    srv.ok("/session/start", json!({ "clock": "max" })).await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    let mut dropped = 0;
    let mut last_tick = None;
    for _ in 0..10_000 {
        let m = sub.next().await;
        match serde_json::to_value(&m).unwrap()["kind"].as_str().unwrap() {
            "dropped" => {
                dropped += serde_json::to_value(&m).unwrap()["count"].as_u64().unwrap();
                break;
            }
            "tick" => {
                let t = m.tick().unwrap().tick;
                assert!(last_tick.is_none_or(|l| t > l));
                last_tick = Some(t);
            }
            _ => {}
        }
    }
    srv.ok("/session/stop", json!(null)).await;
    assert!(dropped > 0);
}
