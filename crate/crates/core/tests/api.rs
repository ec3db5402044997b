mod common;

use std::collections::HashSet;
use std::sync::Arc;

use advloop_core::api::{self, AppState};
use advloop_core::config::{Role, SeedUser, ServiceConfig};
use advloop_core::reference::ReferenceModel;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

struct Api {
    base: String,
    http: Client,
}

impl Api {
    async fn start() -> Api {
        let mut config = ServiceConfig::default();
        let user = |id: &str, roles: &[Role]| SeedUser {
            id: id.into(),
            secret: format!("{id}-pw"),
            roles: roles.to_vec(),
        };
        config.users = vec![
            user("owner", &[Role::Owner]),
            user("v1", &[Role::Validator]),
            user("v2", &[Role::Validator]),
            user("v3", &[Role::Validator]),
        ];
        for i in 0..10 {
            config.users.push(user(&format!("ann{i}"), &[Role::Annotator, Role::Validator]));
        }
        config.salt = Some("test-salt".into());
        let state = Arc::new(AppState::from_config(config).unwrap());
        let (addr, _) = api::spawn_local(state).await.unwrap();
        Api {
            base: format!("http://{addr}"),
            http: Client::builder().no_proxy().build().unwrap(),
        }
    }

    async fn login(&self, user: &str, role: &str) -> String {
        let (status, body) = self
            .call("POST", "/v1/sessions", None, None, Some(json!({ "user_id": user, "secret": format!("{user}-pw"), "role": role })))
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["session_token"].as_str().unwrap().to_owned()
    }

    async fn call(
        &self,
        method: &str,
        path: &str,
        token: Option<&str>,
        key: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        let url = format!("{}{path}", self.base);
        let mut req = match method {
            "GET" => self.http.get(url),
            _ => self.http.post(url),
        };
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let value = resp.json().await.unwrap_or(Value::Null);
        (status, value)
    }

    /// Creates a hate task and opens its first round against the reference model.
    async fn hate_round(&self, owner: &str) -> (u64, u64) {
        let (s, task) = self
            .call(
                "POST",
                "/v1/tasks",
                Some(owner),
                None,
                Some(json!({ "name": "hate", "kind": "hate", "label_set": ["hateful", "not_hateful"] })),
            )
            .await;
        assert_eq!(s, StatusCode::CREATED, "{task}");
        assert_eq!(task["validation_policy"]["quorum"], 3);
        let (s, pool) = self
            .call("POST", "/v1/pools", Some(owner), None, Some(json!({ "name": "none", "contexts": [] })))
            .await;
        assert_eq!(s, StatusCode::CREATED, "{pool}");
        let task_id = task["task_id"].as_u64().unwrap();
        let endpoint = ReferenceModel::Hate.endpoint(&self.base);
        let (s, round) = self
            .call(
                "POST",
                &format!("/v1/tasks/{task_id}/rounds"),
                Some(owner),
                None,
                Some(json!({ "endpoints": [endpoint], "context_pool_id": pool["pool_id"] })),
            )
            .await;
        assert_eq!(s, StatusCode::CREATED, "{round}");
        (task_id, round["round_id"].as_u64().unwrap())
    }
}

fn hate_example(text: &str, label: &str) -> Value {
    json!({ "inputs": { "kind": "hate", "text": text, "label": label } })
}

#[tokio::test]
async fn sessions_and_roles() {
    let api = Api::start().await;
    let (s, body) = api.call("POST", "/v1/tasks", None, None, Some(json!({}))).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "unauthorized");

    let (s, body) = api
        .call("POST", "/v1/sessions", None, None, Some(json!({ "user_id": "owner", "secret": "nope" })))
        .await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert!(body["message"].is_string());

    let (s, _) = api
        .call("POST", "/v1/sessions", None, None, Some(json!({ "user_id": "v1", "secret": "v1-pw", "role": "owner" })))
        .await;
    assert_eq!(s, StatusCode::FORBIDDEN);

    let v1 = api.login("v1", "validator").await;
    let (s, body) = api
        .call("POST", "/v1/tasks", Some(&v1), None, Some(json!({ "name": "t", "kind": "hate" })))
        .await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(body["code"], "forbidden");

    let (s, body) = api.call("GET", "/v1/tasks/1", Some("bogus"), None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED, "{body}");
}

#[tokio::test]
async fn task_creation_fills_defaults_and_reports_errors() {
    let api = Api::start().await;
    let owner = api.login("owner", "owner").await;
    let (s, task) = api
        .call("POST", "/v1/tasks", Some(&owner), None, Some(json!({ "name": "qa", "kind": "qa" })))
        .await;
    assert_eq!(s, StatusCode::CREATED, "{task}");
    assert_eq!(task["span_f1_threshold"], 0.4);
    assert_eq!(task["task_type"], "span_extraction");

    let (s, body) = api
        .call("POST", "/v1/tasks", Some(&owner), None, Some(json!({ "name": "qa", "kind": "qa" })))
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "duplicate-name");

    let (s, body) = api
        .call(
            "POST",
            "/v1/tasks",
            Some(&owner),
            None,
            Some(json!({ "name": "s", "kind": "sentiment", "label_set": ["only"] })),
        )
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid-label-set");

    let (s, body) = api.call("GET", "/v1/tasks/77", Some(&owner), None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not-found");

    let (s, body) = api
        .call("POST", "/v1/tasks", Some(&owner), None, Some(json!("not an object")))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid-body");

    let (s, body) = api.call("GET", "/health", None, None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn submission_is_idempotent() {
    let api = Api::start().await;
    let owner = api.login("owner", "owner").await;
    let (_, round) = api.hate_round(&owner).await;
    let alice = api.login("ann0", "annotator").await;
    let path = format!("/v1/rounds/{round}/examples");

    let (s, body) = api
        .call("POST", &path, Some(&alice), None, Some(hate_example("hello", "not_hateful")))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "missing-idempotency-key");

    let (s1, first) = api
        .call("POST", &path, Some(&alice), Some("k-1"), Some(hate_example("vexnar folk", "not_hateful")))
        .await;
    assert_eq!(s1, StatusCode::CREATED, "{first}");
    assert_eq!(first["verdict"]["combined"], true);
    assert_eq!(first["next_state"], "pending_validation");
    let (s2, again) = api
        .call("POST", &path, Some(&alice), Some("k-1"), Some(hate_example("vexnar folk", "not_hateful")))
        .await;
    assert_eq!(s2, StatusCode::CREATED);
    assert_eq!(first, again);

    let (_, other) = api
        .call("POST", &path, Some(&alice), Some("k-2"), Some(hate_example("vexnar folk", "not_hateful")))
        .await;
    assert_ne!(other["example_id"], first["example_id"]);

    let owner_stats = api.call("GET", "/v1/tasks/1/stats", Some(&owner), None, None).await.1;
    assert_eq!(owner_stats["examples"], 2);
}

#[tokio::test]
async fn closed_round_rejects_submissions() {
    let api = Api::start().await;
    let owner = api.login("owner", "owner").await;
    let (_, round) = api.hate_round(&owner).await;
    let (s, closed) = api
        .call("POST", &format!("/v1/rounds/{round}/close"), Some(&owner), None, None)
        .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(closed["status"], "closed");
    let alice = api.login("ann0", "annotator").await;
    let (s, body) = api
        .call(
            "POST",
            &format!("/v1/rounds/{round}/examples"),
            Some(&alice),
            Some("k"),
            Some(hate_example("hello", "not_hateful")),
        )
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "closed-round");
    assert!(body.get("detail").is_some());
    let (s, body) = api
        .call("POST", &format!("/v1/rounds/{round}/close"), Some(&owner), None, None)
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "already-closed");
}

#[tokio::test]
async fn unhealthy_endpoint_is_a_gateway_error() {
    let api = Api::start().await;
    let owner = api.login("owner", "owner").await;
    let (_, task) = api
        .call(
            "POST",
            "/v1/tasks",
            Some(&owner),
            None,
            Some(json!({ "name": "h", "kind": "hate", "label_set": ["hateful", "not_hateful"] })),
        )
        .await;
    let (_, pool) = api
        .call("POST", "/v1/pools", Some(&owner), None, Some(json!({ "name": "p", "contexts": [] })))
        .await;
    let dead = common::dead_address().await;
    let (s, body) = api
        .call(
            "POST",
            &format!("/v1/tasks/{}/rounds", task["task_id"]),
            Some(&owner),
            None,
            Some(json!({
                "endpoints": [{ "endpoint_id": "gone", "base_url": format!("http://{dead}"), "task_type": "classification" }],
                "context_pool_id": pool["pool_id"]
            })),
        )
        .await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    assert_eq!(body["code"], "endpoint-unhealthy");
    assert_eq!(body["detail"]["endpoint_id"], "gone");
}

#[tokio::test]
async fn ten_concurrent_annotators() {
    let api = Arc::new(Api::start().await);
    let owner = api.login("owner", "owner").await;
    let (task, round) = api.hate_round(&owner).await;

    let mut handles = Vec::new();
    for i in 0..10 {
        let api = api.clone();
        handles.push(tokio::spawn(async move {
            let token = api.login(&format!("ann{i}"), "annotator").await;
            let mut ids = Vec::new();
            for j in 0..5 {
                let text = if j % 2 == 0 { format!("zorblax {i} {j}") } else { format!("calm words {i} {j}") };
                let (s, body) = api
                    .call(
                        "POST",
                        &format!("/v1/rounds/{round}/examples"),
                        Some(&token),
                        Some(&format!("sub-{j}")),
                        Some(hate_example(&text, "not_hateful")),
                    )
                    .await;
                assert_eq!(s, StatusCode::CREATED, "{body}");
                ids.push(body["example_id"].as_u64().unwrap());
            }
            ids
        }));
    }
    let mut all = HashSet::new();
    for h in handles {
        for id in h.await.unwrap() {
            assert!(all.insert(id), "duplicate example id {id}");
        }
    }
    assert_eq!(all.len(), 50);
    let (_, stats) = api.call("GET", &format!("/v1/tasks/{task}/stats"), Some(&owner), None, None).await;
    assert_eq!(stats["examples"], 50);
    assert_eq!(stats["verified_errors"], 0);
}

#[tokio::test]
async fn validation_and_leaderboard_over_http() {
    let api = Api::start().await;
    let owner = api.login("owner", "owner").await;
    let (task, round) = api.hate_round(&owner).await;
    let author = api.login("ann0", "annotator").await;
    let (_, sub) = api
        .call(
            "POST",
            &format!("/v1/rounds/{round}/examples"),
            Some(&author),
            Some("a"),
            Some(hate_example("grimbly is a fine word", "not_hateful")),
        )
        .await;
    let example = sub["example_id"].as_u64().unwrap();
    let (s, _) = api
        .call(
            "POST",
            &format!("/v1/examples/{example}/explanations"),
            Some(&author),
            None,
            Some(json!({ "why_correct": "no target", "why_model_wrong_or_right": "keyword" })),
        )
        .await;
    assert_eq!(s, StatusCode::OK);

    // The author's validator session cannot see or vote on their own ticket.
    let author_as_validator = api.login("ann0", "validator").await;
    let (_, next) = api.call("GET", "/v1/validation/next", Some(&author_as_validator), None, None).await;
    assert!(next["ticket"].is_null());

    let mut ticket_id = None;
    for v in ["v1", "v2", "v3"] {
        let token = api.login(v, "validator").await;
        let (s, next) = api.call("GET", "/v1/validation/next", Some(&token), None, None).await;
        assert_eq!(s, StatusCode::OK);
        let ticket = &next["ticket"];
        assert!(ticket.get("author_id").is_none() && !ticket.to_string().contains("ann0"), "{ticket}");
        let id = ticket["ticket_id"].as_u64().unwrap();
        ticket_id = Some(id);
        let (s, out) = api
            .call(
                "POST",
                &format!("/v1/validation/{id}/votes"),
                Some(&token),
                None,
                Some(json!({ "judgment": "correct" })),
            )
            .await;
        assert_eq!(s, StatusCode::CREATED, "{out}");
    }
    let v1 = api.login("v1", "validator").await;
    let (s, body) = api
        .call(
            "POST",
            &format!("/v1/validation/{}/votes", ticket_id.unwrap()),
            Some(&v1),
            None,
            Some(json!({ "judgment": "correct" })),
        )
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "ticket-closed");

    let (_, stats) = api.call("GET", &format!("/v1/tasks/{task}/stats"), Some(&owner), None, None).await;
    assert_eq!(stats["verified_errors"], 1);
    assert_eq!(stats["vmer"], "100.00%");

    let (s, board) = api
        .call("GET", &format!("/v1/tasks/{task}/leaderboard/users"), Some(&author), None, None)
        .await;
    assert_eq!(s, StatusCode::OK);
    assert!(!board.to_string().contains("ann0"), "{board}");
    assert_eq!(board["entries"][0]["annotator"], board["your_handle"]);
    assert_eq!(board["entries"][0]["badges"], json!([1]));

    let (s, eval) = api
        .call(
            "POST",
            &format!("/v1/tasks/{task}/evaluate"),
            Some(&owner),
            None,
            Some(json!({ "endpoint": ReferenceModel::Hate.endpoint(&api.base), "gamma": 1.0 })),
        )
        .await;
    assert_eq!(s, StatusCode::OK, "{eval}");
    assert_eq!(eval["aggregate"], 0.0);
}

#[tokio::test]
async fn context_endpoint_serves_conditions_and_contexts() {
    let api = Api::start().await;
    let owner = api.login("owner", "owner").await;
    let (_, task) = api
        .call(
            "POST",
            "/v1/tasks",
            Some(&owner),
            None,
            Some(json!({ "name": "s", "kind": "sentiment", "label_set": ["positive", "negative", "neutral"] })),
        )
        .await;
    assert_eq!(task["condition_assignment_enabled"], true);
    let (_, pool) = api
        .call(
            "POST",
            "/v1/pools",
            Some(&owner),
            None,
            Some(json!({ "name": "reviews", "contexts": [{ "text": "Decent noodles.", "source_tag": "yelp" }] })),
        )
        .await;
    let (_, round) = api
        .call(
            "POST",
            &format!("/v1/tasks/{}/rounds", task["task_id"]),
            Some(&owner),
            None,
            Some(json!({ "endpoints": [ReferenceModel::Sentiment.endpoint(&api.base)], "context_pool_id": pool["pool_id"] })),
        )
        .await;
    let ann = api.login("ann3", "annotator").await;
    let path = format!("/v1/rounds/{}/context", round["round_id"]);
    let (s, first) = api.call("GET", &path, Some(&ann), None, None).await;
    assert_eq!(s, StatusCode::OK, "{first}");
    assert_eq!(first["condition"], "prompt");
    assert_eq!(first["context"]["text"], "Decent noodles.");
    let (_, second) = api.call("GET", &path, Some(&ann), None, None).await;
    assert_eq!(second["condition"], "no_prompt");
    assert!(second["context"].is_null());
}
