use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use inkrestore::blindtest::wire::{CreateSession, ErrorBody, SessionCreated};
use inkrestore_client::{Client, ClientError};

async fn stub() -> String {
    let app = Router::new()
        .route(
            "/sessions",
            post(|headers: HeaderMap, Json(req): Json<CreateSession>| async move {
                let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
                Json(SessionCreated {
                    session_id: auth.unwrap_or_default(),
                    n: req.n.unwrap_or(100),
                    patch_size: 500,
                    seed: req.seed.unwrap_or(0),
                })
            }),
        )
        .route(
            "/sessions/:id/items",
            get(|| async {
                (
                    StatusCode::NOT_FOUND,
                    Json(ErrorBody {
                        error: "not_found".into(),
                        message: "session `x`".into(),
                    }),
                )
            }),
        )
        .route(
            "/sessions/:id/report",
            get(|| async { (StatusCode::BAD_GATEWAY, "upstream down") }),
        );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/")
}

#[tokio::test]
async fn sends_body_and_bearer_token() {
    let c = Client::new(stub().await).with_token(Some("tok".into()));
    let r = c
        .create_session(&CreateSession {
            n: Some(10),
            seed: Some(3),
            ..Default::default()
        })
        .await
        .unwrap();
    assert_eq!((r.session_id.as_str(), r.n, r.seed), ("Bearer tok", 10, 3));
}

#[tokio::test]
async fn decodes_error_bodies() {
    let c = Client::new(stub().await);
    match c.items("x").await.unwrap_err() {
        ClientError::Api { status, body } => {
            assert_eq!(status.as_u16(), 404);
            assert_eq!(body.error, "not_found");
        }
        other => panic!("unexpected {other:?}"),
    }
    let e = c.report("x", false).await.unwrap_err();
    assert_eq!(e.status().unwrap().as_u16(), 502);
    assert!(e.to_string().contains("upstream down"));
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let c = Client::new("http://127.0.0.1:1");
    assert!(matches!(c.session("s").await.unwrap_err(), ClientError::Transport(_)));
}
