use std::path::Path;

use inkrestore::blindtest::wire::CreateSession;
use inkrestore::blindtest::Judgment;
use inkrestore::raster::{save_raster, RasterImage};
use inkrestore_client::Client;
use inkrestore_service::{bind, ServeConfig};
use tempfile::TempDir;

struct Fixture {
    _dirs: TempDir,
    client: Client,
    data_dir: std::path::PathBuf,
}

fn write_pool(dir: &Path, n: usize, color: [u8; 3], size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let mut img = RasterImage::filled(size, size, &color);
        img.set_pixel(i % size, 0, &[0, 0, 0]);
        save_raster(&img, &dir.join(format!("p{i:03}.png"))).unwrap();
    }
}

async fn start(token: Option<&str>) -> Fixture {
    let dirs = tempfile::tempdir().unwrap();
    let clean = dirs.path().join("clean");
    let corrected = dirs.path().join("corrected");
    write_pool(&clean, 8, [230, 170, 210], 40);
    write_pool(&corrected, 8, [220, 160, 200], 40);
    let data_dir = dirs.path().join("data");
    let cfg = ServeConfig {
        clean_dir: clean,
        corrected_dir: corrected,
        data_dir: data_dir.clone(),
        ui_dir: None,
        token: token.map(str::to_string),
        default_items: 10,
        default_patch: 32,
    };
    let (addr, server) = bind(cfg, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    tokio::spawn(server.with_graceful_shutdown(std::future::pending()));
    Fixture {
        _dirs: dirs,
        client: Client::new(format!("http://{addr}")).with_token(token.map(str::to_string)),
        data_dir,
    }
}

#[tokio::test]
async fn full_session_flow() {
    let f = start(None).await;
    let created = f.client.create_session(&CreateSession { seed: Some(4), ..Default::default() }).await.unwrap();
    assert_eq!((created.n, created.patch_size, created.seed), (10, 32, 4));
    let items = f.client.items(&created.session_id).await.unwrap().item_ids;
    assert_eq!(items.len(), 10);

    let png = f.client.image(&items[0]).await.unwrap();
    let img = RasterImage::from_encoded_bytes(&png).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let r = f.client.answer(&items[0], Judgment::Corrected).await.unwrap();
    assert_eq!((r.answered, r.complete), (1, false));
    let dup = f.client.answer(&items[0], Judgment::Corrected).await.unwrap_err();
    assert_eq!(dup.status().unwrap().as_u16(), 409);

    let early = f.client.report(&created.session_id, false).await.unwrap_err();
    assert_eq!(early.status().unwrap().as_u16(), 409);
    assert!(f.client.report(&created.session_id, true).await.unwrap().partial);

    // A reload sees the answer that was already given.
    let view = f.client.session(&created.session_id).await.unwrap();
    assert_eq!(view.answered, 1);
    let json = serde_json::to_string(&view).unwrap();
    assert!(!json.contains("truth") && !json.contains(".png"));

    for id in &items[1..] {
        f.client.answer(id, Judgment::OriginalClean).await.unwrap();
    }
    let report = f.client.report(&created.session_id, false).await.unwrap();
    assert_eq!(report.confusion.total(), 10);
    assert!(!report.partial);
    assert!(f.data_dir.join(format!("{}.json", created.session_id)).exists());
}

#[tokio::test]
async fn same_seed_gives_same_presentation() {
    let f = start(None).await;
    let req = CreateSession { seed: Some(11), ..Default::default() };
    let a = f.client.create_session(&req).await.unwrap();
    let b = f.client.create_session(&req).await.unwrap();
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    for (sid, out) in [(&a.session_id, &mut pa), (&b.session_id, &mut pb)] {
        for id in f.client.items(sid).await.unwrap().item_ids {
            out.push(f.client.image(&id).await.unwrap());
        }
    }
    assert_eq!(pa, pb);
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let f = start(None).await;
    let missing = f.client.items("nosuchsession").await.unwrap_err();
    assert_eq!(missing.status().unwrap().as_u16(), 404);
    let odd = f.client.create_session(&CreateSession { n: Some(7), ..Default::default() }).await.unwrap_err();
    assert_eq!(odd.status().unwrap().as_u16(), 422);
    let big = f.client.create_session(&CreateSession { n: Some(40), ..Default::default() }).await.unwrap_err();
    assert_eq!(big.status().unwrap().as_u16(), 422);
    let unknown = f.client.answer("nosuchsession-0001", Judgment::Corrected).await.unwrap_err();
    assert_eq!(unknown.status().unwrap().as_u16(), 404);
}

#[tokio::test]
async fn token_is_enforced() {
    let f = start(Some("s3cret")).await;
    f.client.create_session(&CreateSession::default()).await.unwrap();
    let anonymous = Client::new(f.client_base());
    let e = anonymous.create_session(&CreateSession::default()).await.unwrap_err();
    assert_eq!(e.status().unwrap().as_u16(), 401);
}

#[tokio::test]
async fn concurrent_answers_to_one_item_record_once() {
    let f = start(None).await;
    let s = f.client.create_session(&CreateSession::default()).await.unwrap();
    let id = f.client.items(&s.session_id).await.unwrap().item_ids[3].clone();
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let (c, id) = (f.client.clone(), id.clone());
            tokio::spawn(async move { c.answer(&id, Judgment::Corrected).await.is_ok() })
        })
        .collect();
    let mut ok = 0;
    for t in tasks {
        ok += t.await.unwrap() as usize;
    }
    assert_eq!(ok, 1);
    assert_eq!(f.client.session(&s.session_id).await.unwrap().answered, 1);
}

impl Fixture {
    fn client_base(&self) -> String {
        self.client.base().to_string()
    }
}
