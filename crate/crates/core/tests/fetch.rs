use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use roadweave::fetch::{FetchError, FetchPolicy, Fetcher, TileRequest};
use roadweave::tile::{StitchFrame, TileCoord};

type Handler = dyn Fn(&str, usize, &HashMap<String, String>) -> (u16, Vec<(String, String)>, Vec<u8>)
    + Send
    + Sync;

struct Stub {
    base: String,
    hits: Arc<Mutex<HashMap<String, usize>>>,
    in_flight: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

impl Stub {
    fn start(delay: Duration, handler: Arc<Handler>) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(Mutex::new(HashMap::new()));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (h, f, p) = (hits.clone(), in_flight.clone(), peak.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (h, f, p, handler) = (h.clone(), f.clone(), p.clone(), handler.clone());
                std::thread::spawn(move || serve(stream, delay, &h, &f, &p, &*handler));
            }
        });
        Stub {
            base,
            hits,
            in_flight,
            peak,
        }
    }

    fn template(&self) -> String {
        format!("{}/{{z}}/{{x}}/{{y}}.png", self.base)
    }

    fn total_hits(&self) -> usize {
        self.hits.lock().unwrap().values().sum()
    }
}

fn serve(
    stream: TcpStream,
    delay: Duration,
    hits: &Mutex<HashMap<String, usize>>,
    in_flight: &AtomicUsize,
    peak: &AtomicUsize,
    handler: &Handler,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut stream = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
        let mut headers = HashMap::new();
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
            }
        }
        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        peak.fetch_max(now, Ordering::SeqCst);
        let n = {
            let mut g = hits.lock().unwrap();
            let e = g.entry(path.clone()).or_insert(0);
            *e += 1;
            *e
        };
        std::thread::sleep(delay);
        let (status, extra, body) = handler(&path, n, &headers);
        in_flight.fetch_sub(1, Ordering::SeqCst);
        let mut head = format!("HTTP/1.1 {status} X\r\nContent-Length: {}\r\n", body.len());
        for (k, v) in extra {
            head.push_str(&format!("{k}: {v}\r\n"));
        }
        head.push_str("\r\n");
        if stream
            .write_all(head.as_bytes())
            .and_then(|_| stream.write_all(&body))
            .is_err()
        {
            return;
        }
    }
}

fn png_tile(px: u32, shade: u8) -> Vec<u8> {
    let img = image::RgbImage::from_pixel(px, px, image::Rgb([shade, 100, 200]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn ok_png() -> Arc<Handler> {
    let tile = png_tile(256, 7);
    Arc::new(move |_, _, _| {
        (
            200,
            vec![("Content-Type".into(), "image/png".into())],
            tile.clone(),
        )
    })
}

fn quick_policy() -> FetchPolicy {
    FetchPolicy {
        rate: 0.0,
        backoff_base: Duration::from_millis(5),
        max_attempts: 3,
        ..FetchPolicy::default()
    }
}

fn coord() -> TileCoord {
    TileCoord::new(18, 100, 200).unwrap()
}

#[test]
fn cached_tile_needs_no_network() {
    let stub = Stub::start(Duration::ZERO, ok_png());
    let dir = tempfile::tempdir().unwrap();
    let f = Fetcher::new(&stub.template(), dir.path(), quick_policy()).unwrap();
    let a = f
        .fetch_tile(TileRequest::new(coord(), &stub.template()).unwrap())
        .unwrap();
    assert_eq!((a.attempt, a.from_cache), (1, false));
    assert_eq!(stub.total_hits(), 1);

    let warm = Fetcher::new(&stub.template(), dir.path(), quick_policy()).unwrap();
    let b = warm
        .fetch_tile(TileRequest::new(coord(), &stub.template()).unwrap())
        .unwrap();
    assert!(b.from_cache);
    assert_eq!(b.bytes, a.bytes);
    assert_eq!(warm.network_calls(), 0);
    assert_eq!(stub.total_hits(), 1);
}

#[test]
fn transient_503_is_retried() {
    let tile = png_tile(256, 1);
    let stub = Stub::start(
        Duration::ZERO,
        Arc::new(move |_, n, _| {
            if n == 1 {
                (503, vec![], vec![])
            } else {
                (200, vec![], tile.clone())
            }
        }),
    );
    let dir = tempfile::tempdir().unwrap();
    let f = Fetcher::new(&stub.template(), dir.path(), quick_policy()).unwrap();
    let a = f
        .fetch_tile(TileRequest::new(coord(), &stub.template()).unwrap())
        .unwrap();
    assert_eq!(a.attempt, 2);
    assert_eq!(a.content_type, "image/png");
}

#[test]
fn permanent_failure_stops_at_max_attempts() {
    let stub = Stub::start(Duration::ZERO, Arc::new(|_, _, _| (500, vec![], vec![])));
    let dir = tempfile::tempdir().unwrap();
    let f = Fetcher::new(&stub.template(), dir.path(), quick_policy()).unwrap();
    match f.fetch_tile(TileRequest::new(coord(), &stub.template()).unwrap()) {
        Err(FetchError::Http {
            status: 500,
            attempts: 3,
            ..
        }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.total_hits(), 3);

    let stub404 = Stub::start(Duration::ZERO, Arc::new(|_, _, _| (404, vec![], vec![])));
    let f = Fetcher::new(&stub404.template(), dir.path(), quick_policy()).unwrap();
    assert!(matches!(
        f.fetch_tile(TileRequest::new(coord(), &stub404.template()).unwrap()),
        Err(FetchError::Http {
            status: 404,
            attempts: 1,
            ..
        })
    ));
}

#[test]
fn corrupt_payload_is_not_cached() {
    let stub = Stub::start(
        Duration::ZERO,
        Arc::new(|_, n, _| {
            if n == 1 {
                (200, vec![], b"not an image".to_vec())
            } else {
                (200, vec![], png_tile(128, 0))
            }
        }),
    );
    let dir = tempfile::tempdir().unwrap();
    let f = Fetcher::new(&stub.template(), dir.path(), quick_policy()).unwrap();
    let req = || TileRequest::new(coord(), &stub.template()).unwrap();
    assert!(matches!(
        f.fetch_tile(req()),
        Err(FetchError::Corrupt { .. })
    ));
    // wrong size
    assert!(matches!(
        f.fetch_tile(req()),
        Err(FetchError::Corrupt { .. })
    ));
    assert!(!f.cache().tile_path(coord()).exists());
}

#[test]
fn offline_miss_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let policy = FetchPolicy {
        offline: true,
        ..quick_policy()
    };
    let f = Fetcher::new("http://127.0.0.1:9/{z}/{x}/{y}.png", dir.path(), policy).unwrap();
    assert!(matches!(
        f.fetch_tile(TileRequest::new(coord(), "http://127.0.0.1:9/{z}/{x}/{y}.png").unwrap()),
        Err(FetchError::Offline(_))
    ));
    assert_eq!(f.network_calls(), 0);
}

#[test]
fn revalidation_uses_etag() {
    let tile = png_tile(256, 9);
    let stub = Stub::start(
        Duration::ZERO,
        Arc::new(move |_, _, h| {
            if h.get("if-none-match").map(String::as_str) == Some("\"v1\"") {
                (304, vec![], vec![])
            } else {
                (200, vec![("ETag".into(), "\"v1\"".into())], tile.clone())
            }
        }),
    );
    let dir = tempfile::tempdir().unwrap();
    let policy = FetchPolicy {
        revalidate: true,
        ..quick_policy()
    };
    let f = Fetcher::new(&stub.template(), dir.path(), policy).unwrap();
    let req = || TileRequest::new(coord(), &stub.template()).unwrap();
    let a = f.fetch_tile(req()).unwrap();
    let b = f.fetch_tile(req()).unwrap();
    assert!(!a.from_cache && b.from_cache);
    assert_eq!(a.bytes, b.bytes);
    assert_eq!(stub.total_hits(), 2);
}

#[test]
fn key_placeholder_comes_from_env() {
    let tile = png_tile(256, 3);
    let stub = Stub::start(
        Duration::ZERO,
        Arc::new(move |p, _, _| {
            if p.ends_with("?k=s3cret") {
                (200, vec![], tile.clone())
            } else {
                (403, vec![], vec![])
            }
        }),
    );
    let template = format!("{}/{{z}}/{{x}}/{{y}}.png?k={{key}}", stub.base);
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var(roadweave::fetch::KEY_ENV, "s3cret");
    let f = Fetcher::new(&template, dir.path(), quick_policy()).unwrap();
    let a = f.fetch_tile(TileRequest::new(coord(), &template).unwrap());
    std::env::remove_var(roadweave::fetch::KEY_ENV);
    assert!(a.is_ok(), "{a:?}");
}

fn frame() -> StitchFrame {
    StitchFrame::new(TileCoord::new(18, 160, 320).unwrap(), 16, 256).unwrap()
}

#[test]
fn full_frame_respects_concurrency_cap() {
    let stub = Stub::start(Duration::from_millis(5), ok_png());
    let dir = tempfile::tempdir().unwrap();
    let policy = FetchPolicy {
        concurrency: 4,
        ..quick_policy()
    };
    let f = Fetcher::new(&stub.template(), dir.path(), policy).unwrap();
    let assets = f.fetch_frame(&frame()).unwrap();
    assert_eq!(assets.len(), 256);
    let order: Vec<TileCoord> = assets.iter().map(|a| a.coord).collect();
    assert_eq!(order, frame().tiles().collect::<Vec<_>>());
    assert!(stub.peak.load(Ordering::SeqCst) <= 4);
    assert!(stub.peak.load(Ordering::SeqCst) >= 2);
    assert_eq!(stub.in_flight.load(Ordering::SeqCst), 0);

    let again = f.fetch_frame(&frame()).unwrap();
    assert_eq!(
        again,
        assets
            .into_iter()
            .map(|mut a| {
                a.attempt = 0;
                a.from_cache = true;
                a
            })
            .collect::<Vec<_>>()
    );
    assert_eq!(stub.total_hits(), 256);
}

#[test]
fn dead_tile_is_named() {
    let dead = TileCoord::new(18, 165, 327).unwrap();
    let tile = png_tile(256, 5);
    let dead_path = format!("/{}/{}/{}.png", dead.z, dead.x, dead.y);
    let stub = Stub::start(
        Duration::ZERO,
        Arc::new(move |p, _, _| {
            if p == dead_path {
                (500, vec![], vec![])
            } else {
                (200, vec![], tile.clone())
            }
        }),
    );
    let dir = tempfile::tempdir().unwrap();
    let f = Fetcher::new(&stub.template(), dir.path(), quick_policy()).unwrap();
    match f.fetch_frame(&frame()) {
        Err(FetchError::PartialFrame { missing, .. }) => assert_eq!(missing, vec![dead]),
        other => panic!("unexpected {:?}", other.map(|v| v.len())),
    }
}

#[test]
fn rate_limit_bounds_wall_time() {
    let stub = Stub::start(Duration::ZERO, ok_png());
    let dir = tempfile::tempdir().unwrap();
    let policy = FetchPolicy {
        rate: 10.0,
        concurrency: 16,
        ..quick_policy()
    };
    let f = Fetcher::new(&stub.template(), dir.path(), policy).unwrap();
    let t = Instant::now();
    let assets = f.fetch_frame(&frame()).unwrap();
    let elapsed = t.elapsed();
    assert_eq!(assets.len(), 256);
    assert!(elapsed >= Duration::from_millis(25_600), "{elapsed:?}");
    assert!(elapsed < Duration::from_secs(40), "{elapsed:?}");
}
