mod common;
mod oracles;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use a2r2::backend::*;
use a2r2::config::PromptTemplates;
use a2r2::dataset::Instance;
use a2r2::{Error, RasterImage};
use oracles::oracle_levenshtein;

// ---------- local HTTP host ----------

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    body: String,
}

/// Serves `replies` (status, body) in order, one per connection, then stops.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut parts = line.split_whitespace();
            let (method, path) = (parts.next().unwrap().to_string(), parts.next().unwrap().to_string());
            let mut length = 0;
            loop {
                let mut header = String::new();
                reader.read_line(&mut header).unwrap();
                if header.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = header.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                method,
                path,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn fast() -> HttpSettings {
    HttpSettings {
        max_attempts: 3,
        initial_backoff_ms: 1,
        timeout_secs: 5,
        max_in_flight: 2,
    }
}

fn blank_instance() -> Instance {
    Instance {
        id: "t".into(),
        image: RasterImage::white(10, 10).unwrap(),
        ground_truth: None,
    }
}

fn http_client(url: &str, settings: HttpSettings) -> VlmClient {
    let backend = HttpBackend::new(url, settings).unwrap();
    VlmClient::new(backend.open(&blank_instance()).unwrap(), PromptTemplates::default())
}

#[test]
fn http_generation_sends_one_png_and_strips_fences() {
    let (url, seen) = serve(vec![(200, r#"{"text":"```latex\nx^{2}\n```"}"#.into())]);
    let mut client = http_client(&url, fast());
    let img = Arc::new(RasterImage::white(12, 7).unwrap());
    let doc = client.generate(&img, GenerationMode::Direct).unwrap();
    assert_eq!(doc.source(), "x^{2}");
    let seen = seen.lock().unwrap();
    assert_eq!((seen[0].method.as_str(), seen[0].path.as_str()), ("POST", "/v1/infer"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["role"], "generation");
    assert_eq!(body["want_attention"], false);
    let images = body["images"].as_array().unwrap();
    assert_eq!(images.len(), 1);
    use base64::Engine;
    let png = base64::engine::general_purpose::STANDARD.decode(images[0].as_str().unwrap()).unwrap();
    let back = RasterImage::from_png_bytes(&png).unwrap();
    assert_eq!((back.width(), back.height()), (12, 7));
}

#[test]
fn http_retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, r#"{"text":"a+b"}"#.into())]);
    let mut client = http_client(&url, fast());
    let doc = client.generate(&Arc::new(RasterImage::white(4, 4).unwrap()), GenerationMode::Direct).unwrap();
    assert_eq!(doc.source(), "a+b");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn http_gives_up_after_max_attempts() {
    let (url, seen) = serve(vec![(500, "{}".into()), (502, "{}".into()), (503, "{}".into())]);
    let mut client = http_client(&url, fast());
    let err = client.generate(&Arc::new(RasterImage::white(4, 4).unwrap()), GenerationMode::Direct).unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable { attempts: 3, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn http_client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into()), (200, r#"{"text":"x"}"#.into())]);
    let mut client = http_client(&url, fast());
    let err = client.generate(&Arc::new(RasterImage::white(4, 4).unwrap()), GenerationMode::Direct).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn http_attention_is_decoded_for_the_requested_layers() {
    let values: Vec<f32> = (0..12).map(|v| v as f32 / 4.0).collect();
    let reply = format!(
        r#"{{"text":"","attention":{{"dims":[2,1,1,2,3],"data":"{}","tokens":["a","b"]}}}}"#,
        encode_attention_data(&values)
    );
    let (url, seen) = serve(vec![(200, r#"{"attention":true,"layers":28}"#.into()), (200, reply)]);
    let mut client = http_client(&url, fast());
    assert_eq!(client.capabilities().unwrap(), Capabilities { attention: true, layers: Some(28) });
    let stack = client.fetch_attention(&Arc::new(RasterImage::white(6, 4).unwrap()), "a b", [13, 13]).unwrap();
    assert_eq!(stack.layers(), &[13]);
    assert_eq!(stack.grid(), (2, 3));
    assert_eq!(stack.values(), values.iter().map(|&v| f64::from(v)).collect::<Vec<_>>().as_slice());
    let seen = seen.lock().unwrap();
    assert_eq!((seen[0].method.as_str(), seen[0].path.as_str()), ("GET", "/v1/capabilities"));
    let body: serde_json::Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(body["role"], "attention");
    assert_eq!(body["want_attention"], true);
    assert_eq!(body["layer_range"], serde_json::json!([13, 13]));
    assert_eq!(body["text_context"], "a b");
}

#[test]
fn http_attention_with_wrong_layer_count_is_a_protocol_error() {
    let reply = format!(
        r#"{{"text":"","attention":{{"dims":[1,2,1,1,1],"data":"{}","tokens":["a"]}}}}"#,
        encode_attention_data(&[1.0, 2.0])
    );
    let (url, _) = serve(vec![(200, r#"{"attention":true,"layers":null}"#.into()), (200, reply)]);
    let mut client = http_client(&url, fast());
    let err = client.fetch_attention(&Arc::new(RasterImage::white(4, 4).unwrap()), "a", [3, 3]).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn endpoints_other_than_mock_or_http_are_rejected() {
    assert!(matches!(backend_from_endpoint("ftp://x", fast(), None), Err(Error::Config(_))));
    assert!(backend_from_endpoint("mock:?seed=1&errors=2", fast(), Some(9)).unwrap().describe().contains("seed=9"));
}

// ---------- scripted backend ----------

struct Session {
    client: VlmClient,
    truth: a2r2::LatexDoc,
    image: Arc<RasterImage>,
}

fn session(inst: &Instance, query: &str) -> Session {
    let backend = ScriptedBackend::new(ScriptedParams::parse(query).unwrap());
    Session {
        client: VlmClient::new(backend.open(inst).unwrap(), PromptTemplates::default()),
        truth: inst.ground_truth.clone().unwrap(),
        image: Arc::new(inst.image.clone()),
    }
}

fn render(doc: &a2r2::LatexDoc) -> Arc<RasterImage> {
    common::renderer().render(doc).image().expect("renders").clone()
}

#[test]
fn generation_injects_exactly_the_requested_substitutions() {
    for (i, inst) in common::instances(6, 41).iter().enumerate() {
        for errors in [0, 1, 3] {
            let mut s = session(inst, &format!("seed={i}&errors={errors}"));
            let hyp = s.client.generate(&s.image, GenerationMode::Direct).unwrap();
            assert_eq!(hyp.tokens().len(), s.truth.tokens().len());
            assert_eq!(oracle_levenshtein(hyp.tokens(), s.truth.tokens()), errors);
        }
    }
}

#[test]
fn comparison_reports_live_errors_and_verification_drops_fabrications() {
    let inst = &common::instances(1, 42)[0];
    let mut s = session(inst, "seed=1&errors=2&fabricate=1");
    let hyp = s.client.generate(&s.image, GenerationMode::Direct).unwrap();
    let rendered = render(&hyp);
    let diff = s.client.compare(&s.image, &rendered).unwrap();
    assert_eq!(diff.len(), 3);
    let fabricated: Vec<bool> = diff.items.iter().map(|d| d.fabricated.unwrap()).collect();
    assert_eq!(fabricated.iter().filter(|f| **f).count(), 1);

    let verified = s.client.verify(&diff, &s.image, &rendered).unwrap();
    assert_eq!(verified.len(), 2);
    assert!(verified.items.iter().all(|v| diff.items.contains(v) && v.fabricated == Some(false)));
    let again = s.client.verify(&verified, &s.image, &rendered).unwrap();
    assert_eq!(again.items, verified.items);
}

#[test]
fn refinement_applies_at_most_fix_per_round_corrections() {
    let inst = &common::instances(1, 43)[0];
    let mut s = session(inst, "seed=2&errors=4&fix_per_round=1");
    let mut hyp = s.client.generate(&s.image, GenerationMode::Direct).unwrap();
    for remaining in (0..4).rev() {
        let rendered = render(&hyp);
        let diff = s.client.compare(&s.image, &rendered).unwrap();
        assert_eq!(diff.len(), remaining + 1);
        let verified = s.client.verify(&diff, &s.image, &rendered).unwrap();
        let next = match s.client.refine(&hyp, &s.image, &rendered, &verified).unwrap() {
            RefineOutcome::Updated(doc) => doc,
            RefineOutcome::NoProgress => panic!("expected a correction"),
        };
        assert!(oracle_levenshtein(next.tokens(), hyp.tokens()) <= 2 * verified.len());
        assert_eq!(oracle_levenshtein(next.tokens(), s.truth.tokens()), remaining);
        hyp = next;
    }
    let diff = s.client.compare(&s.image, &render(&hyp)).unwrap();
    assert!(diff.is_empty());
}

#[test]
fn refinement_on_fabricated_claims_corrupts_the_hypothesis() {
    let inst = &common::instances(1, 44)[0];
    let mut s = session(inst, "seed=3&errors=0&fabricate=1");
    let hyp = s.client.generate(&s.image, GenerationMode::Direct).unwrap();
    let rendered = render(&hyp);
    let diff = s.client.compare(&s.image, &rendered).unwrap();
    assert_eq!(diff.len(), 1);
    assert!(s.client.verify(&diff, &s.image, &rendered).unwrap().is_empty());
    match s.client.refine(&hyp, &s.image, &rendered, &diff).unwrap() {
        RefineOutcome::Updated(doc) => assert_eq!(oracle_levenshtein(doc.tokens(), s.truth.tokens()), 1),
        RefineOutcome::NoProgress => panic!("fabricated claim should be applied"),
    }
}

#[test]
fn judge_replies_are_parsed_and_clamped() {
    let inst = &common::instances(1, 45)[0];
    let img = Arc::new(inst.image.clone());
    assert_eq!(session(inst, "judge_reply=7").client.judge_similarity(&img, &img).unwrap(), 7.0);
    assert_eq!(session(inst, "judge_reply=11").client.judge_similarity(&img, &img).unwrap(), 10.0);
    assert_eq!(session(inst, "seed=1").client.judge_similarity(&img, &img).unwrap(), 10.0);
    let blank = Arc::new(RasterImage::white(img.width(), img.height()).unwrap());
    assert!(session(inst, "seed=1").client.judge_similarity(&img, &blank).unwrap() < 10.0);
}

#[test]
fn sessions_are_deterministic_per_seed_and_instance() {
    let insts = common::instances(2, 46);
    let transcript = |inst: &Instance, q: &str| {
        let mut s = session(inst, q);
        let hyp = s.client.generate(&s.image, GenerationMode::Direct).unwrap();
        s.client.compare(&s.image, &render(&hyp)).unwrap();
        s.client.take_transcript()
    };
    let q = "seed=5&errors=2&halluc_rate=0.5";
    assert_eq!(transcript(&insts[0], q), transcript(&insts[0], q));
    assert_ne!(transcript(&insts[0], q), transcript(&insts[1], q));
}

#[test]
fn scripted_backend_requires_ground_truth() {
    let backend = ScriptedBackend::new(ScriptedParams::default());
    assert!(matches!(backend.open(&blank_instance()), Err(Error::Config(_))));
}

#[test]
fn attention_without_the_capability_is_refused() {
    let inst = &common::instances(1, 47)[0];
    let mut s = session(inst, "attention=0");
    let err = s.client.fetch_attention(&s.image, "x", [0, 0]).unwrap_err();
    assert!(matches!(err, Error::AttentionUnavailable));
}

#[test]
fn query_strings_round_trip() {
    let p = ScriptedParams::parse("seed=3&errors=2&fix_per_round=1&halluc_rate=0.25&max_items=4&sample_errors=1,0&attention=0&layers=28&judge_reply=6&broken=1").unwrap();
    let q = p.to_query();
    assert_eq!(ScriptedParams::parse(q.strip_prefix("mock:").unwrap()).unwrap(), p);
    assert!(ScriptedParams::parse("bogus=1").is_err());
    assert!(ScriptedParams::parse("halluc_rate=1.5").is_err());
}
