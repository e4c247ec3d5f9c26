use std::io::BufReader;
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use acfg::model::protocol::{serve_connection, Fault, FaultScript, LogitsResponse, TcpTestServer};
use acfg::model::{Endpoint, MockFallback, MockTableModel, RemoteModel};
use acfg::{decode, DecodeConfig, DecodeMode, Error, GuidanceConfig, Model, TokenId, TokenSeq, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TIMEOUT: Duration = Duration::from_secs(5);

fn hashed_model(vocab: usize) -> Arc<MockTableModel> {
    Arc::new(MockTableModel::new(
        Vocab::new(vocab, (vocab - 1) as TokenId).unwrap(),
        MockFallback::Hashed { seed: 21, scale: 4.0 },
    ))
}

fn connect(server: &TcpTestServer, timeout: Duration) -> RemoteModel {
    RemoteModel::connect(&Endpoint::Tcp(server.addr().to_string()), timeout).unwrap()
}

fn random_seq(rng: &mut impl Rng, vocab: usize) -> TokenSeq {
    let len = rng.gen_range(1..20);
    let ids = (0..len).map(|_| rng.gen_range(0..vocab) as TokenId).collect();
    TokenSeq::new(ids, rng.gen_range(0..=len)).unwrap()
}

#[test]
fn zero_logits_round_trip() {
    let model = Arc::new(MockTableModel::new(
        Vocab::new(4, 3).unwrap(),
        MockFallback::Row(vec![0.0; 4]),
    ));
    let server = TcpTestServer::spawn(model, FaultScript::new()).unwrap();
    let remote = connect(&server, TIMEOUT);
    assert_eq!(remote.vocab(), &Vocab::new(4, 3).unwrap());
    let m = remote.logits(&TokenSeq::new(vec![0, 1, 3], 1).unwrap()).unwrap();
    assert_eq!(m.shape(), (3, 4));
    assert!(m.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn faults_surface_as_protocol_errors() {
    let cases = [
        (Fault::WrongRows, "rows"),
        (Fault::Truncate, "malformed"),
        (Fault::Garbage, "malformed"),
        (Fault::WrongId, "does not match"),
        (Fault::WrongVocab, "vocab_size"),
        (Fault::ErrorReply("out of memory".into()), "out of memory"),
    ];
    for (fault, needle) in cases {
        let server = TcpTestServer::spawn(hashed_model(5), FaultScript::new().at(1, fault.clone())).unwrap();
        let remote = connect(&server, TIMEOUT);
        let seq = TokenSeq::new(vec![0, 1, 4, 2], 2).unwrap();
        remote.logits(&seq).unwrap();
        match remote.logits(&seq) {
            Err(Error::Protocol { message, excerpt }) => {
                assert!(
                    message.contains(needle) || excerpt.contains(needle),
                    "{fault:?}: {message} / {excerpt}"
                );
            }
            other => panic!("{fault:?}: expected protocol error, got {other:?}"),
        }
    }
}

#[test]
fn timeouts_are_retriable_and_late_replies_are_dropped() {
    let script = FaultScript::new().at(0, Fault::Delay(Duration::from_millis(600)));
    let model = hashed_model(5);
    let server = TcpTestServer::spawn(Arc::clone(&model), script).unwrap();
    let remote = connect(&server, Duration::from_millis(200));
    let first = TokenSeq::new(vec![0, 1], 1).unwrap();
    let err = remote.logits(&first).unwrap_err();
    assert!(err.is_retriable(), "{err}");

    // the late answer to request 0 arrives first and must be skipped
    let second = TokenSeq::new(vec![2, 3, 4], 1).unwrap();
    let mut got = None;
    for _ in 0..10 {
        match remote.logits(&second) {
            Ok(m) => {
                got = Some(m);
                break;
            }
            Err(e) if e.is_retriable() => continue,
            Err(e) => panic!("{e}"),
        }
    }
    assert_eq!(got.unwrap(), model.logits(&second).unwrap());
}

#[test]
fn hangup_is_a_transport_error() {
    let server = TcpTestServer::spawn(hashed_model(5), FaultScript::new().at(0, Fault::Hangup)).unwrap();
    let remote = connect(&server, TIMEOUT);
    let err = remote.logits(&TokenSeq::new(vec![0], 0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

#[test]
fn thousand_round_trips_match_server_log() {
    let model = hashed_model(4);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server_model = Arc::clone(&model);
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        let mut log = Vec::new();
        serve_connection(&*server_model, reader, stream, &FaultScript::new(), Some(&mut log)).unwrap();
        log
    });

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut received = Vec::new();
    {
        let remote = RemoteModel::connect(&Endpoint::Tcp(addr.to_string()), TIMEOUT).unwrap();
        for _ in 0..1000 {
            let seq = random_seq(&mut rng, 4);
            received.push(remote.logits(&seq).unwrap());
        }
    }
    let log = server.join().unwrap();
    assert_eq!(log.len(), 1000);
    for (i, (line, got)) in log.iter().zip(&received).enumerate() {
        let resp: LogitsResponse = serde_json::from_str(line).unwrap();
        assert_eq!(resp.id, i as u64);
        let bits: Vec<u32> = resp.logits.iter().flatten().map(|v| v.to_bits()).collect();
        let got_bits: Vec<u32> = got.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, got_bits, "request {i}");
    }
}

#[test]
fn concurrent_connections_pair_ids() {
    let model = hashed_model(6);
    let mut script = FaultScript::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..200 {
        if rng.gen_bool(0.2) {
            script = script.at(i, Fault::Delay(Duration::from_millis(rng.gen_range(0..3))));
        }
    }
    let server = TcpTestServer::spawn(Arc::clone(&model), script).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let addr = server.addr().to_string();
            let model = Arc::clone(&model);
            thread::spawn(move || {
                let remote = RemoteModel::connect(&Endpoint::Tcp(addr), TIMEOUT).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(100 + t);
                for _ in 0..200 {
                    let seq = random_seq(&mut rng, 6);
                    assert_eq!(remote.logits(&seq).unwrap(), model.logits(&seq).unwrap());
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

#[test]
fn remote_decode_matches_local() {
    let model = hashed_model(7);
    let server = TcpTestServer::spawn(Arc::clone(&model), FaultScript::new()).unwrap();
    let remote = connect(&server, TIMEOUT);
    let prompt = TokenSeq::prompt(vec![0, 1, 2, 3]);
    let cfg = DecodeConfig::new(6)
        .with_mode(DecodeMode::Acfg)
        .with_guidance(GuidanceConfig::new(1.0, 0.5));
    let local = decode(&*model, &prompt, &cfg).unwrap();
    let over_wire = decode(&remote, &prompt, &cfg).unwrap();
    assert_eq!(local, over_wire);
}

#[test]
fn stdio_endpoint_handshake_and_timeout() {
    let endpoint = Endpoint::Command {
        program: "sh".into(),
        args: vec![
            "-c".into(),
            r#"printf '{"op":"hello","version":1,"vocab_size":3,"mask_id":2}\n'; exec cat >/dev/null"#.into(),
        ],
    };
    let remote = RemoteModel::connect(&endpoint, Duration::from_millis(300)).unwrap();
    assert_eq!(remote.vocab().size(), 3);
    let err = remote.logits(&TokenSeq::new(vec![0, 1], 1).unwrap()).unwrap_err();
    assert!(err.is_retriable(), "{err}");
}

#[test]
fn stdio_endpoint_rejects_bad_handshake() {
    let endpoint = Endpoint::Command {
        program: "sh".into(),
        args: vec!["-c".into(), "echo hello; sleep 5".into()],
    };
    let err = RemoteModel::connect(&endpoint, TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::Protocol { .. }), "{err}");
}

#[test]
fn unsupported_version_rejected() {
    let hello = b"{\"op\":\"hello\",\"version\":2,\"vocab_size\":3,\"mask_id\":2}\n".to_vec();
    let err = RemoteModel::from_streams(std::io::Cursor::new(hello), std::io::sink(), TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::Protocol { .. }), "{err}");
}
