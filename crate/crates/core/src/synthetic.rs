//! Seeded synthetic test-record corpora: two response classes separated by
//! injected markers (and by response length), with fingerprint definitions
//! that label them. Used by the end-to-end test suites and handy for
//! exercising the pipeline without real scan data.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::record::{Location, QuackTestRecord, ResponseObservation};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_records: usize,
    pub censored_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_records: 4000, censored_fraction: 0.5, seed: 7 }
    }
}

const COUNTRIES: &[(&str, &str)] = &[
    ("China", "CN"),
    ("Russia", "RU"),
    ("Iran", "IR"),
    ("India", "IN"),
    ("United States", "US"),
    ("Germany", "DE"),
    ("Brazil", "BR"),
    ("Pakistan", "PK"),
];

const URL_WORDS: &[&str] =
    &["news", "games", "mail", "blog", "chat", "video", "press", "wiki", "shop", "forum"];

const TLDS: &[&str] = &["net", "org", "com", "info"];

// Distinct filler vocabularies so the class signal spans the whole
// response body rather than only its head.
const BLOCK_FILLER: &[&str] = &[
    "restricted", "prohibited", "unlawful", "banned", "firewall", "compliance", "authority",
    "regulation", "violation", "enforcement", "censured", "denied",
];

const ECHO_FILLER: &[&str] = &[
    "latency", "roundtrip", "payload", "session", "uptime", "packet", "mirror", "probe",
    "window", "buffer", "socket", "stream",
];

fn pick<'a, T: ?Sized>(rng: &mut ChaCha20Rng, items: &'a [&T]) -> &'a T {
    items[rng.gen_range(0..items.len())]
}

fn random_url(rng: &mut ChaCha20Rng) -> String {
    format!("{}{}.{}", pick(rng, URL_WORDS), rng.gen_range(1..999), pick(rng, TLDS))
}

fn censored_response(rng: &mut ChaCha20Rng, url: &str) -> String {
    let mut body = format!(
        "HTTP/1.1 403 Forbidden\nServer: FilterWall/3.1\nConnection: close\n\n\
         <html><head><title>Access Denied</title></head><body>\
         Access to {url} has been blocked by FilterWall Shield ref {}. ",
        rng.gen_range(1000..9999)
    );
    for _ in 0..rng.gen_range(20..45) {
        body.push_str(pick(rng, BLOCK_FILLER));
        body.push(' ');
    }
    body.push_str("</body></html>");
    body
}

fn uncensored_response(rng: &mut ChaCha20Rng, url: &str) -> String {
    let mut body = format!("HTTP/1.1 200 OK\n\necho-reply {url} ok");
    for _ in 0..rng.gen_range(1..4) {
        body.push(' ');
        body.push_str(pick(rng, ECHO_FILLER));
    }
    body
}

fn timestamp(rng: &mut ChaCha20Rng, base: i64) -> (String, String) {
    let start = base + rng.gen_range(0..86_400);
    let format = |secs: i64| {
        chrono::DateTime::from_timestamp(secs, 0).expect("in range").to_rfc3339()
    };
    (format(start), format(start + rng.gen_range(1..4)))
}

/// Generates `n_records` single-flat records (a trailing matching
/// observation is attached to some of them, which default flattening
/// drops), in censored-first order before seeding shuffles downstream.
pub fn generate_records(cfg: &SynthConfig) -> Vec<QuackTestRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n_censored = (cfg.n_records as f64 * cfg.censored_fraction).round() as usize;

    (0..cfg.n_records)
        .map(|i| {
            let censored = i < n_censored;
            let url = random_url(&mut rng);
            let (country_name, country_code) = COUNTRIES[rng.gen_range(0..COUNTRIES.len())];
            let vp = format!(
                "{}.{}.{}.{}",
                rng.gen_range(1..224),
                rng.gen_range(0..256),
                rng.gen_range(0..256),
                rng.gen_range(1..255)
            );
            let (start, end) = timestamp(&mut rng, 1_626_000_000);
            let response_text = if censored {
                censored_response(&mut rng, &url)
            } else {
                uncensored_response(&mut rng, &url)
            };

            let mut response = vec![ResponseObservation {
                matches_template: false,
                response: Some(response_text),
                start_time: start.clone(),
                end_time: end.clone(),
            }];
            if rng.gen_bool(0.25) {
                let (s2, e2) = timestamp(&mut rng, 1_626_010_000);
                response.push(ResponseObservation {
                    matches_template: true,
                    response: None,
                    start_time: s2,
                    end_time: e2,
                });
            }

            QuackTestRecord {
                vp,
                location: Location {
                    country_name: country_name.into(),
                    country_code: country_code.into(),
                },
                service: "echo".into(),
                test_url: url,
                response,
                anomaly: true,
                controls_failed: false,
                stateful_block: false,
                tag: start,
            }
        })
        .collect()
}

/// Fingerprints matching the generator's two response classes, in the
/// fingerprint JSONL format.
pub fn fingerprints_jsonl() -> String {
    [
        r#"{"name":"filterwall","pattern":"(?i)blocked by filterwall","verdict":"censored"}"#,
        r#"{"name":"echo_ok","pattern":"(?i)echo-reply .* ok","verdict":"uncensored"}"#,
    ]
    .join("\n")
        + "\n"
}

/// Tokenizer vocabulary covering the generator's character set plus a few
/// merged pieces, in the tokenizer file format.
pub fn tokenizer_vocab() -> String {
    let mut buf = Vec::new();
    crate::tokenizer::write_ascii_vocab(
        &mut buf,
        &["HTTP/1.1", "\u{2581}403", "\u{2581}200", "\u{2581}blocked", "\u{2581}echo-reply"],
    )
    .expect("in-memory write");
    String::from_utf8(buf).expect("ascii")
}

pub fn write_records_jsonl(path: &std::path::Path, records: &[QuackTestRecord]) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()
}

use rand::SeedableRng;
