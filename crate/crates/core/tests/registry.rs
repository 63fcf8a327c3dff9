mod common;

use std::fs;

use bricks::model::{BrickRef, CommitSpec};
use bricks::registry::{archive, RegistryError};
use bricks::store::hash_bytes;
use common::md5_oracle::md5_hex;
use common::{publish, TestRegistry, TOKEN};

const PARQUET: &[u8] = b"PAR1 hgnc_id,symbol\nHGNC:5,A1BG\nHGNC:37133,A1BG-AS1\n";

fn commit_id(prefix: &str) -> String {
    format!("{prefix}{}", "0".repeat(40 - prefix.len()))
}

fn make_writable(path: &std::path::Path) {
    let mut perms = fs::metadata(path).unwrap().permissions();
    #[allow(clippy::permissions_set_readonly_false)]
    perms.set_readonly(false);
    fs::set_permissions(path, perms).unwrap();
}

#[test]
fn resolves_latest_and_prefixes() {
    let reg = TestRegistry::start();
    let old = commit_id("4f060");
    let new = commit_id("9a1b2");
    publish(&reg, "biobricks-ai", "hgnc", &["brick/hgnc.parquet"], &[("brick/hgnc.parquet", b"v1")], Some(&old));
    publish(&reg, "biobricks-ai", "hgnc", &["brick/hgnc.parquet"], &[("brick/hgnc.parquet", PARQUET)], Some(&new));
    let client = reg.client();

    let commits = client.list_commits("biobricks-ai", "hgnc").unwrap();
    assert_eq!(commits.len(), 2);
    assert_eq!(commits[0].commit, new);
    assert!(commits[0].is_head_of_main);
    assert!(!commits[1].is_head_of_main);

    let latest = BrickRef::parse("hgnc", "biobricks-ai").unwrap();
    assert_eq!(client.resolve_commit(&latest).unwrap(), new);
    let pinned = BrickRef::parse("biobricks-ai/hgnc@4f060", "x").unwrap();
    assert_eq!(client.resolve_commit(&pinned).unwrap(), old);
    let unknown = BrickRef::parse("biobricks-ai/hgnc@fffff", "x").unwrap();
    assert!(matches!(client.resolve_commit(&unknown), Err(RegistryError::NotFound(_))));
}

#[test]
fn ambiguous_prefix_lists_candidates() {
    let reg = TestRegistry::start();
    let a = commit_id("abcde1");
    let b = commit_id("abcde2");
    publish(&reg, "org", "tox", &["brick/t.csv"], &[("brick/t.csv", b"1")], Some(&a));
    publish(&reg, "org", "tox", &["brick/t.csv"], &[("brick/t.csv", b"2")], Some(&b));
    let r = BrickRef::new("org", "tox", CommitSpec::parse("abcde").unwrap()).unwrap();
    match reg.client().resolve_commit(&r) {
        Err(RegistryError::AmbiguousPrefix { matches, .. }) => {
            assert_eq!(matches.len(), 2);
            assert!(matches.contains(&a) && matches.contains(&b));
        }
        other => panic!("expected ambiguity, got {other:?}"),
    }
}

#[test]
fn unknown_brick_is_not_found() {
    let reg = TestRegistry::start();
    let r = BrickRef::parse("nobody/nothing", "x").unwrap();
    assert!(matches!(reg.client().resolve_commit(&r), Err(RegistryError::NotFound(_))));
}

#[test]
fn snapshot_is_deterministic_and_excludes_payload() {
    let reg = TestRegistry::start();
    let files: &[(&str, &[u8])] = &[("brick/hgnc.parquet", PARQUET), ("README.md", b"# hgnc\n")];
    let c1 = publish(&reg, "org", "a", &["brick/hgnc.parquet"], files, None);
    let c2 = publish(&reg, "org", "b", &["brick/hgnc.parquet"], files, None);
    // Same workspace content, same archive, same server-assigned id.
    assert_eq!(c1, c2);
    let client = reg.client();
    let s1 = client.fetch_snapshot_bytes("org", "a", &c1).unwrap();
    let s2 = client.fetch_snapshot_bytes("org", "b", &c2).unwrap();
    assert_eq!(s1, s2);

    let dest = tempfile::tempdir().unwrap();
    client.fetch_snapshot("org", "a", &c1, dest.path()).unwrap();
    assert!(dest.path().join("brick.yaml").is_file());
    assert!(dest.path().join("brick.lock").is_file());
    assert!(dest.path().join("README.md").is_file());
    assert!(!dest.path().join("brick/hgnc.parquet").exists());

    let lock = client.fetch_lock("org", "a", &c1).unwrap();
    let rec = lock.payload_outs().next().unwrap();
    assert_eq!(rec.hash.hex(), md5_hex(PARQUET));
    let packed = archive::read_lock(&s1).unwrap().unwrap();
    assert_eq!(bricks::model::Lockfile::parse(&packed).unwrap(), lock);
}

#[test]
fn blob_fetch_matches_oracle_and_rejects_tampering() {
    let reg = TestRegistry::start();
    publish(&reg, "org", "hgnc", &["brick/hgnc.parquet"], &[("brick/hgnc.parquet", PARQUET)], None);
    let client = reg.client();
    let hash = hash_bytes(PARQUET);
    let mut sink = Vec::new();
    assert_eq!(client.fetch_blob(&hash, &mut sink).unwrap(), PARQUET.len() as u64);
    assert_eq!(md5_hex(&sink), md5_hex(PARQUET));

    // Same length, different bytes: only the digest can catch it.
    let stored = reg.handle.server().blobs().blob_path(&hash);
    make_writable(&stored);
    let mut bad = PARQUET.to_vec();
    bad[0] ^= 0xff;
    fs::write(&stored, &bad).unwrap();

    let mut sink = Vec::new();
    assert!(matches!(client.fetch_blob(&hash, &mut sink), Err(RegistryError::Integrity(_))));
    assert!(sink.is_empty(), "unverified bytes reached the sink");

    let cache_dir = tempfile::tempdir().unwrap();
    let cache = bricks::store::Cache::open(cache_dir.path()).unwrap();
    assert!(matches!(
        client.fetch_blob_into_cache(&hash, &cache),
        Err(RegistryError::Integrity(_))
    ));
    assert!(!cache.contains(&hash));
    assert!(cache.digests().unwrap().is_empty());
}

#[test]
fn missing_blob_is_not_found() {
    let reg = TestRegistry::start();
    let mut sink = Vec::new();
    let r = reg.client().fetch_blob(&hash_bytes(b"never stored"), &mut sink);
    assert!(matches!(r, Err(RegistryError::NotFound(_))));
}

#[test]
fn upload_with_wrong_digest_is_refused() {
    let reg = TestRegistry::start();
    let client = reg.client();
    let claimed = hash_bytes(b"one thing");
    assert!(client.put_blob(&claimed, b"another".to_vec()).is_err());
    assert!(!reg.handle.server().blobs().contains(&claimed));
    client.put_blob(&claimed, b"one thing".to_vec()).unwrap();
    assert!(reg.handle.server().blobs().contains(&claimed));
}

#[test]
fn repeated_push_is_a_noop_and_uploads_nothing() {
    let reg = TestRegistry::start();
    let work = tempfile::tempdir().unwrap();
    let store = tempfile::tempdir().unwrap();
    let parts = common::partitions(4);
    common::write_brick_workspace(work.path(), &["brick/parts.parquet/"], &common::as_refs(&parts));
    let cache = bricks::store::Cache::open(store.path()).unwrap();
    let (_, lock) = bricks::pipeline::load_workspace(work.path()).unwrap();
    bricks::pipeline::commit_outputs(work.path(), lock.as_ref().unwrap(), &cache).unwrap();

    let client = reg.client();
    let first = client.push_brick(work.path(), &cache, "org", "parts", None, None).unwrap();
    assert!(first.created);
    // Four partitions plus the directory manifest.
    assert_eq!(first.blobs_uploaded, 5);
    reg.clear();
    let second = client.push_brick(work.path(), &cache, "org", "parts", None, None).unwrap();
    assert!(!second.created);
    assert_eq!(second.blobs_uploaded, 0);
    assert_eq!(second.commit.commit, first.commit.commit);
    assert_eq!(reg.handle.count("PUT", "/blobs/"), 0);
    assert_eq!(client.list_commits("org", "parts").unwrap().len(), 1);
}

#[test]
fn reusing_a_commit_id_for_other_content_conflicts() {
    let reg = TestRegistry::start();
    let id = commit_id("77");
    publish(&reg, "org", "c", &["brick/x.csv"], &[("brick/x.csv", b"1")], Some(&id));
    let work = tempfile::tempdir().unwrap();
    let store = tempfile::tempdir().unwrap();
    common::write_brick_workspace(work.path(), &["brick/x.csv"], &[("brick/x.csv", b"2")]);
    let cache = bricks::store::Cache::open(store.path()).unwrap();
    let (_, lock) = bricks::pipeline::load_workspace(work.path()).unwrap();
    bricks::pipeline::commit_outputs(work.path(), lock.as_ref().unwrap(), &cache).unwrap();
    let r = reg.client().push_brick(work.path(), &cache, "org", "c", None, Some(&id));
    assert!(matches!(r, Err(RegistryError::Conflict(_))), "{r:?}");
}

#[test]
fn branches_do_not_move_latest() {
    let reg = TestRegistry::start();
    let main = publish(&reg, "org", "b", &["brick/x.csv"], &[("brick/x.csv", b"main")], None);
    let work = tempfile::tempdir().unwrap();
    let store = tempfile::tempdir().unwrap();
    common::write_brick_workspace(work.path(), &["brick/x.csv"], &[("brick/x.csv", b"dev")]);
    let cache = bricks::store::Cache::open(store.path()).unwrap();
    let (_, lock) = bricks::pipeline::load_workspace(work.path()).unwrap();
    bricks::pipeline::commit_outputs(work.path(), lock.as_ref().unwrap(), &cache).unwrap();
    let dev = reg
        .client()
        .push_brick(work.path(), &cache, "org", "b", Some("dev"), None)
        .unwrap();
    assert_eq!(dev.commit.branch, "dev");
    let latest = BrickRef::parse("org/b", "x").unwrap();
    assert_eq!(reg.client().resolve_commit(&latest).unwrap(), main);
}

#[test]
fn every_endpoint_requires_the_token() {
    let reg = TestRegistry::start();
    let commit = publish(&reg, "org", "hgnc", &["brick/hgnc.parquet"], &[("brick/hgnc.parquet", PARQUET)], None);
    let blob = hash_bytes(PARQUET);
    let http = reqwest::blocking::Client::new();
    let base = reg.url();
    let requests = [
        ("GET", format!("{base}/api/org/hgnc/commits")),
        ("POST", format!("{base}/api/org/hgnc/commits")),
        ("GET", format!("{base}/api/org/hgnc/{commit}/snapshot.tar")),
        ("GET", format!("{base}/api/org/hgnc/{commit}/lock")),
        ("GET", format!("{base}/blobs/{blob}")),
        ("PUT", format!("{base}/blobs/{blob}")),
    ];
    for (method, url) in &requests {
        let method: reqwest::Method = method.parse().unwrap();
        for token in [None, Some("wrong")] {
            let mut req = http.request(method.clone(), url);
            if let Some(t) = token {
                req = req.bearer_auth(t);
            }
            let resp = req.send().unwrap();
            assert_eq!(resp.status().as_u16(), 401, "{method} {url} with {token:?}");
        }
        let ok = http.request(method.clone(), url).bearer_auth(TOKEN).send().unwrap();
        assert_ne!(ok.status().as_u16(), 401, "{method} {url} with the right token");
    }
}

#[test]
fn client_reports_auth_without_leaking_token() {
    let reg = TestRegistry::start();
    let secret = "sk-do-not-print-0042";
    let client = reg.client_with_token(secret);
    let err = client.list_commits("org", "x").unwrap_err();
    assert!(matches!(err, RegistryError::Auth));
    assert!(!err.to_string().contains(secret));
    assert!(!format!("{err:?}").contains(secret));
    assert!(!format!("{client:?}").contains(secret));
    assert!(!format!("{:?}", client.endpoint()).contains(secret));
}
