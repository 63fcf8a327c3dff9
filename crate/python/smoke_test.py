"""Smoke test for the Python bindings.

Needs the extension installed (`pip install --no-build-isolation -e crates/python`)
and, for the registry round trip, a built CLI (`cargo build`); set BRICKS_BIN
to point elsewhere.
"""

import hashlib
import json
import os
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import bricks

REPO = Path(__file__).resolve().parent.parent
TOKEN = "smoke-token"

MANIFEST = """\
stages:
  status:
    cmd: printf 'release 1\\n' > status.txt
    outs:
      - status.txt
  download:
    cmd: mkdir -p raw && printf 'id,symbol\\nHGNC:5,A1BG\\n' > raw/genes.csv
    deps:
      - status.txt
    outs:
      - raw/
  process:
    cmd: mkdir -p brick && cp raw/genes.csv brick/hgnc_complete_set.parquet
    deps:
      - raw/
    outs:
      - brick/hgnc_complete_set.parquet
"""


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print("ok  ", what)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def hashing():
    for data in [b"", b"hello", os.urandom(1000)]:
        check(bricks.hash_bytes(data) == hashlib.md5(data).hexdigest(), f"md5 of {len(data)} bytes")


def refs_and_files():
    ref = bricks.BrickRef("hgnc")
    check((ref.org, ref.name, ref.commit) == ("biobricks-ai", "hgnc", None), "bare name uses default org")
    pinned = bricks.BrickRef("org/tox21@4f0601")
    check(pinned.commit == "4f0601", "prefix kept")
    try:
        bricks.BrickRef("a/b@xyz")
        check(False, "bad commit rejected")
    except ValueError:
        check(True, "bad commit rejected")

    m = bricks.Manifest.parse(MANIFEST)
    check(m.topo_order() == ["status", "download", "process"], "topological order")
    check(m.upstream("process") == ["download"], "upstream by path")


def pipeline(work):
    (work / "brick.yaml").write_text(MANIFEST)
    states = [s["state"] for s in bricks.plan(str(work))]
    check(states == ["stale"] * 3, "fresh workspace is all stale")
    first = bricks.repro(str(work))
    check(first["executed"] == ["status", "download", "process"], "first run executes all")
    second = bricks.repro(str(work))
    check(second["executed"] == ["status"] and second["skipped"] == ["download", "process"], "early cutoff")
    lock = bricks.Lockfile.parse((work / "brick.lock").read_text())
    payload = lock.payload()
    data = (work / "brick/hgnc_complete_set.parquet").read_bytes()
    check(payload[0].hash == hashlib.md5(data).hexdigest(), "lock digest matches file")
    check(bricks.hash_tree(str(work / "raw")).endswith(".dir"), "directory digest")


def registry_round_trip(work, binary):
    port = free_port()
    url = f"http://127.0.0.1:{port}"
    tmp = Path(tempfile.mkdtemp())
    env = dict(os.environ, BRICKS_CONFIG=str(tmp / "config"))
    server = subprocess.Popen(
        [binary, "serve", "--root", str(tmp / "registry"), "--addr", f"127.0.0.1:{port}", "--allow-token", TOKEN],
        env=env,
        stderr=subprocess.DEVNULL,
    )
    try:
        for _ in range(100):
            try:
                socket.create_connection(("127.0.0.1", port), timeout=0.1).close()
                break
            except OSError:
                time.sleep(0.05)
        cli = [binary, "--registry", url, "--token", TOKEN]
        subprocess.run(
            cli + ["--library", str(tmp / "publisher"), "push", "biobricks-ai/hgnc", "-C", str(work)],
            env=env,
            check=True,
            capture_output=True,
        )

        lib = bricks.Library(str(tmp / "library"))
        report = lib.install("hgnc", url, TOKEN)
        check(report["steps"] == ["snapshot", "enumerate", "fetch", "link"], "install steps in order")
        check(lib.install("hgnc", url, TOKEN)["already_installed"], "reinstall is a no-op")
        try:
            lib.install("hgnc", url, "wrong")
            check(False, "bad token raises AuthError")
        except bricks.AuthError as e:
            check("wrong" not in str(e), "bad token raises AuthError without echoing it")

        ns = bricks.assets("hgnc", library=str(tmp / "library"))
        path = ns.hgnc_complete_set_parquet
        check(path.endswith("brick/hgnc_complete_set.parquet"), "named asset resolves")
        check(Path(path).read_bytes() == (work / "brick/hgnc_complete_set.parquet").read_bytes(), "asset readable")

        out = subprocess.run(
            cli + ["--library", str(tmp / "library"), "assets", "hgnc", "--json"],
            env=env,
            check=True,
            capture_output=True,
        )
        golden = {k: v["path"] for k, v in json.loads(out.stdout).items()}
        check(ns._catalog == golden, "namespace matches `assets --json`")
        check(set(dir(ns)) == set(golden), "attribute set matches")
        check(lib.verify(), "library verifies")
        try:
            bricks.assets("notinstalled", library=str(tmp / "library"))
            check(False, "missing brick raises NotInstalledError")
        except bricks.NotInstalledError as e:
            check("bricks install" in str(e), "missing brick raises NotInstalledError")
    finally:
        server.terminate()
        server.wait()


def main():
    hashing()
    refs_and_files()
    with tempfile.TemporaryDirectory() as d:
        work = Path(d)
        pipeline(work)
        binary = os.environ.get("BRICKS_BIN", str(REPO / "target" / "debug" / "bricks"))
        if Path(binary).exists():
            registry_round_trip(work, binary)
        else:
            print(f"skip registry round trip: no CLI at {binary}")
    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
