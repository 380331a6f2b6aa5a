"""Score oracle over a pipe: length-prefixed binary records.

Record layout (little endian)::

    tag (3 bytes: b"RFQ" query | b"RFR" reply) | version (u8) | header length (u32)
    | JSON header | float64 payload arrays in header order

Run a server with ``python -m rigfield.oracle_ipc --kind blur`` and talk to
it through :class:`IpcOracle`.
"""
from __future__ import annotations

import argparse
import json
import struct
import subprocess
import sys

import numpy as np

from .objectives import BlurOracle, OracleFailure, ScoreQuery, ScoreResidual, TargetFieldOracle, ZeroOracle
from .renderer import Camera

PROTOCOL_VERSION = 1
QUERY, REPLY = b"RFQ", b"RFR"


class ProtocolError(OracleFailure):
    pass


def encode(tag: bytes, header: dict, arrays: list[np.ndarray]) -> bytes:
    header = dict(header, shapes=[list(a.shape) for a in arrays])
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return tag + struct.pack("<BI", PROTOCOL_VERSION, len(head)) + head + body


def _read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError("stream closed")
        buf += chunk
    return buf


def decode(stream, expect: bytes):
    """Read one record; returns ``(header, arrays)``."""
    pre = _read_exact(stream, 8)
    tag, (version, n) = pre[:3], struct.unpack("<BI", pre[3:8])
    if tag != expect:
        raise ProtocolError(f"expected {expect!r} record, got {tag!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version {version} not supported")
    header = json.loads(_read_exact(stream, n))
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8").reshape(shape).copy())
    return header, arrays


def query_record(q: ScoreQuery) -> bytes:
    cams = [{"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height}
            for c in (q.cameras or [])]
    header = {"timestep": q.timestep, "time": q.time, "condition": q.condition, "guidance": q.guidance,
              "intrinsics": cams, "has_noise": q.noise is not None}
    arrays = [q.views, q.poses] + ([q.noise] if q.noise is not None else [])
    return encode(QUERY, header, arrays)


def parse_query(header, arrays) -> ScoreQuery:
    views, poses = arrays[0], arrays[1]
    noise = arrays[2] if header["has_noise"] else None
    cams = [Camera(rotation=p[:4], translation=p[4:], **k) for k, p in zip(header["intrinsics"], poses)] or None
    return ScoreQuery(views, poses, header["timestep"], header["time"], header["condition"], noise,
                      header["guidance"], cams)


class IpcOracle:
    """Client that forwards queries to a subprocess speaking the record protocol."""

    def __init__(self, cmd: list[str]):
        self.cmd = list(cmd)
        self.proc = subprocess.Popen(self.cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def __call__(self, q: ScoreQuery) -> ScoreResidual:
        if self.proc.poll() is not None:
            raise OracleFailure(f"oracle process exited with code {self.proc.returncode}")
        try:
            self.proc.stdin.write(query_record(q))
            self.proc.stdin.flush()
            header, arrays = decode(self.proc.stdout, REPLY)
        except (BrokenPipeError, EOFError) as e:
            raise OracleFailure(f"oracle pipe failed: {e}") from e
        if header.get("error"):
            raise OracleFailure(header["error"])
        return ScoreResidual(arrays[0], float(header.get("weight", 1.0)))

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *a):
        self.close()


def serve(oracle, stdin=None, stdout=None) -> int:
    """Answer queries until the input closes; returns the number served."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    n = 0
    while True:
        try:
            header, arrays = decode(stdin, QUERY)
        except EOFError:
            return n
        try:
            res = oracle(parse_query(header, arrays))
            out = encode(REPLY, {"weight": res.weight}, [np.asarray(res.residual, dtype=float)])
        except Exception as e:          # report to the client instead of dying
            out = encode(REPLY, {"error": f"{type(e).__name__}: {e}"}, [])
        stdout.write(out)
        stdout.flush()
        n += 1


def make_oracle(kind: str, scene: str | None = None, seed: int = 0, sigma: float = 1.5):
    if kind == "blur":
        return BlurOracle(sigma)
    if kind == "zero":
        return ZeroOracle()
    if kind == "target":
        from .synthetic import SCENES
        if scene not in SCENES:
            raise ValueError(f"target oracle needs a known scene, got {scene!r}")
        gt_scene = SCENES[scene](seed=seed)
        return TargetFieldOracle(gt_scene.render_views)
    raise ValueError(f"unknown oracle kind {kind!r}")


def main(argv=None):
    ap = argparse.ArgumentParser(description="serve a synthetic score oracle over stdin/stdout")
    ap.add_argument("--kind", choices=["blur", "target", "zero"], default="blur")
    ap.add_argument("--scene", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigma", type=float, default=1.5)
    a = ap.parse_args(argv)
    serve(make_oracle(a.kind, a.scene, a.seed, a.sigma))


if __name__ == "__main__":
    main()
