"""The ``.scene`` container (JSON manifest + little-endian raw tensors) and image files.

Layout::

    b"MMSCENE1" | u64 manifest length | manifest JSON (utf-8) | payload

The manifest lists every tensor with name, dtype, shape, byte offset and
size, plus a sha256 of the payload. Tensors whose name starts with
``truth/`` and the manifest's ``truth`` section are sealed: they can only be
read from a bundle opened in oracle mode.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, SealedAccessError

MAGIC = b"MMSCENE1"
FORMAT_VERSION = 1
SEALED_PREFIX = "truth/"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1"), "i32": np.dtype("<i4")}


def _code_for(arr: np.ndarray) -> str:
    kind, size = arr.dtype.kind, arr.dtype.itemsize
    if kind == "b" or (kind == "u" and size == 1):
        return "u8"
    if kind == "f":
        return "f32" if size == 4 else "f64"
    if kind in "iu":
        return "i32"
    raise FormatError(f"unsupported array dtype {arr.dtype}")


def _encode(arr) -> tuple[str, np.ndarray]:
    arr = np.asarray(arr)
    code = _code_for(arr)
    if code == "i32" and arr.size and (arr.min() < -2**31 or arr.max() >= 2**31):
        raise FormatError("integer tensor does not fit in i32")
    return code, np.ascontiguousarray(arr, dtype=_DTYPES[code])


class SceneBundle:
    """Manifest metadata plus named tensors.

    ``mode`` is ``"oracle"`` (everything readable) or ``"estimation"``
    (sealed entries raise :class:`SealedAccessError`).
    """

    def __init__(self, meta: dict | None = None, tensors: dict | None = None, mode: str = "oracle"):
        if mode not in ("oracle", "estimation"):
            raise ValueError(f"unknown bundle mode {mode!r}")
        self.meta = dict(meta or {})
        self._tensors: dict[str, np.ndarray] = {}
        self.mode = mode
        for k, v in (tensors or {}).items():
            self[k] = v

    # tensors
    def __setitem__(self, name: str, value) -> None:
        self._tensors[name] = np.asarray(value)

    def __getitem__(self, name: str) -> np.ndarray:
        if name.startswith(SEALED_PREFIX) and self.mode != "oracle":
            raise SealedAccessError(f"tensor {name!r} is sealed in {self.mode} mode")
        if name not in self._tensors:
            raise FormatError(f"bundle has no tensor named {name!r}")
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def get(self, name: str, default=None):
        return self[name] if name in self._tensors else default

    def names(self) -> list[str]:
        return sorted(self._tensors)

    @property
    def truth(self) -> dict:
        if self.mode != "oracle":
            raise SealedAccessError(f"ground truth is sealed in {self.mode} mode")
        return self.meta.get("truth", {})

    def public_meta(self) -> dict:
        return {k: v for k, v in self.meta.items() if k != "truth"}

    def sealed(self) -> "SceneBundle":
        """Same content, opened for estimation."""
        out = SceneBundle(mode="estimation")
        out.meta = self.meta
        out._tensors = self._tensors
        return out

    # comparison helpers for the determinism checks
    def payload_digest(self) -> str:
        return _build(self)[1]

    def tensors_equal(self, other: "SceneBundle") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._tensors[k], other._tensors[k]) and
                   self._tensors[k].dtype == other._tensors[k].dtype for k in self.names())


def _build(bundle: SceneBundle) -> tuple[dict, str, list[bytes]]:
    entries, chunks = [], []
    offset = 0
    h = hashlib.sha256()
    for name in bundle.names():
        code, arr = _encode(bundle._tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        h.update(raw)
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "mmsysid.scene", "version": FORMAT_VERSION, "meta": bundle.meta,
                "tensors": entries, "payload_bytes": offset, "content_hash": h.hexdigest()}
    return manifest, h.hexdigest(), chunks


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bundle(bundle: SceneBundle, path) -> str:
    """Write atomically; returns the payload hash."""
    manifest, digest, chunks = _build(bundle)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def write(f):
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)

    _atomic_write(Path(path), write)
    return digest


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise FormatError(f"{path}: not a .scene container")
        (n,) = struct.unpack("<Q", head[8:])
        blob = f.read(n)
    if len(blob) != n:
        raise CorruptionError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(blob.decode("utf-8"))
    except ValueError as exc:
        raise CorruptionError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format") != "mmsysid.scene":
        raise FormatError(f"{path}: unknown container format")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported container version {manifest.get('version')}")
    return manifest


def read_bundle(path, mode: str = "oracle", required: tuple[str, ...] = ()) -> SceneBundle:
    """Read and verify a container. Never returns a partial bundle."""
    manifest = read_manifest(path)
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[8:16])
    payload = data[16 + n:]
    total = int(manifest.get("payload_bytes", -1))
    if len(payload) < total:
        raise CorruptionError(f"{path}: payload truncated ({len(payload)} of {total} bytes)")
    if len(payload) > total:
        raise CorruptionError(f"{path}: trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != manifest.get("content_hash"):
        raise CorruptionError(f"{path}: content hash mismatch")
    bundle = SceneBundle(manifest.get("meta", {}), mode=mode)
    for e in manifest["tensors"]:
        name = e["name"]
        if e["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype {e['dtype']!r}")
        dt = _DTYPES[e["dtype"]]
        shape = tuple(int(s) for s in e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != e["nbytes"] or e["offset"] + nbytes > total:
            raise FormatError(f"{path}: tensor {name!r} extent does not match the payload")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                            offset=e["offset"]).reshape(shape).copy()
        bundle._tensors[name] = arr
    for name in required:
        if name not in bundle._tensors:
            raise FormatError(f"{path}: manifest does not reference required tensor {name!r}")
    return bundle


# ---------------------------------------------------------------- images

def write_pgm(path, mask_or_gray) -> None:
    img = np.asarray(mask_or_gray)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    elif img.dtype.kind == "f":
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    _atomic_write(Path(path), lambda f: (f.write(f"P5\n{w} {h}\n255\n".encode()), f.write(img.tobytes())))


def write_ppm(path, rgb) -> None:
    img = np.asarray(rgb)
    if img.dtype.kind == "f":
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    _atomic_write(Path(path), lambda f: (f.write(f"P6\n{w} {h}\n255\n".encode()),
                                         f.write(np.ascontiguousarray(img).tobytes())))


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    need = w * h * channels
    body = data[pos:pos + need]
    if len(body) != need:
        raise CorruptionError(f"{path}: image data truncated")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, channels)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)
