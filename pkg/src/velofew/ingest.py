"""File formats and the synthetic multi-speed dataset generator.

Three little-endian binary formats, all bit-exact on round-trip:

  feature bank (.mvpf)
      "MVPF" | u16 version=1 | u16 flags | u32 num_videos | u32 T | u32 C
      per video: u32 id | u32 label | T*C float32, row-major
      class names: u32 count | per entry: u32 id | u16 byte_len | utf-8

  text table (.mvpt)
      "MVPT" | u16 version=1 | u32 count | u32 C
      per entry: u32 class_id | C float32

  checkpoint (.mvpc)
      "MVPC" | body | u32 crc32(body); body = u16 version=1 |
      u32 channels, heads, scales, ffn_width, mlp_width | u8 learn_alpha |
      u32 param_count | per param: u16 name_len | name | u8 rank |
      rank*u32 dims | float64 payload

Embeddings live on disk as float32 and are promoted to float64 in
memory so the gradient checks keep their headroom.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .stages import ModelConfig, ModelParams

_BANK_MAGIC = b"MVPF"
_TEXT_MAGIC = b"MVPT"
_CKPT_MAGIC = b"MVPC"
_VERSION = 1


@dataclass
class Video:
    label: int
    frames: np.ndarray  # T x C float64


@dataclass
class FeatureBank:
    """All frame embeddings the engine ever sees, keyed by video id."""

    frames_per_video: int
    channels: int
    videos: dict  # video id -> Video
    class_names: dict  # class id -> str

    def class_index(self):
        index = {}
        for vid in sorted(self.videos):
            index.setdefault(self.videos[vid].label, []).append(vid)
        return index

    def validate(self):
        t, c = self.frames_per_video, self.channels
        for vid in sorted(self.videos):
            video = self.videos[vid]
            if video.frames.shape != (t, c):
                raise DataError(
                    f"video {vid} has shape {video.frames.shape}, expected {(t, c)}"
                )
            if not np.all(np.isfinite(video.frames)):
                raise DataError(f"video {vid} contains non-finite values")
            if video.label not in self.class_names:
                raise DataError(f"video {vid} references unnamed class {video.label}")


@dataclass
class TextTable:
    """Frozen class-name embeddings, one 1 x C row per class id."""

    channels: int
    embeddings: dict  # class id -> np.ndarray (1, C) float64


def check_pairing(bank, table):
    """Guard the bank/table join: widths equal, every label resolvable."""
    if bank.channels != table.channels:
        raise DataError(
            f"bank embeds {bank.channels} channels but text table has "
            f"{table.channels}"
        )
    for vid in sorted(bank.videos):
        label = bank.videos[vid].label
        if label not in table.embeddings:
            raise DataError(f"class id {label} missing from text table")


class _Cursor:
    """Byte reader that reports the offset of the field that failed."""

    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", offset=self.off)
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def expect_end(self):
        if self.off != len(self.buf):
            raise FormatError("trailing bytes after parsed content", offset=self.off)


def _check_magic(cur, magic, kind):
    got = cur.take(len(magic), f"{kind} magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)


def _check_version(cur, kind):
    offset = cur.off
    (version,) = cur.unpack("<H", f"{kind} version")
    if version != _VERSION:
        raise FormatError(f"unsupported {kind} version {version}", offset=offset)


def write_bank(bank, path):
    bank.validate()
    out = bytearray()
    out += _BANK_MAGIC
    out += struct.pack("<HHIII", _VERSION, 0, len(bank.videos),
                       bank.frames_per_video, bank.channels)
    for vid in sorted(bank.videos):
        video = bank.videos[vid]
        out += struct.pack("<II", vid, video.label)
        out += np.ascontiguousarray(video.frames, dtype="<f4").tobytes()
    names = sorted(bank.class_names)
    out += struct.pack("<I", len(names))
    for cid in names:
        raw = bank.class_names[cid].encode("utf-8")
        out += struct.pack("<IH", cid, len(raw))
        out += raw
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_bank(path):
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    _check_magic(cur, _BANK_MAGIC, "bank")
    _check_version(cur, "bank")
    (_flags,) = cur.unpack("<H", "bank flags")
    num_videos, t, c = cur.unpack("<III", "bank counts")
    videos = {}
    for k in range(num_videos):
        vid, label = cur.unpack("<II", f"video {k} header")
        raw = cur.take(4 * t * c, f"video {k} frames")
        frames = np.frombuffer(raw, dtype="<f4").reshape(t, c).astype(np.float64)
        if not np.all(np.isfinite(frames)):
            raise DataError(f"video {vid} contains non-finite values")
        videos[vid] = Video(label, frames)
    (name_count,) = cur.unpack("<I", "class name count")
    class_names = {}
    for k in range(name_count):
        cid, length = cur.unpack("<IH", f"class name {k} header")
        class_names[cid] = cur.take(length, f"class name {k}").decode("utf-8")
    cur.expect_end()
    bank = FeatureBank(t, c, videos, class_names)
    bank.validate()
    return bank


def write_text_table(table, path):
    out = bytearray()
    out += _TEXT_MAGIC
    out += struct.pack("<HII", _VERSION, len(table.embeddings), table.channels)
    for cid in sorted(table.embeddings):
        row = np.asarray(table.embeddings[cid], dtype=np.float64).reshape(-1)
        if row.size != table.channels:
            raise DataError(
                f"text row for class {cid} has {row.size} channels, "
                f"expected {table.channels}"
            )
        if not np.all(np.isfinite(row)):
            raise DataError(f"text row for class {cid} is non-finite")
        out += struct.pack("<I", cid)
        out += row.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_text_table(path):
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    _check_magic(cur, _TEXT_MAGIC, "text table")
    _check_version(cur, "text table")
    count, c = cur.unpack("<II", "text table counts")
    embeddings = {}
    for k in range(count):
        (cid,) = cur.unpack("<I", f"text entry {k} id")
        raw = cur.take(4 * c, f"text entry {k} payload")
        row = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(1, c)
        if not np.all(np.isfinite(row)):
            raise DataError(f"text row for class {cid} is non-finite")
        embeddings[cid] = row
    cur.expect_end()
    return TextTable(c, embeddings)


def save_checkpoint(params, path):
    cfg = params.config
    body = bytearray()
    body += struct.pack("<H", _VERSION)
    body += struct.pack(
        "<IIIII", cfg.channels, cfg.heads, cfg.scales, cfg.ffn_width, cfg.mlp_width
    )
    body += struct.pack("<B", 1 if cfg.learn_alpha else 0)
    plist = params.all_params()
    body += struct.pack("<I", len(plist))
    for p in plist:
        name = p.name.encode("utf-8")
        body += struct.pack("<H", len(name))
        body += name
        dims = p.data.shape
        body += struct.pack("<B", len(dims))
        for d in dims:
            body += struct.pack("<I", d)
        body += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))


def load_checkpoint(path, expect_config=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    _check_magic(cur, _CKPT_MAGIC, "checkpoint")
    if len(buf) < len(_CKPT_MAGIC) + 4:
        raise FormatError("file too short for checksum", offset=len(buf))
    body = buf[len(_CKPT_MAGIC) : -4]
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != stored_crc:
        raise FormatError("checksum mismatch, checkpoint payload is corrupt")
    cur = _Cursor(body)
    _check_version(cur, "checkpoint")
    channels, heads, scales, ffn_width, mlp_width = cur.unpack("<IIIII", "hyperparameters")
    (learn_alpha,) = cur.unpack("<B", "alpha mode")
    config = ModelConfig(
        channels=channels, heads=heads, scales=scales,
        ffn_width=ffn_width, mlp_width=mlp_width, learn_alpha=bool(learn_alpha),
    )
    if expect_config is not None:
        mismatches = [
            (k, getattr(expect_config, k), getattr(config, k))
            for k in ("channels", "heads", "scales", "ffn_width", "mlp_width",
                      "learn_alpha")
            if getattr(expect_config, k) != getattr(config, k)
        ]
        if mismatches:
            k, want, got = mismatches[0]
            raise ConfigError(
                f"checkpoint {k} is {got}, expected {want}; refusing partial load"
            )
    params = ModelParams.init(config, seed=0)
    expected = params.all_params()
    (count,) = cur.unpack("<I", "parameter count")
    if count != len(expected):
        raise FormatError(
            f"checkpoint has {count} parameters, model needs {len(expected)}"
        )
    for p in expected:
        offset = cur.off
        (name_len,) = cur.unpack("<H", "parameter name length")
        name = cur.take(name_len, "parameter name").decode("utf-8")
        if name != p.name:
            raise FormatError(
                f"parameter order mismatch: got {name!r}, expected {p.name!r}",
                offset=offset,
            )
        (rank,) = cur.unpack("<B", f"{name} rank")
        dims = tuple(cur.unpack("<" + "I" * rank, f"{name} dims")) if rank else ()
        if dims != p.data.shape:
            raise FormatError(
                f"parameter {name} has dims {dims}, expected {p.data.shape}",
                offset=offset,
            )
        n = int(np.prod(dims)) if dims else 1
        raw = cur.take(8 * n, f"{name} payload")
        p.value.data[...] = np.frombuffer(raw, dtype="<f8").reshape(dims)
    cur.expect_end()
    return params


def make_synthetic(n_classes, per_class, frames_per_video=8, channels=16,
                   speeds=(1.0,), noise_sigma=0.0, seed=0, base_points=64):
    """Deterministic multi-speed dataset: per class a smooth closed
    trajectory; each video traverses it at one of the given speeds,
    linearly interpolated down to the frame count, plus optional noise.

    Values are quantized to float32 on creation so in-memory banks match
    their on-disk round-trip exactly.
    """
    if n_classes < 1 or per_class < 1:
        raise ConfigError(
            f"need at least one class and one video per class, got "
            f"{n_classes}/{per_class}"
        )
    if frames_per_video < 1 or channels < 1:
        raise ConfigError("frames_per_video and channels must be >= 1")
    speeds = [float(s) for s in speeds]
    if not speeds or any(s <= 0 for s in speeds):
        raise ConfigError(f"speeds must be positive, got {speeds}")

    rng = np.random.default_rng((int(seed), 0xDA7A))
    grid = np.arange(base_points + 1) / base_points
    videos = {}
    class_names = {}
    embeddings = {}
    vid = 0
    for cls in range(n_classes):
        offset = rng.uniform(-1.0, 1.0, channels) * 2.0
        amps = rng.uniform(0.3, 1.0, (3, channels))
        phases = rng.uniform(0.0, 2.0 * np.pi, (3, channels))
        freqs = rng.integers(1, 4, 3)
        base = offset[None, :] + sum(
            amps[k] * np.sin(2.0 * np.pi * freqs[k] * grid[:, None] + phases[k])
            for k in range(3)
        )
        embeddings[cls] = (
            base[:-1].mean(axis=0).astype(np.float32).astype(np.float64)[None, :]
        )
        class_names[cls] = f"class_{cls}"
        for _ in range(per_class):
            speed = speeds[int(rng.integers(len(speeds)))]
            ph = (speed * np.arange(frames_per_video) / frames_per_video) % 1.0
            frames = np.empty((frames_per_video, channels))
            for c in range(channels):
                frames[:, c] = np.interp(ph, grid, base[:, c])
            frames += rng.standard_normal((frames_per_video, channels)) * noise_sigma
            videos[vid] = Video(cls, frames.astype(np.float32).astype(np.float64))
            vid += 1
    bank = FeatureBank(frames_per_video, channels, videos, class_names)
    bank.validate()
    return bank, TextTable(channels, embeddings)
