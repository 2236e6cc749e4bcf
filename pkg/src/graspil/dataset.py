"""Episode persistence, calibration, normalization, and batch assembly.

Episodes are stored in a little-endian binary container: magic ``VTME``,
format version u32, header (codec, object name, seed, tick rate, image
dims, frame count), then fixed-width frames of
(tick u32, phase u8, raw RGB8 image, q f32[6], f f32[30], a f32[6]).
The optional codec byte selects zlib compression of the frame section
(zstd is not available on the package mirror; same lossless contract).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

MAGIC = b"VTME"
VERSION = 1
TICK_RATE = 30.0
N_JOINTS = 6
N_FORCES = 30


class Phase(IntEnum):
    Rest = 0
    Reaching = 1
    Grasping = 2
    Lifting = 3
    Holding = 4
    Lowering = 5
    Releasing = 6
    Retrieving = 7


class EpisodeFormatError(ValueError):
    """Corrupt episode file; message names the failing byte offset."""


class CalibrationError(ValueError):
    """Episode lacks the Rest-phase frames needed for force calibration."""


@dataclass
class Frame:
    tick: int
    image: np.ndarray               # (h, w, 3) uint8
    q: np.ndarray                   # (6,) float32, degrees
    f: np.ndarray                   # (30,) float32, newtons
    a: np.ndarray                   # (6,) float32, commanded joint targets


@dataclass
class Episode:
    object_name: str
    seed: int
    tick_rate: float = TICK_RATE
    frames: list[Frame] = field(default_factory=list)
    phases: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


_FRAME_FIXED = "<IB"  # tick, phase


def _frame_size(img_h: int, img_w: int) -> int:
    return 4 + 1 + img_h * img_w * 3 + 4 * (N_JOINTS + N_FORCES + N_JOINTS)


def write_episode(path, episode: Episode, compress: bool = False):
    if len(episode.frames) != len(episode.phases):
        raise EpisodeFormatError("frame/phase count mismatch")
    img_h, img_w = (episode.frames[0].image.shape[:2] if episode.frames else (240, 320))
    parts = []
    for fr, ph in zip(episode.frames, episode.phases):
        img = np.ascontiguousarray(fr.image, dtype=np.uint8)
        if img.shape != (img_h, img_w, 3):
            raise EpisodeFormatError(f"frame image shape {img.shape} != ({img_h},{img_w},3)")
        parts.append(struct.pack(_FRAME_FIXED, fr.tick, int(ph)))
        parts.append(img.tobytes())
        parts.append(np.asarray(fr.q, dtype="<f4").tobytes())
        parts.append(np.asarray(fr.f, dtype="<f4").tobytes())
        parts.append(np.asarray(fr.a, dtype="<f4").tobytes())
    body = b"".join(parts)
    codec = 1 if compress else 0
    if compress:
        body = zlib.compress(body, level=3)
    name = episode.object_name.encode("utf-8")
    header = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<B", codec),
        struct.pack("<I", len(name)), name,
        struct.pack("<Q", episode.seed & 0xFFFFFFFFFFFFFFFF),
        struct.pack("<d", episode.tick_rate),
        struct.pack("<II", img_h, img_w),
        struct.pack("<I", len(episode.frames)),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def _parse_header(buf: bytes, path=""):
    if buf[:4] != MAGIC:
        raise EpisodeFormatError(f"{path}: bad magic at byte 0: {buf[:4]!r}")
    if len(buf) < 9:
        raise EpisodeFormatError(f"{path}: truncated header at byte 4")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise EpisodeFormatError(f"{path}: unsupported version {version} at byte 4")
    (codec,) = struct.unpack_from("<B", buf, 8)
    off = 9
    if off + 4 > len(buf):
        raise EpisodeFormatError(f"{path}: truncated name length at byte {off}")
    (name_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + name_len + 8 + 8 + 8 + 4 > len(buf):
        raise EpisodeFormatError(f"{path}: truncated header fields at byte {off}")
    name = buf[off:off + name_len].decode("utf-8")
    off += name_len
    (seed,) = struct.unpack_from("<Q", buf, off)
    off += 8
    (tick_rate,) = struct.unpack_from("<d", buf, off)
    off += 8
    img_h, img_w = struct.unpack_from("<II", buf, off)
    off += 8
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    return dict(codec=codec, name=name, seed=seed, tick_rate=tick_rate,
                img_h=img_h, img_w=img_w, count=count, body_off=off)


def read_episode(path) -> Episode:
    path = Path(path)
    buf = path.read_bytes()
    hdr = _parse_header(buf, path)
    body = buf[hdr["body_off"]:]
    if hdr["codec"] == 1:
        try:
            body = zlib.decompress(body)
        except zlib.error as e:
            raise EpisodeFormatError(f"{path}: corrupt compressed body at byte {hdr['body_off']}: {e}")
    elif hdr["codec"] != 0:
        raise EpisodeFormatError(f"{path}: unknown codec {hdr['codec']} at byte 8")
    img_h, img_w = hdr["img_h"], hdr["img_w"]
    fsize = _frame_size(img_h, img_w)
    need = hdr["count"] * fsize
    if len(body) != need:
        raise EpisodeFormatError(
            f"{path}: frame section is {len(body)} bytes at byte {hdr['body_off']}, expected {need}")
    ep = Episode(object_name=hdr["name"], seed=hdr["seed"], tick_rate=hdr["tick_rate"])
    img_bytes = img_h * img_w * 3
    off = 0
    for _ in range(hdr["count"]):
        tick, phase = struct.unpack_from(_FRAME_FIXED, body, off)
        off += 5
        image = np.frombuffer(body, dtype=np.uint8, count=img_bytes, offset=off).reshape(img_h, img_w, 3).copy()
        off += img_bytes
        q = np.frombuffer(body, dtype="<f4", count=N_JOINTS, offset=off).copy()
        off += 4 * N_JOINTS
        f = np.frombuffer(body, dtype="<f4", count=N_FORCES, offset=off).copy()
        off += 4 * N_FORCES
        a = np.frombuffer(body, dtype="<f4", count=N_JOINTS, offset=off).copy()
        off += 4 * N_JOINTS
        ep.frames.append(Frame(tick, image, q, f, a))
        ep.phases.append(phase)
    return ep


def calibrate_forces(episode: Episode) -> Episode:
    """Subtract the Rest-phase per-cell mean from all force readings, floor 0."""
    rest = [fr.f for fr, ph in zip(episode.frames, episode.phases) if ph == Phase.Rest]
    if not rest:
        raise CalibrationError(f"episode {episode.object_name!r} has no Rest-phase frames")
    baseline = np.mean(np.asarray(rest, dtype=np.float64), axis=0)
    out = Episode(episode.object_name, episode.seed, episode.tick_rate)
    for fr, ph in zip(episode.frames, episode.phases):
        f = np.maximum(fr.f.astype(np.float64) - baseline, 0.0).astype(np.float32)
        out.frames.append(Frame(fr.tick, fr.image, fr.q, f, fr.a))
        out.phases.append(ph)
    return out


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    q_mean: np.ndarray
    q_std: np.ndarray
    f_mean: np.ndarray
    f_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray

    @property
    def h_mean(self) -> np.ndarray:
        return np.concatenate([self.q_mean, self.f_mean])

    @property
    def h_std(self) -> np.ndarray:
        return np.concatenate([self.q_std, self.f_std])

    def save(self, path):
        with open(path, "w") as fh:
            for key in ("q_mean", "q_std", "f_mean", "f_std", "a_mean", "a_std"):
                vals = " ".join(repr(float(v)) for v in getattr(self, key))
                fh.write(f"{key} = {vals}\n")

    @staticmethod
    def load(path) -> "NormStats":
        vals = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            key, _, rest = line.partition("=")
            vals[key.strip()] = np.array([float(v) for v in rest.split()])
        return NormStats(**vals)


def compute_norm_stats(episodes) -> NormStats:
    """Per-dimension mean/std of q, f, a over a training set; std floored 1e-6."""
    qs, fs, as_ = [], [], []
    for ep in episodes:
        for fr in ep.frames:
            qs.append(fr.q)
            fs.append(fr.f)
            as_.append(fr.a)
    q = np.asarray(qs, dtype=np.float64)
    f = np.asarray(fs, dtype=np.float64)
    a = np.asarray(as_, dtype=np.float64)

    def stat(x):
        return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)

    qm, qs_ = stat(q)
    fm, fs_ = stat(f)
    am, asd = stat(a)
    return NormStats(qm, qs_, fm, fs_, am, asd)


# ---------------------------------------------------------------------------
# lazy dataset + batch sampling

class EpisodeDataset:
    """Random access over a directory of raw (uncompressed) episode files.

    Frames are fixed-width, so a (file, t) pair maps to a byte offset; only
    the requested bytes are touched. Compressed episodes are inflated into
    memory on first use.
    """

    def __init__(self, paths):
        self.paths = [Path(p) for p in paths]
        if not self.paths:
            raise EpisodeFormatError("dataset is empty")
        self._meta = []
        self._buffers: dict[int, np.ndarray] = {}
        counts = []
        for p in self.paths:
            with open(p, "rb") as fh:
                head = fh.read(64 * 1024)
            hdr = _parse_header(head, p)
            self._meta.append(hdr)
            counts.append(hdr["count"])
        self.counts = np.array(counts)
        self.cum = np.concatenate([[0], np.cumsum(self.counts)])
        self.total_frames = int(self.cum[-1])

    def _body(self, i: int) -> np.ndarray:
        if i not in self._buffers:
            hdr = self._meta[i]
            if hdr["codec"] == 0:
                self._buffers[i] = np.memmap(self.paths[i], dtype=np.uint8, mode="r",
                                             offset=hdr["body_off"])
            else:
                raw = self.paths[i].read_bytes()[hdr["body_off"]:]
                self._buffers[i] = np.frombuffer(zlib.decompress(raw), dtype=np.uint8)
        return self._buffers[i]

    def frame_location(self, flat: int) -> tuple[int, int]:
        i = int(np.searchsorted(self.cum, flat, side="right") - 1)
        return i, int(flat - self.cum[i])

    def read_proprio(self, i: int, t: int):
        hdr = self._meta[i]
        fsize = _frame_size(hdr["img_h"], hdr["img_w"])
        off = t * fsize + 5 + hdr["img_h"] * hdr["img_w"] * 3
        body = self._body(i)
        vals = body[off:off + 4 * 42].view("<f4")
        return vals[:6], vals[6:36], vals[36:42]   # q, f, a

    def read_image(self, i: int, t: int) -> np.ndarray:
        hdr = self._meta[i]
        fsize = _frame_size(hdr["img_h"], hdr["img_w"])
        off = t * fsize + 5
        body = self._body(i)
        n = hdr["img_h"] * hdr["img_w"] * 3
        return body[off:off + n].reshape(hdr["img_h"], hdr["img_w"], 3)


def open_dataset(directory) -> EpisodeDataset:
    paths = sorted(Path(directory).glob("*.vtme"))
    return EpisodeDataset(paths)


def sample_batch(dataset: EpisodeDataset, batch_size: int, rng, stats: NormStats,
                 p: int = 30, k: int = 20):
    """Draw (image, history, chunk) tuples, normalized, deterministic per rng.

    History is front-padded by repeating frame 0; the action chunk is
    back-padded by repeating the final action.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    img_h, img_w = dataset._meta[0]["img_h"], dataset._meta[0]["img_w"]
    images = np.empty((batch_size, img_h, img_w, 3))
    hists = np.empty((batch_size, p, N_JOINTS + N_FORCES))
    chunks = np.empty((batch_size, k, N_JOINTS))
    h_mean, h_std = stats.h_mean, stats.h_std
    for b in range(batch_size):
        flat = int(rng.integers(0, dataset.total_frames))
        i, t = dataset.frame_location(flat)
        n = int(dataset.counts[i])
        images[b] = dataset.read_image(i, t).astype(np.float64) / 255.0
        for j, tt in enumerate(range(t - p + 1, t + 1)):
            q, f, _ = dataset.read_proprio(i, max(0, tt))
            hists[b, j, :6] = q
            hists[b, j, 6:] = f
        for j, tt in enumerate(range(t, t + k)):
            _, _, a = dataset.read_proprio(i, min(n - 1, tt))
            chunks[b, j] = a
    hists = (hists - h_mean) / h_std
    chunks = (chunks - stats.a_mean) / stats.a_std
    return images, hists, chunks
