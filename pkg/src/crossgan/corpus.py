"""Image-directory corpus ingestion, batching, and the synthetic two-style test corpus.

Corpus layout on disk: <root>/<domain-dir>/<episode-id>/<frame>.png (or .jpg).
Images are decoded to RGB, resized bilinearly, and scaled to [-1, 1] to match
the generator's tanh output range.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import CrossganError

DOMAINS = ("S", "L")

# 64..256 are the production sizes; 16 and 32 exist for the reduced
# test-only networks so gradient checks and step tests stay fast.
ALLOWED_RESOLUTIONS = (16, 32, 64, 128, 256)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    domain: str
    episode_id: str
    frame_index: int
    path: str


@dataclass
class Corpus:
    """Immutable record collection; episodes partition the records."""

    records: list[FrameRecord]
    skipped: int = 0
    _by_id: dict[int, FrameRecord] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {r.frame_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise CrossganError("duplicate frame_id in corpus")
        keys = {(r.episode_id, r.frame_index) for r in self.records}
        if len(keys) != len(self.records):
            raise CrossganError("duplicate (episode_id, frame_index) in corpus")

    def __len__(self):
        return len(self.records)

    def record(self, frame_id: int) -> FrameRecord:
        try:
            return self._by_id[frame_id]
        except KeyError:
            raise CrossganError(f"unknown frame_id {frame_id}") from None

    @property
    def domains_present(self) -> set[str]:
        return {r.domain for r in self.records}

    @property
    def episodes(self) -> dict[str, list[FrameRecord]]:
        out: dict[str, list[FrameRecord]] = {}
        for r in self.records:
            out.setdefault(r.episode_id, []).append(r)
        for frames in out.values():
            frames.sort(key=lambda r: r.frame_index)
        return out

    def filtered(self, domain: str | None) -> list[FrameRecord]:
        if domain is None:
            return list(self.records)
        if domain not in DOMAINS:
            raise CrossganError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
        return [r for r in self.records if r.domain == domain]


@dataclass
class ImageBatch:
    """(b, 3, H, W) float array in [-1, 1] with per-item domain labels."""

    data: np.ndarray
    domain_labels: list[str]
    frame_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise CrossganError(f"image batch must be (b,3,H,W), got {self.data.shape}")
        if self.data.shape[2] != self.data.shape[3]:
            raise CrossganError("image batch must be square")

    @property
    def resolution(self) -> int:
        return int(self.data.shape[2])

    def __len__(self):
        return int(self.data.shape[0])


def _check_resolution(resolution: int):
    if resolution not in ALLOWED_RESOLUTIONS:
        raise CrossganError(
            f"resolution {resolution} not supported; expected one of {ALLOWED_RESOLUTIONS}"
        )


def _is_readable_image(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def scan_corpus(
    root: str | Path,
    domain_map: dict[str, str] | None = None,
    manifest_path: str | Path | None = None,
) -> Corpus:
    """Scan <root>/<domain-dir>/<episode>/<frame> into a Corpus.

    ``domain_map`` maps subdirectory names of ``root`` to domain labels;
    defaults to {"S": "S", "L": "L"}. Episode ids are namespaced as
    "<domain>/<dirname>" so same-named episode directories under both domains
    stay distinct. Records are sorted by (domain, episode_id, filename) and
    frame_index follows filename sort order within each episode. Unreadable
    image files are skipped and counted in ``Corpus.skipped``. The scan is a
    pure function of the directory listing, so rescanning yields identical
    ids and ordering.
    """
    root = Path(root)
    if not root.is_dir():
        raise CrossganError(f"corpus root {root} does not exist")
    if domain_map is None:
        domain_map = {"S": "S", "L": "L"}
    for sub, dom in domain_map.items():
        if dom not in DOMAINS:
            raise CrossganError(f"domain_map assigns unknown domain {dom!r} to {sub!r}")

    entries: list[tuple[str, str, str, Path]] = []  # (domain, episode, filename, path)
    skipped = 0
    for sub in sorted(domain_map):
        dom = domain_map[sub]
        dom_dir = root / sub
        if not dom_dir.is_dir():
            raise CrossganError(f"mapped subdirectory {dom_dir} does not exist")
        for ep_dir in sorted(p for p in dom_dir.iterdir() if p.is_dir()):
            episode_id = f"{dom}/{ep_dir.name}"
            for f in sorted(p for p in ep_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS):
                if _is_readable_image(f):
                    entries.append((dom, episode_id, f.name, f))
                else:
                    skipped += 1

    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    if not entries:
        raise CrossganError(f"no readable images found under {root}")

    records = []
    frame_index: dict[tuple[str, str], int] = {}
    for frame_id, (dom, ep, _fname, path) in enumerate(entries):
        idx = frame_index.get((dom, ep), 0)
        frame_index[(dom, ep)] = idx + 1
        records.append(FrameRecord(frame_id, dom, ep, idx, str(path)))

    corpus = Corpus(records, skipped=skipped)
    if manifest_path is not None:
        write_manifest(corpus, manifest_path)
    return corpus


def write_manifest(corpus: Corpus, path: str | Path):
    """One record per line: frame_id, domain, episode_id, frame_index, path (tab-separated)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{r.frame_id}\t{r.domain}\t{r.episode_id}\t{r.frame_index}\t{r.path}\n"
        for r in corpus.records
    ]
    path.write_text("".join(lines), encoding="utf-8")


def load_manifest(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise CrossganError(f"manifest {path} does not exist")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise CrossganError(f"{path}:{lineno}: expected 5 tab-separated fields")
        records.append(
            FrameRecord(int(parts[0]), parts[1], parts[2], int(parts[3]), parts[4])
        )
    if not records:
        raise CrossganError(f"manifest {path} is empty")
    return Corpus(records)


def _load_image(path: str, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except CrossganError:
        raise
    except Exception as exc:
        raise CrossganError(f"failed to decode image {path}: {exc}") from exc
    # HWC uint8 -> CHW in [-1, 1]
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def load_batch(corpus: Corpus, ids: list[int], resolution: int) -> ImageBatch:
    """Decode and normalize the given frames, order matching ``ids``."""
    _check_resolution(resolution)
    records = [corpus.record(i) for i in ids]
    data = np.stack([_load_image(r.path, resolution) for r in records])
    return ImageBatch(data, [r.domain for r in records], [r.frame_id for r in records])


def denormalize(data: np.ndarray) -> np.ndarray:
    """Invert load_batch scaling back to uint8; exact for untouched pixels."""
    return np.clip(np.rint((data + 1.0) * 127.5), 0, 255).astype(np.uint8)


class MinibatchStream:
    """Seeded, restartable stream of fixed-size minibatches.

    Each epoch is an independent permutation of the filtered records derived
    from (seed, epoch), chunked into batches of ``b`` with the final short
    chunk dropped. Batch ``i`` is a pure function of (seed, i), so a stream
    can be restarted at any iteration and replay identically.
    """

    def __init__(self, corpus: Corpus, b: int, domain_filter: str | None,
                 seed: int, resolution: int):
        _check_resolution(resolution)
        if b < 1:
            raise CrossganError(f"batch size must be >= 1, got {b}")
        self.records = corpus.filtered(domain_filter)
        if not self.records:
            raise CrossganError(f"no records for domain filter {domain_filter!r}")
        if b > len(self.records):
            raise CrossganError(
                f"batch size {b} exceeds filtered corpus size {len(self.records)}"
            )
        self.corpus = corpus
        self.b = b
        self.seed = seed
        self.resolution = resolution

    @property
    def batches_per_epoch(self) -> int:
        return len(self.records) // self.b

    def batch_ids(self, iteration: int) -> list[int]:
        epoch, slot = divmod(iteration, self.batches_per_epoch)
        rng = np.random.default_rng([self.seed, epoch])
        perm = rng.permutation(len(self.records))
        picked = perm[slot * self.b : (slot + 1) * self.b]
        return [self.records[j].frame_id for j in picked]

    def batch(self, iteration: int) -> ImageBatch:
        return load_batch(self.corpus, self.batch_ids(iteration), self.resolution)

    def __iter__(self):
        i = 0
        while True:
            yield self.batch(i)
            i += 1


def minibatch_stream(corpus: Corpus, b: int, domain_filter: str | None = None,
                     seed: int = 0, resolution: int = 64) -> MinibatchStream:
    return MinibatchStream(corpus, b, domain_filter, seed, resolution)


# Palettes for the synthetic corpus: warm for domain S, cool for domain L,
# separated in mean channel color so a domain classifier can succeed quickly.
_WARM_BG = [(214, 96, 42), (226, 140, 36), (206, 70, 60), (232, 170, 64)]
_WARM_FG = [(245, 196, 70), (238, 120, 46), (198, 52, 40), (252, 222, 120), (160, 48, 28)]
_COOL_BG = [(40, 84, 190), (36, 130, 176), (70, 60, 186), (32, 148, 160)]
_COOL_FG = [(90, 176, 235), (52, 96, 210), (120, 110, 230), (60, 190, 200), (28, 56, 140)]


def _synth_frame(rng: np.random.Generator, resolution: int, warm: bool) -> Image.Image:
    bgs, fgs = (_WARM_BG, _WARM_FG) if warm else (_COOL_BG, _COOL_FG)
    im = Image.new("RGB", (resolution, resolution), bgs[rng.integers(len(bgs))])
    draw = ImageDraw.Draw(im)
    for _ in range(int(rng.integers(4, 9))):
        color = fgs[rng.integers(len(fgs))]
        jitter = rng.integers(-18, 19, size=3)
        color = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(color, jitter))
        x0, y0 = rng.integers(0, resolution, size=2)
        w, h = rng.integers(resolution // 8, resolution // 2, size=2)
        box = [int(x0), int(y0), int(min(x0 + w, resolution - 1)), int(min(y0 + h, resolution - 1))]
        if box[2] <= box[0] or box[3] <= box[1]:
            continue
        if rng.random() < 0.5:
            draw.rectangle(box, fill=color)
        else:
            draw.ellipse(box, fill=color)
    return im


def synth_corpus(n_episodes: int, frames_per_episode: int, resolution: int,
                 seed: int, root: str | Path | None = None) -> Corpus:
    """Generate a hermetic two-style corpus (warm domain S, cool domain L).

    Writes PNG files under ``root`` (a fresh temp directory when omitted)
    in the standard corpus layout, then scans them. Byte-identical given
    the same seed.
    """
    if n_episodes < 1 or frames_per_episode < 1:
        raise CrossganError("episode and frame counts must be >= 1")
    _check_resolution(resolution)
    if root is None:
        root = tempfile.mkdtemp(prefix="crossgan_synth_")
    root = Path(root)
    digits = max(2, int(math.log10(max(n_episodes, 1))) + 1)
    for dom in DOMAINS:
        warm = dom == "S"
        for ep in range(n_episodes):
            ep_dir = root / dom / f"ep{ep:0{digits}d}"
            ep_dir.mkdir(parents=True, exist_ok=True)
            for fr in range(frames_per_episode):
                rng = np.random.default_rng([seed, 0 if warm else 1, ep, fr])
                im = _synth_frame(rng, resolution, warm)
                im.save(ep_dir / f"frame_{fr:04d}.png")
    return scan_corpus(root)
