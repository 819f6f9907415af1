"""Ablation schemes: how one byte sequence becomes L reduced views.

Three schemes:

* rca — L chunks of length ceil(l*p) with independently uniform starts.
* sca — L chunks of the same length with deterministic, seed-free,
  evenly spaced starts: start_i = floor(i * (l - g) / (L - 1)).  The
  first window begins at 0 and the last ends at l.  At L=20, p=0.05,
  l=1000 the windows tile the file exactly (zero overlap); at L=100
  adjacent windows overlap by about 80%.
* rs — every byte independently replaced by the ablation token with
  probability 1 - p (p is the keep probability for this scheme only).

Training uses a single uniformly placed chunk per sample for both chunk
schemes; they differ only at inference.

``sca_mode="verbatim"`` reproduces the published pseudocode for the
evenly-spaced sampler instead.  Those formulas are internally
inconsistent (stride collapses to 0 at L=20 and windows run past the
file at L=100, contradicting the scheme's own overlap figures), so the
mode exists purely for auditability; windows are clamped to the file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid

ABLATE_TOKEN = 256  # reserved embedding index for masked/padding positions
VOCAB_SIZE = 257

_SCHEMES = ("rca", "sca", "rs")


@dataclass(frozen=True)
class ChunkWindow:
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class AblationConfig:
    scheme: str
    p: float = 0.05
    n_views: int = 100
    seed: int = 0
    sca_mode: str = "even"

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ConfigInvalid(f"scheme must be one of {_SCHEMES}, got {self.scheme!r}")
        if not (0.0 < self.p <= 1.0):
            raise ConfigInvalid(f"p must be in (0, 1], got {self.p}")
        if self.n_views < 1:
            raise ConfigInvalid(f"n_views must be >= 1, got {self.n_views}")
        if self.sca_mode not in ("even", "verbatim"):
            raise ConfigInvalid(f"sca_mode must be 'even' or 'verbatim', got {self.sca_mode!r}")


@dataclass(frozen=True)
class AblatedView:
    """One reduced view, ready for the model: int32 tokens in [0, 256].

    Chunk views carry their window and tokens equal to the raw bytes of
    that window; rs views have window None and full-length tokens with
    masked positions set to ABLATE_TOKEN.
    """

    window: ChunkWindow | None
    tokens: np.ndarray


def chunk_length(file_len: int, p: float) -> int:
    """ceil(file_len * p), clamped to [1, file_len].

    The product is rounded to 9 decimals before the ceil so that binary
    float noise (1000 * 0.05 -> 50.000000000000004) cannot inflate the
    chunk by one byte.
    """
    if file_len < 1:
        raise ConfigInvalid(f"file_len must be >= 1, got {file_len}")
    g = math.ceil(round(file_len * p, 9))
    return max(1, min(g, file_len))


def training_window(file_len: int, p: float, rng: np.random.Generator) -> ChunkWindow:
    """The single uniformly placed training chunk (shared by rca and sca)."""
    g = chunk_length(file_len, p)
    start = int(rng.integers(0, file_len - g + 1))
    return ChunkWindow(start, start + g)


def rca_windows(file_len: int, cfg: AblationConfig, rng: np.random.Generator) -> list[ChunkWindow]:
    g = chunk_length(file_len, cfg.p)
    starts = rng.integers(0, file_len - g + 1, size=cfg.n_views)
    return [ChunkWindow(int(s), int(s) + g) for s in starts]


def sca_windows(file_len: int, cfg: AblationConfig) -> list[ChunkWindow]:
    if cfg.sca_mode == "verbatim":
        return _sca_windows_verbatim(file_len, cfg)
    g = chunk_length(file_len, cfg.p)
    L = cfg.n_views
    if L == 1:
        return [ChunkWindow(0, g)]
    return [ChunkWindow(i * (file_len - g) // (L - 1), i * (file_len - g) // (L - 1) + g) for i in range(L)]


def _sca_windows_verbatim(file_len: int, cfg: AblationConfig) -> list[ChunkWindow]:
    g = chunk_length(file_len, cfg.p)
    L = cfg.n_views
    overlap_size = file_len // L
    diff = g - overlap_size
    a = math.ceil(diff / L)
    b = math.ceil(round(diff * cfg.p, 9))
    stride = diff - (b - a)
    windows = []
    for i in range(L):
        start = i * stride
        end = min(start + g, file_len)
        start = min(max(start, 0), file_len - 1)
        windows.append(ChunkWindow(start, max(end, start + 1)))
    return windows


def rs_tokens(data: bytes, cfg: AblationConfig, rng: np.random.Generator) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8).astype(np.int32)
    keep = rng.random(len(data)) < cfg.p
    return np.where(keep, raw, np.int32(ABLATE_TOKEN))


def window_tokens(data: bytes, window: ChunkWindow) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8, count=window.length, offset=window.start).astype(
        np.int32
    )


def make_views(data: bytes, cfg: AblationConfig, rng: np.random.Generator | None = None) -> list[AblatedView]:
    """Build the L inference views for one file under cfg.

    rca and rs consume the rng (pass one derived from (cfg.seed, file));
    sca ignores it and is a pure function of (len(data), cfg).
    """
    file_len = len(data)
    if cfg.scheme == "sca":
        return [AblatedView(w, window_tokens(data, w)) for w in sca_windows(file_len, cfg)]
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if cfg.scheme == "rca":
        return [AblatedView(w, window_tokens(data, w)) for w in rca_windows(file_len, cfg, rng)]
    return [AblatedView(None, rs_tokens(data, cfg, rng)) for _ in range(cfg.n_views)]


def windows_touching(windows: list[ChunkWindow], region: tuple[int, int]) -> list[int]:
    """Indices of windows with a non-empty intersection with [region)."""
    a, b = region
    if b <= a:
        return []
    return [i for i, w in enumerate(windows) if w.start < b and w.end > a]
