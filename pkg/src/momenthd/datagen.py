"""Synthetic moment-retrieval / highlight-detection corpus.

Every video is a sequence of clip vectors. A query is a random subset of
"concepts"; each concept has one prototype in clip space and an unrelated
prototype in token space, so the model has to learn the cross-modal
association. Ground-truth moments are runs of clips drawn around a query
concept's clip prototype; distractor runs use concepts that are *not* in the
query, and everything else is unstructured background.

Inside a run the noise scale grows from the center to the edges, so clips near
the middle of a moment sit closest to the prototype and carry the highest
saliency. With ``noise_sigma == 0`` every relevant clip equals its prototype.

Corpora are stored as JSON lines: a header object followed by one object per
video. Float arrays are flat lists with an explicit ``shape``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .spans import Span

FORMAT_NAME = "momenthd-corpus"
FORMAT_VERSION = 1


class SpecError(ValueError):
    """Raised for an invalid or infeasible :class:`CorpusSpec`."""


class CorpusFormatError(ValueError):
    """Raised when a corpus file cannot be parsed.

    ``record_index`` is the zero-based index of the offending video record,
    or ``None`` when the header is at fault.
    """

    def __init__(self, message: str, record_index: int | None = None):
        where = "header" if record_index is None else f"record {record_index}"
        super().__init__(f"{where}: {message}")
        self.record_index = record_index


@dataclass(frozen=True)
class CorpusSpec:
    num_videos: int = 512
    clips_per_video: int = 32
    tokens_per_query: int = 6
    feature_dim: int = 64
    num_concepts: int = 8
    moments_per_video: tuple[int, int] = (1, 3)
    noise_sigma: float = 0.3
    seed: int = 0
    moment_length: tuple[int, int] = (2, 8)
    max_distractors: int = 2
    concepts_per_query: tuple[int, int] = (1, 2)
    saliency_bandwidth: float = 2.0

    def validate(self) -> None:
        L = self.clips_per_video
        if self.num_videos < 0:
            raise SpecError("num_videos must be >= 0")
        if L < 4:
            raise SpecError("clips_per_video must be >= 4")
        if self.tokens_per_query < 2:
            raise SpecError("tokens_per_query must be >= 2")
        if self.num_concepts < 2:
            raise SpecError("num_concepts must be >= 2")
        if self.feature_dim < 1:
            raise SpecError("feature_dim must be >= 1")
        if not self.noise_sigma >= 0:
            raise SpecError("noise_sigma must be >= 0")
        if not self.saliency_bandwidth > 0:
            raise SpecError("saliency_bandwidth must be > 0")
        lo, hi = self.moments_per_video
        if not 1 <= lo <= hi <= 3:
            raise SpecError(f"moments_per_video {self.moments_per_video} must lie in [1, 3]")
        mlo, mhi = self.moment_length
        if not 1 <= mlo <= mhi:
            raise SpecError(f"bad moment_length {self.moment_length}")
        if hi * mlo > L:
            raise SpecError(
                f"infeasible packing: {hi} moments of length >= {mlo} do not fit in {L} clips"
            )
        qlo, qhi = self.concepts_per_query
        if not 1 <= qlo <= qhi or qhi >= self.num_concepts:
            raise SpecError(
                f"concepts_per_query {self.concepts_per_query} must be >= 1 and leave "
                "at least one non-query concept"
            )
        if self.max_distractors < 0:
            raise SpecError("max_distractors must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        for key in ("moments_per_video", "moment_length", "concepts_per_query"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class VideoTextPair:
    video_id: str
    clip_features: np.ndarray  # (L, D_raw)
    token_features: np.ndarray  # (N, D_raw)
    gt_spans: list[Span]
    gt_saliency: np.ndarray  # (L,) in [0, 1]
    relevance_mask: np.ndarray  # (L,) int8, 1 for clips inside a gt span
    query_concepts: tuple[int, ...] = ()

    def __eq__(self, other):
        if not isinstance(other, VideoTextPair):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.gt_spans == other.gt_spans
            and tuple(self.query_concepts) == tuple(other.query_concepts)
            and _arrays_equal(self.clip_features, other.clip_features)
            and _arrays_equal(self.token_features, other.token_features)
            and _arrays_equal(self.gt_saliency, other.gt_saliency)
            and _arrays_equal(self.relevance_mask, other.relevance_mask)
        )


@dataclass
class Corpus:
    spec: CorpusSpec
    video_prototypes: np.ndarray  # (K, D_raw)
    text_prototypes: np.ndarray  # (K, D_raw)
    filler_prototype: np.ndarray  # (D_raw,)
    pairs: list[VideoTextPair] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.spec == other.spec
            and _arrays_equal(self.video_prototypes, other.video_prototypes)
            and _arrays_equal(self.text_prototypes, other.text_prototypes)
            and _arrays_equal(self.filler_prototype, other.filler_prototype)
            and self.pairs == other.pairs
        )

    def subset(self, keep) -> "Corpus":
        keep = set(keep)
        pairs = [p for p in self.pairs if p.video_id in keep]
        return Corpus(self.spec, self.video_prototypes, self.text_prototypes,
                      self.filler_prototype, pairs)


def _arrays_equal(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)


def noise_profile(length: int) -> np.ndarray:
    """Per-clip noise multiplier inside a run: 0.5 at the middle, 1.5 at the edges."""
    pos = (np.arange(length) + 0.5) / length
    return 0.5 + np.abs(2.0 * pos - 1.0)


def _segment_lengths(rng, count, lo, hi, capacity):
    lengths = []
    for i in range(count):
        reserve = (count - i - 1) * lo
        top = min(hi, capacity - reserve)
        if top < lo:
            break
        n = int(rng.integers(lo, top + 1))
        lengths.append(n)
        capacity -= n
    return lengths


def _generate_pair(spec: CorpusSpec, index: int, rng, vproto, tproto, filler) -> VideoTextPair:
    L, N, D, K = spec.clips_per_video, spec.tokens_per_query, spec.feature_dim, spec.num_concepts
    sigma = spec.noise_sigma

    qlo, qhi = spec.concepts_per_query
    n_query = min(int(rng.integers(qlo, qhi + 1)), N)
    query = np.sort(rng.choice(K, size=n_query, replace=False))
    others = np.setdiff1d(np.arange(K), query)

    n_moments = int(rng.integers(spec.moments_per_video[0], spec.moments_per_video[1] + 1))
    mlo, mhi = spec.moment_length
    lengths = _segment_lengths(rng, n_moments, mlo, mhi, L)
    if len(lengths) != n_moments:
        raise SpecError(f"video {index}: moments cannot be packed disjointly")
    n_distract = int(rng.integers(0, spec.max_distractors + 1))
    distract_lengths = _segment_lengths(rng, n_distract, mlo, mhi, L - sum(lengths))

    segments = [(n, int(rng.choice(query)), True) for n in lengths]
    segments += [(n, int(rng.choice(others)), False) for n in distract_lengths]
    order = rng.permutation(len(segments))
    segments = [segments[i] for i in order]
    free = L - sum(s[0] for s in segments)
    gaps = rng.multinomial(free, np.full(len(segments) + 1, 1.0 / (len(segments) + 1)))

    clips = rng.standard_normal((L, D))
    saliency = np.zeros(L)
    relevance = np.zeros(L, dtype=np.int8)
    gt_spans = []
    cursor = 0
    for (n, concept, relevant), gap in zip(segments, gaps[:-1]):
        cursor += int(gap)
        noise = rng.standard_normal((n, D)) * (sigma * noise_profile(n))[:, None]
        clips[cursor:cursor + n] = vproto[concept] + noise
        if relevant:
            dist2 = np.sum(noise**2, axis=1)
            saliency[cursor:cursor + n] = np.exp(-dist2 / (2 * spec.saliency_bandwidth**2))
            relevance[cursor:cursor + n] = 1
            gt_spans.append(Span.from_bounds(cursor / L, (cursor + n) / L))
        cursor += n
    saliency /= saliency.max()

    token_concepts = list(query)
    for _ in range(N - n_query):
        token_concepts.append(int(rng.choice(query)) if rng.random() < 0.5 else -1)
    token_concepts = [token_concepts[i] for i in rng.permutation(N)]
    tokens = np.stack([filler if c < 0 else tproto[c] for c in token_concepts])
    tokens = tokens + sigma * rng.standard_normal((N, D))

    gt_spans.sort(key=lambda s: s.start)
    return VideoTextPair(
        video_id=f"vid{index:05d}",
        clip_features=clips,
        token_features=tokens,
        gt_spans=gt_spans,
        gt_saliency=saliency,
        relevance_mask=relevance,
        query_concepts=tuple(int(c) for c in query),
    )


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Build a corpus deterministically from ``spec`` (including its seed)."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    proto_seq, *video_seqs = root.spawn(spec.num_videos + 1)
    prng = np.random.default_rng(proto_seq)
    D, K = spec.feature_dim, spec.num_concepts
    vproto = prng.standard_normal((K, D))
    tproto = prng.standard_normal((K, D))
    filler = prng.standard_normal(D)
    pairs = [
        _generate_pair(spec, i, np.random.default_rng(s), vproto, tproto, filler)
        for i, s in enumerate(video_seqs)
    ]
    return Corpus(spec, vproto, tproto, filler, pairs)


# --- serialization -----------------------------------------------------------

def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(obj, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"field {name!r}: {exc}") from None
    if data.ndim != 1 or data.size != math.prod(shape):
        raise ValueError(f"field {name!r}: {data.size} values do not fill shape {shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"field {name!r}: non-finite values")
    return data.reshape(shape)


def _pair_to_json(p: VideoTextPair) -> dict:
    return {
        "video_id": p.video_id,
        "query_concepts": list(p.query_concepts),
        "clip_features": _pack(p.clip_features),
        "token_features": _pack(p.token_features),
        "gt_spans": [[s.center, s.width] for s in p.gt_spans],
        "gt_saliency": np.asarray(p.gt_saliency, dtype=np.float64).tolist(),
        "relevance_mask": np.asarray(p.relevance_mask).astype(int).tolist(),
    }


def _parse_span(raw) -> Span:
    if not isinstance(raw, (list, tuple)) or len(raw) != 2:
        raise ValueError(f"field 'gt_spans': expected [center, width], got {raw!r}")
    c, w = raw
    if isinstance(c, bool) or isinstance(w, bool) or not all(
        isinstance(v, (int, float)) and math.isfinite(v) for v in (c, w)
    ):
        raise ValueError(f"field 'gt_spans': non-numeric span {raw!r}")
    return Span(float(c), float(w))


def _pair_from_json(obj) -> VideoTextPair:
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    try:
        video_id = obj["video_id"]
        spans_raw = obj["gt_spans"]
        sal = obj["gt_saliency"]
        rel = obj["relevance_mask"]
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from None
    if not isinstance(video_id, str):
        raise ValueError("field 'video_id' must be a string")
    if not isinstance(spans_raw, list):
        raise ValueError("field 'gt_spans' must be a list")
    spans = [_parse_span(s) for s in spans_raw]
    clips = _unpack(obj.get("clip_features"), "clip_features")
    tokens = _unpack(obj.get("token_features"), "token_features")
    saliency = np.asarray(sal, dtype=np.float64)
    relevance = np.asarray(rel, dtype=np.int8)
    if saliency.shape != (clips.shape[0],) or relevance.shape != (clips.shape[0],):
        raise ValueError("saliency / relevance length does not match clip count")
    return VideoTextPair(video_id, clips, tokens, spans, saliency, relevance,
                         tuple(int(c) for c in obj.get("query_concepts", [])))


def write_corpus(corpus: Corpus, path) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_records": len(corpus.pairs),
        "spec": asdict(corpus.spec),
        "video_prototypes": _pack(corpus.video_prototypes),
        "text_prototypes": _pack(corpus.text_prototypes),
        "filler_prototype": _pack(corpus.filler_prototype),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for p in corpus.pairs:
            fh.write(json.dumps(_pair_to_json(p)) + "\n")


def read_corpus(path) -> Corpus:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CorpusFormatError("empty file, no header")
    try:
        header = json.loads(lines[0])
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"unknown format {header.get('format')!r}")
        spec = CorpusSpec.from_dict(header["spec"])
        vproto = _unpack(header["video_prototypes"], "video_prototypes")
        tproto = _unpack(header["text_prototypes"], "text_prototypes")
        filler = _unpack(header["filler_prototype"], "filler_prototype")
        expected = int(header["num_records"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorpusFormatError(str(exc)) from None

    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != expected:
        raise CorpusFormatError(f"header announces {expected} records, found {len(records)}")
    pairs = []
    for i, line in enumerate(records):
        try:
            pairs.append(_pair_from_json(json.loads(line)))
        except (ValueError, TypeError) as exc:
            raise CorpusFormatError(str(exc), record_index=i) from None
    return Corpus(spec, vproto, tproto, filler, pairs)
