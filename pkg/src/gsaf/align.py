"""Word-anchored alignment of per-timestamp modality streams.

Each spoken word becomes one record pairing its token id with the face,
background, and audio feature vectors whose time interval contains the
word's midpoint (nearest interval within 2 s as a fallback). Sequences are
standardized to a fixed length: longer transcripts keep their first n
words, shorter ones are padded with UNK records (token id 0, zero feature
vectors, pad flag set).

The on-disk dataset format is UTF-8 JSON Lines: a header line
{"n":..,"d_face":..,"d_bg":..,"d_audio":..,"vocab_size":..} followed by one
line per sequence {"domain":int,"label":[5 floats]|null,"records":[...]}.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ValidationError

UNK_TOKEN = 0
DEFAULT_SEQ_LEN = 70
STREAM_GAP_LIMIT = 2.0  # seconds


@dataclass(frozen=True)
class TimedWord:
    token_id: int
    start: float
    end: float

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ValidationError(f"bad word interval [{self.start}, {self.end}]")


@dataclass
class TimedStream:
    """One modality's feature vectors over consecutive time intervals."""

    start: np.ndarray  # (T,)
    end: np.ndarray  # (T,)
    values: np.ndarray  # (T, d)

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (len(self.start) == len(self.end) == len(self.values)):
            raise ValidationError("stream arrays must have equal length")

    def lookup(self, when: float):
        """Vector of the interval containing ``when``, or the nearest one.

        Returns (vector, distance); distance is 0 when contained.
        """
        if len(self.start) == 0:
            return None, np.inf
        idx = int(np.searchsorted(self.start, when, side="right")) - 1
        if idx >= 0 and when < self.end[idx]:
            return self.values[idx], 0.0
        # nearest interval by boundary distance
        best, best_dist = None, np.inf
        for j in (idx, idx + 1):
            if 0 <= j < len(self.start):
                dist = max(self.start[j] - when, when - self.end[j], 0.0)
                if dist < best_dist:
                    best, best_dist = self.values[j], dist
        return best, best_dist


@dataclass(frozen=True)
class PersonalityVector:
    """Five trait scores, each in [0, 1]."""

    scores: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.shape != (5,):
            raise ValidationError(f"personality vector needs 5 scores, got shape {arr.shape}")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValidationError(f"trait scores outside [0, 1]: {arr.tolist()}")
        object.__setattr__(self, "scores", arr)

    def __eq__(self, other):
        return isinstance(other, PersonalityVector) and np.array_equal(self.scores, other.scores)


@dataclass(frozen=True)
class FeatureRecord:
    token_id: int
    face: np.ndarray
    background: np.ndarray
    audio: np.ndarray
    is_pad: bool = False


@dataclass
class AlignedSequence:
    """Fixed-length multi-modal sequence; pads form a contiguous suffix.

    Stored densely (feature-major arrays) for cheap batching; ``records``
    materializes per-timestep views on demand.
    """

    tokens: np.ndarray  # (n,) int64
    face: np.ndarray  # (d_face, n)
    background: np.ndarray  # (d_bg, n)
    audio: np.ndarray  # (d_audio, n)
    valid_len: int
    label: PersonalityVector | None = field(default=None)

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def records(self):
        return [
            FeatureRecord(
                token_id=int(self.tokens[t]),
                face=self.face[:, t],
                background=self.background[:, t],
                audio=self.audio[:, t],
                is_pad=t >= self.valid_len,
            )
            for t in range(self.n)
        ]

    def check(self):
        n = self.n
        if not (self.face.shape[1] == self.background.shape[1] == self.audio.shape[1] == n):
            raise ValidationError("modality arrays disagree on sequence length")
        if not 0 <= self.valid_len <= n:
            raise ValidationError(f"valid_len {self.valid_len} outside [0, {n}]")
        pad = slice(self.valid_len, n)
        if np.any(self.tokens[pad] != UNK_TOKEN):
            raise ValidationError("padded records must carry the UNK token")
        for arr in (self.face, self.background, self.audio):
            if np.any(arr[:, pad] != 0.0):
                raise ValidationError("padded records must carry zero feature vectors")
        return self

    def __eq__(self, other):
        if not isinstance(other, AlignedSequence):
            return NotImplemented
        return (
            self.valid_len == other.valid_len
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.face, other.face)
            and np.array_equal(self.background, other.background)
            and np.array_equal(self.audio, other.audio)
            and self.label == other.label
        )


def align(
    transcript,
    face_stream: TimedStream,
    background_stream: TimedStream,
    audio_stream: TimedStream,
    n: int = DEFAULT_SEQ_LEN,
    label: PersonalityVector | None = None,
) -> AlignedSequence:
    """Pair each spoken word with the stream vectors at its midpoint.

    Transcripts longer than n are truncated to their first n words;
    shorter ones are padded. An empty transcript yields an all-pad
    sequence with valid_len 0.
    """
    if n < 1:
        raise ValidationError(f"sequence length must be >= 1, got {n}")
    streams = (face_stream, background_stream, audio_stream)
    dims = tuple(s.values.shape[1] if s.values.ndim == 2 else 0 for s in streams)

    words = list(transcript)[:n]
    valid_len = len(words)
    tokens = np.full(n, UNK_TOKEN, dtype=np.int64)
    chans = [np.zeros((d, n)) for d in dims]

    for i, w in enumerate(words):
        tokens[i] = w.token_id
        mid = 0.5 * (w.start + w.end)
        for chan, stream in zip(chans, streams):
            vec, dist = stream.lookup(mid)
            if vec is None or dist > STREAM_GAP_LIMIT:
                raise AlignmentError(
                    f"no stream interval within {STREAM_GAP_LIMIT}s of word {i} (t={mid:.3f}s)"
                )
            chan[:, i] = vec

    return AlignedSequence(
        tokens=tokens,
        face=chans[0],
        background=chans[1],
        audio=chans[2],
        valid_len=valid_len,
        label=label,
    ).check()


# ---------------------------------------------------------------------------
# dataset file IO


def dataset_header(items, vocab_size=None) -> dict:
    """Header dict for a list of (domain_id, AlignedSequence) pairs."""
    if not items:
        raise ValidationError("cannot infer a header from an empty dataset")
    seq = items[0][1]
    if vocab_size is None:
        vocab_size = max(int(s.tokens.max(initial=0)) for _, s in items) + 1
    return {
        "n": seq.n,
        "d_face": seq.face.shape[0],
        "d_bg": seq.background.shape[0],
        "d_audio": seq.audio.shape[0],
        "vocab_size": int(vocab_size),
    }


def write_dataset(items, path, vocab_size=None, header=None):
    """Write (domain_id, AlignedSequence) pairs as JSON Lines.

    Byte-deterministic for identical input; floats round-trip exactly.
    """
    if header is None:
        header = dataset_header(items, vocab_size)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for domain_id, seq in items:
            rec = {
                "domain": int(domain_id),
                "label": None if seq.label is None else seq.label.scores.tolist(),
                "records": [
                    {
                        "tok": int(seq.tokens[t]),
                        "face": seq.face[:, t].tolist(),
                        "bg": seq.background[:, t].tolist(),
                        "audio": seq.audio[:, t].tolist(),
                        "pad": bool(t >= seq.valid_len),
                    }
                    for t in range(seq.n)
                ],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_dataset(path):
    """Load a JSON Lines dataset; returns (header, [(domain_id, sequence), ...])."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty dataset file (missing header)")
    header = json.loads(lines[0])
    for key in ("n", "d_face", "d_bg", "d_audio", "vocab_size"):
        if key not in header:
            raise ValidationError(f"{path}: header missing field {key!r}")
    n = header["n"]
    dims = {"face": header["d_face"], "bg": header["d_bg"], "audio": header["d_audio"]}

    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = json.loads(line)
        rows = rec["records"]
        if len(rows) != n:
            raise ValidationError(f"{path}:{lineno}: expected {n} records, found {len(rows)}")
        tokens = np.zeros(n, dtype=np.int64)
        face = np.zeros((dims["face"], n))
        bg = np.zeros((dims["bg"], n))
        audio = np.zeros((dims["audio"], n))
        valid_len = 0
        for t, row in enumerate(rows):
            for key, target in (("face", face), ("bg", bg), ("audio", audio)):
                vals = row[key]
                if len(vals) != target.shape[0]:
                    raise ValidationError(
                        f"{path}:{lineno}: record {t} has {key} dim {len(vals)}, "
                        f"header says {target.shape[0]}"
                    )
                target[:, t] = vals
            tokens[t] = row["tok"]
            if not row["pad"]:
                valid_len = t + 1
        label = None
        if rec["label"] is not None:
            try:
                label = PersonalityVector(np.asarray(rec["label"]))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        seq = AlignedSequence(
            tokens=tokens, face=face, background=bg, audio=audio, valid_len=valid_len, label=label
        )
        try:
            seq.check()
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        items.append((int(rec["domain"]), seq))
    return header, items


def load_dataset(path):
    """Sequences only; see read_dataset for the header-aware variant."""
    return read_dataset(path)[1]
