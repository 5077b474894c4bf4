"""Synthetic multi-domain corpus generation, clustering, and splits.

Each domain owns a latent style center, a unigram token distribution, and
a linear map from latent vectors to trait labels. ``shift_strength``
interpolates the per-domain label maps between one shared map (0) and
fully independent maps (1), which is the knob the adaptation benchmark
turns. Feature streams are AR(1)-smoothed random walks around a projection
of the video latent, so the recurrent layers see genuine temporal signal.

Everything is a pure function of (spec, seed).
"""

from dataclasses import dataclass

import numpy as np

from .adapt import DomainDataset
from .align import PersonalityVector, TimedStream, TimedWord, align
from .errors import ValidationError
from .rng import substream

LATENT_DIM = 8
STREAM_DT = 0.25
AR_COEFF = 0.8
LABEL_SCALE = 0.35
DOMAIN_MIX = 0.6
# labels keep only a quarter of the domain-mean latent offset: domains shift
# mostly through their trait maps, mildly through their label means
MEAN_DAMP = 0.75


@dataclass
class GeneratorSpec:
    num_domains: int = 6
    videos_per_domain: int = 120
    noise_std: float = 0.05
    shift_strength: float = 0.5
    vocab_size: int = 200
    seed: int = 0
    d_face: int = 16
    d_bg: int = 16
    d_audio: int = 24
    n: int = 70
    min_words: int = 35
    max_words: int = 85
    trait_maps: list | None = None  # optional explicit per-domain (W (5,L), b (5,))

    def __post_init__(self):
        if self.num_domains < 1 or self.videos_per_domain < 1:
            raise ValidationError("need at least one domain and one video per domain")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must leave room for the UNK token")
        if not 0.0 <= self.shift_strength <= 1.0:
            raise ValidationError("shift_strength must lie in [0, 1]")


def domain_trait_maps(spec: GeneratorSpec):
    """Per-domain (W, b) label maps, interpolated by shift_strength."""
    if spec.trait_maps is not None:
        if len(spec.trait_maps) != spec.num_domains:
            raise ValidationError("trait_maps must list one (W, b) pair per domain")
        return [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                for w, b in spec.trait_maps]
    rng = substream(spec.seed, "maps")
    w_base = rng.standard_normal((5, LATENT_DIM))
    b_base = 0.1 * rng.standard_normal(5)
    maps = []
    for d in range(spec.num_domains):
        # Per-domain strength: domains spread log-uniformly around the
        # requested shift (real topic clusters are unevenly related), with
        # the endpoints preserved: 0 keeps every map identical, 1 makes
        # them all independent.
        gamma = np.exp(1.2 * (rng.uniform() - 0.5))
        s = spec.shift_strength**gamma if spec.shift_strength > 0 else 0.0
        # variance-preserving mix: pairwise map correlation decays as 1 - s^2
        shared = np.sqrt(1.0 - s * s)
        w_own = rng.standard_normal((5, LATENT_DIM))
        b_own = 0.1 * rng.standard_normal(5)
        w = shared * w_base + s * w_own
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        w = np.where(norms > 1e-12, w / norms, w) * LABEL_SCALE
        maps.append((w, shared * b_base + s * b_own))
    return maps


def sample_labels(spec: GeneratorSpec, count: int, domain: int = 0) -> np.ndarray:
    """Draw ``count`` labels from one domain's generating process (for audits)."""
    w, b = domain_trait_maps(spec)[domain]
    center = substream(spec.seed, "domain", domain).standard_normal(LATENT_DIM)
    rng = substream(spec.seed, "label-audit", domain)
    out = np.empty((count, 5))
    for i in range(count):
        z = DOMAIN_MIX * center + 0.8 * rng.standard_normal(LATENT_DIM)
        zl = z - MEAN_DAMP * DOMAIN_MIX * center
        raw = 0.5 + w @ zl + b + spec.noise_std * rng.standard_normal(5)
        out[i] = np.clip(raw, 0.0, 1.0)
    return out


def _make_streams(spec: GeneratorSpec, zv: np.ndarray, span: float, rng):
    projections = {}
    for mod, d in (("face", spec.d_face), ("bg", spec.d_bg), ("audio", spec.d_audio)):
        p = substream(spec.seed, "proj", mod).standard_normal((d, LATENT_DIM))
        projections[mod] = p @ zv / np.sqrt(LATENT_DIM)
    steps = int(np.ceil(span / STREAM_DT)) + 1
    start = np.arange(steps) * STREAM_DT
    end = start + STREAM_DT
    streams = {}
    for mod, mu in projections.items():
        vals = np.empty((steps, len(mu)))
        vals[0] = mu + spec.noise_std * rng.standard_normal(len(mu))
        for t in range(1, steps):
            vals[t] = (
                AR_COEFF * vals[t - 1]
                + (1.0 - AR_COEFF) * mu
                + spec.noise_std * rng.standard_normal(len(mu))
            )
        streams[mod] = TimedStream(start=start, end=end, values=vals)
    return streams


def generate(spec: GeneratorSpec):
    """Build the corpus; returns a list of DomainDataset."""
    maps = domain_trait_maps(spec)
    unigrams = {}
    for d in range(spec.num_domains):
        logits = 2.0 * substream(spec.seed, "unigram", d).standard_normal(spec.vocab_size - 1)
        p = np.exp(logits - logits.max())
        unigrams[d] = p / p.sum()

    domains = []
    for d in range(spec.num_domains):
        center = substream(spec.seed, "domain", d).standard_normal(LATENT_DIM)
        w, b = maps[d]
        examples = []
        for v in range(spec.videos_per_domain):
            rng = substream(spec.seed, "video", d, v)
            zv = DOMAIN_MIX * center + 0.8 * rng.standard_normal(LATENT_DIM)

            n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
            durations = rng.uniform(0.2, 0.45, size=n_words)
            gaps = rng.uniform(0.0, 0.05, size=n_words)
            tokens = rng.choice(spec.vocab_size - 1, size=n_words, p=unigrams[d]) + 1
            words = []
            t0 = 0.0
            for i in range(n_words):
                t0 += gaps[i]
                words.append(TimedWord(token_id=int(tokens[i]), start=t0, end=t0 + durations[i]))
                t0 += durations[i]

            streams = _make_streams(spec, zv, span=t0 + STREAM_DT, rng=rng)
            z_label = zv - MEAN_DAMP * DOMAIN_MIX * center
            raw = 0.5 + w @ z_label + b + spec.noise_std * rng.standard_normal(5)
            label = PersonalityVector(np.clip(raw, 0.0, 1.0))
            examples.append(
                align(words, streams["face"], streams["bg"], streams["audio"], n=spec.n,
                      label=label)
            )
        domains.append(DomainDataset(domain_id=d, examples=examples))
    return domains


def discrimination_corpus(seed: int, videos_per_domain: int = 60, **overrides):
    """Three-domain corpus for similarity audits.

    Domain 0 is the target, domain 1 shares its label map, domain 2 carries
    the inverted map (labels mirror to 1 - y).
    """
    base = GeneratorSpec(num_domains=3, videos_per_domain=videos_per_domain, seed=seed,
                         shift_strength=0.0, **overrides)
    (w, b), _, _ = domain_trait_maps(base)
    spec = GeneratorSpec(
        num_domains=3, videos_per_domain=videos_per_domain, seed=seed, shift_strength=0.0,
        trait_maps=[(w, b), (w, b), (-w, -b)], **overrides
    )
    return generate(spec)


def flatten_corpus(domains):
    """(domain_id, sequence) pairs in domain order, ready for dataset IO."""
    return [(dom.domain_id, seq) for dom in domains for seq in dom.examples]


def domains_from_items(items):
    """Group (domain_id, sequence) pairs into DomainDataset objects."""
    grouped = {}
    for domain_id, seq in items:
        grouped.setdefault(domain_id, []).append(seq)
    return [DomainDataset(domain_id=d, examples=grouped[d]) for d in sorted(grouped)]


# ---------------------------------------------------------------------------
# K-means domain construction


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list


def _mean_token_embeddings(corpus, seed: int, dim: int = 16) -> np.ndarray:
    vocab = max(int(seq.tokens.max(initial=0)) for seq in corpus) + 1
    table = substream(seed, "kmeans-embed").standard_normal((vocab, dim))
    feats = np.zeros((len(corpus), dim))
    for i, seq in enumerate(corpus):
        if seq.valid_len > 0:
            feats[i] = table[seq.tokens[: seq.valid_len]].mean(axis=0)
    return feats


def _pairwise_sq(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans_domains(corpus, k: int, seed: int, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ init over mean token embeddings.

    Ties in nearest-centroid break toward the lowest centroid index;
    converges when assignments stabilize.
    """
    if k <= 0:
        raise ValidationError(f"k must be positive, got {k}")
    if k > len(corpus):
        raise ValidationError(f"k = {k} exceeds corpus size {len(corpus)}")
    x = _mean_token_embeddings(corpus, seed)
    rng = substream(seed, "kmeans-init")

    centroids = [x[int(rng.integers(len(x)))]]
    for _ in range(k - 1):
        d2 = _pairwise_sq(x, np.asarray(centroids)).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            centroids.append(x[int(rng.integers(len(x)))])
        else:
            centroids.append(x[int(rng.choice(len(x), p=d2 / total))])
    centroids = np.asarray(centroids)

    labels = np.full(len(x), -1, dtype=np.int64)
    inertia_history = []
    for _ in range(max_iter):
        d2 = _pairwise_sq(x, centroids)
        new_labels = d2.argmin(axis=1)  # argmin takes the lowest index on ties
        inertia_history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = x[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return KMeansResult(labels=labels, centroids=centroids, inertia_history=inertia_history)


def adjusted_rand_index(a, b) -> float:
    """Agreement between two labelings, chance-corrected (1.0 = identical)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError("labelings must have equal length")
    n = len(a)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    expected = sum_rows * sum_cols / comb2(n)
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    target_domain_id: int
    shot_ids: list
    validation_ids: list
    test_ids: list

    def to_dict(self):
        return {
            "target": self.target_domain_id,
            "shots": list(self.shot_ids),
            "val": list(self.validation_ids),
            "test": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            target_domain_id=d["target"],
            shot_ids=list(d["shots"]),
            validation_ids=list(d["val"]),
            test_ids=list(d["test"]),
        )


def make_split(domain: DomainDataset, shots: int = 10, ratio=(2, 8), seed: int = 0) -> SplitPlan:
    """Shot pool first, remainder partitioned validation:test by ``ratio``."""
    m = len(domain.examples)
    if m <= shots + 5:
        raise ValidationError(
            f"domain {domain.domain_id} has {m} examples; needs more than {shots + 5}"
        )
    perm = substream(seed, "split", domain.domain_id).permutation(m)
    shot_ids = sorted(int(i) for i in perm[:shots])
    rest = perm[shots:]
    n_val = int(round(len(rest) * ratio[0] / (ratio[0] + ratio[1])))
    return SplitPlan(
        target_domain_id=domain.domain_id,
        shot_ids=shot_ids,
        validation_ids=sorted(int(i) for i in rest[:n_val]),
        test_ids=sorted(int(i) for i in rest[n_val:]),
    )
