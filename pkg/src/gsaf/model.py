"""The end-to-end trait predictor.

Pipeline per modality channel (face, background, audio, text): a Bi-LSTM
reshapes the raw feature sequence to a common width 2h, temporal
self-attention pools it into one vector, and per-timestep bilinear forms
against the other three channels produce cross-modal interaction features.
A per-modality softmax mixing step and a small MLP head map everything to
five trait scores in [0, 1].

Padded timesteps are structurally inert: the LSTM never consumes them,
attention assigns them exactly zero weight, and the bilinear sums mask
them, so any change confined to pad positions leaves the prediction
bit-identical.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .align import AlignedSequence, PersonalityVector
from .errors import ValidationError
from .params import ParameterSet, glorot_uniform
from .rng import substream
from . import tensor as T
from .tensor import Tensor

MODALITIES = ("face", "background", "audio", "text")

CHECKPOINT_MAGIC = b"GSAF"
CHECKPOINT_VERSION = 1

_NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_face: int = 16
    d_bg: int = 16
    d_audio: int = 24
    vocab_size: int = 200
    d_text: int = 16
    h: int = 16  # LSTM hidden size per direction
    d_k: int = 16  # attention key dim
    d_z: int = 16  # bilinear interaction output dim
    mlp_hidden: int = 32
    n: int = 70

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValidationError(f"ModelConfig.{name} must be >= 1, got {value}")

    @property
    def input_dims(self):
        return {
            "face": self.d_face,
            "background": self.d_bg,
            "audio": self.d_audio,
            "text": self.d_text,
        }

    @classmethod
    def from_header(cls, header: dict, **overrides) -> "ModelConfig":
        fields = {
            "d_face": header["d_face"],
            "d_bg": header["d_bg"],
            "d_audio": header["d_audio"],
            "vocab_size": header["vocab_size"],
            "n": header["n"],
        }
        fields.update(overrides)
        return cls(**fields)


@dataclass
class BiLstmLayer:
    wx_f: Tensor
    wh_f: Tensor
    b_f: Tensor
    wx_b: Tensor
    wh_b: Tensor
    b_b: Tensor


@dataclass
class SelfAttentionLayer:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wt: Tensor  # per-timestep scaling of the pooled features


@dataclass
class BilinearFusionLayer:
    interactions: dict  # (a, j) -> Tensor (d_z, 2h, 2h), ordered pairs a != j
    mlp: dict  # modality -> (w1, b1, w2, b2)


@dataclass
class AggregationHead:
    mixing: dict  # modality -> Tensor (2h + d_z, d_z)
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelLayers:
    embed_table: Tensor
    lstm: dict
    attn: dict
    fusion: BilinearFusionLayer
    head: AggregationHead

    @classmethod
    def from_params(cls, params: ParameterSet) -> "ModelLayers":
        lstm = {
            mod: BiLstmLayer(
                wx_f=params[f"lstm.{mod}.fwd.wx"],
                wh_f=params[f"lstm.{mod}.fwd.wh"],
                b_f=params[f"lstm.{mod}.fwd.b"],
                wx_b=params[f"lstm.{mod}.bwd.wx"],
                wh_b=params[f"lstm.{mod}.bwd.wh"],
                b_b=params[f"lstm.{mod}.bwd.b"],
            )
            for mod in MODALITIES
        }
        attn = {
            mod: SelfAttentionLayer(
                wq=params[f"attn.{mod}.wq"],
                wk=params[f"attn.{mod}.wk"],
                wv=params[f"attn.{mod}.wv"],
                wt=params[f"attn.{mod}.wt"],
            )
            for mod in MODALITIES
        }
        fusion = BilinearFusionLayer(
            interactions={
                (a, j): params[f"fuse.{a}.{j}.w"] for a in MODALITIES for j in MODALITIES if j != a
            },
            mlp={
                mod: (
                    params[f"fuse.{mod}.mlp.w1"],
                    params[f"fuse.{mod}.mlp.b1"],
                    params[f"fuse.{mod}.mlp.w2"],
                    params[f"fuse.{mod}.mlp.b2"],
                )
                for mod in MODALITIES
            },
        )
        head = AggregationHead(
            mixing={mod: params[f"head.mix.{mod}"] for mod in MODALITIES},
            w1=params["head.mlp.w1"],
            b1=params["head.mlp.b1"],
            w2=params["head.mlp.w2"],
            b2=params["head.mlp.b2"],
        )
        return cls(
            embed_table=params["embed.table"], lstm=lstm, attn=attn, fusion=fusion, head=head
        )


def build_parameters(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Fresh parameters in the model's stable enumeration order."""
    rng = substream(seed, "init")
    two_h = 2 * cfg.h
    named = {}

    def mat(name, shape, fan_in, fan_out):
        named[name] = Tensor(glorot_uniform(rng, shape, fan_in, fan_out), requires_grad=True)

    def vec(name, arr):
        named[name] = Tensor(arr, requires_grad=True)

    mat("embed.table", (cfg.vocab_size, cfg.d_text), cfg.vocab_size, cfg.d_text)
    for mod, d in cfg.input_dims.items():
        for direction in ("fwd", "bwd"):
            mat(f"lstm.{mod}.{direction}.wx", (4 * cfg.h, d), d, cfg.h)
            mat(f"lstm.{mod}.{direction}.wh", (4 * cfg.h, cfg.h), cfg.h, cfg.h)
            bias = np.zeros(4 * cfg.h)
            bias[cfg.h : 2 * cfg.h] = 1.0  # forget-gate bias
            vec(f"lstm.{mod}.{direction}.b", bias)
    for mod in MODALITIES:
        mat(f"attn.{mod}.wq", (cfg.d_k, two_h), two_h, cfg.d_k)
        mat(f"attn.{mod}.wk", (cfg.d_k, two_h), two_h, cfg.d_k)
        mat(f"attn.{mod}.wv", (cfg.d_k, two_h), two_h, cfg.d_k)
        vec(f"attn.{mod}.wt", np.ones(cfg.n))
    for a in MODALITIES:
        for j in MODALITIES:
            if j != a:
                mat(f"fuse.{a}.{j}.w", (cfg.d_z, two_h, two_h), two_h, two_h)
    for mod in MODALITIES:
        mat(f"fuse.{mod}.mlp.w1", (3 * cfg.d_z, cfg.d_z), 3 * cfg.d_z, cfg.d_z)
        vec(f"fuse.{mod}.mlp.b1", np.zeros(cfg.d_z))
        mat(f"fuse.{mod}.mlp.w2", (cfg.d_z, cfg.d_z), cfg.d_z, cfg.d_z)
        vec(f"fuse.{mod}.mlp.b2", np.zeros(cfg.d_z))
    for mod in MODALITIES:
        mat(f"head.mix.{mod}", (two_h + cfg.d_z, cfg.d_z), two_h + cfg.d_z, cfg.d_z)
    mat("head.mlp.w1", (4 * cfg.d_z, cfg.mlp_hidden), 4 * cfg.d_z, cfg.mlp_hidden)
    vec("head.mlp.b1", np.zeros(cfg.mlp_hidden))
    mat("head.mlp.w2", (cfg.mlp_hidden, 5), cfg.mlp_hidden, 5)
    vec("head.mlp.b2", np.zeros(5))
    return ParameterSet(named)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray  # (B, n) int64
    face: np.ndarray  # (B, d_face, n)
    background: np.ndarray
    audio: np.ndarray
    lens: np.ndarray  # (B,)
    labels: np.ndarray | None  # (B, 5)

    @property
    def size(self):
        return len(self.lens)


def batchify(seqs, cfg: ModelConfig) -> Batch:
    if not seqs:
        raise ValidationError("cannot batch zero sequences")
    for i, s in enumerate(seqs):
        if s.n != cfg.n:
            raise ValidationError(f"sequence {i} has length {s.n}, model expects {cfg.n}")
        dims = (s.face.shape[0], s.background.shape[0], s.audio.shape[0])
        want = (cfg.d_face, cfg.d_bg, cfg.d_audio)
        if dims != want:
            raise ValidationError(f"sequence {i} has feature dims {dims}, model expects {want}")
        if int(s.tokens.max(initial=0)) >= cfg.vocab_size:
            raise ValidationError(f"sequence {i} has a token id >= vocab_size {cfg.vocab_size}")
    labels = None
    if all(s.label is not None for s in seqs):
        labels = np.stack([s.label.scores for s in seqs])
    return Batch(
        tokens=np.stack([s.tokens for s in seqs]),
        face=np.stack([s.face for s in seqs]),
        background=np.stack([s.background for s in seqs]),
        audio=np.stack([s.audio for s in seqs]),
        lens=np.array([s.valid_len for s in seqs], dtype=np.intp),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# forward components


def embed_modalities(layers: ModelLayers, cfg: ModelConfig, batch: Batch, active=None) -> dict:
    """Per-modality input tensors (B, d_i, n); inactive channels are zeroed.

    Text is a learned token-embedding lookup (pads embed the UNK row);
    the other channels pass through unchanged.
    """
    active = set(MODALITIES if active is None else active)
    B, n = batch.tokens.shape
    out = {}
    for mod, raw in (
        ("face", batch.face),
        ("background", batch.background),
        ("audio", batch.audio),
    ):
        if mod in active:
            out[mod] = T.constant(raw)
        else:
            out[mod] = T.constant(np.zeros_like(raw))
    if "text" in active:
        out["text"] = T.embedding(layers.embed_table, batch.tokens)
    else:
        out["text"] = T.constant(np.zeros((B, cfg.d_text, n)))
    for mod in MODALITIES:
        assert out[mod].shape == (B, cfg.input_dims[mod], n)
    return out


def bilstm_forward(x: Tensor, layer: BiLstmLayer, lens: np.ndarray) -> Tensor:
    """Concat of forward and backward LSTM states at every timestep: (B, 2h, n)."""
    fwd = T.lstm_seq(x, layer.wx_f, layer.wh_f, layer.b_f, lens, reverse=False)
    bwd = T.lstm_seq(x, layer.wx_b, layer.wh_b, layer.b_b, lens, reverse=True)
    return T.concat([fwd, bwd], axis=1)


def _attention_masks(lens: np.ndarray, n: int):
    valid = np.arange(n)[None, :] < lens[:, None]  # (B, n)
    key_mask = np.where(valid, 0.0, _NEG_INF)[:, None, :]  # (B, 1, n) broadcast over queries
    return np.broadcast_to(key_mask, (len(lens), n, n)), np.where(valid, 0.0, _NEG_INF)


def self_attention(f: Tensor, layer: SelfAttentionLayer, lens: np.ndarray, collect=None,
                   masks=None):
    """Pool (B, 2h, n) into one vector per example.

    Scaled dot-product attention over the normalized features yields a
    per-query distribution; its value-weighted outputs are reduced to one
    scalar relevance per timestep, renormalized over valid steps, and used
    to average the per-timestep features (after the learned per-timestep
    scaling). Pad timesteps receive exactly zero weight.
    """
    lens = np.asarray(lens, dtype=np.intp)
    if len(lens) and int(lens.min()) < 1:
        raise ValidationError("self_attention requires valid_len >= 1 for every sequence")
    B, two_h, n = f.shape
    d_k = layer.wq.shape[0]
    key_mask, time_mask = _attention_masks(lens, n) if masks is None else masks

    g = T.layernorm(f, axis=1)
    q = T.matmul(layer.wq, g)  # (B, d_k, n)
    k = T.matmul(layer.wk, g)
    v = T.matmul(layer.wv, g)
    scores = T.mul(T.matmul(T.transpose(q), k), 1.0 / np.sqrt(d_k))  # (B, n, n)
    attn = T.softmax(T.add(scores, T.constant(key_mask)), axis=2)
    pooled = T.matmul(attn, T.transpose(v))  # (B, n, d_k)
    relevance = T.tmean(pooled, axis=2)  # (B, n)
    weights = T.softmax(T.add(relevance, T.constant(time_mask)), axis=1)
    scaled = T.scale_time(f, layer.wt)
    u = T.reshape(T.matmul(scaled, T.reshape(weights, (B, n, 1))), (B, two_h))
    if collect is not None:
        collect["attn_matrix"] = attn.data
        collect["attn_weights"] = weights.data
    return u


def bilinear_fuse(feats: dict, layer: BilinearFusionLayer, lens: np.ndarray, active=None, collect=None):
    """Cross-modal interaction vectors Z^a (B, d_z) for every modality a.

    Z_{aj}[r] sums ReLU bilinear forms over valid timesteps; pairs with an
    inactive modality contribute exact zeros. Each modality's MLP maps the
    concatenated pair features to its fused vector.
    """
    active = set(MODALITIES if active is None else active)
    mods = list(feats.keys())
    B, _, n = feats[mods[0]].shape
    d_z = layer.mlp[mods[0]][0].shape[1]
    valid_bool = np.arange(n)[None, :] < lens[:, None]
    valid_mask = T.constant(np.broadcast_to(valid_bool[:, None, :].astype(np.float64), (B, d_z, n)))

    fused = {}
    for a in mods:
        parts = []
        for j in mods:
            if j == a:
                continue
            if a in active and j in active:
                pre = T.bilinear_time(feats[a], layer.interactions[(a, j)], feats[j])
                if collect is not None:
                    collect.setdefault("relu_preacts", []).append(
                        pre.data.transpose(0, 2, 1)[valid_bool].ravel()
                    )
                z_aj = T.tsum(T.mul(T.relu(pre), valid_mask), axis=2)
            else:
                z_aj = T.constant(np.zeros((B, d_z)))
            parts.append(z_aj)
        cat = T.concat(parts, axis=1)  # (B, 3 d_z)
        w1, b1, w2, b2 = layer.mlp[a]
        hidden_pre = T.add_bias(T.matmul(cat, w1), b1)
        if collect is not None:
            collect.setdefault("relu_preacts", []).append(hidden_pre.data)
        z = T.add_bias(T.matmul(T.relu(hidden_pre), w2), b2)
        assert z.shape == (B, d_z)
        fused[a] = z
    return fused


def forward_batch(params: ParameterSet, cfg: ModelConfig, batch: Batch, active=None, collect=None,
                  layers: ModelLayers | None = None):
    """Full forward pass: (B, 5) trait scores, each in [0, 1]."""
    if layers is None:
        layers = ModelLayers.from_params(params)
    B = batch.size
    two_h = 2 * cfg.h
    masks = _attention_masks(batch.lens, cfg.n)

    inputs = embed_modalities(layers, cfg, batch, active)
    feats = {}
    pooled = {}
    for mod in MODALITIES:
        f = bilstm_forward(inputs[mod], layers.lstm[mod], batch.lens)
        assert f.shape == (B, two_h, cfg.n)
        feats[mod] = f
        sub = None if collect is None else {}
        pooled[mod] = self_attention(f, layers.attn[mod], batch.lens, collect=sub, masks=masks)
        assert pooled[mod].shape == (B, two_h)
        if collect is not None:
            collect.setdefault("F", {})[mod] = f.data
            collect.setdefault("attn_matrix", {})[mod] = sub["attn_matrix"]
            collect.setdefault("attn_weights", {})[mod] = sub["attn_weights"]

    fused = bilinear_fuse(feats, layers.fusion, batch.lens, active, collect=collect)

    summaries = []
    for mod in MODALITIES:
        mixed = T.matmul(T.concat([pooled[mod], fused[mod]], axis=1), layers.head.mixing[mod])
        s_i = T.softmax(mixed, axis=1)
        assert s_i.shape == (B, cfg.d_z)
        if collect is not None:
            collect.setdefault("S", {})[mod] = s_i.data
            collect.setdefault("U", {})[mod] = pooled[mod].data
            collect.setdefault("Z", {})[mod] = fused[mod].data
        summaries.append(s_i)
    s = T.concat(summaries, axis=1)
    assert s.shape == (B, 4 * cfg.d_z)

    hidden_pre = T.add_bias(T.matmul(s, layers.head.w1), layers.head.b1)
    if collect is not None:
        collect.setdefault("relu_preacts", []).append(hidden_pre.data)
    pred = T.sigmoid(T.add_bias(T.matmul(T.relu(hidden_pre), layers.head.w2), layers.head.b2))
    assert pred.shape == (B, 5)
    return pred


def batch_loss(params: ParameterSet, cfg: ModelConfig, batch: Batch, active=None,
               layers: ModelLayers | None = None):
    """MSE between predictions and labels; returns (loss, pred)."""
    if batch.labels is None:
        raise ValidationError("batch has unlabeled sequences; loss needs labels")
    pred = forward_batch(params, cfg, batch, active, layers=layers)
    return T.mse_loss(pred, T.constant(batch.labels)), pred


def predict(seq: AlignedSequence, params: ParameterSet, cfg: ModelConfig) -> PersonalityVector:
    """Trait scores for a single sequence."""
    batch = batchify([seq], cfg)
    pred = forward_batch(params, cfg, batch)
    return PersonalityVector(pred.data[0])


def predict_batch(params, cfg, seqs, active=None, chunk=64) -> np.ndarray:
    """Forward-only predictions for many sequences, (N, 5)."""
    outs = []
    for lo in range(0, len(seqs), chunk):
        batch = batchify(seqs[lo : lo + chunk], cfg)
        outs.append(forward_batch(params, cfg, batch, active).data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParameterSet, cfg: ModelConfig):
    """Little-endian binary checkpoint: magic, version, JSON header, raw f64."""
    header = json.dumps(
        {"config": asdict(cfg), "total_count": params.total_count}, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(params.flatten_values().astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, cfg); validates magic, version, and total_count."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a parameter checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    vec = np.frombuffer(blob[12 + header_len :], dtype="<f8").astype(np.float64)
    params = build_parameters(cfg, seed=0)
    if params.total_count != header["total_count"] or vec.size != header["total_count"]:
        raise ValidationError(
            f"{path}: checkpoint holds {vec.size} values, header says "
            f"{header['total_count']}, config needs {params.total_count}"
        )
    return params.replace_values(vec), cfg
