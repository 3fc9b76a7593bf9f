"""Speaker embedding models.

Three variants share one classifier head:

* ``hvector`` — per-fragment conv + BiGRU encoder with attention pooling,
  then a segment-level width-1 conv with a second attention pooling.
* ``xvector`` — a stack of five 1-D convolutions over the whole frame
  sequence followed by statistics pooling.
* ``xvector_attn`` — same stack, but a learned scorer weights the frames
  in the pooling.

The utterance embedding is the first fully connected layer's output after
its activation and batchnorm, before dropout.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as hv
from .audio import UtteranceFeatures
from .tensor import Tensor

MODES = ("hvector", "xvector", "xvector_attn")
XVECTOR_WIDTHS = (5, 3, 3, 1, 1)

__all__ = [
    "ModelConfig", "ModelParams", "build_params",
    "attention_normalize",
    "frame_encode", "frame_attention", "segment_encode", "segment_attention",
    "forward", "forward_baseline", "embed_batch",
    "save_checkpoint", "load_checkpoint",
]


@dataclass
class ModelConfig:
    n_speakers: int
    mode: str = "hvector"
    feat_dim: int = 20
    n_fragments: int = 10
    frames_per_fragment: int = 30
    frame_cnn_width: int = 5
    frame_cnn_out: int = 512
    gru_hidden: int = 512          # per direction
    seg_cnn_out: int = 1500
    fc1_dim: int = 512
    fc2_dim: int = 512
    dropout: float = 0.2

    @property
    def frame_out_dim(self) -> int:
        """Width of the BiGRU output (both directions concatenated)."""
        return 2 * self.gru_hidden

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for f in fields(self):
            if f.name in ("mode", "dropout"):
                continue
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def desk(cls, n_speakers: int, mode: str = "hvector",
             frames_per_fragment: int = 10) -> "ModelConfig":
        """Reduced dimensions for laptop-scale experiments."""
        return cls(
            n_speakers=n_speakers, mode=mode,
            frames_per_fragment=frames_per_fragment,
            frame_cnn_out=64, gru_hidden=32, seg_cnn_out=64,
            fc1_dim=64, fc2_dim=64,
        )

    @classmethod
    def tiny(cls, n_speakers: int = 3, mode: str = "hvector") -> "ModelConfig":
        """Smallest useful network, for gradient checking."""
        return cls(
            n_speakers=n_speakers, mode=mode, frames_per_fragment=4,
            frame_cnn_out=8, gru_hidden=4, seg_cnn_out=8, fc1_dim=8, fc2_dim=8,
        )

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            raw = raw.strip()
            if key == "mode":
                values[key] = raw
            elif key == "dropout":
                values[key] = float(raw)
            else:
                values[key] = int(raw)
        return cls(**values)


class ModelParams:
    """Named trainable tensors plus non-trainable buffers (batchnorm stats)."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def gru(self, prefix: str) -> dict:
        return {k: self.tensors[f"{prefix}.{k}"]
                for k in ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh")}

    def clone(self) -> "ModelParams":
        out = ModelParams()
        for name, t in self.tensors.items():
            out.tensors[name] = Tensor(t.data.copy(), requires_grad=True)
        for name, b in self.buffers.items():
            out.buffers[name] = b.copy()
        return out


def _uniform(rng, fan_in, shape):
    return (rng.random(shape) * 2.0 - 1.0) / np.sqrt(fan_in)


class _Builder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params = ModelParams()

    def weight(self, name, fan_in, shape):
        self.params.tensors[name] = Tensor(_uniform(self.rng, fan_in, shape),
                                           requires_grad=True)

    def bias(self, name, size):
        self.params.tensors[name] = Tensor(np.zeros(size), requires_grad=True)

    def conv(self, name, width, cin, cout):
        self.weight(f"{name}.w", width * cin, (width, cin, cout))
        self.bias(f"{name}.b", cout)

    def linear(self, name, din, dout):
        self.weight(f"{name}.w", din, (din, dout))
        self.bias(f"{name}.b", dout)

    def norm(self, name, size):
        self.params.tensors[f"{name}.gamma"] = Tensor(np.ones(size), requires_grad=True)
        self.params.tensors[f"{name}.beta"] = Tensor(np.zeros(size), requires_grad=True)
        self.params.buffers[f"{name}.mean"] = np.zeros(size)
        self.params.buffers[f"{name}.var"] = np.ones(size)

    def gru(self, name, din, hidden):
        for k in ("wz", "wr", "wh"):
            self.weight(f"{name}.{k}", din, (din, hidden))
        for k in ("uz", "ur", "uh"):
            self.weight(f"{name}.{k}", hidden, (hidden, hidden))
        for k in ("bz", "br", "bh"):
            self.bias(f"{name}.{k}", hidden)

    def attention(self, name, dim):
        self.weight(f"{name}.w0", dim, (dim, dim))
        self.bias(f"{name}.b0", dim)
        self.weight(f"{name}.w1", dim, (dim, 1))


def build_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialise all weights with centred uniforms scaled by 1/sqrt(fan_in)."""
    b = _Builder(seed)
    if cfg.mode == "hvector":
        b.conv("frame_conv", cfg.frame_cnn_width, cfg.feat_dim, cfg.frame_cnn_out)
        b.norm("frame_bn", cfg.frame_cnn_out)
        b.gru("gru_f", cfg.frame_cnn_out, cfg.gru_hidden)
        b.gru("gru_b", cfg.frame_cnn_out, cfg.gru_hidden)
        b.attention("frame_att", cfg.frame_out_dim)
        b.conv("seg_conv", 1, 2 * cfg.frame_out_dim, cfg.seg_cnn_out)
        b.norm("seg_bn", cfg.seg_cnn_out)
        b.attention("seg_att", cfg.seg_cnn_out)
    else:
        channels = [cfg.frame_cnn_out] * 4 + [cfg.seg_cnn_out]
        cin = cfg.feat_dim
        for i, (width, cout) in enumerate(zip(XVECTOR_WIDTHS, channels), 1):
            b.conv(f"conv{i}", width, cin, cout)
            b.norm(f"bn{i}", cout)
            cin = cout
        if cfg.mode == "xvector_attn":
            b.attention("att", cfg.seg_cnn_out)
    b.linear("fc1", 2 * cfg.seg_cnn_out, cfg.fc1_dim)
    b.norm("fc1_bn", cfg.fc1_dim)
    b.linear("fc2", cfg.fc1_dim, cfg.fc2_dim)
    b.linear("out", cfg.fc2_dim, cfg.n_speakers)
    return b.params


def _batchnorm(x, params, name, training):
    return hv.batchnorm(
        x, params[f"{name}.gamma"], params[f"{name}.beta"],
        params.buffers[f"{name}.mean"], params.buffers[f"{name}.var"],
        training=training,
    )


def _gru_direction(seq, p, reverse: bool):
    batch, steps, _ = seq.shape
    hidden = p["uz"].shape[0]
    h = Tensor(np.zeros((batch, hidden), dtype=seq.data.dtype))
    outs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        xt = hv.reshape(hv.slice_axis(seq, 1, t, t + 1), (batch, -1))
        h = hv.gru_cell(xt, h, p)
        outs[t] = hv.reshape(h, (batch, 1, hidden))
    return hv.concat(outs, axis=1)


def attention_normalize(scores) -> Tensor:
    """Raw relevance scores to attention weights: softmax over the last axis.

    Both attention levels normalize through this one map, so its properties
    (weights sum to 1, constant score shifts change nothing) hold for each.
    """
    x = scores if isinstance(scores, Tensor) else Tensor(scores)
    return hv.softmax(x, axis=-1)


def _attention_weights(h, params, name):
    """Score each row with relu(h W0 + b0) W1 and softmax over the rows."""
    z = hv.relu(hv.add(hv.matmul(h, params[f"{name}.w0"]), params[f"{name}.b0"]))
    scores = hv.matmul(z, params[f"{name}.w1"])
    return attention_normalize(hv.reshape(scores, h.shape[:-1]))


def _attend_and_pool(h, params, name):
    alpha = _attention_weights(h, params, name)
    weighted = hv.mul(h, hv.reshape(alpha, alpha.shape + (1,)))
    return hv.stats_pool(weighted), alpha


def frame_encode(fragments, params: ModelParams, cfg: ModelConfig,
                 training: bool = False):
    """Conv + BiGRU over one fragment (M, F) or a stack (B, M, F)."""
    x = fragments if isinstance(fragments, Tensor) else Tensor(fragments)
    squeeze = x.ndim == 2
    if squeeze:
        x = hv.reshape(x, (1,) + x.shape)
    h = hv.conv1d(x, params["frame_conv.w"], params["frame_conv.b"])
    h = _batchnorm(hv.relu(h), params, "frame_bn", training)
    fwd = _gru_direction(h, params.gru("gru_f"), reverse=False)
    bwd = _gru_direction(h, params.gru("gru_b"), reverse=True)
    out = hv.concat([fwd, bwd], axis=-1)
    return hv.reshape(out, out.shape[1:]) if squeeze else out


def frame_attention(h, params: ModelParams):
    """Pool (M, E) or (B, M, E) encoder outputs to segment vectors of 2E."""
    x = h if isinstance(h, Tensor) else Tensor(h)
    squeeze = x.ndim == 2
    if squeeze:
        x = hv.reshape(x, (1,) + x.shape)
    pooled, alpha = _attend_and_pool(x, params, "frame_att")
    if squeeze:
        return hv.reshape(pooled, pooled.shape[1:]), hv.reshape(alpha, alpha.shape[1:])
    return pooled, alpha


def segment_encode(segments, params: ModelParams, cfg: ModelConfig,
                   training: bool = False):
    """Width-1 conv over the segment sequence (N, 2E) or (B, N, 2E)."""
    x = segments if isinstance(segments, Tensor) else Tensor(segments)
    h = hv.conv1d(x, params["seg_conv.w"], params["seg_conv.b"])
    return _batchnorm(hv.relu(h), params, "seg_bn", training)


def segment_attention(s, params: ModelParams):
    """Pool (N, S) or (B, N, S) segment encodings to utterance vectors of 2S."""
    x = s if isinstance(s, Tensor) else Tensor(s)
    squeeze = x.ndim == 2
    if squeeze:
        x = hv.reshape(x, (1,) + x.shape)
    pooled, alpha = _attend_and_pool(x, params, "seg_att")
    if squeeze:
        return hv.reshape(pooled, pooled.shape[1:]), hv.reshape(alpha, alpha.shape[1:])
    return pooled, alpha


def _head(pooled, params, cfg, training, rng, trace):
    z = hv.add(hv.matmul(pooled, params["fc1.w"]), params["fc1.b"])
    emb = _batchnorm(hv.relu(z), params, "fc1_bn", training)
    if trace is not None:
        trace["emb"] = emb
    dropped = hv.dropout(emb, cfg.dropout, rng=rng, training=training)
    z2 = hv.relu(hv.add(hv.matmul(dropped, params["fc2.w"]), params["fc2.b"]))
    logits = hv.add(hv.matmul(z2, params["out.w"]), params["out.b"])
    return logits, emb


def _hvector_forward(frags, params, cfg, training, rng, trace):
    batch, n_frag, m, feat = frags.shape
    flat = Tensor(frags.reshape(batch * n_frag, m, feat))
    enc = frame_encode(flat, params, cfg, training)
    seg_vec, frame_alpha = _attend_and_pool(enc, params, "frame_att")
    segments = hv.reshape(seg_vec, (batch, n_frag, seg_vec.shape[-1]))
    seg_enc = segment_encode(segments, params, cfg, training)
    utt_vec, seg_alpha = _attend_and_pool(seg_enc, params, "seg_att")
    if trace is not None:
        trace.update(frame_encoded=enc, frame_alpha=frame_alpha,
                     segments=segments, segment_encoded=seg_enc,
                     seg_alpha=seg_alpha, utterance_vector=utt_vec)
    return _head(utt_vec, params, cfg, training, rng, trace)


def _baseline_forward(frags, n_frames, params, cfg, training, rng, trace):
    batch, n_frag, m, feat = frags.shape
    t_real = int(n_frames[0])
    if any(int(t) != t_real for t in n_frames):
        raise ValueError("baseline batches need a uniform real frame count")
    h = Tensor(frags.reshape(batch, n_frag * m, feat)[:, :t_real, :])
    for i in range(1, 6):
        h = hv.conv1d(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        h = _batchnorm(hv.relu(h), params, f"bn{i}", training)
    if cfg.mode == "xvector_attn":
        alpha = _attention_weights(h, params, "att")
        pooled = hv.weighted_stats_pool(h, alpha)
    else:
        alpha = None
        pooled = hv.stats_pool(h)
    if trace is not None:
        trace.update(frame_encoded=h, frame_alpha=alpha, utterance_vector=pooled)
    return _head(pooled, params, cfg, training, rng, trace)


def _as_batch(u):
    if isinstance(u, UtteranceFeatures):
        return u.fragments[None], np.array([u.n_frames]), True
    raise TypeError(f"forward expects UtteranceFeatures, got {type(u).__name__}")


def forward(u, params: ModelParams, cfg: ModelConfig, training: bool = False,
            rng=None, trace: dict | None = None):
    """Logits and embedding for one utterance."""
    frags, n_frames, _ = _as_batch(u)
    logits, emb = forward_batch(frags, n_frames, params, cfg, training, rng, trace)
    return hv.reshape(logits, (cfg.n_speakers,)), hv.reshape(emb, (cfg.fc1_dim,))


def forward_batch(frags: np.ndarray, n_frames: np.ndarray, params: ModelParams,
                  cfg: ModelConfig, training: bool = False, rng=None,
                  trace: dict | None = None):
    """Logits (B, K) and embeddings (B, fc1_dim) for stacked fragments."""
    if frags.ndim != 4:
        raise ValueError(f"expected (B, N, M, F) fragments, got shape {frags.shape}")
    if frags.shape[1] != cfg.n_fragments or frags.shape[3] != cfg.feat_dim:
        raise ValueError(
            f"fragments {frags.shape} do not match config "
            f"(n_fragments={cfg.n_fragments}, feat_dim={cfg.feat_dim})"
        )
    if cfg.mode == "hvector":
        return _hvector_forward(frags, params, cfg, training, rng, trace)
    return _baseline_forward(frags, n_frames, params, cfg, training, rng, trace)


def forward_baseline(u, params: ModelParams, cfg: ModelConfig,
                     training: bool = False, rng=None, trace: dict | None = None):
    """Logits and embedding from an x-vector style model."""
    if cfg.mode == "hvector":
        raise ValueError("forward_baseline needs an xvector or xvector_attn config")
    return forward(u, params, cfg, training, rng, trace)


def embed_batch(features: list, params: ModelParams, cfg: ModelConfig,
                batch_size: int = 64) -> np.ndarray:
    """Inference-mode embeddings for a list of UtteranceFeatures.

    Utterances are grouped by shape so mixed-length sets still form valid
    batches; results come back in input order.
    """
    groups: dict = {}
    for i, u in enumerate(features):
        groups.setdefault((u.fragments.shape, u.n_frames), []).append(i)
    out = np.zeros((len(features), cfg.fc1_dim))
    for idx in groups.values():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            frags = np.stack([features[i].fragments for i in chunk])
            n_frames = np.array([features[i].n_frames for i in chunk])
            _, emb = forward_batch(frags, n_frames, params, cfg, training=False)
            out[chunk] = emb.data
    return out


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig):
    """Write a named-tensor archive plus a sibling .cfg text file."""
    path = Path(path)
    arrays = {name: t.data for name, t in params.tensors.items()}
    arrays.update({f"buffer.{name}": b for name, b in params.buffers.items()})
    hv.save_archive(path, arrays)
    path.with_suffix(".cfg").write_text(cfg.to_text(), encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    path = Path(path)
    cfg_path = path.with_suffix(".cfg")
    if not path.exists() or not cfg_path.exists():
        raise FileNotFoundError(
            f"checkpoint needs both {path.name} and {cfg_path.name} in {path.parent}"
        )
    cfg = ModelConfig.from_text(cfg_path.read_text(encoding="utf-8"))
    arrays = hv.load_archive(path)
    reference = build_params(cfg, seed=0)
    params = ModelParams()
    for name, t in reference.tensors.items():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing tensor {name}")
        if arrays[name].shape != t.shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape {arrays[name].shape}, "
                f"expected {t.shape}"
            )
        params.tensors[name] = Tensor(arrays[name], requires_grad=True)
    for name in reference.buffers:
        key = f"buffer.{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing buffer {name}")
        params.buffers[name] = arrays[key]
    return params, cfg
