"""The VQ-APC network: stacked unidirectional GRU layers, optional
Gumbel-Softmax vector-quantization layers between them, and a linear head
predicting the input frame ``shift`` steps ahead.

Gate equations (per layer, per step):
    u = sigmoid(x W_u + h U_u + b_u)          update gate
    s = sigmoid(x W_s + h U_s + b_s)          reset gate
    c = tanh(x W_c + (s * h) U_c + b_c)       candidate state
    h' = (1 - u) * h + u * c

Quantization at training time samples a code by adding Gumbel noise to the
projection logits; the forward value is the argmax codebook row and the
backward pass follows the softmax-weighted combination (straight-through).
At test time the largest logit wins deterministically, ties to the lowest
index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericsError
from .numerics import Tensor, read_fmat, stack, write_fmat

GUMBEL_CLAMP = 1e-10


@dataclass
class ModelConfig:
    input_dim: int = 80
    num_layers: int = 3
    hidden_dim: int = 512
    vq_layers: tuple = ()
    codebook_size: int = 128
    code_dim: int = None
    shift: int = 5
    tau: float = 0.1

    def __post_init__(self):
        self.vq_layers = tuple(sorted(set(int(v) for v in self.vq_layers)))
        if self.code_dim is None:
            self.code_dim = self.hidden_dim
        if any(v < 1 or v > self.num_layers for v in self.vq_layers):
            raise ConfigError(
                f"vq_layers {self.vq_layers} outside 1..{self.num_layers}"
            )
        if self.vq_layers and self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.shift < 1:
            raise ConfigError("shift must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.code_dim != self.hidden_dim:
            raise ConfigError("code_dim must equal hidden_dim (codes feed the next layer)")

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "vq_layers": list(self.vq_layers),
            "codebook_size": self.codebook_size,
            "code_dim": self.code_dim,
            "shift": self.shift,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["vq_layers"] = tuple(d.get("vq_layers", ()))
        return cls(**d)


class GruLayer:
    PARAM_NAMES = ("W_u", "U_u", "b_u", "W_s", "U_s", "b_s", "W_c", "U_c", "b_c")

    def __init__(self, input_dim, hidden_dim, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(hidden_dim)

        def weight(shape):
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                          requires_grad=True)

        def bias():
            return Tensor(np.zeros(hidden_dim, dtype=dtype), requires_grad=True)

        self.W_u, self.U_u, self.b_u = weight((input_dim, hidden_dim)), weight((hidden_dim, hidden_dim)), bias()
        self.W_s, self.U_s, self.b_s = weight((input_dim, hidden_dim)), weight((hidden_dim, hidden_dim)), bias()
        self.W_c, self.U_c, self.b_c = weight((input_dim, hidden_dim)), weight((hidden_dim, hidden_dim)), bias()

    def parameters(self):
        return [getattr(self, n) for n in self.PARAM_NAMES]


class Codebook:
    PARAM_NAMES = ("codes", "projection", "projection_bias")

    def __init__(self, hidden_dim, codebook_size, code_dim, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(hidden_dim)
        self.codes = Tensor(
            rng.uniform(-bound, bound, size=(codebook_size, code_dim)).astype(dtype),
            requires_grad=True,
        )
        self.projection = Tensor(
            rng.uniform(-bound, bound, size=(hidden_dim, codebook_size)).astype(dtype),
            requires_grad=True,
        )
        self.projection_bias = Tensor(np.zeros(codebook_size, dtype=dtype), requires_grad=True)

    @property
    def size(self):
        return self.codes.shape[0]

    def parameters(self):
        return [getattr(self, n) for n in self.PARAM_NAMES]


class VqApcModel:
    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        self.gru_layers = []
        in_dim = config.input_dim
        for _ in range(config.num_layers):
            self.gru_layers.append(GruLayer(in_dim, config.hidden_dim, rng, dtype))
            in_dim = config.hidden_dim
        self.quantizers = {
            layer: Codebook(config.hidden_dim, config.codebook_size, config.code_dim, rng, dtype)
            for layer in config.vq_layers
        }
        bound = 1.0 / np.sqrt(config.hidden_dim)
        self.head_weight = Tensor(
            rng.uniform(-bound, bound, size=(config.hidden_dim, config.input_dim)).astype(dtype),
            requires_grad=True,
        )
        self.head_bias = Tensor(np.zeros(config.input_dim, dtype=dtype), requires_grad=True)

    def named_parameters(self):
        """Fixed, documented parameter order: GRU layers 1..L (gate weights
        in PARAM_NAMES order), then quantizers by ascending layer index
        (codes, projection, projection_bias), then the prediction head."""
        named = []
        for i, layer in enumerate(self.gru_layers, start=1):
            for name in GruLayer.PARAM_NAMES:
                named.append((f"gru{i}.{name}", getattr(layer, name)))
        for layer_idx in sorted(self.quantizers):
            cb = self.quantizers[layer_idx]
            for name in Codebook.PARAM_NAMES:
                named.append((f"vq{layer_idx}.{name}", getattr(cb, name)))
        named.append(("head.weight", self.head_weight))
        named.append(("head.bias", self.head_bias))
        return named

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


@dataclass
class ForwardTrace:
    predictions: Tensor  # (B, T, D)
    hiddens: dict  # layer index -> (B, T, H) Tensor
    codes: dict = field(default_factory=dict)  # layer -> (B, T) int array
    probs: dict = field(default_factory=dict)  # layer -> (B, T, V) Tensor


def gru_forward(x_seq: Tensor, layer: GruLayer) -> Tensor:
    """Run one GRU layer over (B, T, Din); initial state is zero. Strictly
    causal: h_t depends only on x_1..x_t."""
    B, T, _ = x_seq.shape
    H = layer.b_u.shape[0]
    h = Tensor(np.zeros((B, H), dtype=x_seq.dtype))
    hiddens = []
    for t in range(T):
        x_t = x_seq[:, t, :]
        u = (x_t @ layer.W_u + h @ layer.U_u + layer.b_u).sigmoid()
        s = (x_t @ layer.W_s + h @ layer.U_s + layer.b_s).sigmoid()
        cand = (x_t @ layer.W_c + (s * h) @ layer.U_c + layer.b_c).tanh()
        h = (1.0 - u) * h + u * cand
        if not np.all(np.isfinite(h.data)):
            raise NumericsError(f"non-finite GRU state at step {t}")
        hiddens.append(h)
    return stack(hiddens, axis=1)


def sample_gumbel(rng, shape, dtype=np.float32):
    """Gumbel(0, 1) noise; uniforms clamped away from {0, 1}."""
    u = rng.random(shape)
    u = np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return (-np.log(-np.log(u))).astype(dtype)


def vq_logits(h: Tensor, cb: Codebook) -> Tensor:
    """Map hidden vectors (..., H) to codebook logits (..., V)."""
    return h @ cb.projection + cb.projection_bias


def _one_hot(indices, depth, dtype):
    flat = indices.reshape(-1)
    out = np.zeros((flat.size, depth), dtype=dtype)
    out[np.arange(flat.size), flat] = 1.0
    return out.reshape(indices.shape + (depth,))


def vq_forward_train(h: Tensor, cb: Codebook, tau: float, rng=None, noise=None, soft=False):
    """Sample codes with Gumbel noise; straight-through gradients.

    Returns (z, p, k): the quantized vectors, the Gumbel-Softmax
    probabilities, and the selected code indices. The forward value of z
    is the argmax codebook row; gradients flow through the soft
    combination sum_i p_i c_i. With soft=True the forward value is the
    soft combination itself (the surrogate the backward pass follows).
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    r = vq_logits(h, cb)
    if noise is None:
        if rng is None:
            raise ConfigError("vq_forward_train needs an rng or explicit noise")
        noise = sample_gumbel(rng, r.shape, dtype=r.data.dtype)
    p = ((r + Tensor(noise)) / tau).softmax(axis=-1)
    k = np.argmax(r.data + noise, axis=-1)
    if soft:
        return p @ cb.codes, p, k
    # straight-through: forward is exactly the argmax codebook row; the
    # codes see the hard assignment's gradient, the selection path (p)
    # the soft combination's
    hard = Tensor(_one_hot(k, cb.size, h.data.dtype))
    soft = p @ cb.codes.detach()
    z = hard @ cb.codes + (soft - soft.detach())
    return z, p, k


def vq_forward_eval(h: Tensor, cb: Codebook):
    """Deterministic quantization: pick the largest logit (ties -> lowest
    index) and return the corresponding codebook row."""
    r = vq_logits(h, cb)
    k = np.argmax(r.data, axis=-1)
    z = Tensor(_one_hot(k, cb.size, h.data.dtype)) @ cb.codes
    return z, k


def apc_forward(x_seq, model: VqApcModel, mode="train", rng=None, noise=None) -> ForwardTrace:
    """Full forward pass. x_seq is (T, D) or (B, T, D); quantized layer
    outputs replace the hidden sequence as input to the next layer.

    mode: "train" samples Gumbel noise (straight-through forward),
    "soft" uses the probability-weighted codebook combination, "eval"
    takes the argmax logit deterministically. ``noise`` optionally maps
    layer index -> precomputed Gumbel noise (frozen-noise checks)."""
    if mode not in ("train", "eval", "soft"):
        raise ConfigError(f"unknown mode {mode!r}")
    data = x_seq.data if isinstance(x_seq, Tensor) else np.asarray(x_seq)
    squeeze = data.ndim == 2
    x = x_seq if isinstance(x_seq, Tensor) else Tensor(data)
    if squeeze:
        x = x.reshape(1, *data.shape)
    if x.shape[1] < 1:
        raise DataError("empty input sequence")

    hiddens, codes, probs = {}, {}, {}
    inp = x
    for layer_idx, layer in enumerate(model.gru_layers, start=1):
        h = gru_forward(inp, layer)
        hiddens[layer_idx] = h
        if layer_idx in model.quantizers:
            cb = model.quantizers[layer_idx]
            if mode == "eval":
                z, k = vq_forward_eval(h, cb)
            else:
                layer_noise = None if noise is None else noise[layer_idx]
                z, p, k = vq_forward_train(
                    h, cb, model.config.tau, rng=rng, noise=layer_noise,
                    soft=(mode == "soft"),
                )
                probs[layer_idx] = p
            codes[layer_idx] = k
            inp = z
        else:
            inp = h
    predictions = inp @ model.head_weight + model.head_bias
    return ForwardTrace(predictions=predictions, hiddens=hiddens, codes=codes, probs=probs)


def apc_loss(trace: ForwardTrace, x_seq, n: int) -> Tensor:
    """Unnormalized future-prediction L1 loss: sum_{t=1..T-n} |x_{t+n} - y_t|
    over all feature dimensions (single sequence or batch)."""
    x = np.asarray(x_seq.data if isinstance(x_seq, Tensor) else x_seq)
    if x.ndim == 2:
        x = x[None]
    T = x.shape[1]
    if T <= n:
        raise DataError(f"sequence length {T} must exceed shift {n}")
    y = trace.predictions
    if y.shape[0] != x.shape[0]:
        y = y.reshape(x.shape)
    target = Tensor(x[:, n:, :].astype(y.data.dtype))
    return (y[:, : T - n, :] - target).abs().sum()


def masked_apc_loss(trace: ForwardTrace, x_batch, n: int, lengths):
    """Batched L1 loss excluding padded frames. Returns (loss Tensor summed
    over valid cells, number of valid target frames)."""
    x = np.asarray(x_batch)
    B, T, D = x.shape
    if min(lengths) <= n:
        raise DataError(f"every sequence must be longer than shift {n}")
    mask = np.zeros((B, T - n, 1), dtype=x.dtype)
    for b, length in enumerate(lengths):
        mask[b, : length - n, 0] = 1.0
    y = trace.predictions
    target = Tensor(x[:, n:, :])
    resid = ((y[:, : T - n, :] - target) * Tensor(mask)).abs().sum()
    valid = int(sum(length - n for length in lengths))
    return resid, valid


def extract_features(x_seq, model: VqApcModel, layer: int, quantized: bool):
    """Eval-mode representations from one layer: the hidden sequence, or its
    quantized version plus code indices when quantized=True."""
    if layer < 1 or layer > model.config.num_layers:
        raise ConfigError(f"layer {layer} outside 1..{model.config.num_layers}")
    if quantized and layer not in model.quantizers:
        raise ConfigError(f"layer {layer} has no quantizer")
    trace = apc_forward(x_seq, model, mode="eval")
    if quantized:
        cb = model.quantizers[layer]
        z, k = vq_forward_eval(trace.hiddens[layer], cb)
        return z.data[0].copy(), k[0].copy()
    return trace.hiddens[layer].data[0].copy(), None


def clone_with_parameters(model: VqApcModel, tensors):
    """A shallow model clone whose parameters are the given Tensors, in
    named_parameters() order. Used to differentiate the full model through
    a single flat parameter vector (gradient checking)."""
    import copy

    tensors = list(tensors)
    if len(tensors) != len(model.named_parameters()):
        raise ConfigError("clone_with_parameters: wrong tensor count")
    it = iter(tensors)
    clone = copy.copy(model)
    clone.gru_layers = []
    for _ in model.gru_layers:
        layer = object.__new__(GruLayer)
        for name in GruLayer.PARAM_NAMES:
            setattr(layer, name, next(it))
        clone.gru_layers.append(layer)
    clone.quantizers = {}
    for layer_idx in sorted(model.quantizers):
        cb = object.__new__(Codebook)
        for name in Codebook.PARAM_NAMES:
            setattr(cb, name, next(it))
        clone.quantizers[layer_idx] = cb
    clone.head_weight = next(it)
    clone.head_bias = next(it)
    return clone


def flat_parameter_vector(model: VqApcModel):
    """Concatenated copy of all parameter data, named_parameters() order."""
    return np.concatenate([t.data.reshape(-1) for t in model.parameters()])


def unflatten_parameters(model: VqApcModel, flat: Tensor):
    """Slice a flat Tensor back into per-parameter Tensors (graph-tracked)."""
    tensors = []
    offset = 0
    for p in model.parameters():
        n = int(np.prod(p.shape))
        tensors.append(flat[offset : offset + n].reshape(*p.shape))
        offset += n
    return tensors


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = b"VQCK"


def save_checkpoint(path, model: VqApcModel, epoch, loss_history, rng_seed):
    """Binary checkpoint: magic "VQCK", u32 JSON header length, JSON header
    {config, epoch, loss_history, rng_seed, tensor_order}, then one FMAT
    blob per parameter in named_parameters() order."""
    named = model.named_parameters()
    header = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "loss_history": [float(x) for x in loss_history],
        "rng_seed": int(rng_seed),
        "tensor_order": [name for name, _ in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, tensor in named:
            write_fmat(fh, tensor.data)


def load_checkpoint(path):
    """Returns (model, header dict)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        model = VqApcModel(ModelConfig.from_dict(header["config"]), seed=header["rng_seed"])
        for name, tensor in model.named_parameters():
            arr = read_fmat(fh)
            if arr.shape != tensor.data.shape:
                raise DataError(f"{path}: shape mismatch for {name}")
            tensor.data = arr
    return model, header
