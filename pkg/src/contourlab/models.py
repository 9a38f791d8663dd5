"""Model architectures and checkpoint serialization.

Three model kinds share the autodiff core:

* ``SiameseModel``: a width-scalable VGG19-style 1-D conv encoder applied
  to both contours of a pair with shared weights, a 128-d embedding, and
  a 2-way classification head over the concatenated embeddings.
* ``SlotFillModel``: a dense autoencoder (bottleneck 20) trained to
  reconstruct the outer contours of a triple and to fill the middle slot
  from the difference of the outer embeddings.
* ``DownstreamMlp``: a small probe classifier over fixed feature vectors.

Models consume raw cents arrays; the pitch-shaped models divide by 1200
internally (cents to octaves) so inputs sit in a range the heads can
digest even after +/-1200 cent transposition.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    Adam,
    Parameter,
    Tensor,
    concat,
    conv1d,
    dense,
    flatten,
    he_uniform,
    maxpool1d,
    mse,
    relu,
    reshape,
    softmax_cross_entropy,
    xavier_uniform,
)
from .contour import CONTOUR_LEN, Contour
from .errors import CheckpointError, ValidationError
from .util import atomic_write_text

CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".ckpt.json"
INPUT_SCALE = 1.0 / 1200.0   # cents -> octaves at the model boundary

# (convs per block, base channel count); width_multiplier scales channels
VGG_BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))
EMBEDDING_DIM = 128
HEAD_HIDDEN = 256
PAIR_CLASSES = 2

SLOTFILL_HIDDEN = 2048
SLOTFILL_BOTTLENECK = 20

MLP_HIDDEN = 128


@dataclass(frozen=True)
class VggConfig:
    """Architecture knobs for the Siamese encoder.

    ``width_multiplier`` scales every block's channel count (minimum 1
    channel); the input length and embedding size are fixed by the
    contour format and the head, and validation pins them.
    """

    width_multiplier: float = 1.0
    input_length: int = CONTOUR_LEN
    embedding_dim: int = EMBEDDING_DIM

    def validate(self) -> "VggConfig":
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ValidationError(
                f"width_multiplier {self.width_multiplier} outside (0, 1]")
        if self.input_length != CONTOUR_LEN:
            raise ValidationError(f"input_length must be {CONTOUR_LEN}")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ValidationError(f"embedding_dim must be {EMBEDDING_DIM}")
        return self

    def channels(self) -> list[int]:
        return [max(1, round(base * self.width_multiplier)) for _, base in VGG_BLOCKS]


class _ParamMixin:
    """Shared parameter bookkeeping for the three model kinds."""

    def __init__(self):
        self._params: list[Parameter] = []
        self._names: set[str] = set()

    def _register(self, name: str, data) -> Parameter:
        if name in self._names:
            raise ValidationError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._names.add(name)
        self._params.append(p)
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self._params))

    def param_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self._params}

    def load_param_dict(self, values: dict[str, np.ndarray]) -> None:
        mine = {p.name: p for p in self._params}
        missing = sorted(set(mine) - set(values))
        extra = sorted(set(values) - set(mine))
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match: missing {missing}, unexpected {extra}")
        for name, p in mine.items():
            arr = np.asarray(values[name])
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def _as_batch(x, dtype) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValidationError(f"expected a (batch, length) array, got shape {arr.shape}")


class SiameseModel(_ParamMixin):
    """Weight-shared VGG19-1D pair classifier.

    Five conv blocks (2, 2, 4, 4, 4 convolutions; width-3 same
    convolutions, ReLU, then 2x max pooling) take the 100-frame contour
    from 1 channel to ``channels[4]`` over a length-3 trace; a linear
    dense layer maps the flattened activations to a 128-d embedding. The
    head concatenates two embeddings, applies a 256-unit ReLU layer and a
    linear 2-way output.
    """

    kind = "siamese"

    def __init__(self, config: VggConfig = VggConfig(), seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        chans = config.channels()
        self._blocks: list[list[tuple[Parameter, Parameter]]] = []
        c_in = 1
        length = config.input_length
        for bi, ((n_convs, _), c_out) in enumerate(zip(VGG_BLOCKS, chans), start=1):
            block = []
            for ci in range(1, n_convs + 1):
                w = self._register(
                    f"encoder.block{bi}.conv{ci}.weight",
                    he_uniform(rng, (c_out, c_in, 3), fan_in=c_in * 3, dtype=self.dtype))
                b = self._register(
                    f"encoder.block{bi}.conv{ci}.bias", np.zeros(c_out, dtype=self.dtype))
                block.append((w, b))
                c_in = c_out
            self._blocks.append(block)
            length //= 2
        flat_dim = chans[-1] * length
        self._embed_w = self._register(
            "encoder.embed.weight",
            xavier_uniform(rng, (EMBEDDING_DIM, flat_dim),
                           fan_in=flat_dim, fan_out=EMBEDDING_DIM, dtype=self.dtype))
        self._embed_b = self._register(
            "encoder.embed.bias", np.zeros(EMBEDDING_DIM, dtype=self.dtype))
        joint = 2 * EMBEDDING_DIM
        self._head1_w = self._register(
            "head.hidden.weight",
            he_uniform(rng, (HEAD_HIDDEN, joint), fan_in=joint, dtype=self.dtype))
        self._head1_b = self._register(
            "head.hidden.bias", np.zeros(HEAD_HIDDEN, dtype=self.dtype))
        self._head2_w = self._register(
            "head.logits.weight",
            xavier_uniform(rng, (PAIR_CLASSES, HEAD_HIDDEN),
                           fan_in=HEAD_HIDDEN, fan_out=PAIR_CLASSES, dtype=self.dtype))
        self._head2_b = self._register(
            "head.logits.bias", np.zeros(PAIR_CLASSES, dtype=self.dtype))

    @property
    def embedding_dim(self) -> int:
        return EMBEDDING_DIM

    def encode(self, contours_cents) -> Tensor:
        """Embed a (batch, 100) cents array as (batch, 128)."""
        arr, _ = _as_batch(contours_cents, self.dtype)
        if arr.shape[1] != self.config.input_length:
            raise ValidationError(
                f"contour length {arr.shape[1]} != {self.config.input_length}")
        h = Tensor(arr[:, None, :] * self.dtype.type(INPUT_SCALE))
        for block in self._blocks:
            for w, b in block:
                h = relu(conv1d(h, w, b))
            h = maxpool1d(h)
        h = flatten(h, start_axis=1)
        return dense(h, self._embed_w, self._embed_b)

    def pair_logits(self, a_cents, b_cents) -> tuple[Tensor, Tensor, Tensor]:
        """Logits plus both embeddings for batches of contour pairs."""
        ea = self.encode(a_cents)
        eb = self.encode(b_cents)
        joint = concat((ea, eb), axis=1)
        h = relu(dense(joint, self._head1_w, self._head1_b))
        return dense(h, self._head2_w, self._head2_b), ea, eb

    def pair_loss(self, a_cents, b_cents, labels) -> Tensor:
        logits, _, _ = self.pair_logits(a_cents, b_cents)
        return softmax_cross_entropy(logits, np.asarray(labels))

    def checkpoint_config(self) -> dict:
        return {
            "width_multiplier": self.config.width_multiplier,
            "input_length": self.config.input_length,
            "embedding_dim": self.config.embedding_dim,
        }


def siamese_forward(model: SiameseModel, a: Contour, b: Contour):
    """Single-pair forward: (logits[2], embedding_a[128], embedding_b[128])."""
    logits, ea, eb = model.pair_logits(a.values_cents[None, :], b.values_cents[None, :])
    d = model.embedding_dim
    return reshape(logits, (PAIR_CLASSES,)), reshape(ea, (d,)), reshape(eb, (d,))


def siamese_loss(model: SiameseModel, pair) -> Tensor:
    """Cross-entropy of one PairSample; keeps the graph for backward."""
    return model.pair_loss(pair.a.values_cents[None, :],
                           pair.b.values_cents[None, :],
                           np.array([pair.label]))


class SlotFillModel(_ParamMixin):
    """Encoder/decoder for contour reconstruction and slot filling.

    Encoder: 100 -> hidden -> hidden -> 20 (ReLU, ReLU, linear).
    Decoder: 20 -> hidden -> hidden -> 100 (ReLU, ReLU, linear).
    The same encoder E and decoder D serve every contour of a triple.
    """

    kind = "slotfill"

    def __init__(self, seed: int = 0, dtype=np.float32,
                 hidden_dim: int = SLOTFILL_HIDDEN, contour_len: int = CONTOUR_LEN):
        super().__init__()
        if hidden_dim < 1:
            raise ValidationError("hidden_dim must be positive")
        if contour_len != CONTOUR_LEN:
            raise ValidationError(f"contour_len must be {CONTOUR_LEN}")
        self.dtype = np.dtype(dtype)
        self.hidden_dim = int(hidden_dim)
        self.contour_len = int(contour_len)
        rng = np.random.default_rng(seed)
        h, k, n = self.hidden_dim, SLOTFILL_BOTTLENECK, self.contour_len

        def dense_pair(name, n_out, n_in, linear_out=False):
            if linear_out:
                w = xavier_uniform(rng, (n_out, n_in), fan_in=n_in, fan_out=n_out,
                                   dtype=self.dtype)
            else:
                w = he_uniform(rng, (n_out, n_in), fan_in=n_in, dtype=self.dtype)
            return (self._register(f"{name}.weight", w),
                    self._register(f"{name}.bias", np.zeros(n_out, dtype=self.dtype)))

        self._enc1 = dense_pair("encoder.dense1", h, n)
        self._enc2 = dense_pair("encoder.dense2", h, h)
        self._enc3 = dense_pair("encoder.bottleneck", k, h, linear_out=True)
        self._dec1 = dense_pair("decoder.dense1", h, k)
        self._dec2 = dense_pair("decoder.dense2", h, h)
        self._dec3 = dense_pair("decoder.output", n, h, linear_out=True)

    @property
    def embedding_dim(self) -> int:
        return SLOTFILL_BOTTLENECK

    def _scale(self, contours_cents) -> np.ndarray:
        arr, _ = _as_batch(contours_cents, self.dtype)
        if arr.shape[1] != self.contour_len:
            raise ValidationError(f"contour length {arr.shape[1]} != {self.contour_len}")
        return arr * self.dtype.type(INPUT_SCALE)

    def encode(self, contours_cents) -> Tensor:
        """Embed a (batch, 100) cents array as (batch, 20)."""
        h = Tensor(self._scale(contours_cents))
        h = relu(dense(h, *self._enc1))
        h = relu(dense(h, *self._enc2))
        return dense(h, *self._enc3)

    def decode(self, embedding: Tensor) -> Tensor:
        """Map (batch, 20) embeddings back to scaled contours (batch, 100)."""
        h = relu(dense(embedding, *self._dec1))
        h = relu(dense(h, *self._dec2))
        return dense(h, *self._dec3)

    def triple_loss_terms(self, p1_cents, p2_cents, p3_cents) -> dict[str, Tensor]:
        """The three MSE terms and their mean, all in scaled (octave) units.

        ``e1``/``e3`` reconstruct their own contours; the middle contour
        is predicted by decoding the difference e3 - e1 of the outer
        embeddings.
        """
        t1 = Tensor(self._scale(p1_cents))
        t2 = Tensor(self._scale(p2_cents))
        t3 = Tensor(self._scale(p3_cents))
        e1 = self.encode(p1_cents)
        e3 = self.encode(p3_cents)
        recon1 = mse(self.decode(e1), t1)
        recon3 = mse(self.decode(e3), t3)
        slot = mse(self.decode(e3 - e1), t2)
        total = (recon1 + recon3 + slot) * (1.0 / 3.0)
        return {"total": total, "recon1": recon1, "recon3": recon3, "slot": slot}

    def triple_loss(self, p1_cents, p2_cents, p3_cents) -> Tensor:
        return self.triple_loss_terms(p1_cents, p2_cents, p3_cents)["total"]

    def checkpoint_config(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "contour_len": self.contour_len}


def slotfill_loss(model: SlotFillModel, triple) -> Tensor:
    """Mean of the three MSE terms for one TripleSample."""
    return model.triple_loss(triple.p1.values_cents[None, :],
                             triple.p2.values_cents[None, :],
                             triple.p3.values_cents[None, :])


class DownstreamMlp(_ParamMixin):
    """Two hidden ReLU layers of 128 units, then linear class logits."""

    kind = "mlp"

    def __init__(self, input_dim: int, n_classes: int, seed: int = 0, dtype=np.float32):
        super().__init__()
        if input_dim < 1 or n_classes < 2:
            raise ValidationError("need input_dim >= 1 and n_classes >= 2")
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._l1_w = self._register(
            "dense1.weight", he_uniform(rng, (MLP_HIDDEN, input_dim),
                                        fan_in=input_dim, dtype=self.dtype))
        self._l1_b = self._register("dense1.bias", np.zeros(MLP_HIDDEN, dtype=self.dtype))
        self._l2_w = self._register(
            "dense2.weight", he_uniform(rng, (MLP_HIDDEN, MLP_HIDDEN),
                                        fan_in=MLP_HIDDEN, dtype=self.dtype))
        self._l2_b = self._register("dense2.bias", np.zeros(MLP_HIDDEN, dtype=self.dtype))
        self._out_w = self._register(
            "logits.weight", xavier_uniform(rng, (n_classes, MLP_HIDDEN),
                                            fan_in=MLP_HIDDEN, fan_out=n_classes,
                                            dtype=self.dtype))
        self._out_b = self._register("logits.bias", np.zeros(n_classes, dtype=self.dtype))

    def logits(self, features) -> Tensor:
        arr, _ = _as_batch(features, self.dtype)
        if arr.shape[1] != self.input_dim:
            raise ValidationError(f"feature dimension {arr.shape[1]} != {self.input_dim}")
        h = relu(dense(Tensor(arr), self._l1_w, self._l1_b))
        h = relu(dense(h, self._l2_w, self._l2_b))
        return dense(h, self._out_w, self._out_b)

    def loss(self, features, labels) -> Tensor:
        return softmax_cross_entropy(self.logits(features), np.asarray(labels))

    def predict(self, features) -> np.ndarray:
        """Argmax class indices, no gradient bookkeeping needed."""
        return np.argmax(self.logits(features).data, axis=1)

    def checkpoint_config(self) -> dict:
        return {"input_dim": self.input_dim, "n_classes": self.n_classes}


ModelKind = SiameseModel | SlotFillModel | DownstreamMlp


def _build_model(kind: str, config: dict, dtype=np.float32) -> ModelKind:
    if kind == "siamese":
        return SiameseModel(VggConfig(**config), seed=0, dtype=dtype)
    if kind == "slotfill":
        return SlotFillModel(seed=0, dtype=dtype, **config)
    if kind == "mlp":
        return DownstreamMlp(seed=0, dtype=dtype, **config)
    raise CheckpointError(f"unknown model kind {kind!r}")


@dataclass
class CheckpointBundle:
    """Everything needed to rebuild a model bit-for-bit.

    Parameters are float32 ndarrays keyed by name; ``config`` is the
    architecture descriptor for ``kind``. Optimizer state and the
    training config snapshot ride along when available.
    """

    kind: str
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict | None = None
    train_config: dict | None = None
    rng_seed: int | None = None
    format_version: int = CHECKPOINT_VERSION
    param_order: list[str] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: ModelKind, optimizer: Adam | None = None,
                   train_config: dict | None = None,
                   rng_seed: int | None = None) -> "CheckpointBundle":
        params = {p.name: p.data.astype(np.float32, copy=True) for p in model.parameters()}
        opt_state = None
        if optimizer is not None:
            s = optimizer.state_dict()
            opt_state = {
                "t": s["t"], "lr": s["lr"], "beta1": s["beta1"],
                "beta2": s["beta2"], "eps": s["eps"],
                "m": {k: v.astype(np.float32) for k, v in s["m"].items()},
                "v": {k: v.astype(np.float32) for k, v in s["v"].items()},
            }
        return cls(kind=model.kind, config=model.checkpoint_config(), params=params,
                   optimizer=opt_state, train_config=train_config, rng_seed=rng_seed,
                   param_order=[p.name for p in model.parameters()])

    def build_model(self, dtype=np.float32) -> ModelKind:
        model = _build_model(self.kind, dict(self.config), dtype=dtype)
        model.load_param_dict(self.params)
        return model

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        order = self.param_order or sorted(self.params)
        doc = {
            "format_version": self.format_version,
            "kind": self.kind,
            "config": self.config,
            "params": [_encode_array(name, self.params[name]) for name in order],
            "optimizer": _encode_optimizer(self.optimizer),
            "train_config": self.train_config,
            "rng_seed": self.rng_seed,
        }
        atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def _encode_array(name: str, arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "name": name,
        "shape": list(arr.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(entry: dict) -> tuple[str, np.ndarray]:
    name = entry.get("name", "<unnamed>")
    try:
        raw = base64.b64decode(entry["data"], validate=True)
    except Exception as exc:
        raise CheckpointError(f"parameter {name}: undecodable payload ({exc})") from None
    shape = tuple(int(s) for s in entry["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(raw) != expected:
        raise CheckpointError(
            f"parameter {name}: payload is {len(raw)} bytes, shape {shape} needs {expected}")
    return name, np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _encode_optimizer(state: dict | None) -> dict | None:
    if state is None:
        return None
    return {
        "t": state["t"], "lr": state["lr"], "beta1": state["beta1"],
        "beta2": state["beta2"], "eps": state["eps"],
        "m": [_encode_array(k, v) for k, v in state["m"].items()],
        "v": [_encode_array(k, v) for k, v in state["v"].items()],
    }


def _decode_optimizer(doc: dict | None) -> dict | None:
    if doc is None:
        return None
    return {
        "t": int(doc["t"]), "lr": float(doc["lr"]), "beta1": float(doc["beta1"]),
        "beta2": float(doc["beta2"]), "eps": float(doc["eps"]),
        "m": dict(_decode_array(e) for e in doc["m"]),
        "v": dict(_decode_array(e) for e in doc["v"]),
    }


def save_checkpoint(model: ModelKind, path: str | Path, optimizer: Adam | None = None,
                    train_config: dict | None = None,
                    rng_seed: int | None = None) -> Path:
    """Snapshot ``model`` (and optionally its optimizer) to a JSON file."""
    return CheckpointBundle.from_model(
        model, optimizer=optimizer, train_config=train_config, rng_seed=rng_seed,
    ).save(path)


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    """Read a checkpoint file; structural problems raise CheckpointError."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} unsupported "
            f"(this build reads version {CHECKPOINT_VERSION})")
    for key in ("kind", "config", "params"):
        if key not in doc:
            raise CheckpointError(f"checkpoint missing {key!r}")
    params = {}
    order = []
    for entry in doc["params"]:
        name, arr = _decode_array(entry)
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        params[name] = arr
        order.append(name)
    return CheckpointBundle(
        kind=str(doc["kind"]),
        config=dict(doc["config"]),
        params=params,
        optimizer=_decode_optimizer(doc.get("optimizer")),
        train_config=doc.get("train_config"),
        rng_seed=doc.get("rng_seed"),
        format_version=int(version),
        param_order=order,
    )


def embed(checkpoint: CheckpointBundle | str | Path, contours: Sequence[Contour],
          batch_size: int = 256) -> np.ndarray:
    """Embed contours with a trained encoder from a checkpoint.

    Returns an (n, d) float32 matrix; d is 128 for the Siamese encoder
    and 20 for the slot-fill encoder. Rows follow input order.
    """
    bundle = checkpoint
    if not isinstance(bundle, CheckpointBundle):
        bundle = load_checkpoint(bundle)
    if bundle.kind not in ("siamese", "slotfill"):
        raise CheckpointError(
            f"checkpoint kind {bundle.kind!r} has no contour encoder")
    model = bundle.build_model()
    contours = list(contours)
    if not contours:
        return np.zeros((0, model.embedding_dim), dtype=np.float32)
    rows = []
    for lo in range(0, len(contours), batch_size):
        batch = np.stack([c.values_cents for c in contours[lo:lo + batch_size]])
        rows.append(model.encode(batch).data)
    return np.concatenate(rows).astype(np.float32)
