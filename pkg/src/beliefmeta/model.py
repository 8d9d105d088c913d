"""Evidential MLP classifier.

The network's last layer goes through softplus and is read as a nonnegative
evidence vector; there is no softmax anywhere. Parameters live in a
:class:`ParamSet`, an immutable ordered mapping of name -> float64 array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ShapeMismatchError

MANIFEST_NAME = "checkpoint.manifest.json"
PARAMS_NAME = "checkpoint.params.bin"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = field(default_factory=tuple)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (fan_in, fan_out) in enumerate(self.layer_dims):
            shapes[f"layer{i}.weight"] = (fan_in, fan_out)
            shapes[f"layer{i}.bias"] = (fan_out,)
        return shapes


class ParamSet(Mapping[str, np.ndarray]):
    """Ordered, read-only collection of named parameter arrays."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            self._entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({inner})"

    def as_leaves(self, requires_grad: bool = True) -> dict[str, ad.Node]:
        return {k: ad.leaf(v, requires_grad) for k, v in self._entries.items()}

    def num_values(self) -> int:
        return sum(v.size for v in self._entries.values())

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        return list(self) == list(other) and all(
            np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self
        )


def init_params(arch: Architecture, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in ``(arch, seed)``."""
    rng = np.random.default_rng(seed)
    entries = {}
    for i, (fan_in, fan_out) in enumerate(arch.layer_dims):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        entries[f"layer{i}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        entries[f"layer{i}.bias"] = np.zeros(fan_out)
    return ParamSet(entries)


def zero_params(arch: Architecture) -> ParamSet:
    return ParamSet({k: np.zeros(s) for k, s in arch.param_shapes().items()})


def _layer_count(params: Mapping) -> int:
    return sum(1 for k in params if k.endswith(".weight"))


def logits(params: Mapping, x) -> ad.Node:
    """Raw last-layer output; ``params`` may hold arrays or graph nodes."""
    h = ad._lift(x)
    if h.ndim == 1:
        h = ad.reshape(h, (1, h.shape[0]))
    n_layers = _layer_count(params)
    w0 = params["layer0.weight"]
    in_dim = w0.shape[0]
    if h.shape[1] != in_dim:
        raise ShapeMismatchError(f"input has {h.shape[1]} features, model expects {in_dim}")
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, ad._lift(params[f"layer{i}.weight"])), ad._lift(params[f"layer{i}.bias"]))
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def evidence(params: Mapping, x) -> ad.Node:
    """Nonnegative evidence ``softplus(MLP(x))``, shape (batch, N)."""
    return ad.softplus(logits(params, x))


def predict_class(params: Mapping, x) -> np.ndarray:
    with ad.no_grad():
        e = evidence(params, x).value
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(e + 1.0, axis=1)


def save_checkpoint(params: Mapping[str, np.ndarray], directory: str | Path, arch: Architecture | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()]
    manifest = {"format": "float64-le", "entries": entries}
    if arch is not None:
        manifest["arch"] = {
            "input_dim": arch.input_dim,
            "hidden_dims": list(arch.hidden_dims),
            "num_classes": arch.num_classes,
            "activation": arch.activation,
        }
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (directory / PARAMS_NAME).write_bytes(blob)


def load_checkpoint(directory: str | Path, arch: Architecture | None = None) -> ParamSet:
    """Read a checkpoint; when ``arch`` is given every model tensor must match it.

    Extra entries (e.g. learned inner rates, prefixed ``inner_lr.``) are kept.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
        blob = (directory / PARAMS_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from None
    entries = manifest.get("entries", [])
    expected = 8 * sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    if len(blob) != expected:
        raise CheckpointError(
            f"byte-length mismatch: {PARAMS_NAME} has {len(blob)} bytes, manifest implies {expected}"
        )
    flat = np.frombuffer(blob, dtype="<f8")
    params, offset = {}, 0
    for e in entries:
        size = int(np.prod(e["shape"], dtype=np.int64))
        params[e["name"]] = flat[offset:offset + size].reshape(e["shape"]).astype(np.float64)
        offset += size
    if arch is not None:
        for name, shape in arch.param_shapes().items():
            if name not in params:
                raise CheckpointError(f"shape mismatch: checkpoint lacks {name}")
            if tuple(params[name].shape) != shape:
                raise CheckpointError(
                    f"shape mismatch: {name} is {tuple(params[name].shape)} in checkpoint, arch needs {shape}"
                )
        extra = [k for k in params if k not in arch.param_shapes() and not k.startswith("inner_lr.")]
        if extra:
            raise CheckpointError(f"shape mismatch: unexpected tensors {extra}")
    return ParamSet(params)
