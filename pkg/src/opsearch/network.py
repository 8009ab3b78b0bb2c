"""Network specifications, searchable mixture layers and MAC/weight counting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .energy import EnergyTable, Mode, OperatorChoice
from .operators import (
    ConvGeometry,
    OperatorKind,
    conv_windows,
    correlate,
    fake_quantize,
    fold_conv_output,
)
from .tensor import (
    DEFAULT_STEEPNESS,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    avgpool2d,
    concat,
    global_avgpool,
    maxpool2d,
    mul,
    relu,
    reshape,
    softmax,
)

LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool", "avgpool", "global-avgpool", "concat", "flatten")
SEARCHABLE_KINDS = ("conv2d", "dense")
SATURATION = 40.0

_COMMON_KEYS = {"kind", "name", "input"}
_KIND_KEYS = {
    "conv2d": {"out_channels", "kernel", "stride", "padding", "searchable", "pin"},
    "dense": {"out_features", "searchable", "pin"},
    "relu": set(),
    "maxpool": {"kernel", "stride"},
    "avgpool": {"kernel", "stride"},
    "global-avgpool": set(),
    "flatten": set(),
    "concat": {"inputs"},
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    input: str | None = None
    inputs: tuple[str, ...] = ()
    out_channels: int = 0
    out_features: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int | str = 0
    searchable: bool = True
    pin: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind not in SEARCHABLE_KINDS and (self.pin is not None):
            raise ValueError(f"layer {self.name!r}: only conv2d/dense layers can be pinned")

    @property
    def is_searchable(self) -> bool:
        return self.kind in SEARCHABLE_KINDS

    def pad_amount(self) -> int:
        if self.padding == "same":
            if self.stride != 1:
                raise ValueError(f"layer {self.name!r}: 'same' padding needs stride 1")
            return (self.kernel - 1) // 2
        if self.padding == "valid":
            return 0
        return int(self.padding)

    def geometry(self) -> ConvGeometry:
        return ConvGeometry((self.kernel, self.kernel), self.stride, self.pad_amount())

    def output_shape(self, in_shapes: Sequence[tuple[int, ...]]) -> tuple[int, ...]:
        if self.kind == "concat":
            first = in_shapes[0]
            for s in in_shapes[1:]:
                if len(s) != len(first) or s[1:] != first[1:]:
                    raise ShapeError(f"concat {self.name!r}: incompatible shapes {list(in_shapes)}")
            return (sum(s[0] for s in in_shapes),) + tuple(first[1:])
        (shape,) = in_shapes
        if self.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d {self.name!r} needs a [C, H, W] input, got {shape}")
            c, h, w = shape
            pad = self.pad_amount()
            oh = (h + 2 * pad - self.kernel) // self.stride + 1
            ow = (w + 2 * pad - self.kernel) // self.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"conv2d {self.name!r}: kernel {self.kernel} does not fit {h}x{w}")
            return (self.out_channels, oh, ow)
        if self.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense {self.name!r} needs a flat input, got {shape}")
            return (self.out_features,)
        if self.kind in ("maxpool", "avgpool"):
            if len(shape) != 3:
                raise ShapeError(f"{self.kind} {self.name!r} needs a [C, H, W] input, got {shape}")
            c, h, w = shape
            s = self.stride or self.kernel
            oh, ow = (h - self.kernel) // s + 1, (w - self.kernel) // s + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"{self.kind} {self.name!r}: window {self.kernel} does not fit {h}x{w}")
            return (c, oh, ow)
        if self.kind == "global-avgpool":
            if len(shape) != 3:
                raise ShapeError(f"global-avgpool {self.name!r} needs a [C, H, W] input, got {shape}")
            return (shape[0],)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        return tuple(shape)


def count_macs(layer: LayerSpec, input_shape: Sequence[int]) -> int:
    """Multiply-accumulate count of a conv2d/dense layer for one sample."""
    if not layer.is_searchable:
        raise ValueError(f"{layer.kind} layer {layer.name!r} has no MAC count")
    if layer.kind == "dense":
        return int(input_shape[0]) * layer.out_features
    oc, oh, ow = layer.output_shape([tuple(input_shape)])
    return oh * ow * oc * layer.kernel * layer.kernel * int(input_shape[0])


def count_weights(layer: LayerSpec, input_shape: Sequence[int]) -> int:
    """Weight count of a conv2d/dense layer, biases excluded."""
    if not layer.is_searchable:
        raise ValueError(f"{layer.kind} layer {layer.name!r} has no weights")
    if layer.kind == "dense":
        return int(input_shape[0]) * layer.out_features
    return layer.kernel * layer.kernel * int(input_shape[0]) * layer.out_channels


@dataclass
class NetworkSpec:
    input_shape: tuple[int, ...]
    classes: int
    layers: list[LayerSpec]
    name: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        named = []
        for i, layer in enumerate(self.layers):
            if not layer.name:
                layer = replace(layer, name=f"{layer.kind}{i}")
            named.append(layer)
        self.layers = named
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self._shapes = self._infer_shapes()
        if self._shapes[self.layers[-1].name] != (self.classes,):
            raise ShapeError(
                f"network output shape {self._shapes[self.layers[-1].name]} does not match {self.classes} classes"
            )

    def sources(self, index: int) -> list[str | None]:
        """Names feeding layer ``index``; ``None`` is the network input."""
        layer = self.layers[index]
        if layer.kind == "concat":
            if len(layer.inputs) < 2:
                raise ValueError(f"concat {layer.name!r} needs at least two inputs")
            return list(layer.inputs)
        if layer.input is not None:
            return [layer.input]
        return [self.layers[index - 1].name if index > 0 else None]

    def _infer_shapes(self) -> dict[str | None, tuple[int, ...]]:
        shapes: dict[str | None, tuple[int, ...]] = {None: self.input_shape}
        for i, layer in enumerate(self.layers):
            srcs = self.sources(i)
            for s in srcs:
                if s not in shapes:
                    raise ValueError(f"layer {layer.name!r} references unknown or later layer {s!r}")
            shapes[layer.name] = layer.output_shape([shapes[s] for s in srcs])
        return shapes

    def shape_of(self, name: str | None) -> tuple[int, ...]:
        return self._shapes[name]

    def input_shape_of(self, index: int) -> tuple[int, ...]:
        return self._shapes[self.sources(index)[0]]

    @property
    def searchable(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.is_searchable]

    @property
    def searchable_names(self) -> list[str]:
        return [self.layers[i].name for i in self.searchable]

    def mac_counts(self) -> list[int]:
        return [count_macs(self.layers[i], self.input_shape_of(i)) for i in self.searchable]

    def weight_counts(self) -> list[int]:
        return [count_weights(self.layers[i], self.input_shape_of(i)) for i in self.searchable]

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        out = []
        defaults = LayerSpec(kind="relu")
        allowed = {k: _COMMON_KEYS | v for k, v in _KIND_KEYS.items()}
        for layer in self.layers:
            entry: dict = {"kind": layer.kind, "name": layer.name}
            for key in sorted(allowed[layer.kind] - {"kind", "name"}):
                value = getattr(layer, key)
                if key == "inputs":
                    entry[key] = list(value)
                elif key in ("searchable",) or value != getattr(defaults, key):
                    entry[key] = value
            out.append(entry)
        return {"name": self.name, "input_shape": list(self.input_shape), "classes": self.classes, "layers": out}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        top = {"name", "input_shape", "classes", "layers"}
        unknown = set(d) - top
        if unknown:
            raise ValueError(f"unknown network-spec key(s): {', '.join(sorted(unknown))}")
        missing = {"input_shape", "classes", "layers"} - set(d)
        if missing:
            raise ValueError(f"network spec is missing: {', '.join(sorted(missing))}")
        layers = []
        for pos, entry in enumerate(d["layers"]):
            if "kind" not in entry:
                raise ValueError(f"layer #{pos} has no 'kind'")
            kind = entry["kind"]
            if kind not in _KIND_KEYS:
                raise ValueError(f"layer #{pos}: unknown kind {kind!r}")
            bad = set(entry) - _COMMON_KEYS - _KIND_KEYS[kind]
            if bad:
                raise ValueError(f"layer #{pos} ({kind}): unknown key(s) {', '.join(sorted(bad))}")
            kwargs = dict(entry)
            if "inputs" in kwargs:
                kwargs["inputs"] = tuple(kwargs["inputs"])
            if kind in ("maxpool", "avgpool"):
                kwargs.setdefault("kernel", 2)
                kwargs.setdefault("stride", kwargs["kernel"])
            if kind not in SEARCHABLE_KINDS:
                kwargs["searchable"] = False
            layers.append(LayerSpec(**kwargs))
        return cls(tuple(d["input_shape"]), int(d["classes"]), layers, d.get("name", "custom"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "NetworkSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- presets


def mini_cnn(input_shape=(1, 8, 8), classes=3) -> NetworkSpec:
    layers = [
        LayerSpec("conv2d", "conv1", out_channels=4, kernel=3, padding="same"),
        LayerSpec("relu", "relu1", searchable=False),
        LayerSpec("maxpool", "pool1", kernel=2, stride=2, searchable=False),
        LayerSpec("conv2d", "conv2", out_channels=8, kernel=3, padding="same"),
        LayerSpec("relu", "relu2", searchable=False),
        LayerSpec("flatten", "flatten", searchable=False),
        LayerSpec("dense", "fc", out_features=classes),
    ]
    return NetworkSpec(input_shape, classes, layers, "mini-cnn")


def _fire(prefix: str, source: str, squeeze: int, expand: int) -> list[LayerSpec]:
    return [
        LayerSpec("conv2d", f"{prefix}_squeeze", input=source, out_channels=squeeze, kernel=1),
        LayerSpec("relu", f"{prefix}_squeeze_relu", searchable=False),
        LayerSpec("conv2d", f"{prefix}_expand1", input=f"{prefix}_squeeze_relu", out_channels=expand, kernel=1),
        LayerSpec("relu", f"{prefix}_expand1_relu", searchable=False),
        LayerSpec("conv2d", f"{prefix}_expand3", input=f"{prefix}_squeeze_relu", out_channels=expand, kernel=3, padding="same"),
        LayerSpec("relu", f"{prefix}_expand3_relu", searchable=False),
        LayerSpec("concat", f"{prefix}", inputs=(f"{prefix}_expand1_relu", f"{prefix}_expand3_relu"), searchable=False),
    ]


def mini_squeeze(input_shape=(1, 8, 8), classes=10, pin_first: bool = True) -> NetworkSpec:
    """Stem conv, three fire modules (1x1 squeeze, 1x1 + 3x3 expand, concat),
    global average pool and a dense classifier. The stem is pinned to the
    typical operator unless ``pin_first`` is false."""
    layers = [
        LayerSpec("conv2d", "conv1", out_channels=8, kernel=3, padding="same", pin="T" if pin_first else None),
        LayerSpec("relu", "conv1_relu", searchable=False),
    ]
    layers += _fire("fire1", "conv1_relu", 4, 8)
    layers.append(LayerSpec("maxpool", "pool1", input="fire1", kernel=2, stride=2, searchable=False))
    layers += _fire("fire2", "pool1", 4, 8)
    layers += _fire("fire3", "fire2", 8, 16)
    layers += [
        LayerSpec("global-avgpool", "gap", input="fire3", searchable=False),
        LayerSpec("dense", "fc", out_features=classes),
    ]
    return NetworkSpec(input_shape, classes, layers, "mini-squeeze")


def mini_mlp(input_shape=(2,), classes=2) -> NetworkSpec:
    layers = [
        LayerSpec("dense", "fc1", out_features=16),
        LayerSpec("relu", "relu1", searchable=False),
        LayerSpec("dense", "fc2", out_features=16),
        LayerSpec("relu", "relu2", searchable=False),
        LayerSpec("dense", "fc3", out_features=classes),
    ]
    if len(input_shape) != 1:
        layers.insert(0, LayerSpec("flatten", "flatten", searchable=False))
    return NetworkSpec(input_shape, classes, layers, "mini-mlp")


PRESETS = {"mini-cnn": mini_cnn, "mini-squeeze": mini_squeeze, "mini-mlp": mini_mlp}


def resolve_network(name_or_path: str, input_shape, classes: int) -> NetworkSpec:
    if name_or_path in PRESETS:
        return PRESETS[name_or_path](tuple(input_shape), classes)
    path = Path(name_or_path)
    if not path.exists():
        raise ValueError(f"--net: {name_or_path!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    spec = NetworkSpec.load(path)
    if spec.input_shape != tuple(input_shape) or spec.classes != classes:
        raise ValueError(
            f"network spec expects input {spec.input_shape} / {spec.classes} classes, "
            f"dataset has {tuple(input_shape)} / {classes}"
        )
    return spec


# ---------------------------------------------------------------- assignments


def argmax_assignment(alpha) -> int:
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    return int(np.argmax(a))


def _probs(alpha) -> np.ndarray:
    return softmax(as_tensor(np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha))).data


def sample_assignment(alpha, rng: np.random.Generator) -> int:
    p = _probs(alpha)
    return int(rng.choice(len(p), p=p))


def sample_assignments(alphas: Sequence, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` layer-wise draws from multinomial(softmax(alpha_i)) -> [n, layers] indices."""
    out = np.empty((n, len(alphas)), dtype=np.int64)
    for i, alpha in enumerate(alphas):
        p = _probs(alpha)
        out[:, i] = rng.choice(len(p), size=n, p=p)
    return out


def saturated_alpha(size: int, index: int) -> np.ndarray:
    a = np.full(size, -SATURATION)
    a[index] = SATURATION
    return a


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- runtime model


class MixtureLayer:
    """A conv2d/dense layer whose output blends every operator in its choice set.

    One weight tensor is shared by all operator paths; ``alpha`` holds one logit
    per choice. Choices that differ only in compute mode produce the same float
    output, so each distinct operator is evaluated once and weighted by the
    summed probability of its choices.
    """

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...], choices: Sequence[OperatorChoice], rng):
        self.spec = spec
        self.choices = list(choices)
        self.in_shape = in_shape
        if spec.kind == "conv2d":
            c = in_shape[0]
            k = spec.kernel
            shape = (spec.out_channels, c, k, k)
            fan_in, fan_out = c * k * k, spec.out_channels * k * k
            n_out = spec.out_channels
        else:
            shape = (in_shape[0], spec.out_features)
            fan_in, fan_out = in_shape[0], spec.out_features
            n_out = spec.out_features
        self.weight = Tensor(glorot_uniform(shape, fan_in, fan_out, rng), requires_grad=True, name=f"{spec.name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{spec.name}.bias")
        self.alpha = Tensor(np.zeros(len(self.choices)), requires_grad=True, name=f"{spec.name}.alpha")
        self.fixed: int | None = None
        self._groups: dict[OperatorKind, list[int]] = {}
        for j, c in enumerate(self.choices):
            self._groups.setdefault(c.operator, []).append(j)
        if spec.pin is not None:
            self.fix(self.choice_index(spec.pin))

    @property
    def name(self) -> str:
        return self.spec.name

    def choice_index(self, label: str) -> int:
        from .energy import parse_choice_label

        key = parse_choice_label(label)
        for j, c in enumerate(self.choices):
            if c.key == key:
                return j
        raise ValueError(f"layer {self.name!r}: choice {label!r} not in the choice set")

    def fix(self, index: int) -> None:
        """Freeze the layer to one choice with saturated one-hot logits."""
        self.fixed = int(index)
        self.alpha.data = saturated_alpha(len(self.choices), index)
        self.alpha.grad = None

    def unfix(self) -> None:
        self.fixed = None

    def _correlate(self, kind: OperatorKind, lhs: Tensor, wmat: Tensor, k: float) -> Tensor:
        return correlate(kind, lhs, wmat, k)

    def forward(self, x: Tensor, k: float = DEFAULT_STEEPNESS, choice: int | None = None, quant_bits: int | None = None) -> Tensor:
        """``choice`` selects a single operator; ``quant_bits`` fake-quantizes
        inputs and weights (inference only)."""
        if choice is None and self.fixed is not None:
            choice = self.fixed
        weight = self.weight
        if quant_bits is not None:
            if choice is None:
                raise ValueError("quantized inference needs a fixed operator choice")
            x = Tensor(fake_quantize(x.data, quant_bits))
            # binary weights are already 1-bit; re-quantizing could zero small ones and flip their sign
            if self.choices[choice].operator is not OperatorKind.BINARY:
                weight = Tensor(fake_quantize(weight.data, quant_bits))
        if self.spec.kind == "conv2d":
            lhs, wmat, (n, oh, ow) = conv_windows(x, weight, self.spec.geometry())
        else:
            if x.ndim != 2 or x.shape[1] != weight.shape[0]:
                raise ShapeError(f"dense {self.name!r}: input {x.shape} vs weights {weight.shape}")
            lhs, wmat = x, weight
        if choice is not None:
            y = self._correlate(self.choices[choice].operator, lhs, wmat, k)
        else:
            probs = softmax(self.alpha)
            y = None
            for kind, idx in self._groups.items():
                coeff = probs[idx[0]] if len(idx) == 1 else probs[np.array(idx)].sum()
                term = mul(self._correlate(kind, lhs, wmat, k), coeff)
                y = term if y is None else add(y, term)
        y = add(y, self.bias)
        if self.spec.kind == "conv2d":
            y = fold_conv_output(y, n, oh, ow)
        return y


class Network:
    """Executable model built from a :class:`NetworkSpec` and a choice set."""

    def __init__(self, spec: NetworkSpec, choices: Sequence[OperatorChoice], seed: int = 0, steepness: float = DEFAULT_STEEPNESS):
        self.spec = spec
        self.choices = list(choices)
        self.steepness = steepness
        rng = np.random.default_rng(seed)
        self.mixtures: dict[int, MixtureLayer] = {}
        for i in spec.searchable:
            self.mixtures[i] = MixtureLayer(spec.layers[i], spec.input_shape_of(i), self.choices, rng)

    @property
    def layers(self) -> list[MixtureLayer]:
        return [self.mixtures[i] for i in self.spec.searchable]

    @property
    def alphas(self) -> list[Tensor]:
        return [m.alpha for m in self.layers]

    @property
    def weights(self) -> list[Tensor]:
        out = []
        for m in self.layers:
            out += [m.weight, m.bias]
        return out

    def free_alphas(self) -> list[Tensor]:
        return [m.alpha for m in self.layers if m.fixed is None]

    def set_assignment(self, assignment: Sequence[int]) -> None:
        if len(assignment) != len(self.layers):
            raise ValueError(f"assignment has {len(assignment)} entries for {len(self.layers)} searchable layers")
        for m, j in zip(self.layers, assignment):
            m.fix(j)

    def assignment(self) -> list[int]:
        """Fixed choice where frozen, else the argmax of alpha (lowest index on ties)."""
        return [m.fixed if m.fixed is not None else argmax_assignment(m.alpha) for m in self.layers]

    def assignment_choices(self, assignment: Sequence[int] | None = None) -> list[OperatorChoice]:
        assignment = self.assignment() if assignment is None else assignment
        return [self.choices[j] for j in assignment]

    def forward(self, x, assignment: Sequence[int] | None = None, quantized: bool = False) -> Tensor:
        """Logits for a batch ``x`` of shape [N, *input_shape].

        With ``quantized`` every searchable layer runs at its assigned mode's
        bit width (8 digital, 4 CiM); this requires a complete assignment.
        """
        x = as_tensor(x)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"input batch shape {x.shape[1:]} does not match network input {self.spec.input_shape}")
        if quantized and assignment is None:
            if any(m.fixed is None for m in self.layers):
                raise ValueError("quantized evaluation needs a complete assignment")
            assignment = self.assignment()
        pos = {i: p for p, i in enumerate(self.spec.searchable)}
        values: dict[str | None, Tensor] = {None: x}
        n = x.shape[0]
        for i, layer in enumerate(self.spec.layers):
            srcs = [values[s] for s in self.spec.sources(i)]
            kind = layer.kind
            if kind in SEARCHABLE_KINDS:
                choice = None if assignment is None else int(assignment[pos[i]])
                bits = self.choices[choice].bits if quantized else None
                out = self.mixtures[i].forward(srcs[0], self.steepness, choice, bits)
            elif kind == "relu":
                out = relu(srcs[0])
            elif kind == "maxpool":
                out = maxpool2d(srcs[0], layer.kernel, layer.stride or layer.kernel)
            elif kind == "avgpool":
                out = avgpool2d(srcs[0], layer.kernel, layer.stride or layer.kernel)
            elif kind == "global-avgpool":
                out = global_avgpool(srcs[0])
            elif kind == "flatten":
                out = reshape(srcs[0], (n, -1))
            elif kind == "concat":
                out = concat(srcs, axis=1)
            else:  # pragma: no cover - guarded by LayerSpec
                raise ValueError(kind)
            values[layer.name] = out
        return values[self.spec.layers[-1].name]

    # -- parameter snapshots ------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.layers:
            for t in (m.weight, m.bias, m.alpha):
                out[t.name] = t.data.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for m in self.layers:
            for t in (m.weight, m.bias, m.alpha):
                if t.name not in state:
                    raise KeyError(f"state has no entry {t.name!r}")
                if state[t.name].shape != t.data.shape:
                    raise ShapeError(f"{t.name}: stored shape {state[t.name].shape} != {t.data.shape}")
                t.data = np.array(state[t.name], dtype=np.float64)
                t.grad = None

    def fixed_map(self) -> dict[int, int]:
        return {p: m.fixed for p, m in enumerate(self.layers) if m.fixed is not None}

    def reinitialize_weights(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for m in self.layers:
            fresh = MixtureLayer(replace(m.spec, pin=None), m.in_shape, self.choices, rng)
            m.weight.data = fresh.weight.data
            m.bias.data = fresh.bias.data
            m.weight.grad = m.bias.grad = None


def build_network(spec: NetworkSpec, mode: str = "digital", table: EnergyTable | None = None, seed: int = 0, steepness: float = DEFAULT_STEEPNESS) -> Network:
    table = table or EnergyTable.default()
    return Network(spec, table.choice_set(mode), seed=seed, steepness=steepness)
