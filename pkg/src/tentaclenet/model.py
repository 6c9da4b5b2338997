"""Network specs, the TentacleNet builder, Hadamard init and footprint accounting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitcore import words_per_row
from .layers import BatchNormParams, BinaryConvLayer, FPLayer, Threshold, fused_threshold

HEAD_KINDS = ("global_pool", "dense")
_SHARED_KEY = 0x5EED


@dataclass
class NetworkSpec:
    """Ordered description of a baseline feed-forward CNN.

    ``layers[0]`` is the full-precision first conv, ``layers[1:-1]`` are the
    inner convs that become a tentacle, ``layers[-1]`` is the classifier stage:
    ``{"kind": "globalpool"}`` (logits come from global pooling, so the last
    inner conv must have ``classes`` channels) or ``{"kind": "dense", "out": C}``.
    Conv entries take ``out``, ``kernel`` and optional ``stride``, ``pad``,
    ``pool`` (max-pool window applied after the activation).
    """

    input_shape: tuple[int, int, int]
    classes: int
    head_kind: str
    layers: list[dict]
    name: str = "unnamed"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        self.validate()

    @property
    def m(self) -> int:
        return len(self.layers)

    @property
    def inner(self) -> list[dict]:
        return self.layers[1:-1]

    def validate(self) -> None:
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.m < 3:
            raise ValueError("no inner layers to binarize")
        for i, layer in enumerate(self.layers[:-1]):
            if layer.get("kind") != "conv":
                raise ValueError(f"layer {i} must be a conv, got {layer.get('kind')!r}")
            unknown = set(layer) - {"kind", "out", "kernel", "stride", "pad", "pool"}
            if unknown:
                raise ValueError(f"layer {i}: unknown keys {sorted(unknown)}")
        last = self.layers[-1]
        if self.head_kind == "global_pool":
            if last.get("kind") != "globalpool":
                raise ValueError("global_pool head needs a final 'globalpool' stage")
            if self.inner[-1]["out"] != self.classes:
                raise ValueError("last inner conv must produce one channel per class")
        else:
            if last.get("kind") != "dense" or last.get("out") != self.classes:
                raise ValueError("dense head needs a final dense layer with 'out' = classes")
        self.shapes()

    def shapes(self) -> list[tuple[int, int, int]]:
        """Output shape (C, H, W) after each conv layer, pooling included."""
        c, h, w = self.input_shape
        out = []
        for i, layer in enumerate(self.layers[:-1]):
            k = layer["kernel"]
            s, p, pool = layer.get("stride", 1), layer.get("pad", 0), layer.get("pool", 0)
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            if pool:
                h, w = h // pool, w // pool
            if h <= 0 or w <= 0:
                raise ValueError(f"layer {i} produces an empty feature map")
            c = layer["out"]
            out.append((c, h, w))
        return out

    @property
    def features(self) -> int:
        """Per-tentacle feature count fed to the fully-connected block."""
        if self.head_kind == "global_pool":
            return self.classes
        c, h, w = self.shapes()[-1]
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "head_kind": self.head_kind,
            "layers": self.layers,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        unknown = set(d) - {"name", "input_shape", "classes", "head_kind", "layers"}
        if unknown:
            raise ValueError(f"unknown spec keys {sorted(unknown)}")
        return cls(d["input_shape"], d["classes"], d["head_kind"], d["layers"], d.get("name", "unnamed"))

    @classmethod
    def load(cls, path) -> NetworkSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SharedBlock:
    """Full-precision CONV -> Norm -> ACT shared by every tentacle."""

    conv: FPLayer
    bn: BatchNormParams
    pool: int = 0
    threshold: Threshold | None = None


@dataclass
class TentacleNetModel:
    spec: NetworkSpec
    n: int
    shared: SharedBlock
    tentacles: list[list[BinaryConvLayer]]
    fc: FPLayer
    seeds: list[int]
    master_seed: int
    binary: bool = True
    metadata: dict = field(default_factory=dict)
    finalized: bool = False

    @property
    def fc_inputs(self) -> int:
        return self.fc.weight.shape[1]

    @property
    def fc_weight_count(self) -> int:
        return int(self.fc.weight.size)

    def finalize(self) -> TentacleNetModel:
        """Pack binary weights, freeze alpha and fused thresholds."""
        if self.binary:
            self.shared.threshold = fused_threshold(self.shared.bn)
            for tentacle in self.tentacles:
                for layer in tentacle:
                    layer.finalize()
        self.finalized = True
        return self


def derive_seed(master_seed: int, key: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(key)]).generate_state(1)[0])


def sylvester(order: int) -> np.ndarray:
    """Sylvester Hadamard matrix of a power-of-two order, as int8 +-1."""
    if order < 1 or order & (order - 1):
        raise ValueError(f"order {order} is not a power of two")
    h = np.ones((1, 1), dtype=np.int8)
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


def pseudo_hadamard(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Sylvester matrix fitted to ``rows`` x ``cols``.

    The base order is the smallest power of two >= ``cols``; columns beyond
    ``cols`` are cut, then rows are randomly dropped (order kept) or randomly
    replicated and appended.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    order = 1
    while order < cols:
        order <<= 1
    base = sylvester(order)[:, :cols]
    if rows < order:
        keep = np.sort(rng.choice(order, size=rows, replace=False))
        return base[keep]
    if rows > order:
        extra = rng.choice(order, size=rows - order, replace=True)
        return np.concatenate([base, base[extra]])
    return base


def init_tentacle_weights(model: TentacleNetModel, seeds) -> None:
    """Pseudo-Hadamard master weights scaled by 1/sqrt(fan_in), one seed per tentacle.

    Each filter also gets a seeded sign, which keeps rows orthogonal while
    letting square layers differ between tentacles.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) != len(model.tentacles):
        raise ValueError(f"need {len(model.tentacles)} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValueError("tentacle seeds must be pairwise distinct")
    for seed, tentacle in zip(seeds, model.tentacles):
        rng = np.random.default_rng(seed)
        for layer in tentacle:
            h = pseudo_hadamard(layer.out_channels, layer.fan_in, rng).astype(np.float32)
            h *= rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=(layer.out_channels, 1))
            w = h / np.float32(np.sqrt(layer.fan_in))
            layer.master = w.reshape(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
    flat = [np.concatenate([l.master.ravel() for l in t]) for t in model.tentacles]
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            if np.array_equal(flat[i], flat[j]):
                raise ValueError(
                    f"tentacles {i} and {j} initialised identically; layer shapes too small "
                    "for distinct pseudo-Hadamard draws"
                )
    model.seeds = seeds


def build_tentaclenet(spec: NetworkSpec, n: int, master_seed: int = 0, binary: bool = True) -> TentacleNetModel:
    """Shared fp conv block, ``n`` replicas of the inner layers, shared fp dense block.

    With ``binary=False`` the same topology is built in full precision (ReLU
    activations), used as the FP32 reference.
    """
    if n < 1:
        raise ValueError("tentacle count must be >= 1")
    spec.validate()
    shapes = spec.shapes()
    cin = spec.input_shape[0]
    first = spec.layers[0]
    rng = np.random.default_rng(derive_seed(master_seed, _SHARED_KEY))
    k = first["kernel"]
    fan_in = cin * k * k
    w0 = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(first["out"], cin, k, k)).astype(np.float32)
    conv = FPLayer(
        "conv", w0, np.zeros(first["out"], np.float32), first.get("stride", 1), first.get("pad", 0)
    )
    shared = SharedBlock(conv, BatchNormParams.identity(first["out"]), first.get("pool", 0))

    tentacles = []
    for _ in range(n):
        stack = []
        prev = shapes[0][0]
        inner = spec.inner
        for li, d in enumerate(inner):
            last = li == len(inner) - 1
            stack.append(
                BinaryConvLayer(
                    in_channels=prev,
                    out_channels=d["out"],
                    kernel=d["kernel"],
                    stride=d.get("stride", 1),
                    pad=d.get("pad", 0),
                    pool=d.get("pool", 0),
                    binact=not last,
                    bn=BatchNormParams.identity(d["out"]),
                )
            )
            prev = d["out"]
        tentacles.append(stack)

    # head (a): n*C -> C; head (b): the baseline dense is dropped, n*K -> C
    fc_in = n * spec.features
    wfc = rng.normal(0.0, np.sqrt(1.0 / fc_in), size=(spec.classes, fc_in)).astype(np.float32)
    fc = FPLayer("dense", wfc, np.zeros(spec.classes, np.float32))

    model = TentacleNetModel(
        spec=spec,
        n=n,
        shared=shared,
        tentacles=tentacles,
        fc=fc,
        seeds=[],
        master_seed=int(master_seed),
        binary=binary,
    )
    seeds = [derive_seed(master_seed, i) for i in range(n)]
    init_tentacle_weights(model, seeds)
    if not binary:
        # fp reference: He-normal weights, same per-tentacle seeds
        for seed, tentacle in zip(seeds, model.tentacles):
            trng = np.random.default_rng(seed)
            for layer in tentacle:
                layer.master = trng.normal(
                    0.0, np.sqrt(2.0 / layer.fan_in), size=layer.master.shape
                ).astype(np.float32)
    model.metadata = {"master_seed": int(master_seed), "seeds": seeds, "spec_name": spec.name}
    return model


@dataclass
class FootprintReport:
    """Parameter storage in bytes, split by section and by layer.

    ``binary_bits`` is the raw count of binary weight bits before word
    alignment; ``total_bytes`` uses the serialized, word-aligned layout.
    """

    sections: dict[str, int]
    layers: list[tuple[str, dict[str, int]]]
    binary_bits: int = 0

    @property
    def total_bytes(self) -> int:
        return sum(self.sections.values())

    @property
    def kb(self) -> float:
        return self.total_bytes / 1024

    def format(self) -> str:
        # "weights" excludes per-channel normalization state (thresholds, batch-norm)
        lines = [f"{'layer':<28}{'bytes':>10}{'weights':>10}  detail"]
        for name, parts in self.layers:
            detail = " ".join(f"{k}={v}" for k, v in parts.items())
            core = sum(v for k, v in parts.items() if k in ("weights", "bias", "packed", "alpha"))
            lines.append(f"{name:<28}{sum(parts.values()):>10}{core:>10}  {detail}")
        lines.append("")
        for k, v in self.sections.items():
            lines.append(f"{k:<28}{v:>10}")
        lines.append(f"{'total':<28}{self.total_bytes:>10}  ({self.kb:.3f} kB)")
        lines.append(f"{'binary weight bits':<28}{self.binary_bits:>10}")
        return "\n".join(lines)


F32 = 4
_SECTIONS = ("shared_conv", "tentacle_binary", "alpha_threshold", "batchnorm", "fc")


def bn_bytes(bn: BatchNormParams) -> int:
    # mu, var, gamma, beta per channel plus eps
    return F32 * (4 * bn.channels + 1)


def threshold_bytes(channels: int) -> int:
    # c floats plus the packed flip-flag row
    return F32 * channels + 8 * words_per_row(channels)


def fp_layer_footprint(layer: FPLayer) -> dict[str, int]:
    parts = {}
    if layer.weight is not None:
        parts["weights"] = F32 * layer.weight.size
    if layer.bias is not None:
        parts["bias"] = F32 * layer.bias.size
    if layer.bn is not None:
        parts["batchnorm"] = bn_bytes(layer.bn)
    return parts


def binary_layer_footprint(layer: BinaryConvLayer) -> dict[str, int]:
    parts = {
        "packed": layer.out_channels * words_per_row(layer.fan_in) * 8,
        "alpha": F32 * layer.out_channels,
    }
    if layer.binact:
        parts["threshold"] = threshold_bytes(layer.out_channels)
    elif layer.bn is not None:
        parts["batchnorm"] = bn_bytes(layer.bn)
    return parts


def footprint(model) -> FootprintReport:
    """Storage of a TentacleNet model, or of an ensemble (anything with ``members``)."""
    if hasattr(model, "members"):
        reports = [footprint(m) for m in model.members]
        sections = {k: sum(r.sections[k] for r in reports) for k in _SECTIONS}
        layers = [
            (f"member{i}.{name}", parts) for i, r in enumerate(reports) for name, parts in r.layers
        ]
        return FootprintReport(sections, layers, sum(r.binary_bits for r in reports))

    sections = dict.fromkeys(_SECTIONS, 0)
    layers = []
    sh = model.shared
    conv = fp_layer_footprint(sh.conv)
    sections["shared_conv"] += sum(conv.values())
    if model.binary:
        conv["threshold"] = threshold_bytes(sh.conv.weight.shape[0])
        sections["alpha_threshold"] += conv["threshold"]
    else:
        conv["batchnorm"] = bn_bytes(sh.bn)
        sections["batchnorm"] += conv["batchnorm"]
    layers.append(("shared.conv", conv))

    bits = 0
    for ti, tentacle in enumerate(model.tentacles):
        for li, layer in enumerate(tentacle):
            if model.binary:
                parts = binary_layer_footprint(layer)
                bits += layer.out_channels * layer.fan_in
                sections["tentacle_binary"] += parts["packed"]
                sections["alpha_threshold"] += parts["alpha"] + parts.get("threshold", 0)
                sections["batchnorm"] += parts.get("batchnorm", 0)
            else:
                parts = {"weights": F32 * layer.out_channels * layer.fan_in, "batchnorm": bn_bytes(layer.bn)}
                sections["tentacle_binary"] += parts["weights"]
                sections["batchnorm"] += parts["batchnorm"]
            layers.append((f"tentacle{ti}.layer{li}", parts))

    fc = fp_layer_footprint(model.fc)
    sections["fc"] += sum(fc.values())
    layers.append(("fc", fc))
    return FootprintReport(sections, layers, bits)
