"""Exact, analytic parameter accounting for CNN architecture descriptions.

Architectures are data, not code: JSON files with schema

    {"schema": 1, "name": str, "num_classes": int, "feature_dim": int,
     "layers": [ ... ]}

where each layer object carries a "type" key:

    conv        c_in, c_out, kh, kw, stride=1, groups=1, bias=false
    batchnorm   c
    fc          n_in, n_out, bias=true
    gap         (global average pooling, no fields)
    pool        kind ("max"|"avg"), k, stride
    activation  (no fields)
    residual    branch: [layers], shortcut: [layers] (empty = identity),
                combine: "add"|"concat" (default "add"),
                split_input: bool (default false)

"concat" residuals model split/concat units (ShuffleNet-style): the two sides
are concatenated instead of added, and with split_input the incoming channels
are divided evenly between the sides. Channel-shuffle permutations carry no
parameters and are omitted.

Counting rules (learnable values only; batchnorm running statistics are not
parameters):

    conv        (c_in/groups)*kh*kw*c_out  (+ c_out if bias)
    batchnorm   2*c
    fc          n_in*n_out                 (+ n_out if bias)
    residual    sum over branch + shortcut
    others      0

The headless transform rewrites a spec so global average pooling emits class
scores directly: the trailing fc is deleted and the last convolution stage is
narrowed to K output channels (its batchnorm too). When that convolution sits
inside an additive residual block, the block's shortcut must match: an
existing projection is narrowed to K, an identity shortcut is replaced by a
1x1 projection + batchnorm.
"""

import copy
import json
from dataclasses import dataclass, field

from .errors import DimensionError, SpecError, SpecParseError

SCHEMA_VERSION = 1


@dataclass
class Conv:
    c_in: int
    c_out: int
    kh: int
    kw: int
    stride: int = 1
    groups: int = 1
    bias: bool = False


@dataclass
class BatchNorm:
    c: int


@dataclass
class FC:
    n_in: int
    n_out: int
    bias: bool = True


@dataclass
class GlobalAvgPool:
    pass


@dataclass
class Pool:
    kind: str
    k: int
    stride: int


@dataclass
class Activation:
    pass


@dataclass
class Residual:
    branch: list
    shortcut: list = field(default_factory=list)
    combine: str = "add"
    split_input: bool = False


@dataclass
class ArchitectureSpec:
    name: str
    layers: list
    feature_dim: int
    num_classes: int


@dataclass
class AuditReport:
    total_params: int
    classifier_params: int
    feature_params: int
    classifier_fraction: float
    savings_vs_baseline: float | None = None


# ---------------------------------------------------------------------------
# counting


def count_layer_params(layer) -> int:
    """Learnable parameter count of a single layer entry."""
    match layer:
        case Conv():
            n = (layer.c_in // layer.groups) * layer.kh * layer.kw * layer.c_out
            return n + (layer.c_out if layer.bias else 0)
        case BatchNorm():
            return 2 * layer.c
        case FC():
            return layer.n_in * layer.n_out + (layer.n_out if layer.bias else 0)
        case Residual():
            return sum(count_layer_params(l) for l in layer.branch) + sum(
                count_layer_params(l) for l in layer.shortcut
            )
        case GlobalAvgPool() | Pool() | Activation():
            return 0
    raise SpecError(f"unknown layer type {type(layer).__name__}")


def flatten_layers(layers) -> list:
    """Depth-first layer list with residual branches and shortcuts inlined."""
    flat = []
    for layer in layers:
        if isinstance(layer, Residual):
            flat.extend(flatten_layers(layer.branch))
            flat.extend(flatten_layers(layer.shortcut))
        else:
            flat.append(layer)
    return flat


# ---------------------------------------------------------------------------
# validation


def _chain(layers, channels, where):
    """Walk a layer list checking channel consistency; returns output channels."""
    for idx, layer in enumerate(layers):
        at = f"{where}[{idx}]"
        if isinstance(layer, Conv):
            if layer.c_in % layer.groups or layer.c_out % layer.groups:
                raise SpecError(
                    f"{at}: conv channels {layer.c_in}->{layer.c_out} "
                    f"not divisible by groups={layer.groups}"
                )
            if channels is not None and layer.c_in != channels:
                raise SpecError(
                    f"{at}: conv c_in={layer.c_in} but incoming channels={channels}"
                )
            channels = layer.c_out
        elif isinstance(layer, BatchNorm):
            if channels is not None and layer.c != channels:
                raise SpecError(
                    f"{at}: batchnorm c={layer.c} but incoming channels={channels}"
                )
        elif isinstance(layer, FC):
            if channels is not None and layer.n_in != channels:
                raise SpecError(
                    f"{at}: fc n_in={layer.n_in} but incoming channels={channels}"
                )
            channels = layer.n_out
        elif isinstance(layer, Residual):
            if layer.combine not in ("add", "concat"):
                raise SpecError(f"{at}: combine must be 'add' or 'concat'")
            side_in = channels
            if layer.split_input:
                if channels is None or channels % 2:
                    raise SpecError(f"{at}: split_input needs an even channel count")
                side_in = channels // 2
            b_out = _chain(layer.branch, side_in, f"{at}.branch")
            s_out = _chain(layer.shortcut, side_in, f"{at}.shortcut")
            b_out = side_in if b_out is None else b_out
            s_out = side_in if s_out is None else s_out
            if layer.combine == "add":
                if b_out != s_out:
                    raise SpecError(
                        f"{at}: branch emits {b_out} channels, shortcut {s_out}"
                    )
                channels = b_out
            else:
                channels = (b_out or 0) + (s_out or 0)
        elif isinstance(layer, (GlobalAvgPool, Pool, Activation)):
            pass
        else:
            raise SpecError(f"{at}: unknown layer type {type(layer).__name__}")
    return channels


def _nested_gap(layers) -> bool:
    for layer in layers:
        if isinstance(layer, Residual):
            inner = flatten_layers(layer.branch) + flatten_layers(layer.shortcut)
            if any(isinstance(l, GlobalAvgPool) for l in inner):
                return True
    return False


def validate_spec(spec: ArchitectureSpec) -> None:
    """Check channel chaining, the single-GAP rule and the trailing-FC rule."""
    gaps = [i for i, l in enumerate(spec.layers) if isinstance(l, GlobalAvgPool)]
    if _nested_gap(spec.layers):
        raise SpecError("global average pooling must appear at the top level")
    if len(gaps) != 1:
        raise SpecError(f"expected exactly one gap layer, found {len(gaps)}")
    gi = gaps[0]
    tail = spec.layers[gi + 1 :]
    if len(tail) > 1 or (tail and not isinstance(tail[0], FC)):
        raise SpecError("after gap, only a single trailing fc is allowed")

    channels = _chain(spec.layers[: gi + 1], None, "layers")
    if channels != spec.feature_dim:
        raise SpecError(
            f"feature_dim={spec.feature_dim} but {channels} channels reach the gap"
        )
    if tail:
        fc = tail[0]
        if fc.n_in != spec.feature_dim:
            raise SpecError(f"layers[{gi + 1}]: fc n_in={fc.n_in} != feature_dim")
        if fc.n_out != spec.num_classes:
            raise SpecError(f"layers[{gi + 1}]: fc n_out={fc.n_out} != num_classes")


def count_total(spec: ArchitectureSpec) -> AuditReport:
    """Audit a validated spec: totals, classifier share, fraction."""
    validate_spec(spec)
    total = sum(count_layer_params(l) for l in spec.layers)
    classifier = count_layer_params(spec.layers[-1]) if isinstance(spec.layers[-1], FC) else 0
    if total <= 0:
        raise SpecError("architecture has no parameters")
    return AuditReport(
        total_params=total,
        classifier_params=classifier,
        feature_params=total - classifier,
        classifier_fraction=classifier / total,
    )


def savings(baseline: AuditReport, variant: AuditReport) -> float:
    """Fractional parameter reduction of variant relative to baseline."""
    if baseline.total_params <= 0:
        raise SpecError("baseline must have a positive parameter count")
    return (baseline.total_params - variant.total_params) / baseline.total_params


# ---------------------------------------------------------------------------
# transforms


def with_classes(spec: ArchitectureSpec, num_classes: int) -> ArchitectureSpec:
    """Retarget the trailing classifier to a different class count."""
    out = copy.deepcopy(spec)
    out.num_classes = num_classes
    if out.layers and isinstance(out.layers[-1], FC):
        out.layers[-1].n_out = num_classes
    validate_spec(out)
    return out


def _narrow_last_conv(layers, k: int, where: str) -> bool:
    """Set the last conv's width (and its batchnorm) to k; False if already k."""
    conv_idx = max(
        (i for i, l in enumerate(layers) if isinstance(l, Conv)), default=None
    )
    if conv_idx is None:
        raise SpecError(f"{where}: no convolution to narrow")
    conv = layers[conv_idx]
    if conv.c_out == k:
        return False
    if conv.groups != 1 and k % conv.groups:
        raise SpecError(f"{where}: narrowed width {k} not divisible by groups={conv.groups}")
    conv.c_out = k
    for nxt in layers[conv_idx + 1 :]:
        if isinstance(nxt, BatchNorm):
            nxt.c = k
            break
        if isinstance(nxt, (Conv, FC, Residual)):
            break
    return True


def headless_transform(spec: ArchitectureSpec, num_classes: int) -> ArchitectureSpec:
    """Narrow the final convolution stage to num_classes channels and drop the fc.

    Idempotent: transforming an already-headless spec with the same class
    count is an identity operation.
    """
    if num_classes > spec.feature_dim:
        raise DimensionError(
            f"cannot go headless with {num_classes} classes on "
            f"{spec.feature_dim} feature channels"
        )
    out = copy.deepcopy(spec)
    if out.layers and isinstance(out.layers[-1], FC):
        out.layers.pop()

    gi = next(i for i, l in enumerate(out.layers) if isinstance(l, GlobalAvgPool))
    for i in range(gi - 1, -1, -1):
        layer = out.layers[i]
        if isinstance(layer, Conv):
            _narrow_last_conv(out.layers[i : gi + 1], num_classes, f"layers[{i}]")
            break
        if isinstance(layer, Residual):
            if layer.combine != "add":
                raise SpecError(
                    f"layers[{i}]: headless transform inside a concat block "
                    "is not supported; end such networks with a plain convolution"
                )
            changed = _narrow_last_conv(layer.branch, num_classes, f"layers[{i}].branch")
            if changed:
                # shortcut must now emit num_classes channels too
                if layer.shortcut:
                    _narrow_last_conv(layer.shortcut, num_classes, f"layers[{i}].shortcut")
                else:
                    block_in = next(l.c_in for l in layer.branch if isinstance(l, Conv))
                    stride = 1
                    for l in layer.branch:
                        if isinstance(l, Conv):
                            stride *= l.stride
                    layer.shortcut = [
                        Conv(block_in, num_classes, 1, 1, stride=stride, groups=1, bias=False),
                        BatchNorm(num_classes),
                    ]
            break
        if isinstance(layer, (BatchNorm, Activation, Pool)):
            continue
        raise SpecError(f"layers[{i}]: unexpected {type(layer).__name__} before gap")
    else:
        raise SpecError("no convolution stage found before gap")

    out.feature_dim = num_classes
    out.num_classes = num_classes
    validate_spec(out)
    return out


# ---------------------------------------------------------------------------
# (de)serialization

_LAYER_FIELDS = {
    "conv": (Conv, ("c_in", "c_out", "kh", "kw"), ("stride", "groups", "bias")),
    "batchnorm": (BatchNorm, ("c",), ()),
    "fc": (FC, ("n_in", "n_out"), ("bias",)),
    "gap": (GlobalAvgPool, (), ()),
    "pool": (Pool, ("kind", "k", "stride"), ()),
    "activation": (Activation, (), ()),
}


def _layer_from_obj(obj, where):
    if not isinstance(obj, dict) or "type" not in obj:
        raise SpecParseError(f"{where}: layer object missing field 'type'")
    t = obj["type"]
    if t == "residual":
        branch = obj.get("branch")
        if branch is None:
            raise SpecParseError(f"{where}: residual missing field 'branch'")
        return Residual(
            branch=[_layer_from_obj(o, f"{where}.branch[{i}]") for i, o in enumerate(branch)],
            shortcut=[
                _layer_from_obj(o, f"{where}.shortcut[{i}]")
                for i, o in enumerate(obj.get("shortcut", []))
            ],
            combine=obj.get("combine", "add"),
            split_input=bool(obj.get("split_input", False)),
        )
    if t not in _LAYER_FIELDS:
        raise SpecParseError(f"{where}: unknown layer type {t!r}")
    cls, required, optional = _LAYER_FIELDS[t]
    kwargs = {}
    for name in required:
        if name not in obj:
            raise SpecParseError(f"{where}: {t} missing field {name!r}")
        kwargs[name] = obj[name]
    for name in optional:
        if name in obj:
            kwargs[name] = obj[name]
    return cls(**kwargs)


def _layer_to_obj(layer):
    if isinstance(layer, Residual):
        obj = {
            "type": "residual",
            "branch": [_layer_to_obj(l) for l in layer.branch],
            "shortcut": [_layer_to_obj(l) for l in layer.shortcut],
        }
        if layer.combine != "add":
            obj["combine"] = layer.combine
        if layer.split_input:
            obj["split_input"] = True
        return obj
    for t, (cls, required, optional) in _LAYER_FIELDS.items():
        if isinstance(layer, cls):
            obj = {"type": t}
            for name in required + optional:
                obj[name] = getattr(layer, name)
            return obj
    raise SpecError(f"unknown layer type {type(layer).__name__}")


def parse_spec(obj) -> ArchitectureSpec:
    """Build and validate an ArchitectureSpec from a decoded JSON object."""
    if not isinstance(obj, dict):
        raise SpecParseError("top-level value must be an object")
    for name in ("schema", "name", "num_classes", "feature_dim", "layers"):
        if name not in obj:
            raise SpecParseError(f"missing field {name!r}")
    if obj["schema"] != SCHEMA_VERSION:
        raise SpecParseError(f"unsupported schema version {obj['schema']!r}")
    spec = ArchitectureSpec(
        name=obj["name"],
        layers=[_layer_from_obj(o, f"layers[{i}]") for i, o in enumerate(obj["layers"])],
        feature_dim=int(obj["feature_dim"]),
        num_classes=int(obj["num_classes"]),
    )
    validate_spec(spec)
    return spec


def load_spec(path) -> ArchitectureSpec:
    """Load and validate an architecture JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise SpecParseError(f"{path}: invalid JSON: {e}") from e
    return parse_spec(obj)


def save_spec(spec: ArchitectureSpec, path) -> None:
    validate_spec(spec)
    obj = {
        "schema": SCHEMA_VERSION,
        "name": spec.name,
        "num_classes": spec.num_classes,
        "feature_dim": spec.feature_dim,
        "layers": [_layer_to_obj(l) for l in spec.layers],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")
