"""Network description language: a line-based text format, its parser, and the shape validator.

One directive per line, `key=value` pairs, `#` comments:

    input name=data shape=3x32x32
    conv name=c1 in=data out_channels=8 kernel=3 stride=1 pad=1
    relu name=r1 in=c1
    maxpool name=p1 in=r1 kernel=2 stride=2
    gavgpool name=g in=p1
    fc name=head_make in=g out=48 head=make
    loss name=loss_make in=head_make label=make weight=1.0
    accuracy name=acc_make in=head_make label=make

Layers must be defined before they are referenced. conv and fc layers accept
`frozen=true`; fc layers accept `in_features=D` to pin their expected input
width. A category binding (which label categories feed which heads) is not
part of the text: it is attached separately with bind_categories.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .dataset import LabelCategories
from .errors import MhforgeError

KINDS = ("input", "conv", "relu", "maxpool", "gavgpool", "fc", "loss", "accuracy")

_NAME_RE = re.compile(r"[A-Za-z0-9_.+-]+\Z")
_INT_RE = re.compile(r"-?\d+\Z")
_SHAPE_RE = re.compile(r"(\d+)x(\d+)x(\d+)\Z")
_TOKEN_RE = re.compile(r"\S+")


class NetspecError(MhforgeError):
    """Base for parse and validation failures."""


class ParseError(NetspecError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None) -> None:
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f"line {line}"
            if col is not None:
                where += f", col {col}"
            where += ": "
        super().__init__(where + message)


class ValidationError(NetspecError):
    """A structurally parsed spec whose shapes or wiring do not add up."""


@dataclass(frozen=True)
class LayerSpec:
    """One directive. Fields that do not apply to the kind stay None."""

    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    kernel: int | None = None
    stride: int | None = None
    pad: int | None = None
    out_channels: int | None = None
    out_features: int | None = None
    in_features: int | None = None
    label_slot: str | None = None
    loss_weight: float | None = None
    frozen: bool = False
    head_tag: str | None = None


@dataclass(frozen=True)
class NetworkSpec:
    """An ordered, define-before-use layer list plus the input shape (C, H, W)."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    categories: LabelCategories | None = None

    def layer(self, name: str) -> LayerSpec:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise ValidationError(f"no layer named {name!r}")

    def heads(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "fc" and l.head_tag is not None)

    def losses(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "loss")

    def accuracies(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "accuracy")

    def param_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind in ("conv", "fc"))


# keys each kind accepts (beyond name), and which of those are required
_KIND_KEYS = {
    "input": ({"shape"}, {"shape"}),
    "conv": ({"in", "out_channels", "kernel", "stride", "pad", "frozen"}, {"in", "out_channels", "kernel"}),
    "relu": ({"in"}, {"in"}),
    "maxpool": ({"in", "kernel", "stride"}, {"in", "kernel"}),
    "gavgpool": ({"in"}, {"in"}),
    "fc": ({"in", "out", "head", "in_features", "frozen"}, {"in", "out"}),
    "loss": ({"in", "label", "weight"}, {"in", "label"}),
    "accuracy": ({"in", "label"}, {"in", "label"}),
}

_MIN_INT = {"kernel": 1, "stride": 1, "pad": 0, "out_channels": 1, "out": 1, "in_features": 1}


def _parse_int(key: str, value: str, lineno: int, col: int) -> int:
    if not _INT_RE.match(value):
        raise ParseError(f"{key} must be an integer, got {value!r}", lineno, col)
    n = int(value)
    if n < _MIN_INT[key]:
        raise ParseError(f"{key} must be >= {_MIN_INT[key]}, got {n}", lineno, col)
    return n


def _parse_name(key: str, value: str, lineno: int, col: int) -> str:
    if not _NAME_RE.match(value):
        raise ParseError(f"{key} must be a name of [A-Za-z0-9_.+-], got {value!r}", lineno, col)
    return value


def parse_netspec(text: str) -> NetworkSpec:
    """Parses the line grammar. Every malformed line raises with its line number."""
    layers: list[LayerSpec] = []
    seen: dict[str, str] = {}
    input_shape: tuple[int, int, int] | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        tokens = list(_TOKEN_RE.finditer(line))
        if not tokens:
            continue
        kind = tokens[0].group()
        if kind not in KINDS:
            raise ParseError(f"unknown kind {kind!r}, expected one of {', '.join(KINDS)}", lineno, tokens[0].start() + 1)
        allowed, required = _KIND_KEYS[kind]

        fields: dict[str, object] = {}
        for tok in tokens[1:]:
            col = tok.start() + 1
            piece = tok.group()
            if "=" not in piece:
                raise ParseError(f"expected key=value, got {piece!r}", lineno, col)
            key, _, value = piece.partition("=")
            if key != "name" and key not in allowed:
                raise ParseError(
                    f"{kind} does not take {key!r} (allowed: name, {', '.join(sorted(allowed))})", lineno, col
                )
            if key in fields or (key == "name" and "name" in fields):
                raise ParseError(f"duplicate key {key!r}", lineno, col)
            if not value:
                raise ParseError(f"empty value for {key!r}", lineno, col)

            if key in ("name", "in", "head", "label"):
                fields[key] = _parse_name(key, value, lineno, col)
            elif key in _MIN_INT:
                fields[key] = _parse_int(key, value, lineno, col)
            elif key == "shape":
                m = _SHAPE_RE.match(value)
                if not m:
                    raise ParseError(f"shape must be CxHxW of positive integers, got {value!r}", lineno, col)
                dims = tuple(int(d) for d in m.groups())
                if min(dims) < 1:
                    raise ParseError(f"shape dims must be >= 1, got {value!r}", lineno, col)
                fields[key] = dims
            elif key == "weight":
                try:
                    w = float(value)
                except ValueError:
                    raise ParseError(f"weight must be a number, got {value!r}", lineno, col) from None
                if not (w > 0) or w != w or w == float("inf"):
                    raise ParseError(f"weight must be a finite positive number, got {value!r}", lineno, col)
                fields[key] = w
            elif key == "frozen":
                if value not in ("true", "false"):
                    raise ParseError(f"frozen must be true or false, got {value!r}", lineno, col)
                fields[key] = value == "true"
            else:
                raise ParseError(f"unhandled key {key!r}", lineno, col)

        if "name" not in fields:
            raise ParseError(f"{kind} directive needs name=", lineno, tokens[0].start() + 1)
        name = fields["name"]
        if name in seen:
            raise ParseError(f"duplicate name {name!r} (already a {seen[name]} layer)", lineno)
        missing = sorted(required - set(fields))
        if missing:
            raise ParseError(f"{kind} {name!r} is missing {', '.join(k + '=' for k in missing)}", lineno)

        if kind == "input":
            if input_shape is not None:
                raise ParseError("second input layer; exactly one is allowed", lineno)
            input_shape = fields["shape"]  # type: ignore[assignment]
            layers.append(LayerSpec(name=name, kind="input"))
        else:
            src = fields["in"]
            if src not in seen:
                raise ParseError(f"{name!r} references undefined layer {src!r}", lineno)
            stride = None
            if kind == "conv":
                stride = fields.get("stride", 1)
            elif kind == "maxpool":
                stride = fields.get("stride", fields["kernel"])  # unstated pool stride = window size
            layers.append(
                LayerSpec(
                    name=name,
                    kind=kind,
                    inputs=(src,),
                    kernel=fields.get("kernel"),
                    stride=stride,
                    pad=fields.get("pad", 0) if kind == "conv" else None,
                    out_channels=fields.get("out_channels"),
                    out_features=fields.get("out"),
                    in_features=fields.get("in_features"),
                    label_slot=fields.get("label"),
                    loss_weight=fields.get("weight", 1.0) if kind == "loss" else None,
                    frozen=bool(fields.get("frozen", False)),
                    head_tag=fields.get("head"),
                )
            )
        seen[name] = kind

    if input_shape is None:
        raise ParseError("no input layer")
    return NetworkSpec(tuple(layers), input_shape)


def serialize_netspec(spec: NetworkSpec) -> str:
    """Canonical text form; parse_netspec(serialize_netspec(s)) is structurally equal to s."""
    lines = []
    for lay in spec.layers:
        if lay.kind == "input":
            c, h, w = spec.input_shape
            lines.append(f"input name={lay.name} shape={c}x{h}x{w}")
            continue
        parts = [lay.kind, f"name={lay.name}", f"in={lay.inputs[0]}"]
        if lay.kind == "conv":
            parts += [f"out_channels={lay.out_channels}", f"kernel={lay.kernel}", f"stride={lay.stride}", f"pad={lay.pad}"]
        elif lay.kind == "maxpool":
            parts += [f"kernel={lay.kernel}", f"stride={lay.stride}"]
        elif lay.kind == "fc":
            parts.append(f"out={lay.out_features}")
            if lay.in_features is not None:
                parts.append(f"in_features={lay.in_features}")
            if lay.head_tag is not None:
                parts.append(f"head={lay.head_tag}")
        elif lay.kind == "loss":
            parts += [f"label={lay.label_slot}", f"weight={lay.loss_weight}"]
        elif lay.kind == "accuracy":
            parts.append(f"label={lay.label_slot}")
        if lay.frozen:
            parts.append("frozen=true")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def validate_shapes(spec: NetworkSpec) -> dict[str, tuple[int, int, int]]:
    """Propagates (C, H, W) shapes through the graph and checks all wiring rules.

    Returns a map for every tensor-producing layer; loss and accuracy layers
    are metric sinks and have no entry.
    """
    shapes: dict[str, tuple[int, int, int]] = {}
    kinds = {l.name: l.kind for l in spec.layers}

    def src_shape(lay: LayerSpec) -> tuple[int, int, int]:
        src = lay.inputs[0]
        if kinds[src] in ("loss", "accuracy"):
            raise ValidationError(f"layer {lay.name}: input {src!r} is a {kinds[src]} layer and produces no tensor")
        return shapes[src]

    for lay in spec.layers:
        if lay.kind == "input":
            shapes[lay.name] = spec.input_shape
        elif lay.kind == "conv":
            c, h, w = src_shape(lay)
            k, s, p = lay.kernel, lay.stride, lay.pad
            ho = (h + 2 * p - k) // s + 1
            wo = (w + 2 * p - k) // s + 1
            if ho < 1 or wo < 1:
                raise ValidationError(
                    f"layer {lay.name}: conv output ({h}+2*{p}-{k})//{s}+1 = {ho} by "
                    f"({w}+2*{p}-{k})//{s}+1 = {wo} must be >= 1"
                )
            shapes[lay.name] = (lay.out_channels, ho, wo)
        elif lay.kind == "relu":
            shapes[lay.name] = src_shape(lay)
        elif lay.kind == "maxpool":
            c, h, w = src_shape(lay)
            k, s = lay.kernel, lay.stride
            if k > h or k > w:
                raise ValidationError(f"layer {lay.name}: pool window {k} exceeds input {h}x{w}")
            shapes[lay.name] = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif lay.kind == "gavgpool":
            c, h, w = src_shape(lay)
            shapes[lay.name] = (c, 1, 1)
        elif lay.kind == "fc":
            c, h, w = src_shape(lay)
            d = c * h * w
            if lay.in_features is not None and lay.in_features != d:
                raise ValidationError(f"layer {lay.name}: fc expected input dim {lay.in_features}, found {d}")
            shapes[lay.name] = (lay.out_features, 1, 1)
        elif lay.kind in ("loss", "accuracy"):
            src = lay.inputs[0]
            if kinds[src] != "fc":
                raise ValidationError(f"layer {lay.name}: {lay.kind} must consume an fc layer, not {kinds[src]}")
            head = spec.layer(src)
            if head.head_tag is None:
                raise ValidationError(f"layer {lay.name}: fc {src!r} has no head= tag")
            if head.head_tag != lay.label_slot:
                raise ValidationError(
                    f"layer {lay.name}: label {lay.label_slot!r} does not match head tag {head.head_tag!r} of {src!r}"
                )

    loss_pairs = [(l.inputs[0], l.label_slot) for l in spec.losses()]
    acc_pairs = [(l.inputs[0], l.label_slot) for l in spec.accuracies()]
    if len(set(loss_pairs)) != len(loss_pairs):
        raise ValidationError("two loss layers share the same head and label slot")
    if len(set(acc_pairs)) != len(acc_pairs):
        raise ValidationError("two accuracy layers share the same head and label slot")
    if set(loss_pairs) != set(acc_pairs):
        raise ValidationError("every loss layer needs exactly one accuracy layer over the same head and label")

    if spec.categories is not None:
        cats = spec.categories
        heads = spec.heads()
        tags = [h.head_tag for h in heads]
        if sorted(tags) != sorted(cats.names):
            raise ValidationError(f"head tags {sorted(tags)} do not match bound categories {sorted(cats.names)}")
        if len(spec.losses()) != cats.n:
            raise ValidationError(f"{len(spec.losses())} loss layers for {cats.n} bound categories")
        for head in heads:
            m = cats.class_counts[cats.index(head.head_tag)]
            if head.out_features != m:
                raise ValidationError(
                    f"head {head.name}: out={head.out_features} but category {head.head_tag} has {m} classes"
                )
    return shapes


def bind_categories(spec: NetworkSpec, categories: LabelCategories) -> NetworkSpec:
    """Attaches the label categories the spec's heads refer to.

    Categories not named by any head are dropped; the kept ones stay in the
    order `categories` lists them, which fixes the label-column order.
    """
    tags = [h.head_tag for h in spec.heads()]
    if not tags:
        raise ValidationError("spec has no head fc layers to bind categories to")
    bound = replace(spec, categories=categories.subset(tags))
    validate_shapes(bound)
    return bound
