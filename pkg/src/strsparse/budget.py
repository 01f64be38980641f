"""Parameter / nonzero / FLOPs accounting for layer-wise sparsity budgets.

Conventions: one multiply-add is one FLOP, batch-norm is not counted, and
biases do not exist.  A conv or fc layer costs ``output_h * output_w * params``
dense FLOPs and ``(100 - s) / 100`` of that at sparsity ``s`` percent.  The
final average pool costs one FLOP per input element and has no parameters.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import conv_output_size

KINDS = ("conv", "depthwise-conv", "fc", "avgpool")
BUDGET_HEADER = ["layer", "dense_params", "nonzeros", "sparsity_pct", "dense_flops", "sparse_flops"]


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    output_h: int = 1
    output_w: int = 1
    input_h: int = 1
    input_w: int = 1

    @property
    def params(self) -> int:
        if self.kind in ("conv", "depthwise-conv"):
            return self.kernel_h * self.kernel_w * (self.in_channels // self.groups) * self.out_channels
        if self.kind == "fc":
            return self.in_channels * self.out_channels
        if self.kind == "avgpool":
            return 0
        raise BudgetError(f"unknown layer kind {self.kind!r} for {self.name}")

    @property
    def has_params(self) -> bool:
        return self.kind != "avgpool"


def layer_flops_dense(spec: LayerSpec) -> int:
    if spec.kind in ("conv", "depthwise-conv", "fc"):
        return spec.output_h * spec.output_w * spec.params
    if spec.kind == "avgpool":
        return spec.input_h * spec.input_w * spec.in_channels
    raise BudgetError(f"unknown layer kind {spec.kind!r} for {spec.name}")


@dataclass
class Architecture:
    """Ordered layer specs plus the totals convention of the source table.

    ``pool_in_total`` says whether the final average pool's FLOPs are part of
    the overall total (the published ResNet50 table includes them, the
    MobileNetV1 table does not).  The backbone never includes the pool.
    """

    name: str
    layers: list
    pool_in_total: bool = True

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def param_layers(self):
        return [l for l in self.layers if l.has_params]

    def layer_names(self):
        return [l.name for l in self.layers]


def _conv(name, cin, cout, k, stride, padding, size, groups=1):
    out = conv_output_size(size, k, stride, padding)
    kind = "depthwise-conv" if groups > 1 and groups == cin else "conv"
    spec = LayerSpec(name, kind, cin, cout, k, k, stride, padding, groups, out, out, size, size)
    return spec, out


def arch_resnet50(num_classes: int = 1000, image_size: int = 224) -> Architecture:
    """torchvision ResNet50 (stride on the 3x3 conv of each bottleneck)."""
    layers = []
    spec, size = _conv("conv1", 3, 64, 7, 2, 3, image_size)
    layers.append(spec)
    size = conv_output_size(size, 3, 2, 1)  # max pool, no params
    cin = 64
    for stage, (width, blocks, stride) in enumerate([(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)], start=1):
        for b in range(blocks):
            s = stride if b == 0 else 1
            prefix = f"layer{stage}.{b}"
            c1, _ = _conv(f"{prefix}.conv1", cin, width, 1, 1, 0, size)
            c2, out = _conv(f"{prefix}.conv2", width, width, 3, s, 1, size)
            c3, _ = _conv(f"{prefix}.conv3", width, width * 4, 1, 1, 0, out)
            layers += [c1, c2, c3]
            if b == 0:
                ds, _ = _conv(f"{prefix}.downsample.0", cin, width * 4, 1, s, 0, size)
                layers.append(ds)
            cin, size = width * 4, out
    layers.append(LayerSpec("fc", "fc", cin, num_classes))
    layers.append(LayerSpec("avgpool", "avgpool", cin, cin, input_h=size, input_w=size))
    return Architecture("resnet50", layers, pool_in_total=True)


def arch_mobilenetv1(num_classes: int = 1000, image_size: int = 224) -> Architecture:
    layers = []
    spec, size = _conv("layer1", 3, 32, 3, 2, 1, image_size)
    layers.append(spec)
    plan = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)] + [(512, 1)] * 5 + [(1024, 2), (1024, 1)]
    cin = 32
    idx = 2
    for cout, stride in plan:
        dw, size = _conv(f"layer{idx}", cin, cin, 3, stride, 1, size, groups=cin)
        pw, _ = _conv(f"layer{idx + 1}", cin, cout, 1, 1, 0, size)
        layers += [dw, pw]
        idx += 2
        cin = cout
    layers.append(LayerSpec(f"layer{idx}", "fc", cin, num_classes))
    layers.append(LayerSpec("avgpool", "avgpool", cin, cin, input_h=size, input_w=size))
    return Architecture("mobilenetv1", layers, pool_in_total=False)


ARCHITECTURES = {"resnet50": arch_resnet50, "mobilenetv1": arch_mobilenetv1}


# -- reports --------------------------------------------------------------------------

@dataclass
class BudgetRow:
    layer: str
    kind: str
    dense_params: int
    nonzeros: float
    sparsity_pct: float
    dense_flops: int
    sparse_flops: float


@dataclass
class Totals:
    dense_params: int = 0
    nonzeros: float = 0.0
    dense_flops: int = 0
    sparse_flops: float = 0.0

    @property
    def sparsity_pct(self) -> float:
        if self.dense_params == 0:
            return 0.0
        return 100.0 * (1.0 - self.nonzeros / self.dense_params)

    def add(self, row: BudgetRow) -> None:
        self.dense_params += row.dense_params
        self.nonzeros += row.nonzeros
        self.dense_flops += row.dense_flops
        self.sparse_flops += row.sparse_flops


@dataclass
class BudgetReport:
    arch: str
    rows: list
    overall: Totals = field(default_factory=Totals)
    backbone: Totals = field(default_factory=Totals)

    def sparsities(self) -> list:
        return [r.sparsity_pct for r in self.rows]

    def row(self, name: str) -> BudgetRow:
        for r in self.rows:
            if r.layer == name:
                return r
        raise KeyError(name)

    def format_table(self) -> str:
        lines = [f"{'layer':<28}{'kind':<16}{'params':>12}{'nonzeros':>14}{'sparsity%':>11}{'FLOPs':>14}{'sparse FLOPs':>16}"]

        def fmt(label, kind, params, nnz, sp, fl, sfl):
            return f"{label:<28}{kind:<16}{params:>12d}{nnz:>14.0f}{sp:>11.2f}{fl:>14d}{sfl:>16.0f}"

        for t, label in ((self.overall, "Overall"), (self.backbone, "Backbone")):
            lines.append(fmt(label, "", t.dense_params, t.nonzeros, t.sparsity_pct, t.dense_flops, t.sparse_flops))
        for r in self.rows:
            lines.append(fmt(r.layer, r.kind, r.dense_params, r.nonzeros, r.sparsity_pct, r.dense_flops, r.sparse_flops))
        return "\n".join(lines)


def _as_arch(specs) -> Architecture:
    if isinstance(specs, Architecture):
        return specs
    return Architecture("custom", list(specs), pool_in_total=True)


def report(specs, sparsity_pcts=None, nonzeros=None) -> BudgetReport:
    """Per-layer and aggregate accounting.

    ``sparsity_pcts`` has one entry per layer in ``specs`` (pooling rows must be
    0).  ``nonzeros`` optionally supplies measured integer counts, in which case
    the percentages are derived from them.  Backbone = every parameter layer
    except the final fc.
    """
    arch = _as_arch(specs)
    n = len(arch.layers)
    if sparsity_pcts is None:
        sparsity_pcts = [0.0] * n
    sparsity_pcts = list(sparsity_pcts)
    if len(sparsity_pcts) != n:
        raise BudgetError(f"{len(sparsity_pcts)} sparsities given for {n} layers")
    if nonzeros is not None and len(nonzeros) != n:
        raise BudgetError(f"{len(nonzeros)} nonzero counts given for {n} layers")
    fc_names = [l.name for l in arch.layers if l.kind == "fc"]
    final_fc = fc_names[-1] if fc_names else None
    rep = BudgetReport(arch.name, [])
    for i, spec in enumerate(arch.layers):
        s = float(sparsity_pcts[i])
        if not 0.0 <= s <= 100.0:
            raise BudgetError(f"sparsity {s} for layer {spec.name} outside [0, 100]")
        params = spec.params
        if nonzeros is not None:
            nnz = float(nonzeros[i])
            s = 100.0 * (1.0 - nnz / params) if params else 0.0
        else:
            nnz = params * (100.0 - s) / 100.0
        if not spec.has_params and s != 0.0:
            raise BudgetError(f"layer {spec.name} has no parameters; sparsity must be 0")
        dense = layer_flops_dense(spec)
        row = BudgetRow(spec.name, spec.kind, params, nnz, s, dense, dense * (100.0 - s) / 100.0)
        rep.rows.append(row)
        if spec.has_params or arch.pool_in_total:
            rep.overall.add(row)
        if spec.has_params and spec.name != final_fc:
            rep.backbone.add(row)
    return rep


def report_from_model(model, input_shape=None) -> BudgetReport:
    """Accounting for a :class:`~strsparse.layers.Sequential` model using its measured sparse weights."""
    from .layers import ChannelPrune, Flatten, GlobalAvgPool, ReLU, StrConv, StrLinear

    shape = tuple(input_shape or model.input_shape or ())
    if not shape:
        raise BudgetError("input shape required to derive layer geometry")
    specs, nnz = [], []
    for layer in model.layers:
        base = layer.inner if isinstance(layer, ChannelPrune) else layer
        if isinstance(base, StrConv):
            c, h, w = shape
            out = base.output_shape(shape)
            kind = "depthwise-conv" if base.groups > 1 and base.groups == base.in_channels else "conv"
            specs.append(LayerSpec(layer.name, kind, base.in_channels, base.out_channels, base.kernel_size,
                                   base.kernel_size, base.stride, base.padding, base.groups, out[1], out[2], h, w))
            nnz.append(np.count_nonzero(layer.effective_weight()))
            shape = out
        elif isinstance(base, StrLinear):
            specs.append(LayerSpec(layer.name, "fc", base.in_features, base.out_features))
            nnz.append(np.count_nonzero(layer.effective_weight()))
            shape = (base.out_features,)
        elif isinstance(layer, GlobalAvgPool):
            c, h, w = shape
            specs.append(LayerSpec("avgpool", "avgpool", c, c, input_h=h, input_w=w))
            nnz.append(0)
            shape = (c,)
        elif isinstance(layer, (ReLU, Flatten)):
            shape = layer.output_shape(shape)
        else:
            raise BudgetError(f"layer {getattr(layer, 'name', layer)!r} of type {type(layer).__name__} has no accounting rule")
    return report(Architecture("model", specs, pool_in_total=True), nonzeros=nnz)


# -- budget CSV -------------------------------------------------------------------------

def export_budget(rep: BudgetReport, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BUDGET_HEADER)
    for r in rep.rows:
        w.writerow([r.layer, r.dense_params, repr(float(r.nonzeros)), repr(float(r.sparsity_pct)),
                    r.dense_flops, repr(float(r.sparse_flops))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def parse_budget(text: str, source: str = "<budget>") -> dict:
    """Layer name -> sparsity percent from budget CSV text."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise BudgetError(f"{source}: empty budget file")
    header = [h.strip() for h in rows[0]]
    if "layer" not in header or "sparsity_pct" not in header:
        raise BudgetError(f"{source}:1: header must contain 'layer' and 'sparsity_pct', got {header}")
    li, si = header.index("layer"), header.index("sparsity_pct")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise BudgetError(f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}")
        name = row[li].strip()
        try:
            s = float(row[si])
        except ValueError:
            raise BudgetError(f"{source}:{lineno}: sparsity_pct {row[si]!r} is not a number") from None
        if not 0.0 <= s <= 100.0:
            raise BudgetError(f"{source}:{lineno}: sparsity_pct {s} outside [0, 100]")
        if name in out:
            raise BudgetError(f"{source}:{lineno}: duplicate layer {name!r}")
        out[name] = s
    return out


def import_budget(path, layer_names=None):
    """Read a budget CSV.

    Without ``layer_names`` returns the ``{layer: sparsity}`` mapping; with it,
    returns the sparsity list in that order.  Parameter-free layers (pooling)
    may be omitted and default to 0.
    """
    text = Path(path).read_text()
    table = parse_budget(text, str(path))
    if layer_names is None:
        return table
    out = []
    for name in layer_names:
        if name in table:
            out.append(table[name])
        elif name == "avgpool":
            out.append(0.0)
        else:
            raise BudgetError(f"{path}: budget has no entry for layer {name!r}")
    return out


# -- user-defined architectures ----------------------------------------------------------

_INT_FIELDS = ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "padding", "groups",
               "output_h", "output_w", "input_h", "input_w")


def parse_arch_spec(text: str, source: str = "<spec>") -> Architecture:
    """Parse a layer-per-line ``key=value`` description.

    Keys are the :class:`LayerSpec` field names; ``name`` and ``kind`` are
    required.  For convolutions ``output_h/output_w`` are derived from
    ``input_h/input_w`` when omitted.  A line ``arch name=... pool_in_total=false``
    sets the architecture options.  ``#`` starts a comment.
    """
    layers = []
    arch_opts = {"name": "custom", "pool_in_total": True}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "arch":
            for tok in tokens[1:]:
                k, _, v = tok.partition("=")
                if k == "name":
                    arch_opts["name"] = v
                elif k == "pool_in_total":
                    arch_opts["pool_in_total"] = v.lower() in ("1", "true", "yes")
                else:
                    raise BudgetError(f"{source}:{lineno}: unknown arch option {k!r}")
            continue
        kv = {}
        for tok in tokens:
            k, sep, v = tok.partition("=")
            if not sep:
                raise BudgetError(f"{source}:{lineno}: expected key=value, got {tok!r}")
            kv[k] = v
        if "name" not in kv or "kind" not in kv:
            raise BudgetError(f"{source}:{lineno}: 'name' and 'kind' are required")
        if kv["kind"] not in KINDS:
            raise BudgetError(f"{source}:{lineno}: unknown kind {kv['kind']!r}")
        args = {"name": kv.pop("name"), "kind": kv.pop("kind")}
        for k, v in kv.items():
            if k not in _INT_FIELDS:
                raise BudgetError(f"{source}:{lineno}: unknown field {k!r}")
            try:
                args[k] = int(v)
            except ValueError:
                raise BudgetError(f"{source}:{lineno}: field {k} must be an integer, got {v!r}") from None
        if "in_channels" not in args or "out_channels" not in args:
            if args["kind"] == "avgpool" and "in_channels" in args:
                args["out_channels"] = args["in_channels"]
            else:
                raise BudgetError(f"{source}:{lineno}: in_channels and out_channels are required")
        spec = LayerSpec(**args)
        if spec.kind in ("conv", "depthwise-conv") and "output_h" not in args:
            spec = replace(spec,
                           output_h=conv_output_size(spec.input_h, spec.kernel_h, spec.stride, spec.padding),
                           output_w=conv_output_size(spec.input_w, spec.kernel_w, spec.stride, spec.padding))
        if spec.kind in ("conv", "depthwise-conv") and spec.in_channels % spec.groups:
            raise BudgetError(f"{source}:{lineno}: in_channels not divisible by groups")
        layers.append(spec)
    if not layers:
        raise BudgetError(f"{source}: no layers defined")
    return Architecture(arch_opts["name"], layers, arch_opts["pool_in_total"])


def load_arch(name_or_path: str) -> Architecture:
    if name_or_path in ARCHITECTURES:
        return ARCHITECTURES[name_or_path]()
    path = name_or_path[5:] if name_or_path.startswith("file:") else name_or_path
    p = Path(path)
    if not p.exists():
        raise BudgetError(f"unknown architecture {name_or_path!r} (expected resnet50, mobilenetv1 or file:<spec>)")
    return parse_arch_spec(p.read_text(), str(p))


def builtin_budget_path(name: str) -> Path:
    return Path(__file__).parent / "budgets" / f"{name}.csv"
