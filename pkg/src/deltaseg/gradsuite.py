"""Gradient-check suites over every op, layer and attention module, plus the full model.

Each case builds its inputs in float64 and returns a scalar loss; suites
return ``(name, GradCheckReport)`` pairs.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .attention import AttentionGate, CoordAttModule, DDAModule, DeltaOperator, SEModule
from .gradcheck import GradCheckReport, grad_check
from .losses import LossWeights, deep_supervised_loss
from .network import ASPP, ModelConfig, build_model
from .nn import BatchNorm2d, Conv2d, DoubleConv, DSConv, Module, PReLU
from .tensor import Tensor, default_dtype

F64 = np.float64
Case = tuple[str, Callable[[], Tensor], list[Tensor], list[str]]


def _t(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=F64)


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    # random projection so every output entry reaches the scalar
    return rng.standard_normal(shape)


def _scalarize(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(out * w)


def _op_cases(rng: np.random.Generator) -> Iterator[Case]:
    a, b = _t(rng, 2, 3, 4), _t(rng, 3, 1)
    pos = Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True, dtype=F64)
    w3 = _probe(rng, (2, 3, 4))
    yield "add_broadcast", lambda: _scalarize(a + b[:, 0].reshape(1, 3, 1), w3), [a, b], ["a", "b"]
    yield "mul_div", lambda: _scalarize(a * b.reshape(1, 3, 1) / (1.5 + b.reshape(1, 3, 1) ** 2), w3), [a, b], ["a", "b"]
    w2 = _probe(rng, (2, 3))
    yield "exp_log_sqrt_pow", lambda: _scalarize(ops.log(pos) + ops.exp(pos) * ops.sqrt(pos) + pos ** 1.5, w2), [pos], ["x"]
    wt = _probe(rng, (4, 6))
    yield "sum_mean_reshape_transpose", lambda: ops.sum(
        ops.transpose(ops.reshape(a, (6, 4)), (1, 0)) * wt
    ) + ops.mean(ops.sum(a, axis=(0, 2), keepdims=True) ** 2), [a], ["x"]
    yield "getitem_concat_pad", lambda: ops.sum(
        ops.pad2d(ops.concat([a[:, 1:], a[:, :1] * 2.0], axis=1).reshape(1, 6, 2, 2), 1) ** 2
    ), [a], ["x"]
    x = _t(rng, 2, 3, 5, 5)
    wx = _probe(rng, (2, 3, 5, 5))
    slope = Tensor(np.array([0.25]), requires_grad=True, dtype=F64)
    yield "relu", lambda: _scalarize(ops.relu(x), wx), [x], ["x"]
    x6 = Tensor(rng.uniform(-2, 8, (2, 3, 5, 5)), requires_grad=True, dtype=F64)
    yield "relu6", lambda: _scalarize(ops.relu6(x6), wx), [x6], ["x"]
    yield "prelu", lambda: _scalarize(ops.prelu(x, slope), wx), [x, slope], ["x", "slope"]
    yield "sigmoid", lambda: _scalarize(ops.sigmoid(x), wx), [x], ["x"]
    yield "softmax", lambda: _scalarize(ops.softmax(x, axis=1), wx), [x], ["x"]
    yield "log_softmax", lambda: _scalarize(ops.log_softmax(x, axis=1), wx), [x], ["x"]
    yield "dropout_fixed_mask", lambda: _scalarize(
        ops.dropout(x, 0.5, np.random.default_rng(3), True), wx), [x], ["x"]

    for name, spec in [
        ("conv3x3", ops.ConvSpec(3, 4, 3, padding=1)),
        ("conv_stride2", ops.ConvSpec(3, 4, 3, stride=2, padding=1)),
        ("conv_dilated", ops.ConvSpec(3, 4, 3, padding=2, dilation=2)),
        ("conv_depthwise", ops.ConvSpec(3, 3, 3, padding=1, groups=3)),
        ("conv1x1", ops.ConvSpec(3, 5, 1)),
    ]:
        w = _t(rng, *spec.weight_shape, scale=0.5)
        bias = _t(rng, spec.out_channels)
        ho = spec.output_size(5)
        probe = _probe(rng, (2, spec.out_channels, ho, ho))
        yield name, (lambda w=w, bias=bias, spec=spec, probe=probe:
                     _scalarize(ops.conv2d(x, w, bias, spec), probe)), [x, w, bias], ["x", "weight", "bias"]
    tspec = ops.ConvSpec(3, 2, 2, stride=2, transposed=True)
    tw, tb = _t(rng, *tspec.weight_shape), _t(rng, 2)
    tprobe = _probe(rng, (2, 2, 10, 10))
    yield "conv_transpose", lambda: _scalarize(ops.conv2d(x, tw, tb, tspec), tprobe), [x, tw, tb], ["x", "weight", "bias"]

    xp = Tensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1, requires_grad=True, dtype=F64)
    wp = _probe(rng, (2, 3, 3, 3))
    yield "max_pool", lambda: _scalarize(ops.max_pool2d(xp, 2), wp), [xp], ["x"]
    yield "avg_pool", lambda: _scalarize(ops.avg_pool2d(xp, 2), wp), [xp], ["x"]
    wg = _probe(rng, (2, 3, 1, 1))
    yield "global_avg_pool", lambda: _scalarize(ops.global_avg_pool2d(xp), wg), [xp], ["x"]

    gamma, beta = _t(rng, 3), _t(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    yield "batch_norm_train", lambda: _scalarize(
        ops.batch_norm2d(x, gamma, beta, rm.copy(), rv.copy(), True, 1e-5, 0.1), wx), [x, gamma, beta], ["x", "gamma", "beta"]
    yield "batch_norm_eval", lambda: _scalarize(
        ops.batch_norm2d(x, gamma, beta, rm + 0.3, rv + 0.5, False, 1e-5, 0.1), wx), [x, gamma, beta], ["x", "gamma", "beta"]
    wr = _probe(rng, (2, 3, 8, 11))
    yield "resize_bilinear", lambda: _scalarize(ops.resize_bilinear(x, 8, 11), wr), [x], ["x"]
    v = _t(rng, 2, 4, 3, 3)
    wv = _probe(rng, (2, 4, 3, 3))
    yield "unit_direction", lambda: _scalarize(ops.unit_direction(v), wv), [v], ["v"]


def _module_case(name: str, module: Module, call: Callable[[Module], Tensor], inputs: list[Tensor],
                 input_names: list[str], probe_rng: np.random.Generator) -> Case:
    module.astype(F64)
    module.train()
    params = list(module.named_parameters())
    out_shape = call(module).shape
    probe = _probe(probe_rng, out_shape)
    f = lambda: _scalarize(call(module), probe)  # noqa: E731
    return name, f, inputs + [p for _, p in params], input_names + [n for n, _ in params]


def _module_cases(rng: np.random.Generator) -> Iterator[Case]:
    r = np.random.default_rng(7)
    x = _t(rng, 2, 8, 6, 6)
    yield _module_case("Conv2d", Conv2d(8, 4, 3, rng=r, padding=1), lambda m: m(x), [x], ["x"], rng)
    yield _module_case("BatchNorm2d", BatchNorm2d(8), lambda m: m(x), [x], ["x"], rng)
    yield _module_case("PReLU", PReLU(), lambda m: m(x), [x], ["x"], rng)
    yield _module_case("DSConv", DSConv(8, 8, rng=r, dilation=2), lambda m: m(x), [x], ["x"], rng)
    yield _module_case("DoubleConv+SE", DoubleConv(8, 8, rng=r, attention=lambda c: SEModule(c, rng=r)),
                       lambda m: m(x), [x], ["x"], rng)
    yield _module_case("SE", SEModule(8, rng=r), lambda m: m(x), [x], ["x"], rng)
    yield _module_case("CoordAtt", CoordAttModule(8, rng=r), lambda m: m(x), [x], ["x"], rng)
    yield _module_case("DeltaOperator", DeltaOperator(8, rng=r), lambda m: m(x), [x], ["x"], rng)
    g = _t(rng, 2, 8, 6, 6)
    g_half = _t(rng, 2, 8, 3, 3)
    yield _module_case("AttentionGate", AttentionGate(8, 8, rng=r), lambda m: m(x, g)[0], [x, g], ["x", "g"], rng)
    yield _module_case("AttentionGate_scale2", AttentionGate(8, 8, rng=r, scale=2),
                       lambda m: m(x, g_half)[0], [x, g_half], ["x", "g"], rng)
    adj = _t(rng, 2, 8, 12, 12)
    yield _module_case("DDA", DDAModule(8, 8, rng=r, adj_channels=8),
                       lambda m: m(x, adj, g), [x, adj, g], ["enc", "adj", "dec"], rng)
    xa = _t(rng, 2, 8, 4, 4)
    yield _module_case("ASPP", ASPP(8, (1, 2, 3), rng=r, dropout=0.0), lambda m: m(xa), [xa], ["x"], rng)


def _layer_type(model: Module) -> dict[str, str]:
    """Parameter path -> layer type label used to group the model-level subsample."""
    out = {}
    for mod_name, mod in model.named_modules():
        label = type(mod).__name__
        if isinstance(mod, Conv2d):
            s = mod.spec
            if s.transposed:
                label = "ConvTranspose2d"
            elif s.groups > 1:
                label = "DepthwiseConv2d"
            elif s.kernel == 1:
                label = "Conv1x1"
        for pname in mod._params:
            out[f"{mod_name}.{pname}" if mod_name else pname] = f"{label}.{pname}"
    return out


def model_suite(
    tol: float = 1e-3,
    per_type: int = 20,
    width_multiplier: float = 0.25,
    size: int = 32,
    variant: str = "full",
    seed: int = 0,
) -> list[tuple[str, GradCheckReport]]:
    """Full-network check in train mode (dropout disabled) on a per-layer-type parameter subsample."""
    cfg = ModelConfig(num_classes=3, input_size=(size, size), variant=variant,
                      width_multiplier=width_multiplier, aspp_dropout=0.0, seed=seed)
    model = build_model(cfg).astype(F64)
    model.train()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0, 1, (2, 3, size, size)), requires_grad=True, dtype=F64)
    target = rng.integers(0, cfg.num_classes, (2, size, size))
    lw = LossWeights()

    def f() -> Tensor:
        return deep_supervised_loss(model(x), target, lw)[0]

    types = _layer_type(model)
    groups: dict[str, list[tuple[str, Tensor]]] = defaultdict(list)
    for name, p in model.named_parameters():
        groups[types[name]].append((name, p))
    reports = []
    for label, members in sorted(groups.items()):
        pool = [(k, i) for k, (_, p) in enumerate(members) for i in range(p.size)]
        pick = rng.choice(len(pool), size=min(per_type, len(pool)), replace=False)
        entries: list[list[int]] = [[] for _ in members]
        for j in pick:
            k, i = pool[j]
            entries[k].append(i)
        keep = [k for k in range(len(members)) if entries[k]]
        rep = grad_check(f, [members[k][1] for k in keep], tol=tol,
                         names=[members[k][0] for k in keep], entries=[np.array(entries[k]) for k in keep])
        reports.append((f"model/{label}", rep))
    rep = grad_check(f, [x], tol=tol, names=["input"], max_entries=per_type, rng=rng)
    reports.append(("model/input", rep))
    return reports


def _run(cases: Iterator[Case], prefix: str, tol: float, max_entries: Optional[int]) -> list[tuple[str, GradCheckReport]]:
    out = []
    for name, f, inputs, names in cases:
        out.append((f"{prefix}/{name}", grad_check(f, inputs, tol=tol, names=names, max_entries=max_entries)))
    return out


def op_suite(tol: float = 1e-4, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    with default_dtype(F64):
        return _run(_op_cases(np.random.default_rng(seed)), "op", tol, None)


def module_suite(tol: float = 1e-4, seed: int = 0, max_entries: int = 64) -> list[tuple[str, GradCheckReport]]:
    with default_dtype(F64):
        return _run(_module_cases(np.random.default_rng(seed)), "module", tol, max_entries)


def run_all(module_tol: float = 1e-4, model_tol: float = 1e-3, include_model: bool = True) -> list[tuple[str, GradCheckReport]]:
    reports = op_suite(module_tol) + module_suite(module_tol)
    if include_model:
        with default_dtype(F64):
            reports += model_suite(model_tol)
    return reports


def format_reports(reports: list[tuple[str, GradCheckReport]]) -> str:
    lines = []
    for name, rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        lines.append(f"{status} {name}: worst rel err {rep.worst:.2e} (tol {rep.tol:g}, {sum(rep.checked)} entries)")
    return "\n".join(lines)
