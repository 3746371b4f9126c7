"""Installation check: gradient checks on the primitives plus core invariants."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .data import generate_synthetic, smote_arrays
from .graph import FacialGraph, build_facial_adjacency
from .layers import LSTM, ConvLSTM, Dense, LayerNorm, SequenceEncoder, TemporalConv, graph_convolution
from .models import ConvNextBlock, ConvNextConfig, ModelConfig, StgcnBlock, StgcnBlockConfig, build_model
from .tensor import Tensor
from .training import OptimizerConfig, adam_step, cross_entropy_loss, evaluate_metrics, lr_schedule

GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-3


def _param(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """One small random instance per differentiable primitive."""
    x = _param(rng, 3, 4)
    return {
        "add": (T.add, [_param(rng, 3, 4), _param(rng, 3, 4)]),
        "mul": (T.mul, [_param(rng, 3, 4), _param(rng, 3, 4)]),
        "gelu": (T.gelu, [x]),
        "sigmoid": (T.sigmoid, [_param(rng, 3, 4)]),
        "tanh": (T.tanh, [_param(rng, 3, 4)]),
        "exp": (T.exp, [_param(rng, 3, 4)]),
        "log": (T.log, [Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)]),
        "matmul": (T.matmul, [_param(rng, 3, 4), _param(rng, 4, 2)]),
        "linear": (T.linear, [_param(rng, 2, 3, 4), _param(rng, 4, 5)]),
        "mix": (T.mix, [_param(rng, 5, 5), _param(rng, 2, 5, 3)]),
        "bmm": (T.bmm, [_param(rng, 2, 3, 4), _param(rng, 2, 4, 2)]),
        "log_softmax": (T.log_softmax, [_param(rng, 3, 4)]),
        "softmax": (T.softmax, [_param(rng, 3, 4)]),
        "lstm_cell": (T.lstm_cell, [_param(rng, 2, 12), _param(rng, 2, 3)]),
        "layer_norm": (T.layer_norm, [_param(rng, 3, 5), _param(rng, 5), _param(rng, 5)]),
        "conv2d": (lambda a, k: T.conv2d(a, k, stride=2, pad=1), [_param(rng, 2, 6, 6), _param(rng, 3, 2, 3, 3)]),
        "conv2d_depthwise": (lambda a, k: T.conv2d(a, k, pad=1, groups=2),
                             [_param(rng, 2, 5, 5), _param(rng, 2, 1, 3, 3)]),
        "conv1d_temporal": (lambda a, k: T.conv1d_temporal(a, k, pad=1, axis=-3),
                            [_param(rng, 5, 3, 2), _param(rng, 4, 2, 3)]),
        "sub": (T.sub, [_param(rng, 3, 4), _param(rng, 3, 4)]),
        "neg": (T.neg, [_param(rng, 3, 4)]),
        # |x| >= 0.05 keeps every probe away from the kink at 0
        "relu": (T.relu, [Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.05, 2.0, size=(3, 4)),
                                 requires_grad=True)]),
        "add_bias": (T.add_bias, [_param(rng, 2, 3, 4), _param(rng, 4)]),
        "sum": (lambda a: T.tsum(a, axis=1), [_param(rng, 3, 4)]),
        "mean": (lambda a: T.mean(a, axis=(0, 2)), [_param(rng, 2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [_param(rng, 3, 4)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [_param(rng, 2, 3, 4)]),
        "getitem": (lambda a: T.getitem(a, (slice(1, 3), 2)), [_param(rng, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=-1), [_param(rng, 3, 2), _param(rng, 3, 4)]),
        "stack": (lambda a, b: T.stack([a, b], axis=1), [_param(rng, 3, 4), _param(rng, 3, 4)]),
        "pick": (lambda a: T.pick(a, np.array([1, 0, 1])), [_param(rng, 3, 2)]),
    }


def _small_graph(rng, n: int = 5) -> FacialGraph:
    """A path plus one random chord, so nodes have unequal degrees."""
    edges = [(i, i + 1) for i in range(n - 1)]
    i, j = sorted(rng.choice(n, size=2, replace=False))
    if j - i > 1:
        edges.append((int(i), int(j)))
    return FacialGraph.from_edges(n, edges)


def _with_input(module_fn, x: Tensor, module) -> tuple[Callable, list[Tensor]]:
    return (lambda *_: module_fn(x)), [x] + module.parameters()


def _perturb(module, rng, scale: float = 0.3) -> None:
    # move LayerNorm gains and biases off their 1/0 initial values
    for p in module.parameters():
        p.data += rng.normal(scale=scale, size=p.shape)


def layer_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor], int]]:
    """``name -> (fn, inputs, stencil)`` with fresh parameters and inputs."""
    def seed():
        return np.random.default_rng(int(rng.integers(2 ** 32)))

    cases = {}
    dense = Dense(3, 4, seed())
    cases["dense"] = (*_with_input(dense, _param(rng, 2, 3), dense), 3)
    norm = LayerNorm(4)
    _perturb(norm, rng)
    cases["layer_norm"] = (*_with_input(norm, _param(rng, 3, 4), norm), 3)
    tconv = TemporalConv(2, 3, 3, seed())
    cases["temporal_conv"] = (*_with_input(tconv, _param(rng, 5, 3, 2), tconv), 3)
    A = _small_graph(rng).A_hat
    gx, gw = _param(rng, 3, 5, 2), _param(rng, 2, 3)
    cases["graph_conv"] = (lambda x, w: graph_convolution(A, x, w), [gx, gw], 3)
    lstm = LSTM(2, 3, seed())
    cases["lstm"] = (*_with_input(lambda s: lstm.run(s, return_sequence=True), _param(rng, 4, 2), lstm), 3)
    for variant in ("plain", "bi", "attention", "stacked"):
        enc = SequenceEncoder(variant, 2, 3, seed())
        cases[f"encoder_{variant}"] = (*_with_input(enc, _param(rng, 2, 4, 2), enc), 3)
    conv = ConvLSTM(2, 2, seed())
    cases["convlstm"] = (*_with_input(lambda X: conv.run(A, X), _param(rng, 3, 5, 2), conv), 3)
    block = StgcnBlock(StgcnBlockConfig(2, 3, temporal_kernel=3), seed())
    _perturb(block.norm, rng)
    cases["stgcn_block"] = (*_with_input(lambda X: block(A, X), _param(rng, 4, 5, 2), block), 5)
    cblock = ConvNextBlock(4, seed(), expansion=2)
    _perturb(cblock.norm, rng)
    cases["convnext_block"] = (*_with_input(cblock, _param(rng, 4, 5, 5), cblock), 5)
    return cases


def model_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor], int]]:
    """Both full architectures (and the pooled-head STGCN) at toy sizes."""
    graph = _small_graph(rng)
    stgcn = {"blocks": "2:3,3:3", "lstm_hidden": "3", "temporal_kernel": "3", "n_frames": "4",
             "num_nodes": "5"}
    cases = {}
    for kind in ("stgcn", "stgcn_lstm"):
        model = build_model(ModelConfig.from_flat({"kind": kind, **stgcn}), graph,
                            seed=int(rng.integers(2 ** 32)))
        X = rng.normal(size=(2, 4, 5, 2))
        cases[kind] = ((lambda m, X: lambda *_: m(X))(model, X), model.parameters(), 5)
    toy_cnn = ModelConfig(kind="hybrid", backbone="toy_convnext", lstm_hidden=3, n_frames=2,
                          convnext=ConvNextConfig((3, 3, 4, 4), (1, 1, 1, 1), 32, 2))
    model = build_model(toy_cnn, seed=int(rng.integers(2 ** 32)))
    frames = rng.normal(size=(1, 2, 3, 32, 32))
    cases["hybrid_convnext"] = ((lambda m, X: lambda *_: m(X))(model, frames), model.parameters(), 5)
    feat = ModelConfig(kind="hybrid", lstm_hidden=3, n_frames=4, feature_dim=5)
    model = build_model(feat, seed=int(rng.integers(2 ** 32)))
    X = rng.normal(size=(2, 4, 5))
    cases["hybrid_features"] = ((lambda m, X: lambda *_: m(X))(model, X), model.parameters(), 3)
    return cases


def gradient_suite(trials: int = 3, seed: int = 0, samples: int = 12, model_samples: int = 8,
                   write=None) -> dict[str, float]:
    """Worst relative error per primitive, layer and model over ``trials``
    fresh random instances. Primitives probe every entry; layers and models
    probe ``samples`` and ``model_samples`` random entries per trial."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        groups = [(primitive_cases(rng), None, 3), (layer_cases(rng), samples, None),
                  (model_cases(rng), model_samples, None)]
        for cases, n, default_stencil in groups:
            for name, case in cases.items():
                fn, inputs = case[:2]
                stencil = default_stencil or case[2]
                err = T.gradcheck(fn, inputs, rng=rng, samples=n, stencil=stencil)
                worst[name] = max(worst.get(name, 0.0), err)
    if write is not None:
        for name, err in worst.items():
            write(f"  {name}: {err:.2e}")
    return worst


def gradient_tolerance(name: str) -> float:
    return MODEL_GRAD_TOL if name in MODEL_NAMES else GRAD_TOL


MODEL_NAMES = ("stgcn", "stgcn_lstm", "hybrid_convnext", "hybrid_features")


def check_primitives(trials: int = 2, seed: int = 0) -> tuple[bool, str]:
    worst = gradient_suite(trials, seed)
    bad = [n for n, e in worst.items() if e > gradient_tolerance(n)]
    name = max(worst, key=worst.get)
    detail = f"{len(worst)} cases, max relative error {worst[name]:.2e} ({name})"
    return not bad, detail + (f"; failing: {', '.join(bad)}" if bad else "")


def check_graph() -> tuple[bool, str]:
    g = build_facial_adjacency()
    A = g.adjacency_norm
    radius = float(np.max(np.abs(np.linalg.eigvalsh(A))))
    ok = (g.num_nodes == 68 and len(g.edges) == 67 and g.n_components() == 9
          and np.allclose(A, A.T, atol=1e-12, rtol=0) and radius <= 1 + 1e-9)
    return ok, f"{g.num_nodes} nodes, {len(g.edges)} edges, {g.n_components()} components, radius {radius:.12f}"


def check_loss() -> tuple[bool, str]:
    a = cross_entropy_loss(Tensor(np.zeros((1, 2))), [1]).item()
    b = cross_entropy_loss(Tensor(np.array([[1000.0, 0.0]])), [0]).item()
    return abs(a - math.log(2)) < 1e-12 and abs(b) < 1e-12, f"uniform {a:.6f}, saturated {abs(b):.1e}"


def check_optimizer() -> tuple[bool, str]:
    cfg = OptimizerConfig()
    p = np.zeros(4)
    adam_step([p], [np.ones(4)], [(np.zeros(4), np.zeros(4))], cfg, 1)
    rel = float(np.max(np.abs(np.abs(p) - cfg.lr0))) / cfg.lr0
    ok = rel <= 1e-6 and lr_schedule(cfg, 0) == 1e-4
    return ok, f"first-step relative deviation {rel:.1e}"


def check_metrics(trials: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 50))
        r = evaluate_metrics(rng.integers(0, 2, n), rng.integers(0, 2, n))
        worst = max(worst, abs(r.recall - r.accuracy))
    return worst <= 1e-12, f"max |recall - accuracy| {worst:.1e}"


def check_smote(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 6))
    y = np.array([1] * 3 + [0] * 9)
    synth, labels, _ = smote_arrays(X, y, k=5, seed=seed)
    P = X[:3]
    worst = 0.0
    for s in synth:
        best = math.inf
        for i in range(3):
            for j in range(3):
                d = P[j] - P[i]
                u = float(np.clip(np.dot(s - P[i], d) / max(np.dot(d, d), 1e-300), 0, 1))
                best = min(best, float(np.linalg.norm(s - (P[i] + u * d))))
        worst = max(worst, best)
    ok = len(synth) == 6 and np.all(labels == 1) and worst <= 1e-9
    return ok, f"{len(synth)} synthetic samples, max segment distance {worst:.1e}"


def check_model_shapes() -> tuple[bool, str]:
    clip = generate_synthetic(1, seed=0).X[0]
    cfg = ModelConfig.from_flat({"kind": "stgcn_lstm", "blocks": "2:4,4:4,4:4", "lstm_hidden": "4"})
    with T.no_grad():
        out = build_model(cfg, seed=0)(clip)
    return out.shape == (2,), f"logits shape {list(out.shape)}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients": check_primitives,
    "graph": check_graph,
    "loss": check_loss,
    "optimizer": check_optimizer,
    "metrics": check_metrics,
    "smote": check_smote,
    "model_shapes": check_model_shapes,
}


def run_selftest(write=print) -> list[str]:
    """Run every check, report one line each, return the names that failed."""
    failed = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        write(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failed.append(name)
    return failed
