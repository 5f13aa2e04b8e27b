"""Randomised finite-difference checks shared by the unit and acceptance tests."""

from __future__ import annotations

import contextlib

import numpy as np

from oracles import central_difference, relative_error
from spatial_mtl import autodiff as ad
from spatial_mtl.autodiff import Tensor
from spatial_mtl.model import SpatialViLT, Targets, compute_total_loss


def _probs(rng, shape):
    return rng.uniform(0.05, 0.95, shape)


def _binary(rng, shape):
    return (rng.random(shape) > 0.5).astype(float)


# name -> rng -> (function of input Tensors, list of input arrays)
OP_CASES = {
    "add": lambda r: (lambda a, b: ad.add(a, b), [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "sub": lambda r: (lambda a, b: ad.sub(a, b), [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul": lambda r: (lambda a, b: ad.mul(a, b), [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul_scalar": lambda r: (lambda a, s: ad.mul(a, s), [r.normal(size=(3, 4)), r.normal(size=())]),
    "relu": lambda r: (ad.relu, [r.normal(size=(4, 5)) + np.sign(r.normal(size=(4, 5))) * 0.01]),
    "sigmoid": lambda r: (ad.sigmoid, [2 * r.normal(size=(4, 5))]),
    "tanh": lambda r: (ad.tanh, [r.normal(size=(4, 5))]),
    "matmul": lambda r: (ad.matmul, [r.normal(size=(4, 4)), r.normal(size=(4, 4))]),
    "matmul_batched": lambda r: (ad.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))]),
    "linear": lambda r: (ad.linear, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))]),
    "broadcast_to": lambda r: (lambda a: ad.broadcast_to(a, (3, 2, 4)), [r.normal(size=(2, 4))]),
    "reshape": lambda r: (lambda a: ad.reshape(a, (4, 3)), [r.normal(size=(2, 6))]),
    "transpose": lambda r: (lambda a: ad.transpose(a, (2, 0, 1)), [r.normal(size=(2, 3, 4))]),
    "concat": lambda r: (lambda a, b: ad.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "take_index": lambda r: (lambda a: ad.take(a, 1, axis=1), [r.normal(size=(2, 3, 4))]),
    "take_slice": lambda r: (lambda a: ad.take(a, slice(1, 3), axis=0), [r.normal(size=(4, 3))]),
    "sum": lambda r: (ad.tsum, [r.normal(size=(3, 4))]),
    "mean": lambda r: (ad.mean, [r.normal(size=(3, 4))]),
    "embedding": lambda r: (lambda t: ad.embedding(t, np.array([[0, 2, 2], [1, 0, 3]])), [r.normal(size=(4, 5))]),
    "layer_norm": lambda r: (ad.layer_norm, [r.normal(size=(2, 3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
    "softmax_attention": lambda r: (
        lambda q, k, v: ad.softmax_attention(q, k, v, np.array([True, True, False])[None, None, None, :]),
        [r.normal(size=(1, 1, 3, 4)), r.normal(size=(1, 1, 3, 4)), r.normal(size=(1, 1, 3, 4))]),
    "softmax_attention_heads": lambda r: (
        ad.softmax_attention, [r.normal(size=(2, 2, 4, 3)), r.normal(size=(2, 2, 4, 3)), r.normal(size=(2, 2, 4, 3))]),
    "conv2d": lambda r: (lambda x, k: ad.conv2d(x, k, stride=1, padding=1),
                         [r.normal(size=(1, 8, 8)), r.normal(size=(2, 1, 3, 3))]),
    "conv2d_strided": lambda r: (lambda x, k: ad.conv2d(x, k, stride=2),
                                 [r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 2, 2))]),
    "transposed_conv2d": lambda r: (lambda x, k: ad.transposed_conv2d(x, k, stride=2),
                                    [r.normal(size=(2, 3, 3, 3)), r.normal(size=(3, 2, 2, 2))]),
    "transposed_conv2d_padded": lambda r: (lambda x, k: ad.transposed_conv2d(x, k, stride=2, padding=1),
                                           [r.normal(size=(1, 2, 3, 3)), r.normal(size=(2, 2, 4, 4))]),
    "mse": lambda r: (lambda p: ad.mse(p, r_target(r, (2, 4, 4))), [r.normal(size=(2, 4, 4))]),
    "mse_masked": lambda r: (lambda p: ad.mse(p, r_target(r, (2, 3, 4, 4)), r_mask(r, (2, 4, 4))),
                             [r.normal(size=(2, 3, 4, 4))]),
    "bce": lambda r: (lambda p: ad.bce(p, _binary(r, (3, 4))), [_probs(r, (3, 4))]),
    "bce_masked": lambda r: (lambda p: ad.bce(p, _binary(r, (2, 4, 4)), r_mask(r, (2, 4, 4))),
                             [_probs(r, (2, 4, 4))]),
    "softmax_cross_entropy": lambda r: (lambda z: ad.softmax_cross_entropy(z, np.array([0, 1, 1, 0])),
                                        [r.normal(size=(4, 2))]),
}


def r_target(rng, shape):
    return rng.normal(size=shape)


def r_mask(rng, shape):
    m = (rng.random(shape) > 0.4).astype(float)
    m.flat[0] = 1.0
    return m


def _scalarise(out: Tensor, weights: np.ndarray) -> Tensor:
    if out.data.ndim == 0:
        return out
    return ad.tsum(ad.mul(out, Tensor(weights)))


def check_op(name: str, seed: int) -> tuple[float, float]:
    """Relative gradient error of one op in 32-bit and in 64-bit mode.

    Both analytic gradients are compared with a 64-bit central difference
    taken at the 32-bit-representable input, so one reference serves both.
    Constants an op closes over (targets, masks) are drawn from the same
    seed on every evaluation.
    """
    def build():
        return OP_CASES[name](np.random.default_rng(seed))

    fn, arrays = build()
    arrays = [np.asarray(a, dtype=np.float32).astype(np.float64) for a in arrays]
    with ad.precision(np.float64):
        probe = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed + 10_000).normal(size=probe.shape)

    def value(arrs):
        f, _ = build()
        with ad.precision(np.float64):
            return float(_scalarise(f(*[Tensor(a) for a in arrs]), weights).data)

    errors = []
    analytic = {}
    for dtype in (np.float32, np.float64):
        with ad.precision(dtype):
            f, _ = build()
            leaves = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
            with ad.Tape() as tape:
                tape.backward(_scalarise(f(*leaves), weights))
        analytic[dtype] = [leaf.grad for leaf in leaves]
    numeric = [central_difference(value, [a.copy() for a in arrays], k, 1e-6) for k in range(len(arrays))]
    for dtype in (np.float32, np.float64):
        errors.append(max(relative_error(g, n) for g, n in zip(analytic[dtype], numeric)))
    return errors[0], errors[1]


def _model_case(config, seed: int):
    rng = np.random.default_rng(seed)
    b, s, t = 2, config.image_size, config.target_map_size
    images = rng.random((b, s, s, 3))
    tokens = np.zeros((b, config.max_text_len), dtype=np.int64)
    tokens[:, 0] = 1
    tokens[:, 1:6] = rng.integers(3, len(config.vocab), (b, 5))
    mask = (rng.random((b, t, t)) > 0.3).astype(float)
    targets = Targets(rng.random((b, t, t)), rng.normal(size=(b, 3, t, t)),
                      (rng.random((b, t, t)) > 0.5).astype(float), mask)
    labels = rng.integers(0, 2, b)
    return images, tokens, targets, labels


@contextlib.contextmanager
def _relu_signs():
    """Record the sign pattern of every relu input evaluated inside the block."""
    signs = []
    inner = ad.relu

    def spy(x):
        signs.append(x.data > 0)
        return inner(x)

    ad.relu = spy
    try:
        yield signs
    finally:
        ad.relu = inner


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_model(config, seed: int, dtype=np.float32, variant: str = "masked_spatial", coords: int = 3,
                h: float = 1e-6) -> float:
    """Relative gradient error of the full multitask loss.

    Compares the analytic gradient against a 64-bit central difference
    along one random direction through all parameters and along a few
    single coordinates, each scaled by the largest gradient entry of its
    parameter tensor. Finite differences are meaningless across a relu
    kink, so a probe whose two sides disagree on any relu sign is redrawn.
    """
    images, tokens, targets, labels = _model_case(config, seed)
    model = SpatialViLT(config.with_variant(variant))
    rng = np.random.default_rng(seed + 1)
    base = {k: p.data.astype(np.float64) + rng.normal(0, 0.05, p.data.shape) for k, p in model.params.items()}

    def loss_at(values, prec):
        with ad.precision(prec):
            for k, p in model.params.items():
                p.data = values[k].astype(prec)
            out = model.forward(images.astype(prec), tokens)
            return compute_total_loss(out, targets, labels, config.loss_weights, variant, model)[0]

    with ad.precision(dtype):
        with ad.Tape() as tape:
            loss = loss_at(base, dtype)
            model.zero_grad()
            tape.backward(loss)
    # parameters outside the loss graph (baseline decoders) keep grad None
    grads = {k: np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for k, p in model.params.items()}
    ref = {k: v.astype(dtype).astype(np.float64) for k, v in base.items()}

    def derivative(step):
        """Central difference along ``step``, or None if it straddles a kink."""
        with _relu_signs() as s_plus:
            f_plus = float(loss_at({k: ref[k] + step.get(k, 0.0) for k in ref}, np.float64).data)
        with _relu_signs() as s_minus:
            f_minus = float(loss_at({k: ref[k] - step.get(k, 0.0) for k in ref}, np.float64).data)
        if not _same_pattern(s_plus, s_minus):
            return None
        return (f_plus - f_minus) / (2 * h)

    checks = []  # (analytic, numeric, scale)
    for _ in range(20):
        direction = {k: rng.normal(size=v.shape) for k, v in ref.items()}
        numeric = derivative({k: h * d for k, d in direction.items()})
        if numeric is not None:
            checks.append((sum(float((grads[k] * direction[k]).sum()) for k in ref), numeric, 0.0))
            break
    else:
        raise RuntimeError("every random direction crossed a relu kink")
    # single coordinates are drawn among those with a non-negligible gradient
    floor = 1e-4 * max(float(np.abs(g).max()) for g in grads.values())
    candidates = [(k, idx) for k in sorted(ref) for idx in zip(*np.nonzero(np.abs(grads[k]) > floor))]
    for j in rng.permutation(len(candidates)):
        if len(checks) > coords:
            break
        name, idx = candidates[int(j)]
        step = np.zeros_like(ref[name])
        step[idx] = h
        numeric = derivative({name: step})
        if numeric is not None:
            checks.append((float(grads[name][idx]), numeric, float(np.abs(grads[name]).max())))
    # each coordinate is scaled like its whole parameter tensor, as in check_op
    return max(abs(a - n) / max(abs(a), abs(n), s, 1e-12) for a, n, s in checks)
