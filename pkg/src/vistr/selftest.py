"""Quick battery of oracle checks run by ``vistr selftest``.

Each suite returns normally on success and raises AssertionError otherwise.
Functions are looked up through their modules at call time so that a patched
implementation is what gets exercised.
"""
from __future__ import annotations

import itertools
import math
import time
from typing import Callable

import numpy as np
import torch

from . import box_ops, losses, matcher, posenc, synthdata, tensor
from .structures import ClipTargets, PredictionSet


def _close(a: float, b: float, tol: float, what: str) -> None:
    if not abs(a - b) <= tol:
        raise AssertionError(f"{what}: got {a!r}, expected {b!r}")


def check_hungarian(trials: int = 100) -> None:
    rng = np.random.default_rng(0)
    for n in range(1, 7):
        perms = list(itertools.permutations(range(n)))
        for _ in range(trials):
            c = rng.random((n, n))
            best = math.inf
            for p in perms:
                total = 0.0
                for i in range(n):
                    total += c[i, p[i]]
                best = min(best, total)
            got = matcher.hungarian(c)
            if got.cost != best or sorted(got.sigma) != list(range(n)):
                raise AssertionError(f"hungarian n={n}: cost {got.cost} vs brute force {best}")


def check_gradients(tol: float = 1e-4) -> None:
    g = torch.Generator().manual_seed(0)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    gt_a, gt_b = (rand(4, 4) > 0).double(), (rand(4, 4) > 0).double()
    cases: list[tuple[str, Callable, list]] = [
        ("softmax", lambda x: (tensor.softmax(x, -1) * torch.arange(5.0, dtype=x.dtype)).sum(), [rand(3, 5)]),
        ("conv3d", lambda x, k: tensor.conv3d(x, k, padding=1).tanh().sum(), [rand(1, 2, 2, 3, 3), rand(2, 2, 3, 3, 3)]),
        ("bilinear", lambda x: (tensor.upsample_bilinear(x, (6, 8)) ** 2).sum(), [rand(1, 1, 3, 4)]),
        ("dice", lambda p: losses.dice_loss(torch.sigmoid(p), gt_a).sum(), [rand(4, 4)]),
        ("focal", lambda x: losses.focal_loss(x, gt_b).sum(), [rand(4, 4)]),
        (
            "giou",
            lambda a, b: box_ops.generalized_iou(box_ops.box_cxcywh_to_xyxy(a), box_ops.box_cxcywh_to_xyxy(b)).sum(),
            [0.3 + 0.4 * torch.rand(5, 4, generator=g, dtype=torch.float64) for _ in range(2)],
        ),
    ]
    torch.manual_seed(0)
    mha = tensor.MultiHeadAttention(8, 2).double()
    cases.append(("attention", lambda q, kv: mha(q, kv, kv).sin().sum(), [rand(3, 8), rand(5, 8)]))

    n, T, K = 3, 2, 2
    targets = ClipTargets(
        torch.tensor([0, 1]),
        0.25 + 0.5 * torch.rand(2, T, 4, generator=g, dtype=torch.float64),
        (torch.rand(2, T, 8, 8, generator=g) < 0.4).double(),
        torch.ones(2, T, dtype=torch.bool),
    )
    logits, boxes, masks = rand(n * T, K + 1), 0.25 + 0.5 * torch.rand(n * T, 4, generator=g, dtype=torch.float64), rand(n, T, 4, 4)
    frozen = losses.hungarian_loss(PredictionSet(logits, boxes, n, T), masks, targets).assignment
    cases.append(
        (
            "hungarian_loss",
            lambda cl, bx, ml: losses.hungarian_loss(PredictionSet(cl, bx, n, T), ml, targets, assignment=frozen).total,
            [logits, boxes, masks],
        )
    )
    for name, f, args in cases:
        err = tensor.gradient_check(f, args)
        if not err < tol:
            raise AssertionError(f"gradient check {name}: relative error {err:.3g}")


def check_scalar_oracles() -> None:
    t = lambda v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    _close(box_ops.generalized_iou(t([0, 0, 1, 1]), t([2, 0, 3, 1])).item(), -1 / 3, 1e-9, "giou disjoint")
    _close(box_ops.generalized_iou(t([0, 0, 2, 2]), t([1, 1, 3, 3])).item(), -5 / 63, 1e-9, "giou overlap")
    _close(box_ops.generalized_iou(t([0.1, 0.2, 0.5, 0.9]), t([0.1, 0.2, 0.5, 0.9])).item(), 1.0, 1e-9, "giou identical")
    cost = box_ops.sequence_box_cost(
        t([[0.5, 0.5, 0.4, 0.4], [0.25, 0.25, 0.5, 0.5]]), t([[0.5, 0.5, 0.2, 0.2], [0.75, 0.25, 0.5, 0.5]]), 2, 5
    )
    _close(cost.item(), 4.0, 1e-9, "sequence box cost")
    pred = torch.zeros(4, 4, dtype=torch.float64)
    pred[:, :2] = 0.8
    gt = torch.zeros(4, 4, dtype=torch.float64)
    gt[:2] = 1
    _close(losses.dice_loss(pred, gt).item(), 1 - 7.4 / 15.4, 1e-9, "dice half overlap")
    _close(losses.focal_loss(t([[0.0]]), t([[1.0]])).item(), 0.25 * 0.25 * math.log(2), 1e-9, "focal single pixel")


def check_rle(trials: int = 200) -> None:
    rng = np.random.default_rng(0)
    for _ in range(trials):
        H, W = (int(v) for v in rng.integers(1, 20, size=2))
        m = rng.random((H, W)) < rng.random()
        if not np.array_equal(synthdata.rle_decode(synthdata.rle_encode(m), H, W), m):
            raise AssertionError(f"RLE round trip failed on a {H}x{W} mask")


def check_positional() -> None:
    pe = posenc.positional_encoding_3d(posenc.PositionalEncodingConfig(96, 6, 12, 20), dtype=torch.float64)
    rows = pe.reshape(96, -1).T
    if torch.unique(rows, dim=0).shape[0] != rows.shape[0]:
        raise AssertionError("positional encodings collide")


SUITES: dict[str, Callable[[], None]] = {
    "hungarian-vs-brute-force": check_hungarian,
    "gradient-checks": check_gradients,
    "scalar-oracles": check_scalar_oracles,
    "rle-round-trip": check_rle,
    "positional-distinct": check_positional,
}


def run(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for name, suite in SUITES.items():
        start = time.perf_counter()
        reason = ""
        try:
            suite()
        except AssertionError as exc:
            ok = False
            reason = f": {exc}"
        echo(f"{'FAIL' if reason else 'PASS'} {name} [{time.perf_counter() - start:.2f}s]{reason}")
    echo("selftest passed" if ok else "selftest FAILED")
    return ok
