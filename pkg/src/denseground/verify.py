"""Self-check suite behind the `verify` command.

Each check pits an implementation against an independent oracle: finite
differences for gradients, exhaustive permutation search for the assignment
solver, a straight-line re-statement of the ensembling recipe (its own IoU
arithmetic, no shared helpers), and direct perturbation for attention
locality. Failures carry module, property, and seed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ensemble import mve
from .fusion import FusionDecoder, build_spherical_mask
from .language import WordEncoding
from .metrics import hungarian


@dataclass
class CheckResult:
    module: str
    prop: str
    seed: int
    ok: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = f"  [{self.detail}]" if self.detail else ""
        return f"{status}  {self.module}: {self.prop} (seed {self.seed}){extra}"


GRAD_TOL = 1e-4


def _gradient_cases(rng):
    """Named scalar-valued functions over leaf tensors, kink-free at the probe."""
    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    cases = []
    a, b = t((3, 4)), t((4, 2))
    cases.append(("matmul", lambda x, y: ad.sum_all(ad.matmul(x, y)), [a, b]))

    x = t((2, 5))
    mask = np.zeros((2, 5))
    mask[0, 3] = ad.NEG_INF
    mask[1, 1] = ad.NEG_INF
    sm_w = rng.uniform(0.5, 1.5, (2, 5))
    cases.append(("masked_softmax",
                  lambda v: ad.sum_all(ad.mul(ad.masked_softmax(v, mask), sm_w)), [x]))

    logits = t((4, 3), -2.0, 2.0)
    targets = rng.integers(0, 3, size=4)
    cases.append(("cross_entropy", lambda v: ad.cross_entropy(v, targets), [logits]))

    pred = Tensor(rng.uniform(0.1, 0.9, size=8), requires_grad=True)
    tgt = rng.integers(0, 2, size=8).astype(float)
    cases.append(("binary_cross_entropy", lambda v: ad.binary_cross_entropy(v, tgt), [pred]))

    pred2 = Tensor(rng.uniform(0.1, 0.9, size=10), requires_grad=True)
    tgt2 = rng.integers(0, 2, size=10).astype(float)
    cases.append(("dice_loss", lambda v: ad.dice_loss(v, tgt2), [pred2]))

    u, v = t((6,)), t((6,))
    # keep |u - v| away from the kink of |.|
    v.data += np.where(u.data - v.data >= 0, -0.05, 0.05)
    cases.append(("l1_loss", lambda x, y: ad.l1_loss(x, y), [u, v]))
    cases.append(("l2_loss", lambda x, y: ad.l2_loss(x, y), [t((6,)), t((6,))]))
    cases.append(("cosine_similarity", lambda x, y: ad.cosine_similarity(x, y),
                  [Tensor(rng.uniform(0.2, 1.0, 5), requires_grad=True),
                   Tensor(rng.uniform(0.2, 1.0, 5), requires_grad=True)]))

    w, bias = t((5, 3)), t((3,))
    cases.append(("linear", lambda xx, ww, bb: ad.sum_all(ad.linear(xx, ww, bb)), [t((4, 5)), w, bias]))

    xr = Tensor(rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)),
                requires_grad=True)
    cases.append(("relu", lambda v: ad.sum_all(ad.relu(v)), [xr]))
    cases.append(("sigmoid", lambda v: ad.sum_all(ad.sigmoid(v)), [t((3, 3))]))

    g, bta = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True), t((6,))
    cases.append(("layer_norm", lambda v, gg, bb: ad.sum_all(ad.layer_norm(v, gg, bb)), [t((4, 6)), g, bta]))

    cat_w = rng.uniform(0.5, 1.5, (3, 7))
    cases.append(("concat", lambda x, y: ad.sum_all(ad.mul(ad.concat([x, y], axis=1), cat_w)),
                  [t((3, 4)), t((3, 3))]))

    pool_mask = np.array([True, False, True, True, False])
    cases.append(("masked_mean_pool", lambda v: ad.sum_all(ad.masked_mean_pool(v, pool_mask)), [t((5, 4))]))

    idx = rng.integers(0, 5, size=3)
    cases.append(("gather_rows", lambda v: ad.sum_all(ad.gather_rows(v, idx)), [t((5, 3))]))

    comp_logits = t((2, 4))
    comp_mask = np.zeros((2, 4))
    comp_mask[:, 2] = ad.NEG_INF
    comp_targets = rng.integers(0, 4, size=2)
    comp_targets = np.where(comp_targets == 2, 1, comp_targets)
    cases.append(("masked_softmax+cross_entropy",
                  lambda v: ad.cross_entropy(ad.mul(ad.masked_softmax(v, comp_mask), 5.0), comp_targets),
                  [comp_logits]))
    return cases


def check_gradients(seeds=range(10)) -> list:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([911, seed]))
        for name, fn, inputs in _gradient_cases(rng):
            err = ad.grad_check(fn, inputs)
            results.append(CheckResult("tensor-autodiff", f"grad:{name}", seed,
                                       err <= GRAD_TOL, f"max rel err {err:.2e}"))
    return results


def check_fusion_layer_gradients(seeds=range(10)) -> list:
    """FD check through one full decoder layer at FD-friendly sizes."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([912, seed]))
        dec = FusionDecoder(rng, dim=8, heads=1, layers=6, ffn_dim=16, use_gct=True)
        tokens = Tensor(rng.uniform(-1, 1, size=(4, 8)), requires_grad=True)
        words = Tensor(rng.uniform(-1, 1, size=(3, 8)), requires_grad=True)
        centroids = rng.uniform(0, 3, size=(3, 3))
        mask = build_spherical_mask(centroids, 1.5, camera_slot=True)
        padding = np.array([True, True, False])
        word_mask = np.broadcast_to(np.where(padding[None, :], 0.0, ad.NEG_INF), (4, 3)).copy()
        weight = rng.uniform(0.5, 1.5, size=(4, 8))

        def fn(tk, wd):
            enc = dec.baf_layer(0, tk, wd, word_mask, mask)
            return ad.sum_all(ad.mul(enc, weight))

        err = ad.grad_check(fn, [tokens, words])
        results.append(CheckResult("fusion-baf", "grad:baf_layer", seed,
                                   err <= GRAD_TOL, f"max rel err {err:.2e}"))
    return results


# ---------------------------------------------------------------------------
# oracle equivalence checks


def _mve_reference(masks, threshold: float):
    """Straight-line restatement of the ensembling recipe with set arithmetic."""
    k = len(masks)
    n = len(masks[0])
    sets = [set(int(i) for i in range(n) if masks[v][i]) for v in range(k)]
    energy = [[0.0] * k for _ in range(k)]
    for i in range(k):
        for j in range(k):
            if i == j:
                energy[i][j] = 1.0
            else:
                union = len(sets[i] | sets[j])
                energy[i][j] = (len(sets[i] & sets[j]) / union) if union else 0.0
    sums = [sum(row) for row in energy]
    seed_view = 0
    for i in range(1, k):
        if sums[i] > sums[seed_view]:
            seed_view = i
    valid = [v for v in range(k) if energy[seed_view][v] > threshold]
    out = []
    for i in range(n):
        count = sum(1 for v in valid if masks[v][i])
        out.append(count > len(valid) / 2)
    return np.array(out, dtype=bool)


def check_mve_equivalence(trials: int = 200) -> list:
    results = []
    failures = 0
    detail = ""
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([913, trial]))
        k = int(rng.integers(1, 8))
        n = int(rng.integers(4, 65))
        masks = rng.random((k, n)) < rng.uniform(0.2, 0.8)
        threshold = float(rng.choice([0.0, 0.3, 0.5, 0.9]))
        # feed preset per-view masks through the pipeline via a stub predictor
        views = iter(masks)
        points = np.zeros((n, 6))
        got = mve(points, lambda pc: next(views), views=k, threshold=threshold)
        want = _mve_reference(masks.tolist(), threshold)
        if not np.array_equal(got, want):
            failures += 1
            detail = f"first divergence at trial {trial}"
            break
    results.append(CheckResult("mve-ensembler", f"oracle equivalence ({trials} mask sets)",
                               0, failures == 0, detail or "exact match"))
    return results


def check_hungarian(trials: int = 100) -> list:
    results = []
    failures = 0
    detail = ""
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([914, trial]))
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 7))
        cost = rng.uniform(-5, 5, size=(n, m))
        pairs = hungarian(cost)
        got = sum(cost[r, c] for r, c in pairs)
        rows_used = [r for r, _ in pairs]
        cols_used = [c for _, c in pairs]
        if len(set(rows_used)) != len(pairs) or len(set(cols_used)) != len(pairs) \
                or len(pairs) != min(n, m):
            failures += 1
            detail = f"invalid assignment at trial {trial}"
            break
        best = math.inf
        if n <= m:
            for perm in itertools.permutations(range(m), n):
                best = min(best, sum(cost[i, perm[i]] for i in range(n)))
        else:
            for perm in itertools.permutations(range(n), m):
                best = min(best, sum(cost[perm[j], j] for j in range(m)))
        if abs(got - best) > 1e-9:
            failures += 1
            detail = f"cost {got} vs optimal {best} at trial {trial}"
            break
    results.append(CheckResult("eval-harness", f"hungarian vs exhaustive ({trials} matrices)",
                               0, failures == 0, detail or "exact match"))
    return results


def check_locality(configs: int = 50) -> list:
    """Perturbing an out-of-radius token never moves an in-question token."""
    results = []
    worst = 0.0
    for seed in range(configs):
        rng = np.random.default_rng(np.random.SeedSequence([915, seed]))
        dim = 16
        n = int(rng.integers(3, 7))
        dec = FusionDecoder(rng, dim=dim, heads=2, layers=6, ffn_dim=32,
                            radii=(1.0, 2.5, math.inf), use_gct=True)
        centroids = rng.uniform(0, 6, size=(n, 3))
        tokens_np = rng.uniform(-1, 1, size=(n + 1, dim))
        ok = True
        for layer in range(dec.layers):
            radius = dec.layer_radius(layer)
            if math.isinf(radius):
                continue
            mask = build_spherical_mask(centroids, radius, camera_slot=True)
            blocked = [(i, j) for i in range(n) for j in range(n)
                       if i != j and mask[i, j] == ad.NEG_INF]
            if not blocked:
                continue
            i, j = blocked[int(rng.integers(len(blocked)))]
            with ad.no_grad():
                base = dec.self_attention_sublayer(layer, Tensor(tokens_np), mask).data
                bumped = tokens_np.copy()
                bumped[j] += rng.uniform(-3, 3, size=dim)
                moved = dec.self_attention_sublayer(layer, Tensor(bumped), mask).data
            delta = float(np.abs(moved[i] - base[i]).max())
            worst = max(worst, delta)
            if delta >= 1e-6:
                ok = False
        results.append(CheckResult("fusion-baf", "locality invariance (all layers)", seed,
                                   ok, f"max delta {worst:.2e}"))
    return results


def run_all() -> tuple:
    results = []
    results += check_gradients()
    results += check_fusion_layer_gradients()
    results += check_mve_equivalence()
    results += check_hungarian()
    results += check_locality()
    return results, all(r.ok for r in results)
