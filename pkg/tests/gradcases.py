"""Finite-difference gradient cases shared by the layer tests and the acceptance run.

Each case takes a seed and returns the worst relative error over the
tensors it checks.  Everything runs in float64 at quarter channel width.
"""

import numpy as np

from pmpnet import layers as L
from pmpnet import tensor as T
from pmpnet.losses import chamfer, emd_loss, pmd_loss
from pmpnet.model import PathTrace
from pmpnet.params import Initializer, ParamStore
from pmpnet.tensor import Tensor, grad_check

CS = 0.25  # toy channel scale


def _store(seed):
    store = ParamStore(np.float64)
    return store, Initializer(store, np.random.default_rng(seed))


def _wrt_param(store, name, build):
    """grad_check of ``build()`` with respect to one parameter tensor."""
    original = store[name]

    def f(t):
        store[name] = t
        return build()

    try:
        return grad_check(f, original.data)
    finally:
        store[name] = original


def _probe(out, seed):
    """Random linear read-out so every output coordinate carries gradient."""
    w = np.random.default_rng(seed + 99).standard_normal(out.shape)
    return T.sum(out * w)


def sa_case(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-1, 1, (1, 24, 3))
    feats = rng.standard_normal((1, 24, 4))
    level = L.SALevel(8, 0.7, 8, tuple(L.scaled(w, CS) for w in (64, 64, 128)))
    store, init = _store(seed)
    L.init_sa(init, "sa", 4, level)

    def run(f):
        return _probe(L.sa_forward(Tensor(xyz), f, level, store, "sa")[1], seed)

    return max(grad_check(run, feats),
               _wrt_param(store, "sa.0.w", lambda: run(Tensor(feats))),
               _wrt_param(store, "sa.2.b", lambda: run(Tensor(feats))))


def sa_global_case(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-1, 1, (2, 8, 3))
    feats = rng.standard_normal((2, 8, 5))
    level = L.SALevel(None, None, None, (8, 16))
    store, init = _store(seed)
    L.init_sa(init, "g", 5, level)
    return grad_check(lambda f: _probe(L.sa_forward(Tensor(xyz), f, level, store, "g")[1], seed),
                      feats)


def transformer_case(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-1, 1, (1, 12, 3))
    width = L.scaled(32, CS)
    feats = rng.standard_normal((1, 12, width))
    cfg = L.TransformerConfig(neighborhood_k=6, pos_mlp_hidden=L.scaled(64, CS))
    store, init = _store(seed)
    L.init_transformer(init, "tr", width, cfg)

    def run(p, f):
        return _probe(L.transformer_forward(p, f, cfg, store, "tr"), seed)

    return max(grad_check(lambda f: run(Tensor(xyz), f), feats),
               grad_check(lambda p: run(p, Tensor(feats)), xyz),
               _wrt_param(store, "tr.query.w", lambda: run(Tensor(xyz), Tensor(feats))),
               _wrt_param(store, "tr.pos.0.w", lambda: run(Tensor(xyz), Tensor(feats))))


def fp_case(seed):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1, 1, (1, 6, 3))
    fine = rng.uniform(-1, 1, (1, 14, 3))
    cf = rng.standard_normal((1, 6, 8))
    skip = rng.standard_normal((1, 14, 4))
    store, init = _store(seed)
    L.init_fp(init, "fp", 8, 4, (L.scaled(64, CS), L.scaled(32, CS)))

    def run(c, s):
        return _probe(L.fp_forward(coarse, c, fine, s, store, "fp"), seed)

    return max(grad_check(lambda c: run(c, Tensor(skip)), cf),
               grad_check(lambda s: run(Tensor(cf), s), skip),
               _wrt_param(store, "fp.0.w", lambda: run(Tensor(cf), Tensor(skip))))


def gate_case(kind):
    def case(seed):
        rng = np.random.default_rng(seed)
        width = 6
        f0 = rng.standard_normal((1, 5, width))
        h0 = rng.standard_normal((1, 5, width))
        c0 = rng.standard_normal((1, 5, width))
        store, init = _store(seed)
        L.init_gate(init, "gate", kind, width)

        def run(f, h, c):
            state = L.GateState(h, c if kind == "lstm" else None)
            return _probe(L.gate_variant_forward(kind, f, state, store, "gate")[0], seed)

        errs = [grad_check(lambda f: run(f, Tensor(h0), Tensor(c0)), f0)]
        if kind != "none":
            errs.append(grad_check(lambda h: run(Tensor(f0), h, Tensor(c0)), h0))
        if kind == "lstm":
            errs.append(grad_check(lambda c: run(Tensor(f0), Tensor(h0), c), c0))
        for name in list(store):
            if name.endswith(".w"):
                errs.append(_wrt_param(store, name, lambda: run(Tensor(f0), Tensor(h0), Tensor(c0))))
        return max(errs)

    case.__name__ = f"gate_{kind}_case"
    return case


def head_case(seed):
    rng = np.random.default_rng(seed)
    cfg = L.HeadConfig(hidden=(L.scaled(128, CS), L.scaled(64, CS)), noise_dim=8)
    h = rng.standard_normal((1, 7, 8))
    store, init = _store(seed)
    L.init_head(init, "head", 8, cfg)

    def run(x):
        out = L.head_forward(x, 2, cfg, np.random.default_rng(seed), store, "head", radius=0.1)
        return _probe(out, seed)

    return max(grad_check(run, h), _wrt_param(store, "head.0.w", lambda: run(Tensor(h))))


def chamfer_case(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 9, 3)), rng.standard_normal((2, 11, 3))
    return max(grad_check(lambda t: chamfer(t, y, "l2"), x),
               grad_check(lambda t: chamfer(t, y, "l1"), x),
               grad_check(lambda t: chamfer(x, t, "l2"), y))


def emd_case(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    return max(grad_check(lambda t: emd_loss(t, y, solver="exact"), x),
               grad_check(lambda t: emd_loss(t, y), x))


def pmd_case(seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((3, 2, 6, 3))

    def run(t):
        deltas = [T.reshape(T.gather(t, [k]), d.shape[1:]) for k in range(3)]
        trace = PathTrace(np.zeros(d.shape[1:]), [x.data for x in deltas], [],
                          (1.0, 0.1, 0.01), deltas=deltas)
        return pmd_loss(trace)

    return grad_check(run, d)


CASES = {
    "sa": sa_case,
    "sa_global": sa_global_case,
    "transformer": transformer_case,
    "fp": fp_case,
    **{f"gate_{k}": gate_case(k) for k in L.GATE_KINDS},
    "head": head_case,
    "chamfer": chamfer_case,
    "emd": emd_case,
    "pmd": pmd_case,
}
