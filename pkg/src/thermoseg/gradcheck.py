"""Central finite-difference gradient checking.

`fd_gradient` is deliberately dumb: it perturbs one coordinate at a time and
re-runs the whole forward pass, so it shares no code with the analytic
backward it is used to validate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FD_STEP = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def fd_gradient(f, x: np.ndarray, h: float = FD_STEP, indices=None) -> np.ndarray:
    """d f / d x[i] by central differences; `f` takes no args and reads `x`.

    `x` is perturbed in place and restored. With `indices` (flat), only those
    coordinates are probed and the result has that length.
    """
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = np.empty(len(indices) if hasattr(indices, "__len__") else flat.size, dtype=np.float64)
    for out_i, i in enumerate(indices):
        original = flat[i]
        flat[i] = original + h
        f_plus = f()
        flat[i] = original - h
        f_minus = f()
        flat[i] = original
        grads[out_i] = (f_plus - f_minus) / (2.0 * h)
    return grads


def check_wrt(f_scalar, forward_backward, arrays, max_coords: int = 0, seed: int = 0) -> float:
    """Compare analytic and FD gradients w.r.t. each array in `arrays`.

    `forward_backward()` must return a list of analytic gradient arrays in the
    same order as `arrays`. `f_scalar()` recomputes the scalar loss from the
    current contents of `arrays`. Returns the worst relative error.
    """
    analytic = forward_backward()
    worst = 0.0
    rng = np.random.default_rng(seed)
    for arr, an in zip(arrays, analytic):
        if max_coords and arr.size > max_coords:
            idx = rng.choice(arr.size, size=max_coords, replace=False)
            idx.sort()
        else:
            idx = np.arange(arr.size)
        numeric = fd_gradient(f_scalar, arr, indices=idx)
        worst = max(worst, rel_error(an.reshape(-1)[idx], numeric))
    return worst


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


LAYER_TOL = 1e-4
MODEL_TOL = 1e-3  # looser: the 16x16 full model stacks ~20 nonlinear layers


def _measure(name, make_loss, wrt, tol, max_coords=0, seed=0):
    """Worst FD-vs-analytic relative error over the given tensors."""
    from .autodiff import backward, zero_grads

    zero_grads(wrt)
    backward(make_loss())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor in wrt:
        assert tensor.grad is not None, f"{name}: no analytic gradient"
        flat = tensor.data.reshape(-1)
        if max_coords and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        else:
            idx = np.arange(flat.size)
        numeric = fd_gradient(lambda: float(make_loss().data), tensor.data, indices=idx)
        worst = max(worst, rel_error(tensor.grad.reshape(-1)[idx], numeric))
    return CheckResult(name, worst, tol)


def run_suite(seed: int = 0) -> list[CheckResult]:
    """FD-check every layer plus the full model; runs in float64."""
    from . import config, ops
    from .autodiff import Tensor, mul, relu, sigmoid, sum_all
    from .conditioning import FeatureModulation, gft_apply, gft_gate, film, sft
    from .edges import hierarchical_edges
    from .model import ASPP, ECBlock, ModelConfig, build_model
    from .nn import Conv2d, make_seeder

    results = []
    with config.precision("float64"):
        rng = np.random.default_rng(seed)

        def probe_loss(make_out, shape):
            probe = Tensor(rng.standard_normal(shape))
            return lambda: sum_all(mul(make_out(), probe))

        x = Tensor(rng.standard_normal((2, 3, 7, 7)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        loss = probe_loss(lambda: ops.conv2d(x, w, b, stride=1, padding=2, dilation=2), (2, 4, 7, 7))
        results.append(_measure("conv2d (dilated)", loss, [x, w, b], LAYER_TOL))

        xb = Tensor(rng.standard_normal((3, 2, 4, 4)) + 1, requires_grad=True)
        scale = Tensor(rng.standard_normal(2) + 1.5, requires_grad=True)
        shift = Tensor(rng.standard_normal(2), requires_grad=True)
        stats = ops.RunningStats(2)
        loss = probe_loss(lambda: ops.batch_norm(xb, scale, shift, stats, train=True), (3, 2, 4, 4))
        results.append(_measure("batch_norm (train)", loss, [xb, scale, shift], LAYER_TOL))
        loss = probe_loss(lambda: ops.batch_norm(xb, scale, shift, stats, train=False), (3, 2, 4, 4))
        results.append(_measure("batch_norm (eval)", loss, [xb, scale, shift], LAYER_TOL))

        xr = Tensor(rng.standard_normal((2, 2, 4, 4)) + 0.3, requires_grad=True)
        loss = probe_loss(lambda: relu(xr), (2, 2, 4, 4))
        results.append(_measure("relu", loss, [xr], LAYER_TOL))
        loss = probe_loss(lambda: sigmoid(xr), (2, 2, 4, 4))
        results.append(_measure("sigmoid", loss, [xr], LAYER_TOL))

        xz = Tensor(rng.standard_normal((1, 2, 5, 6)), requires_grad=True)
        loss = probe_loss(lambda: ops.bilinear_resize(xz, 9, 4), (1, 2, 9, 4))
        results.append(_measure("bilinear_resize", loss, [xz], LAYER_TOL))

        xf = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
        gv = Tensor(rng.standard_normal(3), requires_grad=True)
        bv = Tensor(rng.standard_normal(3), requires_grad=True)
        loss = probe_loss(lambda: film(xf, gv, bv), (1, 3, 3, 3))
        results.append(_measure("film", loss, [xf, gv, bv], LAYER_TOL))

        gm = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
        bm = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
        loss = probe_loss(lambda: sft(xf, gm, bm), (1, 3, 3, 3))
        results.append(_measure("sft", loss, [xf, gm, bm], LAYER_TOL))

        probe2 = Tensor(rng.standard_normal((1, 3, 3, 3)))
        def gate_loss():
            gh, bh = gft_gate(gm, bm)
            return sum_all(mul(gh + bh, probe2))
        results.append(_measure("gft_gate", gate_loss, [gm, bm], LAYER_TOL))

        seeder = make_seeder(seed)
        gamma_conv = Conv2d("g", 3, 3, 3, padding=1, rng=rng)
        beta_conv = Conv2d("bb", 3, 3, 3, padding=1, rng=rng)
        gamma_conv.weight.data = rng.standard_normal(gamma_conv.weight.shape) * 0.3
        beta_conv.weight.data = rng.standard_normal(beta_conv.weight.shape) * 0.3
        zh = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
        xg = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
        loss = probe_loss(lambda: gft_apply(xg, zh, gamma_conv, beta_conv), (1, 3, 4, 4))
        results.append(_measure("gft_apply", loss,
                                [xg, zh, gamma_conv.weight, beta_conv.weight], LAYER_TOL))

        mod = FeatureModulation("m", 1, 4, seeder)
        zin = Tensor(rng.random((1, 1, 10, 10)), requires_grad=True)
        loss = probe_loss(lambda: mod(zin, 6, 6), (1, 4, 6, 6))
        results.append(_measure("feature_modulation", loss,
                                [zin, mod.conv1.weight, mod.conv2.weight], LAYER_TOL))

        block = ECBlock("blk", "conditioning.blk", 2, 4, 1, 1, seeder)
        for conv in (block.gft.gamma_conv, block.gft.beta_conv):
            conv.weight.data = rng.standard_normal(conv.weight.shape) * 0.3
        xe = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
        edge = Tensor(rng.random((1, 1, 16, 16)))
        loss = probe_loss(lambda: block.forward(xe, edge=edge, train=True), (1, 4, 8, 8))
        results.append(_measure("ec_block", loss,
                                [xe, block.conv1.weight, block.gft.gamma_conv.weight,
                                 block.gft.modulation.conv1.weight],
                                LAYER_TOL, max_coords=40, seed=seed))

        aspp = ASPP("aspp", 2, 3, (1, 2), seeder)
        xa = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        loss = probe_loss(lambda: aspp(xa), (1, 3, 5, 5))
        results.append(_measure("aspp", loss, [xa, aspp.fuse.weight], LAYER_TOL,
                                max_coords=40, seed=seed))

        model = build_model(ModelConfig(stage_channels=(4, 6, 8, 8), blocks_per_stage=(1, 1, 1, 1),
                                        aspp_channels=6, atrous_rates=(1, 2), num_classes=3,
                                        gft_stages=("conv2_x",), seed=seed))
        image = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
        edge_stack = hierarchical_edges(Tensor(image.data.copy()))  # frozen w.r.t. the FD probe
        labels = rng.integers(0, 3, (1, 16, 16))
        params = model.named_parameters()
        picked = [image,
                  params["stem.conv.weight"],
                  params["conv3_x.0.conv1.weight"],
                  params["conv5_x.0.bn1.scale"],
                  params["conditioning.conv2_x.0.gamma.weight"],
                  params["conditioning.conv2_x.0.mod1.weight"],
                  params["aspp.fuse.weight"],
                  params["classifier.weight"]]

        def model_loss():
            return ops.cross_entropy(model.forward(image, edge_stack, train=True), labels)

        results.append(_measure("full model (16x16)", model_loss, picked, MODEL_TOL,
                                max_coords=12, seed=seed))
    return results
