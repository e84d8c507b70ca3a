"""Self-contained verification suites behind the ``check`` command.

Each suite returns (name, worst_value, threshold, passed) rows; a suite
passes when every row does. These are compact versions of the full test
suite, runnable from the installed package without pytest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, brute_force_knn, knn
from .network import BlockParams, BlockSpec, NetConfig, UNetParams, build_plan, unet_forward
from .pcf import (
    PcfParams,
    attention_baseline_forward,
    compute_scores,
    pcf_forward,
    pcf_forward_naive,
    pointconv_forward,
    pointconv_forward_naive,
    psi_subtractive,
)
from .tensor import Tensor, gather_rows, grad_check
from .training import weighted_cross_entropy


@dataclass
class CheckRow:
    name: str
    value: float
    threshold: float
    passed: bool


def _row(name: str, value: float, threshold: float) -> CheckRow:
    return CheckRow(name, float(value), float(threshold), bool(value < threshold))


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def _instance(rng, n=48, k=8, c_in=8, c_out=8, variant="pcf_subtractive", heads=4,
              c_mid=4, activation="sigmoid"):
    cloud = PointCloud(rng.uniform(0, 1, (n, 3)), rng.normal(size=(n, c_in)))
    nbr = knn(cloud, cloud, k)
    params = PcfParams.create(rng, c_in, c_out, variant=variant, heads=heads,
                              c_mid=c_mid, activation=activation)
    return cloud, nbr, params, Tensor(cloud.features, requires_grad=True)


def oracle_suite() -> list[CheckRow]:
    rng = np.random.default_rng(0)
    rows = []
    worst = 0.0
    for variant in ("pcf_subtractive", "pcf_qkv"):
        for _ in range(5):
            _, nbr, params, feats = _instance(rng, variant=variant)
            worst = max(worst, _rel(pcf_forward(feats, nbr, params).data,
                                    pcf_forward_naive(feats, nbr, params).data))
    rows.append(_row("pcf_forward vs naive (10 instances)", worst, 1e-10))

    _, nbr, params, feats = _instance(rng, variant="pointconv")
    rows.append(_row("pointconv vs direct-loop", _rel(
        pointconv_forward(feats, nbr, params).data,
        pointconv_forward_naive(feats, nbr, params).data), 1e-10))

    _, nbr, params, feats = _instance(rng, activation="constant_one")
    rows.append(_row("constant-one pcf vs pointconv", _rel(
        pcf_forward(feats, nbr, params).data,
        pointconv_forward(feats, nbr, params).data), 1e-12))

    mismatches = 0
    for seed in range(5):
        r = np.random.default_rng(seed)
        cloud = PointCloud(r.uniform(0, 1, (300, 3)), r.normal(size=(300, 2)))
        a = knn(cloud, cloud, 12).indices
        b = brute_force_knn(cloud, cloud, 12).indices
        mismatches += int((a != b).sum())
    rows.append(_row("knn vs brute force (index mismatches)", mismatches, 1.0))
    return rows


def gradcheck_suite() -> list[CheckRow]:
    rng = np.random.default_rng(1)
    rows = []
    for variant in ("pcf_subtractive", "pcf_qkv"):
        _, nbr, params, feats = _instance(rng, n=12, k=3, c_in=4, c_out=4,
                                          heads=2, variant=variant)
        probe = Tensor(0.1 * rng.normal(size=(12, 4)))
        weights = [p for _, p in params.parameters()] + [feats]
        err = grad_check(lambda: (pcf_forward(feats, nbr, params) * probe).mean(),
                         weights, step=1e-5, max_samples=64)
        rows.append(_row(f"grad {variant}", err, 1e-4))

    _, nbr, params, feats = _instance(rng, n=12, k=3, c_in=4, c_out=4, heads=2,
                                      variant="attention_baseline")
    probe = Tensor(0.1 * rng.normal(size=(12, 4)))
    weights = [p for _, p in params.parameters()] + [feats]
    err = grad_check(
        lambda: (attention_baseline_forward(feats, nbr, params) * probe).mean(),
        weights, step=1e-5, max_samples=64)
    rows.append(_row("grad attention_baseline", err, 1e-4))

    cloud = PointCloud(rng.uniform(0, 1, (12, 3)), rng.normal(size=(12, 8)))
    nbr = knn(cloud, cloud, 3)
    spec = BlockSpec(8, 8, shortcut="identity")
    block = BlockParams.create(rng, spec, heads=2, c_mid=4, activation="sigmoid",
                               psi_hidden_layers=2, d_qk=None, disable_conv=False,
                               disable_reweight=False)
    feats = Tensor(cloud.features, requires_grad=True)
    probe = Tensor(0.1 * rng.normal(size=(12, 8)))
    from .network import residual_block
    err = grad_check(lambda: (residual_block(feats, nbr, spec, block) * probe).mean(),
                     [t for _, t in block.parameters("b")] + [feats],
                     step=1e-5, max_samples=48)
    rows.append(_row("grad residual block", err, 1e-4))

    cloud = PointCloud(rng.uniform(0, 1, (24, 3)), rng.normal(size=(24, 3)),
                       rng.integers(0, 2, 24))
    config = NetConfig(feature_width=3, num_classes=2, levels=2, base_width=8,
                       base_grid=0.3, blocks_per_level=(1, 1), k=4, heads=2,
                       c_mid=4, norm=False)
    params = UNetParams.create(config, rng)
    plan = build_plan(cloud, config)

    def unet_loss():
        logits = unet_forward(cloud, config, params, plan)
        return weighted_cross_entropy(logits, cloud.labels, np.ones(2))

    err = grad_check(unet_loss, params.trainable(), step=1e-5, max_samples=12)
    rows.append(_row("grad 2-level unet", err, 1e-4))
    return rows


def invariance_suite() -> list[CheckRow]:
    rng = np.random.default_rng(2)
    rows = []

    pos = np.round(rng.uniform(0, 1, (40, 3)) * 2**20) / 2**20
    cloud = PointCloud(pos, rng.normal(size=(40, 8)))
    params = PcfParams.create(rng, 8, 6, heads=2, c_mid=4)
    feats = Tensor(cloud.features)
    out1 = pcf_forward(feats, knn(cloud, cloud, 6), params).data
    shifted = cloud.translated([4.0, -2.5, 1.25])
    out2 = pcf_forward(feats, knn(shifted, shifted, 6), params).data
    rows.append(_row("translation delta", np.abs(out1 - out2).max(), 1e-9))

    nbr = knn(cloud, cloud, 6)
    perm = np.stack([rng.permutation(6) for _ in range(40)])
    nbr2 = type(nbr)(indices=np.take_along_axis(nbr.indices, perm, axis=1),
                     rel_pos=np.take_along_axis(nbr.rel_pos, perm[:, :, None], axis=1))
    a = pcf_forward(feats, nbr, params).data
    b = pcf_forward(feats, nbr2, params).data
    rows.append(_row("neighbor permutation delta", _rel(a, b), 1e-12))

    sm_params = PcfParams.create(rng, 8, 6, heads=2, c_mid=4, activation="softmax")
    scores = compute_scores(feats, gather_rows(feats, nbr.indices), sm_params)
    sums = scores.data().sum(axis=1)
    rows.append(_row("softmax score row-sum deviation", np.abs(sums - 1.0).max(), 1e-12))

    sg = psi_subtractive(feats, gather_rows(feats, nbr.indices), params).data()
    margin = min(sg.min(), 1.0 - sg.max())
    rows.append(_row("sigmoid scores outside (0,1)", float(margin <= 0.0), 1.0))
    return rows


SUITES = {
    "oracle": oracle_suite,
    "gradcheck": gradcheck_suite,
    "invariance": invariance_suite,
}


def run_suite(name: str) -> tuple[list[CheckRow], bool]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    rows = SUITES[name]()
    return rows, all(r.passed for r in rows)
