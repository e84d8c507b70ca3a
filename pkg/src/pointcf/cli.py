"""Command-line surface: data generation, training, evaluation, checks,
benchmarks, and score-difference export.

Every command is deterministic under a fixed seed and config (benchmarks
report wall-clock and are the one exception); all outputs are CSV or
line-oriented text. The PCF_SEED environment variable overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .checks import run_suite
from .fileio import (
    ConfigError,
    format_resolved,
    parse_config,
    read_cloud,
    resolve_config,
    write_cloud,
)
from .geometry import PointCloud, knn
from .network import (
    NetConfig,
    UNetParams,
    build_plan,
    encoder_layer_clouds,
    load_checkpoint,
    save_checkpoint,
    unet_forward,
)
from .pcf import PcfParams, pcf_forward, pcf_forward_naive, score_diff
from .tensor import Tensor
from .training import (
    SegModel,
    SynthSceneSpec,
    TrainConfig,
    evaluate,
    generate_scene,
    train,
)


def _fail(message: str) -> "NoReturn":  # noqa: F821 - doc only
    print(f"error: {message}", file=sys.stderr)
    sys.exit(1)


def _seed_override(seed: int) -> int:
    env = os.environ.get("PCF_SEED")
    return int(env) if env else seed


def _load_dir(path: str) -> list[PointCloud]:
    names = sorted(f for f in os.listdir(path) if f.endswith(".pcf"))
    if not names:
        _fail(f"no .pcf files in {path}")
    return [read_cloud(os.path.join(path, f)) for f in names]


def _net_config(resolved: dict, feature_width: int) -> NetConfig:
    cfg_width = resolved["feature_width"]
    if cfg_width not in ("auto", None) and cfg_width != feature_width:
        _fail(f"config feature_width {cfg_width} does not match data ({feature_width})")
    return NetConfig(
        feature_width=feature_width,
        num_classes=resolved["num_classes"],
        levels=resolved["levels"],
        base_width=resolved["base_width"],
        base_grid=resolved["base_grid"],
        blocks_per_level=(None if resolved["blocks_per_level"] == "auto"
                          else resolved["blocks_per_level"]),
        k=resolved["k"],
        variant=resolved["variant"],
        heads=resolved["heads"],
        c_mid=resolved["c_mid"],
        activation=resolved["activation"],
        psi_hidden_layers=resolved["psi_hidden_layers"],
        bottleneck_ratio=resolved["bottleneck_ratio"],
        post_relu=resolved["post_relu"],
        norm=resolved["norm"],
        d_qk=None if resolved["d_qk"] == "auto" else resolved["d_qk"],
        disable_conv=resolved["disable_conv"],
        disable_reweight=resolved["disable_reweight"])


def _train_config(resolved: dict) -> TrainConfig:
    weights = resolved["class_weights"]
    return TrainConfig(
        epochs=resolved["epochs"],
        initial_lr=resolved["initial_lr"],
        decay_factor=resolved["decay_factor"],
        decay_every_epochs=resolved["decay_every_epochs"],
        seed=_seed_override(resolved["seed"]),
        class_weights=None if weights == "auto" else np.asarray(weights),
        weight_decay=resolved["weight_decay"],
        eval_every=resolved["eval_every"])


def cmd_gen_data(args) -> int:
    spec = SynthSceneSpec(
        num_points=args.num_points,
        num_classes=args.num_classes,
        geometry=args.geometry,
        noise_sigma=args.noise_sigma,
        boundary_label_flip_rate=args.flip_rate,
        seed=_seed_override(args.seed))
    cloud = generate_scene(spec)
    write_cloud(args.out, cloud)
    print(f"wrote {args.out}: {cloud.n} points, {cloud.feature_width} features, "
          f"{spec.num_classes} classes, geometry {spec.geometry}")
    return 0


def cmd_train(args) -> int:
    try:
        resolved = resolve_config(parse_config(open(args.config).read()))
    except ConfigError as exc:
        _fail(str(exc))
    clouds = _load_dir(args.data)
    if any(c.labels is None for c in clouds):
        _fail("training data must carry labels")
    config = _net_config(resolved, clouds[0].feature_width)
    tcfg = _train_config(resolved)
    print("# resolved config")
    resolved_out = dict(resolved)
    resolved_out["feature_width"] = config.feature_width
    resolved_out["seed"] = tcfg.seed
    print(format_resolved(resolved_out), end="")
    val = _load_dir(args.val) if args.val else None
    model = SegModel.create(config, seed=tcfg.seed)
    report = train(model, clouds, tcfg, val_clouds=val)
    save_checkpoint(args.out, config, model.params)
    text = report.to_text()
    print(text, end="")
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    print(f"# checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    config, params = load_checkpoint(args.checkpoint)
    clouds = _load_dir(args.data)
    if any(c.labels is None for c in clouds):
        _fail("evaluation data must carry labels")
    model = SegModel(config, params)
    per_class, mean = evaluate(model, clouds)
    print("class,iou")
    for c, iou in enumerate(per_class):
        print(f"{c},{float(iou)!r}")
    print(f"mean,{float(mean)!r}")
    return 0


def cmd_check(args) -> int:
    rows, passed = run_suite(args.suite)
    print("check,value,threshold,status")
    for r in rows:
        print(f"{r.name},{r.value!r},{r.threshold!r},{'PASS' if r.passed else 'FAIL'}")
    print(f"suite {args.suite}: {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def _bench_pcf(n: int, k: int, repeats: int) -> list[str]:
    rng = np.random.default_rng(0)
    c_in = c_out = 16
    cloud = PointCloud(rng.uniform(0, 1, (n, 3)), rng.normal(size=(n, c_in)))
    nbr = knn(cloud, cloud, min(k, n))
    params = PcfParams.create(rng, c_in, c_out, heads=8, c_mid=8)
    feats = Tensor(cloud.features)

    def factorized():
        return pcf_forward(feats, nbr, params)

    def naive():
        return pcf_forward_naive(feats, nbr, params)

    t_fast = _median_time(factorized, repeats)
    t_naive = _median_time(naive, repeats)
    return [f"pcf_factorized,{n},{k},{t_fast!r},{n / t_fast!r}",
            f"pcf_naive,{n},{k},{t_naive!r},{n / t_naive!r}",
            f"pcf_naive_over_factorized,{n},{k},{t_naive / t_fast!r},"]


def _bench_knn(n: int, k: int, repeats: int) -> list[str]:
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(0, 1, (n, 3)), rng.normal(size=(n, 2)))
    t = _median_time(lambda: knn(cloud, cloud, min(k, n)), repeats)
    return [f"knn,{n},{k},{t!r},{n / t!r}"]


def _bench_unet(n: int, k: int, repeats: int) -> list[str]:
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(0, 1, (n, 3)), rng.normal(size=(n, 3)))
    config = NetConfig(feature_width=3, num_classes=3, levels=2, base_width=32,
                       base_grid=0.05, blocks_per_level=(1, 1), k=k, heads=8,
                       c_mid=8)
    params = UNetParams.create(config, rng)
    plan = build_plan(cloud, config)
    t = _median_time(lambda: unet_forward(cloud, config, params, plan), repeats)
    return [f"unet_forward,{n},{k},{t!r},{n / t!r}"]


def _median_time(fn, repeats: int) -> float:
    times = []
    fn()  # warm caches
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cmd_bench(args) -> int:
    table = {"pcf": _bench_pcf, "knn": _bench_knn, "unet": _bench_unet}
    print("op,n,k,median_seconds,points_per_second")
    for line in table[args.op](args.n, args.k, args.repeats):
        print(line)
    return 0


def cmd_scores(args) -> int:
    config, params = load_checkpoint(args.checkpoint)
    cloud = read_cloud(args.data)
    model = SegModel(config, params)
    plan = build_plan(cloud, config)
    capture: list = []
    unet_forward(cloud, config, params, plan, capture=capture)
    names = model.params.pcf_layer_names()
    eligible = [i for i, s in enumerate(capture) if s is not None]
    if args.layer not in eligible:
        _fail(f"layer {args.layer} has no reweighting scores; eligible layers: "
              + (", ".join(f"{i} ({names[i]})" for i in eligible) or "none"))
    diffs = score_diff(capture[args.layer]).data
    layer_cloud = encoder_layer_clouds(config, plan)[args.layer]
    with open(args.out, "w") as fh:
        fh.write("x,y,z,score_diff\n")
        for p, d in zip(layer_cloud.positions, diffs):
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},{float(d)!r}\n")
    print(f"wrote {args.out}: {diffs.shape[0]} rows from layer {args.layer} "
          f"({names[args.layer]})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointcf",
        description="Point convolution with feature-difference attention: "
                    "data generation, training, evaluation, and verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic labeled scene")
    g.add_argument("--geometry", default="boundary_noise",
                   choices=["two_planes_corner", "plane_plus_sphere", "boundary_noise"])
    g.add_argument("--num-points", type=int, default=4096)
    g.add_argument("--num-classes", type=int, default=3)
    g.add_argument("--noise-sigma", type=float, default=0.3)
    g.add_argument("--flip-rate", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config and a data directory")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--report", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU of a checkpoint on a data directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("check", help="run a verification suite")
    c.add_argument("--suite", required=True, choices=["gradcheck", "oracle", "invariance"])
    c.set_defaults(fn=cmd_check)

    b = sub.add_parser("bench", help="median wall-clock timings")
    b.add_argument("--op", required=True, choices=["pcf", "knn", "unet"])
    b.add_argument("--n", type=int, default=1024)
    b.add_argument("--k", type=int, default=16)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("scores", help="export per-point score spread of one layer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_scores)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
