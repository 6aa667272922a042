"""Command-line interface: scene generation, encoding, benchmarks, checks.

Verbs
-----
gen-scene     write a synthetic scene (bin5 + JSON sidecar + preview PNG)
encode        encode a scene file to a dense BEV feature dump + preview PNG
bench         time the encoding pipeline; JSON report + stage chart PNG
check-grad    finite-difference verification of every layer and graph
train-toy     overfit the objectness loss on one scene; CSV + PNG + checkpoint
print-config  emit the full configuration (defaults merged with --config)

Numpy is imported only inside command handlers so ``--threads`` can pin the
BLAS thread-count environment variables before the first numpy import.

Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

DEFAULT_OUT = "out"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgpfe",
        description="Fine-grained pillar feature encoding for LiDAR point clouds.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file (defaults used when omitted)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the scene and training seeds")
    common.add_argument("--threads", type=int, metavar="N",
                        help="pin BLAS/OpenMP thread count before numpy loads")
    common.add_argument("--out", metavar="PATH",
                        help=f"output directory (default: {DEFAULT_OUT!r})")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", parents=[common],
                       help="write a synthetic scene with ground-truth boxes")
    p.set_defaults(handler=cmd_gen_scene)

    p = sub.add_parser("encode", parents=[common],
                       help="encode a scene file to a dense BEV feature dump")
    p.add_argument("--scene", metavar="PATH", required=True,
                   help="input points (bin5, or CSV with a .csv suffix)")
    p.add_argument("--params", metavar="PATH",
                   help="checkpoint whose encoder weights to use")
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("bench", parents=[common],
                       help="time the encoding pipeline stage by stage")
    p.add_argument("--scene", metavar="PATH",
                   help="points to benchmark (default: built-in 300k-point scene)")
    p.add_argument("--repeats", type=int, default=5, metavar="N",
                   help="timed passes per stage (default: 5)")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("check-grad", parents=[common],
                       help="verify analytic gradients against finite differences")
    p.set_defaults(handler=cmd_check_grad)

    p = sub.add_parser("train-toy", parents=[common],
                       help="overfit the objectness loss on the configured scene")
    p.set_defaults(handler=cmd_train_toy)

    p = sub.add_parser("print-config", parents=[common],
                       help="print the effective configuration as JSON")
    p.set_defaults(handler=cmd_print_config)

    return parser


def _load_cfg(args):
    """Effective config: file or defaults, seeds overridden by --seed."""
    from fgpfe.config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.scene.seed = args.seed
        cfg.training.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_from_config(cfg):
    from fgpfe.pcio import gen_scene

    s, g = cfg.scene, cfg.grid
    return gen_scene(
        s.seed,
        n_boxes=s.n_boxes,
        points_per_box=s.points_per_box,
        background_points=s.background_points,
        sweeps=s.sweeps,
        x_range=g.x_range,
        y_range=g.y_range,
        z_range=g.z_range,
    )


# ---------------------------------------------------------------------------
# command handlers


def cmd_print_config(args) -> int:
    from fgpfe.config import dump_config

    cfg = _load_cfg(args)
    text = dump_config(cfg)
    print(text)
    if args.out is not None:
        (_out_dir(args) / "config.json").write_text(text + "\n")
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    from fgpfe.pcio import save_points
    from fgpfe.report import save_scene_preview

    cfg = _load_cfg(args)
    out = _out_dir(args)
    scene = _scene_from_config(cfg)
    path = out / "scene.bin5"
    save_points(scene, path)
    png = save_scene_preview(scene, out / "scene.png")
    print(f"wrote {path} ({scene.n_points:,} points, {len(scene.boxes)} boxes)")
    print(f"wrote {path}.meta.json")
    print(f"wrote {png}")
    return EXIT_OK


def cmd_encode(args) -> int:
    import numpy as np

    from fgpfe import nd
    from fgpfe.fusion import save_bev
    from fgpfe.pcio import load_points
    from fgpfe.report import save_bev_preview
    from fgpfe.train import encoder_from_config

    cfg = _load_cfg(args)
    out = _out_dir(args)
    scene = load_points(args.scene)
    encoder = encoder_from_config(cfg, np.random.default_rng(cfg.training.seed))
    if args.params:
        state = nd.load_checkpoint(args.params)
        params = encoder.parameters()
        wanted = {p.name for p in params}
        nd.restore_parameters(params, {k: v for k, v in state.items() if k in wanted})
    with nd.no_grad():
        bev = encoder.encode_bev(scene.points)
    path = out / "bev.bin"
    save_bev(bev, path)
    png = save_bev_preview(bev, out / "bev.png")
    n_y, n_x, channels = bev.data.shape
    print(f"wrote {path} ({n_y} x {n_x} cells, {channels} channels, "
          f"{scene.n_points:,} points in)")
    print(f"wrote {png}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import numpy as np

    from fgpfe.bench import default_bench_scene, run_bench, save_report
    from fgpfe.pcio import load_points
    from fgpfe.report import save_bench_chart
    from fgpfe.train import encoder_from_config

    cfg = _load_cfg(args)
    out = _out_dir(args)
    if args.repeats < 1:
        print("bench: --repeats must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    scene = load_points(args.scene) if args.scene else default_bench_scene(cfg.scene.seed)
    encoder = encoder_from_config(cfg, np.random.default_rng(cfg.training.seed))
    report = run_bench(scene.points, encoder, repeats=args.repeats)
    save_report(report, out / "bench.json")
    png = save_bench_chart(report, out / "bench.png")
    print(report.table())
    print(f"wrote {out / 'bench.json'}")
    print(f"wrote {png}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    from fgpfe.verify import check_gradients

    cfg = _load_cfg(args)
    seed = args.seed if args.seed is not None else 0
    result = check_gradients(cfg, seed=seed)
    print(result.table())
    if args.out is not None:
        (_out_dir(args) / "gradcheck.txt").write_text(result.table() + "\n")
    return EXIT_OK if result.passed else EXIT_VERIFY


def cmd_train_toy(args) -> int:
    import csv

    from fgpfe import nd
    from fgpfe.report import save_loss_curve
    from fgpfe.train import train_toy

    cfg = _load_cfg(args)
    out = _out_dir(args)
    scene = _scene_from_config(cfg)
    encoder, heads, result = train_toy(scene, cfg)

    csv_path = out / "loss.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "loss"))
        for step, loss in enumerate(result.losses):
            writer.writerow((step, repr(loss)))
    ckpt_path = out / "checkpoint.ckpt"
    nd.save_checkpoint(list(encoder.parameters()) + list(heads.parameters()), ckpt_path)
    png = save_loss_curve(result.losses, out / "loss.png")

    ratio = result.final_loss / result.initial_loss if result.losses else float("nan")
    print(f"steps {result.steps}  lr {result.lr}  cells {result.n_cells}  "
          f"foreground {result.n_foreground}")
    print(f"loss {result.initial_loss:.6f} -> {result.final_loss:.6f} "
          f"(ratio {ratio:.4f})  roc-auc {result.auc:.4f}")
    for path in (csv_path, ckpt_path, png):
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    # imported here so the thread pinning above precedes the numpy import
    from fgpfe.config import ConfigError
    from fgpfe.nd.checkpoint import CheckpointError
    from fgpfe.pcio import PointCloudError

    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PointCloudError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
