"""Command-line entry point.

Subcommands: gen-scene, train, render, evaluate, verify-grads.  Exit codes:
0 success, 1 usage error, 2 runtime/numerical failure.  Heavy modules are
imported lazily so --threads can bound BLAS workers before numpy loads.
"""

import argparse
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="camfield",
                description="Collaborative neural field view recovery")
    p.add_argument("--threads", type=int, default=0,
                   help="bound BLAS worker threads (0 = library default)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", parents=[], help="write a template scene "
                       "with per-camera ground-truth labels")
    g.add_argument("--template", required=True,
                   help="static-room | moving-box | two-agent-intersection")
    g.add_argument("--out", required=True)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--oracle-steps", type=int, default=512)

    t = sub.add_parser("train", help="two-phase field training")
    t.add_argument("--scene", required=True, help="scene file from gen-scene")
    t.add_argument("--labels", default=None,
                   help="label directory (default: alongside the scene file)")
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="YAML run config")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--static-steps", type=int, default=None)
    t.add_argument("--dynamic-steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--lambda-static", type=float, default=None)
    t.add_argument("--lambda-dynamic", type=float, default=None)
    t.add_argument("--lambda-optical", type=float, default=None)
    t.add_argument("--lambda-cycle", type=float, default=None)
    t.add_argument("--hold-out", action="append", default=[],
                   metavar="CAMERA:TIME",
                   help="exclude one (camera, timestamp) view from training; "
                        "repeatable")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="generic dotted config override, e.g. train.gamma=0.99")

    r = sub.add_parser("render", help="render one camera from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--time", type=int, default=0)
    r.add_argument("--mode", choices=("full", "static"), default="full")
    r.add_argument("--samples", type=int, default=160)
    r.add_argument("--out", required=True, help="output PNG path")

    e = sub.add_parser("evaluate", help="failure sweep with/without recovery")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--time", type=int, default=None)
    e.add_argument("--counts", type=int, nargs="+", default=[0, 1, 2, 3])
    e.add_argument("--failure-seed", type=int, default=0)
    e.add_argument("--mode", choices=("full", "static"), default="full")
    e.add_argument("--samples", type=int, default=160)

    v = sub.add_parser("verify-grads", help="finite-difference gradient audit")
    v.add_argument("--scene", required=True)
    v.add_argument("--labels", default=None)
    v.add_argument("--probes", type=int, default=6)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--threshold", type=float, default=1e-3)
    return p


def _labels_dir(scene_path, labels):
    if labels:
        return labels
    return os.path.join(os.path.dirname(os.path.abspath(scene_path)), "labels")


def _load_training_setup(scene_path, labels_dir):
    import numpy as np
    from .sceneio import load_scene, read_grid, read_image
    from .train import TrainData

    scene = load_scene(scene_path)
    cameras = scene.cameras()
    labels = {}
    for cam in cameras:
        for t in scene.timestamps:
            base = os.path.join(labels_dir, f"{cam.id}_t{t}")
            need = [base + "_image.png", base + "_mask.grid",
                    base + "_flowfw.grid", base + "_flowbw.grid"]
            for f in need:
                if not os.path.exists(f):
                    raise UsageError(f"missing label file {f}; run gen-scene first")
            labels[(cam.id, t)] = {
                "image": read_image(need[0]),
                "mask": read_grid(need[1]),
                "flow_fw": read_grid(need[2]),
                "flow_bw": read_grid(need[3]),
            }
    return scene, labels


def cmd_gen_scene(args):
    import numpy as np
    from .scene import render_labels
    from .sceneio import save_scene, write_grid, write_image
    from .templates import build_template

    try:
        scene, poses = build_template(args.template, width=args.width,
                                      height=args.height)
    except KeyError as e:
        raise UsageError(str(e)) from e
    os.makedirs(args.out, exist_ok=True)
    labels_dir = os.path.join(args.out, "labels")
    os.makedirs(labels_dir, exist_ok=True)
    save_scene(os.path.join(args.out, "scene.yaml"), scene, poses=poses)
    for cam in scene.cameras():
        for t in scene.timestamps:
            lab = render_labels(scene, cam, t, steps=args.oracle_steps)
            base = os.path.join(labels_dir, f"{cam.id}_t{t}")
            write_image(base + "_image.png", lab["image"])
            write_grid(base + "_mask.grid", lab["mask"])
            write_grid(base + "_flowfw.grid", lab["flow_fw"])
            write_grid(base + "_flowbw.grid", lab["flow_bw"])
    print(f"wrote {args.template} scene and labels to {args.out}")
    return 0


def cmd_train(args):
    import numpy as np
    from .config import (apply_override, dump_config, load_config,
                         train_config_from)
    from .model import FieldModel
    from .train import Trainer, TrainData, write_metrics

    cfg = load_config(args.config)
    cfg["scene"] = args.scene
    cfg["out"] = args.out
    direct = {"seed": args.seed}
    for key, val in (("static_steps", args.static_steps),
                     ("dynamic_steps", args.dynamic_steps),
                     ("lr_init", args.lr),
                     ("lambda_static", args.lambda_static),
                     ("lambda_dynamic", args.lambda_dynamic),
                     ("lambda_optical", args.lambda_optical),
                     ("lambda_cycle", args.lambda_cycle)):
        if val is not None:
            cfg["train"][key] = val
    if direct["seed"] is not None:
        cfg["seed"] = direct["seed"]
    if args.labels is not None:
        cfg["labels"] = args.labels
    for spec in args.hold_out:
        if ":" not in spec:
            raise UsageError(f"--hold-out expects CAMERA:TIME, got {spec!r}")
        cam_id, t = spec.rsplit(":", 1)
        cfg["train"]["hold_out"].append([cam_id, int(t)])
    for pair in args.set:
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, val = pair.split("=", 1)
        try:
            apply_override(cfg, key, val)
        except KeyError as e:
            raise UsageError(str(e)) from e

    labels_dir = _labels_dir(args.scene, cfg.get("labels"))
    scene, labels = _load_training_setup(args.scene, labels_dir)

    os.makedirs(args.out, exist_ok=True)
    dump_config(cfg, os.path.join(args.out, "config.yaml"))

    rng = np.random.default_rng(cfg["seed"])
    mp = cfg["model"]
    model = FieldModel(scene, rng, levels=mp["levels"],
                       base_resolution=mp["base_resolution"],
                       finest_resolution=mp["finest_resolution"],
                       table_size=mp["table_size"],
                       feature_dim=mp["feature_dim"], hidden=mp["hidden"],
                       code_dim=mp["code_dim"], bev_channels=mp["bev_channels"],
                       bev_dims=tuple(mp["bev_dims"]))
    hold_out = [(c, int(t)) for c, t in cfg["train"]["hold_out"]]
    data = TrainData(scene, scene.cameras(), labels, hold_out=hold_out)
    trainer = Trainer(model, data, train_config_from(cfg))

    every = max(1, (trainer.config.static_steps + trainer.config.dynamic_steps) // 20)

    def progress(row):
        if row["step"] % every == 0:
            print(f"step {row['step']:5d} [{row['phase']}] "
                  f"total {row['loss_total']:.5f}")

    trainer.run(progress=progress)
    write_metrics(os.path.join(args.out, "metrics.csv"), trainer.metrics)
    trainer.save(os.path.join(args.out, "checkpoint.ckpt"))
    print(f"run complete: {args.out}")
    return 0


def cmd_render(args):
    from .sceneio import write_image
    from .train import load_model

    model, _ = load_model(args.checkpoint)
    try:
        cam = model.scene.camera_by_id(args.camera)
    except KeyError as e:
        raise UsageError(str(e)) from e
    img = model.render_image(cam, args.time, mode=args.mode, K=args.samples)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_image(args.out, img)
    print(f"rendered {args.camera} at t={args.time} -> {args.out}")
    return 0


def cmd_evaluate(args):
    from .recovery import (FailureSpec, evaluate_failure_sweep, write_report,
                           write_view_psnrs, recover_views, select_failures)
    from .sceneio import write_image
    from .train import load_model

    model, header = load_model(args.checkpoint)
    scene = model.scene
    t = args.time
    if t is None:
        ts = scene.timestamps
        t = int(ts[len(ts) // 2])
    spec = FailureSpec(mode="failed", seed=args.failure_seed)
    os.makedirs(args.out, exist_ok=True)
    rows, view_rows = evaluate_failure_sweep(
        model, scene, t, spec, counts=tuple(args.counts),
        K=args.samples, render_mode=args.mode)
    write_report(os.path.join(args.out, "report.csv"), rows)
    write_view_psnrs(os.path.join(args.out, "view_psnr.csv"), view_rows)
    for n in args.counts:
        manifest = select_failures(scene, spec, t, count=n)
        recovered = recover_views(model, manifest, t, K=args.samples,
                                  mode=args.mode)
        for cam_id, img in recovered.items():
            write_image(os.path.join(args.out, f"recovered_n{n}_{cam_id}.png"), img)
    print(f"evaluation written to {args.out}")
    return 0


def cmd_verify_grads(args):
    import numpy as np
    from .config import load_config, train_config_from
    from .model import FieldModel
    from .train import Trainer, TrainData

    labels_dir = _labels_dir(args.scene, args.labels)
    scene, labels = _load_training_setup(args.scene, labels_dir)
    cfg = load_config(None)
    cfg["seed"] = args.seed
    rng = np.random.default_rng(args.seed)
    mp = cfg["model"]
    model = FieldModel(scene, rng, bev_dims=tuple(mp["bev_dims"]))
    data = TrainData(scene, scene.cameras(), labels)
    trainer = Trainer(model, data, train_config_from(cfg))
    report = trainer.verify_gradients(probes=args.probes)
    worst = 0.0
    for group in sorted(report):
        err = report[group]
        worst = max(worst, err)
        print(f"{group:16s} max relative error {err:.3e}")
    if worst >= args.threshold:
        print(f"FAIL: worst error {worst:.3e} >= {args.threshold:g}")
        return 2
    print(f"OK: worst error {worst:.3e} < {args.threshold:g}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    if args.threads and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    handlers = {
        "gen-scene": cmd_gen_scene,
        "train": cmd_train,
        "render": cmd_render,
        "evaluate": cmd_evaluate,
        "verify-grads": cmd_verify_grads,
    }
    try:
        return handlers[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
