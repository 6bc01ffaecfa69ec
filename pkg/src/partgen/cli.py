"""Command-line entry points: dataset synthesis, training, sampling, encoding,
editing, evaluation, and the inference server."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .data import load_dataset, read_record, write_record
from .metrics import ConnectionSpec, evaluate_sets, format_report
from .pipeline import (
    edit_transform,
    encode_shape,
    generate,
    interpolate_part,
    load_model,
    mix_parts,
    resample_parts,
    save_model,
    train_stage1,
    train_stage2,
)
from .synthetic import BoxTemplate, write_synthetic_dataset


def _add_config_flags(parser: argparse.ArgumentParser):
    skip = {"seed", "adam_betas"}
    for field in dataclasses.fields(TrainConfig):
        if field.name in skip:
            continue
        flag = "--" + field.name.replace("_", "-")
        if field.type == "bool" or isinstance(field.default, bool):
            parser.add_argument(flag, dest=field.name, action="store_true", default=None)
        else:
            caster = str if field.name in ("class_id", "stage2_mode") else float
            parser.add_argument(flag, dest=field.name, type=caster, default=None)


def _build_config(args) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    base["seed"] = args.seed
    for field in dataclasses.fields(TrainConfig):
        value = getattr(args, field.name, None)
        if value is None or field.name == "seed":
            continue
        if field.type == "int" or isinstance(field.default, int) and not isinstance(field.default, bool):
            value = int(value)
        base[field.name] = value
    return TrainConfig.from_dict(base)


def _maybe_deterministic(args):
    if getattr(args, "deterministic", None):
        torch.set_num_threads(1)


def cmd_make_data(args):
    manifest = write_synthetic_dataset(args.out, seed=args.seed, n_train=args.train,
                                       n_test=args.test, template=BoxTemplate(),
                                       n_points=args.points)
    print(f"wrote {manifest}")


def cmd_train(args):
    cfg = _build_config(args)
    _maybe_deterministic(args)
    dataset, manifest = load_dataset(args.data, "train", point_budget=cfg.point_budget,
                                     seed=cfg.seed)
    if args.stage in ("1", "all"):
        result = train_stage1(dataset, cfg, connections=manifest.connections)
        model = result.model
        print(f"stage 1 done: recon {result.history['recon'][0]:.4f} -> "
              f"{result.history['recon'][-1]:.4f}")
    else:
        if not args.ckpt:
            sys.exit("--ckpt required for --stage 2")
        model, _ = load_model(args.ckpt)
    if args.stage in ("2", "all"):
        result = train_stage2(dataset, model, cfg)
        model = result.model
        fits = result.history["fit_eval"]
        print(f"stage 2 done: fit {fits[0]:.4f} -> {fits[-1]:.4f}")
    save_model(args.out, model, {"config": cfg.to_dict(), "config_hash": cfg.digest(),
                                 "stage": args.stage,
                                 "epochs": {"stage1": cfg.stage1_epochs if args.stage != "2" else 0,
                                            "stage2": cfg.stage2_epochs if args.stage != "1" else 0}})
    print(f"saved {args.out}")


def cmd_sample(args):
    _maybe_deterministic(args)
    model, _ = load_model(args.ckpt)
    rng = torch.Generator().manual_seed(args.seed)
    clouds = generate(model, args.n, args.points_per_part, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(clouds):
        write_record(out / f"sample_{i:04d}.txt", cloud)
    print(f"wrote {len(clouds)} shapes to {out}")


def _load_session(model, path):
    shape = read_record(path, model.spec.class_id, model.m)
    return encode_shape(model, shape)


def cmd_encode(args):
    model, _ = load_model(args.ckpt)
    session = _load_session(model, args.record)
    np.savez(
        args.out,
        z=session.latents.z.numpy(),
        present=session.latents.present.numpy(),
        mu=session.latents.mu.numpy(),
        sigma=session.latents.sigma.numpy(),
        shifts=session.transforms.shifts(),
        scales=session.transforms.scales(),
        counts=np.asarray(session.points_per_part),
    )
    print(f"encoded {args.record} -> {args.out}")


def cmd_edit(args):
    model, _ = load_model(args.ckpt)
    rng = torch.Generator().manual_seed(args.seed)
    session = _load_session(model, args.record)
    if args.edit_op == "resample":
        parts = [int(p) for p in args.parts.split(",")] if args.parts else []
        cloud = resample_parts(model, session, parts, rng)
        write_record(args.out, cloud)
    elif args.edit_op == "mix":
        donors = [_load_session(model, d) for d in args.donor]
        assignment = {int(k): int(v) for k, v in
                      (pair.split(":") for pair in args.assignment.split(","))}
        cloud = mix_parts(model, [session] + donors, assignment, rng)
        write_record(args.out, cloud)
    elif args.edit_op == "interp":
        target = _load_session(model, args.target)
        frames = interpolate_part(model, session, args.part,
                                  target.latents.z[args.part], rng, steps=args.steps)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(frames):
            write_record(out / f"frame_{k:03d}.txt", frame)
    elif args.edit_op == "transform":
        constraints = {int(j): spec for j, spec in json.loads(args.constraints).items()}
        result = edit_transform(model, session, constraints, rng)
        write_record(args.out, result.cloud)
        print(f"residual {result.residual:.3e} converged={result.converged}")
    print("edit done")


def _read_dir(path, class_id, m):
    files = sorted(Path(path).glob("*.txt"))
    if not files:
        sys.exit(f"no .txt records in {path}")
    return [read_record(f, class_id, m) for f in files]


def cmd_eval(args):
    connections = None
    if args.connections:
        raw = json.loads(Path(args.connections).read_text())
        pairs = raw["connections"] if isinstance(raw, dict) else raw
        connections = ConnectionSpec.from_pairs(pairs)
    generated = _read_dir(args.generated, "eval", args.m)
    reference = _read_dir(args.reference, "eval", args.m)
    result = evaluate_sets(generated, reference, m=args.m, connections=connections,
                           n_points=args.points, n_snap=args.snap, seed=args.seed)
    print(format_report(result))
    if args.out:
        payload = {k: v for k, v in result.items() if k != "per_part"}
        payload["per_part"] = {str(k): v for k, v in result["per_part"].items()}
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
        print(f"wrote {args.out}")


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint_path=args.ckpt, max_sessions=args.max_sessions)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partgen")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="synthesize a segmented box-furniture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--test", type=int, default=16)
    p.add_argument("--points", type=int, default=512)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="run training stage 1, 2, or both")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--config", help="JSON config mirroring TrainConfig")
    p.add_argument("--ckpt", help="input checkpoint (stage 2)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate shapes from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--points-per-part", type=int, default=128)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("encode", help="encode a shape record to latents + transforms")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("edit", help="edit an encoded shape")
    esub = p.add_subparsers(dest="edit_op", required=True)
    for name in ("resample", "mix", "interp", "transform"):
        ep = esub.add_parser(name)
        ep.add_argument("--ckpt", required=True)
        ep.add_argument("--record", required=True)
        ep.add_argument("--seed", type=int, required=True)
        ep.add_argument("--out", required=True)
        if name == "resample":
            ep.add_argument("--parts", default="")
        if name == "mix":
            ep.add_argument("--donor", action="append", required=True)
            ep.add_argument("--assignment", required=True,
                            help="comma list part:donor (0 = the --record session)")
        if name == "interp":
            ep.add_argument("--target", required=True)
            ep.add_argument("--part", type=int, required=True)
            ep.add_argument("--steps", type=int, default=10)
        if name == "transform":
            ep.add_argument("--constraints", required=True,
                            help='JSON like {"0": {"shift": [null, null, 1.2]}}')
        ep.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="part-level metrics between two record directories")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--connections", help="JSON with [j1, j2] pairs")
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--snap", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the JSON inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--max-sessions", type=int, default=64)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
