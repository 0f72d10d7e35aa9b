"""Command-line entry points.

Exit codes: 1 usage/parameter error, 2 I/O error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from .analysis import count_report, effective_receptive_field, erf_overlay, interpolation_eval, verify_multipath, weight_statistics
from .autodiff import Tensor
from .basenet import BaseNetConfig, forward_base, stage_plan
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CacheInvalidError, ContractViolation, DimensionError, NumericError, ParameterError, RegistryError
from .hypernet import build_cache, cached_forward, predict_weights
from .imaging import read_png, write_png
from .operators import apply_operator, edge_map, get_operator, normalize_gamma
from .training import HyperConfig, TrainConfig, evaluate, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2; we use 1
        raise _UsageError(message)


def _parse_gamma(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise _UsageError(f"bad --gamma value {text!r}")


def _load_corpus_dir(path: str) -> list[np.ndarray]:
    files = sorted(glob.glob(os.path.join(path, "*.png")))
    if not files:
        raise OSError(f"no PNG files in {path!r}")
    return [read_png(f) for f in files]


def _gamma_vector_for(ckpt, name: str, raw):
    spec = next((s for s in ckpt.operator_specs() if s.name == name), None)
    if spec is None:
        spec = get_operator(name)[0]
    g = normalize_gamma(spec, raw, include_id=ckpt.joint)
    if g.shape[0] < ckpt.gamma_dim:
        g = np.concatenate([g, np.zeros(ckpt.gamma_dim - g.shape[0])])
    return g


def _apply_model(ckpt, name: str, raw, image: np.ndarray, cheap: bool) -> tuple[np.ndarray, int]:
    gamma = _gamma_vector_for(ckpt, name, raw)
    img_t = Tensor(image.transpose(2, 0, 1)[None].astype(np.float32))
    edge_t = Tensor(edge_map(image)[None].astype(np.float32))
    if cheap:
        cache = build_cache(ckpt.base, ckpt.net, img_t, edge_t)
        out, recomputed = cached_forward(ckpt.base, ckpt.net, cache, gamma)
    else:
        out = forward_base(ckpt.base, predict_weights(ckpt.net, gamma), img_t, edge_t)
        recomputed = sum(1 for kind, _ in stage_plan(ckpt.base) if kind in ("conv", "norm"))
    pred = np.clip(out.data[0].transpose(1, 2, 0).astype(np.float64), 0.0, 1.0)
    return pred, recomputed


def _cmd_train(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    base = BaseNetConfig(**{k: (tuple(v) if k == "norm_after" and v is not None else v) for k, v in raw.pop("base", {}).items()})
    hyper = HyperConfig(**raw.pop("hyper", {}))
    if "gamma_values" in raw:
        raw["gamma_values"] = {k: tuple(v) for k, v in raw["gamma_values"].items()}
    cfg = TrainConfig(base=base, hyper=hyper, checkpoint_path=args.out, **raw)
    corpus = _load_corpus_dir(args.corpus) if args.corpus else None
    train(cfg, corpus, log=lambda line: print(line))
    print(f"checkpoint written to {args.out}", file=sys.stderr)
    return 0


def _cmd_apply(args) -> int:
    ckpt = load_checkpoint(args.model)
    image = read_png(args.input)
    pred, recomputed = _apply_model(ckpt, args.operator, _parse_gamma(args.gamma), image, args.cheap)
    write_png(args.output, pred)
    print(f"layers_recomputed={recomputed}", file=sys.stderr)
    return 0


def _cmd_oracle(args) -> int:
    image = read_png(args.input)
    out = apply_operator(args.operator, image, _parse_gamma(args.gamma), seed=args.seed)
    write_png(args.output, out)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(args.model, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _write_report(args, payload: str):
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload)


def _cmd_analyze(args) -> int:
    if args.what == "counts":
        base = BaseNetConfig() if not args.config else BaseNetConfig(**json.load(open(args.config)))
        rep = count_report(base, mode=args.mode, layer=args.layer, m=args.m)
        print(f"conv={rep.conv_count} norm={rep.norm_count} fc={rep.fc_count} total={rep.total_saved}")
        _write_report(args, rep.to_json())
        return 0
    if args.what == "equiv":
        ckpt = load_checkpoint(args.model)
        rep = verify_multipath(ckpt.net, trials=args.trials, tol=args.tol)
        print(("PASS" if rep.passed else "VIOLATION") + f" worst={rep.worst_error:.3e} tol={rep.tol:.1e}")
        _write_report(args, rep.to_json())
        return 0
    if args.what == "weights":
        ca = load_checkpoint(args.model_a)
        cb = load_checkpoint(args.model_b)
        raw = _parse_gamma(args.gamma)
        wa = predict_weights(ca.net, _gamma_vector_for(ca, args.operator, raw))
        wb = predict_weights(cb.net, _gamma_vector_for(cb, args.operator, raw))
        stats = weight_statistics(wa, wb)
        for s in stats.layers:
            corr = "undef" if s.correlation is None else f"{s.correlation:+.3f}"
            print(f"layer {s.layer:2d}: corr={corr} mean=({s.mean_a:+.4f}, {s.mean_b:+.4f}) var=({s.var_a:.5f}, {s.var_b:.5f})")
        _write_report(args, stats.to_json())
        return 0
    if args.what == "erf":
        ckpt = load_checkpoint(args.model)
        image = read_png(args.input)
        x, y = (int(v) for v in args.point.split(","))
        gamma = _gamma_vector_for(ckpt, args.operator, _parse_gamma(args.gamma))
        erf = effective_receptive_field(ckpt.base, ckpt.net, gamma, image, (x, y))
        if args.overlay:
            write_png(args.overlay, erf_overlay(image, erf))
        payload = json.dumps(
            {"point": list(erf.point), "threshold": erf.threshold, "coverage": erf.coverage(), "degenerate": erf.degenerate}
        )
        print(payload)
        _write_report(args, payload)
        return 0
    if args.what == "interp":
        ckpt = load_checkpoint(args.model)
        cfg = ckpt.train_config()
        corpus = _load_corpus_dir(args.corpus)
        rep = interpolation_eval(
            cfg, ckpt.net, args.operator, _parse_gamma(args.train_gammas), _parse_gamma(args.test_gammas), corpus
        )
        print(rep.to_json())
        _write_report(args, rep.to_json())
        return 0
    raise _UsageError(f"unknown analyze subcommand {args.what!r}")


def build_parser() -> _Parser:
    p = _Parser(prog="paramop", description="Parameter-conditioned image operator networks")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True, help="TrainConfig JSON")
    t.add_argument("--corpus", help="directory of PNG images (procedural corpus when omitted)")
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.set_defaults(fn=_cmd_train)

    a = sub.add_parser("apply", help="run a trained model on an image")
    a.add_argument("--model", required=True)
    a.add_argument("--operator", required=True)
    a.add_argument("--gamma", required=True, help="comma-separated raw parameter values")
    a.add_argument("--input", required=True)
    a.add_argument("--output", required=True)
    a.add_argument("--cheap", action="store_true", help="cheap-tuning path (single adjustable layer)")
    a.set_defaults(fn=_cmd_apply)

    o = sub.add_parser("oracle", help="run a reference operator on an image")
    o.add_argument("--operator", required=True)
    o.add_argument("--gamma", required=True)
    o.add_argument("--input", required=True)
    o.add_argument("--output", required=True)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(fn=_cmd_oracle)

    z = sub.add_parser("analyze", help="analysis reports")
    z.add_argument("what", choices=["erf", "weights", "equiv", "counts", "interp"])
    z.add_argument("--model")
    z.add_argument("--model-a")
    z.add_argument("--model-b")
    z.add_argument("--config", help="BaseNetConfig JSON (counts)")
    z.add_argument("--mode", default="all_conv")
    z.add_argument("--layer", type=int)
    z.add_argument("--m", type=int, default=2)
    z.add_argument("--trials", type=int, default=100)
    z.add_argument("--tol", type=float, default=1e-5)
    z.add_argument("--operator")
    z.add_argument("--gamma", default="")
    z.add_argument("--input")
    z.add_argument("--point", help="x,y")
    z.add_argument("--overlay", help="overlay PNG output path")
    z.add_argument("--train-gammas")
    z.add_argument("--test-gammas")
    z.add_argument("--corpus")
    z.add_argument("--out", help="JSON report path")
    z.set_defaults(fn=_cmd_analyze)

    s = sub.add_parser("serve", help="HTTP service for interactive tuning")
    s.add_argument("--model", required=True)
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--static", help="directory of UI assets to serve at /")
    s.set_defaults(fn=_cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ParameterError, ContractViolation, DimensionError, RegistryError, CacheInvalidError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, FileNotFoundError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
