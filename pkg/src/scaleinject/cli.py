"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 oracle failure,
4 partial completion (plan stopped early via ``--max-trials``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .defense import DEFAULT_THRESHOLD, default_probes, multiscale_check
from .exceptions import (
    ConfigError, InfeasibleEmbeddingError, OracleError, PartialResultError, ResponseParseError,
    ShapeMismatchError,
)
from .experiment import (
    ExperimentPlan, attack_config, load_plan, make_http_oracle, report, resolve_prompt,
    run_plan, stencil_for,
)
from .imaging import ResampleMethod, apply_perturbation, read_png, write_png
from .oracle import MockOracle, MockOracleSpec
from .optimize import run_attack, static_baseline
from .payload import EmbedSpec, embed_payload, render_text
from .scenarios import make_scenario

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_PARTIAL = 0, 2, 3, 4
METHODS = ("nearest", "bilinear", "bicubic")

log = logging.getLogger("scaleinject")


def _dims(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return h, w


def _probe(text):
    """``HxW:method``, e.g. ``8x8:bilinear``."""
    dims, _, method = text.partition(":")
    method = method or "bilinear"
    if method not in METHODS:
        raise argparse.ArgumentTypeError(f"unknown method {method!r}")
    return _dims(dims), method


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return data


def _oracle_section(args, cfg):
    section = dict(cfg.get("oracle") or {})
    if args.oracle:
        section["kind"] = args.oracle
    for key, attr in (("stencil", "stencil"), ("stencil_text", "stencil_text"),
                      ("threshold", "oracle_threshold")):
        val = getattr(args, attr, None)
        if val is not None:
            section[key] = val
    section.setdefault("kind", "mock")
    return section


def _build_oracle(section, dims, method):
    """Returns ``(oracle, stencil)``; the stencil is None for a remote oracle without one."""
    stencil = stencil_for(section, dims)
    if section["kind"] == "http":
        return make_http_oracle(section), stencil
    if stencil is None:
        raise ConfigError("the mock oracle needs --stencil or --stencil-text")
    spec = MockOracleSpec(stencil, method, float(section.get("threshold", 0.8)),
                          float(section.get("sharpness", 10.0)))
    return MockOracle(spec), stencil


def _load_inputs(args, cfg):
    """Base image, oracle, stencil and attacked output size for attack/baseline/defend."""
    method = ResampleMethod.parse(args.method)
    section = _oracle_section(args, cfg)
    if args.scenario is not None:
        sc = make_scenario(args.scenario, method=method,
                           threshold=float(section.get("threshold", 0.8)),
                           sharpness=float(section.get("sharpness", 10.0)))
        if section["kind"] == "mock":
            return sc.base, sc.oracle(), sc.stencil, sc.stencil.shape[:2], section
        oracle, _ = _build_oracle(section, sc.stencil.shape[:2], method)
        return sc.base, oracle, sc.stencil, sc.stencil.shape[:2], section
    if args.image is None:
        raise ConfigError("give --image or --scenario")
    img = read_png(args.image)
    f = args.scale
    H, W = img.shape[:2]
    if H % f or W % f:
        raise ConfigError(f"image size {(H, W)} is not a multiple of --scale {f}")
    dims = (H // f, W // f)
    oracle, stencil = _build_oracle(section, dims, method)
    return img, oracle, stencil, dims, section


def cmd_embed(args):
    src = read_png(args.source)
    f = args.scale
    H, W = src.shape[:2]
    if H % f or W % f:
        raise ConfigError(f"source size {(H, W)} is not a multiple of --scale {f}")
    if (args.payload is None) == (args.text is None):
        raise ConfigError("give exactly one of --payload or --text")
    payload = read_png(args.payload) if args.payload else render_text(args.text, (H // f, W // f))
    spec = EmbedSpec(payload, f, ResampleMethod.parse(args.method), args.max_deviation)
    out = embed_payload(src, spec, tolerance=args.tolerance)
    write_png(out, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def _attack(args, static):
    cfg = _read_config(args.config)
    unknown = set(cfg) - set(ExperimentPlan.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base, oracle, stencil, dims, section = _load_inputs(args, cfg)
    method = ResampleMethod.parse(args.method)
    if args.embed_first:
        if stencil is None:
            raise ConfigError("--embed-first needs a stencil")
        f = base.shape[0] // dims[0], base.shape[1] // dims[1]
        base = embed_payload(base, EmbedSpec(stencil, f, method), tolerance=None)
    seed = args.seed if args.seed is not None else int(cfg.get("master_seed", 0))
    rule = None
    if section["kind"] == "http":
        rule = oracle.rule
    acfg = attack_config(cfg.get("attack", {}), args.optimizer, seed, out_shape=tuple(dims),
                         method=method, success_rule=rule)
    prompt = resolve_prompt(args.prompt)
    if static:
        rec = static_baseline(base, acfg, oracle, prompt, trial_id="cli")
    else:
        rec = run_attack(base, acfg, oracle, prompt, trial_id="cli")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.json").write_text(json.dumps(rec.to_dict(), indent=2, sort_keys=True) + "\n")
    if rec.errored:
        log.error("oracle failure: %s", rec.error)
        return EXIT_ORACLE
    write_png(apply_perturbation(base, rec.perturbation), out / "adversarial.png")
    print(json.dumps({
        "success": rec.success, "iterations": rec.iterations, "api_calls": rec.api_calls,
        "visual_distance": rec.visual_distance, "final_confidence": rec.final_confidence,
    }))
    return EXIT_OK


def cmd_attack(args):
    return _attack(args, static=False)


def cmd_baseline(args):
    return _attack(args, static=True)


def cmd_evaluate(args):
    if args.config is None:
        raise ConfigError("evaluate needs --config")
    overrides = {"master_seed": args.seed, "output_dir": args.out}
    if args.optimizer:
        overrides["optimizers"] = [args.optimizer]
    if args.method_override:
        overrides["methods"] = [args.method_override]
    if args.embed_first:
        overrides["embed_first"] = True
    plan = load_plan(args.config, **overrides)
    if args.oracle:
        plan.oracle = {**plan.oracle, "kind": args.oracle}
        plan.validate()
    result = run_plan(plan, max_trials=args.max_trials)
    print(json.dumps({
        "executed": result.executed, "resumed": result.skipped,
        "complete": result.complete, "output_dir": plan.output_dir,
    }))
    if result.aborted:
        log.error("plan aborted: %s", result.aborted)
        return EXIT_ORACLE
    return EXIT_OK if result.complete else EXIT_PARTIAL


def cmd_defend(args):
    cfg = _read_config(args.config)
    img, oracle, _, dims, _ = _load_inputs(args, cfg)
    probes = args.probes or default_probes(dims, img.shape[:2])
    try:
        verdict = multiscale_check(img, probes, oracle, resolve_prompt(args.prompt),
                                   threshold=args.threshold)
    except PartialResultError as exc:
        log.error("%s", exc)
        print(json.dumps({"error": str(exc), "completed": [vars(p) for p in exc.partial]},
                         default=list))
        return EXIT_ORACLE
    text = json.dumps(verdict.to_dict(), indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_report(args):
    info = report(args.records, args.out)
    if info["skipped"]:
        log.warning("skipped %d malformed line(s)", info["skipped"])
    print(json.dumps(info))
    return EXIT_OK


def _common(p, *, image=True):
    p.add_argument("--config", help="YAML config with oracle/attack sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--oracle", choices=("mock", "http"))
    p.add_argument("--method", choices=METHODS, default="bilinear",
                   help="kernel of the attacked resize")
    p.add_argument("--prompt", default="generic", help="template name or literal prompt")
    if image:
        p.add_argument("--image", help="base image (PNG)")
        p.add_argument("--scenario", type=int, metavar="SEED",
                       help="use the built-in 64x64 mock scenario with this seed")
        p.add_argument("--scale", type=int, default=8, help="downscale factor of the victim")
        p.add_argument("--stencil", help="payload image the mock oracle looks for")
        p.add_argument("--stencil-text", dest="stencil_text")
        p.add_argument("--oracle-threshold", dest="oracle_threshold", type=float,
                       help="mock oracle similarity threshold")


def build_parser():
    parser = argparse.ArgumentParser(prog="scaleinject", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", help="hide a payload in an image")
    p.add_argument("source")
    p.add_argument("--payload")
    p.add_argument("--text")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--method", choices=METHODS, default="bilinear")
    p.add_argument("--max-deviation", type=float, default=255.0)
    p.add_argument("--tolerance", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    for name, func, hlp in (("attack", cmd_attack, "adaptive perturbation search"),
                            ("baseline", cmd_baseline, "single static perturbation")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--optimizer", choices=("hc", "ga"), default="hc")
        p.add_argument("--embed-first", action="store_true")
        p.add_argument("--out", default="attack-out")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="run an experiment plan")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--oracle", choices=("mock", "http"))
    p.add_argument("--optimizer", choices=("hc", "ga"))
    p.add_argument("--method", dest="method_override", choices=METHODS)
    p.add_argument("--embed-first", action="store_true")
    p.add_argument("--out")
    p.add_argument("--max-trials", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("defend", help="multi-scale consistency check")
    _common(p)
    p.add_argument("--probes", type=_probe, nargs="+", metavar="HxW:METHOD")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help="divergence above which the image is flagged")
    p.add_argument("--out")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("report", help="tables and traces from a records file")
    p.add_argument("records")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeMismatchError, InfeasibleEmbeddingError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (OracleError, ResponseParseError) as exc:
        log.error("oracle failure: %s", exc)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
