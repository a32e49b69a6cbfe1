"""``cos3d`` command-line entry point.

Every subcommand reads line-delimited JSON and writes line-delimited JSON.
Settings come from (highest first) command-line flags, an INI file given by
``--config`` (``[DEFAULT]`` plus one section per subcommand, keys spelled
like the long flags with ``_`` or ``-``), then built-in defaults.  The seed
is resolved as ``--seed``, then ``$COS3D_SEED``, then the config, then 0.

Exit status: 0 on success, 1 when data errors were found (details in the
diagnostics file), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path
from typing import Iterable, Iterator, Optional

from . import __version__
from .bev import render_svg, scene_bev
from .codec import CodecError, CosParseError, SerializationPolicy, decode_sequence, encode_scene
from .curation import (
    ADAPTERS,
    Diagnostic,
    UnknownAdapterError,
    canonical_line_from_dict,
    canonical_line_to_json,
    normalize,
)
from .evaluation import (
    DETECTION_THRESHOLDS,
    GROUNDING_THRESHOLDS,
    EvalConfig,
    GroundTruth,
    Protocol,
    ap_sweep,
    result_from_json,
)
from .negatives import NegativeSpec, NegativeStub, load_proximity_table, sample_negatives
from .packaging import (
    GroundingMode,
    build_annotation_job,
    load_templates,
    package_detection,
    package_grounding,
    package_negative,
)
from .packing import CONTEXT_BUDGET, PER_TILE_TOKENS, pack_stream, select_tiling, token_count

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
SEED_ENV = "COS3D_SEED"


class UsageError(Exception):
    pass


# --- I/O helpers -------------------------------------------------------------

def _read_jsonl(path, diagnostics: list) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                diagnostics.append(Diagnostic(str(path), f"corrupt JSON: {exc.msg}", lineno))


def _write_lines(path, lines: Iterable[str]) -> int:
    n = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
            n += 1
    return n


def _read_canonical(path, diagnostics: list) -> Iterator:
    for lineno, obj in _read_jsonl(path, diagnostics):
        try:
            yield canonical_line_from_dict(obj)
        except (KeyError, TypeError, ValueError) as exc:
            diagnostics.append(Diagnostic(str(path), f"bad canonical line: {exc!r}", lineno))


def _finish(args, diagnostics: list, fatal: bool) -> int:
    """Write diagnostics (if any) and turn them into an exit status."""
    if diagnostics:
        path = args.diagnostics or f"{args.output}.diagnostics.jsonl"
        _write_lines(path, (d.to_json() if isinstance(d, Diagnostic) else json.dumps(d)
                            for d in diagnostics))
        print(f"{len(diagnostics)} diagnostic(s) written to {path}", file=sys.stderr)
    return EXIT_DATA if fatal and diagnostics else EXIT_OK


def _policy(args) -> SerializationPolicy:
    try:
        policy = SerializationPolicy.parse(args.policy)
    except ValueError as exc:
        raise UsageError(f"--policy: {exc}") from None
    if "seed=" not in (args.policy or ""):
        policy = SerializationPolicy(policy.order, policy.factorization, policy.intra3d,
                                     policy.layout, policy.rotation, args.seed)
    return policy


def _require(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


# --- subcommands -------------------------------------------------------------

def cmd_normalize(args) -> int:
    _require(args, "input", "output")
    diagnostics: list = []
    drops: list[str] = []
    try:
        results = normalize(args.adapter, args.input, args.depth_mode, args.workers, diagnostics)

        def lines():
            for res in results:
                drops.extend(d.to_json() for d in res.drops)
                for line in res.lines:
                    yield canonical_line_to_json(line)

        n = _write_lines(args.output, lines())
    except UnknownAdapterError as exc:
        raise UsageError(str(exc.args[0])) from None
    if args.drops:
        _write_lines(args.drops, drops)
    print(f"normalize: {n} canonical line(s), {len(drops)} instance(s) dropped", file=sys.stderr)
    return _finish(args, diagnostics, fatal=True)


def cmd_negatives(args) -> int:
    _require(args, "input", "output")
    diagnostics: list = []
    images: dict[str, set[str]] = {}
    num_positives = 0
    for line in _read_canonical(args.input, diagnostics):
        images.setdefault(line.image_path, set()).add(line.category)
        num_positives += 1
    if args.vocabulary:
        with open(args.vocabulary, encoding="utf-8") as fh:
            vocab = sorted({v.strip() for v in fh if v.strip() and not v.startswith("#")})
    else:
        vocab = sorted(set().union(*images.values())) if images else []
    proximity = load_proximity_table(args.proximity) if args.proximity else {}
    spec = NegativeSpec(args.max_fraction, args.max_per_image, args.hard_share, proximity, args.seed)
    stubs = sample_negatives(images, vocab, spec, num_positives)
    _write_lines(args.output, (s.to_json() for s in stubs))
    print(f"negatives: {len(stubs)} stub(s) for {num_positives} positive line(s)", file=sys.stderr)
    return _finish(args, diagnostics, fatal=True)


_GROUNDING_MODES = {
    "none": (),
    "category": (GroundingMode.CATEGORY_ONLY,),
    "category_location": (GroundingMode.CATEGORY_PLUS_LOCATION,),
    "both": (GroundingMode.CATEGORY_ONLY, GroundingMode.CATEGORY_PLUS_LOCATION),
}


def cmd_package(args) -> int:
    _require(args, "input", "output")
    policy = _policy(args)
    templates = load_templates(args.templates)
    diagnostics: list = []
    sizes: dict[str, tuple[int, int]] = {}
    seen: set[str] = set()
    jobs: list[str] = []

    def conversations():
        for line in _read_canonical(args.input, diagnostics):
            sizes.setdefault(line.image_path, (line.image_width, line.image_height))
            yield package_detection(line, policy, templates, args.seed)
            for mode in _GROUNDING_MODES[args.grounding]:
                for i in range(len(line.instances)):
                    yield package_grounding(line, i, mode, policy, args.seed, templates)
            if args.annotation_jobs:
                jobs.extend(json.dumps(build_annotation_job(line, i, templates))
                            for i in range(len(line.instances)))
        if args.negatives:
            for lineno, obj in _read_jsonl(args.negatives, diagnostics):
                try:
                    stub = NegativeStub.from_dict(obj)
                except KeyError as exc:
                    diagnostics.append(Diagnostic(args.negatives, f"bad stub: missing {exc}", lineno))
                    continue
                w, h = sizes.get(stub.image_path, (None, None))
                yield package_negative(stub, w, h, templates, args.seed)

    def checked():
        for conv in conversations():
            if conv.id in seen:
                diagnostics.append(Diagnostic(args.output, f"duplicate conversation id {conv.id!r}"))
            seen.add(conv.id)
            yield conv.to_json()

    n = _write_lines(args.output, checked())
    if args.annotation_jobs:
        _write_lines(args.annotation_jobs, jobs)
    print(f"package: {n} conversation(s)", file=sys.stderr)
    return _finish(args, diagnostics, fatal=True)


def cmd_pack(args) -> int:
    _require(args, "input", "output")
    diagnostics: list = []
    notes: list[str] = []

    def lengths():
        for _, conv in _read_jsonl(args.input, diagnostics):
            tiling = None
            if conv.get("width") and conv.get("height"):
                tiling = select_tiling(int(conv["width"]), int(conv["height"]), max_tiles=args.max_tiles)
            yield conv["id"], token_count(conv, tiling, args.per_tile_tokens)

    packs = list(pack_stream(lengths(), args.budget, notes))
    _write_lines(args.output, (p.to_json() for p in packs))
    diagnostics += [Diagnostic(args.input, n) for n in notes]
    print(f"pack: {len(packs)} pack(s)", file=sys.stderr)
    # oversized items are flagged, not fatal; corrupt input is
    return _finish(args, diagnostics, fatal=len(diagnostics) > len(notes))


def cmd_encode(args) -> int:
    _require(args, "input", "output")
    policy = _policy(args)
    diagnostics: list = []

    def lines():
        for line in _read_canonical(args.input, diagnostics):
            yield json.dumps({"image_path": line.image_path, "category_name": line.category,
                              "response": encode_scene(line.instances, policy, line.intrinsics)})

    _write_lines(args.output, lines())
    return _finish(args, diagnostics, fatal=True)


def _decoded_json(seq) -> dict:
    return {
        "terminal": seq.terminal.value,
        "instances": [{"box2d": list(i.box2d_norm) if i.box2d_norm is not None else None,
                       "center": [round(float(v), 2) for v in i.center],
                       "dims": [round(float(v), 2) for v in i.dims],
                       "angles": [round(float(a), 6) for a in i.angles]}
                      for i in seq.instances],
        "diagnostics": list(seq.diagnostics),
    }


def cmd_decode(args) -> int:
    _require(args, "input", "output")
    policy = _policy(args)
    mode = "strict" if args.strict else "recover"
    diagnostics: list = []
    failed = False

    def lines():
        nonlocal failed
        for lineno, obj in _read_jsonl(args.input, diagnostics):
            text = obj.get("response", obj.get("response_text"))
            if text is None:
                diagnostics.append(Diagnostic(args.input, "no response field", lineno))
                failed = True
                continue
            keys = {k: obj[k] for k in ("image_path", "image_id", "category_name", "category") if k in obj}
            try:
                seq = decode_sequence(text, policy, mode=mode)
            except CosParseError as exc:
                failed = True
                diagnostics.append(Diagnostic(args.input, str(exc), lineno,
                                              {"offset": exc.offset, "expected": exc.expected,
                                               "found": exc.found}))
                continue
            except CodecError as exc:
                failed = True
                diagnostics.append(Diagnostic(args.input, str(exc), lineno))
                continue
            for d in seq.diagnostics:
                diagnostics.append(Diagnostic(args.input, d, lineno, {"recovered": True}))
            yield json.dumps({**keys, **_decoded_json(seq)})

    _write_lines(args.output, lines())
    fatal = failed or any(not (isinstance(d, Diagnostic) and d.extra.get("recovered")) for d in diagnostics)
    return _finish(args, diagnostics, fatal=fatal)


def _thresholds(text: str) -> tuple[float, ...]:
    if text == "detection":
        return DETECTION_THRESHOLDS
    if text == "grounding":
        return GROUNDING_THRESHOLDS
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"--thresholds: cannot parse {text!r}") from None


def cmd_evaluate(args) -> int:
    _require(args, "predictions", "gt", "output")
    policy = _policy(args)
    try:
        config = EvalConfig(_thresholds(args.thresholds), Protocol(args.protocol), args.uniform_scores)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    diagnostics: list = []
    gt = GroundTruth.from_canonical(_read_canonical(args.gt, diagnostics))
    results = []
    mode = "strict" if args.strict else "recover"
    for lineno, obj in _read_jsonl(args.predictions, diagnostics):
        try:
            results.append(result_from_json(obj, policy, mode))
        except KeyError as exc:
            diagnostics.append(Diagnostic(args.predictions, f"missing field {exc}", lineno))
    fatal = bool(diagnostics)
    report = ap_sweep(results, gt, config)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json() + "\n")
    table = report.to_table()
    if args.table:
        with open(args.table, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table + "\n")
    else:
        print(table)
    diagnostics += [{"message": d} for d in report.diagnostics]
    return _finish(args, diagnostics, fatal=fatal)


def cmd_bev(args) -> int:
    _require(args, "input", "output")
    diagnostics: list = []
    image = args.image
    objects = []
    for line in _read_canonical(args.input, diagnostics):
        if image is None:
            image = line.image_path
        if line.image_path == image:
            objects += [(line.category, r.box3d) for r in line.instances]
    if image is None:
        diagnostics.append(Diagnostic(args.input, "no canonical lines"))
        return _finish(args, diagnostics, fatal=True)
    polys = scene_bev(objects)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"image_path": image, "frame": "camera_xz_meters", "objects": polys}) + "\n")
    if args.svg:
        with open(args.svg, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_svg(polys))
    if not objects:
        diagnostics.append(Diagnostic(args.input, f"image {image!r} not found or empty"))
    return _finish(args, diagnostics, fatal=True)


# --- parser ------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="INI", help="INI file with [DEFAULT] and per-command sections")
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (overrides ${SEED_ENV} and the config)")
    p.add_argument("--diagnostics", metavar="PATH",
                   help="diagnostics JSONL path (default: <output>.diagnostics.jsonl)")
    return p


def _io(p, input_help: str, output_help: str) -> None:
    p.add_argument("--input", metavar="PATH", help=input_help)
    p.add_argument("--output", metavar="PATH", help=output_help)


def _policy_arg(p) -> None:
    p.add_argument("--policy", default="",
                   help="serialization policy, e.g. 'order=near_to_far,rotation=euler_unit' "
                        "(keys: order, factorization, intra3d, layout, rotation, seed)")


def _mode_args(p, default_recover: bool) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--strict", dest="strict", action="store_true", default=not default_recover,
                   help="reject malformed responses with an offset diagnostic"
                        + (" (default)" if not default_recover else ""))
    g.add_argument("--recover", dest="strict", action="store_false",
                   help="salvage well-formed instances and report the rest"
                        + (" (default)" if default_recover else ""))


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="cos3d", description="3D detection corpus builder and evaluator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    common = _common()
    subs = {}

    p = sub.add_parser("normalize", parents=[common], help="dataset annotations -> canonical lines",
                       description="Ingest a dataset, filter instances and write canonical JSONL.")
    _io(p, "dataset file or directory", "canonical JSONL")
    p.add_argument("--adapter", default="synthetic", help=f"input adapter ({', '.join(sorted(ADAPTERS))})")
    p.add_argument("--drops", metavar="PATH", help="write dropped instances and reasons here")
    p.add_argument("--depth-mode", choices=("z", "euclidean"), default="z", help="depth used for ordering")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_normalize)
    subs["normalize"] = p

    p = sub.add_parser("negatives", parents=[common], help="sample absent-category stubs",
                       description="Sample negative (absent category) queries per image.")
    _io(p, "canonical JSONL", "negative stubs JSONL")
    p.add_argument("--vocabulary", metavar="PATH", help="category list, one per line (default: input categories)")
    p.add_argument("--proximity", metavar="PATH", help="TAB file 'category<TAB>neighbor,...' for hard negatives")
    p.add_argument("--max-fraction", type=float, default=0.10, help="cap on negatives / all examples")
    p.add_argument("--max-per-image", type=int, default=2, help="cap per image")
    p.add_argument("--hard-share", type=float, default=0.5, help="share of hard negatives")
    p.set_defaults(func=cmd_negatives)
    subs["negatives"] = p

    p = sub.add_parser("package", parents=[common], help="canonical lines -> conversations",
                       description="Build conversation records for detection, grounding and negatives.")
    _io(p, "canonical JSONL", "conversations JSONL")
    _policy_arg(p)
    p.add_argument("--negatives", metavar="PATH", help="negative stubs JSONL")
    p.add_argument("--grounding", choices=sorted(_GROUNDING_MODES), default="none",
                   help="also emit one grounding conversation per instance")
    p.add_argument("--annotation-jobs", metavar="PATH", help="write annotation job records here")
    p.add_argument("--templates", metavar="PATH", help="prompt template JSON (default: bundled)")
    p.set_defaults(func=cmd_package)
    subs["package"] = p

    p = sub.add_parser("pack", parents=[common], help="pack conversations into context windows",
                       description="Greedy online packing of conversations into token budgets.")
    _io(p, "conversations JSONL", "pack manifest JSONL")
    p.add_argument("--budget", type=int, default=CONTEXT_BUDGET, help="tokens per pack")
    p.add_argument("--per-tile-tokens", type=int, default=PER_TILE_TOKENS, help="visual tokens per tile")
    p.add_argument("--max-tiles", type=int, default=12, help="tile cap per image")
    p.set_defaults(func=cmd_pack)
    subs["pack"] = p

    p = sub.add_parser("encode", parents=[common], help="canonical lines -> response strings",
                       description="Serialize each canonical line under a policy.")
    _io(p, "canonical JSONL", "responses JSONL")
    _policy_arg(p)
    p.set_defaults(func=cmd_encode)
    subs["encode"] = p

    p = sub.add_parser("decode", parents=[common], help="response strings -> structured boxes",
                       description="Parse responses ('response' or 'response_text' fields).")
    _io(p, "responses JSONL", "decoded JSONL")
    _policy_arg(p)
    _mode_args(p, default_recover=False)
    p.set_defaults(func=cmd_decode)
    subs["decode"] = p

    p = sub.add_parser("evaluate", parents=[common], help="AP3D report",
                       description="Score predictions against canonical ground truth.")
    p.add_argument("--predictions", metavar="PATH",
                   help="JSONL of {image_id, category, response_text | boxes3d}")
    p.add_argument("--gt", metavar="PATH", help="canonical JSONL ground truth")
    p.add_argument("--output", metavar="PATH", help="report JSON")
    p.add_argument("--table", metavar="PATH", help="aligned text table (default: stdout)")
    p.add_argument("--thresholds", default="detection",
                   help="'detection', 'grounding' or a comma list of IoU thresholds")
    p.add_argument("--protocol", choices=[m.value for m in Protocol], default=Protocol.TARGET_AWARE.value,
                   help="which predictions count")
    p.add_argument("--uniform-scores", action="store_true", help="rank all predictions as tied")
    _policy_arg(p)
    _mode_args(p, default_recover=True)
    p.set_defaults(func=cmd_evaluate)
    subs["evaluate"] = p

    p = sub.add_parser("bev", parents=[common], help="bird's-eye-view footprints",
                       description="Write ground-plane footprints of one image's boxes.")
    _io(p, "canonical JSONL", "polygons JSON")
    p.add_argument("--image", help="image path to plot (default: first in input)")
    p.add_argument("--svg", metavar="PATH", help="also write an SVG with a 1 m grid")
    p.set_defaults(func=cmd_bev)
    subs["bev"] = p
    return parser, subs


def _apply_config(path: str, subs: dict[str, argparse.ArgumentParser]) -> Optional[str]:
    """Install config values as parser defaults; return the configured seed, if any."""
    cfg = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cfg.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    unknown = [s for s in cfg.sections() if s not in subs]
    if unknown:
        raise UsageError(f"config {path}: unknown section(s) {', '.join(unknown)}")
    seed = cfg.defaults().get("seed")
    for name, p in subs.items():
        section = cfg[name] if cfg.has_section(name) else cfg[cfg.default_section]
        actions = {a.dest: a for a in p._actions if a.dest not in ("help", "config", "func")}
        for key, value in section.items():
            dest = key.replace("-", "_")
            if dest == "seed":
                continue
            if dest not in actions:
                if cfg.has_section(name) and key in cfg[name] and key not in cfg.defaults():
                    raise UsageError(f"config {path}: [{name}] has unknown key {key!r}")
                continue
            act = actions[dest]
            if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                try:
                    value = section.getboolean(key)
                except ValueError:
                    raise UsageError(f"config {path}: {key} must be a boolean") from None
            p.set_defaults(**{dest: value})
        if cfg.has_section(name) and "seed" in cfg[name]:
            p.set_defaults(_config_seed=cfg[name]["seed"])
    return seed


def resolve_seed(flag: Optional[int], env: Optional[str], configured: Optional[str]) -> int:
    for source, value in (("--seed", flag), (SEED_ENV, env), ("config seed", configured)):
        if value is None or value == "":
            continue
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"{source}: {value!r} is not an integer") from None
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        config_seed = _apply_config(known.config, subs) if known.config else None
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cos3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    try:
        args.seed = resolve_seed(args.seed, os.environ.get(SEED_ENV),
                                 getattr(args, "_config_seed", None) or config_seed)
        return args.func(args)
    except UsageError as exc:
        subs[args.command].print_usage(sys.stderr)
        print(f"cos3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cos3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
