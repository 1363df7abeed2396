"""Command-line entry point: ``mmkit <command> ...``.

Exit codes: 0 success, 1 validation failures, 2 I/O or configuration errors.
Config precedence is flags, then the JSON file from ``--config`` (or the
``MMKIT_CONFIG`` environment variable), then built-in defaults.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from mmkit import decoding, denoiser, kernels, modality, packer, pipeline
from mmkit.modality import BudgetSet
from mmkit.records import Codec
from mmkit.serialization import canonical_dumps, rle_encode
from mmkit.token_space import ActionRanges, ByteTokenizer, CodecError, CuboidNorm

CONFIG_ENV = "MMKIT_CONFIG"
MAX_GRADCHECK_SEQ = 32

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class ConfigError(Exception):
    pass


def load_config(path):
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def _budget(args, cfg) -> BudgetSet:
    b = dict(cfg.get("budgets", {}))
    for key in ("encoder_max", "decoder_max", "packed_encoder", "packed_decoder"):
        flag = getattr(args, key, None)
        if flag is not None:
            b[key] = flag
    try:
        return BudgetSet(**b)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad budgets: {e}") from None


def _read_lines(path) -> list[str]:
    if path in (None, "-"):
        return sys.stdin.readlines()
    with open(path, encoding="utf-8") as fh:
        return fh.readlines()


def _open_out(path, default=None):
    if path in (None, "-"):
        return contextlib.nullcontext(default or sys.stdout)
    return open(path, "w", encoding="utf-8")


# --------------------------------------------------------------------------


def cmd_codec(args, cfg) -> int:
    r_max = args.r_max if args.r_max is not None else cfg.get("r_max", 10.0)
    codec = Codec(ByteTokenizer(), r_max=r_max, cuboid_norm=CuboidNorm(**cfg.get("cuboid", {})),
                  action_ranges=ActionRanges(**{k: tuple(v) for k, v in cfg.get("action", {}).items()}))
    fn = codec.encode if args.direction == "encode" else codec.decode
    lines = _read_lines(args.input)
    errors = 0
    with _open_out(args.output) as out, _open_out(args.errors, sys.stderr) as err:
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                out.write(canonical_dumps(fn(json.loads(line))) + "\n")
            except (ValueError, CodecError, TypeError, KeyError) as e:
                errors += 1
                err.write(canonical_dumps({"line": n, "error": str(e)}) + "\n")
    return EXIT_INVALID if errors else EXIT_OK


def cmd_shapes(args, cfg) -> int:
    preset = modality.PAPER_MODALITIES
    shapes = modality.input_shapes(preset)
    a = preset["audio_in"]
    seg = modality.audio_segment(a["sample_rate"], a["fft_hop_length"], a["subsegment_hops"])
    rows = []
    for name, s in shapes.items():
        rows.append((name, f"{s.height}x{s.width}/{s.patch}", f"{s.rows}x{s.cols}", s.count))
    for name, n in modality.target_tokens(preset).items():
        rows.append((f"{name}_target", "", "", n))
    for kind in ("image_history", "audio_history"):
        lat = preset[kind]["latent_size"]
        budgets = ",".join(str(modality.history_budget(f, lat)) for f in range(1, 5))
        rows.append((f"{kind}_budget", f"{lat}/frame", "", budgets))
    with _open_out(args.output) as out:
        for r in rows:
            out.write(f"{r[0]:<22}{r[1]:<14}{r[2]:<8}{r[3]}\n")
        out.write(f"{'audio_segment':<22}{seg.samples} samples, {seg.seconds:.3f} s\n")
        out.write(f"{'max_encoder_pretrain':<22}{modality.max_encoder_tokens(preset, 'pretrain')}\n")
    return EXIT_OK


def cmd_maskgen(args, cfg) -> int:
    if args.kind == "dynamic":
        masked = [int(x) for x in args.masked.split(",")] if args.masked else []
        try:
            m = denoiser.dynamic_decoder_mask(args.n, masked)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INVALID
        rec = {"kind": "dynamic", "n": args.n, "M": list(m.masked), "mask": rle_encode(m.allowed)}
    elif args.kind in ("row", "column", "conv"):
        try:
            a = denoiser.sparse_pattern((args.rows, args.cols), args.kind, args.window)
        except denoiser.ConfigError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        rec = {"kind": args.kind, "grid": [args.rows, args.cols], "window": args.window, "mask": rle_encode(a)}
    else:
        budget = _budget(args, cfg)
        enc = [int(x) for x in args.enc_lens.split(",")]
        dec = [int(x) for x in args.dec_lens.split(",")]
        if len(enc) != len(dec) or not 1 <= len(enc) <= 2:
            print("error: need one or two members with matching --enc-lens/--dec-lens", file=sys.stderr)
            return EXIT_INVALID
        members = [packer.PackMember(i, np.zeros(e), np.zeros(d)) for i, (e, d) in enumerate(zip(enc, dec))]
        try:
            b = packer.pack(members[0], members[1] if len(members) == 2 else None, budget)
        except packer.PackError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INVALID
        rec = {"kind": "packing", "enc_segments": b.enc_segments.tolist(), "dec_segments": b.dec_segments.tolist(),
               "enc_mask": rle_encode(b.enc_mask), "dec_mask": rle_encode(b.dec_mask),
               "cross_mask": rle_encode(b.cross_mask)}
    with _open_out(args.output) as out:
        out.write(canonical_dumps(rec) + "\n")
    return EXIT_OK


def cmd_pack(args, cfg) -> int:
    budget = _budget(args, cfg)
    if args.workload in packer.WORKLOADS:
        stream = packer.WORKLOADS[args.workload](n=args.n, seed=args.seed)
    else:
        try:
            stream = packer.read_workload(_read_lines(args.workload))
        except packer.PackError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INVALID
    try:
        emissions, stats = packer.run_stream(stream, budget)
    except packer.PackError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    if not emissions:
        print("error: empty workload", file=sys.stderr)
        return EXIT_INVALID
    if args.emissions:
        with open(args.emissions, "w", encoding="utf-8") as fh:
            fh.write(packer.emissions_jsonl(emissions, stats))
    with _open_out(args.output) as out:
        out.write(packer.format_bench(stats))
    return EXIT_OK


def cmd_pipeline(args, cfg) -> int:
    lines = _read_lines(args.records)
    # one independent stream per record so output does not depend on sharding
    rngs = pipeline.worker_rngs(args.seed, max(1, len(lines)))
    errors = 0
    with _open_out(args.output) as out:
        for n, (line, rng) in enumerate(zip(lines, rngs), 1):
            if not line.strip():
                continue
            try:
                rec = pipeline.ExampleRecord.from_dict(json.loads(line))
                out.write(pipeline.construct_sample(rec, rng).to_jsonl() + "\n")
            except (ValueError, TypeError, KeyError) as e:
                errors += 1
                sys.stderr.write(canonical_dumps({"line": n, "error": str(e)}) + "\n")
    return EXIT_INVALID if errors else EXIT_OK


def _broken_backward(kind, case, d_out, **kw):
    grads = kernels.attention_backward(kind, case, d_out, **kw)
    grads = dict(grads)
    grads["q"] = grads["q"].copy()
    grads["q"][0, 0, 0] += 1e-3
    return grads


def cmd_gradcheck(args, cfg) -> int:
    if args.seq > MAX_GRADCHECK_SEQ:
        print(f"error: seq {args.seq} is too large for finite differences; use --seq <= {MAX_GRADCHECK_SEQ}",
              file=sys.stderr)
        return EXIT_IO
    backward = _broken_backward if args.corrupt else None
    failed = 0
    with _open_out(args.output) as out:
        for s in range(args.seed, args.seed + args.seeds):
            rep = kernels.gradcheck(args.kind, args.heads, args.seq, args.head_dim, seed=s, backward=backward)
            worst = max(rep.max_errors, key=rep.max_errors.get)
            status = "PASS" if rep.passed else "FAIL"
            out.write(f"{status} {args.kind} seed={s} max_rel_err={rep.max_errors[worst]:.3e} "
                      f"at {worst}{list(rep.worst_index[worst])}\n")
            failed += not rep.passed
        out.write(f"{args.seeds - failed}/{args.seeds} passed (tolerance 1e-6)\n")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_presets(args, cfg) -> int:
    with _open_out(args.output) as out:
        out.write(decoding.format_presets())
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help=f"JSON config (default: ${CONFIG_ENV})")
    common.add_argument("--output", "-o", default=None)

    budgets = argparse.ArgumentParser(add_help=False)
    for key in ("encoder_max", "decoder_max", "packed_encoder", "packed_decoder"):
        budgets.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int, default=None)

    p = argparse.ArgumentParser(prog="mmkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("codec", parents=[common], help="encode/decode geometric entity JSONL")
    c.add_argument("direction", choices=("encode", "decode"))
    c.add_argument("--input", "-i", default=None)
    c.add_argument("--errors", default=None, help="error stream path (default stderr)")
    c.add_argument("--r-max", dest="r_max", type=float, default=None)
    c.set_defaults(func=cmd_codec)

    s = sub.add_parser("shapes", parents=[common], help="print modality shape arithmetic")
    s.set_defaults(func=cmd_shapes)

    m = sub.add_parser("maskgen", parents=[common, budgets], help="emit masks as run-length JSON")
    m.add_argument("kind", choices=("dynamic", "row", "column", "conv", "packing"))
    m.add_argument("--n", type=int, default=8)
    m.add_argument("--masked", default="")
    m.add_argument("--rows", type=int, default=4)
    m.add_argument("--cols", type=int, default=4)
    m.add_argument("--window", type=int, default=3)
    m.add_argument("--enc-lens", dest="enc_lens", default="4")
    m.add_argument("--dec-lens", dest="dec_lens", default="4")
    m.set_defaults(func=cmd_maskgen)

    k = sub.add_parser("pack", parents=[common, budgets], help="packing benchmark")
    k.add_argument("action", choices=("bench",))
    k.add_argument("--workload", default="short-heavy", help="bundled workload name or JSONL path")
    k.add_argument("--n", type=int, default=20000, help="size of a bundled workload")
    k.add_argument("--emissions", default=None, help="write emissions JSONL here")
    k.set_defaults(func=cmd_pack)

    q = sub.add_parser("pipeline", parents=[common], help="construct training samples")
    q.add_argument("action", choices=("sample",))
    q.add_argument("--records", default=None, help="record JSONL (default stdin)")
    q.set_defaults(func=cmd_pipeline)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of attention backward")
    g.add_argument("--kind", choices=("qk_norm", "cosine"), default="qk_norm")
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--seq", type=int, default=8)
    g.add_argument("--head-dim", dest="head_dim", type=int, default=16)
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--corrupt", action="store_true", help="inject a broken backward (negative control)")
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("presets", parents=[common], help="decoding presets")
    r.add_argument("action", choices=("print",))
    r.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
