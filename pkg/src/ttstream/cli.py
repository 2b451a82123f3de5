"""Command-line interface: ``tt-stream <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
Frame indices in every report are 0-based.
"""
import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from .encoder import encode_offline
from .exceptions import TTStreamError
from .maskgen import MaskSpec, avg_lookahead, build_mask, frame_lookahead, reception_field
from .model import ModelConfig, count_parameters
from .modelio import (
    load_checkpoint,
    payload_bytes,
    random_init,
    read_features,
    save_checkpoint,
    write_features,
)
from .quant import layer_errors, quantize_model
from .streaming import encode_streaming, verify_equivalence
from .transducer import beam_search, greedy_decode, transducer_forward_logprob


class UsageError(Exception):
    pass


def parse_history(text):
    if text.lower() in ("inf", "infinity", "none", "unbounded"):
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"history must be an integer or 'inf', got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError("history must be >= 0")
    return value


def parse_int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return values


def _feature_paths(path):
    if os.path.isdir(path):
        paths = sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(".feat"))
        if not paths:
            raise UsageError(f"no .feat files in {path}")
        return paths
    if not os.path.exists(path):
        raise UsageError(f"{path} does not exist")
    return [path]


def _utt_id(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_init(args, out):
    config = ModelConfig.from_json(args.config)
    model = random_init(config, args.seed, args.blank_bias)
    save_checkpoint(model, args.out)
    print(f"wrote {args.out}: {count_parameters(config):,} parameters", file=out)
    return 0


def cmd_decode(args, out):
    model = load_checkpoint(args.model)
    spec = MaskSpec(args.chunk, args.history)
    lines = []
    for path in _feature_paths(args.features):
        x = read_features(path)
        if x.shape[0] == 0:
            enc = np.zeros((0, model.config.encoder.d_model), dtype=np.float32)
        elif args.offline:
            enc = encode_offline(x, model, spec)
        else:
            enc = encode_streaming(x, model, spec, args.block)
        if args.mode == "beam" and enc.shape[0]:
            tokens, logp = beam_search(enc, model, args.beam)[0]
        else:
            tokens = greedy_decode(enc, model)
            logp = transducer_forward_logprob(enc, tokens, model) if enc.shape[0] else 0.0
        lines.append(f"{_utt_id(path)}\t{' '.join(map(str, tokens))}\t{logp:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        out.write(text)
    return 0


def cmd_bench(args, out):
    model = load_checkpoint(args.model)
    if args.precision == "int8" and not model.quantized:
        model = quantize_model(model)
    elif args.precision == "f32" and model.quantized:
        raise UsageError("f32 bench needs a float checkpoint")
    corpus = [x for x in (read_features(p) for p in _feature_paths(args.features)) if x.shape[0]]
    if not corpus:
        raise UsageError("empty corpus")
    for b in args.chunks:
        if b % args.mask_chunk:
            raise UsageError(f"batch size {b} is not a multiple of mask chunk {args.mask_chunk}")
    rows, _ = bench_mod.run_bench(model, corpus, args.chunks, args.mask_chunk, args.history,
                                  args.workers, args.precision)
    if args.out:
        bench_mod.write_report(rows, args.out)
    for r in rows:
        print(f"b={r.chunk_batch:<3d} H={r.history:<4s} {r.precision} RTF={r.rtf:.3f} "
              f"p50={r.latency_p50_ms:.2f}ms p95={r.latency_p95_ms:.2f}ms", file=out)
    return 0


def cmd_mask_report(args, out):
    spec = MaskSpec(args.chunk, args.history, strict_history=args.strict)
    t = args.frames
    mask = build_mask(spec, t)
    look = frame_lookahead(spec, t)
    if args.csv:
        header = ["frame", "lookahead"]
        for layer in range(1, args.layers + 1):
            header += [f"L{layer}_left", f"L{layer}_right"]
        print(",".join(header) + ",mask", file=out)
        for i in range(t):
            row = [str(i), str(int(look[i]))]
            for layer in range(1, args.layers + 1):
                rf = reception_field(spec, layer, i, t)
                row += [str(rf.left), str(rf.right)]
            print(",".join(row) + "," + "".join("1" if v else "0" for v in mask[i]), file=out)
        return 0
    print(f"mask {spec} frames={t} (0-based indices)", file=out)
    for i in range(t):
        print(f"{i:4d} " + " ".join("1" if v else "0" for v in mask[i]), file=out)
    print(f"average lookahead: {avg_lookahead(spec):.4f} frames (exact mean over a full chunk)", file=out)
    print(f"observed mean lookahead over {t} frames: {look.mean():.4f}", file=out)
    print("frame lookahead " + " ".join(f"L{l}:[left,right]" for l in range(1, args.layers + 1)), file=out)
    for i in range(t):
        fields = []
        for layer in range(1, args.layers + 1):
            rf = reception_field(spec, layer, i, t)
            fields.append(f"[{rf.left},{rf.right}]")
        print(f"{i:5d} {int(look[i]):9d} " + " ".join(fields), file=out)
    return 0


def cmd_verify(args, out):
    model = load_checkpoint(args.model)
    spec = MaskSpec(args.chunk, args.history)
    diff = verify_equivalence(model, spec, args.frames, args.tol, seed=args.seed,
                              fault=args.inject_cache_fault)
    ok = diff <= args.tol
    print(f"max_abs_diff={diff:.3e} tol={args.tol:.1e} {'PASS' if ok else 'FAIL'}", file=out)
    return 0 if ok else 1


def cmd_quantize(args, out):
    model = load_checkpoint(args.model)
    if model.quantized:
        raise UsageError(f"{args.model} is already quantized")
    qmodel = quantize_model(model)
    save_checkpoint(qmodel, args.out)
    f32_size = os.path.getsize(args.model)
    q_size = os.path.getsize(args.out)
    print(f"size: {f32_size} -> {q_size} bytes (ratio {q_size / f32_size:.4f})", file=out)
    print(f"tensor payload ratio: {payload_bytes(qmodel) / payload_bytes(model):.4f}", file=out)
    errors = layer_errors(model, qmodel)
    for name, err in errors:
        print(f"  {name:40s} rel_max_err={err:.4%}", file=out)
    print(f"worst layer: {max(e for _, e in errors):.4%}", file=out)
    return 0


def cmd_make_corpus(args, out):
    os.makedirs(args.out, exist_ok=True)
    corpus = bench_mod.synthetic_corpus(args.count, args.dim, args.frames, seed=args.seed)
    for i, x in enumerate(corpus):
        write_features(x, os.path.join(args.out, f"utt{i:04d}.feat"))
    print(f"wrote {len(corpus)} utterances to {args.out}", file=out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="tt-stream", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a randomly initialised checkpoint")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blank-bias", type=float, default=0.0,
                   help="added to the blank logit so the random model emits sparsely like a trained one")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("decode", help="stream feature files through the recognizer")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="a .feat file or a directory of them")
    p.add_argument("--chunk", type=int, default=4)
    p.add_argument("--history", type=parse_history, default=60)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--mode", choices=("greedy", "beam"), default="beam")
    p.add_argument("--block", type=int, default=None, help="frames per encoder call (multiple of --chunk)")
    p.add_argument("--offline", action="store_true", help="use the masked full-utterance encoder")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="real-time-factor benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="directory of .feat files")
    p.add_argument("--chunks", type=parse_int_list, default=[1, 2, 5, 10, 15],
                   help="frames grouped per encoder call")
    p.add_argument("--mask-chunk", type=int, default=1, help="chunk size of the attention mask")
    p.add_argument("--history", type=parse_history, default=60)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--precision", choices=("f32", "int8"), default="f32")
    p.add_argument("--out", default=None, help="CSV report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mask-report", help="print the attention mask and reception fields")
    p.add_argument("--chunk", type=int, required=True)
    p.add_argument("--history", type=parse_history, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="use i - j < H instead of <=")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_mask_report)

    p = sub.add_parser("verify", help="check streaming against offline encoding")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--chunk", type=int, required=True)
    p.add_argument("--history", type=parse_history, required=True)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-cache-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("quantize", help="write an INT8 checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("make-corpus", help="write synthetic feature files for bench")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--frames", type=int, default=423, help="mean frames per utterance")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, out)
    except (UsageError, TTStreamError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"tt-stream {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
