"""Command-line interface: encode, decode, train, eval, ablate, export-embeddings.

Exit codes: 0 success, 2 bad input (arguments, config, point or model file,
bitstream header), 3 model mismatch, 4 decode corruption, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time

from .coder import Bitstream, BitstreamError, DecodeCorruptionError, ModelMismatchError, decode, \
    encode
from .config import ConfigError, RunConfig
from .geometry import (DegenerateExtentError, EmptyCloudError, PointCloud, PointCloudParseError,
                       dequantize, load_point_cloud, quantize, save_point_cloud)
from .model.params import ModelFileError, ModelParams

EXIT_OK, EXIT_ERROR, EXIT_PARSE, EXIT_MISMATCH, EXIT_CORRUPT = 0, 1, 2, 3, 4

log = logging.getLogger("octree_codec")


def _depth_range(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        depths = list(range(int(lo), int(hi) + 1)) if sep else [int(lo)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected L or L1..L2, got {text!r}") from None
    if not depths or min(depths) < 1 or max(depths) > 16:
        raise argparse.ArgumentTypeError(f"depths must lie in [1, 16], got {text!r}")
    return depths


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k: getattr(args, k, None) for k in ("N", "N0", "seed", "peak")}
    if getattr(args, "depth", None) is not None and isinstance(args.depth, int):
        over["depth"] = args.depth
    if over["N"] is not None and over["N0"] is None:
        over["N0"] = min(cfg.N0, over["N"])
    return cfg.with_overrides(**over)


def _quantize(pc: PointCloud, depth: int, args):
    return quantize(pc, depth, qs_override=getattr(args, "qs", None),
                    offset_override=getattr(args, "offset", None))


def _encode(qc, model, args):
    # window geometry defaults to what the model was trained with
    if model is None:
        return encode(qc)
    return encode(qc, model, N=getattr(args, "N", None), N0=getattr(args, "N0", None))


def _is_bitstream(path) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == b"OCTB"


def _dataset(args, cfg: RunConfig):
    from .model.train import sequences_from_clouds
    from .synthetic import corpus

    if args.data:
        clouds = [load_point_cloud(p) for p in args.data]
    else:
        clouds = corpus(args.synthetic, seed=cfg.seed + args.synthetic_seed,
                        n_points=args.points)
    return sequences_from_clouds(clouds, cfg.depth)


def cmd_encode(args) -> int:
    cfg = _run_config(args)
    pc = load_point_cloud(args.input, args.format)
    qc = _quantize(pc, cfg.depth, args)
    model = None if args.baseline else ModelParams.load(args.model)
    t = time.perf_counter()
    bs = _encode(qc, model, args)
    dt = time.perf_counter() - t
    bs.save(args.output)
    print(f"points={pc.count} nodes={bs.node_count} payload_bits={bs.payload_bits} "
          f"bpp={bs.payload_bits / pc.count:.6f} seconds={dt:.3f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    bs = Bitstream.load(args.input)
    model = ModelParams.load(args.model) if args.model else None
    t = time.perf_counter()
    qc = decode(bs, model)
    dt = time.perf_counter() - t
    save_point_cloud(args.output, dequantize(qc), args.format)
    print(f"points={len(qc.coords)} nodes={bs.node_count} seconds={dt:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model.train import train

    cfg = _run_config(args)
    seqs = _dataset(args, cfg)
    val = None
    if args.validation:
        from .model.train import sequences_from_clouds
        val = sequences_from_clouds([load_point_cloud(p) for p in args.validation], cfg.depth)

    def report(rec):
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in rec.items()))

    params, _ = train(seqs, cfg.train_config(), cfg.model_config(), validation=val,
                      callback=report)
    params.save(args.output)
    print(f"saved {args.output} sha256={params.content_hash().hex()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import RDPoint, rd_point, write_rd_csv

    cfg = _run_config(args)
    ref = load_point_cloud(args.ref, args.format)
    model = ModelParams.load(args.model) if args.model else None
    points: list[RDPoint] = []
    if args.rec is not None:
        if _is_bitstream(args.rec):
            bs = Bitstream.load(args.rec)
            qc = decode(bs, model)
            rec, bits, depth = dequantize(qc), bs.payload_bits, bs.depth
        else:
            rec, bits, depth = load_point_cloud(args.rec, args.format), 0, 0
        points.append(rd_point(ref, rec, bits, depth, cfg.peak, cfg.normal_k, name=args.ref))
    else:
        if args.depth is None:
            raise argparse.ArgumentTypeError("eval needs a reconstruction or --depth")
        for depth in args.depth:
            qc = _quantize(ref, depth, args)
            bs = _encode(qc, model, args)
            rec = dequantize(decode(bs.to_bytes(), model))
            points.append(rd_point(ref, rec, bs.payload_bits, depth, cfg.peak, cfg.normal_k,
                                   name=args.ref))
    write_rd_csv(args.output if args.output else sys.stdout, points)
    return EXIT_OK


def ablate(sequences, test_set, window_sizes, n0_values, cfg: RunConfig, models=None,
           writer=None):
    """Table rows of bpp, bits per node and coding time per 1000 nodes.

    ``test_set`` is ``(quantized clouds, total input points)``.

    One model per window size (trained unless given in ``models``); the N0
    sweep reuses the model of the largest window.  Returns the rows.
    """
    from .model.train import train

    models = dict(models or {})
    rows = []
    test_qcs, n_points = test_set

    def measure(model, N, N0):
        bits, elapsed, count = 0, 0.0, 0
        for qc in test_qcs:
            t = time.perf_counter()
            bs = encode(qc, model, N=N, N0=N0)
            elapsed += time.perf_counter() - t
            bits += bs.payload_bits
            count += bs.node_count
        return bits, elapsed, count

    for N in window_sizes:
        if N not in models:
            c = cfg.with_overrides(N=N, N0=N)
            models[N], _ = train(sequences, c.train_config(), c.model_config())
        bits, elapsed, nodes = measure(models[N], N, N)
        rows.append(dict(sweep="window", N=N, N0=N, bpp=bits / n_points, bits_per_node=bits / nodes,
                         ms_per_1000_nodes=1e6 * elapsed / nodes))
    Nmax = max(window_sizes)
    for N0 in n0_values or []:
        if N0 > Nmax:
            continue
        bits, elapsed, nodes = measure(models[Nmax], Nmax, N0)
        rows.append(dict(sweep="n0", N=Nmax, N0=N0, bpp=bits / n_points,
                         bits_per_node=bits / nodes, ms_per_1000_nodes=1e6 * elapsed / nodes))
    if writer is not None:
        w = csv.DictWriter(writer, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows, models


def cmd_ablate(args) -> int:
    from .synthetic import corpus

    cfg = _run_config(args)
    seqs = _dataset(args, cfg)
    if args.test:
        test_clouds = [load_point_cloud(p) for p in args.test]
    else:
        test_clouds = corpus(args.test_synthetic, seed=cfg.seed + args.synthetic_seed + 1,
                             n_points=args.points)
    qcs = [quantize(pc, cfg.depth) for pc in test_clouds]
    n_points = sum(pc.count for pc in test_clouds)
    models = {}
    for item in args.model or []:
        n, _, path = item.partition("=")
        models[int(n)] = ModelParams.load(path)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        ablate(seqs, (qcs, n_points), args.window_sizes, args.n0, cfg, models, writer=out)
    finally:
        if args.output:
            out.close()
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    from .embeddings import export_embeddings
    from .octree import build

    cfg = _run_config(args)
    model = ModelParams.load(args.model)
    qc = _quantize(load_point_cloud(args.input, args.format), cfg.depth, args)
    ns = build(qc)
    export_embeddings(model, ns, args.output, qc.qs, qc.offset, as_target=args.as_target)
    print(f"nodes={len(ns)} written={args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="octree-codec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, depth=True):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--format", choices=["ply", "xyz", "kitti-bin"],
                       help="point file format (default: from the extension)")
        if depth:
            p.add_argument("--depth", type=int, help="octree depth L")

    def quant(p):
        p.add_argument("--qs", type=float, help="override the quantization step")
        p.add_argument("--offset", type=float, nargs=3, metavar=("X", "Y", "Z"),
                       help="override the quantization offset")

    def window(p):
        p.add_argument("--N", type=int, help="context window length")
        p.add_argument("--N0", type=int, help="targets per forward pass")

    def data(p):
        p.add_argument("--data", nargs="+", help="training point cloud files")
        p.add_argument("--synthetic", type=int, default=64,
                       help="number of synthetic training clouds when --data is absent")
        p.add_argument("--synthetic-seed", type=int, default=1)
        p.add_argument("--points", type=int, default=30000, help="points per synthetic cloud")

    p = sub.add_parser("encode", help="compress a point cloud")
    p.add_argument("input")
    p.add_argument("output")
    common(p)
    quant(p)
    window(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", help="trained model file")
    g.add_argument("--baseline", action="store_true", help="adaptive order-0 coder")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--model", help="model file (required for model-coded streams)")
    p.add_argument("--format", choices=["ply", "xyz", "kitti-bin"])
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="fit an entropy model")
    p.add_argument("output", help="model file to write")
    common(p)
    window(p)
    data(p)
    p.add_argument("--validation", nargs="+", help="validation point cloud files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rate-distortion metrics as CSV")
    p.add_argument("ref")
    p.add_argument("rec", nargs="?", help="reconstructed cloud or bitstream")
    common(p, depth=False)
    quant(p)
    window(p)
    p.add_argument("--depth", type=_depth_range, help="depth or sweep L1..L2 (encodes ref)")
    p.add_argument("--model", help="model file (default: baseline coder)")
    p.add_argument("--peak", type=float, help="PSNR peak value r")
    p.add_argument("-o", "--output", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="window-size and N0 sweep as CSV")
    common(p)
    data(p)
    p.add_argument("--window-sizes", type=_int_list, default=[8, 64])
    p.add_argument("--n0", type=_int_list, help="N0 values timed with the largest window")
    p.add_argument("--model", action="append", metavar="N=PATH",
                   help="use a trained model for window size N instead of training")
    p.add_argument("--test", nargs="+", help="held-out point cloud files")
    p.add_argument("--test-synthetic", type=int, default=8)
    p.add_argument("-o", "--output", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", help="per-node PCA of learned features as CSV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--model", required=True)
    p.add_argument("--as-target", action="store_true",
                   help="use the features seen when the node is coded")
    common(p)
    quant(p)
    p.set_defaults(func=cmd_export_embeddings)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ModelMismatchError as e:
        print(f"error: model mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except DecodeCorruptionError as e:
        print(f"error: corrupt bitstream: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (PointCloudParseError, ConfigError, ModelFileError, BitstreamError,
            argparse.ArgumentTypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (EmptyCloudError, DegenerateExtentError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
