"""Command-line entry points.

    cgrseg [--config cfg.json] [--seed N] flops [--size HxW]
    cgrseg [--config cfg.json] [--seed N] gradcheck
    cgrseg [--config cfg.json] [--seed N] train-toy --out w.cgrw [--log f]
    cgrseg [--config cfg.json] infer --weights w.cgrw --image in.ppm
           --out mask.pgm [--color c.ppm] [--attn stage:a.pgm] [--pad]

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import default_model_config, load_config
from .data import class_color
from .flops import count_flops
from .gradcheck import grad_check
from .model import (
    ModelConfig,
    attention_stages,
    export_attention,
    heatmap_from_attention,
    init_model_params,
    model_forward,
    named_tensors,
)
from .netpbm import read_ppm, write_pgm, write_ppm
from .blocks import (
    dpg_head_forward,
    init_dpg_params,
    init_rcm_params,
    rca_attention,
    rcm_forward,
)
from .tensor import NumericsError, Rng, Tensor, mul_hadamard, sum_all
from .train import (
    DivergenceError,
    TrainConfig,
    evaluate_miou,
    held_out_samples,
    train_toy,
)
from .weights import apply_weights, load_weights, model_weight_rows, save_weights

__all__ = ["main"]

GRID = 64
TOL = 1e-4

# fixed 16-entry label palette: black background, then the dataset's
# golden-ratio hues, so colorized masks are diffable across runs
_PALETTE = np.zeros((16, 3), dtype=np.uint8)
for _i in range(1, 16):
    _PALETTE[_i] = np.rint(class_color(_i) * 255.0).astype(np.uint8)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    # --config/--seed are accepted both before and after the subcommand;
    # SUPPRESS keeps a missing later flag from clobbering an earlier one
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the training seed")

    p = _Parser(prog="cgrseg", description=__doc__, parents=[common],
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("flops", parents=[common],
                       help="print the compute/parameter ledger")
    f.add_argument("--size", help="input size HxW (default: config input_size)")

    sub.add_parser("gradcheck", parents=[common],
                   help="finite-difference check per block")

    t = sub.add_parser("train-toy", parents=[common],
                       help="train on the synthetic shapes task")
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--log", help="metrics log file (default: stdout)")

    i = sub.add_parser("infer", parents=[common],
                       help="segment one PPM image")
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="label mask PGM")
    i.add_argument("--color", help="colorized mask PPM")
    i.add_argument("--attn", help="attention heatmap as 'stage:file.pgm'")
    i.add_argument("--pad", action="store_true",
                   help="reflect-pad to the next multiple of 64")
    return p


def _load_configs(args) -> tuple[ModelConfig, TrainConfig]:
    config = getattr(args, "config", None)
    seed = getattr(args, "seed", None)
    if config:
        mcfg, tcfg = load_config(config)
    else:
        mcfg, tcfg = default_model_config(), TrainConfig()
    if seed is not None:
        import dataclasses

        tcfg = dataclasses.replace(tcfg, seed=seed)
    return mcfg, tcfg


def _cmd_flops(args, out) -> int:
    mcfg, _ = _load_configs(args)
    if args.size:
        parts = args.size.lower().split("x")
        if len(parts) != 2 or not all(s.isdigit() for s in parts):
            raise ValueError(f"--size must look like 512x512, got {args.size!r}")
        h, w = int(parts[0]), int(parts[1])
    else:
        h, w = mcfg.input_size
    print(count_flops(mcfg, h, w).table(), file=out)
    return 0


def _lift_zeros(tensors, rng) -> None:
    """Move zero-initialized tensors off the origin so finite differences
    probe live paths (and no relu sits exactly on its kink)."""
    for t in tensors:
        if t.data.size and not t.data.any():
            t.data[...] = rng.uniform(t.dims, -0.3, 0.3)


def _weighted_sum(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.uniform(out.dims, -1.0, 1.0), copy=False)
    return sum_all(mul_hadamard(out, w))


def _gradcheck_blocks(seed: int):
    root = Rng(seed)

    # every block runs with frozen norm statistics (eval mode), so the loss
    # is a pure function of the parameters.  widths keep the gate bottleneck
    # at >= 4 channels: a 2-wide layer norm degenerates to a sign function
    # whose parameter influence is too weak for finite differences to see.
    def rca_block():
        p = init_rcm_params(root.spawn(11), 5, strip_kernel=5)
        x = Tensor(root.spawn(12).uniform((2, 5, 6, 7), -1.0, 1.0), copy=False)
        named = [(n, t) for n, k, t in p.tensors("rcm") if k == "param"
                 and n.split(".")[1] in ("strip_h", "bn_cal", "strip_v")]
        build = lambda: _weighted_sum(rca_attention(x, p, variant="add",
                                                    mode="eval"), Rng(131))
        return build, named, root.spawn(13)

    def rcm_block():
        p = init_rcm_params(root.spawn(21), 5, strip_kernel=5, mlp_ratio=2)
        _lift_zeros([t for _, k, t in p.tensors("rcm") if k == "param"],
                    root.spawn(22))
        x = Tensor(root.spawn(23).uniform((2, 5, 6, 7), -1.0, 1.0), copy=False)
        named = [(n, t) for n, k, t in p.tensors("rcm") if k == "param"]
        build = lambda: _weighted_sum(rcm_forward(x, p, "add", mode="eval"),
                                      Rng(132))
        return build, named, root.spawn(24)

    def dpg_block():
        p = init_dpg_params(root.spawn(31), 16, 3)
        _lift_zeros([t for _, k, t in p.tensors("dpg") if k == "param"],
                    root.spawn(32))
        x = Tensor(root.spawn(33).uniform((2, 16, 5, 5), -1.0, 1.0), copy=False)
        named = [(n, t) for n, k, t in p.tensors("dpg") if k == "param"]
        build = lambda: _weighted_sum(dpg_head_forward(x, p), Rng(133))
        return build, named, root.spawn(34)

    def model_block():
        mcfg = ModelConfig(num_classes=3, stage_channels=(3, 4, 5, 6),
                           head_width=16, input_size=(64, 64))
        params = init_model_params(root.spawn(41), mcfg)
        _lift_zeros([t for _, k, t in named_tensors(params) if k == "param"],
                    root.spawn(42))
        x = Tensor(root.spawn(43).uniform((1, 3, 64, 64), 0.0, 1.0), copy=False)
        named = [(n, t) for n, k, t in named_tensors(params) if k == "param"]
        build = lambda: _weighted_sum(
            model_forward(x, params, mcfg, mode="eval"), Rng(134))
        return build, named, root.spawn(44)

    return [("rca", rca_block), ("rcm", rcm_block), ("dpg", dpg_block),
            ("model", model_block)]


def _cmd_gradcheck(args, out) -> int:
    _, tcfg = _load_configs(args)
    failed = False
    for name, make in _gradcheck_blocks(tcfg.seed):
        build, named, rng = make()
        res = grad_check(build, named, rng, n_coords=20)
        verdict = "pass" if res.ok(TOL) else "FAIL"
        print(f"{name:<6} worst_rel={res.worst_rel:.3e} at {res.worst_name} "
              f"({res.checked} coords, {res.within_noise} within fd noise) "
              f"{verdict}", file=out)
        failed = failed or not res.ok(TOL)
    if failed:
        print(f"gradient check failed (tolerance {TOL:g})", file=out)
        return 2
    return 0


def _remove_quietly(*paths) -> None:
    for p in paths:
        if p and os.path.exists(p):
            os.remove(p)


def _cmd_train_toy(args, out) -> int:
    mcfg, tcfg = _load_configs(args)
    try:
        params, lines = train_toy(tcfg, mcfg)
    except DivergenceError:
        _remove_quietly(args.out, args.log)
        raise
    save_weights(args.out, model_weight_rows(params))
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line, file=out)
    held = held_out_samples(mcfg, tcfg.seed, tcfg.eval_samples)
    print(f"final miou={evaluate_miou(params, mcfg, held):.6f}", file=out)
    return 0


def _pad_reflect(img: Tensor) -> tuple[Tensor, int, int]:
    _, _, h, w = img.dims
    ph = (GRID - h % GRID) % GRID
    pw = (GRID - w % GRID) % GRID
    if ph == 0 and pw == 0:
        return img, h, w
    if ph > h - 1 or pw > w - 1:
        raise ValueError(
            f"image {h}x{w} too small to reflect-pad to a multiple of {GRID}"
        )
    data = np.pad(img.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return Tensor(data, copy=False), h, w


def _cmd_infer(args, out) -> int:
    mcfg, _ = _load_configs(args)
    params = init_model_params(Rng(0), mcfg)
    apply_weights(params, load_weights(args.weights))
    img = read_ppm(args.image)
    if mcfg.in_channels != 3:
        raise ValueError(
            f"config expects {mcfg.in_channels} input channels; PPM has 3"
        )
    _, _, h, w = img.dims
    if h % GRID or w % GRID:
        if not args.pad:
            raise ValueError(
                f"image sides {h}x{w} must be multiples of {GRID}; "
                f"pass --pad to reflect-pad"
            )
        img, h, w = _pad_reflect(img)

    logits = model_forward(img, params, mcfg, mode="eval")
    mask = logits.data.argmax(axis=1)[0, :h, :w].astype(np.uint8)
    write_pgm(args.out, mask)
    print(f"wrote {args.out} ({w}x{h}, {mcfg.num_classes} classes)", file=out)

    if args.color:
        if mcfg.num_classes > len(_PALETTE):
            raise ValueError(
                f"palette has {len(_PALETTE)} entries; "
                f"config has {mcfg.num_classes} classes"
            )
        write_ppm(args.color, _PALETTE[mask])
        print(f"wrote {args.color}", file=out)

    if args.attn:
        if ":" not in args.attn:
            raise ValueError("--attn must look like 'sfr.8:heatmap.pgm'")
        stage, path = args.attn.split(":", 1)
        if stage not in attention_stages(mcfg):
            raise ValueError(
                f"unknown stage {stage!r}; expected one of "
                f"{attention_stages(mcfg)}"
            )
        heat = export_attention(img, params, mcfg, stage)
        write_pgm(path, heat.data[0, 0, :h, :w])
        print(f"wrote {path}", file=out)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    out = sys.stdout
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "flops":
            return _cmd_flops(args, out)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args, out)
        if args.command == "train-toy":
            return _cmd_train_toy(args, out)
        if args.command == "infer":
            return _cmd_infer(args, out)
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericsError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
