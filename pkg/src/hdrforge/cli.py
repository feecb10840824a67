"""Command-line surface: prepare / train / merge / eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
HDRFORGE_THREADS caps worker threads (torch and scene-level pools).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

log = logging.getLogger("hdrforge")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def thread_cap(default=None):
    """Worker-count limit from HDRFORGE_THREADS (also applied to torch)."""
    env = os.environ.get("HDRFORGE_THREADS")
    if env:
        return max(1, int(env))
    return default or os.cpu_count() or 1


def _apply_thread_cap():
    import torch

    torch.set_num_threads(thread_cap(torch.get_num_threads()))


def _scene_dirs(data_dir, names=None):
    if names is not None:
        return [os.path.join(data_dir, n) for n in names]
    subdirs = [os.path.join(data_dir, n) for n in sorted(os.listdir(data_dir))
               if os.path.isdir(os.path.join(data_dir, n))]
    return subdirs


def cmd_prepare(args):
    from . import align as alignmod
    from . import hdr_io, store
    from .dataset import Scene, augment, extract_patches, oversample
    from .radiance import RadianceImage

    crf = hdr_io.read_crf_csv(args.crf) if args.crf else None
    names = hdr_io.read_split(args.split).train_scenes if args.split else None
    dirs = _scene_dirs(args.data_dir, names)

    raw = []
    n_scenes = 0
    for scene_dir in dirs:
        name = os.path.basename(os.path.normpath(scene_dir))
        try:
            stack = hdr_io.load_stack(scene_dir, crf=crf)
            if not args.no_align:
                stack = alignmod.align_stack(stack, hdr_io.scene_homographies(scene_dir),
                                             gamma=args.gamma)
            gt = RadianceImage(np.clip(hdr_io.read_rgbe(os.path.join(scene_dir, "gt.hdr")),
                                       0.0, 1.0))
            scene = Scene(stack, gt, name)
        except (OSError, ValueError) as exc:
            log.warning("skipping scene %s: %s", name, exc)
            continue
        recs = extract_patches(scene, size=args.size, stride=args.stride, gamma=args.gamma,
                               motion_threshold=args.motion_threshold)
        raw.extend(recs)
        n_scenes += 1
        log.info("scene %s: %d patches", name, len(recs))

    augmented = raw if args.no_augment else [a for r in raw for a in augment(r)]
    final = oversample(augmented, factor=args.oversample_factor, seed=args.seed)
    print(f"scenes: {n_scenes}")
    print(f"raw patches: {len(raw)}")
    print(f"after augmentation: {len(augmented)}")
    print(f"after oversampling: {len(final)}")
    if not final:
        print("no patches produced", file=sys.stderr)
        return EXIT_DATA
    store.write_store(args.out, final)
    print(f"store written: {args.out}")
    return EXIT_OK


def cmd_train(args):
    from . import store
    from .train import TrainConfig, train

    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    for field in ("variant", "k", "seed", "mu", "gamma", "iterations"):
        value = getattr(args, field)
        if value is not None:
            setattr(config, field, value)
    with store.PatchStore(args.store) as records:
        final = train(records, config, args.out_dir, resume=args.resume)
    print(f"checkpoint written: {final}")
    return EXIT_OK


def cmd_merge(args):
    from . import hdr_io
    from .net import load_checkpoint
    from .merge import merge_exposures
    from .radiance import TonemapParams, linearize, mu_law

    biases = hdr_io.read_exposures(args.exposures)
    if len(biases) != len(args.inputs):
        raise ValueError(f"{len(args.inputs)} frames but {len(biases)} exposure values")
    crf = hdr_io.read_crf_csv(args.crf) if args.crf else None
    frames = [hdr_io.read_ldr(p, exposure_bias=b) for p, b in zip(args.inputs, biases)]
    if crf is not None:
        frames = [linearize(f, crf) for f in frames]
    frames.sort(key=lambda f: f.exposure_bias)
    reference = args.reference if args.reference is not None else len(frames) // 2

    network, meta = load_checkpoint(args.checkpoint)
    homographies = hdr_io.scene_homographies(os.path.dirname(args.inputs[0]) or ".") \
        if args.sidecar_homographies else None
    radiance, _ = merge_exposures(network, frames, reference, align=not args.no_align,
                                  gamma=args.gamma, homographies=homographies,
                                  tile=None if args.no_tile else args.tile,
                                  overlap=args.overlap)
    hdr_io.write_rgbe(args.out, radiance.pixels)
    print(f"hdr written: {args.out} ({radiance.height}x{radiance.width})")
    if args.tonemap:
        preview = mu_law(radiance.pixels, TonemapParams(args.mu).mu)
        hdr_io.write_ldr(args.tonemap, preview, bits=8)
        print(f"tonemapped preview written: {args.tonemap}")
    if args.dump_raw:
        np.save(args.dump_raw, radiance.pixels.astype(np.float32))
        print(f"raw float32 dump written: {args.dump_raw}")
    return EXIT_OK


def cmd_eval(args):
    from . import hdr_io
    from .metrics import evaluate, summarize, write_report_csv
    from .radiance import TonemapParams

    def hdr_names(d):
        return {n for n in os.listdir(d) if n.lower().endswith(".hdr")}

    preds = hdr_names(args.pred_dir)
    truths = hdr_names(args.truth_dir)
    for missing in sorted(preds ^ truths):
        side = "truth" if missing in preds else "prediction"
        log.warning("skipping %s: no matching %s file", missing, side)
    common = sorted(preds & truths)
    if not common:
        print("no matched prediction/truth pairs", file=sys.stderr)
        return EXIT_DATA

    params = TonemapParams(args.mu)
    rows = []
    for name in common:
        pred = np.clip(hdr_io.read_rgbe(os.path.join(args.pred_dir, name)), 0.0, 1.0)
        truth = np.clip(hdr_io.read_rgbe(os.path.join(args.truth_dir, name)), 0.0, 1.0)
        rep = evaluate(pred, truth, params)
        rows.append((os.path.splitext(name)[0], rep))
        print(f"{name}: psnr_t={rep.psnr_t:.2f} ssim_t={rep.ssim_t:.4f} "
              f"psnr_l={rep.psnr_l:.2f} ssim_l={rep.ssim_l:.4f}")
    summary = summarize([r for _, r in rows])
    print(f"mean: psnr_t={summary.psnr_t:.2f} ssim_t={summary.ssim_t:.4f} "
          f"psnr_l={summary.psnr_l:.2f} ssim_l={summary.ssim_l:.4f}")
    write_report_csv(args.out, rows, summary)
    print(f"report written: {args.out}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="hdrforge",
                     description="Merge bracketed LDR stacks into ghost-free HDR radiance")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="extract a training patch store from scene directories")
    p.add_argument("data_dir")
    p.add_argument("out")
    p.add_argument("--split", help="JSON split file; uses its train list")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crf", help="inverse-CRF CSV applied to every frame")
    p.add_argument("--motion-threshold", type=float, default=0.2)
    p.add_argument("--oversample-factor", type=int, default=2)
    p.add_argument("--no-align", action="store_true", help="skip homography alignment")
    p.add_argument("--no-augment", action="store_true", help="skip the 8x dihedral augmentation")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a merge network on a patch store")
    p.add_argument("store")
    p.add_argument("out_dir")
    p.add_argument("--config", help="TrainConfig JSON; defaults when omitted")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--variant", choices=["unet", "resnet"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="merge bracketed LDR frames into an HDR image")
    p.add_argument("inputs", nargs="+", help="LDR frames (PNG/TIFF, any order)")
    p.add_argument("--exposures", required=True, help="text file, one bias per frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .hdr path")
    p.add_argument("--reference", type=int, default=None,
                   help="reference frame index after ascending sort (default: middle)")
    p.add_argument("--crf", help="inverse-CRF CSV")
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--mu", type=float, default=5000.0)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("--no-tile", action="store_true", help="single whole-image forward pass")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--sidecar-homographies", action="store_true",
                   help="use homographies.txt next to the first input")
    p.add_argument("--tonemap", help="also write a mu-law tonemapped PNG preview")
    p.add_argument("--dump-raw", help="also dump raw float32 radiance (.npy)")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("truth_dir")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--mu", type=float, default=5000.0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    _apply_thread_cap()
    from .net import NumericError
    from .store import StoreError

    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, StoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
