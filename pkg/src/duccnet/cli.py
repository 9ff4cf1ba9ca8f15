"""Command line front end.

Exit codes: 0 success, 1 runtime failure (I/O, diverged training), 2 usage
or validation error. Errors print as one `error: ...` line on stderr.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (
    WORKING_SIZE,
    AugmentConfig,
    Sample,
    augment,
    load_dataset,
    load_image,
    save_corpus,
    save_png,
    synth_crack_corpus,
    tile_mother_image,
)
from .models import (
    ALL_VARIANTS,
    FEATURE_TAP_ALIASES,
    REFERENCE_PARAM_TOTALS,
    ModelVariant,
    build_variant,
    count_params,
    extract_feature_maps,
    tile_maps,
)
from .checkpoint import load_checkpoint
from .rng import TAG_AUGMENT, derive_rng
from .train import TrainConfig, evaluate, graph_from_checkpoint, predict, run_ablation, train


class _Parser(argparse.ArgumentParser):
    """Argument errors exit 2 with a single parseable line."""

    def error(self, message):
        self.exit(2, f"error: {message}\n")


def _variant(name):
    return ModelVariant.parse(name)


def _add_data_source(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", metavar="DIR", help="corpus root with cracked/ and non-cracked/")
    src.add_argument("--synth", type=int, metavar="N", help="generate N synthetic samples per class")
    p.add_argument("--synth-size", type=int, default=WORKING_SIZE, help="synthetic image side (default %(default)s)")


def _add_train_knobs(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=10, help="epochs without val loss improvement before stopping; 0 disables")
    p.add_argument("--target-val-acc", type=float, default=None, help="stop once val accuracy (percent) reaches this")
    p.add_argument("--target-train-acc", type=float, default=None, help="stop once train accuracy (percent) reaches this")
    p.add_argument("--no-augment", action="store_true", help="train on originals only")
    p.add_argument("--seed", type=int, default=0)


def _train_config(args, variant, out_dir):
    return TrainConfig(
        variant=variant,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        val_frac=args.val_frac,
        augment=None if args.no_augment else AugmentConfig(seed=args.seed),
        seed=args.seed,
        data_root=args.data,
        synth_n=args.synth,
        synth_size=args.synth_size,
        out_dir=out_dir,
        patience=args.patience,
        target_val_acc=args.target_val_acc,
        target_train_acc=args.target_train_acc,
    )


def _cmd_train(args):
    variant = _variant(args.variant)
    out = args.out or f"runs/{variant.tag}"
    final, records = train(_train_config(args, variant, out))
    print(f"done: {len(records)} epoch(s), final val_acc {records[-1].val_acc:.2f}, "
          f"checkpoints and history in {out}")
    return 0


def _cmd_eval(args):
    if args.data is not None:
        _, samples = load_dataset(args.data)
    else:
        samples = synth_crack_corpus(args.synth, args.seed, size=args.synth_size)
    _, va, ((tp, fn), (fp, tn)) = evaluate(args.ckpt, samples, batch_size=args.batch_size)
    print(f"samples {len(samples)}  val_acc {va:.2f}")
    print(f"confusion  tp {tp}  fn {fn}  fp {fp}  tn {tn}")
    return 0


def _cmd_predict(args):
    ckpt = load_checkpoint(args.ckpt)
    for path in args.images:
        p = predict(ckpt, load_image(path))
        label = "crack" if p > 0.5 else "non-crack"
        print(f"{path}\t{p:.4f}\t{label}")
    return 0


def _cmd_tile(args):
    img = load_image(args.image)
    tiles = tile_mother_image(img, tile=args.tile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    cols = img.shape[1] // args.tile
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        save_png(out / f"{stem}_r{r}_c{c}.png", t)
    print(f"wrote {len(tiles)} tiles to {out}")
    return 0


def _cmd_synth(args):
    samples = synth_crack_corpus(args.n, args.seed, size=args.size)
    counters = save_corpus(samples, args.out)
    print(f"wrote {counters['cracked']} cracked and {counters['non-cracked']} non-cracked "
          f"images to {args.out}")
    return 0


def _cmd_augment_preview(args):
    img = load_image(args.image)
    sample = Sample(img, 0, Path(args.image).name)
    cfg = AugmentConfig(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_png(out / f"{stem}_orig.png", img)
    for i in range(args.n):
        aug = augment(sample, cfg, derive_rng(cfg.seed, TAG_AUGMENT, 0, i))
        save_png(out / f"{stem}_aug{i}.png", aug.image)
    print(f"wrote original plus {args.n} augmented copies to {out}")
    return 0


def _cmd_feature_maps(args):
    graph = graph_from_checkpoint(args.ckpt)
    hw = graph.nodes[graph.input_id].input_shape[0]
    img = load_image(args.image)
    if img.shape[:2] != (hw, hw):
        from .kernels import resize_bilinear

        img = resize_bilinear(img, hw, hw)
    maps = extract_feature_maps(graph, img, args.tap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps):
        save_png(out / f"{args.tap}_f{i}.png", m)
    save_png(out / f"{args.tap}_grid.png", tile_maps(maps))
    print(f"wrote {len(maps)} filter maps and a grid for tap {args.tap!r} to {out}")
    return 0


def _cmd_ablation(args):
    out = args.out or "runs/ablation"
    report, _ = run_ablation(_train_config(args, ModelVariant.DUCCNET, out))
    print(report, end="")
    return 0


def _cmd_params(args):
    tags = [v for v in ALL_VARIANTS if args.variant == "all" or v is _variant(args.variant)]
    for v in tags:
        report = count_params(build_variant(v))
        print(f"== {v.tag} ==")
        print(report.table())
        ref = REFERENCE_PARAM_TOTALS.get(v.tag)
        if ref is not None:
            delta = report.total_trainable - ref
            print(f"reference total {ref} ({delta:+d} here; see README on the accounting gap)")
        print()
    return 0


def build_parser():
    p = _Parser(prog="duccnet", description="Dual-channel crack classification toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[], help="train one variant")
    t.add_argument("--variant", default="duccnet", help="model1|model2|model3|model4|duccnet")
    _add_data_source(t)
    _add_train_knobs(t)
    t.add_argument("--out", default=None, help="output directory (default runs/<variant>)")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--ckpt", required=True)
    _add_data_source(e)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    pr = sub.add_parser("predict", help="classify image files")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("images", nargs="+", metavar="IMAGE")
    pr.set_defaults(func=_cmd_predict)

    ti = sub.add_parser("tile", help="cut a mother image into tiles")
    ti.add_argument("image", metavar="IMAGE")
    ti.add_argument("--out", required=True)
    ti.add_argument("--tile", type=int, default=256)
    ti.set_defaults(func=_cmd_tile)

    sy = sub.add_parser("synth", help="write a synthetic corpus")
    sy.add_argument("--n", type=int, required=True, help="samples per class")
    sy.add_argument("--out", required=True)
    sy.add_argument("--size", type=int, default=256)
    sy.add_argument("--seed", type=int, default=0)
    sy.set_defaults(func=_cmd_synth)

    ap = sub.add_parser("augment-preview", help="save augmented copies of one image")
    ap.add_argument("image", metavar="IMAGE")
    ap.add_argument("--out", required=True)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.set_defaults(func=_cmd_augment_preview)

    fm = sub.add_parser("feature-maps", help="export per-filter activations")
    fm.add_argument("--ckpt", required=True)
    fm.add_argument("--image", required=True)
    fm.add_argument("--tap", default="stem", help=f"node id or alias {sorted(FEATURE_TAP_ALIASES)}")
    fm.add_argument("--out", required=True)
    fm.set_defaults(func=_cmd_feature_maps)

    ab = sub.add_parser("ablation", help="train all five variants and report")
    _add_data_source(ab)
    _add_train_knobs(ab)
    ab.add_argument("--out", default=None, help="output directory (default runs/ablation)")
    ab.set_defaults(func=_cmd_ablation)

    pa = sub.add_parser("params", help="per-layer parameter tables")
    pa.add_argument("--variant", default="all")
    pa.set_defaults(func=_cmd_params)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
