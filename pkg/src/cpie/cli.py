"""Command-line pipeline: fixtures, pair generation, training, extraction,
thinning, evaluation and primitive fitting.

Dataset layout: a raw directory holds `<stem>.png` plus `<stem>_mask.png`;
distractors are a flat directory of images. All commands are deterministic
given (inputs, config, seed) and write their effective configuration next
to their outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
import zlib

import numpy as np

from . import eval_metrics, fixtures, gabor_nms, geom_fit, io_utils, model as M, pairgen

OVERLAY_PALETTE = [
    (1.0, 0.15, 0.15), (0.15, 1.0, 0.15), (0.2, 0.4, 1.0), (1.0, 0.9, 0.1),
    (1.0, 0.2, 1.0), (0.1, 1.0, 1.0), (1.0, 0.6, 0.1), (0.7, 0.3, 1.0),
]


def _preset_configs(preset):
    if preset == "toy":
        return M.BackboneConfig.toy(), M.TrainConfig.toy(), 160
    if preset == "full":
        return M.BackboneConfig.full(), M.TrainConfig.full(), 320
    raise ValueError(f"unknown preset: {preset}")


def _write_effective_config(out_dir, args, extra=None):
    kv = {k: v for k, v in sorted(vars(args).items())
          if k != "func" and v is not None}
    if extra:
        kv.update(extra)
    io_utils.write_kv(os.path.join(out_dir, "effective_config.txt"), kv)


def _load_aug_config(path):
    cfg = pairgen.AugmentConfig()
    if path:
        io_utils.apply_kv(cfg, io_utils.read_kv(path))
    return cfg


def _raw_samples(raw_dir):
    """Yield (stem, RawSample); missing masks are reported as errors."""
    stems = [s for s in io_utils.list_stems(raw_dir) if not s.endswith("_mask")]
    for stem in stems:
        img_path = os.path.join(raw_dir, stem + ".png")
        mask_path = os.path.join(raw_dir, stem + "_mask.png")
        if not os.path.exists(mask_path):
            yield stem, FileNotFoundError(f"missing mask for {stem}")
            continue
        image = io_utils.load_image(img_path)
        mask = io_utils.load_mask(mask_path)
        try:
            raw = pairgen.RawSample(image, mask)
            raw.validate()
            yield stem, raw
        except pairgen.PairGenError as exc:
            yield stem, exc


def _load_distractors(distractor_dir, shape):
    import cv2

    out = []
    for stem in io_utils.list_stems(distractor_dir):
        img = io_utils.load_image(os.path.join(distractor_dir, stem + ".png"))
        if img.shape != shape:
            img = cv2.resize(img, (shape[1], shape[0]))
        out.append(img.astype(np.float32))
    return out


# -- subcommands -----------------------------------------------------------------


def cmd_fixtures(args):
    os.makedirs(args.out_dir, exist_ok=True)
    _, _, size = _preset_configs(args.preset)
    size = args.size or size
    meta_lines = []
    for i in range(args.count):
        kind = None if args.kind == "mixed" else args.kind
        img, mask, meta = fixtures.make_fixture(size, size, kind=kind,
                                                seed=args.seed * 10007 + i)
        io_utils.save_image(os.path.join(args.out_dir, f"fix{i:04d}.png"), img)
        io_utils.save_mask(os.path.join(args.out_dir, f"fix{i:04d}_mask.png"), mask)
        meta_lines.append(fixtures.meta_line(i, meta))
    with open(os.path.join(args.out_dir, "fixtures_meta.tsv"), "w") as f:
        f.write("\n".join(meta_lines) + "\n")
    for j, img in enumerate(fixtures.make_distractors(size, size, args.seed + 991)):
        ddir = os.path.join(args.out_dir, "distractors")
        os.makedirs(ddir, exist_ok=True)
        io_utils.save_image(os.path.join(ddir, f"tex{j:02d}.png"), img)
    _write_effective_config(args.out_dir, args)
    return 0


def cmd_gen_pairs(args):
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = _load_aug_config(args.config)
    if args.test_mode:
        cfg.train_dilate_px = 1
    manifest, failures = [], 0
    distractors = None
    for stem, raw in _raw_samples(args.raw_dir):
        if isinstance(raw, Exception):
            print(f"error: {stem}: {raw}", file=sys.stderr)
            failures += 1
            continue
        if distractors is None:
            distractors = _load_distractors(args.distractor_dir, raw.image.shape)
            if len(distractors) < 3:
                print("error: need at least 3 distractor images", file=sys.stderr)
                return 1
        for k in range(args.n_per_sample):
            seed = (zlib.crc32(stem.encode()) & 0xFFFF) * 100003 + args.seed * 7919 + k
            try:
                pair = pairgen.generate_pair(raw, distractors[:3], cfg, seed=seed,
                                             train=not args.test_mode)
            except pairgen.PairGenError as exc:
                print(f"error: {stem} pair {k}: {exc}", file=sys.stderr)
                failures += 1
                continue
            base = os.path.join(args.out_dir, f"{stem}_pair{k:03d}")
            io_utils.save_image(base + "_support.png", pair.support[0])
            io_utils.save_mask(base + "_support_mask.png", pair.support[1])
            io_utils.save_image(base + "_query.png", pair.query[0])
            io_utils.save_mask(base + "_query_mask.png", pair.query[1])
            manifest.append(f"{stem}\t{k}\t{seed}\t"
                            f"{int(pair.skipped_patch[0])}\t{int(pair.skipped_patch[1])}")
    with open(os.path.join(args.out_dir, "pairs_manifest.tsv"), "w") as f:
        f.write("stem\tpair\tseed\tsupport_patch_skipped\tquery_patch_skipped\n")
        if manifest:
            f.write("\n".join(manifest) + "\n")
    _write_effective_config(args.out_dir, args)
    return 1 if failures else 0


def cmd_train(args):
    backbone_cfg, tconf, _ = _preset_configs(args.preset)
    if args.config:
        io_utils.apply_kv(tconf, io_utils.read_kv(args.config))
    if args.epochs is not None:
        tconf.epochs = args.epochs
    if args.lr is not None:
        tconf.learning_rate = args.lr
    tconf.seed = args.seed
    raws = []
    for stem, raw in _raw_samples(args.raw_dir):
        if isinstance(raw, Exception):
            print(f"error: {stem}: {raw}", file=sys.stderr)
            return 1
        raws.append(raw)
    if not raws:
        print("error: no raw samples found", file=sys.stderr)
        return 1
    distractors = _load_distractors(args.distractor_dir, raws[0].image.shape)
    model = M.CpieModel(backbone_cfg, distance=args.distance,
                        relevance=not args.no_relevance, seed=args.seed)
    aug = _load_aug_config(None)
    os.makedirs(args.checkpoint_out, exist_ok=True)
    log_path = os.path.join(args.checkpoint_out, "loss_log.tsv")
    steps_per_epoch = args.steps_per_epoch or max(1, len(raws))
    try:
        M.train_online(model, raws, distractors, aug, tconf,
                       steps_per_epoch=steps_per_epoch, log_path=log_path)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    M.save_checkpoint(model, args.checkpoint_out,
                      extra={"steps": tconf.epochs * steps_per_epoch})
    _write_effective_config(args.checkpoint_out, args)
    return 0


def _largest_component(mask):
    import cv2

    n, labels = cv2.connectedComponents(mask.astype(np.uint8), connectivity=8)
    if n <= 1:
        return mask
    counts = np.bincount(labels.reshape(-1))
    counts[0] = 0
    return (labels == counts.argmax()).astype(np.uint8)


def extract_points(thinned, threshold=0.5, isolate=True):
    """Foreground (x, y) points of a thinned map, optionally keeping only
    the largest connected component (strips stray responses before fitting)."""
    binary = (thinned >= threshold).astype(np.uint8)
    if isolate:
        binary = _largest_component(binary)
    ys, xs = np.nonzero(binary)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def cmd_extract(args):
    os.makedirs(args.out_dir, exist_ok=True)
    model = M.load_checkpoint(args.checkpoint)
    i_s = io_utils.load_image(args.support_image)
    i_q = io_utils.load_image(args.query_image)
    if args.illum_norm:
        i_s = eval_metrics.illumination_normalize_rgb(i_s)
        i_q = eval_metrics.illumination_normalize_rgb(i_q)
    masks = [io_utils.load_mask(p) for p in args.support_mask]
    results = M.forward_batch(model, i_q, i_s, masks)
    bank = gabor_nms.GaborBank()
    fit_lines, failures = [], 0
    overlay = i_q.copy()
    for idx, res in enumerate(results):
        if isinstance(res, Exception):
            print(f"error: CPI {idx}: {res}", file=sys.stderr)
            failures += 1
            continue
        io_utils.save_map(os.path.join(args.out_dir, f"cpi{idx:02d}_raw.png"), res)
        thinned = None
        if args.thin or args.fit or args.overlay:
            thinned = gabor_nms.nms_thin(res, bank)
            if args.thin:
                io_utils.save_map(
                    os.path.join(args.out_dir, f"cpi{idx:02d}_thin.png"), thinned)
        if args.fit:
            pts = extract_points(thinned, args.threshold)
            try:
                tag, line, arc = geom_fit.classify_primitive(pts)
                fit_lines.append(f"{idx}\t" + geom_fit.format_fit_record(
                    tag, line, arc, len(pts)))
            except geom_fit.FitError as exc:
                print(f"error: CPI {idx} fit: {exc}", file=sys.stderr)
                failures += 1
        if args.overlay:
            color = np.array(OVERLAY_PALETTE[idx % len(OVERLAY_PALETTE)], np.float32)
            sel = thinned >= args.threshold
            overlay[sel] = color
    if args.fit:
        with open(os.path.join(args.out_dir, "fit_report.tsv"), "w") as f:
            f.write("cpi\ttag\tparams\trms\tpoints\n")
            if fit_lines:
                f.write("\n".join(fit_lines) + "\n")
    if args.overlay:
        io_utils.save_image(os.path.join(args.out_dir, "overlay.png"), overlay)
    _write_effective_config(args.out_dir, args)
    return 1 if failures else 0


def cmd_thin(args):
    os.makedirs(args.out_dir, exist_ok=True)
    bank = gabor_nms.GaborBank(g0=args.g0)
    for stem in io_utils.list_stems(args.pred_dir):
        raw = io_utils.load_map(os.path.join(args.pred_dir, stem + ".png"))
        io_utils.save_map(os.path.join(args.out_dir, stem + ".png"),
                          gabor_nms.nms_thin(raw, bank))
    _write_effective_config(args.out_dir, args)
    return 0


def cmd_eval(args):
    pred_stems = io_utils.list_stems(args.pred_dir)
    gt_stems = [s[:-5] if s.endswith("_mask") else s
                for s in io_utils.list_stems(args.gt_dir)]
    missing = [s for s in pred_stems if s not in gt_stems]
    if missing or not pred_stems:
        print(f"error: stem mismatch between pred and gt: {missing}", file=sys.stderr)
        return 1
    preds, gts = [], []
    bank = gabor_nms.GaborBank()
    for stem in pred_stems:
        pred = io_utils.load_map(os.path.join(args.pred_dir, stem + ".png"))
        if args.illum_norm:
            pred = eval_metrics.illumination_normalize(pred * 255.0) / 255.0
        if not args.no_thin:
            pred = gabor_nms.nms_thin(pred, bank)
        gt_path = os.path.join(args.gt_dir, stem + "_mask.png")
        if not os.path.exists(gt_path):
            gt_path = os.path.join(args.gt_dir, stem + ".png")
        preds.append(pred)
        gts.append(io_utils.load_mask(gt_path))
    cfg = eval_metrics.EvalConfig(tolerance_fraction=args.tolerance)
    rows = eval_metrics.sweep_thresholds(preds, gts, cfg)
    best_t, best_f = eval_metrics.mf_ods(preds, gts, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    report = os.path.join(args.out_dir, "metrics.tsv")
    eval_metrics.write_report(report, rows, best_t, best_f)
    _write_effective_config(args.out_dir, args)
    print(f"MF-ODS\t{best_f:.6f}\tthreshold\t{best_t:.2f}")
    return 0


def cmd_fit(args):
    os.makedirs(args.out_dir, exist_ok=True)
    lines, failures = [], 0
    for stem in io_utils.list_stems(args.pred_dir):
        thinned = io_utils.load_map(os.path.join(args.pred_dir, stem + ".png"))
        pts = extract_points(thinned, args.threshold)
        try:
            tag, line, arc = geom_fit.classify_primitive(pts)
            lines.append(f"{stem}\t" + geom_fit.format_fit_record(
                tag, line, arc, len(pts)))
        except geom_fit.FitError as exc:
            print(f"error: {stem}: {exc}", file=sys.stderr)
            failures += 1
    with open(os.path.join(args.out_dir, "fit_report.tsv"), "w") as f:
        f.write("stem\ttag\tparams\trms\tpoints\n")
        if lines:
            f.write("\n".join(lines) + "\n")
    _write_effective_config(args.out_dir, args)
    return 1 if failures else 0


# -- parser ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cpie", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=("toy", "full"), default="toy")
    p.add_argument("--config", help="key=value config file")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("fixtures", help="generate the synthetic fixture dataset")
    q.add_argument("out_dir")
    q.add_argument("--count", type=int, default=20)
    q.add_argument("--size", type=int)
    q.add_argument("--kind", choices=("LS", "CA", "mixed"), default="mixed")
    q.set_defaults(func=cmd_fixtures)

    q = sub.add_parser("gen-pairs", help="emit support-query pairs from raw samples")
    q.add_argument("raw_dir")
    q.add_argument("distractor_dir")
    q.add_argument("out_dir")
    q.add_argument("--n-per-sample", type=int, default=1)
    q.add_argument("--test-mode", action="store_true", help="keep 1-px masks")
    q.set_defaults(func=cmd_gen_pairs)

    q = sub.add_parser("train", help="train with online pair generation")
    q.add_argument("raw_dir")
    q.add_argument("distractor_dir")
    q.add_argument("checkpoint_out")
    q.add_argument("--epochs", type=int)
    q.add_argument("--lr", type=float)
    q.add_argument("--steps-per-epoch", type=int)
    q.add_argument("--distance", choices=("cosine", "euclidean"), default="cosine")
    q.add_argument("--no-relevance", action="store_true")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("extract", help="extract CPI map(s) from a query image")
    q.add_argument("checkpoint")
    q.add_argument("support_image")
    q.add_argument("query_image")
    q.add_argument("out_dir")
    q.add_argument("--support-mask", action="append", required=True)
    q.add_argument("--thin", action="store_true")
    q.add_argument("--fit", action="store_true")
    q.add_argument("--overlay", action="store_true")
    q.add_argument("--illum-norm", action="store_true")
    q.add_argument("--threshold", type=float, default=0.5)
    q.set_defaults(func=cmd_extract)

    q = sub.add_parser("thin", help="thin raw contour maps")
    q.add_argument("pred_dir")
    q.add_argument("out_dir")
    q.add_argument("--g0", type=float, default=2.0)
    q.set_defaults(func=cmd_thin)

    q = sub.add_parser("eval", help="MF-ODS report for predictions vs ground truth")
    q.add_argument("pred_dir")
    q.add_argument("gt_dir")
    q.add_argument("out_dir")
    q.add_argument("--tolerance", type=float, default=0.015)
    q.add_argument("--no-thin", action="store_true")
    q.add_argument("--illum-norm", action="store_true")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("fit", help="fit primitives to thinned maps")
    q.add_argument("pred_dir")
    q.add_argument("out_dir")
    q.add_argument("--threshold", type=float, default=0.5)
    q.set_defaults(func=cmd_fit)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
