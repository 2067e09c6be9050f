"""Command-line entry point.

Subcommands: synth, tokenize, train, eval, predict, gradcheck, ablate, bench.
Every config key is exposed as exactly one flag, spelled
--<section>.<field-with-dashes> (e.g. --loss.k, --train.peak-lr); --no-tcl,
--no-nktp, and --no-het are ablation shorthands that zero lambda1, set k=1,
and push het_start_epoch past the end of training.

--threads N (or env NTPSEG_THREADS) pins BLAS/torch threads; 1 gives the
fully deterministic mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _peek_threads(argv) -> str | None:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return os.environ.get("NTPSEG_THREADS")


def _setup_threads(argv):
    n = _peek_threads(argv)
    if n is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))
    return n


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    from ntpseg import configio

    for name, (section, field) in configio.FIELDS.items():
        flag = f"--{section}.{name.replace('_', '-')}"
        parser.add_argument(flag, dest=f"cfg__{name}", metavar="V",
                            help=f"override {name} (default {field.default})")
    parser.add_argument("--no-tcl", action="store_true", help="ablation: lambda1 = 0")
    parser.add_argument("--no-nktp", action="store_true", help="ablation: k = 1")
    parser.add_argument("--no-het", action="store_true",
                        help="ablation: HET never activates")


def _flat_config(args) -> dict:
    from ntpseg import configio

    flat = {}
    if getattr(args, "config", None):
        flat.update(configio.load_config_file(args.config))
    for key, val in vars(args).items():
        if key.startswith("cfg__") and val is not None:
            name = key[len("cfg__"):]
            flat[name] = configio.parse_value(name, val)
    if getattr(args, "no_tcl", False):
        flat["lambda1"] = 0.0
    if getattr(args, "no_nktp", False):
        flat["k"] = 1
    if getattr(args, "no_het", False):
        flat["het_start_epoch"] = flat.get("epochs", configio.default_flat()["epochs"]) + 1
    return flat


def _load_split(data_dir, split):
    from ntpseg.data import load_manifest

    records = [r for r in load_manifest(data_dir) if split in ("all", r.split)]
    if not records:
        raise SystemExit(f"error: no samples in split {split!r} under {data_dir}")
    return records


# --------------------- subcommands ---------------------

def cmd_synth(args) -> int:
    from ntpseg.data import generate_synthetic

    records = generate_synthetic(args.out, seed=args.seed, n=args.n, img_size=args.img_size)
    splits = {s: sum(1 for r in records if r.split == s) for s in ("train", "val", "test")}
    print(f"wrote {len(records)} samples to {args.out} (splits {splits})")
    return 0


def cmd_tokenize(args) -> int:
    from ntpseg import configio
    from ntpseg.data import load_image, load_mask
    from ntpseg.sequence import document_to_record, tokenize_sample

    codec_cfg, _, _, train_cfg = configio.resolve_configs(_flat_config(args))
    image = load_image(args.image)
    mask = load_mask(args.mask)
    text = Path(args.text).read_text(encoding="utf-8").strip()
    doc = tokenize_sample(image, mask, text, codec_cfg,
                          sample_id=Path(args.image).stem,
                          train_on_all_tokens=train_cfg.train_on_all_tokens)
    rec = document_to_record(doc)
    rec["n_loss_positions"] = int(doc.loss_mask.sum())
    print(json.dumps(rec))
    return 0


def _make_trainer(args, flat):
    from ntpseg import configio
    from ntpseg.trainer import Trainer

    codec_cfg, model_cfg, loss_cfg, train_cfg = configio.resolve_configs(flat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return Trainer(codec_cfg, model_cfg, loss_cfg, train_cfg,
                   metrics_path=out / "metrics.jsonl"), out


def cmd_train(args) -> int:
    from ntpseg import configio
    from ntpseg.kernels import set_threads
    from ntpseg.trainer import Trainer, documents_from_records

    if args.threads:
        set_threads(int(args.threads))
    flat = _flat_config(args)
    if args.resume:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        trainer = Trainer.load(args.resume, metrics_path=out / "metrics.jsonl")
    else:
        trainer, out = _make_trainer(args, flat)
    configio.save_config_file(out / "config.resolved.cfg", configio.flat_from_configs(
        trainer.codec_cfg, trainer.model_cfg, trainer.loss_cfg, trainer.train_cfg))
    records = _load_split(args.data, "train")
    docs = documents_from_records(records, args.data, trainer.codec_cfg,
                                  trainer.train_cfg.train_on_all_tokens)

    def on_epoch(tr, report):
        print(f"epoch {report['epoch']:4d}  total {report['total']:.4f}  "
              f"ntp {report['ntp']:.4f}  tcl {report['tcl']:.4f}  "
              f"nktp {report['nktp']:.4f}  het {report['het']:.4f}  "
              f"tok_acc {report['token_accuracy']:.4f}", flush=True)
        if args.save_every and (report["epoch"] + 1) % args.save_every == 0:
            tr.save(Path(args.out) / "model.ntpseg")
        return False

    trainer.train(docs, on_epoch=on_epoch)
    trainer.save(out / "model.ntpseg")
    trainer.close()
    print(f"saved {out / 'model.ntpseg'}")
    return 0


def _evaluate_records(trainer_params, layout, codec_cfg, records, data_dir, beam_width):
    from ntpseg.data import load_image, load_mask
    from ntpseg.infer import DecodeConfig, DecodeError, generate_mask
    from ntpseg.metrics import aggregate, failed_row, score_pair
    from ntpseg.sequence import prompt_prefix

    rows = []
    for rec in sorted(records, key=lambda r: r.sample_id):
        img = load_image(Path(data_dir) / rec.image_path)
        gt = load_mask(Path(data_dir) / rec.mask_path)
        try:
            gen = generate_mask(trainer_params, prompt_prefix(img, rec.description, codec_cfg),
                                layout, DecodeConfig(beam_width=beam_width))
            rows.append(score_pair(rec.sample_id, gen.mask, gt))
        except (DecodeError, ValueError) as exc:
            rows.append(failed_row(rec.sample_id, gt, str(exc)))
    return {"per_image": rows, "aggregate": aggregate(rows)}


def cmd_eval(args) -> int:
    from ntpseg.checkpoint import load_checkpoint, params_from_checkpoint
    from ntpseg.codec import CodecConfig
    from ntpseg.kernels import set_threads
    from ntpseg.metrics import format_report
    from ntpseg.sequence import VocabLayout

    if args.threads:
        set_threads(int(args.threads))
    header, tensors = load_checkpoint(args.ckpt)
    params = params_from_checkpoint(header, tensors)
    codec_cfg = CodecConfig(**header["config"]["codec"])
    layout = VocabLayout.from_codec(codec_cfg)
    records = _load_split(args.data, args.split)
    report = _evaluate_records(params, layout, codec_cfg, records, args.data, args.beam)
    print(format_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2), encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    import numpy as np
    from PIL import Image

    from ntpseg.checkpoint import load_checkpoint, params_from_checkpoint
    from ntpseg.codec import CodecConfig
    from ntpseg.infer import DecodeConfig, generate_mask
    from ntpseg.data import load_image
    from ntpseg.sequence import VocabLayout, prompt_prefix

    header, tensors = load_checkpoint(args.ckpt)
    params = params_from_checkpoint(header, tensors)
    codec_cfg = CodecConfig(**header["config"]["codec"])
    layout = VocabLayout.from_codec(codec_cfg)
    img = load_image(args.image)
    gen = generate_mask(params, prompt_prefix(img, args.text, codec_cfg), layout,
                        DecodeConfig(beam_width=args.beam))
    out = Path(args.out)
    Image.fromarray((gen.mask * 255).astype(np.uint8), mode="L").save(out)
    sidecar = {"sample_id": Path(args.image).stem, "logprob": gen.logprob,
               "token_grid": gen.token_grid.tolist()}
    out.with_suffix(out.suffix + ".json").write_text(json.dumps(sidecar), encoding="utf-8")
    print(f"wrote {out} (logprob {gen.logprob:.3f})")
    return 0


def cmd_gradcheck(args) -> int:
    from ntpseg.gradcheck import standard_suite

    reports = standard_suite(n_coords=args.coords)
    ok = True
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:9s} checked={r.n_checked:4d} max_rel_err={r.max_rel_err:.3e} "
              f"worst={r.worst_tensor} [{status}]")
        ok &= r.passed
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    import statistics

    from ntpseg import configio
    from ntpseg.trainer import Trainer, documents_from_records
    from ntpseg.checkpoint import load_checkpoint, params_from_checkpoint
    from ntpseg.sequence import VocabLayout

    flat = _flat_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    base_epochs = flat.get("epochs", configio.default_flat()["epochs"])
    rows = [
        ("baseline", {"lambda1": 0.0, "k": 1, "het_start_epoch": base_epochs + 1}),
        ("+TCL", {"k": 1, "het_start_epoch": base_epochs + 1}),
        ("+TCL+NkTP", {"het_start_epoch": base_epochs + 1}),
        ("+TCL+NkTP+HET", {}),
    ]
    train_records = _load_split(args.data, "train")
    test_records = _load_split(args.data, args.split)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    table = []
    for name, patch in rows:
        dices, mious = [], []
        for seed in seeds:
            run_flat = dict(flat)
            run_flat.update(patch)
            run_flat["seed"] = seed
            codec_cfg, model_cfg, loss_cfg, train_cfg = configio.resolve_configs(run_flat)
            run_dir = out_root / f"{name.replace('+', 'p')}_s{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            trainer = Trainer(codec_cfg, model_cfg, loss_cfg, train_cfg,
                              metrics_path=run_dir / "metrics.jsonl")
            docs = documents_from_records(train_records, args.data, codec_cfg,
                                          train_cfg.train_on_all_tokens)
            trainer.train(docs)
            trainer.save(run_dir / "model.ntpseg")
            trainer.close()
            layout = VocabLayout.from_codec(codec_cfg)
            report = _evaluate_records(trainer.params, layout, codec_cfg,
                                       test_records, args.data, args.beam)
            dices.append(report["aggregate"]["macro_dice"])
            mious.append(report["aggregate"]["macro_miou"])
            print(f"{name:14s} seed {seed}: dice {dices[-1]:.4f} miou {mious[-1]:.4f}",
                  flush=True)
        table.append({"row": name, "dice_median": statistics.median(dices),
                      "miou_median": statistics.median(mious),
                      "dice_all": dices, "miou_all": mious})
    print(f"\n{'row':<16} {'Dice(med)':>10} {'mIoU(med)':>10}")
    for r in table:
        print(f"{r['row']:<16} {r['dice_median']:>10.4f} {r['miou_median']:>10.4f}")
    (out_root / "ablation.json").write_text(json.dumps(table, indent=2), encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    from ntpseg.bench import run_bench

    print(run_bench(rows=args.rows, vocab=args.vocab, dim=args.dim, reps=args.reps))
    return 0


# --------------------- parser ---------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntpseg",
                                     description="next-token mask prediction, desk scale")
    parser.add_argument("--threads", metavar="N", help="BLAS/torch threads (1 = deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--img-size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tokenize", help="print a sample's document ids and spans")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--text", required=True, help="path to the description text file")
    p.add_argument("--config")
    _add_config_flags(p)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--save-every", type=int, default=0, metavar="EPOCHS")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a mask for one image + description")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True, help="the referring description")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--beam", type=int, default=4)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config")
    p.add_argument("--coords", type=int, default=200)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the 4-row component ablation grid")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--split", default="test", choices=["val", "test"])
    p.add_argument("--beam", type=int, default=4)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="benchmark the fused kernel vs the numpy fallback")
    p.add_argument("--rows", type=int, default=2048)
    p.add_argument("--vocab", type=int, default=65862)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _setup_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
