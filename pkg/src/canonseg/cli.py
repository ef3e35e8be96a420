"""Command-line surface: data/prompt generation, training, inference, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage error. `segment` prints
"absent" (still exit 0) when the existence filter fires.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import groups as G
from . import prompts as P
from . import train as TR
from .checks import run_selfcheck
from .data import Manifest, PhantomSpec


def _bank_for(class_names: list[str]) -> P.TemplateBank:
    return P.default_bank(class_names)


def cmd_gen_data(args) -> int:
    spec = PhantomSpec(image_size=args.size, seed=args.seed)
    out = Path(args.out)
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    for split, count in counts.items():
        spec_split = PhantomSpec(image_size=args.size, seed=args.seed + {"train": 0, "val": 1, "test": 2}[split])
        man = D.generate_dataset(spec_split, count, out / split)
        print(f"{split}: {count} samples at {out / split}")
    if args.transformed:
        action = G.GroupAction(args.group_order)
        src = Manifest.load(out / "test")
        D.apply_dataset_transforms(src, action, seed=args.seed + 3, out_dir=out / "test_transformed")
        print(f"test_transformed: transformed copies at {out / 'test_transformed'}")
    return 0


def cmd_gen_prompts(args) -> int:
    man = Manifest.load(args.data)
    dataset = TR.load_arrays(man)
    bank = _bank_for(man.class_names)
    pool = TR.build_prompt_pool(
        dataset, bank, args.seed,
        informed_per_class=args.informed_per_class,
        agnostic_per_category=args.agnostic_per_category,
    )
    if args.paraphrase:
        cfgp = P.ProviderConfig.from_env()
        pool = [P.paraphrase_external(p, cfgp) for p in pool]
    P.write_prompts_jsonl(args.out, pool)
    print(f"wrote {len(pool)} prompts to {args.out}")
    return 0


def _stages_from_arg(stage: str) -> tuple[int, ...]:
    return (1, 2, 3) if stage == "all" else (int(stage),)


def cmd_train(args) -> int:
    man = Manifest.load(args.data)
    dataset = TR.load_arrays(man)
    bank = _bank_for(man.class_names)
    cfg = TR.TrainConfig(stage=args.stage, seed=args.seed, group_order=args.group_order)
    if args.epochs:
        e = [int(v) for v in args.epochs.split(",")]
        cfg.epochs_stage1, cfg.epochs_stage2, cfg.epochs_stage3 = e
    stages = _stages_from_arg(args.stage)
    pool = None
    if args.prompts:
        pool = P.read_prompts_jsonl(args.prompts)
    if args.init:
        model, meta = TR.load_checkpoint(args.init)
        done = meta["stages_completed"]
    else:
        model, done = None, []
    model = TR.run_training(cfg, dataset, bank, pool=pool, model=model, stages=stages,
                            log=lambda s: print(s, flush=True))
    TR.save_checkpoint(args.out, model, cfg, man.class_names, sorted(set(done) | set(stages)),
                       rng_state=np.random.default_rng(cfg.seed).bit_generator.state)
    print(f"checkpoint written to {args.out}")
    return 0


def _load_image_arg(path: str) -> np.ndarray:
    return D.read_fts(path).astype(np.float32)


def cmd_segment(args) -> int:
    model, meta = TR.load_checkpoint(args.ckpt)
    model.use_canonicalizer = not args.no_canon
    model.mode = "equivariant" if args.equivariant else "invariant"
    x = _load_image_arg(args.image)
    result = model.segment(x, args.prompt)
    if not result.present:
        print("absent")
        return 0
    if args.out:
        D.write_fts(args.out, result.mask())
        print(f"mask written to {args.out}")
    if args.probs_out:
        D.write_fts(args.probs_out, result.probs.astype(np.float32))
        print(f"probabilities written to {args.probs_out}")
    classes = meta["class_names"]
    intent = classes[int(np.argmax(result.intent_logits))]
    print(f"present  pixels={int(result.mask().sum())}  g_hat={result.g_hat}  intent={intent}")
    return 0


def cmd_canonicalize(args) -> int:
    model, _ = TR.load_checkpoint(args.ckpt)
    x = _load_image_arg(args.image)
    x_canon, g_hat = model.canonicalizer.canonicalize_hard(x)
    D.write_fts(args.out, x_canon.astype(np.float32))
    print(f"g_hat={g_hat}  canonical image written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, meta = TR.load_checkpoint(args.ckpt)
    if args.no_canon:
        model.use_canonicalizer = False
    man = Manifest.load(args.data)
    dataset = TR.load_arrays(man)
    bank = _bank_for(meta["class_names"])
    report = TR.evaluate(model, dataset, bank, seed=args.seed, name=Path(args.data).name)
    print(report.table())
    if args.out_csv:
        report.write_csv(args.out_csv)
        print(f"csv written to {args.out_csv}")
    return 0


def cmd_ablate(args) -> int:
    train_set = TR.load_arrays(Manifest.load(args.data))
    test_set = TR.load_arrays(Manifest.load(args.test))
    trans_set = TR.load_arrays(Manifest.load(args.transformed_test))
    bank = _bank_for(train_set.class_names)
    cfg = TR.TrainConfig(seed=args.seed)
    if args.epochs:
        e = [int(v) for v in args.epochs.split(",")]
        cfg.epochs_stage1, cfg.epochs_stage2, cfg.epochs_stage3 = e
    rows = TR.run_ablation(cfg, train_set, test_set, trans_set, bank,
                           log=lambda s: print(s, flush=True))
    TR.write_ablation_csv(args.out_csv, rows)
    print(f"ablation csv written to {args.out_csv}")
    return 0


def cmd_selfcheck(args) -> int:
    failures = run_selfcheck(seed=args.seed)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canonseg",
        description="Text-prompted phantom segmentation with symmetry-aware canonicalization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate phantom train/val/test datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group-order", type=int, default=4, choices=(4, 8))
    p.add_argument("--transformed", action="store_true",
                   help="also emit a randomly transformed copy of the test split")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("gen-prompts", help="generate the training prompt pool as JSONL")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--informed-per-class", type=int, default=1)
    p.add_argument("--agnostic-per-category", type=int, default=1)
    p.add_argument("--paraphrase", action="store_true",
                   help="rewrite prompts via FLANS_PARAPHRASE_URL when configured")
    p.set_defaults(fn=cmd_gen_prompts)

    p = sub.add_parser("train", help="run the three-stage training strategy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", default="all", choices=("1", "2", "3", "all"))
    p.add_argument("--prompts", help="JSONL prompt pool (generated when omitted)")
    p.add_argument("--init", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group-order", type=int, default=4, choices=(4, 8))
    p.add_argument("--epochs", help="per-stage epochs, e.g. 8,20,12")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("segment", help="segment one FTS image with a text prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--no-canon", action="store_true",
                   help="disable the canonicalizer (raw-frame spatial prompts)")
    p.add_argument("--equivariant", action="store_true",
                   help="map the mask back to the input frame")
    p.add_argument("--out", help="write the binarized mask to this FTS path")
    p.add_argument("--probs-out", help="write the probability map to this FTS path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("canonicalize", help="map an image to the learned canonical frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_canonicalize)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--no-canon", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--transformed-test", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("selfcheck", help="run the invariant self-check battery")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
