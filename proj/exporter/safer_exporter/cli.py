"""exporter --model ID --layer-fraction F --dataset PATH --out PATH --batch N [--all-tokens]"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Optional, Sequence

from .export import ExportError, ExportJob, export_preference, export_pretrain, read_triplets


def _load_hf(model_id: str, device: Optional[str]):
    from .hf import HFModel

    return HFModel(model_id, device)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safer-exporter", description=__doc__)
    p.add_argument("--model", required=True, help="model identifier or local path")
    where = p.add_mutually_exclusive_group()
    where.add_argument("--layer-fraction", type=float, default=0.75, help="layer = floor(F * depth)")
    where.add_argument("--layer", type=int, help="explicit 1-based block index")
    p.add_argument("--dataset", required=True,
                   help="preference JSONL (stage preference) or plain text, one document per line (stage pretrain)")
    p.add_argument("--out", required=True, help="output shard path")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--all-tokens", action="store_true", help="store every token of preference sequences")
    p.add_argument("--stage", choices=["preference", "pretrain"], default="preference")
    p.add_argument("--dataset-out", help="dataset with token counts (default: <out>.dataset.jsonl)")
    p.add_argument("--device", help="cpu, cuda, cuda:N")
    return p


def main(argv: Optional[Sequence[str]] = None, load_model: Callable = _load_hf) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    job = ExportJob(model=args.model, out=args.out, layer_fraction=args.layer_fraction, layer=args.layer,
                    dataset=args.dataset, batch=args.batch, device=args.device, all_tokens=args.all_tokens)
    try:
        model = load_model(args.model, args.device)
        if args.stage == "pretrain":
            with open(args.dataset, encoding="utf-8") as f:
                export_pretrain(job, model, (line.rstrip("\n") for line in f if line.strip()))
        else:
            export_preference(job, model, read_triplets(args.dataset), args.dataset_out or args.out + ".dataset.jsonl")
    except (ExportError, OSError) as e:
        logging.error("%s", e)
        return 2 if isinstance(e, ExportError) else 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
