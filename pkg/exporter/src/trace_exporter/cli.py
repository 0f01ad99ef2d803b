import argparse
import sys

from .errors import ExportError
from .export import export_traces
from .models import PRESETS
from .spec import DATASETS, ExportSpec


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="export-traces",
        description="Run a preset network over a dataset and write per-block "
        "activation traces.",
    )
    ap.add_argument("--model", default="resnet18-cifar", choices=sorted(PRESETS))
    ap.add_argument("--dataset", default="cifar10", choices=sorted(DATASETS))
    ap.add_argument("--out-dir", default="traces/export", metavar="DIR")
    ap.add_argument("--data-root", default=None, metavar="DIR",
                    help="dataset location (required for cifar10)")
    ap.add_argument("--weights", default=None, metavar="FILE",
                    help="state_dict checkpoint; omitted = seeded random weights")
    ap.add_argument("--split-sizes", type=int, nargs=3, default=(40_000, 5_000, 5_000),
                    metavar=("TRAIN", "VAL", "TEST"))
    ap.add_argument("--test-from-holdout", action="store_true",
                    help="use the dataset's held-out test images as the test split")
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--no-normalize", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        model=args.model,
        dataset=args.dataset,
        out_dir=args.out_dir,
        data_root=args.data_root,
        weights=args.weights,
        split_sizes=tuple(args.split_sizes),
        test_from_holdout=args.test_from_holdout,
        batch_size=args.batch_size,
        seed=args.seed,
        device=args.device,
        normalize=not args.no_normalize,
    )
    try:
        out = export_traces(spec)
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 2
    print(f"trace written to {out}")
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
