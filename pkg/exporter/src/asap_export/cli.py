"""Command line front end: asap-export --input d.jsonl --model ID --out f.bin"""

import argparse
import logging
import sys
import traceback

from .export import ExportError, ExportJob, export


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; we reserve 2 for runtime failures
    def error(self, message):
        raise ExportError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="asap-export",
                description="Write per-turn CLS embeddings for a dialogue "
                            "JSONL file into the binary embedding store.")
    p.add_argument("--input", required=True, help="dialogue JSONL path")
    p.add_argument("--model", required=True,
                   help="pretrained encoder (local path or hub id)")
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--max-len", type=int, default=512,
                   help="token budget per turn (default 512)")
    p.add_argument("--expect-dim", type=int, default=None,
                   help="fail unless the encoder hidden size matches")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--device", default=None, help="torch device hint")
    p.add_argument("-q", "--quiet", action="store_true",
                   help="suppress progress logging")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.quiet:
            logging.getLogger("asap_export").setLevel(logging.ERROR)
        job = ExportJob(input_path=args.input, model_id=args.model,
                        out_path=args.out, max_length=args.max_len,
                        batch_size=args.batch_size,
                        expect_dim=args.expect_dim, device=args.device)
        count = export(job)
    except (ExportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    print(f"wrote {count} records to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
