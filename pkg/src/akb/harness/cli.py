"""Command-line entry point: ``akb <command> [options]``.

Errors exit with status 1 (2 for usage errors) and print a JSON object
``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ExperimentConfig, load_config


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags(top: bool) -> argparse.ArgumentParser:
    # Accepted before or after the command; only the top level sets defaults
    # so a flag given before the command is not reset by the subparser.
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="JSON experiment config")
    p.add_argument("--seed", type=int, default=d(None), help="override the config's root seed")
    p.add_argument("--workers", type=int, default=d(1), help="torch threads for evaluation")
    p.add_argument("--deterministic", action="store_true", default=d(False), help="single-threaded, bit-exact mode")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags(top=False)
    ap = _Parser(prog="akb", description="Knowledge-base-assisted JSCC experiments.", parents=[_global_flags(top=True)])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-codec", parents=[g], help="train the JSCC codec")
    p.add_argument("--out", type=Path, help="checkpoint path (default: codec.checkpoint)")

    p = sub.add_parser("train-agent", parents=[g], help="train the channel-KB agent against a frozen codec")
    p.add_argument("--out", type=Path, help="checkpoint path (default: agent.checkpoint)")

    for name, text in (("eval", "PSNR/CBR per scheme and SNR"), ("sweep", "CBR-targeted sweep"), ("ablate", "channel-KB ablation")):
        p = sub.add_parser(name, parents=[g], help=text)
        p.add_argument("--out", type=Path, help="CSV path (default: <output_dir>/<command>.csv)")
        if name != "ablate":
            p.add_argument("--schemes", nargs="+")

    kb = sub.add_parser("kb", parents=[g], help="knowledge-base tools")
    kbs = kb.add_subparsers(dest="kb_command", required=True, parser_class=_Parser)
    p = kbs.add_parser("build", parents=[g], help="caption and embed a corpus into a KB file")
    p.add_argument("--images", type=Path, help="image directory (default: the config's train split)")
    p.add_argument("--out", type=Path, help="KB path (default: kb.path)")
    p = kbs.add_parser("search", parents=[g], help="nearest KB entry for an image or text")
    p.add_argument("--kb", type=Path, help="KB path (default: kb.path)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--text")

    p = sub.add_parser("baseline", parents=[g], help="run the JPEG + LDPC + 16-QAM chain on one image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--quality", type=int, default=None)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--ldpc-fixture", type=Path, default=None)
    p.add_argument("--crop", type=int, default=None, help="centre-crop/resize before coding")
    p.add_argument("--save", type=Path, help="write the reconstruction here")

    p = sub.add_parser("report", parents=[g], help="turn report CSVs into x,y plot-data series")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--out-dir", type=Path, default=Path("plotdata"))

    p = sub.add_parser("ingest", parents=[g], help="scan an image directory and write a split manifest")
    p.add_argument("dataset_dir", type=Path)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--fractions", type=float, nargs=2)
    p.add_argument("--counts", type=int, nargs=2)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth-data", parents=[g], help="write random crops of bundled photographs")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=2200)
    p.add_argument("--crop", type=int, default=64)
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, cfg, name: str) -> Path:
    return args.out or Path(cfg.output_dir) / name


def _read_image(path: Path, crop: int | None = None) -> np.ndarray:
    from .dataset import center_crop_resize

    with Image.open(path) as im:
        return center_crop_resize(im, crop) if crop else np.asarray(im.convert("RGB"))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def run(args) -> None:
    from . import experiments as ex

    cfg = _config(args)
    cmd = args.command
    if cmd == "train-codec":
        _, digest = ex.train_codec(cfg, args.out)
        _emit({"checkpoint": str(args.out or cfg.codec.checkpoint), "sha256": digest})
    elif cmd == "train-agent":
        agent = ex.train_agent(cfg, args.out)
        _emit({"checkpoint": str(args.out or cfg.agent.checkpoint), "updates": len(agent.history_)})
    elif cmd == "eval":
        out = _out(args, cfg, "eval.csv")
        ex.run_eval(cfg, out, args.schemes, args.workers, args.deterministic)
        _emit({"csv": str(out)})
    elif cmd == "sweep":
        out = _out(args, cfg, "sweep.csv")
        ex.run_sweep_cbr(cfg, out, args.schemes, args.workers, args.deterministic)
        _emit({"csv": str(out)})
    elif cmd == "ablate":
        out = _out(args, cfg, "ablate.csv")
        ex.run_ablate(cfg, out, args.workers, args.deterministic)
        _emit({"csv": str(out)})
    elif cmd == "kb":
        _kb(args, cfg)
    elif cmd == "baseline":
        _baseline(args, cfg)
    elif cmd == "report":
        paths = ex.emit_plotdata(args.csv, args.out_dir)
        _emit({"series": [str(p) for p in paths]})
    elif cmd == "ingest":
        from .dataset import ingest

        m = ingest(args.dataset_dir, args.crop, cfg.seed, args.fractions, args.counts, args.out)
        _emit({"manifest": str(args.out), "train": len(m.ids("train")), "test": len(m.ids("test")), "skipped": len(m.skipped)})
    elif cmd == "synth-data":
        from .dataset import synth_dataset

        files = synth_dataset(args.out, args.n, args.crop, cfg.seed)
        _emit({"dir": str(args.out), "images": len(files)})


def _kb(args, cfg) -> None:
    from ..source_kb import SourceKB, kb_load, kb_save
    from . import experiments as ex

    k = cfg.kb
    if args.kb_command == "build":
        out = args.out or (Path(k.path) if k.path else None)
        if out is None:
            raise ValueError("no output path: pass --out or set kb.path")
        if args.images:
            from .dataset import IMAGE_SUFFIXES

            files = sorted(p for p in args.images.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
            imgs = [_read_image(p, cfg.dataset.crop) for p in files]
            ids = [p.relative_to(args.images).with_suffix("").as_posix() for p in files]
        else:
            m = ex.manifest_for(cfg)
            imgs, ids = ex.load_images(m, "train"), m.ids("train")
        kb = SourceKB(k.kb_dim, k.kb_provider, k.kb_provider_url, k.kb_fallback, k.prompt).fit(np.stack(imgs), entry_ids=ids)
        out.parent.mkdir(parents=True, exist_ok=True)
        kb_save(kb.store_, out)
        _emit({"kb": str(out), "n": kb.store_.n, "dim": kb.store_.dim})
        return
    path = args.kb or (Path(k.path) if k.path else None)
    if path is None:
        raise ValueError("no KB file: pass --kb or set kb.path")
    store = kb_load(path)
    kb = SourceKB.from_store(store, provider=k.kb_provider, provider_url=k.kb_provider_url, fallback=k.kb_fallback, prompt=k.prompt)
    prov = kb._provider()
    from ..source_kb import kb_search, side_info

    text = args.text if args.text is not None else prov.caption(_read_image(args.image, cfg.dataset.crop), k.prompt)
    res = kb_search(prov.embed(text), store)
    bits, nsym = side_info(res, store)
    _emit({
        "text": text, "index": res.index, "entry_id": store.entry_ids[res.index] if store.entry_ids else None,
        "sq_distance": res.sq_distance, "side_bits": "".join(map(str, bits)), "side_symbols": nsym,
    })


def _baseline(args, cfg) -> None:
    from ..baseline.chain import classic_chain_batch
    from ..baseline.jpeg import encoder_identity
    from ..baseline.ldpc import default_code
    from ..channel import ChannelSpec
    from .experiments import image_streams

    img = _read_image(args.image, args.crop)
    b = cfg.baseline
    quality = args.quality if args.quality is not None else b.quality
    fixture = args.ldpc_fixture or b.ldpc_fixture
    code = default_code(str(fixture) if fixture else None)
    outs, reps, traces = classic_chain_batch(
        [img], quality, ChannelSpec(args.snr), code, image_streams(cfg.seed, 1),
        send_header=b.send_header, max_iters=b.max_iters, seed=cfg.seed,
    )
    if args.save:
        Image.fromarray(outs[0]).save(args.save)
    rep = reps[0].to_dict()
    rep.update(quality=quality, jpeg_encoder=encoder_identity(), payload_bytes=traces[0].payload_bytes,
               ldpc_blocks=traces[0].n_blocks, blocks_failed=traces[0].blocks_failed, reason=traces[0].reason)
    _emit(rep)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except Exception as exc:
        if args.verbose:
            logging.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
