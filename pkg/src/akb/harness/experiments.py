"""Training, evaluation, CBR sweeps, ablation and plot-data emission.

Every image gets its own random stream keyed by (image position, SNR), and
the key does not include the scheme, so all schemes in a cell see the same
noise realisation.  Report rows are formatted with fixed precision so reruns
are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..baseline.chain import classic_chain_batch, chain_cbr
from ..baseline.jpeg import encoder_identity
from ..baseline.ldpc import default_code
from ..channel import ChannelSpec
from ..channel_kb import NEUTRAL, ChannelKBAgent, apply_action, build_state, policy_step
from ..codec import JSCCCodec, file_sha256, load_checkpoint, save_checkpoint
from ..core import RngStream, source_symbols
from ..source_kb import SourceKB, kb_load, kb_save
from .config import LEARNED, ExperimentConfig
from .dataset import SplitManifest, ingest, load_images

logger = logging.getLogger(__name__)

EVAL_HEADER = ["scheme", "snr_db", "cbr_mean", "psnr_mean", "psnr_std", "n_images", "seed"]
SWEEP_HEADER = EVAL_HEADER + ["cbr_target", "knob", "probes", "unreachable"]
ABLATE_HEADER = EVAL_HEADER + ["delta_psnr_vs_no_ckb"]
ABLATE_SCHEMES = ("akb_jscc", "akb_jscc_no_ckb", "fixed_rate_jscc")


class ExperimentError(RuntimeError):
    pass


def image_streams(seed: int, n: int) -> list[RngStream]:
    """Per-image streams, shared by every scheme and SNR.

    The noise is drawn as a scaled unit Gaussian, so image ``i`` sees the same
    noise direction at every SNR and curves over SNR are paired comparisons.
    """
    return [RngStream(int(seed), (i,)) for i in range(n)]


def random_snrs(seed: int, n: int, choices) -> np.ndarray:
    """Seeded per-image test SNRs drawn uniformly from ``choices``."""
    choices = np.asarray(choices, dtype=np.float64)
    return choices[RngStream(int(seed), (0x5A2D,)).generator.integers(0, len(choices), n)]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _set_threads(workers: int, deterministic: bool) -> None:
    torch.set_num_threads(1 if deterministic else max(1, int(workers)))
    if deterministic:
        torch.use_deterministic_algorithms(True)


# -- data and model loading ---------------------------------------------------


def manifest_for(cfg: ExperimentConfig) -> SplitManifest:
    d = cfg.dataset
    if d.manifest and Path(d.manifest).exists():
        return SplitManifest.load(d.manifest)
    if d.path is None:
        raise ExperimentError("dataset.path or an existing dataset.manifest is required")
    return ingest(d.path, d.crop, cfg.seed, fractions=d.fractions, counts=d.split_counts, manifest_path=d.manifest)


def split_images(cfg: ExperimentConfig, split: str) -> np.ndarray:
    limit = cfg.dataset.test_limit if split == "test" else None
    return load_images(manifest_for(cfg), split, limit)


def load_kb(cfg: ExperimentConfig) -> SourceKB:
    k = cfg.kb
    if k.path is None or not Path(k.path).exists():
        raise ExperimentError(f"knowledge base file not found: {k.path} (run `akb kb build`)")
    return SourceKB.from_store(
        kb_load(k.path), provider=k.kb_provider, provider_url=k.kb_provider_url, fallback=k.kb_fallback, prompt=k.prompt
    )


def build_kb(cfg: ExperimentConfig, images=None) -> SourceKB:
    k = cfg.kb
    if images is None:
        m = manifest_for(cfg)
        images, ids = load_images(m, "train"), m.ids("train")
    else:
        ids = None
    kb = SourceKB(k.kb_dim, k.kb_provider, k.kb_provider_url, k.kb_fallback, k.prompt).fit(images, entry_ids=ids)
    if k.path is not None:
        Path(k.path).parent.mkdir(parents=True, exist_ok=True)
        kb_save(kb.store_, k.path)
    return kb


@dataclass
class Workbench:
    """Everything an evaluation needs, loaded once."""

    cfg: ExperimentConfig
    X: np.ndarray
    kb: SourceKB | None = None
    codec: JSCCCodec | None = None
    codec_hash: str | None = None
    agent: ChannelKBAgent | None = None
    cond: np.ndarray | None = None
    kb_bits: list | None = None
    y_hat: np.ndarray | None = None
    entropy: np.ndarray | None = None
    _states: dict = field(default_factory=dict)

    @classmethod
    def load(cls, cfg: ExperimentConfig, schemes, X=None) -> "Workbench":
        X = split_images(cfg, "test") if X is None else X
        wb = cls(cfg, X)
        learned = [s for s in schemes if s in LEARNED]
        if learned:
            ckpt = cfg.codec.checkpoint
            if ckpt is None or not Path(ckpt).exists():
                raise ExperimentError(f"scheme {learned[0]}: codec checkpoint not found: {ckpt}")
            model, _ = load_checkpoint(ckpt)
            wb.codec = JSCCCodec.from_model(model)
            wb.codec_hash = file_sha256(ckpt)
            wb.kb = load_kb(cfg)
            r = wb.kb.retrieve(X)
            # receiver side: recover the vectors from the transmitted index bits
            wb.cond = np.stack([wb.kb.lookup(b) for b in r.bits]).astype(np.float32)
            if not np.array_equal(wb.cond, r.vectors.astype(np.float32)):
                raise ExperimentError("receiver KB lookup disagrees with transmitter retrieval")
            wb.kb_bits = r.bits
            wb.y_hat = wb.codec.transform(X)
            wb.entropy = wb.codec.entropy_maps(wb.y_hat)
        if "akb_jscc" in schemes:
            ckpt = cfg.agent.checkpoint
            if ckpt is None or not Path(ckpt).exists():
                raise ExperimentError(f"scheme akb_jscc: agent checkpoint not found: {ckpt}")
            wb.agent = ChannelKBAgent.load(ckpt, codec_hash=wb.codec_hash)
        return wb

    @property
    def n_rates(self) -> int:
        return len(self.codec.config_.rate_set)

    def rate_maps(self, scheme: str, snr_db, eta: float | None = None, level: int | None = None) -> np.ndarray:
        """Rate index maps the transmitter would use for ``scheme`` at ``snr_db``."""
        if scheme == "fixed_rate_jscc":
            lvl = (self.n_rates - 1) // 2 if level is None else int(level)
            return np.full(self.entropy.shape, lvl, dtype=np.int64)
        rm = self.codec.rate_maps(y_hat=self.y_hat, eta=eta)
        if scheme == "akb_jscc_no_ckb":
            return rm
        if scheme == "akb_jscc":
            snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), (len(rm),))
            cfg = self.agent.ppo_config()
            states = np.stack([build_state(e, ChannelSpec(float(s)), NEUTRAL, cfg) for e, s in zip(self.entropy, snr)])
            actions = policy_step(states, self.agent.net_, deterministic=True)[0]
            return np.stack(
                [apply_action(rm[i], actions[i], self.n_rates, self.agent.action_mode) for i in range(len(rm))]
            )
        raise ExperimentError(f"not a learned scheme: {scheme}")

    def side_symbols(self) -> np.ndarray:
        cfg = self.codec.config_
        rm_bits = cfg.rate_map_bits_per_token * int(np.prod(self.entropy.shape[1:]))
        return np.array([math.ceil(len(b) / 2) + math.ceil(rm_bits / 2) for b in self.kb_bits])

    def cbr_of_maps(self, rate_maps: np.ndarray) -> float:
        rates = np.asarray(self.codec.config_.rate_set)
        syms = rates[rate_maps].reshape(len(rate_maps), -1).sum(axis=1) + self.side_symbols()
        return float(np.mean(syms / source_symbols(self.X.shape[1:])))


# -- evaluation ----------------------------------------------------------------


@dataclass
class CellResult:
    scheme: str
    snr_db: float | np.ndarray
    psnr: np.ndarray
    cbr: np.ndarray
    failed: np.ndarray | None = None

    def row(self, seed: int) -> list[str]:
        snr = _fmt(self.snr_db) if np.ndim(self.snr_db) == 0 else "random"
        return [
            self.scheme, snr, _fmt(float(self.cbr.mean())), _fmt(float(self.psnr.mean())),
            _fmt(float(self.psnr.std())), str(len(self.psnr)), str(seed),
        ]


def evaluate_cell(wb: Workbench, scheme: str, snr_db, seed: int, eta=None, level=None, quality=None) -> CellResult:
    """PSNR/CBR of every test image; ``snr_db`` is a scalar or one SNR per image."""
    rngs = image_streams(seed, len(wb.X))
    if scheme == "jpeg_ldpc":
        b = wb.cfg.baseline
        code = default_code(b.ldpc_fixture)
        snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), (len(wb.X),))
        _, reports, _ = classic_chain_batch(
            wb.X, quality or b.quality, [ChannelSpec(float(x)) for x in snr], code, rngs,
            send_header=b.send_header, max_iters=b.max_iters, seed=seed,
        )
        return CellResult(
            scheme, snr_db, np.array([r.psnr_db for r in reports]), np.array([r.cbr for r in reports]),
            np.array([r.failed for r in reports]),
        )
    rm = wb.rate_maps(scheme, snr_db, eta=eta, level=level)
    res = wb.codec.transmit(
        wb.X, snr_db, rngs, cond=wb.cond, kb_bits=wb.kb_bits, rate_maps=rm, y_hat=wb.y_hat
    )
    return CellResult(scheme, snr_db, res.psnr, res.cbr)


def _write_csv(path, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def _canonical(rows, schemes):
    order = {s: i for i, s in enumerate(schemes)}
    return sorted(rows, key=lambda r: (order.get(r[0], len(order)), float(r[1])))


def _meta(wb: Workbench, extra: dict | None = None) -> dict:
    return {
        "codec_checkpoint_sha256": wb.codec_hash,
        "jpeg_encoder": encoder_identity(),
        "baseline_quality": wb.cfg.baseline.quality,
        "n_images": int(len(wb.X)),
        "seed": wb.cfg.seed,
        **(extra or {}),
    }


def run_eval(cfg: ExperimentConfig, out_csv=None, schemes=None, workers: int = 1, deterministic: bool = True, wb=None) -> str:
    """Evaluate every (scheme, SNR) cell; returns the CSV text and writes it if ``out_csv`` is given."""
    _set_threads(workers, deterministic)
    schemes = list(schemes or cfg.schemes)
    wb = wb or Workbench.load(cfg, schemes)
    rows = [evaluate_cell(wb, s, snr, cfg.seed).row(cfg.seed) for s in schemes for snr in cfg.snr_db]
    text = _write_csv(out_csv, EVAL_HEADER, _canonical(rows, schemes))
    if out_csv is not None:
        Path(out_csv).with_suffix(".meta.json").write_text(json.dumps(_meta(wb), indent=1, sort_keys=True) + "\n")
    return text


# -- CBR sweep -------------------------------------------------------------------


@dataclass
class KnobSearch:
    knob: float
    cbr: float
    probes: int
    reachable: bool


def search_knob(cbr_at, lo: float, hi: float, target: float, tol: float, max_probes: int, integer: bool = False, log: bool = False) -> KnobSearch:
    """Bisect a knob with non-decreasing CBR until it lands within ``tol`` (relative) of ``target``."""
    best = None
    probes = 0

    def probe(k):
        nonlocal probes, best
        probes += 1
        c = cbr_at(k)
        if best is None or abs(c - target) < abs(best[1] - target):
            best = (k, c)
        return c

    def ok(c):
        return target > 0 and abs(c - target) <= tol * target

    c_lo = probe(lo)
    if ok(c_lo):
        return KnobSearch(lo, c_lo, probes, True)
    if c_lo > target * (1 + tol):
        return KnobSearch(lo, c_lo, probes, False)
    c_hi = probe(hi)
    if ok(c_hi):
        return KnobSearch(hi, c_hi, probes, True)
    if c_hi < target * (1 - tol):
        return KnobSearch(hi, c_hi, probes, False)
    while probes < max_probes:
        if integer:
            if hi - lo <= 1:
                break
            mid = (lo + hi) // 2
        else:
            mid = math.sqrt(lo * hi) if log else 0.5 * (lo + hi)
        c = probe(mid)
        if ok(c):
            return KnobSearch(mid, c, probes, True)
        if c < target:
            lo = mid
        else:
            hi = mid
    return KnobSearch(best[0], best[1], probes, False)


def _knob_search(wb: Workbench, scheme: str, target: float) -> KnobSearch:
    sw = wb.cfg.sweep
    snr = sw.snr_db
    if scheme == "jpeg_ldpc":
        b = wb.cfg.baseline
        code = default_code(b.ldpc_fixture)

        def cbr_at(q):
            return float(np.mean([chain_cbr(x, int(q), code, b.send_header) for x in wb.X]))

        return search_knob(cbr_at, int(sw.quality_bounds[0]), int(sw.quality_bounds[1]), target, sw.tolerance, sw.max_probes, integer=True)
    if scheme == "fixed_rate_jscc":
        return search_knob(
            lambda lvl: wb.cbr_of_maps(wb.rate_maps(scheme, snr, level=int(lvl))),
            0, wb.n_rates - 1, target, sw.tolerance, sw.max_probes, integer=True,
        )
    return search_knob(
        lambda eta: wb.cbr_of_maps(wb.rate_maps(scheme, snr, eta=eta)),
        float(sw.eta_bounds[0]), float(sw.eta_bounds[1]), target, sw.tolerance, sw.max_probes, log=True,
    )


def run_sweep_cbr(cfg: ExperimentConfig, out_csv=None, schemes=None, workers: int = 1, deterministic: bool = True, wb=None) -> str:
    """For each CBR target, bisect the scheme's rate knob, then evaluate the test set once at the found knob."""
    _set_threads(workers, deterministic)
    schemes = list(schemes or cfg.schemes)
    wb = wb or Workbench.load(cfg, schemes)
    snr = cfg.sweep.snr_db
    rows = []
    for s in schemes:
        for target in cfg.sweep.cbr_targets:
            ks = _knob_search(wb, s, float(target))
            kw = {"quality": int(ks.knob)} if s == "jpeg_ldpc" else {"level": int(ks.knob)} if s == "fixed_rate_jscc" else {"eta": ks.knob}
            cell = evaluate_cell(wb, s, snr, cfg.seed, **kw)
            rows.append(cell.row(cfg.seed) + [_fmt(float(target)), _fmt(float(ks.knob)), str(ks.probes), str(int(not ks.reachable))])
    rows.sort(key=lambda r: ({s: i for i, s in enumerate(schemes)}[r[0]], float(r[7])))
    return _write_csv(out_csv, SWEEP_HEADER, rows)


# -- ablation ----------------------------------------------------------------------


def run_ablate(cfg: ExperimentConfig, out_csv=None, workers: int = 1, deterministic: bool = True, wb=None) -> str:
    """akb_jscc, akb_jscc_no_ckb and fixed_rate_jscc under one protocol, with PSNR deltas against no_ckb."""
    _set_threads(workers, deterministic)
    wb = wb or Workbench.load(cfg, ABLATE_SCHEMES)
    cells = {(s, snr): evaluate_cell(wb, s, snr, cfg.seed) for s in ABLATE_SCHEMES for snr in cfg.snr_db}
    rows = []
    for s in ABLATE_SCHEMES:
        for snr in cfg.snr_db:
            c = cells[(s, snr)]
            delta = float(c.psnr.mean()) - float(cells[("akb_jscc_no_ckb", snr)].psnr.mean())
            rows.append(c.row(cfg.seed) + [_fmt(delta)])
    return _write_csv(out_csv, ABLATE_HEADER, _canonical(rows, ABLATE_SCHEMES))


# -- plot data -----------------------------------------------------------------------


class PlotDataError(ValueError):
    pass


def _read_report(path) -> tuple[list[str], list[tuple[int, dict]]]:
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise PlotDataError(f"{path}: line 1: empty file") from None
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise PlotDataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
        rows.append((lineno, dict(zip(header, rec))))
    return header, rows


def emit_plotdata(csv_paths, out_dir) -> list[Path]:
    """Write one ``x,y`` series per (scheme, axis): PSNR vs SNR for eval reports, PSNR vs CBR for sweeps."""
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for path in csv_paths:
        header, rows = _read_report(path)
        for col in ("scheme", "psnr_mean"):
            if col not in header:
                raise PlotDataError(f"{path}: missing column {col!r}")
        sweep = "cbr_target" in header
        xcol = "cbr_mean" if sweep else "snr_db"
        if xcol not in header:
            raise PlotDataError(f"{path}: missing column {xcol!r}")
        axis = "cbr" if sweep else "snr"
        for lineno, r in rows:
            if sweep and r.get("unreachable", "0") == "1":
                continue
            try:
                x, y = float(r[xcol]), float(r["psnr_mean"])
            except ValueError:
                raise PlotDataError(f"{path}: line {lineno}: non-numeric value") from None
            series.setdefault((r["scheme"], axis), []).append((x, y))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (scheme, axis), pts in sorted(series.items()):
        p = out / f"{scheme}_{axis}.csv"
        _write_csv(p, ["x", "y"], [[_fmt(x), _fmt(y)] for x, y in sorted(pts)])
        written.append(p)
    return written


# -- training ---------------------------------------------------------------------------


def train_codec(cfg: ExperimentConfig, out_path=None, X=None) -> tuple[JSCCCodec, str]:
    """Train the codec on the train split with KB conditioning; returns the estimator and checkpoint hash."""
    X = split_images(cfg, "train") if X is None else X
    kb = load_kb(cfg) if cfg.kb.path and Path(cfg.kb.path).exists() else build_kb(cfg, X)
    cond = kb.transform(X).astype(np.float32)
    c = cfg.codec
    codec = JSCCCodec(
        token_dim=c.token_dim, reduction=c.reduction, width=c.width, jscc_width=c.jscc_width, n_blocks=c.n_blocks,
        conditioning_dim=cfg.kb.kb_dim, rate_set=tuple(cfg.entropy.rate_set), eta=cfg.entropy.eta, backbone=c.backbone,
        lambda_rd=c.lambda_rd, train_snr_db=c.train_snr_db, n_steps=c.n_steps, batch_size=c.batch_size,
        learning_rate=c.learning_rate, eta_spread=c.eta_spread, auto_eta=c.auto_eta, uniform_rate_prob=c.uniform_rate_prob,
        random_state=cfg.seed,
    ).fit(X, cond=cond)
    path = out_path or c.checkpoint
    if path is None:
        raise ExperimentError("codec.checkpoint (output path) is not set")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(codec.model_, path, cfg.seed, extra={"lambda_rd": c.lambda_rd, "n_steps": c.n_steps})
    return codec, digest


def train_agent(cfg: ExperimentConfig, out_path=None, X=None) -> ChannelKBAgent:
    """Train the channel-KB agent against the frozen codec checkpoint."""
    X = split_images(cfg, "train") if X is None else X
    ckpt = cfg.codec.checkpoint
    if ckpt is None or not Path(ckpt).exists():
        raise ExperimentError(f"codec checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    codec = JSCCCodec.from_model(model)
    kb = load_kb(cfg)
    r = kb.retrieve(X)
    params = cfg.agent.estimator_params()
    agent = ChannelKBAgent(**params, random_state=cfg.seed).fit(
        X, codec=codec, cond=r.vectors.astype(np.float32), kb_bits=r.bits, codec_hash=file_sha256(ckpt)
    )
    path = out_path or cfg.agent.checkpoint
    if path is None:
        raise ExperimentError("agent.checkpoint (output path) is not set")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    agent.save(path)
    return agent
