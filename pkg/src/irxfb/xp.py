"""Monte Carlo experiments: training data, per-block receiver pipeline, sweeps.

Every block draws its randomness from ``default_rng((master, point, block,
stream))``, so results do not depend on how blocks are scheduled. Blocks are
processed in fixed-size chunks (independent of the worker count) and reduced
in block order.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fec
from .fallback import CostMatrix, bayes_decide, dnn_decide, optimize_costs
from .linkchan import (NOISE_FLOOR, ChannelRealization, LinkConfig, crandn, db_to_lin,
                       draw_channel, transmit)
from .mfdet import DetectorConfig, PenaltyLut, metric_per_format
from .mlp import LossTrace, MlpParams, TrainConfig, fit
from .modem import ALL_FORMATS, ModFormat, build_constellation, posterior_stats
from .rx import eirc, estimate_interference_purified, slic, soft_interference

POLICIES = ("none", "bayes", "dnn", "genie", "always_fallback", "oracle")
FORMAT_MIX = (ModFormat.QPSK, ModFormat.QAM16, ModFormat.QAM64)
MIXED_SNRS_DB = (0.0, 4.0, 8.0, 12.0, 16.0, 20.0)
# throughput runs use a dominant interferer; at INR = SNR cancellation gains little
THROUGHPUT_INR_OFFSET_DB = 10.0
CSV_COLUMNS = ("snr_db", "policy", "p_d", "p_e", "gamma_e1", "gamma_e2", "r_e",
               "p_fallback", "throughput", "n_blocks", "ci_halfwidth")
Z95 = 1.959963984540054


# ---------------------------------------------------------------- training data

@dataclass
class TrainingSet:
    mu: np.ndarray  # (S, M) probability vectors
    labels: np.ndarray  # 1 = detected format wrong
    true_index: np.ndarray
    detected: np.ndarray
    snr_db: np.ndarray


def _point_table(formats) -> np.ndarray:
    tab = np.zeros((len(formats), max(f.order for f in formats)), dtype=np.complex128)
    for i, f in enumerate(formats):
        pts = build_constellation(f).points
        tab[i, : pts.size] = pts
    return tab


def gen_training_set(formats=ALL_FORMATS, snr_spec=MIXED_SNRS_DB, count: int = 640_000,
                     k_tilde: int = 24, seed=0, variant: str = "log_sum_exp",
                     lut: PenaltyLut | None = None, chunk: int = 8192) -> TrainingSet:
    """Labelled metric vectors from the symbols-plus-AWGN estimate model.

    ``snr_spec`` is one dB value or a list drawn with equal probability. The
    true format is uniform over ``formats``; ``label = 0`` when the detector's
    argmax is right.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = DetectorConfig(formats, variant, k_tilde)
    formats = cfg.formats
    snrs = np.atleast_1d(np.asarray(snr_spec, dtype=float))
    orders = np.array([f.order for f in formats])
    table = _point_table(formats)
    rng = np.random.default_rng(seed)
    out = {k: [] for k in ("mu", "labels", "true", "det", "snr")}
    for start in range(0, count, chunk):
        n = min(chunk, count - start)
        fmt = rng.integers(0, len(formats), n)
        snr = snrs[rng.integers(0, snrs.size, n)]
        idx = np.floor(rng.random((n, k_tilde)) * orders[fmt][:, None]).astype(int)
        lin = np.array([db_to_lin(s) for s in snr])
        nv = np.where(lin > 0, 1.0 / np.where(lin > 0, lin, 1.0), np.inf)
        x_hat = table[fmt[:, None], idx] + crandn(rng, (n, k_tilde)) * np.sqrt(nv)[:, None]
        nt = np.broadcast_to(np.maximum(nv, NOISE_FLOOR)[:, None], x_hat.shape)
        mv = metric_per_format(cfg, x_hat, nt, lut)
        det = mv.detected
        out["mu"].append(mv.probs)
        out["labels"].append((det != fmt).astype(np.int8))
        out["true"].append(fmt)
        out["det"].append(det)
        out["snr"].append(snr)
    cat = {k: np.concatenate(v) for k, v in out.items()}
    return TrainingSet(cat["mu"], cat["labels"], cat["true"], cat["det"], cat["snr"])


def train_fallback_net(snr_spec=MIXED_SNRS_DB, cfg: TrainConfig | None = None,
                       formats=ALL_FORMATS, k_tilde: int = 24, data_seed=1, lut=None,
                       restarts: int = 3):
    cfg = cfg or TrainConfig()
    ts = gen_training_set(formats, snr_spec, cfg.total_samples, k_tilde, data_seed, lut=lut)
    return fit(cfg, ts.mu, ts.labels, restarts)


def calibrate_bayes(snr_spec=MIXED_SNRS_DB, count: int = 100_000, formats=ALL_FORMATS,
                    k_tilde: int = 24, seed=2, lut=None) -> CostMatrix:
    """Fit the Bayes fall-back cost on a held-out symbols-plus-AWGN set."""
    ts = gen_training_set(formats, snr_spec, count, k_tilde, seed, lut=lut)
    return optimize_costs(ts.mu, ts.labels, len(tuple(formats)))


def loss_curves(snrs_db=MIXED_SNRS_DB, cfg: TrainConfig | None = None, formats=ALL_FORMATS,
                k_tilde: int = 24, data_seed: int = 0, include_mixture: bool = True,
                restarts: int = 3):
    """Train one network per SNR (and one on the equal-probability mixture).

    Returns ``(traces, summary)``; ``traces`` maps a run name such as
    ``"snr_10"`` or ``"mixture"`` to its :class:`LossTrace`.
    """
    cfg = cfg or TrainConfig(total_samples=64_000)
    traces: dict[str, LossTrace] = {}
    for i, s in enumerate(snrs_db):
        ts = gen_training_set(formats, float(s), cfg.total_samples, k_tilde, (data_seed, i))
        traces[f"snr_{s:g}"] = fit(cfg, ts.mu, ts.labels, restarts)[1]
    per_snr = [t.final for t in traces.values()]
    summary = {name: t.final for name, t in traces.items()}
    summary["mean_per_snr"] = float(np.mean(per_snr))
    if include_mixture:
        ts = gen_training_set(formats, tuple(snrs_db), cfg.total_samples, k_tilde,
                              (data_seed, 1000))
        traces["mixture"] = fit(cfg, ts.mu, ts.labels, restarts)[1]
        summary["mixture"] = traces["mixture"].final
        summary["mixture_rel_gap"] = abs(summary["mixture"] - summary["mean_per_snr"]) \
            / summary["mean_per_snr"]
    return traces, summary


# ---------------------------------------------------------------- reports

@dataclass
class RateReport:
    snr_db: float
    policy: str
    n_blocks: int
    n_correct: int
    n_fb_correct: int  # fell back although the detected format was right
    n_keep_wrong: int  # kept SLIC with a wrong format
    n_fallback: int
    n_ok: int | None = None  # decoded blocks, coded runs only

    @property
    def n_wrong(self) -> int:
        return self.n_blocks - self.n_correct

    @property
    def p_d(self) -> float:
        return self.n_correct / self.n_blocks

    @property
    def p_e(self) -> float:
        return self.n_wrong / self.n_blocks

    @property
    def gamma_e1(self) -> float:
        return self.n_fb_correct / self.n_correct if self.n_correct else math.nan

    @property
    def gamma_e2(self) -> float:
        return self.n_keep_wrong / self.n_wrong if self.n_wrong else math.nan

    @property
    def r_e(self) -> float:
        # an empty conditioning set contributes zero mass
        t1 = self.p_d * self.gamma_e1 if self.n_correct else 0.0
        t2 = self.p_e * self.gamma_e2 if self.n_wrong else 0.0
        return t1 + t2

    @property
    def p_fallback(self) -> float:
        return self.n_fallback / self.n_blocks

    @property
    def throughput(self) -> float | None:
        return None if self.n_ok is None else self.n_ok / self.n_blocks

    @staticmethod
    def halfwidth(p: float, n: int) -> float:
        return Z95 * math.sqrt(max(p * (1.0 - p), 0.0) / n)

    @property
    def ci_r_e(self) -> float:
        return self.halfwidth(self.r_e, self.n_blocks)

    @property
    def ci_fallback(self) -> float:
        return self.halfwidth(self.p_fallback, self.n_blocks)

    @property
    def ci_throughput(self) -> float:
        return self.halfwidth(self.throughput, self.n_blocks)

    @classmethod
    def from_decisions(cls, snr_db, policy, correct, fall_back, ok=None) -> "RateReport":
        correct = np.asarray(correct, dtype=bool)
        fall_back = np.asarray(fall_back, dtype=bool)
        return cls(float(snr_db), policy, int(correct.size), int(correct.sum()),
                   int((fall_back & correct).sum()), int((~fall_back & ~correct).sum()),
                   int(fall_back.sum()), None if ok is None else int(np.sum(ok)))

    def row(self) -> dict:
        thr = self.throughput
        ci = self.ci_r_e if thr is None else self.ci_throughput
        return {"snr_db": self.snr_db, "policy": self.policy, "p_d": self.p_d, "p_e": self.p_e,
                "gamma_e1": self.gamma_e1, "gamma_e2": self.gamma_e2, "r_e": self.r_e,
                "p_fallback": self.p_fallback, "throughput": thr, "n_blocks": self.n_blocks,
                "ci_halfwidth": ci}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.10g}"


def reports_to_csv(reports, header_lines=()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def csv_body(text: str) -> str:
    """The CSV without its ``#`` comment header."""
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


# ---------------------------------------------------------------- sweeps

@dataclass
class Artifacts:
    costs: CostMatrix | None = None
    mlp: MlpParams | None = None
    lut: PenaltyLut | None = None


@dataclass(frozen=True)
class SweepSpec:
    snr_points_db: tuple
    blocks_per_point: int
    link: LinkConfig = field(default_factory=LinkConfig)
    policies: tuple = ("none",)
    seed: int = 0
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    format_mix: tuple | None = FORMAT_MIX  # None: use the link's formats
    coded: bool = False
    inr_offset_db: float = 0.0  # INR = SNR + offset
    chunk_size: int = 250

    def __post_init__(self):
        if self.blocks_per_point < 1:
            raise ValueError("blocks_per_point must be >= 1")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ValueError(f"unknown policies {bad}")
        if self.format_mix is not None:
            object.__setattr__(self, "format_mix",
                               tuple(ModFormat.parse(f) for f in self.format_mix))

    def link_at(self, snr_db: float) -> LinkConfig:
        link = replace(self.link, snr_db=snr_db, inr_db=snr_db + self.inr_offset_db)
        if self.coded:
            cs = build_constellation(link.desired_format)
            per_block = cs.bits_per_symbol * link.k1_layers
            n_coded = fec.coded_length(fec.INFO_BITS)
            if n_coded % per_block:
                raise ValueError("coded block does not fill whole symbols")
            link = replace(link, block_len=n_coded // per_block)
        return link


def _check_artifacts(policies, art: Artifacts):
    if "bayes" in policies and art.costs is None:
        raise ValueError("policy 'bayes' needs a cost matrix")
    if "dnn" in policies and art.mlp is None:
        raise ValueError("policy 'dnn' needs trained MLP weights")


@dataclass
class _Blocks:
    chan: ChannelRealization
    y: np.ndarray
    s_fmt: np.ndarray  # format per block
    x_fmt: np.ndarray
    info: np.ndarray | None
    s_symbols: np.ndarray
    x_symbols: np.ndarray


def draw_blocks(spec: SweepSpec, point: int, start: int, stop: int) -> _Blocks:
    base = spec.link_at(float(spec.snr_points_db[point]))
    hs, gs, ys, sf, xf, info, ss, xs = [], [], [], [], [], [], [], []
    for b in range(start, stop):
        key = (spec.seed, point, b)
        link = base
        if spec.format_mix is not None:
            r = np.random.default_rng(key + (2,))
            pick = r.integers(0, len(spec.format_mix), 2)
            link = replace(base, desired_format=spec.format_mix[pick[0]],
                           interference_format=spec.format_mix[pick[1]])
        chan = draw_channel(link, key + (0,))
        bits = None
        if spec.coded:
            msg = np.random.default_rng(key + (3,)).integers(0, 2, fec.INFO_BITS, dtype=np.uint8)
            info.append(msg)
            bits = fec.encode(msg)
        tx, y = transmit(link, chan, key + (1,), bits)
        hs.append(chan.h)
        gs.append(chan.g)
        ys.append(y)
        ss.append(tx.s_symbols)
        xs.append(tx.x_symbols)
        sf.append(link.desired_format)
        xf.append(link.interference_format)
    chan = ChannelRealization(np.stack(hs), np.stack(gs), 1.0)
    return _Blocks(chan, np.stack(ys), np.array(sf, dtype=object), np.array(xf, dtype=object),
                   np.stack(info) if info else None, np.stack(ss), np.stack(xs))


def _sub(chan: ChannelRealization, mask) -> ChannelRealization:
    return ChannelRealization(chan.h[mask], chan.g[mask], chan.n0)


def _desired_soft(eq, s_fmt):
    obs, var = eq.unbiased()
    mean = np.empty_like(obs)
    v = np.empty(obs.shape)
    for f in set(s_fmt):
        m = s_fmt == f
        st = posterior_stats(obs[m], var[m], build_constellation(f))
        mean[m], v[m] = st.mean, st.variance
    return mean, v


def _decode_ok(eq, s_fmt, info) -> np.ndarray:
    obs, var = eq.unbiased()
    ok = np.empty(len(obs), dtype=bool)
    for f in set(s_fmt):
        m = s_fmt == f
        # symbols leave the transmitter sample-major, layer-minor
        sym = np.swapaxes(obs[m], -1, -2).reshape(int(m.sum()), -1)
        nv = np.swapaxes(var[m], -1, -2).reshape(sym.shape)
        llr = fec.bit_llrs(sym, nv, build_constellation(f))
        dec = fec.viterbi_decode(llr.reshape(len(sym), -1))
        ok[m] = np.all(dec == info[m], axis=1)
    return ok


@dataclass
class BlockRecords:
    """Per-block outcomes of one chunk (arrays indexed by block)."""

    true_index: np.ndarray
    detected: np.ndarray
    correct: np.ndarray
    mu: np.ndarray
    fall_back: dict
    chosen: dict
    ok: dict = field(default_factory=dict)


def process_blocks(blocks: _Blocks, spec: SweepSpec, art: Artifacts, policies) -> BlockRecords:
    """The full receiver run on a stack of blocks, for several policies at once.

    eIRC soft estimate of ``s`` -> purified interference estimate -> format
    metric on the first ``k_tilde`` estimates -> fall-back decision -> eIRC
    output on fall-back, SLIC with the decided format otherwise.
    """
    det_cfg = spec.detector
    chan, y = blocks.chan, blocks.y
    eq = eirc(chan, y)
    s_mean, s_var = _desired_soft(eq, blocks.s_fmt)
    xi = estimate_interference_purified(chan, y, s_mean, s_var)
    obs, nv = xi.unbiased()
    kd = max(det_cfg.k_tilde // obs.shape[-2], 1)
    bsz = len(obs)
    x_det = obs[..., :kd].reshape(bsz, -1)
    n_det = nv[..., :kd].reshape(bsz, -1)
    mv = metric_per_format(det_cfg, x_det, n_det, art.lut)
    detected = mv.detected
    true = np.array([det_cfg.index_of(f) for f in blocks.x_fmt])
    correct = detected == true
    n_fmt = len(det_cfg.formats)

    fall_back, chosen = {}, {}
    for p in policies:
        if p == "bayes":
            d = bayes_decide(art.costs, mv)
            fall_back[p], chosen[p] = d.fall_back, d.chosen_hypothesis
        elif p == "dnn":
            d = dnn_decide(art.mlp, mv)
            fall_back[p], chosen[p] = d.fall_back, d.chosen_hypothesis
        else:
            fb = {"none": np.zeros(bsz, bool), "genie": np.zeros(bsz, bool),
                  "always_fallback": np.ones(bsz, bool), "oracle": ~correct}[p]
            fall_back[p] = fb
            base = true if p == "genie" else detected
            chosen[p] = np.where(fb, n_fmt, base)
    rec = BlockRecords(true, detected, correct, mv.probs, fall_back, chosen)
    if not spec.coded:
        return rec

    ok_eirc = _decode_ok(eq, blocks.s_fmt, blocks.info)
    cache: dict[bytes, np.ndarray] = {}

    def slic_ok(fmt_index):
        key = fmt_index.tobytes()
        if key not in cache:
            ok = np.zeros(bsz, dtype=bool)
            for i in np.unique(fmt_index):
                if i >= n_fmt:
                    continue
                m = fmt_index == i
                xs = soft_interference(_take(xi, m), build_constellation(det_cfg.formats[i]))
                out = slic(_sub(chan, m), y[m], xs)
                ok[m] = _decode_ok(out, blocks.s_fmt[m], blocks.info[m])
            cache[key] = ok
        return cache[key]

    for p in policies:
        fb = fall_back[p]
        hyp = np.where(fb, n_fmt, chosen[p])
        rec.ok[p] = np.where(fb, ok_eirc, slic_ok(np.where(fb, detected, hyp)))
    return rec


def _take(xi, mask):
    return type(xi)(xi.x_hat[mask], xi.n_tilde[mask], xi.gain[mask],
                    None if xi.c_x is None else xi.c_x[mask])


def run_block(link: LinkConfig, chan: ChannelRealization, y, policy: str, art: Artifacts,
              detector: DetectorConfig | None = None, info_bits=None):
    """Single-block pipeline; returns a dict describing what the receiver did.

    ``chan``/``y`` are one block (``(n, K1)``, ``(n, K)``). With ``info_bits``
    the desired stream is decoded and ``ok`` reports block success.
    """
    _check_artifacts((policy,), art)
    detector = detector or DetectorConfig()
    blocks = _Blocks(ChannelRealization(chan.h[None], chan.g[None], chan.n0), np.asarray(y)[None],
                     np.array([link.desired_format], dtype=object),
                     np.array([link.interference_format], dtype=object),
                     None if info_bits is None else np.asarray(info_bits)[None], None, None)
    spec = SweepSpec((link.snr_db,), 1, link, (policy,), detector=detector, format_mix=None,
                     coded=info_bits is not None)
    rec = process_blocks(blocks, spec, art, (policy,))
    fb = bool(rec.fall_back[policy][0])
    det_fmt = detector.formats[rec.detected[0]]
    eq = eirc(chan, y)
    receiver = "eirc"
    if not fb:
        s_mean, s_var = _desired_soft(_expand(eq), blocks.s_fmt)
        xi = estimate_interference_purified(chan, y, s_mean[0], s_var[0])
        fmt = detector.formats[rec.chosen[policy][0]]
        eq = slic(chan, y, soft_interference(xi, build_constellation(fmt)))
        receiver = "slic"
    out = {"true_format": link.interference_format, "detected_format": det_fmt,
           "correct": bool(rec.correct[0]), "fall_back": fb,
           "chosen_hypothesis": int(rec.chosen[policy][0]), "mu": rec.mu[0],
           "receiver": receiver, "equalized": eq}
    if info_bits is not None:
        out["ok"] = bool(rec.ok[policy][0])
    return out


def _expand(eq):
    return type(eq)(eq.s_tilde[None], eq.per_layer_noise[None], eq.gain[None])


def _run_chunk(args):
    spec, art, policies, point, start, stop = args
    blocks = draw_blocks(spec, point, start, stop)
    rec = process_blocks(blocks, spec, art, policies)
    return rec


def simulate_point(spec: SweepSpec, art: Artifacts, point: int, workers: int = 1,
                   policies=None):
    """Per-block records of one SNR point, concatenated in block order."""
    policies = tuple(policies or spec.policies)
    _check_artifacts(policies, art)
    n = spec.blocks_per_point
    jobs = [(spec, art, policies, point, s, min(s + spec.chunk_size, n))
            for s in range(0, n, spec.chunk_size)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            recs = list(ex.map(_run_chunk, jobs))
    else:
        recs = [_run_chunk(j) for j in jobs]
    cat = lambda get: np.concatenate([get(r) for r in recs])  # noqa: E731
    merged = BlockRecords(cat(lambda r: r.true_index), cat(lambda r: r.detected),
                          cat(lambda r: r.correct), cat(lambda r: r.mu),
                          {p: cat(lambda r, p=p: r.fall_back[p]) for p in policies},
                          {p: cat(lambda r, p=p: r.chosen[p]) for p in policies})
    if spec.coded:
        merged.ok = {p: cat(lambda r, p=p: r.ok[p]) for p in policies}
    return merged


def _sweep(spec: SweepSpec, art: Artifacts, workers: int):
    reports = []
    for i, snr in enumerate(spec.snr_points_db):
        rec = simulate_point(spec, art, i, workers)
        for p in spec.policies:
            ok = rec.ok.get(p) if spec.coded else None
            reports.append(RateReport.from_decisions(snr, p, rec.correct, rec.fall_back[p], ok))
    return reports


def error_rate_sweep(spec: SweepSpec, art: Artifacts, workers: int = 1) -> list[RateReport]:
    """Detection and fall-back rates per SNR point and policy."""
    return _sweep(replace(spec, coded=False), art, workers)


def throughput_sweep(spec: SweepSpec, art: Artifacts, workers: int = 1) -> list[RateReport]:
    """Fraction of correctly decoded coded blocks per SNR point and policy."""
    return _sweep(replace(spec, coded=True), art, workers)


def crossing_db(snr_db, values, level: float = 0.9) -> float:
    """First SNR where a (roughly increasing) curve reaches ``level``, by linear interpolation."""
    snr_db = np.asarray(snr_db, dtype=float)
    values = np.asarray(values, dtype=float)
    above = np.nonzero(values >= level)[0]
    if above.size == 0:
        return math.inf
    j = above[0]
    if j == 0:
        return float(snr_db[0])
    x0, x1, v0, v1 = snr_db[j - 1], snr_db[j], values[j - 1], values[j]
    return float(x0 + (level - v0) * (x1 - x0) / (v1 - v0))
