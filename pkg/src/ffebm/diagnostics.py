"""Static gradient analysis: truncated EP / ID gradient traces, cosine
reports, and CSV/JSON serialization.

The EP trace of a parameter at step ``t`` is the centered estimate formed
from the two nudged states after ``t`` steps; the ID trace at ``t`` is the
sum of the loss sensitivities of the last ``t`` re-executed steps.  Both use
the same code paths as the full engines, so their endpoints at ``t = T``
equal the engine outputs exactly.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .engines import EngineSettings, _check_converged, _ep, _id, ep_block_gradients
from .errors import UsageError
from .feedforward import ff_param_vjp
from .model import forward_inference

CSV_COLUMNS = ["block", "layer", "param_path", "entry", "t", "g_ep", "g_id"]


@dataclass
class TraceSeries:
    param_path: str
    block: int  # 1-based
    layer: str  # e.g. "theta0", "bias1", "ff.weight"
    entry: int  # flat index into the parameter tensor
    g_ep: np.ndarray  # length T + 1
    g_id: np.ndarray
    t_offset: int = 0  # start of this block's window on the global backward clock


@dataclass
class GDUTrace:
    T: int
    beta: float
    series: List[TraceSeries] = field(default_factory=list)

    def discrepancies(self):
        """Per series: max_t |g_ep - g_id| / max_t |g_id|."""
        out = []
        for s in self.series:
            scale = np.max(np.abs(s.g_id))
            diff = np.max(np.abs(s.g_ep - s.g_id))
            out.append(0.0 if scale == 0 and diff == 0 else diff / scale if scale else np.inf)
        return np.array(out)

    def fraction_matching(self, tol=0.05):
        d = self.discrepancies()
        return float(np.mean(d <= tol)) if d.size else 1.0


def default_tracked_entries(model, per_tensor=5, seed=0, include_ff=True):
    """A few random entries of every EB (and optionally feedforward) tensor."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in model.store.trainable_keys():
        if name.startswith("readout") or (not include_ff and ".ff." in name):
            continue
        size = model.store[name].size
        out[name] = sorted(rng.choice(size, size=min(per_tensor, size), replace=False).tolist())
    return out


def _split_name(name):
    block, part, role = name.split(".", 2)
    return int(block[len("block"):]), role if part == "eb" else f"ff.{role}"


def gdu_traces(model, x, y, beta, T, tracked_entries=None, T_free=None, schedule=None,
               record=None):
    """Truncated EP and ID gradient series for the tracked entries."""
    if record is None:
        record = forward_inference(model, x, mode="train", T=T_free or model.config.T_free,
                                   schedule=schedule)
    _check_converged(model, record)
    settings = EngineSettings(beta=beta, T_free=T_free or model.config.T_free, T_nudge=T,
                              schedule=schedule)
    tracked = tracked_entries if tracked_entries is not None else default_tracked_entries(model)
    unknown = set(tracked) - set(model.store.trainable_keys())
    if unknown:
        raise UsageError(f"unknown parameters in tracked entries: {sorted(unknown)}")
    _, _, pairs = _ep(model, record, y, settings, explicit=False, keep_trajectories=True)
    _, passes = _id(model, record, y, settings, record_steps=True)
    N = model.num_blocks

    ep_series = {}  # name -> (T+1, n_tracked)
    id_series = {}
    for k in range(N):
        names = [n for n in tracked if n.startswith(f"block{k + 1}.")]
        if not names:
            continue
        tp, tm = pairs[k].trajectories
        ep_rows = {n: [] for n in names}
        for t in range(T + 1):
            gw, gb, g_ff, _ = ep_block_gradients(model, record, k, tp[t], tm[t], beta)
            full = _named(model, k, gw, gb, g_ff)
            for n in names:
                ep_rows[n].append(full[n].reshape(-1)[tracked[n]])
        # ID: prefix sums of per-step sensitivities, accumulated exactly as the
        # engine accumulates them
        p = model.eb_params(k)
        acc_w = [np.zeros_like(w) for w in p.weights]
        acc_b = [None if b is None else np.zeros_like(b) for b in p.biases]
        acc_x = np.zeros_like(record.xs[k])
        ffp = model.ff_params(k)
        id_rows = {n: [np.zeros(len(tracked[n]))] for n in names}
        for sw, sb, sdx in passes[k]:
            for a, b in zip(acc_w, sw):
                a += b
            for a, b in zip(acc_b, sb):
                if a is not None:
                    a += b
            acc_x += sdx
            g_ff = ff_param_vjp(ffp, record.caches[k], acc_x) if any(".ff." in n for n in names) else {}
            full = _named(model, k, acc_w, acc_b, g_ff)
            for n in names:
                id_rows[n].append(full[n].reshape(-1)[tracked[n]].copy())
        for n in names:
            ep_series[n] = np.array(ep_rows[n], dtype=np.float64)
            id_series[n] = np.array(id_rows[n], dtype=np.float64)

    trace = GDUTrace(T=T, beta=beta)
    # Fig.-2 ordering: the last block first on the backward clock
    order = sorted(tracked, key=lambda n: (-_split_name(n)[0], n))
    for n in order:
        blk, layer = _split_name(n)
        offset = (N - blk) * T
        for j, entry in enumerate(tracked[n]):
            trace.series.append(TraceSeries(n, blk, layer, int(entry), ep_series[n][:, j],
                                            id_series[n][:, j], offset))
    return trace


def _named(model, k, gw, gb, g_ff):
    out = {}
    for l, v in enumerate(gw):
        out[model.param_name(k, "eb", "theta", l)] = v
    for l, v in enumerate(gb):
        if v is not None:
            out[model.param_name(k, "eb", "bias", l)] = v
    for r, v in g_ff.items():
        out[model.param_name(k, "ff", r)] = v
    return out


def cosine_report(a, b):
    """Per-tensor cosine similarity and relative L2 (of ``a`` against ``b``)."""
    if set(a) != set(b):
        raise UsageError(f"gradient sets differ: {sorted(set(a) ^ set(b))}")
    out = {}
    for name in a:
        u = np.asarray(a[name], dtype=np.float64).reshape(-1)
        v = np.asarray(b[name], dtype=np.float64).reshape(-1)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            cos = 1.0 if nu == nv == 0 else 0.0
        else:
            cos = float(u @ v / (nu * nv))
        rel = float(np.linalg.norm(u - v) / nv) if nv else (0.0 if nu == 0 else float("inf"))
        out[name] = {"cosine": cos, "rel_l2": rel}
    return out


def _trace_rows(trace):
    for s in trace.series:
        for t in range(len(s.g_ep)):
            yield [s.block, s.layer, s.param_path, s.entry, t, repr(float(s.g_ep[t])),
                   repr(float(s.g_id[t]))]


def emit_report(obj, path, fmt="csv"):
    """Write a :class:`GDUTrace` or a cosine report as CSV or JSON."""
    if fmt not in ("csv", "json"):
        raise UsageError(f"unknown report format {fmt!r}")
    try:
        fh = open(path, "w", newline="")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e
    with fh:
        if isinstance(obj, GDUTrace):
            if fmt == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                w.writerows(_trace_rows(obj))
            else:
                json.dump(trace_to_json(obj), fh, indent=1)
        else:
            if fmt == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["param_path", "cosine", "rel_l2"])
                for name in sorted(obj):
                    w.writerow([name, repr(obj[name]["cosine"]), repr(obj[name]["rel_l2"])])
            else:
                json.dump({k: obj[k] for k in sorted(obj)}, fh, indent=1)


def trace_to_json(trace):
    return {
        "T": trace.T,
        "beta": trace.beta,
        "series": [{"block": s.block, "layer": s.layer, "param_path": s.param_path,
                    "entry": s.entry, "t_offset": s.t_offset,
                    "g_ep": [float(v) for v in s.g_ep], "g_id": [float(v) for v in s.g_id]}
                   for s in trace.series],
    }


def read_trace_csv(path):
    """Parse a trace CSV back into ``{(param_path, entry): (t, g_ep, g_id)}``."""
    out = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {header}")
        for row in r:
            key = (row[2], int(row[3]))
            ts, ep, idv = out.setdefault(key, ([], [], []))
            ts.append(int(row[4]))
            ep.append(float(row[5]))
            idv.append(float(row[6]))
    return {k: tuple(np.array(v) for v in vals) for k, vals in out.items()}
