"""Network files, time-series CSVs and result tables.

Network files are JSON documents::

    {
      "format": "gridflow-network", "version": 1,
      "meta": {"T": 1, "h": 1.0, "probabilities": [1.0], "name": "three-bus"},
      "devices": [
        {"name": "gen1", "kind": "generic_generator",
         "params": {"alpha": 0.02, "beta": 30, "p_max": 1000}},
        {"name": "load1", "kind": "fixed_load", "params": {},
         "series": {"p_fix": "load1.csv"}}
      ],
      "nets": [{"name": "net1", "members": ["gen1.0", "load1.0"]}]
    }

Infinite bounds are written as the strings ``"inf"`` / ``"-inf"``.  Series
references are CSV paths relative to the network file.
"""

from __future__ import annotations

import csv
import json
import math
import os
from datetime import datetime, timedelta

import numpy as np

from .devices import DEVICE_KINDS, Composite, Device, ValidationError
from .network import Network

FORMAT = "gridflow-network"
VERSION = 1


class FileFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


# ---------------------------------------------------------------------------
# devices
# ---------------------------------------------------------------------------


def _encode(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    if isinstance(v, (list, tuple)):
        return [_encode(x) for x in v]
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, (np.floating, np.integer)):
        return _encode(v.item())
    return v


def _decode(v):
    if isinstance(v, str) and v in ("inf", "+inf", "-inf", "nan"):
        return float(v)
    if isinstance(v, list):
        return [_decode(x) for x in v]
    if isinstance(v, dict):
        return {k: _decode(x) for k, x in v.items()}
    return v


def device_to_dict(dev: Device) -> dict:
    return {"kind": dev.kind, "params": _encode(dev.params())}


def device_from_dict(d: dict) -> Device:
    kind = d.get("kind")
    if kind not in DEVICE_KINDS:
        raise ValidationError(f"kind: unknown device kind '{kind}'")
    cls = DEVICE_KINDS[kind]
    params = _decode(dict(d.get("params", {})))
    if cls is Composite:
        params["devices"] = {k: device_from_dict(v) for k, v in params.get("devices", {}).items()}
        params["nets"] = [tuple(n) for n in params.get("nets", [])]
    try:
        return cls(**params)
    except TypeError as e:
        raise ValidationError(f"{kind}: {e}") from None


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    nets = []
    for n in net.nets:
        refs = []
        for m in n.members:
            t = net.terminals[m]
            refs.append(f"{net.device_names[t.device_id]}.{t.local_index}")
        nets.append({"name": n.net_id, "members": refs})
    meta = {"T": net.T, "h": net.h, "S": net.S, "probabilities": net.probabilities.tolist()}
    if net.name:
        meta["name"] = net.name
    return {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta,
        "devices": [{"name": name, **device_to_dict(dev)} for name, dev in zip(net.device_names, net.devices)],
        "nets": nets,
    }


def network_from_dict(doc: dict, base_dir: str = ".", path=None) -> Network:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise FileFormatError(f"not a network file (expected format '{FORMAT}')", path)
    if doc.get("version") != VERSION:
        raise FileFormatError(f"unsupported network file version {doc.get('version')!r}", path)
    meta = doc.get("meta", {})
    T = int(meta.get("T", 1))
    probs = meta.get("probabilities")
    if probs is None and int(meta.get("S", 1)) > 1:
        probs = [1.0 / int(meta["S"])] * int(meta["S"])
    net = Network(T=T, h=float(meta.get("h", 1.0)), probabilities=probs, name=meta.get("name"))
    for i, entry in enumerate(doc.get("devices", [])):
        name = entry.get("name")
        if not name:
            raise FileFormatError(f"device #{i} has no name", path)
        entry = dict(entry)
        params = dict(entry.get("params", {}))
        for param, ref in (entry.get("series") or {}).items():
            series_path = ref if os.path.isabs(ref) else os.path.join(base_dir, ref)
            _, values = read_series(series_path)
            if values.shape[0] != T:
                raise ValidationError(f"{name}.{param}: series '{ref}' has {values.shape[0]} rows, expected {T}")
            if values.ndim == 2 and values.shape[1] == 1:
                values = values[:, 0]
            params[param] = values.tolist()
        entry["params"] = params
        try:
            dev = device_from_dict(entry)
        except ValidationError as e:
            raise ValidationError(e.errors, name) from None
        net.add_device(dev, name)
    for n in doc.get("nets", []):
        name = n.get("name")
        members = n.get("members", [])
        if not members:
            net.add_net(name)
        else:
            net.connect(*members, net=name)
    net.validate()
    return net


def load_network(path) -> Network:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"invalid JSON: {e.msg}", path, e.lineno) from None
    return network_from_dict(doc, os.path.dirname(os.path.abspath(path)), path)


def save_network(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# time series
# ---------------------------------------------------------------------------


def read_series(path):
    """Read a ``timestamp,value[,...]`` CSV.

    Returns ``(timestamps, values)`` with values of shape ``(n,)`` for one
    value column and ``(n, k)`` otherwise.  Timestamps must be ISO-8601 and
    uniformly spaced.
    """
    path = os.fspath(path)
    stamps, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError("empty file", path, 1) from None
        if not header or header[0].strip().lower() != "timestamp" or len(header) < 2:
            raise FileFormatError("header must start with 'timestamp' followed by value columns", path, 1)
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise FileFormatError(f"expected {width} fields, got {len(row)}", path, lineno)
            try:
                stamps.append(datetime.fromisoformat(row[0].strip()))
            except ValueError:
                raise FileFormatError(f"bad ISO-8601 timestamp '{row[0]}'", path, lineno) from None
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError:
                raise FileFormatError("non-numeric value", path, lineno) from None
    if not rows:
        raise FileFormatError("no data rows", path)
    if len(stamps) > 1:
        step = stamps[1] - stamps[0]
        if step.total_seconds() <= 0:
            raise FileFormatError("timestamps must increase", path, 3)
        for i in range(2, len(stamps)):
            if stamps[i] - stamps[i - 1] != step:
                raise FileFormatError("timestamps are not uniformly spaced", path, i + 2)
    values = np.array(rows, float)
    if values.shape[1] == 1:
        values = values[:, 0]
    return stamps, values


def series_step(stamps) -> timedelta:
    return stamps[1] - stamps[0] if len(stamps) > 1 else timedelta(hours=1)


def write_series(path, values, start: datetime | None = None, step: timedelta | None = None,
                 columns=None) -> None:
    """Write values (``(n,)`` or ``(n, k)``) with uniformly spaced timestamps."""
    v = np.asarray(values, float)
    if v.ndim == 1:
        v = v[:, None]
    start = start or datetime(2000, 1, 1)
    step = step or timedelta(hours=1)
    if columns is None:
        columns = ["value"] if v.shape[1] == 1 else [f"value_{k}" for k in range(v.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *columns])
        for i, row in enumerate(v):
            w.writerow([(start + i * step).isoformat(), *(repr(float(x)) for x in row)])


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------

LINE_WIDTH = 31


def fmt_power(x: float) -> str:
    return f"{x:.2f}"


def fmt_price(x: float) -> str:
    return f"{x:.4f}"


def fmt_payment(x: float) -> str:
    return f"{x:.2f}"


def _block(title: str, column: str, rows) -> list[str]:
    out = [title + column.rjust(LINE_WIDTH - len(title)),
           "-" * len(title) + ("-" * len(column)).rjust(LINE_WIDTH - len(title))]
    for label, value in rows:
        pad = LINE_WIDTH - len(label)
        out.append(label + (value.rjust(pad) if pad > len(value) else " " + value))
    return out


def _suffix(net: Network, t: int, s: int) -> str:
    out = ""
    if net.T > 1:
        out += f"@t{t}"
    if net.S > 1:
        out += f"@s{s}"
    return out


def summary_rows(solution, ledger):
    """The three summary blocks as lists of ``(label, text)`` pairs."""
    net = solution.network
    T, S = net.T, net.S
    powers = [
        (net.terminal_label(m) + _suffix(net, t, s), fmt_power(solution.p[m, t, s]))
        for m in range(net.M) for s in range(S) for t in range(T)
    ]
    prices = [
        (name + _suffix(net, t, s), fmt_price(solution.prices[i, t, s]))
        for i, name in enumerate(net.net_names) for s in range(S) for t in range(T)
    ]
    pays = [(name, fmt_payment(ledger.total[d])) for d, name in enumerate(ledger.device_names)]
    return powers, prices, pays


def format_summary(solution, ledger) -> str:
    powers, prices, pays = summary_rows(solution, ledger)
    lines = _block("Terminal", "Power", powers) + [""]
    lines += _block("Net", "Price", prices) + [""]
    lines += _block("Device", "Payment", pays)
    return "\n".join(lines) + "\n"


def write_flows(path, solution) -> None:
    net = solution.network
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device", "terminal", "period", "scenario", "power_mw"])
        for m, term in enumerate(net.terminals):
            for s in range(net.S):
                for t in range(net.T):
                    w.writerow([net.device_names[term.device_id], term.local_index, t, s,
                                repr(float(solution.p[m, t, s]))])


def write_prices(path, solution) -> None:
    net = solution.network
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["net", "period", "scenario", "price_per_mw"])
        for i, name in enumerate(net.net_names):
            for s in range(net.S):
                for t in range(net.T):
                    w.writerow([name, t, s, repr(float(solution.prices[i, t, s]))])


def write_payments(path, ledger) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device", "period", "payment"])
        for d, name in enumerate(ledger.device_names):
            for t in range(ledger.by_period.shape[1]):
                w.writerow([name, t, repr(float(ledger.by_period[d, t]))])


def format_payment_table(totals: dict, title: str = "Device", column: str = "Payment") -> str:
    return "\n".join(_block(title, column, [(k, fmt_payment(v)) for k, v in totals.items()])) + "\n"
